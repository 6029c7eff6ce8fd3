use std::path::Path;

use super::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VHDC";
const VERSION: u32 = 1;

/// Named-array container: `(name, shape, f32 data)` records plus a config
/// echo string. Encoding is little-endian and depends only on the contents.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub config: String,
    pub arrays: Vec<NamedArray>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Checkpoint {
    pub fn new(config: impl Into<String>) -> Self {
        Checkpoint {
            config: config.into(),
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}: shape");
        self.arrays.push(NamedArray {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
    }

    /// Adds every array of `store` under `prefix/`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for id in store.ids() {
            self.push(
                &format!("{prefix}/{}", store.name(id)),
                store.shape(id),
                store.value(id).to_vec(),
            );
        }
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no array `{name}`")))
    }

    /// Fills `store` from the arrays saved under `prefix/`, checking shapes.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}/{}", store.name(id));
            let arr = self.get(&name)?;
            if arr.shape != store.shape(id) {
                return Err(Error::Shape(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    arr.shape,
                    store.shape(id)
                )));
            }
            store.value_mut(id).copy_from_slice(&arr.data);
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(a.shape.len() as u8);
            for &d in &a.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &a.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.err(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(4, &format!("unsupported version {version}")));
        }
        let clen = r.u32()? as usize;
        let at = r.pos;
        let config = String::from_utf8(r.take(clen)?.to_vec())
            .map_err(|_| r.err(at as u64, "config is not UTF-8"))?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| r.err(at as u64, "array name is not UTF-8"))?;
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| r.err(r.pos as u64, "array too large"))?;
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos as u64, "trailing bytes"));
        }
        Ok(Checkpoint { config, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::path(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::path(path, e))?;
        Checkpoint::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: u64, detail: &str) -> Error {
        Error::Format {
            offset,
            detail: detail.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.pos as u64, "unexpected end of checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ps = ParamStore::new();
        ps.add("w", &[2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.5, f32::MIN_POSITIVE]);
        ps.add("b", &[3], vec![0.0, -0.0, 7.0]);
        let mut ck = Checkpoint::new("{\"k\":1}");
        ck.push_store("net", &ps);
        ck.push("rff", &[], vec![9.0]);
        ck
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        let bits = |c: &Checkpoint| {
            c.arrays
                .iter()
                .flat_map(|a| a.data.iter().map(|x| x.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&back), bits(&ck));
        assert_eq!(back.config, ck.config);
    }

    #[test]
    fn load_store_checks_shapes() {
        let ck = sample();
        let mut ps = ParamStore::new();
        ps.add("w", &[2, 3], vec![0.0; 6]);
        ps.add("b", &[3], vec![0.0; 3]);
        ck.load_store("net", &mut ps).unwrap();
        assert_eq!(ps.value(ps.id("b").unwrap())[2], 7.0);
        let mut bad = ParamStore::new();
        bad.add("w", &[3, 2], vec![0.0; 6]);
        assert!(matches!(ck.load_store("net", &mut bad), Err(Error::Shape(_))));
        let mut missing = ParamStore::new();
        missing.add("z", &[1], vec![0.0]);
        assert!(ck.load_store("net", &mut missing).is_err());
    }

    #[test]
    fn truncation_and_magic_errors_carry_offsets() {
        let bytes = sample().encode();
        for cut in [0, 3, 10, bytes.len() - 1] {
            let e = Checkpoint::decode(&bytes[..cut]).unwrap_err();
            assert!(matches!(e, Error::Format { .. }), "{cut}: {e}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }
}
