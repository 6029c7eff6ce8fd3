//! Run configuration (TOML) and reproducibility manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::GenCfg;
use crate::diffusion::{CropMode, PlannerTrainCfg};
use crate::error::{Error, Result};
use crate::eval::EvalCfg;
use crate::lp::{HorizonCfg, LpTrainCfg};
use crate::maze::{Dynamics, MazeSpec};

/// Horizon regime of a layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutDefaults {
    pub fixed_horizons: [usize; 3],
    pub eps: f64,
}

impl LayoutDefaults {
    pub fn for_layout(name: &str) -> Self {
        match name {
            "medium" => LayoutDefaults {
                fixed_horizons: [192, 288, 384],
                eps: 0.03,
            },
            "large" => LayoutDefaults {
                fixed_horizons: [256, 384, 512],
                eps: 0.03,
            },
            _ => LayoutDefaults {
                fixed_horizons: [64, 128, 192],
                eps: 0.04,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MazeCfg {
    /// Built-in layout name, or the name recorded for `file`.
    pub name: String,
    /// Optional `#`/`.` grid file replacing the built-in layout.
    pub file: Option<PathBuf>,
    pub cell_size: f64,
    pub dynamics: Dynamics,
}

impl Default for MazeCfg {
    fn default() -> Self {
        MazeCfg {
            name: "umaze".into(),
            file: None,
            cell_size: 0.4,
            dynamics: Dynamics::default(),
        }
    }
}

impl MazeCfg {
    pub fn build(&self) -> Result<MazeSpec> {
        match &self.file {
            Some(path) => MazeSpec::from_file(path, self.cell_size, self.dynamics),
            None => {
                let spec = MazeSpec::builtin(&self.name)?;
                if self.dynamics == Dynamics::default() && self.cell_size == spec.cell_size {
                    Ok(spec)
                } else {
                    let grid = (0..spec.rows())
                        .map(|r| (0..spec.cols()).map(|c| spec.is_wall(r, c)).collect())
                        .collect();
                    MazeSpec::new(&self.name, grid, self.cell_size, self.dynamics)
                }
            }
        }
    }
}

/// Every knob of a full run. Layout-level values (`fixed_horizons`, `eps`,
/// `t_max`, `l_min`) are copied into the nested sections by [`RunConfig::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub maze: MazeCfg,
    /// Fixed-horizon baselines H₁ < H₂ < H₃; the largest is `T_max`.
    pub fixed_horizons: Option<[usize; 3]>,
    pub eps: Option<f64>,
    pub l_min: usize,
    pub data: GenCfg,
    pub lp: LpTrainCfg,
    pub horizon: HorizonCfg,
    pub planner: PlannerTrainCfg,
    pub eval: EvalCfg,
    pub n_test: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            maze: MazeCfg::default(),
            fixed_horizons: None,
            eps: None,
            l_min: 16,
            data: GenCfg::default(),
            lp: LpTrainCfg::default(),
            horizon: HorizonCfg::default(),
            planner: PlannerTrainCfg::default(),
            eval: EvalCfg::default(),
            n_test: 1000,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn layout(&self) -> LayoutDefaults {
        let d = LayoutDefaults::for_layout(&self.maze.name);
        LayoutDefaults {
            fixed_horizons: self.fixed_horizons.unwrap_or(d.fixed_horizons),
            eps: self.eps.unwrap_or(d.eps),
        }
    }

    pub fn t_max(&self) -> usize {
        self.layout().fixed_horizons[2]
    }

    /// Fills the layout-derived fields and validates them.
    pub fn resolve(mut self) -> Result<Self> {
        let lay = self.layout();
        let [h1, h2, h3] = lay.fixed_horizons;
        if !(self.l_min >= 2 && self.l_min <= h1 && h1 <= h2 && h2 <= h3) || !(lay.eps > 0.0) {
            return Err(Error::Config(
                "need 2 ≤ l_min ≤ H₁ ≤ H₂ ≤ H₃ and a positive eps".into(),
            ));
        }
        self.fixed_horizons = Some(lay.fixed_horizons);
        self.eps = Some(lay.eps);
        self.lp.arch.t_max = h3;
        self.lp.arch.eps = lay.eps;
        self.horizon.t_max = h3;
        self.horizon.l_min = self.l_min;
        self.planner.crop = CropMode::Variable {
            l_min: self.l_min,
            t_max: h3,
        };
        self.eval.eps = lay.eps;
        self.horizon.validate()?;
        self.lp.curriculum.validate()?;
        self.planner.arch.validate()?;
        self.eval.exec.validate()?;
        Ok(self)
    }

    /// Planner config for the fixed-horizon baseline of length `h`.
    pub fn fixed_planner(&self, h: usize) -> PlannerTrainCfg {
        PlannerTrainCfg {
            crop: CropMode::Fixed { h },
            ..self.planner.clone()
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::path(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactDigest {
    pub name: String,
    pub path: PathBuf,
    pub sha256: String,
}

/// Config, seed and artifact digests that determine a run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub artifacts: Vec<ArtifactDigest>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed,
            config: config.clone(),
            artifacts: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, path: &Path) -> Result<()> {
        self.artifacts.push(ArtifactDigest {
            name: name.into(),
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::path(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }
}
