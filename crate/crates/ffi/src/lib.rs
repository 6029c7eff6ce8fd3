//! C ABI over the planning toolkit.
//!
//! Objects cross the boundary as opaque handles. Constructors write a new
//! handle through an out-pointer; release it with the matching `*_free`. Every fallible function
//! returns a [`VhStatus`]; on failure the message is available from
//! [`vh_last_error`] on the same thread. States are `[x, y, vx, vy]` in world
//! units.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::OnceLock;

use varhorizon::dataset::Normalizer;
use varhorizon::diffusion::Planner;
use varhorizon::lp::{HorizonCfg, LpModel};
use varhorizon::maze::{Action, MazeSpec, State};
use varhorizon::oracle::{OracleDistance, ReachGraph};
use varhorizon::{rng, Error};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VhStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numerical = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> VhStatus {
    match e {
        Error::Io(_) | Error::Path { .. } => VhStatus::Io,
        Error::Format { .. } | Error::TruncatedEpisode { .. } => VhStatus::Format,
        Error::NonFinite(_) | Error::Diverged { .. } => VhStatus::Numerical,
        _ => VhStatus::InvalidArgument,
    }
}

struct Fail(VhStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(VhStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VhStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            VhStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            VhStatus::Panic
        }
    }
}

unsafe fn ref_of<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(VhStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_of<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail(VhStatus::NullPointer, format!("{what} is null")))
}

unsafe fn str_of<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(VhStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn state_of(p: *const f64, what: &str) -> Result<State, Fail> {
    if p.is_null() {
        return Err(Fail(VhStatus::NullPointer, format!("{what} is null")));
    }
    let a = std::slice::from_raw_parts(p, 4);
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Fail(VhStatus::Numerical, format!("{what} is not finite")));
    }
    Ok(State::from_array([a[0], a[1], a[2], a[3]]))
}

unsafe fn write_state(p: *mut f64, s: &State) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail(VhStatus::NullPointer, "output state is null".into()));
    }
    std::slice::from_raw_parts_mut(p, 4).copy_from_slice(&s.to_array());
    Ok(())
}

fn into_handle<T>(v: T, out: *mut *mut T) -> Result<(), Fail> {
    let slot = unsafe { out_of(out, "output handle")? };
    *slot = Box::into_raw(Box::new(v));
    Ok(())
}

/// Message for the last failing call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn vh_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Maze geometry and dynamics.
pub struct VhMaze {
    spec: MazeSpec,
    norm: Normalizer,
    graph: OnceLock<ReachGraph>,
}

impl VhMaze {
    fn new(spec: MazeSpec) -> Self {
        VhMaze {
            norm: Normalizer::from_spec(&spec),
            spec,
            graph: OnceLock::new(),
        }
    }
}

/// Built-in layout by name: "umaze", "medium" or "large".
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vh_maze_builtin(name: *const c_char, out: *mut *mut VhMaze) -> VhStatus {
    guard(|| {
        let spec = MazeSpec::builtin(str_of(name, "name")?)?;
        into_handle(VhMaze::new(spec), out)
    })
}

/// Layout from `#`/`.` text with the given cell size and default dynamics.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vh_maze_parse(text: *const c_char, cell_size: f64, out: *mut *mut VhMaze) -> VhStatus {
    guard(|| {
        let spec = MazeSpec::parse("custom", str_of(text, "text")?, cell_size, Default::default())?;
        into_handle(VhMaze::new(spec), out)
    })
}

/// # Safety
/// `maze` must come from a maze constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vh_maze_free(maze: *mut VhMaze) {
    if !maze.is_null() {
        drop(Box::from_raw(maze));
    }
}

/// Grid size in cells.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vh_maze_dims(maze: *const VhMaze, rows: *mut usize, cols: *mut usize) -> VhStatus {
    guard(|| {
        let m = ref_of(maze, "maze")?;
        *out_of(rows, "rows")? = m.spec.rows();
        *out_of(cols, "cols")? = m.spec.cols();
        Ok(())
    })
}

/// Whether world position (x, y) lies in free space.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vh_maze_is_free(maze: *const VhMaze, x: f64, y: f64, out: *mut bool) -> VhStatus {
    guard(|| {
        let m = ref_of(maze, "maze")?;
        *out_of(out, "out")? = m.spec.is_free([x, y]);
        Ok(())
    })
}

/// One environment step.
///
/// # Safety
/// `state` and `out` point to 4 doubles, `action` to 2.
#[no_mangle]
pub unsafe extern "C" fn vh_maze_step(
    maze: *const VhMaze,
    state: *const f64,
    action: *const f64,
    out: *mut f64,
) -> VhStatus {
    guard(|| {
        let m = ref_of(maze, "maze")?;
        let s = state_of(state, "state")?;
        if action.is_null() {
            return Err(Fail(VhStatus::NullPointer, "action is null".into()));
        }
        let a = std::slice::from_raw_parts(action, 2);
        write_state(out, &m.spec.step(&s, &Action::new(a[0], a[1])))
    })
}

/// Shortest step count from `start` into the ε-box around `goal`'s position,
/// truncated at `cap`. Writes -1 when the goal is not connected to the start.
///
/// # Safety
/// `start` and `goal` point to 4 doubles; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn vh_oracle_steps(
    maze: *const VhMaze,
    start: *const f64,
    goal: *const f64,
    eps: f64,
    cap: u32,
    out: *mut i64,
) -> VhStatus {
    guard(|| {
        let m = ref_of(maze, "maze")?;
        let (s, g) = (state_of(start, "start")?, state_of(goal, "goal")?);
        if !(eps > 0.0) {
            return Err(invalid("eps must be positive"));
        }
        let graph = m.graph.get_or_init(|| ReachGraph::default_for(&m.spec));
        *out_of(out, "out")? = match graph.shortest_steps(&s, &g, eps, cap) {
            OracleDistance::Steps(k) => k as i64,
            OracleDistance::Unreachable => -1,
        };
        Ok(())
    })
}

/// Trained length predictor.
pub struct VhLp {
    model: LpModel,
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vh_lp_load(path: *const c_char, out: *mut *mut VhLp) -> VhStatus {
    guard(|| {
        let model = LpModel::load(&PathBuf::from(str_of(path, "path")?))?;
        into_handle(VhLp { model }, out)
    })
}

/// # Safety
/// `lp` must come from [`vh_lp_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vh_lp_free(lp: *mut VhLp) {
    if !lp.is_null() {
        drop(Box::from_raw(lp));
    }
}

/// Normalized distance in [0, 1] and the horizon it maps to with the default
/// horizon settings and scale `gamma`.
///
/// # Safety
/// `start` and `goal` point to 4 doubles; the outputs are valid.
#[no_mangle]
pub unsafe extern "C" fn vh_lp_predict(
    lp: *const VhLp,
    maze: *const VhMaze,
    start: *const f64,
    goal: *const f64,
    gamma: f64,
    distance: *mut f64,
    horizon: *mut usize,
) -> VhStatus {
    guard(|| {
        let lp = ref_of(lp, "lp")?;
        let m = ref_of(maze, "maze")?;
        let (s, g) = (state_of(start, "start")?, state_of(goal, "goal")?);
        let hc = HorizonCfg {
            gamma,
            t_max: lp.model.arch.t_max,
            ..Default::default()
        };
        hc.validate()?;
        let (sn, gn) = (m.norm.apply_f32(&s), m.norm.apply_f32(&g));
        *out_of(distance, "distance")? = lp.model.predict_distance(&sn, &gn);
        *out_of(horizon, "horizon")? = lp.model.predict_horizon(&hc, &sn, &gn);
        Ok(())
    })
}

/// Trained diffusion planner.
pub struct VhPlanner {
    planner: Planner,
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vh_planner_load(path: *const c_char, out: *mut *mut VhPlanner) -> VhStatus {
    guard(|| {
        let planner = Planner::load(&PathBuf::from(str_of(path, "path")?))?;
        into_handle(VhPlanner { planner }, out)
    })
}

/// # Safety
/// `planner` must come from [`vh_planner_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vh_planner_free(planner: *mut VhPlanner) {
    if !planner.is_null() {
        drop(Box::from_raw(planner));
    }
}

/// Supported plan lengths.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vh_planner_bounds(planner: *const VhPlanner, min: *mut usize, max: *mut usize) -> VhStatus {
    guard(|| {
        let (lo, hi) = ref_of(planner, "planner")?.planner.length_bounds();
        *out_of(min, "min")? = lo;
        *out_of(max, "max")? = hi;
        Ok(())
    })
}

/// Samples a plan of `len` states from `start` to `goal` into `out`, which
/// holds `cap` doubles and needs `4 * len`. Seeded, so repeat calls agree.
///
/// # Safety
/// `start` and `goal` point to 4 doubles; `out` points to `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn vh_planner_plan(
    planner: *const VhPlanner,
    maze: *const VhMaze,
    start: *const f64,
    goal: *const f64,
    len: usize,
    seed: u64,
    out: *mut f64,
    cap: usize,
) -> VhStatus {
    guard(|| {
        let p = &ref_of(planner, "planner")?.planner;
        let m = ref_of(maze, "maze")?;
        let (s, g) = (state_of(start, "start")?, state_of(goal, "goal")?);
        if out.is_null() {
            return Err(Fail(VhStatus::NullPointer, "out is null".into()));
        }
        if cap < 4 * len {
            return Err(Fail(VhStatus::BufferTooSmall, format!("need {} doubles, got {cap}", 4 * len)));
        }
        let mut r = rng::seeded(seed);
        let plan = p.plan(&m.norm.apply_f32(&s), &m.norm.apply_f32(&g), len, &mut r)?;
        let buf = std::slice::from_raw_parts_mut(out, 4 * len);
        for (row, chunk) in plan.states.iter().zip(buf.chunks_exact_mut(4)) {
            chunk.copy_from_slice(&m.norm.invert_row(row).to_array());
        }
        Ok(())
    })
}
