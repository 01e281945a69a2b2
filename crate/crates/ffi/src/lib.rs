//! C ABI over `tempo-meta`.
//!
//! Graphs and models are opaque handles created by `tm_*_new`/`tm_*_load`
//! style functions and released with the matching `*_free`. Every fallible
//! call returns a status code (`TM_OK` or a negative `TM_ERR_*`); the
//! message for the most recent failure on the calling thread is available
//! from `tm_last_error`. Panics are caught at the boundary and reported as
//! `TM_ERR_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use tempo_meta::experiment::{evaluate_model, train_model, Mode};
use tempo_meta::{
    build_temporal_kg, compute_metrics, parse_quadruples, split_by_time, Ablation, Backbone,
    Error, GateSet, MetaConfig, Optimizer, ParamSet, Quadruple, TemporalKg, Trilinear,
};

pub const TM_OK: i32 = 0;
pub const TM_ERR_NULL: i32 = -1;
pub const TM_ERR_ARGUMENT: i32 = -2;
pub const TM_ERR_PARSE: i32 = -3;
pub const TM_ERR_IO: i32 = -4;
pub const TM_ERR_NUMERIC: i32 = -5;
pub const TM_ERR_CHECKPOINT: i32 = -6;
pub const TM_ERR_CONFIG: i32 = -7;
pub const TM_ERR_PANIC: i32 = -99;

pub const TM_MODE_META: i32 = 0;
pub const TM_MODE_PLAIN: i32 = 1;
pub const TM_MODE_FINETUNE: i32 = 2;

pub const TM_ABLATION_FULL: i32 = 0;
pub const TM_ABLATION_NO_GATE: i32 = 1;
pub const TM_ABLATION_SHARED_GATE: i32 = 2;

pub const TM_OPTIMIZER_SGD: i32 = 0;
pub const TM_OPTIMIZER_ADAM: i32 = 1;

/// Opaque temporal graph with its train/valid/test split.
pub struct TmGraph {
    kg: TemporalKg,
}

/// Opaque trained model: parameters and gates.
pub struct TmModel {
    params: ParamSet,
    gates: GateSet,
}

/// Hyperparameters. `gate_lr <= 0` means "use alpha".
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TmConfig {
    pub alpha: f64,
    pub beta: f64,
    pub l2: f64,
    pub gate_lr: f64,
    pub dim: u32,
    pub epochs: u32,
    pub test_steps: u32,
    pub seed: u64,
    pub ablation: i32,
    pub optimizer: i32,
    pub gate_update_in_eval: bool,
}

/// Test metrics as fractions in [0, 1].
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TmMetrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub count: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Parse { .. } | Error::Range { .. } => TM_ERR_PARSE,
            Error::Io(_) | Error::Json(_) => TM_ERR_IO,
            Error::Numeric(_) => TM_ERR_NUMERIC,
            Error::Checkpoint(_) => TM_ERR_CHECKPOINT,
            Error::Config(_) => TM_ERR_CONFIG,
            _ => TM_ERR_ARGUMENT,
        };
        Failure(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure(TM_ERR_IO, e.to_string())
    }
}

fn fail<T>(code: i32, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(code, msg.into()))
}

/// Runs `f`, mapping errors and panics to status codes.
fn guard<F>(f: F) -> i32
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TM_OK,
        Ok(Err(Failure(code, msg))) => {
            set_last_error(msg);
            code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            TM_ERR_PANIC
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return fail(TM_ERR_NULL, format!("{what} is null"));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(TM_ERR_ARGUMENT, format!("{what} is not UTF-8")),
    }
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(TM_ERR_NULL, format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(TM_ERR_NULL, format!("{what} is null")))
}

fn mode_arg(mode: i32) -> Result<Mode, Failure> {
    match mode {
        TM_MODE_META => Ok(Mode::Meta),
        TM_MODE_PLAIN => Ok(Mode::Plain),
        TM_MODE_FINETUNE => Ok(Mode::Finetune),
        m => fail(TM_ERR_ARGUMENT, format!("unknown mode {m}")),
    }
}

fn to_meta_config(c: &TmConfig) -> Result<MetaConfig, Failure> {
    let ablation = match c.ablation {
        TM_ABLATION_FULL => Ablation::Full,
        TM_ABLATION_NO_GATE => Ablation::NoGate,
        TM_ABLATION_SHARED_GATE => Ablation::SharedGate,
        a => return fail(TM_ERR_CONFIG, format!("unknown ablation {a}")),
    };
    let optimizer = match c.optimizer {
        TM_OPTIMIZER_SGD => Optimizer::Sgd,
        TM_OPTIMIZER_ADAM => Optimizer::Adam,
        o => return fail(TM_ERR_CONFIG, format!("unknown optimizer {o}")),
    };
    let config = MetaConfig {
        alpha: c.alpha,
        beta: c.beta,
        l2: c.l2,
        dim: c.dim as usize,
        epochs: c.epochs as usize,
        seed: c.seed,
        test_steps: c.test_steps as usize,
        ablation,
        gate_update_in_eval: c.gate_update_in_eval,
        optimizer,
        gate_lr: (c.gate_lr > 0.0).then_some(c.gate_lr),
    };
    config.validate()?;
    Ok(config)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Fills `out` with the library defaults.
///
/// # Safety
/// `out` must be null or point to writable memory for one `TmConfig`.
#[no_mangle]
pub unsafe extern "C" fn tm_config_default(out: *mut TmConfig) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        let d = MetaConfig::default();
        *out = TmConfig {
            alpha: d.alpha,
            beta: d.beta,
            l2: d.l2,
            gate_lr: d.gate_lr.unwrap_or(0.0),
            dim: d.dim as u32,
            epochs: d.epochs as u32,
            test_steps: d.test_steps as u32,
            seed: d.seed,
            ablation: TM_ABLATION_FULL,
            optimizer: TM_OPTIMIZER_SGD,
            gate_update_in_eval: d.gate_update_in_eval,
        };
        Ok(())
    })
}

/// Loads a quadruple file and splits it chronologically by the three
/// proportions.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tm_graph_load(
    path: *const c_char,
    time_gap: u64,
    p_train: f64,
    p_valid: f64,
    p_test: f64,
    out: *mut *mut TmGraph,
) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = path_arg(path, "path")?;
        let file = File::open(&path)
            .map_err(|e| Failure(TM_ERR_IO, format!("{}: {e}", path.display())))?;
        let parsed = parse_quadruples(BufReader::new(file), time_gap)?;
        let kg = split_by_time(build_temporal_kg(&parsed.quadruples)?, [p_train, p_valid, p_test])?;
        *out = Box::into_raw(Box::new(TmGraph { kg }));
        Ok(())
    })
}

/// Builds a graph from `n` rows of `(subject, relation, object, time)`
/// stored row-major in `data`. Times are raw and divided by `time_gap`.
///
/// # Safety
/// `data` must point to `4 * n` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tm_graph_from_quadruples(
    data: *const u64,
    n: usize,
    time_gap: u64,
    p_train: f64,
    p_valid: f64,
    p_test: f64,
    out: *mut *mut TmGraph,
) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        if data.is_null() {
            return fail(TM_ERR_NULL, "data is null");
        }
        if time_gap == 0 {
            return fail(TM_ERR_ARGUMENT, "time_gap must be positive");
        }
        let rows = std::slice::from_raw_parts(data, 4 * n);
        let quads: Vec<Quadruple> = rows
            .chunks_exact(4)
            .map(|q| Quadruple::new(q[0] as usize, q[1] as usize, q[2] as usize, q[3] / time_gap))
            .collect();
        let kg = split_by_time(build_temporal_kg(&quads)?, [p_train, p_valid, p_test])?;
        *out = Box::into_raw(Box::new(TmGraph { kg }));
        Ok(())
    })
}

/// # Safety
/// `graph` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tm_graph_free(graph: *mut TmGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Writes entity count, relation count and snapshot count.
///
/// # Safety
/// `graph` must be a live handle; each output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn tm_graph_shape(
    graph: *const TmGraph,
    num_entities: *mut u64,
    num_relations: *mut u64,
    num_timestamps: *mut u64,
) -> i32 {
    guard(|| {
        let g = ref_arg(graph, "graph")?;
        if let Some(p) = num_entities.as_mut() {
            *p = g.kg.num_entities as u64;
        }
        if let Some(p) = num_relations.as_mut() {
            *p = g.kg.num_relations as u64;
        }
        if let Some(p) = num_timestamps.as_mut() {
            *p = g.kg.num_timestamps() as u64;
        }
        Ok(())
    })
}

/// Trains a model on the graph's training span. `mode` is `TM_MODE_META`
/// or `TM_MODE_PLAIN`.
///
/// # Safety
/// `graph` and `config` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tm_model_train(
    graph: *const TmGraph,
    config: *const TmConfig,
    mode: i32,
    out: *mut *mut TmModel,
) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        let g = ref_arg(graph, "graph")?;
        let config = to_meta_config(ref_arg(config, "config")?)?;
        let mode = mode_arg(mode)?;
        if mode == Mode::Finetune {
            return fail(TM_ERR_ARGUMENT, "finetune is an evaluation mode");
        }
        let m = train_model(&g.kg, &config, mode, &Trilinear)?;
        *out = Box::into_raw(Box::new(TmModel {
            params: m.params,
            gates: m.gates,
        }));
        Ok(())
    })
}

/// Runs the test protocol of `mode` and writes the test metrics. The model
/// itself is left unchanged.
///
/// # Safety
/// All pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tm_model_evaluate(
    model: *const TmModel,
    graph: *const TmGraph,
    config: *const TmConfig,
    mode: i32,
    out: *mut TmMetrics,
) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = ref_arg(model, "model")?;
        let g = ref_arg(graph, "graph")?;
        let config = to_meta_config(ref_arg(config, "config")?)?;
        let log = evaluate_model(&m.params, &m.gates, &g.kg, &config, mode_arg(mode)?, &Trilinear)?;
        let r = compute_metrics(&log)?;
        *out = TmMetrics {
            mrr: r.mrr,
            hits1: r.hits1,
            hits3: r.hits3,
            hits10: r.hits10,
            count: r.count as u64,
        };
        Ok(())
    })
}

/// Score of `(subject, relation, object)`. Use `relation + |R|` to score
/// the inverse direction.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tm_model_score(
    model: *const TmModel,
    subject: u64,
    relation: u64,
    object: u64,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = ref_arg(model, "model")?;
        let s = Trilinear.score(&m.params, subject as usize, relation as usize, &[object as usize])?;
        *out = s[0];
        Ok(())
    })
}

/// Writes the parameter and gate checkpoints.
///
/// # Safety
/// `model` must be live; paths must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn tm_model_save(
    model: *const TmModel,
    params_path: *const c_char,
    gates_path: *const c_char,
) -> i32 {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let pp = path_arg(params_path, "params_path")?;
        let gp = path_arg(gates_path, "gates_path")?;
        let mut w = BufWriter::new(File::create(pp)?);
        m.params.write_checkpoint(&mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(gp)?);
        m.gates.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    })
}

/// Loads checkpoints written by `tm_model_save` or the CLI.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tm_model_load(
    params_path: *const c_char,
    gates_path: *const c_char,
    out: *mut *mut TmModel,
) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        let pp = path_arg(params_path, "params_path")?;
        let gp = path_arg(gates_path, "gates_path")?;
        let params = ParamSet::read_checkpoint(BufReader::new(File::open(pp)?))?;
        let gates = GateSet::read_from(BufReader::new(File::open(gp)?))?;
        if gates.dim() != params.dim() {
            return fail(TM_ERR_CHECKPOINT, "gate and parameter dimensions differ");
        }
        *out = Box::into_raw(Box::new(TmModel { params, gates }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tm_model_free(model: *mut TmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
