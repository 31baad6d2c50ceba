//! C ABI over the `nullmoe` core.
//!
//! Models are opaque handles created by [`nullmoe_model_create`] or
//! [`nullmoe_model_load`] and released with [`nullmoe_model_free`]. Every
//! fallible call returns a [`NullmoeStatus`]; the message of the most recent
//! failure on the calling thread is available from
//! [`nullmoe_last_error_message`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use nullmoe::checkpoint;
use nullmoe::numerics::{Matrix, Real};
use nullmoe::router::NullVariant;
use nullmoe::trainer::{Model, ModelConfig};
use nullmoe::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NullmoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Checkpoint = 4,
    Io = 5,
    NonFinite = 6,
    Panic = 7,
}

/// Null-slot behaviour, mirroring the core's variants.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NullmoeVariant {
    Zero = 0,
    Copy = 1,
}

/// Opaque model handle.
pub struct NullmoeModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(err: &Error) -> NullmoeStatus {
    match err {
        Error::Shape { .. } => NullmoeStatus::Shape,
        Error::NonFinite { .. } | Error::Diverged { .. } => NullmoeStatus::NonFinite,
        Error::Checkpoint(_) => NullmoeStatus::Checkpoint,
        Error::Io { .. } => NullmoeStatus::Io,
        _ => NullmoeStatus::InvalidArgument,
    }
}

struct Fail(NullmoeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NullmoeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NullmoeStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            NullmoeStatus::Panic
        }
    }
}

fn null_ptr(what: &str) -> Fail {
    Fail(NullmoeStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model_ref<'a>(m: *const NullmoeModel) -> Result<&'a Model, Fail> {
    m.as_ref().map(|h| &h.model).ok_or_else(|| null_ptr("model"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null_ptr("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(NullmoeStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn input_matrix(model: &Model, x: *const f64, n_tokens: usize, d_model: usize) -> Result<Matrix, Fail> {
    if x.is_null() {
        return Err(null_ptr("x"));
    }
    if d_model != model.d_model() {
        return Err(Fail(
            NullmoeStatus::Shape,
            format!("d_model {d_model} does not match the model's {}", model.d_model()),
        ));
    }
    let len = n_tokens
        .checked_mul(d_model)
        .ok_or_else(|| Fail(NullmoeStatus::Shape, "n_tokens * d_model overflows".into()))?;
    let data: Vec<Real> = std::slice::from_raw_parts(x, len).iter().map(|&v| v as Real).collect();
    let m = Matrix::new(n_tokens, d_model, data)?;
    if !m.is_finite() {
        return Err(Fail(NullmoeStatus::NonFinite, "input contains NaN or infinity".into()));
    }
    Ok(m)
}

unsafe fn write_out<T: Copy>(out: *mut T, values: &[T], what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null_ptr(what));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

fn put_handle(out: *mut *mut NullmoeModel, model: Model) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null_ptr("out"));
    }
    let h = Box::into_raw(Box::new(NullmoeModel { model }));
    // SAFETY: checked non-null above; the caller owns the slot.
    unsafe { *out = h };
    Ok(())
}

/// Message of the last failure on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nullmoe_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nullmoe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a randomly initialised model.
///
/// # Safety
/// `out` must point to writable storage for one handle pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn nullmoe_model_create(
    n_experts: usize,
    k_max: usize,
    rho: f64,
    variant: NullmoeVariant,
    d_model: usize,
    d_hidden: usize,
    n_layers: usize,
    use_shared_expert: bool,
    seed: u64,
    out: *mut *mut NullmoeModel,
) -> NullmoeStatus {
    guard(|| {
        let cfg = ModelConfig {
            n_experts,
            k_max,
            rho: rho as Real,
            null_variant: match variant {
                NullmoeVariant::Zero => NullVariant::Zero,
                NullmoeVariant::Copy => NullVariant::Copy,
            },
            d_model,
            d_hidden,
            n_layers,
            use_shared_expert,
            ..ModelConfig::default()
        };
        let model = Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
        put_handle(out, model)
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` as in [`nullmoe_model_create`].
#[no_mangle]
pub unsafe extern "C" fn nullmoe_model_load(path: *const c_char, out: *mut *mut NullmoeModel) -> NullmoeStatus {
    guard(|| {
        let p = path_arg(path)?;
        let model = checkpoint::load(&p)?;
        put_handle(out, model)
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nullmoe_model_save(model: *const NullmoeModel, path: *const c_char) -> NullmoeStatus {
    guard(|| {
        let m = model_ref(model)?;
        let p = path_arg(path)?;
        checkpoint::save(m, &p)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nullmoe_model_free(model: *mut NullmoeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Model dimensions: any output pointer may be null to skip it.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn nullmoe_model_dims(
    model: *const NullmoeModel,
    n_experts: *mut usize,
    null_copies: *mut usize,
    k_max: *mut usize,
    d_model: *mut usize,
    n_layers: *mut usize,
) -> NullmoeStatus {
    guard(|| {
        let m = model_ref(model)?;
        for (p, v) in [
            (n_experts, m.routing.n_experts),
            (null_copies, m.routing.n_null),
            (k_max, m.routing.k_max),
            (d_model, m.d_model()),
            (n_layers, m.layers.len()),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Runs the residual stack on `x` (`n_tokens × d_model`, row-major) and
/// writes the output, same shape, to `out`.
///
/// # Safety
/// `x` and `out` must each hold `n_tokens * d_model` doubles.
#[no_mangle]
pub unsafe extern "C" fn nullmoe_model_forward(
    model: *const NullmoeModel,
    x: *const f64,
    n_tokens: usize,
    d_model: usize,
    out: *mut f64,
) -> NullmoeStatus {
    guard(|| {
        let m = model_ref(model)?;
        let xm = input_matrix(m, x, n_tokens, d_model)?;
        let fwd = m.forward(&xm, &m.routing)?;
        let vals: Vec<f64> = fwd.out.data().iter().map(|&v| v as f64).collect();
        write_out(out, &vals, "out")
    })
}

/// Routing decisions of layer `layer` during a forward pass of `x`.
/// `slots` receives `n_tokens * k_max` slot indices (`< n_experts` are
/// real experts, the rest null copies) and `real_counts` the number of
/// real experts per token.
///
/// # Safety
/// `x` must hold `n_tokens * d_model` doubles, `slots` `n_tokens * k_max`
/// entries and `real_counts` `n_tokens` entries.
#[no_mangle]
pub unsafe extern "C" fn nullmoe_model_route(
    model: *const NullmoeModel,
    layer: usize,
    x: *const f64,
    n_tokens: usize,
    d_model: usize,
    slots: *mut u32,
    real_counts: *mut u32,
) -> NullmoeStatus {
    guard(|| {
        let m = model_ref(model)?;
        if layer >= m.layers.len() {
            return Err(Fail(
                NullmoeStatus::InvalidArgument,
                format!("layer {layer} out of range (model has {})", m.layers.len()),
            ));
        }
        let xm = input_matrix(m, x, n_tokens, d_model)?;
        let fwd = m.forward(&xm, &m.routing)?;
        let routing = &fwd.states[layer].routing;
        let flat: Vec<u32> = routing.tokens.iter().flat_map(|t| t.slots.iter().map(|&s| s as u32)).collect();
        let counts: Vec<u32> = routing.tokens.iter().map(|t| t.r() as u32).collect();
        write_out(slots, &flat, "slots")?;
        write_out(real_counts, &counts, "real_counts")
    })
}

/// Per-token compute score: mean over layers of real experts / k_max.
///
/// # Safety
/// `x` must hold `n_tokens * d_model` doubles and `scores` `n_tokens`.
#[no_mangle]
pub unsafe extern "C" fn nullmoe_model_compute_scores(
    model: *const NullmoeModel,
    x: *const f64,
    n_tokens: usize,
    d_model: usize,
    scores: *mut f64,
) -> NullmoeStatus {
    guard(|| {
        let m = model_ref(model)?;
        let xm = input_matrix(m, x, n_tokens, d_model)?;
        let fwd = m.forward(&xm, &m.routing)?;
        let denom = (m.layers.len() * m.routing.k_max) as f64;
        let mut acc = vec![0.0f64; n_tokens];
        for st in &fwd.states {
            for (a, t) in acc.iter_mut().zip(&st.routing.tokens) {
                *a += t.r() as f64;
            }
        }
        for a in &mut acc {
            *a /= denom;
        }
        write_out(scores, &acc, "scores")
    })
}
