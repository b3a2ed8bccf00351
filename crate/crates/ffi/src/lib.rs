//! C ABI over `ctxmat`.
//!
//! Every fallible function returns a [`CtxmatStatus`] and writes results
//! through out-pointers. On failure the message is kept per thread and can be
//! read with [`ctxmat_last_error_message`]. Handles are opaque and must be
//! released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ctxmat::net::MaterialNet;
use ctxmat::stats;
use ctxmat::synth::{self, ContextMode, WorldSpec};
use ctxmat::{Error, Tensor};

/// Result codes shared by every function of the library.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtxmatStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Format = 4,
    Io = 5,
    UnknownLayer = 6,
    Invariant = 7,
    Diverged = 8,
    Utf8 = 9,
    Panic = 10,
}

/// Which context a Bayes oracle may use.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtxmatContextMode {
    None = 0,
    Place = 1,
    Object = 2,
    Both = 3,
}

impl From<CtxmatContextMode> for ContextMode {
    fn from(m: CtxmatContextMode) -> Self {
        match m {
            CtxmatContextMode::None => ContextMode::None,
            CtxmatContextMode::Place => ContextMode::Place,
            CtxmatContextMode::Object => ContextMode::Object,
            CtxmatContextMode::Both => ContextMode::Both,
        }
    }
}

/// Synthetic world description.
pub struct CtxmatWorld {
    spec: WorldSpec,
}

/// Trained material network.
pub struct CtxmatNet {
    net: MaterialNet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CtxmatStatus {
    match e {
        Error::Shape(_) => CtxmatStatus::Shape,
        Error::InvalidArgument(_) | Error::UnknownLabel(_) | Error::Json(_) | Error::Csv(_) => {
            CtxmatStatus::InvalidArgument
        }
        Error::UnknownLayer { .. } => CtxmatStatus::UnknownLayer,
        Error::Format { .. } => CtxmatStatus::Format,
        Error::Diverged { .. } => CtxmatStatus::Diverged,
        Error::Invariant(_) => CtxmatStatus::Invariant,
        Error::Io { .. } => CtxmatStatus::Io,
    }
}

struct Failure(CtxmatStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CtxmatStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CtxmatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CtxmatStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CtxmatStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(CtxmatStatus::Utf8, format!("`{what}`: {e}")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into the library on the same
/// thread.
#[no_mangle]
pub extern "C" fn ctxmat_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ctxmat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Shannon entropy in nats of a probability vector of length `len`.
///
/// # Safety
/// `probs` must point to `len` readable doubles and `out` to one writable
/// double.
#[no_mangle]
pub unsafe extern "C" fn ctxmat_entropy(probs: *const f64, len: usize, out: *mut f64) -> CtxmatStatus {
    guard(|| {
        let p = slice_arg(probs, len, "probs")?;
        if out.is_null() {
            return Err(null("out"));
        }
        if len == 0 {
            return Err(Failure(CtxmatStatus::InvalidArgument, "empty distribution".into()));
        }
        if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Failure(CtxmatStatus::InvalidArgument, "probabilities must be finite and >= 0".into()));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Failure(CtxmatStatus::InvalidArgument, format!("probabilities sum to {total}")));
        }
        *out = stats::entropy(p);
        Ok(())
    })
}

fn emit<T>(value: T, out: *mut *mut T) {
    // SAFETY: callers check `out` before building the value.
    unsafe { *out = Box::into_raw(Box::new(value)) };
}

/// Creates the default synthetic world.
///
/// # Safety
/// `out` must point to a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn ctxmat_world_default(out: *mut *mut CtxmatWorld) -> CtxmatStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        emit(CtxmatWorld { spec: synth::default_world() }, out);
        Ok(())
    })
}

/// Parses and validates a world from its JSON description.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn ctxmat_world_from_json(json: *const c_char, out: *mut *mut CtxmatWorld) -> CtxmatStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        if out.is_null() {
            return Err(null("out"));
        }
        emit(CtxmatWorld { spec: WorldSpec::from_json(text)? }, out);
        Ok(())
    })
}

/// # Safety
/// `world` must be a live handle and `out` a writable size slot.
#[no_mangle]
pub unsafe extern "C" fn ctxmat_world_num_materials(world: *const CtxmatWorld, out: *mut usize) -> CtxmatStatus {
    guard(|| {
        let w = world.as_ref().ok_or_else(|| null("world"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = w.spec.num_materials();
        Ok(())
    })
}

/// Exact accuracy of the MAP classifier that sees the texture and the
/// context selected by `mode`.
///
/// # Safety
/// `world` must be a live handle and `out` a writable double.
#[no_mangle]
pub unsafe extern "C" fn ctxmat_world_bayes_oracle(
    world: *const CtxmatWorld,
    mode: CtxmatContextMode,
    out: *mut f64,
) -> CtxmatStatus {
    guard(|| {
        let w = world.as_ref().ok_or_else(|| null("world"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = synth::bayes_oracle(&w.spec, mode.into());
        Ok(())
    })
}

/// Releases a world handle. Null is ignored.
///
/// # Safety
/// `world` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ctxmat_world_free(world: *mut CtxmatWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Loads a checkpoint written by the `train` command.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn ctxmat_net_load(path: *const c_char, out: *mut *mut CtxmatNet) -> CtxmatStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        emit(CtxmatNet { net: MaterialNet::load(Path::new(p))? }, out);
        Ok(())
    })
}

/// Number of output classes and context channels the network expects.
///
/// # Safety
/// `net` must be a live handle; the out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctxmat_net_shape(
    net: *const CtxmatNet,
    num_materials: *mut usize,
    context_channels: *mut usize,
) -> CtxmatStatus {
    guard(|| {
        let n = net.as_ref().ok_or_else(|| null("net"))?;
        if num_materials.is_null() || context_channels.is_null() {
            return Err(null("out"));
        }
        *num_materials = n.net.config().num_materials;
        *context_channels = n.net.config().context_channels;
        Ok(())
    })
}

/// Dense class probabilities for one image.
///
/// `image` holds `channels·height·width` doubles in channel-major order.
/// `context` holds `context_channels·height·width` doubles and may be null
/// when the network takes no context. `probs` receives
/// `num_materials·height·width` doubles; `probs_len` is its capacity.
///
/// # Safety
/// Every non-null pointer must cover the lengths given above.
#[no_mangle]
pub unsafe extern "C" fn ctxmat_net_predict(
    net: *const CtxmatNet,
    image: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    context: *const f64,
    context_channels: usize,
    probs: *mut f64,
    probs_len: usize,
) -> CtxmatStatus {
    guard(|| {
        let n = net.as_ref().ok_or_else(|| null("net"))?;
        let plane = height
            .checked_mul(width)
            .ok_or_else(|| Failure(CtxmatStatus::InvalidArgument, "extent overflows".into()))?;
        let img = Tensor::new(vec![channels, height, width], slice_arg(image, channels * plane, "image")?.to_vec())?;
        let ctx = if context.is_null() {
            None
        } else {
            let data = slice_arg(context, context_channels * plane, "context")?.to_vec();
            Some(Tensor::new(vec![context_channels, height, width], data)?)
        };
        let need = n.net.config().num_materials * plane;
        if probs.is_null() {
            return Err(null("probs"));
        }
        if probs_len < need {
            return Err(Failure(
                CtxmatStatus::Shape,
                format!("probs holds {probs_len} values, {need} needed"),
            ));
        }
        let map = n.net.predict_tensor(&img, ctx.as_ref())?;
        std::slice::from_raw_parts_mut(probs, need).copy_from_slice(map.probs().data());
        Ok(())
    })
}

/// Releases a network handle. Null is ignored.
///
/// # Safety
/// `net` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ctxmat_net_free(net: *mut CtxmatNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}
