//! C ABI over the tokenizer and the token generator.
//!
//! Every entry point returns a [`FlextokStatus`]. On failure a message is
//! kept per thread and can be read with [`flextok_last_error`]. Handles are
//! opaque; release them with the matching `*_close` function.
//!
//! Images cross the boundary as `height × width × 3` interleaved `f32` in
//! `[-1, 1]`, row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use flextok::ar::{generate, ArModel, GenerationRequest};
use flextok::codec::{Codec, Image};
use flextok::config::RunConfig;
use flextok::data::Dataset;
use flextok::eval::image_noise;
use flextok::pipeline::resolve_codec;
use flextok::tokenizer::Tokenizer;
use flextok::train::checkpoint::Checkpoint;
use flextok::train::{load_ar, load_tokenizer, run_config_of};
use flextok::Error;

/// Result of every call. `FLEXTOK_STATUS_OK` is zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlextokStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Shape = 4,
    Validation = 5,
    Config = 6,
    NonFinite = 7,
    OutOfRange = 8,
    Format = 9,
    CheckpointMismatch = 10,
    Io = 11,
    Tensor = 12,
    Panic = 13,
}

impl From<&Error> for FlextokStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => FlextokStatus::Shape,
            Error::Validation(_) => FlextokStatus::Validation,
            Error::Config(_) => FlextokStatus::Config,
            Error::NonFinite { .. } => FlextokStatus::NonFinite,
            Error::OutOfRange { .. } => FlextokStatus::OutOfRange,
            Error::Format { .. } => FlextokStatus::Format,
            Error::CheckpointMismatch(_) => FlextokStatus::CheckpointMismatch,
            Error::Io { .. } => FlextokStatus::Io,
            Error::Tensor(_) => FlextokStatus::Tensor,
        }
    }
}

/// A loaded tokenizer with the codec and settings it was trained with.
pub struct FlextokTokenizer {
    tok: Tokenizer,
    codec: Codec,
    cfg: RunConfig,
}

/// A loaded token generator.
pub struct FlextokGenerator {
    model: ArModel,
    cfg: RunConfig,
}

/// Static facts about a loaded tokenizer.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FlextokTokenizerInfo {
    /// Longest token sequence.
    pub k_max: u32,
    /// Number of distinct token codes.
    pub vocab_size: u32,
    pub image_height: u32,
    pub image_width: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: FlextokStatus, msg: impl Into<String>) -> FlextokStatus {
    set_error(msg.into());
    status
}

/// Run `f`, turning errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), FlextokStatus>) -> FlextokStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FlextokStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            fail(FlextokStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

fn lift<T>(r: flextok::Result<T>) -> Result<T, FlextokStatus> {
    r.map_err(|e| fail(FlextokStatus::from(&e), e.to_string()))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, FlextokStatus> {
    if p.is_null() {
        return Err(fail(FlextokStatus::NullArgument, "path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FlextokStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(Path::new(s))
}

fn load_kind(path: &Path, kind: &str) -> Result<Checkpoint, FlextokStatus> {
    if !path.exists() {
        return Err(fail(FlextokStatus::Io, format!("checkpoint {} does not exist", path.display())));
    }
    let ckpt = lift(Checkpoint::load(path))?;
    lift(ckpt.expect_kind(kind, path))?;
    Ok(ckpt)
}

fn check_out<T>(p: *mut T, what: &str) -> Result<(), FlextokStatus> {
    if p.is_null() {
        return Err(fail(FlextokStatus::NullArgument, format!("{what} is null")));
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn flextok_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into the library from this thread.
#[no_mangle]
pub extern "C" fn flextok_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Load a tokenizer checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn flextok_tokenizer_open(path: *const c_char, out: *mut *mut FlextokTokenizer) -> FlextokStatus {
    guard(|| {
        check_out(out, "out")?;
        *out = std::ptr::null_mut();
        let path = path_arg(path)?;
        let ckpt = load_kind(path, "tokenizer")?;
        let cfg = lift(run_config_of(&ckpt))?;
        let tok = lift(load_tokenizer(&ckpt))?;
        if cfg.codec.kind == "ae" && cfg.codec.ae_checkpoint.is_empty() {
            return Err(fail(FlextokStatus::Config, "tokenizer was trained without a stored autoencoder checkpoint"));
        }
        let empty = Dataset { images: vec![], labels: vec![], num_classes: 0 };
        let (codec, _) = lift(resolve_codec(&cfg, &empty))?;
        *out = Box::into_raw(Box::new(FlextokTokenizer { tok, codec, cfg }));
        Ok(())
    })
}

/// Release a tokenizer handle. NULL is ignored.
///
/// # Safety
/// `handle` must come from [`flextok_tokenizer_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn flextok_tokenizer_close(handle: *mut FlextokTokenizer) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `handle` must be a live tokenizer handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn flextok_tokenizer_info(handle: *const FlextokTokenizer, out: *mut FlextokTokenizerInfo) -> FlextokStatus {
    guard(|| {
        check_out(out, "out")?;
        let h = handle.as_ref().ok_or_else(|| fail(FlextokStatus::NullArgument, "handle is null"))?;
        let size = h.cfg.data.image_size as u32;
        *out = FlextokTokenizerInfo {
            k_max: h.tok.spec.k_max as u32,
            vocab_size: h.tok.spec.levels.vocab_size() as u32,
            image_height: size,
            image_width: size,
        };
        Ok(())
    })
}

/// Encode one image into its first `k` token codes, written to `codes`
/// (room for `capacity` values).
///
/// # Safety
/// `pixels` must hold `height·width·3` floats and `codes` `capacity` slots.
#[no_mangle]
pub unsafe extern "C" fn flextok_tokenize(
    handle: *const FlextokTokenizer,
    pixels: *const f32,
    height: usize,
    width: usize,
    k: usize,
    codes: *mut u32,
    capacity: usize,
) -> FlextokStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| fail(FlextokStatus::NullArgument, "handle is null"))?;
        if pixels.is_null() {
            return Err(fail(FlextokStatus::NullArgument, "pixels is null"));
        }
        check_out(codes, "codes")?;
        if k == 0 || k > h.tok.spec.k_max {
            return Err(fail(FlextokStatus::OutOfRange, format!("k = {k} outside [1, {}]", h.tok.spec.k_max)));
        }
        if capacity < k {
            return Err(fail(FlextokStatus::BufferTooSmall, format!("need {k} code slots, got {capacity}")));
        }
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| fail(FlextokStatus::InvalidArgument, "image size overflows"))?;
        let image = lift(Image::new(height, width, std::slice::from_raw_parts(pixels, n).to_vec()))?;
        lift(image.validate())?;
        let latents = lift(h.codec.encode_pixels(&image))?;
        let seq = lift(h.tok.tokenize(&[latents], k))?.remove(0);
        std::slice::from_raw_parts_mut(codes, k).copy_from_slice(&seq);
        Ok(())
    })
}

/// Decode `n_codes` tokens into an image written to `pixels` (room for
/// `capacity` floats, at least `height·width·3` from the info struct).
/// Sampler settings come from the checkpoint's run config; `seed` picks
/// the starting noise.
///
/// # Safety
/// `codes` must hold `n_codes` values and `pixels` `capacity` slots.
#[no_mangle]
pub unsafe extern "C" fn flextok_detokenize(
    handle: *const FlextokTokenizer,
    codes: *const u32,
    n_codes: usize,
    seed: u64,
    pixels: *mut f32,
    capacity: usize,
) -> FlextokStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| fail(FlextokStatus::NullArgument, "handle is null"))?;
        if codes.is_null() {
            return Err(fail(FlextokStatus::NullArgument, "codes is null"));
        }
        check_out(pixels, "pixels")?;
        if n_codes == 0 || n_codes > h.tok.spec.k_max {
            return Err(fail(FlextokStatus::OutOfRange, format!("{n_codes} codes outside [1, {}]", h.tok.spec.k_max)));
        }
        let size = h.cfg.data.image_size;
        let needed = size * size * 3;
        if capacity < needed {
            return Err(fail(FlextokStatus::BufferTooSmall, format!("need {needed} floats, got {capacity}")));
        }
        let seq = std::slice::from_raw_parts(codes, n_codes).to_vec();
        for &c in &seq {
            lift(h.tok.spec.levels.check_code(c))?;
        }
        let guidance = lift(h.cfg.guidance())?;
        let eps = image_noise(seed, 0, h.tok.spec.geometry.latent_len());
        let (grids, _) = lift(h.tok.detokenize_with_noise(&[seq], &eps, h.cfg.sampler.steps, &guidance))?;
        let image = lift(h.codec.decode_latents(&grids[0]))?;
        if image.data.len() != needed {
            return Err(fail(FlextokStatus::Shape, "decoded image has an unexpected size"));
        }
        std::slice::from_raw_parts_mut(pixels, needed).copy_from_slice(&image.data);
        Ok(())
    })
}

/// Load a generator checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn flextok_generator_open(path: *const c_char, out: *mut *mut FlextokGenerator) -> FlextokStatus {
    guard(|| {
        check_out(out, "out")?;
        *out = std::ptr::null_mut();
        let path = path_arg(path)?;
        let ckpt = load_kind(path, "ar")?;
        let cfg = lift(run_config_of(&ckpt))?;
        let model = lift(load_ar(&ckpt))?;
        *out = Box::into_raw(Box::new(FlextokGenerator { model, cfg }));
        Ok(())
    })
}

/// Release a generator handle. NULL is ignored.
///
/// # Safety
/// `handle` must come from [`flextok_generator_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn flextok_generator_close(handle: *mut FlextokGenerator) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Sample `k` token codes for class `class` (negative for unconditional)
/// into `codes`. Sampling settings come from the checkpoint's run config.
///
/// # Safety
/// `codes` must have room for `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn flextok_generate(
    handle: *const FlextokGenerator,
    class: i64,
    k: usize,
    seed: u64,
    codes: *mut u32,
    capacity: usize,
) -> FlextokStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| fail(FlextokStatus::NullArgument, "handle is null"))?;
        check_out(codes, "codes")?;
        if capacity < k {
            return Err(fail(FlextokStatus::BufferTooSmall, format!("need {k} code slots, got {capacity}")));
        }
        let class = usize::try_from(class).ok();
        let s = &h.cfg.sampler;
        let req = GenerationRequest {
            class,
            k_tokens: k,
            top_k: s.top_k,
            temperature: s.temperature,
            cfg_scale: s.ar_cfg_scale,
            seed,
        };
        let seq = lift(generate(&h.model, &req))?;
        std::slice::from_raw_parts_mut(codes, seq.len()).copy_from_slice(&seq);
        Ok(())
    })
}
