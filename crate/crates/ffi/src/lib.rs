//! C interface to `sbid`.
//!
//! Objects are handed out as opaque pointers and released with the matching
//! `*_free` function. Every fallible call returns an [`SbidStatus`]; outputs
//! are written through pointer arguments only on success. Byte buffers
//! returned by the library are released with [`sbid_buffer_free`].

use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sbid::scheme::{
    evaluate, keygen, setup, token_gen, transform, EncryptedTemplate, PlainTemplate, QueryToken,
    RandomnessConfig, SecretKey, SystemParams,
};
use sbid::{store, Error};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SbidStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidParameter = 2,
    DimensionMismatch = 3,
    NonFinite = 4,
    Singular = 5,
    /// Bad magic, unsupported version, truncated or corrupt buffer.
    Format = 6,
    Io = 7,
    Panic = 8,
    Other = 9,
}

impl From<&Error> for SbidStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidParameter(_) | Error::InsufficientData(_) | Error::OracleRefused(_) => {
                SbidStatus::InvalidParameter
            }
            Error::DimensionMismatch { .. } | Error::RecordDimension { .. } => {
                SbidStatus::DimensionMismatch
            }
            Error::NonFinite => SbidStatus::NonFinite,
            Error::Singular | Error::Conditioning { .. } => SbidStatus::Singular,
            Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::Truncated { .. }
            | Error::Corrupt(_)
            | Error::NotABijection => SbidStatus::Format,
            Error::Io(_) => SbidStatus::Io,
        }
    }
}

/// Secret key plus the parameters and randomness source of its holder.
pub struct SbidKey {
    params: SystemParams,
    sk: SecretKey,
    cfg: RandomnessConfig,
    rng: ChaCha20Rng,
}

/// An enrolled (transformed) template.
pub struct SbidTemplate {
    inner: EncryptedTemplate,
}

/// A single-use query token.
pub struct SbidToken {
    inner: QueryToken,
}

fn guard(f: impl FnOnce() -> Result<(), SbidStatus>) -> SbidStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SbidStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => SbidStatus::Panic,
    }
}

fn status(e: Error) -> SbidStatus {
    SbidStatus::from(&e)
}

unsafe fn borrow<'a, T>(p: *const T) -> Result<&'a T, SbidStatus> {
    p.as_ref().ok_or(SbidStatus::NullPointer)
}

unsafe fn features<'a>(p: *const f64, n: usize) -> Result<&'a [f64], SbidStatus> {
    if p.is_null() {
        return Err(SbidStatus::NullPointer);
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn bytes<'a>(p: *const u8, len: usize) -> Result<&'a [u8], SbidStatus> {
    if p.is_null() {
        return Err(SbidStatus::NullPointer);
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), SbidStatus> {
    if out.is_null() {
        return Err(SbidStatus::NullPointer);
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_buffer(
    buf: Vec<u8>,
    out: *mut *mut u8,
    out_len: *mut usize,
) -> Result<(), SbidStatus> {
    if out.is_null() || out_len.is_null() {
        return Err(SbidStatus::NullPointer);
    }
    let boxed = buf.into_boxed_slice();
    *out_len = boxed.len();
    *out = Box::into_raw(boxed) as *mut u8;
    Ok(())
}

fn key_from(params: SystemParams, sk: SecretKey, seed: u64) -> SbidKey {
    SbidKey {
        params,
        sk,
        cfg: RandomnessConfig::default(),
        rng: ChaCha20Rng::seed_from_u64(seed),
    }
}

/// Static description of a status code. Never NULL; unknown codes get a
/// generic message.
#[no_mangle]
pub extern "C" fn sbid_status_message(status: i32) -> *const c_char {
    let s: &'static CStr = match status {
        0 => c"ok",
        1 => c"null pointer argument",
        2 => c"invalid parameter",
        3 => c"dimension mismatch",
        4 => c"non-finite value",
        5 => c"singular or ill-conditioned matrix",
        6 => c"malformed buffer",
        7 => c"i/o error",
        8 => c"internal panic",
        _ => c"unknown error",
    };
    s.as_ptr()
}

/// Generates a key for templates of dimension `n` and radius `theta`.
/// `seed` drives key generation and all later transform/token randomness.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn sbid_key_generate(
    n: usize,
    theta: f64,
    seed: u64,
    out: *mut *mut SbidKey,
) -> SbidStatus {
    guard(|| {
        let params = setup(n, theta).map_err(status)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let sk = keygen(&params, &mut rng).map_err(status)?;
        let mut key = key_from(params, sk, 0);
        key.rng = rng;
        put(out, key)
    })
}

/// # Safety
/// `key` must be NULL or a pointer from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sbid_key_free(key: *mut SbidKey) {
    if !key.is_null() {
        drop(Box::from_raw(key));
    }
}

/// Template dimension of `key`, or 0 when `key` is NULL.
///
/// # Safety
/// `key` must be NULL or a live key handle.
#[no_mangle]
pub unsafe extern "C" fn sbid_key_dimension(key: *const SbidKey) -> usize {
    key.as_ref().map_or(0, |k| k.params.n())
}

/// Serialises the key in the on-disk key format.
///
/// # Safety
/// `key` must be a live handle; `out` and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbid_key_encode(
    key: *const SbidKey,
    test_mode: bool,
    out: *mut *mut u8,
    out_len: *mut usize,
) -> SbidStatus {
    guard(|| {
        let key = borrow(key)?;
        put_buffer(store::encode_key(&key.sk, test_mode), out, out_len)
    })
}

/// Restores a key from [`sbid_key_encode`] output. The radius is not part
/// of the key format and must be supplied again; `seed` reseeds the
/// transform/token randomness.
///
/// # Safety
/// `buf` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbid_key_decode(
    buf: *const u8,
    len: usize,
    theta: f64,
    seed: u64,
    out: *mut *mut SbidKey,
) -> SbidStatus {
    guard(|| {
        let (sk, _) = store::decode_key(bytes(buf, len)?).map_err(status)?;
        let params = setup(sk.n(), theta).map_err(status)?;
        put(out, key_from(params, sk, seed))
    })
}

/// Transforms the template `features[0..n]` for enrollment under `id`.
///
/// # Safety
/// `key` must be a live handle, `features` must point to `n` doubles and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbid_transform(
    key: *mut SbidKey,
    id: u64,
    features: *const f64,
    n: usize,
    out: *mut *mut SbidTemplate,
) -> SbidStatus {
    guard(|| {
        let key = key.as_mut().ok_or(SbidStatus::NullPointer)?;
        let x = PlainTemplate::new(id, self::features(features, n)?.to_vec());
        let inner = transform(&key.sk, &key.params, &x, &mut key.rng, &key.cfg).map_err(status)?;
        put(out, SbidTemplate { inner })
    })
}

/// Produces a query token for `features[0..n]`.
///
/// # Safety
/// As for [`sbid_transform`].
#[no_mangle]
pub unsafe extern "C" fn sbid_token_gen(
    key: *mut SbidKey,
    features: *const f64,
    n: usize,
    out: *mut *mut SbidToken,
) -> SbidStatus {
    guard(|| {
        let key = key.as_mut().ok_or(SbidStatus::NullPointer)?;
        let y = PlainTemplate::new(0, self::features(features, n)?.to_vec());
        let inner = token_gen(&key.sk, &key.params, &y, &mut key.rng, &key.cfg).map_err(status)?;
        put(out, SbidToken { inner })
    })
}

/// Writes 1 to `matched` when the template lies within the radius of the
/// token's query, else 0.
///
/// # Safety
/// Both handles must be live; `matched` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbid_evaluate(
    template: *const SbidTemplate,
    token: *const SbidToken,
    matched: *mut u8,
) -> SbidStatus {
    guard(|| {
        let (t, q) = (borrow(template)?, borrow(token)?);
        if matched.is_null() {
            return Err(SbidStatus::NullPointer);
        }
        *matched = evaluate(&t.inner, &q.inner).map_err(status)?.lambda();
        Ok(())
    })
}

/// # Safety
/// `template` must be a live handle; `id` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbid_template_id(
    template: *const SbidTemplate,
    id: *mut u64,
) -> SbidStatus {
    guard(|| {
        let t = borrow(template)?;
        if id.is_null() {
            return Err(SbidStatus::NullPointer);
        }
        *id = t.inner.id;
        Ok(())
    })
}

/// Serialises a template as one database record.
///
/// # Safety
/// `template` must be a live handle; `out` and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbid_template_encode(
    template: *const SbidTemplate,
    out: *mut *mut u8,
    out_len: *mut usize,
) -> SbidStatus {
    guard(|| put_buffer(store::encode_record(&borrow(template)?.inner), out, out_len))
}

/// # Safety
/// `buf` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbid_template_decode(
    buf: *const u8,
    len: usize,
    n: usize,
    out: *mut *mut SbidTemplate,
) -> SbidStatus {
    guard(|| {
        let inner = store::decode_record(bytes(buf, len)?, n).map_err(status)?;
        put(out, SbidTemplate { inner })
    })
}

/// # Safety
/// `template` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sbid_template_free(template: *mut SbidTemplate) {
    if !template.is_null() {
        drop(Box::from_raw(template));
    }
}

/// Serialises a token in the token file format.
///
/// # Safety
/// `token` must be a live handle; `out` and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbid_token_encode(
    token: *const SbidToken,
    test_mode: bool,
    out: *mut *mut u8,
    out_len: *mut usize,
) -> SbidStatus {
    guard(|| {
        put_buffer(
            store::encode_token(&borrow(token)?.inner, test_mode),
            out,
            out_len,
        )
    })
}

/// # Safety
/// `buf` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbid_token_decode(
    buf: *const u8,
    len: usize,
    out: *mut *mut SbidToken,
) -> SbidStatus {
    guard(|| {
        let (inner, _) = store::decode_token(bytes(buf, len)?).map_err(status)?;
        put(out, SbidToken { inner })
    })
}

/// # Safety
/// `token` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sbid_token_free(token: *mut SbidToken) {
    if !token.is_null() {
        drop(Box::from_raw(token));
    }
}

/// Releases a buffer returned by one of the `*_encode` functions.
///
/// # Safety
/// `buf`/`len` must be exactly as returned, and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sbid_buffer_free(buf: *mut u8, len: usize) {
    if !buf.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(buf, len)));
    }
}
