//! Shared numeric and I/O helpers.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Softmax of a vector, max-subtracted for stability.
pub fn softmax(x: &Array1<f64>) -> Array1<f64> {
    let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut e = x.mapv(|v| (v - m).exp());
    let s: f64 = e.sum();
    e.mapv_inplace(|v| v / s);
    e
}

/// Column-wise softmax: each column of the result sums to 1.
pub fn softmax_columns(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut col in out.columns_mut() {
        let m = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut s = 0.0;
        for v in col.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in col.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Deterministic RNG derived from a master seed and a stream label.
///
/// Every consumer of randomness in the crate draws from its own derived
/// stream, so adding a new consumer never perturbs existing ones.
pub fn derived_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(stream.as_bytes()))
}

/// FNV-1a 64-bit hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Write `content` to `path` atomically (write to a sibling temp file, then rename).
pub fn atomic_write(path: &Path, content: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp.partial");
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let mut f =
        fs::File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    f.write_all(content)
        .map_err(|e| Error::io(tmp.display().to_string(), e))?;
    f.sync_all()
        .map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Read a whole file to string with a path-tagged error.
pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Format an f64 with the shortest representation that round-trips exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Check every entry of a matrix is finite.
pub fn ensure_finite(m: &Array2<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
