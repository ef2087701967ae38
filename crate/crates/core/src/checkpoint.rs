//! Binary checkpoint container for model parameters.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic "BDCK" | container version u32 | meta length u32 | meta JSON bytes
//! | parameter count u64 | parameters as f64
//! ```
//!
//! The JSON header carries model-specific metadata (kind, shapes, epsilon,
//! dtype); parameters are widened to f64 on save so an f32 model round-trips
//! bit-exactly regardless of the training precision.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Write a (magic, meta, f64 blob) container; shared by model checkpoints
/// and dataset snapshots, which differ only in magic and meta schema.
pub(crate) fn save_container(
    path: &Path,
    magic: [u8; 4],
    meta: &serde_json::Value,
    blob: &[f64],
) -> Result<()> {
    let meta_bytes = serde_json::to_vec(meta)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&magic)?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    file.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&meta_bytes)?;
    file.write_all(&(blob.len() as u64).to_le_bytes())?;
    for v in blob {
        file.write_all(&v.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

pub(crate) fn load_container(
    path: &Path,
    expected_magic: [u8; 4],
) -> Result<(serde_json::Value, Vec<f64>)> {
    let fail = |reason: String| Error::FileFormat {
        path: path.display().to_string(),
        reason,
    };
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if magic != expected_magic {
        return Err(fail(format!(
            "bad magic {magic:?}, expected {expected_magic:?}"
        )));
    }
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "unsupported container version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    file.read_exact(&mut u32buf)?;
    let meta_len = u32::from_le_bytes(u32buf) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    file.read_exact(&mut meta_bytes)?;
    let meta: serde_json::Value =
        serde_json::from_slice(&meta_bytes).map_err(|e| fail(format!("meta: {e}")))?;
    let mut u64buf = [0u8; 8];
    file.read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf) as usize;
    let mut blob = Vec::with_capacity(count);
    let mut f64buf = [0u8; 8];
    for _ in 0..count {
        file.read_exact(&mut f64buf)?;
        blob.push(f64::from_le_bytes(f64buf));
    }
    // Trailing garbage would mean the file is not what we think it is.
    let mut probe = [0u8; 1];
    if file.read(&mut probe)? != 0 {
        return Err(fail("trailing bytes after data blob".into()));
    }
    Ok((meta, blob))
}

pub fn save_params(path: &Path, meta: &serde_json::Value, params: &[f64]) -> Result<()> {
    save_container(path, CHECKPOINT_MAGIC, meta, params)
}

pub fn load_params(path: &Path) -> Result<(serde_json::Value, Vec<f64>)> {
    load_container(path, CHECKPOINT_MAGIC)
}

/// Widen a model's parameter tensors into one f64 blob, in iteration order.
pub fn flatten_params<T: Scalar>(params: &[&Param<T>]) -> Vec<f64> {
    let total: usize = params.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(total);
    for p in params {
        out.extend(p.value.iter().map(|v| v.as_f64()));
    }
    out
}

/// Scatter a flat f64 blob back into parameter tensors. The blob length must
/// match the model exactly.
pub fn unflatten_params<T: Scalar>(params: &mut [&mut Param<T>], blob: &[f64]) -> Result<()> {
    let total: usize = params.iter().map(|p| p.len()).sum();
    if blob.len() != total {
        return Err(Error::Shape(format!(
            "checkpoint has {} parameters, model expects {total}",
            blob.len()
        )));
    }
    let mut offset = 0;
    for p in params.iter_mut() {
        let n = p.len();
        for (dst, src) in p.value.data_mut().iter_mut().zip(&blob[offset..offset + n]) {
            *dst = T::cast(*src);
        }
        offset += n;
    }
    Ok(())
}

/// Read one required field out of a checkpoint's JSON meta.
pub fn meta_field<'a>(
    meta: &'a serde_json::Value,
    field: &str,
    path: &Path,
) -> Result<&'a serde_json::Value> {
    meta.get(field).ok_or_else(|| Error::FileFormat {
        path: path.display().to_string(),
        reason: format!("checkpoint meta is missing field {field:?}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn checkpoint_round_trips_meta_and_params() {
        let dir = std::env::temp_dir().join("bdlab-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.bdck");
        let meta = serde_json::json!({"kind": "probe", "dims": [2, 3]});
        let params = vec![0.1f64, -0.5, 1.0 / 3.0, f64::MIN_POSITIVE, 2e300];
        save_params(&path, &meta, &params).unwrap();
        let (meta2, params2) = load_params(&path).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(params2, params);
    }

    #[test]
    fn non_checkpoint_file_is_rejected() {
        let dir = std::env::temp_dir().join("bdlab-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("not-a-checkpoint.bdck");
        std::fs::write(&path, b"hello world, definitely not binary params").unwrap();
        assert!(matches!(
            load_params(&path),
            Err(Error::FileFormat { .. })
        ));
    }

    #[test]
    fn flatten_unflatten_round_trips_f32_params() {
        let mut p1 = Param::new(Tensor::from_vec(&[2, 2], vec![0.1f32, 0.2, 0.3, 0.4]).unwrap());
        let mut p2 = Param::new(Tensor::from_vec(&[3], vec![-1.0f32, 0.5, 0.25]).unwrap());
        let blob = flatten_params(&[&p1, &p2]);
        assert_eq!(blob.len(), 7);
        let (v1, v2) = (p1.value.clone(), p2.value.clone());
        p1.value.fill(0.0);
        p2.value.fill(0.0);
        unflatten_params(&mut [&mut p1, &mut p2], &blob).unwrap();
        assert_eq!(p1.value, v1);
        assert_eq!(p2.value, v2);
    }

    #[test]
    fn wrong_parameter_count_is_a_shape_error() {
        let mut p = Param::new(Tensor::<f32>::zeros(&[4]));
        assert!(matches!(
            unflatten_params(&mut [&mut p], &[0.0; 3]),
            Err(Error::Shape(_))
        ));
    }
}
