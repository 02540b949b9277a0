//! Model checkpoints.
//!
//! Layout (little-endian): magic `"VSEGCKPT"`, version `u32 = 1`, blob count
//! `u32`, then per parameter: blob length `u32` (bytes after this field),
//! name length `u32`, UTF-8 name, rank `u32`, dims `u32` each, `f64` data.
//! Blobs follow the canonical parameter order. The encoder configuration is
//! recovered from the parameter names and shapes.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::data::io::{read_bytes, write_bytes, Reader};
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, ModelState};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"VSEGCKPT";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Argument(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode<S: Scalar>(state: &ModelState<S>) -> Result<Vec<u8>> {
    let named = state.params.named();
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, named.len())?;
    for (name, tensor) in named {
        let mut blob = Vec::new();
        put_u32(&mut blob, name.len())?;
        blob.extend_from_slice(name.as_bytes());
        put_u32(&mut blob, tensor.ndim())?;
        for &d in tensor.shape() {
            put_u32(&mut blob, d)?;
        }
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        put_u32(&mut out, blob.len())?;
        out.extend_from_slice(&blob);
    }
    Ok(out)
}

fn read_blob<S: Scalar>(r: &mut Reader<'_>) -> Result<(String, Tensor<S>)> {
    let len_at = r.offset();
    let blob_len = r.u32("blob length")? as usize;
    let start = r.offset();
    let name_len = r.u32("name length")? as usize;
    let name_at = r.offset();
    let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
        .map_err(|_| Error::format(name_at, "parameter name is not UTF-8"))?
        .to_string();
    let rank_at = r.offset();
    let rank = r.u32("rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format(rank_at, format!("{name}: unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let at = r.offset();
        let d = r.u32("dimension")? as usize;
        if d == 0 {
            return Err(Error::format(at, format!("{name}: zero dimension")));
        }
        shape.push(d);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(rank_at, format!("{name}: shape overflows")))?;
    let expected = (r.offset() - start) as usize + numel.saturating_mul(8);
    if expected != blob_len {
        return Err(Error::format(
            len_at,
            format!("{name}: blob length {blob_len} disagrees with its contents ({expected})"),
        ));
    }
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(S::lit(r.f64("parameter value")?));
    }
    Ok((name, Tensor::new(shape, data)?))
}

fn infer_config<S: Scalar>(blobs: &[(String, Tensor<S>)]) -> Result<EncoderConfig> {
    let find = |name: &str| {
        blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format(0, format!("checkpoint lacks {name}")))
    };
    let num_stages = blobs.iter().filter(|(n, _)| n.ends_with(".proj.weight")).count();
    let layers_per_stage = blobs
        .iter()
        .filter(|(n, _)| n.starts_with("stage0.layer") && n.ends_with(".kernel"))
        .count();
    let proj = find("stage0.proj.weight")?;
    let head = find("stage0.head.weight")?;
    let kernel_size = if layers_per_stage > 0 {
        find("stage0.layer0.kernel")?.shape()[0]
    } else {
        EncoderConfig::default().kernel_size
    };
    if proj.ndim() != 2 || head.ndim() != 2 {
        return Err(Error::format(0, "projection and head weights must be matrices"));
    }
    Ok(EncoderConfig {
        input_dim: proj.shape()[0],
        embed_dim: proj.shape()[1],
        num_classes: head.shape()[1],
        num_stages,
        layers_per_stage,
        kernel_size,
    })
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<ModelState<S>> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC, "checkpoint")?;
    r.version(VERSION)?;
    let count = r.u32("blob count")? as usize;
    let mut blobs = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        blobs.push(read_blob::<S>(&mut r)?);
    }
    r.finish()?;

    let config = infer_config(&blobs)?;
    let mut state = ModelState::<S>::init(config, 0).map_err(|e| Error::format(0, e.to_string()))?;
    let expected = state.params.named().len();
    if expected != blobs.len() {
        return Err(Error::format(
            12,
            format!("{} parameter blobs, the inferred model has {expected}", blobs.len()),
        ));
    }
    let names: Vec<String> = state.params.named().into_iter().map(|(n, _)| n).collect();
    for ((slot, name), (blob_name, tensor)) in state.params.leaves_mut().into_iter().zip(&names).zip(blobs) {
        if *name != blob_name {
            return Err(Error::format(0, format!("expected parameter {name}, found {blob_name}")));
        }
        if slot.shape() != tensor.shape() {
            return Err(Error::format(
                0,
                format!("{name}: shape {:?}, expected {:?}", tensor.shape(), slot.shape()),
            ));
        }
        *slot = tensor;
    }
    Ok(state)
}

pub fn save<S: Scalar>(path: &Path, state: &ModelState<S>) -> Result<()> {
    write_bytes(path, &encode(state)?)
}

pub fn load<S: Scalar>(path: &Path) -> Result<ModelState<S>> {
    decode(&read_bytes(path)?).map_err(|e| match e {
        Error::Format { offset, message } => Error::format(offset, format!("{}: {message}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> ModelState<f64> {
        let cfg = EncoderConfig {
            input_dim: 5,
            embed_dim: 4,
            num_classes: 3,
            num_stages: 2,
            layers_per_stage: 3,
            kernel_size: 3,
        };
        ModelState::init(cfg, 9).unwrap()
    }

    #[test]
    fn round_trip_restores_config_and_bits() {
        let s = state();
        let bytes = encode(&s).unwrap();
        let back: ModelState<f64> = decode(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &state()).unwrap();
        assert_eq!(load::<f64>(&path).unwrap(), state());
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = encode(&state()).unwrap();
        for cut in [0, 7, 12, 15, 40, bytes.len() - 1] {
            assert!(matches!(decode::<f64>(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(decode::<f64>(&bad), Err(Error::Format { offset: 8, .. })));
        let mut bad = bytes;
        bad[16] ^= 0xff;
        assert!(matches!(decode::<f64>(&bad), Err(Error::Format { .. })));
    }
}
