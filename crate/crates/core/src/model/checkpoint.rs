//! Binary checkpoint format.
//!
//! ```text
//! magic    "SDMP"
//! u32      format version
//! u32      vocab_size, d_model, n_layers, n_heads, n_kv_heads, max_seq_len
//! f64      rope_base, norm_eps
//! u8       tie_embeddings
//! per layer: u32 d_ff, u32 n_heads, u32 n_kv_heads
//! u32      tensor count
//! per tensor: u32 name length, name (UTF-8), u32 ndim, u64 dims…, f64 values…
//! ```
//!
//! All integers and floats are little-endian; values are row-major.

use std::path::Path;

use super::config::{LayerShape, ModelConfig};
use super::weights::{expected_shapes, TransformerWeights};
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SDMP";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(weights: &TransformerWeights, config: &ModelConfig) -> Result<Vec<u8>> {
    config.validate()?;
    weights.check_config(config)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        config.vocab_size,
        config.d_model,
        config.n_layers,
        config.n_heads,
        config.n_kv_heads,
        config.max_seq_len,
    ] {
        put_u32(&mut buf, v)?;
    }
    buf.extend_from_slice(&config.rope_base.to_le_bytes());
    buf.extend_from_slice(&config.norm_eps.to_le_bytes());
    buf.push(config.tie_embeddings as u8);
    for l in &config.layers {
        put_u32(&mut buf, l.d_ff)?;
        put_u32(&mut buf, l.n_heads)?;
        put_u32(&mut buf, l.n_kv_heads)?;
    }
    let named = weights.named_tensors();
    put_u32(&mut buf, named.len())?;
    for (name, t) in named {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.ndim())?;
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Input(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        self.u32().map(|v| v as usize)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(TransformerWeights, ModelConfig), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let vocab_size = r.usize()?;
    let d_model = r.usize()?;
    let n_layers = r.usize()?;
    let n_heads = r.usize()?;
    let n_kv_heads = r.usize()?;
    let max_seq_len = r.usize()?;
    let rope_base = r.f64()?;
    let norm_eps = r.f64()?;
    let tie_embeddings = match r.take(1)?[0] {
        0 => false,
        1 => true,
        other => return Err(CheckpointError::Inconsistent(format!("tie flag {other}"))),
    };
    if n_layers > bytes.len() {
        return Err(CheckpointError::Truncated);
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layers.push(LayerShape {
            d_ff: r.usize()?,
            n_heads: r.usize()?,
            n_kv_heads: r.usize()?,
        });
    }
    let config = ModelConfig {
        vocab_size,
        d_model,
        n_layers,
        n_heads,
        n_kv_heads,
        max_seq_len,
        rope_base,
        norm_eps,
        tie_embeddings,
        layers,
    };
    config
        .validate()
        .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
    let expected = expected_shapes(&config);
    let count = r.usize()?;
    if count != expected.len() {
        return Err(CheckpointError::Inconsistent(format!(
            "{count} tensors stored, config implies {}",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let len = r.usize()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Inconsistent("tensor name is not UTF-8".into()))?;
        if name != want_name {
            return Err(CheckpointError::Inconsistent(format!(
                "expected tensor `{want_name}`, found `{name}`"
            )));
        }
        let ndim = r.usize()?;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        if &shape != want_shape {
            return Err(CheckpointError::Inconsistent(format!(
                "{name} has shape {shape:?}, config implies {want_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape, data).expect("shape checked"));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Inconsistent(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let weights = TransformerWeights::from_ordered(&config, tensors)
        .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
    Ok((weights, config))
}

pub fn save_checkpoint(weights: &TransformerWeights, config: &ModelConfig, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(weights, config)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(TransformerWeights, ModelConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|kind| Error::Checkpoint {
        path: path.to_path_buf(),
        kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (TransformerWeights, ModelConfig) {
        let mut c = ModelConfig::uniform(40, 16, 2, 4, 2, 12, 32, false);
        c.layers[1].d_ff = 5;
        (TransformerWeights::init(&c, 11).unwrap(), c)
    }

    #[test]
    fn round_trip_is_bit_exact_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let (w, c) = sample();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&w, &c, &p1).unwrap();
        let (w2, c2) = load_checkpoint(&p1).unwrap();
        assert_eq!(c2, c);
        for (a, b) in w.tensors().iter().zip(w2.tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        save_checkpoint(&w2, &c2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(c2.d_ff(), vec![12, 5]);
    }

    #[test]
    fn distinct_load_errors() {
        let (w, c) = sample();
        let bytes = encode_checkpoint(&w, &c).unwrap();

        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert_eq!(decode_checkpoint(&bad).unwrap_err(), CheckpointError::BadMagic);

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bad).unwrap_err(),
            CheckpointError::VersionMismatch { found: 9, .. }
        ));

        assert_eq!(
            decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err(),
            CheckpointError::Truncated
        );

        // Claim a wider MLP in layer 0 than the stored tensors have.
        let mut bad = bytes.clone();
        let layer0 = 4 + 4 + 6 * 4 + 16 + 1;
        bad[layer0] = 13;
        assert!(matches!(
            decode_checkpoint(&bad).unwrap_err(),
            CheckpointError::Inconsistent(_)
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_checkpoint(Path::new("/nonexistent/model.ckpt")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
