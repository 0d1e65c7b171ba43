//! Binary checkpoint format.
//!
//! ```text
//! "ATNG"                 magic
//! u32                    format version (1)
//! u32, bytes             length and UTF-8 canonical spec text
//! [u8; 32]               SHA-256 of the spec text
//! u64, f64 * n           parameter count, then every weight and bias in
//!                        registry order
//! u64, f64 * 2m          normalization channel count, then all running
//!                        means followed by all running variances
//! ```
//!
//! Integers and floats are little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::layers::Layer;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ATNG";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn spec_hash(spec: &ModelSpec) -> [u8; 32] {
    Sha256::digest(spec.to_text().as_bytes()).into()
}

fn param_values(m: &Model) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.param_count());
    for p in m.params() {
        out.extend_from_slice(p.weights.data());
        if let Some(b) = &p.bias {
            out.extend_from_slice(b.data());
        }
    }
    out
}

fn bn_values(m: &Model) -> (usize, Vec<f64>) {
    let states = m.bn_states();
    let channels = states.iter().map(|s| s.running_mean.len()).sum();
    let mut out: Vec<f64> = states.iter().flat_map(|s| s.running_mean.data().to_vec()).collect();
    out.extend(states.iter().flat_map(|s| s.running_var.data().to_vec()));
    (channels, out)
}

pub fn checkpoint_bytes(m: &Model) -> Vec<u8> {
    let text = m.spec().to_text();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&spec_hash(m.spec()));
    let params = param_values(m);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    params.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    let (channels, stats) = bn_values(m);
    buf.extend_from_slice(&(channels as u64).to_le_bytes());
    stats.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    buf
}

pub fn save_checkpoint(m: &Model, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(m)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn model_from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("spec text is not UTF-8".into()))?;
    let stored_hash = r.take(32)?;
    let spec = ModelSpec::from_text(text)?;
    if stored_hash != spec_hash(&spec) {
        return Err(Error::Checkpoint("spec hash mismatch".into()));
    }
    let mut model = Model::build(&spec)?;

    let n = r.u64()? as usize;
    if n != model.param_count() {
        return Err(Error::Checkpoint(format!(
            "{n} stored parameters, the spec needs {}",
            model.param_count()
        )));
    }
    let values = r.f64s(n)?;
    let mut at = 0;
    for p in model.params_mut() {
        let w = p.weights.data_mut();
        w.copy_from_slice(&values[at..at + w.len()]);
        at += w.len();
        if let Some(b) = p.bias.as_mut() {
            let b = b.data_mut();
            b.copy_from_slice(&values[at..at + b.len()]);
            at += b.len();
        }
    }

    let channels = r.u64()? as usize;
    let expected: usize = model.bn_states().iter().map(|s| s.running_mean.len()).sum();
    if channels != expected {
        return Err(Error::Checkpoint(format!(
            "{channels} stored normalization channels, the spec needs {expected}"
        )));
    }
    let stats = r.f64s(2 * channels)?;
    let (means, vars) = stats.split_at(channels);
    let mut at = 0;
    for state in model.bn_states_mut() {
        let c = state.running_mean.len();
        state.running_mean.data_mut().copy_from_slice(&means[at..at + c]);
        state.running_var.data_mut().copy_from_slice(&vars[at..at + c]);
        at += c;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionConfig, AttentionKind};
    use crate::models::init_params;
    use crate::tensor::Shape4;

    fn small() -> Model {
        let spec = ModelSpec::toy_vgg(vec![vec![4], vec![8]], vec![8], Shape4::new(1, 1, 8, 8).unwrap(), 3)
            .with_attention(AttentionConfig::new(AttentionKind::Se).with_r(2));
        let mut m = Model::build(&spec).unwrap();
        init_params(&mut m, 9);
        m
    }

    #[test]
    fn roundtrip_is_exact() {
        let m = small();
        let bytes = checkpoint_bytes(&m);
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back.spec(), m.spec());
        assert_eq!(checkpoint_bytes(&back), bytes);
    }

    #[test]
    fn resnet_stats_roundtrip() {
        let spec = ModelSpec::resnet(50);
        let mut m = Model::build(&spec).unwrap();
        init_params(&mut m, 1);
        m.bn_states_mut()[3].running_var.data_mut()[2] = 0.25;
        let back = model_from_bytes(&checkpoint_bytes(&m)).unwrap();
        assert_eq!(back.bn_states()[3].running_var.data()[2], 0.25);
    }

    #[test]
    fn tampered_spec_rejected() {
        let bytes = checkpoint_bytes(&small());
        // flip a byte inside the spec text ("classes = 3" -> "classes = 4")
        let text_start = 12;
        let text_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[text_start..text_start + text_len]).unwrap();
        let offset = text.find("classes = 3").unwrap() + "classes = ".len();
        let mut bad = bytes.clone();
        bad[text_start + offset] = b'4';
        let err = model_from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains("hash mismatch"), "{err}");

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(model_from_bytes(&bad_magic).is_err());
        assert!(model_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
