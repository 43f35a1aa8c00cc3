//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "BASCKPT\n"
//! version    u32
//! header_len u64
//! header     header_len bytes of JSON (CheckpointHeader)
//! payload    f32 values, tensors back to back in header order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use bas_core::model::{BackboneSpec, BasModel, MaskingLevel, ModelParams};
use bas_core::nn::ConvParams;
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 8] = b"BASCKPT\n";
pub const FORMAT_VERSION: u32 = 1;

/// Position in the counter-based training streams: the data order and
/// augmentation draws of step `batch` in epoch `epoch` depend only on these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub spec: BackboneSpec,
    pub masking: MaskingLevel,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub rng: RngState,
    pub metrics: Option<serde_json::Value>,
    pub config: Option<serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
    /// FNV-1a over the payload bytes.
    pub payload_checksum: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams<f32>,
    /// Momentum buffers, when saved from a training run.
    pub velocity: Option<ModelParams<f32>>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn push_params(prefix: &str, params: &ModelParams<f32>, entries: &mut Vec<TensorEntry>, payload: &mut Vec<u8>) {
    for (i, c) in params.convs.iter().enumerate() {
        let parts: [(&str, Vec<usize>, &[f32]); 2] = [
            ("weight", vec![c.out_channels, c.in_channels, c.kernel, c.kernel], &c.weight),
            ("bias", vec![c.out_channels], &c.bias),
        ];
        for (kind, shape, data) in parts {
            entries.push(TensorEntry {
                name: format!("{prefix}conv{i}.{kind}"),
                shape,
                len: data.len(),
            });
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

impl Checkpoint {
    pub fn new(model: &BasModel<f32>, velocity: Option<&ModelParams<f32>>) -> Self {
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                spec: model.spec().clone(),
                masking: model.masking(),
                epoch: 0,
                step: 0,
                rng: RngState::default(),
                metrics: None,
                config: None,
                tensors: Vec::new(),
                payload_checksum: 0,
            },
            params: model.params().clone(),
            velocity: velocity.cloned(),
        }
    }

    pub fn model(&self) -> Result<BasModel<f32>> {
        Ok(BasModel::from_params(self.header.spec.clone(), self.params.clone())?.with_masking(self.header.masking))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        push_params("", &self.params, &mut entries, &mut payload);
        if let Some(v) = &self.velocity {
            push_params("momentum.", v, &mut entries, &mut payload);
        }
        let mut header = self.header.clone();
        header.format_version = FORMAT_VERSION;
        header.tensors = entries;
        header.payload_checksum = fnv1a(&payload);
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= 20 && &bytes[..8] == MAGIC, "not a checkpoint file (bad magic)");
        let version = u32::from_le_bytes(bytes[8..12].try_into()?);
        if version != FORMAT_VERSION {
            bail!("unsupported checkpoint version {version} (expected {FORMAT_VERSION})");
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into()?) as usize;
        let header_end = 20usize.checked_add(header_len).filter(|&e| e <= bytes.len());
        let header_end = header_end.context("truncated checkpoint header")?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[20..header_end]).context("malformed checkpoint header")?;
        let payload = &bytes[header_end..];
        let expected: usize = header.tensors.iter().map(|t| t.len * 4).sum();
        ensure!(
            payload.len() == expected,
            "checkpoint payload holds {} bytes, header describes {expected}",
            payload.len()
        );
        ensure!(fnv1a(payload) == header.payload_checksum, "checkpoint payload checksum mismatch");

        let template = BasModel::<f32>::build(header.spec.clone(), 0)?.params().zeros_like();
        let mut floats = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut tensors = header.tensors.iter();
        let mut read_params = |prefix: &str| -> Result<ModelParams<f32>> {
            let mut params = template.clone();
            for (i, conv) in params.convs.iter_mut().enumerate() {
                let ConvParams { weight, bias, .. } = conv;
                for (kind, data) in [("weight", weight), ("bias", bias)] {
                    let name = format!("{prefix}conv{i}.{kind}");
                    let entry = tensors.next().with_context(|| format!("missing tensor {name}"))?;
                    ensure!(
                        entry.name == name && entry.len == data.len(),
                        "tensor {} ({} values) does not match {name} ({} values)",
                        entry.name,
                        entry.len,
                        data.len()
                    );
                    data.iter_mut().zip(floats.by_ref()).for_each(|(d, v)| *d = v);
                }
            }
            Ok(params)
        };
        let params = read_params("")?;
        let velocity = if header.tensors.len() > 2 * params.convs.len() {
            Some(read_params("momentum.")?)
        } else {
            None
        };
        Ok(Self {
            header,
            params,
            velocity,
        })
    }

    /// Writes to a sibling temporary file first so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> BasModel<f32> {
        BasModel::build(BackboneSpec::with_widths(16, &[4, 6], "stage1", 3), 5).unwrap()
    }

    #[test]
    fn round_trip_with_momentum() {
        let m = model();
        let mut velocity = m.params().zeros_like();
        velocity.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 0.5);
        let mut ck = Checkpoint::new(&m, Some(&velocity));
        ck.header.epoch = 3;
        ck.header.step = 42;
        ck.header.rng = RngState { seed: 9, epoch: 3, batch: 0 };
        ck.header.metrics = Some(serde_json::json!({"gt_known": 55.0}));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.params, ck.params);
        assert_eq!(back.velocity, ck.velocity);
        assert_eq!((back.header.epoch, back.header.step, back.header.rng), (3, 42, ck.header.rng));
        assert_eq!(back.model().unwrap().params().checksum(), m.params().checksum());
    }

    #[test]
    fn rejects_corruption() {
        let m = model();
        let mut bytes = Checkpoint::new(&m, None).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let mut v2 = Checkpoint::new(&m, None).to_bytes().unwrap();
        v2[8] = 2;
        assert!(Checkpoint::from_bytes(&v2).unwrap_err().to_string().contains("version"));
    }
}
