//! 2D vision-transformer checkpoints: the inflation source.
//!
//! Tensor names follow the common image-encoder layout (`patch_embed.proj`,
//! `pos_embed`, `blocks.<i>.{norm1,attn.qkv,attn.proj,norm2,mlp.lin1,mlp.lin2}`,
//! `neck.{0,1,2,3}`) with block indices counted from 0. The positional table
//! is stored channel-first as `[c, H, W]`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::{Origin, ParamStore};
use crate::tensor::Tensor;

/// Architecture of a 2D checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vit2dSpec {
    pub c: usize,
    pub c_in: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    /// Token grid (H, W) of the positional table.
    pub grid_hw: [usize; 2],
    pub mlp_ratio: usize,
    pub neck_dim: usize,
}

impl Vit2dSpec {
    /// The 2D architecture an encoder configuration expects to inflate from.
    pub fn for_encoder(cfg: &EncoderConfig) -> Self {
        Self {
            c: cfg.c,
            c_in: cfg.source_channels,
            depth: cfg.depth,
            heads: cfg.heads,
            patch: cfg.patch,
            grid_hw: [cfg.grid[1], cfg.grid[2]],
            mlp_ratio: cfg.mlp_ratio,
            neck_dim: cfg.source_neck_dim,
        }
    }

    /// Every tensor name and shape, in a fixed order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c, p, h) = (self.c, self.patch, self.mlp_ratio * self.c);
        let n = self.neck_dim;
        let mut v = vec![
            ("patch_embed.proj.weight".to_string(), vec![c, self.c_in, p, p]),
            ("patch_embed.proj.bias".to_string(), vec![c]),
            ("pos_embed".to_string(), vec![c, self.grid_hw[0], self.grid_hw[1]]),
        ];
        for i in 0..self.depth {
            let b = |s: &str| format!("blocks.{i}.{s}");
            v.extend([
                (b("norm1.weight"), vec![c]),
                (b("norm1.bias"), vec![c]),
                (b("attn.qkv.weight"), vec![3 * c, c]),
                (b("attn.qkv.bias"), vec![3 * c]),
                (b("attn.proj.weight"), vec![c, c]),
                (b("attn.proj.bias"), vec![c]),
                (b("norm2.weight"), vec![c]),
                (b("norm2.bias"), vec![c]),
                (b("mlp.lin1.weight"), vec![h, c]),
                (b("mlp.lin1.bias"), vec![h]),
                (b("mlp.lin2.weight"), vec![c, h]),
                (b("mlp.lin2.bias"), vec![c]),
            ]);
        }
        v.extend([
            ("neck.0.weight".to_string(), vec![n, c, 1, 1]),
            ("neck.1.weight".to_string(), vec![n]),
            ("neck.1.bias".to_string(), vec![n]),
            ("neck.2.weight".to_string(), vec![n, n, 3, 3]),
            ("neck.3.weight".to_string(), vec![n]),
            ("neck.3.bias".to_string(), vec![n]),
        ]);
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct Vit2dCheckpoint {
    pub spec: Vit2dSpec,
    pub params: ParamStore,
}

impl Vit2dCheckpoint {
    /// Random weights with the scale of a trained network: fan-in uniform
    /// projections, near-identity norms, small biases and positions.
    pub fn synthetic(spec: Vit2dSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in spec.tensor_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name.contains("norm") || name.starts_with("neck.1") || name.starts_with("neck.3") {
                if name.ends_with("weight") {
                    (0..n).map(|_| 1.0 + rng.gen_range(-0.1f32..0.1)).collect()
                } else {
                    (0..n).map(|_| rng.gen_range(-0.1f32..0.1)).collect()
                }
            } else if name.ends_with("bias") || name == "pos_embed" {
                (0..n).map(|_| rng.gen_range(-0.1f32..0.1)).collect()
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f32).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            params.insert(name, Tensor::from_parts(shape, data), Origin::Pretrained, false);
        }
        Self { spec, params }
    }

    /// Checks that every tensor exists with the declared shape and is finite.
    pub fn validate(&self) -> Result<()> {
        let expected = self.spec.tensor_shapes();
        for (name, shape) in &expected {
            let t = self
                .params
                .tensor(name)
                .map_err(|_| Error::Inflation(format!("2D checkpoint lacks `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Inflation(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Inflation(format!("`{name}` holds non-finite values")));
            }
        }
        if self.params.len() != expected.len() {
            return Err(Error::Inflation(format!(
                "2D checkpoint has {} tensors, expected {}",
                self.params.len(),
                expected.len()
            )));
        }
        Ok(())
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let spec: Vit2dSpec = serde_json::from_value(ckpt.meta.get("vit2d").cloned().unwrap_or_default())
            .map_err(|e| Error::Format(format!("2D checkpoint architecture: {e}")))?;
        let out = Self {
            spec,
            params: ckpt.params,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn save(&self, path: &Path, extra_meta: serde_json::Value) -> Result<()> {
        let mut meta = serde_json::json!({ "kind": "vit2d", "vit2d": self.spec });
        if let (Some(m), serde_json::Value::Object(extra)) = (meta.as_object_mut(), extra_meta) {
            m.extend(extra);
        }
        save_checkpoint(&self.params, &meta, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(load_checkpoint(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_valid_and_deterministic() {
        let spec = Vit2dSpec::for_encoder(&EncoderConfig::toy());
        let a = Vit2dCheckpoint::synthetic(spec.clone(), 5);
        a.validate().unwrap();
        let b = Vit2dCheckpoint::synthetic(spec.clone(), 5);
        assert_eq!(a.params.hashes(), b.params.hashes());
        assert_eq!(a.params.total_elements(), spec.param_count());
    }

    #[test]
    fn wrong_shape_rejected() {
        let spec = Vit2dSpec::for_encoder(&EncoderConfig::toy());
        let mut a = Vit2dCheckpoint::synthetic(spec, 1);
        a.params.insert("pos_embed", Tensor::zeros(&[48, 8, 7]), Origin::Pretrained, false);
        assert!(matches!(a.validate(), Err(Error::Inflation(_))));
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = Vit2dSpec::for_encoder(&EncoderConfig::toy());
        let a = Vit2dCheckpoint::synthetic(spec, 2);
        let p = dir.path().join("src");
        a.save(&p, serde_json::json!({"seed": 2})).unwrap();
        let b = Vit2dCheckpoint::load(&p).unwrap();
        assert_eq!(a.spec, b.spec);
        assert_eq!(a.params.hashes(), b.params.hashes());
    }
}
