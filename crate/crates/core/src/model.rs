//! Full segmentation model: inflated encoder, prompt pathway and decoder.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{DecoderConfig, EncoderConfig, PromptConfig, RunConfig};
use crate::decoder::{decode, init_decoder_params, streams};
use crate::encoder::{encoder_forward, inflate};
use crate::error::{Error, Result};
use crate::forward::Fwd;
use crate::grid::{numel, Dims, Grid3};
use crate::params::ParamStore;
use crate::prompt::{init_prompt_params, prompt_level};
use crate::tensor::Tensor;
use crate::vit2d::Vit2dCheckpoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
    pub decoder: DecoderConfig,
}

impl From<&RunConfig> for ModelConfig {
    fn from(c: &RunConfig) -> Self {
        Self {
            encoder: c.encoder.clone(),
            prompt: c.prompt.clone(),
            decoder: c.decoder.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Inflates `src` and adds freshly initialised prompt and decoder tensors.
    pub fn init(src: &Vit2dCheckpoint, cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s_enc, s_prompt, s_dec) = (rng.next_u64(), rng.next_u64(), rng.next_u64());
        let mut params = inflate(src, &cfg.encoder, s_enc)?;
        if cfg.prompt.enabled {
            init_prompt_params(&mut params, &cfg.encoder, &cfg.prompt, s_prompt);
        }
        init_decoder_params(&mut params, &cfg.encoder, &cfg.decoder, s_dec);
        Ok(Self { cfg, params })
    }

    pub fn input_dims(&self) -> Dims {
        self.cfg.encoder.input_dims()
    }

    /// Logits `[D·H·W, 1]` for an input `[D·H·W, c_in]`. Prompt injection runs
    /// only when the prompt pathway is enabled and `points` are given.
    pub fn forward(&self, f: &mut Fwd, input: &Tensor, dims: Dims, points: Option<&[[f64; 3]]>) -> Result<Var> {
        let enc = &self.cfg.encoder;
        let pyr = encoder_forward(f, enc, input, dims)?;
        let mut feats = [pyr.taps[0], pyr.taps[1], pyr.taps[2], pyr.bottleneck];
        if let (true, Some(points)) = (self.cfg.prompt.enabled, points) {
            let used = streams(&self.cfg.decoder);
            for &level in &enc.prompt_levels {
                if used.contains(&level) {
                    feats[level - 1] = prompt_level(f, enc, &self.cfg.prompt, level, feats[level - 1], pyr.grid, points)?;
                }
            }
        }
        let raw = f.input(input.clone());
        decode(f, enc, &self.cfg.decoder, feats, pyr.grid, raw, dims)
    }

    /// Inference on a single-channel patch of exactly the model's input size.
    pub fn predict_logits(&self, image: &Grid3<f32>, points: Option<&[[f64; 3]]>) -> Result<Grid3<f32>> {
        if self.cfg.encoder.c_in != 1 {
            return Err(Error::Shape("single-channel prediction needs c_in = 1".into()));
        }
        let dims = image.dims();
        let input = Tensor::new(vec![numel(dims), 1], image.data().to_vec())?;
        let mut f = Fwd::new(&self.params, false);
        let y = self.forward(&mut f, &input, dims, points)?;
        Grid3::new(dims, f.g.value(y).data().to_vec())
    }

    pub fn save(&self, path: &Path, extra_meta: serde_json::Value) -> Result<()> {
        let mut meta = serde_json::json!({ "kind": "model", "model": self.cfg });
        if let (Some(m), serde_json::Value::Object(extra)) = (meta.as_object_mut(), extra_meta) {
            m.extend(extra);
        }
        save_checkpoint(&self.params, &meta, path)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let ck = load_checkpoint(path)?;
        let cfg: ModelConfig = serde_json::from_value(ck.meta.get("model").cloned().unwrap_or_default())
            .map_err(|e| Error::Format(format!("model checkpoint config: {e}")))?;
        Ok((Self { cfg, params: ck.params }, ck.meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit2d::Vit2dSpec;

    #[test]
    fn save_load_forward_identical() {
        let cfg = ModelConfig::from(&RunConfig::default());
        let src = Vit2dCheckpoint::synthetic(Vit2dSpec::for_encoder(&cfg.encoder), 0);
        let m = Model::init(&src, cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m");
        m.save(&p, serde_json::json!({"seed": 1})).unwrap();
        let (back, meta) = Model::load(&p).unwrap();
        assert_eq!(meta["seed"], 1);
        let img = Grid3::new(m.input_dims(), (0..numel(m.input_dims())).map(|i| (i % 7) as f32 * 0.1).collect()).unwrap();
        let pts = [[3.0, 4.0, 5.0]];
        assert_eq!(m.predict_logits(&img, Some(&pts)).unwrap(), back.predict_logits(&img, Some(&pts)).unwrap());
    }
}
