//! Run configuration: one JSON document with `data`, `encoder`, `prompt`,
//! `decoder`, `train` and `eval` sections. Missing fields take defaults,
//! unknown fields are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Dims;
use crate::preprocess::AugmentParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training phantoms generated by `gen-data`.
    pub n_train: usize,
    /// Held-out phantoms generated alongside, with disjoint seeds.
    pub n_heldout: usize,
    pub dims: Dims,
    pub n_lesions: usize,
    pub contrast: f32,
    pub noise_sd: f32,
    pub target_spacing: [f64; 3],
    /// Spacing ratio above which the coarse axis is resampled separately.
    pub anisotropy_threshold: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 60,
            n_heldout: 20,
            dims: [40, 40, 40],
            n_lesions: 1,
            contrast: 1.0,
            noise_sd: 0.3,
            target_spacing: [1.0; 3],
            anisotropy_threshold: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Embedding width.
    pub c: usize,
    /// Input channels of the volume.
    pub c_in: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    pub heads: usize,
    /// Patch edge in voxels.
    pub patch: usize,
    /// Token grid (D, H, W); the input patch is `grid * patch` voxels.
    pub grid: Dims,
    /// Attention window in tokens, clamped to the grid.
    pub window: Dims,
    /// 1-based indices of blocks using full-grid attention.
    pub global_blocks: Vec<usize>,
    pub mlp_ratio: usize,
    pub adapter_dim: usize,
    pub adapters_per_block: usize,
    /// Apply the adapter's depthwise conv after the activation (else before).
    pub adapter_conv_after_act: bool,
    /// Whether the tunable depth positional table exists.
    pub depth_table: bool,
    /// 1-based block indices whose outputs feed the decoder.
    pub mla_taps: [usize; 4],
    /// Feature levels (1..=4) receiving prompt injection; 4 is the bottleneck.
    pub prompt_levels: Vec<usize>,
    pub bottleneck_dim: usize,
    /// Input channels of the 2D source checkpoint.
    pub source_channels: usize,
    /// Output width of the 2D source checkpoint's neck.
    pub source_neck_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EncoderConfig {
    /// Desk-scale configuration used for training on phantoms.
    pub fn toy() -> Self {
        Self {
            c: 48,
            c_in: 1,
            depth: 4,
            heads: 3,
            patch: 4,
            grid: [8, 8, 8],
            window: [2, 4, 4],
            global_blocks: vec![3],
            mlp_ratio: 4,
            adapter_dim: 12,
            adapters_per_block: 2,
            adapter_conv_after_act: true,
            depth_table: true,
            mla_taps: [1, 2, 3, 4],
            prompt_levels: vec![4],
            bottleneck_dim: 16,
            source_channels: 3,
            source_neck_dim: 16,
        }
    }

    /// Base-size transformer (768 wide, 12 blocks, patch 14); used for
    /// parameter accounting only.
    pub fn full_scale() -> Self {
        Self {
            c: 768,
            c_in: 1,
            depth: 12,
            heads: 12,
            patch: 14,
            grid: [32, 64, 64],
            window: [2, 7, 7],
            global_blocks: vec![3, 6, 9, 12],
            mlp_ratio: 4,
            adapter_dim: 192,
            adapters_per_block: 2,
            adapter_conv_after_act: true,
            depth_table: true,
            mla_taps: [3, 6, 9, 12],
            prompt_levels: vec![4],
            bottleneck_dim: 256,
            source_channels: 3,
            source_neck_dim: 256,
        }
    }

    pub fn input_dims(&self) -> Dims {
        self.grid.map(|g| g * self.patch)
    }

    pub fn head_dim(&self) -> usize {
        self.c / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let k = |f: &str| format!("encoder.{f}");
        if self.c == 0 || self.heads == 0 || self.c % self.heads != 0 {
            return Err(Error::config(k("heads"), "c must be a positive multiple of heads"));
        }
        if self.c_in == 0 {
            return Err(Error::config(k("c_in"), "must be positive"));
        }
        if self.depth == 0 {
            return Err(Error::config(k("depth"), "must be positive"));
        }
        if self.patch < 2 {
            return Err(Error::config(k("patch"), "must be at least 2"));
        }
        if self.grid.contains(&0) {
            return Err(Error::config(k("grid"), "must be positive"));
        }
        if self.window.contains(&0) {
            return Err(Error::config(k("window"), "must be positive"));
        }
        if self.global_blocks.iter().any(|&b| b == 0) {
            return Err(Error::config(k("global_blocks"), "block indices are 1-based"));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config(k("mlp_ratio"), "must be positive"));
        }
        if self.adapters_per_block > 2 {
            return Err(Error::config(k("adapters_per_block"), "at most 2 adapters per block"));
        }
        if self.adapters_per_block > 0 && (self.adapter_dim == 0 || self.adapter_dim >= self.c) {
            return Err(Error::config(k("adapter_dim"), "must satisfy 0 < m < c"));
        }
        let t = self.mla_taps;
        if t[0] == 0 || t.windows(2).any(|w| w[0] >= w[1]) || t[3] != self.depth {
            return Err(Error::config(k("mla_taps"), "must be strictly increasing, 1-based, ending at depth"));
        }
        if self.prompt_levels.is_empty() {
            return Err(Error::config(k("prompt_levels"), "must be nonempty"));
        }
        if self.prompt_levels.iter().any(|&l| !(1..=4).contains(&l)) {
            return Err(Error::config(k("prompt_levels"), "levels lie in 1..=4"));
        }
        if self.bottleneck_dim == 0 {
            return Err(Error::config(k("bottleneck_dim"), "must be positive"));
        }
        if self.source_channels == 0 || self.source_neck_dim == 0 {
            return Err(Error::config(k("source_channels"), "source shape must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointEncoding {
    /// Features interpolated from the image feature map at each point.
    VisualSampler,
    /// Random Fourier features of the normalised point coordinates.
    Fourier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub enabled: bool,
    pub encoding: PointEncoding,
    pub n_queries: usize,
    pub self_attn_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Std-dev of the Gaussian frequency matrix of the Fourier encoding.
    pub fourier_scale: f64,
    pub fourier_seed: u64,
    /// Points drawn from a patch with an empty mask.
    pub n_bg_points: usize,
    /// Points drawn from a patch containing foreground.
    pub n_fg_points: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            encoding: PointEncoding::VisualSampler,
            n_queries: 8,
            self_attn_layers: 2,
            heads: 1,
            mlp_ratio: 2,
            fourier_scale: 1.0,
            fourier_seed: 0,
            n_bg_points: 10,
            n_fg_points: 40,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_queries == 0 {
            return Err(Error::config("prompt.n_queries", "must be positive"));
        }
        if self.heads == 0 {
            return Err(Error::config("prompt.heads", "must be positive"));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("prompt.mlp_ratio", "must be positive"));
        }
        if !(self.fourier_scale > 0.0) {
            return Err(Error::config("prompt.fourier_scale", "must be positive"));
        }
        if self.n_bg_points == 0 || self.n_bg_points > 1024 {
            return Err(Error::config("prompt.n_bg_points", "must lie in 1..=1024"));
        }
        if self.n_fg_points == 0 || self.n_fg_points > 1024 {
            return Err(Error::config("prompt.n_fg_points", "must lie in 1..=1024"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Channel width; `None` means `c / 6` (at least 4).
    pub c_dec: Option<usize>,
    pub use_mla: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            c_dec: None,
            use_mla: true,
        }
    }
}

impl DecoderConfig {
    pub fn width(&self, enc: &EncoderConfig) -> usize {
        self.c_dec.unwrap_or((enc.c / 6).max(4))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub patches_per_volume: usize,
    pub lr: f64,
    pub end_factor: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    /// Probability that a crop is centred on foreground.
    pub fg_ratio: f64,
    pub augment: AugmentParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 1,
            patches_per_volume: 1,
            lr: 1e-4,
            end_factor: 0.1,
            weight_decay: 1e-5,
            betas: [0.9, 0.999],
            eps: 1e-8,
            fg_ratio: 0.5,
            augment: AugmentParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.end_factor > 0.0 && self.end_factor <= 1.0) {
            return Err(Error::config("train.end_factor", "must lie in (0, 1]"));
        }
        if self.batch != 1 {
            return Err(Error::config("train.batch", "only batch 1 is supported"));
        }
        if self.patches_per_volume == 0 {
            return Err(Error::config("train.patches_per_volume", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::config("train.betas", "each must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.fg_ratio) {
            return Err(Error::config("train.fg_ratio", "must lie in [0, 1]"));
        }
        self.augment.validate("train.augment")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub overlap: f64,
    pub nsd_tolerance_mm: f64,
    /// Random single-point prompt draws per volume.
    pub prompt_trials: usize,
    /// Training seeds used by ablation arms.
    pub ablation_seeds: Vec<u64>,
    /// Region split points as fractions of the deepest inside distance.
    pub region_fracs: [f64; 2],
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            overlap: 0.7,
            nsd_tolerance_mm: 5.0,
            prompt_trials: 10,
            ablation_seeds: vec![0, 1, 2],
            region_fracs: [1.0 / 3.0, 2.0 / 3.0],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::config("eval.overlap", "must lie in [0, 1)"));
        }
        if !(self.nsd_tolerance_mm >= 0.0) {
            return Err(Error::config("eval.nsd_tolerance_mm", "must be non-negative"));
        }
        if self.prompt_trials == 0 {
            return Err(Error::config("eval.prompt_trials", "must be positive"));
        }
        let [lo, hi] = self.region_fracs;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::config("eval.region_fracs", "need 0 < lo < hi < 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data.dims.iter().any(|&d| d < 8) {
            return Err(Error::config("data.dims", "each axis must be at least 8"));
        }
        if !self.data.target_spacing.iter().all(|&s| s > 0.0) {
            return Err(Error::config("data.target_spacing", "must be positive"));
        }
        if !(self.data.anisotropy_threshold >= 1.0) {
            return Err(Error::config("data.anisotropy_threshold", "must be at least 1"));
        }
        if !(self.data.noise_sd >= 0.0) {
            return Err(Error::config("data.noise_sd", "must be non-negative"));
        }
        self.encoder.validate()?;
        self.prompt.validate()?;
        if self.decoder.width(&self.encoder) < 4 {
            return Err(Error::config("decoder.c_dec", "must be at least 4"));
        }
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::config(if key == "." { String::new() } else { key }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the compact JSON form, fixed by the struct field order.
    pub fn fingerprint(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.train.epochs, 200);
        assert_eq!(c.eval.overlap, 0.7);
        assert_eq!(c.eval.nsd_tolerance_mm, 5.0);
        assert_eq!(c.train.fg_ratio, 0.5);
        assert_eq!((c.prompt.n_bg_points, c.prompt.n_fg_points), (10, 40));
    }

    #[test]
    fn negative_lr_names_key() {
        match RunConfig::from_json(r#"{"train":{"lr":-1}}"#) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.lr"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_and_mistyped_keys_name_path() {
        match RunConfig::from_json(r#"{"train":{"lrr":1}}"#) {
            Err(Error::Config { key, .. }) => assert!(key.starts_with("train"), "{key}"),
            other => panic!("unexpected {other:?}"),
        }
        match RunConfig::from_json(r#"{"eval":{"overlap":"x"}}"#) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "eval.overlap"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn roundtrip_and_fingerprint() {
        let mut c = RunConfig::default();
        c.train.epochs = 3;
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.fingerprint(), c.fingerprint());
        assert_ne!(c.fingerprint(), RunConfig::default().fingerprint());
    }

    #[test]
    fn full_scale_preset_is_valid() {
        EncoderConfig::full_scale().validate().unwrap();
    }
}
