//! Paired ablation runs on the phantom corpus.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{PointEncoding, RunConfig};
use crate::data::Prepared;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalMode, EvalReport};
use crate::model::{Model, ModelConfig};
use crate::prompt::attach_levels;
use crate::regions::Region;
use crate::train::{train, TrainOptions};
use crate::vit2d::Vit2dCheckpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Decoder with and without multi-level aggregation.
    Mla,
    /// Visual-sampler vs Fourier positional point embeddings.
    Sampler,
    /// Single prompt drawn from the center, surrounding or marginal region.
    PromptPosition,
    /// Prompt injection at the five level sets.
    DeepPrompts,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Mla, Arm::Sampler, Arm::PromptPosition, Arm::DeepPrompts];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Mla => "mla",
            Arm::Sampler => "sampler",
            Arm::PromptPosition => "prompt-position",
            Arm::DeepPrompts => "deep-prompts",
        }
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownArm(s.to_string()))
    }
}

pub const DEEP_PROMPT_LEVELS: [&[usize]; 5] = [&[1, 2, 3, 4], &[1, 4], &[2, 4], &[3, 4], &[4]];

/// Labelled configurations trained for an arm. Prompt-position trains the
/// base configuration once and varies only the evaluation.
pub fn arm_variants(arm: Arm, base: &RunConfig) -> Result<Vec<(String, RunConfig)>> {
    let with = |label: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        (label.to_string(), c)
    };
    let v = match arm {
        Arm::Mla => vec![
            with("mla-on", &|c| c.decoder.use_mla = true),
            with("mla-off", &|c| c.decoder.use_mla = false),
        ],
        Arm::Sampler => vec![
            with("visual-sampler", &|c| {
                c.prompt.enabled = true;
                c.prompt.encoding = PointEncoding::VisualSampler;
            }),
            with("fourier", &|c| {
                c.prompt.enabled = true;
                c.prompt.encoding = PointEncoding::Fourier;
            }),
        ],
        Arm::PromptPosition => vec![("base".to_string(), base.clone())],
        Arm::DeepPrompts => {
            let mut v = Vec::new();
            for levels in DEEP_PROMPT_LEVELS {
                let mut c = base.clone();
                c.encoder = attach_levels(&base.encoder, levels)?;
                c.decoder.use_mla = true;
                let label = format!("levels-{}", levels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","));
                v.push((label, c));
            }
            v
        }
    };
    for (_, c) in &v {
        c.validate()?;
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub arm: Arm,
    /// One pooled report per variant, over all seeds.
    pub reports: Vec<EvalReport>,
    pub note: String,
}

impl AblationResult {
    pub fn markdown(&self) -> String {
        let mut s = format!("### Ablation: {}\n\n| variant | Dice (mean ± sd) | NSD (mean ± sd) | seeds | volumes |\n|---|---|---|---|---|\n", self.arm.name());
        for r in &self.reports {
            s.push_str(&format!(
                "| {} | {:.4} ± {:.4} | {:.4} ± {:.4} | {} | {} |\n",
                r.arm,
                r.dice_mean,
                r.dice_sd,
                r.nsd_mean,
                r.nsd_sd,
                r.seeds.len(),
                r.per_volume.len() / r.seeds.len().max(1)
            ));
        }
        s.push('\n');
        s.push_str(&self.note);
        s.push('\n');
        s
    }
}

/// Trains every variant of `arm` once per seed in `base.eval.ablation_seeds`
/// on the same prepared data, then scores the held-out set with single-point
/// prompts.
pub fn run_ablation(arm: Arm, base: &RunConfig, src: &Vit2dCheckpoint, data: &Prepared, progress: impl FnMut(&str)) -> Result<AblationResult> {
    let mut v = run_ablations(&[arm], base, src, data, progress)?;
    Ok(v.remove(0))
}

/// Like [`run_ablation`] for several arms; a variant whose configuration and
/// seed match one already trained reuses that model.
pub fn run_ablations(
    arms: &[Arm],
    base: &RunConfig,
    src: &Vit2dCheckpoint,
    data: &Prepared,
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationResult>> {
    let seeds = &base.eval.ablation_seeds;
    if seeds.is_empty() {
        return Err(Error::config("eval.ablation_seeds", "need at least one seed"));
    }
    let mut trained: BTreeMap<(String, u64), Model> = BTreeMap::new();
    let mut out = Vec::with_capacity(arms.len());
    for &arm in arms {
        let variants = arm_variants(arm, base)?;
        let modes: Vec<(String, EvalMode)> = match arm {
            Arm::PromptPosition => Region::ALL.iter().map(|&r| (r.name().to_string(), EvalMode::RegionPoint(r))).collect(),
            _ => vec![(String::new(), EvalMode::Point)],
        };
        let mut per_label: Vec<(String, Vec<EvalReport>)> = Vec::new();
        for (label, cfg) in &variants {
            let fp = cfg.fingerprint();
            for &seed in seeds {
                let key = (fp.clone(), seed);
                if !trained.contains_key(&key) {
                    progress(&format!("{}: training {label} with seed {seed}", arm.name()));
                    let mut model = Model::init(src, ModelConfig::from(cfg), seed)?;
                    train(&mut model, &data.train, &cfg.train, seed, TrainOptions::default())?;
                    trained.insert(key.clone(), model);
                }
                let model = &trained[&key];
                for (mode_label, mode) in &modes {
                    let name = if mode_label.is_empty() { label.clone() } else { mode_label.clone() };
                    let r = evaluate(model, &data.heldout, &cfg.eval, *mode, seed, &name, &fp)?;
                    match per_label.iter_mut().find(|(n, _)| *n == name) {
                        Some((_, v)) => v.push(r),
                        None => per_label.push((name, vec![r])),
                    }
                }
            }
        }
        out.push(AblationResult {
            arm,
            reports: per_label.iter().map(|(_, v)| EvalReport::merge(v)).collect(),
            note: "Each prompt trial redraws only the prompt point; training is seeded once per ablation seed.".into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_arms() {
        assert_eq!("mla".parse::<Arm>().unwrap(), Arm::Mla);
        assert!(matches!("frob".parse::<Arm>(), Err(Error::UnknownArm(_))));
    }

    #[test]
    fn mla_variants_differ_only_in_use_mla() {
        let base = RunConfig::default();
        let v = arm_variants(Arm::Mla, &base).unwrap();
        let mut a = v[0].1.clone();
        a.decoder.use_mla = v[1].1.decoder.use_mla;
        assert_eq!(a, v[1].1);
        assert_ne!(v[0].1.decoder.use_mla, v[1].1.decoder.use_mla);
    }

    #[test]
    fn deep_prompt_level_sets() {
        let v = arm_variants(Arm::DeepPrompts, &RunConfig::default()).unwrap();
        let sets: Vec<Vec<usize>> = v.iter().map(|(_, c)| c.encoder.prompt_levels.clone()).collect();
        assert_eq!(sets, vec![vec![1, 2, 3, 4], vec![1, 4], vec![2, 4], vec![3, 4], vec![4]]);
    }
}
