//! Held-out evaluation producing per-volume Dice / NSD reports.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::decoder::binarize;
use crate::error::Result;
use crate::grid::{connected_components, Grid3};
use crate::metrics::{dice, nsd};
use crate::model::Model;
use crate::regions::{region_partition, region_voxels, Region};
use crate::volume::VolumeSample;

/// How each held-out volume is segmented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// One foreground point drawn uniformly from the largest lesion.
    Point,
    /// One point drawn uniformly from a region of the largest lesion.
    RegionPoint(Region),
    /// No prompt; whole-volume sliding windows.
    SlidingWindow,
}

impl EvalMode {
    pub fn label(&self) -> String {
        match self {
            EvalMode::Point => "point".into(),
            EvalMode::RegionPoint(r) => format!("point-{}", r.name()),
            EvalMode::SlidingWindow => "sliding-window".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeScore {
    pub id: String,
    pub seed: u64,
    pub dice: f64,
    pub nsd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arm: String,
    pub fingerprint: String,
    pub seeds: Vec<u64>,
    pub mode: String,
    pub prompt_trials: usize,
    pub per_volume: Vec<VolumeScore>,
    pub dice_mean: f64,
    /// Sample standard deviation over `per_volume` (0 for a single entry).
    pub dice_sd: f64,
    pub nsd_mean: f64,
    pub nsd_sd: f64,
    pub notes: Vec<String>,
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

impl EvalReport {
    pub fn from_scores(arm: &str, fingerprint: &str, mode: &str, prompt_trials: usize, per_volume: Vec<VolumeScore>, notes: Vec<String>) -> Self {
        let mut seeds: Vec<u64> = per_volume.iter().map(|s| s.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let (dice_mean, dice_sd) = mean_sd(&per_volume.iter().map(|s| s.dice).collect::<Vec<_>>());
        let (nsd_mean, nsd_sd) = mean_sd(&per_volume.iter().map(|s| s.nsd).collect::<Vec<_>>());
        Self {
            arm: arm.into(),
            fingerprint: fingerprint.into(),
            seeds,
            mode: mode.into(),
            prompt_trials,
            per_volume,
            dice_mean,
            dice_sd,
            nsd_mean,
            nsd_sd,
            notes,
        }
    }

    /// Pools several reports of the same arm (e.g. one per seed).
    pub fn merge(parts: &[EvalReport]) -> Self {
        let first = &parts[0];
        let scores = parts.iter().flat_map(|r| r.per_volume.iter().cloned()).collect();
        let mut notes: Vec<String> = parts.iter().flat_map(|r| r.notes.iter().cloned()).collect();
        notes.dedup();
        Self::from_scores(&first.arm, &first.fingerprint, &first.mode, first.prompt_trials, scores, notes)
    }
}

/// Voxels of the largest 6-connected lesion.
fn largest_component(mask: &Grid3<u8>) -> Vec<usize> {
    let (labels, sizes) = connected_components(mask);
    let Some(best) = (0..sizes.len()).max_by(|&i, &j| sizes[i].cmp(&sizes[j]).then(j.cmp(&i))) else {
        return Vec::new();
    };
    (0..labels.len()).filter(|&i| labels.data()[i] == best as u32 + 1).collect()
}

/// Candidate prompt voxels for a mode; falls back to the whole lesion when
/// a region is empty. Returns the candidates and whether the fallback fired.
fn candidates(vol: &VolumeSample, mode: EvalMode, cfg: &EvalConfig) -> Result<(Vec<usize>, bool)> {
    match mode {
        EvalMode::Point => Ok((largest_component(&vol.mask), false)),
        EvalMode::RegionPoint(r) => {
            let part = region_partition(&vol.mask, vol.spacing, cfg.region_fracs[0], cfg.region_fracs[1])?;
            let v = region_voxels(&part, r);
            if v.is_empty() {
                Ok((largest_component(&vol.mask), true))
            } else {
                Ok((v, false))
            }
        }
        EvalMode::SlidingWindow => Ok((Vec::new(), false)),
    }
}

fn volume_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Scores one volume; prompt modes average over `prompt_trials` random
/// single-point draws. Volumes without foreground use sliding windows.
fn score_volume(model: &Model, vol: &VolumeSample, index: usize, mode: EvalMode, cfg: &EvalConfig, seed: u64) -> Result<(VolumeScore, Option<String>)> {
    let (cands, fell_back) = if vol.mask.count_nonzero() == 0 {
        (Vec::new(), false)
    } else {
        candidates(vol, mode, cfg)?
    };
    let mut note = fell_back.then(|| format!("{}: region empty, prompt drawn from the whole lesion", vol.id));
    let mut rng = ChaCha8Rng::seed_from_u64(volume_seed(seed, index));
    let (mut d, mut s) = (0.0, 0.0);
    let trials = if cands.is_empty() { 1 } else { cfg.prompt_trials };
    for _ in 0..trials {
        let pred = if cands.is_empty() {
            if mode != EvalMode::SlidingWindow {
                note = Some(format!("{}: no foreground, scored with sliding windows", vol.id));
            }
            binarize(&model.sliding_window(&vol.image, cfg.overlap)?)?
        } else {
            let c = vol.mask.coords(cands[rng.gen_range(0..cands.len())]);
            model.prompt_patch(&vol.image, &[[c[0] as f64, c[1] as f64, c[2] as f64]])?
        };
        d += dice(&pred, &vol.mask)?;
        s += nsd(&pred, &vol.mask, cfg.nsd_tolerance_mm, vol.spacing)?;
    }
    let score = VolumeScore {
        id: vol.id.clone(),
        seed,
        dice: d / trials as f64,
        nsd: s / trials as f64,
    };
    Ok((score, note))
}

/// Evaluates `model` on preprocessed `volumes`. Prompt draws depend only on
/// `seed` and the volume index.
pub fn evaluate(model: &Model, volumes: &[VolumeSample], cfg: &EvalConfig, mode: EvalMode, seed: u64, arm: &str, fingerprint: &str) -> Result<EvalReport> {
    let results: Vec<(VolumeScore, Option<String>)> = volumes
        .par_iter()
        .enumerate()
        .map(|(i, v)| score_volume(model, v, i, mode, cfg, seed))
        .collect::<Result<_>>()?;
    let mut notes = Vec::new();
    let mut scores = Vec::with_capacity(results.len());
    for (s, n) in results {
        scores.push(s);
        notes.extend(n);
    }
    let trials = if mode == EvalMode::SlidingWindow { 1 } else { cfg.prompt_trials };
    Ok(EvalReport::from_scores(arm, fingerprint, &mode.label(), trials, scores, notes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_sd_values() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_sd(&[0.5]), (0.5, 0.0));
    }

    #[test]
    fn merge_pools_seeds() {
        let a = EvalReport::from_scores("x", "f", "point", 1, vec![VolumeScore { id: "a".into(), seed: 0, dice: 1.0, nsd: 1.0 }], vec![]);
        let b = EvalReport::from_scores("x", "f", "point", 1, vec![VolumeScore { id: "a".into(), seed: 1, dice: 0.0, nsd: 0.5 }], vec![]);
        let m = EvalReport::merge(&[a, b]);
        assert_eq!(m.seeds, vec![0, 1]);
        assert_eq!(m.dice_mean, 0.5);
        assert_eq!(m.nsd_mean, 0.75);
    }
}
