//! Synthetic corpus generation and preprocessing for a run.

use crate::config::DataConfig;
use crate::error::Result;
use crate::phantom::gen_phantom;
use crate::preprocess::{compute_stats, preprocess_volume, PreprocessStats};
use crate::volume::VolumeSample;

/// Phantom seed of volume `index` in a corpus drawn with `seed`.
pub fn phantom_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Raw training and held-out phantoms. Held-out volumes take the indices
/// after the training ones so the two sets never share a seed.
pub fn gen_corpus(cfg: &DataConfig, seed: u64) -> Result<(Vec<VolumeSample>, Vec<VolumeSample>)> {
    let gen = |i: usize| gen_phantom(phantom_seed(seed, i), cfg.dims, cfg.n_lesions, cfg.contrast, cfg.noise_sd);
    let train = (0..cfg.n_train).map(gen).collect::<Result<Vec<_>>>()?;
    let held = (cfg.n_train..cfg.n_train + cfg.n_heldout).map(gen).collect::<Result<Vec<_>>>()?;
    Ok((train, held))
}

pub struct Prepared {
    pub stats: PreprocessStats,
    pub train: Vec<VolumeSample>,
    pub heldout: Vec<VolumeSample>,
}

/// Statistics come from the training set only and are applied to both sets.
pub fn prepare(cfg: &DataConfig, train: &[VolumeSample], heldout: &[VolumeSample]) -> Result<Prepared> {
    let stats = compute_stats(train, cfg.target_spacing)?;
    let pp = |v: &VolumeSample| preprocess_volume(v, &stats, cfg.anisotropy_threshold);
    Ok(Prepared {
        train: train.iter().map(pp).collect::<Result<_>>()?,
        heldout: heldout.iter().map(pp).collect::<Result<_>>()?,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_disjoint() {
        let cfg = DataConfig { n_train: 2, n_heldout: 1, dims: [12, 12, 12], ..Default::default() };
        let (a, h) = gen_corpus(&cfg, 5).unwrap();
        let (b, _) = gen_corpus(&cfg, 5).unwrap();
        assert_eq!(a[1].image, b[1].image);
        assert_ne!(a[0].id, h[0].id);
        let p = prepare(&cfg, &a, &h).unwrap();
        assert_eq!(p.heldout.len(), 1);
    }
}
