//! Training loop: balanced crops, augmentation, point prompts, Dice + CE,
//! AdamW on the tunable tensors with the frozen ones hash-checked per epoch.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::forward::Fwd;
use crate::grid::numel;
use crate::loss::dice_ce;
use crate::model::Model;
use crate::optim::{lr_at, AdamW};
use crate::preprocess::{augment, crop_balanced};
use crate::prompt::sample_training_prompts;
use crate::tensor::Tensor;
use crate::volume::VolumeSample;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Pooled over all voxels of the epoch's patches: `2ΣTP / (ΣP + ΣT)`.
    pub dice: f64,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// JSON lines `{"epoch","loss","dice","lr", ...extra}` appended per epoch.
    pub log_path: Option<PathBuf>,
    pub log_extra: serde_json::Map<String, serde_json::Value>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochLog)>,
}

/// SHA-256 of every frozen tensor.
pub fn frozen_hashes(model: &Model) -> BTreeMap<String, String> {
    let all = model.params.hashes();
    model
        .params
        .iter()
        .filter(|(_, p)| p.frozen)
        .map(|(n, _)| (n.clone(), all[n].clone()))
        .collect()
}

/// Errors when a frozen tensor's hash differs from `before` or went missing.
pub fn verify_frozen(before: &BTreeMap<String, String>, model: &Model) -> Result<()> {
    let now = frozen_hashes(model);
    for (name, h) in before {
        match now.get(name) {
            Some(h2) if h2 == h => {}
            Some(_) => return Err(Error::FreezeViolation(format!("frozen tensor `{name}` changed"))),
            None => return Err(Error::FreezeViolation(format!("frozen tensor `{name}` is no longer frozen"))),
        }
    }
    Ok(())
}

fn min_value(v: &[f32]) -> f32 {
    v.iter().copied().fold(f32::INFINITY, f32::min)
}

/// One optimisation step on a single patch. Returns the loss and the
/// counts `(tp, predicted, target)` for the pooled Dice.
fn train_step(model: &mut Model, opt: &mut AdamW, image: &[f32], mask: &[u8], points: Option<&[[f64; 3]]>, lr: f64) -> Result<(f64, [u64; 3])> {
    let dims = model.input_dims();
    let input = Tensor::new(vec![numel(dims), 1], image.to_vec())?;
    let (loss, counts, grads) = {
        let mut f = Fwd::new(&model.params, true);
        let y = model.forward(&mut f, &input, dims, points)?;
        let logits: Vec<f64> = f.g.value(y).data().iter().map(|&v| v as f64).collect();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits during training".into()));
        }
        let (parts, grad) = dice_ce(&logits, mask)?;
        let mut counts = [0u64; 3];
        for (z, &t) in logits.iter().zip(mask) {
            let p = (*z > 0.0) as u64;
            counts[0] += p * t as u64;
            counts[1] += p;
            counts[2] += t as u64;
        }
        let total = parts.total();
        let root = f.g.scalar_with_grad(y, total as f32, grad.iter().map(|&v| v as f32).collect());
        let gr = f.g.backward(root);
        let grads: Vec<(String, Tensor)> = f
            .bound()
            .filter(|(name, _)| !model.params.get(name).map(|p| p.frozen).unwrap_or(true))
            .filter_map(|(name, v)| gr.get(*v).map(|g| (name.clone(), g.clone())))
            .collect();
        (total, counts, grads)
    };
    opt.step(&mut model.params, &grads, lr)?;
    Ok((loss, counts))
}

/// Trains `model` in place on preprocessed volumes. Each epoch visits every
/// volume `patches_per_volume` times in a seeded random order.
pub fn train(model: &mut Model, corpus: &[VolumeSample], cfg: &TrainConfig, seed: u64, mut opts: TrainOptions) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Parameter("training corpus is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(cfg.betas, cfg.eps, cfg.weight_decay);
    let frozen = frozen_hashes(model);
    let patch = model.input_dims();
    let steps_per_epoch = corpus.len() * cfg.patches_per_volume;
    let total_steps = (cfg.epochs * steps_per_epoch).saturating_sub(1);
    let pads: Vec<f32> = corpus.iter().map(|v| min_value(v.image.data())).collect();
    let mut log_file = match &opts.log_path {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).flat_map(|i| std::iter::repeat(i).take(cfg.patches_per_volume)).collect();
        order.shuffle(&mut rng);
        let lr_epoch = lr_at(step, total_steps, cfg.lr, cfg.end_factor);
        let mut loss_sum = 0.0;
        let mut counts = [0u64; 3];
        for &vi in &order {
            let vol = &corpus[vi];
            let crop = crop_balanced(&vol.image, &vol.mask, patch, pads[vi], cfg.fg_ratio, &mut rng);
            let (img, msk) = augment(&crop.image, &crop.mask, &cfg.augment, &mut rng);
            let points = model
                .cfg
                .prompt
                .enabled
                .then(|| sample_training_prompts(&msk, model.cfg.prompt.n_bg_points, model.cfg.prompt.n_fg_points, &mut rng));
            let lr = lr_at(step, total_steps, cfg.lr, cfg.end_factor);
            let (l, c) = train_step(model, &mut opt, img.data(), msk.data(), points.as_deref(), lr)?;
            loss_sum += l;
            for k in 0..3 {
                counts[k] += c[k];
            }
            step += 1;
        }
        verify_frozen(&frozen, model)?;
        let denom = counts[1] + counts[2];
        let log = EpochLog {
            epoch,
            loss: loss_sum / order.len() as f64,
            dice: if denom == 0 { 1.0 } else { 2.0 * counts[0] as f64 / denom as f64 },
            lr: lr_epoch,
        };
        if let (Some(file), Some(path)) = (log_file.as_mut(), opts.log_path.as_ref()) {
            let mut obj = match serde_json::to_value(&log).expect("log serialises") {
                serde_json::Value::Object(m) => m,
                _ => unreachable!(),
            };
            obj.extend(opts.log_extra.clone());
            writeln!(file, "{}", serde_json::Value::Object(obj)).map_err(|e| Error::io(path, e))?;
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&log);
        }
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::{gen_corpus, prepare};
    use crate::model::ModelConfig;
    use crate::preprocess::AugmentParams;
    use crate::vit2d::{Vit2dCheckpoint, Vit2dSpec};

    fn tiny() -> (Model, Vec<VolumeSample>, TrainConfig) {
        let mut rc = RunConfig::default();
        rc.encoder.grid = [4, 4, 4];
        rc.encoder.window = [2, 2, 2];
        rc.data.n_train = 2;
        rc.data.n_heldout = 0;
        rc.data.dims = [16, 16, 16];
        let cfg = ModelConfig::from(&rc);
        let src = Vit2dCheckpoint::synthetic(Vit2dSpec::for_encoder(&cfg.encoder), 0);
        let model = Model::init(&src, cfg, 3).unwrap();
        let (tr, h) = gen_corpus(&rc.data, 1).unwrap();
        let prepared = prepare(&rc.data, &tr, &h).unwrap();
        let tc = TrainConfig { epochs: 2, augment: AugmentParams::default(), ..Default::default() };
        (model, prepared.train, tc)
    }

    #[test]
    fn deterministic_and_frozen_untouched() {
        let (m0, corpus, tc) = tiny();
        let mut a = m0.clone();
        let mut b = m0.clone();
        let la = train(&mut a, &corpus, &tc, 9, TrainOptions::default()).unwrap();
        let lb = train(&mut b, &corpus, &tc, 9, TrainOptions::default()).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.params.hashes(), b.params.hashes());
        assert_eq!(frozen_hashes(&a), frozen_hashes(&m0));
        assert_ne!(a.params.hashes(), m0.params.hashes());
    }

    #[test]
    fn tampered_frozen_tensor_detected() {
        let (m0, _, _) = tiny();
        let before = frozen_hashes(&m0);
        let mut m = m0.clone();
        let name = before.keys().next().unwrap().clone();
        let mut t = m.params.tensor(&name).unwrap().clone();
        t.data_mut()[0] += 1.0;
        m.params.set_value(&name, t).unwrap();
        assert!(matches!(verify_frozen(&before, &m), Err(Error::FreezeViolation(_))));
    }

    #[test]
    fn log_lines_written() {
        let (mut m, corpus, mut tc) = tiny();
        tc.epochs = 1;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.log.jsonl");
        let mut extra = serde_json::Map::new();
        extra.insert("seed".into(), 4.into());
        train(&mut m, &corpus, &tc, 4, TrainOptions { log_path: Some(path.clone()), log_extra: extra, on_epoch: None }).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for k in ["epoch", "loss", "dice", "lr", "seed"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
}
