//! Parameter accounting for the inflated encoder.
//!
//! Counts are derived twice: from closed-form expressions in the config and
//! by enumerating the live tensors. Any disagreement is an error.

use serde::{Deserialize, Serialize};

use crate::config::EncoderConfig;
use crate::encoder::tensor_specs;
use crate::error::{Error, Result};
use crate::params::{Origin, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    FrozenPretrained,
    TunablePretrained,
    TunableNew,
    /// Tunable replacement of a pretrained module (the 3D bottleneck).
    TunableRebuilt,
}

impl ParamClass {
    pub fn of(origin: Origin, frozen: bool) -> Result<Self> {
        match (origin, frozen) {
            (Origin::Pretrained, true) => Ok(ParamClass::FrozenPretrained),
            (Origin::Pretrained, false) => Ok(ParamClass::TunablePretrained),
            (Origin::New, false) => Ok(ParamClass::TunableNew),
            (Origin::Rebuilt, false) => Ok(ParamClass::TunableRebuilt),
            (o, true) => Err(Error::Audit(format!("{o:?} tensor is frozen; only pretrained tensors may be"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ParamClass::FrozenPretrained => "frozen-pretrained",
            ParamClass::TunablePretrained => "tunable-pretrained",
            ParamClass::TunableNew => "tunable-new",
            ParamClass::TunableRebuilt => "tunable-rebuilt",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub frozen_pretrained: usize,
    pub tunable_pretrained: usize,
    pub tunable_new: usize,
    pub tunable_rebuilt: usize,
}

impl ClassCounts {
    fn add(&mut self, class: ParamClass, n: usize) {
        match class {
            ParamClass::FrozenPretrained => self.frozen_pretrained += n,
            ParamClass::TunablePretrained => self.tunable_pretrained += n,
            ParamClass::TunableNew => self.tunable_new += n,
            ParamClass::TunableRebuilt => self.tunable_rebuilt += n,
        }
    }

    pub fn total(&self) -> usize {
        self.frozen_pretrained + self.tunable_pretrained + self.tunable_new + self.tunable_rebuilt
    }

    pub fn tunable(&self) -> usize {
        self.tunable_pretrained + self.tunable_new + self.tunable_rebuilt
    }
}

/// Per-class counts written directly in terms of the architecture.
pub fn closed_form(cfg: &EncoderConfig) -> ClassCounts {
    let (c, p, l, m, b) = (cfg.c, cfg.patch, cfg.depth, cfg.adapter_dim, cfg.bottleneck_dim);
    let [d, h, w] = cfg.grid;
    let hid = cfg.mlp_ratio * c;
    let attn = 3 * c * c + 3 * c + c * c + c;
    let mlp = 2 * hid * c + hid + c;
    let adapter = 2 * c * m + 27 * m + 2 * m + c;
    ClassCounts {
        frozen_pretrained: c * cfg.c_in * p * p + c + c * h * w + l * (attn + mlp),
        tunable_pretrained: l * 4 * c,
        tunable_new: c * p + if cfg.depth_table { c * d } else { 0 } + l * cfg.adapters_per_block * adapter,
        tunable_rebuilt: b * c + b + 27 * b * b + b,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub name: String,
    pub count: usize,
    pub class: ParamClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub rows: Vec<AuditRow>,
    pub counts: ClassCounts,
    pub total: usize,
    pub reference_2d_total: usize,
    /// New tensors relative to the 2D model.
    pub added_fraction: f64,
    /// All tunable tensors (pretrained, new and rebuilt) relative to the 2D model.
    pub tunable_fraction: f64,
}

impl AuditReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:<48} {:>12}  {}\n", "tensor", "count", "class");
        for r in &self.rows {
            s.push_str(&format!("{:<48} {:>12}  {}\n", r.name, r.count, r.class.label()));
        }
        let c = &self.counts;
        s.push_str(&format!(
            "\nfrozen-pretrained  {:>12}\ntunable-pretrained {:>12}\ntunable-new        {:>12}\ntunable-rebuilt    {:>12}\ntotal              {:>12}\n2D reference       {:>12}\nadded fraction     {:>11.4}%\ntunable fraction   {:>11.4}%\n",
            c.frozen_pretrained,
            c.tunable_pretrained,
            c.tunable_new,
            c.tunable_rebuilt,
            self.total,
            self.reference_2d_total,
            100.0 * self.added_fraction,
            100.0 * self.tunable_fraction
        ));
        s
    }
}

fn finish(rows: Vec<AuditRow>, cfg: &EncoderConfig, reference_2d_total: usize) -> Result<AuditReport> {
    let mut counts = ClassCounts::default();
    for r in &rows {
        counts.add(r.class, r.count);
    }
    let formula = closed_form(cfg);
    if formula != counts {
        return Err(Error::Audit(format!("closed form {formula:?} disagrees with enumeration {counts:?}")));
    }
    if reference_2d_total == 0 {
        return Err(Error::Audit("reference 2D total is zero".into()));
    }
    let r = reference_2d_total as f64;
    Ok(AuditReport {
        total: counts.total(),
        added_fraction: counts.tunable_new as f64 / r,
        tunable_fraction: counts.tunable() as f64 / r,
        rows,
        counts,
        reference_2d_total,
    })
}

/// Audits the encoder tensors of a live store (prompt and decoder tensors
/// are not part of the encoder and are skipped).
pub fn param_audit(store: &ParamStore, cfg: &EncoderConfig, reference_2d_total: usize) -> Result<AuditReport> {
    let mut rows = Vec::new();
    for (name, p) in store.iter() {
        if name.starts_with("prompt.") || name.starts_with("decoder.") {
            continue;
        }
        rows.push(AuditRow {
            name: name.clone(),
            count: p.value.numel(),
            class: ParamClass::of(p.origin, p.frozen)?,
        });
    }
    finish(rows, cfg, reference_2d_total)
}

/// Audits a configuration from its declared tensor shapes, without
/// allocating the weights (used for the full-scale preset).
pub fn config_audit(cfg: &EncoderConfig, reference_2d_total: usize) -> Result<AuditReport> {
    let mut rows = Vec::new();
    for s in tensor_specs(cfg) {
        rows.push(AuditRow {
            count: s.numel(),
            class: ParamClass::of(s.origin, s.frozen)?,
            name: s.name,
        });
    }
    rows.sort_by(|a, b| a.name.cmp(&b.name));
    finish(rows, cfg, reference_2d_total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::inflate;
    use crate::vit2d::{Vit2dCheckpoint, Vit2dSpec};

    #[test]
    fn toy_adapter_count() {
        let cfg = EncoderConfig::toy();
        let per_block = 2 * (2 * 48 * 12 + 12 * 27 + 12 + 12 + 48);
        let mut no_adapt = cfg.clone();
        no_adapt.adapters_per_block = 0;
        assert_eq!(closed_form(&cfg).tunable_new - closed_form(&no_adapt).tunable_new, 4 * per_block);
        let ck = Vit2dCheckpoint::synthetic(Vit2dSpec::for_encoder(&cfg), 0);
        let store = inflate(&ck, &cfg, 0).unwrap();
        let r = param_audit(&store, &cfg, ck.params.total_elements()).unwrap();
        let enumerated: usize = store.iter().filter(|(n, _)| n.contains(".adapter")).map(|(_, p)| p.value.numel()).sum();
        assert_eq!(enumerated, 4 * per_block);
        assert_eq!(r.total, store.total_elements());
    }

    #[test]
    fn only_patch_depth_kernel_without_adapters_or_depth_table() {
        let mut cfg = EncoderConfig::toy();
        cfg.adapters_per_block = 0;
        cfg.depth_table = false;
        let r = config_audit(&cfg, 1000).unwrap();
        assert_eq!(r.counts.tunable_new, cfg.c * cfg.patch);
        let new_rows: Vec<_> = r.rows.iter().filter(|x| x.class == ParamClass::TunableNew).collect();
        assert_eq!(new_rows.len(), 1);
        assert_eq!(new_rows[0].name, "patch_embed.proj_b.weight");
    }

    #[test]
    fn frozen_new_tensor_is_an_audit_error() {
        let cfg = EncoderConfig::toy();
        let ck = Vit2dCheckpoint::synthetic(Vit2dSpec::for_encoder(&cfg), 0);
        let mut store = inflate(&ck, &cfg, 0).unwrap();
        store.set_frozen("depth_embed", true).unwrap();
        assert!(matches!(param_audit(&store, &cfg, 1), Err(Error::Audit(_))));
    }
}
