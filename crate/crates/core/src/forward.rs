//! Forward-pass context binding named parameters onto a [`Graph`].

use std::collections::BTreeMap;

use crate::autograd::{Graph, Var, WeightLayout};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-6;

pub struct Fwd<'a> {
    pub g: Graph,
    params: &'a ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'a> Fwd<'a> {
    /// `train` enables gradient recording for tunable tensors.
    pub fn new(params: &'a ParamStore, train: bool) -> Self {
        Self {
            g: Graph::new(train),
            params,
            bound: BTreeMap::new(),
        }
    }

    /// The graph leaf for parameter `name`, created on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let param = self.params.get(name)?;
        let v = self.g.leaf(param.value.clone(), !param.frozen);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    /// Parameters touched by this pass, with their graph handles.
    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.g.input(t)
    }

    /// `x·Wᵀ + b` with `W = {prefix}.weight` in `[out, in]` layout.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b_name = format!("{prefix}.bias");
        let b = if self.has(&b_name) { Some(self.p(&b_name)?) } else { None };
        Ok(self.g.linear(x, w, b, WeightLayout::OutIn))
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        Ok(self.g.layer_norm(x, w, b, LN_EPS))
    }

    /// `lin2(GELU(lin1(x)))`.
    pub fn mlp(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.lin1"))?;
        let h = self.g.gelu(h);
        self.linear(h, &format!("{prefix}.lin2"))
    }
}
