//! AdamW with decoupled weight decay and the linear learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Linear interpolation from `lr0` at step 0 to `end_factor·lr0` at
/// `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, lr0: f64, end_factor: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * (1.0 + (end_factor - 1.0) * frac)
}

struct Moments {
    step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

pub struct AdamW {
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        Self {
            betas,
            eps,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Updates each named tensor from its gradient. Touching a frozen tensor
    /// is an error.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        let [b1, b2] = self.betas;
        for (name, g) in grads {
            let p = store.get(name)?;
            if p.frozen {
                return Err(Error::FreezeViolation(format!("optimizer received frozen tensor `{name}`")));
            }
            if p.value.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient of `{name}` has shape {:?}", g.shape())));
            }
            let n = g.numel();
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                step: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            st.step += 1;
            let bc1 = 1.0 - b1.powi(st.step as i32);
            let bc2 = 1.0 - b2.powi(st.step as i32);
            let mut w = (*p.value).clone();
            let decay = (1.0 - lr * self.weight_decay) as f32;
            let step_size = lr / bc1;
            for i in 0..n {
                let gi = g.data()[i];
                st.m[i] = (b1 as f32) * st.m[i] + (1.0 - b1 as f32) * gi;
                st.v[i] = (b2 as f32) * st.v[i] + (1.0 - b2 as f32) * gi * gi;
                let denom = ((st.v[i] as f64) / bc2).sqrt() + self.eps;
                let upd = (step_size * st.m[i] as f64 / denom) as f32;
                let wi = &mut w.data_mut()[i];
                if self.weight_decay != 0.0 {
                    *wi *= decay;
                }
                *wi -= upd;
            }
            store.set_value(name, w)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Origin;

    #[test]
    fn schedule_points() {
        assert_eq!(lr_at(0, 100, 1e-4, 0.1), 1e-4);
        assert!((lr_at(100, 100, 1e-4, 0.1) - 1e-5).abs() < 1e-18);
        assert!((lr_at(50, 100, 1e-4, 0.1) - 5.5e-5).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), Origin::New, false);
        let before = s.tensor("w").unwrap().clone();
        let mut opt = AdamW::new([0.9, 0.999], 1e-8, 0.0);
        for _ in 0..3 {
            opt.step(&mut s, &[("w".into(), Tensor::zeros(&[3]))], 1e-3).unwrap();
        }
        assert_eq!(s.tensor("w").unwrap(), &before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(), Origin::New, false);
        let mut opt = AdamW::new([0.9, 0.999], 1e-8, 0.0);
        opt.step(&mut s, &[("w".into(), Tensor::new(vec![2], vec![0.3, -5.0]).unwrap())], 0.01).unwrap();
        let w = s.tensor("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-6 && (w[1] - 1.01).abs() < 1e-6);
    }

    #[test]
    fn frozen_tensor_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[1]), Origin::Pretrained, true);
        let mut opt = AdamW::new([0.9, 0.999], 1e-8, 0.0);
        let r = opt.step(&mut s, &[("w".into(), Tensor::zeros(&[1]))], 0.1);
        assert!(matches!(r, Err(Error::FreezeViolation(_))));
    }
}
