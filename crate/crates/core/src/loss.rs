//! Dice + binary cross-entropy on logits.

use num_traits::Float;

use crate::error::{Error, Result};

pub const DICE_SMOOTH: f64 = 1e-5;
pub const LOGIT_CLAMP: f64 = 20.0;

/// Value of the two loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts<T> {
    pub dice: T,
    pub ce: T,
}

impl<T: Float> LossParts<T> {
    pub fn total(&self) -> T {
        self.dice + self.ce
    }
}

fn c<T: Float>(v: f64) -> T {
    T::from(v).expect("constant fits the float type")
}

/// `(1 − (2·Σpt + s)/(Σp + Σt + s)) + mean BCE`, with `p = sigmoid(z)`,
/// `s = 1e-5` and logits clamped to `±20`. Returns the terms and the
/// gradient with respect to each logit (zero where the clamp is active).
pub fn dice_ce<T: Float>(logits: &[T], target: &[u8]) -> Result<(LossParts<T>, Vec<T>)> {
    if logits.len() != target.len() || logits.is_empty() {
        return Err(Error::Loss(format!(
            "logits ({}) and target ({}) must be nonempty and equal in size",
            logits.len(),
            target.len()
        )));
    }
    if target.iter().any(|&t| t > 1) {
        return Err(Error::Loss("target must be binary".into()));
    }
    let one = T::one();
    let lim = c::<T>(LOGIT_CLAMP);
    let s = c::<T>(DICE_SMOOTH);
    let n = c::<T>(logits.len() as f64);
    let z: Vec<T> = logits.iter().map(|&v| v.max(-lim).min(lim)).collect();
    let p: Vec<T> = z.iter().map(|&v| one / (one + (-v).exp())).collect();
    let (mut inter, mut psum, mut tsum, mut ce) = (T::zero(), T::zero(), T::zero(), T::zero());
    for i in 0..z.len() {
        let t = if target[i] == 1 { one } else { T::zero() };
        inter = inter + p[i] * t;
        psum = psum + p[i];
        tsum = tsum + t;
        ce = ce + z[i].max(T::zero()) - z[i] * t + (one + (-z[i].abs()).exp()).ln();
    }
    let num = c::<T>(2.0) * inter + s;
    let den = psum + tsum + s;
    let dice = one - num / den;
    let ce = ce / n;
    let grad = (0..z.len())
        .map(|i| {
            if logits[i].abs() > lim {
                return T::zero();
            }
            let t = if target[i] == 1 { one } else { T::zero() };
            let d_dice_dp = -(c::<T>(2.0) * t * den - num) / (den * den);
            let dp_dz = p[i] * (one - p[i]);
            d_dice_dp * dp_dz + (p[i] - t) / n
        })
        .collect();
    Ok((LossParts { dice, ce }, grad))
}
