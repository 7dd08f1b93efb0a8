//! Light 3D mask decoder with multi-level aggregation.
//!
//! Each stream (taps 1–3 and the bottleneck with aggregation on, the
//! bottleneck alone otherwise) is projected by a 1³ conv; the streams are
//! concatenated and fused by a 3³ conv, upsampled in ×2 trilinear + 3³ conv
//! stages (the last stage resizes exactly to the input), concatenated with
//! the raw input, and a final 3³ conv emits one logit channel.
//!
//! Tensors: `decoder.proj<s>.{weight,bias}` (s = 1..3 taps, 4 bottleneck),
//! `decoder.fuse.*`, `decoder.up<k>.*`, `decoder.head.*`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::config::{DecoderConfig, EncoderConfig};
use crate::error::{Error, Result};
use crate::forward::Fwd;
use crate::grid::{Dims, Grid3};
use crate::params::{fan_in_uniform, Origin, ParamStore};
use crate::tensor::Tensor;

/// Number of upsampling stages: `ceil(log2 p)`.
pub fn n_stages(patch: usize) -> usize {
    let mut n = 0;
    while (1usize << n) < patch {
        n += 1;
    }
    n
}

/// Stream indices (1..=4) consumed by the decoder.
pub fn streams(dec: &DecoderConfig) -> Vec<usize> {
    if dec.use_mla {
        vec![1, 2, 3, 4]
    } else {
        vec![4]
    }
}

/// Grid extent after upsampling stage `s` (1-based) of `n`.
pub fn stage_dims(grid: Dims, input: Dims, s: usize, n: usize) -> Dims {
    if s == n {
        input
    } else {
        grid.map(|g| g << s)
    }
}

pub fn tensor_shapes(enc: &EncoderConfig, dec: &DecoderConfig) -> Vec<(String, Vec<usize>)> {
    let cd = dec.width(enc);
    let mut v = Vec::new();
    let ss = streams(dec);
    for &s in &ss {
        let cf = if s == 4 { enc.bottleneck_dim } else { enc.c };
        v.push((format!("decoder.proj{s}.weight"), vec![cd, cf, 1, 1, 1]));
        v.push((format!("decoder.proj{s}.bias"), vec![cd]));
    }
    v.push(("decoder.fuse.weight".into(), vec![cd, ss.len() * cd, 3, 3, 3]));
    v.push(("decoder.fuse.bias".into(), vec![cd]));
    for k in 1..=n_stages(enc.patch) {
        v.push((format!("decoder.up{k}.weight"), vec![cd, cd, 3, 3, 3]));
        v.push((format!("decoder.up{k}.bias"), vec![cd]));
    }
    v.push(("decoder.head.weight".into(), vec![1, cd + enc.c_in, 3, 3, 3]));
    v.push(("decoder.head.bias".into(), vec![1]));
    v
}

/// Fresh decoder tensors: fan-in uniform weights, zero biases.
pub fn init_decoder_params(store: &mut ParamStore, enc: &EncoderConfig, dec: &DecoderConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, shape) in tensor_shapes(enc, dec) {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            fan_in_uniform(&shape, fan_in, &mut rng)
        };
        store.insert(name, t, Origin::New, false);
    }
}

fn conv(f: &mut Fwd, x: Var, grid: Dims, prefix: &str) -> Result<Var> {
    let w = f.p(&format!("{prefix}.weight"))?;
    let b = f.p(&format!("{prefix}.bias"))?;
    Ok(f.g.conv3d(x, grid, w, Some(b)))
}

/// Decodes to `[D·H·W, 1]` logits. `features` holds the tap 1–3 maps and the
/// bottleneck; `raw` is the `[D·H·W, c_in]` input.
#[allow(clippy::too_many_arguments)]
pub fn decode(
    f: &mut Fwd,
    enc: &EncoderConfig,
    dec: &DecoderConfig,
    features: [Var; 4],
    grid: Dims,
    raw: Var,
    input: Dims,
) -> Result<Var> {
    if grid.map(|g| g * enc.patch) != input {
        return Err(Error::Shape(format!(
            "feature grid {grid:?} × patch {} does not match input {input:?}",
            enc.patch
        )));
    }
    let mut projected = Vec::new();
    for s in streams(dec) {
        projected.push(conv(f, features[s - 1], grid, &format!("decoder.proj{s}"))?);
    }
    let cat = if projected.len() == 1 {
        projected[0]
    } else {
        f.g.concat_cols(&projected)
    };
    let fused = conv(f, cat, grid, "decoder.fuse")?;
    let mut x = f.g.gelu(fused);
    let n = n_stages(enc.patch);
    let mut cur = grid;
    for s in 1..=n {
        let next = stage_dims(grid, input, s, n);
        let up = f.g.resize_trilinear(x, cur, next);
        let h = conv(f, up, next, &format!("decoder.up{s}"))?;
        x = f.g.gelu(h);
        cur = next;
    }
    let cat = f.g.concat_cols(&[x, raw]);
    conv(f, cat, input, "decoder.head")
}

/// `1` where `sigmoid(logit) > 0.5`, i.e. `logit > 0`. Non-finite logits are
/// an error.
pub fn binarize(logits: &Grid3<f32>) -> Result<Grid3<u8>> {
    if let Some(i) = logits.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite logit {} at voxel {:?}",
            logits.data()[i],
            logits.coords(i)
        )));
    }
    Ok(logits.map(|v| (v > 0.0) as u8))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::numel;

    #[test]
    fn stage_counts() {
        assert_eq!(n_stages(4), 2);
        assert_eq!(n_stages(8), 3);
        assert_eq!(n_stages(14), 4);
        assert_eq!(stage_dims([2, 2, 2], [28, 28, 28], 3, 4), [16, 16, 16]);
        assert_eq!(stage_dims([2, 2, 2], [28, 28, 28], 4, 4), [28, 28, 28]);
    }

    #[test]
    fn binarize_boundary_and_errors() {
        let g = Grid3::new([1, 1, 3], vec![0.0, 1e-7, -3.0]).unwrap();
        assert_eq!(binarize(&g).unwrap().data(), &[0, 1, 0]);
        let bad = Grid3::new([1, 1, 2], vec![f32::INFINITY, 0.0]).unwrap();
        assert!(matches!(binarize(&bad), Err(Error::Numeric(_))));
        let nan = Grid3::new([1, 1, 1], vec![f32::NAN]).unwrap();
        assert!(binarize(&nan).is_err());
    }

    #[test]
    fn zero_inputs_give_head_bias() {
        let mut enc = EncoderConfig::toy();
        enc.grid = [2, 2, 2];
        let dec = DecoderConfig::default();
        let mut store = ParamStore::new();
        init_decoder_params(&mut store, &enc, &dec, 1);
        store.set_value("decoder.head.bias", Tensor::full(&[1], 0.375)).unwrap();
        let mut f = Fwd::new(&store, false);
        let n = numel(enc.grid);
        let feats = [0, 1, 2, 3].map(|s| f.input(Tensor::zeros(&[n, if s == 3 { enc.bottleneck_dim } else { enc.c }])));
        let dims = enc.input_dims();
        let raw = f.input(Tensor::zeros(&[numel(dims), 1]));
        let y = decode(&mut f, &enc, &dec, feats, enc.grid, raw, dims).unwrap();
        assert_eq!(f.g.value(y).shape(), [numel(dims), 1]);
        assert!(f.g.value(y).data().iter().all(|&v| v == 0.375));
    }

    #[test]
    fn mla_off_is_a_name_subset() {
        let enc = EncoderConfig::toy();
        let on = tensor_shapes(&enc, &DecoderConfig::default());
        let off = tensor_shapes(&enc, &DecoderConfig { use_mla: false, ..Default::default() });
        let names_on: Vec<_> = on.iter().map(|(n, _)| n.clone()).collect();
        assert!(off.iter().all(|(n, _)| names_on.contains(n)));
        let count = |v: &[(String, Vec<usize>)]| v.iter().map(|(_, s)| s.iter().product::<usize>()).sum::<usize>();
        assert!(count(&off) < count(&on));
    }
}
