//! 3D image encoder inflated from a 2D transformer.
//!
//! The 2D patch convolution becomes a frozen `1×p×p` convolution (input
//! channels averaged) followed by a tunable depthwise `p×1×1` convolution
//! initialised to `1/p`. The 2D positional table is kept and a zero-initialised
//! depth table is added. Blocks run windowed 3D attention with the inherited
//! weights, plus spatial adapters. The neck is rebuilt as 3D convolutions.
//!
//! Names of the 3D tensors:
//! `patch_embed.proj_a.{weight,bias}`, `patch_embed.proj_b.weight`,
//! `pos_embed`, `depth_embed`, `blocks.<i>.*` (as in 2D) with
//! `blocks.<i>.adapter{1,2}.{W_down,b_down,dw.weight,dw.bias,W_up,b_up}`,
//! and `neck.conv{1,2}.{weight,bias}`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Var, WeightLayout};
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::forward::Fwd;
use crate::grid::{numel, Dims};
use crate::params::{fan_in_uniform, Origin, ParamStore};
use crate::tensor::Tensor;
use crate::vit2d::{Vit2dCheckpoint, Vit2dSpec};

/// Declared shape and policy of one encoder tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub origin: Origin,
    pub frozen: bool,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// The freeze policy: the inherited patch kernel, positional table and the
/// attention/MLP weights stay frozen; everything else is tuned.
pub fn is_frozen_by_policy(name: &str) -> bool {
    if name.starts_with("patch_embed.proj_a.") || name == "pos_embed" {
        return true;
    }
    if let Some(rest) = name.strip_prefix("blocks.") {
        let rest = rest.split_once('.').map(|(_, r)| r).unwrap_or("");
        return rest.starts_with("attn.") || rest.starts_with("mlp.");
    }
    false
}

pub fn adapter_names(block: usize, slot: usize) -> [String; 6] {
    let p = format!("blocks.{block}.adapter{slot}");
    [
        format!("{p}.W_down"),
        format!("{p}.b_down"),
        format!("{p}.dw.weight"),
        format!("{p}.dw.bias"),
        format!("{p}.W_up"),
        format!("{p}.b_up"),
    ]
}

/// Every encoder tensor in a fixed order.
pub fn tensor_specs(cfg: &EncoderConfig) -> Vec<TensorSpec> {
    let (c, p, m, b) = (cfg.c, cfg.patch, cfg.adapter_dim, cfg.bottleneck_dim);
    let h = cfg.mlp_ratio * c;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, origin: Origin| {
        let frozen = is_frozen_by_policy(&name);
        out.push(TensorSpec {
            name,
            shape,
            origin,
            frozen,
        });
    };
    push("patch_embed.proj_a.weight".into(), vec![c, cfg.c_in, 1, p, p], Origin::Pretrained);
    push("patch_embed.proj_a.bias".into(), vec![c], Origin::Pretrained);
    push("patch_embed.proj_b.weight".into(), vec![c, 1, p, 1, 1], Origin::New);
    push("pos_embed".into(), vec![c, cfg.grid[1], cfg.grid[2]], Origin::Pretrained);
    if cfg.depth_table {
        push("depth_embed".into(), vec![c, cfg.grid[0]], Origin::New);
    }
    for i in 0..cfg.depth {
        let n = |s: &str| format!("blocks.{i}.{s}");
        for (s, shape) in [
            ("norm1.weight", vec![c]),
            ("norm1.bias", vec![c]),
            ("attn.qkv.weight", vec![3 * c, c]),
            ("attn.qkv.bias", vec![3 * c]),
            ("attn.proj.weight", vec![c, c]),
            ("attn.proj.bias", vec![c]),
            ("norm2.weight", vec![c]),
            ("norm2.bias", vec![c]),
            ("mlp.lin1.weight", vec![h, c]),
            ("mlp.lin1.bias", vec![h]),
            ("mlp.lin2.weight", vec![c, h]),
            ("mlp.lin2.bias", vec![c]),
        ] {
            push(n(s), shape, Origin::Pretrained);
        }
        for slot in 1..=cfg.adapters_per_block {
            let [wd, bd, dw, dwb, wu, bu] = adapter_names(i, slot);
            push(wd, vec![c, m], Origin::New);
            push(bd, vec![m], Origin::New);
            push(dw, vec![m, 1, 3, 3, 3], Origin::New);
            push(dwb, vec![m], Origin::New);
            push(wu, vec![m, c], Origin::New);
            push(bu, vec![c], Origin::New);
        }
    }
    push("neck.conv1.weight".into(), vec![b, c, 1, 1, 1], Origin::Rebuilt);
    push("neck.conv1.bias".into(), vec![b], Origin::Rebuilt);
    push("neck.conv2.weight".into(), vec![b, b, 3, 3, 3], Origin::Rebuilt);
    push("neck.conv2.bias".into(), vec![b], Origin::Rebuilt);
    out
}

fn check_source(ckpt: &Vit2dCheckpoint, cfg: &EncoderConfig) -> Result<()> {
    let want = Vit2dSpec::for_encoder(cfg);
    let got = &ckpt.spec;
    let mismatch = |what: &str, a: String, b: String| Err(Error::Inflation(format!("{what}: checkpoint has {a}, config needs {b}")));
    if got.c != want.c {
        return mismatch("embedding width", got.c.to_string(), want.c.to_string());
    }
    if got.depth != want.depth {
        return mismatch("block count", got.depth.to_string(), want.depth.to_string());
    }
    if got.patch != want.patch {
        return mismatch("patch size", got.patch.to_string(), want.patch.to_string());
    }
    if got.heads != want.heads {
        return mismatch("head count", got.heads.to_string(), want.heads.to_string());
    }
    if got.mlp_ratio != want.mlp_ratio {
        return mismatch("mlp ratio", got.mlp_ratio.to_string(), want.mlp_ratio.to_string());
    }
    if got.grid_hw != want.grid_hw {
        return mismatch("positional grid", format!("{:?}", got.grid_hw), format!("{:?}", want.grid_hw));
    }
    ckpt.validate()
}

/// Builds the 3D encoder state from a 2D checkpoint. Fresh tensors (adapter
/// projections and kernels, rebuilt neck) are drawn from `seed`.
pub fn inflate(ckpt: &Vit2dCheckpoint, cfg: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    check_source(ckpt, cfg)?;
    let (c, p, b) = (cfg.c, cfg.patch, cfg.bottleneck_dim);
    let src = &ckpt.params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();

    // Conv A: average the source input channels into each target channel,
    // unless the channel counts already agree.
    let k2 = src.tensor("patch_embed.proj.weight")?;
    let s_in = ckpt.spec.c_in;
    let mut ka = vec![0.0f32; c * cfg.c_in * p * p];
    for o in 0..c {
        for ci in 0..cfg.c_in {
            for k in 0..p * p {
                let v = if s_in == cfg.c_in {
                    k2.data()[(o * s_in + ci) * p * p + k]
                } else {
                    (0..s_in).map(|si| k2.data()[(o * s_in + si) * p * p + k]).sum::<f32>() / s_in as f32
                };
                ka[(o * cfg.c_in + ci) * p * p + k] = v;
            }
        }
    }

    for spec in tensor_specs(cfg) {
        let name = spec.name.as_str();
        let value = match name {
            "patch_embed.proj_a.weight" => Tensor::from_parts(spec.shape.clone(), ka.clone()),
            "patch_embed.proj_a.bias" => src.tensor("patch_embed.proj.bias")?.clone(),
            "patch_embed.proj_b.weight" => Tensor::full(&spec.shape, 1.0 / p as f32),
            "pos_embed" => src.tensor("pos_embed")?.clone(),
            "depth_embed" => Tensor::zeros(&spec.shape),
            "neck.conv1.weight" => fan_in_uniform(&spec.shape, c, &mut rng),
            "neck.conv2.weight" => fan_in_uniform(&spec.shape, b * 27, &mut rng),
            "neck.conv1.bias" | "neck.conv2.bias" => Tensor::zeros(&spec.shape),
            _ if name.contains(".adapter") => {
                if name.ends_with(".W_down") {
                    fan_in_uniform(&spec.shape, c, &mut rng)
                } else if name.ends_with(".dw.weight") {
                    fan_in_uniform(&spec.shape, 27, &mut rng)
                } else {
                    // biases and the up-projection start at zero
                    Tensor::zeros(&spec.shape)
                }
            }
            _ => src.tensor(name)?.clone(),
        };
        if value.shape() != spec.shape.as_slice() {
            return Err(Error::Inflation(format!(
                "`{name}` has shape {:?}, expected {:?}",
                value.shape(),
                spec.shape
            )));
        }
        store.insert(name, value, spec.origin, spec.frozen);
    }
    apply_freeze_policy(&mut store);
    Ok(store)
}

/// Sets the frozen flag of every encoder tensor from the policy.
pub fn apply_freeze_policy(store: &mut ParamStore) {
    let names: Vec<String> = store
        .names()
        .filter(|n| !n.starts_with("prompt.") && !n.starts_with("decoder."))
        .cloned()
        .collect();
    for n in names {
        store.set_frozen(&n, is_frozen_by_policy(&n)).expect("name listed from the store");
    }
}

/// Positional encoding of token `(d, h, w)`: 2D table entry plus depth entry.
pub fn pos_encoding(store: &ParamStore, cfg: &EncoderConfig, at: [usize; 3]) -> Result<Vec<f32>> {
    let [d, h, w] = at;
    if d >= cfg.grid[0] || h >= cfg.grid[1] || w >= cfg.grid[2] {
        return Err(Error::Index(format!("token {at:?} outside grid {:?}", cfg.grid)));
    }
    let pos = store.tensor("pos_embed")?;
    let (hh, ww, dd) = (cfg.grid[1], cfg.grid[2], cfg.grid[0]);
    let depth = if cfg.depth_table { Some(store.tensor("depth_embed")?) } else { None };
    Ok((0..cfg.c)
        .map(|j| pos.data()[(j * hh + h) * ww + w] + depth.map_or(0.0, |t| t.data()[j * dd + d]))
        .collect())
}

/// Feature maps handed to the decoder, all on the token grid.
#[derive(Clone, Copy, Debug)]
pub struct Pyramid {
    pub taps: [Var; 4],
    pub bottleneck: Var,
    pub grid: Dims,
}

/// Frozen `1×p×p` patch convolution then the depthwise depth convolution.
/// `input` is `[D·H·W, c_in]` in (z, y, x) row order.
pub fn patch_embed(f: &mut Fwd, cfg: &EncoderConfig, input: &Tensor, dims: Dims) -> Result<(Var, Dims)> {
    let p = cfg.patch;
    if dims.iter().any(|&d| d == 0 || d % p != 0) {
        return Err(Error::Shape(format!("input dims {dims:?} not divisible by patch {p}")));
    }
    if input.rows() != numel(dims) || input.cols() != cfg.c_in {
        return Err(Error::Shape(format!(
            "input {:?} does not match dims {dims:?} with {} channels",
            input.shape(),
            cfg.c_in
        )));
    }
    let [dd, hh, ww] = dims;
    let (ht, wt) = (hh / p, ww / p);
    let cin = cfg.c_in;
    let kc = cin * p * p;
    let mut col = vec![0.0f32; dd * ht * wt * kc];
    for z in 0..dd {
        for ty in 0..ht {
            for tx in 0..wt {
                let row = &mut col[((z * ht + ty) * wt + tx) * kc..][..kc];
                for ky in 0..p {
                    for kx in 0..p {
                        let vox = (z * hh + ty * p + ky) * ww + tx * p + kx;
                        for ci in 0..cin {
                            row[ci * p * p + ky * p + kx] = input.data()[vox * cin + ci];
                        }
                    }
                }
            }
        }
    }
    let col = f.input(Tensor::from_parts(vec![dd * ht * wt, kc], col));
    let a = f.linear(col, "patch_embed.proj_a")?;
    let wb = f.p("patch_embed.proj_b.weight")?;
    let tokens = f.g.depth_patch_conv(a, [dd, ht, wt], wb, p);
    Ok((tokens, [dd / p, ht, wt]))
}

/// Row indices that cut a grid into non-overlapping windows (padded with
/// `None` where windows overrun the grid) and the inverse map.
pub fn window_partition(grid: Dims, window: Dims) -> (Vec<Option<u32>>, Vec<Option<u32>>) {
    let nw = [0, 1, 2].map(|a| grid[a].div_ceil(window[a]));
    let wlen = numel(window);
    let mut part = Vec::with_capacity(numel(nw) * wlen);
    let mut inverse = vec![None; numel(grid)];
    for wz in 0..nw[0] {
        for wy in 0..nw[1] {
            for wx in 0..nw[2] {
                for a in 0..window[0] {
                    for b in 0..window[1] {
                        for c in 0..window[2] {
                            let (z, y, x) = (wz * window[0] + a, wy * window[1] + b, wx * window[2] + c);
                            if z < grid[0] && y < grid[1] && x < grid[2] {
                                let r = (z * grid[1] + y) * grid[2] + x;
                                inverse[r] = Some(part.len() as u32);
                                part.push(Some(r as u32));
                            } else {
                                part.push(None);
                            }
                        }
                    }
                }
            }
        }
    }
    (part, inverse)
}

/// Multi-head self-attention within windows. `x` is already normalised.
pub fn windowed_attention(f: &mut Fwd, prefix: &str, x: Var, grid: Dims, window: Dims, heads: usize) -> Result<Var> {
    let window = [0, 1, 2].map(|a| window[a].min(grid[a]));
    let c = f.g.value(x).cols();
    let (xw, inverse, wlen) = if window == grid {
        (x, None, numel(grid))
    } else {
        let (part, inv) = window_partition(grid, window);
        (f.g.gather_rows(x, Arc::new(part)), Some(inv), numel(window))
    };
    let qkv = f.linear(xw, &format!("{prefix}.qkv"))?;
    let q = f.g.slice_cols(qkv, 0, c);
    let k = f.g.slice_cols(qkv, c, c);
    let v = f.g.slice_cols(qkv, 2 * c, c);
    let a = f.g.attention(q, k, v, wlen, wlen, heads);
    let out = f.linear(a, &format!("{prefix}.proj"))?;
    Ok(match inverse {
        Some(inv) => f.g.gather_rows(out, Arc::new(inv)),
        None => out,
    })
}

/// `X + dw(σ(X·W_down + b_down))·W_up + b_up`, with the depthwise 3D conv
/// optionally placed before the activation.
pub fn adapter_forward(f: &mut Fwd, cfg: &EncoderConfig, block: usize, slot: usize, x: Var, grid: Dims) -> Result<Var> {
    let [wd, bd, dw, dwb, wu, bu] = adapter_names(block, slot);
    let (wd, bd, dw, dwb, wu, bu) = (f.p(&wd)?, f.p(&bd)?, f.p(&dw)?, f.p(&dwb)?, f.p(&wu)?, f.p(&bu)?);
    let h = f.g.linear(x, wd, Some(bd), WeightLayout::InOut);
    let h = if cfg.adapter_conv_after_act {
        let a = f.g.gelu(h);
        f.g.dwconv3d(a, grid, dw, Some(dwb))
    } else {
        let a = f.g.dwconv3d(h, grid, dw, Some(dwb));
        f.g.gelu(a)
    };
    let up = f.g.linear(h, wu, Some(bu), WeightLayout::InOut);
    Ok(f.g.add(x, up))
}

/// One transformer block (0-based index) on tokens laid out on `grid`.
pub fn block_forward(f: &mut Fwd, cfg: &EncoderConfig, i: usize, x: Var, grid: Dims) -> Result<Var> {
    let pre = format!("blocks.{i}");
    let window = if cfg.global_blocks.contains(&(i + 1)) { grid } else { cfg.window };
    let h = f.layer_norm(x, &format!("{pre}.norm1"))?;
    let h = windowed_attention(f, &format!("{pre}.attn"), h, grid, window, cfg.heads)?;
    let mut x = f.g.add(x, h);
    if cfg.adapters_per_block >= 1 {
        x = adapter_forward(f, cfg, i, 1, x, grid)?;
    }
    let h = f.layer_norm(x, &format!("{pre}.norm2"))?;
    let h = f.mlp(h, &format!("{pre}.mlp"))?;
    x = f.g.add(x, h);
    if cfg.adapters_per_block >= 2 {
        x = adapter_forward(f, cfg, i, 2, x, grid)?;
    }
    Ok(x)
}

/// Patch embedding, positional encoding, all blocks with taps, then the
/// bottleneck on the final tokens.
pub fn encoder_forward(f: &mut Fwd, cfg: &EncoderConfig, input: &Tensor, dims: Dims) -> Result<Pyramid> {
    if dims != cfg.input_dims() {
        return Err(Error::Shape(format!(
            "encoder expects input {:?}, got {dims:?}",
            cfg.input_dims()
        )));
    }
    let (mut x, grid) = patch_embed(f, cfg, input, dims)?;
    let pos = f.p("pos_embed")?;
    let depth = if cfg.depth_table { Some(f.p("depth_embed")?) } else { None };
    x = f.g.add_pos(x, grid, pos, depth);
    let mut taps = Vec::with_capacity(4);
    for i in 0..cfg.depth {
        x = block_forward(f, cfg, i, x, grid)?;
        if cfg.mla_taps.contains(&(i + 1)) {
            taps.push(x);
        }
    }
    let n1 = f.linear(x, "neck.conv1")?;
    let w2 = f.p("neck.conv2.weight")?;
    let b2 = f.p("neck.conv2.bias")?;
    let bottleneck = f.g.conv3d(n1, grid, w2, Some(b2));
    Ok(Pyramid {
        taps: [taps[0], taps[1], taps[2], taps[3]],
        bottleneck,
        grid,
    })
}
