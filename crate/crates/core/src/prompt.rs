//! Point-prompt encoder: features sampled at the prompt points are fused
//! into a few learned global queries by self-attention, then image tokens
//! cross-attend to those queries. The output projection of the cross
//! attention starts at zero, so the pathway is an identity at init.
//!
//! Per prompted level `ℓ` the tensors are `prompt.l<ℓ>.global_queries`,
//! `prompt.l<ℓ>.sa<j>.{norm1,attn.qkv,attn.proj,norm2,mlp.lin1,mlp.lin2}.*`
//! and `prompt.l<ℓ>.cross.{norm,q,kv,proj}.*`.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Var;
use crate::config::{EncoderConfig, PromptConfig};
use crate::error::{Error, Result};
use crate::forward::Fwd;
use crate::grid::{Dims, Grid3};
use crate::params::{fan_in_uniform, Origin, ParamStore};
use crate::tensor::Tensor;

/// Prompt points in voxel coordinates (z, y, x) of the patch or volume.
pub type Points = Vec<[f64; 3]>;

pub const MAX_POINTS: usize = 1024;

/// Feature width at a prompt level: the trunk width for taps 1–3, the
/// bottleneck width for level 4.
pub fn level_width(cfg: &EncoderConfig, level: usize) -> usize {
    if level == 4 {
        cfg.bottleneck_dim
    } else {
        cfg.c
    }
}

/// Returns `cfg` with prompt injection at exactly `levels`.
pub fn attach_levels(cfg: &EncoderConfig, levels: &[usize]) -> Result<EncoderConfig> {
    if levels.is_empty() {
        return Err(Error::Prompt("prompt level set must be nonempty".into()));
    }
    if let Some(l) = levels.iter().find(|&&l| !(1..=4).contains(&l)) {
        return Err(Error::Prompt(format!("prompt level {l} outside 1..=4")));
    }
    let mut out = cfg.clone();
    let mut lv = levels.to_vec();
    lv.sort_unstable();
    lv.dedup();
    out.prompt_levels = lv;
    Ok(out)
}

pub fn validate_points(points: &[[f64; 3]], dims: Dims) -> Result<()> {
    if points.is_empty() || points.len() > MAX_POINTS {
        return Err(Error::Prompt(format!("need 1..={MAX_POINTS} points, got {}", points.len())));
    }
    for p in points {
        for a in 0..3 {
            if !(p[a] >= 0.0 && p[a] <= (dims[a] - 1) as f64) {
                return Err(Error::Prompt(format!("point {p:?} outside bounds {dims:?}")));
            }
        }
    }
    Ok(())
}

/// Voxel coordinates to continuous token-grid coordinates: token `t` covers
/// voxels `[t·p, (t+1)·p)` and its centre sits at `(t + 0.5)·p − 0.5`.
pub fn voxel_to_token(points: &[[f64; 3]], patch: usize, grid: Dims) -> Vec<[f64; 3]> {
    points
        .iter()
        .map(|v| [0, 1, 2].map(|a| ((v[a] + 0.5) / patch as f64 - 0.5).clamp(0.0, (grid[a] - 1) as f64)))
        .collect()
}

/// Trilinear interpolation of `feat` (rows on `grid`) at token coordinates.
pub fn sample_point_embeddings(f: &mut Fwd, feat: Var, grid: Dims, token_points: &[[f64; 3]]) -> Result<Var> {
    for p in token_points {
        for a in 0..3 {
            if !(p[a] >= 0.0 && p[a] <= (grid[a] - 1) as f64) {
                return Err(Error::Prompt(format!("token point {p:?} outside grid {grid:?}")));
            }
        }
    }
    Ok(f.g.sample_points(feat, grid, token_points))
}

/// The fixed Gaussian frequency matrix `[3, c_feat/2]`.
pub fn fourier_matrix(c_feat: usize, scale: f64, seed: u64) -> Result<Vec<f64>> {
    if c_feat % 2 != 0 {
        return Err(Error::Parameter(format!("Fourier features need an even width, got {c_feat}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, scale).map_err(|e| Error::Parameter(e.to_string()))?;
    Ok((0..3 * c_feat / 2).map(|_| normal.sample(&mut rng)).collect())
}

/// `[sin(2π·xG), cos(2π·xG)]` for points already normalised to `[0,1]³`.
pub fn fourier_point_embedding(points: &[[f64; 3]], c_feat: usize, scale: f64, seed: u64) -> Result<Tensor> {
    let g = fourier_matrix(c_feat, scale, seed)?;
    let half = c_feat / 2;
    let mut out = Vec::with_capacity(points.len() * c_feat);
    for p in points {
        let proj: Vec<f64> = (0..half)
            .map(|j| 2.0 * std::f64::consts::PI * (0..3).map(|a| p[a] * g[a * half + j]).sum::<f64>())
            .collect();
        out.extend(proj.iter().map(|v| v.sin() as f32));
        out.extend(proj.iter().map(|v| v.cos() as f32));
    }
    Tensor::new(vec![points.len(), c_feat], out)
}

/// Voxel points to `[0,1]³` using voxel centres.
pub fn normalize_points(points: &[[f64; 3]], dims: Dims) -> Vec<[f64; 3]> {
    points.iter().map(|v| [0, 1, 2].map(|a| (v[a] + 0.5) / dims[a] as f64)).collect()
}

fn self_attention(f: &mut Fwd, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let n = f.g.value(x).rows();
    let c = f.g.value(x).cols();
    let qkv = f.linear(x, &format!("{prefix}.qkv"))?;
    let q = f.g.slice_cols(qkv, 0, c);
    let k = f.g.slice_cols(qkv, c, c);
    let v = f.g.slice_cols(qkv, 2 * c, c);
    let a = f.g.attention(q, k, v, n, n, heads);
    f.linear(a, &format!("{prefix}.proj"))
}

/// Self-attention over `[global_queries; point_embeds]`; returns the query rows.
pub fn fuse_queries(f: &mut Fwd, prefix: &str, point_embeds: Var, cfg: &PromptConfig) -> Result<Var> {
    let gq = f.p(&format!("{prefix}.global_queries"))?;
    let nq = f.g.value(gq).rows();
    let mut x = f.g.concat_rows(&[gq, point_embeds]);
    for j in 0..cfg.self_attn_layers {
        let sa = format!("{prefix}.sa{j}");
        let h = f.layer_norm(x, &format!("{sa}.norm1"))?;
        let h = self_attention(f, &format!("{sa}.attn"), h, cfg.heads)?;
        x = f.g.add(x, h);
        let h = f.layer_norm(x, &format!("{sa}.norm2"))?;
        let h = f.mlp(h, &format!("{sa}.mlp"))?;
        x = f.g.add(x, h);
    }
    Ok(f.g.slice_rows(x, 0, nq))
}

/// Image tokens (queries) attend to the fused global queries (keys/values);
/// the result is added back to the tokens.
pub fn inject_prompt(f: &mut Fwd, prefix: &str, tokens: Var, queries: Var, heads: usize) -> Result<Var> {
    let c = f.g.value(tokens).cols();
    let n = f.g.value(tokens).rows();
    let nq = f.g.value(queries).rows();
    let t = f.layer_norm(tokens, &format!("{prefix}.cross.norm"))?;
    let q = f.linear(t, &format!("{prefix}.cross.q"))?;
    let kv = f.linear(queries, &format!("{prefix}.cross.kv"))?;
    let k = f.g.slice_cols(kv, 0, c);
    let v = f.g.slice_cols(kv, c, c);
    let a = f.g.attention(q, k, v, n, nq, heads);
    let out = f.linear(a, &format!("{prefix}.cross.proj"))?;
    Ok(f.g.add(tokens, out))
}

/// Point embeddings for one level, by either the visual sampler or the
/// Fourier baseline. `points` are voxel coordinates in the input patch.
pub fn point_embeddings(
    f: &mut Fwd,
    enc: &EncoderConfig,
    pcfg: &PromptConfig,
    level: usize,
    feat: Var,
    grid: Dims,
    points: &[[f64; 3]],
) -> Result<Var> {
    validate_points(points, enc.input_dims())?;
    match pcfg.encoding {
        crate::config::PointEncoding::VisualSampler => {
            let tp = voxel_to_token(points, enc.patch, grid);
            sample_point_embeddings(f, feat, grid, &tp)
        }
        crate::config::PointEncoding::Fourier => {
            let norm = normalize_points(points, enc.input_dims());
            let emb = fourier_point_embedding(&norm, level_width(enc, level), pcfg.fourier_scale, pcfg.fourier_seed)?;
            Ok(f.input(emb))
        }
    }
}

/// Full prompt pathway at one level: sample → fuse → inject.
pub fn prompt_level(
    f: &mut Fwd,
    enc: &EncoderConfig,
    pcfg: &PromptConfig,
    level: usize,
    feat: Var,
    grid: Dims,
    points: &[[f64; 3]],
) -> Result<Var> {
    let prefix = format!("prompt.l{level}");
    let emb = point_embeddings(f, enc, pcfg, level, feat, grid, points)?;
    let queries = fuse_queries(f, &prefix, emb, pcfg)?;
    inject_prompt(f, &prefix, feat, queries, pcfg.heads)
}

/// Softmax weights of the cross attention, `[heads·tokens, N_q]`, for
/// inspection.
pub fn cross_attention_weights(store: &ParamStore, level: usize, tokens: &Tensor, queries: &Tensor, heads: usize) -> Result<Tensor> {
    let prefix = format!("prompt.l{level}");
    let mut f = Fwd::new(store, false);
    let t = f.input(tokens.clone());
    let qs = f.input(queries.clone());
    let c = tokens.cols();
    let tn = f.layer_norm(t, &format!("{prefix}.cross.norm"))?;
    let q = f.linear(tn, &format!("{prefix}.cross.q"))?;
    let kv = f.linear(qs, &format!("{prefix}.cross.kv"))?;
    let k = f.g.slice_cols(kv, 0, c);
    Ok(crate::autograd::attention_weights(f.g.value(q), f.g.value(k), tokens.rows(), queries.rows(), heads))
}

/// Creates the tensors of every prompted level.
pub fn init_prompt_params(store: &mut ParamStore, enc: &EncoderConfig, pcfg: &PromptConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &level in &enc.prompt_levels {
        let cf = level_width(enc, level);
        let hid = pcfg.mlp_ratio * cf;
        let pre = format!("prompt.l{level}");
        let lin = |store: &mut ParamStore, name: String, out: usize, inp: usize, rng: &mut ChaCha8Rng| {
            store.insert(format!("{name}.weight"), fan_in_uniform(&[out, inp], inp, rng), Origin::New, false);
            store.insert(format!("{name}.bias"), Tensor::zeros(&[out]), Origin::New, false);
        };
        let norm = |store: &mut ParamStore, name: String| {
            store.insert(format!("{name}.weight"), Tensor::full(&[cf], 1.0), Origin::New, false);
            store.insert(format!("{name}.bias"), Tensor::zeros(&[cf]), Origin::New, false);
        };
        store.insert(
            format!("{pre}.global_queries"),
            fan_in_uniform(&[pcfg.n_queries, cf], cf, &mut rng),
            Origin::New,
            false,
        );
        for j in 0..pcfg.self_attn_layers {
            let sa = format!("{pre}.sa{j}");
            norm(store, format!("{sa}.norm1"));
            lin(store, format!("{sa}.attn.qkv"), 3 * cf, cf, &mut rng);
            lin(store, format!("{sa}.attn.proj"), cf, cf, &mut rng);
            norm(store, format!("{sa}.norm2"));
            lin(store, format!("{sa}.mlp.lin1"), hid, cf, &mut rng);
            lin(store, format!("{sa}.mlp.lin2"), cf, hid, &mut rng);
        }
        norm(store, format!("{pre}.cross.norm"));
        lin(store, format!("{pre}.cross.q"), cf, cf, &mut rng);
        lin(store, format!("{pre}.cross.kv"), 2 * cf, cf, &mut rng);
        store.insert(format!("{pre}.cross.proj.weight"), Tensor::zeros(&[cf, cf]), Origin::New, false);
        store.insert(format!("{pre}.cross.proj.bias"), Tensor::zeros(&[cf]), Origin::New, false);
    }
}

/// Training prompts: 10 background voxels (by default) when the patch has
/// no foreground, otherwise 40 foreground voxels, drawn without replacement
/// when enough exist and with replacement otherwise.
pub fn sample_training_prompts<R: Rng>(mask: &Grid3<u8>, n_bg: usize, n_fg: usize, rng: &mut R) -> Points {
    let fg: Vec<usize> = (0..mask.len()).filter(|&i| mask.data()[i] != 0).collect();
    let (pool, n): (Vec<usize>, usize) = if fg.is_empty() {
        ((0..mask.len()).collect(), n_bg)
    } else {
        (fg, n_fg)
    };
    let picks: Vec<usize> = if pool.len() >= n {
        sample_indices(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    };
    picks
        .into_iter()
        .map(|i| {
            let c = mask.coords(i);
            [c[0] as f64, c[1] as f64, c[2] as f64]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfgs() -> (EncoderConfig, PromptConfig) {
        (EncoderConfig::toy(), PromptConfig::default())
    }

    #[test]
    fn training_prompt_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty = Grid3::filled([6, 6, 6], 0u8);
        let p = sample_training_prompts(&empty, 10, 40, &mut rng);
        assert_eq!(p.len(), 10);
        let mut few = Grid3::filled([6, 6, 6], 0u8);
        for i in 0..5 {
            few.set(1, 1, i, 1);
        }
        let p = sample_training_prompts(&few, 10, 40, &mut rng);
        assert_eq!(p.len(), 40);
        assert!(p.iter().all(|q| few.get(q[0] as usize, q[1] as usize, q[2] as usize) == 1));
        let full = Grid3::filled([6, 6, 6], 1u8);
        let p = sample_training_prompts(&full, 10, 40, &mut rng);
        let mut uniq = p.clone();
        uniq.sort_by(|a, b| a.partial_cmp(b).unwrap());
        uniq.dedup();
        assert_eq!(uniq.len(), 40);
    }

    #[test]
    fn token_mapping_centres() {
        let tp = voxel_to_token(&[[1.5, 0.0, 31.0]], 4, [8, 8, 8]);
        assert_eq!(tp[0], [0.0, 0.0, 7.0]);
    }

    #[test]
    fn fourier_norm_and_determinism() {
        let pts = [[0.1, 0.5, 0.9], [0.3, 0.2, 0.7]];
        let a = fourier_point_embedding(&pts, 16, 1.0, 3).unwrap();
        let b = fourier_point_embedding(&pts, 16, 1.0, 3).unwrap();
        assert_eq!(a, b);
        for r in 0..2 {
            let n: f32 = a.data()[r * 16..(r + 1) * 16].iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 8f32.sqrt()).abs() < 1e-5);
        }
        assert!(fourier_point_embedding(&pts, 15, 1.0, 3).is_err());
    }

    #[test]
    fn injection_is_identity_at_init() {
        let (enc, pc) = cfgs();
        let mut store = ParamStore::new();
        init_prompt_params(&mut store, &enc, &pc, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 512;
        let feat = Tensor::new(vec![n, 16], (0..n * 16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut f = Fwd::new(&store, false);
        let x = f.input(feat.clone());
        let y = prompt_level(&mut f, &enc, &pc, 4, x, [8, 8, 8], &[[3.0, 4.0, 5.0], [20.0, 1.0, 0.0]]).unwrap();
        assert_eq!(f.g.value(y).data(), feat.data());
    }

    #[test]
    fn attach_levels_rejects_empty() {
        let (enc, _) = cfgs();
        assert!(attach_levels(&enc, &[]).is_err());
        assert_eq!(attach_levels(&enc, &[4, 1, 1]).unwrap().prompt_levels, vec![1, 4]);
    }
}
