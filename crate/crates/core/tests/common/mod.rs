//! Independent naive-loop references shared by the integration tests.
#![allow(dead_code)]

use voladapter_core::vit2d::Vit2dCheckpoint;

fn t<'a>(ck: &'a Vit2dCheckpoint, name: &str) -> &'a [f32] {
    ck.params.tensor(name).unwrap().data()
}

fn layer_norm(x: &[f64], w: &[f32], b: &[f32]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-6).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * inv * w[i] as f64 + b[i] as f64).collect()
}

/// `W[out, in]·x + b`.
fn dense(x: &[f64], w: &[f32], b: &[f32]) -> Vec<f64> {
    let n_in = x.len();
    (0..b.len())
        .map(|o| b[o] as f64 + (0..n_in).map(|i| w[o * n_in + i] as f64 * x[i]).sum::<f64>())
        .collect()
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

/// Multi-head attention over a set of token vectors (already normalised),
/// returning the projected outputs.
fn attend(ck: &Vit2dCheckpoint, blk: usize, toks: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let c = toks[0].len();
    let dh = c / heads;
    let qkv: Vec<Vec<f64>> = toks
        .iter()
        .map(|x| dense(x, t(ck, &format!("blocks.{blk}.attn.qkv.weight")), t(ck, &format!("blocks.{blk}.attn.qkv.bias"))))
        .collect();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![vec![0.0; c]; toks.len()];
    for h in 0..heads {
        for (i, oi) in out.iter_mut().enumerate() {
            let logits: Vec<f64> = qkv
                .iter()
                .map(|kj| (0..dh).map(|d| qkv[i][h * dh + d] * kj[c + h * dh + d]).sum::<f64>() * scale)
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            for d in 0..dh {
                oi[h * dh + d] = (0..toks.len()).map(|j| e[j] / s * qkv[j][2 * c + h * dh + d]).sum();
            }
        }
    }
    out.iter()
        .map(|o| dense(o, t(ck, &format!("blocks.{blk}.attn.proj.weight")), t(ck, &format!("blocks.{blk}.attn.proj.bias"))))
        .collect()
}

/// Token states after each block of the 2D trunk for an image
/// `[c_in][H][W]`. Windowed blocks pad the normalised grid with zeros up to
/// a multiple of `window` (no attention mask); `global` lists 1-based block
/// indices that attend over the whole grid. Tokens are in (y, x) order.
pub fn reference_trunk_2d(ck: &Vit2dCheckpoint, image: &[Vec<Vec<f64>>], global: &[usize], window: usize) -> Vec<Vec<Vec<f64>>> {
    let s = &ck.spec;
    let (c, p) = (s.c, s.patch);
    let (ht, wt) = (image[0].len() / p, image[0][0].len() / p);
    let pw = t(ck, "patch_embed.proj.weight");
    let pb = t(ck, "patch_embed.proj.bias");
    let pos = t(ck, "pos_embed");
    let mut x: Vec<Vec<f64>> = Vec::with_capacity(ht * wt);
    for ty in 0..ht {
        for tx in 0..wt {
            let v: Vec<f64> = (0..c)
                .map(|o| {
                    let mut acc = pb[o] as f64;
                    for (ci, ch) in image.iter().enumerate() {
                        for ky in 0..p {
                            for kx in 0..p {
                                acc += pw[((o * s.c_in + ci) * p + ky) * p + kx] as f64 * ch[ty * p + ky][tx * p + kx];
                            }
                        }
                    }
                    acc + pos[(o * s.grid_hw[0] + ty) * s.grid_hw[1] + tx] as f64
                })
                .collect();
            x.push(v);
        }
    }
    let mut states = Vec::new();
    for blk in 0..s.depth {
        let w = |n: &str| t(ck, &format!("blocks.{blk}.{n}"));
        let normed: Vec<Vec<f64>> = x.iter().map(|v| layer_norm(v, w("norm1.weight"), w("norm1.bias"))).collect();
        let mut attn = vec![vec![0.0; c]; x.len()];
        if global.contains(&(blk + 1)) {
            attn = attend(ck, blk, &normed, s.heads);
        } else {
            let (nwy, nwx) = (ht.div_ceil(window), wt.div_ceil(window));
            for wy in 0..nwy {
                for wx in 0..nwx {
                    let mut toks = Vec::new();
                    let mut owner = Vec::new();
                    for a in 0..window {
                        for b in 0..window {
                            let (y, xx) = (wy * window + a, wx * window + b);
                            if y < ht && xx < wt {
                                toks.push(normed[y * wt + xx].clone());
                                owner.push(Some(y * wt + xx));
                            } else {
                                toks.push(vec![0.0; c]);
                                owner.push(None);
                            }
                        }
                    }
                    let o = attend(ck, blk, &toks, s.heads);
                    for (k, own) in owner.iter().enumerate() {
                        if let Some(r) = own {
                            attn[*r] = o[k].clone();
                        }
                    }
                }
            }
        }
        for (xi, ai) in x.iter_mut().zip(&attn) {
            for j in 0..c {
                xi[j] += ai[j];
            }
        }
        for xi in x.iter_mut() {
            let h = layer_norm(xi, w("norm2.weight"), w("norm2.bias"));
            let h: Vec<f64> = dense(&h, w("mlp.lin1.weight"), w("mlp.lin1.bias")).into_iter().map(gelu).collect();
            let h = dense(&h, w("mlp.lin2.weight"), w("mlp.lin2.bias"));
            for j in 0..c {
                xi[j] += h[j];
            }
        }
        states.push(x.clone());
    }
    states
}
