//! Resampling, intensity clipping/normalisation, balanced patch cropping and
//! augmentation. The fixed order is resample → clip_normalize → crop → augment.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::linear_axis_taps;
use crate::error::{Error, Result};
use crate::grid::{Dims, Grid3};
use crate::volume::VolumeSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub fg_mean: f64,
    pub fg_sd: f64,
    pub target_spacing: [f64; 3],
}

impl PreprocessStats {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_lo < self.clip_hi) {
            return Err(Error::Stats(format!(
                "clip range is degenerate: [{}, {}]",
                self.clip_lo, self.clip_hi
            )));
        }
        if !(self.fg_sd > 0.0) {
            return Err(Error::Stats(format!("foreground sd must be positive, got {}", self.fg_sd)));
        }
        Ok(())
    }

    /// The normalised value of anything at or below `clip_lo`.
    pub fn background_value(&self) -> f32 {
        ((self.clip_lo - self.fg_mean) / self.fg_sd) as f32
    }
}

/// Percentile of sorted data with linear interpolation between order statistics.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Clip bounds (0.5 / 99.5 percentiles) and moments of the foreground
/// intensities pooled over the whole corpus.
pub fn compute_stats(corpus: &[VolumeSample], target_spacing: [f64; 3]) -> Result<PreprocessStats> {
    if corpus.is_empty() {
        return Err(Error::Stats("empty corpus".into()));
    }
    let mut fg: Vec<f64> = corpus
        .iter()
        .flat_map(|s| {
            s.image
                .data()
                .iter()
                .zip(s.mask.data())
                .filter(|(_, &m)| m != 0)
                .map(|(&v, _)| v as f64)
        })
        .collect();
    if fg.is_empty() {
        return Err(Error::Stats("no foreground voxels in corpus".into()));
    }
    let n = fg.len() as f64;
    let mean = fg.iter().sum::<f64>() / n;
    let var = fg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    fg.sort_by(|a, b| a.total_cmp(b));
    let stats = PreprocessStats {
        clip_lo: percentile_sorted(&fg, 0.5),
        clip_hi: percentile_sorted(&fg, 99.5),
        fg_mean: mean,
        fg_sd: var.sqrt(),
        target_spacing,
    };
    stats.validate()?;
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum AxisMode {
    Linear,
    Nearest,
}

fn resize_axis<T: Copy + Default>(
    src: &Grid3<T>,
    axis: usize,
    n_out: usize,
    mode: AxisMode,
    lerp: impl Fn(T, T, f32) -> T,
) -> Grid3<T> {
    let d = src.dims();
    let n_in = d[axis];
    let mut out_dims = d;
    out_dims[axis] = n_out;
    if n_in == n_out {
        return src.clone();
    }
    let taps: Vec<(usize, usize, f32)> = match mode {
        AxisMode::Linear => linear_axis_taps(n_in, n_out),
        AxisMode::Nearest => (0..n_out)
            .map(|o| {
                let s = (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1);
                (s, s, 0.0)
            })
            .collect(),
    };
    let mut out = Grid3::filled(out_dims, T::default());
    for z in 0..out_dims[0] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[2] {
                let o = [z, y, x];
                let (i0, i1, l) = taps[o[axis]];
                let mut a = o;
                a[axis] = i0;
                let mut b = o;
                b[axis] = i1;
                let v = lerp(src.get(a[0], a[1], a[2]), src.get(b[0], b[1], b[2]), l);
                out.set(z, y, x, v);
            }
        }
    }
    out
}

/// Resamples to `target` spacing. Images are interpolated linearly per axis
/// (trilinear overall) and masks by nearest neighbour. When the largest
/// spacing exceeds `anisotropy_threshold` times the smallest, the image is
/// interpolated in-plane only and by nearest neighbour along the coarse axis.
pub fn resample(sample: &VolumeSample, target: [f64; 3], anisotropy_threshold: f64) -> Result<VolumeSample> {
    if !target.iter().all(|&t| t > 0.0) {
        return Err(Error::Parameter(format!("target spacing must be positive, got {target:?}")));
    }
    let d = sample.dims();
    let mut new_dims = [0usize; 3];
    for a in 0..3 {
        let n = (d[a] as f64 * sample.spacing[a] / target[a]).round();
        if n < 1.0 {
            return Err(Error::Parameter(format!("resampled axis {a} would be empty")));
        }
        new_dims[a] = n as usize;
    }
    let (mut smax, mut smin, mut coarse) = (f64::MIN, f64::MAX, 0);
    for (a, &s) in sample.spacing.iter().enumerate() {
        if s > smax {
            smax = s;
            coarse = a;
        }
        smin = smin.min(s);
    }
    let anisotropic = smax / smin > anisotropy_threshold;
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    // in-plane axes first, then the coarse one
    let mut order: Vec<usize> = (0..3).filter(|&a| !anisotropic || a != coarse).collect();
    if anisotropic {
        order.push(coarse);
    }
    for a in order {
        let mode = if anisotropic && a == coarse {
            AxisMode::Nearest
        } else {
            AxisMode::Linear
        };
        image = resize_axis(&image, a, new_dims[a], mode, |p, q, l| p + (q - p) * l);
        mask = resize_axis(&mask, a, new_dims[a], AxisMode::Nearest, |p, _, _| p);
    }
    VolumeSample::new(image, mask, target, sample.id.clone())
}

/// Nearest-neighbour resize of a label grid to `dims` (half-pixel centres).
pub fn resize_nearest<T: Copy + Default>(g: &Grid3<T>, dims: Dims) -> Grid3<T> {
    let mut out = g.clone();
    for a in 0..3 {
        out = resize_axis(&out, a, dims[a], AxisMode::Nearest, |p, _, _| p);
    }
    out
}

/// Maps voxel coordinates between two samplings of the same extent.
pub fn map_points(points: &[[f64; 3]], from: Dims, to: Dims) -> Vec<[f64; 3]> {
    points
        .iter()
        .map(|p| [0, 1, 2].map(|a| ((p[a] + 0.5) * to[a] as f64 / from[a] as f64 - 0.5).clamp(0.0, (to[a] - 1) as f64)))
        .collect()
}

pub fn clip_normalize(sample: &VolumeSample, stats: &PreprocessStats) -> Result<VolumeSample> {
    stats.validate()?;
    let image = sample
        .image
        .map(|v| (((v as f64).clamp(stats.clip_lo, stats.clip_hi) - stats.fg_mean) / stats.fg_sd) as f32);
    Ok(VolumeSample {
        image,
        mask: sample.mask.clone(),
        spacing: sample.spacing,
        id: sample.id.clone(),
    })
}

/// Resample → clip/normalise for one volume.
pub fn preprocess_volume(sample: &VolumeSample, stats: &PreprocessStats, anisotropy_threshold: f64) -> Result<VolumeSample> {
    let r = resample(sample, stats.target_spacing, anisotropy_threshold)?;
    clip_normalize(&r, stats)
}

#[derive(Clone, Debug)]
pub struct Crop {
    pub image: Grid3<f32>,
    pub mask: Grid3<u8>,
    pub fg_centered: bool,
}

/// Draws a patch whose centre is a uniformly chosen foreground voxel with
/// probability `fg_prob` and a background voxel otherwise. Volumes smaller than
/// the patch are padded symmetrically with `pad_value` (mask 0).
pub fn crop_balanced<R: Rng>(image: &Grid3<f32>, mask: &Grid3<u8>, patch: Dims, pad_value: f32, fg_prob: f64, rng: &mut R) -> Crop {
    let (image, _) = image.pad_to(patch, pad_value);
    let (mask, _) = mask.pad_to(patch, 0);
    let dims = mask.dims();
    let n_fg = mask.count_nonzero();
    let n_bg = mask.len() - n_fg;
    let want_fg = rng.gen_bool(fg_prob);
    let pick_fg = if n_fg == 0 {
        false
    } else if n_bg == 0 {
        true
    } else {
        want_fg
    };
    let count = if pick_fg { n_fg } else { n_bg };
    let k = rng.gen_range(0..count);
    let flat = mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &m)| (m != 0) == pick_fg)
        .nth(k)
        .map(|(i, _)| i)
        .expect("k is below the class count");
    let center = mask.coords(flat);
    let origin = [0, 1, 2].map(|a| center[a].saturating_sub(patch[a] / 2).min(dims[a] - patch[a]));
    Crop {
        image: image.crop(origin, patch),
        mask: mask.crop(origin, patch),
        fg_centered: pick_fg,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    pub zoom_range: [f64; 2],
    pub zoom_p: f64,
    pub rot90_p: f64,
    pub flip_p: f64,
    /// Additive offsets are drawn from `[-intensity_offset, intensity_offset]`.
    pub intensity_offset: f64,
    pub shift_p: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            zoom_range: [0.9, 1.1],
            zoom_p: 0.3,
            rot90_p: 0.5,
            flip_p: 0.5,
            intensity_offset: 0.1,
            shift_p: 0.5,
        }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        Self {
            zoom_p: 0.0,
            rot90_p: 0.0,
            flip_p: 0.0,
            shift_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        for (name, p) in [("zoom_p", self.zoom_p), ("rot90_p", self.rot90_p), ("flip_p", self.flip_p), ("shift_p", self.shift_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{key}.{name}"), "probability must lie in [0, 1]"));
            }
        }
        if !(self.zoom_range[0] > 0.0 && self.zoom_range[0] <= self.zoom_range[1]) {
            return Err(Error::config(format!("{key}.zoom_range"), "need 0 < lo <= hi"));
        }
        if !(self.intensity_offset >= 0.0) {
            return Err(Error::config(format!("{key}.intensity_offset"), "must be non-negative"));
        }
        Ok(())
    }
}

/// Scales about the grid centre by `factor`, keeping the dims: zooming in
/// crops the centre, zooming out pads with `img_pad` (mask 0).
pub fn zoom(image: &Grid3<f32>, mask: &Grid3<u8>, factor: f64, img_pad: f32) -> (Grid3<f32>, Grid3<u8>) {
    let d = image.dims();
    let c = d.map(|n| (n as f64 - 1.0) / 2.0);
    let mut out_i = Grid3::filled(d, img_pad);
    let mut out_m = Grid3::filled(d, 0u8);
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                let o = [z, y, x];
                let s = [0, 1, 2].map(|a| c[a] + (o[a] as f64 - c[a]) / factor);
                if (0..3).any(|a| s[a] < -0.5 || s[a] > d[a] as f64 - 0.5) {
                    continue;
                }
                // nearest for the mask
                let n = [0, 1, 2].map(|a| (s[a].round().max(0.0) as usize).min(d[a] - 1));
                out_m.set(z, y, x, mask.get(n[0], n[1], n[2]));
                // trilinear for the image, clamped at the border
                let mut lo = [0usize; 3];
                let mut hi = [0usize; 3];
                let mut fr = [0f64; 3];
                for a in 0..3 {
                    let v = s[a].clamp(0.0, (d[a] - 1) as f64);
                    lo[a] = v.floor() as usize;
                    hi[a] = (lo[a] + 1).min(d[a] - 1);
                    fr[a] = v - lo[a] as f64;
                }
                let mut acc = 0.0f64;
                for (bz, wz) in [(lo[0], 1.0 - fr[0]), (hi[0], fr[0])] {
                    for (by, wy) in [(lo[1], 1.0 - fr[1]), (hi[1], fr[1])] {
                        for (bx, wx) in [(lo[2], 1.0 - fr[2]), (hi[2], fr[2])] {
                            let w = wz * wy * wx;
                            if w != 0.0 {
                                acc += w * image.get(bz, by, bx) as f64;
                            }
                        }
                    }
                }
                out_i.set(z, y, x, acc as f32);
            }
        }
    }
    (out_i, out_m)
}

/// Rotates by `k` quarter turns in the plane of axes `(a, b)`.
pub fn rot90<T: Copy + Default>(g: &Grid3<T>, plane: (usize, usize), k: usize) -> Grid3<T> {
    let (a, b) = plane;
    let k = k % 4;
    let d = g.dims();
    let mut od = d;
    if k % 2 == 1 {
        od[a] = d[b];
        od[b] = d[a];
    }
    let mut out = Grid3::filled(od, T::default());
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                let s = [z, y, x];
                let mut t = s;
                match k {
                    0 => {}
                    1 => {
                        t[a] = d[b] - 1 - s[b];
                        t[b] = s[a];
                    }
                    2 => {
                        t[a] = d[a] - 1 - s[a];
                        t[b] = d[b] - 1 - s[b];
                    }
                    _ => {
                        t[a] = s[b];
                        t[b] = d[a] - 1 - s[a];
                    }
                }
                out.set(t[0], t[1], t[2], g.get(z, y, x));
            }
        }
    }
    out
}

pub fn flip<T: Copy>(g: &Grid3<T>, axis: usize) -> Grid3<T> {
    let d = g.dims();
    let mut out = g.clone();
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                let mut t = [z, y, x];
                t[axis] = d[axis] - 1 - t[axis];
                out.set(t[0], t[1], t[2], g.get(z, y, x));
            }
        }
    }
    out
}

/// Applies zoom, quarter-turn rotation, flip and intensity shift, each
/// independently with its probability. Geometry is shared by image and mask.
pub fn augment<R: Rng>(image: &Grid3<f32>, mask: &Grid3<u8>, params: &AugmentParams, rng: &mut R) -> (Grid3<f32>, Grid3<u8>) {
    let mut img = image.clone();
    let mut msk = mask.clone();
    if rng.gen_bool(params.zoom_p) {
        let [lo, hi] = params.zoom_range;
        let f = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        let pad = img.data().iter().copied().fold(f32::INFINITY, f32::min);
        (img, msk) = zoom(&img, &msk, f, pad);
    }
    if rng.gen_bool(params.rot90_p) {
        const PLANES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
        let plane = PLANES[rng.gen_range(0..3)];
        let d = img.dims();
        // odd turns would change the shape of a non-square plane
        let k = if d[plane.0] == d[plane.1] { rng.gen_range(1..=3) } else { 2 };
        img = rot90(&img, plane, k);
        msk = rot90(&msk, plane, k);
    }
    if rng.gen_bool(params.flip_p) {
        let axis = rng.gen_range(0..3);
        img = flip(&img, axis);
        msk = flip(&msk, axis);
    }
    if rng.gen_bool(params.shift_p) && params.intensity_offset > 0.0 {
        let off = rng.gen_range(-params.intensity_offset..=params.intensity_offset) as f32;
        img.data_mut().iter_mut().for_each(|v| *v += off);
    }
    (img, msk)
}
