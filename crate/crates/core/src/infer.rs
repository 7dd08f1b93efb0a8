//! Whole-volume inference: sliding windows with uniform averaging, and a
//! single patch centred on the prompt points.

use crate::decoder::binarize;
use crate::error::{Error, Result};
use crate::grid::{Dims, Grid3};
use crate::model::Model;
use crate::prompt::validate_points;

/// Window origins along one axis: stride `ceil(patch·(1−overlap))`, the last
/// window clamped to end at the boundary. Requires `n ≥ patch`.
pub fn axis_origins(n: usize, patch: usize, overlap: f64) -> Vec<usize> {
    let stride = ((patch as f64 * (1.0 - overlap)).ceil() as usize).max(1);
    let last = n - patch;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if *v.last().expect("0 is always present") != last {
        v.push(last);
    }
    v
}

pub fn window_origins(dims: Dims, patch: Dims, overlap: f64) -> Vec<[usize; 3]> {
    let [oz, oy, ox] = [0, 1, 2].map(|a| axis_origins(dims[a], patch[a], overlap));
    let mut v = Vec::with_capacity(oz.len() * oy.len() * ox.len());
    for &z in &oz {
        for &y in &oy {
            for &x in &ox {
                v.push([z, y, x]);
            }
        }
    }
    v
}

/// Uniform average of window logits over `dims`. Sums are taken in f64 so
/// the result does not depend on window order.
pub fn stitch(dims: Dims, windows: &[([usize; 3], Grid3<f32>)]) -> Result<Grid3<f32>> {
    let mut sum = Grid3::filled(dims, 0.0f64);
    let mut count = Grid3::filled(dims, 0u32);
    for (o, w) in windows {
        let wd = w.dims();
        if (0..3).any(|a| o[a] + wd[a] > dims[a]) {
            return Err(Error::Shape(format!("window at {o:?} of size {wd:?} exceeds {dims:?}")));
        }
        for z in 0..wd[0] {
            for y in 0..wd[1] {
                for x in 0..wd[2] {
                    let i = sum.index(o[0] + z, o[1] + y, o[2] + x);
                    sum.data_mut()[i] += w.get(z, y, x) as f64;
                    count.data_mut()[i] += 1;
                }
            }
        }
    }
    if let Some(i) = count.data().iter().position(|&c| c == 0) {
        return Err(Error::Index(format!("voxel {:?} not covered by any window", count.coords(i))));
    }
    let data = sum.data().iter().zip(count.data()).map(|(&s, &c)| (s / c as f64) as f32).collect();
    Grid3::new(dims, data)
}

/// Tiles `image` with `patch`-sized windows and averages `predict`'s logits.
/// Volumes smaller than the patch are padded with `pad_value` and the result
/// cropped back.
pub fn sliding_window_infer(
    image: &Grid3<f32>,
    patch: Dims,
    overlap: f64,
    pad_value: f32,
    mut predict: impl FnMut(&Grid3<f32>) -> Result<Grid3<f32>>,
) -> Result<Grid3<f32>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Parameter(format!("overlap {overlap} must lie in [0, 1)")));
    }
    let dims = image.dims();
    let (padded, off) = image.pad_to(patch, pad_value);
    let pd = padded.dims();
    let mut windows = Vec::new();
    for o in window_origins(pd, patch, overlap) {
        let w = predict(&padded.crop(o, patch))?;
        if w.dims() != patch {
            return Err(Error::Shape(format!("predictor returned {:?} for patch {patch:?}", w.dims())));
        }
        windows.push((o, w));
    }
    let full = stitch(pd, &windows)?;
    Ok(if pd == dims { full } else { full.crop(off, dims) })
}

/// Origin of the `patch` window centred on the mean of `points` and shifted
/// to lie inside `dims` (which must be at least `patch`).
pub fn prompt_window(points: &[[f64; 3]], dims: Dims, patch: Dims) -> [usize; 3] {
    let n = points.len() as f64;
    [0, 1, 2].map(|a| {
        let c = (points.iter().map(|p| p[a]).sum::<f64>() / n).round() as isize;
        let o = c - (patch[a] / 2) as isize;
        o.clamp(0, (dims[a] - patch[a]) as isize) as usize
    })
}

/// Binarized prediction of the patch around the prompt, pasted into an
/// all-background volume. `predict` receives the patch and the points in
/// patch coordinates.
pub fn prompt_patch_infer(
    image: &Grid3<f32>,
    points: &[[f64; 3]],
    patch: Dims,
    pad_value: f32,
    mut predict: impl FnMut(&Grid3<f32>, &[[f64; 3]]) -> Result<Grid3<f32>>,
) -> Result<Grid3<u8>> {
    let dims = image.dims();
    validate_points(points, dims)?;
    let (padded, off) = image.pad_to(patch, pad_value);
    let pd = padded.dims();
    let shifted: Vec<[f64; 3]> = points.iter().map(|p| [0, 1, 2].map(|a| p[a] + off[a] as f64)).collect();
    let o = prompt_window(&shifted, pd, patch);
    let local: Vec<[f64; 3]> = shifted.iter().map(|p| [0, 1, 2].map(|a| p[a] - o[a] as f64)).collect();
    let logits = predict(&padded.crop(o, patch), &local)?;
    if logits.dims() != patch {
        return Err(Error::Shape(format!("predictor returned {:?} for patch {patch:?}", logits.dims())));
    }
    let mut full = Grid3::filled(pd, 0u8);
    full.paste(o, &binarize(&logits)?);
    Ok(if pd == dims { full } else { full.crop(off, dims) })
}

/// Smallest intensity of a volume, used to pad beyond its border.
pub fn background_of(image: &Grid3<f32>) -> f32 {
    image.data().iter().copied().fold(f32::INFINITY, f32::min)
}

impl Model {
    /// Prompt-free sliding-window logits over a whole volume.
    pub fn sliding_window(&self, image: &Grid3<f32>, overlap: f64) -> Result<Grid3<f32>> {
        sliding_window_infer(image, self.input_dims(), overlap, background_of(image), |p| self.predict_logits(p, None))
    }

    /// Binary mask from the patch centred on `points`.
    pub fn prompt_patch(&self, image: &Grid3<f32>, points: &[[f64; 3]]) -> Result<Grid3<u8>> {
        prompt_patch_infer(image, points, self.input_dims(), background_of(image), |p, pts| {
            self.predict_logits(p, Some(pts))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origins_cover_and_clamp() {
        assert_eq!(axis_origins(32, 32, 0.7), vec![0]);
        assert_eq!(axis_origins(40, 32, 0.7), vec![0, 8]);
        assert_eq!(axis_origins(45, 32, 0.7), vec![0, 10, 13]);
        for n in 10..60 {
            let o = axis_origins(n, 10, 0.7);
            let mut cov = vec![0; n];
            for s in o {
                cov[s..s + 10].iter_mut().for_each(|c| *c += 1);
            }
            assert!(cov.iter().all(|&c| c >= 1));
        }
    }

    #[test]
    fn small_volume_is_padded_and_cropped() {
        let img = Grid3::new([2, 3, 4], (0..24).map(|v| v as f32).collect()).unwrap();
        let out = sliding_window_infer(&img, [4, 4, 4], 0.7, -1.0, |p| Ok(p.clone())).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn prompt_window_clamps_near_corner() {
        let o = prompt_window(&[[1.0, 1.0, 38.0]], [40, 40, 40], [32, 32, 32]);
        assert_eq!(o, [0, 0, 8]);
        let o = prompt_window(&[[20.0, 20.0, 20.0]], [40, 40, 40], [32, 32, 32]);
        assert_eq!(o, [4, 4, 4]);
    }

    #[test]
    fn outside_patch_is_background() {
        let img = Grid3::filled([12, 12, 12], 1.0f32);
        let m = prompt_patch_infer(&img, &[[2.0, 2.0, 2.0]], [4, 4, 4], 0.0, |p, pts| {
            assert!(pts[0].iter().all(|&v| (0.0..4.0).contains(&v)));
            Ok(p.map(|_| 5.0))
        })
        .unwrap();
        assert_eq!(m.count_nonzero(), 64);
        assert_eq!(m.get(11, 11, 11), 0);
        assert_eq!(m.get(1, 1, 1), 1);
    }
}
