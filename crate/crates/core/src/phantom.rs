//! Synthetic volumes: noisy background with bright ellipsoidal lesions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{Dims, Grid3};
use crate::volume::VolumeSample;

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    /// Rows are the ellipsoid axes in voxel space.
    axes: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut s = 0.0;
        for k in 0..3 {
            let proj = self.axes[k][0] * d[0] + self.axes[k][1] * d[1] + self.axes[k][2] * d[2];
            s += (proj / self.radii[k]).powi(2);
        }
        s <= 1.0
    }
}

/// Rotation matrix of a uniformly random unit quaternion.
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        for v in q.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Generates a phantom whose mask is the union of `n_lesions` randomly
/// oriented ellipsoids (radii 5–20% of the smallest dimension) raised by
/// `contrast` above a zero baseline with additive Gaussian noise.
pub fn gen_phantom(seed: u64, dims: Dims, n_lesions: usize, contrast: f32, noise_sd: f32) -> Result<VolumeSample> {
    if dims.iter().any(|&d| d < 8) {
        return Err(Error::Parameter(format!("phantom dims must be at least 8 per axis, got {dims:?}")));
    }
    if !(noise_sd >= 0.0) || !contrast.is_finite() {
        return Err(Error::Parameter("noise_sd must be non-negative and contrast finite".into()));
    }
    let min_dim = *dims.iter().min().expect("three dims") as f64;
    let r_lo = (0.05 * min_dim).max(1.0);
    let r_hi = 0.2 * min_dim;
    if r_lo > r_hi || 2.0 * r_hi.ceil() + 1.0 > min_dim {
        return Err(Error::Parameter(format!("lesions of radius {r_lo:.2}..{r_hi:.2} cannot fit in {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = r_hi.ceil() as usize;
    let lesions: Vec<Ellipsoid> = (0..n_lesions)
        .map(|_| {
            let radii = [rng.gen_range(r_lo..=r_hi), rng.gen_range(r_lo..=r_hi), rng.gen_range(r_lo..=r_hi)];
            let axes = random_rotation(&mut rng);
            let center = [0, 1, 2].map(|a| rng.gen_range(margin..dims[a] - margin) as f64);
            Ellipsoid { center, radii, axes }
        })
        .collect();

    let mut mask = Grid3::filled(dims, 0u8);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                if lesions.iter().any(|e| e.contains(p)) {
                    mask.set(z, y, x, 1);
                }
            }
        }
    }
    let noise = Normal::new(0.0f32, noise_sd).map_err(|e| Error::Parameter(e.to_string()))?;
    let image: Vec<f32> = mask
        .data()
        .iter()
        .map(|&m| {
            let base = if m == 1 { contrast } else { 0.0 };
            base + if noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 }
        })
        .collect();
    VolumeSample::new(Grid3::new(dims, image)?, mask, [1.0; 3], format!("phantom-{seed}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::connected_components;

    #[test]
    fn deterministic_in_seed() {
        let a = gen_phantom(3, [16, 16, 16], 2, 1.0, 0.3).unwrap();
        let b = gen_phantom(3, [16, 16, 16], 2, 1.0, 0.3).unwrap();
        assert_eq!(a, b);
        let c = gen_phantom(4, [16, 16, 16], 2, 1.0, 0.3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn no_lesions_means_empty_mask() {
        let a = gen_phantom(1, [8, 9, 10], 0, 1.0, 0.1).unwrap();
        assert_eq!(a.mask.count_nonzero(), 0);
    }

    #[test]
    fn two_lesions_at_most_two_components() {
        let a = gen_phantom(7, [32, 32, 32], 2, 1.0, 0.2).unwrap();
        let (_, sizes) = connected_components(&a.mask);
        assert!(!sizes.is_empty() && sizes.len() <= 2, "{sizes:?}");
    }

    #[test]
    fn tiny_dims_rejected() {
        assert!(matches!(gen_phantom(1, [7, 16, 16], 1, 1.0, 0.1), Err(Error::Parameter(_))));
    }
}
