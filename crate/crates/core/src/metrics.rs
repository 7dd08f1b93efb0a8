//! Dice and normalized surface Dice on binary masks.

use crate::error::{Error, Result};
use crate::grid::{face_neighbors, Grid3};

fn same_dims(a: &Grid3<u8>, b: &Grid3<u8>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("mask dims differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `2|a∩b| / (|a|+|b|)`; two empty masks score 1.
pub fn dice(a: &Grid3<u8>, b: &Grid3<u8>) -> Result<f64> {
    same_dims(a, b)?;
    let (mut inter, mut sa, mut sb) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = ((x != 0) as u64, (y != 0) as u64);
        inter += x & y;
        sa += x;
        sb += y;
    }
    if sa + sb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sa + sb) as f64)
}

/// Foreground voxels with a face neighbour that is background; voxels on
/// the volume border count as touching background.
pub fn boundary(mask: &Grid3<u8>) -> Grid3<u8> {
    let dims = mask.dims();
    let mut out = Grid3::filled(dims, 0u8);
    for i in 0..mask.len() {
        if mask.data()[i] == 0 {
            continue;
        }
        let c = mask.coords(i);
        let interior = c.iter().zip(dims).all(|(&v, d)| v > 0 && v + 1 < d)
            && face_neighbors(c, dims).all(|n| mask.get(n[0], n[1], n[2]) != 0);
        if !interior {
            out.data_mut()[i] = 1;
        }
    }
    out
}

/// Squared distance in `pos` units from each sample to the nearest finite
/// entry of `f` under `min_p (pos_q − pos_p)² + f_p` (lower envelope of
/// parabolas).
fn edt_1d(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k: isize = -1;
    let pos = |i: usize| i as f64 * step;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for q in 0..n {
        while z[j + 1] < pos(q) {
            j += 1;
        }
        let p = v[j];
        out[q] = (pos(q) - pos(p)).powi(2) + f[p];
    }
}

/// Exact squared Euclidean distance (with voxel `spacing`) from every voxel
/// to the nearest nonzero voxel of `feature`; infinite if there is none.
pub fn edt_sq(feature: &Grid3<u8>, spacing: [f64; 3]) -> Grid3<f64> {
    let dims = feature.dims();
    let mut d = feature.map(|v| if v != 0 { 0.0 } else { f64::INFINITY });
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        line.resize(n, 0.0);
        out.resize(n, 0.0);
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for u in 0..dims[others[0]] {
            for w in 0..dims[others[1]] {
                let at = |t: usize| {
                    let mut c = [0usize; 3];
                    c[axis] = t;
                    c[others[0]] = u;
                    c[others[1]] = w;
                    c
                };
                for t in 0..n {
                    let c = at(t);
                    line[t] = d.get(c[0], c[1], c[2]);
                }
                edt_1d(&line, spacing[axis], &mut out);
                for t in 0..n {
                    let c = at(t);
                    d.set(c[0], c[1], c[2], out[t]);
                }
            }
        }
    }
    d
}

/// Surface Dice at tolerance `tau` (same units as `spacing`) on boundary
/// voxels. Two empty surfaces score 1; one empty surface scores 0.
pub fn nsd(a: &Grid3<u8>, b: &Grid3<u8>, tau: f64, spacing: [f64; 3]) -> Result<f64> {
    same_dims(a, b)?;
    let (ba, bb) = (boundary(a), boundary(b));
    let (na, nb) = (ba.count_nonzero(), bb.count_nonzero());
    if na + nb == 0 {
        return Ok(1.0);
    }
    let tau2 = tau * tau;
    let within = |from: &Grid3<u8>, to: &Grid3<u8>| -> usize {
        let dist = edt_sq(to, spacing);
        from.data().iter().zip(dist.data()).filter(|(&s, &d)| s != 0 && d <= tau2).count()
    };
    Ok((within(&ba, &bb) + within(&bb, &ba)) as f64 / (na + nb) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_hand_cases() {
        let mut a = Grid3::filled([1, 1, 4], 0u8);
        let mut b = a.clone();
        assert_eq!(dice(&a, &b).unwrap(), 1.0);
        a.set(0, 0, 0, 1);
        a.set(0, 0, 1, 1);
        b.set(0, 0, 1, 1);
        b.set(0, 0, 2, 1);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn edt_matches_brute_force_with_spacing() {
        let dims = [5, 6, 7];
        let mut f = Grid3::filled(dims, 0u8);
        for &(z, y, x) in &[(0, 0, 0), (4, 2, 6), (2, 5, 3)] {
            f.set(z, y, x, 1);
        }
        let sp = [2.0, 0.5, 1.25];
        let d = edt_sq(&f, sp);
        for i in 0..d.len() {
            let c = d.coords(i);
            let best = (0..f.len())
                .filter(|&j| f.data()[j] != 0)
                .map(|j| {
                    let e = f.coords(j);
                    (0..3).map(|a| ((c[a] as f64 - e[a] as f64) * sp[a]).powi(2)).sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((d.data()[i] - best).abs() < 1e-9, "{c:?}");
        }
    }

    #[test]
    fn edt_without_features_is_infinite() {
        let d = edt_sq(&Grid3::filled([2, 2, 2], 0u8), [1.0; 3]);
        assert!(d.data().iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn boundary_of_cube() {
        let mut m = Grid3::filled([5, 5, 5], 0u8);
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    m.set(z, y, x, 1);
                }
            }
        }
        let b = boundary(&m);
        assert_eq!(b.count_nonzero(), 26);
        assert_eq!(b.get(2, 2, 2), 0);
    }

    #[test]
    fn nsd_shifted_by_one_is_one() {
        let mut a = Grid3::filled([10, 10, 10], 0u8);
        let mut b = a.clone();
        for z in 2..6 {
            for y in 2..6 {
                for x in 2..6 {
                    a.set(z, y, x, 1);
                    b.set(z + 1, y, x + 1, 1);
                }
            }
        }
        assert_eq!(nsd(&a, &b, 5.0, [1.0; 3]).unwrap(), 1.0);
        assert!(nsd(&a, &b, 0.5, [1.0; 3]).unwrap() < 1.0);
    }
}
