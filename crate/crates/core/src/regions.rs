//! Center / surrounding / marginal partition of a lesion by depth inside it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{connected_components, Grid3};
use crate::metrics::edt_sq;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Center,
    Surrounding,
    Marginal,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Center, Region::Surrounding, Region::Marginal];

    /// Label value used in [`region_partition`] output.
    pub fn label(self) -> u8 {
        match self {
            Region::Marginal => 1,
            Region::Surrounding => 2,
            Region::Center => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Center => "center",
            Region::Surrounding => "surrounding",
            Region::Marginal => "marginal",
        }
    }
}

/// Labels the largest 6-connected component (0 elsewhere). With `dt` the
/// distance to the nearest background voxel (1 on the boundary) and `M` its
/// maximum: marginal = `dt ≤ max(M/3, 1)`, center = `dt ≥ 2M/3` outside
/// marginal, surrounding = the rest. Ties in component size go to the first
/// in scan order.
pub fn region_partition(mask: &Grid3<u8>, spacing: [f64; 3], lo_frac: f64, hi_frac: f64) -> Result<Grid3<u8>> {
    let (labels, sizes) = connected_components(mask);
    let Some(best) = (0..sizes.len()).max_by(|&i, &j| sizes[i].cmp(&sizes[j]).then(j.cmp(&i))) else {
        return Err(Error::Parameter("region partition needs a nonempty mask".into()));
    };
    let label = best as u32 + 1;
    // Background includes the outside of the volume: pad by one voxel.
    let d = mask.dims();
    let padded_dims = d.map(|n| n + 2);
    let mut bg = Grid3::filled(padded_dims, 1u8);
    for i in 0..labels.len() {
        if labels.data()[i] == label {
            let c = labels.coords(i);
            bg.set(c[0] + 1, c[1] + 1, c[2] + 1, 0);
        }
    }
    let dist = edt_sq(&bg, spacing).crop([1, 1, 1], d).map(f64::sqrt);
    let m = (0..labels.len())
        .filter(|&i| labels.data()[i] == label)
        .map(|i| dist.data()[i])
        .fold(0.0, f64::max);
    let unit = spacing.iter().copied().fold(f64::INFINITY, f64::min);
    let lo = (m * lo_frac).max(unit);
    let hi = m * hi_frac;
    let mut out = Grid3::filled(d, 0u8);
    for i in 0..labels.len() {
        if labels.data()[i] != label {
            continue;
        }
        let t = dist.data()[i];
        let r = if t <= lo + 1e-9 {
            Region::Marginal
        } else if t >= hi - 1e-9 {
            Region::Center
        } else {
            Region::Surrounding
        };
        out.data_mut()[i] = r.label();
    }
    Ok(out)
}

/// Flat indices of voxels carrying region `r`.
pub fn region_voxels(partition: &Grid3<u8>, r: Region) -> Vec<usize> {
    (0..partition.len()).filter(|&i| partition.data()[i] == r.label()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball(n: usize, r: f64) -> Grid3<u8> {
        let c = (n as f64 - 1.0) / 2.0;
        let mut g = Grid3::filled([n; 3], 0u8);
        for i in 0..g.len() {
            let p = g.coords(i);
            if p.iter().map(|&v| (v as f64 - c).powi(2)).sum::<f64>() <= r * r {
                g.data_mut()[i] = 1;
            }
        }
        g
    }

    #[test]
    fn ball_gives_nested_shells() {
        let g = ball(23, 9.0);
        let part = region_partition(&g, [1.0; 3], 1.0 / 3.0, 2.0 / 3.0).unwrap();
        let c = 11;
        // along a ray from the centre the labels go center → surrounding → marginal
        let ray: Vec<u8> = (c..23).map(|x| part.get(c, c, x)).filter(|&v| v != 0).collect();
        let mut last = 3u8;
        for &v in &ray {
            assert!(v <= last);
            last = v;
        }
        for r in Region::ALL {
            assert!(!region_voxels(&part, r).is_empty(), "{r:?}");
        }
    }

    #[test]
    fn single_voxel_is_marginal() {
        let mut g = Grid3::filled([3, 3, 3], 0u8);
        g.set(1, 1, 1, 1);
        let part = region_partition(&g, [1.0; 3], 1.0 / 3.0, 2.0 / 3.0).unwrap();
        assert_eq!(part.get(1, 1, 1), Region::Marginal.label());
    }

    #[test]
    fn only_largest_component() {
        let mut g = Grid3::filled([12, 12, 12], 0u8);
        for i in 0..100 {
            g.set(i / 10 % 10, i % 10, 0, 1);
        }
        for i in 0..10 {
            g.set(i, 0, 11, 1);
        }
        let part = region_partition(&g, [1.0; 3], 1.0 / 3.0, 2.0 / 3.0).unwrap();
        assert_eq!(part.count_nonzero(), 100);
        assert_eq!(part.get(3, 0, 11), 0);
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(region_partition(&Grid3::filled([2, 2, 2], 0u8), [1.0; 3], 0.3, 0.6).is_err());
    }
}
