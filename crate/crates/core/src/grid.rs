//! Dense row-major 3D grids in (depth, height, width) order.

use crate::error::{Error, Result};

/// Extent of a grid along (z, y, x).
pub type Dims = [usize; 3];

pub fn numel(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != numel(dims) {
            return Err(Error::Shape(format!(
                "grid {:?} needs {} values, got {}",
                dims,
                numel(dims),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Dims, value: T) -> Self {
        Self {
            dims,
            data: vec![value; numel(dims)],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn coords(&self, flat: usize) -> [usize; 3] {
        let x = flat % self.dims[2];
        let y = (flat / self.dims[2]) % self.dims[1];
        let z = flat / (self.dims[1] * self.dims[2]);
        [z, y, x]
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, value: T) {
        let i = self.index(z, y, x);
        self.data[i] = value;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy of the box `[origin, origin + size)`; the box must lie inside the grid.
    pub fn crop(&self, origin: [usize; 3], size: Dims) -> Grid3<T> {
        let mut out = Vec::with_capacity(numel(size));
        for z in 0..size[0] {
            for y in 0..size[1] {
                let start = self.index(origin[0] + z, origin[1] + y, origin[2]);
                out.extend_from_slice(&self.data[start..start + size[2]]);
            }
        }
        Grid3 { dims: size, data: out }
    }

    /// Write `patch` into this grid at `origin`.
    pub fn paste(&mut self, origin: [usize; 3], patch: &Grid3<T>) {
        let size = patch.dims;
        for z in 0..size[0] {
            for y in 0..size[1] {
                let dst = self.index(origin[0] + z, origin[1] + y, origin[2]);
                let src = patch.index(z, y, 0);
                self.data[dst..dst + size[2]].copy_from_slice(&patch.data[src..src + size[2]]);
            }
        }
    }

    /// Symmetric padding up to at least `min_dims`, filling with `value`.
    /// Returns the padded grid and the offset of the original inside it.
    pub fn pad_to(&self, min_dims: Dims, value: T) -> (Grid3<T>, [usize; 3]) {
        let new_dims = [
            self.dims[0].max(min_dims[0]),
            self.dims[1].max(min_dims[1]),
            self.dims[2].max(min_dims[2]),
        ];
        if new_dims == self.dims {
            return (self.clone(), [0, 0, 0]);
        }
        let offset = [
            (new_dims[0] - self.dims[0]) / 2,
            (new_dims[1] - self.dims[1]) / 2,
            (new_dims[2] - self.dims[2]) / 2,
        ];
        let mut out = Grid3::filled(new_dims, value);
        out.paste(offset, self);
        (out, offset)
    }
}

impl Grid3<u8> {
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// The six face neighbours of `c` that lie inside `dims`.
pub fn face_neighbors(c: [usize; 3], dims: Dims) -> impl Iterator<Item = [usize; 3]> {
    const OFFS: [[isize; 3]; 6] = [
        [-1, 0, 0],
        [1, 0, 0],
        [0, -1, 0],
        [0, 1, 0],
        [0, 0, -1],
        [0, 0, 1],
    ];
    OFFS.into_iter().filter_map(move |o| {
        let z = c[0] as isize + o[0];
        let y = c[1] as isize + o[1];
        let x = c[2] as isize + o[2];
        if z < 0 || y < 0 || x < 0 {
            return None;
        }
        let (z, y, x) = (z as usize, y as usize, x as usize);
        (z < dims[0] && y < dims[1] && x < dims[2]).then_some([z, y, x])
    })
}

/// Labels 6-connected components of the nonzero voxels. Returns per-voxel
/// labels (0 = background, components numbered from 1 in scan order) and
/// the voxel count of each component.
pub fn connected_components(mask: &Grid3<u8>) -> (Grid3<u32>, Vec<usize>) {
    let dims = mask.dims();
    let mut labels = Grid3::filled(dims, 0u32);
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if mask.data()[start] == 0 || labels.data()[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        let mut size = 0usize;
        labels.data_mut()[start] = label;
        stack.push(start);
        while let Some(flat) = stack.pop() {
            size += 1;
            for nb in face_neighbors(mask.coords(flat), dims) {
                let j = mask.index(nb[0], nb[1], nb[2]);
                if mask.data()[j] != 0 && labels.data()[j] == 0 {
                    labels.data_mut()[j] = label;
                    stack.push(j);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_paste_roundtrip() {
        let g = Grid3::new([3, 4, 5], (0..60).collect::<Vec<i32>>()).unwrap();
        let c = g.crop([1, 1, 2], [2, 2, 3]);
        assert_eq!(c.get(0, 0, 0), g.get(1, 1, 2));
        let mut z = Grid3::filled([3, 4, 5], 0);
        z.paste([1, 1, 2], &c);
        assert_eq!(z.get(2, 2, 4), g.get(2, 2, 4));
        assert_eq!(z.get(0, 0, 0), 0);
    }

    #[test]
    fn components_counted() {
        let mut m = Grid3::filled([4, 4, 4], 0u8);
        m.set(0, 0, 0, 1);
        m.set(0, 0, 1, 1);
        m.set(3, 3, 3, 1);
        m.set(2, 2, 2, 1); // diagonal neighbour of (3,3,3): separate under 6-connectivity
        let (_, sizes) = connected_components(&m);
        assert_eq!(sizes, vec![2, 1, 1]);
    }

    #[test]
    fn padding_is_symmetric() {
        let g = Grid3::filled([2, 2, 2], 1.0f32);
        let (p, off) = g.pad_to([4, 6, 2], 0.0);
        assert_eq!(p.dims(), [4, 6, 2]);
        assert_eq!(off, [1, 2, 0]);
        assert_eq!(p.data().iter().filter(|&&v| v == 1.0).count(), 8);
    }
}
