//! Dense 5D tensors in `(batch, channel, z, y, x)` layout, x fastest.

use crate::error::{Error, Result};
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5<T> {
    /// `(n, c, z, y, x)`.
    pub shape: [usize; 5],
    pub data: Vec<T>,
}

impl<T: Real> Tensor5<T> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor5 {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor5 { shape, data })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Spatial dims `(z, y, x)`.
    #[inline]
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
        (((n * self.shape[1] + c) * self.shape[2] + z) * self.shape[3] + y) * self.shape[4] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> T {
        self.data[self.idx(n, c, z, y, x)]
    }

    /// The `(n, c)` spatial plane as a slice.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane_len();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn add_assign(&mut self, other: &Tensor5<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "tensor add shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Concatenate along the channel dim.
    pub fn concat_channels(a: &Tensor5<T>, b: &Tensor5<T>) -> Result<Tensor5<T>> {
        if a.shape[0] != b.shape[0] || a.spatial() != b.spatial() {
            return Err(Error::Shape(format!(
                "concat shape mismatch: {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let (n, ca, cb) = (a.shape[0], a.shape[1], b.shape[1]);
        let p = a.plane_len();
        let mut out = Tensor5::zeros([n, ca + cb, a.shape[2], a.shape[3], a.shape[4]]);
        for ni in 0..n {
            for c in 0..ca {
                let dst = (ni * (ca + cb) + c) * p;
                out.data[dst..dst + p].copy_from_slice(a.plane(ni, c));
            }
            for c in 0..cb {
                let dst = (ni * (ca + cb) + ca + c) * p;
                out.data[dst..dst + p].copy_from_slice(b.plane(ni, c));
            }
        }
        Ok(out)
    }

    /// Split along the channel dim after channel `c_first`.
    pub fn split_channels(&self, c_first: usize) -> Result<(Tensor5<T>, Tensor5<T>)> {
        let (n, c) = (self.shape[0], self.shape[1]);
        if c_first == 0 || c_first >= c {
            return Err(Error::Shape(format!(
                "cannot split {c} channels at {c_first}"
            )));
        }
        let p = self.plane_len();
        let [_, _, z, y, x] = self.shape;
        let mut a = Tensor5::zeros([n, c_first, z, y, x]);
        let mut b = Tensor5::zeros([n, c - c_first, z, y, x]);
        for ni in 0..n {
            for ci in 0..c_first {
                let dst = (ni * c_first + ci) * p;
                a.data[dst..dst + p].copy_from_slice(self.plane(ni, ci));
            }
            for ci in c_first..c {
                let dst = (ni * (c - c_first) + ci - c_first) * p;
                b.data[dst..dst + p].copy_from_slice(self.plane(ni, ci));
            }
        }
        Ok((a, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_x_fastest() {
        let mut t = Tensor5::<f32>::zeros([1, 2, 2, 2, 3]);
        let i = t.idx(0, 1, 1, 0, 2);
        t.data[i] = 5.0;
        assert_eq!(t.at(0, 1, 1, 0, 2), 5.0);
        assert_eq!(t.idx(0, 0, 0, 0, 1), 1);
        assert_eq!(t.idx(0, 0, 0, 1, 0), 3);
        assert_eq!(t.idx(0, 0, 1, 0, 0), 6);
        assert_eq!(t.idx(0, 1, 0, 0, 0), 12);
    }

    #[test]
    fn concat_then_split_roundtrips() {
        let mut a = Tensor5::<f64>::zeros([1, 2, 1, 2, 2]);
        let mut b = Tensor5::<f64>::zeros([1, 3, 1, 2, 2]);
        for (i, v) in a.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        for (i, v) in b.data.iter_mut().enumerate() {
            *v = 100.0 + i as f64;
        }
        let cat = Tensor5::concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape, [1, 5, 1, 2, 2]);
        let (a2, b2) = cat.split_channels(2).unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }
}
