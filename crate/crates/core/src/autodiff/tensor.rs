use super::Scalar;
use crate::error::{Error, Result};

/// Dense row-major tensor.
///
/// Feature maps are rank 4 `(C, D, H, W)`; convolution kernels are rank 5
/// `(Cout, Cin, kd, kh, kw)`; biases are rank 1 and scalars have shape `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// `(C, D, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[c, d, h, w] => Ok([c, d, h, w]),
            s => Err(Error::Shape(format!("expected a (C,D,H,W) tensor, got {s:?}"))),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Shape(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// Channels `start..start + len` of a rank-4 tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [c, d, h, w] = self.dims4()?;
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let plane = d * h * w;
        Ok(Self {
            shape: vec![len, d, h, w],
            data: self.data[start * plane..(start + len) * plane].to_vec(),
        })
    }

    pub(crate) fn same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )))
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Sum with a fixed 8-lane reduction tree; order does not depend on threads.
pub(crate) fn lane_sum<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let rem = chunks.remainder();
    for c in chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a += x;
        }
    }
    for (a, &x) in acc.iter_mut().zip(rem) {
        *a += x;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

/// Dot product with the same fixed reduction tree as [`lane_sum`].
pub(crate) fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 16];
    let ca = a.chunks_exact(16);
    let cb = b.chunks_exact(16);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..16 {
            acc[i] += x[i] * y[i];
        }
    }
    for (i, (&x, &y)) in ra.iter().zip(rb).enumerate() {
        acc[i] += x * y;
    }
    let mut s = [T::zero(); 8];
    for i in 0..8 {
        s[i] = acc[i] + acc[i + 8];
    }
    ((s[0] + s[4]) + (s[1] + s[5])) + ((s[2] + s[6]) + (s[3] + s[7]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn lane_reductions_match_naive() {
        let xs: Vec<f64> = (0..37).map(|i| i as f64 * 0.5).collect();
        let ys: Vec<f64> = (0..37).map(|i| 1.0 - i as f64).collect();
        assert_eq!(lane_sum(&xs), xs.iter().sum::<f64>());
        let naive: f64 = xs.iter().zip(&ys).map(|(a, b)| a * b).sum();
        assert!((lane_dot(&xs, &ys) - naive).abs() < 1e-9);
    }

    #[test]
    fn slice_channels_bounds() {
        let t = Tensor::<f64>::zeros(&[3, 1, 1, 2]);
        assert_eq!(t.slice_channels(1, 2).unwrap().shape(), &[2, 1, 1, 2]);
        assert!(t.slice_channels(2, 2).is_err());
    }
}
