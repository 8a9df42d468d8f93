//! Dense n-dimensional arrays in row-major order (last index fastest).

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<T = f64> {
    dims: Vec<usize>,
    data: Vec<T>,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(Error::shape("tensor must have at least one dimension"));
    }
    if dims.contains(&0) {
        return Err(Error::shape(format!("zero extent in dims {dims:?}")));
    }
    Ok(dims.iter().product())
}

impl<T: Real> DenseTensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let len = check_dims(&dims)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} hold {len} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let len = check_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            data: vec![T::zero(); len],
        })
    }

    pub fn filled(dims: &[usize], value: T) -> Result<Self> {
        let mut t = Self::zeros(dims)?;
        t.data.iter_mut().for_each(|x| *x = value);
        Ok(t)
    }

    /// Builds a tensor by evaluating `f` at each flat index.
    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let len = check_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            data: (0..len).map(&mut f).collect(),
        })
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn(&[n, n], |k| if k / n == k % n { T::one() } else { T::zero() })
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for k in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.dims[k + 1];
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.dims.len() || index.iter().zip(&self.dims).any(|(i, d)| i >= d) {
            return Err(Error::IndexOutOfRange {
                index: index.to_vec(),
                dims: self.dims.clone(),
            });
        }
        Ok(index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum())
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let len = check_dims(dims)?;
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Reorders axes: output axis `k` is input axis `axes[k]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let nd = self.dims.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!("{axes:?} is not a permutation of {nd} axes")));
        }
        let in_strides = self.strides();
        let out_dims: Vec<usize> = axes.iter().map(|&a| self.dims[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; nd];
        let mut src = 0usize;
        for _ in 0..self.data.len() {
            out.push(self.data[src]);
            for k in (0..nd).rev() {
                idx[k] += 1;
                src += strides[k];
                if idx[k] < out_dims[k] {
                    break;
                }
                src -= strides[k] * out_dims[k];
                idx[k] = 0;
            }
        }
        Self::new(out_dims, out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> DenseTensor<U> {
        DenseTensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64_lossy(x.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// `‖self − reference‖_F / ‖reference‖_F`, or the absolute norm when the reference is zero.
    pub fn rel_error(&self, reference: &Self) -> Result<T> {
        self.same_dims(reference)?;
        let diff: T = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            .sqrt();
        let norm = reference.frobenius_norm();
        Ok(if norm > T::zero() { diff / norm } else { diff })
    }

    fn same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "dims differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_dims(other)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|x| x * factor)
    }

    fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!("expected a matrix, got dims {:?}", self.dims))),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    pub fn cols(&self) -> usize {
        self.dims[1..].iter().product()
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.matrix_dims()?;
        let (k2, n) = rhs.matrix_dims()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims differ: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            k as isize,
            1,
            &rhs.data,
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        Self::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        self.matrix_dims()?;
        self.permute(&[1, 0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_dims() {
        assert!(DenseTensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(DenseTensor::<f64>::new(vec![], vec![]).is_err());
        assert!(DenseTensor::<f64>::zeros(&[2, 0]).is_err());
    }

    #[test]
    fn permute_moves_axes() {
        let t = DenseTensor::<f64>::from_fn(&[2, 3, 4], |k| k as f64).unwrap();
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.dims(), &[4, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(p.get(&[k, i, j]).unwrap(), t.get(&[i, j, k]).unwrap());
                }
            }
        }
        assert!(t.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let t = DenseTensor::<f64>::zeros(&[2, 2]).unwrap();
        assert!(matches!(t.get(&[2, 0]), Err(Error::IndexOutOfRange { .. })));
        assert!(t.get(&[0]).is_err());
    }

    #[test]
    fn matmul_and_transpose() {
        let a = DenseTensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = DenseTensor::identity(2).unwrap();
        assert_eq!(a.matmul(&i).unwrap(), a);
        assert_eq!(a.transpose().unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
    }
}
