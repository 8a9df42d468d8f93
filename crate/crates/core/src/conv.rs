//! Convolution geometry and a direct-loop reference convolution.
//!
//! The reference implementation walks every output element and every kernel
//! tap, including taps that land in the zero padding, and counts one
//! multiply-accumulate per tap. Its counter is what the cost model is checked
//! against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::DenseTensor;

/// A square-kernel 2-D convolution, input channels `C` to output channels `S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    /// All groups reuse one kernel; requires one output channel per group.
    pub shared_group_kernel: bool,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
            groups: 1,
            shared_group_kernel: false,
            has_bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn grouped(mut self, groups: usize, shared: bool) -> Self {
        self.groups = groups;
        self.shared_group_kernel = shared;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Conv(msg));
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 {
            return fail(format!("channels and kernel must be positive: {self:?}"));
        }
        if self.stride == 0 || self.groups == 0 {
            return fail(format!("stride and groups must be positive: {self:?}"));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return fail(format!(
                "groups {} must divide channels {} -> {}",
                self.groups, self.in_channels, self.out_channels
            ));
        }
        if self.shared_group_kernel && self.out_channels != self.groups {
            return fail(format!(
                "a shared group kernel needs one output channel per group, got {} outputs for {} groups",
                self.out_channels, self.groups
            ));
        }
        Ok(())
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// `(S, C/g, l, l)`, or `(C/g, l, l)` for a shared group kernel.
    pub fn weight_dims(&self) -> Vec<usize> {
        let l = self.kernel;
        if self.shared_group_kernel {
            vec![self.in_per_group(), l, l]
        } else {
            vec![self.out_channels, self.in_per_group(), l, l]
        }
    }

    pub fn weight_count(&self) -> usize {
        self.weight_dims().iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + if self.has_bias { self.out_channels } else { 0 }
    }

    /// `floor((in + 2p − l)/stride) + 1` per axis.
    pub fn output_dims(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        let axis = |n: usize| {
            let padded = n + 2 * self.padding;
            if n == 0 || padded < self.kernel {
                None
            } else {
                Some((padded - self.kernel) / self.stride + 1)
            }
        };
        match (axis(in_h), axis(in_w)) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(Error::Conv(format!(
                "kernel {} with padding {} does not fit a {in_h}x{in_w} input",
                self.kernel, self.padding
            ))),
        }
    }

    /// Multiply-accumulates for one image of the given input size.
    pub fn macs(&self, in_h: usize, in_w: usize) -> Result<u64> {
        let (h, w) = self.output_dims(in_h, in_w)?;
        Ok((h * w * self.out_channels * self.in_per_group() * self.kernel * self.kernel) as u64)
    }
}

/// Counts multiply-accumulates performed by [`reference_conv2d`].
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MacCounter(pub u64);

/// Direct convolution of an `(N, C, H, W)` input.
pub fn reference_conv2d<T: Real>(
    input: &DenseTensor<T>,
    weight: &DenseTensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
    counter: &mut MacCounter,
) -> Result<DenseTensor<T>> {
    spec.validate()?;
    let &[n, c, h, w] = input.dims() else {
        return Err(Error::shape(format!("expected NCHW input, got {:?}", input.dims())));
    };
    if c != spec.in_channels {
        return Err(Error::shape(format!(
            "input has {c} channels, convolution expects {}",
            spec.in_channels
        )));
    }
    if weight.dims() != spec.weight_dims().as_slice() {
        return Err(Error::shape(format!(
            "weight dims {:?} do not match {:?}",
            weight.dims(),
            spec.weight_dims()
        )));
    }
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::shape(format!("bias has {} entries, expected {}", b.len(), spec.out_channels)));
        }
    }
    let (oh, ow) = spec.output_dims(h, w)?;
    let (cg, sg, l) = (spec.in_per_group(), spec.out_per_group(), spec.kernel);
    let x = input.data();
    let k = weight.data();
    let mut out = vec![T::zero(); n * spec.out_channels * oh * ow];
    let mut taps = 0u64;
    for b in 0..n {
        for s in 0..spec.out_channels {
            let g = s / sg;
            // row of the kernel used by output channel s
            let krow = if spec.shared_group_kernel { 0 } else { s };
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(T::zero(), |bb| bb[s]);
                    for ci in 0..cg {
                        let ch = g * cg + ci;
                        for i in 0..l {
                            for j in 0..l {
                                taps += 1;
                                let iy = (y * spec.stride + i) as isize - spec.padding as isize;
                                let ix = (xo * spec.stride + j) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ch) * h + iy as usize) * w + ix as usize];
                                let kv = k[((krow * cg + ci) * l + i) * l + j];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * spec.out_channels + s) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    counter.0 += taps;
    DenseTensor::new(vec![n, spec.out_channels, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_arithmetic() {
        let spec = ConvSpec::new(4, 4, 3).stride(2).padding(1);
        assert_eq!(spec.output_dims(8, 8).unwrap(), (4, 4));
        assert_eq!(ConvSpec::new(1, 1, 3).output_dims(14, 14).unwrap(), (12, 12));
        assert!(ConvSpec::new(1, 1, 5).output_dims(3, 3).is_err());
    }

    #[test]
    fn shared_group_kernel_constraints() {
        assert!(ConvSpec::new(32, 16, 3).grouped(16, true).validate().is_ok());
        assert_eq!(ConvSpec::new(32, 16, 3).grouped(16, true).weight_dims(), vec![2, 3, 3]);
        assert!(ConvSpec::new(32, 32, 3).grouped(16, true).validate().is_err());
        assert!(ConvSpec::new(30, 16, 3).grouped(16, false).validate().is_err());
    }

    #[test]
    fn counter_matches_formula() {
        let spec = ConvSpec::new(3, 5, 3).stride(2).padding(1);
        let x = DenseTensor::<f64>::zeros(&[2, 3, 7, 6]).unwrap();
        let k = DenseTensor::<f64>::zeros(&spec.weight_dims()).unwrap();
        let mut counter = MacCounter::default();
        reference_conv2d(&x, &k, None, &spec, &mut counter).unwrap();
        assert_eq!(counter.0, 2 * spec.macs(7, 6).unwrap());
    }

    #[test]
    fn single_pixel_single_tap() {
        let spec = ConvSpec::new(1, 1, 1).bias(true);
        let x = DenseTensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let k = DenseTensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = reference_conv2d(&x, &k, Some(&[0.5]), &spec, &mut MacCounter::default()).unwrap();
        assert_eq!(y.data(), &[6.5]);
    }
}
