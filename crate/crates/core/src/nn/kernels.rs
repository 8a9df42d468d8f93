//! Forward and backward kernels on raw NCHW buffers.
//!
//! Convolution gathers patches into a `(C/g·l·l) × (N·Ho·Wo)` column matrix per
//! group and multiplies it with the group's kernel rows.

use crate::conv::ConvSpec;
use crate::scalar::Real;

/// Geometry of one convolution call.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub spec: ConvSpec,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Rows of one group's column matrix.
    pub fn k(&self) -> usize {
        self.spec.in_per_group() * self.spec.kernel * self.spec.kernel
    }

    /// Columns of the column matrix.
    pub fn p(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Offset of output channel block `g` in the weight buffer.
    fn weight_offset(&self, g: usize) -> usize {
        if self.spec.shared_group_kernel {
            0
        } else {
            g * self.spec.out_per_group() * self.k()
        }
    }
}

/// Patch gather: returns `groups · K × P` values, group-major.
pub fn im2col<T: Real>(x: &[T], geo: &ConvGeom) -> Vec<T> {
    let s = &geo.spec;
    let (c, h, w, l) = (s.in_channels, geo.h, geo.w, s.kernel);
    let (oh, ow, p) = (geo.oh, geo.ow, geo.p());
    let mut cols = vec![T::zero(); c * l * l * p];
    // the row index over all groups is simply channel·l² + tap
    for ch in 0..c {
        for i in 0..l {
            for j in 0..l {
                let row = &mut cols[((ch * l + i) * l + j) * p..][..p];
                for b in 0..geo.n {
                    let plane = &x[(b * c + ch) * h * w..][..h * w];
                    for y in 0..oh {
                        let iy = (y * s.stride + i) as isize - s.padding as isize;
                        let dst = &mut row[(b * oh + y) * ow..][..ow];
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        for (xo, d) in dst.iter_mut().enumerate() {
                            let ix = (xo * s.stride + j) as isize - s.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of column gradients back to the input layout.
pub fn col2im<T: Real>(cols: &[T], geo: &ConvGeom, dx: &mut [T]) {
    let s = &geo.spec;
    let (c, h, w, l) = (s.in_channels, geo.h, geo.w, s.kernel);
    let (oh, ow, p) = (geo.oh, geo.ow, geo.p());
    for ch in 0..c {
        for i in 0..l {
            for j in 0..l {
                let row = &cols[((ch * l + i) * l + j) * p..][..p];
                for b in 0..geo.n {
                    let plane = &mut dx[(b * c + ch) * h * w..][..h * w];
                    for y in 0..oh {
                        let iy = (y * s.stride + i) as isize - s.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &row[(b * oh + y) * ow..][..ow];
                        let dst = &mut plane[iy as usize * w..][..w];
                        for (xo, &v) in src.iter().enumerate() {
                            let ix = (xo * s.stride + j) as isize - s.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `(N, S, Ho·Wo)` ↔ `(S, N·Ho·Wo)`.
fn swap_leading<T: Real>(src: &[T], a: usize, b: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * inner..][..inner].copy_from_slice(&src[(i * b + j) * inner..][..inner]);
        }
    }
    out
}

/// Returns the output `(N, S, Ho, Wo)` and the column matrix kept for backward.
pub fn conv_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, geo: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let s = &geo.spec;
    let cols = im2col(x, geo);
    let (k, p, sg) = (geo.k(), geo.p(), s.out_per_group());
    // (S, P), row g·Sg + o
    let mut y = vec![T::zero(); s.out_channels * p];
    for g in 0..s.groups {
        T::gemm(
            sg,
            k,
            p,
            T::one(),
            &weight[geo.weight_offset(g)..],
            k as isize,
            1,
            &cols[g * k * p..],
            p as isize,
            1,
            T::zero(),
            &mut y[g * sg * p..],
            p as isize,
            1,
        );
    }
    if let Some(b) = bias {
        for (row, &bv) in y.chunks_exact_mut(p).zip(b) {
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    let out = swap_leading(&y, s.out_channels, geo.n, geo.oh * geo.ow);
    (out, cols)
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Option<Vec<T>>,
}

pub fn conv_backward<T: Real>(
    dy: &[T],
    cols: &[T],
    weight: &[T],
    geo: &ConvGeom,
    need_dx: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let s = &geo.spec;
    let (k, p, sg) = (geo.k(), geo.p(), s.out_per_group());
    let dy_t = swap_leading(dy, geo.n, s.out_channels, geo.oh * geo.ow);
    let mut dw = vec![T::zero(); weight.len()];
    for g in 0..s.groups {
        // shared kernels accumulate the gradient of every group
        T::gemm(
            sg,
            p,
            k,
            T::one(),
            &dy_t[g * sg * p..],
            p as isize,
            1,
            &cols[g * k * p..],
            1,
            p as isize,
            if s.shared_group_kernel && g > 0 { T::one() } else { T::zero() },
            &mut dw[geo.weight_offset(g)..],
            k as isize,
            1,
        );
    }
    let db = need_db.then(|| dy_t.chunks_exact(p).map(|row| row.iter().copied().sum()).collect());
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); cols.len()];
        for g in 0..s.groups {
            T::gemm(
                k,
                sg,
                p,
                T::one(),
                &weight[geo.weight_offset(g)..],
                1,
                k as isize,
                &dy_t[g * sg * p..],
                p as isize,
                1,
                T::zero(),
                &mut dcols[g * k * p..],
                p as isize,
                1,
            );
        }
        let mut dx = vec![T::zero(); geo.n * s.in_channels * geo.h * geo.w];
        col2im(&dcols, geo, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}

/// Per-channel statistics of a train-mode batch norm, kept for backward.
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes with batch statistics. Returns output, cache, batch mean and
/// biased batch variance.
pub fn bn_train_forward<T: Real>(
    x: &[T],
    (n, c, hw): (usize, usize, usize),
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, BnCache<T>, Vec<T>, Vec<T>) {
    let m = T::from_usize(n * hw).expect("count fits");
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for b in 0..n {
            acc += x[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
        }
        mean[ch] = acc / m;
        let mut sq = T::zero();
        for b in 0..n {
            sq += x[(b * c + ch) * hw..][..hw].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
        }
        var[ch] = sq / m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for t in off..off + hw {
                xhat[t] = (x[t] - mean[ch]) * inv_std[ch];
                y[t] = gamma[ch] * xhat[t] + beta[ch];
            }
        }
    }
    (y, BnCache { xhat, inv_std }, mean, var)
}

/// Returns `(dx, dgamma, dbeta)` for train mode.
pub fn bn_train_backward<T: Real>(
    dy: &[T],
    cache: &BnCache<T>,
    (n, c, hw): (usize, usize, usize),
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::from_usize(n * hw).expect("count fits");
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for t in off..off + hw {
                dgamma[ch] += dy[t] * cache.xhat[t];
                dbeta[ch] += dy[t];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] * cache.inv_std[ch] / m;
            let off = (b * c + ch) * hw;
            for t in off..off + hw {
                dx[t] = scale * (m * dy[t] - dbeta[ch] - cache.xhat[t] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub struct MaxPoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Output and, per output element, the flat input index of its maximum.
pub fn maxpool_forward<T: Real>(x: &[T], g: &MaxPoolGeom) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.n * g.c * g.oh * g.ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for y in 0..g.oh {
            for xo in 0..g.ow {
                let mut best = T::neg_infinity();
                let mut at = usize::MAX;
                for i in 0..g.kernel {
                    for j in 0..g.kernel {
                        let iy = (y * g.stride + i) as isize - g.padding as isize;
                        let ix = (xo * g.stride + j) as isize - g.padding as isize;
                        if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * g.w + ix as usize;
                        if at == usize::MAX || x[idx] > best {
                            best = x[idx];
                            at = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(at);
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{reference_conv2d, MacCounter};
    use crate::rng::Rng;
    use crate::tensor::DenseTensor;

    fn check_against_reference(spec: ConvSpec, n: usize, h: usize, w: usize, seed: u64) {
        let mut rng = Rng::new(seed);
        let x = DenseTensor::<f64>::from_fn(&[n, spec.in_channels, h, w], |_| rng.normal()).unwrap();
        let k = DenseTensor::<f64>::from_fn(&spec.weight_dims(), |_| rng.normal()).unwrap();
        let b: Vec<f64> = (0..spec.out_channels).map(|_| rng.normal()).collect();
        let want = reference_conv2d(&x, &k, Some(&b), &spec, &mut MacCounter::default()).unwrap();
        let (oh, ow) = spec.output_dims(h, w).unwrap();
        let geo = ConvGeom { spec, n, h, w, oh, ow };
        let (got, _) = conv_forward(x.data(), k.data(), Some(&b), &geo);
        let diff = got.iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{spec:?}: {diff}");
    }

    #[test]
    fn forward_matches_reference() {
        check_against_reference(ConvSpec::new(3, 4, 3).padding(1), 2, 5, 6, 1);
        check_against_reference(ConvSpec::new(4, 6, 3).stride(2).padding(1).grouped(2, false), 2, 7, 7, 2);
        check_against_reference(ConvSpec::new(8, 4, 3).stride(2).grouped(4, true), 3, 6, 5, 3);
        check_against_reference(ConvSpec::new(5, 2, 1).stride(2), 1, 5, 5, 4);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let spec = ConvSpec::new(3, 1, 3).stride(2).padding(1);
        let geo = ConvGeom {
            spec,
            n: 2,
            h: 5,
            w: 4,
            oh: 3,
            ow: 2,
        };
        let mut rng = Rng::new(7);
        let x: Vec<f64> = (0..2 * 3 * 20).map(|_| rng.normal()).collect();
        let cols = im2col(&x, &geo);
        let r: Vec<f64> = (0..cols.len()).map(|_| rng.normal()).collect();
        let mut back = vec![0.0; x.len()];
        col2im(&r, &geo, &mut back);
        let lhs: f64 = cols.iter().zip(&r).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn maxpool_picks_first_maximum() {
        let g = MaxPoolGeom {
            n: 1,
            c: 1,
            h: 2,
            w: 2,
            kernel: 2,
            stride: 2,
            padding: 0,
            oh: 1,
            ow: 1,
        };
        let (y, arg) = maxpool_forward(&[1.0f64, 3.0, 3.0, 2.0], &g);
        assert_eq!((y, arg), (vec![3.0], vec![1]));
    }
}
