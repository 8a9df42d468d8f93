//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every operation appends a node holding its output and whatever it needs for
//! the backward pass. [`Tape::backward`] walks the list in reverse.

use super::kernels::{self, BnCache, ConvGeom, MaxPoolGeom};
use super::params::{ParamId, ParamStore};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::DenseTensor;

/// Handle to a node of a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeom,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache<T>,
        train: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Mix {
        alpha: Var,
        a: Var,
        b: Var,
    },
    GlobalAvgPool(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Dot {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: DenseTensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T> std::fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn nchw(name: &str, t: &DenseTensor<impl Real>) -> Result<[usize; 4]> {
    match *t.dims() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref d => Err(Error::layer(name, format!("expected an NCHW activation, got dims {d:?}"))),
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseTensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &DenseTensor<T> {
        &self.nodes[v.0].value
    }

    /// A constant input. With `requires_grad` its gradient is kept.
    pub fn input(&mut self, value: DenseTensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn conv2d(&mut self, name: &str, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        spec.validate().map_err(|e| Error::layer(name, e.to_string()))?;
        let [n, c, h, wd] = nchw(name, self.value(x))?;
        if c != spec.in_channels {
            return Err(Error::layer(
                name,
                format!("input has {c} channels, convolution expects {}", spec.in_channels),
            ));
        }
        if self.value(w).dims() != spec.weight_dims().as_slice() {
            return Err(Error::layer(
                name,
                format!("weight dims {:?}, expected {:?}", self.value(w).dims(), spec.weight_dims()),
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != spec.out_channels {
                return Err(Error::layer(name, "bias length differs from output channels"));
            }
        }
        let (oh, ow) = spec.output_dims(h, wd).map_err(|e| Error::layer(name, e.to_string()))?;
        let geo = ConvGeom {
            spec,
            n,
            h,
            w: wd,
            oh,
            ow,
        };
        let (out, cols) = kernels::conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geo,
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = DenseTensor::new(vec![n, spec.out_channels, oh, ow], out)?;
        Ok(self.push(value, Op::Conv { x, w, b, geo, cols }, needs))
    }

    fn check_bn(&self, name: &str, x: Var, gamma: Var, beta: Var) -> Result<[usize; 4]> {
        let d = nchw(name, self.value(x))?;
        if self.value(gamma).len() != d[1] || self.value(beta).len() != d[1] {
            return Err(Error::layer(name, format!("scale and shift must have {} entries", d[1])));
        }
        Ok(d)
    }

    /// Batch-statistics normalization. Also returns the batch mean and the
    /// biased batch variance.
    pub fn batch_norm_train(
        &mut self,
        name: &str,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let [n, c, h, w] = self.check_bn(name, x, gamma, beta)?;
        let (y, cache, mean, var) = kernels::bn_train_forward(
            self.value(x).data(),
            (n, c, h * w),
            self.value(gamma).data(),
            self.value(beta).data(),
            T::from_f64_lossy(eps),
        );
        let value = DenseTensor::new(vec![n, c, h, w], y)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            cache,
            train: true,
        };
        Ok((self.push(value, op, needs), mean, var))
    }

    /// Normalization with fixed statistics: an affine map of the input.
    pub fn batch_norm_eval(
        &mut self,
        name: &str,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let [n, c, h, w] = self.check_bn(name, x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::layer(name, "running statistics have the wrong length"));
        }
        let eps = T::from_f64_lossy(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let hw = h * w;
        let xs = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xs.len()];
        let mut y = vec![T::zero(); xs.len()];
        for (t, (&xv, (xh, yv))) in xs.iter().zip(xhat.iter_mut().zip(y.iter_mut())).enumerate() {
            let ch = (t / hw) % c;
            *xh = (xv - mean[ch]) * inv_std[ch];
            *yv = g[ch] * *xh + bt[ch];
        }
        let value = DenseTensor::new(vec![n, c, h, w], y)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            cache: BnCache { xhat, inv_std },
            train: false,
        };
        Ok(self.push(value, op, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn add(&mut self, name: &str, a: Var, b: Var) -> Result<Var> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Error::layer(
                name,
                format!("cannot add {:?} and {:?}", self.value(a).dims(), self.value(b).dims()),
            ));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// `α·a + (1 − α)·b` with a scalar `α`.
    pub fn mix(&mut self, name: &str, alpha: Var, a: Var, b: Var) -> Result<Var> {
        if self.value(alpha).len() != 1 {
            return Err(Error::layer(name, "mixture weight must be a scalar"));
        }
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Error::layer(
                name,
                format!(
                    "branch outputs differ: {:?} vs {:?}",
                    self.value(a).dims(),
                    self.value(b).dims()
                ),
            ));
        }
        let al = self.value(alpha).data()[0];
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| al * x + (T::one() - al) * y)
            .collect();
        let value = DenseTensor::new(self.value(a).dims().to_vec(), data)?;
        let needs = self.needs(alpha) || self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mix { alpha, a, b }, needs))
    }

    /// `(N, C, H, W) → (N, C)`.
    pub fn global_avg_pool(&mut self, name: &str, x: Var) -> Result<Var> {
        let [n, c, h, w] = nchw(name, self.value(x))?;
        let hw = h * w;
        let scale = T::one() / T::from_usize(hw).expect("count fits");
        let data = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * scale)
            .collect();
        let value = DenseTensor::new(vec![n, c], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), needs))
    }

    pub fn max_pool(&mut self, name: &str, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, w] = nchw(name, self.value(x))?;
        if padding >= kernel {
            return Err(Error::layer(name, "padding must be smaller than the pooling window"));
        }
        let spec = ConvSpec::new(c, c, kernel).stride(stride).padding(padding);
        let (oh, ow) = spec.output_dims(h, w).map_err(|e| Error::layer(name, e.to_string()))?;
        let geo = MaxPoolGeom {
            n,
            c,
            h,
            w,
            kernel,
            stride,
            padding,
            oh,
            ow,
        };
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), &geo);
        let value = DenseTensor::new(vec![n, c, oh, ow], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, needs))
    }

    /// `x·wᵀ + b` for `x: (N, F)`, `w: (O, F)`.
    pub fn linear(&mut self, name: &str, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xd = self.value(x).dims();
        let wd = self.value(w).dims();
        let (n, f) = (xd[0], self.value(x).cols());
        if wd.len() != 2 || wd[1] != f {
            return Err(Error::layer(name, format!("weight dims {wd:?} do not fit {f} input features")));
        }
        let o = wd[0];
        if b.is_some_and(|b| self.value(b).len() != o) {
            return Err(Error::layer(name, "bias length differs from output features"));
        }
        let mut out = vec![T::zero(); n * o];
        T::gemm(
            n,
            f,
            o,
            T::one(),
            self.value(x).data(),
            f as isize,
            1,
            self.value(w).data(),
            1,
            f as isize,
            T::zero(),
            &mut out,
            o as isize,
            1,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(o) {
                row.iter_mut().zip(bias).for_each(|(v, &bv)| *v += bv);
            }
        }
        let value = DenseTensor::new(vec![n, o], out)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let d = self.value(logits).dims();
        let (n, k) = match *d {
            [n, k] => (n, k),
            _ => return Err(Error::layer("loss", format!("logits must be (N, K), got {d:?}"))),
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::layer("loss", format!("labels must be {n} class indices below {k}")));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = T::zero();
        for (row, &label) in self.value(logits).data().chunks_exact(k).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let log_z = z.ln() + m;
            loss += log_z - row[label];
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let loss = loss / T::from_usize(n).expect("count fits");
        let needs = self.needs(logits);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push(DenseTensor::scalar(loss), op, needs))
    }

    /// `Σ x·weights`, a scalar probe for gradient checks.
    pub fn dot(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape("probe weights differ in length from the probed value"));
        }
        let v: T = self.value(x).data().iter().zip(weights).map(|(&a, &b)| a * b).sum();
        let needs = self.needs(x);
        Ok(self.push(
            DenseTensor::scalar(v),
            Op::Dot {
                x,
                weights: weights.to_vec(),
            },
            needs,
        ))
    }

    /// Gradient of a node after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients after [`Tape::backward`], one entry per use.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.nodes.iter().zip(&self.grads).filter_map(|(node, g)| match (&node.op, g) {
            (Op::Param(id), Some(g)) => Some((*id, g.as_slice())),
            _ => None,
        })
    }

    /// Adds parameter gradients into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in self.param_grads() {
            store.get_mut(id).grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::NoForward("the loss is not a node of this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv { x, w, b, geo, cols } => {
                let r = kernels::conv_backward(g, cols, val(*w), geo, needs(*x), b.is_some_and(needs));
                if let Some(dx) = r.dx {
                    accumulate(grads, *x, dx);
                }
                if needs(*w) {
                    accumulate(grads, *w, r.dw);
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
                train,
            } => {
                let &[n, c, h, w] = node.value.dims() else { unreachable!() };
                let gam = val(*gamma);
                let (dx, dg, db) = if *train {
                    kernels::bn_train_backward(g, cache, (n, c, h * w), gam)
                } else {
                    let hw = h * w;
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    let mut dx = vec![T::zero(); g.len()];
                    for t in 0..g.len() {
                        let ch = (t / hw) % c;
                        dg[ch] += g[t] * cache.xhat[t];
                        db[ch] += g[t];
                        dx[t] = g[t] * gam[ch] * cache.inv_std[ch];
                    }
                    (dx, dg, db)
                };
                if needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if needs(*gamma) {
                    accumulate(grads, *gamma, dg);
                }
                if needs(*beta) {
                    accumulate(grads, *beta, db);
                }
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Mix { alpha, a, b } => {
                let al = val(*alpha)[0];
                if needs(*alpha) {
                    let d: T = g
                        .iter()
                        .zip(val(*a).iter().zip(val(*b)))
                        .map(|(&gv, (&x, &y))| gv * (x - y))
                        .sum();
                    accumulate(grads, *alpha, vec![d]);
                }
                if needs(*a) {
                    accumulate(grads, *a, g.iter().map(|&gv| gv * al).collect());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.iter().map(|&gv| gv * (T::one() - al)).collect());
                }
            }
            Op::GlobalAvgPool(x) => {
                let xv = &self.nodes[x.0].value;
                let hw = xv.dims()[2] * xv.dims()[3];
                let scale = T::one() / T::from_usize(hw).expect("count fits");
                let dx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * scale, hw)).collect();
                accumulate(grads, *x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.nodes[x.0].value.len()];
                for (&gv, &at) in g.iter().zip(argmax) {
                    if at != usize::MAX {
                        dx[at] += gv;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let (n, o) = (node.value.dims()[0], node.value.dims()[1]);
                let f = self.nodes[x.0].value.cols();
                if needs(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    T::gemm(n, o, f, T::one(), g, o as isize, 1, val(*w), f as isize, 1, T::zero(), &mut dx, f as isize, 1);
                    accumulate(grads, *x, dx);
                }
                if needs(*w) {
                    let mut dw = vec![T::zero(); o * f];
                    T::gemm(o, n, f, T::one(), g, 1, o as isize, val(*x), f as isize, 1, T::zero(), &mut dw, f as isize, 1);
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    let mut db = vec![T::zero(); o];
                    for row in g.chunks_exact(o) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    accumulate(grads, b, db);
                }
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / T::from_usize(n).expect("count fits");
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &l) in labels.iter().enumerate() {
                    d[row * k + l] -= scale;
                }
                accumulate(grads, *logits, d);
            }
            Op::Dot { x, weights } => {
                accumulate(grads, *x, weights.iter().map(|&w| w * g[0]).collect());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_uniform_loss() {
        let mut t = Tape::<f64>::new();
        let x = t.input(DenseTensor::new(vec![2], vec![-1.0, 2.0]).unwrap(), false);
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);
        let logits = t.input(DenseTensor::zeros(&[3, 4]).unwrap(), true);
        let loss = t.softmax_cross_entropy(logits, &[0, 1, 3]).unwrap();
        assert!((t.value(loss).data()[0] - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut t = Tape::<f64>::new();
        let x = DenseTensor::from_fn(&[2, 3, 2, 2], |k| k as f64).unwrap();
        let xv = t.input(x.clone(), false);
        let w = t.input(DenseTensor::identity(3).unwrap().reshape(&[3, 3, 1, 1]).unwrap(), false);
        let y = t.conv2d("id", xv, w, None, ConvSpec::new(3, 3, 1)).unwrap();
        assert_eq!(t.value(y), &x);
    }

    #[test]
    fn single_pixel_gradient_is_the_patch() {
        let mut t = Tape::<f64>::new();
        let x = t.input(DenseTensor::from_fn(&[1, 2, 2, 2], |k| k as f64 + 1.0).unwrap(), false);
        let w = t.input(DenseTensor::zeros(&[1, 2, 2, 2]).unwrap(), true);
        let y = t.conv2d("c", x, w, None, ConvSpec::new(2, 1, 2)).unwrap();
        let loss = t.dot(y, &[1.0]).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), t.value(x).data());
    }

    #[test]
    fn residual_add_passes_gradient_unchanged() {
        let mut t = Tape::<f64>::new();
        let a = t.input(DenseTensor::zeros(&[3]).unwrap(), true);
        let b = t.input(DenseTensor::zeros(&[3]).unwrap(), true);
        let s = t.add("add", a, b).unwrap();
        let loss = t.dot(s, &[1.0, -2.0, 3.0]).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0, -2.0, 3.0]);
        assert_eq!(t.grad(b).unwrap(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn backward_without_forward_is_rejected() {
        let mut other = Tape::<f64>::new();
        let v = other.input(DenseTensor::scalar(1.0), true);
        let mut empty = Tape::<f64>::new();
        assert!(matches!(empty.backward(v), Err(Error::NoForward(_))));
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let mut t = Tape::<f64>::new();
        let x = t.input(DenseTensor::zeros(&[1, 3, 4, 4]).unwrap(), false);
        let w = t.input(DenseTensor::zeros(&[2, 4, 3, 3]).unwrap(), true);
        let err = t.conv2d("block1.conv", x, w, None, ConvSpec::new(4, 2, 3)).unwrap_err();
        assert!(err.to_string().contains("block1.conv"), "{err}");
    }
}
