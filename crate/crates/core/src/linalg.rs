//! Dense singular value decomposition.
//!
//! One-sided Jacobi rotations on the columns of the (tall) input, preceded by a
//! Householder QR when the matrix is much taller than wide. The result is
//! deterministic for a fixed input: singular values are sorted in
//! non-increasing order and each right singular vector is signed so that its
//! largest-magnitude entry is positive.

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Thin SVD `M = U·diag(s)·Vᵀ` with `k = min(rows, cols)` components.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `rows × k`, orthonormal columns.
    pub u: DenseTensor<f64>,
    pub singular_values: Vec<f64>,
    /// `cols × k`, orthonormal columns.
    pub v: DenseTensor<f64>,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `U_r·diag(s_r)·V_rᵀ` using the leading `r` components.
    pub fn reconstruct(&self, r: usize) -> DenseTensor<f64> {
        let r = r.min(self.rank());
        let (m, n) = (self.u.rows(), self.v.rows());
        let k = self.rank();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..r {
                    acc += self.u.data()[i * k + t] * self.singular_values[t] * self.v.data()[j * k + t];
                }
                out[i * n + j] = acc;
            }
        }
        DenseTensor::new(vec![m, n], out).expect("dims are consistent")
    }
}

const MAX_SWEEPS: usize = 80;
const ROTATION_TOL: f64 = 1e-15;

pub fn svd(matrix: &DenseTensor<f64>) -> Result<Svd> {
    let (m, n) = match matrix.dims() {
        &[m, n] => (m, n),
        d => return Err(Error::shape(format!("svd expects a matrix, got dims {d:?}"))),
    };
    if !matrix.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    let data = matrix.data();
    // Columns of the tall orientation.
    let (rows, cols, transposed) = if m >= n { (m, n, false) } else { (n, m, true) };
    let columns: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            (0..rows)
                .map(|i| if transposed { data[j * n + i] } else { data[i * n + j] })
                .collect()
        })
        .collect();

    let (left, s, right) = tall_svd(columns, rows);
    let (mut u_cols, mut v_cols) = if transposed { (right, left) } else { (left, right) };

    // Sign convention on the right singular vectors.
    for (u, v) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let k = s.len();
    let u = DenseTensor::from_fn(&[m, k], |f| u_cols[f % k][f / k])?;
    let v = DenseTensor::from_fn(&[n, k], |f| v_cols[f % k][f / k])?;
    Ok(Svd {
        u,
        singular_values: s,
        v,
    })
}

/// SVD of a `rows × cols` matrix given as `cols` column vectors, `rows ≥ cols`.
/// Returns left vectors (length `rows`), singular values and right vectors (length `cols`).
fn tall_svd(columns: Vec<Vec<f64>>, rows: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    let cols = columns.len();
    if rows >= 2 * cols && cols > 0 {
        let (q, r) = householder_qr(columns, rows);
        let (ur, s, v) = jacobi(r, cols);
        // U = Q·U_r
        let u = ur
            .iter()
            .map(|uc| {
                let mut out = vec![0.0; rows];
                for (qc, &w) in q.iter().zip(uc) {
                    out.iter_mut().zip(qc).for_each(|(o, &x)| *o += w * x);
                }
                out
            })
            .collect();
        (u, s, v)
    } else {
        jacobi(columns, rows)
    }
}

/// Thin Householder QR of a tall matrix given by columns. Returns `Q` (`cols`
/// columns of length `rows`) and `R` (`cols` columns of length `cols`).
fn householder_qr(mut a: Vec<Vec<f64>>, rows: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let cols = a.len();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for k in 0..cols {
        let norm = a[k][k..].iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut v: Vec<f64> = a[k][k..].to_vec();
        if norm == 0.0 {
            reflectors.push(vec![0.0; rows - k]);
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            reflectors.push(vec![0.0; rows - k]);
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);
        for col in a.iter_mut().skip(k) {
            let dot: f64 = col[k..].iter().zip(&v).map(|(x, y)| x * y).sum();
            col[k..].iter_mut().zip(&v).for_each(|(x, y)| *x -= 2.0 * dot * y);
        }
        reflectors.push(v);
    }
    let r: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(j, col)| (0..cols).map(|i| if i <= j { col[i] } else { 0.0 }).collect())
        .collect();
    let mut q: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; rows];
            e[j] = 1.0;
            e
        })
        .collect();
    for (k, v) in reflectors.iter().enumerate().rev() {
        for col in q.iter_mut() {
            let dot: f64 = col[k..].iter().zip(v).map(|(x, y)| x * y).sum();
            if dot != 0.0 {
                col[k..].iter_mut().zip(v).for_each(|(x, y)| *x -= 2.0 * dot * y);
            }
        }
    }
    (q, r)
}

/// One-sided Jacobi SVD on columns (each of length `rows`).
fn jacobi(mut w: Vec<Vec<f64>>, rows: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    let n = w.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&w[p], &w[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        a += x * x;
                        b += y * y;
                        g += x * y;
                    }
                    (a, b, g)
                };
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= ROTATION_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = w.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let s_max = order.first().map_or(0.0, |&j| norms[j]);
    let floor = s_max * (rows.max(n) as f64) * f64::EPSILON;
    let mut u: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    for &j in &order {
        if norms[j] > floor && norms[j] > 0.0 {
            u.push(Some(w[j].iter().map(|x| x / norms[j]).collect()));
        } else {
            u.push(None);
        }
    }
    let u = complete_basis(u, rows);
    let s = order.iter().map(|&j| norms[j]).collect();
    let v = order.iter().map(|&j| v[j].clone()).collect();
    (u, s, v)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills missing left vectors (numerically null directions) with unit vectors
/// orthogonalized against the others.
fn complete_basis(u: Vec<Option<Vec<f64>>>, rows: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = u.iter().flatten().cloned().collect();
    let mut candidate = 0usize;
    u.into_iter()
        .map(|col| match col {
            Some(c) => c,
            None => loop {
                let mut e = vec![0.0; rows];
                e[candidate % rows] = 1.0;
                candidate += 1;
                for _ in 0..2 {
                    for b in &basis {
                        let dot: f64 = b.iter().zip(&e).map(|(x, y)| x * y).sum();
                        e.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
                    }
                }
                let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.5 {
                    e.iter_mut().for_each(|x| *x /= norm);
                    basis.push(e.clone());
                    break e;
                }
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn orthonormality_error(q: &DenseTensor<f64>) -> f64 {
        let g = q.transpose().unwrap().matmul(q).unwrap();
        let k = g.rows();
        let eye = DenseTensor::identity(k).unwrap();
        g.max_abs_diff(&eye).unwrap()
    }

    fn random_matrix(m: usize, n: usize, seed: u64) -> DenseTensor<f64> {
        let mut rng = Rng::new(seed);
        DenseTensor::from_fn(&[m, n], |_| rng.normal()).unwrap()
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let s = svd(&DenseTensor::identity(3).unwrap()).unwrap();
        assert_eq!(s.singular_values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_singular_values_are_sorted() {
        let d = DenseTensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let s = svd(&d).unwrap();
        assert_eq!(s.singular_values, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn random_reconstruction_and_orthonormality() {
        for (m, n, seed) in [(8, 5, 1), (5, 8, 2), (40, 6, 3), (6, 40, 4), (12, 12, 5)] {
            let a = random_matrix(m, n, seed);
            let s = svd(&a).unwrap();
            let r = s.reconstruct(s.rank());
            assert!(r.rel_error(&a).unwrap() <= 1e-12, "{m}x{n}");
            assert!(orthonormality_error(&s.u) <= 1e-10);
            assert!(orthonormality_error(&s.v) <= 1e-10);
            assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
            assert!(s.singular_values.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn rank_deficient_input_keeps_orthonormal_u() {
        // rank one, 6x4
        let a = DenseTensor::from_fn(&[6, 4], |k| ((k / 4) as f64 + 1.0) * ((k % 4) as f64 - 1.5)).unwrap();
        let s = svd(&a).unwrap();
        assert!(s.singular_values[1] < 1e-12 * s.singular_values[0]);
        assert!(orthonormality_error(&s.u) <= 1e-10);
        assert!(s.reconstruct(1).rel_error(&a).unwrap() <= 1e-13);
    }

    #[test]
    fn zero_matrix() {
        let s = svd(&DenseTensor::zeros(&[3, 2]).unwrap()).unwrap();
        assert_eq!(s.singular_values, vec![0.0, 0.0]);
        assert!(orthonormality_error(&s.u) <= 1e-12);
    }

    #[test]
    fn sign_convention_is_applied() {
        let a = random_matrix(7, 4, 9);
        let s = svd(&a).unwrap();
        for t in 0..s.rank() {
            let col: Vec<f64> = (0..4).map(|j| s.v.data()[j * s.rank() + t]).collect();
            let pivot = col.iter().copied().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
            assert!(pivot > 0.0);
        }
        let again = svd(&a).unwrap();
        assert_eq!(s.u, again.u);
        assert_eq!(s.v, again.v);
    }

    #[test]
    fn non_finite_is_rejected() {
        let a = DenseTensor::new(vec![1, 2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(svd(&a), Err(Error::NonFinite(_))));
    }
}
