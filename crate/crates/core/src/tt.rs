//! Tensor-Train format and the TT-SVD factorization.
//!
//! A `d`-dimensional tensor is stored as cores `G_k` of dims
//! `(r_{k-1}, n_k, r_k)` with `r_0 = r_d = 1`; element `(i_1, …, i_d)` is the
//! chain product `G_1[i_1] · G_2[i_2] ⋯ G_d[i_d]`.

use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::scalar::Real;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TTFormat {
    cores: Vec<DenseTensor<f64>>,
    ranks: Vec<usize>,
}

impl TTFormat {
    pub fn new(cores: Vec<DenseTensor<f64>>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::Ranks("a TT representation needs at least one core".into()));
        }
        let mut ranks = Vec::with_capacity(cores.len() + 1);
        for (k, core) in cores.iter().enumerate() {
            let &[left, _, right] = core.dims() else {
                return Err(Error::Ranks(format!(
                    "core {k} must be 3-dimensional, got dims {:?}",
                    core.dims()
                )));
            };
            match ranks.last() {
                None if left != 1 => {
                    return Err(Error::Ranks(format!("first core has left rank {left}, expected 1")))
                }
                None => ranks.push(left),
                Some(&prev) if prev != left => {
                    return Err(Error::Ranks(format!(
                        "core {k} has left rank {left} but core {} has right rank {prev}",
                        k - 1
                    )))
                }
                Some(_) => {}
            }
            ranks.push(right);
        }
        if *ranks.last().unwrap() != 1 {
            return Err(Error::Ranks(format!(
                "last core has right rank {}, expected 1",
                ranks.last().unwrap()
            )));
        }
        Ok(Self { cores, ranks })
    }

    pub fn cores(&self) -> &[DenseTensor<f64>] {
        &self.cores
    }

    pub fn into_cores(self) -> Vec<DenseTensor<f64>> {
        self.cores
    }

    /// `(1, r_1, …, r_{d-1}, 1)`.
    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn order(&self) -> usize {
        self.cores.len()
    }

    /// Mode sizes `(n_1, …, n_d)`.
    pub fn dims(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.dims()[1]).collect()
    }
}

/// Outcome of TT-SVD together with the norm of what was truncated away.
#[derive(Debug, Clone)]
pub struct TtSvdOutput {
    pub tt: TTFormat,
    /// `sqrt(Σ discarded σ²)` over all unfoldings. Because the left cores are
    /// orthonormal this equals the Frobenius reconstruction error.
    pub truncation_error: f64,
    pub input_norm: f64,
}

/// TT-SVD with per-unfolding rank caps and/or a relative accuracy target.
///
/// With `eps`, every unfolding discards at most `eps·‖A‖_F / sqrt(d−1)` in
/// Frobenius norm, so the total relative error stays below `eps`. When both
/// criteria are given the smaller rank wins.
pub fn tt_svd(tensor: &DenseTensor<f64>, max_ranks: Option<&[usize]>, eps: Option<f64>) -> Result<TTFormat> {
    tt_svd_with_error(tensor, max_ranks, eps).map(|out| out.tt)
}

pub fn tt_svd_with_error(
    tensor: &DenseTensor<f64>,
    max_ranks: Option<&[usize]>,
    eps: Option<f64>,
) -> Result<TtSvdOutput> {
    let dims = tensor.dims().to_vec();
    let d = dims.len();
    if d < 2 {
        return Err(Error::shape(format!("TT-SVD needs at least 2 dims, got {dims:?}")));
    }
    if max_ranks.is_none() && eps.is_none() {
        return Err(Error::Ranks("provide max_ranks, eps, or both".into()));
    }
    if let Some(r) = max_ranks {
        if r.len() != d - 1 {
            return Err(Error::Ranks(format!(
                "expected {} max ranks for a {d}-dimensional tensor, got {}",
                d - 1,
                r.len()
            )));
        }
        if r.contains(&0) {
            return Err(Error::Ranks("max ranks must be at least 1".into()));
        }
    }
    if let Some(e) = eps {
        if !(e >= 0.0 && e.is_finite()) {
            return Err(Error::Ranks(format!("eps must be a finite non-negative number, got {e}")));
        }
    }
    if !tensor.is_finite() {
        return Err(Error::NonFinite("TT-SVD input".into()));
    }

    let norm = tensor.frobenius_norm();
    if norm == 0.0 {
        let cores = dims
            .iter()
            .map(|&n| DenseTensor::zeros(&[1, n, 1]))
            .collect::<Result<Vec<_>>>()?;
        return Ok(TtSvdOutput {
            tt: TTFormat::new(cores)?,
            truncation_error: 0.0,
            input_norm: 0.0,
        });
    }
    let delta = eps.map(|e| e * norm / ((d - 1) as f64).sqrt());

    let mut cores = Vec::with_capacity(d);
    let mut discarded_sq = 0.0;
    let mut remainder: Vec<f64> = tensor.data().to_vec();
    let mut left = 1usize;
    for k in 0..d - 1 {
        let rows = left * dims[k];
        let cols = remainder.len() / rows;
        let unfolding = DenseTensor::new(vec![rows, cols], remainder)?;
        let dec = svd(&unfolding)?;
        let s = &dec.singular_values;
        let full = s.len();

        let mut rank = full;
        if let Some(delta) = delta {
            // smallest r with tail energy ≤ δ²
            let mut tail = 0.0;
            let mut r = full;
            while r > 1 {
                let next = tail + s[r - 1] * s[r - 1];
                if next > delta * delta {
                    break;
                }
                tail = next;
                r -= 1;
            }
            rank = rank.min(r);
        }
        if let Some(caps) = max_ranks {
            rank = rank.min(caps[k]);
        }
        rank = rank.max(1);
        discarded_sq += s[rank..].iter().map(|x| x * x).sum::<f64>();

        let u = dec.u.data();
        let core = DenseTensor::from_fn(&[left, dims[k], rank], |f| {
            let (row, t) = (f / rank, f % rank);
            u[row * full + t]
        })?;
        cores.push(core);

        let v = dec.v.data();
        remainder = (0..rank * cols)
            .map(|f| {
                let (t, j) = (f / cols, f % cols);
                s[t] * v[j * full + t]
            })
            .collect();
        left = rank;
    }
    cores.push(DenseTensor::new(vec![left, dims[d - 1], 1], remainder)?);

    Ok(TtSvdOutput {
        tt: TTFormat::new(cores)?,
        truncation_error: discarded_sq.sqrt(),
        input_norm: norm,
    })
}

/// Materializes the full tensor by contracting the cores left to right.
pub fn tt_reconstruct(tt: &TTFormat) -> DenseTensor<f64> {
    let mut acc: Vec<f64> = vec![1.0];
    let mut rows = 1usize;
    let mut rank = 1usize;
    for core in tt.cores() {
        let (n, next) = (core.dims()[1], core.dims()[2]);
        let mut out = vec![0.0; rows * n * next];
        let cols = n * next;
        f64::gemm(rows, rank, cols, 1.0, &acc, rank as isize, 1, core.data(), cols as isize, 1, 0.0, &mut out, cols as isize, 1);
        acc = out;
        rows *= n;
        rank = next;
    }
    DenseTensor::new(tt.dims(), acc).expect("core dims define the output")
}

/// One element of the represented tensor, evaluated as a vector-matrix chain.
pub fn tt_element(tt: &TTFormat, index: &[usize]) -> Result<f64> {
    let dims = tt.dims();
    if index.len() != dims.len() || index.iter().zip(&dims).any(|(i, n)| i >= n) {
        return Err(Error::IndexOutOfRange {
            index: index.to_vec(),
            dims,
        });
    }
    let mut row = vec![1.0];
    for (core, &i) in tt.cores().iter().zip(index) {
        let (left, n, right) = (core.dims()[0], core.dims()[1], core.dims()[2]);
        let data = core.data();
        let mut next = vec![0.0; right];
        for (a, &x) in row.iter().enumerate().take(left) {
            let base = (a * n + i) * right;
            for (b, out) in next.iter_mut().enumerate() {
                *out += x * data[base + b];
            }
        }
        row = next;
    }
    Ok(row[0])
}

/// `Σ_k r_{k-1}·n_k·r_k`.
pub fn tt_param_count(tt: &TTFormat) -> usize {
    tt.cores().iter().map(|c| c.len()).sum()
}

fn check_factorization(total: usize, factors: &[usize], what: &str) -> Result<()> {
    if factors.is_empty() || factors.contains(&0) {
        return Err(Error::shape(format!("{what} factors {factors:?} must be non-empty and positive")));
    }
    let prod: usize = factors.iter().product();
    if prod != total {
        return Err(Error::shape(format!(
            "{what} factors {factors:?} multiply to {prod}, expected {total}"
        )));
    }
    Ok(())
}

/// Regroups a matrix `W` of dims `(Π m_k, Π n_k)` into the TT-matrix layout
/// `(m_1, n_1, m_2, n_2, …, m_d, n_d)`, pairing row index `i_k` with column index `j_k`.
///
/// The input may also be given already split as `(m_1, …, m_d, n_1, …, n_d)`.
pub fn pair_indices(tensor: &DenseTensor<f64>, row_dims: &[usize], col_dims: &[usize]) -> Result<DenseTensor<f64>> {
    if row_dims.len() != col_dims.len() {
        return Err(Error::shape(format!(
            "row factors {row_dims:?} and column factors {col_dims:?} must have the same length"
        )));
    }
    let split: Vec<usize> = row_dims.iter().chain(col_dims).copied().collect();
    let rows: usize = row_dims.iter().product();
    let cols: usize = col_dims.iter().product();
    let as_matrix = tensor.dims() == [rows, cols];
    if !(as_matrix || tensor.dims() == split.as_slice()) {
        return Err(Error::shape(format!(
            "tensor dims {:?} match neither ({rows}, {cols}) nor {split:?}",
            tensor.dims()
        )));
    }
    check_factorization(rows, row_dims, "row")?;
    check_factorization(cols, col_dims, "column")?;
    let d = row_dims.len();
    let axes: Vec<usize> = (0..d).flat_map(|k| [k, d + k]).collect();
    tensor.clone().reshape(&split)?.permute(&axes)
}

/// Inverse of [`pair_indices`]: returns the `(Π m_k, Π n_k)` matrix.
pub fn unpair_indices(paired: &DenseTensor<f64>, row_dims: &[usize], col_dims: &[usize]) -> Result<DenseTensor<f64>> {
    if row_dims.len() != col_dims.len() {
        return Err(Error::shape("row and column factor lists differ in length"));
    }
    let d = row_dims.len();
    let interleaved: Vec<usize> = (0..d).flat_map(|k| [row_dims[k], col_dims[k]]).collect();
    if paired.dims() != interleaved.as_slice() {
        return Err(Error::shape(format!(
            "paired tensor dims {:?} do not match {interleaved:?}",
            paired.dims()
        )));
    }
    let axes: Vec<usize> = (0..d).map(|k| 2 * k).chain((0..d).map(|k| 2 * k + 1)).collect();
    let rows = row_dims.iter().product();
    let cols = col_dims.iter().product();
    paired.permute(&axes)?.reshape(&[rows, cols])
}
