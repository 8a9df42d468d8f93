//! Hardware-friendly Tensor-Train convolution.
//!
//! An `l×l` kernel `K[s, c, i, j]` (output `s`, input `c`) is viewed as a
//! 3-dimensional tensor with modes `(i·l + j, c, s)` and decomposed with TT-SVD
//! into cores `G1 (l, l, R1)`, `G2 (R1, C, R2)` and `G3 (R2, S)`:
//!
//! ```text
//! K[s, c, i, j] = Σ_{r1, r2} G1[i, j, r1] · G2[r1, c, r2] · G3[r2, s]
//! ```
//!
//! which executes as three plain convolutions with no data permutation:
//! a pointwise `C → R1·R2`, an `l×l` group convolution `R1·R2 → R2` with
//! `R2` groups sharing one `(R1, l, l)` kernel, and a pointwise `R2 → S`.
//! `1×1` kernels use a rank-`R` matrix factorization instead.

use crate::conv::{reference_conv2d, ConvSpec, MacCounter};
use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::scalar::Real;
use crate::tensor::DenseTensor;
use crate::tt::{tt_svd_with_error, TTFormat};

/// Channel-core rank of spatial kernels, and the rank of pointwise kernels.
pub const MATRIX_ENGINE_RANK: usize = 16;
/// Layers with fewer channels than this (on either side) are left dense.
pub const MIN_CHANNELS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum RankChoice {
    Spatial { r1: usize, r2: usize },
    Pointwise { r: usize },
}

impl RankChoice {
    pub fn spatial(r1: usize, r2: usize) -> Result<Self> {
        if r1 == 0 || r2 == 0 {
            return Err(Error::Ranks(format!("spatial ranks must be positive, got ({r1}, {r2})")));
        }
        Ok(RankChoice::Spatial { r1, r2 })
    }

    pub fn pointwise(r: usize) -> Result<Self> {
        if r == 0 {
            return Err(Error::Ranks("pointwise rank must be positive".into()));
        }
        Ok(RankChoice::Pointwise { r })
    }

    fn check_applicable(&self, spec: &ConvSpec) -> Result<()> {
        spec.validate()?;
        if spec.groups != 1 {
            return Err(Error::Conv("only ungrouped convolutions can be factorized".into()));
        }
        match (self, spec.kernel) {
            (RankChoice::Spatial { .. }, 1) => Err(Error::Ranks("spatial ranks given for a 1x1 kernel".into())),
            (RankChoice::Pointwise { .. }, l) if l > 1 => {
                Err(Error::Ranks(format!("pointwise rank given for a {l}x{l} kernel")))
            }
            _ => Ok(()),
        }
    }
}

/// Rank heuristic: `R2 = 16, R1 = round(C/64)` (at least 1) for `l ≥ 2`,
/// `R = 16` for `1×1`; `None` when `min(C, S) < 128` or the conv is grouped.
pub fn select_ranks(spec: &ConvSpec) -> Option<RankChoice> {
    if spec.groups != 1 || spec.in_channels.min(spec.out_channels) < MIN_CHANNELS {
        return None;
    }
    if spec.kernel >= 2 {
        // R1 = C / (4·R2), rounded half up
        let denom = 4 * MATRIX_ENGINE_RANK;
        let r1 = ((spec.in_channels + denom / 2) / denom).max(1);
        Some(RankChoice::Spatial {
            r1,
            r2: MATRIX_ENGINE_RANK,
        })
    } else {
        Some(RankChoice::Pointwise { r: MATRIX_ENGINE_RANK })
    }
}

/// Index of the stage-1 output channel carrying the pair `(r1, r2)`. Group
/// `r2` of the shared-kernel stage reads the block `[r2·R1, (r2+1)·R1)`.
pub fn stage1_channel(r1: usize, r2: usize, rank1: usize) -> usize {
    r2 * rank1 + r1
}

/// Inverse of [`stage1_channel`].
pub fn stage1_pair(channel: usize, rank1: usize) -> (usize, usize) {
    (channel % rank1, channel / rank1)
}

fn check_bias(bias: &Option<Vec<f64>>, spec: &ConvSpec) -> Result<()> {
    match bias {
        Some(b) if b.len() != spec.out_channels => Err(Error::shape(format!(
            "bias has {} entries, expected {}",
            b.len(),
            spec.out_channels
        ))),
        _ => Ok(()),
    }
}

fn expect_dims(t: &DenseTensor<f64>, dims: &[usize], what: &str) -> Result<()> {
    if t.dims() != dims {
        return Err(Error::shape(format!("{what} has dims {:?}, expected {dims:?}", t.dims())));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TTConvFactors {
    /// `(l, l, R1)`
    pub g1: DenseTensor<f64>,
    /// `(R1, C, R2)`
    pub g2: DenseTensor<f64>,
    /// `(R2, S)`
    pub g3: DenseTensor<f64>,
    pub spec: ConvSpec,
    pub bias: Option<Vec<f64>>,
}

impl TTConvFactors {
    pub fn new(
        g1: DenseTensor<f64>,
        g2: DenseTensor<f64>,
        g3: DenseTensor<f64>,
        spec: ConvSpec,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        let f = Self { g1, g2, g3, spec, bias };
        f.validate()?;
        Ok(f)
    }

    pub fn ranks(&self) -> (usize, usize) {
        (self.g2.dims()[0], self.g2.dims()[2])
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let l = self.spec.kernel;
        let (r1, r2) = match self.g2.dims() {
            &[r1, _, r2] => (r1, r2),
            d => return Err(Error::shape(format!("G2 must be 3-dimensional, got {d:?}"))),
        };
        expect_dims(&self.g1, &[l, l, r1], "G1")?;
        expect_dims(&self.g2, &[r1, self.spec.in_channels, r2], "G2")?;
        expect_dims(&self.g3, &[r2, self.spec.out_channels], "G3")?;
        check_bias(&self.bias, &self.spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    /// `(C, R)`
    pub g1: DenseTensor<f64>,
    /// `(R, S)`
    pub g2: DenseTensor<f64>,
    pub spec: ConvSpec,
    pub bias: Option<Vec<f64>>,
}

impl LowRankFactors {
    pub fn new(g1: DenseTensor<f64>, g2: DenseTensor<f64>, spec: ConvSpec, bias: Option<Vec<f64>>) -> Result<Self> {
        let f = Self { g1, g2, spec, bias };
        f.validate()?;
        Ok(f)
    }

    pub fn rank(&self) -> usize {
        self.g2.dims()[0]
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.spec.kernel != 1 {
            return Err(Error::Conv("low-rank factors describe 1x1 kernels only".into()));
        }
        let r = self.g1.dims().get(1).copied().unwrap_or(0);
        expect_dims(&self.g1, &[self.spec.in_channels, r], "G1")?;
        expect_dims(&self.g2, &[r, self.spec.out_channels], "G2")?;
        check_bias(&self.bias, &self.spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelFactors {
    Tt(TTConvFactors),
    LowRank(LowRankFactors),
}

impl KernelFactors {
    pub fn spec(&self) -> &ConvSpec {
        match self {
            KernelFactors::Tt(f) => &f.spec,
            KernelFactors::LowRank(f) => &f.spec,
        }
    }

    pub fn ranks(&self) -> RankChoice {
        match self {
            KernelFactors::Tt(f) => {
                let (r1, r2) = f.ranks();
                RankChoice::Spatial { r1, r2 }
            }
            KernelFactors::LowRank(f) => RankChoice::Pointwise { r: f.rank() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KernelFactors::Tt(f) => f.validate(),
            KernelFactors::LowRank(f) => f.validate(),
        }
    }
}

/// Factorization plus the Frobenius norm of what the truncation discarded.
#[derive(Debug, Clone)]
pub struct Factorization {
    pub factors: KernelFactors,
    pub truncation_error: f64,
}

/// Decomposes an `(S, C, l, l)` kernel at the requested ranks. Ranks above the
/// rank of the corresponding unfolding are capped; the factors report the
/// ranks actually used.
pub fn factorize_kernel(
    weight: &DenseTensor<f64>,
    bias: Option<&[f64]>,
    spec: &ConvSpec,
    ranks: RankChoice,
) -> Result<Factorization> {
    ranks.check_applicable(spec)?;
    let (s, c, l) = (spec.out_channels, spec.in_channels, spec.kernel);
    if weight.dims() != [s, c, l, l] {
        return Err(Error::shape(format!(
            "weight dims {:?} do not match ({s}, {c}, {l}, {l})",
            weight.dims()
        )));
    }
    let bias = bias.map(<[f64]>::to_vec);
    match ranks {
        RankChoice::Spatial { r1, r2 } => {
            // (S, C, l²) -> (l², C, S)
            let modes = weight.clone().reshape(&[s, c, l * l])?.permute(&[2, 1, 0])?;
            let out = tt_svd_with_error(&modes, Some(&[r1, r2]), None)?;
            let mut cores = out.tt.into_cores().into_iter();
            let (a, b, g) = (cores.next().unwrap(), cores.next().unwrap(), cores.next().unwrap());
            let r1 = a.dims()[2];
            let r2 = g.dims()[0];
            let factors = TTConvFactors::new(a.reshape(&[l, l, r1])?, b, g.reshape(&[r2, s])?, *spec, bias)?;
            Ok(Factorization {
                factors: KernelFactors::Tt(factors),
                truncation_error: out.truncation_error,
            })
        }
        RankChoice::Pointwise { r } => {
            let m = weight.clone().reshape(&[s, c])?.transpose()?; // (C, S)
            let dec = svd(&m)?;
            let k = dec.rank();
            let r = r.min(k);
            let root: Vec<f64> = dec.singular_values.iter().map(|x| x.sqrt()).collect();
            let g1 = DenseTensor::from_fn(&[c, r], |f| dec.u.data()[(f / r) * k + f % r] * root[f % r])?;
            let g2 = DenseTensor::from_fn(&[r, s], |f| root[f / s] * dec.v.data()[(f % s) * k + f / s])?;
            let truncation_error = dec.singular_values[r..].iter().map(|x| x * x).sum::<f64>().sqrt();
            Ok(Factorization {
                factors: KernelFactors::LowRank(LowRankFactors::new(g1, g2, *spec, bias)?),
                truncation_error,
            })
        }
    }
}

/// Dense `(S, C, l, l)` kernel represented by the factors.
pub fn reconstruct_kernel(factors: &KernelFactors) -> Result<DenseTensor<f64>> {
    factors.validate()?;
    match factors {
        KernelFactors::Tt(f) => {
            let (s, c, l) = (f.spec.out_channels, f.spec.in_channels, f.spec.kernel);
            let (r1, r2) = f.ranks();
            let tt = TTFormat::new(vec![
                f.g1.clone().reshape(&[1, l * l, r1])?,
                f.g2.clone(),
                f.g3.clone().reshape(&[r2, s, 1])?,
            ])?;
            // (l², C, S) -> (S, C, l, l)
            crate::tt::tt_reconstruct(&tt).permute(&[2, 1, 0])?.reshape(&[s, c, l, l])
        }
        KernelFactors::LowRank(f) => {
            let (s, c) = (f.spec.out_channels, f.spec.in_channels);
            f.g1.matmul(&f.g2)?.transpose()?.reshape(&[s, c, 1, 1])
        }
    }
}

/// `1×1 (C → R1·R2)`, shared-kernel group `l×l (R1·R2 → R2)`, `1×1 (R2 → S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreeConvPlan {
    pub original: ConvSpec,
    pub r1: usize,
    pub r2: usize,
    pub stage1: ConvSpec,
    /// `(R1·R2, C, 1, 1)`, row `r2·R1 + r1`.
    pub w1: DenseTensor<f64>,
    pub stage2: ConvSpec,
    /// One `(R1, l, l)` kernel shared by all `R2` groups.
    pub k2: DenseTensor<f64>,
    pub stage3: ConvSpec,
    /// `(S, R2, 1, 1)`
    pub w3: DenseTensor<f64>,
    pub bias: Option<Vec<f64>>,
}

/// `1×1 (C → R)` carrying the stride and padding, then `1×1 (R → S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoConvPlan {
    pub original: ConvSpec,
    pub r: usize,
    pub stage1: ConvSpec,
    /// `(R, C, 1, 1)`
    pub w1: DenseTensor<f64>,
    pub stage2: ConvSpec,
    /// `(S, R, 1, 1)`
    pub w2: DenseTensor<f64>,
    pub bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvPlan {
    Three(ThreeConvPlan),
    Two(TwoConvPlan),
}

/// One executable stage of a plan.
#[derive(Debug, Clone, Copy)]
pub struct Stage<'a> {
    pub spec: ConvSpec,
    pub weight: &'a DenseTensor<f64>,
    pub bias: Option<&'a [f64]>,
}

impl ConvPlan {
    pub fn original(&self) -> &ConvSpec {
        match self {
            ConvPlan::Three(p) => &p.original,
            ConvPlan::Two(p) => &p.original,
        }
    }

    pub fn ranks(&self) -> RankChoice {
        match self {
            ConvPlan::Three(p) => RankChoice::Spatial { r1: p.r1, r2: p.r2 },
            ConvPlan::Two(p) => RankChoice::Pointwise { r: p.r },
        }
    }

    pub fn stages(&self) -> Vec<Stage<'_>> {
        match self {
            ConvPlan::Three(p) => vec![
                Stage {
                    spec: p.stage1,
                    weight: &p.w1,
                    bias: None,
                },
                Stage {
                    spec: p.stage2,
                    weight: &p.k2,
                    bias: None,
                },
                Stage {
                    spec: p.stage3,
                    weight: &p.w3,
                    bias: p.bias.as_deref(),
                },
            ],
            ConvPlan::Two(p) => vec![
                Stage {
                    spec: p.stage1,
                    weight: &p.w1,
                    bias: None,
                },
                Stage {
                    spec: p.stage2,
                    weight: &p.w2,
                    bias: p.bias.as_deref(),
                },
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.stages().iter().map(|s| s.spec.param_count()).sum()
    }

    /// Runs the stages in sequence with the reference convolution.
    pub fn apply<T: Real>(&self, input: &DenseTensor<T>, counter: &mut MacCounter) -> Result<DenseTensor<T>> {
        let mut x = input.clone();
        for stage in self.stages() {
            let w: DenseTensor<T> = stage.weight.cast();
            let b: Option<Vec<T>> = stage.bias.map(|b| b.iter().map(|&v| T::from_f64_lossy(v)).collect());
            x = reference_conv2d(&x, &w, b.as_deref(), &stage.spec, counter)?;
        }
        Ok(x)
    }
}

/// Convolutions of the plan for `spec` at the given ranks, in execution order.
pub fn stage_specs(spec: &ConvSpec, ranks: RankChoice) -> Vec<ConvSpec> {
    let (c, s, l) = (spec.in_channels, spec.out_channels, spec.kernel);
    match ranks {
        RankChoice::Spatial { r1, r2 } => vec![
            ConvSpec::new(c, r1 * r2, 1),
            ConvSpec::new(r1 * r2, r2, l)
                .stride(spec.stride)
                .padding(spec.padding)
                .grouped(r2, true),
            ConvSpec::new(r2, s, 1).bias(spec.has_bias),
        ],
        RankChoice::Pointwise { r } => vec![
            ConvSpec::new(c, r, 1).stride(spec.stride).padding(spec.padding),
            ConvSpec::new(r, s, 1).bias(spec.has_bias),
        ],
    }
}

/// Turns factors into an executable plan of plain convolutions.
pub fn lower(factors: &KernelFactors) -> Result<ConvPlan> {
    factors.validate()?;
    match factors {
        KernelFactors::Tt(f) => {
            let spec = f.spec;
            let (c, s) = (spec.in_channels, spec.out_channels);
            let (r1, r2) = f.ranks();
            let mut w1 = DenseTensor::zeros(&[r1 * r2, c, 1, 1])?;
            for a in 0..r1 {
                for b in 0..r2 {
                    let row = stage1_channel(a, b, r1);
                    for ch in 0..c {
                        w1.data_mut()[row * c + ch] = f.g2.data()[(a * c + ch) * r2 + b];
                    }
                }
            }
            let k2 = f.g1.permute(&[2, 0, 1])?; // (R1, l, l)
            let w3 = f.g3.transpose()?.reshape(&[s, r2, 1, 1])?;
            let specs = stage_specs(&spec.bias(f.bias.is_some()), RankChoice::Spatial { r1, r2 });
            Ok(ConvPlan::Three(ThreeConvPlan {
                original: spec,
                r1,
                r2,
                stage1: specs[0],
                w1,
                stage2: specs[1],
                k2,
                stage3: specs[2],
                w3,
                bias: f.bias.clone(),
            }))
        }
        KernelFactors::LowRank(f) => {
            let spec = f.spec;
            let (c, s, r) = (spec.in_channels, spec.out_channels, f.rank());
            let specs = stage_specs(&spec.bias(f.bias.is_some()), RankChoice::Pointwise { r });
            Ok(ConvPlan::Two(TwoConvPlan {
                original: spec,
                r,
                stage1: specs[0],
                w1: f.g1.transpose()?.reshape(&[r, c, 1, 1])?,
                stage2: specs[1],
                w2: f.g2.transpose()?.reshape(&[s, r, 1, 1])?,
                bias: f.bias.clone(),
            }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(dims: &[usize], rng: &mut Rng) -> DenseTensor<f64> {
        DenseTensor::from_fn(dims, |_| rng.normal()).unwrap()
    }

    fn random_tt_factors(c: usize, s: usize, l: usize, r1: usize, r2: usize, spec: ConvSpec, seed: u64) -> TTConvFactors {
        let mut rng = Rng::new(seed);
        let bias = spec.has_bias.then(|| (0..s).map(|_| rng.normal()).collect());
        TTConvFactors::new(
            random(&[l, l, r1], &mut rng),
            random(&[r1, c, r2], &mut rng),
            random(&[r2, s], &mut rng),
            spec,
            bias,
        )
        .unwrap()
    }

    /// Σ_{r1,r2} G1[i,j,r1]·G2[r1,c,r2]·G3[r2,s] by explicit loops.
    fn brute_force_kernel(f: &TTConvFactors) -> DenseTensor<f64> {
        let (c, s, l) = (f.spec.in_channels, f.spec.out_channels, f.spec.kernel);
        let (r1, r2) = f.ranks();
        let mut k = DenseTensor::zeros(&[s, c, l, l]).unwrap();
        for so in 0..s {
            for ci in 0..c {
                for i in 0..l {
                    for j in 0..l {
                        let mut acc = 0.0;
                        for a in 0..r1 {
                            for b in 0..r2 {
                                acc += f.g1.get(&[i, j, a]).unwrap()
                                    * f.g2.get(&[a, ci, b]).unwrap()
                                    * f.g3.get(&[b, so]).unwrap();
                            }
                        }
                        k.set(&[so, ci, i, j], acc).unwrap();
                    }
                }
            }
        }
        k
    }

    #[test]
    fn heuristic_examples() {
        assert_eq!(
            select_ranks(&ConvSpec::new(256, 256, 3)),
            Some(RankChoice::Spatial { r1: 4, r2: 16 })
        );
        assert_eq!(select_ranks(&ConvSpec::new(512, 512, 1)), Some(RankChoice::Pointwise { r: 16 }));
        assert_eq!(select_ranks(&ConvSpec::new(64, 64, 3)), None);
        assert_eq!(select_ranks(&ConvSpec::new(64, 256, 3)), None);
        assert_eq!(
            select_ranks(&ConvSpec::new(128, 128, 3)),
            Some(RankChoice::Spatial { r1: 2, r2: 16 })
        );
        // 160/64 = 2.5 rounds up
        assert_eq!(
            select_ranks(&ConvSpec::new(160, 128, 3)),
            Some(RankChoice::Spatial { r1: 3, r2: 16 })
        );
    }

    #[test]
    fn unit_cores_give_ones() {
        let spec = ConvSpec::new(3, 2, 2);
        let f = TTConvFactors::new(
            DenseTensor::filled(&[2, 2, 1], 1.0).unwrap(),
            DenseTensor::filled(&[1, 3, 1], 1.0).unwrap(),
            DenseTensor::filled(&[1, 2], 1.0).unwrap(),
            spec,
            None,
        )
        .unwrap();
        let k = reconstruct_kernel(&KernelFactors::Tt(f)).unwrap();
        assert_eq!(k.dims(), &[2, 3, 2, 2]);
        assert!(k.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn reconstruction_matches_loop_oracle() {
        let spec = ConvSpec::new(5, 7, 3);
        let f = random_tt_factors(5, 7, 3, 2, 4, spec, 3);
        let k = reconstruct_kernel(&KernelFactors::Tt(f.clone())).unwrap();
        assert!(k.max_abs_diff(&brute_force_kernel(&f)).unwrap() <= 1e-13);
    }

    #[test]
    fn pointwise_reconstruction_is_matrix_product() {
        let mut rng = Rng::new(4);
        let spec = ConvSpec::new(6, 5, 1);
        let f = LowRankFactors::new(random(&[6, 3], &mut rng), random(&[3, 5], &mut rng), spec, None).unwrap();
        let k = reconstruct_kernel(&KernelFactors::LowRank(f.clone())).unwrap();
        let m = f.g1.matmul(&f.g2).unwrap();
        for s in 0..5 {
            for c in 0..6 {
                assert!((k.get(&[s, c, 0, 0]).unwrap() - m.get(&[c, s]).unwrap()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn synthesize_then_recover() {
        let spec = ConvSpec::new(6, 8, 3).padding(1);
        let f = random_tt_factors(6, 8, 3, 2, 3, spec, 9);
        let k = reconstruct_kernel(&KernelFactors::Tt(f)).unwrap();
        let back = factorize_kernel(&k, None, &spec, RankChoice::Spatial { r1: 2, r2: 3 }).unwrap();
        let k2 = reconstruct_kernel(&back.factors).unwrap();
        assert!(k2.rel_error(&k).unwrap() <= 1e-10);
    }

    #[test]
    fn zero_weight_gives_zero_cores() {
        let spec = ConvSpec::new(4, 4, 3);
        let w = DenseTensor::zeros(&[4, 4, 3, 3]).unwrap();
        let f = factorize_kernel(&w, None, &spec, RankChoice::Spatial { r1: 2, r2: 2 }).unwrap();
        let KernelFactors::Tt(t) = &f.factors else { panic!() };
        assert!(t.g1.data().iter().chain(t.g2.data()).chain(t.g3.data()).all(|&x| x == 0.0));
        let pw = ConvSpec::new(4, 4, 1);
        let f = factorize_kernel(&DenseTensor::zeros(&[4, 4, 1, 1]).unwrap(), None, &pw, RankChoice::Pointwise { r: 2 })
            .unwrap();
        let KernelFactors::LowRank(t) = &f.factors else { panic!() };
        assert!(t.g1.data().iter().chain(t.g2.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn ranks_are_capped() {
        let spec = ConvSpec::new(3, 4, 2);
        let mut rng = Rng::new(1);
        let w = random(&[4, 3, 2, 2], &mut rng);
        let f = factorize_kernel(&w, None, &spec, RankChoice::Spatial { r1: 50, r2: 50 }).unwrap();
        // first unfolding 4 x 12, second (4·3) x 4
        assert_eq!(f.factors.ranks(), RankChoice::Spatial { r1: 4, r2: 4 });
        assert!(f.truncation_error < 1e-10);
    }

    #[test]
    fn mismatched_ranks_are_rejected() {
        let w = DenseTensor::zeros(&[4, 4, 1, 1]).unwrap();
        assert!(factorize_kernel(&w, None, &ConvSpec::new(4, 4, 1), RankChoice::Spatial { r1: 1, r2: 1 }).is_err());
        let w3 = DenseTensor::zeros(&[4, 4, 3, 3]).unwrap();
        assert!(factorize_kernel(&w3, None, &ConvSpec::new(4, 4, 3), RankChoice::Pointwise { r: 1 }).is_err());
        assert!(factorize_kernel(&w3, None, &ConvSpec::new(4, 5, 3), RankChoice::Spatial { r1: 1, r2: 1 }).is_err());
    }

    #[test]
    fn corrupted_core_shape_is_detected() {
        let spec = ConvSpec::new(5, 7, 3);
        let mut f = random_tt_factors(5, 7, 3, 2, 4, spec, 3);
        f.g3 = DenseTensor::zeros(&[4, 6]).unwrap();
        assert!(f.validate().is_err());
        assert!(lower(&KernelFactors::Tt(f)).is_err());
    }

    #[test]
    fn channel_layout_is_a_bijection() {
        let (r1, r2) = (3, 5);
        let mut seen = vec![false; r1 * r2];
        for a in 0..r1 {
            for b in 0..r2 {
                let ch = stage1_channel(a, b, r1);
                assert!(!seen[ch]);
                seen[ch] = true;
                assert_eq!(stage1_pair(ch, r1), (a, b));
                assert!(ch >= b * r1 && ch < (b + 1) * r1);
            }
        }
    }

    #[test]
    fn lowering_matches_dense_convolution() {
        for (stride, padding, bias) in [(1, 1, false), (2, 1, true), (2, 0, false)] {
            let spec = ConvSpec::new(6, 5, 3).stride(stride).padding(padding).bias(bias);
            let f = KernelFactors::Tt(random_tt_factors(6, 5, 3, 2, 3, spec, 17));
            let plan = lower(&f).unwrap();
            let mut rng = Rng::new(5);
            let x = random(&[2, 6, 7, 7], &mut rng);
            let k = reconstruct_kernel(&f).unwrap();
            let b = match &f {
                KernelFactors::Tt(t) => t.bias.clone(),
                _ => None,
            };
            let dense = reference_conv2d(&x, &k, b.as_deref(), &spec, &mut MacCounter::default()).unwrap();
            let got = plan.apply(&x, &mut MacCounter::default()).unwrap();
            assert_eq!(got.dims(), dense.dims());
            assert!(got.max_abs_diff(&dense).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn pointwise_lowering_with_stride() {
        let mut rng = Rng::new(8);
        let spec = ConvSpec::new(6, 4, 1).stride(2).bias(true);
        let f = KernelFactors::LowRank(
            LowRankFactors::new(
                random(&[6, 3], &mut rng),
                random(&[3, 4], &mut rng),
                spec,
                Some(vec![0.1, 0.2, 0.3, 0.4]),
            )
            .unwrap(),
        );
        let plan = lower(&f).unwrap();
        assert_eq!(plan.stages()[0].spec.stride, 2);
        let x = random(&[1, 6, 5, 5], &mut rng);
        let dense = reference_conv2d(
            &x,
            &reconstruct_kernel(&f).unwrap(),
            Some(&[0.1, 0.2, 0.3, 0.4]),
            &spec,
            &mut MacCounter::default(),
        )
        .unwrap();
        let got = plan.apply(&x, &mut MacCounter::default()).unwrap();
        assert_eq!(got.dims(), &[1, 4, 3, 3]);
        assert!(got.max_abs_diff(&dense).unwrap() <= 1e-12);
    }

    #[test]
    fn plan_weights_follow_the_core_mapping() {
        let spec = ConvSpec::new(4, 3, 3);
        let f = random_tt_factors(4, 3, 3, 2, 3, spec, 2);
        let ConvPlan::Three(p) = lower(&KernelFactors::Tt(f.clone())).unwrap() else { panic!() };
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(
                        p.w1.get(&[b * 2 + a, c, 0, 0]).unwrap(),
                        f.g2.get(&[a, c, b]).unwrap()
                    );
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(p.k2.get(&[a, i, j]).unwrap(), f.g1.get(&[i, j, a]).unwrap());
                }
            }
        }
        for s in 0..3 {
            for b in 0..3 {
                assert_eq!(p.w3.get(&[s, b, 0, 0]).unwrap(), f.g3.get(&[b, s]).unwrap());
            }
        }
        assert_eq!(p.stage2.weight_dims(), vec![2, 3, 3]);
        assert_eq!(p.stage2.groups, 3);
    }
}
