//! Self-checks run by `ttyard verify`: lowering equivalence, TT-SVD
//! round trips, cost identities, gradients of every layer kind, mixture
//! identities and container round trips. Each check reports the measured
//! quantity next to its tolerance.

use std::fmt::Write as _;

use crate::conv::{reference_conv2d, ConvSpec, MacCounter};
use crate::cost::{cost_dense, cost_stages, cost_ttconv};
use crate::data::container::{Entry, EntryData, WeightContainer};
use crate::error::{Error, Result};
use crate::nn::gradcheck::{grad_check, GradCheckReport};
use crate::nn::params::{ParamId, ParamRole, ParamStore};
use crate::nn::tape::{Tape, Var};
use crate::nn::network::BN_EPS;
use crate::rng::Rng;
use crate::tensor::DenseTensor;
use crate::tt::{tt_reconstruct, tt_svd};
use crate::ttconv::{factorize_kernel, lower, reconstruct_kernel, KernelFactors, RankChoice};

pub const LOWERING_TOL: f64 = 1e-10;
pub const TT_ROUND_TRIP_TOL: f64 = 1e-12;
pub const GRAD_TOL: f64 = 1e-4;
pub const IDENTITY_TOL: f64 = 1e-10;
pub const FD_STEP: f64 = 1e-5;

/// Deliberate corruption for exercising the failure path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// The channel core of the factorized kernel loses a row.
    CoreShape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn measured(name: &str, value: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
            detail: detail.into(),
        }
    }

    fn from_result(name: &str, tolerance: f64, r: Result<(f64, String)>) -> Self {
        match r {
            Ok((v, d)) => Self::measured(name, v, tolerance, d),
            Err(e) => Self {
                name: name.into(),
                value: f64::INFINITY,
                tolerance,
                passed: false,
                detail: e.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{} {:<28} value={:.3e} tol={:.0e} {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.tolerance,
                c.detail
            );
        }
        out
    }
}

fn random_tensor(dims: &[usize], rng: &mut Rng) -> DenseTensor<f64> {
    DenseTensor::from_fn(dims, |_| rng.uniform_range(-1.0, 1.0)).expect("valid dims")
}

/// Max abs difference between the lowered plan and the dense convolution
/// with the reconstructed kernel, over random configurations.
pub fn lowering_equivalence(configs: usize, seed: u64, fault: Option<Fault>) -> Result<(f64, String)> {
    let mut rng = Rng::derive(seed, 1);
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let c = [128, 256][rng.below(2)];
        let s = [128, 256][rng.below(2)];
        let l = [1, 3][rng.below(2)];
        let stride = 1 + rng.below(2);
        let spec = ConvSpec::new(c, s, l).stride(stride).padding(l / 2).bias(rng.below(2) == 1);
        let ranks = if l == 1 {
            RankChoice::pointwise(1 + rng.below(16))?
        } else {
            RankChoice::spatial(1 + rng.below(4), 1 + rng.below(16))?
        };
        let weight = random_tensor(&[s, c, l, l], &mut rng);
        let bias: Option<Vec<f64>> = spec.has_bias.then(|| (0..s).map(|_| rng.normal()).collect());
        let mut factors = factorize_kernel(&weight, bias.as_deref(), &spec, ranks)?.factors;
        if fault == Some(Fault::CoreShape) {
            if let KernelFactors::Tt(f) = &mut factors {
                let d = f.g2.dims().to_vec();
                f.g2 = DenseTensor::zeros(&[d[0], d[1] - 1, d[2]])?;
            } else if let KernelFactors::LowRank(f) = &mut factors {
                let d = f.g1.dims().to_vec();
                f.g1 = DenseTensor::zeros(&[d[0] - 1, d[1]])?;
            }
        }
        let plan = lower(&factors)?;
        let kernel = reconstruct_kernel(&factors)?;
        let x = random_tensor(&[1, c, 5, 5], &mut rng);
        let mut n = MacCounter::default();
        let lowered = plan.apply(&x, &mut n)?;
        let dense = reference_conv2d(&x, &kernel, bias.as_deref(), &spec, &mut n)?;
        worst = worst.max(lowered.max_abs_diff(&dense)?);
    }
    Ok((worst, format!("{configs} configurations")))
}

/// Full-rank TT-SVD round trip, plus unit ranks on a rank-1 input.
pub fn tt_round_trip(seed: u64) -> Result<(f64, String)> {
    let mut rng = Rng::derive(seed, 2);
    let mut worst = 0.0f64;
    for _ in 0..4 {
        let dims: Vec<usize> = (0..4).map(|_| 2 + rng.below(7)).collect();
        let t = random_tensor(&dims, &mut rng);
        let tt = tt_svd(&t, Some(&[usize::MAX; 3]), None)?;
        worst = worst.max(tt_reconstruct(&tt).rel_error(&t)?);
    }
    let vecs: Vec<Vec<f64>> = [3, 4, 5].iter().map(|&n| (0..n).map(|_| rng.normal()).collect()).collect();
    let outer = DenseTensor::from_fn(&[3, 4, 5], |f| vecs[0][f / 20] * vecs[1][(f / 5) % 4] * vecs[2][f % 5])?;
    let ranks = tt_svd(&outer, None, Some(1e-10))?.ranks().to_vec();
    if ranks != [1, 1, 1, 1] {
        return Err(Error::Ranks(format!("rank-1 tensor decomposed with ranks {ranks:?}")));
    }
    Ok((worst, "4 random tensors, rank-1 probe".into()))
}

/// Number of mismatches between the closed-form costs, the stage sum and
/// the reference loop counter.
pub fn cost_identities(seed: u64) -> Result<(f64, String)> {
    let mut rng = Rng::derive(seed, 3);
    let mut mismatches = 0usize;
    let configs = 6;
    for _ in 0..configs {
        let c = 4 + rng.below(12);
        let s = 4 + rng.below(12);
        let l = [1, 3, 5][rng.below(3)];
        let spec = ConvSpec::new(c, s, l).stride(1 + rng.below(2)).padding(rng.below(l / 2 + 1));
        let ranks = if l == 1 {
            RankChoice::pointwise(1 + rng.below(4))?
        } else {
            RankChoice::spatial(1 + rng.below(3), 1 + rng.below(4))?
        };
        let (h, w) = (l + rng.below(6), l + rng.below(6));
        let closed = cost_ttconv(&spec, ranks, h, w)?;
        mismatches += usize::from(closed != cost_stages(&spec, ranks, h, w)?);
        let expected_params = match ranks {
            RankChoice::Spatial { r1, r2 } => c * r1 * r2 + r1 * l * l + r2 * s,
            RankChoice::Pointwise { r } => c * r + r * s,
        };
        mismatches += usize::from(closed.params != expected_params as u64);

        let mut counter = MacCounter::default();
        let x = random_tensor(&[1, c, h, w], &mut rng);
        let weight = random_tensor(&[s, c, l, l], &mut rng);
        let f = factorize_kernel(&weight, None, &spec, ranks)?;
        let plan = lower(&f.factors)?;
        // ranks can be capped by the factorization; compare against what was built
        let built = cost_ttconv(&spec, plan.ranks(), h, w)?;
        plan.apply(&x, &mut counter)?;
        mismatches += usize::from(built.macs != counter.0);
        let mut dense = MacCounter::default();
        reference_conv2d(&x, &weight, None, &spec, &mut dense)?;
        mismatches += usize::from(cost_dense(&spec, h, w)?.macs != dense.0);
    }
    Ok((mismatches as f64, format!("{configs} configurations")))
}

/// Builds a scalar from one layer of each kind, for [`gradient_suite`].
type Builder = Box<dyn FnMut(&mut Tape<f64>, &mut ParamStore<f64>) -> Result<Var>>;

fn add_param(store: &mut ParamStore<f64>, name: &str, dims: &[usize], rng: &mut Rng) -> ParamId {
    store
        .add(name, random_tensor(dims, rng), ParamRole::Weight)
        .expect("fresh parameter names")
}

fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed);
    let w: Vec<f64> = (0..tape.value(y).len()).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    tape.dot(y, &w)
}

fn conv_case(spec: ConvSpec, hw: usize, rng: &mut Rng) -> (ParamStore<f64>, Builder) {
    let mut store = ParamStore::new();
    let x = add_param(&mut store, "x", &[2, spec.in_channels, hw, hw], rng);
    let w = add_param(&mut store, "w", &spec.weight_dims(), rng);
    let b = spec.has_bias.then(|| add_param(&mut store, "b", &[spec.out_channels], rng));
    let build: Builder = Box::new(move |t, s| {
        let (xv, wv) = (t.param(s, x), t.param(s, w));
        let bv = b.map(|b| t.param(s, b));
        let y = t.conv2d("conv", xv, wv, bv, spec)?;
        probe(t, y, 11)
    });
    (store, build)
}

/// One finite-difference report per layer kind.
pub fn gradient_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = Rng::derive(seed, 4);
    let mut cases: Vec<(&str, ParamStore<f64>, Builder)> = Vec::new();

    let (s, b) = conv_case(ConvSpec::new(3, 4, 3).stride(2).padding(1).bias(true), 5, &mut rng);
    cases.push(("conv2d", s, b));
    let (s, b) = conv_case(ConvSpec::new(4, 6, 3).padding(1).grouped(2, false), 4, &mut rng);
    cases.push(("conv2d_grouped", s, b));
    let (s, b) = conv_case(ConvSpec::new(6, 3, 3).padding(1).grouped(3, true), 4, &mut rng);
    cases.push(("conv2d_shared_group_kernel", s, b));

    for train in [true, false] {
        let mut store = ParamStore::new();
        let x = add_param(&mut store, "x", &[3, 2, 3, 3], &mut rng);
        let g = add_param(&mut store, "gamma", &[2], &mut rng);
        let be = add_param(&mut store, "beta", &[2], &mut rng);
        let mean: Vec<f64> = (0..2).map(|_| rng.normal()).collect();
        let var: Vec<f64> = (0..2).map(|_| 0.5 + rng.uniform()).collect();
        let build: Builder = Box::new(move |t, s| {
            let (xv, gv, bv) = (t.param(s, x), t.param(s, g), t.param(s, be));
            let y = if train {
                t.batch_norm_train("bn", xv, gv, bv, BN_EPS)?.0
            } else {
                t.batch_norm_eval("bn", xv, gv, bv, &mean, &var, BN_EPS)?
            };
            probe(t, y, 12)
        });
        cases.push((if train { "batchnorm_train" } else { "batchnorm_eval" }, store, build));
    }

    let mut store = ParamStore::new();
    let x = add_param(&mut store, "x", &[2, 3, 4, 4], &mut rng);
    cases.push((
        "relu",
        store,
        Box::new(move |t, s| {
            let y = t.param(s, x);
            let y = t.relu(y);
            probe(t, y, 13)
        }),
    ));

    let mut store = ParamStore::new();
    let x = add_param(&mut store, "x", &[2, 3, 5, 5], &mut rng);
    cases.push((
        "max_pool",
        store,
        Box::new(move |t, s| {
            let y = t.param(s, x);
            let y = t.max_pool("pool", y, 3, 2, 1)?;
            probe(t, y, 14)
        }),
    ));

    let mut store = ParamStore::new();
    let x = add_param(&mut store, "x", &[2, 3, 4, 4], &mut rng);
    cases.push((
        "global_avg_pool",
        store,
        Box::new(move |t, s| {
            let y = t.param(s, x);
            let y = t.global_avg_pool("gap", y)?;
            probe(t, y, 15)
        }),
    ));

    let mut store = ParamStore::new();
    let x = add_param(&mut store, "x", &[3, 5], &mut rng);
    let w = add_param(&mut store, "w", &[4, 5], &mut rng);
    let b = add_param(&mut store, "b", &[4], &mut rng);
    cases.push((
        "linear",
        store,
        Box::new(move |t, s| {
            let (xv, wv, bv) = (t.param(s, x), t.param(s, w), t.param(s, b));
            let y = t.linear("fc", xv, wv, Some(bv))?;
            probe(t, y, 16)
        }),
    ));

    let mut store = ParamStore::new();
    let x = add_param(&mut store, "x", &[2, 3, 3, 3], &mut rng);
    let w = add_param(&mut store, "w", &[3, 3, 3, 3], &mut rng);
    cases.push((
        "residual_add",
        store,
        Box::new(move |t, s| {
            let (xv, wv) = (t.param(s, x), t.param(s, w));
            let y = t.conv2d("conv", xv, wv, None, ConvSpec::new(3, 3, 3).padding(1))?;
            let y = t.add("add", y, xv)?;
            probe(t, y, 17)
        }),
    ));

    let mut store = ParamStore::new();
    let x = add_param(&mut store, "logits", &[4, 5], &mut rng);
    cases.push((
        "softmax_cross_entropy",
        store,
        Box::new(move |t, s| {
            let y = t.param(s, x);
            t.softmax_cross_entropy(y, &[0, 3, 4, 1])
        }),
    ));

    let mut store = ParamStore::new();
    let x = add_param(&mut store, "x", &[2, 4, 4, 4], &mut rng);
    let wc = add_param(&mut store, "conv", &[4, 4, 3, 3], &mut rng);
    let w1 = add_param(&mut store, "stage1", &[4, 4, 1, 1], &mut rng);
    let w2 = add_param(&mut store, "stage2", &[2, 3, 3], &mut rng);
    let w3 = add_param(&mut store, "stage3", &[4, 2, 1, 1], &mut rng);
    let alpha = store
        .add("alpha", DenseTensor::scalar(0.3), ParamRole::Alpha)
        .expect("fresh name");
    cases.push((
        "mixed_op",
        store,
        Box::new(move |t, s| {
            let xv = t.param(s, x);
            let wv = t.param(s, wc);
            let a = t.conv2d("conv", xv, wv, None, ConvSpec::new(4, 4, 3).padding(1))?;
            let v1 = t.param(s, w1);
            let y = t.conv2d("tt.stage1", xv, v1, None, ConvSpec::new(4, 4, 1))?;
            let v2 = t.param(s, w2);
            let y = t.conv2d("tt.stage2", y, v2, None, ConvSpec::new(4, 2, 3).padding(1).grouped(2, true))?;
            let v3 = t.param(s, w3);
            let b = t.conv2d("tt.stage3", y, v3, None, ConvSpec::new(2, 4, 1))?;
            let al = t.param(s, alpha);
            let y = t.mix("mixed", al, a, b)?;
            probe(t, y, 18)
        }),
    ));

    cases.push(("resnet_block", {
        let mut store = ParamStore::new();
        for (name, dims) in [
            ("x", vec![3, 4, 4, 4]),
            ("conv1", vec![4, 4, 3, 3]),
            ("conv2", vec![4, 4, 3, 3]),
            ("fc.weight", vec![3, 4]),
            ("fc.bias", vec![3]),
        ] {
            add_param(&mut store, name, &dims, &mut rng);
        }
        for bn in ["bn1", "bn2"] {
            store.add(format!("{bn}.gamma"), DenseTensor::filled(&[4], 1.0)?, ParamRole::Weight)?;
            store.add(format!("{bn}.beta"), DenseTensor::zeros(&[4])?, ParamRole::Weight)?;
        }
        store
    }, Box::new(|t, s| {
        let p = |t: &mut Tape<f64>, s: &ParamStore<f64>, n: &str| t.param(s, s.find(n).expect("parameter exists"));
        let spec = ConvSpec::new(4, 4, 3).padding(1);
        let x = p(t, s, "x");
        let w = p(t, s, "conv1");
        let y = t.conv2d("conv1", x, w, None, spec)?;
        let (g, b) = (p(t, s, "bn1.gamma"), p(t, s, "bn1.beta"));
        let y = t.batch_norm_train("bn1", y, g, b, BN_EPS)?.0;
        let y = t.relu(y);
        let w = p(t, s, "conv2");
        let y = t.conv2d("conv2", y, w, None, spec)?;
        let (g, b) = (p(t, s, "bn2.gamma"), p(t, s, "bn2.beta"));
        let y = t.batch_norm_train("bn2", y, g, b, BN_EPS)?.0;
        let y = t.add("add", y, x)?;
        let y = t.relu(y);
        let y = t.global_avg_pool("gap", y)?;
        let (w, b) = (p(t, s, "fc.weight"), p(t, s, "fc.bias"));
        let y = t.linear("fc", y, w, Some(b))?;
        t.softmax_cross_entropy(y, &[2, 0, 1])
    })));

    let mut out = Vec::new();
    for (k, (name, mut store, build)) in cases.into_iter().enumerate() {
        // the whole block probes 10 coordinates in total, other kinds all of theirs
        let (ids, per): (Vec<ParamId>, usize) = if name == "resnet_block" {
            let all: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
            let mut picks = Vec::new();
            for j in 0..10 {
                picks.push(all[j % all.len()]);
            }
            picks.dedup();
            (picks, 2)
        } else {
            (Vec::new(), usize::MAX)
        };
        let report = grad_check(&mut store, &ids, per, FD_STEP, seed ^ k as u64, build)?;
        out.push((name.to_string(), report));
    }
    Ok(out)
}

/// `dL/dα` against `⟨upstream, conv(x) − tt(x)⟩`, as a relative error.
pub fn mixed_alpha_identity(seed: u64) -> Result<(f64, String)> {
    let mut rng = Rng::derive(seed, 5);
    let mut store = ParamStore::new();
    let x = add_param(&mut store, "x", &[2, 3, 4, 4], &mut rng);
    let w1 = add_param(&mut store, "w1", &[3, 3, 3, 3], &mut rng);
    let w2 = add_param(&mut store, "w2", &[3, 3, 1, 1], &mut rng);
    let alpha = store.add("alpha", DenseTensor::scalar(rng.uniform()), ParamRole::Alpha)?;
    let upstream: Vec<f64> = (0..2 * 3 * 16).map(|_| rng.normal()).collect();

    let mut t = Tape::new();
    let xv = t.param(&store, x);
    let (a_w, b_w) = (t.param(&store, w1), t.param(&store, w2));
    let a = t.conv2d("a", xv, a_w, None, ConvSpec::new(3, 3, 3).padding(1))?;
    let b = t.conv2d("b", xv, b_w, None, ConvSpec::new(3, 3, 1))?;
    let al = t.param(&store, alpha);
    let y = t.mix("mix", al, a, b)?;
    let loss = t.dot(y, &upstream)?;
    t.backward(loss)?;
    let got = t.grad(al).expect("alpha gradient")[0];
    let want: f64 = t
        .value(a)
        .data()
        .iter()
        .zip(t.value(b).data())
        .zip(&upstream)
        .map(|((p, q), u)| u * (p - q))
        .sum();
    Ok(((got - want).abs() / want.abs().max(1e-12), "analytic identity".into()))
}

/// `output(α)` is affine in `α`, and equals a branch at `α ∈ {0, 1}`.
pub fn mixed_linearity(seed: u64) -> Result<(f64, String)> {
    let mut rng = Rng::derive(seed, 6);
    let a = random_tensor(&[2, 3, 4, 4], &mut rng);
    let b = random_tensor(&[2, 3, 4, 4], &mut rng);
    let eval = |al: f64| -> Result<DenseTensor<f64>> {
        let mut t = Tape::new();
        let (av, bv) = (t.input(a.clone(), false), t.input(b.clone(), false));
        let alv = t.input(DenseTensor::scalar(al), false);
        let y = t.mix("mix", alv, av, bv)?;
        Ok(t.value(y).clone())
    };
    let (y0, y1) = (eval(0.0)?, eval(1.0)?);
    let mut worst = y0.max_abs_diff(&b)?.max(y1.max_abs_diff(&a)?);
    for _ in 0..3 {
        let al = rng.uniform();
        let mut affine = y1.scale(al);
        affine.add_assign(&y0.scale(1.0 - al))?;
        worst = worst.max(eval(al)?.max_abs_diff(&affine)?);
    }
    Ok((worst, "endpoints and 3 interior points".into()))
}

/// Batch norm in eval mode maps `λ·x1 + (1 − λ)·x2` to the same mix of outputs.
pub fn bn_eval_superposition(seed: u64) -> Result<(f64, String)> {
    let mut rng = Rng::derive(seed, 7);
    let mut store = ParamStore::new();
    let g = add_param(&mut store, "gamma", &[3], &mut rng);
    let be = add_param(&mut store, "beta", &[3], &mut rng);
    let mean: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
    let var: Vec<f64> = (0..3).map(|_| 0.5 + rng.uniform()).collect();
    let x1 = random_tensor(&[2, 3, 3, 3], &mut rng);
    let x2 = random_tensor(&[2, 3, 3, 3], &mut rng);
    let lam = rng.uniform();
    let run = |x: &DenseTensor<f64>| -> Result<DenseTensor<f64>> {
        let mut t = Tape::new();
        let xv = t.input(x.clone(), false);
        let (gv, bv) = (t.param(&store, g), t.param(&store, be));
        let y = t.batch_norm_eval("bn", xv, gv, bv, &mean, &var, BN_EPS)?;
        Ok(t.value(y).clone())
    };
    let mut xm = x1.scale(lam);
    xm.add_assign(&x2.scale(1.0 - lam))?;
    let mut ym = run(&x1)?.scale(lam);
    ym.add_assign(&run(&x2)?.scale(1.0 - lam))?;
    Ok((run(&xm)?.max_abs_diff(&ym)?, format!("lambda={lam:.3}")))
}

fn random_container(rng: &mut Rng) -> Result<WeightContainer> {
    let mut c = WeightContainer::new();
    for k in 0..rng.below(5) {
        let ndim = rng.below(7);
        let dims: Vec<usize> = (0..ndim).map(|_| rng.below(3)).collect();
        let n: usize = dims.iter().product();
        let data = if rng.below(2) == 0 {
            EntryData::F32((0..n).map(|_| f32::from_bits(rng.next_u64() as u32)).collect())
        } else {
            EntryData::F64((0..n).map(|_| f64::from_bits(rng.next_u64())).collect())
        };
        c.push(Entry::new(format!("layer{k}.weight"), dims, data)?)?;
    }
    Ok(c)
}

/// Randomized byte-level round trips, with NaN payloads included.
pub fn container_round_trips(count: usize, seed: u64) -> Result<(f64, String)> {
    let mut rng = Rng::derive(seed, 8);
    let mut failures = 0usize;
    for _ in 0..count {
        let c = random_container(&mut rng)?;
        let back = WeightContainer::from_bytes(&c.to_bytes())?;
        failures += usize::from(!back.bitwise_eq(&c) || back.to_bytes() != c.to_bytes());
    }
    Ok((failures as f64, format!("{count} round trips")))
}

/// A valid container, then three corruptions: bad magic, truncation and a
/// duplicated entry. Returns the diagnostics in that order.
pub fn malformed_corpus() -> Result<Vec<(String, std::result::Result<WeightContainer, String>)>> {
    let mut c = WeightContainer::new();
    c.push_tensor("a.weight", &DenseTensor::<f32>::filled(&[2, 2], 1.5)?)?;
    let good = c.to_bytes();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let truncated = good[..good.len() - 3].to_vec();
    let mut duplicate = good.clone();
    duplicate[8..12].copy_from_slice(&2u32.to_le_bytes());
    duplicate.extend_from_slice(&good[12..]);

    Ok([("bad_magic", bad_magic), ("truncated", truncated), ("duplicate_name", duplicate)]
        .into_iter()
        .map(|(n, bytes)| (n.to_string(), WeightContainer::from_bytes(&bytes).map_err(|e| e.to_string())))
        .collect())
}

fn malformed_check() -> Result<(f64, String)> {
    let corpus = malformed_corpus()?;
    let mut messages: Vec<String> = Vec::new();
    for (name, r) in &corpus {
        match r {
            Ok(_) => return Err(Error::Config(format!("{name} file was accepted"))),
            Err(m) => messages.push(m.clone()),
        }
    }
    let mut distinct = messages.clone();
    distinct.sort();
    distinct.dedup();
    Ok(((messages.len() - distinct.len()) as f64, format!("{} malformed files", corpus.len())))
}

/// Runs every check.
pub fn run_all(seed: u64, fault: Option<Fault>) -> VerifyReport {
    let mut checks = vec![
        CheckResult::from_result("lowering_equivalence", LOWERING_TOL, lowering_equivalence(6, seed, fault)),
        CheckResult::from_result("tt_svd_round_trip", TT_ROUND_TRIP_TOL, tt_round_trip(seed)),
        CheckResult::from_result("cost_identities", 0.0, cost_identities(seed)),
    ];
    match gradient_suite(seed) {
        Ok(reports) => {
            for (name, r) in reports {
                let worst = r.entries.iter().fold(("", 0.0), |w, e| {
                    if e.max_rel_error > w.1 {
                        (e.name.as_str(), e.max_rel_error)
                    } else {
                        w
                    }
                });
                let checked: usize = r.entries.iter().map(|e| e.checked).sum();
                let mut c = CheckResult::measured(
                    &format!("gradient.{name}"),
                    r.max_rel_error(),
                    GRAD_TOL,
                    format!("{checked} coordinates, worst at {}", worst.0),
                );
                c.passed &= r.passes(GRAD_TOL);
                checks.push(c);
            }
        }
        Err(e) => checks.push(CheckResult::from_result("gradient", GRAD_TOL, Err(e))),
    }
    checks.extend([
        CheckResult::from_result("mixed_alpha_gradient", IDENTITY_TOL, mixed_alpha_identity(seed)),
        CheckResult::from_result("mixed_linearity", IDENTITY_TOL, mixed_linearity(seed)),
        CheckResult::from_result("batchnorm_eval_affine", IDENTITY_TOL, bn_eval_superposition(seed)),
        CheckResult::from_result("container_round_trip", 0.0, container_round_trips(50, seed)),
        CheckResult::from_result("container_malformed", 0.0, malformed_check()),
    ]);
    VerifyReport { seed, checks }
}
