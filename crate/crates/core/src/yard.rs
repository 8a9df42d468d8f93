//! Tensor Yard: every eligible convolution becomes a mixture
//! `α·Conv(x) + (1 − α)·TTConv(x)` with a trainable `α ∈ [0, 1]`. Each
//! iteration trains for `M` epochs at a constant rate, then the remaining
//! mixture with the smallest `α` is switched to its factorized branch when
//! that `α` is below one half. After `K` iterations the surviving mixtures
//! collapse to their dense branch and the model is fine-tuned.

use std::fmt::Write as _;

use serde::Serialize;

use crate::cost::{model_report, Arch};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::network::{ConvUnit, DenseConv, Model, TtConv};
use crate::nn::optim::{Schedule, TrainConfig};
use crate::nn::params::{ParamId, ParamRole};
use crate::nn::train::{evaluate, train_epoch, TrainLog};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::tensor::DenseTensor;
use crate::ttconv::{factorize_kernel, lower, select_ranks};

pub const ALPHA_INIT: f64 = 0.5;
pub const REPLACE_BELOW: f64 = 0.5;

/// A convolution and its factorized counterpart mixed by `α`.
#[derive(Debug, Clone)]
pub struct MixedOp {
    /// 1-based position among the mixed layers, in traversal order.
    pub layer_id: usize,
    pub name: String,
    pub alpha: ParamId,
    pub conv: DenseConv,
    pub tt: TtConv,
}

/// How the factorized branch starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TtInit {
    /// Factorize the dense branch's initial kernel at the heuristic ranks.
    Factorized,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct YardConfig {
    /// Epochs per iteration.
    pub m: usize,
    /// Iterations.
    pub k: usize,
    pub fine_tune_epochs: usize,
    /// Batch size, optimizer constants and the fine-tune schedule. The yard
    /// phase itself runs at the constant base rate.
    pub train: TrainConfig,
    pub tt_init: TtInit,
}

impl YardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 {
            return Err(Error::Config(format!("M and K must be at least 1, got M={} K={}", self.m, self.k)));
        }
        self.train.validate()
    }

    fn yard_phase(&self) -> TrainConfig {
        TrainConfig {
            warmup_epochs: 0.0,
            schedule: Schedule::Constant,
            epochs: self.m,
            ..self.train.clone()
        }
    }

    fn fine_tune_phase(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.fine_tune_epochs,
            ..self.train.clone()
        }
    }
}

fn rename<T: Real>(model: &mut Model<T>, ids: &[ParamId], from: &str, to: &str) -> Result<()> {
    for &id in ids {
        let name = model.store.get(id).name.clone();
        let renamed = match name.strip_prefix(from) {
            Some(rest) => format!("{to}{rest}"),
            None => continue,
        };
        model.store.rename(id, renamed)?;
    }
    Ok(())
}

/// Replaces every eligible dense convolution by a mixed op with `α = 0.5`.
/// Returns the number of mixed ops.
pub fn wrap_model<T: Real>(model: &mut Model<T>, init: TtInit, seed: u64) -> Result<usize> {
    let units = model.net.conv_units();
    if units.iter().any(|u| matches!(u, ConvUnit::Mixed(_))) {
        return Err(Error::Yard("model is already wrapped".into()));
    }
    let eligible = units
        .iter()
        .filter(|u| matches!(u, ConvUnit::Dense(c) if select_ranks(&c.spec).is_some()))
        .count();
    if eligible == 0 {
        return Err(Error::Yard("no convolution is eligible for factorization".into()));
    }

    let mut rng = Rng::derive(seed, 0x7961_7264);
    let mut next_id = 0;
    let store = &mut model.store;
    for unit in model.net.conv_units_mut() {
        let ConvUnit::Dense(conv) = unit else { continue };
        let Some(ranks) = select_ranks(&conv.spec) else { continue };
        next_id += 1;
        let name = conv.name.clone();
        let conv = conv.clone();

        let tt_prefix = format!("{name}.tt");
        let tt = match init {
            TtInit::Random => TtConv::init(&name, &tt_prefix, conv.spec, ranks, store, &mut rng)?,
            TtInit::Factorized => {
                let weight: DenseTensor<f64> = store.value(conv.weight).cast();
                let bias: Option<Vec<f64>> = conv.bias.map(|b| {
                    store
                        .value(b)
                        .data()
                        .iter()
                        .map(|v| v.to_f64().unwrap_or(f64::NAN))
                        .collect()
                });
                let f = factorize_kernel(&weight, bias.as_deref(), &conv.spec, ranks)
                    .map_err(|e| Error::layer(&name, e.to_string()))?;
                TtConv::from_plan(&name, &tt_prefix, &lower(&f.factors)?, store)?
            }
        };
        for id in conv.param_ids() {
            let renamed = store.get(id).name.replacen(&name, &format!("{name}.conv"), 1);
            store.rename(id, renamed)?;
        }
        let alpha = store.add(
            format!("{name}.alpha"),
            DenseTensor::scalar(T::from_f64_lossy(ALPHA_INIT)),
            ParamRole::Alpha,
        )?;
        *unit = ConvUnit::Mixed(Box::new(MixedOp {
            layer_id: next_id,
            name,
            alpha,
            conv,
            tt,
        }));
    }
    Ok(next_id)
}

/// Current `(layer_id, α)` of every remaining mixed op.
pub fn alphas<T: Real>(model: &Model<T>) -> Vec<(usize, f64)> {
    model
        .net
        .mixed_ops()
        .iter()
        .map(|m| (m.layer_id, model.store.value(m.alpha).data()[0].to_f64().unwrap_or(f64::NAN)))
        .collect()
}

/// Smallest `α`; ties go to the smaller layer id.
pub fn select_candidate(alphas: &[(usize, f64)]) -> Option<(usize, f64)> {
    alphas
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

/// Switches a mixed op to its factorized branch for good. The dense branch
/// and `α` are dropped.
pub fn replace_layer<T: Real>(model: &mut Model<T>, layer_id: usize) -> Result<()> {
    let mut found = None;
    for unit in model.net.conv_units_mut() {
        if let ConvUnit::Mixed(m) = unit {
            if m.layer_id == layer_id {
                let m = (**m).clone();
                *unit = ConvUnit::Tt(m.tt.clone());
                found = Some(m);
                break;
            }
        }
    }
    let m = found.ok_or_else(|| Error::Yard(format!("no mixed layer with id {layer_id}")))?;
    for id in m.conv.param_ids().into_iter().chain([m.alpha]) {
        model.store.remove(id);
    }
    rename(model, &m.tt.param_ids(), &format!("{}.tt", m.name), &m.name)
}

/// Collapses every remaining mixed op to its dense branch, taken as is.
/// Returns the ids of the collapsed layers.
pub fn finalize<T: Real>(model: &mut Model<T>) -> Result<Vec<usize>> {
    let mut collapsed = Vec::new();
    for unit in model.net.conv_units_mut() {
        if let ConvUnit::Mixed(m) = unit {
            let m = (**m).clone();
            *unit = ConvUnit::Dense(m.conv.clone());
            collapsed.push(m);
        }
    }
    for m in &collapsed {
        for id in m.tt.param_ids().into_iter().chain([m.alpha]) {
            model.store.remove(id);
        }
        rename(model, &m.conv.param_ids(), &format!("{}.conv", m.name), &m.name)?;
    }
    Ok(collapsed.iter().map(|m| m.layer_id).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `(layer_id, α)` of the mixed ops considered, after training.
    pub alphas: Vec<(usize, f64)>,
    pub argmin_layer: usize,
    pub argmin_alpha: f64,
    pub replaced: bool,
}

/// Trains `M` epochs at the constant base rate, then replaces the argmin
/// layer if its `α` is below one half.
pub fn yard_iteration<T: Real>(
    model: &mut Model<T>,
    train: &Dataset,
    cfg: &YardConfig,
    iteration: usize,
    rng: &mut Rng,
    log: &mut TrainLog,
) -> Result<IterationRecord> {
    if model.net.mixed_ops().is_empty() {
        return Err(Error::Yard("no mixed layer remains".into()));
    }
    let phase = cfg.yard_phase();
    let lr = phase.base_lr();
    for e in 0..cfg.m {
        train_epoch(model, train, &phase, &|_| lr, e, rng, log, None)?;
    }
    let current = alphas(model);
    let (layer, alpha) = select_candidate(&current).expect("mixed layers remain");
    let replaced = alpha < REPLACE_BELOW;
    if replaced {
        replace_layer(model, layer)?;
    }
    Ok(IterationRecord {
        iteration,
        alphas: current,
        argmin_layer: layer,
        argmin_alpha: alpha,
        replaced,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Assignment {
    Conv,
    TtConv,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerAssignment {
    pub layer_id: usize,
    pub name: String,
    pub assignment: Assignment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostSummary {
    pub macs: u64,
    pub params: u64,
}

impl CostSummary {
    pub fn of(arch: &Arch) -> Result<Self> {
        let r = model_report(arch)?;
        Ok(Self {
            macs: r.total_macs,
            params: r.total_params,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct YardReport {
    pub m: usize,
    pub k: usize,
    pub seed: u64,
    pub layers: usize,
    pub iterations: Vec<IterationRecord>,
    pub assignment: Vec<LayerAssignment>,
    pub baseline: CostSummary,
    pub final_cost: CostSummary,
    pub final_accuracy: f64,
    #[serde(skip)]
    pub log: TrainLog,
}

impl YardReport {
    pub fn replacements(&self) -> Vec<usize> {
        self.iterations.iter().filter(|r| r.replaced).map(|r| r.argmin_layer).collect()
    }

    /// `iteration,layer_id,alpha,replaced`: one row per iteration for the
    /// argmin layer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,layer_id,alpha,replaced\n");
        for r in &self.iterations {
            let _ = writeln!(out, "{},{},{:.6},{}", r.iteration, r.argmin_layer, r.argmin_alpha, r.replaced);
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Checks the invariants every run must satisfy.
    pub fn check(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Yard(m));
        if self.iterations.len() != self.k {
            return fail(format!("{} iteration records for K={}", self.iterations.len(), self.k));
        }
        for r in &self.iterations {
            if r.replaced && !(r.argmin_alpha < REPLACE_BELOW) {
                return fail(format!("iteration {} replaced with alpha {}", r.iteration, r.argmin_alpha));
            }
            if r.alphas.iter().any(|&(_, a)| !(0.0..=1.0).contains(&a)) {
                return fail(format!("iteration {} has alpha outside [0, 1]", r.iteration));
            }
        }
        let replaced = self.replacements();
        let tt: Vec<usize> = self
            .assignment
            .iter()
            .filter(|a| a.assignment == Assignment::TtConv)
            .map(|a| a.layer_id)
            .collect();
        let mut sorted = replaced.clone();
        sorted.sort_unstable();
        if sorted != tt {
            return fail(format!("replacement log {replaced:?} disagrees with assignment {tt:?}"));
        }
        if self.final_cost.params > self.baseline.params || (!replaced.is_empty() && self.final_cost.params >= self.baseline.params) {
            return fail("final parameter count is not below the baseline".into());
        }
        Ok(())
    }
}

/// Wrap, `K` iterations, finalize, fine-tune. The rng streams derive from
/// `seed`.
pub fn run_yard<T: Real>(
    mut model: Model<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &YardConfig,
    seed: u64,
) -> Result<(Model<T>, YardReport)> {
    cfg.validate()?;
    let baseline = CostSummary::of(&model.arch())?;
    let layers = wrap_model(&mut model, cfg.tt_init, seed)?;
    if cfg.k > layers {
        return Err(Error::Config(format!("K={} exceeds the {layers} eligible layers", cfg.k)));
    }
    let names: Vec<(usize, String)> = model.net.mixed_ops().iter().map(|m| (m.layer_id, m.name.clone())).collect();
    let mut rng = Rng::derive(seed, 0x7472_6169);
    let mut log = TrainLog::default();
    let mut iterations = Vec::with_capacity(cfg.k);
    for it in 1..=cfg.k {
        iterations.push(yard_iteration(&mut model, train, cfg, it, &mut rng, &mut log)?);
    }
    finalize(&mut model)?;

    model.store.reset_momentum();
    let ft = cfg.fine_tune_phase();
    for e in 0..ft.epochs {
        train_epoch(&mut model, train, &ft, &|p| ft.lr_at(p), e, &mut rng, &mut log, Some(test))?;
    }
    let final_accuracy = evaluate(&mut model, test, cfg.train.batch_size)?;
    let replaced: Vec<usize> = iterations.iter().filter(|r| r.replaced).map(|r| r.argmin_layer).collect();
    let assignment = names
        .into_iter()
        .map(|(layer_id, name)| LayerAssignment {
            layer_id,
            name,
            assignment: if replaced.contains(&layer_id) {
                Assignment::TtConv
            } else {
                Assignment::Conv
            },
        })
        .collect();
    let report = YardReport {
        m: cfg.m,
        k: cfg.k,
        seed,
        layers,
        iterations,
        assignment,
        baseline,
        final_cost: CostSummary::of(&model.arch())?,
        final_accuracy,
        log,
    };
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub m: usize,
    pub replacements: usize,
    pub final_params: u64,
    pub final_macs: u64,
    pub final_accuracy: f64,
}

/// Distinct values in first-seen order.
pub fn dedup_m_list(ms: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for &m in ms {
        if m == 0 {
            return Err(Error::Config("M values must be at least 1".into()));
        }
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("the M list is empty".into()));
    }
    Ok(out)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("M,replacements,final_params,final_macs,final_accuracy\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.4}",
            r.m, r.replacements, r.final_params, r.final_macs, r.final_accuracy
        );
    }
    out
}

/// Training samples of the desk-scale synthetic runs.
pub const DESK_TRAIN_SAMPLES: usize = 512;
pub const DESK_TEST_SAMPLES: usize = 256;

/// Optimizer settings for desk-scale runs: batch 32, one warmup epoch,
/// cosine decay.
pub fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        warmup_epochs: 1.0,
        seed,
        ..TrainConfig::default()
    }
}

/// Train and test splits of the synthetic task, drawn from disjoint streams.
pub fn synthetic_split(seed: u64) -> Result<(Dataset, Dataset)> {
    let train = crate::data::gen_synthetic(DESK_TRAIN_SAMPLES, seed.wrapping_mul(2))?;
    let test = crate::data::gen_synthetic(DESK_TEST_SAMPLES, seed.wrapping_mul(2).wrapping_add(1))?;
    Ok((train, test))
}

/// The reference point for accuracy: the same network kept dense and trained
/// for the same number of epochs as a full run (`K·M` plus fine-tuning),
/// with warmup and the configured schedule throughout.
pub fn train_baseline<T: Real>(
    arch: &Arch,
    train: &Dataset,
    test: &Dataset,
    cfg: &YardConfig,
    seed: u64,
) -> Result<(Model<T>, f64, TrainLog)> {
    cfg.validate()?;
    let mut model = Model::from_arch(arch, seed)?;
    let full = TrainConfig {
        epochs: cfg.k * cfg.m + cfg.fine_tune_epochs,
        ..cfg.train.clone()
    };
    let mut rng = Rng::derive(seed, 0x7472_6169);
    let mut log = TrainLog::default();
    crate::nn::train::fit(&mut model, train, Some(test), &full, &mut rng, &mut log)?;
    let acc = evaluate(&mut model, test, cfg.train.batch_size)?;
    Ok((model, acc, log))
}

/// One yard run per distinct `M`, each from the same initial weights.
pub fn run_ablation<T: Real>(
    arch: &Arch,
    ms: &[usize],
    train: &Dataset,
    test: &Dataset,
    cfg: &YardConfig,
    seed: u64,
) -> Result<Vec<(AblationRow, YardReport)>> {
    let ms = dedup_m_list(ms)?;
    let mut out = Vec::with_capacity(ms.len());
    for m in ms {
        let cfg = YardConfig { m, ..cfg.clone() };
        let model = Model::<T>::from_arch(arch, seed)?;
        let (_, report) = run_yard(model, train, test, &cfg, seed)?;
        let row = AblationRow {
            m,
            replacements: report.replacements().len(),
            final_params: report.final_cost.params,
            final_macs: report.final_cost.macs,
            final_accuracy: report.final_accuracy,
        };
        out.push((row, report));
    }
    Ok(out)
}
