//! Trainable networks built from an [`Arch`] description.

use super::params::{ParamId, ParamRole, ParamStore};
use super::tape::{Tape, Var};
use crate::conv::ConvSpec;
use crate::cost::{Arch, ArchNode};
use crate::data::container::WeightContainer;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::tensor::DenseTensor;
use crate::ttconv::{stage_specs, ConvPlan, RankChoice};
use crate::yard::MixedOp;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn kaiming<T: Real>(dims: &[usize], fan_in: usize, gain: f64, rng: &mut Rng) -> Result<DenseTensor<T>> {
    let std = (gain / fan_in as f64).sqrt();
    DenseTensor::from_fn(dims, |_| T::from_f64_lossy(std * rng.normal()))
}

fn conv_fan_in(spec: &ConvSpec) -> usize {
    spec.in_per_group() * spec.kernel * spec.kernel
}

#[derive(Debug, Clone)]
pub struct DenseConv {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl DenseConv {
    pub fn init<T: Real>(
        name: &str,
        prefix: &str,
        spec: ConvSpec,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate().map_err(|e| Error::layer(name, e.to_string()))?;
        let w = kaiming(&spec.weight_dims(), conv_fan_in(&spec), 2.0, rng)?;
        let weight = store.add(format!("{prefix}.weight"), w, ParamRole::Weight)?;
        let bias = if spec.has_bias {
            let b = DenseTensor::zeros(&[spec.out_channels])?;
            Some(store.add(format!("{prefix}.bias"), b, ParamRole::Weight)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            spec,
            weight,
            bias,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(&self.name, x, w, b, self.spec)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// The factorized layer as a chain of plain convolutions.
#[derive(Debug, Clone)]
pub struct TtConv {
    pub name: String,
    pub spec: ConvSpec,
    pub ranks: RankChoice,
    pub stages: Vec<(ConvSpec, ParamId)>,
    pub bias: Option<ParamId>,
}

impl TtConv {
    /// Stage weights drawn at random.
    pub fn init<T: Real>(
        name: &str,
        prefix: &str,
        spec: ConvSpec,
        ranks: RankChoice,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate().map_err(|e| Error::layer(name, e.to_string()))?;
        let mut stages = Vec::new();
        for (k, s) in stage_specs(&spec.bias(false), ranks).into_iter().enumerate() {
            let w = kaiming(&s.weight_dims(), conv_fan_in(&s), 2.0, rng)?;
            stages.push((s, store.add(format!("{prefix}.stage{}.weight", k + 1), w, ParamRole::Weight)?));
        }
        let bias = if spec.has_bias {
            let b = DenseTensor::zeros(&[spec.out_channels])?;
            Some(store.add(format!("{prefix}.bias"), b, ParamRole::Weight)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            spec,
            ranks,
            stages,
            bias,
        })
    }

    /// Stage weights copied from a lowered factorization.
    pub fn from_plan<T: Real>(name: &str, prefix: &str, plan: &ConvPlan, store: &mut ParamStore<T>) -> Result<Self> {
        let mut stages = Vec::new();
        let mut bias = None;
        for (k, stage) in plan.stages().into_iter().enumerate() {
            let spec = stage.spec.bias(false);
            let id = store.add(format!("{prefix}.stage{}.weight", k + 1), stage.weight.cast(), ParamRole::Weight)?;
            stages.push((spec, id));
            if let Some(b) = stage.bias {
                let t = DenseTensor::new(vec![b.len()], b.iter().map(|&v| T::from_f64_lossy(v)).collect())?;
                bias = Some(store.add(format!("{prefix}.bias"), t, ParamRole::Weight)?);
            }
        }
        Ok(Self {
            name: name.to_string(),
            spec: *plan.original(),
            ranks: plan.ranks(),
            stages,
            bias,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var> {
        let last = self.stages.len() - 1;
        for (k, (spec, id)) in self.stages.iter().enumerate() {
            let w = tape.param(store, *id);
            let (b, spec) = match (k == last, self.bias) {
                (true, Some(b)) => (Some(tape.param(store, b)), spec.bias(true)),
                _ => (None, *spec),
            };
            x = tape.conv2d(&format!("{}.stage{}", self.name, k + 1), x, w, b, spec)?;
        }
        Ok(x)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.stages.iter().map(|(_, id)| *id).chain(self.bias).collect()
    }
}

#[derive(Debug, Clone)]
pub enum ConvUnit {
    Dense(DenseConv),
    Tt(TtConv),
    Mixed(Box<MixedOp>),
}

impl ConvUnit {
    pub fn name(&self) -> &str {
        match self {
            ConvUnit::Dense(c) => &c.name,
            ConvUnit::Tt(c) => &c.name,
            ConvUnit::Mixed(m) => &m.name,
        }
    }

    pub fn spec(&self) -> &ConvSpec {
        match self {
            ConvUnit::Dense(c) => &c.spec,
            ConvUnit::Tt(c) => &c.spec,
            ConvUnit::Mixed(m) => &m.conv.spec,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        match self {
            ConvUnit::Dense(c) => c.forward(tape, store, x),
            ConvUnit::Tt(c) => c.forward(tape, store, x),
            ConvUnit::Mixed(m) => {
                let a = m.conv.forward(tape, store, x)?;
                let b = m.tt.forward(tape, store, x)?;
                let alpha = tape.param(store, m.alpha);
                tape.mix(&m.name, alpha, a, b)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub name: String,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(ConvUnit),
    BatchNorm(BatchNormLayer),
    Relu { name: String },
    MaxPool { name: String, kernel: usize, stride: usize, padding: usize },
    GlobalAvgPool { name: String },
    Linear(LinearLayer),
    Residual { name: String, main: Vec<Layer>, shortcut: Vec<Layer> },
}

#[derive(Debug, Clone)]
pub struct Network {
    pub name: String,
    /// `(C, H, W)` of one input image.
    pub input: (usize, usize, usize),
    pub layers: Vec<Layer>,
}

fn build<T: Real>(nodes: &[ArchNode], store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Vec<Layer>> {
    let mut layers = Vec::with_capacity(nodes.len());
    for node in nodes {
        layers.push(match node {
            ArchNode::Conv { name, spec } => Layer::Conv(ConvUnit::Dense(DenseConv::init(name, name, *spec, store, rng)?)),
            ArchNode::TtConv { name, spec, ranks } => {
                Layer::Conv(ConvUnit::Tt(TtConv::init(name, name, *spec, *ranks, store, rng)?))
            }
            ArchNode::BatchNorm { name, channels } => {
                let c = *channels;
                Layer::BatchNorm(BatchNormLayer {
                    name: name.clone(),
                    channels: c,
                    gamma: store.add(format!("{name}.gamma"), DenseTensor::filled(&[c], T::one())?, ParamRole::Weight)?,
                    beta: store.add(format!("{name}.beta"), DenseTensor::zeros(&[c])?, ParamRole::Weight)?,
                    running_mean: store.add(format!("{name}.running_mean"), DenseTensor::zeros(&[c])?, ParamRole::Buffer)?,
                    running_var: store.add(
                        format!("{name}.running_var"),
                        DenseTensor::filled(&[c], T::one())?,
                        ParamRole::Buffer,
                    )?,
                })
            }
            ArchNode::Relu { name } => Layer::Relu { name: name.clone() },
            ArchNode::MaxPool {
                name,
                kernel,
                stride,
                padding,
            } => Layer::MaxPool {
                name: name.clone(),
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
            },
            ArchNode::GlobalAvgPool { name } => Layer::GlobalAvgPool { name: name.clone() },
            ArchNode::Linear {
                name,
                in_features,
                out_features,
                bias,
            } => {
                let w = kaiming(&[*out_features, *in_features], *in_features, 1.0, rng)?;
                Layer::Linear(LinearLayer {
                    name: name.clone(),
                    in_features: *in_features,
                    out_features: *out_features,
                    weight: store.add(format!("{name}.weight"), w, ParamRole::Weight)?,
                    bias: if *bias {
                        Some(store.add(format!("{name}.bias"), DenseTensor::zeros(&[*out_features])?, ParamRole::Weight)?)
                    } else {
                        None
                    },
                })
            }
            ArchNode::Residual { name, main, shortcut } => Layer::Residual {
                name: name.clone(),
                main: build(main, store, rng)?,
                shortcut: build(shortcut, store, rng)?,
            },
        });
    }
    Ok(layers)
}

fn to_nodes(layers: &[Layer]) -> Vec<ArchNode> {
    layers
        .iter()
        .map(|layer| match layer {
            Layer::Conv(ConvUnit::Dense(c)) => ArchNode::Conv {
                name: c.name.clone(),
                spec: c.spec,
            },
            Layer::Conv(ConvUnit::Tt(c)) => ArchNode::TtConv {
                name: c.name.clone(),
                spec: c.spec,
                ranks: c.ranks,
            },
            // still undecided: counted as the dense layer it would collapse to
            Layer::Conv(ConvUnit::Mixed(m)) => ArchNode::Conv {
                name: m.name.clone(),
                spec: m.conv.spec,
            },
            Layer::BatchNorm(b) => ArchNode::BatchNorm {
                name: b.name.clone(),
                channels: b.channels,
            },
            Layer::Relu { name } => ArchNode::Relu { name: name.clone() },
            Layer::MaxPool {
                name,
                kernel,
                stride,
                padding,
            } => ArchNode::MaxPool {
                name: name.clone(),
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
            },
            Layer::GlobalAvgPool { name } => ArchNode::GlobalAvgPool { name: name.clone() },
            Layer::Linear(l) => ArchNode::Linear {
                name: l.name.clone(),
                in_features: l.in_features,
                out_features: l.out_features,
                bias: l.bias.is_some(),
            },
            Layer::Residual { name, main, shortcut } => ArchNode::Residual {
                name: name.clone(),
                main: to_nodes(main),
                shortcut: to_nodes(shortcut),
            },
        })
        .collect()
}

fn collect_units<'a>(layers: &'a mut [Layer], out: &mut Vec<&'a mut ConvUnit>) {
    for layer in layers {
        match layer {
            Layer::Conv(unit) => out.push(unit),
            Layer::Residual { main, shortcut, .. } => {
                collect_units(main, out);
                collect_units(shortcut, out);
            }
            _ => {}
        }
    }
}

fn collect_units_ref<'a>(layers: &'a [Layer], out: &mut Vec<&'a ConvUnit>) {
    for layer in layers {
        match layer {
            Layer::Conv(unit) => out.push(unit),
            Layer::Residual { main, shortcut, .. } => {
                collect_units_ref(main, out);
                collect_units_ref(shortcut, out);
            }
            _ => {}
        }
    }
}

impl Network {
    pub fn from_arch<T: Real>(arch: &Arch, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        // rejects inconsistent layer chains before any weight is drawn
        crate::cost::model_report(arch)?;
        Ok(Self {
            name: arch.name.clone(),
            input: (arch.in_channels, arch.in_h, arch.in_w),
            layers: build(&arch.nodes, store, rng)?,
        })
    }

    pub fn arch(&self) -> Arch {
        Arch {
            name: self.name.clone(),
            in_channels: self.input.0,
            in_h: self.input.1,
            in_w: self.input.2,
            nodes: to_nodes(&self.layers),
        }
    }

    /// Convolution layers in traversal order.
    pub fn conv_units(&self) -> Vec<&ConvUnit> {
        let mut out = Vec::new();
        collect_units_ref(&self.layers, &mut out);
        out
    }

    pub fn conv_units_mut(&mut self) -> Vec<&mut ConvUnit> {
        let mut out = Vec::new();
        collect_units(&mut self.layers, &mut out);
        out
    }

    pub fn mixed_ops(&self) -> Vec<&MixedOp> {
        self.conv_units()
            .into_iter()
            .filter_map(|u| match u {
                ConvUnit::Mixed(m) => Some(&**m),
                _ => None,
            })
            .collect()
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        run(&self.layers, tape, store, x, mode)
    }
}

fn run<T: Real>(layers: &[Layer], tape: &mut Tape<T>, store: &mut ParamStore<T>, mut x: Var, mode: Mode) -> Result<Var> {
    for layer in layers {
        x = match layer {
            Layer::Conv(unit) => unit.forward(tape, store, x)?,
            Layer::BatchNorm(bn) => {
                let gamma = tape.param(store, bn.gamma);
                let beta = tape.param(store, bn.beta);
                match mode {
                    Mode::Train => {
                        let (y, mean, var) = tape.batch_norm_train(&bn.name, x, gamma, beta, BN_EPS)?;
                        let d = tape.value(x).dims();
                        let count = d[0] * d[2] * d[3];
                        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                        let m = T::from_f64_lossy(BN_MOMENTUM);
                        let keep = T::one() - m;
                        let u = T::from_f64_lossy(unbias);
                        for (r, &b) in store.get_mut(bn.running_mean).value.data_mut().iter_mut().zip(&mean) {
                            *r = keep * *r + m * b;
                        }
                        for (r, &b) in store.get_mut(bn.running_var).value.data_mut().iter_mut().zip(&var) {
                            *r = keep * *r + m * b * u;
                        }
                        y
                    }
                    Mode::Eval => {
                        let mean = store.value(bn.running_mean).data().to_vec();
                        let var = store.value(bn.running_var).data().to_vec();
                        tape.batch_norm_eval(&bn.name, x, gamma, beta, &mean, &var, BN_EPS)?
                    }
                }
            }
            Layer::Relu { .. } => tape.relu(x),
            Layer::MaxPool {
                name,
                kernel,
                stride,
                padding,
            } => tape.max_pool(name, x, *kernel, *stride, *padding)?,
            Layer::GlobalAvgPool { name } => tape.global_avg_pool(name, x)?,
            Layer::Linear(l) => {
                let w = tape.param(store, l.weight);
                let b = l.bias.map(|b| tape.param(store, b));
                tape.linear(&l.name, x, w, b)?
            }
            Layer::Residual { name, main, shortcut } => {
                let a = run(main, tape, store, x, mode)?;
                let b = run(shortcut, tape, store, x, mode)?;
                tape.add(name, a, b)?
            }
        };
    }
    Ok(x)
}

/// One forward pass: its tape, the logits and (with labels) the loss.
#[derive(Debug)]
pub struct Pass<T> {
    pub tape: Tape<T>,
    pub logits: Var,
    pub loss: Option<Var>,
}

/// A network together with its parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub net: Network,
    pub store: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn from_arch(arch: &Arch, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let net = Network::from_arch(arch, &mut store, &mut rng)?;
        Ok(Self { net, store })
    }

    pub fn forward(&mut self, x: &DenseTensor<T>, labels: Option<&[usize]>, mode: Mode) -> Result<Pass<T>> {
        let (c, h, w) = self.net.input;
        match *x.dims() {
            [_, xc, xh, xw] if (xc, xh, xw) == (c, h, w) => {}
            ref d => {
                return Err(Error::layer(
                    "input",
                    format!("expected (N, {c}, {h}, {w}) images, got dims {d:?}"),
                ))
            }
        }
        let mut tape = Tape::new();
        let input = tape.input(x.clone(), false);
        let logits = self.net.forward(&mut tape, &mut self.store, input, mode)?;
        let loss = labels.map(|l| tape.softmax_cross_entropy(logits, l)).transpose()?;
        Ok(Pass { tape, logits, loss })
    }

    /// Backpropagates the pass's loss and adds the gradients to the store.
    pub fn backward(&mut self, pass: &mut Pass<T>) -> Result<()> {
        let loss = pass
            .loss
            .ok_or_else(|| Error::NoForward("the pass was run without labels, there is no loss".into()))?;
        pass.tape.backward(loss)?;
        pass.tape.accumulate_into(&mut self.store);
        Ok(())
    }

    pub fn predict(&mut self, x: &DenseTensor<T>) -> Result<Vec<usize>> {
        let pass = self.forward(x, None, Mode::Eval)?;
        let logits = pass.tape.value(pass.logits);
        let k = logits.cols();
        Ok(logits
            .data()
            .chunks_exact(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn arch(&self) -> Arch {
        self.net.arch()
    }

    pub fn to_container(&self) -> WeightContainer {
        self.store.to_container()
    }

    pub fn load_container(&mut self, container: &WeightContainer) -> Result<()> {
        self.store.load_container(container)
    }
}
