//! Factorizes convolution weights stored in a container.
//!
//! A convolution is any entry `<layer>.weight` with dims `(S, C, l, l)`; an
//! optional `<layer>.bias` of length `S` goes with it. Each factorized layer
//! is written back as `<layer>.stage1.weight`, `<layer>.stage2.weight`, ...
//! in execution order, followed by `<layer>.bias`. Everything else is copied.

use std::fmt::Write as _;

use crate::conv::ConvSpec;
use crate::cost::{cost_dense, cost_ttconv};
use crate::data::container::{Entry, WeightContainer};
use crate::error::{Error, Result};
use crate::scalar::Dtype;
use crate::tensor::DenseTensor;
use crate::ttconv::{factorize_kernel, lower, reconstruct_kernel, select_ranks, RankChoice, MIN_CHANNELS};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDecomposition {
    pub layer: String,
    pub spec: ConvSpec,
    pub ranks: RankChoice,
    /// `‖W − Ŵ‖ / ‖W‖`
    pub rel_error: f64,
    pub dense_params: u64,
    pub tt_params: u64,
    /// Per output position, with same-size padding.
    pub dense_macs: u64,
    pub tt_macs: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecomposeReport {
    pub layers: Vec<LayerDecomposition>,
    /// Convolutions left dense and why.
    pub skipped: Vec<(String, String)>,
}

impl DecomposeReport {
    pub fn to_text(&self) -> String {
        let mut out = String::from("layer,C,S,l,ranks,rel_error,params_before,params_after,macs_per_pixel_before,macs_per_pixel_after\n");
        for d in &self.layers {
            let ranks = match d.ranks {
                RankChoice::Spatial { r1, r2 } => format!("{r1}x{r2}"),
                RankChoice::Pointwise { r } => r.to_string(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6e},{},{},{},{}",
                d.layer,
                d.spec.in_channels,
                d.spec.out_channels,
                d.spec.kernel,
                ranks,
                d.rel_error,
                d.dense_params,
                d.tt_params,
                d.dense_macs,
                d.tt_macs
            );
        }
        for (layer, why) in &self.skipped {
            let _ = writeln!(out, "# skipped {layer}: {why}");
        }
        out
    }
}

fn conv_layers(c: &WeightContainer) -> Vec<(String, ConvSpec)> {
    c.entries()
        .iter()
        .filter_map(|e| {
            let layer = e.name.strip_suffix(".weight")?;
            let &[s, ch, l, l2] = e.dims.as_slice() else { return None };
            (l == l2 && l > 0).then(|| {
                let bias = c.get(&format!("{layer}.bias")).is_some_and(|b| b.dims == [s]);
                (layer.to_string(), ConvSpec::new(ch, s, l).padding(l / 2).bias(bias))
            })
        })
        .collect()
}

fn ineligible(spec: &ConvSpec) -> String {
    format!(
        "needs at least {MIN_CHANNELS} input and output channels, has {} -> {}",
        spec.in_channels, spec.out_channels
    )
}

/// Decomposes the named layers, or every eligible one when `only` is empty.
pub fn decompose_container(input: &WeightContainer, only: &[String]) -> Result<(WeightContainer, DecomposeReport)> {
    if input.is_empty() {
        return Err(Error::Config("the container is empty".into()));
    }
    let convs = conv_layers(input);
    let mut report = DecomposeReport::default();
    let mut chosen = Vec::new();
    if only.is_empty() {
        for (layer, spec) in &convs {
            match select_ranks(spec) {
                Some(r) => chosen.push((layer.clone(), *spec, r)),
                None => report.skipped.push((layer.clone(), ineligible(spec))),
            }
        }
    } else {
        for name in only {
            let (_, spec) = convs
                .iter()
                .find(|(l, _)| l == name)
                .ok_or_else(|| Error::layer(name, "no convolution weight of dims (S, C, l, l) with this name"))?;
            let ranks = select_ranks(spec).ok_or_else(|| Error::layer(name, format!("refusing to decompose: {}", ineligible(spec))))?;
            chosen.push((name.clone(), *spec, ranks));
        }
    }
    if chosen.is_empty() {
        return Err(Error::Config(format!(
            "no layer is eligible for decomposition: a convolution needs at least {MIN_CHANNELS} input and output channels"
        )));
    }

    let mut out = WeightContainer::new();
    let mut done = std::collections::HashSet::new();
    for e in input.entries() {
        let target = e
            .name
            .strip_suffix(".weight")
            .or_else(|| e.name.strip_suffix(".bias"))
            .and_then(|l| chosen.iter().find(|c| c.0 == l));
        let Some((layer, spec, ranks)) = target else {
            out.push(e.clone())?;
            continue;
        };
        if !done.insert(layer.clone()) {
            continue;
        }
        let dtype = e.data.dtype();
        let weight: DenseTensor<f64> = input.tensor(&format!("{layer}.weight"))?;
        let bias: Option<Vec<f64>> = if spec.has_bias {
            Some(input.tensor::<f64>(&format!("{layer}.bias"))?.into_data())
        } else {
            None
        };
        let f = factorize_kernel(&weight, bias.as_deref(), spec, *ranks).map_err(|err| Error::layer(layer, err.to_string()))?;
        let rel_error = reconstruct_kernel(&f.factors)?.rel_error(&weight)?;
        let plan = lower(&f.factors)?;
        for (k, stage) in plan.stages().iter().enumerate() {
            out.push(entry(&format!("{layer}.stage{}.weight", k + 1), stage.weight, dtype))?;
        }
        if let Some(b) = &bias {
            out.push(entry(&format!("{layer}.bias"), &DenseTensor::new(vec![b.len()], b.clone())?, dtype))?;
        }
        let (dense, tt) = (cost_dense(spec, 1, 1)?, cost_ttconv(spec, plan.ranks(), 1, 1)?);
        report.layers.push(LayerDecomposition {
            layer: layer.clone(),
            spec: *spec,
            ranks: plan.ranks(),
            rel_error,
            dense_params: dense.params,
            tt_params: tt.params,
            dense_macs: dense.macs,
            tt_macs: tt.macs,
        });
    }
    Ok((out, report))
}

fn entry(name: &str, t: &DenseTensor<f64>, dtype: Dtype) -> Entry {
    match dtype {
        Dtype::F64 => Entry::from_tensor(name, t),
        Dtype::F32 => Entry::from_tensor(name, &t.cast::<f32>()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn container(layers: &[(&str, [usize; 4], bool)]) -> WeightContainer {
        let mut rng = Rng::new(1);
        let mut c = WeightContainer::new();
        for (name, dims, bias) in layers {
            let w = DenseTensor::<f32>::from_fn(dims, |_| rng.normal() as f32).unwrap();
            c.push_tensor(format!("{name}.weight"), &w).unwrap();
            if *bias {
                c.push_tensor(format!("{name}.bias"), &DenseTensor::<f32>::filled(&[dims[0]], 0.5).unwrap())
                    .unwrap();
            }
        }
        c
    }

    #[test]
    fn one_eligible_conv_becomes_three_stages() {
        let c = container(&[("conv", [128, 128, 3, 3], false)]);
        let (out, report) = decompose_container(&c, &[]).unwrap();
        let names: Vec<&str> = out.entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["conv.stage1.weight", "conv.stage2.weight", "conv.stage3.weight"]);
        assert_eq!(report.layers[0].ranks, RankChoice::Spatial { r1: 2, r2: 16 });
        assert_eq!(out.get("conv.stage2.weight").unwrap().dims, [2, 3, 3]);
        assert_eq!(report.layers[0].tt_params, 128 * 32 + 2 * 9 + 16 * 128);
    }

    #[test]
    fn narrow_layers_are_skipped_or_refused() {
        let c = container(&[("small", [64, 64, 3, 3], true), ("big", [256, 128, 1, 1], true)]);
        let (out, report) = decompose_container(&c, &[]).unwrap();
        assert_eq!(report.skipped.len(), 1);
        assert!(out.get("small.weight").is_some());
        assert!(out.get("small.bias").is_some());
        assert!(out.get("big.stage2.weight").is_some());
        assert!(out.get("big.bias").is_some());
        assert!(out.get("big.weight").is_none());

        let err = decompose_container(&c, &["small".into()]).unwrap_err().to_string();
        assert!(err.contains("small") && err.contains("128"), "{err}");
        assert!(decompose_container(&c, &["missing".into()]).is_err());
        let narrow = container(&[("small", [64, 64, 3, 3], false)]);
        assert!(decompose_container(&narrow, &[]).is_err());
        assert!(decompose_container(&WeightContainer::new(), &[]).is_err());
    }
}
