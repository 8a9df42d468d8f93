use ttyard::cost::{parse_arch, toy_arch, Arch};
use ttyard::data::gen_synthetic;
use ttyard::nn::{ConvUnit, Mode, Model, TrainConfig, TrainLog};
use ttyard::rng::Rng;
use ttyard::ttconv::{factorize_kernel, lower, select_ranks};
use ttyard::yard::{
    alphas, finalize, replace_layer, run_yard, wrap_model, yard_iteration, Assignment, TtInit, YardConfig,
};
use ttyard::DenseTensor;

const WIDTHS: &str = "
input 3 8 8
conv c1 3 64 3 pad=1
conv c2 64 128 3 pad=1
conv c3 128 128 3 pad=1
conv c4 128 256 3 stride=2 pad=1
conv c5 256 256 3 pad=1
conv c6 256 256 1
gap pool
linear fc 256 4 bias
";

fn small_arch() -> Arch {
    parse_arch(
        "small",
        "
input 3 8 8
conv stem 3 16 3 pad=1
bn stem.bn 16
relu stem.relu
conv a 16 128 3 pad=1
bn a.bn 128
relu a.relu
residual b
  conv b.conv 128 128 3 pad=1
  bn b.bn 128
shortcut
end
relu b.relu
conv c 128 128 1 bias
gap pool
linear fc 128 4 bias
",
    )
    .unwrap()
}

fn images(n: usize, seed: u64) -> DenseTensor<f64> {
    let mut rng = Rng::new(seed);
    DenseTensor::from_fn(&[n, 3, 8, 8], |_| rng.normal()).unwrap()
}

fn logits(model: &mut Model<f64>, x: &DenseTensor<f64>) -> DenseTensor<f64> {
    let pass = model.forward(x, None, Mode::Eval).unwrap();
    pass.tape.value(pass.logits).clone()
}

fn set_alpha(model: &mut Model<f64>, layer_id: usize, value: f64) {
    let id = model
        .net
        .mixed_ops()
        .iter()
        .find(|m| m.layer_id == layer_id)
        .unwrap()
        .alpha;
    model.store.get_mut(id).value.data_mut()[0] = value;
}

#[test]
fn wrapping_covers_exactly_the_eligible_layers() {
    let arch = parse_arch("widths", WIDTHS).unwrap();
    let expected = arch.convs().iter().filter(|(_, s)| select_ranks(s).is_some()).count();
    assert_eq!(expected, 4);
    let mut model = Model::<f32>::from_arch(&arch, 0).unwrap();
    assert_eq!(wrap_model(&mut model, TtInit::Factorized, 0).unwrap(), expected);
    let names: Vec<&str> = model.net.mixed_ops().iter().map(|m| m.name.as_str()).collect();
    assert_eq!(names, ["c3", "c4", "c5", "c6"]);
    assert!(matches!(model.net.conv_units()[0], ConvUnit::Dense(_)));
    let a = alphas(&model);
    assert_eq!(a.iter().map(|x| x.0).collect::<Vec<_>>(), [1, 2, 3, 4]);
    assert!(a.iter().all(|x| x.1 == 0.5));
    assert!(model.store.find("c3.alpha").is_some());
    assert!(model.store.find("c3.conv.weight").is_some());
    assert!(model.store.find("c3.tt.stage3.weight").is_some());

    assert!(wrap_model(&mut model, TtInit::Factorized, 0).is_err());
}

#[test]
fn toy_network_has_six_eligible_layers() {
    let mut model = Model::<f32>::from_arch(&toy_arch(16), 0).unwrap();
    assert_eq!(wrap_model(&mut model, TtInit::Random, 1).unwrap(), 6);
}

#[test]
fn nothing_to_wrap_is_rejected() {
    let arch = parse_arch("narrow", "input 3 8 8\nconv c 3 64 3 pad=1\ngap p\nlinear fc 64 2\n").unwrap();
    let mut model = Model::<f32>::from_arch(&arch, 0).unwrap();
    let err = wrap_model(&mut model, TtInit::Factorized, 0).unwrap_err();
    assert!(err.to_string().contains("eligible"));
}

#[test]
fn factorized_branch_is_the_lowered_kernel_factorization() {
    let mut model = Model::<f64>::from_arch(&small_arch(), 3).unwrap();
    wrap_model(&mut model, TtInit::Factorized, 3).unwrap();
    for m in model.net.mixed_ops() {
        let weight = model.store.value(m.conv.weight).clone();
        let bias = m.conv.bias.map(|b| model.store.value(b).data().to_vec());
        let ranks = select_ranks(&m.conv.spec).unwrap();
        let f = factorize_kernel(&weight, bias.as_deref(), &m.conv.spec, ranks).unwrap();
        let plan = lower(&f.factors).unwrap();
        let stages = plan.stages();
        assert_eq!(stages.len(), m.tt.stages.len());
        for (stage, (_, id)) in stages.iter().zip(&m.tt.stages) {
            assert_eq!(stage.weight.data(), model.store.value(*id).data());
        }
        assert_eq!(bias.is_some(), m.tt.bias.is_some());
        if let (Some(b), Some(id)) = (stages.last().unwrap().bias, m.tt.bias) {
            assert_eq!(b, model.store.value(id).data());
        }
    }
}

#[test]
fn finalize_equals_mixture_at_alpha_one() {
    let mut model = Model::<f64>::from_arch(&small_arch(), 5).unwrap();
    let before = model.arch();
    wrap_model(&mut model, TtInit::Random, 5).unwrap();
    for id in 1..=2 {
        set_alpha(&mut model, id, 1.0);
    }
    let x = images(3, 1);
    let mixed = logits(&mut model, &x);
    assert_eq!(finalize(&mut model).unwrap(), vec![1, 2]);
    assert!(model.net.mixed_ops().is_empty());
    assert_eq!(logits(&mut model, &x).data(), mixed.data());
    assert_eq!(model.arch(), before);
    assert!(model.store.find("b.conv.weight").is_some());
    assert!(model.store.find("c.bias").is_some());
    assert_eq!(model.store.weight_count(), ttyard::cost::model_report(&before).unwrap().total_params as usize);

    // nothing left to collapse
    let snapshot = model.to_container();
    assert!(finalize(&mut model).unwrap().is_empty());
    assert!(model.to_container().bitwise_eq(&snapshot));
}

#[test]
fn replaced_layer_equals_mixture_at_alpha_zero() {
    let mut model = Model::<f64>::from_arch(&small_arch(), 6).unwrap();
    wrap_model(&mut model, TtInit::Factorized, 6).unwrap();
    set_alpha(&mut model, 1, 0.0);
    set_alpha(&mut model, 2, 0.7);
    let x = images(2, 2);
    let mixed = logits(&mut model, &x);
    replace_layer(&mut model, 1).unwrap();
    assert_eq!(logits(&mut model, &x).data(), mixed.data());
    assert_eq!(alphas(&model).iter().map(|a| a.0).collect::<Vec<_>>(), [2]);
    assert!(model.store.find("b.conv.stage2.weight").is_some());
    assert!(model.store.find("b.conv.alpha").is_none());
    assert!(model.store.find("b.conv.conv.weight").is_none());
    assert!(replace_layer(&mut model, 1).is_err());
}

#[test]
fn iteration_without_mixed_layers_is_rejected() {
    let mut model = Model::<f32>::from_arch(&small_arch(), 0).unwrap();
    let data = gen_synthetic(8, 0).unwrap();
    let cfg = YardConfig {
        m: 1,
        k: 1,
        fine_tune_epochs: 0,
        train: TrainConfig::default(),
        tt_init: TtInit::Factorized,
    };
    let mut log = TrainLog::default();
    assert!(yard_iteration(&mut model, &data, &cfg, 1, &mut Rng::new(0), &mut log).is_err());
}

fn quick_config(k: usize) -> YardConfig {
    YardConfig {
        m: 1,
        k,
        fine_tune_epochs: 1,
        train: TrainConfig {
            batch_size: 32,
            warmup_epochs: 0.5,
            epochs: 1,
            ..TrainConfig::default()
        },
        tt_init: TtInit::Factorized,
    }
}

#[test]
fn run_is_reproducible_and_consistent() {
    let train = gen_synthetic(96, 10).unwrap();
    let test = gen_synthetic(32, 11).unwrap();
    let run = || {
        let model = Model::<f32>::from_arch(&toy_arch(16), 2).unwrap();
        run_yard(model, &train, &test, &quick_config(3), 2).unwrap()
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    r1.check().unwrap();
    assert_eq!(r1.iterations, r2.iterations);
    assert_eq!(r1.final_accuracy, r2.final_accuracy);
    assert!(m1.to_container().bitwise_eq(&m2.to_container()));
    assert_eq!(r1.iterations.len(), 3);
    assert_eq!(r1.to_csv().lines().count(), 4);
    assert!(m1.net.mixed_ops().is_empty());
    let tt_layers = r1.assignment.iter().filter(|a| a.assignment == Assignment::TtConv).count();
    assert_eq!(tt_layers, r1.replacements().len());
    assert_eq!(
        m1.net.conv_units().iter().filter(|u| matches!(u, ConvUnit::Tt(_))).count(),
        tt_layers
    );
    for rec in &r1.iterations {
        assert!(!rec.replaced || rec.argmin_alpha < 0.5);
        assert!(rec.alphas.iter().all(|a| (0.0..=1.0).contains(&a.1)));
    }
    let json: serde_json::Value = serde_json::from_str(&r1.summary_json()).unwrap();
    assert_eq!(json["assignment"].as_array().unwrap().len(), 6);
}

#[test]
fn k_above_layer_count_is_rejected() {
    let train = gen_synthetic(16, 0).unwrap();
    let model = Model::<f32>::from_arch(&toy_arch(16), 0).unwrap();
    assert!(run_yard(model, &train, &train, &quick_config(7), 0).is_err());
    let model = Model::<f32>::from_arch(&toy_arch(16), 0).unwrap();
    assert!(run_yard(model, &train, &train, &quick_config(0), 0).is_err());
}
