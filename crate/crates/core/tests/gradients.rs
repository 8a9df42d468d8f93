use ttyard::conv::ConvSpec;
use ttyard::nn::gradcheck::rel_error;
use ttyard::nn::{ParamRole, ParamStore, Tape};
use ttyard::rng::Rng;
use ttyard::verify::{gradient_suite, GRAD_TOL};
use ttyard::DenseTensor;

fn random(dims: &[usize], rng: &mut Rng) -> DenseTensor<f64> {
    DenseTensor::from_fn(dims, |_| rng.normal()).unwrap()
}

#[test]
fn every_layer_kind_matches_central_differences() {
    let suite = gradient_suite(3).unwrap();
    let kinds: Vec<&str> = suite.iter().map(|(n, _)| n.as_str()).collect();
    for kind in [
        "conv2d",
        "conv2d_grouped",
        "conv2d_shared_group_kernel",
        "batchnorm_train",
        "batchnorm_eval",
        "relu",
        "max_pool",
        "global_avg_pool",
        "linear",
        "residual_add",
        "softmax_cross_entropy",
        "mixed_op",
        "resnet_block",
    ] {
        assert!(kinds.contains(&kind), "missing {kind}");
    }
    for (name, report) in &suite {
        assert!(report.passes(GRAD_TOL), "{name}: {:?}", report.entries);
    }
    let linear = &suite.iter().find(|(n, _)| n == "linear").unwrap().1;
    assert!(linear.passes(1e-6));
    let mixed = &suite.iter().find(|(n, _)| n == "mixed_op").unwrap().1;
    assert!(mixed.entries.iter().any(|e| e.name == "alpha"));
}

/// A kernel shared by all groups gets the sum of the per-group gradients of
/// an ordinary group convolution whose groups hold copies of it.
#[test]
fn shared_kernel_gradient_sums_the_unshared_groups() {
    let mut rng = Rng::new(9);
    let groups = 4;
    let (cg, l) = (3, 3);
    let x = random(&[2, groups * cg, 5, 5], &mut rng);
    let kernel = random(&[cg, l, l], &mut rng);
    let replicated = DenseTensor::from_fn(&[groups, cg, l, l], |f| kernel.data()[f % (cg * l * l)]).unwrap();
    let shared = ConvSpec::new(groups * cg, groups, l).padding(1).grouped(groups, true);
    let unshared = ConvSpec::new(groups * cg, groups, l).padding(1).grouped(groups, false);
    let upstream: Vec<f64> = (0..2 * groups * 25).map(|_| rng.normal()).collect();

    let run = |w: &DenseTensor<f64>, spec: ConvSpec| {
        let mut t = Tape::new();
        let xv = t.input(x.clone(), false);
        let wv = t.input(w.clone(), true);
        let y = t.conv2d("conv", xv, wv, None, spec).unwrap();
        let out = t.value(y).clone();
        let loss = t.dot(y, &upstream).unwrap();
        t.backward(loss).unwrap();
        (out, t.grad(wv).unwrap().to_vec())
    };
    let (y_shared, g_shared) = run(&kernel, shared);
    let (y_unshared, g_unshared) = run(&replicated, unshared);
    assert!(y_shared.max_abs_diff(&y_unshared).unwrap() < 1e-12);
    for (k, &g) in g_shared.iter().enumerate() {
        let sum: f64 = (0..groups).map(|gi| g_unshared[gi * cg * l * l + k]).sum();
        assert!((g - sum).abs() < 1e-10, "coordinate {k}: {g} vs {sum}");
    }
}

#[test]
fn residual_add_passes_gradient_unchanged() {
    let mut rng = Rng::new(4);
    let a = random(&[1, 2, 3, 3], &mut rng);
    let b = random(&[1, 2, 3, 3], &mut rng);
    let up: Vec<f64> = (0..18).map(|_| rng.normal()).collect();
    let mut t = Tape::new();
    let (av, bv) = (t.input(a, true), t.input(b, true));
    let y = t.add("add", av, bv).unwrap();
    let loss = t.dot(y, &up).unwrap();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(av).unwrap(), up.as_slice());
    assert_eq!(t.grad(bv).unwrap(), up.as_slice());
}

#[test]
fn single_precision_gradients_within_one_percent() {
    let mut rng = Rng::new(21);
    let spec = ConvSpec::new(3, 4, 3).padding(1).bias(true);
    let mut store = ParamStore::<f32>::new();
    let x = store
        .add("x", random(&[2, 3, 4, 4], &mut rng).cast(), ParamRole::Weight)
        .unwrap();
    let w = store.add("w", random(&spec.weight_dims(), &mut rng).cast(), ParamRole::Weight).unwrap();
    let b = store.add("b", random(&[4], &mut rng).cast(), ParamRole::Weight).unwrap();
    let labels = [1, 3];
    let loss = |store: &ParamStore<f32>| {
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.param(store, x), t.param(store, w), t.param(store, b));
        let y = t.conv2d("conv", xv, wv, Some(bv), spec).unwrap();
        let y = t.relu(y);
        let y = t.global_avg_pool("gap", y).unwrap();
        let l = t.softmax_cross_entropy(y, &labels).unwrap();
        (t, l)
    };
    let (mut t, l) = loss(&store);
    t.backward(l).unwrap();
    t.accumulate_into(&mut store);
    let step = 1e-2f32;
    let mut worst = 0.0f64;
    for id in [w, b] {
        for k in 0..store.value(id).len() {
            let g = store.get(id).grad[k] as f64;
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + step;
            let (tp, lp) = loss(&store);
            store.get_mut(id).value.data_mut()[k] = orig - step;
            let (tm, lm) = loss(&store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (tp.value(lp).data()[0] as f64 - tm.value(lm).data()[0] as f64) / (2.0 * step as f64);
            worst = worst.max(rel_error(g, numeric));
        }
    }
    assert!(worst <= 1e-2, "worst relative error {worst}");
}
