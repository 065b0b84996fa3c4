use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Graph;
use crate::masks::{MaskKind, MaskLayer, MaskSet};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn logits(spec: &ModelSpec, params: &ParameterSet, x: &[f64], mode: Mode, masks: Option<&MaskSet>) -> Vec<f64> {
    let batch = x.len() / spec.input_numel();
    let mut g = Graph::new();
    let p = params.to_graph(&mut g, false).unwrap();
    let xn = g.constant(&[batch, spec.input_numel()], x.to_vec()).unwrap();
    let m = masks.map(|m| m.to_graph(&mut g, false).unwrap());
    let out = forward(&mut g, spec, &p, xn, mode, m.as_deref()).unwrap();
    g.values(out).to_vec()
}

fn loss(spec: &ModelSpec, params: &ParameterSet, x: &[f64], t: &[f64], masks: &MaskSet) -> f64 {
    loss_and_gradient(spec, params, x, t, Mode::Train, Some(masks)).unwrap().0
}

/// Identity dense layer into a dropout layer, so the logits expose the dropout output.
fn dropout_probe(p: f64) -> (ModelSpec, ParameterSet) {
    let spec = ModelSpec::new(
        [1, 1, 2],
        2,
        vec![
            Layer::Dropout { rate: p, index: 1 },
            Layer::Dense {
                inputs: 2,
                outputs: 2,
                bias: true,
            },
        ],
    )
    .unwrap();
    let layout = Arc::new(Layout::for_spec(&spec));
    let params = ParameterSet::unflatten(layout, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    (spec, params)
}

#[test]
fn dropout_scales_kept_units() {
    let (spec, params) = dropout_probe(0.5);
    let masks = MaskSet::new(
        vec![MaskLayer::new(1, 2, vec![1.0, 0.0]).unwrap()],
        MaskKind::Binary,
        0.5,
    )
    .unwrap();
    assert_eq!(logits(&spec, &params, &[2.0, -4.0], Mode::Train, Some(&masks)), vec![4.0, 0.0]);
    assert_eq!(logits(&spec, &params, &[2.0, -4.0], Mode::Eval, None), vec![2.0, -4.0]);
}

#[test]
fn train_mode_requires_matching_masks() {
    let (spec, params) = dropout_probe(0.5);
    let mut g = Graph::new();
    let p = params.to_graph(&mut g, false).unwrap();
    let x = g.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(
        forward(&mut g, &spec, &p, x, Mode::Train, None),
        Err(Error::MaskMismatch(_))
    ));
    let wrong = g.constant(&[2, 2], vec![1.0; 4]).unwrap();
    assert!(matches!(
        forward(&mut g, &spec, &p, x, Mode::Train, Some(&[wrong])),
        Err(Error::MaskMismatch(_))
    ));
}

#[test]
fn zero_rate_train_equals_eval_bitwise() {
    let spec = build_mlp(16, 8, 2, 4, 0.0).unwrap();
    let params = ParameterSet::init(&spec, &mut rng(3));
    let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.3).sin()).collect();
    let ones = MaskSet::ones(&spec, 2).unwrap();
    let train = logits(&spec, &params, &x, Mode::Train, Some(&ones));
    let eval = logits(&spec, &params, &x, Mode::Eval, None);
    assert!(train.iter().zip(&eval).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn eval_mode_ignores_rate() {
    let spec = build_mlp(9, 5, 2, 3, 0.75).unwrap();
    let params = ParameterSet::init(&spec, &mut rng(4));
    let x: Vec<f64> = (0..9).map(|i| i as f64 / 9.0).collect();
    let plain = spec.with_dropout_rate(0.0).unwrap();
    assert_eq!(
        logits(&spec, &params, &x, Mode::Eval, None),
        logits(&plain, &params, &x, Mode::Eval, None)
    );
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let l = g.constant(&[1, 5], vec![0.3; 5]).unwrap();
    let t = g.constant(&[1, 5], one_hot(&[2], 5)).unwrap();
    let ce = cross_entropy(&mut g, l, t).unwrap();
    assert!((g.scalar(ce) - 5f64.ln()).abs() < 1e-14);

    let l = g.constant(&[1, 2], vec![10.0, -10.0]).unwrap();
    let t = g.constant(&[1, 2], vec![1.0, 0.0]).unwrap();
    let ce = cross_entropy(&mut g, l, t).unwrap();
    // -log sigmoid(20) = log1p(exp(-20))
    let expected = (-20f64).exp().ln_1p();
    assert!((g.scalar(ce) - expected).abs() < 1e-15, "{}", g.scalar(ce));
    assert!((expected - 2.06e-9).abs() < 1e-11);

    let bad = g.constant(&[1, 2], vec![0.5, 0.6]).unwrap();
    assert!(matches!(cross_entropy(&mut g, l, bad), Err(Error::InvalidArgument(_))));
}

#[test]
fn cross_entropy_survives_large_logits() {
    let mut g = Graph::new();
    let l = g.constant(&[1, 3], vec![1000.0, 0.0, -1000.0]).unwrap();
    let t = g.constant(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
    let ce = cross_entropy(&mut g, l, t).unwrap();
    assert!((g.scalar(ce) - 1000.0).abs() < 1e-9);
}

#[test]
fn mlp_parameter_count() {
    let spec = build_mlp(784, 512, 3, 10, 0.25).unwrap();
    assert_eq!(spec.num_dropout_layers(), 3);
    assert_eq!(spec.parameter_count(), 932_362);
    assert_eq!(Layout::for_spec(&spec).total(), 932_362);
    assert_eq!(spec.input_shape(), [1, 28, 28]);
    assert_eq!(784 + spec.dropout_widths().iter().sum::<usize>(), 2320);

    let logistic = build_mlp(784, 512, 0, 10, 0.25).unwrap();
    assert_eq!(logistic.num_dropout_layers(), 0);
    assert_eq!(logistic.parameter_count(), 7850);
}

#[test]
fn layout_is_contiguous() {
    let spec = build_lenet_lite([1, 28, 28], 10, 0.5).unwrap();
    let layout = Layout::for_spec(&spec);
    let mut next = 0;
    for e in layout.entries() {
        assert_eq!(e.offset, next);
        next += e.len();
    }
    assert_eq!(next, spec.parameter_count());
}

#[test]
fn lenet_shapes() {
    let spec = build_lenet_lite([1, 28, 28], 10, 0.75).unwrap();
    assert_eq!(spec.dropout_widths(), vec![588]);
    let params = ParameterSet::init(&spec, &mut rng(5));
    let x: Vec<f64> = (0..2 * 784).map(|i| ((i % 97) as f64 / 97.0) - 0.5).collect();
    let out = logits(&spec, &params, &x, Mode::Eval, None);
    assert_eq!(out.len(), 20);
    assert!(out.iter().all(|v| v.is_finite()));
}

#[test]
fn spec_validation() {
    assert!(build_mlp(4, 3, 1, 2, 1.0).is_err());
    assert!(build_mlp(4, 3, 1, 2, -0.1).is_err());
    let bad = ModelSpec::new(
        [1, 1, 4],
        2,
        vec![Layer::Dense {
            inputs: 3,
            outputs: 2,
            bias: true,
        }],
    );
    assert!(bad.is_err());
    let last_not_dense = ModelSpec::new(
        [1, 1, 2],
        2,
        vec![
            Layer::Dense {
                inputs: 2,
                outputs: 2,
                bias: true,
            },
            Layer::Activation(Activation::Tanh),
        ],
    );
    assert!(last_not_dense.is_err());
}

fn finite_difference_check(spec: &ModelSpec, seed: u64, batch: usize) {
    let mut r = rng(seed);
    let params = ParameterSet::init(spec, &mut r);
    let x: Vec<f64> = (0..batch * spec.input_numel()).map(|i| ((i * 7 % 11) as f64 / 11.0) - 0.4).collect();
    let labels: Vec<usize> = (0..batch).map(|b| b % spec.num_classes()).collect();
    let (grad, masks) = client_gradient(spec, &params, &x, &labels, &mut r).unwrap();
    let t = one_hot(&labels, spec.num_classes());
    let flat = params.flatten();
    let h = 1e-5;
    for (i, &analytic) in grad.values().iter().enumerate() {
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let lp = loss(spec, &ParameterSet::unflatten(Arc::clone(params.layout()), &plus).unwrap(), &x, &t, &masks);
        let lm = loss(spec, &ParameterSet::unflatten(Arc::clone(params.layout()), &minus).unwrap(), &x, &t, &masks);
        let numeric = (lp - lm) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
        assert!(rel <= 1e-6, "param {i}: analytic {analytic}, numeric {numeric}, rel {rel}");
    }
}

#[test]
fn client_gradient_matches_finite_differences() {
    finite_difference_check(&build_mlp(6, 5, 2, 3, 0.5).unwrap(), 21, 2);
    finite_difference_check(&build_mlp(4, 8, 1, 2, 0.5).unwrap(), 22, 1);
}

#[test]
fn lenet_gradient_matches_finite_differences() {
    let spec = ModelSpec::new(
        [2, 5, 5],
        3,
        vec![
            Layer::Conv {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride: 2,
                pad: 1,
            },
            Layer::Activation(Activation::Sigmoid),
            Layer::Conv {
                in_channels: 3,
                out_channels: 2,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            Layer::Activation(Activation::Sigmoid),
            Layer::Flatten,
            Layer::Dropout { rate: 0.5, index: 1 },
            Layer::Dense {
                inputs: 18,
                outputs: 3,
                bias: true,
            },
        ],
    )
    .unwrap();
    finite_difference_check(&spec, 23, 2);
}

#[test]
fn client_gradient_is_seeded() {
    let spec = build_mlp(9, 6, 2, 3, 0.5).unwrap();
    let params = ParameterSet::init(&spec, &mut rng(1));
    let x = vec![0.25; 18];
    let a = client_gradient(&spec, &params, &x, &[0, 2], &mut rng(9)).unwrap();
    let b = client_gradient(&spec, &params, &x, &[0, 2], &mut rng(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_rate_gradient_ignores_seed() {
    let spec = build_mlp(9, 6, 2, 3, 0.0).unwrap();
    let params = ParameterSet::init(&spec, &mut rng(1));
    let x = vec![0.25; 9];
    let (ga, ma) = client_gradient(&spec, &params, &x, &[1], &mut rng(1)).unwrap();
    let (gb, _) = client_gradient(&spec, &params, &x, &[1], &mut rng(2)).unwrap();
    assert_eq!(ga, gb);
    assert_eq!(ma, MaskSet::ones(&spec, 1).unwrap());
    let (_, ge) = loss_and_gradient(&spec, &params, &x, &one_hot(&[1], 3), Mode::Eval, None).unwrap();
    assert_eq!(ga, ge);
}

#[test]
fn client_gradient_rejects_bad_labels() {
    let spec = build_mlp(4, 3, 1, 2, 0.5).unwrap();
    let params = ParameterSet::init(&spec, &mut rng(1));
    assert!(client_gradient(&spec, &params, &[0.0; 4], &[2], &mut rng(1)).is_err());
    assert!(client_gradient(&spec, &params, &[0.0; 4], &[0, 1], &mut rng(1)).is_err());
    assert!(client_gradient(&spec, &params, &[0.0; 5], &[0], &mut rng(1)).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let spec = build_mlp(9, 4, 1, 3, 0.25).unwrap();
    let params = ParameterSet::init(&spec, &mut rng(8));
    save_checkpoint(&path, &spec, 8, &params).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    assert_eq!(bytes.len() - nl - 1, 8 * spec.parameter_count());
    let (loaded, seed) = load_checkpoint(&path, &spec).unwrap();
    assert_eq!(seed, 8);
    assert_eq!(loaded.flatten(), params.flatten());
    let other = build_mlp(9, 5, 1, 3, 0.25).unwrap();
    assert!(load_checkpoint(&path, &other).is_err());
    let rerated = spec.with_dropout_rate(0.5).unwrap();
    assert_eq!(load_checkpoint(&path, &rerated).unwrap().0.flatten(), params.flatten());
}

proptest! {
    #[test]
    fn flatten_unflatten_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 67)) {
        let spec = build_mlp(4, 8, 1, 3, 0.1).unwrap();
        let layout = Arc::new(Layout::for_spec(&spec));
        let v = &values[..];
        let p = ParameterSet::unflatten(layout, v).unwrap();
        prop_assert_eq!(p.flatten(), v.to_vec());
    }
}

#[test]
fn init_scale_depends_on_the_architecture() {
    let max_abs = |p: &ParameterSet| p.flatten().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mlp = build_mlp(784, 64, 2, 10, 0.25).unwrap();
    assert!(max_abs(&ParameterSet::init(&mlp, &mut rng(0))) <= 1.0 / 784f64.sqrt().min(64f64.sqrt()));
    let lenet = build_lenet_lite([1, 28, 28], 10, 0.25).unwrap();
    let m = max_abs(&ParameterSet::init(&lenet, &mut rng(0)));
    assert!(m <= 0.5 && m > 0.45, "{m}");
}
