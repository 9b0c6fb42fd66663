use ndarray::{array, Array2};
use qcse::approx::{read_mlp, write_mlp, Activation, AdamState, Head, Mlp, MlpSpec};
use qcse::rng::{stream, Stream};
use rand::Rng;

/// Loss = sum(out * weights); its output gradient is just `weights`.
fn weighted_sum(net: &Mlp, x: &Array2<f64>, w: &Array2<f64>) -> f64 {
    (net.forward(x.view()).unwrap() * w).sum()
}

fn max_rel_error(net: &Mlp, x: &Array2<f64>, w: &Array2<f64>) -> f64 {
    let (_, cache) = net.forward_cached(x.view()).unwrap();
    let analytic = net.backward(&cache, w.view()).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..net.params().len() {
        let mut plus = net.clone();
        plus.params_mut()[i] += h;
        let mut minus = net.clone();
        minus.params_mut()[i] -= h;
        let fd = (weighted_sum(&plus, x, w) - weighted_sum(&minus, x, w)) / (2.0 * h);
        let a = analytic.param_grad[i];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
        worst = worst.max(err);
    }
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            let fd = (weighted_sum(net, &xp, w) - weighted_sum(net, &xm, w)) / (2.0 * h);
            let a = analytic.input_grad[[r, c]];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
        }
    }
    worst
}

#[test]
fn finite_difference_agreement_on_random_networks() {
    let mut rng = stream(11, Stream::Sampling);
    for trial in 0..20 {
        let input = rng.random_range(1..5);
        let depth = rng.random_range(1..3);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..9)).collect();
        let activation = if trial % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let (head, output) = if trial % 3 == 0 {
            (Head::Gaussian { log_std_min: -5.0, log_std_max: 2.0 }, 4)
        } else {
            (Head::Linear, rng.random_range(1..4))
        };
        let spec = MlpSpec::new(input, &hidden, output, activation, head);
        let net = Mlp::new(spec, &mut stream(trial, Stream::Init)).unwrap();
        let x = Array2::from_shape_fn((5, input), |_| rng.random_range(-1.5..1.5));
        let w = Array2::from_shape_fn((5, output), |_| rng.random_range(-1.0..1.0));
        let err = max_rel_error(&net, &x, &w);
        assert!(err < 1e-4, "trial {trial}: relative error {err}");
    }
}

#[test]
fn single_linear_layer_matches_closed_form() {
    // out = x W + b, loss = sum(out * g): dW = x^T g, db = colsum(g), dx = g W^T
    let spec = MlpSpec::new(2, &[], 2, Activation::Tanh, Head::Linear);
    let net = Mlp::from_params(spec, vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5]).unwrap();
    let x = array![[1.0, -1.0], [2.0, 0.5]];
    let g = array![[1.0, 0.0], [0.5, 2.0]];
    let (out, cache) = net.forward_cached(x.view()).unwrap();
    assert_eq!(out, array![[-1.5, -2.5], [4.0, 5.5]]);
    let b = net.backward(&cache, g.view()).unwrap();
    assert_eq!(b.param_grad, vec![2.0, 4.0, -0.75, 1.0, 1.5, 2.0]);
    assert_eq!(b.input_grad, array![[1.0, 3.0], [4.5, 9.5]]);
}

#[test]
fn fits_a_straight_line() {
    let spec = MlpSpec::new(1, &[16], 1, Activation::Tanh, Head::Linear);
    let mut net = Mlp::new(spec, &mut stream(0, Stream::Init)).unwrap();
    let mut opt = AdamState::new(net.params().len(), 1e-2);
    let x = Array2::from_shape_fn((64, 1), |(i, _)| -1.0 + 2.0 * i as f64 / 63.0);
    let y = x.mapv(|v| 0.7 * v - 0.2);
    for _ in 0..3000 {
        let (out, cache) = net.forward_cached(x.view()).unwrap();
        let g = (&out - &y) * (2.0 / 64.0);
        let grad = net.backward(&cache, g.view()).unwrap().param_grad;
        opt.step(net.params_mut(), &grad).unwrap();
    }
    let out = net.forward(x.view()).unwrap();
    let mse = (&out - &y).mapv(|v| v * v).mean().unwrap();
    assert!(mse < 1e-4, "mse {mse}");
}

#[test]
fn same_seed_same_network_and_checkpoint_restores_outputs() {
    let spec = MlpSpec::new(3, &[8, 8], 2, Activation::Relu, Head::Linear);
    let a = Mlp::new(spec.clone(), &mut stream(5, Stream::Init)).unwrap();
    let b = Mlp::new(spec.clone(), &mut stream(5, Stream::Init)).unwrap();
    let c = Mlp::new(spec, &mut stream(6, Stream::Init)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.bin");
    write_mlp(&a, &mut std::fs::File::create(&path).unwrap()).unwrap();
    let back = read_mlp(&mut std::fs::File::open(&path).unwrap()).unwrap();
    let x = array![[0.1, 0.2, 0.3], [-1.0, 0.0, 1.0]];
    assert_eq!(a.forward(x.view()).unwrap(), back.forward(x.view()).unwrap());
}

#[test]
fn squared_loss_gradient_of_a_linear_layer() {
    // zero bias: d/dW mean ||XW - Y||^2 = 2 X^T (XW - Y) / n
    let spec = MlpSpec::new(3, &[], 2, Activation::Relu, Head::Linear);
    let mut rng = stream(1, Stream::Sampling);
    let mut params: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    params[6] = 0.0;
    params[7] = 0.0;
    let w = Array2::from_shape_vec((3, 2), params[..6].to_vec()).unwrap();
    let net = Mlp::from_params(spec, params).unwrap();
    let x = Array2::from_shape_fn((7, 3), |_| rng.random_range(-1.0..1.0));
    let y = Array2::from_shape_fn((7, 2), |_| rng.random_range(-1.0..1.0));
    let (out, cache) = net.forward_cached(x.view()).unwrap();
    let g = (&out - &y) * (2.0 / 7.0);
    let got = net.backward(&cache, g.view()).unwrap().param_grad;
    let want = x.t().dot(&(x.dot(&w) - &y)) * (2.0 / 7.0);
    for (a, b) in got[..6].iter().zip(want.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn forward_matches_a_scalar_evaluator() {
    let spec = MlpSpec::new(2, &[16], 1, Activation::Tanh, Head::Linear);
    let net = Mlp::new(spec, &mut stream(13, Stream::Init)).unwrap();
    let p = net.params();
    let x = [0.37, -1.2];
    // layout: W1 (2x16 row-major), b1 (16), W2 (16x1), b2
    let mut out = p[2 * 16 + 16 + 16];
    for j in 0..16 {
        let z = x[0] * p[j] + x[1] * p[16 + j] + p[32 + j];
        out += z.tanh() * p[48 + j];
    }
    let got = net.forward(array![[0.37, -1.2]].view()).unwrap()[[0, 0]];
    assert!((got - out).abs() < 1e-12);
}
