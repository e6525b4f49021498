mod common;

use common::{close, gradcheck, normal_vec};
use genxfer::nn::{mlp_forward, random_mlp, Activation, AdamConfig, AdamState, Mlp, OutputActivation};
use genxfer::rng::{self, seeded};
use proptest::prelude::*;

fn activation(k: u8) -> Activation {
    match k % 3 {
        0 => Activation::Tanh,
        1 => Activation::Requ,
        _ => Activation::Relu,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backprop_matches_finite_differences(seed in any::<u64>(), act in 0u8..3) {
        let mut rng = seeded(seed);
        let net = random_mlp(&mut rng, 8, 4, activation(act));
        let x = normal_vec(&mut rng, net.input_dim());
        let g = normal_vec(&mut rng, net.output_dim());
        let bad = gradcheck(&net, &x, &g, 1e-4, 1e-7);
        prop_assert!(bad.is_none(), "{:?}", bad);
    }

    #[test]
    fn forward_is_pure(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let net = random_mlp(&mut rng, 8, 4, Activation::Tanh);
        let x = normal_vec(&mut rng, net.input_dim());
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
        let g = normal_vec(&mut rng, net.output_dim());
        prop_assert_eq!(net.backward(&x, &g).unwrap(), net.backward(&x, &g).unwrap());
    }
}

#[test]
fn scaled_tanh_bound_on_a_million_inputs() {
    let mut rng = seeded(11);
    let b = 0.75;
    let net = Mlp::new(vec![2, 16, 3], Activation::Relu, OutputActivation::ScaledTanh(b), &mut rng).unwrap();
    let mut scaled = net.clone();
    scaled.params_mut().iter_mut().for_each(|p| *p *= 40.0);
    let x = ndarray::Array2::from_shape_fn((1_000_000, 2), |_| 10.0 * rng::normal(&mut rng));
    let out = scaled.forward_batch(x.view()).unwrap();
    assert!(out.iter().all(|v| v.abs() <= b));
}

#[test]
fn straight_line_three_by_128_net() {
    let mut rng = seeded(5);
    let net = Mlp::new(vec![4, 128, 128, 128, 2], Activation::Relu, OutputActivation::Identity, &mut rng).unwrap();
    let x = [0.3, -1.2, 0.7, 2.0];
    let mut h = x.to_vec();
    for k in 0..net.num_layers() {
        let (w, b) = (net.weight(k), net.bias(k));
        let mut next = vec![0.0; w.nrows()];
        for i in 0..w.nrows() {
            let mut s = b[i];
            for j in 0..w.ncols() {
                s += w[[i, j]] * h[j];
            }
            next[i] = if k + 1 < net.num_layers() { s.max(0.0) } else { s };
        }
        h = next;
    }
    let ours = mlp_forward(&net, &x).unwrap();
    for (a, b) in ours.iter().zip(&h) {
        assert!(close(*a, *b, 1e-12, 1e-12), "{a} vs {b}");
    }
}

#[test]
fn adam_converges_on_square() {
    let mut w = [1.0f64];
    let mut st = AdamState::new(1, AdamConfig::with_lr(0.01));
    let mut steps = 0;
    while w[0].abs() >= 1e-3 && steps < 2000 {
        let g = [2.0 * w[0]];
        st.step(&mut w, &g).unwrap();
        steps += 1;
    }
    assert!(w[0].abs() < 1e-3, "w = {} after {steps} steps", w[0]);
}
