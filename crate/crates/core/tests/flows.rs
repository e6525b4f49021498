mod common;

use common::{mean_var, numerical_jacobian};
use genxfer::flows::{
    flow_forward, flow_inverse, flow_sample, log_abs_det, nll_loss, train_flow, zero_pad_lift, BaseDensity,
    CouplingFlow, CouplingKind, FlowConfig, FnMap,
};
use genxfer::nn::{Activation, NetShape};
use genxfer::rng::{self, seeded, Rng};
use genxfer::train::{Conditioning, LrSchedule, TrainOpts};
use genxfer::SampleSet;
use ndarray::{array, Array2};
use proptest::prelude::*;

fn random_flow(d_x: usize, d_c: usize, kind: CouplingKind, rng: &mut Rng) -> CouplingFlow {
    let cfg = FlowConfig {
        n_coupling: 4,
        kind,
        net: NetShape::new(16, 2, Activation::Tanh),
        zero_init: false,
        ..FlowConfig::default()
    };
    CouplingFlow::new(d_x, d_c, &cfg, BaseDensity::StdGaussian, rng).unwrap()
}

fn gaussian_rows(n: usize, d: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng::normal(rng))
}

#[test]
fn round_trip_on_a_thousand_points() {
    let mut rng = seeded(7);
    for (d_x, d_c) in [(1, 0), (2, 0), (3, 2), (4, 1)] {
        for kind in [CouplingKind::Additive, CouplingKind::Affine] {
            let flow = random_flow(d_x, d_c, kind, &mut rng);
            let x = gaussian_rows(1000, d_x, &mut rng) * 2.0;
            let c = (d_c > 0).then(|| gaussian_rows(1000, d_c, &mut rng));
            let (v, _) = flow.forward_batch(x.view(), c.as_ref().map(|c| c.view())).unwrap();
            let back = flow.inverse_batch(v.view(), c.as_ref().map(|c| c.view())).unwrap();
            let err = (&back - &x).iter().fold(0.0f64, |m, e| m.max(e.abs()));
            assert!(err < 1e-8, "d_x {d_x} {kind:?}: {err:e}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn log_det_matches_numerical_jacobian(seed in any::<u64>(), d_x in 2usize..=4, affine in any::<bool>()) {
        let mut rng = seeded(seed);
        let kind = if affine { CouplingKind::Affine } else { CouplingKind::Additive };
        let flow = random_flow(d_x, 1, kind, &mut rng);
        let x: Vec<f64> = (0..d_x).map(|_| rng::normal(&mut rng)).collect();
        let c = [rng::normal(&mut rng)];
        let (_, log_det) = flow_forward(&flow, &x, Some(&c)).unwrap();
        let jac = numerical_jacobian(|p| flow_forward(&flow, p, Some(&c)).unwrap().0, &x, 1e-5);
        let numeric = log_abs_det(&jac);
        prop_assert!((log_det - numeric).abs() < 1e-4, "{} vs {}", log_det, numeric);
        let exact = flow.jacobian(&x, Some(&c)).unwrap();
        prop_assert!((&exact - &jac).iter().all(|e| e.abs() < 1e-5));
    }
}

#[test]
fn identity_flow_nll_is_gaussian_entropy() {
    let flow = CouplingFlow::identity(1, BaseDensity::StdGaussian);
    let at_zero = nll_loss(&flow, &SampleSet::from_column(&[0.0]), None).unwrap().loss;
    assert!((at_zero - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    let mut rng = seeded(3);
    let data = SampleSet::new(gaussian_rows(10_000, 1, &mut rng));
    let mean_nll = nll_loss(&flow, &data, None).unwrap().loss / 10_000.0;
    let entropy = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    assert!((mean_nll - entropy).abs() < 0.02, "{mean_nll}");
}

#[test]
fn change_of_variables_mass_is_one() {
    let mut rng = seeded(19);
    let cfg = FlowConfig {
        n_coupling: 4,
        net: NetShape::new(8, 1, Activation::Tanh),
        zero_init: false,
        ..FlowConfig::default()
    };
    // Shrink the weights so the density stays well inside the grid.
    let shrink = |mut f: CouplingFlow| {
        f.couplings_mut().for_each(|c| c.omega.params_mut().iter_mut().for_each(|p| *p *= 0.3));
        f
    };
    let f1 = shrink(CouplingFlow::new(1, 0, &cfg, BaseDensity::StdGaussian, &mut rng).unwrap());
    let h = 0.01;
    let xs: Vec<f64> = (0..=1200).map(|k| -6.0 + k as f64 * h).collect();
    let pts = Array2::from_shape_fn((xs.len(), 1), |(i, _)| xs[i]);
    let mass1: f64 = f1.log_density_batch(pts.view(), None).unwrap().iter().map(|l| l.exp() * h).sum();
    assert!((mass1 - 1.0).abs() < 1e-2, "{mass1}");

    let f2 = shrink(CouplingFlow::new(2, 0, &cfg, BaseDensity::StdGaussian, &mut rng).unwrap());
    let h = 0.04;
    let g: Vec<f64> = (0..=300).map(|k| -6.0 + k as f64 * h).collect();
    let pts = Array2::from_shape_fn((g.len() * g.len(), 2), |(i, j)| if j == 0 { g[i / g.len()] } else { g[i % g.len()] });
    let mass2: f64 = f2.log_density_batch(pts.view(), None).unwrap().iter().map(|l| l.exp() * h * h).sum();
    assert!((mass2 - 1.0).abs() < 1e-2, "{mass2}");
}

fn fit_opts(epochs: usize, seed: u64) -> TrainOpts {
    TrainOpts {
        epochs,
        batch_size: 256,
        lr: 1e-2,
        seed,
        lr_schedule: LrSchedule::Cosine,
        ..TrainOpts::default()
    }
}

#[test]
fn trained_flow_matches_shifted_gaussian_moments() {
    let mut rng = seeded(1);
    let data = SampleSet::new(gaussian_rows(10_000, 1, &mut rng) + 2.0);
    let cfg = FlowConfig {
        n_coupling: 2,
        ..FlowConfig::default()
    };
    let mut flow = CouplingFlow::new(1, 0, &cfg, BaseDensity::StdGaussian, &mut rng).unwrap();
    let trace = train_flow(&mut flow, &data, Conditioning::None, &fit_opts(30, 2)).unwrap();
    assert!(trace.epoch_losses.last() < trace.epoch_losses.first());
    let gen = flow_sample(&flow, None, 10_000, &mut seeded(3)).unwrap();
    let (m, v) = mean_var(&gen.column(0));
    assert!((m - 2.0).abs() < 0.1, "mean {m}");
    assert!((v.sqrt() - 1.0).abs() < 0.1, "sd {}", v.sqrt());
}

#[test]
fn zero_epochs_and_reruns() {
    let mut rng = seeded(4);
    let data = SampleSet::new(gaussian_rows(500, 2, &mut rng));
    let flow = random_flow(2, 0, CouplingKind::Affine, &mut rng);
    let mut same = flow.clone();
    train_flow(&mut same, &data, Conditioning::None, &fit_opts(0, 1)).unwrap();
    assert_eq!(same, flow);

    let (mut a, mut b) = (flow.clone(), flow.clone());
    let ta = train_flow(&mut a, &data, Conditioning::None, &fit_opts(3, 9)).unwrap();
    let tb = train_flow(&mut b, &data, Conditioning::None, &fit_opts(3, 9)).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(a, b);
}

#[test]
fn sampling_identity_and_shift_flows() {
    let id = CouplingFlow::identity(2, BaseDensity::StdGaussian);
    let s = flow_sample(&id, None, 5, &mut seeded(8)).unwrap();
    let mut r = seeded(8);
    let base: Vec<f64> = (0..10).map(|_| rng::normal(&mut r)).collect();
    assert_eq!(s.as_array().iter().copied().collect::<Vec<_>>(), base);
    assert!(flow_sample(&id, None, 0, &mut seeded(8)).unwrap().is_empty());

    // One additive layer with zero weights and bias c shifts by c.
    let cfg = FlowConfig {
        n_coupling: 1,
        kind: CouplingKind::Additive,
        ..FlowConfig::default()
    };
    let mut shift = CouplingFlow::new(1, 0, &cfg, BaseDensity::StdGaussian, &mut seeded(1)).unwrap();
    let layer = shift.couplings_mut().next().unwrap();
    let last = layer.omega.num_layers() - 1;
    layer.omega.bias_mut(last).fill(-1.5);
    let x = flow_sample(&shift, None, 20_000, &mut seeded(2)).unwrap();
    let (m, _) = mean_var(&x.column(0));
    assert!((m - 1.5).abs() < 0.03, "{m}");
    assert!((flow_inverse(&shift, &[0.0], None).unwrap()[0] - 1.5).abs() < 1e-15);
}

#[test]
fn zero_pad_lift_examples() {
    let lift = zero_pad_lift(&CouplingFlow::identity(3, BaseDensity::StdGaussian), &[0.1, -2.0, 4.0], None, 1e-12).unwrap();
    assert_eq!(lift.y, vec![0.1, -2.0, 4.0]);
    assert_eq!(lift.jac, Array2::eye(3));

    let double = FnMap {
        dim: 1,
        forward: |x: &[f64]| vec![2.0 * x[0]],
        inverse: |y: &[f64]| vec![y[0] / 2.0],
        jacobian: |_: &[f64]| array![[2.0]],
        inverse_jacobian: |_: &[f64]| array![[0.5]],
    };
    let lift = zero_pad_lift(&double, &[1.25], None, 1e-12).unwrap();
    assert_eq!(lift.y, vec![2.5]);
    assert_eq!(lift.jac, array![[2.0]]);
}

#[test]
fn zero_pad_lift_of_a_trained_flow() {
    let mut rng = seeded(12);
    let data = SampleSet::new(Array2::from_shape_fn((2000, 2), |(_, j)| {
        let e = rng::normal(&mut rng);
        if j == 0 { e } else { e * e * 0.5 + rng::normal(&mut rng) * 0.3 }
    }));
    let mut flow = random_flow(2, 0, CouplingKind::Affine, &mut rng);
    train_flow(&mut flow, &data, Conditioning::None, &fit_opts(5, 1)).unwrap();
    for x in [[0.3, -0.4], [1.5, 2.0], [-1.0, 0.1]] {
        let lift = zero_pad_lift(&flow, &x, None, 1e-8).unwrap();
        let (y, _) = flow_forward(&flow, &x, None).unwrap();
        assert!(lift.y.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-8));
        let jac = numerical_jacobian(|p| flow_forward(&flow, p, None).unwrap().0, &x, 1e-5);
        assert!((&lift.jac - &jac).iter().all(|e| e.abs() < 1e-4), "{:?} vs {jac:?}", lift.jac);
    }
}
