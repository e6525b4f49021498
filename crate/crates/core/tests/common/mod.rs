//! Oracles shared by the integration test targets.
#![allow(dead_code)]

use genxfer::nn::{finite_diff_grad, mlp_backward, Mlp};
use genxfer::rng::{self, Rng};
use ndarray::Array2;

/// `|a - b| <= max(abs, rel * max(|a|, |b|))`
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= abs.max(rel * a.abs().max(b.abs()))
}

/// Largest violation of [`close`] between backprop and central differences
/// of `<net(x), g>` over parameters and inputs, as `(coordinate, ours, fd)`.
pub fn gradcheck(net: &Mlp, x: &[f64], g: &[f64], rel: f64, abs: f64) -> Option<(String, f64, f64)> {
    let (pg, ig) = mlp_backward(net, x, g).expect("backward");
    let dims = net.layer_dims().to_vec();
    let (hidden, output) = (net.hidden_activation(), net.output_activation());
    let dot = |out: Vec<f64>| out.iter().zip(g).map(|(o, w)| o * w).sum::<f64>();
    let fd_p = finite_diff_grad(
        |p| dot(Mlp::from_params(dims.clone(), hidden, output, p.to_vec()).unwrap().forward(x).unwrap()),
        net.params(),
        1e-5,
    );
    let fd_x = finite_diff_grad(|xx| dot(net.forward(xx).unwrap()), x, 1e-5);
    pg.iter()
        .zip(&fd_p)
        .enumerate()
        .map(|(k, (a, b))| (format!("param {k}"), *a, *b))
        .chain(ig.iter().zip(&fd_x).enumerate().map(|(k, (a, b))| (format!("input {k}"), *a, *b)))
        .find(|(_, a, b)| !close(*a, *b, rel, abs))
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng::normal(rng)).collect()
}

/// Central-difference Jacobian of `f` at `x`, `J[i][j] = d f_i / d x_j`.
pub fn numerical_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Array2<f64> {
    let d_out = f(x).len();
    let mut jac = Array2::zeros((d_out, x.len()));
    let mut p = x.to_vec();
    for j in 0..x.len() {
        p[j] = x[j] + h;
        let up = f(&p);
        p[j] = x[j] - h;
        let down = f(&p);
        p[j] = x[j];
        for i in 0..d_out {
            jac[[i, j]] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    jac
}

pub fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
}
