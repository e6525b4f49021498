//! Distances between two sample sets: binned total variation for scalar
//! samples and entropic optimal transport for vectors.

use crate::data::SampleSet;
use crate::error::{dim_check, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinRange {
    /// Joint min/max of both samples.
    Auto,
    Fixed(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvConfig {
    pub n_bins: usize,
    pub range: BinRange,
}

impl Default for TvConfig {
    fn default() -> Self {
        Self {
            n_bins: 50,
            range: BinRange::Auto,
        }
    }
}

fn check_scalar(s: &SampleSet, name: &str) -> Result<()> {
    if s.is_empty() {
        return Err(Error::Empty(format!("{name} has no rows")));
    }
    dim_check(name, 1, s.dim())
}

fn histogram(values: &[f64], lo: f64, hi: f64, n_bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n_bins];
    let width = (hi - lo) / n_bins as f64;
    for &v in values {
        let k = ((v - lo) / width).floor();
        let k = if k.is_nan() || k < 0.0 { 0 } else { (k as usize).min(n_bins - 1) };
        counts[k] += 1;
    }
    counts
}

/// Half the L1 distance between the normalized histograms of `a` and `b`.
/// Values outside the range fall into the edge bins.
pub fn tv_binned(a: &SampleSet, b: &SampleSet, cfg: &TvConfig) -> Result<f64> {
    check_scalar(a, "first sample")?;
    check_scalar(b, "second sample")?;
    if cfg.n_bins == 0 {
        return Err(Error::Config("n_bins must be positive".into()));
    }
    let (xa, xb) = (a.column(0), b.column(0));
    if xa.iter().chain(&xb).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("tv input contains non-finite values".into()));
    }
    let (lo, hi) = match cfg.range {
        BinRange::Fixed(lo, hi) => {
            if !(lo < hi) {
                return Err(Error::Config(format!("bin range needs lo < hi, got ({lo}, {hi})")));
            }
            (lo, hi)
        }
        BinRange::Auto => {
            let lo = xa.iter().chain(&xb).copied().fold(f64::INFINITY, f64::min);
            let hi = xa.iter().chain(&xb).copied().fold(f64::NEG_INFINITY, f64::max);
            if lo < hi {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        }
    };
    let ca = histogram(&xa, lo, hi, cfg.n_bins);
    let cb = histogram(&xb, lo, hi, cfg.n_bins);
    // sum |ca/na - cb/nb| over a common denominator, in integers.
    let (na, nb) = (xa.len() as u128, xb.len() as u128);
    let num: u128 = ca
        .iter()
        .zip(&cb)
        .map(|(&p, &q)| (p as u128 * nb).abs_diff(q as u128 * na))
        .sum();
    Ok(num as f64 / (2 * na * nb) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cost {
    Euclidean,
    SqEuclidean,
}

impl Cost {
    pub fn name(self) -> &'static str {
        match self {
            Cost::Euclidean => "euclidean",
            Cost::SqEuclidean => "sq_euclidean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Cost::Euclidean),
            "sq_euclidean" => Ok(Cost::SqEuclidean),
            other => Err(Error::Parse(format!("unknown cost {other:?}"))),
        }
    }

    fn eval(self, x: &[f64], y: &[f64]) -> f64 {
        let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        match self {
            Cost::Euclidean => sq.sqrt(),
            Cost::SqEuclidean => sq,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once the L1 violation of the row marginal falls below this.
    pub tol: f64,
    pub cost: Cost,
    /// Geometric epsilon annealing factor in (0, 1): start at the largest
    /// cost and shrink by this factor per iteration down to `epsilon`.
    /// `None` runs every iteration at `epsilon`.
    pub anneal: Option<f64>,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iters: 10_000,
            tol: 1e-4,
            cost: Cost::Euclidean,
            anneal: Some(0.7),
        }
    }
}

impl SinkhornConfig {
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornOutput {
    /// Transport cost of the entropic plan.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// L1 row-marginal violation at the returned plan.
    pub marginal_error: f64,
}

/// `exp(x)` for `x <= 0`, branch-free so the kernel loops vectorize.
/// Relative error below 1e-14; arguments under -708 flush to zero.
#[inline(always)]
fn exp_nonpos(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let live = x >= -708.0;
    let x = x.max(-708.0);
    let t = x * LOG2E + SHIFTER;
    let k = t - SHIFTER;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let ki = (t.to_bits() as i64).wrapping_shl(12) >> 12;
    let scale = f64::from_bits(((ki + 1023) as u64) << 52);
    if live {
        p * scale
    } else {
        0.0
    }
}

/// One soft-min pass: `out_i = -eps * log sum_j w_j exp((pot_j - C_ij) / eps)`
/// with `C` row-major `n x m`.
fn softmin_rows(cost: &[f64], n: usize, m: usize, log_w: f64, pot: &[f64], eps: f64, out: &mut [f64]) {
    const L: usize = 8;
    let inv = 1.0 / eps;
    let mut buf = vec![0.0; m];
    for i in 0..n {
        let row = &cost[i * m..(i + 1) * m];
        for ((b, &p), &c) in buf.iter_mut().zip(pot).zip(row) {
            *b = (p - c) * inv;
        }
        // Independent lanes keep the reductions off a single dependency chain.
        let mut lanes = [f64::NEG_INFINITY; L];
        let chunks = buf.chunks_exact(L);
        let rest = chunks.remainder();
        for ch in chunks {
            for k in 0..L {
                lanes[k] = if ch[k] > lanes[k] { ch[k] } else { lanes[k] };
            }
        }
        let mx = lanes.iter().chain(rest).copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sums = [0.0; L];
        let chunks = buf.chunks_exact(L);
        for ch in chunks {
            for k in 0..L {
                sums[k] += exp_nonpos(ch[k] - mx);
            }
        }
        let s: f64 = sums.iter().sum::<f64>() + rest.iter().map(|v| exp_nonpos(v - mx)).sum::<f64>();
        out[i] = -eps * (log_w + mx + s.ln());
    }
}

/// Same pass over columns, streaming the row-major matrix.
fn softmin_cols(cost: &[f64], n: usize, m: usize, log_w: f64, pot: &[f64], eps: f64, out: &mut [f64]) {
    let inv = 1.0 / eps;
    let mut mx = vec![f64::NEG_INFINITY; m];
    for i in 0..n {
        let row = &cost[i * m..(i + 1) * m];
        for j in 0..m {
            mx[j] = mx[j].max((pot[i] - row[j]) * inv);
        }
    }
    let mut s = vec![0.0; m];
    for i in 0..n {
        let row = &cost[i * m..(i + 1) * m];
        for j in 0..m {
            s[j] += exp_nonpos((pot[i] - row[j]) * inv - mx[j]);
        }
    }
    for j in 0..m {
        out[j] = -eps * (log_w + mx[j] + s[j].ln());
    }
}

/// Entropic optimal transport cost between the empirical measures of `a`
/// and `b` (uniform weights), by log-domain Sinkhorn iterations.
///
/// Returns the primal cost of the regularized plan, not a debiased
/// divergence. Hitting `max_iters` is reported through `converged`.
pub fn sinkhorn_wasserstein(a: &SampleSet, b: &SampleSet, cfg: &SinkhornConfig) -> Result<SinkhornOutput> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("sinkhorn needs two non-empty samples".into()));
    }
    dim_check("sinkhorn sample dimension", a.dim(), b.dim())?;
    if !(cfg.epsilon > 0.0) || !(cfg.tol > 0.0) || cfg.max_iters == 0 {
        return Err(Error::Config("sinkhorn needs epsilon > 0, tol > 0, max_iters > 0".into()));
    }
    if let Some(q) = cfg.anneal {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Config(format!("anneal factor must lie in (0, 1), got {q}")));
        }
    }
    let (n, m) = (a.len(), b.len());
    let rows_a: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    let rows_b: Vec<Vec<f64>> = (0..m).map(|j| b.row(j).to_vec()).collect();
    let mut cost = Vec::with_capacity(n * m);
    for x in &rows_a {
        for y in &rows_b {
            cost.push(cfg.cost.eval(x, y));
        }
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("cost matrix has non-finite entries".into()));
    }
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let c_max = cost.iter().copied().fold(0.0f64, f64::max);

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut f_new = vec![0.0; n];
    let mut eps = match cfg.anneal {
        Some(_) => c_max.max(cfg.epsilon),
        None => cfg.epsilon,
    };
    softmin_cols(&cost, n, m, log_a, &f, eps, &mut g);
    let mut iterations = 0;
    let mut converged = false;
    let mut err = f64::INFINITY;
    while iterations < cfg.max_iters {
        iterations += 1;
        softmin_rows(&cost, n, m, log_b, &g, eps, &mut f_new);
        let at_target = eps <= cfg.epsilon;
        if at_target {
            // Columns are exact after the last g update; row i of the
            // current plan carries a_i exp((f_i - f_new_i) / eps).
            err = f
                .iter()
                .zip(&f_new)
                .map(|(fo, fn_)| (((fo - fn_) / eps).exp() - 1.0).abs())
                .sum::<f64>()
                / n as f64;
            if err < cfg.tol {
                converged = true;
                break;
            }
        }
        std::mem::swap(&mut f, &mut f_new);
        if let Some(q) = cfg.anneal {
            eps = (eps * q).max(cfg.epsilon);
        }
        softmin_cols(&cost, n, m, log_a, &f, eps, &mut g);
    }
    if !converged && eps > cfg.epsilon {
        err = f64::INFINITY;
    }

    let inv = 1.0 / eps;
    let mut total = 0.0;
    for i in 0..n {
        let row = &cost[i * m..(i + 1) * m];
        let mut acc = 0.0;
        for j in 0..m {
            acc += ((f[i] + g[j] - row[j]) * inv + log_a + log_b).exp() * row[j];
        }
        total += acc;
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("sinkhorn cost is not finite".into()));
    }
    Ok(SinkhornOutput {
        cost: total,
        iterations,
        converged,
        marginal_error: err,
    })
}

/// Exact 1-d Wasserstein-1 distance between two equally sized samples:
/// mean absolute difference of the sorted values.
pub fn wasserstein1_sorted(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "sorted W1 needs equal non-zero sizes, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, seeded};

    fn col(v: &[f64]) -> SampleSet {
        SampleSet::from_column(v)
    }

    #[test]
    fn tv_hand_case() {
        let cfg = TvConfig {
            n_bins: 2,
            range: BinRange::Fixed(-0.5, 1.5),
        };
        let tv = tv_binned(&col(&[0.0, 0.0, 1.0, 1.0]), &col(&[0.0, 1.0, 1.0, 1.0]), &cfg).unwrap();
        assert_eq!(tv, 0.25);
    }

    #[test]
    fn tv_identical_and_disjoint() {
        let a = col(&[0.1, 0.5, 0.9, 0.3]);
        assert_eq!(tv_binned(&a, &a, &TvConfig::default()).unwrap(), 0.0);
        let b = col(&[10.1, 10.5, 10.9]);
        for bins in [2, 7, 50] {
            let cfg = TvConfig {
                n_bins: bins,
                range: BinRange::Auto,
            };
            assert_eq!(tv_binned(&a, &b, &cfg).unwrap(), 1.0);
        }
    }

    #[test]
    fn tv_degenerate_range_and_errors() {
        let a = col(&[2.0, 2.0]);
        assert_eq!(tv_binned(&a, &a, &TvConfig::default()).unwrap(), 0.0);
        assert!(matches!(tv_binned(&SampleSet::empty(1), &a, &TvConfig::default()), Err(Error::Empty(_))));
        let two = SampleSet::from_rows(&[vec![1.0, 2.0]], 2).unwrap();
        assert!(tv_binned(&two, &two, &TvConfig::default()).is_err());
    }

    #[test]
    fn sinkhorn_two_points() {
        let cfg = SinkhornConfig::default().with_epsilon(0.01);
        let out = sinkhorn_wasserstein(&col(&[0.0]), &col(&[3.0]), &cfg).unwrap();
        assert!((out.cost - 3.0).abs() < 0.02);
        assert!(out.converged);
    }

    #[test]
    fn sinkhorn_self_transport_is_small() {
        let mut r = seeded(2);
        let pts: Vec<f64> = (0..200).map(|_| rng::normal(&mut r)).collect();
        let a = col(&pts);
        let mut prev = f64::INFINITY;
        for eps in [0.1, 0.01, 0.001] {
            let out = sinkhorn_wasserstein(&a, &a, &SinkhornConfig::default().with_epsilon(eps)).unwrap();
            assert!(out.cost < 2.0 * eps, "eps {eps}: {}", out.cost);
            assert!(out.cost <= prev);
            prev = out.cost;
        }
    }

    #[test]
    fn sinkhorn_without_annealing_agrees() {
        let mut r = seeded(8);
        let a = SampleSet::new(ndarray::Array2::from_shape_fn((40, 2), |_| rng::normal(&mut r)));
        let b = SampleSet::new(ndarray::Array2::from_shape_fn((30, 2), |_| 1.0 + rng::normal(&mut r)));
        let cfg = SinkhornConfig {
            tol: 1e-9,
            ..SinkhornConfig::default()
        };
        let x = sinkhorn_wasserstein(&a, &b, &cfg).unwrap();
        let y = sinkhorn_wasserstein(&a, &b, &SinkhornConfig { anneal: None, ..cfg }).unwrap();
        assert!(x.converged && y.converged);
        assert!((x.cost - y.cost).abs() < 1e-6);
    }

    #[test]
    fn sinkhorn_reports_non_convergence() {
        let a = col(&[0.0, 1.0, 2.0]);
        let b = col(&[0.5, 3.0]);
        let cfg = SinkhornConfig {
            epsilon: 1e-3,
            max_iters: 1,
            tol: 1e-12,
            anneal: None,
            ..SinkhornConfig::default()
        };
        let out = sinkhorn_wasserstein(&a, &b, &cfg).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn polynomial_exp_accuracy() {
        let mut x: f64 = 0.0;
        while x > -720.0 {
            let (e, f) = (x.exp(), exp_nonpos(x));
            if x >= -708.0 {
                assert!((e - f).abs() <= 1e-14 * e, "{x}: {e} vs {f}");
            } else {
                assert_eq!(f, 0.0);
            }
            x -= 0.013_7;
        }
        assert_eq!(exp_nonpos(0.0), 1.0);
    }

    #[test]
    fn sorted_w1() {
        assert_eq!(wasserstein1_sorted(&[0.0, 2.0], &[3.0, 1.0]).unwrap(), 1.0);
        assert!(wasserstein1_sorted(&[0.0], &[1.0, 2.0]).is_err());
    }
}
