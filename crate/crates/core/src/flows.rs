//! Coupling normalizing flows with exact likelihoods.
//!
//! A [`CouplingFlow`] maps data `x` to a base variable `v = T(x, c)` through
//! a stack of coupling layers and fixed permutations. Each coupling layer
//! keeps one block of coordinates and shifts (additive) or scales and
//! shifts (affine) the other block by a network of the kept block and the
//! conditioning. Both kinds invert in closed form, and the log-determinant
//! of an affine layer is the sum of its bounded log-scales.

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::data::SampleSet;
use crate::error::{dim_check, Error, Result};
use crate::nn::{ForwardCache, Mlp, NetShape, OutputActivation};
use crate::rng::{self, Rng};
use crate::train::{self, Conditioning, LossAndGrads, TrainOpts, TrainTrace, Trainable};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingKind {
    Additive,
    Affine,
}

/// Density of the base variable `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseDensity {
    StdGaussian,
    /// Logit of a uniform variable (standard logistic density).
    UniformLogit,
}

impl BaseDensity {
    fn log_prob_row(self, v: &[f64]) -> f64 {
        match self {
            BaseDensity::StdGaussian => {
                -0.5 * v.iter().map(|x| x * x).sum::<f64>() - 0.5 * v.len() as f64 * LN_2PI
            }
            BaseDensity::UniformLogit => v.iter().map(|&x| -softplus(x) - softplus(-x)).sum(),
        }
    }

    /// Derivative of `-log p(v)` for one coordinate.
    fn neg_log_prob_grad(self, x: f64) -> f64 {
        match self {
            BaseDensity::StdGaussian => x,
            BaseDensity::UniformLogit => (0.5 * x).tanh(),
        }
    }

    fn draw(self, rng: &mut Rng) -> f64 {
        match self {
            BaseDensity::StdGaussian => rng::normal(rng),
            BaseDensity::UniformLogit => {
                let u = rng::uniform(rng, 0.0, 1.0).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
                (u / (1.0 - u)).ln()
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    pub kind: CouplingKind,
    /// Coordinates passed through unchanged and fed to `omega`.
    pub part1: Vec<usize>,
    /// Coordinates transformed by the layer.
    pub part2: Vec<usize>,
    /// `(x[part1], c) -> shift` or `-> (shift, raw log-scale)`.
    pub omega: Mlp,
    pub log_scale_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlowLayer {
    Coupling(CouplingLayer),
    /// `y[j] = x[perm[j]]`
    Permutation(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingFlow {
    pub layers: Vec<FlowLayer>,
    pub d_x: usize,
    pub d_c: usize,
    pub base: BaseDensity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub n_coupling: usize,
    pub kind: CouplingKind,
    pub net: NetShape,
    pub log_scale_bound: f64,
    /// Start every coupling layer at the identity map.
    pub zero_init: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_coupling: 6,
            kind: CouplingKind::Affine,
            net: NetShape::new(64, 2, crate::nn::Activation::Relu),
            log_scale_bound: 5.0,
            zero_init: true,
        }
    }
}

struct LayerCache {
    x_in: Array2<f64>,
    omega: Option<ForwardCache>,
    /// Affine only: bounded log-scale and its `1 - tanh^2` factor.
    s: Option<(Array2<f64>, Array2<f64>)>,
}

impl CouplingLayer {
    fn omega_input(&self, x: ArrayView2<'_, f64>, cond: Option<ArrayView2<'_, f64>>) -> Array2<f64> {
        let n = x.nrows();
        let p1 = self.part1.len();
        let d_c = cond.map_or(0, |c| c.ncols());
        let mut inp = Array2::zeros((n, p1 + d_c));
        for (k, &j) in self.part1.iter().enumerate() {
            inp.column_mut(k).assign(&x.column(j));
        }
        if let Some(c) = cond {
            if c.nrows() == n {
                inp.slice_mut(s![.., p1..]).assign(&c);
            } else {
                inp.slice_mut(s![.., p1..]).assign(&c.row(0));
            }
        }
        inp
    }

    fn split_omega(&self, o: &Array2<f64>) -> (Array2<f64>, Option<(Array2<f64>, Array2<f64>)>) {
        let m = self.part2.len();
        let t = o.slice(s![.., ..m]).to_owned();
        match self.kind {
            CouplingKind::Additive => (t, None),
            CouplingKind::Affine => {
                let b = self.log_scale_bound;
                let raw = o.slice(s![.., m..]);
                let th = raw.mapv(|r| (r / b).tanh());
                let s = th.mapv(|t| b * t);
                let ds = th.mapv(|t| 1.0 - t * t);
                (t, Some((s, ds)))
            }
        }
    }

    fn forward(
        &self,
        x: ArrayView2<'_, f64>,
        cond: Option<ArrayView2<'_, f64>>,
        logdet: &mut Array1<f64>,
        keep: bool,
    ) -> Result<(Array2<f64>, Option<LayerCache>)> {
        let inp = self.omega_input(x, cond);
        let (o, ocache) = if keep {
            let (o, c) = self.omega.forward_cached(inp.view())?;
            (o, Some(c))
        } else {
            (self.omega.forward_batch(inp.view())?, None)
        };
        let (t, s) = self.split_omega(&o);
        let mut y = x.to_owned();
        for (k, &j) in self.part2.iter().enumerate() {
            let mut col = y.column_mut(j);
            match &s {
                None => col += &t.column(k),
                Some((sc, _)) => {
                    ndarray::Zip::from(&mut col)
                        .and(sc.column(k))
                        .and(t.column(k))
                        .for_each(|y, &s, &t| *y = *y * s.exp() + t);
                }
            }
        }
        if let Some((sc, _)) = &s {
            *logdet += &sc.sum_axis(Axis(1));
        }
        let cache = keep.then(|| LayerCache {
            x_in: x.to_owned(),
            omega: ocache,
            s,
        });
        Ok((y, cache))
    }

    fn inverse(&self, y: ArrayView2<'_, f64>, cond: Option<ArrayView2<'_, f64>>) -> Result<Array2<f64>> {
        let inp = self.omega_input(y, cond);
        let o = self.omega.forward_batch(inp.view())?;
        let (t, s) = self.split_omega(&o);
        let mut x = y.to_owned();
        for (k, &j) in self.part2.iter().enumerate() {
            let mut col = x.column_mut(j);
            col -= &t.column(k);
            if let Some((sc, _)) = &s {
                ndarray::Zip::from(&mut col)
                    .and(sc.column(k))
                    .for_each(|x, &s| *x *= (-s).exp());
            }
        }
        Ok(x)
    }

    /// Pulls `dy` (and a per-row log-det coefficient) back through the layer.
    fn backward(
        &self,
        cache: &LayerCache,
        dy: &Array2<f64>,
        dlogdet: &Array1<f64>,
        grads: &mut [f64],
        dcond: Option<&mut Array2<f64>>,
    ) -> Result<Array2<f64>> {
        let n = dy.nrows();
        let m = self.part2.len();
        let mut dx = dy.clone();
        let mut dout = Array2::zeros((n, self.omega.output_dim()));
        for (k, &j) in self.part2.iter().enumerate() {
            dout.column_mut(k).assign(&dy.column(j));
            if let Some((sc, dsr)) = &cache.s {
                for i in 0..n {
                    let e = sc[[i, k]].exp();
                    let g = dy[[i, j]];
                    dx[[i, j]] = g * e;
                    let ds = g * cache.x_in[[i, j]] * e + dlogdet[i];
                    dout[[i, m + k]] = ds * dsr[[i, k]];
                }
            }
        }
        let ocache = cache.omega.as_ref().expect("cached forward");
        let need_input = !self.part1.is_empty() || dcond.is_some();
        let din = self.omega.backward_batch(ocache, dout.view(), grads, need_input)?;
        if let Some(din) = din {
            for (k, &j) in self.part1.iter().enumerate() {
                let mut col = dx.column_mut(j);
                col += &din.column(k);
            }
            if let Some(dc) = dcond {
                let p1 = self.part1.len();
                *dc += &din.slice(s![.., p1..]);
            }
        }
        Ok(dx)
    }
}

fn permute_cols(x: ArrayView2<'_, f64>, perm: &[usize]) -> Array2<f64> {
    x.select(Axis(1), perm)
}

fn unpermute_cols(y: ArrayView2<'_, f64>, perm: &[usize]) -> Array2<f64> {
    let mut x = Array2::zeros(y.raw_dim());
    for (j, &p) in perm.iter().enumerate() {
        x.column_mut(p).assign(&y.column(j));
    }
    x
}

/// Forward evaluation with caches for the backward pass.
pub struct FlowTape {
    caches: Vec<Option<LayerCache>>,
    pub v: Array2<f64>,
    pub log_det: Array1<f64>,
}

impl CouplingFlow {
    /// Alternating-halves couplings separated by coordinate reversals.
    pub fn new(d_x: usize, d_c: usize, cfg: &FlowConfig, base: BaseDensity, rng: &mut Rng) -> Result<Self> {
        if d_x == 0 {
            return Err(Error::Config("flow needs d_x > 0".into()));
        }
        if !(cfg.log_scale_bound > 0.0) {
            return Err(Error::Config("log_scale_bound must be positive".into()));
        }
        let half = d_x / 2;
        let part1: Vec<usize> = (0..half).collect();
        let part2: Vec<usize> = (half..d_x).collect();
        let reversal: Vec<usize> = (0..d_x).rev().collect();
        let out_mult = match cfg.kind {
            CouplingKind::Additive => 1,
            CouplingKind::Affine => 2,
        };
        let mut layers = Vec::new();
        for k in 0..cfg.n_coupling {
            if k > 0 && d_x > 1 {
                layers.push(FlowLayer::Permutation(reversal.clone()));
            }
            let dims = cfg.net.dims(part1.len() + d_c, out_mult * part2.len());
            let mut omega = Mlp::new(dims, cfg.net.activation, OutputActivation::Identity, rng)?;
            if cfg.zero_init {
                omega.zero_last_layer();
            }
            layers.push(FlowLayer::Coupling(CouplingLayer {
                kind: cfg.kind,
                part1: part1.clone(),
                part2: part2.clone(),
                omega,
                log_scale_bound: cfg.log_scale_bound,
            }));
        }
        Ok(Self {
            layers,
            d_x,
            d_c,
            base,
        })
    }

    /// A flow with no layers: `T(x) = x`.
    pub fn identity(d_x: usize, base: BaseDensity) -> Self {
        Self {
            layers: Vec::new(),
            d_x,
            d_c: 0,
            base,
        }
    }

    pub fn couplings(&self) -> impl Iterator<Item = &CouplingLayer> {
        self.layers.iter().filter_map(|l| match l {
            FlowLayer::Coupling(c) => Some(c),
            FlowLayer::Permutation(_) => None,
        })
    }

    pub fn couplings_mut(&mut self) -> impl Iterator<Item = &mut CouplingLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            FlowLayer::Coupling(c) => Some(c),
            FlowLayer::Permutation(_) => None,
        })
    }

    fn check_inputs(&self, x: ArrayView2<'_, f64>, cond: Option<ArrayView2<'_, f64>>) -> Result<()> {
        dim_check("flow input", self.d_x, x.ncols())?;
        match cond {
            Some(c) => {
                dim_check("flow conditioning", self.d_c, c.ncols())?;
                if c.nrows() != x.nrows() && c.nrows() != 1 {
                    return Err(Error::Dimension(format!(
                        "conditioning has {} rows for {} inputs",
                        c.nrows(),
                        x.nrows()
                    )));
                }
            }
            None => dim_check("flow conditioning", self.d_c, 0)?,
        }
        Ok(())
    }

    fn run_forward(&self, x: ArrayView2<'_, f64>, cond: Option<ArrayView2<'_, f64>>, keep: bool) -> Result<FlowTape> {
        self.check_inputs(x, cond)?;
        let mut log_det = Array1::zeros(x.nrows());
        let mut cur = x.to_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                FlowLayer::Permutation(p) => {
                    cur = permute_cols(cur.view(), p);
                    caches.push(None);
                }
                FlowLayer::Coupling(c) => {
                    let (y, cache) = c.forward(cur.view(), cond, &mut log_det, keep)?;
                    cur = y;
                    caches.push(cache);
                }
            }
        }
        Ok(FlowTape {
            caches,
            v: cur,
            log_det,
        })
    }

    /// `(T(x, c), log|det d T / d x|)` for every row.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>, cond: Option<ArrayView2<'_, f64>>) -> Result<(Array2<f64>, Array1<f64>)> {
        let tape = self.run_forward(x, cond, false)?;
        Ok((tape.v, tape.log_det))
    }

    pub fn forward_tape(&self, x: ArrayView2<'_, f64>, cond: Option<ArrayView2<'_, f64>>) -> Result<FlowTape> {
        self.run_forward(x, cond, true)
    }

    /// Layer-by-layer analytic inverse.
    pub fn inverse_batch(&self, v: ArrayView2<'_, f64>, cond: Option<ArrayView2<'_, f64>>) -> Result<Array2<f64>> {
        self.check_inputs(v, cond)?;
        let mut cur = v.to_owned();
        for layer in self.layers.iter().rev() {
            cur = match layer {
                FlowLayer::Permutation(p) => unpermute_cols(cur.view(), p),
                FlowLayer::Coupling(c) => c.inverse(cur.view(), cond)?,
            };
        }
        Ok(cur)
    }

    /// Reverse pass: given `dL/dv` and per-row `dL/dlogdet`, accumulates
    /// parameter gradients (one buffer per coupling) and returns `dL/dx`
    /// and, when asked, `dL/dc`.
    pub fn backward(
        &self,
        tape: &FlowTape,
        dv: &Array2<f64>,
        dlogdet: &Array1<f64>,
        grads: &mut [Vec<f64>],
        want_cond_grad: bool,
        n_cond_rows: usize,
    ) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        let n = dv.nrows();
        let mut dc = want_cond_grad.then(|| Array2::zeros((n, self.d_c)));
        let mut d = dv.clone();
        let mut gi = grads.len();
        for (layer, cache) in self.layers.iter().zip(&tape.caches).rev() {
            d = match layer {
                FlowLayer::Permutation(p) => unpermute_cols(d.view(), p),
                FlowLayer::Coupling(c) => {
                    gi -= 1;
                    let cache = cache.as_ref().ok_or_else(|| Error::Config("tape without caches".into()))?;
                    c.backward(cache, &d, dlogdet, &mut grads[gi], dc.as_mut())?
                }
            };
        }
        let dc = dc.map(|g| {
            if n_cond_rows == 1 && n != 1 {
                g.sum_axis(Axis(0)).insert_axis(Axis(0))
            } else {
                g
            }
        });
        Ok((d, dc))
    }

    pub fn log_density_batch(&self, x: ArrayView2<'_, f64>, cond: Option<ArrayView2<'_, f64>>) -> Result<Array1<f64>> {
        let (v, ld) = self.forward_batch(x, cond)?;
        let v = v.as_standard_layout();
        Ok(Array1::from_iter(
            v.rows().into_iter().zip(ld.iter()).map(|(r, l)| {
                self.base.log_prob_row(r.as_slice().expect("contiguous row")) + l
            }),
        ))
    }

    /// Exact Jacobian `dT/dx` at one point, by reverse mode.
    pub fn jacobian(&self, x: &[f64], cond: Option<&[f64]>) -> Result<Array2<f64>> {
        let d = self.d_x;
        dim_check("flow input", d, x.len())?;
        let xs = Array2::from_shape_fn((d, d), |(_, j)| x[j]);
        let cs = cond.map(|c| Array2::from_shape_fn((d, c.len()), |(_, j)| c[j]));
        let tape = self.forward_tape(xs.view(), cs.as_ref().map(|c| c.view()))?;
        let mut scratch: Vec<Vec<f64>> = self.couplings().map(|c| vec![0.0; c.omega.num_params()]).collect();
        let (dx, _) = self.backward(&tape, &Array2::eye(d), &Array1::zeros(d), &mut scratch, false, d)?;
        Ok(dx)
    }

    pub fn num_couplings(&self) -> usize {
        self.couplings().count()
    }
}

/// `(v, log_det)` for one observation.
pub fn flow_forward(flow: &CouplingFlow, x: &[f64], cond: Option<&[f64]>) -> Result<(Vec<f64>, f64)> {
    let (v, ld) = flow.forward_batch(crate::nn::row_vec(x), cond.map(crate::nn::row_vec))?;
    Ok((v.into_raw_vec_and_offset().0, ld[0]))
}

pub fn flow_inverse(flow: &CouplingFlow, v: &[f64], cond: Option<&[f64]>) -> Result<Vec<f64>> {
    let x = flow.inverse_batch(crate::nn::row_vec(v), cond.map(crate::nn::row_vec))?;
    Ok(x.into_raw_vec_and_offset().0)
}

/// Negative log-likelihood summed over rows with exact gradients.
#[derive(Debug, Clone)]
pub struct NllLoss {
    pub loss: f64,
    /// One buffer per coupling layer, in layer order.
    pub param_grads: Vec<Vec<f64>>,
    pub cond_grad: Option<Array2<f64>>,
}

fn nll_eval(
    flow: &CouplingFlow,
    x: ArrayView2<'_, f64>,
    cond: Option<ArrayView2<'_, f64>>,
    want_cond_grad: bool,
) -> Result<NllLoss> {
    if x.nrows() == 0 {
        return Err(Error::Empty("nll batch has no rows".into()));
    }
    let tape = flow.forward_tape(x, cond)?;
    let mut loss = 0.0;
    for (r, l) in tape.v.rows().into_iter().zip(tape.log_det.iter()) {
        let v: Vec<f64> = r.to_vec();
        loss -= flow.base.log_prob_row(&v) + l;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("negative log-likelihood is {loss}")));
    }
    let base = flow.base;
    let dv = tape.v.mapv(|v| base.neg_log_prob_grad(v));
    let dlogdet = Array1::from_elem(x.nrows(), -1.0);
    let mut grads: Vec<Vec<f64>> = flow.couplings().map(|c| vec![0.0; c.omega.num_params()]).collect();
    let want = want_cond_grad && cond.is_some();
    let n_cond_rows = cond.map_or(0, |c| c.nrows());
    let (_, cond_grad) = flow.backward(&tape, &dv, &dlogdet, &mut grads, want, n_cond_rows)?;
    Ok(NllLoss {
        loss,
        param_grads: grads,
        cond_grad,
    })
}

pub fn nll_loss(flow: &CouplingFlow, batch: &SampleSet, cond: Option<&SampleSet>) -> Result<NllLoss> {
    if let Some(c) = cond {
        dim_check("conditioning rows", batch.len(), c.len())?;
    }
    nll_eval(flow, batch.view(), cond.map(|c| c.view()), cond.is_some())
}

impl Trainable for CouplingFlow {
    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.couplings_mut().map(|c| c.omega.params_mut()).collect()
    }

    fn loss(&self, x: ArrayView2<'_, f64>, cond: Option<ArrayView2<'_, f64>>, _rng: &mut Rng) -> Result<f64> {
        Ok(-self.log_density_batch(x, cond)?.sum())
    }

    fn loss_and_grads(
        &self,
        x: ArrayView2<'_, f64>,
        cond: Option<ArrayView2<'_, f64>>,
        want_cond_grad: bool,
        _rng: &mut Rng,
    ) -> Result<LossAndGrads> {
        let r = nll_eval(self, x, cond, want_cond_grad)?;
        Ok(LossAndGrads {
            loss: r.loss,
            grads: r.param_grads,
            cond_grad: r.cond_grad,
        })
    }
}

/// Minibatch Adam on [`nll_loss`].
pub fn train_flow(flow: &mut CouplingFlow, data: &SampleSet, cond: Conditioning<'_>, opts: &TrainOpts) -> Result<TrainTrace> {
    train::fit(flow, data, cond, opts)
}

/// Draws `n` samples `T^{-1}(v, c)` with `v` from the base density; `cond`
/// is one shared row or `n` rows.
pub fn flow_sample_rows(flow: &CouplingFlow, cond: Option<ArrayView2<'_, f64>>, n: usize, rng: &mut Rng) -> Result<SampleSet> {
    if n == 0 {
        return Ok(SampleSet::empty(flow.d_x));
    }
    let mut v = Array2::zeros((n, flow.d_x));
    v.mapv_inplace(|_| flow.base.draw(rng));
    Ok(SampleSet::new(flow.inverse_batch(v.view(), cond)?))
}

pub fn flow_sample(flow: &CouplingFlow, cond: Option<&[f64]>, n: usize, rng: &mut Rng) -> Result<SampleSet> {
    flow_sample_rows(flow, cond.map(crate::nn::row_vec), n, rng)
}

/// An invertible map with Jacobians of itself and of its inverse.
pub trait InvertibleMap {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], cond: Option<&[f64]>) -> Result<Vec<f64>>;
    fn apply_inverse(&self, y: &[f64], cond: Option<&[f64]>) -> Result<Vec<f64>>;
    fn jacobian(&self, x: &[f64], cond: Option<&[f64]>) -> Result<Array2<f64>>;
    fn inverse_jacobian(&self, y: &[f64], cond: Option<&[f64]>) -> Result<Array2<f64>>;
}

impl InvertibleMap for CouplingFlow {
    fn dim(&self) -> usize {
        self.d_x
    }

    fn apply(&self, x: &[f64], cond: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(flow_forward(self, x, cond)?.0)
    }

    fn apply_inverse(&self, y: &[f64], cond: Option<&[f64]>) -> Result<Vec<f64>> {
        flow_inverse(self, y, cond)
    }

    fn jacobian(&self, x: &[f64], cond: Option<&[f64]>) -> Result<Array2<f64>> {
        CouplingFlow::jacobian(self, x, cond)
    }

    fn inverse_jacobian(&self, y: &[f64], cond: Option<&[f64]>) -> Result<Array2<f64>> {
        let x = flow_inverse(self, y, cond)?;
        invert_matrix(&CouplingFlow::jacobian(self, &x, cond)?)
    }
}

pub fn invert_matrix(m: &Array2<f64>) -> Result<Array2<f64>> {
    let (r, c) = m.dim();
    let dm = DMatrix::from_fn(r, c, |i, j| m[[i, j]]);
    let inv = dm
        .try_inverse()
        .ok_or_else(|| Error::Inconsistent("singular Jacobian".into()))?;
    Ok(Array2::from_shape_fn((r, c), |(i, j)| inv[(i, j)]))
}

pub fn log_abs_det(m: &Array2<f64>) -> f64 {
    let (r, c) = m.dim();
    DMatrix::from_fn(r, c, |i, j| m[[i, j]]).determinant().abs().ln()
}

/// Output of [`zero_pad_lift`].
#[derive(Debug, Clone)]
pub struct ZeroPadLift {
    /// First `d` coordinates of the lifted composite.
    pub y: Vec<f64>,
    /// Upper-left `d x d` block of the composite Jacobian.
    pub jac: Array2<f64>,
    /// Full `2d` output of the composite applied to `(x, 0)`.
    pub padded: Vec<f64>,
    /// Full `2d x 2d` composite Jacobian.
    pub composite_jac: Array2<f64>,
}

/// Runs `T` through the three-layer zero-padding composite
///
/// `(x, 0) -> (x, T(x)) -> (T(x), x) -> (T(x), x - T^{-1}(T(x)))`
///
/// (additive coupling, block swap, additive coupling) and returns its first
/// block and the matching block of the chained layer Jacobians. Fails when
/// the padded half or the lower-left Jacobian block does not vanish to
/// `tol`, i.e. when `T` and its inverse disagree.
pub fn zero_pad_lift<T: InvertibleMap + ?Sized>(map: &T, x: &[f64], cond: Option<&[f64]>, tol: f64) -> Result<ZeroPadLift> {
    let d = map.dim();
    dim_check("lift input", d, x.len())?;
    // phi_1: upper block kept, lower block shifted by T(upper).
    let y1: Vec<f64> = x.iter().copied().chain(std::iter::repeat_n(0.0, d)).collect();
    let tx = map.apply(&y1[..d], cond)?;
    let mut y2 = y1.clone();
    for j in 0..d {
        y2[d + j] += tx[j];
    }
    // phi_2: swap blocks.
    let y3: Vec<f64> = y2[d..].iter().chain(&y2[..d]).copied().collect();
    // phi_3: lower block shifted by -T^{-1}(upper).
    let back = map.apply_inverse(&y3[..d], cond)?;
    let mut y4 = y3.clone();
    for j in 0..d {
        y4[d + j] -= back[j];
    }

    let eye = Array2::<f64>::eye(d);
    let mut j1 = Array2::<f64>::eye(2 * d);
    j1.slice_mut(s![d.., ..d]).assign(&map.jacobian(&y1[..d], cond)?);
    let mut j2 = Array2::<f64>::zeros((2 * d, 2 * d));
    j2.slice_mut(s![..d, d..]).assign(&eye);
    j2.slice_mut(s![d.., ..d]).assign(&eye);
    let mut j3 = Array2::<f64>::eye(2 * d);
    j3.slice_mut(s![d.., ..d]).assign(&(-map.inverse_jacobian(&y3[..d], cond)?));
    let composite = j3.dot(&j2).dot(&j1);

    let tail = y4[d..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(tail <= tol) {
        return Err(Error::Inconsistent(format!(
            "padded block is {tail:e} away from zero: T^-1(T(x)) != x"
        )));
    }
    let lower = composite.slice(s![d.., ..d]).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(lower <= tol.max(1e-6)) {
        return Err(Error::Inconsistent(format!(
            "Jacobians of T and T^-1 disagree by {lower:e}"
        )));
    }
    Ok(ZeroPadLift {
        y: y4[..d].to_vec(),
        jac: composite.slice(s![..d, ..d]).to_owned(),
        padded: y4,
        composite_jac: composite,
    })
}

/// An [`InvertibleMap`] assembled from closures.
pub struct FnMap<F, G, J, K> {
    pub dim: usize,
    pub forward: F,
    pub inverse: G,
    pub jacobian: J,
    pub inverse_jacobian: K,
}

impl<F, G, J, K> InvertibleMap for FnMap<F, G, J, K>
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
    J: Fn(&[f64]) -> Array2<f64>,
    K: Fn(&[f64]) -> Array2<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[f64], _cond: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok((self.forward)(x))
    }

    fn apply_inverse(&self, y: &[f64], _cond: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok((self.inverse)(y))
    }

    fn jacobian(&self, x: &[f64], _cond: Option<&[f64]>) -> Result<Array2<f64>> {
        Ok((self.jacobian)(x))
    }

    fn inverse_jacobian(&self, y: &[f64], _cond: Option<&[f64]>) -> Result<Array2<f64>> {
        Ok((self.inverse_jacobian)(y))
    }
}
