//! Ornstein–Uhlenbeck score diffusion.
//!
//! The forward process `dX = -X dt + sqrt(2) dW` has Gaussian transitions
//! `X(t) | X(0) ~ N(mu_t X(0), sigma_t^2 I)` with `mu_t = exp(-t)` and
//! `sigma_t^2 = 1 - exp(-2t)`. A [`ScoreModel`] is fit by denoising score
//! matching on `t ~ Uniform[tau_min, tau_max]` and samples are produced by
//! Euler–Maruyama integration of the time-reversed SDE, started from
//! `N(0, I)` and stopped at `tau_max - tau_star`. On the tail segment below
//! `tau_min` the score is frozen at its value at `tau_min`.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::data::SampleSet;
use crate::error::{dim_check, Error, Result};
use crate::nn::{Mlp, NetShape, OutputActivation};
use crate::rng::{self, Rng};
use crate::train::{self, Conditioning, LossAndGrads, TrainOpts, TrainTrace, Trainable};

/// Early-stopping window and step count of the OU diffusion (weight `b = 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub tau_min: f64,
    pub tau_max: f64,
    pub tau_star: f64,
    pub n_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            tau_min: 1e-3,
            tau_max: 5.0,
            tau_star: 1e-3,
            n_steps: 200,
        }
    }
}

impl NoiseSchedule {
    pub fn new(tau_min: f64, tau_max: f64, tau_star: f64, n_steps: usize) -> Result<Self> {
        let s = Self {
            tau_min,
            tau_max,
            tau_star,
            n_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau_min < self.tau_max && self.tau_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < tau_min < tau_max, got ({}, {})",
                self.tau_min, self.tau_max
            )));
        }
        if !(self.tau_star >= 0.0 && self.tau_star <= self.tau_min) {
            return Err(Error::Config(format!(
                "need 0 <= tau_star <= tau_min, got {}",
                self.tau_star
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be positive".into()));
        }
        Ok(())
    }

    /// `(mu_tau, sigma_tau)` of the forward transition.
    pub fn marginal_params(&self, tau: f64) -> Result<(f64, f64)> {
        marginal_params(tau)
    }

    pub fn window(&self) -> f64 {
        self.tau_max - self.tau_min
    }
}

/// `(exp(-tau), sqrt(1 - exp(-2 tau)))`.
pub fn marginal_params(tau: f64) -> Result<(f64, f64)> {
    if !(tau >= 0.0) {
        return Err(Error::Config(format!("diffusion time must be >= 0, got {tau}")));
    }
    Ok(((-tau).exp(), (-(-2.0 * tau).exp_m1()).sqrt()))
}

/// Draws `x_tau = mu x0 + sigma xi` and returns it with the transition score
/// `-(x_tau - mu x0) / sigma^2 = -xi / sigma`.
pub fn perturb(x0: &[f64], tau: f64, rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let xi: Vec<f64> = (0..x0.len()).map(|_| rng::normal(rng)).collect();
    perturb_with_noise(x0, tau, &xi)
}

/// [`perturb`] with the standard normal draw supplied by the caller.
pub fn perturb_with_noise(x0: &[f64], tau: f64, xi: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    dim_check("noise", x0.len(), xi.len())?;
    let (mu, sigma) = marginal_params(tau)?;
    if sigma <= 0.0 {
        return Err(Error::Config("perturbation needs tau > 0".into()));
    }
    let x_tau = x0.iter().zip(xi).map(|(x, e)| mu * x + sigma * e).collect();
    let target = xi.iter().map(|e| -e / sigma).collect();
    Ok((x_tau, target))
}

/// Per-coordinate affine map `(x - shift) / scale` applied to the data
/// before score matching and inverted on the samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Self {
            shift: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    /// Column means and standard deviations; a degenerate column keeps
    /// scale 1.
    pub fn fit(data: &SampleSet) -> Self {
        if data.len() < 2 {
            return Self::identity(data.dim());
        }
        let shift = data.column_means();
        let scale = data
            .column_variances()
            .into_iter()
            .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        Self { shift, scale }
    }

    pub fn forward(&self, x: &SampleSet) -> Result<SampleSet> {
        dim_check("standardizer dim", self.shift.len(), x.dim())?;
        let mut a = x.as_array().clone();
        for (mut c, (m, s)) in a.columns_mut().into_iter().zip(self.shift.iter().zip(&self.scale)) {
            c.mapv_inplace(|v| (v - m) / s);
        }
        Ok(SampleSet::new(a))
    }

    pub fn inverse(&self, z: &SampleSet) -> Result<SampleSet> {
        dim_check("standardizer dim", self.shift.len(), z.dim())?;
        let mut a = z.as_array().clone();
        for (mut c, (m, s)) in a.columns_mut().into_iter().zip(self.shift.iter().zip(&self.scale)) {
            c.mapv_inplace(|v| v * s + m);
        }
        Ok(SampleSet::new(a))
    }
}

/// How diffusion time enters the score network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauEmbed {
    /// `tau`
    Raw,
    /// `(tau, ln tau)`
    Log,
    /// `(tau, sin(2^j tau), cos(2^j tau))` for `j < k`
    Sinusoidal(usize),
}

impl TauEmbed {
    pub fn dim(self) -> usize {
        match self {
            TauEmbed::Raw => 1,
            TauEmbed::Log => 2,
            TauEmbed::Sinusoidal(k) => 1 + 2 * k,
        }
    }

    fn write(self, tau: f64, out: &mut [f64]) {
        out[0] = tau;
        match self {
            TauEmbed::Raw => {}
            TauEmbed::Log => out[1] = tau.ln(),
            TauEmbed::Sinusoidal(k) => {
                for j in 0..k {
                    let f = (1u64 << j) as f64 * tau;
                    out[1 + 2 * j] = f.sin();
                    out[2 + 2 * j] = f.cos();
                }
            }
        }
    }
}

impl Default for TauEmbed {
    fn default() -> Self {
        TauEmbed::Log
    }
}

/// Score network `theta(x, c, tau)`; input columns are `[x | c | embed(tau)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    pub net: Mlp,
    pub d_x: usize,
    pub d_c: usize,
    pub tau_embed: TauEmbed,
}

impl ScoreModel {
    pub fn new(d_x: usize, d_c: usize, tau_embed: TauEmbed, shape: NetShape, rng: &mut Rng) -> Result<Self> {
        if d_x == 0 {
            return Err(Error::Config("score model needs d_x > 0".into()));
        }
        let dims = shape.dims(d_x + d_c + tau_embed.dim(), d_x);
        let net = Mlp::new(dims, shape.activation, OutputActivation::Identity, rng)?;
        Ok(Self {
            net,
            d_x,
            d_c,
            tau_embed,
        })
    }

    pub fn from_net(net: Mlp, d_x: usize, d_c: usize, tau_embed: TauEmbed) -> Result<Self> {
        dim_check("score net input", d_x + d_c + tau_embed.dim(), net.input_dim())?;
        dim_check("score net output", d_x, net.output_dim())?;
        Ok(Self {
            net,
            d_x,
            d_c,
            tau_embed,
        })
    }

    /// Builds the network input. `cond` has one row per row of `x`, or a
    /// single row that is broadcast.
    fn assemble(&self, x: ArrayView2<'_, f64>, cond: Option<ArrayView2<'_, f64>>, taus: &[f64]) -> Result<Array2<f64>> {
        dim_check("score input x", self.d_x, x.ncols())?;
        dim_check("diffusion times", x.nrows(), taus.len())?;
        let n = x.nrows();
        let te = self.tau_embed.dim();
        let mut input = Array2::zeros((n, self.d_x + self.d_c + te));
        input.slice_mut(s![.., ..self.d_x]).assign(&x);
        match cond {
            Some(c) => {
                dim_check("conditioning dim", self.d_c, c.ncols())?;
                let mut dst = input.slice_mut(s![.., self.d_x..self.d_x + self.d_c]);
                if c.nrows() == n {
                    dst.assign(&c);
                } else if c.nrows() == 1 {
                    dst.assign(&c.row(0));
                } else {
                    return Err(Error::Dimension(format!(
                        "conditioning has {} rows for {n} inputs",
                        c.nrows()
                    )));
                }
            }
            None => dim_check("conditioning dim", self.d_c, 0)?,
        }
        let off = self.d_x + self.d_c;
        let mut buf = vec![0.0; te];
        for (i, &t) in taus.iter().enumerate() {
            self.tau_embed.write(t, &mut buf);
            for (j, v) in buf.iter().enumerate() {
                input[[i, off + j]] = *v;
            }
        }
        Ok(input)
    }

    /// Score estimate for every row of `x` at the matching time in `taus`.
    pub fn score_batch(&self, x: ArrayView2<'_, f64>, cond: Option<ArrayView2<'_, f64>>, taus: &[f64]) -> Result<Array2<f64>> {
        let input = self.assemble(x, cond, taus)?;
        self.net.forward_batch(input.view())
    }

    pub fn score(&self, x: &[f64], cond: Option<&[f64]>, tau: f64) -> Result<Vec<f64>> {
        let c = cond.map(crate::nn::row_vec);
        let out = self.score_batch(crate::nn::row_vec(x), c, &[tau])?;
        Ok(out.into_raw_vec_and_offset().0)
    }
}

/// Monte-Carlo draws behind one denoising score matching evaluation.
///
/// Row `k` of every matrix belongs to observation `rows[k]`; each
/// observation contributes `mc_taus` consecutive rows.
#[derive(Debug, Clone)]
pub struct DsmDraws {
    pub rows: Vec<usize>,
    pub taus: Vec<f64>,
    pub noise: Array2<f64>,
    pub x_tau: Array2<f64>,
    pub target: Array2<f64>,
    /// Weight of each squared residual: `(tau_max - tau_min) / mc_taus`.
    pub weight: f64,
}

/// Draws `(tau, xi)` for every observation: for each row, `mc_taus` times,
/// first `tau ~ U[tau_min, tau_max]`, then the `d` noise coordinates.
pub fn draw_dsm(schedule: &NoiseSchedule, x0: ArrayView2<'_, f64>, mc_taus: usize, rng: &mut Rng) -> Result<DsmDraws> {
    if mc_taus == 0 {
        return Err(Error::Config("mc_taus must be positive".into()));
    }
    let (n, d) = x0.dim();
    let m = n * mc_taus;
    let mut rows = Vec::with_capacity(m);
    let mut taus = Vec::with_capacity(m);
    let mut noise = Array2::zeros((m, d));
    let mut x_tau = Array2::zeros((m, d));
    let mut target = Array2::zeros((m, d));
    let mut k = 0;
    for i in 0..n {
        for _ in 0..mc_taus {
            let tau = rng::uniform(rng, schedule.tau_min, schedule.tau_max);
            let (mu, sigma) = marginal_params(tau)?;
            for j in 0..d {
                let xi = rng::normal(rng);
                noise[[k, j]] = xi;
                x_tau[[k, j]] = mu * x0[[i, j]] + sigma * xi;
                target[[k, j]] = -xi / sigma;
            }
            rows.push(i);
            taus.push(tau);
            k += 1;
        }
    }
    Ok(DsmDraws {
        rows,
        taus,
        noise,
        x_tau,
        target,
        weight: schedule.window() / mc_taus as f64,
    })
}

/// Weighted squared error between predictions and DSM targets together with
/// its gradient with respect to the predictions.
pub fn dsm_residual(draws: &DsmDraws, predicted: ArrayView2<'_, f64>) -> (f64, Array2<f64>) {
    let mut grad = &predicted - &draws.target;
    let loss = draws.weight * grad.iter().map(|r| r * r).sum::<f64>();
    grad.mapv_inplace(|r| 2.0 * draws.weight * r);
    (loss, grad)
}

/// Result of [`dsm_loss`].
#[derive(Debug, Clone)]
pub struct DsmLoss {
    pub loss: f64,
    pub param_grads: Vec<f64>,
    pub cond_grad: Option<Array2<f64>>,
}

fn dsm_eval(
    model: &ScoreModel,
    schedule: &NoiseSchedule,
    x0: ArrayView2<'_, f64>,
    cond: Option<ArrayView2<'_, f64>>,
    mc_taus: usize,
    want_cond_grad: bool,
    rng: &mut Rng,
) -> Result<DsmLoss> {
    if x0.nrows() == 0 {
        return Err(Error::Empty("dsm batch has no rows".into()));
    }
    if let Some(c) = cond {
        dim_check("conditioning rows", x0.nrows(), c.nrows())?;
    }
    let draws = draw_dsm(schedule, x0, mc_taus, rng)?;
    let cond_rep = cond.map(|c| c.select(Axis(0), &draws.rows));
    let input = model.assemble(draws.x_tau.view(), cond_rep.as_ref().map(|c| c.view()), &draws.taus)?;
    let (pred, cache) = model.net.forward_cached(input.view())?;
    let (loss, dpred) = dsm_residual(&draws, pred.view());
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("dsm loss is {loss}")));
    }
    let mut param_grads = vec![0.0; model.net.num_params()];
    let need_input = want_cond_grad && cond.is_some();
    let din = model.net.backward_batch(&cache, dpred.view(), &mut param_grads, need_input)?;
    let cond_grad = match (din, cond) {
        (Some(din), Some(c)) => {
            let mut g = Array2::zeros(c.raw_dim());
            let cols = din.slice(s![.., model.d_x..model.d_x + model.d_c]);
            for (k, &i) in draws.rows.iter().enumerate() {
                let mut gi = g.row_mut(i);
                gi += &cols.row(k);
            }
            Some(g)
        }
        _ => None,
    };
    Ok(DsmLoss {
        loss,
        param_grads,
        cond_grad,
    })
}

/// Denoising score matching loss summed over the batch, with exact
/// gradients for the network parameters and the conditioning inputs.
pub fn dsm_loss(
    model: &ScoreModel,
    schedule: &NoiseSchedule,
    batch: &SampleSet,
    cond: Option<&SampleSet>,
    mc_taus: usize,
    rng: &mut Rng,
) -> Result<DsmLoss> {
    dsm_eval(model, schedule, batch.view(), cond.map(|c| c.view()), mc_taus, cond.is_some(), rng)
}

/// Adapter exposing a score model to the generic trainer.
pub struct DsmTask<'a> {
    pub model: &'a mut ScoreModel,
    pub schedule: &'a NoiseSchedule,
    pub mc_taus: usize,
}

impl Trainable for DsmTask<'_> {
    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.model.net.params_mut()]
    }

    fn loss(&self, x: ArrayView2<'_, f64>, cond: Option<ArrayView2<'_, f64>>, rng: &mut Rng) -> Result<f64> {
        let draws = draw_dsm(self.schedule, x, self.mc_taus, rng)?;
        let cond_rep = cond.map(|c| c.select(Axis(0), &draws.rows));
        let input = self
            .model
            .assemble(draws.x_tau.view(), cond_rep.as_ref().map(|c| c.view()), &draws.taus)?;
        let pred = self.model.net.forward_batch(input.view())?;
        Ok(dsm_residual(&draws, pred.view()).0)
    }

    fn loss_and_grads(
        &self,
        x: ArrayView2<'_, f64>,
        cond: Option<ArrayView2<'_, f64>>,
        want_cond_grad: bool,
        rng: &mut Rng,
    ) -> Result<LossAndGrads> {
        let r = dsm_eval(self.model, self.schedule, x, cond, self.mc_taus, want_cond_grad, rng)?;
        Ok(LossAndGrads {
            loss: r.loss,
            grads: vec![r.param_grads],
            cond_grad: r.cond_grad,
        })
    }
}

/// Minibatch Adam on [`dsm_loss`].
pub fn train_score(
    model: &mut ScoreModel,
    schedule: &NoiseSchedule,
    data: &SampleSet,
    cond: Conditioning<'_>,
    mc_taus: usize,
    opts: &TrainOpts,
) -> Result<TrainTrace> {
    let mut task = DsmTask {
        model,
        schedule,
        mc_taus,
    };
    train::fit(&mut task, data, cond, opts)
}

/// Euler–Maruyama integration of the reverse-time SDE with an arbitrary
/// score function `score(v, tau)` evaluated at forward time `tau`.
pub fn reverse_sde<F>(schedule: &NoiseSchedule, d: usize, n: usize, mut score: F, rng: &mut Rng) -> Result<Array2<f64>>
where
    F: FnMut(ArrayView2<'_, f64>, f64) -> Result<Array2<f64>>,
{
    schedule.validate()?;
    let mut v = Array2::zeros((n, d));
    if n == 0 {
        return Ok(v);
    }
    v.mapv_inplace(|_| rng::normal(rng));
    let h = schedule.window() / schedule.n_steps as f64;
    for k in 0..schedule.n_steps {
        let tau = schedule.tau_max - k as f64 * h;
        let sc = score(v.view(), tau)?;
        em_step(&mut v, &sc, h, rng);
        check_finite(&v, k)?;
    }
    let tail = schedule.tau_min - schedule.tau_star;
    if tail > 0.0 {
        let frozen = score(v.view(), schedule.tau_min)?;
        let m = (tail / h).ceil().max(1.0) as usize;
        let ht = tail / m as f64;
        for k in 0..m {
            em_step(&mut v, &frozen, ht, rng);
            check_finite(&v, schedule.n_steps + k)?;
        }
    }
    Ok(v)
}

fn em_step(v: &mut Array2<f64>, score: &Array2<f64>, h: f64, rng: &mut Rng) {
    let diff = (2.0 * h).sqrt();
    v.zip_mut_with(score, |x, &s| {
        *x += h * (*x + 2.0 * s) + diff * rng::normal(rng);
    });
}

fn check_finite(v: &Array2<f64>, step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("reverse sampler state at step {step}")))
    }
}

/// Draws `n` samples with a trained score model; `cond` is either one row
/// (shared by all samples) or `n` rows.
pub fn sample_reverse_rows(
    model: &ScoreModel,
    schedule: &NoiseSchedule,
    cond: Option<ArrayView2<'_, f64>>,
    n: usize,
    rng: &mut Rng,
) -> Result<SampleSet> {
    if let Some(c) = cond {
        if c.nrows() != 1 && c.nrows() != n {
            return Err(Error::Dimension(format!(
                "conditioning has {} rows for {n} samples",
                c.nrows()
            )));
        }
        dim_check("conditioning dim", model.d_c, c.ncols())?;
    } else {
        dim_check("conditioning dim", model.d_c, 0)?;
    }
    let mut taus = vec![0.0; n];
    let out = reverse_sde(
        schedule,
        model.d_x,
        n,
        |v, tau| {
            taus.iter_mut().for_each(|t| *t = tau);
            model.score_batch(v, cond, &taus)
        },
        rng,
    )?;
    Ok(SampleSet::new(out))
}

pub fn sample_reverse(
    model: &ScoreModel,
    schedule: &NoiseSchedule,
    cond: Option<&[f64]>,
    n: usize,
    rng: &mut Rng,
) -> Result<SampleSet> {
    sample_reverse_rows(model, schedule, cond.map(crate::nn::row_vec), n, rng)
}
