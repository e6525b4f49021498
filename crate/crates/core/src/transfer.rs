//! Shared-embedding transfer pipelines.
//!
//! Conditional: a generative model and an embedding `h` of the covariates
//! are fitted jointly on source data; `h` is then frozen and only the
//! target model is trained. Unconditional: a latent prior is fitted on
//! source latents and composed with a decoder fitted on target pairs.
//! The non-transfer baselines fit the same architectures on target data
//! alone.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array2, ArrayView2};

use crate::data::SampleSet;
use crate::diffusion::{sample_reverse_rows, train_score, NoiseSchedule, ScoreModel, Standardizer, TauEmbed};
use crate::error::{dim_check, Error, Result};
use crate::flows::{flow_sample_rows, train_flow, BaseDensity, CouplingFlow, FlowConfig};
use crate::nn::{ForwardCache, Mlp, NetShape, OutputActivation};
use crate::rng::{self, Rng};
use crate::train::{self, Conditioning, LossAndGrads, TrainOpts, TrainTrace, Trainable};

/// Shared representation `z -> (h(z), z[passthrough])`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    pub net: Mlp,
    pub frozen: bool,
    pub passthrough_idx: Vec<usize>,
}

impl EmbeddingMap {
    pub fn new(d_z: usize, d_h: usize, shape: NetShape, passthrough_idx: Vec<usize>, rng: &mut Rng) -> Result<Self> {
        if let Some(&bad) = passthrough_idx.iter().find(|&&i| i >= d_z) {
            return Err(Error::Config(format!("passthrough index {bad} out of range for d_z = {d_z}")));
        }
        let net = Mlp::new(shape.dims(d_z, d_h), shape.activation, OutputActivation::Identity, rng)?;
        Ok(Self {
            net,
            frozen: false,
            passthrough_idx,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim() + self.passthrough_idx.len()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn param_hash(&self) -> u64 {
        self.net.param_hash()
    }

    fn append_passthrough(&self, h: Array2<f64>, z: ArrayView2<'_, f64>) -> Array2<f64> {
        if self.passthrough_idx.is_empty() {
            return h;
        }
        let d_h = h.ncols();
        let mut out = Array2::zeros((h.nrows(), self.output_dim()));
        out.slice_mut(s![.., ..d_h]).assign(&h);
        for (k, &j) in self.passthrough_idx.iter().enumerate() {
            out.column_mut(d_h + k).assign(&z.column(j));
        }
        out
    }

    pub fn apply(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let h = self.net.forward_batch(z)?;
        Ok(self.append_passthrough(h, z))
    }

    pub(crate) fn apply_cached(&self, z: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        let (h, cache) = self.net.forward_cached(z)?;
        Ok((self.append_passthrough(h, z), cache))
    }
}

/// Task-specific decoder `u -> x`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderMap {
    pub net: Mlp,
}

impl DecoderMap {
    pub fn new(d_u: usize, d_x: usize, shape: NetShape, rng: &mut Rng) -> Result<Self> {
        let net = Mlp::new(shape.dims(d_u, d_x), shape.activation, OutputActivation::Identity, rng)?;
        Ok(Self { net })
    }

    pub fn apply(&self, u: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        dim_check("decoder input", self.net.input_dim(), u.ncols())?;
        self.net.forward_batch(u)
    }
}

/// Minimizes `sum ||g(u) - x||^2`; `x` is the data and `u` the conditioning.
impl Trainable for DecoderMap {
    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.net.params_mut()]
    }

    fn loss_and_grads(
        &self,
        x: ArrayView2<'_, f64>,
        cond: Option<ArrayView2<'_, f64>>,
        _want_cond_grad: bool,
        _rng: &mut Rng,
    ) -> Result<LossAndGrads> {
        let u = cond.ok_or_else(|| Error::Config("decoder training needs latent inputs".into()))?;
        dim_check("decoder output", self.net.output_dim(), x.ncols())?;
        let (out, cache) = self.net.forward_cached(u)?;
        let resid = &out - &x;
        let loss = resid.iter().map(|r| r * r).sum();
        let mut grads = vec![0.0; self.net.num_params()];
        self.net.backward_batch(&cache, (2.0 * &resid).view(), &mut grads, false)?;
        Ok(LossAndGrads {
            loss,
            grads: vec![grads],
            cond_grad: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Diffusion,
    Flow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Conditional,
    Unconditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    Transfer,
    NonTransfer,
}

macro_rules! tag_enum {
    ($t:ty, $($v:ident => $s:literal),+) => {
        impl $t {
            pub fn name(self) -> &'static str {
                match self { $(Self::$v => $s),+ }
            }

            pub fn parse(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)+
                    other => Err(Error::Parse(format!(
                        concat!("unknown ", stringify!($t), " {:?}"), other
                    ))),
                }
            }
        }

        impl std::fmt::Display for $t {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

tag_enum!(Family, Diffusion => "diffusion", Flow => "flow");
tag_enum!(Mode, Conditional => "conditional", Unconditional => "unconditional");
tag_enum!(Regime, Transfer => "transfer", NonTransfer => "non_transfer");

/// Dimensions of the source data, target data, covariates, shared
/// embedding and latent vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d_x_s: usize,
    pub d_x_t: usize,
    pub d_z: usize,
    pub d_h: usize,
    pub d_u: usize,
}

/// Architectures and sampler settings shared by every phase of a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub score_net: NetShape,
    pub tau_embed: TauEmbed,
    pub schedule: NoiseSchedule,
    /// Diffusion times drawn per observation in the score matching loss.
    pub mc_taus: usize,
    /// Score-match standardized data and map samples back.
    pub standardize: bool,
    pub flow: FlowConfig,
    pub base: BaseDensity,
    pub embed_net: NetShape,
    pub passthrough_idx: Vec<usize>,
    pub decoder_net: NetShape,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            score_net: NetShape::default(),
            tau_embed: TauEmbed::default(),
            schedule: NoiseSchedule::default(),
            mc_taus: 1,
            standardize: true,
            flow: FlowConfig::default(),
            base: BaseDensity::StdGaussian,
            embed_net: NetShape::default(),
            passthrough_idx: Vec::new(),
            decoder_net: NetShape::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferPlan {
    pub family: Family,
    pub mode: Mode,
    pub regime: Regime,
    /// Source phase: joint `(theta_s, h)` fit or the latent prior.
    pub source_opts: TrainOpts,
    /// Target phase: `theta_t` (and `h` without transfer), or the latent
    /// prior on target latents without transfer.
    pub target_opts: TrainOpts,
    pub decoder_opts: TrainOpts,
    pub dims: Dims,
    pub models: ModelConfig,
}

impl TransferPlan {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let need = match self.mode {
            Mode::Conditional => [d.d_x_s, d.d_x_t, d.d_z, d.d_h],
            Mode::Unconditional => [d.d_x_s, d.d_x_t, d.d_u, 1],
        };
        if need.contains(&0) {
            return Err(Error::Config(format!("plan dimensions must be positive: {d:?}")));
        }
        if let Some(&bad) = self.models.passthrough_idx.iter().find(|&&i| i >= d.d_z) {
            return Err(Error::Config(format!("passthrough index {bad} out of range for d_z = {}", d.d_z)));
        }
        self.models.schedule.validate()?;
        if self.models.mc_taus == 0 {
            return Err(Error::Config("mc_taus must be positive".into()));
        }
        Ok(())
    }

    /// Width of the conditioning seen by the generative models.
    pub fn cond_dim(&self) -> usize {
        self.dims.d_h + self.models.passthrough_idx.len()
    }

    fn new_model(&self, d_x: usize, d_c: usize, rng: &mut Rng) -> Result<GenModel> {
        let m = &self.models;
        Ok(match self.family {
            Family::Diffusion => GenModel::Diffusion {
                score: ScoreModel::new(d_x, d_c, m.tau_embed, m.score_net, rng)?,
                schedule: m.schedule,
                mc_taus: m.mc_taus,
                affine: m.standardize.then(|| Standardizer::identity(d_x)),
            },
            Family::Flow => GenModel::Flow(CouplingFlow::new(d_x, d_c, &m.flow, m.base, rng)?),
        })
    }

    fn new_embedding(&self, rng: &mut Rng) -> Result<EmbeddingMap> {
        EmbeddingMap::new(
            self.dims.d_z,
            self.dims.d_h,
            self.models.embed_net,
            self.models.passthrough_idx.clone(),
            rng,
        )
    }
}

/// A diffusion score model with its sampler settings, or a coupling flow.
#[derive(Debug, Clone, PartialEq)]
pub enum GenModel {
    Diffusion {
        score: ScoreModel,
        schedule: NoiseSchedule,
        mc_taus: usize,
        /// Refit on every [`GenModel::fit`]; `None` trains on raw data.
        affine: Option<Standardizer>,
    },
    Flow(CouplingFlow),
}

impl GenModel {
    pub fn family(&self) -> Family {
        match self {
            GenModel::Diffusion { .. } => Family::Diffusion,
            GenModel::Flow(_) => Family::Flow,
        }
    }

    pub fn d_x(&self) -> usize {
        match self {
            GenModel::Diffusion { score, .. } => score.d_x,
            GenModel::Flow(f) => f.d_x,
        }
    }

    pub fn d_c(&self) -> usize {
        match self {
            GenModel::Diffusion { score, .. } => score.d_c,
            GenModel::Flow(f) => f.d_c,
        }
    }

    /// Fits with the family loss: score matching or negative log-likelihood.
    pub fn fit(&mut self, data: &SampleSet, cond: Conditioning<'_>, opts: &TrainOpts) -> Result<TrainTrace> {
        match self {
            GenModel::Diffusion {
                score,
                schedule,
                mc_taus,
                affine,
            } => match affine {
                Some(a) => {
                    *a = Standardizer::fit(data);
                    train_score(score, schedule, &a.forward(data)?, cond, *mc_taus, opts)
                }
                None => train_score(score, schedule, data, cond, *mc_taus, opts),
            },
            GenModel::Flow(flow) => train_flow(flow, data, cond, opts),
        }
    }

    /// `cond` is one shared row or `n` rows.
    pub fn sample_rows(&self, cond: Option<ArrayView2<'_, f64>>, n: usize, rng: &mut Rng) -> Result<SampleSet> {
        match self {
            GenModel::Diffusion {
                score, schedule, affine, ..
            } => {
                let v = sample_reverse_rows(score, schedule, cond, n, rng)?;
                match affine {
                    Some(a) => a.inverse(&v),
                    None => Ok(v),
                }
            }
            GenModel::Flow(flow) => flow_sample_rows(flow, cond, n, rng),
        }
    }

    pub fn param_hash(&self) -> u64 {
        match self {
            GenModel::Diffusion { score, .. } => score.net.param_hash(),
            GenModel::Flow(f) => {
                let all: Vec<f64> = f.couplings().flat_map(|c| c.omega.params().iter().copied()).collect();
                crate::nn::param_hash(&all)
            }
        }
    }
}

/// Source observations behind a read counter, so tests can check which
/// pipelines touched them.
#[derive(Debug)]
pub struct SourceData {
    x: SampleSet,
    aux: SampleSet,
    reads: AtomicUsize,
}

impl SourceData {
    /// `aux` holds the covariates `z` (conditional) or the latents `u`
    /// (unconditional); `x` may be empty when only latents are needed.
    pub fn new(x: SampleSet, aux: SampleSet) -> Result<Self> {
        if !x.is_empty() {
            dim_check("source rows", aux.len(), x.len())?;
        }
        Ok(Self {
            x,
            aux,
            reads: AtomicUsize::new(0),
        })
    }

    pub fn latents(u: SampleSet) -> Self {
        Self {
            x: SampleSet::empty(0),
            aux: u,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.aux.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aux.is_empty()
    }

    /// `(x, aux)`; every call is counted.
    pub fn read(&self) -> (&SampleSet, &SampleSet) {
        self.reads.fetch_add(1, Ordering::Relaxed);
        (&self.x, &self.aux)
    }

    /// First `n` rows as a separate set; counts as one read of `self`.
    pub fn prefix(&self, n: usize) -> SourceData {
        let (x, aux) = self.read();
        SourceData {
            x: x.head(n),
            aux: aux.head(n),
            reads: AtomicUsize::new(0),
        }
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

/// Target observations: `x_t` with covariates `z_t` or latents `u_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetData {
    pub x: SampleSet,
    pub aux: SampleSet,
}

impl TargetData {
    pub fn new(x: SampleSet, aux: SampleSet) -> Result<Self> {
        dim_check("target rows", x.len(), aux.len())?;
        Ok(Self { x, aux })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

const INIT: &str = "init";

fn init_rng(opts: &TrainOpts, what: &str) -> Rng {
    rng::derived(opts.seed, INIT, rng::derive_seed(0, what, 0))
}

#[derive(Debug, Clone)]
pub struct SourceFit {
    pub model: GenModel,
    pub embed: EmbeddingMap,
    pub trace: TrainTrace,
}

/// Jointly fits `(theta_s, h)` on source pairs `(x_s, z_s)`. The returned
/// embedding is frozen.
pub fn fit_source_conditional(plan: &TransferPlan, source: &SourceData) -> Result<SourceFit> {
    plan.validate()?;
    if plan.mode != Mode::Conditional {
        return Err(Error::Config("fit_source_conditional needs a conditional plan".into()));
    }
    if source.is_empty() {
        return Err(Error::Empty("empty source".into()));
    }
    let (x, z) = source.read();
    dim_check("source x", plan.dims.d_x_s, x.dim())?;
    dim_check("source z", plan.dims.d_z, z.dim())?;
    let mut embed = plan.new_embedding(&mut init_rng(&plan.source_opts, "embed"))?;
    let mut model = plan.new_model(plan.dims.d_x_s, plan.cond_dim(), &mut init_rng(&plan.source_opts, "model"))?;
    let opts = TrainOpts {
        freeze_cond_net: false,
        ..plan.source_opts
    };
    let trace = model.fit(x, Conditioning::Embedded { z, embed: &mut embed }, &opts)?;
    embed.freeze();
    Ok(SourceFit { model, embed, trace })
}

#[derive(Debug, Clone)]
pub struct TargetFit {
    pub model: GenModel,
    pub embed: EmbeddingMap,
    pub trace: TrainTrace,
    /// Embedding hash before and after target training.
    pub embed_hash: (u64, u64),
}

/// Fits `theta_t` on target pairs. In the transfer regime `embed` must be
/// the frozen source embedding, which is left untouched; without transfer
/// `embed` must be `None` and a fresh `h` is trained jointly.
pub fn fit_target_conditional(plan: &TransferPlan, target: &TargetData, embed: Option<EmbeddingMap>) -> Result<TargetFit> {
    plan.validate()?;
    if plan.mode != Mode::Conditional {
        return Err(Error::Config("fit_target_conditional needs a conditional plan".into()));
    }
    if target.is_empty() {
        return Err(Error::Empty("empty target".into()));
    }
    dim_check("target x", plan.dims.d_x_t, target.x.dim())?;
    dim_check("target z", plan.dims.d_z, target.aux.dim())?;
    let (mut embed, freeze) = match (plan.regime, embed) {
        (Regime::Transfer, Some(e)) if e.frozen => (e, true),
        (Regime::Transfer, Some(_)) => {
            return Err(Error::Config("transfer regime needs a frozen embedding".into()));
        }
        (Regime::Transfer, None) => {
            return Err(Error::Config("transfer regime needs the source embedding".into()));
        }
        (Regime::NonTransfer, None) => (plan.new_embedding(&mut init_rng(&plan.target_opts, "embed"))?, false),
        (Regime::NonTransfer, Some(_)) => {
            return Err(Error::Config("non_transfer regime trains its own embedding".into()));
        }
    };
    dim_check("embedding input", plan.dims.d_z, embed.input_dim())?;
    dim_check("embedding output", plan.cond_dim(), embed.output_dim())?;
    let mut model = plan.new_model(plan.dims.d_x_t, plan.cond_dim(), &mut init_rng(&plan.target_opts, "model"))?;
    let opts = TrainOpts {
        freeze_cond_net: freeze,
        ..plan.target_opts
    };
    let before = embed.param_hash();
    let trace = model.fit(
        &target.x,
        Conditioning::Embedded {
            z: &target.aux,
            embed: &mut embed,
        },
        &opts,
    )?;
    let after = embed.param_hash();
    if freeze && before != after {
        return Err(Error::Inconsistent("frozen embedding changed during target training".into()));
    }
    if !freeze {
        embed.freeze();
    }
    Ok(TargetFit {
        model,
        embed,
        trace,
        embed_hash: (before, after),
    })
}

/// Fits the target decoder `g_t` on `(u_t, x_t)` by squared error.
pub fn fit_decoder(plan: &TransferPlan, target: &TargetData) -> Result<(DecoderMap, TrainTrace)> {
    if target.is_empty() {
        return Err(Error::Empty("no target pairs for the decoder".into()));
    }
    dim_check("target x", plan.dims.d_x_t, target.x.dim())?;
    dim_check("target u", plan.dims.d_u, target.aux.dim())?;
    let mut dec = DecoderMap::new(
        plan.dims.d_u,
        plan.dims.d_x_t,
        plan.models.decoder_net,
        &mut init_rng(&plan.decoder_opts, "decoder"),
    )?;
    let trace = train::fit(&mut dec, &target.x, Conditioning::Fixed(&target.aux), &plan.decoder_opts)?;
    Ok((dec, trace))
}

#[derive(Debug, Clone)]
pub struct UnconditionalFit {
    pub prior: GenModel,
    pub decoder: DecoderMap,
    pub prior_trace: TrainTrace,
    pub decoder_trace: TrainTrace,
}

/// Fits the latent prior (on source latents with transfer, on target
/// latents without) and the decoder `g_t`. A decoder fitted earlier with
/// [`fit_decoder`] is reused when given.
pub fn fit_unconditional(
    plan: &TransferPlan,
    source_latents: Option<&SourceData>,
    target: &TargetData,
    decoder: Option<(DecoderMap, TrainTrace)>,
) -> Result<UnconditionalFit> {
    plan.validate()?;
    if plan.mode != Mode::Unconditional {
        return Err(Error::Config("fit_unconditional needs an unconditional plan".into()));
    }
    if target.is_empty() {
        return Err(Error::Empty("no target pairs".into()));
    }
    dim_check("target u", plan.dims.d_u, target.aux.dim())?;
    let (latents, opts) = match (plan.regime, source_latents) {
        (Regime::Transfer, Some(s)) => {
            if s.is_empty() {
                return Err(Error::Empty("empty source".into()));
            }
            (s.read().1, &plan.source_opts)
        }
        (Regime::Transfer, None) => return Err(Error::Config("transfer regime needs source latents".into())),
        (Regime::NonTransfer, None) => (&target.aux, &plan.target_opts),
        (Regime::NonTransfer, Some(_)) => {
            return Err(Error::Config("non_transfer regime must not receive source data".into()));
        }
    };
    dim_check("latent dim", plan.dims.d_u, latents.dim())?;
    let mut prior = plan.new_model(plan.dims.d_u, 0, &mut init_rng(opts, "prior"))?;
    let prior_trace = prior.fit(latents, Conditioning::None, opts)?;
    let (decoder, decoder_trace) = match decoder {
        Some(d) => {
            dim_check("decoder input", plan.dims.d_u, d.0.net.input_dim())?;
            dim_check("decoder output", plan.dims.d_x_t, d.0.net.output_dim())?;
            d
        }
        None => fit_decoder(plan, target)?,
    };
    Ok(UnconditionalFit {
        prior,
        decoder,
        prior_trace,
        decoder_trace,
    })
}

/// Everything needed to generate target samples.
#[derive(Debug, Clone, PartialEq)]
pub enum Fitted {
    Conditional { model: GenModel, embed: EmbeddingMap },
    Unconditional { prior: GenModel, decoder: DecoderMap },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedPipeline {
    pub plan: TransferPlan,
    pub fitted: Fitted,
    /// Embedding hash before and after target training (conditional).
    pub embed_hash: Option<(u64, u64)>,
    pub source_trace: Option<TrainTrace>,
    pub target_trace: TrainTrace,
}

/// Runs a whole plan. Without transfer `source` must be `None`.
pub fn fit_pipeline(
    plan: &TransferPlan,
    source: Option<&SourceData>,
    target: &TargetData,
    decoder: Option<(DecoderMap, TrainTrace)>,
) -> Result<FittedPipeline> {
    if plan.regime == Regime::NonTransfer && source.is_some() {
        return Err(Error::Config("non_transfer regime must not receive source data".into()));
    }
    match plan.mode {
        Mode::Conditional => {
            let (embed, source_trace) = match plan.regime {
                Regime::Transfer => {
                    let src = source.ok_or_else(|| Error::Config("transfer regime needs source data".into()))?;
                    let s = fit_source_conditional(plan, src)?;
                    (Some(s.embed), Some(s.trace))
                }
                Regime::NonTransfer => (None, None),
            };
            let t = fit_target_conditional(plan, target, embed)?;
            Ok(FittedPipeline {
                plan: plan.clone(),
                fitted: Fitted::Conditional {
                    model: t.model,
                    embed: t.embed,
                },
                embed_hash: Some(t.embed_hash),
                source_trace,
                target_trace: t.trace,
            })
        }
        Mode::Unconditional => {
            let u = fit_unconditional(plan, source, target, decoder)?;
            let (source_trace, target_trace) = match plan.regime {
                Regime::Transfer => (Some(u.prior_trace), u.decoder_trace),
                Regime::NonTransfer => (None, u.prior_trace),
            };
            Ok(FittedPipeline {
                plan: plan.clone(),
                fitted: Fitted::Unconditional {
                    prior: u.prior,
                    decoder: u.decoder,
                },
                embed_hash: None,
                source_trace,
                target_trace,
            })
        }
    }
}

/// Draws `n` target samples. Conditional pipelines need covariates `z`
/// (one shared row or `n` rows), which pass through the embedding first;
/// unconditional pipelines decode prior draws.
pub fn generate(fitted: &Fitted, cond: Option<ArrayView2<'_, f64>>, n: usize, rng: &mut Rng) -> Result<SampleSet> {
    match fitted {
        Fitted::Conditional { model, embed } => {
            let z = cond.ok_or_else(|| Error::Config("conditional generation needs covariates".into()))?;
            dim_check("covariate dim", embed.input_dim(), z.ncols())?;
            if z.nrows() != 1 && z.nrows() != n {
                return Err(Error::Dimension(format!("{} covariate rows for {n} samples", z.nrows())));
            }
            if n == 0 {
                return Ok(SampleSet::empty(model.d_x()));
            }
            let h = embed.apply(z)?;
            model.sample_rows(Some(h.view()), n, rng)
        }
        Fitted::Unconditional { prior, decoder } => {
            if cond.is_some() {
                return Err(Error::Config("unconditional generation takes no covariates".into()));
            }
            let u = prior.sample_rows(None, n, rng)?;
            if n == 0 {
                return Ok(SampleSet::empty(decoder.net.output_dim()));
            }
            Ok(SampleSet::new(decoder.apply(u.view())?))
        }
    }
}
