//! Minibatch Adam training shared by score models, flows and decoders.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::data::SampleSet;
use crate::error::{dim_check, Error, Result};
use crate::nn::{AdamConfig, AdamState};
use crate::rng::{self, Rng};
use crate::transfer::EmbeddingMap;

/// Learning rate over the course of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero over all steps.
    Cosine,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::Parse(format!("unknown lr schedule {other:?}"))),
        }
    }

    /// Rate for step `k` (0-based) of `total`.
    pub fn rate(self, lr: f64, k: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                let frac = k as f64 / total.max(1) as f64;
                0.5 * lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Block gradients into the conditioning embedding.
    pub freeze_cond_net: bool,
    /// Optional max-norm clip applied to every parameter after each step.
    pub param_clip: Option<f64>,
    /// Rescale each minibatch gradient (all model blocks together) to at
    /// most this L2 norm.
    pub grad_clip: Option<f64>,
    pub lr_schedule: LrSchedule,
    /// Also record [`TrainTrace::eval_losses`].
    pub eval_trace: bool,
}

impl Default for TrainOpts {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
            freeze_cond_net: false,
            param_clip: None,
            grad_clip: None,
            lr_schedule: LrSchedule::Constant,
            eval_trace: false,
        }
    }
}

impl TrainOpts {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }
}

/// Per-epoch mean loss per observation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    /// Running mean over the minibatches of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Full-data loss after each epoch under one fixed random draw, when
    /// [`TrainOpts::eval_trace`] is set.
    pub eval_losses: Vec<f64>,
}

/// Loss summed over the rows of a minibatch together with its gradients.
#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub loss: f64,
    /// One gradient vector per entry of [`Trainable::param_blocks_mut`].
    pub grads: Vec<Vec<f64>>,
    /// Gradient with respect to the conditioning inputs, when requested.
    pub cond_grad: Option<Array2<f64>>,
}

/// A model that can report a minibatch loss and its exact gradients.
pub trait Trainable {
    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]>;

    fn loss_and_grads(
        &self,
        x: ArrayView2<'_, f64>,
        cond: Option<ArrayView2<'_, f64>>,
        want_cond_grad: bool,
        rng: &mut Rng,
    ) -> Result<LossAndGrads>;

    /// Summed loss without gradients.
    fn loss(&self, x: ArrayView2<'_, f64>, cond: Option<ArrayView2<'_, f64>>, rng: &mut Rng) -> Result<f64> {
        Ok(self.loss_and_grads(x, cond, false, rng)?.loss)
    }
}

/// Where the conditioning columns for each observation come from.
pub enum Conditioning<'a> {
    None,
    /// Conditioning used as given.
    Fixed(&'a SampleSet),
    /// Conditioning produced by an embedding of raw covariates `z`.
    Embedded {
        z: &'a SampleSet,
        embed: &'a mut EmbeddingMap,
    },
}

impl Conditioning<'_> {
    fn rows(&self) -> Option<usize> {
        match self {
            Conditioning::None => None,
            Conditioning::Fixed(c) => Some(c.len()),
            Conditioning::Embedded { z, .. } => Some(z.len()),
        }
    }
}

/// Runs `opts.epochs` passes of shuffled minibatch Adam over `data`.
///
/// When the conditioning is an unfrozen embedding and `freeze_cond_net` is
/// off, the embedding is trained jointly through the model's conditioning
/// gradient.
pub fn fit<M: Trainable + ?Sized>(
    model: &mut M,
    data: &SampleSet,
    mut cond: Conditioning<'_>,
    opts: &TrainOpts,
) -> Result<TrainTrace> {
    if data.is_empty() {
        return Err(Error::Empty("training data has no rows".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if let Some(n) = cond.rows() {
        dim_check("conditioning rows", data.len(), n)?;
    }
    let adam = AdamConfig::with_lr(opts.lr);
    let mut model_states: Vec<AdamState> = model
        .param_blocks_mut()
        .iter()
        .map(|b| AdamState::new(b.len(), adam))
        .collect();
    let train_embed = match &cond {
        Conditioning::Embedded { embed, .. } => !embed.frozen && !opts.freeze_cond_net,
        _ => false,
    };
    let mut embed_state = match &cond {
        Conditioning::Embedded { embed, .. } if train_embed => {
            Some(AdamState::new(embed.net.num_params(), adam))
        }
        _ => None,
    };

    let mut rng = rng::seeded(opts.seed);
    let n = data.len();
    let total_steps = opts.epochs * n.div_ceil(opts.batch_size);
    let mut step = 0;
    let mut trace = TrainTrace::default();
    for epoch in 0..opts.epochs {
        let order = rng::permutation(&mut rng, n);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let lr = opts.lr_schedule.rate(opts.lr, step, total_steps);
            step += 1;
            model_states.iter_mut().for_each(|s| s.config.learning_rate = lr);
            if let Some(st) = embed_state.as_mut() {
                st.config.learning_rate = lr;
            }
            let x = data.as_array().select(Axis(0), chunk);
            let rows = chunk.len() as f64;
            let lg = match &mut cond {
                Conditioning::None => model.loss_and_grads(x.view(), None, false, &mut rng)?,
                Conditioning::Fixed(c) => {
                    let cb = c.as_array().select(Axis(0), chunk);
                    model.loss_and_grads(x.view(), Some(cb.view()), false, &mut rng)?
                }
                Conditioning::Embedded { z, embed } => {
                    let zb = z.as_array().select(Axis(0), chunk);
                    if train_embed {
                        let (h, cache) = embed.apply_cached(zb.view())?;
                        let lg = model.loss_and_grads(x.view(), Some(h.view()), true, &mut rng)?;
                        let cg = lg.cond_grad.as_ref().ok_or_else(|| {
                            Error::Config("model did not return a conditioning gradient".into())
                        })?;
                        let d_h = embed.net.output_dim();
                        let mut eg = vec![0.0; embed.net.num_params()];
                        embed.net.backward_batch(
                            &cache,
                            cg.slice(s![.., ..d_h]),
                            &mut eg,
                            false,
                        )?;
                        crate::nn::scale(&mut eg, 1.0 / rows);
                        let st = embed_state.as_mut().expect("embed optimizer");
                        st.step(embed.net.params_mut(), &eg).map_err(|e| at_epoch(e, epoch))?;
                        if let Some(b) = opts.param_clip {
                            embed.net.clip_params(b);
                        }
                        lg
                    } else {
                        let h = embed.apply(zb.view())?;
                        model.loss_and_grads(x.view(), Some(h.view()), false, &mut rng)?
                    }
                }
            };
            if !lg.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {} in epoch {epoch}",
                    lg.loss
                )));
            }
            epoch_loss += lg.loss;
            let mut blocks = model.param_blocks_mut();
            dim_check("gradient blocks", blocks.len(), lg.grads.len())?;
            let mut grads = lg.grads;
            let mut factor = 1.0 / rows;
            if let Some(c) = opts.grad_clip {
                let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt() * factor;
                if norm > c {
                    factor *= c / norm;
                }
            }
            for ((block, g), st) in blocks.iter_mut().zip(grads.iter_mut()).zip(&mut model_states) {
                crate::nn::scale(g, factor);
                st.step(block, g).map_err(|e| at_epoch(e, epoch))?;
                if let Some(b) = opts.param_clip {
                    block.iter_mut().for_each(|p| *p = p.clamp(-b, b));
                }
            }
        }
        trace.epoch_losses.push(epoch_loss / n as f64);
        if opts.eval_trace {
            trace.eval_losses.push(full_loss(model, data, &cond, opts)?);
        }
    }
    Ok(trace)
}

/// Mean loss over all of `data`, drawing any noise from a stream that is
/// reset on every call so successive epochs see the same draws.
fn full_loss<M: Trainable + ?Sized>(model: &M, data: &SampleSet, cond: &Conditioning<'_>, opts: &TrainOpts) -> Result<f64> {
    let mut rng = rng::derived(opts.seed, "eval-trace", 0);
    let mut total = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(opts.batch_size) {
        let x = data.as_array().select(Axis(0), chunk);
        let c = match cond {
            Conditioning::None => None,
            Conditioning::Fixed(c) => Some(c.as_array().select(Axis(0), chunk)),
            Conditioning::Embedded { z, embed } => Some(embed.apply(z.as_array().select(Axis(0), chunk).view())?),
        };
        total += model.loss(x.view(), c.as_ref().map(|c| c.view()), &mut rng)?;
    }
    Ok(total / data.len() as f64)
}

fn at_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} (epoch {epoch})")),
        other => other,
    }
}
