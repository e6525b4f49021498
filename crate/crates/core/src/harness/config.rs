//! TOML configuration. Every key is optional and overrides the matching
//! default of [`SweepConfig`]; the `[pipeline]` table selects the single
//! pipeline run by `genxfer train`.
//!
//! ```toml
//! [sweep]
//! i_grid = [8.0, 9.0]
//! replications = 2
//! families = ["diffusion"]
//!
//! [train]
//! epochs = 20
//! lr_schedule = "cosine"
//!
//! [model]
//! d_h = 2
//! tau_embed = "sinusoidal:4"
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::diffusion::{NoiseSchedule, TauEmbed};
use crate::error::{Error, Result};
use crate::flows::{BaseDensity, CouplingKind};
use crate::harness::sweep::SweepConfig;
use crate::metrics::{BinRange, Cost};
use crate::nn::{Activation, NetShape};
use crate::train::{LrSchedule, TrainOpts};
use crate::transfer::{Family, Mode, Regime};

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub i_grid: Option<Vec<f64>>,
    pub n_t: Option<usize>,
    pub n_eval: Option<usize>,
    pub ot_points: Option<usize>,
    pub replications: Option<usize>,
    pub base_seed: Option<u64>,
    pub families: Option<Vec<String>>,
    pub modes: Option<Vec<String>>,
    pub workers: Option<usize>,
    pub record_timing: Option<bool>,
}

/// Optimiser settings shared by all phases; `[train.source]`,
/// `[train.target]` and `[train.decoder]` override them per phase.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(flatten)]
    pub shared: PhaseSection,
    pub source: Option<PhaseSection>,
    pub target: Option<PhaseSection>,
    pub decoder: Option<PhaseSection>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
pub struct PhaseSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lr_schedule: Option<String>,
    /// Gradient norm clip; 0 disables.
    pub grad_clip: Option<f64>,
    /// Parameter max-norm clip; 0 disables.
    pub param_clip: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub width: Option<usize>,
    pub hidden_layers: Option<usize>,
    pub activation: Option<ActivationName>,
}

/// Activation tag as written in the file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationName {
    Relu,
    Requ,
    Tanh,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_h: Option<usize>,
    pub passthrough_idx: Option<Vec<usize>>,
    pub score_net: Option<NetSection>,
    pub embed_net: Option<NetSection>,
    pub decoder_net: Option<NetSection>,
    pub flow_net: Option<NetSection>,
    /// `raw`, `log` or `sinusoidal:<k>`.
    pub tau_embed: Option<String>,
    pub tau_min: Option<f64>,
    pub tau_max: Option<f64>,
    pub tau_star: Option<f64>,
    pub n_steps: Option<usize>,
    pub mc_taus: Option<usize>,
    /// Standardize diffusion training data per coordinate.
    pub standardize: Option<bool>,
    pub n_coupling: Option<usize>,
    /// `affine` or `additive`.
    pub coupling: Option<String>,
    pub log_scale_bound: Option<f64>,
    pub zero_init: Option<bool>,
    /// `gaussian` or `uniform_logit`.
    pub base: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub n_bins: Option<usize>,
    /// Fixed `[lo, hi]` histogram range; joint sample range when absent.
    pub tv_range: Option<[f64; 2]>,
    pub epsilon: Option<f64>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub cost: Option<String>,
    /// Epsilon annealing factor; 0 disables.
    pub anneal: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub family: Option<String>,
    pub mode: Option<String>,
    pub regime: Option<String>,
    /// Source sample size for a single transfer run.
    pub n_s: Option<usize>,
    pub seed: Option<u64>,
}

/// Single-pipeline selection after defaults are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineChoice {
    pub family: Family,
    pub mode: Mode,
    pub regime: Regime,
    pub n_s: usize,
    pub seed: u64,
}

impl Default for PipelineChoice {
    fn default() -> Self {
        Self {
            family: Family::Diffusion,
            mode: Mode::Conditional,
            regime: Regime::Transfer,
            n_s: 2980,
            seed: 0,
        }
    }
}

pub fn parse_tau_embed(s: &str) -> Result<TauEmbed> {
    match s {
        "raw" => Ok(TauEmbed::Raw),
        "log" => Ok(TauEmbed::Log),
        _ => match s.strip_prefix("sinusoidal:").map(str::parse::<usize>) {
            Some(Ok(k)) if k > 0 => Ok(TauEmbed::Sinusoidal(k)),
            _ => Err(Error::Parse(format!("unknown tau embedding {s:?}"))),
        },
    }
}

pub fn parse_coupling(s: &str) -> Result<CouplingKind> {
    match s {
        "affine" => Ok(CouplingKind::Affine),
        "additive" => Ok(CouplingKind::Additive),
        other => Err(Error::Parse(format!("unknown coupling kind {other:?}"))),
    }
}

pub fn parse_base(s: &str) -> Result<BaseDensity> {
    match s {
        "gaussian" => Ok(BaseDensity::StdGaussian),
        "uniform_logit" => Ok(BaseDensity::UniformLogit),
        other => Err(Error::Parse(format!("unknown base density {other:?}"))),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn nonzero(v: f64) -> Option<f64> {
    (v > 0.0).then_some(v)
}

impl PhaseSection {
    fn apply(&self, opts: &mut TrainOpts) -> Result<()> {
        set(&mut opts.epochs, self.epochs);
        set(&mut opts.batch_size, self.batch_size);
        set(&mut opts.lr, self.lr);
        if let Some(s) = &self.lr_schedule {
            opts.lr_schedule = LrSchedule::parse(s)?;
        }
        if let Some(c) = self.grad_clip {
            opts.grad_clip = nonzero(c);
        }
        if let Some(c) = self.param_clip {
            opts.param_clip = nonzero(c);
        }
        if opts.batch_size == 0 || !(opts.lr > 0.0) {
            return Err(Error::Config("batch_size and lr must be positive".into()));
        }
        Ok(())
    }
}

impl NetSection {
    fn apply(&self, shape: &mut NetShape) {
        set(&mut shape.width, self.width);
        set(&mut shape.hidden_layers, self.hidden_layers);
        if let Some(a) = self.activation {
            shape.activation = match a {
                ActivationName::Relu => Activation::Relu,
                ActivationName::Requ => Activation::Requ,
                ActivationName::Tanh => Activation::Tanh,
            };
        }
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Overlays this file onto `base`.
    pub fn apply(&self, base: SweepConfig) -> Result<SweepConfig> {
        let mut c = base;
        let s = &self.sweep;
        set(&mut c.i_grid, s.i_grid.clone());
        set(&mut c.n_t, s.n_t);
        set(&mut c.n_eval, s.n_eval);
        set(&mut c.ot_points, s.ot_points);
        set(&mut c.replications, s.replications);
        set(&mut c.base_seed, s.base_seed);
        set(&mut c.workers, s.workers);
        set(&mut c.record_timing, s.record_timing);
        if let Some(f) = &s.families {
            c.families = f.iter().map(|x| Family::parse(x)).collect::<Result<_>>()?;
        }
        if let Some(m) = &s.modes {
            c.modes = m.iter().map(|x| Mode::parse(x)).collect::<Result<_>>()?;
        }

        let t = &self.train;
        for (opts, phase) in [
            (&mut c.source_opts, &t.source),
            (&mut c.target_opts, &t.target),
            (&mut c.decoder_opts, &t.decoder),
        ] {
            t.shared.apply(opts)?;
            if let Some(p) = phase {
                p.apply(opts)?;
            }
        }

        let m = &self.model;
        let mc = &mut c.models;
        set(&mut c.d_h, m.d_h);
        set(&mut mc.passthrough_idx, m.passthrough_idx.clone());
        for (shape, sec) in [
            (&mut mc.score_net, m.score_net),
            (&mut mc.embed_net, m.embed_net),
            (&mut mc.decoder_net, m.decoder_net),
            (&mut mc.flow.net, m.flow_net),
        ] {
            if let Some(sec) = sec {
                sec.apply(shape);
            }
        }
        if let Some(e) = &m.tau_embed {
            mc.tau_embed = parse_tau_embed(e)?;
        }
        let sch = mc.schedule;
        mc.schedule = NoiseSchedule::new(
            m.tau_min.unwrap_or(sch.tau_min),
            m.tau_max.unwrap_or(sch.tau_max),
            m.tau_star.unwrap_or(sch.tau_star),
            m.n_steps.unwrap_or(sch.n_steps),
        )?;
        set(&mut mc.mc_taus, m.mc_taus);
        set(&mut mc.standardize, m.standardize);
        set(&mut mc.flow.n_coupling, m.n_coupling);
        set(&mut mc.flow.log_scale_bound, m.log_scale_bound);
        set(&mut mc.flow.zero_init, m.zero_init);
        if let Some(k) = &m.coupling {
            mc.flow.kind = parse_coupling(k)?;
        }
        if let Some(b) = &m.base {
            mc.base = parse_base(b)?;
        }

        let x = &self.metrics;
        set(&mut c.tv.n_bins, x.n_bins);
        if let Some([lo, hi]) = x.tv_range {
            c.tv.range = BinRange::Fixed(lo, hi);
        }
        set(&mut c.sinkhorn.epsilon, x.epsilon);
        set(&mut c.sinkhorn.max_iters, x.max_iters);
        set(&mut c.sinkhorn.tol, x.tol);
        if let Some(cost) = &x.cost {
            c.sinkhorn.cost = Cost::parse(cost)?;
        }
        if let Some(a) = x.anneal {
            c.sinkhorn.anneal = nonzero(a);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn pipeline(&self) -> Result<PipelineChoice> {
        let p = &self.pipeline;
        let mut out = PipelineChoice::default();
        if let Some(f) = &p.family {
            out.family = Family::parse(f)?;
        }
        if let Some(m) = &p.mode {
            out.mode = Mode::parse(m)?;
        }
        if let Some(r) = &p.regime {
            out.regime = Regime::parse(r)?;
        }
        set(&mut out.n_s, p.n_s);
        set(&mut out.seed, p.seed);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_keeps_defaults() {
        let c = ConfigFile::parse("").unwrap().apply(SweepConfig::default()).unwrap();
        assert_eq!(c, SweepConfig::default());
    }

    #[test]
    fn overrides_apply() {
        let text = r#"
            [sweep]
            i_grid = [8.0]
            families = ["flow"]
            [train]
            epochs = 3
            grad_clip = 0
            [train.decoder]
            epochs = 7
            [model]
            d_h = 2
            tau_embed = "sinusoidal:3"
            score_net = { width = 16, activation = "tanh" }
            base = "uniform_logit"
            [metrics]
            tv_range = [-1.0, 1.0]
            anneal = 0
            [pipeline]
            regime = "non_transfer"
        "#;
        let f = ConfigFile::parse(text).unwrap();
        let c = f.apply(SweepConfig::default()).unwrap();
        assert_eq!(c.source_sizes(), vec![2980]);
        assert_eq!(c.families, vec![Family::Flow]);
        assert_eq!((c.source_opts.epochs, c.decoder_opts.epochs), (3, 7));
        assert_eq!(c.target_opts.grad_clip, None);
        assert_eq!(c.models.tau_embed, TauEmbed::Sinusoidal(3));
        assert_eq!(c.models.score_net.width, 16);
        assert_eq!(c.models.score_net.activation, Activation::Tanh);
        assert_eq!(c.models.base, BaseDensity::UniformLogit);
        assert_eq!(c.tv.range, BinRange::Fixed(-1.0, 1.0));
        assert_eq!(c.sinkhorn.anneal, None);
        assert_eq!(f.pipeline().unwrap().regime, Regime::NonTransfer);
    }

    #[test]
    fn unknown_keys_and_tags_are_rejected() {
        assert!(ConfigFile::parse("[sweep]\nn_tt = 3\n").is_err());
        let f = ConfigFile::parse("[sweep]\nmodes = [\"both\"]\n").unwrap();
        assert!(f.apply(SweepConfig::default()).is_err());
        let f = ConfigFile::parse("[sweep]\ni_grid = [9.0, 8.0]\n").unwrap();
        assert!(f.apply(SweepConfig::default()).is_err());
    }
}
