//! The source-size sweep: transfer pipelines over a grid of `n_s` values
//! and one non-transfer baseline per family, mode and replication.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, OnceLock};
use std::time::Instant;

use crate::data::SampleSet;
use crate::error::{Error, Result};
use crate::harness::dgp::{draw_dgp, DgpDraw, DgpKind, DgpSpec, Role};
use crate::harness::results::{ExperimentResult, ResultRow, ResultWriter, STATUS_OK};
use crate::metrics::{sinkhorn_wasserstein, tv_binned, SinkhornConfig, TvConfig};
use crate::nn::{Activation, NetShape};
use crate::rng::{self, derive_seed};
use crate::train::{LrSchedule, TrainOpts, TrainTrace};
use crate::transfer::{
    fit_decoder, fit_pipeline, generate, DecoderMap, Dims, Family, ModelConfig, Mode, Regime, SourceData,
    TargetData, TransferPlan,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// `n_s = floor(exp(i))` for each entry; strictly increasing.
    pub i_grid: Vec<f64>,
    pub n_t: usize,
    pub n_eval: usize,
    /// Points per side fed to Sinkhorn (at most `n_eval`).
    pub ot_points: usize,
    pub replications: usize,
    /// Replication `r` uses seed `base_seed + r`.
    pub base_seed: u64,
    pub families: Vec<Family>,
    pub modes: Vec<Mode>,
    pub workers: usize,
    /// Write measured wall times; zeros otherwise, for byte-identical reruns.
    pub record_timing: bool,
    pub source_opts: TrainOpts,
    pub target_opts: TrainOpts,
    pub decoder_opts: TrainOpts,
    pub models: ModelConfig,
    pub d_h: usize,
    pub tv: TvConfig,
    pub sinkhorn: SinkhornConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let opts = TrainOpts {
            epochs: 50,
            batch_size: 256,
            lr: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            grad_clip: Some(1.0),
            ..TrainOpts::default()
        };
        Self {
            i_grid: vec![8.0, 8.5, 9.0, 9.5, 10.0, 10.5, 11.0],
            n_t: 5000,
            n_eval: 5000,
            ot_points: 1000,
            replications: 5,
            base_seed: 0,
            families: vec![Family::Diffusion, Family::Flow],
            modes: vec![Mode::Conditional, Mode::Unconditional],
            workers: 1,
            record_timing: true,
            source_opts: opts,
            target_opts: opts,
            decoder_opts: opts,
            models: ModelConfig {
                score_net: NetShape::new(128, 3, Activation::Relu),
                embed_net: NetShape::new(128, 3, Activation::Relu),
                decoder_net: NetShape::new(128, 3, Activation::Relu),
                ..ModelConfig::default()
            },
            d_h: 8,
            tv: TvConfig::default(),
            sinkhorn: SinkhornConfig {
                tol: 1e-3,
                ..SinkhornConfig::default()
            },
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.i_grid.is_empty() {
            return Err(Error::Config("i_grid is empty".into()));
        }
        if self.i_grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config(format!("i_grid must be strictly increasing: {:?}", self.i_grid)));
        }
        if self.i_grid.iter().any(|i| !i.is_finite() || *i < 0.0 || *i > 30.0) {
            return Err(Error::Config("i_grid entries must lie in [0, 30]".into()));
        }
        if self.n_t == 0 || self.n_eval == 0 || self.replications == 0 || self.ot_points == 0 {
            return Err(Error::Config("n_t, n_eval, ot_points and replications must be positive".into()));
        }
        if self.families.is_empty() || self.modes.is_empty() {
            return Err(Error::Config("select at least one family and one mode".into()));
        }
        if self.d_h == 0 {
            return Err(Error::Config("d_h must be positive".into()));
        }
        Ok(())
    }

    pub fn source_sizes(&self) -> Vec<usize> {
        self.i_grid.iter().map(|&i| n_s_for(i)).collect()
    }

    pub fn replication_seed(&self, replication: usize) -> u64 {
        self.base_seed.wrapping_add(replication as u64)
    }

    /// Every run of the sweep, in output order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &family in &self.families {
            for &mode in &self.modes {
                for replication in 0..self.replications {
                    let seed = self.replication_seed(replication);
                    for n_s in self.source_sizes() {
                        out.push(Cell {
                            family,
                            mode,
                            regime: Regime::Transfer,
                            n_s,
                            replication,
                            seed,
                        });
                    }
                    out.push(Cell {
                        family,
                        mode,
                        regime: Regime::NonTransfer,
                        n_s: 0,
                        replication,
                        seed,
                    });
                }
            }
        }
        out
    }

    /// The pipeline plan behind a cell. Training seeds depend on the
    /// replication, family and mode but not on `n_s` or the regime.
    pub fn plan(&self, cell: &Cell) -> TransferPlan {
        let kind = dgp_kind(cell.mode);
        let (d_x_s, d_x_t, d_aux) = kind.dims();
        let tag = format!("{}/{}", cell.family.name(), cell.mode.name());
        TransferPlan {
            family: cell.family,
            mode: cell.mode,
            regime: cell.regime,
            source_opts: TrainOpts {
                seed: derive_seed(cell.seed, &format!("source/{tag}"), 0),
                ..self.source_opts
            },
            target_opts: TrainOpts {
                seed: derive_seed(cell.seed, &format!("target/{tag}"), 0),
                ..self.target_opts
            },
            decoder_opts: TrainOpts {
                seed: derive_seed(cell.seed, "decoder", 0),
                ..self.decoder_opts
            },
            dims: Dims {
                d_x_s,
                d_x_t,
                d_z: if cell.mode == Mode::Conditional { d_aux } else { 0 },
                d_h: self.d_h,
                d_u: if cell.mode == Mode::Unconditional { d_aux } else { 0 },
            },
            models: self.models.clone(),
        }
    }
}

pub fn n_s_for(i: f64) -> usize {
    i.exp().floor() as usize
}

pub fn dgp_kind(mode: Mode) -> DgpKind {
    match mode {
        Mode::Conditional => DgpKind::CondSim,
        Mode::Unconditional => DgpKind::UncondSim,
    }
}

pub fn metric_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Conditional => "tv",
        Mode::Unconditional => "wasserstein",
    }
}

/// One pipeline run of the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub family: Family,
    pub mode: Mode,
    pub regime: Regime,
    pub n_s: usize,
    pub replication: usize,
    pub seed: u64,
}

/// Embedding hashes around the target phase of a transfer run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezeRecord {
    pub cell: Cell,
    pub before: u64,
    pub after: u64,
}

/// Data shared by every cell of one mode and replication: the largest
/// source draw (smaller runs use prefixes), the target sample and the
/// evaluation sample.
pub struct ReplicationData {
    pub source: SourceData,
    pub target: TargetData,
    pub eval: DgpDraw,
    decoder: OnceLock<std::result::Result<(DecoderMap, TrainTrace), String>>,
}

impl ReplicationData {
    pub fn draw(cfg: &SweepConfig, mode: Mode, seed: u64) -> Result<Self> {
        let spec = DgpSpec {
            kind: dgp_kind(mode),
            seed,
        };
        let n_max = cfg.source_sizes().into_iter().max().unwrap_or(0);
        let src = draw_dgp(spec.kind, Role::Source, n_max, &mut spec.rng(Role::Source, "train"));
        let tgt = draw_dgp(spec.kind, Role::Target, cfg.n_t, &mut spec.rng(Role::Target, "train"));
        let eval = draw_dgp(spec.kind, Role::Target, cfg.n_eval, &mut spec.rng(Role::Target, "eval"));
        let source = match mode {
            Mode::Conditional => SourceData::new(src.x, src.aux)?,
            Mode::Unconditional => SourceData::latents(src.aux),
        };
        Ok(Self {
            source,
            target: TargetData::new(tgt.x, tgt.aux)?,
            eval,
            decoder: OnceLock::new(),
        })
    }

    /// The target decoder, fitted once and shared by every unconditional
    /// run of the replication (it depends on target data only).
    fn decoder(&self, plan: &TransferPlan) -> Result<(DecoderMap, TrainTrace)> {
        self.decoder
            .get_or_init(|| fit_decoder(plan, &self.target).map_err(|e| e.to_string()))
            .clone()
            .map_err(|e| Error::Config(format!("decoder fit failed: {e}")))
    }
}

/// Outcome of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub row: ResultRow,
    pub freeze: Option<FreezeRecord>,
}

fn evaluate(cfg: &SweepConfig, cell: &Cell, fitted: &crate::transfer::Fitted, data: &ReplicationData) -> Result<f64> {
    let mut rng = rng::derived(cell.seed, &format!("generate/{}/{}", cell.family.name(), cell.mode.name()), 0);
    match cell.mode {
        Mode::Conditional => {
            let z = data.eval.aux.view();
            let gen = generate(fitted, Some(z), z.nrows(), &mut rng)?;
            tv_binned(&gen, &data.eval.x, &cfg.tv)
        }
        Mode::Unconditional => {
            let m = cfg.ot_points.min(data.eval.x.len());
            let gen = generate(fitted, None, m, &mut rng)?;
            let truth: SampleSet = data.eval.x.head(m);
            let out = sinkhorn_wasserstein(&gen, &truth, &cfg.sinkhorn)?;
            if !out.converged {
                log::warn!(
                    "sinkhorn stopped after {} iterations (marginal error {:e}) in {cell:?}",
                    out.iterations,
                    out.marginal_error
                );
            }
            Ok(out.cost)
        }
    }
}

fn run_cell_inner(cfg: &SweepConfig, cell: &Cell, data: &ReplicationData) -> Result<(f64, Option<FreezeRecord>)> {
    let plan = cfg.plan(cell);
    let source = match cell.regime {
        Regime::Transfer => Some(data.source.prefix(cell.n_s)),
        Regime::NonTransfer => None,
    };
    let decoder = match cell.mode {
        Mode::Unconditional => Some(data.decoder(&plan)?),
        Mode::Conditional => None,
    };
    let fitted = fit_pipeline(&plan, source.as_ref(), &data.target, decoder)?;
    let freeze = match (cell.regime, fitted.embed_hash) {
        (Regime::Transfer, Some((before, after))) => Some(FreezeRecord {
            cell: *cell,
            before,
            after,
        }),
        _ => None,
    };
    let value = evaluate(cfg, cell, &fitted.fitted, data)?;
    if !value.is_finite() || value < 0.0 {
        return Err(Error::NonFinite(format!("metric value {value}")));
    }
    Ok((value, freeze))
}

/// Fits and evaluates one cell. Errors and panics become a failed row.
pub fn run_cell(cfg: &SweepConfig, cell: &Cell, data: &ReplicationData) -> CellOutcome {
    let start = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(|| run_cell_inner(cfg, cell, data)));
    let elapsed = if cfg.record_timing { start.elapsed().as_secs_f64() } else { 0.0 };
    let (value, freeze, status) = match res {
        Ok(Ok((v, f))) => (v, f, STATUS_OK.to_string()),
        Ok(Err(e)) => (f64::NAN, None, format!("failed: {e}")),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (f64::NAN, None, format!("failed: panic: {msg}"))
        }
    };
    CellOutcome {
        row: ResultRow {
            family: cell.family,
            mode: cell.mode,
            regime: cell.regime,
            n_s: cell.n_s,
            replication: cell.replication,
            seed: cell.seed,
            metric: metric_name(cell.mode).to_string(),
            value,
            wall_time_s: elapsed,
            status,
        },
        freeze,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepOutcome {
    pub result: ExperimentResult,
    pub freeze: Vec<FreezeRecord>,
}

pub const FREEZE_HEADER: &str = "family,mode,n_s,replication,seed,hash_before,hash_after";

fn write_freeze(path: &Path, records: &[FreezeRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{FREEZE_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{:016x},{:016x}",
            r.cell.family, r.cell.mode, r.cell.n_s, r.cell.replication, r.cell.seed, r.before, r.after
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every cell on `cfg.workers` threads. Rows reach `results.csv` in
/// plan order as soon as all earlier rows are done; embedding hashes of
/// transfer runs go to `freeze.csv`.
pub fn run_sweep(cfg: &SweepConfig, out_dir: &Path) -> Result<SweepOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut writer = ResultWriter::new(BufWriter::new(File::create(out_dir.join("results.csv"))?))?;

    let mut data: BTreeMap<(Mode, usize), ReplicationData> = BTreeMap::new();
    for &mode in &cfg.modes {
        for rep in 0..cfg.replications {
            data.insert((mode, rep), ReplicationData::draw(cfg, mode, cfg.replication_seed(rep))?);
        }
    }
    let cells = cfg.cells();
    let next = AtomicUsize::new(0);
    let workers = cfg.workers.clamp(1, cells.len().max(1));
    let (tx, rx) = mpsc::channel::<(usize, CellOutcome)>();
    let mut outcome = SweepOutcome::default();

    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (cells, data, next) = (&cells, &data, &next);
            scope.spawn(move || loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(k) else { break };
                let d = &data[&(cell.mode, cell.replication)];
                if tx.send((k, run_cell(cfg, cell, d))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending: BTreeMap<usize, CellOutcome> = BTreeMap::new();
        let mut written = 0;
        for (k, out) in rx {
            log::info!(
                "[{}/{}] {} {} {} n_s={} rep={}: {} = {} ({})",
                pending.len() + written + 1,
                cells.len(),
                out.row.family,
                out.row.mode,
                out.row.regime,
                out.row.n_s,
                out.row.replication,
                out.row.metric,
                out.row.value,
                out.row.status
            );
            pending.insert(k, out);
            while let Some(out) = pending.remove(&written) {
                writer.write(&out.row)?;
                outcome.result.rows.push(out.row);
                outcome.freeze.extend(out.freeze);
                written += 1;
            }
        }
        Ok(())
    })?;
    write_freeze(&out_dir.join("freeze.csv"), &outcome.freeze)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_source_sizes() {
        assert_eq!(
            SweepConfig::default().source_sizes(),
            vec![2980, 4914, 8103, 13359, 22026, 36315, 59874]
        );
    }

    #[test]
    fn cell_counts() {
        let cfg = SweepConfig {
            i_grid: vec![8.0],
            replications: 1,
            families: vec![Family::Diffusion],
            modes: vec![Mode::Conditional],
            ..SweepConfig::default()
        };
        let cells = cfg.cells();
        assert_eq!(cells.len(), 2);
        assert_eq!((cells[0].regime, cells[0].n_s), (Regime::Transfer, 2980));
        assert_eq!((cells[1].regime, cells[1].n_s), (Regime::NonTransfer, 0));
        assert_eq!(SweepConfig::default().cells().len(), 2 * 2 * 5 * 8);
    }

    #[test]
    fn plan_seeds_shared_across_source_sizes() {
        let cfg = SweepConfig::default();
        let cells = cfg.cells();
        let a = cfg.plan(&cells[0]);
        let b = cfg.plan(&cells[3]);
        let nt = cfg.plan(&cells[7]);
        assert_eq!(a.source_opts.seed, b.source_opts.seed);
        assert_eq!(a.target_opts.seed, nt.target_opts.seed);
        assert_ne!(a.source_opts.seed, a.target_opts.seed);
        assert_ne!(cfg.plan(&cells[8]).target_opts.seed, a.target_opts.seed);
    }

    #[test]
    fn grid_validation() {
        let bad = SweepConfig {
            i_grid: vec![9.0, 8.0],
            ..SweepConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(SweepConfig::default().validate().is_ok());
    }
}
