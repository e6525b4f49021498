//! Self-contained SVG rendering of a sweep: one panel per family and mode.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::results::{mean, ExperimentResult};
use crate::transfer::{Family, Mode, Regime};

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 50.0;
const COLUMNS: usize = 2;

/// Summary of one panel, as drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelSummary {
    pub family: Family,
    pub mode: Mode,
    pub metric: String,
    /// `(n_s, mean, min, max)` over successful replications.
    pub transfer: Vec<(usize, f64, f64, f64)>,
    pub baseline: Option<f64>,
}

pub fn summarize(result: &ExperimentResult) -> Vec<PanelSummary> {
    result
        .panels()
        .into_iter()
        .map(|(family, mode)| {
            let metric = result
                .rows
                .iter()
                .find(|r| r.family == family && r.mode == mode)
                .map(|r| r.metric.clone())
                .unwrap_or_default();
            let transfer = result
                .source_sizes(family, mode)
                .into_iter()
                .filter_map(|n| {
                    let v = result.values(family, mode, Regime::Transfer, Some(n));
                    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    mean(&v).map(|m| (n, m, lo, hi))
                })
                .collect();
            let baseline = mean(&result.values(family, mode, Regime::NonTransfer, None));
            PanelSummary {
                family,
                mode,
                metric,
                transfer,
                baseline,
            }
        })
        .collect()
}

fn log_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| *v > 0.0 && v.is_finite()) {
        lo = lo.min(v.log10());
        hi = hi.max(v.log10());
    }
    if !lo.is_finite() {
        return None;
    }
    let pad = ((hi - lo) * 0.08).max(0.05);
    Some((lo - pad, hi + pad))
}

/// Maps a positive value onto `[a, b]` on a log scale; non-positive values
/// are clamped to the low end.
fn scale(v: f64, (lo, hi): (f64, f64), a: f64, b: f64) -> f64 {
    let l = if v > 0.0 { v.log10() } else { lo };
    a + (l - lo) / (hi - lo) * (b - a)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn fmt_tick(v: f64) -> String {
    if (1e-2..1e4).contains(&v.abs()) {
        format!("{}", (v * 1000.0).round() / 1000.0)
    } else {
        format!("{v:.1e}")
    }
}

fn panel(out: &mut String, p: &PanelSummary, x0: f64, y0: f64) {
    let (l, r) = (x0 + MARGIN_L, x0 + PANEL_W - MARGIN_R);
    let (t, b) = (y0 + MARGIN_T, y0 + PANEL_H - MARGIN_B);
    let _ = writeln!(out, r#"<g class="panel" data-family="{}" data-mode="{}">"#, p.family, p.mode);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">{} / {}</text>"#,
        (l + r) / 2.0,
        y0 + 20.0,
        p.family,
        p.mode
    );
    let _ = writeln!(
        out,
        r#"<rect x="{l:.2}" y="{t:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="dimgray"/>"#,
        r - l,
        b - t
    );

    let ys = p
        .transfer
        .iter()
        .flat_map(|&(_, m, lo, hi)| [m, lo, hi])
        .chain(p.baseline);
    let y_range = log_range(ys).unwrap_or((-1.0, 0.0));
    let xs = p.transfer.iter().map(|&(n, ..)| n as f64);
    let x_range = match log_range(xs) {
        Some((lo, hi)) if hi - lo > 1e-9 => (lo, hi),
        Some((lo, _)) => (lo - 0.1, lo + 0.1),
        None => (3.0, 5.0),
    };
    let px = |n: f64| scale(n, x_range, l, r);
    let py = |v: f64| scale(v, y_range, b, t);

    for (k, &(n, ..)) in p.transfer.iter().enumerate() {
        let x = px(n as f64);
        let _ = writeln!(out, r#"<line x1="{x:.2}" y1="{b:.2}" x2="{x:.2}" y2="{:.2}" stroke="dimgray"/>"#, b + 4.0);
        // Labels alternate rows so neighbours on a dense grid stay apart.
        let dy = if k % 2 == 0 { 16.0 } else { 28.0 };
        let _ = writeln!(
            out,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle" font-size="10">{n}</text>"#,
            b + dy
        );
    }
    for k in 0..=4 {
        let l10 = y_range.0 + (y_range.1 - y_range.0) * k as f64 / 4.0;
        let y = scale(10f64.powf(l10), y_range, b, t);
        let _ = writeln!(out, r#"<line x1="{:.2}" y1="{y:.2}" x2="{l:.2}" y2="{y:.2}" stroke="dimgray"/>"#, l - 4.0);
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"#,
            l - 6.0,
            y + 3.0,
            fmt_tick(10f64.powf(l10))
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">source sample size n_s (log)</text>"#,
        (l + r) / 2.0,
        y0 + PANEL_H - 8.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12" transform="rotate(-90 {:.2} {:.2})">{} (log)</text>"#,
        x0 + 16.0,
        (t + b) / 2.0,
        x0 + 16.0,
        (t + b) / 2.0,
        esc(&p.metric)
    );

    if p.transfer.len() > 1 {
        let mut d = String::new();
        for (k, &(n, _, _, hi)) in p.transfer.iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2} ", if k == 0 { "M" } else { "L" }, px(n as f64), py(hi));
        }
        for &(n, _, lo, _) in p.transfer.iter().rev() {
            let _ = write!(d, "L{:.2},{:.2} ", px(n as f64), py(lo));
        }
        let _ = writeln!(
            out,
            r##"<path class="band" d="{}Z" fill="#1f77b4" fill-opacity="0.2" stroke="none"/>"##,
            d
        );
        let pts: Vec<String> = p
            .transfer
            .iter()
            .map(|&(n, m, ..)| format!("{:.2},{:.2}", px(n as f64), py(m)))
            .collect();
        let _ = writeln!(
            out,
            r##"<polyline class="transfer" points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
            pts.join(" ")
        );
    }
    for &(n, m, lo, hi) in &p.transfer {
        let x = px(n as f64);
        if hi > lo {
            let _ = writeln!(
                out,
                r##"<line class="range" x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#1f77b4"/>"##,
                py(lo),
                py(hi)
            );
        }
        let _ = writeln!(
            out,
            r##"<circle class="marker" cx="{x:.2}" cy="{:.2}" r="3.5" fill="#1f77b4" data-n-s="{n}" data-value="{m:e}"/>"##,
            py(m)
        );
    }
    if let Some(v) = p.baseline {
        let y = py(v);
        let _ = writeln!(
            out,
            r##"<line class="baseline" x1="{l:.2}" y1="{y:.2}" x2="{r:.2}" y2="{y:.2}" stroke="#d62728" stroke-width="2" stroke-dasharray="6,4" data-value="{v:e}"/>"##
        );
    }
    let _ = writeln!(
        out,
        r##"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10" fill="#1f77b4">transfer (mean, range)</text>"##,
        r - 4.0,
        t + 12.0
    );
    let _ = writeln!(
        out,
        r##"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10" fill="#d62728">non-transfer mean</text>"##,
        r - 4.0,
        t + 24.0
    );
    out.push_str("</g>\n");
}

/// Renders the whole result as an SVG document.
pub fn render_svg(result: &ExperimentResult) -> Result<String> {
    let panels = summarize(result);
    if panels.is_empty() || panels.iter().all(|p| p.transfer.is_empty() && p.baseline.is_none()) {
        return Err(Error::Empty("no successful result rows to plot".into()));
    }
    let cols = panels.len().min(COLUMNS);
    let rows = panels.len().div_ceil(COLUMNS);
    let (w, h) = (cols as f64 * PANEL_W, rows as f64 * PANEL_H);
    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (k, p) in panels.iter().enumerate() {
        panel(&mut out, p, (k % COLUMNS) as f64 * PANEL_W, (k / COLUMNS) as f64 * PANEL_H);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn emit_plot(result: &ExperimentResult, out: &Path) -> Result<()> {
    let svg = render_svg(result)?;
    std::fs::write(out, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::results::{ResultRow, STATUS_OK};

    fn row(regime: Regime, n_s: usize, replication: usize, value: f64) -> ResultRow {
        ResultRow {
            family: Family::Diffusion,
            mode: Mode::Conditional,
            regime,
            n_s,
            replication,
            seed: replication as u64,
            metric: "tv".into(),
            value,
            wall_time_s: 0.0,
            status: STATUS_OK.into(),
        }
    }

    #[test]
    fn empty_result_is_an_error() {
        assert!(render_svg(&ExperimentResult::default()).is_err());
    }

    #[test]
    fn band_spans_replications() {
        let res = ExperimentResult {
            rows: vec![
                row(Regime::Transfer, 100, 0, 0.2),
                row(Regime::Transfer, 100, 1, 0.4),
                row(Regime::Transfer, 1000, 0, 0.1),
                row(Regime::NonTransfer, 0, 0, 0.5),
            ],
        };
        let s = summarize(&res);
        assert_eq!(s[0].transfer[0], (100, 0.30000000000000004, 0.2, 0.4));
        assert_eq!(s[0].baseline, Some(0.5));
        let svg = render_svg(&res).unwrap();
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains("class=\"band\""));
    }
}
