//! Report files: per-fold metrics CSV, aggregate JSON and SVG figures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::metrics::{mean_ci, row_normalize};
use super::pipeline::FoldResult;

pub const METRICS_HEADER: &str = "run,fold,horizon_s,task,auc,precision,recall,f1_macro";

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "NaN".into()
    }
}

pub fn metrics_csv(results: &[FoldResult]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in results {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.run,
            r.fold,
            r.horizon_s,
            r.task.as_str(),
            num(r.auc),
            num(r.precision),
            num(r.recall),
            num(r.f1_macro)
        );
    }
    s
}

pub fn write_metrics_csv(results: &[FoldResult], path: &Path) -> std::io::Result<()> {
    std::fs::write(path, metrics_csv(results))
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

impl MetricSummary {
    /// Over the finite values only.
    pub fn of(values: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
        let (mean, ci95) = mean_ci(&v);
        Self {
            mean,
            ci95,
            n: v.len(),
        }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct AggregateRow {
    pub model: String,
    pub task: String,
    pub horizon_s: f64,
    pub auc: MetricSummary,
    pub precision: MetricSummary,
    pub recall: MetricSummary,
    pub f1_macro: MetricSummary,
    /// Row-normalized confusion matrix summed over folds.
    pub confusion: Vec<Vec<f64>>,
    pub per_subject_auc: BTreeMap<String, MetricSummary>,
}

/// Groups fold results by (model, task, horizon).
pub fn aggregate(results: &[FoldResult]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, String, u64), Vec<&FoldResult>> = BTreeMap::new();
    for r in results {
        groups
            .entry((
                r.model.clone(),
                r.task.as_str().to_string(),
                r.horizon_s.to_bits(),
            ))
            .or_default()
            .push(r);
    }
    let mut rows: Vec<AggregateRow> = groups
        .into_iter()
        .map(|((model, task, h), rs)| {
            let classes = rs[0].confusion.len();
            let mut conf = vec![vec![0u64; classes]; classes];
            for r in &rs {
                for (i, row) in r.confusion.iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        conf[i][j] += v;
                    }
                }
            }
            let mut subj: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in &rs {
                for (s, a) in &r.per_subject_auc {
                    subj.entry(s.clone()).or_default().push(*a);
                }
            }
            AggregateRow {
                model,
                task,
                horizon_s: f64::from_bits(h),
                auc: MetricSummary::of(rs.iter().map(|r| r.auc)),
                precision: MetricSummary::of(rs.iter().map(|r| r.precision)),
                recall: MetricSummary::of(rs.iter().map(|r| r.recall)),
                f1_macro: MetricSummary::of(rs.iter().map(|r| r.f1_macro)),
                confusion: row_normalize(&conf),
                per_subject_auc: subj
                    .into_iter()
                    .map(|(k, v)| (k, MetricSummary::of(v.into_iter())))
                    .collect(),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.model.as_str(), a.task.as_str())
            .cmp(&(b.model.as_str(), b.task.as_str()))
            .then(a.horizon_s.total_cmp(&b.horizon_s))
    });
    rows
}

#[derive(Debug, Serialize)]
pub struct Summary<'a> {
    pub provenance: &'a str,
    pub config: &'a BTreeMap<String, String>,
    pub aggregates: &'a [AggregateRow],
}

pub fn write_summary_json(
    rows: &[AggregateRow],
    config: &BTreeMap<String, String>,
    provenance: &str,
    path: &Path,
) -> std::io::Result<()> {
    let s = Summary {
        provenance,
        config,
        aggregates: rows,
    };
    let text = serde_json::to_string_pretty(&s).map_err(std::io::Error::other)?;
    std::fs::write(path, text + "\n")
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const M: f64 = 56.0;

/// Mean AUC with CI band against horizon, one line per model.
pub fn auc_vs_horizon_svg(rows: &[AggregateRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let hmax = rows.iter().map(|r| r.horizon_s).fold(1.0_f64, f64::max);
    let px = |h: f64| M + (W - 2.0 * M) * h / hmax;
    let py = |a: f64| H - M - (H - 2.0 * M) * a.clamp(0.0, 1.0);
    let _ = writeln!(
        s,
        r##"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="#000"/>"##,
        H - M,
        W - M,
        H - M
    );
    let _ = writeln!(
        s,
        r##"<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="#000"/>"##,
        H - M
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let y = py(tick);
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" text-anchor="end">{tick:.2}</text>"##,
            M - 6.0,
            y + 4.0
        );
        let _ = writeln!(
            s,
            r##"<line x1="{M}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##,
            W - M
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">horizon (s)</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">AUC-ROC</text>"#,
        H / 2.0,
        H / 2.0
    );
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let mut models: Vec<(&str, &str)> = rows
        .iter()
        .map(|r| (r.model.as_str(), r.task.as_str()))
        .collect();
    models.dedup();
    for (mi, (m, t)) in models.iter().enumerate() {
        let c = colors[mi % colors.len()];
        let pts: Vec<&AggregateRow> = rows
            .iter()
            .filter(|r| r.model == *m && r.task == *t && r.auc.mean.is_finite())
            .collect();
        let line: Vec<String> = pts
            .iter()
            .map(|r| format!("{:.1},{:.1}", px(r.horizon_s), py(r.auc.mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#,
            line.join(" ")
        );
        for r in &pts {
            let (x, lo, hi) = (
                px(r.horizon_s),
                py(r.auc.mean - r.auc.ci95),
                py(r.auc.mean + r.auc.ci95),
            );
            let _ = writeln!(
                s,
                r#"<line x1="{x:.1}" y1="{lo:.1}" x2="{x:.1}" y2="{hi:.1}" stroke="{c}"/>"#
            );
            let _ = writeln!(
                s,
                r#"<circle cx="{x:.1}" cy="{:.1}" r="3" fill="{c}"/>"#,
                py(r.auc.mean)
            );
            let _ = writeln!(
                s,
                r#"<text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#,
                H - M + 16.0,
                r.horizon_s
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{c}">{} ({})</text>"#,
            W - M - 150.0,
            M + 16.0 * mi as f64,
            esc(m),
            esc(t)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Heatmap of a row-normalized confusion matrix.
pub fn confusion_svg(matrix: &[Vec<f64>], class_names: &[&str]) -> String {
    let n = matrix.len().max(1);
    let cell = 64.0;
    let off = 110.0;
    let size = off + cell * n as f64 + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, row) in matrix.iter().enumerate() {
        let name = class_names.get(i).copied().unwrap_or("?");
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            off - 6.0,
            off + cell * (i as f64 + 0.5) + 4.0,
            esc(name)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            off + cell * (i as f64 + 0.5),
            off - 8.0,
            esc(name)
        );
        for (j, &v) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
            let (x, y) = (off + cell * j as f64, off + cell * i as f64);
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="white"/>"#
            );
            let fg = if v > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{fg}">{v:.2}</text>"#,
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="16" text-anchor="middle">predicted</text>"#,
        off + cell * n as f64 / 2.0
    );
    s.push_str("</svg>\n");
    s
}

/// Acceleration traces of one window with a CAM heat strip underneath.
pub fn cam_svg(traces: &[Vec<f64>], cam: &[f64], title: &str) -> String {
    let n = cam.len().max(1);
    let plot_h = 240.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{}" font-family="sans-serif" font-size="12">"#,
        plot_h + 90.0
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{M}" y="18">{}</text>"#, esc(title));
    let dx = (W - 2.0 * M) / n as f64;
    for (i, &v) in cam.iter().enumerate() {
        let a = v.clamp(0.0, 1.0);
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="28" width="{:.2}" height="{plot_h}" fill="rgb(255,0,0)" fill-opacity="{:.3}"/>"#,
            M + dx * i as f64,
            dx + 0.05,
            0.45 * a
        );
    }
    let lo = traces
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let hi = traces
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let colors = ["#1f77b4", "#2ca02c", "#9467bd"];
    for (ci, tr) in traces.iter().enumerate() {
        let pts: Vec<String> = tr
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                format!(
                    "{:.1},{:.1}",
                    M + dx * (i as f64 + 0.5),
                    28.0 + plot_h * (1.0 - (v - lo) / span)
                )
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.2" points="{}"/>"#,
            colors[ci % 3],
            pts.join(" ")
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">sample (30 Hz)</text>"#,
        W / 2.0,
        plot_h + 60.0
    );
    s.push_str("</svg>\n");
    s
}
