//! SVG figures with CSV backings.
//!
//! The CSV files are the contract; the SVGs are a convenience rendering of
//! the same numbers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{ExperimentError, Result};
use crate::deepfeatures::{ProbeRow, RankedFeature};
use crate::trainers::TrainingLog;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;
const COLORS: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn header(title: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    // AUC axis: 0 to 1 with gridlines every 0.25.
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
            W - RIGHT,
            LEFT - 6.0,
            y + 4.0
        );
    }
    s
}

fn y_of(v: f64) -> f64 {
    TOP + (1.0 - v.clamp(0.0, 1.0)) * (H - TOP - BOTTOM)
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let x = LEFT + 10.0 + 130.0 * i as f64;
        let y = H - 18.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{y}">{}</text>"#,
            y - 10.0,
            COLORS[i % COLORS.len()],
            x + 16.0,
            escape(n)
        );
    }
}

/// Line chart of AUC series over a shared integer x axis.
fn line_chart(
    title: &str,
    x_label: &str,
    xs: &[f64],
    series: &[(&str, Vec<Option<f64>>)],
) -> String {
    let mut s = header(title, "AUC");
    let (x0, x1) = (
        xs.first().copied().unwrap_or(0.0),
        xs.last().copied().unwrap_or(1.0),
    );
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let x_of = |x: f64| LEFT + (x - x0) / span * (W - LEFT - RIGHT);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 40.0,
        escape(x_label)
    );
    for (i, (_, ys)) in series.iter().enumerate() {
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .filter_map(|(x, y)| y.map(|y| format!("{:.1},{:.1}", x_of(*x), y_of(y))))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
                COLORS[i % COLORS.len()],
                pts.join(" ")
            );
        }
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| *n).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

/// Grouped bar chart with one group per label.
fn bar_chart(title: &str, labels: &[String], series: &[(&str, Vec<f64>)]) -> String {
    let mut s = header(title, "AUC");
    let groups = labels.len().max(1) as f64;
    let slot = (W - LEFT - RIGHT) / groups;
    let bar = slot * 0.8 / series.len().max(1) as f64;
    for (g, label) in labels.iter().enumerate() {
        let gx = LEFT + slot * g as f64 + slot * 0.1;
        for (i, (name, vals)) in series.iter().enumerate() {
            let v = vals[g];
            let y = y_of(v);
            let _ = writeln!(
                s,
                r#"<rect class="bar {}" x="{:.1}" y="{y:.1}" width="{bar:.1}" height="{:.1}" fill="{}"/>"#,
                escape(name),
                gx + bar * i as f64,
                y_of(0.0) - y,
                COLORS[i % COLORS.len()]
            );
        }
        let cx = gx + slot * 0.4;
        let ly = y_of(0.0) + 14.0;
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{ly:.1}" text-anchor="end" transform="rotate(-40 {cx:.1} {ly:.1})">{}</text>"#,
            escape(label)
        );
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| *n).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean_of(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Fold-averaged curve: `(epoch, mean train AUC, mean test AUC)`, each mean
/// over the folds that logged a value for that epoch.
pub fn average_curves(logs: &[TrainingLog]) -> Vec<(usize, Option<f64>, Option<f64>)> {
    let epochs = logs.iter().map(|l| l.records.len()).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let recs: Vec<_> = logs.iter().filter_map(|l| l.records.get(e)).collect();
            (
                recs[0].epoch,
                mean_of(recs.iter().map(|r| r.train_auc)),
                mean_of(recs.iter().map(|r| r.test_auc)),
            )
        })
        .collect()
}

/// Inputs for [`emit_figures`]. `None` skips a figure.
#[derive(Debug, Default, Clone, Copy)]
pub struct FigureInputs<'a> {
    pub logs: Option<&'a [TrainingLog]>,
    pub probe: Option<&'a [ProbeRow]>,
    pub ranking: Option<&'a [RankedFeature]>,
}

/// Writes each requested figure as `<stem>.svg` plus `<stem>.csv`. All inputs
/// are checked before anything is written.
pub fn emit_figures(
    inputs: FigureInputs,
    out_dir: &Path,
    stem_prefix: &str,
) -> Result<Vec<PathBuf>> {
    let mut problems = Vec::new();
    if inputs
        .logs
        .is_some_and(|l| l.is_empty() || l.iter().all(|x| x.records.is_empty()))
    {
        problems.push("training logs are empty".to_string());
    }
    if inputs.probe.is_some_and(<[ProbeRow]>::is_empty) {
        problems.push("layer probe table is empty".to_string());
    }
    if inputs.ranking.is_some_and(<[RankedFeature]>::is_empty) {
        problems.push("feature ranking is empty".to_string());
    }
    if inputs.logs.is_none() && inputs.probe.is_none() && inputs.ranking.is_none() {
        problems.push("no figure inputs given".to_string());
    }
    if !problems.is_empty() {
        return Err(ExperimentError::Data(problems.join("; ")));
    }
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    let path = |name: &str| out_dir.join(format!("{stem_prefix}{name}"));
    if let Some(logs) = inputs.logs {
        let curve = average_curves(logs);
        let mut csv = String::from("epoch,train_auc,test_auc\n");
        for (e, tr, te) in &curve {
            let _ = writeln!(csv, "{e},{},{}", opt_cell(*tr), opt_cell(*te));
        }
        let xs: Vec<f64> = curve.iter().map(|c| c.0 as f64).collect();
        let svg = line_chart(
            "AUC by epoch (fold mean)",
            "epoch",
            &xs,
            &[
                ("training", curve.iter().map(|c| c.1).collect()),
                ("test", curve.iter().map(|c| c.2).collect()),
            ],
        );
        files.push((path("auc_curves.csv"), csv));
        files.push((path("auc_curves.svg"), svg));
    }
    if let Some(probe) = inputs.probe {
        let csv = crate::deepfeatures::probe_table_csv(probe);
        let labels: Vec<String> = probe.iter().map(|r| r.tap.clone()).collect();
        let svg = bar_chart(
            "AUC of features from each layer",
            &labels,
            &[
                ("training", probe.iter().map(|r| r.training_auc).collect()),
                ("test", probe.iter().map(|r| r.test_auc).collect()),
            ],
        );
        files.push((path("layer_auc.csv"), csv));
        files.push((path("layer_auc.svg"), svg));
    }
    if let Some(ranking) = inputs.ranking {
        let csv = crate::deepfeatures::ranking_csv(ranking);
        let xs: Vec<f64> = ranking.iter().map(|r| r.rank as f64).collect();
        let svg = line_chart(
            "Single-feature AUC by rank (not cross-validated)",
            "rank",
            &xs,
            &[("AUC", ranking.iter().map(|r| Some(r.auc)).collect())],
        );
        files.push((path("feature_ranking.csv"), csv));
        files.push((path("feature_ranking.svg"), svg));
    }
    fs::create_dir_all(out_dir).map_err(|source| ExperimentError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    for (p, text) in &files {
        fs::write(p, text).map_err(|source| ExperimentError::Io {
            path: p.clone(),
            source,
        })?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainers::EpochRecord;

    #[test]
    fn empty_ranking_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_figures(
            FigureInputs {
                ranking: Some(&[]),
                ..FigureInputs::default()
            },
            dir.path(),
            "",
        );
        assert!(err.is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn curves_average_over_folds() {
        let rec = |e, tr, te| EpochRecord {
            epoch: e,
            train_loss: 0.0,
            train_auc: tr,
            test_auc: te,
        };
        let logs = vec![
            TrainingLog {
                records: vec![rec(1, Some(0.5), None), rec(2, Some(0.7), Some(0.6))],
            },
            TrainingLog {
                records: vec![rec(1, Some(0.7), None), rec(2, Some(0.9), Some(0.8))],
            },
        ];
        let c = average_curves(&logs);
        assert_eq!(c[0], (1, Some(0.6), None));
        assert_eq!(c[1].0, 2);
        assert!((c[1].2.unwrap() - 0.7).abs() < 1e-12);
    }
}
