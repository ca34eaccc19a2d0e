//! Deterministic SVG line charts and the CSV files behind them.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, RftfError};
use crate::finetune::{IterationMetrics, FINETUNE_CSV_HEADER};
use crate::value::{ValueEpochMetrics, VALUE_CSV_HEADER};

pub const SMOOTHING_WINDOW: usize = 5;
pub const VALUE_CURVE_CSV_HEADER: &str = "step,value,smoothed";

/// Trailing moving average; the first `window - 1` entries average what is
/// available.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

pub fn is_non_decreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] >= w[0])
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// A fixed-size line chart. Coordinates are printed with 2 decimals so the
/// output is byte-stable for identical input.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (640.0, 400.0, 60.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{:.2}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n\
         <line x1=\"{m}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{:.2}\" stroke=\"black\"/>\n\
         <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{}</text>\n",
        w / 2.0,
        escape(title),
        h - m,
        w - m,
        h - m,
        h - m,
        w / 2.0,
        h - 16.0,
        escape(x_label),
        h / 2.0,
        h / 2.0,
        escape(y_label),
    );
    for (v, y) in [(y0, h - m), (y1, m)] {
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"end\">{v:.4}</text>\n",
            m - 4.0,
            y + 3.0
        ));
    }
    for (v, x) in [(x0, m), (x1, w - m)] {
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"middle\">{v:.4}</text>\n",
            h - m + 14.0
        ));
    }
    for (i, (label, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            coords.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            w - m - 150.0,
            m + 14.0 * (i as f64 + 1.0),
            escape(label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone, Default)]
pub struct PlotInputs {
    pub value_metrics: Vec<ValueEpochMetrics>,
    /// Labelled fine-tuning runs.
    pub finetune_metrics: Vec<(String, Vec<IterationMetrics>)>,
    /// Raw per-state values of one episode.
    pub value_curve: Option<Vec<f64>>,
}

pub fn value_curve_csv(values: &[f64]) -> String {
    let s = smooth(values, SMOOTHING_WINDOW);
    let mut out = format!("{VALUE_CURVE_CSV_HEADER}\n");
    for (i, (v, m)) in values.iter().zip(&s).enumerate() {
        out.push_str(&format!("{i},{v},{m}\n"));
    }
    out
}

fn write(path: PathBuf, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| RftfError::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes every chart the inputs allow into `dir`; returns the files written.
pub fn emit_plots(dir: &Path, inputs: &PlotInputs) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| RftfError::io(dir, e))?;
    let mut written = Vec::new();
    if !inputs.value_metrics.is_empty() {
        let loss = vec![(
            "mean pair loss".to_string(),
            inputs.value_metrics.iter().map(|m| (m.epoch as f64, m.mean_loss)).collect(),
        )];
        write(dir.join("value_loss.svg"), &line_chart("Value model loss", "epoch", "loss", &loss), &mut written)?;
        let acc = vec![(
            "held-out pairwise accuracy".to_string(),
            inputs
                .value_metrics
                .iter()
                .map(|m| (m.epoch as f64, m.holdout_pairwise_accuracy))
                .collect(),
        )];
        write(dir.join("value_accuracy.svg"), &line_chart("Value model ordering accuracy", "epoch", "accuracy", &acc), &mut written)?;
    }
    if !inputs.finetune_metrics.is_empty() {
        let series: Vec<(String, Vec<(f64, f64)>)> = inputs
            .finetune_metrics
            .iter()
            .map(|(label, ms)| (label.clone(), ms.iter().map(|m| (m.episodes as f64, m.success_rate)).collect()))
            .collect();
        write(dir.join("finetune_success.svg"), &line_chart("Rollout success during fine-tuning", "episodes", "success rate", &series), &mut written)?;
    }
    if let Some(values) = &inputs.value_curve {
        let smoothed = smooth(values, SMOOTHING_WINDOW);
        let series = vec![
            ("value".to_string(), values.iter().enumerate().map(|(i, v)| (i as f64, *v)).collect()),
            (format!("smoothed (window {SMOOTHING_WINDOW})"), smoothed.iter().enumerate().map(|(i, v)| (i as f64, *v)).collect()),
        ];
        write(dir.join("value_curve.svg"), &line_chart("State values along an episode", "step", "value", &series), &mut written)?;
        write(dir.join("value_curve.csv"), &value_curve_csv(values), &mut written)?;
    }
    Ok(written)
}

fn rows<'a>(text: &'a str, header: &str, what: &str) -> Result<Vec<Vec<&'a str>>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == header => {}
        other => {
            return Err(RftfError::Format(format!(
                "{what} CSV header {:?} does not match `{header}`",
                other.unwrap_or("")
            )))
        }
    }
    let width = header.split(',').count();
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let cells: Vec<&str> = l.split(',').collect();
            if cells.len() == width {
                Ok(cells)
            } else {
                Err(RftfError::Format(format!("{what} CSV row {} has {} cells, expected {width}", i + 1, cells.len())))
            }
        })
        .collect()
}

fn num<T: std::str::FromStr>(cell: &str, what: &str) -> Result<T> {
    cell.trim()
        .parse()
        .map_err(|_| RftfError::Format(format!("{what} CSV: cannot parse `{cell}`")))
}

pub fn parse_finetune_csv(text: &str) -> Result<Vec<IterationMetrics>> {
    let w = "fine-tuning metrics";
    rows(text, FINETUNE_CSV_HEADER, w)?
        .into_iter()
        .map(|c| {
            Ok(IterationMetrics {
                iter: num(c[0], w)?,
                episodes: num(c[1], w)?,
                success_rate: num(c[2], w)?,
                mean_ep_len: num(c[3], w)?,
                mean_kl: num(c[4], w)?,
                clip_frac: num(c[5], w)?,
                beta: num(c[6], w)?,
                mean_advantage: num(c[7], w)?,
            })
        })
        .collect()
}

pub fn parse_value_csv(text: &str) -> Result<Vec<ValueEpochMetrics>> {
    let w = "value metrics";
    rows(text, VALUE_CSV_HEADER, w)?
        .into_iter()
        .map(|c| {
            Ok(ValueEpochMetrics {
                epoch: num(c[0], w)?,
                mean_loss: num(c[1], w)?,
                holdout_pairwise_accuracy: num(c[2], w)?,
            })
        })
        .collect()
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| RftfError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_examples() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0], 5), vec![1.0, 2.0, 3.0]);
        let s = smooth(&[0.0, 0.0, 0.0, 0.0, 0.0, 5.0, 0.0], 5);
        assert_eq!(s[5], 1.0);
        assert_eq!(s[6], 1.0);
        assert!(smooth(&[], 5).is_empty());
        assert!(is_non_decreasing(&smooth(&[0.0, 0.2, 0.1, 0.4, 0.5, 0.45, 0.9], 5)));
        assert!(!is_non_decreasing(&[0.0, 1.0, 0.5]));
    }

    #[test]
    fn charts_are_byte_stable() {
        let series = vec![("a".to_string(), vec![(0.0, 1.0), (1.0, 0.5), (2.0, f64::NAN)])];
        let a = line_chart("t <1>", "x", "y", &series);
        assert_eq!(a, line_chart("t <1>", "x", "y", &series));
        assert!(a.contains("t &lt;1&gt;"));
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
        assert!(line_chart("empty", "x", "y", &[]).contains("</svg>"));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let ms = vec![IterationMetrics {
            iter: 1,
            episodes: 16,
            success_rate: 0.5,
            mean_ep_len: 40.25,
            mean_kl: 0.001,
            clip_frac: 0.0,
            beta: 0.1,
            mean_advantage: -0.125,
        }];
        let text = crate::finetune::metrics_csv(&ms);
        assert_eq!(parse_finetune_csv(&text).unwrap(), ms);
        assert!(matches!(parse_finetune_csv("iter,episodes\n1,2\n"), Err(RftfError::Format(_))));
        let v = "epoch,mean_loss,holdout_pairwise_accuracy\n1,0.3,0.95\n";
        assert_eq!(parse_value_csv(v).unwrap()[0].holdout_pairwise_accuracy, 0.95);
        assert!(parse_value_csv("epoch,mean_loss,holdout_pairwise_accuracy\n1,x,0.9\n").is_err());
    }

    #[test]
    fn plots_written_and_missing_input_reported() {
        let dir = tempfile::tempdir().unwrap();
        let inputs = PlotInputs {
            value_metrics: vec![ValueEpochMetrics { epoch: 1, mean_loss: 0.4, holdout_pairwise_accuracy: 0.93 }],
            finetune_metrics: vec![],
            value_curve: Some(vec![0.0, 0.1, 0.3, 0.2, 0.6]),
        };
        let files = emit_plots(dir.path(), &inputs).unwrap();
        assert_eq!(files.len(), 4);
        let csv = fs::read_to_string(dir.path().join("value_curve.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), VALUE_CURVE_CSV_HEADER);
        let first = fs::read(dir.path().join("value_curve.svg")).unwrap();
        emit_plots(dir.path(), &inputs).unwrap();
        assert_eq!(first, fs::read(dir.path().join("value_curve.svg")).unwrap());
        let missing = dir.path().join("nope.csv");
        let err = read_to_string(&missing).unwrap_err();
        assert!(err.to_string().contains("nope.csv"), "{err}");
    }
}
