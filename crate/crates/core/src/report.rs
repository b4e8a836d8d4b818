//! Score logs, text/CSV tables and small SVG charts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::{fmt2, MetricReport, SampleScore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ScoreLine {
    Sample(SampleScore),
    Summary(MetricReport),
}

pub fn score_log(scores: &[SampleScore], summary: &MetricReport) -> String {
    let mut out = String::new();
    for s in scores {
        out.push_str(&serde_json::to_string(&ScoreLine::Sample(s.clone())).expect("serializes"));
        out.push('\n');
    }
    out.push_str(&serde_json::to_string(&ScoreLine::Summary(summary.clone())).expect("serializes"));
    out.push('\n');
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLog {
    pub scores: Vec<SampleScore>,
    pub summary: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{path} line {line_no}: {reason}")]
pub struct SchemaError {
    pub path: String,
    pub line_no: usize,
    pub reason: String,
}

pub fn read_score_log(path: &Path) -> Result<ScoreLog, SchemaError> {
    let text = fs::read_to_string(path).map_err(|e| SchemaError {
        path: path.display().to_string(),
        line_no: 0,
        reason: e.to_string(),
    })?;
    let mut log = ScoreLog {
        scores: Vec::new(),
        summary: None,
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ScoreLine>(line) {
            Ok(ScoreLine::Sample(s)) => log.scores.push(s),
            Ok(ScoreLine::Summary(m)) => log.summary = Some(m),
            Err(e) => {
                return Err(SchemaError {
                    path: path.display().to_string(),
                    line_no: i + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(log)
}

/// Aligned ACC./ANLS table, one row per report.
pub fn summary_table(rows: &[(String, MetricReport)]) -> String {
    let mut out = format!(
        "{:<20} {:<12} {:>6} {:>8} {:>8} {:>9}\n",
        "system", "split", "n", "ACC.", "ANLS", "hit rate"
    );
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<20} {:<12} {:>6} {:>8} {:>8} {:>9}",
            name,
            r.split_tag,
            r.n,
            fmt2(r.accuracy),
            fmt2(r.anls),
            r.hit_rate.map(fmt2).unwrap_or_default()
        );
    }
    out
}

pub fn summary_csv(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::from("system,split,n,accuracy,anls,hit_rate\n");
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            name,
            r.split_tag,
            r.n,
            r.accuracy,
            r.anls,
            r.hit_rate.map(|h| h.to_string()).unwrap_or_default()
        );
    }
    out
}

/// Systems side by side with the change of the last system relative to the first.
pub fn comparison_table(rows: &[(String, MetricReport)]) -> String {
    let mut out = format!("{:<20} {:>6} {:>8} {:>8}\n", "system", "n", "ACC.", "ANLS");
    for (name, r) in rows {
        let _ = writeln!(out, "{:<20} {:>6} {:>8} {:>8}", name, r.n, fmt2(r.accuracy), fmt2(r.anls));
    }
    if let (Some((_, first)), Some((_, last))) = (rows.first(), rows.last()) {
        if rows.len() >= 2 {
            let _ = writeln!(
                out,
                "{:<20} {:>6} {:>8} {:>8}",
                "Δ",
                "",
                format!("{:+.2}", last.accuracy - first.accuracy),
                format!("{:+.2}", last.anls - first.anls)
            );
        }
    }
    out
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948"];

/// Grouped bar chart: one group per category, one bar per series. Values are
/// plotted on a 0–100 axis.
pub fn svg_bars(title: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let (w, h, pad) = (640.0, 360.0, 48.0);
    let plot_h = h - 2.0 * pad;
    let group_w = (w - 2.0 * pad) / categories.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(out, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>", w / 2.0, esc(title));
    let _ = writeln!(
        out,
        "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        h - pad,
        w - pad,
        h - pad
    );
    for (ci, cat) in categories.iter().enumerate() {
        let gx = pad + ci as f64 * group_w + group_w * 0.1;
        for (si, (_, values)) in series.iter().enumerate() {
            let v = values.get(ci).copied().unwrap_or(0.0).clamp(0.0, 100.0);
            let bh = plot_h * v / 100.0;
            let _ = writeln!(
                out,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
                gx + si as f64 * bar_w,
                h - pad - bh,
                bar_w,
                bh,
                PALETTE[si % PALETTE.len()]
            );
        }
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            gx + group_w * 0.4,
            h - pad + 16.0,
            esc(cat)
        );
    }
    for (si, (name, _)) in series.iter().enumerate() {
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{}\">{}</text>",
            w - pad - 120.0,
            pad + 14.0 * si as f64,
            PALETTE[si % PALETTE.len()],
            esc(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Line chart of several series sharing an x axis.
pub fn svg_lines(title: &str, xs: &[f64], series: &[(String, Vec<f64>)]) -> String {
    let (w, h, pad) = (640.0, 360.0, 48.0);
    let x_max = xs.iter().cloned().fold(1.0, f64::max);
    let y_max = series
        .iter()
        .flat_map(|(_, v)| v.iter().cloned())
        .fold(1.0, f64::max);
    let px = |x: f64| pad + (w - 2.0 * pad) * x / x_max;
    let py = |y: f64| h - pad - (h - 2.0 * pad) * y / y_max;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(out, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>", w / 2.0, esc(title));
    let _ = writeln!(
        out,
        "<path d=\"M{pad} {pad} L{pad} {} L{} {}\" fill=\"none\" stroke=\"black\"/>",
        h - pad,
        w - pad,
        h - pad
    );
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\">{:.2}</text>", 4.0, pad, y_max);
    for (si, (name, ys)) in series.iter().enumerate() {
        let mut d = String::new();
        for (i, (x, y)) in xs.iter().zip(ys).enumerate() {
            let _ = write!(d, "{}{:.1} {:.1} ", if i == 0 { "M" } else { "L" }, px(*x), py(*y));
        }
        let color = PALETTE[si % PALETTE.len()];
        let _ = writeln!(out, "<path d=\"{}\" fill=\"none\" stroke=\"{color}\"/>", d.trim_end());
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{}</text>",
            w - pad - 120.0,
            pad + 14.0 * si as f64,
            esc(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(acc: f64, anls: f64) -> MetricReport {
        MetricReport {
            split_tag: "val".into(),
            n: 10,
            accuracy: acc,
            anls,
            n_hit: 0,
            hit_rate: None,
        }
    }

    #[test]
    fn score_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.jsonl");
        let scores = vec![SampleScore {
            sample_id: "a".into(),
            accuracy: 1,
            anls: 1.0,
            hit: Some(true),
        }];
        fs::write(&p, score_log(&scores, &rep(100.0, 100.0))).unwrap();
        let log = read_score_log(&p).unwrap();
        assert_eq!(log.scores, scores);
        assert_eq!(log.summary, Some(rep(100.0, 100.0)));
    }

    #[test]
    fn malformed_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.jsonl");
        fs::write(&p, "{\"type\":\"sample\",\"sample_id\":\"a\",\"accuracy\":1,\"anls\":1.0}\nnot json\n").unwrap();
        let err = read_score_log(&p).unwrap_err();
        assert_eq!(err.line_no, 2);
    }

    #[test]
    fn comparison_has_delta() {
        let t = comparison_table(&[("base".into(), rep(60.0, 70.0)), ("agent".into(), rep(71.59, 78.69))]);
        let last = t.lines().last().unwrap();
        assert!(last.starts_with('Δ'));
        assert!(last.contains("+11.59") && last.contains("+8.69"));
    }

    #[test]
    fn tables_use_two_decimals() {
        let t = summary_table(&[("x".into(), rep(50.0, 90.0))]);
        assert!(t.contains("ACC.") && t.contains("ANLS"));
        assert!(t.contains("50.00") && t.contains("90.00"));
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let s = svg_bars("t", &["Set_s".into(), "Set_u".into()], &[("a".into(), vec![80.0, 40.0])]);
        assert_eq!(s.matches("<rect").count(), 2);
        let l = svg_lines("c", &[0.0, 1.0, 2.0], &[("r".into(), vec![0.1, 0.5, 0.9])]);
        assert!(l.contains("<path d=\"M"));
        assert!(l.ends_with("</svg>\n"));
    }
}
