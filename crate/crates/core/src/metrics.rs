//! Answer scoring: normalization, exact-match accuracy, ANLS and keyframe hit rate.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub const DEFAULT_ANLS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("cannot aggregate an empty score set")]
    EmptyScoreSet,
}

/// Lowercase, trim, collapse whitespace runs and strip trailing periods.
pub fn normalize_answer(text: &str) -> String {
    let collapsed = text
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    collapsed
        .trim_end_matches(|c: char| c == '.' || c.is_whitespace())
        .to_string()
}

pub fn exact_accuracy(pred: &str, golds: &[String]) -> u8 {
    let p = normalize_answer(pred);
    u8::from(golds.iter().any(|g| normalize_answer(g) == p))
}

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized similarity `1 - lev / max_len` between two already-normalized
/// strings, using `dist` for the edit distance.
pub fn similarity_with(a: &str, b: &str, dist: impl Fn(&str, &str) -> usize) -> f64 {
    let max_len = a.chars().count().max(b.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - dist(a, b) as f64 / max_len as f64
}

/// ANLS with a pluggable edit distance. Exposed so the score can be checked
/// against independent distance implementations.
pub fn anls_with(
    pred: &str,
    golds: &[String],
    threshold: f64,
    dist: impl Fn(&str, &str) -> usize,
) -> f64 {
    let p = normalize_answer(pred);
    let best = golds
        .iter()
        .map(|g| similarity_with(&p, &normalize_answer(g), &dist))
        .fold(0.0_f64, f64::max);
    if best >= threshold {
        best
    } else {
        0.0
    }
}

pub fn anls(pred: &str, golds: &[String], threshold: f64) -> f64 {
    anls_with(pred, golds, threshold, levenshtein)
}

/// True iff any selected id is among the annotated keyframes.
pub fn hit(selected: &[usize], annotated: &BTreeSet<usize>) -> bool {
    selected.iter().any(|id| annotated.contains(id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub accuracy: u8,
    pub anls: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hit: Option<bool>,
}

pub fn score_sample(
    sample_id: &str,
    pred: &str,
    golds: &[String],
    selected: &[usize],
    annotated: Option<&BTreeSet<usize>>,
    threshold: f64,
) -> SampleScore {
    let hit = match annotated {
        Some(a) if !a.is_empty() && !selected.is_empty() => Some(hit(selected, a)),
        _ => None,
    };
    SampleScore {
        sample_id: sample_id.into(),
        accuracy: exact_accuracy(pred, golds),
        anls: anls(pred, golds, threshold),
        hit,
    }
}

/// Aggregate scores, all rates on a 0–100 scale at full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split_tag: String,
    pub n: usize,
    pub accuracy: f64,
    pub anls: f64,
    pub n_hit: usize,
    pub hit_rate: Option<f64>,
}

pub fn aggregate(split_tag: &str, scores: &[SampleScore]) -> Result<MetricReport, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyScoreSet);
    }
    let n = scores.len() as f64;
    let acc = scores.iter().map(|s| f64::from(s.accuracy)).sum::<f64>() / n;
    let anls = scores.iter().map(|s| s.anls).sum::<f64>() / n;
    let hits: Vec<bool> = scores.iter().filter_map(|s| s.hit).collect();
    let hit_rate = (!hits.is_empty())
        .then(|| 100.0 * hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64);
    Ok(MetricReport {
        split_tag: split_tag.into(),
        n: scores.len(),
        accuracy: 100.0 * acc,
        anls: 100.0 * anls,
        n_hit: hits.len(),
        hit_rate,
    })
}

/// Two-decimal display used by every human-readable table.
pub fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}
