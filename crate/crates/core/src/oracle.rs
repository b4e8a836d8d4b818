//! Frame-wise oracle analysis.
//!
//! Every presented frame is queried on its own. A sample counts as solved by
//! the oracle when any single frame yields the right answer; those samples form
//! the frame-solvable set and their successful frames act as pseudo keyframes.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::data::Sample;
use crate::engine::{run_direct, EngineConfig, EngineError, TrajectoryRecord};
use crate::metrics::{exact_accuracy, fmt2, hit, SampleScore};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OracleError {
    #[error("sample {0} is not frame-solvable")]
    NotFrameSolvable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramewiseResult {
    pub sample_id: String,
    pub vector: Vec<bool>,
    pub any_correct: bool,
    /// Frames whose backend call failed; they count as incorrect.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_frames: Vec<usize>,
}

impl FramewiseResult {
    pub fn new(sample_id: impl Into<String>, vector: Vec<bool>) -> Self {
        FramewiseResult {
            sample_id: sample_id.into(),
            any_correct: vector.iter().any(|&c| c),
            vector,
            failed_frames: Vec::new(),
        }
    }
}

/// Asks the backend about each frame alone and judges every answer by exact match.
pub fn framewise_eval<B: Backend + ?Sized>(
    sample: &Sample,
    backend: &B,
    config: &EngineConfig,
) -> Result<FramewiseResult, EngineError> {
    config.validate()?;
    let mut vector = Vec::with_capacity(sample.frames.len());
    let mut failed = Vec::new();
    for frame in 0..sample.frames.len() {
        let correct = match run_direct(sample, &[frame], backend, config) {
            Ok(Some(turn)) => {
                exact_accuracy(turn.action.answer_text().unwrap_or_default(), &sample.gold_answers) == 1
            }
            Ok(None) => false,
            Err(EngineError::Backend(e)) => {
                log::warn!("sample {} frame {frame}: {e}", sample.sample_id);
                failed.push(frame);
                false
            }
            Err(e) => return Err(e),
        };
        vector.push(correct);
    }
    let mut result = FramewiseResult::new(&sample.sample_id, vector);
    result.failed_frames = failed;
    Ok(result)
}

/// Video-level baseline: one direct answer over all presented frames.
pub fn video_level_correct<B: Backend + ?Sized>(
    sample: &Sample,
    backend: &B,
    config: &EngineConfig,
) -> Result<bool, EngineError> {
    let ids: Vec<usize> = (0..sample.frames.len()).collect();
    Ok(match run_direct(sample, &ids, backend, config)? {
        Some(turn) => exact_accuracy(turn.action.answer_text().unwrap_or_default(), &sample.gold_answers) == 1,
        None => false,
    })
}

pub fn pseudo_keyframes(result: &FramewiseResult) -> Result<BTreeSet<usize>, OracleError> {
    if !result.any_correct {
        return Err(OracleError::NotFrameSolvable(result.sample_id.clone()));
    }
    Ok(result
        .vector
        .iter()
        .enumerate()
        .filter(|(_, &c)| c)
        .map(|(i, _)| i)
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub set_s: Vec<String>,
    pub set_u: Vec<String>,
}

impl Partition {
    pub fn from_results(results: &[FramewiseResult]) -> Self {
        let mut p = Partition::default();
        for r in results {
            if r.any_correct {
                p.set_s.push(r.sample_id.clone());
            } else {
                p.set_u.push(r.sample_id.clone());
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.set_s.len() + self.set_u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids_file(ids: &[String]) -> String {
        ids.iter().map(|id| format!("{id}\n")).collect()
    }

    pub fn parse_ids(text: &str) -> Vec<String> {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect()
    }
}

/// Oracle accuracy against the video-level baseline on the same samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub split_tag: String,
    pub n: usize,
    pub oracle_accuracy: f64,
    pub video_accuracy: Option<f64>,
}

impl OracleReport {
    pub fn gap(&self) -> Option<f64> {
        self.video_accuracy.map(|v| self.oracle_accuracy - v)
    }

    pub fn table(&self) -> String {
        let blank = "-".to_string();
        let mut out = format!("{:<16} {:>8}\n", "setting", "ACC.");
        out.push_str(&format!("{:<16} {:>8}\n", "frame-wise", fmt2(self.oracle_accuracy)));
        out.push_str(&format!(
            "{:<16} {:>8}\n",
            "video-level",
            self.video_accuracy.map(fmt2).unwrap_or_else(|| blank.clone())
        ));
        out.push_str(&format!(
            "{:<16} {:>8}\n",
            "oracle - video",
            self.gap().map(|g| format!("{g:+.2}")).unwrap_or(blank)
        ));
        out
    }
}

pub fn oracle_upper_bound(
    split_tag: &str,
    results: &[FramewiseResult],
    video_correct: Option<&[bool]>,
) -> (OracleReport, Partition) {
    let n = results.len();
    let pct = |k: usize| if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 };
    let oracle = pct(results.iter().filter(|r| r.any_correct).count());
    let video = video_correct.map(|v| pct(v.iter().filter(|&&c| c).count()));
    (
        OracleReport {
            split_tag: split_tag.into(),
            n,
            oracle_accuracy: oracle,
            video_accuracy: video,
        },
        Partition::from_results(results),
    )
}

/// Runs both the frame-wise oracle and the video-level baseline on every sample.
pub fn run_oracle<B: Backend + ?Sized>(
    samples: &[Sample],
    backend: &B,
    config: &EngineConfig,
) -> Result<(Vec<FramewiseResult>, Vec<bool>), EngineError> {
    let mut results = Vec::with_capacity(samples.len());
    let mut video = Vec::with_capacity(samples.len());
    let mut first_err = None;
    crate::engine::ordered_pool(
        samples,
        config.parallelism,
        |s| {
            let fw = framewise_eval(s, backend, config)?;
            let v = video_level_correct(s, backend, config).unwrap_or_else(|e| {
                log::warn!("sample {} video-level failed: {e}", s.sample_id);
                false
            });
            Ok::<_, EngineError>((fw, v))
        },
        |_, r| {
            match r {
                Ok((fw, v)) => {
                    results.push(fw);
                    video.push(v);
                }
                Err(e) => {
                    if first_err.is_none() {
                        first_err = Some(e);
                    }
                }
            }
            Ok::<_, EngineError>(())
        },
    )?;
    match first_err {
        Some(e) => Err(e),
        None => Ok((results, video)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetRow {
    pub system: String,
    pub subset: String,
    pub n: usize,
    pub accuracy: Option<f64>,
    pub hit_rate: Option<f64>,
}

/// Accuracy per subset for each system, plus hit rate on the frame-solvable
/// subset when the system logged keyframe selections.
pub fn stratified_report(
    systems: &[(String, Vec<SampleScore>, Option<Vec<TrajectoryRecord>>)],
    partition: &Partition,
    pseudo: &BTreeMap<String, BTreeSet<usize>>,
) -> Vec<SubsetRow> {
    let mut rows = Vec::new();
    for (name, scores, trajs) in systems {
        let by_id: HashMap<&str, &SampleScore> =
            scores.iter().map(|s| (s.sample_id.as_str(), s)).collect();
        let selections: Option<HashMap<&str, &[usize]>> = trajs.as_ref().map(|t| {
            t.iter()
                .map(|r| (r.sample_id.as_str(), r.keyframe_ids.as_slice()))
                .collect()
        });
        for (label, ids) in [("Set_s", &partition.set_s), ("Set_u", &partition.set_u)] {
            let present: Vec<&SampleScore> =
                ids.iter().filter_map(|id| by_id.get(id.as_str()).copied()).collect();
            let n = present.len();
            if n == 0 {
                log::warn!("{name}: subset {label} has no scored samples");
            }
            let accuracy = (n > 0).then(|| {
                100.0 * present.iter().map(|s| f64::from(s.accuracy)).sum::<f64>() / n as f64
            });
            let hit_rate = match (&selections, label) {
                (Some(sel), "Set_s") => {
                    let hits: Vec<bool> = ids
                        .iter()
                        .filter_map(|id| {
                            let chosen = sel.get(id.as_str())?;
                            let annotated = pseudo.get(id)?;
                            (!chosen.is_empty() && !annotated.is_empty()).then(|| hit(chosen, annotated))
                        })
                        .collect();
                    (!hits.is_empty()).then(|| {
                        100.0 * hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
                    })
                }
                _ => None,
            };
            rows.push(SubsetRow {
                system: name.clone(),
                subset: label.into(),
                n,
                accuracy,
                hit_rate,
            });
        }
    }
    rows
}

pub fn subset_table(rows: &[SubsetRow]) -> String {
    let cell = |v: Option<f64>| v.map(fmt2).unwrap_or_default();
    let mut out = format!("{:<12} {:<8} {:>6} {:>8} {:>9}\n", "system", "subset", "n", "ACC.", "hit rate");
    for r in rows {
        out.push_str(&format!(
            "{:<12} {:<8} {:>6} {:>8} {:>9}\n",
            r.system,
            r.subset,
            r.n,
            cell(r.accuracy),
            cell(r.hit_rate)
        ));
    }
    out
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn oracle_dominates_fixed_frame(vectors in prop::collection::vec(prop::collection::vec(any::<bool>(), 4), 1..20),
                                        k in 0usize..4) {
            let results: Vec<_> = vectors.iter().enumerate()
                .map(|(i, v)| FramewiseResult::new(format!("s{i}"), v.clone()))
                .collect();
            let (rep, part) = oracle_upper_bound("x", &results, None);
            let fixed = 100.0 * vectors.iter().filter(|v| v[k]).count() as f64 / vectors.len() as f64;
            prop_assert!(rep.oracle_accuracy >= fixed);
            prop_assert_eq!(part.len(), results.len());
            let s: BTreeSet<_> = part.set_s.iter().collect();
            prop_assert!(part.set_u.iter().all(|id| !s.contains(id)));
            for r in &results {
                prop_assert_eq!(pseudo_keyframes(r).is_ok(), r.any_correct);
            }
        }
    }
}
