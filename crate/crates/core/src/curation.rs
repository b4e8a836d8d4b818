//! Training-corpus construction.
//!
//! The SFT pipeline asks a teacher model to solve each sample with the
//! two-turn protocol, retrying up to a fixed number of attempts, and keeps the
//! first anchored trajectory whose answer passes the judge. The RL pipeline
//! samples several episodes per example and keeps only examples with mixed
//! outcomes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::data::{dedupe_samples, Sample};
use crate::engine::{
    logged_ids, ordered_pool, run_episode_with, Decoding, EngineConfig, EngineError, ResumableLog,
    Trajectory,
};
use crate::grammar::{parse_turn, render_turn, Action, Turn};
use crate::metrics::{anls, exact_accuracy, DEFAULT_ANLS_THRESHOLD};

pub const SFT_CORPUS_FILE: &str = "sft_corpus.jsonl";
pub const SFT_REJECTS_FILE: &str = "sft_rejects.jsonl";
pub const RL_OUTCOMES_FILE: &str = "rl_outcomes.jsonl";
pub const RL_CORPUS_FILE: &str = "rl_corpus.jsonl";

/// Curation judge: exact match, or ANLS at or above the threshold.
pub fn judge(pred: &str, golds: &[String], anls_threshold: f64) -> bool {
    !pred.trim().is_empty()
        && (exact_accuracy(pred, golds) == 1 || anls(pred, golds, anls_threshold) >= anls_threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurationOptions {
    pub attempts: u32,
    pub temperature: f64,
    pub anls_threshold: f64,
    pub teacher_id: String,
}

impl Default for CurationOptions {
    fn default() -> Self {
        CurationOptions {
            attempts: 5,
            temperature: 1.0,
            anls_threshold: DEFAULT_ANLS_THRESHOLD,
            teacher_id: "teacher".into(),
        }
    }
}

fn attempt_decoding(config: &EngineConfig, opts: &CurationOptions, attempt: u32) -> Decoding {
    Decoding {
        temperature: opts.temperature,
        seed: config.seed.wrapping_add(u64::from(attempt) << 32),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub sample_id: String,
    pub frames: Vec<String>,
    pub question: String,
    pub prompt_template: String,
    pub target: String,
    pub teacher: String,
    pub attempts: u32,
}

/// Canonical two-turn serialization used as the SFT target.
pub fn render_target(turn1: &Turn, turn2: &Turn) -> String {
    format!("{}\n{}", render_turn(turn1), render_turn(turn2))
}

/// Splits a target back into its two turns.
pub fn parse_target(target: &str) -> Option<(Turn, Turn)> {
    let cut = target.to_ascii_lowercase().find("</action>")? + "</action>".len();
    let first = parse_turn(&target[..cut]).ok()?;
    let second = parse_turn(&target[cut..]).ok()?;
    Some((first, second))
}

/// Write-time check: the target parses into a select turn followed by an
/// answer turn whose answer passes the judge.
pub fn target_is_valid(target: &str, golds: &[String], anls_threshold: f64) -> bool {
    match parse_target(target) {
        Some((t1, t2)) => {
            t1.action.is_select()
                && t2
                    .action
                    .answer_text()
                    .is_some_and(|a| judge(a, golds, anls_threshold))
        }
        None => false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SftOutcome {
    Kept(SftRecord),
    Dropped { attempts: u32 },
}

fn accepted_turns(t: &Trajectory) -> Option<(&Turn, &Turn)> {
    if !t.anchored() {
        return None;
    }
    Some((t.turn1.as_ref()?, t.turn2.as_ref()?))
}

pub fn curate_sft_sample<B: Backend + ?Sized>(
    sample: &Sample,
    teacher: &B,
    config: &EngineConfig,
    opts: &CurationOptions,
) -> Result<SftOutcome, EngineError> {
    for attempt in 1..=opts.attempts {
        let traj = run_episode_with(sample, teacher, config, attempt_decoding(config, opts, attempt))?;
        let Some((t1, t2)) = accepted_turns(&traj) else {
            continue;
        };
        if !judge(&traj.answer, &sample.gold_answers, opts.anls_threshold) {
            continue;
        }
        // Supervise on the canonical form with the validated keyframe ids.
        let turn1 = Turn {
            action: Action::SelectKeyframes {
                frame_ids: traj.keyframes.ids.iter().map(|&i| i as i64).collect(),
            },
            ..t1.clone()
        };
        let target = render_target(&turn1, t2);
        if !target_is_valid(&target, &sample.gold_answers, opts.anls_threshold) {
            log::debug!("sample {}: target failed write-time check", sample.sample_id);
            continue;
        }
        return Ok(SftOutcome::Kept(SftRecord {
            sample_id: sample.sample_id.clone(),
            frames: sample
                .frames
                .iter()
                .map(|f| f.source_path.to_string_lossy().into_owned())
                .collect(),
            question: sample.question.clone(),
            prompt_template: config.anchor_template_id.clone(),
            target,
            teacher: opts.teacher_id.clone(),
            attempts: attempt,
        }));
    }
    Ok(SftOutcome::Dropped {
        attempts: opts.attempts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlRecord {
    pub sample_id: String,
    pub correct_count: u32,
    pub attempts: u32,
    pub outcomes: Vec<u8>,
    pub attempt_answers: Vec<String>,
}

impl RlRecord {
    pub fn retained(&self) -> bool {
        rl_retain(self.correct_count, self.attempts)
    }
}

/// Mixed outcomes only: strictly between all-wrong and all-correct.
pub fn rl_retain(correct: u32, attempts: u32) -> bool {
    correct > 0 && correct < attempts
}

pub fn curate_rl_sample<B: Backend + ?Sized>(
    sample: &Sample,
    model: &B,
    config: &EngineConfig,
    opts: &CurationOptions,
) -> Result<RlRecord, EngineError> {
    let mut outcomes = Vec::with_capacity(opts.attempts as usize);
    let mut answers = Vec::with_capacity(opts.attempts as usize);
    for attempt in 1..=opts.attempts {
        let traj = run_episode_with(sample, model, config, attempt_decoding(config, opts, attempt))?;
        // Malformed output leaves an empty answer, which the judge rejects.
        outcomes.push(u8::from(judge(&traj.answer, &sample.gold_answers, opts.anls_threshold)));
        answers.push(traj.answer);
    }
    Ok(RlRecord {
        sample_id: sample.sample_id.clone(),
        correct_count: outcomes.iter().map(|&o| u32::from(o)).sum(),
        attempts: opts.attempts,
        outcomes,
        attempt_answers: answers,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CurationSummary {
    pub inputs: usize,
    pub duplicates: usize,
    pub already_done: usize,
    pub new: usize,
    pub kept: usize,
    pub dropped: usize,
    pub failed: usize,
}

impl CurationSummary {
    pub fn yield_line(&self) -> String {
        let processed = self.kept + self.dropped + self.failed;
        let pct = if processed == 0 {
            0.0
        } else {
            100.0 * self.kept as f64 / processed as f64
        };
        format!(
            "kept {pct:.1}% of inputs ({} kept, {} dropped, {} failed, {} new)",
            self.kept, self.dropped, self.failed, self.new
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RejectRecord {
    sample_id: String,
    attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Log {
        path: path.into(),
        source,
    }
}

fn count_lines(lines: &[String]) -> usize {
    lines.iter().filter(|l| !l.trim().is_empty()).count()
}

/// SFT curation over `samples` into `out_dir`, resumable by sample id.
pub fn run_sft_pipeline<B: Backend + ?Sized>(
    samples: &[Sample],
    teacher: &B,
    config: &EngineConfig,
    opts: &CurationOptions,
    out_dir: &Path,
    resume: bool,
) -> Result<CurationSummary, EngineError> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let corpus_path = out_dir.join(SFT_CORPUS_FILE);
    let rejects_path = out_dir.join(SFT_REJECTS_FILE);
    let (mut corpus, kept_lines) = ResumableLog::open(&corpus_path, resume).map_err(io_err(&corpus_path))?;
    let (mut rejects, reject_lines) =
        ResumableLog::open(&rejects_path, resume).map_err(io_err(&rejects_path))?;
    let mut done = logged_ids(&kept_lines);
    done.extend(logged_ids(&reject_lines));

    let unique = dedupe_samples(samples.to_vec());
    let todo: Vec<&Sample> = unique.iter().filter(|s| !done.contains(&s.sample_id)).collect();
    let mut summary = CurationSummary {
        inputs: samples.len(),
        duplicates: samples.len() - unique.len(),
        already_done: unique.len() - todo.len(),
        kept: count_lines(&kept_lines),
        dropped: count_lines(&reject_lines),
        ..Default::default()
    };
    ordered_pool(
        &todo,
        config.parallelism,
        |s| curate_sft_sample(s, teacher, config, opts),
        |i, res| {
            summary.new += 1;
            let id = &todo[i].sample_id;
            match res {
                Ok(SftOutcome::Kept(rec)) => {
                    summary.kept += 1;
                    corpus.append(&rec).map_err(io_err(&corpus_path))
                }
                Ok(SftOutcome::Dropped { attempts }) => {
                    summary.dropped += 1;
                    rejects
                        .append(&RejectRecord {
                            sample_id: id.clone(),
                            attempts,
                            error: None,
                        })
                        .map_err(io_err(&rejects_path))
                }
                Err(e) => {
                    log::warn!("sample {id} skipped: {e}");
                    summary.failed += 1;
                    Ok(())
                }
            }
        },
    )?;
    Ok(summary)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RlSummary {
    pub curation: CurationSummary,
    /// Number of evaluated samples per correct count, index = count.
    pub histogram: Vec<usize>,
}

impl RlSummary {
    pub fn histogram_lines(&self) -> Vec<String> {
        let total: usize = self.histogram.iter().sum();
        let attempts = self.histogram.len().saturating_sub(1) as u32;
        self.histogram
            .iter()
            .enumerate()
            .map(|(c, &n)| {
                let mark = if rl_retain(c as u32, attempts) { "kept" } else { "excluded" };
                let pct = if total == 0 { 0.0 } else { 100.0 * n as f64 / total as f64 };
                format!("correct={c}/{attempts}  {n:>6}  {pct:5.1}%  {mark}")
            })
            .collect()
    }
}

/// RL difficulty filtering over `samples` into `out_dir`, resumable by sample id.
pub fn run_rl_pipeline<B: Backend + ?Sized>(
    samples: &[Sample],
    model: &B,
    config: &EngineConfig,
    opts: &CurationOptions,
    out_dir: &Path,
    resume: bool,
) -> Result<RlSummary, EngineError> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let outcomes_path = out_dir.join(RL_OUTCOMES_FILE);
    let corpus_path = out_dir.join(RL_CORPUS_FILE);
    let (mut outcomes, outcome_lines) =
        ResumableLog::open(&outcomes_path, resume).map_err(io_err(&outcomes_path))?;
    let (mut corpus, _) = ResumableLog::open(&corpus_path, resume).map_err(io_err(&corpus_path))?;
    let done = logged_ids(&outcome_lines);

    let mut histogram = vec![0usize; opts.attempts as usize + 1];
    let mut summary = CurationSummary {
        inputs: samples.len(),
        ..Default::default()
    };
    for line in &outcome_lines {
        if let Ok(rec) = serde_json::from_str::<RlRecord>(line) {
            if let Some(slot) = histogram.get_mut(rec.correct_count as usize) {
                *slot += 1;
            }
            if rec.retained() {
                summary.kept += 1;
            } else {
                summary.dropped += 1;
            }
        }
    }
    let todo: Vec<&Sample> = samples.iter().filter(|s| !done.contains(&s.sample_id)).collect();
    summary.already_done = samples.len() - todo.len();
    ordered_pool(
        &todo,
        config.parallelism,
        |s| curate_rl_sample(s, model, config, opts),
        |i, res| {
            summary.new += 1;
            match res {
                Ok(rec) => {
                    histogram[rec.correct_count as usize] += 1;
                    outcomes.append(&rec).map_err(io_err(&outcomes_path))?;
                    if rec.retained() {
                        summary.kept += 1;
                        corpus.append(&rec).map_err(io_err(&corpus_path))?;
                    } else {
                        summary.dropped += 1;
                    }
                    Ok(())
                }
                Err(e) => {
                    log::warn!("sample {} skipped: {e}", todo[i].sample_id);
                    summary.failed += 1;
                    Ok::<(), EngineError>(())
                }
            }
        },
    )?;
    Ok(RlSummary {
        curation: summary,
        histogram,
    })
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| format!("{} line {}: {e}", path.display(), i + 1))
        })
        .collect()
}
