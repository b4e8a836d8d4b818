//! Two-turn locate-and-focus protocol.
//!
//! Turn 1 shows every presented frame and asks the model to select keyframes.
//! Turn 2 shows only the selected keyframes, together with the model's own
//! turn-1 reasoning and action, and asks for the answer.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, GenerationRequest, Message, Part, Transcript};
use crate::data::{uniform_indices, Sample};
use crate::grammar::{
    parse_turn, render_turn, validate_keyframes, Action, DroppedId, GrammarError, KeyframeSet,
    Turn, DEFAULT_KEYFRAME_CAP,
};

pub const DEFAULT_MAX_ATTEMPTS: u32 = 5;
pub const ANCHOR_TEMPLATE: &str = "anchor-v1";
pub const ANSWER_TEMPLATE: &str = "answer-v1";

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("trajectory log {path}: {source}")]
    Log {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackPolicy {
    UniformKeyframes,
    DirectAnswer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub keyframe_cap: usize,
    pub max_attempts: u32,
    pub parallelism: usize,
    pub anchor_template_id: String,
    pub answer_template_id: String,
    pub fallback_policy: FallbackPolicy,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub seed: u64,
    /// First backoff delay between backend retries; doubles per retry.
    pub backoff_base: Duration,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            keyframe_cap: DEFAULT_KEYFRAME_CAP,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            parallelism: 4,
            anchor_template_id: ANCHOR_TEMPLATE.into(),
            answer_template_id: ANSWER_TEMPLATE.into(),
            fallback_policy: FallbackPolicy::UniformKeyframes,
            max_new_tokens: 512,
            temperature: 0.0,
            seed: 0,
            backoff_base: Duration::from_millis(250),
        }
    }
}

/// Prompt text for one protocol version.
#[derive(Debug, Clone, Copy)]
pub struct Templates {
    pub anchor_instruction: &'static str,
    pub answer_context: &'static str,
    pub answer_instruction: &'static str,
    pub direct_instruction: &'static str,
}

const V1: Templates = Templates {
    anchor_instruction: "You are answering a question about the scene text in a video. \
The video frames are listed below, each preceded by its frame id. First find the frames \
whose visible text is needed to answer the question. Write your reasoning inside \
<reasoning></reasoning>, then output exactly one action inside <action></action> of the form \
`select key frame: [id, id, ...]` listing the most relevant frame ids in order of relevance.",
    answer_context: "Task: answer a question about the scene text in a video by first selecting keyframes, then answering from them.",
    answer_instruction: "Using only the selected keyframes above, read the relevant text and answer \
the question. Write your reasoning inside <reasoning></reasoning>, then output exactly one action \
inside <action></action> of the form `answer: <short answer>`.",
    direct_instruction: "Answer the question using the frames above. Write your reasoning inside \
<reasoning></reasoning>, then output exactly one action inside <action></action> of the form \
`answer: <short answer>`.",
};

pub fn lookup_templates(anchor_id: &str, answer_id: &str) -> Result<Templates, EngineError> {
    if anchor_id != ANCHOR_TEMPLATE {
        return Err(EngineError::Config(format!("unknown anchor template {anchor_id:?}")));
    }
    if answer_id != ANSWER_TEMPLATE {
        return Err(EngineError::Config(format!("unknown answer template {answer_id:?}")));
    }
    Ok(V1)
}

impl EngineConfig {
    pub fn validate(&self) -> Result<Templates, EngineError> {
        if self.max_attempts < 1 {
            return Err(EngineError::Config("max_attempts must be at least 1".into()));
        }
        if self.parallelism < 1 {
            return Err(EngineError::Config("parallelism must be at least 1".into()));
        }
        if self.keyframe_cap < 1 {
            return Err(EngineError::Config("keyframe cap must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(EngineError::Config("temperature must be non-negative".into()));
        }
        lookup_templates(&self.anchor_template_id, &self.answer_template_id)
    }
}

fn frame_parts(sample: &Sample, ids: &[usize]) -> Vec<Part> {
    let mut parts = Vec::with_capacity(ids.len() * 2);
    for &id in ids {
        parts.push(Part::text(format!("Frame {id}:")));
        parts.push(Part::Image {
            path: sample.frames[id].source_path.clone(),
            label: id,
        });
    }
    parts
}

fn all_ids(sample: &Sample) -> Vec<usize> {
    (0..sample.frames.len()).collect()
}

pub fn build_anchor_prompt(sample: &Sample, templates: &Templates) -> Vec<Message> {
    let mut parts = vec![Part::text(format!(
        "{}\nQuestion: {}",
        templates.anchor_instruction, sample.question
    ))];
    parts.extend(frame_parts(sample, &all_ids(sample)));
    vec![Message::user(parts)]
}

/// Turn-2 conversation: a text-only task header, the canonical turn-1 output as
/// the assistant message, then the selected keyframes and the answer request.
pub fn build_answer_prompt(
    sample: &Sample,
    turn1: &Turn,
    keyframes: &KeyframeSet,
    templates: &Templates,
) -> Vec<Message> {
    let header = Message::user(vec![Part::text(format!(
        "{}\nQuestion: {}\nThe video has {} frames with ids 0 to {}.",
        templates.answer_context,
        sample.question,
        sample.frames.len(),
        sample.frames.len() - 1
    ))]);
    let mut parts = vec![Part::text(format!("Selected keyframes: {:?}", keyframes.ids))];
    parts.extend(frame_parts(sample, &keyframes.ids));
    parts.push(Part::text(format!(
        "Question: {}\n{}",
        sample.question, templates.answer_instruction
    )));
    vec![
        header,
        Message::assistant(render_turn(turn1)),
        Message::user(parts),
    ]
}

/// Single-turn answer prompt over the given frames.
pub fn build_direct_prompt(sample: &Sample, ids: &[usize], templates: &Templates) -> Vec<Message> {
    let mut parts = vec![Part::text(format!("Question: {}", sample.question))];
    parts.extend(frame_parts(sample, ids));
    parts.push(Part::text(templates.direct_instruction));
    vec![Message::user(parts)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sample_id: String,
    /// Parsed or synthesized turn 1. `None` when the direct-answer fallback ran.
    pub turn1: Option<Turn>,
    pub turn1_raw: String,
    pub keyframes: KeyframeSet,
    pub turn2: Option<Turn>,
    pub turn2_raw: String,
    pub answer: String,
    pub used_fallback: bool,
    pub attempts: [u32; 2],
    pub transcripts: Vec<Transcript>,
}

impl Trajectory {
    /// Turn 1 was a real, valid keyframe selection by the model.
    pub fn anchored(&self) -> bool {
        !self.used_fallback
            && self
                .turn1
                .as_ref()
                .is_some_and(|t| t.action.is_select())
    }
}

/// Per-episode decoding settings; curation varies these across attempts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoding {
    pub temperature: f64,
    pub seed: u64,
}

struct Episode<'a, B: ?Sized> {
    backend: &'a B,
    config: &'a EngineConfig,
    decoding: Decoding,
    transcripts: Vec<Transcript>,
    calls: u64,
}

impl<B: Backend + ?Sized> Episode<'_, B> {
    /// One backend call with engine-level retries on transport errors.
    fn call(&mut self, messages: &[Message]) -> Result<String, BackendError> {
        let request = GenerationRequest {
            messages: messages.to_vec(),
            max_new_tokens: self.config.max_new_tokens,
            temperature: self.decoding.temperature,
            seed: Some(self.decoding.seed.wrapping_add(self.calls)),
        };
        self.calls += 1;
        let digest = request.digest();
        let mut delay = self.config.backoff_base;
        let mut last_err = None;
        for attempt in 0..self.config.max_attempts {
            if attempt > 0 && !delay.is_zero() {
                std::thread::sleep(delay);
                delay *= 2;
            }
            let started = Instant::now();
            match self.backend.complete(&request) {
                Ok(text) => {
                    self.transcripts.push(Transcript {
                        request_digest: digest,
                        response_text: text.clone(),
                        latency_ms: started.elapsed().as_millis() as u64,
                        backend_id: self.backend.id().into(),
                    });
                    return Ok(text);
                }
                Err(e) => {
                    log::debug!("backend attempt {} failed: {e}", attempt + 1);
                    last_err = Some(e);
                }
            }
        }
        Err(last_err.expect("max_attempts >= 1"))
    }

    /// Calls the model until `accept` yields a value or attempts run out.
    /// Returns the accepted value (if any), the last raw text and attempts used.
    fn until_valid<T>(
        &mut self,
        messages: &[Message],
        accept: impl Fn(&str) -> Result<T, GrammarError>,
    ) -> Result<(Option<T>, String, u32), BackendError> {
        let mut raw = String::new();
        for attempt in 1..=self.config.max_attempts {
            raw = self.call(messages)?;
            match accept(&raw) {
                Ok(v) => return Ok((Some(v), raw, attempt)),
                Err(e) => log::debug!("turn rejected on attempt {attempt}: {e}"),
            }
        }
        Ok((None, raw, self.config.max_attempts))
    }
}

fn accept_select(frame_count: usize, cap: usize) -> impl Fn(&str) -> Result<(Turn, KeyframeSet), GrammarError> {
    move |raw| {
        let turn = parse_turn(raw)?;
        let Action::SelectKeyframes { frame_ids } = &turn.action else {
            return Err(GrammarError::UnparsableAction {
                payload: turn.action.payload(),
                raw: raw.into(),
            });
        };
        let set = validate_keyframes(frame_ids, frame_count, cap)?;
        Ok((turn, set))
    }
}

fn accept_answer(raw: &str) -> Result<Turn, GrammarError> {
    let turn = parse_turn(raw)?;
    if turn.action.is_select() {
        return Err(GrammarError::UnparsableAction {
            payload: turn.action.payload(),
            raw: raw.into(),
        });
    }
    Ok(turn)
}

pub fn run_episode<B: Backend + ?Sized>(
    sample: &Sample,
    backend: &B,
    config: &EngineConfig,
) -> Result<Trajectory, EngineError> {
    let decoding = Decoding {
        temperature: config.temperature,
        seed: config.seed,
    };
    run_episode_with(sample, backend, config, decoding)
}

pub fn run_episode_with<B: Backend + ?Sized>(
    sample: &Sample,
    backend: &B,
    config: &EngineConfig,
    decoding: Decoding,
) -> Result<Trajectory, EngineError> {
    let templates = config.validate()?;
    let mut ep = Episode {
        backend,
        config,
        decoding,
        transcripts: Vec::new(),
        calls: 0,
    };
    let frame_count = sample.frames.len();

    let anchor = build_anchor_prompt(sample, &templates);
    let (selected, turn1_raw, attempts1) =
        ep.until_valid(&anchor, accept_select(frame_count, config.keyframe_cap))?;

    let (turn1, keyframes, fell_back) = match selected {
        Some((turn, set)) => (Some(turn), set, false),
        None => match config.fallback_policy {
            FallbackPolicy::UniformKeyframes => {
                let ids = uniform_indices(frame_count, config.keyframe_cap);
                let turn = Turn {
                    reasoning: String::new(),
                    action: Action::SelectKeyframes {
                        frame_ids: ids.iter().map(|&i| i as i64).collect(),
                    },
                    raw: turn1_raw.clone(),
                };
                (Some(turn), KeyframeSet::from_ids(ids), true)
            }
            FallbackPolicy::DirectAnswer => (None, KeyframeSet::default(), true),
        },
    };

    let answer_prompt = match &turn1 {
        Some(t) => build_answer_prompt(sample, t, &keyframes, &templates),
        None => build_direct_prompt(sample, &all_ids(sample), &templates),
    };
    let (turn2, turn2_raw, attempts2) = ep.until_valid(&answer_prompt, accept_answer)?;
    let answer = turn2
        .as_ref()
        .and_then(|t| t.action.answer_text())
        .unwrap_or_default()
        .to_string();

    Ok(Trajectory {
        sample_id: sample.sample_id.clone(),
        used_fallback: fell_back || turn2.is_none(),
        turn1,
        turn1_raw,
        keyframes,
        turn2,
        turn2_raw,
        answer,
        attempts: [attempts1, attempts2],
        transcripts: ep.transcripts,
    })
}

/// Single-turn answer over the given frame ids; used for video-level and
/// frame-wise baselines.
pub fn run_direct<B: Backend + ?Sized>(
    sample: &Sample,
    ids: &[usize],
    backend: &B,
    config: &EngineConfig,
) -> Result<Option<Turn>, EngineError> {
    let templates = config.validate()?;
    let mut ep = Episode {
        backend,
        config,
        decoding: Decoding {
            temperature: config.temperature,
            seed: config.seed,
        },
        transcripts: Vec::new(),
        calls: 0,
    };
    let prompt = build_direct_prompt(sample, ids, &templates);
    let (turn, _, _) = ep.until_valid(&prompt, accept_answer)?;
    Ok(turn)
}

/// One line of the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub sample_id: String,
    pub turn1_raw: String,
    pub keyframe_ids: Vec<usize>,
    pub dropped: Vec<DroppedId>,
    pub turn2_raw: String,
    pub answer: String,
    pub used_fallback: bool,
    pub attempts: [u32; 2],
    pub digests: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl From<&Trajectory> for TrajectoryRecord {
    fn from(t: &Trajectory) -> Self {
        TrajectoryRecord {
            sample_id: t.sample_id.clone(),
            turn1_raw: t.turn1_raw.clone(),
            keyframe_ids: t.keyframes.ids.clone(),
            dropped: t.keyframes.dropped.clone(),
            turn2_raw: t.turn2_raw.clone(),
            answer: t.answer.clone(),
            used_fallback: t.used_fallback,
            attempts: t.attempts,
            digests: t.transcripts.iter().map(|x| x.request_digest.clone()).collect(),
            error: None,
        }
    }
}

impl TrajectoryRecord {
    pub fn failed(sample_id: &str, error: &EngineError) -> Self {
        TrajectoryRecord {
            sample_id: sample_id.into(),
            turn1_raw: String::new(),
            keyframe_ids: Vec::new(),
            dropped: Vec::new(),
            turn2_raw: String::new(),
            answer: String::new(),
            used_fallback: true,
            attempts: [0, 0],
            digests: Vec::new(),
            error: Some(error.to_string()),
        }
    }
}

/// Runs `work` over `items` on at most `parallelism` threads and hands results
/// to `sink` strictly in input order. `sink` runs on the calling thread.
pub fn ordered_pool<T, R, W, S, E>(
    items: &[T],
    parallelism: usize,
    work: W,
    mut sink: S,
) -> Result<(), E>
where
    T: Sync,
    R: Send,
    W: Fn(&T) -> R + Sync,
    S: FnMut(usize, R) -> Result<(), E>,
{
    let workers = parallelism.max(1).min(items.len().max(1));
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, R)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            let work = &work;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                if tx.send((i, work(&items[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut emit = 0;
        for (i, r) in rx {
            pending.insert(i, r);
            while let Some(r) = pending.remove(&emit) {
                if let Err(e) = sink(emit, r) {
                    // Stop handing out work; in-flight items finish and are discarded.
                    next.store(items.len(), Ordering::SeqCst);
                    return Err(e);
                }
                emit += 1;
            }
        }
        Ok(())
    })
}

/// Append-only line-delimited log that knows which keys it already holds.
/// A torn final line from an interrupted run is truncated on open.
pub struct ResumableLog {
    path: PathBuf,
    file: fs::File,
}

impl ResumableLog {
    /// Opens `path` for appending. With `resume` the existing lines are kept
    /// and returned; otherwise the file is truncated.
    pub fn open(path: &Path, resume: bool) -> std::io::Result<(Self, Vec<String>)> {
        let mut lines = Vec::new();
        if resume && path.exists() {
            let mut file = fs::OpenOptions::new().read(true).write(true).open(path)?;
            let mut good_len = 0u64;
            let mut reader = BufReader::new(&mut file);
            let mut buf = String::new();
            loop {
                buf.clear();
                let n = reader.read_line(&mut buf)?;
                if n == 0 || !buf.ends_with('\n') {
                    break;
                }
                good_len += n as u64;
                lines.push(buf.trim_end_matches('\n').to_string());
            }
            drop(reader);
            file.set_len(good_len)?;
            file.seek(SeekFrom::End(0))?;
        } else {
            fs::File::create(path)?;
        }
        let file = fs::OpenOptions::new().append(true).open(path)?;
        Ok((
            ResumableLog {
                path: path.into(),
                file,
            },
            lines,
        ))
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> std::io::Result<()> {
        let line = serde_json::to_string(record).map_err(std::io::Error::other)?;
        writeln!(self.file, "{line}")?;
        self.file.flush()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Extracts `sample_id` from previously written log lines.
pub fn logged_ids(lines: &[String]) -> HashSet<String> {
    lines
        .iter()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter_map(|v| v.get("sample_id")?.as_str().map(String::from))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchSummary {
    pub executed: usize,
    pub skipped: usize,
    pub failed: usize,
    pub fallbacks: usize,
}

/// Runs every sample not already present in the log and appends one record per
/// sample in manifest order.
pub fn run_batch<B: Backend + ?Sized>(
    samples: &[Sample],
    backend: &B,
    config: &EngineConfig,
    log_path: &Path,
    resume: bool,
) -> Result<BatchSummary, EngineError> {
    config.validate()?;
    let log_err = |source| EngineError::Log {
        path: log_path.into(),
        source,
    };
    let (mut log, existing) = ResumableLog::open(log_path, resume).map_err(log_err)?;
    let done = logged_ids(&existing);
    let todo: Vec<&Sample> = samples
        .iter()
        .filter(|s| !done.contains(&s.sample_id))
        .collect();
    let mut summary = BatchSummary {
        skipped: samples.len() - todo.len(),
        ..Default::default()
    };
    ordered_pool(
        &todo,
        config.parallelism,
        |s| match run_episode(s, backend, config) {
            Ok(t) => TrajectoryRecord::from(&t),
            Err(e) => {
                log::warn!("sample {} failed: {e}", s.sample_id);
                TrajectoryRecord::failed(&s.sample_id, &e)
            }
        },
        |_, rec| {
            summary.executed += 1;
            summary.failed += usize::from(rec.error.is_some());
            summary.fallbacks += usize::from(rec.used_fallback);
            log.append(&rec).map_err(log_err)
        },
    )?;
    Ok(summary)
}

pub fn read_trajectory_log(path: &Path) -> Result<Vec<TrajectoryRecord>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| format!("{} line {}: {e}", path.display(), i + 1))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::data::FrameRef;

    fn sample(n: usize) -> Sample {
        Sample {
            sample_id: "s1".into(),
            video_id: "v".into(),
            frames: (0..n)
                .map(|i| FrameRef {
                    index: i,
                    source_path: PathBuf::from(format!("/f/{i}.jpg")),
                    timestamp_s: None,
                })
                .collect(),
            question: "What does the sign say?".into(),
            gold_answers: vec!["Lisboa".into()],
            pseudo_keyframes: None,
            split_tag: String::new(),
        }
    }

    fn cfg() -> EngineConfig {
        EngineConfig {
            backoff_base: Duration::ZERO,
            ..Default::default()
        }
    }

    #[test]
    fn anchor_prompt_layout() {
        let s = sample(4);
        let msgs = build_anchor_prompt(&s, &V1);
        assert_eq!(msgs.len(), 1);
        let parts = &msgs[0].parts;
        assert_eq!(parts.len(), 9);
        for i in 0..4 {
            assert_eq!(parts[1 + 2 * i], Part::text(format!("Frame {i}:")));
            assert!(matches!(&parts[2 + 2 * i], Part::Image { label, .. } if *label == i));
        }
        let text: String = msgs[0]
            .parts
            .iter()
            .filter_map(|p| match p {
                Part::Text { text } => Some(text.as_str()),
                _ => None,
            })
            .collect();
        assert_eq!(text.matches(&s.question).count(), 1);
    }

    #[test]
    fn unknown_template_is_config_error() {
        let c = EngineConfig {
            anchor_template_id: "nope".into(),
            ..cfg()
        };
        assert!(matches!(c.validate(), Err(EngineError::Config(_))));
        let b = ScriptedBackend::new(Vec::<String>::new());
        assert!(matches!(run_episode(&sample(3), &b, &c), Err(EngineError::Config(_))));
        assert_eq!(b.remaining(), 0);
    }

    #[test]
    fn answer_prompt_carries_only_keyframes() {
        let s = sample(10);
        let turn1 = parse_turn("<reasoning>sign on 3 and 7</reasoning><action>select key frame: [3, 7]</action>").unwrap();
        let set = KeyframeSet::from_ids(vec![3, 7]);
        let msgs = build_answer_prompt(&s, &turn1, &set, &V1);
        assert_eq!(msgs.len(), 3);
        assert_eq!(msgs.iter().map(Message::image_count).sum::<usize>(), 2);
        assert_eq!(msgs[2].image_count(), 2);
        assert_eq!(
            msgs[1].parts,
            vec![Part::text(
                "<reasoning>sign on 3 and 7</reasoning>\n<action>select key frame: [3, 7]</action>"
            )]
        );
    }

    #[test]
    fn happy_path_episode() {
        let b = ScriptedBackend::new([
            "<reasoning>r1</reasoning><action>select key frame: [1, 2]</action>",
            "<reasoning>r2</reasoning><action>answer: lisboa</action>",
        ]);
        let t = run_episode(&sample(4), &b, &cfg()).unwrap();
        assert!(!t.used_fallback);
        assert!(t.anchored());
        assert_eq!(t.attempts, [1, 1]);
        assert_eq!(t.keyframes.ids, vec![1, 2]);
        assert_eq!(t.answer, "lisboa");
        assert_eq!(t.transcripts.len(), 2);
    }

    #[test]
    fn uniform_fallback_after_garbage() {
        let c = EngineConfig {
            keyframe_cap: 4,
            ..cfg()
        };
        let b = ScriptedBackend::new(vec!["garbage"; 5]);
        b.push("<action>answer: x</action>");
        let t = run_episode(&sample(10), &b, &c).unwrap();
        assert!(t.used_fallback);
        assert_eq!(t.keyframes.ids, vec![0, 3, 6, 9]);
        assert_eq!(t.attempts, [5, 1]);
        assert_eq!(t.answer, "x");
    }

    #[test]
    fn direct_answer_fallback() {
        let c = EngineConfig {
            max_attempts: 2,
            fallback_policy: FallbackPolicy::DirectAnswer,
            ..cfg()
        };
        let b = ScriptedBackend::new(["nope", "<action>select key frame: [99]</action>", "<action>answer: y</action>"]);
        let t = run_episode(&sample(3), &b, &c).unwrap();
        assert!(t.used_fallback);
        assert!(t.turn1.is_none());
        assert!(t.keyframes.ids.is_empty());
        assert_eq!(t.answer, "y");
    }

    #[test]
    fn turn2_failure_yields_empty_answer() {
        let c = EngineConfig {
            max_attempts: 2,
            ..cfg()
        };
        let b = ScriptedBackend::new([
            "<action>select key frame: [0]</action>",
            "<action>select key frame: [1]</action>",
            "no tags",
        ]);
        let t = run_episode(&sample(3), &b, &c).unwrap();
        assert!(t.used_fallback);
        assert_eq!(t.answer, "");
        assert!(t.turn2.is_none());
        assert_eq!(t.attempts, [1, 2]);
    }

    #[test]
    fn backend_errors_propagate_after_retries() {
        let c = EngineConfig {
            max_attempts: 3,
            ..cfg()
        };
        let b = ScriptedBackend::default();
        for _ in 0..3 {
            b.push_error(BackendError::Timeout);
        }
        assert!(matches!(
            run_episode(&sample(3), &b, &c),
            Err(EngineError::Backend(BackendError::Timeout))
        ));
        // transient failure is absorbed
        let b = ScriptedBackend::default();
        b.push_error(BackendError::Timeout);
        b.push("<action>select key frame: [0]</action>");
        b.push("<action>answer: z</action>");
        let t = run_episode(&sample(3), &b, &c).unwrap();
        assert_eq!(t.answer, "z");
    }

    #[test]
    fn pool_preserves_order() {
        let items: Vec<u64> = (0..50).collect();
        let mut out = Vec::new();
        ordered_pool::<_, _, _, _, ()>(
            &items,
            8,
            |&x| {
                std::thread::sleep(Duration::from_micros((50 - x) * 30));
                x * 2
            },
            |i, r| {
                out.push((i, r));
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(out, (0..50).map(|i| (i as usize, i * 2)).collect::<Vec<_>>());
    }

    #[test]
    fn resumable_log_truncates_torn_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        fs::write(&p, "{\"sample_id\":\"a\"}\n{\"sample_id\":\"b\"").unwrap();
        let (mut log, lines) = ResumableLog::open(&p, true).unwrap();
        assert_eq!(logged_ids(&lines), ["a".to_string()].into_iter().collect());
        log.append(&serde_json::json!({"sample_id": "c"})).unwrap();
        assert_eq!(
            fs::read_to_string(&p).unwrap(),
            "{\"sample_id\":\"a\"}\n{\"sample_id\":\"c\"}\n"
        );
    }
}
