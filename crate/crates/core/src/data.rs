//! Dataset ingestion: line-delimited manifests, frame sampling and deduplication.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_FRAME_BUDGET: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("malformed record at line {line_no}: {reason}")]
    MalformedRecord { line_no: usize, reason: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateSampleId(String),
    #[error("missing frame file {0}")]
    MissingFrameFile(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRef {
    pub index: usize,
    pub source_path: PathBuf,
    pub timestamp_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub video_id: String,
    pub frames: Vec<FrameRef>,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub pseudo_keyframes: Option<BTreeSet<usize>>,
    pub split_tag: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<Sample>,
    pub source_uri: String,
    pub schema_version: u32,
}

/// One manifest line as it appears on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestRecord {
    sample_id: String,
    video_id: String,
    question: String,
    answers: Vec<String>,
    frames: Vec<FrameRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keyframes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameRecord {
    index: usize,
    path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Directory that relative frame paths resolve against. Defaults to the
    /// manifest's parent directory.
    pub frame_root: Option<PathBuf>,
    /// Skip the on-disk existence check for frame files.
    pub skip_frame_check: bool,
}

impl Sample {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Checks the structural invariants of a sample. Returns the first violation.
    pub fn check(&self) -> Result<(), String> {
        if self.frames.is_empty() {
            return Err("empty frames".into());
        }
        if self.gold_answers.is_empty() {
            return Err("empty answers".into());
        }
        for (pos, frame) in self.frames.iter().enumerate() {
            if frame.index != pos {
                return Err(format!(
                    "frame indices must be contiguous from 0, found {} at position {pos}",
                    frame.index
                ));
            }
        }
        let mut last_t = f64::NEG_INFINITY;
        for frame in &self.frames {
            if let Some(t) = frame.timestamp_s {
                if !t.is_finite() || t < last_t {
                    return Err(format!("timestamp decreases at frame {}", frame.index));
                }
                last_t = t;
            }
        }
        if let Some(keys) = &self.pseudo_keyframes {
            if let Some(bad) = keys.iter().find(|&&k| k >= self.frames.len()) {
                return Err(format!("keyframe {bad} out of range"));
            }
        }
        Ok(())
    }
}

fn record_to_sample(rec: ManifestRecord, root: &Path) -> Result<Sample, String> {
    let mut frames: Vec<FrameRef> = rec
        .frames
        .into_iter()
        .map(|f| FrameRef {
            index: f.index,
            source_path: root.join(f.path),
            timestamp_s: f.t,
        })
        .collect();
    frames.sort_by_key(|f| f.index);
    if frames.windows(2).any(|w| w[0].index == w[1].index) {
        return Err("duplicate frame index".into());
    }
    let sample = Sample {
        sample_id: rec.sample_id,
        video_id: rec.video_id,
        frames,
        question: rec.question,
        gold_answers: rec.answers,
        pseudo_keyframes: rec.keyframes.map(|k| k.into_iter().collect()),
        split_tag: rec.split.unwrap_or_default(),
    };
    sample.check()?;
    Ok(sample)
}

fn sample_to_record(sample: &Sample) -> ManifestRecord {
    ManifestRecord {
        sample_id: sample.sample_id.clone(),
        video_id: sample.video_id.clone(),
        question: sample.question.clone(),
        answers: sample.gold_answers.clone(),
        frames: sample
            .frames
            .iter()
            .map(|f| FrameRecord {
                index: f.index,
                path: f.source_path.to_string_lossy().into_owned(),
                t: f.timestamp_s,
            })
            .collect(),
        keyframes: sample
            .pseudo_keyframes
            .as_ref()
            .map(|k| k.iter().copied().collect()),
        split: if sample.split_tag.is_empty() {
            None
        } else {
            Some(sample.split_tag.clone())
        },
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    load_manifest_with(path, &LoadOptions::default())
}

pub fn load_manifest_with(path: &Path, opts: &LoadOptions) -> Result<DatasetManifest, DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let root = match &opts.frame_root {
        Some(r) => r.clone(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };

    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| DataError::MalformedRecord {
                line_no,
                reason: e.to_string(),
            })?;
        let sample = record_to_sample(rec, &root)
            .map_err(|reason| DataError::MalformedRecord { line_no, reason })?;
        if !seen.insert(sample.sample_id.clone()) {
            return Err(DataError::DuplicateSampleId(sample.sample_id));
        }
        if !opts.skip_frame_check {
            if let Some(f) = sample.frames.iter().find(|f| !f.source_path.is_file()) {
                return Err(DataError::MissingFrameFile(f.source_path.clone()));
            }
        }
        samples.push(sample);
    }
    Ok(DatasetManifest {
        samples,
        source_uri: path.display().to_string(),
        schema_version: SCHEMA_VERSION,
    })
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for sample in &manifest.samples {
        let line = serde_json::to_string(&sample_to_record(sample)).expect("manifest record serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingPolicy {
    Uniform(usize),
    All,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy::Uniform(DEFAULT_FRAME_BUDGET)
    }
}

/// Floor-spaced positions `floor(k * (count - 1) / (n - 1))` for `k in 0..n`.
/// Endpoints are always included when `n >= 2`; `n >= count` selects everything.
pub fn uniform_indices(count: usize, n: usize) -> Vec<usize> {
    if count == 0 || n == 0 {
        return Vec::new();
    }
    if n >= count {
        return (0..count).collect();
    }
    if n == 1 {
        return vec![0];
    }
    (0..n).map(|k| k * (count - 1) / (n - 1)).collect()
}

/// A sampled sample plus, for every new frame position, the index it had before sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledFrames {
    pub sample: Sample,
    pub original_indices: Vec<usize>,
}

pub fn sample_frames(sample: &Sample, policy: SamplingPolicy) -> Sample {
    sample_frames_mapped(sample, policy).sample
}

pub fn sample_frames_mapped(sample: &Sample, policy: SamplingPolicy) -> SampledFrames {
    let keep = match policy {
        SamplingPolicy::All => (0..sample.frames.len()).collect(),
        SamplingPolicy::Uniform(n) => uniform_indices(sample.frames.len(), n.max(1)),
    };
    let frames = keep
        .iter()
        .enumerate()
        .map(|(new, &old)| FrameRef {
            index: new,
            ..sample.frames[old].clone()
        })
        .collect();
    let pseudo_keyframes = sample.pseudo_keyframes.as_ref().map(|keys| {
        keep.iter()
            .enumerate()
            .filter(|(_, old)| keys.contains(old))
            .map(|(new, _)| new)
            .collect()
    });
    let original_indices = keep
        .iter()
        .map(|&pos| sample.frames[pos].index)
        .collect();
    SampledFrames {
        sample: Sample {
            frames,
            pseudo_keyframes,
            ..sample.clone()
        },
        original_indices,
    }
}

/// Case-folded, whitespace-collapsed question text used as part of the dedup key.
pub fn normalize_question(q: &str) -> String {
    q.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn dedup_key(sample: &Sample) -> (String, String, Vec<String>) {
    let mut answers = sample.gold_answers.clone();
    answers.sort();
    (
        sample.video_id.clone(),
        normalize_question(&sample.question),
        answers,
    )
}

/// Drops samples whose (video, normalized question, sorted answers) triple was already seen.
pub fn dedupe_samples(samples: Vec<Sample>) -> Vec<Sample> {
    let mut seen = HashSet::new();
    samples
        .into_iter()
        .filter(|s| seen.insert(dedup_key(s)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample(id: &str, n: usize) -> Sample {
        Sample {
            sample_id: id.into(),
            video_id: "v".into(),
            frames: (0..n)
                .map(|i| FrameRef {
                    index: i,
                    source_path: PathBuf::from(format!("f{i}.jpg")),
                    timestamp_s: Some(i as f64 * 0.5),
                })
                .collect(),
            question: "what is written?".into(),
            gold_answers: vec!["x".into()],
            pseudo_keyframes: None,
            split_tag: "t1s1-val".into(),
        }
    }

    fn write_lines(dir: &Path, lines: &[String]) -> PathBuf {
        let p = dir.join("m.jsonl");
        fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    fn line(id: &str, frames: &str) -> String {
        format!(
            r#"{{"sample_id":"{id}","video_id":"v1","question":"q?","answers":["a"],"frames":{frames}}}"#
        )
    }

    #[test]
    fn loads_three_samples() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.jpg"), b"x").unwrap();
        let frames = r#"[{"index":0,"path":"a.jpg","t":0.0}]"#;
        let p = write_lines(
            dir.path(),
            &[line("q001", frames), line("q002", frames), line("q003", frames)],
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.samples.len(), 3);
        assert_eq!(m.samples[0].frames[0].source_path, dir.path().join("a.jpg"));
    }

    #[test]
    fn duplicate_sample_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.jpg"), b"x").unwrap();
        let frames = r#"[{"index":0,"path":"a.jpg"}]"#;
        let p = write_lines(dir.path(), &[line("q001", frames), line("q001", frames)]);
        match load_manifest(&p) {
            Err(DataError::DuplicateSampleId(id)) => assert_eq!(id, "q001"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_frames_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(dir.path(), &[line("q001", "[]")]);
        match load_manifest(&p) {
            Err(DataError::MalformedRecord { line_no, reason }) => {
                assert_eq!(line_no, 1);
                assert_eq!(reason, "empty frames");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_frame_file_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(dir.path(), &[line("q001", r#"[{"index":0,"path":"nope.jpg"}]"#)]);
        assert!(matches!(load_manifest(&p), Err(DataError::MissingFrameFile(_))));
        let opts = LoadOptions {
            skip_frame_check: true,
            ..Default::default()
        };
        assert!(load_manifest_with(&p, &opts).is_ok());
    }

    #[test]
    fn keyframes_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let rec = r#"{"sample_id":"a","video_id":"v","question":"q","answers":["x"],"frames":[{"index":0,"path":"a"}],"keyframes":[3]}"#;
        let p = write_lines(dir.path(), &[rec.to_string()]);
        let opts = LoadOptions {
            skip_frame_check: true,
            ..Default::default()
        };
        assert!(matches!(
            load_manifest_with(&p, &opts),
            Err(DataError::MalformedRecord { .. })
        ));
    }

    #[test]
    fn uniform_four_of_ten() {
        let s = sample_frames_mapped(&sample("a", 10), SamplingPolicy::Uniform(4));
        assert_eq!(s.original_indices, vec![0, 3, 6, 9]);
        let paths: Vec<_> = s.sample.frames.iter().map(|f| f.source_path.clone()).collect();
        assert_eq!(paths[1], PathBuf::from("f3.jpg"));
        assert_eq!(
            s.sample.frames.iter().map(|f| f.index).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
    }

    #[test]
    fn budget_larger_than_count_is_identity() {
        let s = sample("a", 5);
        assert_eq!(sample_frames(&s, SamplingPolicy::Uniform(8)), s);
        let one = sample("b", 1);
        assert_eq!(sample_frames(&one, SamplingPolicy::Uniform(1)), one);
    }

    #[test]
    fn keyframes_remapped_and_dropped() {
        let mut s = sample("a", 10);
        s.pseudo_keyframes = Some([3, 4, 9].into_iter().collect());
        let out = sample_frames(&s, SamplingPolicy::Uniform(4));
        assert_eq!(out.pseudo_keyframes, Some([1, 3].into_iter().collect()));
    }

    #[test]
    fn dedupe_drops_same_triple() {
        let a = sample("a", 2);
        let mut b = sample("b", 2);
        b.question = "  What IS   written? ".into();
        let mut c = sample("c", 2);
        c.question = "another question".into();
        let out = dedupe_samples(vec![a, b, c]);
        assert_eq!(
            out.iter().map(|s| s.sample_id.as_str()).collect::<Vec<_>>(),
            vec!["a", "c"]
        );
    }
}
