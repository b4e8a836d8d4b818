//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use vtagent_core::backend::{BackendError, FnBackend, GenerationRequest, Part, Role};
use vtagent_core::data::{write_manifest, DatasetManifest, FrameRef, Sample, SCHEMA_VERSION};

pub fn select(ids: &[usize]) -> String {
    let ids: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
    format!(
        "<reasoning>the sign is visible there</reasoning><action>select key frame: [{}]</action>",
        ids.join(", ")
    )
}

pub fn answer(text: &str) -> String {
    format!("<reasoning>reading the text</reasoning><action>answer: {text}</action>")
}

pub fn gold_for(i: usize) -> String {
    format!("store {i}")
}

/// `n` samples with `frames` frames each. Frame files are written under `dir`
/// so the manifest passes the existence check. The text sits on frame 2.
pub fn synthetic(dir: &Path, n: usize, frames: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let frames = (0..frames)
                .map(|f| {
                    let path = dir.join(format!("v{i}_f{f}.jpg"));
                    fs::write(&path, [0xff, 0xd8, i as u8, f as u8]).unwrap();
                    FrameRef {
                        index: f,
                        source_path: path,
                        timestamp_s: Some(f as f64),
                    }
                })
                .collect();
            Sample {
                sample_id: format!("s{i:03}"),
                video_id: format!("v{i}"),
                frames,
                question: format!("What is the name on sign number {i}?"),
                gold_answers: vec![gold_for(i)],
                pseudo_keyframes: Some(BTreeSet::from([2])),
                split_tag: "val".into(),
            }
        })
        .collect()
}

pub fn write_synthetic(dir: &Path, n: usize, frames: usize) -> (PathBuf, Vec<Sample>) {
    let samples = synthetic(dir, n, frames);
    let path = dir.join("manifest.jsonl");
    write_manifest(
        &DatasetManifest {
            samples: samples.clone(),
            source_uri: "synthetic".into(),
            schema_version: SCHEMA_VERSION,
        },
        &path,
    )
    .unwrap();
    (path, samples)
}

pub fn request_text(req: &GenerationRequest) -> String {
    req.messages
        .iter()
        .flat_map(|m| m.parts.iter())
        .filter_map(|p| match p {
            Part::Text { text } => Some(text.as_str()),
            Part::Image { .. } => None,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn is_answer_turn(req: &GenerationRequest) -> bool {
    req.messages.iter().any(|m| m.role == Role::Assistant)
}

/// Stateless responder that always selects frame 2 and then answers with the
/// gold answer of whichever question it is asked, so results do not depend on
/// call order.
pub fn oracle_backend(samples: &[Sample]) -> FnBackend<impl Fn(&GenerationRequest) -> Result<String, BackendError>> {
    let golds: HashMap<String, String> = samples
        .iter()
        .map(|s| (s.question.clone(), s.gold_answers[0].clone()))
        .collect();
    FnBackend::new("oracle", move |req: &GenerationRequest| {
        if !is_answer_turn(req) {
            return Ok(select(&[2]));
        }
        let text = request_text(req);
        let gold = golds
            .iter()
            .find(|(q, _)| text.contains(q.as_str()))
            .map(|(_, a)| a.clone())
            .unwrap_or_default();
        Ok(answer(&gold))
    })
}
