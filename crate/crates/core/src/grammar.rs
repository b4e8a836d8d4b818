//! Tagged turn format exchanged with the model.
//!
//! A turn is `<reasoning>…</reasoning>` followed by `<action>…</action>`. The
//! action payload is either `select key frame: [i, j, …]` or `answer: text`.
//! Parsing is lenient about surrounding prose, tag case, and the variant where
//! a block is closed by repeating its opening tag.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub const DEFAULT_KEYFRAME_CAP: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GrammarError {
    #[error("no <action> block in model output")]
    MissingActionBlock { raw: String },
    #[error("unparsable action payload {payload:?}")]
    UnparsableAction { payload: String, raw: String },
    #[error("no valid keyframe ids survived validation")]
    EmptySelection { dropped: Vec<DroppedId> },
}

impl GrammarError {
    pub fn raw(&self) -> Option<&str> {
        match self {
            GrammarError::MissingActionBlock { raw } | GrammarError::UnparsableAction { raw, .. } => {
                Some(raw)
            }
            GrammarError::EmptySelection { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    SelectKeyframes { frame_ids: Vec<i64> },
    Answer { text: String },
}

impl Action {
    pub fn payload(&self) -> String {
        match self {
            Action::SelectKeyframes { frame_ids } => {
                let ids: Vec<String> = frame_ids.iter().map(i64::to_string).collect();
                format!("select key frame: [{}]", ids.join(", "))
            }
            Action::Answer { text } => format!("answer: {text}"),
        }
    }

    pub fn is_select(&self) -> bool {
        matches!(self, Action::SelectKeyframes { .. })
    }

    pub fn answer_text(&self) -> Option<&str> {
        match self {
            Action::Answer { text } => Some(text),
            Action::SelectKeyframes { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    /// Trimmed content of the reasoning block; empty when the block is absent.
    pub reasoning: String,
    pub action: Action,
    /// Verbatim model output the turn was parsed from.
    pub raw: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    Duplicate,
    OutOfRange,
    OverCap,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropReason::Duplicate => "duplicate",
            DropReason::OutOfRange => "out-of-range",
            DropReason::OverCap => "over-cap",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedId {
    pub raw_id: i64,
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KeyframeSet {
    pub ids: Vec<usize>,
    pub dropped: Vec<DroppedId>,
}

impl KeyframeSet {
    pub fn from_ids(ids: Vec<usize>) -> Self {
        KeyframeSet {
            ids,
            dropped: Vec::new(),
        }
    }
}

/// Locates the first block for `tag` in `lower` (an ASCII-lowercased copy of
/// the text, so byte offsets match the original). Returns the byte range of the
/// content and the offset just past the closer.
fn find_block(lower: &str, tag: &str, from: usize) -> Option<(usize, usize, usize)> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = lower[from..].find(&open)? + from;
    let content_start = start + open.len();
    let rest = &lower[content_start..];
    // The nearest of `</tag>` and a repeated `<tag>` closes the block.
    let candidates = [
        rest.find(&close).map(|p| (p, close.len())),
        rest.find(&open).map(|p| (p, open.len())),
    ];
    let (pos, len) = candidates.into_iter().flatten().min_by_key(|(p, _)| *p)?;
    Some((content_start, content_start + pos, content_start + pos + len))
}

pub fn parse_turn(text: &str) -> Result<Turn, GrammarError> {
    let lower = text.to_ascii_lowercase();
    let (reasoning, search_from) = match find_block(&lower, "reasoning", 0) {
        Some((s, e, end)) => (text[s..e].trim().to_string(), end),
        None => (String::new(), 0),
    };
    let action_block = find_block(&lower, "action", search_from).or_else(|| {
        if search_from > 0 {
            find_block(&lower, "action", 0)
        } else {
            None
        }
    });
    let Some((s, e, _)) = action_block else {
        return Err(GrammarError::MissingActionBlock { raw: text.into() });
    };
    let action = parse_action(&text[s..e]).map_err(|err| match err {
        GrammarError::UnparsableAction { payload, .. } => GrammarError::UnparsableAction {
            payload,
            raw: text.into(),
        },
        other => other,
    })?;
    Ok(Turn {
        reasoning,
        action,
        raw: text.into(),
    })
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let head = s.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| &s[prefix.len()..])
}

fn parse_frame_id(tok: &str) -> Option<i64> {
    let tok = tok.trim();
    let digits = tok
        .strip_prefix('F')
        .or_else(|| tok.strip_prefix('f'))
        .unwrap_or(tok)
        .trim();
    digits.parse().ok()
}

pub fn parse_action(payload: &str) -> Result<Action, GrammarError> {
    let unparsable = || GrammarError::UnparsableAction {
        payload: payload.into(),
        raw: payload.into(),
    };
    let body = payload.trim();
    let select_rest = strip_prefix_ci(body, "select key frames:")
        .or_else(|| strip_prefix_ci(body, "select key frame:"));
    if let Some(rest) = select_rest {
        let rest = rest.trim_start();
        let inner = rest.strip_prefix('[').ok_or_else(unparsable)?;
        let close = inner.find(']').ok_or_else(unparsable)?;
        let list = &inner[..close];
        if list.trim().is_empty() {
            return Err(unparsable());
        }
        let frame_ids = list
            .split(',')
            .map(parse_frame_id)
            .collect::<Option<Vec<_>>>()
            .ok_or_else(unparsable)?;
        return Ok(Action::SelectKeyframes { frame_ids });
    }
    if let Some(rest) = strip_prefix_ci(body, "answer:") {
        let text = rest.trim();
        if text.is_empty() {
            return Err(unparsable());
        }
        return Ok(Action::Answer { text: text.into() });
    }
    Err(unparsable())
}

/// Filters raw ids against the presented frames: drops out-of-range ids and
/// repeats, then keeps at most `cap` in order of first mention.
pub fn validate_keyframes(
    frame_ids: &[i64],
    frame_count: usize,
    cap: usize,
) -> Result<KeyframeSet, GrammarError> {
    let mut seen = HashSet::new();
    let mut set = KeyframeSet::default();
    for &raw_id in frame_ids {
        let reason = if raw_id < 0 || raw_id as u64 >= frame_count as u64 {
            Some(DropReason::OutOfRange)
        } else if !seen.insert(raw_id) {
            Some(DropReason::Duplicate)
        } else if set.ids.len() >= cap {
            Some(DropReason::OverCap)
        } else {
            None
        };
        match reason {
            Some(reason) => set.dropped.push(DroppedId { raw_id, reason }),
            None => set.ids.push(raw_id as usize),
        }
    }
    if set.ids.is_empty() {
        return Err(GrammarError::EmptySelection {
            dropped: set.dropped,
        });
    }
    Ok(set)
}

pub fn render_turn(turn: &Turn) -> String {
    render_parts(&turn.reasoning, &turn.action)
}

pub fn render_parts(reasoning: &str, action: &Action) -> String {
    format!(
        "<reasoning>{reasoning}</reasoning>\n<action>{}</action>",
        action.payload()
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_select_turn() {
        let t = parse_turn(
            "<reasoning>frames 3 and 7 show the sign</reasoning><action>select key frame: [3, 7]</action>",
        )
        .unwrap();
        assert_eq!(t.reasoning, "frames 3 and 7 show the sign");
        assert_eq!(t.action, Action::SelectKeyframes { frame_ids: vec![3, 7] });
    }

    #[test]
    fn reasoning_is_optional() {
        let t = parse_turn("<action>answer: 42 km</action>").unwrap();
        assert_eq!(t.reasoning, "");
        assert_eq!(t.action, Action::Answer { text: "42 km".into() });
    }

    #[test]
    fn missing_action_block() {
        let err = parse_turn("final thoughts only, no tags").unwrap_err();
        assert!(matches!(err, GrammarError::MissingActionBlock { .. }));
        assert_eq!(err.raw(), Some("final thoughts only, no tags"));
    }

    #[test]
    fn repeated_opening_tag_closes_block() {
        let t = parse_turn(
            "Sure.\n<REASONING> the shop name is on frame 2 <reasoning>\n<Action>select key frames: [F2]<action> trailing",
        )
        .unwrap();
        assert_eq!(t.reasoning, "the shop name is on frame 2");
        assert_eq!(t.action, Action::SelectKeyframes { frame_ids: vec![2] });
    }

    #[test]
    fn first_action_block_wins() {
        let t = parse_turn("<action>answer: a</action><action>answer: b</action>").unwrap();
        assert_eq!(t.action.answer_text(), Some("a"));
    }

    #[test]
    fn action_payload_variants() {
        assert_eq!(
            parse_action("select key frame: [F0, F5]").unwrap(),
            Action::SelectKeyframes { frame_ids: vec![0, 5] }
        );
        assert_eq!(
            parse_action("answer:  Starbucks ").unwrap(),
            Action::Answer { text: "Starbucks".into() }
        );
        assert_eq!(
            parse_action("  SELECT KEY FRAMES:[ f1 ,2 ]").unwrap(),
            Action::SelectKeyframes { frame_ids: vec![1, 2] }
        );
        for bad in [
            "select key frame: []",
            "select key frame: [1, 2",
            "select key frame: 1, 2",
            "select key frame: [1,,2]",
            "answer:   ",
            "zoom: [1]",
            "",
        ] {
            assert!(
                matches!(parse_action(bad), Err(GrammarError::UnparsableAction { .. })),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn validate_drops_and_records() {
        let set = validate_keyframes(&[3, 3, 99, 1], 10, 8).unwrap();
        assert_eq!(set.ids, vec![3, 1]);
        assert_eq!(
            set.dropped,
            vec![
                DroppedId { raw_id: 3, reason: DropReason::Duplicate },
                DroppedId { raw_id: 99, reason: DropReason::OutOfRange },
            ]
        );
    }

    #[test]
    fn validate_caps() {
        let ids: Vec<i64> = (0..16).collect();
        let set = validate_keyframes(&ids, 16, 8).unwrap();
        assert_eq!(set.ids, (0..8).collect::<Vec<_>>());
        assert_eq!(set.dropped.len(), 8);
    }

    #[test]
    fn validate_empty_selection() {
        assert!(matches!(
            validate_keyframes(&[99], 10, 8),
            Err(GrammarError::EmptySelection { .. })
        ));
        assert!(matches!(
            validate_keyframes(&[-1], 10, 8),
            Err(GrammarError::EmptySelection { .. })
        ));
    }

    #[test]
    fn canonical_rendering() {
        let t = Turn {
            reasoning: "r".into(),
            action: Action::SelectKeyframes { frame_ids: vec![2] },
            raw: String::new(),
        };
        assert_eq!(
            render_turn(&t),
            "<reasoning>r</reasoning>\n<action>select key frame: [2]</action>"
        );
        let t = Turn {
            reasoning: String::new(),
            action: Action::Answer { text: "x".into() },
            raw: String::new(),
        };
        assert_eq!(render_turn(&t), "<reasoning></reasoning>\n<action>answer: x</action>");
    }
}
