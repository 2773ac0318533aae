//! Three-part response reward: format + action type + action value.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::action::{find_action_block, parse_action, validate_format, Action, ResponseTags, ValueClass};

/// F1 threshold above which a textual value is counted as correct.
pub const TEXT_F1_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    #[serde(rename = "type")]
    pub type_: f64,
    pub value: f64,
    pub total: f64,
}

pub fn format_reward(text: &str, tags: &ResponseTags) -> f64 {
    if validate_format(text, tags) {
        1.0
    } else {
        0.0
    }
}

pub fn type_reward(pred: &Action, gt: &Action) -> f64 {
    if pred.kind() == gt.kind() {
        1.0
    } else {
        0.0
    }
}

/// Bag-of-tokens F1 over lowercased whitespace tokens.
pub fn token_f1(pred: &str, gt: &str) -> f64 {
    let pred: Vec<String> = pred.split_whitespace().map(str::to_lowercase).collect();
    let gt: Vec<String> = gt.split_whitespace().map(str::to_lowercase).collect();
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Value reward, gated on the action kinds matching. Point rewards are
/// `max(0, 1 - d)` with `d` the distance between normalized points.
pub fn value_reward(pred: &Action, gt: &Action) -> f64 {
    if pred.kind() != gt.kind() {
        return 0.0;
    }
    match gt.kind().value_class() {
        ValueClass::None => 1.0,
        ValueClass::Text => {
            let (p, g) = (pred.text().unwrap_or_default(), gt.text().unwrap_or_default());
            if token_f1(p, g) > TEXT_F1_THRESHOLD {
                1.0
            } else {
                0.0
            }
        }
        ValueClass::Direction => {
            if pred == gt {
                1.0
            } else {
                0.0
            }
        }
        ValueClass::Point => match (pred.point(), gt.point()) {
            (Some(p), Some(g)) => (1.0 - p.distance(&g)).max(0.0),
            _ => 0.0,
        },
    }
}

pub fn total_reward(response: &str, gt: &Action, tags: &ResponseTags) -> RewardBreakdown {
    let format = format_reward(response, tags);
    let parsed = find_action_block(response, tags).and_then(|body| parse_action(body).ok());
    let (type_, value) = match parsed {
        Some(pred) => (type_reward(&pred, gt), value_reward(&pred, gt)),
        None => (0.0, 0.0),
    };
    RewardBreakdown {
        format,
        type_,
        value,
        total: format + type_ + value,
    }
}

/// One line of the batch scoring input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub response: String,
    /// Ground-truth action in canonical text form.
    pub gt: String,
}

/// Scores a line-delimited file of `{response, gt}` records, one breakdown
/// per output line.
pub fn score_records(
    input: &std::path::Path,
    output: &std::path::Path,
    tags: &ResponseTags,
) -> crate::Result<usize> {
    use std::io::{BufRead, BufWriter, Write};

    let file = std::fs::File::open(input).map_err(|e| crate::Error::io(input, e))?;
    let out = std::fs::File::create(output).map_err(|e| crate::Error::io(output, e))?;
    let mut out = BufWriter::new(out);
    let mut n = 0;
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| crate::Error::io(input, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record_err = |message: String| crate::Error::Record {
            path: input.to_path_buf(),
            line: i + 1,
            message,
        };
        let req: ScoreRequest = serde_json::from_str(&line).map_err(|e| record_err(e.to_string()))?;
        let gt = parse_action(&req.gt).map_err(|e| record_err(e.to_string()))?;
        let breakdown = total_reward(&req.response, &gt, tags);
        let json = serde_json::to_string(&breakdown).expect("breakdown serializes");
        writeln!(out, "{json}").map_err(|e| crate::Error::io(output, e))?;
        n += 1;
    }
    out.flush().map_err(|e| crate::Error::io(output, e))?;
    Ok(n)
}
