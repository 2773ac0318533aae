//! Layer-wise token-drop sweep.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::env::Episode;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{DropSpec, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropMode {
    /// History action tokens.
    Actions,
    /// History observation tokens.
    Images,
    Both,
}

impl DropMode {
    pub const ALL: [DropMode; 3] = [DropMode::Actions, DropMode::Images, DropMode::Both];

    pub fn name(self) -> &'static str {
        match self {
            DropMode::Actions => "actions",
            DropMode::Images => "images",
            DropMode::Both => "both",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|m| m.name() == s)
    }

    pub fn spec(self, k: usize) -> DropSpec {
        match self {
            DropMode::Actions => DropSpec::actions(k),
            DropMode::Images => DropSpec::images(k),
            DropMode::Both => DropSpec::both(k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub mode: DropMode,
    pub sr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    /// Step SR without any drop.
    pub baseline_sr: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// `k,mode,sr` with the no-drop reference first (`k` = `-`, mode `none`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,mode,sr\n");
        writeln!(out, "-,none,{}", self.baseline_sr).expect("write to string");
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.k, r.mode.name(), r.sr).expect("write to string");
        }
        out
    }

    /// One gnuplot data block per mode (`k sr` columns), blocks separated by
    /// two blank lines so they can be addressed with `index`. The no-drop
    /// reference is the last block.
    pub fn to_gnuplot(&self) -> String {
        let mut out = String::new();
        let mut modes: Vec<DropMode> = Vec::new();
        for r in &self.rows {
            if !modes.contains(&r.mode) {
                modes.push(r.mode);
            }
        }
        for m in &modes {
            writeln!(out, "# mode {}", m.name()).expect("write to string");
            for r in self.rows.iter().filter(|r| r.mode == *m) {
                writeln!(out, "{} {}", r.k, r.sr).expect("write to string");
            }
            out.push_str("\n\n");
        }
        writeln!(out, "# mode none").expect("write to string");
        let ks: Vec<usize> = self.rows.iter().map(|r| r.k).collect();
        for k in [ks.iter().min(), ks.iter().max()].into_iter().flatten() {
            writeln!(out, "{} {}", k, self.baseline_sr).expect("write to string");
        }
        out
    }
}

/// Evaluates every `(k, mode)` pair with greedy decoding and records step SR.
pub fn layer_drop_sweep(
    params: &ModelParams,
    agent: &Agent,
    episodes: &[Episode],
    ks: &[usize],
    modes: &[DropMode],
) -> Result<SweepTable> {
    let layers = params.dims.layers;
    if let Some(k) = ks.iter().find(|k| **k > layers) {
        return Err(Error::ConfigValidation(format!("drop layer {k} outside 0..={layers}")));
    }
    let baseline_sr = evaluate(params, agent, episodes, DropSpec::none())?.step_sr;
    let mut rows = Vec::with_capacity(ks.len() * modes.len());
    for &k in ks {
        for &mode in modes {
            let sr = evaluate(params, agent, episodes, mode.spec(k))?.step_sr;
            rows.push(SweepRow { k, mode, sr });
        }
    }
    Ok(SweepTable { baseline_sr, rows })
}
