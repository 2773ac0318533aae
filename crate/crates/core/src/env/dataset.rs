//! Episode datasets stored as JSON lines: a manifest line followed by one
//! episode per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{generate_episode, Episode, GridSpec, TaskKind};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, stream_key, Label};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskCounts {
    #[serde(rename = "LOCAL")]
    pub local: usize,
    #[serde(rename = "RECALL_1")]
    pub recall_1: usize,
    #[serde(rename = "RECALL_2")]
    pub recall_2: usize,
    #[serde(rename = "COPY_2")]
    pub copy_2: usize,
}

impl TaskCounts {
    pub fn total(&self) -> usize {
        self.local + self.recall_1 + self.recall_2 + self.copy_2
    }

    pub fn get(&self, kind: TaskKind) -> usize {
        match kind {
            TaskKind::Local => self.local,
            TaskKind::Recall1 => self.recall_1,
            TaskKind::Recall2 => self.recall_2,
            TaskKind::Copy2 => self.copy_2,
        }
    }

    /// Splits `total` by the given fractions (LOCAL, RECALL_1, RECALL_2,
    /// COPY_2) using largest remainders so the counts sum to `total`.
    pub fn from_mix(total: usize, mix: [f64; 4]) -> Result<Self> {
        let sum: f64 = mix.iter().sum();
        if mix.iter().any(|m| !m.is_finite() || *m < 0.0) || sum <= 0.0 {
            return Err(Error::ConfigValidation(format!("invalid task mix {mix:?}")));
        }
        let exact: Vec<f64> = mix.iter().map(|m| m / sum * total as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let missing = total - counts.iter().sum::<usize>();
        for &i in order.iter().take(missing) {
            counts[i] += 1;
        }
        Ok(TaskCounts {
            local: counts[0],
            recall_1: counts[1],
            recall_2: counts[2],
            copy_2: counts[3],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub counts: TaskCounts,
    pub grid: GridSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub episodes: Vec<Episode>,
}

pub fn generate_dataset(seed: u64, counts: TaskCounts, spec: &GridSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut kinds: Vec<TaskKind> = TaskKind::ALL
        .iter()
        .flat_map(|&k| std::iter::repeat_n(k, counts.get(k)))
        .collect();
    kinds.shuffle(&mut derive_rng(seed, &[Label::Str("dataset-order")]));
    let episodes = kinds
        .into_iter()
        .enumerate()
        .map(|(i, kind)| {
            let ep_seed = stream_key(seed, &[Label::Str("episode"), Label::Int(i as u64)]);
            let mut ep = generate_episode(ep_seed, kind, spec)?;
            ep.id = i as u64;
            Ok(ep)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: DatasetManifest {
            schema_version: DATASET_SCHEMA_VERSION,
            seed,
            counts,
            grid: *spec,
        },
        episodes,
    })
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut out, &dataset.manifest).map_err(|e| Error::io(path, e.into()))?;
    out.write_all(b"\n").map_err(io)?;
    for ep in &dataset.episodes {
        serde_json::to_writer(&mut out, ep).map_err(|e| Error::io(path, e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let record_err = |line: usize, message: String| Error::Record {
        path: path.to_path_buf(),
        line,
        message,
    };
    let manifest: DatasetManifest = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| record_err(1, e.to_string()))?
        }
        None => return Err(record_err(1, "empty dataset file".into())),
    };
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(record_err(
            1,
            format!("unsupported schema version {}", manifest.schema_version),
        ));
    }
    let mut episodes = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line).map_err(|e| record_err(i + 1, e.to_string()))?;
        let cells = manifest.grid.cells();
        if ep.screens.iter().any(|s| s.cells.len() != cells) || ep.screens.len() != ep.oracle_actions.len() {
            return Err(record_err(i + 1, "episode does not match the manifest grid".into()));
        }
        episodes.push(ep);
    }
    Ok(Dataset { manifest, episodes })
}
