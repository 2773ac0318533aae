//! GridGUI: a scripted multi-step GUI-navigation environment.
//!
//! Every step shows a `width × height` grid of cells plus an optional banner
//! of glyphs. An episode is a fixed screen sequence with one correct action
//! per step. Four task kinds differ in how much history the correct action
//! needs:
//!
//! * `LOCAL`: every step is solvable from the current screen.
//! * `RECALL_1`: one step asks to click the button whose colour was shown in
//!   the banner one screen earlier.
//! * `RECALL_2`: same, with the cue two screens earlier.
//! * `COPY_2`: one step asks to type the glyph code shown two screens earlier.
//!
//! Recall screens always contain a decoy button in the instruction colour, so
//! a policy that ignores history picks the wrong cell.

mod dataset;

pub use dataset::{generate_dataset, read_dataset, write_dataset, Dataset, DatasetManifest, TaskCounts};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::{Action, Direction, Point};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, Label};

/// Cell widget kinds.
pub const KIND_BLANK: u8 = 0;
pub const KIND_BUTTON: u8 = 1;
pub const KIND_TEXT: u8 = 2;
pub const KIND_ICON: u8 = 3;

/// Icon codes, stored in the colour field of `KIND_ICON` cells.
pub const ICON_BACK: u8 = 4;

pub const MAX_BANNER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub kinds: usize,
    pub colors: usize,
    pub glyphs: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            width: 6,
            height: 6,
            kinds: 4,
            colors: 6,
            glyphs: 16,
        }
    }
}

impl GridSpec {
    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::ConfigValidation(m.to_string()));
        if self.width < 3 || self.height < 3 {
            return fail("grid width and height must be >= 3");
        }
        if self.kinds < 4 {
            return fail("kinds must be >= 4 (blank, button, text, icon)");
        }
        if self.colors < 5 {
            return fail("colors must be >= 5 (icon codes share the colour field)");
        }
        if self.glyphs < self.colors + 6 {
            return fail("glyphs must be >= colors + 6 (colour cues, >= 3 content glyphs, 3 markers)");
        }
        Ok(())
    }

    /// Banner marker: click the button matching a remembered colour.
    pub fn query_click_glyph(&self) -> u8 {
        (self.glyphs - 3) as u8
    }

    /// Banner marker: type the remembered glyph code.
    pub fn query_type_glyph(&self) -> u8 {
        (self.glyphs - 2) as u8
    }

    /// Banner marker: task complete.
    pub fn done_glyph(&self) -> u8 {
        (self.glyphs - 1) as u8
    }

    /// Glyphs used for copyable codes and widget labels.
    pub fn content_glyphs(&self) -> std::ops::Range<u8> {
        self.colors as u8..self.query_click_glyph()
    }

    /// Centre of a cell in normalized coordinates, rounded to the 4 decimals
    /// of the canonical action text so oracle actions survive serialization.
    pub fn cell_center(&self, row: usize, col: usize) -> Point {
        let round4 = |v: f64| (v * 1e4).round() / 1e4;
        Point::new(
            round4((col as f64 + 0.5) / self.width as f64),
            round4((row as f64 + 0.5) / self.height as f64),
        )
        .expect("finite cell centre")
    }

    /// Cell containing a normalized point.
    pub fn cell_of(&self, p: &Point) -> (usize, usize) {
        let col = ((p.x() * self.width as f64).floor() as usize).min(self.width - 1);
        let row = ((p.y() * self.height as f64).floor() as usize).min(self.height - 1);
        (row, col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(from = "[u8; 3]", into = "[u8; 3]")]
pub struct Cell {
    pub kind: u8,
    pub color: u8,
    pub glyph: u8,
}

impl From<[u8; 3]> for Cell {
    fn from(v: [u8; 3]) -> Self {
        Cell {
            kind: v[0],
            color: v[1],
            glyph: v[2],
        }
    }
}

impl From<Cell> for [u8; 3] {
    fn from(c: Cell) -> Self {
        [c.kind, c.color, c.glyph]
    }
}

/// One observation: row-major cells and an optional banner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Screen {
    pub cells: Vec<Cell>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub banner: Vec<u8>,
}

impl Screen {
    fn blank(spec: &GridSpec) -> Self {
        Screen {
            cells: vec![Cell::default(); spec.cells()],
            banner: Vec::new(),
        }
    }

    pub fn cell(&self, spec: &GridSpec, row: usize, col: usize) -> Cell {
        self.cells[row * spec.width + col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "LOCAL")]
    Local,
    #[serde(rename = "RECALL_1")]
    Recall1,
    #[serde(rename = "RECALL_2")]
    Recall2,
    #[serde(rename = "COPY_2")]
    Copy2,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Local, TaskKind::Recall1, TaskKind::Recall2, TaskKind::Copy2];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Local => "LOCAL",
            TaskKind::Recall1 => "RECALL_1",
            TaskKind::Recall2 => "RECALL_2",
            TaskKind::Copy2 => "COPY_2",
        }
    }

    /// Instruction word naming the task.
    pub fn word(self) -> &'static str {
        match self {
            TaskKind::Local => "local",
            TaskKind::Recall1 => "recall_1",
            TaskKind::Recall2 => "recall_2",
            TaskKind::Copy2 => "copy_2",
        }
    }

    /// How many screens back the cue sits, if any.
    pub fn cue_depth(self) -> Option<usize> {
        match self {
            TaskKind::Local => None,
            TaskKind::Recall1 => Some(1),
            TaskKind::Recall2 | TaskKind::Copy2 => Some(2),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        TaskKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::InvalidTaskKind(s.to_string()))
    }
}

pub fn color_word(color: u8) -> String {
    format!("color{color}")
}

pub fn glyph_word(glyph: u8) -> String {
    format!("g{glyph}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: u64,
    pub seed: u64,
    pub task_kind: TaskKind,
    pub instruction: String,
    pub screens: Vec<Screen>,
    pub oracle_actions: Vec<Action>,
    /// Step that needs history (recall/copy step), if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history_step: Option<usize>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.screens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.screens.is_empty()
    }

    pub fn oracle_action(&self, t: usize) -> Result<&Action> {
        self.oracle_actions.get(t).ok_or(Error::IndexOutOfRange {
            index: t,
            len: self.oracle_actions.len(),
        })
    }

    /// Context at step `t` with the most recent `min(t, window)` history pairs.
    pub fn step_context(&self, t: usize, window: usize) -> Result<StepContext> {
        if t >= self.len() {
            return Err(Error::IndexOutOfRange { index: t, len: self.len() });
        }
        let start = t.saturating_sub(window);
        let history = (start..t)
            .map(|s| (self.screens[s].clone(), self.oracle_actions[s].clone()))
            .collect();
        Ok(StepContext {
            instruction: self.instruction.clone(),
            current: self.screens[t].clone(),
            history,
            window,
        })
    }
}

pub fn oracle_action(episode: &Episode, t: usize) -> Result<Action> {
    episode.oracle_action(t).cloned()
}

pub fn step_context(episode: &Episode, t: usize, window: usize) -> Result<StepContext> {
    episode.step_context(t, window)
}

/// Input to the policy at one step: instruction, current screen, and the last
/// `window` (screen, action) pairs in chronological order.
#[derive(Debug, Clone, PartialEq)]
pub struct StepContext {
    pub instruction: String,
    pub current: Screen,
    pub history: Vec<(Screen, Action)>,
    pub window: usize,
}

impl StepContext {
    /// Same step with the history cut to the last `window` pairs.
    pub fn truncated(&self, window: usize) -> StepContext {
        let keep = self.history.len().min(window);
        StepContext {
            instruction: self.instruction.clone(),
            current: self.current.clone(),
            history: self.history[self.history.len() - keep..].to_vec(),
            window,
        }
    }
}

enum StepPlan {
    NavClick,
    NavScroll(Direction),
    NavBack,
    RecallClick(u8),
    CopyType(Vec<u8>),
    Done,
}

struct Builder<'a, R: Rng> {
    spec: &'a GridSpec,
    rng: &'a mut R,
    instr_color: u8,
    /// Glyphs that must not be used for widget labels.
    reserved: Vec<u8>,
}

impl<R: Rng> Builder<'_, R> {
    fn label_glyph(&mut self) -> u8 {
        let pool: Vec<u8> = self
            .spec
            .content_glyphs()
            .filter(|g| !self.reserved.contains(g))
            .collect();
        *pool.choose(self.rng).expect("content glyph pool is non-empty")
    }

    fn other_colors(&mut self, exclude: &[u8], n: usize) -> Vec<u8> {
        let mut pool: Vec<u8> = (0..self.spec.colors as u8).filter(|c| !exclude.contains(c)).collect();
        pool.shuffle(self.rng);
        pool.truncate(n);
        pool
    }

    /// Places buttons with the given colours on free cells; returns their cells.
    fn place_buttons(&mut self, screen: &mut Screen, free: &mut Vec<usize>, colors: &[u8]) -> Vec<usize> {
        colors
            .iter()
            .map(|&color| {
                let cell = free.pop().expect("enough free cells");
                let glyph = self.label_glyph();
                screen.cells[cell] = Cell {
                    kind: KIND_BUTTON,
                    color,
                    glyph,
                };
                cell
            })
            .collect()
    }

    fn place_decor(&mut self, screen: &mut Screen, free: &mut Vec<usize>) {
        let n = self.rng.gen_range(1..=3);
        for _ in 0..n {
            let Some(cell) = free.pop() else { break };
            let color = self.rng.gen_range(0..self.spec.colors as u8);
            let glyph = self.label_glyph();
            screen.cells[cell] = Cell {
                kind: KIND_TEXT,
                color,
                glyph,
            };
        }
    }

    fn shuffled_cells(&mut self, exclude: &[usize]) -> Vec<usize> {
        let mut cells: Vec<usize> = (0..self.spec.cells()).filter(|c| !exclude.contains(c)).collect();
        cells.shuffle(self.rng);
        cells
    }

    fn center_of(&self, cell: usize) -> Point {
        self.spec.cell_center(cell / self.spec.width, cell % self.spec.width)
    }

    fn build(&mut self, plan: &StepPlan) -> (Screen, Action) {
        let spec = *self.spec;
        let mut screen = Screen::blank(&spec);
        let ic = self.instr_color;
        match plan {
            StepPlan::NavClick => {
                let mut free = self.shuffled_cells(&[]);
                let nb = self.rng.gen_range(3..=5);
                let mut colors = vec![ic];
                colors.extend(self.other_colors(&[ic], nb - 1));
                let cells = self.place_buttons(&mut screen, &mut free, &colors);
                self.place_decor(&mut screen, &mut free);
                (screen, Action::Click(self.center_of(cells[0])))
            }
            StepPlan::NavScroll(dir) => {
                let (w, h) = (spec.width, spec.height);
                let icon = match dir {
                    Direction::Up => self.rng.gen_range(0..w),
                    Direction::Down => (h - 1) * w + self.rng.gen_range(0..w),
                    Direction::Left => self.rng.gen_range(0..h) * w,
                    Direction::Right => self.rng.gen_range(0..h) * w + w - 1,
                };
                screen.cells[icon] = Cell {
                    kind: KIND_ICON,
                    color: *dir as u8,
                    glyph: 0,
                };
                let mut free = self.shuffled_cells(&[icon]);
                let nb = self.rng.gen_range(2..=4);
                let colors = self.other_colors(&[ic], nb);
                self.place_buttons(&mut screen, &mut free, &colors);
                self.place_decor(&mut screen, &mut free);
                (screen, Action::Scroll(*dir))
            }
            StepPlan::NavBack => {
                let icon = self.rng.gen_range(0..spec.cells());
                screen.cells[icon] = Cell {
                    kind: KIND_ICON,
                    color: ICON_BACK,
                    glyph: 0,
                };
                let mut free = self.shuffled_cells(&[icon]);
                let nb = self.rng.gen_range(2..=4);
                let colors = self.other_colors(&[ic], nb);
                self.place_buttons(&mut screen, &mut free, &colors);
                self.place_decor(&mut screen, &mut free);
                (screen, Action::PressBack)
            }
            StepPlan::RecallClick(cue) => {
                screen.banner = vec![spec.query_click_glyph()];
                let mut free = self.shuffled_cells(&[]);
                let nb = self.rng.gen_range(3..=5);
                let mut colors = vec![*cue, ic];
                colors.extend(self.other_colors(&[*cue, ic], nb - 2));
                let cells = self.place_buttons(&mut screen, &mut free, &colors);
                self.place_decor(&mut screen, &mut free);
                (screen, Action::Click(self.center_of(cells[0])))
            }
            StepPlan::CopyType(code) => {
                screen.banner = vec![spec.query_type_glyph()];
                let mut free = self.shuffled_cells(&[]);
                let nb = self.rng.gen_range(2..=4);
                let mut colors = vec![ic];
                colors.extend(self.other_colors(&[ic], nb - 1));
                self.place_buttons(&mut screen, &mut free, &colors);
                self.place_decor(&mut screen, &mut free);
                let text = code.iter().map(|&g| glyph_word(g)).collect::<Vec<_>>().join(" ");
                (screen, Action::Type(text))
            }
            StepPlan::Done => {
                screen.banner = vec![spec.done_glyph()];
                let mut free = self.shuffled_cells(&[]);
                let nb = self.rng.gen_range(2..=4);
                let colors = self.other_colors(&[ic], nb);
                self.place_buttons(&mut screen, &mut free, &colors);
                self.place_decor(&mut screen, &mut free);
                (screen, Action::Finished)
            }
        }
    }
}

/// Generates one episode. Pure in `(seed, task_kind, spec)`.
pub fn generate_episode(seed: u64, task_kind: TaskKind, spec: &GridSpec) -> Result<Episode> {
    spec.validate()?;
    let mut rng = derive_rng(seed, &[Label::Str("episode"), Label::Str(task_kind.name())]);

    let len = match task_kind {
        TaskKind::Local | TaskKind::Recall1 => rng.gen_range(3..=6),
        TaskKind::Recall2 | TaskKind::Copy2 => rng.gen_range(4..=6),
    };
    let instr_color = rng.gen_range(0..spec.colors as u8);
    let history_step = task_kind.cue_depth().map(|depth| rng.gen_range(depth..=len - 2));

    // Cue shown in a banner `depth` screens before the history step.
    let (cue_banner, recall_plan, reserved) = match task_kind {
        TaskKind::Local => (Vec::new(), None, Vec::new()),
        TaskKind::Recall1 | TaskKind::Recall2 => {
            let cue = loop {
                let c = rng.gen_range(0..spec.colors as u8);
                if c != instr_color {
                    break c;
                }
            };
            (vec![cue], Some(StepPlan::RecallClick(cue)), Vec::new())
        }
        TaskKind::Copy2 => {
            let n = rng.gen_range(2..=3);
            let mut pool: Vec<u8> = spec.content_glyphs().collect();
            pool.shuffle(&mut rng);
            pool.truncate(n);
            (pool.clone(), Some(StepPlan::CopyType(pool.clone())), pool)
        }
    };
    let cue_step = history_step.zip(task_kind.cue_depth()).map(|(h, d)| h - d);

    let mut builder = Builder {
        spec,
        rng: &mut rng,
        instr_color,
        reserved,
    };
    let mut recall_plan = recall_plan;
    let mut screens = Vec::with_capacity(len);
    let mut actions = Vec::with_capacity(len);
    for t in 0..len {
        let plan = if t == len - 1 {
            StepPlan::Done
        } else if Some(t) == history_step {
            recall_plan.take().expect("one history step")
        } else {
            let roll: f64 = builder.rng.gen();
            if roll < 0.6 {
                StepPlan::NavClick
            } else if roll < 0.85 {
                StepPlan::NavScroll(*Direction::ALL.choose(builder.rng).expect("directions"))
            } else {
                StepPlan::NavBack
            }
        };
        let (mut screen, action) = builder.build(&plan);
        if Some(t) == cue_step {
            screen.banner = cue_banner.clone();
        }
        screens.push(screen);
        actions.push(action);
    }

    Ok(Episode {
        id: 0,
        seed,
        task_kind,
        instruction: format!("{} {}", task_kind.word(), color_word(instr_color)),
        screens,
        oracle_actions: actions,
        history_step,
    })
}
