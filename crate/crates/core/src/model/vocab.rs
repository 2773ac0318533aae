//! Token vocabulary and context encoding.
//!
//! Two kinds of token share one id space:
//!
//! * text tokens `0..n_text`: response pieces (tags, action keywords,
//!   coordinate pieces, glyph words, ...), instruction words and banner glyphs.
//!   Only text tokens can be generated.
//! * cell tokens `n_text + (kind * C + color) * G + glyph`: one per grid cell.
//!
//! Response text is the concatenation of token surfaces, with a single space
//! inserted between consecutive glyph words.
//!
//! Position ids are segment-local so that a context keeps the same ids for
//! its instruction, current screen and response whatever history it carries:
//!
//! ```text
//! INSTR            0 .. INSTR_SLOTS
//! V_CUR            INSTR_SLOTS + j             j < screen_slots
//! RESP             resp_base + j               j <= max_resp (j = 0 is BOS)
//! V_HIS (age a)    hist_base + (a-1)*stride + j
//! A_HIS (age a)    hist_base + (a-1)*stride + screen_slots + j
//! ```
//!
//! Age 1 is the most recent history step.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::action::{Action, ActionKind, Direction, ResponseTags, ValueClass};
use crate::env::{glyph_word, GridSpec, Screen, StepContext, TaskKind, MAX_BANNER};
use crate::error::{Error, Result};

pub const INSTR_SLOTS: usize = 8;
pub const ACTION_SLOTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Segment {
    Instr,
    VHis,
    AHis,
    VCur,
    Resp,
}

impl Segment {
    pub const ALL: [Segment; 5] = [Segment::Instr, Segment::VHis, Segment::AHis, Segment::VCur, Segment::Resp];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Token ids with parallel segment labels and position ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub segments: Vec<Segment>,
    pub positions: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn count(&self, segment: Segment) -> usize {
        self.segments.iter().filter(|s| **s == segment).count()
    }

    fn push(&mut self, token: u32, segment: Segment, position: usize) {
        self.tokens.push(token);
        self.segments.push(segment);
        self.positions.push(position as u32);
    }
}

/// Position table layout for a grid, history window and response budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionLayout {
    pub screen_slots: usize,
    pub resp_base: usize,
    pub hist_base: usize,
    pub window: usize,
    pub max_resp: usize,
}

impl PositionLayout {
    pub fn new(grid: &GridSpec, window: usize, max_resp: usize) -> Self {
        let screen_slots = grid.cells() + MAX_BANNER;
        let resp_base = INSTR_SLOTS + screen_slots;
        PositionLayout {
            screen_slots,
            resp_base,
            hist_base: resp_base + max_resp + 1,
            window,
            max_resp,
        }
    }

    pub fn stride(&self) -> usize {
        self.screen_slots + ACTION_SLOTS
    }

    pub fn max_positions(&self) -> usize {
        self.hist_base + self.window * self.stride()
    }

    fn hist_slot(&self, age: usize) -> usize {
        self.hist_base + (age - 1) * self.stride()
    }

    /// First position of every screen block: the current screen, then history
    /// screens by increasing age.
    pub fn screen_bases(&self) -> Vec<usize> {
        std::iter::once(INSTR_SLOTS)
            .chain((1..=self.window).map(|age| self.hist_slot(age)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Vocab {
    grid: GridSpec,
    surfaces: Vec<String>,
    ids: HashMap<String, u32>,
    kw_base: u32,
    x_base: u32,
    y_base: u32,
    dir_base: u32,
    glyph_base: u32,
    close: u32,
    n_text: u32,
}

impl Vocab {
    pub const END: u32 = 0;
    pub const BOS: u32 = 1;
    pub const THINK_OPEN: u32 = 2;
    pub const THINK_CLOSE: u32 = 3;
    pub const ACTION_OPEN: u32 = 4;
    pub const ACTION_CLOSE: u32 = 5;
    const THINK_WORDS: [&'static str; 2] = ["scan", "recall"];

    pub fn new(grid: &GridSpec, tags: &ResponseTags) -> Self {
        let mut surfaces: Vec<String> = vec![
            String::new(),
            String::new(),
            tags.think_open(),
            tags.think_close(),
            tags.action_open(),
            tags.action_close(),
        ];
        surfaces.extend(Self::THINK_WORDS.iter().map(|w| w.to_string()));

        let kw_base = surfaces.len() as u32;
        for kind in ActionKind::ALL {
            let name = kind.name();
            surfaces.push(match (kind.value_class(), kind.arg_name()) {
                (ValueClass::Point, Some(arg)) => format!("{name}({arg}='("),
                (_, Some(arg)) => format!("{name}({arg}='"),
                _ => format!("{name}()"),
            });
        }
        let x_base = surfaces.len() as u32;
        for col in 0..grid.width {
            surfaces.push(format!("{:.4},", grid.cell_center(0, col).x()));
        }
        let y_base = surfaces.len() as u32;
        for row in 0..grid.height {
            surfaces.push(format!("{:.4})')", grid.cell_center(row, 0).y()));
        }
        let dir_base = surfaces.len() as u32;
        for d in Direction::ALL {
            surfaces.push(format!("{}')", d.name()));
        }
        let glyph_base = surfaces.len() as u32;
        for g in 0..grid.glyphs {
            surfaces.push(glyph_word(g as u8));
        }
        let close = surfaces.len() as u32;
        surfaces.push("')".to_string());
        for kind in TaskKind::ALL {
            surfaces.push(kind.word().to_string());
        }
        for c in 0..grid.colors {
            surfaces.push(crate::env::color_word(c as u8));
        }

        // Only words (not empty or punctuation pieces) are looked up by text.
        let ids = surfaces
            .iter()
            .enumerate()
            .skip(6)
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        let n_text = surfaces.len() as u32;
        Vocab {
            grid: *grid,
            surfaces,
            ids,
            kw_base,
            x_base,
            y_base,
            dir_base,
            glyph_base,
            close,
            n_text,
        }
    }

    /// Number of text (generatable) tokens.
    pub fn n_text(&self) -> usize {
        self.n_text as usize
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn surface(&self, token: u32) -> &str {
        self.surfaces.get(token as usize).map_or("", String::as_str)
    }

    pub fn is_glyph(&self, token: u32) -> bool {
        (self.glyph_base..self.glyph_base + self.grid.glyphs as u32).contains(&token)
    }

    pub fn keyword(&self, kind: ActionKind) -> u32 {
        self.kw_base + ActionKind::ALL.iter().position(|k| *k == kind).expect("listed kind") as u32
    }

    pub fn glyph_token(&self, glyph: u8) -> Result<u32> {
        if (glyph as usize) < self.grid.glyphs {
            Ok(self.glyph_base + u32::from(glyph))
        } else {
            Err(Error::VocabularyOverflow(format!("glyph {glyph} >= {}", self.grid.glyphs)))
        }
    }

    pub fn word(&self, word: &str) -> Result<u32> {
        self.ids
            .get(word)
            .copied()
            .ok_or_else(|| Error::VocabularyOverflow(format!("unknown word `{word}`")))
    }

    /// Packed id of a grid cell token.
    pub fn cell_token(&self, kind: u8, color: u8, glyph: u8) -> Result<u32> {
        let g = &self.grid;
        if kind as usize >= g.kinds || color as usize >= g.colors || glyph as usize >= g.glyphs {
            return Err(Error::VocabularyOverflow(format!(
                "cell ({kind}, {color}, {glyph}) outside ({}, {}, {})",
                g.kinds, g.colors, g.glyphs
            )));
        }
        let packed = (u32::from(kind) * g.colors as u32 + u32::from(color)) * g.glyphs as u32 + u32::from(glyph);
        Ok(self.n_text + packed)
    }

    /// Splits a cell token into `(kind, color, glyph)`; `None` for text tokens.
    pub fn unpack_cell(&self, token: u32) -> Option<(usize, usize, usize)> {
        let packed = token.checked_sub(self.n_text)? as usize;
        let g = &self.grid;
        let glyph = packed % g.glyphs;
        let color = (packed / g.glyphs) % g.colors;
        let kind = packed / (g.glyphs * g.colors);
        (kind < g.kinds).then_some((kind, color, glyph))
    }

    /// Action body tokens (no tags). Click points must be cell centres and
    /// typed text must consist of glyph words.
    pub fn encode_action(&self, action: &Action) -> Result<Vec<u32>> {
        let mut out = vec![self.keyword(action.kind())];
        match action {
            Action::Click(p) | Action::LongPress(p) => {
                let (row, col) = self.grid.cell_of(p);
                let centre = self.grid.cell_center(row, col);
                if (centre.x() - p.x()).abs() > 5e-5 || (centre.y() - p.y()).abs() > 5e-5 {
                    return Err(Error::VocabularyOverflow(format!(
                        "point ({:.4}, {:.4}) is not a cell centre",
                        p.x(),
                        p.y()
                    )));
                }
                out.push(self.x_base + col as u32);
                out.push(self.y_base + row as u32);
            }
            Action::Type(text) | Action::OpenApp(text) => {
                for w in text.split_whitespace() {
                    let t = self.word(w)?;
                    if !self.is_glyph(t) {
                        return Err(Error::VocabularyOverflow(format!("`{w}` is not a glyph word")));
                    }
                    out.push(t);
                }
                out.push(self.close);
            }
            Action::Scroll(d) => {
                let i = Direction::ALL.iter().position(|x| x == d).expect("listed direction");
                out.push(self.dir_base + i as u32);
            }
            _ => {}
        }
        Ok(out)
    }

    /// Full response tokens for an action with an empty think block, ending
    /// with END.
    pub fn encode_response(&self, action: &Action) -> Result<Vec<u32>> {
        let mut out = vec![Self::THINK_OPEN, Self::THINK_CLOSE, Self::ACTION_OPEN];
        out.extend(self.encode_action(action)?);
        out.push(Self::ACTION_CLOSE);
        out.push(Self::END);
        Ok(out)
    }

    /// Response text for generated tokens; rendering stops at END.
    pub fn render(&self, tokens: &[u32]) -> String {
        let mut out = String::new();
        let mut prev_glyph = false;
        for &t in tokens {
            if t == Self::END {
                break;
            }
            let glyph = self.is_glyph(t);
            if glyph && prev_glyph {
                out.push(' ');
            }
            out.push_str(self.surface(t));
            prev_glyph = glyph;
        }
        out
    }

    fn push_screen(&self, seq: &mut TokenSequence, screen: &Screen, segment: Segment, base: usize) -> Result<()> {
        if screen.cells.len() != self.grid.cells() {
            return Err(Error::ShapeMismatch(format!(
                "screen has {} cells, grid has {}",
                screen.cells.len(),
                self.grid.cells()
            )));
        }
        if screen.banner.len() > MAX_BANNER {
            return Err(Error::ShapeMismatch(format!("banner longer than {MAX_BANNER}")));
        }
        for (j, c) in screen.cells.iter().enumerate() {
            seq.push(self.cell_token(c.kind, c.color, c.glyph)?, segment, base + j);
        }
        for (j, &g) in screen.banner.iter().enumerate() {
            seq.push(self.glyph_token(g)?, segment, base + self.grid.cells() + j);
        }
        Ok(())
    }

    /// Tokenizes a step context. The sequence ends with BOS, the query row
    /// that predicts the first response token.
    pub fn encode_context(&self, ctx: &StepContext, layout: &PositionLayout) -> Result<TokenSequence> {
        if ctx.history.len() > layout.window {
            return Err(Error::ShapeMismatch(format!(
                "history of {} steps exceeds the position table window {}",
                ctx.history.len(),
                layout.window
            )));
        }
        let mut seq = TokenSequence::default();
        let words: Vec<&str> = ctx.instruction.split_whitespace().collect();
        if words.len() > INSTR_SLOTS {
            return Err(Error::VocabularyOverflow(format!("instruction longer than {INSTR_SLOTS} words")));
        }
        for (j, w) in words.iter().enumerate() {
            seq.push(self.word(w)?, Segment::Instr, j);
        }
        let h = ctx.history.len();
        for (i, (screen, action)) in ctx.history.iter().enumerate() {
            let base = layout.hist_slot(h - i);
            self.push_screen(&mut seq, screen, Segment::VHis, base)?;
            let toks = self.encode_action(action)?;
            if toks.len() > ACTION_SLOTS {
                return Err(Error::VocabularyOverflow(format!("action longer than {ACTION_SLOTS} tokens")));
            }
            for (j, t) in toks.into_iter().enumerate() {
                seq.push(t, Segment::AHis, base + layout.screen_slots + j);
            }
        }
        self.push_screen(&mut seq, &ctx.current, Segment::VCur, INSTR_SLOTS)?;
        seq.push(Self::BOS, Segment::Resp, layout.resp_base);
        Ok(seq)
    }
}
