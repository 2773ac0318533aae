//! Glue between step contexts and the token-level policy.

use crate::action::ResponseTags;
use crate::env::{GridSpec, StepContext};
use ndarray::Array2;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::rng::{derive_rng, Label};
use crate::model::{
    greedy_response, DropSpec, ModelConfig, ModelDims, ModelParams, PositionLayout, PrefixCache, TokenSequence, Vocab,
};

/// Everything needed to turn a step context into model input and a sampled
/// token stream back into response text.
#[derive(Debug, Clone)]
pub struct Agent {
    pub grid: GridSpec,
    pub tags: ResponseTags,
    pub vocab: Vocab,
    pub layout: PositionLayout,
    pub window: usize,
    pub model: ModelConfig,
}

impl Agent {
    pub fn new(grid: GridSpec, tags: ResponseTags, window: usize, model: ModelConfig) -> Self {
        let vocab = Vocab::new(&grid, &tags);
        let layout = PositionLayout::new(&grid, window, model.max_response);
        Agent {
            grid,
            tags,
            vocab,
            layout,
            window,
            model,
        }
    }

    pub fn dims(&self) -> ModelDims {
        self.model.dims(&self.grid, &self.vocab, self.window)
    }

    /// Random parameters whose screen-cell position embeddings are the sum of
    /// a row vector, a column vector and a per-screen vector, shared across
    /// screens. Banner, instruction and response positions stay i.i.d.
    pub fn init_params(&self, seed: u64) -> Result<ModelParams> {
        let mut p = ModelParams::init(self.dims(), seed)?;
        let mut rng = derive_rng(seed, &[Label::Str("grid-positions")]);
        let normal = Normal::new(0.0, 0.5).expect("positive std");
        let d = p.dims.d_model;
        let mut draw = |n: usize| Array2::from_shape_fn((n, d), |_| normal.sample(&mut rng));
        let rows = draw(self.grid.height);
        let cols = draw(self.grid.width);
        let bases = self.layout.screen_bases();
        let screens = draw(bases.len());
        for (s, base) in bases.into_iter().enumerate() {
            for cell in 0..self.grid.cells() {
                let (r, c) = (cell / self.grid.width, cell % self.grid.width);
                let v = &rows.row(r) + &cols.row(c) + screens.row(s);
                p.pos_emb.row_mut(base + cell).assign(&v);
            }
        }
        Ok(p)
    }

    pub fn max_response(&self) -> usize {
        self.model.max_response
    }

    pub fn encode(&self, ctx: &StepContext) -> Result<TokenSequence> {
        self.vocab.encode_context(ctx, &self.layout)
    }

    pub fn render(&self, tokens: &[u32]) -> String {
        self.vocab.render(tokens)
    }

    /// Greedy response text for a context under `drop`.
    pub fn act_greedy(&self, params: &ModelParams, ctx: &StepContext, drop: DropSpec) -> Result<String> {
        let seq = self.encode(ctx)?;
        let cache = PrefixCache::build(params, &seq, drop)?;
        let tokens = greedy_response(params, &cache, self.max_response())?;
        Ok(self.render(&tokens))
    }
}
