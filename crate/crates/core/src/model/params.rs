use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, Label};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Generatable text tokens (size of the output head).
    pub text_vocab: usize,
    /// Factorized cell-token fields.
    pub kinds: usize,
    pub colors: usize,
    pub glyphs: usize,
    pub max_positions: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::ConfigValidation(m));
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return fail("model dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.text_vocab == 0 || self.max_positions == 0 {
            return fail("vocabulary and position table must be non-empty".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Total number of input ids (text plus packed cells).
    pub fn input_vocab(&self) -> usize {
        self.text_vocab + self.kinds * self.colors * self.glyphs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Transformer weights. Linear maps use the row convention `y = x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub tok_emb: Array2<f64>,
    pub kind_emb: Array2<f64>,
    pub color_emb: Array2<f64>,
    pub glyph_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub seg_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

/// Name, shape and flat data of one tensor.
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorViewMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

fn view<D: ndarray::Dimension>(name: String, a: &ndarray::Array<f64, D>) -> TensorView<'_> {
    TensorView {
        name,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("contiguous tensor"),
    }
}

fn view_mut<D: ndarray::Dimension>(name: String, a: &mut ndarray::Array<f64, D>) -> TensorViewMut<'_> {
    TensorViewMut {
        name,
        shape: a.shape().to_vec(),
        data: a.as_slice_mut().expect("contiguous tensor"),
    }
}

/// Lists every tensor in a fixed order. `$f` builds the view, `$iter`
/// walks the layers and `$r` is the borrow (`&` or `&mut`).
macro_rules! tensor_list {
    ($s:expr, $f:ident, $iter:ident, $($r:tt)+) => {{
        let s = $s;
        let mut out = vec![
            $f("tok_emb".into(), $($r)+ s.tok_emb),
            $f("kind_emb".into(), $($r)+ s.kind_emb),
            $f("color_emb".into(), $($r)+ s.color_emb),
            $f("glyph_emb".into(), $($r)+ s.glyph_emb),
            $f("pos_emb".into(), $($r)+ s.pos_emb),
            $f("seg_emb".into(), $($r)+ s.seg_emb),
        ];
        for (i, l) in s.layers.$iter().enumerate() {
            out.push($f(format!("layers.{i}.ln1_g"), $($r)+ l.ln1_g));
            out.push($f(format!("layers.{i}.ln1_b"), $($r)+ l.ln1_b));
            out.push($f(format!("layers.{i}.wq"), $($r)+ l.wq));
            out.push($f(format!("layers.{i}.wk"), $($r)+ l.wk));
            out.push($f(format!("layers.{i}.wv"), $($r)+ l.wv));
            out.push($f(format!("layers.{i}.wo"), $($r)+ l.wo));
            out.push($f(format!("layers.{i}.ln2_g"), $($r)+ l.ln2_g));
            out.push($f(format!("layers.{i}.ln2_b"), $($r)+ l.ln2_b));
            out.push($f(format!("layers.{i}.w1"), $($r)+ l.w1));
            out.push($f(format!("layers.{i}.b1"), $($r)+ l.b1));
            out.push($f(format!("layers.{i}.w2"), $($r)+ l.w2));
            out.push($f(format!("layers.{i}.b2"), $($r)+ l.b2));
        }
        out.push($f("lnf_g".into(), $($r)+ s.lnf_g));
        out.push($f("lnf_b".into(), $($r)+ s.lnf_b));
        out.push($f("w_out".into(), $($r)+ s.w_out));
        out.push($f("b_out".into(), $($r)+ s.b_out));
        out
    }};
}

impl ModelParams {
    /// All-zero parameters (used for gradients and optimizer state).
    pub fn zeros(dims: ModelDims) -> Self {
        let d = dims.d_model;
        let z1 = |n| Array1::zeros(n);
        let z2 = |r, c| Array2::zeros((r, c));
        ModelParams {
            dims,
            tok_emb: z2(dims.text_vocab, d),
            kind_emb: z2(dims.kinds, d),
            color_emb: z2(dims.colors, d),
            glyph_emb: z2(dims.glyphs, d),
            pos_emb: z2(dims.max_positions, d),
            seg_emb: z2(5, d),
            layers: (0..dims.layers)
                .map(|_| LayerParams {
                    ln1_g: z1(d),
                    ln1_b: z1(d),
                    wq: z2(d, d),
                    wk: z2(d, d),
                    wv: z2(d, d),
                    wo: z2(d, d),
                    ln2_g: z1(d),
                    ln2_b: z1(d),
                    w1: z2(d, dims.d_ff),
                    b1: z1(dims.d_ff),
                    w2: z2(dims.d_ff, d),
                    b2: z1(d),
                })
                .collect(),
            lnf_g: z1(d),
            lnf_b: z1(d),
            w_out: z2(d, dims.text_vocab),
            b_out: z1(dims.text_vocab),
        }
    }

    /// Random initialization from the `init` stream of `seed`.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = derive_rng(seed, &[Label::Str("init")]);
        let mut p = Self::zeros(dims);
        let d = dims.d_model as f64;
        let fill = |a: &mut [f64], std: f64, rng: &mut crate::rng::StreamRng| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for x in a.iter_mut() {
                *x = normal.sample(rng);
            }
        };
        let resid = 1.0 / (2.0 * dims.layers as f64).sqrt();
        for t in p.tensors_mut() {
            let name = t.name.rsplit('.').next().unwrap_or_default().to_string();
            let std = match name.as_str() {
                "tok_emb" | "kind_emb" | "color_emb" | "glyph_emb" | "pos_emb" | "seg_emb" => 0.5,
                "wq" | "wk" | "wv" => 1.0 / d.sqrt(),
                "wo" => resid / d.sqrt(),
                "w1" => 1.0 / d.sqrt(),
                "w2" => resid / (dims.d_ff as f64).sqrt(),
                "w_out" => 0.5 / d.sqrt(),
                "ln1_g" | "ln2_g" | "lnf_g" => {
                    t.data.fill(1.0);
                    continue;
                }
                _ => continue,
            };
            fill(t.data, std, &mut rng);
        }
        Ok(p)
    }

    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        tensor_list!(self, view, iter, &)
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        tensor_list!(self, view_mut, iter_mut, &mut)
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.fill(0.0);
        }
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|t| t.data.iter().any(|x| !x.is_finite()))
            .map(|t| t.name)
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.data.iter().zip(b.data).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}
