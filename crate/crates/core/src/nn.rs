//! Layer building blocks shared by the scene encoder and the language model.

use rand::Rng;

use crate::autograd::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Group, ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, group: Group, fan_in: usize, fan_out: usize) -> Self {
        let (weight, bias) = store.insert_linear(rng, name, group, fan_in, fan_out);
        Linear { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    pub fn check_shape(&self, store: &ParamStore, fan_in: usize, fan_out: usize) -> Result<()> {
        let w = store.value(self.weight);
        if (w.rows, w.cols) != (fan_in, fan_out) {
            return Err(Error::Shape(format!(
                "{}: expected {fan_in}x{fan_out}, found {}x{}",
                store.name(self.weight),
                w.rows,
                w.cols
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, width: usize) -> Self {
        let (gamma, beta) = store.insert_layer_norm(name, group, width);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head self-attention with optional additive logit biases.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub n_heads: usize,
    pub width: usize,
}

impl SelfAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, group: Group, width: usize, n_heads: usize) -> Self {
        SelfAttention {
            query: Linear::new(store, rng, &format!("{name}.query"), group, width, width),
            key: Linear::new(store, rng, &format!("{name}.key"), group, width, width),
            value: Linear::new(store, rng, &format!("{name}.value"), group, width, width),
            out: Linear::new(store, rng, &format!("{name}.out"), group, width, width),
            n_heads,
            width,
        }
    }

    /// `mask` is added to every head's logits (use `-inf` to block);
    /// `head_bias[h]` is added to head `h` only.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: Option<Var>,
        head_bias: Option<&[Var]>,
    ) -> Var {
        let q = self.query.forward(tape, store, x);
        let k = self.key.forward(tape, store, x);
        let v = self.value.forward(tape, store, x);
        let hd = self.width / self.n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.slice_cols(q, h * hd, hd);
            let kh = tape.slice_cols(k, h * hd, hd);
            let vh = tape.slice_cols(v, h * hd, hd);
            let s = tape.matmul_t(qh, kh);
            let mut s = tape.scale(s, scale);
            if let Some(b) = head_bias {
                s = tape.add(s, b[h]);
            }
            if let Some(m) = mask {
                s = tape.add(s, m);
            }
            let p = tape.softmax_rows(s);
            heads.push(tape.matmul(p, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        self.out.forward(tape, store, cat)
    }
}

/// Position-wise two-layer perceptron with GELU.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, group: Group, width: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::new(store, rng, &format!("{name}.up"), group, width, hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), group, hidden, width),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(tape, store, x);
        let h = tape.gelu(h);
        self.down.forward(tape, store, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub attn: SelfAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl Block {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, group: Group, width: usize, n_heads: usize) -> Self {
        Block {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), group, width),
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), group, width, n_heads),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), group, width),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), group, width, 4 * width),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: Option<Var>,
        head_bias: Option<&[Var]>,
    ) -> Var {
        let h = self.ln_attn.forward(tape, store, x);
        let a = self.attn.forward(tape, store, h, mask, head_bias);
        let x = tape.add(x, a);
        let h = self.ln_ff.forward(tape, store, x);
        let f = self.ff.forward(tape, store, h);
        tape.add(x, f)
    }
}

/// `T×T` additive mask with `-inf` above the diagonal.
pub fn causal_mask(t: usize) -> Matrix {
    let mut m = Matrix::zeros(t, t);
    for r in 0..t {
        for c in r + 1..t {
            m.data[r * t + c] = f64::NEG_INFINITY;
        }
    }
    m
}
