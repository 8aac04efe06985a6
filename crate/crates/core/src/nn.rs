//! Small building blocks shared by the denoiser and the short-term encoder.

use crate::error::Result;
use crate::numerics::{Matrix, ParamId, ParamStore, Rng, Tape, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            weight: store.add_glorot(format!("{name}.weight"), input, output, rng),
            bias: Some(store.add(format!("{name}.bias"), Matrix::zeros(1, output))),
        }
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            weight: store.add_glorot(format!("{name}.weight"), input, output, rng),
            bias: None,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.weight).fill(0.0);
        if let Some(b) = self.bias {
            store.value_mut(b).fill(0.0);
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, width, 1.0)),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, width)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Scaled dot-product attention applied independently to groups.
///
/// `q` holds `nq` rows per group and `k`/`v` hold `nk` rows per group; the
/// model width is split evenly into `heads`.
pub fn grouped_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    nq: usize,
    nk: usize,
    heads: usize,
) -> Result<Var> {
    let width = tape.shape(q).1;
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let s = tape.grouped_matmul_bt(qh, kh, nq, nk)?;
        let s = tape.scale(s, scale);
        let p = tape.softmax_rows(s);
        outs.push(tape.grouped_matmul(p, vh, nq, nk)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Query/key/value/output projections of one attention block.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            query: Linear::without_bias(store, &format!("{name}.query"), d, d, rng),
            key: Linear::without_bias(store, &format!("{name}.key"), d, d, rng),
            value: Linear::without_bias(store, &format!("{name}.value"), d, d, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, rng),
            heads,
        }
    }

    /// Queries from `x` (`nq` rows per group), keys and values from
    /// `memory` (`nk` rows per group).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        memory: Var,
        nq: usize,
        nk: usize,
    ) -> Result<Var> {
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, memory)?;
        let v = self.value.forward(tape, store, memory)?;
        let a = grouped_attention(tape, q, k, v, nq, nk, self.heads)?;
        self.output.forward(tape, store, a)
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, width: usize, rng: &mut Rng) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), d, width, rng),
            outer: Linear::new(store, &format!("{name}.outer"), width, d, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.outer.forward(tape, store, h)
    }
}
