//! Normalized multi-head self-attention over a view's local features.

use diffcore::{DiffError, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{CloveError, Result};
use crate::params::{uniform, Bound, ParamKind, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub head_dim: usize,
    pub temperature: f64,
    /// Cosine scores (unit-normalized queries and keys) when set, raw dot
    /// products otherwise.
    pub normalize_qk: bool,
}

impl AttentionConfig {
    pub fn for_dim(d: usize) -> Self {
        let n_heads = if d % 8 == 0 { 8 } else { 1 };
        Self {
            n_heads,
            head_dim: d / n_heads,
            temperature: 0.2,
            normalize_qk: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.n_heads == 0 || self.head_dim == 0 {
            return Err(CloveError::config("attn.heads", "heads and head size must be positive"));
        }
        if self.dim() != d {
            return Err(CloveError::config(
                "attn.heads",
                format!("{} heads x {} does not equal feature size {d}", self.n_heads, self.head_dim),
            ));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(CloveError::config("attn.temperature", "must be positive"));
        }
        Ok(())
    }
}

const QK_EPS: f64 = 1e-8;

/// The student-only prediction head. Per-head projections are stored side
/// by side: columns `h*head_dim..(h+1)*head_dim` of `wq`/`wk`/`wv` belong to
/// head `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub config: AttentionConfig,
    pub params: ParamSet,
}

const WQ: usize = 0;
const WK: usize = 1;
const WV: usize = 2;
const WO: usize = 3;
const BO: usize = 4;

/// Intermediate handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub output: Var,
    /// `[N·heads, L, L]`, before the temperature and softmax.
    pub scores: Var,
    /// `[N·heads, L, L]`, rows sum to one.
    pub weights: Var,
}

impl Predictor {
    pub fn new(config: AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = config.dim();
        config.validate(d)?;
        let bound = (1.0 / d as f32).sqrt();
        let mut params = ParamSet::new();
        for name in ["predictor.wq", "predictor.wk", "predictor.wv", "predictor.wo"] {
            params.push(name, ParamKind::Weight, uniform(rng, &[d, d], bound));
        }
        params.push("predictor.bo", ParamKind::Bias, Tensor::zeros(&[d]));
        Ok(Self { config, params })
    }

    /// `[N,L,D] → [N,L,D]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, seq: Var) -> Result<AttentionVars> {
        let s = tape.shape(seq).to_vec();
        let cfg = self.config;
        if s.len() != 3 || s[2] != cfg.dim() {
            return Err(DiffError::Dimension {
                op: "nmhsa",
                detail: format!("input {s:?} vs {} heads x {}", cfg.n_heads, cfg.head_dim),
            }
            .into());
        }
        let (n, l, d) = (s[0], s[1], s[2]);
        let (h, hd) = (cfg.n_heads, cfg.head_dim);
        let rows = tape.reshape(seq, &[n * l, d])?;
        let split = |tape: &mut Tape<T>, w: usize| -> Result<Var> {
            let p = tape.matmul(rows, bound.var(w))?;
            let p = tape.reshape(p, &[n, l, h, hd])?;
            let p = tape.permute(p, &[0, 2, 1, 3])?;
            Ok(tape.reshape(p, &[n * h, l, hd])?)
        };
        let mut q = split(tape, WQ)?;
        let mut k = split(tape, WK)?;
        let v = split(tape, WV)?;
        if cfg.normalize_qk {
            q = tape.l2_normalize(q, QK_EPS)?;
            k = tape.l2_normalize(k, QK_EPS)?;
        }
        let scores = tape.bmm(q, k, true)?;
        let logits = tape.scale(scores, 1.0 / cfg.temperature)?;
        let weights = tape.softmax(logits)?;
        let ctx = tape.bmm(weights, v, false)?;
        let ctx = tape.reshape(ctx, &[n, h, l, hd])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[n * l, d])?;
        let out = tape.linear(ctx, bound.var(WO), Some(bound.var(BO)))?;
        let output = tape.reshape(out, &[n, l, d])?;
        Ok(AttentionVars { output, scores, weights })
    }

    /// Convenience forward without gradients: output `[N,L,D]`.
    pub fn apply(&self, seq: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let bound = self.params.bind(&mut tape, false)?;
        let x = tape.constant(seq)?;
        let vars = self.forward(&mut tape, &bound, x)?;
        Ok(tape.to_tensor(vars.output))
    }

    /// Post-softmax attention weights `[N,heads,L,L]`.
    pub fn attention_scores(&self, seq: &Tensor) -> Result<Tensor> {
        Ok(self.attention_detail(seq)?.1)
    }

    /// Pre-softmax scores (before dividing by the temperature) and
    /// post-softmax weights, both `[N,heads,L,L]`.
    pub fn attention_detail(&self, seq: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::<f32>::new();
        let bound = self.params.bind(&mut tape, false)?;
        let x = tape.constant(seq)?;
        let vars = self.forward(&mut tape, &bound, x)?;
        let (n, l) = (seq.shape()[0], seq.shape()[1]);
        let shape = [n, self.config.n_heads, l, l];
        Ok((
            tape.to_tensor(vars.scores).reshaped(&shape)?,
            tape.to_tensor(vars.weights).reshaped(&shape)?,
        ))
    }
}
