//! Convolutional trunk plus per-location projection head, and the EMA
//! transfer from student to teacher.

use diffcore::{Real, Tape, Tensor, Var};
use rand::Rng;

use crate::augment::ViewRecord;
use crate::error::{CloveError, Result};
use crate::params::{uniform, Bound, ParamKind, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Output channels per stage. The first stage keeps resolution, every
    /// later one halves it.
    pub channels: Vec<usize>,
    pub head_hidden: usize,
    pub out_dim: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128, 128],
            head_hidden: 256,
            out_dim: 64,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn total_stride(&self) -> usize {
        1 << self.channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(CloveError::config("enc.channels", "need at least one positive stage width"));
        }
        if self.head_hidden == 0 || self.out_dim == 0 {
            return Err(CloveError::config("enc.dim", "head sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(CloveError::config("enc.bn_momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Student,
    Teacher,
}

/// Positions of one normalization layer's entries in the [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq)]
struct NormIdx {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct StageIdx {
    weight: usize,
    norm: NormIdx,
    stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeadIdx {
    w1: usize,
    norm: NormIdx,
    w2: usize,
    b2: usize,
}

/// Projected local features on a tape: `map` is `[N,D,F_h,F_w]`, `seq` the
/// row-major sequence view `[N,L,D]`.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub map: Var,
    pub seq: Var,
    pub n: usize,
    pub d: usize,
    pub f_h: usize,
    pub f_w: usize,
    pub provenance: Provenance,
}

impl FeatureMap {
    pub fn len(&self) -> usize {
        self.f_h * self.f_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamSet,
    pub mode: Mode,
    stages: Vec<StageIdx>,
    head: HeadIdx,
}

fn push_norm(params: &mut ParamSet, prefix: &str, c: usize) -> NormIdx {
    NormIdx {
        gamma: params.push(format!("{prefix}.gamma"), ParamKind::Norm, Tensor::full(&[c], 1.0)),
        beta: params.push(format!("{prefix}.beta"), ParamKind::Norm, Tensor::zeros(&[c])),
        running_mean: params.push(format!("{prefix}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[c])),
        running_var: params.push(format!("{prefix}.running_var"), ParamKind::Buffer, Tensor::full(&[c], 1.0)),
    }
}

impl Encoder {
    /// Kaiming-uniform weights, unit/zero normalization, zero bias.
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (s, &c_out) in config.channels.iter().enumerate() {
            let bound = (6.0 / (c_in * 9) as f32).sqrt();
            let weight = params.push(
                format!("trunk.{s}.conv.weight"),
                ParamKind::Weight,
                uniform(rng, &[c_out, c_in, 3, 3], bound),
            );
            let norm = push_norm(&mut params, &format!("trunk.{s}.bn"), c_out);
            stages.push(StageIdx {
                weight,
                norm,
                stride: if s == 0 { 1 } else { 2 },
            });
            c_in = c_out;
        }
        let hidden = config.head_hidden;
        let w1 = params.push(
            "head.fc1.weight",
            ParamKind::Weight,
            uniform(rng, &[c_in, hidden], (6.0 / c_in as f32).sqrt()),
        );
        let norm = push_norm(&mut params, "head.bn", hidden);
        let w2 = params.push(
            "head.fc2.weight",
            ParamKind::Weight,
            uniform(rng, &[hidden, config.out_dim], (3.0 / hidden as f32).sqrt()),
        );
        let b2 = params.push("head.fc2.bias", ParamKind::Bias, Tensor::zeros(&[config.out_dim]));
        Ok(Self {
            config,
            params,
            mode: Mode::Train,
            stages,
            head: HeadIdx { w1, norm, w2, b2 },
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn norm<T: Real>(&mut self, tape: &mut Tape<T>, bound: &Bound, x: Var, idx: NormIdx) -> Result<Var> {
        let (gamma, beta) = (bound.var(idx.gamma), bound.var(idx.beta));
        let eps = self.config.bn_eps;
        match self.mode {
            Mode::Eval => Ok(tape.batch_norm_eval(
                x,
                gamma,
                beta,
                self.params.tensor(idx.running_mean).data(),
                self.params.tensor(idx.running_var).data(),
                eps,
            )?),
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, eps)?;
                let m = self.config.bn_momentum;
                let unbiased = stats.unbiased_var();
                let rm = self.params.tensor_mut(idx.running_mean).data_mut();
                for (r, &b) in rm.iter_mut().zip(&stats.mean) {
                    *r = (m * *r as f64 + (1.0 - m) * b) as f32;
                }
                let rv = self.params.tensor_mut(idx.running_var).data_mut();
                for (r, &b) in rv.iter_mut().zip(&unbiased) {
                    *r = (m * *r as f64 + (1.0 - m) * b) as f32;
                }
                Ok(y)
            }
        }
    }

    /// Trunk output `[N,C,F_h,F_w]`.
    pub fn trunk<T: Real>(&mut self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let stride = self.config.total_stride();
        if shape.len() != 4 || shape[1] != 3 || shape[2] % stride != 0 || shape[3] % stride != 0 {
            return Err(diffcore::DiffError::Dimension {
                op: "encoder",
                detail: format!("input {shape:?} must be [N,3,H,W] with H,W divisible by {stride}"),
            }
            .into());
        }
        let mut h = x;
        for s in self.stages.clone() {
            let c = tape.conv2d(h, bound.var(s.weight), s.stride, 1)?;
            let n = self.norm(tape, bound, c, s.norm)?;
            h = tape.relu(n)?;
        }
        Ok(h)
    }

    /// Per-location projection of a trunk map into `[N,L,D]` / `[N,D,F_h,F_w]`.
    pub fn project<T: Real>(&mut self, tape: &mut Tape<T>, bound: &Bound, trunk: Var, provenance: Provenance) -> Result<FeatureMap> {
        let s = tape.shape(trunk).to_vec();
        let (n, c, f_h, f_w) = (s[0], s[1], s[2], s[3]);
        let l = f_h * f_w;
        let flat = tape.reshape(trunk, &[n, c, l])?;
        let seq_in = tape.permute(flat, &[0, 2, 1])?;
        let rows = tape.reshape(seq_in, &[n * l, c])?;
        let hdn = tape.matmul(rows, bound.var(self.head.w1))?;
        let hdn = self.norm(tape, bound, hdn, self.head.norm)?;
        let hdn = tape.relu(hdn)?;
        let out = tape.linear(hdn, bound.var(self.head.w2), Some(bound.var(self.head.b2)))?;
        let d = self.config.out_dim;
        let seq = tape.reshape(out, &[n, l, d])?;
        let dl = tape.permute(seq, &[0, 2, 1])?;
        let map = tape.reshape(dl, &[n, d, f_h, f_w])?;
        Ok(FeatureMap {
            map,
            seq,
            n,
            d,
            f_h,
            f_w,
            provenance,
        })
    }

    /// Projected feature map of a normalized `[N,3,H,W]` batch. Not
    /// normalized per location.
    pub fn forward<T: Real>(&mut self, tape: &mut Tape<T>, bound: &Bound, x: Var, provenance: Provenance) -> Result<FeatureMap> {
        let t = self.trunk(tape, bound, x)?;
        self.project(tape, bound, t, provenance)
    }

    /// Inference-only forward on a private tape; returns `[N,L,D]` values
    /// and the map size. Nothing is recorded for differentiation.
    pub fn infer(&mut self, batch: &Tensor, provenance: Provenance) -> Result<(Vec<f32>, usize, usize)> {
        let mut tape = Tape::<f32>::new();
        let bound = self.params.bind(&mut tape, false)?;
        let x = tape.constant(batch)?;
        let fm = self.forward(&mut tape, &bound, x, provenance)?;
        Ok((tape.value(fm.seq).to_vec(), fm.f_h, fm.f_w))
    }
}

/// Per-channel normalization applied to `[0,1]` views before the encoder.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

/// Stacks equally-sized views into a normalized `[N,3,H,W]` batch.
pub fn stack_views<'a>(views: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut n = 0;
    for v in views {
        match &shape {
            None => shape = Some(v.shape().to_vec()),
            Some(s) if s.as_slice() != v.shape() => {
                return Err(CloveError::Contract(format!("view shapes differ: {s:?} vs {:?}", v.shape())))
            }
            _ => {}
        }
        data.extend(v.data().iter().map(|&p| (p - PIXEL_MEAN) / PIXEL_STD));
        n += 1;
    }
    let s = shape.ok_or_else(|| CloveError::Contract("empty batch".into()))?;
    let mut full = vec![n];
    full.extend(s);
    Ok(Tensor::new(full, data)?)
}

/// Convenience over [`stack_views`] for view records.
pub fn stack_records<'a>(views: impl IntoIterator<Item = &'a ViewRecord>) -> Result<Tensor> {
    stack_views(views.into_iter().map(|v| &v.image))
}

/// `θ_t ← α·θ_t + (1−α)·θ_s` for trainable entries; buffers (batch-norm
/// running statistics) are copied from the student.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CloveError::Contract(format!("EMA weight {alpha} outside [0, 1]")));
    }
    if !teacher.same_layout(student) {
        return Err(CloveError::Contract("teacher and student layouts differ".into()));
    }
    let a = alpha as f32;
    let b = (1.0 - alpha) as f32;
    for (t, s) in teacher.iter_mut().zip(student.iter()) {
        let dst = t.tensor.data_mut();
        if t.kind.trainable() {
            for (x, &y) in dst.iter_mut().zip(s.tensor.data()) {
                *x = a * *x + b * y;
            }
        } else {
            dst.copy_from_slice(s.tensor.data());
        }
    }
    Ok(())
}
