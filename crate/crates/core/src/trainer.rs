//! Pretraining loop: views, student/teacher forward, matching, loss,
//! LARS step, EMA update, metrics and checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use diffcore::{Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;

use crate::augment::{make_multicrop, ViewRecord};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::encoder::{ema_update, stack_records, Encoder, Mode, Provenance};
use crate::error::{CloveError, Result};
use crate::evalkit::corpus::SyntheticImage;
use crate::matching::{build_grid, match_pairs, GridPoints};
use crate::objective::{LossBuilder, NegativeQueue, NegativeSource, NegativeStrategy};
use crate::optim::{cosine_lr, ema_alpha, Lars};
use crate::params::ParamSet;
use crate::predictor::Predictor;
use crate::rng::{stream, TAG_BATCH, TAG_INIT, TAG_QUEUE, TAG_VIEWS};

pub const METRICS_HEADER: &str = "step,loss,lr,alpha,n_matches,sigma_pos,sigma_neg,hinge_active_frac,wallclock_ms";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub alpha: f64,
    pub n_matches: usize,
    pub sigma_pos: f64,
    pub sigma_neg: f64,
    pub hinge_active_frac: f64,
    pub wallclock_ms: u64,
    /// No view pair in the batch had a match; nothing was updated.
    pub skipped: bool,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.loss,
            self.lr,
            self.alpha,
            self.n_matches,
            self.sigma_pos,
            self.sigma_neg,
            self.hinge_active_frac,
            self.wallclock_ms
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Completed optimizer steps.
    pub step: usize,
    pub student: Encoder,
    pub teacher: Encoder,
    pub predictor: Predictor,
    pub opt_student: Lars,
    pub opt_predictor: Lars,
    pub queue: Option<NegativeQueue>,
}

fn check_finite(params: &ParamSet) -> Result<()> {
    for p in params.iter() {
        if p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(CloveError::NonFiniteGradient(p.name.clone()));
        }
    }
    Ok(())
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, &[TAG_INIT]);
        let student = Encoder::new(config.encoder.clone(), &mut rng)?;
        let mut teacher = student.clone();
        teacher.set_mode(Mode::Eval);
        let predictor = Predictor::new(config.attention(), &mut rng)?;
        let queue = match config.loss.negatives {
            NegativeStrategy::Intra => None,
            _ => Some(NegativeQueue::new(config.queue_size, config.encoder.out_dim)?),
        };
        Ok(Self {
            opt_student: Lars::new(config.lars, &student.params),
            opt_predictor: Lars::new(config.lars, &predictor.params),
            config,
            step: 0,
            student,
            teacher,
            predictor,
            queue,
        })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let c = &self.config;
        cosine_lr(step, c.steps, c.lr, c.lr_min, c.warmup_steps())
    }

    pub fn alpha_at(&self, step: usize) -> f64 {
        ema_alpha(step, self.config.steps, self.config.ema_alpha0)
    }

    /// Views of every batch item, outer index = item.
    pub fn sample_views(&self, corpus: &[SyntheticImage], step: usize) -> Result<(Vec<usize>, Vec<Vec<ViewRecord>>)> {
        let c = &self.config;
        let n = c.batch_size.min(corpus.len());
        let mut brng = stream(c.seed, &[TAG_BATCH, step as u64]);
        let picks = sample(&mut brng, corpus.len(), n).into_vec();
        let multicrop = c.multicrop();
        let views = picks
            .iter()
            .enumerate()
            .map(|(b, &i)| {
                let mut rng = stream(c.seed, &[TAG_VIEWS, step as u64, b as u64]);
                make_multicrop(&corpus[i].image, &mut rng, c.n_global, c.n_local, &multicrop)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((picks, views))
    }

    /// One optimizer update and one EMA update on a batch drawn from
    /// `corpus`.
    pub fn train_step(&mut self, corpus: &[SyntheticImage]) -> Result<StepMetrics> {
        let start = Instant::now();
        let k = self.step + 1;
        let lr = self.lr_at(k);
        let alpha = self.alpha_at(k);
        let (_, views) = self.sample_views(corpus, k)?;
        let n_views = self.config.n_global + self.config.n_local;
        let batch = views.len();
        let d = self.config.encoder.out_dim;

        let mut tape = Tape::<f32>::new();
        let sb = self.student.params.bind(&mut tape, true)?;
        let pb = self.predictor.params.bind(&mut tape, true)?;

        struct ViewOut {
            flat: Var,
            l: usize,
            grids: Vec<GridPoints>,
            teacher: Vec<f32>,
        }
        let mut outs = Vec::with_capacity(n_views);
        for u in 0..n_views {
            let x = stack_records(views.iter().map(|v| &v[u]))?;
            let xv = tape.constant(&x)?;
            let fm = self.student.forward(&mut tape, &sb, xv, Provenance::Student)?;
            let c = self.predictor.forward(&mut tape, &pb, fm.seq)?.output;
            let l = fm.len();
            let flat = tape.reshape(c, &[batch * l, d])?;
            let (teacher, th, tw) = self.teacher.infer(&x, Provenance::Teacher)?;
            if (th, tw) != (fm.f_h, fm.f_w) {
                return Err(CloveError::Contract("teacher and student maps differ in size".into()));
            }
            let grids = views
                .iter()
                .map(|v| build_grid(&v[u].geometry, fm.f_h, fm.f_w))
                .collect::<Result<Vec<_>>>()?;
            outs.push(ViewOut { flat, l, grids, teacher });
        }

        let mut builder = LossBuilder::new(self.config.loss, d)?;
        let mut qrng = stream(self.config.seed, &[TAG_QUEUE, k as u64, 0]);
        let negatives = match &self.queue {
            Some(q) => NegativeSource::Queue(q),
            None => NegativeSource::Intra,
        };
        for u in 0..n_views {
            let cu = tape.value(outs[u].flat).to_vec();
            for v in 0..n_views {
                if u == v || (!self.config.symmetric && u > v) {
                    continue;
                }
                let (lu, lv) = (outs[u].l, outs[v].l);
                for b in 0..batch {
                    let m = match_pairs(&outs[u].grids[b], &outs[v].grids[b], self.config.t_pos)?;
                    builder.add_pair(
                        u,
                        b * lu,
                        &cu[b * lu * d..(b + 1) * lu * d],
                        &outs[v].teacher[b * lv * d..(b + 1) * lv * d],
                        &m.pairs,
                        negatives,
                        &mut qrng,
                    )?;
                }
            }
        }
        let flats: Vec<Var> = outs.iter().map(|o| o.flat).collect();
        let (loss, stats) = builder.finish(&mut tape, &flats)?;

        let mut metrics = StepMetrics {
            step: k,
            loss: 0.0,
            lr,
            alpha,
            n_matches: stats.n_matches,
            sigma_pos: stats.sigma_pos,
            sigma_neg: stats.sigma_neg,
            hinge_active_frac: stats.hinge_active_frac,
            wallclock_ms: 0,
            skipped: true,
        };
        if let Some(loss) = loss {
            metrics.loss = tape.scalar(loss) as f64;
            metrics.skipped = false;
            tape.backward(loss)?;
            self.student.params.collect_grads(&tape, &sb)?;
            self.predictor.params.collect_grads(&tape, &pb)?;
            let checked = check_finite(&self.student.params).and_then(|_| check_finite(&self.predictor.params));
            if let Err(e) = checked {
                self.student.params.zero_grads();
                self.predictor.params.zero_grads();
                return Err(e);
            }
            self.opt_student.step(&mut self.student.params, lr)?;
            self.opt_predictor.step(&mut self.predictor.params, lr)?;
            self.student.params.zero_grads();
            self.predictor.params.zero_grads();
            ema_update(&mut self.teacher.params, &self.student.params, alpha)?;

            if let Some(q) = &mut self.queue {
                let l0 = outs[0].l;
                let t0 = &outs[0].teacher;
                let mut prng = stream(self.config.seed, &[TAG_QUEUE, k as u64, 1]);
                for b in 0..batch {
                    let map = &t0[b * l0 * d..(b + 1) * l0 * d];
                    match self.config.loss.negatives {
                        NegativeStrategy::InterAvg => q.push_mean(map)?,
                        _ => {
                            let j = prng.gen_range(0..l0);
                            q.push(&map[j * d..(j + 1) * d])?
                        }
                    }
                }
            }
        }
        self.step = k;
        if self.config.log_wallclock {
            metrics.wallclock_ms = start.elapsed().as_millis() as u64;
        }
        Ok(metrics)
    }

    fn param_records(ck: &mut Checkpoint, prefix: &str, params: &ParamSet) {
        for p in params.iter() {
            ck.push(format!("{prefix}{}", p.name), p.tensor.shape(), p.tensor.data());
        }
    }

    fn slot_records(ck: &mut Checkpoint, prefix: &str, params: &ParamSet, opt: &Lars) {
        for (p, s) in params.iter().zip(&opt.slots) {
            if !s.is_empty() {
                ck.push(format!("{prefix}{}", p.name), p.tensor.shape(), s);
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            step: self.step as u64,
            records: Vec::new(),
        };
        Self::param_records(&mut ck, "student.", &self.student.params);
        Self::param_records(&mut ck, "teacher.", &self.teacher.params);
        Self::param_records(&mut ck, "", &self.predictor.params);
        Self::slot_records(&mut ck, "lars.student.", &self.student.params, &self.opt_student);
        Self::slot_records(&mut ck, "lars.", &self.predictor.params, &self.opt_predictor);
        if let Some(q) = &self.queue {
            ck.push("queue.data", &[q.capacity(), q.dim()], q.raw());
            ck.push("queue.meta", &[2], &[q.cursor() as f32, q.len() as f32]);
        }
        ck
    }

    /// Rebuilds a state for `config` from a checkpoint. Every record must be
    /// known and every expected record present.
    pub fn from_checkpoint(config: TrainConfig, ck: &Checkpoint, path: &Path) -> Result<Self> {
        let mut state = Self::new(config)?;
        let expected = state.to_checkpoint();
        let err = |reason: String| CloveError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        for r in &ck.records {
            match expected.get(&r.name) {
                None => return Err(err(format!("unknown tensor `{}`", r.name))),
                Some(e) if e.shape != r.shape => {
                    return Err(err(format!("tensor `{}` has shape {:?}, expected {:?}", r.name, r.shape, e.shape)))
                }
                _ => {}
            }
        }
        if let Some(missing) = expected.records.iter().find(|e| ck.get(&e.name).is_none()) {
            return Err(err(format!("missing tensor `{}`", missing.name)));
        }
        let fill = |params: &mut ParamSet, prefix: &str| {
            for p in params.iter_mut() {
                let r = ck.get(&format!("{prefix}{}", p.name)).expect("checked above");
                p.tensor.data_mut().copy_from_slice(&r.data);
            }
        };
        fill(&mut state.student.params, "student.");
        fill(&mut state.teacher.params, "teacher.");
        fill(&mut state.predictor.params, "");
        let slots = |params: &ParamSet, opt: &mut Lars, prefix: &str| {
            for (p, s) in params.iter().zip(opt.slots.iter_mut()) {
                if !s.is_empty() {
                    s.copy_from_slice(&ck.get(&format!("{prefix}{}", p.name)).expect("checked above").data);
                }
            }
        };
        slots(&state.student.params, &mut state.opt_student, "lars.student.");
        slots(&state.predictor.params, &mut state.opt_predictor, "lars.");
        if let Some(q) = &mut state.queue {
            let data = ck.get("queue.data").expect("checked above").data.clone();
            let meta = &ck.get("queue.meta").expect("checked above").data;
            *q = NegativeQueue::from_raw(q.capacity(), q.dim(), data, meta[0] as usize, meta[1] as usize)
                .map_err(|e| err(e.to_string()))?;
        }
        state.step = usize::try_from(ck.step).map_err(|_| err("step out of range".into()))?;
        if state.step > state.config.steps {
            return Err(err(format!("checkpoint step {} exceeds configured steps {}", state.step, state.config.steps)));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(config: TrainConfig, path: &Path) -> Result<Self> {
        Self::from_checkpoint(config, &Checkpoint::load(path)?, path)
    }

    /// Teacher or student projected features `[N,L,D]` of normalized
    /// `[N,3,H,W]` inputs, in eval semantics.
    pub fn features(&self, batch: &Tensor, teacher: bool) -> Result<(Vec<f32>, usize, usize)> {
        let mut enc = if teacher { self.teacher.clone() } else { self.student.clone() };
        enc.set_mode(Mode::Eval);
        enc.infer(batch, Provenance::Teacher)
    }
}

/// Append-only metrics CSV.
pub struct MetricsLog {
    file: File,
}

impl MetricsLog {
    /// Creates the file with a header, or, when `resume_step` is given,
    /// keeps the existing rows up to that step and appends after them.
    pub fn open(path: &Path, resume_step: Option<usize>) -> Result<Self> {
        let ctx = |what: &str| format!("{what} metrics file {}", path.display());
        let mut kept = vec![METRICS_HEADER.to_string()];
        if let Some(upto) = resume_step.filter(|_| path.exists()) {
            let f = File::open(path).map_err(|e| CloveError::io(ctx("reading"), e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| CloveError::io(ctx("reading"), e))?;
                if i == 0 {
                    if line != METRICS_HEADER {
                        return Err(CloveError::Data {
                            path: path.to_path_buf(),
                            reason: "unexpected metrics header".into(),
                        });
                    }
                    continue;
                }
                let step: usize = line
                    .split(',')
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| CloveError::Data {
                        path: path.to_path_buf(),
                        reason: format!("malformed row {}", i + 1),
                    })?;
                if step <= upto {
                    kept.push(line);
                }
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| CloveError::io(ctx("creating"), e))?;
        for line in &kept {
            writeln!(file, "{line}").map_err(|e| CloveError::io(ctx("writing"), e))?;
        }
        Ok(Self { file })
    }

    pub fn append(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.file, "{}", m.csv_row()).map_err(|e| CloveError::io("writing metrics", e))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Save every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Stop after this many steps even if the schedule continues.
    pub stop_after: Option<usize>,
}

/// Trains until the configured step count (or `stop_after`), returning the
/// metrics of the steps run here.
pub fn run(
    state: &mut TrainState,
    corpus: &[SyntheticImage],
    opts: &RunOptions,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    let mut log = match &opts.metrics {
        Some(p) => Some(MetricsLog::open(p, (state.step > 0).then_some(state.step))?),
        None => None,
    };
    let end = opts
        .stop_after
        .map_or(state.config.steps, |s| s.min(state.config.steps));
    let mut all = Vec::new();
    while state.step < end {
        let m = state.train_step(corpus)?;
        if let Some(l) = &mut log {
            l.append(&m)?;
        }
        on_step(&m);
        all.push(m);
        if let Some(p) = &opts.checkpoint {
            if opts.checkpoint_every > 0 && state.step % opts.checkpoint_every == 0 {
                state.save(p)?;
            }
        }
    }
    if let Some(p) = &opts.checkpoint {
        state.save(p)?;
    }
    Ok(all)
}
