//! Margin ranking loss between contextualized student predictions and
//! matched teacher locals, its l2 alternative, and negative sampling.

use diffcore::{Real, Tape, Var};
use rand::Rng;

use crate::error::{CloveError, Result};

const COS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Rank,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeStrategy {
    /// Hard negatives from the same teacher map.
    Intra,
    /// Random teacher local vectors from earlier steps.
    Inter,
    /// Spatially averaged teacher maps from earlier steps.
    InterAvg,
}

impl std::str::FromStr for LossMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rank" => Ok(LossMode::Rank),
            "l2" => Ok(LossMode::L2),
            _ => Err(format!("expected rank or l2, got `{s}`")),
        }
    }
}

impl std::str::FromStr for NegativeStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "intra" => Ok(NegativeStrategy::Intra),
            "inter" => Ok(NegativeStrategy::Inter),
            "inter-avg" => Ok(NegativeStrategy::InterAvg),
            _ => Err(format!("expected intra, inter or inter-avg, got `{s}`")),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Rank => "rank",
            LossMode::L2 => "l2",
        })
    }
}

impl std::fmt::Display for NegativeStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NegativeStrategy::Intra => "intra",
            NegativeStrategy::Inter => "inter",
            NegativeStrategy::InterAvg => "inter-avg",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub scale: f64,
    pub top_k: usize,
    pub mode: LossMode,
    pub negatives: NegativeStrategy,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 100.0,
            scale: 1.0,
            top_k: 10,
            mode: LossMode::Rank,
            negatives: NegativeStrategy::Intra,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(CloveError::config("loss.margin", "must be a finite number >= 0"));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(CloveError::config("loss.scale", "must be positive"));
        }
        if self.top_k < 2 {
            return Err(CloveError::config("loss.top_k", "must be at least 2"));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt().max(COS_EPS);
    v.iter().map(|x| x / n).collect()
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let a: Vec<f64> = a.iter().map(|&x| x as f64).collect();
    let b: Vec<f64> = b.iter().map(|&x| x as f64).collect();
    dot(&normalized(&a), &normalized(&b))
}

/// Mean of the `k` most similar rows of `targets` (`[L,D]`) to `c`,
/// excluding the single most similar one. `None` when `L < 2`. Ties are
/// ordered by ascending index.
pub fn select_intra_negative(c: &[f64], targets: &[f64], k: usize) -> Option<Vec<f64>> {
    let d = c.len();
    let units: Vec<f64> = targets.chunks_exact(d).flat_map(normalized).collect();
    intra_negative(&normalized(c), &units, targets, k)
}

/// [`select_intra_negative`] with `c` and the rows of `targets` already
/// normalized (`units`).
fn intra_negative(cu: &[f64], units: &[f64], targets: &[f64], k: usize) -> Option<Vec<f64>> {
    let d = cu.len();
    let l = targets.len() / d;
    if l < 2 || k < 2 {
        return None;
    }
    let mut sims: Vec<(f64, usize)> = units.chunks_exact(d).enumerate().map(|(j, t)| (dot(cu, t), j)).collect();
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let k = k.min(l);
    let mut mean = vec![0.0; d];
    for &(_, j) in &sims[1..k] {
        for (m, &t) in mean.iter_mut().zip(&targets[j * d..(j + 1) * d]) {
            *m += t;
        }
    }
    let n = (k - 1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Some(mean)
}

/// Ring buffer of teacher vectors, oldest evicted first.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    data: Vec<f32>,
    cursor: usize,
    fill: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(CloveError::config("loss.queue_size", "queue needs positive capacity and width"));
        }
        Ok(Self {
            capacity,
            dim,
            data: vec![0.0; capacity * dim],
            cursor: 0,
            fill: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn push(&mut self, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(CloveError::Contract(format!("queue width {} vs vector {}", self.dim, v.len())));
        }
        let at = self.cursor * self.dim;
        self.data[at..at + self.dim].copy_from_slice(v);
        self.cursor = (self.cursor + 1) % self.capacity;
        self.fill = (self.fill + 1).min(self.capacity);
        Ok(())
    }

    /// Pushes the mean of the rows of `map` (`[L,D]`).
    pub fn push_mean(&mut self, map: &[f32]) -> Result<()> {
        let l = map.len() / self.dim;
        if l == 0 || map.len() % self.dim != 0 {
            return Err(CloveError::Contract("feature map width does not match queue".into()));
        }
        let mut mean = vec![0.0f64; self.dim];
        for row in map.chunks_exact(self.dim) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x as f64;
            }
        }
        let v: Vec<f32> = mean.iter().map(|m| (m / l as f64) as f32).collect();
        self.push(&v)
    }

    /// Slot index of the `age`-th oldest stored vector.
    fn slot(&self, age: usize) -> usize {
        let oldest = if self.fill < self.capacity { 0 } else { self.cursor };
        (oldest + age) % self.capacity
    }

    /// Stored vectors, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        (0..self.fill).map(move |a| {
            let s = self.slot(a) * self.dim;
            &self.data[s..s + self.dim]
        })
    }

    /// Uniform draw over filled slots; returns the slot index and vector.
    pub fn sample(&self, rng: &mut impl Rng) -> Option<(usize, &[f32])> {
        if self.fill == 0 {
            return None;
        }
        let s = self.slot(rng.gen_range(0..self.fill));
        Some((s, &self.data[s * self.dim..(s + 1) * self.dim]))
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    pub fn from_raw(capacity: usize, dim: usize, data: Vec<f32>, cursor: usize, fill: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 || data.len() != capacity * dim || cursor >= capacity || fill > capacity {
            return Err(CloveError::Contract("inconsistent queue state".into()));
        }
        if fill < capacity && cursor != fill {
            return Err(CloveError::Contract("queue cursor does not follow fill".into()));
        }
        Ok(Self {
            capacity,
            dim,
            data,
            cursor,
            fill,
        })
    }
}

/// Where the negative of a row comes from.
#[derive(Debug, Clone, Copy)]
pub enum NegativeSource<'a> {
    /// Hard negative chosen from the matched teacher map itself.
    Intra,
    /// One queue draw per row; an empty queue drops the negative term.
    Queue(&'a NegativeQueue),
    None,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub n_matches: usize,
    /// View pairs with a nonempty match set.
    pub n_units: usize,
    /// View pairs whose match set was empty.
    pub n_empty: usize,
    /// Rows dropped because the teacher map has a single location.
    pub n_no_negative: usize,
    pub sigma_pos: f64,
    pub sigma_neg: f64,
    pub hinge_active_frac: f64,
}

#[derive(Debug, Clone)]
struct Row {
    group: usize,
    student_row: usize,
    target: Vec<f64>,
    negative: Option<Vec<f64>>,
    unit: usize,
}

/// Accumulates matched rows over any number of (student view, teacher view)
/// pairs and emits one scalar on the tape. Each pair contributes its loss
/// summed over matches and divided by its match count; pairs are averaged.
#[derive(Debug, Clone)]
pub struct LossBuilder {
    cfg: LossConfig,
    dim: usize,
    rows: Vec<Row>,
    unit_sizes: Vec<usize>,
    stats: LossStats,
}

impl LossBuilder {
    pub fn new(cfg: LossConfig, dim: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            dim,
            rows: Vec::new(),
            unit_sizes: Vec::new(),
            stats: LossStats::default(),
        })
    }

    /// Adds one view pair. `student` holds the predictions `[L_u,D]` whose
    /// first row sits at `row_offset` inside the flattened student variable
    /// `group`; `targets` is the teacher map `[L_v,D]`; `pairs` index into
    /// both.
    #[allow(clippy::too_many_arguments)]
    pub fn add_pair<T: Real>(
        &mut self,
        group: usize,
        row_offset: usize,
        student: &[T],
        targets: &[f32],
        pairs: &[(usize, usize)],
        negatives: NegativeSource<'_>,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let d = self.dim;
        if student.len() % d != 0 || targets.len() % d != 0 || targets.is_empty() {
            return Err(CloveError::Contract("loss inputs do not match feature width".into()));
        }
        let (l_u, l_v) = (student.len() / d, targets.len() / d);
        if pairs.iter().any(|&(i, j)| i >= l_u || j >= l_v) {
            return Err(CloveError::Contract("match index out of range".into()));
        }
        if pairs.is_empty() {
            self.stats.n_empty += 1;
            return Ok(());
        }
        let unit = self.unit_sizes.len();
        self.unit_sizes.push(pairs.len());
        self.stats.n_matches += pairs.len();
        let t64: Vec<f64> = targets.iter().map(|&x| x as f64).collect();
        let units: Vec<f64> = match (self.cfg.mode, negatives) {
            (LossMode::Rank, NegativeSource::Intra) => t64.chunks_exact(d).flat_map(normalized).collect(),
            _ => Vec::new(),
        };
        for &(i, j) in pairs {
            let c: Vec<f64> = student[i * d..(i + 1) * d].iter().map(|x| x.as_f64()).collect();
            let negative = match (self.cfg.mode, negatives) {
                (LossMode::L2, _) | (_, NegativeSource::None) => Some(Vec::new()),
                (LossMode::Rank, NegativeSource::Intra) => intra_negative(&normalized(&c), &units, &t64, self.cfg.top_k),
                (LossMode::Rank, NegativeSource::Queue(q)) => Some(match q.sample(rng) {
                    Some((_, v)) => v.iter().map(|&x| x as f64).collect(),
                    None => Vec::new(),
                }),
            };
            if negative.is_none() {
                self.stats.n_no_negative += 1;
            }
            self.rows.push(Row {
                group,
                student_row: row_offset + i,
                target: t64[j * d..(j + 1) * d].to_vec(),
                negative,
                unit,
            });
        }
        Ok(())
    }

    pub fn stats(&self) -> LossStats {
        self.stats
    }

    /// Builds the scalar loss from flattened student variables `[R_g,D]`,
    /// one per group. Returns `None` when no view pair had matches.
    pub fn finish<T: Real>(mut self, tape: &mut Tape<T>, students: &[Var]) -> Result<(Option<Var>, LossStats)> {
        let n_units = self.unit_sizes.len();
        self.stats.n_units = n_units;
        let d = self.dim;
        let mut total: Option<Var> = None;
        let (mut pos_sum, mut neg_sum, mut neg_n, mut active, mut scored) = (0.0, 0.0, 0usize, 0usize, 0usize);
        for (g, &var) in students.iter().enumerate() {
            let rows: Vec<&Row> = self
                .rows
                .iter()
                .filter(|r| r.group == g && r.negative.is_some())
                .collect();
            if rows.is_empty() {
                continue;
            }
            let m = rows.len();
            let idx: Vec<usize> = rows.iter().map(|r| r.student_row).collect();
            let mut tgt = Vec::with_capacity(m * d);
            let mut neg = Vec::with_capacity(m * d);
            let mut weights = Vec::with_capacity(m);
            let mut has_neg = Vec::with_capacity(m);
            for r in &rows {
                tgt.extend(normalized(&r.target).into_iter().map(T::from_f64));
                let n = r.negative.as_deref().unwrap_or(&[]);
                has_neg.push(!n.is_empty());
                if n.is_empty() {
                    neg.extend(std::iter::repeat_n(T::zero(), d));
                } else {
                    neg.extend(normalized(n).into_iter().map(T::from_f64));
                }
                weights.push(T::from_f64(1.0 / (self.unit_sizes[r.unit] as f64 * n_units as f64)));
            }
            let c = tape.gather_rows(var, &idx)?;
            let c = tape.l2_normalize(c, COS_EPS)?;
            let t = tape.leaf(&[m, d], tgt, false)?;
            let pos = tape.row_dot(c, t)?;
            let per_row = match self.cfg.mode {
                LossMode::Rank => {
                    let nv = tape.leaf(&[m, d], neg, false)?;
                    let sneg = tape.row_dot(c, nv)?;
                    let a = tape.scale(pos, -self.cfg.scale)?;
                    let b = tape.add(a, sneg)?;
                    let pre = tape.add_scalar(b, self.cfg.margin)?;
                    let negs = tape.value(sneg).to_vec();
                    for (k, (&pv, &h)) in tape.value(pre).iter().zip(&has_neg).enumerate() {
                        if pv.as_f64() > 0.0 {
                            active += 1;
                        }
                        if h {
                            neg_sum += negs[k].as_f64();
                            neg_n += 1;
                        }
                    }
                    tape.relu(pre)?
                }
                LossMode::L2 => {
                    let a = tape.scale(pos, -2.0)?;
                    tape.add_scalar(a, 2.0)?
                }
            };
            pos_sum += tape.value(pos).iter().map(|v| v.as_f64()).sum::<f64>();
            scored += m;
            let w = tape.leaf(&[m], weights, false)?;
            let weighted = tape.mul(per_row, w)?;
            let s = tape.sum(weighted)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        if scored > 0 {
            self.stats.sigma_pos = pos_sum / scored as f64;
            if self.cfg.mode == LossMode::Rank {
                self.stats.hinge_active_frac = active as f64 / scored as f64;
            }
        }
        if neg_n > 0 {
            self.stats.sigma_neg = neg_sum / neg_n as f64;
        }
        Ok((total, self.stats))
    }
}
