//! Grid runner over configuration overrides, and directional verdicts on
//! the resulting table.

use std::collections::BTreeMap;
use std::fmt;

use crate::config::TrainConfig;
use crate::error::{CloveError, Result};
use crate::evalkit::corpus::{generate_corpus, Split, SyntheticImage, N_CLASSES};
use crate::evalkit::correspondence::{correspondence_eval, CorrespondenceReport, EvalSettings};
use crate::evalkit::probe::{linear_probe, pooled_features, ProbeConfig, ProbeReport};
use crate::trainer::{run, RunOptions, TrainState};

pub const ABLATION_HEADER: &str = "cell_id,override_keys,seed,corr_top1,corr_err,probe_acc,final_loss";

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: String,
    pub overrides: Vec<(String, String)>,
}

impl Cell {
    pub fn new(id: &str, overrides: &[(&str, &str)]) -> Self {
        Self {
            id: id.to_string(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn apply(&self, base: &TrainConfig, seed: u64) -> Result<TrainConfig> {
        let mut c = base.clone();
        for (k, v) in &self.overrides {
            c.set(k, v)?;
        }
        c.seed = seed;
        c.validate()?;
        Ok(c)
    }

    /// `key=value` pairs joined by `;`.
    pub fn override_keys(&self) -> String {
        self.overrides
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Parses a grid file: one cell per line, `cell_id key=value key=value`.
/// An empty grid yields a single base cell.
pub fn parse_grid(text: &str) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id = parts.next().expect("non-empty line").to_string();
        let mut overrides = Vec::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| CloveError::config(format!("grid line {}", n + 1), format!("expected key=value, got `{p}`")))?;
            overrides.push((k.to_string(), v.to_string()));
        }
        cells.push(Cell { id, overrides });
    }
    if cells.is_empty() {
        cells.push(Cell::new("base", &[]));
    }
    let mut probe = TrainConfig::default();
    for c in &cells {
        for (k, v) in &c.overrides {
            probe.set(k, v)?;
        }
    }
    Ok(cells)
}

pub fn tpos_grid() -> Vec<Cell> {
    ["0.5", "0.6", "0.7", "0.8", "0.9"]
        .iter()
        .map(|t| Cell::new(&format!("tpos_{t}"), &[("t_pos", t)]))
        .collect()
}

pub fn negatives_grid() -> Vec<Cell> {
    ["intra", "inter", "inter-avg"]
        .iter()
        .map(|s| Cell::new(&format!("neg_{s}"), &[("loss.negatives", s)]))
        .collect()
}

pub fn loss_multicrop_grid() -> Vec<Cell> {
    let mut v = Vec::new();
    for mode in ["rank", "l2"] {
        for (tag, locals) in [("single", "0"), ("multi", "4")] {
            v.push(Cell::new(&format!("{mode}_{tag}"), &[("loss.mode", mode), ("crop.local", locals)]));
        }
    }
    v
}

pub fn attention_grid() -> Vec<Cell> {
    vec![
        Cell::new("nmhsa", &[("attn.normalize_qk", "true")]),
        Cell::new("mhsa", &[("attn.normalize_qk", "false")]),
    ]
}

pub fn standard_grid() -> Vec<Cell> {
    let mut v = tpos_grid();
    v.extend(negatives_grid());
    v.extend(loss_multicrop_grid());
    v.extend(attention_grid());
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell_id: String,
    pub override_keys: String,
    pub seed: u64,
    pub corr_top1: f64,
    pub corr_err: f64,
    pub probe_acc: f64,
    pub final_loss: f64,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.cell_id, self.override_keys, self.seed, self.corr_top1, self.corr_err, self.probe_acc, self.final_loss
        )
    }
}

pub fn table_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Training and evaluation images for a configuration.
pub struct Datasets {
    pub train: Vec<SyntheticImage>,
    pub eval: Vec<SyntheticImage>,
}

impl Datasets {
    pub fn for_config(c: &TrainConfig) -> Result<Self> {
        let p = c.corpus_profile();
        Ok(Self {
            train: generate_corpus(c.train_size, c.data_seed, Split::Train, &p)?,
            eval: generate_corpus(c.eval_size, c.data_seed, Split::Eval, &p)?,
        })
    }
}

/// Evaluation seed used for every cell, so cells see identical view pairs.
pub const EVAL_SEED: u64 = 0;

/// Full correspondence and probe reports of a trained state.
pub fn evaluate_reports(state: &TrainState, data: &Datasets) -> Result<(CorrespondenceReport, ProbeReport)> {
    let c = &state.config;
    let enc = if c.eval_use_teacher { &state.teacher } else { &state.student };
    let settings = EvalSettings::new(c.eval_profile(), EVAL_SEED, c.eval_t_pos);
    let report = correspondence_eval(enc, &data.eval, &settings)?;
    let n_probe = data.train.len().min(512);
    let train_x = pooled_features(enc, &data.train[..n_probe])?;
    let train_y: Vec<usize> = data.train[..n_probe].iter().map(|im| im.dominant_class() as usize).collect();
    let test_x = pooled_features(enc, &data.eval)?;
    let test_y: Vec<usize> = data.eval.iter().map(|im| im.dominant_class() as usize).collect();
    let probe = linear_probe(&train_x, &train_y, &test_x, &test_y, N_CLASSES, &ProbeConfig::default())?;
    Ok((report, probe))
}

/// Correspondence top-1, mean retrieval error and probe accuracy.
pub fn evaluate(state: &TrainState, data: &Datasets) -> Result<(f64, f64, f64)> {
    let (r, p) = evaluate_reports(state, data)?;
    Ok((r.top1, r.mean_error, p.test_accuracy))
}

type CellOutcome = std::result::Result<(f64, f64, f64, f64), String>;

fn run_cell(cfg: TrainConfig, data: &Datasets) -> Result<(f64, f64, f64, f64)> {
    let mut state = TrainState::new(cfg)?;
    let metrics = run(&mut state, &data.train, &RunOptions::default(), |_| {})?;
    let final_loss = metrics.iter().rev().find(|m| !m.skipped).map_or(f64::NAN, |m| m.loss);
    let (top1, err, probe) = evaluate(&state, data)?;
    Ok((top1, err, probe, final_loss))
}

/// Trains and evaluates every cell for every seed. Failing cells produce a
/// row of NaNs carrying the error; the table is always complete. Cells whose
/// effective configuration repeats an earlier one reuse its result.
pub fn run_ablation(
    base: &TrainConfig,
    cells: &[Cell],
    seeds: &[u64],
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    for c in cells {
        c.apply(base, 0)?;
    }
    let mut cache: BTreeMap<String, Datasets> = BTreeMap::new();
    let mut done: BTreeMap<String, CellOutcome> = BTreeMap::new();
    let mut rows = Vec::new();
    for cell in cells {
        for &seed in seeds {
            let cfg = cell.apply(base, seed)?;
            let key = format!("{}|{}|{}|{}", cfg.data_seed, cfg.train_size, cfg.eval_size, cfg.resolution);
            if !cache.contains_key(&key) {
                cache.insert(key.clone(), Datasets::for_config(&cfg)?);
            }
            let outcome = match done.get(&cfg.dump()) {
                Some(o) => o.clone(),
                None => {
                    let dump = cfg.dump();
                    let o = run_cell(cfg, &cache[&key]).map_err(|e| e.to_string());
                    done.insert(dump, o.clone());
                    o
                }
            };
            let row = match outcome {
                Ok((t, e, p, l)) => AblationRow {
                    cell_id: cell.id.clone(),
                    override_keys: cell.override_keys(),
                    seed,
                    corr_top1: t,
                    corr_err: e,
                    probe_acc: p,
                    final_loss: l,
                    error: None,
                },
                Err(e) => AblationRow {
                    cell_id: cell.id.clone(),
                    override_keys: cell.override_keys(),
                    seed,
                    corr_top1: f64::NAN,
                    corr_err: f64::NAN,
                    probe_acc: f64::NAN,
                    final_loss: f64::NAN,
                    error: Some(e),
                },
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Mean and population standard deviation of a cell's correspondence
/// accuracy over seeds; failed runs count as NaN.
pub fn cell_stats(rows: &[AblationRow], cell_id: &str) -> Option<(f64, f64)> {
    let v: Vec<f64> = rows.iter().filter(|r| r.cell_id == cell_id).map(|r| r.corr_top1).collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Verdict {
    Fail,
    Inconclusive,
    Pass,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Inconclusive => "INCONCLUSIVE",
            Verdict::Fail => "FAIL",
        })
    }
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 - a.1 <= b.0 + b.1 && b.0 - b.1 <= a.0 + a.1
}

/// `a ≥ b`: separated one-std bands decide, overlapping bands are
/// inconclusive.
pub fn at_least(a: (f64, f64), b: (f64, f64)) -> Verdict {
    if !(a.0.is_finite() && b.0.is_finite()) {
        return Verdict::Fail;
    }
    if overlap(a, b) {
        Verdict::Inconclusive
    } else if a.0 > b.0 {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

/// Best mean at an interior position. The winner must clear both endpoints'
/// bands to pass; an endpoint winner clear of every interior band fails.
pub fn interior_max(stats: &[(f64, f64)]) -> Verdict {
    if stats.len() < 3 || stats.iter().any(|s| !s.0.is_finite()) {
        return Verdict::Fail;
    }
    let best = (0..stats.len()).fold(0, |b, i| if stats[i].0 > stats[b].0 { i } else { b });
    let last = stats.len() - 1;
    let top = stats[best];
    if best != 0 && best != last {
        if overlap(top, stats[0]) || overlap(top, stats[last]) {
            Verdict::Inconclusive
        } else {
            Verdict::Pass
        }
    } else if stats[1..last].iter().any(|s| overlap(*s, top)) {
        Verdict::Inconclusive
    } else {
        Verdict::Fail
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Directional {
    pub name: &'static str,
    pub verdict: Verdict,
    pub detail: String,
}

fn stats_or_nan(rows: &[AblationRow], id: &str) -> (f64, f64) {
    cell_stats(rows, id).unwrap_or((f64::NAN, f64::NAN))
}

fn fmt_stats(id: &str, s: (f64, f64)) -> String {
    format!("{id}={:.4}±{:.4}", s.0, s.1)
}

/// The four directional orderings over a table produced from
/// [`standard_grid`] (or its parts).
pub fn directional_verdicts(rows: &[AblationRow]) -> Vec<Directional> {
    let ids = |cells: Vec<Cell>| cells.into_iter().map(|c| c.id).collect::<Vec<_>>();
    let mut out = Vec::new();

    let tpos = ids(tpos_grid());
    let ts: Vec<(f64, f64)> = tpos.iter().map(|id| stats_or_nan(rows, id)).collect();
    out.push(Directional {
        name: "t_pos interior maximum",
        verdict: interior_max(&ts),
        detail: tpos.iter().zip(&ts).map(|(i, s)| fmt_stats(i, *s)).collect::<Vec<_>>().join(" "),
    });

    let [intra, inter, avg] = ["neg_intra", "neg_inter", "neg_inter-avg"].map(|i| stats_or_nan(rows, i));
    out.push(Directional {
        name: "intra >= inter, inter-avg",
        verdict: at_least(intra, inter).min(at_least(intra, avg)),
        detail: format!("{} {} {}", fmt_stats("intra", intra), fmt_stats("inter", inter), fmt_stats("inter-avg", avg)),
    });

    let [rs, rm, ls, lm] = ["rank_single", "rank_multi", "l2_single", "l2_multi"].map(|i| stats_or_nan(rows, i));
    out.push(Directional {
        name: "multi-crop helps rank, not l2",
        verdict: at_least(rm, rs).min(at_least(ls, lm)),
        detail: [("rank_single", rs), ("rank_multi", rm), ("l2_single", ls), ("l2_multi", lm)]
            .iter()
            .map(|(i, s)| fmt_stats(i, *s))
            .collect::<Vec<_>>()
            .join(" "),
    });

    let [n, m] = ["nmhsa", "mhsa"].map(|i| stats_or_nan(rows, i));
    out.push(Directional {
        name: "nmhsa >= mhsa",
        verdict: at_least(n, m),
        detail: format!("{} {}", fmt_stats("nmhsa", n), fmt_stats("mhsa", m)),
    });
    out
}
