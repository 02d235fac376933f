use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use clove::augment::{sample_view, AugmentProfile};
use clove::evalkit::ablation::{directional_verdicts, evaluate_reports, parse_grid, run_ablation, standard_grid, table_csv, Datasets};
use clove::evalkit::corpus::{generate_corpus, generate_image, Split};
use clove::matching::{build_grid, match_pairs};
use clove::rng::{stream, TAG_VIEWS};
use clove::trainer::{run, RunOptions};
use clove::{TrainConfig, TrainState};

use crate::{ConfigArgs, Failure};

pub const SEED_ENV: &str = "CLOVE_SEED";

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} not found", path.display())))
    }
}

fn read(path: &Path, what: &str) -> Result<String, Failure> {
    require(path, what)?;
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("reading {what} {}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("creating {}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("writing {}: {e}", path.display())))
}

/// Defaults, then `CLOVE_SEED`, then the config file, then `--set` overrides.
pub fn load_config(args: &ConfigArgs) -> Result<TrainConfig, Failure> {
    let mut c = TrainConfig::default();
    if let Ok(v) = std::env::var(SEED_ENV) {
        c.set("seed", &v)
            .map_err(|e| Failure::Usage(format!("{SEED_ENV}: {e}")))?;
    }
    if let Some(p) = &args.config {
        c.apply_text(&read(p, "config file")?)?;
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects key=value, got `{o}`")))?;
        c.set(k.trim(), v)?;
    }
    c.validate()?;
    Ok(c)
}

pub fn pretrain(args: &ConfigArgs, out: &Path, resume: Option<&Path>, checkpoint_every: usize, stop_after: Option<usize>, quiet: bool) -> Result<(), Failure> {
    let c = load_config(args)?;
    if let Some(p) = resume {
        require(p, "checkpoint")?;
    }
    write(&out.join("config.txt"), &c.dump())?;
    let corpus = generate_corpus(c.train_size, c.data_seed, Split::Train, &c.corpus_profile())?;
    let mut state = match resume {
        Some(p) => TrainState::load(c.clone(), p)?,
        None => TrainState::new(c.clone())?,
    };
    let opts = RunOptions {
        metrics: Some(out.join("metrics.csv")),
        checkpoint: Some(out.join("final.ckpt")),
        checkpoint_every,
        stop_after,
    };
    let every = (c.steps / 20).max(1);
    run(&mut state, &corpus, &opts, |m| {
        if !quiet && (m.step % every == 0 || m.step == c.steps) {
            eprintln!(
                "step {}/{} loss {:.4} lr {:.4} matches {} sigma+ {:.3} sigma- {:.3}",
                m.step, c.steps, m.loss, m.lr, m.n_matches, m.sigma_pos, m.sigma_neg
            );
        }
    })?;
    Ok(())
}

pub fn eval(checkpoint: &Path, args: &ConfigArgs, corpus_seed: Option<u64>, out: Option<&Path>) -> Result<(), Failure> {
    require(checkpoint, "checkpoint")?;
    let mut c = load_config(args)?;
    if let Some(s) = corpus_seed {
        c.data_seed = s;
    }
    let state = TrainState::load(c.clone(), checkpoint)?;
    let data = Datasets::for_config(&c)?;
    let (r, p) = evaluate_reports(&state, &data)?;
    let mut text = String::new();
    let _ = writeln!(text, "checkpoint_step={}", state.step);
    let _ = writeln!(text, "features={}", if c.eval_use_teacher { "teacher" } else { "student" });
    let _ = writeln!(text, "images={}", r.n_images);
    let _ = writeln!(text, "queries={}", r.n_queries);
    let _ = writeln!(text, "corr_top1={:.6}", r.top1);
    let _ = writeln!(text, "baseline={:.6}", r.baseline);
    let _ = writeln!(text, "top1_over_baseline={:.3}", r.top1 / r.baseline);
    let _ = writeln!(text, "corr_err={:.6}", r.mean_error);
    for (t, frac) in &r.within {
        let _ = writeln!(text, "within_{t}={frac:.6}");
    }
    let _ = writeln!(text, "degenerate_images={}", r.degenerate_images);
    let _ = writeln!(text, "probe_train_acc={:.6}", p.train_accuracy);
    let _ = writeln!(text, "probe_acc={:.6}", p.test_accuracy);
    print!("{text}");
    if let Some(o) = out {
        write(o, &text)?;
    }
    Ok(())
}

pub fn ablate(grid: Option<&Path>, args: &ConfigArgs, seeds: &[u64], out: &Path) -> Result<(), Failure> {
    let base = load_config(args)?;
    let cells = match grid {
        Some(p) => parse_grid(&read(p, "grid file")?)?,
        None => standard_grid(),
    };
    if seeds.is_empty() {
        return Err(Failure::Usage("--seeds must name at least one seed".into()));
    }
    let rows = run_ablation(&base, &cells, seeds, |r| match &r.error {
        Some(e) => eprintln!("{} seed {}: failed: {e}", r.cell_id, r.seed),
        None => eprintln!("{} seed {}: top1 {:.4} probe {:.4} loss {:.4}", r.cell_id, r.seed, r.corr_top1, r.probe_acc, r.final_loss),
    })?;
    write(out, &table_csv(&rows))?;
    let present = |id: &str| rows.iter().any(|r| r.cell_id == id);
    if standard_grid().iter().all(|c| present(&c.id)) {
        for d in directional_verdicts(&rows) {
            println!("{:<12} {}: {}", d.verdict.to_string(), d.name, d.detail);
        }
    }
    Ok(())
}

pub fn match_debug(args: &ConfigArgs, image: usize, seed: Option<u64>, identity: bool, out: Option<&Path>) -> Result<(), Failure> {
    let c = load_config(args)?;
    if image >= c.train_size {
        return Err(Failure::Usage(format!("--image {image} outside the {} training images", c.train_size)));
    }
    let seed = seed.unwrap_or(c.seed);
    let img = generate_image(c.data_seed, Split::Train, image, &c.corpus_profile());
    let profile = if identity {
        AugmentProfile::identity(c.resolution)
    } else {
        c.global_aug.clone()
    };
    let mut rng = stream(seed, &[TAG_VIEWS, image as u64]);
    let v1 = sample_view(&img.image, &mut rng, &profile)?;
    let v2 = sample_view(&img.image, &mut rng, &profile)?;
    let stride = c.encoder.total_stride();
    let grid = |g: &clove::augment::ViewGeometry| build_grid(g, g.out_h / stride, g.out_w / stride);
    let (g1, g2) = (grid(&v1.geometry)?, grid(&v2.geometry)?);
    let m = match_pairs(&g1, &g2, c.t_pos)?;
    let mut text = String::from("i,j,x1,y1,x2,y2,distance\n");
    for &(i, j) in &m.pairs {
        let (a, b) = (g1.points[i], g2.points[j]);
        let _ = writeln!(text, "{i},{j},{:.6},{:.6},{:.6},{:.6},{:.6}", a.x, a.y, b.x, b.y, a.distance(&b));
    }
    for (name, v) in [("view 1", &v1), ("view 2", &v2)] {
        let g = v.geometry;
        eprintln!(
            "{name}: left {:.3} top {:.3} width {:.3} height {:.3} flip {}",
            g.left, g.top, g.width, g.height, g.flip
        );
    }
    eprintln!("{} pairs at t_pos {} over {}x{} grids", m.len(), c.t_pos, g1.len(), g2.len());
    match out {
        Some(p) => write(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
