use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "steps=10\nbatch_size=3\nenc.channels=4,8\nenc.hidden=8\nenc.dim=8\nattn.heads=2\n\
                    data.resolution=16\ndata.train_size=8\ndata.eval_size=6\nlog_wallclock=false\n";

fn clove(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clove"))
        .args(args)
        .current_dir(dir)
        .env_remove("CLOVE_SEED")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

fn pretrain(dir: &Path, out: &str, extra: &[&str]) -> String {
    let mut args = vec!["pretrain", "--config", "tiny.cfg", "--out", out, "--quiet"];
    args.extend_from_slice(extra);
    let o = clove(&args, dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    fs::read_to_string(dir.join(out).join("metrics.csv")).unwrap()
}

#[test]
fn pretrain_writes_one_row_per_step_and_repeats_itself() {
    let dir = setup();
    let a = pretrain(dir.path(), "a", &[]);
    assert_eq!(a.lines().count(), 11);
    assert!(a.starts_with("step,loss,lr,alpha,n_matches,sigma_pos,sigma_neg,hinge_active_frac,wallclock_ms\n"));
    assert!(dir.path().join("a/final.ckpt").exists());
    assert_eq!(pretrain(dir.path(), "b", &[]), a);
    assert_eq!(fs::read(dir.path().join("a/final.ckpt")).unwrap(), fs::read(dir.path().join("b/final.ckpt")).unwrap());

    let short = pretrain(dir.path(), "c", &["--set", "steps=4"]);
    assert_eq!(short.lines().count(), 5);
}

#[test]
fn dumped_config_reproduces_the_run() {
    let dir = setup();
    let a = pretrain(dir.path(), "a", &["--set", "seed=5", "--set", "t_pos=0.4"]);
    let o = clove(&["pretrain", "--config", "a/config.txt", "--out", "b", "--quiet"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("b/metrics.csv")).unwrap(), a);
    assert_eq!(fs::read_to_string(dir.path().join("b/config.txt")).unwrap(), fs::read_to_string(dir.path().join("a/config.txt")).unwrap());
}

#[test]
fn seed_comes_from_the_environment_unless_set() {
    let dir = setup();
    let run = |out: &str, env: Option<&str>, extra: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_clove"));
        cmd.args(["pretrain", "--config", "tiny.cfg", "--out", out, "--quiet"]).args(extra).current_dir(dir.path()).env_remove("CLOVE_SEED");
        if let Some(v) = env {
            cmd.env("CLOVE_SEED", v);
        }
        assert!(cmd.status().unwrap().success());
        fs::read_to_string(dir.path().join(out).join("metrics.csv")).unwrap()
    };
    let plain = run("p", None, &[]);
    let env7 = run("e", Some("7"), &[]);
    assert_ne!(plain, env7);
    assert_eq!(run("s", None, &["--set", "seed=7"]), env7);
    assert_eq!(run("o", Some("7"), &["--set", "seed=0"]), plain);
    assert!(fs::read_to_string(dir.path().join("e/config.txt")).unwrap().contains("seed=7\n"));
}

#[test]
fn resume_splices_the_curve() {
    let dir = setup();
    let full = pretrain(dir.path(), "full", &[]);
    pretrain(dir.path(), "r", &["--stop-after", "4"]);
    assert_eq!(fs::read_to_string(dir.path().join("r/metrics.csv")).unwrap().lines().count(), 5);
    let spliced = pretrain(dir.path(), "r", &["--resume", "r/final.ckpt"]);
    assert_eq!(spliced, full);
    assert_eq!(fs::read(dir.path().join("r/final.ckpt")).unwrap(), fs::read(dir.path().join("full/final.ckpt")).unwrap());
}

#[test]
fn bad_configuration_exits_2_naming_the_key() {
    let dir = setup();
    let o = clove(&["pretrain", "--config", "tiny.cfg", "--set", "no.such.key=1"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no.such.key"));
    let o = clove(&["pretrain", "--config", "tiny.cfg", "--set", "steps=lots"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("steps"));
    assert_eq!(code(&clove(&["pretrain", "--config", "missing.cfg"], dir.path())), 2);
    assert_eq!(code(&clove(&["pretrain", "--set", "steps"], dir.path())), 2);
    assert_eq!(code(&clove(&["bogus"], dir.path())), 2);
    assert_eq!(code(&clove(&[], dir.path())), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_clove"))
        .args(["pretrain", "--config", "tiny.cfg"])
        .current_dir(dir.path())
        .env("CLOVE_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("CLOVE_SEED"));
}

#[test]
fn eval_reports_without_touching_the_checkpoint() {
    let dir = setup();
    pretrain(dir.path(), "a", &["--set", "steps=1"]);
    let ckpt = dir.path().join("a/final.ckpt");
    let before = fs::read(&ckpt).unwrap();
    let o = clove(&["eval", "--checkpoint", "a/final.ckpt", "--config", "a/config.txt", "--out", "report.txt"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(&ckpt).unwrap(), before);
    let report = String::from_utf8(o.stdout).unwrap();
    assert_eq!(fs::read_to_string(dir.path().join("report.txt")).unwrap(), report);
    let field = |k: &str| -> f64 {
        report
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{k}=")))
            .unwrap_or_else(|| panic!("{k} missing from {report}"))
            .parse()
            .unwrap()
    };
    let (top1, base) = (field("corr_top1"), field("baseline"));
    assert_eq!(base, 1.0 / 64.0);
    // random features sit near chance: well below perfect retrieval
    assert!((0.0..0.5).contains(&top1), "{report}");
    assert!((0.0..=1.0).contains(&field("probe_acc")));
    assert_eq!(field("checkpoint_step"), 1.0);

    let again = clove(&["eval", "--checkpoint", "a/final.ckpt", "--config", "a/config.txt"], dir.path());
    assert_eq!(String::from_utf8(again.stdout).unwrap(), report);
    let other = clove(&["eval", "--checkpoint", "a/final.ckpt", "--config", "a/config.txt", "--corpus-seed", "3"], dir.path());
    assert_eq!(code(&other), 0);
    assert_ne!(String::from_utf8(other.stdout).unwrap(), report);
}

#[test]
fn eval_rejects_missing_and_corrupt_checkpoints() {
    let dir = setup();
    assert_eq!(code(&clove(&["eval", "--checkpoint", "nope.ckpt", "--config", "tiny.cfg"], dir.path())), 2);
    fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&clove(&["eval", "--checkpoint", "junk.ckpt", "--config", "tiny.cfg"], dir.path())), 3);
    pretrain(dir.path(), "a", &["--set", "steps=1"]);
    let o = clove(&["eval", "--checkpoint", "a/final.ckpt", "--config", "tiny.cfg", "--set", "enc.dim=16"], dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn ablate_writes_a_reproducible_table() {
    let dir = setup();
    fs::write(dir.path().join("grid.txt"), "# two cells\nnear t_pos=0.3\nfar t_pos=0.6 loss.negatives=inter\n").unwrap();
    let args = ["ablate", "--grid", "grid.txt", "--config", "tiny.cfg", "--set", "steps=3", "--seeds", "0,1", "--out", "t1.csv"];
    let o = clove(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(dir.path().join("t1.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "cell_id,override_keys,seed,corr_top1,corr_err,probe_acc,final_loss");
    assert_eq!(lines.len(), 5);
    assert!(lines[3].starts_with("far,t_pos=0.6;loss.negatives=inter,0,"));
    let mut again = args;
    again[args.len() - 1] = "t2.csv";
    assert_eq!(code(&clove(&again, dir.path())), 0);
    assert_eq!(fs::read_to_string(dir.path().join("t2.csv")).unwrap(), table);
}

#[test]
fn ablate_rejects_bad_grids() {
    let dir = setup();
    fs::write(dir.path().join("bad.txt"), "cell nope=3\n").unwrap();
    let o = clove(&["ablate", "--grid", "bad.txt", "--config", "tiny.cfg"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope"));
    assert_eq!(code(&clove(&["ablate", "--grid", "absent.txt", "--config", "tiny.cfg"], dir.path())), 2);
}

#[test]
fn match_debug_on_identity_views_is_diagonal_heavy() {
    let dir = setup();
    let o = clove(
        &["match-debug", "--config", "tiny.cfg", "--identity", "--set", "t_pos=0.15", "--out", "pairs.csv"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("pairs.csv")).unwrap();
    let rows: Vec<Vec<f64>> = text.lines().skip(1).map(|l| l.split(',').map(|f| f.parse().unwrap()).collect()).collect();
    // 16px views at total stride 2: an 8x8 grid with cell spacing 0.125
    for i in 0..64 {
        let mine: Vec<&Vec<f64>> = rows.iter().filter(|r| r[0] == i as f64).collect();
        let diag = mine.iter().find(|r| r[1] == i as f64).expect("diagonal pair present");
        assert_eq!(diag[6], 0.0);
        assert!(mine.iter().all(|r| r[6] >= diag[6]));
    }
    let diagonal = rows.iter().filter(|r| r[0] == r[1]).count();
    assert_eq!(diagonal, 64);
    assert!(diagonal * 5 >= rows.len(), "{} pairs", rows.len());

    let stdout = clove(&["match-debug", "--config", "tiny.cfg", "--identity", "--set", "t_pos=0.15"], dir.path());
    assert_eq!(String::from_utf8(stdout.stdout).unwrap(), text);
    let random = clove(&["match-debug", "--config", "tiny.cfg", "--seed", "4", "--image", "2"], dir.path());
    assert_eq!(code(&random), 0);
    assert!(String::from_utf8(random.stdout).unwrap().starts_with("i,j,x1,y1,x2,y2,distance\n"));
    assert_eq!(code(&clove(&["match-debug", "--config", "tiny.cfg", "--image", "8"], dir.path())), 2);
}

#[test]
fn plot_draws_every_metric_column() {
    let dir = setup();
    let a = pretrain(dir.path(), "a", &["--set", "steps=2"]);
    assert_eq!(a.lines().count(), 3);
    let o = clove(&["plot", "--metrics", "a/metrics.csv", "--out", "figs"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let header: Vec<&str> = a.lines().next().unwrap().split(',').collect();
    let mut made: Vec<String> = fs::read_dir(dir.path().join("figs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    made.sort();
    let mut want: Vec<String> = header[1..].iter().map(|c| format!("{c}.svg")).collect();
    want.sort();
    assert_eq!(made, want);
    let svg = fs::read_to_string(dir.path().join("figs/loss.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<polyline"));
}

#[test]
fn plot_rejects_malformed_and_missing_csv() {
    let dir = setup();
    fs::write(dir.path().join("bad.csv"), "step,loss\n1,2\n2,oops\n").unwrap();
    assert_eq!(code(&clove(&["plot", "--metrics", "bad.csv"], dir.path())), 3);
    fs::write(dir.path().join("ragged.csv"), "step,loss\n1,2,3\n").unwrap();
    assert_eq!(code(&clove(&["plot", "--metrics", "ragged.csv"], dir.path())), 3);
    assert_eq!(code(&clove(&["plot", "--metrics", "absent.csv"], dir.path())), 2);
}
