use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn popcft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_popcft"))
        .args(args)
        .env_remove("POPCFT_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_spec(size: usize, extra: &str) -> String {
    format!(
        r#"
name = "cli-test"
downstream_title = "parkland"
co_titles = ["tower", "canyon"]
seeds = [0]
keep_checkpoints = true
{extra}

[data]
n_train = 6
n_validation = 3
n_test = 3
n_unlabeled = 4
seed = 1

[data.gen]
width = {size}
height = {size}
max_objects = 3
min_object_size = 4
max_object_size = 8

[train_config]
base_lr = 1e-3
epochs = 1
warmup_epochs = 0
per_step_batch = 2
accumulation_steps = 1

[train_config.model]
anchor_size = 8.0
rpn_pre_nms_top_n = 40
train_proposals = 6
test_proposals = 6
head_hidden = 16
decoder_heads = 2

[train_config.model.student]
patch_size = 4
embed_dim = 16
depth = 1
num_heads = 2
mlp_ratio = 2
input_height = {size}
input_width = {size}

[train_config.model.target]
patch_size = 4
embed_dim = 16
depth = 1
num_heads = 2
mlp_ratio = 2
input_height = {size}
input_width = {size}

[target]
pretrain = false
"#
    )
}

fn write_spec(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_writes_one_directory_per_title_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), "s.toml", &tiny_spec(16, ""));
    let out = tmp.path().join("out");
    let o = popcft(&["gen", "--spec", &spec, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for t in ["parkland", "tower", "canyon"] {
        assert!(out.join("data").join(t).join("manifest.json").exists());
    }
    assert_eq!(stdout(&o).lines().count(), 3);
    let before = tree_bytes(&out);
    let o = popcft(&["gen", "--spec", &spec, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(tree_bytes(&out), before);
}

#[test]
fn gen_into_an_unwritable_location_fails_without_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), "s.toml", &tiny_spec(16, ""));
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "not a directory").unwrap();
    let out = blocker.join("out");
    let o = popcft(&["gen", "--spec", &spec, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!out.exists());
    assert_eq!(std::fs::read_to_string(&blocker).unwrap(), "not a directory");
}

fn report_values(path: &Path) -> (f64, f64) {
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    (v["map"].as_f64().unwrap(), v["f1"].as_f64().unwrap())
}

#[test]
fn train_then_eval_writes_a_report_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), "s.toml", &tiny_spec(16, ""));
    let mut values = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let o = popcft(&["train", "--spec", &spec, "--out", out.to_str().unwrap(), "--seed", "4", "-q"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let line = stdout(&o);
        assert!(line.starts_with("seed 4:"), "{line}");
        let ckpt = line.trim().rsplit(' ').next().unwrap().to_string();
        let report = tmp.path().join(format!("{run}.json"));
        let o = popcft(&[
            "eval",
            "--spec",
            &spec,
            "--out",
            out.to_str().unwrap(),
            "--checkpoint",
            &ckpt,
            "--split",
            "test",
            "--report",
            report.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        values.push(report_values(&report));
    }
    assert_eq!(values[0], values[1]);
    assert!((0.0..=1.0).contains(&values[0].0) && (0.0..=1.0).contains(&values[0].1));
}

#[test]
fn eval_rejects_a_checkpoint_of_another_input_size() {
    let tmp = tempfile::tempdir().unwrap();
    let small = write_spec(tmp.path(), "small.toml", &tiny_spec(16, ""));
    let large = write_spec(tmp.path(), "large.toml", &tiny_spec(32, ""));
    let out = tmp.path().join("small");
    let o = popcft(&["train", "--spec", &small, "--out", out.to_str().unwrap(), "-q"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = stdout(&o).trim().rsplit(' ').next().unwrap().to_string();
    let o = popcft(&["eval", "--spec", &large, "--out", tmp.path().join("large").to_str().unwrap(), "--checkpoint", &ckpt, "-q"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).to_lowercase().contains("dimension") || stderr(&o).contains("32"), "{}", stderr(&o));
}

#[test]
fn single_cell_grid_selects_that_cell_and_budgeted_runs_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), "g.toml", &tiny_spec(16, "[grid]\nalpha = [0.3]\nbeta = [0.2]\n"));
    let out = tmp.path().join("g");
    let o = popcft(&["gridsearch", "--spec", &spec, "--out", out.to_str().unwrap(), "-q"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("best: alpha = 0.30, beta = 0.20"), "{}", stdout(&o));
    assert!(out.join("grid.json").exists());

    let spec = write_spec(tmp.path(), "g2.toml", &tiny_spec(16, "[grid]\nalpha = [0.0, 0.2]\nbeta = [0.1]\n"));
    let out = tmp.path().join("g2");
    let o = popcft(&["gridsearch", "--spec", &spec, "--out", out.to_str().unwrap(), "--max-new-cells", "1", "-q"]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("stopped after 1 new cells"));
    assert!(!out.join("grid.json").exists());
    assert_eq!(std::fs::read_dir(out.join("cells")).unwrap().count(), 1);
    let o = popcft(&["gridsearch", "--spec", &spec, "--out", out.to_str().unwrap(), "-q"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_dir(out.join("cells")).unwrap().count(), 2);
    assert!(out.join("grid.txt").exists());
}

#[test]
fn ablate_reports_four_rows_from_one_run_per_condition_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), "a.toml", &tiny_spec(16, "").replace("seeds = [0]", "seeds = [0, 1]"));
    let out = tmp.path().join("a");
    let o = popcft(&["ablate", "--spec", &spec, "--out", out.to_str().unwrap(), "-q"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("true") || l.starts_with("false")).collect();
    assert_eq!(rows.len(), 4, "{text}");
    assert_eq!(std::fs::read_dir(out.join("cells")).unwrap().count(), 8);
    for cond in ["csl+ssl", "csl", "ssl", "supervised"] {
        assert!(out.join("summaries/parkland").join(format!("{cond}.json")).exists());
    }
}

fn write_summary(out: &Path, title: &str, cond: &str, map: f64, f1: f64) {
    let dir = out.join("summaries").join(title);
    std::fs::create_dir_all(&dir).unwrap();
    let json = format!(
        r#"{{"title":"{title}","condition":"{cond}","per_seed":[{{"seed":0,"test_map":{map},"test_f1":{f1},"validation_map":{map}}}],"mean_map":{map},"mean_f1":{f1}}}"#
    );
    std::fs::write(dir.join(format!("{cond}.json")), json).unwrap();
}

#[test]
fn report_combines_titles_and_names_missing_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), "r.toml", &tiny_spec(16, ""));
    let out = tmp.path().join("r");
    let rows = [("parkland", 0.662, 0.938), ("tower", 0.5, 0.7), ("canyon", 0.4, 0.41)];
    for (t, sup, cft) in &rows[..2] {
        write_summary(&out, t, "supervised", *sup, sup / 2.0);
        write_summary(&out, t, "csl+ssl", *cft, cft / 2.0);
    }
    let o = popcft(&["report", "--spec", &spec, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("canyon"), "{}", stderr(&o));

    let (t, sup, cft) = rows[2];
    write_summary(&out, t, "supervised", sup, sup / 2.0);
    write_summary(&out, t, "csl+ssl", cft, cft / 2.0);
    let o = popcft(&["report", "--spec", &spec, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("0.5862") && text.contains("0.4138"), "{text}");
    assert!(text.contains("paired") && text.contains("two-sample"));
    let again = popcft(&["report", "--spec", &spec, "--out", out.to_str().unwrap()]);
    assert_eq!(stdout(&again), text);
}

#[test]
fn usage_and_spec_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&popcft(&["frobnicate"])), 1);
    assert_eq!(code(&popcft(&["train"])), 1);
    assert_eq!(code(&popcft(&["--help"])), 0);
    let bad = write_spec(tmp.path(), "bad.toml", &tiny_spec(16, "").replace(r#"["tower", "canyon"]"#, r#"["parkland"]"#));
    let o = popcft(&["gen", "--spec", &bad]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("co-title"));
    let spec = write_spec(tmp.path(), "s.toml", &tiny_spec(16, ""));
    let o = popcft(&["train", "--spec", &spec, "--fraction", "1.5", "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn numeric_divergence_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), "d.toml", &tiny_spec(16, "").replace("base_lr = 1e-3", "base_lr = 1e300"));
    let o = popcft(&["train", "--spec", &spec, "--out", tmp.path().join("d").to_str().unwrap(), "--epochs", "3", "-q"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}
