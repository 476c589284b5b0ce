use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ewod_core::adapters::{load_lad, save_lad, AdapterState, Dtype, LoraDelta};
use ewod_core::metrics::FogsReport;
use ewod_core::protocol::{write_jsonl, DetectionRecord, TaskSchedule};
use ewod_core::Matrix;
use tempfile::TempDir;

fn ewod(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ewod"))
        .args(args)
        .current_dir(dir)
        .env("EWOD_LOG", "error")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const WEATHER: &str = r#"{"tasks": [
  {"domain": "daytime-sunny", "classes": ["bike", "bus"]},
  {"domain": "night-sunny", "classes": ["car", "motor"]},
  {"domain": "night-rainy", "classes": ["person", "rider"]}],
 "withheld": ["truck"]}"#;

fn schedule(dir: &Path) {
    fs::write(dir.join("sc.json"), WEATHER).unwrap();
    let o = ewod(&["protocol", "--config", "sc.json", "--out", "s.json"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn protocol_weather_schedule() {
    let dir = TempDir::new().unwrap();
    schedule(dir.path());
    let s = TaskSchedule::load(dir.path().join("s.json")).unwrap();
    assert_eq!(s.num_tasks(), 3);
    assert_eq!(s.withheld.len(), 1);
    assert_eq!(s.class_name(s.withheld[0]), Some("truck"));
    assert_eq!(s.unknown_id(), 8);
}

#[test]
fn protocol_rejects_overlap_and_empty() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    fs::write(
        p.join("bad.json"),
        r#"{"tasks": [{"domain": "a", "classes": ["car"]}, {"domain": "b", "classes": ["car"]}]}"#,
    )
    .unwrap();
    let o = ewod(&["protocol", "--config", "bad.json", "--out", "s.json"], p);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("task 1") && msg.contains("task 2"), "{msg}");

    fs::write(p.join("empty.json"), r#"{"tasks": []}"#).unwrap();
    let o = ewod(&["protocol", "--config", "empty.json", "--out", "s.json"], p);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_missing_schedule_is_input_error() {
    let dir = TempDir::new().unwrap();
    let o = ewod(&["run", "--schedule", "nope.json", "--out", "r"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_both_modes_then_eval() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    schedule(p);
    fs::write(
        p.join("exp.json"),
        r#"{"train_scenes": [6], "test_scenes_per_domain": 3, "optim": {"epochs": 2}}"#,
    )
    .unwrap();
    for mode in ["dual-lora", "finetune"] {
        let o = ewod(&["run", "--schedule", "s.json", "--config", "exp.json", "--mode", mode, "--out", mode, "--threads", "2"], p);
        assert!(o.status.success(), "{}", stderr(&o));
        let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join(mode).join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["provenance"]["config"]["mode"], mode);
        assert_eq!(manifest["tasks"].as_array().unwrap().len(), 3);
        for t in 1..=3 {
            assert!(p.join(mode).join(format!("task_{t}.lad")).is_file());
            assert!(p.join(mode).join(format!("task_{t}.json")).is_file());
        }
    }
    let mut args = vec!["eval".to_string(), "--schedule".into(), "s.json".into(), "--out".into(), "rep.json".into()];
    for t in 1..=3 {
        args.extend(["--gt".into(), format!("finetune/task_{t}_gt.jsonl")]);
        args.extend(["--pred".into(), format!("finetune/task_{t}_predictions.jsonl")]);
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = ewod(&args, p);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("FSS/OSS/GSS/FOGS = "));
    let rep: FogsReport = serde_json::from_str(&fs::read_to_string(p.join("rep.json")).unwrap()).unwrap();
    let run: FogsReport = serde_json::from_str(&fs::read_to_string(p.join("finetune/report.json")).unwrap()).unwrap();
    assert_eq!(rep.per_task, run.per_task);
    assert!(rep.provenance.is_some());
}

#[test]
fn run_overrides_reach_provenance() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    schedule(p);
    fs::write(
        p.join("exp.json"),
        r#"{"train_scenes": [4], "test_scenes_per_domain": 2, "optim": {"epochs": 1}}"#,
    )
    .unwrap();
    let o = ewod(
        &["run", "--schedule", "s.json", "--config", "exp.json", "--seed", "11", "--rank", "3", "--beta-min", "0.1", "--beta-max", "0.9", "--out", "r"],
        p,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("r/manifest.json")).unwrap()).unwrap();
    let c = &m["provenance"]["config"];
    assert_eq!(c["seed"], 11);
    assert_eq!(c["merge"]["rank"], 3);
    assert_eq!(c["merge"]["beta_min"], 0.1);
    assert_eq!(c["merge"]["beta_max"], 0.9);
    let o = ewod(&["run", "--schedule", "s.json", "--config", "exp.json", "--beta-min", "0.9", "--beta-max", "0.1", "--out", "r2"], p);
    assert_eq!(o.status.code(), Some(2));
}

fn lad(path: &Path, names: &[&str], task_index: u32, n_cumulative: u64, agg: &Matrix, task: &Matrix) {
    let layers: Vec<AdapterState> = names
        .iter()
        .map(|n| AdapterState {
            aggregate: LoraDelta::new(*n, agg.clone(), Matrix::identity(agg.cols())).unwrap(),
            task: LoraDelta::new(*n, task.clone(), Matrix::identity(task.cols())).unwrap(),
            n_cumulative,
            task_index,
        })
        .collect();
    save_lad(path, &layers, Dtype::F64).unwrap();
}

fn residuals(out: &str) -> Vec<(f64, f64)> {
    out.lines()
        .map(|l| {
            let w: Vec<&str> = l.split_whitespace().collect();
            (w[2].parse().unwrap(), w[4].parse().unwrap())
        })
        .collect()
}

#[test]
fn merge_first_task_copies_task_adapter() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let task = Matrix::from_rows(&[&[1.0, 2.0, 0.0], &[0.0, -1.0, 3.0], &[0.5, 0.0, 1.0]]).unwrap();
    let zero = Matrix::zeros(3, 3);
    lad(&p.join("agg.lad"), &["q", "v"], 1, 0, &zero, &zero);
    lad(&p.join("task.lad"), &["q", "v"], 1, 0, &zero, &task);
    let o = ewod(&["merge", "--agg", "agg.lad", "--task", "task.lad", "--n-curr", "50", "--out", "m.lad"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    for (beta, residual) in residuals(&stdout(&o)) {
        assert_eq!(beta, 1.0);
        assert!(residual <= 1e-10);
    }
    let (merged, _) = load_lad(p.join("m.lad")).unwrap();
    for layer in &merged {
        let diff = layer.aggregate.delta().sub(&task).unwrap().max_abs();
        assert!(diff < 1e-10, "{diff}");
        assert!(layer.task.is_zero());
        assert_eq!(layer.task_index, 2);
        assert_eq!(layer.n_cumulative, 50);
    }
}

#[test]
fn merge_with_zero_beta_keeps_aggregate() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let agg = Matrix::from_rows(&[&[2.0, 0.0], &[1.0, 1.0]]).unwrap();
    let task = Matrix::from_rows(&[&[-5.0, 4.0], &[0.0, 3.0]]).unwrap();
    lad(&p.join("agg.lad"), &["ffn"], 2, 100, &agg, &agg);
    lad(&p.join("task.lad"), &["ffn"], 2, 100, &agg, &task);
    let o = ewod(
        &["merge", "--agg", "agg.lad", "--task", "task.lad", "--n-curr", "100", "--beta-min", "0", "--beta-max", "0.5", "--out", "m.lad"],
        p,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(residuals(&stdout(&o))[0].0, 0.0);
    let (merged, _) = load_lad(p.join("m.lad")).unwrap();
    assert!(merged[0].aggregate.delta().sub(&agg).unwrap().max_abs() < 1e-10);
}

#[test]
fn merge_rejects_mismatched_layers() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let m = Matrix::identity(2);
    lad(&p.join("agg.lad"), &["q", "k"], 1, 0, &m, &m);
    lad(&p.join("task.lad"), &["q", "v"], 1, 0, &m, &m);
    let o = ewod(&["merge", "--agg", "agg.lad", "--task", "task.lad", "--n-curr", "1", "--out", "m.lad"], p);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`k`"), "{}", stderr(&o));
    assert!(!p.join("m.lad").exists());
}

fn rec(image_id: u64, domain: &str, bbox: [f64; 4], class: u32, score: Option<f64>) -> DetectionRecord {
    DetectionRecord {
        image_id,
        domain: domain.into(),
        bbox,
        category_id: class,
        score,
    }
}

#[test]
fn eval_perfect_predictions() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    fs::write(
        p.join("sc.json"),
        r#"{"tasks": [{"domain": "a", "classes": ["x"]}, {"domain": "b", "classes": ["y"]}], "withheld": ["z"]}"#,
    )
    .unwrap();
    assert!(ewod(&["protocol", "--config", "sc.json", "--out", "s.json"], p).status.success());
    let gt1 = vec![rec(1, "a", [0.1, 0.1, 0.2, 0.2], 1, None), rec(1, "a", [0.5, 0.5, 0.3, 0.3], 3, None)];
    let mut gt2 = gt1.clone();
    gt2.push(rec(2, "b", [0.2, 0.6, 0.2, 0.2], 2, None));
    gt2.push(rec(2, "b", [0.6, 0.1, 0.2, 0.2], 3, None));
    let perfect = |gt: &[DetectionRecord]| -> Vec<DetectionRecord> {
        gt.iter()
            .map(|g| DetectionRecord {
                category_id: if g.category_id == 3 { 4 } else { g.category_id },
                score: Some(1.0),
                ..g.clone()
            })
            .collect()
    };
    write_jsonl(p.join("g1.jsonl"), &gt1).unwrap();
    write_jsonl(p.join("g2.jsonl"), &gt2).unwrap();
    write_jsonl(p.join("p1.jsonl"), &perfect(&gt1)).unwrap();
    write_jsonl(p.join("p2.jsonl"), &perfect(&gt2)).unwrap();
    let o = ewod(
        &["eval", "--schedule", "s.json", "--gt", "g1.jsonl", "--gt", "g2.jsonl", "--pred", "p1.jsonl", "--pred", "p2.jsonl", "--out", "r.json"],
        p,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r: FogsReport = serde_json::from_str(&fs::read_to_string(p.join("r.json")).unwrap()).unwrap();
    assert_eq!(r.fss, Some(100.0));
    assert_eq!(r.oss, 100.0);
    let gss = r.gss.unwrap();
    assert!((r.fogs.unwrap() - (200.0 + gss) / 3.0).abs() < 1e-9);
}

#[test]
fn eval_empty_predictions_scores_zero_with_flags() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    schedule(p);
    let gt1 = vec![rec(1, "daytime-sunny", [0.1, 0.1, 0.2, 0.2], 1, None)];
    let gt2 = vec![
        rec(1, "daytime-sunny", [0.1, 0.1, 0.2, 0.2], 1, None),
        rec(2, "night-sunny", [0.3, 0.3, 0.2, 0.2], 3, None),
    ];
    write_jsonl(p.join("g1.jsonl"), &gt1).unwrap();
    write_jsonl(p.join("g2.jsonl"), &gt2).unwrap();
    fs::write(p.join("p1.jsonl"), "").unwrap();
    let o = ewod(&["eval", "--schedule", "s.json", "--gt", "g1.jsonl", "--gt", "g2.jsonl", "--pred", "p1.jsonl", "--out", "r.json"], p);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: FogsReport = serde_json::from_str(&fs::read_to_string(p.join("r.json")).unwrap()).unwrap();
    assert_eq!(r.gss, Some(0.0));
    assert_eq!(r.per_task[0].map_curr, Some(0.0));
    assert!(r.flags.iter().any(|f| f.contains("task 2") && f.contains("no prediction file")));
    assert!(!r.flags.is_empty());
}

#[test]
fn eval_results_fixture() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    fs::write(
        p.join("res.json"),
        r#"[{"task": 1, "per_class_ap": {}, "map_prev": null, "map_curr": 76.05, "map_both": null,
             "u_recall": null, "wi": 0.0, "a_ose": 0, "gt_unknown_count": 0, "known_detections": 0},
            {"task": 2, "per_class_ap": {}, "map_prev": 73.15, "map_curr": 8.42, "map_both": null,
             "u_recall": null, "wi": 0.0, "a_ose": 0, "gt_unknown_count": 0, "known_detections": 0}]"#,
    )
    .unwrap();
    let o = ewod(&["eval", "--results", "res.json"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("96.19/") && stdout(&o).contains("/8.42/"), "{}", stdout(&o));
}

#[test]
fn gradcheck_pass_fault_and_vacuous() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let o = ewod(&["gradcheck", "--points", "30"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("max rel. error"));

    let o = ewod(&["gradcheck", "--points", "30", "--inject-fault"], p);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("in `"), "{}", stderr(&o));

    let o = Command::new(env!("CARGO_BIN_EXE_ewod"))
        .args(["gradcheck", "--points", "0"])
        .env("EWOD_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(stdout(&o).contains("vacuous"));
    assert!(stderr(&o).contains("zero points"));
}

#[test]
fn log_level_follows_env() {
    let dir = TempDir::new().unwrap();
    let quiet = ewod(&["gradcheck", "--points", "0"], dir.path());
    assert!(stderr(&quiet).is_empty());
}
