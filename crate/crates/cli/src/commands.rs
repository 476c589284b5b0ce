use std::fs;
use std::path::{Path, PathBuf};

use ewod_core::adapters::{load_lad, merge_step, save_lad, AdapterState, MergePolicy};
use ewod_core::metrics::{evaluate_task, EvalConfig, FogsReport, Provenance, TaskEvalResult};
use ewod_core::protocol::{build_schedule, read_jsonl, write_jsonl, ScheduleConfig, TaskSchedule};
use ewod_core::simulator::{run_experiment, run_gradcheck, save_checkpoint, ExperimentConfig, GradCheckConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::args::{EvalArgs, GradcheckArgs, MergeArgs, PolicyOverrides, RunArgs};
use crate::error::{CliError, CliResult};

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Input(format!("no such file: {}", path.display())))
    }
}

fn load_schedule(path: &Path) -> CliResult<TaskSchedule> {
    require_file(path)?;
    Ok(TaskSchedule::from_json(&read_text(path)?)?)
}

fn apply_policy(policy: &mut MergePolicy, o: &PolicyOverrides) -> CliResult<()> {
    if let Some(r) = o.rank {
        policy.rank = r;
    }
    if let Some(b) = o.beta_min {
        policy.beta_min = b;
    }
    if let Some(b) = o.beta_max {
        policy.beta_max = b;
    }
    policy.validate()?;
    Ok(())
}

pub fn protocol(config: &Path, out: &Path) -> CliResult<()> {
    require_file(config)?;
    let cfg: ScheduleConfig = read_json(config)?;
    let schedule = build_schedule(&cfg)?;
    schedule.save(out)?;
    println!("{} tasks, withheld {:?}", schedule.num_tasks(), schedule.withheld);
    Ok(())
}

#[derive(Serialize)]
struct TaskEntry {
    task: u32,
    train_images: u64,
    train_annotations: u64,
    beta: f64,
    residuals: Vec<(String, f64)>,
    final_loss: Option<f64>,
    predictions: String,
    gt: String,
    checkpoint: String,
}

#[derive(Serialize)]
struct Manifest {
    provenance: Provenance,
    schedule: TaskSchedule,
    trainable_parameters: usize,
    total_parameters: usize,
    tasks: Vec<TaskEntry>,
}

pub fn run(args: &RunArgs) -> CliResult<()> {
    let schedule = load_schedule(&args.schedule)?;
    let mut cfg = match &args.config {
        Some(p) => {
            require_file(p)?;
            ExperimentConfig::from_json(&read_text(p)?)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    apply_policy(&mut cfg.merge, &args.policy)?;
    cfg.validate()?;
    fs::create_dir_all(&args.out)?;

    let result = run_experiment(&schedule, &cfg)?;
    let mut tasks = Vec::new();
    for a in &result.tasks {
        let pred = format!("task_{}_predictions.jsonl", a.task);
        let gt = format!("task_{}_gt.jsonl", a.task);
        let ckpt = format!("task_{}", a.task);
        write_jsonl(args.out.join(&pred), &a.predictions)?;
        write_jsonl(args.out.join(&gt), &a.gt)?;
        save_checkpoint(&args.out.join(&ckpt), &a.params)?;
        log::info!("task {}: beta {:.4}", a.task, a.beta);
        tasks.push(TaskEntry {
            task: a.task,
            train_images: a.train_images,
            train_annotations: a.train_annotations,
            beta: a.beta,
            residuals: a.residuals.clone(),
            final_loss: a.train.epoch_losses.last().copied(),
            predictions: pred,
            gt,
            checkpoint: ckpt,
        });
    }
    let report = result.evaluate(&schedule, &cfg)?;
    write_json(&args.out.join("report.json"), &report)?;
    write_json(
        &args.out.join("manifest.json"),
        &Manifest {
            provenance: Provenance::new(&cfg)?,
            schedule,
            trainable_parameters: result.trainable_parameters,
            total_parameters: result.total_parameters,
            tasks,
        },
    )?;
    println!("{}", report.summary_line());
    Ok(())
}

pub fn merge(args: &MergeArgs) -> CliResult<()> {
    require_file(&args.agg)?;
    require_file(&args.task)?;
    let (aggs, dtype) = load_lad(&args.agg)?;
    let (tasks, _) = load_lad(&args.task)?;
    if aggs.len() != tasks.len() {
        return Err(CliError::Input(format!("aggregate has {} layers, task has {}", aggs.len(), tasks.len())));
    }
    let mut policy = MergePolicy::default();
    if let Some(first) = aggs.first() {
        policy.rank = first.aggregate.rank();
    }
    apply_policy(&mut policy, &args.policy)?;
    let mut merged = Vec::with_capacity(aggs.len());
    for (agg, task) in aggs.iter().zip(&tasks) {
        if agg.layer_name() != task.layer_name() || agg.shape() != task.shape() {
            return Err(CliError::Input(format!(
                "layer mismatch: aggregate `{}` {:?} vs task `{}` {:?}",
                agg.layer_name(),
                agg.shape(),
                task.layer_name(),
                task.shape()
            )));
        }
        let state = AdapterState {
            aggregate: agg.aggregate.clone(),
            task: task.task.clone(),
            n_cumulative: args.n_prev.unwrap_or(agg.n_cumulative),
            task_index: agg.task_index,
        };
        let out = merge_step(&state, args.n_curr, &policy)?;
        println!("{} beta {:.6} residual {:.6e}", agg.layer_name(), out.beta, out.residual);
        merged.push(out.state);
    }
    save_lad(&args.out, &merged, dtype)?;
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let eval_cfg: EvalConfig = match &args.config {
        Some(p) => {
            require_file(p)?;
            read_json(p)?
        }
        None => EvalConfig::default(),
    };
    let (per_task, extra_flags) = match &args.results {
        Some(p) => {
            require_file(p)?;
            (read_json::<Vec<TaskEvalResult>>(p)?, Vec::new())
        }
        None => score_files(args, &eval_cfg)?,
    };
    if per_task.is_empty() {
        return Err(CliError::Input("nothing to score: pass --gt/--pred or --results".into()));
    }
    let mut report = FogsReport::from_tasks(per_task)?;
    report.flags.extend(extra_flags);
    report.provenance = Some(Provenance::new(&EvalProvenance {
        eval: eval_cfg,
        gt: &args.gt,
        pred: &args.pred,
        results: args.results.as_ref(),
    })?);
    for f in &report.flags {
        log::warn!("{f}");
    }
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    println!("{}", report.summary_line());
    Ok(())
}

#[derive(Serialize)]
struct EvalProvenance<'a> {
    eval: EvalConfig,
    gt: &'a [PathBuf],
    pred: &'a [PathBuf],
    results: Option<&'a PathBuf>,
}

fn score_files(args: &EvalArgs, cfg: &EvalConfig) -> CliResult<(Vec<TaskEvalResult>, Vec<String>)> {
    let schedule_path = args
        .schedule
        .as_ref()
        .ok_or_else(|| CliError::Input("--schedule is required with --gt".into()))?;
    let schedule = load_schedule(schedule_path)?;
    if args.gt.len() > schedule.num_tasks() {
        return Err(CliError::Input(format!("{} gt files for {} tasks", args.gt.len(), schedule.num_tasks())));
    }
    if args.pred.len() > args.gt.len() {
        return Err(CliError::Input(format!("{} prediction files for {} gt files", args.pred.len(), args.gt.len())));
    }
    let mut flags = Vec::new();
    let mut out = Vec::new();
    for (i, gt_path) in args.gt.iter().enumerate() {
        let t = i + 1;
        require_file(gt_path)?;
        let gt = read_jsonl(gt_path)?;
        let preds = match args.pred.get(i) {
            Some(p) => {
                require_file(p)?;
                read_jsonl(p)?
            }
            None => {
                flags.push(format!("task {t}: no prediction file, scored as empty"));
                Vec::new()
            }
        };
        out.push(evaluate_task(&schedule, t, &gt, &preds, cfg)?);
    }
    Ok((out, flags))
}

pub fn gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let cfg = GradCheckConfig {
        points: args.points,
        seed: args.seed,
        inject_fault: args.inject_fault,
        ..GradCheckConfig::default()
    };
    let report = run_gradcheck(&cfg)?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    if report.is_vacuous() {
        log::warn!("gradcheck ran zero points; nothing was checked");
        println!("pass (vacuous: 0 points)");
        return Ok(());
    }
    println!(
        "{} points, {} coordinates, max rel. error {:.3e}",
        report.points, report.coordinates, report.max_rel_error
    );
    if let Some(worst) = report
        .failures
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    {
        return Err(CliError::GradCheck(format!(
            "{} mismatches; worst {} in `{}` at {:?}: analytic {:.6e}, numeric {:.6e}",
            report.failures.len(),
            worst.case,
            worst.tensor,
            worst.index,
            worst.analytic,
            worst.numeric
        )));
    }
    println!("pass");
    Ok(())
}
