//! Task-by-task run over a schedule: train, merge adapters, predict.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{merge_step, MergePolicy, SampleUnit};
use crate::error::{Error, Result};
use crate::heads::UnknownPath;
use crate::metrics::{evaluate_task, EvalConfig, FogsReport, Provenance};
use crate::protocol::{filter_annotations, ClassId, DetectionRecord, TaskSchedule};
use crate::rng::SeedStream;

use super::detector::{detector_forward, DetectorParams, Mode, ParamLayout};
use super::loss::{LossWeights, Target};
use super::scene::{Scene, World, WorldConfig};
use super::train::{train_task, OptimConfig, TaskData, TrainSample, TrainSettings, TrainStats};

const TEST_ID_BASE: u64 = 10_000_000;
const TASK_STRIDE: u64 = 100_000;
const DOMAIN_STRIDE: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub n_queries: usize,
    /// Highest-scoring (query, class) pairs kept per test image.
    pub detections_per_image: usize,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub merge: MergePolicy,
    pub mode: Mode,
    pub unknown_path: UnknownPath,
    /// Training scenes per task; the last entry repeats for later tasks.
    pub train_scenes: Vec<usize>,
    pub test_scenes_per_domain: usize,
    pub eval: EvalConfig,
    /// Source-domain stage that fits the frozen base before task 1.
    pub pretrain: Option<PretrainConfig>,
}

/// Pretraining on classes and a domain that never appear in the schedule.
/// Everything but the classifier carries over to task 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub classes: usize,
    pub scenes: usize,
    pub epochs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            scenes: 200,
            epochs: 200,
        }
    }
}

/// Domain tag of the pretraining stage.
pub const PRETRAIN_DOMAIN: &str = "pretrain";

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            n_queries: 10,
            detections_per_image: 10,
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            merge: MergePolicy::default(),
            mode: Mode::DualLora,
            unknown_path: UnknownPath::Eumix,
            train_scenes: vec![40],
            test_scenes_per_domain: 40,
            eval: EvalConfig::default(),
            pretrain: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.optim.validate()?;
        self.merge.validate()?;
        if self.n_queries == 0 {
            return Err(Error::Config("n_queries must be positive".into()));
        }
        if self.detections_per_image == 0 {
            return Err(Error::Config("detections_per_image must be positive".into()));
        }
        if self.n_queries < self.world.max_objects {
            return Err(Error::Config(format!(
                "{} queries cannot cover {} objects per scene",
                self.n_queries, self.world.max_objects
            )));
        }
        if self.train_scenes.is_empty() || self.train_scenes.contains(&0) {
            return Err(Error::Config("every task needs at least one training scene".into()));
        }
        if let Some(p) = &self.pretrain {
            if p.classes == 0 || p.scenes == 0 {
                return Err(Error::Config("pretraining needs classes and scenes".into()));
            }
        }
        if self.merge.rank > self.world.token_dim() {
            return Err(Error::Config(format!(
                "rank {} exceeds model width {}",
                self.merge.rank,
                self.world.token_dim()
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn train_scene_count(&self, t: usize) -> usize {
        let i = (t - 1).min(self.train_scenes.len() - 1);
        self.train_scenes[i]
    }
}

/// Everything produced while handling one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskArtifacts {
    pub task: u32,
    pub train_images: u64,
    pub train_annotations: u64,
    /// Merge coefficient applied at the end of this task.
    pub beta: f64,
    /// Truncation residual per adapted layer.
    pub residuals: Vec<(String, f64)>,
    pub train: TrainStats,
    /// Test ground truth with original class ids.
    pub gt: Vec<DetectionRecord>,
    pub predictions: Vec<DetectionRecord>,
    /// Test scenes scored after this task, in image-id order.
    pub test_scenes: Vec<Scene>,
    /// Weights after the merge.
    pub params: DetectorParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub tasks: Vec<TaskArtifacts>,
    pub initial: DetectorParams,
    pub trainable_parameters: usize,
    pub total_parameters: usize,
}

impl ExperimentResult {
    pub fn final_params(&self) -> &DetectorParams {
        &self.tasks.last().expect("at least one task").params
    }

    pub fn evaluate(&self, schedule: &TaskSchedule, cfg: &ExperimentConfig) -> Result<FogsReport> {
        let per_task = self
            .tasks
            .iter()
            .map(|a| evaluate_task(schedule, a.task as usize, &a.gt, &a.predictions, &cfg.eval))
            .collect::<Result<Vec<_>>>()?;
        let mut report = FogsReport::from_tasks(per_task)?;
        report.provenance = Some(Provenance::new(cfg)?);
        Ok(report)
    }
}

fn gt_records(scene: &Scene) -> Vec<DetectionRecord> {
    scene
        .objects
        .iter()
        .map(|o| DetectionRecord {
            image_id: scene.image_id,
            domain: scene.domain.clone(),
            bbox: o.bbox,
            category_id: o.class,
            score: None,
        })
        .collect()
}

/// Scores every query against the first `n_known` classifier rows and the
/// unknown label, keeping the `top_k` best (query, class) pairs per scene.
/// Output follows scene order.
pub fn predict_scenes(params: &DetectorParams, scenes: &[Scene], n_known: usize, unknown_id: ClassId, path: UnknownPath, top_k: usize) -> Result<Vec<DetectionRecord>> {
    if n_known == 0 || n_known > params.classes.len() {
        return Err(Error::Config(format!("cannot score {n_known} known classes")));
    }
    if top_k == 0 {
        return Err(Error::Config("top_k must be positive".into()));
    }
    let active: Vec<usize> = (0..n_known).collect();
    let per_scene: Vec<Vec<DetectionRecord>> = scenes
        .par_iter()
        .map(|s| {
            let preds = detector_forward(params, &s.tokens(), &active, path)?;
            let mut cands: Vec<(f64, usize, usize)> = preds
                .iter()
                .flat_map(|p| p.scores.iter().enumerate().map(move |(col, &v)| (v, p.query, col)))
                .collect();
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            cands.truncate(top_k);
            Ok(cands
                .into_iter()
                .map(|(score, q, col)| DetectionRecord {
                    image_id: s.image_id,
                    domain: s.domain.clone(),
                    bbox: preds[q].bbox,
                    category_id: if col == n_known { unknown_id } else { params.classes[col] },
                    score: Some(score),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_scene.concat())
}

/// Test scenes of every domain seen by task `t`.
pub fn test_scenes(world: &World, schedule: &TaskSchedule, t: usize, cfg: &ExperimentConfig, seeds: &SeedStream) -> Result<Vec<Scene>> {
    let known: Vec<ClassId> = schedule.tasks[..t].iter().flat_map(|k| k.classes.iter().copied()).collect();
    let stream = seeds.child("test");
    let mut scenes = Vec::new();
    for k in 1..=t {
        let domain = &schedule.task(k)?.domain;
        for i in 0..cfg.test_scenes_per_domain as u64 {
            let id = TEST_ID_BASE + t as u64 * TASK_STRIDE + k as u64 * DOMAIN_STRIDE + i;
            let seed = stream.derive(&format!("{domain}/{i}"));
            let n = object_count(seed, &cfg.world);
            scenes.push(world.generate_open_scene(seed, id, domain, &known, &schedule.withheld, n)?);
        }
    }
    Ok(scenes)
}

fn object_count(seed: u64, world: &WorldConfig) -> usize {
    let mut rng = SeedStream::new(seed).rng("count");
    rng.random_range(world.min_objects..=world.max_objects)
}

/// Supervised scenes of task `t`: its domain, its classes plus withheld
/// objects, annotations restricted to its classes.
pub fn task_data(world: &World, schedule: &TaskSchedule, params: &DetectorParams, t: usize, cfg: &ExperimentConfig, seeds: &SeedStream) -> Result<TaskData> {
    let spec = schedule.task(t)?;
    let stream = seeds.child("train").child(&t.to_string());
    let scenes = (0..cfg.train_scene_count(t) as u64)
        .map(|i| {
            let seed = stream.derive(&i.to_string());
            let n = object_count(seed, &cfg.world);
            world.generate_open_scene(seed, t as u64 * TASK_STRIDE + i, &spec.domain, &spec.classes, &schedule.withheld, n)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<DetectionRecord>> = scenes
        .iter()
        .map(|sc| filter_annotations(&gt_records(sc), schedule, t))
        .collect::<Result<_>>()?;
    supervised(params, t as u32, &spec.classes, &scenes, &labels)
}

fn supervised(params: &DetectorParams, task: u32, classes: &[ClassId], scenes: &[Scene], labels: &[Vec<DetectionRecord>]) -> Result<TaskData> {
    let active: Vec<usize> = classes
        .iter()
        .map(|&c| params.class_row(c).ok_or_else(|| Error::Config(format!("class {c} has no classifier row"))))
        .collect::<Result<_>>()?;
    let samples = scenes
        .iter()
        .zip(labels)
        .map(|(scene, recs)| TrainSample {
            task,
            image_id: scene.image_id,
            tokens: scene.tokens(),
            targets: recs
                .iter()
                .map(|r| Target {
                    column: classes.iter().position(|&c| c == r.category_id).expect("labels restricted to the task classes"),
                    bbox: r.bbox,
                })
                .collect(),
        })
        .collect();
    Ok(TaskData { task, active, samples })
}

/// Class ids used only by pretraining, above every schedule id.
pub fn pretrain_classes(schedule: &TaskSchedule, p: &PretrainConfig) -> Vec<ClassId> {
    let first = schedule.unknown_id() + 1;
    (first..first + p.classes as ClassId).collect()
}

/// Fits base, queries, box, background and objectness weights on the
/// source domain, then attaches a fresh classifier for `classes`.
fn pretrained(world: &World, classes: &[ClassId], pre_classes: &[ClassId], p: &PretrainConfig, cfg: &ExperimentConfig, seeds: &SeedStream) -> Result<DetectorParams> {
    let d = cfg.world.token_dim();
    let init = seeds.child("init");
    let mut pre = DetectorParams::init(&init.child("pretrain"), pre_classes, d, cfg.n_queries, cfg.merge.rank)?;
    let stream = seeds.child("pretrain");
    let scenes = (0..p.scenes as u64)
        .map(|i| {
            let seed = stream.derive(&i.to_string());
            let n = object_count(seed, &cfg.world);
            world.generate_scene(seed, i, PRETRAIN_DOMAIN, pre_classes, n)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<DetectionRecord>> = scenes.iter().map(gt_records).collect();
    let data = supervised(&pre, 0, pre_classes, &scenes, &labels)?;
    let settings = TrainSettings {
        optim: OptimConfig {
            epochs: p.epochs,
            ..cfg.optim
        },
        loss: cfg.loss,
        mode: Mode::Finetune,
        path: cfg.unknown_path,
    };
    let stats = train_task(&mut pre, &data, &settings, &stream)?;
    if let (Some(first), Some(last)) = (stats.epoch_losses.first(), stats.epoch_losses.last()) {
        log::info!("pretrain: loss {first:.4} -> {last:.4}");
    }
    let mut params = DetectorParams::init(&init, classes, d, cfg.n_queries, cfg.merge.rank)?;
    params.base = pre.base;
    params.queries = pre.queries;
    params.w_bg = pre.w_bg;
    params.b_bg = pre.b_bg;
    params.w_box = pre.w_box;
    params.b_box = pre.b_box;
    let heads = &mut params.heads;
    heads.alpha_mix_raw = pre.heads.alpha_mix_raw;
    heads.f_obj = pre.heads.f_obj;
    heads.theta_gamma = pre.heads.theta_gamma;
    heads.theta_alpha = pre.heads.theta_alpha;
    heads.theta_lambda = pre.heads.theta_lambda;
    heads.b_obj = pre.heads.b_obj;
    Ok(params)
}

/// Runs every task of `schedule` in order.
pub fn run_experiment(schedule: &TaskSchedule, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    schedule.validate()?;
    cfg.validate()?;
    let seeds = SeedStream::new(cfg.seed);
    let mut all_classes = schedule.all_known();
    all_classes.extend(&schedule.withheld);
    let mut domains: Vec<String> = schedule.tasks.iter().map(|k| k.domain.clone()).collect();
    let pre_classes = cfg.pretrain.map(|p| pretrain_classes(schedule, &p)).unwrap_or_default();
    if cfg.pretrain.is_some() {
        if domains.iter().any(|d| d == PRETRAIN_DOMAIN) {
            return Err(Error::Config(format!("domain `{PRETRAIN_DOMAIN}` is reserved for pretraining")));
        }
        domains.push(PRETRAIN_DOMAIN.to_string());
        all_classes.extend(&pre_classes);
    }
    let world = World::new(&seeds.child("world"), &all_classes, &domains, cfg.world)?;

    let mut params = match &cfg.pretrain {
        Some(p) => pretrained(&world, &schedule.all_known(), &pre_classes, p, cfg, &seeds)?,
        None => DetectorParams::init(&seeds.child("init"), &schedule.all_known(), cfg.world.token_dim(), cfg.n_queries, cfg.merge.rank)?,
    };
    let initial = params.clone();
    let layout = ParamLayout::new(&params, cfg.mode);
    let settings = TrainSettings {
        optim: cfg.optim,
        loss: cfg.loss,
        mode: cfg.mode,
        path: cfg.unknown_path,
    };

    let mut tasks = Vec::with_capacity(schedule.num_tasks());
    for t in 1..=schedule.num_tasks() {
        let task_seeds = seeds.child(&format!("task{t}"));
        if cfg.mode == Mode::DualLora {
            params.reset_task_adapters(&mut task_seeds.rng("lora"))?;
        }
        let data = task_data(&world, schedule, &params, t, cfg, &seeds)?;
        log::info!("task {t}: {} scenes, {} annotations", data.image_count(), data.annotation_count());
        let train = train_task(&mut params, &data, &settings, &task_seeds)?;
        if let (Some(first), Some(last)) = (train.epoch_losses.first(), train.epoch_losses.last()) {
            log::info!("task {t}: loss {first:.4} -> {last:.4}");
        }

        let n_curr = match cfg.merge.sample_unit {
            SampleUnit::Images => data.image_count(),
            SampleUnit::Annotations => data.annotation_count(),
        };
        let mut beta = 0.0;
        let mut residuals = Vec::with_capacity(params.adapters.len());
        for a in &mut params.adapters {
            let out = merge_step(a, n_curr, &cfg.merge)?;
            beta = out.beta;
            residuals.push((a.layer_name().to_string(), out.residual));
            *a = out.state;
        }
        log::info!("task {t}: beta {beta:.4}");

        let scenes = test_scenes(&world, schedule, t, cfg, &seeds)?;
        let n_known: usize = schedule.tasks[..t].iter().map(|k| k.classes.len()).sum();
        let predictions = predict_scenes(&params, &scenes, n_known, schedule.unknown_id(), cfg.unknown_path, cfg.detections_per_image)?;
        let gt = scenes.iter().flat_map(gt_records).collect();
        tasks.push(TaskArtifacts {
            task: t as u32,
            train_images: data.image_count(),
            train_annotations: data.annotation_count(),
            beta,
            residuals,
            train,
            gt,
            predictions,
            test_scenes: scenes,
            params: params.clone(),
        });
    }
    Ok(ExperimentResult {
        trainable_parameters: layout.parameter_count(&initial)?,
        total_parameters: initial.total_parameter_count(),
        initial,
        tasks,
    })
}
