//! Per-task training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::UnknownPath;
use crate::linalg::Matrix;
use crate::rng::SeedStream;
use crate::tape::{Gradients, Tape};

use super::detector::{forward_on_tape, DetectorParams, Mode, ParamLayout};
use super::loss::{match_and_loss, LossWeights, Target};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub epochs: usize,
    pub momentum: f64,
    /// Scenes per step; 0 means the whole task.
    pub batch_size: usize,
    /// Global gradient-norm cap.
    pub clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            epochs: 200,
            momentum: 0.0,
            batch_size: 0,
            clip: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// One supervised scene.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// Task whose annotations produced this sample.
    pub task: u32,
    pub image_id: u64,
    pub tokens: Matrix,
    pub targets: Vec<Target>,
}

/// Everything `train_task` sees for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task: u32,
    /// Classifier rows of the current task's classes; target columns index
    /// into this list.
    pub active: Vec<usize>,
    pub samples: Vec<TrainSample>,
}

impl TaskData {
    pub fn annotation_count(&self) -> u64 {
        self.samples.iter().map(|s| s.targets.len() as u64).sum()
    }

    pub fn image_count(&self) -> u64 {
        self.samples.len() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainSettings {
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub mode: Mode,
    pub path: UnknownPath,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    /// Mean loss over the task's scenes at each epoch, before its updates.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Loss and gradients of one scene.
pub fn sample_loss(params: &DetectorParams, layout: &ParamLayout, sample: &TrainSample, active: &[usize], settings: &TrainSettings) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let fv = forward_on_tape(&mut tape, params, &sample.tokens, active, settings.path, Some(layout))?;
    let (loss, _) = match_and_loss(&mut tape, fv.logits, fv.boxes, &sample.targets, &settings.loss)?;
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

/// Mean loss over `samples` without updating anything.
pub fn mean_loss(params: &DetectorParams, samples: &[TrainSample], active: &[usize], settings: &TrainSettings) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to score".into()));
    }
    let layout = ParamLayout::new(params, settings.mode);
    let mut total = 0.0;
    for s in samples {
        total += sample_loss(params, &layout, s, active, settings)?.0;
    }
    Ok(total / samples.len() as f64)
}

/// SGD over the task's scenes. Only tensors named by the mode's layout
/// change.
pub fn train_task(params: &mut DetectorParams, data: &TaskData, settings: &TrainSettings, seeds: &SeedStream) -> Result<TrainStats> {
    settings.optim.validate()?;
    if data.samples.is_empty() {
        return Err(Error::Config(format!("task {} has no training scenes", data.task)));
    }
    if let Some(s) = data.samples.iter().find(|s| s.task != data.task) {
        return Err(Error::Config(format!(
            "scene {} carries annotations of task {} while training task {}",
            s.image_id, s.task, data.task
        )));
    }
    let layout = ParamLayout::new(params, settings.mode);
    let mut values: Vec<Matrix> = layout.names.iter().map(|n| params.tensor(n)).collect::<Result<_>>()?;
    let mut velocity: Vec<Matrix> = values.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    let n = data.samples.len();
    let batch = if settings.optim.batch_size == 0 { n } else { settings.optim.batch_size.min(n) };
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeds.rng("shuffle");
    let mut stats = TrainStats {
        epoch_losses: Vec::with_capacity(settings.optim.epochs),
        steps: 0,
    };

    for epoch in 0..settings.optim.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut acc = Gradients::default();
            for &i in chunk {
                let (l, g) = sample_loss(params, &layout, &data.samples[i], &data.active, settings)?;
                if !l.is_finite() {
                    return Err(Error::Divergence {
                        task: data.task,
                        epoch,
                        detail: format!("loss {l} on scene {}", data.samples[i].image_id),
                    });
                }
                epoch_loss += l;
                acc.accumulate(&g, 1.0 / chunk.len() as f64);
            }
            let norm = acc.global_norm();
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    task: data.task,
                    epoch,
                    detail: "non-finite gradient".into(),
                });
            }
            if let Some(c) = settings.optim.clip {
                if norm > c {
                    acc.scale_all(c / norm);
                }
            }
            for (id, g) in acc.iter() {
                let v = &mut velocity[id];
                *v = v.scale(settings.optim.momentum);
                v.add_assign(g);
                values[id].add_assign(&v.scale(-settings.optim.lr));
            }
            for (name, v) in layout.names.iter().zip(&values) {
                params.set_tensor(name, v.clone())?;
            }
            stats.steps += 1;
        }
        stats.epoch_losses.push(epoch_loss / n as f64);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn setup() -> (DetectorParams, TaskData) {
        let seeds = SeedStream::new(3);
        let params = DetectorParams::init(&seeds, &[1, 2], 8, 3, 2).unwrap();
        let mut rng = seeds.rng("data");
        let n = Normal::new(0.0, 1.0).unwrap();
        let samples = (0..2)
            .map(|k| TrainSample {
                task: 1,
                image_id: k,
                tokens: Matrix::from_vec(4, 8, (0..32).map(|_| n.sample(&mut rng)).collect()),
                targets: vec![Target {
                    column: k as usize,
                    bbox: [0.2, 0.3, 0.2, 0.2],
                }],
            })
            .collect();
        (
            params,
            TaskData {
                task: 1,
                active: vec![0, 1],
                samples,
            },
        )
    }

    fn settings(lr: f64, epochs: usize) -> TrainSettings {
        TrainSettings {
            optim: OptimConfig {
                lr,
                epochs,
                momentum: 0.5,
                ..OptimConfig::default()
            },
            ..TrainSettings::default()
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (mut p, data) = setup();
        let before = p.clone();
        train_task(&mut p, &data, &settings(0.0, 3), &SeedStream::new(0)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn loss_decreases_and_base_is_frozen() {
        let (mut p, data) = setup();
        p.reset_task_adapters(&mut SeedStream::new(1).rng("a")).unwrap();
        let base = p.base.clone();
        let stats = train_task(&mut p, &data, &settings(0.05, 60), &SeedStream::new(0)).unwrap();
        let first = stats.epoch_losses[0];
        let last = *stats.epoch_losses.last().unwrap();
        assert!(last < first, "{first} -> {last}");
        assert_eq!(p.base, base);
    }

    #[test]
    fn deterministic() {
        let (p0, mut data) = setup();
        data.samples[0].targets.push(Target {
            column: 1,
            bbox: [0.6, 0.6, 0.2, 0.2],
        });
        let mut a = p0.clone();
        let mut b = p0;
        let mut s = settings(0.05, 5);
        s.optim.batch_size = 1;
        train_task(&mut a, &data, &s, &SeedStream::new(9)).unwrap();
        train_task(&mut b, &data, &s, &SeedStream::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn foreign_task_annotations_rejected() {
        let (mut p, mut data) = setup();
        data.samples[1].task = 0;
        assert!(train_task(&mut p, &data, &settings(0.1, 1), &SeedStream::new(0)).is_err());
    }

    #[test]
    fn divergence_reported() {
        let (mut p, data) = setup();
        p.queries = p.queries.scale(f64::NAN);
        let err = train_task(&mut p, &data, &settings(0.1, 1), &SeedStream::new(0)).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }
}
