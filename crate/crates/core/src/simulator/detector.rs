//! Toy query-based detector: one cross-attention block and one feed-forward
//! layer with low-rank adapters, followed by the open-world heads, a
//! background logit and a box head.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterState;
use crate::error::{Error, Result};
use crate::heads::{heads_on_tape, HeadParams, HeadVars, UnknownPath};
use crate::linalg::{sigmoid, Matrix};
use crate::protocol::ClassId;
use crate::rng::SeedStream;
use crate::tape::{softmax_rows, Tape, Var};

/// Adapted linear layers, in parameter order.
pub const LAYERS: [&str; 5] = ["q_proj", "k_proj", "v_proj", "o_proj", "ffn"];
const Q: usize = 0;
const K: usize = 1;
const V: usize = 2;
const O: usize = 3;
const FF: usize = 4;

/// Which weights train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Frozen base plus aggregate and task adapters; only task adapters train.
    #[default]
    DualLora,
    /// Base weights train directly and are overwritten by every task.
    Finetune,
    /// Base weights frozen and no adapters; only heads and queries train.
    Frozen,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual-lora" => Ok(Mode::DualLora),
            "finetune" => Ok(Mode::Finetune),
            "frozen" => Ok(Mode::Frozen),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// All detector weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    /// Every known class of the schedule in introduction order; row `k` of
    /// the classifier scores `classes[k]` and the last row scores unknown.
    pub classes: Vec<ClassId>,
    pub base: Vec<Matrix>,
    pub adapters: Vec<AdapterState>,
    /// `Q × d` learned query embeddings.
    pub queries: Matrix,
    pub heads: HeadParams,
    pub w_bg: Matrix,
    pub b_bg: Matrix,
    pub w_box: Matrix,
    pub b_box: Matrix,
}

impl DetectorParams {
    pub fn init(seeds: &SeedStream, classes: &[ClassId], d: usize, n_queries: usize, rank: usize) -> Result<Self> {
        if d < 2 || n_queries == 0 {
            return Err(Error::Config("detector needs d >= 2 and at least one query".into()));
        }
        if classes.is_empty() {
            return Err(Error::Config("detector needs at least one known class".into()));
        }
        if rank == 0 || rank > d {
            return Err(Error::Config(format!("adapter rank {rank} outside 1..={d}")));
        }
        let scaled = |name: &str, rows: usize, cols: usize, std: f64| {
            let mut rng = seeds.rng(name);
            let n = Normal::new(0.0, std).expect("valid std");
            Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(&mut rng)).collect())
        };
        let base_std = 1.0 / (d as f64).sqrt();
        let base = LAYERS.iter().map(|l| scaled(&format!("base/{l}"), d, d, base_std)).collect();
        let adapters = LAYERS.iter().map(|l| AdapterState::new(l, d, d, rank)).collect();
        let mut head_rng = seeds.rng("heads");
        Ok(Self {
            classes: classes.to_vec(),
            base,
            adapters,
            queries: scaled("queries", n_queries, d, 1.0),
            heads: HeadParams::init(classes.len(), d, &mut head_rng),
            w_bg: scaled("bg", 1, d, base_std),
            b_bg: Matrix::scalar(0.0),
            w_box: scaled("box", 4, d, base_std),
            b_box: Matrix::zeros(1, 4),
        })
    }

    pub fn dim(&self) -> usize {
        self.queries.cols()
    }

    pub fn n_queries(&self) -> usize {
        self.queries.rows()
    }

    /// Classifier row of `class`.
    pub fn class_row(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// `W0 + ΔW_agg + ΔW_task` for every layer.
    pub fn effective_weights(&self) -> Vec<Matrix> {
        self.base
            .iter()
            .zip(&self.adapters)
            .map(|(w, a)| {
                let mut w = w.clone();
                w.add_assign(&a.combined_delta());
                w
            })
            .collect()
    }

    /// Draws a fresh down-projection for every task adapter and zeroes the
    /// up-projection, so the task delta starts at zero but can learn.
    pub fn reset_task_adapters<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let d = self.dim();
        let n = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        for a in &mut self.adapters {
            let r = a.task.rank();
            let (d_out, d_in) = a.shape();
            let down = Matrix::from_vec(r, d_in, (0..r * d_in).map(|_| n.sample(rng)).collect());
            a.task.set_factors(Matrix::zeros(d_out, r), down)?;
        }
        Ok(())
    }

    /// Every tensor except the adapters, by name.
    pub fn named_tensors(&self) -> Vec<(String, Matrix)> {
        let mut out: Vec<(String, Matrix)> = LAYERS
            .iter()
            .zip(&self.base)
            .map(|(l, w)| (format!("base/{l}"), w.clone()))
            .collect();
        out.push(("queries".into(), self.queries.clone()));
        out.push(("bg/w".into(), self.w_bg.clone()));
        out.push(("bg/b".into(), self.b_bg.clone()));
        out.push(("box/w".into(), self.w_box.clone()));
        out.push(("box/b".into(), self.b_box.clone()));
        for (n, m) in self.heads.tensors() {
            out.push((format!("heads/{n}"), m));
        }
        out
    }

    pub fn tensor(&self, name: &str) -> Result<Matrix> {
        if let Some(rest) = name.strip_prefix("lora/") {
            let (layer, part) = rest
                .rsplit_once('/')
                .ok_or_else(|| Error::Config(format!("bad tensor name {name}")))?;
            let a = &self.adapters[layer_index(layer)?];
            return match part {
                "b" => Ok(a.task.b().clone()),
                "a" => Ok(a.task.a().clone()),
                _ => Err(Error::Config(format!("bad tensor name {name}"))),
            };
        }
        self.named_tensors()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Config(format!("unknown tensor {name}")))
    }

    fn tensor_shape(&self, name: &str) -> Result<(usize, usize)> {
        let shape = match name {
            "queries" => self.queries.shape(),
            "bg/w" => self.w_bg.shape(),
            "bg/b" => self.b_bg.shape(),
            "box/w" => self.w_box.shape(),
            "box/b" => self.b_box.shape(),
            _ => match name.strip_prefix("base/") {
                Some(layer) => self.base[layer_index(layer)?].shape(),
                None => self.tensor(name)?.shape(),
            },
        };
        Ok(shape)
    }

    pub fn set_tensor(&mut self, name: &str, value: Matrix) -> Result<()> {
        let expected = self.tensor_shape(name)?;
        if expected != value.shape() {
            return Err(Error::Dimension(format!(
                "tensor {name}: expected {expected:?}, got {:?}",
                value.shape()
            )));
        }
        if let Some(rest) = name.strip_prefix("lora/") {
            let (layer, part) = rest.rsplit_once('/').expect("checked by tensor()");
            let t = &mut self.adapters[layer_index(layer)?].task;
            let (b, a) = if part == "b" { (value, t.a().clone()) } else { (t.b().clone(), value) };
            return t.set_factors(b, a);
        }
        if let Some(layer) = name.strip_prefix("base/") {
            self.base[layer_index(layer)?] = value;
            return Ok(());
        }
        match name {
            "queries" => self.queries = value,
            "bg/w" => self.w_bg = value,
            "bg/b" => self.b_bg = value,
            "box/w" => self.w_box = value,
            "box/b" => self.b_box = value,
            _ => {
                let head = name.strip_prefix("heads/").expect("checked by tensor()");
                self.heads.set_tensor(head, &value)?;
            }
        }
        Ok(())
    }

    /// Scalar count of every weight, adapters included.
    pub fn total_parameter_count(&self) -> usize {
        let adapters: usize = self
            .adapters
            .iter()
            .map(|a| 2 * (a.task.b().data().len() + a.task.a().data().len()))
            .sum();
        adapters
            + self
                .named_tensors()
                .iter()
                .map(|(_, m)| m.data().len())
                .sum::<usize>()
    }
}

fn layer_index(layer: &str) -> Result<usize> {
    LAYERS
        .iter()
        .position(|l| *l == layer)
        .ok_or_else(|| Error::Config(format!("unknown layer {layer}")))
}

/// Names of the trainable tensors for a mode; a tensor's position is its
/// parameter id on the tape. Head tensors come last and in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub mode: Mode,
    pub names: Vec<String>,
    ids: BTreeMap<String, usize>,
    pub heads_first_id: usize,
}

impl ParamLayout {
    pub fn new(params: &DetectorParams, mode: Mode) -> Self {
        let mut names: Vec<String> = match mode {
            Mode::DualLora => LAYERS
                .iter()
                .flat_map(|l| [format!("lora/{l}/b"), format!("lora/{l}/a")])
                .collect(),
            Mode::Finetune => LAYERS.iter().map(|l| format!("base/{l}")).collect(),
            Mode::Frozen => Vec::new(),
        };
        for n in ["queries", "bg/w", "bg/b", "box/w", "box/b"] {
            names.push(n.into());
        }
        let heads_first_id = names.len();
        for (n, _) in params.heads.tensors() {
            names.push(format!("heads/{n}"));
        }
        let ids = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            mode,
            names,
            ids,
            heads_first_id,
        }
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn parameter_count(&self, params: &DetectorParams) -> Result<usize> {
        self.names
            .iter()
            .map(|n| params.tensor(n).map(|m| m.data().len()))
            .sum()
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `Q × (K + 2)`: active known classes, unknown, background.
    pub logits: Var,
    /// `Q × 4` boxes in `(0, 1)`.
    pub boxes: Var,
    pub z_obj: Var,
    pub p_unk_obj: Var,
    /// `Q × d` decoder features.
    pub hidden: Var,
}

/// Builds the forward pass of one scene. With a layout, the tensors it names
/// are tape parameters; without one everything is constant.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &DetectorParams,
    tokens: &Matrix,
    active: &[usize],
    path: UnknownPath,
    layout: Option<&ParamLayout>,
) -> Result<ForwardVars> {
    let d = params.dim();
    if tokens.cols() != d {
        return Err(Error::Dimension(format!(
            "scene tokens have width {}, detector expects {d}",
            tokens.cols()
        )));
    }
    if active.is_empty() || active.iter().any(|&r| r >= params.classes.len()) {
        return Err(Error::Dimension("active class rows out of range".into()));
    }

    let leaf = |tape: &mut Tape, name: &str, value: Matrix| match layout.and_then(|l| l.id(name)) {
        Some(id) => tape.param(id, value),
        None => tape.constant(value),
    };

    let weights: Vec<Var> = match layout.map(|l| l.mode) {
        Some(Mode::DualLora) => (0..LAYERS.len())
            .map(|i| {
                let a = &params.adapters[i];
                let mut fixed = params.base[i].clone();
                fixed.add_assign(&a.aggregate.delta());
                let w0 = tape.constant(fixed);
                let b = leaf(tape, &format!("lora/{}/b", LAYERS[i]), a.task.b().clone());
                let down = leaf(tape, &format!("lora/{}/a", LAYERS[i]), a.task.a().clone());
                let ba = tape.matmul(b, down);
                tape.add(w0, ba)
            })
            .collect(),
        Some(Mode::Finetune) => (0..LAYERS.len())
            .map(|i| leaf(tape, &format!("base/{}", LAYERS[i]), params.base[i].clone()))
            .collect(),
        Some(Mode::Frozen) | None => params
            .effective_weights()
            .into_iter()
            .map(|w| tape.constant(w))
            .collect(),
    };

    let e = leaf(tape, "queries", params.queries.clone());
    let x = tape.constant(tokens.clone());
    let q = tape.matmul_t(e, weights[Q]);
    let k = tape.matmul_t(x, weights[K]);
    let v = tape.matmul_t(x, weights[V]);
    let s = tape.matmul_t(q, k);
    let s = tape.scale(s, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax_rows(s);
    let ctx = tape.matmul(attn, v);
    let o = tape.matmul_t(ctx, weights[O]);
    let h1 = tape.add(e, o);
    let f = tape.matmul_t(h1, weights[FF]);
    let f = tape.tanh(f);
    let h = tape.add(h1, f);

    let trainable_heads = layout.is_some();
    let first = layout.map_or(0, |l| l.heads_first_id);
    let mut hv = HeadVars::register(tape, &params.heads, first, trainable_heads);
    let mut rows = active.to_vec();
    rows.push(params.classes.len());
    hv.w_cls = tape.select_rows(hv.w_cls, &rows);
    let bt = tape.transpose(hv.b_cls);
    let bt = tape.select_rows(bt, &rows);
    hv.b_cls = tape.transpose(bt);
    let out = heads_on_tape(tape, h, &hv, path);

    let w_bg = leaf(tape, "bg/w", params.w_bg.clone());
    let b_bg = leaf(tape, "bg/b", params.b_bg.clone());
    let z_bg = tape.matmul_t(h, w_bg);
    let z_bg = tape.add(z_bg, b_bg);
    let logits = tape.concat_cols(&[out.z_known_final, out.z_unk_final, z_bg]);

    let w_box = leaf(tape, "box/w", params.w_box.clone());
    let b_box = leaf(tape, "box/b", params.b_box.clone());
    let zb = tape.matmul_t(h, w_box);
    let zb = tape.add(zb, b_box);
    let boxes = tape.sigmoid(zb);

    Ok(ForwardVars {
        logits,
        boxes,
        z_obj: out.z_obj,
        p_unk_obj: out.p_unk_obj,
        hidden: h,
    })
}

/// Per-query output at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub query: usize,
    /// Probabilities over the active known classes then unknown; the
    /// background share is what is missing from 1.
    pub scores: Vec<f64>,
    pub bbox: [f64; 4],
    /// `σ(z_obj)`.
    pub objectness: f64,
}

impl Prediction {
    /// Best non-background column and its probability.
    pub fn label(&self) -> (usize, f64) {
        self.scores
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
    }
}

/// Clamps a predicted box into the unit square with positive extent.
pub fn clamp_box(b: &[f64]) -> [f64; 4] {
    const MIN: f64 = 1e-6;
    let x = b[0].clamp(0.0, 1.0 - MIN);
    let y = b[1].clamp(0.0, 1.0 - MIN);
    let w = b[2].clamp(MIN, 1.0 - x);
    let h = b[3].clamp(MIN, 1.0 - y);
    [x, y, w, h]
}

/// Inference for one scene.
pub fn detector_forward(params: &DetectorParams, tokens: &Matrix, active: &[usize], path: UnknownPath) -> Result<Vec<Prediction>> {
    let mut tape = Tape::new();
    let fv = forward_on_tape(&mut tape, params, tokens, active, path, None)?;
    let probs = softmax_rows(tape.value(fv.logits));
    let boxes = tape.value(fv.boxes);
    let z_obj = tape.value(fv.z_obj);
    let k = active.len();
    Ok((0..params.n_queries())
        .map(|i| Prediction {
            query: i,
            scores: probs.row(i)[..=k].to_vec(),
            bbox: clamp_box(boxes.row(i)),
            objectness: sigmoid(z_obj[(i, 0)]),
        })
        .collect())
}
