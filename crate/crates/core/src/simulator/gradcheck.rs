//! Central finite-difference checks of every differentiable operation, the
//! heads and the full detector loss.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{heads_on_tape, HeadParams, HeadVars, UnknownPath};
use crate::linalg::Matrix;
use crate::rng::SeedStream;
use crate::tape::{Tape, Var};

use super::detector::{forward_on_tape, DetectorParams, Mode, ParamLayout};
use super::loss::{match_queries, matched_loss, LossWeights, Target};

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;
const MAX_COORDS_PER_TENSOR: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub points: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Flips the sign of every analytic gradient; the check must then fail.
    pub inject_fault: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            points: 100,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradMismatch {
    pub case: String,
    pub tensor: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub points: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub cases: Vec<String>,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn is_vacuous(&self) -> bool {
        self.points == 0
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// A scalar function of named tensors, built on a tape with tensor `k`
/// registered as parameter `k`.
pub trait GradCase {
    fn name(&self) -> String;
    fn inputs(&self) -> Vec<(String, Matrix)>;
    fn build(&self, tape: &mut Tape, values: &[Matrix]) -> Result<Var>;
}

fn eval(case: &dyn GradCase, values: &[Matrix]) -> Result<f64> {
    let mut tape = Tape::new();
    let out = case.build(&mut tape, values)?;
    Ok(tape.scalar(out))
}

/// Checks one case at up to [`MAX_COORDS_PER_TENSOR`] coordinates per
/// tensor, all of them when the tensor is small.
pub fn check_case(case: &dyn GradCase, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng, report: &mut GradCheckReport) -> Result<()> {
    let inputs = case.inputs();
    let values: Vec<Matrix> = inputs.iter().map(|(_, m)| m.clone()).collect();
    let mut tape = Tape::new();
    let out = case.build(&mut tape, &values)?;
    let grads = tape.backward(out)?;
    for (k, (tensor, m)) in inputs.iter().enumerate() {
        let n = m.data().len();
        let all: Vec<usize> = (0..n).collect();
        let coords: Vec<usize> = if n <= MAX_COORDS_PER_TENSOR {
            all
        } else {
            all.choose_multiple(rng, MAX_COORDS_PER_TENSOR).copied().collect()
        };
        for idx in coords {
            let mut analytic = grads.get(k).map_or(0.0, |g| g.data()[idx]);
            if cfg.inject_fault {
                analytic = -analytic;
            }
            let mut plus = values.clone();
            plus[k].data_mut()[idx] += cfg.step;
            let mut minus = values.clone();
            minus[k].data_mut()[idx] -= cfg.step;
            let numeric = (eval(case, &plus)? - eval(case, &minus)?) / (2.0 * cfg.step);
            let rel = rel_error(analytic, numeric);
            report.coordinates += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if !(rel < cfg.tolerance) {
                report.failures.push(GradMismatch {
                    case: case.name(),
                    tensor: tensor.clone(),
                    index: (idx / m.cols(), idx % m.cols()),
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(())
}

fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| StandardNormal.sample(rng)).collect())
}

/// Values bounded away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize, gap: f64) -> Matrix {
    gauss(rng, r, c).map(|v| v + gap.copysign(v))
}

fn positive(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(0.3..2.5)).collect())
}

/// Projects an output onto fixed random weights so every entry of its
/// Jacobian contributes.
fn project(tape: &mut Tape, out: Var, weights: &Matrix) -> Var {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w);
    tape.sum(p)
}

/// Single tape operation on random inputs.
pub struct OpCase {
    pub op: &'static str,
    inputs: Vec<Matrix>,
    weights: Matrix,
}

pub const OPS: [&str; 33] = [
    "add", "add_row", "add_col", "add_scalar", "sub", "mul", "div", "pow", "affine", "scale", "matmul", "matmul_t", "transpose", "sigmoid", "tanh",
    "exp", "ln", "softplus", "abs", "clamp", "sum", "mean", "max_cols", "softmax_rows", "log_softmax_rows", "layer_norm_rows", "l2_normalize_rows",
    "row_norms", "concat_cols", "slice_cols", "select_rows", "pick", "chain",
];

impl OpCase {
    pub fn new(op: &'static str, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (r, c) = (3, 4);
        let inputs = match op {
            "add" | "sub" | "mul" => vec![gauss(rng, r, c), gauss(rng, r, c)],
            "add_row" => vec![gauss(rng, r, c), gauss(rng, 1, c)],
            "add_col" => vec![gauss(rng, r, c), gauss(rng, r, 1)],
            "add_scalar" => vec![gauss(rng, r, c), gauss(rng, 1, 1)],
            "div" => vec![gauss(rng, r, c), away_from_zero(rng, r, c, 0.5)],
            "pow" => vec![positive(rng, r, c), gauss(rng, r, c)],
            "matmul" => vec![gauss(rng, r, c), gauss(rng, c, 2)],
            "matmul_t" => vec![gauss(rng, r, c), gauss(rng, 5, c)],
            "ln" => vec![positive(rng, r, c)],
            "abs" => vec![away_from_zero(rng, r, c, 0.1)],
            "clamp" => {
                // Keep entries off the bounds at ±0.5.
                let m = gauss(rng, r, c).map(|v| if (v.abs() - 0.5).abs() < 0.05 { v * 1.3 } else { v });
                vec![m]
            }
            "max_cols" => {
                let mut m = gauss(rng, r, c);
                for i in 0..r {
                    m[(i, i % c)] += 3.0;
                }
                vec![m]
            }
            "concat_cols" => vec![gauss(rng, r, c), gauss(rng, r, 2)],
            "chain" => vec![gauss(rng, r, c), gauss(rng, c, c), gauss(rng, 1, c)],
            _ if OPS.contains(&op) => vec![gauss(rng, r, c)],
            _ => return Err(Error::Config(format!("no gradient case for op `{op}`"))),
        };
        let out_shape = match op {
            "matmul" => (r, 2),
            "matmul_t" => (r, 5),
            "transpose" => (c, r),
            "sum" | "mean" => (1, 1),
            "max_cols" | "row_norms" => (r, 1),
            "concat_cols" => (r, c + 2),
            "slice_cols" => (r, 2),
            "select_rows" => (4, c),
            "pick" => (3, 1),
            "chain" => (1, 1),
            _ => (r, c),
        };
        Ok(Self {
            op,
            inputs,
            weights: gauss(rng, out_shape.0, out_shape.1),
        })
    }
}

impl GradCase for OpCase {
    fn name(&self) -> String {
        format!("op/{}", self.op)
    }

    fn inputs(&self) -> Vec<(String, Matrix)> {
        self.inputs.iter().enumerate().map(|(i, m)| (format!("x{i}"), m.clone())).collect()
    }

    fn build(&self, tape: &mut Tape, values: &[Matrix]) -> Result<Var> {
        let v: Vec<Var> = values.iter().enumerate().map(|(i, m)| tape.param(i, m.clone())).collect();
        let out = match self.op {
            "add" | "add_row" | "add_col" | "add_scalar" => tape.add(v[0], v[1]),
            "sub" => tape.sub(v[0], v[1]),
            "mul" => tape.mul(v[0], v[1]),
            "div" => tape.div(v[0], v[1]),
            "pow" => tape.pow(v[0], v[1]),
            "affine" => tape.affine(v[0], -1.7, 0.4),
            "scale" => tape.scale(v[0], 2.5),
            "matmul" => tape.matmul(v[0], v[1]),
            "matmul_t" => tape.matmul_t(v[0], v[1]),
            "transpose" => tape.transpose(v[0]),
            "sigmoid" => tape.sigmoid(v[0]),
            "tanh" => tape.tanh(v[0]),
            "exp" => tape.exp(v[0]),
            "ln" => tape.ln(v[0]),
            "softplus" => tape.softplus(v[0]),
            "abs" => tape.abs(v[0]),
            "clamp" => tape.clamp(v[0], -0.5, 0.5),
            "sum" => tape.sum(v[0]),
            "mean" => tape.mean(v[0]),
            "max_cols" => tape.max_cols(v[0]),
            "softmax_rows" => tape.softmax_rows(v[0]),
            "log_softmax_rows" => tape.log_softmax_rows(v[0]),
            "layer_norm_rows" => tape.layer_norm_rows(v[0], 1e-5),
            "l2_normalize_rows" => tape.l2_normalize_rows(v[0], 1e-300),
            "row_norms" => tape.row_norms(v[0]),
            "concat_cols" => tape.concat_cols(&[v[0], v[1]]),
            "slice_cols" => tape.slice_cols(v[0], 1, 3),
            "select_rows" => tape.select_rows(v[0], &[2, 0, 2, 1]),
            "pick" => tape.pick(v[0], &[(0, 1), (2, 3), (0, 1)]),
            "chain" => {
                // The same input reaches the output along several paths.
                let h = tape.matmul(v[0], v[1]);
                let h = tape.add(h, v[2]);
                let h = tape.tanh(h);
                let g = tape.mul(h, v[0]);
                let s = tape.softmax_rows(g);
                let l = tape.layer_norm_rows(s, 1e-5);
                tape.mean(l)
            }
            other => return Err(Error::Config(format!("no gradient case for op `{other}`"))),
        };
        Ok(project(tape, out, &self.weights))
    }
}

/// Heads on a random feature batch with every head tensor and the features
/// as inputs.
pub struct HeadsCase {
    pub path: UnknownPath,
    h: Matrix,
    params: HeadParams,
    weights: [Matrix; 3],
}

impl HeadsCase {
    pub fn new(path: UnknownPath, rng: &mut ChaCha8Rng) -> Self {
        let (q, k, d) = (4, 3, 6);
        let mut params = HeadParams::init(k, d, rng);
        params.theta_lambda = rng.random_range(-1.0..1.0);
        params.alpha_mix_raw = rng.random_range(-1.0..1.0);
        params.b_obj = rng.random_range(-1.0..1.0);
        let h = gauss(rng, q, d).scale(rng.random_range(0.5..3.0));
        Self {
            path,
            h,
            params,
            weights: [gauss(rng, q, k), gauss(rng, q, 1), gauss(rng, q, 1)],
        }
    }
}

impl GradCase for HeadsCase {
    fn name(&self) -> String {
        format!("heads/{:?}", self.path)
    }

    fn inputs(&self) -> Vec<(String, Matrix)> {
        let mut v = vec![("h".to_string(), self.h.clone())];
        v.extend(self.params.tensors().into_iter().map(|(n, m)| (n.to_string(), m)));
        v
    }

    fn build(&self, tape: &mut Tape, values: &[Matrix]) -> Result<Var> {
        let h = tape.param(0, values[0].clone());
        let mut params = self.params.clone();
        for ((name, _), m) in self.params.tensors().iter().zip(&values[1..]) {
            params.set_tensor(name, m)?;
        }
        let vars = HeadVars::register(tape, &params, 1, true);
        let out = heads_on_tape(tape, h, &vars, self.path);
        let a = project(tape, out.z_known_final, &self.weights[0]);
        let b = project(tape, out.z_unk_final, &self.weights[1]);
        let c = project(tape, out.p_final, &self.weights[2]);
        let s = tape.add(a, b);
        Ok(tape.add(s, c))
    }
}

/// Full detector loss on a random scene with the matching held fixed.
pub struct DetectorCase {
    pub mode: Mode,
    params: DetectorParams,
    layout: ParamLayout,
    tokens: Matrix,
    targets: Vec<Target>,
    pairs: Vec<(usize, usize)>,
    active: Vec<usize>,
    weights: LossWeights,
}

impl DetectorCase {
    pub fn new(mode: Mode, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, q, regions) = (8, 4, 5);
        let seeds = SeedStream::new(rng.random());
        let mut params = DetectorParams::init(&seeds, &[1, 2, 3], d, q, 2)?;
        for a in &mut params.adapters {
            a.task.set_factors(gauss(rng, d, 2).scale(0.3), gauss(rng, 2, d).scale(0.3))?;
            a.aggregate.set_factors(gauss(rng, d, 2).scale(0.3), gauss(rng, 2, d).scale(0.3))?;
        }
        params.heads.theta_lambda = rng.random_range(-1.0..1.0);
        let layout = ParamLayout::new(&params, mode);
        let tokens = gauss(rng, regions, d);
        let targets = vec![
            Target {
                column: 0,
                bbox: [0.1, 0.2, 0.3, 0.25],
            },
            Target {
                column: 1,
                bbox: [0.55, 0.5, 0.2, 0.3],
            },
        ];
        let active = vec![0, 2];
        let weights = LossWeights::default();
        let mut tape = Tape::new();
        let fv = forward_on_tape(&mut tape, &params, &tokens, &active, UnknownPath::Eumix, None)?;
        let pairs = match_queries(tape.value(fv.logits), tape.value(fv.boxes), &targets, &weights)?.pairs;
        Ok(Self {
            mode,
            params,
            layout,
            tokens,
            targets,
            pairs,
            active,
            weights,
        })
    }
}

impl GradCase for DetectorCase {
    fn name(&self) -> String {
        format!("detector/{:?}", self.mode)
    }

    fn inputs(&self) -> Vec<(String, Matrix)> {
        self.layout
            .names
            .iter()
            .map(|n| (n.clone(), self.params.tensor(n).expect("layout names exist")))
            .collect()
    }

    fn build(&self, tape: &mut Tape, values: &[Matrix]) -> Result<Var> {
        let mut p = self.params.clone();
        for (n, m) in self.layout.names.iter().zip(values) {
            p.set_tensor(n, m.clone())?;
        }
        let fv = forward_on_tape(tape, &p, &self.tokens, &self.active, UnknownPath::Eumix, Some(&self.layout))?;
        matched_loss(tape, fv.logits, fv.boxes, &self.targets, &self.pairs, &self.weights)
    }
}

/// Every case kind, in the order points cycle through them.
pub fn case_kinds() -> Vec<String> {
    let mut v: Vec<String> = OPS.iter().map(|o| format!("op/{o}")).collect();
    for p in ["Eumix", "ClassifierOnly"] {
        v.push(format!("heads/{p}"));
    }
    for m in ["DualLora", "Finetune", "Frozen"] {
        v.push(format!("detector/{m}"));
    }
    v
}

fn make_case(kind: usize, rng: &mut ChaCha8Rng) -> Result<Box<dyn GradCase>> {
    let n_ops = OPS.len();
    Ok(match kind {
        k if k < n_ops => Box::new(OpCase::new(OPS[k], rng)?),
        k if k == n_ops => Box::new(HeadsCase::new(UnknownPath::Eumix, rng)),
        k if k == n_ops + 1 => Box::new(HeadsCase::new(UnknownPath::ClassifierOnly, rng)),
        k => Box::new(DetectorCase::new([Mode::DualLora, Mode::Finetune, Mode::Frozen][k - n_ops - 2], rng)?),
    })
}

/// Runs `cfg.points` random points, cycling through [`case_kinds`].
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(cfg.step > 0.0 && cfg.tolerance > 0.0) {
        return Err(Error::Config("gradcheck step and tolerance must be positive".into()));
    }
    let seeds = SeedStream::new(cfg.seed);
    let kinds = case_kinds();
    let mut report = GradCheckReport {
        points: cfg.points,
        coordinates: 0,
        max_rel_error: 0.0,
        cases: Vec::new(),
        failures: Vec::new(),
    };
    for point in 0..cfg.points {
        let kind = point % kinds.len();
        let mut rng = seeds.rng(&format!("point{point}"));
        let case = make_case(kind, &mut rng)?;
        if point < kinds.len() {
            report.cases.push(case.name());
        }
        check_case(case.as_ref(), cfg, &mut rng, &mut report)?;
    }
    Ok(report)
}
