//! Query-norm objectness and entropy-aware unknown mixing heads.
//!
//! The plain functions work on a single query feature and are the reference
//! forward pass. [`heads_on_tape`] builds the same computation for a batch of
//! queries on a [`Tape`] so the detector can be trained end to end.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{logit, sigmoid, softplus, Matrix};
use crate::tape::{Tape, Var};

pub const OBJ_HIDDEN: usize = 16;
pub const DEFAULT_TAU: f64 = 1.0;
pub const OBJ_EPS: f64 = 1e-6;
pub const LN_EPS: f64 = 1e-5;
pub const PROB_FLOOR: f64 = 1e-7;

/// Result of [`qnorm_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct QNorm {
    pub h_norm: Vec<f64>,
    /// Set when the input had no spread, in which case `h_norm` is zero.
    pub degenerate: bool,
}

/// Per-query features produced by the query-norm adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeature {
    pub h: Vec<f64>,
    pub norm: f64,
    pub h_norm: Vec<f64>,
    pub h_cls: Vec<f64>,
    pub degenerate: bool,
}

/// Scalar objectness network.
#[derive(Debug, Clone, PartialEq)]
pub enum ObjectnessNet {
    /// One tanh hidden layer: `w2 · tanh(w1·x + b1) + b2`.
    Mlp {
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    },
    /// Passes the norm through unchanged.
    Identity,
}

impl ObjectnessNet {
    pub fn zeros(hidden: usize) -> Self {
        ObjectnessNet::Mlp {
            w1: vec![0.0; hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            ObjectnessNet::Mlp { w1, b1, w2, b2 } => {
                b2 + w1
                    .iter()
                    .zip(b1)
                    .zip(w2)
                    .map(|((w, b), v)| v * (w * x + b).tanh())
                    .sum::<f64>()
            }
            ObjectnessNet::Identity => x,
        }
    }
}

/// Learnable parameters of both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `(known + 1) × d`; the last row scores the unknown class.
    pub w_cls: Matrix,
    pub b_cls: Vec<f64>,
    pub alpha_mix_raw: f64,
    pub f_obj: ObjectnessNet,
    pub tau: f64,
    pub theta_gamma: f64,
    pub theta_alpha: f64,
    pub theta_lambda: f64,
    pub b_obj: f64,
}

impl HeadParams {
    /// Zero classifier and objectness weights with the calibration
    /// parameters at their starting values.
    pub fn zeros(n_known: usize, d: usize) -> Self {
        Self {
            w_cls: Matrix::zeros(n_known + 1, d),
            b_cls: vec![0.0; n_known + 1],
            alpha_mix_raw: 0.0,
            f_obj: ObjectnessNet::zeros(OBJ_HIDDEN),
            tau: DEFAULT_TAU,
            theta_gamma: (std::f64::consts::E - 1.0).ln(),
            theta_alpha: 9.0_f64.ln(),
            theta_lambda: -10.0,
            b_obj: 0.0,
        }
    }

    /// Random classifier and objectness weights, default calibration.
    pub fn init<R: Rng + ?Sized>(n_known: usize, d: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(n_known, d);
        let cls = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        for v in p.w_cls.data_mut() {
            *v = cls.sample(rng);
        }
        let unit = Normal::new(0.0, 0.5).expect("valid std");
        p.f_obj = ObjectnessNet::Mlp {
            w1: (0..OBJ_HIDDEN).map(|_| unit.sample(rng)).collect(),
            b1: (0..OBJ_HIDDEN).map(|_| unit.sample(rng)).collect(),
            w2: (0..OBJ_HIDDEN).map(|_| unit.sample(rng) / (OBJ_HIDDEN as f64).sqrt()).collect(),
            b2: 0.0,
        };
        p
    }

    pub fn n_known(&self) -> usize {
        self.w_cls.rows() - 1
    }

    pub fn dim(&self) -> usize {
        self.w_cls.cols()
    }

    pub fn alpha_mix(&self) -> f64 {
        sigmoid(self.alpha_mix_raw)
    }

    pub fn gamma(&self) -> f64 {
        softplus(self.theta_gamma)
    }

    pub fn alpha(&self) -> f64 {
        sigmoid(self.theta_alpha)
    }

    pub fn lambda(&self) -> f64 {
        softplus(self.theta_lambda)
    }

    pub fn validate(&self) -> Result<()> {
        if self.b_cls.len() != self.w_cls.rows() {
            return Err(Error::Dimension(format!(
                "b_cls has {} entries for {} classifier rows",
                self.b_cls.len(),
                self.w_cls.rows()
            )));
        }
        if self.w_cls.rows() < 2 {
            return Err(Error::Dimension("classifier needs at least one known class".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Domain(format!("temperature must be positive, got {}", self.tau)));
        }
        if let ObjectnessNet::Mlp { w1, b1, w2, .. } = &self.f_obj {
            if w1.len() != b1.len() || w1.len() != w2.len() {
                return Err(Error::Dimension("objectness MLP widths disagree".into()));
            }
        }
        Ok(())
    }

    /// Named tensors in a fixed order, used for checkpoints and optimisation.
    pub fn tensors(&self) -> Vec<(&'static str, Matrix)> {
        let mut out = vec![
            ("w_cls", self.w_cls.clone()),
            ("b_cls", Matrix::row_vector(&self.b_cls)),
            ("alpha_mix_raw", Matrix::scalar(self.alpha_mix_raw)),
            ("theta_gamma", Matrix::scalar(self.theta_gamma)),
            ("theta_alpha", Matrix::scalar(self.theta_alpha)),
            ("theta_lambda", Matrix::scalar(self.theta_lambda)),
            ("b_obj", Matrix::scalar(self.b_obj)),
        ];
        if let ObjectnessNet::Mlp { w1, b1, w2, b2 } = &self.f_obj {
            out.push(("obj_w1", Matrix::row_vector(w1)));
            out.push(("obj_b1", Matrix::row_vector(b1)));
            out.push(("obj_w2", Matrix::column(w2)));
            out.push(("obj_b2", Matrix::scalar(*b2)));
        }
        out
    }

    /// Overwrites the tensor called `name`; shapes must match.
    pub fn set_tensor(&mut self, name: &str, value: &Matrix) -> Result<()> {
        let current = self
            .tensors()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, m)| m.shape())
            .ok_or_else(|| Error::Config(format!("unknown head tensor {name}")))?;
        if current != value.shape() {
            return Err(Error::Dimension(format!(
                "head tensor {name}: expected {current:?}, got {:?}",
                value.shape()
            )));
        }
        let d = value.data();
        match name {
            "w_cls" => self.w_cls = value.clone(),
            "b_cls" => self.b_cls = d.to_vec(),
            "alpha_mix_raw" => self.alpha_mix_raw = d[0],
            "theta_gamma" => self.theta_gamma = d[0],
            "theta_alpha" => self.theta_alpha = d[0],
            "theta_lambda" => self.theta_lambda = d[0],
            "b_obj" => self.b_obj = d[0],
            _ => {
                let ObjectnessNet::Mlp { w1, b1, w2, b2 } = &mut self.f_obj else {
                    unreachable!("tensor list only names MLP weights for the MLP variant")
                };
                match name {
                    "obj_w1" => *w1 = d.to_vec(),
                    "obj_b1" => *b1 = d.to_vec(),
                    "obj_w2" => *w2 = d.to_vec(),
                    _ => *b2 = d[0],
                }
            }
        }
        Ok(())
    }
}

/// Logits after unknown calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBundle {
    pub z_known: Vec<f64>,
    pub z_unk: f64,
    pub z_obj: f64,
    /// `[z_known_final..., z_unk_final]`.
    pub z_final: Vec<f64>,
    pub p_known_max: f64,
    pub p_unk_obj: f64,
    pub p_unk_cls: f64,
    pub p_final: f64,
}

impl LogitBundle {
    pub fn z_unk_final(&self) -> f64 {
        *self.z_final.last().expect("bundle always holds the unknown logit")
    }

    pub fn z_known_final(&self) -> &[f64] {
        &self.z_final[..self.z_final.len() - 1]
    }
}

/// Parameter-free layer normalisation followed by ℓ₂ normalisation.
pub fn qnorm_normalize(h: &[f64], eps: f64) -> Result<QNorm> {
    if h.len() < 2 {
        return Err(Error::Dimension(format!("query feature needs d >= 2, got {}", h.len())));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("query feature".into()));
    }
    let n = h.len() as f64;
    let mean = h.iter().sum::<f64>() / n;
    let centered: Vec<f64> = h.iter().map(|v| v - mean).collect();
    let spread = centered.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let scale = h.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if spread <= 1e-12 * scale || spread == 0.0 {
        return Ok(QNorm {
            h_norm: vec![0.0; h.len()],
            degenerate: true,
        });
    }
    let var = centered.iter().map(|v| v * v).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let ln: Vec<f64> = centered.iter().map(|v| v * inv_std).collect();
    let len = ln.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(QNorm {
        h_norm: ln.iter().map(|v| v / len).collect(),
        degenerate: false,
    })
}

/// Convex combination `(1 − α_mix)·h + α_mix·h_norm`.
pub fn qnorm_mix(h: &[f64], h_norm: &[f64], alpha_mix: f64) -> Result<Vec<f64>> {
    if h.len() != h_norm.len() {
        return Err(Error::Dimension(format!("mix of lengths {} and {}", h.len(), h_norm.len())));
    }
    if !(0.0..=1.0).contains(&alpha_mix) {
        return Err(Error::Domain(format!("alpha_mix {alpha_mix} outside [0, 1]")));
    }
    Ok(h.iter()
        .zip(h_norm)
        .map(|(a, b)| (1.0 - alpha_mix) * a + alpha_mix * b)
        .collect())
}

/// Runs the query-norm adapter on one feature.
pub fn query_feature(h: &[f64], params: &HeadParams) -> Result<QueryFeature> {
    let q = qnorm_normalize(h, LN_EPS)?;
    let h_cls = qnorm_mix(h, &q.h_norm, params.alpha_mix())?;
    Ok(QueryFeature {
        h: h.to_vec(),
        norm: h.iter().map(|v| v * v).sum::<f64>().sqrt(),
        h_norm: q.h_norm,
        h_cls,
        degenerate: q.degenerate,
    })
}

/// `W_cls h_cls + b_cls`, split into known logits and the unknown logit.
pub fn cls_logits(h_cls: &[f64], params: &HeadParams) -> Result<(Vec<f64>, f64)> {
    params.validate()?;
    let mut z = params.w_cls.matvec(h_cls)?;
    for (v, b) in z.iter_mut().zip(&params.b_cls) {
        *v += b;
    }
    let z_unk = z.pop().expect("classifier has at least two rows");
    Ok((z, z_unk))
}

/// `f_obj(‖h‖) / (τ + eps)`.
pub fn objectness_logit(norm: f64, params: &HeadParams, eps: f64) -> Result<f64> {
    if !(norm >= 0.0) {
        return Err(Error::Domain(format!("norm must be non-negative, got {norm}")));
    }
    if !(params.tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {}", params.tau)));
    }
    Ok(params.f_obj.eval(norm) / (params.tau + eps))
}

/// Uniform soft suppression `z − λ·p_unk_obj` with `λ = softplus(θ_λ)`.
pub fn suppress_known(z_known: &[f64], p_unk_obj: f64, params: &HeadParams) -> Vec<f64> {
    let shift = params.lambda() * p_unk_obj;
    z_known.iter().map(|z| z - shift).collect()
}

/// Entropy-aware unknown mixing.
pub fn eumix_forward(z_known: &[f64], z_unk: f64, z_obj: f64, params: &HeadParams) -> Result<LogitBundle> {
    if z_known.is_empty() {
        return Err(Error::Dimension("unknown mixing needs at least one known class".into()));
    }
    let p_known_max = z_known.iter().map(|&z| sigmoid(z)).fold(f64::NEG_INFINITY, f64::max);
    let g = (1.0 - p_known_max).powf(params.gamma());
    let p_unk_obj = sigmoid(z_obj) * g;
    let p_unk_cls = sigmoid(z_unk + params.b_obj);
    let alpha = params.alpha();
    let p_final = alpha * p_unk_cls + (1.0 - alpha) * p_unk_obj;
    let z_unk_final = logit(p_final.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))?;
    let mut z_final = suppress_known(z_known, p_unk_obj, params);
    z_final.push(z_unk_final);
    Ok(LogitBundle {
        z_known: z_known.to_vec(),
        z_unk,
        z_obj,
        z_final,
        p_known_max,
        p_unk_obj,
        p_unk_cls,
        p_final,
    })
}

/// How the final unknown logit is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnknownPath {
    /// Objectness and classifier evidence mixed by learned calibration.
    #[default]
    Eumix,
    /// Classifier logit only: `z_unk + b_obj`, no suppression.
    ClassifierOnly,
}

/// Full single-query pipeline from a decoder feature to calibrated logits.
pub fn heads_forward(h: &[f64], params: &HeadParams, path: UnknownPath) -> Result<LogitBundle> {
    let qf = query_feature(h, params)?;
    let (z_known, z_unk) = cls_logits(&qf.h_cls, params)?;
    let z_obj = objectness_logit(qf.norm, params, OBJ_EPS)?;
    match path {
        UnknownPath::Eumix => eumix_forward(&z_known, z_unk, z_obj, params),
        UnknownPath::ClassifierOnly => {
            let mut bundle = eumix_forward(&z_known, z_unk, z_obj, params)?;
            bundle.z_final = z_known.clone();
            bundle.z_final.push(z_unk + params.b_obj);
            bundle.p_final = bundle.p_unk_cls;
            Ok(bundle)
        }
    }
}

/// Head parameters registered on a tape.
#[derive(Debug, Clone)]
pub struct HeadVars {
    pub w_cls: Var,
    pub b_cls: Var,
    pub alpha_mix_raw: Var,
    pub theta_gamma: Var,
    pub theta_alpha: Var,
    pub theta_lambda: Var,
    pub b_obj: Var,
    pub obj: Option<[Var; 4]>,
    pub tau: f64,
}

impl HeadVars {
    /// Registers every tensor of `params`; the `k`-th tensor of
    /// [`HeadParams::tensors`] gets id `first_id + k`. With `trainable` unset
    /// the tensors are constants.
    pub fn register(tape: &mut Tape, params: &HeadParams, first_id: usize, trainable: bool) -> Self {
        let vars: Vec<Var> = params
            .tensors()
            .into_iter()
            .enumerate()
            .map(|(k, (_, m))| if trainable { tape.param(first_id + k, m) } else { tape.constant(m) })
            .collect();
        Self {
            w_cls: vars[0],
            b_cls: vars[1],
            alpha_mix_raw: vars[2],
            theta_gamma: vars[3],
            theta_alpha: vars[4],
            theta_lambda: vars[5],
            b_obj: vars[6],
            obj: (vars.len() == 11).then(|| [vars[7], vars[8], vars[9], vars[10]]),
            tau: params.tau,
        }
    }
}

/// Batched head outputs on a tape; one row per query.
#[derive(Debug, Clone, Copy)]
pub struct HeadTapeOutput {
    /// `Q × K` suppressed known logits.
    pub z_known_final: Var,
    /// `Q × 1` calibrated unknown logit.
    pub z_unk_final: Var,
    pub p_unk_obj: Var,
    pub p_final: Var,
    /// `Q × 1` objectness logit.
    pub z_obj: Var,
}

/// Builds the heads for a `Q × d` feature batch. `w_cls` and `b_cls` in
/// `vars` may be row selections of the full classifier; the last row is
/// always the unknown class.
pub fn heads_on_tape(tape: &mut Tape, h: Var, vars: &HeadVars, path: UnknownPath) -> HeadTapeOutput {
    let ln = tape.layer_norm_rows(h, LN_EPS);
    let h_norm = tape.l2_normalize_rows(ln, 1e-300);
    let am = tape.sigmoid(vars.alpha_mix_raw);
    let diff = tape.sub(h_norm, h);
    let step = tape.mul(diff, am);
    let h_cls = tape.add(h, step);

    let zw = tape.matmul_t(h_cls, vars.w_cls);
    let z = tape.add(zw, vars.b_cls);
    let k = tape.shape(z).1 - 1;
    let z_known = tape.slice_cols(z, 0, k);
    let z_unk = tape.slice_cols(z, k, k + 1);

    let norm = tape.row_norms(h);
    let f = match vars.obj {
        Some([w1, b1, w2, b2]) => {
            let pre = tape.matmul(norm, w1);
            let pre = tape.add(pre, b1);
            let hid = tape.tanh(pre);
            let out = tape.matmul(hid, w2);
            tape.add(out, b2)
        }
        None => norm,
    };
    let z_obj = tape.scale(f, 1.0 / (vars.tau + OBJ_EPS));

    let s_known = tape.sigmoid(z_known);
    let p_known_max = tape.max_cols(s_known);
    let gap = tape.affine(p_known_max, -1.0, 1.0);
    let gamma = tape.softplus(vars.theta_gamma);
    let g = tape.pow(gap, gamma);
    let s_obj = tape.sigmoid(z_obj);
    let p_unk_obj = tape.mul(s_obj, g);
    let z_cls = tape.add(z_unk, vars.b_obj);
    let p_unk_cls = tape.sigmoid(z_cls);

    match path {
        UnknownPath::Eumix => {
            let alpha = tape.sigmoid(vars.theta_alpha);
            let d = tape.sub(p_unk_cls, p_unk_obj);
            let ad = tape.mul(d, alpha);
            let p_final = tape.add(p_unk_obj, ad);
            let pc = tape.clamp(p_final, PROB_FLOOR, 1.0 - PROB_FLOOR);
            let lp = tape.ln(pc);
            let q = tape.affine(pc, -1.0, 1.0);
            let lq = tape.ln(q);
            let z_unk_final = tape.sub(lp, lq);
            let lambda = tape.softplus(vars.theta_lambda);
            let shift = tape.mul(p_unk_obj, lambda);
            let z_known_final = tape.sub(z_known, shift);
            HeadTapeOutput {
                z_known_final,
                z_unk_final,
                p_unk_obj,
                p_final,
                z_obj,
            }
        }
        UnknownPath::ClassifierOnly => HeadTapeOutput {
            z_known_final: z_known,
            z_unk_final: z_cls,
            p_unk_obj,
            p_final: p_unk_cls,
            z_obj,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn normalize_pair() {
        let q = qnorm_normalize(&[1.0, -1.0], LN_EPS).unwrap();
        let s = 0.5_f64.sqrt();
        assert!(!q.degenerate);
        assert!(close(q.h_norm[0], s, 1e-15) && close(q.h_norm[1], -s, 1e-15));
    }

    #[test]
    fn normalize_scale_and_degenerate() {
        let h = [0.3, -1.2, 2.5, 0.0];
        let a = qnorm_normalize(&h, LN_EPS).unwrap();
        let b = qnorm_normalize(&h.map(|v| 2.0 * v), LN_EPS).unwrap();
        for (x, y) in a.h_norm.iter().zip(&b.h_norm) {
            assert!(close(*x, *y, 1e-15));
        }
        let c = qnorm_normalize(&[0.1; 3], LN_EPS).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.h_norm, vec![0.0; 3]);
        assert!(qnorm_normalize(&[1.0], LN_EPS).is_err());
    }

    #[test]
    fn mix_examples() {
        let h = [2.0, 0.0];
        let n = [1.0, 0.0];
        assert_eq!(qnorm_mix(&h, &n, 0.0).unwrap(), h.to_vec());
        assert_eq!(qnorm_mix(&h, &n, 1.0).unwrap(), n.to_vec());
        assert_eq!(qnorm_mix(&h, &n, 0.5).unwrap(), vec![1.5, 0.0]);
        assert!(qnorm_mix(&h, &n, 1.5).is_err());
    }

    #[test]
    fn classifier_examples() {
        let p = HeadParams::zeros(2, 3);
        assert_eq!(cls_logits(&[1.0, 2.0, 3.0], &p).unwrap(), (vec![0.0, 0.0], 0.0));
        let mut p = HeadParams::zeros(2, 3);
        p.w_cls = Matrix::identity(3);
        assert_eq!(cls_logits(&[1.0, 0.0, 0.0], &p).unwrap(), (vec![1.0, 0.0], 0.0));
        assert!(cls_logits(&[1.0, 0.0], &p).is_err());
    }

    #[test]
    fn objectness_examples() {
        let mut p = HeadParams::zeros(1, 2);
        p.f_obj = ObjectnessNet::Identity;
        p.tau = 1.0;
        assert!(close(objectness_logit(3.2, &p, 0.0).unwrap(), 3.2, 1e-15));
        p.tau = 2.0;
        assert!(close(objectness_logit(3.2, &p, 0.0).unwrap(), 1.6, 1e-15));
        let z = HeadParams::zeros(1, 2);
        assert_eq!(objectness_logit(7.0, &z, OBJ_EPS).unwrap(), 0.0);
    }

    #[test]
    fn default_calibration() {
        let p = HeadParams::zeros(3, 4);
        assert!(close(p.alpha_mix(), 0.5, 1e-15));
        assert!(close(p.alpha(), 0.9, 1e-12));
        assert!(close(p.gamma(), 1.0, 1e-12));
        assert!(p.lambda() < 1e-4);
    }

    #[test]
    fn mixing_hand_case() {
        let mut p = HeadParams::zeros(2, 2);
        p.theta_alpha = 0.0;
        p.theta_lambda = f64::NEG_INFINITY;
        let b = eumix_forward(&[0.0, 0.0], 0.0, 0.0, &p).unwrap();
        assert!(close(b.p_known_max, 0.5, 1e-15));
        assert!(close(b.p_unk_obj, 0.25, 1e-12));
        assert!(close(b.p_unk_cls, 0.5, 1e-15));
        assert!(close(b.p_final, 0.375, 1e-12));
        assert!(close(b.z_unk_final(), 0.6_f64.ln(), 1e-9));
        assert_eq!(b.z_known_final(), &[0.0, 0.0]);
    }

    #[test]
    fn alpha_one_recovers_classifier_logit() {
        let mut p = HeadParams::zeros(2, 2);
        p.theta_alpha = 800.0;
        p.b_obj = 0.4;
        let b = eumix_forward(&[0.3, -1.0], 1.1, 2.0, &p).unwrap();
        assert!(close(b.z_unk_final(), 1.5, 1e-9));
    }

    #[test]
    fn saturated_known_silences_objectness() {
        let p = HeadParams::zeros(1, 2);
        let b = eumix_forward(&[60.0], 0.0, 5.0, &p).unwrap();
        assert_eq!(b.p_unk_obj, 0.0);
        assert!(close(b.p_final, p.alpha() * 0.5, 1e-15));
    }

    #[test]
    fn suppression_examples() {
        let mut p = HeadParams::zeros(2, 2);
        assert_eq!(suppress_known(&[1.0, 2.0], 0.0, &p), vec![1.0, 2.0]);
        p.theta_lambda = (2.0_f64.exp() - 1.0).ln();
        let z = suppress_known(&[1.0, 2.0], 0.5, &p);
        assert!(close(z[0], 0.0, 1e-12) && close(z[1], 1.0, 1e-12));
    }

    #[test]
    fn tensor_round_trip() {
        let mut rng = crate::rng::SeedStream::new(3).rng("heads");
        let p = HeadParams::init(3, 5, &mut rng);
        let mut q = HeadParams::zeros(3, 5);
        for (name, m) in p.tensors() {
            q.set_tensor(name, &m).unwrap();
        }
        assert_eq!(p, q);
        assert!(q.set_tensor("w_cls", &Matrix::zeros(1, 1)).is_err());
        assert!(q.set_tensor("nope", &Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn tape_matches_plain_forward() {
        let mut rng = crate::rng::SeedStream::new(11).rng("heads");
        let mut p = HeadParams::init(3, 6, &mut rng);
        p.theta_lambda = 0.7;
        let rows = [
            vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7],
            vec![1.5, 1.0, -2.0, 0.4, 0.0, 0.2],
        ];
        for path in [UnknownPath::Eumix, UnknownPath::ClassifierOnly] {
            let mut t = Tape::new();
            let h = t.constant(Matrix::from_rows(&[&rows[0], &rows[1]]).unwrap());
            let vars = HeadVars::register(&mut t, &p, 0, true);
            let out = heads_on_tape(&mut t, h, &vars, path);
            for (i, row) in rows.iter().enumerate() {
                let b = heads_forward(row, &p, path).unwrap();
                assert!(close(t.value(out.z_unk_final)[(i, 0)], b.z_unk_final(), 1e-10));
                for c in 0..3 {
                    assert!(close(t.value(out.z_known_final)[(i, c)], b.z_final[c], 1e-12));
                }
            }
        }
    }
}
