//! Dual low-rank adapters: a frozen aggregate buffer that carries every past
//! task and a trainable task adapter that is folded into it at each task
//! boundary.
//!
//! The transition is: pick a merge coefficient from sample counts, blend the
//! two dense deltas, then re-factor the blend at the policy rank with a
//! truncated SVD (`B = U_r Σ_r`, `A = V_rᵀ`). The task adapter restarts at zero.

mod container;

pub use container::{load_lad, read_lad, save_lad, write_lad, Dtype};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{truncated_svd, Matrix};

/// Low-rank update `ΔW = B·A` for one named linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraDelta {
    pub layer_name: String,
    b: Matrix,
    a: Matrix,
}

impl LoraDelta {
    pub fn new(layer_name: impl Into<String>, b: Matrix, a: Matrix) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::Dimension(format!(
                "lora factors {}x{} and {}x{} do not chain",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            )));
        }
        Ok(Self {
            layer_name: layer_name.into(),
            b,
            a,
        })
    }

    pub fn zeros(layer_name: impl Into<String>, d_out: usize, d_in: usize, rank: usize) -> Self {
        Self {
            layer_name: layer_name.into(),
            b: Matrix::zeros(d_out, rank),
            a: Matrix::zeros(rank, d_in),
        }
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.d_out(), self.d_in())
    }

    /// Dense `B·A`.
    pub fn delta(&self) -> Matrix {
        self.b.mul_unchecked(&self.a)
    }

    pub fn is_zero(&self) -> bool {
        self.b.data().iter().all(|&v| v == 0.0) || self.a.data().iter().all(|&v| v == 0.0)
    }

    /// `B·(A·x)` without forming the dense delta.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let ax = self.a.matvec(x)?;
        self.b.matvec(&ax)
    }

    pub fn set_factors(&mut self, b: Matrix, a: Matrix) -> Result<()> {
        if b.shape() != self.b.shape() || a.shape() != self.a.shape() {
            return Err(Error::Dimension(format!(
                "layer {}: replacement factors {:?}/{:?} do not match {:?}/{:?}",
                self.layer_name,
                b.shape(),
                a.shape(),
                self.b.shape(),
                self.a.shape()
            )));
        }
        self.b = b;
        self.a = a;
        Ok(())
    }
}

/// Adapter pair for one layer plus the task bookkeeping the merge needs.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    /// Frozen buffer holding all finished tasks.
    pub aggregate: LoraDelta,
    /// Trainable adapter of the current task.
    pub task: LoraDelta,
    /// Samples seen in tasks before the current one, `N_{1:t-1}`.
    pub n_cumulative: u64,
    /// Current task, starting at 1.
    pub task_index: u32,
}

impl AdapterState {
    /// Fresh state at task 1 with both adapters zero.
    pub fn new(layer_name: &str, d_out: usize, d_in: usize, rank: usize) -> Self {
        Self {
            aggregate: LoraDelta::zeros(layer_name, d_out, d_in, rank),
            task: LoraDelta::zeros(layer_name, d_out, d_in, rank),
            n_cumulative: 0,
            task_index: 1,
        }
    }

    pub fn layer_name(&self) -> &str {
        &self.aggregate.layer_name
    }

    pub fn shape(&self) -> (usize, usize) {
        self.aggregate.shape()
    }

    pub fn with_task(mut self, task: LoraDelta) -> Result<Self> {
        if task.shape() != self.aggregate.shape() {
            return Err(Error::Dimension(format!(
                "layer {}: task delta {:?} vs aggregate {:?}",
                self.layer_name(),
                task.shape(),
                self.aggregate.shape()
            )));
        }
        self.task = task;
        Ok(self)
    }

    /// Dense `ΔW_agg + ΔW_task`.
    pub fn combined_delta(&self) -> Matrix {
        let mut d = self.aggregate.delta();
        d.add_assign(&self.task.delta());
        d
    }
}

/// Unit in which task sizes are counted for the merge coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleUnit {
    #[default]
    Images,
    Annotations,
}

/// How the merge coefficient is derived from sample counts for `t ≥ 2`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum BetaRule {
    /// `β_max − (β_max − β_min)·N_t / N_{1:t−1}`, clamped to `[β_min, β_max]`.
    #[default]
    DataAware,
    /// Same line but with the share `N_t / (N_t + N_{1:t−1})`, which stays in
    /// `[β_min, β_max]` without clamping.
    CumulativeShare,
    /// Constant coefficient for every `t ≥ 2`.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergePolicy {
    pub beta_min: f64,
    pub beta_max: f64,
    pub rank: usize,
    #[serde(default)]
    pub sample_unit: SampleUnit,
    #[serde(default)]
    pub rule: BetaRule,
}

impl Default for MergePolicy {
    fn default() -> Self {
        Self {
            beta_min: 0.2,
            beta_max: 0.8,
            rank: 8,
            sample_unit: SampleUnit::Images,
            rule: BetaRule::DataAware,
        }
    }
}

impl MergePolicy {
    pub fn new(beta_min: f64, beta_max: f64, rank: usize) -> Result<Self> {
        let policy = Self {
            beta_min,
            beta_max,
            rank,
            ..Self::default()
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn with_rule(mut self, rule: BetaRule) -> Result<Self> {
        self.rule = rule;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("merge rank must be at least 1".into()));
        }
        if let BetaRule::Fixed(beta) = self.rule {
            if !(0.0..=1.0).contains(&beta) {
                return Err(Error::Config(format!("fixed beta {beta} outside [0, 1]")));
            }
            return Ok(());
        }
        let ok = self.beta_min >= 0.0 && self.beta_max <= 1.0 && self.beta_min < self.beta_max;
        if !ok {
            return Err(Error::Config(format!(
                "need 0 <= beta_min < beta_max <= 1, got ({}, {})",
                self.beta_min, self.beta_max
            )));
        }
        Ok(())
    }
}

/// `(W₀ + ΔW_agg + ΔW_task)·x`.
pub fn apply_adapter(w0: &Matrix, state: &AdapterState, x: &[f64]) -> Result<Vec<f64>> {
    if w0.shape() != state.shape() {
        return Err(Error::Dimension(format!(
            "base weight {:?} vs adapter {:?}",
            w0.shape(),
            state.shape()
        )));
    }
    let mut y = w0.matvec(x)?;
    for delta in [&state.aggregate, &state.task] {
        for (acc, v) in y.iter_mut().zip(delta.apply(x)?) {
            *acc += v;
        }
    }
    Ok(y)
}

/// Merge coefficient for task `t` given its sample count and the cumulative
/// count of earlier tasks. Always 1 at `t = 1`.
pub fn compute_beta(n_curr: u64, n_prev_cumulative: u64, policy: &MergePolicy, t: u32) -> Result<f64> {
    if t == 0 {
        return Err(Error::Domain("task index starts at 1".into()));
    }
    if t == 1 {
        return Ok(1.0);
    }
    let (lo, hi) = (policy.beta_min, policy.beta_max);
    match policy.rule {
        BetaRule::Fixed(beta) => Ok(beta),
        BetaRule::DataAware => {
            if n_prev_cumulative == 0 {
                return Err(Error::DivisionByZero(format!(
                    "no samples before task {t}"
                )));
            }
            let ratio = n_curr as f64 / n_prev_cumulative as f64;
            Ok((hi - (hi - lo) * ratio).clamp(lo, hi))
        }
        BetaRule::CumulativeShare => {
            let total = n_curr + n_prev_cumulative;
            if n_prev_cumulative == 0 || total == 0 {
                return Err(Error::DivisionByZero(format!(
                    "no samples before task {t}"
                )));
            }
            Ok(hi - (hi - lo) * (n_curr as f64 / total as f64))
        }
    }
}

/// `(1 − β)·ΔW_agg + β·ΔW_task` as a dense matrix.
pub fn merge_dense(agg: &LoraDelta, task: &LoraDelta, beta: f64) -> Result<Matrix> {
    if agg.shape() != task.shape() {
        return Err(Error::Dimension(format!(
            "merge: aggregate {:?} vs task {:?}",
            agg.shape(),
            task.shape()
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Domain(format!("merge coefficient {beta} outside [0, 1]")));
    }
    let a = agg.delta();
    let t = task.delta();
    Ok(a.zip_map(&t, |x, y| (1.0 - beta) * x + beta * y))
}

/// Best rank-`r` factorization `B = U_r Σ_r`, `A = V_rᵀ` of `m`. When `m` has
/// lower numerical rank the factors are zero-padded to exactly `r`.
pub fn project_rank(m: &Matrix, r: usize, layer_name: &str) -> Result<LoraDelta> {
    let svd = truncated_svd(m, r)?;
    let (d_out, d_in) = m.shape();
    let mut b = Matrix::zeros(d_out, r);
    let mut a = Matrix::zeros(r, d_in);
    for (j, &s) in svd.sigma.iter().enumerate() {
        for i in 0..d_out {
            b[(i, j)] = svd.u[(i, j)] * s;
        }
        a.row_mut(j).copy_from_slice(svd.vt.row(j));
    }
    LoraDelta::new(layer_name, b, a)
}

/// Everything that happened during one task transition.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub state: AdapterState,
    pub beta: f64,
    /// `‖merged − B_agg·A_agg‖_F`, the truncation loss.
    pub residual: f64,
}

/// Folds the task adapter into the aggregate and starts the next task.
pub fn merge_step(state: &AdapterState, n_curr: u64, policy: &MergePolicy) -> Result<MergeOutcome> {
    policy.validate()?;
    let beta = compute_beta(n_curr, state.n_cumulative, policy, state.task_index)?;
    let merged = merge_dense(&state.aggregate, &state.task, beta)?;
    let aggregate = project_rank(&merged, policy.rank, state.layer_name())?;
    let residual = merged.sub(&aggregate.delta())?.frobenius_norm();
    let (d_out, d_in) = state.shape();
    let next = AdapterState {
        task: LoraDelta::zeros(state.layer_name(), d_out, d_in, state.task.rank()),
        aggregate,
        n_cumulative: state.n_cumulative + n_curr,
        task_index: state.task_index + 1,
    };
    Ok(MergeOutcome {
        state: next,
        beta,
        residual,
    })
}

/// [`merge_step`] without the diagnostics.
pub fn advance_task(state: &AdapterState, n_curr: u64, policy: &MergePolicy) -> Result<AdapterState> {
    merge_step(state, n_curr, policy).map(|o| o.state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta_from(name: &str, m: &Matrix) -> LoraDelta {
        // Exact factorization B = m, A = I.
        LoraDelta::new(name, m.clone(), Matrix::identity(m.cols())).unwrap()
    }

    #[test]
    fn apply_with_zero_deltas_is_base() {
        let state = AdapterState::new("q", 2, 2, 1);
        let y = apply_adapter(&Matrix::identity(2), &state, &[3.0, -4.0]).unwrap();
        assert_eq!(y, vec![3.0, -4.0]);
    }

    #[test]
    fn apply_aggregate_identity() {
        let mut state = AdapterState::new("q", 2, 2, 2);
        state.aggregate = LoraDelta::new("q", Matrix::identity(2), Matrix::identity(2)).unwrap();
        let y = apply_adapter(&Matrix::zeros(2, 2), &state, &[1.0, 2.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
    }

    #[test]
    fn apply_task_delta() {
        let task = Matrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]).unwrap();
        let state = AdapterState::new("q", 2, 2, 2).with_task(delta_from("q", &task)).unwrap();
        let y = apply_adapter(&Matrix::identity(2), &state, &[1.0, 1.0]).unwrap();
        assert_eq!(y, vec![2.0, 1.0]);
        assert!(apply_adapter(&Matrix::identity(3), &state, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn beta_cases() {
        let p = MergePolicy::default();
        assert_eq!(compute_beta(123, 0, &p, 1).unwrap(), 1.0);
        assert!((compute_beta(100, 100, &p, 2).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(compute_beta(300, 100, &p, 2).unwrap(), 0.2);
        assert!(matches!(compute_beta(5, 0, &p, 2), Err(Error::DivisionByZero(_))));
        let fixed = p.with_rule(BetaRule::Fixed(0.5)).unwrap();
        assert_eq!(compute_beta(300, 100, &fixed, 3).unwrap(), 0.5);
        assert_eq!(compute_beta(300, 100, &fixed, 1).unwrap(), 1.0);
    }

    #[test]
    fn cumulative_share_rule() {
        let p = MergePolicy::default().with_rule(BetaRule::CumulativeShare).unwrap();
        let beta = compute_beta(18459, 4709, &p, 2).unwrap();
        assert!((beta - (0.8 - 0.6 * 18459.0 / 23168.0)).abs() < 1e-15);
        assert!((beta - 0.32).abs() < 0.005);
    }

    #[test]
    fn policy_validation() {
        assert!(MergePolicy::new(0.5, 0.5, 8).is_err());
        assert!(MergePolicy::new(-0.1, 0.8, 8).is_err());
        assert!(MergePolicy::new(0.2, 0.8, 0).is_err());
        assert!(MergePolicy::default().with_rule(BetaRule::Fixed(1.5)).is_err());
    }

    #[test]
    fn merge_dense_cases() {
        let agg = delta_from("l", &Matrix::from_diag(&[2.0, 2.0]));
        let task = delta_from("l", &Matrix::from_diag(&[0.0, 4.0]));
        assert_eq!(merge_dense(&agg, &task, 1.0).unwrap(), task.delta());
        assert_eq!(merge_dense(&agg, &task, 0.0).unwrap(), agg.delta());
        assert_eq!(merge_dense(&agg, &task, 0.5).unwrap(), Matrix::from_diag(&[1.0, 3.0]));
        let other = LoraDelta::zeros("l", 3, 2, 1);
        assert!(merge_dense(&agg, &other, 0.5).is_err());
    }

    #[test]
    fn project_rank_diag() {
        let p = project_rank(&Matrix::from_diag(&[3.0, 1.0]), 1, "l").unwrap();
        assert_eq!(p.delta(), Matrix::from_diag(&[3.0, 0.0]));
        assert_eq!(p.rank(), 1);
        // Zero input keeps the requested rank with zero factors.
        let z = project_rank(&Matrix::zeros(4, 3), 2, "l").unwrap();
        assert_eq!((z.rank(), z.delta()), (2, Matrix::zeros(4, 3)));
    }

    #[test]
    fn first_transition_copies_task() {
        let task = Matrix::from_rows(&[&[1.0, 2.0, 0.0], &[0.5, 1.0, 0.0], &[0.0, 0.0, 3.0]]).unwrap();
        let state = AdapterState::new("l", 3, 3, 2).with_task(delta_from("l", &task)).unwrap();
        let policy = MergePolicy::new(0.2, 0.8, 2).unwrap();
        let out = merge_step(&state, 40, &policy).unwrap();
        assert_eq!(out.beta, 1.0);
        assert!(out.residual < 1e-10);
        assert!(out.state.aggregate.delta().sub(&task).unwrap().max_abs() < 1e-10);
        assert!(out.state.task.is_zero());
        assert_eq!((out.state.n_cumulative, out.state.task_index), (40, 2));
    }

    #[test]
    fn zero_task_shrinks_aggregate() {
        let agg = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]).unwrap();
        let state = AdapterState {
            aggregate: project_rank(&agg, 1, "l").unwrap(),
            task: LoraDelta::zeros("l", 2, 2, 1),
            n_cumulative: 100,
            task_index: 2,
        };
        let policy = MergePolicy::new(0.2, 0.8, 1).unwrap();
        let out = merge_step(&state, 50, &policy).unwrap();
        assert!((out.beta - 0.5).abs() < 1e-15);
        let expected = agg.scale(0.5);
        assert!(out.state.aggregate.delta().sub(&expected).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn diverse_weather_beta_sequence() {
        let policy = MergePolicy::new(0.2, 0.8, 1).unwrap();
        let counts = [4709_u64, 18459, 471];
        let mut state = AdapterState::new("l", 2, 2, 1);
        let mut betas = Vec::new();
        for &n in &counts {
            let out = merge_step(&state, n, &policy).unwrap();
            betas.push(out.beta);
            state = out.state;
        }
        assert_eq!(betas[0], 1.0);
        assert_eq!(betas[1], 0.2);
        assert!((betas[2] - (0.8 - 0.6 * 471.0 / 23168.0)).abs() < 1e-15);
        assert!((betas[2] - 0.788).abs() < 1e-3);
    }
}
