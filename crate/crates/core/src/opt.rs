//! Stochastic optimizer, parameter flattening, and the finite-difference
//! gradient-verification harness every differentiable objective must pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shared training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub mc_samples: usize,
    pub seed: u64,
    /// Deterministic fits stop once the gradient infinity-norm drops below
    /// this value.
    pub tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_steps: 1000,
            batch_size: 256,
            mc_samples: 1,
            seed: 0,
            tolerance: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::ArchitectureInvalid(
                "learning_rate must be positive".into(),
            ));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::ArchitectureInvalid(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if self.batch_size < 1 {
            return Err(Error::ArchitectureInvalid("batch_size must be >= 1".into()));
        }
        if self.mc_samples < 1 {
            return Err(Error::ArchitectureInvalid("mc_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// How a packed segment decodes back into model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    /// Values used as stored.
    Plain,
    /// Square segment decoding to a lower-triangular matrix whose diagonal
    /// is stored in log-space (kept positive under unconstrained steps).
    LowerTriLogDiag,
}

/// One named parameter group inside a flat vector.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: GroupKind,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Registry mapping segments of a flat parameter vector to named groups.
#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    groups: Vec<ParamGroup>,
}

impl ParamLayout {
    pub fn new() -> Self {
        ParamLayout { groups: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, kind: GroupKind) {
        self.groups.push(ParamGroup {
            name: name.into(),
            rows,
            cols,
            kind,
        });
    }

    pub fn push_scalar(&mut self, name: impl Into<String>) {
        self.push(name, 1, 1, GroupKind::Plain);
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn total_len(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }

    /// Offset of a group by name.
    pub fn offset_of(&self, name: &str) -> Option<usize> {
        let mut off = 0;
        for g in &self.groups {
            if g.name == name {
                return Some(off);
            }
            off += g.len();
        }
        None
    }

    /// Human-readable name of a flat coordinate, e.g. `layer1.z[3,0]`.
    pub fn coord_name(&self, index: usize) -> String {
        let mut off = 0;
        for g in &self.groups {
            if index < off + g.len() {
                let local = index - off;
                if g.rows == 1 && g.cols == 1 {
                    return g.name.clone();
                }
                let (r, c) = (local / g.cols, local % g.cols);
                return format!("{}[{},{}]", g.name, r, c);
            }
            off += g.len();
        }
        format!("<out of range {index}>")
    }
}

/// A flat parameter vector together with its group registry.
#[derive(Debug, Clone)]
pub struct ParamVector {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: ParamLayout, values: Vec<f64>) -> Self {
        debug_assert_eq!(layout.total_len(), values.len());
        ParamVector { layout, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The slice backing a named group.
    pub fn group(&self, name: &str) -> Option<&[f64]> {
        let off = self.layout.offset_of(name)?;
        let g = self.layout.groups().iter().find(|g| g.name == name)?;
        Some(&self.values[off..off + g.len()])
    }
}

/// Adam optimizer state: first/second moments with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    skipped: usize,
}

impl AdamState {
    pub fn new(dim: usize, config: &TrainConfig) -> Self {
        AdamState {
            learning_rate: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            skipped: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    /// Steps skipped so far because of non-finite gradients.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Applies one bias-corrected update in place. A gradient containing
    /// NaN or infinity aborts the step: parameters and moments are left
    /// untouched, the skip is counted, and an error is returned.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        debug_assert_eq!(params.len(), grads.len());
        if let Some(coord) = grads.iter().position(|g| !g.is_finite()) {
            self.skipped += 1;
            return Err(Error::NonFiniteGradient { coord });
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// One-shot wrapper around [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.step(params, grads)
}

/// A scalar objective exposing its value and analytic gradient at a point.
pub trait DifferentiableObjective {
    fn dim(&self) -> usize;
    fn layout(&self) -> ParamLayout;
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Result of a finite-difference verification of one coordinate.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub coord: usize,
    pub name: String,
    pub analytic: f64,
    pub finite_difference: f64,
    pub rel_error: f64,
}

/// Report from [`check_gradients`]: per-coordinate comparison of the
/// analytic gradient against central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    /// Coordinates whose relative error exceeds `tolerance`.
    pub fn failures(&self, tolerance: f64) -> Vec<&GradCheckEntry> {
        self.entries
            .iter()
            .filter(|e| e.rel_error > tolerance)
            .collect()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compares the objective's analytic gradient at `point` against central
/// finite differences with step `h`. The objective must be deterministic
/// (fixed seeds, fixed noise) for the comparison to be meaningful.
pub fn check_gradients<O: DifferentiableObjective + ?Sized>(
    objective: &O,
    point: &[f64],
    h: f64,
) -> Result<GradCheckReport> {
    let layout = objective.layout();
    let (_, analytic) = objective.value_and_grad(point)?;
    let mut entries = Vec::with_capacity(point.len());
    let mut max_rel = 0.0f64;
    let mut x = point.to_vec();
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let (fp, _) = objective.value_and_grad(&x)?;
        x[i] = orig - h;
        let (fm, _) = objective.value_and_grad(&x)?;
        x[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(fd.abs());
        let rel = if denom < 1e-6 {
            // Both effectively zero: compare absolutely on the same scale.
            (analytic[i] - fd).abs()
        } else {
            (analytic[i] - fd).abs() / denom
        };
        max_rel = max_rel.max(rel);
        entries.push(GradCheckEntry {
            coord: i,
            name: layout.coord_name(i),
            analytic: analytic[i],
            finite_difference: fd,
            rel_error: rel,
        });
    }
    Ok(GradCheckReport {
        entries,
        max_rel_error: max_rel,
    })
}

/// One row of a training trace.
#[derive(Debug, Clone, Copy)]
pub struct TraceEntry {
    pub step: usize,
    pub objective: f64,
    pub wall_ms: f64,
}

/// Outcome of a deterministic minimization run.
#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub value: f64,
    /// Objective value after every accepted step (non-increasing).
    pub trace: Vec<TraceEntry>,
    pub steps: usize,
    pub rejected: usize,
}

impl MinimizeResult {
    pub fn accepted_values(&self) -> Vec<f64> {
        self.trace.iter().map(|t| t.objective).collect()
    }
}

/// Minimizes a deterministic objective with Adam plus a simple safeguard:
/// a proposed step that fails to decrease the objective (or produces a
/// non-finite value) is rejected, the optimizer state is rolled back, and
/// the learning rate is halved. Accepted objective values are therefore
/// monotonically non-increasing.
pub fn minimize<O: DifferentiableObjective + ?Sized>(
    objective: &O,
    x0: &[f64],
    config: &TrainConfig,
) -> Result<MinimizeResult> {
    config.validate()?;
    let start = std::time::Instant::now();
    let mut x = x0.to_vec();
    let (mut f_cur, mut g_cur) = objective.value_and_grad(&x)?;
    let mut adam = AdamState::new(x.len(), config);
    let lr0 = config.learning_rate;
    let mut trace = vec![TraceEntry {
        step: 0,
        objective: f_cur,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    }];
    let mut rejected = 0usize;
    let mut steps = 0usize;
    let mut streak = 0usize;

    while steps < config.max_steps {
        let grad_norm = g_cur.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if grad_norm < config.tolerance {
            break;
        }
        steps += 1;
        let x_prev = x.clone();
        let adam_prev = adam.clone();
        if adam.step(&mut x, &g_cur).is_err() {
            // Non-finite gradient: abandon the run at the last good point.
            x = x_prev;
            rejected += 1;
            break;
        }
        match objective.value_and_grad(&x) {
            Ok((f_new, g_new)) if f_new.is_finite() && f_new <= f_cur + 1e-12 * f_cur.abs() => {
                f_cur = f_new;
                g_cur = g_new;
                trace.push(TraceEntry {
                    step: steps,
                    objective: f_cur,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                });
                streak += 1;
                if streak >= 5 {
                    adam.set_learning_rate((adam.learning_rate() * 1.2).min(lr0));
                    streak = 0;
                }
            }
            _ => {
                x = x_prev;
                adam = adam_prev;
                rejected += 1;
                streak = 0;
                let lr = adam.learning_rate() * 0.5;
                if lr < 1e-12 {
                    break;
                }
                adam.set_learning_rate(lr);
            }
        }
    }

    Ok(MinimizeResult {
        x,
        value: f_cur,
        trace,
        steps,
        rejected,
    })
}
