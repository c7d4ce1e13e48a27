use super::model::{LossSpec, ModelParams};
use super::objective::{Objective, ShardObjective};
use crate::data::LabeledDataset;
use crate::error::{domain, Error, Result};

/// Settings of the local proximal subproblem solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProximalConfig {
    pub mu: f64,
    pub inner_steps: usize,
    pub learning_rate: f64,
}

impl ProximalConfig {
    pub const DEFAULT_LEARNING_RATE: f64 = 0.002;
    pub const DEFAULT_INNER_STEPS: usize = 30;

    pub fn new(mu: f64, inner_steps: usize, learning_rate: f64) -> Result<Self> {
        let cfg = Self {
            mu,
            inner_steps,
            learning_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(domain(format!("mu must be positive, got {}", self.mu)));
        }
        if self.inner_steps == 0 {
            return Err(domain("inner_steps must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(domain(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Diagnostics from one local solve.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Subproblem objective at each iterate, starting with the anchor.
    pub objective: Vec<f64>,
    /// Subproblem gradient norm at each iterate.
    pub grad_norms: Vec<f64>,
    /// Final over initial subproblem gradient norm (0 when the anchor is stationary).
    pub inexactness: f64,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Full-batch gradient descent on `F(w) + mu/2 ||w - anchor||^2` from the anchor.
pub fn local_train_objective<O: Objective + ?Sized>(
    objective: &O,
    anchor: &[f64],
    prox: &ProximalConfig,
) -> Result<(Vec<f64>, TrainReport)> {
    prox.validate()?;
    if anchor.len() != objective.dim() {
        return Err(Error::ShapeMismatch {
            expected: objective.dim(),
            actual: anchor.len(),
        });
    }
    let mut w = anchor.to_vec();
    let mut grad = vec![0.0; w.len()];
    let mut history = Vec::with_capacity(prox.inner_steps + 1);
    let mut grad_norms = Vec::with_capacity(prox.inner_steps + 1);
    let mut rising = 0;
    for step in 0..=prox.inner_steps {
        let f = objective.value_and_gradient(&w, &mut grad);
        let mut penalty = 0.0;
        for ((g, &wi), &ai) in grad.iter_mut().zip(&w).zip(anchor) {
            let d = wi - ai;
            penalty += d * d;
            *g += prox.mu * d;
        }
        let value = f + 0.5 * prox.mu * penalty;
        if !value.is_finite() {
            return Err(Error::Divergence { step });
        }
        // Rises at rounding level are common once the iterate has converged.
        if history.last().is_some_and(|&prev: &f64| value > prev + 1e-12 * prev.abs().max(1.0)) {
            rising += 1;
            if rising >= 3 {
                return Err(Error::Divergence { step });
            }
        } else {
            rising = 0;
        }
        history.push(value);
        grad_norms.push(l2_norm(&grad));
        if step == prox.inner_steps {
            break;
        }
        w.iter_mut().zip(&grad).for_each(|(wi, g)| *wi -= prox.learning_rate * g);
    }
    let first = grad_norms[0];
    let last = *grad_norms.last().expect("at least one iterate");
    let report = TrainReport {
        objective: history,
        grad_norms,
        inexactness: if first > 0.0 { last / first } else { 0.0 },
    };
    Ok((w, report))
}

/// Algorithm 1's local update on one shard, starting from the broadcast model.
pub fn local_train(
    anchor: &ModelParams,
    shard: &LabeledDataset,
    spec: &LossSpec,
    prox: &ProximalConfig,
) -> Result<(ModelParams, TrainReport)> {
    if shard.is_empty() {
        return Err(domain("local training on an empty shard"));
    }
    let objective = ShardObjective::new(*spec, shard);
    if objective.architecture() != anchor.arch {
        return Err(Error::ShapeMismatch {
            expected: objective.dim(),
            actual: anchor.len(),
        });
    }
    let (values, report) = local_train_objective(&objective, &anchor.values, prox)?;
    Ok((ModelParams { values, arch: anchor.arch }, report))
}

/// Scales `w` down to norm at most `clip_c`. The result is a fixed point:
/// clipping it again changes no bits.
pub fn clip_in_place(w: &mut [f64], clip_c: f64) {
    assert!(clip_c > 0.0, "clip threshold must be positive");
    let norm = l2_norm(w);
    if norm <= clip_c {
        return;
    }
    let original = w.to_vec();
    let mut scale = clip_c / norm;
    loop {
        w.iter_mut().zip(&original).for_each(|(o, &x)| *o = x * scale);
        if l2_norm(w) <= clip_c {
            return;
        }
        scale = scale.next_down();
    }
}

pub fn clip(params: &ModelParams, clip_c: f64) -> ModelParams {
    let mut out = params.clone();
    clip_in_place(&mut out.values, clip_c);
    out
}
