use super::model::{evaluate, Architecture, LossSpec};
use crate::data::LabeledDataset;

/// A differentiable function of a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Writes the gradient into `grad` and returns the value.
    fn value_and_gradient(&self, w: &[f64], grad: &mut [f64]) -> f64;

    fn value(&self, w: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.value_and_gradient(w, &mut g)
    }
}

/// The training loss of one client's shard.
#[derive(Debug, Clone, Copy)]
pub struct ShardObjective<'a> {
    spec: LossSpec,
    arch: Architecture,
    data: &'a LabeledDataset,
}

impl<'a> ShardObjective<'a> {
    pub fn new(spec: LossSpec, data: &'a LabeledDataset) -> Self {
        Self {
            spec,
            arch: spec.architecture(data.dim(), data.classes()),
            data,
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }
}

impl Objective for ShardObjective<'_> {
    fn dim(&self) -> usize {
        self.arch.param_count()
    }

    fn value_and_gradient(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        evaluate(&self.arch, self.spec.l2_reg, w, self.data, Some(grad))
    }

    fn value(&self, w: &[f64]) -> f64 {
        evaluate(&self.arch, self.spec.l2_reg, w, self.data, None)
    }
}

/// Separable quadratic `sum_j a_j (w_j - c_j)^2 / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub curvature: Vec<f64>,
    pub center: Vec<f64>,
}

impl Quadratic {
    pub fn new(curvature: Vec<f64>, center: Vec<f64>) -> Self {
        assert_eq!(curvature.len(), center.len(), "curvature and center lengths differ");
        Self { curvature, center }
    }

    /// One-dimensional `a (w - c)^2 / 2`.
    pub fn scalar(a: f64, c: f64) -> Self {
        Self::new(vec![a], vec![c])
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value_and_gradient(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        let mut value = 0.0;
        for j in 0..w.len() {
            let d = w[j] - self.center[j];
            grad[j] = self.curvature[j] * d;
            value += 0.5 * self.curvature[j] * d * d;
        }
        value
    }
}
