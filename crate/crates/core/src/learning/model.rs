use rand::Rng;

use crate::data::LabeledDataset;
use crate::error::{domain, Error, Result};

/// The two supported model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    MultinomialLogistic,
    /// One hidden ReLU layer followed by a softmax output layer.
    Mlp { hidden: usize },
}

impl ModelKind {
    pub const MLP256: ModelKind = ModelKind::Mlp { hidden: 256 };
}

/// Layer sizes. `hidden == None` is multinomial logistic regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub input: usize,
    pub hidden: Option<usize>,
    pub classes: usize,
}

impl Architecture {
    pub fn param_count(&self) -> usize {
        match self.hidden {
            None => self.input * self.classes + self.classes,
            Some(h) => self.input * h + h + h * self.classes + self.classes,
        }
    }
}

/// Model family plus the ridge coefficient applied to every parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: ModelKind,
    pub l2_reg: f64,
}

impl LossSpec {
    pub fn new(kind: ModelKind, l2_reg: f64) -> Result<Self> {
        if !(l2_reg >= 0.0 && l2_reg.is_finite()) {
            return Err(domain(format!("l2_reg must be finite and nonnegative, got {l2_reg}")));
        }
        if let ModelKind::Mlp { hidden: 0 } = kind {
            return Err(domain("hidden layer must be nonempty"));
        }
        Ok(Self { kind, l2_reg })
    }

    pub fn architecture(&self, input: usize, classes: usize) -> Architecture {
        Architecture {
            input,
            hidden: match self.kind {
                ModelKind::MultinomialLogistic => None,
                ModelKind::Mlp { hidden } => Some(hidden),
            },
            classes,
        }
    }
}

/// Flat parameter vector.
///
/// Logistic layout: `W` (input x classes, row-major) then `b`.
/// MLP layout: `W1` (input x hidden), `b1`, `W2` (hidden x classes), `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub values: Vec<f64>,
    pub arch: Architecture,
}

impl ModelParams {
    pub fn new(values: Vec<f64>, arch: Architecture) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::ShapeMismatch {
                expected: arch.param_count(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(domain("parameters must be finite"));
        }
        Ok(Self { values, arch })
    }

    pub fn zeros(arch: Architecture) -> Self {
        Self {
            values: vec![0.0; arch.param_count()],
            arch,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Initial parameters: zeros for logistic regression, Glorot-uniform weights
/// with zero biases for the MLP.
pub fn init_params<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> ModelParams {
    let mut params = ModelParams::zeros(arch);
    if let Some(h) = arch.hidden {
        let (w1, rest) = params.values.split_at_mut(arch.input * h);
        let w2 = &mut rest[h..h + h * arch.classes];
        let r1 = (6.0 / (arch.input + h) as f64).sqrt();
        w1.iter_mut().for_each(|w| *w = rng.random_range(-r1..=r1));
        let r2 = (6.0 / (h + arch.classes) as f64).sqrt();
        w2.iter_mut().for_each(|w| *w = rng.random_range(-r2..=r2));
    }
    params
}

struct Layers<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

fn split<'a>(arch: &Architecture, w: &'a [f64]) -> Layers<'a> {
    match arch.hidden {
        None => {
            let (w1, b1) = w.split_at(arch.input * arch.classes);
            Layers { w1, b1, w2: &[], b2: &[] }
        }
        Some(h) => {
            let (w1, rest) = w.split_at(arch.input * h);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(h * arch.classes);
            Layers { w1, b1, w2, b2 }
        }
    }
}

fn split_mut<'a>(arch: &Architecture, g: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64], &'a mut [f64], &'a mut [f64]) {
    match arch.hidden {
        None => {
            let (w1, b1) = g.split_at_mut(arch.input * arch.classes);
            (w1, b1, &mut [], &mut [])
        }
        Some(h) => {
            let (w1, rest) = g.split_at_mut(arch.input * h);
            let (b1, rest) = rest.split_at_mut(h);
            let (w2, b2) = rest.split_at_mut(h * arch.classes);
            (w1, b1, w2, b2)
        }
    }
}

/// `out = b + x W` for row-major `W` with `x.len()` rows. Zero inputs are
/// skipped, which matters for sparse images.
fn affine(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let cols = out.len();
    out.copy_from_slice(b);
    for (j, &xj) in x.iter().enumerate() {
        if xj != 0.0 {
            let row = &w[j * cols..(j + 1) * cols];
            out.iter_mut().zip(row).for_each(|(o, &r)| *o += xj * r);
        }
    }
}

/// `g += x delta^T`, skipping zero inputs.
fn outer_acc(x: &[f64], delta: &[f64], g: &mut [f64]) {
    let cols = delta.len();
    for (j, &xj) in x.iter().enumerate() {
        if xj != 0.0 {
            let row = &mut g[j * cols..(j + 1) * cols];
            row.iter_mut().zip(delta).for_each(|(r, &d)| *r += xj * d);
        }
    }
}

/// Replaces logits by softmax probabilities and returns `-log p[y]`.
fn softmax_xent(logits: &mut [f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z_y = logits[y] - max;
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    logits.iter_mut().for_each(|p| *p /= sum);
    sum.ln() - z_y
}

fn check_shapes(params: &ModelParams, spec: &LossSpec, data: &LabeledDataset) -> Result<()> {
    let expected = spec.architecture(data.dim(), data.classes());
    if params.arch != expected {
        return Err(Error::ShapeMismatch {
            expected: expected.param_count(),
            actual: params.len(),
        });
    }
    if data.is_empty() {
        return Err(domain("loss over an empty dataset"));
    }
    Ok(())
}

/// Mean cross-entropy plus ridge; fills `grad` with the exact gradient when
/// one is supplied.
pub(crate) fn evaluate(arch: &Architecture, l2_reg: f64, w: &[f64], data: &LabeledDataset, mut grad: Option<&mut [f64]>) -> f64 {
    let layers = split(arch, w);
    let classes = arch.classes;
    let hidden = arch.hidden.unwrap_or(0);
    let mut h = vec![0.0; hidden];
    let mut logits = vec![0.0; classes];
    let mut delta1 = vec![0.0; hidden];
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }

    let mut total = 0.0;
    for i in 0..data.len() {
        let x = data.row(i);
        let y = data.labels()[i];
        if hidden == 0 {
            affine(x, layers.w1, layers.b1, &mut logits);
        } else {
            affine(x, layers.w1, layers.b1, &mut h);
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            affine(&h, layers.w2, layers.b2, &mut logits);
        }
        total += softmax_xent(&mut logits, y);

        let Some(g) = grad.as_deref_mut() else { continue };
        logits[y] -= 1.0;
        let delta_out = &logits;
        let (gw1, gb1, gw2, gb2) = split_mut(arch, g);
        if hidden == 0 {
            outer_acc(x, delta_out, gw1);
            gb1.iter_mut().zip(delta_out).for_each(|(g, &d)| *g += d);
        } else {
            outer_acc(&h, delta_out, gw2);
            gb2.iter_mut().zip(delta_out).for_each(|(g, &d)| *g += d);
            for k in 0..hidden {
                delta1[k] = if h[k] > 0.0 {
                    let row = &layers.w2[k * classes..(k + 1) * classes];
                    row.iter().zip(delta_out).map(|(w, d)| w * d).sum()
                } else {
                    0.0
                };
            }
            outer_acc(x, &delta1, gw1);
            gb1.iter_mut().zip(&delta1).for_each(|(g, &d)| *g += d);
        }
    }

    let n = data.len() as f64;
    let ridge: f64 = w.iter().map(|v| v * v).sum::<f64>();
    if let Some(g) = grad {
        g.iter_mut().zip(w).for_each(|(g, &wi)| *g = *g / n + 2.0 * l2_reg * wi);
    }
    total / n + l2_reg * ridge
}

/// Mean per-sample cross-entropy over `data`, plus `l2_reg * ||w||^2`.
pub fn loss(params: &ModelParams, spec: &LossSpec, data: &LabeledDataset) -> Result<f64> {
    check_shapes(params, spec, data)?;
    Ok(evaluate(&params.arch, spec.l2_reg, &params.values, data, None))
}

/// Exact gradient of [`loss`].
pub fn gradient(params: &ModelParams, spec: &LossSpec, data: &LabeledDataset) -> Result<Vec<f64>> {
    check_shapes(params, spec, data)?;
    let mut g = vec![0.0; params.len()];
    evaluate(&params.arch, spec.l2_reg, &params.values, data, Some(&mut g));
    Ok(g)
}

/// Fraction of samples whose largest logit is the true label. Ties go to the
/// lowest class index.
pub fn accuracy(params: &ModelParams, spec: &LossSpec, data: &LabeledDataset) -> Result<f64> {
    check_shapes(params, spec, data)?;
    let arch = params.arch;
    let layers = split(&arch, &params.values);
    let mut h = vec![0.0; arch.hidden.unwrap_or(0)];
    let mut logits = vec![0.0; arch.classes];
    let mut correct = 0usize;
    for i in 0..data.len() {
        let x = data.row(i);
        if arch.hidden.is_none() {
            affine(x, layers.w1, layers.b1, &mut logits);
        } else {
            affine(x, layers.w1, layers.b1, &mut h);
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            affine(&h, layers.w2, layers.b2, &mut logits);
        }
        let mut best = 0;
        for k in 1..logits.len() {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        if best == data.labels()[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use proptest::prelude::*;
    use rand::Rng;

    fn toy() -> LabeledDataset {
        // 8 samples, 2 features, 3 classes.
        let features = vec![
            0.5, -1.0, 1.5, 0.25, -0.75, 2.0, 0.0, 1.0, //
            -1.25, -0.5, 0.75, 0.75, 2.0, -2.0, -0.25, 0.5,
        ];
        LabeledDataset::new(features, vec![0, 1, 2, 0, 1, 2, 0, 1], 2, 3).unwrap()
    }

    // Scalar-by-scalar softmax cross entropy, written without the vectorized helpers.
    fn naive_logistic_loss(w: &[[f64; 3]; 2], b: &[f64; 3], data: &LabeledDataset, reg: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..data.len() {
            let x = data.row(i);
            let mut z = [0.0; 3];
            for k in 0..3 {
                z[k] = b[k] + x[0] * w[0][k] + x[1] * w[1][k];
            }
            let lse = (z[0].exp() + z[1].exp() + z[2].exp()).ln();
            total += lse - z[data.labels()[i]];
        }
        let mut sq = 0.0;
        for row in w {
            for v in row {
                sq += v * v;
            }
        }
        for v in b {
            sq += v * v;
        }
        total / data.len() as f64 + reg * sq
    }

    #[test]
    fn logistic_matches_scalar_reimplementation() {
        let w = [[0.3, -0.2, 0.1], [-0.4, 0.6, 0.05]];
        let b = [0.1, 0.0, -0.2];
        let mut values = Vec::new();
        values.extend_from_slice(&w[0]);
        values.extend_from_slice(&w[1]);
        values.extend_from_slice(&b);
        let data = toy();
        for reg in [0.0, 1e-3] {
            let spec = LossSpec::new(ModelKind::MultinomialLogistic, reg).unwrap();
            let params = ModelParams::new(values.clone(), spec.architecture(2, 3)).unwrap();
            let got = loss(&params, &spec, &data).unwrap();
            let want = naive_logistic_loss(&w, &b, &data, reg);
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let data = LabeledDataset::new(vec![1.0; 20], (0..20).map(|i| i % 10).collect(), 1, 10).unwrap();
        let spec = LossSpec::new(ModelKind::MultinomialLogistic, 0.0).unwrap();
        let params = ModelParams::zeros(spec.architecture(1, 10));
        assert!((loss(&params, &spec, &data).unwrap() - 10f64.ln()).abs() < 1e-14);
        // All ties resolve to class 0.
        assert!((accuracy(&params, &spec, &data).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_symmetric_data_zero_bias_gradient() {
        let data = LabeledDataset::new(vec![1.0, -1.0, 2.0, -2.0], vec![0, 1, 0, 1], 1, 2).unwrap();
        let spec = LossSpec::new(ModelKind::MultinomialLogistic, 0.0).unwrap();
        let params = ModelParams::zeros(spec.architecture(1, 2));
        let g = gradient(&params, &spec, &data).unwrap();
        assert_eq!(&g[2..], &[0.0, 0.0]);
    }

    #[test]
    fn ridge_gradient_contribution() {
        let data = toy();
        let arch = Architecture { input: 2, hidden: None, classes: 3 };
        let params = ModelParams::new((0..9).map(|i| i as f64 * 0.1 - 0.4).collect(), arch).unwrap();
        let plain = LossSpec::new(ModelKind::MultinomialLogistic, 0.0).unwrap();
        let ridge = LossSpec::new(ModelKind::MultinomialLogistic, 0.25).unwrap();
        let g0 = gradient(&params, &plain, &data).unwrap();
        let g1 = gradient(&params, &ridge, &data).unwrap();
        for ((a, b), w) in g0.iter().zip(&g1).zip(&params.values) {
            assert!((b - a - 0.5 * w).abs() < 1e-14);
        }
    }

    #[test]
    fn separable_pair_fully_accurate() {
        let data = LabeledDataset::new(vec![1.0, -1.0], vec![0, 1], 1, 2).unwrap();
        let spec = LossSpec::new(ModelKind::MultinomialLogistic, 0.0).unwrap();
        let params = ModelParams::new(vec![1.0, -1.0, 0.0, 0.0], spec.architecture(1, 2)).unwrap();
        assert_eq!(accuracy(&params, &spec, &data).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch_reported() {
        let spec = LossSpec::new(ModelKind::MultinomialLogistic, 0.0).unwrap();
        let params = ModelParams::zeros(spec.architecture(3, 3));
        assert!(matches!(loss(&params, &spec, &toy()), Err(Error::ShapeMismatch { .. })));
        assert!(ModelParams::new(vec![0.0; 4], spec.architecture(3, 3)).is_err());
    }

    #[test]
    fn glorot_bounds_and_zero_biases() {
        let arch = Architecture { input: 6, hidden: Some(4), classes: 3 };
        let p = init_params(arch, &mut stream(1, Purpose::Init, 0, 0));
        let r1 = (6.0f64 / 10.0).sqrt();
        assert!(p.values[..24].iter().all(|w| w.abs() <= r1));
        assert!(p.values[24..28].iter().all(|&b| b == 0.0));
        assert!(p.values[40..].iter().all(|&b| b == 0.0));
        assert!(p.values[..24].iter().any(|&w| w != 0.0));
    }

    fn relative_fd_error(arch: Architecture, spec: &LossSpec, w: &[f64], data: &LabeledDataset) -> f64 {
        let mut g = vec![0.0; w.len()];
        evaluate(&arch, spec.l2_reg, w, data, Some(&mut g));
        let h = 1e-5;
        let mut probe = w.to_vec();
        let mut diff = 0.0;
        let mut scale = 0.0;
        for j in 0..w.len() {
            probe[j] = w[j] + h;
            let up = evaluate(&arch, spec.l2_reg, &probe, data, None);
            probe[j] = w[j] - h;
            let down = evaluate(&arch, spec.l2_reg, &probe, data, None);
            probe[j] = w[j];
            let fd = (up - down) / (2.0 * h);
            diff += (fd - g[j]).powi(2);
            scale += fd.powi(2).max(g[j].powi(2));
        }
        diff.sqrt() / scale.sqrt().max(1e-12)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gradients_match_finite_differences(seed in any::<u64>(), hidden in prop::option::of(1usize..6)) {
            let mut rng = stream(seed, Purpose::Probe, 0, 0);
            let (dim, classes, n) = (3, 3, 6);
            let features: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let data = LabeledDataset::new(features, labels, dim, classes).unwrap();
            let kind = match hidden {
                None => ModelKind::MultinomialLogistic,
                Some(hidden) => ModelKind::Mlp { hidden },
            };
            let spec = LossSpec::new(kind, 1e-3).unwrap();
            let arch = spec.architecture(dim, classes);
            let w: Vec<f64> = (0..arch.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
            prop_assert!(relative_fd_error(arch, &spec, &w, &data) <= 1e-4);
        }
    }
}
