//! Regularity constants of a federated objective and closed-form convergence
//! bounds for noising before aggregation.
//!
//! The all-client bound is `P^T Theta + (kappa1 T/eps + kappa0 T^2/eps^2)(1 - P^T)`
//! with `P = 1 + 2 l lambda2`. Its `kappa` constants assume an aggregate
//! sensitivity of `1/(mN)`, which equals `2C/(mN)` only when `2C = 1`;
//! [`theorem2_bound_general`] takes the calibrated noise instead.

use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

use crate::error::{domain, Error, Result};
use crate::learning::{l2_norm, Objective};
use crate::privacy::{aggregate_sigma, min_rounds_for_b, ExposureModel, PrivacyBudget, ScheduleMode};

/// Constants of the smoothness, Lipschitz, PL and dissimilarity assumptions.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRegularity {
    /// Smoothness `rho`.
    pub rho: f64,
    /// Lipschitz constant `beta` (gradient norm bound).
    pub beta: f64,
    /// PL constant `l`.
    pub l: f64,
    /// Dissimilarity bound `B >= 1`.
    pub dissimilarity: f64,
    /// Initial gap `Theta = F(w0) - F*`.
    pub theta: f64,
    /// Per-client divergence `eps_i`, the largest `||grad F_i - grad F||` seen.
    pub divergence: Vec<f64>,
    /// Estimated optimum `F*`.
    pub f_star: f64,
    /// Largest norm among the points where gradients were evaluated.
    pub probe_radius: f64,
    /// Probes that entered the `B` estimate.
    pub probes_used: usize,
}

impl LossRegularity {
    /// Constants supplied by hand rather than estimated.
    pub fn from_constants(rho: f64, beta: f64, l: f64, dissimilarity: f64, theta: f64) -> Result<Self> {
        for (name, v) in [("rho", rho), ("beta", beta), ("l", l), ("theta", theta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !(dissimilarity >= 1.0 && dissimilarity.is_finite()) {
            return Err(domain(format!("B must be at least 1, got {dissimilarity}")));
        }
        Ok(Self {
            rho,
            beta,
            l,
            dissimilarity,
            theta,
            divergence: Vec::new(),
            f_star: 0.0,
            probe_radius: 0.0,
            probes_used: 0,
        })
    }
}

/// Settings of [`estimate_regularity`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularityConfig {
    pub probes: usize,
    /// Jitter scale relative to the norm of the trajectory point.
    pub jitter: f64,
    /// Iteration cap of the reference minimization.
    pub reference_steps: usize,
    /// Gradient-norm stopping tolerance of the reference minimization.
    pub tolerance: f64,
}

impl Default for RegularityConfig {
    fn default() -> Self {
        Self {
            probes: 64,
            jitter: 0.1,
            reference_steps: 20_000,
            tolerance: 1e-9,
        }
    }
}

/// Equal-weight mean of several objectives.
pub struct MeanObjective<'a, O> {
    parts: &'a [O],
}

impl<'a, O: Objective> MeanObjective<'a, O> {
    pub fn new(parts: &'a [O]) -> Self {
        assert!(!parts.is_empty(), "mean of no objectives");
        Self { parts }
    }
}

impl<O: Objective> Objective for MeanObjective<'_, O> {
    fn dim(&self) -> usize {
        self.parts[0].dim()
    }

    fn value_and_gradient(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        let n = self.parts.len() as f64;
        let mut part = vec![0.0; w.len()];
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut value = 0.0;
        for obj in self.parts {
            value += obj.value_and_gradient(w, &mut part);
            grad.iter_mut().zip(&part).for_each(|(g, p)| *g += p);
        }
        grad.iter_mut().for_each(|g| *g /= n);
        value / n
    }

    fn value(&self, w: &[f64]) -> f64 {
        self.parts.iter().map(|o| o.value(w)).sum::<f64>() / self.parts.len() as f64
    }
}

/// Accelerated gradient descent with backtracking and function-value
/// restarts. Returns the visited iterates' values and gradient norms, the
/// recorded snapshots and the final point.
struct Descent {
    values: Vec<f64>,
    grad_norms: Vec<f64>,
    snapshots: Vec<Vec<f64>>,
    best_value: f64,
}

fn descend<O: Objective + ?Sized>(obj: &O, w0: &[f64], cfg: &RegularityConfig, keep: usize) -> Descent {
    let steps = cfg.reference_steps.max(1);
    // Snapshot indices spread geometrically so early iterates are dense.
    let mut marks: Vec<usize> = (0..keep)
        .map(|j| ((steps as f64).powf(j as f64 / keep.saturating_sub(1).max(1) as f64)) as usize - 1)
        .collect();
    marks.dedup();

    let dim = w0.len();
    let mut x = w0.to_vec();
    let mut x_prev = x.clone();
    let mut y = x.clone();
    let mut gy = vec![0.0; dim];
    let mut gx = vec![0.0; dim];
    let mut fx = obj.value_and_gradient(&x, &mut gx);
    let mut momentum = 1.0f64;
    let mut step = 1.0;
    let mut out = Descent {
        values: vec![fx],
        grad_norms: vec![l2_norm(&gx)],
        snapshots: vec![x.clone()],
        best_value: fx,
    };
    let mut next_mark = 1;

    for k in 1..=steps {
        if out.grad_norms.last().is_some_and(|&g| g <= cfg.tolerance) {
            break;
        }
        let fy = obj.value_and_gradient(&y, &mut gy);
        let gy_sq: f64 = gy.iter().map(|g| g * g).sum();
        let mut candidate = vec![0.0; dim];
        step *= 2.0;
        let mut fc;
        loop {
            candidate.iter_mut().zip(&y).zip(&gy).for_each(|((c, &yi), &g)| *c = yi - step * g);
            fc = obj.value(&candidate);
            if fc <= fy - 0.5 * step * gy_sq || step < 1e-20 {
                break;
            }
            step *= 0.5;
        }
        x_prev.copy_from_slice(&x);
        x = candidate;
        let restart = fc > fx;
        fx = obj.value_and_gradient(&x, &mut gx);
        let next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let beta = if restart { 0.0 } else { (momentum - 1.0) / next };
        momentum = if restart { 1.0 } else { next };
        for i in 0..dim {
            y[i] = x[i] + beta * (x[i] - x_prev[i]);
        }
        out.values.push(fx);
        out.grad_norms.push(l2_norm(&gx));
        out.best_value = out.best_value.min(fx);
        while next_mark < marks.len() && marks[next_mark] < k {
            next_mark += 1;
        }
        if next_mark < marks.len() && marks[next_mark] == k {
            out.snapshots.push(x.clone());
            next_mark += 1;
        }
    }
    if out.snapshots.last() != Some(&x) {
        out.snapshots.push(x);
    }
    out
}

/// Estimates `rho`, `beta`, `l`, `B`, `Theta` and the divergences `eps_i` of
/// `F = mean_i F_i` around a noiseless minimization path started at `w0`.
///
/// Probes are trajectory points with Gaussian jitter of norm about
/// `jitter * ||w||`.
pub fn estimate_regularity<O: Objective, R: Rng + ?Sized>(
    locals: &[O],
    w0: &[f64],
    cfg: &RegularityConfig,
    rng: &mut R,
) -> Result<LossRegularity> {
    if locals.is_empty() {
        return Err(domain("no local objectives"));
    }
    if cfg.probes < 2 {
        return Err(domain("need at least two probes"));
    }
    let global = MeanObjective::new(locals);
    let dim = global.dim();
    if w0.len() != dim {
        return Err(Error::ShapeMismatch {
            expected: dim,
            actual: w0.len(),
        });
    }
    let path = descend(&global, w0, cfg, cfg.probes);
    let f_star = path.best_value;
    let theta = path.values[0] - f_star;

    let mut l = f64::INFINITY;
    for (&f, &g) in path.values.iter().zip(&path.grad_norms) {
        let gap = f - f_star;
        if gap >= 1e-10 {
            l = l.min(g * g / (2.0 * gap));
        }
    }

    let w_star_norm = l2_norm(path.snapshots.last().expect("at least one snapshot"));
    let mut points = Vec::with_capacity(cfg.probes);
    for j in 0..cfg.probes {
        let base = &path.snapshots[j % path.snapshots.len()];
        let norm = l2_norm(base);
        let radius = cfg.jitter * if norm > 0.0 { norm } else { w_star_norm };
        let scale = radius / (dim as f64).sqrt();
        let point: Vec<f64> = base
            .iter()
            .map(|&b| b + scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        points.push(point);
    }

    let n = locals.len() as f64;
    let mut grads = Vec::with_capacity(points.len());
    let mut divergence = vec![0.0f64; locals.len()];
    let mut dissimilarity = 1.0f64;
    let mut used = 0;
    let mut local_grad = vec![0.0; dim];
    for point in &points {
        let mut local_grads = Vec::with_capacity(locals.len());
        let mut global_grad = vec![0.0; dim];
        for obj in locals {
            obj.value_and_gradient(point, &mut local_grad);
            global_grad.iter_mut().zip(&local_grad).for_each(|(g, v)| *g += v / n);
            local_grads.push(local_grad.clone());
        }
        let gnorm = l2_norm(&global_grad);
        let mut spread = 0.0;
        for (i, lg) in local_grads.iter().enumerate() {
            let diff: f64 = lg.iter().zip(&global_grad).map(|(a, b)| (a - b).powi(2)).sum();
            divergence[i] = divergence[i].max(diff.sqrt());
            spread += diff / n;
        }
        if gnorm >= 1e-12 {
            used += 1;
            dissimilarity = dissimilarity.max((1.0 + spread / (gnorm * gnorm)).sqrt());
        }
        grads.push(global_grad);
    }
    if used == 0 {
        return Err(Error::Degenerate("gradient vanishes at every probe point".into()));
    }

    let mut rho = 0.0f64;
    for a in 0..points.len() {
        for b in a + 1..points.len() {
            let dw: f64 = points[a].iter().zip(&points[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            if dw > 0.0 {
                let dg: f64 = grads[a].iter().zip(&grads[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                rho = rho.max(dg / dw);
            }
        }
    }
    let beta = grads
        .iter()
        .map(|g| l2_norm(g))
        .chain(path.grad_norms.iter().copied())
        .fold(0.0, f64::max);
    let probe_radius = points
        .iter()
        .chain(path.snapshots.iter())
        .map(|p| l2_norm(p))
        .fold(0.0, f64::max);
    if !l.is_finite() {
        return Err(Error::Degenerate("initial point is already optimal".into()));
    }
    Ok(LossRegularity {
        rho,
        beta,
        l,
        dissimilarity,
        theta,
        divergence,
        f_star,
        probe_radius,
        probes_used: used,
    })
}

/// Coefficients of the per-round loss increment bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaCoeffs {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// `lambda0 = rho/2`, `lambda1 = 1/mu + rho B/mu`,
/// `lambda2 = -1/mu + rho B/mu^2 + rho B^2/(2 mu^2)`. Requires `mu > rho`.
pub fn lambda_coeffs(mu: f64, rho: f64, dissimilarity: f64) -> Result<LambdaCoeffs> {
    if !(mu > rho) {
        return Err(domain(format!("need mu > rho, got mu = {mu}, rho = {rho}")));
    }
    let b = dissimilarity;
    Ok(LambdaCoeffs {
        lambda0: rho / 2.0,
        lambda1: 1.0 / mu + rho * b / mu,
        lambda2: -1.0 / mu + rho * b / (mu * mu) + rho * b * b / (2.0 * mu * mu),
    })
}

/// `lambda2 g^2 + lambda1 n1 g + lambda0 n2`: the bound on one round's expected
/// loss increase at gradient norm `g` with noise norm moments `n1`, `n2`.
pub fn lemma3_increment(grad_norm: f64, noise_norm_mean: f64, noise_norm_sq_mean: f64, coeffs: &LambdaCoeffs) -> f64 {
    coeffs.lambda2 * grad_norm * grad_norm
        + coeffs.lambda1 * noise_norm_mean * grad_norm
        + coeffs.lambda0 * noise_norm_sq_mean
}

/// `(sigma sqrt(2 n / pi), sigma^2 n)` for an `n`-dimensional noise vector.
pub fn noise_norm_moments(sigma: f64, n_eff: usize) -> (f64, f64) {
    let n = n_eff as f64;
    (sigma * (2.0 * n / PI).sqrt(), sigma * sigma * n)
}

/// Everything the bound evaluators need besides `T` and `epsilon`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    pub n_clients: usize,
    pub shard_size: usize,
    pub clip_c: f64,
    pub delta: f64,
    pub mu: f64,
    pub uplink: u32,
    pub reg: LossRegularity,
}

/// Derived constants of the all-client bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParams {
    pub lambda: LambdaCoeffs,
    pub p: f64,
    pub kappa0: f64,
    pub kappa1: f64,
}

/// Lemma coefficients, contraction `P = 1 + 2 l lambda2` and the `kappa`s.
/// A regime error is returned unless `0 < P < 1`.
pub fn theorem2_params(inputs: &BoundInputs) -> Result<BoundParams> {
    let reg = &inputs.reg;
    let lambda = lambda_coeffs(inputs.mu, reg.rho, reg.dissimilarity)?;
    let p = 1.0 + 2.0 * reg.l * lambda.lambda2;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Regime(format!("contraction P = {p} is outside (0, 1)")));
    }
    let c = crate::privacy::gaussian_constant(inputs.delta)?;
    let m = inputs.shard_size as f64;
    let n = inputs.n_clients as f64;
    Ok(BoundParams {
        lambda,
        p,
        kappa1: lambda.lambda1 * reg.beta * c * (2.0 / (n * PI)).sqrt() / (m * (1.0 - p)),
        kappa0: lambda.lambda0 * c * c / (m * m * (1.0 - p) * n),
    })
}

fn check_rounds_eps(rounds: u32, epsilon: f64) -> Result<()> {
    if rounds == 0 {
        return Err(domain("T must be at least 1"));
    }
    if !(epsilon > 0.0) {
        return Err(domain(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(())
}

/// The all-client bound exactly as published (aggregate sensitivity `1/(mN)`,
/// and the `sigma_D > 0` branch at every `T`).
pub fn theorem2_bound(rounds: u32, epsilon: f64, inputs: &BoundInputs) -> Result<f64> {
    check_rounds_eps(rounds, epsilon)?;
    let bp = theorem2_params(inputs)?;
    let t = rounds as f64;
    let pt = bp.p.powf(t);
    Ok(pt * inputs.reg.theta + (bp.kappa1 * t / epsilon + bp.kappa0 * t * t / (epsilon * epsilon)) * (1.0 - pt))
}

/// The all-client bound driven by the calibrated aggregate noise
/// (`Delta s_D = 2C/(mN)`, zero server noise when `T <= L sqrt N`) and a noise
/// dimension `n_eff` (the paper uses `N`).
pub fn theorem2_bound_general(rounds: u32, epsilon: f64, inputs: &BoundInputs, n_eff: Option<usize>) -> Result<f64> {
    check_rounds_eps(rounds, epsilon)?;
    let bp = theorem2_params(inputs)?;
    let budget = PrivacyBudget::new(epsilon, inputs.delta)?;
    let exposures = ExposureModel::new(inputs.uplink.min(rounds), rounds)?;
    let cal = aggregate_sigma(
        ScheduleMode::AllClients,
        &budget,
        inputs.clip_c,
        inputs.shard_size,
        inputs.n_clients,
        &exposures,
    )?;
    let (n1, n2) = noise_norm_moments(cal.sigma_aggregate, n_eff.unwrap_or(inputs.n_clients));
    let per_round = bp.lambda.lambda1 * inputs.reg.beta * n1 + bp.lambda.lambda0 * n2;
    let pt = bp.p.powf(rounds as f64);
    Ok(pt * inputs.reg.theta + per_round * (1.0 - pt) / (1.0 - bp.p))
}

/// Derived constants of the K-random bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KBoundParams {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub q: f64,
}

pub fn theorem3_params(k: usize, inputs: &BoundInputs) -> Result<KBoundParams> {
    let n = inputs.n_clients;
    if k == 0 || k > n {
        return Err(domain(format!("need 1 <= K <= N, got K = {k}, N = {n}")));
    }
    let reg = &inputs.reg;
    let (rho, b, mu, l) = (reg.rho, reg.dissimilarity, inputs.mu, reg.l);
    let (kf, nf) = (k as f64, n as f64);
    let sk = kf.sqrt();
    let alpha2 = (rho * b * b / 2.0 + rho * b + rho * b * b / kf + 2.0 * rho * b * b / sk + mu * b / sk - mu) / (mu * mu);
    let q = 1.0 + 2.0 * l * alpha2;
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Regime(format!("contraction Q = {q} is outside (0, 1)")));
    }
    Ok(KBoundParams {
        alpha0: 2.0 * rho * kf / nf + rho,
        alpha1: 1.0 + 2.0 * rho * b / mu + 2.0 * rho * b * sk / (mu * nf),
        alpha2,
        q,
    })
}

/// The K-random bound as published. Undefined while
/// `1 - N/K + (N/K) e^{-eps/T} <= 0`.
pub fn theorem3_bound(rounds: u32, epsilon: f64, k: usize, inputs: &BoundInputs) -> Result<f64> {
    check_rounds_eps(rounds, epsilon)?;
    let kp = theorem3_params(k, inputs)?;
    let t = rounds as f64;
    let inv_q = inputs.n_clients as f64 / k as f64;
    let arg = 1.0 - inv_q + inv_q * (-epsilon / t).exp();
    if !(arg > 0.0) {
        return Err(Error::BoundUndefined {
            min_rounds: min_rounds_for_b(epsilon, k, inputs.n_clients),
        });
    }
    let ln = arg.ln();
    let c = crate::privacy::gaussian_constant(inputs.delta)?;
    let m = inputs.shard_size as f64;
    let kf = k as f64;
    let noise = c * kp.alpha1 * inputs.reg.beta * (2.0 / PI).sqrt() / (-m * kf * ln)
        + c * c * kp.alpha0 / (m * m * kf * kf * ln * ln);
    let qt = kp.q.powf(t);
    Ok(qt * inputs.reg.theta + (1.0 - qt) / (1.0 - kp.q) * noise)
}

/// A bound or loss evaluated over a grid; `None` marks undefined points.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub grid: Vec<u32>,
    pub values: Vec<Option<f64>>,
}

impl Profile {
    /// Evaluates `f` on `grid`. Undefined-bound errors become gaps; any other
    /// error aborts.
    pub fn evaluate(grid: &[u32], mut f: impl FnMut(u32) -> Result<f64>) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.len());
        for &x in grid {
            match f(x) {
                Ok(v) => values.push(Some(v)),
                Err(Error::BoundUndefined { .. } | Error::BUndefined { .. }) => values.push(None),
                Err(e) => return Err(e),
            }
        }
        Ok(Self {
            grid: grid.to_vec(),
            values,
        })
    }

    /// Grid point with the smallest defined value (first one on ties).
    pub fn argmin(&self) -> Option<u32> {
        let mut best: Option<(u32, f64)> = None;
        for (&x, v) in self.grid.iter().zip(&self.values) {
            if let Some(v) = *v {
                if best.is_none_or(|(_, b)| v < b) {
                    best = Some((x, v));
                }
            }
        }
        best.map(|(x, _)| x)
    }

    /// True iff the divided second differences of consecutive defined points
    /// are all nonnegative (up to rounding).
    pub fn is_convex(&self) -> bool {
        let pts: Vec<(f64, f64)> = self
            .grid
            .iter()
            .zip(&self.values)
            .filter_map(|(&x, v)| v.map(|v| (x as f64, v)))
            .collect();
        pts.windows(3).all(|w| {
            let (x0, y0) = w[0];
            let (x1, y1) = w[1];
            let (x2, y2) = w[2];
            let left = (y1 - y0) / (x1 - x0);
            let right = (y2 - y1) / (x2 - x1);
            let scale = y0.abs().max(y1.abs()).max(y2.abs());
            right - left >= -1e-12 * scale / (x2 - x0).min(1.0)
        })
    }

    /// True iff the minimum lies strictly inside the grid.
    pub fn has_interior_min(&self) -> bool {
        match self.argmin() {
            Some(x) => x != self.grid[0] && Some(&x) != self.grid.last(),
            None => false,
        }
    }
}

/// Result of a round-count or client-count scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub best: u32,
    pub convex: bool,
    pub profile: Profile,
}

/// Minimizes a bound over `T = 1..=grid_max`.
pub fn optimal_t(grid_max: u32, f: impl FnMut(u32) -> Result<f64>) -> Result<Optimum> {
    if grid_max == 0 {
        return Err(domain("grid_max must be at least 1"));
    }
    let grid: Vec<u32> = (1..=grid_max).collect();
    optimum_on(&grid, f)
}

/// Minimizes a bound or an empirical loss over the given client counts.
pub fn optimal_k(ks: &[u32], f: impl FnMut(u32) -> Result<f64>) -> Result<Optimum> {
    optimum_on(ks, f)
}

fn optimum_on(grid: &[u32], f: impl FnMut(u32) -> Result<f64>) -> Result<Optimum> {
    let profile = Profile::evaluate(grid, f)?;
    let best = profile
        .argmin()
        .ok_or_else(|| Error::Regime("the bound is undefined on the whole grid".into()))?;
    Ok(Optimum {
        best,
        convex: profile.is_convex(),
        profile,
    })
}
