//! Gaussian-mechanism calibration for noising before aggregation.
//!
//! Clients perturb their clipped parameters with `sigma_uplink`; the server
//! adds `sigma_downlink` on top of the aggregate so that the broadcast model
//! carries an effective standard deviation `sigma_aggregate` that covers `T`
//! downlink exposures.
//!
//! The Gaussian constant `c = sqrt(2 ln(1.25 / delta))` is the classical one,
//! which is only proven for `epsilon < 1`. It is applied verbatim for every
//! `epsilon`, including the large budgets (50..100) used in the experiments.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{domain, Error, Result};

/// Target `(epsilon, delta)` plus the Gaussian-mechanism constant `c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
    pub c: f64,
}

impl PrivacyBudget {
    /// Budget with `c` set to its minimal admissible value for `delta`.
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        let c = gaussian_constant(delta)?;
        Self::with_constant(epsilon, delta, c)
    }

    /// Budget with an explicit constant, which must not undercut the minimum.
    pub fn with_constant(epsilon: f64, delta: f64, c: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(domain(format!("epsilon must be positive, got {epsilon}")));
        }
        let min_c = gaussian_constant(delta)?;
        if !(c >= min_c) || !c.is_finite() {
            return Err(domain(format!(
                "Gaussian constant {c} is below the minimum {min_c} for delta = {delta}"
            )));
        }
        Ok(Self { epsilon, delta, c })
    }
}

/// Threat model: at most `uplink` observations of each client's uploads and
/// `rounds` observations of the broadcast model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExposureModel {
    pub uplink: u32,
    pub rounds: u32,
}

impl ExposureModel {
    pub fn new(uplink: u32, rounds: u32) -> Result<Self> {
        if uplink == 0 || rounds == 0 {
            return Err(domain("exposure counts must be positive"));
        }
        if uplink > rounds {
            return Err(domain(format!(
                "uplink exposures L = {uplink} exceed the round count T = {rounds}"
            )));
        }
        Ok(Self { uplink, rounds })
    }
}

/// Sensitivities of local training and of equal-weight aggregation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityReport {
    pub clip_c: f64,
    pub shard_size: usize,
    pub n_clients: usize,
    pub ds_uplink: f64,
    pub ds_downlink: f64,
}

impl SensitivityReport {
    pub fn new(clip_c: f64, shard_size: usize, n_clients: usize) -> Result<Self> {
        if n_clients == 0 {
            return Err(domain("n_clients must be positive"));
        }
        let ds_uplink = uplink_sensitivity(clip_c, shard_size)?;
        let ds_downlink = downlink_sensitivity(clip_c, shard_size, 1.0 / n_clients as f64)?;
        Ok(Self {
            clip_c,
            shard_size,
            n_clients,
            ds_uplink,
            ds_downlink,
        })
    }
}

/// Which clients take part in each aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    AllClients,
    KRandom { k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum CalibrationWarning {
    /// The zero-noise threshold `T <= eps / gamma` and the alternative
    /// `T <= b L sqrt(K)` select different branches.
    ThresholdDisagreement { eps_over_gamma: f64, b_l_sqrt_k: f64 },
    /// `b` is undefined at this `T`; harmless for the zero branch but the
    /// K-random convergence bound cannot be evaluated.
    BUndefined { min_rounds: f64 },
}

/// Noise scales for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCalibration {
    pub sigma_uplink: f64,
    pub sigma_downlink: f64,
    pub sigma_aggregate: f64,
    pub mode: ScheduleMode,
    pub b_coeff: Option<f64>,
    pub gamma: Option<f64>,
    pub warnings: Vec<CalibrationWarning>,
}

/// `sqrt(2 ln(1.25 / delta))`.
pub fn gaussian_constant(delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok((2.0 * (1.25 / delta).ln()).sqrt())
}

/// Sensitivity of a client's trained parameters to one changed sample: `2C / m`.
pub fn uplink_sensitivity(clip_c: f64, shard_size: usize) -> Result<f64> {
    if !(clip_c > 0.0) {
        return Err(domain(format!("clip threshold must be positive, got {clip_c}")));
    }
    if shard_size == 0 {
        return Err(domain("shard size must be at least 1"));
    }
    Ok(2.0 * clip_c / shard_size as f64)
}

/// Sensitivity of the aggregate to one changed sample of a client with
/// aggregation weight `weight`: `2 C p_i / m`.
pub fn downlink_sensitivity(clip_c: f64, shard_size: usize, weight: f64) -> Result<f64> {
    if !(weight > 0.0 && weight <= 1.0) {
        return Err(domain(format!("weight must lie in (0, 1], got {weight}")));
    }
    Ok(uplink_sensitivity(clip_c, shard_size)? * weight)
}

/// Client-side noise for `uplink` exposures: `c L ds / epsilon`.
pub fn uplink_sigma(budget: &PrivacyBudget, ds_uplink: f64, uplink: u32) -> f64 {
    budget.c * uplink as f64 * ds_uplink / budget.epsilon
}

/// Server-side noise with all `n_clients` aggregated each round.
///
/// Zero when `T <= L sqrt(N)`: the averaged client noise already covers the
/// downlink exposures.
pub fn downlink_sigma_all(
    budget: &PrivacyBudget,
    clip_c: f64,
    shard_size: usize,
    n_clients: usize,
    exposures: &ExposureModel,
) -> Result<f64> {
    if n_clients == 0 {
        return Err(domain("n_clients must be positive"));
    }
    uplink_sensitivity(clip_c, shard_size)?;
    let t = exposures.rounds as f64;
    let l = exposures.uplink as f64;
    let n = n_clients as f64;
    if t > l * n.sqrt() {
        Ok(server_sigma(budget, clip_c, shard_size, n_clients, t, exposures.uplink))
    } else {
        Ok(0.0)
    }
}

/// `2 c C sqrt(t_eff^2 - L^2 n) / (m n eps)`; `t_eff` is `T` or `T / b`.
fn server_sigma(
    budget: &PrivacyBudget,
    clip_c: f64,
    shard_size: usize,
    participants: usize,
    t_eff: f64,
    uplink: u32,
) -> f64 {
    let n = participants as f64;
    let l = uplink as f64;
    let radicand = (t_eff * t_eff - l * l * n).max(0.0);
    2.0 * budget.c * clip_c * radicand.sqrt() / (shard_size as f64 * n * budget.epsilon)
}

/// Smallest real `T` for which the scheduling coefficient `b` is defined,
/// `-eps / ln(1 - K/N)`. Infinite denominators (K = N) give 0.
pub fn min_rounds_for_b(epsilon: f64, k: usize, n_clients: usize) -> f64 {
    let q = k as f64 / n_clients as f64;
    if q >= 1.0 {
        0.0
    } else {
        -epsilon / (1.0 - q).ln()
    }
}

fn check_k(k: usize, n_clients: usize) -> Result<()> {
    if k == 0 || k > n_clients {
        return Err(domain(format!("need 1 <= K <= N, got K = {k}, N = {n_clients}")));
    }
    Ok(())
}

/// Coefficients `(b, gamma)` of K-random scheduling.
///
/// `b = -(T/eps) ln(1 - N/K + (N/K) e^{-eps/T})` and
/// `gamma = -ln(1 - K/N + (K/N) e^{-eps/(L sqrt K)})`.
pub fn ksched_coefficients(
    epsilon: f64,
    rounds: u32,
    k: usize,
    n_clients: usize,
    uplink: u32,
) -> Result<(f64, f64)> {
    check_k(k, n_clients)?;
    let gamma = ksched_gamma(epsilon, k, n_clients, uplink);
    let b = ksched_b(epsilon, rounds, k, n_clients)?;
    Ok((b, gamma))
}

fn ksched_gamma(epsilon: f64, k: usize, n_clients: usize, uplink: u32) -> f64 {
    let q = k as f64 / n_clients as f64;
    let x = epsilon / (uplink as f64 * (k as f64).sqrt());
    -(1.0 - q + q * (-x).exp()).ln()
}

fn ksched_b(epsilon: f64, rounds: u32, k: usize, n_clients: usize) -> Result<f64> {
    let t = rounds as f64;
    let inv_q = n_clients as f64 / k as f64;
    let arg = 1.0 - inv_q + inv_q * (-epsilon / t).exp();
    if !(arg > 0.0) {
        return Err(Error::BUndefined {
            min_rounds: min_rounds_for_b(epsilon, k, n_clients),
        });
    }
    Ok(-(t / epsilon) * arg.ln())
}

/// Server-side noise under K-random scheduling.
///
/// Zero when `T <= eps / gamma`; otherwise `2 c C sqrt(T^2/b^2 - L^2 K) / (m K eps)`.
/// With `K = N` every client is aggregated every round and the result is the
/// all-client calibration.
pub fn downlink_sigma_ksched(
    budget: &PrivacyBudget,
    clip_c: f64,
    shard_size: usize,
    k: usize,
    n_clients: usize,
    exposures: &ExposureModel,
) -> Result<f64> {
    check_k(k, n_clients)?;
    if k == n_clients {
        return downlink_sigma_all(budget, clip_c, shard_size, n_clients, exposures);
    }
    uplink_sensitivity(clip_c, shard_size)?;
    let gamma = ksched_gamma(budget.epsilon, k, n_clients, exposures.uplink);
    let t = exposures.rounds as f64;
    if t <= budget.epsilon / gamma {
        return Ok(0.0);
    }
    let b = ksched_b(budget.epsilon, exposures.rounds, k, n_clients)?;
    Ok(server_sigma(budget, clip_c, shard_size, k, t / b, exposures.uplink))
}

/// Fills a [`NoiseCalibration`] for the given schedule.
///
/// Aggregation weights are always equal (`1/N`, or `1/K` under K-random
/// scheduling), so `sigma_aggregate = sqrt(sigma_D^2 + sigma_U^2 / n)` with
/// `n` the number of aggregated clients.
pub fn aggregate_sigma(
    mode: ScheduleMode,
    budget: &PrivacyBudget,
    clip_c: f64,
    shard_size: usize,
    n_clients: usize,
    exposures: &ExposureModel,
) -> Result<NoiseCalibration> {
    let ds_uplink = uplink_sensitivity(clip_c, shard_size)?;
    let sigma_uplink = uplink_sigma(budget, ds_uplink, exposures.uplink);
    let mut warnings = Vec::new();
    let (sigma_downlink, participants, b_coeff, gamma) = match mode {
        ScheduleMode::AllClients => (
            downlink_sigma_all(budget, clip_c, shard_size, n_clients, exposures)?,
            n_clients,
            None,
            None,
        ),
        ScheduleMode::KRandom { k } => {
            check_k(k, n_clients)?;
            let sigma = downlink_sigma_ksched(budget, clip_c, shard_size, k, n_clients, exposures)?;
            let gamma = ksched_gamma(budget.epsilon, k, n_clients, exposures.uplink);
            let b = match ksched_b(budget.epsilon, exposures.rounds, k, n_clients) {
                Ok(b) => Some(b),
                Err(Error::BUndefined { min_rounds }) => {
                    warnings.push(CalibrationWarning::BUndefined { min_rounds });
                    None
                }
                Err(e) => return Err(e),
            };
            if let Some(b) = b {
                let t = exposures.rounds as f64;
                let eps_over_gamma = budget.epsilon / gamma;
                let b_l_sqrt_k = b * exposures.uplink as f64 * (k as f64).sqrt();
                if (t > eps_over_gamma) != (t > b_l_sqrt_k) {
                    warnings.push(CalibrationWarning::ThresholdDisagreement {
                        eps_over_gamma,
                        b_l_sqrt_k,
                    });
                }
            }
            (sigma, k, b, Some(gamma))
        }
    };
    let sigma_aggregate =
        (sigma_downlink * sigma_downlink + sigma_uplink * sigma_uplink / participants as f64).sqrt();
    Ok(NoiseCalibration {
        sigma_uplink,
        sigma_downlink,
        sigma_aggregate,
        mode,
        b_coeff,
        gamma,
        warnings,
    })
}

/// `dim` i.i.d. draws from `N(0, sigma^2)`. `sigma = 0` yields zeros without
/// touching the stream.
pub fn sample_noise<R: Rng + ?Sized>(dim: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    add_noise(&mut out, sigma, rng);
    out
}

/// Adds `N(0, sigma^2)` noise to every entry of `values`.
pub fn add_noise<R: Rng + ?Sized>(values: &mut [f64], sigma: f64, rng: &mut R) {
    debug_assert!(sigma >= 0.0);
    if sigma == 0.0 {
        return;
    }
    for v in values.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += sigma * z;
    }
}

/// Monte-Carlo audit of the scalar Gaussian mechanism.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    /// Estimated `Pr[privacy loss > epsilon]`, worst of the two directions.
    pub estimate: f64,
    pub std_error: f64,
    /// Three binomial standard errors.
    pub half_width: f64,
    /// Estimated hockey-stick divergence `E[(1 - e^{eps - loss})_+]` for the
    /// same direction; never larger than `estimate`.
    pub hockey_stick: f64,
    pub samples: usize,
    pub delta: f64,
}

impl AuditReport {
    pub fn passes(&self) -> bool {
        self.estimate <= self.delta + self.half_width
    }
}

/// Audits `N(x, sigma^2)` on the adjacent inputs `0` and `ds`.
///
/// Draws `samples` outputs from each input and counts how often the privacy
/// loss `ln(p_x(o) / p_x'(o))` exceeds `epsilon`.
pub fn audit_mechanism<R: Rng + ?Sized>(
    sigma: f64,
    ds: f64,
    epsilon: f64,
    delta: f64,
    samples: usize,
    rng: &mut R,
) -> Result<AuditReport> {
    if !(sigma > 0.0) {
        return Err(domain(format!("audit needs a positive sigma, got {sigma}")));
    }
    if !(ds > 0.0) {
        return Err(domain(format!("audit needs a positive sensitivity, got {ds}")));
    }
    if samples < 100_000 {
        return Err(domain(format!("audit needs at least 1e5 samples, got {samples}")));
    }
    let var2 = 2.0 * sigma * sigma;
    // Output drawn on input 0, loss against input ds, and the mirror image.
    let loss_from_zero = |o: f64| (ds * ds - 2.0 * o * ds) / var2;
    let loss_from_ds = |o: f64| (2.0 * o * ds - ds * ds) / var2;

    let mut tally = [(0usize, 0.0f64); 2];
    for _ in 0..samples {
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        let losses = [loss_from_zero(sigma * z0), loss_from_ds(ds + sigma * z1)];
        for (slot, loss) in tally.iter_mut().zip(losses) {
            if loss > epsilon {
                slot.0 += 1;
                slot.1 += 1.0 - (epsilon - loss).exp();
            }
        }
    }
    let n = samples as f64;
    let (hits, hockey) = if tally[0].0 >= tally[1].0 { tally[0] } else { tally[1] };
    let estimate = hits as f64 / n;
    let std_error = (estimate * (1.0 - estimate) / n).sqrt();
    Ok(AuditReport {
        estimate,
        std_error,
        half_width: 3.0 * std_error,
        hockey_stick: hockey / n,
        samples,
        delta,
    })
}
