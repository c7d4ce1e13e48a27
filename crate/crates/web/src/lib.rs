//! Browser bindings for the demo page in `www/`.
//!
//! Each export returns a JSON string. The plain functions behind them are
//! ordinary Rust so they can be tested natively.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use nbafl_core::bounds::{theorem2_bound, theorem2_bound_general, BoundInputs, LossRegularity, Profile};
use nbafl_core::data::{LabeledDataset, SyntheticTask};
use nbafl_core::learning::{LossSpec, ModelKind, ProximalConfig};
use nbafl_core::orchestrator::{run_nbafl_on_shards, FlConfig, RunOptions};
use nbafl_core::privacy::{aggregate_sigma, ExposureModel, PrivacyBudget, ScheduleMode};
use nbafl_core::rng::{stream, Purpose};

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Noise scales for `T = 1..=t_max` under all-client or K-random scheduling
/// (`k = 0` or `k = n_clients` means all clients).
pub fn noise_profile_json(
    epsilon: f64,
    delta: f64,
    clip_c: f64,
    shard_size: usize,
    n_clients: usize,
    k: usize,
    t_max: u32,
) -> nbafl_core::Result<Value> {
    let budget = PrivacyBudget::new(epsilon, delta)?;
    let mode = if k == 0 || k == n_clients {
        ScheduleMode::AllClients
    } else {
        ScheduleMode::KRandom { k }
    };
    let mut rounds = Vec::new();
    let (mut up, mut down, mut agg) = (Vec::new(), Vec::new(), Vec::new());
    for t in 1..=t_max {
        let cal = aggregate_sigma(mode, &budget, clip_c, shard_size, n_clients, &ExposureModel::new(1, t)?)?;
        rounds.push(t);
        up.push(cal.sigma_uplink);
        down.push(cal.sigma_downlink);
        agg.push(cal.sigma_aggregate);
    }
    Ok(json!({
        "c": budget.c,
        "rounds": rounds,
        "sigma_uplink": up,
        "sigma_downlink": down,
        "sigma_aggregate": agg,
    }))
}

/// Convergence bound over `T = 1..=t_max` for hand-entered constants.
#[allow(clippy::too_many_arguments)]
pub fn bound_profile_json(
    rho: f64,
    beta: f64,
    pl: f64,
    dissimilarity: f64,
    theta: f64,
    mu: f64,
    epsilon: f64,
    delta: f64,
    clip_c: f64,
    shard_size: usize,
    n_clients: usize,
    t_max: u32,
    published: bool,
) -> nbafl_core::Result<Value> {
    let inputs = BoundInputs {
        n_clients,
        shard_size,
        clip_c,
        delta,
        mu,
        uplink: 1,
        reg: LossRegularity::from_constants(rho, beta, pl, dissimilarity, theta)?,
    };
    let grid: Vec<u32> = (1..=t_max).collect();
    let profile = Profile::evaluate(&grid, |t| {
        if published {
            theorem2_bound(t, epsilon, &inputs)
        } else {
            theorem2_bound_general(t, epsilon, &inputs, None)
        }
    })?;
    Ok(json!({
        "rounds": profile.grid,
        "bound": profile.values,
        "best": profile.argmin(),
        "convex": profile.is_convex(),
    }))
}

/// Runs noising before aggregation on a small synthetic logistic task and
/// returns the per-round traces.
pub fn simulate_json(
    n_clients: usize,
    rounds: u32,
    epsilon: f64,
    clip_c: f64,
    mu: f64,
    seed: u64,
    noiseless: bool,
) -> nbafl_core::Result<Value> {
    const SHARD: usize = 50;
    let task = SyntheticTask::new(8, 4, 2.5, &mut stream(seed, Purpose::SynthData, 0, 0))?;
    let train = task.sample(n_clients * SHARD, &mut stream(seed, Purpose::SynthData, 1, 0));
    let test = task.sample(400, &mut stream(seed, Purpose::SynthTest, 0, 0));
    let shards: Vec<LabeledDataset> = (0..n_clients)
        .map(|i| train.subset(&(i * SHARD..(i + 1) * SHARD).collect::<Vec<_>>()))
        .collect();
    let config = FlConfig {
        n_clients,
        schedule: ScheduleMode::AllClients,
        rounds,
        epsilon,
        delta: 0.01,
        clip_c,
        shard_size: SHARD,
        uplink_exposures: 1,
        loss: LossSpec::new(ModelKind::MultinomialLogistic, 0.01)?,
        prox: ProximalConfig::new(mu, 20, 0.5 / (1.0 + mu))?,
        master_seed: seed,
        noiseless,
    };
    let result = run_nbafl_on_shards(&config, &shards, &test, &RunOptions::default())?;
    let traces: Vec<Value> = result
        .traces
        .iter()
        .map(|t| {
            json!({
                "round": t.round,
                "train_loss": t.train_loss,
                "test_loss": t.test_loss,
                "test_acc": t.test_acc,
            })
        })
        .collect();
    Ok(json!({
        "sigma_uplink": result.calibration.sigma_uplink,
        "sigma_downlink": result.calibration.sigma_downlink,
        "sigma_aggregate": result.calibration.sigma_aggregate,
        "traces": traces,
    }))
}

#[wasm_bindgen]
pub fn noise_profile(
    epsilon: f64,
    delta: f64,
    clip_c: f64,
    shard_size: usize,
    n_clients: usize,
    k: usize,
    t_max: u32,
) -> Result<String, JsValue> {
    noise_profile_json(epsilon, delta, clip_c, shard_size, n_clients, k, t_max)
        .map(|v| v.to_string())
        .map_err(js_err)
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn bound_profile(
    rho: f64,
    beta: f64,
    pl: f64,
    dissimilarity: f64,
    theta: f64,
    mu: f64,
    epsilon: f64,
    delta: f64,
    clip_c: f64,
    shard_size: usize,
    n_clients: usize,
    t_max: u32,
    published: bool,
) -> Result<String, JsValue> {
    bound_profile_json(
        rho,
        beta,
        pl,
        dissimilarity,
        theta,
        mu,
        epsilon,
        delta,
        clip_c,
        shard_size,
        n_clients,
        t_max,
        published,
    )
    .map(|v| v.to_string())
    .map_err(js_err)
}

#[wasm_bindgen]
pub fn simulate(
    n_clients: usize,
    rounds: u32,
    epsilon: f64,
    clip_c: f64,
    mu: f64,
    seed: u32,
    noiseless: bool,
) -> Result<String, JsValue> {
    simulate_json(n_clients, rounds, epsilon, clip_c, mu, seed as u64, noiseless)
        .map(|v| v.to_string())
        .map_err(js_err)
}
