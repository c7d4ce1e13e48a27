//! The noising-before-aggregation training loop.
//!
//! Each round the scheduled clients train against the last broadcast model,
//! clip, add `sigma_uplink` noise and upload. The server averages the uploads
//! with equal weights, adds `sigma_downlink` noise and broadcasts the result.

#[cfg(not(target_arch = "wasm32"))]
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::Rng;

use crate::data::{partition_iid, LabeledDataset};
use crate::error::{domain, Error, Result};
use crate::learning::{self, init_params, LossSpec, ModelParams, Objective, ProximalConfig, ShardObjective};
use crate::privacy::{aggregate_sigma, add_noise, ExposureModel, NoiseCalibration, PrivacyBudget, ScheduleMode};
use crate::rng::{stream, Purpose};

/// Everything that determines a run, including the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct FlConfig {
    pub n_clients: usize,
    pub schedule: ScheduleMode,
    pub rounds: u32,
    pub epsilon: f64,
    pub delta: f64,
    pub clip_c: f64,
    pub shard_size: usize,
    /// Declared uplink exposures `L` used for calibration.
    pub uplink_exposures: u32,
    pub loss: LossSpec,
    /// Local solver settings; `prox.mu` is the proximal coefficient.
    pub prox: ProximalConfig,
    pub master_seed: u64,
    /// Forces both noise scales to zero.
    pub noiseless: bool,
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(domain("n_clients must be positive"));
        }
        if let ScheduleMode::KRandom { k } = self.schedule {
            if !(1 < k && k < self.n_clients) {
                return Err(domain(format!(
                    "K-random scheduling needs 1 < K < N, got K = {k}, N = {}",
                    self.n_clients
                )));
            }
        }
        if self.shard_size == 0 {
            return Err(domain("shard_size must be positive"));
        }
        if !(self.clip_c > 0.0) {
            return Err(domain(format!("clip_c must be positive, got {}", self.clip_c)));
        }
        PrivacyBudget::new(self.epsilon, self.delta)?;
        ExposureModel::new(self.uplink_exposures, self.rounds)?;
        self.prox.validate()
    }

    /// Number of clients aggregated per round.
    pub fn participants(&self) -> usize {
        match self.schedule {
            ScheduleMode::AllClients => self.n_clients,
            ScheduleMode::KRandom { k } => k,
        }
    }

    /// Noise scales for this configuration. All zero when `noiseless`.
    pub fn calibration(&self) -> Result<NoiseCalibration> {
        self.validate()?;
        if self.noiseless {
            return Ok(NoiseCalibration {
                sigma_uplink: 0.0,
                sigma_downlink: 0.0,
                sigma_aggregate: 0.0,
                mode: self.schedule,
                b_coeff: None,
                gamma: None,
                warnings: Vec::new(),
            });
        }
        let budget = PrivacyBudget::new(self.epsilon, self.delta)?;
        let exposures = ExposureModel::new(self.uplink_exposures, self.rounds)?;
        aggregate_sigma(self.schedule, &budget, self.clip_c, self.shard_size, self.n_clients, &exposures)
    }
}

/// Execution knobs that never change results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads for the per-client work inside a round.
    pub jobs: usize,
    /// Keep the broadcast parameters of every round in [`RunResult::history`].
    pub keep_history: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            keep_history: false,
        }
    }
}

/// One aggregation round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    /// 1-based round index.
    pub round: u32,
    pub scheduled: Vec<usize>,
    /// Loss of the broadcast model on the union of all shards.
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub sigma_uplink: f64,
    pub sigma_downlink: f64,
    pub sigma_aggregate: f64,
    /// Uploads per client so far.
    pub exposures: Vec<u32>,
    /// Largest relative subproblem gradient norm among this round's clients.
    pub max_inexactness: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub traces: Vec<RoundTrace>,
    pub final_params: ModelParams,
    pub initial_params: ModelParams,
    /// Broadcast parameters after each round, when requested.
    pub history: Vec<ModelParams>,
    pub config: FlConfig,
    pub calibration: NoiseCalibration,
    #[cfg(not(target_arch = "wasm32"))]
    pub duration: Duration,
}

/// `k` distinct client ids out of `n`, uniformly, in increasing order.
pub fn select_clients<R: Rng + ?Sized>(k: usize, n: usize, rng: &mut R) -> Vec<usize> {
    assert!(1 <= k && k <= n, "need 1 <= k <= n");
    if k == n {
        return (0..n).collect();
    }
    let mut ids = index::sample(rng, n, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Weighted sum of parameter vectors, accumulated in slice order.
pub fn aggregate<V: AsRef<[f64]>>(locals: &[V], weights: &[f64]) -> Result<Vec<f64>> {
    if locals.is_empty() {
        return Err(domain("nothing to aggregate"));
    }
    if locals.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            expected: locals.len(),
            actual: weights.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::WeightSum(total));
    }
    let dim = locals[0].as_ref().len();
    let mut out = vec![0.0; dim];
    for (local, &p) in locals.iter().zip(weights) {
        let local = local.as_ref();
        if local.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: dim,
                actual: local.len(),
            });
        }
        out.iter_mut().zip(local).for_each(|(o, &v)| *o += p * v);
    }
    Ok(out)
}

/// True iff the declared `uplink` bound covers every client's realized uploads
/// and no client uploaded more often than it was scheduled.
pub fn exposure_check(result: &RunResult, uplink: u32) -> bool {
    let Some(last) = result.traces.last() else {
        return true;
    };
    let mut scheduled = vec![0u32; last.exposures.len()];
    for trace in &result.traces {
        for &id in &trace.scheduled {
            scheduled[id] += 1;
        }
    }
    last.exposures
        .iter()
        .zip(&scheduled)
        .all(|(&uploads, &times)| uploads <= times && uploads <= uplink)
}

/// Partitions `train` into iid shards and runs the loop.
pub fn run_nbafl(
    config: &FlConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    options: &RunOptions,
) -> Result<RunResult> {
    config.validate()?;
    let mut rng = stream(config.master_seed, Purpose::Partition, 0, 0);
    let partition = partition_iid(train, config.n_clients, config.shard_size, &mut rng)?;
    let shards = partition.materialize(train);
    run_nbafl_on_shards(config, &shards, test, options)
}

/// Runs the loop on explicit client shards (one per client, `shard_size` each).
pub fn run_nbafl_on_shards(
    config: &FlConfig,
    shards: &[LabeledDataset],
    test: &LabeledDataset,
    options: &RunOptions,
) -> Result<RunResult> {
    #[cfg(not(target_arch = "wasm32"))]
    let started = Instant::now();
    let calibration = config.calibration()?;
    if shards.len() != config.n_clients {
        return Err(Error::ShapeMismatch {
            expected: config.n_clients,
            actual: shards.len(),
        });
    }
    if let Some(bad) = shards.iter().find(|s| s.len() != config.shard_size) {
        return Err(domain(format!(
            "every shard must hold {} samples, found one with {}",
            config.shard_size,
            bad.len()
        )));
    }
    let (dim, classes) = (shards[0].dim(), shards[0].classes());
    if shards.iter().any(|s| s.dim() != dim || s.classes() != classes) || test.dim() != dim || test.classes() != classes {
        return Err(domain("shards and test set disagree on feature or class count"));
    }

    let arch = config.loss.architecture(dim, classes);
    let initial = init_params(arch, &mut stream(config.master_seed, Purpose::Init, 0, 0));
    let pool = WorkerPool::new(options.jobs)?;
    let participants = config.participants();
    let weight = 1.0 / participants as f64;

    let mut broadcast = initial.clone();
    let mut exposures = vec![0u32; config.n_clients];
    let mut traces = Vec::with_capacity(config.rounds as usize);
    let mut history = Vec::new();

    for t in 1..=config.rounds {
        let round = t as u64;
        let scheduled = select_clients(
            participants,
            config.n_clients,
            &mut stream(config.master_seed, Purpose::Schedule, round, 0),
        );

        let uploads = pool.map(&scheduled, |&client| {
            let (mut local, report) = learning::local_train(&broadcast, &shards[client], &config.loss, &config.prox)
                .map_err(|e| match e {
                    Error::Divergence { step } => Error::RoundDivergence {
                        round: t as usize,
                        client,
                        step,
                    },
                    other => other,
                })?;
            learning::clip_in_place(&mut local.values, config.clip_c);
            let mut rng = stream(config.master_seed, Purpose::ClientNoise, round, client as u64);
            add_noise(&mut local.values, calibration.sigma_uplink, &mut rng);
            Ok::<_, Error>((local.values, report.inexactness))
        });
        let mut locals = Vec::with_capacity(uploads.len());
        let mut max_inexactness: f64 = 0.0;
        for upload in uploads {
            let (values, inexactness) = upload?;
            locals.push(values);
            max_inexactness = max_inexactness.max(inexactness);
        }
        for &client in &scheduled {
            exposures[client] += 1;
        }

        let mut values = aggregate(&locals, &vec![weight; locals.len()])?;
        let mut rng = stream(config.master_seed, Purpose::ServerNoise, round, 0);
        add_noise(&mut values, calibration.sigma_downlink, &mut rng);
        broadcast = ModelParams { values, arch };

        let shard_losses = pool.map(shards, |shard| ShardObjective::new(config.loss, shard).value(&broadcast.values));
        let train_loss = shard_losses.iter().sum::<f64>() / shards.len() as f64;
        traces.push(RoundTrace {
            round: t,
            scheduled,
            train_loss,
            test_loss: learning::loss(&broadcast, &config.loss, test)?,
            test_acc: learning::accuracy(&broadcast, &config.loss, test)?,
            sigma_uplink: calibration.sigma_uplink,
            sigma_downlink: calibration.sigma_downlink,
            sigma_aggregate: calibration.sigma_aggregate,
            exposures: exposures.clone(),
            max_inexactness,
        });
        if options.keep_history {
            history.push(broadcast.clone());
        }
    }

    Ok(RunResult {
        traces,
        final_params: broadcast,
        initial_params: initial,
        history,
        config: config.clone(),
        calibration,
        #[cfg(not(target_arch = "wasm32"))]
        duration: started.elapsed(),
    })
}

/// Order-preserving parallel map over a dedicated thread pool.
struct WorkerPool {
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl WorkerPool {
    fn new(jobs: usize) -> Result<Self> {
        if jobs == 0 {
            return Err(domain("jobs must be at least 1"));
        }
        #[cfg(feature = "parallel")]
        {
            let pool = if jobs > 1 {
                Some(
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(jobs)
                        .build()
                        .map_err(|e| domain(format!("cannot start worker threads: {e}")))?,
                )
            } else {
                None
            };
            Ok(Self { pool })
        }
        #[cfg(not(feature = "parallel"))]
        Ok(Self {})
    }

    fn map<T: Sync, U: Send>(&self, items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_classification;
    use crate::learning::ModelKind;

    fn small_config(schedule: ScheduleMode) -> FlConfig {
        FlConfig {
            n_clients: 4,
            schedule,
            rounds: 6,
            epsilon: 60.0,
            delta: 0.01,
            clip_c: 5.0,
            shard_size: 30,
            uplink_exposures: 1,
            loss: LossSpec::new(ModelKind::MultinomialLogistic, 1e-3).unwrap(),
            prox: ProximalConfig::new(0.1, 10, 0.2).unwrap(),
            master_seed: 17,
            noiseless: false,
        }
    }

    fn data() -> (LabeledDataset, LabeledDataset) {
        let mut rng = stream(3, Purpose::SynthData, 0, 0);
        let train = synth_classification(150, 5, 3, 3.0, &mut rng).unwrap();
        let test = synth_classification(60, 5, 3, 3.0, &mut rng).unwrap();
        (train, test)
    }

    #[test]
    fn select_all_and_determinism() {
        assert_eq!(select_clients(5, 5, &mut stream(1, Purpose::Schedule, 1, 0)), vec![0, 1, 2, 3, 4]);
        let a = select_clients(3, 10, &mut stream(1, Purpose::Schedule, 4, 0));
        let b = select_clients(3, 10, &mut stream(1, Purpose::Schedule, 4, 0));
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn aggregate_contract() {
        assert_eq!(aggregate(&[vec![0.0], vec![2.0]], &[0.5, 0.5]).unwrap(), vec![1.0]);
        let same = vec![1.5, -2.0, 3.25];
        assert_eq!(aggregate(&[same.clone(), same.clone(), same.clone()], &[0.25, 0.25, 0.5]).unwrap(), same);
        assert!(matches!(aggregate(&[vec![1.0], vec![1.0]], &[0.5, 0.6]), Err(Error::WeightSum(_))));
    }

    #[test]
    fn krandom_requires_interior_k() {
        let cfg = small_config(ScheduleMode::KRandom { k: 4 });
        assert!(cfg.validate().is_err());
        let cfg = small_config(ScheduleMode::KRandom { k: 1 });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn traces_echo_calibration_and_count_exposures() {
        let (train, test) = data();
        let cfg = small_config(ScheduleMode::KRandom { k: 2 });
        let result = run_nbafl(&cfg, &train, &test, &RunOptions::default()).unwrap();
        assert_eq!(result.traces.len(), 6);
        let cal = cfg.calibration().unwrap();
        for trace in &result.traces {
            assert_eq!(trace.scheduled.len(), 2);
            assert_eq!(trace.sigma_uplink, cal.sigma_uplink);
            assert_eq!(trace.sigma_downlink, cal.sigma_downlink);
        }
        let total: u32 = result.traces.last().unwrap().exposures.iter().sum();
        assert_eq!(total, 12);
        assert!(exposure_check(&result, 6));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let (train, test) = data();
        let cfg = small_config(ScheduleMode::AllClients);
        let a = run_nbafl(&cfg, &train, &test, &RunOptions { jobs: 1, keep_history: true }).unwrap();
        let b = run_nbafl(&cfg, &train, &test, &RunOptions { jobs: 3, keep_history: true }).unwrap();
        assert_eq!(a.traces, b.traces);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn divergence_reports_round() {
        let (train, test) = data();
        let mut cfg = small_config(ScheduleMode::AllClients);
        cfg.prox = ProximalConfig::new(0.1, 20, 1e4).unwrap();
        match run_nbafl(&cfg, &train, &test, &RunOptions::default()) {
            Err(Error::RoundDivergence { round: 1, client: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
