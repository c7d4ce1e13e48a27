//! The five subcommands. Each writes human-readable output to `out` and
//! files under the configured output directory.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;

use nbafl_core::bounds::{
    estimate_regularity, theorem2_bound, theorem2_bound_general, theorem3_bound, BoundInputs, LossRegularity,
    Profile, RegularityConfig,
};
use nbafl_core::data::{partition_iid, LabeledDataset};
use nbafl_core::learning::{init_params, ShardObjective};
use nbafl_core::orchestrator::{run_nbafl, RunOptions, RunResult};
use nbafl_core::privacy::{
    aggregate_sigma, audit_mechanism, gaussian_constant, min_rounds_for_b, CalibrationWarning, ExposureModel,
    PrivacyBudget, ScheduleMode, SensitivityReport,
};
use nbafl_core::rng::{stream, Purpose};
use nbafl_core::Error as CoreError;

use crate::config::{DatasetKind, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::{real, trace_csv, trace_path, write_atomic};

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> CliResult<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| CliError::io("writing output", e))
}

/// Prints the sensitivities and noise scales the budget requires.
pub fn calibrate(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let mut fl = cfg.fl_config()?;
    fl.noiseless = false;
    let budget = PrivacyBudget::new(fl.epsilon, fl.delta)?;
    let exposures = ExposureModel::new(fl.uplink_exposures, fl.rounds)?;
    let sens = SensitivityReport::new(fl.clip_c, fl.shard_size, fl.n_clients)?;
    let cal = aggregate_sigma(fl.schedule, &budget, fl.clip_c, fl.shard_size, fl.n_clients, &exposures)?;

    say(out, format!("c        {}", real(budget.c)))?;
    say(out, format!("ds_U     {}", real(sens.ds_uplink)))?;
    say(out, format!("ds_D     {}", real(sens.ds_downlink)))?;
    say(out, format!("sigma_U  {}", real(cal.sigma_uplink)))?;
    say(out, format!("sigma_D  {}", real(cal.sigma_downlink)))?;
    say(out, format!("sigma_A  {}", real(cal.sigma_aggregate)))?;
    if let ScheduleMode::KRandom { k } = fl.schedule {
        match cal.b_coeff {
            Some(b) => say(out, format!("b        {}", real(b)))?,
            None => say(out, "b        undefined")?,
        }
        if let Some(gamma) = cal.gamma {
            say(out, format!("gamma    {}", real(gamma)))?;
        }
        say(out, format!("min_T    {}", real(min_rounds_for_b(fl.epsilon, k, fl.n_clients))))?;
    }
    for w in &cal.warnings {
        match w {
            CalibrationWarning::BUndefined { min_rounds } => say(
                out,
                format!("warning: the K-random convergence bound is undefined at T = {}; minimal T = {min_rounds}", fl.rounds),
            )?,
            CalibrationWarning::ThresholdDisagreement { eps_over_gamma, b_l_sqrt_k } => say(
                out,
                format!(
                    "warning: zero-noise thresholds disagree at T = {}: eps/gamma = {eps_over_gamma}, b L sqrt(K) = {b_l_sqrt_k}",
                    fl.rounds
                ),
            )?,
        }
    }
    Ok(())
}

/// Runs one simulation and writes `run_<seed>.csv`.
pub fn run(cfg: &RunConfig, jobs: usize, out: &mut dyn Write) -> CliResult<PathBuf> {
    let fl = cfg.fl_config()?;
    let (train, test) = cfg.load_data()?;
    let result = run_nbafl(&fl, &train, &test, &RunOptions { jobs, keep_history: false })?;
    let path = trace_path(&cfg.out_dir, cfg.seed);
    write_atomic(&path, &trace_csv(&result))?;
    let last = result.traces.last().expect("at least one round");
    say(
        out,
        format!(
            "seed {} rounds {} final train_loss {} test_acc {} -> {}",
            cfg.seed,
            fl.rounds,
            real(last.train_loss),
            real(last.test_acc),
            path.display()
        ),
    )?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundAxis {
    Rounds,
    Clients,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundForm {
    /// Calibrated noise with `Delta s_D = 2C/(mN)`.
    General,
    /// The published closed form.
    Paper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundOptions {
    pub axis: BoundAxis,
    pub grid_max: Option<u32>,
    pub form: BoundForm,
    pub epsilon: Option<f64>,
    /// `(rho, beta, l, B, Theta)`; estimated on the configured task when absent.
    pub constants: Option<[f64; 5]>,
    pub noise_dim: Option<usize>,
}

/// Estimates the regularity constants on the configured task.
pub fn estimate_constants(cfg: &RunConfig) -> CliResult<LossRegularity> {
    let fl = cfg.fl_config()?;
    let (train, _) = cfg.load_data()?;
    let partition = partition_iid(
        &train,
        fl.n_clients,
        fl.shard_size,
        &mut stream(fl.master_seed, Purpose::Partition, 0, 0),
    )?;
    let shards = partition.materialize(&train);
    let locals: Vec<ShardObjective<'_>> = shards.iter().map(|s| ShardObjective::new(fl.loss, s)).collect();
    let arch = fl.loss.architecture(train.dim(), train.classes());
    let w0 = init_params(arch, &mut stream(fl.master_seed, Purpose::Init, 0, 0));
    Ok(estimate_regularity(
        &locals,
        &w0.values,
        &RegularityConfig::default(),
        &mut stream(fl.master_seed, Purpose::Probe, 0, 0),
    )?)
}

/// Writes `bound_T.csv` or `bound_K.csv` with columns `T|K,bound_value,regime_flags`.
pub fn bound(cfg: &RunConfig, opts: &BoundOptions, out: &mut dyn Write) -> CliResult<PathBuf> {
    let fl = cfg.fl_config()?;
    let epsilon = opts.epsilon.unwrap_or(fl.epsilon);
    let reg = match opts.constants {
        Some([rho, beta, l, b, theta]) => LossRegularity::from_constants(rho, beta, l, b, theta)?,
        None => estimate_constants(cfg)?,
    };
    say(
        out,
        format!(
            "constants rho {} beta {} l {} B {} Theta {}",
            real(reg.rho),
            real(reg.beta),
            real(reg.l),
            real(reg.dissimilarity),
            real(reg.theta)
        ),
    )?;
    let inputs = BoundInputs {
        n_clients: fl.n_clients,
        shard_size: fl.shard_size,
        clip_c: fl.clip_c,
        delta: fl.delta,
        mu: fl.prox.mu,
        uplink: fl.uplink_exposures,
        reg,
    };

    let (label, grid): (&str, Vec<u32>) = match opts.axis {
        BoundAxis::Rounds => ("T", (1..=opts.grid_max.unwrap_or(fl.rounds).max(1)).collect()),
        BoundAxis::Clients => ("K", (2..fl.n_clients as u32).collect()),
    };
    let mut values = Vec::with_capacity(grid.len());
    let mut flags = Vec::with_capacity(grid.len());
    for &x in &grid {
        let value = match opts.axis {
            BoundAxis::Rounds => match opts.form {
                BoundForm::General => theorem2_bound_general(x, epsilon, &inputs, opts.noise_dim),
                BoundForm::Paper => theorem2_bound(x, epsilon, &inputs),
            },
            BoundAxis::Clients => theorem3_bound(fl.rounds, epsilon, x as usize, &inputs),
        };
        match value {
            Ok(v) => {
                let zero_downlink = opts.axis == BoundAxis::Rounds
                    && (x as f64) <= fl.uplink_exposures as f64 * (fl.n_clients as f64).sqrt();
                flags.push(if zero_downlink { "zero-downlink" } else { "ok" });
                values.push(Some(v));
            }
            Err(CoreError::BoundUndefined { .. } | CoreError::BUndefined { .. }) => {
                flags.push("undefined");
                values.push(None);
            }
            Err(CoreError::Regime(_)) => {
                flags.push("out-of-regime");
                values.push(None);
            }
            Err(e) => return Err(e.into()),
        }
    }

    let mut csv = format!("{label},bound_value,regime_flags\n");
    for ((x, v), f) in grid.iter().zip(&values).zip(&flags) {
        csv.push_str(&format!("{x},{},{f}\n", v.map(real).unwrap_or_default()));
    }
    let path = cfg.out_dir.join(format!("bound_{label}.csv"));
    write_atomic(&path, &csv)?;

    let profile = Profile { grid, values };
    let Some(best) = profile.argmin() else {
        let why = if flags.contains(&"out-of-regime") {
            "contraction factor outside (0, 1); increase mu"
        } else {
            "bound undefined on the whole grid"
        };
        return Err(CoreError::Regime(why.into()).into());
    };
    say(out, format!("{label}* = {best} convex = {}", profile.is_convex()))?;
    say(out, format!("wrote {}", path.display()))?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVariable {
    Epsilon,
    NClients,
    KClients,
    Rounds,
}

impl SweepVariable {
    pub fn key(self) -> &'static str {
        match self {
            SweepVariable::Epsilon => "epsilon",
            SweepVariable::NClients => "n_clients",
            SweepVariable::KClients => "k_clients",
            SweepVariable::Rounds => "rounds",
        }
    }
}

/// One finished sweep cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub value: String,
    pub seed: u64,
    pub final_train_loss: f64,
    pub final_test_acc: f64,
}

/// Mean and standard error over seeds for one value.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub value: String,
    pub seeds: usize,
    pub mean_loss: f64,
    pub se_loss: f64,
    pub mean_acc: f64,
    pub se_acc: f64,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn summarize(cells: &[SweepCell], values: &[String]) -> Vec<SweepSummary> {
    values
        .iter()
        .filter_map(|v| {
            let mine: Vec<&SweepCell> = cells.iter().filter(|c| &c.value == v).collect();
            if mine.is_empty() {
                return None;
            }
            let (mean_loss, se_loss) = mean_se(&mine.iter().map(|c| c.final_train_loss).collect::<Vec<_>>());
            let (mean_acc, se_acc) = mean_se(&mine.iter().map(|c| c.final_test_acc).collect::<Vec<_>>());
            Some(SweepSummary {
                value: v.clone(),
                seeds: mine.len(),
                mean_loss,
                se_loss,
                mean_acc,
                se_acc,
            })
        })
        .collect()
}

/// Runs `values x seeds` simulations (seeds `seed, seed+1, ...`) and writes
/// `sweep_<variable>.csv` plus `sweep_<variable>_summary.csv`. Failed cells
/// are reported and skipped; the sweep then ends with an error.
pub fn sweep(
    cfg: &RunConfig,
    variable: SweepVariable,
    values: &[String],
    seeds: usize,
    jobs: usize,
    out: &mut dyn Write,
) -> CliResult<Vec<SweepSummary>> {
    if values.is_empty() || seeds == 0 {
        return Err(CliError::Config("sweep needs at least one value and one seed".into()));
    }
    let mut shared: Option<(LabeledDataset, LabeledDataset)> = None;
    let mut per_seed: HashMap<u64, (LabeledDataset, LabeledDataset)> = HashMap::new();
    let mut cells = Vec::new();
    let mut failed = 0;
    for value in values {
        for s in 0..seeds {
            let seed = cfg.seed.wrapping_add(s as u64);
            let outcome = (|| -> CliResult<RunResult> {
                let mut cell = cfg.clone();
                cell.set("seed", &seed.to_string())?;
                cell.set(variable.key(), value)?;
                if variable == SweepVariable::KClients {
                    cell.set("schedule", "krandom")?;
                }
                let fl = cell.fl_config()?;
                let data = match cell.dataset {
                    DatasetKind::Mnist => {
                        if shared.is_none() {
                            shared = Some(cell.load_data()?);
                        }
                        shared.as_ref().expect("loaded above")
                    }
                    DatasetKind::Synthetic => {
                        if !per_seed.contains_key(&seed) {
                            per_seed.insert(seed, cell.load_data()?);
                        }
                        &per_seed[&seed]
                    }
                };
                Ok(run_nbafl(&fl, &data.0, &data.1, &RunOptions { jobs, keep_history: false })?)
            })();
            match outcome {
                Ok(result) => {
                    let last = result.traces.last().expect("at least one round");
                    cells.push(SweepCell {
                        value: value.clone(),
                        seed,
                        final_train_loss: last.train_loss,
                        final_test_acc: last.test_acc,
                    });
                }
                Err(e) => {
                    failed += 1;
                    say(out, format!("cell {}={value} seed {seed} failed: {e}", variable.key()))?;
                }
            }
        }
    }

    let key = variable.key();
    let mut long = String::from("variable,value,seed,final_train_loss,final_test_acc\n");
    for c in &cells {
        long.push_str(&format!(
            "{key},{},{},{},{}\n",
            c.value,
            c.seed,
            real(c.final_train_loss),
            real(c.final_test_acc)
        ));
    }
    write_atomic(&cfg.out_dir.join(format!("sweep_{key}.csv")), &long)?;

    let summary = summarize(&cells, values);
    let mut text = String::from("variable,value,seeds,mean_final_train_loss,se_final_train_loss,mean_final_test_acc,se_final_test_acc\n");
    for s in &summary {
        text.push_str(&format!(
            "{key},{},{},{},{},{},{}\n",
            s.value,
            s.seeds,
            real(s.mean_loss),
            real(s.se_loss),
            real(s.mean_acc),
            real(s.se_acc)
        ));
        say(
            out,
            format!(
                "{key}={} loss {:.6} (se {:.2e}) acc {:.4} (se {:.2e})",
                s.value, s.mean_loss, s.se_loss, s.mean_acc, s.se_acc
            ),
        )?;
    }
    write_atomic(&cfg.out_dir.join(format!("sweep_{key}_summary.csv")), &text)?;
    if let Some(best) = summary
        .iter()
        .min_by(|a, b| a.mean_loss.partial_cmp(&b.mean_loss).expect("finite losses"))
    {
        say(out, format!("argmin {key} = {}", best.value))?;
    }
    if failed > 0 {
        return Err(CliError::SweepFailed {
            failed,
            total: values.len() * seeds,
        });
    }
    Ok(summary)
}

/// Audits the scalar Gaussian mechanism at the calibrated scale `c ds / eps`
/// (times `sigma_scale`).
pub fn audit(
    epsilon: f64,
    delta: f64,
    samples: usize,
    seed: u64,
    sigma_scale: f64,
    out: &mut dyn Write,
) -> CliResult<()> {
    let c = gaussian_constant(delta)?;
    let ds = 1.0;
    let sigma = sigma_scale * c * ds / epsilon;
    let report = audit_mechanism(sigma, ds, epsilon, delta, samples, &mut stream(seed, Purpose::Audit, 0, 0))?;
    let verdict = if report.passes() { "PASS" } else { "FAIL" };
    say(
        out,
        format!(
            "epsilon {epsilon} delta {delta} sigma {} samples {}\nestimate {} +/- {} (hockey-stick {})\n{verdict}",
            real(sigma),
            report.samples,
            real(report.estimate),
            real(report.half_width),
            real(report.hockey_stick)
        ),
    )?;
    if report.passes() {
        Ok(())
    } else {
        Err(CliError::AuditFailed {
            estimate: report.estimate,
            delta,
            half_width: report.half_width,
        })
    }
}
