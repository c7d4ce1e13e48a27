//! Flat `key = value` run configuration.
//!
//! One pair per line, `#` starts a comment. Unknown and duplicate keys are
//! rejected. `inner_steps` defaults to 30: the per-round local epoch count is
//! not pinned down by the method description and is a calibration choice.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nbafl_core::data::{load_idx, LabeledDataset, SyntheticTask};
use nbafl_core::learning::{LossSpec, ModelKind, ProximalConfig};
use nbafl_core::orchestrator::FlConfig;
use nbafl_core::privacy::ScheduleMode;
use nbafl_core::rng::{stream, Purpose};

use crate::error::{CliError, CliResult};

/// Environment variable naming the default directory of the MNIST files.
pub const DATA_DIR_ENV: &str = "NBAFL_DATA_DIR";

const KEYS: &[&str] = &[
    "n_clients",
    "schedule",
    "k_clients",
    "rounds",
    "epsilon",
    "delta",
    "clip_c",
    "mu",
    "shard_size",
    "uplink_exposures",
    "dataset",
    "mnist_images",
    "mnist_labels",
    "mnist_test_images",
    "mnist_test_labels",
    "test_limit",
    "synth_n",
    "synth_d",
    "synth_classes",
    "synth_margin",
    "model",
    "l2_reg",
    "inner_steps",
    "learning_rate",
    "seed",
    "noiseless",
    "out_dir",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    All,
    KRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    Logistic,
    Mlp256,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n_clients: usize,
    pub schedule: Schedule,
    pub k_clients: Option<usize>,
    pub rounds: u32,
    pub epsilon: f64,
    pub delta: f64,
    pub clip_c: f64,
    pub mu: f64,
    pub shard_size: usize,
    pub uplink_exposures: u32,
    pub dataset: DatasetKind,
    pub mnist_images: Option<PathBuf>,
    pub mnist_labels: Option<PathBuf>,
    pub mnist_test_images: Option<PathBuf>,
    pub mnist_test_labels: Option<PathBuf>,
    /// Evaluate on only the first `test_limit` test samples.
    pub test_limit: Option<usize>,
    pub synth_n: Option<usize>,
    pub synth_d: Option<usize>,
    pub synth_classes: Option<usize>,
    pub synth_margin: Option<f64>,
    pub model: ModelChoice,
    pub l2_reg: f64,
    pub inner_steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub noiseless: bool,
    pub out_dir: PathBuf,
}

fn bad(key: &str, value: &str) -> CliError {
    CliError::Config(format!("invalid value {value:?} for {key}"))
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> CliResult<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut pairs = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(CliError::Config(format!("line {}: unknown key {key:?}", n + 1)));
            }
            if pairs.insert(key.to_string(), value.to_string()).is_some() {
                return Err(CliError::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
        }
        Self::from_pairs(&pairs)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    fn from_pairs(pairs: &BTreeMap<String, String>) -> CliResult<Self> {
        let get = |k: &str| pairs.get(k).map(String::as_str);
        let need = |k: &str| get(k).ok_or_else(|| CliError::Config(format!("missing required key {k:?}")));

        let schedule = match get("schedule").unwrap_or("all") {
            "all" => Schedule::All,
            "krandom" => Schedule::KRandom,
            other => return Err(bad("schedule", other)),
        };
        let dataset = match need("dataset")? {
            "mnist" => DatasetKind::Mnist,
            "synthetic" => DatasetKind::Synthetic,
            other => return Err(bad("dataset", other)),
        };
        let model = match need("model")? {
            "logistic" => ModelChoice::Logistic,
            "mlp256" => ModelChoice::Mlp256,
            other => return Err(bad("model", other)),
        };
        let opt_num = |k: &str| -> CliResult<Option<usize>> { get(k).map(|v| parse_num(k, v)).transpose() };

        let cfg = Self {
            n_clients: parse_num("n_clients", need("n_clients")?)?,
            schedule,
            k_clients: opt_num("k_clients")?,
            rounds: parse_num("rounds", need("rounds")?)?,
            epsilon: parse_num("epsilon", need("epsilon")?)?,
            delta: parse_num("delta", need("delta")?)?,
            clip_c: parse_num("clip_c", need("clip_c")?)?,
            mu: parse_num("mu", need("mu")?)?,
            shard_size: parse_num("shard_size", need("shard_size")?)?,
            uplink_exposures: get("uplink_exposures").map(|v| parse_num("uplink_exposures", v)).transpose()?.unwrap_or(1),
            dataset,
            mnist_images: get("mnist_images").map(PathBuf::from),
            mnist_labels: get("mnist_labels").map(PathBuf::from),
            mnist_test_images: get("mnist_test_images").map(PathBuf::from),
            mnist_test_labels: get("mnist_test_labels").map(PathBuf::from),
            test_limit: opt_num("test_limit")?,
            synth_n: opt_num("synth_n")?,
            synth_d: opt_num("synth_d")?,
            synth_classes: opt_num("synth_classes")?,
            synth_margin: get("synth_margin").map(|v| parse_num("synth_margin", v)).transpose()?,
            model,
            l2_reg: get("l2_reg").map(|v| parse_num("l2_reg", v)).transpose()?.unwrap_or(0.0),
            inner_steps: get("inner_steps").map(|v| parse_num("inner_steps", v)).transpose()?.unwrap_or(ProximalConfig::DEFAULT_INNER_STEPS),
            learning_rate: get("learning_rate").map(|v| parse_num("learning_rate", v)).transpose()?.unwrap_or(ProximalConfig::DEFAULT_LEARNING_RATE),
            seed: get("seed").map(|v| parse_num("seed", v)).transpose()?.unwrap_or(0),
            noiseless: get("noiseless").map(|v| parse_bool("noiseless", v)).transpose()?.unwrap_or(false),
            out_dir: PathBuf::from(get("out_dir").unwrap_or(".")),
        };
        cfg.check_modes()?;
        Ok(cfg)
    }

    fn check_modes(&self) -> CliResult<()> {
        if self.schedule == Schedule::KRandom && self.k_clients.is_none() {
            return Err(CliError::Config("schedule = krandom requires k_clients".into()));
        }
        if self.dataset == DatasetKind::Synthetic {
            for (key, present) in [
                ("synth_n", self.synth_n.is_some()),
                ("synth_d", self.synth_d.is_some()),
                ("synth_classes", self.synth_classes.is_some()),
                ("synth_margin", self.synth_margin.is_some()),
            ] {
                if !present {
                    return Err(CliError::Config(format!("dataset = synthetic requires {key}")));
                }
            }
        }
        Ok(())
    }

    /// Overrides one key, as if it had been written in the file.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let mut text = self.to_text();
        text.push_str(&format!("{key} = {value}\n"));
        let mut pairs = BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                pairs.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        if !KEYS.contains(&key) {
            return Err(CliError::Config(format!("unknown key {key:?}")));
        }
        *self = Self::from_pairs(&pairs)?;
        Ok(())
    }

    /// Serializes every set key, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("n_clients", self.n_clients.to_string());
        put(
            "schedule",
            match self.schedule {
                Schedule::All => "all",
                Schedule::KRandom => "krandom",
            }
            .into(),
        );
        if let Some(k) = self.k_clients {
            put("k_clients", k.to_string());
        }
        put("rounds", self.rounds.to_string());
        put("epsilon", self.epsilon.to_string());
        put("delta", self.delta.to_string());
        put("clip_c", self.clip_c.to_string());
        put("mu", self.mu.to_string());
        put("shard_size", self.shard_size.to_string());
        put("uplink_exposures", self.uplink_exposures.to_string());
        put(
            "dataset",
            match self.dataset {
                DatasetKind::Mnist => "mnist",
                DatasetKind::Synthetic => "synthetic",
            }
            .into(),
        );
        for (k, v) in [
            ("mnist_images", &self.mnist_images),
            ("mnist_labels", &self.mnist_labels),
            ("mnist_test_images", &self.mnist_test_images),
            ("mnist_test_labels", &self.mnist_test_labels),
        ] {
            if let Some(p) = v {
                put(k, p.display().to_string());
            }
        }
        if let Some(v) = self.test_limit {
            put("test_limit", v.to_string());
        }
        if let Some(v) = self.synth_n {
            put("synth_n", v.to_string());
        }
        if let Some(v) = self.synth_d {
            put("synth_d", v.to_string());
        }
        if let Some(v) = self.synth_classes {
            put("synth_classes", v.to_string());
        }
        if let Some(v) = self.synth_margin {
            put("synth_margin", v.to_string());
        }
        put(
            "model",
            match self.model {
                ModelChoice::Logistic => "logistic",
                ModelChoice::Mlp256 => "mlp256",
            }
            .into(),
        );
        put("l2_reg", self.l2_reg.to_string());
        put("inner_steps", self.inner_steps.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("seed", self.seed.to_string());
        put("noiseless", self.noiseless.to_string());
        put("out_dir", self.out_dir.display().to_string());
        out
    }

    pub fn schedule_mode(&self) -> ScheduleMode {
        match (self.schedule, self.k_clients) {
            (Schedule::KRandom, Some(k)) if k != self.n_clients => ScheduleMode::KRandom { k },
            _ => ScheduleMode::AllClients,
        }
    }

    pub fn loss_spec(&self) -> CliResult<LossSpec> {
        let kind = match self.model {
            ModelChoice::Logistic => ModelKind::MultinomialLogistic,
            ModelChoice::Mlp256 => ModelKind::MLP256,
        };
        Ok(LossSpec::new(kind, self.l2_reg)?)
    }

    /// The simulator configuration. `krandom` with `K = N` runs all clients.
    pub fn fl_config(&self) -> CliResult<FlConfig> {
        let cfg = FlConfig {
            n_clients: self.n_clients,
            schedule: self.schedule_mode(),
            rounds: self.rounds,
            epsilon: self.epsilon,
            delta: self.delta,
            clip_c: self.clip_c,
            shard_size: self.shard_size,
            uplink_exposures: self.uplink_exposures,
            loss: self.loss_spec()?,
            prox: ProximalConfig::new(self.mu, self.inner_steps, self.learning_rate)?,
            master_seed: self.seed,
            noiseless: self.noiseless,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training and test sets for this configuration.
    pub fn load_data(&self) -> CliResult<(LabeledDataset, LabeledDataset)> {
        let (train, test) = match self.dataset {
            DatasetKind::Mnist => {
                let root = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data/mnist"));
                let pick = |p: &Option<PathBuf>, name: &str| p.clone().unwrap_or_else(|| root.join(name));
                let train = load_idx(
                    pick(&self.mnist_images, "train-images-idx3-ubyte"),
                    pick(&self.mnist_labels, "train-labels-idx1-ubyte"),
                )?;
                let test = load_idx(
                    pick(&self.mnist_test_images, "t10k-images-idx3-ubyte"),
                    pick(&self.mnist_test_labels, "t10k-labels-idx1-ubyte"),
                )?;
                (train, test)
            }
            DatasetKind::Synthetic => {
                let (n, d, classes, margin) = (
                    self.synth_n.unwrap_or(0),
                    self.synth_d.unwrap_or(0),
                    self.synth_classes.unwrap_or(0),
                    self.synth_margin.unwrap_or(0.0),
                );
                if n == 0 {
                    return Err(CliError::Config("synth_n must be positive".into()));
                }
                let mut rng = stream(self.seed, Purpose::SynthData, 0, 0);
                let task = SyntheticTask::new(d, classes, margin, &mut rng)?;
                let train = task.sample(n, &mut rng);
                let test = task.sample(n.div_ceil(5), &mut stream(self.seed, Purpose::SynthTest, 0, 0));
                (train, test)
            }
        };
        let test = match self.test_limit {
            Some(limit) => test.head(limit),
            None => test,
        };
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SYNTH: &str = "
        # small convex task
        n_clients = 10
        rounds = 25
        epsilon = 60
        delta = 0.01
        clip_c = 10
        mu = 1.5
        shard_size = 100
        dataset = synthetic
        synth_n = 1000
        synth_d = 10
        synth_classes = 5
        synth_margin = 2.5
        model = logistic   # convex
        l2_reg = 0.001
    ";

    #[test]
    fn defaults_filled() {
        let cfg = RunConfig::parse(SYNTH).unwrap();
        assert_eq!(cfg.inner_steps, 30);
        assert_eq!(cfg.learning_rate, 0.002);
        assert_eq!(cfg.uplink_exposures, 1);
        assert_eq!(cfg.schedule, Schedule::All);
        assert!(!cfg.noiseless);
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::parse(SYNTH).unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        assert!(RunConfig::parse(&format!("{SYNTH}\ncolour = red\n")).is_err());
        assert!(RunConfig::parse(&format!("{SYNTH}\nrounds = 3\n")).is_err());
    }

    #[test]
    fn mode_requirements() {
        assert!(RunConfig::parse(&SYNTH.replace("synth_margin = 2.5", "")).is_err());
        assert!(RunConfig::parse(&format!("{SYNTH}\nschedule = krandom\n")).is_err());
        let cfg = RunConfig::parse(&format!("{SYNTH}\nschedule = krandom\nk_clients = 10\n")).unwrap();
        assert_eq!(cfg.schedule_mode(), ScheduleMode::AllClients);
    }

    #[test]
    fn set_overrides() {
        let mut cfg = RunConfig::parse(SYNTH).unwrap();
        cfg.set("epsilon", "100").unwrap();
        assert_eq!(cfg.epsilon, 100.0);
        assert!(cfg.set("nope", "1").is_err());
    }
}
