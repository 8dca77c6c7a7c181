//! `key = value` run configuration with dotted sections.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use drr_core::agent::AgentConfig;
use drr_core::datasets::Format;
use drr_core::pmf::PmfConfig;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset_name: String,
    pub dataset_format: Format,
    pub dataset_path: PathBuf,
    pub split_fraction: f64,
    pub embedding: PmfConfig,
    pub agent: AgentConfig,
    /// Episode horizon `T`.
    pub horizon: usize,
    /// Training episodes `M`.
    pub episodes: usize,
    pub eval_k: Vec<usize>,
    pub eval_seeds: Vec<u64>,
    pub online_epsilon: f64,
    /// Evaluate only the first this many sessions online; 0 means all.
    pub online_sessions: usize,
    pub linucb_alphas: Vec<f64>,
    pub sweep_horizons: Vec<usize>,
    pub pattern_max_run: usize,
    pub data_dir: PathBuf,
    pub embeddings_dir: PathBuf,
    pub checkpoints_dir: PathBuf,
    pub reports_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset_name: "ml100k".into(),
            dataset_format: Format::MovieLens100k,
            dataset_path: PathBuf::from("data/ml-100k/u.data"),
            split_fraction: 0.8,
            embedding: PmfConfig::default(),
            agent: AgentConfig::default(),
            horizon: 10,
            episodes: 1000,
            eval_k: vec![5, 10],
            eval_seeds: vec![0, 1, 2, 3, 4],
            online_epsilon: 0.05,
            online_sessions: 0,
            linucb_alphas: vec![0.1, 0.5, 1.0],
            sweep_horizons: vec![5, 10, 15, 20],
            pattern_max_run: 8,
            data_dir: PathBuf::from("runs/data"),
            embeddings_dir: PathBuf::from("runs/embeddings"),
            checkpoints_dir: PathBuf::from("runs/checkpoints"),
            reports_dir: PathBuf::from("runs/reports"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value {value:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_pair(key: &str, value: &str) -> Result<[usize; 2], CliError> {
    let v: Vec<usize> = parse_list(key, value)?;
    match v.as_slice() {
        [a, b] => Ok([*a, *b]),
        _ => Err(CliError::Usage(format!("{key} takes two comma-separated widths"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Missing(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    pub fn parse_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", idx + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| CliError::Usage(format!("config line {}: {e}", idx + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let a = &mut self.agent;
        let e = &mut self.embedding;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "dataset.name" => self.dataset_name = value.to_owned(),
            "dataset.format" => self.dataset_format = value.parse().map_err(|e| CliError::Usage(format!("{e}")))?,
            "dataset.path" => self.dataset_path = PathBuf::from(value),
            "dataset.split_fraction" => self.split_fraction = parse(key, value)?,
            "embedding.k" => {
                e.k = parse(key, value)?;
                a.k = e.k;
            }
            "embedding.learning_rate" => e.learning_rate = parse(key, value)?,
            "embedding.l2_lambda" => e.l2_lambda = parse(key, value)?,
            "embedding.epochs" => e.epochs = parse(key, value)?,
            "embedding.init_scale" => e.init_scale = parse(key, value)?,
            "agent.variant" => a.variant = value.parse().map_err(|e| CliError::Usage(format!("{e}")))?,
            "agent.n" => a.n = parse(key, value)?,
            "agent.actor_hidden" => a.actor_hidden = parse_pair(key, value)?,
            "agent.critic_hidden" => a.critic_hidden = parse_pair(key, value)?,
            "agent.actor_lr" => a.actor_lr = parse(key, value)?,
            "agent.critic_lr" => a.critic_lr = parse(key, value)?,
            "agent.l2" => a.l2 = parse(key, value)?,
            "agent.gamma" => a.gamma = parse(key, value)?,
            "agent.tau" => a.tau = parse(key, value)?,
            "agent.eps_start" => a.eps_start = parse(key, value)?,
            "agent.eps_end" => a.eps_end = parse(key, value)?,
            "agent.eps_decay_steps" => a.eps_decay_steps = parse(key, value)?,
            "agent.batch_size" => a.batch_size = parse(key, value)?,
            "agent.buffer_capacity" => a.buffer_capacity = parse(key, value)?,
            "agent.priority_alpha" => a.priority_alpha = parse(key, value)?,
            "agent.priority_beta_start" => a.priority_beta_start = parse(key, value)?,
            "agent.priority_beta_end" => a.priority_beta_end = parse(key, value)?,
            "agent.priority_floor" => a.priority_floor = parse(key, value)?,
            "agent.T" => self.horizon = parse(key, value)?,
            "agent.M" => self.episodes = parse(key, value)?,
            "eval.k" => self.eval_k = parse_list(key, value)?,
            "eval.seeds" => self.eval_seeds = parse_list(key, value)?,
            "eval.online_epsilon" => self.online_epsilon = parse(key, value)?,
            "eval.online_sessions" => self.online_sessions = parse(key, value)?,
            "eval.linucb_alphas" => self.linucb_alphas = parse_list(key, value)?,
            "eval.sweep_T" => self.sweep_horizons = parse_list(key, value)?,
            "eval.pattern_max_run" => self.pattern_max_run = parse(key, value)?,
            "paths.data" => self.data_dir = PathBuf::from(value),
            "paths.embeddings" => self.embeddings_dir = PathBuf::from(value),
            "paths.checkpoints" => self.checkpoints_dir = PathBuf::from(value),
            "paths.reports" => self.reports_dir = PathBuf::from(value),
            _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.agent.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.horizon == 0 {
            return Err(CliError::Usage("agent.T must be >= 1".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(CliError::Usage("dataset.split_fraction must lie in (0, 1)".into()));
        }
        if self.eval_k.is_empty() || self.eval_k.contains(&0) {
            return Err(CliError::Usage("eval.k needs at least one k >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.online_epsilon) {
            return Err(CliError::Usage("eval.online_epsilon must lie in [0, 1]".into()));
        }
        if self.linucb_alphas.iter().any(|a| !(*a >= 0.0)) {
            return Err(CliError::Usage("eval.linucb_alphas must be >= 0".into()));
        }
        Ok(())
    }

    /// Every key in a fixed order. Parsing the output gives back `self`.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let a = &self.agent;
        let e = &self.embedding;
        vec![
            ("seed", self.seed.to_string()),
            ("dataset.name", self.dataset_name.clone()),
            ("dataset.format", self.dataset_format.as_str().to_owned()),
            ("dataset.path", self.dataset_path.display().to_string()),
            ("dataset.split_fraction", self.split_fraction.to_string()),
            ("embedding.k", e.k.to_string()),
            ("embedding.learning_rate", e.learning_rate.to_string()),
            ("embedding.l2_lambda", e.l2_lambda.to_string()),
            ("embedding.epochs", e.epochs.to_string()),
            ("embedding.init_scale", e.init_scale.to_string()),
            ("agent.variant", a.variant.as_str().to_owned()),
            ("agent.n", a.n.to_string()),
            ("agent.actor_hidden", join(&a.actor_hidden)),
            ("agent.critic_hidden", join(&a.critic_hidden)),
            ("agent.actor_lr", a.actor_lr.to_string()),
            ("agent.critic_lr", a.critic_lr.to_string()),
            ("agent.l2", a.l2.to_string()),
            ("agent.gamma", a.gamma.to_string()),
            ("agent.tau", a.tau.to_string()),
            ("agent.eps_start", a.eps_start.to_string()),
            ("agent.eps_end", a.eps_end.to_string()),
            ("agent.eps_decay_steps", a.eps_decay_steps.to_string()),
            ("agent.batch_size", a.batch_size.to_string()),
            ("agent.buffer_capacity", a.buffer_capacity.to_string()),
            ("agent.priority_alpha", a.priority_alpha.to_string()),
            ("agent.priority_beta_start", a.priority_beta_start.to_string()),
            ("agent.priority_beta_end", a.priority_beta_end.to_string()),
            ("agent.priority_floor", a.priority_floor.to_string()),
            ("agent.T", self.horizon.to_string()),
            ("agent.M", self.episodes.to_string()),
            ("eval.k", join(&self.eval_k)),
            ("eval.seeds", join(&self.eval_seeds)),
            ("eval.online_epsilon", self.online_epsilon.to_string()),
            ("eval.online_sessions", self.online_sessions.to_string()),
            ("eval.linucb_alphas", join(&self.linucb_alphas)),
            ("eval.sweep_T", join(&self.sweep_horizons)),
            ("eval.pattern_max_run", self.pattern_max_run.to_string()),
            ("paths.data", self.data_dir.display().to_string()),
            ("paths.embeddings", self.embeddings_dir.display().to_string()),
            ("paths.checkpoints", self.checkpoints_dir.display().to_string()),
            ("paths.reports", self.reports_dir.display().to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let sec = key.split_once('.').map(|(s, _)| s).unwrap_or("");
            if sec != section && !out.is_empty() {
                out.push('\n');
            }
            section = sec;
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// SHA-256 over the entries whose key starts with one of `prefixes`,
    /// plus the seed. Paths never take part.
    fn digest_of(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (key, value) in self.entries() {
            if key == "seed" || prefixes.iter().any(|p| key.starts_with(p)) {
                h.update(format!("{key}={value}\n").as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Identifies a prepared split.
    pub fn data_digest(&self) -> String {
        self.digest_of(&["dataset."])
    }

    /// Identifies pretrained embeddings.
    pub fn embedding_digest(&self) -> String {
        self.digest_of(&["dataset.", "embedding."])
    }

    /// Identifies a trained agent.
    pub fn agent_digest(&self) -> String {
        self.digest_of(&["dataset.", "embedding.", "agent."])
    }

    /// Identifies an evaluation report.
    pub fn report_digest(&self) -> String {
        self.digest_of(&["dataset.", "embedding.", "agent.", "eval."])
    }

    pub fn seed_tag(&self) -> String {
        format!("seed{}", self.seed)
    }

    pub fn canonical_path(&self) -> PathBuf {
        self.data_dir.join("canonical.csv")
    }

    pub fn split_path(&self, side: &str) -> PathBuf {
        self.data_dir.join(format!("split-{}.{side}.csv", self.seed_tag()))
    }

    pub fn embeddings_path(&self) -> PathBuf {
        self.embeddings_dir.join(format!("pmf-{}.bin", self.seed_tag()))
    }

    pub fn run_tag(&self) -> String {
        format!("{}-T{}-{}", self.agent.variant, self.horizon, self.seed_tag())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoints_dir.join(format!("{}.ckpt", self.run_tag()))
    }
}
