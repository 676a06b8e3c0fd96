//! Experiment configuration: flat key=value text files, CLI-overridable,
//! with a stable fingerprint naming each run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::SynthConfig;
use crate::error::{GgzError, Result};
use crate::policy::CodecMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Recon,
    Go,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyChoice {
    Adaptive,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Identity,
    Mean,
    Min,
    Max,
}

impl Aggregation {
    pub fn tag(&self) -> &'static str {
        match self {
            Aggregation::Identity => "identity",
            Aggregation::Mean => "mean",
            Aggregation::Min => "min",
            Aggregation::Max => "max",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "identity" => Ok(Aggregation::Identity),
            "mean" => Ok(Aggregation::Mean),
            "min" => Ok(Aggregation::Min),
            "max" => Ok(Aggregation::Max),
            other => Err(GgzError::InvalidArg(format!("unknown aggregation {other}"))),
        }
    }
}

/// One prediction goal: aggregate `phi` of the next `horizon` hourly samples
/// of KPI `kpi`, predicted from `lookback` reconstructed day windows.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub task_id: usize,
    pub name: String,
    pub kpi: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub phi: Aggregation,
}

impl TaskSpec {
    pub fn out_dim(&self) -> usize {
        match self.phi {
            Aggregation::Identity => self.horizon,
            _ => 1,
        }
    }

    fn encode(&self) -> String {
        format!(
            "{}:{}:{}:{}:{}",
            self.name,
            self.kpi,
            self.lookback,
            self.horizon,
            self.phi.tag()
        )
    }

    fn decode(task_id: usize, text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 5 {
            return Err(GgzError::InvalidArg(format!("bad task spec {text:?}")));
        }
        let parse = |s: &str, what: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| GgzError::InvalidArg(format!("bad task {what} in {text:?}")))
        };
        let spec = TaskSpec {
            task_id,
            name: parts[0].to_string(),
            kpi: parse(parts[1], "kpi")?,
            lookback: parse(parts[2], "lookback")?,
            horizon: parse(parts[3], "horizon")?,
            phi: Aggregation::from_tag(parts[4])?,
        };
        if spec.lookback == 0 || spec.horizon == 0 {
            return Err(GgzError::InvalidArg(format!(
                "task {} needs positive lookback and horizon",
                spec.name
            )));
        }
        Ok(spec)
    }
}

/// The six default forecasting goals over the first six KPI columns.
pub fn default_tasks() -> Vec<TaskSpec> {
    let specs = [
        ("dl_prb_usage", 0, Aggregation::Identity),
        ("rrc_conn", 1, Aggregation::Mean),
        ("latency", 2, Aggregation::Min),
        ("dl_payload", 3, Aggregation::Max),
        ("ul_rate", 4, Aggregation::Mean),
        ("ho_attempts", 5, Aggregation::Identity),
    ];
    specs
        .iter()
        .enumerate()
        .map(|(i, (name, kpi, phi))| TaskSpec {
            task_id: i,
            name: name.to_string(),
            kpi: *kpi,
            lookback: 3,
            horizon: 3,
            phi: *phi,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth(SynthConfig),
    Csv { csv: PathBuf, manifest: Option<PathBuf> },
}

/// Everything a run needs; serializes to flat key=value text.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub policy: PolicyChoice,
    pub codec: CodecMode,
    pub sr_budget: f64,
    pub rate_budget: f64,
    pub latent_dim: usize,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    pub policy_hidden: usize,
    pub class_dim: usize,
    pub hour_dim: usize,
    pub task_dim: usize,
    pub epochs: usize,
    pub head_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub policy_lr: f64,
    /// Per-step pull of the policy head back toward its budget-anchored
    /// init; keeps logits inside the temperature's responsive range.
    pub policy_leak: f64,
    pub dual_step: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub dropout: f64,
    pub seed: u64,
    pub n_classes: usize,
    /// Write a checkpoint every N epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub tasks: Vec<TaskSpec>,
    pub source: DataSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Recon,
            policy: PolicyChoice::Adaptive,
            codec: CodecMode::Hybrid,
            sr_budget: 0.4,
            rate_budget: 0.25,
            latent_dim: 64,
            enc_hidden: vec![512, 256],
            dec_hidden: vec![256, 512],
            policy_hidden: 128,
            class_dim: 8,
            hour_dim: 8,
            task_dim: 8,
            epochs: 20,
            head_epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            policy_lr: 2e-2,
            policy_leak: 1.5e-2,
            dual_step: 5e-4,
            tau_start: 1.0,
            tau_end: 0.4,
            dropout: 0.1,
            seed: 0,
            n_classes: 4,
            checkpoint_every: 0,
            tasks: default_tasks(),
            source: DataSource::Synth(SynthConfig::default()),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sr_budget) {
            return Err(GgzError::InvalidArg(format!(
                "sr budget {} outside [0,1]",
                self.sr_budget
            )));
        }
        if self.rate_budget <= 0.0 {
            return Err(GgzError::InvalidArg("rate budget must be positive".into()));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("latent_dim", self.latent_dim),
            ("policy_hidden", self.policy_hidden),
        ] {
            if v == 0 {
                return Err(GgzError::InvalidArg(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("lr", self.lr),
            ("policy_lr", self.policy_lr),
            ("tau_start", self.tau_start),
            ("tau_end", self.tau_end),
        ] {
            if v <= 0.0 {
                return Err(GgzError::InvalidArg(format!("{name} must be positive")));
            }
        }
        if self.dual_step < 0.0 {
            return Err(GgzError::InvalidArg("dual_step must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.policy_leak) {
            return Err(GgzError::InvalidArg("policy_leak must lie in [0,1)".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GgzError::InvalidArg("dropout must lie in [0,1)".into()));
        }
        if self.mode == Mode::Go {
            if self.tasks.is_empty() {
                return Err(GgzError::InvalidArg("goal-oriented mode needs tasks".into()));
            }
            let lb = self.tasks[0].lookback;
            if self.tasks.iter().any(|t| t.lookback != lb) {
                return Err(GgzError::InvalidArg(
                    "all tasks must share one lookback length".into(),
                ));
            }
        }
        Ok(())
    }

    fn codec_tag(&self) -> &'static str {
        match self.codec {
            CodecMode::Hybrid => "hybrid",
            CodecMode::GenerativeOnly => "gen-only",
            CodecMode::LosslessOnly => "lossless-only",
        }
    }

    /// Canonical key=value rendering; also the fingerprint input.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k}={v}").unwrap();
        kv("mode", match self.mode {
            Mode::Recon => "recon".into(),
            Mode::Go => "go".into(),
        });
        kv("policy", match self.policy {
            PolicyChoice::Adaptive => "adaptive".into(),
            PolicyChoice::Fixed => "fixed".into(),
        });
        kv("codec", self.codec_tag().into());
        kv("sr_budget", fmt_f64(self.sr_budget));
        kv("rate_budget", fmt_f64(self.rate_budget));
        kv("latent_dim", self.latent_dim.to_string());
        kv("enc_hidden", join_usizes(&self.enc_hidden));
        kv("dec_hidden", join_usizes(&self.dec_hidden));
        kv("policy_hidden", self.policy_hidden.to_string());
        kv("class_dim", self.class_dim.to_string());
        kv("hour_dim", self.hour_dim.to_string());
        kv("task_dim", self.task_dim.to_string());
        kv("epochs", self.epochs.to_string());
        kv("head_epochs", self.head_epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", fmt_f64(self.lr));
        kv("policy_lr", fmt_f64(self.policy_lr));
        kv("policy_leak", fmt_f64(self.policy_leak));
        kv("dual_step", fmt_f64(self.dual_step));
        kv("tau_start", fmt_f64(self.tau_start));
        kv("tau_end", fmt_f64(self.tau_end));
        kv("dropout", fmt_f64(self.dropout));
        kv("seed", self.seed.to_string());
        kv("n_classes", self.n_classes.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        for (i, t) in self.tasks.iter().enumerate() {
            kv(&format!("task.{i}"), t.encode());
        }
        match &self.source {
            DataSource::Synth(s) => {
                kv("source", "synth".into());
                kv("synth.seed", s.seed.to_string());
                kv("synth.n_bs", s.n_bs.to_string());
                kv("synth.n_days", s.n_days.to_string());
                kv("synth.n_classes", s.n_classes.to_string());
                kv("synth.k", s.k.to_string());
                kv("synth.noise_sigma", fmt_f64(s.noise_sigma));
                kv("synth.weekend_factor", fmt_f64(s.weekend_factor));
            }
            DataSource::Csv { csv, manifest } => {
                kv("source", "csv".into());
                kv("csv", csv.display().to_string());
                if let Some(m) = manifest {
                    kv("manifest", m.display().to_string());
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = ExperimentConfig::default();
        cfg.tasks.clear();
        let mut pairs = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GgzError::InvalidArg(format!("config line without '=': {line}")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        cfg.apply_pairs(&pairs)?;
        if cfg.tasks.is_empty() {
            cfg.tasks = default_tasks();
        }
        Ok(cfg)
    }

    /// Apply key=value overrides (config file order, then CLI flags on top).
    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut synth = match &self.source {
            DataSource::Synth(s) => s.clone(),
            _ => SynthConfig::default(),
        };
        let mut csv_path: Option<PathBuf> = None;
        let mut manifest_path: Option<PathBuf> = None;
        let mut source_tag: Option<String> = None;
        let mut tasks: BTreeMap<usize, TaskSpec> = BTreeMap::new();
        for (k, v) in pairs {
            match k.as_str() {
                "mode" => {
                    self.mode = match v.as_str() {
                        "recon" => Mode::Recon,
                        "go" => Mode::Go,
                        other => {
                            return Err(GgzError::InvalidArg(format!("unknown mode {other}")))
                        }
                    }
                }
                "policy" => {
                    self.policy = match v.as_str() {
                        "adaptive" => PolicyChoice::Adaptive,
                        "fixed" => PolicyChoice::Fixed,
                        other => {
                            return Err(GgzError::InvalidArg(format!("unknown policy {other}")))
                        }
                    }
                }
                "codec" => {
                    self.codec = match v.as_str() {
                        "hybrid" => CodecMode::Hybrid,
                        "gen-only" => CodecMode::GenerativeOnly,
                        "lossless-only" => CodecMode::LosslessOnly,
                        other => {
                            return Err(GgzError::InvalidArg(format!("unknown codec {other}")))
                        }
                    }
                }
                "sr_budget" => self.sr_budget = parse_f64(k, v)?,
                "rate_budget" => self.rate_budget = parse_f64(k, v)?,
                "latent_dim" => self.latent_dim = parse_usize(k, v)?,
                "enc_hidden" => self.enc_hidden = parse_usizes(k, v)?,
                "dec_hidden" => self.dec_hidden = parse_usizes(k, v)?,
                "policy_hidden" => self.policy_hidden = parse_usize(k, v)?,
                "class_dim" => self.class_dim = parse_usize(k, v)?,
                "hour_dim" => self.hour_dim = parse_usize(k, v)?,
                "task_dim" => self.task_dim = parse_usize(k, v)?,
                "epochs" => self.epochs = parse_usize(k, v)?,
                "head_epochs" => self.head_epochs = parse_usize(k, v)?,
                "batch_size" => self.batch_size = parse_usize(k, v)?,
                "lr" => self.lr = parse_f64(k, v)?,
                "policy_lr" => self.policy_lr = parse_f64(k, v)?,
                "policy_leak" => self.policy_leak = parse_f64(k, v)?,
                "dual_step" => self.dual_step = parse_f64(k, v)?,
                "tau_start" => self.tau_start = parse_f64(k, v)?,
                "tau_end" => self.tau_end = parse_f64(k, v)?,
                "dropout" => self.dropout = parse_f64(k, v)?,
                "seed" => {
                    self.seed = v
                        .parse()
                        .map_err(|_| GgzError::InvalidArg(format!("bad seed {v}")))?
                }
                "n_classes" => self.n_classes = parse_usize(k, v)?,
                "checkpoint_every" => self.checkpoint_every = parse_usize(k, v)?,
                "source" => source_tag = Some(v.clone()),
                "csv" => csv_path = Some(PathBuf::from(v)),
                "manifest" => manifest_path = Some(PathBuf::from(v)),
                "synth.seed" => {
                    synth.seed = v
                        .parse()
                        .map_err(|_| GgzError::InvalidArg(format!("bad synth.seed {v}")))?
                }
                "synth.n_bs" => synth.n_bs = parse_usize(k, v)?,
                "synth.n_days" => synth.n_days = parse_usize(k, v)?,
                "synth.n_classes" => synth.n_classes = parse_usize(k, v)?,
                "synth.k" => synth.k = parse_usize(k, v)?,
                "synth.noise_sigma" => synth.noise_sigma = parse_f64(k, v)?,
                "synth.weekend_factor" => synth.weekend_factor = parse_f64(k, v)?,
                _ if k.starts_with("task.") => {
                    let idx: usize = k[5..]
                        .parse()
                        .map_err(|_| GgzError::InvalidArg(format!("bad task index in {k}")))?;
                    tasks.insert(idx, TaskSpec::decode(idx, v)?);
                }
                other => {
                    return Err(GgzError::InvalidArg(format!("unknown config key {other}")))
                }
            }
        }
        if !tasks.is_empty() {
            self.tasks = tasks.into_values().collect();
        }
        match source_tag.as_deref() {
            Some("synth") | None if csv_path.is_none() => {
                self.source = DataSource::Synth(synth);
            }
            Some("csv") => {
                let csv = csv_path.ok_or_else(|| {
                    GgzError::InvalidArg("source=csv requires a csv path".into())
                })?;
                self.source = DataSource::Csv {
                    csv,
                    manifest: manifest_path,
                };
            }
            None => {
                self.source = DataSource::Csv {
                    csv: csv_path.unwrap(),
                    manifest: manifest_path,
                };
            }
            Some(other) => {
                return Err(GgzError::InvalidArg(format!("unknown source {other}")))
            }
        }
        Ok(())
    }

    /// Short stable hash of the canonical text; names the run directory.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_text().as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| GgzError::InvalidArg(format!("bad numeric value for {key}: {v}")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| GgzError::InvalidArg(format!("bad integer value for {key}: {v}")))
}

fn parse_usizes(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|p| parse_usize(key, p.trim()))
        .collect()
}

fn join_usizes(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.txt");
        let mut cfg = ExperimentConfig::default();
        cfg.mode = Mode::Go;
        cfg.sr_budget = 0.2;
        cfg.latent_dim = 96;
        cfg.save(&path).unwrap();
        let loaded = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg, loaded);
        assert_eq!(cfg.fingerprint(), loaded.fingerprint());
    }

    #[test]
    fn fingerprint_distinguishes_configs() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn overrides_take_effect() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_pairs(&[
            ("sr_budget".into(), "0.8".into()),
            ("codec".into(), "gen-only".into()),
        ])
        .unwrap();
        assert_eq!(cfg.sr_budget, 0.8);
        assert_eq!(cfg.codec, CodecMode::GenerativeOnly);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg
            .apply_pairs(&[("no_such_key".into(), "1".into())])
            .is_err());
    }

    #[test]
    fn invalid_budget_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.sr_budget = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_tasks_cover_six_kpis() {
        let tasks = default_tasks();
        assert_eq!(tasks.len(), 6);
        assert_eq!(tasks[0].out_dim(), 3); // identity over horizon 3
        assert_eq!(tasks[1].out_dim(), 1); // mean
        let kpis: Vec<usize> = tasks.iter().map(|t| t.kpi).collect();
        assert_eq!(kpis, vec![0, 1, 2, 3, 4, 5]);
    }
}
