//! Run configuration: flat `key = value` files, `MLKG_` environment
//! overrides and command-line overrides, applied in that order over the
//! defaults.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::embed::{EmbeddingSource, EmbeddingTable, DEFAULT_HASH_DIM};
use crate::error::{Error, Result};
use crate::params::ModelConfig;
use crate::synth::DEFAULT_CHAIN_CAP;
use crate::train::{sha256_hex, Mode, TrainConfig};

pub const ENV_PREFIX: &str = "MLKG_";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    /// Precomputed embedding table; hashed embeddings are used when absent.
    pub embeddings: Option<PathBuf>,
    pub hash_dim: usize,
    pub hash_seed: u64,
    pub hidden_dim: usize,
    pub layers: usize,
    pub query_attention: bool,
    pub tau: f64,
    pub negatives_k: usize,
    /// Mode defaults apply to the next three when unset.
    pub lr: Option<f64>,
    pub max_epochs: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub holdout_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Chains kept per bridge entity; 0 disables the cap.
    pub chain_cap: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            graph: None,
            embeddings: None,
            hash_dim: DEFAULT_HASH_DIM,
            hash_seed: 0,
            hidden_dim: 128,
            layers: 2,
            query_attention: true,
            tau: 1.0,
            negatives_k: 30,
            lr: None,
            max_epochs: None,
            checkpoint_every: None,
            holdout_fraction: 0.05,
            batch_size: 32,
            seed: 0,
            chain_cap: DEFAULT_CHAIN_CAP,
            output_dir: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "corpus",
    "graph",
    "embeddings",
    "hash_dim",
    "hash_seed",
    "hidden_dim",
    "layers",
    "query_attention",
    "tau",
    "negatives_k",
    "lr",
    "max_epochs",
    "checkpoint_every",
    "holdout_fraction",
    "batch_size",
    "seed",
    "chain_cap",
    "output_dir",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str, kind: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: expected {kind}, got {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

impl RunConfig {
    /// Applies one override. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "corpus" => self.corpus = Some(PathBuf::from(value)),
            "graph" => self.graph = Some(PathBuf::from(value)),
            "embeddings" => self.embeddings = (!value.is_empty()).then(|| PathBuf::from(value)),
            "hash_dim" => self.hash_dim = parse(key, value, "an integer")?,
            "hash_seed" => self.hash_seed = parse(key, value, "an integer")?,
            "hidden_dim" => self.hidden_dim = parse(key, value, "an integer")?,
            "layers" => self.layers = parse(key, value, "an integer")?,
            "query_attention" => self.query_attention = parse_bool(key, value)?,
            "tau" => self.tau = parse(key, value, "a number")?,
            "negatives_k" => self.negatives_k = parse(key, value, "an integer")?,
            "lr" => self.lr = Some(parse(key, value, "a number")?),
            "max_epochs" => self.max_epochs = Some(parse(key, value, "an integer")?),
            "checkpoint_every" => self.checkpoint_every = Some(parse(key, value, "an integer")?),
            "holdout_fraction" => self.holdout_fraction = parse(key, value, "a number")?,
            "batch_size" => self.batch_size = parse(key, value, "an integer")?,
            "seed" => self.seed = parse(key, value, "an integer")?,
            "chain_cap" => self.chain_cap = parse(key, value, "an integer")?,
            "output_dir" => self.output_dir = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: "expected key = value".into(),
            })?;
            self.set(key.trim(), value).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `MLKG_*` variables from `env`, then `flags`.
    pub fn load(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        flags: &[(String, String)],
    ) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            cfg.apply_text(&std::fs::read_to_string(path)?, path)?;
        }
        let mut vars: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_lowercase(), v)))
            .collect();
        vars.sort();
        for (k, v) in vars {
            cfg.set(&k, &v).map_err(|e| Error::Config(format!("{ENV_PREFIX}{}: {e}", k.to_uppercase())))?;
        }
        for (k, v) in flags {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.tau > 0.0) {
            bad.push(format!("tau must be positive, got {}", self.tau));
        }
        if self.hidden_dim < 2 {
            bad.push(format!("hidden_dim must be at least 2, got {}", self.hidden_dim));
        }
        if self.negatives_k == 0 {
            bad.push("negatives_k must be at least 1".into());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            bad.push(format!("holdout_fraction must lie in [0, 1), got {}", self.holdout_fraction));
        }
        if self.embeddings.is_none() && self.hash_dim < crate::embed::MIN_DIM {
            bad.push(format!("hash_dim must be at least {}, got {}", crate::embed::MIN_DIM, self.hash_dim));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn chain_cap(&self) -> Option<usize> {
        (self.chain_cap > 0).then_some(self.chain_cap)
    }

    pub fn embedding_source(&self) -> Result<EmbeddingSource> {
        match &self.embeddings {
            Some(path) => Ok(EmbeddingSource::File(Arc::new(EmbeddingTable::load(path)?))),
            None => EmbeddingSource::hashed(self.hash_seed, self.hash_dim),
        }
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig { query_attention: self.query_attention, ..ModelConfig::new(input_dim, self.hidden_dim, self.layers) }
    }

    pub fn train_config(&self, mode: Mode) -> TrainConfig {
        let d = TrainConfig::for_mode(mode, self.seed);
        TrainConfig {
            tau: self.tau,
            negatives_k: self.negatives_k,
            lr: self.lr.unwrap_or(d.lr),
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            checkpoint_every: self.checkpoint_every.unwrap_or(d.checkpoint_every),
            holdout_fraction: self.holdout_fraction,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    /// Canonical `key = value` rendering; unset optional keys are omitted.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let entries: Vec<(&str, Option<String>)> = vec![
            ("corpus", path(&self.corpus)),
            ("graph", path(&self.graph)),
            ("embeddings", path(&self.embeddings)),
            ("hash_dim", Some(self.hash_dim.to_string())),
            ("hash_seed", Some(self.hash_seed.to_string())),
            ("hidden_dim", Some(self.hidden_dim.to_string())),
            ("layers", Some(self.layers.to_string())),
            ("query_attention", Some(self.query_attention.to_string())),
            ("tau", Some(format!("{:?}", self.tau))),
            ("negatives_k", Some(self.negatives_k.to_string())),
            ("lr", self.lr.map(|v| format!("{v:?}"))),
            ("max_epochs", self.max_epochs.map(|v| v.to_string())),
            ("checkpoint_every", self.checkpoint_every.map(|v| v.to_string())),
            ("holdout_fraction", Some(format!("{:?}", self.holdout_fraction))),
            ("batch_size", Some(self.batch_size.to_string())),
            ("seed", Some(self.seed.to_string())),
            ("chain_cap", Some(self.chain_cap.to_string())),
            ("output_dir", path(&self.output_dir)),
        ];
        entries.into_iter().filter_map(|(k, v)| v.map(|v| format!("{k} = {v}\n"))).collect()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn empty_file_gives_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "").unwrap();
        let cfg = RunConfig::load(Some(&path), Vec::new(), &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!((cfg.hidden_dim, cfg.layers, cfg.tau, cfg.negatives_k), (128, 2, 1.0, 30));
    }

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# model\nhidden_dim = 64\nlayers = 3\nseed=4\n").unwrap();
        let env = vec![("MLKG_LAYERS".to_string(), "1".to_string()), ("HOME".to_string(), "/x".to_string())];
        let cfg = RunConfig::load(Some(&path), env, &flags(&[("hidden_dim", "32")])).unwrap();
        assert_eq!((cfg.hidden_dim, cfg.layers, cfg.seed), (32, 1, 4));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::load(None, Vec::new(), &flags(&[("tau", "0")])), Err(Error::Config(_))));
        assert!(RunConfig::load(None, Vec::new(), &flags(&[("colour", "red")])).is_err());
        assert!(RunConfig::load(None, Vec::new(), &flags(&[("layers", "two")])).is_err());
        assert!(RunConfig::load(None, vec![("MLKG_BOGUS".into(), "1".into())], &[]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "layers\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&path), Vec::new(), &[]), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("lr", "0.001").unwrap();
        cfg.set("graph", "g.jsonl").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        for line in cfg.to_text().lines() {
            assert!(KEYS.contains(&line.split(" = ").next().unwrap()));
        }
    }

    #[test]
    fn mode_defaults_fill_unset_values() {
        let cfg = RunConfig::default();
        let t = cfg.train_config(Mode::Finetune);
        assert_eq!((t.lr, t.max_epochs, t.checkpoint_every), (5e-4, 3, 100));
        let mut cfg = RunConfig::default();
        cfg.set("max_epochs", "7").unwrap();
        assert_eq!(cfg.train_config(Mode::Pretrain).max_epochs, 7);
    }
}
