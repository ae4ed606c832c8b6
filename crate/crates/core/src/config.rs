//! Experiment configuration.
//!
//! The file format is flat `key = value` text with dotted section keys:
//!
//! ```text
//! # comments and blank lines are ignored
//! optimizer.lr0 = 0.003
//! federation.rounds = 50
//! ```
//!
//! Unknown keys, duplicate keys and malformed values are hard errors.
//! Command-line overrides (`--set key=value`) are applied after the file.
//! [`KEYS`] is the single list of accepted keys and their defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoders::WorldConfig;
use crate::error::{Error, Result};
use crate::seed;
use crate::translator::TranslatorConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub temperature: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr0: 0.003,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 32,
            temperature: 0.01,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: &str| Err(Error::config(format!("optimizer.{key}"), 0, msg));
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return fail("lr0", "must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay", "must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail("temperature", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub classes_per_client: usize,
    pub shots: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub fraction: f64,
    /// Write a checkpoint every this many rounds; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            n_clients: 6,
            classes_per_client: 10,
            shots: 8,
            rounds: 50,
            local_epochs: 1,
            fraction: 1.0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub n_test: usize,
    pub report_dir: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_test: 50,
            report_dir: PathBuf::from("reports"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// `d` mirrors `translator.d_model` and `seed` is derived from
    /// `master_seed`; neither has its own key.
    pub world: WorldConfig,
    pub translator: TranslatorConfig,
    pub optimizer: OptimizerConfig,
    pub federation: FederationConfig,
    pub eval: EvalConfig,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = ExperimentConfig {
            world: WorldConfig::default(),
            translator: TranslatorConfig::default(),
            optimizer: OptimizerConfig::default(),
            federation: FederationConfig::default(),
            eval: EvalConfig::default(),
            master_seed: 1,
        };
        cfg.sync_derived();
        cfg
    }
}

/// One accepted configuration key.
#[derive(Debug, Clone, Copy)]
pub struct KeyDoc {
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

macro_rules! keys {
    ($(($key:literal, $default:literal, $doc:literal)),* $(,)?) => {
        &[$(KeyDoc { key: $key, default: $default, doc: $doc }),*]
    };
}

pub const KEYS: &[KeyDoc] = keys![
    ("master_seed", "1", "Root seed; every random stream is derived from it"),
    ("world.n_base", "60", "Number of base (seen) classes"),
    ("world.n_new", "20", "Number of new (unseen) classes"),
    ("world.sigma_img", "0.1", "Expected norm of image-feature noise"),
    ("world.sigma_text", "0.05", "Expected norm of class-embedding noise"),
    ("world.interp_lo", "0.3", "Lower bound of the new-class mixing weight"),
    ("world.interp_hi", "0.7", "Upper bound of the new-class mixing weight"),
    ("world.text_misalign", "3.0", "Strength of the fixed linear misalignment between centers and class embeddings"),
    ("translator.d_model", "32", "Embedding dimension, shared with the world"),
    ("translator.n_ctx", "4", "Number of generated context vectors"),
    ("translator.n_heads", "4", "Attention heads; must divide d_model"),
    ("translator.ffn_mult", "4", "Feed-forward expansion factor"),
    ("translator.kv_len", "1", "Key/value rows per class (the synthetic world supplies 1)"),
    ("optimizer.lr0", "0.003", "Base learning rate before cosine annealing"),
    ("optimizer.momentum", "0.9", "SGD momentum"),
    ("optimizer.weight_decay", "0.00001", "L2 weight decay folded into the gradient"),
    ("optimizer.batch_size", "32", "Local mini-batch size"),
    ("optimizer.temperature", "0.01", "Logit temperature dividing cosine similarities"),
    ("federation.n_clients", "6", "Number of simulated clients"),
    ("federation.classes_per_client", "10", "Disjoint base classes held by each client"),
    ("federation.shots", "8", "Training samples per class"),
    ("federation.rounds", "50", "Communication rounds"),
    ("federation.local_epochs", "1", "Local epochs per round"),
    ("federation.fraction", "1.0", "Fraction of clients selected per round"),
    ("federation.checkpoint_every", "0", "Checkpoint period in rounds; 0 keeps only the final checkpoint"),
    ("eval.n_test", "50", "Test samples per class"),
    ("eval.report_dir", "reports", "Directory for CSV, JSON and SVG reports"),
];

fn parse_value<T: FromStr>(key: &str, line: usize, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::config(key, line, format!("malformed value `{raw}`")))
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults, then applies overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, line_no, "expected `key = value`"))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, line_no, "duplicate key"));
            }
            cfg.set(key, value.trim(), line_no)?;
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.as_str(), 0, "override must be `key=value`"))?;
            cfg.set(key.trim(), value.trim(), 0)?;
        }
        cfg.sync_derived();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text, overrides)
    }

    /// Sets one key. `line` is 0 for command-line overrides.
    pub fn set(&mut self, key: &str, raw: &str, line: usize) -> Result<()> {
        if !KEYS.iter().any(|k| k.key == key) {
            return Err(Error::config(key, line, "unknown key"));
        }
        let v = raw;
        match key {
            "master_seed" => self.master_seed = parse_value(key, line, v)?,
            "world.n_base" => self.world.n_base = parse_value(key, line, v)?,
            "world.n_new" => self.world.n_new = parse_value(key, line, v)?,
            "world.sigma_img" => self.world.sigma_img = parse_value(key, line, v)?,
            "world.sigma_text" => self.world.sigma_text = parse_value(key, line, v)?,
            "world.interp_lo" => self.world.interp_lo = parse_value(key, line, v)?,
            "world.interp_hi" => self.world.interp_hi = parse_value(key, line, v)?,
            "world.text_misalign" => self.world.text_misalign = parse_value(key, line, v)?,
            "translator.d_model" => self.translator.d_model = parse_value(key, line, v)?,
            "translator.n_ctx" => self.translator.n_ctx = parse_value(key, line, v)?,
            "translator.n_heads" => self.translator.n_heads = parse_value(key, line, v)?,
            "translator.ffn_mult" => self.translator.ffn_mult = parse_value(key, line, v)?,
            "translator.kv_len" => self.translator.kv_len = parse_value(key, line, v)?,
            "optimizer.lr0" => self.optimizer.lr0 = parse_value(key, line, v)?,
            "optimizer.momentum" => self.optimizer.momentum = parse_value(key, line, v)?,
            "optimizer.weight_decay" => self.optimizer.weight_decay = parse_value(key, line, v)?,
            "optimizer.batch_size" => self.optimizer.batch_size = parse_value(key, line, v)?,
            "optimizer.temperature" => self.optimizer.temperature = parse_value(key, line, v)?,
            "federation.n_clients" => self.federation.n_clients = parse_value(key, line, v)?,
            "federation.classes_per_client" => self.federation.classes_per_client = parse_value(key, line, v)?,
            "federation.shots" => self.federation.shots = parse_value(key, line, v)?,
            "federation.rounds" => self.federation.rounds = parse_value(key, line, v)?,
            "federation.local_epochs" => self.federation.local_epochs = parse_value(key, line, v)?,
            "federation.fraction" => self.federation.fraction = parse_value(key, line, v)?,
            "federation.checkpoint_every" => self.federation.checkpoint_every = parse_value(key, line, v)?,
            "eval.n_test" => self.eval.n_test = parse_value(key, line, v)?,
            "eval.report_dir" => {
                if v.is_empty() {
                    return Err(Error::config(key, line, "path must not be empty"));
                }
                self.eval.report_dir = PathBuf::from(v)
            }
            _ => return Err(Error::config(key, line, "documented key has no parser")),
        }
        Ok(())
    }

    /// Current value of a documented key, formatted so that parsing it
    /// back yields the identical value.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "master_seed" => self.master_seed.to_string(),
            "world.n_base" => self.world.n_base.to_string(),
            "world.n_new" => self.world.n_new.to_string(),
            "world.sigma_img" => format!("{:?}", self.world.sigma_img),
            "world.sigma_text" => format!("{:?}", self.world.sigma_text),
            "world.interp_lo" => format!("{:?}", self.world.interp_lo),
            "world.interp_hi" => format!("{:?}", self.world.interp_hi),
            "world.text_misalign" => format!("{:?}", self.world.text_misalign),
            "translator.d_model" => self.translator.d_model.to_string(),
            "translator.n_ctx" => self.translator.n_ctx.to_string(),
            "translator.n_heads" => self.translator.n_heads.to_string(),
            "translator.ffn_mult" => self.translator.ffn_mult.to_string(),
            "translator.kv_len" => self.translator.kv_len.to_string(),
            "optimizer.lr0" => format!("{:?}", self.optimizer.lr0),
            "optimizer.momentum" => format!("{:?}", self.optimizer.momentum),
            "optimizer.weight_decay" => format!("{:?}", self.optimizer.weight_decay),
            "optimizer.batch_size" => self.optimizer.batch_size.to_string(),
            "optimizer.temperature" => format!("{:?}", self.optimizer.temperature),
            "federation.n_clients" => self.federation.n_clients.to_string(),
            "federation.classes_per_client" => self.federation.classes_per_client.to_string(),
            "federation.shots" => self.federation.shots.to_string(),
            "federation.rounds" => self.federation.rounds.to_string(),
            "federation.local_epochs" => self.federation.local_epochs.to_string(),
            "federation.fraction" => format!("{:?}", self.federation.fraction),
            "federation.checkpoint_every" => self.federation.checkpoint_every.to_string(),
            "eval.n_test" => self.eval.n_test.to_string(),
            "eval.report_dir" => self.eval.report_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Canonical text form with every key; parses back to `self`.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{} = {}\n", k.key, self.get(k.key).expect("documented key")))
            .collect()
    }

    fn sync_derived(&mut self) {
        self.world.d = self.translator.d_model;
        self.world.seed = seed::hash64(&[self.master_seed, seed::stream::WORLD]);
    }

    pub fn validate(&self) -> Result<()> {
        self.translator
            .validate()
            .map_err(|e| Error::config("translator.n_heads", 0, e.to_string()))?;
        if self.translator.kv_len != 1 {
            return Err(Error::config(
                "translator.kv_len",
                0,
                "the synthetic world supplies one pooled embedding per class; kv_len must be 1",
            ));
        }
        self.world
            .validate()
            .map_err(|e| Error::config("world", 0, e.to_string()))?;
        self.optimizer.validate()?;
        let f = &self.federation;
        let fail = |key: &str, msg: String| Err(Error::config(format!("federation.{key}"), 0, msg));
        if f.n_clients == 0 {
            return fail("n_clients", "must be at least 1".into());
        }
        if f.classes_per_client == 0 {
            return fail("classes_per_client", "must be at least 1".into());
        }
        if f.n_clients * f.classes_per_client > self.world.n_base {
            return fail(
                "classes_per_client",
                format!(
                    "{} clients x {} classes exceeds {} base classes",
                    f.n_clients, f.classes_per_client, self.world.n_base
                ),
            );
        }
        if f.shots == 0 {
            return fail("shots", "must be at least 1".into());
        }
        if f.rounds == 0 {
            return fail("rounds", "must be at least 1".into());
        }
        if f.local_epochs == 0 {
            return fail("local_epochs", "must be at least 1".into());
        }
        if !(f.fraction > 0.0 && f.fraction <= 1.0) {
            return fail("fraction", "must lie in (0, 1]".into());
        }
        if self.eval.n_test == 0 {
            return Err(Error::config("eval.n_test", 0, "must be at least 1"));
        }
        if self.world.n_new == 0 {
            return Err(Error::config("world.n_new", 0, "must be at least 1"));
        }
        Ok(())
    }

    pub fn derived_seed(&self, stream: u64) -> u64 {
        seed::hash64(&[self.master_seed, stream])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::parse("", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.translator.d_model, 32);
        assert_eq!(cfg.federation.classes_per_client, 10);
        assert_eq!(cfg.optimizer.temperature, 0.01);
        assert_eq!(cfg.world.d, 32);
    }

    #[test]
    fn documented_defaults_match_struct_defaults() {
        let mut cfg = ExperimentConfig::default();
        for k in KEYS {
            cfg.set(k.key, k.default, 1).unwrap();
        }
        cfg.sync_derived();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn reference_rate_and_large_client_load() {
        let cfg = ExperimentConfig::parse("optimizer.lr0=0.003\n", &[]).unwrap();
        assert_eq!(cfg.optimizer.lr0, 0.003);
        let cfg = ExperimentConfig::parse(
            "federation.classes_per_client=20\nfederation.shots=8\nfederation.n_clients=3\n",
            &[],
        )
        .unwrap();
        assert_eq!(cfg.federation.classes_per_client, 20);
        assert_eq!(cfg.federation.shots, 8);
    }

    #[test]
    fn errors_name_key_and_line() {
        let err = ExperimentConfig::parse("# c\n\noptimizer.lr=1\n", &[]).unwrap_err();
        match err {
            Error::Config { key, line, .. } => {
                assert_eq!(key, "optimizer.lr");
                assert_eq!(line, 3);
            }
            other => panic!("{other:?}"),
        }
        let err = ExperimentConfig::parse("federation.rounds = ten\n", &[]).unwrap_err();
        assert!(err.to_string().contains("federation.rounds"));
        assert!(ExperimentConfig::parse("federation.rounds = 2\nfederation.rounds = 3\n", &[]).is_err());
        assert!(ExperimentConfig::parse("no equals sign\n", &[]).is_err());
    }

    #[test]
    fn overrides_apply_after_file() {
        let cfg = ExperimentConfig::parse("federation.rounds = 5\n", &["federation.rounds=7".into()]).unwrap();
        assert_eq!(cfg.federation.rounds, 7);
        assert!(ExperimentConfig::parse("", &["bogus=1".into()]).is_err());
    }

    #[test]
    fn invariant_violations_rejected() {
        assert!(ExperimentConfig::parse("federation.n_clients = 7\n", &[]).is_err());
        assert!(ExperimentConfig::parse("translator.n_heads = 5\n", &[]).is_err());
        assert!(ExperimentConfig::parse("optimizer.momentum = 1.0\n", &[]).is_err());
        assert!(ExperimentConfig::parse("federation.fraction = 0\n", &[]).is_err());
        assert!(ExperimentConfig::parse("translator.kv_len = 2\n", &[]).is_err());
    }

    #[test]
    fn text_form_round_trips() {
        let cfg = ExperimentConfig::parse(
            "optimizer.lr0 = 0.1234567890123\nworld.sigma_img = 0.3\nmaster_seed = 99\n",
            &[],
        )
        .unwrap();
        let back = ExperimentConfig::parse(&cfg.to_text(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn master_seed_drives_world_seed() {
        let a = ExperimentConfig::parse("master_seed = 3\n", &[]).unwrap();
        let b = ExperimentConfig::parse("master_seed = 4\n", &[]).unwrap();
        assert_ne!(a.world.seed, b.world.seed);
    }
}
