//! Run configuration: a flat `key = value` text format plus validation.
//!
//! Defaults are sized for the synthetic benchmark: the similarity threshold
//! and loss weight carry over from the reference setting, while the
//! dictionary capacity is rescaled to 512 because a 16x16 feature map
//! yields at most 256 vectors per class per image.
//!
//! Every key can be overridden on the command line with `--set key=value`;
//! overrides go through the same parser as the file, and validation runs
//! once afterwards so conflicting combinations fail before any training.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Io(String),
    Parse { line: usize, message: String },
    UnknownKey(String),
    BadValue { key: String, message: String },
    Conflict(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(m) => write!(f, "io error: {m}"),
            ConfigError::Parse { line, message } => write!(f, "line {line}: {message}"),
            ConfigError::UnknownKey(k) => write!(f, "unknown config key {k:?}"),
            ConfigError::BadValue { key, message } => write!(f, "key {key:?}: {message}"),
            ConfigError::Conflict(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// The six training variants of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Ours,
    NoDictionary,
    NoSplit,
    WithAdversarial,
    OnlySsl,
    SslAdversarial,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Ours,
        Variant::NoDictionary,
        Variant::NoSplit,
        Variant::WithAdversarial,
        Variant::OnlySsl,
        Variant::SslAdversarial,
    ];

    /// Key used in config files and CLI flags.
    pub fn key(&self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::NoDictionary => "no_dict",
            Variant::NoSplit => "no_split",
            Variant::WithAdversarial => "with_adv",
            Variant::OnlySsl => "only_ssl",
            Variant::SslAdversarial => "ssl_adv",
        }
    }

    /// Row label used in report tables.
    pub fn display_name(&self) -> &'static str {
        match self {
            Variant::Ours => "Ours",
            Variant::NoDictionary => "w/o Dictionary",
            Variant::NoSplit => "w/o Class-wise Split",
            Variant::WithAdversarial => "with Adversarial",
            Variant::OnlySsl => "only SSL",
            Variant::SslAdversarial => "SSL with Adversarial",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.iter().copied().find(|v| v.key() == s)
    }

    /// Whether this variant trains a discriminator.
    pub fn adversarial(&self) -> bool {
        matches!(self, Variant::WithAdversarial | Variant::SslAdversarial)
    }

    /// Whether this variant uses the alignment loss at all.
    pub fn uses_cosine(&self) -> bool {
        !matches!(self, Variant::OnlySsl | Variant::SslAdversarial)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Everything one training run needs. See the field list in
/// [`RunConfig::apply`] for the config-file keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub stage: u8,
    pub variant: Variant,
    pub seed: u64,
    pub classes: usize,
    pub feature_dim: usize,
    /// Similarity threshold: only pairs above it are pulled toward 1.
    pub t_cos: f64,
    /// Per-class dictionary capacity.
    pub dict_size: usize,
    pub lambda_cos: f64,
    pub lambda_adv: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub power: f64,
    pub max_iter: usize,
    pub eval_every: usize,
    pub multi_layer: bool,
    /// Ablation flag: enqueue source features after computing the loss
    /// instead of before it.
    pub enqueue_after_loss: bool,
    /// Dataset root containing `train.manifest` and `eval.manifest`.
    pub data: PathBuf,
    /// Output directory for metrics, logs, and the final checkpoint.
    pub out: PathBuf,
    /// Stage-1 checkpoint to start stage 2 from (also used by `eval`).
    pub checkpoint: PathBuf,
    /// Directory of harvested label maps plus `thresholds.txt` (stage 2).
    pub pseudo_dir: PathBuf,

    /// Keys that were explicitly set by file or command line.
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stage: 1,
            variant: Variant::Ours,
            seed: 1,
            classes: 5,
            feature_dim: 32,
            t_cos: 0.6,
            dict_size: 512,
            lambda_cos: 0.01,
            lambda_adv: 0.001,
            lr: 2.5e-4,
            weight_decay: 5e-4,
            momentum: 0.9,
            power: 0.9,
            max_iter: 5000,
            eval_every: 250,
            multi_layer: false,
            enqueue_after_loss: false,
            data: PathBuf::from("data"),
            out: PathBuf::from("runs/run"),
            checkpoint: PathBuf::new(),
            pseudo_dir: PathBuf::new(),
            explicit: BTreeSet::new(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        message: format!("cannot parse {value:?}"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            message: format!("expected a boolean, got {value:?}"),
        }),
    }
}

impl RunConfig {
    /// Set one key. Returns an error for unknown keys or unparsable values.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "stage" => self.stage = parse_num(key, value)?,
            "variant" => {
                self.variant = Variant::parse(value).ok_or_else(|| ConfigError::BadValue {
                    key: key.into(),
                    message: format!(
                        "unknown variant {value:?}; expected one of {}",
                        Variant::ALL.map(|v| v.key()).join(", ")
                    ),
                })?
            }
            "seed" => self.seed = parse_num(key, value)?,
            "classes" => self.classes = parse_num(key, value)?,
            "feature_dim" => self.feature_dim = parse_num(key, value)?,
            "t_cos" => self.t_cos = parse_num(key, value)?,
            "dict_size" => self.dict_size = parse_num(key, value)?,
            "lambda_cos" => self.lambda_cos = parse_num(key, value)?,
            "lambda_adv" => self.lambda_adv = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "power" => self.power = parse_num(key, value)?,
            "max_iter" => self.max_iter = parse_num(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "multi_layer" => self.multi_layer = parse_bool(key, value)?,
            "enqueue_after_loss" => self.enqueue_after_loss = parse_bool(key, value)?,
            "data" => self.data = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "pseudo_dir" => self.pseudo_dir = PathBuf::from(value),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Parse a flat `key = value` file body (`#` comments, blank lines ok).
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or(ConfigError::Parse {
                line,
                message: "expected key = value".into(),
            })?;
            self.apply(key.trim(), value.trim()).map_err(|e| match e {
                ConfigError::Parse { .. } => e,
                other => ConfigError::Parse {
                    line,
                    message: other.to_string(),
                },
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Apply `key=value` override strings (the `--set` flag).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for o in overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| ConfigError::BadValue {
                key: o.clone(),
                message: "override must look like key=value".into(),
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn was_set(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Clone this config with a different variant, dropping any explicit
    /// settings the new variant forbids or overrides so the result always
    /// validates. Used when one template fans out into an ablation suite.
    pub fn with_variant(&self, variant: Variant) -> RunConfig {
        let mut cfg = self.clone();
        cfg.variant = variant;
        cfg.explicit.insert("variant".to_string());
        if variant == Variant::NoDictionary {
            cfg.explicit.remove("dict_size");
        }
        if !variant.uses_cosine() {
            cfg.explicit.remove("lambda_cos");
            cfg.lambda_cos = 0.0;
        }
        cfg
    }

    /// Check cross-field invariants, normalizing where a variant's
    /// definition dictates a value (`only_ssl` and `ssl_adv` run without
    /// the alignment loss, so their weight is forced to zero).
    pub fn validate(&mut self) -> Result<(), ConfigError> {
        if self.stage != 1 && self.stage != 2 {
            return Err(ConfigError::BadValue {
                key: "stage".into(),
                message: format!("must be 1 or 2, got {}", self.stage),
            });
        }
        if !(-1.0..=1.0).contains(&self.t_cos) || self.t_cos.abs() == 1.0 {
            return Err(ConfigError::BadValue {
                key: "t_cos".into(),
                message: format!("must lie strictly inside (-1, 1), got {}", self.t_cos),
            });
        }
        if self.dict_size == 0 {
            return Err(ConfigError::BadValue {
                key: "dict_size".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.lambda_cos < 0.0 || self.lambda_adv < 0.0 {
            return Err(ConfigError::BadValue {
                key: "lambda_cos/lambda_adv".into(),
                message: "loss weights must be non-negative".into(),
            });
        }
        if self.max_iter == 0 || self.eval_every == 0 {
            return Err(ConfigError::BadValue {
                key: "max_iter/eval_every".into(),
                message: "must be positive".into(),
            });
        }
        if self.classes < 2 {
            return Err(ConfigError::BadValue {
                key: "classes".into(),
                message: "need at least 2 classes".into(),
            });
        }
        if self.variant == Variant::NoDictionary && self.was_set("dict_size") {
            return Err(ConfigError::Conflict(
                "variant no_dict manages its own capacity; dict_size cannot be overridden"
                    .into(),
            ));
        }
        if !self.variant.uses_cosine() {
            if self.was_set("lambda_cos") && self.lambda_cos != 0.0 {
                return Err(ConfigError::Conflict(format!(
                    "variant {} runs without the alignment loss; lambda_cos must stay 0",
                    self.variant
                )));
            }
            self.lambda_cos = 0.0;
        }
        Ok(())
    }

    /// Serialize in config-file syntax (all keys, current values).
    pub fn encode(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("stage", self.stage.to_string());
        kv("variant", self.variant.key().to_string());
        kv("seed", self.seed.to_string());
        kv("classes", self.classes.to_string());
        kv("feature_dim", self.feature_dim.to_string());
        kv("t_cos", self.t_cos.to_string());
        kv("dict_size", self.dict_size.to_string());
        kv("lambda_cos", self.lambda_cos.to_string());
        kv("lambda_adv", self.lambda_adv.to_string());
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("momentum", self.momentum.to_string());
        kv("power", self.power.to_string());
        kv("max_iter", self.max_iter.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("multi_layer", self.multi_layer.to_string());
        kv("enqueue_after_loss", self.enqueue_after_loss.to_string());
        kv("data", self.data.display().to_string());
        kv("out", self.out.display().to_string());
        kv("checkpoint", self.checkpoint.display().to_string());
        kv("pseudo_dir", self.pseudo_dir.display().to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.t_cos, 0.6);
        assert_eq!(cfg.dict_size, 512);
        assert_eq!(cfg.lambda_cos, 0.01);
        assert_eq!(cfg.max_iter, 5000);
    }

    #[test]
    fn file_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("t_cos = 0.4\nseed = 7 # trailing comment\n\n# full comment\n")
            .unwrap();
        assert_eq!(cfg.t_cos, 0.4);
        assert_eq!(cfg.seed, 7);
        assert!(cfg.was_set("t_cos"));
        assert!(!cfg.was_set("lr"));

        let mut back = RunConfig::default();
        back.apply_text(&cfg.encode()).unwrap();
        assert_eq!(back.t_cos, 0.4);
        assert_eq!(back.seed, 7);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let mut cfg = RunConfig::default();
        match cfg.apply_text("seed = 1\nnot a pair\n") {
            Err(ConfigError::Parse { line: 2, .. }) => {}
            other => panic!("expected line-2 parse error, got {other:?}"),
        }
        match cfg.apply_text("mystery = 4\n") {
            Err(ConfigError::Parse { line: 1, message }) => {
                assert!(message.contains("mystery"))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["lr=0.001".into(), "lr=0.002".into()]).unwrap();
        assert_eq!(cfg.lr, 0.002);
        assert!(cfg.apply_overrides(&["oops".into()]).is_err());
    }

    #[test]
    fn variant_table_is_stable() {
        assert_eq!(Variant::parse("no_split"), Some(Variant::NoSplit));
        assert_eq!(Variant::NoSplit.display_name(), "w/o Class-wise Split");
        assert_eq!(Variant::parse("nope"), None);
        assert!(Variant::WithAdversarial.adversarial());
        assert!(!Variant::OnlySsl.uses_cosine());
        assert!(Variant::SslAdversarial.adversarial());
        assert_eq!(Variant::ALL.len(), 6);
    }

    #[test]
    fn threshold_bounds_are_enforced() {
        let mut cfg = RunConfig::default();
        cfg.apply("t_cos", "1.0").unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::BadValue { .. })));
        cfg.apply("t_cos", "-0.9").unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn no_dict_rejects_capacity_override() {
        let mut cfg = RunConfig::default();
        cfg.apply("variant", "no_dict").unwrap();
        cfg.validate().unwrap();

        let mut cfg = RunConfig::default();
        cfg.apply("variant", "no_dict").unwrap();
        cfg.apply("dict_size", "64").unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::Conflict(_))));
    }

    #[test]
    fn ssl_variants_force_zero_cosine_weight() {
        let mut cfg = RunConfig::default();
        cfg.apply("variant", "only_ssl").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.lambda_cos, 0.0);

        let mut cfg = RunConfig::default();
        cfg.apply("variant", "only_ssl").unwrap();
        cfg.apply("lambda_cos", "0.5").unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::Conflict(_))));
    }
}
