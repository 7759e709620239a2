//! Flat key=value run configuration.
//!
//! Resolution order: built-in defaults, then the `--config` file top to
//! bottom, then each `--set key=value` in order, then the dedicated flags.
//! Unknown keys and unparsable values are usage errors. The resolved
//! configuration is echoed, key-sorted, to stdout and into every output
//! directory, so a run can always be reproduced from its artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use vlamcap::encoder::EncoderConfig;
use vlamcap::training::TrainConfig;

use crate::CliError;

/// One value type per configuration key.
trait ConfigValue: Sized {
    fn parse_value(key: &str, raw: &str) -> Result<Self, CliError>;
    fn render(&self) -> String;
}

macro_rules! numeric_config_value {
    ($($ty:ty),+) => {
        $(impl ConfigValue for $ty {
            fn parse_value(key: &str, raw: &str) -> Result<Self, CliError> {
                raw.parse().map_err(|_| {
                    CliError::Usage(format!(
                        "key {key:?}: expected {}, got {raw:?}",
                        stringify!($ty)
                    ))
                })
            }
            fn render(&self) -> String {
                self.to_string()
            }
        })+
    };
}

numeric_config_value!(usize, u64, f64);

impl ConfigValue for bool {
    fn parse_value(key: &str, raw: &str) -> Result<Self, CliError> {
        match raw {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(CliError::Usage(format!(
                "key {key:?}: expected true or false, got {raw:?}"
            ))),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse_value(_key: &str, raw: &str) -> Result<Self, CliError> {
        Ok(raw.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for PathBuf {
    fn parse_value(_key: &str, raw: &str) -> Result<Self, CliError> {
        Ok(PathBuf::from(raw))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

/// Declares the full key set once: struct fields, defaults, the setter's
/// key dispatch, and the echo listing all come from this table.
macro_rules! config_keys {
    ($($field:ident: $ty:ty = $default:expr;)+) => {
        /// Every setting any command reads, in one flat namespace.
        #[derive(Clone, Debug)]
        pub struct RunConfig {
            $(pub $field: $ty,)+
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($field: $default,)+ }
            }
        }

        impl RunConfig {
            /// Applies one key=value pair. Unknown keys are usage errors.
            pub fn set(&mut self, key: &str, raw: &str) -> Result<(), CliError> {
                match key {
                    $(stringify!($field) => {
                        self.$field = ConfigValue::parse_value(key, raw)?;
                        Ok(())
                    })+
                    _ => Err(CliError::Usage(format!(
                        "unknown configuration key {key:?}"
                    ))),
                }
            }

            /// The fully-resolved configuration, one key=value line each,
            /// sorted by key.
            pub fn echo(&self) -> String {
                let mut entries: Vec<(&str, String)> =
                    vec![$((stringify!($field), self.$field.render()),)+];
                entries.sort_by_key(|(k, _)| *k);
                let mut text = String::new();
                for (key, value) in entries {
                    writeln!(text, "{key}={value}").unwrap();
                }
                text
            }
        }
    };
}

config_keys! {
    // Corpus generation.
    corpus: PathBuf = PathBuf::from("corpus");
    canvas: usize = 64;
    distractor_prob: f64 = 0.3;
    train: usize = 2000;
    val: usize = 200;
    test: usize = 200;
    // Architecture.
    patch: usize = EncoderConfig::default().patch;
    backbone_dim: usize = EncoderConfig::default().backbone_dim;
    backbone_layers: usize = EncoderConfig::default().backbone_layers;
    relation_layers: usize = EncoderConfig::default().relation_layers;
    enc_heads: usize = EncoderConfig::default().heads;
    fused_dim: usize = EncoderConfig::default().fused_dim;
    heads: usize = 4;
    max_len: usize = 9;
    use_cls: bool = true;
    use_rel: bool = true;
    use_rgm: bool = true;
    // Training.
    epochs: usize = TrainConfig::default().epochs;
    batch_size: usize = TrainConfig::default().batch_size;
    lr: f64 = TrainConfig::default().lr;
    anneal: f64 = TrainConfig::default().anneal;
    anneal_every: usize = TrainConfig::default().anneal_every;
    clip_norm: f64 = TrainConfig::default().clip_norm;
    seed: u64 = TrainConfig::default().seed;
    // Evaluation and grounding.
    rho: f64 = 0.05;
    oracle: bool = false;
    checkpoint: PathBuf = PathBuf::new();
    image: PathBuf = PathBuf::new();
    groundable: String = String::new();
    // Plumbing.
    out: PathBuf = PathBuf::from("out");
    force: bool = false;
    resume: bool = false;
}

impl RunConfig {
    /// Applies a key=value configuration file: blank lines and `#` comments
    /// skipped, everything else must parse.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.apply_pair(line)
                .map_err(|e| e.prefixed(&format!("{}:{}", path.display(), lineno + 1)))?;
        }
        Ok(())
    }

    /// Applies one `key=value` string, as given to `--set`.
    pub fn apply_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value, got {pair:?}")))?;
        self.set(key.trim(), value.trim())
    }

    /// Cross-key checks that would otherwise surface as panics deep in the
    /// model code.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |msg: String| Err(CliError::Usage(msg));
        if self.patch == 0 {
            return usage("patch must be positive".into());
        }
        if self.enc_heads == 0 || self.backbone_dim % self.enc_heads != 0 {
            return usage(format!(
                "enc_heads {} must divide backbone_dim {}",
                self.enc_heads, self.backbone_dim
            ));
        }
        if self.heads == 0 || self.fused_dim % self.heads != 0 {
            return usage(format!(
                "heads {} must divide fused_dim {}",
                self.heads, self.fused_dim
            ));
        }
        if self.lr <= 0.0 {
            return usage("lr must be positive".into());
        }
        if !(self.anneal > 0.0 && self.anneal <= 1.0) {
            return usage("anneal must lie in (0, 1]".into());
        }
        if self.anneal_every == 0 {
            return usage("anneal_every must be positive".into());
        }
        if self.batch_size == 0 {
            return usage("batch_size must be positive".into());
        }
        if self.max_len == 0 {
            return usage("max_len must be positive".into());
        }
        if !(self.rho.is_finite() && self.rho >= 0.0 && self.rho < 1.0) {
            return usage("rho must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return usage("distractor_prob must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Prints the resolved configuration and writes it into `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<(), CliError> {
        let text = self.echo();
        print!("{text}");
        let path = dir.join("config.txt");
        fs::write(&path, &text)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(())
    }
}
