//! Flat `key = value` run configuration with `#` comments.
//!
//! Learning-rate defaults are tuned for the 64x64 synthetic task. The
//! published large-scale schedule (FRL and attribute stages 1e-4, hint stage
//! 1e-7, fusion 0.1, fine-tuning 0.001, 15 part epochs) ships as
//! `configs/published.conf`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::distill::{DistillConfig, HintStage};
use crate::error::{Error, Result};
use crate::netspec::{presets, NetworkSpec};
use crate::synthgen::{SplitCounts, SyntheticSpec};
use crate::train::SgdConfig;

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr;)*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => self.$key = parse_value(key, value)?,)*
                    _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            /// Every key with its resolved value, one `key = value` per line.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(writeln!(s, "{} = {}", stringify!($key), self.$key).expect("write to string");)*
                s
            }
        }
    };
}

run_config! {
    /// Seed for data generation, initialization and batch order.
    seed: u64 = 1;
    data_dir: String = "data".into();
    /// Stage checkpoints and CSV exports.
    run_dir: String = "run".into();
    image_size: usize = 64;
    n_local: usize = 4;
    n_global: usize = 2;
    /// Branch maps per attribute in the localization net.
    branch_maps: usize = 8;
    /// Part crop side as a fraction of the image side.
    patch_frac: f64 = 2.0 / 7.0;
    train_count: usize = 6000;
    val_count: usize = 1000;
    test_count: usize = 1000;
    teacher_net: String = "frl-desk".into();
    student_net: String = "student-desk".into();
    momentum: f64 = 0.9;
    weight_decay: f64 = 0.0005;
    batch_size: usize = 32;
    hflip: bool = true;
    /// Worker threads for part-subnet training; results do not depend on it.
    threads: usize = 1;
    frl_lr: f64 = 0.05;
    frl_epochs: usize = 10;
    /// Train the auxiliary classification branch jointly with localization.
    mnl: bool = true;
    mnl_hidden: usize = 128;
    hint_lr: f64 = 0.003;
    hint_epochs: usize = 20;
    hint_lambda_hint: f64 = 1.0;
    hint_lambda_attr: f64 = 0.0;
    /// Squared instead of plain Euclidean hint distance.
    hint_squared: bool = false;
    attr_lr: f64 = 0.05;
    attr_epochs: usize = 10;
    attr_lambda_hint: f64 = 0.0;
    attr_lambda_attr: f64 = 1.0;
    part_lr: f64 = 0.02;
    part_epochs: usize = 15;
    fusion_lr: f64 = 0.1;
    /// Upper bound; training stops earlier on a validation plateau.
    fusion_epochs: usize = 30;
    fusion_patience: usize = 3;
    finetune_lr: f64 = 0.001;
    finetune_epochs: usize = 10;
    finetune_patience: usize = 3;
}

impl RunConfig {
    /// Applies `key = value` lines on top of the current values. Unknown and
    /// repeated keys are rejected.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", no + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", no + 1)));
            }
            self.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        self.check()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Applies a single `key=value` override.
    pub fn override_with(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k.trim(), v.trim())?;
        self.check()
    }

    pub fn check(&self) -> Result<()> {
        if !(self.patch_frac > 0.0 && self.patch_frac <= 1.0) {
            return Err(Error::Config(format!("patch_frac must lie in (0, 1], got {}", self.patch_frac)));
        }
        if self.batch_size == 0 || self.threads == 0 {
            return Err(Error::Config("batch_size and threads must be positive".into()));
        }
        if self.attribute_count() == 0 {
            return Err(Error::Config("at least one attribute is required".into()));
        }
        Ok(())
    }

    pub fn attribute_count(&self) -> usize {
        self.n_local + self.n_global
    }

    /// Default correlation structure when the attribute layout is the standard
    /// 4 local + 2 global; otherwise independent attributes at rate 1/2.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let base = SyntheticSpec::default();
        let standard = self.n_local == base.n_local && self.n_global == base.n_global;
        SyntheticSpec {
            image_size: self.image_size,
            n_local: self.n_local,
            n_global: self.n_global,
            rates: if standard { base.rates } else { vec![0.5; self.attribute_count()] },
            rules: if standard { base.rules } else { Vec::new() },
            counts: SplitCounts {
                train: self.train_count,
                val: self.val_count,
                test: self.test_count,
            },
            style: base.style,
        }
    }

    fn net_spec(&self, name: &str) -> Result<NetworkSpec> {
        let spec = presets::by_name(name, self.attribute_count(), self.branch_maps)
            .ok_or_else(|| Error::Config(format!("unknown network `{name}`")))?;
        Ok(spec.with_input((3, self.image_size, self.image_size)))
    }

    pub fn teacher_spec(&self) -> Result<NetworkSpec> {
        self.net_spec(&self.teacher_net)
    }

    pub fn student_spec(&self) -> Result<NetworkSpec> {
        self.net_spec(&self.student_net)
    }

    fn sgd(&self, learning_rate: f64, epochs: usize, salt: u64) -> SgdConfig {
        SgdConfig {
            learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs,
            batch_size: self.batch_size,
            seed: self.seed.wrapping_mul(1_000_003).wrapping_add(salt),
            hflip: self.hflip,
        }
    }

    pub fn frl_sgd(&self) -> SgdConfig {
        self.sgd(self.frl_lr, self.frl_epochs, 1)
    }

    pub fn distill(&self) -> DistillConfig {
        let base = self.sgd(0.0, 0, 2);
        DistillConfig {
            teacher_layer: None,
            student_layer: None,
            stages: vec![
                HintStage {
                    hint_weight: self.hint_lambda_hint,
                    attr_weight: self.hint_lambda_attr,
                    learning_rate: self.hint_lr,
                    epochs: self.hint_epochs,
                },
                HintStage {
                    hint_weight: self.attr_lambda_hint,
                    attr_weight: self.attr_lambda_attr,
                    learning_rate: self.attr_lr,
                    epochs: self.attr_epochs,
                },
            ],
            squared: self.hint_squared,
            momentum: base.momentum,
            weight_decay: base.weight_decay,
            batch_size: base.batch_size,
            seed: base.seed,
            hflip: base.hflip,
        }
    }

    pub fn part_sgd(&self) -> SgdConfig {
        self.sgd(self.part_lr, self.part_epochs, 3)
    }

    pub fn fusion_sgd(&self) -> SgdConfig {
        self.sgd(self.fusion_lr, self.fusion_epochs, 4)
    }

    pub fn finetune_sgd(&self) -> SgdConfig {
        self.sgd(self.finetune_lr, self.finetune_epochs, 5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_unknown_keys() {
        let cfg = RunConfig::parse("# comment\nseed = 7  # trailing\n\nfrl_lr=0.001\nmnl = false\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.frl_lr, 0.001);
        assert!(!cfg.mnl);
        assert!(RunConfig::parse("bogus = 1").unwrap_err().to_string().contains("bogus"));
        assert!(RunConfig::parse("seed = x").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed").is_err());
        assert!(RunConfig::parse("patch_frac = 0").is_err());
    }

    #[test]
    fn resolved_text_reads_back_identically() {
        let mut cfg = RunConfig::default();
        cfg.override_with("patch_frac=0.123456789012345").unwrap();
        cfg.override_with("run_dir = out/x").unwrap();
        let text = cfg.to_text();
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn shipped_published_schedule_parses() {
        let cfg = RunConfig::parse(include_str!("../../../configs/published.conf")).unwrap();
        assert_eq!((cfg.frl_lr, cfg.attr_lr, cfg.hint_lr), (1e-4, 1e-4, 1e-7));
        assert_eq!((cfg.fusion_lr, cfg.finetune_lr, cfg.batch_size), (0.1, 0.001, 128));
    }

    #[test]
    fn derived_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.synthetic_spec(), SyntheticSpec::default());
        let t = cfg.teacher_spec().unwrap();
        assert_eq!(t.attribute_count * t.branch_maps, 48);
        let d = cfg.distill();
        assert_eq!((d.stages[0].hint_weight, d.stages[0].attr_weight), (1.0, 0.0));
        assert_eq!((d.stages[1].hint_weight, d.stages[1].attr_weight), (0.0, 1.0));
        let mut odd = cfg.clone();
        odd.n_global = 1;
        odd.synthetic_spec().validate().unwrap();
    }
}
