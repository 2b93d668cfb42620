//! Flat `section.key = value` configuration with a registered schema.
//!
//! Every key has a type, a range and a default. Values are validated when
//! set and stored in canonical text form, so [`Config::render`] prints a
//! document that parses back to the same configuration.

use std::collections::BTreeMap;
use std::path::PathBuf;

use unisiam_core::data::{AugmentLevel, Split, WorldParams};
use unisiam_core::diagnostics::Source;
use unisiam_core::fewshot::{EpisodeSpec, ProbeConfig};
use unisiam_core::losses::{LossConfig, NegPolicy};
use unisiam_core::mi::{self, MiConfig};
use unisiam_core::trainer::{Regime, TrainConfig};

use crate::error::{CliError, Result};

/// Environment variable consulted for `run.seed` when nothing else sets it.
pub const SEED_ENV: &str = "UNISIAM_SEED";

#[derive(Clone, Copy, Debug)]
enum Kind {
    Int { min: u64, max: u64 },
    Real { min: f64, max: f64, open_min: bool, open_max: bool },
    Bool,
    Choice(&'static [&'static str]),
    /// Comma-separated positive integers.
    Widths { len: Option<usize> },
    /// `start:stop:step` or a single number.
    Grid,
    /// `auto` or a non-negative real.
    AutoReal,
    /// Free text, possibly empty (paths).
    Text,
}

struct Key {
    name: &'static str,
    kind: Kind,
    default: &'static str,
}

const fn int(name: &'static str, min: u64, max: u64, default: &'static str) -> Key {
    Key { name, kind: Kind::Int { min, max }, default }
}

const fn real(name: &'static str, min: f64, max: f64, default: &'static str) -> Key {
    Key { name, kind: Kind::Real { min, max, open_min: false, open_max: false }, default }
}

const fn positive(name: &'static str, default: &'static str) -> Key {
    Key { name, kind: Kind::Real { min: 0.0, max: f64::INFINITY, open_min: true, open_max: true }, default }
}

const fn choice(name: &'static str, options: &'static [&'static str], default: &'static str) -> Key {
    Key { name, kind: Kind::Choice(options), default }
}

const fn text(name: &'static str, default: &'static str) -> Key {
    Key { name, kind: Kind::Text, default }
}

const BIG: u64 = u32::MAX as u64;
const SPLITS: &[&str] = &["train", "val", "test"];

const SCHEMA: &[Key] = &[
    int("run.seed", 0, u64::MAX, "0"),
    int("run.workers", 1, 1024, "1"),
    int("world.seed", 0, u64::MAX, "0"),
    int("world.classes", 6, 100_000, "20"),
    int("world.per_class", 1, BIG, "200"),
    int("world.dim", 1, 1 << 20, "64"),
    int("world.latent", 1, 1 << 20, "8"),
    real("world.nuisance", 0.0, f64::INFINITY, "0.1"),
    real("world.latent_noise", 0.0, f64::INFINITY, "0.6"),
    real("world.signal_scale", 0.0, f64::INFINITY, "0.15"),
    int("world.n_way", 2, BIG, "5"),
    Key { name: "world.split", kind: Kind::Widths { len: Some(3) }, default: "10,5,5" },
    choice("train.regime", &["unisiam", "simsiam", "nce", "mine", "supervised", "distill"], "unisiam"),
    int("train.epochs", 1, BIG, "100"),
    int("train.batch", 2, BIG, "64"),
    real("train.lr", 0.0, f64::INFINITY, "0.05"),
    real("train.weight_decay", 0.0, f64::INFINITY, "0.0001"),
    choice("train.augment", &["identity", "simple", "default", "strong"], "default"),
    int("train.eval_every", 0, BIG, "10"),
    Key { name: "train.hidden", kind: Kind::Widths { len: None }, default: "256,256" },
    int("train.embed", 1, BIG, "128"),
    int("train.rank_samples", 2, BIG, "512"),
    Key { name: "train.monitor_sg", kind: Kind::Bool, default: "false" },
    text("train.out", "run"),
    text("train.teacher", ""),
    positive("loss.tau", "2"),
    real("loss.lambda", 0.0, f64::INFINITY, "0.1"),
    real("loss.alpha", 0.0, 1.0, "0.5"),
    choice("loss.neg", &["self-and-positive", "self"], "self-and-positive"),
    choice("eval.split", SPLITS, "test"),
    int("eval.nway", 2, BIG, "5"),
    int("eval.kshot", 1, BIG, "5"),
    int("eval.queries", 1, BIG, "15"),
    int("eval.episodes", 1, BIG, "3000"),
    Key { name: "eval.power", kind: Kind::Real { min: 0.0, max: 1.0, open_min: true, open_max: false }, default: "0.5" },
    Key { name: "eval.reg", kind: Kind::AutoReal, default: "auto" },
    int("eval.max_iter", 1, BIG, "1000"),
    positive("eval.tol", "0.000001"),
    Key { name: "eval.shuffled", kind: Kind::Bool, default: "false" },
    text("eval.ckpt", ""),
    text("eval.data", ""),
    text("eval.out", "episodes.csv"),
    int("mi.dim", 1, BIG, "16"),
    Key { name: "mi.rho", kind: Kind::Grid, default: "0:0.9:0.1" },
    int("mi.seeds", 1, BIG, "1"),
    int("mi.batch", 2, BIG, "64"),
    int("mi.steps", 1, BIG, "3000"),
    real("mi.lr", 0.0, f64::INFINITY, "0.003"),
    Key { name: "mi.ema_decay", kind: Kind::Real { min: 0.0, max: 1.0, open_min: false, open_max: true }, default: "0" },
    real("mi.clip", 0.0, f64::INFINITY, "1"),
    int("mi.eval_batches", 1, BIG, "100"),
    Key { name: "mi.hidden", kind: Kind::Widths { len: None }, default: "256,256" },
    text("mi.out", "mi_bench.csv"),
    text("mi.svg", ""),
    text("diag.ckpt", ""),
    choice("diag.source", &["backbone", "projection"], "projection"),
    choice("diag.split", SPLITS, "test"),
    int("diag.samples", 0, BIG, "0"),
    text("diag.out", "spectrum.csv"),
    text("diag.svg", ""),
    choice("gen.split", &["all", "train", "val", "test"], "all"),
    Key { name: "gen.labels", kind: Kind::Bool, default: "true" },
    text("gen.out", "data.fsds"),
];

fn lookup(name: &str) -> Option<&'static Key> {
    SCHEMA.iter().find(|k| k.name == name)
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{} = {:?}: {}", key, value, why))
}

/// Validate `value` for `key` and return its canonical text.
fn canonical(key: &Key, value: &str) -> Result<String> {
    let v = value.trim();
    match key.kind {
        Kind::Int { min, max } => {
            let n: u64 = v.parse().map_err(|_| bad(key.name, v, "expected a non-negative integer"))?;
            if n < min || n > max {
                return Err(bad(key.name, v, format!("must lie in [{}, {}]", min, max)));
            }
            Ok(n.to_string())
        }
        Kind::Real { min, max, open_min, open_max } => {
            let x: f64 = v.parse().map_err(|_| bad(key.name, v, "expected a number"))?;
            let below = if open_min { x <= min } else { x < min };
            let above = if open_max { x >= max } else { x > max };
            if !x.is_finite() || below || above {
                let (l, r) = (if open_min { "(" } else { "[" }, if open_max { ")" } else { "]" });
                return Err(bad(key.name, v, format!("must be finite and lie in {}{}, {}{}", l, min, max, r)));
            }
            Ok(x.to_string())
        }
        Kind::Bool => match v {
            "true" | "1" | "yes" => Ok("true".into()),
            "false" | "0" | "no" => Ok("false".into()),
            _ => Err(bad(key.name, v, "expected true or false")),
        },
        Kind::Choice(options) => {
            if options.contains(&v) {
                Ok(v.to_string())
            } else {
                Err(bad(key.name, v, format!("expected one of {}", options.join(", "))))
            }
        }
        Kind::Widths { len } => {
            let parts = v
                .split(',')
                .map(|p| p.trim().parse::<usize>().ok().filter(|&n| n > 0))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad(key.name, v, "expected comma-separated positive integers"))?;
            if let Some(n) = len {
                if parts.len() != n {
                    return Err(bad(key.name, v, format!("expected {} entries", n)));
                }
            }
            Ok(parts.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(","))
        }
        Kind::Grid => {
            mi::parse_grid(v).map_err(|e| bad(key.name, v, e))?;
            Ok(v.to_string())
        }
        Kind::AutoReal => {
            if v == "auto" {
                return Ok(v.into());
            }
            match v.parse::<f64>() {
                Ok(x) if x >= 0.0 && x.is_finite() => Ok(x.to_string()),
                _ => Err(bad(key.name, v, "expected auto or a non-negative number")),
            }
        }
        Kind::Text => Ok(v.to_string()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

impl Config {
    /// Schema defaults, with `run.seed` taken from `UNISIAM_SEED` if set.
    pub fn defaults() -> Result<Self> {
        let mut values = BTreeMap::new();
        for k in SCHEMA {
            values.insert(k.name, k.default.to_string());
        }
        let mut cfg = Self { values };
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.set("run.seed", &seed).map_err(|e| CliError::Config(format!("{} {}", SEED_ENV, e)))?;
        }
        Ok(cfg)
    }

    /// Set one key; unknown keys and invalid values are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let def = lookup(key.trim()).ok_or_else(|| CliError::Config(format!("unknown key {:?}", key.trim())))?;
        let v = canonical(def, value)?;
        self.values.insert(def.name, v);
        Ok(())
    }

    /// Apply a document of `section.key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `section.key = value`, got {:?}", n + 1, raw)))?;
            self.set(k, v).map_err(|e| match e {
                CliError::Config(m) => CliError::Config(format!("line {}: {}", n + 1, m)),
                e => e,
            })?;
        }
        Ok(())
    }

    /// `KEY=VALUE` override from the command line.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {:?} must look like section.key=value", assignment)))?;
        self.set(k, v)
    }

    /// All keys in schema order, one `key = value` line each.
    pub fn render(&self) -> String {
        SCHEMA.iter().map(|k| format!("{} = {}\n", k.name, self.values[k.name])).collect()
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("{} is not a registered key", key))
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.raw(key).parse().expect("validated integer")
    }

    pub fn usize(&self, key: &str) -> usize {
        self.u64(key) as usize
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.raw(key).parse().expect("validated number")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.raw(key) == "true"
    }

    pub fn str(&self, key: &str) -> &str {
        self.raw(key)
    }

    pub fn widths(&self, key: &str) -> Vec<usize> {
        self.raw(key).split(',').map(|p| p.parse().expect("validated widths")).collect()
    }

    /// Empty text means unset.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        Some(self.raw(key)).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    pub fn seed(&self) -> u64 {
        self.u64("run.seed")
    }

    pub fn world(&self) -> Result<WorldParams> {
        let split = self.widths("world.split");
        let p = WorldParams {
            classes: self.usize("world.classes"),
            per_class: self.usize("world.per_class"),
            dim: self.usize("world.dim"),
            latent: self.usize("world.latent"),
            nuisance: self.f64("world.nuisance"),
            latent_noise: self.f64("world.latent_noise"),
            signal_scale: self.f64("world.signal_scale"),
            n_way: self.usize("world.n_way"),
            split: [split[0], split[1], split[2]],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau: self.f64("loss.tau"),
            lambda: self.f64("loss.lambda"),
            alpha: self.f64("loss.alpha"),
            neg: match self.str("loss.neg") {
                "self" => NegPolicy::ExcludeSelfOnly,
                _ => NegPolicy::ExcludeSelfAndPositive,
            },
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            regime: Regime::parse(self.str("train.regime")).expect("validated regime"),
            epochs: self.usize("train.epochs"),
            batch: self.usize("train.batch"),
            loss: self.loss(),
            lr: self.f64("train.lr"),
            weight_decay: self.f64("train.weight_decay"),
            seed: self.seed(),
            augment: AugmentLevel::parse(self.str("train.augment")).expect("validated level"),
            eval_every: self.usize("train.eval_every"),
            hidden: self.widths("train.hidden"),
            embed: self.usize("train.embed"),
            rank_samples: self.usize("train.rank_samples"),
            monitor_sg: self.bool("train.monitor_sg"),
        }
    }

    pub fn episodes(&self) -> EpisodeSpec {
        EpisodeSpec {
            n_way: self.usize("eval.nway"),
            k_shot: self.usize("eval.kshot"),
            queries: self.usize("eval.queries"),
            episodes: self.usize("eval.episodes"),
            seed: self.seed(),
        }
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            power: self.f64("eval.power"),
            reg: match self.str("eval.reg") {
                "auto" => None,
                v => Some(v.parse().expect("validated reg")),
            },
            max_iter: self.usize("eval.max_iter"),
            tol: self.f64("eval.tol"),
        }
    }

    pub fn mi(&self) -> MiConfig {
        MiConfig {
            dim: self.usize("mi.dim"),
            batch: self.usize("mi.batch"),
            steps: self.usize("mi.steps"),
            lr: self.f64("mi.lr"),
            ema_decay: self.f64("mi.ema_decay"),
            clip: self.f64("mi.clip"),
            eval_batches: self.usize("mi.eval_batches"),
            hidden: self.widths("mi.hidden"),
        }
    }

    pub fn mi_grid(&self) -> Vec<f64> {
        mi::parse_grid(self.str("mi.rho")).expect("validated grid")
    }

    /// `mi.seeds` consecutive seeds starting at `run.seed`.
    pub fn mi_seeds(&self) -> Vec<u64> {
        let s = self.seed();
        (0..self.u64("mi.seeds")).map(|i| s.wrapping_add(i)).collect()
    }

    pub fn split(&self, key: &str) -> Split {
        match self.str(key) {
            "train" => Split::Train,
            "val" => Split::Val,
            _ => Split::Test,
        }
    }

    pub fn source(&self) -> Source {
        Source::parse(self.str("diag.source")).expect("validated source")
    }
}
