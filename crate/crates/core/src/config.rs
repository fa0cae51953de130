//! Run configuration: a line-based `key = value` file with `#` comments.
//!
//! Every key has a default except the feature paths. [`RunConfig::to_text`]
//! emits the fully resolved configuration, which parses back to the same
//! value.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::discretize::{DiscretizeKind, DiscretizeSpec};
use crate::error::{Error, Result};
use crate::loss::LossSpec;
use crate::netcore::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub discretize: DiscretizeSpec,
    pub loss: LossSpec,
    pub train: TrainConfig,
    pub train_features: Option<PathBuf>,
    pub eval_features: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            discretize: DiscretizeSpec::default(),
            loss: LossSpec::default(),
            train: TrainConfig::default(),
            train_features: None,
            eval_features: None,
            out_dir: PathBuf::from("run"),
        }
    }
}

type Setter = fn(&mut RunConfig, &str) -> std::result::Result<(), String>;
type Getter = fn(&RunConfig) -> String;

struct Key {
    name: &'static str,
    set: Setter,
    get: Getter,
}

fn any<T>(_: &T) -> std::result::Result<(), String> {
    Ok(())
}

fn positive_int(x: &usize) -> std::result::Result<(), String> {
    if *x >= 1 {
        Ok(())
    } else {
        Err("must be at least 1".into())
    }
}

fn at_least_two(x: &usize) -> std::result::Result<(), String> {
    if *x >= 2 {
        Ok(())
    } else {
        Err("must be at least 2".into())
    }
}

fn power_of_two(x: &usize) -> std::result::Result<(), String> {
    if x.is_power_of_two() {
        Ok(())
    } else {
        Err("power of two required".into())
    }
}

fn positive(x: &f64) -> std::result::Result<(), String> {
    if *x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err("must be positive".into())
    }
}

fn non_negative(x: &f64) -> std::result::Result<(), String> {
    if *x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err("must be non-negative".into())
    }
}

fn unit(x: &f64) -> std::result::Result<(), String> {
    if (0.0..=1.0).contains(x) {
        Ok(())
    } else {
        Err("must lie in [0, 1]".into())
    }
}

fn unit_open(x: &f64) -> std::result::Result<(), String> {
    if (0.0..1.0).contains(x) {
        Ok(())
    } else {
        Err("must lie in [0, 1)".into())
    }
}

macro_rules! key {
    ($name:literal, $($f:ident).+, $check:expr) => {
        Key {
            name: $name,
            set: |c, v| {
                let x = v.parse().map_err(|e| format!("cannot parse {v:?}: {e}"))?;
                ($check)(&x)?;
                c.$($f).+ = x;
                Ok(())
            },
            get: |c| c.$($f).+.to_string(),
        }
    };
}

fn opt_path(v: &str) -> Option<PathBuf> {
    if v.is_empty() {
        None
    } else {
        Some(PathBuf::from(v))
    }
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn keys() -> Vec<Key> {
    vec![
        key!("vocab_size", model.vocab_size, at_least_two),
        key!("seq_len", model.seq_len, power_of_two),
        key!("d_model", model.d_model, positive_int),
        key!("n_heads", model.n_heads, positive_int),
        key!("dec_depth", model.dec_depth, positive_int),
        key!("enc_depth", model.enc_depth, any),
        key!("proj_hidden", model.proj_hidden, any),
        key!("proj_bottleneck", model.proj_bottleneck, positive_int),
        key!("n_prototypes", model.n_prototypes, at_least_two),
        key!("d_t", model.d_t, positive_int),
        key!("discretize", discretize.kind, any),
        key!("tau_start", discretize.tau_start, positive),
        key!("tau_end", discretize.tau_end, positive),
        key!("tau_schedule", discretize.schedule, any),
        key!("st_hard", discretize.st_hard, any),
        key!("vq_beta", discretize.vq_beta, non_negative),
        key!("strategy", loss.strategy, any),
        key!("alpha", loss.alpha, non_negative),
        key!("beta", loss.beta, non_negative),
        Key {
            name: "strategy_switch_epoch",
            set: |c, v| {
                c.loss.strategy_switch_epoch = match v {
                    "" | "none" => None,
                    _ => Some(v.parse().map_err(|e| format!("cannot parse {v:?}: {e}"))?),
                };
                Ok(())
            },
            get: |c| c.loss.strategy_switch_epoch.map(|e| e.to_string()).unwrap_or_else(|| "none".into()),
        },
        key!("teacher_temp", loss.teacher_temp, positive),
        key!("teacher_temp_warmup_start", loss.teacher_temp_warmup_start, positive),
        key!("teacher_temp_warmup_epochs", loss.teacher_temp_warmup_epochs, any),
        key!("student_temp", loss.student_temp, positive),
        key!("center_momentum", loss.center_momentum, unit_open),
        key!("granularity_lambda", loss.granularity_lambda, positive),
        key!("cross_view", loss.cross_view, any),
        key!("aggregate_loss_term", loss.aggregate_term, any),
        key!("epochs", train.epochs, any),
        key!("batch_size", train.batch_size, positive_int),
        key!("lr_base", train.lr_base, non_negative),
        key!("warmup_epochs", train.warmup_epochs, any),
        key!("weight_decay", train.weight_decay, non_negative),
        key!("clip_norm", train.clip_norm, positive),
        key!("ema_start", train.ema_start, unit),
        key!("ema_end", train.ema_end, unit),
        key!("seed", train.seed, any),
        key!("eval_every_epochs", train.eval_every_epochs, any),
        key!("knn_temp", train.knn_temp, positive),
        Key {
            name: "knn_k",
            set: |c, v| {
                let ks = v
                    .split(',')
                    .map(|s| s.trim().parse::<usize>().map_err(|e| format!("cannot parse {s:?}: {e}")))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                if ks.is_empty() || ks.contains(&0) {
                    return Err("needs positive neighbour counts".into());
                }
                c.train.knn_k = ks;
                Ok(())
            },
            get: |c| c.train.knn_k.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","),
        },
        Key {
            name: "train_features",
            set: |c, v| {
                c.train_features = opt_path(v);
                Ok(())
            },
            get: |c| show_path(&c.train_features),
        },
        Key {
            name: "eval_features",
            set: |c, v| {
                c.eval_features = opt_path(v);
                Ok(())
            },
            get: |c| show_path(&c.eval_features),
        },
        Key {
            name: "out_dir",
            set: |c, v| {
                if v.is_empty() {
                    return Err("must not be empty".into());
                }
                c.out_dir = PathBuf::from(v);
                Ok(())
            },
            get: |c| c.out_dir.display().to_string(),
        },
    ]
}

/// Keys that share a cross-field constraint with a group of others.
const MODEL_KEYS: &[&str] = &[
    "vocab_size",
    "seq_len",
    "d_model",
    "n_heads",
    "dec_depth",
    "enc_depth",
    "proj_hidden",
    "proj_bottleneck",
    "n_prototypes",
    "d_t",
];
const DISCRETIZE_KEYS: &[&str] = &["discretize", "tau_start", "tau_end", "tau_schedule", "st_hard", "vq_beta"];
const LOSS_KEYS: &[&str] = &[
    "strategy",
    "strategy_switch_epoch",
    "teacher_temp",
    "student_temp",
    "center_momentum",
    "granularity_lambda",
    "cross_view",
    "alpha",
    "beta",
];
const TRAIN_KEYS: &[&str] = &["ema_start", "ema_end", "batch_size", "clip_norm"];

impl RunConfig {
    /// Parses configuration text. Unknown keys, malformed values and
    /// constraint violations are reported with their line number.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let table = keys();
        let mut cfg = RunConfig::default();
        let mut seen: Vec<(&'static str, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| Error::ConfigLine {
                line,
                msg: format!("expected `key = value`, got {content:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            let key = table.iter().find(|e| e.name == k).ok_or_else(|| Error::ConfigLine {
                line,
                msg: format!("unknown key {k:?}"),
            })?;
            if let Some((_, prev)) = seen.iter().find(|(n, _)| *n == key.name) {
                return Err(Error::ConfigLine {
                    line,
                    msg: format!("{k} already set on line {prev}"),
                });
            }
            (key.set)(&mut cfg, v).map_err(|msg| Error::ConfigLine {
                line,
                msg: format!("{k}: {msg}"),
            })?;
            seen.push((key.name, line));
        }
        let line_of = |group: &[&str]| {
            seen.iter()
                .filter(|(n, _)| group.contains(n))
                .map(|&(_, l)| l)
                .max()
                .unwrap_or(0)
        };
        let groups: [(&[&str], Result<()>); 4] = [
            (MODEL_KEYS, cfg.model.validate()),
            (DISCRETIZE_KEYS, cfg.discretize.validate()),
            (LOSS_KEYS, cfg.loss.validate()),
            (TRAIN_KEYS, cfg.train.validate()),
        ];
        for (group, res) in groups {
            if let Err(e) = res {
                return Err(Error::ConfigLine {
                    line: line_of(group),
                    msg: e.to_string(),
                });
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<RunConfig> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its resolved value, one per line, in canonical order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in keys() {
            let _ = writeln!(s, "{} = {}", k.name, (k.get)(self));
        }
        s
    }

    /// Errors listing every key of `required` that has no value.
    pub fn require(&self, required: &[&str]) -> Result<()> {
        let missing: Vec<&str> = required
            .iter()
            .copied()
            .filter(|k| match *k {
                "train_features" => self.train_features.is_none(),
                "eval_features" => self.eval_features.is_none(),
                _ => false,
            })
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("missing required keys: {}", missing.join(", "))))
        }
    }

    /// Whether the decoder head emits vectors for quantization.
    pub fn vq_head(&self) -> bool {
        self.discretize.kind == DiscretizeKind::Vq
    }

    /// The configuration with paths cleared, for comparing runs.
    pub fn without_paths(&self) -> RunConfig {
        RunConfig {
            train_features: None,
            eval_features: None,
            out_dir: PathBuf::from("run"),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::Strategy;

    #[test]
    fn empty_file_gives_defaults_but_no_paths() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        let err = c.require(&["train_features"]).unwrap_err().to_string();
        assert!(err.contains("train_features"), "{err}");
    }

    #[test]
    fn seq_len_must_be_power_of_two() {
        let err = RunConfig::parse("# model\nseq_len = 6\n").unwrap_err();
        match err {
            Error::ConfigLine { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("power of two required"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_and_bad_values_name_the_line() {
        let e = RunConfig::parse("seed = 3\nlearning_rate = 1\n").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 2, .. }));
        let e = RunConfig::parse("epochs = many").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 1, .. }));
        let e = RunConfig::parse("d_model = 10\nn_heads = 4\n").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 2, .. }), "{e}");
        let e = RunConfig::parse("no equals sign").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 1, .. }));
        let e = RunConfig::parse("seed = 1\nseed = 2").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 2, .. }));
        let e = RunConfig::parse("tau_start = 0.1\ntau_end = 0.5").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 2, .. }));
    }

    #[test]
    fn resolved_text_round_trips() {
        let text = "vocab_size = 128 # small\nstrategy = combined\nstrategy_switch_epoch = 20\nlr_base = 5e-4\nknn_k = 10, 20, 200\ntrain_features = a.symf\ndiscretize = vq\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.loss.strategy, Strategy::Combined);
        assert_eq!(c.train.knn_k, vec![10, 20, 200]);
        assert!(c.vq_head());
        let again = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(again, c);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }
}
