//! Sectioned `key = value` run configuration.
//!
//! ```text
//! [task]
//! kind = rotated_gaussians
//! num_tasks = 6
//!
//! [train]
//! policy = llaca
//! seed = 3
//! ```
//!
//! Every key is optional; keys left out take the library defaults and are
//! listed in [`CliConfig::defaulted`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dynema::{Activation, BetaReduction, EvalTarget, Policy, RunConfig, TaskKind};

use crate::CliError;

pub const DEFAULT_FIXED_BETA: f64 = 0.99;
pub const DEFAULT_OUT_DIR: &str = "out";

/// Policy name as written on the command line and in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Plain,
    Fixed,
    Llaca,
}

impl PolicyKind {
    pub fn with_beta(self, beta: f64) -> Policy {
        match self {
            PolicyKind::Plain => Policy::Plain,
            PolicyKind::Fixed => Policy::FixedEma(beta),
            PolicyKind::Llaca => Policy::Dynamic,
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "plain" => Ok(PolicyKind::Plain),
            "fixed" => Ok(PolicyKind::Fixed),
            "llaca" => Ok(PolicyKind::Llaca),
            other => Err(format!(
                "unknown policy {other:?} (expected plain, fixed or llaca)"
            )),
        }
    }
}

const KEYS: &[(&str, &[&str])] = &[
    (
        "task",
        &[
            "kind",
            "num_tasks",
            "train_samples",
            "test_samples",
            "input_dim",
            "num_classes",
            "drift",
        ],
    ),
    ("net", &["hidden", "activation"]),
    (
        "train",
        &[
            "lr",
            "batch_size",
            "epochs_per_task",
            "policy",
            "beta",
            "clamp",
            "reduction",
            "eval",
            "handoff",
            "seed",
        ],
    ),
    ("output", &["dir"]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub run: RunConfig,
    pub policy: PolicyKind,
    /// Weight used by the fixed arm.
    pub fixed_beta: f64,
    pub out_dir: PathBuf,
    /// `section.key` names that fell back to defaults.
    pub defaulted: Vec<String>,
}

impl Default for CliConfig {
    fn default() -> Self {
        let defaulted = KEYS
            .iter()
            .flat_map(|(section, keys)| keys.iter().map(move |k| format!("{section}.{k}")))
            .collect();
        Self {
            run: RunConfig::default(),
            policy: PolicyKind::Llaca,
            fixed_beta: DEFAULT_FIXED_BETA,
            out_dir: PathBuf::from(DEFAULT_OUT_DIR),
            defaulted,
        }
    }
}

/// Command-line values that win over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub policy: Option<PolicyKind>,
    pub beta: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

type Entries = BTreeMap<(String, String), (usize, String)>;

fn tokenize(text: &str) -> Result<Entries, CliError> {
    let mut entries = Entries::new();
    let mut section: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(CliError::Config(format!(
                    "line {line_no}: unknown section [{name}]"
                )));
            }
            section = Some(name.to_string());
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "line {line_no}: expected key = value, got {line:?}"
            )));
        };
        let key = key.trim();
        let Some(section) = section.as_deref() else {
            return Err(CliError::Config(format!(
                "line {line_no}: key {key:?} outside any section"
            )));
        };
        let known = KEYS
            .iter()
            .find(|(s, _)| *s == section)
            .is_some_and(|(_, keys)| keys.contains(&key));
        if !known {
            return Err(CliError::Config(format!(
                "line {line_no}: unknown key {section}.{key}"
            )));
        }
        let slot = (section.to_string(), key.to_string());
        if let Some((first, _)) = entries.get(&slot) {
            return Err(CliError::Config(format!(
                "line {line_no}: {section}.{key} already set on line {first}"
            )));
        }
        entries.insert(slot, (line_no, value.trim().to_string()));
    }
    Ok(entries)
}

struct Reader {
    entries: Entries,
    defaulted: Vec<String>,
}

impl Reader {
    fn get<T: std::str::FromStr>(
        &mut self,
        section: &str,
        key: &str,
        target: &mut T,
    ) -> Result<(), CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(&(section.to_string(), key.to_string())) {
            Some((line, value)) => {
                *target = value.parse().map_err(|e| {
                    CliError::Config(format!(
                        "line {line}: bad value {value:?} for {section}.{key}: {e}"
                    ))
                })?;
            }
            None => self.defaulted.push(format!("{section}.{key}")),
        }
        Ok(())
    }
}

fn parse_reduction(s: &str) -> Result<BetaReduction, String> {
    match s {
        "norm_ratio" => Ok(BetaReduction::NormRatio),
        "elementwise_mean" => Ok(BetaReduction::ElementwiseMean),
        other => Err(format!("unknown reduction {other:?}")),
    }
}

fn parse_eval(s: &str) -> Result<EvalTarget, String> {
    match s {
        "deployed" => Ok(EvalTarget::Deployed),
        "live" => Ok(EvalTarget::Live),
        "both" => Ok(EvalTarget::Both),
        other => Err(format!("unknown eval target {other:?}")),
    }
}

/// Comma-separated hidden widths; an empty value means no hidden layer.
#[derive(Debug, Clone, PartialEq)]
struct Hidden(Vec<usize>);

impl std::str::FromStr for Hidden {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().is_empty() {
            return Ok(Hidden(Vec::new()));
        }
        s.split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<_, _>>()
            .map(Hidden)
    }
}

/// Parses a wrapper so `FromStr` can carry a custom parser.
struct Via<T>(T);

macro_rules! via {
    ($ty:ty, $f:expr) => {
        impl std::str::FromStr for Via<$ty> {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                $f(s).map(Via)
            }
        }
    };
}

via!(BetaReduction, parse_reduction);
via!(EvalTarget, parse_eval);

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut r = Reader {
            entries: tokenize(text)?,
            defaulted: Vec::new(),
        };
        let mut run = RunConfig::default();
        let t = &mut run.tasks;
        let mut kind: TaskKind = t.kind;
        r.get("task", "kind", &mut kind)?;
        t.kind = kind;
        r.get("task", "num_tasks", &mut t.num_tasks)?;
        r.get("task", "train_samples", &mut t.train_samples)?;
        r.get("task", "test_samples", &mut t.test_samples)?;
        r.get("task", "input_dim", &mut t.input_dim)?;
        r.get("task", "num_classes", &mut t.num_classes)?;
        r.get("task", "drift", &mut t.drift)?;

        let default_hidden = run.net.layer_sizes[1..run.net.layer_sizes.len() - 1].to_vec();
        let mut hidden = Hidden(default_hidden);
        r.get("net", "hidden", &mut hidden)?;
        let mut activation: Activation = run.net.activation;
        r.get("net", "activation", &mut activation)?;
        run.net.activation = activation;
        run.net.layer_sizes = std::iter::once(run.tasks.input_dim)
            .chain(hidden.0)
            .chain(std::iter::once(run.tasks.output_classes()))
            .collect();

        r.get("train", "lr", &mut run.lr)?;
        r.get("train", "batch_size", &mut run.batch_size)?;
        r.get("train", "epochs_per_task", &mut run.epochs_per_task)?;
        let mut policy = PolicyKind::Llaca;
        r.get("train", "policy", &mut policy)?;
        let mut fixed_beta = DEFAULT_FIXED_BETA;
        r.get("train", "beta", &mut fixed_beta)?;
        r.get("train", "clamp", &mut run.clamp_value)?;
        let mut reduction = Via(run.reduction);
        r.get("train", "reduction", &mut reduction)?;
        run.reduction = reduction.0;
        let mut eval = Via(run.eval);
        r.get("train", "eval", &mut eval)?;
        run.eval = eval.0;
        r.get("train", "handoff", &mut run.handoff)?;
        let mut seed = run.run_seed;
        r.get("train", "seed", &mut seed)?;

        let mut out_dir = PathBuf::from(DEFAULT_OUT_DIR);
        r.get("output", "dir", &mut out_dir)?;

        debug_assert!(r.entries.is_empty());
        Ok(Self {
            run: run.with_seed(seed),
            policy,
            fixed_beta,
            out_dir,
            defaulted: r.defaulted,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Reads `path` when given, otherwise starts from defaults.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = o.policy {
            self.policy = p;
        }
        if let Some(b) = o.beta {
            self.fixed_beta = b;
        }
        if let Some(s) = o.seed {
            self.run = self.run.clone().with_seed(s);
        }
        if let Some(d) = &o.out {
            self.out_dir = d.clone();
        }
    }

    /// The run configuration with this config's policy applied.
    pub fn run_config(&self) -> RunConfig {
        self.run
            .clone()
            .with_policy(self.policy.with_beta(self.fixed_beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_all_defaults() {
        let cfg = CliConfig::parse("").unwrap();
        assert_eq!(cfg, CliConfig::default());
        assert!(cfg.defaulted.contains(&"train.seed".to_string()));
    }

    #[test]
    fn full_config() {
        let text = "
            # comment
            [task]
            kind = split_classes
            num_tasks = 2
            num_classes = 4
            train_samples = 40   # trailing comment
            test_samples = 10
            input_dim = 3
            drift = 0.5

            [net]
            hidden = 5, 6
            activation = tanh

            [train]
            lr = 0.1
            batch_size = 8
            epochs_per_task = 2
            policy = fixed
            beta = 0.9
            clamp = 0.95
            reduction = elementwise_mean
            eval = both
            handoff = false
            seed = 7

            [output]
            dir = runs/a
        ";
        let cfg = CliConfig::parse(text).unwrap();
        assert!(cfg.defaulted.is_empty());
        let run = cfg.run_config();
        assert_eq!(run.tasks.kind, TaskKind::SplitClasses);
        assert_eq!(run.net.layer_sizes, vec![3, 5, 6, 2]);
        assert_eq!(run.net.activation, Activation::Tanh);
        assert_eq!(run.policy, Policy::FixedEma(0.9));
        assert_eq!(run.reduction, BetaReduction::ElementwiseMean);
        assert_eq!(run.eval, EvalTarget::Both);
        assert!(!run.handoff);
        assert_eq!(run.run_seed, 7);
        assert_eq!(cfg.out_dir, PathBuf::from("runs/a"));
        run.validate().unwrap();
    }

    #[test]
    fn empty_hidden_is_linear() {
        let cfg = CliConfig::parse("[net]\nhidden =\n").unwrap();
        assert_eq!(cfg.run.net.layer_sizes, vec![16, 4]);
    }

    #[test]
    fn rejects_bad_input() {
        for (text, needle) in [
            ("[train]\nmomentum = 0.9\n", "unknown key train.momentum"),
            ("[model]\n", "unknown section"),
            ("lr = 0.1\n", "outside any section"),
            ("[train]\nlr 0.1\n", "expected key = value"),
            ("[train]\nlr = fast\n", "line 2: bad value"),
            ("[train]\nlr = 0.1\nlr = 0.2\n", "already set on line 2"),
            ("[train]\npolicy = ewc\n", "unknown policy"),
        ] {
            let err = CliConfig::parse(text).unwrap_err().to_string();
            assert!(err.contains(needle), "{text:?} gave {err}");
        }
    }

    #[test]
    fn overrides_win() {
        let mut cfg = CliConfig::parse("[train]\npolicy = plain\nseed = 1\n").unwrap();
        cfg.apply(&Overrides {
            policy: Some(PolicyKind::Fixed),
            beta: Some(0.5),
            seed: Some(9),
            out: Some("x".into()),
        });
        let run = cfg.run_config();
        assert_eq!(run.policy, Policy::FixedEma(0.5));
        assert_eq!(
            run,
            RunConfig::default()
                .with_seed(9)
                .with_policy(Policy::FixedEma(0.5))
        );
        assert_eq!(cfg.out_dir, PathBuf::from("x"));
    }
}
