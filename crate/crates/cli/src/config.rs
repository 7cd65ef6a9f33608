//! Plain-text `key=value` run configuration.
//!
//! Every key has a default; files and command-line settings override them
//! in that order. Unknown keys are rejected so typos never pass silently.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mono_core::basis::{BasisFamily, BasisSet};
use mono_core::budget::{BudgetInputs, Modulus};
use mono_core::nn::HeadMode;
use mono_core::operator::NoSpec;
use mono_core::optim::TrainBudget;
use mono_core::sobolev::SobolevBallSpec;
use mono_core::tasks::{RobinConfig, TaskKind, TaskSpec};
use mono_core::tree::{CompressionRule, TreeSpec};
use mono_core::GridSpec;

use crate::CliError;

/// Environment variable overriding the default output root.
pub const DATA_DIR_ENV: &str = "MONO_DATA_DIR";

const DEFAULTS: &[(&str, &str)] = &[
    ("task", "square"),
    ("dim", "1"),
    ("points", "257"),
    ("count", "640"),
    ("train_count", "512"),
    ("data_seed", "0"),
    ("sampling.size", "auto"),
    ("sobolev.s", "2"),
    ("sobolev.radius", "1"),
    ("sobolev.gamma", "0.25"),
    ("robin.n", "65"),
    ("robin.q0", "1"),
    ("robin.q_min", "0.1"),
    ("robin.perturbation", "0.2"),
    ("robin.coefficients", "8"),
    ("basis", "fourier"),
    ("basis.size", "8"),
    ("basis.degree", "3"),
    ("basis.levels", "2"),
    ("tree.valency", "4"),
    ("tree.height", "1"),
    ("tree.delta", "0.1"),
    ("tree.seed", "0"),
    ("tree.compress", "false"),
    ("compress.width", "8"),
    ("compress.depth", "2"),
    ("compress.epochs", "2000"),
    ("compress.tolerance", "0.01"),
    ("routing", "raw"),
    ("expert.rank", "8"),
    ("expert.width", "16"),
    ("expert.depth", "2"),
    ("expert.bias_depth", "1"),
    ("expert.bias_width", "16"),
    ("expert.head", "paper-exact"),
    ("init_seed", "0"),
    ("train.epochs", "200"),
    ("train.lr", "0.01"),
    ("train.lr_final", "0.0001"),
    ("train.batch", "32"),
    ("train.seed", "0"),
    ("train.scale_init", "true"),
    ("compare.leaves", "1,4"),
    ("compare.seeds", "5"),
    ("budget.omega", "lipschitz"),
    ("budget.eps", "0.1,0.01,0.001"),
    ("budget.constant", "1"),
    ("budget.exponent", "0.5"),
    ("budget.c0", "1"),
    ("budget.c1", "1"),
    ("budget.d1", "1"),
    ("budget.d2", "1"),
    ("budget.s1", "2"),
    ("budget.s2", "2"),
    ("budget.d_in", "1"),
    ("budget.d_out", "1"),
    ("budget.diam", "1"),
    ("budget.valency", "2"),
    ("out", "default"),
];

const ALIASES: &[(&str, &str)] = &[
    ("seed", "data_seed"),
    ("n", "robin.n"),
    ("leaves", "compare.leaves"),
    ("seeds", "compare.seeds"),
    ("omega", "budget.omega"),
    ("eps", "budget.eps"),
    ("epochs", "train.epochs"),
    ("v", "tree.valency"),
    ("h", "tree.height"),
    ("delta", "tree.delta"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn canonical(key: &str) -> &str {
    ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, k)| k)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = canonical(key.trim());
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown key {key:?}"))),
        }
    }

    /// Applies a `key=value` file; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("expected key=value, got {line:?}")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies `key=value`, `--key=value` and `--key value` settings.
    pub fn apply_args(&mut self, args: &[String]) -> Result<(), CliError> {
        let mut it = args.iter();
        while let Some(a) = it.next() {
            let body = a.strip_prefix("--").unwrap_or(a);
            if let Some((k, v)) = body.split_once('=') {
                self.set(k, v)?;
            } else if a.starts_with("--") {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Config(format!("missing value for {a}")))?;
                self.set(body, v)?;
            } else {
                return Err(CliError::Config(format!("unexpected argument {a:?}")));
            }
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("{key} is not a configuration key"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        self.raw(key)
            .parse()
            .map_err(|_| CliError::Config(format!("cannot parse {key}={}", self.raw(key))))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        self.raw(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("cannot parse {key}={}", self.raw(key))))
            })
            .collect()
    }

    /// Resolved settings, `out` excluded so the text does not depend on where it is written.
    pub fn render(&self) -> String {
        self.values
            .iter()
            .filter(|(k, _)| k.as_str() != "out")
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Settings whose keys start with any of `prefixes`, rendered as text.
    pub fn fingerprint(&self, prefixes: &[&str]) -> String {
        self.values
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        match self.raw("out") {
            "default" => std::env::var_os(DATA_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("mono-data")),
            p => PathBuf::from(p),
        }
    }

    pub fn with_out(mut self, out: &Path) -> Self {
        self.values.insert("out".into(), out.display().to_string());
        self
    }

    pub fn task(&self) -> Result<TaskKind, CliError> {
        TaskKind::parse(self.raw("task")).ok_or_else(|| CliError::Config(format!("unknown task {}", self.raw("task"))))
    }

    pub fn robin(&self) -> Result<RobinConfig, CliError> {
        let cfg = RobinConfig {
            n: self.get("robin.n")?,
            q0: self.get("robin.q0")?,
            q_min: self.get("robin.q_min")?,
            perturbation: self.get("robin.perturbation")?,
            coefficients: self.get("robin.coefficients")?,
            top_flux: None,
        };
        cfg.validate().map_err(config_error)?;
        Ok(cfg)
    }

    /// Input grid of the task (the top edge for the Robin task).
    pub fn grid(&self) -> Result<GridSpec, CliError> {
        if self.task()? == TaskKind::RobinInverse {
            return Ok(self.robin()?.edge_spec());
        }
        GridSpec::scalar(self.get("dim")?, self.get("points")?).map_err(config_error)
    }

    pub fn task_spec(&self) -> Result<TaskSpec, CliError> {
        let grid = self.grid()?;
        let mut spec = TaskSpec::new(self.task()?, grid, self.get("count")?, self.get("data_seed")?).map_err(config_error)?;
        spec.ball = SobolevBallSpec::new(self.get("sobolev.s")?, self.get("sobolev.radius")?, self.get("sobolev.gamma")?)
            .map_err(config_error)?;
        if self.raw("sampling.size") != "auto" {
            spec.sampling_size = self.get("sampling.size")?;
        }
        spec.robin = self.robin()?;
        spec.validate().map_err(config_error)?;
        let train: usize = self.get("train_count")?;
        if train == 0 || train >= spec.count {
            return Err(CliError::Config("train_count must lie in 1..count".into()));
        }
        Ok(spec)
    }

    pub fn basis_family(&self) -> Result<BasisFamily, CliError> {
        match self.raw("basis") {
            "fourier" => Ok(BasisFamily::Fourier),
            "pwpoly" => Ok(BasisFamily::PiecewisePoly {
                max_degree: self.get("basis.degree")?,
                levels: self.get("basis.levels")?,
            }),
            other => Err(CliError::Config(format!("unknown basis {other}"))),
        }
    }

    pub fn basis(&self) -> Result<BasisSet, CliError> {
        BasisSet::build(self.grid()?, self.basis_family()?, self.get("basis.size")?).map_err(config_error)
    }

    pub fn tree_spec(&self, leaves: Option<usize>) -> Result<TreeSpec, CliError> {
        let (v, h) = match leaves {
            None => (self.get("tree.valency")?, self.get("tree.height")?),
            Some(1) => (2, 0),
            Some(l) => (l, 1),
        };
        TreeSpec::new(v, h, self.get("tree.delta")?).map_err(config_error)
    }

    pub fn compression(&self) -> Result<Option<(CompressionRule, TrainBudget, f64)>, CliError> {
        if !self.get::<bool>("tree.compress")? {
            return Ok(None);
        }
        let rule = CompressionRule {
            width: self.get("compress.width")?,
            depth: self.get("compress.depth")?,
        };
        let budget = TrainBudget::new(self.get("compress.epochs")?, 1e-2, self.get("tree.seed")?)
            .with_decay(1e-5)
            .with_restarts(2);
        Ok(Some((rule, budget, self.get("compress.tolerance")?)))
    }

    pub fn expert_spec(&self) -> Result<NoSpec, CliError> {
        let grid = self.grid()?;
        let head = match self.raw("expert.head") {
            "paper-exact" => HeadMode::PaperExact,
            "linear-head" => HeadMode::LinearHead,
            other => return Err(CliError::Config(format!("unknown head mode {other}"))),
        };
        let spec = NoSpec {
            rank: self.get("expert.rank")?,
            hidden_width: self.get("expert.width")?,
            depth: self.get("expert.depth")?,
            bias_depth: self.get("expert.bias_depth")?,
            bias_width: self.get("expert.bias_width")?,
            d_in: 1,
            d_out: 1,
            in_dim: grid.dim,
            out_dim: grid.dim,
            head_mode: head,
        };
        spec.validate().map_err(config_error)?;
        Ok(spec)
    }

    pub fn train_budget(&self) -> Result<TrainBudget, CliError> {
        let mut b = TrainBudget::new(self.get("train.epochs")?, self.get("train.lr")?, self.get("train.seed")?)
            .with_decay(self.get("train.lr_final")?)
            .with_scale_init(self.get("train.scale_init")?);
        let batch: usize = self.get("train.batch")?;
        if batch > 0 {
            b = b.with_batch_size(batch);
        }
        b.validate().map_err(config_error)?;
        Ok(b)
    }

    pub fn modulus(&self) -> Result<Modulus, CliError> {
        let m = match self.raw("budget.omega") {
            "lipschitz" => Modulus::Lipschitz {
                constant: self.get("budget.constant")?,
            },
            "holder" => Modulus::Holder {
                constant: self.get("budget.constant")?,
                exponent: self.get("budget.exponent")?,
            },
            "logarithmic" | "log" => Modulus::Logarithmic {
                c0: self.get("budget.c0")?,
                c1: self.get("budget.c1")?,
            },
            other => return Err(CliError::Config(format!("unknown modulus {other}"))),
        };
        m.validate().map_err(config_error)?;
        Ok(m)
    }

    pub fn budget_inputs(&self, eps: f64) -> Result<BudgetInputs, CliError> {
        let i = BudgetInputs {
            eps,
            modulus: self.modulus()?,
            d1: self.get("budget.d1")?,
            d2: self.get("budget.d2")?,
            s1: self.get("budget.s1")?,
            s2: self.get("budget.s2")?,
            d_in: self.get("budget.d_in")?,
            d_out: self.get("budget.d_out")?,
            diam: self.get("budget.diam")?,
            valency: self.get("budget.valency")?,
        };
        i.validate().map_err(config_error)?;
        Ok(i)
    }
}

fn config_error(e: mono_core::Error) -> CliError {
    CliError::Config(e.to_string())
}
