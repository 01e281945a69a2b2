//! Run configuration and its flat `key = value` file format.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which gating variant the meta-learner runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Separate gate vectors for entity, relation and other parameters.
    #[default]
    Full,
    /// No gating: the support side starts from the previous task's output.
    NoGate,
    /// One gate vector shared by all three components.
    SharedGate,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoGate, Ablation::SharedGate];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoGate => "no-gate",
            Ablation::SharedGate => "shared-gate",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-gate" | "no_gate" => Ok(Ablation::NoGate),
            "shared-gate" | "shared_gate" => Ok(Ablation::SharedGate),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

/// Update rule for the query-side (outer) step and for baseline training.
/// Support-side steps are always plain gradient steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

impl Optimizer {
    pub fn as_str(self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        }
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Support-side step size.
    pub alpha: f64,
    /// Query-side step size.
    pub beta: f64,
    pub l2: f64,
    pub dim: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Support-side gradient steps per task during valid/test adaptation.
    pub test_steps: usize,
    pub ablation: Ablation,
    pub gate_update_in_eval: bool,
    pub optimizer: Optimizer,
    /// Gate step size; `alpha` when unset.
    pub gate_lr: Option<f64>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            beta: 0.001,
            l2: 1e-5,
            dim: 32,
            epochs: 30,
            seed: 0,
            test_steps: 1,
            ablation: Ablation::Full,
            gate_update_in_eval: true,
            optimizer: Optimizer::Sgd,
            gate_lr: None,
        }
    }
}

impl MetaConfig {
    pub fn gate_lr(&self) -> f64 {
        self.gate_lr.unwrap_or(self.alpha)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("alpha", self.alpha)?;
        positive("beta", self.beta)?;
        if let Some(g) = self.gate_lr {
            positive("gate_lr", g)?;
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(Error::Config(format!("l2 must be non-negative, got {}", self.l2)));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if self.test_steps == 0 {
            return Err(Error::Config("test_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = MetaConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
        }
        match key {
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "l2" => self.l2 = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "test_steps" => self.test_steps = num(key, value)?,
            "ablation" => self.ablation = value.parse()?,
            "gate_update_in_eval" => self.gate_update_in_eval = num(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "gate_lr" => {
                self.gate_lr = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Canonical text form; [`MetaConfig::parse`] reads it back exactly.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        // `{:?}` on f64 prints the shortest round-tripping representation.
        let _ = writeln!(s, "alpha = {:?}", self.alpha);
        let _ = writeln!(s, "beta = {:?}", self.beta);
        let _ = writeln!(s, "l2 = {:?}", self.l2);
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "test_steps = {}", self.test_steps);
        let _ = writeln!(s, "ablation = {}", self.ablation);
        let _ = writeln!(s, "gate_update_in_eval = {}", self.gate_update_in_eval);
        let _ = writeln!(s, "optimizer = {}", self.optimizer.as_str());
        match self.gate_lr {
            Some(g) => {
                let _ = writeln!(s, "gate_lr = {g:?}");
            }
            None => {
                let _ = writeln!(s, "gate_lr = none");
            }
        }
        s
    }
}
