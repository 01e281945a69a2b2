//! Component-specific gates blending the two most recent parameter states.
//!
//! For each component `c` the support-side initialization is
//! `sigma(g_c) * prev + (1 - sigma(g_c)) * prevprev`, element-wise. Entity
//! and relation gates hold one entry per embedding dimension and broadcast
//! across rows; the `other` gate matches the `other` vector.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::backbone::{read_f64s, read_u64, write_f64s, Component, GradSet, ParamSet};
use crate::config::Ablation;
use crate::error::{Error, Result};

const GATE_MAGIC: &[u8; 8] = b"TMGATES1";

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sigmoid_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// Raw (pre-sigmoid) gate vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSet {
    pub ent: Vec<f64>,
    pub rel: Vec<f64>,
    pub other: Vec<f64>,
}

/// Mean of `sigma(g)` per component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateMeans {
    pub ent: f64,
    pub rel: f64,
    pub other: f64,
}

impl GateSet {
    /// Gates at zero, an even blend.
    pub fn zeros(dim: usize) -> Self {
        Self {
            ent: vec![0.0; dim],
            rel: vec![0.0; dim],
            other: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.ent.len()
    }

    pub fn get(&self, c: Component) -> &[f64] {
        match c {
            Component::Entity => &self.ent,
            Component::Relation => &self.rel,
            Component::Other => &self.other,
        }
    }

    pub fn get_mut(&mut self, c: Component) -> &mut [f64] {
        match c {
            Component::Entity => &mut self.ent,
            Component::Relation => &mut self.rel,
            Component::Other => &mut self.other,
        }
    }

    pub fn is_finite(&self) -> bool {
        Component::ALL
            .iter()
            .all(|&c| self.get(c).iter().all(|v| v.is_finite()))
    }

    pub fn means(&self) -> GateMeans {
        let mean = |v: &[f64]| v.iter().map(|&g| sigmoid(g)).sum::<f64>() / v.len().max(1) as f64;
        GateMeans {
            ent: mean(&self.ent),
            rel: mean(&self.rel),
            other: mean(&self.other),
        }
    }

    fn check(&self, params: &ParamSet) -> Result<()> {
        let d = params.dim();
        if self.ent.len() != d || self.rel.len() != d || self.other.len() != d {
            return Err(Error::Shape(format!(
                "gates ({}, {}, {}) vs embedding dim {d}",
                self.ent.len(),
                self.rel.len(),
                self.other.len()
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(GATE_MAGIC)?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        write_f64s(&mut w, &self.ent)?;
        write_f64s(&mut w, &self.rel)?;
        write_f64s(&mut w, &self.other)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != GATE_MAGIC {
            return Err(Error::Checkpoint("not a gate checkpoint".into()));
        }
        let d = read_u64(&mut r)? as usize;
        let mut g = GateSet::zeros(d);
        read_f64s(&mut r, &mut g.ent)?;
        read_f64s(&mut r, &mut g.rel)?;
        read_f64s(&mut r, &mut g.other)?;
        Ok(g)
    }
}

/// The two most recent task outputs, `theta_{t-1}` and `theta_{t-2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamHistory {
    pub theta_prev: ParamSet,
    pub theta_prevprev: ParamSet,
}

impl ParamHistory {
    /// Both slots hold `theta`; gating is then the identity.
    pub fn bootstrap(theta: ParamSet) -> Self {
        Self {
            theta_prevprev: theta.clone(),
            theta_prev: theta,
        }
    }

    /// `prevprev <- prev`, `prev <- theta_t`.
    pub fn push(&mut self, theta_t: ParamSet) {
        self.theta_prevprev = std::mem::replace(&mut self.theta_prev, theta_t);
    }

    fn check(&self) -> Result<()> {
        self.theta_prev.check_shape(&self.theta_prevprev)
    }
}

/// Element `prevprev + s * (prev - prevprev)`, clamped into the closed
/// interval between the two sources so rounding never leaves it.
#[inline]
fn blend(s: f64, prev: f64, prevprev: f64) -> f64 {
    let v = prevprev + s * (prev - prevprev);
    let (lo, hi) = if prev <= prevprev {
        (prev, prevprev)
    } else {
        (prevprev, prev)
    };
    v.clamp(lo, hi)
}

/// Gated support-side initialization.
pub fn init_support_params(hist: &ParamHistory, gates: &GateSet) -> Result<ParamSet> {
    hist.check()?;
    gates.check(&hist.theta_prev)?;
    let d = hist.theta_prev.dim();
    let mut out = hist.theta_prev.zeros_like();
    for c in Component::ALL {
        let s: Vec<f64> = gates.get(c).iter().map(|&g| sigmoid(g)).collect();
        let prev = hist.theta_prev.component(c);
        let prevprev = hist.theta_prevprev.component(c);
        for (i, o) in out.component_mut(c).iter_mut().enumerate() {
            *o = blend(s[i % d], prev[i], prevprev[i]);
        }
    }
    Ok(out)
}

/// Support-side initialization for the configured ablation.
pub fn support_init_for(
    ablation: Ablation,
    hist: &ParamHistory,
    gates: &GateSet,
) -> Result<ParamSet> {
    match ablation {
        Ablation::NoGate => Ok(hist.theta_prev.clone()),
        Ablation::Full | Ablation::SharedGate => init_support_params(hist, gates),
    }
}

/// Derivative of the support loss with respect to the raw gates, given the
/// gradient at the gated initialization.
pub fn gate_gradient(gates: &GateSet, hist: &ParamHistory, support_grad: &GradSet) -> Result<GateSet> {
    hist.check()?;
    hist.theta_prev.check_shape(support_grad)?;
    gates.check(support_grad)?;
    let d = support_grad.dim();
    let mut out = GateSet::zeros(d);
    for c in Component::ALL {
        let g = support_grad.component(c);
        let prev = hist.theta_prev.component(c);
        let prevprev = hist.theta_prevprev.component(c);
        let acc = out.get_mut(c);
        for i in 0..g.len() {
            acc[i % d] += g[i] * (prev[i] - prevprev[i]);
        }
        for (a, &raw) in acc.iter_mut().zip(gates.get(c)) {
            *a *= sigmoid_prime(raw);
        }
    }
    Ok(out)
}

/// One gradient step on the gates. With [`Ablation::SharedGate`] the three
/// component gradients are summed and applied to every component, keeping
/// the vectors tied; [`Ablation::NoGate`] leaves the gates untouched.
pub fn gate_update(
    gates: &GateSet,
    hist: &ParamHistory,
    support_grad: &GradSet,
    lr: f64,
    ablation: Ablation,
) -> Result<GateSet> {
    if ablation == Ablation::NoGate {
        return Ok(gates.clone());
    }
    let grad = gate_gradient(gates, hist, support_grad)?;
    let mut out = gates.clone();
    match ablation {
        Ablation::Full => {
            for c in Component::ALL {
                for (g, dg) in out.get_mut(c).iter_mut().zip(grad.get(c)) {
                    *g -= lr * dg;
                }
            }
        }
        Ablation::SharedGate => {
            let shared: Vec<f64> = (0..gates.dim())
                .map(|k| gates.ent[k] - lr * (grad.ent[k] + grad.rel[k] + grad.other[k]))
                .collect();
            out.ent.clone_from(&shared);
            out.rel.clone_from(&shared);
            out.other = shared;
        }
        Ablation::NoGate => unreachable!(),
    }
    Ok(out)
}
