//! Central finite-difference checks of the backbone gradient and of the gate
//! gradient obtained through the gated initialization.

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{objective, objective_grad, Backbone, Component, ParamSet};
use crate::data::{Quadruple, Snapshot};
use crate::error::Result;
use crate::meta::{gate_gradient, init_support_params, GateSet, ParamHistory};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with an absolute floor so that coordinates where both
/// values are ~0 do not blow up.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Instance size for a check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct InstanceShape {
    pub num_entities: usize,
    pub num_relations: usize,
    pub dim: usize,
    pub num_facts: usize,
}

/// Parameters uniform in `[-1, 1]` (including `other`) and random facts.
pub fn random_instance(shape: InstanceShape, seed: u64) -> (ParamSet, Snapshot) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    let mut p = ParamSet::zeros(shape.num_entities, shape.num_relations, shape.dim);
    p.seed = seed;
    for v in p.iter_mut() {
        *v = unit.sample(&mut rng);
    }
    let facts = (0..shape.num_facts)
        .map(|_| {
            Quadruple::new(
                rng.random_range(0..shape.num_entities),
                rng.random_range(0..shape.num_relations),
                rng.random_range(0..shape.num_entities),
                1,
            )
        })
        .collect();
    (p, Snapshot { t: 1, facts })
}

/// Max relative error of `objective_grad` over every coordinate.
pub fn check_backbone(
    backbone: &dyn Backbone,
    params: &ParamSet,
    snap: &Snapshot,
    l2: f64,
    h: f64,
) -> Result<f64> {
    let (_, grad) = objective_grad(backbone, params, snap, l2)?;
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for c in Component::ALL {
        for i in 0..params.component(c).len() {
            let orig = params.component(c)[i];
            probe.component_mut(c)[i] = orig + h;
            let up = objective(backbone, &probe, snap, l2)?;
            probe.component_mut(c)[i] = orig - h;
            let down = objective(backbone, &probe, snap, l2)?;
            probe.component_mut(c)[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(grad.component(c)[i], numeric));
        }
    }
    Ok(worst)
}

/// Max relative error of the gate gradient against finite differences of
/// the support objective with respect to the raw gates.
pub fn check_gates(
    backbone: &dyn Backbone,
    hist: &ParamHistory,
    gates: &GateSet,
    snap: &Snapshot,
    l2: f64,
    h: f64,
) -> Result<f64> {
    let theta_s = init_support_params(hist, gates)?;
    let (_, support_grad) = objective_grad(backbone, &theta_s, snap, l2)?;
    let analytic = gate_gradient(gates, hist, &support_grad)?;
    let mut worst: f64 = 0.0;
    let mut probe = gates.clone();
    for c in Component::ALL {
        for k in 0..gates.dim() {
            let orig = gates.get(c)[k];
            probe.get_mut(c)[k] = orig + h;
            let up = objective(backbone, &init_support_params(hist, &probe)?, snap, l2)?;
            probe.get_mut(c)[k] = orig - h;
            let down = objective(backbone, &init_support_params(hist, &probe)?, snap, l2)?;
            probe.get_mut(c)[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic.get(c)[k], numeric));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub shapes: Vec<InstanceShape>,
    pub backbone_max_rel_error: f64,
    pub gate_max_rel_error: f64,
}

/// The default suite: seed-0 instances up to 16 entities, 4 relations and
/// dimension 8, with and without L2.
pub fn run_suite(backbone: &dyn Backbone, seed: u64, h: f64) -> Result<GradcheckReport> {
    let shapes = vec![
        InstanceShape {
            num_entities: 10,
            num_relations: 3,
            dim: 4,
            num_facts: 8,
        },
        InstanceShape {
            num_entities: 16,
            num_relations: 4,
            dim: 8,
            num_facts: 12,
        },
        InstanceShape {
            num_entities: 5,
            num_relations: 1,
            dim: 3,
            num_facts: 3,
        },
    ];
    let mut bb: f64 = 0.0;
    let mut gate: f64 = 0.0;
    for (i, &shape) in shapes.iter().enumerate() {
        let s = seed.wrapping_add(i as u64);
        let (params, snap) = random_instance(shape, s);
        let (prevprev, _) = random_instance(shape, s.wrapping_add(1000));
        let mut rng = ChaCha8Rng::seed_from_u64(s.wrapping_add(2000));
        let mut gates = GateSet::zeros(shape.dim);
        for c in Component::ALL {
            for g in gates.get_mut(c) {
                *g = rng.random_range(-2.0..2.0);
            }
        }
        let hist = ParamHistory {
            theta_prev: params.clone(),
            theta_prevprev: prevprev,
        };
        for l2 in [0.0, 1e-2] {
            bb = bb.max(check_backbone(backbone, &params, &snap, l2, h)?);
            gate = gate.max(check_gates(backbone, &hist, &gates, &snap, l2, h)?);
        }
    }
    Ok(GradcheckReport {
        shapes,
        backbone_max_rel_error: bb,
        gate_max_rel_error: gate,
    })
}
