//! The temporal meta-learner.
//!
//! Each meta-task pairs adjacent snapshots: the earlier one is the support
//! set and the later one the query set. Tasks are learned one at a time in
//! chronological order. Per task the learner
//!
//! 1. initializes support-side parameters by gating the two previous task
//!    outputs ([`init_support_params`]),
//! 2. takes a gradient step on the support loss ([`inner_update`]) and on
//!    the gates ([`gate_update`]),
//! 3. starts the query side from the previous task output
//!    ([`init_query_params`]) and applies the query-loss gradient taken at
//!    the adapted support parameters ([`outer_update`]),
//! 4. pushes the result into the two-slot history.

mod baseline;
mod gates;

use std::io::Write;

use serde::Serialize;

use crate::backbone::{objective_grad, Backbone, GradSet, ParamSet};
use crate::config::{Ablation, MetaConfig};
use crate::data::{Snapshot, TemporalKg};
use crate::error::{Error, Result};
use crate::eval::{rank_snapshot, RankLog};
use crate::optim::{sgd_step, StepRule};

pub use baseline::{evaluate_baseline, run_baseline, BaselineMode, BaselineOutcome, SequentialTrainer};
pub use gates::{
    gate_gradient, gate_update, init_support_params, sigmoid, support_init_for, GateMeans,
    GateSet, ParamHistory,
};

/// Support/query pair of adjacent snapshots.
#[derive(Debug, Clone, Copy)]
pub struct MetaTask<'a> {
    pub t: usize,
    pub support: &'a Snapshot,
    pub query: &'a Snapshot,
}

/// One task per `t` in `span`, with support `t - 1` and query `t`.
pub fn make_tasks(
    kg: &TemporalKg,
    span: std::ops::RangeInclusive<usize>,
) -> Result<Vec<MetaTask<'_>>> {
    let (start, end) = (*span.start(), *span.end());
    if start < 2 {
        return Err(Error::invalid(format!(
            "task span must start at t >= 2, got {start}"
        )));
    }
    if end > kg.num_timestamps() {
        return Err(Error::invalid(format!(
            "task span ends at {end} but the graph has {} snapshots",
            kg.num_timestamps()
        )));
    }
    Ok(span
        .map(|t| MetaTask {
            t,
            support: kg.snapshot(t - 1).expect("bounds checked"),
            query: kg.snapshot(t).expect("bounds checked"),
        })
        .collect())
}

/// `theta' = theta_s - alpha * grad`, returning the support gradient for
/// the gate update.
pub fn inner_update(
    theta_s: &ParamSet,
    support: &Snapshot,
    alpha: f64,
    l2: f64,
    backbone: &dyn Backbone,
) -> Result<(ParamSet, GradSet, f64)> {
    let (loss, grad) = objective_grad(backbone, theta_s, support, l2)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("support loss is {loss}")));
    }
    let mut adapted = theta_s.clone();
    sgd_step(&mut adapted, &grad, alpha);
    Ok((adapted, grad, loss))
}

/// The query side starts from the previous task output, by value.
pub fn init_query_params(hist: &ParamHistory) -> ParamSet {
    hist.theta_prev.clone()
}

/// First-order outer step: the query gradient is evaluated at
/// `theta_inner` and applied to `theta_q`.
pub fn outer_update(
    theta_q: &ParamSet,
    theta_inner: &ParamSet,
    query: &Snapshot,
    beta: f64,
    l2: f64,
    backbone: &dyn Backbone,
    rule: &mut StepRule,
) -> Result<(ParamSet, f64)> {
    theta_q.check_shape(theta_inner)?;
    let (loss, grad) = objective_grad(backbone, theta_inner, query, l2)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("query loss is {loss}")));
    }
    let mut theta_t = theta_q.clone();
    rule.apply(&mut theta_t, &grad, beta);
    Ok((theta_t, loss))
}

/// Counts of parameter updates, for step accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpdateCounters {
    pub support: usize,
    pub query: usize,
    pub gate: usize,
}

/// One row of the training loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub t: usize,
    pub support_loss: f64,
    pub query_loss: f64,
    pub gates: GateMeans,
}

pub fn write_loss_log<W: Write>(records: &[LossRecord], mut w: W) -> Result<()> {
    writeln!(
        w,
        "epoch,t,support_loss,query_loss,gate_ent_mean,gate_rel_mean,gate_other_mean"
    )?;
    for r in records {
        writeln!(
            w,
            "{},{},{:?},{:?},{:?},{:?},{:?}",
            r.epoch, r.t, r.support_loss, r.query_loss, r.gates.ent, r.gates.rel, r.gates.other
        )?;
    }
    Ok(())
}

/// What an observer sees after each completed task.
pub struct TaskEvent<'a> {
    pub record: &'a LossRecord,
    /// `theta_t` produced by this task.
    pub theta_t: &'a ParamSet,
    /// History after the push.
    pub history: &'a ParamHistory,
    pub gates: &'a GateSet,
    pub counters: UpdateCounters,
}

/// Drives training and adaptation while holding the two-slot history.
pub struct MetaLearner<'b> {
    backbone: &'b dyn Backbone,
    config: MetaConfig,
    history: ParamHistory,
    gates: GateSet,
    rule: StepRule,
    counters: UpdateCounters,
    log: Vec<LossRecord>,
}

impl<'b> MetaLearner<'b> {
    pub fn new(
        backbone: &'b dyn Backbone,
        config: MetaConfig,
        theta: ParamSet,
        gates: GateSet,
    ) -> Result<Self> {
        config.validate()?;
        if gates.dim() != theta.dim() {
            return Err(Error::Shape(format!(
                "gate dim {} vs parameter dim {}",
                gates.dim(),
                theta.dim()
            )));
        }
        let rule = StepRule::new(config.optimizer, &theta);
        Ok(Self {
            backbone,
            config,
            history: ParamHistory::bootstrap(theta),
            gates,
            rule,
            counters: UpdateCounters::default(),
            log: Vec::new(),
        })
    }

    /// Current parameters, the output of the last completed task.
    pub fn theta(&self) -> &ParamSet {
        &self.history.theta_prev
    }

    pub fn gates(&self) -> &GateSet {
        &self.gates
    }

    pub fn history(&self) -> &ParamHistory {
        &self.history
    }

    pub fn counters(&self) -> UpdateCounters {
        self.counters
    }

    pub fn loss_log(&self) -> &[LossRecord] {
        &self.log
    }

    pub fn config(&self) -> &MetaConfig {
        &self.config
    }

    /// Optimizer state of the query-side updates.
    pub fn step_rule(&self) -> &StepRule {
        &self.rule
    }

    /// Continues from saved optimizer state instead of a fresh one.
    pub fn set_step_rule(&mut self, rule: StepRule) -> Result<()> {
        rule.check_compatible(self.config.optimizer, &self.history.theta_prev)?;
        self.rule = rule;
        Ok(())
    }

    pub fn into_parts(self) -> (ParamSet, GateSet) {
        (self.history.theta_prev, self.gates)
    }

    /// Resets both history slots to the current parameters.
    pub fn reset_history(&mut self) {
        let theta = self.history.theta_prev.clone();
        self.history = ParamHistory::bootstrap(theta);
    }

    pub fn train(&mut self, kg: &TemporalKg) -> Result<()> {
        self.train_observed(kg, |_| {})
    }

    /// Runs `config.epochs` passes over the training tasks, calling
    /// `observer` after every task.
    pub fn train_observed<F>(&mut self, kg: &TemporalKg, mut observer: F) -> Result<()>
    where
        F: FnMut(&TaskEvent<'_>),
    {
        let split = kg.split()?;
        let tasks = make_tasks(kg, 2..=split.train_end)?;
        for epoch in 0..self.config.epochs {
            // Consecutive epochs are not temporally adjacent.
            self.reset_history();
            for task in &tasks {
                let record = self.train_task(epoch, task).map_err(|e| e.at_task(task.t))?;
                observer(&TaskEvent {
                    record: &record,
                    theta_t: &self.history.theta_prev,
                    history: &self.history,
                    gates: &self.gates,
                    counters: self.counters,
                });
                self.log.push(record);
            }
        }
        Ok(())
    }

    fn train_task(&mut self, epoch: usize, task: &MetaTask<'_>) -> Result<LossRecord> {
        let cfg = &self.config;
        let theta_s = support_init_for(cfg.ablation, &self.history, &self.gates)?;
        let (adapted, support_grad, support_loss) =
            inner_update(&theta_s, task.support, cfg.alpha, cfg.l2, self.backbone)?;
        self.counters.support += 1;
        if cfg.ablation != Ablation::NoGate {
            self.gates = gate_update(
                &self.gates,
                &self.history,
                &support_grad,
                cfg.gate_lr(),
                cfg.ablation,
            )?;
            self.counters.gate += 1;
        }
        let theta_q = init_query_params(&self.history);
        let (theta_t, query_loss) = outer_update(
            &theta_q,
            &adapted,
            task.query,
            cfg.beta,
            cfg.l2,
            self.backbone,
            &mut self.rule,
        )?;
        self.counters.query += 1;
        self.history.push(theta_t);
        Ok(LossRecord {
            epoch,
            t: task.t,
            support_loss,
            query_loss,
            gates: self.gates.means(),
        })
    }

    /// Valid/test adaptation: `config.test_steps` support steps per task
    /// (gates updated after the first only), optional ranking of the query
    /// snapshot under the adapted parameters, then the query update using
    /// the now-observed query facts.
    pub fn adapt(&mut self, tasks: &[MetaTask<'_>], record: bool) -> Result<Option<RankLog>> {
        if tasks.windows(2).any(|w| w[1].t != w[0].t + 1) {
            return Err(Error::invalid("adaptation tasks must be consecutive and ascending"));
        }
        let mut log = record.then(RankLog::default);
        for task in tasks {
            let ranks = self
                .adapt_task(task, record)
                .map_err(|e| e.at_task(task.t))?;
            if let (Some(log), Some(r)) = (log.as_mut(), ranks) {
                log.extend(r);
            }
        }
        Ok(log)
    }

    fn adapt_task(&mut self, task: &MetaTask<'_>, record: bool) -> Result<Option<RankLog>> {
        let cfg = &self.config;
        let theta_s = support_init_for(cfg.ablation, &self.history, &self.gates)?;
        let (mut adapted, support_grad, _) =
            inner_update(&theta_s, task.support, cfg.alpha, cfg.l2, self.backbone)?;
        self.counters.support += 1;
        if cfg.gate_update_in_eval && cfg.ablation != Ablation::NoGate {
            self.gates = gate_update(
                &self.gates,
                &self.history,
                &support_grad,
                cfg.gate_lr(),
                cfg.ablation,
            )?;
            self.counters.gate += 1;
        }
        for _ in 1..cfg.test_steps {
            let (next, _, _) = inner_update(&adapted, task.support, cfg.alpha, cfg.l2, self.backbone)?;
            adapted = next;
            self.counters.support += 1;
        }
        let ranks = if record {
            Some(rank_snapshot(&adapted, self.backbone, task.query)?)
        } else {
            None
        };
        let theta_q = init_query_params(&self.history);
        let (theta_t, _) = outer_update(
            &theta_q,
            &adapted,
            task.query,
            cfg.beta,
            cfg.l2,
            self.backbone,
            &mut self.rule,
        )?;
        self.counters.query += 1;
        self.history.push(theta_t);
        Ok(ranks)
    }
}

/// Trains from `theta` with zero-initialized gates.
pub fn train(
    kg: &TemporalKg,
    config: &MetaConfig,
    backbone: &dyn Backbone,
    theta: ParamSet,
) -> Result<(ParamSet, GateSet, Vec<LossRecord>)> {
    let gates = GateSet::zeros(theta.dim());
    let mut learner = MetaLearner::new(backbone, config.clone(), theta, gates)?;
    learner.train(kg)?;
    let log = learner.loss_log().to_vec();
    let (theta, gates) = learner.into_parts();
    Ok((theta, gates, log))
}

/// Adapts `theta` over `tasks` starting from a bootstrapped history.
pub fn adapt(
    theta: ParamSet,
    gates: GateSet,
    tasks: &[MetaTask<'_>],
    config: &MetaConfig,
    backbone: &dyn Backbone,
    record: bool,
) -> Result<(ParamSet, GateSet, Option<RankLog>)> {
    let mut learner = MetaLearner::new(backbone, config.clone(), theta, gates)?;
    let log = learner.adapt(tasks, record)?;
    let (theta, gates) = learner.into_parts();
    Ok((theta, gates, log))
}
