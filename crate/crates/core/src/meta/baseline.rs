//! Non-meta baselines: plain sequential training, and the same model
//! fine-tuned with multi-step updates at test time.

use serde::{Deserialize, Serialize};

use super::make_tasks;
use crate::backbone::{objective_grad, Backbone, ParamSet};
use crate::config::MetaConfig;
use crate::data::TemporalKg;
use crate::error::{Error, Result};
use crate::eval::{rank_snapshot, RankLog};
use crate::optim::{sgd_step, StepRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    /// Frozen parameters at test time.
    Plain,
    /// `test_steps` support-snapshot steps before each prediction, carried
    /// forward through valid and test.
    Finetune,
}

/// One gradient step per training snapshot, in chronological order.
pub struct SequentialTrainer<'b> {
    backbone: &'b dyn Backbone,
    config: MetaConfig,
    theta: ParamSet,
    rule: StepRule,
    steps: usize,
}

impl<'b> SequentialTrainer<'b> {
    pub fn new(backbone: &'b dyn Backbone, config: MetaConfig, theta: ParamSet) -> Result<Self> {
        config.validate()?;
        let rule = StepRule::new(config.optimizer, &theta);
        Ok(Self {
            backbone,
            config,
            theta,
            rule,
            steps: 0,
        })
    }

    pub fn theta(&self) -> &ParamSet {
        &self.theta
    }

    pub fn into_theta(self) -> ParamSet {
        self.theta
    }

    /// Gradient steps taken so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Runs `config.epochs` passes; returns the per-step losses.
    pub fn train(&mut self, kg: &TemporalKg) -> Result<Vec<(usize, usize, f64)>> {
        let split = kg.split()?;
        let mut losses = Vec::new();
        for epoch in 0..self.config.epochs {
            for t in split.train() {
                let snap = kg.snapshot(t).expect("split within graph");
                let (loss, grad) = objective_grad(self.backbone, &self.theta, snap, self.config.l2)
                    .map_err(|e| e.at_task(t))?;
                self.rule.apply(&mut self.theta, &grad, self.config.beta);
                self.steps += 1;
                losses.push((epoch, t, loss));
            }
        }
        Ok(losses)
    }
}

/// Evaluates a sequentially trained model on the test span.
///
/// `Plain` ranks every test snapshot with `theta` unchanged. `Finetune`
/// walks valid then test tasks, taking `test_steps` gradient steps on each
/// support snapshot before ranking the query snapshot (test tasks only);
/// the fine-tuned parameters carry over to the next task.
pub fn evaluate_baseline(
    theta: ParamSet,
    kg: &TemporalKg,
    config: &MetaConfig,
    backbone: &dyn Backbone,
    mode: BaselineMode,
    steps: usize,
) -> Result<(ParamSet, RankLog)> {
    let split = kg.split()?;
    let mut theta = theta;
    let mut log = RankLog::default();
    let finetune = mode == BaselineMode::Finetune && steps > 0;
    if finetune {
        for task in make_tasks(kg, split.valid())? {
            for _ in 0..steps {
                let (_, g) = objective_grad(backbone, &theta, task.support, config.l2)
                    .map_err(|e| e.at_task(task.t))?;
                sgd_step(&mut theta, &g, config.alpha);
            }
        }
    }
    for task in make_tasks(kg, split.test())? {
        if finetune {
            for _ in 0..steps {
                let (_, g) = objective_grad(backbone, &theta, task.support, config.l2)
                    .map_err(|e| e.at_task(task.t))?;
                sgd_step(&mut theta, &g, config.alpha);
            }
        }
        log.extend(rank_snapshot(&theta, backbone, task.query)?);
    }
    if !theta.is_finite() {
        return Err(Error::Numeric("fine-tuned parameters are not finite".into()));
    }
    Ok((theta, log))
}

pub struct BaselineOutcome {
    /// Parameters after sequential training.
    pub trained: ParamSet,
    pub rank_log: RankLog,
    pub train_steps: usize,
}

/// Sequential training followed by plain or fine-tuned evaluation with
/// `config.test_steps` steps.
pub fn run_baseline(
    kg: &TemporalKg,
    config: &MetaConfig,
    backbone: &dyn Backbone,
    theta: ParamSet,
    mode: BaselineMode,
) -> Result<BaselineOutcome> {
    let mut trainer = SequentialTrainer::new(backbone, config.clone(), theta)?;
    trainer.train(kg)?;
    let train_steps = trainer.steps();
    let trained = trainer.into_theta();
    let (_, rank_log) =
        evaluate_baseline(trained.clone(), kg, config, backbone, mode, config.test_steps)?;
    Ok(BaselineOutcome {
        trained,
        rank_log,
        train_steps,
    })
}
