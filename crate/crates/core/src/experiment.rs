//! End-to-end pipelines: train, adapt/evaluate, and assemble reports.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{init_params, Backbone, ParamSet};
use crate::config::MetaConfig;
use crate::data::{build_history_index, HistoryMode, TemporalKg};
use crate::error::{Error, Result};
use crate::eval::{
    bucket_by_history, bucket_by_period, compute_metrics, EvalReport, HistoryBucket, HistoryKey,
    PercentReport, PeriodBucket, RankLog,
};
use crate::meta::{
    evaluate_baseline, make_tasks, BaselineMode, GateSet, LossRecord, MetaLearner,
    SequentialTrainer,
};

/// How a model is trained and how it meets the test span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Meta,
    Plain,
    Finetune,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Meta => "meta",
            Mode::Plain => "plain",
            Mode::Finetune => "finetune",
        }
    }

    /// Plain and fine-tuned evaluation share one sequentially trained model.
    pub fn trains_meta(self) -> bool {
        self == Mode::Meta
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meta" => Ok(Mode::Meta),
            "plain" => Ok(Mode::Plain),
            "finetune" => Ok(Mode::Finetune),
            other => Err(Error::invalid(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ParamSet,
    pub gates: GateSet,
    pub loss_log: Vec<LossRecord>,
}

/// Initializes from `config.seed` and trains. Sequential training leaves the
/// gates at zero and its loss log empty.
pub fn train_model(
    kg: &TemporalKg,
    config: &MetaConfig,
    mode: Mode,
    backbone: &dyn Backbone,
) -> Result<TrainedModel> {
    config.validate()?;
    let theta = init_params(kg.num_entities, kg.num_relations, config.dim, config.seed)?;
    if mode.trains_meta() {
        let mut learner =
            MetaLearner::new(backbone, config.clone(), theta, GateSet::zeros(config.dim))?;
        learner.train(kg)?;
        let loss_log = learner.loss_log().to_vec();
        let (params, gates) = learner.into_parts();
        Ok(TrainedModel {
            params,
            gates,
            loss_log,
        })
    } else {
        let mut trainer = SequentialTrainer::new(backbone, config.clone(), theta)?;
        trainer.train(kg)?;
        Ok(TrainedModel {
            params: trainer.into_theta(),
            gates: GateSet::zeros(config.dim),
            loss_log: Vec::new(),
        })
    }
}

/// Runs the test protocol of `mode` from trained parameters and returns the
/// test rank log. Meta mode adapts over valid without recording, then over
/// test with recording, starting from a bootstrapped history.
pub fn evaluate_model(
    params: &ParamSet,
    gates: &GateSet,
    kg: &TemporalKg,
    config: &MetaConfig,
    mode: Mode,
    backbone: &dyn Backbone,
) -> Result<RankLog> {
    let split = kg.split()?;
    match mode {
        Mode::Meta => {
            let mut learner =
                MetaLearner::new(backbone, config.clone(), params.clone(), gates.clone())?;
            learner.adapt(&make_tasks(kg, split.valid())?, false)?;
            let log = learner.adapt(&make_tasks(kg, split.test())?, true)?;
            Ok(log.unwrap_or_default())
        }
        Mode::Plain | Mode::Finetune => {
            let bm = if mode == Mode::Plain {
                BaselineMode::Plain
            } else {
                BaselineMode::Finetune
            };
            let (_, log) =
                evaluate_baseline(params.clone(), kg, config, backbone, bm, config.test_steps)?;
            Ok(log)
        }
    }
}

pub struct RunOutcome {
    pub model: TrainedModel,
    pub rank_log: RankLog,
    pub report: EvalReport,
}

pub fn run(
    kg: &TemporalKg,
    config: &MetaConfig,
    mode: Mode,
    backbone: &dyn Backbone,
) -> Result<RunOutcome> {
    let model = train_model(kg, config, mode, backbone)?;
    let rank_log = evaluate_model(&model.params, &model.gates, kg, config, mode, backbone)?;
    let report = compute_metrics(&rank_log)?;
    Ok(RunOutcome {
        model,
        rank_log,
        report,
    })
}

/// Which breakdowns to attach to a report.
#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub periods: Option<usize>,
    pub history_bounds: Option<Vec<u32>>,
    pub history_mode: HistoryMode,
    pub history_key: HistoryKey,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            periods: None,
            history_bounds: None,
            history_mode: HistoryMode::AllPreceding,
            history_key: HistoryKey::Gold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FullReport {
    pub overall: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub periods: Option<Vec<PeriodBucket>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history: Option<Vec<HistoryBucket>>,
}

/// Builds the overall report plus the requested breakdowns. A period count
/// above the number of test timestamps is reduced to one period each.
pub fn build_report(log: &RankLog, kg: &TemporalKg, opts: &ReportOptions) -> Result<FullReport> {
    let overall = compute_metrics(log)?;
    let distinct = log
        .entries
        .iter()
        .map(|e| e.t)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let periods = opts
        .periods
        .map(|p| bucket_by_period(log, p.min(distinct)))
        .transpose()?;
    let history = match &opts.history_bounds {
        Some(bounds) => {
            let hist = build_history_index(kg, opts.history_mode);
            Some(bucket_by_history(log, &hist, bounds, opts.history_key)?)
        }
        None => None,
    };
    Ok(FullReport {
        overall,
        periods,
        history,
    })
}

#[derive(Serialize)]
struct JsonPeriod {
    first_t: usize,
    last_t: usize,
    #[serde(flatten)]
    metrics: PercentReport,
}

#[derive(Serialize)]
struct JsonHistory {
    bucket: String,
    entities: usize,
    count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<PercentReport>,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    mode: &'a str,
    overall: PercentReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    periods: Option<Vec<JsonPeriod>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    history: Option<Vec<JsonHistory>>,
}

impl FullReport {
    /// JSON with metrics as percentages at two decimals.
    pub fn write_json<W: Write>(&self, mode: Mode, mut w: W) -> Result<()> {
        let json = JsonReport {
            mode: mode.as_str(),
            overall: self.overall.as_percentages(),
            periods: self.periods.as_ref().map(|ps| {
                ps.iter()
                    .map(|p| JsonPeriod {
                        first_t: p.first_t,
                        last_t: p.last_t,
                        metrics: p.report.as_percentages(),
                    })
                    .collect()
            }),
            history: self.history.as_ref().map(|hs| {
                hs.iter()
                    .map(|h| JsonHistory {
                        bucket: h.label(),
                        entities: h.entities,
                        count: h.count,
                        metrics: h.report.map(|r| r.as_percentages()),
                    })
                    .collect()
            }),
        };
        serde_json::to_writer_pretty(&mut w, &json)?;
        writeln!(w)?;
        Ok(())
    }
}
