//! Raw-setting ranking, MRR / Hits@k, and period- and history-bucketed
//! reports.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{directed_queries, Backbone, Direction, ParamSet};
use crate::data::{HistoryIndex, Snapshot};
use crate::error::{Error, Result};

/// Upper bounds of the default history buckets:
/// `[0, 50]`, `(50, 200]`, `(200, 500]`, `(500, inf)`.
pub const DEFAULT_HISTORY_BOUNDS: [u32; 3] = [50, 200, 500];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankEntry {
    pub t: usize,
    /// The known entity of the query: the subject for object queries and
    /// the object for subject queries.
    pub anchor: usize,
    pub relation: usize,
    pub direction: Direction,
    pub gold: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RankLog {
    pub entries: Vec<RankEntry>,
}

impl RankLog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn extend(&mut self, other: RankLog) {
        self.entries.extend(other.entries);
    }

    /// CSV with header `t,subject,relation,direction,gold,rank`, where
    /// `subject` is the query's known entity.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,subject,relation,direction,gold,rank")?;
        for e in &self.entries {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                e.t,
                e.anchor,
                e.relation,
                e.direction.as_str(),
                e.gold,
                e.rank
            )?;
        }
        Ok(())
    }
}

impl Serialize for Direction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Direction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        match s.as_str() {
            "object" => Ok(Direction::Object),
            "subject" => Ok(Direction::Subject),
            other => Err(serde::de::Error::custom(format!("unknown direction {other:?}"))),
        }
    }
}

/// Pessimistic rank of `gold` among all scores: one plus the number of
/// other entities scoring at least as high.
pub fn rank_from_scores(scores: &[f64], gold: usize) -> usize {
    let g = scores[gold];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(e, &s)| e != gold && s >= g)
        .count()
}

/// Ranks `gold` against every entity under the raw setting.
pub fn rank_query(
    params: &ParamSet,
    backbone: &dyn Backbone,
    anchor: usize,
    r_dir: usize,
    gold: usize,
) -> Result<usize> {
    let scores = backbone.score_all(params, anchor, r_dir)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite score for query ({anchor}, {r_dir}, ?)"
        )));
    }
    if gold >= scores.len() {
        return Err(Error::Index {
            kind: "entity",
            id: gold,
            bound: scores.len(),
        });
    }
    Ok(rank_from_scores(&scores, gold))
}

/// Ranks both directed queries of every fact in `snap`.
pub fn rank_snapshot(
    params: &ParamSet,
    backbone: &dyn Backbone,
    snap: &Snapshot,
) -> Result<RankLog> {
    let num_rel = params.num_relations();
    let entries: Result<Vec<RankEntry>> = directed_queries(snap)
        .par_iter()
        .map(|q| {
            let rank = rank_query(params, backbone, q.anchor, q.r_dir(num_rel), q.gold)?;
            Ok(RankEntry {
                t: snap.t,
                anchor: q.anchor,
                relation: q.relation,
                direction: q.direction,
                gold: q.gold,
                rank,
            })
        })
        .collect();
    Ok(RankLog { entries: entries? })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub count: usize,
}

impl EvalReport {
    /// The report with metrics as percentages rounded to two decimals.
    pub fn as_percentages(&self) -> PercentReport {
        let pct = |v: f64| (v * 10000.0).round() / 100.0;
        PercentReport {
            mrr: pct(self.mrr),
            hits1: pct(self.hits1),
            hits3: pct(self.hits3),
            hits10: pct(self.hits10),
            count: self.count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentReport {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub count: usize,
}

pub fn compute_metrics(log: &RankLog) -> Result<EvalReport> {
    metrics_of(log.entries.iter())
}

fn metrics_of<'a>(entries: impl Iterator<Item = &'a RankEntry>) -> Result<EvalReport> {
    let (mut count, mut rr, mut h1, mut h3, mut h10) = (0usize, 0.0, 0usize, 0usize, 0usize);
    for e in entries {
        count += 1;
        rr += 1.0 / e.rank as f64;
        h1 += usize::from(e.rank <= 1);
        h3 += usize::from(e.rank <= 3);
        h10 += usize::from(e.rank <= 10);
    }
    if count == 0 {
        return Err(Error::invalid("cannot compute metrics of an empty rank log"));
    }
    let n = count as f64;
    Ok(EvalReport {
        mrr: rr / n,
        hits1: h1 as f64 / n,
        hits3: h3 as f64 / n,
        hits10: h10 as f64 / n,
        count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodBucket {
    pub first_t: usize,
    pub last_t: usize,
    pub report: EvalReport,
}

/// Splits the log's distinct timestamps into `periods` contiguous spans of
/// near-equal length (earlier spans take the remainder) and reports each.
pub fn bucket_by_period(log: &RankLog, periods: usize) -> Result<Vec<PeriodBucket>> {
    let ts: Vec<usize> = log
        .entries
        .iter()
        .map(|e| e.t)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if periods == 0 || ts.len() < periods {
        return Err(Error::invalid(format!(
            "{} distinct timestamps cannot form {periods} periods",
            ts.len()
        )));
    }
    let base = ts.len() / periods;
    let extra = ts.len() % periods;
    let mut out = Vec::with_capacity(periods);
    let mut start = 0;
    for p in 0..periods {
        let len = base + usize::from(p < extra);
        let (first_t, last_t) = (ts[start], ts[start + len - 1]);
        let report = metrics_of(
            log.entries
                .iter()
                .filter(|e| e.t >= first_t && e.t <= last_t),
        )?;
        out.push(PeriodBucket {
            first_t,
            last_t,
            report,
        });
        start += len;
    }
    Ok(out)
}

/// Which entity of a query keys the history lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistoryKey {
    #[default]
    Gold,
    Anchor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryBucket {
    /// Inclusive lower bound of the interaction count.
    pub lower: u32,
    /// Inclusive upper bound; `None` is unbounded.
    pub upper: Option<u32>,
    pub count: usize,
    /// Distinct keyed entities whose queries fell in this bucket.
    pub entities: usize,
    /// `None` when the bucket is empty.
    pub report: Option<EvalReport>,
}

impl HistoryBucket {
    pub fn label(&self) -> String {
        match (self.lower, self.upper) {
            (0, Some(u)) => format!("[0,{u}]"),
            (l, Some(u)) => format!("({},{u}]", l - 1),
            (l, None) => format!("({},inf)", l.saturating_sub(1)),
        }
    }
}

/// Assigns each entry by the keyed entity's interaction count before the
/// entry's timestamp. `bounds` are inclusive upper bounds; a final unbounded
/// bucket catches the rest.
pub fn bucket_by_history(
    log: &RankLog,
    hist: &HistoryIndex,
    bounds: &[u32],
    key: HistoryKey,
) -> Result<Vec<HistoryBucket>> {
    if bounds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("history bounds must be strictly ascending"));
    }
    let nb = bounds.len() + 1;
    let mut members: Vec<Vec<&RankEntry>> = vec![Vec::new(); nb];
    let mut entity_sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nb];
    for e in &log.entries {
        let ent = match key {
            HistoryKey::Gold => e.gold,
            HistoryKey::Anchor => e.anchor,
        };
        let c = hist.count(ent, e.t);
        let b = bounds.iter().position(|&u| c <= u).unwrap_or(bounds.len());
        members[b].push(e);
        entity_sets[b].insert(ent);
    }
    let mut out = Vec::with_capacity(nb);
    for (b, entries) in members.into_iter().enumerate() {
        let lower = if b == 0 { 0 } else { bounds[b - 1] + 1 };
        let upper = bounds.get(b).copied();
        let count = entries.len();
        let report = if count == 0 {
            None
        } else {
            Some(metrics_of(entries.into_iter())?)
        };
        out.push(HistoryBucket {
            lower,
            upper,
            count,
            entities: entity_sets[b].len(),
            report,
        });
    }
    Ok(out)
}
