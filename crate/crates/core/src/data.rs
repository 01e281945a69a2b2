//! Quadruple ingestion, snapshot construction, chronological splits and
//! per-entity interaction history.
//!
//! Timestamps are re-indexed densely to `1..=n` when a [`TemporalKg`] is
//! built, so "adjacent snapshots" always means indices `t - 1` and `t`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A timestamped fact `(subject, relation, object, time)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Quadruple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub time: u64,
}

impl Quadruple {
    pub fn new(subject: usize, relation: usize, object: usize, time: u64) -> Self {
        Self {
            subject,
            relation,
            object,
            time,
        }
    }
}

/// All facts sharing one timestamp index, in source order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub t: usize,
    pub facts: Vec<Quadruple>,
}

impl Snapshot {
    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }
}

/// Result of [`parse_quadruples`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedQuadruples {
    pub quadruples: Vec<Quadruple>,
    /// `1 + max entity id`, or 0 for an empty stream.
    pub num_entities: usize,
    /// `1 + max relation id`, or 0 for an empty stream.
    pub num_relations: usize,
}

/// Parses one quadruple per line: `subject relation object raw_time`,
/// tab- or space-separated. Blank lines and `#` comments are skipped. The
/// stored time is `raw_time / time_gap` (floor).
pub fn parse_quadruples<R: BufRead>(reader: R, time_gap: u64) -> Result<ParsedQuadruples> {
    if time_gap == 0 {
        return Err(Error::invalid("time gap must be positive"));
    }
    const FIELDS: [&str; 4] = ["subject", "relation", "object", "time"];

    let mut out = ParsedQuadruples::default();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = trimmed.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 4 fields, found {}", cols.len()),
            });
        }
        let mut vals = [0u64; 4];
        for (i, col) in cols.iter().enumerate() {
            let v: i64 = col.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("field `{}` is not an integer: {col:?}", FIELDS[i]),
            })?;
            if v < 0 {
                return Err(Error::Range {
                    line: lineno,
                    field: FIELDS[i],
                    value: v,
                });
            }
            vals[i] = v as u64;
        }
        let q = Quadruple::new(
            vals[0] as usize,
            vals[1] as usize,
            vals[2] as usize,
            vals[3] / time_gap,
        );
        out.num_entities = out.num_entities.max(q.subject.max(q.object) + 1);
        out.num_relations = out.num_relations.max(q.relation + 1);
        out.quadruples.push(q);
    }
    Ok(out)
}

/// Chronological split boundaries, as inclusive last timestamp of each part:
/// train is `1..=train_end`, valid `train_end+1..=valid_end`, test
/// `valid_end+1..=test_end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_end: usize,
    pub valid_end: usize,
    pub test_end: usize,
}

impl Split {
    pub fn train(&self) -> RangeInclusive<usize> {
        1..=self.train_end
    }

    pub fn valid(&self) -> RangeInclusive<usize> {
        self.train_end + 1..=self.valid_end
    }

    pub fn test(&self) -> RangeInclusive<usize> {
        self.valid_end + 1..=self.test_end
    }
}

/// An ordered sequence of snapshots with dense timestamps `1..=n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalKg {
    snapshots: Vec<Snapshot>,
    pub num_entities: usize,
    pub num_relations: usize,
    pub split: Option<Split>,
}

impl TemporalKg {
    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn num_timestamps(&self) -> usize {
        self.snapshots.len()
    }

    pub fn num_facts(&self) -> usize {
        self.snapshots.iter().map(Snapshot::len).sum()
    }

    /// Snapshot at dense timestamp `t` (1-based).
    pub fn snapshot(&self, t: usize) -> Option<&Snapshot> {
        t.checked_sub(1).and_then(|i| self.snapshots.get(i))
    }

    pub fn split(&self) -> Result<Split> {
        self.split
            .ok_or_else(|| Error::invalid("temporal KG has no train/valid/test split"))
    }

    /// Widens the vocabularies, e.g. when the id space is known to be larger
    /// than the ids present in the file.
    pub fn with_vocab(mut self, num_entities: usize, num_relations: usize) -> Result<Self> {
        if num_entities < self.num_entities || num_relations < self.num_relations {
            return Err(Error::invalid(format!(
                "vocabulary ({num_entities}, {num_relations}) smaller than ids present ({}, {})",
                self.num_entities, self.num_relations
            )));
        }
        self.num_entities = num_entities;
        self.num_relations = num_relations;
        Ok(self)
    }

    /// Writes every fact as `s\tr\to\tt` with the dense timestamp. Parsing the
    /// output with a time gap of 1 rebuilds an identical graph.
    pub fn write_quadruples<W: Write>(&self, mut w: W) -> Result<()> {
        for snap in &self.snapshots {
            for q in &snap.facts {
                writeln!(w, "{}\t{}\t{}\t{}", q.subject, q.relation, q.object, q.time)?;
            }
        }
        Ok(())
    }
}

/// Groups quadruples by time, sorts ascending and re-indexes timestamps to
/// `1..=n`. Fact order within a snapshot follows input order.
pub fn build_temporal_kg(quads: &[Quadruple]) -> Result<TemporalKg> {
    if quads.is_empty() {
        return Err(Error::invalid("cannot build a temporal KG from zero quadruples"));
    }
    let mut groups: BTreeMap<u64, Vec<Quadruple>> = BTreeMap::new();
    let mut num_entities = 0;
    let mut num_relations = 0;
    for q in quads {
        num_entities = num_entities.max(q.subject.max(q.object) + 1);
        num_relations = num_relations.max(q.relation + 1);
        groups.entry(q.time).or_default().push(*q);
    }
    let snapshots = groups
        .into_values()
        .enumerate()
        .map(|(i, mut facts)| {
            let t = i + 1;
            for f in &mut facts {
                f.time = t as u64;
            }
            Snapshot { t, facts }
        })
        .collect();
    Ok(TemporalKg {
        snapshots,
        num_entities,
        num_relations,
        split: None,
    })
}

/// Splits by whole timestamps: `k = floor(p0 * n)`, `m = floor((p0 + p1) * n)`,
/// clamped so train holds at least two snapshots and valid and test at
/// least one each.
pub fn split_by_time(mut kg: TemporalKg, proportions: [f64; 3]) -> Result<TemporalKg> {
    let n = kg.num_timestamps();
    if n < 4 {
        return Err(Error::invalid(format!(
            "need at least 4 snapshots to split, found {n}"
        )));
    }
    if proportions.iter().any(|p| !p.is_finite() || *p <= 0.0) {
        return Err(Error::invalid("split proportions must be positive"));
    }
    let total: f64 = proportions.iter().sum();
    let frac_train = proportions[0] / total;
    let frac_valid = (proportions[0] + proportions[1]) / total;
    // Absorb representation error such as 0.8 * 10 = 7.999...
    let floor = |x: f64| (x + 1e-9).floor() as usize;
    let k = floor(frac_train * n as f64).clamp(2, n - 2);
    let m = floor(frac_valid * n as f64).clamp(k + 1, n - 1);
    kg.split = Some(Split {
        train_end: k,
        valid_end: m,
        test_end: n,
    });
    Ok(kg)
}

/// Which facts count as history for [`HistoryIndex`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistoryMode {
    /// Every fact strictly before the query timestamp, including earlier
    /// valid and test facts.
    #[default]
    AllPreceding,
    /// Only facts from the training span.
    TrainOnly,
}

/// Cumulative per-entity interaction counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryIndex {
    /// `prefix[i][e]` = facts involving `e` at timestamps `< i + 1`.
    prefix: Vec<Vec<u32>>,
    pub mode: HistoryMode,
}

impl HistoryIndex {
    /// Number of facts with `e` as subject or object strictly before `t`.
    /// Timestamps past the end saturate at the final total.
    pub fn count(&self, entity: usize, t: usize) -> u32 {
        let row = t.saturating_sub(1).min(self.prefix.len() - 1);
        self.prefix[row].get(entity).copied().unwrap_or(0)
    }

    pub fn num_entities(&self) -> usize {
        self.prefix[0].len()
    }
}

pub fn build_history_index(kg: &TemporalKg, mode: HistoryMode) -> HistoryIndex {
    let last_counted = match (mode, kg.split) {
        (HistoryMode::TrainOnly, Some(split)) => split.train_end,
        _ => kg.num_timestamps(),
    };
    let mut running = vec![0u32; kg.num_entities];
    let mut prefix = Vec::with_capacity(kg.num_timestamps() + 1);
    prefix.push(running.clone());
    for snap in kg.snapshots() {
        if snap.t <= last_counted {
            for q in &snap.facts {
                running[q.subject] += 1;
                running[q.object] += 1;
            }
        }
        prefix.push(running.clone());
    }
    HistoryIndex { prefix, mode }
}
