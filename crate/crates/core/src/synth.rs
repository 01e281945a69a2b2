//! Synthetic temporal KGs with a rule-table changepoint and cold-start
//! entities.
//!
//! Entities are partitioned into groups. A rule table maps
//! `(relation, subject group)` to an object group; regime A is active for
//! `t < changepoint` and regime B from the changepoint on. Cold entities
//! take part in facts only from the changepoint on.

use std::io::Write;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_temporal_kg, Quadruple, TemporalKg};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub num_entities: usize,
    pub num_relations: usize,
    pub num_groups: usize,
    pub timestamps: usize,
    /// First timestamp (1-based) governed by regime B.
    pub changepoint: usize,
    pub facts_per_snapshot: usize,
    pub noise_rate: f64,
    pub cold_entity_fraction: f64,
    /// Fraction of rules regime B rewrites, in `[0.5, 1]`.
    pub rule_shift: f64,
    /// Zipf exponent of entity popularity within a group; 0 is uniform.
    pub popularity_skew: f64,
    pub seed: u64,
}

impl Default for RegimeSpec {
    fn default() -> Self {
        let timestamps = 60;
        Self {
            num_entities: 200,
            num_relations: 8,
            num_groups: 10,
            timestamps,
            changepoint: changepoint_at(0.85, timestamps),
            facts_per_snapshot: 300,
            noise_rate: 0.1,
            cold_entity_fraction: 0.0,
            rule_shift: 0.5,
            popularity_skew: 1.0,
            seed: 0,
        }
    }
}

/// The timestamp at fraction `frac` of `timestamps`: `floor(frac * T)`.
pub fn changepoint_at(frac: f64, timestamps: usize) -> usize {
    (frac * timestamps as f64 + 1e-9).floor() as usize
}

impl RegimeSpec {
    fn num_cold(&self) -> usize {
        (self.cold_entity_fraction * self.num_entities as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.num_relations == 0 || self.facts_per_snapshot == 0 {
            return bad("relations and facts per snapshot must be positive".into());
        }
        if self.num_groups < 2 {
            return bad(format!("need at least 2 groups, got {}", self.num_groups));
        }
        if self.num_groups > self.num_entities {
            return bad(format!(
                "{} groups cannot be filled by {} entities",
                self.num_groups, self.num_entities
            ));
        }
        if !(1 < self.changepoint && self.changepoint < self.timestamps) {
            return bad(format!(
                "changepoint {} must lie strictly inside 1..{}",
                self.changepoint, self.timestamps
            ));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad(format!("noise rate {} outside [0, 1)", self.noise_rate));
        }
        if !(0.0..1.0).contains(&self.cold_entity_fraction) {
            return bad(format!(
                "cold entity fraction {} outside [0, 1)",
                self.cold_entity_fraction
            ));
        }
        if !(0.5..=1.0).contains(&self.rule_shift) {
            return bad(format!("rule shift {} outside [0.5, 1]", self.rule_shift));
        }
        if !(self.popularity_skew.is_finite() && self.popularity_skew >= 0.0) {
            return bad(format!("popularity skew {} must be >= 0", self.popularity_skew));
        }
        if self.num_cold() > self.num_entities - self.num_groups {
            return bad(format!(
                "{} cold entities leave some group without warm members",
                self.num_cold()
            ));
        }
        Ok(())
    }
}

/// Everything needed to check generated facts against their rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: RegimeSpec,
    pub changepoint: usize,
    /// Group of each entity.
    pub groups: Vec<usize>,
    pub cold_entities: Vec<usize>,
    /// `rules_a[r][g]` is the object group for relation `r`, subject group `g`.
    pub rules_a: Vec<Vec<usize>>,
    pub rules_b: Vec<Vec<usize>>,
}

impl GroundTruth {
    pub fn rules_at(&self, t: usize) -> &[Vec<usize>] {
        if t < self.changepoint {
            &self.rules_a
        } else {
            &self.rules_b
        }
    }

    /// Whether `q` follows the rule table active at its timestamp.
    pub fn consistent(&self, q: &Quadruple) -> bool {
        let rules = self.rules_at(q.time as usize);
        rules[q.relation][self.groups[q.subject]] == self.groups[q.object]
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

pub struct Generated {
    pub kg: TemporalKg,
    pub truth: GroundTruth,
}

pub fn generate(spec: &RegimeSpec) -> Result<Generated> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let g = spec.num_groups;

    let mut order: Vec<usize> = (0..spec.num_entities).collect();
    order.shuffle(&mut rng);
    let mut groups = vec![0; spec.num_entities];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); g];
    for (pos, &e) in order.iter().enumerate() {
        groups[e] = pos % g;
        members[pos % g].push(e);
    }
    // The first `g` entities in shuffled order seed one group each and stay
    // warm.
    let mut cold_pool: Vec<usize> = order[g..].to_vec();
    cold_pool.shuffle(&mut rng);
    let mut cold_entities: Vec<usize> = cold_pool[..spec.num_cold()].to_vec();
    cold_entities.sort_unstable();
    let mut is_cold = vec![false; spec.num_entities];
    for &e in &cold_entities {
        is_cold[e] = true;
    }

    let rules_a: Vec<Vec<usize>> = (0..spec.num_relations)
        .map(|_| (0..g).map(|_| rng.random_range(0..g)).collect())
        .collect();
    let mut rules_b = rules_a.clone();
    let mut slots: Vec<(usize, usize)> = (0..spec.num_relations)
        .flat_map(|r| (0..g).map(move |sg| (r, sg)))
        .collect();
    slots.shuffle(&mut rng);
    let shifted = (spec.rule_shift * slots.len() as f64).ceil() as usize;
    for &(r, sg) in &slots[..shifted.min(slots.len())] {
        // Any group but the old one.
        let step = rng.random_range(1..g);
        rules_b[r][sg] = (rules_a[r][sg] + step) % g;
    }

    // Popularity-weighted samplers over each group's active members.
    let sampler = |active: &dyn Fn(usize) -> bool| -> Result<Vec<(Vec<usize>, WeightedIndex<f64>)>> {
        members
            .iter()
            .map(|m| {
                let (ids, weights): (Vec<usize>, Vec<f64>) = m
                    .iter()
                    .enumerate()
                    .filter(|&(_, &e)| active(e))
                    .map(|(rank, &e)| (e, 1.0 / ((rank + 1) as f64).powf(spec.popularity_skew)))
                    .unzip();
                let dist = WeightedIndex::new(&weights)
                    .map_err(|e| Error::invalid(format!("group sampler: {e}")))?;
                Ok((ids, dist))
            })
            .collect()
    };
    let warm_sampler = sampler(&|e| !is_cold[e])?;
    let all_sampler = sampler(&|_| true)?;
    let warm: Vec<usize> = (0..spec.num_entities).filter(|&e| !is_cold[e]).collect();
    let all: Vec<usize> = (0..spec.num_entities).collect();

    let n_noise = (spec.noise_rate * spec.facts_per_snapshot as f64).floor() as usize;
    let n_rule = spec.facts_per_snapshot - n_noise;
    let mut quads = Vec::with_capacity(spec.timestamps * spec.facts_per_snapshot);
    for t in 1..=spec.timestamps {
        let post = t >= spec.changepoint;
        let (rules, groups_s, pool) = if post {
            (&rules_b, &all_sampler, &all)
        } else {
            (&rules_a, &warm_sampler, &warm)
        };
        let mut facts = Vec::with_capacity(spec.facts_per_snapshot);
        for _ in 0..n_rule {
            let r = rng.random_range(0..spec.num_relations);
            let sg = rng.random_range(0..g);
            let (ids, dist) = &groups_s[sg];
            let s = ids[dist.sample(&mut rng)];
            let og = rules[r][sg];
            let (ids, dist) = &groups_s[og];
            let o = ids[dist.sample(&mut rng)];
            facts.push(Quadruple::new(s, r, o, t as u64));
        }
        for _ in 0..n_noise {
            let s = pool[rng.random_range(0..pool.len())];
            let r = rng.random_range(0..spec.num_relations);
            let o = pool[rng.random_range(0..pool.len())];
            facts.push(Quadruple::new(s, r, o, t as u64));
        }
        facts.shuffle(&mut rng);
        quads.extend(facts);
    }

    let kg = build_temporal_kg(&quads)?;
    Ok(Generated {
        kg,
        truth: GroundTruth {
            spec: spec.clone(),
            changepoint: spec.changepoint,
            groups,
            cold_entities,
            rules_a,
            rules_b,
        },
    })
}
