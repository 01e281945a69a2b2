//! The backbone contract and the built-in weighted trilinear scorer.
//!
//! Parameters are stored in three disjoint components (entity embeddings,
//! relation embeddings, other weights) because the meta-learner gates each
//! component separately. Relation rows `r` and `r + |R|` hold the forward
//! and inverse direction of relation `r`; subject queries use the inverse
//! row.

use std::io::{Read, Write};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Quadruple, Snapshot};
use crate::error::{Error, Result};

/// Queries per work unit. Fixed so that floating-point reductions happen in
/// the same order regardless of thread count.
const QUERY_CHUNK: usize = 64;

const PARAM_MAGIC: &[u8; 8] = b"TMPARAM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    Entity,
    Relation,
    Other,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Entity, Component::Relation, Component::Other];
}

/// Component-partitioned flat parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    num_entities: usize,
    num_relations: usize,
    dim: usize,
    /// Seed the set was initialized from; carried into checkpoints.
    pub seed: u64,
    /// `num_entities x dim`, row-major.
    pub entity: Vec<f64>,
    /// `2 * num_relations x dim`, row-major.
    pub relation: Vec<f64>,
    /// Diagonal weight of the trilinear scorer, length `dim`.
    pub other: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type GradSet = ParamSet;

impl ParamSet {
    pub fn zeros(num_entities: usize, num_relations: usize, dim: usize) -> Self {
        Self {
            num_entities,
            num_relations,
            dim,
            seed: 0,
            entity: vec![0.0; num_entities * dim],
            relation: vec![0.0; 2 * num_relations * dim],
            other: vec![0.0; dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.num_entities, self.num_relations, self.dim);
        z.seed = self.seed;
        z
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.num_entities == other.num_entities
            && self.num_relations == other.num_relations
            && self.dim == other.dim
    }

    pub(crate) fn check_shape(&self, other: &ParamSet) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "({}, {}, {}) vs ({}, {}, {})",
                self.num_entities,
                self.num_relations,
                self.dim,
                other.num_entities,
                other.num_relations,
                other.dim
            )))
        }
    }

    pub fn component(&self, c: Component) -> &[f64] {
        match c {
            Component::Entity => &self.entity,
            Component::Relation => &self.relation,
            Component::Other => &self.other,
        }
    }

    pub fn component_mut(&mut self, c: Component) -> &mut [f64] {
        match c {
            Component::Entity => &mut self.entity,
            Component::Relation => &mut self.relation,
            Component::Other => &mut self.other,
        }
    }

    pub fn entity_row(&self, e: usize) -> &[f64] {
        &self.entity[e * self.dim..(e + 1) * self.dim]
    }

    pub fn relation_row(&self, r_dir: usize) -> &[f64] {
        &self.relation[r_dir * self.dim..(r_dir + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.entity.len() + self.relation.len() + self.other.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.entity.iter().chain(&self.relation).chain(&self.other)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.entity
            .iter_mut()
            .chain(self.relation.iter_mut())
            .chain(self.other.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// `self += scale * rhs`.
    pub fn axpy(&mut self, scale: f64, rhs: &ParamSet) {
        debug_assert!(self.same_shape(rhs));
        for (a, b) in self.iter_mut().zip(rhs.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.iter_mut() {
            *v *= s;
        }
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_entity(&self, e: usize) -> Result<()> {
        if e < self.num_entities {
            Ok(())
        } else {
            Err(Error::Index {
                kind: "entity",
                id: e,
                bound: self.num_entities,
            })
        }
    }

    fn check_relation(&self, r_dir: usize) -> Result<()> {
        if r_dir < 2 * self.num_relations {
            Ok(())
        } else {
            Err(Error::Index {
                kind: "directed relation",
                id: r_dir,
                bound: 2 * self.num_relations,
            })
        }
    }

    /// Writes the checkpoint layout documented in the README: magic, four
    /// little-endian `u64` header fields `(|E|, |R|, d, seed)`, then the entity,
    /// relation and other components as little-endian `f64`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PARAM_MAGIC)?;
        for v in [
            self.num_entities as u64,
            self.num_relations as u64,
            self.dim as u64,
            self.seed,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        write_f64s(&mut w, &self.entity)?;
        write_f64s(&mut w, &self.relation)?;
        write_f64s(&mut w, &self.other)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != PARAM_MAGIC {
            return Err(Error::Checkpoint("not a parameter checkpoint".into()));
        }
        let num_entities = read_u64(&mut r)? as usize;
        let num_relations = read_u64(&mut r)? as usize;
        let dim = read_u64(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        let mut p = ParamSet::zeros(num_entities, num_relations, dim);
        p.seed = seed;
        read_f64s(&mut r, &mut p.entity)?;
        read_f64s(&mut r, &mut p.relation)?;
        read_f64s(&mut r, &mut p.other)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(p)
    }
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, vals: &[f64]) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, out: &mut [f64]) -> Result<()> {
    let mut buf = [0u8; 8];
    for v in out {
        r.read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated body: {e}")))?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(())
}

/// Xavier-uniform initialization of both embedding matrices, with `other`
/// set to ones. Deterministic in `seed`.
pub fn init_params(
    num_entities: usize,
    num_relations: usize,
    dim: usize,
    seed: u64,
) -> Result<ParamSet> {
    if num_entities == 0 || num_relations == 0 || dim == 0 {
        return Err(Error::invalid(format!(
            "dimensions must be positive, got |E|={num_entities}, |R|={num_relations}, d={dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::zeros(num_entities, num_relations, dim);
    p.seed = seed;
    let ent = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    let lim = xavier_limit(num_entities, dim);
    for v in &mut p.entity {
        *v = lim * ent.sample(&mut rng);
    }
    let lim = xavier_limit(2 * num_relations, dim);
    for v in &mut p.relation {
        *v = lim * ent.sample(&mut rng);
    }
    p.other.fill(1.0);
    Ok(p)
}

/// `sqrt(6 / (fan_in + fan_out))` for a `rows x cols` matrix.
pub fn xavier_limit(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

/// Which end of a fact a directed query asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    /// `(s, r, ?)`: forward relation row, gold is the object.
    Object,
    /// `(?, r, o)`: inverse relation row, gold is the subject.
    Subject,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Object => "object",
            Direction::Subject => "subject",
        }
    }
}

/// One entity-prediction query: rank `gold` given `anchor` and `r_dir`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectedQuery {
    pub anchor: usize,
    pub relation: usize,
    pub direction: Direction,
    pub gold: usize,
    pub fact: Quadruple,
}

impl DirectedQuery {
    pub fn r_dir(&self, num_relations: usize) -> usize {
        match self.direction {
            Direction::Object => self.relation,
            Direction::Subject => self.relation + num_relations,
        }
    }
}

/// The object query and then the subject query of every fact, in order.
pub fn directed_queries(snap: &Snapshot) -> Vec<DirectedQuery> {
    let mut out = Vec::with_capacity(2 * snap.len());
    for q in &snap.facts {
        out.push(DirectedQuery {
            anchor: q.subject,
            relation: q.relation,
            direction: Direction::Object,
            gold: q.object,
            fact: *q,
        });
        out.push(DirectedQuery {
            anchor: q.object,
            relation: q.relation,
            direction: Direction::Subject,
            gold: q.subject,
            fact: *q,
        });
    }
    out
}

/// A differentiable entity-prediction model over a [`ParamSet`].
///
/// `grad` must return the same loss value `loss` computes on identical
/// inputs, and its gradient must agree with finite differences of `loss`.
pub trait Backbone: Send + Sync {
    fn name(&self) -> &str;

    /// Scores each candidate as the answer to `(anchor, r_dir, ?)`.
    fn score(
        &self,
        params: &ParamSet,
        anchor: usize,
        r_dir: usize,
        candidates: &[usize],
    ) -> Result<Vec<f64>>;

    /// Scores every entity; the default forwards to [`Backbone::score`].
    fn score_all(&self, params: &ParamSet, anchor: usize, r_dir: usize) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..params.num_entities()).collect();
        self.score(params, anchor, r_dir, &all)
    }

    /// Mean cross-entropy over the snapshot's directed queries.
    fn loss(&self, params: &ParamSet, snap: &Snapshot) -> Result<f64>;

    fn grad(&self, params: &ParamSet, snap: &Snapshot) -> Result<(f64, GradSet)>;
}

/// Weighted trilinear scorer:
/// `score(s, r, o) = sum_k w[k] * e_s[k] * r[k] * e_o[k]`, trained with a
/// full softmax over all entities.
#[derive(Debug, Clone, Copy, Default)]
pub struct Trilinear;

impl Trilinear {
    fn check_query(params: &ParamSet, q: &DirectedQuery) -> Result<()> {
        params.check_entity(q.anchor)?;
        params.check_entity(q.gold)?;
        params.check_relation(q.r_dir(params.num_relations))
    }

    /// `w * e_anchor * r` element-wise.
    fn query_vector(params: &ParamSet, anchor: usize, r_dir: usize) -> Vec<f64> {
        let e = params.entity_row(anchor);
        let r = params.relation_row(r_dir);
        params
            .other
            .iter()
            .zip(e)
            .zip(r)
            .map(|((w, e), r)| w * e * r)
            .collect()
    }

    fn scores_into(params: &ParamSet, qv: &[f64], out: &mut [f64]) {
        let d = params.dim;
        for (j, s) in out.iter_mut().enumerate() {
            let row = &params.entity[j * d..(j + 1) * d];
            *s = row.iter().zip(qv).map(|(a, b)| a * b).sum();
        }
    }

    /// Loss of one query, leaving the softmax probabilities in `scores`.
    fn query_loss(params: &ParamSet, q: &DirectedQuery, scores: &mut [f64]) -> Result<f64> {
        let qv = Self::query_vector(params, q.anchor, q.r_dir(params.num_relations));
        Self::scores_into(params, &qv, scores);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let gold_score = scores[q.gold];
        let mut denom = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            denom += *s;
        }
        let loss = denom.ln() + max - gold_score;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss on fact ({}, {}, {}, {})",
                q.fact.subject, q.fact.relation, q.fact.object, q.fact.time
            )));
        }
        for s in scores.iter_mut() {
            *s /= denom;
        }
        Ok(loss)
    }

    fn validated_queries(params: &ParamSet, snap: &Snapshot) -> Result<Vec<DirectedQuery>> {
        if snap.is_empty() {
            return Err(Error::invalid(format!("snapshot t={} is empty", snap.t)));
        }
        let queries = directed_queries(snap);
        for q in &queries {
            Self::check_query(params, q)?;
        }
        Ok(queries)
    }
}

impl Backbone for Trilinear {
    fn name(&self) -> &str {
        "trilinear"
    }

    fn score(
        &self,
        params: &ParamSet,
        anchor: usize,
        r_dir: usize,
        candidates: &[usize],
    ) -> Result<Vec<f64>> {
        params.check_entity(anchor)?;
        params.check_relation(r_dir)?;
        for &c in candidates {
            params.check_entity(c)?;
        }
        let qv = Self::query_vector(params, anchor, r_dir);
        Ok(candidates
            .iter()
            .map(|&c| params.entity_row(c).iter().zip(&qv).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn score_all(&self, params: &ParamSet, anchor: usize, r_dir: usize) -> Result<Vec<f64>> {
        params.check_entity(anchor)?;
        params.check_relation(r_dir)?;
        let qv = Self::query_vector(params, anchor, r_dir);
        let mut out = vec![0.0; params.num_entities];
        Self::scores_into(params, &qv, &mut out);
        Ok(out)
    }

    fn loss(&self, params: &ParamSet, snap: &Snapshot) -> Result<f64> {
        let queries = Self::validated_queries(params, snap)?;
        let partials: Vec<Result<f64>> = queries
            .par_chunks(QUERY_CHUNK)
            .map(|chunk| {
                let mut scores = vec![0.0; params.num_entities];
                let mut sum = 0.0;
                for q in chunk {
                    sum += Self::query_loss(params, q, &mut scores)?;
                }
                Ok(sum)
            })
            .collect();
        let mut total = 0.0;
        for p in partials {
            total += p?;
        }
        Ok(total / queries.len() as f64)
    }

    fn grad(&self, params: &ParamSet, snap: &Snapshot) -> Result<(f64, GradSet)> {
        let queries = Self::validated_queries(params, snap)?;
        let d = params.dim;
        let num_rel = params.num_relations;
        let partials: Vec<Result<(f64, GradSet)>> = queries
            .par_chunks(QUERY_CHUNK)
            .map(|chunk| {
                let mut g = params.zeros_like();
                let mut probs = vec![0.0; params.num_entities];
                let mut sum = 0.0;
                let mut c = vec![0.0; d];
                for q in chunk {
                    sum += Self::query_loss(params, q, &mut probs)?;
                    probs[q.gold] -= 1.0;
                    let r_dir = q.r_dir(num_rel);
                    let qv = Self::query_vector(params, q.anchor, r_dir);
                    c.fill(0.0);
                    // dL/de_j = (p_j - [j = gold]) * qv ; dL/dqv = sum_j (..) e_j
                    for (j, &diff) in probs.iter().enumerate() {
                        let row = &params.entity[j * d..(j + 1) * d];
                        let grow = &mut g.entity[j * d..(j + 1) * d];
                        for k in 0..d {
                            grow[k] += diff * qv[k];
                            c[k] += diff * row[k];
                        }
                    }
                    let e = params.entity_row(q.anchor);
                    let r = params.relation_row(r_dir);
                    let w = &params.other;
                    for k in 0..d {
                        g.other[k] += c[k] * e[k] * r[k];
                        g.entity[q.anchor * d + k] += c[k] * w[k] * r[k];
                        g.relation[r_dir * d + k] += c[k] * w[k] * e[k];
                    }
                }
                Ok((sum, g))
            })
            .collect();
        let mut total = 0.0;
        let mut grad = params.zeros_like();
        for p in partials {
            let (l, g) = p?;
            total += l;
            grad.axpy(1.0, &g);
        }
        let n = queries.len() as f64;
        grad.scale(1.0 / n);
        let loss = total / n;
        if !grad.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient on snapshot t={}",
                snap.t
            )));
        }
        Ok((loss, grad))
    }
}

/// Rows of each component that the snapshot's facts touch, used to scope
/// the L2 penalty. `other` is always touched.
#[derive(Debug, Clone)]
pub struct TouchedRows {
    pub entities: Vec<bool>,
    pub relations: Vec<bool>,
}

impl TouchedRows {
    pub fn of(params: &ParamSet, snap: &Snapshot) -> Self {
        let mut entities = vec![false; params.num_entities];
        let mut relations = vec![false; 2 * params.num_relations];
        for q in &snap.facts {
            if let Some(e) = entities.get_mut(q.subject) {
                *e = true;
            }
            if let Some(e) = entities.get_mut(q.object) {
                *e = true;
            }
            if q.relation < params.num_relations {
                relations[q.relation] = true;
                relations[q.relation + params.num_relations] = true;
            }
        }
        Self {
            entities,
            relations,
        }
    }
}

fn l2_penalty(params: &ParamSet, touched: &TouchedRows) -> f64 {
    let d = params.dim;
    let rows = |m: &[f64], mask: &[bool]| -> f64 {
        mask.iter()
            .enumerate()
            .filter(|(_, &t)| t)
            .map(|(i, _)| m[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>())
            .sum()
    };
    rows(&params.entity, &touched.entities)
        + rows(&params.relation, &touched.relations)
        + params.other.iter().map(|v| v * v).sum::<f64>()
}

/// Backbone loss plus `0.5 * l2 * ||theta||^2` over the rows the snapshot
/// touches.
pub fn objective(backbone: &dyn Backbone, params: &ParamSet, snap: &Snapshot, l2: f64) -> Result<f64> {
    let loss = backbone.loss(params, snap)?;
    if l2 == 0.0 {
        return Ok(loss);
    }
    let touched = TouchedRows::of(params, snap);
    Ok(loss + 0.5 * l2 * l2_penalty(params, &touched))
}

/// Gradient of [`objective`].
pub fn objective_grad(
    backbone: &dyn Backbone,
    params: &ParamSet,
    snap: &Snapshot,
    l2: f64,
) -> Result<(f64, GradSet)> {
    let (loss, mut grad) = backbone.grad(params, snap)?;
    if l2 == 0.0 {
        return Ok((loss, grad));
    }
    let touched = TouchedRows::of(params, snap);
    let d = params.dim;
    for (i, _) in touched.entities.iter().enumerate().filter(|(_, &t)| t) {
        for k in i * d..(i + 1) * d {
            grad.entity[k] += l2 * params.entity[k];
        }
    }
    for (i, _) in touched.relations.iter().enumerate().filter(|(_, &t)| t) {
        for k in i * d..(i + 1) * d {
            grad.relation[k] += l2 * params.relation[k];
        }
    }
    for (g, p) in grad.other.iter_mut().zip(&params.other) {
        *g += l2 * p;
    }
    Ok((loss + 0.5 * l2 * l2_penalty(params, &touched), grad))
}
