//! Translational embeddings and link prediction.
//!
//! Each entity and relation gets a vector; a triple (h, r, t) is plausible
//! when `e_h + e_r` lands near `e_t`, so `score = -‖e_h + e_r - e_t‖₂`.
//! Training minimizes the margin ranking loss
//! `max(0, γ - score(h,r,t) + score(h,r,t'))` with one corrupted tail per
//! positive and plain SGD.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Entity, EntityKind, KgState, KrError, Relation};
use crate::strategy::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub epochs: usize,
    pub margin: f64,
    pub learning_rate: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            dim: 16,
            epochs: 200,
            margin: 1.0,
            learning_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub config: EmbeddingConfig,
    pub seed: u64,
    pub entities: BTreeMap<Entity, Vec<f64>>,
    pub relations: BTreeMap<Relation, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn entity(&self, e: &Entity) -> Result<&[f64], KrError> {
        self.entities
            .get(e)
            .map(Vec::as_slice)
            .ok_or_else(|| KrError::UnknownEntity(e.clone()))
    }

    pub fn relation(&self, r: Relation) -> Result<&[f64], KrError> {
        self.relations
            .get(&r)
            .map(Vec::as_slice)
            .ok_or(KrError::UnknownRelation(r))
    }
}

pub fn score_vectors(h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    -h.iter()
        .zip(r)
        .zip(t)
        .map(|((h, r), t)| (h + r - t).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn score_triple(table: &EmbeddingTable, h: &Entity, r: Relation, t: &Entity) -> Result<f64, KrError> {
    Ok(score_vectors(table.entity(h)?, table.relation(r)?, table.entity(t)?))
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Unit direction of `h + r - t` (zero if the residual vanishes).
fn residual_direction(h: &[f64], r: &[f64], t: &[f64]) -> Vec<f64> {
    let mut d: Vec<f64> = h.iter().zip(r).zip(t).map(|((h, r), t)| h + r - t).collect();
    normalize(&mut d);
    d
}

pub fn train_embeddings(state: &KgState, seed: u64) -> Result<EmbeddingTable, KrError> {
    train_embeddings_with(state, seed, EmbeddingConfig::default())
}

/// Train on every distinct (head, relation, tail) in the graph.
///
/// Corrupted tails are drawn uniformly from the entities of the same kind as
/// the true tail, falling back to all other entities when the kind has only
/// one member. Entity vectors are renormalized to unit length after every
/// epoch. The result depends only on the graph contents and `seed`.
pub fn train_embeddings_with(
    state: &KgState,
    seed: u64,
    config: EmbeddingConfig,
) -> Result<EmbeddingTable, KrError> {
    let positives: BTreeSet<(&Entity, Relation, &Entity)> = state
        .triples
        .iter()
        .map(|t| (&t.head, t.relation, &t.tail))
        .collect();
    if positives.is_empty() {
        return Err(KrError::EmptyGraph);
    }
    let entities: Vec<&Entity> = state.entities.iter().collect();
    let index: BTreeMap<&Entity, usize> = entities.iter().enumerate().map(|(i, e)| (*e, i)).collect();
    let relations: Vec<Relation> = positives.iter().map(|p| p.1).collect::<BTreeSet<_>>().into_iter().collect();
    let rel_index: BTreeMap<Relation, usize> = relations.iter().enumerate().map(|(i, r)| (*r, i)).collect();
    let mut by_kind: BTreeMap<EntityKind, Vec<usize>> = BTreeMap::new();
    for (i, e) in entities.iter().enumerate() {
        by_kind.entry(e.kind).or_default().push(i);
    }

    let d = config.dim;
    let bound = 6.0 / (d as f64).sqrt();
    let mut rng = rng_for(seed);
    let mut init = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-bound..=bound)).collect())
            .collect()
    };
    let mut ent = init(entities.len());
    let mut rel = init(relations.len());
    for v in &mut rel {
        normalize(v);
    }
    for v in &mut ent {
        normalize(v);
    }

    let mut triples: Vec<(usize, usize, usize)> = positives
        .iter()
        .map(|(h, r, t)| (index[h], rel_index[r], index[t]))
        .collect();
    let lr = config.learning_rate;
    for _ in 0..config.epochs {
        triples.shuffle(&mut rng);
        for &(h, r, t) in &triples {
            let same_kind = &by_kind[&entities[t].kind];
            let corrupt = if same_kind.len() > 1 {
                loop {
                    let c = same_kind[rng.random_range(0..same_kind.len())];
                    if c != t {
                        break c;
                    }
                }
            } else if entities.len() > 1 {
                loop {
                    let c = rng.random_range(0..entities.len());
                    if c != t {
                        break c;
                    }
                }
            } else {
                continue;
            };
            let pos = score_vectors(&ent[h], &rel[r], &ent[t]);
            let neg = score_vectors(&ent[h], &rel[r], &ent[corrupt]);
            if config.margin - pos + neg <= 0.0 {
                continue;
            }
            // loss = γ + ‖h+r-t‖ - ‖h+r-t'‖
            let up = residual_direction(&ent[h], &rel[r], &ent[t]);
            let un = residual_direction(&ent[h], &rel[r], &ent[corrupt]);
            for k in 0..d {
                let g = up[k] - un[k];
                ent[h][k] -= lr * g;
                rel[r][k] -= lr * g;
                ent[t][k] += lr * up[k];
                ent[corrupt][k] -= lr * un[k];
            }
        }
        for v in &mut ent {
            normalize(v);
        }
    }

    Ok(EmbeddingTable {
        config,
        seed,
        entities: entities.into_iter().cloned().zip(ent).collect(),
        relations: relations.into_iter().zip(rel).collect(),
    })
}

/// Known facts about a planned experiment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecommendContext {
    pub user: Option<String>,
    pub dataset: Option<String>,
    pub intent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub entity: Entity,
    pub score: f64,
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Estimate of where a new run would sit, one vector per known context entity.
///
/// Each context entity is moved back along the relation that links a run to
/// it: a user along `ranBy`, a dataset along `usesDataset`, and an intent
/// along `hasIntent` then `partOfExperiment`.
fn run_estimates(table: &EmbeddingTable, ctx: &RecommendContext) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut walk = |kind: EntityKind, id: &Option<String>, path: &[Relation]| {
        let Some(id) = id else { return };
        let Ok(mut v) = table.entity(&Entity::new(kind, id.clone())).map(<[f64]>::to_vec) else {
            return;
        };
        for r in path {
            match table.relation(*r) {
                Ok(rv) => v = sub(&v, rv),
                Err(_) => return,
            }
        }
        out.push(v);
    };
    walk(EntityKind::User, &ctx.user, &[Relation::RanBy]);
    walk(EntityKind::Dataset, &ctx.dataset, &[Relation::UsesDataset]);
    walk(
        EntityKind::Intent,
        &ctx.intent,
        &[Relation::HasIntent, Relation::PartOfExperiment],
    );
    out
}

/// Rank the entities that could complete `(new run, relation, ?)`.
///
/// When the relation's head is a user and the user is embedded, the user's
/// own vector is the head; otherwise the head is the mean of the run
/// estimates derived from the context.
pub fn recommend(
    table: &EmbeddingTable,
    state: &KgState,
    ctx: &RecommendContext,
    relation: Relation,
    k: usize,
) -> Result<Vec<Recommendation>, KrError> {
    let (heads, tail_kind) = relation.signature();
    let user_head = ctx
        .user
        .as_ref()
        .filter(|_| heads.contains(&EntityKind::User))
        .and_then(|u| table.entities.get(&Entity::new(EntityKind::User, u.clone())));
    let head: Vec<f64> = match user_head {
        Some(v) => v.clone(),
        None => {
            let estimates = run_estimates(table, ctx);
            if estimates.is_empty() {
                return Err(KrError::NoContext);
            }
            let n = estimates.len() as f64;
            (0..table.config.dim)
                .map(|i| estimates.iter().map(|v| v[i]).sum::<f64>() / n)
                .collect()
        }
    };
    let r = table.relation(relation)?;
    let mut ranked: Vec<Recommendation> = state
        .entities_of(tail_kind)
        .filter_map(|e| {
            table.entities.get(e).map(|v| Recommendation {
                entity: e.clone(),
                score: score_vectors(&head, r, v),
            })
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.entity.cmp(&b.entity)));
    ranked.truncate(k);
    Ok(ranked)
}
