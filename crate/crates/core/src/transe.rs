//! Translation embeddings over KB facts, trained on the KB embedding table
//! shared with the QA model.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, ParamId, ParamStore, Tape};
use crate::error::{ModelError, TensorError};
use crate::kb::{Fact, KbStore, ResourceId};
use crate::tensor::{normalize_rows_in_place, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransEConfig {
    /// Margin between true and corrupted fact energies.
    pub margin: f64,
    pub epochs_per_qa_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Rescale entity embeddings to unit norm after every TransE epoch.
    pub normalize_entities: bool,
    /// Redraws allowed when a corruption hits a known fact.
    pub max_redraws: usize,
}

impl Default for TransEConfig {
    fn default() -> Self {
        TransEConfig {
            margin: 1.0,
            epochs_per_qa_epoch: 100,
            batch_size: 50,
            learning_rate: 0.01,
            normalize_entities: true,
            max_redraws: 10,
        }
    }
}

impl TransEConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.margin > 0.0) {
            return Err(ModelError::Config(format!("TransE margin must be positive, got {}", self.margin)));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(ModelError::Config("TransE batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// `‖s + p − o‖²`
pub fn energy<T: Scalar>(s: &[T], p: &[T], o: &[T]) -> T {
    s.iter()
        .zip(p)
        .zip(o)
        .map(|((&s, &p), &o)| {
            let d = s + p - o;
            d * d
        })
        .fold(T::zero(), |a, b| a + b)
}

pub fn fact_energy<T: Scalar>(table: &Tensor<T>, f: &Fact) -> T {
    energy(table.row(f.subject.index()), table.row(f.relation.index()), table.row(f.object.index()))
}

/// Positive facts for TransE plus the entities they mention.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilteredFactSet {
    pub facts: Vec<Fact>,
    pub entities: Vec<ResourceId>,
    members: HashSet<Fact>,
}

impl FilteredFactSet {
    pub fn new(facts: Vec<Fact>) -> Self {
        let members: HashSet<Fact> = facts.iter().copied().collect();
        let entities: BTreeSet<ResourceId> = facts.iter().flat_map(|f| [f.subject, f.object]).collect();
        FilteredFactSet { facts, entities: entities.into_iter().collect(), members }
    }

    pub fn contains(&self, f: &Fact) -> bool {
        self.members.contains(f)
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }
}

/// Facts touching the two-hop closure of the given topic entities.
pub fn filter_facts(store: &KbStore, topics: impl IntoIterator<Item = ResourceId>) -> FilteredFactSet {
    let mut closure: HashSet<ResourceId> = HashSet::new();
    let mut frontier: Vec<ResourceId> = topics.into_iter().filter(|&t| store.is_entity(t)).collect();
    closure.extend(frontier.iter().copied());
    for _ in 0..2 {
        let mut next = Vec::new();
        for &e in &frontier {
            for (_, x) in store.neighbors(e) {
                if closure.insert(x) {
                    next.push(x);
                }
            }
        }
        frontier = next;
    }
    let facts = store
        .facts()
        .iter()
        .filter(|f| closure.contains(&f.subject) || closure.contains(&f.object))
        .copied()
        .collect();
    FilteredFactSet::new(facts)
}

/// Replaces the head or the tail (fair coin) by a random pool entity, redrawing
/// while the result is a known fact or leaves the slot unchanged.
pub fn corrupt<R: Rng>(fact: &Fact, rng: &mut R, pool: &[ResourceId], known: &FilteredFactSet, max_redraws: usize) -> Fact {
    assert!(!pool.is_empty(), "corruption needs a nonempty entity pool");
    let replace_head = rng.gen_bool(0.5);
    let mut candidate = *fact;
    for _ in 0..=max_redraws {
        let e = pool[rng.gen_range(0..pool.len())];
        candidate = if replace_head { Fact { subject: e, ..*fact } } else { Fact { object: e, ..*fact } };
        if candidate != *fact && !known.contains(&candidate) {
            return candidate;
        }
    }
    candidate
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransEEpochStats {
    pub mean_loss: f64,
    pub active_pairs: usize,
}

/// One pass over `facts` in shuffled mini-batches, each fact paired with one
/// fresh corruption. Only the KB table `kb_emb` is updated.
pub fn transe_epoch<T: Scalar, R: Rng>(
    facts: &FilteredFactSet,
    params: &mut ParamStore<T>,
    kb_emb: ParamId,
    config: &TransEConfig,
    rng: &mut R,
) -> Result<TransEEpochStats, TensorError> {
    if facts.is_empty() {
        return Ok(TransEEpochStats { mean_loss: 0.0, active_pairs: 0 });
    }
    let mut order: Vec<usize> = (0..facts.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut active = 0;
    for chunk in order.chunks(config.batch_size) {
        let pairs: Vec<(Fact, Fact)> = chunk
            .iter()
            .map(|&i| {
                let f = facts.facts[i];
                (f, corrupt(&f, rng, &facts.entities, facts, config.max_redraws))
            })
            .collect();
        let mut tape = Tape::new();
        let table = tape.param(params, kb_emb);
        let margin = tape.constant(Tensor::scalar(T::lit(config.margin)));
        let mut batch_loss = None;
        for (pos, neg) in &pairs {
            let mut fact_energy = |f: &Fact| -> Result<_, TensorError> {
                let s = tape.row(table, f.subject.index())?;
                let p = tape.row(table, f.relation.index())?;
                let o = tape.row(table, f.object.index())?;
                let sp = tape.add(s, p)?;
                let diff = tape.sub(sp, o)?;
                tape.dot(diff, diff)
            };
            let e_pos = fact_energy(pos)?;
            let e_neg = fact_energy(neg)?;
            let gap = tape.sub(e_pos, e_neg)?;
            let shifted = tape.add_scalar(gap, margin)?;
            let hinge = tape.relu(shifted)?;
            let value = tape.value(hinge).item().as_f64();
            total += value;
            if value > 0.0 {
                active += 1;
            }
            batch_loss = Some(match batch_loss {
                Some(acc) => tape.add(acc, hinge)?,
                None => hinge,
            });
        }
        let loss = batch_loss.expect("nonempty chunk");
        if tape.value(loss).item() > T::zero() {
            let grads = tape.backward(loss)?;
            sgd_step(params, &grads, config.learning_rate)?;
        }
    }
    if config.normalize_entities {
        normalize_rows_in_place(params.get_mut(kb_emb), facts.entities.iter().map(|e| e.index()));
    }
    Ok(TransEEpochStats { mean_loss: total / facts.len() as f64, active_pairs: active })
}
