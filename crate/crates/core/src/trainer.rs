//! Pairwise margin training of the QA model, interleaved with TransE epochs
//! on the shared KB embedding table.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, GradientSet, Tape};
use crate::error::{ModelError, TensorError};
use crate::infer::evaluate;
use crate::kb::{CandidateSet, KbStore, ResourceId};
use crate::model::{Mode, Model};
use crate::qa::{
    build_examples, mix_seed, resolve_questions, CandRef, ExampleStats, QaRecord, QaSplit, TrainingExample, WordVocab,
};
use crate::tensor::{normalize_rows_in_place, Scalar, Tensor};
use crate::transe::{filter_facts, transe_epoch, FilteredFactSet, TransEConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Embedding size `d`; each LSTM direction has `d/2` hidden units.
    pub dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Margin `γ` of the pairwise loss.
    pub margin: f64,
    /// Negatives sampled per positive answer (`k`).
    pub negatives: usize,
    pub epochs: usize,
    pub seed: u64,
    pub init_scale: f64,
    pub max_hops: usize,
    /// Rescale word and KB embeddings to unit norm after each QA epoch.
    pub normalize_embeddings: bool,
    /// Answer-selection margin; `None` reuses `margin`.
    pub inference_margin: Option<f64>,
    pub transe: TransEConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Full-scale settings (d=128, k=500, batch 50, γ=0.6, learning rate 0.01).
    pub fn full() -> Self {
        TrainConfig {
            mode: Mode::BilstmAttGki,
            dim: 128,
            learning_rate: 0.01,
            batch_size: 50,
            margin: 0.6,
            negatives: 500,
            epochs: 30,
            seed: 1,
            init_scale: 0.08,
            max_hops: 2,
            normalize_embeddings: true,
            inference_margin: None,
            transe: TransEConfig::default(),
        }
    }

    /// Small settings for the synthetic benchmark.
    pub fn desk() -> Self {
        TrainConfig { dim: 16, negatives: 20, batch_size: 16, learning_rate: 0.05, ..Self::full() }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn answer_margin(&self) -> f64 {
        self.inference_margin.unwrap_or(self.margin)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.margin > 0.0) {
            return Err(ModelError::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return Err(ModelError::Config(format!("embedding size must be even and positive, got {}", self.dim)));
        }
        if self.batch_size == 0 || self.negatives == 0 || self.epochs == 0 {
            return Err(ModelError::Config("batch size, negatives and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ModelError::Config("learning rate must be positive".into()));
        }
        if !(1..=2).contains(&self.max_hops) {
            return Err(ModelError::Config(format!("max_hops must be 1 or 2, got {}", self.max_hops)));
        }
        self.transe.validate()
    }
}

/// `[γ + S_neg − S_pos]₊`
pub fn pair_loss(s_pos: f64, s_neg: f64, margin: f64) -> f64 {
    (margin - (s_pos - s_neg)).max(0.0)
}

/// A split with each question's candidate set.
#[derive(Clone, Debug, Default)]
pub struct PreparedSplit {
    pub split: QaSplit,
    pub sets: Vec<CandidateSet>,
}

impl PreparedSplit {
    pub fn new(store: &KbStore, split: QaSplit, max_hops: usize) -> Self {
        let sets = split.questions.par_iter().map(|q| store.candidate_set(q.topic, max_hops)).collect();
        PreparedSplit { split, sets }
    }

    pub fn golds(&self) -> Vec<&BTreeSet<ResourceId>> {
        self.split.questions.iter().map(|q| &q.gold).collect()
    }

    pub fn topics(&self) -> impl Iterator<Item = ResourceId> + '_ {
        self.split.questions.iter().map(|q| q.topic)
    }
}

/// A KB with its word vocabulary (built from the training records) and the
/// three prepared splits.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub store: KbStore,
    pub vocab: WordVocab,
    pub train: PreparedSplit,
    pub valid: PreparedSplit,
    pub test: PreparedSplit,
}

impl Corpus {
    pub fn new(store: KbStore, train: &[QaRecord], valid: &[QaRecord], test: &[QaRecord], max_hops: usize) -> Self {
        let vocab = WordVocab::from_records(train);
        let prep = |recs: &[QaRecord]| PreparedSplit::new(&store, resolve_questions(recs, &store, &vocab), max_hops);
        let (train, valid, test) = (prep(train), prep(valid), prep(test));
        Corpus { store, vocab, train, valid, test }
    }

    /// Training inputs; test topics also seed the TransE fact filter.
    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            store: &self.store,
            word_vocab_size: self.vocab.len(),
            train: &self.train,
            valid: &self.valid,
            extra_topics: self.test.topics().collect(),
        }
    }
}

/// One `(q, a, a')` pair to be ranked.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triple {
    pub question: usize,
    pub positive: CandRef,
    pub negative: CandRef,
    pub weight: f64,
}

pub fn flatten(examples: &[TrainingExample]) -> Vec<Triple> {
    examples
        .iter()
        .flat_map(|e| {
            e.negatives.iter().map(move |&n| Triple {
                question: e.question,
                positive: e.positive,
                negative: n,
                weight: e.weight,
            })
        })
        .collect()
}

/// Weighted hinge of one triple and, when it is active, its gradients.
pub fn triple_loss<T: Scalar>(
    model: &Model<T>,
    tokens: &[u32],
    sets: &[CandidateSet],
    triple: &Triple,
    margin: f64,
    with_grad: bool,
) -> Result<(f64, Option<GradientSet<T>>), TensorError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let enc = model.encode(&mut tape, &bound, tokens)?;
    let (pos, _) = model.score_on_tape(&mut tape, &bound, &enc, triple.positive.resolve(sets))?;
    let (neg, _) = model.score_on_tape(&mut tape, &bound, &enc, triple.negative.resolve(sets))?;
    let gap = tape.sub(neg, pos)?;
    let m = tape.constant(Tensor::scalar(T::lit(margin)));
    let shifted = tape.add_scalar(gap, m)?;
    let hinge = tape.relu(shifted)?;
    let loss = tape.scale(hinge, triple.weight)?;
    let value = tape.value(loss).item().as_f64();
    let grads = if with_grad && value > 0.0 { Some(tape.backward(loss)?) } else { None };
    Ok((value, grads))
}

/// Weighted objective over all triples at the current parameters.
pub fn objective(model: &Model, token_lists: &[&[u32]], sets: &[CandidateSet], triples: &[Triple], margin: f64) -> Result<f64, TensorError> {
    let losses = triples
        .par_iter()
        .map(|t| triple_loss(model, token_lists[t.question], sets, t, margin, false).map(|(l, _)| l))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(losses.iter().sum())
}

/// Shuffled mini-batch SGD over the triples, then embedding normalization.
/// Returns the summed weighted loss seen during the epoch.
pub fn qa_epoch(
    model: &mut Model,
    token_lists: &[&[u32]],
    sets: &[CandidateSet],
    triples: &[Triple],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TensorError> {
    let mut order: Vec<usize> = (0..triples.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for chunk in order.chunks(config.batch_size) {
        let results = chunk
            .par_iter()
            .map(|&i| {
                let t = &triples[i];
                triple_loss(model, token_lists[t.question], sets, t, config.margin, true)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut batch = GradientSet::default();
        for (loss, grads) in &results {
            total += loss;
            if let Some(g) = grads {
                batch.accumulate(g)?;
            }
        }
        if !batch.is_empty() {
            sgd_step(&mut model.params, &batch, config.learning_rate)?;
        }
    }
    if config.normalize_embeddings {
        normalize_embeddings(model);
    }
    Ok(total)
}

pub fn normalize_embeddings(model: &mut Model) {
    let ids = *model.ids();
    for id in [ids.word_emb, ids.kb_emb] {
        let rows = model.params.get(id).rows();
        normalize_rows_in_place(model.params.get_mut(id), 0..rows);
    }
}

/// Inputs to [`multitask_train`].
#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub store: &'a KbStore,
    pub word_vocab_size: usize,
    pub train: &'a PreparedSplit,
    pub valid: &'a PreparedSplit,
    /// Extra topic entities seeding the TransE fact filter (e.g. test topics).
    pub extra_topics: Vec<ResourceId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub objective: f64,
    pub triples: usize,
    pub transe_epochs: usize,
    pub transe_loss: Option<f64>,
    pub valid_f1: f64,
    pub seconds: f64,
}

impl EpochRecord {
    /// Deterministic log line (wall-clock time is left out).
    pub fn log_line(&self) -> String {
        let mut s = format!(
            "epoch={} objective={:.6} triples={} valid_f1={:.6}",
            self.epoch, self.objective, self.triples, self.valid_f1
        );
        if let Some(l) = self.transe_loss {
            s.push_str(&format!(" transe_epochs={} transe_loss={:.6}", self.transe_epochs, l));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_model: Model,
    pub final_model: Model,
    pub transe_facts: usize,
    pub example_stats: ExampleStats,
}

/// Runs `config.epochs` QA epochs. In GKI modes each QA epoch is followed by
/// `config.transe.epochs_per_qa_epoch` TransE epochs over facts near the
/// questions' topic entities. `on_epoch` sees every epoch's model; the model
/// with the best validation F1 (earliest on ties) is kept.
pub fn multitask_train(
    data: &TrainData<'_>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Model),
) -> Result<TrainOutcome, ModelError> {
    config.validate()?;
    if data.train.split.questions.is_empty() {
        return Err(ModelError::Config("training split has no usable questions".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::new(
        config.mode,
        config.dim,
        data.word_vocab_size,
        data.store.vocab_size(),
        config.init_scale,
        &mut init_rng,
    )?;
    if config.normalize_embeddings {
        // start on the unit sphere so epoch-end normalization only projects back after SGD
        normalize_embeddings(&mut model);
    }

    let filtered = if config.mode.global_knowledge() {
        let topics = data.train.topics().chain(data.valid.topics()).chain(data.extra_topics.iter().copied());
        let f = filter_facts(data.store, topics);
        if f.is_empty() {
            log::warn!("no KB facts near the topic entities; TransE phase skipped");
        }
        f
    } else {
        FilteredFactSet::default()
    };

    let tokens: Vec<&[u32]> = data.train.split.questions.iter().map(|q| q.tokens.as_slice()).collect();
    let golds = data.train.golds();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut stats = ExampleStats::default();
    let mut transe_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x7472_616e_7365));

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let (examples, st) = build_examples(&golds, &data.train.sets, config.negatives, mix_seed(config.seed, epoch as u64));
        stats = st;
        let triples = flatten(&examples);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed ^ 0x5eed, epoch as u64));
        let objective = qa_epoch(&mut model, &tokens, &data.train.sets, &triples, config, &mut rng)?;

        let mut transe_loss = None;
        let mut transe_epochs = 0;
        if config.mode.global_knowledge() && !filtered.is_empty() {
            let kb = model.ids().kb_emb;
            let mut last = 0.0;
            for _ in 0..config.transe.epochs_per_qa_epoch {
                last = transe_epoch(&filtered, &mut model.params, kb, &config.transe, &mut transe_rng)?.mean_loss;
                transe_epochs += 1;
            }
            transe_loss = Some(last);
        }

        let valid_f1 = if data.valid.split.total() > 0 {
            evaluate(&model, data.store, &data.valid.split, &data.valid.sets, config.answer_margin())?.mean_f1
        } else {
            0.0
        };
        let record = EpochRecord {
            epoch,
            objective,
            triples: triples.len(),
            transe_epochs,
            transe_loss,
            valid_f1,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("{} ({:.2}s)", record.log_line(), record.seconds);
        on_epoch(&record, &model);
        if best.as_ref().is_none_or(|(f, _, _)| valid_f1 > *f) {
            best = Some((valid_f1, epoch, model.clone()));
        }
        history.push(record);
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_model,
        final_model: model,
        transe_facts: filtered.len(),
        example_stats: stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_loss_examples() {
        assert_eq!(pair_loss(1.0, 0.2, 0.6), 0.0);
        assert!((pair_loss(0.3, 0.2, 0.6) - 0.5).abs() < 1e-12);
        assert_eq!(pair_loss(0.7, 0.7, 0.6), 0.6);
    }

    #[test]
    fn presets() {
        let p = TrainConfig::full();
        assert_eq!((p.dim, p.batch_size, p.negatives), (128, 50, 500));
        assert_eq!((p.margin, p.learning_rate), (0.6, 0.01));
        assert_eq!((p.transe.margin, p.transe.batch_size, p.transe.epochs_per_qa_epoch), (1.0, 50, 100));
        let d = TrainConfig::desk();
        assert_eq!((d.dim, d.negatives, d.batch_size), (16, 20, 16));
        assert!(TrainConfig { dim: 15, ..d.clone() }.validate().is_err());
        assert!(TrainConfig { margin: 0.0, ..d }.validate().is_err());
    }

    #[test]
    fn log_line_is_stable() {
        let r = EpochRecord {
            epoch: 2,
            objective: 1.5,
            triples: 10,
            transe_epochs: 100,
            transe_loss: Some(0.25),
            valid_f1: 0.5,
            seconds: 3.0,
        };
        assert_eq!(
            r.log_line(),
            "epoch=2 objective=1.500000 triples=10 valid_f1=0.500000 transe_epochs=100 transe_loss=0.250000"
        );
    }
}
