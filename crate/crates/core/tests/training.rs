mod common;

use kbqa_core::kb::{KbOptions, KbStore};
use kbqa_core::model::{Mode, Model};
use kbqa_core::qa::{build_examples, mix_seed, QaRecord};
use kbqa_core::synth::SynthConfig;
use kbqa_core::trainer::{flatten, multitask_train, normalize_embeddings, objective, qa_epoch, Corpus, TrainConfig, Triple};
use kbqa_core::transe::{filter_facts, transe_epoch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TINY_KB: &str = "paris\tcapital_of\tfrance\nparis\tlocated_in\teurope\nparis\tmayor\thidalgo\nfrance\tcurrency\teuro\n\
berlin\tcapital_of\tgermany\nberlin\tlocated_in\teurope\nberlin\tmayor\twegner\ngermany\tcurrency\teuro\n\
france\ttype\tcountry\ngermany\ttype\tcountry\nhidalgo\ttype\tperson\nwegner\ttype\tperson\n";

fn record(q: &str, topic: &str, answers: &[&str]) -> QaRecord {
    QaRecord { id: None, question: q.into(), topic: topic.into(), answers: answers.iter().map(|s| s.to_string()).collect() }
}

fn tiny_corpus() -> Corpus {
    let store = KbStore::parse_triples(TINY_KB, "tiny", KbOptions::default()).unwrap();
    let train = [record("which country is paris the capital of", "paris", &["france"]), record("who is the mayor of berlin", "berlin", &["wegner"])];
    Corpus::new(store, &train, &train[..1], &train[1..], 2)
}

fn tiny_config(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig { mode, seed, dim: 8, negatives: 2, batch_size: 4, epochs: 2, ..TrainConfig::desk() }
}

/// Model and epoch-1 triples exactly as the trainer builds them.
fn start(corpus: &Corpus, config: &TrainConfig) -> (Model, Vec<Triple>) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model =
        Model::new(config.mode, config.dim, corpus.vocab.len(), corpus.store.vocab_size(), config.init_scale, &mut rng).unwrap();
    if config.normalize_embeddings {
        normalize_embeddings(&mut model);
    }
    let (examples, _) = build_examples(&corpus.train.golds(), &corpus.train.sets, config.negatives, mix_seed(config.seed, 1));
    (model, flatten(&examples))
}

fn tokens(corpus: &Corpus) -> Vec<&[u32]> {
    corpus.train.split.questions.iter().map(|q| q.tokens.as_slice()).collect()
}

#[test]
fn one_epoch_lowers_the_tiny_objective() {
    let corpus = tiny_corpus();
    let toks = tokens(&corpus);
    let mut lowered = 0;
    for seed in 1..=5 {
        let config = tiny_config(Mode::BilstmAtt, seed);
        let (mut model, triples) = start(&corpus, &config);
        let before = objective(&model, &toks, &corpus.train.sets, &triples, config.margin).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        qa_epoch(&mut model, &toks, &corpus.train.sets, &triples, &config, &mut rng).unwrap();
        let after = objective(&model, &toks, &corpus.train.sets, &triples, config.margin).unwrap();
        lowered += (after < before) as usize;
    }
    assert!(lowered >= 4, "objective decreased for only {lowered} of 5 seeds");
}

#[test]
fn synthetic_objective_median_falls_by_epoch_ten() {
    let synth = SynthConfig { entities: 24, relations: 4, questions: 60, templates_per_relation: 3, ..SynthConfig::default() };
    let corpus = common::synth_corpus(&synth);
    let toks = tokens(&corpus);
    let (mut at_start, mut at_ten) = (Vec::new(), Vec::new());
    for seed in 1..=5 {
        let config = TrainConfig { mode: Mode::BilstmAtt, seed, ..TrainConfig::desk() };
        let (mut model, triples) = start(&corpus, &config);
        at_start.push(objective(&model, &toks, &corpus.train.sets, &triples, config.margin).unwrap());
        for epoch in 1..=10u64 {
            let (ex, _) = build_examples(&corpus.train.golds(), &corpus.train.sets, config.negatives, mix_seed(seed, epoch));
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ 0x5eed, epoch));
            qa_epoch(&mut model, &toks, &corpus.train.sets, &flatten(&ex), &config, &mut rng).unwrap();
        }
        at_ten.push(objective(&model, &toks, &corpus.train.sets, &triples, config.margin).unwrap());
    }
    let (m0, m10) = (common::median(at_start), common::median(at_ten));
    assert!(m10 < m0, "median objective {m0} at epoch 0 vs {m10} at epoch 10");
}

#[test]
fn transe_runs_one_hundred_epochs_per_qa_epoch_only_in_gki_modes() {
    let corpus = tiny_corpus();
    let gki = multitask_train(&corpus.train_data(), &tiny_config(Mode::BilstmAttGki, 3), |_, _| {}).unwrap();
    assert_eq!(gki.history.iter().map(|r| r.transe_epochs).sum::<usize>(), 200);
    assert!(gki.history.iter().all(|r| r.transe_loss.is_some()));
    assert!(gki.transe_facts > 0);
    let att = multitask_train(&corpus.train_data(), &tiny_config(Mode::BilstmAtt, 3), |_, _| {}).unwrap();
    assert!(att.history.iter().all(|r| r.transe_epochs == 0 && r.transe_loss.is_none()));
    assert_eq!(att.transe_facts, 0);
}

#[test]
fn fixed_modes_never_attend() {
    let corpus = tiny_corpus();
    for mode in Mode::ALL {
        let mut calls = Vec::new();
        multitask_train(&corpus.train_data(), &tiny_config(mode, 1), |_, m| calls.push(m.attention_calls())).unwrap();
        if mode.attention() {
            assert!(calls.iter().all(|&c| c > 0), "{mode}: {calls:?}");
        } else {
            assert!(calls.iter().all(|&c| c == 0), "{mode}: {calls:?}");
        }
    }
}

#[test]
fn embeddings_have_unit_rows_after_every_epoch() {
    let corpus = tiny_corpus();
    let unit = |rows: &[f32]| {
        let norm = rows.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        norm == 0.0 || (norm - 1.0).abs() < 1e-5
    };
    let mut checked = 0;
    multitask_train(&corpus.train_data(), &tiny_config(Mode::BilstmAtt, 2), |_, m| {
        for id in [m.ids().word_emb, m.ids().kb_emb] {
            let t = m.params.get(id);
            assert!((0..t.rows()).all(|i| unit(t.row(i))));
        }
        checked += 1;
    })
    .unwrap();
    // with TransE the epoch ends after its phase, which renormalizes entity rows only
    multitask_train(&corpus.train_data(), &tiny_config(Mode::BilstmAttGki, 2), |_, m| {
        let words = m.params.get(m.ids().word_emb);
        assert!((0..words.rows()).all(|i| unit(words.row(i))));
        let kb = m.params.get(m.ids().kb_emb);
        assert!(corpus.store.entities().all(|e| unit(kb.row(e.index()))));
        checked += 1;
    })
    .unwrap();
    assert_eq!(checked, 4);
}

#[test]
fn transe_moves_qa_scores_through_the_shared_table() {
    let corpus = tiny_corpus();
    let config = tiny_config(Mode::BilstmAttGki, 5);
    let (mut model, _) = start(&corpus, &config);
    let q = &corpus.train.split.questions[0];
    let cands = &corpus.train.sets[0].candidates;
    let before = model.score_candidates(&q.tokens, cands).unwrap();
    let facts = filter_facts(&corpus.store, corpus.train.topics());
    let kb = model.ids().kb_emb;
    transe_epoch(&facts, &mut model.params, kb, &config.transe, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let after = model.score_candidates(&q.tokens, cands).unwrap();
    assert!(before.iter().zip(&after).any(|(a, b)| a != b));
}

#[test]
fn satisfied_hinge_leaves_parameters_unchanged() {
    let corpus = tiny_corpus();
    let toks = tokens(&corpus);
    let config = TrainConfig { margin: 1e-9, normalize_embeddings: false, ..tiny_config(Mode::BilstmAtt, 4) };
    let (mut model, triples) = start(&corpus, &config);
    let satisfied: Vec<Triple> = triples
        .into_iter()
        .filter(|t| {
            let s = model
                .score_candidates(toks[t.question], &[t.positive.resolve(&corpus.train.sets).clone(), t.negative.resolve(&corpus.train.sets).clone()])
                .unwrap();
            s[0] - s[1] > 1e-6
        })
        .collect();
    assert!(!satisfied.is_empty());
    let before = model.clone();
    let obj = qa_epoch(&mut model, &toks, &corpus.train.sets, &satisfied, &config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(obj, 0.0);
    assert_eq!(model, before);
}

#[test]
fn triples_of_a_question_with_two_positives_weigh_half() {
    let store = KbStore::parse_triples(TINY_KB, "tiny", KbOptions::default()).unwrap();
    let train = [record("what do paris and berlin share", "paris", &["france", "europe"])];
    let corpus = Corpus::new(store, &train, &[], &[], 2);
    let (examples, _) = build_examples(&corpus.train.golds(), &corpus.train.sets, 2, 9);
    let triples = flatten(&examples);
    assert_eq!(triples.len(), 4);
    assert!(triples.iter().all(|t| t.weight == 0.5));
}
