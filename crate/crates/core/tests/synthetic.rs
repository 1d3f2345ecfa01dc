mod common;

use std::collections::BTreeSet;

use kbqa_core::kb::{KbOptions, KbStore};
use kbqa_core::synth::{generate, SynthConfig};
use kbqa_core::transe::{corrupt, FilteredFactSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn same_seed_same_files() {
    let config = SynthConfig { seed: 21, oov_fraction: 0.3, ..SynthConfig::default() };
    let a = generate(&config).unwrap();
    let b = generate(&config).unwrap();
    assert_eq!(a.files(), b.files());
    let c = generate(&SynthConfig { seed: 22, ..config }).unwrap();
    assert_ne!(a.files(), c.files());
}

#[test]
fn gold_answers_are_candidates() {
    for seed in 1..=5 {
        for oov_fraction in [0.0, 0.5] {
            let corpus = common::synth_corpus(&SynthConfig { seed, oov_fraction, ..SynthConfig::default() });
            for split in [&corpus.train, &corpus.valid, &corpus.test] {
                assert!(split.split.skipped.is_empty());
                for (q, set) in split.split.questions.iter().zip(&split.sets) {
                    let cands: BTreeSet<_> = set.entities().collect();
                    assert!(q.gold.is_subset(&cands), "question {} has unreachable gold answers", q.id);
                    let one_hop: BTreeSet<_> = set.candidates.iter().filter(|c| c.hops() == 1).map(|c| c.answer).collect();
                    assert!(q.gold.is_subset(&one_hop));
                }
            }
        }
    }
}

#[test]
fn emitted_counts_match_config() {
    let config = SynthConfig { entities: 40, relations: 5, types: 3, seed: 2, ..SynthConfig::default() };
    let data = generate(&config).unwrap();
    let store = KbStore::parse_triples(&data.triples, "synthetic", KbOptions::default()).unwrap();
    let surfaces = |ids: &mut dyn Iterator<Item = kbqa_core::kb::ResourceId>| -> BTreeSet<String> {
        ids.map(|e| store.surface(e).to_string()).collect()
    };
    let relations = surfaces(&mut store.relations());
    assert_eq!(relations.iter().filter(|r| *r != "type").count(), config.relations);
    let type_ids: BTreeSet<_> = store.facts().iter().filter(|f| Some(f.relation) == store.type_relation()).map(|f| f.object).collect();
    assert_eq!(type_ids.len(), config.types);
    assert_eq!(store.entities().filter(|e| !type_ids.contains(e)).count(), config.entities);
    // every non-type entity has exactly one type fact
    for e in store.entities().filter(|e| !type_ids.contains(e)) {
        assert_eq!(store.facts_with_subject(e).filter(|f| Some(f.relation) == store.type_relation()).count(), 1);
    }
    let total = data.train.len() + data.valid.len() + data.test.len();
    assert_eq!(total, config.questions);
    let ids: BTreeSet<_> = data.train.iter().chain(&data.valid).chain(&data.test).map(|r| r.id.clone()).collect();
    assert_eq!(ids.len(), total, "splits share a question id");
}

#[test]
fn corruption_picks_head_or_tail_evenly() {
    let store = KbStore::parse_triples(
        &(0..20).map(|i| format!("n{i}\tr\tn{}\n", (i + 1) % 20)).collect::<String>(),
        "ring",
        KbOptions::default(),
    )
    .unwrap();
    let facts = FilteredFactSet::new(store.facts().to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 10_000;
    let heads = (0..n)
        .filter(|i| {
            let f = facts.facts[i % facts.facts.len()];
            corrupt(&f, &mut rng, &facts.entities, &facts, 10).subject != f.subject
        })
        .count();
    let sigma = (n as f64 * 0.25).sqrt();
    assert!((heads as f64 - n as f64 / 2.0).abs() <= 3.0 * sigma, "{heads} head replacements in {n}");
}
