//! Seeded generator of typed toy KBs and templated questions.
//!
//! Every relation has a domain and a range type. Relations are paired so that
//! both members of a pair share their question phrases but have different
//! range types; only the wh-word, which is tied to the answer type, tells them
//! apart.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::SynthError;
use crate::qa::{write_qa_records, QaRecord};

/// Answer types with their wh-word.
pub const TYPE_WORDS: [(&str, &str); 7] = [
    ("person", "who"),
    ("location", "where"),
    ("time", "when"),
    ("thing", "what"),
    ("group", "which"),
    ("owner", "whose"),
    ("amount", "how"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Non-type entities.
    pub entities: usize,
    /// Relations other than the type relation.
    pub relations: usize,
    pub types: usize,
    /// Outgoing non-type facts per entity whose type is the domain of some relation.
    pub facts_per_entity: usize,
    pub templates_per_relation: usize,
    /// Number of questions kept; generation fails if fewer can be formed.
    pub questions: usize,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    /// Share of test questions whose gold answers never appear in train gold sets.
    pub oov_fraction: f64,
    pub type_relation: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            entities: 50,
            relations: 6,
            types: 4,
            facts_per_entity: 2,
            templates_per_relation: 5,
            questions: 300,
            train_fraction: 0.6,
            valid_fraction: 0.2,
            test_fraction: 0.2,
            oov_fraction: 0.0,
            type_relation: "type".into(),
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let counts = [
            ("entities", self.entities),
            ("relations", self.relations),
            ("types", self.types),
            ("facts_per_entity", self.facts_per_entity),
            ("templates_per_relation", self.templates_per_relation),
            ("questions", self.questions),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(SynthError::Invalid(format!("{name} must be positive")));
        }
        let fr = [self.train_fraction, self.valid_fraction, self.test_fraction];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SynthError::Invalid(format!(
                "split fractions must lie in [0, 1] and sum to 1, got {} + {} + {}",
                self.train_fraction, self.valid_fraction, self.test_fraction
            )));
        }
        if self.train_fraction == 0.0 || self.test_fraction == 0.0 {
            return Err(SynthError::Invalid("train and test fractions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.oov_fraction) {
            return Err(SynthError::Invalid(format!("oov_fraction must lie in [0, 1], got {}", self.oov_fraction)));
        }
        if self.types < 2 {
            return Err(SynthError::Infeasible("at least 2 types are needed so a relation's domain differs from its range".into()));
        }
        if self.types > TYPE_WORDS.len() {
            return Err(SynthError::Infeasible(format!(
                "{} types requested but only {} distinct wh-words are available",
                self.types,
                TYPE_WORDS.len()
            )));
        }
        if self.entities < self.types {
            return Err(SynthError::Infeasible(format!(
                "{} entities cannot cover {} types",
                self.entities, self.types
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationSpec {
    pub name: String,
    pub domain: usize,
    pub range: usize,
    pub phrases: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthStats {
    pub entities: usize,
    pub relations: usize,
    pub types: usize,
    pub facts: usize,
    /// Share of test gold answers, counted per question, absent from every train gold set.
    pub test_unseen_answer_share: f64,
    /// Test questions with at least one gold entity absent from train gold sets.
    pub test_oov_question_share: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub triples: String,
    pub train: Vec<QaRecord>,
    pub valid: Vec<QaRecord>,
    pub test: Vec<QaRecord>,
    pub relations: Vec<RelationSpec>,
    pub stats: SynthStats,
}

impl SynthDataset {
    /// `(file name, contents)` for the KB and the three splits.
    pub fn files(&self) -> [(&'static str, String); 4] {
        [
            ("kb.tsv", self.triples.clone()),
            ("train.jsonl", write_qa_records(&self.train)),
            ("valid.jsonl", write_qa_records(&self.valid)),
            ("test.jsonl", write_qa_records(&self.test)),
        ]
    }
}

pub fn type_surface(t: usize) -> &'static str {
    TYPE_WORDS[t].0
}

pub fn wh_word(t: usize) -> &'static str {
    TYPE_WORDS[t].1
}

pub fn entity_surface(i: usize) -> String {
    format!("e{i}")
}

/// Domain, range and phrases of every relation.
pub fn relation_specs(config: &SynthConfig) -> Vec<RelationSpec> {
    let t = config.types;
    let mut specs: Vec<RelationSpec> = (0..config.relations)
        .map(|r| {
            let range = r % t;
            let mut domain = (range + 1 + r / t) % t;
            if domain == range {
                domain = (domain + 1) % t;
            }
            RelationSpec { name: format!("r{r}"), domain, range, phrases: Vec::new() }
        })
        .collect();
    // Consecutive relations with different ranges share a phrase group.
    let mut group = 0;
    let mut r = 0;
    while r < specs.len() {
        let paired = r + 1 < specs.len() && specs[r].range != specs[r + 1].range;
        let phrases: Vec<String> =
            (0..config.templates_per_relation).map(|k| format!("p{group} v{k}")).collect();
        specs[r].phrases = phrases.clone();
        if paired {
            specs[r + 1].phrases = phrases;
            r += 2;
        } else {
            r += 1;
        }
        group += 1;
    }
    specs
}

struct Candidate {
    topic: usize,
    relation: usize,
    template: usize,
    gold: Vec<usize>,
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let specs = relation_specs(config);

    // Balanced type assignment in a seeded order.
    let mut entity_type: Vec<usize> = (0..config.entities).map(|i| i % config.types).collect();
    entity_type.shuffle(&mut rng);
    let mut by_type: Vec<Vec<usize>> = vec![Vec::new(); config.types];
    for (e, &t) in entity_type.iter().enumerate() {
        by_type[t].push(e);
    }

    let mut objects: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    let mut used_relations = BTreeSet::new();
    for s in 0..config.entities {
        let mut rels: Vec<usize> = (0..specs.len()).filter(|&r| specs[r].domain == entity_type[s]).collect();
        if rels.is_empty() {
            continue;
        }
        rels.shuffle(&mut rng);
        for k in 0..config.facts_per_entity {
            let r = rels[k % rels.len()];
            let pool = &by_type[specs[r].range];
            let taken = objects.entry((s, r)).or_default();
            let free: Vec<usize> = pool.iter().copied().filter(|o| !taken.contains(o)).collect();
            if free.is_empty() {
                return Err(SynthError::Infeasible(format!(
                    "entity {} needs more distinct {} objects for {} than exist",
                    entity_surface(s),
                    type_surface(specs[r].range),
                    specs[r].name
                )));
            }
            taken.insert(free[rng.gen_range(0..free.len())]);
            used_relations.insert(r);
        }
    }
    if used_relations.len() != specs.len() {
        return Err(SynthError::Infeasible(format!(
            "only {} of {} relations received facts; add entities or types",
            used_relations.len(),
            specs.len()
        )));
    }

    let mut triples = String::from("# subject\trelation\tobject\n");
    for (e, &t) in entity_type.iter().enumerate() {
        let _ = writeln!(triples, "{}\t{}\t{}", entity_surface(e), config.type_relation, type_surface(t));
    }
    let mut facts = config.entities;
    for (&(s, r), objs) in &objects {
        for &o in objs {
            let _ = writeln!(triples, "{}\t{}\t{}", entity_surface(s), specs[r].name, entity_surface(o));
            facts += 1;
        }
    }

    let mut pool: Vec<Candidate> = Vec::new();
    for (&(s, r), objs) in &objects {
        for template in 0..config.templates_per_relation {
            pool.push(Candidate { topic: s, relation: r, template, gold: objs.iter().copied().collect() });
        }
    }
    if pool.len() < config.questions {
        return Err(SynthError::Infeasible(format!(
            "only {} distinct questions can be formed but {} were requested",
            pool.len(),
            config.questions
        )));
    }
    pool.shuffle(&mut rng);
    pool.truncate(config.questions);

    let (train, valid, test) = split(pool, config, &mut rng)?;
    let record = |(i, c): (usize, &Candidate), prefix: &str| QaRecord {
        id: Some(format!("{prefix}{i}")),
        question: format!(
            "{} {} {}",
            wh_word(specs[c.relation].range),
            specs[c.relation].phrases[c.template],
            entity_surface(c.topic)
        ),
        topic: entity_surface(c.topic),
        answers: c.gold.iter().map(|&o| entity_surface(o)).collect(),
    };
    let train_gold: BTreeSet<usize> = train.iter().flat_map(|c| c.gold.iter().copied()).collect();
    let test_answers: Vec<usize> = test.iter().flat_map(|c| c.gold.iter().copied()).collect();
    let unseen = test_answers.iter().filter(|e| !train_gold.contains(e)).count();
    let oov_q = test.iter().filter(|c| c.gold.iter().any(|e| !train_gold.contains(e))).count();
    let stats = SynthStats {
        entities: config.entities,
        relations: config.relations,
        types: config.types,
        facts,
        test_unseen_answer_share: unseen as f64 / test_answers.len().max(1) as f64,
        test_oov_question_share: oov_q as f64 / test.len().max(1) as f64,
    };
    Ok(SynthDataset {
        triples,
        train: train.iter().enumerate().map(|x| record(x, "train")).collect(),
        valid: valid.iter().enumerate().map(|x| record(x, "valid")).collect(),
        test: test.iter().enumerate().map(|x| record(x, "test")).collect(),
        relations: specs,
        stats,
    })
}

type Splits = (Vec<Candidate>, Vec<Candidate>, Vec<Candidate>);

fn split(pool: Vec<Candidate>, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Splits, SynthError> {
    let n = pool.len();
    let n_train = (n as f64 * config.train_fraction).round() as usize;
    let n_test = ((n as f64 * config.test_fraction).round() as usize).min(n - n_train);
    if n_train == 0 || n_test == 0 {
        return Err(SynthError::Infeasible(format!("{n} questions are too few for the requested split")));
    }
    let n_oov = (n_test as f64 * config.oov_fraction).ceil() as usize;
    if n_oov == 0 {
        let mut rest = pool;
        let test = rest.split_off(n - n_test);
        let valid = rest.split_off(n_train);
        return Ok((rest, valid, test));
    }

    // Hold out answer entities until enough questions depend on them.
    let mut answers: Vec<usize> = pool.iter().flat_map(|c| c.gold.iter().copied()).collect::<BTreeSet<_>>().into_iter().collect();
    answers.shuffle(rng);
    let mut held = BTreeSet::new();
    for e in answers {
        if pool.iter().filter(|c| c.gold.iter().any(|g| held.contains(g))).count() >= n_oov {
            break;
        }
        held.insert(e);
    }
    let (hit, clean): (Vec<Candidate>, Vec<Candidate>) =
        pool.into_iter().partition(|c| c.gold.iter().any(|g| held.contains(g)));
    if hit.len() < n_oov || clean.len() < n_train + (n_test - n_oov) {
        return Err(SynthError::Infeasible(format!(
            "cannot hold out answers for {n_oov} test questions while keeping {n_train} training questions"
        )));
    }
    let mut hit = hit.into_iter();
    let mut clean = clean.into_iter();
    let train: Vec<Candidate> = clean.by_ref().take(n_train).collect();
    let mut test: Vec<Candidate> = hit.by_ref().take(n_oov).collect();
    test.extend(clean.by_ref().take(n_test - n_oov));
    test.shuffle(rng);
    let mut valid: Vec<Candidate> = hit.chain(clean).collect();
    valid.shuffle(rng);
    Ok((train, valid, test))
}
