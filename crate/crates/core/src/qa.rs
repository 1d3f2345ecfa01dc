//! Question–answer records, the word vocabulary, and pairwise training
//! example construction with sampled negatives.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::KbError;
use crate::kb::{CandidateAnswer, CandidateSet, KbStore, ResourceId};

pub type WordId = u32;

pub const UNK: WordId = 0;
pub const UNK_SURFACE: &str = "<unk>";

/// One line of a QA file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(alias = "q")]
    pub question: String,
    pub topic: String,
    pub answers: Vec<String>,
}

/// Lowercases and splits on anything that is not alphanumeric or `_`.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordVocab {
    words: Vec<String>,
    ids: HashMap<String, WordId>,
}

impl Default for WordVocab {
    fn default() -> Self {
        Self::from_words(std::iter::empty::<String>())
    }
}

impl WordVocab {
    /// Vocabulary in first-seen order; id 0 is reserved for unknown words.
    pub fn from_words<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut v = WordVocab { words: vec![UNK_SURFACE.to_string()], ids: HashMap::new() };
        v.ids.insert(UNK_SURFACE.to_string(), UNK);
        for w in words {
            let w = w.as_ref();
            if !v.ids.contains_key(w) {
                v.ids.insert(w.to_string(), v.words.len() as WordId);
                v.words.push(w.to_string());
            }
        }
        v
    }

    pub fn from_records(records: &[QaRecord]) -> Self {
        Self::from_words(records.iter().flat_map(|r| split_words(&r.question)))
    }

    /// Rebuilds a vocabulary from its full word list (index 0 must be the UNK word).
    pub fn from_list(words: Vec<String>) -> Option<Self> {
        if words.first().map(String::as_str) != Some(UNK_SURFACE) {
            return None;
        }
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i as WordId)).collect();
        Some(WordVocab { words, ids })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, id: WordId) -> &str {
        &self.words[id as usize]
    }

    pub fn id(&self, word: &str) -> WordId {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    /// Word ids of `text`; never empty (degenerate text yields a single UNK).
    pub fn tokenize(&self, text: &str) -> Vec<WordId> {
        let ids: Vec<WordId> = split_words(text).iter().map(|w| self.id(w)).collect();
        if ids.is_empty() {
            vec![UNK]
        } else {
            ids
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub words: Vec<String>,
    pub tokens: Vec<WordId>,
    pub topic: ResourceId,
    pub gold: BTreeSet<ResourceId>,
}

/// A record that could not be turned into a [`Question`].
#[derive(Clone, Debug, PartialEq)]
pub struct SkippedQuestion {
    pub id: String,
    pub reason: String,
    pub gold: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QaSplit {
    pub questions: Vec<Question>,
    pub skipped: Vec<SkippedQuestion>,
    /// Gold answers dropped because they are not in the KB.
    pub dropped_answers: usize,
}

impl QaSplit {
    /// Questions including skipped ones.
    pub fn total(&self) -> usize {
        self.questions.len() + self.skipped.len()
    }
}

pub fn parse_qa_records(text: &str, source: &str) -> Result<Vec<QaRecord>, KbError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: QaRecord = serde_json::from_str(line).map_err(|e| KbError::BadRecord {
            path: source.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_qa_records(path: impl AsRef<Path>) -> Result<Vec<QaRecord>, KbError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| KbError::io(path, e))?;
    parse_qa_records(&text, &path.display().to_string())
}

pub fn write_qa_records(records: &[QaRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

/// Resolves surface forms against the store. Records whose topic (or every
/// gold answer) is missing are skipped; individual missing answers are dropped.
pub fn resolve_questions(records: &[QaRecord], store: &KbStore, vocab: &WordVocab) -> QaSplit {
    let mut split = QaSplit::default();
    for (i, rec) in records.iter().enumerate() {
        let id = rec.id.clone().unwrap_or_else(|| format!("q{i}"));
        let Some(topic) = store.entity(&rec.topic) else {
            log::warn!("question {id}: topic `{}` not in KB; skipped", rec.topic);
            split.skipped.push(SkippedQuestion {
                id,
                reason: format!("unknown topic `{}`", rec.topic),
                gold: rec.answers.clone(),
            });
            continue;
        };
        let mut gold = BTreeSet::new();
        for a in &rec.answers {
            match store.entity(a) {
                Some(e) => {
                    gold.insert(e);
                }
                None => split.dropped_answers += 1,
            }
        }
        if gold.is_empty() {
            split.skipped.push(SkippedQuestion {
                id,
                reason: "no gold answer in KB".into(),
                gold: rec.answers.clone(),
            });
            continue;
        }
        split.questions.push(Question {
            id,
            text: rec.question.clone(),
            words: split_words(&rec.question),
            tokens: vocab.tokenize(&rec.question),
            topic,
            gold,
        });
    }
    if split.dropped_answers > 0 {
        log::warn!("{} gold answer(s) not found in KB were dropped", split.dropped_answers);
    }
    split
}

pub fn load_qa(path: impl AsRef<Path>, store: &KbStore, vocab: &WordVocab) -> Result<QaSplit, KbError> {
    Ok(resolve_questions(&read_qa_records(path)?, store, vocab))
}

/// Points at one candidate of one question's candidate set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CandRef {
    pub set: usize,
    pub idx: usize,
}

impl CandRef {
    pub fn resolve<'a>(&self, sets: &'a [CandidateSet]) -> &'a CandidateAnswer {
        &sets[self.set].candidates[self.idx]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub question: usize,
    pub positive: CandRef,
    pub negatives: Vec<CandRef>,
    /// `1 / |P_q|` of the source question.
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExampleStats {
    pub questions_without_positives: usize,
    pub short_examples: usize,
}

/// Indices of the positive candidates: for each gold entity in the set, the
/// candidates reaching it by a shortest relation path.
pub fn positive_indices(gold: &BTreeSet<ResourceId>, set: &CandidateSet) -> Vec<usize> {
    let mut best: HashMap<ResourceId, usize> = HashMap::new();
    for c in set.candidates.iter().filter(|c| gold.contains(&c.answer)) {
        let e = best.entry(c.answer).or_insert(c.hops());
        *e = (*e).min(c.hops());
    }
    set.candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| best.get(&c.answer) == Some(&c.hops()))
        .map(|(i, _)| i)
        .collect()
}

/// Builds one example per positive candidate of question `qi`, each with up to
/// `k` negatives sampled without replacement from the question's own wrong
/// candidates, topped up from randomly chosen other candidate sets.
pub fn make_training_examples<R: Rng>(
    qi: usize,
    gold: &BTreeSet<ResourceId>,
    sets: &[CandidateSet],
    k: usize,
    rng: &mut R,
    stats: &mut ExampleStats,
) -> Vec<TrainingExample> {
    assert!(k >= 1, "k must be positive");
    let set = &sets[qi];
    let positives = positive_indices(gold, set);
    if positives.is_empty() {
        stats.questions_without_positives += 1;
        return Vec::new();
    }
    let local: Vec<usize> = (0..set.len()).filter(|&i| !gold.contains(&set.candidates[i].answer)).collect();
    let weight = 1.0 / positives.len() as f64;

    positives
        .iter()
        .map(|&p| {
            let mut negatives: Vec<CandRef> = if local.len() >= k {
                index::sample(rng, local.len(), k).iter().map(|j| CandRef { set: qi, idx: local[j] }).collect()
            } else {
                local.iter().map(|&idx| CandRef { set: qi, idx }).collect()
            };
            if negatives.len() < k {
                let mut others: Vec<usize> = (0..sets.len()).filter(|&s| s != qi).collect();
                others.shuffle(rng);
                'fill: for s in others {
                    let mut idxs: Vec<usize> = (0..sets[s].len())
                        .filter(|&i| !gold.contains(&sets[s].candidates[i].answer))
                        .collect();
                    idxs.shuffle(rng);
                    for idx in idxs {
                        negatives.push(CandRef { set: s, idx });
                        if negatives.len() == k {
                            break 'fill;
                        }
                    }
                }
                if negatives.len() < k {
                    stats.short_examples += 1;
                    log::warn!("question #{qi}: only {} of {k} negatives available", negatives.len());
                }
            }
            TrainingExample { question: qi, positive: CandRef { set: qi, idx: p }, negatives, weight }
        })
        .collect()
}

/// Derives a stream seed from a base seed and a tag.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Examples for every question, each question sampled from its own seeded stream.
pub fn build_examples(
    golds: &[&BTreeSet<ResourceId>],
    sets: &[CandidateSet],
    k: usize,
    seed: u64,
) -> (Vec<TrainingExample>, ExampleStats) {
    let mut stats = ExampleStats::default();
    let mut out = Vec::new();
    for (qi, gold) in golds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, qi as u64));
        out.extend(make_training_examples(qi, gold, sets, k, &mut rng, &mut stats));
    }
    (out, stats)
}
