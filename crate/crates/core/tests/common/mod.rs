#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use kbqa_core::attention::ASPECTS;
use kbqa_core::kb::{KbOptions, KbStore, ResourceId};
use kbqa_core::model::Model;
use kbqa_core::synth::{generate, SynthConfig, TYPE_WORDS};
use kbqa_core::trainer::Corpus;
use rand::Rng;

pub type Triple = (String, String, String);

/// Random KB of up to `max_facts` facts, about a tenth of them type facts.
pub fn random_kb<R: Rng>(rng: &mut R, max_facts: usize) -> Vec<Triple> {
    let n_ent = rng.gen_range(2..30);
    let n_rel = rng.gen_range(1..5);
    let n_facts = rng.gen_range(1..=max_facts);
    (0..n_facts)
        .map(|_| {
            let s = format!("n{}", rng.gen_range(0..n_ent));
            if rng.gen_bool(0.1) {
                (s, "type".to_string(), format!("t{}", rng.gen_range(0..3)))
            } else {
                (s, format!("r{}", rng.gen_range(0..n_rel)), format!("n{}", rng.gen_range(0..n_ent)))
            }
        })
        .collect()
}

pub fn kb_text(facts: &[Triple]) -> String {
    facts.iter().map(|(s, r, o)| format!("{s}\t{r}\t{o}\n")).collect()
}

/// Brute-force candidate paths: every (entity, relation path) within two hops,
/// walking facts in either direction and never through type facts.
pub fn bfs_oracle(facts: &[Triple], topic: &str, max_hops: usize) -> BTreeSet<(String, Vec<String>)> {
    let edges: Vec<&Triple> = facts.iter().filter(|f| f.1 != "type").collect();
    let step = |from: &str| -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (s, r, o) in &edges {
            if s == from {
                out.push((r.clone(), o.clone()));
            }
            if o == from {
                out.push((r.clone(), s.clone()));
            }
        }
        out
    };
    let mut found = BTreeSet::new();
    for (r1, x) in step(topic) {
        if x != topic {
            found.insert((x.clone(), vec![r1.clone()]));
        }
        if max_hops >= 2 {
            for (r2, y) in step(&x) {
                if y != topic {
                    found.insert((y, vec![r1.clone(), r2]));
                }
            }
        }
    }
    found
}

/// Score every entity (best over duplicates), sort, keep those strictly within `margin`.
pub fn threshold_oracle(scored: &[(ResourceId, f64)], margin: f64) -> BTreeSet<ResourceId> {
    let mut best: BTreeMap<ResourceId, f64> = BTreeMap::new();
    for &(e, s) in scored {
        let b = best.entry(e).or_insert(f64::NEG_INFINITY);
        if s > *b {
            *b = s;
        }
    }
    let mut v: Vec<(ResourceId, f64)> = best.into_iter().collect();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    match v.first() {
        None => BTreeSet::new(),
        Some(&(_, top)) => v.into_iter().filter(|&(_, s)| top - s < margin).map(|(e, _)| e).collect(),
    }
}

/// Plain scalar evaluation of the attention score: logits, softmax, weighted
/// sums and the final dot products.
pub fn scalar_score(states: &[Vec<f64>], aspects: &[Vec<f64>; 4], w: &[f64], b: f64) -> (f64, [Vec<f64>; 4]) {
    let d = aspects[0].len();
    let mut total = 0.0;
    let mut alphas: [Vec<f64>; 4] = Default::default();
    for (i, e) in aspects.iter().enumerate() {
        let mut logits = Vec::new();
        for h in states {
            let x: Vec<f64> = h.iter().chain(e.iter()).copied().collect();
            let mut z = b;
            for k in 0..x.len() {
                z += w[k] * x[k].tanh();
            }
            logits.push(z);
        }
        let mut m = f64::NEG_INFINITY;
        for &z in &logits {
            if z > m {
                m = z;
            }
        }
        let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let alpha: Vec<f64> = exps.iter().map(|x| x / sum).collect();
        let mut q = vec![0.0; d];
        for (j, h) in states.iter().enumerate() {
            for k in 0..d {
                q[k] += alpha[j] * h[k];
            }
        }
        for k in 0..d {
            total += q[k] * e[k];
        }
        alphas[i] = alpha;
    }
    (total, alphas)
}

pub fn synth_corpus(config: &SynthConfig) -> Corpus {
    let data = generate(config).expect("valid synthetic config");
    let options = KbOptions { type_relation: config.type_relation.clone(), ..KbOptions::default() };
    let store = KbStore::parse_triples(&data.triples, "synthetic", options).expect("generated KB parses");
    Corpus::new(store, &data.train, &data.valid, &data.test, 2)
}

/// Share of test questions whose type-aspect attention peaks on the wh-word.
/// Each question is paired with its first gold candidate.
pub fn wh_argmax_share(model: &Model, corpus: &Corpus) -> f64 {
    let wh: BTreeSet<&str> = TYPE_WORDS.iter().map(|(_, w)| *w).collect();
    let type_row = ASPECTS.iter().position(|a| a.label() == "type").unwrap();
    let mut hits = 0;
    let mut total = 0;
    for (q, set) in corpus.test.split.questions.iter().zip(&corpus.test.sets) {
        let Some(cand) = set.candidates.iter().find(|c| q.gold.contains(&c.answer)) else { continue };
        let rows = model.attention_map(&q.tokens, cand).unwrap();
        let row = &rows[type_row];
        let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        total += 1;
        if wh.contains(q.words[arg].as_str()) {
            hits += 1;
        }
    }
    hits as f64 / total.max(1) as f64
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Largest relative error between `analytic` gradients and central finite
/// differences of `f` over every element of every parameter tensor, with
/// relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn max_gradient_error(
    model: &mut Model<f64>,
    analytic: &kbqa_core::autodiff::GradientSet<f64>,
    h: f64,
    floor: f64,
    f: impl Fn(&Model<f64>) -> f64,
) -> Vec<(String, f64)> {
    let ids: Vec<_> = model.params.ids().collect();
    let mut out = Vec::new();
    for id in ids {
        let name = model.params.name(id).to_string();
        let n = model.params.get(id).len();
        let grad = analytic.get(id).expect("every parameter has a gradient");
        let mut worst: f64 = 0.0;
        for k in 0..n {
            let orig = model.params.get(id).data()[k];
            model.params.get_mut(id).data_mut()[k] = orig + h;
            let up = f(model);
            model.params.get_mut(id).data_mut()[k] = orig - h;
            let down = f(model);
            model.params.get_mut(id).data_mut()[k] = orig;
            let num = (up - down) / (2.0 * h);
            let a = grad.data()[k];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(floor);
            worst = worst.max(err);
        }
        out.push((name, worst));
    }
    out
}

pub const GRADIENT_KB: &str = "a\tr1\tb\nb\tr2\tc\nc\tr3\td\nb\ttype\tt1\nc\ttype\tt2\ne\tr1\tc\n";

/// Worst relative gradient errors for `S(q, a)` and for the pair loss of a
/// d=8 model on a 4-token question; the scored candidate has a 2-hop path,
/// a type and three context entities.
pub fn gradient_report(mode: kbqa_core::model::Mode, seed: u64) -> (Vec<(String, f64)>, Vec<(String, f64)>) {
    use kbqa_core::autodiff::Tape;
    use kbqa_core::qa::CandRef;
    use kbqa_core::trainer::{triple_loss, Triple};
    use rand::SeedableRng;

    let store = KbStore::parse_triples(GRADIENT_KB, "gradient", KbOptions::default()).unwrap();
    let set = store.candidate_set(store.entity("a").unwrap(), 2);
    let pos = set.candidates.iter().position(|c| c.hops() == 1).unwrap();
    let neg = set.candidates.iter().position(|c| c.hops() == 2 && c.context.len() == 3).unwrap();
    let sets = vec![set];
    let tokens = vec![1u32, 2, 3, 4];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::new(mode, 8, 5, store.vocab_size(), 0.5, &mut rng).unwrap();

    let cand = sets[0].candidates[neg].clone();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let enc = model.encode(&mut tape, &bound, &tokens).unwrap();
    let (s, _) = model.score_on_tape(&mut tape, &bound, &enc, &cand).unwrap();
    let grads = tape.backward(s).unwrap();
    let score_report = max_gradient_error(&mut model, &grads, 1e-5, 1e-4, |m| {
        m.score_candidates(&tokens, std::slice::from_ref(&cand)).unwrap()[0]
    });

    let triple = Triple {
        question: 0,
        positive: CandRef { set: 0, idx: pos },
        negative: CandRef { set: 0, idx: neg },
        weight: 0.5,
    };
    let margin = 10.0;
    let (loss, grads) = triple_loss(&model, &tokens, &sets, &triple, margin, true).unwrap();
    assert!(loss > 0.0, "hinge must be active for the check");
    let grads = grads.unwrap();
    let loss_report = max_gradient_error(&mut model, &grads, 1e-5, 1e-4, |m| {
        triple_loss(m, &tokens, &sets, &triple, margin, false).unwrap().0
    });
    (score_report, loss_report)
}
