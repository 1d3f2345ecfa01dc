//! Model parameters and the end-to-end scoring path shared by training and
//! inference.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{aspect_embeddings, score, AttentionVars, ASPECTS};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::encoder::{bilstm_encode, lstm_encode, EncodedQuestion, LstmIds, LstmVars};
use crate::error::{ModelError, TensorError};
use crate::kb::CandidateAnswer;
use crate::qa::WordId;
use crate::tensor::{Scalar, Tensor};

/// Model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Lstm,
    Bilstm,
    BilstmAtt,
    BilstmGki,
    BilstmAttGki,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Lstm, Mode::Bilstm, Mode::BilstmAtt, Mode::BilstmGki, Mode::BilstmAttGki];

    pub fn bidirectional(self) -> bool {
        self != Mode::Lstm
    }

    pub fn attention(self) -> bool {
        matches!(self, Mode::BilstmAtt | Mode::BilstmAttGki)
    }

    /// Whether TransE training on the KB is interleaved with QA training.
    pub fn global_knowledge(self) -> bool {
        matches!(self, Mode::BilstmGki | Mode::BilstmAttGki)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Lstm => "lstm",
            Mode::Bilstm => "bilstm",
            Mode::BilstmAtt => "bilstm-att",
            Mode::BilstmGki => "bilstm-gki",
            Mode::BilstmAttGki => "bilstm-att-gki",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace(['_', '+', ' '], "-");
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| ModelError::Config(format!("unknown mode `{s}` (expected one of lstm, bilstm, bilstm-att, bilstm-gki, bilstm-att-gki)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelIds {
    pub word_emb: ParamId,
    pub kb_emb: ParamId,
    pub forward: LstmIds,
    pub backward: Option<LstmIds>,
    pub att_w: ParamId,
    pub att_b: ParamId,
}

/// Parameters bound to one tape.
#[derive(Clone, Copy, Debug)]
pub struct Bound {
    pub word_emb: Var,
    pub kb_emb: Var,
    pub forward: LstmVars,
    pub backward: Option<LstmVars>,
    pub attention: AttentionVars,
}

#[derive(Debug)]
pub struct Model<T = f32> {
    mode: Mode,
    dim: usize,
    pub params: ParamStore<T>,
    ids: ModelIds,
    attention_calls: AtomicU64,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model {
            mode: self.mode,
            dim: self.dim,
            params: self.params.clone(),
            ids: self.ids,
            attention_calls: AtomicU64::new(self.attention_calls.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Scalar> PartialEq for Model<T> {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode && self.dim == other.dim && self.params == other.params
    }
}

const WORD_EMB: &str = "word_emb";
const KB_EMB: &str = "kb_emb";
const ATT_W: &str = "att.w";
const ATT_B: &str = "att.b";

fn lstm_names(dir: &str) -> [String; 3] {
    [format!("lstm.{dir}.wx"), format!("lstm.{dir}.wh"), format!("lstm.{dir}.b")]
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized model; every weight uniform in `[-init_scale, init_scale]`.
    pub fn new<R: Rng>(
        mode: Mode,
        dim: usize,
        word_vocab: usize,
        kb_vocab: usize,
        init_scale: f64,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(ModelError::Config(format!("embedding size d must be even and positive, got {dim}")));
        }
        if word_vocab == 0 || kb_vocab == 0 {
            return Err(ModelError::Config("vocabularies must be nonempty".into()));
        }
        let hidden = if mode.bidirectional() { dim / 2 } else { dim };
        let mut params = ParamStore::new();
        params.add(WORD_EMB, Tensor::uniform(&[word_vocab, dim], init_scale, rng));
        params.add(KB_EMB, Tensor::uniform(&[kb_vocab, dim], init_scale, rng));
        let dirs: &[&str] = if mode.bidirectional() { &["fwd", "bwd"] } else { &["fwd"] };
        for dir in dirs {
            let [wx, wh, b] = lstm_names(dir);
            params.add(wx, Tensor::uniform(&[4 * hidden, dim], init_scale, rng));
            params.add(wh, Tensor::uniform(&[4 * hidden, hidden], init_scale, rng));
            params.add(b, Tensor::uniform(&[4 * hidden], init_scale, rng));
        }
        params.add(ATT_W, Tensor::uniform(&[2 * dim], init_scale, rng));
        params.add(ATT_B, Tensor::uniform(&[1], init_scale, rng));
        Self::from_params(mode, params)
    }

    /// Rebuilds a model from named tensors, checking every expected shape.
    pub fn from_params(mode: Mode, params: ParamStore<T>) -> Result<Self, ModelError> {
        let find = |name: &str| {
            params.find(name).ok_or_else(|| ModelError::Config(format!("missing parameter `{name}`")))
        };
        let word_emb = find(WORD_EMB)?;
        let kb_emb = find(KB_EMB)?;
        let dim = params.get(word_emb).cols();
        let hidden = if mode.bidirectional() { dim / 2 } else { dim };
        let lstm = |dir: &str| -> Result<LstmIds, ModelError> {
            let [wx, wh, b] = lstm_names(dir);
            Ok(LstmIds { wx: find(&wx)?, wh: find(&wh)?, b: find(&b)? })
        };
        let forward = lstm("fwd")?;
        let backward = if mode.bidirectional() { Some(lstm("bwd")?) } else { None };
        let ids = ModelIds { word_emb, kb_emb, forward, backward, att_w: find(ATT_W)?, att_b: find(ATT_B)? };

        let mut expect: Vec<(ParamId, Vec<usize>)> = vec![
            (kb_emb, vec![params.get(kb_emb).rows(), dim]),
            (ids.att_w, vec![2 * dim]),
            (ids.att_b, vec![1]),
        ];
        for l in std::iter::once(forward).chain(backward) {
            expect.push((l.wx, vec![4 * hidden, dim]));
            expect.push((l.wh, vec![4 * hidden, hidden]));
            expect.push((l.b, vec![4 * hidden]));
        }
        for (id, shape) in expect {
            if params.get(id).shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    params.name(id),
                    params.get(id).shape(),
                    shape
                )));
            }
        }
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(ModelError::Config(format!("embedding size d must be even, got {dim}")));
        }
        Ok(Model { mode, dim, params, ids, attention_calls: AtomicU64::new(0) })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &ModelIds {
        &self.ids
    }

    pub fn word_vocab_size(&self) -> usize {
        self.params.get(self.ids.word_emb).rows()
    }

    pub fn kb_vocab_size(&self) -> usize {
        self.params.get(self.ids.kb_emb).rows()
    }

    pub fn hidden(&self) -> usize {
        if self.mode.bidirectional() {
            self.dim / 2
        } else {
            self.dim
        }
    }

    /// Number of attention distributions computed so far by this model.
    pub fn attention_calls(&self) -> u64 {
        self.attention_calls.load(Ordering::Relaxed)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            mode: self.mode,
            dim: self.dim,
            params: self.params.cast(),
            ids: self.ids,
            attention_calls: AtomicU64::new(0),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let hidden = self.hidden();
        let mut lstm = |ids: LstmIds| LstmVars {
            wx: tape.param(&self.params, ids.wx),
            wh: tape.param(&self.params, ids.wh),
            b: tape.param(&self.params, ids.b),
            hidden,
        };
        let forward = lstm(self.ids.forward);
        let backward = self.ids.backward.map(lstm);
        Bound {
            word_emb: tape.param(&self.params, self.ids.word_emb),
            kb_emb: tape.param(&self.params, self.ids.kb_emb),
            forward,
            backward,
            attention: AttentionVars {
                w: tape.param(&self.params, self.ids.att_w),
                b: tape.param(&self.params, self.ids.att_b),
            },
        }
    }

    pub fn encode(&self, tape: &mut Tape<T>, bound: &Bound, tokens: &[WordId]) -> Result<EncodedQuestion, TensorError> {
        if tokens.is_empty() {
            return Err(TensorError::Empty { op: "encode" });
        }
        match &bound.backward {
            Some(bwd) => bilstm_encode(tape, bound.word_emb, &bound.forward, bwd, tokens),
            None => lstm_encode(tape, bound.word_emb, &bound.forward, tokens),
        }
    }

    /// Records `S(q, a)` on the tape, with the attention rows in attention modes.
    pub fn score_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        enc: &EncodedQuestion,
        cand: &CandidateAnswer,
    ) -> Result<(Var, Option<[Var; 4]>), TensorError> {
        let aspects = aspect_embeddings(tape, bound.kb_emb, cand)?;
        let attention = if self.mode.attention() {
            self.attention_calls.fetch_add(ASPECTS.len() as u64, Ordering::Relaxed);
            Some(bound.attention)
        } else {
            None
        };
        score(tape, enc, &aspects, attention)
    }

    /// Scores every candidate against one question.
    pub fn score_candidates(&self, tokens: &[WordId], cands: &[CandidateAnswer]) -> Result<Vec<f64>, TensorError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let enc = self.encode(&mut tape, &bound, tokens)?;
        cands
            .iter()
            .map(|c| {
                let (s, _) = self.score_on_tape(&mut tape, &bound, &enc, c)?;
                Ok(tape.value(s).item().as_f64())
            })
            .collect()
    }

    /// Attention rows (entity, relation, type, context) for one candidate.
    pub fn attention_map(&self, tokens: &[WordId], cand: &CandidateAnswer) -> Result<[Vec<f64>; 4], ModelError> {
        if !self.mode.attention() {
            return Err(ModelError::Mode(format!(
                "mode `{}` has no attention; heat maps need bilstm-att or bilstm-att-gki",
                self.mode
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let enc = self.encode(&mut tape, &bound, tokens)?;
        let (_, alphas) = self.score_on_tape(&mut tape, &bound, &enc, cand)?;
        let alphas = alphas.expect("attention mode");
        Ok(alphas.map(|a| tape.value(a).to_f64_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mode_parsing() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("BiLSTM+ATT+GKI".parse::<Mode>().unwrap(), Mode::BilstmAttGki);
        assert!("transformer".parse::<Mode>().is_err());
    }

    #[test]
    fn rejects_odd_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Model::<f32>::new(Mode::Bilstm, 7, 5, 5, 0.08, &mut rng).is_err());
    }

    #[test]
    fn shapes_per_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bi = Model::<f32>::new(Mode::BilstmAtt, 8, 5, 6, 0.08, &mut rng).unwrap();
        assert_eq!(bi.params.get(bi.ids().forward.wx).shape(), &[16, 8]);
        assert_eq!(bi.params.get(bi.ids().att_w).shape(), &[16]);
        let uni = Model::<f32>::new(Mode::Lstm, 8, 5, 6, 0.08, &mut rng).unwrap();
        assert_eq!(uni.params.get(uni.ids().forward.wh).shape(), &[32, 8]);
        assert!(uni.ids().backward.is_none());
        assert!(bi.params.data_all_within(0.08));
    }

    impl<T: Scalar> ParamStore<T> {
        fn data_all_within(&self, bound: f64) -> bool {
            self.iter().all(|(_, _, t)| t.data().iter().all(|x| x.as_f64().abs() <= bound))
        }
    }

    #[test]
    fn fixed_mode_never_attends() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::<f32>::new(Mode::Bilstm, 8, 5, 6, 0.08, &mut rng).unwrap();
        let cand = CandidateAnswer {
            answer: crate::kb::ResourceId(2),
            relation_path: vec![crate::kb::ResourceId(3)],
            types: vec![crate::kb::ResourceId(4)],
            context: vec![crate::kb::ResourceId(5)],
        };
        m.score_candidates(&[1, 2], &[cand.clone()]).unwrap();
        assert_eq!(m.attention_calls(), 0);
        assert!(m.attention_map(&[1], &cand).is_err());
    }
}
