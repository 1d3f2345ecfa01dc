//! Aspect-conditioned attention over question token states and the
//! question–candidate similarity score.
//!
//! For each answer aspect embedding `e_i` and token state `h_j`:
//!
//! ```text
//! w_ij  = Wᵀ tanh([h_j ; e_i]) + b
//! α_ij  = softmax_j(w_ij)
//! q_i   = Σ_j α_ij h_j
//! S(q,a) = Σ_i q_i · e_i
//! ```
//!
//! Because tanh acts elementwise, the logit splits into a token term plus an
//! aspect term; the aspect term is constant over `j` and cancels in the
//! softmax, so all four aspects end up with the same distribution.
//!
//! Without attention every `q_i` is the encoder's fixed question vector.

use std::fmt;

use crate::autodiff::{Tape, Var};
use crate::encoder::EncodedQuestion;
use crate::error::TensorError;
use crate::kb::CandidateAnswer;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Aspect {
    Entity,
    Relation,
    Type,
    Context,
}

pub const ASPECTS: [Aspect; 4] = [Aspect::Entity, Aspect::Relation, Aspect::Type, Aspect::Context];

impl Aspect {
    pub fn label(self) -> &'static str {
        match self {
            Aspect::Entity => "entity",
            Aspect::Relation => "relation",
            Aspect::Type => "type",
            Aspect::Context => "context",
        }
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Attention parameters `W` and `b` on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w: Var,
    pub b: Var,
}

/// `[e_e, e_r, e_t, e_c]` for one candidate.
pub fn aspect_embeddings<T: Scalar>(
    tape: &mut Tape<T>,
    kb_table: Var,
    cand: &CandidateAnswer,
) -> Result<[Var; 4], TensorError> {
    let idx = |ids: &[crate::kb::ResourceId]| ids.iter().map(|r| r.index()).collect::<Vec<_>>();
    let entity = tape.row(kb_table, cand.answer.index())?;
    let relation = tape.mean_rows(kb_table, &idx(&cand.relation_path))?;
    let types = tape.mean_rows(kb_table, &idx(&cand.types))?;
    let context = tape.mean_rows(kb_table, &idx(&cand.context))?;
    Ok([entity, relation, types, context])
}

/// Unnormalized attention logits `w_i` over the tokens.
pub fn attention_logits<T: Scalar>(
    tape: &mut Tape<T>,
    states: &[Var],
    aspect: Var,
    att: AttentionVars,
) -> Result<Var, TensorError> {
    let mut logits = Vec::with_capacity(states.len());
    for &h in states {
        let joined = tape.concat(&[h, aspect])?;
        let squashed = tape.tanh(joined)?;
        logits.push(tape.dot(att.w, squashed)?);
    }
    let stacked = tape.concat(&logits)?;
    tape.add_scalar(stacked, att.b)
}

/// Attention distribution `α_i` over the question tokens.
pub fn attention_weights<T: Scalar>(
    tape: &mut Tape<T>,
    enc: &EncodedQuestion,
    aspect: Var,
    att: AttentionVars,
) -> Result<Var, TensorError> {
    let logits = attention_logits(tape, &enc.states, aspect, att)?;
    tape.softmax(logits)
}

/// `q_i = Σ_j α_ij h_j`.
pub fn aspect_question_vector<T: Scalar>(tape: &mut Tape<T>, enc: &EncodedQuestion, alpha: Var) -> Result<Var, TensorError> {
    tape.mattvec(enc.matrix, alpha)
}

/// Similarity score; also returns the per-aspect attention rows when attention
/// is on. `None` selects the fixed question vector.
pub fn score<T: Scalar>(
    tape: &mut Tape<T>,
    enc: &EncodedQuestion,
    aspects: &[Var; 4],
    attention: Option<AttentionVars>,
) -> Result<(Var, Option<[Var; 4]>), TensorError> {
    let mut total: Option<Var> = None;
    let mut alphas = [None; 4];
    for (slot, &e) in aspects.iter().enumerate() {
        let q = match attention {
            Some(att) => {
                let alpha = attention_weights(tape, enc, e, att)?;
                alphas[slot] = Some(alpha);
                aspect_question_vector(tape, enc, alpha)?
            }
            None => enc.fixed,
        };
        let term = tape.dot(q, e)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let alphas = if attention.is_some() { Some(alphas.map(|a| a.expect("set above"))) } else { None };
    Ok((total.expect("four aspects"), alphas))
}
