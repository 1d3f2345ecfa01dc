//! Word embedding lookup and (bi)directional LSTM encoding of a question.
//!
//! Gates follow the common LSTM formulation without peepholes:
//!
//! ```text
//! z = Wx·x_t + Wh·h_{t-1} + b          (stacked as [i; f; o; g])
//! c_t = σ(f) ⊙ c_{t-1} + σ(i) ⊙ tanh(g)
//! h_t = σ(o) ⊙ tanh(c_t)
//! ```
//!
//! Hidden and cell states start at zero.

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::TensorError;
use crate::qa::WordId;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Parameter ids of one LSTM direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmIds {
    /// `[4h, d]`
    pub wx: ParamId,
    /// `[4h, h]`
    pub wh: ParamId,
    /// `[4h]`
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
    pub hidden: usize,
}

/// Token states of one question as recorded on a tape.
#[derive(Clone, Debug)]
pub struct EncodedQuestion {
    /// `h_j` per token, in question order.
    pub states: Vec<Var>,
    /// The states stacked as an `n × d` matrix.
    pub matrix: Var,
    /// Question vector used when attention is off: `[→h_n ; ←h_1]`, or
    /// `→h_n` for the unidirectional encoder.
    pub fixed: Var,
}

impl EncodedQuestion {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Stacks the embedding rows of `tokens` into an `n × d` matrix.
pub fn embed_words<T: Scalar>(tape: &mut Tape<T>, table: Var, tokens: &[WordId]) -> Result<Var, TensorError> {
    let rows = tokens.iter().map(|&t| tape.row(table, t as usize)).collect::<Result<Vec<_>, _>>()?;
    tape.stack(&rows)
}

/// Runs one LSTM direction over the rows of `inputs` (`n × d`). States are
/// returned aligned to the original token positions for both directions.
pub fn lstm_direction<T: Scalar>(
    tape: &mut Tape<T>,
    inputs: Var,
    params: &LstmVars,
    direction: Direction,
) -> Result<Vec<Var>, TensorError> {
    let n = tape.value(inputs).rows();
    let h = params.hidden;
    let mut hidden = tape.constant(Tensor::zeros(&[h]));
    let mut cell = tape.constant(Tensor::zeros(&[h]));
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..n).collect(),
        Direction::Backward => (0..n).rev().collect(),
    };
    let mut states = vec![None; n];
    for j in order {
        let x = tape.row(inputs, j)?;
        let zx = tape.matvec(params.wx, x)?;
        let zh = tape.matvec(params.wh, hidden)?;
        let z = tape.add(zx, zh)?;
        let z = tape.add(z, params.b)?;
        let i = tape.slice(z, 0, h)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice(z, h, h)?;
        let f = tape.sigmoid(f)?;
        let o = tape.slice(z, 2 * h, h)?;
        let o = tape.sigmoid(o)?;
        let g = tape.slice(z, 3 * h, h)?;
        let g = tape.tanh(g)?;
        let keep = tape.mul(f, cell)?;
        let write = tape.mul(i, g)?;
        cell = tape.add(keep, write)?;
        let squashed = tape.tanh(cell)?;
        hidden = tape.mul(o, squashed)?;
        states[j] = Some(hidden);
    }
    Ok(states.into_iter().map(|s| s.expect("every position visited")).collect())
}

/// Bidirectional encoding: `h_j = [→h_j ; ←h_j]`.
pub fn bilstm_encode<T: Scalar>(
    tape: &mut Tape<T>,
    word_table: Var,
    forward: &LstmVars,
    backward: &LstmVars,
    tokens: &[WordId],
) -> Result<EncodedQuestion, TensorError> {
    let inputs = embed_words(tape, word_table, tokens)?;
    let fwd = lstm_direction(tape, inputs, forward, Direction::Forward)?;
    let bwd = lstm_direction(tape, inputs, backward, Direction::Backward)?;
    let states = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| tape.concat(&[f, b]))
        .collect::<Result<Vec<_>, _>>()?;
    let matrix = tape.stack(&states)?;
    let fixed = tape.concat(&[fwd[fwd.len() - 1], bwd[0]])?;
    Ok(EncodedQuestion { states, matrix, fixed })
}

/// Left-to-right encoding only; the last state is the fixed representation.
pub fn lstm_encode<T: Scalar>(
    tape: &mut Tape<T>,
    word_table: Var,
    forward: &LstmVars,
    tokens: &[WordId],
) -> Result<EncodedQuestion, TensorError> {
    let inputs = embed_words(tape, word_table, tokens)?;
    let states = lstm_direction(tape, inputs, forward, Direction::Forward)?;
    let matrix = tape.stack(&states)?;
    let fixed = states[states.len() - 1];
    Ok(EncodedQuestion { states, matrix, fixed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Dir {
        wx: Vec<Vec<f64>>,
        wh: Vec<Vec<f64>>,
        b: Vec<f64>,
    }

    /// Straight-line scalar recurrence used as the reference.
    fn reference(inputs: &[Vec<f64>], p: &Dir, reverse: bool) -> Vec<Vec<f64>> {
        let h = p.b.len() / 4;
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut hs = vec![0.0; h];
        let mut cs = vec![0.0; h];
        let mut out = vec![vec![]; inputs.len()];
        let order: Vec<usize> =
            if reverse { (0..inputs.len()).rev().collect() } else { (0..inputs.len()).collect() };
        for t in order {
            let x = &inputs[t];
            let mut z = vec![0.0; 4 * h];
            for r in 0..4 * h {
                let mut acc = p.b[r];
                for (c, xc) in x.iter().enumerate() {
                    acc += p.wx[r][c] * xc;
                }
                for (c, hc) in hs.iter().enumerate() {
                    acc += p.wh[r][c] * hc;
                }
                z[r] = acc;
            }
            let mut new_h = vec![0.0; h];
            for u in 0..h {
                let i = sig(z[u]);
                let f = sig(z[h + u]);
                let o = sig(z[2 * h + u]);
                let g = z[3 * h + u].tanh();
                cs[u] = f * cs[u] + i * g;
                new_h[u] = o * cs[u].tanh();
            }
            hs = new_h;
            out[t] = hs.clone();
        }
        out
    }

    fn to_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    fn random_dir(store: &mut ParamStore<f64>, name: &str, d: usize, h: usize, rng: &mut ChaCha8Rng) -> LstmIds {
        LstmIds {
            wx: store.add(format!("{name}.wx"), Tensor::uniform(&[4 * h, d], 0.5, rng)),
            wh: store.add(format!("{name}.wh"), Tensor::uniform(&[4 * h, h], 0.5, rng)),
            b: store.add(format!("{name}.b"), Tensor::uniform(&[4 * h], 0.5, rng)),
        }
    }

    fn bind(tape: &mut Tape<f64>, store: &ParamStore<f64>, ids: LstmIds, h: usize) -> LstmVars {
        LstmVars { wx: tape.param(store, ids.wx), wh: tape.param(store, ids.wh), b: tape.param(store, ids.b), hidden: h }
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let mut store = ParamStore::<f64>::new();
        let ids = LstmIds {
            wx: store.add("wx", Tensor::zeros(&[8, 4])),
            wh: store.add("wh", Tensor::zeros(&[8, 2])),
            b: store.add("b", Tensor::zeros(&[8])),
        };
        let mut tape = Tape::new();
        let p = bind(&mut tape, &store, ids, 2);
        let x = tape.constant(Tensor::zeros(&[3, 4]));
        for dir in [Direction::Forward, Direction::Backward] {
            let hs = lstm_direction(&mut tape, x, &p, dir).unwrap();
            for h in hs {
                assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn single_step_has_no_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let ids = random_dir(&mut store, "l", 4, 2, &mut rng);
        let mut tape = Tape::new();
        let p = bind(&mut tape, &store, ids, 2);
        let x = tape.constant(Tensor::uniform(&[1, 4], 1.0, &mut rng));
        let f = lstm_direction(&mut tape, x, &p, Direction::Forward).unwrap();
        let b = lstm_direction(&mut tape, x, &p, Direction::Backward).unwrap();
        assert_eq!(tape.value(f[0]), tape.value(b[0]));
    }

    #[test]
    fn matches_reference_recurrence() {
        let (d, h) = (8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::<f64>::new();
        let ids = random_dir(&mut store, "l", d, h, &mut rng);
        let dir = Dir {
            wx: to_rows(store.get(ids.wx)),
            wh: to_rows(store.get(ids.wh)),
            b: store.get(ids.b).data().to_vec(),
        };
        let input = Tensor::<f64>::uniform(&[3, d], 1.0, &mut rng);
        let rows = to_rows(&input);
        let mut tape = Tape::new();
        let p = bind(&mut tape, &store, ids, h);
        let x = tape.constant(input);
        for (direction, reverse) in [(Direction::Forward, false), (Direction::Backward, true)] {
            let got = lstm_direction(&mut tape, x, &p, direction).unwrap();
            let want = reference(&rows, &dir, reverse);
            for (g, w) in got.iter().zip(&want) {
                for (a, b) in tape.value(*g).data().iter().zip(w) {
                    assert!((a - b).abs() < 1e-5, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn reversal_swaps_directions() {
        let (d, h, v) = (4, 2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let emb = store.add("emb", Tensor::uniform(&[v, d], 0.5, &mut rng));
        let a = random_dir(&mut store, "a", d, h, &mut rng);
        let b = random_dir(&mut store, "b", d, h, &mut rng);
        let tokens = [1u32, 4, 2, 5];
        let reversed: Vec<u32> = tokens.iter().rev().copied().collect();

        let mut tape = Tape::new();
        let e = tape.param(&store, emb);
        let (pa, pb) = (bind(&mut tape, &store, a, h), bind(&mut tape, &store, b, h));
        let orig = bilstm_encode(&mut tape, e, &pa, &pb, &tokens).unwrap();
        let swapped = bilstm_encode(&mut tape, e, &pb, &pa, &reversed).unwrap();
        let n = tokens.len();
        for j in 0..n {
            let fwd_orig = &tape.value(orig.states[n - 1 - j]).data()[..h];
            let bwd_rev = &tape.value(swapped.states[j]).data()[h..];
            for (x, y) in fwd_orig.iter().zip(bwd_rev) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shapes_and_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let emb = store.add("emb", Tensor::uniform(&[3, 4], 0.5, &mut rng));
        let a = random_dir(&mut store, "a", 4, 2, &mut rng);
        let b = random_dir(&mut store, "b", 4, 2, &mut rng);
        let mut tape = Tape::new();
        let e = tape.param(&store, emb);
        let (pa, pb) = (bind(&mut tape, &store, a, 2), bind(&mut tape, &store, b, 2));
        let enc = bilstm_encode(&mut tape, e, &pa, &pb, &[1, 2]).unwrap();
        assert_eq!(tape.value(enc.matrix).shape(), &[2, 4]);
        assert_eq!(tape.value(enc.fixed).shape(), &[4]);

        let m = embed_words(&mut tape, e, &[0, 0]).unwrap();
        assert_eq!(tape.value(m).row(0), tape.value(m).row(1));
        assert_eq!(tape.value(m).row(0), store.get(emb).row(0));
        assert!(matches!(embed_words(&mut tape, e, &[3]), Err(TensorError::IndexOutOfRange { .. })));
    }

    #[test]
    fn forward_states_are_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let emb = store.add("emb", Tensor::uniform(&[8, 4], 0.5, &mut rng));
        let a = random_dir(&mut store, "a", 4, 2, &mut rng);
        let b = random_dir(&mut store, "b", 4, 2, &mut rng);
        let mut tape = Tape::new();
        let e = tape.param(&store, emb);
        let (pa, pb) = (bind(&mut tape, &store, a, 2), bind(&mut tape, &store, b, 2));
        let x = bilstm_encode(&mut tape, e, &pa, &pb, &[1, 2, 3, 4]).unwrap();
        let y = bilstm_encode(&mut tape, e, &pa, &pb, &[1, 2, 7, 4]).unwrap();
        // positions before the change keep their forward half; after it, their backward half
        for j in 0..2 {
            assert_eq!(tape.value(x.states[j]).data()[..2], tape.value(y.states[j]).data()[..2]);
        }
        assert_eq!(tape.value(x.states[3]).data()[2..], tape.value(y.states[3]).data()[2..]);
        assert_ne!(tape.value(x.states[2]).data()[..2], tape.value(y.states[2]).data()[..2]);
    }
}
