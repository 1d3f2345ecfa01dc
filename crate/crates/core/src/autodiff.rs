//! Tape-based reverse-mode differentiation over the small primitive set the
//! model needs, plus the parameter store and the plain SGD update.
//!
//! A [`Tape`] records every primitive in execution order. Parameters enter the
//! tape as leaves tagged with their [`ParamId`]; [`Tape::backward`] walks the
//! record in reverse and returns one gradient per registered parameter.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::TensorError;
use crate::tensor::{softmax_slice, Scalar, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { entries: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries.iter().enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Gradients keyed by parameter. Every parameter registered on the tape that
/// produced the set is present; untouched ones carry explicit zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T = f32> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Default for GradientSet<T> {
    fn default() -> Self {
        GradientSet { grads: BTreeMap::new() }
    }
}

impl<T: Scalar> GradientSet<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<T>) {
        self.grads.insert(id, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise `self += other`, adding entries missing from `self`.
    pub fn accumulate(&mut self, other: &GradientSet<T>) -> Result<(), TensorError> {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(mine) => {
                    if mine.shape() != g.shape() {
                        return Err(TensorError::ShapeMismatch {
                            op: "accumulate",
                            shapes: vec![mine.shape().to_vec(), g.shape().to_vec()],
                        });
                    }
                    for (a, &b) in mine.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + b;
                    }
                }
                None => {
                    self.grads.insert(*id, g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter().map(|x| x.as_f64().abs()))
            .fold(0.0, f64::max)
    }
}

/// `param -= learning_rate * grad` for every gradient in the set.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &GradientSet<T>,
    learning_rate: f64,
) -> Result<(), TensorError> {
    for (id, g) in grads.iter() {
        if id.0 >= params.len() || params.get(id).shape() != g.shape() {
            let name = if id.0 < params.len() { params.name(id).to_string() } else { format!("#{}", id.0) };
            return Err(TensorError::GradientShape(name));
        }
    }
    let lr = T::lit(learning_rate);
    for (id, g) in grads.iter() {
        for (p, &d) in params.get_mut(id).data_mut().iter_mut().zip(g.data()) {
            *p = *p - lr * d;
        }
    }
    Ok(())
}

/// The primitive operations the tape can record.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[r,c] x [c] -> [r]`
    MatVec,
    /// `[r,c]ᵀ x [r] -> [c]`
    MatTVec,
    Add,
    Sub,
    Mul,
    /// Vector plus a broadcast `[1]` scalar.
    AddScalar,
    Scale(f64),
    Concat,
    /// Stacks equal-length vectors into the rows of a matrix.
    Stack,
    Slice { start: usize, len: usize },
    Tanh,
    Sigmoid,
    Exp,
    Sum,
    Mean,
    Dot,
    /// `max(x, 0)` elementwise.
    Relu,
    Softmax,
    /// One row of a matrix.
    Row(usize),
    /// Average of the listed rows of a matrix.
    MeanRows(Vec<usize>),
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::MatVec => "matvec",
            Primitive::MatTVec => "mattvec",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::AddScalar => "add_scalar",
            Primitive::Scale(_) => "scale",
            Primitive::Concat => "concat",
            Primitive::Stack => "stack",
            Primitive::Slice { .. } => "slice",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Exp => "exp",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Dot => "dot",
            Primitive::Relu => "relu",
            Primitive::Softmax => "softmax",
            Primitive::Row(_) => "row",
            Primitive::MeanRows(_) => "mean_rows",
        }
    }

    /// Forward evaluation; shared by recording and replay.
    pub fn eval<T: Scalar>(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
        let op = self.name();
        let mismatch = || TensorError::ShapeMismatch {
            op,
            shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
        };
        let arity = |n: usize| {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(TensorError::Arity { op, expected: n, got: inputs.len() })
            }
        };
        let map = |t: &Tensor<T>, f: &dyn Fn(T) -> T| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
                .expect("elementwise map preserves shape")
        };
        match self {
            Primitive::MatVec => {
                arity(2)?;
                let (m, v) = (inputs[0], inputs[1]);
                if m.rank() != 2 || v.rank() != 1 || m.shape()[1] != v.len() {
                    return Err(mismatch());
                }
                let out = (0..m.rows()).map(|i| dot_slice(m.row(i), v.data())).collect();
                Ok(Tensor::vector(out))
            }
            Primitive::MatTVec => {
                arity(2)?;
                let (m, v) = (inputs[0], inputs[1]);
                if m.rank() != 2 || v.rank() != 1 || m.shape()[0] != v.len() {
                    return Err(mismatch());
                }
                let mut out = vec![T::zero(); m.shape()[1]];
                for (i, &vi) in v.data().iter().enumerate() {
                    for (o, &mij) in out.iter_mut().zip(m.row(i)) {
                        *o = *o + mij * vi;
                    }
                }
                Ok(Tensor::vector(out))
            }
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                if a.shape() != b.shape() {
                    return Err(mismatch());
                }
                let f = |x: T, y: T| match self {
                    Primitive::Add => x + y,
                    Primitive::Sub => x - y,
                    _ => x * y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape().to_vec(), data)
            }
            Primitive::AddScalar => {
                arity(2)?;
                if inputs[1].len() != 1 {
                    return Err(mismatch());
                }
                let s = inputs[1].item();
                Ok(map(inputs[0], &|x| x + s))
            }
            Primitive::Scale(c) => {
                arity(1)?;
                let c = T::lit(*c);
                Ok(map(inputs[0], &|x| x * c))
            }
            Primitive::Concat => {
                if inputs.is_empty() {
                    return Err(TensorError::Empty { op });
                }
                if inputs.iter().any(|t| t.rank() != 1) {
                    return Err(mismatch());
                }
                Ok(Tensor::vector(inputs.iter().flat_map(|t| t.data().iter().copied()).collect()))
            }
            Primitive::Stack => {
                if inputs.is_empty() {
                    return Err(TensorError::Empty { op });
                }
                let width = inputs[0].len();
                if inputs.iter().any(|t| t.rank() != 1 || t.len() != width) {
                    return Err(mismatch());
                }
                let data = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
                Tensor::new(vec![inputs.len(), width], data)
            }
            Primitive::Slice { start, len } => {
                arity(1)?;
                let v = inputs[0];
                if v.rank() != 1 || start + len > v.len() || *len == 0 {
                    return Err(mismatch());
                }
                Ok(Tensor::vector(v.data()[*start..start + len].to_vec()))
            }
            Primitive::Tanh => {
                arity(1)?;
                Ok(map(inputs[0], &|x| x.tanh()))
            }
            Primitive::Sigmoid => {
                arity(1)?;
                Ok(map(inputs[0], &sigmoid))
            }
            Primitive::Exp => {
                arity(1)?;
                Ok(map(inputs[0], &|x| x.exp()))
            }
            Primitive::Relu => {
                arity(1)?;
                Ok(map(inputs[0], &|x| x.max(T::zero())))
            }
            Primitive::Sum | Primitive::Mean => {
                arity(1)?;
                let t = inputs[0];
                if t.is_empty() {
                    return Err(TensorError::Empty { op });
                }
                let s = t.data().iter().copied().fold(T::zero(), |a, b| a + b);
                let s = if *self == Primitive::Mean { s / T::lit(t.len() as f64) } else { s };
                Ok(Tensor::scalar(s))
            }
            Primitive::Dot => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                if a.rank() != 1 || a.shape() != b.shape() {
                    return Err(mismatch());
                }
                Ok(Tensor::scalar(dot_slice(a.data(), b.data())))
            }
            Primitive::Softmax => {
                arity(1)?;
                if inputs[0].rank() != 1 {
                    return Err(mismatch());
                }
                Ok(Tensor::vector(softmax_slice(inputs[0].data())?))
            }
            Primitive::Row(i) => {
                arity(1)?;
                let m = inputs[0];
                if m.rank() != 2 {
                    return Err(mismatch());
                }
                if *i >= m.rows() {
                    return Err(TensorError::IndexOutOfRange { op, index: *i, len: m.rows() });
                }
                Ok(Tensor::vector(m.row(*i).to_vec()))
            }
            Primitive::MeanRows(rows) => {
                arity(1)?;
                let m = inputs[0];
                if m.rank() != 2 {
                    return Err(mismatch());
                }
                if rows.is_empty() {
                    return Err(TensorError::Empty { op });
                }
                let mut out = vec![T::zero(); m.cols()];
                for &r in rows {
                    if r >= m.rows() {
                        return Err(TensorError::IndexOutOfRange { op, index: r, len: m.rows() });
                    }
                    for (o, &x) in out.iter_mut().zip(m.row(r)) {
                        *o = *o + x;
                    }
                }
                let n = T::lit(rows.len() as f64);
                Ok(Tensor::vector(out.into_iter().map(|x| x / n).collect()))
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn dot_slice<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Option<(Primitive, Vec<usize>)>,
    param: Option<ParamId>,
}

/// Ordered record of primitive applications; nodes only reference earlier
/// nodes, so the record is always topologically sorted.
#[derive(Clone, Debug)]
pub struct Tape<T = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Option<(Primitive, Vec<usize>)>, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, op, param });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn index(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.idx)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None, None)
    }

    /// Registers a copy of a parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), None, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.index(v).expect("var from another tape")].value
    }

    /// Applies a primitive to recorded inputs and records the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var, TensorError> {
        let idx = inputs.iter().map(|&v| self.index(v)).collect::<Result<Vec<_>, _>>()?;
        let value = {
            let refs: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
            prim.eval(&refs)?
        };
        Ok(self.push(value, Some((prim, idx)), None))
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::MatVec, &[m, v])
    }
    pub fn mattvec(&mut self, m: Var, v: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::MatTVec, &[m, v])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn add_scalar(&mut self, v: Var, s: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::AddScalar, &[v, s])
    }
    pub fn scale(&mut self, v: Var, c: f64) -> Result<Var, TensorError> {
        self.apply(Primitive::Scale(c), &[v])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        self.apply(Primitive::Concat, parts)
    }
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var, TensorError> {
        self.apply(Primitive::Stack, rows)
    }
    pub fn slice(&mut self, v: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        self.apply(Primitive::Slice { start, len }, &[v])
    }
    pub fn tanh(&mut self, v: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Tanh, &[v])
    }
    pub fn sigmoid(&mut self, v: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Sigmoid, &[v])
    }
    pub fn exp(&mut self, v: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Exp, &[v])
    }
    pub fn sum(&mut self, v: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Sum, &[v])
    }
    pub fn mean(&mut self, v: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Mean, &[v])
    }
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Dot, &[a, b])
    }
    pub fn relu(&mut self, v: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Relu, &[v])
    }
    pub fn softmax(&mut self, v: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Softmax, &[v])
    }
    pub fn row(&mut self, m: Var, i: usize) -> Result<Var, TensorError> {
        self.apply(Primitive::Row(i), &[m])
    }
    pub fn mean_rows(&mut self, m: Var, rows: &[usize]) -> Result<Var, TensorError> {
        self.apply(Primitive::MeanRows(rows.to_vec()), &[m])
    }

    /// Re-evaluates every recorded operation from the stored leaves and
    /// reports whether all outputs match bit-for-bit.
    pub fn replay_matches(&self) -> Result<bool, TensorError> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                None => node.value.clone(),
                Some((prim, idx)) => {
                    let refs: Vec<&Tensor<T>> = idx.iter().map(|&i| &values[i]).collect();
                    prim.eval(&refs)?
                }
            };
            let same = v.shape() == node.value.shape()
                && v.data().iter().zip(node.value.data()).all(|(a, b)| a == b);
            if !same {
                return Ok(false);
            }
            values.push(v);
        }
        Ok(true)
    }

    /// Reverse sweep from a scalar `loss`. Returns a gradient for every
    /// parameter registered on this tape (zeros when the loss does not depend
    /// on it).
    pub fn backward(&self, loss: Var) -> Result<GradientSet<T>, TensorError> {
        let root = self.index(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[root].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root + 1];
        grads[root] = Some(vec![T::one()]);

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some((prim, inputs)) = &node.op {
                self.propagate(prim, inputs, &node.value, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let mut out = GradientSet::default();
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(id) = node.param else { continue };
            let g = match grads.get(i).and_then(|g| g.as_ref()) {
                Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone())?,
                None => Tensor::zeros(node.value.shape()),
            };
            let mut single = GradientSet::default();
            single.insert(id, g);
            out.accumulate(&single)?;
        }
        Ok(out)
    }

    fn propagate(&self, prim: &Primitive, inputs: &[usize], out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |k: usize| &self.nodes[inputs[k]].value;
        let mut acc = |k: usize, f: &mut dyn FnMut(&mut [T])| {
            let slot = &mut grads[inputs[k]];
            let buf = slot.get_or_insert_with(|| vec![T::zero(); self.nodes[inputs[k]].value.len()]);
            f(buf);
        };
        match prim {
            Primitive::MatVec => {
                let (m, v) = (val(0), val(1));
                let cols = m.shape()[1];
                acc(0, &mut |gm| {
                    for (i, &gi) in g.iter().enumerate() {
                        for (j, &vj) in v.data().iter().enumerate() {
                            gm[i * cols + j] = gm[i * cols + j] + gi * vj;
                        }
                    }
                });
                acc(1, &mut |gv| {
                    for (i, &gi) in g.iter().enumerate() {
                        for (gvj, &mij) in gv.iter_mut().zip(m.row(i)) {
                            *gvj = *gvj + mij * gi;
                        }
                    }
                });
            }
            Primitive::MatTVec => {
                let (m, v) = (val(0), val(1));
                let cols = m.shape()[1];
                acc(0, &mut |gm| {
                    for (i, &vi) in v.data().iter().enumerate() {
                        for (j, &gj) in g.iter().enumerate() {
                            gm[i * cols + j] = gm[i * cols + j] + vi * gj;
                        }
                    }
                });
                acc(1, &mut |gv| {
                    for (i, gvi) in gv.iter_mut().enumerate() {
                        *gvi = *gvi + dot_slice(m.row(i), g);
                    }
                });
            }
            Primitive::Add => {
                acc(0, &mut |ga| add_into(ga, g));
                acc(1, &mut |gb| add_into(gb, g));
            }
            Primitive::Sub => {
                acc(0, &mut |ga| add_into(ga, g));
                acc(1, &mut |gb| {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x = *x - y;
                    }
                });
            }
            Primitive::Mul => {
                let (a, b) = (val(0), val(1));
                acc(0, &mut |ga| {
                    for ((x, &gi), &bi) in ga.iter_mut().zip(g).zip(b.data()) {
                        *x = *x + gi * bi;
                    }
                });
                acc(1, &mut |gb| {
                    for ((x, &gi), &ai) in gb.iter_mut().zip(g).zip(a.data()) {
                        *x = *x + gi * ai;
                    }
                });
            }
            Primitive::AddScalar => {
                acc(0, &mut |gv| add_into(gv, g));
                let total = g.iter().copied().fold(T::zero(), |a, b| a + b);
                acc(1, &mut |gs| gs[0] = gs[0] + total);
            }
            Primitive::Scale(c) => {
                let c = T::lit(*c);
                acc(0, &mut |gv| {
                    for (x, &gi) in gv.iter_mut().zip(g) {
                        *x = *x + gi * c;
                    }
                });
            }
            Primitive::Concat | Primitive::Stack => {
                let mut offset = 0;
                for k in 0..inputs.len() {
                    let n = val(k).len();
                    let part = &g[offset..offset + n];
                    acc(k, &mut |gk| add_into(gk, part));
                    offset += n;
                }
            }
            Primitive::Slice { start, len } => {
                acc(0, &mut |gv| add_into(&mut gv[*start..start + len], g));
            }
            Primitive::Tanh => acc(0, &mut |gv| {
                for ((x, &gi), &y) in gv.iter_mut().zip(g).zip(out.data()) {
                    *x = *x + gi * (T::one() - y * y);
                }
            }),
            Primitive::Sigmoid => acc(0, &mut |gv| {
                for ((x, &gi), &y) in gv.iter_mut().zip(g).zip(out.data()) {
                    *x = *x + gi * y * (T::one() - y);
                }
            }),
            Primitive::Exp => acc(0, &mut |gv| {
                for ((x, &gi), &y) in gv.iter_mut().zip(g).zip(out.data()) {
                    *x = *x + gi * y;
                }
            }),
            Primitive::Relu => {
                let input = val(0);
                acc(0, &mut |gv| {
                    for ((x, &gi), &xi) in gv.iter_mut().zip(g).zip(input.data()) {
                        if xi > T::zero() {
                            *x = *x + gi;
                        }
                    }
                });
            }
            Primitive::Sum => acc(0, &mut |gv| {
                for x in gv.iter_mut() {
                    *x = *x + g[0];
                }
            }),
            Primitive::Mean => {
                let n = T::lit(val(0).len() as f64);
                acc(0, &mut |gv| {
                    for x in gv.iter_mut() {
                        *x = *x + g[0] / n;
                    }
                });
            }
            Primitive::Dot => {
                let (a, b) = (val(0), val(1));
                acc(0, &mut |ga| {
                    for (x, &bi) in ga.iter_mut().zip(b.data()) {
                        *x = *x + g[0] * bi;
                    }
                });
                acc(1, &mut |gb| {
                    for (x, &ai) in gb.iter_mut().zip(a.data()) {
                        *x = *x + g[0] * ai;
                    }
                });
            }
            Primitive::Softmax => {
                let y = out.data();
                let gy = dot_slice(g, y);
                acc(0, &mut |gv| {
                    for ((x, &gi), &yi) in gv.iter_mut().zip(g).zip(y) {
                        *x = *x + yi * (gi - gy);
                    }
                });
            }
            Primitive::Row(r) => {
                let cols = val(0).cols();
                acc(0, &mut |gm| add_into(&mut gm[r * cols..(r + 1) * cols], g));
            }
            Primitive::MeanRows(rows) => {
                let cols = val(0).cols();
                let n = T::lit(rows.len() as f64);
                acc(0, &mut |gm| {
                    for &r in rows {
                        for (x, &gi) in gm[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                            *x = *x + gi / n;
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (x, &y) in dst.iter_mut().zip(src) {
        *x = *x + y;
    }
}
