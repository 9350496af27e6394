//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Forward operations are recorded on a [`Tape`] as they execute; calling
//! [`Tape::backward`] replays the record in reverse and accumulates a
//! gradient for every registered parameter. The tape is rebuilt per batch
//! (define-by-run), so variable-length sequences need no padding at this
//! level. Node values are accumulated in f64 while a tape is live; stored
//! tensors (parameters, datasets, checkpoints) are f32.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
pub type NodeId = usize;

// ── Tensor ───────────────────────────────────────────────────────────

/// A dense row-major f32 array with shape metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                op: "tensor::new",
                detail: format!("shape {:?} does not hold {} values", shape, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor::new" });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] })
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::BadDimension(shape.to_vec()));
    }
    Ok(())
}

/// Initialization schemes for fresh tensors.
#[derive(Debug, Clone, Copy)]
pub enum InitScheme {
    Zeros,
    Constant(f32),
    Uniform { lo: f32, hi: f32, seed: u64 },
    Glorot { seed: u64 },
}

/// Allocate and fill a tensor. Glorot draws from
/// uniform(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))) with
/// fan_out = first dim, fan_in = last dim.
pub fn tensor_init(shape: &[usize], scheme: InitScheme) -> Result<Tensor> {
    check_shape(shape)?;
    let n: usize = shape.iter().product();
    let data = match scheme {
        InitScheme::Zeros => vec![0.0; n],
        InitScheme::Constant(c) => vec![c; n],
        InitScheme::Uniform { lo, hi, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            uniform_fill(n, lo, hi, &mut rng)
        }
        InitScheme::Glorot { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            glorot_fill(shape, &mut rng)
        }
    };
    Tensor::new(shape.to_vec(), data)
}

/// Uniform fill using a caller-owned RNG stream.
pub fn uniform_fill<R: Rng>(n: usize, lo: f32, hi: f32, rng: &mut R) -> Vec<f32> {
    (0..n).map(|_| rng.random::<f32>() * (hi - lo) + lo).collect()
}

/// Glorot-uniform fill using a caller-owned RNG stream.
pub fn glorot_fill<R: Rng>(shape: &[usize], rng: &mut R) -> Vec<f32> {
    let fan_out = shape[0] as f32;
    let fan_in = *shape.last().expect("nonempty shape") as f32;
    let bound = (6.0 / (fan_in + fan_out)).sqrt();
    uniform_fill(shape.iter().product(), -bound, bound, rng)
}

// ── Gradient map ─────────────────────────────────────────────────────

/// Gradients keyed by parameter name. Every parameter registered on the
/// tape appears exactly once; parameters the loss never touches map to
/// exact zeros.
#[derive(Debug, Clone)]
pub struct GradientMap(BTreeMap<String, Tensor>);

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

// ── Primitive dispatch ───────────────────────────────────────────────

/// Operation kinds exposed through [`Tape::apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveKind {
    Matmul,
    Add,
    Mul,
    Concat,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Softmax,
    Sum,
    WeightedSum,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Matmul { a: NodeId, b: NodeId },
    MatVec { m: NodeId, v: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddScalar { a: NodeId },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    Relu { a: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    Softmax { a: NodeId },
    Sum { a: NodeId },
    WeightedSum { w: NodeId, m: NodeId },
    Concat { parts: Vec<NodeId> },
    StackRows { rows: Vec<NodeId> },
    Row { a: NodeId, index: usize },
    Embed { table: NodeId, ids: Vec<u32> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
}

// ── Tape ─────────────────────────────────────────────────────────────

/// Record of one forward computation, in topological order.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
    param_names: BTreeMap<String, NodeId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: Vec::new(), param_names: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Materialize a node's value as an f32 tensor.
    pub fn value(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id];
        Tensor { shape: n.shape.clone(), data: n.value.iter().map(|&v| v as f32).collect() }
    }

    /// Raw f64 view of a node's value.
    pub fn value_f64(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    /// Record a constant. Constants receive no gradient.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push_unchecked(Op::Leaf, t.shape.clone(), t.data.iter().map(|&v| v as f64).collect())
    }

    /// Convenience: record a constant 1-D vector.
    pub fn leaf_vec(&mut self, data: &[f32]) -> NodeId {
        self.push_unchecked(Op::Leaf, vec![data.len()], data.iter().map(|&v| v as f64).collect())
    }

    /// Register a named trainable parameter. Data is snapshotted.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<NodeId> {
        if self.param_names.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = self.push_unchecked(
            Op::Param,
            t.shape.clone(),
            t.data.iter().map(|&v| v as f64).collect(),
        );
        self.params.push((name.to_string(), id));
        self.param_names.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.param_names.get(name).copied()
    }

    fn push_unchecked(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape, value });
        id
    }

    fn push(&mut self, opname: &'static str, op: Op, shape: Vec<usize>, value: Vec<f64>) -> Result<NodeId> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: opname });
        }
        Ok(self.push_unchecked(op, shape, value))
    }

    // ── Forward ops ──────────────────────────────────────────────

    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape { op: "matmul", detail: format!("{:?} x {:?}", sa, sb) });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = va[i * k + p];
                let brow = &vb[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        self.push("matmul", Op::Matmul { a, b }, vec![m, n], out)
    }

    /// [r,c] x [c] -> [r]
    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (sm, sv) = (self.shape(m).to_vec(), self.shape(v).to_vec());
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::Shape { op: "matvec", detail: format!("{:?} x {:?}", sm, sv) });
        }
        let (r, c) = (sm[0], sm[1]);
        let (vm, vv) = (&self.nodes[m].value, &self.nodes[v].value);
        let out: Vec<f64> = (0..r)
            .map(|i| vm[i * c..(i + 1) * c].iter().zip(vv).map(|(x, y)| x * y).sum())
            .collect();
        self.push("matvec", Op::MatVec { m, v }, vec![r], out)
    }

    /// Elementwise addition; also supports the bias broadcast [m,n] + [n].
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let out: Vec<f64> =
                self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(x, y)| x + y).collect();
            return self.push("add", Op::Add { a, b }, sa, out);
        }
        if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            let n = sb[0];
            let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
            let out: Vec<f64> = va.iter().enumerate().map(|(i, x)| x + vb[i % n]).collect();
            return self.push("add", Op::Add { a, b }, sa, out);
        }
        Err(Error::Shape { op: "add", detail: format!("{:?} + {:?}", sa, sb) })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Shape { op: "sub", detail: format!("{:?} - {:?}", sa, sb) });
        }
        let out: Vec<f64> =
            self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(x, y)| x - y).collect();
        self.push("sub", Op::Sub { a, b }, sa, out)
    }

    /// Elementwise (Hadamard) product of same-shape operands.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Shape { op: "mul", detail: format!("{:?} * {:?}", sa, sb) });
        }
        let out: Vec<f64> =
            self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(x, y)| x * y).collect();
        self.push("mul", Op::Mul { a, b }, sa, out)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.nodes[a].value.iter().map(|x| x * c).collect();
        self.push("scale", Op::Scale { a, c }, shape, out)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.nodes[a].value.iter().map(|x| x + c).collect();
        self.push("add_scalar", Op::AddScalar { a }, shape, out)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.nodes[a].value.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        self.push("sigmoid", Op::Sigmoid { a }, shape, out)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.nodes[a].value.iter().map(|x| x.tanh()).collect();
        self.push("tanh", Op::Tanh { a }, shape, out)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.nodes[a].value.iter().map(|x| x.max(0.0)).collect();
        self.push("relu", Op::Relu { a }, shape, out)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.nodes[a].value.iter().map(|x| x.exp()).collect();
        self.push("exp", Op::Exp { a }, shape, out)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.nodes[a].value.iter().map(|x| x.ln()).collect();
        self.push("log", Op::Log { a }, shape, out)
    }

    /// Softmax over a 1-D vector, stabilized by max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 1 {
            return Err(Error::Shape { op: "softmax", detail: format!("{:?}", shape) });
        }
        let v = &self.nodes[a].value;
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / z).collect();
        self.push("softmax", Op::Softmax { a }, shape, out)
    }

    /// Sum of all elements -> scalar [1].
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let out = vec![self.nodes[a].value.iter().sum()];
        self.push("sum", Op::Sum { a }, vec![1], out)
    }

    /// weights [n] x matrix [n,d] -> [d]: sum_t w_t * row_t.
    pub fn weighted_sum(&mut self, w: NodeId, m: NodeId) -> Result<NodeId> {
        let (sw, sm) = (self.shape(w).to_vec(), self.shape(m).to_vec());
        if sw.len() != 1 || sm.len() != 2 || sw[0] != sm[0] {
            return Err(Error::Shape { op: "weighted_sum", detail: format!("{:?} . {:?}", sw, sm) });
        }
        let (n, d) = (sm[0], sm[1]);
        let (vw, vm) = (&self.nodes[w].value, &self.nodes[m].value);
        let mut out = vec![0.0; d];
        for t in 0..n {
            let wt = vw[t];
            let row = &vm[t * d..(t + 1) * d];
            for j in 0..d {
                out[j] += wt * row[j];
            }
        }
        self.push("weighted_sum", Op::WeightedSum { w, m }, vec![d], out)
    }

    /// Concatenate 1-D vectors along axis 0.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape { op: "concat", detail: "no operands".into() });
        }
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("operand shape {:?}", self.shape(p)),
                });
            }
            out.extend_from_slice(&self.nodes[p].value);
        }
        let len = out.len();
        self.push("concat", Op::Concat { parts: parts.to_vec() }, vec![len], out)
    }

    /// Stack n vectors of equal length d into a [n,d] matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::Shape { op: "stack_rows", detail: "no rows".into() });
        }
        let d = self.shape(rows[0]).to_vec();
        if d.len() != 1 {
            return Err(Error::Shape { op: "stack_rows", detail: format!("row shape {:?}", d) });
        }
        let d = d[0];
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if self.shape(r) != [d] {
                return Err(Error::Shape {
                    op: "stack_rows",
                    detail: format!("row shape {:?} != [{}]", self.shape(r), d),
                });
            }
            out.extend_from_slice(&self.nodes[r].value);
        }
        self.push("stack_rows", Op::StackRows { rows: rows.to_vec() }, vec![rows.len(), d], out)
    }

    /// Extract row `index` of a [n,d] matrix as a [d] vector.
    pub fn row(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || index >= s[0] {
            return Err(Error::Shape { op: "row", detail: format!("row {} of {:?}", index, s) });
        }
        let d = s[1];
        let out = self.nodes[a].value[index * d..(index + 1) * d].to_vec();
        self.push("row", Op::Row { a, index }, vec![d], out)
    }

    /// Embedding lookup: table [v,d] with ids -> [n,d]. Id 0 is the
    /// padding id and yields a zero row that never receives gradient.
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() {
            return Err(Error::Shape { op: "embed", detail: format!("table {:?}", s) });
        }
        let (v, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::Shape {
                    op: "embed",
                    detail: format!("token id {} out of range (vocab {})", id, v),
                });
            }
            if id == 0 {
                out.extend(std::iter::repeat_n(0.0, d));
            } else {
                out.extend_from_slice(&self.nodes[table].value[id * d..(id + 1) * d]);
            }
        }
        self.push("embed", Op::Embed { table, ids: ids.to_vec() }, vec![ids.len(), d], out)
    }

    /// Dispatcher over the primitive set, mainly for composition tests.
    pub fn apply(&mut self, kind: PrimitiveKind, operands: &[NodeId]) -> Result<NodeId> {
        let need = |n: usize| -> Result<()> {
            if operands.len() != n {
                Err(Error::Shape {
                    op: "apply",
                    detail: format!("{:?} wants {} operands, got {}", kind, n, operands.len()),
                })
            } else {
                Ok(())
            }
        };
        match kind {
            PrimitiveKind::Matmul => {
                need(2)?;
                self.matmul(operands[0], operands[1])
            }
            PrimitiveKind::Add => {
                need(2)?;
                self.add(operands[0], operands[1])
            }
            PrimitiveKind::Mul => {
                need(2)?;
                self.mul(operands[0], operands[1])
            }
            PrimitiveKind::Concat => self.concat(operands),
            PrimitiveKind::Sigmoid => {
                need(1)?;
                self.sigmoid(operands[0])
            }
            PrimitiveKind::Tanh => {
                need(1)?;
                self.tanh(operands[0])
            }
            PrimitiveKind::Relu => {
                need(1)?;
                self.relu(operands[0])
            }
            PrimitiveKind::Exp => {
                need(1)?;
                self.exp(operands[0])
            }
            PrimitiveKind::Softmax => {
                need(1)?;
                self.softmax(operands[0])
            }
            PrimitiveKind::Sum => {
                need(1)?;
                self.sum(operands[0])
            }
            PrimitiveKind::WeightedSum => {
                need(2)?;
                self.weighted_sum(operands[0], operands[1])
            }
        }
    }

    // ── Backward ─────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Pure with respect to the tape:
    /// calling it twice yields identical maps.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        let grads = self.backward_raw(loss)?;
        let mut map = BTreeMap::new();
        for (name, id) in &self.params {
            let node = &self.nodes[*id];
            let data: Vec<f32> = match &grads[*id] {
                Some(g) => g.iter().map(|&v| v as f32).collect(),
                None => vec![0.0; node.value.len()],
            };
            map.insert(name.clone(), Tensor { shape: node.shape.clone(), data });
        }
        Ok(GradientMap(map))
    }

    /// Backward with full f64 gradients, used by the finite-difference
    /// checker.
    pub fn backward_f64(&self, loss: NodeId) -> Result<BTreeMap<String, Vec<f64>>> {
        let grads = self.backward_raw(loss)?;
        let mut map = BTreeMap::new();
        for (name, id) in &self.params {
            let g = match &grads[*id] {
                Some(g) => g.clone(),
                None => vec![0.0; self.nodes[*id].value.len()],
            };
            map.insert(name.clone(), g);
        }
        Ok(map)
    }

    fn backward_raw(&self, loss: NodeId) -> Result<Vec<Option<Vec<f64>>>> {
        if loss >= self.nodes.len() {
            return Err(Error::BadLoss(format!("node {} not on tape", loss)));
        }
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::BadLoss(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        for g in grads.iter().flatten() {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(grads)
    }

    fn propagate(&self, id: NodeId, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) -> Result<()> {
        let accum = |grads: &mut Vec<Option<Vec<f64>>>, target: NodeId, add: &dyn Fn(&mut [f64])| {
            let slot = grads[target]
                .get_or_insert_with(|| vec![0.0; self.nodes[target].value.len()]);
            add(slot);
        };
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Matmul { a, b } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let k = self.nodes[*a].shape[1];
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                // dA = G . B^T
                accum(grads, *a, &|da: &mut [f64]| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * vb[p * n + j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                });
                // dB = A^T . G
                accum(grads, *b, &|db: &mut [f64]| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += va[i * k + p] * g[i * n + j];
                            }
                            db[p * n + j] += s;
                        }
                    }
                });
            }
            Op::MatVec { m, v } => {
                let r = node.shape[0];
                let c = self.nodes[*v].shape[0];
                let (vm, vv) = (&self.nodes[*m].value, &self.nodes[*v].value);
                accum(grads, *m, &|dm: &mut [f64]| {
                    for i in 0..r {
                        let gi = g[i];
                        for j in 0..c {
                            dm[i * c + j] += gi * vv[j];
                        }
                    }
                });
                accum(grads, *v, &|dv: &mut [f64]| {
                    for i in 0..r {
                        let gi = g[i];
                        let row = &vm[i * c..(i + 1) * c];
                        for j in 0..c {
                            dv[j] += gi * row[j];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                accum(grads, *a, &|da: &mut [f64]| {
                    for (x, y) in da.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                let nb = self.nodes[*b].value.len();
                if nb == g.len() {
                    accum(grads, *b, &|db: &mut [f64]| {
                        for (x, y) in db.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                } else {
                    // bias broadcast: fold rows
                    accum(grads, *b, &|db: &mut [f64]| {
                        for (i, y) in g.iter().enumerate() {
                            db[i % nb] += y;
                        }
                    });
                }
            }
            Op::Sub { a, b } => {
                accum(grads, *a, &|da: &mut [f64]| {
                    for (x, y) in da.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                accum(grads, *b, &|db: &mut [f64]| {
                    for (x, y) in db.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                accum(grads, *a, &|da: &mut [f64]| {
                    for i in 0..g.len() {
                        da[i] += g[i] * vb[i];
                    }
                });
                accum(grads, *b, &|db: &mut [f64]| {
                    for i in 0..g.len() {
                        db[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                accum(grads, *a, &|da: &mut [f64]| {
                    for i in 0..g.len() {
                        da[i] += g[i] * c;
                    }
                });
            }
            Op::AddScalar { a } => {
                accum(grads, *a, &|da: &mut [f64]| {
                    for (x, y) in da.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Sigmoid { a } => {
                let out = &node.value;
                accum(grads, *a, &|da: &mut [f64]| {
                    for i in 0..g.len() {
                        da[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            Op::Tanh { a } => {
                let out = &node.value;
                accum(grads, *a, &|da: &mut [f64]| {
                    for i in 0..g.len() {
                        da[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                });
            }
            Op::Relu { a } => {
                let inp = &self.nodes[*a].value;
                accum(grads, *a, &|da: &mut [f64]| {
                    for i in 0..g.len() {
                        if inp[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp { a } => {
                let out = &node.value;
                accum(grads, *a, &|da: &mut [f64]| {
                    for i in 0..g.len() {
                        da[i] += g[i] * out[i];
                    }
                });
            }
            Op::Log { a } => {
                let inp = &self.nodes[*a].value;
                accum(grads, *a, &|da: &mut [f64]| {
                    for i in 0..g.len() {
                        da[i] += g[i] / inp[i];
                    }
                });
            }
            Op::Softmax { a } => {
                let out = &node.value;
                let dot: f64 = g.iter().zip(out).map(|(x, y)| x * y).sum();
                accum(grads, *a, &|da: &mut [f64]| {
                    for i in 0..g.len() {
                        da[i] += out[i] * (g[i] - dot);
                    }
                });
            }
            Op::Sum { a } => {
                let g0 = g[0];
                accum(grads, *a, &|da: &mut [f64]| {
                    for x in da.iter_mut() {
                        *x += g0;
                    }
                });
            }
            Op::WeightedSum { w, m } => {
                let n = self.nodes[*w].value.len();
                let d = node.value.len();
                let (vw, vm) = (&self.nodes[*w].value, &self.nodes[*m].value);
                accum(grads, *w, &|dw: &mut [f64]| {
                    for t in 0..n {
                        let row = &vm[t * d..(t + 1) * d];
                        dw[t] += g.iter().zip(row).map(|(x, y)| x * y).sum::<f64>();
                    }
                });
                accum(grads, *m, &|dm: &mut [f64]| {
                    for t in 0..n {
                        let wt = vw[t];
                        for j in 0..d {
                            dm[t * d + j] += wt * g[j];
                        }
                    }
                });
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    let seg = &g[off..off + len];
                    accum(grads, p, &|dp: &mut [f64]| {
                        for (x, y) in dp.iter_mut().zip(seg) {
                            *x += y;
                        }
                    });
                    off += len;
                }
            }
            Op::StackRows { rows } => {
                let d = node.shape[1];
                for (t, &r) in rows.iter().enumerate() {
                    let seg = &g[t * d..(t + 1) * d];
                    accum(grads, r, &|dr: &mut [f64]| {
                        for (x, y) in dr.iter_mut().zip(seg) {
                            *x += y;
                        }
                    });
                }
            }
            Op::Row { a, index } => {
                let d = node.value.len();
                let off = index * d;
                accum(grads, *a, &|da: &mut [f64]| {
                    for j in 0..d {
                        da[off + j] += g[j];
                    }
                });
            }
            Op::Embed { table, ids } => {
                let d = node.shape[1];
                accum(grads, *table, &|dt: &mut [f64]| {
                    for (t, &id) in ids.iter().enumerate() {
                        if id == 0 {
                            continue;
                        }
                        let off = id as usize * d;
                        for j in 0..d {
                            dt[off + j] += g[t * d + j];
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

// ── Finite-difference oracle ─────────────────────────────────────────

/// Compare reverse-mode gradients against central finite differences.
///
/// `build` must deterministically construct a scalar loss on a fresh
/// tape, registering every entry of `params` via [`Tape::param`].
/// Returns the max over parameter entries of
/// |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
pub fn finite_difference_check<F>(
    params: &BTreeMap<String, Tensor>,
    epsilon: f64,
    build: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &BTreeMap<String, Tensor>) -> Result<NodeId>,
{
    if epsilon <= 0.0 {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let analytic = tape.backward_f64(loss)?;

    let eval = |params: &BTreeMap<String, Tensor>| -> Result<f64> {
        let mut t = Tape::new();
        let loss = build(&mut t, params)?;
        let v = t.value_f64(loss);
        if v.len() != 1 {
            return Err(Error::BadLoss("fn must produce a scalar".into()));
        }
        if !v[0].is_finite() {
            return Err(Error::NonFinite { op: "finite_difference_check" });
        }
        Ok(v[0])
    };

    let mut max_err: f64 = 0.0;
    for (name, tensor) in params {
        let g = analytic
            .get(name)
            .cloned()
            .unwrap_or_else(|| vec![0.0; tensor.len()]);
        for (i, (&base, &g_ad)) in tensor.data().iter().zip(&g).enumerate() {
            let plus = base + epsilon as f32;
            let minus = base - epsilon as f32;

            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[i] = plus;
            let f_plus = eval(&p)?;
            p.get_mut(name).unwrap().data_mut()[i] = minus;
            let f_minus = eval(&p)?;

            // use the achieved f32 step, not the nominal epsilon
            let delta = plus as f64 - minus as f64;
            let g_fd = (f_plus - f_minus) / delta;
            let err = (g_ad - g_fd).abs() / (g_ad.abs() + g_fd.abs()).max(1e-8);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn init_zeros_and_constant() {
        let z = tensor_init(&[2, 2], InitScheme::Zeros).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0, 0.0, 0.0]);
        let c = tensor_init(&[3], InitScheme::Constant(1.5)).unwrap();
        assert_eq!(c.data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn init_rejects_zero_dim() {
        assert!(tensor_init(&[0, 3], InitScheme::Zeros).is_err());
        assert!(tensor_init(&[], InitScheme::Zeros).is_err());
    }

    #[test]
    fn glorot_bounds_and_mean() {
        let g = tensor_init(&[100, 100], InitScheme::Glorot { seed: 7 }).unwrap();
        let bound = (6.0f32 / 200.0).sqrt();
        assert!((bound - 0.17320508).abs() < 1e-6);
        assert!(g.data().iter().all(|v| v.abs() <= bound));
        let mean: f32 = g.data().iter().sum::<f32>() / g.len() as f32;
        assert!(mean.abs() < 0.01, "glorot sample mean {}", mean);
    }

    #[test]
    fn softmax_symmetric() {
        let mut tape = Tape::new();
        let x = tape.leaf_vec(&[0.0, 0.0, 0.0]);
        let s = tape.softmax(x).unwrap();
        let v = tape.value(s);
        for &p in v.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(&t(&[2, 2], &[0.0; 4]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn tanh_gradient_analytic() {
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::scalar(0.5)).unwrap();
        let y = tape.tanh(x).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        let expect = 1.0 - 0.5f64.tanh().powi(2); // 0.786448...
        assert!((g.get("x").unwrap().data()[0] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param("w", &t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let loss = tape.sum(w).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let w = tape.param("w", &Tensor::scalar(3.0)).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn unused_param_gets_exact_zero() {
        let mut tape = Tape::new();
        let w = tape.param("w", &t(&[2], &[1.0, 2.0])).unwrap();
        let _unused = tape.param("dead", &t(&[3], &[5.0, 5.0, 5.0])).unwrap();
        let loss = tape.sum(w).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("dead").unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param("w", &t(&[2], &[1.0, 2.0])).unwrap();
        assert!(tape.backward(w).is_err());
        assert!(tape.backward(99).is_err());
    }

    #[test]
    fn backward_is_idempotent() {
        let mut tape = Tape::new();
        let w = tape.param("w", &t(&[2], &[0.3, -0.7])).unwrap();
        let s = tape.sigmoid(w).unwrap();
        let loss = tape.sum(s).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.get("w").unwrap(), g2.get("w").unwrap());
    }

    #[test]
    fn duplicate_param_rejected() {
        let mut tape = Tape::new();
        tape.param("w", &Tensor::scalar(1.0)).unwrap();
        assert!(tape.param("w", &Tensor::scalar(2.0)).is_err());
    }

    /// Seeded composition of sigmoid/matmul/softmax over 5 parameters,
    /// checked against central finite differences.
    #[test]
    fn composite_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = BTreeMap::new();
        params.insert("p0".into(), t(&[2, 3], &uniform_fill(6, -0.8, 0.8, &mut rng)));
        params.insert("p1".into(), t(&[3, 2], &uniform_fill(6, -0.8, 0.8, &mut rng)));
        params.insert("p2".into(), t(&[2, 2], &uniform_fill(4, -0.8, 0.8, &mut rng)));
        params.insert("p3".into(), t(&[2, 2], &uniform_fill(4, -0.8, 0.8, &mut rng)));
        params.insert("p4".into(), t(&[4], &uniform_fill(4, -0.8, 0.8, &mut rng)));

        let build = |tape: &mut Tape, ps: &BTreeMap<String, Tensor>| -> Result<NodeId> {
            let p0 = tape.param("p0", &ps["p0"])?;
            let p1 = tape.param("p1", &ps["p1"])?;
            let p2 = tape.param("p2", &ps["p2"])?;
            let p3 = tape.param("p3", &ps["p3"])?;
            let p4 = tape.param("p4", &ps["p4"])?;
            let s0 = tape.sigmoid(p0)?;
            let mm = tape.matmul(s0, p1)?; // [2,2]
            let gate = tape.mul(p2, p3)?;
            let pre = tape.add(mm, gate)?;
            let act = tape.tanh(pre)?;
            let r0 = tape.row(act, 0)?;
            let r1 = tape.row(act, 1)?;
            let flat = tape.concat(&[r0, r1])?; // [4]
            let sm = tape.softmax(flat)?;
            let s4 = tape.sigmoid(p4)?;
            let mixed = tape.mul(sm, s4)?;
            tape.sum(mixed)
        };
        let err = finite_difference_check(&params, 1e-3, build).unwrap();
        assert!(err < 1e-4, "fd mismatch: {}", err);
    }

    #[test]
    fn fd_check_identity_and_constant() {
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), Tensor::scalar(0.7));
        let err = finite_difference_check(&params, 1e-3, |tape, ps| {
            let x = tape.param("x", &ps["x"])?;
            tape.sum(x)
        })
        .unwrap();
        assert!(err < 1e-6, "identity fd err {}", err);

        let err = finite_difference_check(&params, 1e-3, |tape, ps| {
            let _x = tape.param("x", &ps["x"])?;
            let c = tape.leaf(&Tensor::scalar(2.0));
            tape.sum(c)
        })
        .unwrap();
        assert!(err == 0.0, "constant fd err {}", err);
    }

    #[test]
    fn embed_pad_row_is_zero_and_gets_no_gradient() {
        let mut tape = Tape::new();
        let table = tape
            .param("emb", &t(&[3, 2], &[9.0, 9.0, 1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        let e = tape.embed(table, &[0, 2, 1]).unwrap();
        assert_eq!(tape.value(e).data(), &[0.0, 0.0, 3.0, 4.0, 1.0, 2.0]);
        let s = tape.sum(e).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("emb").unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn embed_out_of_range_id() {
        let mut tape = Tape::new();
        let table = tape.leaf(&t(&[2, 2], &[0.0; 4]));
        assert!(tape.embed(table, &[5]).is_err());
    }

    #[test]
    fn apply_dispatches_every_primitive() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]));
        let v = tape.leaf_vec(&[0.5, -0.5]);
        let mm = tape.apply(PrimitiveKind::Matmul, &[a, b]).unwrap();
        assert_eq!(tape.value(mm).data(), &[3.0, 3.0, 7.0, 7.0]);
        let s = tape.apply(PrimitiveKind::Add, &[a, b]).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 3.0, 4.0, 5.0]);
        let m = tape.apply(PrimitiveKind::Mul, &[a, b]).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 2.0, 3.0, 4.0]);
        let c = tape.apply(PrimitiveKind::Concat, &[v, v]).unwrap();
        assert_eq!(tape.shape(c), &[4]);
        for kind in [PrimitiveKind::Sigmoid, PrimitiveKind::Tanh, PrimitiveKind::Relu, PrimitiveKind::Exp] {
            assert!(tape.apply(kind, &[v]).is_ok());
        }
        let sm = tape.apply(PrimitiveKind::Softmax, &[v]).unwrap();
        let total: f32 = tape.value(sm).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        let su = tape.apply(PrimitiveKind::Sum, &[a]).unwrap();
        assert_eq!(tape.value(su).data(), &[10.0]);
        let w = tape.leaf_vec(&[0.25, 0.75]);
        let ws = tape.apply(PrimitiveKind::WeightedSum, &[w, a]).unwrap();
        assert_eq!(tape.value(ws).data(), &[2.5, 3.5]);
        // arity errors
        assert!(tape.apply(PrimitiveKind::Matmul, &[a]).is_err());
        assert!(tape.apply(PrimitiveKind::Sigmoid, &[a, b]).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf_vec(&[1000.0]); // exp(1000) overflows to inf
        assert!(tape.exp(x).is_err());
        let z = tape.leaf_vec(&[0.0]);
        assert!(tape.log(z).is_err());
    }

    #[test]
    fn forward_backward_bit_identical_across_runs() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let w = t(&[3, 3], &uniform_fill(9, -1.0, 1.0, &mut rng));
            let x = t(&[3], &uniform_fill(3, -1.0, 1.0, &mut rng));
            let mut tape = Tape::new();
            let wid = tape.param("w", &w).unwrap();
            let xid = tape.leaf(&x);
            let h = tape.matvec(wid, xid).unwrap();
            let a = tape.tanh(h).unwrap();
            let sm = tape.softmax(a).unwrap();
            let l = tape.sum(sm).unwrap();
            let g = tape.backward(l).unwrap();
            (
                tape.value(sm).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                g.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    proptest::proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in proptest::collection::vec(-50.0f32..50.0, 1..12)) {
            let mut tape = Tape::new();
            let x = tape.leaf_vec(&logits);
            let s = tape.softmax(x).unwrap();
            let v = tape.value(s);
            let sum: f32 = v.data().iter().sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-6);
            proptest::prop_assert!(v.data().iter().all(|&p| p >= 0.0));
        }
    }
}
