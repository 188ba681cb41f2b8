//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value. Stochastic nodes
//! (dropout) record the seed that generated their mask, so a node can always be
//! replayed bit-for-bit. A checkpoint segment is a single node that keeps only
//! its boundary inputs and a recompute closure; its interior is rebuilt on a
//! child tape during the backward pass.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::half::round_half_slice;
use super::kernels;
use super::{ParamId, ParamKey, ParamStore, PrecisionMode, Tensor};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recompute closure for a checkpoint segment.
pub type SegmentFn<'a> = Rc<dyn Fn(&mut Tape<'a>, &[Var]) -> Result<Var> + 'a>;

struct Segment<'a> {
    inputs: Vec<Var>,
    body: SegmentFn<'a>,
    seed_start: u64,
}

enum Op<'a> {
    Leaf { param: Option<ParamKey> },
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Embedding { table: Var, ids: Rc<[usize]> },
    Gather { x: Var, index: Rc<[usize]> },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, affine: Option<(Var, Var)>, eps: f64 },
    Gelu(Var),
    Relu(Var),
    Ln(Var),
    ClampMin(Var, f64),
    RowNormalize(Var),
    Dropout { x: Var, rate: f64, seed: u64 },
    Sum(Var),
    StopGrad(Var),
    CrossEntropy { logits: Var, targets: Rc<[Option<usize>]> },
    BceWithLogits { logits: Var, targets: Rc<[f64]> },
    Checkpoint(Segment<'a>),
}

impl Op<'_> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf { .. } => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => {
                vec![*a, *b]
            }
            Scale(x, _) | Softmax(x) | LogSoftmax(x) | Gelu(x) | Relu(x) | Ln(x) | ClampMin(x, _)
            | RowNormalize(x) | Sum(x) | StopGrad(x) => vec![*x],
            SliceCols { x, .. } | SliceRows { x, .. } | Gather { x, .. } | Dropout { x, .. } => {
                vec![*x]
            }
            ConcatCols(parts) => parts.clone(),
            Embedding { table, .. } => vec![*table],
            LayerNorm { x, affine, .. } => match affine {
                Some((g, b)) => vec![*x, *g, *b],
                None => vec![*x],
            },
            CrossEntropy { logits, .. } | BceWithLogits { logits, .. } => vec![*logits],
            Checkpoint(seg) => seg.inputs.clone(),
        }
    }

    fn kind(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf { param: Some(_) } => "param",
            Leaf { param: None } => "leaf",
            MatMul(..) => "matmul",
            MatMulNt(..) => "matmul_nt",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            AddRow(..) => "add_row",
            Scale(..) => "scale",
            SliceCols { .. } => "slice_cols",
            SliceRows { .. } => "slice_rows",
            ConcatCols(..) => "concat_cols",
            Embedding { .. } => "embedding",
            Gather { .. } => "gather",
            Softmax(..) => "softmax_rows",
            LogSoftmax(..) => "log_softmax_rows",
            LayerNorm { .. } => "layer_norm",
            Gelu(..) => "gelu",
            Relu(..) => "relu",
            Ln(..) => "ln",
            ClampMin(..) => "clamp_min",
            RowNormalize(..) => "row_normalize",
            Dropout { .. } => "dropout",
            Sum(..) => "sum",
            StopGrad(..) => "stop_grad",
            CrossEntropy { .. } => "cross_entropy",
            BceWithLogits { .. } => "bce_with_logits",
            Checkpoint(..) => "checkpoint",
        }
    }
}

struct Node<'a> {
    op: Op<'a>,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    half: bool,
}

/// Read-only view of one tape node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeInfo {
    pub kind: &'static str,
    pub inputs: Vec<Var>,
    pub shape: Vec<usize>,
    pub seed: Option<u64>,
    pub checkpoint: bool,
}

/// Element counts of forward values retained for the backward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ActivationBytes {
    pub full_elements: usize,
    pub half_elements: usize,
}

impl ActivationBytes {
    /// Bytes under 32-bit accounting: 4 per full-precision element, 2 per binary16 element.
    pub fn accounted(&self) -> usize {
        4 * self.full_elements + 2 * self.half_elements
    }

    /// Bytes actually held by this implementation: 8 per `f64`, 2 per binary16.
    pub fn in_memory(&self) -> usize {
        8 * self.full_elements + 2 * self.half_elements
    }

    fn plus(self, other: ActivationBytes) -> ActivationBytes {
        ActivationBytes {
            full_elements: self.full_elements + other.full_elements,
            half_elements: self.half_elements + other.half_elements,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemoryStats {
    /// Activations retained after the forward pass.
    pub stored: ActivationBytes,
    /// Stored activations plus the largest segment interior alive at once.
    pub peak: ActivationBytes,
}

/// Result of a backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: BTreeMap<ParamKey, Vec<f64>>,
    vars: HashMap<usize, Vec<f64>>,
    pub memory: MemoryStats,
}

impl Gradients {
    pub fn param(&self, key: ParamKey) -> Option<&[f64]> {
        self.params.get(&key).map(Vec::as_slice)
    }

    pub fn var(&self, v: Var) -> Option<&[f64]> {
        self.vars.get(&v.0).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamKey, &Vec<f64>)> {
        self.params.iter()
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Vec<f64>> {
        self.params.get_mut(&key)
    }

    pub fn insert_param(&mut self, key: ParamKey, grad: Vec<f64>) {
        self.params.insert(key, grad);
    }

    /// Keeps only parameters of `group`.
    pub fn retain_group(&mut self, group: u32) {
        self.params.retain(|k, _| k.group == group);
    }

    /// `self += weight · other`, parameter-wise.
    pub fn add_scaled(&mut self, other: &Gradients, weight: f64) {
        for (key, g) in &other.params {
            let slot = self
                .params
                .entry(*key)
                .or_insert_with(|| vec![0.0; g.len()]);
            for (s, v) in slot.iter_mut().zip(g) {
                *s += weight * v;
            }
        }
    }

    /// Bit patterns of every parameter gradient in key order.
    pub fn param_bits(&self) -> Vec<(ParamKey, Vec<u64>)> {
        self.params
            .iter()
            .map(|(k, g)| (*k, g.iter().map(|v| v.to_bits()).collect()))
            .collect()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a stream position.
pub fn mix_seed(base: u64, position: u64) -> u64 {
    splitmix64(base ^ splitmix64(position))
}

fn dropout_mask(seed: u64, rate: f64, len: usize) -> impl Iterator<Item = bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(move |_| rng.random::<f64>() >= rate)
}

fn add_all_from(src: &[f64]) -> impl FnMut(&mut [f64]) + '_ {
    move |dst: &mut [f64]| {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let numel: usize = shape.iter().product();
    (numel / cols.max(1), cols)
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    precision: PrecisionMode,
    exec: Exec,
    seed_base: u64,
    seed_cursor: u64,
    params: HashMap<ParamKey, Var>,
    segment_peak: ActivationBytes,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            precision: PrecisionMode::Full64,
            exec: Exec::default(),
            seed_base: 0,
            seed_cursor: 0,
            params: HashMap::new(),
            segment_peak: ActivationBytes::default(),
        }
    }

    pub fn with_precision(mut self, precision: PrecisionMode) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed_base = seed;
        self.seed_cursor = 0;
        self
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    fn child(&self, seed_cursor: u64) -> Tape<'a> {
        Tape {
            nodes: Vec::new(),
            precision: self.precision,
            exec: self.exec,
            seed_base: self.seed_base,
            seed_cursor,
            params: HashMap::new(),
            segment_peak: ActivationBytes::default(),
        }
    }

    pub fn precision(&self) -> PrecisionMode {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Next seed in this tape's deterministic stream.
    pub fn next_seed(&mut self) -> u64 {
        let s = mix_seed(self.seed_base, self.seed_cursor);
        self.seed_cursor += 1;
        s
    }

    pub fn seed_cursor(&self) -> u64 {
        self.seed_cursor
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are valid")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn node_info(&self, v: Var) -> NodeInfo {
        let n = &self.nodes[v.0];
        NodeInfo {
            kind: n.op.kind(),
            inputs: n.op.inputs(),
            shape: n.shape.clone(),
            seed: match n.op {
                Op::Dropout { seed, .. } => Some(seed),
                _ => None,
            },
            checkpoint: matches!(n.op, Op::Checkpoint(_)),
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape {
                op,
                left: other.to_vec(),
                right: vec![],
            }),
        }
    }

    fn push(&mut self, op: Op<'a>, shape: Vec<usize>, value: Vec<f64>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = match &op {
            Op::Leaf { .. } | Op::StopGrad(_) => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
            half: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, param: Option<ParamKey>, shape: Vec<usize>, value: Vec<f64>, rg: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf { param },
            shape,
            value,
            requires_grad: rg,
            half: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a tensor as a leaf; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_leaf(None, t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        self.push_leaf(None, shape.to_vec(), data, false)
    }

    /// Inserts (once per tape) parameter `id` of `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = store.key(id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let t = store.get(id);
        let v = self.push_leaf(Some(key), t.shape().to_vec(), t.data().to_vec(), true);
        self.params.insert(key, v);
        v
    }

    // ---- forward operations -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let out = kernels::matmul(self.exec, self.value(a), self.value(b), m, k, n);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], out))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let out = kernels::matmul_nt(self.exec, self.value(a), self.value(b), m, k, n);
        Ok(self.push(Op::MatMulNt(a, b), vec![m, n], out))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<'a>, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.value(bias).len() != cols {
            return Err(Error::Shape {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::AddRow(x, bias), shape, value))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale(x, c), shape, value)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::contract(format!(
                "slice_cols {start}..{} out of range for {cols} columns",
                start + len
            )));
        }
        let value = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(Op::SliceCols { x, start }, vec![rows, len], value))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(Error::contract(format!(
                "slice_rows {start}..{} out of range for {rows} rows",
                start + len
            )));
        }
        let value = self.value(x)[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(Op::SliceRows { x, start }, vec![len, cols], value))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: vec![r, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![rows, total], value))
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup of an empty sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::contract(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let t = self.value(table);
        let value = ids
            .iter()
            .flat_map(|&i| t[i * d..(i + 1) * d].iter().copied())
            .collect();
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.into(),
            },
            vec![ids.len(), d],
            value,
        ))
    }

    /// Flat gather: output element `t` is `x.flat[index[t]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        let src = self.value(x);
        if numel != index.len() || index.iter().any(|&i| i >= src.len()) {
            return Err(Error::contract("gather index does not fit source or output shape"));
        }
        let value = index.iter().map(|&i| src[i]).collect();
        Ok(self.push(Op::Gather { x, index }, shape.to_vec(), value))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(x));
        let value = kernels::softmax_rows(self.value(x), cols);
        let shape = self.shape(x).to_vec();
        self.push(Op::Softmax(x), shape, value)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(x));
        let value = kernels::log_softmax_rows(self.value(x), cols);
        let shape = self.shape(x).to_vec();
        self.push(Op::LogSoftmax(x), shape, value)
    }

    /// Normalizes the last dimension; `affine` is an optional `(gain, bias)` pair.
    pub fn layer_norm(&mut self, x: Var, affine: Option<(Var, Var)>, eps: f64) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if let Some((g, b)) = affine {
            if self.value(g).len() != cols || self.value(b).len() != cols {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(g).to_vec(),
                });
            }
        }
        let moments = kernels::row_moments(self.value(x), cols, eps);
        let xv = self.value(x);
        let mut value = Vec::with_capacity(xv.len());
        for (row, &(mean, rstd)) in xv.chunks(cols).zip(&moments) {
            for (c, v) in row.iter().enumerate() {
                let norm = (v - mean) * rstd;
                value.push(match affine {
                    Some((g, b)) => norm * self.value(g)[c] + self.value(b)[c],
                    None => norm,
                });
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::LayerNorm { x, affine, eps }, shape, value))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Gelu(x), shape, value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Relu(x), shape, value)
    }

    /// Elementwise natural log; every input must be positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).iter().find(|&&v| v.is_nan() || v <= 0.0) {
            return Err(Error::contract(format!("ln of non-positive value {bad}")));
        }
        let value = self.value(x).iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Ln(x), shape, value))
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        let value = self.value(x).iter().map(|&v| v.max(lo)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::ClampMin(x, lo), shape, value)
    }

    /// Divides each row by its sum.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(x));
        let value = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| {
                let s: f64 = row.iter().sum();
                row.iter().map(move |v| v / s)
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::RowNormalize(x), shape, value)
    }

    /// Inverted dropout with a mask drawn from the next seed of the stream.
    /// A zero rate is the identity and records nothing.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let seed = self.next_seed();
        let keep_scale = 1.0 / (1.0 - rate);
        let value = self
            .value(x)
            .iter()
            .zip(dropout_mask(seed, rate, self.value(x).len()))
            .map(|(v, keep)| if keep { v * keep_scale } else { 0.0 })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Dropout { x, rate, seed }, shape, value))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(Op::Sum(x), vec![1], vec![s])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Identity in the forward pass; blocks all gradient flow.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.value(x).to_vec();
        let shape = self.shape(x).to_vec();
        self.push(Op::StopGrad(x), shape, value)
    }

    /// Sum over labelled rows of `-log softmax(logits)[target]`; unlabelled rows are skipped.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: vec![rows, cols],
                right: vec![targets.len()],
            });
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for (row, t) in lv.chunks(cols).zip(targets) {
            if let Some(t) = *t {
                if t >= cols {
                    return Err(Error::contract(format!("target {t} out of range for {cols} classes")));
                }
                total += kernels::log_sum_exp(row) - row[t];
            }
        }
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.into(),
            },
            vec![1],
            vec![total],
        ))
    }

    /// Sum of binary cross-entropy terms for per-row logits `[n×1]` against 0/1 targets.
    pub fn bce_with_logits_sum(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        let total = lv
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        Ok(self.push(
            Op::BceWithLogits {
                logits,
                targets: targets.into(),
            },
            vec![1],
            vec![total],
        ))
    }

    /// Runs `body` on a child tape and records only its output. The interior
    /// is discarded and rebuilt from `inputs` during backward, replaying the
    /// same seed positions.
    pub fn checkpoint(&mut self, inputs: &[Var], body: SegmentFn<'a>) -> Result<Var> {
        let seed_start = self.seed_cursor;
        let mut sub = self.child(seed_start);
        let leaves: Vec<Var> = inputs
            .iter()
            .map(|&v| {
                let n = &self.nodes[v.0];
                sub.push_leaf(None, n.shape.clone(), n.value.clone(), n.requires_grad)
            })
            .collect();
        let out = body(&mut sub, &leaves)?;
        self.seed_cursor = sub.seed_cursor;
        self.note_segment(sub.stored_activations().plus(sub.segment_peak));
        let uses_params = !sub.params.is_empty();
        let value = sub.value(out).to_vec();
        let shape = sub.shape(out).to_vec();
        let v = self.push(
            Op::Checkpoint(Segment {
                inputs: inputs.to_vec(),
                body,
                seed_start,
            }),
            shape,
            value,
        );
        if uses_params {
            self.nodes[v.0].requires_grad = true;
        }
        Ok(v)
    }

    fn note_segment(&mut self, bytes: ActivationBytes) {
        if bytes.accounted() > self.segment_peak.accounted() {
            self.segment_peak = bytes;
        }
    }

    /// Forward values that stay alive for the backward pass (non-leaf nodes).
    pub fn stored_activations(&self) -> ActivationBytes {
        let elements: usize = self
            .nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf { .. }))
            .map(|n| n.value.len())
            .sum();
        match self.precision {
            PrecisionMode::Full64 => ActivationBytes {
                full_elements: elements,
                half_elements: 0,
            },
            PrecisionMode::Half16Activations => ActivationBytes {
                full_elements: 0,
                half_elements: elements,
            },
        }
    }

    pub fn memory_stats(&self) -> MemoryStats {
        let stored = self.stored_activations();
        MemoryStats {
            stored,
            peak: stored.plus(self.segment_peak),
        }
    }

    /// Converts saved activations to binary16 storage (no-op at full precision).
    fn seal(&mut self, root: Var) {
        if self.precision != PrecisionMode::Half16Activations {
            return;
        }
        for (i, n) in self.nodes.iter_mut().enumerate() {
            if i == root.0 || n.half || matches!(n.op, Op::Leaf { .. }) {
                continue;
            }
            round_half_slice(&mut n.value);
            n.half = true;
        }
    }

    // ---- backward -----------------------------------------------------------

    /// Gradients of the scalar `root` with respect to every differentiable leaf.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_from(root, vec![1.0])
    }

    /// Backward pass seeded with an explicit upstream gradient for `root`.
    pub fn backward_from(&mut self, root: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.value(root).len() {
            return Err(Error::Shape {
                op: "backward",
                left: self.shape(root).to_vec(),
                right: vec![seed.len()],
            });
        }
        self.seal(root);
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad && !matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            self.backward_node(i, g, &mut grads, &mut out)?;
        }
        out.memory = self.memory_stats();
        Ok(out)
    }

    fn backward_node(
        &mut self,
        i: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) -> Result<()> {
        let exec = self.exec;
        let nodes = &self.nodes;
        let node = &nodes[i];

        // Adds a contribution into the gradient slot of `v`, creating it as zeros first.
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf { param } => {
                if !node.requires_grad {
                    return Ok(());
                }
                match param {
                    Some(key) => {
                        let slot = out.params.entry(*key).or_insert_with(|| vec![0.0; g.len()]);
                        for (s, v) in slot.iter_mut().zip(&g) {
                            *s += v;
                        }
                    }
                    None => {
                        out.vars.insert(i, g);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if nodes[a.0].requires_grad {
                    let da = kernels::matmul_nt(exec, &g, &nodes[b.0].value, m, n, k);
                    acc(grads, *a, &mut add_all_from(&da));
                }
                if nodes[b.0].requires_grad {
                    let db = kernels::matmul_tn(exec, &nodes[a.0].value, &g, m, k, n);
                    acc(grads, *b, &mut add_all_from(&db));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[0];
                if nodes[a.0].requires_grad {
                    let da = kernels::matmul(exec, &g, &nodes[b.0].value, m, n, k);
                    acc(grads, *a, &mut add_all_from(&da));
                }
                if nodes[b.0].requires_grad {
                    let db = kernels::matmul_tn(exec, &g, &nodes[a.0].value, m, n, k);
                    acc(grads, *b, &mut add_all_from(&db));
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, &mut add_all_from(&g));
                acc(grads, *b, &mut add_all_from(&g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut add_all_from(&g));
                acc(grads, *b, &mut |dst: &mut [f64]| {
                    for (d, s) in dst.iter_mut().zip(&g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(grads, *a, &mut |dst: &mut [f64]| {
                    for ((d, s), y) in dst.iter_mut().zip(&g).zip(bv) {
                        *d += s * y;
                    }
                });
                acc(grads, *b, &mut |dst: &mut [f64]| {
                    for ((d, s), x) in dst.iter_mut().zip(&g).zip(av) {
                        *d += s * x;
                    }
                });
            }
            Op::AddRow(x, b) => {
                acc(grads, *x, &mut add_all_from(&g));
                let cols = nodes[b.0].value.len();
                acc(grads, *b, &mut |dst: &mut [f64]| {
                    for row in g.chunks(cols) {
                        for (d, s) in dst.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(grads, *x, &mut |dst: &mut [f64]| {
                    for (d, s) in dst.iter_mut().zip(&g) {
                        *d += c * s;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let cols = nodes[x.0].shape[1];
                let len = node.shape[1];
                acc(grads, *x, &mut |dst: &mut [f64]| {
                    for (drow, grow) in dst.chunks_mut(cols).zip(g.chunks(len)) {
                        for (d, s) in drow[*start..*start + len].iter_mut().zip(grow) {
                            *d += s;
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let cols = nodes[x.0].shape[1];
                acc(grads, *x, &mut |dst: &mut [f64]| {
                    let region = &mut dst[start * cols..start * cols + g.len()];
                    for (d, s) in region.iter_mut().zip(&g) {
                        *d += s;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].shape[1];
                    acc(grads, *p, &mut |dst: &mut [f64]| {
                        for (drow, grow) in dst.chunks_mut(w).zip(g.chunks(total)) {
                            for (d, s) in drow.iter_mut().zip(&grow[offset..offset + w]) {
                                *d += s;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].shape[1];
                acc(grads, *table, &mut |dst: &mut [f64]| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (dv, s) in dst[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *dv += s;
                        }
                    }
                });
            }
            Op::Gather { x, index } => {
                acc(grads, *x, &mut |dst: &mut [f64]| {
                    for (&src, s) in index.iter().zip(&g) {
                        dst[src] += s;
                    }
                });
            }
            Op::Softmax(x) => {
                let cols = *node.shape.last().unwrap();
                let y = &node.value;
                acc(grads, *x, &mut |dst: &mut [f64]| {
                    for ((drow, grow), yrow) in dst.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, s), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (s - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let cols = *node.shape.last().unwrap();
                let y = &node.value;
                acc(grads, *x, &mut |dst: &mut [f64]| {
                    for ((drow, grow), yrow) in dst.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let total: f64 = grow.iter().sum();
                        for ((d, s), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += s - yv.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm { x, affine, eps } => {
                let cols = *node.shape.last().unwrap();
                let xv = &nodes[x.0].value;
                let moments = kernels::row_moments(xv, cols, *eps);
                let gain = affine.map(|(gv, _)| nodes[gv.0].value.as_slice());
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let mut norm = vec![0.0; cols];
                let mut dnorm = vec![0.0; cols];
                for (r, &(mean, rstd)) in moments.iter().enumerate() {
                    let xrow = &xv[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        norm[c] = (xrow[c] - mean) * rstd;
                        dnorm[c] = grow[c] * gain.map_or(1.0, |gn| gn[c]);
                        dgain[c] += grow[c] * norm[c];
                        dbias[c] += grow[c];
                    }
                    let mean_dn = dnorm.iter().sum::<f64>() / cols as f64;
                    let mean_dn_n = dnorm.iter().zip(&norm).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] = rstd * (dnorm[c] - mean_dn - norm[c] * mean_dn_n);
                    }
                }
                acc(grads, *x, &mut add_all_from(&dx));
                if let Some((gv, bv)) = affine {
                    acc(grads, *gv, &mut add_all_from(&dgain));
                    acc(grads, *bv, &mut add_all_from(&dbias));
                }
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                acc(grads, *x, &mut |dst: &mut [f64]| {
                    for ((d, s), v) in dst.iter_mut().zip(&g).zip(xv) {
                        *d += s * kernels::gelu_grad(*v);
                    }
                });
            }
            Op::Ln(x) => {
                let xv = &nodes[x.0].value;
                acc(grads, *x, &mut |dst: &mut [f64]| {
                    for ((d, s), v) in dst.iter_mut().zip(&g).zip(xv) {
                        *d += s / v;
                    }
                });
            }
            Op::Relu(x) | Op::ClampMin(x, _) => {
                let lo = match &node.op {
                    Op::ClampMin(_, lo) => *lo,
                    _ => 0.0,
                };
                let xv = &nodes[x.0].value;
                acc(grads, *x, &mut |dst: &mut [f64]| {
                    for ((d, s), v) in dst.iter_mut().zip(&g).zip(xv) {
                        if *v > lo {
                            *d += s;
                        }
                    }
                });
            }
            Op::RowNormalize(x) => {
                let cols = *node.shape.last().unwrap();
                let xv = &nodes[x.0].value;
                let y = &node.value;
                acc(grads, *x, &mut |dst: &mut [f64]| {
                    for (r, drow) in dst.chunks_mut(cols).enumerate() {
                        let s: f64 = xv[r * cols..(r + 1) * cols].iter().sum();
                        let grow = &g[r * cols..(r + 1) * cols];
                        let yrow = &y[r * cols..(r + 1) * cols];
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += (gv - dot) / s;
                        }
                    }
                });
            }
            Op::Dropout { x, rate, seed } => {
                let keep_scale = 1.0 / (1.0 - rate);
                let mask: Vec<bool> = dropout_mask(*seed, *rate, g.len()).collect();
                acc(grads, *x, &mut |dst: &mut [f64]| {
                    for ((d, s), keep) in dst.iter_mut().zip(&g).zip(&mask) {
                        if *keep {
                            *d += s * keep_scale;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                acc(grads, *x, &mut |dst: &mut [f64]| dst.iter_mut().for_each(|d| *d += s));
            }
            Op::StopGrad(_) => {}
            Op::CrossEntropy { logits, targets } => {
                let cols = nodes[logits.0].shape[1];
                let lv = &nodes[logits.0].value;
                let s = g[0];
                acc(grads, *logits, &mut |dst: &mut [f64]| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &lv[r * cols..(r + 1) * cols];
                        let p = kernels::softmax_rows(row, cols);
                        for c in 0..cols {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            dst[r * cols + c] += s * (p[c] - onehot);
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = &nodes[logits.0].value;
                let s = g[0];
                acc(grads, *logits, &mut |dst: &mut [f64]| {
                    for ((d, z), y) in dst.iter_mut().zip(lv).zip(targets.iter()) {
                        *d += s * (kernels::sigmoid(*z) - y);
                    }
                });
            }
            Op::Checkpoint(seg) => {
                let body = Rc::clone(&seg.body);
                let inputs = seg.inputs.clone();
                let mut sub = self.child(seg.seed_start);
                let leaves: Vec<Var> = inputs
                    .iter()
                    .map(|&v| {
                        let n = &self.nodes[v.0];
                        sub.push_leaf(None, n.shape.clone(), n.value.clone(), n.requires_grad)
                    })
                    .collect();
                let sub_out = body(&mut sub, &leaves)?;
                let sub_grads = sub.backward_from(sub_out, g)?;
                self.note_segment(sub_grads.memory.peak);
                let nodes = &self.nodes;
                for (&outer, leaf) in inputs.iter().zip(&leaves) {
                    if let Some(gv) = sub_grads.var(*leaf) {
                        if nodes[outer.0].requires_grad {
                            let slot = grads[outer.0].get_or_insert_with(|| vec![0.0; gv.len()]);
                            for (d, s) in slot.iter_mut().zip(gv) {
                                *d += s;
                            }
                        }
                    }
                }
                for (key, pg) in sub_grads.params {
                    let slot = out.params.entry(key).or_insert_with(|| vec![0.0; pg.len()]);
                    for (d, s) in slot.iter_mut().zip(&pg) {
                        *d += s;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_grad()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(&t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);

        let x = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let y = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let z = tape.matmul(x, y).unwrap();
        assert_eq!(tape.value(z), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn sum_and_dot_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.var(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[2.0, 3.0]));
        let xx = tape.mul(x, x).unwrap();
        let loss = tape.sum(xx);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.var(x).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[2.0, 3.0]));
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_handles_extreme_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[0.0, 0.0, 0.0, 1000.0, 0.0, -1000.0]));
        let y = tape.softmax_rows(x);
        let v = tape.value(y);
        for p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(v[3], 1.0);
        assert_eq!(v[4], 0.0);
        assert!(v.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn layer_norm_definition_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, None, 0.0).unwrap();
        assert_eq!(tape.value(y), &[-1.0, 1.0]);

        let c = tape.leaf(&t(&[1, 4], &[2.5; 4]));
        let y = tape.layer_norm(c, None, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.0; 4]);
        let y0 = tape.layer_norm(c, None, 0.0).unwrap();
        assert_eq!(tape.value(y0), &[0.0; 4]);
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let s = tape.stop_grad(x);
        let y = tape.add(s, x).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.var(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn dropout_records_seed_and_replays() {
        let build = |seed: u64| {
            let mut tape = Tape::new().with_seed(seed);
            let x = tape.leaf(&t(&[4, 8], &[1.0; 32]));
            let y = tape.dropout(x, 0.5).unwrap();
            (tape.node_info(y).seed, tape.value(y).to_vec())
        };
        let (s1, v1) = build(9);
        let (s2, v2) = build(9);
        assert!(s1.is_some());
        assert_eq!(s1, s2);
        assert_eq!(v1, v2);
        assert!(v1.contains(&0.0) && v1.contains(&2.0));
    }

    #[test]
    fn checkpoint_matches_direct_bitwise() {
        let mut store = ParamStore::new(0);
        let w = store.add("w", Tensor::from_rows(&[&[0.3, -0.7], &[1.1, 0.2]]).unwrap());
        let run = |ckpt: bool| {
            let mut tape = Tape::new().with_seed(5);
            let x = tape.leaf(&t(&[3, 2], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]));
            let store = &store;
            let body: SegmentFn = Rc::new(move |tp: &mut Tape, ins: &[Var]| {
                let wv = tp.param(store, w);
                let h = tp.matmul(ins[0], wv)?;
                let h = tp.gelu(h);
                let h = tp.dropout(h, 0.3)?;
                tp.matmul(h, wv)
            });
            let h = if ckpt {
                tape.checkpoint(&[x], body).unwrap()
            } else {
                body(&mut tape, &[x]).unwrap()
            };
            let l = tape.sum(h);
            let stored = tape.stored_activations();
            let g = tape.backward(l).unwrap();
            (g.param_bits(), g.var(x).unwrap().to_vec(), stored)
        };
        let (pa, xa, sa) = run(false);
        let (pb, xb, sb) = run(true);
        assert_eq!(pa, pb);
        assert_eq!(
            xa.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            xb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(sb.accounted() < sa.accounted());
    }

    #[test]
    fn half_storage_quarters_memory_and_halves_accounting() {
        let build = |p: PrecisionMode| {
            let mut tape = Tape::new().with_precision(p);
            let x = tape.leaf(&t(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
            let y = tape.gelu(x);
            let l = tape.sum(y);
            let g = tape.backward(l).unwrap();
            g.memory.stored
        };
        let full = build(PrecisionMode::Full64);
        let half = build(PrecisionMode::Half16Activations);
        assert_eq!(2 * half.accounted(), full.accounted());
        assert_eq!(4 * half.in_memory(), full.in_memory());
    }

    #[test]
    fn every_op_matches_finite_differences() {
        use super::super::{finite_diff_check, GradCheckOptions};
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new(0);
        let a = store.add("a", Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng));
        let b = store.add("b", Tensor::uniform(&[4, 3], -2.0, 2.0, &mut rng));
        let c = store.add("c", Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng));
        let gain = store.add("gain", Tensor::uniform(&[4], 0.5, 1.5, &mut rng));
        let bias = store.add("bias", Tensor::uniform(&[4], -0.5, 0.5, &mut rng));
        let emb = store.add("emb", Tensor::uniform(&[5, 4], -2.0, 2.0, &mut rng));
        let f = |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
            let (a, b, c) = (tape.param(s, a), tape.param(s, b), tape.param(s, c));
            let (gain, bias, emb) = (tape.param(s, gain), tape.param(s, bias), tape.param(s, emb));
            let ab = tape.matmul(a, b)?;
            let nt = tape.matmul_nt(a, c)?;
            let sum = tape.add(ab, nt)?;
            let diff = tape.sub(a, c)?;
            let prod = tape.mul(diff, c)?;
            let row = tape.add_row(prod, bias)?;
            let ln = tape.layer_norm(row, Some((gain, bias)), 1e-5)?;
            let g = tape.gelu(ln);
            let d = tape.dropout(g, 0.25)?;
            let left = tape.slice_cols(d, 1, 2)?;
            let top = tape.slice_rows(sum, 0, 3)?;
            let cat = tape.concat_cols(&[left, top])?;
            let sm = tape.softmax_rows(cat);
            let ls = tape.log_softmax_rows(cat);
            let e = tape.embedding(emb, &[4, 0, 4])?;
            let idx: Rc<[usize]> = vec![0, 5, 7, 11, 2, 2].into();
            let gathered = tape.gather(e, idx, &[2, 3])?;
            let r = tape.relu(gathered);
            let shifted = tape.scale(r, 0.5);
            let rs = tape.slice_rows(sm, 0, 2)?;
            let rs = tape.slice_cols(rs, 0, 3)?;
            let mixed = tape.add(rs, shifted)?;
            let cl = tape.clamp_min(mixed, 0.05);
            let rn = tape.row_normalize(cl);
            let ce = tape.cross_entropy_sum(ls, &[Some(1), None, Some(4)])?;
            let logit = tape.slice_cols(ab, 0, 1)?;
            let bce = tape.bce_with_logits_sum(logit, &[1.0, 0.0, 1.0])?;
            let logs = tape.ln(rn)?;
            let prod = tape.mul(rn, logs)?;
            let t1 = tape.sum(prod);
            let t2 = tape.add(ce, bce)?;
            let total = tape.add(t1, t2)?;
            Ok(tape.mean(total))
        };
        let opts = GradCheckOptions {
            seed: 11,
            ..GradCheckOptions::default()
        };
        let report = finite_diff_check(&store, f, &opts).unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
