use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{axis_split, strides, ParamId, ParamStore, ResamplePlan, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sqrt(Var),
    /// Index gather: output `o` reads input `index[o]`. Expand and permute.
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        p: usize,
        n: usize,
        shared_rhs: bool,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    SumAxis {
        input: Var,
        axis: usize,
        scale: f64,
    },
    SumAll(Var, f64),
    Gelu(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Resample {
        input: Var,
        plan: Arc<ResamplePlan>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _) | Op::AddScalar(a) | Op::Sqrt(a) | Op::Reshape(a) | Op::Gelu(a) => {
                vec![*a]
            }
            Op::SumAll(a, _) => vec![*a],
            Op::Gather { input, .. }
            | Op::Slice { input, .. }
            | Op::SumAxis { input, .. }
            | Op::Softmax { input, .. }
            | Op::Dropout { input, .. }
            | Op::Resample { input, .. } => vec![*input],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LayerNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A reverse-mode differentiation graph built for one forward pass.
///
/// A graph is either in eval mode (dropout is the identity) or train mode,
/// where dropout masks are drawn from a seeded generator owned by the graph.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    rng: Option<ChaCha8Rng>,
    params: HashMap<ParamId, Var>,
    adjoint_fault: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::eval()
    }
}

impl Graph {
    pub fn eval() -> Self {
        Graph {
            nodes: Vec::new(),
            rng: None,
            params: HashMap::new(),
            adjoint_fault: false,
        }
    }

    pub fn train(seed: u64) -> Self {
        Graph {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::eval()
        }
    }

    /// Deliberately corrupts the GELU adjoint so verification harnesses can
    /// demonstrate that they catch a wrong gradient.
    #[doc(hidden)]
    pub fn with_adjoint_fault(mut self) -> Self {
        self.adjoint_fault = true;
        self
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a value that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Adds a leaf, keeping the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter into the graph. Binding the same parameter
    /// twice returns the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&var) = self.params.get(&id) {
            return var;
        }
        let t = store.get(id).tensor();
        let var = self.leaf(
            Tensor::new(t.shape().to_vec(), t.data().to_vec())
                .expect("stored parameter is well formed")
                .with_requires_grad(true),
        );
        self.params.insert(id, var);
        var
    }

    pub fn param_bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&id, &var)| (id, var))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].value.requires_grad);
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            value: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        (self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (shape, data) = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(shape, data, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (shape, data) = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(shape, data, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (shape, data) = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(shape, data, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let (shape, data) = self.zip_with(a, b, |x, y| x / y);
        Ok(self.push(shape, data, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * factor).collect();
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| x + c).collect();
        self.push(self.shape(a).to_vec(), data, Op::AddScalar(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|x| x.sqrt()).collect();
        self.push(self.shape(a).to_vec(), data, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("operand shapes are identical")
    }

    /// Broadcasts size-1 axes of `a` up to `shape`. Ranks must match.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        if src == shape {
            return Ok(a);
        }
        if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &t)| s != t && s != 1) {
            return Err(Error::shape("expand", &src, shape));
        }
        let src_strides = strides(&src);
        let mapped: Vec<usize> = src
            .iter()
            .zip(&src_strides)
            .map(|(&d, &s)| if d == 1 { 0 } else { s })
            .collect();
        let index = gather_index(shape, &mapped);
        Ok(self.gather(a, shape.to_vec(), index))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        let mut seen = vec![false; src.len()];
        let valid = axes.len() == src.len()
            && axes
                .iter()
                .all(|&ax| ax < src.len() && !std::mem::replace(&mut seen[ax], true));
        if !valid {
            return Err(Error::contract(format!(
                "permute: axes {axes:?} are not a permutation of rank {}",
                src.len()
            )));
        }
        if axes.iter().enumerate().all(|(i, &ax)| i == ax) {
            return Ok(a);
        }
        let src_strides = strides(&src);
        let out_shape: Vec<usize> = axes.iter().map(|&ax| src[ax]).collect();
        let mapped: Vec<usize> = axes.iter().map(|&ax| src_strides[ax]).collect();
        let index = gather_index(&out_shape, &mapped);
        Ok(self.gather(a, out_shape, index))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::contract("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    fn gather(&mut self, a: Var, shape: Vec<usize>, index: Vec<usize>) -> Var {
        let src = self.data(a);
        let data = index.iter().map(|&i| src[i]).collect();
        self.push(shape, data, Op::Gather { input: a, index })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        if self.shape(a) == shape {
            return Ok(a);
        }
        let data = self.data(a).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a)))
    }

    /// Batched matrix product over the last two axes.
    ///
    /// `b` either has the same leading axes as `a` or is a plain matrix
    /// shared across all of `a`'s leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, p) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (p2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_rhs = lead_b.is_empty();
        if p != p2 || !(shared_rhs || lead_a == lead_b) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = lead_a.iter().product();
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a_blk = &da[bi * m * p..(bi + 1) * m * p];
            let b_blk = if shared_rhs {
                db
            } else {
                &db[bi * p * n..(bi + 1) * p * n]
            };
            let o_blk = &mut out[bi * m * n..(bi + 1) * m * n];
            gemm_acc(a_blk, b_blk, o_blk, m, p, n);
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                p,
                n,
                shared_rhs,
            },
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::contract(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.push(
            shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = self.shape(a).to_vec();
        if axis >= src.len() || len == 0 || start + len > src[axis] {
            return Err(Error::contract(format!(
                "slice [{start}, {}) along axis {axis} out of bounds for {src:?}",
                start + len
            )));
        }
        if start == 0 && len == src[axis] {
            return Ok(a);
        }
        let (outer, full, inner) = axis_split(&src, axis);
        let d = self.data(a);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = src;
        shape[axis] = len;
        Ok(self.push(
            shape,
            data,
            Op::Slice {
                input: a,
                axis,
                start,
            },
        ))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, scale_by_len: bool) -> Result<Var> {
        let src = self.shape(a).to_vec();
        if axis >= src.len() {
            return Err(Error::contract(format!(
                "axis {axis} out of range for {src:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&src, axis);
        let scale = if scale_by_len { 1.0 / len as f64 } else { 1.0 };
        let d = self.data(a);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, x) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        data.iter_mut().for_each(|x| *x *= scale);
        let mut shape = src;
        shape[axis] = 1;
        Ok(self.push(
            shape,
            data,
            Op::SumAxis {
                input: a,
                axis,
                scale,
            },
        ))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Population variance along `axis`, keeping it with extent 1.
    pub fn var_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let mean = self.mean_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        let mean = self.expand(mean, &shape)?;
        let centered = self.sub(a, mean)?;
        let sq = self.square(centered);
        self.mean_axis(sq, axis)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(vec![1], vec![s], Op::SumAll(a, 1.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.data(a).iter().sum();
        self.push(vec![1], vec![s / n], Op::SumAll(a, 1.0 / n))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| gelu(x)).collect();
        self.push(self.shape(a).to_vec(), data, Op::Gelu(a))
    }

    /// Softmax along `axis`, stabilised by subtracting the running maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let src = self.shape(a).to_vec();
        if axis >= src.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for {src:?}"
            )));
        }
        if !self.value(a).is_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let data = softmax_along(self.data(a), &src, axis);
        Ok(self.push(src, data, Op::Softmax { input: a, axis }))
    }

    /// Normalises over the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let shape = self.shape(a).to_vec();
        let d = *shape.last().expect("tensors have rank >= 1");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let x = self.data(a);
        let rows = x.len() / d;
        let mut normalized = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let n = (v - mean) * is;
                normalized.push(n);
                out.push(g[j] * n + b[j]);
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                input: a,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        ))
    }

    /// Inverted dropout in train mode; the identity in eval mode or at `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        let Some(rng) = self.rng.as_mut().filter(|_| rate > 0.0) else {
            return Ok(a);
        };
        let keep = 1.0 / (1.0 - rate);
        let n = self.nodes[a.0].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Dropout { input: a, mask }))
    }

    /// Linear resampling of the last axis to `target` samples.
    pub fn resample(&mut self, a: Var, target: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let source = *shape.last().expect("tensors have rank >= 1");
        if target == 0 {
            return Err(Error::contract("resample target must be positive"));
        }
        if source == target {
            return Ok(a);
        }
        let plan = ResamplePlan::cached(source, target);
        let data = plan.apply(self.data(a));
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = target;
        Ok(self.push(out_shape, data, Op::Resample { input: a, plan }))
    }

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    ///
    /// Nodes that require a gradient but are not reachable from `loss` end up
    /// with an all-zero gradient. Calling twice without [`zero_grad`](Self::zero_grad)
    /// sums the two passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            self.nodes[i].value.accumulate_grad(&g);
        }
        for node in &mut self.nodes {
            if node.value.requires_grad && node.value.grad.is_none() {
                node.value.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value.data;
        let mut send = |v: Var, contribution: Vec<f64>| {
            if !self.nodes[v.0].value.requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        let needs = |v: Var| self.nodes[v.0].value.requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if needs(*a) {
                    send(*a, g.iter().zip(db).map(|(g, y)| g * y).collect());
                }
                if needs(*b) {
                    send(*b, g.iter().zip(da).map(|(g, x)| g * x).collect());
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if needs(*a) {
                    send(*a, g.iter().zip(db).map(|(g, y)| g / y).collect());
                }
                if needs(*b) {
                    send(
                        *b,
                        g.iter()
                            .zip(da.iter().zip(db))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect(),
                    );
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Sqrt(a) => send(*a, g.iter().zip(y).map(|(g, y)| g / (2.0 * y)).collect()),
            Op::Gather { input, index } => {
                let mut out = vec![0.0; self.value(*input).numel()];
                for (&src, &gv) in index.iter().zip(g) {
                    out[src] += gv;
                }
                send(*input, out);
            }
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                p,
                n,
                shared_rhs,
            } => {
                let (da, db) = (self.data(a), self.data(b));
                if needs(a) {
                    let mut ga = vec![0.0; batch * m * p];
                    for bi in 0..batch {
                        let b_blk = if shared_rhs {
                            db
                        } else {
                            &db[bi * p * n..(bi + 1) * p * n]
                        };
                        let g_blk = &g[bi * m * n..(bi + 1) * m * n];
                        let out = &mut ga[bi * m * p..(bi + 1) * m * p];
                        // dA = dC · Bᵀ
                        for r in 0..m {
                            for k in 0..p {
                                let mut s = 0.0;
                                for c in 0..n {
                                    s += g_blk[r * n + c] * b_blk[k * n + c];
                                }
                                out[r * p + k] = s;
                            }
                        }
                    }
                    send(a, ga);
                }
                if needs(b) {
                    let mut gb = vec![0.0; if shared_rhs { p * n } else { batch * p * n }];
                    for bi in 0..batch {
                        let a_blk = &da[bi * m * p..(bi + 1) * m * p];
                        let g_blk = &g[bi * m * n..(bi + 1) * m * n];
                        let out = if shared_rhs {
                            &mut gb[..]
                        } else {
                            &mut gb[bi * p * n..(bi + 1) * p * n]
                        };
                        // dB = Aᵀ · dC
                        for r in 0..m {
                            for k in 0..p {
                                let av = a_blk[r * p + k];
                                if av == 0.0 {
                                    continue;
                                }
                                let orow = &mut out[k * n..(k + 1) * n];
                                for (o, gv) in orow.iter_mut().zip(&g_blk[r * n..(r + 1) * n]) {
                                    *o += av * gv;
                                }
                            }
                        }
                    }
                    send(b, gb);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(&node.value.shape, *axis);
                let mut offset = 0;
                let total = node.value.shape[*axis] * inner;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if needs(v) {
                        let mut part = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + offset;
                            part.extend_from_slice(&g[base..base + chunk]);
                        }
                        send(v, part);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let src = self.shape(*input);
                let (outer, full, inner) = axis_split(src, *axis);
                let len = node.value.shape[*axis];
                let mut out = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    out[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*input, out);
            }
            Op::SumAxis { input, axis, scale } => {
                let (outer, len, inner) = axis_split(self.shape(*input), *axis);
                let mut out = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let gi = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let row = &mut out[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (r, gv) in row.iter_mut().zip(gi) {
                            *r = gv * scale;
                        }
                    }
                }
                send(*input, out);
            }
            Op::SumAll(a, scale) => send(*a, vec![g[0] * scale; self.value(*a).numel()]),
            Op::Gelu(a) => {
                let fault = if self.adjoint_fault { 1.05 } else { 1.0 };
                send(
                    *a,
                    g.iter()
                        .zip(self.data(*a))
                        .map(|(g, &x)| g * gelu_derivative(x) * fault)
                        .collect(),
                );
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = axis_split(&node.value.shape, *axis);
                let mut out = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            out[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                send(*input, out);
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let d = self.value(*gamma).numel();
                let gm = self.data(*gamma);
                if needs(*input) {
                    let mut out = vec![0.0; g.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let rng = r * d..(r + 1) * d;
                        let (gr, nr) = (&g[rng.clone()], &normalized[rng.clone()]);
                        let dn: Vec<f64> = gr.iter().zip(gm).map(|(g, w)| g * w).collect();
                        let sum_dn: f64 = dn.iter().sum();
                        let sum_dn_n: f64 = dn.iter().zip(nr).map(|(a, b)| a * b).sum();
                        for (j, o) in out[rng].iter_mut().enumerate() {
                            *o = is / d as f64 * (d as f64 * dn[j] - sum_dn - nr[j] * sum_dn_n);
                        }
                    }
                    send(*input, out);
                }
                if needs(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (gr, nr) in g.chunks_exact(d).zip(normalized.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * nr[j];
                        }
                    }
                    send(*gamma, dg);
                }
                if needs(*beta) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks_exact(d) {
                        db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    send(*beta, db);
                }
            }
            Op::Dropout { input, mask } => {
                send(*input, g.iter().zip(mask).map(|(g, m)| g * m).collect())
            }
            Op::Resample { input, plan } => send(*input, plan.apply_adjoint(g)),
        }
    }
}

/// `out += a · b` for row-major `a: m×p`, `b: p×n`.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for k in 0..p {
            let av = a[r * p + k];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[k * n..(k + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// Source offsets for every element of `out_shape` when output axis `i`
/// advances the source by `src_strides[i]`.
fn gather_index(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let numel: usize = out_shape.iter().product();
    let mut index = Vec::with_capacity(numel);
    let mut counter = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..numel {
        index.push(offset);
        for ax in (0..out_shape.len()).rev() {
            counter[ax] += 1;
            offset += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    index
}

pub(crate) fn softmax_along(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in 0..len {
                let e = (x[at(l)] - max).exp();
                out[at(l)] = e;
                total += e;
            }
            for l in 0..len {
                out[at(l)] /= total;
            }
        }
    }
    out
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        t(
            shape,
            &(0..n)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        )
    }

    /// Central-difference gradient of a scalar function of one tensor.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.numel())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    /// Builds `build(g, x)` and checks d(sum(out ⊙ w))/dx against finite differences.
    fn check(x: &Tensor, build: impl Fn(&mut Graph, Var) -> Var) -> f64 {
        let weighted = |g: &mut Graph, out: Var| {
            let n = g.value(out).numel();
            let w = g.constant(t(
                g.shape(out),
                &(0..n)
                    .map(|i| 0.3 + (i as f64 * 0.37).sin())
                    .collect::<Vec<_>>(),
            ));
            let p = g.mul(out, w).unwrap();
            g.sum(p)
        };
        let mut g = Graph::eval();
        let xv = g.leaf(x.clone().with_requires_grad(true));
        let out = build(&mut g, xv);
        let loss = weighted(&mut g, out);
        g.backward(loss).unwrap();
        let analytic = g.grad(xv).unwrap().to_vec();
        let numeric = numeric_grad(x, |x| {
            let mut g = Graph::eval();
            let xv = g.leaf(x.clone());
            let out = build(&mut g, xv);
            let loss = weighted(&mut g, out);
            g.value(loss).item()
        });
        max_rel_err(&analytic, &numeric)
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::eval();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let out = g.matmul(i, m).unwrap();
        assert_eq!(g.data(out), &[3.0, 4.0, 5.0, 6.0]);
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.data(out), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::eval();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn matmul_gradient_is_row_sums_of_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let mut g = Graph::eval();
        let av = g.leaf(a.clone().with_requires_grad(true));
        let bv = g.constant(b.clone());
        let out = g.matmul(av, bv).unwrap();
        let loss = g.sum(out);
        g.backward(loss).unwrap();
        let grad = g.grad(av).unwrap();
        for r in 0..3 {
            for k in 0..4 {
                let row_sum = b.at(&[k, 0]) + b.at(&[k, 1]);
                assert_abs_diff_eq!(grad[r * 4 + k], row_sum, epsilon = 1e-15);
            }
        }
        let numeric = numeric_grad(&a, |a| {
            let mut g = Graph::eval();
            let av = g.constant(a.clone());
            let bv = g.constant(b.clone());
            let out = g.matmul(av, bv).unwrap();
            g.sum(out);
            g.data(out).iter().sum()
        });
        assert!(max_rel_err(grad, &numeric) <= 1e-6);
    }

    #[test]
    fn batched_and_shared_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[2, 3, 4]);
        let w = random(&mut rng, &[4, 5]);
        let other = random(&mut rng, &[2, 4, 3]);
        assert!(
            check(&x, |g, xv| {
                let wv = g.constant(w.clone());
                g.matmul(xv, wv).unwrap()
            }) <= 1e-6
        );
        assert!(
            check(&w, |g, wv| {
                let xv = g.constant(x.clone());
                g.matmul(xv, wv).unwrap()
            }) <= 1e-6
        );
        assert!(
            check(&x, |g, xv| {
                let ov = g.constant(other.clone());
                g.matmul(xv, ov).unwrap()
            }) <= 1e-6
        );
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::eval();
        let a = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = g.softmax(a, 0).unwrap();
        for v in g.data(s) {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let a = g.constant(t(&[2], &[2f64.ln(), 0.0]));
        let s = g.softmax(a, 0).unwrap();
        assert_abs_diff_eq!(g.data(s)[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.data(s)[1], 1.0 / 3.0, epsilon = 1e-15);
        let a = g.constant(t(&[2], &[1000.0, 1000.0]));
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.data(s), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::eval();
        let a = g.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax(a, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_gradient_along_middle_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[2, 3, 4]);
        assert!(check(&x, |g, xv| g.softmax(xv, 1).unwrap()) <= 1e-6);
        assert!(check(&x, |g, xv| g.softmax(xv, 2).unwrap()) <= 1e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::eval();
        let gamma = g.constant(Tensor::full([2], 1.0));
        let beta = g.constant(Tensor::zeros([2]));
        let x = g.constant(t(&[2], &[1.0, 3.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert_abs_diff_eq!(g.data(y)[0], -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g.data(y)[1], 1.0, epsilon = 1e-9);

        let gamma = g.constant(Tensor::full([4], 1.0));
        let beta = g.constant(Tensor::zeros([4]));
        let x = g.constant(Tensor::full([4], 7.5));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.data(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_standardises_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[5, 16]);
        let mut g = Graph::eval();
        let gamma = g.constant(Tensor::full([16], 1.0));
        let beta = g.constant(Tensor::zeros([16]));
        let xv = g.constant(x);
        let y = g.layer_norm(xv, gamma, beta, 1e-5).unwrap();
        for row in g.data(y).chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-12);
            assert!((var - 1.0).abs() <= 1e-3, "var {var}");
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[3, 6]);
        let gamma = random(&mut rng, &[6]);
        let beta = random(&mut rng, &[6]);
        let (gm, bt) = (gamma.clone(), beta.clone());
        assert!(
            check(&x, move |g, xv| {
                let gv = g.constant(gm.clone());
                let bv = g.constant(bt.clone());
                g.layer_norm(xv, gv, bv, 1e-5).unwrap()
            }) <= 1e-6
        );
        let xc = x.clone();
        let bt = beta.clone();
        assert!(
            check(&gamma, move |g, gv| {
                let xv = g.constant(xc.clone());
                let bv = g.constant(bt.clone());
                g.layer_norm(xv, gv, bv, 1e-5).unwrap()
            }) <= 1e-6
        );
        assert!(
            check(&beta, move |g, bv| {
                let xv = g.constant(x.clone());
                let gv = g.constant(gamma.clone());
                g.layer_norm(xv, gv, bv, 1e-5).unwrap()
            }) <= 1e-6
        );
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::eval();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::eval();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
        let sq = g.square(x);
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0, 12.0]);
        g.zero_grad();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::eval();
        let x = g.leaf(Tensor::zeros([3]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_tensors_get_zero_grad() {
        let mut g = Graph::eval();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let unused = g.leaf(t(&[2], &[5.0, 6.0]).with_requires_grad(true));
        let _side = g.scale(unused, 3.0);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, &[2, 3, 4]);
        assert!(check(&x, |g, xv| g.permute(xv, &[2, 0, 1]).unwrap()) <= 1e-9);
        assert!(check(&x, |g, xv| g.reshape(xv, &[6, 4]).unwrap()) <= 1e-9);
        assert!(check(&x, |g, xv| g.slice(xv, 1, 1, 2).unwrap()) <= 1e-9);
        assert!(
            check(&x, |g, xv| {
                let tail = g.slice(xv, 2, 3, 1).unwrap();
                g.concat(&[xv, tail, tail], 2).unwrap()
            }) <= 1e-9
        );
        assert!(check(&x, |g, xv| g.mean_axis(xv, 1).unwrap()) <= 1e-9);
        assert!(check(&x, |g, xv| g.var_axis(xv, 2).unwrap()) <= 1e-6);
        assert!(
            check(&x, |g, xv| {
                let m = g.mean_axis(xv, 1).unwrap();
                g.expand(m, &[2, 3, 4]).unwrap()
            }) <= 1e-9
        );
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, &[3, 5]);
        let other = random(&mut rng, &[3, 5]);
        assert!(check(&x, |g, xv| g.gelu(xv)) <= 1e-6);
        let o = other.clone();
        assert!(
            check(&x, move |g, xv| {
                let ov = g.constant(o.clone());
                let d = g.add_scalar(ov, 3.0);
                g.div(xv, d).unwrap()
            }) <= 1e-6
        );
        assert!(
            check(&x, |g, xv| {
                let sq = g.square(xv);
                let shifted = g.add_scalar(sq, 0.5);
                g.sqrt(shifted)
            }) <= 1e-6
        );
        assert!(
            check(&x, move |g, xv| {
                let ov = g.constant(other.clone());
                let d = g.sub(ov, xv).unwrap();
                let d = g.scale(d, -2.0);
                g.mul(d, xv).unwrap()
            }) <= 1e-6
        );
    }

    #[test]
    fn permute_moves_values() {
        let mut g = Graph::eval();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.transpose(x).unwrap();
        assert_eq!(g.shape(y), &[3, 2]);
        assert_eq!(g.data(y), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn dropout_modes() {
        let mut g = Graph::eval();
        let x = g.constant(Tensor::full([1000], 1.0));
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);

        let mut g = Graph::train(9);
        let x = g.constant(Tensor::full([1000], 1.0));
        let y = g.dropout(x, 0.5).unwrap();
        let zeros = g.data(y).iter().filter(|v| **v == 0.0).count();
        assert!(g.data(y).iter().all(|v| *v == 0.0 || *v == 2.0));
        assert!((400..600).contains(&zeros));
        assert!(g.dropout(x, 1.0).is_err());
    }

    #[test]
    fn adjoint_fault_is_detectable() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, &[8]);
        let mut g = Graph::eval().with_adjoint_fault();
        let xv = g.leaf(x.clone().with_requires_grad(true));
        let y = g.gelu(xv);
        let s = g.sum(y);
        g.backward(s).unwrap();
        let numeric = numeric_grad(&x, |x| x.data().iter().map(|&v| gelu(v)).sum());
        assert!(max_rel_err(g.grad(xv).unwrap(), &numeric) > 1e-3);
    }
}
