//! Reverse-mode differentiation over dense f64 arrays.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node holding
//! its forward value and the information needed to push gradients back to
//! its inputs; [`Graph::backward`] walks the tape in reverse. Handles to nodes
//! are plain indices ([`Var`]), so a graph is cheap to build per training
//! step and dropped afterwards.

use crate::error::{Error, Result};

/// Floor applied to `log` arguments. Keeps `log(1 - p)` finite at `p = 1`.
pub const LOG_FLOOR: f64 = 1e-12;

/// `ln(max(x, LOG_FLOOR))`, except that NaN stays NaN so a diverged model
/// cannot hide behind the floor.
pub fn floored_ln(x: f64) -> f64 {
    if x.is_nan() {
        x
    } else {
        x.max(LOG_FLOOR).ln()
    }
}

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
    Col,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    MaxAxis {
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    SumAxis {
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sum(Var),
    Mean(Var),
    Log(Var),
    Exp(Var),
    Concat(Vec<Var>),
    L2NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    SoftmaxRows(Var),
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input node. Gradients are only accumulated into inputs created
    /// with `requires_grad = true` and into nodes derived from them.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t.shape, t.data, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.input(t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, `None` when the node does not require one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let n = &self.nodes[v.0];
        n.requires_grad.then_some(n.grad.as_slice())
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
        }
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let grad = if requires_grad {
            vec![0.0; data.len()]
        } else {
            Vec::new()
        };
        self.nodes.push(Node {
            shape,
            data,
            grad,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(
                op,
                format!("expected a matrix, got {}", shape_str(s)),
            )),
        }
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if sb.iter().product::<usize>() == 1 {
            return Ok(Broadcast::Scalar);
        }
        if let ([_, c], [1, c2]) = (sa, sb) {
            if c == c2 {
                return Ok(Broadcast::Row);
            }
        }
        if let ([r, _], [r2, 1]) = (sa, sb) {
            if r == r2 {
                return Ok(Broadcast::Col);
            }
        }
        Err(Error::shape(
            op,
            format!("cannot broadcast {} into {}", shape_str(sb), shape_str(sa)),
        ))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<f64>, Broadcast)> {
        let bc = self.broadcast(op, a, b)?;
        let (da, db) = (self.value(a), self.value(b));
        let out = match bc {
            Broadcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => da.iter().map(|&x| f(x, db[0])).collect(),
            Broadcast::Row => {
                let c = db.len();
                da.iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, db[i % c]))
                    .collect()
            }
            Broadcast::Col => {
                let c = self.shape(a)[1];
                da.iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, db[i / c]))
                    .collect()
            }
        };
        Ok((out, bc))
    }

    /// Elementwise `a + b`; `b` may be a scalar, a `(1, n)` row or a `(m, 1)`
    /// column broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (data, bc) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Add(a, b, bc)))
    }

    /// Elementwise `a * b` with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (data, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Mul(a, b, bc)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).iter().map(|&x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), data, rg, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).iter().map(|&x| x + s).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), data, rg, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{} x {}", shape_str(&[m, k]), shape_str(&[k2, n])),
            ));
        }
        let data = matmul_kernel(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], data, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let data = transpose_kernel(self.value(a), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![c, r], data, rg, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{} -> {}", shape_str(self.shape(a)), shape_str(&shape)),
            ));
        }
        let data = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, data, rg, Op::Reshape(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), data, rg, Op::Relu(a))
    }

    fn axis_split(
        &self,
        op: &'static str,
        a: Var,
        axis: usize,
    ) -> Result<(usize, usize, usize, Vec<usize>)> {
        let s = self.shape(a);
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::shape(op, format!("axis {axis} of {}", shape_str(s))));
        }
        let outer = s[..axis].iter().product();
        let inner = s[axis + 1..].iter().product();
        let mut out_shape = s.to_vec();
        out_shape.remove(axis);
        Ok((outer, s[axis], inner, out_shape))
    }

    /// Maximum along `axis`, which is removed from the shape. The gradient is
    /// routed to the first (lowest-index) maximiser.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner, out_shape) = self.axis_split("max_axis", a, axis)?;
        let x = self.value(a);
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            let base = o * len * inner;
            let out = &mut data[o * inner..(o + 1) * inner];
            let arg = &mut argmax[o * inner..(o + 1) * inner];
            out.copy_from_slice(&x[base..base + inner]);
            for l in 1..len {
                let row = &x[base + l * inner..base + (l + 1) * inner];
                for j in 0..inner {
                    if row[j] > out[j] {
                        out[j] = row[j];
                        arg[j] = l;
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            out_shape,
            data,
            rg,
            Op::MaxAxis {
                input: a,
                outer,
                len,
                inner,
                argmax,
            },
        ))
    }

    /// Sum along `axis`, which is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner, out_shape) = self.axis_split("sum_axis", a, axis)?;
        let x = self.value(a);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let out = &mut data[o * inner..(o + 1) * inner];
            for l in 0..len {
                let base = (o * len + l) * inner;
                for (acc, &v) in out.iter_mut().zip(&x[base..base + inner]) {
                    *acc += v;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            out_shape,
            data,
            rg,
            Op::SumAxis {
                input: a,
                outer,
                len,
                inner,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(vec![], vec![m], rg, Op::Mean(a)))
    }

    /// Natural log with the argument clamped to at least [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| floored_ln(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), data, rg, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| x.exp()).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), data, rg, Op::Exp(a))
    }

    /// Concatenates along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tail = self.shape(first).get(1..).unwrap_or(&[]).to_vec();
        if self.shape(first).is_empty() {
            return Err(Error::shape("concat", "scalar input"));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{} vs {}", shape_str(self.shape(first)), shape_str(s)),
                ));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(shape, data, rg, Op::Concat(parts.to_vec())))
    }

    /// Scales each row to unit Euclidean norm. Zero rows stay zero and pass no
    /// gradient.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("l2_normalize_rows", a)?;
        let x = self.value(a);
        let mut data = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = n;
            if n > 0.0 {
                for (o, &v) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *o = v / n;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            vec![r, c],
            data,
            rg,
            Op::L2NormalizeRows { input: a, norms },
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("softmax_rows", a)?;
        let data = softmax_rows(self.value(a), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![r, c], data, rg, Op::SoftmaxRows(a)))
    }

    /// Selects rows by index (repeats allowed); gradients scatter-add back.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() {
            return Err(Error::shape("gather_rows", "scalar input"));
        }
        let width: usize = s[1..].iter().product();
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {}", shape_str(&s)),
            ));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&x[r * width..(r + 1) * width]);
        }
        let mut shape = s.clone();
        shape[0] = rows.len();
        let rg = self.rg(&[a]);
        Ok(self.push(
            shape,
            data,
            rg,
            Op::GatherRows {
                input: a,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Accumulates `d root / d v` into every node that requires a gradient.
    /// Calling it twice without [`Graph::zero_grads`] adds the gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "root must be scalar, got {}",
                    shape_str(&self.nodes[root.0].shape)
                ),
            ));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            for (acc, v) in node.grad.iter_mut().zip(&g) {
                *acc += v;
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].data.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| reduce_broadcast(gb, g, *bc, &node.shape));
            }
            Op::Mul(a, b, bc) => {
                let (da, db) = (&nodes[a.0].data, &nodes[b.0].data);
                acc(*a, &mut |ga| {
                    let c = node.shape.get(1).copied().unwrap_or(1);
                    for i in 0..ga.len() {
                        let bv = match bc {
                            Broadcast::Same => db[i],
                            Broadcast::Scalar => db[0],
                            Broadcast::Row => db[i % c],
                            Broadcast::Col => db[i / c],
                        };
                        ga[i] += g[i] * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    let prod: Vec<f64> = g.iter().zip(da).map(|(x, y)| x * y).collect();
                    reduce_broadcast(gb, &prod, *bc, &node.shape);
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                for (o, &x) in ga.iter_mut().zip(g) {
                    *o += x * s;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (da, db) = (&nodes[a.0].data, &nodes[b.0].data);
                if nodes[a.0].requires_grad {
                    let bt = transpose_kernel(db, k, n);
                    acc(*a, &mut |ga| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            let out = &mut ga[i * k..(i + 1) * k];
                            for (j, &gv) in grow.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                for (o, &bv) in out.iter_mut().zip(&bt[j * k..(j + 1) * k]) {
                                    *o += gv * bv;
                                }
                            }
                        }
                    });
                }
                if nodes[b.0].requires_grad {
                    let mut gbt = vec![0.0; n * k];
                    for i in 0..m {
                        let arow = &da[i * k..(i + 1) * k];
                        for (j, &gv) in g[i * n..(i + 1) * n].iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            for (o, &av) in gbt[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                *o += gv * av;
                            }
                        }
                    }
                    let gb_full = transpose_kernel(&gbt, n, k);
                    acc(*b, &mut |gb| add_into(gb, &gb_full));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let back = transpose_kernel(g, c, r);
                acc(*a, &mut |ga| add_into(ga, &back));
            }
            Op::Relu(a) => {
                let x = &nodes[a.0].data;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::MaxAxis {
                input,
                outer,
                len,
                inner,
                argmax,
            } => acc(*input, &mut |ga| {
                for o in 0..*outer {
                    for j in 0..*inner {
                        let k = o * inner + j;
                        ga[(o * len + argmax[k]) * inner + j] += g[k];
                    }
                }
            }),
            Op::SumAxis {
                input,
                outer,
                len,
                inner,
            } => acc(*input, &mut |ga| {
                for o in 0..*outer {
                    let gs = &g[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        let base = (o * len + l) * inner;
                        add_into(&mut ga[base..base + inner], gs);
                    }
                }
            }),
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].data.len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::Log(a) => {
                let x = &nodes[a.0].data;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if x[i] >= LOG_FLOOR {
                            ga[i] += g[i] / x[i];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.data;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * y[i];
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].data.len();
                    acc(*p, &mut |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::L2NormalizeRows { input, norms } => {
                let c = node.shape[1];
                let y = &node.data;
                acc(*input, &mut |ga| {
                    for (i, &n) in norms.iter().enumerate() {
                        if n == 0.0 {
                            continue;
                        }
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[i * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = node.shape[1];
                let y = &node.data;
                acc(*a, &mut |ga| {
                    for i in 0..node.shape[0] {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::GatherRows { input, rows } => {
                let width = node.shape[1..].iter().product::<usize>();
                acc(*input, &mut |ga| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(
                            &mut ga[r * width..(r + 1) * width],
                            &g[k * width..(k + 1) * width],
                        );
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn reduce_broadcast(dst: &mut [f64], g: &[f64], bc: Broadcast, out_shape: &[usize]) {
    match bc {
        Broadcast::Same => add_into(dst, g),
        Broadcast::Scalar => dst[0] += g.iter().sum::<f64>(),
        Broadcast::Row => {
            let c = out_shape[1];
            for row in g.chunks(c) {
                add_into(dst, row);
            }
        }
        Broadcast::Col => {
            let c = out_shape[1];
            for (d, row) in dst.iter_mut().zip(g.chunks(c)) {
                *d += row.iter().sum::<f64>();
            }
        }
    }
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    c
}

fn transpose_kernel(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

pub(crate) fn softmax_rows(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[i * c..(i + 1) * c];
        let mut s = 0.0;
        for (oj, &v) in o.iter_mut().zip(row) {
            *oj = (v - m).exp();
            s += *oj;
        }
        o.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Momentum SGD: `v <- momentum * v + g; w <- w - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

/// A trainable array together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = vec![0.0; value.numel()];
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }
}

pub fn zero_grads(params: &mut [Parameter]) {
    for p in params {
        p.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, params: &[Parameter], velocity: Vec<Vec<f64>>) -> Result<()> {
        if velocity.len() != params.len()
            || velocity
                .iter()
                .zip(params)
                .any(|(v, p)| v.len() != p.value.numel())
        {
            return Err(Error::shape(
                "sgd",
                "velocity does not match parameter shapes",
            ));
        }
        self.velocity = velocity;
        Ok(())
    }

    pub fn step(&mut self, params: &mut [Parameter]) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            for ((w, g), vel) in p.value.data.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vel = self.momentum * *vel + g;
                *w -= self.lr * *vel;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>) -> Var {
        g.param(Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn relu_forward_backward() {
        let mut g = Graph::new();
        let x = v(&mut g, vec![2], vec![-1.0, 2.0]);
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = v(&mut g, vec![1, 2], vec![0.0, 0.0]);
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn max_routes_to_argmax() {
        let mut g = Graph::new();
        let x = v(&mut g, vec![3], vec![3.0, 7.0, 2.0]);
        let m = g.max_axis(x, 0).unwrap();
        assert_eq!(g.item(m), 7.0);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let mut g = Graph::new();
        let x = v(&mut g, vec![4], vec![1.0, 5.0, 5.0, 0.0]);
        let m = g.max_axis(x, 0).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn square_and_log_gradients() {
        let mut g = Graph::new();
        let x = v(&mut g, vec![], vec![3.0]);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);

        let mut g = Graph::new();
        let x = v(&mut g, vec![], vec![2.0]);
        let y = g.log(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.5]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = v(&mut g, vec![], vec![3.0]);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
        g.zero_grads();
        assert_eq!(g.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = v(&mut g, vec![2], vec![1.0, 2.0]);
        assert!(matches!(
            g.backward(x),
            Err(Error::Shape { op: "backward", .. })
        ));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = v(&mut g, vec![2, 3], vec![0.0; 6]);
        let b = v(&mut g, vec![2, 3], vec![0.0; 6]);
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        let c = v(&mut g, vec![3, 2], vec![0.0; 6]);
        assert!(matches!(g.add(a, c), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn zero_row_normalizes_to_zero() {
        let mut g = Graph::new();
        let x = v(&mut g, vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]);
        let y = g.l2_normalize_rows(x).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 0.6, 0.8]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(&g.grad(x).unwrap()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn log_keeps_nan() {
        let mut g = Graph::new();
        let x = v(&mut g, vec![2], vec![f64::NAN, 0.5]);
        let y = g.log(x);
        assert!(g.value(y)[0].is_nan());
        assert_eq!(g.value(y)[1], 0.5f64.ln());
    }

    #[test]
    fn log_clamps_at_floor() {
        let mut g = Graph::new();
        let x = v(&mut g, vec![1], vec![0.0]);
        let y = g.log(x);
        assert_eq!(g.value(y)[0], LOG_FLOOR.ln());
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0]);
    }

    fn one_param(w: f64, g: f64) -> Vec<Parameter> {
        let mut p = Parameter::new("w", Tensor::scalar(w));
        p.grad = vec![g];
        vec![p]
    }

    #[test]
    fn sgd_plain_step() {
        let mut params = one_param(1.0, 0.5);
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        opt.step(&mut params);
        assert!((params[0].value.data[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut params = one_param(0.25, 0.0);
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step(&mut params);
        opt.step(&mut params);
        assert_eq!(params[0].value.data[0], 0.25);
    }

    #[test]
    fn sgd_momentum_recurrence() {
        let mut params = one_param(0.0, 1.0);
        let mut opt = Sgd::new(1.0, 0.9).unwrap();
        opt.step(&mut params);
        opt.step(&mut params);
        assert!((params[0].value.data[0] + 2.9).abs() < 1e-12);
        zero_grads(&mut params);
        assert_eq!(params[0].grad, vec![0.0]);
    }

    #[test]
    fn sgd_rejects_bad_hyperparameters() {
        assert!(Sgd::new(0.0, 0.0).is_err());
        assert!(Sgd::new(0.1, 1.0).is_err());
    }
}
