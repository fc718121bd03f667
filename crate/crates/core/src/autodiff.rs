//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends a
//! node holding its output and whatever it needs for the backward rule, so
//! node ids are a valid topological order and `backward` just walks the tape
//! from the end.

use crate::error::{FedHelpError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, s: f64 },
    AddScalar { a: Var },
    Relu { a: Var },
    Exp { a: Var },
    Log { a: Var },
    XLogX { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    SumLast { a: Var, width: usize },
    Gather { a: Var, index: Vec<usize>, width: usize },
    IndexRows { a: Var, rows: Vec<usize>, width: usize },
    Reshape { a: Var },
    LogSoftmax { a: Var, width: usize },
    Softmax { a: Var, width: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    height: usize,
    width: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.c_in
    }

    fn pixels(&self) -> usize {
        self.batch * self.height * self.width
    }
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only operation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor as a leaf; it is differentiable iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a tensor as a trainable leaf regardless of its flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records a constant (gradient never flows into it).
    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(FedHelpError::Tensor(format!(
                "constant of shape {:?} given {} values",
                shape,
                value.len()
            )));
        }
        Ok(self.push(shape.to_vec(), value, Op::Leaf, false))
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "scalar_value on non-scalar node");
        n.value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of a leaf after one or more `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(FedHelpError::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1), &mut out, (n, 1), 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched product `[B×m×k]·[B×k×n] → [B×m×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(FedHelpError::shape("bmm", &sa, &sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    (k, 1),
                    &bv[i * k * n..(i + 1) * k * n],
                    (n, 1),
                    &mut out[i * m * n..(i + 1) * m * n],
                    (n, 1),
                    0.0,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::Bmm { a, b, batch, m, k, n },
            rg,
        ))
    }

    /// 2-D convolution, NHWC input `[B,H,W,Cin]`, kernel `[k,k,Cin,Cout]`,
    /// stride 1 with zero "same" padding. `k` must be odd.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sw[1] || sw[0] % 2 == 0 || sw[2] != sx[3] {
            return Err(FedHelpError::shape("conv2d", &sx, &sw));
        }
        let geom = ConvGeom {
            batch: sx[0],
            height: sx[1],
            width: sx[2],
            c_in: sx[3],
            c_out: sw[3],
            kernel: sw[0],
        };
        let cols = im2col(self.value(x), &geom);
        let mut out = vec![0.0; geom.pixels() * geom.c_out];
        gemm(
            geom.pixels(),
            geom.patch(),
            geom.c_out,
            &cols,
            (geom.patch(), 1),
            self.value(w),
            (geom.c_out, 1),
            &mut out,
            (geom.c_out, 1),
            0.0,
        );
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            vec![geom.batch, geom.height, geom.width, geom.c_out],
            out,
            Op::Conv2d { x, w, geom, cols },
            rg,
        ))
    }

    // ---- elementwise ----

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(FedHelpError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, rg))
    }

    /// Adds a `[C]` bias to every length-`C` row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(FedHelpError::shape("add_bias", &sa, &sb));
        }
        let bv = self.value(bias);
        let out: Vec<f64> = self
            .value(a)
            .chunks(sb[0].max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(x, b)| x + b))
            .collect();
        let rg = self.rg(&[a, bias]);
        Ok(self.push(sa, out, Op::AddBias { a, bias }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, s }, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x + s).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::AddScalar { a }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Relu { a }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Exp { a }, rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.ln()).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Log { a }, rg)
    }

    /// `x·ln x` with `0·ln 0 := 0` (and zero gradient at 0).
    pub fn xlogx(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| xlogx(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::XLogX { a }, rg)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.value(a).iter().sum::<f64>() / n;
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Mean { a }, rg)
    }

    /// Sums over the last axis: `[..., C] → [...]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let width = *sa
            .last()
            .ok_or_else(|| FedHelpError::Tensor("sum_last on a scalar".into()))?;
        let out = self
            .value(a)
            .chunks(width.max(1))
            .map(|r| r.iter().sum())
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(sa[..sa.len() - 1].to_vec(), out, Op::SumLast { a, width }, rg))
    }

    // ---- indexing / shape ----

    /// Picks `a[r, index[r]]` for each row of `a` viewed as `[R, C]`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let width = *sa.last().unwrap_or(&0);
        let rows = self.value(a).len().checked_div(width).unwrap_or(0);
        if rows != index.len() {
            return Err(FedHelpError::shape("gather", &sa, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= width) {
            return Err(FedHelpError::InvalidArgument(format!(
                "gather index {bad} out of range for width {width}"
            )));
        }
        let av = self.value(a);
        let out = index
            .iter()
            .enumerate()
            .map(|(r, &i)| av[r * width + i])
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            sa[..sa.len() - 1].to_vec(),
            out,
            Op::Gather {
                a,
                index: index.to_vec(),
                width,
            },
            rg,
        ))
    }

    /// Selects rows along the first axis.
    pub fn index_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() {
            return Err(FedHelpError::Tensor("index_rows on a scalar".into()));
        }
        let width: usize = sa[1..].iter().product();
        if let Some(&bad) = rows.iter().find(|&&r| r >= sa[0]) {
            return Err(FedHelpError::InvalidArgument(format!(
                "row {bad} out of range for {} rows",
                sa[0]
            )));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&av[r * width..(r + 1) * width]);
        }
        let mut shape = sa.clone();
        shape[0] = rows.len();
        let rg = self.rg(&[a]);
        Ok(self.push(
            shape,
            out,
            Op::IndexRows {
                a,
                rows: rows.to_vec(),
                width,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(FedHelpError::shape("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, rg))
    }

    /// Collapses everything after the first axis: `[B, ...] → [B, rest]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let b = *sa.first().unwrap_or(&1);
        let rest = sa.iter().skip(1).product();
        self.reshape(a, &[b, rest])
    }

    // ---- softmax family ----

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let width = self.class_width(a, "log_softmax")?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(width) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::LogSoftmax { a, width }, rg))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let width = self.class_width(a, "softmax")?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(width) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax { a, width }, rg))
    }

    fn class_width(&self, a: Var, op: &'static str) -> Result<usize> {
        match self.shape(a).last() {
            Some(&c) if c >= 1 => Ok(c),
            _ => Err(FedHelpError::shape(op, self.shape(a), &[])),
        }
    }

    // ---- backward ----

    /// Back-propagates from a scalar node, adding into the leaf gradient
    /// buffers. Calling it twice without [`Graph::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.node(loss);
        if root.value.len() != 1 || !root.shape.is_empty() && root.shape.iter().any(|&d| d != 1) {
            return Err(FedHelpError::NonScalarLoss(root.shape.clone()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    match &mut self.leaf_grads[id] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                        slot => *slot = Some(g),
                    }
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        // Lazily allocates the input's gradient buffer and hands it to `f`.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                // dA = G·Bᵀ ; dB = Aᵀ·G
                acc(a, &mut |ga| gemm(m, n, k, g, (n, 1), bv, (1, n), ga, (k, 1), 1.0));
                acc(b, &mut |gb| gemm(k, m, n, av, (1, k), g, (n, 1), gb, (n, 1), 1.0));
            }
            &Op::Bmm { a, b, batch, m, k, n } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(a, &mut |ga| {
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            &bv[i * k * n..(i + 1) * k * n],
                            (1, n),
                            &mut ga[i * m * k..(i + 1) * m * k],
                            (k, 1),
                            1.0,
                        );
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &av[i * m * k..(i + 1) * m * k],
                            (1, k),
                            &g[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            &mut gb[i * k * n..(i + 1) * k * n],
                            (n, 1),
                            1.0,
                        );
                    }
                });
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (p, kk, co) = (geom.pixels(), geom.patch(), geom.c_out);
                let wv = &nodes[w.0].value;
                acc(*w, &mut |gw| gemm(kk, p, co, cols, (1, kk), g, (co, 1), gw, (co, 1), 1.0));
                acc(*x, &mut |gx| {
                    let mut gcols = vec![0.0; p * kk];
                    gemm(p, co, kk, g, (co, 1), wv, (1, co), &mut gcols, (kk, 1), 0.0);
                    col2im_add(&gcols, geom, gx);
                });
            }
            &Op::Add { a, b } => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            &Op::Sub { a, b } => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(a, &mut |ga| {
                    ga.iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(x, (gi, bi))| *x += gi * bi)
                });
                acc(b, &mut |gb| {
                    gb.iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(x, (gi, ai))| *x += gi * ai)
                });
            }
            &Op::AddBias { a, bias } => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(bias, &mut |gb| {
                    let c = gb.len().max(1);
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                });
            }
            &Op::Scale { a, s } => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            &Op::AddScalar { a } | &Op::Reshape { a } => acc(a, &mut |ga| add_into(ga, g)),
            &Op::Relu { a } => {
                let av = &nodes[a.0].value;
                acc(a, &mut |ga| {
                    for ((x, gi), ai) in ga.iter_mut().zip(g).zip(av) {
                        if *ai > 0.0 {
                            *x += gi;
                        }
                    }
                });
            }
            &Op::Exp { a } => {
                let out = &node.value;
                acc(a, &mut |ga| {
                    ga.iter_mut()
                        .zip(g.iter().zip(out))
                        .for_each(|(x, (gi, yi))| *x += gi * yi)
                });
            }
            &Op::Log { a } => {
                let av = &nodes[a.0].value;
                acc(a, &mut |ga| {
                    ga.iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(x, (gi, ai))| *x += gi / ai)
                });
            }
            &Op::XLogX { a } => {
                let av = &nodes[a.0].value;
                acc(a, &mut |ga| {
                    for ((x, gi), &ai) in ga.iter_mut().zip(g).zip(av) {
                        if ai > 0.0 {
                            *x += gi * (ai.ln() + 1.0);
                        }
                    }
                });
            }
            &Op::Sum { a } => acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            &Op::Mean { a } => {
                let n = nodes[a.0].value.len().max(1) as f64;
                acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            &Op::SumLast { a, width } => {
                acc(a, &mut |ga| {
                    for (row, gi) in ga.chunks_mut(width.max(1)).zip(g) {
                        row.iter_mut().for_each(|x| *x += gi);
                    }
                });
            }
            Op::Gather { a, index, width } => {
                acc(*a, &mut |ga| {
                    for (r, (&i, gi)) in index.iter().zip(g).enumerate() {
                        ga[r * width + i] += gi;
                    }
                });
            }
            Op::IndexRows { a, rows, width } => {
                acc(*a, &mut |ga| {
                    for (j, &r) in rows.iter().enumerate() {
                        add_into(
                            &mut ga[r * width..(r + 1) * width],
                            &g[j * width..(j + 1) * width],
                        );
                    }
                });
            }
            &Op::LogSoftmax { a, width } => {
                let out = &node.value;
                acc(a, &mut |ga| {
                    for ((gr, yr), xr) in g
                        .chunks(width)
                        .zip(out.chunks(width))
                        .zip(ga.chunks_mut(width))
                    {
                        let total: f64 = gr.iter().sum();
                        for ((x, gi), yi) in xr.iter_mut().zip(gr).zip(yr) {
                            *x += gi - yi.exp() * total;
                        }
                    }
                });
            }
            &Op::Softmax { a, width } => {
                let out = &node.value;
                acc(a, &mut |ga| {
                    for ((gr, sr), xr) in g
                        .chunks(width)
                        .zip(out.chunks(width))
                        .zip(ga.chunks_mut(width))
                    {
                        let dot: f64 = gr.iter().zip(sr).map(|(a, b)| a * b).sum();
                        for ((x, gi), si) in xr.iter_mut().zip(gr).zip(sr) {
                            *x += si * (gi - dot);
                        }
                    }
                });
            }
        }
    }
}

// ---- numeric helpers ----

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// Row-wise softmax of a flat `[R×C]` buffer.
pub fn softmax_rows(values: &[f64], width: usize) -> Vec<f64> {
    let mut out = values.to_vec();
    out.chunks_mut(width).for_each(softmax_in_place);
    out
}

pub(crate) fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `C = A·B + beta·C` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let pad = (g.kernel / 2) as isize;
    let mut cols = vec![0.0; g.pixels() * g.patch()];
    let mut row = 0;
    for b in 0..g.batch {
        for y in 0..g.height {
            for xx in 0..g.width {
                let dst = &mut cols[row * g.patch()..(row + 1) * g.patch()];
                for dy in 0..g.kernel {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= g.height as isize {
                        continue;
                    }
                    for dx in 0..g.kernel {
                        let sx = xx as isize + dx as isize - pad;
                        if sx < 0 || sx >= g.width as isize {
                            continue;
                        }
                        let src = ((b * g.height + sy as usize) * g.width + sx as usize) * g.c_in;
                        let off = (dy * g.kernel + dx) * g.c_in;
                        dst[off..off + g.c_in].copy_from_slice(&x[src..src + g.c_in]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let pad = (g.kernel / 2) as isize;
    let mut row = 0;
    for b in 0..g.batch {
        for y in 0..g.height {
            for xx in 0..g.width {
                let srow = &cols[row * g.patch()..(row + 1) * g.patch()];
                for dy in 0..g.kernel {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= g.height as isize {
                        continue;
                    }
                    for dx in 0..g.kernel {
                        let sx = xx as isize + dx as isize - pad;
                        if sx < 0 || sx >= g.width as isize {
                            continue;
                        }
                        let dst = ((b * g.height + sy as usize) * g.width + sx as usize) * g.c_in;
                        let off = (dy * g.kernel + dx) * g.c_in;
                        add_into(&mut gx[dst..dst + g.c_in], &srow[off..off + g.c_in]);
                    }
                }
                row += 1;
            }
        }
    }
}
