use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn, Zip};

use super::{as_matrix, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: usize, b: usize, trans_b: bool },
    MatMulTn { a: usize, b: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Relu(usize),
    Square(usize),
    Log(usize),
    Exp(usize),
    SoftmaxRows(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    AddBias(usize, usize),
    CrossEntropy { logits: usize, labels: Vec<usize> },
    Dlr { logits: usize, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations. Every operation's inputs precede it, so a
/// single reverse sweep visits each node exactly once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero when the root does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_array(g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Moves the gradient out, leaving zero behind.
    pub fn take(&mut self, v: Var) -> ArrayD<f64> {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => ArrayD::zeros(IxDyn(&self.shapes[v.0])),
        }
    }
}

const DLR_DENOMINATOR_FLOOR: f64 = 1e-12;

fn same_or_scalar(op: &'static str, a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<()> {
    if a.shape() == b.shape() || a.len() == 1 || b.len() == 1 {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn zip_broadcast(a: &ArrayD<f64>, b: &ArrayD<f64>, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
    if a.shape() == b.shape() {
        Zip::from(a).and(b).map_collect(|&x, &y| f(x, y))
    } else if b.len() == 1 {
        let s = b.iter().next().copied().unwrap_or(0.0);
        a.mapv(|x| f(x, s))
    } else {
        let s = a.iter().next().copied().unwrap_or(0.0);
        b.mapv(|y| f(s, y))
    }
}

/// Reduces a broadcast gradient back to the operand's shape.
fn unbroadcast(g: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if g.shape() == shape {
        g
    } else {
        ArrayD::from_elem(IxDyn(shape), g.sum())
    }
}

fn rows_view(a: &ArrayD<f64>) -> Result<ndarray::ArrayView2<'_, f64>> {
    match a.ndim() {
        1 => Ok(a.view().into_shape((1, a.len())).expect("contiguous 1-d view")),
        2 => as_matrix(a),
        _ => Err(Error::Shape {
            op: "row op",
            lhs: a.shape().to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

fn softmax_rows(z: &ndarray::ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = z.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

fn check_labels(op: &'static str, z: &ndarray::ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
    if z.nrows() != labels.len() {
        return Err(Error::Shape {
            op,
            lhs: z.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= z.ncols()) {
        return Err(Error::InvalidArgument(format!(
            "{op}: label {bad} out of range for {} classes",
            z.ncols()
        )));
    }
    Ok(())
}

/// Indices of the largest, second largest and third largest entries.
fn top3(row: &[f64]) -> [usize; 3] {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
    [idx[0], idx[1], idx[2]]
}

fn max_other(row: &[f64], y: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in row.iter().enumerate() {
        if i != y && (best == usize::MAX || v > row[best]) {
            best = i;
        }
    }
    best
}

/// Difference-of-logits-ratio loss of one row.
pub(crate) fn dlr_row(row: &[f64], y: usize) -> f64 {
    let [p1, _, p3] = top3(row);
    let m = max_other(row, y);
    -(row[y] - row[m]) / (row[p1] - row[p3] + DLR_DENOMINATOR_FLOOR)
}

/// Numerically stable cross-entropy of one row.
pub(crate) fn cross_entropy_row(row: &[f64], y: usize) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - row[y]
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that rejects non-finite intermediates and `log` of non-positive values.
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::from_array(self.nodes[v.0].value.clone())
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_raw(t.into_array(), Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t.into_array(), Op::Constant, false)
    }

    pub fn constant_array(&mut self, a: ArrayD<f64>) -> Var {
        self.push_raw(a, Op::Constant, false)
    }

    fn push_raw(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: ArrayD<f64>, op: Op, inputs: &[usize]) -> Result<Var> {
        if self.checked && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn val(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Matrix product `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        let mismatch = || Error::Shape {
            op: "matmul_tn",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        let am = as_matrix(av).map_err(|_| mismatch())?;
        let bm = as_matrix(bv).map_err(|_| mismatch())?;
        if am.nrows() != bm.nrows() {
            return Err(mismatch());
        }
        let out = am.t().dot(&bm);
        self.push(
            "matmul_tn",
            out.into_dyn(),
            Op::MatMulTn { a: a.0, b: b.0 },
            &[a.0, b.0],
        )
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        let am = as_matrix(av).map_err(|_| mismatch())?;
        let bm = as_matrix(bv).map_err(|_| mismatch())?;
        let out = if trans_b {
            if am.ncols() != bm.ncols() {
                return Err(mismatch());
            }
            am.dot(&bm.t())
        } else {
            if am.ncols() != bm.nrows() {
                return Err(mismatch());
            }
            am.dot(&bm)
        };
        self.push(
            "matmul",
            out.into_dyn(),
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            &[a.0, b.0],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_or_scalar("add", self.val(a), self.val(b))?;
        let out = zip_broadcast(self.val(a), self.val(b), |x, y| x + y);
        self.push("add", out, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_or_scalar("sub", self.val(a), self.val(b))?;
        let out = zip_broadcast(self.val(a), self.val(b), |x, y| x - y);
        self.push("sub", out, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_or_scalar("mul", self.val(a), self.val(b))?;
        let out = zip_broadcast(self.val(a), self.val(b), |x, y| x * y);
        self.push("mul", out, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    /// Multiplication by a fixed real.
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.val(a).mapv(|x| x * s);
        self.push("scale", out, Op::Scale(a.0, s), &[a.0])
    }

    /// Addition of a fixed real.
    pub fn offset(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.val(a).mapv(|x| x + s);
        self.push("offset", out, Op::Offset(a.0), &[a.0])
    }

    /// `max(v, 0)`; derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).mapv(|x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", out, Op::Relu(a.0), &[a.0])
    }

    /// Indicator `1[v > 0]`, the ReLU derivative. Recorded as a constant: its
    /// own derivative is zero almost everywhere.
    pub fn relu_mask(&mut self, a: Var) -> Var {
        let out = self.val(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push_raw(out, Op::Constant, false)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).mapv(|x| x * x);
        self.push("square", out, Op::Square(a.0), &[a.0])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.checked && self.val(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::InvalidArgument("log of non-positive value".into()));
        }
        let out = self.val(a).mapv(f64::ln);
        self.push("log", out, Op::Log(a.0), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).mapv(f64::exp);
        self.push("exp", out, Op::Exp(a.0), &[a.0])
    }

    /// Softmax over the last axis of a vector or matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a);
        let shape = av.shape().to_vec();
        let out = softmax_rows(&rows_view(av)?)
            .into_shape(IxDyn(&shape))
            .expect("same element count");
        self.push("softmax", out, Op::SoftmaxRows(a.0), &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = ArrayD::from_elem(IxDyn(&[]), self.val(a).sum());
        self.push("sum", out, Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a);
        let out = ArrayD::from_elem(IxDyn(&[]), av.sum() / av.len() as f64);
        self.push("mean", out, Op::Mean(a.0), &[a.0])
    }

    /// Per-row sums of a matrix: `[n, m] -> [n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let out = as_matrix(self.val(a))?.sum_axis(Axis(1)).into_dyn();
        self.push("sum_rows", out, Op::SumRows(a.0), &[a.0])
    }

    /// Adds a length-`m` bias to every row of an `[n, m]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xm = as_matrix(self.val(x))?;
        let bv = self.val(bias);
        if bv.ndim() != 1 || bv.len() != xm.ncols() {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: xm.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().expect("1-d");
        let out = (&xm + &b1).into_dyn();
        self.push("add_bias", out, Op::AddBias(x.0, bias.0), &[x.0, bias.0])
    }

    /// Per-row softmax cross-entropy, fused with log-sum-exp: `[n, k] -> [n]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = as_matrix(self.val(logits))?;
        check_labels("cross_entropy", &z, labels)?;
        let out: Array1<f64> = z
            .rows()
            .into_iter()
            .zip(labels)
            .map(|(row, &y)| cross_entropy_row(row.as_slice().expect("contiguous"), y))
            .collect();
        self.push(
            "cross_entropy",
            out.into_dyn(),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
            &[logits.0],
        )
    }

    /// Per-row difference-of-logits-ratio loss: `[n, k] -> [n]`, `k >= 3`.
    pub fn dlr(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = as_matrix(self.val(logits))?.as_standard_layout().into_owned();
        if z.ncols() < 3 {
            return Err(Error::InvalidArgument(format!(
                "DLR loss needs at least 3 classes, got {}",
                z.ncols()
            )));
        }
        check_labels("dlr", &z.view(), labels)?;
        let out: Array1<f64> = z
            .rows()
            .into_iter()
            .zip(labels)
            .map(|(row, &y)| dlr_row(row.as_slice().expect("contiguous"), y))
            .collect();
        self.push(
            "dlr",
            out.into_dyn(),
            Op::Dlr {
                logits: logits.0,
                labels: labels.to_vec(),
            },
            &[logits.0],
        )
    }

    /// Reverse sweep from a scalar root. Consumes the graph.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Graph("backward called on a consumed graph".into()));
        }
        let root_len = self.nodes[root.0].value.len();
        if root_len != 1 {
            return Err(Error::Graph(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.consumed = true;

        let n = root.0 + 1;
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, g, &mut grads)?;
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<f64>>], id: usize, contrib: ArrayD<f64>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => *g += &contrib,
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let v = |id: usize| &self.nodes[id].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::MatMul { a, b, trans_b } => {
                let gm = as_matrix(&g)?;
                let am = as_matrix(v(a))?;
                let bm = as_matrix(v(b))?;
                if self.nodes[a].requires_grad {
                    let ga = if trans_b { gm.dot(&bm) } else { gm.dot(&bm.t()) };
                    self.accumulate(grads, a, ga.into_dyn());
                }
                if self.nodes[b].requires_grad {
                    let gb = if trans_b { gm.t().dot(&am) } else { am.t().dot(&gm) };
                    self.accumulate(grads, b, gb.into_dyn());
                }
            }
            &Op::MatMulTn { a, b } => {
                let gm = as_matrix(&g)?;
                if self.nodes[a].requires_grad {
                    let ga = as_matrix(v(b))?.dot(&gm.t());
                    self.accumulate(grads, a, ga.into_dyn());
                }
                if self.nodes[b].requires_grad {
                    let gb = as_matrix(v(a))?.dot(&gm);
                    self.accumulate(grads, b, gb.into_dyn());
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, unbroadcast(g.clone(), v(a).shape()));
                self.accumulate(grads, b, unbroadcast(g, v(b).shape()));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, unbroadcast(g.clone(), v(a).shape()));
                self.accumulate(grads, b, unbroadcast(-g, v(b).shape()));
            }
            &Op::Mul(a, b) => {
                if self.nodes[a].requires_grad {
                    let ga = zip_broadcast(&g, v(b), |x, y| x * y);
                    self.accumulate(grads, a, unbroadcast(ga, v(a).shape()));
                }
                if self.nodes[b].requires_grad {
                    let gb = zip_broadcast(&g, v(a), |x, y| x * y);
                    self.accumulate(grads, b, unbroadcast(gb, v(b).shape()));
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.mapv(|x| x * s)),
            &Op::Offset(a) => self.accumulate(grads, a, g),
            &Op::Relu(a) => {
                let ga = Zip::from(&g)
                    .and(v(a))
                    .map_collect(|&gi, &x| if x > 0.0 { gi } else { 0.0 });
                self.accumulate(grads, a, ga);
            }
            &Op::Square(a) => {
                let ga = Zip::from(&g).and(v(a)).map_collect(|&gi, &x| 2.0 * x * gi);
                self.accumulate(grads, a, ga);
            }
            &Op::Log(a) => {
                let ga = Zip::from(&g).and(v(a)).map_collect(|&gi, &x| gi / x);
                self.accumulate(grads, a, ga);
            }
            &Op::Exp(a) => {
                let ga = Zip::from(&g).and(&node.value).map_collect(|&gi, &y| gi * y);
                self.accumulate(grads, a, ga);
            }
            &Op::SoftmaxRows(a) => {
                let shape = node.value.shape().to_vec();
                let y = rows_view(&node.value)?;
                let gy = rows_view(&g)?;
                let mut ga = Array2::zeros(y.raw_dim());
                for ((mut out, yr), gr) in ga.rows_mut().into_iter().zip(y.rows()).zip(gy.rows()) {
                    let dot = yr.dot(&gr);
                    Zip::from(&mut out)
                        .and(&yr)
                        .and(&gr)
                        .for_each(|o, &yi, &gi| *o = yi * (gi - dot));
                }
                let ga = ga.into_shape(IxDyn(&shape)).expect("same element count");
                self.accumulate(grads, a, ga);
            }
            &Op::Sum(a) => {
                let s = g.sum();
                self.accumulate(grads, a, ArrayD::from_elem(v(a).raw_dim(), s));
            }
            &Op::Mean(a) => {
                let s = g.sum() / v(a).len() as f64;
                self.accumulate(grads, a, ArrayD::from_elem(v(a).raw_dim(), s));
            }
            &Op::SumRows(a) => {
                let cols = v(a).shape()[1];
                let g1 = g.view().into_dimensionality::<ndarray::Ix1>().expect("1-d");
                let ga = g1
                    .insert_axis(Axis(1))
                    .broadcast((g1.len(), cols))
                    .expect("broadcast rows")
                    .to_owned();
                self.accumulate(grads, a, ga.into_dyn());
            }
            &Op::AddBias(x, b) => {
                if self.nodes[b].requires_grad {
                    let gb = as_matrix(&g)?.sum_axis(Axis(0)).into_dyn();
                    self.accumulate(grads, b, gb);
                }
                self.accumulate(grads, x, g);
            }
            Op::CrossEntropy { logits, labels } => {
                let z = as_matrix(v(*logits))?;
                let mut gz = softmax_rows(&z);
                for ((mut row, &y), &gi) in gz.rows_mut().into_iter().zip(labels).zip(g.iter()) {
                    row[y] -= 1.0;
                    row.mapv_inplace(|p| p * gi);
                }
                self.accumulate(grads, *logits, gz.into_dyn());
            }
            Op::Dlr { logits, labels } => {
                let z = as_matrix(v(*logits))?.as_standard_layout().into_owned();
                let mut gz = Array2::zeros(z.raw_dim());
                for (((row, mut out), &y), &gi) in z.rows().into_iter().zip(gz.rows_mut()).zip(labels).zip(g.iter()) {
                    let r = row.as_slice().expect("contiguous");
                    let [p1, _, p3] = top3(r);
                    let m = max_other(r, y);
                    let num = r[y] - r[m];
                    let den = r[p1] - r[p3] + DLR_DENOMINATOR_FLOOR;
                    // loss = -num / den
                    out[y] -= gi / den;
                    out[m] += gi / den;
                    out[p1] += gi * num / (den * den);
                    out[p3] -= gi * num / (den * den);
                }
                self.accumulate(grads, *logits, gz.into_dyn());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn vals(g: &Graph, v: Var) -> Vec<f64> {
        g.value(v).iter().copied().collect()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let b = g.constant(Tensor::matrix(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap());
        let c = g.matmul(i, b).unwrap();
        assert_eq!(vals(&g, c), vec![3.0, 4.0, 5.0, 6.0]);

        let r = g.constant(Tensor::matrix(&[&[1.0, 2.0]]).unwrap());
        let col = g.constant(Tensor::matrix(&[&[3.0], &[4.0]]).unwrap());
        let p = g.matmul(r, col).unwrap();
        assert_eq!(vals(&g, p), vec![11.0]);
    }

    #[test]
    fn transposed_product_matches_explicit_transpose() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap());
        let b = g.constant(Tensor::matrix(&[&[1.0], &[0.0], &[-1.0]]).unwrap());
        let c = g.matmul_tn(a, b).unwrap();
        assert_eq!(vals(&g, c), vec![-4.0, -4.0]);
        let wrong = g.constant(Tensor::zeros(&[2, 1]));
        assert!(matches!(g.matmul_tn(a, wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn elementwise_definitions() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(vals(&g, r), vec![0.0, 0.0, 2.0]);
        let three = g.constant(Tensor::vector(&[3.0]));
        let s = g.square(three).unwrap();
        assert_eq!(vals(&g, s), vec![9.0]);
        let z = g.constant(Tensor::vector(&[0.0, 0.0]));
        let sm = g.softmax_rows(z).unwrap();
        assert_eq!(vals(&g, sm), vec![0.5, 0.5]);
    }

    #[test]
    fn broadcasting_is_limited_to_scalars() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, b).is_err());
        let s = g.constant(Tensor::scalar(1.5));
        let c = g.add(a, s).unwrap();
        assert_eq!(vals(&g, c), vec![1.5; 6]);
    }

    #[test]
    fn checked_mode_rejects_log_of_non_positive() {
        let mut g = Graph::checked();
        let x = g.leaf(Tensor::vector(&[1.0, 0.0]));
        assert!(g.log(x).is_err());
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 0.0]));
        assert!(g.log(x).is_ok());
    }

    #[test]
    fn checked_mode_rejects_overflow() {
        let mut g = Graph::checked();
        let x = g.leaf(Tensor::vector(&[1000.0]));
        assert!(matches!(g.exp(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[0.3, -2.0, 7.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).to_vec(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_2x() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]));
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).to_vec(), vec![2.0, 4.0]);
    }

    #[test]
    fn relu_subgradient_convention() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[-1.0, 3.0, 0.0]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).to_vec(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]));
        let unused = g.leaf(Tensor::zeros(&[2, 2]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Graph(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Graph(_))));
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::matrix(&[&[1.0, 2.0, 0.5], &[-3.0, 0.0, 3.0]]).unwrap());
        let ce = g.cross_entropy(z, &[1, 0]).unwrap();
        let sm = g.softmax_rows(z).unwrap();
        let p = g.value(sm).clone();
        let got = vals(&g, ce);
        assert_abs_diff_eq!(got[0], -p[[0, 1]].ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(got[1], -p[[1, 0]].ln(), epsilon = 1e-12);
    }

    #[test]
    fn dlr_direct_substitution() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(&[&[10.0, 0.0, -10.0]]).unwrap());
        let l = g.dlr(z, &[0]).unwrap();
        assert_abs_diff_eq!(vals(&g, l)[0], -0.5, epsilon = 1e-12);
    }

    #[test]
    fn dlr_needs_three_classes() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(&[&[1.0, 0.0]]).unwrap());
        assert!(g.dlr(z, &[0]).is_err());
    }

    #[test]
    fn add_bias_gradient_sums_rows() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[3, 2]));
        let b = g.leaf(Tensor::vector(&[1.0, -1.0]));
        let y = g.add_bias(x, b).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).to_vec(), vec![3.0, 3.0]);
        assert_eq!(grads.get(x).to_vec(), vec![1.0; 6]);
    }
}
