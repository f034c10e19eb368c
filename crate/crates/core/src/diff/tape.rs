use rand::Rng;

use super::{DiffError, Matrix};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise single-input operations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    /// Leaky rectifier with the given negative slope.
    LeakyRelu(f64),
    Log,
    Exp,
    Neg,
    Scale(f64),
    /// `ln(1 + e^x)`, evaluated without overflow.
    Softplus,
    Sqrt,
    Square,
    Recip,
}

/// Pointwise two-input operations on equally shaped operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Sum(Var),
    SumSq(Var),
    SumRows(Var),
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
    MulColumn(Var, Var),
    MulScalar(Var, Var),
    OuterAdd(Var, Var),
    AddRow(Var, Var),
    SegmentSum(Var, usize),
    Reshape(Var),
    Pick(Var, usize, usize),
    Dropout(Var, Matrix),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

/// Linear record of a forward computation, replayed in reverse by
/// [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so every operand index is
/// smaller than the index of the node consuming it.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node on a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`. Always present for parameter leaves (zeros when the
    /// loss does not depend on them); `None` for intermediates off the loss
    /// path.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        debug_assert!(!value.as_slice().iter().any(|x| x.is_nan()), "NaN produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].is_param = true;
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(DiffError::Shape {
                op: match op {
                    BinaryOp::Add => "add",
                    BinaryOp::Sub => "sub",
                    BinaryOp::Mul => "mul",
                },
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let value = match op {
            BinaryOp::Add => va.zip_map(vb, |x, y| x + y),
            BinaryOp::Sub => va.zip_map(vb, |x, y| x - y),
            BinaryOp::Mul => va.zip_map(vb, |x, y| x * y),
        };
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var, DiffError> {
        let x = self.value(a);
        let value = match op {
            UnaryOp::Sigmoid => x.map(sigmoid),
            UnaryOp::Tanh => x.map(f64::tanh),
            UnaryOp::LeakyRelu(slope) => x.map(|v| if v > 0.0 { v } else { slope * v }),
            UnaryOp::Log => {
                if let Some(bad) = x.as_slice().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(DiffError::Domain {
                        op: "log",
                        detail: format!("non-positive operand {bad}"),
                    });
                }
                x.map(f64::ln)
            }
            UnaryOp::Exp => x.map(f64::exp),
            UnaryOp::Neg => x.map(|v| -v),
            UnaryOp::Scale(c) => x.map(|v| c * v),
            UnaryOp::Softplus => x.map(softplus),
            UnaryOp::Sqrt => {
                if let Some(bad) = x.as_slice().iter().find(|&&v| v < 0.0 || v.is_nan()) {
                    return Err(DiffError::Domain {
                        op: "sqrt",
                        detail: format!("negative operand {bad}"),
                    });
                }
                x.map(f64::sqrt)
            }
            UnaryOp::Square => x.map(|v| v * v),
            UnaryOp::Recip => {
                if x.as_slice().contains(&0.0) {
                    return Err(DiffError::Domain {
                        op: "recip",
                        detail: "zero operand".into(),
                    });
                }
                x.map(|v| 1.0 / v)
            }
        };
        let rg = self.grad_of(&[a]);
        Ok(self.push(value, Op::Unary(op, a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a).expect("tanh is total")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(UnaryOp::LeakyRelu(slope), a).expect("leaky_relu is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a).expect("exp is total")
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a).expect("neg is total")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryOp::Scale(c), a).expect("scale is total")
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Softplus, a).expect("softplus is total")
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows_value(self.value(a), None).expect("unmasked rows are non-empty");
        let rg = self.grad_of(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise softmax restricted to entries where `mask` is `true`.
    /// Excluded entries come out as exactly zero.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var, DiffError> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(DiffError::Contract(format!(
                "softmax mask length {} does not match {}x{} input",
                mask.len(),
                x.rows(),
                x.cols()
            )));
        }
        let value = softmax_rows_value(x, Some(mask))?;
        let rg = self.grad_of(&[a]);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Sum of squared entries, as a 1x1 node.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum_sq());
        let rg = self.grad_of(&[a]);
        self.push(value, Op::SumSq(a), rg)
    }

    /// Column sums: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, &v) in out.as_mut_slice().iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let rg = self.grad_of(&[a]);
        self.push(out, Op::SumRows(a), rg)
    }

    /// Column means: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(DiffError::Contract("mean over zero rows".into()));
        }
        let n = x.rows() as f64;
        let mut out = Matrix::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, &v) in out.as_mut_slice().iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let out = out.scale(1.0 / n);
        let rg = self.grad_of(&[a]);
        Ok(self.push(out, Op::MeanRows(a), rg))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, DiffError> {
        let x = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= x.rows()) {
            return Err(DiffError::Contract(format!(
                "gather row {bad} out of range for {} rows",
                x.rows()
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * x.cols());
        for &r in rows {
            data.extend_from_slice(x.row(r));
        }
        let value = Matrix::new(rows.len(), x.cols(), data)?;
        let rg = self.grad_of(&[a]);
        Ok(self.push(value, Op::GatherRows(a, rows.to_vec()), rg))
    }

    /// Scales row `i` of `m` by `col[i]`, with `col` an `r x 1` column.
    pub fn mul_column(&mut self, m: Var, col: Var) -> Result<Var, DiffError> {
        let (x, c) = (self.value(m), self.value(col));
        if c.shape() != (x.rows(), 1) {
            return Err(DiffError::Shape {
                op: "mul_column",
                left: x.shape(),
                right: c.shape(),
            });
        }
        let mut out = x.clone();
        for r in 0..x.rows() {
            let s = c.get(r, 0);
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        let rg = self.grad_of(&[m, col]);
        Ok(self.push(out, Op::MulColumn(m, col), rg))
    }

    /// Multiplies every entry of `m` by the 1x1 node `s`.
    pub fn mul_scalar(&mut self, m: Var, s: Var) -> Result<Var, DiffError> {
        let (x, c) = (self.value(m), self.value(s));
        if c.shape() != (1, 1) {
            return Err(DiffError::Shape {
                op: "mul_scalar",
                left: x.shape(),
                right: c.shape(),
            });
        }
        let out = x.scale(c.item());
        let rg = self.grad_of(&[m, s]);
        Ok(self.push(out, Op::MulScalar(m, s), rg))
    }

    /// `out[i][j] = a[i] + b[j]` for columns `a` (m x 1) and `b` (n x 1).
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != 1 || y.cols() != 1 {
            return Err(DiffError::Shape {
                op: "outer_add",
                left: x.shape(),
                right: y.shape(),
            });
        }
        let mut out = Matrix::zeros(x.rows(), y.rows());
        for i in 0..x.rows() {
            for j in 0..y.rows() {
                out.set(i, j, x.get(i, 0) + y.get(j, 0));
            }
        }
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::OuterAdd(a, b), rg))
    }

    /// Adds the `1 x c` row `b` to every row of `m`.
    pub fn add_row(&mut self, m: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(m), self.value(b));
        if y.shape() != (1, x.cols()) {
            return Err(DiffError::Shape {
                op: "add_row",
                left: x.shape(),
                right: y.shape(),
            });
        }
        let mut out = x.clone();
        for r in 0..x.rows() {
            for (o, &v) in out.row_mut(r).iter_mut().zip(y.as_slice()) {
                *o += v;
            }
        }
        let rg = self.grad_of(&[m, b]);
        Ok(self.push(out, Op::AddRow(m, b), rg))
    }

    /// Sums consecutive blocks of `segment` rows: `(n*segment) x d -> n x d`.
    pub fn segment_sum(&mut self, a: Var, segment: usize) -> Result<Var, DiffError> {
        let x = self.value(a);
        if segment == 0 || !x.rows().is_multiple_of(segment) {
            return Err(DiffError::Contract(format!(
                "{} rows do not split into segments of {segment}",
                x.rows()
            )));
        }
        let n = x.rows() / segment;
        let mut out = Matrix::zeros(n, x.cols());
        for r in 0..x.rows() {
            let dst = r / segment;
            let src = x.row(r);
            for (o, &v) in out.row_mut(dst).iter_mut().zip(src) {
                *o += v;
            }
        }
        let rg = self.grad_of(&[a]);
        Ok(self.push(out, Op::SegmentSum(a, segment), rg))
    }

    /// Reinterprets the row-major data under a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, DiffError> {
        let x = self.value(a);
        if x.len() != rows * cols {
            return Err(DiffError::Shape {
                op: "reshape",
                left: x.shape(),
                right: (rows, cols),
            });
        }
        let value = Matrix::new(rows, cols, x.as_slice().to_vec())?;
        let rg = self.grad_of(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Single entry as a 1x1 node.
    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Result<Var, DiffError> {
        let x = self.value(a);
        if r >= x.rows() || c >= x.cols() {
            return Err(DiffError::Contract(format!(
                "pick ({r},{c}) outside {}x{}",
                x.rows(),
                x.cols()
            )));
        }
        let value = Matrix::scalar(x.get(r, c));
        let rg = self.grad_of(&[a]);
        Ok(self.push(value, Op::Pick(a, r, c), rg))
    }

    /// Inverted dropout. In eval mode (`train == false`) or with `rate == 0`
    /// this returns `a` unchanged without recording anything.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, train: bool, rng: &mut R) -> Var {
        if !train || rate <= 0.0 {
            return a;
        }
        let x = self.value(a);
        let keep = 1.0 - rate;
        let mask_data: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Matrix::new(x.rows(), x.cols(), mask_data).expect("mask matches input");
        let value = x.zip_map(&mask, |v, m| v * m);
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Dropout(a, mask), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(DiffError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        grads.resize(self.nodes.len(), None);
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.is_param && grads[idx].is_none() {
                let (r, c) = node.value.shape();
                grads[idx] = Some(Matrix::zeros(r, c));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    acc(*a, g.matmul(&vb.transpose()).expect("shapes checked"));
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, va.transpose().matmul(g).expect("shapes checked"));
                }
            }
            Op::Binary(op, a, b) => match op {
                BinaryOp::Add => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                BinaryOp::Sub => {
                    acc(*a, g.clone());
                    acc(*b, g.scale(-1.0));
                }
                BinaryOp::Mul => {
                    acc(*a, g.zip_map(self.value(*b), |d, y| d * y));
                    acc(*b, g.zip_map(self.value(*a), |d, x| d * x));
                }
            },
            Op::Unary(op, a) => {
                let x = self.value(*a);
                let y = &node.value;
                let local = match op {
                    UnaryOp::Sigmoid => y.map(|s| s * (1.0 - s)),
                    UnaryOp::Tanh => y.map(|t| 1.0 - t * t),
                    UnaryOp::LeakyRelu(slope) => {
                        let slope = *slope;
                        x.map(|v| if v > 0.0 { 1.0 } else { slope })
                    }
                    UnaryOp::Log => x.map(|v| 1.0 / v),
                    UnaryOp::Exp => y.clone(),
                    UnaryOp::Neg => Matrix::filled(x.rows(), x.cols(), -1.0),
                    UnaryOp::Scale(c) => Matrix::filled(x.rows(), x.cols(), *c),
                    UnaryOp::Softplus => x.map(sigmoid),
                    UnaryOp::Sqrt => y.map(|s| if s > 0.0 { 0.5 / s } else { 0.0 }),
                    UnaryOp::Square => x.map(|v| 2.0 * v),
                    UnaryOp::Recip => y.map(|r| -r * r),
                };
                acc(*a, g.zip_map(&local, |d, l| d * l));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (d, (&yv, &gv)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *d = yv * (gv - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::filled(r, c, g.item()));
            }
            Op::SumSq(a) => {
                let s = 2.0 * g.item();
                acc(*a, self.value(*a).scale(s));
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let factor = if matches!(node.op, Op::MeanRows(_)) {
                    1.0 / r as f64
                } else {
                    1.0
                };
                let mut dx = Matrix::zeros(r, c);
                for row in 0..r {
                    for (d, &gv) in dx.row_mut(row).iter_mut().zip(g.as_slice()) {
                        *d = gv * factor;
                    }
                }
                acc(*a, dx);
            }
            Op::GatherRows(a, rows) => {
                let (r, c) = self.shape(*a);
                let mut dx = Matrix::zeros(r, c);
                for (i, &src) in rows.iter().enumerate() {
                    for (d, &gv) in dx.row_mut(src).iter_mut().zip(g.row(i)) {
                        *d += gv;
                    }
                }
                acc(*a, dx);
            }
            Op::MulColumn(m, col) => {
                let (x, c) = (self.value(*m), self.value(*col));
                if self.nodes[m.0].requires_grad {
                    let mut dm = g.clone();
                    for r in 0..dm.rows() {
                        let s = c.get(r, 0);
                        dm.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    acc(*m, dm);
                }
                if self.nodes[col.0].requires_grad {
                    let dc: Vec<f64> = (0..x.rows())
                        .map(|r| x.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(*col, Matrix::column(&dc));
                }
            }
            Op::MulScalar(m, s) => {
                let (x, c) = (self.value(*m), self.value(*s));
                acc(*m, g.scale(c.item()));
                let ds: f64 = x.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
                acc(*s, Matrix::scalar(ds));
            }
            Op::OuterAdd(a, b) => {
                let mut da = vec![0.0; g.rows()];
                let mut db = vec![0.0; g.cols()];
                for (i, dai) in da.iter_mut().enumerate() {
                    for (j, dbj) in db.iter_mut().enumerate() {
                        let v = g.get(i, j);
                        *dai += v;
                        *dbj += v;
                    }
                }
                acc(*a, Matrix::column(&da));
                acc(*b, Matrix::column(&db));
            }
            Op::AddRow(m, b) => {
                acc(*m, g.clone());
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, &gv) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
                acc(*b, db);
            }
            Op::SegmentSum(a, segment) => {
                let (r, c) = self.shape(*a);
                let mut dx = Matrix::zeros(r, c);
                for row in 0..r {
                    dx.row_mut(row).copy_from_slice(g.row(row / segment));
                }
                acc(*a, dx);
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::new(r, c, g.as_slice().to_vec()).expect("same length"));
            }
            Op::Pick(a, r, c) => {
                let (rows, cols) = self.shape(*a);
                let mut dx = Matrix::zeros(rows, cols);
                dx.set(*r, *c, g.item());
                acc(*a, dx);
            }
            Op::Dropout(a, mask) => acc(*a, g.zip_map(mask, |d, m| d * m)),
        }
    }
}

fn softmax_rows_value(x: &Matrix, mask: Option<&[bool]>) -> Result<Matrix, DiffError> {
    let cols = x.cols();
    let mut out = Matrix::zeros(x.rows(), cols);
    for r in 0..x.rows() {
        let active = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
        let max = (0..cols)
            .filter(|&c| active(c))
            .map(|c| x.get(r, c))
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(DiffError::Contract(format!("softmax row {r} has no unmasked entries")));
        }
        let mut total = 0.0;
        for c in (0..cols).filter(|&c| active(c)) {
            let e = (x.get(r, c) - max).exp();
            out.set(r, c, e);
            total += e;
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}
