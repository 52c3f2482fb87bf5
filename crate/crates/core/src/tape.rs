//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Tape`] is built define-by-run: every primitive appends a node holding
//! its value and the operands it read. Nodes are therefore already in
//! topological order and [`Tape::backward`] walks them once, last to first.
//! Batches are rows; parameters are leaves.

use crate::error::{Error, Result};
use crate::tensor::{self, Matrix, Norm};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`; the layer product with weights stored out×in.
    MatMulNt(Var, Var),
    /// Adds a 1×c row to every row of the left operand.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Multiplies every entry by a 1×1 node.
    ScaleBy(Var, Var),
    MulConst(Var, f64),
    AddConst(Var),
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    Square(Var),
    Abs(Var),
    Recip(Var),
    InfNorm(Var),
    Sum(Var),
    Mean(Var),
    /// Row sums, B×c → B×1.
    SumCols(Var),
    /// Row Euclidean norms, B×c → B×1.
    RowL2Norm(Var),
    Softmax(Var),
    /// Mean negative log-likelihood of integer labels under row-wise softmax.
    CrossEntropy(Var, Vec<usize>, Vec<f64>),
    /// Row-wise projection onto the origin-centred ball of the given radius.
    ProjectBall(Var, Norm, f64),
    ConcatCols(Var, Var),
    /// Clamp every entry into `[lo, hi]`.
    Clamp(Var, f64, f64),
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    values: Vec<Matrix>,
    ops: Vec<Op>,
}

/// Gradients of a scalar loss with respect to every node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

fn same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix::from_vec(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.values[v.0]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// Records a leaf (parameter or input).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.leaf(Matrix::scalar(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::Dimension(format!(
                "matmul_nt {:?} by transpose of {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = tensor::matmul_nt(av, bv);
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::Dimension(format!(
                "add_row {:?} + {:?}",
                xv.shape(),
                rv.shape()
            )));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_slice_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    /// Affine layer `x · Wᵀ + b` for weights stored out×in.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul_nt(x, weight)?;
        self.add_row(h, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(Error::Dimension("scale_by expects a 1x1 factor".into()));
        }
        let f = self.value(s).item();
        let out = self.value(x).scale(f);
        Ok(self.push(out, Op::ScaleBy(x, s)))
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        self.push(out, Op::MulConst(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddConst(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(tensor::softplus);
        self.push(out, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / v);
        self.push(out, Op::Recip(x))
    }

    /// Induced ∞-norm of a matrix node, as a 1×1 node.
    pub fn inf_norm(&mut self, w: Var) -> Result<Var> {
        let n = tensor::mat_inf_norm(self.value(w))?;
        Ok(self.push(Matrix::scalar(n), Op::InfNorm(w)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.data().len() as f64;
        self.push(Matrix::scalar(m), Op::Mean(x))
    }

    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let sums = (0..v.rows()).map(|r| v.row_slice(r).iter().sum()).collect();
        let out = Matrix::from_vec(v.rows(), 1, sums);
        self.push(out, Op::SumCols(x))
    }

    pub fn row_l2_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let norms = (0..v.rows())
            .map(|r| tensor::vector_norm(v.row_slice(r), Norm::L2))
            .collect();
        let out = Matrix::from_vec(v.rows(), 1, norms);
        self.push(out, Op::RowL2Norm(x))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut data = Vec::with_capacity(v.data().len());
        for r in 0..v.rows() {
            data.extend(tensor::softmax_slice(v.row_slice(r)));
        }
        let out = Matrix::from_vec(v.rows(), v.cols(), data);
        self.push(out, Op::Softmax(x))
    }

    /// Mean cross-entropy of `labels` under the row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.weighted_cross_entropy(logits, labels, &vec![1.0; labels.len()])
    }

    /// `(1/N) Σ_r w_r · CE_r`; with advantages as weights this is the
    /// negated policy-gradient surrogate.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let v = self.value(logits);
        if labels.len() != v.rows() || weights.len() != v.rows() {
            return Err(Error::Dimension(format!(
                "{} labels and {} weights for {} rows",
                labels.len(),
                weights.len(),
                v.rows()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= v.cols()) {
            return Err(Error::Contract(format!("label {bad} out of range {}", v.cols())));
        }
        let mut total = 0.0;
        for (r, (&label, w)) in labels.iter().zip(weights).enumerate() {
            let row = v.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += w * (lse - row[label]);
        }
        let out = Matrix::scalar(total / labels.len() as f64);
        Ok(self.push(out, Op::CrossEntropy(logits, labels.to_vec(), weights.to_vec())))
    }

    /// Projects each row onto `{x : ‖x‖ ≤ radius}` (ℓ∞ clamp or ℓ2 radial scaling).
    pub fn project_ball(&mut self, x: Var, norm: Norm, radius: f64) -> Result<Var> {
        if norm == Norm::L1 {
            return Err(Error::Contract("ℓ1 ball projection is not supported".into()));
        }
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            project_onto_ball(out.row_slice_mut(r), norm, radius);
        }
        Ok(self.push(out, Op::ProjectBall(x, norm, radius)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::Dimension("concat_cols row mismatch".into()));
        }
        let cols = av.cols() + bv.cols();
        let mut data = Vec::with_capacity(av.rows() * cols);
        for r in 0..av.rows() {
            data.extend_from_slice(av.row_slice(r));
            data.extend_from_slice(bv.row_slice(r));
        }
        let out = Matrix::from_vec(av.rows(), cols, data);
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(x, lo, hi))
    }

    /// Back-propagates from a 1×1 `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let value = &self.values[i];
            match &self.ops[i] {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads[a.0], tensor::matmul_nt(&g, bv));
                    accumulate(&mut grads[b.0], tensor::matmul_tn(av, &g));
                }
                Op::MatMulNt(a, b) => {
                    // C = A Bᵀ: dA = G B, dB = Gᵀ A
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads[a.0], tensor::matmul_nn(&g, bv));
                    accumulate(&mut grads[b.0], tensor::matmul_tn(&g, av));
                }
                Op::AddRow(x, row) => {
                    let mut col_sums = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (s, v) in col_sums.iter_mut().zip(g.row_slice(r)) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads[row.0], Matrix::from_vec(1, g.cols(), col_sums));
                    accumulate(&mut grads[x.0], g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], g.scale(-1.0));
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads[a.0], zip_map(&g, bv, |x, y| x * y));
                    accumulate(&mut grads[b.0], zip_map(&g, av, |x, y| x * y));
                }
                Op::ScaleBy(x, s) => {
                    let xv = self.value(*x);
                    let f = self.value(*s).item();
                    let ds: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    accumulate(&mut grads[s.0], Matrix::scalar(ds));
                    accumulate(&mut grads[x.0], g.scale(f));
                }
                Op::MulConst(x, c) => accumulate(&mut grads[x.0], g.scale(*c)),
                Op::AddConst(x) => accumulate(&mut grads[x.0], g.clone()),
                Op::Relu(x) => {
                    // subgradient 0 at the kink
                    let xv = self.value(*x);
                    let d = zip_map(&g, xv, |gv, v| if v > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads[x.0], d);
                }
                Op::Tanh(x) => {
                    let d = zip_map(&g, value, |gv, t| gv * (1.0 - t * t));
                    accumulate(&mut grads[x.0], d);
                }
                Op::Softplus(x) => {
                    let xv = self.value(*x);
                    let d = zip_map(&g, xv, |gv, v| gv * tensor::sigmoid(v));
                    accumulate(&mut grads[x.0], d);
                }
                Op::Square(x) => {
                    let xv = self.value(*x);
                    let d = zip_map(&g, xv, |gv, v| 2.0 * gv * v);
                    accumulate(&mut grads[x.0], d);
                }
                Op::Abs(x) => {
                    let xv = self.value(*x);
                    let d = zip_map(&g, xv, |gv, v| {
                        if v > 0.0 {
                            gv
                        } else if v < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads[x.0], d);
                }
                Op::Recip(x) => {
                    let d = zip_map(&g, value, |gv, r| -gv * r * r);
                    accumulate(&mut grads[x.0], d);
                }
                Op::InfNorm(w) => {
                    // Subgradient through the (first) maximizing row.
                    let wv = self.value(*w);
                    let row = wv.inf_norm_argmax_row();
                    let mut d = Matrix::zeros(wv.rows(), wv.cols());
                    let gs = g.item();
                    for c in 0..wv.cols() {
                        let v = wv.get(row, c);
                        let sign = if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        d.set(row, c, gs * sign);
                    }
                    accumulate(&mut grads[w.0], d);
                }
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(&mut grads[x.0], Matrix::filled(r, c, g.item()));
                }
                Op::Mean(x) => {
                    let (r, c) = self.value(*x).shape();
                    let n = (r * c) as f64;
                    accumulate(&mut grads[x.0], Matrix::filled(r, c, g.item() / n));
                }
                Op::SumCols(x) => {
                    let (r, c) = self.value(*x).shape();
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        let gv = g.get(i, 0);
                        d.row_slice_mut(i).iter_mut().for_each(|v| *v = gv);
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::RowL2Norm(x) => {
                    let xv = self.value(*x);
                    let mut d = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let n = value.get(r, 0);
                        if n == 0.0 {
                            continue;
                        }
                        let scale = g.get(r, 0) / n;
                        for (o, v) in d.row_slice_mut(r).iter_mut().zip(xv.row_slice(r)) {
                            *o = scale * v;
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::Softmax(x) => {
                    // dx = p ⊙ (g − ⟨g, p⟩) per row
                    let mut d = Matrix::zeros(value.rows(), value.cols());
                    for r in 0..value.rows() {
                        let p = value.row_slice(r);
                        let gr = g.row_slice(r);
                        let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, pv), gv) in d.row_slice_mut(r).iter_mut().zip(p).zip(gr) {
                            *o = pv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::CrossEntropy(logits, labels, weights) => {
                    let lv = self.value(*logits);
                    let scale = g.item() / labels.len() as f64;
                    let mut d = Matrix::zeros(lv.rows(), lv.cols());
                    for (r, (&label, w)) in labels.iter().zip(weights).enumerate() {
                        let p = tensor::softmax_slice(lv.row_slice(r));
                        let out = d.row_slice_mut(r);
                        for (j, pv) in p.into_iter().enumerate() {
                            out[j] = scale * w * (pv - if j == label { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(&mut grads[logits.0], d);
                }
                Op::ProjectBall(x, norm, radius) => {
                    let xv = self.value(*x);
                    let mut d = g.clone();
                    for r in 0..xv.rows() {
                        let row = xv.row_slice(r);
                        let gr = d.row_slice_mut(r);
                        match norm {
                            Norm::Linf => {
                                for (gv, v) in gr.iter_mut().zip(row) {
                                    if v.abs() > *radius {
                                        *gv = 0.0;
                                    }
                                }
                            }
                            Norm::L2 => {
                                let n = tensor::vector_norm(row, Norm::L2);
                                if n > *radius {
                                    // y = r x / ‖x‖: J = (r/‖x‖)(I − x xᵀ/‖x‖²)
                                    let dot: f64 = gr.iter().zip(row).map(|(a, b)| a * b).sum();
                                    for (gv, v) in gr.iter_mut().zip(row) {
                                        *gv = radius / n * (*gv - dot * v / (n * n));
                                    }
                                }
                            }
                            Norm::L1 => unreachable!("rejected at record time"),
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.value(*a).cols();
                    let bc = self.value(*b).cols();
                    let mut da = Matrix::zeros(g.rows(), ac);
                    let mut db = Matrix::zeros(g.rows(), bc);
                    for r in 0..g.rows() {
                        let gr = g.row_slice(r);
                        da.row_slice_mut(r).copy_from_slice(&gr[..ac]);
                        db.row_slice_mut(r).copy_from_slice(&gr[ac..]);
                    }
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Clamp(x, lo, hi) => {
                    let xv = self.value(*x);
                    let d = zip_map(&g, xv, |gv, v| if v < *lo || v > *hi { 0.0 } else { gv });
                    accumulate(&mut grads[x.0], d);
                }
            }
            grads[i] = Some(g);
        }

        let shapes = self.values.iter().map(Matrix::shape).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// In-place projection of `x` onto the origin-centred ball of `radius`.
pub fn project_onto_ball(x: &mut [f64], norm: Norm, radius: f64) {
    match norm {
        Norm::Linf => x.iter_mut().for_each(|v| *v = v.clamp(-radius, radius)),
        Norm::L2 => {
            let n = tensor::vector_norm(x, Norm::L2);
            if n > radius {
                let s = if n > 0.0 { radius / n } else { 0.0 };
                x.iter_mut().for_each(|v| *v *= s);
            }
        }
        Norm::L1 => {
            // Not used by any budget; fall back to the ℓ∞-inscribed scaling.
            let n = tensor::vector_norm(x, Norm::L1);
            if n > radius {
                let s = radius / n;
                x.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of `build` against the tape gradient for every
    /// entry of every input.
    fn grad_check(inputs: Vec<Matrix>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();

        let eval = |inputs: &[Matrix]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone())).collect();
            let l = build(&mut t, &vs);
            t.value(l).item()
        };
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[k]);
            for idx in 0..input.data().len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err <= 1e-4, "input {k}[{idx}]: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::filled(2, 2, 3.0));
        let c = tape.constant_scalar(4.0);
        let grads = tape.backward(c).unwrap();
        assert!(grads.wrt(w).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn squared_residual_gradient_is_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_matrix(&mut rng, 3, 4);
        let x = random_matrix(&mut rng, 4, 1);
        let y = random_matrix(&mut rng, 3, 1);
        let mut tape = Tape::new();
        let (wv, xv, yv) = (tape.leaf(w.clone()), tape.leaf(x.clone()), tape.leaf(y.clone()));
        let wx = tape.matmul(wv, xv).unwrap();
        let r = tape.sub(wx, yv).unwrap();
        let sq = tape.square(r);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap().wrt(wv);

        // 2 (Wx − y) xᵀ
        let resid: Vec<f64> = w.matvec(x.data()).unwrap().iter().zip(y.data()).map(|(a, b)| a - b).collect();
        for i in 0..3 {
            for j in 0..4 {
                let expected = 2.0 * resid[i] * x.data()[j];
                assert!((g.get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_ops_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 3, 4).map(|v| v + 2.5);
        grad_check(vec![a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let d = t.sub(s, v[1]).unwrap();
            let m = t.mul(d, v[1]).unwrap();
            let th = t.tanh(m);
            let sp = t.softplus(th);
            let r = t.recip(v[1]);
            let q = t.mul(sp, r).unwrap();
            let sq = t.square(q);
            let k = t.mul_const(sq, 0.7);
            let k = t.add_const(k, 1.0);
            t.mean(k)
        });
    }

    #[test]
    fn relu_abs_clamp_pass_gradient_check_away_from_kinks() {
        let a = Matrix::new(2, 3, vec![0.3, -0.7, 1.2, -0.1, 0.55, -2.0]).unwrap();
        grad_check(vec![a], |t, v| {
            let r = t.relu(v[0]);
            let ab = t.abs(v[0]);
            let c = t.clamp(v[0], -0.5, 0.5);
            let s = t.add(r, ab).unwrap();
            let s = t.add(s, c).unwrap();
            let sq = t.square(s);
            t.sum(sq)
        });
    }

    #[test]
    fn linear_softmax_cross_entropy_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 5, 3);
        let w = random_matrix(&mut rng, 4, 3);
        let b = random_matrix(&mut rng, 1, 4);
        grad_check(vec![x.clone(), w.clone(), b.clone()], |t, v| {
            let z = t.linear(v[0], v[1], v[2]).unwrap();
            t.cross_entropy(z, &[0, 3, 1, 2, 3]).unwrap()
        });
        grad_check(vec![x.clone(), w.clone(), b.clone()], |t, v| {
            let z = t.linear(v[0], v[1], v[2]).unwrap();
            t.weighted_cross_entropy(z, &[1, 1, 0, 2, 3], &[0.5, -1.2, 2.0, 0.0, 0.3]).unwrap()
        });
        grad_check(vec![x, w, b], |t, v| {
            let z = t.linear(v[0], v[1], v[2]).unwrap();
            let p = t.softmax(z);
            let weights = t.leaf(Matrix::new(5, 4, (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
            let prod = t.mul(p, weights).unwrap();
            let rows = t.sum_cols(prod);
            let sq = t.square(rows);
            t.sum(sq)
        });
    }

    #[test]
    fn norm_ops_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_matrix(&mut rng, 3, 3);
        let c = Matrix::scalar(0.4);
        grad_check(vec![w, c], |t, v| {
            // softplus(c) · W / ‖W‖∞, the weight-normalization path
            let n = t.inf_norm(v[0]).unwrap();
            let inv = t.recip(n);
            let sp = t.softplus(v[1]);
            let f = t.mul(sp, inv).unwrap();
            let wh = t.scale_by(v[0], f).unwrap();
            let sq = t.square(wh);
            let rn = t.row_l2_norm(sq);
            t.sum(rn)
        });
    }

    #[test]
    fn projection_and_concat_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 4, 3).scale(2.0);
        let y = random_matrix(&mut rng, 4, 2);
        for norm in [Norm::L2, Norm::Linf] {
            grad_check(vec![x.clone(), y.clone()], move |t, v| {
                let p = t.project_ball(v[0], norm, 0.9).unwrap();
                let cat = t.concat_cols(p, v[1]).unwrap();
                let w = t.leaf(Matrix::new(1, 5, vec![0.3, -1.0, 0.5, 2.0, -0.4]).unwrap());
                let z = t.matmul_nt(cat, w).unwrap();
                let sq = t.square(z);
                t.mean(sq)
            });
        }
    }

    #[test]
    fn matmul_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_matrix(&mut rng, 2, 3);
        let b = random_matrix(&mut rng, 3, 4);
        grad_check(vec![a, b], |t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            let sq = t.square(c);
            t.sum(sq)
        });
    }

    #[test]
    fn shared_nodes_accumulate() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.wrt(x).item(), 7.0);
    }

    #[test]
    fn ball_projection_keeps_points_inside() {
        let mut v = vec![3.0, -4.0];
        project_onto_ball(&mut v, Norm::L2, 1.0);
        assert!((tensor::vector_norm(&v, Norm::L2) - 1.0).abs() < 1e-15);
        let mut v = vec![0.5, -4.0];
        project_onto_ball(&mut v, Norm::Linf, 1.0);
        assert_eq!(v, vec![0.5, -1.0]);
        let mut v = vec![0.1, 0.2];
        project_onto_ball(&mut v, Norm::L2, 1.0);
        assert_eq!(v, vec![0.1, 0.2]);
    }
}
