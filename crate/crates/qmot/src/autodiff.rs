//! Minimal reverse-mode autodiff over `f64` matrices.
//!
//! A [`Tape`] records matrix-valued operations as they execute; calling
//! [`Tape::backward`] on a `1x1` loss node walks the record in reverse and
//! accumulates gradients for every node. All model forward passes in this
//! crate are written against the tape; inference simply never calls
//! `backward`.

use ndarray::{concatenate, s, Array2, Axis};
use std::rc::Rc;

/// Handle to a node on the tape. Carries its shape so builders can
/// shape-check without consulting the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
    pub rows: usize,
    pub cols: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Min(usize, usize),
    Max(usize, usize),
    MatMul(usize, usize),
    /// `a @ b^T`; avoids materializing transposes in attention.
    MatMulTransB(usize, usize),
    /// Broadcast add of a `1 x d` row to every row of an `n x d` matrix.
    AddRow(usize, usize),
    /// Broadcast multiply by a `1 x d` row.
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Relu(usize),
    Abs(usize),
    Ln(usize),
    /// Row-wise softmax restricted to `allow[i][j] = true` entries;
    /// blocked entries are exactly zero in the output. Backward needs only
    /// the output values (blocked entries carry exact zeros).
    MaskedSoftmaxRows(usize),
    /// Row-wise `(x - mean) / sqrt(var + eps)`.
    NormalizeRows(usize, f64),
    SumAll(usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize, usize),
    /// `out[i, :] = in[index[i], :]`; indices may repeat.
    GatherRows(usize, Rc<Vec<usize>>),
    /// `out[i, idx[i]]` as an `n x 1` column.
    SelectPerRow(usize, Rc<Vec<usize>>),
    /// Repeat each column `group_size` times: `n x g -> n x g*group_size`.
    RepeatColsGrouped(usize, usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradient record produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; zero matrix if the node does not
    /// influence the loss.
    pub fn of(&self, var: Var) -> Array2<f64> {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Array2::zeros((var.rows, var.cols)))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.id].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        assert_eq!((v.rows, v.cols), (1, 1), "scalar node expected");
        self.nodes[v.id].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let (rows, cols) = value.dim();
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        Var { id, rows, cols }
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.leaf(Array2::zeros((rows, cols)))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    fn same_shape(a: Var, b: Var) {
        assert_eq!(
            (a.rows, a.cols),
            (b.rows, b.cols),
            "elementwise op on mismatched shapes"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        Self::same_shape(a, b);
        let v = &self.nodes[a.id].value + &self.nodes[b.id].value;
        self.push(v, Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        Self::same_shape(a, b);
        let v = &self.nodes[a.id].value - &self.nodes[b.id].value;
        self.push(v, Op::Sub(a.id, b.id))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        Self::same_shape(a, b);
        let v = &self.nodes[a.id].value * &self.nodes[b.id].value;
        self.push(v, Op::Mul(a.id, b.id))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        Self::same_shape(a, b);
        let v = &self.nodes[a.id].value / &self.nodes[b.id].value;
        self.push(v, Op::Div(a.id, b.id))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        Self::same_shape(a, b);
        let mut v = self.nodes[a.id].value.clone();
        v.zip_mut_with(&self.nodes[b.id].value, |x, &y| *x = x.min(y));
        self.push(v, Op::Min(a.id, b.id))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        Self::same_shape(a, b);
        let mut v = self.nodes[a.id].value.clone();
        v.zip_mut_with(&self.nodes[b.id].value, |x, &y| *x = x.max(y));
        self.push(v, Op::Max(a.id, b.id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.cols, b.rows, "matmul inner dimensions differ");
        let v = self.nodes[a.id].value.dot(&self.nodes[b.id].value);
        self.push(v, Op::MatMul(a.id, b.id))
    }

    pub fn matmul_transb(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.cols, b.cols, "matmul_transb inner dimensions differ");
        let v = self.nodes[a.id].value.dot(&self.nodes[b.id].value.t());
        self.push(v, Op::MatMulTransB(a.id, b.id))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(row.rows, 1);
        assert_eq!(a.cols, row.cols);
        let v = &self.nodes[a.id].value + &self.nodes[row.id].value;
        self.push(v, Op::AddRow(a.id, row.id))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(row.rows, 1);
        assert_eq!(a.cols, row.cols);
        let v = &self.nodes[a.id].value * &self.nodes[row.id].value;
        self.push(v, Op::MulRow(a.id, row.id))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.id].value * c;
        self.push(v, Op::Scale(a.id, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.id].value + c;
        self.push(v, Op::AddScalar(a.id))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.id].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a.id))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.id].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a.id))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.id].value.mapv(f64::abs);
        self.push(v, Op::Abs(a.id))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.id].value.mapv(f64::ln);
        self.push(v, Op::Ln(a.id))
    }

    pub fn masked_softmax_rows(&mut self, a: Var, allow: Rc<Array2<bool>>) -> Var {
        assert_eq!((a.rows, a.cols), allow.dim(), "mask shape mismatch");
        let x = &self.nodes[a.id].value;
        let mut v = Array2::zeros((a.rows, a.cols));
        for i in 0..a.rows {
            let mut m = f64::NEG_INFINITY;
            for j in 0..a.cols {
                if allow[[i, j]] {
                    m = m.max(x[[i, j]]);
                }
            }
            assert!(
                m.is_finite(),
                "masked softmax row {i} has no allowed entries"
            );
            let mut z = 0.0;
            for j in 0..a.cols {
                if allow[[i, j]] {
                    let e = (x[[i, j]] - m).exp();
                    v[[i, j]] = e;
                    z += e;
                }
            }
            for j in 0..a.cols {
                v[[i, j]] /= z;
            }
        }
        self.push(v, Op::MaskedSoftmaxRows(a.id))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let allow = Rc::new(Array2::from_elem((a.rows, a.cols), true));
        self.masked_softmax_rows(a, allow)
    }

    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = &self.nodes[a.id].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let denom = (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) / denom);
        }
        self.push(v, Op::NormalizeRows(a.id, eps))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.nodes[a.id].value.sum());
        self.push(v, Op::SumAll(a.id))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let s = self.sum_all(a);
        self.scale(s, 1.0 / (a.rows * a.cols) as f64)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.id].value.view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        self.push(v, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= a.rows);
        let v = self.nodes[a.id]
            .value
            .slice(s![start..start + len, ..])
            .to_owned();
        self.push(v, Op::SliceRows(a.id, start, len))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.id].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= a.cols);
        let v = self.nodes[a.id]
            .value
            .slice(s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols(a.id, start, len))
    }

    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Var {
        let mut v = Array2::zeros((index.len(), a.cols));
        for (i, &src) in index.iter().enumerate() {
            assert!(src < a.rows, "gather_rows index out of range");
            v.row_mut(i).assign(&self.nodes[a.id].value.row(src));
        }
        self.push(v, Op::GatherRows(a.id, index))
    }

    pub fn select_per_row(&mut self, a: Var, index: Rc<Vec<usize>>) -> Var {
        assert_eq!(index.len(), a.rows);
        let mut v = Array2::zeros((a.rows, 1));
        for (i, &j) in index.iter().enumerate() {
            assert!(j < a.cols, "select_per_row index out of range");
            v[[i, 0]] = self.nodes[a.id].value[[i, j]];
        }
        self.push(v, Op::SelectPerRow(a.id, index))
    }

    pub fn repeat_cols_grouped(&mut self, a: Var, group_size: usize) -> Var {
        let mut v = Array2::zeros((a.rows, a.cols * group_size));
        for i in 0..a.rows {
            for g in 0..a.cols {
                for k in 0..group_size {
                    v[[i, g * group_size + k]] = self.nodes[a.id].value[[i, g]];
                }
            }
        }
        self.push(v, Op::RepeatColsGrouped(a.id, group_size))
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!((loss.rows, loss.cols), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(&mut grads, node, &g);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, grads: &mut Vec<Option<Array2<f64>>>, node: &Node, g: &Array2<f64>) {
        match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum(grads, *a, g.clone());
                    self.accum(grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    self.accum(grads, *a, g.clone());
                    self.accum(grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    self.accum(grads, *a, g * &self.nodes[*b].value);
                    self.accum(grads, *b, g * &self.nodes[*a].value);
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[*b].value;
                    self.accum(grads, *a, g / bv);
                    let ga = -(g * &self.nodes[*a].value) / (bv * bv);
                    self.accum(grads, *b, ga);
                }
                Op::Min(a, b) | Op::Max(a, b) => {
                    let is_min = matches!(node.op, Op::Min(..));
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let mut ga = Array2::zeros(g.dim());
                    let mut gb = Array2::zeros(g.dim());
                    for ((idx, &gv), (&x, &y)) in
                        g.indexed_iter().zip(av.iter().zip(bv.iter()))
                    {
                        // Ties route to the first operand.
                        let a_wins = if is_min { x <= y } else { x >= y };
                        if a_wins {
                            ga[idx] = gv;
                        } else {
                            gb[idx] = gv;
                        }
                    }
                    self.accum(grads, *a, ga);
                    self.accum(grads, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value.t());
                    let gb = self.nodes[*a].value.t().dot(g);
                    self.accum(grads, *a, ga);
                    self.accum(grads, *b, gb);
                }
                Op::MatMulTransB(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value);
                    let gb = g.t().dot(&self.nodes[*a].value);
                    self.accum(grads, *a, ga);
                    self.accum(grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    self.accum(grads, *a, g.clone());
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accum(grads, *row, gr);
                }
                Op::MulRow(a, row) => {
                    self.accum(grads, *a, g * &self.nodes[*row].value);
                    let gr = (g * &self.nodes[*a].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    self.accum(grads, *row, gr);
                }
                Op::Scale(a, c) => self.accum(grads, *a, g * *c),
                Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    self.accum(grads, *a, g * y * (1.0 - y));
                }
                Op::Relu(a) => {
                    let mask = self.nodes[*a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    self.accum(grads, *a, g * &mask);
                }
                Op::Abs(a) => {
                    let sign = self.nodes[*a].value.mapv(f64::signum);
                    self.accum(grads, *a, g * &sign);
                }
                Op::Ln(a) => {
                    self.accum(grads, *a, g / &self.nodes[*a].value);
                }
                Op::MaskedSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(g.dim());
                    for i in 0..g.nrows() {
                        let dot: f64 = (0..g.ncols()).map(|j| g[[i, j]] * y[[i, j]]).sum();
                        for j in 0..g.ncols() {
                            ga[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    self.accum(grads, *a, ga);
                }
                Op::NormalizeRows(a, eps) => {
                    let x = &self.nodes[*a].value;
                    let y = &node.value;
                    let n = x.ncols() as f64;
                    let mut ga = Array2::zeros(g.dim());
                    for i in 0..x.nrows() {
                        let mean = x.row(i).sum() / n;
                        let var = x.row(i).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let denom = (var + eps).sqrt();
                        let g_mean: f64 = g.row(i).sum() / n;
                        let gy_mean: f64 =
                            (0..x.ncols()).map(|j| g[[i, j]] * y[[i, j]]).sum::<f64>() / n;
                        for j in 0..x.ncols() {
                            ga[[i, j]] = (g[[i, j]] - g_mean - y[[i, j]] * gy_mean) / denom;
                        }
                    }
                    self.accum(grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let src = Var {
                        id: *a,
                        rows: self.nodes[*a].value.nrows(),
                        cols: self.nodes[*a].value.ncols(),
                    };
                    let ga = Array2::from_elem((src.rows, src.cols), g[[0, 0]]);
                    self.accum(grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.nodes[p].value.nrows();
                        let gp = g.slice(s![start..start + rows, ..]).to_owned();
                        self.accum(grads, p, gp);
                        start += rows;
                    }
                }
                Op::SliceRows(a, start, len) => {
                    let src = &self.nodes[*a].value;
                    let mut ga = Array2::zeros(src.dim());
                    ga.slice_mut(s![*start..*start + *len, ..]).assign(&g);
                    self.accum(grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let cols = self.nodes[p].value.ncols();
                        let gp = g.slice(s![.., start..start + cols]).to_owned();
                        self.accum(grads, p, gp);
                        start += cols;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let src = &self.nodes[*a].value;
                    let mut ga = Array2::zeros(src.dim());
                    ga.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    self.accum(grads, *a, ga);
                }
                Op::GatherRows(a, index) => {
                    let src = &self.nodes[*a].value;
                    let mut ga = Array2::zeros(src.dim());
                    for (i, &dst) in index.iter().enumerate() {
                        let mut row = ga.row_mut(dst);
                        row += &g.row(i);
                    }
                    self.accum(grads, *a, ga);
                }
                Op::SelectPerRow(a, index) => {
                    let src = &self.nodes[*a].value;
                    let mut ga = Array2::zeros(src.dim());
                    for (i, &j) in index.iter().enumerate() {
                        ga[[i, j]] = g[[i, 0]];
                    }
                    self.accum(grads, *a, ga);
                }
                Op::RepeatColsGrouped(a, gs) => {
                    let src = &self.nodes[*a].value;
                    let mut ga = Array2::zeros(src.dim());
                    for i in 0..src.nrows() {
                        for grp in 0..src.ncols() {
                            let mut sum = 0.0;
                            for k in 0..*gs {
                                sum += g[[i, grp * gs + k]];
                            }
                            ga[[i, grp]] = sum;
                        }
                    }
                    self.accum(grads, *a, ga);
                }
            }
    }

    fn accum(&self, grads: &mut [Option<Array2<f64>>], id: usize, g: Array2<f64>) {
        match &mut grads[id] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences on every element of every input leaf.
    fn check_grad<F>(inputs: &[Array2<f64>], f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eps = 1e-6;
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss);

        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.of(vars[k]);
            for ((i, j), _) in input.indexed_iter() {
                let eval = |delta: f64| {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(m, x)| {
                            let mut x = x.clone();
                            if m == k {
                                x[[i, j]] += delta;
                            }
                            tape.leaf(x)
                        })
                        .collect();
                    let loss = f(&mut tape, &vars);
                    tape.scalar_value(loss)
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic[[i, j]];
                let denom = a.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (a - fd).abs() / denom < 1e-5,
                    "input {k} [{i},{j}]: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    fn a2() -> Array2<f64> {
        array![[0.3, -1.2, 0.7], [1.5, 0.2, -0.4]]
    }

    fn b2() -> Array2<f64> {
        array![[0.9, 0.1, -0.6], [0.4, -1.1, 0.8]]
    }

    #[test]
    fn grad_elementwise_ops() {
        check_grad(&[a2(), b2()], |t, v| {
            let x = t.mul(v[0], v[1]);
            let y = t.sub(x, v[0]);
            let z = t.add(y, v[1]);
            t.sum_all(z)
        });
    }

    #[test]
    fn grad_div_min_max_abs() {
        check_grad(&[a2(), b2()], |t, v| {
            let shifted = t.add_scalar(v[1], 3.0);
            let d = t.div(v[0], shifted);
            let m = t.minimum(d, v[0]);
            let mx = t.maximum(m, v[1]);
            let ab = t.abs(mx);
            t.sum_all(ab)
        });
    }

    #[test]
    fn grad_matmul_both_orientations() {
        let w = array![[0.2, -0.3], [0.5, 0.7], [-0.1, 0.4]];
        check_grad(&[a2(), w], |t, v| {
            let y = t.matmul(v[0], v[1]);
            t.sum_all(y)
        });
        check_grad(&[a2(), b2()], |t, v| {
            let y = t.matmul_transb(v[0], v[1]);
            let y2 = t.mul(y, y);
            t.sum_all(y2)
        });
    }

    #[test]
    fn grad_broadcast_rows() {
        let row = array![[0.3, -0.8, 1.1]];
        check_grad(&[a2(), row], |t, v| {
            let x = t.add_row(v[0], v[1]);
            let y = t.mul_row(x, v[1]);
            t.sum_all(y)
        });
    }

    #[test]
    fn grad_nonlinearities() {
        check_grad(&[a2()], |t, v| {
            let s = t.sigmoid(v[0]);
            let r = t.relu(v[0]);
            let sum = t.add(s, r);
            let pos = t.add_scalar(sum, 2.0);
            let l = t.ln(pos);
            t.sum_all(l)
        });
    }

    #[test]
    fn grad_masked_softmax() {
        let allow = Rc::new(array![
            [true, false, true],
            [true, true, true]
        ]);
        check_grad(&[a2()], move |t, v| {
            let y = t.masked_softmax_rows(v[0], allow.clone());
            let y2 = t.mul(y, y);
            t.sum_all(y2)
        });
    }

    #[test]
    fn masked_softmax_blocked_entries_are_zero_and_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.leaf(a2());
        let allow = Rc::new(array![[true, false, true], [false, true, false]]);
        let y = t.masked_softmax_rows(x, allow);
        let v = t.value(y);
        assert_eq!(v[[0, 1]], 0.0);
        assert_eq!(v[[1, 0]], 0.0);
        assert_eq!(v[[1, 2]], 0.0);
        assert!((v.row(0).sum() - 1.0).abs() < 1e-12);
        assert_eq!(v[[1, 1]], 1.0);
    }

    #[test]
    fn grad_normalize_rows() {
        check_grad(&[a2()], |t, v| {
            let y = t.normalize_rows(v[0], 1e-5);
            let y2 = t.mul(y, y);
            let y3 = t.mul(y2, y);
            t.sum_all(y3)
        });
    }

    #[test]
    fn grad_structural_ops() {
        check_grad(&[a2(), b2()], |t, v| {
            let c = t.concat_rows(&[v[0], v[1]]);
            let s = t.slice_rows(c, 1, 2);
            let cc = t.concat_cols(&[s, s]);
            let sc = t.slice_cols(cc, 2, 3);
            let g = t.gather_rows(sc, Rc::new(vec![0, 0, 1]));
            let sel = t.select_per_row(g, Rc::new(vec![2, 0, 1]));
            t.sum_all(sel)
        });
    }

    #[test]
    fn grad_repeat_cols_grouped() {
        let z = array![[0.2, 0.8], [0.4, 0.1]];
        let w = Array2::from_shape_fn((2, 6), |(i, j)| 0.1 + 0.2 * i as f64 - 0.05 * j as f64);
        check_grad(&[z, w], |t, v| {
            let big = t.repeat_cols_grouped(v[0], 3);
            let prod = t.mul(big, v[1]);
            t.sum_all(prod)
        });
    }

    #[test]
    fn sum_and_mean() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let s = t.sum_all(x);
        let m = t.mean_all(x);
        assert_eq!(t.scalar_value(s), 10.0);
        assert_eq!(t.scalar_value(m), 2.5);
    }
}
