//! Reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! A [`Tape`] records one forward computation. Parameters are borrowed,
//! not copied; their gradients are accumulated straight into a caller
//! buffer by [`Tape::backward`]. Scalar losses with hand-written
//! gradients plug in through [`ScalarOp`].

use ndarray::{s, Array2, Axis, Zip};

pub type Matrix = Array2<f64>;

const RMS_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// A scalar function of several tape values with an explicit gradient.
pub trait ScalarOp {
    fn forward(&self, inputs: &[&Matrix]) -> f64;
    /// d(output)/d(input) for each input, same shapes as the inputs.
    fn backward(&self, inputs: &[&Matrix]) -> Vec<Matrix>;
}

enum Op<'a> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Gather { table: Var, ids: Vec<usize> },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Gelu(Var),
    CausalAttention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Matrix> },
    Softmax(Var),
    Scalar { inputs: Vec<Var>, op: Box<dyn ScalarOp + 'a> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node<'a> {
    // None for parameters, whose value lives in the borrowed store
    value: Option<Matrix>,
    op: Op<'a>,
}

pub struct Tape<'a> {
    params: &'a [Matrix],
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a [Matrix]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(64),
        }
    }

    fn push(&mut self, value: Matrix, op: Op<'a>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(i)) => &self.params[*i],
            _ => unreachable!("only parameters lack a stored value"),
        }
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on a non-scalar node");
        m[[0, 0]]
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, index: usize) -> Var {
        assert!(index < self.params.len(), "parameter {index} out of range");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(index),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let out = t.select(Axis(0), ids);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Row-wise RMS normalisation scaled by a `1 x d` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let xv = self.value(x);
        let g = self.value(gain);
        let d = xv.ncols() as f64;
        let inv_rms: Vec<f64> = xv
            .rows()
            .into_iter()
            .map(|r| 1.0 / (r.dot(&r) / d + RMS_EPS).sqrt())
            .collect();
        let mut out = xv.clone();
        for (mut row, &s) in out.rows_mut().into_iter().zip(&inv_rms) {
            row *= s;
            row *= &g.row(0);
        }
        self.push(out, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x))
    }

    /// Multi-head causal attention over `T x d` queries, keys and values.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = qv.dim();
        assert!(d % heads == 0, "embedding width not divisible by heads");
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Matrix::zeros((t, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut p = qv.slice(cols).dot(&kv.slice(cols).t()) * scale;
            for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                row.slice_mut(s![i + 1..]).fill(f64::NEG_INFINITY);
                softmax_in_place(row.as_slice_mut().expect("contiguous row"));
            }
            out.slice_mut(cols).assign(&p.dot(&vv.slice(cols)));
            probs.push(p);
        }
        self.push(out, Op::CausalAttention { q, k, v, heads, probs })
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("contiguous row"));
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn scalar_op(&mut self, inputs: &[Var], op: Box<dyn ScalarOp + 'a>) -> Var {
        let vals: Vec<&Matrix> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&vals);
        self.push(
            Matrix::from_elem((1, 1), out),
            Op::Scalar {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// `sum_i w_i * x_i` over same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "empty weighted sum");
        let mut out = Matrix::zeros(self.value(terms[0].0).raw_dim());
        for &(v, w) in terms {
            out.scaled_add(w, self.value(v));
        }
        self.push(out, Op::WeightedSum(terms.to_vec()))
    }

    /// Propagates `scale * d(loss)` back through the tape and adds the
    /// parameter gradients into `param_grads`.
    pub fn backward(&self, loss: Var, scale: f64, param_grads: &mut [Matrix]) {
        assert_eq!(param_grads.len(), self.params.len(), "gradient buffer size");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Matrix::from_elem(self.value(loss).raw_dim(), scale);
        grads[loss.0] = Some(seed);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = Acc {
                tape: self,
                grads: &mut grads,
                params: param_grads,
            };
            match &node.op {
                Op::Input => {}
                Op::Param(i) => acc.params[*i] += &g,
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc.add(*a, da);
                    acc.add(*b, db);
                }
                Op::Add(a, b) => {
                    acc.add(*a, g.clone());
                    acc.add(*b, g);
                }
                Op::Gather { table, ids } => acc.scatter_rows(*table, ids, &g),
                Op::RmsNorm { x, gain, inv_rms } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let d = xv.ncols() as f64;
                    let mut dx = Matrix::zeros(xv.raw_dim());
                    let mut dgain = Matrix::zeros(gv.raw_dim());
                    for (r, &s) in inv_rms.iter().enumerate() {
                        let xhat = xv.row(r).mapv(|v| v * s);
                        let dy = g.row(r);
                        Zip::from(dgain.row_mut(0))
                            .and(&dy)
                            .and(&xhat)
                            .for_each(|dg, &a, &b| *dg += a * b);
                        let dxhat = &dy * &gv.row(0);
                        let m = dxhat.dot(&xhat) / d;
                        Zip::from(dx.row_mut(r))
                            .and(&dxhat)
                            .and(&xhat)
                            .for_each(|o, &a, &b| *o = (a - b * m) * s);
                    }
                    acc.add(*x, dx);
                    acc.add(*gain, dgain);
                }
                Op::Gelu(x) => {
                    let mut dx = self.value(*x).mapv(|v| {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
                    });
                    dx *= &g;
                    acc.add(*x, dx);
                }
                Op::CausalAttention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let hd = d / heads;
                    let scale = 1.0 / (hd as f64).sqrt();
                    let mut dq = Matrix::zeros(qv.raw_dim());
                    let mut dk = Matrix::zeros(kv.raw_dim());
                    let mut dv = Matrix::zeros(vv.raw_dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * hd..(h + 1) * hd];
                        let go = g.slice(cols);
                        dv.slice_mut(cols).assign(&p.t().dot(&go));
                        let dp = go.dot(&vv.slice(cols).t());
                        let mut ds = p * &dp;
                        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let total = row.sum();
                            Zip::from(&mut row).and(&prow).for_each(|x, &pp| *x -= pp * total);
                        }
                        ds *= scale;
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    acc.add(*q, dq);
                    acc.add(*k, dk);
                    acc.add(*v, dv);
                }
                Op::Softmax(x) => {
                    let p = node.value.as_ref().expect("softmax value");
                    let mut dx = p * &g;
                    for (mut row, prow) in dx.rows_mut().into_iter().zip(p.rows()) {
                        let total = row.sum();
                        Zip::from(&mut row).and(&prow).for_each(|x, &pp| *x -= pp * total);
                    }
                    acc.add(*x, dx);
                }
                Op::Scalar { inputs, op } => {
                    let upstream = g[[0, 0]];
                    let vals: Vec<&Matrix> = inputs.iter().map(|&v| self.value(v)).collect();
                    for (&v, mut d) in inputs.iter().zip(op.backward(&vals)) {
                        d *= upstream;
                        acc.add(v, d);
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        acc.add(v, &g * w);
                    }
                }
            }
        }
    }
}

struct Acc<'t, 'a> {
    tape: &'t Tape<'a>,
    grads: &'t mut Vec<Option<Matrix>>,
    params: &'t mut [Matrix],
}

impl Acc<'_, '_> {
    fn add(&mut self, v: Var, delta: Matrix) {
        if let Op::Param(i) = self.tape.nodes[v.0].op {
            self.params[i] += &delta;
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn scatter_rows(&mut self, table: Var, ids: &[usize], g: &Matrix) {
        if let Op::Param(i) = self.tape.nodes[table.0].op {
            let target = &mut self.params[i];
            for (r, &id) in ids.iter().enumerate() {
                let mut row = target.row_mut(id);
                row += &g.row(r);
            }
            return;
        }
        let mut dt = Matrix::zeros(self.tape.value(table).raw_dim());
        for (r, &id) in ids.iter().enumerate() {
            let mut row = dt.row_mut(id);
            row += &g.row(r);
        }
        self.add(table, dt);
    }
}

/// Numerically stable in-place softmax; `-inf` entries become 0.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    struct SumSquares;

    impl ScalarOp for SumSquares {
        fn forward(&self, inputs: &[&Matrix]) -> f64 {
            inputs[0].iter().map(|x| x * x).sum()
        }
        fn backward(&self, inputs: &[&Matrix]) -> Vec<Matrix> {
            vec![inputs[0].mapv(|x| 2.0 * x)]
        }
    }

    fn numeric(params: &[Matrix], f: &dyn Fn(&mut Tape) -> Var, p: usize, r: usize, c: usize) -> f64 {
        let eps = 1e-6;
        let mut hi = params.to_vec();
        hi[p][[r, c]] += eps;
        let mut lo = params.to_vec();
        lo[p][[r, c]] -= eps;
        let eval = |ps: &[Matrix]| {
            let mut t = Tape::new(ps);
            let out = f(&mut t);
            t.scalar(out)
        };
        (eval(&hi) - eval(&lo)) / (2.0 * eps)
    }

    fn check(params: Vec<Matrix>, f: &dyn Fn(&mut Tape) -> Var) {
        let mut grads: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.raw_dim())).collect();
        {
            let mut t = Tape::new(&params);
            let out = f(&mut t);
            t.backward(out, 1.0, &mut grads);
        }
        for (pi, p) in params.iter().enumerate() {
            for ((r, c), _) in p.indexed_iter() {
                let n = numeric(&params, f, pi, r, c);
                let a = grads[pi][[r, c]];
                assert!((n - a).abs() < 1e-6 * (1.0 + n.abs()), "param {pi} [{r},{c}]: {a} vs {n}");
            }
        }
    }

    fn rand_matrix(rows: usize, cols: usize, salt: u64) -> Matrix {
        Matrix::from_shape_fn((rows, cols), |(r, c)| {
            let x = (r * 31 + c * 17) as f64 + salt as f64 * 0.37;
            (x.sin() * 1.3).clamp(-1.0, 1.0)
        })
    }

    #[test]
    fn matmul_add_gelu_gradients() {
        let params = vec![rand_matrix(3, 4, 1), rand_matrix(4, 2, 2), rand_matrix(3, 2, 3)];
        check(params, &|t| {
            let (a, b, c) = (t.param(0), t.param(1), t.param(2));
            let ab = t.matmul(a, b);
            let s = t.add(ab, c);
            let g = t.gelu(s);
            t.scalar_op(&[g], Box::new(SumSquares))
        });
    }

    #[test]
    fn norm_gather_attention_softmax_gradients() {
        let params = vec![rand_matrix(5, 4, 4), rand_matrix(1, 4, 5), rand_matrix(4, 4, 6), rand_matrix(4, 4, 7)];
        check(params, &|t| {
            let table = t.param(0);
            let x = t.gather(table, &[3, 1, 3]);
            let gain = t.param(1);
            let h = t.rms_norm(x, gain);
            let wq = t.param(2);
            let wk = t.param(3);
            let q = t.matmul(h, wq);
            let k = t.matmul(h, wk);
            let a = t.causal_attention(q, k, h, 2);
            let p = t.softmax(a);
            let w = t.weighted_sum(&[(p, 0.7), (a, -0.2)]);
            t.scalar_op(&[w], Box::new(SumSquares))
        });
    }

    #[test]
    fn attention_is_causal() {
        let q = rand_matrix(4, 4, 9);
        let params: Vec<Matrix> = Vec::new();
        let mut t = Tape::new(&params);
        let mut k = rand_matrix(4, 4, 10);
        let x = t.input(q.clone());
        let kv = t.input(k.clone());
        let a = t.causal_attention(x, kv, kv, 2);
        let first = t.value(a).row(1).to_owned();
        k.row_mut(3).fill(9.0);
        let kv2 = t.input(k);
        let b = t.causal_attention(x, kv2, kv2, 2);
        assert_eq!(t.value(b).row(1), first);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut row = [1.0, 2.0, f64::NEG_INFINITY, 3.0];
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(row[2], 0.0);
        let m = array![[1000.0, 1000.0]];
        let params: Vec<Matrix> = Vec::new();
        let mut t = Tape::new(&params);
        let x = t.input(m);
        let p = t.softmax(x);
        assert_eq!(t.value(p)[[0, 0]], 0.5);
    }
}
