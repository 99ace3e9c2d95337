//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse. Graphs are cheap
//! and built per example; parameters enter as leaves and their gradients are
//! read back out of the returned [`Grads`].

use ndarray::{concatenate, s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Mat),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    MeanRows(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    Cosine(Var, Var),
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

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

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Broadcast-add a `1×m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: bias must be a single row");
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn add_const(&mut self, a: Var, c: &Mat) -> Var {
        let value = self.value(a) + c;
        let ng = self.ng(a);
        self.push(value, Op::AddConst(a), ng)
    }

    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        let value = self.value(a) * &c;
        let ng = self.ng(a);
        self.push(value, Op::MulConst(a, c), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Row-wise layer normalisation with learned gain and bias (`1×n` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Mat::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Select rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let value = tv.select(Axis(0), idx);
        let ng = self.ng(table);
        self.push(
            value,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let ng = parts.iter().any(|v| self.ng(*v));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let ng = parts.iter().any(|v| self.ng(*v));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start, end), ng)
    }

    /// Mean of the listed rows, as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        assert!(!rows.is_empty(), "mean_rows: empty row set");
        let av = self.value(a);
        let mut acc = Mat::zeros((1, av.ncols()));
        for &r in rows {
            acc.row_mut(0).scaled_add(1.0, &av.row(r));
        }
        acc /= rows.len() as f64;
        let ng = self.ng(a);
        self.push(acc, Op::MeanRows(a, rows.to_vec()), ng)
    }

    /// Mean cross-entropy over rows of `logits` against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "cross_entropy: target count");
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= targets.len() as f64;
        let ng = self.ng(logits);
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Cosine similarity of two `1×n` rows, as a `1×1` scalar.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let dot = (av * bv).sum();
        let na = av.mapv(|x| x * x).sum().sqrt();
        let nb = bv.mapv(|x| x * x).sum().sqrt();
        let ng = self.ng(a) || self.ng(b);
        self.push(Mat::from_elem((1, 1), dot / (na * nb)), Op::Cosine(a, b), ng)
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "sum: no operands");
        let mut value = self.value(parts[0]).clone();
        for p in &parts[1..] {
            value += self.value(*p);
        }
        let ng = parts.iter().any(|v| self.ng(*v));
        self.push(value, Op::Sum(parts.to_vec()), ng)
    }

    /// Reverse-mode sweep from a `1×1` output.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.shape(out), (1, 1), "backward: output must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::from_elem((1, 1), 1.0));

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let acc = |v: Var, d: Mat, grads: &mut Vec<Option<Mat>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, g.dot(&self.value(*b).t()), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, self.value(*a).t().dot(&g), &mut grads);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.ng(*a) {
                        acc(*a, g.dot(self.value(*b)), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, g.t().dot(self.value(*a)), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, &g * self.value(*b), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, &g * self.value(*a), &mut grads);
                    }
                }
                Op::Scale(a, s) => acc(*a, g * *s, &mut grads),
                Op::AddConst(a) => acc(*a, g, &mut grads),
                Op::MulConst(a, c) => acc(*a, g * c, &mut grads),
                Op::Gelu(a) => {
                    let d = ndarray::Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| {
                            let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                            g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                        });
                    acc(*a, d, &mut grads);
                }
                Op::Relu(a) => {
                    let d = ndarray::Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                    acc(*a, d, &mut grads);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy = &g * y;
                    let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let d = &gy - &(y * &dot);
                    acc(*a, d, &mut grads);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.ng(*gamma) {
                        acc(
                            *gamma,
                            (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                            &mut grads,
                        );
                    }
                    if self.ng(*beta) {
                        acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                    if self.ng(*x) {
                        let dxhat = &g * self.value(*gamma);
                        let n = xhat.ncols() as f64;
                        let mut dx = Mat::zeros(xhat.dim());
                        for r in 0..xhat.nrows() {
                            let dh = dxhat.row(r);
                            let xh = xhat.row(r);
                            let s1 = dh.sum();
                            let s2 = (&dh * &xh).sum();
                            for c in 0..xhat.ncols() {
                                dx[[r, c]] = inv_std[r] / n * (n * dh[c] - s1 - xh[c] * s2);
                            }
                        }
                        acc(*x, dx, &mut grads);
                    }
                }
                Op::Gather { table, idx } => {
                    let mut d = Mat::zeros(self.value(*table).dim());
                    for (r, &t) in idx.iter().enumerate() {
                        d.row_mut(t).scaled_add(1.0, &g.row(r));
                    }
                    acc(*table, d, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.shape(*p).0;
                        if self.ng(*p) {
                            acc(*p, g.slice(s![start..start + n, ..]).to_owned(), &mut grads);
                        }
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.shape(*p).1;
                        if self.ng(*p) {
                            acc(*p, g.slice(s![.., start..start + n]).to_owned(), &mut grads);
                        }
                        start += n;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    d.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(*a, d, &mut grads);
                }
                Op::MeanRows(a, rows) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    let w = 1.0 / rows.len() as f64;
                    for &r in rows {
                        d.row_mut(r).scaled_add(w, &g.row(0));
                    }
                    acc(*a, d, &mut grads);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        d[[r, t]] -= 1.0;
                    }
                    acc(*logits, d * scale, &mut grads);
                }
                Op::Cosine(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let na = av.mapv(|x| x * x).sum().sqrt();
                    let nb = bv.mapv(|x| x * x).sum().sqrt();
                    let c = node.value[[0, 0]];
                    let gs = g[[0, 0]];
                    if self.ng(*a) {
                        let d = (bv / (na * nb) - av * (c / (na * na))) * gs;
                        acc(*a, d, &mut grads);
                    }
                    if self.ng(*b) {
                        let d = (av / (na * nb) - bv * (c / (nb * nb))) * gs;
                        acc(*b, d, &mut grads);
                    }
                }
                Op::Sum(parts) => {
                    for p in parts {
                        acc(*p, g.clone(), &mut grads);
                    }
                }
            }
        }
        Grads(grads)
    }
}

pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of `f` with respect to every element of `inputs`.
    fn check(inputs: Vec<Mat>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let eps = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Mat::zeros(m.dim()));
            for idx in 0..m.len() {
                let eval = |delta: f64| {
                    let mut perturbed = inputs.clone();
                    perturbed[k].as_slice_mut().unwrap()[idx] += delta;
                    let mut g = Graph::new();
                    let vars: Vec<Var> = perturbed.into_iter().map(|m| g.param(m)).collect();
                    let out = f(&mut g, &vars);
                    g.scalar(out)
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[idx];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {k} elem {idx}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_family_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b, c) = (rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 4, 2), rand_mat(&mut rng, 5, 4));
        check(vec![a.clone(), b, c], |g, v| {
            let ab = g.matmul(v[0], v[1]);
            let act = g.matmul_t(v[2], v[0]);
            let t = g.cross_entropy(act, &[0, 1, 2, 0, 1]);
            let u = g.cross_entropy(ab, &[1, 0, 1]);
            g.sum(&[t, u])
        });
    }

    #[test]
    fn normalisation_and_activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 3, 5);
        let gamma = rand_mat(&mut rng, 1, 5);
        let beta = rand_mat(&mut rng, 1, 5);
        let w = rand_mat(&mut rng, 5, 3);
        let bias = rand_mat(&mut rng, 1, 3);
        check(vec![x, gamma, beta, w, bias], |g, v| {
            let n = g.layer_norm(v[0], v[1], v[2]);
            let a = g.gelu(n);
            let s = g.softmax(a);
            let d = g.mul_const(s, Mat::from_elem((3, 5), 0.7));
            let l = g.matmul(d, v[3]);
            let r = g.add_row(l, v[4]);
            g.cross_entropy(r, &[2, 0, 1])
        });
    }

    #[test]
    fn gather_concat_pool_cosine_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = rand_mat(&mut rng, 6, 4);
        let extra = rand_mat(&mut rng, 2, 4);
        check(vec![table, extra], |g, v| {
            let e = g.gather(v[0], &[1, 3, 3, 5]);
            let c = g.concat_rows(&[v[1], e]);
            let left = g.slice_cols(c, 0, 2);
            let right = g.slice_cols(c, 2, 4);
            let back = g.concat_cols(&[right, left]);
            let p = g.mean_rows(back, &[0, 2, 3]);
            let q = g.mean_rows(c, &[4, 5]);
            let cos = g.cosine(p, q);
            let sc = g.scale(cos, -2.0);
            let m = g.mul(p, q);
            let pooled = g.mean_rows(m, &[0]);
            let w = g.constant(Mat::from_elem((4, 1), 1.0));
            let total = g.matmul(pooled, w);
            g.add(sc, total)
        });
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Mat::from_elem((2, 2), 1.0));
        let b = g.param(Mat::from_elem((2, 2), 2.0));
        let c = g.matmul(a, b);
        let l = g.cross_entropy(c, &[0, 1]);
        let grads = g.backward(l);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = Mat::from_shape_vec((2, 3), vec![1000.0, 0.0, -1000.0, 1.0, 2.0, 3.0]).unwrap();
        let p = softmax_rows(&m);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
