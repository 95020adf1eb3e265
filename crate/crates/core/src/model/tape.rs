//! Reverse-mode autodiff over row-major `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the record in reverse. Parameters enter as leaves tagged with their
//! store index so their gradients can be collected afterwards.

use std::collections::HashMap;
use std::ops::Range;
use std::rc::Rc;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Mat, inv_std: Vec<f64> },
    /// Row softmax over the `true` entries of the mask.
    MaskedSoftmax(Var),
    Gather { table: Var, ids: Vec<Option<usize>> },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MaxPool { x: Var, argmax: Vec<Vec<usize>> },
    MulConst(Var, Rc<Mat>),
    CrossEntropySum { logits: Var, targets: Vec<Option<usize>>, probs: Mat },
}

struct Node {
    value: Mat,
    op: Op,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise layer normalisation; also returns `x̂` and `1/σ` per row.
pub fn layer_norm_rows(x: ArrayView2<f64>, gain: ArrayView2<f64>, bias: ArrayView2<f64>) -> (Mat, Mat, Vec<f64>) {
    let (n, c) = x.dim();
    let mut xhat = Mat::zeros((n, c));
    let mut inv = Vec::with_capacity(n);
    for (r, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv.push(is);
        for (k, v) in row.iter().enumerate() {
            xhat[[r, k]] = (v - mean) * is;
        }
    }
    let mut y = xhat.clone();
    Zip::from(y.rows_mut()).for_each(|mut row| {
        Zip::from(&mut row).and(gain.row(0)).and(bias.row(0)).for_each(|v, g, b| *v = *v * g + b);
    });
    (y, xhat, inv)
}

/// Softmax of each row over the unmasked entries; masked entries are 0.
pub fn masked_softmax_rows(x: ArrayView2<f64>, mask: Option<&Array2<bool>>) -> Mat {
    let mut out = Mat::zeros(x.dim());
    for (r, row) in x.outer_iter().enumerate() {
        let allowed = |k: usize| mask.is_none_or(|m| m[[r, k]]);
        let mut max = f64::NEG_INFINITY;
        for (k, &v) in row.iter().enumerate() {
            if allowed(k) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for (k, &v) in row.iter().enumerate() {
            if allowed(k) {
                let e = (v - max).exp();
                out[[r, k]] = e;
                sum += e;
            }
        }
        out.row_mut(r).mapv_inplace(|e| e / sum);
    }
    out
}

pub struct Graph {
    nodes: Vec<Node>,
    masks: HashMap<usize, Rc<Array2<bool>>>,
    param_vars: HashMap<usize, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(1024),
            masks: HashMap::new(),
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf for parameter `index`; repeated calls return the same node.
    pub fn param(&mut self, index: usize, value: &Mat) -> Var {
        if let Some(v) = self.param_vars.get(&index) {
            return *v;
        }
        let v = self.push(value.clone(), Op::Param(index));
        self.param_vars.insert(index, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds the single row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + &self.value(b).row(0);
        self.push(v, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (y, xhat, inv_std) = layer_norm_rows(self.value(x).view(), self.value(gain).view(), self.value(bias).view());
        self.push(y, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    pub fn masked_softmax(&mut self, x: Var, mask: Option<Rc<Array2<bool>>>) -> Var {
        let v = masked_softmax_rows(self.value(x).view(), mask.as_deref());
        let out = self.push(v, Op::MaskedSoftmax(x));
        if let Some(m) = mask {
            self.masks.insert(out.0, m);
        }
        out
    }

    /// Rows of `table`; `None` gives a zero row.
    pub fn gather(&mut self, table: Var, ids: Vec<Option<usize>>) -> Var {
        let t = self.value(table);
        let mut v = Mat::zeros((ids.len(), t.ncols()));
        for (r, id) in ids.iter().enumerate() {
            if let Some(i) = id {
                v.row_mut(r).assign(&t.row(*i));
            }
        }
        self.push(v, Op::Gather { table, ids })
    }

    pub fn slice_cols(&mut self, a: Var, cols: Range<usize>) -> Var {
        let v = self.value(a).slice(s![.., cols.clone()]).to_owned();
        self.push(v, Op::SliceCols(a, cols.start))
    }

    pub fn slice_rows(&mut self, a: Var, rows: Range<usize>) -> Var {
        let v = self.value(a).slice(s![rows.clone(), ..]).to_owned();
        self.push(v, Op::SliceRows(a, rows.start))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("equal row counts");
        self.push(v, Op::ConcatCols(parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("equal column counts");
        self.push(v, Op::ConcatRows(parts))
    }

    /// Column-wise max over each row group; one output row per group.
    pub fn max_pool(&mut self, x: Var, groups: &[Range<usize>]) -> Var {
        let xv = self.value(x);
        let c = xv.ncols();
        let mut v = Mat::zeros((groups.len(), c));
        let mut argmax = Vec::with_capacity(groups.len());
        for (g, range) in groups.iter().enumerate() {
            let mut am = vec![range.start; c];
            for k in 0..c {
                let mut best = f64::NEG_INFINITY;
                for r in range.clone() {
                    if xv[[r, k]] > best {
                        best = xv[[r, k]];
                        am[k] = r;
                    }
                }
                v[[g, k]] = best;
            }
            argmax.push(am);
        }
        self.push(v, Op::MaxPool { x, argmax })
    }

    pub fn mul_const(&mut self, a: Var, m: Rc<Mat>) -> Var {
        let v = self.value(a) * &*m;
        self.push(v, Op::MulConst(a, m))
    }

    /// Summed cross-entropy over rows with a target; a 1×1 result.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let probs = masked_softmax_rows(self.value(logits).view(), None);
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                loss -= probs[[r, *t]].max(f64::MIN_POSITIVE).ln();
            }
        }
        // Exact log-sum-exp for the value; probs only feed the gradient.
        let lv = self.value(logits);
        let mut exact = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let row = lv.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                exact += lse - row[*t];
            }
        }
        let _ = loss;
        self.push(Mat::from_elem((1, 1), exact), Op::CrossEntropySum { logits, targets, probs })
    }

    /// Gradients of the scalar `out` with respect to every parameter leaf,
    /// keyed by store index.
    pub fn backward(&self, out: Var) -> HashMap<usize, Mat> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::ones(self.nodes[out.0].value.dim()));
        let mut result = HashMap::new();
        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }
        for i in (0..=out.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(idx) => {
                    result.insert(*idx, gy);
                }
                Op::MatMul(a, b) => {
                    let ga = gy.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&gy);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = gy.dot(self.value(*b));
                    let gb = gy.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, gy.clone());
                    acc(&mut grads, *a, gy);
                }
                Op::AddRow(a, b) => {
                    let gb = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, gy);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, gy * *s),
                Op::Gelu(a) => {
                    let mut g = gy;
                    Zip::from(&mut g).and(self.value(*a)).for_each(|g, &x| *g *= gelu_grad(x));
                    acc(&mut grads, *a, g);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = self.value(*gain);
                    let ggain = (&gy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbias = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let c = xhat.ncols() as f64;
                    let mut gx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dxhat: Vec<f64> = (0..xhat.ncols()).map(|k| gy[[r, k]] * gv[[0, k]]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / c;
                        let mean_dx = dxhat.iter().zip(xhat.row(r)).map(|(d, h)| d * h).sum::<f64>() / c;
                        for k in 0..xhat.ncols() {
                            gx[[r, k]] = inv_std[r] * (dxhat[k] - mean_d - xhat[[r, k]] * mean_dx);
                        }
                    }
                    acc(&mut grads, *gain, ggain);
                    acc(&mut grads, *bias, gbias);
                    acc(&mut grads, *x, gx);
                }
                Op::MaskedSoftmax(x) => {
                    let p = &node.value;
                    let mut gx = &gy * p;
                    for r in 0..p.nrows() {
                        let dot: f64 = gx.row(r).sum();
                        for k in 0..p.ncols() {
                            gx[[r, k]] -= p[[r, k]] * dot;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Gather { table, ids } => {
                    let mut gt = Mat::zeros(self.value(*table).dim());
                    for (r, id) in ids.iter().enumerate() {
                        if let Some(i) = id {
                            let mut row = gt.row_mut(*i);
                            row += &gy.row(r);
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + gy.ncols()]).assign(&gy);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*start..*start + gy.nrows(), ..]).assign(&gy);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, gy.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        acc(&mut grads, *p, gy.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = Mat::zeros(self.value(*x).dim());
                    for (g, am) in argmax.iter().enumerate() {
                        for (k, &r) in am.iter().enumerate() {
                            gx[[r, k]] += gy[[g, k]];
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::MulConst(a, m) => acc(&mut grads, *a, gy * &**m),
                Op::CrossEntropySum { logits, targets, probs } => {
                    let scale = gy[[0, 0]];
                    let mut g = Mat::zeros(probs.dim());
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            g.row_mut(r).assign(&probs.row(r));
                            g[[r, *t]] -= 1.0;
                        }
                    }
                    acc(&mut grads, *logits, g * scale);
                }
            }
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::rng_from_seed;
    use rand::Rng;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = rng_from_seed(seed);
        Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum of f · w)/d(param 0).
    fn check(build: impl Fn(&mut Graph, Var) -> Var, shape: (usize, usize)) {
        let p = rand_mat(shape.0, shape.1, 1);
        let run = |p: &Mat| {
            let mut g = Graph::new();
            let v = g.param(0, p);
            let y = build(&mut g, v);
            let w = rand_mat(g.value(y).nrows(), g.value(y).ncols(), 2);
            let wv = g.constant(w);
            let prod = g.mul_const(y, Rc::new(g.value(wv).clone()));
            let ones_r = g.constant(Mat::ones((1, g.value(prod).nrows())));
            let ones_c = g.constant(Mat::ones((g.value(prod).ncols(), 1)));
            let s1 = g.matmul(ones_r, prod);
            let s = g.matmul(s1, ones_c);
            (g.value(s)[[0, 0]], g.backward(s))
        };
        let (_, grads) = run(&p);
        let ga = &grads[&0];
        let eps = 1e-6;
        for idx in 0..p.len() {
            let (r, c) = (idx / p.ncols(), idx % p.ncols());
            let mut hi = p.clone();
            hi[[r, c]] += eps;
            let mut lo = p.clone();
            lo[[r, c]] -= eps;
            let num = (run(&hi).0 - run(&lo).0) / (2.0 * eps);
            let err = (num - ga[[r, c]]).abs() / (num.abs().max(ga[[r, c]].abs()).max(1e-6));
            assert!(err < 1e-5, "({r},{c}): numeric {num} analytic {}", ga[[r, c]]);
        }
    }

    #[test]
    fn op_gradients() {
        let b = rand_mat(4, 3, 9);
        check(|g, v| { let c = g.constant(b.clone()); g.matmul(v, c) }, (2, 4));
        check(|g, v| { let c = g.constant(b.clone()); g.matmul_bt(c, v) }, (2, 3));
        check(|g, v| g.gelu(v), (3, 3));
        check(|g, v| {
            let gain = g.constant(rand_mat(1, 5, 3));
            let bias = g.constant(rand_mat(1, 5, 4));
            g.layer_norm(v, gain, bias)
        }, (3, 5));
        let mask = Rc::new(Array2::from_shape_fn((3, 4), |(r, c)| c <= r + 1));
        check(|g, v| g.masked_softmax(v, Some(mask.clone())), (3, 4));
        check(|g, v| g.gather(v, vec![Some(1), None, Some(1), Some(0)]), (3, 2));
        check(|g, v| { let a = g.slice_cols(v, 1..3); let b = g.slice_rows(v, 0..2); let b = g.slice_cols(b, 0..2); g.concat_rows(vec![a, b]) }, (3, 4));
        check(|g, v| g.max_pool(v, &[0..2, 2..5]), (5, 3));
        check(|g, v| g.cross_entropy_sum(v, vec![Some(2), None, Some(0)]), (3, 4));
        check(|g, v| { let r = g.slice_rows(v, 0..1); g.add_row(v, r) }, (3, 2));
        check(|g, v| { let a = g.scale(v, 0.3); let b = g.concat_cols(vec![a, v]); let c = g.slice_cols(b, 1..5); g.add(c, c) }, (2, 3));
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp() {
        let logits = rand_mat(5, 7, 11);
        let targets = vec![Some(3), Some(0), None, Some(6), Some(1)];
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let out = g.cross_entropy_sum(l, targets.clone());
        let mut want = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let lse = logits.row(r).iter().map(|v| v.exp()).sum::<f64>().ln();
                want += lse - logits[[r, *t]];
            }
        }
        assert!((g.value(out)[[0, 0]] - want).abs() < 1e-12);
    }
}
