//! A small reverse-mode tape over 2-D arrays, specialised to the operations
//! the segmentation network needs. Generic over `f32` (training, storage)
//! and `f64` (gradient verification).

use std::borrow::Cow;
use std::fmt::{Debug, Display};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::FromPrimitive;
use rand::Rng;

pub trait Float:
    num_traits::Float + num_traits::NumAssign + LinalgScalar + ScalarOperand + FromPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Float for f32 {}
impl Float for f64 {}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Input,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<F>,
        rstd: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<F>>,
    },
    Dropout {
        x: Var,
        mask: Array2<F>,
    },
    LabelEmbed {
        weight: Var,
        bias: Var,
        rows: Vec<(usize, Vec<usize>)>,
    },
    BoundaryEmbed {
        table: Var,
        rows: Vec<(usize, usize)>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Array2<F>,
    },
    Sum(Vec<Var>),
}

struct Node<'p, F: Float> {
    value: Cow<'p, Array2<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records a forward computation for one backward sweep. Parameters are
/// borrowed, never copied.
pub struct Tape<'p, F: Float> {
    params: &'p [Array2<F>],
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<'p, F>>,
}

impl<'p, F: Float> Tape<'p, F> {
    pub fn new(params: &'p [Array2<F>]) -> Self {
        Self {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(&self.params[id]),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let g = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), g)
    }

    /// `x + b` with `b` a `1 x n` row broadcast over rows of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let out = self.value(x) + &self.value(b).row(0);
        let g = self.needs(x) || self.needs(b);
        self.push(out, Op::AddBias(x, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let g = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), g)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(gelu);
        let g = self.needs(x);
        self.push(out, Op::Gelu(x), g)
    }

    /// Row-wise layer normalization with `1 x n` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = F::from_usize(xv.ncols()).expect("width");
        let eps = F::from_f64_lossy(LN_EPS);
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let r = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let out = &xhat * &self.value(gamma).row(0) + &self.value(beta).row(0);
        let g = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, g)
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries `Tq x D`, keys and values `Tk x D`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = qv.dim();
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).expect("head dim").sqrt();
        let mut out = Array2::zeros((tq, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut p = qv.slice(cols).dot(&kv.slice(cols).t());
            p.mapv_inplace(|x| x * scale);
            softmax_rows_inplace(&mut p);
            general_mat_mul(F::one(), &p, &vv.slice(cols), F::zero(), &mut out.slice_mut(cols));
            probs.push(p);
        }
        let g = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(out, Op::Attention { q, k, v, heads, probs }, g)
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = F::from_f64_lossy(1.0 / (1.0 - p));
        let shape = self.value(x).dim();
        let mask = Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { F::zero() } else { keep });
        let out = self.value(x) * &mask;
        let g = self.needs(x);
        self.push(out, Op::Dropout { x, mask }, g)
    }

    /// `len x D` rows: `bias + sum(weight[slot])` at prompted rows, exactly
    /// zero elsewhere.
    pub fn label_embed(&mut self, weight: Var, bias: Var, rows: Vec<(usize, Vec<usize>)>, len: usize) -> Var {
        let d = self.value(weight).ncols();
        let mut out = Array2::zeros((len, d));
        crate::prompt::add_label_rows(&mut out, &rows, self.value(weight), self.value(bias));
        let g = self.needs(weight) || self.needs(bias);
        self.push(out, Op::LabelEmbed { weight, bias, rows }, g)
    }

    pub fn boundary_embed(&mut self, table: Var, rows: Vec<(usize, usize)>, len: usize) -> Var {
        let d = self.value(table).ncols();
        let mut out = Array2::zeros((len, d));
        crate::prompt::add_boundary_rows(&mut out, &rows, self.value(table));
        let g = self.needs(table);
        self.push(out, Op::BoundaryEmbed { table, rows }, g)
    }

    /// Mean over rows of `-log softmax(logits)[target]`, as a `1 x 1` node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let lv = self.value(logits);
        let mut probs = lv.clone();
        softmax_rows_inplace(&mut probs);
        let mut total = 0.0f64;
        for (row, &y) in lv.rows().into_iter().zip(&targets) {
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().fold(F::zero(), |a, &v| a + (v - max).exp()).ln();
            total += (lse - row[y]).to_f64_lossy();
        }
        let loss = F::from_f64_lossy(total / targets.len().max(1) as f64);
        let g = self.needs(logits);
        self.push(Array2::from_elem((1, 1), loss), Op::SoftmaxCrossEntropy { logits, targets, probs }, g)
    }

    /// Sum of `1 x 1` nodes.
    pub fn sum(&mut self, terms: Vec<Var>) -> Var {
        let total = terms.iter().fold(F::zero(), |a, &v| a + self.value(v)[[0, 0]]);
        let g = terms.iter().any(|&v| self.needs(v));
        self.push(Array2::from_elem((1, 1), total), Op::Sum(terms), g)
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[[0, 0]]
    }

    /// Reverse sweep from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem(self.value(root).dim(), F::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: Vec<Option<Array2<F>>> = (0..self.params.len()).map(|_| None).collect();
        for (id, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                params[id] = grads[v.0].take();
            }
        }
        Gradients { nodes: grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<F>, g: &Array2<F>, grads: &mut [Option<Array2<F>>]) {
        match op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::Add(a, b) => {
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g.clone());
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    let mut dx = self.value(*x).mapv(gelu_grad);
                    dx *= g;
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.needs(*x) {
                    let n = F::from_usize(xhat.ncols()).expect("width");
                    let mut dx = g * &self.value(*gamma).row(0);
                    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(rstd) {
                        let sum = row.sum();
                        let dot = row.iter().zip(xh).fold(F::zero(), |a, (&d, &h)| a + d * h);
                        Zip::from(&mut row)
                            .and(&xh)
                            .for_each(|d, &h| *d = r * (*d - sum / n - h * dot / n));
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.ncols();
                let dh = d / heads;
                let scale = F::one() / F::from_usize(dh).expect("head dim").sqrt();
                let mut dq = Array2::zeros(qv.dim());
                let mut dk = Array2::zeros(kv.dim());
                let mut dv = Array2::zeros(vv.dim());
                for (h, p) in probs.iter().enumerate() {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let go = g.slice(cols);
                    let mut ds = go.dot(&vv.slice(cols).t());
                    for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                        let dot = drow.iter().zip(prow).fold(F::zero(), |a, (&x, &y)| a + x * y);
                        Zip::from(&mut drow)
                            .and(&prow)
                            .for_each(|x, &y| *x = y * (*x - dot) * scale);
                    }
                    general_mat_mul(F::one(), &ds, &kv.slice(cols), F::one(), &mut dq.slice_mut(cols));
                    general_mat_mul(F::one(), &ds.t(), &qv.slice(cols), F::one(), &mut dk.slice_mut(cols));
                    general_mat_mul(F::one(), &p.t(), &go, F::one(), &mut dv.slice_mut(cols));
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Dropout { x, mask } => self.accumulate(grads, *x, g * mask),
            Op::LabelEmbed { weight, bias, rows } => {
                if self.needs(*weight) {
                    let mut dw = Array2::zeros(self.value(*weight).dim());
                    for (t, slots) in rows {
                        for &i in slots {
                            let mut r = dw.row_mut(i);
                            r += &g.row(*t);
                        }
                    }
                    self.accumulate(grads, *weight, dw);
                }
                if self.needs(*bias) {
                    let mut db = Array2::zeros(self.value(*bias).dim());
                    for (t, _) in rows {
                        let mut r = db.row_mut(0);
                        r += &g.row(*t);
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::BoundaryEmbed { table, rows } => {
                let mut dt = Array2::zeros(self.value(*table).dim());
                for &(t, k) in rows {
                    let mut r = dt.row_mut(k);
                    r += &g.row(t);
                }
                self.accumulate(grads, *table, dt);
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let scale = g[[0, 0]] / F::from_usize(targets.len().max(1)).expect("count");
                let mut dl = probs.clone();
                for (mut row, &y) in dl.rows_mut().into_iter().zip(targets) {
                    row[y] = row[y] - F::one();
                    row.mapv_inplace(|v| v * scale);
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Sum(terms) => {
                for &t in terms {
                    self.accumulate(grads, t, g.clone());
                }
            }
        }
    }
}

/// Output of [`Tape::backward`].
pub struct Gradients<F> {
    nodes: Vec<Option<Array2<F>>>,
    params: Vec<Option<Array2<F>>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient with respect to a leaf created by `input_with_grad`.
    pub fn wrt(&self, v: Var) -> Option<&Array2<F>> {
        self.nodes[v.0].as_ref()
    }

    /// Per-parameter gradients, `None` for parameters the root does not
    /// depend on.
    pub fn into_params(self) -> Vec<Option<Array2<F>>> {
        self.params
    }
}

pub fn softmax_rows_inplace<F: Float>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn gelu_consts<F: Float>() -> (F, F) {
    (F::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()), F::from_f64_lossy(0.044715))
}

/// Tanh approximation of GELU.
pub fn gelu<F: Float>(x: F) -> F {
    let (c, a) = gelu_consts::<F>();
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Float>(x: F) -> F {
    let (c, a) = gelu_consts::<F>();
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + three * a * x * x)
}
