//! Reverse-mode automatic differentiation over a recorded tape of 2-D tensors.
//!
//! Every value is an `Array2<f64>`; vectors are `n x 1` columns and scalars
//! are `1 x 1`. Elementwise binary ops broadcast a `1 x c`, `r x 1` or `1 x 1`
//! operand against the other one.

mod gradcheck;

#[doc(hidden)]
pub use gradcheck::finite_difference_check_with_fault;
pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport};

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::params::{GradientSet, ParamStore};

pub type Tensor = Array2<f64>;

/// Variance stabilizer used by every layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate corruption of one backward rule, used as a negative control
/// for gradient checking.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales the GELU derivative by 1.5.
    GeluDerivative,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Transpose(Var),
    SegmentMean(Var, Vec<Vec<usize>>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Var, Var),
    // normalized output lives in the node value; keep 1/sqrt(var + eps) per row
    LayerNorm(Var, Vec<f64>),
    SoftmaxRows(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clip(Var, f64, f64),
    DepthwiseConv1d(Var, Var),
    RowMean(Var),
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Mul(..) => "multiply",
            Op::Div(..) => "divide",
            Op::Scale(..) => "scale",
            Op::Shift(_) => "shift",
            Op::Transpose(_) => "transpose",
            Op::SegmentMean(..) => "segment-mean",
            Op::GatherRows(..) => "gather-rows",
            Op::SliceCols(..) => "slice-cols",
            Op::ConcatCols(..) => "concat-cols",
            Op::LayerNorm(..) => "layer-norm",
            Op::SoftmaxRows(_) => "softmax-rows",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Clip(..) => "clip",
            Op::DepthwiseConv1d(..) => "depthwise-conv1d",
            Op::RowMean(_) => "row-mean",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of a computation. Inputs of node `i` always have ids `< i`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Per-node adjoints from one backward pass.
pub struct Adjoints {
    grads: Vec<Option<Tensor>>,
}

impl Adjoints {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

/// Parameters of a [`ParamStore`] registered as leaves on a tape.
pub struct BoundParams<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    /// Tape handle of the parameter called `name`.
    ///
    /// Panics if the store has no such tensor; stores are validated against
    /// the model layout when they are built or loaded.
    pub fn get(&self, name: &str) -> Var {
        match self.store.index_of(name) {
            Some(i) => self.vars[i],
            None => panic!("parameter `{name}` is not in the store"),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }
}

fn same_or_broadcast(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

/// Sums `grad` down to `shape`, undoing a broadcast.
fn unbroadcast(grad: Tensor, shape: (usize, usize)) -> Tensor {
    let mut g = grad;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.dim(), (1, 1));
        t[[0, 0]]
    }

    /// Column `0` of a node as a plain vector.
    pub fn column(&self, v: Var) -> Vec<f64> {
        self.value(v).column(0).to_vec()
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Column vector constant.
    pub fn column_constant(&mut self, xs: &[f64]) -> Var {
        self.constant(Array2::from_shape_vec((xs.len(), 1), xs.to_vec()).expect("column shape"))
    }

    pub fn param(&mut self, index: usize, value: Tensor) -> Var {
        self.push(Op::Param(index), value)
    }

    /// Registers every tensor of `store` as a parameter leaf.
    pub fn bind<'a>(&mut self, store: &'a ParamStore) -> BoundParams<'a> {
        let vars = store
            .tensors()
            .enumerate()
            .map(|(i, t)| self.param(i, t.clone()))
            .collect();
        BoundParams { store, vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.push(Op::MatMul(a, b), v))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = same_or_broadcast(sa, sb).ok_or_else(|| Error::shape(op.name(), format!("{sa:?} vs {sb:?}")))?;
        let va = self.value(a).broadcast(out).expect("checked broadcast");
        let vb = self.value(b).broadcast(out).expect("checked broadcast");
        let v = Zip::from(&va).and(&vb).map_collect(|&x, &y| f(x, y));
        Ok(self.push(op, v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(Op::Scale(a, c), v)
    }

    /// `a + c` for a scalar constant `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(Op::Shift(a), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(Op::Transpose(a), v)
    }

    /// Row means over each index set; an empty set yields a zero row.
    pub fn segment_mean(&mut self, a: Var, sets: &[Vec<usize>]) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        if let Some(&bad) = sets.iter().flatten().find(|&&i| i >= rows) {
            return Err(Error::shape("segment-mean", format!("row {bad} out of {rows}")));
        }
        let mut v = Array2::zeros((sets.len(), cols));
        for (k, set) in sets.iter().enumerate() {
            if set.is_empty() {
                continue;
            }
            let mut row = v.row_mut(k);
            for &i in set {
                row += &x.row(i);
            }
            row /= set.len() as f64;
        }
        Ok(self.push(Op::SegmentMean(a, sets.to_vec()), v))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.nrows()) {
            return Err(Error::shape("gather-rows", format!("row {bad} out of {}", x.nrows())));
        }
        let v = x.select(Axis(0), idx);
        Ok(self.push(Op::GatherRows(a, idx.to_vec()), v))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.ncols() {
            return Err(Error::shape(
                "slice-cols",
                format!("[{start}, {}) of {} columns", start + len, x.ncols()),
            ));
        }
        let v = x.slice(s![.., start..start + len]).to_owned();
        Ok(self.push(Op::SliceCols(a, start), v))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(Error::shape("concat-cols", format!("{sa:?} vs {sb:?}")));
        }
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()]).expect("checked rows");
        Ok(self.push(Op::ConcatCols(a, b), v))
    }

    /// Row-wise `(x - mean) / sqrt(var + eps)` without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.ncols() as f64;
        let mut v = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in v.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|&z| (z - mean) * (z - mean)).sum::<f64>() / cols;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|z| (z - mean) * r);
            inv_std.push(r);
        }
        self.push(Op::LayerNorm(a, inv_std), v)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &z| m.max(z));
            row.mapv_inplace(|z| (z - max).exp());
            let total = row.sum();
            row /= total;
        }
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(Op::Gelu(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|z| z * z);
        self.push(Op::Square(a), v)
    }

    /// Elementwise clamp to `[lo, hi]`. The gradient passes unchanged where
    /// `lo <= x <= hi` and is zero elsewhere.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid(format!("clip bounds [{lo}, {hi}]")));
        }
        let v = self.value(a).mapv(|z| z.clamp(lo, hi));
        Ok(self.push(Op::Clip(a, lo, hi), v))
    }

    /// `max(0, x)`, expressed as a one-sided clip.
    pub fn relu(&mut self, a: Var) -> Var {
        self.clip(a, 0.0, f64::INFINITY).expect("valid bounds")
    }

    /// Per-channel temporal convolution with zero "same" padding.
    ///
    /// `x` is `T x C`, `kernel` is `C x K` with odd `K`; output is `T x C`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (t_len, c) = self.shape(x);
        let (kc, k) = self.shape(kernel);
        if kc != c || k % 2 == 0 {
            return Err(Error::shape(
                "depthwise-conv1d",
                format!("input {:?}, kernel {:?}", (t_len, c), (kc, k)),
            ));
        }
        let pad = k / 2;
        let xv = self.value(x);
        let kv = self.value(kernel);
        let mut v = Array2::zeros((t_len, c));
        for t in 0..t_len {
            for j in 0..k {
                let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                    continue;
                };
                for ch in 0..c {
                    v[[t, ch]] += kv[[ch, j]] * xv[[src, ch]];
                }
            }
        }
        Ok(self.push(Op::DepthwiseConv1d(x, kernel), v))
    }

    /// Pointwise (1x1) channel mixing: `x W + b`.
    pub fn pointwise_conv1d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add(y, bias)
    }

    /// Mean of each row, as an `r x 1` column.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(1))
            .expect("non-empty rows")
            .insert_axis(Axis(1));
        self.push(Op::RowMean(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push(Op::Mean(a), v)
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Adjoints> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.value.iter().all(|z| z.is_finite()) || !g.iter().all(|z| z.is_finite()) {
                return Err(Error::Numeric {
                    node: id,
                    op: node.op.name(),
                });
            }
            for (input, contribution) in self.local_grads(node, &g) {
                match &mut grads[input.0] {
                    Some(acc) => *acc += &contribution,
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Adjoints { grads })
    }

    /// Backward pass collected into one gradient tensor per parameter of `store`.
    pub fn gradients(&self, loss: Var, store: &ParamStore) -> Result<GradientSet> {
        let adj = self.backward(loss)?;
        let mut set = GradientSet::zeros_like(store);
        for (id, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(p), Some(g)) = (&node.op, &adj.grads[id]) {
                *set.get_mut(*p) += g;
            }
        }
        Ok(set)
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b) => vec![(*a, g.dot(&val(*b).t())), (*b, val(*a).t().dot(g))],
            Op::Add(a, b) => vec![
                (*a, unbroadcast(g.clone(), val(*a).dim())),
                (*b, unbroadcast(g.clone(), val(*b).dim())),
            ],
            Op::Sub(a, b) => vec![
                (*a, unbroadcast(g.clone(), val(*a).dim())),
                (*b, unbroadcast(-g, val(*b).dim())),
            ],
            Op::Mul(a, b) => {
                let ga = g * val(*b);
                let gb = g * val(*a);
                vec![
                    (*a, unbroadcast(ga, val(*a).dim())),
                    (*b, unbroadcast(gb, val(*b).dim())),
                ]
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = g / vb;
                let gb = -(g * va) / (vb * vb);
                vec![(*a, unbroadcast(ga, va.dim())), (*b, unbroadcast(gb, vb.dim()))]
            }
            Op::Scale(a, c) => vec![(*a, g * *c)],
            Op::Shift(a) => vec![(*a, g.clone())],
            Op::Transpose(a) => vec![(*a, g.t().to_owned())],
            Op::SegmentMean(a, sets) => {
                let mut ga = Array2::zeros(val(*a).dim());
                for (k, set) in sets.iter().enumerate() {
                    let n = set.len() as f64;
                    for &i in set {
                        let mut row = ga.row_mut(i);
                        row.scaled_add(1.0 / n, &g.row(k));
                    }
                }
                vec![(*a, ga)]
            }
            Op::GatherRows(a, idx) => {
                let mut ga = Array2::zeros(val(*a).dim());
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = ga.row_mut(i);
                    row += &g.row(r);
                }
                vec![(*a, ga)]
            }
            Op::SliceCols(a, start) => {
                let mut ga = Array2::zeros(val(*a).dim());
                ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                vec![(*a, ga)]
            }
            Op::ConcatCols(a, b) => {
                let split = val(*a).ncols();
                vec![
                    (*a, g.slice(s![.., ..split]).to_owned()),
                    (*b, g.slice(s![.., split..]).to_owned()),
                ]
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let cols = y.ncols() as f64;
                let mut ga = Array2::zeros(y.dim());
                for (r, mut out) in ga.rows_mut().into_iter().enumerate() {
                    let (gy, yr) = (g.row(r), y.row(r));
                    let mean_g = gy.sum() / cols;
                    let mean_gy = gy.dot(&yr) / cols;
                    Zip::from(&mut out)
                        .and(&gy)
                        .and(&yr)
                        .for_each(|o, &gi, &yi| *o = inv_std[r] * (gi - mean_g - yi * mean_gy));
                }
                vec![(*a, ga)]
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = g * y;
                for (r, mut row) in ga.rows_mut().into_iter().enumerate() {
                    let dot = row.sum();
                    row.scaled_add(-dot, &y.row(r));
                }
                vec![(*a, ga)]
            }
            Op::Gelu(a) => {
                let scale = match self.fault {
                    Some(Fault::GeluDerivative) => 1.5,
                    None => 1.0,
                };
                vec![(*a, g * &val(*a).mapv(|x| scale * gelu_derivative(x)))]
            }
            Op::Sigmoid(a) => vec![(*a, g * &node.value.mapv(|y| y * (1.0 - y)))],
            Op::Exp(a) => vec![(*a, g * &node.value)],
            Op::Log(a) => vec![(*a, g / val(*a))],
            Op::Square(a) => vec![(*a, g * &(val(*a) * 2.0))],
            Op::Clip(a, lo, hi) => {
                let mask = val(*a).mapv(|x| if *lo <= x && x <= *hi { 1.0 } else { 0.0 });
                vec![(*a, g * &mask)]
            }
            Op::DepthwiseConv1d(x, kernel) => {
                let (xv, kv) = (val(*x), val(*kernel));
                let (t_len, c) = xv.dim();
                let k = kv.ncols();
                let pad = k / 2;
                let mut gx = Array2::zeros(xv.dim());
                let mut gk = Array2::zeros(kv.dim());
                for t in 0..t_len {
                    for j in 0..k {
                        let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                            continue;
                        };
                        for ch in 0..c {
                            gx[[src, ch]] += kv[[ch, j]] * g[[t, ch]];
                            gk[[ch, j]] += xv[[src, ch]] * g[[t, ch]];
                        }
                    }
                }
                vec![(*x, gx), (*kernel, gk)]
            }
            Op::RowMean(a) => {
                let cols = val(*a).ncols();
                let gb = g / cols as f64;
                vec![(*a, gb.broadcast(val(*a).dim()).expect("column").to_owned())]
            }
            Op::Sum(a) => vec![(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]]))],
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                vec![(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]] / n))]
            }
        }
    }
}
