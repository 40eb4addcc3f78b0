//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D array. Elementwise binary ops broadcast
//! a `1×d` row, an `n×1` column or a `1×1` scalar against the other operand,
//! and the backward pass sums the gradient back down to the operand's shape.
//! Nodes that do not depend on any variable leaf are never differentiated.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a stride-1, zero-padded ("same") square convolution over
/// row-major `C×H×W` images flattened into matrix rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

/// Geometry of a 2×2, stride-2 average pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub ch: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    SumAll(Var),
    MeanRows(Var),
    SumCols(Var),
    LogSumExpCols(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    Row(Var, usize),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    AvgPool2 { x: Var, geom: PoolGeom },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    slots: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient with respect to `v`, or `None` if `v` is not on the loss path.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.slots.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.slots.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_dim(a: usize, b: usize) -> usize {
    if a == b {
        a
    } else if a == 1 {
        b
    } else if b == 1 {
        a
    } else {
        panic!("cannot broadcast dimensions {a} and {b}")
    }
}

fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if g.nrows() != shape.0 {
        debug_assert_eq!(shape.0, 1);
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if g.ncols() != shape.1 {
        debug_assert_eq!(shape.1, 1);
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_logsumexp(a: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), 1));
    for (i, row) in a.rows().into_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        if m == f64::NEG_INFINITY {
            out[[i, 0]] = f64::NEG_INFINITY;
            continue;
        }
        let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
        out[[i, 0]] = m + s.ln();
    }
    out
}

fn im2col(x: ndarray::ArrayView1<f64>, g: &ConvGeom) -> Array2<f64> {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let pad = (k / 2) as isize;
    let mut cols = Array2::zeros((g.in_ch * k * k, h * w));
    for c in 0..g.in_ch {
        let plane = c * h * w;
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let mut row = cols.row_mut(r);
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let ix = xx as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        row[y * w + xx] = x[plane + iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &Array2<f64>, g: &ConvGeom, mut dx: ndarray::ArrayViewMut1<f64>) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let pad = (k / 2) as isize;
    for c in 0..g.in_ch {
        let plane = c * h * w;
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let row = cols.row(r);
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let ix = xx as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[plane + iy as usize * w + ix as usize] += row[y * w + xx];
                    }
                }
            }
        }
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::ConcatCols(vs) => vs.iter().any(|v| self.nodes[v.0].needs_grad),
            Op::Conv2d { x, w, b, .. } => [x, w, b].iter().any(|v| self.nodes[v.0].needs_grad),
            other => {
                let (a, b) = other.parents();
                self.nodes[a.0].needs_grad || b.is_some_and(|b| self.nodes[b.0].needs_grad)
            }
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that is not differentiated.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn binary_shape(&self, a: Var, b: Var) -> (usize, usize) {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        (broadcast_dim(ar, br), broadcast_dim(ac, bc))
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
        let shape = self.binary_shape(a, b);
        let av = self.value(a).broadcast(shape).expect("broadcast");
        let bv = self.value(b).broadcast(shape).expect("broadcast");
        Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_broadcast(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_broadcast(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_broadcast(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_broadcast(a, b, |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::Offset(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x < 0.0 { 0.0 } else { x });
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Sum of all entries, as a `1×1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Mean of all entries, as a `1×1` value.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means: `n×d -> 1×d`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    /// Row sums: `n×d -> n×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    /// Row-wise log-sum-exp with a max shift: `n×d -> n×1`.
    pub fn logsumexp_cols(&mut self, a: Var) -> Var {
        let v = row_logsumexp(self.value(a).view());
        self.push(v, Op::LogSumExpCols(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let lse = row_logsumexp(self.value(a).view());
        let v = self.value(a) - &lse;
        self.push(v, Op::LogSoftmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Row `i` of `a` as a `1×d` value.
    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let v = self.value(a).slice(s![i..i + 1, ..]).to_owned();
        self.push(v, Op::Row(a, i))
    }

    /// Same-padded stride-1 convolution. `x` is `n×(in_ch·H·W)`, `w` is
    /// `out_ch×(in_ch·k·k)` and `b` is `1×out_ch`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let hw = geom.height * geom.width;
        let xv = self.value(x);
        assert_eq!(xv.ncols(), geom.in_ch * hw, "conv input width");
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = Array2::zeros((xv.nrows(), geom.out_ch * hw));
        for (i, xrow) in xv.rows().into_iter().enumerate() {
            let cols = im2col(xrow, &geom);
            let y = wv.dot(&cols);
            let mut orow = out.row_mut(i);
            for c in 0..geom.out_ch {
                let bias = bv[[0, c]];
                for p in 0..hw {
                    orow[c * hw + p] = y[[c, p]] + bias;
                }
            }
        }
        self.push(out, Op::Conv2d { x, w, b, geom })
    }

    pub fn avg_pool2(&mut self, x: Var, geom: PoolGeom) -> Var {
        let (h, w) = (geom.height, geom.width);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x);
        assert_eq!(xv.ncols(), geom.ch * h * w, "pool input width");
        let mut out = Array2::zeros((xv.nrows(), geom.ch * oh * ow));
        for (i, xrow) in xv.rows().into_iter().enumerate() {
            let mut orow = out.row_mut(i);
            for c in 0..geom.ch {
                for y in 0..oh {
                    for xx in 0..ow {
                        let base = c * h * w + 2 * y * w + 2 * xx;
                        let s = xrow[base] + xrow[base + 1] + xrow[base + w] + xrow[base + w + 1];
                        orow[c * oh * ow + y * ow + xx] = 0.25 * s;
                    }
                }
            }
        }
        self.push(out, Op::AvgPool2 { x, geom })
    }

    /// Reverse pass from a `1×1` loss.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::NoForward);
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape(format!(
                "loss must be 1x1, got {:?}",
                self.shape(loss)
            )));
        }
        let mut slots: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        slots[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            self.propagate(i, &g, &mut slots);
            slots[i] = Some(g);
        }
        Ok(Grads { slots })
    }

    fn accumulate(&self, slots: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut slots[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, slots: &mut [Option<Array2<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.accumulate(slots, *a, reduce_to(g.clone(), self.shape(*a)));
                }
                if self.needs(*b) {
                    self.accumulate(slots, *b, reduce_to(g.clone(), self.shape(*b)));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    self.accumulate(slots, *a, reduce_to(g.clone(), self.shape(*a)));
                }
                if self.needs(*b) {
                    self.accumulate(slots, *b, reduce_to(-g, self.shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = g * self.value(*b);
                    self.accumulate(slots, *a, reduce_to(ga, self.shape(*a)));
                }
                if self.needs(*b) {
                    let gb = g * self.value(*a);
                    self.accumulate(slots, *b, reduce_to(gb, self.shape(*b)));
                }
            }
            Op::Div(a, b) => {
                if self.needs(*a) {
                    let ga = g / self.value(*b);
                    self.accumulate(slots, *a, reduce_to(ga, self.shape(*a)));
                }
                if self.needs(*b) {
                    let gb = -(g * out) / self.value(*b);
                    self.accumulate(slots, *b, reduce_to(gb, self.shape(*b)));
                }
            }
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(slots, *a, g.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    self.accumulate(slots, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => self.accumulate(slots, *a, g.t().to_owned()),
            Op::Scale(a, c) => self.accumulate(slots, *a, g * *c),
            Op::Offset(a) => self.accumulate(slots, *a, g.clone()),
            Op::Relu(a) => {
                let ga = Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                self.accumulate(slots, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| g * sigmoid(x));
                self.accumulate(slots, *a, ga);
            }
            Op::Exp(a) => self.accumulate(slots, *a, g * out),
            Op::Ln(a) => self.accumulate(slots, *a, g / self.value(*a)),
            Op::Sqrt(a) => {
                let ga = Zip::from(g).and(out).map_collect(|&g, &y| 0.5 * g / y);
                self.accumulate(slots, *a, ga);
            }
            Op::Square(a) => {
                let ga = Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| 2.0 * g * x);
                self.accumulate(slots, *a, ga);
            }
            Op::SumAll(a) => {
                let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                self.accumulate(slots, *a, ga);
            }
            Op::MeanRows(a) => {
                let (n, d) = self.shape(*a);
                let ga = (g / n as f64).broadcast((n, d)).expect("row").to_owned();
                self.accumulate(slots, *a, ga);
            }
            Op::SumCols(a) => {
                let ga = g.broadcast(self.shape(*a)).expect("col").to_owned();
                self.accumulate(slots, *a, ga);
            }
            Op::LogSumExpCols(a) => {
                let av = self.value(*a);
                let mut ga = av - out;
                ga.mapv_inplace(f64::exp);
                ga *= g;
                self.accumulate(slots, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                let soft = out.mapv(f64::exp);
                let ga = g - &(soft * &gsum);
                self.accumulate(slots, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.needs(*p) {
                        let gp = g.slice(s![.., start..start + w]).to_owned();
                        self.accumulate(slots, *p, gp);
                    }
                    start += w;
                }
            }
            Op::Row(a, r) => {
                let mut ga = Array2::zeros(self.shape(*a));
                ga.row_mut(*r).assign(&g.row(0));
                self.accumulate(slots, *a, ga);
            }
            Op::Conv2d { x, w, b, geom } => self.conv_backward(*x, *w, *b, geom, g, slots),
            Op::AvgPool2 { x, geom } => {
                let (h, w) = (geom.height, geom.width);
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = Array2::zeros(self.shape(*x));
                for (i, grow) in g.rows().into_iter().enumerate() {
                    let mut xrow = gx.row_mut(i);
                    for c in 0..geom.ch {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let q = 0.25 * grow[c * oh * ow + y * ow + xx];
                                let base = c * h * w + 2 * y * w + 2 * xx;
                                xrow[base] += q;
                                xrow[base + 1] += q;
                                xrow[base + w] += q;
                                xrow[base + w + 1] += q;
                            }
                        }
                    }
                }
                self.accumulate(slots, *x, gx);
            }
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeom,
        g: &Array2<f64>,
        slots: &mut [Option<Array2<f64>>],
    ) {
        let hw = geom.height * geom.width;
        let xv = self.value(x);
        let wv = self.value(w);
        let mut gw = Array2::zeros(wv.dim());
        let mut gb = Array2::zeros((1, geom.out_ch));
        let mut gx = self.needs(x).then(|| Array2::zeros(xv.dim()));
        for (i, xrow) in xv.rows().into_iter().enumerate() {
            let gs = g
                .row(i)
                .into_shape_with_order((geom.out_ch, hw))
                .expect("conv grad shape");
            for c in 0..geom.out_ch {
                gb[[0, c]] += gs.row(c).sum();
            }
            if self.needs(w) {
                let cols = im2col(xrow, geom);
                gw += &gs.dot(&cols.t());
            }
            if let Some(gx) = gx.as_mut() {
                let dcols = wv.t().dot(&gs);
                col2im_add(&dcols, geom, gx.row_mut(i));
            }
        }
        self.accumulate(slots, w, gw);
        self.accumulate(slots, b, gb);
        if let Some(gx) = gx {
            self.accumulate(slots, x, gx);
        }
    }
}

impl Op {
    fn parents(&self) -> (Var, Option<Var>) {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                (*a, Some(*b))
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::SumAll(a)
            | Op::MeanRows(a)
            | Op::SumCols(a)
            | Op::LogSumExpCols(a)
            | Op::LogSoftmax(a)
            | Op::Row(a, _)
            | Op::AvgPool2 { x: a, .. } => (*a, None),
            Op::Leaf | Op::ConcatCols(_) | Op::Conv2d { .. } => unreachable!("handled by caller"),
        }
    }
}

/// Central finite-difference gradient of a scalar function of one matrix.
/// Test helper shared by the unit and integration suites.
pub fn finite_difference(
    x: &Array2<f64>,
    step: f64,
    mut f: impl FnMut(&Array2<f64>) -> f64,
) -> Array2<f64> {
    let mut grad = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + step;
        let up = f(&probe);
        probe[[r, c]] = orig - step;
        let down = f(&probe);
        probe[[r, c]] = orig;
        grad[[r, c]] = (up - down) / (2.0 * step);
    }
    grad
}

/// Largest entrywise relative error between two gradients, with entries
/// below `floor` in magnitude compared absolutely against `floor`.
pub fn max_relative_error(a: &Array2<f64>, b: &Array2<f64>, floor: f64) -> f64 {
    Zip::from(a)
        .and(b)
        .fold(0.0f64, |m, &x, &y| m.max((x - y).abs() / x.abs().max(y.abs()).max(floor)))
}
