//! Eagerly recorded computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Nodes are
//! appended after their inputs, so the node vector is already in
//! topological order and `backward` walks it in reverse.

use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Relu(Var),
    Abs(Var),
    Log {
        input: Var,
        eps: f64,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    Matmul(Var, Var),
    Outer(Var, Var),
    RowSum(Var),
    RowL2Norm(Var),
    RowL1Normalize {
        input: Var,
        eps: f64,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    Conv2d(Conv2dNode),
    Upsample(Var),
    PickMean {
        input: Var,
        labels: Vec<Option<usize>>,
    },
}

#[derive(Debug, Clone)]
struct Conv2dNode {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    geom: ConvGeometry,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient, or `None` if no gradient reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad matches value shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Copy of `v` cut out of the graph: same values, no gradient flows back.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        op: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, node, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, node: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, node, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::MulScalar(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `ln(max(x, eps))`.
    pub fn log(&mut self, a: Var, eps: f64) -> Var {
        self.unary(a, |x| x.max(eps).ln(), Op::Log { input: a, eps })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Mean absolute value over all elements.
    pub fn abs_mean(&mut self, a: Var) -> Var {
        let abs = self.abs(a);
        self.mean(abs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let [m, n] = t.dims2()?;
        let src = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(&[n, m], out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ([m, k], [k2, n]) = (ta.dims2()?, tb.dims2()?);
        if k != k2 {
            return Err(shape_mismatch("matmul", ta.shape(), tb.shape()));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for l in 0..k {
                let x = ad[i * k + l];
                if x == 0.0 {
                    continue;
                }
                for (o, &y) in orow.iter_mut().zip(&bd[l * n..(l + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    /// Outer product of two vectors.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || tb.rank() != 1 {
            return Err(shape_mismatch("outer", ta.shape(), tb.shape()));
        }
        let (m, n) = (ta.len(), tb.len());
        let mut out = Vec::with_capacity(m * n);
        for &x in ta.data() {
            out.extend(tb.data().iter().map(|&y| x * y));
        }
        let value = Tensor::new(&[m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Outer(a, b), rg))
    }

    /// Per-row sums of a 2-D tensor.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let [m, n] = t.dims2()?;
        let out = (0..m)
            .map(|i| t.data()[i * n..(i + 1) * n].iter().sum())
            .collect();
        let value = Tensor::new(&[m], out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::RowSum(a), rg))
    }

    /// Per-row Euclidean norms of a 2-D tensor.
    pub fn row_l2_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let [m, n] = t.dims2()?;
        let out = (0..m)
            .map(|i| {
                t.data()[i * n..(i + 1) * n]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let value = Tensor::new(&[m], out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::RowL2Norm(a), rg))
    }

    /// Divides each row by its L1 norm plus `eps`; an all-zero row stays zero.
    pub fn row_l1_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let [m, n] = t.dims2()?;
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(n.max(1)).take(m) {
            let s: f64 = row.iter().map(|x| x.abs()).sum::<f64>() + eps;
            row.iter_mut().for_each(|x| *x /= s);
        }
        let value = Tensor::new(&[m, n], out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::RowL1Normalize { input: a, eps }, rg))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, n, inner) = axis_split(t.shape(), axis)?;
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n)
                    .map(|k| out[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..n {
                    let e = (out[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    out[idx(k)] /= s;
                }
            }
        }
        let value = Tensor::new(t.shape(), out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax { input: a, axis }, rg))
    }

    /// Cross-correlation of a `c_in×H×W` input with a `c_out×c_in×kh×kw`
    /// kernel, plus an optional per-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ti, tw) = (self.value(input), self.value(weight));
        let geom = ConvGeometry::new(ti.shape(), tw.shape(), stride, padding)?;
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.shape() != [geom.c_out] {
                return Err(shape_mismatch("conv2d bias", tb.shape(), &[geom.c_out]));
            }
        }
        let col = geom.im2col(ti.data());
        let np = geom.out_pixels();
        let kk = geom.col_rows();
        let wd = tw.data();
        let mut out = vec![0.0; geom.c_out * np];
        for co in 0..geom.c_out {
            let orow = &mut out[co * np..(co + 1) * np];
            if let Some(b) = bias {
                orow.fill(self.value(b).data()[co]);
            }
            for k in 0..kk {
                let wv = wd[co * kk + k];
                for (o, &c) in orow.iter_mut().zip(&col[k * np..(k + 1) * np]) {
                    *o += wv * c;
                }
            }
        }
        let value = Tensor::new(&[geom.c_out, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d(Conv2dNode {
                input,
                weight,
                bias,
                geom,
            }),
            rg,
        ))
    }

    /// Align-corners bilinear upsampling of a `c×h×w` tensor to `c×H×W`.
    pub fn bilinear_upsample(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.value(a);
        let [c, h, w] = t.dims3()?;
        if out_h < h || out_w < w || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "bilinear_upsample: target {out_h}x{out_w} smaller than input {h}x{w}"
            )));
        }
        let ys = interp_axis(h, out_h);
        let xs = interp_axis(w, out_w);
        let src = t.data();
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let value = Tensor::new(&[c, out_h, out_w], out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Upsample(a), rg))
    }

    /// Mean over labelled positions of `input[label, pos]` for a `C×…` input
    /// whose trailing dimensions flatten to one position per label. `None`
    /// labels are skipped; the result is 0 when every label is `None`.
    pub fn pick_mean(&mut self, a: Var, labels: &[Option<usize>]) -> Result<Var> {
        let t = self.value(a);
        let c = *t
            .shape()
            .first()
            .ok_or_else(|| Error::Dimension("pick_mean on scalar".into()))?;
        let n = t.len() / c.max(1);
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "pick_mean: {} labels for {n} positions",
                labels.len()
            )));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, l) in labels.iter().enumerate() {
            if let Some(l) = *l {
                if l >= c {
                    return Err(Error::Dimension(format!(
                        "label {l} out of range for {c} classes"
                    )));
                }
                total += t.data()[l * n + i];
                count += 1;
            }
        }
        let v = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::scalar(v),
            Op::PickMean {
                input: a,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element `loss`. Gradients accumulate into
    /// any existing ones; call [`Graph::zero_grad`] to start fresh.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        accumulate(&mut self.nodes[loss.0], &[1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            self.backprop(idx, &op, &g);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn send(&mut self, to: Var, g: &[f64]) {
        if self.nodes[to.0].requires_grad {
            accumulate(&mut self.nodes[to.0], g);
        }
    }

    fn backprop(&mut self, idx: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(a, g);
                self.send(b, g);
            }
            Op::Sub(a, b) => {
                self.send(a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.send(b, &neg);
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let ga = zip(g, self.value(b).data(), |g, y| g * y);
                    self.send(a, &ga);
                }
                if self.rg(b) {
                    let gb = zip(g, self.value(a).data(), |g, x| g * x);
                    self.send(b, &gb);
                }
            }
            Op::Div(a, b) => {
                if self.rg(a) {
                    let ga = zip(g, self.value(b).data(), |g, y| g / y);
                    self.send(a, &ga);
                }
                if self.rg(b) {
                    let out = self.nodes[idx].value.data();
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(out)
                        .zip(self.value(b).data())
                        .map(|((g, q), y)| -g * q / y)
                        .collect();
                    self.send(b, &gb);
                }
            }
            Op::AddScalar(a) => self.send(a, g),
            Op::MulScalar(a, s) => {
                let ga: Vec<f64> = g.iter().map(|x| x * s).collect();
                self.send(a, &ga);
            }
            Op::Relu(a) => {
                let ga = zip(
                    g,
                    self.value(a).data(),
                    |g, x| if x > 0.0 { g } else { 0.0 },
                );
                self.send(a, &ga);
            }
            Op::Abs(a) => {
                let ga = zip(g, self.value(a).data(), |g, x| g * sign(x));
                self.send(a, &ga);
            }
            Op::Log { input, eps } => {
                let ga = zip(g, self.value(input).data(), |g, x| {
                    if x > eps {
                        g / x
                    } else {
                        0.0
                    }
                });
                self.send(input, &ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.value(a).len()];
                self.send(a, &ga);
            }
            Op::Mean(a) => {
                let n = self.value(a).len();
                let ga = vec![g[0] / n as f64; n];
                self.send(a, &ga);
            }
            Op::Reshape(a) => self.send(a, g),
            Op::Transpose(a) => {
                let [m, n] = self.value(a).dims2().expect("rank checked in forward");
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                self.send(a, &ga);
            }
            Op::Matmul(a, b) => self.backprop_matmul(a, b, g),
            Op::Outer(a, b) => {
                let (m, n) = (self.value(a).len(), self.value(b).len());
                if self.rg(a) {
                    let bd = self.value(b).data();
                    let ga: Vec<f64> = (0..m)
                        .map(|i| {
                            g[i * n..(i + 1) * n]
                                .iter()
                                .zip(bd)
                                .map(|(g, y)| g * y)
                                .sum()
                        })
                        .collect();
                    self.send(a, &ga);
                }
                if self.rg(b) {
                    let ad = self.value(a).data();
                    let mut gb = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j] * ad[i];
                        }
                    }
                    self.send(b, &gb);
                }
            }
            Op::RowSum(a) => {
                let [m, n] = self.value(a).dims2().expect("rank checked in forward");
                let mut ga = Vec::with_capacity(m * n);
                for &gi in &g[..m] {
                    ga.extend(std::iter::repeat_n(gi, n));
                }
                self.send(a, &ga);
            }
            Op::RowL2Norm(a) => {
                let t = self.value(a);
                let [m, n] = t.dims2().expect("rank checked in forward");
                let norms = self.nodes[idx].value.data();
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    if norms[i] > 0.0 {
                        for j in 0..n {
                            ga[i * n + j] = g[i] * t.data()[i * n + j] / norms[i];
                        }
                    }
                }
                self.send(a, &ga);
            }
            Op::RowL1Normalize { input, eps } => {
                let t = self.value(input);
                let [m, n] = t.dims2().expect("rank checked in forward");
                let y = self.nodes[idx].value.data();
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let s: f64 = t.data()[r.clone()].iter().map(|x| x.abs()).sum::<f64>() + eps;
                    let gy: f64 = g[r.clone()]
                        .iter()
                        .zip(&y[r.clone()])
                        .map(|(g, y)| g * y)
                        .sum();
                    for j in r {
                        ga[j] = (g[j] - sign(t.data()[j]) * gy) / s;
                    }
                }
                self.send(input, &ga);
            }
            Op::Softmax { input, axis } => {
                let y = self.nodes[idx].value.data();
                let (outer, n, inner) =
                    axis_split(self.nodes[idx].value.shape(), axis).expect("checked in forward");
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            ga[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                self.send(input, &ga);
            }
            Op::Conv2d(ref node) => self.backprop_conv(node, g),
            Op::Upsample(a) => {
                let [c, h, w] = self.value(a).dims3().expect("rank checked in forward");
                let [_, oh, ow] = self.nodes[idx].value.dims3().expect("rank 3");
                let ys = interp_axis(h, oh);
                let xs = interp_axis(w, ow);
                let mut ga = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &mut ga[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let gv = g[(ch * oh + oy) * ow + ox];
                            plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                            plane[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                self.send(a, &ga);
            }
            Op::PickMean { input, ref labels } => {
                let len = self.value(input).len();
                let n = labels.len();
                let count = labels.iter().filter(|l| l.is_some()).count();
                let mut ga = vec![0.0; len];
                if count > 0 {
                    let share = g[0] / count as f64;
                    for (i, l) in labels.iter().enumerate() {
                        if let Some(l) = *l {
                            ga[l * n + i] = share;
                        }
                    }
                }
                self.send(input, &ga);
            }
        }
    }

    fn backprop_matmul(&mut self, a: Var, b: Var, g: &[f64]) {
        let [m, k] = self.value(a).dims2().expect("rank checked in forward");
        let [_, n] = self.value(b).dims2().expect("rank checked in forward");
        if self.rg(a) {
            let bd = self.value(b).data();
            let mut ga = vec![0.0; m * k];
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for l in 0..k {
                    ga[i * k + l] = grow
                        .iter()
                        .zip(&bd[l * n..(l + 1) * n])
                        .map(|(x, y)| x * y)
                        .sum();
                }
            }
            self.send(a, &ga);
        }
        if self.rg(b) {
            let ad = self.value(a).data();
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for l in 0..k {
                    let x = ad[i * k + l];
                    for (o, &gv) in gb[l * n..(l + 1) * n].iter_mut().zip(grow) {
                        *o += x * gv;
                    }
                }
            }
            self.send(b, &gb);
        }
    }

    fn backprop_conv(&mut self, node: &Conv2dNode, g: &[f64]) {
        let geom = &node.geom;
        let np = geom.out_pixels();
        let kk = geom.col_rows();
        if let Some(b) = node.bias {
            if self.rg(b) {
                let gb: Vec<f64> = g.chunks_exact(np).map(|row| row.iter().sum()).collect();
                self.send(b, &gb);
            }
        }
        if self.rg(node.weight) {
            let col = geom.im2col(self.value(node.input).data());
            let mut gw = vec![0.0; geom.c_out * kk];
            for co in 0..geom.c_out {
                let grow = &g[co * np..(co + 1) * np];
                for k in 0..kk {
                    gw[co * kk + k] = grow
                        .iter()
                        .zip(&col[k * np..(k + 1) * np])
                        .map(|(x, y)| x * y)
                        .sum();
                }
            }
            self.send(node.weight, &gw);
        }
        if self.rg(node.input) {
            let wd = self.value(node.weight).data();
            let mut gcol = vec![0.0; kk * np];
            for co in 0..geom.c_out {
                let grow = &g[co * np..(co + 1) * np];
                for k in 0..kk {
                    let wv = wd[co * kk + k];
                    for (o, &gv) in gcol[k * np..(k + 1) * np].iter_mut().zip(grow) {
                        *o += wv * gv;
                    }
                }
            }
            let gi = geom.col2im(&gcol);
            self.send(node.input, &gi);
        }
    }
}

fn accumulate(node: &mut Node, g: &[f64]) {
    match node.grad.as_mut() {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => node.grad = Some(g.to_vec()),
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Source indices and weight for each output coordinate under the
/// align-corners convention.
fn interp_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            if n_out == 1 || n_in == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let i0 = (pos.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

#[derive(Debug, Clone)]
struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[c_in, h, w], &[c_out, c_in2, kh, kw]) = (input, weight) else {
            return Err(shape_mismatch("conv2d", input, weight));
        };
        if c_in != c_in2 || kh == 0 || kw == 0 || stride == 0 {
            return Err(shape_mismatch("conv2d", input, weight));
        }
        let out = |n: usize, k: usize| (n + 2 * pad).checked_sub(k).map(|v| v / stride + 1);
        match (out(h, kh), out(w, kw)) {
            (Some(out_h), Some(out_w)) if out_h >= 1 && out_w >= 1 => Ok(Self {
                c_in,
                h,
                w,
                c_out,
                kh,
                kw,
                stride,
                pad,
                out_h,
                out_w,
            }),
            _ => Err(Error::Dimension(format!(
                "conv2d: non-positive output size for input {input:?}, kernel {weight:?}, stride {stride}, padding {pad}"
            ))),
        }
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Valid output range along one axis for kernel offset `k`.
    fn span(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        // input index = o*stride + k - pad must lie in [0, n_in)
        let lo = (self.pad.saturating_sub(k)).div_ceil(self.stride);
        let hi = if n_in + self.pad > k {
            ((n_in + self.pad - k - 1) / self.stride + 1).min(n_out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let np = self.out_pixels();
        let mut col = vec![0.0; self.col_rows() * np];
        for ci in 0..self.c_in {
            let plane = &input[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (y_lo, y_hi) = self.span(ky, self.h, self.out_h);
                for kx in 0..self.kw {
                    let (x_lo, x_hi) = self.span(kx, self.w, self.out_w);
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * np..(row + 1) * np];
                    for oy in y_lo..y_hi {
                        let iy = oy * self.stride + ky - self.pad;
                        for ox in x_lo..x_hi {
                            let ix = ox * self.stride + kx - self.pad;
                            dst[oy * self.out_w + ox] = plane[iy * self.w + ix];
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64]) -> Vec<f64> {
        let np = self.out_pixels();
        let mut out = vec![0.0; self.c_in * self.h * self.w];
        for ci in 0..self.c_in {
            let plane = &mut out[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (y_lo, y_hi) = self.span(ky, self.h, self.out_h);
                for kx in 0..self.kw {
                    let (x_lo, x_hi) = self.span(kx, self.w, self.out_w);
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[row * np..(row + 1) * np];
                    for oy in y_lo..y_hi {
                        let iy = oy * self.stride + ky - self.pad;
                        for ox in x_lo..x_hi {
                            let ix = ox * self.stride + kx - self.pad;
                            plane[iy * self.w + ix] += src[oy * self.out_w + ox];
                        }
                    }
                }
            }
        }
        out
    }
}
