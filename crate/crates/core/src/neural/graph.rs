//! Tape-based reverse-mode differentiation over dense `f64` arrays.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape in reverse and accumulates gradients into each input.
//! Point features are `[n, c]`, images are `[c, h, w]`.

use crate::error::{PctError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, s: usize, p: usize) -> Option<Self> {
        if h + 2 * p < k || w + 2 * p < k {
            return None;
        }
        Some(Self {
            c,
            h,
            w,
            k,
            s,
            p,
            oh: (h + 2 * p - k) / s + 1,
            ow: (w + 2 * p - k) / s + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npos = g.positions();
    let mut cols = vec![0.0; g.rows() * npos];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[r * npos..(r + 1) * npos];
                for oi in 0..g.oh {
                    let ii = (oi * g.s + ki) as isize - g.p as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..];
                    for oj in 0..g.ow {
                        let jj = (oj * g.s + kj) as isize - g.p as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[oi * g.ow + oj] = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let npos = g.positions();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let src = &cols[r * npos..(r + 1) * npos];
                for oi in 0..g.oh {
                    let ii = (oi * g.s + ki) as isize - g.p as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + ii as usize) * g.w;
                    for oj in 0..g.ow {
                        let jj = (oj * g.s + kj) as isize - g.p as isize;
                        if jj >= 0 && jj < g.w as isize {
                            out[base + jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `c (+)= op(a) · op(b)` with `op(a)` of shape `[m, k]` and `op(b)` `[k, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices have exactly the lengths implied by the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    ConvT2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Square(NodeId),
    MeanRows(NodeId),
    ConcatBroadcast(NodeId, NodeId),
    ConcatChannels(NodeId, NodeId),
    Channel(NodeId, usize),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    MatchedDistance {
        pred: NodeId,
        target: Vec<[f64; 3]>,
        pairs: Vec<(usize, usize, f64)>,
    },
    BceWithLogits {
        logits: NodeId,
        target: f64,
    },
    MaskedRms {
        a: NodeId,
        target: Vec<f64>,
        mask: Vec<bool>,
        scale: f64,
    },
    BernoulliSt {
        logits: NodeId,
        noise: Vec<f64>,
        tau: f64,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic noise `ln(u / (1 - u))` for `u` in (0, 1).
pub fn logistic(u: f64) -> f64 {
    let u = u.clamp(1e-12, 1.0 - 1e-12);
    (u / (1.0 - u)).ln()
}

pub(crate) fn sigmoid_fn(x: f64) -> f64 {
    sigmoid(x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    /// Gradient of the last `backward` root with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(PctError::shape(
                "leaf",
                format!("shape {shape:?} does not hold {} values", value.len()),
            ));
        }
        Ok(self.push(shape, value, Op::Leaf))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(PctError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    /// Adds a per-column bias to `[n, m]` features.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let m = *sa.last().unwrap_or(&0);
        if sa.len() != 2 || self.value(bias).len() != m {
            return Err(PctError::shape("add_bias", format!("{sa:?} + {:?}", self.shape(bias))));
        }
        let b = self.value(bias).to_vec();
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(m.max(1)) {
            for (o, bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        Ok(self.push(sa, out, Op::AddBias(a, bias)))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let err = || PctError::shape("conv2d", format!("input {sx:?}, weight {sw:?}"));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || self.value(b).len() != sw[0] {
            return Err(err());
        }
        let geom = ConvGeom::new(sx[0], sx[1], sx[2], sw[2], stride, pad).ok_or_else(err)?;
        let o = sw[0];
        let cols = im2col(self.value(x), &geom);
        let npos = geom.positions();
        let mut out = vec![0.0; o * npos];
        gemm(o, geom.rows(), npos, self.value(w), false, &cols, false, &mut out, false);
        let bias = self.value(b).to_vec();
        for (ch, row) in out.chunks_mut(npos).enumerate() {
            row.iter_mut().for_each(|v| *v += bias[ch]);
        }
        Ok(self.push(vec![o, geom.oh, geom.ow], out, Op::Conv2d { x, w, b, geom }))
    }

    /// Transposed convolution; weight is `[c_in, c_out, k, k]` and the output
    /// is `(h - 1) * stride - 2 * pad + k` high.
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let err = || PctError::shape("conv_transpose2d", format!("input {sx:?}, weight {sw:?}"));
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] || sw[2] != sw[3] || self.value(b).len() != sw[1] {
            return Err(err());
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (o, k) = (sw[1], sw[2]);
        let oh = ((h - 1) * stride + k).checked_sub(2 * pad).ok_or_else(err)?;
        let ow = ((wd - 1) * stride + k).checked_sub(2 * pad).ok_or_else(err)?;
        let geom = ConvGeom::new(o, oh, ow, k, stride, pad).ok_or_else(err)?;
        if geom.oh != h || geom.ow != wd {
            return Err(err());
        }
        let mut cols = vec![0.0; geom.rows() * h * wd];
        gemm(geom.rows(), cin, h * wd, self.value(w), true, self.value(x), false, &mut cols, false);
        let mut out = vec![0.0; o * oh * ow];
        col2im(&cols, &geom, &mut out);
        let bias = self.value(b).to_vec();
        for (ch, plane) in out.chunks_mut(oh * ow).enumerate() {
            plane.iter_mut().for_each(|v| *v += bias[ch]);
        }
        Ok(self.push(vec![o, oh, ow], out, Op::ConvT2d { x, w, b, geom }))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let out = self.value(a).iter().map(|&v| f(v)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.unary(a, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.unary(a, |v| v * s, Op::Scale(a, s))
    }

    /// `[n, c]` → `[1, c]` column means.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(PctError::shape("mean_rows", format!("{s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        let mut out = vec![0.0; c];
        for row in self.value(a).chunks(c.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        Ok(self.push(vec![1, c], out, Op::MeanRows(a)))
    }

    /// `[n, c1]` ⧺ broadcast `[1, c2]` → `[n, c1 + c2]`.
    pub fn concat_broadcast(&mut self, a: NodeId, g: NodeId) -> Result<NodeId> {
        let (sa, sg) = (self.shape(a).to_vec(), self.shape(g).to_vec());
        if sa.len() != 2 || sg.len() != 2 || sg[0] != 1 {
            return Err(PctError::shape("concat_broadcast", format!("{sa:?} ++ {sg:?}")));
        }
        let (n, c1, c2) = (sa[0], sa[1], sg[1]);
        let gv = self.value(g).to_vec();
        let mut out = Vec::with_capacity(n * (c1 + c2));
        for row in self.value(a).chunks(c1.max(1)).take(n) {
            out.extend_from_slice(row);
            out.extend_from_slice(&gv);
        }
        Ok(self.push(vec![n, c1 + c2], out, Op::ConcatBroadcast(a, g)))
    }

    /// Channel concatenation of `[c1, h, w]` and `[c2, h, w]`.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(PctError::shape("concat_channels", format!("{sa:?} ++ {sb:?}")));
        }
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        Ok(self.push(vec![sa[0] + sb[0], sa[1], sa[2]], out, Op::ConcatChannels(a, b)))
    }

    /// Single channel `c` of a `[C, h, w]` node as `[1, h, w]`.
    pub fn channel(&mut self, a: NodeId, c: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || c >= s[0] {
            return Err(PctError::shape("channel", format!("channel {c} of {s:?}")));
        }
        let plane = s[1] * s[2];
        let out = self.value(a)[c * plane..(c + 1) * plane].to_vec();
        Ok(self.push(vec![1, s[1], s[2]], out, Op::Channel(a, c)))
    }

    fn binary_check(&self, a: NodeId, b: NodeId, name: &str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(PctError::shape(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.binary_check(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(s, out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.binary_check(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(s, out, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().sum();
        self.push(vec![1], vec![v], Op::Sum(a))
    }

    /// Weighted combination of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for &(id, w) in terms {
            let t = self.scale(id, w);
            acc = Some(match acc {
                None => t,
                Some(prev) => self.add(prev, t)?,
            });
        }
        acc.ok_or_else(|| PctError::shape("weighted_sum", "no terms"))
    }

    /// `Σ w · ‖pred[r] − target[t]‖` over `(r, t, w)` pairs; `pred` is `[n, 3]`.
    pub fn matched_distance(&mut self, pred: NodeId, target: Vec<[f64; 3]>, pairs: Vec<(usize, usize, f64)>) -> Result<NodeId> {
        let s = self.shape(pred).to_vec();
        if s.len() != 2 || s[1] != 3 {
            return Err(PctError::shape("matched_distance", format!("{s:?}")));
        }
        if pairs.iter().any(|&(r, t, _)| r >= s[0] || t >= target.len()) {
            return Err(PctError::shape("matched_distance", "pair index out of range"));
        }
        let p = self.value(pred);
        let total = pairs
            .iter()
            .map(|&(r, t, w)| {
                let d: f64 = (0..3).map(|a| (p[r * 3 + a] - target[t][a]).powi(2)).sum();
                w * d.sqrt()
            })
            .sum();
        Ok(self.push(vec![1], vec![total], Op::MatchedDistance { pred, target, pairs }))
    }

    /// Mean binary cross-entropy of `logits` against a constant label.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: f64) -> NodeId {
        let v = self.value(logits);
        let n = v.len().max(1) as f64;
        let loss = v
            .iter()
            .map(|&z| z.max(0.0) - z * target + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        self.push(vec![1], vec![loss], Op::BceWithLogits { logits, target })
    }

    /// RMS of `scale · a − target` over masked entries; zero for an empty mask.
    pub fn masked_rms(&mut self, a: NodeId, target: Vec<f64>, mask: Vec<bool>, scale: f64) -> Result<NodeId> {
        let v = self.value(a);
        if target.len() != v.len() || mask.len() != v.len() {
            return Err(PctError::shape("masked_rms", "target/mask length mismatch"));
        }
        let (mut sum, mut count) = (0.0, 0usize);
        for k in 0..v.len() {
            if mask[k] {
                let d = scale * v[k] - target[k];
                sum += d * d;
                count += 1;
            }
        }
        let rms = if count == 0 { 0.0 } else { (sum / count as f64).sqrt() };
        let shape = vec![1];
        Ok(self.push(
            shape,
            vec![rms],
            Op::MaskedRms {
                a,
                target,
                mask,
                scale,
            },
        ))
    }

    /// Hard Bernoulli sample `1[z + noise > 0]` whose backward pass uses the
    /// relaxed `sigmoid((z + noise) / tau)` (straight-through estimator).
    pub fn bernoulli_st(&mut self, logits: NodeId, noise: Vec<f64>, tau: f64) -> Result<NodeId> {
        let v = self.value(logits);
        if noise.len() != v.len() {
            return Err(PctError::shape("bernoulli_st", "noise length mismatch"));
        }
        let out = v.iter().zip(&noise).map(|(z, n)| if z + n > 0.0 { 1.0 } else { 0.0 }).collect();
        let shape = self.shape(logits).to_vec();
        Ok(self.push(shape, out, Op::BernoulliSt { logits, noise, tau }))
    }

    fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
        grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(PctError::shape("backward", "root must be scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let lens = |id: NodeId| self.nodes[id.0].value.len();
            let val = |id: NodeId| &self.nodes[id.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let ga = Self::acc(&mut grads, *a, m * k);
                    gemm(m, n, k, &gy, false, val(*b), true, ga, true);
                    let gb = Self::acc(&mut grads, *b, k * n);
                    gemm(k, m, n, val(*a), true, &gy, false, gb, true);
                }
                Op::AddBias(a, bias) => {
                    let m = lens(*bias);
                    let ga = Self::acc(&mut grads, *a, gy.len());
                    ga.iter_mut().zip(&gy).for_each(|(g, d)| *g += d);
                    let gb = Self::acc(&mut grads, *bias, m);
                    for row in gy.chunks(m.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let o = self.nodes[w.0].shape[0];
                    let npos = geom.positions();
                    let cols = im2col(val(*x), geom);
                    let gw = Self::acc(&mut grads, *w, o * geom.rows());
                    gemm(o, npos, geom.rows(), &gy, false, &cols, true, gw, true);
                    let gb = Self::acc(&mut grads, *b, o);
                    for (ch, row) in gy.chunks(npos).enumerate() {
                        gb[ch] += row.iter().sum::<f64>();
                    }
                    let mut dcols = vec![0.0; geom.rows() * npos];
                    gemm(geom.rows(), o, npos, val(*w), true, &gy, false, &mut dcols, false);
                    let gx = Self::acc(&mut grads, *x, lens(*x));
                    col2im(&dcols, geom, gx);
                }
                Op::ConvT2d { x, w, b, geom } => {
                    let sx = &self.nodes[x.0].shape;
                    let (cin, hw) = (sx[0], sx[1] * sx[2]);
                    let cols = im2col(&gy, geom);
                    let gx = Self::acc(&mut grads, *x, cin * hw);
                    gemm(cin, geom.rows(), hw, val(*w), false, &cols, false, gx, true);
                    let gw = Self::acc(&mut grads, *w, cin * geom.rows());
                    gemm(cin, hw, geom.rows(), val(*x), false, &cols, true, gw, true);
                    let plane = geom.h * geom.w;
                    let gb = Self::acc(&mut grads, *b, geom.c);
                    for (ch, p) in gy.chunks(plane).enumerate() {
                        gb[ch] += p.iter().sum::<f64>();
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let xa = val(*a);
                    let ga = Self::acc(&mut grads, *a, xa.len());
                    for k in 0..xa.len() {
                        ga[k] += if xa[k] > 0.0 { gy[k] } else { slope * gy[k] };
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = Self::acc(&mut grads, *a, y.len());
                    for k in 0..y.len() {
                        ga[k] += gy[k] * y[k] * (1.0 - y[k]);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = Self::acc(&mut grads, *a, y.len());
                    for k in 0..y.len() {
                        ga[k] += gy[k] * (1.0 - y[k] * y[k]);
                    }
                }
                Op::Square(a) => {
                    let xa = val(*a);
                    let ga = Self::acc(&mut grads, *a, xa.len());
                    for k in 0..xa.len() {
                        ga[k] += 2.0 * xa[k] * gy[k];
                    }
                }
                Op::Scale(a, s) => {
                    let ga = Self::acc(&mut grads, *a, gy.len());
                    ga.iter_mut().zip(&gy).for_each(|(g, d)| *g += s * d);
                }
                Op::MeanRows(a) => {
                    let sa = &self.nodes[a.0].shape;
                    let (n, c) = (sa[0], sa[1]);
                    let ga = Self::acc(&mut grads, *a, n * c);
                    for row in ga.chunks_mut(c.max(1)) {
                        row.iter_mut().zip(&gy).for_each(|(g, d)| *g += d / n as f64);
                    }
                }
                Op::ConcatBroadcast(a, gnode) => {
                    let sa = &self.nodes[a.0].shape;
                    let (n, c1) = (sa[0], sa[1]);
                    let c2 = lens(*gnode);
                    let width = c1 + c2;
                    {
                        let ga = Self::acc(&mut grads, *a, n * c1);
                        for r in 0..n {
                            for c in 0..c1 {
                                ga[r * c1 + c] += gy[r * width + c];
                            }
                        }
                    }
                    let gg = Self::acc(&mut grads, *gnode, c2);
                    for r in 0..n {
                        for c in 0..c2 {
                            gg[c] += gy[r * width + c1 + c];
                        }
                    }
                }
                Op::ConcatChannels(a, b) => {
                    let la = lens(*a);
                    let lb = lens(*b);
                    let ga = Self::acc(&mut grads, *a, la);
                    ga.iter_mut().zip(&gy[..la]).for_each(|(g, d)| *g += d);
                    let gb = Self::acc(&mut grads, *b, lb);
                    gb.iter_mut().zip(&gy[la..]).for_each(|(g, d)| *g += d);
                }
                Op::Channel(a, c) => {
                    let plane = gy.len();
                    let ga = Self::acc(&mut grads, *a, lens(*a));
                    ga[c * plane..(c + 1) * plane]
                        .iter_mut()
                        .zip(&gy)
                        .for_each(|(g, d)| *g += d);
                }
                Op::Add(a, b) => {
                    for id in [*a, *b] {
                        let g = Self::acc(&mut grads, id, gy.len());
                        g.iter_mut().zip(&gy).for_each(|(g, d)| *g += d);
                    }
                }
                Op::Mul(a, b) => {
                    let (xa, xb) = (val(*a), val(*b));
                    {
                        let ga = Self::acc(&mut grads, *a, gy.len());
                        for k in 0..gy.len() {
                            ga[k] += gy[k] * xb[k];
                        }
                    }
                    let gb = Self::acc(&mut grads, *b, gy.len());
                    for k in 0..gy.len() {
                        gb[k] += gy[k] * xa[k];
                    }
                }
                Op::Sum(a) => {
                    let ga = Self::acc(&mut grads, *a, lens(*a));
                    ga.iter_mut().for_each(|g| *g += gy[0]);
                }
                Op::MatchedDistance { pred, target, pairs } => {
                    let p = val(*pred);
                    let gp = Self::acc(&mut grads, *pred, p.len());
                    for &(r, t, w) in pairs {
                        let d = [p[r * 3] - target[t][0], p[r * 3 + 1] - target[t][1], p[r * 3 + 2] - target[t][2]];
                        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                        if norm > 0.0 {
                            for a in 0..3 {
                                gp[r * 3 + a] += gy[0] * w * d[a] / norm;
                            }
                        }
                    }
                }
                Op::BceWithLogits { logits, target } => {
                    let z = val(*logits);
                    let n = z.len().max(1) as f64;
                    let gz = Self::acc(&mut grads, *logits, z.len());
                    for k in 0..z.len() {
                        gz[k] += gy[0] * (sigmoid(z[k]) - target) / n;
                    }
                }
                Op::MaskedRms { a, target, mask, scale } => {
                    let rms = node.value[0];
                    let xa = val(*a);
                    let count = mask.iter().filter(|&&m| m).count();
                    let ga = Self::acc(&mut grads, *a, xa.len());
                    if rms > 0.0 {
                        for k in 0..xa.len() {
                            if mask[k] {
                                let d = scale * xa[k] - target[k];
                                ga[k] += gy[0] * scale * d / (count as f64 * rms);
                            }
                        }
                    }
                }
                Op::BernoulliSt { logits, noise, tau } => {
                    let z = val(*logits);
                    let gz = Self::acc(&mut grads, *logits, z.len());
                    for k in 0..z.len() {
                        let s = sigmoid((z[k] + noise[k]) / tau);
                        gz[k] += gy[k] * s * (1.0 - s) / tau;
                    }
                }
            }
            grads[idx] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1], vec![3.0]).unwrap();
        let y = g.square(x);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1], vec![0.0]).unwrap();
        let y = g.sigmoid(x);
        assert_eq!(g.value(y), &[0.5]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn conv_transpose_doubles_resolution() {
        let mut g = Graph::new();
        let x = g.leaf(vec![2, 3, 5], vec![1.0; 30]).unwrap();
        let w = g.leaf(vec![2, 4, 4, 4], vec![0.1; 128]).unwrap();
        let b = g.leaf(vec![4], vec![0.0; 4]).unwrap();
        let y = g.conv_transpose2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[4, 6, 10]);
    }

    #[test]
    fn matmul_shape_error() {
        let mut g = Graph::new();
        let a = g.leaf(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.leaf(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(g.matmul(a, b), Err(PctError::Shape { .. })));
    }

    #[test]
    fn masked_rms_value() {
        let mut g = Graph::new();
        let a = g.leaf(vec![4], vec![5.0, 7.0, 1.0, 2.0]).unwrap();
        let r = g
            .masked_rms(a, vec![6.0, 9.0, 0.0, 0.0], vec![true, true, false, false], 1.0)
            .unwrap();
        assert!((g.scalar(r) - 2.5f64.sqrt()).abs() < 1e-12);
    }
}
