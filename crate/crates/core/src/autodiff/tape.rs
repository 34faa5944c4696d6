use super::Array;
use crate::error::{Error, Result};

/// Lower clamp on raw (log-space) Cholesky diagonal entries.
pub const LOG_DIAG_MIN: f64 = -9.210_340_371_976_184; // ln 1e-4
/// Upper clamp on raw (log-space) Cholesky diagonal entries.
pub const LOG_DIAG_MAX: f64 = 9.210_340_371_976_184; // ln 1e4
/// Smallest Cholesky diagonal entry accepted by the Gaussian NLL.
pub const MIN_CHOL_DIAG: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate defects used to prove the gradient checks can fail.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the Gaussian NLL mean gradient by 1.01.
    GnllGradient,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Relu(NodeId),
    Concat(NodeId, NodeId),
    Slice { x: NodeId, start: usize },
    Scale { x: NodeId, factor: f64 },
    Mask { x: NodeId, mask: Vec<f64> },
    ExpDiagonal { x: NodeId, dim: usize },
    Grl { x: NodeId, scale: f64 },
    Sum(NodeId),
    Gnll { m: NodeId, chol: NodeId, grad_m: Vec<f64>, grad_chol: Vec<f64> },
    SoftmaxCe { logits: NodeId, grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Array,
}

/// Append-only record of a forward computation.
///
/// Node ids increase monotonically; [`Tape::backward`] walks them in
/// decreasing order so every gradient is complete before it is consumed.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Gradients of a scalar with respect to every node on a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`; zeros when the scalar does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Array {
        let shape = &self.shapes[id.0];
        match &self.grads[id.0] {
            Some(g) => Array::new(shape.clone(), g.clone()).expect("gradient matches node shape"),
            None => Array::zeros(shape),
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }
}

fn lower_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// `A` such that `A(A+1)/2 == packed`.
fn dim_from_packed(packed: usize) -> Option<usize> {
    let mut a = 0;
    while lower_len(a) < packed {
        a += 1;
    }
    (lower_len(a) == packed).then_some(a)
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

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Array, name: &'static str) -> Result<NodeId> {
        let value = value.check_finite(name)?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Array) -> Result<NodeId> {
        self.push(Op::Leaf, value, "leaf")
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; n * m];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let value = Array::new(vec![n, m], out)?;
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    /// Adds a bias vector to every row of `x` (last axis).
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rank() != 1 || xv.rank() == 0 || xv.last_dim() != bv.len() {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let c = bv.len();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let value = Array::new(xv.shape().to_vec(), data)?;
        self.push(Op::AddBias(x, bias), value, "add_bias")
    }

    /// Elementwise sum of two same-shaped nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Array::new(av.shape().to_vec(), data)?;
        self.push(Op::Add(a, b), value, "add")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Array::new(xv.shape().to_vec(), data)?;
        self.push(Op::Relu(x), value, "relu")
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let compatible = av.rank() == bv.rank()
            && av.rank() >= 1
            && av.shape()[..av.rank() - 1] == bv.shape()[..bv.rank() - 1];
        if !compatible {
            return Err(Error::shape(
                "concat",
                format!("{:?} ++ {:?}", av.shape(), bv.shape()),
            ));
        }
        let (ca, cb) = (av.last_dim(), bv.last_dim());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.rows().zip(bv.rows()) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = ca + cb;
        let value = Array::new(shape, data)?;
        self.push(Op::Concat(a, b), value, "concat")
    }

    /// Takes `len` columns starting at `start` along the last axis.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() == 0 || start + len > xv.last_dim() || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) of {:?}", start + len, xv.shape()),
            ));
        }
        let data = xv
            .rows()
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        let value = Array::new(shape, data)?;
        self.push(Op::Slice { x, start }, value, "slice")
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let value = Array::new(xv.shape().to_vec(), data)?;
        self.push(Op::Scale { x, factor }, value, "scale")
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mask(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::shape(
                "mask",
                format!("mask of {} for {:?}", mask.len(), xv.shape()),
            ));
        }
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Array::new(xv.shape().to_vec(), data)?;
        self.push(Op::Mask { x, mask }, value, "mask")
    }

    /// Packs raw values into lower-triangular Cholesky factors.
    ///
    /// Input `[.., A(A+1)/2]`: the first `A(A-1)/2` entries fill the strict
    /// lower triangle row-major, the last `A` are log-diagonal entries,
    /// clamped to `[LOG_DIAG_MIN, LOG_DIAG_MAX]` and exponentiated. Output
    /// `[.., A, A]`.
    pub fn exp_diagonal(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let packed = xv.last_dim();
        let dim = match (xv.rank(), dim_from_packed(packed)) {
            (1 | 2, Some(d)) if d > 0 => d,
            _ => {
                return Err(Error::shape(
                    "exp_diagonal",
                    format!("{:?} is not a packed lower triangle", xv.shape()),
                ))
            }
        };
        let strict = dim * (dim - 1) / 2;
        let mut data = Vec::with_capacity(xv.outer() * dim * dim);
        for raw in xv.rows() {
            let mut l = vec![0.0; dim * dim];
            let mut k = 0;
            for i in 0..dim {
                for j in 0..i {
                    l[i * dim + j] = raw[k];
                    k += 1;
                }
            }
            for i in 0..dim {
                l[i * dim + i] = raw[strict + i].clamp(LOG_DIAG_MIN, LOG_DIAG_MAX).exp();
            }
            data.extend(l);
        }
        let mut shape = xv.shape()[..xv.rank() - 1].to_vec();
        shape.extend([dim, dim]);
        let value = Array::new(shape, data)?;
        self.push(Op::ExpDiagonal { x, dim }, value, "exp_diagonal")
    }

    /// Gradient reversal: identity forward, `-scale * grad` backward.
    pub fn grl(&mut self, x: NodeId, scale: f64) -> Result<NodeId> {
        if !(scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gradient reversal scale must be positive, got {scale}"
            )));
        }
        let value = self.value(x).clone();
        self.push(Op::Grl { x, scale }, value, "grl")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Array::scalar(total), "sum")
    }

    /// Mean multivariate Gaussian negative log-likelihood over a batch.
    ///
    /// Per sample `0.5 * (r' (L L')^-1 r + log det(L L') + A ln 2pi)` with
    /// `r = y - m`. `m` and `y` are `[A]` or `[B, A]`; `chol` is `[A, A]` or
    /// `[B, A, A]` and only its lower triangle is read.
    pub fn gnll(&mut self, m: NodeId, chol: NodeId, y: &Array) -> Result<NodeId> {
        let (mv, lv) = (self.value(m), self.value(chol));
        let dim = mv.last_dim();
        let batch = mv.outer();
        let ok = mv.rank() >= 1
            && y.shape() == mv.shape()
            && lv.rank() == mv.rank() + 1
            && lv.shape()[..lv.rank() - 2] == mv.shape()[..mv.rank() - 1]
            && lv.shape()[lv.rank() - 2..] == [dim, dim];
        if !ok {
            return Err(Error::shape(
                "gnll",
                format!("m {:?}, chol {:?}, y {:?}", mv.shape(), lv.shape(), y.shape()),
            ));
        }
        let inv_b = 1.0 / batch as f64;
        let mut total = 0.0;
        let mut grad_m = vec![0.0; mv.len()];
        let mut grad_chol = vec![0.0; lv.len()];
        let mut z = vec![0.0; dim];
        let mut u = vec![0.0; dim];
        for s in 0..batch {
            let mean = mv.row(s);
            let target = y.row(s);
            let l = &lv.data()[s * dim * dim..(s + 1) * dim * dim];
            let mut logdet = 0.0;
            for i in 0..dim {
                let d = l[i * dim + i];
                if !(d >= MIN_CHOL_DIAG) {
                    return Err(Error::NumericalStability(format!(
                        "Cholesky diagonal entry {d:e} below {MIN_CHOL_DIAG:e}"
                    )));
                }
                logdet += 2.0 * d.ln();
            }
            // L z = r
            for i in 0..dim {
                let mut acc = target[i] - mean[i];
                for j in 0..i {
                    acc -= l[i * dim + j] * z[j];
                }
                z[i] = acc / l[i * dim + i];
            }
            // L' u = z, so u = (L L')^-1 r
            for i in (0..dim).rev() {
                let mut acc = z[i];
                for k in i + 1..dim {
                    acc -= l[k * dim + i] * u[k];
                }
                u[i] = acc / l[i * dim + i];
            }
            let quad: f64 = z.iter().map(|v| v * v).sum();
            total += 0.5 * (quad + logdet + dim as f64 * LN_2PI);

            for i in 0..dim {
                grad_m[s * dim + i] = -u[i] * inv_b;
            }
            // d/dL = tril(-u u' L) + diag(1 / L_ii); (L' u)_j = z_j
            let gl = &mut grad_chol[s * dim * dim..(s + 1) * dim * dim];
            for i in 0..dim {
                for j in 0..=i {
                    let mut g = -u[i] * z[j];
                    if i == j {
                        g += 1.0 / l[i * dim + i];
                    }
                    gl[i * dim + j] = g * inv_b;
                }
            }
        }
        if self.fault == Some(Fault::GnllGradient) {
            grad_m.iter_mut().for_each(|g| *g *= 1.01);
        }
        let value = Array::scalar(total * inv_b);
        self.push(
            Op::Gnll {
                m,
                chol,
                grad_m,
                grad_chol,
            },
            value,
            "gnll",
        )
    }

    /// Mean softmax cross-entropy over a batch of logits (`[D]` or `[B, D]`).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let classes = lv.last_dim();
        let batch = lv.outer();
        if lv.rank() == 0 || lv.rank() > 2 || labels.len() != batch {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} with {} labels", lv.shape(), labels.len()),
            ));
        }
        let inv_b = 1.0 / batch as f64;
        let mut total = 0.0;
        let mut grad = vec![0.0; lv.len()];
        for (s, (row, &label)) in lv.rows().zip(labels).enumerate() {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + denom.ln();
            total += lse - row[label];
            let g = &mut grad[s * classes..(s + 1) * classes];
            for (k, (gk, v)) in g.iter_mut().zip(row).enumerate() {
                let p = (v - max).exp() / denom;
                *gk = (p - if k == label { 1.0 } else { 0.0 }) * inv_b;
            }
        }
        let value = Array::scalar(total * inv_b);
        self.push(Op::SoftmaxCe { logits, grad }, value, "softmax_cross_entropy")
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, target: NodeId) -> Result<Gradients> {
        let tv = self.value(target);
        if tv.rank() != 0 {
            return Err(Error::NotScalar(tv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[target.0] = Some(vec![1.0]);
        for id in (0..=target.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let (ad, bd) = (av.data(), bv.data());
                // dA = G B'
                let ga = slot(grads, *a, n * k);
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let brow = &bd[p * m..(p + 1) * m];
                        ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
                // dB = A' G
                let gb = slot(grads, *b, k * m);
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for (o, gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                            *o += aip * gv;
                        }
                    }
                }
            }
            Op::AddBias(x, bias) => {
                add_into(slot(grads, *x, g.len()), g);
                let c = self.value(*bias).len();
                let gb = slot(grads, *bias, c);
                for row in g.chunks(c) {
                    add_into(gb, row);
                }
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                add_into(slot(grads, *b, g.len()), g);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, g.len());
                for ((o, gv), v) in gx.iter_mut().zip(g).zip(xv) {
                    if *v > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).last_dim();
                let cb = self.value(*b).last_dim();
                let rows = g.len() / (ca + cb);
                {
                    let ga = slot(grads, *a, rows * ca);
                    for (r, grow) in g.chunks(ca + cb).enumerate() {
                        add_into(&mut ga[r * ca..(r + 1) * ca], &grow[..ca]);
                    }
                }
                let gb = slot(grads, *b, rows * cb);
                for (r, grow) in g.chunks(ca + cb).enumerate() {
                    add_into(&mut gb[r * cb..(r + 1) * cb], &grow[ca..]);
                }
            }
            Op::Slice { x, start } => {
                let xv = self.value(*x);
                let c = xv.last_dim();
                let len = node.value.last_dim();
                let gx = slot(grads, *x, xv.len());
                for (r, grow) in g.chunks(len).enumerate() {
                    add_into(&mut gx[r * c + start..r * c + start + len], grow);
                }
            }
            Op::Scale { x, factor } => {
                let gx = slot(grads, *x, g.len());
                for (o, gv) in gx.iter_mut().zip(g) {
                    *o += factor * gv;
                }
            }
            Op::Mask { x, mask } => {
                let gx = slot(grads, *x, g.len());
                for ((o, gv), m) in gx.iter_mut().zip(g).zip(mask) {
                    *o += gv * m;
                }
            }
            Op::ExpDiagonal { x, dim } => {
                let dim = *dim;
                let xv = self.value(*x);
                let packed = xv.last_dim();
                let strict = dim * (dim - 1) / 2;
                let out = node.value.data();
                let gx = slot(grads, *x, xv.len());
                for (s, raw) in xv.rows().enumerate() {
                    let gs = &g[s * dim * dim..(s + 1) * dim * dim];
                    let os = &out[s * dim * dim..(s + 1) * dim * dim];
                    let go = &mut gx[s * packed..(s + 1) * packed];
                    let mut k = 0;
                    for i in 0..dim {
                        for j in 0..i {
                            go[k] += gs[i * dim + j];
                            k += 1;
                        }
                    }
                    for i in 0..dim {
                        let r = raw[strict + i];
                        if (LOG_DIAG_MIN..=LOG_DIAG_MAX).contains(&r) {
                            go[strict + i] += gs[i * dim + i] * os[i * dim + i];
                        }
                    }
                }
            }
            Op::Grl { x, scale } => {
                let gx = slot(grads, *x, g.len());
                for (o, gv) in gx.iter_mut().zip(g) {
                    *o += -scale * gv;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                let gx = slot(grads, *x, n);
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }
            Op::Gnll {
                m,
                chol,
                grad_m,
                grad_chol,
            } => {
                let gm = slot(grads, *m, grad_m.len());
                for (o, d) in gm.iter_mut().zip(grad_m) {
                    *o += g[0] * d;
                }
                let gl = slot(grads, *chol, grad_chol.len());
                for (o, d) in gl.iter_mut().zip(grad_chol) {
                    *o += g[0] * d;
                }
            }
            Op::SoftmaxCe { logits, grad } => {
                let gl = slot(grads, *logits, grad.len());
                for (o, d) in gl.iter_mut().zip(grad) {
                    *o += g[0] * d;
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
