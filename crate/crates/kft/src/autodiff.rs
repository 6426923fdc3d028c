//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! The graph is define-by-run: operations append nodes to a [`Tape`] and
//! return [`NodeId`]s; nodes only ever reference earlier nodes, so reverse
//! insertion order is a valid backward schedule. Gradients are exact
//! vector-Jacobian products through every operation, including the mode
//! products, gathers and batched chain contractions the models are built
//! from.

use crate::error::{KftError, Result};
use crate::kernels::{gram_from_distances, gram_grad_log_lengthscale, KernelKind};
use crate::linalg;
use crate::tensor::{mode_product, Axis, DenseTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    /// Position of the node on its tape; indexes the gradient vector
    /// returned by [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Exp(NodeId),
    Ln(NodeId),
    Sum(NodeId),
    Reshape(NodeId),
    ModeProduct {
        x: NodeId,
        u: NodeId,
        axis: usize,
    },
    GatherMid {
        x: NodeId,
        idx: Vec<usize>,
    },
    GatherMid2 {
        x: NodeId,
        idx: Vec<(usize, usize)>,
    },
    Bmm(NodeId, NodeId),
    BroadcastMiddle {
        v: NodeId,
        lead: usize,
        trail: usize,
    },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Ltri(NodeId),
    DiagFromVec(NodeId),
    DiagOf(NodeId),
    ScaleRows {
        a: NodeId,
        v: NodeId,
    },
    RowSums(NodeId),
    LogDetPd {
        a: NodeId,
        inverse: DenseTensor,
    },
    RankPairSquare {
        a: NodeId,
        c: NodeId,
    },
    Gram {
        log_lengthscale: NodeId,
        kind: KernelKind,
        dists: DenseTensor,
    },
}

struct Node {
    value: DenseTensor,
    op: Op,
}

/// Gradient tape. Nodes are appended by the op methods; [`Tape::backward`]
/// runs the reverse sweep from a scalar root.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &DenseTensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: DenseTensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    pub fn leaf(&mut self, value: DenseTensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.push(DenseTensor::scalar(value), Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = crate::tensor::hadamard(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = DenseTensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn mode_product(&mut self, x: NodeId, u: NodeId, axis: Axis) -> Result<NodeId> {
        if self.value(u).order() != 2 {
            return Err(KftError::ShapeMismatch(
                "differentiable mode product supports matrix operands".into(),
            ));
        }
        let n = axis.resolve(self.value(x).order())?;
        let v = mode_product(self.value(x), self.value(u), Axis::Index(n))?;
        Ok(self.push(v, Op::ModeProduct { x, u, axis: n }))
    }

    /// Gathers slices along the middle axis of an order-3 tensor:
    /// (Rl, n, Rr) indexed by a batch -> (B, Rl, Rr).
    pub fn gather_mid(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.order() != 3 {
            return Err(KftError::ShapeMismatch(format!(
                "gather_mid expects order 3, got {:?}",
                xv.shape()
            )));
        }
        let (rl, n, rr) = (xv.extent(0), xv.extent(1), xv.extent(2));
        let mut data = Vec::with_capacity(idx.len() * rl * rr);
        for &i in &idx {
            if i >= n {
                return Err(KftError::IndexOutOfRange(format!("{i} >= {n}")));
            }
            for l in 0..rl {
                for r in 0..rr {
                    data.push(xv.data()[(l * n + i) * rr + r]);
                }
            }
        }
        let v = DenseTensor::new(vec![idx.len(), rl, rr], data)?;
        Ok(self.push(v, Op::GatherMid { x, idx }))
    }

    /// Same as [`Tape::gather_mid`] for an order-4 joint core indexed by
    /// pairs on its two middle axes.
    pub fn gather_mid2(&mut self, x: NodeId, idx: Vec<(usize, usize)>) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.order() != 4 {
            return Err(KftError::ShapeMismatch(format!(
                "gather_mid2 expects order 4, got {:?}",
                xv.shape()
            )));
        }
        let (rl, n1, n2, rr) = (xv.extent(0), xv.extent(1), xv.extent(2), xv.extent(3));
        let mut data = Vec::with_capacity(idx.len() * rl * rr);
        for &(i, j) in &idx {
            if i >= n1 || j >= n2 {
                return Err(KftError::IndexOutOfRange(format!("({i},{j}) vs ({n1},{n2})")));
            }
            for l in 0..rl {
                for r in 0..rr {
                    data.push(xv.data()[((l * n1 + i) * n2 + j) * rr + r]);
                }
            }
        }
        let v = DenseTensor::new(vec![idx.len(), rl, rr], data)?;
        Ok(self.push(v, Op::GatherMid2 { x, idx }))
    }

    /// Batched matrix multiply: (B, m, k) × (B, k, n) -> (B, m, n).
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.order() != 3 || bv.order() != 3 || av.extent(0) != bv.extent(0)
            || av.extent(2) != bv.extent(1)
        {
            return Err(KftError::ShapeMismatch(format!(
                "bmm {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (bs, m, k, n) = (av.extent(0), av.extent(1), av.extent(2), bv.extent(2));
        let mut out = vec![0.0; bs * m * n];
        for s in 0..bs {
            for i in 0..m {
                for p in 0..k {
                    let c = av.data()[(s * m + i) * k + p];
                    if c == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        out[(s * m + i) * n + j] += c * bv.data()[(s * k + p) * n + j];
                    }
                }
            }
        }
        let v = DenseTensor::new(vec![bs, m, n], out)?;
        Ok(self.push(v, Op::Bmm(a, b)))
    }

    /// Broadcasts a tensor over new leading and trailing rank axes:
    /// (mid…) -> (lead, mid…, trail).
    pub fn broadcast_middle(&mut self, v: NodeId, lead: usize, trail: usize) -> Result<NodeId> {
        let vv = self.value(v);
        let mid = vv.len();
        let mut shape = vec![lead];
        shape.extend_from_slice(vv.shape());
        shape.push(trail);
        let mut data = Vec::with_capacity(lead * mid * trail);
        for _ in 0..lead {
            for &x in vv.data() {
                for _ in 0..trail {
                    data.push(x);
                }
            }
        }
        let out = DenseTensor::new(shape, data)?;
        Ok(self.push(out, Op::BroadcastMiddle { v, lead, trail }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    /// Lower-triangular part (including the diagonal) of a square matrix.
    pub fn ltri(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.order() != 2 || av.extent(0) != av.extent(1) {
            return Err(KftError::ShapeMismatch("ltri needs a square matrix".into()));
        }
        let n = av.extent(0);
        let mut v = av.clone();
        for i in 0..n {
            for j in (i + 1)..n {
                v.data_mut()[i * n + j] = 0.0;
            }
        }
        Ok(self.push(v, Op::Ltri(a)))
    }

    pub fn diag_from_vec(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.order() != 1 {
            return Err(KftError::ShapeMismatch("diag_from_vec needs a vector".into()));
        }
        let n = av.extent(0);
        let mut v = DenseTensor::zeros(&[n, n]);
        for i in 0..n {
            v.set(&[i, i], av.data()[i]);
        }
        Ok(self.push(v, Op::DiagFromVec(a)))
    }

    pub fn diag_of(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.order() != 2 || av.extent(0) != av.extent(1) {
            return Err(KftError::ShapeMismatch("diag_of needs a square matrix".into()));
        }
        let n = av.extent(0);
        let data: Vec<f64> = (0..n).map(|i| av.data()[i * n + i]).collect();
        let v = DenseTensor::new(vec![n], data)?;
        Ok(self.push(v, Op::DiagOf(a)))
    }

    /// Multiplies row i of a matrix by v[i].
    pub fn scale_rows(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (av, vv) = (self.value(a), self.value(v));
        if av.order() != 2 || vv.order() != 1 || vv.extent(0) != av.extent(0) {
            return Err(KftError::ShapeMismatch(format!(
                "scale_rows {:?} by {:?}",
                av.shape(),
                vv.shape()
            )));
        }
        let (m, n) = (av.extent(0), av.extent(1));
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let c = vv.data()[i];
            for j in 0..n {
                data.push(av.data()[i * n + j] * c);
            }
        }
        let out = DenseTensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::ScaleRows { a, v }))
    }

    pub fn row_sums(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.order() != 2 {
            return Err(KftError::ShapeMismatch("row_sums needs a matrix".into()));
        }
        let (m, n) = (av.extent(0), av.extent(1));
        let data: Vec<f64> = (0..m)
            .map(|i| av.data()[i * n..(i + 1) * n].iter().sum())
            .collect();
        let v = DenseTensor::new(vec![m], data)?;
        Ok(self.push(v, Op::RowSums(a)))
    }

    /// log det of a positive definite matrix; the inverse is cached for the
    /// backward pass.
    pub fn logdet_pd(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a).clone();
        let ld = linalg::logdet_pd(&av)?;
        let inverse = linalg::inverse_pd(&av)?;
        Ok(self.push(
            DenseTensor::scalar(ld),
            Op::LogDetPd { a, inverse },
        ))
    }

    /// Paired-rank-path core for exact second moments of a TT chain:
    /// out[(rl,ql), mid…, (rr,qr)] = A[rl,mid,rr]·A[ql,mid,qr]
    ///                             + δ(rl,ql)δ(rr,qr)·C[rl,mid,rr].
    ///
    /// Chaining these over all cores yields E[(∏ ×₋₁ Wₚ)²] exactly when A is
    /// the per-core mean and C the per-core variance of independent cores.
    pub fn rank_pair_square(&mut self, a: NodeId, c: NodeId) -> Result<NodeId> {
        let (av, cv) = (self.value(a), self.value(c));
        if av.shape() != cv.shape() || av.order() < 3 {
            return Err(KftError::ShapeMismatch(format!(
                "rank_pair_square {:?} vs {:?}",
                av.shape(),
                cv.shape()
            )));
        }
        let rl = av.extent(0);
        let rr = av.extent(av.order() - 1);
        let mid: usize = av.shape()[1..av.order() - 1].iter().product();
        let mut out = vec![0.0; rl * rl * mid * rr * rr];
        let ad = av.data();
        let cd = cv.data();
        let at = |l: usize, m: usize, r: usize| ad[(l * mid + m) * rr + r];
        for l in 0..rl {
            for q in 0..rl {
                for m in 0..mid {
                    for r in 0..rr {
                        for t in 0..rr {
                            let mut v = at(l, m, r) * at(q, m, t);
                            if l == q && r == t {
                                v += cd[(l * mid + m) * rr + r];
                            }
                            out[(((l * rl + q) * mid + m) * rr + r) * rr + t] = v;
                        }
                    }
                }
            }
        }
        let mut shape = vec![rl * rl];
        shape.extend_from_slice(&av.shape()[1..av.order() - 1]);
        shape.push(rr * rr);
        let v = DenseTensor::new(shape, out)?;
        Ok(self.push(v, Op::RankPairSquare { a, c }))
    }

    /// Kernel Gram matrix as a differentiable function of the
    /// log-lengthscale (a scalar node); pairwise distances are fixed.
    pub fn gram(
        &mut self,
        kind: KernelKind,
        dists: DenseTensor,
        log_lengthscale: NodeId,
    ) -> Result<NodeId> {
        let lv = self.value(log_lengthscale);
        if lv.len() != 1 {
            return Err(KftError::ShapeMismatch(
                "log-lengthscale must be a scalar node".into(),
            ));
        }
        let ls = lv.data()[0].exp();
        let k = gram_from_distances(kind, &dists, ls);
        Ok(self.push(
            k,
            Op::Gram {
                log_lengthscale,
                kind,
                dists,
            },
        ))
    }

    /// Reverse sweep from a scalar `root`. Returns one gradient slot per
    /// node; `None` for nodes the root does not depend on.
    pub fn backward(&self, root: NodeId) -> Result<Vec<Option<DenseTensor>>> {
        if self.value(root).len() != 1 {
            return Err(KftError::ShapeMismatch(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<DenseTensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(DenseTensor::filled(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(grads: &mut [Option<DenseTensor>], id: NodeId, delta: DenseTensor) -> Result<()> {
        match &mut grads[id.0] {
            Some(existing) => {
                *existing = existing.add(&delta)?;
            }
            slot => *slot = Some(delta),
        }
        Ok(())
    }

    fn propagate(
        &self,
        i: usize,
        g: &DenseTensor,
        grads: &mut [Option<DenseTensor>],
    ) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g.clone())?;
                Self::accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, g.clone())?;
                Self::accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let ga = crate::tensor::hadamard(g, self.value(*b))?;
                let gb = crate::tensor::hadamard(g, self.value(*a))?;
                Self::accumulate(grads, *a, ga)?;
                Self::accumulate(grads, *b, gb)?;
            }
            Op::Scale(a, c) => {
                Self::accumulate(grads, *a, g.scale(*c))?;
            }
            Op::Exp(a) => {
                let ga = crate::tensor::hadamard(g, &self.nodes[i].value)?;
                Self::accumulate(grads, *a, ga)?;
            }
            Op::Ln(a) => {
                let inv = self.value(*a).map(|x| 1.0 / x);
                Self::accumulate(grads, *a, crate::tensor::hadamard(g, &inv)?)?;
            }
            Op::Sum(a) => {
                let c = g.data()[0];
                Self::accumulate(grads, *a, DenseTensor::filled(self.value(*a).shape(), c))?;
            }
            Op::Reshape(a) => {
                let back = g.clone().reshape(self.value(*a).shape().to_vec())?;
                Self::accumulate(grads, *a, back)?;
            }
            Op::ModeProduct { x, u, axis } => {
                let ut = self.value(*u).transpose()?;
                let gx = mode_product(g, &ut, Axis::Index(*axis))?;
                Self::accumulate(grads, *x, gx)?;
                // du[j, i] = sum over left/right of g[l, j, r] * x[l, i, r]
                let xv = self.value(*x);
                let (j, i_n) = (self.value(*u).extent(0), self.value(*u).extent(1));
                let left: usize = xv.shape()[..*axis].iter().product();
                let right: usize = xv.shape()[*axis + 1..].iter().product();
                let mut du = vec![0.0; j * i_n];
                for l in 0..left {
                    for jj in 0..j {
                        let grow = &g.data()[(l * j + jj) * right..(l * j + jj + 1) * right];
                        for ii in 0..i_n {
                            let xrow =
                                &xv.data()[(l * i_n + ii) * right..(l * i_n + ii + 1) * right];
                            let mut s = 0.0;
                            for (gv, xv2) in grow.iter().zip(xrow) {
                                s += gv * xv2;
                            }
                            du[jj * i_n + ii] += s;
                        }
                    }
                }
                Self::accumulate(grads, *u, DenseTensor::new(vec![j, i_n], du)?)?;
            }
            Op::GatherMid { x, idx } => {
                let xv = self.value(*x);
                let (rl, n, rr) = (xv.extent(0), xv.extent(1), xv.extent(2));
                let mut gx = DenseTensor::zeros(&[rl, n, rr]);
                for (b, &i) in idx.iter().enumerate() {
                    for l in 0..rl {
                        for r in 0..rr {
                            gx.data_mut()[(l * n + i) * rr + r] +=
                                g.data()[(b * rl + l) * rr + r];
                        }
                    }
                }
                Self::accumulate(grads, *x, gx)?;
            }
            Op::GatherMid2 { x, idx } => {
                let xv = self.value(*x);
                let (rl, n1, n2, rr) = (xv.extent(0), xv.extent(1), xv.extent(2), xv.extent(3));
                let mut gx = DenseTensor::zeros(&[rl, n1, n2, rr]);
                for (b, &(i, j)) in idx.iter().enumerate() {
                    for l in 0..rl {
                        for r in 0..rr {
                            gx.data_mut()[((l * n1 + i) * n2 + j) * rr + r] +=
                                g.data()[(b * rl + l) * rr + r];
                        }
                    }
                }
                Self::accumulate(grads, *x, gx)?;
            }
            Op::Bmm(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (av.extent(0), av.extent(1), av.extent(2), bv.extent(2));
                let mut ga = vec![0.0; bs * m * k];
                let mut gb = vec![0.0; bs * k * n];
                for s in 0..bs {
                    for i in 0..m {
                        for p in 0..k {
                            let mut sa = 0.0;
                            for j in 0..n {
                                let gv = g.data()[(s * m + i) * n + j];
                                sa += gv * bv.data()[(s * k + p) * n + j];
                                gb[(s * k + p) * n + j] += av.data()[(s * m + i) * k + p] * gv;
                            }
                            ga[(s * m + i) * k + p] += sa;
                        }
                    }
                }
                Self::accumulate(grads, *a, DenseTensor::new(vec![bs, m, k], ga)?)?;
                Self::accumulate(grads, *b, DenseTensor::new(vec![bs, k, n], gb)?)?;
            }
            Op::BroadcastMiddle { v, lead, trail } => {
                let vv = self.value(*v);
                let mid = vv.len();
                let mut gv = vec![0.0; mid];
                for l in 0..*lead {
                    for m in 0..mid {
                        for t in 0..*trail {
                            gv[m] += g.data()[(l * mid + m) * trail + t];
                        }
                    }
                }
                Self::accumulate(
                    grads,
                    *v,
                    DenseTensor::new(vv.shape().to_vec(), gv)?,
                )?;
            }
            Op::MatMul(a, b) => {
                let bt = self.value(*b).transpose()?;
                let at = self.value(*a).transpose()?;
                Self::accumulate(grads, *a, g.matmul(&bt)?)?;
                Self::accumulate(grads, *b, at.matmul(g)?)?;
            }
            Op::Transpose(a) => {
                Self::accumulate(grads, *a, g.transpose()?)?;
            }
            Op::Ltri(a) => {
                let n = g.extent(0);
                let mut ga = g.clone();
                for r in 0..n {
                    for c in (r + 1)..n {
                        ga.data_mut()[r * n + c] = 0.0;
                    }
                }
                Self::accumulate(grads, *a, ga)?;
            }
            Op::DiagFromVec(a) => {
                let n = self.value(*a).extent(0);
                let gv: Vec<f64> = (0..n).map(|i| g.data()[i * n + i]).collect();
                Self::accumulate(grads, *a, DenseTensor::new(vec![n], gv)?)?;
            }
            Op::DiagOf(a) => {
                let n = self.value(*a).extent(0);
                let mut ga = DenseTensor::zeros(&[n, n]);
                for i in 0..n {
                    ga.data_mut()[i * n + i] = g.data()[i];
                }
                Self::accumulate(grads, *a, ga)?;
            }
            Op::ScaleRows { a, v } => {
                let (av, vv) = (self.value(*a), self.value(*v));
                let (m, n) = (av.extent(0), av.extent(1));
                let mut ga = vec![0.0; m * n];
                let mut gv = vec![0.0; m];
                for r in 0..m {
                    let c = vv.data()[r];
                    for j in 0..n {
                        let gx = g.data()[r * n + j];
                        ga[r * n + j] = gx * c;
                        gv[r] += gx * av.data()[r * n + j];
                    }
                }
                Self::accumulate(grads, *a, DenseTensor::new(vec![m, n], ga)?)?;
                Self::accumulate(grads, *v, DenseTensor::new(vec![m], gv)?)?;
            }
            Op::RowSums(a) => {
                let av = self.value(*a);
                let (m, n) = (av.extent(0), av.extent(1));
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    let c = g.data()[r];
                    for j in 0..n {
                        ga[r * n + j] = c;
                    }
                }
                Self::accumulate(grads, *a, DenseTensor::new(vec![m, n], ga)?)?;
            }
            Op::LogDetPd { a, inverse } => {
                Self::accumulate(grads, *a, inverse.scale(g.data()[0]))?;
            }
            Op::RankPairSquare { a, c } => {
                let av = self.value(*a);
                let rl = av.extent(0);
                let rr = av.extent(av.order() - 1);
                let mid: usize = av.shape()[1..av.order() - 1].iter().product();
                let ad = av.data();
                let at = |l: usize, m: usize, r: usize| ad[(l * mid + m) * rr + r];
                let gat = |l: usize, q: usize, m: usize, r: usize, t: usize| {
                    g.data()[(((l * rl + q) * mid + m) * rr + r) * rr + t]
                };
                let mut ga = vec![0.0; av.len()];
                let mut gc = vec![0.0; av.len()];
                for l in 0..rl {
                    for m in 0..mid {
                        for r in 0..rr {
                            let mut s = 0.0;
                            for q in 0..rl {
                                for t in 0..rr {
                                    // first-factor and second-factor positions
                                    s += gat(l, q, m, r, t) * at(q, m, t);
                                    s += gat(q, l, m, t, r) * at(q, m, t);
                                }
                            }
                            ga[(l * mid + m) * rr + r] = s;
                            gc[(l * mid + m) * rr + r] = gat(l, l, m, r, r);
                        }
                    }
                }
                Self::accumulate(grads, *a, DenseTensor::new(av.shape().to_vec(), ga)?)?;
                Self::accumulate(grads, *c, DenseTensor::new(av.shape().to_vec(), gc)?)?;
            }
            Op::Gram {
                log_lengthscale,
                kind,
                dists,
            } => {
                let ls = self.value(*log_lengthscale).data()[0].exp();
                let dk = gram_grad_log_lengthscale(*kind, dists, ls);
                let s = crate::tensor::hadamard(g, &dk)?.sum();
                Self::accumulate(grads, *log_lengthscale, DenseTensor::scalar(s))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences on the entries of `leaves`, compared
    /// against the tape gradient of the scalar produced by `build`.
    fn check_gradients(
        leaves: Vec<DenseTensor>,
        build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root).unwrap();
        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let g = grads[ids[li].0]
                .clone()
                .unwrap_or_else(|| DenseTensor::zeros(leaf.shape()));
            for e in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[e] += h;
                let mut minus = leaves.clone();
                minus[li].data_mut()[e] -= h;
                let eval = |ls: &[DenseTensor]| {
                    let mut t = Tape::new();
                    let ids: Vec<NodeId> = ls.iter().map(|l| t.leaf(l.clone())).collect();
                    let r = build(&mut t, &ids);
                    t.value(r).data()[0]
                };
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let ad = g.data()[e];
                let denom = fd.abs().max(ad.abs()).max(1e-6);
                assert!(
                    (fd - ad).abs() / denom < tol,
                    "leaf {li} entry {e}: fd {fd} vs ad {ad}"
                );
            }
        }
    }

    fn rng_tensor(shape: &[usize], seed: u64) -> DenseTensor {
        let mut state = seed.wrapping_mul(2862933555777941757).wrapping_add(1);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                ((state >> 33) as f64) / (u32::MAX as f64) - 0.5
            })
            .collect();
        DenseTensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn elementwise_and_sum_gradients() {
        check_gradients(
            vec![rng_tensor(&[2, 3], 1), rng_tensor(&[2, 3], 2)],
            |t, ids| {
                let m = t.mul(ids[0], ids[1]).unwrap();
                let e = t.exp(m);
                let s = t.sub(e, ids[1]).unwrap();
                t.sum(s)
            },
            1e-6,
        );
    }

    #[test]
    fn mode_product_gradients_both_sides() {
        check_gradients(
            vec![rng_tensor(&[2, 3, 2], 3), rng_tensor(&[4, 3], 4)],
            |t, ids| {
                let y = t.mode_product(ids[0], ids[1], Axis::Index(1)).unwrap();
                let sq = t.square(y).unwrap();
                t.sum(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn gather_bmm_chain_gradients() {
        check_gradients(
            vec![rng_tensor(&[1, 4, 2], 5), rng_tensor(&[2, 3, 1], 6)],
            |t, ids| {
                let a = t.gather_mid(ids[0], vec![0, 2, 3, 1]).unwrap();
                let b = t.gather_mid(ids[1], vec![1, 0, 2, 2]).unwrap();
                let y = t.bmm(a, b).unwrap();
                let sq = t.square(y).unwrap();
                t.sum(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn matrix_op_gradients() {
        check_gradients(
            vec![rng_tensor(&[3, 2], 7), rng_tensor(&[2, 3], 8), rng_tensor(&[3], 9)],
            |t, ids| {
                let m = t.matmul(ids[0], ids[1]).unwrap();
                let lt = t.ltri(m).unwrap();
                let sr = t.scale_rows(lt, ids[2]).unwrap();
                let rs = t.row_sums(sr).unwrap();
                let sq = t.square(rs).unwrap();
                t.sum(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn logdet_gradients() {
        // Build a PD matrix as I + AᵀA inside the graph.
        check_gradients(
            vec![rng_tensor(&[3, 2], 10)],
            |t, ids| {
                let at = t.transpose(ids[0]).unwrap();
                let m = t.matmul(at, ids[0]).unwrap();
                let eye = t.leaf(DenseTensor::eye(2));
                let pd = t.add(m, eye).unwrap();
                t.logdet_pd(pd).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn rank_pair_square_gradients() {
        check_gradients(
            vec![rng_tensor(&[2, 3, 2], 11), rng_tensor(&[2, 3, 2], 12)],
            |t, ids| {
                let g = t.rank_pair_square(ids[0], ids[1]).unwrap();
                let sq = t.square(g).unwrap();
                t.sum(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn gram_lengthscale_gradients() {
        let feats = rng_tensor(&[4, 2], 13);
        let dists = crate::kernels::pairwise_distances(&feats).unwrap();
        for kind in [
            KernelKind::Rbf,
            KernelKind::Matern05,
            KernelKind::Matern15,
            KernelKind::Matern25,
        ] {
            let d = dists.clone();
            check_gradients(
                vec![DenseTensor::scalar(-0.3)],
                move |t, ids| {
                    let k = t.gram(kind, d.clone(), ids[0]).unwrap();
                    let sq = t.square(k).unwrap();
                    t.sum(sq)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn broadcast_and_diag_gradients() {
        check_gradients(
            vec![rng_tensor(&[3], 14), rng_tensor(&[3, 3], 15)],
            |t, ids| {
                let b = t.broadcast_middle(ids[0], 2, 2).unwrap();
                let sq = t.square(b).unwrap();
                let s1 = t.sum(sq);
                let d = t.diag_from_vec(ids[0]).unwrap();
                let m = t.mul(d, ids[1]).unwrap();
                let dg = t.diag_of(m).unwrap();
                let s2 = t.sum(dg);
                t.add(s1, s2).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn backward_root_must_be_scalar() {
        let mut t = Tape::new();
        let a = t.leaf(rng_tensor(&[2, 2], 16));
        assert!(t.backward(a).is_err());
    }
}
