//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a node
//! holding its output value and enough saved state to run its vector-Jacobian
//! product; node order on the tape is therefore a topological order, and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Broadcasting is limited to two documented cases: a bias over the trailing
//! axis ([`Tape::add_bias`]) and a constant whose shape is a suffix of the
//! operand's shape ([`Tape::add_const`], used for attention masks shared by
//! every head). Everything else must match exactly.

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt_acc, matmul_at_b_acc, matmul_kernel, softmax_rows, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, n: usize, m: usize, p: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    AddConst { a: Var },
    MulConst { a: Var, c: Vec<F> },
    Scale { a: Var, c: F },
    Relu { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, inv_std: Vec<F> },
    Sum { a: Var },
    Mean { a: Var },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Rope { a: Var, cos: Vec<F>, sin: Vec<F>, rows: usize, half: usize },
    VarBias { u: Var, v: Var, same: Vec<bool> },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

/// Append-only computation record.
#[derive(Debug)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<F> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf; receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf with no gradient (inputs, targets).
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of a node, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let node = self.node(v);
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Clears every gradient on the tape, leaves included.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ---- operations -------------------------------------------------------

    /// Matrix product over the last two axes; leading (batch) axes must agree.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (n, m, p) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![F::zero(); batch * n * p];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                matmul_kernel(
                    &ad[bi * n * m..(bi + 1) * n * m],
                    &bd[bi * m * p..(bi + 1) * m * p],
                    &mut out[bi * n * p..(bi + 1) * n * p],
                    n,
                    m,
                    p,
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([n, p]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, batch, n, m, p }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Vec<F> {
        let (x, y) = (self.value(a).data(), self.value(b).data());
        x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let t = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let t = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let t = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// Adds `bias[k]` to every element whose last-axis index is `k`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(bias);
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(Error::dim("add_bias", sa, sb));
        }
        let w = sb[0];
        let bd = self.value(bias).data();
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % w])
            .collect();
        let t = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(t, Op::AddBias { a, bias }, rg))
    }

    /// Adds a constant whose shape is a suffix of `a`'s shape, repeated over
    /// the leading axes. Entries may be `-inf` (additive masks).
    pub fn add_const(&mut self, a: Var, c: &Tensor<F>) -> Result<Var> {
        let sa = self.shape(a);
        let sc = c.shape();
        if sc.len() > sa.len() || sa[sa.len() - sc.len()..] != *sc {
            return Err(Error::dim("add_const", sa, sc));
        }
        let w = c.numel();
        let cd = c.data();
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + cd[i % w])
            .collect();
        let t = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::AddConst { a }, rg))
    }

    /// Elementwise product with a same-shape constant.
    pub fn mul_const(&mut self, a: Var, c: &Tensor<F>) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::dim("mul_const", self.shape(a), c.shape()));
        }
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::MulConst { a, c: c.data().to_vec() }, rg))
    }

    /// Multiplies every element by a fixed scalar.
    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out: Vec<F> = self.value(a).data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.shape(a), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale { a, c }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<F> = self.value(a).data().iter().map(|&x| x.max(F::zero())).collect();
        let t = Tensor::new(self.shape(a), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu { a }, rg)
    }

    /// Softmax over the last axis; see [`softmax_last_axis`].
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape
            .last()
            .ok_or_else(|| Error::contract("softmax of a rank-0 tensor"))?;
        let out = softmax_rows(self.value(a).data(), width)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { a }, rg))
    }

    /// Layer normalization over the last axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::contract("layer_norm of a scalar"))?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::dim("layer_norm", &shape, self.shape(p)));
            }
        }
        let eps = F::from_f64(eps);
        let dn = F::from_f64(d as f64);
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let rows = xd.len() / d;
        let mut xhat = vec![F::zero(); xd.len()];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().fold(F::zero(), |s, &v| s + v) / dn;
            let var = row.iter().fold(F::zero(), |s, &v| s + (v - mean) * (v - mean)) / dn;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for k in 0..d {
                let xh = (row[k] - mean) * is;
                xhat[r * d + k] = xh;
                out[r * d + k] = xh * gd[k] + bd[k];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            rg,
        ))
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(F::zero(), |s, &x| s + x);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Mean of all elements (rank-0 result).
    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.value(a).data();
        let s = d.iter().fold(F::zero(), |s, &x| s + x) / F::from_f64(d.len() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Axis permutation: output axis `k` is input axis `perm[k]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", &shape, perm));
        }
        let (data, out_shape) = permute_data(self.value(a).data(), &shape, perm);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Permute { a, perm: perm.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::dim("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Rotary embedding on `a[.., rows, d]`: row `r` is rotated by its
    /// position `positions[r]`, pair `(2k, 2k+1)` by angle
    /// `position · base^(−2k/d)`.
    pub fn rope(&mut self, a: Var, positions: &[usize], base: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 2] != positions.len() {
            return Err(Error::dim("rope", &shape, &[positions.len()]));
        }
        let d = shape[r - 1];
        if !d.is_multiple_of(2) {
            return Err(Error::contract(format!("rope needs an even head dimension, got {d}")));
        }
        let half = d / 2;
        let rows = positions.len();
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for &pos in positions {
            for k in 0..half {
                let angle = rope_angle(pos, k, d, base);
                cos.push(F::from_f64(angle.cos()));
                sin.push(F::from_f64(angle.sin()));
            }
        }
        let x = self.value(a).data();
        let mut out = vec![F::zero(); x.len()];
        for (i, (xr, or)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let row = i % rows;
            for k in 0..half {
                let (c, s) = (cos[row * half + k], sin[row * half + k]);
                let (x0, x1) = (xr[2 * k], xr[2 * k + 1]);
                or[2 * k] = x0 * c - x1 * s;
                or[2 * k + 1] = x0 * s + x1 * c;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Rope { a, cos, sin, rows, half }, rg))
    }

    /// Per-head variable scalars: `out[h, a, b] = u[h]` when `same[a·n + b]`,
    /// else `v[h]`. `u` and `v` have shape `[H]`, `same` is `n × n`.
    pub fn var_bias(&mut self, u: Var, v: Var, same: &[bool]) -> Result<Var> {
        let h = match self.shape(u) {
            [h] => *h,
            s => return Err(Error::dim("var_bias", s, &[])),
        };
        if self.shape(v) != [h] {
            return Err(Error::dim("var_bias", self.shape(u), self.shape(v)));
        }
        let n = (same.len() as f64).sqrt() as usize;
        if n * n != same.len() {
            return Err(Error::contract("var_bias pattern must be square"));
        }
        let (ud, vd) = (self.value(u).data(), self.value(v).data());
        let mut out = Vec::with_capacity(h * n * n);
        for hi in 0..h {
            out.extend(same.iter().map(|&s| if s { ud[hi] } else { vd[hi] }));
        }
        let rg = self.rg(&[u, v]);
        Ok(self.push(Tensor::new(&[h, n, n], out)?, Op::VarBias { u, v, same: same.to_vec() }, rg))
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`];
    /// intermediate gradients are recomputed on every call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.accumulate(loss, vec![F::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.nodes[id].grad.take() else { continue };
            let contributions = self.vjp(id, &g);
            self.nodes[id].grad = Some(g);
            for (parent, pg) in contributions {
                if self.nodes[parent.0].requires_grad {
                    self.accumulate(parent, pg);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<F>) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
            None => node.grad = Some(g),
        }
    }

    fn vjp(&self, id: usize, g: &[F]) -> Vec<(Var, Vec<F>)> {
        let node = &self.nodes[id];
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, n, m, p } => {
                if want(a) {
                    let mut ga = vec![F::zero(); batch * n * m];
                    for bi in 0..batch {
                        matmul_a_bt_acc(
                            &g[bi * n * p..(bi + 1) * n * p],
                            &val(b)[bi * m * p..(bi + 1) * m * p],
                            &mut ga[bi * n * m..(bi + 1) * n * m],
                            n,
                            m,
                            p,
                        );
                    }
                    out.push((a, ga));
                }
                if want(b) {
                    let mut gb = vec![F::zero(); batch * m * p];
                    for bi in 0..batch {
                        matmul_at_b_acc(
                            &val(a)[bi * n * m..(bi + 1) * n * m],
                            &g[bi * n * p..(bi + 1) * n * p],
                            &mut gb[bi * m * p..(bi + 1) * m * p],
                            n,
                            m,
                            p,
                        );
                    }
                    out.push((b, gb));
                }
            }
            &Op::Add { a, b } => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::Sub { a, b } => {
                out.push((a, g.to_vec()));
                out.push((b, g.iter().map(|&x| -x).collect()));
            }
            &Op::Mul { a, b } => {
                if want(a) {
                    out.push((a, g.iter().zip(val(b)).map(|(&x, &y)| x * y).collect()));
                }
                if want(b) {
                    out.push((b, g.iter().zip(val(a)).map(|(&x, &y)| x * y).collect()));
                }
            }
            &Op::AddBias { a, bias } => {
                out.push((a, g.to_vec()));
                if want(bias) {
                    let w = val(bias).len();
                    let mut gb = vec![F::zero(); w];
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % w] = gb[i % w] + x;
                    }
                    out.push((bias, gb));
                }
            }
            &Op::AddConst { a } => out.push((a, g.to_vec())),
            Op::MulConst { a, c } => out.push((*a, g.iter().zip(c).map(|(&x, &y)| x * y).collect())),
            &Op::Scale { a, c } => out.push((a, g.iter().map(|&x| x * c).collect())),
            &Op::Relu { a } => out.push((
                a,
                g.iter()
                    .zip(val(a))
                    .map(|(&x, &y)| if y > F::zero() { x } else { F::zero() })
                    .collect(),
            )),
            &Op::Softmax { a } => {
                let y = node.value.data();
                let w = *node.value.shape().last().unwrap();
                let mut ga = vec![F::zero(); y.len()];
                for ((yr, gr), or) in y.chunks(w).zip(g.chunks(w)).zip(ga.chunks_mut(w)) {
                    let dot = yr.iter().zip(gr).fold(F::zero(), |s, (&p, &q)| s + p * q);
                    for ((o, &p), &q) in or.iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dot);
                    }
                }
                out.push((a, ga));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = val(*gain).len();
                let gd = val(*gain);
                if want(*x) {
                    let dn = F::from_f64(d as f64);
                    let mut gx = vec![F::zero(); g.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let dxh: Vec<F> = gr.iter().zip(gd).map(|(&a, &b)| a * b).collect();
                        let s1 = dxh.iter().fold(F::zero(), |s, &v| s + v);
                        let s2 = dxh.iter().zip(xr).fold(F::zero(), |s, (&a, &b)| s + a * b);
                        for k in 0..d {
                            gx[r * d + k] = is / dn * (dn * dxh[k] - s1 - xr[k] * s2);
                        }
                    }
                    out.push((*x, gx));
                }
                if want(*gain) {
                    let mut gg = vec![F::zero(); d];
                    for (i, (&a, &b)) in g.iter().zip(xhat).enumerate() {
                        gg[i % d] = gg[i % d] + a * b;
                    }
                    out.push((*gain, gg));
                }
                if want(*bias) {
                    let mut gb = vec![F::zero(); d];
                    for (i, &a) in g.iter().enumerate() {
                        gb[i % d] = gb[i % d] + a;
                    }
                    out.push((*bias, gb));
                }
            }
            &Op::Sum { a } => out.push((a, vec![g[0]; val(a).len()])),
            &Op::Mean { a } => {
                let n = val(a).len();
                out.push((a, vec![g[0] / F::from_f64(n as f64); n]));
            }
            &Op::Reshape { a } => out.push((a, g.to_vec())),
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inverse[p] = k;
                }
                let (ga, _) = permute_data(g, node.value.shape(), &inverse);
                out.push((*a, ga));
            }
            Op::Rope { a, cos, sin, rows, half } => {
                let d = 2 * half;
                let mut ga = vec![F::zero(); g.len()];
                for (i, (gr, or)) in g.chunks(d).zip(ga.chunks_mut(d)).enumerate() {
                    let row = i % rows;
                    for k in 0..*half {
                        let (c, s) = (cos[row * half + k], sin[row * half + k]);
                        let (g0, g1) = (gr[2 * k], gr[2 * k + 1]);
                        or[2 * k] = g0 * c + g1 * s;
                        or[2 * k + 1] = g1 * c - g0 * s;
                    }
                }
                out.push((*a, ga));
            }
            Op::VarBias { u, v, same } => {
                let h = val(*u).len();
                let nn = same.len();
                let mut gu = vec![F::zero(); h];
                let mut gv = vec![F::zero(); h];
                for hi in 0..h {
                    for (k, &s) in same.iter().enumerate() {
                        let x = g[hi * nn + k];
                        if s {
                            gu[hi] = gu[hi] + x;
                        } else {
                            gv[hi] = gv[hi] + x;
                        }
                    }
                }
                out.push((*u, gu));
                out.push((*v, gv));
            }
        }
        out
    }
}

/// Rotation angle of pair `k` at `position` for head dimension `d`.
pub(crate) fn rope_angle(position: usize, k: usize, d: usize, base: f64) -> f64 {
    position as f64 * base.powf(-2.0 * k as f64 / d as f64)
}

fn permute_data<F: Copy>(data: &[F], shape: &[usize], perm: &[usize]) -> (Vec<F>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for k in (0..rank.saturating_sub(1)).rev() {
        in_strides[k] = in_strides[k + 1] * shape[k + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for k in (0..rank).rev() {
            idx[k] += 1;
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    (out, out_shape)
}

/// Softmax over the last axis of a plain tensor (no tape).
///
/// `-inf` entries map to exactly zero. A row without any finite entry is a
/// [`Error::MaskedRow`].
pub fn softmax_last_axis<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let width = *x
        .shape()
        .last()
        .ok_or_else(|| Error::contract("softmax of a rank-0 tensor"))?;
    Tensor::new(x.shape(), softmax_rows(x.data(), width)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central differences of a scalar function of one input tensor.
    fn finite_diff(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_rel_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
            assert!(err <= tol, "element {i}: analytic {a} vs numeric {n} (rel {err:e})");
        }
    }

    /// Builds `loss = sum(w ⊙ op(x))` on a tape and checks d/dx against
    /// finite differences. `w` is a fixed random weighting so the check is
    /// not degenerate for ops whose outputs sum to a constant.
    fn check_unary(shape: &[usize], seed: u64, op: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, shape);
        let probe = {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let y = op(&mut t, v);
            t.value(y).shape().to_vec()
        };
        let w = rand_tensor(&mut rng, &probe);
        let eval = |x: &Tensor<f64>| {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let y = op(&mut t, v);
            let z = t.mul_const(y, &w).unwrap();
            let s = t.sum(z);
            t.value(s).item().unwrap()
        };
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let y = op(&mut t, v);
        let z = t.mul_const(y, &w).unwrap();
        let s = t.sum(z);
        t.backward(s).unwrap();
        let g = t.grad(v).unwrap();
        assert_rel_close(g.data(), &finite_diff(&x, &eval), 1e-6);
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut t = Tape::<f64>::new();
        let i = t.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = t.constant(Tensor::from_f64(&[2, 2], &[1.5, -2.0, 3.0, 4.25]).unwrap());
        let y = t.matmul(i, m).unwrap();
        assert_eq!(t.value(y).data(), &[1.5, -2.0, 3.0, 4.25]);

        let a = t.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let b = t.constant(Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap());
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let y = t.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.at(&[i, k]) * b.at(&[k, j]);
                }
                assert!((t.value(y).at(&[i, j]) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch_naming_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let c = t.constant(Tensor::zeros(&[2, 3, 4]));
        let d = t.constant(Tensor::zeros(&[3, 4, 2]));
        assert!(t.matmul(c, d).is_err());
    }

    #[test]
    fn elementwise_ops_reject_broadcast() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[3]));
        assert!(t.add(a, b).is_err());
        assert!(t.mul(a, b).is_err());
        assert!(t.add_bias(a, b).is_ok());
        let c = t.constant(Tensor::zeros(&[2]));
        assert!(t.add_bias(a, c).is_err());
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_last_axis(&Tensor::<f64>::from_f64(&[3], &[0.0, 0.0, 0.0]).unwrap()).unwrap();
        for &p in y.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_last_axis(&Tensor::<f64>::from_f64(&[2], &[-7.3, f64::NEG_INFINITY]).unwrap()).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);

        let y = softmax_last_axis(&Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap()).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (k, &p) in y.data().iter().enumerate() {
            assert!((p - ((k + 1) as f64).exp() / z).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_an_error() {
        let x = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 1.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        assert!(matches!(softmax_last_axis(&x), Err(Error::MaskedRow { row: 1 })));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::full(&[1, 4], 3.7));
        let g = t.constant(Tensor::ones(&[4]));
        let b = t.constant(Tensor::zeros(&[4]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
        assert!(t.layer_norm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 8]);
        let mut t = Tape::new();
        let vx = t.constant(x.clone());
        let g = t.constant(Tensor::ones(&[8]));
        let b = t.constant(Tensor::zeros(&[8]));
        let y = t.layer_norm(vx, g, b, 1e-5).unwrap();
        for r in 0..2 {
            let row: Vec<f64> = (0..8).map(|k| x.at(&[r, k])).collect();
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            let out: Vec<f64> = (0..8).map(|k| t.value(y).at(&[r, k])).collect();
            for k in 0..8 {
                assert!((out[k] - (row[k] - mean) / (var + 1e-5).sqrt()).abs() < 1e-12);
            }
            let om = out.iter().sum::<f64>() / 8.0;
            let ov = out.iter().map(|v| (v - om).powi(2)).sum::<f64>() / 8.0;
            assert!(om.abs() <= 1e-10);
            assert!((ov - var / (var + 1e-5)).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::<f64>::new();
        let w = t.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = t.sum(w);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut t = Tape::<f64>::new();
        let w = t.param(Tensor::from_fn(&[3], |i| i as f64 + 1.0));
        let sq = t.mul(w, w).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[4.0, 8.0, 12.0]);
        t.zero_grad();
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = Tape::<f64>::new();
        let w = t.param(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let loss = |a: &Tensor<f64>, b: &Tensor<f64>| {
            let mut t = Tape::new();
            let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
            let y = t.matmul(va, vb).unwrap();
            let s = t.sum(y);
            t.value(s).item().unwrap()
        };
        let mut t = Tape::new();
        let (va, vb) = (t.param(a.clone()), t.param(b.clone()));
        let y = t.matmul(va, vb).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_rel_close(t.grad(va).unwrap().data(), &finite_diff(&a, &|x| loss(x, &b)), 1e-6);
        assert_rel_close(t.grad(vb).unwrap().data(), &finite_diff(&b, &|x| loss(&a, x)), 1e-6);
    }

    #[test]
    fn batched_matmul_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = rand_tensor(&mut rng, &[2, 4, 3]);
        check_unary(&[2, 3, 4], 5, |t, x| {
            let c = t.constant(b.clone());
            t.matmul(x, c).unwrap()
        });
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        check_unary(&[2, 4, 3], 6, |t, x| {
            let c = t.constant(a.clone());
            t.matmul(c, x).unwrap()
        });
    }

    #[test]
    fn unary_gradients_match_finite_differences() {
        check_unary(&[2, 5], 10, |t, x| t.softmax(x).unwrap());
        check_unary(&[2, 5], 11, |t, x| t.relu(x));
        check_unary(&[3, 4], 12, |t, x| t.scale(x, 0.37));
        check_unary(&[2, 3, 4], 13, |t, x| t.permute(x, &[1, 0, 2]).unwrap());
        check_unary(&[2, 3, 4], 14, |t, x| t.transpose(x).unwrap());
        check_unary(&[2, 3, 4], 15, |t, x| t.reshape(x, &[6, 4]).unwrap());
        check_unary(&[2, 3, 4], 16, |t, x| t.rope(x, &[0, 3, 7], 10000.0).unwrap());
        check_unary(&[2, 3], 17, |t, x| {
            let sq = t.mul(x, x).unwrap();
            t.mean(sq)
        });
        check_unary(&[3, 3], 18, |t, x| {
            let m = Tensor::from_f64(&[3], &[0.0, f64::NEG_INFINITY, 0.5]).unwrap();
            let y = t.add_const(x, &m).unwrap();
            t.softmax(y).unwrap()
        });
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let gain = rand_tensor(&mut rng, &[6]);
        let bias = rand_tensor(&mut rng, &[6]);
        let x = rand_tensor(&mut rng, &[3, 6]);
        check_unary(&[3, 6], 21, |t, x| {
            let g = t.constant(gain.clone());
            let b = t.constant(bias.clone());
            t.layer_norm(x, g, b, 1e-5).unwrap()
        });
        check_unary(&[6], 22, |t, g| {
            let vx = t.constant(x.clone());
            let b = t.constant(bias.clone());
            t.layer_norm(vx, g, b, 1e-5).unwrap()
        });
        check_unary(&[6], 23, |t, b| {
            let vx = t.constant(x.clone());
            let g = t.constant(gain.clone());
            t.layer_norm(vx, g, b, 1e-5).unwrap()
        });
    }

    #[test]
    fn bias_and_var_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x = rand_tensor(&mut rng, &[3, 4]);
        check_unary(&[4], 31, |t, b| {
            let vx = t.constant(x.clone());
            t.add_bias(vx, b).unwrap()
        });
        let same = [true, false, false, true];
        let v = rand_tensor(&mut rng, &[2]);
        check_unary(&[2], 32, |t, u| {
            let vv = t.constant(v.clone());
            t.var_bias(u, vv, &same).unwrap()
        });
        check_unary(&[2], 33, |t, vv| {
            let u = t.constant(v.clone());
            t.var_bias(u, vv, &same).unwrap()
        });
    }

    #[test]
    fn rope_rejects_odd_dimension() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.rope(x, &[0, 1], 10000.0), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(Tensor::ones(&[2]));
        let w = t.param(Tensor::ones(&[2]));
        let y = t.mul(c, w).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert!(t.grad(w).is_some());
    }
}
