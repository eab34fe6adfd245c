//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Operations append nodes to a [`Tape`]; [`Tape::backward`] walks the tape in
//! reverse and accumulates vector-Jacobian products. Tensors are row-major and
//! every op treats the trailing axis as the feature axis.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddConst(usize),
    ScaleConst(usize, f64),
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    AddRow(usize, usize),
    MulRow(usize, usize),
    Transpose {
        a: usize,
        m: usize,
        n: usize,
    },
    Reshape(usize),
    SliceRows {
        a: usize,
        start: usize,
        width: usize,
    },
    ConcatRows(Vec<usize>),
    SliceCols {
        a: usize,
        start: usize,
        total: usize,
    },
    ConcatCols(Vec<usize>),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    Gelu(usize),
    Sigmoid(usize),
    Abs(usize),
    RowsUnitNorm(usize),
    ScaleByElem {
        a: usize,
        s: usize,
        idx: usize,
    },
    SumAll(usize),
    MeanAll(usize),
    Permute {
        a: usize,
        perm: std::rc::Rc<Vec<usize>>,
    },
}

#[derive(Debug)]
struct Node<E: Scalar> {
    shape: Vec<usize>,
    value: Vec<E>,
    grad: Option<Vec<E>>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<E>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn input(&mut self, t: Tensor<E>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.input(t, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[E] {
        &self.nodes[v.0].value
    }

    pub fn value_tensor(&self, v: Var) -> Tensor<E> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
            .expect("tape node shape is consistent")
    }

    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn rows_of(shape: &[usize]) -> usize {
        shape.iter().product::<usize>() / shape.last().copied().unwrap_or(1)
    }

    fn last_of(shape: &[usize]) -> usize {
        shape.last().copied().unwrap_or(1)
    }

    // ---- elementwise ----

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dimension(format!(
                "{name}: shapes {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let v: Vec<E> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let v: Vec<E> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let v: Vec<E> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Mul(a.0, b.0), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ce = E::from_f64(c);
        let v: Vec<E> = self.nodes[a.0].value.iter().map(|&x| x + ce).collect();
        let rg = self.requires(a.0);
        self.push(self.nodes[a.0].shape.clone(), v, Op::AddConst(a.0), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ce = E::from_f64(c);
        let v: Vec<E> = self.nodes[a.0].value.iter().map(|&x| x * ce).collect();
        let rg = self.requires(a.0);
        self.push(self.nodes[a.0].shape.clone(), v, Op::ScaleConst(a.0, c), rg)
    }

    // ---- linear algebra ----

    /// Matrix product over the trailing axis: x[..., k] * w[k, n] -> [..., n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ka, kb) = (Self::last_of(&self.nodes[a.0].shape), self.nodes[b.0].shape[0]);
        if self.nodes[b.0].shape.len() != 2 || ka != kb {
            return Err(Error::Dimension(format!(
                "matmul: x shape {:?} incompatible with weight shape {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let m = Self::rows_of(&self.nodes[a.0].shape);
        let k = ka;
        let n = self.nodes[b.0].shape[1];
        let mut out = vec![E::zero(); m * n];
        E::gemm(
            m,
            k,
            n,
            E::one(),
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            E::zero(),
            &mut out,
        );
        let mut shape = self.nodes[a.0].shape.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(shape, out, Op::Matmul { a: a.0, b: b.0, m, k, n }, rg))
    }

    /// Affine map over the trailing axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(bias) => self.add_row(y, bias),
            None => Ok(y),
        }
    }

    /// Broadcast-add a [d] vector over all rows of x[..., d].
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let d = Self::last_of(&self.nodes[x.0].shape);
        if self.nodes[v.0].value.len() != d {
            return Err(Error::Dimension(format!(
                "add_row: trailing dim {} vs vector length {}",
                d,
                self.nodes[v.0].value.len()
            )));
        }
        let vd = &self.nodes[v.0].value;
        let out: Vec<E> = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x0)| x0 + vd[i % d])
            .collect();
        let rg = self.requires(x.0) || self.requires(v.0);
        Ok(self.push(self.nodes[x.0].shape.clone(), out, Op::AddRow(x.0, v.0), rg))
    }

    /// Broadcast-multiply a [d] vector over all rows of x[..., d].
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let d = Self::last_of(&self.nodes[x.0].shape);
        if self.nodes[v.0].value.len() != d {
            return Err(Error::Dimension(format!(
                "mul_row: trailing dim {} vs vector length {}",
                d,
                self.nodes[v.0].value.len()
            )));
        }
        let vd = &self.nodes[v.0].value;
        let out: Vec<E> = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x0)| x0 * vd[i % d])
            .collect();
        let rg = self.requires(x.0) || self.requires(v.0);
        Ok(self.push(self.nodes[x.0].shape.clone(), out, Op::MulRow(x.0, v.0), rg))
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let shape = &self.nodes[a.0].shape;
        if shape.len() != 2 {
            return Err(Error::Dimension(format!("transpose2d on shape {:?}", shape)));
        }
        let (m, n) = (shape[0], shape[1]);
        let src = &self.nodes[a.0].value;
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.requires(a.0);
        Ok(self.push(vec![n, m], out, Op::Transpose { a: a.0, m, n }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.nodes[a.0].value.len() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?}",
                self.nodes[a.0].shape, shape
            )));
        }
        let v = self.nodes[a.0].value.clone();
        let rg = self.requires(a.0);
        Ok(self.push(shape, v, Op::Reshape(a.0), rg))
    }

    // ---- slicing / concatenation (matrix view: rows x trailing axis) ----

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let rows = Self::rows_of(&self.nodes[a.0].shape);
        let width = Self::last_of(&self.nodes[a.0].shape);
        if start + len > rows || len == 0 {
            return Err(Error::Dimension(format!(
                "slice_rows [{start}, {}) of {rows} rows",
                start + len
            )));
        }
        let v = self.nodes[a.0].value[start * width..(start + len) * width].to_vec();
        let rg = self.requires(a.0);
        Ok(self.push(vec![len, width], v, Op::SliceRows { a: a.0, start, width }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_rows: empty part list".into()));
        }
        let width = Self::last_of(&self.nodes[parts[0].0].shape);
        let mut v = Vec::new();
        let mut rows = 0usize;
        let mut rg = false;
        for p in parts {
            if Self::last_of(&self.nodes[p.0].shape) != width {
                return Err(Error::Dimension("concat_rows: trailing dims differ".into()));
            }
            rows += Self::rows_of(&self.nodes[p.0].shape);
            v.extend_from_slice(&self.nodes[p.0].value);
            rg |= self.requires(p.0);
        }
        Ok(self.push(
            vec![rows, width],
            v,
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let rows = Self::rows_of(&self.nodes[a.0].shape);
        let total = Self::last_of(&self.nodes[a.0].shape);
        if start + len > total || len == 0 {
            return Err(Error::Dimension(format!(
                "slice_cols [{start}, {}) of {total} cols",
                start + len
            )));
        }
        let src = &self.nodes[a.0].value;
        let mut v = Vec::with_capacity(rows * len);
        for r in 0..rows {
            v.extend_from_slice(&src[r * total + start..r * total + start + len]);
        }
        let rg = self.requires(a.0);
        Ok(self.push(vec![rows, len], v, Op::SliceCols { a: a.0, start, total }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_cols: empty part list".into()));
        }
        let rows = Self::rows_of(&self.nodes[parts[0].0].shape);
        let mut total = 0usize;
        let mut rg = false;
        for p in parts {
            if Self::rows_of(&self.nodes[p.0].shape) != rows {
                return Err(Error::Dimension("concat_cols: row counts differ".into()));
            }
            total += Self::last_of(&self.nodes[p.0].shape);
            rg |= self.requires(p.0);
        }
        let mut v = vec![E::zero(); rows * total];
        let mut col = 0usize;
        for p in parts {
            let w = Self::last_of(&self.nodes[p.0].shape);
            let src = &self.nodes[p.0].value;
            for r in 0..rows {
                v[r * total + col..r * total + col + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col += w;
        }
        Ok(self.push(
            vec![rows, total],
            v,
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            rg,
        ))
    }

    // ---- nonlinearities ----

    pub fn softmax(&mut self, a: Var) -> Var {
        let width = Self::last_of(&self.nodes[a.0].shape);
        let src = &self.nodes[a.0].value;
        let mut out = vec![E::zero(); src.len()];
        for (row_in, row_out) in src.chunks(width).zip(out.chunks_mut(width)) {
            let max = row_in.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o = *o / sum;
            }
        }
        let rg = self.requires(a.0);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Softmax(a.0), rg)
    }

    /// Per-token normalization over the trailing axis followed by affine gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = Self::last_of(&self.nodes[x.0].shape);
        if d < 1 {
            return Err(Error::Dimension("layer_norm: trailing dim must be >= 1".into()));
        }
        if eps <= 0.0 {
            return Err(Error::Argument("layer_norm: eps must be positive".into()));
        }
        if self.nodes[gain.0].value.len() != d || self.nodes[bias.0].value.len() != d {
            return Err(Error::Dimension(format!(
                "layer_norm: gain/bias length must be {d}"
            )));
        }
        let epse = E::from_f64(eps);
        let g = self.nodes[gain.0].value.clone();
        let b = self.nodes[bias.0].value.clone();
        let src = &self.nodes[x.0].value;
        let mut out = vec![E::zero(); src.len()];
        let nd = E::from_f64(d as f64);
        for (row_in, row_out) in src.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row_in.iter().cloned().sum::<E>() / nd;
            let var = row_in.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / nd;
            let inv = (var + epse).sqrt().recip();
            for (j, (o, &v)) in row_out.iter_mut().zip(row_in).enumerate() {
                *o = (v - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.requires(x.0) || self.requires(gain.0) || self.requires(bias.0);
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v: Vec<E> = self.nodes[a.0].value.iter().map(|&x| gelu_fwd(x)).collect();
        let rg = self.requires(a.0);
        self.push(self.nodes[a.0].shape.clone(), v, Op::Gelu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v: Vec<E> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| E::one() / (E::one() + (-x).exp()))
            .collect();
        let rg = self.requires(a.0);
        self.push(self.nodes[a.0].shape.clone(), v, Op::Sigmoid(a.0), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v: Vec<E> = self.nodes[a.0].value.iter().map(|&x| x.abs()).collect();
        let rg = self.requires(a.0);
        self.push(self.nodes[a.0].shape.clone(), v, Op::Abs(a.0), rg)
    }

    /// L2-normalize every row of the trailing axis: y = x / sqrt(sum(x^2) + 1e-12).
    pub fn rows_unit_norm(&mut self, a: Var) -> Var {
        let d = Self::last_of(&self.nodes[a.0].shape);
        let src = &self.nodes[a.0].value;
        let guard = E::from_f64(UNIT_NORM_GUARD);
        let mut out = vec![E::zero(); src.len()];
        for (row_in, row_out) in src.chunks(d).zip(out.chunks_mut(d)) {
            let s: E = row_in.iter().map(|&v| v * v).sum();
            let r = (s + guard).sqrt().recip();
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = v * r;
            }
        }
        let rg = self.requires(a.0);
        self.push(self.nodes[a.0].shape.clone(), out, Op::RowsUnitNorm(a.0), rg)
    }

    /// Multiply a tensor by one element of a parameter vector.
    pub fn scale_by_elem(&mut self, a: Var, s: Var, idx: usize) -> Result<Var> {
        if idx >= self.nodes[s.0].value.len() {
            return Err(Error::Dimension(format!(
                "scale_by_elem: index {idx} out of range {}",
                self.nodes[s.0].value.len()
            )));
        }
        let c = self.nodes[s.0].value[idx];
        let v: Vec<E> = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let rg = self.requires(a.0) || self.requires(s.0);
        Ok(self.push(
            self.nodes[a.0].shape.clone(),
            v,
            Op::ScaleByElem { a: a.0, s: s.0, idx },
            rg,
        ))
    }

    /// Reorder flat elements: out[i] = a[perm[i]]. `perm` must be a
    /// permutation of 0..numel.
    pub fn permute(&mut self, a: Var, perm: std::rc::Rc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if perm.len() != src.len() || shape.iter().product::<usize>() != src.len() {
            return Err(Error::Dimension(format!(
                "permute: {} elements, {} indices, shape {:?}",
                src.len(),
                perm.len(),
                shape
            )));
        }
        let v: Vec<E> = perm.iter().map(|&i| src[i]).collect();
        let rg = self.requires(a.0);
        Ok(self.push(shape, v, Op::Permute { a: a.0, perm }, rg))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: E = self.nodes[a.0].value.iter().cloned().sum();
        let rg = self.requires(a.0);
        self.push(vec![1], vec![s], Op::SumAll(a.0), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s: E = self.nodes[a.0].value.iter().cloned().sum();
        let rg = self.requires(a.0);
        self.push(vec![1], vec![s / E::from_f64(n as f64)], Op::MeanAll(a.0), rg)
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Clears any previous gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Argument(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        if !self.nodes[root.0].value[0].is_finite() {
            return Err(Error::Numeric("backward root is non-finite".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<E>>> = vec![None; n];
        grads[root.0] = Some(vec![E::one()]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = g;
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<E>>], target: usize, f: impl FnOnce(&mut [E])) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let slot = grads[target].get_or_insert_with(|| vec![E::zero(); self.nodes[target].value.len()]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, a, |ga| add_into(ga, g));
                self.accum(grads, b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accum(grads, a, |ga| add_into(ga, g));
                self.accum(grads, b, |gb| {
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o = *o - x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let va = &self.nodes[a].value;
                let vb = &self.nodes[b].value;
                self.accum(grads, a, |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *o += x * y;
                    }
                });
                self.accum(grads, b, |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(va) {
                        *o += x * y;
                    }
                });
            }
            Op::AddConst(a) => self.accum(grads, a, |ga| add_into(ga, g)),
            Op::ScaleConst(a, c) => {
                let ce = E::from_f64(c);
                self.accum(grads, a, |ga| {
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o += x * ce;
                    }
                });
            }
            Op::Matmul { a, b, m, k, n } => {
                let va = &self.nodes[a].value;
                let vb = &self.nodes[b].value;
                // dA = G * B^T
                self.accum(grads, a, |ga| {
                    E::gemm_ex(m, n, k, E::one(), g, n as isize, 1, vb, 1, n as isize, E::one(), ga);
                });
                // dB = A^T * G
                self.accum(grads, b, |gb| {
                    E::gemm_ex(k, m, n, E::one(), va, 1, k as isize, g, n as isize, 1, E::one(), gb);
                });
            }
            Op::AddRow(x, v) => {
                let d = self.nodes[v].value.len();
                self.accum(grads, x, |gx| add_into(gx, g));
                self.accum(grads, v, |gv| {
                    for (i, &x0) in g.iter().enumerate() {
                        gv[i % d] += x0;
                    }
                });
            }
            Op::MulRow(x, v) => {
                let d = self.nodes[v].value.len();
                let vx = &self.nodes[x].value;
                let vv = &self.nodes[v].value;
                self.accum(grads, x, |gx| {
                    for (i, (o, &x0)) in gx.iter_mut().zip(g).enumerate() {
                        *o += x0 * vv[i % d];
                    }
                });
                self.accum(grads, v, |gv| {
                    for (i, &x0) in g.iter().enumerate() {
                        gv[i % d] += x0 * vx[i];
                    }
                });
            }
            Op::Transpose { a, m, n } => {
                // output is [n, m]; route g[j, i] back to a[i, j]
                self.accum(grads, a, |ga| {
                    for j in 0..n {
                        for i2 in 0..m {
                            ga[i2 * n + j] += g[j * m + i2];
                        }
                    }
                });
            }
            Op::Reshape(a) => self.accum(grads, a, |ga| add_into(ga, g)),
            Op::SliceRows { a, start, width } => {
                self.accum(grads, a, |ga| {
                    let off = start * width;
                    for (o, &x) in ga[off..off + g.len()].iter_mut().zip(g) {
                        *o += x;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0usize;
                for p in parts {
                    let len = self.nodes[p].value.len();
                    let gs = &g[off..off + len];
                    self.accum(grads, p, |gp| add_into(gp, gs));
                    off += len;
                }
            }
            Op::SliceCols { a, start, total } => {
                let len = Self::last_of(&self.nodes[i].shape);
                let rows = self.nodes[i].value.len() / len;
                self.accum(grads, a, |ga| {
                    for r in 0..rows {
                        for c in 0..len {
                            ga[r * total + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = Self::last_of(&self.nodes[i].shape);
                let rows = self.nodes[i].value.len() / total;
                let mut col = 0usize;
                for p in parts {
                    let w = Self::last_of(&self.nodes[p].shape);
                    self.accum(grads, p, |gp| {
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + col + c];
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let w = Self::last_of(&self.nodes[i].shape);
                self.accum(grads, a, |ga| {
                    for r in 0..y.len() / w {
                        let yr = &y[r * w..(r + 1) * w];
                        let gr = &g[r * w..(r + 1) * w];
                        let dot: E = yr.iter().zip(gr).map(|(&a0, &b0)| a0 * b0).sum();
                        for c in 0..w {
                            ga[r * w + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let d = Self::last_of(&self.nodes[x].shape);
                let nd = E::from_f64(d as f64);
                let epse = E::from_f64(eps);
                let vx = &self.nodes[x].value;
                let vg = &self.nodes[gain].value;
                let rows = vx.len() / d;
                // recompute per-row statistics
                let mut xhat = vec![E::zero(); vx.len()];
                let mut inv_std = vec![E::zero(); rows];
                for r in 0..rows {
                    let row = &vx[r * d..(r + 1) * d];
                    let mean = row.iter().cloned().sum::<E>() / nd;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / nd;
                    let inv = (var + epse).sqrt().recip();
                    inv_std[r] = inv;
                    for j in 0..d {
                        xhat[r * d + j] = (row[j] - mean) * inv;
                    }
                }
                self.accum(grads, gain, |gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.accum(grads, bias, |gb| {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                });
                self.accum(grads, x, |gx| {
                    for r in 0..rows {
                        let mut mean_dy = E::zero();
                        let mut mean_dy_xhat = E::zero();
                        for j in 0..d {
                            let dy = g[r * d + j] * vg[j];
                            mean_dy += dy;
                            mean_dy_xhat += dy * xhat[r * d + j];
                        }
                        mean_dy = mean_dy / nd;
                        mean_dy_xhat = mean_dy_xhat / nd;
                        for j in 0..d {
                            let dy = g[r * d + j] * vg[j];
                            gx[r * d + j] +=
                                inv_std[r] * (dy - mean_dy - xhat[r * d + j] * mean_dy_xhat);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let vx = &self.nodes[a].value;
                self.accum(grads, a, |ga| {
                    for (i2, (o, &x0)) in ga.iter_mut().zip(g).enumerate() {
                        *o += x0 * gelu_bwd(vx[i2]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                self.accum(grads, a, |ga| {
                    for (i2, (o, &x0)) in ga.iter_mut().zip(g).enumerate() {
                        *o += x0 * y[i2] * (E::one() - y[i2]);
                    }
                });
            }
            Op::Abs(a) => {
                let vx = &self.nodes[a].value;
                self.accum(grads, a, |ga| {
                    for (i2, (o, &x0)) in ga.iter_mut().zip(g).enumerate() {
                        let s = if vx[i2] > E::zero() {
                            E::one()
                        } else if vx[i2] < E::zero() {
                            -E::one()
                        } else {
                            E::zero()
                        };
                        *o += x0 * s;
                    }
                });
            }
            Op::RowsUnitNorm(a) => {
                let d = Self::last_of(&self.nodes[a].shape);
                let vx = &self.nodes[a].value;
                let guard = E::from_f64(UNIT_NORM_GUARD);
                self.accum(grads, a, |ga| {
                    for r in 0..vx.len() / d {
                        let row = &vx[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let s: E = row.iter().map(|&v| v * v).sum();
                        let rinv = (s + guard).sqrt().recip();
                        let r3 = rinv * rinv * rinv;
                        let xg: E = row.iter().zip(gr).map(|(&x0, &g0)| x0 * g0).sum();
                        for j in 0..d {
                            ga[r * d + j] += gr[j] * rinv - row[j] * xg * r3;
                        }
                    }
                });
            }
            Op::ScaleByElem { a, s, idx } => {
                let c = self.nodes[s].value[idx];
                let va = &self.nodes[a].value;
                self.accum(grads, a, |ga| {
                    for (o, &x0) in ga.iter_mut().zip(g) {
                        *o += x0 * c;
                    }
                });
                self.accum(grads, s, |gs| {
                    let dot: E = g.iter().zip(va).map(|(&g0, &a0)| g0 * a0).sum();
                    gs[idx] += dot;
                });
            }
            Op::SumAll(a) => {
                let g0 = g[0];
                self.accum(grads, a, |ga| {
                    for o in ga.iter_mut() {
                        *o += g0;
                    }
                });
            }
            Op::Permute { a, perm } => {
                self.accum(grads, a, |ga| {
                    for (out_i, &src_i) in perm.iter().enumerate() {
                        ga[src_i] += g[out_i];
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a].value.len();
                let g0 = g[0] / E::from_f64(n as f64);
                self.accum(grads, a, |ga| {
                    for o in ga.iter_mut() {
                        *o += g0;
                    }
                });
            }
        }
    }
}

const UNIT_NORM_GUARD: f64 = 1e-12;

fn add_into<E: Scalar>(dst: &mut [E], src: &[E]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<E: Scalar>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (E::one() + inner.tanh())
}

fn gelu_bwd<E: Scalar>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * c * (E::one() + three * a * x * x)
}
