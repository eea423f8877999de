//! Minimal reverse-mode autodiff over row-major matrices.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list is a valid topological backward pass. Frozen weights are borrowed
//! rather than copied onto the tape.

use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::{math, matmul, rms_norm_into, rotate_head, rotate_head_2d, softmax_in_place, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row rotary layout applied to contiguous head slices.
#[derive(Debug, Clone)]
pub enum Rope {
    /// 1D rotation of every `head_dim` slice at the row's position.
    Linear { positions: Vec<usize>, head_dim: usize, theta: f64 },
    /// 2D rotation of every `head_dim` slice at the row's `(row, col)`.
    Grid { coords: Vec<(usize, usize)>, head_dim: usize, theta: f64 },
}

impl Rope {
    fn apply(&self, x: &mut Tensor, inverse: bool) {
        for i in 0..x.rows() {
            let row = x.row_mut(i);
            match self {
                Rope::Linear { positions, head_dim, theta } => {
                    for head in row.chunks_exact_mut(*head_dim) {
                        rotate_head(head, positions[i] as f64, *theta, inverse);
                    }
                }
                Rope::Grid { coords, head_dim, theta } => {
                    let (r, c) = coords[i];
                    for head in row.chunks_exact_mut(*head_dim) {
                        rotate_head_2d(head, r as f64, c as f64, *theta, inverse);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Gain<'a> {
    Var(Var),
    Const(&'a [f64]),
}

#[derive(Debug, Clone)]
enum Op<'a> {
    Leaf,
    MatMul(Var, Var),
    /// Right product with a frozen matrix.
    MatMulConst(Var, &'a Tensor),
    Add(Var, Var),
    /// Broadcast a `[1, m]` row over every row.
    AddRow(Var, Var),
    /// Add a `[1, m]` row to one row only.
    AddAtRow(Var, usize, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    RmsNorm(Var, Gain<'a>, f64),
    Silu(Var),
    Transpose(Var),
    Rows(Var, usize),
    Cols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    /// Row softmax; with `Some(offset)`, row `i` sees only its first `offset + i + 1` entries.
    Softmax(Var, Option<usize>),
    Rotate(Var, Rope),
    CrossEntropy(Var, Vec<usize>),
    BceLogits(Var, Vec<f64>),
    DiceLogits(Var, Vec<f64>, f64),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node<'a> {
    value: Tensor,
    op: Op<'a>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::from_vec(&[rows, cols], data).expect("tape shape")
}

fn scalar(v: f64) -> Tensor {
    mat(1, 1, vec![v])
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.row_width())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op<'a>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.shape().len(), 2);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b)).expect("matmul shape");
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn matmul_const(&mut self, a: Var, w: &'a Tensor) -> Var {
        let v = matmul(self.value(a), w).expect("matmul shape");
        let rg = self.rg(&[a]);
        self.push(v, Op::MatMulConst(a, w), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b)).expect("add shape");
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let mut v = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..v.rows() {
            for (o, bv) in v.row_mut(i).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(v, Op::AddRow(x, bias), rg)
    }

    pub fn add_at_row(&mut self, x: Var, row: usize, b: Var) -> Var {
        let mut v = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for (o, e) in v.row_mut(row).iter_mut().zip(&bv) {
            *o += e;
        }
        let rg = self.rg(&[x, b]);
        self.push(v, Op::AddAtRow(x, row, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        for (o, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data_mut().iter_mut().for_each(|x| *x *= s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    fn rms_norm_value(&self, x: Var, gain: &[f64], eps: f64) -> Tensor {
        let xv = self.value(x);
        let mut out = xv.clone();
        for i in 0..xv.rows() {
            rms_norm_into(xv.row(i), gain, eps, out.row_mut(i));
        }
        out
    }

    /// Row RMS norm with a trainable `[1, n]` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Var {
        let g = self.value(gain).data().to_vec();
        let v = self.rms_norm_value(x, &g, eps);
        let rg = self.rg(&[x, gain]);
        self.push(v, Op::RmsNorm(x, Gain::Var(gain), eps), rg)
    }

    pub fn rms_norm_const(&mut self, x: Var, gain: &'a [f64], eps: f64) -> Var {
        let v = self.rms_norm_value(x, gain, eps);
        let rg = self.rg(&[x]);
        self.push(v, Op::RmsNorm(x, Gain::Const(gain), eps), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data_mut().iter_mut().for_each(|x| *x = math::silu(*x));
        let rg = self.rg(&[a]);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose().expect("matrix");
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    /// Rows `start..start+count`.
    pub fn rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let src = self.value(a);
        let w = src.row_width();
        let v = mat(count, w, src.data()[start * w..(start + count) * w].to_vec());
        let rg = self.rg(&[a]);
        self.push(v, Op::Rows(a, start), rg)
    }

    /// Columns `start..start+width`.
    pub fn cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let src = self.value(a);
        let mut data = Vec::with_capacity(src.rows() * width);
        for i in 0..src.rows() {
            data.extend_from_slice(&src.row(i)[start..start + width]);
        }
        let v = mat(src.rows(), width, data);
        let rg = self.rg(&[a]);
        self.push(v, Op::Cols(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let w = self.value(parts[0]).row_width();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.row_width(), w, "concat_rows width");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let rg = self.rg(parts);
        self.push(mat(rows, w, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).rows();
        let width: usize = parts.iter().map(|&p| self.value(p).row_width()).sum();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        self.push(mat(n, width, data), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn softmax(&mut self, a: Var, causal_offset: Option<usize>) -> Var {
        let mut v = self.value(a).clone();
        let w = v.row_width();
        for i in 0..v.rows() {
            let visible = causal_offset.map_or(w, |o| (o + i + 1).min(w));
            let row = v.row_mut(i);
            softmax_in_place(&mut row[..visible]);
            row[visible..].iter_mut().for_each(|x| *x = 0.0);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::Softmax(a, causal_offset), rg)
    }

    pub fn rotate(&mut self, a: Var, rope: Rope) -> Var {
        let mut v = self.value(a).clone();
        rope.apply(&mut v, false);
        let rg = self.rg(&[a]);
        self.push(v, Op::Rotate(a, rope), rg)
    }

    /// Mean token cross-entropy of `[n, V]` logits against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.rows(), targets.len(), "one target per row");
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            total += log_sum_exp(z.row(i)) - z.row(i)[t];
        }
        let v = scalar(total / targets.len() as f64);
        let rg = self.rg(&[logits]);
        self.push(v, Op::CrossEntropy(logits, targets.to_vec()), rg)
    }

    /// Mean binary cross-entropy of sigmoid(`z`) against `mask`, from logits.
    pub fn bce_logits(&mut self, z: Var, mask: &[f64]) -> Var {
        let v = scalar(bce_from_logits(self.value(z).data(), mask));
        let rg = self.rg(&[z]);
        self.push(v, Op::BceLogits(z, mask.to_vec()), rg)
    }

    /// Smoothed Dice loss of sigmoid(`z`) against `mask`.
    pub fn dice_logits(&mut self, z: Var, mask: &[f64], eps: f64) -> Var {
        let p: Vec<f64> = self.value(z).data().iter().map(|&x| math::sigmoid(x)).collect();
        let v = scalar(dice_from_probs(&p, mask, eps));
        let rg = self.rg(&[z]);
        self.push(v, Op::DiceLogits(z, mask.to_vec(), eps), rg)
    }

    /// `Σ w_i · s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.value(v).data()[0]).sum();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        self.push(scalar(total), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Gradients of scalar `out` for every node (`None` where no gradient flows).
    pub fn backward(&self, out: Var) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(scalar(1.0));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        grads
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g).expect("grad shape"),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<'a>, y: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let bt = self.value(*b).transpose().expect("matrix");
                    self.accumulate(grads, *a, matmul(g, &bt).expect("shape"));
                }
                if self.nodes[b.0].requires_grad {
                    let at = self.value(*a).transpose().expect("matrix");
                    self.accumulate(grads, *b, matmul(&at, g).expect("shape"));
                }
            }
            Op::MatMulConst(a, w) => {
                let wt = w.transpose().expect("matrix");
                self.accumulate(grads, *a, matmul(g, &wt).expect("shape"));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                let (n, m) = dims(g);
                let mut db = vec![0.0; m];
                for i in 0..n {
                    for (d, v) in db.iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *bias, mat(1, m, db));
            }
            Op::AddAtRow(x, row, b) => {
                self.accumulate(grads, *x, g.clone());
                self.accumulate(grads, *b, mat(1, g.row_width(), g.row(*row).to_vec()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = g.clone();
                da.data_mut().iter_mut().zip(bv.data()).for_each(|(d, y)| *d *= y);
                let mut db = g.clone();
                db.data_mut().iter_mut().zip(av.data()).for_each(|(d, x)| *d *= x);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.data_mut().iter_mut().for_each(|x| *x *= s);
                self.accumulate(grads, *a, d);
            }
            Op::RmsNorm(x, gain, eps) => {
                let xv = self.value(*x);
                let gv: &[f64] = match gain {
                    Gain::Var(v) => self.value(*v).data(),
                    Gain::Const(c) => c,
                };
                let (n, m) = dims(xv);
                let mut dx = Tensor::zeros(&[n, m]);
                let mut dgain = vec![0.0; m];
                for i in 0..n {
                    let xr = xv.row(i);
                    let gr = g.row(i);
                    let ms = xr.iter().map(|v| v * v).sum::<f64>() / m as f64;
                    let r = 1.0 / math::sqrt(ms + eps);
                    let dot: f64 = (0..m).map(|j| gr[j] * gv[j] * xr[j]).sum();
                    let c = r * r * r * dot / m as f64;
                    let out = dx.row_mut(i);
                    for j in 0..m {
                        out[j] = r * gr[j] * gv[j] - c * xr[j];
                        dgain[j] += gr[j] * xr[j] * r;
                    }
                }
                self.accumulate(grads, *x, dx);
                if let Gain::Var(v) = gain {
                    self.accumulate(grads, *v, mat(1, m, dgain));
                }
            }
            Op::Silu(a) => {
                let mut d = g.clone();
                for (dv, &x) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                    let s = math::sigmoid(x);
                    *dv *= s * (1.0 + x * (1.0 - s));
                }
                self.accumulate(grads, *a, d);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose().expect("matrix")),
            Op::Rows(a, start) => {
                let (n, w) = dims(self.value(*a));
                let mut d = Tensor::zeros(&[n, w]);
                d.data_mut()[start * w..start * w + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, d);
            }
            Op::Cols(a, start) => {
                let (n, w) = dims(self.value(*a));
                let width = g.row_width();
                let mut d = Tensor::zeros(&[n, w]);
                for i in 0..n {
                    d.row_mut(i)[*start..start + width].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let w = g.row_width();
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    if self.nodes[p.0].requires_grad {
                        self.accumulate(grads, p, mat(n, w, g.data()[offset * w..(offset + n) * w].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).row_width();
                    if self.nodes[p.0].requires_grad {
                        let mut data = Vec::with_capacity(n * w);
                        for i in 0..n {
                            data.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, mat(n, w, data));
                    }
                    offset += w;
                }
            }
            Op::Softmax(a, offset) => {
                let (n, w) = dims(y);
                let mut d = Tensor::zeros(&[n, w]);
                for i in 0..n {
                    let visible = offset.map_or(w, |o| (o + i + 1).min(w));
                    let (yr, gr) = (&y.row(i)[..visible], &g.row(i)[..visible]);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (o, (p, q)) in d.row_mut(i)[..visible].iter_mut().zip(yr.iter().zip(gr)) {
                        *o = p * (q - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Rotate(a, rope) => {
                let mut d = g.clone();
                rope.apply(&mut d, true);
                self.accumulate(grads, *a, d);
            }
            Op::CrossEntropy(z, targets) => {
                let zv = self.value(*z);
                let scale = g.data()[0] / targets.len() as f64;
                let mut d = zv.clone();
                for (i, &t) in targets.iter().enumerate() {
                    let row = d.row_mut(i);
                    softmax_in_place(row);
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *z, d);
            }
            Op::BceLogits(z, mask) => {
                let zv = self.value(*z);
                let scale = g.data()[0] / mask.len() as f64;
                let data = zv.data().iter().zip(mask).map(|(&x, m)| scale * (math::sigmoid(x) - m)).collect();
                self.accumulate(grads, *z, mat(zv.rows(), zv.row_width(), data));
            }
            Op::DiceLogits(z, mask, eps) => {
                let zv = self.value(*z);
                let p: Vec<f64> = zv.data().iter().map(|&x| math::sigmoid(x)).collect();
                let inter: f64 = p.iter().zip(mask).map(|(a, b)| a * b).sum();
                let denom = p.iter().sum::<f64>() + mask.iter().sum::<f64>() + eps;
                let num = 2.0 * inter + eps;
                let g0 = g.data()[0];
                let data = p
                    .iter()
                    .zip(mask)
                    .map(|(&pi, &mi)| {
                        let dp = -(2.0 * mi * denom - num) / (denom * denom);
                        g0 * dp * pi * (1.0 - pi)
                    })
                    .collect();
                self.accumulate(grads, *z, mat(zv.rows(), zv.row_width(), data));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, scalar(w * g.data()[0]));
                }
            }
        }
    }
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + math::ln(z.iter().map(|&v| math::exp(v - max)).sum::<f64>())
}

/// `mean(softplus(z) − m·z)`, the logit form of binary cross-entropy.
pub(crate) fn bce_from_logits(z: &[f64], mask: &[f64]) -> f64 {
    let total: f64 = z.iter().zip(mask).map(|(&x, &m)| math::softplus(x) - m * x).sum();
    total / z.len() as f64
}

pub(crate) fn dice_from_probs(p: &[f64], mask: &[f64], eps: f64) -> f64 {
    let inter: f64 = p.iter().zip(mask).map(|(a, b)| a * b).sum();
    let denom = p.iter().sum::<f64>() + mask.iter().sum::<f64>() + eps;
    1.0 - (2.0 * inter + eps) / denom
}
