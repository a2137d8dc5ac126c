//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation validates its shape contract, runs the forward kernel,
//! verifies the output is finite, reports its cost to the meter (when one is
//! attached) and records itself for the backward sweep. Replaying the tape in
//! reverse registration order accumulates gradients for every node marked
//! differentiable.
//!
//! One tape per forward/backward pass; tapes are never shared.

use super::meter::{CostKind, Meter};
use super::resize;
use super::{matmul_nn, matmul_nt, matmul_tn, Real, Tensor};
use crate::{Error, Result};

/// Handle to a tape node. Only meaningful for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T: Real> {
    Leaf,
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Sum { a: Var },
    MeanRows { a: Var },
    Matmul { a: Var, b: Var },
    MatmulNT { a: Var, b: Var },
    MatmulTN { a: Var, b: Var },
    SoftmaxRows { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Gelu { a: Var },
    CrossEntropy { logits: Var, probs: Vec<T>, label: usize },
    BilinearResize { x: Var, src: (usize, usize), dst: (usize, usize), ch: usize },
    TrilinearResize { x: Var, src: (usize, usize, usize), dst: (usize, usize, usize), ch: usize },
    ColSlice { x: Var, start: usize, width: usize },
    ConcatCols { parts: Vec<(Var, usize)> },
    Reshape { x: Var },
    PatchExtract { x: Var, patch: (usize, usize), grid: (usize, usize), ch: usize },
}

struct Node<T: Real> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Recording tape. See module docs.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    meter: Option<Meter>,
    ran_backward: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), meter: None, ran_backward: false }
    }

    pub fn with_meter() -> Self {
        let mut t = Self::new();
        t.meter = Some(Meter::new());
        t
    }

    pub fn meter(&self) -> Option<&Meter> {
        self.meter.as_ref()
    }

    pub fn meter_mut(&mut self) -> Option<&mut Meter> {
        self.meter.as_mut()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input. `needs_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.push(value, needs_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass, if the node participated.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn meter_macs(&mut self, kind: CostKind, macs: u64) {
        if let Some(m) = self.meter.as_mut() {
            m.record_macs(kind, macs);
        }
    }

    fn finish_op(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>, what: &str) -> Result<Var> {
        value.assert_finite(what)?;
        Ok(self.push(value, needs_grad, op))
    }

    // ── Elementwise and reductions ──────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.meter_macs(CostKind::Neglected, value.len() as u64);
        let ng = self.needs(a) || self.needs(b);
        self.finish_op(value, ng, Op::Add { a, b }, "add")
    }

    /// Broadcast-add a bias row over the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let c = va.last_dim();
        if vb.rank() != 1 || vb.shape()[0] != c {
            return Err(Error::Shape(format!(
                "add_bias: bias {:?} does not match last dim {}",
                vb.shape(),
                c
            )));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, &b) in row.iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.meter_macs(CostKind::Neglected, value.len() as u64);
        let ng = self.needs(a) || self.needs(bias);
        self.finish_op(value, ng, Op::AddBias { a, bias }, "add_bias")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.meter_macs(CostKind::Neglected, value.len() as u64);
        let ng = self.needs(a) || self.needs(b);
        self.finish_op(value, ng, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let f = T::from_f64(factor);
        let data: Vec<T> = va.data().iter().map(|&x| x * f).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.meter_macs(CostKind::Neglected, value.len() as u64);
        let ng = self.needs(a);
        self.finish_op(value, ng, Op::Scale { a, factor }, "scale")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let mut acc = T::ZERO;
        for &x in va.data() {
            acc += x;
        }
        self.meter_macs(CostKind::Neglected, va.len() as u64);
        let ng = self.needs(a);
        self.finish_op(Tensor::scalar(acc), ng, Op::Sum { a }, "sum")
    }

    /// Column means of a rank-2 tensor: (R, C) -> (C,). Global average
    /// pooling over tokens.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 {
            return Err(Error::Shape(format!("mean_rows wants rank 2, got {:?}", va.shape())));
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let mut out = vec![T::ZERO; c];
        for row in va.data().chunks(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = T::from_f64(1.0 / r as f64);
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        let value = Tensor::new(vec![c], out)?;
        self.meter_macs(CostKind::Neglected, (r * c) as u64);
        let ng = self.needs(a);
        self.finish_op(value, ng, Op::MeanRows { a }, "mean_rows")
    }

    // ── Matrix products ─────────────────────────────────────────────

    fn matmul_shapes(&self, a: Var, b: Var) -> Result<(usize, usize, usize, usize)> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 {
            return Err(Error::Shape(format!(
                "matmul wants rank-2 operands, got {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        Ok((va.shape()[0], va.shape()[1], vb.shape()[0], vb.shape()[1]))
    }

    /// out = A(m×k) @ B(k×n). MACs: m·k·n under `kind`.
    pub fn matmul(&mut self, a: Var, b: Var, kind: CostKind) -> Result<Var> {
        let (m, k, bk, n) = self.matmul_shapes(a, b)?;
        if k != bk {
            return Err(Error::Shape(format!("matmul: inner dims {k} vs {bk}")));
        }
        let mut out = vec![T::ZERO; m * n];
        matmul_nn(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.meter_macs(kind, (m * k * n) as u64);
        let ng = self.needs(a) || self.needs(b);
        self.finish_op(value, ng, Op::Matmul { a, b }, "matmul")
    }

    /// out = A(m×k) @ B(n×k)^T. MACs: m·k·n under `kind`.
    pub fn matmul_nt(&mut self, a: Var, b: Var, kind: CostKind) -> Result<Var> {
        let (m, k, n, bk) = self.matmul_shapes(a, b)?;
        if k != bk {
            return Err(Error::Shape(format!("matmul_nt: inner dims {k} vs {bk}")));
        }
        let mut out = vec![T::ZERO; m * n];
        matmul_nt(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.meter_macs(kind, (m * k * n) as u64);
        let ng = self.needs(a) || self.needs(b);
        self.finish_op(value, ng, Op::MatmulNT { a, b }, "matmul_nt")
    }

    /// out = A(m×k)^T @ B(m×n). MACs: m·k·n under `kind`.
    pub fn matmul_tn(&mut self, a: Var, b: Var, kind: CostKind) -> Result<Var> {
        let (m, k, bm, n) = self.matmul_shapes(a, b)?;
        if m != bm {
            return Err(Error::Shape(format!("matmul_tn: outer dims {m} vs {bm}")));
        }
        let mut out = vec![T::ZERO; k * n];
        matmul_tn(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![k, n], out)?;
        self.meter_macs(kind, (m * k * n) as u64);
        let ng = self.needs(a) || self.needs(b);
        self.finish_op(value, ng, Op::MatmulTN { a, b }, "matmul_tn")
    }

    // ── Nonlinearities ──────────────────────────────────────────────

    /// Row softmax over the last axis with max-subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let c = va.last_dim();
        if c == 0 || va.rank() == 0 {
            return Err(Error::Shape("softmax_rows wants a last axis".into()));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c) {
            let mut mx = row[0];
            for &x in row.iter() {
                if x > mx {
                    mx = x;
                }
            }
            let mut sum = T::ZERO;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        if let Some(m) = self.meter.as_mut() {
            m.record_macs(CostKind::Neglected, 5 * value.len() as u64);
            m.record_softmax_op();
        }
        let ng = self.needs(a);
        self.finish_op(value, ng, Op::SoftmaxRows { a }, "softmax_rows")
    }

    /// Layer normalization over the last axis, then affine (gamma, beta).
    /// The last axis must have at least 2 elements.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let d = vx.last_dim();
        if d < 2 {
            return Err(Error::Config(format!(
                "layer_norm needs a normalized axis of at least 2, got {d}"
            )));
        }
        let (vg, vb) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: gamma {:?} / beta {:?} vs axis {d}",
                vg.shape(),
                vb.shape()
            )));
        }
        let rows = vx.rows();
        let mut out = vec![T::ZERO; vx.len()];
        let mut means = Vec::with_capacity(rows);
        let invd = T::from_f64(1.0 / d as f64);
        let epst = T::from_f64(eps);
        let mut rstds = Vec::with_capacity(rows);
        for (r, row) in vx.data().chunks(d).enumerate() {
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * invd;
            let mut var = T::ZERO;
            for &v in row {
                let dmu = v - mean;
                var += dmu * dmu;
            }
            var = var * invd;
            let rstd = T::ONE / (var + epst).sqrt();
            means.push(mean);
            rstds.push(rstd);
            let orow = &mut out[r * d..(r + 1) * d];
            for ((o, &v), (&g, &b)) in
                orow.iter_mut().zip(row).zip(vg.data().iter().zip(vb.data()))
            {
                *o = (v - mean) * rstd * g + b;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.meter_macs(CostKind::Neglected, 8 * value.len() as u64);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.finish_op(
            value,
            ng,
            Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds },
            "layer_norm",
        )
    }

    /// Exact-erf GELU: x * Phi(x).
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let data: Vec<T> = va
            .data()
            .iter()
            .map(|&x| x * half * (T::ONE + (x * inv_sqrt2).erf()))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.meter_macs(CostKind::Neglected, 12 * value.len() as u64);
        let ng = self.needs(a);
        self.finish_op(value, ng, Op::Gelu { a }, "gelu")
    }

    /// Softmax cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let vl = &self.nodes[logits.0].value;
        if vl.rank() != 1 {
            return Err(Error::Shape(format!(
                "cross_entropy wants a logit vector, got {:?}",
                vl.shape()
            )));
        }
        let c = vl.shape()[0];
        if label >= c {
            return Err(Error::Contract(format!("label {label} out of range for {c} classes")));
        }
        let row = vl.data();
        let mut mx = row[0];
        for &x in row {
            if x > mx {
                mx = x;
            }
        }
        let mut sum = T::ZERO;
        let mut probs = Vec::with_capacity(c);
        for &x in row {
            let e = (x - mx).exp();
            probs.push(e);
            sum += e;
        }
        for p in probs.iter_mut() {
            *p = *p / sum;
        }
        // loss = logsumexp(x) - x[label]
        let loss = mx + sum.ln() - row[label];
        self.meter_macs(CostKind::Neglected, 6 * c as u64);
        let ng = self.needs(logits);
        self.finish_op(
            Tensor::scalar(loss),
            ng,
            Op::CrossEntropy { logits, probs, label },
            "cross_entropy",
        )
    }

    // ── Resampling ──────────────────────────────────────────────────

    /// Bilinear resize of an (h, w, ch) tensor to (th, tw, ch), half-pixel
    /// centers, edge-clamped. Exact passthrough at identity size.
    pub fn bilinear_resize(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 3 {
            return Err(Error::Shape(format!(
                "bilinear_resize wants (h, w, ch), got {:?}",
                vx.shape()
            )));
        }
        let (h, w, ch) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (th, tw) = target;
        if th == 0 || tw == 0 {
            return Err(Error::Shape(format!("bilinear_resize to zero extent {target:?}")));
        }
        let out = resize::bilinear_apply(vx.data(), h, w, ch, th, tw);
        let value = Tensor::new(vec![th, tw, ch], out)?;
        if (h, w) != (th, tw) {
            self.meter_macs(CostKind::Neglected, 4 * value.len() as u64);
        }
        let ng = self.needs(x);
        self.finish_op(
            value,
            ng,
            Op::BilinearResize { x, src: (h, w), dst: (th, tw), ch },
            "bilinear_resize",
        )
    }

    /// Trilinear resize of a (t, h, w, ch) tensor, same per-axis convention.
    pub fn trilinear_resize(&mut self, x: Var, target: (usize, usize, usize)) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 4 {
            return Err(Error::Shape(format!(
                "trilinear_resize wants (t, h, w, ch), got {:?}",
                vx.shape()
            )));
        }
        let (t, h, w, ch) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (tt, th, tw) = target;
        if tt == 0 || th == 0 || tw == 0 {
            return Err(Error::Shape(format!("trilinear_resize to zero extent {target:?}")));
        }
        let out = resize::trilinear_apply(vx.data(), t, h, w, ch, tt, th, tw);
        let value = Tensor::new(vec![tt, th, tw, ch], out)?;
        if (t, h, w) != (tt, th, tw) {
            self.meter_macs(CostKind::Neglected, 8 * value.len() as u64);
        }
        let ng = self.needs(x);
        self.finish_op(
            value,
            ng,
            Op::TrilinearResize { x, src: (t, h, w), dst: (tt, th, tw), ch },
            "trilinear_resize",
        )
    }

    // ── Layout ──────────────────────────────────────────────────────

    /// Columns [start, start+width) of a rank-2 tensor (head split).
    pub fn col_slice(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 2 {
            return Err(Error::Shape(format!("col_slice wants rank 2, got {:?}", vx.shape())));
        }
        let (r, c) = (vx.shape()[0], vx.shape()[1]);
        if start + width > c || width == 0 {
            return Err(Error::Shape(format!(
                "col_slice [{start}, {}) out of {c} columns",
                start + width
            )));
        }
        let mut out = Vec::with_capacity(r * width);
        for row in vx.data().chunks(c) {
            out.extend_from_slice(&row[start..start + width]);
        }
        let value = Tensor::new(vec![r, width], out)?;
        let ng = self.needs(x);
        self.finish_op(value, ng, Op::ColSlice { x, start, width }, "col_slice")
    }

    /// Concatenate rank-2 tensors with equal row counts along columns
    /// (head merge).
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of nothing".into()));
        }
        let r = self.nodes[parts[0].0].value.shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let vp = &self.nodes[p.0].value;
            if vp.rank() != 2 || vp.shape()[0] != r {
                return Err(Error::Shape(format!(
                    "concat_cols: part {:?} does not stack against {r} rows",
                    vp.shape()
                )));
            }
            widths.push(vp.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for row in 0..r {
            for (&p, &wd) in parts.iter().zip(&widths) {
                let vp = &self.nodes[p.0].value;
                out.extend_from_slice(&vp.data()[row * wd..(row + 1) * wd]);
            }
        }
        let value = Tensor::new(vec![r, total], out)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        let tagged: Vec<(Var, usize)> = parts.iter().copied().zip(widths).collect();
        self.finish_op(value, ng, Op::ConcatCols { parts: tagged }, "concat_cols")
    }

    /// Same data, new shape (row-major flatten / unflatten).
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let value = vx.reshape(shape)?;
        let ng = self.needs(x);
        self.finish_op(value, ng, Op::Reshape { x }, "reshape")
    }

    /// Unfold an (h, w, ch) image into non-overlapping (ph, pw) patches:
    /// output is (grid_h * grid_w, ph * pw * ch), patches in row-major grid
    /// order, each patch flattened (dy, dx, ch) row-major.
    pub fn patch_extract(&mut self, x: Var, patch: (usize, usize)) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 3 {
            return Err(Error::Shape(format!("patch_extract wants (h, w, ch), got {:?}", vx.shape())));
        }
        let (h, w, ch) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (ph, pw) = patch;
        if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} not divisible into {ph}x{pw} patches"
            )));
        }
        let (gh, gw) = (h / ph, w / pw);
        let k = ph * pw * ch;
        let mut out = Vec::with_capacity(gh * gw * k);
        let data = vx.data();
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..ph {
                    let y = py * ph + dy;
                    let row0 = (y * w + px * pw) * ch;
                    out.extend_from_slice(&data[row0..row0 + pw * ch]);
                }
            }
        }
        let value = Tensor::new(vec![gh * gw, k], out)?;
        let ng = self.needs(x);
        self.finish_op(value, ng, Op::PatchExtract { x, patch, grid: (gh, gw), ch }, "patch_extract")
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients are then readable via
    /// [`Tape::grad`]. One backward per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.ran_backward {
            return Err(Error::Contract("tape already replayed backward".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward wants a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.ran_backward = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::ONE]);

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad || self.grads[id].is_none() {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            let g = self.grads[id].clone().expect("checked above");
            self.backward_op(id, &op, &g)?;
        }
        for (id, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                for &v in g {
                    if !v.is_finite() {
                        return Err(Error::NonFinite(format!("gradient of node {id}")));
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: &[T]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (o, &d) in g.iter_mut().zip(contribution) {
                    *o += d;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    fn backward_op(&mut self, id: usize, op: &Op<T>, g: &[T]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::AddBias { a, bias } => {
                self.accumulate(*a, g);
                if self.needs(*bias) {
                    let c = self.nodes[bias.0].value.len();
                    let mut gb = vec![T::ZERO; c];
                    for row in g.chunks(c) {
                        for (o, &d) in gb.iter_mut().zip(row) {
                            *o += d;
                        }
                    }
                    self.accumulate(*bias, &gb);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let vb = self.nodes[b.0].value.data();
                    let ga: Vec<T> = g.iter().zip(vb).map(|(&d, &y)| d * y).collect();
                    self.accumulate(*a, &ga);
                }
                if self.needs(*b) {
                    let va = self.nodes[a.0].value.data();
                    let gb: Vec<T> = g.iter().zip(va).map(|(&d, &x)| d * x).collect();
                    self.accumulate(*b, &gb);
                }
            }
            Op::Scale { a, factor } => {
                let f = T::from_f64(*factor);
                let ga: Vec<T> = g.iter().map(|&d| d * f).collect();
                self.accumulate(*a, &ga);
            }
            Op::Sum { a } => {
                let n = self.nodes[a.0].value.len();
                self.accumulate(*a, &vec![g[0]; n]);
            }
            Op::MeanRows { a } => {
                let sh = self.nodes[a.0].value.shape();
                let (r, c) = (sh[0], sh[1]);
                let inv = T::from_f64(1.0 / r as f64);
                let mut ga = vec![T::ZERO; r * c];
                for row in ga.chunks_mut(c) {
                    for (o, &d) in row.iter_mut().zip(g) {
                        *o = d * inv;
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::Matmul { a, b } => {
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                if self.needs(*a) {
                    // dA = dOut @ B^T
                    let mut ga = vec![T::ZERO; m * k];
                    matmul_nt(g, self.nodes[b.0].value.data(), &mut ga, m, n, k);
                    self.accumulate(*a, &ga);
                }
                if self.needs(*b) {
                    // dB = A^T @ dOut
                    let mut gb = vec![T::ZERO; k * n];
                    matmul_tn(self.nodes[a.0].value.data(), g, &mut gb, m, k, n);
                    self.accumulate(*b, &gb);
                }
            }
            Op::MatmulNT { a, b } => {
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[0];
                if self.needs(*a) {
                    // dA = dOut @ B
                    let mut ga = vec![T::ZERO; m * k];
                    matmul_nn(g, self.nodes[b.0].value.data(), &mut ga, m, n, k);
                    self.accumulate(*a, &ga);
                }
                if self.needs(*b) {
                    // dB = dOut^T @ A
                    let mut gb = vec![T::ZERO; n * k];
                    matmul_tn(g, self.nodes[a.0].value.data(), &mut gb, m, n, k);
                    self.accumulate(*b, &gb);
                }
            }
            Op::MatmulTN { a, b } => {
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                if self.needs(*a) {
                    // dA = B @ dOut^T
                    let mut ga = vec![T::ZERO; m * k];
                    matmul_nt(self.nodes[b.0].value.data(), g, &mut ga, m, n, k);
                    self.accumulate(*a, &ga);
                }
                if self.needs(*b) {
                    // dB = A @ dOut
                    let mut gb = vec![T::ZERO; m * n];
                    matmul_nn(self.nodes[a.0].value.data(), g, &mut gb, m, k, n);
                    self.accumulate(*b, &gb);
                }
            }
            Op::SoftmaxRows { a } => {
                let s = self.nodes[id].value.data();
                let c = self.nodes[id].value.last_dim();
                let mut ga = vec![T::ZERO; s.len()];
                for ((grow, srow), orow) in g.chunks(c).zip(s.chunks(c)).zip(ga.chunks_mut(c)) {
                    let mut dot = T::ZERO;
                    for (&d, &sv) in grow.iter().zip(srow) {
                        dot += d * sv;
                    }
                    for ((o, &d), &sv) in orow.iter_mut().zip(grow).zip(srow) {
                        *o = sv * (d - dot);
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let vx = self.nodes[x.0].value.data();
                let vg = self.nodes[gamma.0].value.data();
                let d = self.nodes[gamma.0].value.len();
                let rows = vx.len() / d;
                let mut gx = vec![T::ZERO; vx.len()];
                let mut gg = vec![T::ZERO; d];
                let mut gb = vec![T::ZERO; d];
                let invd = T::from_f64(1.0 / d as f64);
                for r in 0..rows {
                    let xrow = &vx[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let (mu, rs) = (mean[r], rstd[r]);
                    // xhat and the two row reductions.
                    let mut mean_dxhat = T::ZERO;
                    let mut mean_dxhat_xhat = T::ZERO;
                    for ((&xv, &dv), &gv) in xrow.iter().zip(grow).zip(vg) {
                        let xhat = (xv - mu) * rs;
                        let dxhat = dv * gv;
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat = mean_dxhat * invd;
                    mean_dxhat_xhat = mean_dxhat_xhat * invd;
                    for i in 0..d {
                        let xhat = (xrow[i] - mu) * rs;
                        let dxhat = grow[i] * vg[i];
                        gx[r * d + i] = rs * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        gg[i] += grow[i] * xhat;
                        gb[i] += grow[i];
                    }
                }
                self.accumulate(*x, &gx);
                self.accumulate(*gamma, &gg);
                self.accumulate(*beta, &gb);
            }
            Op::Gelu { a } => {
                let vx = self.nodes[a.0].value.data();
                let half = T::from_f64(0.5);
                let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_tau = T::from_f64(1.0 / (std::f64::consts::TAU).sqrt());
                let ga: Vec<T> = g
                    .iter()
                    .zip(vx)
                    .map(|(&d, &x)| {
                        let phi_cdf = half * (T::ONE + (x * inv_sqrt2).erf());
                        let pdf = inv_sqrt_tau * (-(x * x) * half).exp();
                        d * (phi_cdf + x * pdf)
                    })
                    .collect();
                self.accumulate(*a, &ga);
            }
            Op::CrossEntropy { logits, probs, label } => {
                let mut gl: Vec<T> = probs.iter().map(|&p| g[0] * p).collect();
                gl[*label] = gl[*label] - g[0];
                self.accumulate(*logits, &gl);
            }
            Op::BilinearResize { x, src, dst, ch } => {
                let mut gx = vec![T::ZERO; src.0 * src.1 * ch];
                resize::bilinear_scatter(g, src.0, src.1, *ch, dst.0, dst.1, &mut gx);
                self.accumulate(*x, &gx);
            }
            Op::TrilinearResize { x, src, dst, ch } => {
                let mut gx = vec![T::ZERO; src.0 * src.1 * src.2 * ch];
                resize::trilinear_scatter(g, src.0, src.1, src.2, *ch, dst.0, dst.1, dst.2, &mut gx);
                self.accumulate(*x, &gx);
            }
            Op::ColSlice { x, start, width } => {
                let sh = self.nodes[x.0].value.shape();
                let (r, c) = (sh[0], sh[1]);
                let mut gx = vec![T::ZERO; r * c];
                for row in 0..r {
                    for i in 0..*width {
                        gx[row * c + start + i] = g[row * width + i];
                    }
                }
                self.accumulate(*x, &gx);
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|&(_, w)| w).sum();
                let r = g.len() / total;
                let mut offset = 0;
                for &(p, wd) in parts {
                    if self.needs(p) {
                        let mut gp = vec![T::ZERO; r * wd];
                        for row in 0..r {
                            gp[row * wd..(row + 1) * wd]
                                .copy_from_slice(&g[row * total + offset..row * total + offset + wd]);
                        }
                        self.accumulate(p, &gp);
                    }
                    offset += wd;
                }
            }
            Op::Reshape { x } => {
                self.accumulate(*x, g);
            }
            Op::PatchExtract { x, patch, grid, ch } => {
                let (ph, pw) = *patch;
                let (gh, gw) = *grid;
                let w = gw * pw;
                let mut gx = vec![T::ZERO; gh * ph * w * ch];
                let k = ph * pw * ch;
                for py in 0..gh {
                    for px in 0..gw {
                        let prow = &g[(py * gw + px) * k..(py * gw + px + 1) * k];
                        for dy in 0..ph {
                            let y = py * ph + dy;
                            let dst0 = (y * w + px * pw) * ch;
                            let src0 = dy * pw * ch;
                            for i in 0..pw * ch {
                                gx[dst0 + i] += prow[src0 + i];
                            }
                        }
                    }
                }
                self.accumulate(*x, &gx);
            }
        }
        Ok(())
    }
}
