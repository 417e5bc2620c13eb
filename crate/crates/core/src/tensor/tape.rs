use crate::Real;
use std::sync::Arc;

use super::conv::{self, ConvGeom};
use super::gemm::{gemm, Layout};
use super::{numel, Tensor};
use crate::colorspace;
use crate::error::{Error, Result};
use crate::par;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    /// tanh approximation of GELU.
    Gelu,
    LeakyRelu(Real),
    Tanh,
}

const GELU_C: Real = 0.797_884_6; // sqrt(2 / pi)
const GELU_K: Real = 0.044_715;

impl Activation {
    pub fn apply(self, x: Real) -> Real {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: Real, y: Real) -> Real {
        match self {
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<Real>,
        rstd: Vec<Real>,
    },
    Softmax {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        ia: usize,
        ib: usize,
    },
    Gather {
        x: Var,
        index: Arc<[u32]>,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBroadcast {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: Real,
    },
    Abs {
        x: Var,
    },
    Square {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    MeanLast {
        x: Var,
        d: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    LabToRgb {
        x: Var,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv2d { x, w, b, .. } | Linear { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(*b);
                v
            }
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Concat { a, b, .. }
            | Add { a, b }
            | Sub { a, b }
            | Mul { a, b }
            | AddBroadcast { a, b }
            | Bmm { a, b, .. } => vec![*a, *b],
            Upsample2x { x }
            | Act { x, .. }
            | Softmax { x }
            | Gather { x, .. }
            | Reshape { x }
            | Scale { x, .. }
            | Abs { x }
            | Square { x }
            | Sum { x }
            | Mean { x }
            | MeanLast { x, .. }
            | LabToRgb { x } => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation record.
///
/// Gradients from successive [`Tape::backward`] calls accumulate until
/// [`Tape::zero_grad`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Real>>>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn add_into(acc: &mut Option<Vec<Real>>, g: Vec<Real>) {
    match acc {
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g),
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that collects gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never collects gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last backward calls, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v), g.to_vec()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Constant copy of `v`'s value: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[Real] {
        self.nodes[v.0].value.data()
    }

    // ---- forward ops -------------------------------------------------

    /// Cross-correlation of `x: [N, Cin, H, W]` with `w: [Cout, Cin, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", self.shape(b), geom.cout),
                ));
            }
        }
        let out = conv::forward(&geom, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let value = Tensor::new(&geom.out_shape(), out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }))
    }

    /// Nearest-neighbour x2 upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(
                "upsample2x",
                format!("expected NCHW, got {s:?}"),
            ));
        }
        let (h, w) = (s[2], s[3]);
        let src = self.data(x);
        let mut out = vec![0.0 as Real; src.len() * 4];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2x { x }))
    }

    /// Affine map over the trailing dimension: `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs
            .last()
            .ok_or_else(|| Error::shape("linear", "scalar input"))?;
        if ws.len() != 2 || ws[1] != din {
            return Err(Error::shape(
                "linear",
                format!("input trailing dim {din} vs weight {ws:?}"),
            ));
        }
        let dout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?}, expected [{dout}]", self.shape(b)),
                ));
            }
        }
        let rows = numel(&xs) / din.max(1);
        let mut out = vec![0.0 as Real; rows * dout];
        gemm(
            rows,
            din,
            dout,
            1.0,
            self.data(x),
            Layout::row_major(din),
            self.data(w),
            Layout::transposed(din),
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bias).for_each(|(v, bb)| *v += bb);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            },
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(
            src.shape(),
            src.data().iter().map(|&v| kind.apply(v)).collect(),
        )?;
        Ok(self.push(value, Op::Act { x, kind }))
    }

    /// Standardizes over the trailing dimension, then scales and shifts.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Real) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "trailing dim {d}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (g, bt) = (self.data(gamma), self.data(beta));
        let rows = numel(&xs) / d;
        let mut out = vec![0.0 as Real; rows * d];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for (row, dst) in self.data(x).chunks(d).zip(out.chunks_mut(d)) {
            let mu = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps as f64).sqrt();
            for i in 0..d {
                dst[i] = ((row[i] as f64 - mu) * r) as Real * g[i] + bt[i];
            }
            mean.push(mu as Real);
            rstd.push(r as Real);
        }
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        ))
    }

    /// Softmax over the trailing dimension (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = vec![0.0 as Real; numel(&xs)];
        for (row, dst) in self.data(x).chunks(d).zip(out.chunks_mut(d)) {
            let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let mut z = 0.0f64;
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o as f64;
            }
            let inv = (1.0 / z) as Real;
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(value, Op::Softmax { x }))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape(
                "concat",
                format!("{sa:?} and {sb:?} along axis {axis}"),
            ));
        }
        let outer = numel(&sa[..axis]);
        let ia = numel(&sa[axis..]);
        let ib = numel(&sb[axis..]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(outer * (ia + ib));
        for o in 0..outer {
            out.extend_from_slice(&da[o * ia..(o + 1) * ia]);
            out.extend_from_slice(&db[o * ib..(o + 1) * ib]);
        }
        let mut shape = sa;
        shape[axis] += sb[axis];
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                a,
                b,
                outer,
                ia,
                ib,
            },
        ))
    }

    /// Channel concatenation of two NCHW tensors with matching N, H, W.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 4 || sb.len() != 4 {
            return Err(Error::shape(
                "concat_channels",
                format!("expected NCHW inputs, got {sa:?} and {sb:?}"),
            ));
        }
        for (i, name) in [(0, "N"), (2, "H"), (3, "W")] {
            if sa[i] != sb[i] {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{name} differs: {} vs {}", sa[i], sb[i]),
                ));
            }
        }
        self.concat(a, b, 1)
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Backward scatter-adds.
    pub fn gather(&mut self, x: Var, index: Arc<[u32]>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != index.len() {
            return Err(Error::shape(
                "gather",
                format!("shape {shape:?} vs {} indices", index.len()),
            ));
        }
        let src = self.data(x);
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= src.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {} elements", src.len()),
            ));
        }
        let out = index.iter().map(|&i| src[i as usize]).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Gather { x, index }))
    }

    /// Axis permutation (`perm[i]` = source axis of output axis `i`).
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len()
            || perm
                .iter()
                .any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(
                "permute",
                format!("perm {perm:?} for shape {s:?}"),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let mut src_strides = vec![1usize; s.len()];
        for i in (0..s.len().saturating_sub(1)).rev() {
            src_strides[i] = src_strides[i + 1] * s[i + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let total = numel(&out_shape);
        let mut index = Vec::with_capacity(total);
        let mut counter = vec![0usize; out_shape.len()];
        for _ in 0..total {
            index.push(
                counter
                    .iter()
                    .zip(&strides)
                    .map(|(c, st)| c * st)
                    .sum::<usize>() as u32,
            );
            for ax in (0..counter.len()).rev() {
                counter[ax] += 1;
                if counter[ax] < out_shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        self.gather(x, index.into(), &out_shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(Real, Real) -> Real,
    ) -> Result<Tensor> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a, b }))
    }

    /// `out[i] = a[i] + b[i % len(b)]`: `b` tiles over `a`'s leading elements.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if nb == 0 || na % nb != 0 {
            return Err(Error::shape(
                "add_broadcast",
                format!("{:?} does not tile {:?}", self.shape(b), self.shape(a)),
            ));
        }
        let bd = self.data(b);
        let out = self
            .data(a)
            .chunks(nb)
            .flat_map(|c| c.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        Ok(self.push(value, Op::AddBroadcast { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(src.shape(), src.data().iter().map(|v| v * c).collect())?;
        Ok(self.push(value, Op::Scale { x, c }))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(src.shape(), src.data().iter().map(|v| v.abs()).collect())?;
        Ok(self.push(value, Op::Abs { x }))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(src.shape(), src.data().iter().map(|v| v * v).collect())?;
        Ok(self.push(value, Op::Square { x }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().map(|&v| v as f64).sum::<f64>();
        Ok(self.push(Tensor::scalar(s as Real), Op::Sum { x }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        if d.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        Ok(self.push(Tensor::scalar(s as Real), Op::Mean { x }))
    }

    /// Mean over the trailing dimension.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = match xs.last() {
            Some(&d) if d > 0 => d,
            _ => return Err(Error::shape("mean_last", format!("shape {xs:?}"))),
        };
        let out = self
            .data(x)
            .chunks(d)
            .map(|r| (r.iter().map(|&v| v as f64).sum::<f64>() / d as f64) as Real)
            .collect();
        let value = Tensor::new(&xs[..xs.len() - 1], out)?;
        Ok(self.push(value, Op::MeanLast { x, d }))
    }

    /// Batched matmul: `a: [B, m, k]` times `b: [B, k, n]` (or `b: [B, n, k]`
    /// transposed when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return Err(Error::shape(
                "bmm",
                format!("inner dims {k} vs {kb} ({sa:?} x {sb:?}, trans_b={trans_b})"),
            ));
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0 as Real; batch * m * n];
        let lb = if trans_b {
            Layout::transposed(k)
        } else {
            Layout::row_major(n)
        };
        par::for_each_chunk(&mut out, m * n, |i, c| {
            gemm(
                m,
                k,
                n,
                1.0,
                &da[i * m * k..(i + 1) * m * k],
                Layout::row_major(k),
                &db[i * k * n..(i + 1) * k * n],
                lb,
                0.0,
                c,
            )
        });
        let value = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(
            value,
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }

    /// Normalized Lab planes `[N, 3, H, W]` (L/50-1, a/128, b/128) to encoded
    /// sRGB in [0, 1], clamped at the gamut boundary.
    pub fn lab_to_rgb(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape(
                "lab_to_rgb",
                format!("expected [N,3,H,W], got {s:?}"),
            ));
        }
        let hw = s[2] * s[3];
        let src = self.data(x);
        let mut out = vec![0.0 as Real; src.len()];
        for (si, so) in src.chunks(3 * hw).zip(out.chunks_mut(3 * hw)) {
            for p in 0..hw {
                let lab = denorm_lab(si[p], si[hw + p], si[2 * hw + p]);
                let rgb = colorspace::lab_to_srgb_unit(lab);
                for c in 0..3 {
                    so[c * hw + p] = rgb[c] as Real;
                }
            }
        }
        let value = Tensor::new(&s, out)?;
        Ok(self.push(value, Op::LabToRgb { x }))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`, accumulating into every node that
    /// requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.value(loss).numel();
        if n != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<Real>>> = Vec::with_capacity(loss.0 + 1);
        pending.resize_with(loss.0 + 1, || None);
        pending[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (v, dv) in self.input_grads(i, &g) {
                add_into(&mut pending[v.0], dv);
            }
            add_into(&mut self.grads[i], g);
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &[Real]) -> Vec<(Var, Vec<Real>)> {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let grads = conv::backward(
                    geom,
                    self.data(*x),
                    self.data(*w),
                    g,
                    (rg(*x), rg(*w), b.is_some_and(rg)),
                );
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = grads.dw {
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, grads.db) {
                    out.push((*b, db));
                }
            }
            Op::Upsample2x { x } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let mut dx = vec![0.0 as Real; numel(s)];
                for (dst, src) in dx.chunks_mut(h * w).zip(g.chunks(4 * h * w)) {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                let (rows, din, dout) = (*rows, *din, *dout);
                if rg(*x) {
                    let mut dx = vec![0.0 as Real; rows * din];
                    gemm(
                        rows,
                        dout,
                        din,
                        1.0,
                        g,
                        Layout::row_major(dout),
                        self.data(*w),
                        Layout::row_major(din),
                        0.0,
                        &mut dx,
                    );
                    out.push((*x, dx));
                }
                if rg(*w) {
                    let mut dw = vec![0.0 as Real; dout * din];
                    gemm(
                        dout,
                        rows,
                        din,
                        1.0,
                        g,
                        Layout::transposed(dout),
                        self.data(*x),
                        Layout::row_major(din),
                        0.0,
                        &mut dw,
                    );
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    let mut db = vec![0.0f64; dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
                    }
                    out.push((b, db.into_iter().map(|v| v as Real).collect()));
                }
            }
            Op::Act { x, kind } => {
                let xs = self.data(*x);
                let ys = node.value.data();
                let dx = g
                    .iter()
                    .zip(xs.iter().zip(ys))
                    .map(|(&gi, (&xi, &yi))| gi * kind.derivative(xi, yi))
                    .collect();
                out.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xs = self.data(*x);
                let gm = self.data(*gamma);
                let d = gm.len();
                let mut dx = rg(*x).then(|| vec![0.0 as Real; xs.len()]);
                let mut dgamma = vec![0.0f64; d];
                let mut dbeta = vec![0.0f64; d];
                for (r, (row, grow)) in xs.chunks(d).zip(g.chunks(d)).enumerate() {
                    let (mu, rs) = (mean[r] as f64, rstd[r] as f64);
                    let xhat: Vec<f64> = row.iter().map(|&v| (v as f64 - mu) * rs).collect();
                    let mut m1 = 0.0f64;
                    let mut m2 = 0.0f64;
                    for i in 0..d {
                        let dxh = grow[i] as f64 * gm[i] as f64;
                        m1 += dxh;
                        m2 += dxh * xhat[i];
                        dgamma[i] += grow[i] as f64 * xhat[i];
                        dbeta[i] += grow[i] as f64;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let (m1, m2) = (m1 / d as f64, m2 / d as f64);
                        for i in 0..d {
                            let dxh = grow[i] as f64 * gm[i] as f64;
                            dx[r * d + i] = (rs * (dxh - m1 - xhat[i] * m2)) as Real;
                        }
                    }
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if rg(*gamma) {
                    out.push((*gamma, dgamma.into_iter().map(|v| v as Real).collect()));
                }
                if rg(*beta) {
                    out.push((*beta, dbeta.into_iter().map(|v| v as Real).collect()));
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0 as Real; y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot = yr
                        .iter()
                        .zip(gr)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum::<f64>() as Real;
                    for i in 0..d {
                        dr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                out.push((*x, dx));
            }
            Op::Concat {
                a,
                b,
                outer,
                ia,
                ib,
            } => {
                let (outer, ia, ib) = (*outer, *ia, *ib);
                if rg(*a) {
                    let mut da = Vec::with_capacity(outer * ia);
                    for o in 0..outer {
                        let base = o * (ia + ib);
                        da.extend_from_slice(&g[base..base + ia]);
                    }
                    out.push((*a, da));
                }
                if rg(*b) {
                    let mut db = Vec::with_capacity(outer * ib);
                    for o in 0..outer {
                        let base = o * (ia + ib) + ia;
                        db.extend_from_slice(&g[base..base + ib]);
                    }
                    out.push((*b, db));
                }
            }
            Op::Gather { x, index } => {
                let mut dx = vec![0.0 as Real; self.value(*x).numel()];
                for (&i, &gi) in index.iter().zip(g) {
                    dx[i as usize] += gi;
                }
                out.push((*x, dx));
            }
            Op::Reshape { x } => out.push((*x, g.to_vec())),
            Op::Add { a, b } => {
                if rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if rg(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub { a, b } => {
                if rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if rg(*b) {
                    out.push((*b, g.iter().map(|v| -v).collect()));
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    out.push((
                        *a,
                        g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect(),
                    ));
                }
                if rg(*b) {
                    out.push((
                        *b,
                        g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect(),
                    ));
                }
            }
            Op::AddBroadcast { a, b } => {
                if rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if rg(*b) {
                    let nb = self.value(*b).numel();
                    let mut db = vec![0.0f64; nb];
                    for chunk in g.chunks(nb) {
                        db.iter_mut()
                            .zip(chunk)
                            .for_each(|(acc, &v)| *acc += v as f64);
                    }
                    out.push((*b, db.into_iter().map(|v| v as Real).collect()));
                }
            }
            Op::Scale { x, c } => out.push((*x, g.iter().map(|v| v * c).collect())),
            Op::Abs { x } => {
                let dx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&gi, &xi)| {
                        if xi > 0.0 {
                            gi
                        } else if xi < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    })
                    .collect();
                out.push((*x, dx));
            }
            Op::Square { x } => {
                let dx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&gi, &xi)| 2.0 * xi * gi)
                    .collect();
                out.push((*x, dx));
            }
            Op::Sum { x } => out.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                out.push((*x, vec![g[0] / n as Real; n]));
            }
            Op::MeanLast { x, d } => {
                let inv = 1.0 / *d as Real;
                let dx = g
                    .iter()
                    .flat_map(|&gi| std::iter::repeat_n(gi * inv, *d))
                    .collect();
                out.push((*x, dx));
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (batch, m, k, n, trans_b) = (*batch, *m, *k, *n, *trans_b);
                let (da_src, db_src) = (self.data(*a), self.data(*b));
                if rg(*a) {
                    // da = g b^T
                    let mut da = vec![0.0 as Real; batch * m * k];
                    let lb = if trans_b {
                        Layout::row_major(k)
                    } else {
                        Layout::transposed(n)
                    };
                    par::for_each_chunk(&mut da, m * k, |i, c| {
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            &g[i * m * n..(i + 1) * m * n],
                            Layout::row_major(n),
                            &db_src[i * k * n..(i + 1) * k * n],
                            lb,
                            0.0,
                            c,
                        )
                    });
                    out.push((*a, da));
                }
                if rg(*b) {
                    let mut db = vec![0.0 as Real; batch * k * n];
                    par::for_each_chunk(&mut db, k * n, |i, c| {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &da_src[i * m * k..(i + 1) * m * k];
                        if trans_b {
                            // db[n, k] = g^T a
                            gemm(
                                n,
                                m,
                                k,
                                1.0,
                                gi,
                                Layout::transposed(n),
                                ai,
                                Layout::row_major(k),
                                0.0,
                                c,
                            )
                        } else {
                            // db[k, n] = a^T g
                            gemm(
                                k,
                                m,
                                n,
                                1.0,
                                ai,
                                Layout::transposed(k),
                                gi,
                                Layout::row_major(n),
                                0.0,
                                c,
                            )
                        }
                    });
                    out.push((*b, db));
                }
            }
            Op::LabToRgb { x } => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let src = self.data(*x);
                let mut dx = vec![0.0 as Real; src.len()];
                for ((si, gi), di) in src
                    .chunks(3 * hw)
                    .zip(g.chunks(3 * hw))
                    .zip(dx.chunks_mut(3 * hw))
                {
                    for p in 0..hw {
                        let lab = denorm_lab(si[p], si[hw + p], si[2 * hw + p]);
                        let (_, jac) = colorspace::lab_to_srgb_unit_jacobian(lab);
                        for (kk, scale) in [50.0f64, 128.0, 128.0].into_iter().enumerate() {
                            let mut acc = 0.0f64;
                            for (c, row) in jac.iter().enumerate() {
                                acc += gi[c * hw + p] as f64 * row[kk];
                            }
                            di[kk * hw + p] = (acc * scale) as Real;
                        }
                    }
                }
                out.push((*x, dx));
            }
        }
        out
    }
}

fn denorm_lab(l: Real, a: Real, b: Real) -> [f64; 3] {
    [(l as f64 + 1.0) * 50.0, a as f64 * 128.0, b as f64 * 128.0]
}
