//! Shifted-window transformer blocks over channels-last `[N, H, W, C]` maps.
//!
//! Each block runs LayerNorm, (optionally cyclically shifted) window
//! multi-head self-attention with a learned relative-position bias, a residual
//! add, LayerNorm, a GELU MLP and a second residual add.

use crate::Real;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Activation, Binder, ParamStore, Tape, Tensor, Var};

/// Additive mask value that saturates softmax without overflowing `f32`.
pub const MASK_NEG: Real = -1e4;

const LN_EPS: Real = 1e-5;

/// Hyper-parameters of one block; its weights live in a [`ParamStore`] under
/// `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct SwinBlockParams {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
    pub mlp_ratio: usize,
}

/// Per-window additive attention mask, `[windows, tokens, tokens]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub windows: usize,
    pub tokens: usize,
    pub values: Vec<Real>,
}

/// Output tokens plus the attention probabilities `[B * heads, T, T]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Var,
}

impl SwinBlockParams {
    pub fn new(
        prefix: impl Into<String>,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Invalid(format!(
                "swin: dim {dim} not divisible by heads {heads}"
            )));
        }
        if window == 0 || (shift != 0 && shift * 2 != window) {
            return Err(Error::Invalid(format!(
                "swin: shift must be 0 or window/2 (window {window}, shift {shift})"
            )));
        }
        if mlp_ratio == 0 {
            return Err(Error::Invalid("swin: mlp_ratio must be positive".into()));
        }
        Ok(Self {
            prefix: prefix.into(),
            dim,
            heads,
            window,
            shift,
            mlp_ratio,
        })
    }

    pub fn name(&self, suffix: &str) -> String {
        format!("{}.{}", self.prefix, suffix)
    }

    fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    fn table_rows(&self) -> usize {
        (2 * self.window - 1).pow(2)
    }

    /// Names and shapes of every parameter of this block.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c, h) = (self.dim, self.hidden());
        vec![
            (self.name("norm1.weight"), vec![c]),
            (self.name("norm1.bias"), vec![c]),
            (self.name("attn.qkv.weight"), vec![3 * c, c]),
            (self.name("attn.qkv.bias"), vec![3 * c]),
            (self.name("attn.proj.weight"), vec![c, c]),
            (self.name("attn.proj.bias"), vec![c]),
            (
                self.name("attn.rel_bias_table"),
                vec![self.table_rows(), self.heads],
            ),
            (self.name("norm2.weight"), vec![c]),
            (self.name("norm2.bias"), vec![c]),
            (self.name("mlp.fc1.weight"), vec![h, c]),
            (self.name("mlp.fc1.bias"), vec![h]),
            (self.name("mlp.fc2.weight"), vec![c, h]),
            (self.name("mlp.fc2.bias"), vec![c]),
        ]
    }

    /// Linear weights and the bias table ~ N(0, 0.02), biases 0, norms (1, 0).
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let normal = Normal::new(0.0 as Real, 0.02).expect("valid std");
        for (name, shape) in self.param_shapes() {
            let t = if name.ends_with("norm1.weight") || name.ends_with("norm2.weight") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".weight") || name.ends_with("rel_bias_table") {
                Tensor::from_fn(&shape, |_| normal.sample(rng))
            } else {
                Tensor::zeros(&shape)
            };
            store.insert(name, t);
        }
    }
}

fn spatial(tape: &Tape, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match *tape.shape(x) {
        [n, h, w, c] => Ok([n, h, w, c]),
        ref s => Err(Error::shape(
            op,
            format!("expected [N, H, W, C], got {s:?}"),
        )),
    }
}

fn partition_index(n: usize, h: usize, w: usize, c: usize, m: usize) -> Vec<u32> {
    let (nh, nw) = (h / m, w / m);
    let mut idx = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for wy in 0..nh {
            for wx in 0..nw {
                for iy in 0..m {
                    for ix in 0..m {
                        let base = ((b * h + wy * m + iy) * w + wx * m + ix) * c;
                        idx.extend((0..c).map(|k| (base + k) as u32));
                    }
                }
            }
        }
    }
    idx
}

/// `[N, H, W, C]` -> `[N * (H/M) * (W/M), M * M, C]`, windows in row-major order.
pub fn window_partition(tape: &mut Tape, x: Var, m: usize) -> Result<Var> {
    let [n, h, w, c] = spatial(tape, x, "window_partition")?;
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::shape(
            "window_partition",
            format!("window {m} does not divide H={h}, W={w}"),
        ));
    }
    let idx = partition_index(n, h, w, c, m);
    tape.gather(x, idx.into(), &[n * (h / m) * (w / m), m * m, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse(tape: &mut Tape, windows: Var, m: usize, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(windows).to_vec();
    let ok = s.len() == 3
        && m > 0
        && h.is_multiple_of(m)
        && w.is_multiple_of(m)
        && s[1] == m * m
        && s[0].is_multiple_of((h / m) * (w / m));
    if !ok {
        return Err(Error::shape(
            "window_reverse",
            format!("windows {s:?} inconsistent with M={m}, H={h}, W={w}"),
        ));
    }
    let (n, c) = (s[0] / ((h / m) * (w / m)), s[2]);
    let fwd = partition_index(n, h, w, c, m);
    let mut inv = vec![0u32; fwd.len()];
    for (i, &src) in fwd.iter().enumerate() {
        inv[src as usize] = i as u32;
    }
    tape.gather(windows, inv.into(), &[n, h, w, c])
}

/// Toroidal roll: `out[y, x] = in[(y + offset) mod H, (x + offset) mod W]`.
/// `cyclic_shift(cyclic_shift(x, s), -s) == x`.
pub fn cyclic_shift(tape: &mut Tape, x: Var, offset: isize) -> Result<Var> {
    let [n, h, w, c] = spatial(tape, x, "cyclic_shift")?;
    if offset.unsigned_abs() >= h.min(w) {
        return Err(Error::shape(
            "cyclic_shift",
            format!("|offset| {offset} must be < min(H, W) = {}", h.min(w)),
        ));
    }
    if offset == 0 {
        return Ok(x);
    }
    let mut idx = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for y in 0..h {
            let sy = (y as isize + offset).rem_euclid(h as isize) as usize;
            for xx in 0..w {
                let sx = (xx as isize + offset).rem_euclid(w as isize) as usize;
                let base = ((b * h + sy) * w + sx) * c;
                idx.extend((0..c).map(|k| (base + k) as u32));
            }
        }
    }
    tape.gather(x, idx.into(), &[n, h, w, c])
}

/// Region label of every cell of the shifted grid, row-major `[H, W]`: cells
/// share a label iff they came from the same side of the wrap-around seams.
pub fn shifted_region_ids(h: usize, w: usize, m: usize, shift: usize) -> Vec<usize> {
    let band = |v: usize, len: usize| -> usize {
        if shift == 0 || v < len - m {
            0
        } else if v < len - shift {
            1
        } else {
            2
        }
    };
    let mut ids = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            ids.push(band(y, h) * 3 + band(x, w));
        }
    }
    ids
}

/// Mask for shifted windows: `MASK_NEG` between tokens of different regions.
pub fn build_attention_mask(h: usize, w: usize, m: usize, shift: usize) -> Result<AttentionMask> {
    if m == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
        return Err(Error::shape(
            "build_attention_mask",
            format!("window {m} does not divide H={h}, W={w}"),
        ));
    }
    if shift != 0 && shift * 2 != m {
        return Err(Error::Invalid(format!(
            "shift must be 0 or window/2, got {shift} for window {m}"
        )));
    }
    let ids = shifted_region_ids(h, w, m, shift);
    let (nh, nw, t) = (h / m, w / m, m * m);
    let mut values = Vec::with_capacity(nh * nw * t * t);
    for wy in 0..nh {
        for wx in 0..nw {
            let cell: Vec<usize> = (0..t)
                .map(|i| ids[(wy * m + i / m) * w + wx * m + i % m])
                .collect();
            for i in 0..t {
                for j in 0..t {
                    values.push(if cell[i] == cell[j] { 0.0 } else { MASK_NEG });
                }
            }
        }
    }
    Ok(AttentionMask {
        windows: nh * nw,
        tokens: t,
        values,
    })
}

/// Table row for each (query, key) token pair of an `m x m` window.
pub fn relative_position_index(m: usize) -> Vec<u32> {
    let t = m * m;
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / m, i % m);
        for j in 0..t {
            let (yj, xj) = (j / m, j % m);
            let dy = yi + m - 1 - yj;
            let dx = xi + m - 1 - xj;
            idx.push((dy * span + dx) as u32);
        }
    }
    idx
}

/// Multi-head self-attention inside each window of `tokens: [B, M*M, C]`.
pub fn window_attention(
    tape: &mut Tape,
    p: &mut Binder,
    tokens: Var,
    params: &SwinBlockParams,
    mask: Option<&AttentionMask>,
) -> Result<AttentionOutput> {
    let s = tape.shape(tokens).to_vec();
    let t = params.window * params.window;
    if s.len() != 3 || s[2] != params.dim || s[1] != t {
        return Err(Error::shape(
            "window_attention",
            format!(
                "tokens {s:?}, expected [B, {t}, {}] for window {} and dim {}",
                params.dim, params.window, params.dim
            ),
        ));
    }
    let (b, c, heads) = (s[0], params.dim, params.heads);
    let hd = c / heads;

    let w = p.var(tape, &params.name("attn.qkv.weight"))?;
    let bias = p.var(tape, &params.name("attn.qkv.bias"))?;
    let qkv = tape.linear(tokens, w, Some(bias))?;

    // [B, T, 3, heads, hd] -> three [B * heads, T, hd]
    let split = |which: usize| -> Arc<[u32]> {
        let mut idx = Vec::with_capacity(b * heads * t * hd);
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let base = (bi * t + ti) * 3 * c + which * c + h * hd;
                    idx.extend((0..hd).map(|d| (base + d) as u32));
                }
            }
        }
        idx.into()
    };
    let q = tape.gather(qkv, split(0), &[b * heads, t, hd])?;
    let k = tape.gather(qkv, split(1), &[b * heads, t, hd])?;
    let v = tape.gather(qkv, split(2), &[b * heads, t, hd])?;

    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (hd as Real).sqrt())?;

    let table = p.var(tape, &params.name("attn.rel_bias_table"))?;
    let rel = relative_position_index(params.window);
    let mut bidx = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        bidx.extend(rel.iter().map(|&r| r * heads as u32 + h as u32));
    }
    let rel_bias = tape.gather(table, bidx.into(), &[heads, t, t])?;
    let mut scores = tape.add_broadcast(scores, rel_bias)?;

    if let Some(mask) = mask {
        if mask.tokens != t || b % mask.windows != 0 {
            return Err(Error::shape(
                "window_attention",
                format!(
                    "mask for {} windows of {} tokens vs batch {b} of {t} tokens",
                    mask.windows, mask.tokens
                ),
            ));
        }
        let tt = t * t;
        let mut full = Vec::with_capacity(b * heads * tt);
        for bi in 0..b {
            let wm = &mask.values[(bi % mask.windows) * tt..(bi % mask.windows + 1) * tt];
            for _ in 0..heads {
                full.extend_from_slice(wm);
            }
        }
        let m = tape.constant(Tensor::new(&[b * heads, t, t], full)?);
        scores = tape.add(scores, m)?;
    }

    let weights = tape.softmax(scores)?;
    let ctx = tape.bmm(weights, v, false)?;

    // [B * heads, T, hd] -> [B, T, heads * hd]
    let mut midx = Vec::with_capacity(b * t * c);
    for bi in 0..b {
        for ti in 0..t {
            for h in 0..heads {
                let base = ((bi * heads + h) * t + ti) * hd;
                midx.extend((0..hd).map(|d| (base + d) as u32));
            }
        }
    }
    let merged = tape.gather(ctx, midx.into(), &[b, t, c])?;
    let pw = p.var(tape, &params.name("attn.proj.weight"))?;
    let pb = p.var(tape, &params.name("attn.proj.bias"))?;
    let out = tape.linear(merged, pw, Some(pb))?;
    Ok(AttentionOutput { out, weights })
}

/// One Swin block over `x: [N, H, W, C]`; the output has the input's shape.
pub fn swin_block(
    tape: &mut Tape,
    p: &mut Binder,
    x: Var,
    params: &SwinBlockParams,
) -> Result<Var> {
    let [_, h, w, c] = spatial(tape, x, "swin_block")?;
    if c != params.dim {
        return Err(Error::shape(
            "swin_block",
            format!("channels {c} vs block dim {}", params.dim),
        ));
    }
    let m = params.window;
    let mask = if params.shift > 0 {
        Some(build_attention_mask(h, w, m, params.shift)?)
    } else {
        None
    };

    let g1 = p.var(tape, &params.name("norm1.weight"))?;
    let b1 = p.var(tape, &params.name("norm1.bias"))?;
    let mut y = tape.layer_norm(x, g1, b1, LN_EPS)?;
    if params.shift > 0 {
        y = cyclic_shift(tape, y, params.shift as isize)?;
    }
    let windows = window_partition(tape, y, m)?;
    let attn = window_attention(tape, p, windows, params, mask.as_ref())?;
    let mut y = window_reverse(tape, attn.out, m, h, w)?;
    if params.shift > 0 {
        y = cyclic_shift(tape, y, -(params.shift as isize))?;
    }
    let x = tape.add(x, y)?;

    let g2 = p.var(tape, &params.name("norm2.weight"))?;
    let b2 = p.var(tape, &params.name("norm2.bias"))?;
    let y = tape.layer_norm(x, g2, b2, LN_EPS)?;
    let w1 = p.var(tape, &params.name("mlp.fc1.weight"))?;
    let bb1 = p.var(tape, &params.name("mlp.fc1.bias"))?;
    let y = tape.linear(y, w1, Some(bb1))?;
    let y = tape.activation(y, Activation::Gelu)?;
    let w2 = p.var(tape, &params.name("mlp.fc2.weight"))?;
    let bb2 = p.var(tape, &params.name("mlp.fc2.bias"))?;
    let y = tape.linear(y, w2, Some(bb2))?;
    tape.add(x, y)
}

#[cfg(all(test, not(feature = "f64")))]
mod tests {
    use super::*;

    #[test]
    fn relative_index_covers_table() {
        let m = 3;
        let idx = relative_position_index(m);
        let mut seen = vec![false; (2 * m - 1).pow(2)];
        idx.iter().for_each(|&i| seen[i as usize] = true);
        assert!(seen.iter().all(|&s| s));
        // diagonal maps to the zero offset, the table centre
        assert_eq!(idx[0], ((m - 1) * (2 * m - 1) + m - 1) as u32);
    }

    #[test]
    fn params_validate() {
        assert!(SwinBlockParams::new("s", 10, 3, 4, 0, 4).is_err());
        assert!(SwinBlockParams::new("s", 8, 2, 4, 1, 4).is_err());
        assert!(SwinBlockParams::new("s", 8, 2, 4, 2, 4).is_ok());
    }

    #[test]
    fn unshifted_mask_is_zero() {
        let m = build_attention_mask(8, 8, 4, 0).unwrap();
        assert_eq!(m.windows, 4);
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn partition_counts() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 8, 8, 3]));
        let w = window_partition(&mut t, x, 4).unwrap();
        assert_eq!(t.shape(w), &[4, 16, 3]);
        let w = window_partition(&mut t, x, 8).unwrap();
        assert_eq!(t.shape(w), &[1, 64, 3]);
        assert!(window_partition(&mut t, x, 3).is_err());
        let bad = t.constant(Tensor::zeros(&[3, 16, 3]));
        assert!(window_reverse(&mut t, bad, 4, 8, 8).is_err());
    }
}
