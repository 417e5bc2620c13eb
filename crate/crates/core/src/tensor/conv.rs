//! im2col-based 2-D convolution kernels (NCHW, square kernels).

use super::gemm::{gemm, Layout};
use crate::error::{Error, Result};
use crate::par;
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        if x.len() != 4 {
            return Err(Error::shape(OP, format!("input must be NCHW, got {x:?}")));
        }
        if w.len() != 4 || w[2] != w[3] {
            return Err(Error::shape(
                OP,
                format!("kernel must be [Cout, Cin, k, k], got {w:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape(OP, "stride must be positive"));
        }
        let [n, cin, h, wd] = [x[0], x[1], x[2], x[3]];
        let (cout, k) = (w[0], w[2]);
        if w[1] != cin {
            return Err(Error::shape(
                OP,
                format!("Cin: input has {cin} channels, kernel expects {}", w[1]),
            ));
        }
        let span = |dim: usize, name: &str| -> Result<usize> {
            let padded = dim + 2 * pad;
            if padded < k {
                return Err(Error::shape(
                    OP,
                    format!("{name}: kernel {k} larger than padded size {padded}"),
                ));
            }
            if !(padded - k).is_multiple_of(stride) {
                return Err(Error::shape(
                    OP,
                    format!("{name}: ({dim} + 2*{pad} - {k}) not divisible by stride {stride}"),
                ));
            }
            Ok((padded - k) / stride + 1)
        };
        let ho = span(h, "H")?;
        let wo = span(wd, "W")?;
        Ok(Self {
            n,
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }
}

fn im2col(g: &ConvGeom, x: &[Real], cols: &mut [Real]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[Real], dx: &mut [Real]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(g: &ConvGeom, x: &[Real], w: &[Real], bias: Option<&[Real]>) -> Vec<Real> {
    let (kd, p) = (g.kdim(), g.positions());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut out = vec![0.0 as Real; g.n * out_len];
    par::for_each_chunk(&mut out, out_len, |n, y| {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let owned;
        let cols: &[Real] = if g.pointwise() {
            xn
        } else {
            let mut buf = vec![0.0 as Real; kd * p];
            im2col(g, xn, &mut buf);
            owned = buf;
            &owned
        };
        gemm(
            g.cout,
            kd,
            p,
            1.0,
            w,
            Layout::row_major(kd),
            cols,
            Layout::row_major(p),
            0.0,
            y,
        );
        if let Some(b) = bias {
            for (co, row) in y.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    });
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<Real>>,
    pub dw: Option<Vec<Real>>,
    pub db: Option<Vec<Real>>,
}

pub(crate) fn backward(
    g: &ConvGeom,
    x: &[Real],
    w: &[Real],
    dout: &[Real],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_dx, need_dw, need_db) = need;
    let (kd, p) = (g.kdim(), g.positions());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;

    let per_sample = par::map_range(g.n, |n| {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let dy = &dout[n * out_len..(n + 1) * out_len];
        let dw = need_dw.then(|| {
            let owned;
            let cols: &[Real] = if g.pointwise() {
                xn
            } else {
                let mut buf = vec![0.0 as Real; kd * p];
                im2col(g, xn, &mut buf);
                owned = buf;
                &owned
            };
            let mut dw = vec![0.0 as Real; g.cout * kd];
            gemm(
                g.cout,
                p,
                kd,
                1.0,
                dy,
                Layout::row_major(p),
                cols,
                Layout::transposed(p),
                0.0,
                &mut dw,
            );
            dw
        });
        let dx = need_dx.then(|| {
            let mut dcols = vec![0.0 as Real; kd * p];
            gemm(
                kd,
                g.cout,
                p,
                1.0,
                w,
                Layout::transposed(kd),
                dy,
                Layout::row_major(p),
                0.0,
                &mut dcols,
            );
            if g.pointwise() {
                dcols
            } else {
                let mut dx = vec![0.0 as Real; in_len];
                col2im(g, &dcols, &mut dx);
                dx
            }
        });
        let db = need_db.then(|| {
            dy.chunks(p)
                .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() as Real)
                .collect::<Vec<Real>>()
        });
        (dx, dw, db)
    });

    let mut dx = need_dx.then(|| Vec::with_capacity(g.n * in_len));
    let mut dw = need_dw.then(|| vec![0.0 as Real; g.cout * kd]);
    let mut db = need_db.then(|| vec![0.0 as Real; g.cout]);
    for (sx, sw, sb) in per_sample {
        if let (Some(acc), Some(s)) = (dx.as_mut(), sx) {
            acc.extend_from_slice(&s);
        }
        if let (Some(acc), Some(s)) = (dw.as_mut(), sw) {
            acc.iter_mut().zip(&s).for_each(|(a, v)| *a += v);
        }
        if let (Some(acc), Some(s)) = (db.as_mut(), sb) {
            acc.iter_mut().zip(&s).for_each(|(a, v)| *a += v);
        }
    }
    if let (Some(dx), true) = (dx.as_mut(), super::fault::conv_backward_corrupted()) {
        dx.iter_mut().for_each(|v| *v *= 1.5);
    }
    ConvGrads { dx, dw, db }
}
