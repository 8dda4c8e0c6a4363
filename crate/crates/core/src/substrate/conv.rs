use rayon::prelude::*;

use crate::error::{Error, Result};

use super::graph::{Backward, Graph, Var};
use super::tensor::{Shape4, Tensor4};

/// Row-major `c = a·b + beta·c` with optional transposes of the stored
/// operands. `a` is m×k (stored k×m when `ta`), `b` is k×n (stored n×k
/// when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths checked above cover every strided access.
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

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0 && self.stride == 1
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let Geometry {
            cin,
            h,
            w,
            k,
            pad,
            stride,
            ho,
            wo,
        } = *self;
        for c in 0..cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            *o = if ix < 0 || ix >= w as isize {
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

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let Geometry {
            cin,
            h,
            w,
            k,
            pad,
            stride,
            ho,
            wo,
        } = *self;
        for c in 0..cin {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &col[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dRule {
    geo: Geometry,
    has_bias: bool,
}

impl Backward for Conv2dRule {
    fn backward(&self, inputs: &[&Tensor4], _output: &Tensor4, grad: &Tensor4, wants: &[bool]) -> Vec<Option<Tensor4>> {
        let (x, weight) = (inputs[0], inputs[1]);
        let geo = self.geo;
        let n = x.shape().n();
        let cout = weight.shape().n();
        let rows = geo.col_rows();
        let cols = geo.col_cols();
        let in_per = x.len() / n;
        let out_per = grad.len() / n;

        let dx = wants[0].then(|| {
            let mut dx = vec![0.0; x.len()];
            dx.par_chunks_mut(in_per)
                .zip(grad.data().par_chunks(out_per))
                .for_each(|(dxn, gn)| {
                    if geo.is_pointwise() {
                        gemm(rows, cout, cols, weight.data(), true, gn, false, 0.0, dxn);
                    } else {
                        let mut dcol = vec![0.0; rows * cols];
                        gemm(rows, cout, cols, weight.data(), true, gn, false, 0.0, &mut dcol);
                        geo.col2im(&dcol, dxn);
                    }
                });
            Tensor4::from_raw(x.shape(), dx)
        });

        let dw = wants[1].then(|| {
            let partials: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let xn = x.sample(i);
                    let gn = &grad.data()[i * out_per..(i + 1) * out_per];
                    let mut part = vec![0.0; cout * rows];
                    if geo.is_pointwise() {
                        gemm(cout, cols, rows, gn, false, xn, true, 0.0, &mut part);
                    } else {
                        let mut col = vec![0.0; rows * cols];
                        geo.im2col(xn, &mut col);
                        gemm(cout, cols, rows, gn, false, &col, true, 0.0, &mut part);
                    }
                    part
                })
                .collect();
            // fixed-order reduction keeps results independent of thread count
            let mut dw = vec![0.0; cout * rows];
            for part in &partials {
                for (a, b) in dw.iter_mut().zip(part) {
                    *a += b;
                }
            }
            Tensor4::from_raw(weight.shape(), dw)
        });

        let mut out = vec![dx, dw];
        if self.has_bias {
            let db = wants[2].then(|| {
                let mut db = vec![0.0; cout];
                for i in 0..n {
                    for (o, acc) in db.iter_mut().enumerate() {
                        let s = &grad.data()[i * out_per + o * cols..i * out_per + (o + 1) * cols];
                        *acc += s.iter().sum::<f64>();
                    }
                }
                Tensor4::from_raw(inputs[2].shape(), db)
            });
            out.push(db);
        }
        out
    }
}

/// 2-D cross-correlation. `weight` is (out, in, k, k) with odd `k`;
/// `bias`, when given, holds `out` values in any shape.
///
/// Output spatial size is `(H + 2·padding − k) / stride + 1`.
pub fn conv2d(g: &mut Graph, x: Var, weight: Var, bias: Option<Var>, padding: usize, stride: usize) -> Result<Var> {
    let xs = g.value(x).shape();
    let ws = g.value(weight).shape();
    let [n, cin, h, w] = xs.0;
    let [cout, wcin, kh, kw] = ws.0;
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input {xs} has {cin} channels but weight {ws} expects {wcin}"),
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be square and odd, weight is {ws}"),
        ));
    }
    if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape(
            "conv2d",
            format!("input {xs} too small for kernel {kh} with padding {padding}"),
        ));
    }
    if let Some(b) = bias {
        let bl = g.value(b).len();
        if bl != cout {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {bl} values for {cout} output channels (weight {ws})"),
            ));
        }
    }
    let geo = Geometry {
        cin,
        h,
        w,
        k: kh,
        pad: padding,
        stride,
        ho: (h + 2 * padding - kh) / stride + 1,
        wo: (w + 2 * padding - kw) / stride + 1,
    };
    let out_shape = Shape4::new(n, cout, geo.ho, geo.wo);
    let out_per = out_shape.numel() / n;
    let mut out = vec![0.0; out_shape.numel()];
    {
        let xv = g.value(x);
        let wv = g.value(weight).data();
        let bv = bias.map(|b| g.value(b).data());
        let rows = geo.col_rows();
        let cols = geo.col_cols();
        out.par_chunks_mut(out_per).enumerate().for_each(|(i, on)| {
            let xn = xv.sample(i);
            if let Some(bv) = bv {
                for (o, &b) in bv.iter().enumerate() {
                    on[o * cols..(o + 1) * cols].fill(b);
                }
            }
            let beta = if bv.is_some() { 1.0 } else { 0.0 };
            if geo.is_pointwise() {
                gemm(cout, rows, cols, wv, false, xn, false, beta, on);
            } else {
                let mut col = vec![0.0; rows * cols];
                geo.im2col(xn, &mut col);
                gemm(cout, rows, cols, wv, false, &col, false, beta, on);
            }
        });
    }
    let mut parents = vec![x, weight];
    parents.extend(bias);
    g.push(
        "conv2d",
        Tensor4::from_raw(out_shape, out),
        &parents,
        Conv2dRule {
            geo,
            has_bias: bias.is_some(),
        },
    )
}
