//! Volumetric ops: 3x3x3 convolution, 2x transposed convolution, instance
//! normalisation, and trilinear upsampling.
//!
//! All tensors here are channels-first `[c, d0, d1, d2]`. Parallel loops
//! write disjoint chunks and keep per-chunk accumulation sequential, so
//! results are bit-identical with and without the `parallel` feature.

use alloc::vec;
use alloc::vec::Vec;

use super::{Tape, Var};
use crate::parallel::for_each_chunk_mut;
use crate::tensor::{Scalar, Tensor};

/// Half-open output range along one axis for kernel offset `k` (pad 1).
#[inline]
fn out_range(k: usize, d: usize, e: usize, s: usize) -> (usize, usize) {
    let lo = usize::from(k == 0);
    let hi = (d as isize - k as isize).div_euclid(s as isize).min(e as isize - 1);
    if hi < lo as isize {
        (lo, lo)
    } else {
        (lo, hi as usize + 1)
    }
}

fn vol_shape<T: Scalar>(t: &Tensor<T>) -> (usize, [usize; 3]) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected [c, d0, d1, d2], got {s:?}");
    (s[0], [s[1], s[2], s[3]])
}

fn conv_out_dims(d: [usize; 3], stride: usize) -> [usize; 3] {
    [
        (d[0] + 2 - 3) / stride + 1,
        (d[1] + 2 - 3) / stride + 1,
        (d[2] + 2 - 3) / stride + 1,
    ]
}

#[allow(clippy::too_many_arguments)]
fn conv3d_fwd<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: &[T],
    ci_n: usize,
    co_n: usize,
    d: [usize; 3],
    e: [usize; 3],
    s: usize,
) -> Vec<T> {
    let dn = d[0] * d[1] * d[2];
    let en = e[0] * e[1] * e[2];
    let mut out = vec![T::zero(); co_n * en];
    for_each_chunk_mut(&mut out, en, |co, oc| {
        for v in oc.iter_mut() {
            *v = bias[co];
        }
        for ci in 0..ci_n {
            let xc = &x[ci * dn..(ci + 1) * dn];
            let wk = &w[(co * ci_n + ci) * 27..(co * ci_n + ci + 1) * 27];
            for kz in 0..3 {
                let (zlo, zhi) = out_range(kz, d[0], e[0], s);
                for ky in 0..3 {
                    let (ylo, yhi) = out_range(ky, d[1], e[1], s);
                    for kx in 0..3 {
                        let (xlo, xhi) = out_range(kx, d[2], e[2], s);
                        let wv = wk[(kz * 3 + ky) * 3 + kx];
                        for oz in zlo..zhi {
                            let iz = oz * s + kz - 1;
                            for oy in ylo..yhi {
                                let iy = oy * s + ky - 1;
                                let orow = (oz * e[1] + oy) * e[2];
                                let irow = (iz * d[1] + iy) * d[2];
                                for ox in xlo..xhi {
                                    oc[orow + ox] = oc[orow + ox] + wv * xc[irow + ox * s + kx - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3d_bwd_x<T: Scalar>(
    g: &[T],
    w: &[T],
    ci_n: usize,
    co_n: usize,
    d: [usize; 3],
    e: [usize; 3],
    s: usize,
) -> Vec<T> {
    let dn = d[0] * d[1] * d[2];
    let en = e[0] * e[1] * e[2];
    let mut dx = vec![T::zero(); ci_n * dn];
    for_each_chunk_mut(&mut dx, dn, |ci, xc| {
        for co in 0..co_n {
            let gc = &g[co * en..(co + 1) * en];
            let wk = &w[(co * ci_n + ci) * 27..(co * ci_n + ci + 1) * 27];
            for kz in 0..3 {
                let (zlo, zhi) = out_range(kz, d[0], e[0], s);
                for ky in 0..3 {
                    let (ylo, yhi) = out_range(ky, d[1], e[1], s);
                    for kx in 0..3 {
                        let (xlo, xhi) = out_range(kx, d[2], e[2], s);
                        let wv = wk[(kz * 3 + ky) * 3 + kx];
                        for oz in zlo..zhi {
                            let iz = oz * s + kz - 1;
                            for oy in ylo..yhi {
                                let iy = oy * s + ky - 1;
                                let grow = (oz * e[1] + oy) * e[2];
                                let irow = (iz * d[1] + iy) * d[2];
                                for ox in xlo..xhi {
                                    xc[irow + ox * s + kx - 1] = xc[irow + ox * s + kx - 1] + wv * gc[grow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

#[allow(clippy::too_many_arguments)]
fn conv3d_bwd_w<T: Scalar>(
    g: &[T],
    x: &[T],
    ci_n: usize,
    co_n: usize,
    d: [usize; 3],
    e: [usize; 3],
    s: usize,
) -> Vec<T> {
    let dn = d[0] * d[1] * d[2];
    let en = e[0] * e[1] * e[2];
    let mut dw = vec![T::zero(); co_n * ci_n * 27];
    for_each_chunk_mut(&mut dw, ci_n * 27, |co, wrow| {
        let gc = &g[co * en..(co + 1) * en];
        for ci in 0..ci_n {
            let xc = &x[ci * dn..(ci + 1) * dn];
            for kz in 0..3 {
                let (zlo, zhi) = out_range(kz, d[0], e[0], s);
                for ky in 0..3 {
                    let (ylo, yhi) = out_range(ky, d[1], e[1], s);
                    for kx in 0..3 {
                        let (xlo, xhi) = out_range(kx, d[2], e[2], s);
                        let mut acc = T::zero();
                        for oz in zlo..zhi {
                            let iz = oz * s + kz - 1;
                            for oy in ylo..yhi {
                                let iy = oy * s + ky - 1;
                                let grow = (oz * e[1] + oy) * e[2];
                                let irow = (iz * d[1] + iy) * d[2];
                                for ox in xlo..xhi {
                                    acc = acc + gc[grow + ox] * xc[irow + ox * s + kx - 1];
                                }
                            }
                        }
                        wrow[ci * 27 + (kz * 3 + ky) * 3 + kx] = acc;
                    }
                }
            }
        }
    });
    dw
}

impl<T: Scalar> Tape<T> {
    /// 3x3x3 convolution with padding 1 and stride 1 or 2.
    ///
    /// `x: [ci, d0, d1, d2]`, `w: [co, ci, 3, 3, 3]`, `bias: [co]`.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Var, stride: usize) -> Var {
        assert!(stride == 1 || stride == 2, "conv3d stride must be 1 or 2");
        let (ci, d) = vol_shape(self.value(x));
        let ws = self.value(w).shape();
        assert_eq!(ws.len(), 5, "conv3d weight must be [co, ci, 3, 3, 3]");
        assert_eq!(&ws[1..], &[ci, 3, 3, 3][..], "conv3d weight shape {ws:?} vs ci={ci}");
        let co = ws[0];
        assert_eq!(self.value(bias).len(), co, "conv3d bias length");
        let e = conv_out_dims(d, stride);
        let out = conv3d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            self.value(bias).data(),
            ci,
            co,
            d,
            e,
            stride,
        );
        let out = Tensor::from_vec(&[co, e[0], e[1], e[2]], out).unwrap();
        self.push_op(out, &[x, w, bias], move |t, g| {
            let xv = t.value(x).data();
            let wv = t.value(w).data();
            let en = e[0] * e[1] * e[2];
            let dx = conv3d_bwd_x(g.data(), wv, ci, co, d, e, stride);
            let dw = conv3d_bwd_w(g.data(), xv, ci, co, d, e, stride);
            let mut db = vec![T::zero(); co];
            for (c, chunk) in g.data().chunks(en).enumerate() {
                let mut s = T::zero();
                for &v in chunk {
                    s = s + v;
                }
                db[c] = s;
            }
            vec![
                (x, Tensor::from_vec(&[ci, d[0], d[1], d[2]], dx).unwrap()),
                (w, Tensor::from_vec(&[co, ci, 3, 3, 3], dw).unwrap()),
                (bias, Tensor::from_vec(&[co], db).unwrap()),
            ]
        })
    }

    /// 2x2x2 transposed convolution with stride 2 (exact 2x upsampling).
    ///
    /// `x: [ci, d0, d1, d2]`, `w: [ci, co, 2, 2, 2]`, `bias: [co]`.
    pub fn conv3d_transpose2(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let (ci, d) = vol_shape(self.value(x));
        let ws = self.value(w).shape();
        assert_eq!(ws.len(), 5, "transpose conv weight must be [ci, co, 2, 2, 2]");
        assert_eq!(ws[0], ci, "transpose conv in-channels");
        assert_eq!(&ws[2..], &[2, 2, 2][..], "transpose conv kernel");
        let co = ws[1];
        assert_eq!(self.value(bias).len(), co, "transpose conv bias length");
        let e = [d[0] * 2, d[1] * 2, d[2] * 2];
        let dn = d[0] * d[1] * d[2];
        let en = e[0] * e[1] * e[2];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(bias).data();
        let mut out = vec![T::zero(); co * en];
        for_each_chunk_mut(&mut out, en, |c, oc| {
            for oz in 0..e[0] {
                let (iz, kz) = (oz / 2, oz % 2);
                for oy in 0..e[1] {
                    let (iy, ky) = (oy / 2, oy % 2);
                    let orow = (oz * e[1] + oy) * e[2];
                    let irow = (iz * d[1] + iy) * d[2];
                    for ox in 0..e[2] {
                        let (ix, kx) = (ox / 2, ox % 2);
                        let mut acc = bv[c];
                        let koff = (kz * 2 + ky) * 2 + kx;
                        for ci_i in 0..ci {
                            let wv_i = wv[(ci_i * co + c) * 8 + koff];
                            acc = acc + wv_i * xv[ci_i * dn + irow + ix];
                        }
                        oc[orow + ox] = acc;
                    }
                }
            }
        });
        let out = Tensor::from_vec(&[co, e[0], e[1], e[2]], out).unwrap();
        self.push_op(out, &[x, w, bias], move |t, g| {
            let xv = t.value(x).data();
            let wv = t.value(w).data();
            let gv = g.data();
            let mut dx = vec![T::zero(); ci * dn];
            for_each_chunk_mut(&mut dx, dn, |ci_i, xc| {
                for c in 0..co {
                    let gc = &gv[c * en..(c + 1) * en];
                    let wk = &wv[(ci_i * co + c) * 8..(ci_i * co + c + 1) * 8];
                    for iz in 0..d[0] {
                        for iy in 0..d[1] {
                            let irow = (iz * d[1] + iy) * d[2];
                            for ix in 0..d[2] {
                                let mut acc = T::zero();
                                for kz in 0..2 {
                                    for ky in 0..2 {
                                        let grow = ((iz * 2 + kz) * e[1] + iy * 2 + ky) * e[2] + ix * 2;
                                        for kx in 0..2 {
                                            acc = acc + wk[(kz * 2 + ky) * 2 + kx] * gc[grow + kx];
                                        }
                                    }
                                }
                                xc[irow + ix] = xc[irow + ix] + acc;
                            }
                        }
                    }
                }
            });
            let mut dw = vec![T::zero(); ci * co * 8];
            for_each_chunk_mut(&mut dw, co * 8, |ci_i, wrow| {
                let xc = &xv[ci_i * dn..(ci_i + 1) * dn];
                for c in 0..co {
                    let gc = &gv[c * en..(c + 1) * en];
                    for kz in 0..2 {
                        for ky in 0..2 {
                            for kx in 0..2 {
                                let mut acc = T::zero();
                                for iz in 0..d[0] {
                                    for iy in 0..d[1] {
                                        let irow = (iz * d[1] + iy) * d[2];
                                        let grow = ((iz * 2 + kz) * e[1] + iy * 2 + ky) * e[2] + kx;
                                        for ix in 0..d[2] {
                                            acc = acc + xc[irow + ix] * gc[grow + ix * 2];
                                        }
                                    }
                                }
                                wrow[c * 8 + (kz * 2 + ky) * 2 + kx] = acc;
                            }
                        }
                    }
                }
            });
            let mut db = vec![T::zero(); co];
            for (c, chunk) in gv.chunks(en).enumerate() {
                let mut s = T::zero();
                for &v in chunk {
                    s = s + v;
                }
                db[c] = s;
            }
            vec![
                (x, Tensor::from_vec(&[ci, d[0], d[1], d[2]], dx).unwrap()),
                (w, Tensor::from_vec(&[ci, co, 2, 2, 2], dw).unwrap()),
                (bias, Tensor::from_vec(&[co], db).unwrap()),
            ]
        })
    }

    /// Instance normalisation with affine parameters, per channel over all
    /// trailing axes: `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let shape = self.value(x).shape().to_vec();
        let c = shape[0];
        let n: usize = shape[1..].iter().product();
        assert!(n > 0, "instance_norm needs spatial extent");
        assert_eq!(self.value(gamma).len(), c, "instance_norm gamma length");
        assert_eq!(self.value(beta).len(), c, "instance_norm beta length");
        let stats = move |xv: &[T]| -> (Vec<T>, Vec<T>) {
            let inv_n = T::one() / T::from_f64c(n as f64);
            let mut means = Vec::with_capacity(c);
            let mut istds = Vec::with_capacity(c);
            for ch in 0..c {
                let row = &xv[ch * n..(ch + 1) * n];
                let mut s = T::zero();
                for &v in row {
                    s = s + v;
                }
                let mean = s * inv_n;
                let mut q = T::zero();
                for &v in row {
                    let d = v - mean;
                    q = q + d * d;
                }
                means.push(mean);
                istds.push(T::one() / (q * inv_n + eps).sqrt());
            }
            (means, istds)
        };
        let xv = self.value(x).data();
        let (means, istds) = stats(xv);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); c * n];
        for ch in 0..c {
            let (m, is, ga, be) = (means[ch], istds[ch], gv[ch], bv[ch]);
            let row = &xv[ch * n..(ch + 1) * n];
            let orow = &mut out[ch * n..(ch + 1) * n];
            for (o, &v) in orow.iter_mut().zip(row.iter()) {
                *o = ga * (v - m) * is + be;
            }
        }
        let out = Tensor::from_vec(&shape, out).unwrap();
        self.push_op(out, &[x, gamma, beta], move |t, g| {
            let xv = t.value(x).data();
            let gam = t.value(gamma).data();
            let (means, istds) = stats(xv);
            let gv = g.data();
            let inv_n = T::one() / T::from_f64c(n as f64);
            let mut dx = vec![T::zero(); c * n];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ch in 0..c {
                let (m, is) = (means[ch], istds[ch]);
                let xr = &xv[ch * n..(ch + 1) * n];
                let gr = &gv[ch * n..(ch + 1) * n];
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for (&gi, &xi) in gr.iter().zip(xr.iter()) {
                    sum_g = sum_g + gi;
                    sum_gx = sum_gx + gi * (xi - m) * is;
                }
                dgamma[ch] = sum_gx;
                dbeta[ch] = sum_g;
                let mean_g = sum_g * inv_n;
                let mean_gx = sum_gx * inv_n;
                let k = gam[ch] * is;
                let dr = &mut dx[ch * n..(ch + 1) * n];
                for ((d, &gi), &xi) in dr.iter_mut().zip(gr.iter()).zip(xr.iter()) {
                    let xh = (xi - m) * is;
                    *d = k * (gi - mean_g - xh * mean_gx);
                }
            }
            vec![
                (x, Tensor::from_vec(t.value(x).shape(), dx).unwrap()),
                (gamma, Tensor::from_vec(&[c], dgamma).unwrap()),
                (beta, Tensor::from_vec(&[c], dbeta).unwrap()),
            ]
        })
    }

    /// Trilinear 2x upsampling (half-voxel centre alignment, clamped borders).
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (c, d) = vol_shape(self.value(x));
        let e = [d[0] * 2, d[1] * 2, d[2] * 2];
        let taps = |dout: usize, din: usize| -> Vec<(usize, usize, T, T)> {
            (0..dout)
                .map(|o| {
                    let src = (o as f64 + 0.5) / 2.0 - 0.5;
                    let f = src.floor();
                    let w1 = src - f;
                    let clampi = |i: f64| (i.max(0.0) as usize).min(din - 1);
                    (clampi(f), clampi(f + 1.0), T::from_f64c(1.0 - w1), T::from_f64c(w1))
                })
                .collect()
        };
        let tz = taps(e[0], d[0]);
        let ty = taps(e[1], d[1]);
        let tx = taps(e[2], d[2]);
        let dn = d[0] * d[1] * d[2];
        let en = e[0] * e[1] * e[2];
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c * en];
        {
            let (tz, ty, tx) = (&tz, &ty, &tx);
            for_each_chunk_mut(&mut out, en, |ch, oc| {
                let xc = &xv[ch * dn..(ch + 1) * dn];
                for (oz, &(z0, z1, wz0, wz1)) in tz.iter().enumerate() {
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        let orow = (oz * e[1] + oy) * e[2];
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let fetch = |z: usize, y: usize, xx: usize| xc[(z * d[1] + y) * d[2] + xx];
                            let v = wz0
                                * (wy0 * (wx0 * fetch(z0, y0, x0) + wx1 * fetch(z0, y0, x1))
                                    + wy1 * (wx0 * fetch(z0, y1, x0) + wx1 * fetch(z0, y1, x1)))
                                + wz1
                                    * (wy0 * (wx0 * fetch(z1, y0, x0) + wx1 * fetch(z1, y0, x1))
                                        + wy1 * (wx0 * fetch(z1, y1, x0) + wx1 * fetch(z1, y1, x1)));
                            oc[orow + ox] = v;
                        }
                    }
                }
            });
        }
        let out = Tensor::from_vec(&[c, e[0], e[1], e[2]], out).unwrap();
        self.push_op(out, &[x], move |t, g| {
            let gv = g.data();
            let mut dx = vec![T::zero(); c * dn];
            let (tz, ty, tx) = (&tz, &ty, &tx);
            for_each_chunk_mut(&mut dx, dn, |ch, xc| {
                let gc = &gv[ch * en..(ch + 1) * en];
                for (oz, &(z0, z1, wz0, wz1)) in tz.iter().enumerate() {
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        let grow = (oz * e[1] + oy) * e[2];
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let gi = gc[grow + ox];
                            let mut put = |z: usize, y: usize, xx: usize, w: T| {
                                let k = (z * d[1] + y) * d[2] + xx;
                                xc[k] = xc[k] + gi * w;
                            };
                            put(z0, y0, x0, wz0 * wy0 * wx0);
                            put(z0, y0, x1, wz0 * wy0 * wx1);
                            put(z0, y1, x0, wz0 * wy1 * wx0);
                            put(z0, y1, x1, wz0 * wy1 * wx1);
                            put(z1, y0, x0, wz1 * wy0 * wx0);
                            put(z1, y0, x1, wz1 * wy0 * wx1);
                            put(z1, y1, x0, wz1 * wy1 * wx0);
                            put(z1, y1, x1, wz1 * wy1 * wx1);
                        }
                    }
                }
            });
            vec![(x, Tensor::from_vec(t.value(x).shape(), dx).unwrap())]
        })
    }
}
