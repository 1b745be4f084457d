//! Forward and backward kernels for single-sample tensors.
//!
//! Every output element of a convolution is accumulated in the fixed order
//! bias, input channel, kd, kh, kw. Zero-padded taps are skipped, so two
//! evaluations that see the same receptive field produce bit-identical values
//! regardless of how large the surrounding input is.

use crate::par;
use crate::tensor::{Shape, Tensor};

use super::layer::{INSTANCE_NORM_EPS, LEAKY_SLOPE, PIXEL_NORM_EPS};

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Output indices `o` with `0 <= o*stride + tap - padding < n_in`.
#[inline]
fn valid(tap: usize, g: &ConvGeom, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if g.padding > tap {
        (g.padding - tap).div_ceil(g.stride)
    } else {
        0
    };
    let top = n_in + g.padding;
    let hi = if top > tap {
        ((top - 1 - tap) / g.stride + 1).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv3d_forward(x: &Tensor, weight: &[f64], bias: &[f64], g: &ConvGeom, os: Shape) -> Tensor {
    let is = x.shape();
    let k = g.kernel;
    let k3 = k * k * k;
    let (in_sp, out_sp) = (is.spatial(), os.spatial());
    let mut out = Tensor::zeros(os);
    let xd = x.data();
    par::for_each_chunk(out.data_mut(), out_sp, |co, out_ch| {
        out_ch.fill(bias[co]);
        for ci in 0..g.cin {
            let xin = &xd[ci * in_sp..(ci + 1) * in_sp];
            let wk = &weight[(co * g.cin + ci) * k3..][..k3];
            for kd in 0..k {
                let (d_lo, d_hi) = valid(kd, g, is.d, os.d);
                for kh in 0..k {
                    let (h_lo, h_hi) = valid(kh, g, is.h, os.h);
                    for kw in 0..k {
                        let (w_lo, w_hi) = valid(kw, g, is.w, os.w);
                        if w_lo >= w_hi {
                            continue;
                        }
                        let wv = wk[(kd * k + kh) * k + kw];
                        for od in d_lo..d_hi {
                            let id = od * g.stride + kd - g.padding;
                            for oh in h_lo..h_hi {
                                let ih = oh * g.stride + kh - g.padding;
                                let orow = &mut out_ch[(od * os.h + oh) * os.w..][..os.w];
                                let irow = &xin[(id * is.h + ih) * is.w..][..is.w];
                                if g.stride == 1 {
                                    let shift = w_lo + kw - g.padding;
                                    for (o, i) in orow[w_lo..w_hi].iter_mut().zip(&irow[shift..]) {
                                        *o += wv * i;
                                    }
                                } else {
                                    for ow in w_lo..w_hi {
                                        orow[ow] += wv * irow[ow * g.stride + kw - g.padding];
                                    }
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

/// Gradient with respect to the convolution input.
pub fn conv3d_backward_input(gy: &Tensor, weight: &[f64], g: &ConvGeom, is: Shape) -> Tensor {
    let os = gy.shape();
    let k = g.kernel;
    let k3 = k * k * k;
    let (in_sp, out_sp) = (is.spatial(), os.spatial());
    let mut gx = Tensor::zeros(is);
    let gyd = gy.data();
    par::for_each_chunk(gx.data_mut(), in_sp, |ci, gin| {
        for co in 0..g.cout {
            let gout = &gyd[co * out_sp..(co + 1) * out_sp];
            let wk = &weight[(co * g.cin + ci) * k3..][..k3];
            for kd in 0..k {
                let (d_lo, d_hi) = valid(kd, g, is.d, os.d);
                for kh in 0..k {
                    let (h_lo, h_hi) = valid(kh, g, is.h, os.h);
                    for kw in 0..k {
                        let (w_lo, w_hi) = valid(kw, g, is.w, os.w);
                        if w_lo >= w_hi {
                            continue;
                        }
                        let wv = wk[(kd * k + kh) * k + kw];
                        for od in d_lo..d_hi {
                            let id = od * g.stride + kd - g.padding;
                            for oh in h_lo..h_hi {
                                let ih = oh * g.stride + kh - g.padding;
                                let orow = &gout[(od * os.h + oh) * os.w..][..os.w];
                                let irow = &mut gin[(id * is.h + ih) * is.w..][..is.w];
                                if g.stride == 1 {
                                    let shift = w_lo + kw - g.padding;
                                    for (i, o) in irow[shift..].iter_mut().zip(&orow[w_lo..w_hi]) {
                                        *i += wv * o;
                                    }
                                } else {
                                    for ow in w_lo..w_hi {
                                        irow[ow * g.stride + kw - g.padding] += wv * orow[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

/// Accumulates weight and bias gradients into `gw` / `gb`.
pub fn conv3d_backward_params(x: &Tensor, gy: &Tensor, g: &ConvGeom, gw: &mut [f64], gb: &mut [f64]) {
    let is = x.shape();
    let os = gy.shape();
    let k = g.kernel;
    let k3 = k * k * k;
    let (in_sp, out_sp) = (is.spatial(), os.spatial());
    let (xd, gyd) = (x.data(), gy.data());
    par::for_each_chunk_pair(gw, g.cin * k3, gb, 1, |co, gwc, gbc| {
        let gout = &gyd[co * out_sp..(co + 1) * out_sp];
        gbc[0] += gout.iter().sum::<f64>();
        for ci in 0..g.cin {
            let xin = &xd[ci * in_sp..(ci + 1) * in_sp];
            for kd in 0..k {
                let (d_lo, d_hi) = valid(kd, g, is.d, os.d);
                for kh in 0..k {
                    let (h_lo, h_hi) = valid(kh, g, is.h, os.h);
                    for kw in 0..k {
                        let (w_lo, w_hi) = valid(kw, g, is.w, os.w);
                        let mut acc = 0.0;
                        for od in d_lo..d_hi {
                            let id = od * g.stride + kd - g.padding;
                            for oh in h_lo..h_hi {
                                let ih = oh * g.stride + kh - g.padding;
                                let orow = &gout[(od * os.h + oh) * os.w..][..os.w];
                                let irow = &xin[(id * is.h + ih) * is.w..][..is.w];
                                if g.stride == 1 {
                                    let shift = w_lo + kw - g.padding;
                                    acc += orow[w_lo..w_hi]
                                        .iter()
                                        .zip(&irow[shift..])
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                } else {
                                    for ow in w_lo..w_hi {
                                        acc += orow[ow] * irow[ow * g.stride + kw - g.padding];
                                    }
                                }
                            }
                        }
                        gwc[ci * k3 + (kd * k + kh) * k + kw] += acc;
                    }
                }
            }
        }
    });
}

pub fn upsample_forward(x: &Tensor, f: usize) -> Tensor {
    let is = x.shape();
    let os = Shape::new(is.c, is.d * f, is.h * f, is.w * f);
    let mut out = Tensor::zeros(os);
    let xd = x.data();
    par::for_each_chunk(out.data_mut(), os.spatial(), |c, oc| {
        let xin = &xd[c * is.spatial()..(c + 1) * is.spatial()];
        for od in 0..os.d {
            for oh in 0..os.h {
                let irow = &xin[((od / f) * is.h + oh / f) * is.w..][..is.w];
                let orow = &mut oc[(od * os.h + oh) * os.w..][..os.w];
                for (ow, o) in orow.iter_mut().enumerate() {
                    *o = irow[ow / f];
                }
            }
        }
    });
    out
}

pub fn upsample_backward(gy: &Tensor, f: usize, is: Shape) -> Tensor {
    let os = gy.shape();
    let mut gx = Tensor::zeros(is);
    let gyd = gy.data();
    par::for_each_chunk(gx.data_mut(), is.spatial(), |c, gc| {
        let gout = &gyd[c * os.spatial()..(c + 1) * os.spatial()];
        for od in 0..os.d {
            for oh in 0..os.h {
                let orow = &gout[(od * os.h + oh) * os.w..][..os.w];
                let irow = &mut gc[((od / f) * is.h + oh / f) * is.w..][..is.w];
                for (ow, g) in orow.iter().enumerate() {
                    irow[ow / f] += g;
                }
            }
        }
    });
    gx
}

fn channel_stats(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + INSTANCE_NORM_EPS).sqrt())
}

pub fn instance_norm_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    par::for_each_chunk(out.data_mut(), x.shape().spatial(), |_, ch| {
        let (mean, inv) = channel_stats(ch);
        ch.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    });
    out
}

pub fn instance_norm_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    let sp = x.shape().spatial();
    let mut gx = gy.clone();
    let xd = x.data();
    par::for_each_chunk(gx.data_mut(), sp, |c, g| {
        let xc = &xd[c * sp..(c + 1) * sp];
        let (mean, inv) = channel_stats(xc);
        let n = sp as f64;
        let mean_g = g.iter().sum::<f64>() / n;
        let mean_gy = g
            .iter()
            .zip(xc)
            .map(|(gv, xv)| gv * (xv - mean) * inv)
            .sum::<f64>()
            / n;
        for (gv, xv) in g.iter_mut().zip(xc) {
            let y = (xv - mean) * inv;
            *gv = inv * (*gv - mean_g - y * mean_gy);
        }
    });
    gx
}

/// Per-voxel `1 / sqrt(mean_c x^2 + eps)`.
fn pixel_inv(x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let sp = s.spatial();
    let mut acc = vec![0.0; sp];
    for c in 0..s.c {
        for (a, v) in acc.iter_mut().zip(&x.data()[c * sp..(c + 1) * sp]) {
            *a += v * v;
        }
    }
    acc.iter()
        .map(|a| 1.0 / (a / s.c as f64 + PIXEL_NORM_EPS).sqrt())
        .collect()
}

pub fn pixel_norm_forward(x: &Tensor) -> Tensor {
    let inv = pixel_inv(x);
    let mut out = x.clone();
    par::for_each_chunk(out.data_mut(), x.shape().spatial(), |_, ch| {
        ch.iter_mut().zip(&inv).for_each(|(v, i)| *v *= i);
    });
    out
}

pub fn pixel_norm_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    let s = x.shape();
    let sp = s.spatial();
    let inv = pixel_inv(x);
    let mut dot = vec![0.0; sp];
    for c in 0..s.c {
        let xc = &x.data()[c * sp..(c + 1) * sp];
        let gc = &gy.data()[c * sp..(c + 1) * sp];
        for ((d, a), b) in dot.iter_mut().zip(xc).zip(gc) {
            *d += a * b;
        }
    }
    let cn = s.c as f64;
    let mut gx = gy.clone();
    let xd = x.data();
    par::for_each_chunk(gx.data_mut(), sp, |c, g| {
        let xc = &xd[c * sp..(c + 1) * sp];
        for i in 0..sp {
            let iv = inv[i];
            g[i] = g[i] * iv - xc[i] * iv * iv * iv * dot[i] / cn;
        }
    });
    gx
}

pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn linear_forward(x: &Tensor, weight: &[f64], bias: &[f64], out: Shape) -> Tensor {
    let n_in = x.numel();
    let xd = x.data();
    let mut y = Tensor::zeros(out);
    par::for_each_chunk(y.data_mut(), 1, |o, yo| {
        let row = &weight[o * n_in..(o + 1) * n_in];
        yo[0] = bias[o] + row.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>();
    });
    y
}

pub fn linear_backward(x: &Tensor, gy: &Tensor, weight: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Tensor {
    let n_in = x.numel();
    let (xd, gyd) = (x.data(), gy.data());
    par::for_each_chunk_pair(gw, n_in, gb, 1, |o, gwr, gbo| {
        let g = gyd[o];
        gbo[0] += g;
        gwr.iter_mut().zip(xd).for_each(|(w, xv)| *w += g * xv);
    });
    let mut gx = Tensor::zeros(x.shape());
    for (o, g) in gyd.iter().enumerate() {
        let row = &weight[o * n_in..(o + 1) * n_in];
        gx.data_mut().iter_mut().zip(row).for_each(|(a, w)| *a += g * w);
    }
    gx
}

pub fn global_avg_pool_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    let sp = s.spatial();
    let data = x
        .data()
        .chunks(sp)
        .map(|c| c.iter().sum::<f64>() / sp as f64)
        .collect();
    Tensor::from_vec(Shape::vector(s.c), data).expect("pool shape")
}

pub fn global_avg_pool_backward(gy: &Tensor, is: Shape) -> Tensor {
    let sp = is.spatial();
    let mut gx = Tensor::zeros(is);
    for (c, ch) in gx.data_mut().chunks_mut(sp).enumerate() {
        ch.fill(gy.data()[c] / sp as f64);
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &[f64], b: &[f64], g: &ConvGeom, os: Shape) -> Tensor {
        let is = x.shape();
        let k = g.kernel;
        let mut out = Tensor::zeros(os);
        for co in 0..os.c {
            for od in 0..os.d {
                for oh in 0..os.h {
                    for ow in 0..os.w {
                        let mut acc = b[co];
                        for ci in 0..is.c {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let id = (od * g.stride + kd) as isize - g.padding as isize;
                                        let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                                        let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                                        if id < 0
                                            || ih < 0
                                            || iw < 0
                                            || id >= is.d as isize
                                            || ih >= is.h as isize
                                            || iw >= is.w as isize
                                        {
                                            continue;
                                        }
                                        let wi = (((co * is.c + ci) * k + kd) * k + kh) * k + kw;
                                        acc += w[wi]
                                            * x.data()[x.index(ci, id as usize, ih as usize, iw as usize)];
                                    }
                                }
                            }
                        }
                        let o = out.index(co, od, oh, ow);
                        out.data_mut()[o] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(stride, padding, kernel) in &[(1, 1, 3), (2, 1, 3), (1, 0, 3), (2, 1, 4), (1, 2, 3)] {
            let g = ConvGeom {
                cin: 2,
                cout: 3,
                kernel,
                stride,
                padding,
            };
            let is = Shape::new(2, 5, 6, 7);
            let x = Tensor::from_vec(is, lcg(is.numel(), 1)).unwrap();
            let w = lcg(2 * 3 * kernel.pow(3), 2);
            let b = lcg(3, 3);
            let f = |n: usize| (n + 2 * padding - kernel) / stride + 1;
            let os = Shape::new(3, f(5), f(6), f(7));
            let fast = conv3d_forward(&x, &w, &b, &g, os);
            let slow = naive_conv(&x, &w, &b, &g, os);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "stride {stride} pad {padding}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), y> == <x, conv^T(y)> for the linear part.
        let g = ConvGeom {
            cin: 2,
            cout: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let is = Shape::new(2, 6, 5, 4);
        let os = Shape::new(3, 3, 3, 2);
        let x = Tensor::from_vec(is, lcg(is.numel(), 4)).unwrap();
        let w = lcg(2 * 3 * 27, 5);
        let y = Tensor::from_vec(os, lcg(os.numel(), 6)).unwrap();
        let cx = conv3d_forward(&x, &w, &[0.0; 3], &g, os);
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let gx = conv3d_backward_input(&y, &w, &g, is);
        let rhs: f64 = gx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; 3];
        conv3d_backward_params(&x, &y, &g, &mut gw, &mut gb);
        let rhs_w: f64 = gw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn upsample_round_trip_sums() {
        let is = Shape::new(2, 2, 3, 2);
        let x = Tensor::from_vec(is, lcg(is.numel(), 9)).unwrap();
        let up = upsample_forward(&x, 2);
        assert_eq!(up.shape(), Shape::new(2, 4, 6, 4));
        assert_eq!(up.data()[up.index(1, 3, 5, 3)], x.data()[x.index(1, 1, 2, 1)]);
        let back = upsample_backward(&up, 2, is);
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - 8.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn norms_produce_unit_statistics() {
        let is = Shape::new(3, 2, 3, 4);
        let x = Tensor::from_vec(is, lcg(is.numel(), 12)).unwrap();
        let y = instance_norm_forward(&x);
        for ch in y.data().chunks(is.spatial()) {
            let m = ch.iter().sum::<f64>() / ch.len() as f64;
            assert!(m.abs() < 1e-12);
        }
        let p = pixel_norm_forward(&x);
        let sp = is.spatial();
        for i in 0..sp {
            let ms: f64 = (0..3).map(|c| p.data()[c * sp + i].powi(2)).sum::<f64>() / 3.0;
            assert!((ms - 1.0).abs() < 1e-6);
        }
    }
}
