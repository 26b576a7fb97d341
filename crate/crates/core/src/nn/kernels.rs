//! Convolution and resampling kernels with their backward passes.
//!
//! Convolutions lower to im2col + sgemm per batch item. Items run in
//! parallel; per-item weight gradients are reduced afterwards in item
//! order, so results are identical with and without the `parallel` feature.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::augment::reflect_index;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl ConvSpec {
    pub fn same(k: usize, mode: PadMode) -> Self {
        ConvSpec {
            stride: 1,
            pad: k / 2,
            mode,
        }
    }

    pub fn output_size(&self, input: usize, k: usize) -> usize {
        assert!(input + 2 * self.pad >= k, "kernel {k} larger than padded input {input}");
        (input + 2 * self.pad - k) / self.stride + 1
    }
}

/// `c = a·b + beta·c` for row-major `a` (m×k) and `b` (k×n); either operand
/// may be read transposed from its stored layout.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
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

/// Source index for each output position along one axis and kernel tap.
fn tap_map(input: usize, output: usize, k: usize, spec: ConvSpec) -> Vec<Option<usize>> {
    let mut map = Vec::with_capacity(k * output);
    for t in 0..k {
        for o in 0..output {
            let i = (o * spec.stride + t) as isize - spec.pad as isize;
            map.push(if (0..input as isize).contains(&i) {
                Some(i as usize)
            } else {
                match spec.mode {
                    PadMode::Zero => None,
                    PadMode::Reflect => Some(reflect_index(i, input)),
                }
            });
        }
    }
    map
}

struct Lowering {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    ymap: Vec<Option<usize>>,
    xmap: Vec<Option<usize>>,
}

impl Lowering {
    fn new(x: &Tensor, k: usize, spec: ConvSpec) -> Self {
        let (h, w) = (x.h(), x.w());
        let ho = spec.output_size(h, k);
        let wo = spec.output_size(w, k);
        Lowering {
            cin: x.c(),
            h,
            w,
            k,
            ho,
            wo,
            ymap: tap_map(h, ho, k, spec),
            xmap: tap_map(w, wo, k, spec),
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, img: &[f32], out: &mut [f32]) {
        let (k, ho, wo) = (self.k, self.ho, self.wo);
        let plane = self.h * self.w;
        for c in 0..self.cin {
            let src = &img[c * plane..(c + 1) * plane];
            for ky in 0..k {
                let ym = &self.ymap[ky * ho..(ky + 1) * ho];
                for kx in 0..k {
                    let xm = &self.xmap[kx * wo..(kx + 1) * wo];
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut out[row * ho * wo..(row + 1) * ho * wo];
                    for (oy, iy) in ym.iter().enumerate() {
                        let d = &mut dst[oy * wo..(oy + 1) * wo];
                        match iy {
                            None => d.fill(0.0),
                            Some(iy) => {
                                let srow = &src[iy * self.w..(iy + 1) * self.w];
                                for (dv, ix) in d.iter_mut().zip(xm) {
                                    *dv = ix.map_or(0.0, |ix| srow[ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], img: &mut [f32]) {
        let (k, ho, wo) = (self.k, self.ho, self.wo);
        let plane = self.h * self.w;
        img.fill(0.0);
        for c in 0..self.cin {
            let dst = &mut img[c * plane..(c + 1) * plane];
            for ky in 0..k {
                let ym = &self.ymap[ky * ho..(ky + 1) * ho];
                for kx in 0..k {
                    let xm = &self.xmap[kx * wo..(kx + 1) * wo];
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for (oy, iy) in ym.iter().enumerate() {
                        let Some(iy) = iy else { continue };
                        let s = &src[oy * wo..(oy + 1) * wo];
                        let drow = &mut dst[iy * self.w..(iy + 1) * self.w];
                        for (sv, ix) in s.iter().zip(xm) {
                            if let Some(ix) = ix {
                                drow[*ix] += sv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv(x, weight) + bias` with `weight` shaped `[cout, cin, k, k]`
/// and `bias` holding `cout` values.
pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Tensor {
    let [cout, cin, k, k2] = weight.shape();
    assert_eq!(k, k2, "square kernels only");
    assert_eq!(cin, x.c(), "input channels");
    let low = Lowering::new(x, k, spec);
    let (rows, cols) = (low.rows(), low.cols());
    let mut y = Tensor::zeros([x.n(), cout, low.ho, low.wo]);
    par::for_each_chunk_mut(y.data_mut(), cout * cols, |n, out| {
        let mut buf = vec![0.0; rows * cols];
        low.im2col(x.item(n), &mut buf);
        if let Some(b) = bias {
            for (co, plane) in out.chunks_mut(cols).enumerate() {
                plane.fill(b.data()[co]);
            }
            gemm(cout, rows, cols, weight.data(), false, &buf, false, 1.0, out);
        } else {
            gemm(cout, rows, cols, weight.data(), false, &buf, false, 0.0, out);
        }
    });
    y
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dweight: Tensor,
    pub dbias: Vec<f32>,
}

pub fn conv2d_backward(x: &Tensor, weight: &Tensor, dy: &Tensor, spec: ConvSpec, need_dx: bool) -> ConvGrads {
    let [cout, _, k, _] = weight.shape();
    let low = Lowering::new(x, k, spec);
    let (rows, cols) = (low.rows(), low.cols());
    assert_eq!(dy.shape(), [x.n(), cout, low.ho, low.wo]);
    let item_len = x.item_len();
    let per_item = par::map_indexed(x.n(), |n| {
        let g = dy.item(n);
        let mut buf = vec![0.0; rows * cols];
        low.im2col(x.item(n), &mut buf);
        let mut dw = vec![0.0; cout * rows];
        gemm(cout, cols, rows, g, false, &buf, true, 0.0, &mut dw);
        let dx = need_dx.then(|| {
            gemm(rows, cout, cols, weight.data(), true, g, false, 0.0, &mut buf);
            let mut dx = vec![0.0; item_len];
            low.col2im(&buf, &mut dx);
            dx
        });
        (dw, dx)
    });
    let mut dweight = Tensor::zeros(weight.shape());
    let mut dx_all = need_dx.then(|| Vec::with_capacity(x.numel()));
    for (dw, dx) in per_item {
        for (a, b) in dweight.data_mut().iter_mut().zip(&dw) {
            *a += b;
        }
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
    }
    let mut dbias = vec![0.0f32; cout];
    for n in 0..x.n() {
        for (co, plane) in dy.item(n).chunks(cols).enumerate() {
            dbias[co] += plane.iter().sum::<f32>();
        }
    }
    ConvGrads {
        dx: dx_all.map(|d| Tensor::from_vec(x.shape(), d).expect("dx shape")),
        dweight,
        dbias,
    }
}

/// 2×2 max pooling with stride 2. Returns the output and, per output
/// element, the flat input index that won.
pub fn maxpool2_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros([n, c, ho, wo]);
    let mut arg = vec![0u32; y.numel()];
    let xs = x.data();
    let mut o = 0;
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xs[i] > xs[best] {
                        best = i;
                    }
                }
                y.data_mut()[o] = xs[best];
                arg[o] = best as u32;
                o += 1;
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward(x_shape: [usize; 4], arg: &[u32], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    for (g, &i) in dy.data().iter().zip(arg) {
        dx.data_mut()[i as usize] += g;
    }
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2_forward(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut y = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let xs = x.data();
    let ys = y.data_mut();
    for p in 0..n * c {
        for yy in 0..2 * h {
            let src = &xs[p * h * w + (yy / 2) * w..p * h * w + (yy / 2 + 1) * w];
            let dst = &mut ys[p * 4 * h * w + yy * 2 * w..p * 4 * h * w + (yy + 1) * 2 * w];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let [n, c, h2, w2] = dy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    let gs = dy.data();
    let ds = dx.data_mut();
    for p in 0..n * c {
        for yy in 0..h2 {
            for xx in 0..w2 {
                ds[p * h * w + (yy / 2) * w + xx / 2] += gs[p * h2 * w2 + yy * w2 + xx];
            }
        }
    }
    dx
}

pub const INSTANCE_NORM_EPS: f32 = 1e-5;

/// Per-(item, channel) standardization without affine parameters.
/// Returns the output and each plane's `1 / sqrt(var + eps)`.
pub fn instance_norm_forward(x: &Tensor) -> (Tensor, Vec<f32>) {
    let m = x.plane_len();
    let planes = par::map_indexed(x.n() * x.c(), |p| {
        let plane = &x.data()[p * m..(p + 1) * m];
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
        let var = plane
            .iter()
            .map(|&v| (v as f64 - mean) * (v as f64 - mean))
            .sum::<f64>()
            / m as f64;
        let is = 1.0 / (var + INSTANCE_NORM_EPS as f64).sqrt();
        let out: Vec<f32> = plane.iter().map(|&v| ((v as f64 - mean) * is) as f32).collect();
        (out, is as f32)
    });
    let mut data = Vec::with_capacity(x.numel());
    let mut inv = Vec::with_capacity(planes.len());
    for (out, is) in planes {
        data.extend_from_slice(&out);
        inv.push(is);
    }
    (Tensor::from_vec(x.shape(), data).expect("same shape"), inv)
}

pub fn instance_norm_backward(y: &Tensor, inv_std: &[f32], dy: &Tensor) -> Tensor {
    let m = y.plane_len();
    let mut dx = dy.clone();
    par::for_each_chunk_mut(dx.data_mut(), m, |p, g| {
        let yp = &y.data()[p * m..(p + 1) * m];
        let sum_g: f64 = g.iter().map(|&v| v as f64).sum();
        let sum_gy: f64 = g.iter().zip(yp).map(|(&a, &b)| a as f64 * b as f64).sum();
        let k = inv_std[p] as f64 / m as f64;
        for (gv, &yv) in g.iter_mut().zip(yp) {
            *gv = (k * (m as f64 * *gv as f64 - sum_g - yv as f64 * sum_gy)) as f32;
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f32], spec: ConvSpec) -> Tensor {
        let [cout, cin, k, _] = w.shape();
        let ho = spec.output_size(x.h(), k);
        let wo = spec.output_size(x.w(), k);
        let mut y = Tensor::zeros([x.n(), cout, ho, wo]);
        for n in 0..x.n() {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co] as f64;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                    let inside = iy >= 0 && ix >= 0 && (iy as usize) < x.h() && (ix as usize) < x.w();
                                    let v = if inside {
                                        x.data()[((n * cin + ci) * x.h() + iy as usize) * x.w() + ix as usize]
                                    } else if spec.mode == PadMode::Reflect {
                                        let (ry, rx) = (reflect_index(iy, x.h()), reflect_index(ix, x.w()));
                                        x.data()[((n * cin + ci) * x.h() + ry) * x.w() + rx]
                                    } else {
                                        0.0
                                    };
                                    acc += v as f64 * w.data()[((co * cin + ci) * k + ky) * k + kx] as f64;
                                }
                            }
                        }
                        y.data_mut()[((n * cout + co) * ho + oy) * wo + ox] = acc as f32;
                    }
                }
            }
        }
        y
    }

    fn ramp(shape: [usize; 4], seed: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| (i as f32 * 0.37 + seed).sin()).collect()).unwrap()
    }

    #[test]
    fn conv_matches_naive() {
        for (spec, k) in [
            (
                ConvSpec {
                    stride: 1,
                    pad: 1,
                    mode: PadMode::Zero,
                },
                3,
            ),
            (
                ConvSpec {
                    stride: 2,
                    pad: 1,
                    mode: PadMode::Zero,
                },
                3,
            ),
            (
                ConvSpec {
                    stride: 1,
                    pad: 3,
                    mode: PadMode::Reflect,
                },
                7,
            ),
            (
                ConvSpec {
                    stride: 2,
                    pad: 1,
                    mode: PadMode::Zero,
                },
                4,
            ),
            (
                ConvSpec {
                    stride: 1,
                    pad: 0,
                    mode: PadMode::Zero,
                },
                1,
            ),
        ] {
            let x = ramp([2, 3, 9, 8], 0.1);
            let w = ramp([4, 3, k, k], 1.3);
            let b = [0.1, -0.2, 0.3, 0.0];
            let bt = Tensor::from_vec([4, 1, 1, 1], b.to_vec()).unwrap();
            let fast = conv2d_forward(&x, &w, Some(&bt), spec);
            let slow = naive_conv(&x, &w, &b, spec);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let spec = ConvSpec {
            stride: 2,
            pad: 2,
            mode: PadMode::Reflect,
        };
        let x = ramp([2, 2, 6, 5], 0.4);
        let w = ramp([3, 2, 3, 3], 2.0);
        // loss = sum(y * r) for a fixed r
        let y = conv2d_forward(&x, &w, None, spec);
        let r = ramp(y.shape(), 5.0);
        let loss = |x: &Tensor, w: &Tensor| -> f64 {
            let y = conv2d_forward(x, w, None, spec);
            y.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        let g = conv2d_backward(&x, &w, &r, spec, true);
        let h = 1e-2f32;
        for i in [0, 7, 17, 30, 53] {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h as f64);
            let an = g.dx.as_ref().unwrap().data()[i] as f64;
            assert!((fd - an).abs() < 1e-2 * (1.0 + an.abs()), "dx[{i}] {fd} vs {an}");
        }
        for i in [0, 5, 26, 53] {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.data_mut()[i] += h;
            wm.data_mut()[i] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h as f64);
            let an = g.dweight.data()[i] as f64;
            assert!((fd - an).abs() < 1e-2 * (1.0 + an.abs()), "dw[{i}] {fd} vs {an}");
        }
        let sum_r: f32 =
            r.item(0)[..y.plane_len()].iter().sum::<f32>() + r.item(1)[..y.plane_len()].iter().sum::<f32>();
        assert!((g.dbias[0] - sum_r).abs() < 1e-4);
    }

    #[test]
    fn pool_and_upsample_adjoint() {
        let x = ramp([1, 2, 4, 6], 0.0);
        let (y, arg) = maxpool2_forward(&x);
        assert_eq!(y.shape(), [1, 2, 2, 3]);
        let dx = maxpool2_backward(x.shape(), &arg, &Tensor::filled(y.shape(), 1.0));
        assert_eq!(dx.data().iter().sum::<f32>(), 12.0);

        let u = upsample2_forward(&x);
        assert_eq!(u.shape(), [1, 2, 8, 12]);
        assert_eq!(u.data()[0], u.data()[13]);
        // <up(x), g> == <x, up^T(g)>
        let g = ramp(u.shape(), 3.0);
        let lhs: f32 = u.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f32 = x
            .data()
            .iter()
            .zip(upsample2_backward(&g).data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn instance_norm_standardizes() {
        let x = ramp([2, 3, 5, 5], 0.7).map(|v| 3.0 * v + 1.0);
        let (y, inv) = instance_norm_forward(&x);
        assert_eq!(inv.len(), 6);
        for p in y.data().chunks(25) {
            let mean: f32 = p.iter().sum::<f32>() / 25.0;
            let var: f32 = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 25.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3);
        }
    }
}
