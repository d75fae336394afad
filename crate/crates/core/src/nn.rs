//! Minimal f64 building blocks for the toy backbones: strided convolution
//! via im2col + GEMM, parameter-free average pooling, and Adam.
//!
//! Every layer exposes an explicit `forward` returning a cache and a
//! `backward` consuming it; there is no tape.

use ndarray::{linalg::general_mat_mul, Array2, Array3, ArrayView3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// (out_ch, in_ch * kernel * kernel), no bias term.
    pub weight: Array2<f64>,
}

pub struct ConvCache {
    col: Array2<f64>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    /// He-normal initialisation.
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let weight =
            Array2::from_shape_simple_fn((out_ch, in_ch * kernel * kernel), || normal.sample(rng));
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight,
        }
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, x: ArrayView3<f64>) -> (Array3<f64>, ConvCache) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_ch);
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let col = self.im2col(x, oh, ow);
        let mut out = Array2::<f64>::zeros((self.out_ch, oh * ow));
        general_mat_mul(1.0, &self.weight, &col, 0.0, &mut out);
        let out = out
            .into_shape_with_order((self.out_ch, oh, ow))
            .expect("contiguous gemm output");
        (
            out,
            ConvCache {
                col,
                in_shape: (c, h, w),
                out_hw: (oh, ow),
            },
        )
    }

    /// Accumulates into `dweight` and returns the input gradient when asked.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dout: &Array3<f64>,
        dweight: &mut Array2<f64>,
        need_dx: bool,
    ) -> Option<Array3<f64>> {
        let (oh, ow) = cache.out_hw;
        let dout2 = dout
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_ch, oh * ow))
            .expect("contiguous");
        general_mat_mul(1.0, &dout2, &cache.col.t(), 1.0, dweight);
        if !need_dx {
            return None;
        }
        let mut dcol = Array2::<f64>::zeros(cache.col.dim());
        general_mat_mul(1.0, &self.weight.t(), &dout2, 0.0, &mut dcol);
        Some(self.col2im(&dcol, cache.in_shape, oh, ow))
    }

    fn im2col(&self, x: ArrayView3<f64>, oh: usize, ow: usize) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let mut col = Array2::<f64>::zeros((c * k * k, oh * ow));
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let cols = col.as_slice_mut().expect("fresh array");
        let n_out = oh * ow;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * n_out..(row + 1) * n_out];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &xs[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(
        &self,
        dcol: &Array2<f64>,
        (c, h, w): (usize, usize, usize),
        oh: usize,
        ow: usize,
    ) -> Array3<f64> {
        let k = self.kernel;
        let mut dx = Array3::<f64>::zeros((c, h, w));
        let dxs = dx.as_slice_mut().expect("fresh array");
        let cols = dcol.as_slice().expect("standard layout");
        let n_out = oh * ow;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * n_out..(row + 1) * n_out];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dxs[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Non-overlapping average pooling; trailing rows/columns that do not fill
/// a whole window are dropped.
pub fn avg_pool(x: ArrayView3<f64>, factor: usize) -> Array3<f64> {
    if factor == 1 {
        return x.to_owned();
    }
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    Array3::from_shape_fn((c, oh, ow), |(ci, y, xx)| {
        let mut acc = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += x[[ci, y * factor + dy, xx * factor + dx]];
            }
        }
        acc * norm
    })
}

pub fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Gradient of ReLU given the post-activation output.
pub fn relu_backward(dout: &mut Array3<f64>, activated: &Array3<f64>) {
    ndarray::Zip::from(dout).and(activated).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            cfg,
            t: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Array2<f64>>, grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow) = (conv.out_size(h), conv.out_size(w));
        let k = conv.kernel;
        Array3::from_shape_fn((conv.out_ch, oh, ow), |(o, oy, ox)| {
            let mut acc = 0.0;
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                        let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += conv.weight[[o, (ci * k + ky) * k + kx]]
                                * x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        let x = Array3::from_shape_simple_fn((2, 6, 5), || rng.gen_range(-1.0..1.0));
        let (y, _) = conv.forward(x.view());
        let y_ref = naive_conv(&conv, &x);
        for (a, b) in y.iter().zip(y_ref.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let conv = Conv2d::new(2, 2, 3, 2, 1, &mut rng);
        let x = Array3::from_shape_simple_fn((2, 4, 4), || rng.gen_range(-1.0..1.0));
        let probe = Array3::from_shape_simple_fn((2, 2, 2), || rng.gen_range(-1.0..1.0));
        let objective = |conv: &Conv2d, x: &Array3<f64>| (conv.forward(x.view()).0 * &probe).sum();

        let (_, cache) = conv.forward(x.view());
        let mut dw = Array2::zeros(conv.weight.dim());
        let dx = conv.backward(&cache, &probe, &mut dw, true).unwrap();

        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx.as_slice().unwrap()[idx]).abs() < 1e-7);
        }
        for idx in 0..conv.weight.len() {
            let mut cp = conv.clone();
            let mut cm = conv.clone();
            cp.weight.as_slice_mut().unwrap()[idx] += h;
            cm.weight.as_slice_mut().unwrap()[idx] -= h;
            let fd = (objective(&cp, &x) - objective(&cm, &x)) / (2.0 * h);
            assert!((fd - dw.as_slice().unwrap()[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = Array2::from_elem((2, 2), 0.3);
        let mut adam = Adam::new(AdamConfig::default(), &[(2, 2)]);
        for _ in 0..5 {
            adam.step(vec![&mut p], &[Array2::zeros((2, 2))]);
        }
        assert!(p.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn avg_pool_drops_ragged_edge() {
        let x = Array3::from_shape_fn((1, 5, 4), |(_, y, x)| (y * 4 + x) as f64);
        let p = avg_pool(x.view(), 2);
        assert_eq!(p.dim(), (1, 2, 2));
        assert_eq!(p[[0, 0, 0]], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
    }
}
