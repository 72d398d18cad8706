// Raw forward/backward kernels on contiguous NCHW buffers. Shape validation
// happens in the graph layer; everything here assumes consistent extents.

use rayon::prelude::*;

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn in_sample(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_sample(&self) -> usize {
        self.cout * self.oh * self.ow
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, no padding: the input sample already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let pixels = g.pixels();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * pixels..(row + 1) * pixels];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let pixels = g.pixels();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * pixels..(row + 1) * pixels];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.out_sample()];
    let (patch, pixels) = (g.patch(), g.pixels());
    out.par_chunks_mut(g.out_sample())
        .enumerate()
        .for_each(|(i, y)| {
            let xs = &x[i * g.in_sample()..(i + 1) * g.in_sample()];
            let mut scratch;
            let col: &[T] = if g.is_pointwise() {
                xs
            } else {
                scratch = vec![T::zero(); patch * pixels];
                im2col(xs, g, &mut scratch);
                &scratch
            };
            T::gemm(
                g.cout,
                patch,
                pixels,
                T::one(),
                weight,
                (patch as isize, 1),
                col,
                (pixels as isize, 1),
                T::zero(),
                y,
                (pixels as isize, 1),
            );
            if let Some(b) = bias {
                for (o, plane) in y.chunks_mut(pixels).enumerate() {
                    plane.iter_mut().for_each(|v| *v = *v + b[o]);
                }
            }
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_input, need_weight, need_bias) = need;
    let (patch, pixels) = (g.patch(), g.pixels());

    // Per-sample partial weight gradients are reduced sequentially afterwards so the
    // result does not depend on how samples were scheduled across threads.
    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..g.n)
        .into_par_iter()
        .map(|i| {
            let xs = &x[i * g.in_sample()..(i + 1) * g.in_sample()];
            let dys = &dy[i * g.out_sample()..(i + 1) * g.out_sample()];
            let dw = need_weight.then(|| {
                let mut scratch;
                let col: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    scratch = vec![T::zero(); patch * pixels];
                    im2col(xs, g, &mut scratch);
                    &scratch
                };
                let mut dw = vec![T::zero(); g.cout * patch];
                // dW = dY * col^T
                T::gemm(
                    g.cout,
                    pixels,
                    patch,
                    T::one(),
                    dys,
                    (pixels as isize, 1),
                    col,
                    (1, pixels as isize),
                    T::zero(),
                    &mut dw,
                    (patch as isize, 1),
                );
                dw
            });
            let dx = need_input.then(|| {
                // dcol = W^T * dY
                let mut dcol = vec![T::zero(); patch * pixels];
                T::gemm(
                    patch,
                    g.cout,
                    pixels,
                    T::one(),
                    weight,
                    (1, patch as isize),
                    dys,
                    (pixels as isize, 1),
                    T::zero(),
                    &mut dcol,
                    (pixels as isize, 1),
                );
                if g.is_pointwise() {
                    dcol
                } else {
                    let mut dx = vec![T::zero(); g.in_sample()];
                    col2im(&dcol, g, &mut dx);
                    dx
                }
            });
            (dx, dw)
        })
        .collect();

    let input = need_input.then(|| {
        let mut dx = Vec::with_capacity(g.n * g.in_sample());
        for (d, _) in &per_sample {
            dx.extend_from_slice(d.as_ref().expect("input grad computed"));
        }
        dx
    });
    let weight = need_weight.then(|| {
        let mut dw = vec![T::zero(); g.cout * patch];
        for (_, part) in &per_sample {
            for (acc, v) in dw.iter_mut().zip(part.as_ref().expect("weight grad computed")) {
                *acc = *acc + *v;
            }
        }
        dw
    });
    let bias = need_bias.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for i in 0..g.n {
            let dys = &dy[i * g.out_sample()..(i + 1) * g.out_sample()];
            for (o, plane) in dys.chunks(pixels).enumerate() {
                db[o] = db[o] + plane.iter().copied().sum::<T>();
            }
        }
        db
    });
    ConvGrads {
        input,
        weight,
        bias,
    }
}

/// Iterates over (plane, output y, output x) of a 2x2 stride-2 pooling.
fn for_each_window(planes: usize, h: usize, w: usize, mut f: impl FnMut(usize, [usize; 4])) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let top = (p * h + 2 * oy) * w + 2 * ox;
                let bottom = top + w;
                f(
                    (p * oh + oy) * ow + ox,
                    [top, top + 1, bottom, bottom + 1],
                );
            }
        }
    }
}

pub(crate) fn avg_pool_half<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); planes * (h / 2) * (w / 2)];
    for_each_window(planes, h, w, |o, cells| {
        out[o] = (x[cells[0]] + x[cells[1]] + x[cells[2]] + x[cells[3]]) * quarter;
    });
    out
}

pub(crate) fn avg_pool_half_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let quarter = T::of(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for_each_window(planes, h, w, |o, cells| {
        for c in cells {
            dx[c] = dy[o] * quarter;
        }
    });
    dx
}

/// Returns pooled values and the flat input index that won each window.
pub(crate) fn max_pool2<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let n_out = planes * (h / 2) * (w / 2);
    let mut out = vec![T::zero(); n_out];
    let mut arg = vec![0; n_out];
    for_each_window(planes, h, w, |o, cells| {
        // strict comparison keeps the first cell in row-major order on ties
        let mut best = cells[0];
        for &c in &cells[1..] {
            if x[c] > x[best] {
                best = c;
            }
        }
        out[o] = x[best];
        arg[o] = best;
    });
    (out, arg)
}

pub(crate) struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel biased mean and variance over batch and spatial axes.
pub(crate) fn bn_batch_stats<T: Scalar>(x: &[T], dims: [usize; 4], eps: f64) -> BnBatchStats<T> {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let count = T::of((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let planes = (0..n).map(|i| &x[(i * c + ch) * hw..(i * c + ch + 1) * hw]);
        let m = planes.clone().flatten().copied().sum::<T>() / count;
        let v = planes
            .flatten()
            .map(|&v| (v - m) * (v - m))
            .sum::<T>()
            / count;
        mean[ch] = m;
        var[ch] = v;
    }
    let inv_std = var.iter().map(|&v| (v + T::of(eps)).sqrt().recip()).collect();
    BnBatchStats { mean, var, inv_std }
}

/// `y = gamma * (x - mean) * inv_std + beta`; also returns the normalized input.
pub(crate) fn bn_apply<T: Scalar>(
    x: &[T],
    dims: [usize; 4],
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                let nrm = (x[j] - mean[ch]) * inv_std[ch];
                xhat[j] = nrm;
                y[j] = gamma[ch] * nrm + beta[ch];
            }
        }
    }
    (y, xhat)
}

/// Sums of `dy` and `dy * xhat` per channel.
pub(crate) fn bn_channel_sums<T: Scalar>(dy: &[T], xhat: &[T], dims: [usize; 4]) -> (Vec<T>, Vec<T>) {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                sum_dy[ch] = sum_dy[ch] + dy[j];
                sum_dy_xhat[ch] = sum_dy_xhat[ch] + dy[j] * xhat[j];
            }
        }
    }
    (sum_dy, sum_dy_xhat)
}
