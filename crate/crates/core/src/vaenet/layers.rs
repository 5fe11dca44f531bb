//! Single-sample layer kernels with hand-written backward passes.
//!
//! Feature maps are `channels x height x width`, row-major. Convolution
//! weights are `[out, in, k, k]`, transposed-convolution weights are
//! `[in, out, k, k]` and linear weights are `[out, in]`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Floating-point element type of the network (f32 for training, f64 for
/// gradient checks).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + AddAssign + MulAssign + Sum + Send + Sync + Debug + Default + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    LeakyRectifier { slope: f64 },
    Rectifier,
    Linear,
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRectifier { slope: 0.2 }
    }

    pub fn apply<T: Scalar>(self, x: &mut [T]) {
        match self {
            Activation::LeakyRectifier { slope } => {
                let s = T::of(slope);
                x.iter_mut().for_each(|v| {
                    if *v < T::zero() {
                        *v *= s
                    }
                });
            }
            Activation::Rectifier => x.iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v = T::zero()
                }
            }),
            Activation::Linear => {}
        }
    }

    /// Multiplies `grad` by the derivative at pre-activation `pre`.
    pub fn backward<T: Scalar>(self, pre: &[T], grad: &mut [T]) {
        match self {
            Activation::LeakyRectifier { slope } => {
                let s = T::of(slope);
                for (g, &p) in grad.iter_mut().zip(pre) {
                    if p < T::zero() {
                        *g *= s;
                    }
                }
            }
            Activation::Rectifier => {
                for (g, &p) in grad.iter_mut().zip(pre) {
                    if p <= T::zero() {
                        *g = T::zero();
                    }
                }
            }
            Activation::Linear => {}
        }
    }
}

/// Geometry of one (transposed) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Input spatial size.
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeom {
    pub fn conv_out(&self) -> (usize, usize) {
        (
            (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn deconv_out(&self) -> (usize, usize) {
        (
            (self.in_h - 1) * self.stride + self.kernel - 2 * self.pad,
            (self.in_w - 1) * self.stride + self.kernel - 2 * self.pad,
        )
    }

    pub fn weight_len(&self) -> usize {
        self.in_ch * self.out_ch * self.kernel * self.kernel
    }
}

/// Output positions `o` in `0..n_out` whose tap `o * stride + k - pad`
/// lands inside `0..n_in`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, k: usize, stride: usize, pad: usize) -> std::ops::Range<usize> {
    // o * stride + k >= pad  and  o * stride + k - pad < n_in
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi_excl = if n_in + pad > k {
        ((n_in + pad - k - 1) / stride + 1).min(n_out)
    } else {
        0
    };
    lo..hi_excl.max(lo)
}

/// Strided-correlation kernel shared by conv forward and deconv backward:
/// `small[o, y, x] += sum w(o, i, ky, kx) * big[i, y*s+ky-p, x*s+kx-p]`.
///
/// `widx(o, i)` gives the offset of the `k x k` kernel slice for that pair.
#[allow(clippy::too_many_arguments)]
fn gather<T: Scalar>(
    big: &[T],
    big_c: usize,
    big_h: usize,
    big_w: usize,
    small: &mut [T],
    small_c: usize,
    small_h: usize,
    small_w: usize,
    weight: &[T],
    widx: impl Fn(usize, usize) -> usize,
    k: usize,
    s: usize,
    p: usize,
) {
    for o in 0..small_c {
        let out_plane = &mut small[o * small_h * small_w..(o + 1) * small_h * small_w];
        for i in 0..big_c {
            let in_plane = &big[i * big_h * big_w..(i + 1) * big_h * big_w];
            let w0 = widx(o, i);
            for ky in 0..k {
                let ys = valid_range(small_h, big_h, ky, s, p);
                for kx in 0..k {
                    let wv = weight[w0 + ky * k + kx];
                    let xs = valid_range(small_w, big_w, kx, s, p);
                    for y in ys.clone() {
                        let iy = y * s + ky - p;
                        let in_row = &in_plane[iy * big_w..(iy + 1) * big_w];
                        let out_row = &mut out_plane[y * small_w..(y + 1) * small_w];
                        for x in xs.clone() {
                            out_row[x] += wv * in_row[x * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

/// Transpose of [`gather`]: `big[i, y*s+ky-p, x*s+kx-p] += w * small[o, y, x]`.
#[allow(clippy::too_many_arguments)]
fn scatter<T: Scalar>(
    small: &[T],
    small_c: usize,
    small_h: usize,
    small_w: usize,
    big: &mut [T],
    big_c: usize,
    big_h: usize,
    big_w: usize,
    weight: &[T],
    widx: impl Fn(usize, usize) -> usize,
    k: usize,
    s: usize,
    p: usize,
) {
    for i in 0..big_c {
        let big_plane = &mut big[i * big_h * big_w..(i + 1) * big_h * big_w];
        for o in 0..small_c {
            let small_plane = &small[o * small_h * small_w..(o + 1) * small_h * small_w];
            let w0 = widx(o, i);
            for ky in 0..k {
                let ys = valid_range(small_h, big_h, ky, s, p);
                for kx in 0..k {
                    let wv = weight[w0 + ky * k + kx];
                    let xs = valid_range(small_w, big_w, kx, s, p);
                    for y in ys.clone() {
                        let iy = y * s + ky - p;
                        let big_row = &mut big_plane[iy * big_w..(iy + 1) * big_w];
                        let small_row = &small_plane[y * small_w..(y + 1) * small_w];
                        for x in xs.clone() {
                            big_row[x * s + kx - p] += wv * small_row[x];
                        }
                    }
                }
            }
        }
    }
}

/// Weight gradient, `dw(o, i, ky, kx) += sum small[o,y,x] * big[i, y*s+ky-p, x*s+kx-p]`.
#[allow(clippy::too_many_arguments)]
fn weight_grad<T: Scalar>(
    small: &[T],
    small_c: usize,
    small_h: usize,
    small_w: usize,
    big: &[T],
    big_c: usize,
    big_h: usize,
    big_w: usize,
    dw: &mut [T],
    widx: impl Fn(usize, usize) -> usize,
    k: usize,
    s: usize,
    p: usize,
) {
    for o in 0..small_c {
        let small_plane = &small[o * small_h * small_w..(o + 1) * small_h * small_w];
        for i in 0..big_c {
            let big_plane = &big[i * big_h * big_w..(i + 1) * big_h * big_w];
            let w0 = widx(o, i);
            for ky in 0..k {
                let ys = valid_range(small_h, big_h, ky, s, p);
                for kx in 0..k {
                    let xs = valid_range(small_w, big_w, kx, s, p);
                    let mut acc = T::zero();
                    for y in ys.clone() {
                        let iy = y * s + ky - p;
                        let big_row = &big_plane[iy * big_w..(iy + 1) * big_w];
                        let small_row = &small_plane[y * small_w..(y + 1) * small_w];
                        for x in xs.clone() {
                            acc += small_row[x] * big_row[x * s + kx - p];
                        }
                    }
                    dw[w0 + ky * k + kx] += acc;
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    let plane = out.len() / bias.len();
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v = b);
    }
}

fn bias_grad<T: Scalar>(grad_out: &[T], db: &mut [T]) {
    let plane = grad_out.len() / db.len();
    for (chunk, d) in grad_out.chunks(plane).zip(db.iter_mut()) {
        *d += chunk.iter().copied().sum::<T>();
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let (oh, ow) = g.conv_out();
    let mut out = vec![T::zero(); g.out_ch * oh * ow];
    add_bias(&mut out, b);
    let (ic, k) = (g.in_ch, g.kernel);
    gather(x, ic, g.in_h, g.in_w, &mut out, g.out_ch, oh, ow, w, |o, i| (o * ic + i) * k * k, k, g.stride, g.pad);
    out
}

/// Returns the input gradient and accumulates weight/bias gradients.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    grad_out: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let (oh, ow) = g.conv_out();
    let (ic, k) = (g.in_ch, g.kernel);
    bias_grad(grad_out, db);
    weight_grad(grad_out, g.out_ch, oh, ow, x, ic, g.in_h, g.in_w, dw, |o, i| (o * ic + i) * k * k, k, g.stride, g.pad);
    let mut dx = vec![T::zero(); ic * g.in_h * g.in_w];
    scatter(grad_out, g.out_ch, oh, ow, &mut dx, ic, g.in_h, g.in_w, w, |o, i| (o * ic + i) * k * k, k, g.stride, g.pad);
    dx
}

pub fn deconv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let (oh, ow) = g.deconv_out();
    let mut out = vec![T::zero(); g.out_ch * oh * ow];
    add_bias(&mut out, b);
    let (oc, k) = (g.out_ch, g.kernel);
    // The input is the "small" side: out[o, y*s+ky-p, ...] += w[i, o] * x[i, y, x].
    scatter(x, g.in_ch, g.in_h, g.in_w, &mut out, oc, oh, ow, w, |i, o| (i * oc + o) * k * k, k, g.stride, g.pad);
    out
}

pub fn deconv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    grad_out: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let (oh, ow) = g.deconv_out();
    let (oc, k) = (g.out_ch, g.kernel);
    bias_grad(grad_out, db);
    weight_grad(x, g.in_ch, g.in_h, g.in_w, grad_out, oc, oh, ow, dw, |i, o| (i * oc + o) * k * k, k, g.stride, g.pad);
    let mut dx = vec![T::zero(); g.in_ch * g.in_h * g.in_w];
    gather(grad_out, oc, oh, ow, &mut dx, g.in_ch, g.in_h, g.in_w, w, |i, o| (i * oc + o) * k * k, k, g.stride, g.pad);
    dx
}

pub fn linear_forward<T: Scalar>(x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bo)| {
            let row = &w[o * n_in..(o + 1) * n_in];
            bo + row.iter().zip(x).map(|(&a, &v)| a * v).sum::<T>()
        })
        .collect()
}

pub fn linear_backward<T: Scalar>(x: &[T], w: &[T], grad_out: &[T], dw: &mut [T], db: &mut [T]) -> Vec<T> {
    let n_in = x.len();
    let mut dx = vec![T::zero(); n_in];
    for (o, &g) in grad_out.iter().enumerate() {
        db[o] += g;
        if g == T::zero() {
            continue;
        }
        let row = &w[o * n_in..(o + 1) * n_in];
        let drow = &mut dw[o * n_in..(o + 1) * n_in];
        for j in 0..n_in {
            drow[j] += g * x[j];
            dx[j] += g * row[j];
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Textbook convolution with explicit zero padding.
    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = g.conv_out();
        let mut out = vec![0.0; g.out_ch * oh * ow];
        for o in 0..g.out_ch {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[o];
                    for i in 0..g.in_ch {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (y * g.stride + ky) as isize - g.pad as isize;
                                let ix = (xo * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                    continue;
                                }
                                acc += w[((o * g.in_ch + i) * g.kernel + ky) * g.kernel + kx]
                                    * x[(i * g.in_h + iy as usize) * g.in_w + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + y) * ow + xo] = acc;
                }
            }
        }
        out
    }

    /// Transposed convolution by explicit scattering of every input sample.
    fn naive_deconv(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = g.deconv_out();
        let mut out = vec![0.0; g.out_ch * oh * ow];
        for o in 0..g.out_ch {
            out[o * oh * ow..(o + 1) * oh * ow].iter_mut().for_each(|v| *v = b[o]);
        }
        for i in 0..g.in_ch {
            for y in 0..g.in_h {
                for xi in 0..g.in_w {
                    for o in 0..g.out_ch {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let oy = (y * g.stride + ky) as isize - g.pad as isize;
                                let ox = (xi * g.stride + kx) as isize - g.pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                out[(o * oh + oy as usize) * ow + ox as usize] += x[(i * g.in_h + y) * g.in_w + xi]
                                    * w[((i * g.out_ch + o) * g.kernel + ky) * g.kernel + kx];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn geom(in_ch: usize, out_ch: usize, h: usize, w: usize) -> ConvGeom {
        ConvGeom { in_ch, out_ch, kernel: 4, stride: 2, pad: 1, in_h: h, in_w: w }
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in [geom(2, 3, 8, 8), geom(3, 2, 6, 10), geom(1, 1, 2, 2), ConvGeom { kernel: 3, stride: 1, ..geom(2, 2, 5, 5) }] {
            let x = rand_vec(g.in_ch * g.in_h * g.in_w, &mut rng);
            let w = rand_vec(g.weight_len(), &mut rng);
            let b = rand_vec(g.out_ch, &mut rng);
            let fast = conv2d_forward(&g, &x, &w, &b);
            let slow = naive_conv(&g, &x, &w, &b);
            for (a, c) in fast.iter().zip(&slow) {
                assert!((a - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deconv_matches_naive_and_doubles_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = geom(3, 2, 4, 5);
        assert_eq!(g.deconv_out(), (8, 10));
        let x = rand_vec(g.in_ch * g.in_h * g.in_w, &mut rng);
        let w = rand_vec(g.weight_len(), &mut rng);
        let b = rand_vec(g.out_ch, &mut rng);
        let fast = deconv2d_forward(&g, &x, &w, &b);
        let slow = naive_deconv(&g, &x, &w, &b);
        for (a, c) in fast.iter().zip(&slow) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    /// <conv(x), y> = <x, conv^T(y)>: backward is the adjoint of forward.
    #[test]
    fn backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = geom(3, 4, 8, 6);
        let x = rand_vec(g.in_ch * g.in_h * g.in_w, &mut rng);
        let w = rand_vec(g.weight_len(), &mut rng);
        let zero_b = vec![0.0; g.out_ch];
        let y = conv2d_forward(&g, &x, &w, &zero_b);
        let gy = rand_vec(y.len(), &mut rng);
        let (mut dw, mut db) = (vec![0.0; w.len()], vec![0.0; g.out_ch]);
        let gx = conv2d_backward(&g, &x, &w, &gy, &mut dw, &mut db);
        let lhs: f64 = y.iter().zip(&gy).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // <y, gy> is linear in w too, so <w, dw> reproduces it.
        let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);

        let d = geom(4, 3, 4, 3);
        let xd = rand_vec(d.in_ch * d.in_h * d.in_w, &mut rng);
        let wd = rand_vec(d.weight_len(), &mut rng);
        let yd = deconv2d_forward(&d, &xd, &wd, &vec![0.0; d.out_ch]);
        let gyd = rand_vec(yd.len(), &mut rng);
        let (mut dwd, mut dbd) = (vec![0.0; wd.len()], vec![0.0; d.out_ch]);
        let gxd = deconv2d_backward(&d, &xd, &wd, &gyd, &mut dwd, &mut dbd);
        let lhs: f64 = yd.iter().zip(&gyd).map(|(a, b)| a * b).sum();
        let rhs: f64 = xd.iter().zip(&gxd).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = wd.iter().zip(&dwd).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        assert!((lhs - rhs_w).abs() < 1e-10);
        let sum_g: f64 = gyd.iter().take(yd.len() / d.out_ch).sum();
        assert!((dbd[0] - sum_g).abs() < 1e-12);
    }

    #[test]
    fn linear_and_activations() {
        let y = linear_forward(&[1.0, 2.0], &[1.0, 0.0, 0.5, -1.0], &[0.1, 0.2]);
        assert_eq!(y, vec![1.1, -1.3]);
        let mut v = vec![-1.0, 2.0];
        Activation::leaky().apply(&mut v);
        assert_eq!(v, vec![-0.2, 2.0]);
        let mut v = vec![-1.0, 2.0];
        Activation::Rectifier.apply(&mut v);
        assert_eq!(v, vec![0.0, 2.0]);
        let mut g = vec![1.0, 1.0];
        Activation::leaky().backward(&[-1.0, 2.0], &mut g);
        assert_eq!(g, vec![0.2, 1.0]);
    }
}
