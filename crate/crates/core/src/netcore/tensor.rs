//! Dense CHW feature maps and the convolution kernels behind the networks.
//!
//! Convolutions are stride 1 with "same" padding (`dilation * (k / 2)`), so
//! every convolution preserves spatial size. They run as im2col followed by
//! a matrix product.

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor buffer size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

/// `C = alpha * A * B + beta * C` on row/column strided f64 buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= (m.max(1) - 1) * rsa + (k.max(1) - 1) * csa + 1);
    debug_assert!(b.len() >= (k.max(1) - 1) * rsb + (n.max(1) - 1) * csb + 1);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of `a`, `b` and `c`
    // (checked above in debug builds), and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &Tensor3, kernel: usize, dilation: usize) -> Vec<f64> {
    let (h, w) = (x.height, x.width);
    let hw = h * w;
    let pad = (kernel / 2 * dilation) as isize;
    let mut col = vec![0.0; x.channels * kernel * kernel * hw];
    for ci in 0..x.channels {
        let src = x.channel(ci);
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = (ky * dilation) as isize - pad;
                let dx = (kx * dilation) as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    let sx0 = (x0 as isize + dx) as usize;
                    drow[x0..x1].copy_from_slice(&srow[sx0..sx0 + (x1 - x0)]);
                }
            }
        }
    }
    col
}

fn col2im_add(col: &[f64], dx: &mut Tensor3, kernel: usize, dilation: usize) {
    let (h, w) = (dx.height, dx.width);
    let hw = h * w;
    let pad = (kernel / 2 * dilation) as isize;
    for ci in 0..dx.channels {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let oy = (ky * dilation) as isize - pad;
                let ox = (kx * dilation) as isize - pad;
                let x0 = (-ox).max(0) as usize;
                let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ci * hw + sy as usize * w;
                    let sx0 = (x0 as isize + ox) as usize;
                    let drow = &mut dx.data[base + sx0..base + sx0 + (x1 - x0)];
                    for (d, s) in drow.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Same-padded convolution. `weight` is `[out, in, k, k]` row-major.
pub fn conv2d(
    x: &Tensor3,
    weight: &[f64],
    bias: &[f64],
    out_channels: usize,
    kernel: usize,
    dilation: usize,
) -> Tensor3 {
    let hw = x.plane();
    let kk = x.channels * kernel * kernel;
    assert_eq!(weight.len(), out_channels * kk, "conv weight size");
    let mut out = Tensor3::zeros(out_channels, x.height, x.width);
    for (co, &b) in bias.iter().enumerate() {
        out.data[co * hw..(co + 1) * hw].fill(b);
    }
    let owned;
    let col: &[f64] = if kernel == 1 {
        &x.data
    } else {
        owned = im2col(x, kernel, dilation);
        &owned
    };
    gemm(out_channels, kk, hw, weight, (kk, 1), col, (hw, 1), 1.0, &mut out.data);
    out
}

/// Backward of [`conv2d`]: accumulates into `grad_weight` / `grad_bias` and
/// returns the input gradient when `need_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &Tensor3,
    weight: &[f64],
    grad_out: &Tensor3,
    kernel: usize,
    dilation: usize,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    need_input: bool,
) -> Option<Tensor3> {
    let hw = x.plane();
    let kk = x.channels * kernel * kernel;
    let out_channels = grad_out.channels;
    for (co, gb) in grad_bias.iter_mut().enumerate() {
        *gb += grad_out.data[co * hw..(co + 1) * hw].iter().sum::<f64>();
    }
    let owned;
    let col: &[f64] = if kernel == 1 {
        &x.data
    } else {
        owned = im2col(x, kernel, dilation);
        &owned
    };
    // dW[co, j] += sum_p dY[co, p] * col[j, p]
    gemm(
        out_channels,
        hw,
        kk,
        &grad_out.data,
        (hw, 1),
        col,
        (1, hw),
        1.0,
        grad_weight,
    );
    if !need_input {
        return None;
    }
    let mut dcol = vec![0.0; kk * hw];
    // dcol = W^T dY
    gemm(
        kk,
        out_channels,
        hw,
        weight,
        (1, kk),
        &grad_out.data,
        (hw, 1),
        0.0,
        &mut dcol,
    );
    if kernel == 1 {
        return Some(Tensor3::from_vec(x.channels, x.height, x.width, dcol));
    }
    let mut dx = Tensor3::zeros(x.channels, x.height, x.width);
    col2im_add(&dcol, &mut dx, kernel, dilation);
    Some(dx)
}

pub fn relu_in_place(x: &mut Tensor3) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the rectified output was not positive.
pub fn relu_backward_in_place(output: &Tensor3, grad: &mut Tensor3) {
    for (g, &y) in grad.data.iter_mut().zip(&output.data) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling; returns the pooled map and the flat argmax per output.
pub fn max_pool2(x: &Tensor3) -> (Tensor3, Vec<u32>) {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut out = Tensor3::zeros(x.channels, h, w);
    let mut arg = vec![0u32; x.channels * h * w];
    for c in 0..x.channels {
        let src = x.channel(c);
        for y in 0..h {
            for xx in 0..w {
                let mut best = (2 * y) * x.width + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * y + dy) * x.width + 2 * xx + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = (c * h + y) * w + xx;
                out.data[o] = src[best];
                arg[o] = (c * x.plane() + best) as u32;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(grad_out: &Tensor3, arg: &[u32], input_shape: (usize, usize, usize)) -> Tensor3 {
    let mut dx = Tensor3::zeros(input_shape.0, input_shape.1, input_shape.2);
    for (g, &i) in grad_out.data.iter().zip(arg) {
        dx.data[i as usize] += g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor3) -> Tensor3 {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = Tensor3::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.channel(c);
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = src[(y / 2) * x.width + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor3) -> Tensor3 {
    let (h, w) = (grad_out.height / 2, grad_out.width / 2);
    let mut dx = Tensor3::zeros(grad_out.channels, h, w);
    for c in 0..grad_out.channels {
        for y in 0..grad_out.height {
            for xx in 0..grad_out.width {
                dx.data[(c * h + y / 2) * w + xx / 2] +=
                    grad_out.data[(c * grad_out.height + y) * grad_out.width + xx];
            }
        }
    }
    dx
}

pub fn concat(a: &Tensor3, b: &Tensor3) -> Tensor3 {
    assert!(a.height == b.height && a.width == b.width, "concat spatial size");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor3::from_vec(a.channels + b.channels, a.height, a.width, data)
}

pub fn split(grad: &Tensor3, first_channels: usize) -> (Tensor3, Tensor3) {
    let n = first_channels * grad.plane();
    (
        Tensor3::from_vec(first_channels, grad.height, grad.width, grad.data[..n].to_vec()),
        Tensor3::from_vec(
            grad.channels - first_channels,
            grad.height,
            grad.width,
            grad.data[n..].to_vec(),
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution used as the reference.
    fn conv_naive(x: &Tensor3, w: &[f64], b: &[f64], oc: usize, k: usize, d: usize) -> Tensor3 {
        let pad = (k / 2 * d) as isize;
        let mut out = Tensor3::zeros(oc, x.height, x.width);
        for o in 0..oc {
            for y in 0..x.height as isize {
                for xx in 0..x.width as isize {
                    let mut acc = b[o];
                    for ci in 0..x.channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y + (ky * d) as isize - pad;
                                let sx = xx + (kx * d) as isize - pad;
                                if sy < 0 || sx < 0 || sy >= x.height as isize || sx >= x.width as isize {
                                    continue;
                                }
                                acc += w[((o * x.channels + ci) * k + ky) * k + kx]
                                    * x.data[(ci * x.height + sy as usize) * x.width + sx as usize];
                            }
                        }
                    }
                    out.data[(o * x.height + y as usize) * x.width + xx as usize] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        for (k, d) in [(1, 1), (3, 1), (3, 2), (3, 4)] {
            let x = Tensor3::from_vec(3, 7, 9, pseudo(3 * 63, 1));
            let w = pseudo(4 * 3 * k * k, 2);
            let b = pseudo(4, 3);
            let fast = conv2d(&x, &w, &b, 4, k, d);
            let slow = conv_naive(&x, &w, &b, 4, k, d);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12, "k={k} d={d}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dY, conv(x)> is linear in x and w; check against finite differences
        let (k, d) = (3, 2);
        let x = Tensor3::from_vec(2, 6, 5, pseudo(60, 4));
        let w = pseudo(3 * 2 * 9, 5);
        let b = pseudo(3, 6);
        let gy = Tensor3::from_vec(3, 6, 5, pseudo(90, 7));
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; 3];
        let gx = conv2d_backward(&x, &w, &gy, k, d, &mut gw, &mut gb, true).unwrap();
        let f = |x: &Tensor3, w: &[f64]| -> f64 {
            conv2d(x, w, &b, 3, k, d)
                .data
                .iter()
                .zip(&gy.data)
                .map(|(a, g)| a * g)
                .sum()
        };
        let h = 1e-6;
        for i in [0, 7, 31, 53] {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            assert!(((f(&x, &wp) - f(&x, &wm)) / (2.0 * h) - gw[i]).abs() < 1e-6);
        }
        for i in [0, 11, 29, 59] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            assert!(((f(&xp, &w) - f(&xm, &w)) / (2.0 * h) - gx.data[i]).abs() < 1e-6);
        }
        assert!((gb[1] - gy.channel(1).iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn pool_and_upsample_round_trip_shapes() {
        let x = Tensor3::from_vec(2, 4, 4, pseudo(32, 9));
        let (p, arg) = max_pool2(&x);
        assert_eq!((p.channels, p.height, p.width), (2, 2, 2));
        for (o, &i) in arg.iter().enumerate() {
            assert_eq!(p.data[o], x.data[i as usize]);
        }
        let u = upsample2(&p);
        assert!(u.same_shape(&x));
        let back = upsample2_backward(&Tensor3::from_vec(2, 4, 4, vec![1.0; 32]));
        assert!(back.data.iter().all(|&v| v == 4.0));
    }
}
