//! Convolution kernels shared by the forward and backward passes.
//!
//! Everything goes through im2col plus a single-threaded GEMM, so results are
//! bit-reproducible for identical inputs. A transposed convolution is the
//! adjoint of a convolution, which lets `conv_backward_input` double as the
//! deconvolution forward pass.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `C[m×n] = beta*C + A[m×k]·B[k×n]`, with A/B optionally transposed views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover the strided extents described above.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
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

/// Cross-correlation of `x: N×C×H×W` with `w: O×C×K×K`, plus optional bias.
pub fn conv_forward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    w: &[f64],
    out_channels: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut buf = vec![0.0; rows * cols];
    let mut y = vec![0.0; batch * out_channels * cols];
    for n in 0..batch {
        im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], g, &mut buf);
        let out = &mut y[n * out_channels * cols..(n + 1) * out_channels * cols];
        gemm(out_channels, rows, cols, w, false, &buf, false, 0.0, out);
        if let Some(b) = bias {
            for (o, chunk) in out.chunks_mut(cols).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    }
    y
}

/// Gradient w.r.t. the convolution input: `gx = Wᵀ ⋆ gy` scattered back.
pub fn conv_backward_input(
    gy: &[f64],
    batch: usize,
    g: &ConvGeom,
    w: &[f64],
    out_channels: usize,
) -> Vec<f64> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut buf = vec![0.0; rows * cols];
    let mut gx = vec![0.0; batch * g.in_len()];
    for n in 0..batch {
        let gyn = &gy[n * out_channels * cols..(n + 1) * out_channels * cols];
        gemm(rows, out_channels, cols, w, true, gyn, false, 0.0, &mut buf);
        col2im(&buf, g, &mut gx[n * g.in_len()..(n + 1) * g.in_len()]);
    }
    gx
}

/// Gradient w.r.t. the weights, summed over the batch.
pub fn conv_backward_weight(
    x: &[f64],
    gy: &[f64],
    batch: usize,
    g: &ConvGeom,
    out_channels: usize,
) -> Vec<f64> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut buf = vec![0.0; rows * cols];
    let mut gw = vec![0.0; out_channels * rows];
    for n in 0..batch {
        im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], g, &mut buf);
        let gyn = &gy[n * out_channels * cols..(n + 1) * out_channels * cols];
        let beta = if n == 0 { 0.0 } else { 1.0 };
        gemm(out_channels, cols, rows, gyn, false, &buf, true, beta, &mut gw);
    }
    gw
}

pub fn bias_grad(gy: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut gb = vec![0.0; channels];
    for n in 0..batch {
        for (c, acc) in gb.iter_mut().enumerate() {
            let start = (n * channels + c) * plane;
            *acc += gy[start..start + plane].iter().sum::<f64>();
        }
    }
    gb
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], g: &ConvGeom, w: &[f64], o: usize) -> Vec<f64> {
        let (ho, wo) = (g.out_height(), g.out_width());
        let mut y = vec![0.0; o * ho * wo];
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..g.channels {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= g.height as isize
                                    || ix >= g.width as isize
                                {
                                    continue;
                                }
                                acc += x[(c * g.height + iy as usize) * g.width + ix as usize]
                                    * w[((oc * g.channels + c) * g.kernel + ky) * g.kernel + kx];
                            }
                        }
                    }
                    y[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn gemm_path_matches_direct_loops() {
        let g = ConvGeom {
            channels: 3,
            height: 7,
            width: 6,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..g.in_len()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..4 * g.rows()).map(|i| ((i * 13) % 7) as f64 * 0.25).collect();
        let fast = conv_forward(&x, 1, &g, &w, 4, None);
        let slow = naive_conv(&x, &g, &w, 4);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_input_is_adjoint_of_forward() {
        // <conv(x), y> == <x, convᵀ(y)>
        let g = ConvGeom {
            channels: 2,
            height: 8,
            width: 8,
            kernel: 5,
            stride: 2,
            pad: 2,
        };
        let x: Vec<f64> = (0..g.in_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..3 * g.rows()).map(|i| (i as f64 * 0.11).cos()).collect();
        let gy: Vec<f64> = (0..3 * g.cols()).map(|i| (i as f64 * 0.23).sin()).collect();
        let y = conv_forward(&x, 1, &g, &w, 3, None);
        let gx = conv_backward_input(&gy, 1, &g, &w, 3);
        let lhs: f64 = y.iter().zip(&gy).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
