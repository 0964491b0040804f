//! Raw grouped 2-D convolution kernels over contiguous NCHW buffers.
//!
//! Every convolution in the crate (base layers, the grouped spatial branch and
//! the grouped pointwise branch of an EFT) funnels through these three
//! functions. Each group is lowered, over the whole batch at once, to one GEMM
//! via im2col.
//! Accumulation order is fixed, so results are bit-reproducible.

use matrixmultiply::dgemm;

/// Static shape of one grouped convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_per_group() * self.kernel_h * self.kernel_w
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_channels * self.in_h * self.in_w
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.out_h() * self.out_w()
    }

    fn patch_len(&self) -> usize {
        self.in_per_group() * self.kernel_h * self.kernel_w
    }
}

/// Row-major GEMM: `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices sized for the given (m, k, n) and strides;
    // every index touched by dgemm lies inside those slices.
    unsafe {
        dgemm(
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

/// Lowers group `g` of the whole batch into a `[patch, batch * hw_out]`
/// column matrix (column `n * hw_out + p` is output pixel `p` of sample `n`).
fn im2col(geo: &ConvGeometry, input: &[f64], group: usize, cols: &mut [f64]) {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let hw_out = oh * ow;
    let bhw = geo.batch * hw_out;
    let cg = geo.in_per_group();
    let plane = geo.in_h * geo.in_w;
    let mut row = 0;
    for c in 0..cg {
        for ky in 0..geo.kernel_h {
            for kx in 0..geo.kernel_w {
                for n in 0..geo.batch {
                    let base = (n * geo.in_channels + group * cg + c) * plane;
                    let chan = &input[base..base + plane];
                    let dst = &mut cols[row * bhw + n * hw_out..row * bhw + (n + 1) * hw_out];
                    for oy in 0..oh {
                        let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                        let inside_y = iy >= 0 && (iy as usize) < geo.in_h;
                        for ox in 0..ow {
                            let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                            dst[oy * ow + ox] = if inside_y && ix >= 0 && (ix as usize) < geo.in_w {
                                chan[iy as usize * geo.in_w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `grad_input`.
fn col2im_add(geo: &ConvGeometry, cols: &[f64], group: usize, grad_input: &mut [f64]) {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let hw_out = oh * ow;
    let bhw = geo.batch * hw_out;
    let cg = geo.in_per_group();
    let plane = geo.in_h * geo.in_w;
    let mut row = 0;
    for c in 0..cg {
        for ky in 0..geo.kernel_h {
            for kx in 0..geo.kernel_w {
                for n in 0..geo.batch {
                    let base = (n * geo.in_channels + group * cg + c) * plane;
                    let chan = &mut grad_input[base..base + plane];
                    let src = &cols[row * bhw + n * hw_out..row * bhw + (n + 1) * hw_out];
                    for oy in 0..oh {
                        let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                        if iy < 0 || iy as usize >= geo.in_h {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                            if ix >= 0 && (ix as usize) < geo.in_w {
                                chan[iy as usize * geo.in_w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Copies group `g` of an NCHW output-shaped buffer into `[og, batch * hw_out]`.
fn gather_output(geo: &ConvGeometry, data: &[f64], group: usize, dst: &mut [f64]) {
    let hw_out = geo.out_h() * geo.out_w();
    let bhw = geo.batch * hw_out;
    let og = geo.out_per_group();
    for o in 0..og {
        for n in 0..geo.batch {
            let src = (n * geo.out_channels + group * og + o) * hw_out;
            dst[o * bhw + n * hw_out..o * bhw + (n + 1) * hw_out].copy_from_slice(&data[src..src + hw_out]);
        }
    }
}

/// Inverse of [`gather_output`].
fn scatter_output(geo: &ConvGeometry, src: &[f64], group: usize, data: &mut [f64]) {
    let hw_out = geo.out_h() * geo.out_w();
    let bhw = geo.batch * hw_out;
    let og = geo.out_per_group();
    for o in 0..og {
        for n in 0..geo.batch {
            let dst = (n * geo.out_channels + group * og + o) * hw_out;
            data[dst..dst + hw_out].copy_from_slice(&src[o * bhw + n * hw_out..o * bhw + (n + 1) * hw_out]);
        }
    }
}

/// `output = conv(input, weight)`; `output` is overwritten.
pub fn conv2d_forward(geo: &ConvGeometry, input: &[f64], weight: &[f64], output: &mut [f64]) {
    debug_assert_eq!(input.len(), geo.input_len());
    debug_assert_eq!(weight.len(), geo.weight_len());
    debug_assert_eq!(output.len(), geo.output_len());
    let bhw = geo.batch * geo.out_h() * geo.out_w();
    let (og, patch) = (geo.out_per_group(), geo.patch_len());
    let mut cols = vec![0.0; patch * bhw];
    let mut out = vec![0.0; og * bhw];
    for g in 0..geo.groups {
        let w = &weight[g * og * patch..(g + 1) * og * patch];
        im2col(geo, input, g, &mut cols);
        gemm(og, patch, bhw, w, (patch as isize, 1), &cols, (bhw as isize, 1), 0.0, &mut out);
        scatter_output(geo, &out, g, output);
    }
}

/// `grad_input += conv_transpose(grad_output, weight)`.
pub fn conv2d_backward_input(geo: &ConvGeometry, grad_output: &[f64], weight: &[f64], grad_input: &mut [f64]) {
    let bhw = geo.batch * geo.out_h() * geo.out_w();
    let (og, patch) = (geo.out_per_group(), geo.patch_len());
    let mut cols = vec![0.0; patch * bhw];
    let mut go = vec![0.0; og * bhw];
    for g in 0..geo.groups {
        let w = &weight[g * og * patch..(g + 1) * og * patch];
        gather_output(geo, grad_output, g, &mut go);
        gemm(patch, og, bhw, w, (1, patch as isize), &go, (bhw as isize, 1), 0.0, &mut cols);
        col2im_add(geo, &cols, g, grad_input);
    }
}

/// `grad_weight += correlation(input, grad_output)` summed over the batch.
pub fn conv2d_backward_weight(geo: &ConvGeometry, input: &[f64], grad_output: &[f64], grad_weight: &mut [f64]) {
    let bhw = geo.batch * geo.out_h() * geo.out_w();
    let (og, patch) = (geo.out_per_group(), geo.patch_len());
    let mut cols = vec![0.0; patch * bhw];
    let mut go = vec![0.0; og * bhw];
    for g in 0..geo.groups {
        im2col(geo, input, g, &mut cols);
        gather_output(geo, grad_output, g, &mut go);
        let gw = &mut grad_weight[g * og * patch..(g + 1) * og * patch];
        gemm(og, bhw, patch, &go, (bhw as isize, 1), &cols, (1, bhw as isize), 1.0, gw);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(geo: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (oh, ow) = (geo.out_h(), geo.out_w());
        let (cg, og) = (geo.in_per_group(), geo.out_per_group());
        let mut out = vec![0.0; geo.output_len()];
        for n in 0..geo.batch {
            for o in 0..geo.out_channels {
                let g = o / og;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..cg {
                            for ky in 0..geo.kernel_h {
                                for kx in 0..geo.kernel_w {
                                    let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                                    let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                                    if iy < 0 || ix < 0 || iy as usize >= geo.in_h || ix as usize >= geo.in_w {
                                        continue;
                                    }
                                    let xi = ((n * geo.in_channels + g * cg + c) * geo.in_h + iy as usize) * geo.in_w + ix as usize;
                                    let wi = ((o * cg + c) * geo.kernel_h + ky) * geo.kernel_w + kx;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        out[((n * geo.out_channels + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect()
    }

    #[test]
    fn strided_grouped_conv_matches_naive_loops() {
        let geo = ConvGeometry {
            batch: 2,
            in_channels: 4,
            in_h: 5,
            in_w: 6,
            out_channels: 6,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
            padding: 1,
            groups: 2,
        };
        let x = ramp(geo.input_len(), 0.1);
        let w = ramp(geo.weight_len(), 0.05);
        let mut out = vec![0.0; geo.output_len()];
        conv2d_forward(&geo, &x, &w, &mut out);
        let expected = naive(&geo, &x, &w);
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x, w), g> must equal <x, dX> and <w, dW>.
        let geo = ConvGeometry {
            batch: 2,
            in_channels: 4,
            in_h: 4,
            in_w: 4,
            out_channels: 4,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            padding: 0,
            groups: 2,
        };
        for geo in [geo, ConvGeometry { kernel_h: 3, kernel_w: 3, padding: 1, ..geo }] {
            let x = ramp(geo.input_len(), 0.1);
            let w = ramp(geo.weight_len(), 0.07);
            let g = ramp(geo.output_len(), 0.03);
            let mut y = vec![0.0; geo.output_len()];
            conv2d_forward(&geo, &x, &w, &mut y);
            let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
            let mut dx = vec![0.0; geo.input_len()];
            conv2d_backward_input(&geo, &g, &w, &mut dx);
            let mut dw = vec![0.0; geo.weight_len()];
            conv2d_backward_weight(&geo, &x, &g, &mut dw);
            let via_x: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            let via_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10, "{lhs} vs {via_x}");
            assert!((lhs - via_w).abs() < 1e-10, "{lhs} vs {via_w}");
        }
    }
}
