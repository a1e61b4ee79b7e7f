//! im2col-based 2D convolution kernels over a single batch item.

use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Unrolls one image `[C, H, W]` into `[C*k*k, Ho*Wo]`; padded taps read 0.
    pub fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let y = (oy * self.stride + ki) as isize - pad;
                        let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                        if y < 0 || y >= self.height as isize {
                            out_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[y as usize * self.width..(y as usize + 1) * self.width];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let x = (ox * self.stride + kj) as isize - pad;
                            *v = if x < 0 || x >= self.width as isize {
                                T::zero()
                            } else {
                                src[x as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `[C*k*k, Ho*Wo]` columns back into an image `[C, H, W]`.
    pub fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let y = (oy * self.stride + ki) as isize - pad;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * self.width..(y as usize + 1) * self.width];
                        for ox in 0..wo {
                            let x = (ox * self.stride + kj) as isize - pad;
                            if x >= 0 && x < self.width as isize {
                                dst[x as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// `out[Co, Ho*Wo] = weight[Co, C*k*k] * cols (+ bias)`.
    pub fn forward_item<T: Scalar>(
        &self,
        weight: &[T],
        bias: Option<&[T]>,
        cols: &[T],
        out: &mut [T],
    ) {
        let (m, kk, n) = (self.out_channels, self.patch_len(), self.out_pixels());
        match bias {
            Some(b) => {
                for (o, row) in out.chunks_mut(n).enumerate() {
                    row.iter_mut().for_each(|v| *v = b[o]);
                }
            }
            None => out.iter_mut().for_each(|v| *v = T::zero()),
        }
        T::gemm(
            m,
            kk,
            n,
            weight,
            (kk as isize, 1),
            cols,
            (n as isize, 1),
            T::one(),
            out,
            (n as isize, 1),
        );
    }

    /// `weight_grad += out_grad * cols^T`.
    pub fn weight_grad_item<T: Scalar>(&self, out_grad: &[T], cols: &[T], weight_grad: &mut [T]) {
        let (m, kk, n) = (self.out_channels, self.patch_len(), self.out_pixels());
        T::gemm(
            m,
            n,
            kk,
            out_grad,
            (n as isize, 1),
            cols,
            (1, n as isize),
            T::one(),
            weight_grad,
            (kk as isize, 1),
        );
    }

    /// `col_grad = weight^T * out_grad`.
    pub fn col_grad_item<T: Scalar>(&self, weight: &[T], out_grad: &[T], col_grad: &mut [T]) {
        let (m, kk, n) = (self.out_channels, self.patch_len(), self.out_pixels());
        T::gemm(
            kk,
            m,
            n,
            weight,
            (1, kk as isize),
            out_grad,
            (n as isize, 1),
            T::zero(),
            col_grad,
            (n as isize, 1),
        );
    }
}
