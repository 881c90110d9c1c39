//! Patch unfolding for convolution as matrix multiplication.

use super::Real;

/// Geometry of a strided, zero-padded sliding window over one image.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source coordinate for output position `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * stride + k).checked_sub(pad).filter(|&p| p < extent)
    }
}

/// Unfolds `image` (C×H×W) into `cols` ((C·kh·kw) × (out_h·out_w)).
pub(crate) fn im2col<T: Real>(image: &[T], g: &Window, cols: &mut [T]) {
    debug_assert_eq!(cols.len(), g.rows() * g.cols());
    let plane = g.cols();
    for c in 0..g.channels {
        let src = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..g.out_h {
                    let out_row = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    match Window::source(oi, ki, g.stride, g.pad, g.height) {
                        None => out_row.fill(T::zero()),
                        Some(y) => {
                            let line = &src[y * g.width..(y + 1) * g.width];
                            for (oj, v) in out_row.iter_mut().enumerate() {
                                *v = match Window::source(oj, kj, g.stride, g.pad, g.width) {
                                    Some(x) => line[x],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Folds `cols` back onto `image`, summing overlapping taps (adjoint of [`im2col`]).
pub(crate) fn col2im<T: Real>(cols: &[T], g: &Window, image: &mut [T]) {
    debug_assert_eq!(cols.len(), g.rows() * g.cols());
    let plane = g.cols();
    for c in 0..g.channels {
        let dst = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..g.out_h {
                    let Some(y) = Window::source(oi, ki, g.stride, g.pad, g.height) else {
                        continue;
                    };
                    let line = &mut dst[y * g.width..(y + 1) * g.width];
                    for oj in 0..g.out_w {
                        if let Some(x) = Window::source(oj, kj, g.stride, g.pad, g.width) {
                            line[x] = line[x] + src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}
