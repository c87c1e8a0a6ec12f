//! Raw numeric kernels behind the graph operations. No shape checking here;
//! callers in `graph` validate extents first.

use super::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let ph = height + 2 * pad;
        let pw = width + 2 * pad;
        if ph < kernel || pw < kernel || stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
        })
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `[C,H,W]` image into `[C·k·k, out_h·out_w]` patch columns.
pub(crate) fn im2col<T: Real>(x: &[T], g: &Conv2dGeom, cols: &mut [T]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch columns back, accumulating into `x`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &Conv2dGeom, x: &mut [T]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds a `[C,N]` ring signal into `[C·K, N]` with wrap-around:
/// `cols[c·K + t][i] = x[c][(i + t − r) mod N]`, `K = 2r + 1`.
pub(crate) fn ring_im2col<T: Real>(x: &[T], channels: usize, n: usize, ksize: usize, cols: &mut [T]) {
    let r = ksize / 2;
    for c in 0..channels {
        let src = &x[c * n..(c + 1) * n];
        for t in 0..ksize {
            let dst = &mut cols[(c * ksize + t) * n..(c * ksize + t + 1) * n];
            // shift s in [0, n): dst[i] = src[(i + s) % n]
            let s = (t + n - r % n) % n;
            let head = n - s;
            dst[..head].copy_from_slice(&src[s..]);
            dst[head..].copy_from_slice(&src[..s]);
        }
    }
}

pub(crate) fn ring_col2im<T: Real>(cols: &[T], channels: usize, n: usize, ksize: usize, x: &mut [T]) {
    let r = ksize / 2;
    for c in 0..channels {
        let dst = &mut x[c * n..(c + 1) * n];
        for t in 0..ksize {
            let src = &cols[(c * ksize + t) * n..(c * ksize + t + 1) * n];
            let s = (t + n - r % n) % n;
            for (i, &v) in src.iter().enumerate() {
                let j = i + s;
                dst[if j >= n { j - n } else { j }] += v;
            }
        }
    }
}

/// Bilinear tap: four flat texel indices (within one `[H,W]` plane) and weights.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTap<T> {
    pub index: [usize; 4],
    pub weight: [T; 4],
}

/// Border-clamped bilinear tap for a point in texel coordinates.
pub(crate) fn bilinear_tap<T: Real>(x: f64, y: f64, height: usize, width: usize) -> BilinearTap<T> {
    let clamp = |v: f64, hi: usize| {
        if v.is_nan() {
            0.0
        } else {
            v.max(0.0).min((hi - 1) as f64)
        }
    };
    let xc = clamp(x, width);
    let yc = clamp(y, height);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    BilinearTap {
        index: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
        weight: [
            T::of((1.0 - fx) * (1.0 - fy)),
            T::of(fx * (1.0 - fy)),
            T::of((1.0 - fx) * fy),
            T::of(fx * fy),
        ],
    }
}
