// im2col / col2im kernels for 3D (transposed) convolution over [B, C, D, H, W].

use super::Real;

pub fn conv_out_side(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

pub fn conv_transpose_out_side(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input == 0 {
        return None;
    }
    ((input - 1) * stride + kernel).checked_sub(2 * padding).filter(|&s| s > 0)
}

/// Geometry of a convolution viewed from the "image" side: a sliding kernel over
/// `image` (with `channels` channels) produces `out` positions.
#[derive(Clone, Copy, Debug)]
pub(super) struct Geometry {
    pub batch: usize,
    pub channels: usize,
    pub image: [usize; 3],
    pub out: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    pub fn image_len(&self) -> usize {
        self.image.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out.iter().product()
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel.pow(3)
    }

    pub fn cols(&self) -> usize {
        self.batch * self.out_len()
    }

    /// When the column matrix is just the image with channels moved to the front
    /// (pointwise kernels, or a kernel covering the whole unpadded image), the
    /// `(channels, positions)` of that view.
    fn dense_view(&self) -> Option<(usize, usize)> {
        if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
            Some((self.channels, self.image_len()))
        } else if self.padding == 0 && self.out == [1; 3] && self.image == [self.kernel; 3] {
            Some((self.rows(), 1))
        } else {
            None
        }
    }

    // For one kernel tap along one axis: list of (out index, image index).
    fn taps(&self, axis: usize, tap: usize) -> Vec<(usize, usize)> {
        (0..self.out[axis])
            .filter_map(|o| {
                let i = (o * self.stride + tap) as isize - self.padding as isize;
                (i >= 0 && (i as usize) < self.image[axis]).then_some((o, i as usize))
            })
            .collect()
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, &[(usize, usize)], &[(usize, usize)], &[(usize, usize)])) {
        let k = self.kernel;
        let taps: Vec<Vec<Vec<(usize, usize)>>> = (0..3).map(|a| (0..k).map(|t| self.taps(a, t)).collect()).collect();
        for c in 0..self.channels {
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = ((c * k + kd) * k + kh) * k + kw;
                        f(row, c, &taps[0][kd], &taps[1][kh], &taps[2][kw]);
                    }
                }
            }
        }
    }
}

/// image [B, C, image...] -> cols [C*k^3, B*P_out]
pub(super) fn im2col<T: Real>(image: &[T], g: &Geometry) -> Vec<T> {
    if let Some((c, p)) = g.dense_view() {
        return to_channel_major(image, g.batch, c, p);
    }
    let (il, ol) = (g.image_len(), g.out_len());
    let [_, ih, iw] = g.image;
    let [_, oh, ow] = g.out;
    let ncols = g.cols();
    let mut cols = vec![T::zero(); g.rows() * ncols];
    g.for_each_tap(|row, c, td, th, tw| {
        let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
        for b in 0..g.batch {
            let src = &image[(b * g.channels + c) * il..][..il];
            let dst = &mut dst_row[b * ol..(b + 1) * ol];
            for &(od, id) in td {
                for &(ohi, ihi) in th {
                    let drow = (od * oh + ohi) * ow;
                    let srow = (id * ih + ihi) * iw;
                    for &(owi, iwi) in tw {
                        dst[drow + owi] = src[srow + iwi];
                    }
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: accumulates cols [C*k^3, B*P_out] into image [B, C, image...].
pub(super) fn col2im<T: Real>(cols: &[T], g: &Geometry, image: &mut [T]) {
    if let Some((c, p)) = g.dense_view() {
        for b in 0..g.batch {
            for ch in 0..c {
                let src = &cols[ch * g.batch * p + b * p..][..p];
                image[(b * c + ch) * p..][..p].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        return;
    }
    let (il, ol) = (g.image_len(), g.out_len());
    let [_, ih, iw] = g.image;
    let [_, oh, ow] = g.out;
    let ncols = g.cols();
    g.for_each_tap(|row, c, td, th, tw| {
        let src_row = &cols[row * ncols..(row + 1) * ncols];
        for b in 0..g.batch {
            let dst = &mut image[(b * g.channels + c) * il..][..il];
            let src = &src_row[b * ol..(b + 1) * ol];
            for &(od, id) in td {
                for &(ohi, ihi) in th {
                    let srow = (od * oh + ohi) * ow;
                    let drow = (id * ih + ihi) * iw;
                    for &(owi, iwi) in tw {
                        dst[drow + iwi] += src[srow + owi];
                    }
                }
            }
        }
    });
}

/// [B, C, P] -> [C, B*P]
pub(super) fn to_channel_major<T: Real>(x: &[T], batch: usize, channels: usize, positions: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &x[(b * channels + c) * positions..][..positions];
            out[c * batch * positions + b * positions..][..positions].copy_from_slice(src);
        }
    }
    out
}

/// [C, B*P] -> [B, C, P]
pub(super) fn from_channel_major<T: Real>(m: &[T], batch: usize, channels: usize, positions: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &m[c * batch * positions + b * positions..][..positions];
            out[(b * channels + c) * positions..][..positions].copy_from_slice(src);
        }
    }
    out
}

pub(super) fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], batch: usize, positions: usize) {
    let channels = bias.len();
    for b in 0..batch {
        for (c, &bv) in bias.iter().enumerate() {
            out[(b * channels + c) * positions..][..positions].iter_mut().for_each(|v| *v += bv);
        }
    }
}

pub(super) fn channel_sums<T: Real>(x: &[T], batch: usize, channels: usize, positions: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, s) in sums.iter_mut().enumerate() {
            *s += x[(b * channels + c) * positions..][..positions].iter().copied().sum::<T>();
        }
    }
    sums
}

/// Cross-correlation. x: [B, Cin, image], w: [Cout, Cin*k^3] -> [B, Cout, out].
pub(super) fn conv_forward<T: Real>(x: &[T], g: &Geometry, w: &[T], bias: &[T]) -> Vec<T> {
    let cout = bias.len();
    let cols = im2col(x, g);
    let mut mat = vec![T::zero(); cout * g.cols()];
    T::gemm(cout, g.rows(), g.cols(), w, false, &cols, false, T::zero(), &mut mat);
    let mut out = from_channel_major(&mat, g.batch, cout, g.out_len());
    add_channel_bias(&mut out, bias, g.batch, g.out_len());
    out
}

pub(super) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub(super) fn conv_backward<T: Real>(
    x: &[T],
    g: &Geometry,
    w: &[T],
    cout: usize,
    dout: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let cols = im2col(x, g);
    let dmat = to_channel_major(dout, g.batch, cout, g.out_len());
    let mut dw = vec![T::zero(); cout * g.rows()];
    T::gemm(cout, g.cols(), g.rows(), &dmat, false, &cols, true, T::zero(), &mut dw);
    let db = channel_sums(dout, g.batch, cout, g.out_len());
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); g.rows() * g.cols()];
        T::gemm(g.rows(), cout, g.cols(), w, true, &dmat, false, T::zero(), &mut dcols);
        let mut dx = vec![T::zero(); x.len()];
        col2im(&dcols, g, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}

/// Transposed convolution. `g` describes the output as the image side
/// (channels = Cout) and the input as the out side. x: [B, Cin, in],
/// w: [Cin, Cout*k^3] -> [B, Cout, image].
pub(super) fn conv_transpose_forward<T: Real>(x: &[T], g: &Geometry, w: &[T], bias: &[T]) -> Vec<T> {
    let cin = x.len() / g.cols();
    let xmat = to_channel_major(x, g.batch, cin, g.out_len());
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    T::gemm(g.rows(), cin, g.cols(), w, true, &xmat, false, T::zero(), &mut cols);
    let mut out = vec![T::zero(); g.batch * g.channels * g.image_len()];
    col2im(&cols, g, &mut out);
    add_channel_bias(&mut out, bias, g.batch, g.image_len());
    out
}

pub(super) fn conv_transpose_backward<T: Real>(
    x: &[T],
    g: &Geometry,
    w: &[T],
    dout: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let cin = x.len() / g.cols();
    let dcols = im2col(dout, g);
    let xmat = to_channel_major(x, g.batch, cin, g.out_len());
    let mut dw = vec![T::zero(); cin * g.rows()];
    T::gemm(cin, g.cols(), g.rows(), &xmat, false, &dcols, true, T::zero(), &mut dw);
    let db = channel_sums(dout, g.batch, g.channels, g.image_len());
    let dx = need_dx.then(|| {
        let mut dxmat = vec![T::zero(); cin * g.cols()];
        T::gemm(cin, g.rows(), g.cols(), w, false, &dcols, false, T::zero(), &mut dxmat);
        from_channel_major(&dxmat, g.batch, cin, g.out_len())
    });
    ConvGrads { dx, dw, db }
}
