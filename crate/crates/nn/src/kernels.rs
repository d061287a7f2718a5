//! Forward and backward kernels over NHWC tensors.

use crate::gemm::{gemm, Layout};
use crate::tensor::Tensor;

/// Explicit spatial zero padding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    pub fn uniform(p: usize) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// TensorFlow `same` padding: output size is `ceil(in / stride)`, any odd
    /// remainder goes to the bottom/right.
    pub fn same(in_hw: (usize, usize), kernel: (usize, usize), stride: (usize, usize)) -> Self {
        let total = |input: usize, k: usize, s: usize| {
            let out = input.div_ceil(s);
            ((out - 1) * s + k).saturating_sub(input)
        };
        let th = total(in_hw.0, kernel.0, stride.0);
        let tw = total(in_hw.1, kernel.1, stride.1);
        Padding {
            top: th / 2,
            bottom: th - th / 2,
            left: tw / 2,
            right: tw - tw / 2,
        }
    }

    pub fn is_none(&self) -> bool {
        *self == Padding::NONE
    }
}

/// Geometry shared by convolutions and pooling windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: Padding,
}

impl Window {
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + self.pad.top + self.pad.bottom;
        let pw = w + self.pad.left + self.pad.right;
        if ph < self.kernel.0 || pw < self.kernel.1 || self.stride.0 == 0 || self.stride.1 == 0 {
            return None;
        }
        Some((
            (ph - self.kernel.0) / self.stride.0 + 1,
            (pw - self.kernel.1) / self.stride.1 + 1,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.pad.is_none()
    }
}

/// Upper bound, in floats, on the im2col scratch buffer.
const COL_BUDGET: usize = 1 << 22;

fn images_per_chunk(rows_per_image: usize, k: usize, n: usize) -> usize {
    (COL_BUDGET / (rows_per_image * k).max(1)).clamp(1, n.max(1))
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    (h, w, cin): (usize, usize, usize),
    win: &Window,
    (oh, ow): (usize, usize),
    first: usize,
    count: usize,
    col: &mut [f32],
) {
    let (kh, kw) = win.kernel;
    let k = kh * kw * cin;
    let img_len = h * w * cin;
    for img in 0..count {
        let xi = &x[(first + img) * img_len..(first + img + 1) * img_len];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (img * oh + oy) * ow + ox;
                let dst = &mut col[row * k..(row + 1) * k];
                for ky in 0..kh {
                    let iy = (oy * win.stride.0 + ky) as isize - win.pad.top as isize;
                    for kx in 0..kw {
                        let ix = (ox * win.stride.1 + kx) as isize - win.pad.left as isize;
                        let d = &mut dst[(ky * kw + kx) * cin..(ky * kw + kx + 1) * cin];
                        if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                            d.iter_mut().for_each(|v| *v = 0.0);
                        } else {
                            let s = (iy as usize * w + ix as usize) * cin;
                            d.copy_from_slice(&xi[s..s + cin]);
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f32],
    (h, w, cin): (usize, usize, usize),
    win: &Window,
    (oh, ow): (usize, usize),
    first: usize,
    count: usize,
    dx: &mut [f32],
) {
    let (kh, kw) = win.kernel;
    let k = kh * kw * cin;
    let img_len = h * w * cin;
    for img in 0..count {
        let dxi = &mut dx[(first + img) * img_len..(first + img + 1) * img_len];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (img * oh + oy) * ow + ox;
                let src = &col[row * k..(row + 1) * k];
                for ky in 0..kh {
                    let iy = (oy * win.stride.0 + ky) as isize - win.pad.top as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * win.stride.1 + kx) as isize - win.pad.left as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let s = &src[(ky * kw + kx) * cin..(ky * kw + kx + 1) * cin];
                        let d = (iy as usize * w + ix as usize) * cin;
                        for (a, b) in dxi[d..d + cin].iter_mut().zip(s) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
}

/// Dense convolution. `kernel` is `[kh, kw, cin, cout]`.
pub fn conv2d(x: &Tensor, kernel: &[f32], bias: Option<&[f32]>, win: &Window, cout: usize) -> Tensor {
    let (n, h, w, cin) = x.dims4();
    let (oh, ow) = win.output_hw(h, w).expect("conv window larger than input");
    let k = win.kernel.0 * win.kernel.1 * cin;
    let mut out = Tensor::zeros(&[n, oh, ow, cout]);
    if win.is_pointwise() {
        gemm(n * h * w, cin, cout, x.data(), Layout::Normal, kernel, Layout::Normal, out.data_mut(), 0.0);
    } else {
        let rows_img = oh * ow;
        let chunk = images_per_chunk(rows_img, k, n);
        let mut col = vec![0.0; chunk * rows_img * k];
        let mut first = 0;
        while first < n {
            let count = chunk.min(n - first);
            let rows = count * rows_img;
            im2col(x.data(), (h, w, cin), win, (oh, ow), first, count, &mut col);
            let dst = &mut out.data_mut()[first * rows_img * cout..(first * rows_img + rows) * cout];
            gemm(rows, k, cout, &col, Layout::Normal, kernel, Layout::Normal, dst, 0.0);
            first += count;
        }
    }
    if let Some(b) = bias {
        for px in out.data_mut().chunks_exact_mut(cout) {
            for (v, bb) in px.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    out
}

/// Backward pass of [`conv2d`]. Accumulates into `dkernel`/`dbias` when given and
/// returns the input gradient when `want_dx`.
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &[f32],
    win: &Window,
    dy: &Tensor,
    dkernel: Option<&mut [f32]>,
    dbias: Option<&mut [f32]>,
    want_dx: bool,
) -> Option<Tensor> {
    let (n, h, w, cin) = x.dims4();
    let (_, oh, ow, cout) = dy.dims4();
    let k = win.kernel.0 * win.kernel.1 * cin;
    if let Some(db) = dbias {
        for px in dy.data().chunks_exact(cout) {
            for (a, b) in db.iter_mut().zip(px) {
                *a += b;
            }
        }
    }
    if win.is_pointwise() {
        let rows = n * h * w;
        if let Some(dk) = dkernel {
            gemm(cin, rows, cout, x.data(), Layout::Transposed, dy.data(), Layout::Normal, dk, 1.0);
        }
        return want_dx.then(|| {
            let mut dx = Tensor::zeros(x.shape());
            gemm(rows, cout, cin, dy.data(), Layout::Normal, kernel, Layout::Transposed, dx.data_mut(), 0.0);
            dx
        });
    }
    let rows_img = oh * ow;
    let chunk = images_per_chunk(rows_img, k, n);
    let mut col = vec![0.0; chunk * rows_img * k];
    let mut dcol = if want_dx { vec![0.0; chunk * rows_img * k] } else { Vec::new() };
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut dkernel = dkernel;
    let mut first = 0;
    while first < n {
        let count = chunk.min(n - first);
        let rows = count * rows_img;
        let dyc = &dy.data()[first * rows_img * cout..(first * rows_img + rows) * cout];
        if let Some(dk) = dkernel.as_deref_mut() {
            im2col(x.data(), (h, w, cin), win, (oh, ow), first, count, &mut col);
            gemm(k, rows, cout, &col, Layout::Transposed, dyc, Layout::Normal, dk, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, cout, k, dyc, Layout::Normal, kernel, Layout::Transposed, &mut dcol, 0.0);
            col2im(&dcol, (h, w, cin), win, (oh, ow), first, count, dx.data_mut());
        }
        first += count;
    }
    dx
}

/// Depthwise convolution with depth multiplier 1. `kernel` is `[kh, kw, c, 1]`.
pub fn depthwise_conv2d(x: &Tensor, kernel: &[f32], bias: Option<&[f32]>, win: &Window) -> Tensor {
    let (n, h, w, c) = x.dims4();
    let (oh, ow) = win.output_hw(h, w).expect("depthwise window larger than input");
    let (kh, kw) = win.kernel;
    let mut out = Tensor::zeros(&[n, oh, ow, c]);
    let xd = x.data();
    let od = out.data_mut();
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((img * oh + oy) * ow + ox) * c;
                let dst = &mut od[o..o + c];
                if let Some(b) = bias {
                    dst.copy_from_slice(b);
                }
                for ky in 0..kh {
                    let iy = (oy * win.stride.0 + ky) as isize - win.pad.top as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * win.stride.1 + kx) as isize - win.pad.left as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let s = ((img * h + iy as usize) * w + ix as usize) * c;
                        let kk = &kernel[(ky * kw + kx) * c..(ky * kw + kx + 1) * c];
                        for ((d, xv), kv) in dst.iter_mut().zip(&xd[s..s + c]).zip(kk) {
                            *d += xv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_conv2d_backward(
    x: &Tensor,
    kernel: &[f32],
    win: &Window,
    dy: &Tensor,
    mut dkernel: Option<&mut [f32]>,
    dbias: Option<&mut [f32]>,
    want_dx: bool,
) -> Option<Tensor> {
    let (n, h, w, c) = x.dims4();
    let (_, oh, ow, _) = dy.dims4();
    let (kh, kw) = win.kernel;
    if let Some(db) = dbias {
        for px in dy.data().chunks_exact(c) {
            for (a, b) in db.iter_mut().zip(px) {
                *a += b;
            }
        }
    }
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let xd = x.data();
    let dyd = dy.data();
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((img * oh + oy) * ow + ox) * c;
                let g = &dyd[o..o + c];
                for ky in 0..kh {
                    let iy = (oy * win.stride.0 + ky) as isize - win.pad.top as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * win.stride.1 + kx) as isize - win.pad.left as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let s = ((img * h + iy as usize) * w + ix as usize) * c;
                        let kofs = (ky * kw + kx) * c;
                        if let Some(dk) = dkernel.as_deref_mut() {
                            for ((d, xv), gv) in dk[kofs..kofs + c].iter_mut().zip(&xd[s..s + c]).zip(g) {
                                *d += xv * gv;
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let kk = &kernel[kofs..kofs + c];
                            for ((d, kv), gv) in dx.data_mut()[s..s + c].iter_mut().zip(kk).zip(g) {
                                *d += kv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// How a pooling window treats positions that fall in the padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadFill {
    /// Padding cells hold zeros and take part in the window (explicit zero padding layer).
    Zero,
    /// Padding cells are skipped (TensorFlow `same` pooling).
    Ignore,
}

/// Iterate the input offsets covered by one pooling window. `None` marks a zero-filled pad cell.
fn for_window(
    (h, w, c): (usize, usize, usize),
    win: &Window,
    fill: PadFill,
    img: usize,
    oy: usize,
    ox: usize,
    mut f: impl FnMut(Option<usize>),
) {
    for ky in 0..win.kernel.0 {
        let iy = (oy * win.stride.0 + ky) as isize - win.pad.top as isize;
        for kx in 0..win.kernel.1 {
            let ix = (ox * win.stride.1 + kx) as isize - win.pad.left as isize;
            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                if fill == PadFill::Zero {
                    f(None);
                }
            } else {
                f(Some(((img * h + iy as usize) * w + ix as usize) * c));
            }
        }
    }
}

pub fn max_pool(x: &Tensor, win: &Window, fill: PadFill) -> Tensor {
    let (n, h, w, c) = x.dims4();
    let (oh, ow) = win.output_hw(h, w).expect("pool window larger than input");
    let mut out = Tensor::zeros(&[n, oh, ow, c]);
    let xd = x.data();
    let od = out.data_mut();
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((img * oh + oy) * ow + ox) * c;
                let dst = &mut od[o..o + c];
                dst.iter_mut().for_each(|v| *v = f32::NEG_INFINITY);
                for_window((h, w, c), win, fill, img, oy, ox, |s| match s {
                    Some(s) => {
                        for (d, v) in dst.iter_mut().zip(&xd[s..s + c]) {
                            if *v > *d {
                                *d = *v;
                            }
                        }
                    }
                    None => {
                        for d in dst.iter_mut() {
                            if 0.0 > *d {
                                *d = 0.0;
                            }
                        }
                    }
                });
            }
        }
    }
    out
}

/// Gradient routes to the first maximal element of each window, matching the forward scan order.
pub fn max_pool_backward(x: &Tensor, win: &Window, fill: PadFill, dy: &Tensor) -> Tensor {
    let (n, h, w, c) = x.dims4();
    let (_, oh, ow, _) = dy.dims4();
    let mut dx = Tensor::zeros(x.shape());
    let xd = x.data();
    let mut best = vec![0.0f32; c];
    let mut arg: Vec<Option<usize>> = vec![None; c];
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                best.iter_mut().for_each(|v| *v = f32::NEG_INFINITY);
                arg.iter_mut().for_each(|a| *a = None);
                let mut seen = vec![false; c];
                for_window((h, w, c), win, fill, img, oy, ox, |s| {
                    for ch in 0..c {
                        let (v, at) = match s {
                            Some(s) => (xd[s + ch], Some(s + ch)),
                            None => (0.0, None),
                        };
                        if !seen[ch] || v > best[ch] {
                            seen[ch] = true;
                            best[ch] = v;
                            arg[ch] = at;
                        }
                    }
                });
                let o = ((img * oh + oy) * ow + ox) * c;
                for (ch, a) in arg.iter().enumerate().take(c) {
                    if let Some(i) = *a {
                        dx.data_mut()[i] += dy.data()[o + ch];
                    }
                }
            }
        }
    }
    dx
}

pub fn avg_pool(x: &Tensor, win: &Window, fill: PadFill) -> Tensor {
    let (n, h, w, c) = x.dims4();
    let (oh, ow) = win.output_hw(h, w).expect("pool window larger than input");
    let mut out = Tensor::zeros(&[n, oh, ow, c]);
    let xd = x.data();
    let od = out.data_mut();
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((img * oh + oy) * ow + ox) * c;
                let dst = &mut od[o..o + c];
                let mut count = 0usize;
                for_window((h, w, c), win, fill, img, oy, ox, |s| {
                    count += 1;
                    if let Some(s) = s {
                        for (d, v) in dst.iter_mut().zip(&xd[s..s + c]) {
                            *d += v;
                        }
                    }
                });
                let inv = 1.0 / count.max(1) as f32;
                dst.iter_mut().for_each(|v| *v *= inv);
            }
        }
    }
    out
}

pub fn avg_pool_backward(x_shape: &[usize], win: &Window, fill: PadFill, dy: &Tensor) -> Tensor {
    let (n, h, w, c) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (_, oh, ow, _) = dy.dims4();
    let mut dx = Tensor::zeros(x_shape);
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut cells = Vec::with_capacity(win.kernel.0 * win.kernel.1);
                for_window((h, w, c), win, fill, img, oy, ox, |s| cells.push(s));
                let inv = 1.0 / cells.len().max(1) as f32;
                let o = ((img * oh + oy) * ow + ox) * c;
                for s in cells.into_iter().flatten() {
                    for ch in 0..c {
                        dx.data_mut()[s + ch] += dy.data()[o + ch] * inv;
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel affine normalisation with fixed statistics:
/// `y = (x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn batch_norm(
    x: &Tensor,
    gamma: Option<&[f32]>,
    beta: Option<&[f32]>,
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Tensor {
    let c = *x.shape().last().unwrap();
    let (scale, shift) = bn_affine(gamma, beta, mean, var, eps, c);
    let mut out = x.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for ((v, s), t) in px.iter_mut().zip(&scale).zip(&shift) {
            *v = *v * s + t;
        }
    }
    out
}

fn bn_affine(
    gamma: Option<&[f32]>,
    beta: Option<&[f32]>,
    mean: &[f32],
    var: &[f32],
    eps: f32,
    c: usize,
) -> (Vec<f32>, Vec<f32>) {
    let mut scale = vec![0.0; c];
    let mut shift = vec![0.0; c];
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let g = gamma.map_or(1.0, |g| g[ch]);
        let b = beta.map_or(0.0, |b| b[ch]);
        scale[ch] = g * inv;
        shift[ch] = b - mean[ch] * g * inv;
    }
    (scale, shift)
}

#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward(
    x: &Tensor,
    gamma: Option<&[f32]>,
    mean: &[f32],
    var: &[f32],
    eps: f32,
    dy: &Tensor,
    dgamma: Option<&mut [f32]>,
    dbeta: Option<&mut [f32]>,
    want_dx: bool,
) -> Option<Tensor> {
    let c = *x.shape().last().unwrap();
    let inv: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    if let Some(dg) = dgamma {
        for (px, g) in x.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
            for ch in 0..c {
                dg[ch] += g[ch] * (px[ch] - mean[ch]) * inv[ch];
            }
        }
    }
    if let Some(db) = dbeta {
        for g in dy.data().chunks_exact(c) {
            for (a, b) in db.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    want_dx.then(|| {
        let scale: Vec<f32> = (0..c).map(|ch| gamma.map_or(1.0, |g| g[ch]) * inv[ch]).collect();
        let mut dx = dy.clone();
        for px in dx.data_mut().chunks_exact_mut(c) {
            for (v, s) in px.iter_mut().zip(&scale) {
                *v *= s;
            }
        }
        dx
    })
}

/// `y = x · w + b` with `x: [n, in]`, `w: [in, out]`.
pub fn dense(x: &Tensor, w: &[f32], b: Option<&[f32]>, units: usize) -> Tensor {
    let n = x.batch();
    let k = x.row_len();
    let mut out = Tensor::zeros(&[n, units]);
    gemm(n, k, units, x.data(), Layout::Normal, w, Layout::Normal, out.data_mut(), 0.0);
    if let Some(b) = b {
        for row in out.data_mut().chunks_exact_mut(units) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    out
}

pub fn dense_backward(
    x: &Tensor,
    w: &[f32],
    dy: &Tensor,
    dw: Option<&mut [f32]>,
    db: Option<&mut [f32]>,
    want_dx: bool,
) -> Option<Tensor> {
    let n = x.batch();
    let k = x.row_len();
    let units = dy.row_len();
    if let Some(dw) = dw {
        gemm(k, n, units, x.data(), Layout::Transposed, dy.data(), Layout::Normal, dw, 1.0);
    }
    if let Some(db) = db {
        for row in dy.data().chunks_exact(units) {
            for (a, b) in db.iter_mut().zip(row) {
                *a += b;
            }
        }
    }
    want_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        gemm(n, units, k, dy.data(), Layout::Normal, w, Layout::Transposed, dx.data_mut(), 0.0);
        dx
    })
}

/// Row-wise numerically stable softmax over the last axis.
pub fn softmax_rows(z: &Tensor) -> Tensor {
    let c = *z.shape().last().unwrap();
    let mut p = z.clone();
    for row in p.data_mut().chunks_exact_mut(c) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += f64::from(*v);
        }
        let inv = (1.0 / sum) as f32;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    p
}

/// `dz = p ⊙ (g − Σ g·p)` row-wise.
pub fn softmax_backward(p: &Tensor, dp: &Tensor) -> Tensor {
    let c = *p.shape().last().unwrap();
    let mut dz = dp.clone();
    for (prow, drow) in p.data().chunks_exact(c).zip(dz.data_mut().chunks_exact_mut(c)) {
        let dot: f32 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
        for (d, pv) in drow.iter_mut().zip(prow) {
            *d = pv * (*d - dot);
        }
    }
    dz
}
