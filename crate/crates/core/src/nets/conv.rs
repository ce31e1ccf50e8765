//! 3-D convolution by im2col + gemm, cube kernels, zero padding `k / 2`.

use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize) -> Self {
        let k = w_shape[2];
        let pad = k / 2;
        let in_dims = [x_shape[2], x_shape[3], x_shape[4]];
        let out_dims = in_dims.map(|s| (s + 2 * pad - k) / stride + 1);
        ConvGeom {
            ci: x_shape[1],
            co: w_shape[0],
            k,
            stride,
            pad,
            in_dims,
            out_dims,
        }
    }

    fn rows(&self) -> usize {
        self.ci * self.k * self.k * self.k
    }

    fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    /// Half-open output range along one axis for which `o * stride + koff - pad`
    /// lands inside the input.
    fn valid(&self, axis: usize, koff: usize) -> (usize, usize) {
        let (s, p, n_in, n_out) = (
            self.stride as isize,
            self.pad as isize,
            self.in_dims[axis] as isize,
            self.out_dims[axis] as isize,
        );
        let off = koff as isize - p;
        // o*s + off >= 0  and  o*s + off < n_in
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = ((n_in - off + s - 1) / s).clamp(0, n_out);
        (lo.max(0) as usize, hi.max(lo.max(0)) as usize)
    }
}

/// Unfolds one sample `[ci, D, H, W]` into `[ci·k³, P]`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let [_, ih, iw] = g.in_dims;
    let [_, oh, ow] = g.out_dims;
    let p = g.out_len();
    let k = g.k;
    let s = g.stride;
    col.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..g.ci {
        let xc = &x[ci * g.in_len()..(ci + 1) * g.in_len()];
        for kd in 0..k {
            let (d0, d1) = g.valid(0, kd);
            for kh in 0..k {
                let (h0, h1) = g.valid(1, kh);
                for kw in 0..k {
                    let (w0, w1) = g.valid(2, kw);
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for o_d in d0..d1 {
                        let i_d = o_d * s + kd - g.pad;
                        for o_h in h0..h1 {
                            let i_h = o_h * s + kh - g.pad;
                            let src_row = &xc[(i_d * ih + i_h) * iw..(i_d * ih + i_h + 1) * iw];
                            let dst_row = &mut dst[(o_d * oh + o_h) * ow..(o_d * oh + o_h + 1) * ow];
                            if s == 1 {
                                let i_w0 = w0 + kw - g.pad;
                                dst_row[w0..w1].copy_from_slice(&src_row[i_w0..i_w0 + (w1 - w0)]);
                            } else {
                                for o_w in w0..w1 {
                                    dst_row[o_w] = src_row[o_w * s + kw - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[ci·k³, P]` back into `[ci, D, H, W]`.
fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], x: &mut [T]) {
    let [_, ih, iw] = g.in_dims;
    let [_, oh, ow] = g.out_dims;
    let p = g.out_len();
    let k = g.k;
    let s = g.stride;
    for ci in 0..g.ci {
        let xc = &mut x[ci * g.in_len()..(ci + 1) * g.in_len()];
        for kd in 0..k {
            let (d0, d1) = g.valid(0, kd);
            for kh in 0..k {
                let (h0, h1) = g.valid(1, kh);
                for kw in 0..k {
                    let (w0, w1) = g.valid(2, kw);
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let src = &col[row * p..(row + 1) * p];
                    for o_d in d0..d1 {
                        let i_d = o_d * s + kd - g.pad;
                        for o_h in h0..h1 {
                            let i_h = o_h * s + kh - g.pad;
                            let base = (i_d * ih + i_h) * iw;
                            let src_row = &src[(o_d * oh + o_h) * ow..(o_d * oh + o_h + 1) * ow];
                            for o_w in w0..w1 {
                                let i_w = o_w * s + kw - g.pad;
                                xc[base + i_w] = xc[base + i_w] + src_row[o_w];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
) -> Tensor<T> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride);
    let n = x.shape()[0];
    let (kr, p) = (g.rows(), g.out_len());
    let mut out = Tensor::zeros(vec![n, g.co, g.out_dims[0], g.out_dims[1], g.out_dims[2]]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kr * p]
    };
    let in_sample = g.ci * g.in_len();
    for s in 0..n {
        let xs = &x.data()[s * in_sample..(s + 1) * in_sample];
        let colp: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(&g, xs, &mut col);
            &col
        };
        let os = &mut out.data_mut()[s * g.co * p..(s + 1) * g.co * p];
        if let Some(b) = b {
            for co in 0..g.co {
                os[co * p..(co + 1) * p]
                    .iter_mut()
                    .for_each(|v| *v = b.data()[co]);
            }
        }
        // out[co, p] += W[co, kr] · col[kr, p]
        unsafe {
            T::gemm(
                g.co,
                kr,
                p,
                T::one(),
                w.data().as_ptr(),
                kr as isize,
                1,
                colp.as_ptr(),
                p as isize,
                1,
                T::one(),
                os.as_mut_ptr(),
                p as isize,
                1,
            );
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)`, each computed only when requested.
pub(crate) fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let g = ConvGeom::new(x.shape(), w.shape(), stride);
    let n = x.shape()[0];
    let (kr, p) = (g.rows(), g.out_len());
    let in_sample = g.ci * g.in_len();
    let mut gx = need_x.then(|| Tensor::zeros(x.shape().to_vec()));
    let mut gw = need_w.then(|| Tensor::zeros(w.shape().to_vec()));
    let mut gb = need_b.then(|| Tensor::zeros(vec![g.co]));
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { kr * p }];
    let mut gcol = vec![T::zero(); if need_x && !g.is_pointwise() { kr * p } else { 0 }];
    for s in 0..n {
        let gos = &grad_out.data()[s * g.co * p..(s + 1) * g.co * p];
        if let Some(gb) = gb.as_mut() {
            for co in 0..g.co {
                let sum = gos[co * p..(co + 1) * p]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v);
                gb.data_mut()[co] = gb.data()[co] + sum;
            }
        }
        let xs = &x.data()[s * in_sample..(s + 1) * in_sample];
        if let Some(gw) = gw.as_mut() {
            let colp: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(&g, xs, &mut col);
                &col
            };
            // gW[co, kr] += gout[co, p] · col[kr, p]^T
            unsafe {
                T::gemm(
                    g.co,
                    p,
                    kr,
                    T::one(),
                    gos.as_ptr(),
                    p as isize,
                    1,
                    colp.as_ptr(),
                    1,
                    p as isize,
                    T::one(),
                    gw.data_mut().as_mut_ptr(),
                    kr as isize,
                    1,
                );
            }
        }
        if let Some(gx) = gx.as_mut() {
            let gxs = &mut gx.data_mut()[s * in_sample..(s + 1) * in_sample];
            // gcol[kr, p] = W[co, kr]^T · gout[co, p]
            let target: &mut [T] = if g.is_pointwise() { gxs } else { &mut gcol };
            unsafe {
                T::gemm(
                    kr,
                    g.co,
                    p,
                    T::one(),
                    w.data().as_ptr(),
                    1,
                    kr as isize,
                    gos.as_ptr(),
                    p as isize,
                    1,
                    T::zero(),
                    target.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            if !g.is_pointwise() {
                col2im(&g, &gcol, gxs);
            }
        }
    }
    (gx, gw, gb)
}
