//! Raw forward/backward kernels on row-major buffers.

use super::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1, stride-1, unpadded kernel reads the input plane as-is.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for n in 0..g.n {
        let xn = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let cols_ref: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        let yn = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        for (co, row) in yn.chunks_mut(p).enumerate() {
            row.fill(b[co]);
        }
        T::gemm(
            g.cout,
            k,
            p,
            T::one(),
            w,
            k as isize,
            1,
            cols_ref,
            p as isize,
            1,
            T::one(),
            yn,
            p as isize,
            1,
        );
    }
    out
}

/// Gradients of a convolution. Each output buffer is only filled when
/// requested; returned buffers are fresh (not accumulated).
pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (k, p) = (g.k(), g.p());
    let plane_in = g.cin * g.h * g.w;
    let mut dx = want.0.then(|| vec![T::zero(); g.n * plane_in]);
    let mut dw = want.1.then(|| vec![T::zero(); g.cout * k]);
    let mut db = want.2.then(|| vec![T::zero(); g.cout]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * p }];
    let mut dcols = vec![T::zero(); if want.0 && !g.is_pointwise() { k * p } else { 0 }];
    for n in 0..g.n {
        let dyn_ = &dy[n * g.cout * p..(n + 1) * g.cout * p];
        if let Some(db) = db.as_mut() {
            for (co, row) in dyn_.chunks(p).enumerate() {
                db[co] = db[co] + row.iter().copied().sum::<T>();
            }
        }
        let xn = &x[n * plane_in..(n + 1) * plane_in];
        if let Some(dw) = dw.as_mut() {
            let cols_ref: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            // dW (Cout x K) += dY (Cout x P) * cols^T (P x K)
            T::gemm(
                g.cout,
                p,
                k,
                T::one(),
                dyn_,
                p as isize,
                1,
                cols_ref,
                1,
                p as isize,
                T::one(),
                dw,
                k as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * plane_in..(n + 1) * plane_in];
            if g.is_pointwise() {
                // dX (K x P) = W^T (K x Cout) * dY (Cout x P)
                T::gemm(
                    k,
                    g.cout,
                    p,
                    T::one(),
                    w,
                    1,
                    k as isize,
                    dyn_,
                    p as isize,
                    1,
                    T::zero(),
                    dxn,
                    p as isize,
                    1,
                );
            } else {
                T::gemm(
                    k,
                    g.cout,
                    p,
                    T::one(),
                    w,
                    1,
                    k as isize,
                    dyn_,
                    p as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    p as isize,
                    1,
                );
                col2im_add(g, &dcols, dxn);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2x2/stride-2 max pooling. Returns the pooled values and, per output cell,
/// the flat input index of the winning element (first maximum in row-major
/// window order).
pub(crate) fn max_pool2x2<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let candidates = [
                    base + (2 * oy) * w + 2 * ox,
                    base + (2 * oy) * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let mut best = candidates[0];
                for &c in &candidates[1..] {
                    if x[c] > x[best] {
                        best = c;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2x<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * ho * wo];
    for pl in 0..planes {
        for y in 0..ho {
            let src = &x[pl * h * w + (y / 2) * w..pl * h * w + (y / 2 + 1) * w];
            let dst = &mut out[pl * ho * wo + y * wo..pl * ho * wo + (y + 1) * wo];
            for (xo, d) in dst.iter_mut().enumerate() {
                *d = src[xo / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        for y in 0..ho {
            for xo in 0..wo {
                let i = pl * h * w + (y / 2) * w + xo / 2;
                dx[i] = dx[i] + dy[pl * ho * wo + y * wo + xo];
            }
        }
    }
    dx
}

/// Flat index into `b` for every element of `a` under trailing-aligned
/// broadcasting where each dim of `b` is either equal to `a`'s or 1.
pub(crate) fn broadcast_indices(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len();
    let mut bstrides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        bstrides[d] = if b[d] == 1 { 0 } else { s };
        s *= b[d];
    }
    let total: usize = a.iter().product();
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(total);
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += bstrides[d];
            if idx[d] < a[d] {
                break;
            }
            off -= bstrides[d] * a[d];
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_indices_channel_gate() {
        // a: 1x2x1x2, b: 1x2x1x1
        let idx = broadcast_indices(&[1, 2, 1, 2], &[1, 2, 1, 1]);
        assert_eq!(idx, vec![0, 0, 1, 1]);
        let idx = broadcast_indices(&[1, 2, 1, 2], &[1, 1, 1, 2]);
        assert_eq!(idx, vec![0, 1, 0, 1]);
    }

    #[test]
    fn pool_tie_goes_to_first_cell() {
        let (v, a) = max_pool2x2(&[1.0f64, 1.0, 1.0, 1.0], 1, 2, 2);
        assert_eq!(v, vec![1.0]);
        assert_eq!(a, vec![0]);
    }
}
