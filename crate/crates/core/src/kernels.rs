//! Raw buffer kernels used by the tape ops. No shape checking here; callers
//! validate extents first.

use crate::exec;
use crate::tensor::Element;

/// `c[m×n] = a[m×k] · b[k×n]`, overwriting `c`.
///
/// Each output row is reduced in ascending `k` order whether or not the
/// row loop runs on the pool, so results are bitwise mode-independent.
pub fn gemm<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |i: usize, crow: &mut [T]| {
        let crow = &mut crow[..n];
        crow.fill(T::zero());
        let arow = &a[i * k..(i + 1) * k];
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &b[p * n..][..n];
            let b1 = &b[(p + 1) * n..][..n];
            let b2 = &b[(p + 2) * n..][..n];
            let b3 = &b[(p + 3) * n..][..n];
            for j in 0..n {
                crow[j] = crow[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        for (q, &av) in arow.iter().enumerate().skip(p) {
            let brow = &b[q * n..][..n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    };
    run_rows(m, k, n, c, row);
}

pub fn transpose<T: Element>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let bt = transpose(n, k, b);
    let mut c = vec![T::zero(); m * n];
    gemm(m, k, n, a, &bt, &mut c);
    c
}

/// `a[k×m]ᵀ · b[k×n]`, reducing each output in ascending `k` order.
pub fn gemm_tn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let row = |i: usize, crow: &mut [T]| {
        let crow = &mut crow[..n];
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (a[p * m + i], a[(p + 1) * m + i], a[(p + 2) * m + i], a[(p + 3) * m + i]);
            let b0 = &b[p * n..][..n];
            let b1 = &b[(p + 1) * n..][..n];
            let b2 = &b[(p + 2) * n..][..n];
            let b3 = &b[(p + 3) * n..][..n];
            for j in 0..n {
                crow[j] = crow[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        for q in p..k {
            let av = a[q * m + i];
            let brow = &b[q * n..][..n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    };
    run_rows(m, k, n, &mut c, row);
    c
}

/// Applies `row` to every `n`-wide row of `c`, on the pool when the product
/// is large enough to pay for it.
fn run_rows<T: Element, F>(m: usize, k: usize, n: usize, c: &mut [T], row: F)
where
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if n == 0 {
        return;
    }
    match exec::pool() {
        Some(pool) if m > 1 && m * k * n >= 1 << 16 => {
            use rayon::prelude::*;
            pool.install(|| c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| row(i, crow)));
        }
        _ => c.chunks_mut(n).enumerate().for_each(|(i, crow)| row(i, crow)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn group_in(&self) -> usize {
        self.in_ch / self.groups
    }

    fn group_out(&self) -> usize {
        self.out_ch / self.groups
    }

    fn col_rows(&self) -> usize {
        self.group_in() * self.kernel * self.kernel
    }
}

impl ConvGeom {
    /// One filter per input channel.
    fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_ch && self.out_ch == self.in_ch
    }

    /// Input position read by output `(o)` at kernel offset `kk`, if inside.
    #[inline]
    fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

fn depthwise_forward<T: Element>(g: &ConvGeom, img: &[T], w: &[T], out: &mut [T]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    for c in 0..g.in_ch {
        let plane = &img[c * g.h * g.w..][..g.h * g.w];
        let wk = &w[c * k * k..][..k * k];
        let dst = &mut out[c * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for ky in 0..k {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..k {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            s = s + wk[ky * k + kx] * plane[iy * g.w + ix];
                        }
                    }
                }
                dst[oy * ow + ox] = s;
            }
        }
    }
}

fn depthwise_backward<T: Element>(g: &ConvGeom, img: &[T], w: &[T], dy: &[T], dx: &mut [T], dw: &mut [T]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    for c in 0..g.in_ch {
        let plane = &img[c * g.h * g.w..][..g.h * g.w];
        let wk = &w[c * k * k..][..k * k];
        let dyc = &dy[c * oh * ow..][..oh * ow];
        for ky in 0..k {
            for kx in 0..k {
                let mut s = T::zero();
                for oy in 0..oh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..ow {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            let d = dyc[oy * ow + ox];
                            s = s + d * plane[iy * g.w + ix];
                            if !dx.is_empty() {
                                let v = &mut dx[c * g.h * g.w + iy * g.w + ix];
                                *v = *v + wk[ky * k + kx] * d;
                            }
                        }
                    }
                }
                if !dw.is_empty() {
                    dw[c * k * k + ky * k + kx] = s;
                }
            }
        }
    }
}

/// Unfolds one group of one image into a `[cg·k·k, oh·ow]` column matrix.
fn im2col<T: Element>(g: &ConvGeom, img: &[T], group: usize, col: &mut [T]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let cg = g.group_in();
    let mut row = 0;
    for c in 0..cg {
        let plane = &img[(group * cg + c) * g.h * g.w..][..g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && (iy as usize) < g.h
                            && ix >= 0
                            && (ix as usize) < g.w
                        {
                            plane[iy as usize * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Element>(g: &ConvGeom, col: &[T], group: usize, img: &mut [T]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let cg = g.group_in();
    let mut row = 0;
    for c in 0..cg {
        let plane = &mut img[(group * cg + c) * g.h * g.w..][..g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            let v = &mut plane[iy as usize * g.w + ix as usize];
                            *v = *v + src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation with zero padding. `x: [B,C,H,W]`, `w: [F,C/g,k,k]`.
pub fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (fg, rows) = (g.group_out(), g.col_rows());
    let in_img = g.in_ch * g.h * g.w;
    let per_image = exec::map_indexed(g.batch, |b| {
        let img = &x[b * in_img..(b + 1) * in_img];
        let mut out = vec![T::zero(); g.out_ch * oh * ow];
        if g.is_depthwise() {
            depthwise_forward(g, img, w, &mut out);
            return out;
        }
        let mut col = vec![T::zero(); rows * oh * ow];
        for grp in 0..g.groups {
            im2col(g, img, grp, &mut col);
            let wg = &w[grp * fg * rows..(grp + 1) * fg * rows];
            gemm(fg, rows, oh * ow, wg, &col, &mut out[grp * fg * oh * ow..(grp + 1) * fg * oh * ow]);
        }
        out
    });
    per_image.concat()
}

/// Returns `(dx, dw)` for upstream gradient `dy: [B,F,oh,ow]`.
pub fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (fg, rows) = (g.group_out(), g.col_rows());
    let in_img = g.in_ch * g.h * g.w;
    let out_img = g.out_ch * oh * ow;
    let per_image = exec::map_indexed(g.batch, |b| {
        let img = &x[b * in_img..(b + 1) * in_img];
        let dyb = &dy[b * out_img..(b + 1) * out_img];
        let mut dx = if need_dx { vec![T::zero(); in_img] } else { Vec::new() };
        let mut dw = if need_dw { vec![T::zero(); w.len()] } else { Vec::new() };
        if g.is_depthwise() {
            depthwise_backward(g, img, w, dyb, &mut dx, &mut dw);
            return (dx, dw);
        }
        let mut col = vec![T::zero(); rows * oh * ow];
        for grp in 0..g.groups {
            let dyg = &dyb[grp * fg * oh * ow..(grp + 1) * fg * oh * ow];
            if need_dw {
                im2col(g, img, grp, &mut col);
                let part = gemm_nt(fg, oh * ow, rows, dyg, &col);
                dw[grp * fg * rows..(grp + 1) * fg * rows].copy_from_slice(&part);
            }
            if need_dx {
                let wg = &w[grp * fg * rows..(grp + 1) * fg * rows];
                let dcol = gemm_tn(rows, fg, oh * ow, wg, dyg);
                col2im_add(g, &dcol, grp, &mut dx);
            }
        }
        (dx, dw)
    });
    let mut dx = Vec::with_capacity(if need_dx { x.len() } else { 0 });
    let mut dw = if need_dw { vec![T::zero(); w.len()] } else { Vec::new() };
    for (dxb, dwb) in per_image {
        dx.extend_from_slice(&dxb);
        for (acc, v) in dw.iter_mut().zip(dwb) {
            *acc = *acc + v;
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, &b, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        assert_eq!(gemm_nt(2, 2, 2, &a, &transpose(2, 2, &b)), c.to_vec());
        assert_eq!(gemm_tn(2, 2, 2, &transpose(2, 2, &a), &b), c.to_vec());
    }
}
