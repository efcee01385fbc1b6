//! Raw numeric kernels over row-major buffers. Shapes are validated by the
//! callers in `graph`; these functions only assert in debug builds.

use super::storage::strides;
use super::Scalar;

/// Column tile width for the broadcasting GEMMs; keeps a C tile in L1.
const TILE: usize = 256;

/// `c[j] += Σ_p coef[p] · rows[p][j]`, accumulated in `p` order.
#[inline]
fn axpy_rows<T: Scalar>(c: &mut [T], coef: &[T], rows: &[&[T]]) {
    let mut p = 0;
    while p + 4 <= coef.len() {
        let (a0, a1, a2, a3) = (coef[p], coef[p + 1], coef[p + 2], coef[p + 3]);
        let (r0, r1, r2, r3) = (rows[p], rows[p + 1], rows[p + 2], rows[p + 3]);
        for j in 0..c.len() {
            let mut v = c[j];
            v += a0 * r0[j];
            v += a1 * r1[j];
            v += a2 * r2[j];
            v += a3 * r3[j];
            c[j] = v;
        }
        p += 4;
    }
    for q in p..coef.len() {
        let (a, r) = (coef[q], rows[q]);
        for (cv, &bv) in c.iter_mut().zip(r) {
            *cv += a * bv;
        }
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut rows: Vec<&[T]> = Vec::with_capacity(k);
    for j0 in (0..n).step_by(TILE) {
        let j1 = (j0 + TILE).min(n);
        rows.clear();
        rows.extend((0..k).map(|p| &b[p * n + j0..p * n + j1]));
        for i in 0..m {
            axpy_rows(&mut c[i * n + j0..i * n + j1], &a[i * k..(i + 1) * k], &rows);
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut rows: Vec<&[T]> = Vec::with_capacity(k);
    let mut coef = vec![T::zero(); k];
    for j0 in (0..n).step_by(TILE) {
        let j1 = (j0 + TILE).min(n);
        rows.clear();
        rows.extend((0..k).map(|p| &b[p * n + j0..p * n + j1]));
        for i in 0..m {
            for (p, cf) in coef.iter_mut().enumerate() {
                *cf = a[p * m + i];
            }
            axpy_rows(&mut c[i * n + j0..i * n + j1], &coef, &rows);
        }
    }
}

/// Dot product with eight fixed accumulation lanes; the summation order
/// depends only on the length, so results are reproducible.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ta.iter().zip(tb) {
        tail += x * y;
    }
    let mut s = T::zero();
    for v in acc {
        s += v;
    }
    s + tail
}

/// Geometry of a 2-D convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.stride == 0 || h + 2 * self.pad < self.kh || w + 2 * self.pad < self.kw {
            return None;
        }
        Some((
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        ))
    }
}

/// Output columns `ox` whose input column `ox·stride + kj − pad` lies inside
/// `0..w`, as a half-open range.
fn valid_range(out: usize, size: usize, k: usize, win: Window) -> (usize, usize) {
    let lo = if win.pad > k {
        (win.pad - k).div_ceil(win.stride)
    } else {
        0
    };
    let hi = if size + win.pad > k {
        ((size + win.pad - k - 1) / win.stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Lowers an N×C×H×W batch into a `(C·kh·kw) × (N·oh·ow)` column matrix.
pub fn im2col<T: Scalar>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    win: Window,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let cols_n = n * oh * ow;
    let mut cols = vec![T::zero(); c * win.kh * win.kw * cols_n];
    for ci in 0..c {
        for ki in 0..win.kh {
            let (y0, y1) = valid_range(oh, h, ki, win);
            for kj in 0..win.kw {
                let (x0, x1) = valid_range(ow, w, kj, win);
                let row = (ci * win.kh + ki) * win.kw + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for ni in 0..n {
                    let plane = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in y0..y1 {
                        let iy = oy * win.stride + ki - win.pad;
                        let src = &plane[iy * w..(iy + 1) * w];
                        let out = &mut dst[(ni * oh + oy) * ow..(ni * oh + oy + 1) * ow];
                        if x0 >= x1 {
                            continue;
                        }
                        let ix0 = x0 * win.stride + kj - win.pad;
                        if win.stride == 1 {
                            out[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for (o, ix) in out[x0..x1].iter_mut().zip((ix0..).step_by(win.stride)) {
                                *o = src[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back into an image batch.
pub fn col2im<T: Scalar>(
    cols: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    win: Window,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let cols_n = n * oh * ow;
    let mut x = vec![T::zero(); n * c * h * w];
    for ci in 0..c {
        for ki in 0..win.kh {
            let (y0, y1) = valid_range(oh, h, ki, win);
            for kj in 0..win.kw {
                let (x0, x1) = valid_range(ow, w, kj, win);
                if x0 >= x1 {
                    continue;
                }
                let row = (ci * win.kh + ki) * win.kw + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for ni in 0..n {
                    let plane = &mut x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in y0..y1 {
                        let iy = oy * win.stride + ki - win.pad;
                        let g = &src[(ni * oh + oy) * ow + x0..(ni * oh + oy) * ow + x1];
                        let dst = &mut plane[iy * w..(iy + 1) * w];
                        let ix0 = x0 * win.stride + kj - win.pad;
                        for (gv, ix) in g.iter().zip((ix0..).step_by(win.stride)) {
                            dst[ix] += *gv;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Max pooling; returns the pooled values and the flat input index of each
/// selected element. Padded positions never win.
pub fn max_pool2d<T: Scalar>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    win: Window,
    (oh, ow): (usize, usize),
) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ki in 0..win.kh {
                    let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..win.kw {
                        let ix = (ox * win.stride + kj) as isize - win.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// Calls `f(flat_index, offset)` for every element of `shape` in row-major
/// order, where `offset` is the dot product of the multi-index with `strides`.
pub fn for_each_offset(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let inner = shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let mut flat = 0usize;
    loop {
        for i in 0..inner {
            f(flat + i, offset + i * inner_stride);
        }
        flat += inner;
        // advance the outer odometer
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            offset -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Strides that map an index of `to` onto a tensor of shape `from`, where
/// `from` broadcasts to `to` (right-aligned, extent 1 or equal).
pub fn broadcast_strides(from: &[usize], to: &[usize]) -> Option<Vec<usize>> {
    if from.len() > to.len() {
        return None;
    }
    let lead = to.len() - from.len();
    let from_strides = strides(from);
    let mut out = vec![0; to.len()];
    for (i, &extent) in from.iter().enumerate() {
        let t = to[lead + i];
        if extent == t {
            out[lead + i] = if extent == 1 { 0 } else { from_strides[i] };
        } else if extent == 1 {
            out[lead + i] = 0;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Sums `src` (shape `big`) into a buffer of shape `small`, the inverse of
/// broadcasting `small` up to `big`.
pub fn reduce_to<T: Scalar>(src: &[T], big: &[usize], small_strides: &[usize], small_len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); small_len];
    for_each_offset(big, small_strides, |flat, off| out[off] += src[flat]);
    out
}

/// Gathers a broadcast view: `out[i] = src[offset(i)]`.
pub fn expand<T: Scalar>(src: &[T], big: &[usize], small_strides: &[usize]) -> Vec<T> {
    let numel: usize = big.iter().product();
    let mut out = vec![T::zero(); numel];
    for_each_offset(big, small_strides, |flat, off| out[flat] = src[off]);
    out
}

/// Permutes axes: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    (expand(src, &out_shape, &gather), out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = a[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_triple_loop() {
        let (m, k, n) = (5, 11, 7);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let mut c = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &transpose(k, n, &b), &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let mut c = vec![0.0; m * n];
        gemm_tn(m, k, n, &transpose(m, k, &a), &b, &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let dims = (2, 3, 5, 4);
        let win = Window {
            kh: 3,
            kw: 2,
            stride: 2,
            pad: 1,
        };
        let out = win.output_hw(5, 4).unwrap();
        let x: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| (i as f64).sin()).collect();
        let cols = im2col(&x, dims, win, out);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let back = col2im(&y, dims, win, out);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn odometer_visits_in_row_major_order() {
        let mut seen = Vec::new();
        for_each_offset(&[2, 3], &[3, 1], |flat, off| seen.push((flat, off)));
        assert_eq!(seen, (0..6).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_strides(&[1, 3, 1, 1], &[2, 3, 4, 4]), Some(vec![0, 1, 0, 0]));
        assert_eq!(broadcast_strides(&[3], &[2, 3]), Some(vec![0, 1]));
        assert_eq!(broadcast_strides(&[2], &[2, 3]), None);
    }
}
