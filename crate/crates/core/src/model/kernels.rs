//! Raw forward/backward kernels on NCHW buffers.

use crate::scalar::Scalar;

/// Geometry of a (possibly grouped) 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// Output positions `o` along an axis of length `len` for which
    /// `o * stride + k_off - pad` is a valid input index.
    fn valid(&self, k_off: usize, len: usize, out_len: usize) -> std::ops::Range<usize> {
        let s = self.stride as isize;
        let shift = k_off as isize - self.pad as isize;
        // o * s + shift >= 0  and  o * s + shift <= len - 1
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        let hi_num = len as isize - 1 - shift;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.max(0) as usize;
        let hi = (hi + 1).clamp(0, out_len as isize) as usize;
        lo..hi.max(lo)
    }
}

pub fn conv2d_forward<S: Scalar>(g: &ConvGeom, x: &[S], wt: &[S], bias: &[S]) -> Vec<S> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (cig, cog) = (g.cin_per_group(), g.cout_per_group());
    let k = g.k;
    let mut out = vec![S::zero(); g.n * g.c_out * oh * ow];
    for n in 0..g.n {
        for oc in 0..g.c_out {
            let grp = oc / cog;
            let o = &mut out[(n * g.c_out + oc) * oh * ow..(n * g.c_out + oc + 1) * oh * ow];
            o.iter_mut().for_each(|v| *v = bias[oc]);
            for icg in 0..cig {
                let ic = grp * cig + icg;
                let xin = &x[(n * g.c_in + ic) * g.h * g.w..(n * g.c_in + ic + 1) * g.h * g.w];
                for kh in 0..k {
                    let rows = g.valid(kh, g.h, oh);
                    for kw in 0..k {
                        let wv = wt[((oc * cig + icg) * k + kh) * k + kw];
                        let cols = g.valid(kw, g.w, ow);
                        for r in rows.clone() {
                            let ih = r * g.stride + kh - g.pad;
                            let orow = &mut o[r * ow..(r + 1) * ow];
                            let xrow = &xin[ih * g.w..(ih + 1) * g.w];
                            if g.stride == 1 {
                                let off = kw as isize - g.pad as isize;
                                for c in cols.clone() {
                                    orow[c] += wv * xrow[(c as isize + off) as usize];
                                }
                            } else {
                                for c in cols.clone() {
                                    orow[c] += wv * xrow[c * g.stride + kw - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward<S: Scalar>(
    g: &ConvGeom,
    x: &[S],
    wt: &[S],
    dy: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (cig, cog) = (g.cin_per_group(), g.cout_per_group());
    let k = g.k;
    let mut dx = vec![S::zero(); x.len()];
    let mut dw = vec![S::zero(); wt.len()];
    let mut db = vec![S::zero(); g.c_out];
    for n in 0..g.n {
        for oc in 0..g.c_out {
            let grp = oc / cog;
            let d = &dy[(n * g.c_out + oc) * oh * ow..(n * g.c_out + oc + 1) * oh * ow];
            db[oc] += d.iter().copied().sum::<S>();
            for icg in 0..cig {
                let ic = grp * cig + icg;
                let base = (n * g.c_in + ic) * g.h * g.w;
                for kh in 0..k {
                    let rows = g.valid(kh, g.h, oh);
                    for kw in 0..k {
                        let widx = ((oc * cig + icg) * k + kh) * k + kw;
                        let wv = wt[widx];
                        let cols = g.valid(kw, g.w, ow);
                        let mut acc = S::zero();
                        for r in rows.clone() {
                            let ih = r * g.stride + kh - g.pad;
                            let drow = &d[r * ow..(r + 1) * ow];
                            for c in cols.clone() {
                                let xi = base + ih * g.w + c * g.stride + kw - g.pad;
                                acc += x[xi] * drow[c];
                                dx[xi] += wv * drow[c];
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution without padding, weight layout `[C_in, C_out, KH, KW]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
}

impl ConvTGeom {
    pub fn out_h(&self) -> usize {
        (self.h - 1) * self.sh + self.kh
    }

    pub fn out_w(&self) -> usize {
        (self.w - 1) * self.sw + self.kw
    }
}

pub fn conv_t_forward<S: Scalar>(g: &ConvTGeom, x: &[S], wt: &[S], bias: &[S]) -> Vec<S> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![S::zero(); g.n * g.c_out * oh * ow];
    for n in 0..g.n {
        for oc in 0..g.c_out {
            let o = &mut out[(n * g.c_out + oc) * oh * ow..(n * g.c_out + oc + 1) * oh * ow];
            o.iter_mut().for_each(|v| *v = bias[oc]);
            for ic in 0..g.c_in {
                let xin = &x[(n * g.c_in + ic) * g.h * g.w..(n * g.c_in + ic + 1) * g.h * g.w];
                let wk = &wt[(ic * g.c_out + oc) * g.kh * g.kw..(ic * g.c_out + oc + 1) * g.kh * g.kw];
                for ih in 0..g.h {
                    for iw in 0..g.w {
                        let xv = xin[ih * g.w + iw];
                        for a in 0..g.kh {
                            let orow = &mut o[(ih * g.sh + a) * ow + iw * g.sw..];
                            for (b, wv) in wk[a * g.kw..(a + 1) * g.kw].iter().enumerate() {
                                orow[b] += xv * *wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_t_backward<S: Scalar>(
    g: &ConvTGeom,
    x: &[S],
    wt: &[S],
    dy: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dx = vec![S::zero(); x.len()];
    let mut dw = vec![S::zero(); wt.len()];
    let mut db = vec![S::zero(); g.c_out];
    for n in 0..g.n {
        for oc in 0..g.c_out {
            let d = &dy[(n * g.c_out + oc) * oh * ow..(n * g.c_out + oc + 1) * oh * ow];
            db[oc] += d.iter().copied().sum::<S>();
            for ic in 0..g.c_in {
                let xbase = (n * g.c_in + ic) * g.h * g.w;
                let wbase = (ic * g.c_out + oc) * g.kh * g.kw;
                for ih in 0..g.h {
                    for iw in 0..g.w {
                        let xv = x[xbase + ih * g.w + iw];
                        let mut acc = S::zero();
                        for a in 0..g.kh {
                            let drow = &d[(ih * g.sh + a) * ow + iw * g.sw..];
                            for b in 0..g.kw {
                                let dv = drow[b];
                                acc += wt[wbase + a * g.kw + b] * dv;
                                dw[wbase + a * g.kw + b] += xv * dv;
                            }
                        }
                        dx[xbase + ih * g.w + iw] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Half-open input interval pooled into each output cell along one axis.
pub type PoolWindows = Vec<(usize, usize)>;

/// Windows of a fixed-size, stride-equals-kernel pool (trailing remainder dropped).
pub fn strided_windows(len: usize, kernel: usize) -> PoolWindows {
    (0..len / kernel).map(|i| (i * kernel, (i + 1) * kernel)).collect()
}

/// Adaptive windows: `[floor(i L / o), ceil((i + 1) L / o))`.
pub fn adaptive_windows(len: usize, out: usize) -> PoolWindows {
    (0..out)
        .map(|i| (i * len / out, ((i + 1) * len).div_ceil(out)))
        .collect()
}

pub fn avg_pool_forward<S: Scalar>(
    x: &[S],
    nc: usize,
    h: usize,
    w: usize,
    rows: &PoolWindows,
    cols: &PoolWindows,
) -> Vec<S> {
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = Vec::with_capacity(nc * oh * ow);
    for plane in x.chunks_exact(h * w).take(nc) {
        for &(r0, r1) in rows {
            for &(c0, c1) in cols {
                let mut acc = S::zero();
                for r in r0..r1 {
                    for v in &plane[r * w + c0..r * w + c1] {
                        acc += *v;
                    }
                }
                out.push(acc / S::of_usize((r1 - r0) * (c1 - c0)));
            }
        }
    }
    out
}

pub fn avg_pool_backward<S: Scalar>(
    dy: &[S],
    nc: usize,
    h: usize,
    w: usize,
    rows: &PoolWindows,
    cols: &PoolWindows,
) -> Vec<S> {
    let (oh, ow) = (rows.len(), cols.len());
    let mut dx = vec![S::zero(); nc * h * w];
    for p in 0..nc {
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        for (i, &(r0, r1)) in rows.iter().enumerate() {
            for (j, &(c0, c1)) in cols.iter().enumerate() {
                let g = dy[(p * oh + i) * ow + j] / S::of_usize((r1 - r0) * (c1 - c0));
                for r in r0..r1 {
                    for v in &mut plane[r * w + c0..r * w + c1] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}

/// `C[b] = A[b] * B[b]` (or `A[b] * B[b]^T` when `trans_b`), A is `[M, K]`.
pub fn batched_matmul<S: Scalar>(
    a: &[S],
    b: &[S],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
) -> Vec<S> {
    let mut out = vec![S::zero(); batch * m * n];
    for t in 0..batch {
        let a = &a[t * m * k..(t + 1) * m * k];
        let b = &b[t * k * n..(t + 1) * k * n];
        let c = &mut out[t * m * n..(t + 1) * m * n];
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if trans_b {
                    for (j, cv) in crow.iter_mut().enumerate() {
                        *cv += av * b[j * k + p];
                    }
                } else {
                    for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                        *cv += av * *bv;
                    }
                }
            }
        }
    }
    out
}

/// Transpose the last two axes of a `[batch, r, c]` buffer.
pub fn transpose_last<S: Scalar>(x: &[S], batch: usize, r: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for t in 0..batch {
        for i in 0..r {
            for j in 0..c {
                out[t * r * c + j * r + i] = x[t * r * c + i * c + j];
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GeLU.
#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (S::one() + S::of(3.0) * a * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference convolution by direct definition.
    fn conv_ref(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let cig = g.c_in / g.groups;
        let cog = g.c_out / g.groups;
        let mut out = vec![0.0; g.n * g.c_out * oh * ow];
        for n in 0..g.n {
            for oc in 0..g.c_out {
                for r in 0..oh {
                    for c in 0..ow {
                        let mut acc = b[oc];
                        for icg in 0..cig {
                            let ic = (oc / cog) * cig + icg;
                            for kh in 0..g.k {
                                for kw in 0..g.k {
                                    let ih = (r * g.stride + kh) as isize - g.pad as isize;
                                    let iw = (c * g.stride + kw) as isize - g.pad as isize;
                                    if ih < 0 || iw < 0 || ih >= g.h as isize || iw >= g.w as isize {
                                        continue;
                                    }
                                    acc += w[((oc * cig + icg) * g.k + kh) * g.k + kw]
                                        * x[((n * g.c_in + ic) * g.h + ih as usize) * g.w + iw as usize];
                                }
                            }
                        }
                        out[((n * g.c_out + oc) * oh + r) * ow + c] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0) * scale).collect()
    }

    #[test]
    fn conv_matches_reference_across_geometries() {
        for &(c_in, c_out, h, w, k, stride, pad, groups) in &[
            (3, 4, 7, 6, 3, 2, 1, 1),
            (4, 4, 5, 5, 3, 1, 1, 4),
            (2, 6, 4, 4, 1, 1, 0, 1),
            (2, 2, 9, 8, 3, 2, 1, 2),
        ] {
            let g = ConvGeom { n: 2, c_in, h, w, c_out, k, stride, pad, groups };
            let x = ramp(2 * c_in * h * w, 1.0);
            let wt = ramp(c_out * (c_in / groups) * k * k, 0.3);
            let b = ramp(c_out, 0.1);
            let got = conv2d_forward(&g, &x, &wt, &b);
            let want = conv_ref(&g, &x, &wt, &b);
            for (a, e) in got.iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_windows() {
        assert_eq!(strided_windows(16, 7), vec![(0, 7), (7, 14)]);
        assert_eq!(adaptive_windows(8, 2), vec![(0, 4), (4, 8)]);
        assert_eq!(adaptive_windows(5, 2), vec![(0, 3), (2, 5)]);
        assert_eq!(adaptive_windows(2, 2), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn conv_t_restores_size() {
        let g = ConvTGeom { n: 1, c_in: 1, h: 2, w: 2, c_out: 1, kh: 4, kw: 4, sh: 4, sw: 4 };
        assert_eq!((g.out_h(), g.out_w()), (8, 8));
        let out = conv_t_forward(&g, &[1.0, 2.0, 3.0, 4.0], &[1.0; 16], &[0.0]);
        assert_eq!(out[0], 1.0);
        assert_eq!(out[7], 2.0);
        assert_eq!(out[63], 4.0);
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5f64] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0f64), 0.0);
    }
}
