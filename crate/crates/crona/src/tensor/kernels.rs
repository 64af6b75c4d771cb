//! Raw f64 loops shared by forward and backward passes.
//!
//! Matmul variants avoid materializing transposes; conv goes through
//! im2col so it reuses the same inner loops. Parallel splits are always
//! over disjoint output regions, so results do not depend on thread
//! count.

use crate::par;

/// c[m,n] = a[m,k] * b[k,n]
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.fill(0.0);
    par::for_each_chunk(c, m.max(1), 2 * k * n, |i, crow| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    });
}

/// c[m,n] = a[m,k] * b[n,k]^T  (dot products of rows; both contiguous)
pub fn matmul_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    par::for_each_chunk(c, m.max(1), 2 * k * n, |i, crow| {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            crow[j] = acc;
        }
    });
}

/// c[k,n] = a[m,k]^T * b[m,n]
pub fn matmul_at(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    c.fill(0.0);
    // Each output row i sums over m with a fixed order, so splitting by
    // rows stays deterministic.
    par::for_each_chunk(c, k.max(1), 2 * m * n, |i, crow| {
        for mm in 0..m {
            let av = a[mm * k + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[mm * n..(mm + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    pub fn valid(&self) -> bool {
        self.h + 2 * self.pad >= self.kh && self.w + 2 * self.pad >= self.kw && self.stride > 0
    }
}

/// Unpacks one sample [C,H,W] into columns [out_h*out_w, patch].
pub fn im2col(x: &[f64], d: &ConvDims, col: &mut [f64]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    debug_assert_eq!(col.len(), oh * ow * d.patch());
    let mut p = 0;
    for oy in 0..oh {
        for ox in 0..ow {
            for ci in 0..d.c_in {
                let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
                for ky in 0..d.kh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    for kx in 0..d.kw {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        col[p] = if iy >= 0 && iy < d.h as isize && ix >= 0 && ix < d.w as isize {
                            plane[iy as usize * d.w + ix as usize]
                        } else {
                            0.0
                        };
                        p += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-add of columns back into one sample [C,H,W].
pub fn col2im(col: &[f64], d: &ConvDims, x: &mut [f64]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    debug_assert_eq!(x.len(), d.c_in * d.h * d.w);
    let mut p = 0;
    for oy in 0..oh {
        for ox in 0..ow {
            for ci in 0..d.c_in {
                let plane = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
                for ky in 0..d.kh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    for kx in 0..d.kw {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if iy >= 0 && iy < d.h as isize && ix >= 0 && ix < d.w as isize {
                            plane[iy as usize * d.w + ix as usize] += col[p];
                        }
                        p += 1;
                    }
                }
            }
        }
    }
}

/// Forward conv for a batch. x: [n, c_in*h*w], w: [c_out, patch],
/// bias: optional [c_out], out: [n, c_out*oh*ow].
pub fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    d: &ConvDims,
    n: usize,
    out: &mut [f64],
) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let spatial = oh * ow;
    let in_sz = d.c_in * d.h * d.w;
    let out_sz = d.c_out * spatial;
    debug_assert_eq!(x.len(), n * in_sz);
    debug_assert_eq!(out.len(), n * out_sz);
    let work = 2 * spatial * d.patch() * d.c_out;
    par::for_each_chunk(out, n.max(1), work, |s, out_s| {
        let mut col = vec![0.0; spatial * d.patch()];
        im2col(&x[s * in_sz..(s + 1) * in_sz], d, &mut col);
        // tmp[p, co] = col[p,:] . w[co,:]
        let mut tmp = vec![0.0; spatial * d.c_out];
        matmul_bt_seq(&col, w, &mut tmp, spatial, d.patch(), d.c_out);
        for co in 0..d.c_out {
            let b = bias.map_or(0.0, |bb| bb[co]);
            let dst = &mut out_s[co * spatial..(co + 1) * spatial];
            for (p, v) in dst.iter_mut().enumerate() {
                *v = tmp[p * d.c_out + co] + b;
            }
        }
    });
}

/// Backward conv. Returns (dx, dw, dbias); all accumulated sequentially
/// over samples after a per-sample ordered map.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    d: &ConvDims,
    n: usize,
    want_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let spatial = oh * ow;
    let in_sz = d.c_in * d.h * d.w;
    let out_sz = d.c_out * spatial;
    let patch = d.patch();
    let work = 2 * spatial * patch * d.c_out;
    let per_sample: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = par::map_indexed(n, work, |s| {
        let xs = &x[s * in_sz..(s + 1) * in_sz];
        let dout_s = &dout[s * out_sz..(s + 1) * out_sz]; // [c_out, spatial]
        let mut col = vec![0.0; spatial * patch];
        im2col(xs, d, &mut col);
        // dW[co, q] += sum_p dout[co, p] * col[p, q]
        let mut dw_s = vec![0.0; d.c_out * patch];
        matmul_seq(dout_s, &col, &mut dw_s, d.c_out, spatial, patch);
        let mut db_s = vec![0.0; d.c_out];
        for co in 0..d.c_out {
            db_s[co] = dout_s[co * spatial..(co + 1) * spatial].iter().sum();
        }
        let dx_s = if want_dx {
            // dcol[p, q] = sum_co dout[co, p] * w[co, q]
            let mut dcol = vec![0.0; spatial * patch];
            matmul_at_seq(dout_s, w, &mut dcol, d.c_out, spatial, patch);
            let mut dx_s = vec![0.0; in_sz];
            col2im(&dcol, d, &mut dx_s);
            dx_s
        } else {
            Vec::new()
        };
        (dx_s, dw_s, db_s)
    });
    let mut dx = vec![0.0; if want_dx { n * in_sz } else { 0 }];
    let mut dw = vec![0.0; d.c_out * patch];
    let mut db = vec![0.0; d.c_out];
    for (s, (dx_s, dw_s, db_s)) in per_sample.into_iter().enumerate() {
        if want_dx {
            dx[s * in_sz..(s + 1) * in_sz].copy_from_slice(&dx_s);
        }
        for (a, b) in dw.iter_mut().zip(&dw_s) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(&db_s) {
            *a += b;
        }
    }
    (dx, dw, db)
}

// Sequential twins used inside already-parallel regions.
fn matmul_seq(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    c.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn matmul_bt_seq(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv = acc;
        }
    }
}

fn matmul_at_seq(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    c.fill(0.0);
    for mm in 0..m {
        let arow = &a[mm * k..(mm + 1) * k];
        let brow = &b[mm * n..(mm + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// In-place numerically stable softmax over each row.
pub fn softmax_rows(x: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, k, n) in &[(1, 1, 1), (3, 4, 5), (7, 2, 9), (16, 16, 16)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let want = naive_matmul(&a, &b, m, k, n);

            let mut c = vec![0.0; m * n];
            matmul(&a, &b, &mut c, m, k, n);
            assert!(c
                .iter()
                .zip(&want)
                .all(|(x, y)| (x - y).abs() < 1e-12));

            // b stored transposed: bt[n, k]
            let mut bt = vec![0.0; k * n];
            for kk in 0..k {
                for j in 0..n {
                    bt[j * k + kk] = b[kk * n + j];
                }
            }
            let mut c2 = vec![0.0; m * n];
            matmul_bt(&a, &bt, &mut c2, m, k, n);
            assert!(c2.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

            // a stored transposed: at[k, m] -> matmul_at(at) == naive(a)
            let mut at = vec![0.0; m * k];
            for i in 0..m {
                for kk in 0..k {
                    at[kk * m + i] = a[i * k + kk];
                }
            }
            let mut c3 = vec![0.0; m * n];
            matmul_at(&at, &b, &mut c3, k, m, n);
            assert!(c3.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn conv_forward_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = ConvDims {
            c_in: 2,
            h: 6,
            w: 5,
            c_out: 3,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
        };
        let n = 2;
        let x: Vec<f64> = (0..n * d.c_in * d.h * d.w)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let w: Vec<f64> = (0..d.c_out * d.patch())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let b: Vec<f64> = (0..d.c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (oh, ow) = (d.out_h(), d.out_w());
        let mut out = vec![0.0; n * d.c_out * oh * ow];
        conv2d_forward(&x, &w, Some(&b), &d, n, &mut out);

        for s in 0..n {
            for co in 0..d.c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..d.c_in {
                            for ky in 0..d.kh {
                                for kx in 0..d.kw {
                                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                                    let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                    if iy >= 0
                                        && iy < d.h as isize
                                        && ix >= 0
                                        && ix < d.w as isize
                                    {
                                        let xi = s * d.c_in * d.h * d.w
                                            + ci * d.h * d.w
                                            + iy as usize * d.w
                                            + ix as usize;
                                        let wi = co * d.patch()
                                            + ci * d.kh * d.kw
                                            + ky * d.kw
                                            + kx;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        let oi = s * d.c_out * oh * ow + co * oh * ow + oy * ow + ox;
                        assert!((out[oi] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0];
        softmax_rows(&mut x, 2, 3);
        for r in 0..2 {
            let s: f64 = x[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_and_sequential_paths_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, k, n) = (64, 64, 64);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut c1 = vec![0.0; m * n];
        matmul(&a, &b, &mut c1, m, k, n);
        crate::par::set_force_sequential(true);
        let mut c2 = vec![0.0; m * n];
        matmul(&a, &b, &mut c2, m, k, n);
        crate::par::set_force_sequential(false);
        assert_eq!(c1, c2);
    }
}
