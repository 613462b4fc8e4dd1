//! Raw numeric kernels over flat row-major slices.
//!
//! Forward GEMM and bilinear kernels report the multiply-accumulates they
//! actually execute to a thread-local counter while a [`MacCounter`] scope
//! is active. Backward kernels never count.

use std::cell::Cell;

thread_local! {
    static MAC_COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Scope guard that enables MAC counting on the current thread.
pub struct MacCounter {
    previous: Option<u64>,
}

impl MacCounter {
    pub fn start() -> Self {
        let previous = MAC_COUNTER.with(|c| c.replace(Some(0)));
        Self { previous }
    }

    /// MACs executed since `start` (or since the last `take`).
    pub fn take(&self) -> u64 {
        MAC_COUNTER.with(|c| c.replace(Some(0)).unwrap_or(0))
    }

    pub fn peek(&self) -> u64 {
        MAC_COUNTER.with(|c| c.get().unwrap_or(0))
    }
}

impl Drop for MacCounter {
    fn drop(&mut self) {
        let prev = self.previous;
        MAC_COUNTER.with(|c| c.set(prev));
    }
}

pub fn counting_active() -> bool {
    MAC_COUNTER.with(|c| c.get().is_some())
}

fn record_macs(n: u64) {
    MAC_COUNTER.with(|c| {
        if let Some(total) = c.get() {
            c.set(Some(total + n));
        }
    });
}

/// `c[m,n] (+)= a[m,k] * b[k,n]`.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    if !accumulate {
        c[..m * n].fill(0.0);
    }
    let mut executed = 0u64;
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
            executed += n as u64;
        }
    }
    record_macs(executed);
}

/// `c[m,n] += a[m,k] * b[n,k]^T`. Backward use only.
pub fn gemm_nt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`. Backward use only.
pub fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a[p * m + i];
            if a_pi == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_pi * bv;
            }
        }
    }
}

/// Geometry of a 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    /// Output spatial size, `None` if the kernel does not fit.
    pub fn output_hw(&self) -> Option<(usize, usize)> {
        let hp = self.h + 2 * self.ph;
        let wp = self.w + 2 * self.pw;
        if hp < self.kh || wp < self.kw || self.sh == 0 || self.sw == 0 {
            return None;
        }
        Some(((hp - self.kh) / self.sh + 1, (wp - self.kw) / self.sw + 1))
    }
}

/// Unrolls channels `[c0, c0+cg)` of one image into columns
/// `[cg*kh*kw, oh*ow]`; padded taps are explicit zeros.
pub fn im2col(x: &[f64], g: &ConvGeom, c0: usize, cg: usize, oh: usize, ow: usize, cols: &mut [f64]) {
    let plane = g.h * g.w;
    let ncols = oh * ow;
    for c in 0..cg {
        let src = &x[(c0 + c) * plane..(c0 + c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into `dx`.
pub fn col2im_acc(cols: &[f64], g: &ConvGeom, c0: usize, cg: usize, oh: usize, ow: usize, dx: &mut [f64]) {
    let plane = g.h * g.w;
    let ncols = oh * ow;
    for c in 0..cg {
        let dst = &mut dx[(c0 + c) * plane..(c0 + c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[iy as usize * g.w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// The four bilinear corners of a continuous `(y, x)` coordinate and their
/// weights; corners outside `[0,h) x [0,w)` get index `None`.
#[derive(Clone, Copy, Debug)]
pub struct Bilinear {
    pub idx: [Option<usize>; 4],
    pub wgt: [f64; 4],
    /// Fractional parts, needed for coordinate gradients.
    pub fy: f64,
    pub fx: f64,
}

impl Bilinear {
    pub fn new(y: f64, x: f64, h: usize, w: usize) -> Self {
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let corner = |dy: f64, dx: f64| {
            let yy = y0 + dy;
            let xx = x0 + dx;
            if yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64 {
                Some(yy as usize * w + xx as usize)
            } else {
                None
            }
        };
        Self {
            idx: [corner(0.0, 0.0), corner(0.0, 1.0), corner(1.0, 0.0), corner(1.0, 1.0)],
            wgt: [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx],
            fy,
            fx,
        }
    }

    /// Interpolated value from one plane; always four multiply-adds.
    #[inline]
    pub fn sample(&self, plane: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..4 {
            let v = self.idx[k].map_or(0.0, |i| plane[i]);
            s += self.wgt[k] * v;
        }
        s
    }

    /// `(d/dy, d/dx)` of the interpolated value.
    #[inline]
    pub fn coord_grad(&self, plane: &[f64]) -> (f64, f64) {
        let v = |k: usize| self.idx[k].map_or(0.0, |i| plane[i]);
        let (v00, v01, v10, v11) = (v(0), v(1), v(2), v(3));
        let dy = (1.0 - self.fx) * (v10 - v00) + self.fx * (v11 - v01);
        let dx = (1.0 - self.fy) * (v01 - v00) + self.fy * (v11 - v10);
        (dy, dx)
    }
}

/// `out[n,c,p]` = bilinear sample of `x[n,c]` at `coords[n,p]`.
pub fn bilinear_forward(x: &[f64], coords: &[f64], n: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c * p];
    let plane = h * w;
    for b in 0..n {
        for q in 0..p {
            let off = (b * p + q) * 2;
            let bl = Bilinear::new(coords[off], coords[off + 1], h, w);
            for ch in 0..c {
                let src = &x[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                out[(b * c + ch) * p + q] = bl.sample(src);
            }
        }
    }
    record_macs(4 * (n * c * p) as u64);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c, false);
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm_nt_acc(m, k, n, &a, &bt, &mut c2);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c3 = vec![0.0; m * n];
        gemm_tn_acc(m, k, n, &at, &b, &mut c3);
        for i in 0..m * n {
            assert!((c[i] - c2[i]).abs() < 1e-12);
            assert!((c[i] - c3[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn counter_counts_gemm_and_bilinear() {
        let counter = MacCounter::start();
        let mut c = vec![0.0; 6];
        gemm_nn(2, 3, 3, &[1.0; 6], &[1.0; 9], &mut c, false);
        assert_eq!(counter.take(), 18);
        bilinear_forward(&[0.0; 8], &[0.5; 6], 1, 2, 2, 2, 3);
        assert_eq!(counter.peek(), 24);
        drop(counter);
        assert!(!counting_active());
    }

    #[test]
    fn bilinear_half_pixel() {
        let plane = [0.0, 1.0, 2.0, 3.0];
        let bl = Bilinear::new(0.5, 0.5, 2, 2);
        assert!((bl.sample(&plane) - 1.5).abs() < 1e-15);
        let far = Bilinear::new(-10.0, -10.0, 2, 2);
        assert_eq!(far.sample(&plane), 0.0);
    }
}
