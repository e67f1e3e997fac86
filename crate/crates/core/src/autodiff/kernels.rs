//! Convolution, pooling and resampling loops on flat `(d, h, w)` grids.
//!
//! A convolution relates a "big" grid (the conv input) to a "small" grid
//! (the conv output) through `i = o·s + k·r − p` per axis. The same three
//! loops serve conv forward, conv backward and transposed conv.

use std::ops::Range;

use super::tensor::Real;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geom {
    pub big: [usize; 3],
    pub small: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

fn tap_range(n_big: usize, n_small: usize, s: usize, p: usize, off: usize) -> Range<usize> {
    let lo = if off >= p { 0 } else { (p - off).div_ceil(s) };
    if n_big - 1 + p < off {
        return 0..0;
    }
    let hi = ((n_big - 1 + p - off) / s + 1).min(n_small);
    lo..hi.max(lo)
}

impl Geom {
    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn small_len(&self) -> usize {
        self.small.iter().product()
    }

    pub fn big_len(&self) -> usize {
        self.big.iter().product()
    }

    /// Calls `f(small_start, big_start, len)` for every contiguous output
    /// row touched by kernel tap `t`.
    #[inline]
    fn runs(&self, t: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [kd, kh, kw] = [
            t / (self.kernel[1] * self.kernel[2]),
            t / self.kernel[2] % self.kernel[1],
            t % self.kernel[2],
        ];
        let (s, p, r) = (self.stride, self.padding, self.dilation);
        let rd = tap_range(self.big[0], self.small[0], s, p, kd * r);
        let rh = tap_range(self.big[1], self.small[1], s, p, kh * r);
        let rw = tap_range(self.big[2], self.small[2], s, p, kw * r);
        if rw.is_empty() {
            return;
        }
        let len = rw.len();
        let iw0 = rw.start * s + kw * r - p;
        for od in rd {
            let id = od * s + kd * r - p;
            for oh in rh.clone() {
                let ih = oh * s + kh * r - p;
                let o = (od * self.small[1] + oh) * self.small[2] + rw.start;
                let i = (id * self.big[1] + ih) * self.big[2] + iw0;
                f(o, i, len);
            }
        }
    }

    /// `small[o] += w[t] · big[i]` over all taps.
    pub fn gather<T: Real>(&self, big: &[T], w: &[T], small: &mut [T]) {
        let s = self.stride;
        for (t, &wv) in w.iter().enumerate() {
            if wv == T::zero() {
                continue;
            }
            self.runs(t, |o, i, len| {
                let out = &mut small[o..o + len];
                if s == 1 {
                    for (y, &x) in out.iter_mut().zip(&big[i..i + len]) {
                        *y += wv * x;
                    }
                } else {
                    for (j, y) in out.iter_mut().enumerate() {
                        *y += wv * big[i + j * s];
                    }
                }
            });
        }
    }

    /// `big[i] += w[t] · small[o]` over all taps.
    pub fn scatter<T: Real>(&self, small: &[T], w: &[T], big: &mut [T]) {
        let s = self.stride;
        for (t, &wv) in w.iter().enumerate() {
            if wv == T::zero() {
                continue;
            }
            self.runs(t, |o, i, len| {
                let src = &small[o..o + len];
                if s == 1 {
                    for (x, &y) in big[i..i + len].iter_mut().zip(src) {
                        *x += wv * y;
                    }
                } else {
                    for (j, &y) in src.iter().enumerate() {
                        big[i + j * s] += wv * y;
                    }
                }
            });
        }
    }

    /// `gw[t] += Σ small[o] · big[i]` over all taps.
    pub fn correlate<T: Real>(&self, small: &[T], big: &[T], gw: &mut [T]) {
        let s = self.stride;
        for (t, g) in gw.iter_mut().enumerate() {
            let mut acc = T::zero();
            self.runs(t, |o, i, len| {
                if s == 1 {
                    acc += dot(&small[o..o + len], &big[i..i + len]);
                } else {
                    for j in 0..len {
                        acc += small[o + j] * big[i + j * s];
                    }
                }
            });
            *g += acc;
        }
    }
}

/// Dot product with eight independent accumulators so it vectorises.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Linear-interpolation taps for integer upsampling with half-pixel
/// centres: output `o` reads `(i0, i1, frac)`.
pub(crate) fn upsample_taps(n: usize, scale: usize) -> Vec<(usize, usize, f64)> {
    (0..n * scale)
        .map(|o| {
            let src = ((o as f64 + 0.5) / scale as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            (i0, (i0 + 1).min(n - 1), src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Real>(x: &[T], dims: [usize; 3], scale: usize, y: &mut [T]) {
    let taps = dims.map(|n| upsample_taps(n, scale));
    let [_, h, w] = dims;
    let [_, oh, ow] = dims.map(|n| n * scale);
    let at = |d: usize, hh: usize, ww: usize| x[(d * h + hh) * w + ww];
    for (od, &(d0, d1, fd)) in taps[0].iter().enumerate() {
        let fd = T::of(fd);
        for (ohh, &(h0, h1, fh)) in taps[1].iter().enumerate() {
            let fh = T::of(fh);
            let row = &mut y[(od * oh + ohh) * ow..][..ow];
            for (v, &(w0, w1, fw)) in row.iter_mut().zip(&taps[2]) {
                let fw = T::of(fw);
                // lerp form keeps constant fields exactly constant
                let lerp = |a: T, b: T, f: T| a + f * (b - a);
                let c00 = lerp(at(d0, h0, w0), at(d0, h0, w1), fw);
                let c01 = lerp(at(d0, h1, w0), at(d0, h1, w1), fw);
                let c10 = lerp(at(d1, h0, w0), at(d1, h0, w1), fw);
                let c11 = lerp(at(d1, h1, w0), at(d1, h1, w1), fw);
                *v = lerp(lerp(c00, c01, fh), lerp(c10, c11, fh), fd);
            }
        }
    }
}

pub(crate) fn upsample_backward<T: Real>(gy: &[T], dims: [usize; 3], scale: usize, gx: &mut [T]) {
    let taps = dims.map(|n| upsample_taps(n, scale));
    let [_, h, w] = dims;
    let [_, oh, ow] = dims.map(|n| n * scale);
    let idx = |d: usize, hh: usize, ww: usize| (d * h + hh) * w + ww;
    for (od, &(d0, d1, fd)) in taps[0].iter().enumerate() {
        let fd = T::of(fd);
        for (ohh, &(h0, h1, fh)) in taps[1].iter().enumerate() {
            let fh = T::of(fh);
            let row = &gy[(od * oh + ohh) * ow..][..ow];
            for (&g, &(w0, w1, fw)) in row.iter().zip(&taps[2]) {
                let fw = T::of(fw);
                let one = T::one();
                for (dd, wd) in [(d0, one - fd), (d1, fd)] {
                    for (hh, wh) in [(h0, one - fh), (h1, fh)] {
                        let gdh = g * wd * wh;
                        gx[idx(dd, hh, w0)] += gdh * (one - fw);
                        gx[idx(dd, hh, w1)] += gdh * fw;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_ranges() {
        // n=5, k=3, p=1, s=1: tap 0 covers outputs 1..5, tap 2 covers 0..4
        assert_eq!(tap_range(5, 5, 1, 1, 0), 1..5);
        assert_eq!(tap_range(5, 5, 1, 1, 1), 0..5);
        assert_eq!(tap_range(5, 5, 1, 1, 2), 0..4);
        // stride 2, no padding
        assert_eq!(tap_range(8, 4, 2, 0, 1), 0..4);
        // dilation pushes a tap entirely outside
        assert_eq!(tap_range(2, 2, 1, 0, 4), 0..0);
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..19).map(|i| 3.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn upsample_constant() {
        let x = vec![2.5f64; 2 * 3 * 4];
        let mut y = vec![0.0; 8 * 12 * 16];
        upsample_forward(&x, [2, 3, 4], 4, &mut y);
        assert!(y.iter().all(|&v| v == 2.5));
        let x = vec![0.1f32; 8];
        let mut y = vec![0.0; 64];
        upsample_forward(&x, [2, 2, 2], 2, &mut y);
        assert!(y.iter().all(|&v| v == 0.1));
    }
}
