//! FFT, convolution, windows, fractional-delay taps and Welch spectra.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

pub fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

/// Unnormalized forward DFT of `x` zero padded (or truncated) to `len`.
pub fn fft_real(x: &[f64], len: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().take(len).map(|&v| Complex64::new(v, 0.0)).collect();
    buf.resize(len, Complex64::new(0.0, 0.0));
    plan(len, false).process(&mut buf);
    buf
}

pub fn fft_in_place(buf: &mut [Complex64]) {
    plan(buf.len(), false).process(buf);
}

/// Inverse DFT including the 1/N factor.
pub fn ifft(spectrum: &[Complex64]) -> Vec<Complex64> {
    let mut buf = spectrum.to_vec();
    plan(buf.len(), true).process(&mut buf);
    let scale = 1.0 / buf.len() as f64;
    buf.iter_mut().for_each(|v| *v *= scale);
    buf
}

/// Real part of the inverse DFT.
pub fn ifft_real(spectrum: &[Complex64]) -> Vec<f64> {
    ifft(spectrum).into_iter().map(|v| v.re).collect()
}

/// Rebuilds a full Hermitian spectrum of length `len` from bins `0..=len/2`.
pub fn hermitian_extend(half: &[Complex64], len: usize) -> Vec<Complex64> {
    let mut full = vec![Complex64::new(0.0, 0.0); len];
    for (k, v) in half.iter().enumerate().take(len / 2 + 1) {
        full[k] = *v;
        if k != 0 && 2 * k != len {
            full[len - k] = v.conj();
        }
    }
    full
}

/// Linear convolution truncated to `out_len` samples.
pub fn convolve(a: &[f64], b: &[f64], out_len: usize) -> Vec<f64> {
    if a.is_empty() || b.is_empty() || out_len == 0 {
        return vec![0.0; out_len];
    }
    // samples past out_len in either input cannot reach the kept prefix
    let a = &a[..a.len().min(out_len)];
    let b = &b[..b.len().min(out_len)];
    let full = a.len() + b.len() - 1;
    let n = next_pow2(full);
    let fa = fft_real(a, n);
    let fb = fft_real(b, n);
    let prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    let mut y = ifft_real(&prod);
    y.truncate(out_len.min(full));
    y.resize(out_len, 0.0);
    y
}

/// Symmetric Hann window of `n` points.
pub fn hann_symmetric(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / (n - 1) as f64).cos()))
        .collect()
}

/// Periodic Hann window of `n` points.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Half-width, in samples, of the fractional-delay interpolator.
pub const FRAC_DELAY_HALF_WIDTH: usize = 2;

/// Hann-windowed sinc taps placing a unit impulse at fractional `delay`.
///
/// Returns the index of the first tap and four weights covering
/// `floor(delay) - 1 ..= floor(delay) + 2`. Weights sum to one; an integer
/// delay yields a single unit tap.
pub fn fractional_delay_taps(delay: f64) -> (isize, [f64; 4]) {
    let base = delay.floor();
    let start = base as isize - 1;
    let mut w = [0.0; 4];
    if delay == base {
        w[1] = 1.0;
        return (start, w);
    }
    // sin(pi(j - f)) alternates in sign; the Hann terms are quarter-turn shifts
    let f = delay - base;
    let (sh, ch) = (0.5 * PI * f).sin_cos();
    let s = 2.0 * sh * ch;
    let hann = [1.0 - sh, 1.0 + ch, 1.0 + sh, 1.0 - ch];
    let sines = [s, -s, s, -s];
    for (i, wi) in w.iter_mut().enumerate() {
        let x = i as f64 - 1.0 - f;
        *wi = sines[i] / (PI * x) * 0.5 * hann[i];
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    (start, w)
}

/// Adds `amplitude` times a fractional-delay impulse into `buf`, dropping taps
/// that fall outside it.
pub fn add_fractional_impulse(buf: &mut [f64], delay: f64, amplitude: f64) {
    let (start, w) = fractional_delay_taps(delay);
    for (i, wi) in w.iter().enumerate() {
        let idx = start + i as isize;
        if idx >= 0 && (idx as usize) < buf.len() && *wi != 0.0 {
            buf[idx as usize] += amplitude * wi;
        }
    }
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

/// Population variance.
pub fn variance(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Welch-averaged cross spectrum `mean(conj(X_seg) * Y_seg)` over Hann
/// windowed segments, full `seg_len` bins.
///
/// Returns the spectrum and the number of segments averaged.
pub fn welch_cross_spectrum(x: &[f64], y: &[f64], seg_len: usize, hop: usize) -> (Vec<Complex64>, usize) {
    let n = x.len().min(y.len());
    let win = hann_periodic(seg_len);
    let mut acc = vec![Complex64::new(0.0, 0.0); seg_len];
    let mut count = 0;
    let mut start = 0;
    while start + seg_len <= n {
        let xs: Vec<f64> = (0..seg_len).map(|i| x[start + i] * win[i]).collect();
        let ys: Vec<f64> = (0..seg_len).map(|i| y[start + i] * win[i]).collect();
        let fx = fft_real(&xs, seg_len);
        let fy = fft_real(&ys, seg_len);
        for k in 0..seg_len {
            acc[k] += fx[k].conj() * fy[k];
        }
        count += 1;
        start += hop;
    }
    if count > 0 {
        acc.iter_mut().for_each(|v| *v /= count as f64);
    }
    (acc, count)
}
