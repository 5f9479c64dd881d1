//! Short-time spectra, per-bin spatial covariance, MPDR beamforming and a
//! broadband steered-response-power azimuth scan.

use std::f64::consts::{PI, TAU};
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, ArrayGeometry};
use crate::room::MultichannelRecording;

pub type CMatrix = DMatrix<Complex64>;

/// One-sided short-time spectra of every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct StftFrames {
    /// `frames[t][m][k]`.
    pub frames: Vec<Vec<Vec<Complex64>>>,
    pub frame_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub sample_rate: f64,
    /// Length of the analysed signal.
    pub signal_len: usize,
}

impl StftFrames {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn bin_count(&self) -> usize {
        self.fft_len / 2 + 1
    }

    pub fn mic_count(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn bin_freq(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate / self.fft_len as f64
    }

    /// Frames whose support intersects samples `[start, end)`.
    pub fn frames_overlapping(&self, start: usize, end: usize) -> Range<usize> {
        let t = self.frame_count();
        let first = (0..t).find(|&i| i * self.hop + self.frame_len > start).unwrap_or(t);
        let last = (0..t).rev().find(|&i| i * self.hop < end).map_or(0, |i| i + 1);
        first..last.max(first)
    }
}

/// Symmetric Hann, 50% overlap frames.
pub fn stft(rec: &MultichannelRecording, frame_len: usize, hop: usize) -> Result<StftFrames> {
    if frame_len < 2 {
        return Err(Error::invalid("frame_len", "must be at least 2"));
    }
    if hop == 0 || hop > frame_len {
        return Err(Error::invalid("hop", format!("must be in 1..={frame_len}")));
    }
    let n = rec.len();
    if n < frame_len {
        return Err(Error::TooShort { len: n, frame: frame_len });
    }
    let window = dsp::hann_symmetric(frame_len);
    let count = (n - frame_len) / hop + 1;
    let bins = frame_len / 2 + 1;
    let frames = (0..count)
        .into_par_iter()
        .map(|t| {
            rec.channels
                .iter()
                .map(|ch| {
                    let seg: Vec<f64> = ch[t * hop..t * hop + frame_len]
                        .iter()
                        .zip(&window)
                        .map(|(x, w)| x * w)
                        .collect();
                    let mut spec = dsp::fft_real(&seg, frame_len);
                    spec.truncate(bins);
                    spec
                })
                .collect()
        })
        .collect();
    Ok(StftFrames {
        frames,
        frame_len,
        hop,
        fft_len: frame_len,
        sample_rate: rec.sample_rate,
        signal_len: n,
    })
}

/// Overlap-add synthesis normalized by the summed analysis window. Samples
/// where the window sum vanishes (the outer ends of the first and last
/// frames) come back as zero.
pub fn istft(frames: &StftFrames) -> MultichannelRecording {
    let l = frames.frame_len;
    let window = dsp::hann_symmetric(l);
    let mut wsum = vec![0.0; frames.signal_len];
    for t in 0..frames.frame_count() {
        for (i, w) in window.iter().enumerate() {
            wsum[t * frames.hop + i] += w;
        }
    }
    let m = frames.mic_count();
    let mut channels = vec![vec![0.0; frames.signal_len]; m];
    for (t, frame) in frames.frames.iter().enumerate() {
        for (ch, spec) in channels.iter_mut().zip(frame) {
            let seg = dsp::ifft_real(&dsp::hermitian_extend(spec, frames.fft_len));
            for (i, v) in seg.iter().take(l).enumerate() {
                ch[t * frames.hop + i] += v;
            }
        }
    }
    for ch in channels.iter_mut() {
        for (v, w) in ch.iter_mut().zip(&wsum) {
            *v = if *w > 1e-12 { *v / w } else { 0.0 };
        }
    }
    MultichannelRecording {
        channels,
        sample_rate: frames.sample_rate,
    }
}

/// Spatial covariance of every one-sided bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BinCovariance {
    pub matrices: Vec<CMatrix>,
    pub frame_count: usize,
    pub fft_len: usize,
    pub sample_rate: f64,
}

impl BinCovariance {
    pub fn mic_count(&self) -> usize {
        self.matrices.first().map_or(0, |m| m.nrows())
    }

    pub fn bin_freq(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate / self.fft_len as f64
    }
}

/// `R(ω) = (1/T) Σ_t Y(t,ω) Y(t,ω)ᴴ` over all frames.
pub fn estimate_covariance(frames: &StftFrames) -> Result<BinCovariance> {
    estimate_covariance_over(frames, 0..frames.frame_count())
}

/// Sample covariance over a subset of frames.
pub fn estimate_covariance_over(frames: &StftFrames, range: Range<usize>) -> Result<BinCovariance> {
    let t = range.len();
    if t == 0 || range.end > frames.frame_count() {
        return Err(Error::invalid(
            "frames",
            format!("need a non-empty frame range within 0..{}", frames.frame_count()),
        ));
    }
    let m = frames.mic_count();
    let matrices = (0..frames.bin_count())
        .into_par_iter()
        .map(|k| {
            let mut r = CMatrix::zeros(m, m);
            for frame in &frames.frames[range.clone()] {
                let y = DVector::from_iterator(m, frame.iter().map(|ch| ch[k]));
                r += &y * y.adjoint();
            }
            let mut r = r / Complex64::new(t as f64, 0.0);
            // exact Hermitian symmetry despite rounding
            let rh = r.adjoint();
            r = (r + rh) * Complex64::new(0.5, 0.0);
            r
        })
        .collect();
    Ok(BinCovariance {
        matrices,
        frame_count: t,
        fft_len: frames.fft_len,
        sample_rate: frames.sample_rate,
    })
}

/// Diagonal loading `(1−γ)R + γ·Tr{R}/M·I`.
pub fn regularize(cov: &BinCovariance, gamma: f64) -> Result<BinCovariance> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid("gamma", format!("must lie in [0, 1], got {gamma}")));
    }
    let matrices = cov
        .matrices
        .iter()
        .map(|r| {
            let m = r.nrows();
            let load = gamma * r.trace().re / m as f64;
            let mut out = r * Complex64::new(1.0 - gamma, 0.0);
            for i in 0..m {
                out[(i, i)] += load;
            }
            out
        })
        .collect();
    Ok(BinCovariance {
        matrices,
        ..cov.clone()
    })
}

/// Hermitian positive-definite factorization reused across steering
/// directions.
pub struct MpdrSolver {
    chol: nalgebra::linalg::Cholesky<Complex64, nalgebra::Dyn>,
}

impl MpdrSolver {
    pub fn new(cov: &CMatrix) -> Result<Self> {
        let chol = cov.clone().cholesky().ok_or(Error::SingularMatrix)?;
        Ok(Self { chol })
    }

    /// `R⁻¹d / (dᴴR⁻¹d)`.
    pub fn weights(&self, steer: &[Complex64]) -> Result<Vec<Complex64>> {
        let d = DVector::from_column_slice(steer);
        let x = self.chol.solve(&d);
        let denom = d.dotc(&x);
        if !(denom.re > 0.0) || !denom.re.is_finite() {
            return Err(Error::SingularMatrix);
        }
        Ok(x.iter().map(|v| v / denom).collect())
    }
}

/// MPDR weights for one bin.
pub fn mpdr_weights(cov: &CMatrix, steer: &[Complex64]) -> Result<Vec<Complex64>> {
    if cov.nrows() != steer.len() || cov.ncols() != steer.len() {
        return Err(Error::ChannelMismatch {
            expected: cov.nrows(),
            got: steer.len(),
        });
    }
    MpdrSolver::new(cov)?.weights(steer)
}

/// `wᴴ R w`.
pub fn output_power(cov: &CMatrix, w: &[Complex64]) -> f64 {
    let w = DVector::from_column_slice(w);
    w.dotc(&(cov * &w)).re
}

/// Azimuth grid at fixed elevation plus the frequency band summed over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamGrid {
    pub azimuth_step: f64,
    pub elevation: f64,
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
}

impl Default for BeamGrid {
    fn default() -> Self {
        Self {
            azimuth_step: PI / 180.0,
            elevation: PI / 2.0,
            band_lo_hz: 300.0,
            band_hi_hz: 8000.0,
        }
    }
}

impl BeamGrid {
    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        if !(self.azimuth_step > 0.0 && self.azimuth_step <= TAU) {
            return Err(Error::invalid("azimuth_step", "must lie in (0, 2π]"));
        }
        let count = (TAU / self.azimuth_step).round();
        if (count * self.azimuth_step - TAU).abs() > 1e-9 {
            return Err(Error::invalid("azimuth_step", "must divide 2π"));
        }
        if !(self.band_lo_hz >= 0.0 && self.band_lo_hz < self.band_hi_hz && self.band_hi_hz <= sample_rate / 2.0) {
            return Err(Error::invalid(
                "band_hi_hz",
                format!(
                    "need 0 ≤ band_lo_hz < band_hi_hz ≤ Nyquist ({}), got {}..{}",
                    sample_rate / 2.0,
                    self.band_lo_hz,
                    self.band_hi_hz
                ),
            ));
        }
        Ok(())
    }

    /// Scan azimuths starting at −π.
    pub fn azimuths(&self) -> Vec<f64> {
        let count = (TAU / self.azimuth_step).round() as usize;
        (0..count).map(|i| -PI + i as f64 * self.azimuth_step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoaEstimate {
    /// Radians in the array frame, in `[−π, π)`.
    pub azimuth: f64,
    /// Steered response power at the peak.
    pub power: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrpScan {
    pub estimate: DoaEstimate,
    pub azimuths: Vec<f64>,
    pub power: Vec<f64>,
}

impl SrpScan {
    /// `azimuth_deg,power` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("azimuth_deg,power\n");
        for (a, p) in self.azimuths.iter().zip(&self.power) {
            out.push_str(&format!("{},{}\n", a.to_degrees(), p));
        }
        out
    }
}

/// Sums MPDR output power over the band for each azimuth and returns the
/// maximizer, earliest azimuth on ties.
pub fn srp_scan(cov: &BinCovariance, geom: &ArrayGeometry, grid: &BeamGrid) -> Result<SrpScan> {
    geom.validate()?;
    grid.validate(cov.sample_rate)?;
    if cov.mic_count() != geom.mic_count {
        return Err(Error::ChannelMismatch {
            expected: geom.mic_count,
            got: cov.mic_count(),
        });
    }
    let bins: Vec<usize> = (0..cov.matrices.len())
        .filter(|&k| {
            let f = cov.bin_freq(k);
            f >= grid.band_lo_hz && f <= grid.band_hi_hz
        })
        .collect();
    if bins.is_empty() {
        return Err(Error::invalid("band", "no frequency bin falls inside the band"));
    }
    // wᴴR̄w = 1/(dᴴR̄⁻¹d) for the MPDR weights of R̄ itself
    let inverses = bins
        .iter()
        .map(|&k| {
            let chol = cov.matrices[k].clone().cholesky().ok_or(Error::SingularMatrix)?;
            Ok(chol.inverse())
        })
        .collect::<Result<Vec<_>>>()?;
    let m = geom.mic_count;
    let azimuths = grid.azimuths();
    let power = azimuths
        .par_iter()
        .map(|&az| {
            let tdoas = (0..m)
                .map(|i| crate::geometry::tdoa(geom, az, grid.elevation, i))
                .collect::<Result<Vec<f64>>>()?;
            let mut total = 0.0;
            let mut d = vec![Complex64::new(0.0, 0.0); m];
            for (&k, inv) in bins.iter().zip(&inverses) {
                let omega = TAU * k as f64 / cov.fft_len as f64;
                for (di, t) in d.iter_mut().zip(&tdoas) {
                    *di = Complex64::from_polar(1.0, -omega * t);
                }
                let mut q = Complex64::new(0.0, 0.0);
                for i in 0..m {
                    let mut row = Complex64::new(0.0, 0.0);
                    for j in 0..m {
                        row += inv[(i, j)] * d[j];
                    }
                    q += d[i].conj() * row;
                }
                if !(q.re > 0.0) || !q.re.is_finite() {
                    return Err(Error::SingularMatrix);
                }
                total += 1.0 / q.re;
            }
            Ok(total)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (best, &p) = power
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, &f64)>, (i, v)| match acc {
            Some((_, b)) if v <= b => acc,
            _ => Some((i, v)),
        })
        .expect("non-empty grid");
    Ok(SrpScan {
        estimate: DoaEstimate {
            azimuth: wrap_angle(azimuths[best]),
            power: p.max(0.0),
        },
        azimuths,
        power,
    })
}

/// Front-end and beamformer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoaConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub gamma: f64,
    pub grid: BeamGrid,
}

impl Default for DoaConfig {
    fn default() -> Self {
        Self {
            frame_len: 882,
            hop: 441,
            gamma: 0.1,
            grid: BeamGrid::default(),
        }
    }
}

impl DoaConfig {
    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        if self.frame_len < 2 {
            return Err(Error::invalid("frame_len", "must be at least 2"));
        }
        if self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::invalid("hop", "must be in 1..=frame_len"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma", "must lie in [0, 1]"));
        }
        self.grid.validate(sample_rate)
    }
}

/// Echo direction from the frames that overlap the echo segment
/// `[tau, tau + echo_len)` of a direct-path-free recording.
pub fn estimate_echo_doa(
    rec: &MultichannelRecording,
    geom: &ArrayGeometry,
    tau: f64,
    echo_len: usize,
    cfg: &DoaConfig,
) -> Result<SrpScan> {
    cfg.validate(rec.sample_rate)?;
    let frames = stft(rec, cfg.frame_len, cfg.hop)?;
    let start = tau.max(0.0).floor() as usize;
    let mut range = frames.frames_overlapping(start, start + echo_len.max(1));
    if range.is_empty() {
        range = 0..frames.frame_count();
    }
    let cov = estimate_covariance_over(&frames, range)?;
    let cov = regularize(&cov, cfg.gamma)?;
    srp_scan(&cov, geom, &cfg.grid)
}
