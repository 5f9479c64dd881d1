//! Echo delay and gain estimation on the reference microphone.
//!
//! The observation spectrum `Y` is matched against the delayed probe
//! spectrum `Z̄(τ) = Z(τ) ⊙ S`. For a single echo the least-squares gain has
//! a closed form and the delay maximizes `Re{Yᴴ Z̄(τ)}` over a grid; several
//! echoes are peeled off one at a time and then refined against each other.

use std::f64::consts::TAU;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};

/// How the metric search interval maps to delays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMode {
    /// Interval is the reflector range; delay covers the round trip.
    #[default]
    Range,
    /// Interval is the total propagation path length.
    PathLength,
}

impl IntervalMode {
    fn path_factor(self) -> f64 {
        match self {
            IntervalMode::Range => 2.0,
            IntervalMode::PathLength => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreqDomainConfig {
    /// DFT length K.
    pub dft_len: usize,
    pub search_min_m: f64,
    pub search_max_m: f64,
    /// Delay grid spacing in samples.
    pub grid_step: f64,
    pub interval: IntervalMode,
    pub sample_rate: f64,
    pub speed_of_sound: f64,
}

impl FreqDomainConfig {
    /// 1–2 m reflector range, integer grid, K the next power of two at or
    /// above the observation length.
    pub fn for_observation(obs_len: usize, sample_rate: f64, speed_of_sound: f64) -> Self {
        Self {
            dft_len: dsp::next_pow2(obs_len),
            search_min_m: 1.0,
            search_max_m: 2.0,
            grid_step: 1.0,
            interval: IntervalMode::Range,
            sample_rate,
            speed_of_sound,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dft_len == 0 {
            return Err(Error::invalid("dft_len", "must be positive"));
        }
        if !(self.search_min_m > 0.0 && self.search_min_m < self.search_max_m) {
            return Err(Error::invalid(
                "search_min_m",
                format!(
                    "need 0 < search_min_m < search_max_m, got {} and {}",
                    self.search_min_m, self.search_max_m
                ),
            ));
        }
        if !(self.grid_step > 0.0 && self.grid_step.is_finite()) {
            return Err(Error::invalid("grid_step", "must be positive"));
        }
        Ok(())
    }

    /// Meters of interval to samples of delay.
    pub fn meters_to_samples(&self, m: f64) -> f64 {
        m * self.interval.path_factor() * self.sample_rate / self.speed_of_sound
    }

    /// Samples of round-trip delay to reflector range in meters.
    pub fn samples_to_range(&self, tau: f64) -> f64 {
        tau * self.speed_of_sound / (2.0 * self.sample_rate)
    }

    pub fn tau_bounds(&self) -> (f64, f64) {
        (self.meters_to_samples(self.search_min_m), self.meters_to_samples(self.search_max_m))
    }

    /// Candidate delays. With a unit step the grid is the integers inside the
    /// interval; otherwise it starts at the lower bound.
    pub fn tau_grid(&self) -> Vec<f64> {
        let (lo, hi) = self.tau_bounds();
        if self.grid_step == 1.0 {
            let a = lo.ceil() as i64;
            let b = hi.floor() as i64;
            return (a..=b).map(|t| t as f64).collect();
        }
        let n = ((hi - lo) / self.grid_step).floor() as usize;
        (0..=n).map(|i| lo + i as f64 * self.grid_step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToaEstimate {
    /// Delay in samples.
    pub tau: f64,
    pub gain: f64,
    /// Objective `Re{Yᴴ Z̄(τ)}` at the estimate.
    pub score: f64,
    /// The maximum sits on an end of the search grid, so the true peak may
    /// lie outside the interval.
    pub at_boundary: bool,
}

/// JSON export record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToaRecord {
    pub tau_samples: f64,
    pub range_m: f64,
    pub gain: f64,
    pub score: f64,
}

impl ToaEstimate {
    pub fn record(&self, cfg: &FreqDomainConfig) -> ToaRecord {
        ToaRecord {
            tau_samples: self.tau,
            range_m: cfg.samples_to_range(self.tau),
            gain: self.gain,
            score: self.score,
        }
    }
}

/// `Z(τ)_k = exp(-j τ 2π k / K)`.
pub fn delay_phasor(tau: f64, cfg: &FreqDomainConfig) -> Vec<Complex64> {
    let k_len = cfg.dft_len as f64;
    (0..cfg.dft_len)
        .map(|k| {
            // reduce the phase modulo 2π exactly for integer delays
            let turns = if tau.fract() == 0.0 {
                ((k as u128 * tau.rem_euclid(k_len) as u128) % cfg.dft_len as u128) as f64 / k_len
            } else {
                (tau * k as f64 / k_len).rem_euclid(1.0)
            };
            Complex64::from_polar(1.0, -TAU * turns)
        })
        .collect()
}

/// Unnormalized K-point spectrum of a real signal.
pub fn spectrum(x: &[f64], cfg: &FreqDomainConfig) -> Vec<Complex64> {
    dsp::fft_real(x, cfg.dft_len)
}

fn check_lengths(obs: &[Complex64], probe: &[Complex64], cfg: &FreqDomainConfig) -> Result<()> {
    if obs.len() != cfg.dft_len || probe.len() != cfg.dft_len {
        return Err(Error::invalid(
            "dft_len",
            format!(
                "spectra have {} and {} bins, config expects {}",
                obs.len(),
                probe.len(),
                cfg.dft_len
            ),
        ));
    }
    Ok(())
}

/// Least-squares gain `(Yᴴ Z̄ + Z̄ᴴ Y) / (2 Z̄ᴴ Z̄)` of the probe delayed by
/// `tau`.
pub fn estimate_gain(obs: &[Complex64], tau: f64, probe: &[Complex64], cfg: &FreqDomainConfig) -> Result<f64> {
    check_lengths(obs, probe, cfg)?;
    let z = delay_phasor(tau, cfg);
    let mut yz = Complex64::new(0.0, 0.0);
    let mut zz = 0.0;
    for ((y, s), zk) in obs.iter().zip(probe).zip(&z) {
        let zbar = zk * s;
        yz += y.conj() * zbar;
        zz += zbar.norm_sqr();
    }
    if zz == 0.0 {
        return Err(Error::ZeroEnergyProbe);
    }
    let zy = yz.conj();
    Ok(((yz + zy) / (2.0 * zz)).re)
}

/// Evaluates `Re{Yᴴ Z̄(τ)}` over many delays with one twiddle table.
struct Objective {
    cross: Vec<Complex64>,
    twiddle: Vec<Complex64>,
}

impl Objective {
    fn new(obs: &[Complex64], probe: &[Complex64]) -> Self {
        let k = obs.len();
        let cross = obs.iter().zip(probe).map(|(y, s)| y.conj() * s).collect();
        let twiddle = (0..k).map(|i| Complex64::from_polar(1.0, -TAU * i as f64 / k as f64)).collect();
        Self { cross, twiddle }
    }

    fn eval(&self, tau: f64) -> f64 {
        let k = self.cross.len();
        if tau.fract() == 0.0 {
            let step = tau.rem_euclid(k as f64) as usize;
            let mut idx = 0usize;
            let mut acc = 0.0;
            for c in &self.cross {
                let t = self.twiddle[idx];
                acc += c.re * t.re - c.im * t.im;
                idx += step;
                if idx >= k {
                    idx -= k;
                }
            }
            acc
        } else {
            self.cross
                .iter()
                .enumerate()
                .map(|(i, c)| (c * Complex64::from_polar(1.0, -TAU * (tau * i as f64 / k as f64).rem_euclid(1.0))).re)
                .sum()
        }
    }
}

/// Objective value at each grid delay.
pub fn objective_curve(obs: &[Complex64], probe: &[Complex64], cfg: &FreqDomainConfig) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    check_lengths(obs, probe, cfg)?;
    let obj = Objective::new(obs, probe);
    Ok(cfg.tau_grid().into_iter().map(|t| (t, obj.eval(t))).collect())
}

/// Grid maximizer of `Re{Yᴴ Z̄(τ)}`, earliest delay on ties.
pub fn estimate_toa(obs: &[Complex64], probe: &[Complex64], cfg: &FreqDomainConfig) -> Result<ToaEstimate> {
    Ok(estimate_toa_with_curve(obs, probe, cfg)?.0)
}

/// [`estimate_toa`] that also returns the objective over the grid.
pub fn estimate_toa_with_curve(
    obs: &[Complex64],
    probe: &[Complex64],
    cfg: &FreqDomainConfig,
) -> Result<(ToaEstimate, Vec<(f64, f64)>)> {
    let curve = objective_curve(obs, probe, cfg)?;
    if curve.is_empty() {
        return Err(Error::EmptySearchGrid);
    }
    let (best_i, &(tau, score)) = curve
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, &(f64, f64))>, (i, p)| match best {
            Some((_, b)) if p.1 <= b.1 => best,
            _ => Some((i, p)),
        })
        .expect("non-empty curve");
    let gain = estimate_gain(obs, tau, probe, cfg)?;
    let est = ToaEstimate {
        tau,
        gain,
        score,
        at_boundary: best_i == 0 || best_i + 1 == curve.len(),
    };
    Ok((est, curve))
}

/// Fractional offset of the vertex of the parabola through three equally
/// spaced samples, in grid steps from the middle one.
pub fn parabolic_offset(left: f64, mid: f64, right: f64) -> f64 {
    let denom = left - 2.0 * mid + right;
    if denom >= 0.0 {
        0.0
    } else {
        (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
    }
}

/// [`estimate_toa`] followed by parabolic interpolation of the objective
/// around an interior maximum.
pub fn estimate_toa_refined(obs: &[Complex64], probe: &[Complex64], cfg: &FreqDomainConfig) -> Result<ToaEstimate> {
    let est = estimate_toa(obs, probe, cfg)?;
    if est.at_boundary {
        return Ok(est);
    }
    let obj = Objective::new(obs, probe);
    let step = cfg.grid_step;
    let off = parabolic_offset(obj.eval(est.tau - step), est.score, obj.eval(est.tau + step));
    let tau = est.tau + off * step;
    Ok(ToaEstimate {
        tau,
        gain: estimate_gain(obs, tau, probe, cfg)?,
        score: obj.eval(tau),
        at_boundary: false,
    })
}

fn subtract_component(residual: &mut [Complex64], est: &ToaEstimate, probe: &[Complex64], cfg: &FreqDomainConfig) {
    add_component(residual, est, probe, cfg, -1.0);
}

fn add_component(residual: &mut [Complex64], est: &ToaEstimate, probe: &[Complex64], cfg: &FreqDomainConfig, sign: f64) {
    let z = delay_phasor(est.tau, cfg);
    for ((r, s), zk) in residual.iter_mut().zip(probe).zip(&z) {
        *r += sign * est.gain * zk * s;
    }
}

/// Estimates `num_reflections` echoes by repeated strongest-echo extraction
/// and subtraction, then re-estimates each against the residual of the
/// others once. Results are sorted by delay.
pub fn sequential_relax(
    obs: &[Complex64],
    probe: &[Complex64],
    num_reflections: usize,
    cfg: &FreqDomainConfig,
) -> Result<Vec<ToaEstimate>> {
    sequential_relax_with_passes(obs, probe, num_reflections, 1, cfg)
}

/// [`sequential_relax`] with a configurable number of refinement passes.
pub fn sequential_relax_with_passes(
    obs: &[Complex64],
    probe: &[Complex64],
    num_reflections: usize,
    refinement_passes: usize,
    cfg: &FreqDomainConfig,
) -> Result<Vec<ToaEstimate>> {
    cfg.validate()?;
    check_lengths(obs, probe, cfg)?;
    if num_reflections == 0 {
        return Err(Error::invalid("num_reflections", "must be at least 1"));
    }
    let grid_len = cfg.tau_grid().len();
    if num_reflections > grid_len {
        return Err(Error::invalid(
            "num_reflections",
            format!("{num_reflections} exceeds the {grid_len}-point delay grid"),
        ));
    }
    let mut residual = obs.to_vec();
    let mut comps = Vec::with_capacity(num_reflections);
    for _ in 0..num_reflections {
        let est = estimate_toa(&residual, probe, cfg)?;
        subtract_component(&mut residual, &est, probe, cfg);
        comps.push(est);
    }
    if num_reflections > 1 {
        for _ in 0..refinement_passes {
            for i in 0..comps.len() {
                // residual + own contribution = observation minus the others
                add_component(&mut residual, &comps[i], probe, cfg, 1.0);
                let est = estimate_toa(&residual, probe, cfg)?;
                subtract_component(&mut residual, &est, probe, cfg);
                comps[i] = est;
            }
        }
    }
    comps.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    Ok(comps)
}

/// Residual energy `‖Y − Σ ĝ Z̄(τ̂)‖²` after removing the given components.
pub fn residual_energy(obs: &[Complex64], probe: &[Complex64], comps: &[ToaEstimate], cfg: &FreqDomainConfig) -> f64 {
    let mut r = obs.to_vec();
    for c in comps {
        subtract_component(&mut r, c, probe, cfg);
    }
    r.iter().map(|v| v.norm_sqr()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::generate_probe;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn cfg_for(n: usize) -> FreqDomainConfig {
        FreqDomainConfig::for_observation(n, 22050.0, 343.0)
    }

    /// Observation made of delayed, scaled copies of the probe, built in the
    /// time domain.
    fn echoes(probe: &[f64], n: usize, comps: &[(usize, f64)]) -> Vec<f64> {
        let mut y = vec![0.0; n];
        for &(d, g) in comps {
            for (i, s) in probe.iter().enumerate() {
                if i + d < n {
                    y[i + d] += g * s;
                }
            }
        }
        y
    }

    #[test]
    fn phasor_special_delays() {
        let cfg = cfg_for(1024);
        assert!(delay_phasor(0.0, &cfg).iter().all(|z| (z - 1.0).norm() < 1e-15));
        assert!(delay_phasor(1024.0, &cfg).iter().all(|z| (z - 1.0).norm() < 1e-12));
    }

    #[test]
    fn phasor_shifts_an_impulse() {
        let cfg = cfg_for(256);
        let mut imp = vec![0.0; 256];
        imp[0] = 1.0;
        let s = spectrum(&imp, &cfg);
        for tau in [0usize, 1, 17, 200] {
            let z = delay_phasor(tau as f64, &cfg);
            let prod: Vec<_> = z.iter().zip(&s).map(|(a, b)| a * b).collect();
            let back = dsp::ifft_real(&prod);
            for (i, v) in back.iter().enumerate() {
                let e = if i == tau { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(*v, e, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gain_cases() {
        let p = generate_probe(300, 1024, 22050.0, 3).unwrap();
        let cfg = cfg_for(1024);
        let s = spectrum(&p.samples, &cfg);
        let zero = vec![Complex64::new(0.0, 0.0); cfg.dft_len];
        assert_eq!(estimate_gain(&zero, 40.0, &s, &cfg).unwrap(), 0.0);
        let z = delay_phasor(150.0, &cfg);
        let y: Vec<_> = z.iter().zip(&s).map(|(a, b)| 0.7 * a * b).collect();
        assert_abs_diff_eq!(estimate_gain(&y, 150.0, &s, &cfg).unwrap(), 0.7, epsilon = 1e-10);
        assert!(matches!(estimate_gain(&y, 150.0, &zero, &cfg), Err(Error::ZeroEnergyProbe)));
    }

    #[test]
    fn gain_under_noise_is_unbiased_to_five_percent() {
        let p = generate_probe(1500, 4096, 22050.0, 11).unwrap();
        let cfg = cfg_for(4096);
        let s = spectrum(&p.samples, &cfg);
        let tau0 = 190;
        let mut rng = crate::seed::rng(5);
        let clean = echoes(&p.samples, 4096, &[(tau0, 0.4)]);
        let sig_var = dsp::variance(&clean);
        let sigma = (sig_var / 100.0).sqrt();
        for _ in 0..50 {
            let y: Vec<f64> = clean
                .iter()
                .map(|v| v + sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let g = estimate_gain(&spectrum(&y, &cfg), tau0 as f64, &s, &cfg).unwrap();
            assert!((g - 0.4).abs() < 0.05 * 0.4, "gain {g}");
        }
    }

    #[test]
    fn noiseless_echo_is_found_exactly() {
        let p = generate_probe(1500, 20000, 22050.0, 1).unwrap();
        let cfg = cfg_for(20000);
        let s = spectrum(&p.samples, &cfg);
        for tau0 in [130usize, 193, 250] {
            let y = echoes(&p.samples, 20000, &[(tau0, 0.05)]);
            let est = estimate_toa(&spectrum(&y, &cfg), &s, &cfg).unwrap();
            assert_eq!(est.tau, tau0 as f64);
            assert_abs_diff_eq!(est.gain, 0.05, epsilon = 1e-10);
            assert!(!est.at_boundary);
        }
    }

    #[test]
    fn echo_outside_interval_lands_on_boundary() {
        let p = generate_probe(1500, 20000, 22050.0, 2).unwrap();
        let cfg = cfg_for(20000);
        let s = spectrum(&p.samples, &cfg);
        let y = echoes(&p.samples, 20000, &[(385, 0.05)]);
        let est = estimate_toa(&spectrum(&y, &cfg), &s, &cfg).unwrap();
        let grid = cfg.tau_grid();
        assert!(est.tau >= grid[0] && est.tau <= *grid.last().unwrap());
        let curve = objective_curve(&spectrum(&y, &cfg), &s, &cfg).unwrap();
        let max = curve.iter().map(|c| c.1).fold(f64::MIN, f64::max);
        assert_eq!(est.score, max);
    }

    #[test]
    fn grid_covers_round_trip_interval() {
        let cfg = cfg_for(20000);
        let g = cfg.tau_grid();
        assert_eq!(g[0], 129.0);
        assert_eq!(*g.last().unwrap(), 257.0);
        let path = FreqDomainConfig {
            interval: IntervalMode::PathLength,
            ..cfg
        };
        assert_eq!(path.tau_grid()[0], 65.0);
        let empty = FreqDomainConfig {
            search_min_m: 1.0,
            search_max_m: 1.001,
            ..cfg
        };
        assert!(matches!(
            estimate_toa(&vec![Complex64::new(0.0, 0.0); cfg.dft_len], &vec![Complex64::new(1.0, 0.0); cfg.dft_len], &empty),
            Err(Error::EmptySearchGrid)
        ));
    }

    #[test]
    fn ties_go_to_the_earliest_delay() {
        let cfg = FreqDomainConfig {
            dft_len: 1024,
            ..cfg_for(1024)
        };
        // all-zero observation: flat objective
        let zero = vec![Complex64::new(0.0, 0.0); 1024];
        let s = vec![Complex64::new(1.0, 0.0); 1024];
        let est = estimate_toa(&zero, &s, &cfg).unwrap();
        assert_eq!(est.tau, cfg.tau_grid()[0]);
    }

    #[test]
    fn objective_matches_time_domain_correlation() {
        let p = generate_probe(700, 4000, 22050.0, 8).unwrap();
        let cfg = cfg_for(4000);
        let mut rng = crate::seed::rng(9);
        let y: Vec<f64> = (0..4000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let curve = objective_curve(&spectrum(&y, &cfg), &spectrum(&p.samples, &cfg), &cfg).unwrap();
        for (tau, val) in curve {
            let t = tau as usize;
            let xc: f64 = (0..p.total_len())
                .filter(|i| i + t < y.len())
                .map(|i| y[i + t] * p.samples[i])
                .sum();
            let expect = cfg.dft_len as f64 * xc;
            assert!((val - expect).abs() <= 1e-8 * expect.abs().max(1e-3 * cfg.dft_len as f64));
        }
    }

    #[test]
    fn relax_single_equals_estimate_toa() {
        let p = generate_probe(1500, 8000, 22050.0, 4).unwrap();
        let cfg = cfg_for(8000);
        let s = spectrum(&p.samples, &cfg);
        let y = spectrum(&echoes(&p.samples, 8000, &[(170, 0.3), (222, 0.1)]), &cfg);
        let one = sequential_relax(&y, &s, 1, &cfg).unwrap();
        assert_eq!(one, vec![estimate_toa(&y, &s, &cfg).unwrap()]);
        assert!(sequential_relax(&y, &s, 0, &cfg).is_err());
        assert!(sequential_relax(&y, &s, 500, &cfg).is_err());
    }

    #[test]
    fn relax_recovers_two_separated_echoes() {
        let p = generate_probe(1500, 8000, 22050.0, 21).unwrap();
        let cfg = FreqDomainConfig {
            search_min_m: 0.5,
            search_max_m: 1.5,
            ..cfg_for(8000)
        };
        let s = spectrum(&p.samples, &cfg);
        let y = spectrum(&echoes(&p.samples, 8000, &[(80, 1.0), (120, 0.6)]), &cfg);
        let est = sequential_relax(&y, &s, 2, &cfg).unwrap();
        assert_eq!(est[0].tau, 80.0);
        assert_eq!(est[1].tau, 120.0);
        // probe autocorrelation sidelobes leave a small gain bias after one pass
        assert_abs_diff_eq!(est[0].gain, 1.0, epsilon = 1e-3);
        assert_abs_diff_eq!(est[1].gain, 0.6, epsilon = 1e-3);
    }

    #[test]
    fn refinement_helps_overlapping_echoes() {
        // lowpass probe so that neighbouring delays are strongly correlated
        let raw = generate_probe(1500, 8000, 22050.0, 33).unwrap();
        let mut smooth = vec![0.0; 8000];
        for i in 0..1500 {
            smooth[i] = (0..8).filter(|j| *j <= i).map(|j| raw.samples[i - j]).sum::<f64>() / 8.0;
        }
        let cfg = FreqDomainConfig {
            search_min_m: 0.5,
            search_max_m: 1.5,
            ..cfg_for(8000)
        };
        let s = spectrum(&smooth, &cfg);
        let y = spectrum(&echoes(&smooth, 8000, &[(100, 1.0), (103, 0.8)]), &cfg);
        let plain = sequential_relax_with_passes(&y, &s, 2, 0, &cfg).unwrap();
        let refined = sequential_relax(&y, &s, 2, &cfg).unwrap();
        assert!(residual_energy(&y, &s, &refined, &cfg) < residual_energy(&y, &s, &plain, &cfg));
    }

    #[test]
    fn parabola_vertex() {
        assert_abs_diff_eq!(parabolic_offset(1.0, 2.0, 1.0), 0.0);
        // samples of -(x-0.25)^2 at -1, 0, 1
        let f = |x: f64| -(x - 0.25) * (x - 0.25);
        assert_abs_diff_eq!(parabolic_offset(f(-1.0), f(0.0), f(1.0)), 0.25, epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn scaling_observation_scales_gain_only(a in 0.01f64..100.0, seed in 0u64..1000) {
            let p = generate_probe(400, 2048, 22050.0, seed).unwrap();
            let cfg = cfg_for(2048);
            let s = spectrum(&p.samples, &cfg);
            let mut rng = crate::seed::rng(seed + 1);
            let y: Vec<f64> = echoes(&p.samples, 2048, &[(160, 0.2)])
                .into_iter()
                .map(|v| v + 0.05 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let ys = spectrum(&y, &cfg);
            let ya: Vec<_> = ys.iter().map(|v| v * a).collect();
            let e1 = estimate_toa(&ys, &s, &cfg).unwrap();
            let e2 = estimate_toa(&ya, &s, &cfg).unwrap();
            prop_assert_eq!(e1.tau, e2.tau);
            prop_assert!((e2.gain - a * e1.gain).abs() <= 1e-9 * (a * e1.gain).abs().max(1e-12));
        }

        #[test]
        fn subtraction_never_increases_residual(seed in 0u64..1000, tau in 129.0f64..257.0) {
            let p = generate_probe(400, 2048, 22050.0, seed).unwrap();
            let cfg = cfg_for(2048);
            let s = spectrum(&p.samples, &cfg);
            let mut rng = crate::seed::rng(seed ^ 77);
            let y: Vec<f64> = (0..2048).map(|_| StandardNormal.sample(&mut rng)).collect();
            let ys = spectrum(&y, &cfg);
            let tau = tau.round();
            let g = estimate_gain(&ys, tau, &s, &cfg).unwrap();
            let est = ToaEstimate { tau, gain: g, score: 0.0, at_boundary: false };
            let before: f64 = ys.iter().map(|v| v.norm_sqr()).sum();
            prop_assert!(residual_energy(&ys, &s, &[est], &cfg) <= before * (1.0 + 1e-12));
        }
    }
}
