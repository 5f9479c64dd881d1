//! Reference method: dual-channel RIR estimation and peak picking.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};
use crate::geometry::ProbeSignal;
use crate::toa::{FreqDomainConfig, ToaEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub segment_len: usize,
    pub hop: usize,
    /// Regularization relative to the peak probe auto-spectrum.
    pub reg: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            segment_len: 2048,
            hop: 1024,
            reg: 1e-3,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segment_len < 2 {
            return Err(Error::invalid("segment_len", "must be at least 2"));
        }
        if self.hop == 0 || self.hop > self.segment_len {
            return Err(Error::invalid("hop", "must be in 1..=segment_len"));
        }
        if !(self.reg >= 0.0 && self.reg.is_finite()) {
            return Err(Error::invalid("reg", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatedRir {
    pub taps: Vec<f64>,
    pub sample_rate: f64,
}

impl EstimatedRir {
    /// `tap,value` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tap,value\n");
        for (i, v) in self.taps.iter().enumerate() {
            out.push_str(&format!("{i},{v}\n"));
        }
        out
    }
}

/// `Ĥ = S_sy / (S_ss + reg·max S_ss)` from Welch-averaged spectra.
pub fn estimate_rir_dual_channel(
    rec_channel: &[f64],
    probe: &ProbeSignal,
    sample_rate: f64,
    cfg: &BaselineConfig,
) -> Result<EstimatedRir> {
    cfg.validate()?;
    if sample_rate != probe.sample_rate {
        return Err(Error::SampleRateMismatch {
            a: sample_rate,
            b: probe.sample_rate,
        });
    }
    let n = rec_channel.len().min(probe.total_len());
    if n < cfg.segment_len {
        return Err(Error::TooShort {
            len: n,
            frame: cfg.segment_len,
        });
    }
    let (s_ss, _) = dsp::welch_cross_spectrum(&probe.samples[..n], &probe.samples[..n], cfg.segment_len, cfg.hop);
    let (s_sy, _) = dsp::welch_cross_spectrum(&probe.samples[..n], &rec_channel[..n], cfg.segment_len, cfg.hop);
    let peak = s_ss.iter().map(|v| v.re).fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::ZeroEnergyProbe);
    }
    let floor = cfg.reg * peak;
    let h: Vec<Complex64> = s_sy.iter().zip(&s_ss).map(|(sy, ss)| sy / (ss.re + floor)).collect();
    Ok(EstimatedRir {
        taps: dsp::ifft_real(&h),
        sample_rate,
    })
}

/// Largest-magnitude tap inside the search interval, earliest on ties.
pub fn peak_pick(rir: &EstimatedRir, interval: &FreqDomainConfig) -> Result<ToaEstimate> {
    interval.validate()?;
    let grid: Vec<usize> = interval
        .tau_grid()
        .into_iter()
        .map(|t| t.round() as usize)
        .filter(|&t| t < rir.taps.len())
        .collect();
    let mut best: Option<(usize, usize)> = None;
    for (i, &t) in grid.iter().enumerate() {
        if best.map_or(true, |(_, b)| rir.taps[t].abs() > rir.taps[b].abs()) {
            best = Some((i, t));
        }
    }
    let (i, t) = best.ok_or(Error::EmptySearchGrid)?;
    Ok(ToaEstimate {
        tau: t as f64,
        gain: rir.taps[t],
        score: rir.taps[t].abs(),
        at_boundary: i == 0 || i + 1 == grid.len(),
    })
}

/// RIR estimate on one channel followed by peak picking.
pub fn baseline_toa(
    rec_channel: &[f64],
    probe: &ProbeSignal,
    sample_rate: f64,
    cfg: &BaselineConfig,
    interval: &FreqDomainConfig,
) -> Result<ToaEstimate> {
    peak_pick(&estimate_rir_dual_channel(rec_channel, probe, sample_rate, cfg)?, interval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::generate_probe;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn interval() -> FreqDomainConfig {
        FreqDomainConfig::for_observation(20000, 22050.0, 343.0)
    }

    fn delayed(x: &[f64], d: usize, g: f64) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        for i in d..x.len() {
            y[i] = g * x[i - d];
        }
        y
    }

    #[test]
    fn identity_channel_gives_unit_impulse() {
        let p = generate_probe(20000, 20000, 22050.0, 1).unwrap();
        let rir = estimate_rir_dual_channel(&p.samples, &p, 22050.0, &BaselineConfig::default()).unwrap();
        let peak = (0..rir.taps.len()).max_by(|&a, &b| rir.taps[a].abs().total_cmp(&rir.taps[b].abs())).unwrap();
        assert_eq!(peak, 0);
        assert!((rir.taps[0] - 1.0).abs() < 0.01);
    }

    #[test]
    fn known_delay_and_gain() {
        let p = generate_probe(20000, 20000, 22050.0, 2).unwrap();
        let y = delayed(&p.samples, 40, 0.5);
        let rir = estimate_rir_dual_channel(&y, &p, 22050.0, &BaselineConfig::default()).unwrap();
        let peak = (0..rir.taps.len()).max_by(|&a, &b| rir.taps[a].abs().total_cmp(&rir.taps[b].abs())).unwrap();
        assert_eq!(peak, 40);
        assert!((rir.taps[40] / 0.5 - 1.0).abs() < 0.02, "tap {}", rir.taps[40]);
    }

    #[test]
    fn unregularized_null_amplifies_noise() {
        let raw = generate_probe(20000, 20000, 22050.0, 3).unwrap();
        // stopband 4-6 kHz
        let n = 32768;
        let mut spec = dsp::fft_real(&raw.samples, n);
        for (k, v) in spec.iter_mut().enumerate() {
            let f = k.min(n - k) as f64 * 22050.0 / n as f64;
            if (4000.0..=6000.0).contains(&f) {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        let samples = dsp::ifft_real(&spec)[..20000].to_vec();
        let p = ProbeSignal { samples, ..raw };
        let mut rng = crate::seed::rng(4);
        let y: Vec<f64> = p
            .samples
            .iter()
            .map(|v| v + 0.01 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let e = |reg: f64| {
            let cfg = BaselineConfig { reg, ..BaselineConfig::default() };
            let rir = estimate_rir_dual_channel(&y, &p, 22050.0, &cfg).unwrap();
            dsp::energy(&rir.taps[1..])
        };
        assert!(e(0.0) > 10.0 * e(1e-3));
    }

    #[test]
    fn zero_probe_is_rejected() {
        let p = ProbeSignal {
            samples: vec![0.0; 4096],
            active_len: 0,
            sample_rate: 22050.0,
            rng_seed: 0,
        };
        assert!(matches!(
            estimate_rir_dual_channel(&[1.0; 4096], &p, 22050.0, &BaselineConfig::default()),
            Err(Error::ZeroEnergyProbe)
        ));
    }

    #[test]
    fn peak_pick_cases() {
        let mut taps = vec![0.0; 2048];
        taps[190] = -0.3;
        taps[220] = 0.2;
        let rir = EstimatedRir { taps, sample_rate: 22050.0 };
        let est = peak_pick(&rir, &interval()).unwrap();
        assert_eq!(est.tau, 190.0);
        assert_eq!(est.gain, -0.3);
        let mut tie = rir.clone();
        tie.taps[220] = 0.3;
        assert_eq!(peak_pick(&tie, &interval()).unwrap().tau, 190.0);
        let short = EstimatedRir {
            taps: vec![1.0; 100],
            sample_rate: 22050.0,
        };
        assert!(matches!(peak_pick(&short, &interval()), Err(Error::EmptySearchGrid)));
    }

    #[test]
    fn isolated_taps_are_all_recovered() {
        let mut taps = vec![0.0; 2048];
        let delays = [131usize, 150, 199, 240, 256];
        for (i, d) in delays.iter().enumerate() {
            taps[*d] = 1.0 / (i + 1) as f64;
        }
        let cfg = interval();
        let mut rir = EstimatedRir { taps, sample_rate: 22050.0 };
        for &d in &delays {
            assert_eq!(peak_pick(&rir, &cfg).unwrap().tau, d as f64);
            rir.taps[d] = 0.0;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn estimate_is_linear_in_the_recording(s in 0u64..1000) {
            let p = generate_probe(1500, 8192, 22050.0, s).unwrap();
            let mut rng = crate::seed::rng(s + 1);
            let a: Vec<f64> = (0..8192).map(|_| StandardNormal.sample(&mut rng)).collect();
            let b = delayed(&p.samples, 77, 0.3);
            let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let cfg = BaselineConfig::default();
            let ha = estimate_rir_dual_channel(&a, &p, 22050.0, &cfg).unwrap();
            let hb = estimate_rir_dual_channel(&b, &p, 22050.0, &cfg).unwrap();
            let hab = estimate_rir_dual_channel(&ab, &p, 22050.0, &cfg).unwrap();
            let scale = hab.taps.iter().map(|v| v.abs()).fold(0.0, f64::max);
            for i in 0..hab.taps.len() {
                prop_assert!((hab.taps[i] - ha.taps[i] - hb.taps[i]).abs() <= 1e-9 * scale);
            }
        }
    }
}
