//! Uniform circular array geometry, the probe signal, and the far-field
//! delay / steering-vector model shared by every estimator.
//!
//! Angles follow one convention throughout: azimuth is measured
//! counterclockwise from the x-axis of the frame the array lives in, and
//! elevation is the polar angle from the vertical, so `elevation = π/2` is a
//! wave travelling in the horizontal plane of the array.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub type Point3 = [f64; 3];

pub fn distance(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    // rem_euclid can round up to TAU for tiny negative inputs
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

/// Absolute angular difference in `[0, π]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// A uniform circular array with a loudspeaker at its center.
///
/// Microphone `m` (zero based) sits at angle `offset_angle + 2πm/M` in the
/// array frame. Delays are reported relative to `reference_index`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayGeometry {
    pub mic_count: usize,
    /// Meters.
    pub radius: f64,
    /// Radians.
    #[serde(default)]
    pub offset_angle: f64,
    #[serde(default)]
    pub reference_index: usize,
    /// Hz.
    pub sample_rate: f64,
    /// m/s.
    pub speed_of_sound: f64,
}

impl Default for ArrayGeometry {
    /// Six microphones on a 0.2 m circle sampled at 22.05 kHz.
    fn default() -> Self {
        Self {
            mic_count: 6,
            radius: 0.2,
            offset_angle: 0.0,
            reference_index: 0,
            sample_rate: 22_050.0,
            speed_of_sound: 343.0,
        }
    }
}

impl ArrayGeometry {
    pub fn new(mic_count: usize, radius: f64, sample_rate: f64, speed_of_sound: f64) -> Result<Self> {
        let g = Self {
            mic_count,
            radius,
            sample_rate,
            speed_of_sound,
            ..Self::default()
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mic_count < 2 {
            return Err(Error::invalid("mic_count", format!("need at least 2 microphones, got {}", self.mic_count)));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::invalid("radius", format!("must be positive, got {}", self.radius)));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::invalid("sample_rate", format!("must be positive, got {}", self.sample_rate)));
        }
        if !(self.speed_of_sound > 0.0 && self.speed_of_sound.is_finite()) {
            return Err(Error::invalid(
                "speed_of_sound",
                format!("must be positive, got {}", self.speed_of_sound),
            ));
        }
        if !self.offset_angle.is_finite() {
            return Err(Error::invalid("offset_angle", "must be finite"));
        }
        if self.reference_index >= self.mic_count {
            return Err(Error::invalid(
                "reference_index",
                format!("{} is not below mic_count {}", self.reference_index, self.mic_count),
            ));
        }
        Ok(())
    }

    /// Angle of microphone `m` in the array frame.
    pub fn mic_angle(&self, m: usize) -> f64 {
        self.offset_angle + TAU * m as f64 / self.mic_count as f64
    }

    pub fn reference_angle(&self) -> f64 {
        self.mic_angle(self.reference_index)
    }

    /// Converts a path length in meters to samples.
    pub fn samples_per_meter(&self) -> f64 {
        self.sample_rate / self.speed_of_sound
    }
}

/// Microphone coordinates for an array centered at `center` and rotated by
/// `heading` about the vertical axis.
pub fn mic_positions_rotated(geom: &ArrayGeometry, center: Point3, heading: f64) -> Result<Vec<Point3>> {
    geom.validate()?;
    Ok((0..geom.mic_count)
        .map(|m| {
            let a = geom.mic_angle(m) + heading;
            [center[0] + geom.radius * a.cos(), center[1] + geom.radius * a.sin(), center[2]]
        })
        .collect())
}

/// Microphone coordinates in the horizontal plane through `center`.
pub fn mic_positions(geom: &ArrayGeometry, center: Point3) -> Result<Vec<Point3>> {
    mic_positions_rotated(geom, center, 0.0)
}

/// Far-field time difference of arrival at microphone `mic` relative to the
/// reference microphone, in (fractional) samples.
pub fn tdoa(geom: &ArrayGeometry, azimuth: f64, elevation: f64, mic: usize) -> Result<f64> {
    if mic >= geom.mic_count {
        return Err(Error::MicIndexOutOfRange {
            index: mic,
            count: geom.mic_count,
        });
    }
    Ok(tdoa_unchecked(geom, azimuth, elevation, mic))
}

fn tdoa_unchecked(geom: &ArrayGeometry, azimuth: f64, elevation: f64, mic: usize) -> f64 {
    if mic == geom.reference_index {
        return 0.0;
    }
    geom.radius
        * elevation.sin()
        * ((geom.reference_angle() - azimuth).cos() - (geom.mic_angle(mic) - azimuth).cos())
        * geom.samples_per_meter()
}

/// Narrowband steering vector for DFT bin `bin` of a `dft_len`-point
/// transform: element `m` is `exp(-j 2π bin/K · tdoa_m)`. Bins above K/2 are
/// treated as the negative frequencies they represent, so bin `K - k` is the
/// conjugate of bin `k`.
pub fn steering_vector(
    geom: &ArrayGeometry,
    azimuth: f64,
    elevation: f64,
    bin: usize,
    dft_len: usize,
) -> Result<Vec<Complex64>> {
    if bin >= dft_len {
        return Err(Error::BinOutOfRange { bin, len: dft_len });
    }
    let signed = if 2 * bin > dft_len {
        bin as f64 - dft_len as f64
    } else {
        bin as f64
    };
    let omega = TAU * signed / dft_len as f64;
    Ok((0..geom.mic_count)
        .map(|m| Complex64::from_polar(1.0, -omega * tdoa_unchecked(geom, azimuth, elevation, m)))
        .collect())
}

/// Robot pose in the world frame. `heading` is the world yaw of the array's
/// zero-angle axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
        }
    }
}

/// Known excitation: white Gaussian samples followed by zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSignal {
    pub samples: Vec<f64>,
    pub active_len: usize,
    pub sample_rate: f64,
    pub rng_seed: u64,
}

impl ProbeSignal {
    pub fn total_len(&self) -> usize {
        self.samples.len()
    }

    pub fn active(&self) -> &[f64] {
        &self.samples[..self.active_len]
    }
}

/// Recipe for a probe, as stored in configs and run manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub active_len: usize,
    pub total_len: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            active_len: 1500,
            total_len: 20_000,
            seed: 0,
        }
    }
}

impl ProbeSpec {
    pub fn generate(&self, sample_rate: f64) -> Result<ProbeSignal> {
        generate_probe(self.active_len, self.total_len, sample_rate, self.seed)
    }
}

pub fn generate_probe(active_len: usize, total_len: usize, sample_rate: f64, seed: u64) -> Result<ProbeSignal> {
    if active_len == 0 {
        return Err(Error::invalid("active_len", "must be positive"));
    }
    if active_len > total_len {
        return Err(Error::invalid(
            "active_len",
            format!("{active_len} exceeds total_len {total_len}"),
        ));
    }
    if !(sample_rate > 0.0) {
        return Err(Error::invalid("sample_rate", "must be positive"));
    }
    let mut rng = seed::rng(seed);
    let mut samples = vec![0.0; total_len];
    for s in samples.iter_mut().take(active_len) {
        *s = StandardNormal.sample(&mut rng);
    }
    Ok(ProbeSignal {
        samples,
        active_len,
        sample_rate,
        rng_seed: seed,
    })
}
