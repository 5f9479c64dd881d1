//! Shoebox room simulation: image-source impulse responses, the diffuse
//! rotor-noise field, and noisy multichannel observations.

use std::f64::consts::{PI, TAU};
use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};
use crate::geometry::{distance, ArrayGeometry, Point3, ProbeSignal};
use crate::seed;

/// Shoebox room with walls at `0` and `dims[i]` on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    /// Length, width, height in meters.
    pub dims: [f64; 3],
    /// Seconds.
    pub t60: f64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: f64,
    #[serde(default = "default_speed_of_sound")]
    pub speed_of_sound: f64,
    #[serde(default)]
    pub absorption: AbsorptionModel,
}

/// How the uniform wall reflection coefficient is derived from `t60`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsorptionModel {
    /// Sabine's formula.
    Sabine,
    /// Coefficient whose image-source energy decay has the requested T60.
    #[default]
    DecayMatched,
}

fn default_sample_rate() -> f64 {
    22_050.0
}

fn default_speed_of_sound() -> f64 {
    343.0
}

impl RoomSpec {
    pub fn new(dims: [f64; 3], t60: f64) -> Self {
        Self {
            dims,
            t60,
            sample_rate: default_sample_rate(),
            speed_of_sound: default_speed_of_sound(),
            absorption: AbsorptionModel::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, d) in self.dims.iter().enumerate() {
            if !(*d > 0.0 && d.is_finite()) {
                return Err(Error::invalid(format!("dims[{i}]"), format!("must be positive, got {d}")));
            }
        }
        if !(self.t60 >= 0.0) || self.t60.is_nan() {
            return Err(Error::invalid("t60", format!("must be non-negative, got {}", self.t60)));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::invalid("sample_rate", "must be positive"));
        }
        if !(self.speed_of_sound > 0.0 && self.speed_of_sound.is_finite()) {
            return Err(Error::invalid("speed_of_sound", "must be positive"));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [l, w, h] = self.dims;
        2.0 * (l * w + l * h + w * h)
    }

    pub fn contains(&self, p: &Point3) -> bool {
        p.iter().zip(&self.dims).all(|(c, d)| *c > 0.0 && c < d)
    }

    fn check_inside(&self, what: &str, p: &Point3) -> Result<()> {
        if self.contains(p) {
            Ok(())
        } else {
            Err(Error::OutsideRoom {
                what: what.to_string(),
                x: p[0],
                y: p[1],
                z: p[2],
            })
        }
    }
}

/// Uniform wall reflection derived from the reverberation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WallReflection {
    /// Pressure reflection coefficient in `[0, 1)`.
    Coefficient(f64),
    /// Absorption is total; only the direct path survives.
    Anechoic,
}

impl WallReflection {
    pub fn beta(self) -> f64 {
        match self {
            WallReflection::Coefficient(b) => b,
            WallReflection::Anechoic => 0.0,
        }
    }
}

/// Sabine calibration: `A = 0.161 V / T60`, `α = A / S`, `β = √(1 − α)`.
pub fn t60_to_reflection_coeff(room: &RoomSpec) -> Result<WallReflection> {
    room.validate()?;
    if room.t60 == 0.0 {
        return Ok(WallReflection::Anechoic);
    }
    let absorption_area = 0.161 * room.volume() / room.t60;
    let alpha = absorption_area / room.surface();
    if alpha >= 1.0 {
        return Ok(WallReflection::Anechoic);
    }
    let beta = (1.0 - alpha).sqrt();
    Ok(WallReflection::Coefficient(beta.clamp(0.0, 1.0 - f64::EPSILON)))
}

/// Dimensionless decay span of a shoebox image lattice.
///
/// An image at distance `d` in direction `u` has undergone about
/// `d·Σ|u_i|/L_i` reflections, so the energy arriving at time `t` is the
/// direction average of `β^(2ct·g(u))` with `g(u) = Σ|u_i|/L_i`. With
/// `a = −2c·ln β` the backward-integrated decay depends only on `s = a·t`;
/// this returns `s(−25 dB) − s(−5 dB)`.
fn lattice_decay_span(dims: &[f64; 3]) -> f64 {
    const DIRECTIONS: usize = 2000;
    let golden = PI * (3.0 - 5f64.sqrt());
    let g: Vec<f64> = (0..DIRECTIONS)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) * 2.0 / DIRECTIONS as f64;
            let r = (1.0 - z * z).sqrt();
            let th = golden * i as f64;
            (r * th.cos()).abs() / dims[0] + (r * th.sin()).abs() / dims[1] + z.abs() / dims[2]
        })
        .collect();
    let edc = |s: f64| g.iter().map(|g| (-g * s).exp() / g).sum::<f64>();
    let total = edc(0.0);
    let crossing = |db: f64| {
        let target = total * 10f64.powf(db / 10.0);
        let mut hi = 1.0;
        while edc(hi) > target {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if edc(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    crossing(-25.0) - crossing(-5.0)
}

/// Reflection coefficient for which the direction-averaged image-source
/// decay reaches the requested T60 over the −5 to −25 dB span.
pub fn decay_matched_reflection_coeff(room: &RoomSpec) -> Result<WallReflection> {
    room.validate()?;
    if room.t60 == 0.0 {
        return Ok(WallReflection::Anechoic);
    }
    let a = 3.0 * lattice_decay_span(&room.dims) / room.t60;
    let beta = (-a / (2.0 * room.speed_of_sound)).exp();
    if beta <= 0.0 {
        return Ok(WallReflection::Anechoic);
    }
    Ok(WallReflection::Coefficient(beta.min(1.0 - f64::EPSILON)))
}

/// Wall reflection coefficient under the room's absorption model.
pub fn reflection_coeff(room: &RoomSpec) -> Result<WallReflection> {
    match room.absorption {
        AbsorptionModel::Sabine => t60_to_reflection_coeff(room),
        AbsorptionModel::DecayMatched => decay_matched_reflection_coeff(room),
    }
}

/// One impulse response per microphone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RirSet {
    pub responses: Vec<Vec<f64>>,
    pub sample_rate: f64,
    /// Highest reflection order present in the responses.
    pub max_order: usize,
}

/// Image-source impulse responses with every reflection order that arrives
/// within `length` samples.
pub fn simulate_rir(room: &RoomSpec, source: Point3, mics: &[Point3], length: usize) -> Result<RirSet> {
    simulate_rir_with_order(room, source, mics, length, None)
}

/// Like [`simulate_rir`] but keeps only images with at most `max_order`
/// wall reflections.
pub fn simulate_rir_with_order(
    room: &RoomSpec,
    source: Point3,
    mics: &[Point3],
    length: usize,
    max_order: Option<usize>,
) -> Result<RirSet> {
    room.validate()?;
    if length == 0 {
        return Err(Error::invalid("length", "impulse response length must be positive"));
    }
    room.check_inside("source", &source)?;
    for m in mics {
        room.check_inside("microphone", m)?;
    }
    let beta = reflection_coeff(room)?.beta();
    let order_cap = if beta == 0.0 { Some(0) } else { max_order };
    let fs = room.sample_rate;
    let c = room.speed_of_sound;
    let max_delay = (length + dsp::FRAC_DELAY_HALF_WIDTH) as f64;
    let max_dist = max_delay * c / fs;

    let max_order_possible = room
        .dims
        .iter()
        .map(|d| 2 * ((max_dist / (2.0 * d)).ceil() as usize + 2))
        .sum::<usize>();
    let mut beta_pow = vec![1.0; max_order_possible + 1];
    for k in 1..beta_pow.len() {
        beta_pow[k] = beta_pow[k - 1] * beta;
    }
    let per_mic: Vec<(Vec<f64>, usize)> = mics
        .par_iter()
        .map(|mic| {
            let mut h = vec![0.0; length];
            let mut highest = 0;
            let n: Vec<i64> = room.dims.iter().map(|d| (max_dist / (2.0 * d)).ceil() as i64 + 1).collect();
            for mx in -n[0]..=n[0] {
                for qx in 0..2i64 {
                    let dx = (1 - 2 * qx) as f64 * source[0] + 2.0 * mx as f64 * room.dims[0] - mic[0];
                    let ox = (mx - qx).unsigned_abs() + mx.unsigned_abs();
                    if dx.abs() > max_dist {
                        continue;
                    }
                    for my in -n[1]..=n[1] {
                        for qy in 0..2i64 {
                            let dy = (1 - 2 * qy) as f64 * source[1] + 2.0 * my as f64 * room.dims[1] - mic[1];
                            let oy = (my - qy).unsigned_abs() + my.unsigned_abs();
                            if dx.hypot(dy) > max_dist {
                                continue;
                            }
                            for mz in -n[2]..=n[2] {
                                for qz in 0..2i64 {
                                    let dz = (1 - 2 * qz) as f64 * source[2] + 2.0 * mz as f64 * room.dims[2] - mic[2];
                                    let oz = (mz - qz).unsigned_abs() + mz.unsigned_abs();
                                    let order = (ox + oy + oz) as usize;
                                    if order_cap.is_some_and(|cap| order > cap) {
                                        continue;
                                    }
                                    let dist = (dx * dx + dy * dy + dz * dz).sqrt();
                                    let delay = dist * fs / c;
                                    if delay >= max_delay {
                                        continue;
                                    }
                                    let amp = beta_pow[order] / (4.0 * PI * dist.max(1e-9));
                                    if amp == 0.0 {
                                        continue;
                                    }
                                    dsp::add_fractional_impulse(&mut h, delay, amp);
                                    highest = highest.max(order);
                                }
                            }
                        }
                    }
                }
            }
            (h, highest)
        })
        .collect();

    let max_order = per_mic.iter().map(|(_, o)| *o).max().unwrap_or(0);
    Ok(RirSet {
        responses: per_mic.into_iter().map(|(h, _)| h).collect(),
        sample_rate: fs,
        max_order,
    })
}

/// The six boundary planes of a shoebox room.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wall {
    XMin,
    XMax,
    YMin,
    YMax,
    Floor,
    Ceiling,
}

impl Wall {
    pub const ALL: [Wall; 6] = [Wall::XMin, Wall::XMax, Wall::YMin, Wall::YMax, Wall::Floor, Wall::Ceiling];

    pub fn is_vertical(self) -> bool {
        !matches!(self, Wall::Floor | Wall::Ceiling)
    }
}

/// Mirror image of `p` across `wall`.
pub fn mirror(room: &RoomSpec, p: &Point3, wall: Wall) -> Point3 {
    let mut q = *p;
    match wall {
        Wall::XMin => q[0] = -p[0],
        Wall::XMax => q[0] = 2.0 * room.dims[0] - p[0],
        Wall::YMin => q[1] = -p[1],
        Wall::YMax => q[1] = 2.0 * room.dims[1] - p[1],
        Wall::Floor => q[2] = -p[2],
        Wall::Ceiling => q[2] = 2.0 * room.dims[2] - p[2],
    }
    q
}

/// Ground truth for one first-order wall echo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EchoTruth {
    pub wall: Wall,
    /// Propagation delay, in samples, from the source to `receiver` via the
    /// wall.
    pub tau: f64,
    /// World azimuth of the image source seen from the source position.
    pub azimuth: f64,
    /// Perpendicular distance from the source to the wall.
    pub range: f64,
}

/// First-order echo delays at `receiver` for a source at `source`, from the
/// mirror-image construction.
pub fn first_order_echoes(room: &RoomSpec, source: &Point3, receiver: &Point3) -> Vec<EchoTruth> {
    let spm = room.sample_rate / room.speed_of_sound;
    Wall::ALL
        .iter()
        .map(|&wall| {
            let img = mirror(room, source, wall);
            EchoTruth {
                wall,
                tau: distance(&img, receiver) * spm,
                azimuth: (img[1] - source[1]).atan2(img[0] - source[0]),
                range: distance(&img, source) / 2.0,
            }
        })
        .collect()
}

/// [`estimate_t60`] on the part of `h` between `lo_hz` and `hi_hz`, the usual
/// band-limited reverberation-time measurement.
pub fn estimate_t60_in_band(h: &[f64], sample_rate: f64, lo_hz: f64, hi_hz: f64) -> Option<f64> {
    let n = dsp::next_pow2(2 * h.len());
    let mut spec = dsp::fft_real(h, n);
    for (k, v) in spec.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sample_rate / n as f64;
        if f < lo_hz || f > hi_hz {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    let filtered = dsp::ifft_real(&spec);
    estimate_t60(&filtered[..h.len()], sample_rate)
}

/// Schroeder backward-integration estimate of the reverberation time from
/// the −5 dB to −25 dB span of the energy decay curve.
pub fn estimate_t60(h: &[f64], sample_rate: f64) -> Option<f64> {
    let mut edc = vec![0.0; h.len()];
    let mut acc = 0.0;
    for i in (0..h.len()).rev() {
        acc += h[i] * h[i];
        edc[i] = acc;
    }
    let total = *edc.first()?;
    if total <= 0.0 {
        return None;
    }
    let (mut sx, mut sy, mut sxx, mut sxy, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, e) in edc.iter().enumerate() {
        let db = 10.0 * (e / total).log10();
        if (-25.0..=-5.0).contains(&db) {
            let t = i as f64 / sample_rate;
            sx += t;
            sy += db;
            sxx += t * t;
            sxy += t * db;
            n += 1.0;
        }
    }
    if n < 2.0 {
        return None;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    (slope < 0.0).then(|| -60.0 / slope)
}

/// M equal-length channels at a common sample rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultichannelRecording {
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: f64,
}

impl MultichannelRecording {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: f64) -> Result<Self> {
        if let Some(first) = channels.first() {
            let n = first.len();
            if let Some(bad) = channels.iter().find(|c| c.len() != n) {
                return Err(Error::invalid(
                    "channels",
                    format!("unequal channel lengths {} and {}", n, bad.len()),
                ));
            }
        }
        Ok(Self { channels, sample_rate })
    }

    pub fn zeros(mic_count: usize, len: usize, sample_rate: f64) -> Self {
        Self {
            channels: vec![vec![0.0; len]; mic_count],
            sample_rate,
        }
    }

    pub fn mic_count(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Additive interference: white sensor noise and the diffuse rotor field.
/// `None` levels mean the component is absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    /// Reference-channel probe variance over white-noise variance, dB.
    pub snr_db: Option<f64>,
    /// Reference-channel probe variance over diffuse-noise variance, dB.
    pub sdnr_db: Option<f64>,
    #[serde(default = "default_rotor_rps")]
    pub rotor_rps: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_rotor_rps() -> f64 {
    70.0
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self {
            snr_db: None,
            sdnr_db: None,
            rotor_rps: default_rotor_rps(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("snr_db", self.snr_db), ("sdnr_db", self.sdnr_db)] {
            if v.is_some_and(|v| !v.is_finite()) {
                return Err(Error::invalid(name, "must be finite (use null for a noiseless component)"));
            }
        }
        if !(self.rotor_rps > 0.0 && self.rotor_rps.is_finite()) {
            return Err(Error::invalid("rotor_rps", "must be positive"));
        }
        Ok(())
    }
}

/// Blade count of the rotor surrogate.
pub const ROTOR_BLADES: f64 = 4.0;
const ROTOR_HARMONICS: usize = 24;
const ROTOR_LINE_WIDTH_HZ: f64 = 3.0;
const ROTOR_LINE_GAIN: f64 = 20.0;

/// Power spectral density shape of the synthetic rotor noise: a 1/f floor
/// with a stack of blade-pass harmonics.
pub fn rotor_psd(freq: f64, rotor_rps: f64) -> f64 {
    let f = freq.abs().max(20.0);
    let floor = 1.0 / f;
    let bpf = rotor_rps * ROTOR_BLADES;
    let lines: f64 = (1..=ROTOR_HARMONICS)
        .map(|h| {
            let fh = h as f64 * bpf;
            ROTOR_LINE_GAIN / (fh * h as f64) * (-(freq.abs() - fh).powi(2) / (2.0 * ROTOR_LINE_WIDTH_HZ.powi(2))).exp()
        })
        .sum();
    floor + lines
}

/// Spatial coherence of a 2-D (cylindrical) diffuse field between two
/// sensors `d` meters apart.
pub fn cylindrical_coherence(d: f64, freq: f64, speed_of_sound: f64) -> f64 {
    libm::j0(TAU * freq * d / speed_of_sound)
}

/// Precomputed per-bin mixing matrices imposing cylindrical diffuse
/// coherence on independent channels.
#[derive(Debug, Clone)]
pub struct DiffuseNoiseGenerator {
    mic_count: usize,
    length: usize,
    sample_rate: f64,
    mixing: Vec<DMatrix<f64>>,
}

/// Smallest length accepted by the diffuse generator.
pub const MIN_DIFFUSE_LEN: usize = 64;

impl DiffuseNoiseGenerator {
    pub fn new(geom: &ArrayGeometry, length: usize) -> Result<Self> {
        if length < MIN_DIFFUSE_LEN {
            return Err(Error::invalid("length", format!("diffuse noise needs at least {MIN_DIFFUSE_LEN} samples")));
        }
        if geom.mic_count == 0 {
            return Err(Error::invalid("mic_count", "need at least one microphone"));
        }
        if geom.mic_count > 1 && !(geom.radius > 0.0) {
            return Err(Error::invalid("radius", "coincident microphones"));
        }
        let m = geom.mic_count;
        let pos: Vec<Point3> = (0..m)
            .map(|i| {
                let a = geom.mic_angle(i);
                [geom.radius * a.cos(), geom.radius * a.sin(), 0.0]
            })
            .collect();
        let bins = length / 2 + 1;
        let mixing = (0..bins)
            .into_par_iter()
            .map(|k| {
                let f = k as f64 * geom.sample_rate / length as f64;
                let gamma = DMatrix::from_fn(m, m, |i, j| {
                    cylindrical_coherence(distance(&pos[i], &pos[j]), f, geom.speed_of_sound)
                });
                let eig = SymmetricEigen::new(gamma);
                let sqrt_l = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
                &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_l)
            })
            .collect();
        Ok(Self {
            mic_count: m,
            length,
            sample_rate: geom.sample_rate,
            mixing,
        })
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn generate(&self, rotor_rps: f64, seed: u64) -> MultichannelRecording {
        let m = self.mic_count;
        let n = self.length;
        let bins = n / 2 + 1;
        let mut rng = seed::rng(seed);
        let amps: Vec<f64> = (0..bins)
            .map(|k| (rotor_psd(k as f64 * self.sample_rate / n as f64, rotor_rps) / 2.0).sqrt())
            .collect();
        // independent surrogate spectra, channel-major draw order
        let mut src = vec![vec![Complex64::new(0.0, 0.0); bins]; m];
        for ch in src.iter_mut() {
            for (k, v) in ch.iter_mut().enumerate() {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                if k == 0 {
                    continue;
                }
                let amp = amps[k];
                *v = if 2 * k == n {
                    Complex64::new(re * amp * std::f64::consts::SQRT_2, 0.0)
                } else {
                    Complex64::new(re * amp, im * amp)
                };
            }
        }
        let mut mixed = vec![vec![Complex64::new(0.0, 0.0); bins]; m];
        for k in 0..bins {
            let c = &self.mixing[k];
            for i in 0..m {
                let mut acc = Complex64::new(0.0, 0.0);
                for j in 0..m {
                    acc += src[j][k] * c[(i, j)];
                }
                mixed[i][k] = acc;
            }
        }
        let channels = mixed
            .into_iter()
            .map(|half| dsp::ifft_real(&dsp::hermitian_extend(&half, n)))
            .collect();
        MultichannelRecording {
            channels,
            sample_rate: self.sample_rate,
        }
    }
}

/// M-channel cylindrical diffuse rotor noise.
pub fn diffuse_noise(geom: &ArrayGeometry, length: usize, rotor_rps: f64, seed: u64) -> Result<MultichannelRecording> {
    Ok(DiffuseNoiseGenerator::new(geom, length)?.generate(rotor_rps, seed))
}

/// The separate terms of a rendered observation.
#[derive(Debug, Clone)]
pub struct ObservationParts {
    /// `h_m * s`.
    pub clean: MultichannelRecording,
    pub diffuse: Option<MultichannelRecording>,
    pub white: Option<MultichannelRecording>,
}

impl ObservationParts {
    pub fn sum(&self) -> MultichannelRecording {
        let mut out = self.clean.clone();
        for part in [&self.diffuse, &self.white].into_iter().flatten() {
            for (o, p) in out.channels.iter_mut().zip(&part.channels) {
                o.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            }
        }
        out
    }
}

/// Renders observations of a fixed length for one array geometry, caching
/// the diffuse-field mixing matrices between calls.
#[derive(Debug)]
pub struct Renderer {
    geom: ArrayGeometry,
    length: usize,
    diffuse: OnceLock<DiffuseNoiseGenerator>,
}

impl Renderer {
    pub fn new(geom: ArrayGeometry, length: usize) -> Self {
        Self {
            geom,
            length,
            diffuse: OnceLock::new(),
        }
    }

    pub fn geometry(&self) -> &ArrayGeometry {
        &self.geom
    }

    fn diffuse_generator(&self) -> Result<&DiffuseNoiseGenerator> {
        if let Some(g) = self.diffuse.get() {
            return Ok(g);
        }
        let g = DiffuseNoiseGenerator::new(&self.geom, self.length)?;
        Ok(self.diffuse.get_or_init(|| g))
    }

    pub fn clean(&self, rirs: &RirSet, probe: &ProbeSignal) -> Result<MultichannelRecording> {
        if rirs.responses.len() != self.geom.mic_count {
            return Err(Error::ChannelMismatch {
                expected: self.geom.mic_count,
                got: rirs.responses.len(),
            });
        }
        if rirs.sample_rate != probe.sample_rate {
            return Err(Error::SampleRateMismatch {
                a: rirs.sample_rate,
                b: probe.sample_rate,
            });
        }
        let n = probe.total_len();
        if n != self.length {
            return Err(Error::invalid(
                "probe.total_len",
                format!("renderer built for {} samples, probe has {n}", self.length),
            ));
        }
        let channels = rirs
            .responses
            .par_iter()
            .map(|h| dsp::convolve(h, &probe.samples, n))
            .collect();
        MultichannelRecording::new(channels, probe.sample_rate)
    }

    pub fn render_parts(&self, rirs: &RirSet, probe: &ProbeSignal, noise: &NoiseModel) -> Result<ObservationParts> {
        noise.validate()?;
        let clean = self.clean(rirs, probe)?;
        let n = clean.len();
        let m = clean.mic_count();
        let ref_var = dsp::variance(&clean.channels[self.geom.reference_index]);

        let diffuse = match noise.sdnr_db {
            None => None,
            Some(sdnr) => {
                let mut d = self.diffuse_generator()?.generate(noise.rotor_rps, seed::derive(&[noise.seed, 1]));
                let v = dsp::variance(&d.channels[self.geom.reference_index]);
                let target = ref_var / 10f64.powf(sdnr / 10.0);
                let scale = if v > 0.0 { (target / v).sqrt() } else { 0.0 };
                d.channels.iter_mut().flatten().for_each(|s| *s *= scale);
                Some(d)
            }
        };

        let white = match noise.snr_db {
            None => None,
            Some(snr) => {
                let mut rng = seed::rng(seed::derive(&[noise.seed, 2]));
                let target = ref_var / 10f64.powf(snr / 10.0);
                let channels = (0..m)
                    .map(|_| {
                        let mut w: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                        let v = dsp::variance(&w);
                        let scale = if v > 0.0 { (target / v).sqrt() } else { 0.0 };
                        w.iter_mut().for_each(|s| *s *= scale);
                        w
                    })
                    .collect();
                Some(MultichannelRecording::new(channels, clean.sample_rate)?)
            }
        };

        Ok(ObservationParts { clean, diffuse, white })
    }

    pub fn render(&self, rirs: &RirSet, probe: &ProbeSignal, noise: &NoiseModel) -> Result<MultichannelRecording> {
        Ok(self.render_parts(rirs, probe, noise)?.sum())
    }
}

/// `y_m = h_m * s + f1_m + f2_m` with noise levels set against the variance
/// of the reverberant probe at the reference microphone.
pub fn render_observation(
    rirs: &RirSet,
    probe: &ProbeSignal,
    noise: &NoiseModel,
    geom: &ArrayGeometry,
) -> Result<MultichannelRecording> {
    Renderer::new(*geom, probe.total_len()).render(rirs, probe, noise)
}

/// Probe as received over the loudspeaker-to-microphone direct path of a
/// center-mounted source.
pub fn direct_path_template(geom: &ArrayGeometry, probe: &ProbeSignal) -> Vec<f64> {
    let n = probe.total_len();
    let delay = geom.radius * geom.samples_per_meter();
    let mut h = vec![0.0; delay.ceil() as usize + 3];
    dsp::add_fractional_impulse(&mut h, delay, 1.0 / (4.0 * PI * geom.radius));
    dsp::convolve(&h, &probe.samples, n)
}

/// Subtracts the analytically known direct-path contribution from every
/// channel.
pub fn direct_path_removal(
    rec: &MultichannelRecording,
    geom: &ArrayGeometry,
    probe: &ProbeSignal,
) -> Result<MultichannelRecording> {
    if rec.mic_count() != geom.mic_count {
        return Err(Error::ChannelMismatch {
            expected: geom.mic_count,
            got: rec.mic_count(),
        });
    }
    let template = direct_path_template(geom, probe);
    let channels = rec
        .channels
        .iter()
        .map(|ch| ch.iter().enumerate().map(|(i, v)| v - template.get(i).copied().unwrap_or(0.0)).collect())
        .collect();
    MultichannelRecording::new(channels, rec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_probe, mic_positions};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn argmax(x: &[f64]) -> usize {
        x.iter()
            .enumerate()
            .fold((0, f64::MIN), |b, (i, v)| if v.abs() > b.1 { (i, v.abs()) } else { b })
            .0
    }

    /// Power series of J0, independent of the library routine.
    fn j0_series(x: f64) -> f64 {
        let q = -(x * x) / 4.0;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..80 {
            term *= q / (k * k) as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn sabine_coefficient() {
        let room = RoomSpec::new([10.0, 8.0, 7.0], 0.6);
        assert_abs_diff_eq!(room.volume(), 560.0);
        assert_abs_diff_eq!(room.surface(), 412.0);
        let b = t60_to_reflection_coeff(&room).unwrap().beta();
        assert_abs_diff_eq!(b, (1.0 - 0.161 * 560.0 / 0.6 / 412.0f64).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(b, 0.797, epsilon = 1e-3);
        let long = RoomSpec::new([10.0, 8.0, 7.0], 1e9);
        assert!(t60_to_reflection_coeff(&long).unwrap().beta() > 0.999_999);
        let dead = RoomSpec::new([10.0, 8.0, 7.0], 0.1);
        assert_eq!(t60_to_reflection_coeff(&dead).unwrap(), WallReflection::Anechoic);
    }

    #[test]
    fn decay_matched_coefficient_is_monotone() {
        let mut last = 0.0;
        for t60 in [0.05, 0.2, 0.6, 1.0, 3.0] {
            let b = decay_matched_reflection_coeff(&RoomSpec::new([8.0, 6.0, 5.0], t60)).unwrap().beta();
            assert!(b > last && b < 1.0);
            last = b;
        }
    }

    #[test]
    fn anechoic_room_has_single_direct_tap() {
        for absorption in [AbsorptionModel::Sabine, AbsorptionModel::DecayMatched] {
            let room = RoomSpec {
                absorption,
                ..RoomSpec::new([6.0, 5.0, 4.0], 0.0)
            };
            let src = [2.0, 2.0, 2.0];
            let mic = [3.0, 2.0, 2.0];
            let h = &simulate_rir(&room, src, &[mic], 2000).unwrap().responses[0];
            let delay = 22050.0 / 343.0;
            let (start, w) = dsp::fractional_delay_taps(delay);
            let amp = 1.0 / (4.0 * PI);
            for (i, v) in h.iter().enumerate() {
                let k = i as isize - start;
                let expect = if (0..4).contains(&k) { amp * w[k as usize] } else { 0.0 };
                assert_abs_diff_eq!(*v, expect, epsilon = 1e-15);
            }
            assert_abs_diff_eq!(h.iter().sum::<f64>(), amp, epsilon = 1e-12);
        }
    }

    #[test]
    fn direct_tap_position() {
        let room = RoomSpec::new([6.0, 5.0, 4.0], 0.0);
        let h = &simulate_rir(&room, [1.0, 1.0, 1.0], &[[2.715, 1.0, 1.0]], 400).unwrap().responses[0];
        assert_eq!(argmax(h), 110);
        assert!(h[..108].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_order_echo_from_mirror() {
        let room = RoomSpec::new([8.0, 6.0, 5.0], 0.6);
        let src = [4.0, 1.5, 2.5];
        let mic = [4.2, 1.5, 2.5];
        let h = &simulate_rir_with_order(&room, src, &[mic], 1000, Some(1)).unwrap().responses[0];
        let img = mirror(&room, &src, Wall::YMin);
        let tau = distance(&img, &mic) * 22050.0 / 343.0;
        let lo = tau.floor() as usize - 1;
        let peak = lo + argmax(&h[lo..lo + 4]);
        assert!((peak as f64 - tau).abs() <= 1.0, "peak {peak} tau {tau}");
        let truth = first_order_echoes(&room, &src, &mic);
        let y = truth.iter().find(|e| e.wall == Wall::YMin).unwrap();
        assert_abs_diff_eq!(y.tau, tau, epsilon = 1e-12);
        assert_abs_diff_eq!(y.range, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(y.azimuth, -PI / 2.0, epsilon = 1e-12);
    }

    /// Mirror sources reached by at most `depth` successive wall reflections.
    fn enumerate_images(room: &RoomSpec, src: Point3, depth: usize) -> Vec<(Point3, usize)> {
        let mut out: Vec<(Point3, usize)> = vec![(src, 0)];
        let mut frontier = vec![(src, None::<Wall>)];
        for order in 1..=depth {
            let mut next = vec![];
            for (p, last) in &frontier {
                for w in Wall::ALL {
                    if Some(w) == *last {
                        continue;
                    }
                    let q = mirror(room, p, w);
                    if !out.iter().any(|(o, _)| distance(o, &q) < 1e-9) {
                        out.push((q, order));
                        next.push((q, Some(w)));
                    }
                }
            }
            frontier = next;
        }
        out
    }

    #[test]
    fn image_taps_match_mirror_enumeration() {
        let room = RoomSpec::new([5.0, 4.0, 3.0], 0.5);
        let beta = reflection_coeff(&room).unwrap().beta();
        let src = [1.2, 2.9, 1.1];
        let mics = [[3.3, 1.1, 2.0], [4.5, 3.5, 0.4]];
        let len = 4000;
        let rirs = simulate_rir_with_order(&room, src, &mics, len, Some(2)).unwrap();
        assert_eq!(rirs.max_order, 2);
        let images = enumerate_images(&room, src, 2);
        assert_eq!(images.len(), 1 + 6 + 18);
        for (mic, h) in mics.iter().zip(&rirs.responses) {
            let mut expect = vec![0.0; len];
            for (p, order) in &images {
                let d = distance(p, mic);
                dsp::add_fractional_impulse(&mut expect, d * 22050.0 / 343.0, beta.powi(*order as i32) / (4.0 * PI * d));
            }
            for (a, b) in h.iter().zip(&expect) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-14);
            }
            // every nonzero tap lies in the interpolation support of some image
            for (i, v) in h.iter().enumerate() {
                if *v != 0.0 {
                    assert!(images.iter().any(|(p, _)| {
                        let t = distance(p, mic) * 22050.0 / 343.0;
                        i as f64 >= t.floor() - 1.0 && i as f64 <= t.floor() + 2.0
                    }));
                }
            }
        }
    }

    #[test]
    fn simulated_t60_within_twenty_percent() {
        for dims in [[10.0, 8.0, 5.0], [8.0, 6.0, 5.0]] {
            for t60 in [0.2, 0.4, 0.6, 0.8, 1.0] {
                let room = RoomSpec::new(dims, t60);
                let src = [dims[0] * 0.37, dims[1] * 0.41, dims[2] * 0.45];
                let mic = [dims[0] * 0.61, dims[1] * 0.57, dims[2] * 0.52];
                let len = (1.5 * t60 * 22050.0) as usize;
                let h = &simulate_rir(&room, src, &[mic], len).unwrap().responses[0];
                let est = estimate_t60_in_band(h, 22050.0, 500.0, 4000.0).unwrap();
                assert!((est / t60 - 1.0).abs() <= 0.2, "{dims:?} t60 {t60}: measured {est}");
            }
        }
    }

    #[test]
    fn t60_estimator_on_synthetic_decay() {
        let mut rng = seed::rng(3);
        for t60 in [0.2, 0.6, 1.0] {
            let n = (1.5 * t60 * 22050.0) as usize;
            let h: Vec<f64> = (0..n)
                .map(|i| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v * 10f64.powf(-3.0 * i as f64 / 22050.0 / t60)
                })
                .collect();
            let est = estimate_t60(&h, 22050.0).unwrap();
            assert!((est / t60 - 1.0).abs() < 0.05, "{t60} -> {est}");
        }
    }

    #[test]
    fn rejects_bad_requests() {
        let room = RoomSpec::new([5.0, 4.0, 3.0], 0.5);
        assert!(matches!(
            simulate_rir(&room, [6.0, 1.0, 1.0], &[[1.0, 1.0, 1.0]], 10),
            Err(Error::OutsideRoom { .. })
        ));
        assert!(simulate_rir(&room, [1.0, 1.0, 1.0], &[[1.0, 0.0, 1.0]], 10).is_err());
        assert!(simulate_rir(&room, [1.0, 1.0, 1.0], &[[2.0, 1.0, 1.0]], 0).is_err());
        assert!(RoomSpec::new([5.0, -1.0, 3.0], 0.5).validate().is_err());
    }

    fn rig(room: &RoomSpec, geom: &ArrayGeometry, center: Point3, len: usize) -> RirSet {
        simulate_rir(room, center, &mic_positions(geom, center).unwrap(), len).unwrap()
    }

    #[test]
    fn realized_snr_and_sdnr() {
        let geom = ArrayGeometry::default();
        let room = RoomSpec::new([10.0, 8.0, 5.0], 0.6);
        let probe = generate_probe(1500, 20000, 22050.0, 7).unwrap();
        let rirs = rig(&room, &geom, [1.5, 4.0, 2.5], 20000);
        let r = Renderer::new(geom, 20000);
        for (snr, sdnr) in [(-10.0, 40.0), (0.0, 20.0), (30.0, 5.0)] {
            let noise = NoiseModel {
                snr_db: Some(snr),
                sdnr_db: Some(sdnr),
                rotor_rps: 70.0,
                seed: 11,
            };
            let parts = r.render_parts(&rirs, &probe, &noise).unwrap();
            let x = dsp::variance(&parts.clean.channels[0]);
            let d = dsp::variance(&parts.diffuse.as_ref().unwrap().channels[0]);
            assert!((10.0 * (x / d).log10() - sdnr).abs() < 0.2);
            for ch in &parts.white.as_ref().unwrap().channels {
                assert!((10.0 * (x / dsp::variance(ch)).log10() - snr).abs() < 0.2);
            }
        }
    }

    #[test]
    fn noiseless_render_is_the_clean_convolution() {
        let geom = ArrayGeometry::default();
        let room = RoomSpec::new([6.0, 5.0, 4.0], 0.3);
        let probe = generate_probe(300, 3000, 22050.0, 1).unwrap();
        let rirs = rig(&room, &geom, [2.0, 2.0, 2.0], 3000);
        let y = render_observation(&rirs, &probe, &NoiseModel::noiseless(), &geom).unwrap();
        for (ch, h) in y.channels.iter().zip(&rirs.responses) {
            for n in [0, 57, 400, 2999] {
                let direct: f64 = (0..=n).map(|i| h[i] * probe.samples[n - i]).sum();
                assert_abs_diff_eq!(ch[n], direct, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn render_is_linear_in_the_probe() {
        let geom = ArrayGeometry::default();
        let room = RoomSpec::new([6.0, 5.0, 4.0], 0.4);
        let a = generate_probe(300, 3000, 22050.0, 1).unwrap();
        let b = generate_probe(300, 3000, 22050.0, 2).unwrap();
        let sum = ProbeSignal {
            samples: a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect(),
            ..a.clone()
        };
        let rirs = rig(&room, &geom, [2.0, 2.0, 2.0], 3000);
        let r = Renderer::new(geom, 3000);
        let n = NoiseModel::noiseless();
        let ya = r.render(&rirs, &a, &n).unwrap();
        let yb = r.render(&rirs, &b, &n).unwrap();
        let ys = r.render(&rirs, &sum, &n).unwrap();
        for m in 0..6 {
            for i in 0..3000 {
                assert_abs_diff_eq!(ys.channels[m][i], ya.channels[m][i] + yb.channels[m][i], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn render_checks_channel_count() {
        let geom = ArrayGeometry::default();
        let room = RoomSpec::new([6.0, 5.0, 4.0], 0.4);
        let probe = generate_probe(100, 500, 22050.0, 1).unwrap();
        let rirs = simulate_rir(&room, [2.0, 2.0, 2.0], &[[2.2, 2.0, 2.0]], 500).unwrap();
        assert!(matches!(
            render_observation(&rirs, &probe, &NoiseModel::noiseless(), &geom),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn direct_path_cancels_in_free_field() {
        let geom = ArrayGeometry::default();
        let room = RoomSpec::new([6.0, 5.0, 4.0], 0.0);
        let probe = generate_probe(1500, 20000, 22050.0, 5).unwrap();
        let rirs = rig(&room, &geom, [3.0, 2.5, 2.0], 20000);
        let y = render_observation(&rirs, &probe, &NoiseModel::noiseless(), &geom).unwrap();
        let res = direct_path_removal(&y, &geom, &probe).unwrap();
        for (a, b) in res.channels.iter().zip(&y.channels) {
            assert!(dsp::energy(a) < 1e-6 * dsp::energy(b));
        }
        let zero_probe = ProbeSignal {
            samples: vec![0.0; 20000],
            ..probe.clone()
        };
        let z = MultichannelRecording::zeros(6, 20000, 22050.0);
        let out = direct_path_removal(&z, &geom, &zero_probe).unwrap();
        assert!(out.channels.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn direct_path_removal_leaves_the_reflections() {
        let geom = ArrayGeometry::default();
        let room = RoomSpec::new([8.0, 6.0, 5.0], 0.6);
        let center = [4.0, 1.5, 2.5];
        let probe = generate_probe(1500, 6000, 22050.0, 5).unwrap();
        let mics = mic_positions(&geom, center).unwrap();
        let rirs = simulate_rir(&room, center, &mics, 6000).unwrap();
        let y = render_observation(&rirs, &probe, &NoiseModel::noiseless(), &geom).unwrap();
        let res = direct_path_removal(&y, &geom, &probe).unwrap();
        // same observation rendered with the direct tap removed from each RIR
        let mut echo_only = rirs.clone();
        for (h, mic) in echo_only.responses.iter_mut().zip(&mics) {
            let d = distance(&center, mic);
            let mut direct = vec![0.0; h.len()];
            dsp::add_fractional_impulse(&mut direct, d * 22050.0 / 343.0, 1.0 / (4.0 * PI * d));
            h.iter_mut().zip(&direct).for_each(|(a, b)| *a -= b);
        }
        let expect = render_observation(&echo_only, &probe, &NoiseModel::noiseless(), &geom).unwrap();
        for (a, b) in res.channels.iter().zip(&expect.channels) {
            for (x, y) in a.iter().zip(b) {
                assert_abs_diff_eq!(*x, *y, epsilon = 1e-10);
            }
        }
        let first = res.channels[0].iter().position(|v| v.abs() > 1e-9).unwrap();
        let tau = first_order_echoes(&room, &center, &mics[0])
            .iter()
            .map(|e| e.tau)
            .fold(f64::MAX, f64::min);
        assert!((first as f64 - tau).abs() <= 2.0, "first burst {first}, echo {tau}");
    }

    #[test]
    fn j0_oracle_agrees_with_library() {
        for x in [0.0, 0.5, 2.404_825_557_695_773, 7.0, 15.0] {
            assert_abs_diff_eq!(libm::j0(x), j0_series(x), epsilon = 1e-9);
        }
    }

    #[test]
    fn diffuse_coherence_tracks_bessel_curve() {
        let geom = ArrayGeometry::default();
        let n = 1 << 17;
        let noise = diffuse_noise(&geom, n, 70.0, 4).unwrap();
        let seg = 512;
        let (sxx, _) = dsp::welch_cross_spectrum(&noise.channels[0], &noise.channels[0], seg, seg / 2);
        let (syy, _) = dsp::welch_cross_spectrum(&noise.channels[1], &noise.channels[1], seg, seg / 2);
        let (sxy, _) = dsp::welch_cross_spectrum(&noise.channels[0], &noise.channels[1], seg, seg / 2);
        let d = distance(
            &mic_positions(&geom, [0.0; 3]).unwrap()[0],
            &mic_positions(&geom, [0.0; 3]).unwrap()[1],
        );
        assert_abs_diff_eq!(d, 0.2, epsilon = 1e-12);
        let mut err = 0.0;
        let mut count = 0.0;
        for k in 0..=seg / 2 {
            let f = k as f64 * 22050.0 / seg as f64;
            if !(200.0..=8000.0).contains(&f) {
                continue;
            }
            let msc = sxy[k].norm_sqr() / (sxx[k].re * syy[k].re);
            let target = j0_series(TAU * f * d / 343.0).powi(2);
            err += (msc - target).abs();
            count += 1.0;
        }
        assert!(err / count < 0.1, "coherence MAE {}", err / count);
    }

    #[test]
    fn single_mic_diffuse_noise_is_plain_surrogate() {
        let geom = ArrayGeometry {
            mic_count: 1,
            ..ArrayGeometry::default()
        };
        let n = diffuse_noise(&geom, 4096, 70.0, 1).unwrap();
        assert_eq!(n.mic_count(), 1);
        assert!(dsp::variance(&n.channels[0]) > 0.0);
        assert_abs_diff_eq!(cylindrical_coherence(0.0, 3000.0, 343.0), 1.0);
    }

    #[test]
    fn diffuse_noise_is_seeded() {
        let geom = ArrayGeometry::default();
        let a = diffuse_noise(&geom, 2048, 70.0, 9).unwrap();
        let b = diffuse_noise(&geom, 2048, 70.0, 9).unwrap();
        let c = diffuse_noise(&geom, 2048, 70.0, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn first_tap_not_before_direct_delay(
            sx in 0.5f64..5.5, sy in 0.5f64..4.5, mx in 0.5f64..5.5, my in 0.5f64..4.5, t60 in 0.0f64..0.8,
        ) {
            let room = RoomSpec::new([6.0, 5.0, 3.0], t60);
            let src = [sx, sy, 1.5];
            let mic = [mx, my, 1.2];
            let h = &simulate_rir(&room, src, &[mic], 1200).unwrap().responses[0];
            let first = h.iter().position(|v| *v != 0.0);
            let bound = (distance(&src, &mic) * 22050.0 / 343.0).floor() - 1.0;
            if let Some(first) = first {
                prop_assert!(first as f64 >= bound);
            }
        }
    }
}
