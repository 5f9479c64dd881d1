//! Per-pose echo probing, projection into the world frame and map scoring.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{EchoClass, EchoFeature, SvmModel};
use crate::doa::{estimate_echo_doa, DoaConfig, DoaEstimate};
use crate::error::{Error, Result};
use crate::geometry::{angle_diff, mic_positions_rotated, wrap_angle, ArrayGeometry, Point3, Pose, ProbeSignal};
use crate::room::{
    direct_path_removal, first_order_echoes, simulate_rir, EchoTruth, MultichannelRecording, NoiseModel, Renderer,
    RirSet, RoomSpec,
};
use crate::seed;
use crate::toa::{estimate_toa_with_curve, spectrum, FreqDomainConfig, ToaEstimate};

/// Estimator settings shared by every pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub toa: FreqDomainConfig,
    pub doa: DoaConfig,
    /// Height of the array plane; `None` puts it half way up the room.
    #[serde(default)]
    pub array_height: Option<f64>,
    /// Estimates whose objective peak is less than this multiple of the
    /// median absolute objective over the grid are marked low-score.
    #[serde(default = "default_min_prominence")]
    pub min_prominence: f64,
}

fn default_min_prominence() -> f64 {
    6.0
}

impl PipelineConfig {
    pub fn for_observation(obs_len: usize, geom: &ArrayGeometry) -> Self {
        Self {
            toa: FreqDomainConfig::for_observation(obs_len, geom.sample_rate, geom.speed_of_sound),
            doa: DoaConfig::default(),
            array_height: None,
            min_prominence: default_min_prominence(),
        }
    }
}

/// Interference level for a probe, possibly drawn at random per pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Level {
    Fixed(f64),
    /// Uniform over `[lo, hi]` dB.
    Uniform([f64; 2]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisePlan {
    /// White-noise SNR, dB; `null` leaves the component out.
    pub snr_db: Option<Level>,
    /// Diffuse rotor-noise SDNR, dB.
    pub sdnr_db: Option<f64>,
    #[serde(default = "default_rotor_rps")]
    pub rotor_rps: f64,
}

fn default_rotor_rps() -> f64 {
    NoiseModel::noiseless().rotor_rps
}

impl Default for NoisePlan {
    fn default() -> Self {
        Self {
            snr_db: Some(Level::Fixed(10.0)),
            sdnr_db: Some(40.0),
            rotor_rps: default_rotor_rps(),
        }
    }
}

impl NoisePlan {
    pub fn validate(&self) -> Result<()> {
        match self.snr_db {
            Some(Level::Fixed(v)) if !v.is_finite() => return Err(Error::invalid("snr_db", "must be finite")),
            Some(Level::Uniform([lo, hi])) if !(lo.is_finite() && hi.is_finite() && lo <= hi) => {
                return Err(Error::invalid("snr_db", "range must be finite with lo ≤ hi"))
            }
            _ => {}
        }
        self.draw(0).validate()
    }

    /// Concrete noise for one probe. The same seed gives the same level and
    /// the same noise samples.
    pub fn draw(&self, seed: u64) -> NoiseModel {
        let snr_db = self.snr_db.map(|l| match l {
            Level::Fixed(v) => v,
            Level::Uniform([lo, hi]) => {
                if lo == hi {
                    lo
                } else {
                    seed::rng(seed::derive(&[seed, 0x534e_52])).random_range(lo..=hi)
                }
            }
        });
        NoiseModel {
            snr_db,
            sdnr_db: self.sdnr_db,
            rotor_rps: self.rotor_rps,
            seed,
        }
    }
}

/// Estimates from one probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub toa: ToaEstimate,
    pub doa: DoaEstimate,
    pub feature: EchoFeature,
    /// Objective peak over the median absolute objective.
    pub prominence: f64,
    /// Boundary maximum or a peak that does not stand out of the grid.
    pub low_score: bool,
}

/// Renders and analyses probes for one room, array and probe signal. The
/// probe spectrum and diffuse-noise mixing are computed once.
#[derive(Debug)]
pub struct Prober {
    room: RoomSpec,
    geom: ArrayGeometry,
    probe: ProbeSignal,
    probe_spectrum: Vec<Complex64>,
    cfg: PipelineConfig,
    renderer: Renderer,
}

impl Prober {
    pub fn new(room: RoomSpec, geom: ArrayGeometry, probe: ProbeSignal, cfg: PipelineConfig) -> Result<Self> {
        room.validate()?;
        geom.validate()?;
        cfg.toa.validate()?;
        cfg.doa.validate(geom.sample_rate)?;
        if room.sample_rate != geom.sample_rate || probe.sample_rate != geom.sample_rate {
            return Err(Error::SampleRateMismatch {
                a: room.sample_rate,
                b: geom.sample_rate.max(probe.sample_rate),
            });
        }
        if cfg.toa.sample_rate != geom.sample_rate {
            return Err(Error::SampleRateMismatch {
                a: cfg.toa.sample_rate,
                b: geom.sample_rate,
            });
        }
        if cfg.toa.dft_len < probe.total_len() {
            return Err(Error::invalid("dft_len", "must be at least the observation length"));
        }
        if let Some(h) = cfg.array_height {
            if !(h > 0.0 && h < room.dims[2]) {
                return Err(Error::invalid("array_height", "must lie strictly between floor and ceiling"));
            }
        }
        let probe_spectrum = spectrum(&probe.samples, &cfg.toa);
        let renderer = Renderer::new(geom, probe.total_len());
        Ok(Self {
            room,
            geom,
            probe,
            probe_spectrum,
            cfg,
            renderer,
        })
    }

    pub fn room(&self) -> &RoomSpec {
        &self.room
    }

    pub fn geometry(&self) -> &ArrayGeometry {
        &self.geom
    }

    pub fn probe(&self) -> &ProbeSignal {
        &self.probe
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Same probe and estimators in another room.
    pub fn with_room(&self, room: RoomSpec) -> Result<Self> {
        Self::new(room, self.geom, self.probe.clone(), self.cfg)
    }

    pub fn array_center(&self, pose: &Pose) -> Point3 {
        [pose.x, pose.y, self.cfg.array_height.unwrap_or(self.room.dims[2] / 2.0)]
    }

    pub fn mic_positions(&self, pose: &Pose) -> Result<Vec<Point3>> {
        mic_positions_rotated(&self.geom, self.array_center(pose), pose.heading)
    }

    pub fn rirs(&self, pose: &Pose) -> Result<RirSet> {
        simulate_rir(&self.room, self.array_center(pose), &self.mic_positions(pose)?, self.probe.total_len())
    }

    /// What the microphones record, direct path included.
    pub fn render(&self, rirs: &RirSet, noise: &NoiseModel) -> Result<MultichannelRecording> {
        self.renderer.render(rirs, &self.probe, noise)
    }

    pub fn remove_direct_path(&self, rec: &MultichannelRecording) -> Result<MultichannelRecording> {
        direct_path_removal(rec, &self.geom, &self.probe)
    }

    /// Direct-path-free observation for precomputed responses.
    pub fn observe_with(&self, rirs: &RirSet, noise: &NoiseModel) -> Result<MultichannelRecording> {
        direct_path_removal(&self.render(rirs, noise)?, &self.geom, &self.probe)
    }

    pub fn observe(&self, pose: &Pose, noise: &NoiseModel) -> Result<MultichannelRecording> {
        self.observe_with(&self.rirs(pose)?, noise)
    }

    /// Delay on the reference channel, then the beam scan over the echo
    /// segment. Expects the direct path already removed.
    pub fn estimate(&self, rec: &MultichannelRecording) -> Result<PoseEstimate> {
        if rec.mic_count() != self.geom.mic_count {
            return Err(Error::ChannelMismatch {
                expected: self.geom.mic_count,
                got: rec.mic_count(),
            });
        }
        if rec.sample_rate != self.geom.sample_rate {
            return Err(Error::SampleRateMismatch {
                a: rec.sample_rate,
                b: self.geom.sample_rate,
            });
        }
        let obs = spectrum(&rec.channels[self.geom.reference_index], &self.cfg.toa);
        let (toa, curve) = estimate_toa_with_curve(&obs, &self.probe_spectrum, &self.cfg.toa)?;
        let prominence = prominence(&curve, toa.score);
        let scan = estimate_echo_doa(rec, &self.geom, toa.tau, self.probe.active_len, &self.cfg.doa)?;
        let doa = scan.estimate;
        Ok(PoseEstimate {
            toa,
            doa,
            feature: EchoFeature::from_estimates(&toa, &doa),
            prominence,
            low_score: toa.at_boundary || prominence < self.cfg.min_prominence,
        })
    }

    pub fn probe_at_pose(&self, pose: &Pose, noise: &NoiseModel) -> Result<PoseEstimate> {
        self.estimate(&self.observe(pose, noise)?)
    }

    /// First-order echoes at the reference microphone for a source at the
    /// array center. Azimuths are in the array frame.
    pub fn truth(&self, pose: &Pose) -> Result<Vec<EchoTruth>> {
        let center = self.array_center(pose);
        let mics = self.mic_positions(pose)?;
        Ok(first_order_echoes(&self.room, &center, &mics[self.geom.reference_index])
            .into_iter()
            .map(|e| EchoTruth {
                azimuth: wrap_angle(e.azimuth - pose.heading),
                ..e
            })
            .collect())
    }
}

fn prominence(curve: &[(f64, f64)], peak: f64) -> f64 {
    let mut mags: Vec<f64> = curve.iter().map(|(_, v)| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let median = mags[mags.len() / 2];
    if median > 0.0 {
        peak / median
    } else if peak > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Convenience wrapper building a one-off [`Prober`].
pub fn probe_at_pose(
    pose: &Pose,
    room: &RoomSpec,
    geom: &ArrayGeometry,
    probe: &ProbeSignal,
    noise: &NoiseModel,
    cfg: &PipelineConfig,
) -> Result<PoseEstimate> {
    Prober::new(*room, *geom, probe.clone(), *cfg)?.probe_at_pose(pose, noise)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflectorPoint {
    pub x: f64,
    pub y: f64,
    pub source_pose: usize,
    pub accepted: bool,
    pub feature: EchoFeature,
}

/// Reflector position implied by a delay and an array-frame direction.
/// The range is half the round-trip path.
pub fn project(pose: &Pose, toa: &ToaEstimate, doa: &DoaEstimate, geom: &ArrayGeometry) -> ReflectorPoint {
    let range = geom.speed_of_sound * toa.tau / (2.0 * geom.sample_rate);
    let az = pose.heading + doa.azimuth;
    ReflectorPoint {
        x: pose.x + range * az.cos(),
        y: pose.y + range * az.sin(),
        source_pose: 0,
        accepted: true,
        feature: EchoFeature::from_estimates(toa, doa),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    /// Seconds between probes. Informational only.
    #[serde(default)]
    pub probe_interval_s: f64,
}

impl Trajectory {
    /// Every pose keeps more than the array radius from every wall.
    pub fn validate(&self, room: &RoomSpec, geom: &ArrayGeometry) -> Result<()> {
        if self.poses.is_empty() {
            return Err(Error::invalid("poses", "trajectory is empty"));
        }
        for (i, p) in self.poses.iter().enumerate() {
            let clearance = p.x.min(room.dims[0] - p.x).min(p.y).min(room.dims[1] - p.y);
            if !(clearance > geom.radius) {
                return Err(Error::invalid(
                    format!("poses[{i}]"),
                    format!("({}, {}) is within the array radius of a wall", p.x, p.y),
                ));
            }
        }
        Ok(())
    }

    /// Counter-clockwise loop around the rectangle inset by `margin`, one
    /// pose every `spacing` meters, heading along the direction of travel.
    pub fn wall_following(room: &RoomSpec, margin: f64, spacing: f64) -> Result<Self> {
        let (l, w) = (room.dims[0], room.dims[1]);
        if !(margin > 0.0 && 2.0 * margin < l && 2.0 * margin < w) {
            return Err(Error::invalid("margin", "inset rectangle must be non-degenerate"));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::invalid("spacing", "must be positive"));
        }
        let corners = [[margin, margin], [l - margin, margin], [l - margin, w - margin], [margin, w - margin]];
        let headings = [0.0, FRAC_PI_2, PI, -FRAC_PI_2];
        let lens: Vec<f64> = (0..4)
            .map(|i| {
                let (a, b) = (corners[i], corners[(i + 1) % 4]);
                (b[0] - a[0]).abs() + (b[1] - a[1]).abs()
            })
            .collect();
        let perimeter: f64 = lens.iter().sum();
        let count = (perimeter / spacing).floor().max(1.0) as usize;
        let poses = (0..count)
            .map(|k| {
                let mut s = k as f64 * spacing;
                let mut edge = 0;
                while edge < 3 && s >= lens[edge] {
                    s -= lens[edge];
                    edge += 1;
                }
                let (a, b) = (corners[edge], corners[(edge + 1) % 4]);
                let t = (s / lens[edge]).min(1.0);
                Pose::new(a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), headings[edge])
            })
            .collect();
        Ok(Self {
            poses,
            probe_interval_s: 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialMap {
    pub points: Vec<ReflectorPoint>,
    pub poses: Vec<Pose>,
    /// Ground truth, used for scoring and drawing only.
    pub room: RoomSpec,
}

impl SpatialMap {
    /// `x,y,accepted,pose_index` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,accepted,pose_index\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{},{}\n", p.x, p.y, p.accepted as u8, p.source_pose));
        }
        out
    }

    pub fn accepted(&self) -> impl Iterator<Item = &ReflectorPoint> {
        self.points.iter().filter(|p| p.accepted)
    }
}

/// One projected echo per pose. Pose `i` is probed with noise seed
/// `derive([seed, i])`. With a model, points classified as no-wall are kept
/// but flagged as rejected.
pub fn build_map(
    traj: &Trajectory,
    prober: &Prober,
    noise: &NoisePlan,
    seed: u64,
    model: Option<&SvmModel>,
) -> Result<SpatialMap> {
    traj.validate(prober.room(), prober.geometry())?;
    noise.validate()?;
    let estimates = traj
        .poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| prober.probe_at_pose(pose, &noise.draw(seed::derive(&[seed, i as u64]))))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble_map(traj, prober, &estimates, model))
}

/// Map from per-pose estimates already computed, e.g. to compare filtered
/// and unfiltered maps on identical probes.
pub fn assemble_map(traj: &Trajectory, prober: &Prober, estimates: &[PoseEstimate], model: Option<&SvmModel>) -> SpatialMap {
    let points = traj
        .poses
        .iter()
        .zip(estimates)
        .enumerate()
        .map(|(i, (pose, est))| {
            let mut p = project(pose, &est.toa, &est.doa, prober.geometry());
            p.source_pose = i;
            p.accepted = model.map_or(true, |m| m.predict(&est.feature).class == EchoClass::Wall);
            p
        })
        .collect();
    SpatialMap {
        points,
        poses: traj.poses.clone(),
        room: *prober.room(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapMetrics {
    /// Fraction of accepted points within tolerance of a wall; zero when no
    /// point is accepted.
    pub wall_fraction: f64,
    pub spurious_count: usize,
    pub accepted_count: usize,
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

/// Distance from `(x, y)` to the nearest segment of the room outline.
pub fn distance_to_outline(room: &RoomSpec, x: f64, y: f64) -> f64 {
    let (l, w) = (room.dims[0], room.dims[1]);
    let c = [[0.0, 0.0], [l, 0.0], [l, w], [0.0, w]];
    (0..4)
        .map(|i| point_segment_distance([x, y], c[i], c[(i + 1) % 4]))
        .fold(f64::INFINITY, f64::min)
}

pub fn map_metrics(map: &SpatialMap, tol_m: f64) -> MapMetrics {
    let mut near = 0;
    let mut accepted = 0;
    for p in map.accepted() {
        accepted += 1;
        if distance_to_outline(&map.room, p.x, p.y) <= tol_m {
            near += 1;
        }
    }
    MapMetrics {
        wall_fraction: if accepted > 0 { near as f64 / accepted as f64 } else { 0.0 },
        spurious_count: accepted - near,
        accepted_count: accepted,
    }
}

/// True when the estimated direction is within `tol` radians of any
/// vertical wall in `truth`.
pub fn doa_matches(truth: &[EchoTruth], azimuth: f64, tol: f64) -> bool {
    truth
        .iter()
        .filter(|e| e.wall.is_vertical())
        .any(|e| angle_diff(azimuth, e.azimuth).abs() <= tol + 1e-9)
}

/// True when the delay is within `tol` samples of any first-order echo.
pub fn toa_matches(truth: &[EchoTruth], tau: f64, tol: f64) -> bool {
    truth.iter().any(|e| (tau - e.tau).abs() <= tol)
}
