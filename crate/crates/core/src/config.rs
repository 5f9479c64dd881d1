//! Declarative scenario description shared by every command.
//!
//! A config is one JSON document. Unknown fields are rejected; every
//! section other than `version` and `room` has defaults.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineConfig;
use crate::classifier::DatasetSpec;
use crate::doa::DoaConfig;
use crate::dsp;
use crate::error::{Error, Result};
use crate::eval::{AccuracyTol, ExperimentSpec, SweepVariable};
use crate::geometry::{ArrayGeometry, Pose, ProbeSpec};
use crate::mapper::{NoisePlan, PipelineConfig, Prober, Trajectory};
use crate::room::RoomSpec;
use crate::toa::{FreqDomainConfig, IntervalMode};

pub const CONFIG_VERSION: u32 = 1;

/// Delay-estimator settings. Sample rate and speed of sound come from the
/// array geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSpec {
    pub search_min_m: f64,
    pub search_max_m: f64,
    pub grid_step: f64,
    pub interval: IntervalMode,
    /// Defaults to the next power of two at or above the probe length.
    pub dft_len: Option<usize>,
    pub min_prominence: f64,
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        Self {
            search_min_m: 1.0,
            search_max_m: 2.0,
            grid_step: 1.0,
            interval: IntervalMode::Range,
            dft_len: None,
            min_prominence: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSpec {
    pub c_grid: Vec<f64>,
    pub width_grid: Vec<f64>,
    pub folds: usize,
    pub split_ratio: f64,
    /// Trained model used by `estimate` and `map` when none is given on the
    /// command line.
    pub model: Option<PathBuf>,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            c_grid: vec![0.1, 1.0, 10.0, 100.0],
            width_grid: vec![0.01, 0.1, 1.0, 10.0],
            folds: 5,
            split_ratio: 0.8,
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectorySpec {
    WallFollowing { margin: f64, spacing: f64 },
    Explicit { poses: Vec<Pose> },
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec::WallFollowing {
            margin: 1.5,
            spacing: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapSpec {
    /// Distance within which a point counts as lying on a wall, meters.
    pub tol_m: f64,
}

impl Default for MapSpec {
    fn default() -> Self {
        Self { tol_m: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub snr_values: Vec<f64>,
    pub t60_values: Vec<f64>,
    pub trials: usize,
    /// White-noise SNR used during the reverberation sweep.
    pub fixed_snr_db: f64,
    pub sdnr_db: Option<f64>,
    pub accuracy_tol: AccuracyTol,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            snr_values: vec![-40.0, -30.0, -20.0, -10.0, 0.0, 10.0, 20.0, 30.0, 40.0],
            t60_values: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            trials: 50,
            fixed_snr_db: 10.0,
            sdnr_db: Some(40.0),
            accuracy_tol: AccuracyTol::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub room: RoomSpec,
    #[serde(default)]
    pub geometry: ArrayGeometry,
    #[serde(default)]
    pub probe: ProbeSpec,
    /// Interference for `sim`, `map` and single-pose runs.
    #[serde(default)]
    pub noise: NoisePlan,
    #[serde(default)]
    pub estimator: EstimatorSpec,
    #[serde(default)]
    pub doa: DoaConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    /// Array pose for `sim` and `eval`; defaults to 1.5 m from the x = 0
    /// wall, centered in y, facing it.
    #[serde(default)]
    pub pose: Option<Pose>,
    /// Height of the array plane; defaults to half the room height.
    #[serde(default)]
    pub array_height: Option<f64>,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub classifier: ClassifierSpec,
    #[serde(default)]
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub map: MapSpec,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

fn check(cond: bool, field: &str, reason: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::invalid(field, reason))
    }
}

fn positive_grid(values: &[f64], field: &str) -> Result<()> {
    check(!values.is_empty(), field, "must not be empty")?;
    check(
        values.iter().all(|v| *v > 0.0 && v.is_finite()),
        field,
        "entries must be positive and finite",
    )
}

impl ScenarioConfig {
    /// Minimal config for `room` with every other section at its default.
    pub fn for_room(room: RoomSpec) -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            room,
            geometry: ArrayGeometry::default(),
            probe: ProbeSpec::default(),
            noise: NoisePlan::default(),
            estimator: EstimatorSpec::default(),
            doa: DoaConfig::default(),
            baseline: BaselineConfig::default(),
            pose: None,
            array_height: None,
            dataset: DatasetSpec::default(),
            classifier: ClassifierSpec::default(),
            trajectory: TrajectorySpec::default(),
            map: MapSpec::default(),
            experiment: ExperimentSection::default(),
        }
    }

    /// Parses and validates. Syntax errors carry serde's line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Cross-field consistency. Failures name the offending field as
    /// `section.field`.
    pub fn validate(&self) -> Result<()> {
        check(
            self.version == CONFIG_VERSION,
            "version",
            format!("unsupported version {}, expected {CONFIG_VERSION}", self.version),
        )?;
        self.room.validate().map_err(|e| e.in_section("room"))?;
        self.geometry.validate().map_err(|e| e.in_section("geometry"))?;
        let fs = self.geometry.sample_rate;
        check(
            self.room.sample_rate == fs,
            "geometry.sample_rate",
            format!("{fs} Hz disagrees with room.sample_rate {} Hz", self.room.sample_rate),
        )?;
        check(
            self.room.speed_of_sound == self.geometry.speed_of_sound,
            "geometry.speed_of_sound",
            format!(
                "{} m/s disagrees with room.speed_of_sound {} m/s",
                self.geometry.speed_of_sound, self.room.speed_of_sound
            ),
        )?;
        self.validate_probe_and_estimators()?;
        self.validate_placement()?;
        self.validate_learning()?;
        self.validate_experiment()
    }

    fn validate_probe_and_estimators(&self) -> Result<()> {
        let total = self.probe.total_len;
        check(self.probe.active_len > 0, "probe.active_len", "must be positive")?;
        check(
            self.probe.active_len <= total,
            "probe.active_len",
            format!("{} exceeds probe.total_len {total}", self.probe.active_len),
        )?;
        self.noise.validate().map_err(|e| e.in_section("noise"))?;

        let toa = self.toa_config();
        toa.validate().map_err(|e| e.in_section("estimator"))?;
        check(
            toa.dft_len >= total,
            "estimator.dft_len",
            format!("{} is shorter than probe.total_len {total}", toa.dft_len),
        )?;
        let grid = toa.tau_grid();
        check(
            !grid.is_empty(),
            "estimator.search_max_m",
            "search interval contains no delay grid point",
        )?;
        check(
            grid.last().is_some_and(|&t| t < total as f64),
            "estimator.search_max_m",
            format!("delays reach past the {total}-sample observation"),
        )?;
        check(
            self.estimator.min_prominence >= 0.0 && self.estimator.min_prominence.is_finite(),
            "estimator.min_prominence",
            "must be non-negative",
        )?;

        self.doa.validate(self.geometry.sample_rate).map_err(|e| e.in_section("doa"))?;
        check(
            self.doa.frame_len <= total,
            "doa.frame_len",
            format!("{} exceeds probe.total_len {total}", self.doa.frame_len),
        )?;
        self.baseline.validate().map_err(|e| e.in_section("baseline"))?;
        check(
            self.baseline.segment_len <= total,
            "baseline.segment_len",
            format!("{} exceeds probe.total_len {total}", self.baseline.segment_len),
        )
    }

    fn validate_placement(&self) -> Result<()> {
        if let Some(h) = self.array_height {
            check(
                h > 0.0 && h < self.room.dims[2],
                "array_height",
                "must lie strictly between floor and ceiling",
            )?;
        }
        let pose = self.pose();
        let d = self.room.dims;
        let clearance = pose.x.min(d[0] - pose.x).min(pose.y).min(d[1] - pose.y);
        check(
            clearance > self.geometry.radius && pose.heading.is_finite(),
            "pose",
            format!(
                "({}, {}) must keep more than the array radius from every wall",
                pose.x, pose.y
            ),
        )?;
        self.trajectory().map_err(|e| e.in_section("trajectory"))?;
        check(self.map.tol_m > 0.0, "map.tol_m", "must be positive")
    }

    fn validate_learning(&self) -> Result<()> {
        let ds = &self.dataset;
        check(ds.grid_points > 0, "dataset.grid_points", "must be positive")?;
        check(
            ds.margin >= self.geometry.radius,
            "dataset.margin",
            format!("must be at least the array radius {}", self.geometry.radius),
        )?;
        check(
            2.0 * ds.margin < self.room.dims[0] && 2.0 * ds.margin < self.room.dims[1],
            "dataset.margin",
            "grid does not fit inside the room",
        )?;
        check(ds.heading.is_finite(), "dataset.heading", "must be finite")?;
        ds.noise.validate().map_err(|e| e.in_section("dataset.noise"))?;

        let c = &self.classifier;
        positive_grid(&c.c_grid, "classifier.c_grid")?;
        positive_grid(&c.width_grid, "classifier.width_grid")?;
        check(c.folds >= 2, "classifier.folds", "need at least 2 folds")?;
        check(
            c.split_ratio > 0.0 && c.split_ratio < 1.0,
            "classifier.split_ratio",
            "must lie in (0, 1)",
        )
    }

    fn validate_experiment(&self) -> Result<()> {
        let e = &self.experiment;
        check(e.trials >= 1, "experiment.trials", "need at least one trial")?;
        check(!e.snr_values.is_empty(), "experiment.snr_values", "must not be empty")?;
        check(
            e.snr_values.iter().all(|v| v.is_finite()),
            "experiment.snr_values",
            "must be finite",
        )?;
        check(!e.t60_values.is_empty(), "experiment.t60_values", "must not be empty")?;
        check(
            e.t60_values.iter().all(|v| (0.2..=1.0).contains(v)),
            "experiment.t60_values",
            "reverberation times must lie in [0.2, 1.0] s",
        )?;
        check(e.fixed_snr_db.is_finite(), "experiment.fixed_snr_db", "must be finite")?;
        check(
            e.sdnr_db.map_or(true, f64::is_finite),
            "experiment.sdnr_db",
            "must be finite or null",
        )?;
        check(
            e.accuracy_tol.toa >= 0.0 && e.accuracy_tol.doa >= 0.0,
            "experiment.accuracy_tol",
            "tolerances must be non-negative",
        )
    }

    pub fn toa_config(&self) -> FreqDomainConfig {
        FreqDomainConfig {
            dft_len: self
                .estimator
                .dft_len
                .unwrap_or_else(|| dsp::next_pow2(self.probe.total_len)),
            search_min_m: self.estimator.search_min_m,
            search_max_m: self.estimator.search_max_m,
            grid_step: self.estimator.grid_step,
            interval: self.estimator.interval,
            sample_rate: self.geometry.sample_rate,
            speed_of_sound: self.geometry.speed_of_sound,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            toa: self.toa_config(),
            doa: self.doa,
            array_height: self.array_height,
            min_prominence: self.estimator.min_prominence,
        }
    }

    pub fn prober(&self) -> Result<Prober> {
        Prober::new(
            self.room,
            self.geometry,
            self.probe.generate(self.geometry.sample_rate)?,
            self.pipeline(),
        )
    }

    pub fn pose(&self) -> Pose {
        self.pose.unwrap_or(Pose::new(1.5, self.room.dims[1] / 2.0, PI))
    }

    pub fn trajectory(&self) -> Result<Trajectory> {
        let traj = match &self.trajectory {
            TrajectorySpec::WallFollowing { margin, spacing } => {
                Trajectory::wall_following(&self.room, *margin, *spacing)?
            }
            TrajectorySpec::Explicit { poses } => Trajectory {
                poses: poses.clone(),
                probe_interval_s: 0.0,
            },
        };
        traj.validate(&self.room, &self.geometry)?;
        Ok(traj)
    }

    pub fn experiment(&self, variable: SweepVariable) -> ExperimentSpec {
        let e = &self.experiment;
        ExperimentSpec {
            room: self.room,
            geom: self.geometry,
            probe: self.probe,
            pipeline: self.pipeline(),
            baseline: self.baseline,
            pose: self.pose(),
            sweep_variable: variable,
            sweep_values: match variable {
                SweepVariable::SnrDb => e.snr_values.clone(),
                SweepVariable::T60S => e.t60_values.clone(),
            },
            fixed_snr_db: e.fixed_snr_db,
            sdnr_db: e.sdnr_db,
            rotor_rps: self.noise.rotor_rps,
            trials: e.trials,
            seed: self.seed,
            accuracy_tol: e.accuracy_tol,
        }
    }
}
