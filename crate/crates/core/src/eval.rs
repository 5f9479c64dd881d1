//! Monte-Carlo accuracy sweeps over SNR or reverberation time, and method
//! timing.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{estimate_rir_dual_channel, peak_pick, BaselineConfig};
use crate::error::{Error, Result};
use crate::geometry::{ArrayGeometry, Pose, ProbeSpec};
use crate::mapper::{doa_matches, toa_matches, PipelineConfig, Prober};
use crate::room::{NoiseModel, RoomSpec};
use crate::seed;
use crate::toa::{estimate_toa, spectrum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    SnrDb,
    T60S,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::SnrDb => "snr_db",
            SweepVariable::T60S => "t60_s",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracyTol {
    /// Delay tolerance, samples.
    pub toa: f64,
    /// Direction tolerance, azimuth grid steps.
    pub doa: f64,
}

impl Default for AccuracyTol {
    fn default() -> Self {
        Self { toa: 5.0, doa: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub room: RoomSpec,
    pub geom: ArrayGeometry,
    pub probe: ProbeSpec,
    pub pipeline: PipelineConfig,
    pub baseline: BaselineConfig,
    pub pose: Pose,
    pub sweep_variable: SweepVariable,
    pub sweep_values: Vec<f64>,
    /// White-noise SNR while reverberation time is swept, dB.
    pub fixed_snr_db: f64,
    pub sdnr_db: Option<f64>,
    pub rotor_rps: f64,
    pub trials: usize,
    pub seed: u64,
    pub accuracy_tol: AccuracyTol,
}

impl ExperimentSpec {
    /// 10×8×5 m room at T60 0.6 s, array 1.5 m from the x = 0 wall and at
    /// least 2.5 m from every other surface, SDNR 40 dB, 50 trials.
    pub fn standard(variable: SweepVariable, values: Vec<f64>) -> Self {
        let geom = ArrayGeometry::default();
        let probe = ProbeSpec::default();
        Self {
            room: RoomSpec::new([10.0, 8.0, 5.0], 0.6),
            geom,
            probe,
            pipeline: PipelineConfig::for_observation(probe.total_len, &geom),
            baseline: BaselineConfig::default(),
            pose: Pose::new(1.5, 4.0, std::f64::consts::PI),
            sweep_variable: variable,
            sweep_values: values,
            fixed_snr_db: 10.0,
            sdnr_db: Some(40.0),
            rotor_rps: NoiseModel::noiseless().rotor_rps,
            trials: 50,
            seed: 0,
            accuracy_tol: AccuracyTol::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::invalid("trials", "need at least one trial"));
        }
        if self.sweep_values.is_empty() {
            return Err(Error::invalid("sweep_values", "must not be empty"));
        }
        if self.sweep_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sweep_values", "must be finite"));
        }
        if self.sweep_variable == SweepVariable::T60S && self.sweep_values.iter().any(|v| !(0.2..=1.0).contains(v)) {
            return Err(Error::invalid("sweep_values", "reverberation times must lie in [0.2, 1.0] s"));
        }
        if !self.fixed_snr_db.is_finite() {
            return Err(Error::invalid("fixed_snr_db", "must be finite"));
        }
        if !(self.accuracy_tol.toa >= 0.0 && self.accuracy_tol.doa >= 0.0) {
            return Err(Error::invalid("accuracy_tol", "tolerances must be non-negative"));
        }
        Ok(())
    }

    fn prober(&self) -> Result<Prober> {
        Prober::new(
            self.room,
            self.geom,
            self.probe.generate(self.geom.sample_rate)?,
            self.pipeline,
        )
    }

    fn noise(&self, value: f64, trial: usize) -> NoiseModel {
        NoiseModel {
            snr_db: Some(match self.sweep_variable {
                SweepVariable::SnrDb => value,
                SweepVariable::T60S => self.fixed_snr_db,
            }),
            sdnr_db: self.sdnr_db,
            rotor_rps: self.rotor_rps,
            seed: seed::trial_seed(self.seed, value, trial),
        }
    }
}

/// Scored estimates of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub sweep_value: f64,
    pub trial: usize,
    pub seed: u64,
    pub snls_tau: f64,
    pub snls_correct: bool,
    pub baseline_tau: f64,
    pub baseline_correct: bool,
    pub doa_azimuth: f64,
    pub doa_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodCurve {
    pub method: String,
    pub correct: Vec<usize>,
    pub accuracy: Vec<f64>,
    /// Binomial standard error of each accuracy.
    pub std_err: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
    pub trials: usize,
    pub methods: Vec<MethodCurve>,
}

impl AccuracyCurve {
    pub fn method(&self, name: &str) -> Option<&MethodCurve> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// `variable,value,method,correct,trials,accuracy,std_err` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable,value,method,correct,trials,accuracy,std_err\n");
        for m in &self.methods {
            for (i, v) in self.values.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    self.variable.name(),
                    v,
                    m.method,
                    m.correct[i],
                    self.trials,
                    m.accuracy[i],
                    m.std_err[i]
                ));
            }
        }
        out
    }
}

pub const SNLS_TOA: &str = "snls_toa";
pub const BASELINE_TOA: &str = "baseline_toa";
pub const SRP_DOA: &str = "srp_doa";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub curve: AccuracyCurve,
    pub outcomes: Vec<TrialOutcome>,
}

impl SweepResult {
    pub fn outcomes_csv(&self) -> String {
        let mut out = String::from(
            "sweep_value,trial,seed,snls_tau,snls_correct,baseline_tau,baseline_correct,doa_azimuth,doa_correct\n",
        );
        for o in &self.outcomes {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                o.sweep_value,
                o.trial,
                o.seed,
                o.snls_tau,
                o.snls_correct as u8,
                o.baseline_tau,
                o.baseline_correct as u8,
                o.doa_azimuth,
                o.doa_correct as u8
            ));
        }
        out
    }
}

pub fn binomial_std_err(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Runs every (value, trial) cell. Truth comes from mirror geometry at the
/// reference microphone; delays count within `accuracy_tol.toa` samples of
/// any first-order echo, directions within `accuracy_tol.doa` grid steps of
/// any vertical wall.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<SweepResult> {
    spec.validate()?;
    let base = spec.prober()?;
    let fs = spec.geom.sample_rate;
    let doa_tol = spec.accuracy_tol.doa * spec.pipeline.doa.grid.azimuth_step;
    let mut outcomes = Vec::with_capacity(spec.sweep_values.len() * spec.trials);
    for &value in &spec.sweep_values {
        let prober = match spec.sweep_variable {
            SweepVariable::SnrDb => None,
            SweepVariable::T60S => Some(base.with_room(RoomSpec { t60: value, ..spec.room })?),
        };
        let prober = prober.as_ref().unwrap_or(&base);
        let rirs = prober.rirs(&spec.pose)?;
        let truth = prober.truth(&spec.pose)?;
        let cell = (0..spec.trials)
            .into_par_iter()
            .map(|trial| {
                let noise = spec.noise(value, trial);
                let rec = prober.observe_with(&rirs, &noise)?;
                let est = prober.estimate(&rec)?;
                let rir = estimate_rir_dual_channel(
                    &rec.channels[spec.geom.reference_index],
                    prober.probe(),
                    fs,
                    &spec.baseline,
                )?;
                let base = peak_pick(&rir, &spec.pipeline.toa)?;
                Ok(TrialOutcome {
                    sweep_value: value,
                    trial,
                    seed: noise.seed,
                    snls_tau: est.toa.tau,
                    snls_correct: toa_matches(&truth, est.toa.tau, spec.accuracy_tol.toa),
                    baseline_tau: base.tau,
                    baseline_correct: toa_matches(&truth, base.tau, spec.accuracy_tol.toa),
                    doa_azimuth: est.doa.azimuth,
                    doa_correct: doa_matches(&truth, est.doa.azimuth, doa_tol),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        outcomes.extend(cell);
    }
    let curve = tally(spec, &outcomes);
    Ok(SweepResult { curve, outcomes })
}

fn tally(spec: &ExperimentSpec, outcomes: &[TrialOutcome]) -> AccuracyCurve {
    let methods: [(&str, fn(&TrialOutcome) -> bool); 3] = [
        (SNLS_TOA, |o| o.snls_correct),
        (BASELINE_TOA, |o| o.baseline_correct),
        (SRP_DOA, |o| o.doa_correct),
    ];
    let methods = methods
        .iter()
        .map(|(name, hit)| {
            let correct: Vec<usize> = outcomes
                .chunks(spec.trials)
                .map(|cell| cell.iter().filter(|o| hit(o)).count())
                .collect();
            let accuracy: Vec<f64> = correct.iter().map(|&c| c as f64 / spec.trials as f64).collect();
            MethodCurve {
                method: name.to_string(),
                std_err: accuracy.iter().map(|&p| binomial_std_err(p, spec.trials)).collect(),
                correct,
                accuracy,
            }
        })
        .collect();
    AccuracyCurve {
        variable: spec.sweep_variable,
        values: spec.sweep_values.clone(),
        trials: spec.trials,
        methods,
    }
}

pub fn run_snr_sweep(spec: &ExperimentSpec) -> Result<SweepResult> {
    if spec.sweep_variable != SweepVariable::SnrDb {
        return Err(Error::invalid("sweep_variable", "expected snr_db"));
    }
    run_sweep(spec)
}

pub fn run_t60_sweep(spec: &ExperimentSpec) -> Result<SweepResult> {
    if spec.sweep_variable != SweepVariable::T60S {
        return Err(Error::invalid("sweep_variable", "expected t60_s"));
    }
    run_sweep(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub machine: String,
    pub trials: usize,
    pub snls_mean_s: f64,
    pub baseline_mean_s: f64,
}

pub fn machine_descriptor() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{}-{}, {} hardware threads, {} worker threads",
        std::env::consts::ARCH,
        std::env::consts::OS,
        threads,
        rayon::current_num_threads()
    )
}

/// Mean wall-clock delay-estimation time per observation for each method,
/// on observations rendered at the first sweep value. Rendering is not
/// timed; each method starts from the time-domain reference channel.
pub fn time_methods(spec: &ExperimentSpec) -> Result<TimingReport> {
    spec.validate()?;
    let value = spec.sweep_values[0];
    let prober = match spec.sweep_variable {
        SweepVariable::SnrDb => spec.prober()?,
        SweepVariable::T60S => spec.prober()?.with_room(RoomSpec { t60: value, ..spec.room })?,
    };
    let rirs = prober.rirs(&spec.pose)?;
    let probe_spec = spectrum(&prober.probe().samples, &spec.pipeline.toa);
    let mut snls = 0.0;
    let mut base = 0.0;
    for trial in 0..spec.trials {
        let rec = prober.observe_with(&rirs, &spec.noise(value, trial))?;
        let ch = &rec.channels[spec.geom.reference_index];
        let t = Instant::now();
        let obs = spectrum(ch, &spec.pipeline.toa);
        std::hint::black_box(estimate_toa(&obs, &probe_spec, &spec.pipeline.toa)?);
        snls += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let rir = estimate_rir_dual_channel(ch, prober.probe(), spec.geom.sample_rate, &spec.baseline)?;
        std::hint::black_box(peak_pick(&rir, &spec.pipeline.toa)?);
        base += t.elapsed().as_secs_f64();
    }
    Ok(TimingReport {
        machine: machine_descriptor(),
        trials: spec.trials,
        snls_mean_s: snls / spec.trials as f64,
        baseline_mean_s: base / spec.trials as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variable: SweepVariable, values: Vec<f64>, trials: usize) -> ExperimentSpec {
        ExperimentSpec {
            trials,
            seed: 5,
            ..ExperimentSpec::standard(variable, values)
        }
    }

    #[test]
    fn single_trial_gives_binary_fractions() {
        let r = run_snr_sweep(&small(SweepVariable::SnrDb, vec![20.0], 1)).unwrap();
        for m in &r.curve.methods {
            assert!(m.accuracy[0] == 0.0 || m.accuracy[0] == 1.0);
        }
        assert_eq!(r.outcomes.len(), 1);
    }

    #[test]
    fn high_snr_cell_is_accurate_and_reproducible() {
        let spec = small(SweepVariable::SnrDb, vec![40.0], 4);
        let a = run_snr_sweep(&spec).unwrap();
        assert_eq!(a.curve.method(SNLS_TOA).unwrap().accuracy[0], 1.0);
        assert_eq!(a.curve.method(SRP_DOA).unwrap().accuracy[0], 1.0);
        let b = run_snr_sweep(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.outcomes_csv(), b.outcomes_csv());
    }

    #[test]
    fn t60_sweep_changes_the_responses() {
        let spec = small(SweepVariable::T60S, vec![0.3], 1);
        let p = spec.prober().unwrap();
        let a = p.with_room(RoomSpec { t60: 0.3, ..spec.room }).unwrap().rirs(&spec.pose).unwrap();
        let b = p.with_room(RoomSpec { t60: 0.9, ..spec.room }).unwrap().rirs(&spec.pose).unwrap();
        assert_ne!(a.responses, b.responses);
        let r = run_t60_sweep(&spec).unwrap();
        assert_eq!(r.curve.values, vec![0.3]);
        assert_eq!(r.curve.methods[0].accuracy.len(), 1);
    }

    #[test]
    fn sweeps_check_their_variable_and_values() {
        assert!(run_t60_sweep(&small(SweepVariable::SnrDb, vec![10.0], 1)).is_err());
        assert!(run_snr_sweep(&small(SweepVariable::T60S, vec![0.5], 1)).is_err());
        assert!(run_sweep(&small(SweepVariable::T60S, vec![1.5], 1)).is_err());
        assert!(run_sweep(&small(SweepVariable::SnrDb, vec![], 1)).is_err());
        assert!(run_sweep(&small(SweepVariable::SnrDb, vec![0.0], 0)).is_err());
    }

    #[test]
    fn curve_csv_layout() {
        let c = AccuracyCurve {
            variable: SweepVariable::SnrDb,
            values: vec![-10.0, 0.0],
            trials: 4,
            methods: vec![MethodCurve {
                method: SNLS_TOA.into(),
                correct: vec![1, 4],
                accuracy: vec![0.25, 1.0],
                std_err: vec![binomial_std_err(0.25, 4), 0.0],
            }],
        };
        let csv = c.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "variable,value,method,correct,trials,accuracy,std_err");
        assert!(lines[1].starts_with("snr_db,-10,snls_toa,1,4,0.25,0.2165"));
        assert_eq!(lines[2], "snr_db,0,snls_toa,4,4,1,0");
    }

    #[test]
    fn timing_reports_both_methods() {
        let t = time_methods(&small(SweepVariable::SnrDb, vec![10.0], 2)).unwrap();
        assert_eq!(t.trials, 2);
        assert!(t.snls_mean_s > 0.0 && t.baseline_mean_s > 0.0);
        assert!(!t.machine.is_empty());
    }
}
