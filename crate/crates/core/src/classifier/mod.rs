//! RBF support vector classifier separating true wall echoes from spurious
//! estimates.
//!
//! Features are the estimated echo delay and the peak beamformer power (in
//! dB). They are z-scored with training statistics before the kernel is
//! applied.

mod dataset;
mod smo;

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::doa::DoaEstimate;
use crate::error::{Error, Result};
use crate::seed;
use crate::toa::ToaEstimate;

pub use dataset::{generate_dataset, grid_layout, grid_positions, DatasetSpec};

/// Labels closer than this many samples to the true delay count as walls.
pub const LABEL_TOLERANCE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EchoFeature {
    /// Estimated echo delay, samples.
    pub toa_delay: f64,
    /// Peak steered-response power, dB.
    pub beam_power: f64,
}

impl EchoFeature {
    pub fn from_estimates(toa: &ToaEstimate, doa: &DoaEstimate) -> Self {
        Self {
            toa_delay: toa.tau,
            beam_power: 10.0 * doa.power.max(f64::MIN_POSITIVE).log10(),
        }
    }

    fn to_array(self) -> [f64; 2] {
        [self.toa_delay, self.beam_power]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EchoClass {
    Wall,
    NoWall,
}

impl EchoClass {
    /// Numeric label used in dataset files: wall is 0, no wall is 1.
    pub fn code(self) -> u8 {
        match self {
            EchoClass::Wall => 0,
            EchoClass::NoWall => 1,
        }
    }

    fn sign(self) -> f64 {
        match self {
            EchoClass::Wall => 1.0,
            EchoClass::NoWall => -1.0,
        }
    }
}

impl fmt::Display for EchoClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EchoClass::Wall => "wall",
            EchoClass::NoWall => "no_wall",
        })
    }
}

/// Wall when the estimate is strictly within [`LABEL_TOLERANCE`] samples.
pub fn label_for(estimated_tau: f64, true_tau: f64) -> EchoClass {
    if (estimated_tau - true_tau).abs() < LABEL_TOLERANCE {
        EchoClass::Wall
    } else {
        EchoClass::NoWall
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub feature: EchoFeature,
    pub label: EchoClass,
    /// Delay the label was judged against, samples.
    pub true_toa: f64,
}

/// `toa_delay,beam_power,label,true_toa` with the label as 0 (wall) or 1.
pub fn dataset_to_csv(samples: &[LabeledSample]) -> String {
    let mut out = String::from("toa_delay,beam_power,label,true_toa\n");
    for s in samples {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.feature.toa_delay,
            s.feature.beam_power,
            s.label.code(),
            s.true_toa
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: EchoClass,
    pub decision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvmModel {
    /// Normalized feature pairs.
    pub support_vectors: Vec<[f64; 2]>,
    /// `α_i y_i` for each support vector.
    pub dual_coeffs: Vec<f64>,
    pub bias: f64,
    /// `γ` in `exp(−γ‖u − v‖²)`.
    pub rbf_width: f64,
    pub box_c: f64,
    pub feat_mean: [f64; 2],
    pub feat_std: [f64; 2],
}

fn rbf(a: &[f64; 2], b: &[f64; 2], gamma: f64) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    (-gamma * (d0 * d0 + d1 * d1)).exp()
}

impl SvmModel {
    pub fn normalize(&self, f: &EchoFeature) -> [f64; 2] {
        let x = f.to_array();
        [
            (x[0] - self.feat_mean[0]) / self.feat_std[0],
            (x[1] - self.feat_mean[1]) / self.feat_std[1],
        ]
    }

    fn decision_normalized(&self, z: &[f64; 2]) -> f64 {
        self.support_vectors
            .iter()
            .zip(&self.dual_coeffs)
            .map(|(sv, a)| a * rbf(sv, z, self.rbf_width))
            .sum::<f64>()
            + self.bias
    }

    pub fn decision_value(&self, f: &EchoFeature) -> f64 {
        self.decision_normalized(&self.normalize(f))
    }

    /// Non-negative decision values are walls.
    pub fn predict(&self, f: &EchoFeature) -> Prediction {
        let decision = self.decision_value(f);
        Prediction {
            class: if decision >= 0.0 { EchoClass::Wall } else { EchoClass::NoWall },
            decision,
        }
    }

    /// Bound on the decision function's Lipschitz constant in normalized
    /// feature space.
    pub fn lipschitz_bound(&self) -> f64 {
        let sigma = 1.0 / self.rbf_width.sqrt();
        self.dual_coeffs.iter().map(|a| a.abs()).sum::<f64>() * (2.0 / std::f64::consts::E).sqrt() / sigma
    }

    pub fn validate(&self) -> Result<()> {
        if self.support_vectors.len() != self.dual_coeffs.len() {
            return Err(Error::invalid("dual_coeffs", "length differs from support_vectors"));
        }
        if !(self.rbf_width > 0.0 && self.rbf_width.is_finite()) {
            return Err(Error::invalid("rbf_width", "must be positive"));
        }
        if !(self.box_c > 0.0 && self.box_c.is_finite()) {
            return Err(Error::invalid("box_c", "must be positive"));
        }
        if self.feat_std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("feat_std", "must be positive"));
        }
        if self.dual_coeffs.iter().any(|a| !a.is_finite() || a.abs() > self.box_c * (1.0 + 1e-9)) {
            return Err(Error::invalid("dual_coeffs", "must lie within ±box_c"));
        }
        if !self.bias.is_finite() {
            return Err(Error::invalid("bias", "must be finite"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }
}

pub fn predict(model: &SvmModel, feature: &EchoFeature) -> Prediction {
    model.predict(feature)
}

/// Fraction of samples whose predicted class matches the label.
pub fn accuracy(model: &SvmModel, samples: &[LabeledSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples
        .iter()
        .filter(|s| model.predict(&s.feature).class == s.label)
        .count();
    hits as f64 / samples.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    /// Stopping tolerance on the maximal KKT violation.
    pub tol: f64,
    pub max_iter: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_iter: None,
        }
    }
}

/// Per-feature mean and population standard deviation; constant features
/// get a unit scale.
fn feature_stats(samples: &[LabeledSample]) -> ([f64; 2], [f64; 2]) {
    let n = samples.len() as f64;
    let mut mean = [0.0; 2];
    for s in samples {
        let x = s.feature.to_array();
        mean[0] += x[0] / n;
        mean[1] += x[1] / n;
    }
    let mut var = [0.0; 2];
    for s in samples {
        let x = s.feature.to_array();
        var[0] += (x[0] - mean[0]).powi(2) / n;
        var[1] += (x[1] - mean[1]).powi(2) / n;
    }
    let mut std = [1.0; 2];
    for i in 0..2 {
        let s = var[i].sqrt();
        if s > 1e-12 * mean[i].abs().max(1.0) {
            std[i] = s;
        }
    }
    (mean, std)
}

pub fn train_svm(train: &[LabeledSample], box_c: f64, rbf_width: f64) -> Result<SvmModel> {
    train_svm_with(train, box_c, rbf_width, &TrainOptions::default())
}

pub fn train_svm_with(train: &[LabeledSample], box_c: f64, rbf_width: f64, opts: &TrainOptions) -> Result<SvmModel> {
    if !(box_c > 0.0 && box_c.is_finite()) {
        return Err(Error::invalid("box_c", "must be positive"));
    }
    if !(rbf_width > 0.0 && rbf_width.is_finite()) {
        return Err(Error::invalid("rbf_width", "must be positive"));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::invalid("tol", "must be positive"));
    }
    if train.iter().any(|s| !s.feature.toa_delay.is_finite() || !s.feature.beam_power.is_finite()) {
        return Err(Error::invalid("feature", "training features must be finite"));
    }
    let has = |c: EchoClass| train.iter().any(|s| s.label == c);
    if !has(EchoClass::Wall) || !has(EchoClass::NoWall) {
        return Err(Error::SingleClass);
    }

    let (feat_mean, feat_std) = feature_stats(train);
    let z: Vec<[f64; 2]> = train
        .iter()
        .map(|s| {
            let x = s.feature.to_array();
            [(x[0] - feat_mean[0]) / feat_std[0], (x[1] - feat_mean[1]) / feat_std[1]]
        })
        .collect();
    let y: Vec<f64> = train.iter().map(|s| s.label.sign()).collect();
    let k = smo::KernelMatrix::from_fn(z.len(), |i, j| rbf(&z[i], &z[j], rbf_width));
    let max_iter = opts.max_iter.unwrap_or_else(|| (100 * z.len()).max(10_000_000));
    let sol = smo::solve(&k, &y, box_c, opts.tol, max_iter);

    let mut support_vectors = Vec::new();
    let mut dual_coeffs = Vec::new();
    for (i, a) in sol.alpha.iter().enumerate() {
        if *a > 0.0 {
            support_vectors.push(z[i]);
            dual_coeffs.push(a * y[i]);
        }
    }
    Ok(SvmModel {
        support_vectors,
        dual_coeffs,
        bias: -sol.rho,
        rbf_width,
        box_c,
        feat_mean,
        feat_std,
    })
}

/// Seeded shuffle, then the first `round(ratio·n)` samples train.
pub fn split_dataset(samples: &[LabeledSample], ratio: f64, seed: u64) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    if samples.is_empty() {
        return Err(Error::invalid("samples", "dataset is empty"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("split_ratio", "must lie in (0, 1)"));
    }
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut seed::rng(seed));
    let n_train = (ratio * samples.len() as f64).round() as usize;
    let train = idx[..n_train].iter().map(|&i| samples[i]).collect();
    let test = idx[n_train..].iter().map(|&i| samples[i]).collect();
    Ok((train, test))
}

/// Fold index for every sample: each class is dealt round-robin in input
/// order, so folds differ in size by at most one per class.
pub fn stratified_folds(samples: &[LabeledSample], folds: usize) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::invalid("folds", "need at least 2 folds"));
    }
    for class in [EchoClass::Wall, EchoClass::NoWall] {
        let count = samples.iter().filter(|s| s.label == class).count();
        if count < folds {
            return Err(Error::invalid(
                "folds",
                format!("{folds} folds exceed the {count} samples of class {class}"),
            ));
        }
    }
    let mut next = [0usize; 2];
    Ok(samples
        .iter()
        .map(|s| {
            let c = s.label.code() as usize;
            let f = next[c] % folds;
            next[c] += 1;
            f
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub box_c: f64,
    pub rbf_width: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub best_c: f64,
    pub best_width: f64,
    pub cv_accuracy: f64,
    pub folds: usize,
    pub cells: Vec<CvCell>,
}

/// Stratified k-fold grid search. Ties go to the smaller C, then the
/// smaller width.
pub fn cross_validate(train: &[LabeledSample], c_grid: &[f64], width_grid: &[f64], folds: usize) -> Result<CvReport> {
    if c_grid.is_empty() {
        return Err(Error::invalid("c_grid", "must not be empty"));
    }
    if width_grid.is_empty() {
        return Err(Error::invalid("width_grid", "must not be empty"));
    }
    let assignment = stratified_folds(train, folds)?;
    let mut pairs: Vec<(f64, f64)> = c_grid
        .iter()
        .flat_map(|&c| width_grid.iter().map(move |&w| (c, w)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let jobs: Vec<(usize, usize)> = (0..pairs.len()).flat_map(|p| (0..folds).map(move |f| (p, f))).collect();
    let hits = jobs
        .par_iter()
        .map(|&(p, f)| {
            let (c, w) = pairs[p];
            let fit: Vec<LabeledSample> = train
                .iter()
                .zip(&assignment)
                .filter(|(_, a)| **a != f)
                .map(|(s, _)| *s)
                .collect();
            let held: Vec<LabeledSample> = train
                .iter()
                .zip(&assignment)
                .filter(|(_, a)| **a == f)
                .map(|(s, _)| *s)
                .collect();
            let model = train_svm(&fit, c, w)?;
            Ok(held.iter().filter(|s| model.predict(&s.feature).class == s.label).count())
        })
        .collect::<Result<Vec<usize>>>()?;

    let cells: Vec<CvCell> = pairs
        .iter()
        .enumerate()
        .map(|(p, &(c, w))| CvCell {
            box_c: c,
            rbf_width: w,
            accuracy: hits[p * folds..(p + 1) * folds].iter().sum::<usize>() as f64 / train.len() as f64,
        })
        .collect();
    let best = cells
        .iter()
        .fold(None, |acc: Option<&CvCell>, cell| match acc {
            Some(b) if cell.accuracy <= b.accuracy => Some(b),
            _ => Some(cell),
        })
        .expect("non-empty grid");
    Ok(CvReport {
        best_c: best.box_c,
        best_width: best.rbf_width,
        cv_accuracy: best.accuracy,
        folds,
        cells,
    })
}
