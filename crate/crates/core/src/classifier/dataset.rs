//! Labeled feature sets from probes on a regular grid of array positions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{label_for, LabeledSample};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::mapper::{Level, NoisePlan, Prober};
use crate::room::RoomSpec;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub grid_points: usize,
    /// Clearance between the grid and the walls, meters.
    pub margin: f64,
    #[serde(default)]
    pub heading: f64,
    pub noise: NoisePlan,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            grid_points: 1989,
            margin: 0.3,
            heading: 0.0,
            noise: NoisePlan {
                snr_db: Some(Level::Uniform([-40.0, 40.0])),
                ..NoisePlan::default()
            },
        }
    }
}

/// Columns and rows for `n` points: the factor pair whose ratio is closest
/// to the room's floor aspect ratio.
pub fn grid_layout(room: &RoomSpec, n: usize) -> Result<(usize, usize)> {
    if n == 0 {
        return Err(Error::invalid("grid_points", "must be positive"));
    }
    let aspect = (room.dims[0] / room.dims[1]).ln();
    (1..=n)
        .filter(|a| n % a == 0)
        .map(|a| (a, n / a))
        .min_by(|p, q| {
            let dp = ((p.0 as f64 / p.1 as f64).ln() - aspect).abs();
            let dq = ((q.0 as f64 / q.1 as f64).ln() - aspect).abs();
            dp.total_cmp(&dq)
        })
        .ok_or_else(|| Error::invalid("grid_points", "no layout"))
}

fn axis(count: usize, lo: f64, hi: f64) -> Vec<f64> {
    if count == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect()
}

/// Row-major grid over the floor plan, inset by `margin`.
pub fn grid_positions(room: &RoomSpec, n: usize, margin: f64) -> Result<Vec<[f64; 2]>> {
    let (nx, ny) = grid_layout(room, n)?;
    if !(margin > 0.0 && 2.0 * margin < room.dims[0] && 2.0 * margin < room.dims[1]) {
        return Err(Error::invalid("margin", "grid does not fit inside the room"));
    }
    let xs = axis(nx, margin, room.dims[0] - margin);
    let ys = axis(ny, margin, room.dims[1] - margin);
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| [x, y])).collect())
}

/// One labeled sample per grid point. Each point gets its own noise draw
/// from `derive([seed, index])`. The label compares the estimate with the
/// nearest first-order echo delay.
pub fn generate_dataset(prober: &Prober, spec: &DatasetSpec, seed: u64) -> Result<Vec<LabeledSample>> {
    let geom = prober.geometry();
    if spec.margin < geom.radius {
        return Err(Error::invalid("margin", "must be at least the array radius"));
    }
    spec.noise.validate()?;
    let grid = grid_positions(prober.room(), spec.grid_points, spec.margin)?;
    grid.par_iter()
        .enumerate()
        .map(|(i, &[x, y])| {
            let pose = Pose::new(x, y, spec.heading);
            let noise = spec.noise.draw(seed::derive(&[seed, i as u64]));
            let est = prober.probe_at_pose(&pose, &noise)?;
            let true_toa = prober
                .truth(&pose)?
                .iter()
                .map(|e| e.tau)
                .min_by(|a, b| (a - est.toa.tau).abs().total_cmp(&(b - est.toa.tau).abs()))
                .expect("six walls");
            Ok(LabeledSample {
                feature: est.feature,
                label: label_for(est.toa.tau, true_toa),
                true_toa,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_probe, ArrayGeometry};
    use crate::mapper::PipelineConfig;

    #[test]
    fn layout_follows_the_room_aspect() {
        let room = RoomSpec::new([10.0, 8.0, 7.0], 0.6);
        assert_eq!(grid_layout(&room, 1989).unwrap(), (51, 39));
        assert_eq!(grid_layout(&room, 12).unwrap(), (4, 3));
        assert_eq!(grid_layout(&room, 7).unwrap(), (7, 1));
        let pts = grid_positions(&room, 1989, 0.3).unwrap();
        assert_eq!(pts.len(), 1989);
        assert_eq!(pts[0], [0.3, 0.3]);
        assert!((pts[1988][0] - 9.7).abs() < 1e-12 && (pts[1988][1] - 7.7).abs() < 1e-12);
        assert!(grid_positions(&room, 10, 5.0).is_err());
    }

    #[test]
    fn small_grid_is_labeled_against_geometry() {
        let room = RoomSpec::new([8.0, 6.0, 5.0], 0.4);
        let geom = ArrayGeometry::default();
        let probe = generate_probe(1500, 20_000, 22_050.0, 1).unwrap();
        let pr = Prober::new(room, geom, probe, PipelineConfig::for_observation(20_000, &geom)).unwrap();
        let spec = DatasetSpec {
            grid_points: 6,
            margin: 1.5,
            heading: 0.0,
            noise: NoisePlan {
                snr_db: Some(Level::Fixed(30.0)),
                ..NoisePlan::default()
            },
        };
        let d = generate_dataset(&pr, &spec, 3).unwrap();
        assert_eq!(d.len(), 6);
        // every point is 1.5 m from at least one wall
        assert!(d.iter().filter(|s| s.label == super::super::EchoClass::Wall).count() >= 4);
        assert_eq!(d, generate_dataset(&pr, &spec, 3).unwrap());
        let tight = DatasetSpec { margin: 0.1, ..spec };
        assert!(generate_dataset(&pr, &tight, 3).is_err());
    }
}
