//! Recording files and plot rendering.
//!
//! Recordings are stored either as 32-bit float WAV or as raw interleaved
//! little-endian float32 with a JSON sidecar (`<name>.json`) giving the
//! channel count and sample rate.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::AccuracyCurve;
use crate::mapper::SpatialMap;
use crate::room::MultichannelRecording;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSidecar {
    pub channels: usize,
    pub sample_rate: f64,
    pub frames: usize,
    pub format: RawFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawFormat {
    F32Le,
}

fn wav_rate(sample_rate: f64) -> Result<u32> {
    if sample_rate.fract() != 0.0 || !(1.0..=u32::MAX as f64).contains(&sample_rate) {
        return Err(Error::invalid("sample_rate", "WAV needs an integer rate in Hz"));
    }
    Ok(sample_rate as u32)
}

pub fn write_wav(path: &Path, rec: &MultichannelRecording) -> Result<()> {
    let channels = u16::try_from(rec.mic_count()).map_err(|_| Error::invalid("channels", "too many for WAV"))?;
    let spec = hound::WavSpec {
        channels,
        sample_rate: wav_rate(rec.sample_rate)?,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for i in 0..rec.len() {
        for ch in &rec.channels {
            w.write_sample(ch[i] as f32)?;
        }
    }
    w.finalize()?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<MultichannelRecording> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    let n = spec.channels as usize;
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => r.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>()?,
        (hound::SampleFormat::Int, bits @ 1..=32) => {
            let scale = 2f64.powi(bits as i32 - 1);
            r.samples::<i32>().map(|s| s.map(|v| v as f64 / scale)).collect::<Result<_, _>>()?
        }
        _ => return Err(Error::invalid("recording", "unsupported WAV sample format")),
    };
    MultichannelRecording::new(deinterleave(&samples, n), spec.sample_rate as f64)
}

fn deinterleave(samples: &[f64], n: usize) -> Vec<Vec<f64>> {
    let frames = samples.len() / n.max(1);
    (0..n).map(|c| (0..frames).map(|i| samples[i * n + c]).collect()).collect()
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the samples to `path` and the sidecar next to it.
pub fn write_raw(path: &Path, rec: &MultichannelRecording) -> Result<()> {
    let mut bytes = Vec::with_capacity(rec.len() * rec.mic_count() * 4);
    for i in 0..rec.len() {
        for ch in &rec.channels {
            bytes.extend_from_slice(&(ch[i] as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    let sidecar = RawSidecar {
        channels: rec.mic_count(),
        sample_rate: rec.sample_rate,
        frames: rec.len(),
        format: RawFormat::F32Le,
    };
    write_json(&sidecar_path(path), &sidecar)
}

pub fn read_raw(path: &Path) -> Result<MultichannelRecording> {
    let sidecar: RawSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let bytes = fs::read(path)?;
    if sidecar.channels == 0 || bytes.len() != sidecar.channels * sidecar.frames * 4 {
        return Err(Error::invalid(
            "recording",
            format!(
                "{} bytes do not hold {} frames of {} float32 channels",
                bytes.len(),
                sidecar.frames,
                sidecar.channels
            ),
        ));
    }
    let samples: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    MultichannelRecording::new(deinterleave(&samples, sidecar.channels), sidecar.sample_rate)
}

/// Dispatches on the extension: `.wav`, otherwise raw float32.
pub fn read_recording(path: &Path) -> Result<MultichannelRecording> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("wav") => read_wav(path),
        _ => read_raw(path),
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const PAD: f64 = 50.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn f(v: f64) -> String {
    format!("{v:.2}")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let widen = |a: f64, b: f64| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        let (x0, x1) = widen(x0, x1);
        let (y0, y1) = widen(y0, y1);
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - PAD - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * PAD)
    }

    fn axes(&self, out: &mut String, xlabel: &str, ylabel: &str) {
        let (l, r, t, b) = (PAD, WIDTH - PAD, PAD, HEIGHT - PAD);
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            f(l),
            f(t),
            f(r - l),
            f(b - t)
        );
        for i in 0..=4 {
            let x = self.x0 + (self.x1 - self.x0) * i as f64 / 4.0;
            let y = self.y0 + (self.y1 - self.y0) * i as f64 / 4.0;
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{}</text>"#,
                f(self.px(x)),
                f(b + 16.0),
                f(x)
            );
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#,
                f(l - 4.0),
                f(self.py(y) + 4.0),
                f(y)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{xlabel}</text>"#,
            f(WIDTH / 2.0),
            f(HEIGHT - 10.0)
        );
        let _ = writeln!(
            out,
            r#"<text x="14" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">{ylabel}</text>"#,
            f(HEIGHT / 2.0),
            f(HEIGHT / 2.0)
        );
    }
}

fn svg_open() -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// Floor plan with the room outline, poses, accepted points (filled) and
/// rejected points (hollow).
pub fn map_svg(map: &SpatialMap) -> String {
    let [l, w, _] = map.room.dims;
    let mut xs = vec![0.0, l];
    let mut ys = vec![0.0, w];
    for p in &map.points {
        xs.push(p.x);
        ys.push(p.y);
    }
    let lo = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // equal scale on both axes
    let aspect = (WIDTH - 2.0 * PAD) / (HEIGHT - 2.0 * PAD);
    let span = (hi(&xs) - lo(&xs)).max((hi(&ys) - lo(&ys)) * aspect);
    let fr = Frame::new(
        lo(&xs),
        lo(&xs) + span,
        lo(&ys),
        lo(&ys) + span / aspect,
    );
    let mut out = svg_open();
    fr.axes(&mut out, "x (m)", "y (m)");
    let _ = writeln!(
        out,
        r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="gray" stroke-width="2"/>"#,
        f(fr.px(0.0)),
        f(fr.py(w)),
        f(fr.px(l) - fr.px(0.0)),
        f(fr.py(0.0) - fr.py(w))
    );
    for p in &map.poses {
        let _ = writeln!(
            out,
            r#"<circle cx="{}" cy="{}" r="2" fill="gray"/>"#,
            f(fr.px(p.x)),
            f(fr.py(p.y))
        );
    }
    for p in &map.points {
        let fill = if p.accepted { COLORS[0] } else { "none" };
        let _ = writeln!(
            out,
            r#"<circle cx="{}" cy="{}" r="4" fill="{fill}" stroke="{}"/>"#,
            f(fr.px(p.x)),
            f(fr.py(p.y)),
            COLORS[0]
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Accuracy against the swept variable, one polyline per method.
pub fn curve_svg(curve: &AccuracyCurve) -> String {
    let x0 = curve.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let x1 = curve.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let fr = Frame::new(x0, x1, 0.0, 1.0);
    let mut out = svg_open();
    fr.axes(&mut out, curve.variable.name(), "accuracy");
    for (k, m) in curve.methods.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = curve
            .values
            .iter()
            .zip(&m.accuracy)
            .map(|(&x, &y)| format!("{},{}", f(fr.px(x)), f(fr.py(y))))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{}</text>"#,
            f(PAD + 10.0),
            f(PAD + 16.0 * (k + 1) as f64),
            m.method
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{MethodCurve, SweepVariable};
    use crate::geometry::Pose;
    use crate::mapper::ReflectorPoint;
    use crate::room::RoomSpec;

    fn rec() -> MultichannelRecording {
        let ch = |k: f64| (0..50).map(|i| ((i as f64 * 0.3 + k).sin() * 0.5) as f32 as f64).collect();
        MultichannelRecording::new(vec![ch(0.0), ch(1.0), ch(2.0)], 22_050.0).unwrap()
    }

    #[test]
    fn wav_round_trip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        write_wav(&p, &rec()).unwrap();
        assert_eq!(read_recording(&p).unwrap(), rec());
    }

    #[test]
    fn raw_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.f32");
        write_raw(&p, &rec()).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 3 * 50 * 4);
        assert_eq!(read_recording(&p).unwrap(), rec());
        fs::write(&p, [0u8; 7]).unwrap();
        assert!(read_recording(&p).is_err());
    }

    #[test]
    fn fractional_rate_cannot_be_wav() {
        let dir = tempfile::tempdir().unwrap();
        let r = MultichannelRecording::new(vec![vec![0.0; 4]], 8000.5).unwrap();
        assert!(write_wav(&dir.path().join("x.wav"), &r).is_err());
    }

    #[test]
    fn plots_are_well_formed() {
        let curve = AccuracyCurve {
            variable: SweepVariable::SnrDb,
            values: vec![-10.0, 0.0, 10.0],
            trials: 2,
            methods: vec![MethodCurve {
                method: "snls_toa".into(),
                correct: vec![1, 2, 2],
                accuracy: vec![0.5, 1.0, 1.0],
                std_err: vec![0.35, 0.0, 0.0],
            }],
        };
        let s = curve_svg(&curve);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<polyline").count(), 1);
        let map = SpatialMap {
            points: vec![ReflectorPoint {
                x: 0.1,
                y: 2.0,
                source_pose: 0,
                accepted: false,
                feature: crate::classifier::EchoFeature {
                    toa_delay: 0.0,
                    beam_power: 0.0,
                },
            }],
            poses: vec![Pose::new(1.5, 2.0, 0.0)],
            room: RoomSpec::new([8.0, 6.0, 5.0], 0.4),
        };
        let s = map_svg(&map);
        assert_eq!(s.matches("<circle").count(), 2);
        assert!(s.contains(r##"fill="none" stroke="#1f77b4""##));
        assert_eq!(s, map_svg(&map));
    }
}
