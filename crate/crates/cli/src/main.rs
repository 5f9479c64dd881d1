use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use echomap::classifier::{
    accuracy, cross_validate, dataset_to_csv, EchoClass, generate_dataset, split_dataset, train_svm, Prediction, SvmModel,
};
use echomap::config::ScenarioConfig;
use echomap::eval::{run_sweep, time_methods, SweepVariable};
use echomap::io::{curve_svg, map_svg, read_recording, write_json, write_raw, write_text, write_wav};
use echomap::mapper::{assemble_map, map_metrics, PoseEstimate};
use echomap::room::MultichannelRecording;
use echomap::{seed, Error};

#[derive(Parser)]
#[command(name = "echomap", version, about = "Acoustic echo mapping with a circular microphone array")]
struct Cli {
    /// Scenario config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render one probe at the configured pose.
    Sim,
    /// Estimate echo delay and direction from a recording.
    Estimate {
        #[arg(long)]
        recording: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Generate the grid dataset, cross-validate and train the echo classifier.
    Train,
    /// Probe along the trajectory and project echoes into a map.
    Map {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Accuracy sweep over SNR or reverberation time.
    Eval {
        #[arg(long, value_enum)]
        sweep: Sweep,
        /// Also report mean per-observation run time (stderr only).
        #[arg(long)]
        timing: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Snr,
    T60,
}

enum Failure {
    Config(Error),
    Run(Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Run(e) if e.is_numerical() => 3,
            Failure::Run(_) => 1,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) => eprintln!("config error: {e}"),
                Failure::Run(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn load_config(cli: &Cli) -> Outcome<ScenarioConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config(Error::invalid("--config", "a scenario config is required")))?;
    let mut cfg = ScenarioConfig::load(path).map_err(|e| {
        Failure::Config(match e {
            Error::Io(io) => Error::invalid("--config", format!("{}: {io}", path.display())),
            other => other,
        })
    })?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Outcome<()> {
    let cfg = load_config(cli)?;
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Failure::Config(Error::invalid("--jobs", "must be positive")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::Run(Error::invalid("--jobs", e.to_string())))?;
    }
    fs::create_dir_all(&cli.out).map_err(Error::from)?;
    let out = Output::new(&cli.out);
    match &cli.command {
        Command::Sim => sim(&cfg, out),
        Command::Estimate { recording, model } => estimate(&cfg, out, recording, model.as_deref()),
        Command::Train => train(&cfg, out),
        Command::Map { model } => map(&cfg, out, model.as_deref()),
        Command::Eval { sweep, timing } => eval(&cfg, out, *sweep, *timing),
    }
}

/// Collects written file names for the manifest.
struct Output<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl<'a> Output<'a> {
    fn new(dir: &'a Path) -> Self {
        Self { dir, files: Vec::new() }
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, text: &str) -> Outcome<()> {
        let p = self.path(name);
        Ok(write_text(&p, text)?)
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Outcome<()> {
        let p = self.path(name);
        Ok(write_json(&p, value)?)
    }

    /// Writes `manifest_<command>.json` with the version, effective config
    /// and every output. No timestamps or host details, so reruns are
    /// byte-identical.
    fn finish(mut self, command: &str, cfg: &ScenarioConfig, extra: Value) -> Outcome<()> {
        let name = format!("manifest_{command}.json");
        let mut outputs = self.files.clone();
        outputs.push(name.clone());
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.seed,
            "config": cfg,
            "inputs": extra,
            "outputs": outputs,
        });
        let p = self.path(&name);
        Ok(write_json(&p, &manifest)?)
    }
}

fn sim(cfg: &ScenarioConfig, mut out: Output) -> Outcome<()> {
    let prober = cfg.prober()?;
    let pose = cfg.pose();
    let rirs = prober.rirs(&pose)?;
    let noise = cfg.noise.draw(cfg.seed);
    let rec = prober.render(&rirs, &noise)?;
    let fs = cfg.geometry.sample_rate;
    write_wav(&out.path("recording.wav"), &rec)?;
    write_raw(&out.path("recording.f32"), &rec)?;
    out.files.push("recording.json".into());
    write_wav(&out.path("rir.wav"), &MultichannelRecording::new(rirs.responses.clone(), fs)?)?;
    let truth = json!({
        "pose": pose,
        "array_center": prober.array_center(&pose),
        "mic_positions": prober.mic_positions(&pose)?,
        "noise": noise,
        "echoes": prober.truth(&pose)?,
    });
    out.json("truth.json", &truth)?;
    println!("rendered {} channels x {} samples", rec.mic_count(), rec.len());
    out.finish("sim", cfg, Value::Null)
}

fn load_model(cfg: &ScenarioConfig, flag: Option<&Path>) -> Outcome<Option<(PathBuf, SvmModel)>> {
    let Some(path) = flag.map(Path::to_path_buf).or_else(|| cfg.classifier.model.clone()) else {
        return Ok(None);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| Failure::Config(Error::invalid("model", format!("{}: {e}", path.display()))))?;
    let model = SvmModel::from_json(&text).map_err(|e| Failure::Config(e.in_section("model")))?;
    Ok(Some((path, model)))
}

#[derive(Serialize)]
struct EstimateReport {
    #[serde(flatten)]
    estimate: PoseEstimate,
    range_m: f64,
    classification: Option<Prediction>,
}

fn estimate(cfg: &ScenarioConfig, mut out: Output, recording: &Path, model: Option<&Path>) -> Outcome<()> {
    let model = load_model(cfg, model)?;
    let prober = cfg.prober()?;
    let rec = read_recording(recording)?;
    let est = prober.estimate(&prober.remove_direct_path(&rec)?)?;
    let report = EstimateReport {
        estimate: est,
        range_m: cfg.toa_config().samples_to_range(est.toa.tau),
        classification: model.as_ref().map(|(_, m)| m.predict(&est.feature)),
    };
    out.json("estimate.json", &report)?;
    println!(
        "tau {} samples ({:.3} m), azimuth {:.1} deg",
        est.toa.tau,
        report.range_m,
        est.doa.azimuth.to_degrees()
    );
    let inputs = json!({
        "recording": recording,
        "model": model.as_ref().map(|(p, _)| p),
    });
    out.finish("estimate", cfg, inputs)
}

fn train(cfg: &ScenarioConfig, mut out: Output) -> Outcome<()> {
    let prober = cfg.prober()?;
    let data = generate_dataset(&prober, &cfg.dataset, cfg.seed)?;
    out.text("dataset.csv", &dataset_to_csv(&data))?;
    let (train_set, test_set) = split_dataset(&data, cfg.classifier.split_ratio, seed::derive(&[cfg.seed, 1]))?;
    let c = &cfg.classifier;
    let cv = cross_validate(&train_set, &c.c_grid, &c.width_grid, c.folds)?;
    let model = train_svm(&train_set, cv.best_c, cv.best_width)?;
    let held_out = accuracy(&model, &test_set);
    out.text("model.json", &model.to_json()?)?;
    let report = json!({
        "dataset_size": data.len(),
        "train_size": train_set.len(),
        "test_size": test_set.len(),
        "wall_fraction": data.iter().filter(|s| s.label == EchoClass::Wall).count() as f64 / data.len() as f64,
        "held_out_accuracy": held_out,
        "cross_validation": cv,
    });
    out.json("cv_report.json", &report)?;
    println!(
        "trained on {} samples: C = {}, width = {}, cv accuracy {:.3}, held-out accuracy {:.3}",
        train_set.len(),
        cv.best_c,
        cv.best_width,
        cv.cv_accuracy,
        held_out
    );
    out.finish("train", cfg, Value::Null)
}

fn map(cfg: &ScenarioConfig, mut out: Output, model: Option<&Path>) -> Outcome<()> {
    let model = load_model(cfg, model)?;
    let prober = cfg.prober()?;
    let traj = cfg.trajectory()?;
    let estimates = traj
        .poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| prober.probe_at_pose(pose, &cfg.noise.draw(seed::derive(&[cfg.seed, i as u64]))))
        .collect::<Result<Vec<_>, _>>()?;
    let unfiltered = assemble_map(&traj, &prober, &estimates, None);
    let map = assemble_map(&traj, &prober, &estimates, model.as_ref().map(|(_, m)| m));
    out.text("map.csv", &map.to_csv())?;
    out.text("map.svg", &map_svg(&map))?;
    let metrics = json!({
        "tol_m": cfg.map.tol_m,
        "poses": traj.poses.len(),
        "unfiltered": map_metrics(&unfiltered, cfg.map.tol_m),
        "filtered": model.as_ref().map(|_| map_metrics(&map, cfg.map.tol_m)),
    });
    out.json("metrics.json", &metrics)?;
    println!("{} poses, {} accepted points", traj.poses.len(), map.accepted().count());
    let inputs = json!({ "model": model.as_ref().map(|(p, _)| p) });
    out.finish("map", cfg, inputs)
}

fn eval(cfg: &ScenarioConfig, mut out: Output, sweep: Sweep, timing: bool) -> Outcome<()> {
    let (variable, tag) = match sweep {
        Sweep::Snr => (SweepVariable::SnrDb, "snr"),
        Sweep::T60 => (SweepVariable::T60S, "t60"),
    };
    let spec = cfg.experiment(variable);
    let result = run_sweep(&spec)?;
    out.text(&format!("curve_{tag}.csv"), &result.curve.to_csv())?;
    out.text(&format!("curve_{tag}.svg"), &curve_svg(&result.curve))?;
    out.text(&format!("trials_{tag}.csv"), &result.outcomes_csv())?;
    for m in &result.curve.methods {
        let acc: Vec<String> = m.accuracy.iter().map(|a| format!("{a:.2}")).collect();
        println!("{:>12}: {}", m.method, acc.join(" "));
    }
    if timing {
        let t = time_methods(&spec)?;
        eprintln!(
            "timing on {} over {} trials: snls {:.4} s, baseline {:.4} s",
            t.machine, t.trials, t.snls_mean_s, t.baseline_mean_s
        );
    }
    out.finish(&format!("eval_{tag}"), cfg, Value::Null)
}
