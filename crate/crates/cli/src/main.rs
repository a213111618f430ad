use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crossfusion::checkpoint::{self, CheckpointMeta};
use crossfusion::config::RunConfig;
use crossfusion::corruption::{BeamMode, BeamSelection, Corruption, CorruptionSpec};
use crossfusion::dataset::{read_dataset, write_dataset, Manifest};
use crossfusion::evalkit::{
    ablation_suite, evaluate_model, render_report, render_rows, robustness_suite, standard_variants, Head,
};
use crossfusion::gradcheck::{check_tiny_model, GradCheckConfig};
use crossfusion::model::Model;
use crossfusion::scene_synth::{generate_dataset, SceneSample};
use crossfusion::trainer::{train_stage1, train_stage2, StepRecord};
use crossfusion::Error;

#[derive(Parser)]
#[command(
    name = "crossfusion",
    version,
    about = "LiDAR-camera cross-decoding detector at desk scale"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.seed=3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Line-delimited JSON log of the run.
    #[arg(long, global = true, default_value = "crossfusion-log.jsonl")]
    log: PathBuf,
    /// Single-threaded, fully reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Apply a LiDAR corruption to every scene of a dataset.
    Corrupt {
        #[arg(long, value_enum)]
        kind: CorruptKind,
        /// Beam mode (FULL, BEAM16, BEAM4), keep ratio, or FOV half-angle in radians.
        #[arg(long)]
        param: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the proposal stage, the fusion stage, or both.
    Train {
        #[arg(value_enum)]
        stage: StageArg,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Proposal-stage checkpoint to start the fusion stage from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        target: EvalTarget,
        #[arg(long, value_enum, default_value_t = HeadArg::Fusion)]
        head: HeadArg,
    },
    /// Evaluate a checkpoint under every LiDAR corruption protocol.
    Robustness {
        #[command(flatten)]
        target: EvalTarget,
    },
    /// Train and evaluate the component, order, depth and block variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of variant names; all when omitted.
        #[arg(long)]
        only: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of the tiny detector's gradients.
    Gradcheck {
        /// Probe this many coordinates per tensor instead of all of them.
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, default_value_t = 0)]
        scene: u64,
    },
}

#[derive(Args)]
struct EvalTarget {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate every scene instead of the validation split.
    #[arg(long)]
    all: bool,
    /// JSON report to write; the text table always goes to stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Accept a dataset whose fingerprint differs from the checkpoint's.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorruptKind {
    Beams,
    Ratio,
    Fov,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum StageArg {
    Stage1,
    Stage2,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Fusion,
    Stage1,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Fingerprint(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

struct Log {
    out: BufWriter<File>,
}

impl Log {
    fn open(path: &Path) -> Outcome<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
        }
        let f = File::create(path).map_err(|e| Failure::Config(format!("--log {}: {e}", path.display())))?;
        Ok(Self { out: BufWriter::new(f) })
    }

    fn record(&mut self, value: serde_json::Value) {
        // a log that cannot be written must not abort a long run
        let _ = writeln!(self.out, "{value}");
        let _ = self.out.flush();
    }

    fn step(&mut self, run: &str, r: &StepRecord) {
        self.record(json!({"event": "step", "run": run, "record": r}));
    }
}

fn runtime<E: std::fmt::Display>(ctx: &Path) -> impl Fn(E) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", ctx.display()))
}

fn load_data(dir: &Path) -> Outcome<(Manifest, Vec<SceneSample>)> {
    if !dir.join("manifest.json").is_file() {
        return Err(Failure::Config(format!(
            "--data {}: no dataset manifest found",
            dir.display()
        )));
    }
    Ok(read_dataset(dir)?)
}

fn load_checkpoint(path: Option<&PathBuf>, flag: &str) -> Outcome<(Model, CheckpointMeta)> {
    let path = path.ok_or_else(|| Failure::Config(format!("{flag} is required")))?;
    if !path.is_file() {
        return Err(Failure::Config(format!("{flag} {}: file not found", path.display())));
    }
    Ok(checkpoint::load(path)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Outcome<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(runtime(dir))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(runtime(path))?;
    fs::write(path, text + "\n").map_err(runtime(path))
}

fn check_fingerprint(ckpt: &CheckpointMeta, data: &Manifest, force: bool, log: &mut Log) -> Outcome<()> {
    if ckpt.data_fingerprint == data.fingerprint {
        return Ok(());
    }
    let msg = format!(
        "checkpoint was trained on data {} but the dataset carries {}",
        ckpt.data_fingerprint, data.fingerprint
    );
    if force {
        log.record(json!({"event": "warning", "message": msg}));
        eprintln!("warning: {msg} (continuing because of --force)");
        Ok(())
    } else {
        Err(Failure::Config(format!("{msg}; pass --force to evaluate anyway")))
    }
}

fn val_split<'a>(cfg: &RunConfig, data: &'a [SceneSample], all: bool) -> Outcome<&'a [SceneSample]> {
    if all {
        return Ok(data);
    }
    let (_, val) = cfg.split(data.len())?;
    Ok(&data[val])
}

fn run(cli: Cli) -> Outcome<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    if let Command::Synth { scenes, seed, .. } = &cli.command {
        if let Some(n) = scenes {
            cfg.synth.n_scenes = *n;
        }
        if let Some(s) = seed {
            cfg.synth.seed = *s;
        }
    }
    let fingerprint = cfg.fingerprint()?;
    let mut log = Log::open(&cli.log)?;
    log.record(json!({
        "event": "start",
        "fingerprint": fingerprint,
        "data_fingerprint": cfg.data_fingerprint()?,
        "seed": cfg.train.seed,
        "deterministic": cli.deterministic,
        "config": cfg,
    }));

    match cli.command {
        Command::Synth { out, .. } => {
            let samples = generate_dataset(&cfg.synth)?;
            let provenance = json!({"generator": cfg.synth});
            write_dataset(&out, &samples, &cfg.data_fingerprint()?, provenance)?;
            log.record(json!({"event": "synth", "scenes": samples.len(), "out": out}));
            println!("wrote {} scenes to {}", samples.len(), out.display());
        }
        Command::Corrupt {
            kind,
            param,
            input,
            out,
            seed,
        } => {
            let corruption = match kind {
                CorruptKind::Beams => Corruption::Beams(
                    param
                        .parse::<BeamMode>()
                        .map_err(|e| Failure::Config(format!("--param {param}: {e}")))?,
                ),
                CorruptKind::Ratio | CorruptKind::Fov => {
                    let v: f64 = param
                        .parse()
                        .map_err(|_| Failure::Config(format!("--param {param}: expected a number")))?;
                    if matches!(kind, CorruptKind::Ratio) {
                        Corruption::Ratio(v)
                    } else {
                        Corruption::Fov(v)
                    }
                }
            };
            let spec = CorruptionSpec {
                corruption,
                seed,
                selection: BeamSelection::ByBeamIndex,
            };
            spec.validate()?;
            let (manifest, samples) = load_data(&input)?;
            let corrupted = samples
                .iter()
                .map(|s| crossfusion::evalkit::corrupt_scene(s, &spec))
                .collect::<crossfusion::Result<Vec<_>>>()?;
            let provenance = json!({"source": manifest.provenance, "corruption": spec});
            write_dataset(&out, &corrupted, &manifest.fingerprint, provenance)?;
            log.record(json!({"event": "corrupt", "spec": spec, "label": spec.label(), "out": out}));
            println!(
                "wrote {} scenes ({}) to {}",
                corrupted.len(),
                spec.label(),
                out.display()
            );
        }
        Command::Train {
            stage,
            data,
            out,
            init,
            force,
        } => {
            let (manifest, samples) = load_data(&data)?;
            let (train, _) = cfg.split(samples.len())?;
            let train = &samples[train];
            let mut meta = CheckpointMeta {
                fingerprint: fingerprint.clone(),
                data_fingerprint: manifest.fingerprint.clone(),
                seed: cfg.train.seed,
                stage1_steps: 0,
                stage2_steps: 0,
            };
            let mut model = Model::new(&cfg.model)?;
            if stage == StageArg::Stage2 {
                let (stage1, m) = load_checkpoint(init.as_ref(), "--init")?;
                check_fingerprint(&m, &manifest, force, &mut log)?;
                model.load_stage1(&stage1)?;
                meta.stage1_steps = m.stage1_steps;
            } else {
                let recs = train_stage1(&mut model, train, &cfg.train, &mut |r| log.step("stage1", r))?;
                meta.stage1_steps = recs.len() as u64;
                println!(
                    "stage 1: {} steps, final loss {:.4}",
                    recs.len(),
                    recs.last().map_or(f64::NAN, |r| r.loss.total)
                );
            }
            if stage != StageArg::Stage1 {
                let recs = train_stage2(&mut model, train, &cfg.train, &mut |r| log.step("stage2", r))?;
                meta.stage2_steps = recs.len() as u64;
                println!(
                    "stage 2: {} steps, final loss {:.4}",
                    recs.len(),
                    recs.last().map_or(f64::NAN, |r| r.loss.total)
                );
            }
            checkpoint::save(&out, &model, &meta)?;
            log.record(json!({"event": "checkpoint", "path": out, "meta": meta}));
        }
        Command::Eval { target, head } => {
            let (model, meta) = load_checkpoint(target.checkpoint.as_ref(), "--checkpoint")?;
            let (manifest, samples) = load_data(&target.data)?;
            check_fingerprint(&meta, &manifest, target.force, &mut log)?;
            let val = val_split(&cfg, &samples, target.all)?;
            let head = match head {
                HeadArg::Fusion => Head::Fusion,
                HeadArg::Stage1 => Head::Proposal,
            };
            let report = evaluate_model(
                &model,
                val,
                head,
                None,
                &cfg.class_names(),
                head.name(),
                &meta.fingerprint,
            )?;
            print!("{}", render_report(&report));
            log.record(json!({"event": "eval", "report": report}));
            if let Some(p) = target.report {
                write_json(&p, &report)?;
            }
        }
        Command::Robustness { target } => {
            let (model, meta) = load_checkpoint(target.checkpoint.as_ref(), "--checkpoint")?;
            let (manifest, samples) = load_data(&target.data)?;
            check_fingerprint(&meta, &manifest, target.force, &mut log)?;
            let val = val_split(&cfg, &samples, target.all)?;
            let report = robustness_suite(
                &model,
                val,
                &cfg.class_names(),
                cfg.eval.corruption_seed,
                &meta.fingerprint,
            )?;
            print!("{}", render_rows(report.rows.iter().map(|r| &r.report)));
            log.record(json!({"event": "robustness", "report": report}));
            if let Some(p) = target.report {
                write_json(&p, &report)?;
            }
        }
        Command::Ablate { data, only, report } => {
            let (_, samples) = load_data(&data)?;
            let (train, val) = cfg.split(samples.len())?;
            let mut variants = standard_variants(&cfg.model);
            if let Some(list) = only {
                let wanted: Vec<&str> = list.split(',').map(str::trim).collect();
                for w in &wanted {
                    if !variants.iter().any(|v| v.name == *w) {
                        let known: Vec<&str> = variants.iter().map(|v| v.name.as_str()).collect();
                        return Err(Failure::Config(format!(
                            "--only: unknown variant {w:?}; known: {known:?}"
                        )));
                    }
                }
                variants.retain(|v| wanted.contains(&v.name.as_str()));
            }
            let rows = ablation_suite(
                &cfg.model,
                &cfg.train,
                &samples[train],
                &samples[val],
                &variants,
                &cfg.class_names(),
                &fingerprint,
                &mut |run, r| log.step(run, r),
            )?;
            print!("{}", render_rows(rows.iter().map(|r| &r.report)));
            log.record(json!({"event": "ablation", "rows": rows}));
            if let Some(p) = report {
                write_json(&p, &rows)?;
            }
        }
        Command::Gradcheck { sample, scene } => {
            let gc = GradCheckConfig {
                per_tensor: sample,
                ..GradCheckConfig::default()
            };
            let rep = check_tiny_model(&gc, scene)?;
            log.record(json!({"event": "gradcheck", "report": rep}));
            println!(
                "max relative error {:.3e} over {} coordinates ({} skipped at kinks, {} failures)",
                rep.max_rel_err, rep.checked, rep.skipped, rep.failures
            );
            if !rep.worst.is_empty() {
                println!("worst: {}", rep.worst);
            }
            if !(rep.passed() && rep.max_rel_err <= gc.rel_tol) {
                return Err(Failure::Runtime(format!(
                    "gradient check failed (tolerance {:.0e})",
                    gc.rel_tol
                )));
            }
        }
    }
    log.record(json!({"event": "end", "status": "ok"}));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
