mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mmodeseg::metrics::evaluate;
use mmodeseg::nn::network::VERSION_TAG;
use mmodeseg::nn::{load_checkpoint, ModelParams, NetworkConfig, FORMAT_VERSION};
use mmodeseg::pipeline::{
    bench, compare_batching, run_stream, ArtifactOptions, FixedBandModel, NetworkModel,
    OracleModel, PipelineConfig, Source, StripeModel,
};
use mmodeseg::synthgen::{
    generate_dataset, generate_sample, DatasetSpec, Manifest, PhantomConfig, Presets, Split, Subset,
};
use mmodeseg::training::{train_with_hooks, TrainHooks, TrainJob};
use mmodeseg::Error;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use config::{config_hash, resolve, ConfigError};

#[derive(Parser)]
#[command(name = "mmodeseg", version, about = "Corneal M-mode OCT layer segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Default)]
struct ConfigArgs {
    /// JSON configuration file; keys not given keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override applied after --config, e.g. `train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SubsetArg {
    #[value(name = "in_vivo", alias = "in-vivo")]
    InVivo,
    #[value(name = "ex_vivo", alias = "ex-vivo")]
    ExVivo,
    Hybrid,
}

impl From<SubsetArg> for Subset {
    fn from(s: SubsetArg) -> Self {
        match s {
            SubsetArg::InVivo => Subset::InVivo,
            SubsetArg::ExVivo => Subset::ExVivo,
            SubsetArg::Hybrid => Subset::Hybrid,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    /// Trained network from --checkpoint.
    Network,
    /// Ground-truth replay; only for synthetic or manifest sources.
    Oracle,
    /// Fixed flat band, input independent.
    Stub,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with frames, masks, traces and a manifest.
    Generate {
        #[arg(long, value_enum, default_value = "hybrid")]
        subset: SubsetArg,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Training-portion size (validation is drawn from it); default is the subset's standard size.
        #[arg(long, requires = "n_test")]
        n_train: Option<usize>,
        /// Test-split size.
        #[arg(long, requires = "n_train")]
        n_test: Option<usize>,
        /// Directory holding in_vivo.json and ex_vivo.json; the shipped presets otherwise.
        #[arg(long)]
        presets: Option<PathBuf>,
        /// Replaces the preset seeds (in vivo gets SEED, ex vivo SEED+1).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; config keys live under network.*, train.* and loss.*.
    Train {
        /// Dataset manifest.json.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints, history.csv and the stamp.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint on one split; config keys live under pipeline.*.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest.json.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Output directory for eval_report.json and eval_frames.csv.
        #[arg(long, default_value = "eval_out")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the paced, gated frame stream.
    Stream {
        /// `synth` for generated frames or a path to a manifest.json to replay its split.
        #[arg(long, default_value = "synth")]
        source: String,
        /// Acquisition rate of a live source; without it frames are replayed back to back.
        #[arg(long)]
        hz: Option<f64>,
        /// Output rate cap; overrides pipeline.cap_hz.
        #[arg(long)]
        cap: Option<f64>,
        /// Number of frames to draw from a synthetic source.
        #[arg(long, default_value_t = 200)]
        frames: u64,
        /// Phantom style of the synthetic source.
        #[arg(long, value_enum, default_value = "in_vivo")]
        style: SubsetArg,
        /// Split replayed from a manifest source.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "network")]
        model: ModelArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory for report.json, trace_log.csv and overlays.
        #[arg(long, default_value = "stream_out")]
        out: PathBuf,
        /// Write one overlay PNG per output.
        #[arg(long)]
        overlays: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Uncapped throughput and per-stage latency after a 20-frame warm-up.
    Bench {
        #[arg(long, default_value_t = 200)]
        frames: usize,
        /// Trained weights; an untrained network of --network size otherwise
        /// (latency does not depend on weight values).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Network preset when no checkpoint is given: tiny or full.
        #[arg(long, default_value = "tiny")]
        network: String,
        /// Output directory for report.json.
        #[arg(long, default_value = "bench_out")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    pipeline: PipelineConfig,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Usage(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Key { .. } => Failure::Usage(e.to_string()),
            ConfigError::Read(m) => Failure::Runtime(m),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serialisable"));
}

/// Written next to every command's outputs.
fn write_stamp(dir: &Path, command: &str, config: &Value, seed: Option<u64>) -> CmdResult {
    let stamp = json!({
        "command": command,
        "args": std::env::args().skip(1).collect::<Vec<_>>(),
        "config": config,
        "config_sha256": config_hash(config),
        "seed": seed,
        "versions": {
            "package": env!("CARGO_PKG_VERSION"),
            "model": VERSION_TAG,
            "checkpoint_format": FORMAT_VERSION,
        },
    });
    write_json(&dir.join("stamp.json"), &stamp)
}

fn cmd_generate(
    subset: SubsetArg,
    out: &Path,
    sizes: Option<(usize, usize)>,
    presets_dir: Option<&Path>,
    seed: Option<u64>,
) -> CmdResult {
    let mut presets = match presets_dir {
        Some(dir) => Presets::load(dir)?,
        None => Presets::builtin(),
    };
    if let Some(s) = seed {
        presets.in_vivo.seed = s;
        presets.ex_vivo.seed = s.wrapping_add(1);
    }
    let spec = match sizes {
        Some((n_train, n_test)) => DatasetSpec::custom(subset.into(), n_train, n_test),
        None => DatasetSpec::standard(subset.into()),
    };
    let manifest = generate_dataset(&spec, &presets, out)?;
    let config = json!({ "dataset": spec, "presets": presets });
    write_stamp(out, "generate", &config, Some(presets.in_vivo.seed))?;
    print_json(&json!({
        "out": out,
        "train": manifest.count(Split::Train),
        "val": manifest.count(Split::Val),
        "test": manifest.count(Split::Test),
        "shadowed": manifest.items.iter().filter(|i| i.shadowed).count(),
    }));
    Ok(())
}

fn cmd_train(data: &Path, out: &Path, cfg: &ConfigArgs) -> CmdResult {
    let (job, resolved): (TrainJob, Value) = resolve(cfg.config.as_deref(), &cfg.overrides)?;
    job.validate()?;
    let manifest = Manifest::load(data)?;
    write_stamp(out, "train", &resolved, Some(job.train.seed))?;
    let mut progress = |r: &mmodeseg::training::EpochRecord| {
        eprintln!(
            "epoch {:>3}  ce {:.4}  dice {:.4}  topo {:.5}  val_mae {:.3} px  val_dice {:.4}",
            r.epoch, r.loss_ce, r.loss_dice, r.loss_topo, r.val_mae_px, r.val_dice
        );
    };
    let outcome = train_with_hooks(
        &job,
        &manifest,
        out,
        TrainHooks {
            on_epoch: Some(&mut progress),
            best_only: false,
        },
    )?;
    print_json(&json!({
        "best": outcome.best,
        "best_checkpoint": out.join("best.ckpt"),
        "wall_time_s": outcome.wall_time_s,
    }));
    Ok(())
}

fn pipeline_config(cfg: &ConfigArgs) -> Result<(PipelineConfig, Value), Failure> {
    let (run, value): (RunConfig, Value) = resolve(cfg.config.as_deref(), &cfg.overrides)?;
    run.pipeline.validate()?;
    Ok((run.pipeline, value))
}

fn cmd_eval(checkpoint: &Path, data: &Path, split: Split, out: &Path, cfg: &ConfigArgs) -> CmdResult {
    let (pipeline, value) = pipeline_config(cfg)?;
    let model = NetworkModel::new(load_checkpoint(checkpoint)?);
    let manifest = Manifest::load(data)?;
    write_stamp(out, "eval", &value, None)?;
    let (report, _) = evaluate(&model, &manifest, split, &pipeline, Some(out))?;
    print_json(&report);
    Ok(())
}

fn load_model(kind: ModelArg, checkpoint: Option<&Path>) -> Result<Option<Box<dyn StripeModel>>, Failure> {
    Ok(match kind {
        ModelArg::Network => {
            let path = checkpoint
                .ok_or_else(|| Failure::Usage("--model network needs --checkpoint".into()))?;
            Some(Box::new(NetworkModel::new(load_checkpoint(path)?)))
        }
        ModelArg::Stub => Some(Box::new(FixedBandModel {
            epi_row: 120,
            dm_row: 320,
        })),
        ModelArg::Oracle => None,
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_stream(
    source: &str,
    hz: Option<f64>,
    cap: Option<f64>,
    frames: u64,
    style: SubsetArg,
    split: Split,
    kind: ModelArg,
    checkpoint: Option<&Path>,
    out: &Path,
    overlays: bool,
    cfg: &ConfigArgs,
) -> CmdResult {
    let (mut pipeline, mut value) = pipeline_config(cfg)?;
    if let Some(c) = cap {
        pipeline.cap_hz = c;
        value["pipeline"]["cap_hz"] = json!(c);
    }
    pipeline.validate()?;
    if let Some(h) = hz {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Failure::Usage(format!("--hz must be positive, got {h}")));
        }
    }
    let model = load_model(kind, checkpoint)?;
    let mut oracle = OracleModel::new();

    let frames_iter: Box<dyn Iterator<Item = mmodeseg::Result<mmodeseg::types::Frame>> + Send> =
        if source == "synth" {
            let presets = Presets::builtin();
            let phantom: PhantomConfig = match style {
                SubsetArg::ExVivo => presets.ex_vivo.clone(),
                _ => presets.in_vivo.clone(),
            };
            if kind == ModelArg::Oracle {
                for i in 0..frames {
                    oracle.insert(i, generate_sample(&phantom, i)?.labels);
                }
            }
            Source::synthetic(phantom, 0, frames)
        } else {
            let manifest = Manifest::load(Path::new(source))?;
            let items: Vec<_> = manifest.split(split).cloned().collect();
            if kind == ModelArg::Oracle {
                for item in &items {
                    let (frame, labels, _) = manifest.load_item(item)?;
                    oracle.insert(frame.frame_id, labels);
                }
            }
            Box::new(items.into_iter().map(move |item| manifest.load_item(&item).map(|(f, _, _)| f)))
        };
    let src = match hz {
        Some(hz) => Source::Live {
            frames: frames_iter,
            hz,
        },
        None => Source::Replay(frames_iter),
    };
    let model: &dyn StripeModel = match &model {
        Some(m) => m.as_ref(),
        None => &oracle,
    };
    write_stamp(out, "stream", &value, None)?;
    let outcome = run_stream(
        src,
        model,
        &pipeline,
        Some(&ArtifactOptions {
            dir: out.to_path_buf(),
            write_overlays: overlays,
        }),
    )?;
    print_json(&outcome.report);
    Ok(())
}

fn cmd_bench(
    frames: usize,
    checkpoint: Option<&Path>,
    network: &str,
    out: &Path,
    cfg: &ConfigArgs,
) -> CmdResult {
    let (pipeline, value) = pipeline_config(cfg)?;
    let params = match checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => ModelParams::init(&NetworkConfig::preset(network)?, 0)?,
    };
    let model = NetworkModel::new(params);
    let phantom = Presets::builtin().in_vivo;
    write_stamp(out, "bench", &value, None)?;
    let report = bench(&model, &pipeline, &phantom, frames)?;
    let sample = generate_sample(&phantom, 0)?;
    let batching = compare_batching(&model, &sample.frame, pipeline.mixed_precision, 3)?;
    let result = json!({ "report": report, "batching": batching });
    write_json(&out.join("report.json"), &result)?;
    print_json(&result);
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Generate {
            subset,
            out,
            n_train,
            n_test,
            presets,
            seed,
        } => cmd_generate(subset, &out, n_train.zip(n_test), presets.as_deref(), seed),
        Command::Train { data, out, cfg } => cmd_train(&data, &out, &cfg),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            cfg,
        } => cmd_eval(&checkpoint, &data, split.into(), &out, &cfg),
        Command::Stream {
            source,
            hz,
            cap,
            frames,
            style,
            split,
            model,
            checkpoint,
            out,
            overlays,
            cfg,
        } => cmd_stream(
            &source,
            hz,
            cap,
            frames,
            style,
            split.into(),
            model,
            checkpoint.as_deref(),
            &out,
            overlays,
            &cfg,
        ),
        Command::Bench {
            frames,
            checkpoint,
            network,
            out,
            cfg,
        } => cmd_bench(frames, checkpoint.as_deref(), &network, &out, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
