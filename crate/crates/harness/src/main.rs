use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bat_core::data::{
    ingest_csv, split_dataset, synth_generate, window_scenes, ColumnMap, IngestOptions, Scene, SplitMode, SynthKind,
    SynthSpec, Unit, WindowConfig,
};
use bat_core::model::BatModel;
use bat_harness::ablate::{default_variants, run_ablation, Variant};
use bat_harness::checkpoint::{reconcile, Checkpoint};
use bat_harness::eval::{default_horizons, evaluate};
use bat_harness::export::{prediction_json, write_heatmaps, GridSpec};
use bat_harness::train::{train, TrainOptions};
use bat_harness::{read_scenes, resolve_splits, write_scenes, HarnessError, Result, RunConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Behavior-aware trajectory prediction.
///
/// Log verbosity comes from `BAT_LOG` (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "bat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum UnitArg {
    Feet,
    Meters,
}

#[derive(Clone, Copy, ValueEnum)]
enum Columns {
    /// vehicle_id, frame, x, y, lane_id
    Default,
    /// Vehicle_ID, Frame_ID, Local_X, Local_Y, Lane_ID
    Ngsim,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    /// Every scene, ignoring the split.
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a trajectory CSV into a scene cache.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "meters")]
        unit: UnitArg,
        #[arg(long, value_enum, default_value = "default")]
        columns: Columns,
        /// Source frame interval in seconds.
        #[arg(long, default_value_t = 0.2)]
        dt: f64,
        /// Keep every n-th source frame.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 3.0)]
        t_h: f64,
        #[arg(long, default_value_t = 5.0)]
        t_f: f64,
        /// Frames between reference frames of one vehicle.
        #[arg(long, default_value_t = 5)]
        window_stride: usize,
        #[arg(long, default_value_t = 15.24)]
        capture_radius: f64,
        /// Comma-separated on-ramp lane ids.
        #[arg(long, value_delimiter = ',')]
        merge_lanes: Vec<i64>,
    },
    /// Generate synthetic scenes.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated kinds: constant_velocity, lane_change, roundabout_arc.
        #[arg(long, default_value = "lane_change")]
        kinds: String,
        /// Scenes per kind.
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        #[arg(long, default_value_t = 4)]
        agents: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3.0)]
        t_h: f64,
        #[arg(long, default_value_t = 5.0)]
        t_f: f64,
    },
    /// Train a model; writes `checkpoint.batc` and `train_log.csv`.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// RMSE table per horizon and maneuver split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Scene cache to evaluate instead of the configured data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print one scene's prediction as JSON.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Write density heatmaps (PGM per step plus one CSV).
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// x_min,x_max,y_min,y_max,nx,ny in ego-frame meters.
        #[arg(long, allow_hyphen_values = true, default_value = "-10,10,-5,80,64,128")]
        grid: String,
        /// Future steps (0-based); all steps when omitted.
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
        #[arg(long, default_value = "heatmap")]
        out_prefix: PathBuf,
    },
    /// Train and compare model variants.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated: A-E, variant names, r=<meters>. Defaults to A-E and r in {0, 7.62, 15.24}.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| HarnessError::Io(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_scene(path: &Path, index: usize) -> Result<Scene> {
    let mut scenes = read_scenes(path)?;
    if index >= scenes.len() {
        return Err(HarnessError::Config(format!(
            "scene index {index} out of range; {} has {} scenes",
            path.display(),
            scenes.len()
        )));
    }
    Ok(scenes.swap_remove(index))
}

fn load_model(path: &Path) -> Result<(Checkpoint, BatModel)> {
    let ckpt = Checkpoint::load(path)?;
    let model = BatModel::new(ckpt.config.model.clone())?;
    model.check_params(&ckpt.params)?;
    Ok((ckpt, model))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            input,
            out,
            unit,
            columns,
            dt,
            stride,
            t_h,
            t_f,
            window_stride,
            capture_radius,
            merge_lanes,
        } => {
            let columns = match columns {
                Columns::Default => ColumnMap::default(),
                Columns::Ngsim => ColumnMap::ngsim(),
            };
            let unit = match unit {
                UnitArg::Feet => Unit::Feet,
                UnitArg::Meters => Unit::Meters,
            };
            let table = ingest_csv(&input, &columns, IngestOptions { unit, dt, stride })?;
            let scenes = window_scenes(
                &table,
                &WindowConfig {
                    t_h,
                    t_f,
                    capture_radius,
                    stride: window_stride,
                    merge_lanes,
                },
            )?;
            write_scenes(&out, &scenes)?;
            log::info!("{} rows -> {} scenes in {}", table.rows.len(), scenes.len(), out.display());
        }
        Command::Synth {
            out,
            kinds,
            scenes,
            agents,
            noise,
            seed,
            t_h,
            t_f,
        } => {
            let mut all = Vec::new();
            for (i, k) in kinds.split(',').enumerate() {
                all.extend(synth_generate(&SynthSpec {
                    kind: SynthKind::parse(k.trim())?,
                    n_scenes: scenes,
                    n_agents: agents,
                    noise,
                    seed: seed.wrapping_add(i as u64 * 0x9E37_79B9),
                    t_h,
                    t_f,
                    ..SynthSpec::default()
                })?);
            }
            write_scenes(&out, &all)?;
            log::info!("{} scenes in {}", all.len(), out.display());
        }
        Command::Train { config, out, resume } => {
            let mut cfg = config.resolve()?;
            let resume = match resume {
                Some(p) => {
                    let ckpt = Checkpoint::load(&p)?;
                    cfg = reconcile(&ckpt, &cfg)?.0;
                    Some(ckpt)
                }
                None => None,
            };
            std::fs::create_dir_all(&out)?;
            let splits = resolve_splits(&cfg)?;
            let log_path = out.join("train_log.csv");
            let mut log_file = std::fs::File::create(&log_path)?;
            let outcome = train(
                &cfg,
                &splits.train,
                &splits.val,
                TrainOptions {
                    log: Some(&mut log_file),
                    checkpoint: Some(out.join("checkpoint.batc")),
                    resume,
                },
            )?;
            log::info!(
                "trained {} epochs on {} scenes -> {}",
                outcome.log.len(),
                splits.train.len(),
                out.join("checkpoint.batc").display()
            );
        }
        Command::Eval {
            checkpoint,
            config,
            data,
            split,
            out,
        } => {
            let (ckpt, model) = load_model(&checkpoint)?;
            let cfg = if config.config.is_some() || !config.overrides.is_empty() {
                reconcile(&ckpt, &config.resolve()?)?.0
            } else {
                ckpt.config.clone()
            };
            let scenes = match data {
                Some(p) => read_scenes(&p)?,
                None => bat_harness::resolve_scenes(&cfg)?,
            };
            let scenes = match split {
                SplitArg::All => scenes,
                s => {
                    let d = split_dataset(&scenes, cfg.split_fractions, SplitMode::ManeuverBased, cfg.split_seed, cfg.subsample)?;
                    match s {
                        SplitArg::Train => d.train,
                        SplitArg::Val => d.val,
                        _ => d.test,
                    }
                }
            };
            let table = evaluate(&model, &ckpt.params, &scenes, &default_horizons(&model.config), true)?;
            emit(out.as_deref(), &table.to_csv())?;
        }
        Command::Predict { checkpoint, data, index } => {
            let (ckpt, model) = load_model(&checkpoint)?;
            let scene = load_scene(&data, index)?;
            let pred = model.predict(&ckpt.params, &scene)?;
            println!("{}", prediction_json(&scene, &pred)?);
        }
        Command::Heatmap {
            checkpoint,
            data,
            index,
            grid,
            steps,
            out_prefix,
        } => {
            let (ckpt, model) = load_model(&checkpoint)?;
            let scene = load_scene(&data, index)?;
            let spec = GridSpec::parse(&grid)?;
            let pred = model.predict(&ckpt.params, &scene)?;
            let steps = if steps.is_empty() { (0..pred.steps()).collect() } else { steps };
            let (paths, masses) = write_heatmaps(&pred, spec, &steps, &out_prefix)?;
            for (step, mass) in steps.iter().zip(&masses) {
                log::info!("step {step}: grid mass {mass:.4}");
            }
            log::info!("wrote {} files", paths.len());
        }
        Command::Ablate { config, variants, out } => {
            let cfg = config.resolve()?;
            let variants = match variants {
                Some(v) => Variant::parse_list(&v)?,
                None => default_variants(),
            };
            let splits = resolve_splits(&cfg)?;
            let table = run_ablation(&cfg, &variants, &splits)?;
            emit(out.as_deref(), &table.to_csv())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BAT_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.message().replace('\n', " ");
            eprintln!("error: kind={} msg={msg:?}", e.kind());
            ExitCode::FAILURE
        }
    }
}
