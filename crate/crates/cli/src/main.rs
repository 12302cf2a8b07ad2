use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use omnisplat::diff::{self, PipelineConfig};
use omnisplat::io::{self, Checkpoint};
use omnisplat::optim::{self, DensifyEvent, MetricsRecord, TrainConfig, TrainObserver, TrainState};
use omnisplat::probe::{self, ProbeConfig};
use omnisplat::synthbench::{self, EvalKind, SphereRoomConfig};

/// Effective configuration of one invocation: defaults, then the `--config`
/// file, then command-line flags.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    /// Overrides the seeds of every section when set.
    seed: Option<u64>,
    /// Worker threads; 0 lets rayon decide.
    threads: usize,
    synth: SphereRoomConfig,
    train: TrainConfig,
    gradcheck: ProbeConfig,
}

#[derive(Parser, Debug)]
#[command(name = "omnisplat", version, about = "Underwater 360° Gaussian splatting")]
struct Cli {
    /// TOML file layered over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic sphere-room dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Direct attenuation per channel, as `r,g,b`.
        #[arg(long, value_parser = parse_rgb)]
        beta_d: Option<[f64; 3]>,
        /// Backscatter coefficient per channel, as `r,g,b`.
        #[arg(long, value_parser = parse_rgb)]
        beta_b: Option<[f64; 3]>,
        /// Veiling light per channel, as `r,g,b`.
        #[arg(long, value_parser = parse_rgb)]
        b_inf: Option<[f64; 3]>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        cameras: Option<usize>,
    },
    /// Optimize a model against a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<u64>,
        /// Continue from a checkpoint instead of initializing from points.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        no_medium: bool,
        #[arg(long)]
        no_appearance: bool,
        #[arg(long)]
        no_densify: bool,
        /// Also write a checkpoint at every evaluation.
        #[arg(long)]
        checkpoint_every_eval: bool,
    },
    /// Render the composed observation for every pose of a manifest.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory containing a `transforms.json`.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the clean radiance, attenuation, backscatter and depth layers.
    Decompose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean metrics over the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Target::Raw)]
        target: Target,
        /// Result file; defaults to `eval_<target>.txt` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences on a small instance.
    Gradcheck {
        /// Report file (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Target {
    /// Composed render vs. the observation.
    Raw,
    /// Rendered clean radiance vs. the ground-truth radiance.
    Restored,
}

fn parse_rgb(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| e.to_string())?;
    <[f64; 3]>::try_from(v).map_err(|v| format!("expected 3 comma-separated values, got {}", v.len()))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(seed) = cfg.seed {
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn dump_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = toml::to_string_pretty(cfg).context("serializing config")?;
    fs::write(dir.join("config.toml"), text)?;
    Ok(())
}

/// Training state and pipeline settings stored in a checkpoint.
fn load_model(path: &Path, cfg: &RunConfig) -> Result<(TrainState, PipelineConfig)> {
    let ck = io::load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let (use_appearance, use_medium) = (ck.use_appearance, ck.use_medium);
    let state = ck.into_state();
    let mut pipeline = optim::train::pipeline_for(&state, &cfg.train);
    pipeline.use_appearance = use_appearance;
    pipeline.use_medium = use_medium;
    Ok((state, pipeline))
}

struct Progress {
    out: PathBuf,
    pipeline: PipelineConfig,
    metrics: BufWriter<File>,
    densify: BufWriter<File>,
    checkpoint_every_eval: bool,
    started: Instant,
}

impl Progress {
    fn write(&mut self, rec: &MetricsRecord, state: &TrainState) -> Result<()> {
        writeln!(
            self.metrics,
            "{},{:.6},{:.4},{:.4},{:.5},{}",
            rec.iter, rec.loss, rec.psnr_train, rec.psnr_test, rec.ssim_test, rec.n_gaussians
        )?;
        self.metrics.flush()?;
        if self.checkpoint_every_eval {
            let ck = Checkpoint::from_state(state, &self.pipeline, true);
            io::save_checkpoint(&self.out.join(format!("checkpoint_{:06}.bin", rec.iter)), &ck)?;
        }
        Ok(())
    }
}

impl TrainObserver for Progress {
    fn on_metrics(&mut self, rec: &MetricsRecord, state: &TrainState) {
        info!(
            "iter {:>6}  loss {:.5}  train {:.2} dB  test {:.2} dB  ssim {:.4}  gaussians {}  {:.0}s",
            rec.iter,
            rec.loss,
            rec.psnr_train,
            rec.psnr_test,
            rec.ssim_test,
            rec.n_gaussians,
            self.started.elapsed().as_secs_f64()
        );
        if let Err(e) = self.write(rec, state) {
            log::error!("writing progress: {e:#}");
        }
    }

    fn on_densify(&mut self, ev: &DensifyEvent) {
        let line = format!("{},{},{},{},{},{}", ev.iteration, ev.before, ev.clones, ev.splits, ev.pruned, ev.after);
        if let Err(e) = writeln!(self.densify, "{line}").and_then(|_| self.densify.flush()) {
            log::error!("writing densify log: {e}");
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global().context("building thread pool")?;
    }
    match cli.command {
        Command::Synth { out, beta_d, beta_b, b_inf, width, height, cameras } => {
            let s = &mut cfg.synth;
            s.beta_d = beta_d.unwrap_or(s.beta_d);
            s.beta_b = beta_b.unwrap_or(s.beta_b);
            s.b_inf = b_inf.unwrap_or(s.b_inf);
            s.width = width.unwrap_or(s.width);
            s.height = height.unwrap_or(s.height);
            s.cameras = cameras.unwrap_or(s.cameras);
            dump_config(&out, &cfg)?;
            let ds = synthbench::write_sphere_room(&out, &cfg.synth)?;
            println!("wrote {} views ({} train, {} test) to {}", ds.frames.len(), ds.train.len(), ds.test.len(), out.display());
        }
        Command::Train { data, out, iterations, resume, no_medium, no_appearance, no_densify, checkpoint_every_eval } => {
            let t = &mut cfg.train;
            t.iterations = iterations.unwrap_or(t.iterations);
            if no_medium {
                t.pipeline.use_medium = false;
            }
            if no_appearance {
                t.pipeline.use_appearance = false;
            }
            if no_densify {
                t.densify.enabled = false;
            }
            dump_config(&out, &cfg)?;
            let dataset = io::load_dataset(&data).with_context(|| format!("loading dataset {}", data.display()))?;
            for w in &dataset.warnings {
                log::warn!("{w}");
            }
            let state = match &resume {
                Some(path) => {
                    let ck = io::load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
                    if ck.use_medium != cfg.train.pipeline.use_medium || ck.use_appearance != cfg.train.pipeline.use_appearance {
                        bail!("checkpoint {} was trained with different medium/appearance settings", path.display());
                    }
                    ck.into_state()
                }
                None => optim::init_state(&dataset, &cfg.train)?,
            };
            let mut metrics = BufWriter::new(File::create(out.join("metrics.csv"))?);
            writeln!(metrics, "iter,loss,psnr_train,psnr_test,ssim_test,n_gaussians")?;
            let mut densify = BufWriter::new(File::create(out.join("densify_log.csv"))?);
            writeln!(densify, "iter,before,clones,splits,pruned,after")?;
            let mut progress = Progress {
                out: out.clone(),
                pipeline: cfg.train.pipeline.clone(),
                metrics,
                densify,
                checkpoint_every_eval,
                started: Instant::now(),
            };
            info!("training {} gaussians for {} iterations", state.model.scene.len(), cfg.train.iterations);
            let result = optim::train_from(&dataset, &cfg.train, state, &mut progress)?;
            let ck = Checkpoint::from_state(&result.state, &cfg.train.pipeline, true);
            let path = out.join("checkpoint.bin");
            io::save_checkpoint(&path, &ck)?;
            println!(
                "trained to iteration {} with {} gaussians in {:.1}s; checkpoint {}",
                result.state.iteration,
                result.state.model.scene.len(),
                progress.started.elapsed().as_secs_f64(),
                path.display()
            );
        }
        Command::Render { checkpoint, poses, out } => {
            fs::create_dir_all(&out)?;
            let (state, pipeline) = load_model(&checkpoint, &cfg)?;
            let poses = io::load_poses(&poses)?;
            for (name, pose) in &poses {
                let f = diff::forward_view(&state.model, pose, Some(&state.filter), &pipeline);
                io::write_image(&out.join(format!("{name}.png")), &f.composed, true)?;
            }
            println!("rendered {} views to {}", poses.len(), out.display());
        }
        Command::Decompose { checkpoint, poses, out } => {
            fs::create_dir_all(&out)?;
            let (state, pipeline) = load_model(&checkpoint, &cfg)?;
            let poses = io::load_poses(&poses)?;
            for (name, pose) in &poses {
                synthbench::write_decomposition(&out, name, &state.model, pose, &state.filter, &pipeline)?;
            }
            println!("decomposed {} views into {}", poses.len(), out.display());
        }
        Command::Eval { checkpoint, data, target, out } => {
            let (state, pipeline) = load_model(&checkpoint, &cfg)?;
            let dataset = io::load_dataset(&data).with_context(|| format!("loading dataset {}", data.display()))?;
            let (kind, label) = match target {
                Target::Raw => (EvalKind::RawRender, "raw"),
                Target::Restored => (EvalKind::RestoredJ, "restored"),
            };
            let (mean, _) = synthbench::evaluate(&state, &dataset, kind, &pipeline, None)?;
            let line = format!("PSNR={:.4} SSIM={:.5}", mean.psnr, mean.ssim);
            println!("{line}");
            let path = out.unwrap_or_else(|| checkpoint.with_file_name(format!("eval_{label}.txt")));
            fs::write(&path, format!("{line}\n"))?;
        }
        Command::Gradcheck { out } => {
            let seed = cfg.seed.unwrap_or(0);
            let (inst, report) = probe::run_grad_check(&cfg.gradcheck, seed)?;
            println!("instance seed {} (min gate margin {:.3e})", inst.seed, inst.margins.min());
            for g in &report.groups {
                println!(
                    "{:<24} {:>6} params  max rel {:.3e}  max abs {:.3e}  {}",
                    g.group,
                    g.count,
                    g.max_rel_error,
                    g.max_abs_error,
                    if g.failing.is_empty() { "ok".to_string() } else { format!("FAIL ({})", g.failing.len()) }
                );
            }
            if let Some(path) = out {
                fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            }
            if !report.passed() {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
