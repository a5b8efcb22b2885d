use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use egoscale::experiment::{
    emit_report, eval_runs, points_from_results, read_results_csv, run_experiment, train_runs,
    ExperimentConfig, ExperimentOutcome, ReportOptions, OUTPUT_DIR_ENV,
};
use egoscale::scaling::{
    bundled_points, derive_ood_threshold, fit_loglinear, invert_threshold, parse_points,
    repro_paper, select, ScalingPoint, OOD_REFERENCE_YEARS, TOP5_HUMAN_THRESHOLD,
};
use egoscale::stream::{contiguous_subset, EpisodeLabeling, StreamIndex, SubsetSpec};
use egoscale::world::build_world;

/// Self-supervised scaling experiments on synthetic egocentric streams.
#[derive(Parser)]
#[command(name = "egoscale", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a training stream to PNG frames plus a manifest CSV.
    GenData {
        /// Experiment config (TOML); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Destination directory.
        #[arg(long)]
        out: PathBuf,
        /// Fraction of the configured stream to render.
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        /// Subset repeat index; selects the random window for fractions < 1.
        #[arg(long, default_value_t = 0)]
        repeat: u64,
        /// Stop after this many frames.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train every (fraction, repeat) job that has no checkpoint yet.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate all trained jobs and write the results CSV.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate the full grid, resuming completed jobs.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit accuracy against log10(hours) and invert at a threshold; prints JSON.
    Fit {
        /// Scaling-point CSV (condition,hours,accuracy,run_id) or results CSV.
        #[arg(long)]
        input: PathBuf,
        /// Condition to fit; every condition when omitted.
        #[arg(long)]
        condition: Option<String>,
        /// Accuracy threshold; 90 for clean conditions and the derived OOD
        /// threshold for OOD conditions when omitted.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// One SVG figure per condition plus summary.json.
    Report {
        /// Scaling-point CSV or results CSV; the bundled data points when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = TOP5_HUMAN_THRESHOLD)]
        top5_threshold: f64,
        /// Derived from the bundled data when omitted.
        #[arg(long)]
        ood_threshold: Option<f64>,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Recompute both extrapolation tables from the bundled data points.
    ReproPaper {
        /// Also write the tables as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print the default experiment config as TOML.
    DefaultConfig,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let mut c = ExperimentConfig::default();
            if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
                c.output_dir = dir.into();
            }
            c.validate()?;
            c
        }
    };
    Ok(cfg)
}

fn derived_ood_threshold() -> Result<f64> {
    Ok(derive_ood_threshold(&bundled_points()?, &OOD_REFERENCE_YEARS)?.threshold)
}

/// Reads either CSV layout, dispatching on the header.
fn read_points(path: &Path) -> Result<Vec<ScalingPoint>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut header = String::new();
    BufReader::new(f).read_line(&mut header)?;
    if header.contains("accuracy_top5") {
        Ok(points_from_results(&read_results_csv(path)?))
    } else {
        Ok(parse_points(fs::File::open(path)?)?)
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

#[derive(Serialize)]
struct OutcomeSummary<'a> {
    results_csv: &'a Path,
    runs: usize,
    rows: usize,
    trained: usize,
    evaluated: usize,
}

fn summarize(o: &ExperimentOutcome) -> Result<()> {
    print_json(&OutcomeSummary {
        results_csv: &o.results_path,
        runs: o.manifests.len(),
        rows: o.rows.len(),
        trained: o.trained,
        evaluated: o.evaluated,
    })
}

#[derive(Serialize)]
struct FrameRow {
    file: String,
    frame: usize,
    timestamp_s: f64,
    episode: usize,
    scene_id: usize,
    dominant_class: usize,
    visible_classes: String,
}

fn gen_data(
    cfg: &ExperimentConfig,
    out: &Path,
    fraction: f64,
    repeat: u64,
    limit: Option<usize>,
) -> Result<()> {
    let world = build_world(&cfg.world_spec())?;
    let full = StreamIndex::new(cfg.stream_duration_s, cfg.fps)?;
    let spec = SubsetSpec::random(&full, fraction, cfg.seed, repeat)?;
    let index = contiguous_subset(&full, &spec)?;
    let labeling = EpisodeLabeling::new(&index, cfg.episode_length_s)?;
    let frames_dir = out.join("frames");
    fs::create_dir_all(&frames_dir)
        .with_context(|| format!("creating {}", frames_dir.display()))?;
    let n = limit.map_or(index.frame_count(), |l| l.min(index.frame_count()));
    let mut w = csv::Writer::from_path(out.join("manifest.csv"))?;
    for k in 0..n {
        let t = index.timestamp(k);
        let (frame, ann) = world.render_frame(t);
        let im = &frame.image;
        let file = format!("frames/{k:06}.png");
        image::RgbImage::from_raw(im.width() as u32, im.height() as u32, im.to_rgb8())
            .context("frame buffer size")?
            .save(out.join(&file))
            .with_context(|| format!("writing {file}"))?;
        w.serialize(FrameRow {
            file,
            frame: k,
            timestamp_s: t,
            episode: labeling.label(k)?,
            scene_id: ann.scene_id,
            dominant_class: ann.dominant_class,
            visible_classes: ann
                .visible_class_ids
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        })?;
    }
    w.flush()?;
    log::info!("wrote {n} frames to {}", out.display());
    print_json(&serde_json::json!({
        "frames": n,
        "episodes": labeling.num_episodes,
        "offset_s": spec.start_offset_s,
        "hours": index.hours(),
        "manifest": out.join("manifest.csv"),
    }))
}

#[derive(Serialize)]
struct FitReport {
    condition: String,
    n_points: usize,
    fit: egoscale::scaling::LinearFit,
    threshold: f64,
    estimate: String,
    ci: String,
    extrapolation: egoscale::scaling::Extrapolation,
}

fn fit(input: &Path, condition: Option<&str>, threshold: Option<f64>, level: f64) -> Result<()> {
    let points = read_points(input)?;
    let conds = match condition {
        Some(c) => vec![c.to_string()],
        None => egoscale::scaling::conditions(&points),
    };
    if conds.is_empty() {
        bail!("{} holds no points", input.display());
    }
    let mut out = Vec::new();
    for c in conds {
        let pts = select(&points, &c);
        if pts.is_empty() {
            bail!("no points for condition `{c}`");
        }
        let theta = match threshold {
            Some(t) => t,
            None if egoscale::experiment::is_ood_condition(&c) => derived_ood_threshold()?,
            None => TOP5_HUMAN_THRESHOLD,
        };
        let n_points = pts.len();
        let f = fit_loglinear(pts).with_context(|| format!("fitting `{c}`"))?;
        let e = invert_threshold(&f, theta, level)?;
        out.push(FitReport {
            condition: c,
            n_points,
            fit: f,
            threshold: theta,
            estimate: e.display_estimate(),
            ci: e.display_ci(),
            extrapolation: e,
        });
    }
    print_json(&out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            out,
            fraction,
            repeat,
            limit,
        } => gen_data(
            &load_config(config.as_deref())?,
            &out,
            fraction,
            repeat,
            limit,
        ),
        Command::Train { config } => summarize(&train_runs(&load_config(config.as_deref())?)?),
        Command::Eval { config } => summarize(&eval_runs(&load_config(config.as_deref())?)?),
        Command::Run { config } => summarize(&run_experiment(&load_config(config.as_deref())?)?),
        Command::Fit {
            input,
            condition,
            threshold,
            level,
        } => fit(&input, condition.as_deref(), threshold, level),
        Command::Report {
            input,
            out,
            top5_threshold,
            ood_threshold,
            level,
        } => {
            let points = match input {
                Some(p) => read_points(&p)?,
                None => bundled_points()?,
            };
            let opts = ReportOptions {
                top5_threshold,
                ood_threshold: match ood_threshold {
                    Some(t) => t,
                    None => derived_ood_threshold()?,
                },
                level,
            };
            let summary = emit_report(&points, &opts, &out)?;
            for (c, why) in &summary.skipped {
                eprintln!("skipped {c}: {why}");
            }
            print_json(&serde_json::json!({
                "figures": summary.figures.iter().map(|f| &f.path).collect::<Vec<_>>(),
                "skipped": summary.skipped,
                "summary": out.join("summary.json"),
            }))
        }
        Command::ReproPaper { json } => {
            let t = Instant::now();
            let tables = repro_paper()?;
            print!("{}", tables.render_text());
            if let Some(path) = json {
                fs::write(&path, serde_json::to_string_pretty(&tables)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            log::info!("repro-paper finished in {:.3} s", t.elapsed().as_secs_f64());
            Ok(())
        }
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let err = serde_json::json!({
                "error": e.to_string(),
                "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{err}");
            ExitCode::FAILURE
        }
    }
}
