use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Protocol};
use super::{io_err, ExperimentError, Result};
use crate::eval::{
    evaluate, few_shot_finetune, labeled_from_world, linear_probe, ood_eval, practice_finetune,
    write_eval_csv, EvalRecord, LabeledSet, OodSuite,
};
use crate::seed;
use crate::ssl::{
    config_hash, render_training_data, train, write_trace_csv, Checkpoint, SubsetDescriptor,
};
use crate::stream::{contiguous_subset, StreamIndex, SubsetSpec};
use crate::world::{build_world, World};

const EXPERIMENT_FILE: &str = "experiment.json";
const MANIFEST_FILE: &str = "manifest.json";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const TRACE_FILE: &str = "trace.csv";
const EVAL_FILE: &str = "eval.csv";
const ROWS_FILE: &str = "rows.csv";
pub const RESULTS_FILE: &str = "results.csv";

/// One row of the results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub condition: String,
    pub algorithm: String,
    pub protocol: String,
    pub hours: f64,
    pub accuracy_top1: f64,
    pub accuracy_top5: f64,
    pub run_id: String,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStage {
    Trained,
    Complete,
}

/// Record of one `(fraction, repeat)` job. Paths are relative to the
/// output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    /// SHA-256 over the config hash, subset window and seed.
    pub input_hash: String,
    pub stage: RunStage,
    pub fraction: f64,
    pub repeat: u64,
    pub seed: u64,
    pub hours: f64,
    pub offset_s: f64,
    pub checkpoint_path: PathBuf,
    pub metrics_paths: Vec<PathBuf>,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
}

impl RunManifest {
    fn paths_exist(&self, out: &Path) -> bool {
        std::iter::once(&self.checkpoint_path)
            .chain(&self.metrics_paths)
            .all(|p| out.join(p).is_file())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannedRun {
    pub run_id: String,
    pub fraction: f64,
    pub repeat: u64,
    pub seed: u64,
    pub subset: SubsetSpec,
    pub index: StreamIndex,
}

impl PlannedRun {
    pub fn hours(&self) -> f64 {
        self.index.hours()
    }

    fn input_hash(&self, cfg_hash: &str) -> String {
        config_hash(&(
            cfg_hash,
            &self.run_id,
            self.fraction,
            self.repeat,
            self.seed,
            self.subset,
        ))
    }

    fn dir(&self, out: &Path) -> PathBuf {
        out.join("runs").join(&self.run_id)
    }
}

/// Every `(fraction, repeat)` job in fraction-major order.
pub fn plan_runs(cfg: &ExperimentConfig) -> Result<Vec<PlannedRun>> {
    let full = StreamIndex::new(cfg.stream_duration_s, cfg.fps)?;
    let mut out = Vec::new();
    for &fraction in &cfg.fractions {
        for repeat in 0..cfg.repeats as u64 {
            let subset = SubsetSpec::random(&full, fraction, cfg.seed, repeat)?;
            let index = contiguous_subset(&full, &subset)?;
            out.push(PlannedRun {
                run_id: format!("{}-f{}-r{}", cfg.algorithm_prefix(), fraction, repeat),
                fraction,
                repeat,
                seed: seed::hash(&[
                    cfg.seed,
                    seed::tag(cfg.algorithm.as_str()),
                    fraction.to_bits(),
                    repeat,
                ]),
                subset,
                index,
            });
        }
    }
    Ok(out)
}

/// Fixed labeled sets drawn from the evaluation world, shared by all runs.
#[derive(Clone, Debug)]
pub struct EvalContext {
    /// `2k` per class; the `fewshot_2pct` training set.
    pub pool: LabeledSet,
    /// `k` per class drawn from `pool`; the `fewshot_1pct` and probe training set.
    pub few_shot: LabeledSet,
    pub test: LabeledSet,
    pub practice: LabeledSet,
    pub suite: OodSuite,
}

impl EvalContext {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let world = build_world(&cfg.eval_world_spec())?;
        let k = cfg.few_shot_per_class;
        let h = cfg.eval_horizon_s;
        let pool =
            labeled_from_world(&world, 2 * k, h, seed::hash(&[cfg.seed, seed::tag("pool")]))?;
        let few_shot = pool.stratified(k, seed::hash(&[cfg.seed, seed::tag("fewshot")]))?;
        let test = labeled_from_world(
            &world,
            cfg.test_per_class,
            h,
            seed::hash(&[cfg.seed, seed::tag("test")]),
        )?;
        let practice = labeled_from_world(
            &world,
            cfg.practice_per_class,
            h,
            seed::hash(&[cfg.seed, seed::tag("practice")]),
        )?;
        Ok(EvalContext {
            pool,
            few_shot,
            test,
            practice,
            suite: OodSuite::default(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub rows: Vec<ResultRow>,
    pub manifests: Vec<RunManifest>,
    pub trained: usize,
    pub evaluated: usize,
    pub results_path: PathBuf,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[derive(Serialize, Deserialize)]
struct ExperimentRecord {
    config_hash: String,
    config: ExperimentConfig,
}

/// Creates the output directory, or checks that an existing one belongs to
/// the same config.
fn prepare_output(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = cfg.output_dir.clone();
    fs::create_dir_all(out.join("runs")).map_err(io_err(&out))?;
    let path = out.join(EXPERIMENT_FILE);
    let hash = cfg.hash();
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let prior: ExperimentRecord = serde_json::from_str(&text)?;
        if prior.config_hash != hash {
            return Err(ExperimentError::ConfigMismatch {
                path: out,
                expected: hash,
                found: prior.config_hash,
            });
        }
    } else {
        let rec = ExperimentRecord {
            config_hash: hash,
            config: cfg.clone(),
        };
        write_atomic(&path, serde_json::to_string_pretty(&rec)?.as_bytes())?;
    }
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_manifest(out: &Path, run: &PlannedRun, hash: &str) -> Result<Option<RunManifest>> {
    let path = run.dir(out).join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: RunManifest = serde_json::from_str(&text)?;
    if m.config_hash != hash {
        return Err(ExperimentError::ConfigMismatch {
            path: path.clone(),
            expected: hash.to_string(),
            found: m.config_hash,
        });
    }
    if m.input_hash != run.input_hash(hash) || !m.paths_exist(out) {
        log::warn!("run {}: stale or incomplete artifacts, redoing", run.run_id);
        return Ok(None);
    }
    Ok(Some(m))
}

fn write_manifest(out: &Path, run: &PlannedRun, m: &RunManifest) -> Result<()> {
    write_atomic(
        &run.dir(out).join(MANIFEST_FILE),
        serde_json::to_string_pretty(m)?.as_bytes(),
    )
}

fn rel(run: &PlannedRun, file: &str) -> PathBuf {
    Path::new("runs").join(&run.run_id).join(file)
}

fn train_one(
    cfg: &ExperimentConfig,
    world: &World,
    out: &Path,
    run: &PlannedRun,
) -> Result<RunManifest> {
    let started = now_unix();
    let dir = run.dir(out);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let subset = SubsetDescriptor {
        hours: run.hours(),
        fraction: run.fraction,
        offset_s: run.subset.start_offset_s,
        seed: cfg.seed,
    };
    let data = render_training_data(world, &run.index, cfg.episode_length_s, subset)?;
    let outcome = train(&cfg.train_config(), &data, run.seed)?;
    outcome
        .checkpoint
        .save(&out.join(rel(run, CHECKPOINT_FILE)))?;
    write_trace_csv(&out.join(rel(run, TRACE_FILE)), &outcome.trace)?;
    log::info!(
        "trained {} ({} frames, final loss {:.4})",
        run.run_id,
        data.frames.len(),
        outcome.trace.last().map_or(f64::NAN, |m| m.loss)
    );
    let m = RunManifest {
        run_id: run.run_id.clone(),
        config_hash: cfg.hash(),
        input_hash: run.input_hash(&cfg.hash()),
        stage: RunStage::Trained,
        fraction: run.fraction,
        repeat: run.repeat,
        seed: run.seed,
        hours: run.hours(),
        offset_s: run.subset.start_offset_s,
        checkpoint_path: rel(run, CHECKPOINT_FILE),
        metrics_paths: vec![rel(run, TRACE_FILE)],
        started_unix_s: started,
        finished_unix_s: now_unix(),
    };
    write_manifest(out, run, &m)?;
    Ok(m)
}

fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    ctx: &EvalContext,
    run: &PlannedRun,
    ckpt: &Checkpoint,
) -> Result<(Vec<ResultRow>, Vec<EvalRecord>)> {
    let ft = cfg.finetune_config();
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let n_test = ctx.test.len();
    for &protocol in &cfg.protocols {
        let pseed = seed::hash(&[run.seed, seed::tag(protocol.as_str())]);
        let record = |kind: &str, param: f64, top1: f64, top5: f64| EvalRecord {
            run_id: run.run_id.clone(),
            protocol: protocol.as_str().to_string(),
            condition_kind: kind.to_string(),
            condition_param: param,
            top1,
            top5,
            n_test,
            seed: run.seed,
        };
        let (top1, top5) = match protocol {
            Protocol::FewShot1 | Protocol::FewShot2 => {
                let set = if protocol == Protocol::FewShot1 {
                    &ctx.few_shot
                } else {
                    &ctx.pool
                };
                let net = few_shot_finetune(ckpt, set, &ft, pseed)?;
                let (t1, t5) = evaluate(&net, &ctx.test)?;
                records.push(record("clean", 0.0, t1, t5));
                (t1, t5)
            }
            Protocol::LinearProbe => {
                let r = linear_probe(ckpt, &ctx.few_shot, &ctx.test, &cfg.probe_config())?;
                records.push(record("clean", 0.0, r.top1, r.top5));
                (r.top1, r.top5)
            }
            Protocol::OodPractice | Protocol::OodPractice2 => {
                let prior = (protocol == Protocol::OodPractice2).then_some(&ctx.pool);
                let practiced = practice_finetune(ckpt, &ctx.practice, prior, &ft, pseed)?;
                let report = ood_eval(&practiced.network, &ctx.suite, &ctx.test, pseed)?;
                for c in &report.conditions {
                    records.push(record(c.kind.as_str(), c.param, c.top1, c.top5));
                }
                let mean5 = report.conditions.iter().map(|c| c.top5).sum::<f64>()
                    / report.conditions.len() as f64;
                (report.mean_ood, mean5)
            }
        };
        rows.push(ResultRow {
            condition: cfg.condition(protocol),
            algorithm: cfg.algorithm.as_str().to_string(),
            protocol: protocol.as_str().to_string(),
            hours: run.hours(),
            accuracy_top1: top1,
            accuracy_top5: top5,
            run_id: run.run_id.clone(),
            seed: run.seed,
        });
    }
    Ok((rows, records))
}

fn eval_one(
    cfg: &ExperimentConfig,
    ctx: &EvalContext,
    out: &Path,
    run: &PlannedRun,
    trained: RunManifest,
) -> Result<RunManifest> {
    let started = now_unix();
    let ckpt = Checkpoint::load(&out.join(&trained.checkpoint_path))?;
    let (rows, records) = evaluate_checkpoint(cfg, ctx, run, &ckpt)?;
    write_eval_csv(&out.join(rel(run, EVAL_FILE)), &records)?;
    write_results_csv(&out.join(rel(run, ROWS_FILE)), &rows)?;
    log::info!("evaluated {}", run.run_id);
    let mut metrics_paths = trained.metrics_paths.clone();
    metrics_paths.extend([rel(run, EVAL_FILE), rel(run, ROWS_FILE)]);
    let m = RunManifest {
        stage: RunStage::Complete,
        metrics_paths,
        started_unix_s: trained.started_unix_s.min(started),
        finished_unix_s: now_unix(),
        ..trained
    };
    write_manifest(out, run, &m)?;
    Ok(m)
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| ExperimentError::Io {
        path: path.to_path_buf(),
        source: e.into_error(),
    })?;
    write_atomic(path, &bytes)
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

fn execute(cfg: &ExperimentConfig, do_train: bool, do_eval: bool) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let out = prepare_output(cfg)?;
    let hash = cfg.hash();
    let plan = plan_runs(cfg)?;
    let mut world = None;
    let mut ctx = None;
    let mut manifests = Vec::with_capacity(plan.len());
    let (mut trained, mut evaluated) = (0, 0);
    for run in &plan {
        let mut m = read_manifest(&out, run, &hash)?;
        if m.is_none() {
            if !do_train {
                if do_eval {
                    return Err(ExperimentError::NotTrained(run.run_id.clone()));
                }
                continue;
            }
            if world.is_none() {
                world = Some(build_world(&cfg.world_spec())?);
            }
            m = Some(train_one(
                cfg,
                world.as_ref().expect("built above"),
                &out,
                run,
            )?);
            trained += 1;
        }
        let mut m = m.expect("trained above");
        if do_eval && m.stage != RunStage::Complete {
            if ctx.is_none() {
                ctx = Some(EvalContext::build(cfg)?);
            }
            m = eval_one(cfg, ctx.as_ref().expect("built above"), &out, run, m)?;
            evaluated += 1;
        }
        manifests.push(m);
    }
    let mut rows = Vec::new();
    for (run, m) in plan.iter().zip(&manifests) {
        if m.stage == RunStage::Complete {
            rows.extend(read_results_csv(&out.join(rel(run, ROWS_FILE)))?);
        }
    }
    let results_path = out.join(RESULTS_FILE);
    if do_eval {
        write_results_csv(&results_path, &rows)?;
    }
    Ok(ExperimentOutcome {
        rows,
        manifests,
        trained,
        evaluated,
        results_path,
    })
}

/// Trains and evaluates every job, skipping those whose manifest already
/// records completion, then rewrites the results CSV from all completed
/// runs in plan order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    execute(cfg, true, true)
}

/// Trains every job that has no checkpoint yet.
pub fn train_runs(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    execute(cfg, true, false)
}

/// Evaluates every trained job; fails if any job is untrained.
pub fn eval_runs(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    execute(cfg, false, true)
}
