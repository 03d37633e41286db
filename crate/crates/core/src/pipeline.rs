//! Staged training run and the experiment sweeps built on it.
//!
//! Stages run in order: non-private warm start on the public partition
//! (accumulating squared gradients), optional layer freezing, DP
//! pre-training on the full dataset, and a public fine-tune probe that only
//! sees the pre-trained checkpoint. Every stage writes a checkpoint.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{account, default_orders, delta_rule, AccountingResult, MechanismParams};
use crate::bestrq::{example_loss, per_example_grads, prepare_examples, Codebook, SslExample, SynthSpec};
use crate::checkpoint::{checkpoint_load, checkpoint_save};
use crate::config::RunConfig;
use crate::dp::{aggregate_and_noise, clip_fraction, ClipMode, Clipper};
use crate::error::{Error, Result};
use crate::freeze::{apply_freeze, FreezePlan, SqGradAccumulator};
use crate::model::EncoderConfig;
use crate::optim::{dp_adam_step, AdamState};
use crate::params::{GradTree, ParamTree};
use crate::probe::{train_probe, ProbeReport, ProbeSpec, ProbeTask};
use crate::rng::{stream, Domain};

pub const METRICS_HEADER: &str = "stage,step,loss,clip_fraction,eval,wallclock";
pub const DP_STEPS_HEADER: &str = "step,loss,clip_fraction,grad_norm_mean,noise_multiplier,mode";
pub const FREEZE_TOP_LABEL: &str = "Freeze P";
pub const FREEZE_REST_LABEL: &str = "Freeze 1\u{2212}P";
pub const NO_FREEZE_LABEL: &str = "No Freezing";
/// Freeze fractions of the freeze sweep.
pub const FREEZE_GRID: [f64; 4] = [0.00015, 0.001, 0.01, 0.1];
/// Noise multipliers of the noise tolerance sweep.
pub const NOISE_GRID: [f64; 6] = [0.0, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    WarmStart,
    DpPretrain,
    Finetune,
}

impl Stage {
    pub fn label(&self) -> &'static str {
        match self {
            Stage::WarmStart => "warm_start",
            Stage::DpPretrain => "dp_pretrain",
            Stage::Finetune => "finetune",
        }
    }

    fn tag(&self) -> u64 {
        *self as u64 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub stage: Stage,
    pub step: usize,
    pub loss: f64,
    pub clip_fraction: Option<f64>,
    /// Held-out masked-prediction loss, or probe test loss for fine-tuning.
    pub eval: Option<f64>,
    pub wallclock: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.stage.label(),
            self.step,
            self.loss,
            opt(self.clip_fraction),
            opt(self.eval),
            self.wallclock
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpStepRow {
    pub step: usize,
    pub loss: f64,
    pub clip_fraction: f64,
    /// Mean pre-clip norm over the minibatch.
    pub grad_norm_mean: f64,
    pub noise_multiplier: f64,
    pub mode: ClipMode,
}

impl DpStepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.loss,
            self.clip_fraction,
            self.grad_norm_mean,
            self.noise_multiplier,
            self.mode.label()
        )
    }
}

/// File layout of one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }

    pub fn warm_start_ckpt(&self) -> PathBuf {
        self.dir.join("warm_start.ckpt")
    }

    pub fn pretrain_ckpt(&self) -> PathBuf {
        self.dir.join("dp_pretrain.ckpt")
    }

    pub fn finetune_ckpt(&self) -> PathBuf {
        self.dir.join("finetune.ckpt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn dp_steps(&self) -> PathBuf {
        self.dir.join("dp_steps.csv")
    }

    pub fn freeze_report(&self) -> PathBuf {
        self.dir.join("freeze_report.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.txt")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub out_dir: PathBuf,
    /// Held-out masked-prediction loss after warm start.
    pub warm_start_eval: Option<f64>,
    /// Held-out masked-prediction loss after DP pre-training.
    pub pretrain_eval: f64,
    pub probe: ProbeReport,
    pub freeze: Option<FreezePlan>,
    pub trainable_params: usize,
    /// Spent privacy of the toy run; `None` without noise.
    pub privacy: Option<AccountingResult>,
}

struct Clock {
    start: Instant,
    enabled: bool,
}

impl Clock {
    fn new(enabled: bool) -> Self {
        Self {
            start: Instant::now(),
            enabled,
        }
    }

    fn now(&self) -> f64 {
        if self.enabled {
            self.start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }
}

struct DivergenceGuard {
    factor: f64,
    patience: usize,
    initial: Option<f64>,
    run: usize,
}

impl DivergenceGuard {
    fn new(cfg: &RunConfig) -> Self {
        Self {
            factor: cfg.divergence.factor,
            patience: cfg.divergence.patience,
            initial: None,
            run: 0,
        }
    }

    fn observe(&mut self, loss: f64, stage: Stage, step: usize) -> Result<()> {
        let init = *self.initial.get_or_insert(loss);
        if !loss.is_finite() || loss > self.factor * init {
            self.run += 1;
        } else {
            self.run = 0;
        }
        if self.run >= self.patience {
            return Err(diverged(stage, step));
        }
        Ok(())
    }
}

fn diverged(stage: Stage, step: usize) -> Error {
    Error::Diverged {
        stage: stage.label().into(),
        step,
    }
}

/// Non-finite values during training count as divergence.
fn numeric_as_divergence(e: Error, stage: Stage, step: usize) -> Error {
    match e {
        Error::Numeric { .. } => diverged(stage, step),
        e => e,
    }
}

/// Shared task pieces: quantizer and held-out evaluation examples.
struct Task {
    codebook: Codebook,
    eval: Vec<SslExample<f64>>,
}

impl Task {
    fn new(cfg: &RunConfig) -> Result<Self> {
        let codebook = Codebook::random(
            cfg.data.d_feat,
            cfg.codebook.code_dim,
            cfg.model.num_codes,
            cfg.codebook.seed,
        )?;
        // Ids past the training range never enter a minibatch.
        let n = cfg.data.num_examples as u64;
        let ids: Vec<u64> = (n..n + cfg.eval_examples as u64).collect();
        let batch = cfg.data.batch::<f64>(&ids)?;
        let seed = stream(cfg.seed, Domain::Mask, u64::MAX, 0).next_u64();
        let eval = prepare_examples(&batch, &codebook, &cfg.mask, seed)?;
        Ok(Self { codebook, eval })
    }

    fn eval_loss(&self, tree: &ParamTree, model: &EncoderConfig) -> Result<f64> {
        let losses: Vec<f64> = self
            .eval
            .par_iter()
            .map(|ex| example_loss(tree, model, ex))
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    fn minibatch(&self, cfg: &RunConfig, ids: &[u64], stage: Stage, step: usize) -> Result<Vec<SslExample<f64>>> {
        let batch = cfg.data.batch::<f64>(ids)?;
        let seed = stream(cfg.seed, Domain::Mask, stage.tag(), step as u64).next_u64();
        prepare_examples(&batch, &self.codebook, &cfg.mask, seed)
    }
}

/// Seeded choice of the public example ids, in ascending order.
pub fn public_ids(cfg: &RunConfig) -> Vec<u64> {
    let mut rng = stream(cfg.seed, Domain::Partition, 0, 0);
    let mut ids: Vec<u64> = index::sample(&mut rng, cfg.data.num_examples, cfg.public_count())
        .into_iter()
        .map(|i| i as u64)
        .collect();
    ids.sort_unstable();
    ids
}

fn draw(pool: &[u64], b: usize, seed: u64, stage: Stage, step: usize) -> Vec<u64> {
    let mut rng = stream(seed, Domain::Sampling, stage.tag(), step as u64);
    if b <= pool.len() {
        index::sample(&mut rng, pool.len(), b)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..b).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    }
}

fn is_eval_step(step: usize, last: usize, every: usize) -> bool {
    step == last || (every > 0 && step % every == 0)
}

/// Result of the warm-start stage.
pub struct WarmStart {
    pub tree: ParamTree,
    pub acc: SqGradAccumulator,
    pub optimizer: AdamState,
    pub eval: f64,
}

fn warm_start(cfg: &RunConfig, task: &Task, rows: &mut Vec<MetricsRow>, clock: &Clock) -> Result<WarmStart> {
    let stage = Stage::WarmStart;
    let mut tree: ParamTree = cfg.model.init(cfg.seed)?;
    let mut acc = SqGradAccumulator::new(&tree);
    let mut opt = AdamState::new(cfg.warm_start_optim, &tree);
    let pool = public_ids(cfg);
    let mut guard = DivergenceGuard::new(cfg);
    let last = cfg.schedule.warm_start_steps;
    let mut eval = f64::NAN;
    for step in 1..=last {
        let ids = draw(&pool, cfg.schedule.warm_start_batch, cfg.seed, stage, step);
        let examples = task.minibatch(cfg, &ids, stage, step)?;
        let out = per_example_grads(&tree, &cfg.model, &examples).map_err(|e| numeric_as_divergence(e, stage, step))?;
        let loss = out.iter().map(|(l, _)| *l).sum::<f64>() / out.len() as f64;
        let grads: Vec<GradTree> = out.into_iter().map(|(_, g)| g).collect();
        let g = GradTree::mean(&grads)?;
        acc.accumulate(&g)?;
        opt.step(&mut tree, &g)?;
        guard.observe(loss, stage, step)?;
        let e = if is_eval_step(step, last, cfg.schedule.eval_every) {
            eval = task.eval_loss(&tree, &cfg.model)?;
            Some(eval)
        } else {
            None
        };
        rows.push(MetricsRow {
            stage,
            step,
            loss,
            clip_fraction: None,
            eval: e,
            wallclock: clock.now(),
        });
    }
    Ok(WarmStart {
        tree,
        acc,
        optimizer: opt,
        eval,
    })
}

fn dp_pretrain(
    cfg: &RunConfig,
    task: &Task,
    mut tree: ParamTree,
    mut opt: AdamState,
    rows: &mut Vec<MetricsRow>,
    dp_rows: &mut Vec<DpStepRow>,
    clock: &Clock,
) -> Result<(ParamTree, f64)> {
    let stage = Stage::DpPretrain;
    let clipper = Clipper::new(cfg.clip, &tree)?;
    let bounds = clipper.bounds();
    let pool: Vec<u64> = (0..cfg.data.num_examples as u64).collect();
    let b = cfg.schedule.dp_batch;
    let mut guard = DivergenceGuard::new(cfg);
    let last = cfg.schedule.dp_steps;
    let mut eval = f64::NAN;
    for step in 1..=last {
        let ids = draw(&pool, b, cfg.seed, stage, step);
        let examples = task.minibatch(cfg, &ids, stage, step)?;
        let out = per_example_grads(&tree, &cfg.model, &examples).map_err(|e| numeric_as_divergence(e, stage, step))?;
        let loss = out.iter().map(|(l, _)| *l).sum::<f64>() / out.len() as f64;
        let clipped = out.iter().map(|(_, g)| clipper.clip(g)).collect::<Result<Vec<_>>>()?;
        let norms: Vec<Vec<f64>> = clipped.iter().map(|c| c.norms.clone()).collect();
        let frac = clip_fraction(&norms, &bounds)?;
        let norm_mean = clipped.iter().map(|c| c.total_norm).sum::<f64>() / b as f64;
        let grads: Vec<GradTree> = clipped.into_iter().map(|c| c.grad).collect();
        let noisy = aggregate_and_noise(&grads, clipper.bound(), &cfg.noise, step as u64, b)?;
        dp_adam_step(&mut opt, &mut tree, &noisy)?;
        if !tree.is_finite() {
            return Err(diverged(stage, step));
        }
        guard.observe(loss, stage, step)?;
        let e = if is_eval_step(step, last, cfg.schedule.eval_every) {
            eval = task.eval_loss(&tree, &cfg.model)?;
            Some(eval)
        } else {
            None
        };
        rows.push(MetricsRow {
            stage,
            step,
            loss,
            clip_fraction: Some(frac),
            eval: e,
            wallclock: clock.now(),
        });
        dp_rows.push(DpStepRow {
            step,
            loss,
            clip_fraction: frac,
            grad_norm_mean: norm_mean,
            noise_multiplier: cfg.noise.multiplier,
            mode: cfg.clip.mode,
        });
    }
    Ok((tree, eval))
}

/// Fine-tune probe on a saved checkpoint. Only the checkpoint, the encoder
/// shape and the public probe settings reach this stage.
pub fn probe_stage(
    checkpoint: &Path,
    model: &EncoderConfig,
    probe: &ProbeSpec,
    frames: usize,
    ar_coef: f64,
) -> Result<(ProbeReport, ParamTree)> {
    let (tree, _) = checkpoint_load::<f64>(checkpoint)?;
    let shape = SynthSpec {
        seed: probe.seed,
        num_examples: probe.num_train + probe.num_test,
        frames,
        d_feat: model.d_feat,
        ar_coef,
    };
    let task = ProbeTask::synthetic(probe, &shape)?;
    train_probe(&tree, model, &task, probe)
}

fn write_lines(path: &Path, header: &str, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn privacy(cfg: &RunConfig) -> Result<Option<AccountingResult>> {
    if cfg.noise.multiplier == 0.0 {
        return Ok(None);
    }
    let n = cfg.data.num_examples as f64;
    let params = MechanismParams::from_sizes(
        cfg.schedule.dp_batch as f64,
        n,
        cfg.noise.multiplier,
        cfg.schedule.dp_steps as u64,
    );
    Ok(Some(account(&params, delta_rule(n)?, &default_orders())?))
}

fn summary_text(cfg: &RunConfig, status: &str, report: Option<&RunReport>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "status: {status}");
    let _ = writeln!(s, "seed: {}", cfg.seed);
    let _ = writeln!(s, "clip: {} C={}", cfg.clip.mode.label(), cfg.clip.bound);
    let _ = writeln!(s, "noise_multiplier: {}", cfg.noise.multiplier);
    let _ = writeln!(s, "dp_batch: {}", cfg.schedule.dp_batch);
    let _ = writeln!(s, "dp_steps: {}", cfg.schedule.dp_steps);
    if let Some(r) = report {
        let _ = writeln!(s, "trainable_params: {}", r.trainable_params);
        if let Some(plan) = &r.freeze {
            let _ = writeln!(
                s,
                "freeze: p={} freeze_top={} frozen={}",
                plan.p,
                plan.freeze_top,
                plan.frozen_set.join(";")
            );
        }
        if let Some(e) = r.warm_start_eval {
            let _ = writeln!(s, "warm_start_eval_loss: {e}");
        }
        let _ = writeln!(s, "dp_pretrain_eval_loss: {}", r.pretrain_eval);
        let _ = writeln!(s, "probe_accuracy: {}", r.probe.accuracy);
        let _ = writeln!(s, "probe_test_loss: {}", r.probe.test_loss);
        match &r.privacy {
            Some(p) => {
                let _ = writeln!(
                    s,
                    "epsilon: {} (delta={}, order={})",
                    p.epsilon, p.delta, p.optimal_order
                );
            }
            None => {
                let _ = writeln!(s, "epsilon: inf");
            }
        }
    }
    s
}

fn finish<T>(
    cfg: &RunConfig,
    art: &Artifacts,
    rows: &[MetricsRow],
    dp_rows: &[DpStepRow],
    result: Result<T>,
) -> Result<T> {
    write_lines(&art.metrics(), METRICS_HEADER, rows.iter().map(MetricsRow::csv_line))?;
    write_lines(
        &art.dp_steps(),
        DP_STEPS_HEADER,
        dp_rows.iter().map(DpStepRow::csv_line),
    )?;
    if let Err(Error::Diverged { stage, step }) = &result {
        std::fs::write(
            art.summary(),
            summary_text(cfg, &format!("diverged in {stage} at step {step}"), None),
        )?;
    }
    result
}

/// Freeze analysis, DP pre-training and the probe, starting from a
/// warm-started model.
fn private_stages(
    cfg: &RunConfig,
    task: &Task,
    art: &Artifacts,
    ws: WarmStart,
    rows: &mut Vec<MetricsRow>,
    dp_rows: &mut Vec<DpStepRow>,
    clock: &Clock,
) -> Result<RunReport> {
    let mut tree = ws.tree;
    let mut plan = None;
    if cfg.freeze.enabled {
        let p = FreezePlan::from_accumulator(&ws.acc, &tree, cfg.freeze.p, cfg.freeze.freeze_top)?;
        p.write_report(&art.freeze_report())?;
        tree = apply_freeze(&tree, &p)?;
        plan = Some(p);
    }
    if tree.trainable_count() == 0 {
        return Err(Error::Config("every layer is frozen".into()));
    }
    let mut opt = ws.optimizer;
    opt.config = cfg.dp_optim;
    if cfg.freeze.reset_moments {
        opt.reset(&tree);
    } else {
        opt.retain_trainable(&tree);
    }
    let (tree, pretrain_eval) = dp_pretrain(cfg, task, tree, opt, rows, dp_rows, clock)?;
    checkpoint_save(&tree, None, &art.pretrain_ckpt())?;

    let (probe, tuned) = probe_stage(
        &art.pretrain_ckpt(),
        &cfg.model,
        &cfg.probe,
        cfg.data.frames,
        cfg.data.ar_coef,
    )?;
    checkpoint_save(&tuned, None, &art.finetune_ckpt())?;
    rows.push(MetricsRow {
        stage: Stage::Finetune,
        step: cfg.probe.steps,
        loss: probe.train_loss,
        clip_fraction: None,
        eval: Some(probe.test_loss),
        wallclock: clock.now(),
    });
    Ok(RunReport {
        out_dir: art.dir.clone(),
        warm_start_eval: None,
        pretrain_eval,
        probe,
        freeze: plan,
        trainable_params: tree.trainable_count(),
        privacy: privacy(cfg)?,
    })
}

fn prepare_dir(cfg: &RunConfig) -> Result<Artifacts> {
    cfg.validate()?;
    let art = Artifacts::new(&cfg.out_dir);
    std::fs::create_dir_all(&art.dir)?;
    cfg.save(&art.config())?;
    Ok(art)
}

/// Runs every stage and writes checkpoints, `metrics.csv`, `dp_steps.csv`
/// and `summary.txt` into `cfg.out_dir`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport> {
    let art = prepare_dir(cfg)?;
    let task = Task::new(cfg)?;
    let clock = Clock::new(cfg.record_wallclock);
    let mut rows = Vec::new();
    let mut dp_rows = Vec::new();
    let result = (|| {
        let ws = warm_start(cfg, &task, &mut rows, &clock)?;
        checkpoint_save(&ws.tree, Some(&ws.acc), &art.warm_start_ckpt())?;
        let ws_eval = ws.eval;
        let mut report = private_stages(cfg, &task, &art, ws, &mut rows, &mut dp_rows, &clock)?;
        report.warm_start_eval = Some(ws_eval);
        Ok(report)
    })();
    let report = finish(cfg, &art, &rows, &dp_rows, result)?;
    std::fs::write(art.summary(), summary_text(cfg, "completed", Some(&report)))?;
    Ok(report)
}

/// Runs freeze analysis, DP pre-training and the probe from a saved
/// warm-start checkpoint and its accumulator sidecar. Adam moments start
/// fresh since checkpoints do not carry them.
pub fn run_from_warm_start(cfg: &RunConfig, warm_start_ckpt: &Path) -> Result<RunReport> {
    let art = prepare_dir(cfg)?;
    let (tree, acc) = checkpoint_load::<f64>(warm_start_ckpt)?;
    cfg.model.check_tree(&tree)?;
    let acc = acc.ok_or_else(|| Error::Format {
        path: warm_start_ckpt.to_path_buf(),
        reason: "missing squared-gradient sidecar".into(),
    })?;
    let task = Task::new(cfg)?;
    let clock = Clock::new(cfg.record_wallclock);
    let ws = WarmStart {
        optimizer: AdamState::new(cfg.dp_optim, &tree),
        tree,
        acc,
        eval: f64::NAN,
    };
    let mut rows = Vec::new();
    let mut dp_rows = Vec::new();
    let result = private_stages(cfg, &task, &art, ws, &mut rows, &mut dp_rows, &clock);
    let report = finish(cfg, &art, &rows, &dp_rows, result)?;
    std::fs::write(art.summary(), summary_text(cfg, "completed", Some(&report)))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    Diverged,
    Skipped(String),
}

impl std::fmt::Display for RowStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RowStatus::Ok => f.write_str("ok"),
            RowStatus::Diverged => f.write_str("diverged"),
            RowStatus::Skipped(why) => write!(f, "skipped ({why})"),
        }
    }
}

/// Outcome of one sweep point. Losses are NaN unless the run completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub status: RowStatus,
    pub eval_loss: f64,
    pub probe_accuracy: f64,
    pub probe_loss: f64,
}

impl SweepResult {
    fn from_run(r: Result<RunReport>) -> Result<Self> {
        let failed = |status| Self {
            status,
            eval_loss: f64::NAN,
            probe_accuracy: f64::NAN,
            probe_loss: f64::NAN,
        };
        match r {
            Ok(r) => Ok(Self {
                status: RowStatus::Ok,
                eval_loss: r.pretrain_eval,
                probe_accuracy: r.probe.accuracy,
                probe_loss: r.probe.test_loss,
            }),
            Err(Error::Diverged { .. }) => Ok(failed(RowStatus::Diverged)),
            Err(Error::Config(why)) => Ok(failed(RowStatus::Skipped(why))),
            Err(e) => Err(e),
        }
    }

    fn csv(&self) -> String {
        format!(
            "{},{},{},{}",
            self.status, self.eval_loss, self.probe_accuracy, self.probe_loss
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub noise: f64,
    pub result: SweepResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweep {
    pub rows: Vec<NoiseRow>,
}

impl NoiseSweep {
    /// Adjacent pairs (in noise order) where eval loss falls as noise rises.
    /// A diverged row counts as the worst possible loss.
    pub fn inversions(&self) -> usize {
        let loss = |r: &NoiseRow| match r.result.status {
            RowStatus::Diverged => f64::INFINITY,
            _ => r.result.eval_loss,
        };
        self.rows.windows(2).filter(|w| loss(&w[1]) < loss(&w[0])).count()
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("noise,status,eval_loss,probe_accuracy,probe_loss\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{}", r.noise, r.result.csv());
        }
        s
    }
}

/// One full run per noise multiplier, each in `out_dir/noise_<i>`. Rows come
/// back sorted by noise.
pub fn noise_tolerance_sweep(cfg: &RunConfig, noises: &[f64]) -> Result<NoiseSweep> {
    let mut sorted = noises.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(sorted.len());
    for (i, &z) in sorted.iter().enumerate() {
        let mut c = cfg.clone();
        c.noise.multiplier = z;
        c.out_dir = cfg.out_dir.join(format!("noise_{i}"));
        rows.push(NoiseRow {
            noise: z,
            result: SweepResult::from_run(run_pipeline(&c))?,
        });
    }
    let sweep = NoiseSweep { rows };
    std::fs::write(cfg.out_dir.join("noise_sweep.csv"), sweep.csv())?;
    Ok(sweep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeRow {
    /// `None` for the no-freezing baseline.
    pub p: Option<f64>,
    pub direction: String,
    pub frozen_layers: usize,
    pub result: SweepResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeSweep {
    pub rows: Vec<FreezeRow>,
}

impl FreezeSweep {
    pub fn baseline(&self) -> Option<&FreezeRow> {
        self.rows.iter().find(|r| r.p.is_none())
    }

    /// Completed freeze-top row with the lowest eval loss.
    pub fn best_freeze_top(&self) -> Option<&FreezeRow> {
        self.rows
            .iter()
            .filter(|r| r.direction == FREEZE_TOP_LABEL && r.result.status == RowStatus::Ok)
            .min_by(|a, b| a.result.eval_loss.total_cmp(&b.result.eval_loss))
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("p,direction,frozen_layers,status,eval_loss,probe_accuracy,probe_loss\n");
        for r in &self.rows {
            let p = r.p.map(|p| p.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{p},{},{},{}", r.direction, r.frozen_layers, r.result.csv());
        }
        s
    }
}

/// Runs the no-freezing baseline and both freeze directions for each `p`,
/// all from one warm start. Outputs go under `out_dir`.
pub fn freeze_sweep(cfg: &RunConfig, ps: &[f64]) -> Result<FreezeSweep> {
    let mut ws_cfg = cfg.clone();
    ws_cfg.out_dir = cfg.out_dir.join("warm_start");
    std::fs::create_dir_all(&ws_cfg.out_dir)?;
    ws_cfg.validate()?;
    let art = Artifacts::new(&ws_cfg.out_dir);
    let task = Task::new(&ws_cfg)?;
    let mut rows_ws = Vec::new();
    let clock = Clock::new(cfg.record_wallclock);
    let ws = warm_start(&ws_cfg, &task, &mut rows_ws, &clock)?;
    write_lines(&art.metrics(), METRICS_HEADER, rows_ws.iter().map(MetricsRow::csv_line))?;
    let ckpt = art.warm_start_ckpt();
    checkpoint_save(&ws.tree, Some(&ws.acc), &ckpt)?;

    let mut settings = vec![(None, NO_FREEZE_LABEL)];
    for &p in ps {
        settings.push((Some(p), FREEZE_TOP_LABEL));
        settings.push((Some(p), FREEZE_REST_LABEL));
    }
    let mut rows = Vec::with_capacity(settings.len());
    for (i, (p, direction)) in settings.into_iter().enumerate() {
        let mut c = cfg.clone();
        c.out_dir = cfg.out_dir.join(format!("freeze_{i}"));
        c.freeze.enabled = p.is_some();
        c.freeze.reset_moments = true;
        if let Some(p) = p {
            c.freeze.p = p;
            c.freeze.freeze_top = direction == FREEZE_TOP_LABEL;
        }
        let run = run_from_warm_start(&c, &ckpt);
        let frozen_layers = match &run {
            Ok(r) => r.freeze.as_ref().map_or(0, |f| f.frozen_set.len()),
            Err(_) => cfg.model.layer_names().len(),
        };
        rows.push(FreezeRow {
            p,
            direction: direction.to_string(),
            frozen_layers,
            result: SweepResult::from_run(run)?,
        });
    }
    let sweep = FreezeSweep { rows };
    std::fs::write(cfg.out_dir.join("freeze_sweep.csv"), sweep.csv())?;
    Ok(sweep)
}
