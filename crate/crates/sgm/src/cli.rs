//! Command-line surface. Every command writes a run manifest next to its
//! outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sgm_core::data::{compute_norm_stats, generate_cohort, split_cohort, OrganSchema, ParticipantRecord, Splits};
use sgm_core::eval::{
    finetune, leave_one_out_importance, organ_dropout_eval, pairwise_dropout_heatmap, protocol_grid,
    saliency_trajectory, summarize, MetricsRow, Protocol,
};
use sgm_core::model::Encoder;
use sgm_core::objectives::Objective;
use sgm_core::rng::{stream, Purpose};
use sgm_core::sgm::SaliencyProxy;
use sgm_core::tensor::ParamStore;
use sgm_core::train::{
    MaskingStrategy, NoopObserver, SaliencySummary, StepStats, TrainObserver, Trainer, TrainerState,
};

use crate::checkpoint::{load_checkpoint, save_checkpoint, store_hash, Checkpoint, CheckpointMeta};
use crate::config::{EvalConfig, GenDataConfig, PretrainConfig};
use crate::data_dir::{DataDir, COHORT_FILE, NORM_FILE, SCHEMA_FILE, SPLITS_FILE};
use crate::error::{Error, Result};
use crate::formats::{write_cohort, write_norm_stats, write_schema, write_splits};
use crate::fsio::{parse_json, read_to_string, write_atomic, write_json};
use crate::manifest::{RunManifest, RunRecorder};
use crate::reports::{write_heatmap, write_importance, write_metrics, write_summary, write_trajectory, TrainLogs};

#[derive(Debug, Parser)]
#[command(
    name = "sgm",
    version,
    about = "Multi-organ self-supervised pre-training with saliency-guided masking"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort, normalization statistics and splits.
    GenData(GenDataArgs),
    /// Pre-train an encoder.
    Pretrain(PretrainArgs),
    /// Evaluate checkpoints with probing, fine-tuning and organ dropout.
    Eval(EvalArgs),
    /// Time SGM against random masking on identical weights and batches.
    BenchOverhead(BenchArgs),
    /// Sweep mask ratio, temperature and probe-training fraction.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Organ schema (defaults to the desk-scale schema).
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub gen_config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the cohort seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Sgm,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Dino,
    Ntxent,
    Vicreg,
    Barlow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProxyArg {
    A1,
    A2,
    A3,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    #[arg(long, value_enum)]
    pub proxy: Option<ProxyArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// One or more checkpoint directories.
    #[arg(long = "checkpoint", alias = "checkpoints", required = true, value_delimiter = ',')]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated protocols; overrides the config.
    #[arg(long, value_delimiter = ',')]
    pub protocols: Option<Vec<String>>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 50)]
    pub warmup: usize,
    /// Pre-training config supplying batch size and hyperparameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Strategy timed against SGM.
    #[arg(long, value_enum, default_value = "random")]
    pub baseline: StrategyArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub eval_config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.6, 0.7])]
    pub r_mask: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.25, 1.0, 5.0])]
    pub tau: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.25, 0.5, 1.0])]
    pub fractions: Vec<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

pub fn run(cli: Cli) -> Result<RunManifest> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Pretrain(a) => pretrain(&a),
        Command::Eval(a) => eval(&a),
        Command::BenchOverhead(a) => bench_overhead(&a).map(|(m, _)| m),
        Command::Ablate(a) => ablate(&a),
    }
}

/// Reads a config file, or the config snapshot inside a run manifest.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = read_to_string(path)?;
    let value: Value = parse_json(path, &text)?;
    match value {
        Value::Object(ref m) if m.contains_key("command") && m.contains_key("config") => {
            parse_json(path, &m["config"].to_string())
        }
        _ => parse_json(path, &text),
    }
}

fn snapshot<T: Serialize>(cfg: &T) -> Value {
    serde_json::to_value(cfg).expect("serializable config")
}

pub fn gen_data(a: &GenDataArgs) -> Result<RunManifest> {
    let schema = match &a.schema {
        Some(p) => crate::formats::read_schema(p)?,
        None => OrganSchema::desk(),
    };
    let mut cfg: GenDataConfig = load_config(a.gen_config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.cohort.seed = seed;
    }
    let mut inputs: Vec<PathBuf> = a.schema.iter().cloned().collect();
    inputs.extend(a.gen_config.iter().cloned());
    let mut run = RunRecorder::start("gen-data", snapshot(&cfg), inputs, cfg.cohort.seed)?;

    let cohort = generate_cohort(&cfg.cohort, &schema)?;
    let splits = split_cohort(&cohort.records, cfg.split, cfg.cohort.seed, &cfg.split_task)?;
    let pre = Splits::select(&cohort.records, &splits.pretrain);
    let norm = compute_norm_stats(&pre, &schema)?;

    let out = &a.out;
    let path = |name: &str| out.join(name);
    write_schema(&path(SCHEMA_FILE), &schema)?;
    write_cohort(&path(COHORT_FILE), &cohort.records, &schema)?;
    write_norm_stats(&path(NORM_FILE), &norm, &schema)?;
    write_splits(&path(SPLITS_FILE), &splits, &cohort.records)?;
    for name in [SCHEMA_FILE, COHORT_FILE, NORM_FILE, SPLITS_FILE] {
        run.output(path(name));
    }
    log::info!("wrote {} participants to {}", cohort.records.len(), out.display());
    run.finish(out)
}

fn resolve_pretrain(a: &PretrainArgs) -> Result<PretrainConfig> {
    let mut cfg: PretrainConfig = load_config(a.config.as_deref())?;
    let t = &mut cfg.train;
    if let Some(s) = a.strategy {
        t.strategy = match s {
            StrategyArg::Sgm => MaskingStrategy::Sgm,
            StrategyArg::Random => MaskingStrategy::Random,
        };
    }
    if let Some(o) = a.objective {
        let name = match o {
            ObjectiveArg::Dino => "dino",
            ObjectiveArg::Ntxent => "ntxent",
            ObjectiveArg::Vicreg => "vicreg",
            ObjectiveArg::Barlow => "barlow",
        };
        t.objective = Objective::from_name(name).expect("known objective");
    }
    if let Some(p) = a.proxy {
        t.proxy = match p {
            ProxyArg::A1 => SaliencyProxy::LastLayer,
            ProxyArg::A2 => SaliencyProxy::AllLayerAverage,
            ProxyArg::A3 => SaliencyProxy::Rollout,
        };
    }
    if let Some(seed) = a.seed {
        t.seed = seed;
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    t.validate()?;
    cfg.model.validate()?;
    Ok(cfg)
}

/// Builds the encoder a pre-training config describes.
pub fn build_encoder(cfg: &PretrainConfig, schema: &OrganSchema) -> Result<(Encoder, ParamStore)> {
    let head = cfg.train.objective.head_spec(cfg.model.proj_dim, cfg.model.head_hidden);
    Ok(Encoder::new(cfg.model, schema.clone(), head, cfg.train.seed)?)
}

struct RunObserver<'a> {
    encoder: &'a Encoder,
    logs: TrainLogs,
    ckpt_dir: PathBuf,
    every: usize,
    written: Vec<PathBuf>,
}

impl TrainObserver for RunObserver<'_> {
    fn on_step(&mut self, s: &StepStats) -> std::result::Result<(), String> {
        self.logs.step(s).map_err(|e| e.to_string())
    }

    fn on_saliency(&mut self, s: &SaliencySummary) -> std::result::Result<(), String> {
        self.logs.saliency(s).map_err(|e| e.to_string())
    }

    fn on_epoch_end(&mut self, epoch: usize, state: &TrainerState) -> std::result::Result<(), String> {
        self.logs.flush().map_err(|e| e.to_string())?;
        if self.every > 0 && epoch.is_multiple_of(self.every) {
            let dir = self.ckpt_dir.join(format!("epoch_{epoch:04}"));
            let meta = CheckpointMeta {
                step: state.step,
                epoch,
            };
            save_checkpoint(&dir, self.encoder, &state.teacher, Some(meta)).map_err(|e| e.to_string())?;
            self.written.push(dir);
        }
        Ok(())
    }
}

/// Trains on the pretrain split and writes checkpoints and logs under
/// `out`. The final teacher lands in `out/final`.
pub fn pretrain(a: &PretrainArgs) -> Result<RunManifest> {
    let cfg = resolve_pretrain(a)?;
    let data = DataDir::load(&a.data)?;
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.config.iter().cloned());
    let mut run = RunRecorder::start("pretrain", snapshot(&cfg), inputs, cfg.train.seed)?;

    let (encoder, init) = build_encoder(&cfg, &data.schema)?;
    let records = data.pretrain();
    std::fs::create_dir_all(&a.out).map_err(Error::io(&a.out))?;
    let mut obs = RunObserver {
        encoder: &encoder,
        logs: TrainLogs::create(&a.out, &data.schema)?,
        ckpt_dir: a.out.join("checkpoints"),
        every: cfg.checkpoint_every,
        written: Vec::new(),
    };
    if cfg.checkpoint_every > 0 {
        let dir = obs.ckpt_dir.join("epoch_0000");
        save_checkpoint(&dir, &encoder, &init, Some(CheckpointMeta::default()))?;
        obs.written.push(dir);
    }
    let mut trainer = Trainer::new(&encoder, init, &records, cfg.train.clone())?;
    let result = trainer.run(&mut obs);
    obs.logs.flush()?;
    if let Err(e) = result {
        log::error!("training stopped: {e}; last checkpoint kept");
        return Err(e.into());
    }
    let state = trainer.into_state();
    let final_dir = a.out.join("final");
    let meta = CheckpointMeta {
        step: state.step,
        epoch: state.epoch,
    };
    save_checkpoint(&final_dir, &encoder, &state.teacher, Some(meta))?;
    write_atomic(&final_dir.join("params.sha256"), store_hash(&state.teacher).as_bytes())?;
    for p in obs.written.drain(..) {
        run.output(p);
    }
    run.output(a.out.join("loss_log.csv"));
    run.output(a.out.join("saliency_log.jsonl"));
    run.output(final_dir);
    run.finish(&a.out)
}

fn check_schema(ckpt: &Checkpoint, data: &DataDir) -> Result<()> {
    if ckpt.encoder.schema() != &data.schema {
        return Err(Error::SchemaMismatch(format!(
            "checkpoint {} was built for a different organ schema than {}",
            ckpt.path.display(),
            data.path.display()
        )));
    }
    Ok(())
}

/// First `ceil(fraction * n)` records of a seeded shuffle, in original
/// order. Smaller fractions give subsets of larger ones.
pub fn subsample(records: &[ParticipantRecord], fraction: f64, seed: u64) -> Vec<ParticipantRecord> {
    if fraction >= 1.0 {
        return records.to_vec();
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut stream(seed, Purpose::Split));
    let k = ((records.len() as f64 * fraction).ceil() as usize).min(records.len());
    let mut take = idx[..k].to_vec();
    take.sort_unstable();
    Splits::select(records, &take)
}

/// Splits `--protocols` into dropout protocols and report names.
struct ProtocolPlan {
    protocols: Vec<Protocol>,
    pairwise: bool,
    importance: bool,
    trajectory: bool,
}

fn plan(names: &[String], schema: &OrganSchema) -> Result<ProtocolPlan> {
    let mut p = ProtocolPlan {
        protocols: Vec::new(),
        pairwise: false,
        importance: false,
        trajectory: false,
    };
    for n in names {
        match n.as_str() {
            "pairwise" => p.pairwise = true,
            "importance" => p.importance = true,
            "trajectory" => p.trajectory = true,
            _ => {
                let proto = Protocol::parse(n, schema)?;
                proto.validate(schema.len())?;
                p.protocols.push(proto);
            }
        }
    }
    Ok(p)
}

fn eval_one(
    ckpt: &Checkpoint,
    data: &DataDir,
    cfg: &EvalConfig,
    plan: &ProtocolPlan,
    tasks: &[String],
    out: &Path,
    run: &mut RunRecorder,
) -> Result<()> {
    let (enc, store) = (&ckpt.encoder, &ckpt.store);
    let train = subsample(&data.train(), cfg.train_fraction, cfg.probe.seed);
    let test = data.test();
    let dcfg = cfg.dropout();
    if !plan.protocols.is_empty() {
        let rows = organ_dropout_eval(enc, store, &train, &test, tasks, &plan.protocols, &dcfg)?;
        let p = out.join("metrics.csv");
        write_metrics(&p, &rows)?;
        run.output(p);
        let p = out.join("summary.csv");
        write_summary(&p, &summarize(&rows))?;
        run.output(p);
    }
    if plan.pairwise {
        let mut per_task = Vec::new();
        for t in tasks {
            per_task.push((
                t.clone(),
                pairwise_dropout_heatmap(enc, store, &train, &test, t, &dcfg)?,
            ));
        }
        let p = out.join("heatmap.csv");
        write_heatmap(&p, &data.schema, &per_task)?;
        run.output(p);
    }
    if plan.importance {
        let deltas = leave_one_out_importance(enc, store, &train, &test, tasks, &dcfg)?;
        let p = out.join("importance.csv");
        write_importance(&p, &data.schema, tasks, &deltas)?;
        run.output(p);
    }
    if let Some(ft) = &cfg.finetune {
        let val = data.val();
        let mut rows: Vec<MetricsRow> = Vec::new();
        for t in tasks {
            for &seed in &ft.seeds {
                let fcfg = sgm_core::eval::FinetuneConfig { seed, ..ft.config };
                let (tuned, head, report) = finetune(enc, store, &train, &val, t, &fcfg)?;
                log::info!("finetune {t} seed {seed}: best epoch {}", report.best_epoch);
                rows.extend(protocol_grid(
                    enc,
                    &tuned,
                    &[(seed, head)],
                    &test,
                    t,
                    &plan.protocols,
                    &cfg.dropout_seeds,
                )?);
            }
        }
        let p = out.join("metrics_ft.csv");
        write_metrics(&p, &rows)?;
        run.output(p);
    }
    Ok(())
}

/// Evaluates each checkpoint into `out` (or `out/ckpt{i}` for several).
/// Dropout seeds come from one config and are shared by every checkpoint.
pub fn eval(a: &EvalArgs) -> Result<RunManifest> {
    let mut cfg: EvalConfig = load_config(a.config.as_deref())?;
    if let Some(p) = &a.protocols {
        cfg.protocols = p.clone();
    }
    cfg.validate()?;
    let data = DataDir::load(&a.data)?;
    let plan = plan(&cfg.protocols, &data.schema)?;
    let tasks = if cfg.tasks.is_empty() {
        data.tasks()
    } else {
        cfg.tasks.clone()
    };
    let mut inputs = a.checkpoints.clone();
    inputs.push(a.data.clone());
    inputs.extend(a.config.iter().cloned());
    let mut run = RunRecorder::start("eval", snapshot(&cfg), inputs, cfg.probe.seed)?;

    let ckpts = a
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    for c in &ckpts {
        check_schema(c, &data)?;
    }
    let multi = ckpts.len() > 1;
    for (i, c) in ckpts.iter().enumerate() {
        let out = if multi {
            a.out.join(format!("ckpt{i}"))
        } else {
            a.out.clone()
        };
        std::fs::create_dir_all(&out).map_err(Error::io(&out))?;
        eval_one(c, &data, &cfg, &plan, &tasks, &out, &mut run)?;
    }
    if plan.trajectory {
        let first = &ckpts[0];
        for c in &ckpts[1..] {
            if c.encoder.config() != first.encoder.config() || c.encoder.head_spec() != first.encoder.head_spec() {
                return Err(Error::Usage(
                    "trajectory checkpoints must share one model layout".into(),
                ));
            }
        }
        let test = data.test();
        let sample = &test[..cfg.trajectory_sample.min(test.len())];
        let series: Vec<(usize, &ParamStore)> = ckpts
            .iter()
            .enumerate()
            .map(|(i, c)| (c.meta.map_or(i, |m| m.step), &c.store))
            .collect();
        let rows = saliency_trajectory(&first.encoder, &series, sample, SaliencyProxy::AllLayerAverage)?;
        let p = a.out.join("trajectory.csv");
        write_trajectory(&p, &data.schema, &rows)?;
        run.output(p);
    }
    run.finish(&a.out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub iters: usize,
    pub warmup: usize,
    pub sgm_mean_ms: f64,
    pub sgm_std_ms: f64,
    pub baseline_mean_ms: f64,
    pub baseline_std_ms: f64,
    /// Relative per-iteration overhead of SGM over the baseline, in percent.
    pub overhead_pct: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v.sqrt())
}

/// Alternates one SGM step and one baseline step on the same batch, both
/// starting from the checkpoint weights.
pub fn bench_overhead(a: &BenchArgs) -> Result<(RunManifest, BenchReport)> {
    if a.iters == 0 {
        return Err(Error::Usage("--iters must be positive".into()));
    }
    let mut cfg: PretrainConfig = load_config(a.config.as_deref())?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = DataDir::load(&a.data)?;
    check_schema(&ckpt, &data)?;
    cfg.train.saliency_every = 0;
    let mut inputs = vec![a.checkpoint.clone(), a.data.clone()];
    inputs.extend(a.config.iter().cloned());
    let mut run = RunRecorder::start("bench-overhead", snapshot(&cfg), inputs, cfg.train.seed)?;

    let records = data.pretrain();
    let strategy = |s: StrategyArg| match s {
        StrategyArg::Sgm => MaskingStrategy::Sgm,
        StrategyArg::Random => MaskingStrategy::Random,
    };
    let make = |s: MaskingStrategy| {
        let mut c = cfg.train.clone();
        c.strategy = s;
        Trainer::new(&ckpt.encoder, ckpt.store.clone(), &records, c)
    };
    let mut sgm = make(MaskingStrategy::Sgm)?;
    let mut base = make(strategy(a.baseline))?;
    let mut order_rng = stream(cfg.train.seed, Purpose::Data);
    let mut order: Vec<usize> = Vec::new();
    let bs = cfg.train.batch_size.min(records.len());
    let (mut t_sgm, mut t_base) = (Vec::with_capacity(a.iters), Vec::with_capacity(a.iters));
    for it in 0..a.warmup + a.iters {
        if order.len() < bs {
            let mut o: Vec<usize> = (0..records.len()).collect();
            o.shuffle(&mut order_rng);
            order.extend(o);
        }
        let batch: Vec<usize> = order.drain(..bs).collect();
        let time = |t: &mut Trainer<'_>| -> Result<f64> {
            let start = Instant::now();
            t.train_step(&batch, &mut NoopObserver)?;
            Ok(start.elapsed().as_secs_f64() * 1e3)
        };
        // Alternate which side runs first so drift affects both equally.
        let (ds, db) = if it % 2 == 0 {
            let ds = time(&mut sgm)?;
            (ds, time(&mut base)?)
        } else {
            let db = time(&mut base)?;
            (time(&mut sgm)?, db)
        };
        if it >= a.warmup {
            t_sgm.push(ds);
            t_base.push(db);
        }
    }
    let (sm, ss) = mean_std(&t_sgm);
    let (bm, bstd) = mean_std(&t_base);
    let report = BenchReport {
        iters: a.iters,
        warmup: a.warmup,
        sgm_mean_ms: sm,
        sgm_std_ms: ss,
        baseline_mean_ms: bm,
        baseline_std_ms: bstd,
        overhead_pct: 100.0 * (sm - bm) / bm,
    };
    println!(
        "sgm {sm:.3} ± {ss:.3} ms/iter, baseline {bm:.3} ± {bstd:.3} ms/iter, overhead {:+.2}%",
        report.overhead_pct
    );
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let p = out.join("bench.json");
    write_json(&p, &report)?;
    run.output(p);
    Ok((run.finish(&out)?, report))
}

/// One cell of an ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sweep: String,
    pub value: f64,
    pub task: String,
    pub n: usize,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub balacc_mean: f64,
}

#[allow(clippy::too_many_arguments)]
fn standard_cell(
    sweep: &str,
    value: f64,
    encoder: &Encoder,
    store: &ParamStore,
    train: &[ParticipantRecord],
    test: &[ParticipantRecord],
    tasks: &[String],
    cfg: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    let rows = organ_dropout_eval(
        encoder,
        store,
        train,
        test,
        tasks,
        &[Protocol::Standard],
        &cfg.dropout(),
    )?;
    Ok(summarize(&rows)
        .into_iter()
        .map(|c| AblationRow {
            sweep: sweep.into(),
            value,
            task: c.task,
            n: c.n,
            auroc_mean: c.auroc_mean,
            auroc_std: c.auroc_std,
            balacc_mean: c.balacc_mean,
        })
        .collect())
}

/// Pre-trains one model per mask ratio and per temperature and probes each
/// on the standard protocol; then probes the base model with growing
/// fractions of the training split. Writes `ablation.csv`.
pub fn ablate(a: &AblateArgs) -> Result<RunManifest> {
    let mut cfg: PretrainConfig = load_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.train.strategy = MaskingStrategy::Sgm;
    let ecfg: EvalConfig = load_config(a.eval_config.as_deref())?;
    ecfg.validate()?;
    for f in &a.fractions {
        if !(*f > 0.0 && *f <= 1.0) {
            return Err(Error::Usage(format!("fraction {f} outside (0, 1]")));
        }
    }
    let data = DataDir::load(&a.data)?;
    let tasks = if ecfg.tasks.is_empty() {
        data.tasks()
    } else {
        ecfg.tasks.clone()
    };
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.config.iter().cloned());
    inputs.extend(a.eval_config.iter().cloned());
    let snap = serde_json::json!({
        "pretrain": snapshot(&cfg),
        "eval": snapshot(&ecfg),
        "r_mask": a.r_mask,
        "tau": a.tau,
        "fractions": a.fractions,
    });
    let mut run = RunRecorder::start("ablate", snap, inputs, cfg.train.seed)?;

    let pre = data.pretrain();
    let train = data.train();
    let test = data.test();
    let mut trained: Vec<(f64, f64, ParamStore)> = Vec::new();
    let mut train_with = |r_mask: f64, tau: f64| -> Result<(Encoder, ParamStore)> {
        let mut c = cfg.clone();
        c.train.r_mask = r_mask;
        c.train.tau = tau;
        let (enc, init) = build_encoder(&c, &data.schema)?;
        if let Some((_, _, s)) = trained.iter().find(|(r, t, _)| *r == r_mask && *t == tau) {
            return Ok((enc, s.clone()));
        }
        let mut t = Trainer::new(&enc, init, &pre, c.train)?;
        t.run(&mut NoopObserver)?;
        let s = t.into_state().teacher;
        trained.push((r_mask, tau, s.clone()));
        Ok((enc, s))
    };
    let (base_r, base_tau) = (cfg.train.r_mask, cfg.train.tau);
    let mut rows = Vec::new();
    for &r in &a.r_mask {
        let (enc, s) = train_with(r, base_tau)?;
        rows.extend(standard_cell("r_mask", r, &enc, &s, &train, &test, &tasks, &ecfg)?);
    }
    for &t in &a.tau {
        let (enc, s) = train_with(base_r, t)?;
        rows.extend(standard_cell("tau", t, &enc, &s, &train, &test, &tasks, &ecfg)?);
    }
    let (enc, s) = train_with(base_r, base_tau)?;
    for &f in &a.fractions {
        let sub = subsample(&train, f, ecfg.probe.seed);
        rows.extend(standard_cell(
            "train_fraction",
            f,
            &enc,
            &s,
            &sub,
            &test,
            &tasks,
            &ecfg,
        )?);
    }
    std::fs::create_dir_all(&a.out).map_err(Error::io(&a.out))?;
    let p = a.out.join("ablation.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    write_atomic(&p, &bytes)?;
    run.output(p);
    run.finish(&a.out)
}
