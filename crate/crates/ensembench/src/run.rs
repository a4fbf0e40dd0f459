//! Jobs, the run directory and the train/eval/sensitivity/embed commands.
//!
//! Layout under `<out>/<fingerprint>/`:
//!
//! - `manifest`: canonical config plus one line per job;
//! - `checkpoints/<job>/member<i>.ckpt` and `checkpoints/<job>/ensemble.manifest`;
//! - `checkpoints/oracle/`: the embedding oracle, same layout;
//! - `reports/<job>.eval`, `reports/<job>.sensitivity.csv`, `reports/embedding.csv`;
//! - `results.csv`, `summary.json`;
//! - `plots/classes.svg`, `plots/<job>.sensitivity.svg`.
//!
//! A job whose outputs exist is skipped unless forced, so reruns leave
//! existing files untouched.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ensembench_core::budget::plan;
use ensembench_core::data::{
    channel_means, subsample_balanced, synth_clusters, AugmentationPolicy, DatasetSplit, NormalizationStats,
};
use ensembench_core::embed::{color_by_sensitivity, oracle_embed, ColorKey, EmbeddingPoint, TsneConfig};
use ensembench_core::eval::{accuracy, mean_sensitivity, SampleCap};
use ensembench_core::train::{
    default_lr0, epochs_for, train_members, EnsembleModel, EpochReport, Optimizer, TrainedMember, TrainingSchedule,
};
use ensembench_core::zoo::ArchitectureSpec;
use rayon::prelude::*;

use crate::config::{DatasetKind, DesignKind, ExperimentConfig, OptimizerKind};
use crate::formats::checkpoint::{self, spec_lines};
use crate::formats::dataset::{load_cifar, load_portable};
use crate::formats::kv::{self, Block};
use crate::results::{self, parse_sensitivity_csv, ResultRow};
use crate::svg::{write_scatter, ColorMode};
use crate::{Error, Result};

/// Environment variable naming the dataset root.
pub const DATA_ENV: &str = "ENSEMBENCH_DATA";

/// One trained design at one `(N, seed)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Job {
    pub design: DesignKind,
    /// Budget multiplier the design was matched to; 1 for the base network.
    pub budget: usize,
    pub spec: ArchitectureSpec,
    pub members: usize,
    pub n_per_class: usize,
    pub seed: u64,
}

impl Job {
    pub fn key(&self) -> String {
        format!(
            "{}-{}-b{}-n{}-s{}",
            self.design.name(),
            self.spec.name(),
            self.budget,
            self.n_per_class,
            self.seed
        )
    }
}

/// A design row of the budget table.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanRow {
    pub budget: usize,
    pub design: DesignKind,
    pub spec: ArchitectureSpec,
    pub members: usize,
    pub macs: u64,
    pub rel_error: f64,
}

/// Designs per budget multiplier: the base alone for 1, otherwise base,
/// ensemble, deep (when the family has one) and wide.
pub fn plan_rows(base: &ArchitectureSpec, multipliers: &[usize]) -> Result<Vec<PlanRow>> {
    let base_macs = base.flops()?.macs;
    let mut rows = Vec::new();
    for &m in multipliers {
        let row = |design, spec: &ArchitectureSpec, members: usize| -> Result<PlanRow> {
            let macs = spec.flops()?.macs * members as u64;
            Ok(PlanRow {
                budget: m,
                design,
                spec: spec.clone(),
                members,
                macs,
                rel_error: (macs as f64 - (base_macs * m as u64) as f64) / (base_macs * m as u64) as f64,
            })
        };
        rows.push(row(DesignKind::Base, base, 1)?);
        if m == 1 {
            continue;
        }
        let p = plan(base, m)?;
        rows.push(row(DesignKind::Ensemble, base, m)?);
        if let Some(d) = &p.deep {
            rows.push(row(DesignKind::Deep, &d.spec, 1)?);
        }
        rows.push(row(DesignKind::Wide, &p.wide.spec, 1)?);
    }
    Ok(rows)
}

/// Every job of a config, in a fixed order: by `N`, then budget and design,
/// then seed. The base network appears once per `(N, seed)`.
pub fn jobs(cfg: &ExperimentConfig) -> Result<Vec<Job>> {
    let mut designs: Vec<(DesignKind, usize, ArchitectureSpec, usize)> = Vec::new();
    if cfg.designs.contains(&DesignKind::Base) {
        designs.push((DesignKind::Base, 1, cfg.base.clone(), 1));
    }
    for row in plan_rows(&cfg.base, &cfg.members)? {
        if row.design != DesignKind::Base && cfg.designs.contains(&row.design) {
            designs.push((row.design, row.budget, row.spec, row.members));
        }
    }
    let mut out = Vec::new();
    for &n in &cfg.n_per_class {
        for (design, budget, spec, members) in &designs {
            for &seed in &cfg.seeds {
                out.push(Job {
                    design: *design,
                    budget: *budget,
                    spec: spec.clone(),
                    members: *members,
                    n_per_class: n,
                    seed,
                });
            }
        }
    }
    Ok(out)
}

pub fn schedule(cfg: &ExperimentConfig, spec: &ArchitectureSpec, epochs: usize) -> TrainingSchedule {
    let optimizer = match cfg.optimizer {
        OptimizerKind::Sgd => Optimizer::sgd(cfg.lr0.unwrap_or_else(|| default_lr0(spec))),
        OptimizerKind::Adam => match (Optimizer::adam(), cfg.lr0) {
            (Optimizer::Adam { beta1, beta2, eps, .. }, Some(step)) => Optimizer::Adam {
                step,
                beta1,
                beta2,
                eps,
            },
            (a, _) => a,
        },
    };
    let mut s = TrainingSchedule::new(epochs, optimizer);
    s.batch_size = cfg.batch_size;
    s.independent_member_augmentation = cfg.independent_member_augmentation;
    s
}

pub fn job_schedule(cfg: &ExperimentConfig, job: &Job) -> Result<TrainingSchedule> {
    Ok(schedule(cfg, &job.spec, epochs_for(job.n_per_class, cfg.epochs)?))
}

pub fn oracle_epochs(cfg: &ExperimentConfig) -> usize {
    cfg.oracle_epochs.or(cfg.epochs).unwrap_or(100)
}

/// Train and test splits of the configured dataset.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
}

pub fn data_root(cfg: &ExperimentConfig) -> Option<PathBuf> {
    cfg.data_path
        .clone()
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Datasets> {
    let data = match cfg.dataset {
        DatasetKind::Synthetic => {
            let s = &cfg.synthetic;
            let all = synth_clusters(
                s.classes,
                s.train_per_class + s.test_per_class,
                [s.size, s.size, 3],
                s.separation,
                s.seed,
            )?;
            let per = s.train_per_class + s.test_per_class;
            let (mut tr, mut te) = (Vec::new(), Vec::new());
            for i in 0..all.len() {
                if i % per < s.train_per_class {
                    tr.push(i);
                } else {
                    te.push(i);
                }
            }
            Datasets {
                train: all.select(&tr),
                test: all.select(&te),
            }
        }
        DatasetKind::Cifar(variant) => {
            let root = data_root(cfg).ok_or_else(|| {
                Error::Prerequisite(format!("{} needs `data_path` or ${}", cfg.dataset.name(), DATA_ENV))
            })?;
            let (train, test) = variant.files(&root);
            for f in train.iter().chain(std::iter::once(&test)) {
                if !f.is_file() {
                    return Err(Error::Prerequisite(format!("dataset file {}", f.display())));
                }
            }
            Datasets {
                train: load_cifar(&train, variant)?,
                test: load_cifar(&[test], variant)?,
            }
        }
        DatasetKind::Portable => {
            let root = data_root(cfg)
                .ok_or_else(|| Error::Prerequisite(format!("sds dataset needs `data_path` or ${}", DATA_ENV)))?;
            Datasets {
                train: load_portable(&root.join("train.sds"))?,
                test: load_portable(&root.join("test.sds"))?,
            }
        }
    };
    for split in [&data.train, &data.test] {
        if split.shape() != cfg.base.input || split.num_classes() != cfg.base.num_classes {
            return Err(Error::Usage(format!(
                "dataset has {} classes of {:?} images, config expects {} of {:?}",
                split.num_classes(),
                split.shape(),
                cfg.base.num_classes,
                cfg.base.input
            )));
        }
    }
    Ok(data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Options {
    pub force: bool,
    pub workers: usize,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            force: false,
            workers: 1,
        }
    }
}

impl Options {
    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.max(1))
            .build()
            .map_err(|e| Error::Usage(format!("cannot start worker pool: {}", e)))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(Error::io(path))
}

/// Writes `bytes` unless the file already holds exactly them.
fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<()> {
    if fs::read(path).map(|old| old == bytes).unwrap_or(false) {
        return Ok(());
    }
    write_file(path, bytes)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(Error::io(path))
}

/// The directory holding every artifact of one config.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub cfg: ExperimentConfig,
}

impl RunDir {
    pub fn path_for(cfg: &ExperimentConfig) -> PathBuf {
        cfg.out.join(cfg.fingerprint())
    }

    /// Creates the layout and writes the manifest. The manifest leaves out
    /// `data_path` and `out`, as the fingerprint does.
    pub fn open(cfg: &ExperimentConfig) -> Result<Self> {
        let root = Self::path_for(cfg);
        for sub in ["checkpoints", "reports", "plots"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(Error::io(&p))?;
        }
        let dir = RunDir { root, cfg: cfg.clone() };
        write_if_changed(&dir.root.join("manifest"), dir.manifest_text()?.as_bytes())?;
        Ok(dir)
    }

    pub fn manifest_text(&self) -> Result<String> {
        let mut cfg = self.cfg.clone();
        cfg.data_path = None;
        let body: String = cfg
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("out ="))
            .map(|l| format!("{}\n", l))
            .collect();
        let mut s = format!("# fingerprint {}\n{}\n# jobs\n", cfg.fingerprint(), body);
        for j in jobs(&cfg)? {
            let sch = job_schedule(&cfg, &j)?;
            let _ = writeln!(
                s,
                "job.{} = design {}, spec {}, members {}, n_per_class {}, seed {}, epochs {}, optimizer {}, lr0 {}, batch_size {}",
                j.key(),
                j.design.name(),
                j.spec.name(),
                j.members,
                j.n_per_class,
                j.seed,
                sch.epochs,
                sch.optimizer.name(),
                sch.optimizer.initial_lr(),
                sch.batch_size
            );
        }
        Ok(s)
    }

    pub fn job_dir(&self, key: &str) -> PathBuf {
        self.root.join("checkpoints").join(key)
    }

    pub fn ensemble_manifest(&self, key: &str) -> PathBuf {
        self.job_dir(key).join("ensemble.manifest")
    }

    pub fn eval_path(&self, key: &str) -> PathBuf {
        self.root.join("reports").join(format!("{}.eval", key))
    }

    pub fn sensitivity_path(&self, key: &str) -> PathBuf {
        self.root.join("reports").join(format!("{}.sensitivity.csv", key))
    }

    pub fn results_path(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn is_trained(&self, key: &str) -> bool {
        self.ensemble_manifest(key).is_file()
    }
}

/// Members of a job, with the metadata needed to evaluate them.
#[derive(Clone, Debug)]
pub struct StoredEnsemble {
    pub ensemble: EnsembleModel,
    pub wall_seconds: f64,
}

/// What the ensemble manifest records besides the members themselves.
struct JobRecord<'a> {
    key: &'a str,
    design: &'a str,
    budget: usize,
    n_per_class: usize,
    schedule: &'a TrainingSchedule,
    aug: &'a str,
    wall_seconds: f64,
}

fn ensemble_manifest_text(rec: &JobRecord, ens: &EnsembleModel) -> String {
    let JobRecord {
        key,
        design,
        budget,
        n_per_class,
        schedule,
        aug,
        wall_seconds: wall,
    } = *rec;
    let mut s = String::new();
    let _ = writeln!(s, "job = {}", key);
    let _ = writeln!(s, "design = {}", design);
    let _ = writeln!(s, "budget = {}", budget);
    let _ = writeln!(s, "members = {}", ens.len());
    let _ = writeln!(s, "phi = {}", if ens.head().is_cosine() { "cosine" } else { "softmax" });
    s.push_str(&spec_lines(&ens.spec));
    let _ = writeln!(s, "n_per_class = {}", n_per_class);
    let _ = writeln!(s, "seed = {}", ens.seed);
    let _ = writeln!(s, "epochs = {}", schedule.epochs);
    let _ = writeln!(s, "optimizer = {}", schedule.optimizer.name());
    let _ = writeln!(s, "lr0 = {}", schedule.optimizer.initial_lr());
    let _ = writeln!(s, "batch_size = {}", schedule.batch_size);
    let _ = writeln!(s, "aug = {}", aug);
    let _ = writeln!(
        s,
        "independent_member_augmentation = {}",
        schedule.independent_member_augmentation
    );
    let means: Vec<String> = ens.stats.mean.iter().map(|m| m.to_string()).collect();
    let _ = writeln!(s, "channel_mean = {}", means.join(", "));
    let files: Vec<String> = (0..ens.len()).map(|i| format!("member{}.ckpt", i)).collect();
    let _ = writeln!(s, "member_files = {}", files.join(", "));
    let losses: Vec<String> = ens
        .loss_traces
        .iter()
        .map(|t| t.last().map_or(String::new(), |l| l.to_string()))
        .collect();
    let _ = writeln!(s, "final_loss = {}", losses.join(", "));
    let _ = writeln!(s, "wall_seconds = {}", wall);
    s
}

/// Writes member checkpoints, then the ensemble manifest that marks the job
/// complete.
pub fn save_ensemble(dir: &Path, manifest: &str, ens: &EnsembleModel) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for (i, m) in ens.members.iter().enumerate() {
        checkpoint::write(&dir.join(format!("member{}.ckpt", i)), m)?;
    }
    write_file(&dir.join("ensemble.manifest"), manifest.as_bytes())
}

pub fn load_ensemble(dir: &Path) -> Result<StoredEnsemble> {
    let path = dir.join("ensemble.manifest");
    if !path.is_file() {
        return Err(Error::Prerequisite(format!("trained checkpoints {}", path.display())));
    }
    let block = Block(kv::parse(&read_text(&path)?)?);
    let what = "ensemble manifest";
    let spec = checkpoint::spec_from_block(&block, what)?;
    let files: Vec<String> = block
        .require(what, "member_files")?
        .value
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let members_n: usize = block.parse(what, "members")?;
    if files.len() != members_n {
        return Err(Error::format(
            what,
            0,
            format!("{} member files for {} members", files.len(), members_n),
        ));
    }
    let members = files
        .iter()
        .map(|f| {
            let m = checkpoint::read(&dir.join(f))?;
            if *m.spec() != spec {
                return Err(Error::format(
                    what,
                    0,
                    format!("{} does not match the manifest spec", f),
                ));
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = block
        .require(what, "channel_mean")?
        .value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::format(what, 0, "bad channel_mean"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StoredEnsemble {
        ensemble: EnsembleModel {
            spec,
            members,
            stats: NormalizationStats { mean },
            seed: block.parse(what, "seed")?,
            loss_traces: vec![Vec::new(); members_n],
        },
        wall_seconds: block.parse(what, "wall_seconds")?,
    })
}

fn progress(key: &str, epochs: usize) -> impl Fn(EpochReport) + '_ {
    move |r: EpochReport| {
        if (r.epoch + 1).is_multiple_of(10) || r.epoch + 1 == epochs {
            eprintln!(
                "[train] {} member {} epoch {}/{} loss {:.4}",
                key,
                r.member,
                r.epoch + 1,
                epochs,
                r.loss
            );
        }
    }
}

/// Trains `count` members, one rayon task each; the result equals lockstep
/// training.
fn train_parallel(
    spec: &ArchitectureSpec,
    data: &DatasetSplit,
    schedule: &TrainingSchedule,
    policy: &AugmentationPolicy,
    seed: u64,
    count: usize,
    key: &str,
) -> Result<EnsembleModel> {
    let log = progress(key, schedule.epochs);
    let members: Vec<TrainedMember> = (0..count)
        .into_par_iter()
        .map(|m| {
            let mut obs = |r: EpochReport| log(r);
            train_members(spec, data, schedule, policy, seed, m..m + 1, &mut obs).map(|mut v| v.remove(0))
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(EnsembleModel::from_members(
        spec.clone(),
        channel_means(data)?,
        seed,
        members,
    )?)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainOutcome {
    pub trained: Vec<String>,
    pub skipped: Vec<String>,
}

fn train_job(dir: &RunDir, data: &Datasets, job: &Job, force: bool) -> Result<bool> {
    let key = job.key();
    if dir.is_trained(&key) && !force {
        return Ok(false);
    }
    let cfg = &dir.cfg;
    let sub = subsample_balanced(&data.train, job.n_per_class, job.seed)?;
    let sch = job_schedule(cfg, job)?;
    let policy = AugmentationPolicy::new(cfg.aug);
    let start = Instant::now();
    let ens = train_parallel(&job.spec, &sub, &sch, &policy, job.seed, job.members, &key)?;
    let wall = start.elapsed().as_secs_f64();
    let rec = JobRecord {
        key: &key,
        design: job.design.name(),
        budget: job.budget,
        n_per_class: job.n_per_class,
        schedule: &sch,
        aug: cfg.aug.name(),
        wall_seconds: wall,
    };
    let manifest = ensemble_manifest_text(&rec, &ens);
    save_ensemble(&dir.job_dir(&key), &manifest, &ens)?;
    Ok(true)
}

pub fn cmd_train(cfg: &ExperimentConfig, opts: Options) -> Result<TrainOutcome> {
    let dir = RunDir::open(cfg)?;
    let all = jobs(cfg)?;
    let pending: Vec<&Job> = all.iter().filter(|j| opts.force || !dir.is_trained(&j.key())).collect();
    let mut outcome = TrainOutcome::default();
    if pending.is_empty() {
        outcome.skipped = all.iter().map(Job::key).collect();
        return Ok(outcome);
    }
    let data = load_data(cfg)?;
    let done: Vec<Result<bool>> = opts
        .pool()?
        .install(|| all.par_iter().map(|j| train_job(&dir, &data, j, opts.force)).collect());
    for (j, r) in all.iter().zip(done) {
        if r? {
            outcome.trained.push(j.key());
        } else {
            outcome.skipped.push(j.key());
        }
    }
    Ok(outcome)
}

/// Deep competitor of the first budget (wide when the family has no
/// deeper network), trained on the full training set.
pub fn oracle_spec(cfg: &ExperimentConfig) -> Result<ArchitectureSpec> {
    let m = cfg.members.iter().copied().find(|&m| m >= 2).unwrap_or(2);
    let p = plan(&cfg.base, m)?;
    Ok(p.deep.map(|d| d.spec).unwrap_or(p.wide.spec))
}

pub fn cmd_train_oracle(cfg: &ExperimentConfig, opts: Options) -> Result<bool> {
    let dir = RunDir::open(cfg)?;
    let key = "oracle";
    if dir.is_trained(key) && !opts.force {
        return Ok(false);
    }
    let data = load_data(cfg)?;
    let spec = oracle_spec(cfg)?;
    let sch = schedule(cfg, &spec, oracle_epochs(cfg));
    let seed = cfg.seeds[0];
    let policy = AugmentationPolicy::new(cfg.aug);
    let start = Instant::now();
    let ens = opts
        .pool()?
        .install(|| train_parallel(&spec, &data.train, &sch, &policy, seed, 1, key))?;
    let wall = start.elapsed().as_secs_f64();
    let n = data.train.per_class().unwrap_or(0);
    let design = if spec.width == cfg.base.width {
        "oracle-deep"
    } else {
        "oracle-wide"
    };
    let rec = JobRecord {
        key,
        design,
        budget: 0,
        n_per_class: n,
        schedule: &sch,
        aug: cfg.aug.name(),
        wall_seconds: wall,
    };
    let manifest = ensemble_manifest_text(&rec, &ens);
    save_ensemble(&dir.job_dir(key), &manifest, &ens)?;
    Ok(true)
}

fn sample_cap(cfg: &ExperimentConfig) -> SampleCap {
    match cfg.sensitivity_cap {
        Some(cap) => SampleCap::Seeded {
            cap,
            seed: cfg.sensitivity_seed,
        },
        None => SampleCap::All,
    }
}

fn row_for(
    cfg: &ExperimentConfig,
    job: &Job,
    accuracy: Option<f64>,
    sens: Option<f64>,
    wall: Option<f64>,
) -> ResultRow {
    ResultRow {
        dataset: cfg.dataset.name().into(),
        family: job.spec.family.name().into(),
        depth: job.spec.depth,
        width: job.spec.width,
        members: job.members,
        n_per_class: job.n_per_class,
        aug: cfg.aug.name().into(),
        seed: job.seed,
        accuracy,
        mean_sensitivity: sens,
        wall_seconds: wall,
    }
}

/// Computes the sensitivity report of every trained job that lacks one.
pub fn cmd_sensitivity(cfg: &ExperimentConfig, opts: Options) -> Result<Vec<String>> {
    let dir = RunDir::open(cfg)?;
    let all = jobs(cfg)?;
    for j in &all {
        if !dir.is_trained(&j.key()) {
            return Err(Error::Prerequisite(format!(
                "trained checkpoints for {} (run `train` first)",
                j.key()
            )));
        }
    }
    let pending: Vec<&Job> = all
        .iter()
        .filter(|j| opts.force || !dir.sensitivity_path(&j.key()).is_file())
        .collect();
    if pending.is_empty() {
        return Ok(Vec::new());
    }
    let data = load_data(cfg)?;
    let cap = sample_cap(cfg);
    let done: Vec<Result<String>> = opts.pool()?.install(|| {
        pending
            .par_iter()
            .map(|j| {
                let key = j.key();
                let stored = load_ensemble(&dir.job_dir(&key))?;
                let ens = &stored.ensemble;
                let report = mean_sensitivity(ens, &data.test, &ens.stats, cap)?;
                write_file(
                    &dir.sensitivity_path(&key),
                    results::sensitivity_csv(&report).as_bytes(),
                )?;
                eprintln!("[sensitivity] {} mean {:.6}", key, report.mean);
                Ok(key)
            })
            .collect()
    });
    let keys = done.into_iter().collect::<Result<Vec<_>>>()?;
    write_results(&dir)?;
    Ok(keys)
}

fn eval_text(acc: f64) -> String {
    format!("accuracy = {}\n", acc)
}

/// Test accuracy of every trained job, then `results.csv` and
/// `summary.json`.
pub fn cmd_eval(cfg: &ExperimentConfig, opts: Options) -> Result<Vec<ResultRow>> {
    let dir = RunDir::open(cfg)?;
    let all = jobs(cfg)?;
    for j in &all {
        if !dir.is_trained(&j.key()) {
            return Err(Error::Prerequisite(format!(
                "trained checkpoints for {} (run `train` first)",
                j.key()
            )));
        }
    }
    let pending: Vec<&Job> = all
        .iter()
        .filter(|j| opts.force || !dir.eval_path(&j.key()).is_file())
        .collect();
    if !pending.is_empty() {
        let data = load_data(cfg)?;
        let done: Vec<Result<()>> = opts.pool()?.install(|| {
            pending
                .par_iter()
                .map(|j| {
                    let key = j.key();
                    let stored = load_ensemble(&dir.job_dir(&key))?;
                    let ens = &stored.ensemble;
                    let acc = accuracy(ens, &data.test, &ens.stats)?;
                    eprintln!("[eval] {} accuracy {:.4}", key, acc);
                    write_file(&dir.eval_path(&key), eval_text(acc).as_bytes())
                })
                .collect()
        });
        done.into_iter().collect::<Result<()>>()?;
    }
    write_results(&dir)
}

/// Assembles `results.csv` and `summary.json` from per-job reports.
pub fn write_results(dir: &RunDir) -> Result<Vec<ResultRow>> {
    let cfg = &dir.cfg;
    let mut rows = Vec::new();
    for j in jobs(cfg)? {
        let key = j.key();
        let eval = dir.eval_path(&key);
        let sens = dir.sensitivity_path(&key);
        if !eval.is_file() && !sens.is_file() {
            continue;
        }
        let acc = if eval.is_file() {
            Some(Block(kv::parse(&read_text(&eval)?)?).parse("eval report", "accuracy")?)
        } else {
            None
        };
        let s = if sens.is_file() {
            Some(parse_sensitivity_csv(&read_text(&sens)?)?.mean)
        } else {
            None
        };
        let wall = load_wall_seconds(&dir.ensemble_manifest(&key))?;
        rows.push(row_for(cfg, &j, acc, s, Some(wall)));
    }
    write_if_changed(&dir.results_path(), results::to_csv(&rows).as_bytes())?;
    let summary = results::summarize(&rows, &cfg.fingerprint());
    let json = serde_json::to_string_pretty(&summary)? + "\n";
    write_if_changed(&dir.root.join("summary.json"), json.as_bytes())?;
    Ok(rows)
}

fn load_wall_seconds(manifest: &Path) -> Result<f64> {
    Block(kv::parse(&read_text(manifest)?)?).parse("ensemble manifest", "wall_seconds")
}

pub fn tsne_config(cfg: &ExperimentConfig) -> TsneConfig {
    TsneConfig {
        perplexity: cfg.tsne_perplexity,
        iterations: cfg.tsne_iterations,
        seed: cfg.tsne_seed,
        ..TsneConfig::default()
    }
}

fn parse_embedding(text: &str) -> Result<Vec<EmbeddingPoint>> {
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::format("embedding csv", 0, format!("bad line `{}`", l));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(EmbeddingPoint {
                sample_id: f[0].parse().map_err(|_| bad())?,
                p1: f[1].parse().map_err(|_| bad())?,
                p2: f[2].parse().map_err(|_| bad())?,
                color: ColorKey::Class(f[3].parse::<f64>().map_err(|_| bad())? as u32),
            })
        })
        .collect()
}

/// Embeds the oracle's test features once, then plots the classes and the
/// sensitivity of every job that has a report on the shared coordinates.
pub fn cmd_embed(cfg: &ExperimentConfig, opts: Options) -> Result<Vec<PathBuf>> {
    let dir = RunDir::open(cfg)?;
    if !dir.is_trained("oracle") {
        return Err(Error::Prerequisite(format!(
            "oracle checkpoint {} (run `train --oracle` first)",
            dir.ensemble_manifest("oracle").display()
        )));
    }
    let coords = dir.root.join("reports").join("embedding.csv");
    let points = if coords.is_file() && !opts.force {
        parse_embedding(&read_text(&coords)?)?
    } else {
        let data = load_data(cfg)?;
        let oracle = load_ensemble(&dir.job_dir("oracle"))?.ensemble;
        let pts = oracle_embed(
            &oracle.members[0],
            &data.test,
            &oracle.stats,
            &tsne_config(cfg),
            sample_cap(cfg),
        )?;
        write_file(&coords, results::embedding_csv(&pts).as_bytes())?;
        pts
    };
    let mut written = Vec::new();
    let classes = dir.root.join("plots").join("classes.svg");
    write_scatter(
        &points,
        ColorMode::Categorical {
            classes: cfg.base.num_classes,
        },
        &classes,
    )?;
    written.push(classes);
    for j in jobs(cfg)? {
        let key = j.key();
        let sens = dir.sensitivity_path(&key);
        if !sens.is_file() {
            continue;
        }
        let report = parse_sensitivity_csv(&read_text(&sens)?)?;
        let colored = color_by_sensitivity(&points, &report)?;
        let path = dir.root.join("plots").join(format!("{}.sensitivity.svg", key));
        write_scatter(
            &colored,
            ColorMode::Continuous {
                clip_quantile: cfg.clip_quantile,
            },
            &path,
        )?;
        written.push(path);
    }
    Ok(written)
}

/// Writes the budget table to `plan.csv` in the results schema; metric
/// fields are empty and `n_per_class`/`seed` are 0.
pub fn cmd_plan(cfg: &ExperimentConfig) -> Result<(Vec<PlanRow>, String)> {
    let rows = plan_rows(&cfg.base, &cfg.members)?;
    let dir = RunDir::open(cfg)?;
    let csv_rows: Vec<ResultRow> = rows
        .iter()
        .map(|r| ResultRow {
            dataset: cfg.dataset.name().into(),
            family: r.spec.family.name().into(),
            depth: r.spec.depth,
            width: r.spec.width,
            members: r.members,
            n_per_class: 0,
            aug: cfg.aug.name().into(),
            seed: 0,
            accuracy: None,
            mean_sensitivity: None,
            wall_seconds: None,
        })
        .collect();
    write_if_changed(&dir.root.join("plan.csv"), results::to_csv(&csv_rows).as_bytes())?;
    let mut table = format!(
        "{:>6}  {:<9} {:<22} {:>7} {:>12} {:>9}\n",
        "budget", "design", "network", "members", "MFLOPs", "rel.err"
    );
    for r in &rows {
        let _ = writeln!(
            table,
            "{:>6}  {:<9} {:<22} {:>7} {:>12.2} {:>+8.2}%",
            r.budget,
            r.design.name(),
            r.spec.name(),
            r.members,
            2.0 * r.macs as f64 / 1e6,
            100.0 * r.rel_error
        );
    }
    Ok((rows, table))
}
