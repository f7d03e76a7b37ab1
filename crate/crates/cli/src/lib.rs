//! The `amer` command line: data generation, training, evaluation and
//! analysis driven by one config file.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use amer_core::config::{load_with_overrides, RunConfig};
use amer_core::evaluate::{
    dataset_targets, decode_dataset, diversity_bins, evaluate_model, evaluate_run, format_targets,
    parse_targets, rerank_list, retrieval_lists, DiversityMetric, EvalMode,
};
use amer_core::index::{format_run, parse_run, FlatIndex};
use amer_core::io::{read_file, write_atomic};
use amer_core::model::init_model;
use amer_core::synthgen::{
    build_corpus, build_dataset, transforms_to_bytes, verify_target_ids, Corpus, Setting,
    SyntheticDataset, TransformKind,
};
use amer_core::tensor::RngStream;
use amer_core::trainer::{format_log, train, Checkpoint, FeedbackMode, TrainMode};
use amer_core::Error;

pub const TRAIN_FILE: &str = "train.ds";
pub const VAL_FILE: &str = "val.ds";
pub const TEST_FILE: &str = "test.ds";
pub const CORPUS_FILE: &str = "corpus.bin";
pub const TRANSFORMS_FILE: &str = "transforms.bin";
pub const CONFIG_FILE: &str = "config.cfg";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(
    name = "amer",
    version,
    about = "Autoregressive multi-embedding retrieval lab"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalArgs {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset, its corpus and transforms.
    GenData {
        #[arg(long, value_enum)]
        setting: Option<SettingArg>,
        #[arg(long, value_enum)]
        transform: Option<TransformArg>,
    },
    /// Check that a corpus loads as a valid unit-norm index.
    BuildIndex {
        /// Dataset directory or corpus file.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        feedback: Option<FeedbackArg>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<EvalModeArg>,
    },
    /// Diversity binning over a dataset split, or scoring of an external run.
    Analyze {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Run file `query_id corpus_id rank score`.
        #[arg(long, requires_all = ["targets", "corpus"])]
        run: Option<PathBuf>,
        /// Targets file `query_id m target_id...`.
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// MMR re-ranking of a run file.
    Rerank {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        lambda: f64,
        #[arg(long, default_value_t = 100)]
        k: usize,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SettingArg {
    Single,
    Multi,
    Ood,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum TransformArg {
    Linear,
    Mlp,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Amer,
    SingleQuery,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FeedbackArg {
    ScheduledSampling,
    AlwaysPredicted,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum EvalModeArg {
    Amer,
    SingleQuery,
    SingleQueryMmr,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CmdResult<T = ()> = std::result::Result<T, Failure>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub train: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: String,
    /// Random generator behind every seed.
    pub rng: String,
    pub seeds: Seeds,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_clock_seconds: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_file(path: &Path, label: &str) -> CmdResult<FileDigest> {
    let bytes = read_file(path)?;
    Ok(FileDigest {
        path: label.to_string(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

/// Recomputes every output digest listed in `dir/manifest.json`.
pub fn verify_manifest(dir: &Path) -> amer_core::Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = read_file(&path)?;
    let manifest: RunManifest =
        serde_json::from_slice(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    for f in &manifest.outputs {
        let p = dir.join(&f.path);
        let got = sha256_hex(&read_file(&p)?);
        if got != f.sha256 {
            return Err(Error::format(&p, "digest does not match the manifest"));
        }
    }
    Ok(manifest)
}

/// Writes outputs atomically, then the manifest describing them.
struct Outputs {
    dir: PathBuf,
    written: Vec<FileDigest>,
}

impl Outputs {
    fn new(dir: PathBuf) -> Self {
        Outputs {
            dir,
            written: Vec::new(),
        }
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CmdResult {
        write_atomic(&self.dir.join(name), bytes)?;
        self.written.push(FileDigest {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    fn finish(
        self,
        command: &str,
        cfg: &RunConfig,
        inputs: Vec<FileDigest>,
        started: Instant,
    ) -> CmdResult {
        let manifest = RunManifest {
            tool: "amer".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: cfg.to_toml(),
            rng: amer_core::tensor::RNG_ALGORITHM.into(),
            seeds: Seeds {
                data: cfg.seed,
                model: cfg.model.seed,
                train: cfg.train.seed,
            },
            inputs,
            outputs: self.written,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(&self.dir.join(MANIFEST_FILE), &json)?;
        Ok(())
    }
}

fn load_config(global: &GlobalArgs, fallback: Option<&str>) -> CmdResult<RunConfig> {
    let text = match (&global.config, fallback) {
        (Some(path), _) => {
            std::fs::read_to_string(path).map_err(|e| Failure::Data(Error::io(path, e)))?
        }
        (None, Some(t)) => t.to_string(),
        (None, None) => String::new(),
    };
    let mut cfg = load_with_overrides(&text, &global.overrides)?;
    if let Some(seed) = global.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn out_dir(global: &GlobalArgs) -> CmdResult<PathBuf> {
    global
        .out
        .clone()
        .ok_or_else(|| Failure::Usage("--out is required for this command".into()))
}

fn load_split(dir: &Path, name: &str) -> CmdResult<(SyntheticDataset, FileDigest)> {
    let p = dir.join(name);
    Ok((
        SyntheticDataset::load(&p)?,
        digest_file(&p, &p.display().to_string())?,
    ))
}

fn load_corpus_path(path: &Path) -> CmdResult<(Corpus, FileDigest)> {
    let p = if path.is_dir() {
        path.join(CORPUS_FILE)
    } else {
        path.to_path_buf()
    };
    Ok((
        Corpus::load(&p)?,
        digest_file(&p, &p.display().to_string())?,
    ))
}

fn gen_data(
    global: &GlobalArgs,
    setting: Option<SettingArg>,
    transform: Option<TransformArg>,
) -> CmdResult {
    let started = Instant::now();
    let mut cfg = load_config(global, None)?;
    if let Some(s) = setting {
        cfg.data.setting = match s {
            SettingArg::Single => Setting::SingleInDist,
            SettingArg::Multi => Setting::MultiInDist,
            SettingArg::Ood => Setting::Ood,
        };
    }
    if let Some(t) = transform {
        cfg.data.transform = match t {
            TransformArg::Linear => TransformKind::Linear,
            TransformArg::Mlp => TransformKind::Mlp,
        };
    }
    cfg.validate()?;
    let data = build_dataset(&cfg.data, cfg.seed)?;
    let corpus = build_corpus(&data.pool, cfg.data.corpus_size, cfg.seed)?;
    for split in data.splits() {
        verify_target_ids(split, &corpus)?;
    }
    let mut out = Outputs::new(out_dir(global)?);
    out.write(TRAIN_FILE, &data.train.to_bytes())?;
    out.write(VAL_FILE, &data.val.to_bytes())?;
    out.write(TEST_FILE, &data.test.to_bytes())?;
    out.write(CORPUS_FILE, &corpus.to_bytes())?;
    out.write(TRANSFORMS_FILE, &transforms_to_bytes(&data.transforms))?;
    out.write(CONFIG_FILE, cfg.to_toml().as_bytes())?;
    log::info!(
        "generated {} train / {} val / {} test queries, corpus {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        corpus.len()
    );
    out.finish("gen-data", &cfg, Vec::new(), started)
}

fn build_index(data: &Path) -> CmdResult {
    let (corpus, _) = load_corpus_path(data)?;
    let index = FlatIndex::build(&corpus)?;
    if data.is_dir() {
        for name in [TRAIN_FILE, VAL_FILE, TEST_FILE] {
            let p = data.join(name);
            if p.exists() {
                verify_target_ids(&SyntheticDataset::load(&p)?, &corpus)?;
            }
        }
    }
    println!("{{\"entries\": {}, \"dim\": {}}}", index.len(), index.dim());
    Ok(())
}

fn train_cmd(
    global: &GlobalArgs,
    data: &Path,
    mode: Option<ModeArg>,
    feedback: Option<FeedbackArg>,
    steps: Option<usize>,
) -> CmdResult {
    let started = Instant::now();
    let fallback = std::fs::read_to_string(data.join(CONFIG_FILE)).ok();
    let mut cfg = load_config(global, fallback.as_deref())?;
    if let Some(m) = mode {
        cfg.train.mode = match m {
            ModeArg::Amer => TrainMode::Amer,
            ModeArg::SingleQuery => TrainMode::SingleQuery,
        };
    }
    if let Some(f) = feedback {
        cfg.train.feedback = match f {
            FeedbackArg::ScheduledSampling => FeedbackMode::ScheduledSampling,
            FeedbackArg::AlwaysPredicted => FeedbackMode::AlwaysPredicted,
        };
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
        cfg.train.epochs = None;
    }
    cfg.validate()?;
    let (train_split, d1) = load_split(data, TRAIN_FILE)?;
    let (val_split, d2) = load_split(data, VAL_FILE)?;
    let init = init_model::<f32>(&cfg.model, RngStream::new(cfg.model.seed, 0))?;
    let config_text = cfg.to_toml();
    let outcome = train(init, &train_split, &val_split, &cfg.train, &config_text)?;
    let mut out = Outputs::new(out_dir(global)?);
    out.write(CHECKPOINT_FILE, &outcome.best.to_bytes())?;
    out.write(LOG_FILE, format_log(&outcome.log).as_bytes())?;
    log::info!(
        "best checkpoint at step {} (validation loss {:?})",
        outcome.best.step,
        outcome.best_val_loss
    );
    out.finish("train", &cfg, vec![d1, d2], started)
}

fn eval_cmd(
    global: &GlobalArgs,
    data: &Path,
    checkpoint: &Path,
    mode: Option<EvalModeArg>,
) -> CmdResult {
    let started = Instant::now();
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = load_config(global, Some(&ckpt.config_text))?;
    let mode = match mode {
        Some(EvalModeArg::Amer) => EvalMode::Amer,
        Some(EvalModeArg::SingleQuery) => EvalMode::SingleQuery,
        Some(EvalModeArg::SingleQueryMmr) => EvalMode::SingleQueryMmr,
        None => match ckpt.mode {
            TrainMode::Amer => EvalMode::Amer,
            TrainMode::SingleQuery => EvalMode::SingleQuery,
        },
    };
    let (test, d1) = load_split(data, TEST_FILE)?;
    let (val, d2) = load_split(data, VAL_FILE)?;
    let (corpus, d3) = load_corpus_path(data)?;
    let index = FlatIndex::build(&corpus)?;
    let report = evaluate_model(&ckpt.params, &test, Some(&val), &index, &cfg.eval, mode)?;
    let mut out = Outputs::new(out_dir(global)?);
    out.write("report.toml", report.to_toml()?.as_bytes())?;
    out.write("report.csv", report.to_csv().as_bytes())?;
    let m_pred = if mode == EvalMode::Amer {
        cfg.eval.m_pred
    } else {
        1
    };
    let embeddings = decode_dataset(&ckpt.params, &test, m_pred)?;
    let lists = retrieval_lists(&embeddings, &test, &index, &cfg.eval, report.mmr_lambda)?;
    out.write("run.txt", format_run(&lists).as_bytes())?;
    out.write(
        "targets.txt",
        format_targets(&dataset_targets(&test)).as_bytes(),
    )?;
    for r in &report.overall {
        println!("{} MRecall@{} = {:.4}", report.mode, r.k, r.mrecall);
    }
    let ck = digest_file(checkpoint, &checkpoint.display().to_string())?;
    out.finish("eval", &cfg, vec![ck, d1, d2, d3], started)
}

fn analyze_cmd(
    global: &GlobalArgs,
    data: Option<&Path>,
    split: SplitArg,
    run: Option<&Path>,
    targets: Option<&Path>,
    corpus: Option<&Path>,
) -> CmdResult {
    let started = Instant::now();
    let cfg = load_config(global, None)?;
    let mut out = Outputs::new(out_dir(global)?);
    match (run, targets, corpus, data) {
        (Some(run), Some(targets), Some(corpus), _) => {
            let lists = parse_run(&String::from_utf8_lossy(&read_file(run)?), run)?;
            let t = parse_targets(&String::from_utf8_lossy(&read_file(targets)?), targets)?;
            let (corpus_data, d3) = load_corpus_path(corpus)?;
            let index = FlatIndex::build(&corpus_data)?;
            let report = evaluate_run(&lists, &t, &index, &cfg.eval)?;
            out.write("report.toml", report.to_toml()?.as_bytes())?;
            out.write("report.csv", report.to_csv().as_bytes())?;
            let inputs = vec![
                digest_file(run, &run.display().to_string())?,
                digest_file(targets, &targets.display().to_string())?,
                d3,
            ];
            out.finish("analyze", &cfg, inputs, started)
        }
        (None, None, None, Some(dir)) => {
            let name = match split {
                SplitArg::Train => TRAIN_FILE,
                SplitArg::Val => VAL_FILE,
                SplitArg::Test => TEST_FILE,
            };
            let (ds, d1) = load_split(dir, name)?;
            let units = ds
                .records
                .iter()
                .map(|r| r.unit_targets())
                .collect::<amer_core::Result<Vec<_>>>()?;
            let views: Vec<Vec<&[f32]>> = units
                .iter()
                .map(|u| u.iter().map(|v| v.as_slice()).collect())
                .collect();
            let mut csv = String::from("query,metric,statistic,bin\n");
            for metric in [DiversityMetric::Euclidean, DiversityMetric::Cosine] {
                let bins = diversity_bins(&views, metric, cfg.eval.bins)?;
                for (r, b) in ds.records.iter().zip(&bins) {
                    csv.push_str(&format!(
                        "{},{},{:.6},{}\n",
                        r.target_ids[0] / ds.m as u64,
                        metric.name(),
                        b.statistic,
                        b.bin
                    ));
                }
            }
            out.write("bins.csv", csv.as_bytes())?;
            out.finish("analyze", &cfg, vec![d1], started)
        }
        _ => Err(Failure::Usage(
            "analyze needs either --data DIR or all of --run, --targets and --corpus".into(),
        )),
    }
}

fn rerank_cmd(global: &GlobalArgs, run: &Path, corpus: &Path, lambda: f64, k: usize) -> CmdResult {
    let started = Instant::now();
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Failure::Usage(format!(
            "--lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let cfg = load_config(global, None)?;
    let lists = parse_run(&String::from_utf8_lossy(&read_file(run)?), run)?;
    let (corpus_data, d2) = load_corpus_path(corpus)?;
    let index = FlatIndex::build(&corpus_data)?;
    let reranked = lists
        .iter()
        .map(|l| rerank_list(&index, l, lambda, k))
        .collect::<amer_core::Result<Vec<_>>>()?;
    let mut out = Outputs::new(out_dir(global)?);
    out.write("reranked.run", format_run(&reranked).as_bytes())?;
    out.finish(
        "rerank",
        &cfg,
        vec![digest_file(run, &run.display().to_string())?, d2],
        started,
    )
}

fn dispatch(cli: Cli) -> CmdResult {
    let g = &cli.global;
    match &cli.command {
        Command::GenData { setting, transform } => gen_data(g, *setting, *transform),
        Command::BuildIndex { data } => build_index(data),
        Command::Train {
            data,
            mode,
            feedback,
            steps,
        } => train_cmd(g, data, *mode, *feedback, *steps),
        Command::Eval {
            data,
            checkpoint,
            mode,
        } => eval_cmd(g, data, checkpoint, *mode),
        Command::Analyze {
            data,
            split,
            run,
            targets,
            corpus,
        } => analyze_cmd(
            g,
            data.as_deref(),
            *split,
            run.as_deref(),
            targets.as_deref(),
            corpus.as_deref(),
        ),
        Command::Rerank {
            run,
            corpus,
            lambda,
            k,
        } => rerank_cmd(g, run, corpus, *lambda, *k),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.global.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return 1;
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 2;
        }
    };
    match pool.install(|| dispatch(cli)) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}
