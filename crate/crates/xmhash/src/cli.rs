//! Command-line pipeline: dataset generation, training, encoding,
//! evaluation and the built-in verification suite.
//!
//! Every command is deterministic given its flags and seed. `eval` only
//! ever opens checkpoint files for reading. Verbosity is controlled by the
//! `XMHASH_LOG` environment variable (standard log-filter syntax, default
//! `info`).
//!
//! Training hyper-parameters resolve in three layers: built-in defaults,
//! then an optional JSON config file whose keys mirror the parameter
//! struct's field names, then individual command-line flags. The query-set
//! size is special-cased: left unset it becomes `min(2000, database
//! size)`, while an explicit `--m` larger than the database is an error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, save_dataset, Dataset};
use crate::encoder::forward;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::objective::HyperParams;
use crate::retrieval::{MetricsReport, PackedCode, QuerySet, RetrievalIndex};
use crate::selfcheck::{run_all, CheckOverrides};
use crate::solver::{sign_pm, CodeMatrix};
use crate::synth::{generate, SynthSpec};
use crate::trainer::{load_checkpoint, resume_training, save_checkpoint, train, ModelState};

/// Precision-at-n cutoffs evaluated by `eval`; cutoffs beyond the database
/// size are dropped.
pub const P_AT_N_CUTOFFS: [usize; 7] = [1, 5, 10, 50, 100, 500, 1000];

/// File names the commands write.
pub const METRICS_FILE: &str = "metrics.json";
pub const PR_T2I_FILE: &str = "pr_t_to_i.csv";
pub const PR_I2T_FILE: &str = "pr_i_to_t.csv";
pub const IMAGE_CODES_FILE: &str = "image_codes.bin";
pub const TEXT_CODES_FILE: &str = "text_codes.bin";

#[derive(Debug, Parser)]
#[command(
    name = "xmhash",
    about = "Cross-modal hashing: unified binary codes for paired image/text data",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-label dataset (JSON lines).
    GenData(GenDataArgs),
    /// Train the hash encoders, database codes and code classifier.
    Train(TrainArgs),
    /// Hash every instance of a dataset with a trained checkpoint.
    Encode(EncodeArgs),
    /// Compute cross-modal retrieval metrics on the held-out slice.
    Eval(EvalArgs),
    /// Run the built-in verification suite.
    Selfcheck,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output dataset file.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of clusters; doubles as the number of label classes.
    #[arg(long, default_value_t = 3)]
    pub clusters: usize,
    /// Instances per cluster.
    #[arg(long, default_value_t = 200)]
    pub per_cluster: usize,
    /// Image feature dimension.
    #[arg(long, default_value_t = 32)]
    pub d_x: usize,
    /// Text vocabulary size.
    #[arg(long, default_value_t = 100)]
    pub d_y: usize,
    /// Image feature noise (standard deviation).
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    /// Probability an instance mixes in a second cluster (two labels).
    #[arg(long, default_value_t = 0.2)]
    pub mix_prob: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Hyper-parameter flags; each one overrides the config file and the
/// built-in default.
#[derive(Debug, Args, Clone, Default)]
pub struct HyperOverrides {
    /// Code length in bits.
    #[arg(long)]
    pub k: Option<usize>,
    /// Weight of the encoder-output classification terms.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight of the code classification term.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Weight of the code/output consistency term.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Ridge regularization on the code classifier.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Weight of the image-output/text-output agreement term.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Query rows sampled per outer iteration; defaults to min(2000,
    /// database size).
    #[arg(long)]
    pub m: Option<usize>,
    /// Outer alternating iterations.
    #[arg(long)]
    pub t_out: Option<usize>,
    /// Encoder SGD epochs per outer iteration (each modality).
    #[arg(long)]
    pub t_in: Option<usize>,
    /// Mini-batch size for encoder SGD.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Learning rate of the image encoder.
    #[arg(long)]
    pub lr_img: Option<f64>,
    /// Learning rate of the text encoder.
    #[arg(long)]
    pub lr_txt: Option<f64>,
    /// Hidden width of the image encoder.
    #[arg(long)]
    pub hidden_img: Option<usize>,
    /// Hidden width of the text encoder.
    #[arg(long)]
    pub hidden_txt: Option<usize>,
}

impl HyperOverrides {
    pub fn apply(&self, hp: &mut HyperParams) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { hp.$field = v; })*
            };
        }
        set!(k, alpha, beta, gamma, eta, mu, m, t_out, t_in, batch, lr_img, lr_txt, hidden_img, hidden_txt);
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Input dataset file (from gen-data or compatible).
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file; keys mirror the hyper-parameter field names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of trailing records reserved as evaluation queries; the
    /// model never sees them.
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    /// Continue a checkpoint in --out up to --t-out total iterations; the
    /// checkpoint's own hyper-parameters and seed are kept.
    #[arg(long, default_value_t = false)]
    pub resume: bool,
    #[command(flatten)]
    pub overrides: HyperOverrides,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Dataset file whose instances should be hashed.
    #[arg(long)]
    pub data: PathBuf,
    /// Trained checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for the packed code files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset file; must be the one the checkpoint was trained on.
    #[arg(long)]
    pub data: PathBuf,
    /// Trained checkpoint directory (read-only).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for metrics JSON and PR-curve CSVs.
    #[arg(long)]
    pub out: PathBuf,
    /// Holdout fraction; must match the value used at training time.
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
}

/// Both retrieval directions of one evaluation. `t_to_i` ranks the
/// database codes against text queries hashed by the text encoder;
/// `i_to_t` mirrors this with image queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub t_to_i: MetricsReport,
    pub i_to_t: MetricsReport,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serialization cannot fail");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::parse(format!("metrics {}", path.display()), e.to_string()))
    }
}

/// Dispatch a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(&args).map(|()| 0),
        Command::Train(args) => cmd_train(&args).map(|()| 0),
        Command::Encode(args) => cmd_encode(&args).map(|()| 0),
        Command::Eval(args) => cmd_eval(&args).map(|()| 0),
        Command::Selfcheck => cmd_selfcheck(),
    }
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let spec = SynthSpec {
        clusters: args.clusters,
        per_cluster: args.per_cluster,
        d_x: args.d_x,
        d_y: args.d_y,
        noise: args.noise,
        mix_prob: args.mix_prob,
        seed: args.seed,
    };
    let ds = generate(&spec);
    save_dataset(&ds, &args.out)?;
    log::info!(
        "wrote {} instances ({} clusters) to {}",
        ds.n(),
        args.clusters,
        args.out.display()
    );
    Ok(())
}

/// Resolve the query-set size: unset means min(2000, database size);
/// an explicit value larger than the database is an error (a smaller
/// config-file value is clamped the same way as the default).
fn resolve_m(hp: &mut HyperParams, n_db: usize, explicit: bool) -> Result<()> {
    if hp.m > n_db {
        if explicit {
            return Err(Error::Config(format!(
                "--m {} exceeds the database size {n_db}",
                hp.m
            )));
        }
        hp.m = n_db;
    }
    Ok(())
}

fn split_for_training(data: &Path, holdout: f64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=0.9).contains(&holdout) {
        return Err(Error::Config(format!(
            "holdout fraction {holdout} outside [0, 0.9]"
        )));
    }
    let ds = load_dataset(data)?;
    let (db, hold) = ds.split_holdout(holdout);
    if db.n() == 0 {
        return Err(Error::Config(
            "holdout split left an empty database".into(),
        ));
    }
    Ok((db, hold))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let (db, hold) = split_for_training(&args.data, args.holdout)?;
    log::info!(
        "training on {} instances ({} held out for evaluation)",
        db.n(),
        hold.n()
    );

    if args.resume {
        let (mut state, mut log, mut hp) = load_checkpoint(&args.out)?;
        if let Some(t_out) = args.overrides.t_out {
            hp.t_out = t_out;
        }
        hp.validate(db.n())?;
        resume_training(&mut state, &mut log, &db, &hp)?;
        return save_checkpoint(&args.out, &state, &log, &hp);
    }

    let mut hp = match &args.config {
        Some(path) => load_hyper_config(path)?,
        None => HyperParams::default(),
    };
    args.overrides.apply(&mut hp);
    resolve_m(&mut hp, db.n(), args.overrides.m.is_some())?;
    hp.validate(db.n())?;

    let (state, log) = train(&db, &hp, args.seed)?;
    save_checkpoint(&args.out, &state, &log, &hp)
}

fn load_hyper_config(path: &Path) -> Result<HyperParams> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::parse(format!("config {}", path.display()), e.to_string()))
}

/// Sign matrix of an encoder's outputs over the given rows.
fn encode_signs(out: &Matrix) -> CodeMatrix {
    CodeMatrix::from_real(Matrix::from_fn(out.rows(), out.cols(), |i, q| {
        sign_pm(out[(i, q)])
    }))
}

pub fn cmd_encode(args: &EncodeArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let (state, _, _) = load_checkpoint(&args.checkpoint)?;
    check_encoder_dims(&state, &ds)?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let all: Vec<usize> = (0..ds.n()).collect();
    let (img_out, _) = forward(&state.theta, &ds.image_matrix(&all));
    encode_signs(&img_out).save(&args.out.join(IMAGE_CODES_FILE))?;
    let (txt_out, _) = forward(&state.psi, &ds.text_matrix(&all));
    encode_signs(&txt_out).save(&args.out.join(TEXT_CODES_FILE))?;
    log::info!("hashed {} instances into {}", ds.n(), args.out.display());
    Ok(())
}

fn check_encoder_dims(state: &ModelState, ds: &Dataset) -> Result<()> {
    if state.theta.in_dim() != ds.d_x() || state.psi.in_dim() != ds.d_y() {
        return Err(Error::Config(format!(
            "checkpoint expects image/text dimensions {}/{} but the dataset has {}/{}",
            state.theta.in_dim(),
            state.psi.in_dim(),
            ds.d_x(),
            ds.d_y()
        )));
    }
    Ok(())
}

/// Pack each row of an encoder output into a query code. Row-wise this is
/// exactly the single-instance hashing path.
fn pack_rows(out: &Matrix) -> Vec<PackedCode> {
    (0..out.rows())
        .map(|i| PackedCode::from_signs(out.row(i)))
        .collect()
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (db, hold) = split_for_training(&args.data, args.holdout)?;
    if hold.n() == 0 {
        return Err(Error::Config(
            "holdout split produced no evaluation queries".into(),
        ));
    }
    let (state, _, _) = load_checkpoint(&args.checkpoint)?;
    check_encoder_dims(&state, &db)?;
    if state.b.n() != db.n() {
        return Err(Error::Config(format!(
            "checkpoint codes cover {} instances but the database slice has {}; \
             use the same --holdout as at training time",
            state.b.n(),
            db.n()
        )));
    }

    let index = RetrievalIndex::new(state.b.clone(), db.labels_matrix());
    let hold_rows: Vec<usize> = (0..hold.n()).collect();
    let query_labels = hold.labels_matrix();

    // T -> I: text queries hashed by the text encoder, ranked against the
    // unified database codes.
    let (txt_out, _) = forward(&state.psi, &hold.text_matrix(&hold_rows));
    let t_queries = QuerySet::new(pack_rows(&txt_out), query_labels.clone());
    let t_to_i = MetricsReport::compute(&index, &t_queries, &P_AT_N_CUTOFFS);

    // I -> T: image queries hashed by the image encoder.
    let (img_out, _) = forward(&state.theta, &hold.image_matrix(&hold_rows));
    let i_queries = QuerySet::new(pack_rows(&img_out), query_labels);
    let i_to_t = MetricsReport::compute(&index, &i_queries, &P_AT_N_CUTOFFS);

    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let report = EvalReport { t_to_i, i_to_t };
    report.save(&args.out.join(METRICS_FILE))?;
    report.t_to_i.save_pr_csv(&args.out.join(PR_T2I_FILE))?;
    report.i_to_t.save_pr_csv(&args.out.join(PR_I2T_FILE))?;
    log::info!(
        "MAP: text-to-image {:.4}, image-to-text {:.4} ({} queries against {} codes)",
        report.t_to_i.map,
        report.i_to_t.map,
        hold.n(),
        db.n()
    );
    Ok(())
}

pub fn cmd_selfcheck() -> Result<i32> {
    let reports = run_all(&CheckOverrides::default());
    let mut all_passed = true;
    for r in &reports {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status}  {}  ({})", r.name, r.detail);
        all_passed &= r.passed;
    }
    Ok(if all_passed { 0 } else { 1 })
}
