//! Command-line front end: `train`, `eval`, `synth` and `inspect`.
//!
//! Run settings come from an optional flat JSON file (`--config`), then flags
//! override individual fields. `train` writes the fully resolved settings back
//! as `config.json`, and `eval`/`inspect` pick that file up from next to the
//! checkpoint when no `--config` is given.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{kshot_split, read_dataset, synth_generate, write_dataset, Dataset, SynthSpec};
use crate::data::{read_json, write_json};
use crate::error::{Error, Result};
use crate::fusion::{prototype_attribution, BagPriors};
use crate::metrics::{Metrics, MetricsReport};
use crate::model::{libra_trace, prototype_gradients, Model, ModelKind};
use crate::numkernel::Matrix;
use crate::prototype::InitStrategy;
use crate::training::{cross_validate, evaluate, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(
    name = "libra-mil",
    version,
    about = "Prototype-fused multiple-instance learning",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model per cross-validation fold.
    Train(RunFlags),
    /// Score trained checkpoints on their folds' test bags.
    Eval {
        #[command(flatten)]
        run: RunFlags,
        /// A checkpoint file or a directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Print the report as JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Generate a planted-prototype dataset.
    Synth(SynthFlags),
    /// Dump the intermediates of one bag as CSV.
    Inspect {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bag identifier from the dataset manifest.
        #[arg(long)]
        bag: String,
    },
}

#[derive(Debug, Default, Args)]
pub struct RunFlags {
    /// Flat JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest, or a directory containing `manifest.json`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Container holding the prior embeddings, replacing the manifest's.
    #[arg(long)]
    pub priors: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "libra|maxpool|abmil")]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub k_shot: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub ot_iters: Option<usize>,
    #[arg(long)]
    pub kv: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "kmeans|random")]
    pub init: Option<InitStrategy>,
    #[arg(long)]
    pub freeze_textual: bool,
    #[arg(long)]
    pub detach_marginals: bool,
    #[arg(long)]
    pub log_domain: bool,
    /// Train folds concurrently.
    #[arg(long)]
    pub parallel_folds: bool,
}

#[derive(Debug, Args)]
pub struct SynthFlags {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON generator spec; flags override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub bags_per_class: Option<usize>,
    #[arg(long)]
    pub min_instances: Option<usize>,
    #[arg(long)]
    pub max_instances: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub prototypes_per_class: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub witness_rate: Option<f64>,
    #[arg(long)]
    pub prior_noise: Option<f64>,
}

/// Everything a run needs, as stored in `config.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub priors: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub parallel_folds: bool,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl RunConfig {
    /// Loads `base` (if any) and applies the flags on top.
    pub fn resolve(flags: &RunFlags, base: Option<&Path>) -> Result<Self> {
        let mut cfg = match flags.config.as_deref().or(base) {
            Some(p) => read_json::<RunConfig>(p)?,
            None => RunConfig::default(),
        };
        let t = &mut cfg.train;
        macro_rules! set {
            ($flag:ident => $field:expr) => {
                if let Some(v) = flags.$flag.clone() {
                    $field = v;
                }
            };
        }
        set!(model => t.model_kind);
        set!(k_shot => t.k_shot);
        set!(seed => t.seed);
        set!(epsilon => t.epsilon);
        set!(ot_iters => t.ot_iters);
        set!(kv => t.k_v);
        set!(hidden => t.hidden);
        set!(heads => t.heads);
        set!(lr => t.learning_rate);
        set!(epochs => t.max_epochs);
        set!(patience => t.patience);
        set!(batch_size => t.batch_size);
        set!(init => t.init_strategy);
        t.freeze_textual |= flags.freeze_textual;
        t.detach_marginals |= flags.detach_marginals;
        t.log_domain |= flags.log_domain;
        cfg.parallel_folds |= flags.parallel_folds;
        if flags.data.is_some() {
            cfg.data = flags.data.clone();
        }
        if flags.priors.is_some() {
            cfg.priors = flags.priors.clone();
        }
        if flags.out.is_some() {
            cfg.out = flags.out.clone();
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let data = self
            .data
            .as_deref()
            .ok_or_else(|| Error::invalid("no dataset given (use --data)"))?;
        let manifest = if data.is_dir() {
            data.join("manifest.json")
        } else {
            data.to_path_buf()
        };
        if !manifest.exists() {
            return Err(Error::invalid(format!(
                "dataset manifest {} does not exist",
                manifest.display()
            )));
        }
        read_dataset(&manifest, self.priors.as_deref())
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::invalid("no output directory given (use --out)"))
    }
}

/// Trained weights of one fold plus what is needed to check them against a config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub fold: usize,
    pub seed: u64,
    pub k_shot: usize,
    pub dim: usize,
    pub classes: usize,
    pub model: Model,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = read_json(path)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                ck.version
            )));
        }
        if !ck.model.is_finite() {
            return Err(Error::Format(format!(
                "{}: non-finite weights",
                path.display()
            )));
        }
        Ok(ck)
    }

    fn check_against(&self, cfg: &TrainConfig, ds: &Dataset) -> Result<()> {
        let mismatch = |what: &str, ck: String, cf: String| {
            Err(Error::Consistency(format!(
                "checkpoint/config mismatch: {what} is {ck} in the checkpoint but {cf} in the config"
            )))
        };
        if self.model.kind() != cfg.model_kind {
            return mismatch(
                "model",
                self.model.kind().to_string(),
                cfg.model_kind.to_string(),
            );
        }
        if self.seed != cfg.seed {
            return mismatch("seed", self.seed.to_string(), cfg.seed.to_string());
        }
        if self.k_shot != cfg.k_shot {
            return mismatch("k_shot", self.k_shot.to_string(), cfg.k_shot.to_string());
        }
        if self.dim != ds.dim || self.model.dim() != ds.dim {
            return mismatch("embedding width", self.dim.to_string(), ds.dim.to_string());
        }
        if self.classes != ds.num_classes() || self.model.num_classes() != ds.num_classes() {
            return mismatch(
                "class count",
                self.classes.to_string(),
                ds.num_classes().to_string(),
            );
        }
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("checkpoint_fold{fold}.json"))
}

pub fn history_path(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("history_fold{fold}.jsonl"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Trains every fold and writes `config.json`, one checkpoint and one JSONL
/// history per fold. Returns the test metrics of each fold.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<Metrics>> {
    let out = cfg.out_dir()?;
    let ds = cfg.load_dataset()?;
    let folds = cross_validate(&ds, &cfg.train, cfg.parallel_folds)?;
    create_dir(out)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    for f in &folds {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            fold: f.fold,
            seed: cfg.train.seed,
            k_shot: cfg.train.k_shot,
            dim: ds.dim,
            classes: ds.num_classes(),
            model: f.params.model.clone(),
        };
        write_json(&checkpoint_path(out, f.fold), &ck)?;
        let path = history_path(out, f.fold);
        let mut text = String::new();
        for rec in &f.history {
            let line = serde_json::to_string(rec).map_err(|source| Error::Json {
                path: path.clone(),
                source,
            })?;
            text.push_str(&line);
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        info!(
            "fold {}: {} epochs, test accuracy {:.4}",
            f.fold,
            f.history.len(),
            f.metrics.accuracy
        );
    }
    Ok(folds.iter().map(|f| f.metrics).collect())
}

/// Metrics in percent, rounded to two decimals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentMetrics {
    pub acc: f64,
    pub f1: f64,
    pub auc: f64,
}

impl From<Metrics> for PercentMetrics {
    fn from(m: Metrics) -> Self {
        let pct = |x: f64| (x * 10_000.0).round() / 100.0;
        Self {
            acc: pct(m.accuracy),
            f1: pct(m.macro_f1),
            auc: pct(m.macro_auc),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    #[serde(flatten)]
    pub metrics: PercentMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub folds: Vec<FoldReport>,
    pub mean: PercentMetrics,
    pub std: PercentMetrics,
    /// Unrounded fractions.
    pub raw: MetricsReport,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let line =
            |m: &PercentMetrics| format!("ACC: {:.2}  F1: {:.2}  AUC: {:.2}", m.acc, m.f1, m.auc);
        if self.folds.len() == 1 {
            let f = &self.folds[0];
            s.push_str(&format!("fold {}\n{}\n", f.fold, line(&f.metrics)));
            return s;
        }
        for f in &self.folds {
            s.push_str(&format!("fold {}: {}\n", f.fold, line(&f.metrics)));
        }
        s.push_str(&format!(
            "ACC: {:.2} ± {:.2}\n",
            self.mean.acc, self.std.acc
        ));
        s.push_str(&format!("F1: {:.2} ± {:.2}\n", self.mean.f1, self.std.f1));
        s.push_str(&format!(
            "AUC: {:.2} ± {:.2}\n",
            self.mean.auc, self.std.auc
        ));
        s
    }
}

/// Checkpoint files under `path`, which is either one file or a `train` output directory.
fn checkpoint_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        if !path.exists() {
            return Err(Error::invalid(format!(
                "checkpoint {} does not exist",
                path.display()
            )));
        }
        return Ok(vec![path.to_path_buf()]);
    }
    let files: Vec<PathBuf> = (0..crate::data::NUM_FOLDS)
        .map(|f| checkpoint_path(path, f))
        .filter(|p| p.exists())
        .collect();
    if files.is_empty() {
        return Err(Error::invalid(format!(
            "no checkpoints in {}",
            path.display()
        )));
    }
    Ok(files)
}

/// The `config.json` written by `train` next to a checkpoint.
pub fn sibling_config(checkpoint: &Path) -> Option<PathBuf> {
    let dir = if checkpoint.is_dir() {
        checkpoint
    } else {
        checkpoint.parent()?
    };
    let p = dir.join(CONFIG_FILE);
    p.exists().then_some(p)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    let ds = cfg.load_dataset()?;
    let plan = kshot_split(&ds, cfg.train.k_shot, cfg.train.seed)?;
    let priors = BagPriors::new(ds.bag_priors.clone(), ds.num_classes())?;
    let fcfg = cfg.train.forward_config();
    let mut folds = Vec::new();
    let mut raw = Vec::new();
    for file in checkpoint_files(checkpoint)? {
        let ck = Checkpoint::load(&file)?;
        ck.check_against(&cfg.train, &ds)?;
        let fold = plan.folds.get(ck.fold).ok_or_else(|| {
            Error::Consistency(format!("{}: fold {} out of range", file.display(), ck.fold))
        })?;
        let test: Vec<_> = fold.test.iter().map(|&i| ds.bags[i].clone()).collect();
        let m = evaluate(&test, &priors, &ck.model, &fcfg)?;
        folds.push(FoldReport {
            fold: ck.fold,
            metrics: m.into(),
        });
        raw.push(m);
    }
    let raw = MetricsReport::from_folds(raw)?;
    Ok(EvalReport {
        folds,
        mean: raw.mean.into(),
        std: raw.std.into(),
        raw,
    })
}

pub fn cmd_synth(spec: &SynthSpec, seed: u64, out: &Path) -> Result<PathBuf> {
    #[derive(Serialize)]
    struct Echo<'a> {
        seed: u64,
        #[serde(flatten)]
        spec: &'a SynthSpec,
    }
    let ds = synth_generate(spec, seed)?;
    let manifest = write_dataset(&ds, out)?;
    write_json(&out.join("synth_spec.json"), &Echo { seed, spec })?;
    Ok(manifest)
}

fn write_csv(
    path: &Path,
    header: &[String],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// `prefix0, prefix1, ...` header over the columns of `m`.
fn write_matrix(path: &Path, prefix: &str, m: &Matrix) -> Result<()> {
    let header: Vec<String> = (0..m.cols()).map(|c| format!("{prefix}{c}")).collect();
    write_csv(
        path,
        &header,
        m.iter_rows()
            .map(|r| r.iter().map(|v| v.to_string()).collect()),
    )
}

/// Certificate for `plan.csv`: row sums should match `mu` within `marginal_violation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub iterations_run: usize,
    pub marginal_violation: f64,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Writes the similarity matrices, transport plan, fused scores, attention
/// maps, prototype gradients and their attribution scores for one bag.
pub fn cmd_inspect(cfg: &RunConfig, checkpoint: &Path, bag_id: &str) -> Result<Vec<PathBuf>> {
    let out = cfg.out_dir()?;
    let ds = cfg.load_dataset()?;
    let ck = Checkpoint::load(checkpoint)?;
    ck.check_against(&cfg.train, &ds)?;
    let Model::Libra(params) = &ck.model else {
        return Err(Error::invalid(format!(
            "inspect needs a libra checkpoint, got {}",
            ck.model.kind()
        )));
    };
    let bag = ds
        .find(bag_id)
        .ok_or_else(|| Error::invalid(format!("unknown bag id {bag_id:?}")))?;
    let priors = BagPriors::new(ds.bag_priors.clone(), ds.num_classes())?;
    let fcfg = cfg.train.forward_config();
    let trace = libra_trace(&bag.features, &priors, params, &fcfg)?;
    let (gv, gt) = prototype_gradients(&bag.features, &priors, &ck.model, &fcfg)?;
    let attribution = prototype_attribution(&gv, &gt);

    create_dir(out)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, prefix: &str, m: &Matrix| -> Result<()> {
        let p = out.join(name);
        write_matrix(&p, prefix, m)?;
        written.push(p);
        Ok(())
    };
    emit("s_visual.csv", "visual", &trace.similarity.s_visual)?;
    emit("s_textual.csv", "textual", &trace.similarity.s_textual)?;
    emit("plan.csv", "textual", &trace.plan.plan)?;
    let fused = Matrix::from_fn(bag.len(), 2, |r, c| {
        if c == 0 {
            trace.fused.as_slice()[r]
        } else {
            trace.reweighted.weights[r]
        }
    });
    let p = out.join("fused_scores.csv");
    write_csv(
        &p,
        &["fused_score".into(), "weight".into()],
        fused
            .iter_rows()
            .map(|r| r.iter().map(|v| v.to_string()).collect()),
    )?;
    written.push(p);
    for (h, map) in trace.attention.maps.iter().enumerate() {
        let p = out.join(format!("attention_head{h}.csv"));
        write_matrix(&p, "instance", map)?;
        written.push(p);
    }
    let p = out.join("grad_visual.csv");
    write_matrix(&p, "dim", &gv)?;
    written.push(p);
    let p = out.join("grad_textual.csv");
    write_matrix(&p, "dim", &gt)?;
    written.push(p);

    let p = out.join("attribution.csv");
    let rows = attribution
        .visual
        .iter()
        .enumerate()
        .map(|(i, s)| vec!["visual".to_string(), i.to_string(), s.to_string()])
        .chain(
            attribution
                .textual
                .iter()
                .enumerate()
                .map(|(i, s)| vec!["textual".to_string(), i.to_string(), s.to_string()]),
        );
    write_csv(
        &p,
        &["modality".into(), "prototype".into(), "score".into()],
        rows,
    )?;
    written.push(p);

    let p = out.join("plan_summary.json");
    write_json(
        &p,
        &PlanSummary {
            iterations_run: trace.plan.iterations_run,
            marginal_violation: trace.plan.marginal_violation,
            mu: trace.marginals.mu().as_slice().to_vec(),
            nu: trace.marginals.nu().as_slice().to_vec(),
            probabilities: trace.probabilities.as_slice().to_vec(),
        },
    )?;
    written.push(p);
    Ok(written)
}

fn synth_spec(flags: &SynthFlags) -> Result<SynthSpec> {
    let mut spec = match &flags.spec {
        Some(p) => read_json::<SynthSpec>(p)?,
        None => SynthSpec::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = flags.$field {
                spec.$field = v;
            })*
        };
    }
    set!(
        classes,
        bags_per_class,
        min_instances,
        max_instances,
        dim,
        prototypes_per_class,
        noise,
        witness_rate,
        prior_noise
    );
    spec.validate()?;
    Ok(spec)
}

/// Executes one parsed command, writing user-facing output to `stdout`.
pub fn run(cli: Cli, stdout: &mut impl Write) -> Result<()> {
    let print = |stdout: &mut dyn Write, s: &str| -> Result<()> {
        stdout
            .write_all(s.as_bytes())
            .map_err(|e| Error::io("<stdout>", e))
    };
    match cli.command {
        Command::Train(flags) => {
            let cfg = RunConfig::resolve(&flags, None)?;
            let metrics = cmd_train(&cfg)?;
            let report = MetricsReport::from_folds(metrics)?;
            let m = PercentMetrics::from(report.mean);
            print(
                stdout,
                &format!(
                    "trained {} folds into {}; test ACC {:.2}\n",
                    report.folds.len(),
                    cfg.out_dir()?.display(),
                    m.acc
                ),
            )
        }
        Command::Eval {
            run,
            checkpoint,
            json,
        } => {
            let cfg = RunConfig::resolve(&run, sibling_config(&checkpoint).as_deref())?;
            let report = cmd_eval(&cfg, &checkpoint)?;
            // Only an explicit --out; the inherited one is the training directory.
            if let Some(out) = &run.out {
                create_dir(out)?;
                write_json(&out.join("metrics.json"), &report)?;
            }
            if json {
                let text = serde_json::to_string_pretty(&report).map_err(|source| Error::Json {
                    path: "<stdout>".into(),
                    source,
                })?;
                print(stdout, &(text + "\n"))
            } else {
                print(stdout, &report.render())
            }
        }
        Command::Synth(flags) => {
            let spec = synth_spec(&flags)?;
            let manifest = cmd_synth(&spec, flags.seed, &flags.out)?;
            print(stdout, &format!("wrote {}\n", manifest.display()))
        }
        Command::Inspect {
            run,
            checkpoint,
            bag,
        } => {
            let cfg = RunConfig::resolve(&run, sibling_config(&checkpoint).as_deref())?;
            if run.out.is_none() {
                return Err(Error::invalid("no output directory given (use --out)"));
            }
            let files = cmd_inspect(&cfg, &checkpoint, &bag)?;
            print(
                stdout,
                &format!(
                    "wrote {} files to {}\n",
                    files.len(),
                    cfg.out_dir()?.display()
                ),
            )
        }
    }
}
