//! Command-line driver: synthetic data, preprocessing, training, evaluation,
//! analysis, ablations and gradient checking.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablation::{run_suite, suite_arms, train_arm, Suite};
use crate::analysis::{
    distance_stats, export_heatmap, model_attention_stats, skew_report, AttentionScope,
};
use crate::data::synthetic::{generate_synthetic, sparse_transition, SyntheticSpec};
use crate::data::{
    cooccurrence_stats, load_catalog, load_interactions, preprocess, tokenize_windows,
    write_catalog, write_interactions, Dataset, Example, SplitName,
};
use crate::evaluation::{evaluate, DEFAULT_KS};
use crate::mask::{
    build_schedule, causal_mask, mask_for_scheme, BlockOrder, LayerSchedule, Scheme,
};
use crate::model::{forward, grad_check, MaskRouting, ModelConfig, ModelParams};
use crate::segmentation::{tokenize_prompt, ItemCatalog, PromptTemplate, Vocabulary};
use crate::training::{train, TrainConfig};

/// Gradient check gate on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

const DATASET_FILES: [&str; 3] = ["catalog.csv", "windows.csv", "split.csv"];

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or missing inputs; exit code 2.
    Usage(String),
    /// Anything that went wrong while doing the work; exit code 1.
    Failure(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Failure(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Debug, Parser)]
#[command(
    name = "hatrec",
    version,
    about = "Hierarchical attention-masking sequential recommender"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic Markov-chain corpus.
    Synth(SynthArgs),
    /// 5-core filter, window and split raw interactions.
    Preprocess(PreprocessArgs),
    /// Train a model into a run directory.
    Train(TrainArgs),
    /// Evaluate a trained run on a split.
    Evaluate(EvaluateArgs),
    /// Attention and data diagnostics.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Run an ablation suite.
    Ablate(AblateArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub users: usize,
    #[arg(long, default_value_t = 50)]
    pub items: usize,
    #[arg(long, default_value_t = 16)]
    pub seq_len: usize,
    /// Successors per item in the transition matrix.
    #[arg(long, default_value_t = 3)]
    pub out_degree: usize,
    #[arg(long, default_value_t = 64)]
    pub noise_vocab: usize,
    /// Use `item i<id>` titles instead of random words.
    #[arg(long)]
    pub plain_titles: bool,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub interactions: PathBuf,
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Overrides for [`RunConfig`]; any flag given wins over the config file.
#[derive(Debug, Args, Default, Clone)]
pub struct ConfigArgs {
    /// JSON run config to start from.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preprocessed dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    /// Layers in the IN block.
    #[arg(long)]
    pub shallow: Option<usize>,
    /// Layers in the CR block.
    #[arg(long)]
    pub deep: Option<usize>,
    /// Block order such as IN-OR-CR.
    #[arg(long)]
    pub order: Option<BlockOrder>,
    /// CR or CR_PRE for the deep block.
    #[arg(long)]
    pub deep_variant: Option<Scheme>,
    /// Plain causal model (every layer OR).
    #[arg(long)]
    pub all_or: bool,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Checkpoint {
    Best,
    Final,
}

impl Checkpoint {
    fn file(self) -> &'static str {
        match self {
            Checkpoint::Best => "best.ckpt",
            Checkpoint::Final => "final.ckpt",
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Dataset directory; defaults to the one the run was trained on.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
    pub ks: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Checkpoint::Best)]
    pub checkpoint: Checkpoint,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct RunInput {
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "valid")]
    pub split: String,
    #[arg(long, value_enum, default_value_t = Checkpoint::Best)]
    pub checkpoint: Checkpoint,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Intra- vs cross-item attention aggregates.
    AttnStats {
        #[command(flatten)]
        input: RunInput,
        /// Schemes whose layers are aggregated.
        #[arg(long, value_delimiter = ',', default_value = "OR")]
        scope: Vec<Scheme>,
        /// Use only the first N examples of the split.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean token distance of intra- and cross-item pairs.
    Distances {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Token-pair co-occurrence within vs across items.
    Cooccurrence {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export one head's attention matrix as CSV.
    Heatmap {
        #[command(flatten)]
        input: RunInput,
        #[arg(long, default_value_t = 0)]
        example: usize,
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the 0/1 mask of a scheme for one example.
    DumpMask {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 0)]
        example: usize,
        #[arg(long)]
        scheme: Scheme,
        /// Compose with the causal mask.
        #[arg(long)]
        causal: bool,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare attention skew of an all-OR run with a scheduled run.
    Skew {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        scheduled: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "valid")]
        split: String,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "CR")]
    pub deep_variant: Scheme,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 200)]
    pub coords: usize,
}

/// Everything needed to rebuild a run; written to `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub n_shallow: usize,
    pub n_deep: usize,
    pub order: BlockOrder,
    pub deep_variant: Scheme,
    pub all_or: bool,
    pub max_seq_len: Option<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            data: None,
            d_model: 32,
            n_heads: 2,
            n_layers: 3,
            ffn_dim: 64,
            n_shallow: 1,
            n_deep: 1,
            order: BlockOrder::CANONICAL,
            deep_variant: Scheme::Cr,
            all_or: false,
            max_seq_len: None,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_steps: t.max_steps,
            eval_every: t.eval_every,
            patience: t.patience,
            seed: t.seed,
        }
    }
}

impl RunConfig {
    /// Config file (if any) with flag overrides applied.
    pub fn resolve(args: &ConfigArgs) -> CliResult<Self> {
        let mut c = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", path.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::Usage(format!("invalid config {}: {e}", path.display()))
                })?
            }
            None => RunConfig::default(),
        };
        macro_rules! over {
            ($($flag:ident => $field:ident),*) => {$(
                if let Some(v) = args.$flag.clone() { c.$field = v; }
            )*};
        }
        over!(d_model => d_model, heads => n_heads, layers => n_layers, ffn_dim => ffn_dim,
              shallow => n_shallow, deep => n_deep, order => order, deep_variant => deep_variant,
              lr => learning_rate, batch_size => batch_size, max_steps => max_steps,
              eval_every => eval_every, patience => patience, seed => seed);
        if args.data.is_some() {
            c.data = args.data.clone();
        }
        if args.max_seq_len.is_some() {
            c.max_seq_len = args.max_seq_len;
        }
        c.all_or |= args.all_or;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> CliResult<()> {
        if !matches!(self.deep_variant, Scheme::Cr | Scheme::CrPre) {
            return usage("deep_variant must be CR or CR_PRE");
        }
        self.schedule()?;
        self.train_config()
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn schedule(&self) -> CliResult<LayerSchedule> {
        if self.all_or {
            return Ok(LayerSchedule::uniform(self.n_layers, Scheme::Or));
        }
        build_schedule(
            self.n_layers,
            self.n_shallow,
            self.n_deep,
            self.order,
            self.deep_variant,
        )
        .map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            eval_every: self.eval_every,
            patience: self.patience,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    /// Model config for `data`; `max_seq_len` must already be resolved.
    pub fn model_config(&self, data: &LoadedData) -> CliResult<ModelConfig> {
        let schedule = self.schedule()?;
        let cfg = ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: schedule.len(),
            ffn_dim: self.ffn_dim,
            max_seq_len: self.max_seq_len.unwrap_or(data.max_prompt_len),
            vocab_size: data.vocab.len(),
            n_items: data.catalog.n_items(),
            schedule,
            seed: self.seed,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    fn data_dir(&self) -> CliResult<&Path> {
        self.data.as_deref().ok_or_else(|| {
            CliError::Usage("no dataset given (use --data or the config's \"data\")".into())
        })
    }
}

/// Tokenized splits of a preprocessed dataset.
pub struct LoadedData {
    pub dataset: Dataset,
    pub catalog: ItemCatalog,
    pub vocab: Vocabulary,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    pub max_prompt_len: usize,
    pub hash: String,
}

impl LoadedData {
    pub fn split(&self, name: SplitName) -> &[Example] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }
}

fn require_dataset(dir: &Path) -> CliResult<()> {
    for f in DATASET_FILES {
        if !dir.join(f).is_file() {
            return usage(format!(
                "dataset not found: {} is missing {f} (run `hatrec preprocess` first)",
                dir.display()
            ));
        }
    }
    Ok(())
}

/// SHA-256 over the dataset files, in a fixed order.
pub fn dataset_hash(dir: &Path) -> anyhow::Result<String> {
    let mut h = Sha256::new();
    for f in DATASET_FILES {
        let bytes =
            fs::read(dir.join(f)).with_context(|| format!("reading {}", dir.join(f).display()))?;
        h.update(f.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn load_data(dir: &Path) -> CliResult<LoadedData> {
    require_dataset(dir)?;
    let dataset =
        Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let (catalog, vocab) = dataset.catalog().context("building catalog")?;
    let template = PromptTemplate::standard();
    let tok = |name| {
        tokenize_windows(dataset.split(name), &catalog, &template).context("tokenizing windows")
    };
    let train = tok(SplitName::Train)?;
    let valid = tok(SplitName::Valid)?;
    let test = tok(SplitName::Test)?;
    let max_prompt_len = train
        .iter()
        .chain(&valid)
        .chain(&test)
        .map(|e| e.0.len())
        .max()
        .unwrap_or(1);
    Ok(LoadedData {
        hash: dataset_hash(dir)?,
        dataset,
        catalog,
        vocab,
        train,
        valid,
        test,
        max_prompt_len,
    })
}

fn parse_split(name: &str) -> CliResult<SplitName> {
    SplitName::parse(name)
        .ok_or_else(|| CliError::Usage(format!("unknown split {name:?} (train, valid or test)")))
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map(|mut d| d.next().is_some())
            .unwrap_or(true);
        if non_empty && !force {
            return usage(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            ));
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn refuse_overwrite(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        ));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub data_hash: String,
    pub schedule: String,
    pub config: RunConfig,
}

fn manifest(cfg: &RunConfig, model: &ModelConfig, data_hash: &str) -> Manifest {
    Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        data_hash: data_hash.to_string(),
        schedule: model.schedule.to_string(),
        config: cfg.clone(),
    }
}

fn load_run(
    run_dir: &Path,
    data_override: Option<&Path>,
) -> CliResult<(RunConfig, LoadedData, ModelConfig)> {
    let path = run_dir.join("config.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Usage(format!("not a run directory ({}: {e})", path.display())))?;
    let mut cfg: RunConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(d) = data_override {
        cfg.data = Some(d.to_path_buf());
    }
    let data = load_data(cfg.data_dir()?)?;
    let model = cfg.model_config(&data)?;
    Ok((cfg, data, model))
}

fn load_params(run_dir: &Path, which: Checkpoint, model: &ModelConfig) -> CliResult<ModelParams> {
    let path = run_dir.join(which.file());
    Ok(ModelParams::load(&path, model).with_context(|| format!("loading {}", path.display()))?)
}

fn limited(examples: &[Example], limit: Option<usize>) -> &[Example] {
    &examples[..limit.unwrap_or(examples.len()).min(examples.len())]
}

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    prepare_dir(&a.out, a.force)?;
    let spec = SyntheticSpec {
        n_items: a.items,
        n_users: a.users,
        seq_len: a.seq_len,
        transition: sparse_transition(a.items, a.out_degree, a.seed.wrapping_add(1)),
        title_noise: !a.plain_titles,
        noise_vocab: a.noise_vocab,
        seed: a.seed,
    };
    let (seqs, catalog) = generate_synthetic(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    write_interactions(&a.out.join("interactions.csv"), &seqs).context("writing interactions")?;
    write_catalog(&a.out.join("catalog.csv"), &catalog).context("writing catalog")?;
    write_json(&a.out.join("spec.json"), &spec)?;
    println!(
        "wrote {} users, {} items to {}",
        a.users,
        a.items,
        a.out.display()
    );
    Ok(())
}

fn cmd_preprocess(a: &PreprocessArgs) -> CliResult<()> {
    for p in [&a.interactions, &a.catalog] {
        if !p.is_file() {
            return usage(format!("input not found: {}", p.display()));
        }
    }
    let seqs = load_interactions(&a.interactions).context("loading interactions")?;
    let catalog = load_catalog(&a.catalog).context("loading catalog")?;
    let (dataset, summary) = preprocess(&seqs, &catalog).context("preprocessing")?;
    prepare_dir(&a.out, a.force)?;
    dataset.save(&a.out).context("saving dataset")?;
    write_json(&a.out.join("summary.json"), &summary)?;
    println!("users\titems\tinteractions\tdensity");
    println!(
        "{}\t{}\t{}\t{:.4}%",
        summary.users,
        summary.items,
        summary.interactions,
        summary.density * 100.0
    );
    println!(
        "windows: train {} valid {} test {}",
        dataset.splits.train.len(),
        dataset.splits.valid.len(),
        dataset.splits.test.len()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let mut cfg = RunConfig::resolve(&a.config)?;
    let data = load_data(cfg.data_dir()?)?;
    cfg.max_seq_len = Some(cfg.max_seq_len.unwrap_or(data.max_prompt_len));
    let model = cfg.model_config(&data)?;
    if data.train.is_empty() || data.valid.is_empty() {
        return usage("dataset has an empty train or valid split");
    }
    prepare_dir(&a.run_dir, a.force)?;
    write_json(&a.run_dir.join("config.json"), &cfg)?;
    write_json(
        &a.run_dir.join("manifest.json"),
        &manifest(&cfg, &model, &data.hash),
    )?;

    let init = ModelParams::init(&model).context("initializing model")?;
    let out = train(
        init,
        &model,
        &cfg.train_config(),
        &data.train,
        &data.valid,
        MaskRouting::Scheduled,
    )
    .context("training")?;
    out.history
        .save_csv(&a.run_dir.join("history.csv"))
        .context("writing history")?;
    out.best_params
        .save(&a.run_dir.join("best.ckpt"))
        .context("writing best.ckpt")?;
    out.final_params
        .save(&a.run_dir.join("final.ckpt"))
        .context("writing final.ckpt")?;
    let best = out.history.best_record();
    println!(
        "stopped: {} after {} evals; best step {} (valid H@10={:.4} N@10={:.4})",
        out.history.stop_reason.as_str(),
        out.history.records.len(),
        out.history.best_step,
        best.map_or(f64::NAN, |r| r.hr10),
        best.map_or(f64::NAN, |r| r.ndcg10)
    );
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let split = parse_split(&a.split)?;
    if a.ks.is_empty() || a.ks.contains(&0) {
        return usage("--ks needs positive cutoffs");
    }
    let metrics_path = a.run_dir.join("metrics.json");
    let ranks_path = a.run_dir.join(format!("ranks_{}.csv", split.as_str()));
    refuse_overwrite(&metrics_path, a.force)?;
    let (_, data, model) = load_run(&a.run_dir, a.data.as_deref())?;
    let params = load_params(&a.run_dir, a.checkpoint, &model)?;
    let examples = data.split(split);
    let (report, ranks) =
        evaluate(&params, &model, examples, split.as_str(), &a.ks).context("evaluating")?;
    write_json(&metrics_path, &report)?;
    let mut f = BufWriter::new(fs::File::create(&ranks_path).context("creating ranks csv")?);
    writeln!(f, "example,user_id,target,rank").context("writing ranks")?;
    for (i, (w, r)) in data.dataset.split(split).iter().zip(&ranks).enumerate() {
        writeln!(f, "{i},{},{},{r}", w.user_id, w.target).context("writing ranks")?;
    }
    f.flush().context("writing ranks")?;
    println!(
        "{} ({} examples): {}",
        split.as_str(),
        report.n_examples,
        report.summary_line()
    );
    Ok(())
}

fn cmd_analyze(c: &AnalyzeCommand) -> CliResult<()> {
    match c {
        AnalyzeCommand::AttnStats {
            input,
            scope,
            limit,
            out,
        } => {
            let split = parse_split(&input.split)?;
            let (_, data, model) = load_run(&input.run_dir, input.data.as_deref())?;
            let params = load_params(&input.run_dir, input.checkpoint, &model)?;
            let stats = model_attention_stats(
                &params,
                &model,
                limited(data.split(split), *limit),
                &AttentionScope::schemes(scope),
            )
            .context("aggregating attention")?;
            let path = out
                .clone()
                .unwrap_or_else(|| input.run_dir.join("attn_stats.json"));
            write_json(&path, &stats)?;
            println!(
                "intra: proportion {:.4} mean/pair {:?}; cross: proportion {:.4} mean/pair {:?}",
                stats.intra_total_proportion,
                stats.intra_mean_per_pair,
                stats.cross_total_proportion,
                stats.cross_mean_per_pair
            );
        }
        AnalyzeCommand::Distances { data, split, out } => {
            let split = parse_split(split)?;
            let d = load_data(data)?;
            let prompts: Vec<_> = d.split(split).iter().map(|e| e.0.clone()).collect();
            let stats = distance_stats(&prompts);
            if let Some(p) = out {
                write_json(p, &stats)?;
            }
            println!(
                "intra mean distance {:?} over {} pairs; cross {:?} over {} pairs",
                stats.intra_mean_distance,
                stats.n_intra_pairs,
                stats.cross_mean_distance,
                stats.n_cross_pairs
            );
        }
        AnalyzeCommand::Cooccurrence { data, split, out } => {
            let split = parse_split(split)?;
            let d = load_data(data)?;
            let stats = cooccurrence_stats(
                d.dataset.split(split).iter().map(|w| w.history.as_slice()),
                &d.catalog,
            )
            .context("counting co-occurrence")?;
            if let Some(p) = out {
                write_json(p, &stats)?;
            }
            println!(
                "intra pair mean frequency {:?} ({} pairs); cross {:?} ({} pairs)",
                stats.intra_pair_mean_frequency,
                stats.n_intra_pairs,
                stats.cross_pair_mean_frequency,
                stats.n_cross_pairs
            );
        }
        AnalyzeCommand::Heatmap {
            input,
            example,
            layer,
            head,
            out,
        } => {
            let split = parse_split(&input.split)?;
            let (_, data, model) = load_run(&input.run_dir, input.data.as_deref())?;
            let params = load_params(&input.run_dir, input.checkpoint, &model)?;
            let Some((prompt, _)) = data.split(split).get(*example) else {
                return usage(format!("example {example} out of range"));
            };
            if *layer >= model.n_layers || *head >= model.n_heads {
                return usage(format!("layer {layer} / head {head} out of range"));
            }
            let trace = forward(prompt, &params, &model, true).context("forward pass")?;
            let path = out.clone().unwrap_or_else(|| {
                input
                    .run_dir
                    .join(format!("heatmap_ex{example}_l{layer}_h{head}.csv"))
            });
            let side = export_heatmap(&trace, prompt, *layer, *head, &path)
                .context("exporting heatmap")?;
            println!("wrote {} and {}", path.display(), side.display());
        }
        AnalyzeCommand::DumpMask {
            data,
            split,
            example,
            scheme,
            causal,
            out,
        } => {
            let split = parse_split(split)?;
            let d = load_data(data)?;
            let Some((prompt, _)) = d.split(split).get(*example) else {
                return usage(format!("example {example} out of range"));
            };
            let mut mask = mask_for_scheme(*scheme, prompt);
            if *causal {
                let c = causal_mask(prompt.len()).context("causal mask")?;
                mask = mask.compose(&c).context("composing masks")?;
            }
            match out {
                Some(p) => {
                    let mut f = BufWriter::new(fs::File::create(p).context("creating mask file")?);
                    mask.write_csv(&mut f).context("writing mask")?;
                    f.flush().context("writing mask")?;
                }
                None => mask
                    .write_csv(std::io::stdout().lock())
                    .context("writing mask")?,
            }
        }
        AnalyzeCommand::Skew {
            baseline,
            scheduled,
            data,
            split,
            limit,
            out,
        } => {
            let split = parse_split(split)?;
            let (_, bdata, bmodel) = load_run(baseline, data.as_deref())?;
            let (_, _, hmodel) = load_run(scheduled, data.as_deref())?;
            let bp = load_params(baseline, Checkpoint::Best, &bmodel)?;
            let hp = load_params(scheduled, Checkpoint::Best, &hmodel)?;
            let report = skew_report(
                (&bp, &bmodel),
                (&hp, &hmodel),
                limited(bdata.split(split), *limit),
            )
            .context("skew report")?;
            report.save_json(out).context("writing skew report")?;
            println!(
                "baseline intra/cross mean per pair {:?} / {:?}",
                report.baseline.intra_mean_per_pair, report.baseline.cross_mean_per_pair
            );
        }
    }
    Ok(())
}

fn arm_slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

fn cmd_ablate(a: &AblateArgs) -> CliResult<()> {
    let suite: Suite = a
        .suite
        .parse()
        .map_err(|e: crate::ablation::AblationError| CliError::Usage(e.to_string()))?;
    if a.seeds.is_empty() {
        return usage("--seeds needs at least one seed");
    }
    let mut cfg = RunConfig::resolve(&a.config)?;
    let data = load_data(cfg.data_dir()?)?;
    cfg.max_seq_len = Some(cfg.max_seq_len.unwrap_or(data.max_prompt_len));
    let base = cfg.model_config(&data)?;
    if data.train.is_empty() || data.valid.is_empty() || data.test.is_empty() {
        return usage("dataset has an empty split");
    }
    let arms = suite_arms(suite, cfg.n_layers, cfg.n_shallow, cfg.n_deep)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    prepare_dir(&a.out, a.force)?;
    let tc = cfg.train_config();
    let table = run_suite(&arms, &a.seeds, |arm, seed| {
        let run_cfg = RunConfig {
            seed,
            ..cfg.clone()
        };
        let model = ModelConfig {
            n_layers: arm.schedule.len(),
            schedule: arm.schedule.clone(),
            seed,
            ..base.clone()
        };
        let dir = a
            .out
            .join("runs")
            .join(format!("{}_s{seed}", arm_slug(&arm.name)));
        fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        write_json(
            &dir.join("manifest.json"),
            &manifest(&run_cfg, &model, &data.hash),
        )
        .map_err(|e| e.to_string())?;
        let r = train_arm(
            &base,
            &tc,
            &arm.schedule,
            seed,
            (&data.train, &data.valid, &data.test),
        )?;
        write_json(&dir.join("result.json"), &r).map_err(|e| e.to_string())?;
        Ok(r)
    });
    table.save(&a.out).context("writing ablation table")?;
    println!("arm\tH@5\tN@5\tH@10\tN@10\tfailed");
    for s in &table.summary {
        println!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}",
            s.arm, s.test_hr5, s.test_ndcg5, s.test_hr10, s.test_ndcg10, s.n_failed
        );
    }
    Ok(())
}

/// Tiny model with one layer per scheme (IN, OR, `deep_variant`) and a few
/// random prompts of at most 16 tokens.
pub fn gradcheck_fixture(
    seed: u64,
    deep_variant: Scheme,
) -> anyhow::Result<(ModelConfig, Vec<Example>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_items = 6;
    let vocab = 3 + 10;
    let titles: Vec<Vec<u32>> = (0..n_items)
        .map(|_| {
            (0..rng.random_range(1..=3))
                .map(|_| rng.random_range(3..vocab as u32))
                .collect()
        })
        .collect();
    let catalog = ItemCatalog::new(titles, vocab)?;
    let template = PromptTemplate::standard();
    let mut examples = Vec::new();
    while examples.len() < 3 {
        let history: Vec<usize> = (0..rng.random_range(2..=4))
            .map(|_| rng.random_range(0..n_items))
            .collect();
        let prompt = tokenize_prompt(&history, &catalog, &template)?;
        if prompt.len() <= 16 {
            examples.push((prompt, rng.random_range(0..n_items)));
        }
    }
    let schedule = build_schedule(3, 1, 1, BlockOrder::CANONICAL, deep_variant)?;
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 3,
        ffn_dim: 16,
        max_seq_len: 16,
        vocab_size: vocab,
        n_items,
        schedule,
        seed,
    };
    Ok((cfg, examples))
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<bool> {
    if !matches!(a.deep_variant, Scheme::Cr | Scheme::CrPre) {
        return usage("--deep-variant must be CR or CR_PRE");
    }
    let (cfg, examples) = gradcheck_fixture(a.seed, a.deep_variant)?;
    let params = ModelParams::init(&cfg).context("initializing model")?;
    let report =
        grad_check(&params, &cfg, &examples, a.eps, a.coords, a.seed).context("gradient check")?;
    let ok = report.max_relative_error < GRADCHECK_TOLERANCE;
    println!(
        "schedule {}: max relative error {:.3e} over {} coordinates ({})",
        cfg.schedule,
        report.max_relative_error,
        report.n_checked,
        if ok { "ok" } else { "FAILED" }
    );
    Ok(ok)
}

fn dispatch(cli: &Cli) -> CliResult<bool> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| true),
        Command::Preprocess(a) => cmd_preprocess(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| true),
        Command::Analyze(c) => cmd_analyze(c).map(|_| true),
        Command::Ablate(a) => cmd_ablate(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match dispatch(&cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Failure(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(
            &path,
            r#"{"d_model": 16, "learning_rate": 0.0005, "seed": 4}"#,
        )
        .unwrap();
        let args = ConfigArgs {
            config: Some(path),
            seed: Some(9),
            ..ConfigArgs::default()
        };
        let c = RunConfig::resolve(&args).unwrap();
        assert_eq!((c.d_model, c.learning_rate, c.seed), (16, 5e-4, 9));
        assert_eq!(c.n_layers, 3);
    }

    #[test]
    fn bad_config_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"bogus": 1}"#).unwrap();
        let args = ConfigArgs {
            config: Some(path),
            ..ConfigArgs::default()
        };
        assert!(matches!(RunConfig::resolve(&args), Err(CliError::Usage(_))));
        let args = ConfigArgs {
            shallow: Some(3),
            deep: Some(1),
            ..ConfigArgs::default()
        };
        assert!(matches!(RunConfig::resolve(&args), Err(CliError::Usage(_))));
    }

    #[test]
    fn run_config_round_trips() {
        let c = RunConfig {
            order: "CR-OR-IN".parse().unwrap(),
            deep_variant: Scheme::CrPre,
            ..RunConfig::default()
        };
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn gradcheck_fixture_fits() {
        for v in [Scheme::Cr, Scheme::CrPre] {
            let (cfg, ex) = gradcheck_fixture(3, v).unwrap();
            assert!(ex.iter().all(|e| e.0.len() <= 16));
            assert_eq!(cfg.schedule.schemes()[2], v);
        }
    }

    #[test]
    fn slugs() {
        assert_eq!(arm_slug("w/o IN"), "w_o_in");
        assert_eq!(arm_slug("CR->CR_PRE"), "cr__cr_pre");
    }
}
