//! The `anselect` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::combiner::{
    baseline_scores, build_idf, features_tsv, group_features, train_combiner, Baseline, CombinerModel,
    IdfTable, DEFAULT_L2,
};
use crate::corpus::{corpus_tokens, parse_dataset, split_stats, QuestionGroup, Stoplist};
use crate::embeddings::EmbeddingTable;
use crate::matcher::{ModelKind, ModelTheta};
use crate::metrics::{evaluate, export_trec, Evaluation};
use crate::trainer::{default_grid, grid_search, parse_grid, predict_groups, rank_groups, train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "anselect", version, about = "Answer sentence selection with distributional sentence models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print question, pair and %-correct counts for dataset files.
    Stats {
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Also report out-of-vocabulary coverage against these embeddings.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Train one configuration.
    Train(TrainArgs),
    /// Grid-search configurations on dev MAP.
    Grid {
        #[command(flatten)]
        train: TrainArgs,
        /// `key = v1, v2, ...` lines; the built-in grid is used when absent.
        #[arg(long)]
        grid_file: Option<PathBuf>,
        /// Score table output; defaults to `<out>.grid.tsv`.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Print MAP/MRR of a checkpoint on a dataset.
    Eval(ModelArgs),
    /// Write per-pair probabilities.
    Predict {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also dump the three combiner features per pair.
        #[arg(long)]
        features_out: Option<PathBuf>,
    },
    /// Print MAP/MRR of a scoring baseline.
    Baseline {
        #[arg(long, value_enum)]
        kind: BaselineKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Average the random baseline over this many consecutive seeds.
        #[arg(long, default_value_t = 1)]
        runs: u64,
        /// Answer sentences used for IDF; defaults to --data.
        #[arg(long)]
        idf_data: Option<PathBuf>,
    },
    /// Write trec_eval run and qrels files.
    ExportTrec {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value = "anselect")]
        run_id: String,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BaselineKind {
    Random,
    Count,
    WgtCount,
}

impl From<BaselineKind> for Baseline {
    fn from(k: BaselineKind) -> Self {
        match k {
            BaselineKind::Random => Baseline::Random,
            BaselineKind::Count => Baseline::Count,
            BaselineKind::WgtCount => Baseline::WeightedCount,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelChoice {
    Unigram,
    Bigram,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    model: Option<ModelChoice>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// `key = value` file of training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also fit the count-feature combiner on the training split.
    #[arg(long)]
    combiner_out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    combiner: Option<PathBuf>,
    /// Defaults to the embeddings recorded in the checkpoint's manifest.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

/// Inputs, settings and results of one mutating command.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<TrainConfig>,
    pub inputs: Vec<InputDigest>,
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub metrics: BTreeMap<String, f64>,
    pub timestamp: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct InputDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

pub fn file_digest(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            config: None,
            inputs: Vec::new(),
            seed: None,
            checkpoint: None,
            outputs: Vec::new(),
            metrics: BTreeMap::new(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        }
    }

    fn input(&mut self, role: &str, path: &Path) -> anyhow::Result<()> {
        self.inputs.push(InputDigest {
            role: role.to_string(),
            path: path.to_path_buf(),
            sha256: file_digest(path)?,
        });
        Ok(())
    }

    fn record(&mut self, prefix: &str, e: &Evaluation) {
        self.metrics.insert(format!("{prefix}_map"), e.map);
        self.metrics.insert(format!("{prefix}_mrr"), e.mrr);
        self.metrics.insert(format!("{prefix}_n_scored"), e.n_scored as f64);
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

/// `<path><suffix>`, e.g. `model.ckpt` → `model.ckpt.manifest.json`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_groups(path: &Path) -> anyhow::Result<Vec<QuestionGroup>> {
    parse_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_embeddings(path: &Path) -> anyhow::Result<EmbeddingTable> {
    EmbeddingTable::load(path).with_context(|| format!("loading embeddings {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_checkpoint(path: &Path, theta: &ModelTheta) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    theta.write_checkpoint(&mut out)?;
    out.flush()?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> anyhow::Result<ModelTheta> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(ModelTheta::read_checkpoint(BufReader::new(file), &path.display().to_string())?)
}

fn read_combiner(path: &Path) -> anyhow::Result<(CombinerModel, IdfTable)> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(CombinerModel::read_from(BufReader::new(file), &path.display().to_string())?)
}

fn resolve_config(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    if let Some(m) = args.model {
        cfg.model_kind = match m {
            ModelChoice::Unigram => ModelKind::Unigram,
            ModelChoice::Bigram => ModelKind::Bigram,
        };
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Fits the combiner on the training split's features and writes it.
fn fit_combiner(
    path: &Path,
    train_groups: &[QuestionGroup],
    theta: &ModelTheta,
    embeddings: &EmbeddingTable,
    stoplist: &Stoplist,
) -> anyhow::Result<()> {
    let idf = build_idf(train_groups)?;
    let features = group_features(train_groups, theta, embeddings, &idf, stoplist)?;
    let labels: Vec<u8> = train_groups
        .iter()
        .flat_map(|g| g.instances.iter().map(|i| i.label))
        .collect();
    let flat: Vec<_> = features.into_iter().flatten().collect();
    let model = train_combiner(&flat, &labels, DEFAULT_L2)?;
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    model.write_to(&idf, &mut out)?;
    out.flush()?;
    Ok(())
}

struct LoadedModel {
    theta: ModelTheta,
    embeddings: EmbeddingTable,
    combiner: Option<(CombinerModel, IdfTable)>,
    groups: Vec<QuestionGroup>,
}

fn load_model(args: &ModelArgs) -> anyhow::Result<LoadedModel> {
    let theta = read_checkpoint(&args.ckpt)?;
    let embeddings_path = match &args.embeddings {
        Some(p) => p.clone(),
        None => {
            let manifest_path = sidecar(&args.ckpt, ".manifest.json");
            let manifest = RunManifest::load(&manifest_path)
                .context("no --embeddings given and the checkpoint manifest is unreadable")?;
            manifest
                .inputs
                .iter()
                .find(|i| i.role == "embeddings")
                .map(|i| i.path.clone())
                .context("checkpoint manifest records no embeddings")?
        }
    };
    let embeddings = load_embeddings(&embeddings_path)?;
    if embeddings.dim() != theta.dim() {
        bail!(
            "checkpoint dim {} does not match embeddings dim {}",
            theta.dim(),
            embeddings.dim()
        );
    }
    let combiner = args.combiner.as_deref().map(read_combiner).transpose()?;
    let groups = load_groups(&args.data)?;
    Ok(LoadedModel {
        theta,
        embeddings,
        combiner,
        groups,
    })
}

impl LoadedModel {
    fn scores(&self, stoplist: &Stoplist) -> anyhow::Result<Vec<Vec<f64>>> {
        Ok(match &self.combiner {
            None => predict_groups(&self.groups, &self.theta, &self.embeddings, stoplist)?,
            Some((model, idf)) => group_features(&self.groups, &self.theta, &self.embeddings, idf, stoplist)?
                .iter()
                .map(|fs| fs.iter().map(|f| model.predict(f)).collect())
                .collect(),
        })
    }
}

fn run_training(
    command: &str,
    args: &TrainArgs,
    grid: Option<(&Option<PathBuf>, &Option<PathBuf>)>,
) -> anyhow::Result<()> {
    let base = resolve_config(args)?;
    let train_groups = load_groups(&args.train)?;
    let dev_groups = load_groups(&args.dev)?;
    let embeddings = load_embeddings(&args.embeddings)?;
    let stoplist = Stoplist::builtin();

    let mut manifest = RunManifest::new(command);
    manifest.input("train", &args.train)?;
    manifest.input("dev", &args.dev)?;
    manifest.input("embeddings", &args.embeddings)?;
    if let Some(c) = &args.config {
        manifest.input("config", c)?;
    }

    let (config, theta) = match grid {
        None => {
            let outcome = train(&train_groups, &dev_groups, &embeddings, &stoplist, &base)?;
            let trace_path = sidecar(&args.out, ".trace.tsv");
            write_text(&trace_path, &outcome.trace_tsv())?;
            manifest.outputs.push(trace_path);
            manifest.metrics.insert("best_epoch".into(), outcome.best_epoch as f64);
            if let Some(last) = outcome.trace.last() {
                manifest.metrics.insert("final_train_loss".into(), last.train_loss);
            }
            (base, outcome.theta)
        }
        Some((grid_file, table)) => {
            let cells = match grid_file {
                Some(path) => {
                    manifest.input("grid", path)?;
                    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    parse_grid(&text, &base)?
                }
                None => default_grid(&base),
            };
            let outcome = grid_search(&cells, &train_groups, &dev_groups, &embeddings, &stoplist)?;
            let table_path = table.clone().unwrap_or_else(|| sidecar(&args.out, ".grid.tsv"));
            write_text(&table_path, &outcome.table_tsv())?;
            manifest.outputs.push(table_path);
            manifest.metrics.insert("best_cell".into(), outcome.best_index as f64);
            (outcome.best_config, outcome.best_theta)
        }
    };

    write_checkpoint(&args.out, &theta)?;
    manifest.checkpoint = Some(args.out.clone());
    manifest.seed = Some(config.seed);

    if let Some(dev) = crate::trainer::evaluate_model(&dev_groups, &theta, &embeddings, &stoplist)? {
        manifest.record("dev", &dev);
        println!("dev {dev}");
    }
    if let Some(path) = &args.combiner_out {
        fit_combiner(path, &train_groups, &theta, &embeddings, &stoplist)?;
        manifest.outputs.push(path.clone());
        let (model, idf) = read_combiner(path)?;
        let scores: Vec<Vec<f64>> = group_features(&dev_groups, &theta, &embeddings, &idf, &stoplist)?
            .iter()
            .map(|fs| fs.iter().map(|f| model.predict(f)).collect())
            .collect();
        if let Ok(e) = evaluate(&rank_groups(&dev_groups, &scores)) {
            manifest.record("dev_combined", &e);
            println!("dev+count {e}");
        }
    }
    manifest.config = Some(config);
    manifest.write(&sidecar(&args.out, ".manifest.json"))
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let stoplist = Stoplist::builtin();
    match cli.command {
        Command::Stats { data, embeddings } => {
            let table = embeddings.as_deref().map(load_embeddings).transpose()?;
            println!("{:<20} {:>6} {:>8} {:>6}", "Data", "#Q", "#Pairs", "%Corr");
            for path in &data {
                let groups = load_groups(path)?;
                let stats = split_stats(&groups)?;
                let name = path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
                print!("{name:<20} {stats}");
                if let Some(t) = &table {
                    let c = t.coverage_report(corpus_tokens(&groups))?;
                    print!("  oov {:.4} ({} of {} types)", c.oov_fraction, c.oov_types.len(), c.n_types);
                }
                println!();
            }
            Ok(())
        }
        Command::Train(args) => run_training("train", &args, None),
        Command::Grid { train, grid_file, table } => run_training("grid", &train, Some((&grid_file, &table))),
        Command::Eval(args) => {
            let model = load_model(&args)?;
            let scores = model.scores(&stoplist)?;
            let e = evaluate(&rank_groups(&model.groups, &scores))?;
            println!("{e}");
            Ok(())
        }
        Command::Predict { model: args, out, features_out } => {
            let model = load_model(&args)?;
            let scores = model.scores(&stoplist)?;
            let mut text = String::from("question_id\tanswer_id\tprobability\tlabel\n");
            for (g, s) in model.groups.iter().zip(&scores) {
                for (inst, p) in g.instances.iter().zip(s) {
                    text.push_str(&format!("{}\t{}\t{}\t{}\n", inst.question_id, inst.answer_id, p, inst.label));
                }
            }
            write_text(&out, &text)?;
            let mut manifest = RunManifest::new("predict");
            manifest.input("checkpoint", &args.ckpt)?;
            manifest.input("data", &args.data)?;
            manifest.checkpoint = Some(args.ckpt.clone());
            manifest.outputs.push(out.clone());
            if let Some(fpath) = features_out {
                let idf = match &model.combiner {
                    Some((_, idf)) => idf.clone(),
                    None => build_idf(&model.groups)?,
                };
                let feats = group_features(&model.groups, &model.theta, &model.embeddings, &idf, &stoplist)?;
                write_text(&fpath, &features_tsv(&model.groups, &feats))?;
                manifest.outputs.push(fpath);
            }
            manifest.write(&sidecar(&out, ".manifest.json"))
        }
        Command::Baseline { kind, data, seed, runs, idf_data } => {
            let groups = load_groups(&data)?;
            let idf = match &idf_data {
                Some(p) => build_idf(&load_groups(p)?)?,
                None => build_idf(&groups)?,
            };
            let kind = Baseline::from(kind);
            let runs = if kind == Baseline::Random { runs.max(1) } else { 1 };
            let (mut map, mut mrr, mut n) = (0.0, 0.0, 0);
            for s in seed..seed + runs {
                let e = evaluate(&rank_groups(&groups, &baseline_scores(kind, &groups, &idf, &stoplist, s)))?;
                map += e.map;
                mrr += e.mrr;
                n = e.n_scored;
            }
            println!("{}", Evaluation { map: map / runs as f64, mrr: mrr / runs as f64, n_scored: n });
            Ok(())
        }
        Command::ExportTrec { model: args, run, qrels, run_id } => {
            let model = load_model(&args)?;
            let scores = model.scores(&stoplist)?;
            let rankings = rank_groups(&model.groups, &scores);
            let files = export_trec(&rankings, &run_id);
            write_text(&run, &files.run)?;
            write_text(&qrels, &files.qrels)?;
            let mut manifest = RunManifest::new("export-trec");
            manifest.input("checkpoint", &args.ckpt)?;
            manifest.input("data", &args.data)?;
            manifest.checkpoint = Some(args.ckpt.clone());
            manifest.outputs.extend([run.clone(), qrels]);
            if let Ok(e) = evaluate(&rankings) {
                manifest.record("eval", &e);
            }
            manifest.write(&sidecar(&run, ".manifest.json"))
        }
    }
}

/// Runs the CLI and returns the process exit code: 0 on success, 1 for
/// data or model errors, 2 for usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
