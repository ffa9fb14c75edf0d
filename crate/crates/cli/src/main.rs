use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use tablegan_core::attack::{self, AttackConfig};
use tablegan_core::checkpoint::Checkpoint;
use tablegan_core::evaluation::{self, DcrSubset};
use tablegan_core::losses::{PrivacyConfig, PrivacyPreset};
use tablegan_core::schema::{SchemaDecl, TableSchema};
use tablegan_core::table::{read_csv_strings, split_train_test, RawTable};
use tablegan_core::toy;
use tablegan_core::trainer::{self, TrainConfig, TrainObserver, TrainedModel};

const OUT_ENV: &str = "TABLEGAN_OUT_DIR";

#[derive(Parser)]
#[command(name = "tablegan", version, about = "Synthesize privacy-preserving tables with a convolutional GAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and loss history.
    Train(TrainArgs),
    /// Sample a synthetic table from a checkpoint.
    Generate(GenerateArgs),
    /// Compare a synthetic table with the original: DCR, CDFs, model compatibility.
    Evaluate(EvaluateArgs),
    /// Run the shadow-model membership attack against a checkpoint.
    Attack(AttackArgs),
    /// Split a table into seeded train and test parts.
    Split(SplitArgs),
    /// Train one model per chunk of rows and merge their synthetic tables.
    ChunkTrain(ChunkTrainArgs),
    /// Write the bundled rule-labeled toy dataset and its schema.
    Toy(ToyArgs),
}

#[derive(Args, Clone)]
struct OutArg {
    /// Output directory (created if absent).
    #[arg(long, env = OUT_ENV, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// Run configuration file (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training data (CSV with header).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Column declarations (TOML).
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Privacy preset: low, mid or high.
    #[arg(long)]
    privacy: Option<PrivacyPreset>,
    /// Custom threshold on the feature-mean discrepancy.
    #[arg(long, requires = "delta_sd")]
    delta_mean: Option<f64>,
    /// Custom threshold on the feature-sd discrepancy.
    #[arg(long, requires = "delta_mean")]
    delta_sd: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Weight of the classification term in the generator loss.
    #[arg(long)]
    class_weight: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Also save a checkpoint every N epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Rows to generate; defaults to the training table size.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    synthetic: PathBuf,
    /// Held-out real records for model compatibility.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// Number of real records in the nearest-record exhibit.
    #[arg(long, default_value_t = 10)]
    exhibit: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// The target's training table.
    #[arg(long)]
    original: PathBuf,
    /// Real records never used for training.
    #[arg(long)]
    holdout: PathBuf,
    #[arg(long, default_value_t = 5)]
    shadows: usize,
    #[arg(long)]
    rows_per_shadow: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset name written into the report.
    #[arg(long, default_value = "dataset")]
    dataset: String,
    /// Also write the attack training samples.
    #[arg(long)]
    dump_samples: bool,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct ChunkTrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    chunks: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    data: Option<PathBuf>,
    schema: Option<PathBuf>,
    #[serde(default)]
    train: TrainConfig,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    tool_version: &'static str,
    command: String,
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    privacy: Option<String>,
    artifacts: BTreeMap<String, PathBuf>,
    duration_secs: f64,
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config,
            seeds: BTreeMap::new(),
            privacy: None,
            artifacts: BTreeMap::new(),
            duration_secs: 0.0,
        }
    }

    fn finish(mut self, out: &Path, started: Instant) -> Result<()> {
        self.duration_secs = started.elapsed().as_secs_f64();
        let path = out.join("manifest.json");
        let tmp = out.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&self)?).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn load_schema_and_table(data: &Path, schema: &Path) -> Result<RawTable> {
    let decls = SchemaDecl::load(schema)?;
    let (header, rows) = read_csv_strings(data)?;
    let schema = TableSchema::build(&header, &decls.columns, &rows)?;
    RawTable::from_strings(schema, &rows).with_context(|| format!("reading {}", data.display()))
}

fn resolve_train(flags: &TrainFlags) -> Result<(RunConfig, PathBuf, PathBuf)> {
    let mut cfg = match &flags.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| tablegan_core::Error::Io {
                path: p.clone(),
                source: e,
            })?;
            toml::from_str::<RunConfig>(&text)
                .map_err(|e| tablegan_core::Error::InvalidArgument(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(p) = &flags.data {
        cfg.data = Some(p.clone());
    }
    if let Some(p) = &flags.schema {
        cfg.schema = Some(p.clone());
    }
    let t = &mut cfg.train;
    if let Some(p) = flags.privacy {
        t.privacy = PrivacyConfig::preset(p);
    }
    if let (Some(m), Some(s)) = (flags.delta_mean, flags.delta_sd) {
        t.privacy = PrivacyConfig::new(m, s)?;
    }
    if let Some(v) = flags.epochs {
        t.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = flags.seed {
        t.seed = v;
    }
    if let Some(v) = flags.class_weight {
        t.loss_weights[2] = v;
    }
    t.validate()?;
    let missing = |what: &str| tablegan_core::Error::InvalidArgument(format!("no {what} given (flag or config file)"));
    let data = cfg.data.clone().ok_or_else(|| missing("--data"))?;
    let schema = cfg.schema.clone().ok_or_else(|| missing("--schema"))?;
    Ok((cfg, data, schema))
}

struct CheckpointEvery {
    every: usize,
    dir: PathBuf,
    saved: Vec<PathBuf>,
}

impl TrainObserver for CheckpointEvery {
    fn wants_snapshots(&self) -> bool {
        true
    }

    fn on_epoch_end(&mut self, epoch: usize, _: &tablegan_core::losses::LossValues, snapshot: Option<&TrainedModel>) -> tablegan_core::Result<()> {
        if epoch % self.every != 0 {
            return Ok(());
        }
        if let Some(model) = snapshot {
            let path = self.dir.join(format!("checkpoint_epoch{epoch}.json"));
            Checkpoint::new(model.clone()).save(&path)?;
            self.saved.push(path);
        }
        Ok(())
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let (cfg, data, schema) = resolve_train(&args.flags)?;
    let table = load_schema_and_table(&data, &schema)?;
    let out = &args.out.out;
    ensure_dir(out)?;

    let model = match args.checkpoint_every {
        Some(0) => bail!(tablegan_core::Error::InvalidArgument("--checkpoint-every must be positive".into())),
        Some(every) => {
            let mut obs = CheckpointEvery {
                every,
                dir: out.clone(),
                saved: Vec::new(),
            };
            trainer::train_with(&table, &cfg.train, &mut obs)?
        }
        None => trainer::train(&table, &cfg.train)?,
    };

    let ck_path = out.join("checkpoint.json");
    Checkpoint::new(model.clone()).save(&ck_path)?;
    let hist_path = out.join("loss_history.csv");
    let file = fs::File::create(&hist_path).with_context(|| format!("writing {}", hist_path.display()))?;
    model.write_history_csv(std::io::BufWriter::new(file))?;

    let mut manifest = RunManifest::new("train", serde_json::to_value(&cfg)?);
    manifest.seeds.insert("train".into(), cfg.train.seed);
    manifest.privacy = Some(cfg.train.privacy.describe());
    manifest.artifacts.insert("checkpoint".into(), ck_path.clone());
    manifest.artifacts.insert("loss_history".into(), hist_path);
    let last = model.history.last().copied().unwrap_or_default();
    println!(
        "trained {} epochs on {} rows (privacy {}); final d_orig {:.4} g_orig {:.4} g_info {:.4} g_class {:.4}",
        model.history.len(),
        table.len(),
        cfg.train.privacy.describe(),
        last.d_orig,
        last.g_orig,
        last.g_info,
        last.g_class
    );
    println!("checkpoint: {}", ck_path.display());
    manifest.finish(out, started)
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let started = Instant::now();
    let ck = Checkpoint::load(&args.checkpoint)?;
    let n = args.n.unwrap_or(ck.model.train_rows);
    let table = trainer::synthesize(&ck.model, n, args.seed)?;
    let out = &args.out.out;
    ensure_dir(out)?;
    let path = out.join("synthetic.csv");
    table.write(&path)?;
    let mut manifest = RunManifest::new(
        "generate",
        serde_json::json!({ "checkpoint": args.checkpoint, "n": n, "seed": args.seed }),
    );
    manifest.seeds.insert("generate".into(), args.seed);
    manifest.privacy = Some(ck.privacy.describe());
    manifest.artifacts.insert("synthetic".into(), path.clone());
    println!("wrote {n} rows to {}", path.display());
    manifest.finish(out, started)
}

fn safe_file_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    Ok(std::io::BufWriter::new(
        fs::File::create(path).with_context(|| format!("writing {}", path.display()))?,
    ))
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let started = Instant::now();
    let original = load_schema_and_table(&args.original, &args.schema)?;
    let schema = original.schema().clone();
    let synthetic = RawTable::read(&args.synthetic, &schema)?;
    let test = RawTable::read(&args.test, &schema)?;
    let out = &args.out.out;
    ensure_dir(out)?;
    let mut artifacts = BTreeMap::new();

    let mut dcrs = vec![evaluation::dcr(&original, &synthetic, DcrSubset::QidPlusSensitive)?];
    if !schema.sensitive_indices().is_empty() {
        dcrs.push(evaluation::dcr(&original, &synthetic, DcrSubset::SensitiveOnly)?);
    }
    let p = out.join("dcr.csv");
    evaluation::write_dcr_csv(&dcrs, create(&p)?)?;
    artifacts.insert("dcr".to_string(), p);

    let cdf_dir = out.join("cdf");
    ensure_dir(&cdf_dir)?;
    let mut cdfs = Vec::new();
    for name in schema.names() {
        let r = evaluation::cdf_compare(&original, &synthetic, name)?;
        r.write_points_csv(create(&cdf_dir.join(format!("{}.csv", safe_file_name(name))))?)?;
        cdfs.push(r);
    }
    artifacts.insert("cdf_dir".to_string(), cdf_dir);
    let p = out.join("ks.csv");
    evaluation::write_ks_csv(&cdfs, create(&p)?)?;
    artifacts.insert("ks".to_string(), p);

    let task = schema.label().task;
    let points = evaluation::model_compat(&original, &synthetic, &test, task, &evaluation::default_roster())?;
    let p = out.join("compat.csv");
    evaluation::write_compat_csv(&points, create(&p)?)?;
    artifacts.insert("compat".to_string(), p);

    let pairs = evaluation::nearest_real_exhibit(&original, &synthetic, args.exhibit, args.seed)?;
    let p = out.join("exhibit.csv");
    evaluation::write_exhibit_csv(&schema, &pairs, create(&p)?)?;
    artifacts.insert("exhibit".to_string(), p);

    println!("DCR");
    for d in &dcrs {
        println!("  {:<20} {:.4} ± {:.4}", d.subset.id(), d.mean, d.std);
    }
    println!("KS per attribute");
    for c in &cdfs {
        println!("  {:<20} {:.4}", c.attribute, c.ks_statistic);
    }
    println!("model compatibility ({} points)", points.len());
    for p in &points {
        println!("  {:<14} {:<14} x {:.4}  y {:.4}", p.algorithm.id(), p.param, p.x, p.y);
    }

    let mut manifest = RunManifest::new(
        "evaluate",
        serde_json::json!({
            "original": args.original, "synthetic": args.synthetic, "test": args.test,
            "schema": args.schema, "exhibit": args.exhibit, "seed": args.seed,
        }),
    );
    manifest.seeds.insert("exhibit".into(), args.seed);
    manifest.artifacts = artifacts;
    manifest.finish(out, started)
}

/// First holdout row whose canonical serialization also appears in `train`.
fn first_overlap(train: &RawTable, holdout: &RawTable) -> Option<(usize, String)> {
    let keys: HashSet<String> = (0..train.len()).map(|i| train.row_key(i)).collect();
    (0..holdout.len()).map(|i| (i, holdout.row_key(i))).find(|(_, k)| keys.contains(k))
}

fn cmd_attack(args: AttackArgs) -> Result<()> {
    let started = Instant::now();
    let ck = Checkpoint::load(&args.checkpoint)?;
    let schema = &ck.model.schema;
    let original = RawTable::read(&args.original, schema)?;
    let holdout = RawTable::read(&args.holdout, schema)?;
    if let Some((i, key)) = first_overlap(&original, &holdout) {
        bail!(tablegan_core::Error::InvalidArgument(format!(
            "holdout row {} also appears in the training table: {key}",
            i + 1
        )));
    }
    let cfg = AttackConfig {
        shadow_count: args.shadows,
        rows_per_shadow: args.rows_per_shadow,
        seed: args.seed,
    };
    let outcome = attack::run_attack(&ck.model, &original, &holdout, &cfg)?;
    let out = &args.out.out;
    ensure_dir(out)?;
    let report = out.join("attack_report.csv");
    attack::write_reports_csv(&args.dataset, &outcome.reports, create(&report)?)?;
    let mut manifest = RunManifest::new("attack", serde_json::json!({
        "checkpoint": args.checkpoint, "original": args.original, "holdout": args.holdout,
        "dataset": args.dataset, "attack": cfg,
    }));
    manifest.seeds.insert("attack".into(), args.seed);
    manifest.privacy = Some(ck.privacy.describe());
    manifest.artifacts.insert("attack_report".into(), report);
    if args.dump_samples {
        let p = out.join("attack_samples.csv");
        attack::write_samples_csv(&outcome.samples, create(&p)?)?;
        manifest.artifacts.insert("attack_samples".into(), p);
    }
    for r in &outcome.reports {
        println!(
            "{:<22} F-1 {:.4}  AUCROC {:.4}  ({} in / {} out)",
            r.feature_source.id(),
            r.f1,
            r.aucroc,
            r.in_records,
            r.out_records
        );
    }
    manifest.finish(out, started)
}

fn cmd_split(args: SplitArgs) -> Result<()> {
    let started = Instant::now();
    let table = load_schema_and_table(&args.data, &args.schema)?;
    let (train, test) = split_train_test(&table, args.test_fraction, args.seed)?;
    let out = &args.out.out;
    ensure_dir(out)?;
    let (tp, sp) = (out.join("train.csv"), out.join("test.csv"));
    train.write(&tp)?;
    test.write(&sp)?;
    let mut manifest = RunManifest::new("split", serde_json::json!({
        "data": args.data, "schema": args.schema, "test_fraction": args.test_fraction, "seed": args.seed,
    }));
    manifest.seeds.insert("split".into(), args.seed);
    manifest.artifacts.insert("train".into(), tp);
    manifest.artifacts.insert("test".into(), sp);
    println!("{} train rows, {} test rows", train.len(), test.len());
    manifest.finish(out, started)
}

fn cmd_chunk_train(args: ChunkTrainArgs) -> Result<()> {
    let started = Instant::now();
    let (cfg, data, schema) = resolve_train(&args.flags)?;
    let table = load_schema_and_table(&data, &schema)?;
    let synth = trainer::train_chunked(&table, &cfg.train, args.chunks)?;
    let out = &args.out.out;
    ensure_dir(out)?;
    let path = out.join("synthetic.csv");
    synth.write(&path)?;
    let mut manifest = RunManifest::new("chunk-train", serde_json::json!({ "run": cfg, "chunks": args.chunks }));
    manifest.seeds.insert("train".into(), cfg.train.seed);
    manifest.privacy = Some(cfg.train.privacy.describe());
    manifest.artifacts.insert("synthetic".into(), path.clone());
    println!("{} chunks, wrote {} rows to {}", args.chunks, synth.len(), path.display());
    manifest.finish(out, started)
}

fn cmd_toy(args: ToyArgs) -> Result<()> {
    let started = Instant::now();
    let out = &args.out.out;
    ensure_dir(out)?;
    let (train, test) = toy::toy_dataset(args.seed);
    let (tp, sp, schema) = (out.join("train.csv"), out.join("test.csv"), out.join("schema.toml"));
    train.write(&tp)?;
    test.write(&sp)?;
    let decls = SchemaDecl {
        columns: toy::toy_declarations(),
    };
    fs::write(&schema, decls.to_toml_string()).with_context(|| format!("writing {}", schema.display()))?;
    let mut manifest = RunManifest::new("toy", serde_json::json!({ "seed": args.seed }));
    manifest.seeds.insert("toy".into(), args.seed);
    manifest.artifacts.insert("train".into(), tp);
    manifest.artifacts.insert("test".into(), sp);
    manifest.artifacts.insert("schema".into(), schema);
    println!("wrote toy dataset ({} train, {} test rows) to {}", train.len(), test.len(), out.display());
    manifest.finish(out, started)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let input = err
        .chain()
        .filter_map(|e| e.downcast_ref::<tablegan_core::Error>())
        .any(|e| e.is_input_error());
    if input {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Split(a) => cmd_split(a),
        Command::ChunkTrain(a) => cmd_chunk_train(a),
        Command::Toy(a) => cmd_toy(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
