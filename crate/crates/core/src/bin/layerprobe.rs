use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use layerprobe::config::RunConfig;
use layerprobe::corpus::AnnotationIndex;
use layerprobe::features::{write_caption_embeddings, MANIFEST_FILE};
use layerprobe::pairs::{DatasetDump, DatasetTask};
use layerprobe::pipeline::{DatasetIndex, Pipeline, CORPUS_FILE, DATASETS_DIR, DATASET_INDEX_FILE};
use layerprobe::seed::{self, domain};
use layerprobe::synth::{self, SignalProfile};
use layerprobe::{Error, Result};

/// Layer-wise linear probing of frozen multimodal language models.
#[derive(Parser, Debug)]
#[command(name = "layerprobe", version)]
struct Cli {
    /// Run configuration (JSON). Flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root. Overrides LAYERPROBE_OUTPUT and the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for probe sweeps. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Feature-run directory, or a directory whose subdirectories are runs.
    /// Repeatable; replaces the config's list.
    #[arg(long = "features", global = true)]
    features: Vec<PathBuf>,
    #[arg(long, global = true)]
    embeddings: Option<PathBuf>,
    #[arg(long, global = true)]
    captions: Option<PathBuf>,
    #[arg(long, global = true)]
    instances: Option<PathBuf>,
    #[arg(long = "run-id", global = true)]
    run_id: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse COCO caption and instance files into corpus.json.
    Ingest,
    /// Split the corpus and write entailment and recognition datasets.
    BuildDataset,
    /// Check every feature run against its dataset dump.
    ValidateFeatures,
    /// Train one probe per layer of every feature run.
    Train,
    /// Score trained probes on the test split.
    Evaluate,
    /// Train and evaluate every layer, then aggregate per-layer scores.
    Sweep,
    /// Token-frequency tables for the case-study category.
    AnalyzeTokens {
        /// Token log to analyze instead of the configured runs.
        #[arg(long, requires = "dataset")]
        tokens: Option<PathBuf>,
        /// Recognition dataset dump the token log was extracted from.
        #[arg(long, requires = "tokens")]
        dataset: Option<PathBuf>,
    },
    /// Write CSV, SVG, markdown and run.json under report/{run_id}.
    Report,
    /// Print the resolved configuration and its hash.
    Config,
    /// Write a synthetic COCO-style corpus.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = synth::FIXTURE_IMAGES)]
        images: usize,
        #[arg(long = "corpus-seed", default_value_t = synth::FIXTURE_SEED)]
        corpus_seed: u64,
    },
    /// Write a caption-embedding run for the ingested corpus.
    SynthEmbeddings {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        dim: usize,
    },
    /// Write one synthetic hidden-state run per built dataset.
    SynthFeatures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        layers: u16,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long = "peak-layer")]
        peak_layer: Option<u16>,
        #[arg(long = "peak-strength", default_value_t = 4.0)]
        peak_strength: f64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::BuildDataset => "build-dataset",
            Command::ValidateFeatures => "validate-features",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Sweep => "sweep",
            Command::AnalyzeTokens { .. } => "analyze-tokens",
            Command::Report => "report",
            Command::Config => "config",
            Command::SynthCorpus { .. } => "synth-corpus",
            Command::SynthEmbeddings { .. } => "synth-embeddings",
            Command::SynthFeatures { .. } => "synth-features",
        }
    }

}

fn expand_feature_dirs(dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for dir in dirs {
        if dir.join(MANIFEST_FILE).exists() || !dir.is_dir() {
            out.push(dir.clone());
            continue;
        }
        let mut runs: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::Invalid(format!("{}: {e}", dir.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.join(MANIFEST_FILE).exists())
            .collect();
        if runs.is_empty() {
            return Err(Error::Invalid(format!("{} holds no feature runs", dir.display())));
        }
        runs.sort();
        out.extend(runs);
    }
    Ok(out)
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(v) = &cli.output {
        cfg.output_dir = Some(v.clone());
    }
    if let Some(v) = cli.seed {
        cfg.global_seed = v;
    }
    if let Some(v) = cli.workers {
        cfg.workers = Some(v);
    }
    if !cli.features.is_empty() {
        cfg.feature_runs = expand_feature_dirs(&cli.features)?;
    }
    if let Some(v) = &cli.embeddings {
        cfg.embedding_run = Some(v.clone());
    }
    if let Some(v) = &cli.captions {
        cfg.captions_path = Some(v.clone());
    }
    if let Some(v) = &cli.instances {
        cfg.instances_path = Some(v.clone());
    }
    if let Some(v) = &cli.run_id {
        cfg.run_id = Some(v.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn synth_features(p: &Pipeline, out: &Path, layers: u16, dim: usize, peak_layer: Option<u16>, strength: f64) -> Result<Value> {
    let index_path = p.output_dir().join(DATASETS_DIR).join(DATASET_INDEX_FILE);
    if !index_path.exists() {
        return Err(Error::Precondition(format!("{} not found; run `build-dataset` first", index_path.display())));
    }
    let index: DatasetIndex = serde_json::from_slice(
        &std::fs::read(&index_path).map_err(|e| Error::Invalid(format!("{}: {e}", index_path.display())))?,
    )?;
    let profile = SignalProfile {
        num_layers: layers,
        dim,
        peak_strength: strength,
        peak_layer: peak_layer.unwrap_or(layers.div_ceil(2)),
    };
    let mut runs = Vec::new();
    for (i, entry) in index.datasets.iter().enumerate() {
        let dump = DatasetDump::read(&p.output_dir().join(DATASETS_DIR).join(&entry.file))?;
        let name = match (dump.header.task, dump.header.target_category) {
            (DatasetTask::Recognition, Some(c)) => format!("{}-{c:02}", dump.header.template_id),
            _ => "entailment".to_string(),
        };
        let dir = out.join(&name);
        let run_seed = seed::seed_mix(p.config().global_seed, domain::SYNTH, i as u64);
        synth::write_synthetic_run(&dir, &name, &dump, &profile, run_seed)?;
        runs.push(dir);
    }
    Ok(json!({ "runs": runs }))
}

fn run(cli: &Cli) -> Result<Value> {
    let cfg = resolve_config(cli)?;
    let pipeline = Pipeline::new(cfg)?;
    match &cli.command {
        Command::Ingest => to_value(&pipeline.ingest()?),
        Command::BuildDataset => {
            let index = pipeline.build_dataset()?;
            Ok(json!({
                "corpus_hash": index.corpus_hash,
                "split_counts": index.split_counts,
                "datasets": index.datasets.len(),
            }))
        }
        Command::ValidateFeatures => to_value(&pipeline.validate_features()?),
        Command::Train => {
            let records = pipeline.train()?;
            Ok(json!({ "runs": records.iter().map(|r| json!({"run_id": r.run_id, "layers": r.layers.len()})).collect::<Vec<_>>() }))
        }
        Command::Evaluate => {
            let records = pipeline.evaluate()?;
            Ok(json!({ "runs": records.iter().map(|r| json!({"run_id": r.run_id, "layers": r.layers.len()})).collect::<Vec<_>>() }))
        }
        Command::Sweep => {
            let file = pipeline.sweep()?;
            Ok(json!({ "sweeps": file.sweeps, "skipped": file.skipped.len() }))
        }
        Command::AnalyzeTokens { tokens, dataset } => {
            let explicit = tokens.as_deref().zip(dataset.as_deref());
            let file = pipeline.analyze_tokens(explicit)?;
            Ok(json!({ "tables": file.tables.len() }))
        }
        Command::Report => to_value(&pipeline.report()?),
        Command::Config => Ok(json!({
            "config": pipeline.config().echo(),
            "config_hash": pipeline.config_hash(),
            "output_dir": pipeline.output_dir(),
        })),
        Command::SynthCorpus { out, images, corpus_seed } => {
            synth::synthetic_corpus(*images, *corpus_seed).write(out)?;
            Ok(json!({ "captions": out.join("captions.json"), "instances": out.join("instances.json") }))
        }
        Command::SynthEmbeddings { out, dim } => {
            let path = pipeline.output_dir().join(CORPUS_FILE);
            if !path.exists() {
                return Err(Error::Precondition(format!("{} not found; run `ingest` first", path.display())));
            }
            let index = AnnotationIndex::read(&path)?;
            let (ids, matrix) = synth::synthetic_caption_embeddings(&index, *dim, pipeline.config().global_seed)?;
            let count = ids.len();
            write_caption_embeddings(out, "synthetic-bow", &index.content_hash(), ids, &matrix)?;
            Ok(json!({ "embedding_run": out, "captions": count }))
        }
        Command::SynthFeatures {
            out,
            layers,
            dim,
            peak_layer,
            peak_strength,
        } => synth_features(&pipeline, out, *layers, *dim, *peak_layer, *peak_strength),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(value) => {
            let _ = writeln!(std::io::stdout(), "{value}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let record = json!({
                "error": {
                    "kind": err.kind(),
                    "message": err.to_string(),
                    "command": cli.command.name(),
                }
            });
            eprintln!("{record}");
            ExitCode::from(2)
        }
    }
}
