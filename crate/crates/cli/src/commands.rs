use std::fs;
use std::path::{Path, PathBuf};

use macvr_core::ablation::{ablation_csv, run_ablation};
use macvr_core::databank::decode_f32le;
use macvr_core::inference::{evaluate, evaluate_model, EvalSettings, Querybank, StrategyParams, SCORE_CHUNK};
use macvr_core::model::{load_checkpoint, sample_concepts, similarity_matrix, Stream};
use macvr_core::trainer::{resume_to_dir, train_to_dir, TrainConfig};
use macvr_core::{load_bank, Error, FeatureBank, Matrix, ModelParams, SimilarityMatrix, Strategy};
use macvr_core::{generate_planted_bank, SynthConfig};

use crate::{AblateArgs, EvalArgs, ExportArgs, ResumeArgs, StrategyArgs, SynthArgs, TrainArgs};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: String,
    pub message: String,
    pub exit_code: u8,
}

impl CliError {
    fn usage(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
            exit_code: EXIT_USAGE,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let exit_code = if e.is_input_error() || matches!(e, Error::Parameter(_)) {
            EXIT_USAGE
        } else {
            EXIT_RUNTIME
        };
        Self {
            code: e.code().into(),
            message: e.to_string(),
            exit_code,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::usage("io.file", format!("{}: {e}", path.display()))
}

/// Reads a TOML config, or JSON when the file ends in `.json`.
pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::usage("config.parse", format!("{}: {e}", path.display())))
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let bank = load_bank(&args.manifest)?;
    let (outcome, artifacts) = train_to_dir(&bank, &config, &args.out_dir)?;
    let last = outcome.curve.last().map_or(f64::NAN, |r| r.report.total);
    println!("steps {} final_loss {last}", outcome.curve.len());
    println!("checkpoint {}", artifacts.checkpoint.display());
    Ok(())
}

pub fn resume(args: ResumeArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let bank = load_bank(&args.manifest)?;
    let (outcome, artifacts) = resume_to_dir(&args.state, &bank, &config, &args.out_dir)?;
    println!("steps {} total {}", outcome.curve.len(), outcome.state.step);
    println!("checkpoint {}", artifacts.checkpoint.display());
    Ok(())
}

fn probes_from_file(path: &Path, n_gallery: usize) -> Result<Querybank> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    if bytes.len() % (4 * n_gallery) != 0 {
        return Err(CliError::usage(
            "inference.querybank",
            format!("{}: {} bytes is not a whole number of {n_gallery}-column f32 rows", path.display(), bytes.len()),
        ));
    }
    let values = decode_f32le(&bytes);
    Ok(Querybank::new(Matrix::new(values.len() / n_gallery, n_gallery, values)?)?)
}

fn evaluate_checkpoint(
    bank: &FeatureBank,
    params: &ModelParams,
    strategy: Strategy,
    args: &StrategyArgs,
) -> Result<macvr_core::RetrievalMetrics> {
    if strategy == Strategy::Qb {
        if let Some(path) = &args.qb_probes {
            let querybank = probes_from_file(path, bank.len())?;
            let s = SimilarityMatrix::with_identity_truth(similarity_matrix(bank, params, SCORE_CHUNK)?)?;
            return Ok(evaluate(&s, &StrategyParams::Qb { querybank: &querybank, beta: args.beta })?);
        }
    }
    let probe_bank = args.qb_manifest.as_deref().map(load_bank).transpose()?;
    let settings = EvalSettings {
        strategy,
        tau_r: args.tau_r,
        beta: args.beta,
        querybank: probe_bank.as_ref(),
    };
    Ok(evaluate_model(bank, params, &settings)?)
}

pub fn eval(args: EvalArgs) -> Result<()> {
    if args.strategy == Strategy::Qb && args.strategy_args.qb_manifest.is_none() && args.strategy_args.qb_probes.is_none() {
        return Err(CliError::usage(
            "cli.usage",
            "--strategy qb needs a querybank: pass --qb-manifest or --qb-probes",
        ));
    }
    let bank = load_bank(&args.manifest)?;
    let (_, params) = load_checkpoint(&args.checkpoint)?;
    let metrics = evaluate_checkpoint(&bank, &params, args.strategy, &args.strategy_args)?;
    let json = metrics.to_json() + "\n";
    if let Some(out) = &args.out {
        write_file(out, json.as_bytes())?;
    }
    print!("{json}");
    Ok(())
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.strategy_args.qb_probes.is_some() {
        return Err(CliError::usage("cli.usage", "ablate takes --qb-manifest, not --qb-probes"));
    }
    let bank = load_bank(&args.manifest)?;
    let probe_bank = args.strategy_args.qb_manifest.as_deref().map(load_bank).transpose()?;
    let settings = EvalSettings {
        strategy: Strategy::None,
        tau_r: args.strategy_args.tau_r,
        beta: args.strategy_args.beta,
        querybank: probe_bank.as_ref(),
    };
    let rows = run_ablation(&bank, &config, &args.strategies, &settings)?;
    let csv = ablation_csv(&rows);
    if let Some(out) = &args.out {
        write_file(out, csv.as_bytes())?;
    }
    print!("{csv}");
    Ok(())
}

/// Concept table: one row per (sample, concept, stream).
pub fn concepts_csv(bank: &FeatureBank, params: &ModelParams) -> Result<Vec<u8>> {
    let m = params.concept_dim();
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample_id".to_string(), "k".into(), "stream".into()];
    header.extend((0..m).map(|c| format!("c{c}")));
    let csv_error = |e: csv::Error| CliError::usage("io.file", e.to_string());
    writer.write_record(&header).map_err(csv_error)?;
    for i in 0..bank.len() {
        let sets = sample_concepts(bank, params, i)?;
        let id = bank.id(i);
        for k in 0..params.k {
            for (stream, set) in Stream::ALL.iter().zip(&sets) {
                let mut record = vec![id.clone(), k.to_string(), stream.label().to_string()];
                record.extend(set.concept(k).iter().map(f64::to_string));
                writer.write_record(&record).map_err(csv_error)?;
            }
        }
    }
    writer.into_inner().map_err(|e| CliError::usage("io.file", e.to_string()))
}

pub fn export_concepts(args: ExportArgs) -> Result<()> {
    let bank = load_bank(&args.manifest)?;
    let (_, params) = load_checkpoint(&args.checkpoint)?;
    if bank.d() != params.d {
        return Err(Error::Checkpoint(format!("model dimension {} does not match bank dimension {}", params.d, bank.d())).into());
    }
    let bytes = concepts_csv(&bank, &params)?;
    write_file(&args.out, &bytes)?;
    println!("rows {}", bank.len() * params.k * Stream::ALL.len());
    Ok(())
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n: args.n,
        d: args.d,
        k: args.k,
        n_frames: args.n_frames,
        n_variants: args.n_variants,
        noise_sigma: args.noise_sigma,
        tag_informative: !args.uninformative_tags,
        seed: args.seed,
    };
    let (bank, truth) = generate_planted_bank(&cfg)?;
    let manifest: PathBuf = bank.save(&args.out_dir)?;
    let mut labels = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..cfg.k).map(|k| format!("label{k}")));
    let csv_error = |e: csv::Error| CliError::usage("io.file", e.to_string());
    labels.write_record(&header).map_err(csv_error)?;
    for (i, row) in truth.labels.iter().enumerate() {
        let mut record = vec![bank.id(i)];
        record.extend(row.iter().map(usize::to_string));
        labels.write_record(&record).map_err(csv_error)?;
    }
    let bytes = labels.into_inner().map_err(|e| CliError::usage("io.file", e.to_string()))?;
    write_file(&args.out_dir.join("labels.csv"), &bytes)?;
    println!("manifest {}", manifest.display());
    Ok(())
}
