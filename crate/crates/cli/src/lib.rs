//! Command-line front end. [`run`] is the whole program minus process
//! I/O, so tests can drive it in-process.
//!
//! Exit codes: 0 success, 1 runtime (domain or I/O) error, 2 usage error.
//! Successful runs print one JSON document on stdout.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use sardonyx::eval::{self, EvalReport, LabeledPredictions};
use sardonyx::fusion::{
    self, ExemplarMode, FusionDims, FusionParams, LoraAdapter, PhonemeEmbedding,
};
use sardonyx::numerics::mean_pool_rows;
use sardonyx::prosody::{
    self, CepstralConfig, F0Config, F0Track, FrameFeatures, FrameSpec, ProsodyEmbedding,
};
use sardonyx::retrieval::{self, SemanticEmbedding};
use sardonyx::store::{self, Label};
use sardonyx::{blob, Error};

/// Worst tolerated relative error reported by `grad-check`.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
}

#[derive(Debug, Parser)]
#[command(
    name = "sardonyx",
    version,
    about = "Exemplar retrieval, prosody analysis and conditioning toolkit",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate an externally produced manifest + embedding blob pair.
    Ingest {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Validate records and write a canonical exemplar index.
    BuildIndex {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        blob: PathBuf,
        #[arg(long)]
        out_manifest: PathBuf,
        #[arg(long)]
        out_blob: PathBuf,
        /// Keep only records with this label.
        #[arg(long)]
        only_label: Option<Label>,
    },
    /// Rank index records by cosine similarity to a pooled query.
    Retrieve {
        #[arg(long)]
        index_manifest: PathBuf,
        #[arg(long)]
        index_blob: PathBuf,
        /// Token-level semantic embedding (T_t x d_t blob); mean-pooled.
        #[arg(long)]
        query_blob: PathBuf,
        #[arg(long)]
        k: usize,
    },
    /// Mean-pool the rows of a frame-feature blob into a 1 x d blob.
    Pool {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded random parameter directory for `fuse`.
    InitParams {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        d_p: usize,
        #[arg(long, default_value_t = 8)]
        d_t: usize,
        #[arg(long, default_value_t = 8)]
        d_k: usize,
        #[arg(long, default_value_t = 8)]
        d_v: usize,
        #[arg(long, default_value_t = 4)]
        d_w: usize,
        /// Add a LoRA layer of this rank in front of the semantic stream.
        #[arg(long)]
        lora_rank: Option<usize>,
        /// Input width of the LoRA layer (defaults to d_t).
        #[arg(long)]
        lora_in: Option<usize>,
        /// LoRA scale numerator (defaults to 2 x rank).
        #[arg(long)]
        lora_alpha: Option<f64>,
    },
    /// Cross-attention plus exemplar conditioning; writes Z as a blob.
    Fuse {
        #[arg(long)]
        phoneme: PathBuf,
        #[arg(long)]
        semantic: PathBuf,
        /// Prosody embedding blobs; every row is one exemplar.
        #[arg(long, num_args = 1..)]
        exemplars: Vec<PathBuf>,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Average the projected exemplars instead of summing them.
        #[arg(long)]
        mean_exemplars: bool,
    },
    /// Compare analytic gradients with central finite differences.
    GradCheck {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        trials: usize,
    },
    /// Extract F0, energy and mel-cepstra from a 16-bit mono WAV file.
    ExtractProsody {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        analysis: AnalysisArgs,
    },
    /// Objective metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Stratified 8:1:1 train/val/test split of an index.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        blob: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// DTW-aligned mel-cepstral distortion over reference/synthesis pairs.
    /// Inputs are cepstra blobs or WAV files.
    Mcd {
        #[arg(long = "ref", num_args = 1.., required = true)]
        reference: Vec<PathBuf>,
        #[arg(long = "syn", num_args = 1.., required = true)]
        synthesized: Vec<PathBuf>,
        #[arg(long)]
        include_c0: bool,
        #[command(flatten)]
        analysis: AnalysisArgs,
    },
    /// Pitch and energy mean/std, from a WAV file or F0/energy blobs.
    Prosody {
        #[arg(long, conflicts_with_all = ["f0", "energy"], required_unless_present_all = ["f0", "energy"])]
        wav: Option<PathBuf>,
        #[arg(long, requires = "energy")]
        f0: Option<PathBuf>,
        #[arg(long, requires = "f0")]
        energy: Option<PathBuf>,
        #[command(flatten)]
        analysis: AnalysisArgs,
    },
    /// Weighted precision/recall/F1 from two label files (one label per line).
    Detection {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
    },
}

#[derive(Debug, Args)]
struct AnalysisArgs {
    #[arg(long, default_value_t = 512)]
    frame_len: usize,
    #[arg(long, default_value_t = 160)]
    hop: usize,
    #[arg(long, default_value_t = 50.0)]
    f0_min: f64,
    #[arg(long, default_value_t = 500.0)]
    f0_max: f64,
    #[arg(long, default_value_t = 0.3)]
    voicing_threshold: f64,
    #[arg(long, default_value_t = 40)]
    n_mels: usize,
    #[arg(long, default_value_t = 13)]
    n_ceps: usize,
}

impl AnalysisArgs {
    fn frame_spec(&self) -> Result<FrameSpec, Error> {
        FrameSpec::new(self.frame_len, self.hop)
    }

    fn f0(&self) -> F0Config {
        F0Config {
            f0_min: self.f0_min,
            f0_max: self.f0_max,
            voicing_threshold: self.voicing_threshold,
        }
    }

    fn cepstra(&self) -> CepstralConfig {
        CepstralConfig {
            n_mels: self.n_mels,
            n_ceps: self.n_ceps,
        }
    }
}

enum Failure {
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

type Outcome = Result<Value, Failure>;

pub fn run<I, T>(args: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => CommandResult {
                    exit_code: 0,
                    stdout: text,
                    stderr: String::new(),
                },
                _ => CommandResult {
                    exit_code: 2,
                    stdout: String::new(),
                    stderr: text,
                },
            };
        }
    };
    match dispatch(cli.command) {
        Ok(value) => CommandResult {
            exit_code: 0,
            stdout: format!(
                "{}\n",
                serde_json::to_string_pretty(&value).expect("JSON values serialize")
            ),
            stderr: String::new(),
        },
        Err(Failure::Usage(msg)) => CommandResult {
            exit_code: 2,
            stdout: String::new(),
            stderr: format!("error: {msg}\n"),
        },
        Err(Failure::Domain(e)) => CommandResult {
            exit_code: 1,
            stdout: String::new(),
            stderr: format!("error: {}: {e}\n", e.name()),
        },
    }
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Ingest {
            embeddings,
            manifest,
        } => ingest(&manifest, &embeddings),
        Command::BuildIndex {
            manifest,
            blob,
            out_manifest,
            out_blob,
            only_label,
        } => build_index(&manifest, &blob, &out_manifest, &out_blob, only_label),
        Command::Retrieve {
            index_manifest,
            index_blob,
            query_blob,
            k,
        } => retrieve(&index_manifest, &index_blob, &query_blob, k),
        Command::Pool { input, out } => pool(&input, &out),
        Command::InitParams {
            out,
            seed,
            d_p,
            d_t,
            d_k,
            d_v,
            d_w,
            lora_rank,
            lora_in,
            lora_alpha,
        } => init_params(
            &out,
            seed,
            FusionDims {
                d_p,
                d_t,
                d_k,
                d_v,
                d_w,
            },
            lora_rank,
            lora_in,
            lora_alpha,
        ),
        Command::Fuse {
            phoneme,
            semantic,
            exemplars,
            params,
            out,
            mean_exemplars,
        } => fuse(
            &phoneme,
            &semantic,
            &exemplars,
            &params,
            &out,
            mean_exemplars,
        ),
        Command::GradCheck { seed, trials } => grad_check(seed, trials),
        Command::ExtractProsody {
            wav,
            out_dir,
            analysis,
        } => extract_prosody(&wav, &out_dir, &analysis),
        Command::Eval(cmd) => match cmd {
            EvalCommand::Mcd {
                reference,
                synthesized,
                include_c0,
                analysis,
            } => eval_mcd(&reference, &synthesized, include_c0, &analysis),
            EvalCommand::Prosody {
                wav,
                f0,
                energy,
                analysis,
            } => eval_prosody(wav.as_deref(), f0.as_deref(), energy.as_deref(), &analysis),
            EvalCommand::Detection { gold, pred } => eval_detection(&gold, &pred),
        },
        Command::Split {
            manifest,
            blob,
            seed,
            out_dir,
        } => split(&manifest, &blob, seed, &out_dir),
    }
}

fn label_counts(records: &[store::UtteranceRecord]) -> BTreeMap<&'static str, usize> {
    let mut counts: BTreeMap<&'static str, usize> =
        Label::ALL.iter().map(|l| (l.as_str(), 0)).collect();
    for r in records {
        *counts.entry(r.label.as_str()).or_default() += 1;
    }
    counts
}

fn ingest(manifest: &Path, embeddings: &Path) -> Outcome {
    let index = store::load_index(manifest, embeddings)?;
    Ok(json!({
        "valid": true,
        "count": index.len(),
        "dim": index.dim(),
        "labels": label_counts(index.records()),
    }))
}

fn build_index(
    manifest: &Path,
    blob: &Path,
    out_manifest: &Path,
    out_blob: &Path,
    only_label: Option<Label>,
) -> Outcome {
    let mut records = store::load_index(manifest, blob)?.into_records();
    if let Some(label) = only_label {
        records.retain(|r| r.label == label);
    }
    let index = store::build_index(records)?;
    store::save_index(&index, out_manifest, out_blob)?;
    Ok(json!({
        "count": index.len(),
        "dim": index.dim(),
        "labels": label_counts(index.records()),
        "manifest": out_manifest,
        "blob": out_blob,
    }))
}

fn retrieve(index_manifest: &Path, index_blob: &Path, query_blob: &Path, k: usize) -> Outcome {
    let index = store::load_index(index_manifest, index_blob)?;
    let query = SemanticEmbedding::new(blob::read(query_blob)?);
    let hits = retrieval::retrieve(&index, &query, k)?;
    let hits: Vec<Value> = hits
        .iter()
        .map(|h| {
            let record = &index.records()[h.position];
            let mut v = json!({
                "rank": h.rank,
                "record_id": h.record_id,
                "position": h.position,
                "score": h.score,
                "label": record.label,
            });
            if let Some(a) = &record.audio_path {
                v["audio_path"] = json!(a);
            }
            v
        })
        .collect();
    Ok(json!({ "k": k, "query_tokens": query.seq_len(), "hits": hits }))
}

fn pool(input: &Path, out: &Path) -> Outcome {
    let frames = blob::read(input)?;
    let pooled = mean_pool_rows(&frames)?;
    blob::write(out, &pooled.to_row_matrix())?;
    Ok(json!({ "frames": frames.rows(), "dim": pooled.dim(), "out": out }))
}

fn init_params(
    out: &Path,
    seed: u64,
    dims: FusionDims,
    lora_rank: Option<usize>,
    lora_in: Option<usize>,
    lora_alpha: Option<f64>,
) -> Outcome {
    if lora_rank.is_none() && (lora_in.is_some() || lora_alpha.is_some()) {
        return Err(Failure::Usage(
            "--lora-in/--lora-alpha need --lora-rank".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = FusionParams::init(dims, &mut rng)?;
    let adapter = lora_rank
        .map(|rank| {
            let alpha = lora_alpha.unwrap_or(2.0 * rank as f64);
            LoraAdapter::init(lora_in.unwrap_or(dims.d_t), dims.d_t, rank, alpha, &mut rng)
        })
        .transpose()?;
    fusion::save_params(out, &params, adapter.as_ref())?;
    Ok(json!({
        "out": out,
        "seed": seed,
        "dims": { "d_p": dims.d_p, "d_t": dims.d_t, "d_k": dims.d_k, "d_v": dims.d_v, "d_w": dims.d_w },
        "lora_rank": adapter.as_ref().map(LoraAdapter::rank),
    }))
}

fn fuse(
    phoneme: &Path,
    semantic: &Path,
    exemplar_paths: &[PathBuf],
    params_dir: &Path,
    out: &Path,
    mean: bool,
) -> Outcome {
    let (params, adapter) = fusion::load_params(params_dir)?;
    let e_p = PhonemeEmbedding::new(blob::read(phoneme)?);
    let mut e_s = blob::read(semantic)?;
    if let Some(adapter) = &adapter {
        e_s = fusion::lora_forward(&e_s, adapter)?;
    }
    let mut exemplars = Vec::new();
    for path in exemplar_paths {
        let m = blob::read(path)?;
        for row in m.row_iter() {
            exemplars.push(ProsodyEmbedding::new(sardonyx::Vector::new(row.to_vec())?));
        }
    }
    let mode = if mean {
        ExemplarMode::Mean
    } else {
        ExemplarMode::Sum
    };
    let output = fusion::fuse(
        &e_p,
        &SemanticEmbedding::new(e_s),
        &exemplars,
        &params,
        mode,
    )?;
    blob::write(out, &output.z)?;
    Ok(json!({
        "rows": output.z.rows(),
        "cols": output.z.cols(),
        "exemplars": exemplars.len(),
        "lora": adapter.is_some(),
        "out": out,
    }))
}

fn grad_check(seed: u64, trials: usize) -> Outcome {
    if trials == 0 {
        return Err(Failure::Usage("--trials must be at least 1".into()));
    }
    let report = fusion::grad_check(seed, trials)?;
    let mut v = serde_json::to_value(&report).expect("report serializes");
    v["tolerance"] = json!(GRAD_CHECK_TOLERANCE);
    v["passed"] = json!(report.max_rel_error < GRAD_CHECK_TOLERANCE);
    Ok(v)
}

struct Analysis {
    sample_rate: u32,
    f0: F0Track,
    energy: FrameFeatures,
    cepstra: FrameFeatures,
}

fn analyze(wav: &Path, args: &AnalysisArgs) -> Result<Analysis, Error> {
    let w = prosody::read_wav(wav)?;
    let spec = args.frame_spec()?;
    Ok(Analysis {
        sample_rate: w.sample_rate(),
        f0: prosody::estimate_f0(&w, spec, &args.f0())?,
        energy: prosody::frame_energy(&w, spec)?,
        cepstra: prosody::mel_cepstra(&w, spec, &args.cepstra())?,
    })
}

fn extract_prosody(wav: &Path, out_dir: &Path, args: &AnalysisArgs) -> Outcome {
    let a = analyze(wav, args)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths = [
        out_dir.join("f0.semb"),
        out_dir.join("energy.semb"),
        out_dir.join("cepstra.semb"),
    ];
    blob::write(&paths[0], &a.f0.to_matrix()?)?;
    blob::write(&paths[1], a.energy.values())?;
    blob::write(&paths[2], a.cepstra.values())?;
    let report = EvalReport::from(prosody::prosody_stats(&a.f0, &a.energy));
    Ok(json!({
        "sample_rate": a.sample_rate,
        "frames": a.energy.n_frames(),
        "stats": report,
        "f0": paths[0],
        "energy": paths[1],
        "cepstra": paths[2],
    }))
}

fn is_wav(path: &Path) -> Result<bool, Error> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes.starts_with(b"RIFF"))
}

fn cepstra_of(path: &Path, args: &AnalysisArgs) -> Result<FrameFeatures, Error> {
    if is_wav(path)? {
        let w = prosody::read_wav(path)?;
        prosody::mel_cepstra(&w, args.frame_spec()?, &args.cepstra())
    } else {
        Ok(FrameFeatures::new(blob::read(path)?))
    }
}

fn eval_mcd(
    reference: &[PathBuf],
    synthesized: &[PathBuf],
    include_c0: bool,
    args: &AnalysisArgs,
) -> Outcome {
    if reference.len() != synthesized.len() {
        return Err(Failure::Usage(format!(
            "{} --ref inputs but {} --syn inputs",
            reference.len(),
            synthesized.len()
        )));
    }
    let pairs = reference
        .iter()
        .zip(synthesized)
        .map(|(r, s)| Ok((cepstra_of(r, args)?, cepstra_of(s, args)?)))
        .collect::<Result<Vec<_>, Error>>()?;
    let summary = eval::mcd_summary(&pairs, !include_c0)?;
    Ok(serde_json::to_value(EvalReport {
        mcd_db: Some(summary),
        ..EvalReport::default()
    })
    .expect("report serializes"))
}

fn eval_prosody(
    wav: Option<&Path>,
    f0: Option<&Path>,
    energy: Option<&Path>,
    args: &AnalysisArgs,
) -> Outcome {
    let (track, energy) = match (wav, f0, energy) {
        (Some(wav), _, _) => {
            let a = analyze(wav, args)?;
            (a.f0, a.energy)
        }
        (None, Some(f0), Some(energy)) => {
            let track = F0Track::from_matrix(&blob::read(f0)?)?;
            let energy = blob::read(energy)?;
            if energy.cols() != 1 {
                return Err(Error::Dimension(format!(
                    "energy blob has {} columns, expected 1",
                    energy.cols()
                ))
                .into());
            }
            (track, FrameFeatures::new(energy))
        }
        _ => {
            return Err(Failure::Usage(
                "give --wav, or both --f0 and --energy".into(),
            ))
        }
    };
    let report = EvalReport::from(prosody::prosody_stats(&track, &energy));
    Ok(serde_json::to_value(report).expect("report serializes"))
}

fn read_labels(path: &Path) -> Result<Vec<Label>, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::parse)
        .collect()
}

fn eval_detection(gold: &Path, pred: &Path) -> Outcome {
    let lp = LabeledPredictions::new(read_labels(gold)?, read_labels(pred)?)?;
    Ok(serde_json::to_value(EvalReport {
        detection: Some(eval::detection_metrics(&lp)),
        ..EvalReport::default()
    })
    .expect("report serializes"))
}

fn split(manifest: &Path, blob: &Path, seed: u64, out_dir: &Path) -> Outcome {
    let records = store::load_index(manifest, blob)?.into_records();
    let parts = eval::dataset_split(records, seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut summary = serde_json::Map::new();
    summary.insert("seed".into(), json!(seed));
    for (name, records) in [
        ("train", parts.train),
        ("val", parts.val),
        ("test", parts.test),
    ] {
        let (m, b) = (
            out_dir.join(format!("{name}.json")),
            out_dir.join(format!("{name}.semb")),
        );
        let count = records.len();
        let labels = label_counts(&records);
        if count > 0 {
            store::save_index(&store::build_index(records)?, &m, &b)?;
        }
        summary.insert(
            name.into(),
            json!({
                "count": count,
                "labels": labels,
                "manifest": (count > 0).then_some(&m),
                "blob": (count > 0).then_some(&b),
            }),
        );
    }
    Ok(Value::Object(summary))
}
