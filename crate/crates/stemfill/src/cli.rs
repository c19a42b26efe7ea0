//! Command-line orchestration: corpus construction, training, sampling,
//! the SDEdit baseline, evaluation, and figure rendering.
//!
//! Six verbs — `make-corpus`, `train`, `generate`, `baseline`,
//! `evaluate`, `render` — each exits 0 on success and nonzero with a
//! one-line error otherwise. Every run directory receives the effective
//! configuration as JSON for reproducibility.

use crate::audio::{self, MelSpec, StftConfig};
use crate::dataset::{
    self, build_roll_chunks, build_triplets, generate_toy_corpus, read_manifest, write_manifest,
    RollChunk, RollEntry, Split, Triplet, TOY_STYLES,
};
use crate::diffusion::{
    self, binary_sample, binary_train_step, load_model, sample_insert, sample_sdedit, save_model,
    train_step, DiffusionSchedule, RejectionConfig, SamplerConfig, TrainConfig,
};
use crate::instruct::{shorten_caption, EditInstruction};
use crate::metrics::{
    self, load_embedder, save_embedder, train_embedder, Embedder, EmbedderTrainConfig,
};
use crate::nn::{lr_at, UNet, UNetConfig};
use crate::pianoroll::{
    from_pianoroll, parse_midi, to_pianoroll, write_midi, Instrument, PianoRoll,
};
use crate::render;
use crate::tensorfile;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Audio(#[from] audio::AudioError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Diffusion(#[from] diffusion::DiffusionError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Midi(#[from] crate::pianoroll::MidiError),
    #[error(transparent)]
    Tensor(#[from] tensorfile::TensorFileError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io { path: path.to_path_buf(), source: e }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub sessions: usize,
    pub styles: Vec<String>,
    pub sample_rate: u32,
    pub target_stem: String,
    /// Fraction of sessions assigned to the train split.
    pub train_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            sessions: 16,
            styles: TOY_STYLES.iter().map(|s| s.to_string()).collect(),
            sample_rate: 8000,
            target_stem: "drums".into(),
            train_fraction: 0.8,
        }
    }
}

/// Root configuration: a JSON file merged with CLI flags. Unknown keys
/// are rejected.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stft: StftConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub embedder: EmbedderTrainConfig,
    pub corpus: CorpusConfig,
    /// U-Net widths preset: "full" (32/64/128) or "tiny" (8/16/32).
    pub model_size: ModelSize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    #[default]
    Full,
    Tiny,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))
            }
        }
    }

    fn unet_config(&self, in_ch: usize, out_ch: usize) -> UNetConfig {
        match self.model_size {
            ModelSize::Full => UNetConfig { in_ch, out_ch, ..UNetConfig::default() },
            ModelSize::Tiny => UNetConfig::tiny(in_ch, out_ch),
        }
    }

    /// Stable hash of the effective configuration, recorded in reports.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// Write the effective configuration into the run directory.
    pub fn echo_to(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join("effective_config.json");
        let json = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, json).map_err(|e| io_err(&path, e))
    }
}

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "stemfill", version, about = "Conditional diffusion for music stem insertion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the deterministic toy corpus and its manifest.
    MakeCorpus(MakeCorpusArgs),
    /// Train a spectrogram, roll, or embedder model.
    Train(TrainArgs),
    /// Insert a stem into a WAV (spectrogram model) or MIDI (roll model).
    Generate(GenerateArgs),
    /// Run the SDEdit baseline on a stem-subtracted WAV.
    Baseline(BaselineArgs),
    /// Compute the FD / FAD / KLD / ISc report.
    Evaluate(EvaluateArgs),
    /// Render a tensor file or MIDI as PNG.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct MakeCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub sessions: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated subset of the toy styles.
    #[arg(long, value_delimiter = ',')]
    pub styles: Vec<String>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    Spectrogram,
    Roll,
    Embedder,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "spectrogram")]
    pub mode: TrainMode,
    /// Target instrument for roll models.
    #[arg(long, default_value = "drums")]
    pub target: String,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub model_size: Option<ModelSize>,
    /// Checkpoint interval in steps (also written at the end).
    #[arg(long, default_value_t = 1000)]
    pub save_every: u64,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Input WAV (stem-subtracted mix) or MIDI (context tracks).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "drums")]
    pub stem: String,
    #[arg(long, default_value = "Add rock-style drums")]
    pub instruction: String,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Rejection bounds for MIDI generation.
    #[arg(long, default_value_t = 0.01)]
    pub min_density: f64,
    #[arg(long, default_value_t = 0.2)]
    pub max_density: f64,
    #[arg(long, default_value_t = 16)]
    pub max_attempts: usize,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Full caption; conditioning uses its 5-word truncation.
    #[arg(long, default_value = "Add rock-style drums to the mix")]
    pub caption: String,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub strength: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of generated mel tensor files (*.stwd).
    #[arg(long)]
    pub generated: PathBuf,
    /// Directory of paired reference mel tensor files.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub fd_embedder: PathBuf,
    #[arg(long)]
    pub fad_embedder: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// A mel/triplet tensor file (.stwd) or a MIDI file (.mid).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Channel to outline when rendering piano rolls.
    #[arg(long)]
    pub outline: Option<String>,
}

/// Entry point used by the thin binary.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::MakeCorpus(a) => cmd_make_corpus(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Baseline(a) => cmd_baseline(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Render(a) => cmd_render(&a),
    }
}

// ---------------------------------------------------------------------------
// make-corpus
// ---------------------------------------------------------------------------

fn split_for(index: usize, total: usize, train_fraction: f64) -> Split {
    let n_train = ((total as f64) * train_fraction).round() as usize;
    if index < n_train.max(1).min(total.saturating_sub(1).max(1)) {
        Split::Train
    } else {
        Split::Test
    }
}

pub fn cmd_make_corpus(args: &MakeCorpusArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(s) = args.sessions {
        cfg.corpus.sessions = s;
    }
    if let Some(s) = args.seed {
        cfg.corpus.seed = s;
    }
    if !args.styles.is_empty() {
        cfg.corpus.styles = args.styles.clone();
    }
    for s in &cfg.corpus.styles {
        if !TOY_STYLES.contains(&s.as_str()) {
            return Err(CliError::Usage(format!(
                "unknown style {s:?}; available: {}",
                TOY_STYLES.join(", ")
            )));
        }
    }
    if args.out.exists()
        && std::fs::read_dir(&args.out)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false)
        && !args.force
    {
        return Err(CliError::Usage(format!(
            "output directory {} is not empty (use --force to overwrite)",
            args.out.display()
        )));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;

    let sessions = generate_toy_corpus(
        cfg.corpus.seed,
        cfg.corpus.sessions,
        &cfg.corpus.styles,
        cfg.corpus.sample_rate,
    )?;
    let target_instrument = instrument_named(&cfg.corpus.target_stem)?;
    let mut triplets: Vec<(Triplet, Split)> = Vec::new();
    let mut rolls: Vec<(RollEntry, Split)> = Vec::new();
    let total = sessions.len();
    for (i, toy) in sessions.iter().enumerate() {
        let split = split_for(i, total, cfg.corpus.train_fraction);
        for t in build_triplets(&toy.session, &cfg.corpus.target_stem, &cfg.stft)? {
            triplets.push((t, split));
        }
        let chunks = build_roll_chunks(
            &toy.midi,
            target_instrument,
            dataset::DEFAULT_BARS_PER_CHUNK,
            &toy.session.tags,
        )?;
        for (ci, chunk) in chunks.into_iter().enumerate() {
            rolls.push((
                RollEntry {
                    chunk,
                    session_id: toy.session.session_id.clone(),
                    chunk_index: ci,
                },
                split,
            ));
        }
    }
    write_manifest(&args.out, &triplets, &rolls)?;
    cfg.echo_to(&args.out)?;
    fn count<T>(items: &[(T, Split)], s: Split) -> usize {
        items.iter().filter(|(_, sp)| *sp == s).count()
    }
    println!(
        "corpus {}: {} sessions; triplets train={} test={}; rolls train={} test={}",
        args.out.display(),
        total,
        count(&triplets, Split::Train),
        count(&triplets, Split::Test),
        count(&rolls, Split::Train),
        count(&rolls, Split::Test),
    );
    Ok(())
}

fn instrument_named(name: &str) -> Result<Instrument, CliError> {
    Instrument::from_name(name)
        .ok_or_else(|| CliError::Usage(format!("unknown instrument {name:?} (drums, bass, guitar)")))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Style label from manifest tags (position of the style tag in the toy
/// style list).
fn label_from_tags(tags: &[String]) -> Option<u32> {
    tags.iter()
        .find_map(|t| TOY_STYLES.iter().position(|s| s == t))
        .map(|i| i as u32)
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(s) = args.steps {
        cfg.train.max_steps = s;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(m) = args.model_size {
        cfg.model_size = m;
    }
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    cfg.echo_to(&args.out)?;
    let (triplets, rolls) = read_manifest(&args.corpus)?;

    match args.mode {
        TrainMode::Embedder => {
            let data: Vec<(MelSpec, u32)> = triplets
                .iter()
                .filter(|(_, s)| *s == Split::Train)
                .filter_map(|(t, _)| {
                    label_from_tags(&t.instruction.style_tags)
                        .map(|l| (t.full.clone(), l))
                })
                .collect();
            if data.is_empty() {
                return Err(CliError::Usage(
                    "no labeled training triplets in corpus".into(),
                ));
            }
            let (mut fd_emb, acc1) = train_embedder("fd-toy", &data, &cfg.embedder)?;
            let fad_cfg = EmbedderTrainConfig {
                widths: [
                    cfg.embedder.widths[0] * 2,
                    cfg.embedder.widths[1],
                    cfg.embedder.widths[2] / 2,
                ],
                seed: cfg.embedder.seed ^ 0x5eed,
                ..cfg.embedder.clone()
            };
            let (mut fad_emb, acc2) = train_embedder("fad-toy", &data, &fad_cfg)?;
            save_embedder(&args.out.join("fd_embedder.stwd"), &mut fd_emb)?;
            save_embedder(&args.out.join("fad_embedder.stwd"), &mut fad_emb)?;
            println!("embedders trained: fd holdout acc {acc1:.3}, fad holdout acc {acc2:.3}");
            Ok(())
        }
        TrainMode::Spectrogram => {
            let items: Vec<&Triplet> = triplets
                .iter()
                .filter(|(_, s)| *s == Split::Train)
                .map(|(t, _)| t)
                .collect();
            if items.is_empty() {
                return Err(CliError::Usage("no training triplets in corpus".into()));
            }
            train_loop(args, &cfg, TrainData::Triplets(&items))
        }
        TrainMode::Roll => {
            let target = instrument_named(&args.target)?;
            let items: Vec<&RollChunk> = rolls
                .iter()
                .filter(|(e, s)| *s == Split::Train && e.chunk.target_instrument == target)
                .map(|(e, _)| &e.chunk)
                .collect();
            if items.is_empty() {
                return Err(CliError::Usage(format!(
                    "no training roll chunks for target {:?}",
                    args.target
                )));
            }
            train_loop(args, &cfg, TrainData::Rolls(&items))
        }
    }
}

enum TrainData<'a> {
    Triplets(&'a [&'a Triplet]),
    Rolls(&'a [&'a RollChunk]),
}

fn train_loop(args: &TrainArgs, cfg: &RunConfig, data: TrainData<'_>) -> Result<(), CliError> {
    let schedule = DiffusionSchedule::default();
    let (in_ch, out_ch, n_items) = match &data {
        TrainData::Triplets(v) => (2, 1, v.len()),
        TrainData::Rolls(v) => (3, 1, v.len()),
    };
    let (mut model, mut opt, start_step) = match &args.resume {
        Some(path) => {
            let ck = load_model(path)?;
            let mut opt = cfg.train.optimizer::<f32>();
            let mut m = ck.model;
            if !ck.opt_state.is_empty() {
                opt.load_state(&m.params_mut(), &ck.opt_state, ck.train_step);
            }
            (m, opt, ck.train_step)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let model = UNet::<f32>::new(cfg.unet_config(in_ch, out_ch), &mut rng);
            (model, cfg.train.optimizer::<f32>(), 0)
        }
    };
    println!("model parameters: {}", model.param_count());

    let log_path = args.out.join("losses.csv");
    let mut log = std::fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    writeln!(log, "step,lr,loss").map_err(|e| io_err(&log_path, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(start_step));
    let mut order: Vec<usize> = (0..n_items).collect();
    let ck_path = args.out.join("checkpoint.stwd");
    let mut cursor = n_items; // trigger reshuffle on first use
    for step in start_step..cfg.train.max_steps {
        let mut batch_idx = Vec::with_capacity(cfg.train.batch);
        for _ in 0..cfg.train.batch {
            if cursor >= n_items {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let loss = match &data {
            TrainData::Triplets(v) => {
                let batch: Vec<&Triplet> = batch_idx.iter().map(|&i| v[i]).collect();
                train_step(&mut model, &mut opt, &batch, &schedule, &cfg.train, step, &mut rng)?
            }
            TrainData::Rolls(v) => {
                let batch: Vec<&RollChunk> = batch_idx.iter().map(|&i| v[i]).collect();
                binary_train_step(&mut model, &mut opt, &batch, &schedule, &cfg.train, step, &mut rng)?
            }
        };
        let lr = lr_at(step, cfg.train.lr, cfg.train.warmup, cfg.train.max_steps);
        writeln!(log, "{},{lr:.6e},{loss:.6}", step + 1).map_err(|e| io_err(&log_path, e))?;
        if (step + 1) % args.save_every == 0 {
            save_checkpoint(&ck_path, &model, &schedule, step + 1, &mut opt)?;
        }
    }
    save_checkpoint(&ck_path, &model, &schedule, cfg.train.max_steps, &mut opt)?;
    println!("trained to step {}; checkpoint {}", cfg.train.max_steps, ck_path.display());
    Ok(())
}

fn save_checkpoint(
    path: &Path,
    model: &UNet<f32>,
    schedule: &DiffusionSchedule,
    step: u64,
    opt: &mut crate::nn::AdamW<f32>,
) -> Result<(), CliError> {
    let mut m2 = model.cast::<f32>();
    save_model(path, model, schedule, step, Some((opt, &mut m2)))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// generate / baseline
// ---------------------------------------------------------------------------

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn save_mel_tensor(path: &Path, spec: &MelSpec) -> Result<(), CliError> {
    let meta = serde_json::json!({ "kind": "mel", "stft": spec.config });
    tensorfile::write(path, &meta, &[("mel".to_string(), spec.values.clone().into_dyn())])?;
    Ok(())
}

fn load_mel_tensor(path: &Path) -> Result<MelSpec, CliError> {
    let tf = tensorfile::read(path)?;
    let name = match tf.meta.get("kind").and_then(|v| v.as_str()) {
        Some("mel") => "mel",
        Some("triplet") => "full",
        other => {
            return Err(CliError::Usage(format!(
                "{}: expected a mel tensor file, found kind {other:?}",
                path.display()
            )))
        }
    };
    let values = tf
        .tensor(name)?
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let config: StftConfig = tf
        .meta
        .get("stft")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| CliError::Config(e.to_string()))?
        .unwrap_or_default();
    Ok(MelSpec { values, config })
}

/// Generated full mix, input partial, and their (clamped) difference —
/// the inserted stem's energy — as a three-panel comparison.
fn comparison_panels(generated: &MelSpec, partial: &MelSpec) -> (MelSpec, MelSpec, MelSpec) {
    let diff = MelSpec {
        values: Array2::from_shape_fn(generated.values.dim(), |ix| {
            (generated.values[ix] - partial.values[ix]).max(0.0)
        }),
        config: generated.config.clone(),
    };
    (generated.clone(), partial.clone(), diff)
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    cfg.echo_to(&args.out)?;
    let ck = load_model(&args.model)?;
    let schedule = DiffusionSchedule::new(ck.t_steps);
    let scfg = SamplerConfig { steps: args.steps, seed: args.seed, ..cfg.sampler.clone() };

    let ext = args
        .input
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "wav" => {
            let bytes = std::fs::read(&args.input).map_err(|e| io_err(&args.input, e))?;
            let wave = audio::load_wav(&bytes)?;
            let wave = audio::resample(&wave, cfg.stft.sample_rate)?;
            let partial = audio::mel_spectrogram(&wave, &cfg.stft)?;
            let instruction = EditInstruction {
                text: args.instruction.clone(),
                target_stem: args.stem.clone(),
                style_tags: Vec::new(),
            };
            let generated = sample_insert(&ck.model, &partial, &instruction, &schedule, &scfg)?;
            let mut out_wave = audio::griffin_lim(&generated, 32, args.seed)?;
            // Equal output duration: trim or pad to the input length.
            out_wave.samples.resize(wave.samples.len(), 0.0);
            write_bytes(&args.out.join("generated.wav"), &audio::save_wav(&out_wave))?;
            save_mel_tensor(&args.out.join("generated.stwd"), &generated)?;
            let (full, part, diff) = comparison_panels(&generated, &partial);
            render::save_triptych_png(&args.out.join("triptych.png"), &full, &part, &diff)
                .map_err(|e| io_err(&args.out, e))?;
            render::save_mel_png(&args.out.join("generated.png"), &generated)
                .map_err(|e| io_err(&args.out, e))?;
            println!("generated {} ({} samples)", args.out.display(), out_wave.samples.len());
        }
        "mid" | "midi" => {
            let target = instrument_named(&args.stem)?;
            let bytes = std::fs::read(&args.input).map_err(|e| io_err(&args.input, e))?;
            let doc = parse_midi(&bytes)?;
            let steps_per_bar = crate::pianoroll::DEFAULT_STEPS_PER_BAR;
            let (roll, _dropped) =
                to_pianoroll(&doc, steps_per_bar, dataset::DEFAULT_BARS_PER_CHUNK)?;
            let (out_roll, attempts) = binary_sample(
                &ck.model,
                &roll,
                target,
                &schedule,
                &SamplerConfig { mode: diffusion::SamplerMode::Binary, ..scfg },
                &RejectionConfig {
                    min_density: args.min_density,
                    max_density: args.max_density,
                    max_attempts: args.max_attempts,
                },
            )?;
            let out_doc = from_pianoroll(&out_roll, 120.0);
            write_bytes(&args.out.join("generated.mid"), &write_midi(&out_doc))?;
            render::save_roll_png(&args.out.join("roll.png"), &out_roll, Some(target))
                .map_err(|e| io_err(&args.out, e))?;
            println!("generated {} (attempts: {attempts})", args.out.display());
        }
        other => {
            return Err(CliError::Usage(format!(
                "unsupported input extension {other:?} (wav, mid)"
            )))
        }
    }
    Ok(())
}

pub fn cmd_baseline(args: &BaselineArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    cfg.echo_to(&args.out)?;
    let ck = load_model(&args.model)?;
    let schedule = DiffusionSchedule::new(ck.t_steps);
    let scfg = SamplerConfig { steps: args.steps, seed: args.seed, ..cfg.sampler.clone() };

    let bytes = std::fs::read(&args.input).map_err(|e| io_err(&args.input, e))?;
    let wave = audio::load_wav(&bytes)?;
    let wave = audio::resample(&wave, cfg.stft.sample_rate)?;
    let partial = audio::mel_spectrogram(&wave, &cfg.stft)?;
    // The baseline conditions on the 5-word truncated caption only.
    let instruction = EditInstruction {
        text: shorten_caption(&args.caption),
        target_stem: String::new(),
        style_tags: Vec::new(),
    };
    let generated =
        sample_sdedit(&ck.model, &partial, &instruction, args.strength, &schedule, &scfg)?;
    let mut out_wave = audio::griffin_lim(&generated, 32, args.seed)?;
    out_wave.samples.resize(wave.samples.len(), 0.0);
    write_bytes(&args.out.join("generated.wav"), &audio::save_wav(&out_wave))?;
    save_mel_tensor(&args.out.join("generated.stwd"), &generated)?;
    let report = serde_json::json!({
        "method": format!("sdedit-{}", args.steps),
        "steps": args.steps,
        "strength": args.strength,
        "caption": instruction.text,
        "config_hash": cfg.hash(),
    });
    write_bytes(
        &args.out.join("method.json"),
        serde_json::to_string_pretty(&report).unwrap().as_bytes(),
    )?;
    println!("baseline sdedit-{} written to {}", args.steps, args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate / render
// ---------------------------------------------------------------------------

fn mel_dir(path: &Path) -> Result<Vec<MelSpec>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| io_err(path, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("stwd"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!(
            "no .stwd tensor files in {}",
            path.display()
        )));
    }
    files.iter().map(|p| load_mel_tensor(p)).collect()
}

fn embedder_or_hint(path: &Path) -> Result<Embedder, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "embedder checkpoint {} not found; create one with `stemfill train --mode embedder`",
            path.display()
        )));
    }
    Ok(load_embedder(path)?)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let fd_emb = embedder_or_hint(&args.fd_embedder)?;
    let fad_emb = embedder_or_hint(&args.fad_embedder)?;
    let generated = mel_dir(&args.generated)?;
    let reference = mel_dir(&args.reference)?;
    if generated.len() != reference.len() {
        return Err(CliError::Usage(format!(
            "generated ({}) and reference ({}) sets must pair up",
            generated.len(),
            reference.len()
        )));
    }
    let report = metrics::evaluate(&generated, &reference, &fd_emb, &fad_emb, &cfg.hash())?;
    let json = serde_json::to_string_pretty(&report).unwrap();
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    write_bytes(&args.out, json.as_bytes())?;
    println!("{json}");
    Ok(())
}

pub fn cmd_render(args: &RenderArgs) -> Result<(), CliError> {
    let ext = args
        .input
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "stwd" => {
            let tf = tensorfile::read(&args.input)?;
            match tf.meta.get("kind").and_then(|v| v.as_str()) {
                Some("triplet") => {
                    let full = load_mel_tensor(&args.input)?;
                    let partial = MelSpec {
                        values: tf
                            .tensor("partial")?
                            .clone()
                            .into_dimensionality::<ndarray::Ix2>()
                            .map_err(|e| CliError::Usage(e.to_string()))?,
                        config: full.config.clone(),
                    };
                    let (f, p, d) = comparison_panels(&full, &partial);
                    render::save_triptych_png(&args.out, &f, &p, &d)
                        .map_err(|e| io_err(&args.out, e))?;
                }
                Some("mel") => {
                    let spec = load_mel_tensor(&args.input)?;
                    render::save_mel_png(&args.out, &spec).map_err(|e| io_err(&args.out, e))?;
                }
                Some("roll") => {
                    let data = tf
                        .tensor("roll")?
                        .mapv(|v| (v != 0.0) as u8)
                        .into_dimensionality::<ndarray::Ix3>()
                        .map_err(|e| CliError::Usage(e.to_string()))?;
                    let steps_per_bar = tf
                        .meta
                        .get("steps_per_bar")
                        .and_then(|v| v.as_u64())
                        .unwrap_or(16) as usize;
                    let pitch_base = tf
                        .meta
                        .get("pitch_base")
                        .and_then(|v| v.as_u64())
                        .unwrap_or(24) as u8;
                    let roll = PianoRoll { data, steps_per_bar, pitch_base };
                    let outline = match &args.outline {
                        Some(name) => Some(instrument_named(name)?),
                        None => None,
                    };
                    render::save_roll_png(&args.out, &roll, outline)
                        .map_err(|e| io_err(&args.out, e))?;
                }
                other => {
                    return Err(CliError::Usage(format!(
                        "cannot render tensor kind {other:?}"
                    )))
                }
            }
        }
        "mid" | "midi" => {
            let bytes = std::fs::read(&args.input).map_err(|e| io_err(&args.input, e))?;
            let doc = parse_midi(&bytes)?;
            let (roll, _) = to_pianoroll(
                &doc,
                crate::pianoroll::DEFAULT_STEPS_PER_BAR,
                dataset::DEFAULT_BARS_PER_CHUNK,
            )?;
            let outline = match &args.outline {
                Some(name) => Some(instrument_named(name)?),
                None => None,
            };
            render::save_roll_png(&args.out, &roll, outline).map_err(|e| io_err(&args.out, e))?;
        }
        other => {
            return Err(CliError::Usage(format!(
                "unsupported input extension {other:?} (stwd, mid)"
            )))
        }
    }
    println!("rendered {}", args.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(dir: &Path, sessions: usize) {
        cmd_make_corpus(&MakeCorpusArgs {
            out: dir.to_path_buf(),
            config: None,
            sessions: Some(sessions),
            seed: Some(7),
            styles: vec![],
            force: false,
        })
        .unwrap();
    }

    #[test]
    fn make_corpus_is_deterministic_and_guards_overwrites() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        corpus(&a, 3);
        corpus(&b, 3);
        let ma = std::fs::read(a.join("manifest.jsonl")).unwrap();
        let mb = std::fs::read(b.join("manifest.jsonl")).unwrap();
        assert_eq!(ma, mb, "same seed must produce identical manifests");
        // Non-empty dir without --force is refused.
        let err = cmd_make_corpus(&MakeCorpusArgs {
            out: a.clone(),
            config: None,
            sessions: Some(3),
            seed: Some(7),
            styles: vec![],
            force: false,
        });
        assert!(matches!(err, Err(CliError::Usage(_))));
        // Bogus style is rejected with the available list.
        let err = cmd_make_corpus(&MakeCorpusArgs {
            out: tmp.path().join("c"),
            config: None,
            sessions: Some(2),
            seed: Some(7),
            styles: vec!["polka".into()],
            force: false,
        })
        .unwrap_err();
        assert!(err.to_string().contains("rock"), "error should list styles: {err}");
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("cfg.json");
        std::fs::write(&p, r#"{"train": {"lr": 0.001}, "bogus": 1}"#).unwrap();
        assert!(matches!(RunConfig::load(Some(&p)), Err(CliError::Config(_))));
        std::fs::write(&p, r#"{"train": {"lr": 0.001}}"#).unwrap();
        let cfg = RunConfig::load(Some(&p)).unwrap();
        assert_eq!(cfg.train.lr, 0.001);
    }

    #[test]
    fn hyperparameter_defaults_match_reported_values() {
        // The training loop really runs on these defaults (criterion 8).
        let t = TrainConfig::default();
        assert_eq!(t.beta1, 0.9);
        assert_eq!(t.beta2, 0.999);
        assert_eq!(t.weight_decay, 0.02);
        assert_eq!(t.lr, 1e-4);
        assert_eq!(t.warmup, 500);
        assert_eq!(t.cond_dropout, 0.05);
        assert_eq!(t.batch, 4);
        let s = SamplerConfig::default();
        assert_eq!(s.steps, 20);
        assert_eq!(s.guidance_text, 1.0);
        assert_eq!(s.guidance_image, 1.0);
    }

    #[test]
    fn train_writes_config_log_and_checkpoint_and_resumes() {
        let tmp = tempfile::tempdir().unwrap();
        let corpus_dir = tmp.path().join("corpus");
        corpus(&corpus_dir, 3);
        let run = tmp.path().join("run");
        let mut cfgfile = tmp.path().join("cfg.json");
        std::fs::write(
            &cfgfile,
            r#"{"train": {"max_steps": 3, "batch": 2}, "model_size": "tiny"}"#,
        )
        .unwrap();
        let args = TrainArgs {
            corpus: corpus_dir.clone(),
            out: run.clone(),
            config: Some(cfgfile.clone()),
            mode: TrainMode::Spectrogram,
            target: "drums".into(),
            steps: None,
            seed: Some(1),
            model_size: None,
            save_every: 1000,
            resume: None,
        };
        cmd_train(&args).unwrap();
        assert!(run.join("effective_config.json").exists());
        let log = std::fs::read_to_string(run.join("losses.csv")).unwrap();
        let mut lines = log.lines();
        assert_eq!(lines.next(), Some("step,lr,loss"));
        assert_eq!(lines.count(), 3);
        assert!(run.join("checkpoint.stwd").exists());

        // Resume continues the lr schedule from the recorded step.
        cfgfile = tmp.path().join("cfg2.json");
        std::fs::write(
            &cfgfile,
            r#"{"train": {"max_steps": 5, "batch": 2}, "model_size": "tiny"}"#,
        )
        .unwrap();
        let run2 = tmp.path().join("run2");
        let args2 = TrainArgs {
            corpus: corpus_dir,
            out: run2.clone(),
            config: Some(cfgfile),
            resume: Some(run.join("checkpoint.stwd")),
            ..args
        };
        cmd_train(&args2).unwrap();
        let log2 = std::fs::read_to_string(run2.join("losses.csv")).unwrap();
        let first_line = log2.lines().nth(1).unwrap();
        assert!(first_line.starts_with("4,"), "resume starts at step 4: {first_line}");
        let ck = load_model(&run2.join("checkpoint.stwd")).unwrap();
        assert_eq!(ck.train_step, 5);
    }

    #[test]
    fn generate_and_render_on_midi_preserve_context() {
        let tmp = tempfile::tempdir().unwrap();
        let corpus_dir = tmp.path().join("corpus");
        corpus(&corpus_dir, 3);
        // Train a 2-step roll model just to have a checkpoint.
        let run = tmp.path().join("run");
        let cfgfile = tmp.path().join("cfg.json");
        std::fs::write(
            &cfgfile,
            r#"{"train": {"max_steps": 2, "batch": 2}, "model_size": "tiny", "sampler": {"steps": 3}}"#,
        )
        .unwrap();
        cmd_train(&TrainArgs {
            corpus: corpus_dir.clone(),
            out: run.clone(),
            config: Some(cfgfile.clone()),
            mode: TrainMode::Roll,
            target: "drums".into(),
            steps: None,
            seed: Some(1),
            model_size: None,
            save_every: 1000,
            resume: None,
        })
        .unwrap();
        // Write a context MIDI from the corpus generator.
        let sessions = generate_toy_corpus(7, 1, &["rock".into()], 8000).unwrap();
        let mut doc = sessions[0].midi.clone();
        doc.tracks.retain(|(i, _)| *i != Instrument::Drums);
        let midi_path = tmp.path().join("context.mid");
        std::fs::write(&midi_path, write_midi(&doc)).unwrap();

        let out = tmp.path().join("gen");
        cmd_generate(&GenerateArgs {
            model: run.join("checkpoint.stwd"),
            input: midi_path,
            stem: "drums".into(),
            instruction: "Add rock-style drums".into(),
            steps: 3,
            seed: 0,
            out: out.clone(),
            config: Some(cfgfile),
            min_density: 0.0,
            max_density: 1.0,
            max_attempts: 4,
        })
        .unwrap();
        assert!(out.join("roll.png").exists());
        // Context tracks preserved: bass/guitar notes identical to input.
        let out_doc = parse_midi(&std::fs::read(out.join("generated.mid")).unwrap()).unwrap();
        for inst in [Instrument::Bass, Instrument::Guitar] {
            let (a_roll, _) = to_pianoroll(&doc, 16, 8).unwrap();
            let (b_roll, _) = to_pianoroll(&out_doc, 16, 8).unwrap();
            assert_eq!(
                a_roll.data.index_axis(ndarray::Axis(0), inst.channel()),
                b_roll
                    .data
                    .index_axis(ndarray::Axis(0), inst.channel())
                    .slice(ndarray::s![..a_roll.steps(), ..]),
                "context {inst:?} must survive the round trip"
            );
        }
    }

    #[test]
    fn evaluate_self_is_zero_and_missing_embedder_is_actionable() {
        let tmp = tempfile::tempdir().unwrap();
        let corpus_dir = tmp.path().join("corpus");
        corpus(&corpus_dir, 6);
        // Embedders.
        let emb_dir = tmp.path().join("emb");
        let cfgfile = tmp.path().join("cfg.json");
        std::fs::write(&cfgfile, r#"{"embedder": {"epochs": 2, "widths": [4, 8, 8]}}"#).unwrap();
        cmd_train(&TrainArgs {
            corpus: corpus_dir.clone(),
            out: emb_dir.clone(),
            config: Some(cfgfile),
            mode: TrainMode::Embedder,
            target: "drums".into(),
            steps: None,
            seed: None,
            model_size: None,
            save_every: 1000,
            resume: None,
        })
        .unwrap();
        // A directory of mel tensors taken from the corpus.
        let mel_a = tmp.path().join("set_a");
        std::fs::create_dir_all(&mel_a).unwrap();
        let (triplets, _) = read_manifest(&corpus_dir).unwrap();
        for (i, (t, _)) in triplets.iter().take(4).enumerate() {
            save_mel_tensor(&mel_a.join(format!("{i:03}.stwd")), &t.full).unwrap();
        }
        let report_path = tmp.path().join("report.json");
        cmd_evaluate(&EvaluateArgs {
            generated: mel_a.clone(),
            reference: mel_a.clone(),
            fd_embedder: emb_dir.join("fd_embedder.stwd"),
            fad_embedder: emb_dir.join("fad_embedder.stwd"),
            out: report_path.clone(),
            config: None,
        })
        .unwrap();
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
        assert!(report["fd"].as_f64().unwrap() < 1e-6);
        assert!(report["kld"].as_f64().unwrap() < 1e-6);
        assert!(report["fad"].as_f64().unwrap() < 1e-6);
        assert!(report["isc"].as_f64().unwrap() >= 1.0 - 1e-9);
        // Missing embedder checkpoint: actionable message.
        let err = cmd_evaluate(&EvaluateArgs {
            generated: mel_a.clone(),
            reference: mel_a,
            fd_embedder: tmp.path().join("missing.stwd"),
            fad_embedder: emb_dir.join("fad_embedder.stwd"),
            out: report_path,
            config: None,
        })
        .unwrap_err();
        assert!(err.to_string().contains("train --mode embedder"), "{err}");
    }
}
