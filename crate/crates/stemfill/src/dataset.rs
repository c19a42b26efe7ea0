//! Corpus construction: audio-audio-text triplets, piano-roll chunks, the
//! procedural toy corpus, and the on-disk manifest.
//!
//! A [`StemSession`] holds aligned per-instrument waveforms. Subtracting one
//! stem yields the training pair: `full` is the mix of all stems, `partial`
//! the mix without the target, both sharing one peak-clamp gain so they stay
//! sample-comparable, chunked to 5 s and converted to mel spectrograms. The
//! symbolic path slices a [`MidiDocument`](crate::pianoroll::MidiDocument)
//! into fixed-bar [`RollChunk`]s. Both kinds persist through a JSON-lines
//! manifest plus one tensor file per record.
//!
//! The toy corpus synthesizes four styles (rock, jazz, reggae, edm) with
//! style-specific drum/bass/guitar patterns. Every onset sits on the
//! 8th-note grid and the bass plays every 8th note, so ground-truth
//! onset alignment between any stem and its context is exactly 1.0 —
//! the reference point for the alignment metric. Stem samples are
//! quantized to 1/4096 so that sums and differences of stems are exact
//! in f32 arithmetic and the subtraction identity holds bit-for-bit.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioError, MelSpec, StftConfig, Waveform};
use crate::instruct::{self, EditInstruction};
use crate::pianoroll::{
    Instrument, MidiDocument, NoteEvent, PianoRoll, WRITE_TPQ, note_density, to_pianoroll,
};
use crate::tensorfile::{self, TensorFileError};

/// Chunk length for spectrogram triplets, seconds.
pub const CHUNK_SECONDS: f64 = 5.0;
/// Bars per symbolic chunk.
pub const DEFAULT_BARS_PER_CHUNK: usize = 8;
/// Minimum target-channel density for a roll chunk to be kept.
pub const MIN_ROLL_DENSITY: f64 = 0.002;
/// Stem samples are multiples of this, making stem sums exact in f32.
pub const AMPLITUDE_QUANTUM: f32 = 1.0 / 4096.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("session {session}: stem {stem:?} not found")]
    MissingStem { session: String, stem: String },
    #[error("session {session}: {reason}")]
    SessionInvalid { session: String, reason: String },
    #[error("unknown style {0:?}")]
    UnknownStyle(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Tensor(#[from] TensorFileError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest line {line}: {reason}")]
    ManifestLine { line: usize, reason: String },
    #[error("manifest references missing file {path} (line {line})")]
    MissingFile { path: PathBuf, line: usize },
    #[error("session {0} appears in both train and test splits")]
    SplitViolation(String),
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Aligned multi-stem recording session.
#[derive(Debug, Clone, PartialEq)]
pub struct StemSession {
    pub session_id: String,
    /// Instrument name → waveform; all equal length and sample rate.
    pub stems: BTreeMap<String, Waveform>,
    /// Genre / mood / tempo-class tags.
    pub tags: Vec<String>,
    /// Class id for supervised metric embedders (toy corpus).
    pub label: Option<u32>,
}

impl StemSession {
    /// Check the session invariants: at least two stems, all aligned.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let invalid = |reason: String| DatasetError::SessionInvalid {
            session: self.session_id.clone(),
            reason,
        };
        if self.stems.len() < 2 {
            return Err(invalid(format!("{} stems, need at least 2", self.stems.len())));
        }
        let first = self.stems.values().next().unwrap();
        for (name, w) in &self.stems {
            if w.samples.len() != first.samples.len() || w.sample_rate != first.sample_rate {
                return Err(invalid(format!("stem {name:?} not aligned with the others")));
            }
        }
        Ok(())
    }
}

/// One training example for the spectrogram model.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    /// Full-mix spectrogram, x.
    pub full: MelSpec,
    /// Stem-subtracted spectrogram, x_partial.
    pub partial: MelSpec,
    /// Edit instruction, y.
    pub instruction: EditInstruction,
    pub subtracted_stem_name: String,
    pub session_id: String,
    pub chunk_index: usize,
}

/// One training example for the binary roll models.
#[derive(Debug, Clone, PartialEq)]
pub struct RollChunk {
    pub roll: PianoRoll,
    pub target_instrument: Instrument,
    pub tags: Vec<String>,
}

/// A roll chunk plus its manifest bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct RollEntry {
    pub chunk: RollChunk,
    pub session_id: String,
    pub chunk_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One JSON line of the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// "triplet" or "roll".
    pub kind: String,
    /// Tensor files backing this record, relative to the manifest root.
    pub paths: Vec<String>,
    pub instruction: String,
    pub tags: Vec<String>,
    pub split: Split,
    pub session_id: String,
    pub chunk_index: usize,
}

// ---------------------------------------------------------------------------
// Triplet construction
// ---------------------------------------------------------------------------

/// Build the audio-audio-text triplets for one session and target stem.
///
/// `full` mixes every stem; `partial` mixes everything except the target,
/// scaled by the same gain. Both waveforms are cut into aligned 5 s chunks
/// (a tail of at least half a chunk is kept, zero-padded), silent chunk
/// pairs are dropped, and each survivor becomes a mel-spectrogram pair with
/// a deterministic template instruction.
pub fn build_triplets(
    session: &StemSession,
    target_stem: &str,
    cfg: &StftConfig,
) -> Result<Vec<Triplet>, DatasetError> {
    session.validate()?;
    if !session.stems.contains_key(target_stem) {
        return Err(DatasetError::MissingStem {
            session: session.session_id.clone(),
            stem: target_stem.to_string(),
        });
    }
    let all: Vec<&Waveform> = session.stems.values().collect();
    let rest: Vec<&Waveform> = session
        .stems
        .iter()
        .filter(|(name, _)| name.as_str() != target_stem)
        .map(|(_, w)| w)
        .collect();
    let full_mix = audio::mix(&all)?;
    let partial_wave = audio::mix_with_gain(&rest, full_mix.gain)?;

    let full_chunks = audio::chunk(&full_mix.waveform, CHUNK_SECONDS)?;
    let partial_chunks = audio::chunk(&partial_wave, CHUNK_SECONDS)?;
    let mut out = Vec::new();
    for (chunk_index, (fc, pc)) in full_chunks.iter().zip(&partial_chunks).enumerate() {
        if fc.samples.iter().all(|&v| v == 0.0) && pc.samples.iter().all(|&v| v == 0.0) {
            continue;
        }
        let seed = instruct::stable_hash(&format!("{}#{}", session.session_id, chunk_index));
        let instruction = instruct::template_instruction(target_stem, &session.tags, seed);
        out.push(Triplet {
            full: audio::mel_spectrogram(fc, cfg)?,
            partial: audio::mel_spectrogram(pc, cfg)?,
            instruction,
            subtracted_stem_name: target_stem.to_string(),
            session_id: session.session_id.clone(),
            chunk_index,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Roll chunk construction
// ---------------------------------------------------------------------------

/// Rasterize a document and slice it into `bars_per_chunk`-bar chunks,
/// dropping chunks whose target channel is (almost) empty.
pub fn build_roll_chunks(
    doc: &MidiDocument,
    target: Instrument,
    bars_per_chunk: usize,
    tags: &[String],
) -> Result<Vec<RollChunk>, DatasetError> {
    let steps_per_bar = crate::pianoroll::DEFAULT_STEPS_PER_BAR;
    // grid length covering the last note, rounded up to whole chunks
    let last_tick = doc
        .tracks
        .iter()
        .flat_map(|(_, notes)| notes.iter().map(|n| n.onset + n.duration))
        .max()
        .unwrap_or(0);
    let ticks_per_bar = 4 * doc.ticks_per_quarter as u64;
    let bars = (last_tick.div_ceil(ticks_per_bar).max(1) as usize).div_ceil(bars_per_chunk)
        * bars_per_chunk;
    let (roll, _) = to_pianoroll(doc, steps_per_bar, bars)
        .map_err(|e| DatasetError::ManifestLine { line: 0, reason: e.to_string() })?;
    let steps_per_chunk = bars_per_chunk * steps_per_bar;
    let mut out = Vec::new();
    for c in 0..bars / bars_per_chunk {
        let lo = c * steps_per_chunk;
        let data = roll
            .data
            .slice(ndarray::s![.., lo..lo + steps_per_chunk, ..])
            .to_owned();
        let chunk = PianoRoll {
            data,
            steps_per_bar,
            pitch_base: roll.pitch_base,
        };
        if note_density(&chunk, target) < MIN_ROLL_DENSITY {
            continue;
        }
        out.push(RollChunk {
            roll: chunk,
            target_instrument: target,
            tags: tags.to_vec(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Toy corpus
// ---------------------------------------------------------------------------

/// One generated session: rendered stems plus the source MIDI.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySession {
    pub session: StemSession,
    pub midi: MidiDocument,
    pub style: String,
}

pub const TOY_STYLES: [&str; 4] = ["rock", "jazz", "reggae", "edm"];
/// Bars per toy session (8 bars at 120 bpm = 16 s).
pub const TOY_BARS: usize = 8;
const STEPS_PER_BAR: usize = 16;
const TOY_BPM: f64 = 120.0;

struct StylePattern {
    /// (step-in-bar, GM key, steps of duration); all steps even (8th grid).
    drums: &'static [(usize, u8, usize)],
    /// Bass pitch per 8th note (8 per bar), cycled across bars.
    bass: &'static [u8],
    /// Chord pitches and the bar-steps where the chord hits, with duration.
    chord: &'static [u8],
    chord_hits: &'static [(usize, usize)],
    mood: &'static str,
}

fn style_pattern(style: &str) -> Option<StylePattern> {
    // GM keys: 36 kick, 38 snare, 42 closed hat, 49 crash, 51 ride
    match style {
        "rock" => Some(StylePattern {
            drums: &[
                (0, 36, 2), (8, 36, 2),
                (4, 38, 2), (12, 38, 2),
                (0, 42, 1), (2, 42, 1), (4, 42, 1), (6, 42, 1),
                (8, 42, 1), (10, 42, 1), (12, 42, 1), (14, 42, 1),
            ],
            bass: &[40, 40, 43, 45, 40, 40, 47, 45],
            chord: &[52, 55, 59],
            chord_hits: &[(0, 8), (8, 8)],
            mood: "driving",
        }),
        "jazz" => Some(StylePattern {
            drums: &[
                (0, 36, 2), (10, 36, 2),
                (4, 38, 2), (12, 38, 2),
                (0, 51, 1), (2, 51, 1), (4, 51, 1), (6, 51, 1),
                (8, 51, 1), (10, 51, 1), (12, 51, 1), (14, 51, 1),
            ],
            bass: &[38, 41, 45, 48, 46, 43, 41, 39],
            chord: &[50, 53, 57, 60],
            chord_hits: &[(0, 8), (8, 8)],
            mood: "smooth",
        }),
        "reggae" => Some(StylePattern {
            drums: &[
                (8, 36, 2), (8, 38, 2),
                (0, 42, 1), (2, 42, 1), (4, 42, 1), (6, 42, 1),
                (8, 42, 1), (10, 42, 1), (12, 42, 1), (14, 42, 1),
            ],
            bass: &[36, 43, 36, 43, 36, 43, 39, 43],
            chord: &[55, 58, 62],
            chord_hits: &[(4, 2), (12, 2)],
            mood: "laidback",
        }),
        "edm" => Some(StylePattern {
            drums: &[
                (0, 36, 2), (4, 36, 2), (8, 36, 2), (12, 36, 2),
                (4, 38, 1), (12, 38, 1),
                (2, 42, 1), (6, 42, 1), (10, 42, 1), (14, 42, 1),
            ],
            bass: &[36, 36, 36, 36, 36, 36, 36, 43],
            chord: &[48, 55, 60, 64],
            chord_hits: &[(0, 16)],
            mood: "pulsing",
        }),
        _ => None,
    }
}

/// MIDI document for one toy session: 8 bars of the style's patterns, one
/// track per instrument, 480 tpq at 120 bpm.
fn style_midi(pattern: &StylePattern) -> MidiDocument {
    let tps = 4 * WRITE_TPQ as u64 / STEPS_PER_BAR as u64;
    let mut doc = MidiDocument::empty(WRITE_TPQ);
    let mut drums = Vec::new();
    let mut bass = Vec::new();
    let mut guitar = Vec::new();
    for bar in 0..TOY_BARS {
        let bar_step = (bar * STEPS_PER_BAR) as u64;
        for &(step, key, dur) in pattern.drums {
            drums.push(NoteEvent {
                instrument: Instrument::Drums,
                pitch: key,
                onset: (bar_step + step as u64) * tps,
                duration: dur as u64 * tps,
                velocity: 100,
            });
        }
        for eighth in 0..8 {
            let pitch = pattern.bass[(bar * 8 + eighth) % pattern.bass.len()];
            bass.push(NoteEvent {
                instrument: Instrument::Bass,
                pitch,
                onset: (bar_step + eighth as u64 * 2) * tps,
                duration: 2 * tps,
                velocity: 96,
            });
        }
        for &(step, dur) in pattern.chord_hits {
            for &pitch in pattern.chord {
                guitar.push(NoteEvent {
                    instrument: Instrument::Guitar,
                    pitch,
                    onset: (bar_step + step as u64) * tps,
                    duration: dur as u64 * tps,
                    velocity: 88,
                });
            }
        }
    }
    doc.tracks = vec![
        (Instrument::Drums, drums),
        (Instrument::Bass, bass),
        (Instrument::Guitar, guitar),
    ];
    doc
}

fn midi_hz(pitch: u8) -> f64 {
    440.0 * 2f64.powf((pitch as f64 - 69.0) / 12.0)
}

/// Round every sample to a multiple of [`AMPLITUDE_QUANTUM`] so stem sums
/// stay exact in f32.
fn quantize(samples: &mut [f32]) {
    for v in samples.iter_mut() {
        *v = (*v / AMPLITUDE_QUANTUM).round() * AMPLITUDE_QUANTUM;
    }
}

/// Render one instrument track of a toy MIDI document to audio.
fn render_track(
    notes: &[NoteEvent],
    instrument: Instrument,
    sample_rate: u32,
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Waveform {
    let sr = sample_rate as f64;
    let sec_per_tick = 60.0 / TOY_BPM / WRITE_TPQ as f64;
    let mut out = vec![0.0f32; len];
    for n in notes {
        let start = (n.onset as f64 * sec_per_tick * sr).round() as usize;
        let dur_s = n.duration as f64 * sec_per_tick;
        match instrument {
            Instrument::Drums => {
                // noise-burst percussion with a per-key character
                let (amp, decay, tone_hz) = match n.pitch {
                    36 => (0.8, 18.0, Some(55.0)),  // kick: thump + short noise
                    38 => (0.5, 22.0, None),        // snare: noise burst
                    51 => (0.3, 30.0, None),        // ride: lighter burst
                    _ => (0.25, 60.0, None),        // hats: very short
                };
                let n_samp = ((4.0 / decay) * sr) as usize;
                for i in 0..n_samp.min(len.saturating_sub(start)) {
                    let t = i as f64 / sr;
                    let env = (-decay * t).exp();
                    let noise: f64 = rng.gen_range(-1.0..1.0);
                    let tone = match tone_hz {
                        Some(f) => (2.0 * std::f64::consts::PI * f * t).sin(),
                        None => 0.0,
                    };
                    out[start + i] += (amp * env * (0.4 * noise + 0.8 * tone)) as f32;
                }
            }
            Instrument::Bass => {
                let f = midi_hz(n.pitch);
                let n_samp = (dur_s * sr) as usize;
                for i in 0..n_samp.min(len.saturating_sub(start)) {
                    let t = i as f64 / sr;
                    let phase = (f * t).fract();
                    let square = if phase < 0.5 { 1.0 } else { -1.0 };
                    // short attack/release ramps to avoid clicks
                    let env = (i as f64 / (0.01 * sr)).min(1.0)
                        * ((n_samp - i) as f64 / (0.02 * sr)).min(1.0);
                    out[start + i] += (0.35 * env * square) as f32;
                }
            }
            Instrument::Guitar => {
                let f = midi_hz(n.pitch);
                let n_samp = (dur_s * sr) as usize;
                let nyquist = 0.4 * sr;
                let harmonics = ((nyquist / f) as usize).clamp(1, 12);
                for i in 0..n_samp.min(len.saturating_sub(start)) {
                    let t = i as f64 / sr;
                    let mut s = 0.0;
                    for k in 1..=harmonics {
                        s += (2.0 * std::f64::consts::PI * f * k as f64 * t).sin() / k as f64;
                    }
                    let env = (i as f64 / (0.02 * sr)).min(1.0)
                        * ((n_samp - i) as f64 / (0.05 * sr)).min(1.0);
                    out[start + i] += (0.12 * env * s) as f32;
                }
            }
        }
    }
    quantize(&mut out);
    Waveform::new(out, sample_rate)
}

/// Generate `n_sessions` deterministic toy sessions cycling through
/// `style_set`, each with rendered drum/bass/guitar stems, the source MIDI,
/// style tags, and a class label (the style's index in [`TOY_STYLES`]).
pub fn generate_toy_corpus(
    seed: u64,
    n_sessions: usize,
    style_set: &[String],
    sample_rate: u32,
) -> Result<Vec<ToySession>, DatasetError> {
    for s in style_set {
        if !TOY_STYLES.contains(&s.as_str()) {
            return Err(DatasetError::UnknownStyle(s.clone()));
        }
    }
    let styles = if style_set.is_empty() {
        TOY_STYLES.iter().map(|s| s.to_string()).collect::<Vec<_>>()
    } else {
        style_set.to_vec()
    };
    let seconds = TOY_BARS as f64 * STEPS_PER_BAR as f64 * (60.0 / TOY_BPM / 4.0);
    let len = (seconds * sample_rate as f64).round() as usize;
    let mut out = Vec::with_capacity(n_sessions);
    for i in 0..n_sessions {
        let style = &styles[i % styles.len()];
        let pattern = style_pattern(style).expect("style checked above");
        let midi = style_midi(&pattern);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let mut stems = BTreeMap::new();
        for (instrument, notes) in &midi.tracks {
            stems.insert(
                instrument.name().to_string(),
                render_track(notes, *instrument, sample_rate, len, &mut rng),
            );
        }
        let label = TOY_STYLES.iter().position(|s| s == style).unwrap() as u32;
        out.push(ToySession {
            session: StemSession {
                session_id: format!("toy-{seed}-{i:04}"),
                stems,
                tags: vec![style.clone(), pattern.mood.to_string(), "mid-tempo".to_string()],
                label: Some(label),
            },
            midi,
            style: style.clone(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

const MANIFEST_FILE: &str = "manifest.jsonl";

fn spec_to_tensor(spec: &MelSpec) -> ndarray::ArrayD<f32> {
    spec.values.clone().into_dyn()
}

/// Serialize triplets and roll entries under `root` and write the JSON-lines
/// manifest. Returns the records in write order.
pub fn write_manifest(
    root: &Path,
    triplets: &[(Triplet, Split)],
    rolls: &[(RollEntry, Split)],
) -> Result<Vec<ManifestRecord>, DatasetError> {
    let tensor_dir = root.join("tensors");
    std::fs::create_dir_all(&tensor_dir).map_err(|e| io_err(&tensor_dir, e))?;
    let mut records = Vec::new();

    for (t, split) in triplets {
        let rel = format!("tensors/triplet_{}_{}.stwd", t.session_id, t.chunk_index);
        let meta = serde_json::json!({
            "kind": "triplet",
            "stft": t.full.config,
            "stem": t.subtracted_stem_name,
        });
        tensorfile::write(
            &root.join(&rel),
            &meta,
            &[
                ("full".to_string(), spec_to_tensor(&t.full)),
                ("partial".to_string(), spec_to_tensor(&t.partial)),
            ],
        )?;
        records.push(ManifestRecord {
            kind: "triplet".into(),
            paths: vec![rel],
            instruction: t.instruction.text.clone(),
            tags: t.instruction.style_tags.clone(),
            split: *split,
            session_id: t.session_id.clone(),
            chunk_index: t.chunk_index,
        });
    }

    for (e, split) in rolls {
        let rel = format!("tensors/roll_{}_{}.stwd", e.session_id, e.chunk_index);
        let roll = &e.chunk.roll;
        let meta = serde_json::json!({
            "kind": "roll",
            "steps_per_bar": roll.steps_per_bar,
            "pitch_base": roll.pitch_base,
            "target": e.chunk.target_instrument.name(),
        });
        let data = roll.data.mapv(|v| v as f32).into_dyn();
        tensorfile::write(&root.join(&rel), &meta, &[("roll".to_string(), data)])?;
        records.push(ManifestRecord {
            kind: "roll".into(),
            paths: vec![rel],
            instruction: String::new(),
            tags: e.chunk.tags.clone(),
            split: *split,
            session_id: e.session_id.clone(),
            chunk_index: e.chunk_index,
        });
    }

    let path = root.join(MANIFEST_FILE);
    let mut f = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    for r in &records {
        let line = serde_json::to_string(r)
            .map_err(|e| DatasetError::ManifestLine { line: 0, reason: e.to_string() })?;
        writeln!(f, "{line}").map_err(|e| io_err(&path, e))?;
    }
    Ok(records)
}

/// Load a manifest written by [`write_manifest`]: parses records (reporting
/// line numbers on malformed lines), checks referenced files exist and that
/// no session sits in both splits, and rebuilds the items.
pub fn read_manifest(
    root: &Path,
) -> Result<(Vec<(Triplet, Split)>, Vec<(RollEntry, Split)>), DatasetError> {
    let path = root.join(MANIFEST_FILE);
    let f = std::fs::File::open(&path).map_err(|e| io_err(&path, e))?;
    let mut triplets = Vec::new();
    let mut rolls = Vec::new();
    let mut split_of: BTreeMap<String, Split> = BTreeMap::new();

    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| io_err(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::ManifestLine {
                line: line_no,
                reason: e.to_string(),
            })?;
        match split_of.entry(rec.session_id.clone()) {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(rec.split);
            }
            std::collections::btree_map::Entry::Occupied(o) => {
                if *o.get() != rec.split {
                    return Err(DatasetError::SplitViolation(rec.session_id.clone()));
                }
            }
        }
        for rel in &rec.paths {
            let p = root.join(rel);
            if !p.exists() {
                return Err(DatasetError::MissingFile { path: p, line: line_no });
            }
        }
        let tensor_path = root.join(&rec.paths[0]);
        let tf = tensorfile::read(&tensor_path)?;
        let meta = &tf.meta;
        let bad = |reason: String| DatasetError::ManifestLine { line: line_no, reason };

        match rec.kind.as_str() {
            "triplet" => {
                let config: StftConfig = serde_json::from_value(meta["stft"].clone())
                    .map_err(|e| bad(format!("bad stft config: {e}")))?;
                let stem = meta["stem"].as_str().unwrap_or("").to_string();
                let get = |name: &str| -> Result<MelSpec, DatasetError> {
                    let t = tf.tensor(name)?;
                    let values = t
                        .clone()
                        .into_dimensionality::<ndarray::Ix2>()
                        .map_err(|e| bad(e.to_string()))?;
                    Ok(MelSpec {
                        values,
                        config: config.clone(),
                    })
                };
                triplets.push((
                    Triplet {
                        full: get("full")?,
                        partial: get("partial")?,
                        instruction: EditInstruction {
                            text: rec.instruction.clone(),
                            target_stem: stem.clone(),
                            style_tags: rec.tags.clone(),
                        },
                        subtracted_stem_name: stem,
                        session_id: rec.session_id.clone(),
                        chunk_index: rec.chunk_index,
                    },
                    rec.split,
                ));
            }
            "roll" => {
                let t = tf.tensor("roll")?;
                let data: Array3<u8> = t
                    .mapv(|v| (v != 0.0) as u8)
                    .into_dimensionality::<ndarray::Ix3>()
                    .map_err(|e| bad(e.to_string()))?;
                let target = Instrument::from_name(meta["target"].as_str().unwrap_or(""))
                    .ok_or_else(|| bad("bad target instrument".into()))?;
                rolls.push((
                    RollEntry {
                        chunk: RollChunk {
                            roll: PianoRoll {
                                data,
                                steps_per_bar: meta["steps_per_bar"].as_u64().unwrap_or(16)
                                    as usize,
                                pitch_base: meta["pitch_base"].as_u64().unwrap_or(24) as u8,
                            },
                            target_instrument: target,
                            tags: rec.tags.clone(),
                        },
                        session_id: rec.session_id.clone(),
                        chunk_index: rec.chunk_index,
                    },
                    rec.split,
                ));
            }
            other => return Err(bad(format!("unknown record kind {other:?}"))),
        }
    }
    Ok((triplets, rolls))
}
