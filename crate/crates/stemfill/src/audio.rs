//! Waveform I/O and spectral analysis: WAV read/write, resampling,
//! chunking, mel spectrograms, and Griffin-Lim inversion.

use ndarray::{Array1, Array2, ArrayView1, s};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("not a RIFF/WAVE file")]
    NotWave,
    #[error("truncated WAV file at byte {0}")]
    Truncated(usize),
    #[error("unsupported WAV codec: {0}")]
    UnsupportedCodec(String),
    #[error("unsupported bit depth {0}")]
    UnsupportedBits(u16),
    #[error("waveform shorter than one FFT frame ({len} < {n_fft})")]
    TooShort { len: usize, n_fft: usize },
    #[error("stem length/rate mismatch: {0}")]
    StemMismatch(String),
    #[error("empty stem list")]
    EmptyMix,
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

/// Mono waveform with samples clamped to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn silence(seconds: f64, sample_rate: u32) -> Self {
        Waveform::new(
            vec![0.0; (seconds * sample_rate as f64).round() as usize],
            sample_rate,
        )
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |a, &s| a.max(s.abs()))
    }
}

/// STFT / mel analysis parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f32,
    /// None = Nyquist.
    pub f_max: Option<f32>,
    pub target_frames: usize,
    pub dynamic_range_db: f32,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            sample_rate: 22050,
            n_fft: 1024,
            hop: 512,
            n_mels: 64,
            f_min: 0.0,
            f_max: None,
            target_frames: 256,
            dynamic_range_db: 80.0,
        }
    }
}

impl StftConfig {
    /// Preset mirroring a 512x512 spectrogram front end.
    pub fn riffusion512() -> Self {
        StftConfig {
            sample_rate: 44100,
            n_fft: 2048,
            hop: 431,
            n_mels: 512,
            target_frames: 512,
            ..Default::default()
        }
    }

    /// Small preset for fast tests and desk-scale training runs.
    pub fn small() -> Self {
        StftConfig {
            sample_rate: 8000,
            n_fft: 256,
            hop: 128,
            n_mels: 32,
            target_frames: 64,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), AudioError> {
        if !self.n_fft.is_power_of_two() {
            return Err(AudioError::InvalidArg(format!(
                "n_fft {} is not a power of two",
                self.n_fft
            )));
        }
        if self.hop > self.n_fft {
            return Err(AudioError::InvalidArg("hop > n_fft".into()));
        }
        if self.n_mels < 8 {
            return Err(AudioError::InvalidArg("n_mels < 8".into()));
        }
        Ok(())
    }

    pub fn f_max_hz(&self) -> f32 {
        self.f_max.unwrap_or(self.sample_rate as f32 / 2.0)
    }
}

/// Normalized log-mel magnitude matrix, values in [0, 1],
/// shape [n_mels, target_frames].
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    pub values: Array2<f32>,
    pub config: StftConfig,
}

// ---------------------------------------------------------------------------
// WAV I/O
// ---------------------------------------------------------------------------

fn codec_name(tag: u16) -> String {
    match tag {
        0x0002 => "ADPCM".into(),
        0x0006 => "A-law".into(),
        0x0007 => "mu-law".into(),
        0x0011 => "IMA ADPCM".into(),
        0x0055 => "MP3".into(),
        other => format!("format tag 0x{other:04x}"),
    }
}

/// Parse a RIFF/WAVE byte stream: PCM16 or float32, mono or stereo
/// (stereo averaged down), samples peak-clamped to [-1, 1].
pub fn load_wav(bytes: &[u8]) -> Result<Waveform, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::NotWave);
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // tag, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(AudioError::Truncated(pos));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::Truncated(pos));
                }
                let tag = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_start + size + (size & 1);
    }
    let (tag, channels, rate, bits) = fmt.ok_or(AudioError::NotWave)?;
    let data = data.ok_or(AudioError::NotWave)?;
    if tag != 1 && tag != 3 {
        return Err(AudioError::UnsupportedCodec(codec_name(tag)));
    }
    let channels = channels.max(1) as usize;
    let raw: Vec<f32> = match (tag, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        (_, b) => return Err(AudioError::UnsupportedBits(b)),
    };
    let mut mono: Vec<f32> = raw
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    for s in &mut mono {
        *s = s.clamp(-1.0, 1.0);
    }
    Ok(Waveform::new(mono, rate))
}

/// Serialize as 16-bit PCM mono RIFF/WAVE.
pub fn save_wav(w: &Waveform) -> Vec<u8> {
    let n = w.samples.len();
    let data_len = n * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

// ---------------------------------------------------------------------------
// Resampling (windowed sinc)
// ---------------------------------------------------------------------------

/// Windowed-sinc resampling; preserves duration within one sample.
pub fn resample(w: &Waveform, rate: u32) -> Result<Waveform, AudioError> {
    if rate == 0 {
        return Err(AudioError::InvalidArg("rate must be > 0".into()));
    }
    if rate == w.sample_rate {
        return Ok(w.clone());
    }
    let ratio = rate as f64 / w.sample_rate as f64;
    let out_len = (w.samples.len() as f64 * ratio).round() as usize;
    let cutoff = ratio.min(1.0); // relative to input Nyquist
    let taps = 32i64;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let center = i as f64 / ratio;
        let base = center.floor() as i64;
        let mut acc = 0.0f64;
        for k in (base - taps)..=(base + taps) {
            if k < 0 || k as usize >= w.samples.len() {
                continue;
            }
            let dx = center - k as f64;
            let sinc_arg = std::f64::consts::PI * dx * cutoff;
            let sinc = if sinc_arg.abs() < 1e-12 {
                1.0
            } else {
                sinc_arg.sin() / sinc_arg
            };
            // Hann window over the tap span
            let win = 0.5 * (1.0 + (std::f64::consts::PI * dx / (taps as f64 + 1.0)).cos());
            acc += w.samples[k as usize] as f64 * sinc * cutoff * win;
        }
        out.push(acc.clamp(-1.0, 1.0) as f32);
    }
    Ok(Waveform::new(out, rate))
}

// ---------------------------------------------------------------------------
// Chunking
// ---------------------------------------------------------------------------

/// Split into non-overlapping fixed-length chunks. A final partial chunk is
/// zero-padded when at least half full, otherwise dropped.
pub fn chunk(w: &Waveform, seconds: f64) -> Result<Vec<Waveform>, AudioError> {
    if seconds <= 0.0 {
        return Err(AudioError::InvalidArg("chunk seconds must be > 0".into()));
    }
    let n = (seconds * w.sample_rate as f64).round() as usize;
    if n == 0 {
        return Err(AudioError::InvalidArg("chunk shorter than one sample".into()));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + n <= w.samples.len() {
        out.push(Waveform::new(
            w.samples[start..start + n].to_vec(),
            w.sample_rate,
        ));
        start += n;
    }
    let rem = w.samples.len() - start;
    if rem * 2 >= n {
        let mut tail = w.samples[start..].to_vec();
        tail.resize(n, 0.0);
        out.push(Waveform::new(tail, w.sample_rate));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// STFT / mel
// ---------------------------------------------------------------------------

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Magnitude STFT: frames start at multiples of `hop`, no centering.
/// Shape [n_fft/2 + 1, frames].
pub fn stft_magnitude(w: &Waveform, cfg: &StftConfig) -> Result<Array2<f32>, AudioError> {
    cfg.validate()?;
    let n = cfg.n_fft;
    if w.samples.len() < n {
        return Err(AudioError::TooShort {
            len: w.samples.len(),
            n_fft: n,
        });
    }
    let frames = (w.samples.len() - n) / cfg.hop + 1;
    let win = hann(n);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let bins = n / 2 + 1;
    let mut out = Array2::zeros((bins, frames));
    let mut buf: Vec<Complex<f64>> = vec![Complex::default(); n];
    for f in 0..frames {
        let start = f * cfg.hop;
        for i in 0..n {
            buf[i] = Complex::new(w.samples[start + i] as f64 * win[i], 0.0);
        }
        fft.process(&mut buf);
        for b in 0..bins {
            out[(b, f)] = buf[b].norm() as f32;
        }
    }
    Ok(out)
}

pub fn hz_to_mel(f: f32) -> f32 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f32) -> f32 {
    700.0 * (10f32.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale mel filterbank, each filter normalized to unit
/// weight sum. Shape [n_mels, n_fft/2 + 1].
pub fn mel_filterbank(cfg: &StftConfig) -> Array2<f32> {
    let bins = cfg.n_fft / 2 + 1;
    let mel_lo = hz_to_mel(cfg.f_min);
    let mel_hi = hz_to_mel(cfg.f_max_hz());
    let centers: Vec<f32> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f32 / (cfg.n_mels + 1) as f32))
        .collect();
    let bin_hz = cfg.sample_rate as f32 / cfg.n_fft as f32;
    let mut fb = Array2::zeros((cfg.n_mels, bins));
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
        let mut sum = 0.0f32;
        for b in 0..bins {
            let f = b as f32 * bin_hz;
            let v = if f <= lo || f >= hi {
                0.0
            } else if f <= mid {
                (f - lo) / (mid - lo)
            } else {
                (hi - f) / (hi - mid)
            };
            fb[(m, b)] = v;
            sum += v;
        }
        if sum > 0.0 {
            for b in 0..bins {
                fb[(m, b)] /= sum;
            }
        }
    }
    fb
}

/// Center frequency (Hz) of each mel bin.
pub fn mel_centers_hz(cfg: &StftConfig) -> Vec<f32> {
    let mel_lo = hz_to_mel(cfg.f_min);
    let mel_hi = hz_to_mel(cfg.f_max_hz());
    (0..cfg.n_mels)
        .map(|m| mel_to_hz(mel_lo + (mel_hi - mel_lo) * (m + 1) as f32 / (cfg.n_mels + 1) as f32))
        .collect()
}

/// Linear-magnitude mel spectrogram (pre-dB). Shape [n_mels, frames].
pub fn mel_linear(w: &Waveform, cfg: &StftConfig) -> Result<Array2<f32>, AudioError> {
    let mag = stft_magnitude(w, cfg)?;
    let fb = mel_filterbank(cfg);
    Ok(fb.dot(&mag))
}

fn pad_crop_time(m: Array2<f32>, frames: usize, fill: f32) -> Array2<f32> {
    let (rows, cols) = m.dim();
    let mut out = Array2::from_elem((rows, frames), fill);
    let keep = cols.min(frames);
    out.slice_mut(s![.., ..keep]).assign(&m.slice(s![.., ..keep]));
    out
}

/// Full mel pipeline: STFT magnitude -> mel filterbank -> dB with an
/// 80 dB floor under the per-spectrogram maximum -> affine map to [0, 1]
/// -> pad/crop the time axis to `target_frames` (padding maps to 0).
pub fn mel_spectrogram(w: &Waveform, cfg: &StftConfig) -> Result<MelSpec, AudioError> {
    let lin = mel_linear(w, cfg)?;
    let amin = 1e-10f32;
    let max_lin = lin.iter().fold(0.0f32, |a, &v| a.max(v));
    if max_lin <= amin {
        // silence: the floor maps to 0
        return Ok(MelSpec {
            values: Array2::zeros((cfg.n_mels, cfg.target_frames)),
            config: cfg.clone(),
        });
    }
    let max_db = 20.0 * max_lin.log10();
    let floor = max_db - cfg.dynamic_range_db;
    let values = lin.mapv(|v| {
        let db = 20.0 * v.max(amin).log10();
        ((db.max(floor) - floor) / cfg.dynamic_range_db).clamp(0.0, 1.0)
    });
    Ok(MelSpec {
        values: pad_crop_time(values, cfg.target_frames, 0.0),
        config: cfg.clone(),
    })
}

// ---------------------------------------------------------------------------
// Griffin-Lim inversion
// ---------------------------------------------------------------------------

/// Non-negative least squares (Lawson-Hanson active set), small problems.
///
/// Solves `min ||a x - b||` subject to `x >= 0`.  Not used on the inversion
/// path — the exact NNLS mel inverse is sparse and splits tones across
/// non-adjacent bins (see [`griffin_lim`]) — but kept as a general solver.
pub fn nnls(a: &Array2<f64>, b: &Array1<f64>, max_iter: usize) -> Array1<f64> {
    let (m, n) = a.dim();
    let mut x = Array1::<f64>::zeros(n);
    let mut passive: Vec<usize> = Vec::new();
    let mut w_res = b.clone();
    for _ in 0..max_iter {
        // gradient of 0.5||Ax-b||^2 is -A^T r
        let grad = a.t().dot(&w_res);
        let mut best = None;
        for j in 0..n {
            if passive.contains(&j) {
                continue;
            }
            if grad[j] > 1e-10 {
                match best {
                    None => best = Some(j),
                    Some(k) if grad[j] > grad[k] => best = Some(j),
                    _ => {}
                }
            }
        }
        let Some(j) = best else { break };
        passive.push(j);
        // solve least squares restricted to the passive set
        loop {
            let k = passive.len();
            let mut ap = Array2::<f64>::zeros((m, k));
            for (ci, &col) in passive.iter().enumerate() {
                ap.column_mut(ci).assign(&a.column(col));
            }
            let ata = ap.t().dot(&ap);
            let atb = ap.t().dot(b);
            let sol = {
                let na = nalgebra::DMatrix::from_fn(k, k, |r, c| ata[(r, c)]);
                let nb = nalgebra::DVector::from_fn(k, |r, _| atb[r]);
                match na.cholesky() {
                    Some(ch) => ch.solve(&nb),
                    None => break,
                }
            };
            if sol.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (ci, &col) in passive.iter().enumerate() {
                    x[col] = sol[ci];
                }
                break;
            }
            // move x toward sol until a passive variable hits zero, then drop it
            let mut alpha = 1.0f64;
            for (ci, &col) in passive.iter().enumerate() {
                if sol[ci] <= 0.0 {
                    let denom = x[col] - sol[ci];
                    if denom > 1e-15 {
                        alpha = alpha.min(x[col] / denom);
                    }
                }
            }
            for (ci, &col) in passive.iter().enumerate() {
                x[col] += alpha * (sol[ci] - x[col]);
            }
            passive.retain(|&col| x[col] > 1e-12);
            if passive.is_empty() {
                break;
            }
        }
        w_res = b - &a.dot(&x);
    }
    x
}

fn istft(spec: &Array2<Complex<f64>>, cfg: &StftConfig) -> Vec<f64> {
    let n = cfg.n_fft;
    let (bins, frames) = spec.dim();
    let win = hann(n);
    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n);
    let len = (frames - 1) * cfg.hop + n;
    let mut out = vec![0.0f64; len];
    let mut wsum = vec![0.0f64; len];
    let mut buf: Vec<Complex<f64>> = vec![Complex::default(); n];
    for f in 0..frames {
        for b in 0..bins {
            buf[b] = spec[(b, f)];
        }
        for b in bins..n {
            buf[b] = spec[(n - b, f)].conj();
        }
        ifft.process(&mut buf);
        let start = f * cfg.hop;
        for i in 0..n {
            out[start + i] += buf[i].re / n as f64 * win[i];
            wsum[start + i] += win[i] * win[i];
        }
    }
    for i in 0..len {
        if wsum[i] > 1e-8 {
            out[i] /= wsum[i];
        }
    }
    out
}

/// Invert a normalized mel spectrogram back to audio: de-normalize dB,
/// recover a linear-frequency magnitude via the transpose-normalized
/// filterbank pseudo-inverse, then iterate Griffin-Lim phase
/// reconstruction.  Output is peak-normalized.
///
/// The transpose pseudo-inverse smears each mel band over its filter
/// support, which keeps magnitude peaks smooth and centred; an exact NNLS
/// solve is sparser but tends to split a single tone across non-adjacent
/// bins, which Griffin-Lim then renders as beating.
pub fn griffin_lim(spec: &MelSpec, iters: usize, seed: u64) -> Result<Waveform, AudioError> {

/// Magnitude of the Hann-window DTFT at offset `delta` radians/sample from
/// the window's centre frequency, for an `n`-point window.
fn hann_lobe(delta: f64, n: usize) -> f64 {
    let dirichlet = |t: f64| -> f64 {
        let half = 0.5 * t;
        if half.sin().abs() < 1e-12 {
            n as f64
        } else {
            (n as f64 * half).sin() / half.sin()
        }
    };
    let step = 2.0 * std::f64::consts::PI / n as f64;
    (0.5 * dirichlet(delta) + 0.25 * dirichlet(delta - step) + 0.25 * dirichlet(delta + step))
        .abs()
}

/// Refine a tonal peak frequency by matching the observed mel column against
/// the mel projection of a single Hann-windowed sinusoid, ternary-searching
/// the correlation over `f_lo..f_hi` Hz.  `j_lo..=j_hi` selects the mel bands
/// the peak region contributes to.
fn refine_peak_freq(
    mel_col: &ArrayView1<f64>,
    fb: &Array2<f64>,
    (j_lo, j_hi): (usize, usize),
    (b_lo, b_hi): (usize, usize),
    (mut f_lo, mut f_hi): (f64, f64),
    cfg: &StftConfig,
) -> f64 {
    let n = cfg.n_fft;
    let score = |f: f64| -> f64 {
        let omega = 2.0 * std::f64::consts::PI * f / cfg.sample_rate as f64;
        let pred: Vec<f64> = (b_lo..=b_hi)
            .map(|b| hann_lobe(2.0 * std::f64::consts::PI * b as f64 / n as f64 - omega, n))
            .collect();
        let mut dot = 0.0;
        let mut norm = 0.0;
        for j in j_lo..=j_hi {
            let pj: f64 = (b_lo..=b_hi)
                .map(|b| fb[(j, b)] * pred[b - b_lo])
                .sum();
            dot += pj * mel_col[j];
            norm += pj * pj;
        }
        if norm <= 0.0 { 0.0 } else { dot / norm.sqrt() }
    };
    for _ in 0..50 {
        let m1 = f_lo + (f_hi - f_lo) / 3.0;
        let m2 = f_hi - (f_hi - f_lo) / 3.0;
        if score(m1) < score(m2) {
            f_lo = m1;
        } else {
            f_hi = m2;
        }
    }
    0.5 * (f_lo + f_hi)
}

    if iters < 1 {
        return Err(AudioError::InvalidArg("iters must be >= 1".into()));
    }
    let cfg = &spec.config;
    cfg.validate()?;
    let (n_mels, frames) = spec.values.dim();
    let bins = cfg.n_fft / 2 + 1;
    let fb = mel_filterbank(cfg).mapv(|v| v as f64);

    // de-normalize: [0,1] -> dB relative to a 0 dB ceiling -> linear
    let dr = cfg.dynamic_range_db;
    // per-bin normalizer: total filter weight landing on each linear bin
    let bin_weight: Vec<f64> = (0..bins)
        .map(|b| fb.column(b).sum().max(1e-10))
        .collect();
    let mel_target = Array2::from_shape_fn((n_mels, frames), |(j, f)| {
        let v = spec.values[(j, f)];
        if v <= 0.0 {
            0.0
        } else {
            10f64.powf(((v * dr - dr) / 20.0) as f64)
        }
    });
    let mut mag = Array2::<f64>::zeros((bins, frames));
    for f in 0..frames {
        let mel_col = mel_target.column(f);
        for b in 0..bins {
            mag[(b, f)] = fb.column(b).dot(&mel_col) / bin_weight[b];
        }
    }

    if mag.iter().all(|&v| v == 0.0) {
        let len = (frames - 1) * cfg.hop + cfg.n_fft;
        return Ok(Waveform::new(vec![0.0; len], cfg.sample_rate));
    }

    // Initial phase: advance each bin frame-to-frame at the frequency of its
    // nearest spectral peak.  Peak frequencies come from the Hann two-bin
    // (Grandke) interpolator, which is accurate enough that the alternating
    // projections below only have to polish the estimate.  The seed sets the
    // (physically irrelevant) global phase of the first frame.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase0: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut phase = Array2::<f64>::zeros((bins, frames));
    phase.column_mut(0).fill(phase0);
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    for f in 1..frames {
        let col = mag.column(f);
        // per-bin advance frequency, defaulting to the bin centre
        let mut freqs: Vec<f64> = (0..bins).map(|b| b as f64 * bin_hz).collect();
        for b in 1..bins - 1 {
            if col[b] >= col[b - 1] && col[b] >= col[b + 1] && col[b] > 1e-10 {
                // energy centroid over the peak's support; the pseudo-inverse
                // smears a tone symmetrically over the mel filter span, so the
                // centroid tracks the underlying frequency much more closely
                // than any local-curvature interpolation of the wide lobe
                let mut lo = b;
                while lo > 0 && col[lo - 1] < col[lo] && col[lo - 1] > 1e-10 {
                    lo -= 1;
                }
                let mut hi = b;
                while hi + 1 < bins && col[hi + 1] < col[hi] && col[hi + 1] > 1e-10 {
                    hi += 1;
                }
                let mut num = 0.0;
                let mut den = 0.0;
                for k in lo..=hi {
                    let e = col[k];
                    num += e * k as f64;
                    den += e;
                }
                let centroid_hz = num / den * bin_hz;
                // refine by matching the mel bands this region feeds against
                // the mel projection of a single windowed sinusoid
                let mel_col = mel_target.column(f);
                let mut j_lo = n_mels;
                let mut j_hi = 0;
                for j in 0..n_mels {
                    if (lo..=hi).any(|b| fb[(j, b)] > 0.0) {
                        j_lo = j_lo.min(j);
                        j_hi = j_hi.max(j);
                    }
                }
                let f_peak = if j_lo > j_hi {
                    centroid_hz
                } else {
                    refine_peak_freq(
                        &mel_col,
                        &fb,
                        (j_lo, j_hi),
                        (lo, hi),
                        (centroid_hz - bin_hz, centroid_hz + bin_hz),
                        cfg,
                    )
                };
                for k in lo.saturating_sub(1)..(hi + 2).min(bins) {
                    freqs[k] = f_peak;
                }
            }
        }
        for b in 0..bins {
            phase[(b, f)] = phase[(b, f - 1)]
                + 2.0 * std::f64::consts::PI * freqs[b] * cfg.hop as f64
                    / cfg.sample_rate as f64;
        }
    }
    // Alternating projections.  The magnitude constraint is enforced in the
    // mel domain rather than per linear bin: each round keeps the spectral
    // shape of the current signal estimate and rescales every bin by the
    // (filter-weighted) ratio of target to observed mel energy in the bands
    // covering it.  Pinning per-bin magnitudes to the pseudo-inverse instead
    // would force its mel-bandwidth smearing back in on every iteration and
    // caps tone reconstruction around 2 dB SNR; the mel-domain constraint is
    // what the analysis side actually measured.
    let win = hann(cfg.n_fft);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let mut wav = Vec::new();
    for _ in 0..iters {
        let spec_c =
            Array2::from_shape_fn((bins, frames), |(b, f)| {
                Complex::from_polar(mag[(b, f)], phase[(b, f)])
            });
        wav = istft(&spec_c, cfg);
        // re-analyze, then pull the magnitude back onto the mel targets
        let mut buf: Vec<Complex<f64>> = vec![Complex::default(); cfg.n_fft];
        let mut ratio = vec![0.0f64; n_mels];
        for f in 0..frames {
            let start = f * cfg.hop;
            for i in 0..cfg.n_fft {
                let v = wav.get(start + i).copied().unwrap_or(0.0);
                buf[i] = Complex::new(v * win[i], 0.0);
            }
            fft.process(&mut buf);
            for j in 0..n_mels {
                let observed: f64 = (0..bins).map(|b| fb[(j, b)] * buf[b].norm()).sum();
                ratio[j] = mel_target[(j, f)] / observed.max(1e-12);
            }
            for b in 0..bins {
                let scale: f64 =
                    (0..n_mels).map(|j| fb[(j, b)] * ratio[j]).sum::<f64>() / bin_weight[b];
                mag[(b, f)] = buf[b].norm() * scale;
                phase[(b, f)] = buf[b].arg();
            }
        }
    }
    let peak = wav.iter().fold(1e-12f64, |a, &v| a.max(v.abs()));
    let samples: Vec<f32> = wav.iter().map(|&v| (v / peak) as f32).collect();
    Ok(Waveform::new(samples, cfg.sample_rate))
}

// ---------------------------------------------------------------------------
// Mixing
// ---------------------------------------------------------------------------

/// A stem mixdown plus the shared clamp gain that produced it.
#[derive(Debug, Clone)]
pub struct Mix {
    pub waveform: Waveform,
    pub gain: f32,
}

/// Sample-wise sum with a shared peak-clamp gain, so that mixes of
/// different stem subsets of the same session stay sample-comparable.
pub fn mix(stems: &[&Waveform]) -> Result<Mix, AudioError> {
    let sum = raw_sum(stems)?;
    let peak = sum.iter().fold(0.0f32, |a, &v| a.max(v.abs()));
    let gain = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    Ok(Mix {
        waveform: Waveform::new(sum.iter().map(|&v| v * gain).collect(), stems[0].sample_rate),
        gain,
    })
}

/// Re-mix a stem subset with a previously recorded gain.
pub fn mix_with_gain(stems: &[&Waveform], gain: f32) -> Result<Waveform, AudioError> {
    let sum = raw_sum(stems)?;
    Ok(Waveform::new(
        sum.iter().map(|&v| (v * gain).clamp(-1.0, 1.0)).collect(),
        stems[0].sample_rate,
    ))
}

/// Plain sample-wise sum, no clamping.
pub fn raw_sum(stems: &[&Waveform]) -> Result<Vec<f32>, AudioError> {
    if stems.is_empty() {
        return Err(AudioError::EmptyMix);
    }
    let len = stems[0].samples.len();
    let rate = stems[0].sample_rate;
    for (i, s) in stems.iter().enumerate() {
        if s.samples.len() != len || s.sample_rate != rate {
            return Err(AudioError::StemMismatch(format!(
                "stem {i}: len {} rate {} vs len {len} rate {rate}",
                s.samples.len(),
                s.sample_rate
            )));
        }
    }
    let mut sum = vec![0.0f32; len];
    for s in stems {
        for (acc, &v) in sum.iter_mut().zip(&s.samples) {
            *acc += v;
        }
    }
    Ok(sum)
}

/// Synthesize a sine tone, peak 0.8.
pub fn sine(freq: f64, seconds: f64, sample_rate: u32) -> Waveform {
    let n = (seconds * sample_rate as f64).round() as usize;
    Waveform::new(
        (0..n)
            .map(|i| {
                (0.8 * (2.0 * std::f64::consts::PI * freq * i as f64 / sample_rate as f64).sin())
                    as f32
            })
            .collect(),
        sample_rate,
    )
}

/// Dominant frequency by parabolic interpolation of the FFT magnitude peak.
pub fn dominant_frequency(w: &Waveform) -> f64 {
    let n = w.samples.len().next_power_of_two().min(1 << 16);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let win = hann(n.min(w.samples.len()));
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|i| {
            let v = if i < w.samples.len() && i < win.len() {
                w.samples[i] as f64 * win[i]
            } else {
                0.0
            };
            Complex::new(v, 0.0)
        })
        .collect();
    fft.process(&mut buf);
    let half = n / 2;
    let mags: Vec<f64> = buf[..half].iter().map(|c| c.norm()).collect();
    let peak = mags
        .iter()
        .enumerate()
        .skip(1)
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut bin = peak as f64;
    if peak > 0 && peak + 1 < half {
        let (a, b, c) = (mags[peak - 1].ln(), mags[peak].ln(), mags[peak + 1].ln());
        let denom = a - 2.0 * b + c;
        if denom.abs() > 1e-12 {
            bin += 0.5 * (a - c) / denom;
        }
    }
    bin * w.sample_rate as f64 / n as f64
}

/// Tone purity: fit a single sinusoid at `freq` (amplitude + phase, least
/// squares) over the central 80% of the signal and return the energy ratio
/// of fit vs residual in dB.
pub fn tone_snr_db(w: &Waveform, freq: f64) -> f64 {
    let n = w.samples.len();
    let lo = n / 10;
    let hi = n - n / 10;
    let omega = 2.0 * std::f64::consts::PI * freq / w.sample_rate as f64;
    let (mut ss, mut sc, mut cc, mut xs, mut xc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in lo..hi {
        let (s, c) = ((omega * i as f64).sin(), (omega * i as f64).cos());
        let x = w.samples[i] as f64;
        ss += s * s;
        sc += s * c;
        cc += c * c;
        xs += x * s;
        xc += x * c;
    }
    let det = ss * cc - sc * sc;
    if det.abs() < 1e-12 {
        return 0.0;
    }
    let a = (xs * cc - xc * sc) / det;
    let b = (xc * ss - xs * sc) / det;
    let (mut fit_e, mut res_e) = (0.0, 0.0);
    for i in lo..hi {
        let (s, c) = ((omega * i as f64).sin(), (omega * i as f64).cos());
        let fit = a * s + b * c;
        let x = w.samples[i] as f64;
        fit_e += fit * fit;
        res_e += (x - fit) * (x - fit);
    }
    10.0 * (fit_e / res_e.max(1e-15)).log10()
}
