//! DSP round trip: a pure 440 Hz tone through the mel spectrogram and
//! back through Griffin-Lim phase reconstruction, reporting the dominant
//! frequency and tone SNR of the result.
//!
//! Run: `cargo run --release --example griffin_lim_roundtrip`

use stemfill::audio::{
    dominant_frequency, griffin_lim, mel_spectrogram, sine, tone_snr_db, StftConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = StftConfig::small();
    // Fill the configured frame budget exactly so no padded silence
    // dilutes the SNR measurement.
    let n = (cfg.target_frames - 1) * cfg.hop + cfg.n_fft;
    let dur = n as f64 / cfg.sample_rate as f64;
    let tone = sine(440.0, dur, cfg.sample_rate);

    let spec = mel_spectrogram(&tone, &cfg)?;
    println!(
        "mel spectrogram: {} bands x {} frames",
        spec.values.dim().0,
        spec.values.dim().1
    );

    for iters in [1, 8, 32] {
        let rec = griffin_lim(&spec, iters, 0)?;
        let freq = dominant_frequency(&rec);
        let snr = tone_snr_db(&rec, freq);
        println!(
            "griffin-lim {iters:>2} iterations: dominant {freq:7.2} Hz, tone SNR {snr:5.1} dB"
        );
    }
    Ok(())
}
