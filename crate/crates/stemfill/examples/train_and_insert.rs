//! Train the Gaussian spectrogram model on a handful of triplets,
//! then insert the missing stem with DDIM sampling and measure the
//! reconstruction error against the true full mix.
//!
//! This is a miniature overfitting run (a few hundred steps on a tiny
//! model); the acceptance suite runs the full-length version.
//!
//! Run: `cargo run --release --example train_and_insert`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stemfill::audio::StftConfig;
use stemfill::dataset::{build_triplets, generate_toy_corpus};
use stemfill::diffusion::{
    sample_insert, train_step, DiffusionSchedule, SamplerConfig, TrainConfig,
};
use stemfill::nn::{UNet, UNetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sessions = generate_toy_corpus(11, 2, &["rock".into()], 8000)?;
    let stft = StftConfig::small();
    let triplets: Vec<_> = sessions
        .iter()
        .flat_map(|s| build_triplets(&s.session, "drums", &stft).unwrap())
        .collect();
    println!("{} training triplets", triplets.len());

    let schedule = DiffusionSchedule::default();
    let cfg = TrainConfig {
        lr: 2e-3,
        warmup: 20,
        max_steps: 4000, // hold the cosine near peak for this short run
        cond_dropout: 0.0,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = UNet::<f32>::new(UNetConfig::tiny(2, 1), &mut rng);
    let mut opt = cfg.optimizer();
    println!("model parameters: {}", model.param_count());

    let refs: Vec<_> = triplets.iter().collect();
    for step in 0..400u64 {
        let loss = train_step(&mut model, &mut opt, &refs, &schedule, &cfg, step, &mut rng)?;
        if step % 50 == 0 || step == 399 {
            println!("step {step:>4}  loss {loss:.4}");
        }
    }

    let scfg = SamplerConfig { steps: 20, seed: 3, ..SamplerConfig::default() };
    let t = &triplets[0];
    let generated = sample_insert(&model, &t.partial, &t.instruction, &schedule, &scfg)?;
    let mse = (&generated.values - &t.full.values)
        .iter()
        .map(|&d| (d as f64).powi(2))
        .sum::<f64>()
        / generated.values.len() as f64;
    println!(
        "\nsample_insert on \"{}\": MSE vs true full mix = {mse:.4}",
        t.instruction.text
    );
    Ok(())
}
