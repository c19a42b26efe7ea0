//! Binary (XOR-Bernoulli) diffusion on piano rolls: train a small model
//! to generate the drum channel conditioned on bass and guitar, then
//! sample with density rejection and score onset alignment against the
//! context.
//!
//! Run: `cargo run --release --example binary_roll_diffusion`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stemfill::dataset::{build_roll_chunks, generate_toy_corpus, DEFAULT_BARS_PER_CHUNK};
use stemfill::diffusion::{
    binary_sample, binary_train_step, DiffusionSchedule, RejectionConfig, SamplerConfig,
    SamplerMode, TrainConfig,
};
use stemfill::metrics::onset_alignment;
use stemfill::nn::{UNet, UNetConfig};
use stemfill::pianoroll::{note_density, subtract_channel, Instrument};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let styles: Vec<String> = ["rock", "edm"].iter().map(|s| s.to_string()).collect();
    let sessions = generate_toy_corpus(13, 4, &styles, 8000)?;
    let chunks: Vec<_> = sessions
        .iter()
        .flat_map(|s| {
            build_roll_chunks(
                &s.midi,
                Instrument::Drums,
                DEFAULT_BARS_PER_CHUNK,
                &s.session.tags,
            )
            .unwrap()
        })
        .collect();
    println!("{} roll chunks for training", chunks.len());

    let schedule = DiffusionSchedule::default();
    let cfg = TrainConfig {
        lr: 2e-3,
        warmup: 20,
        max_steps: 4000,
        cond_dropout: 0.0,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = UNet::<f32>::new(UNetConfig::tiny(3, 1), &mut rng);
    let mut opt = cfg.optimizer();
    let refs: Vec<_> = chunks.iter().collect();
    for step in 0..1200u64 {
        let loss = binary_train_step(&mut model, &mut opt, &refs, &schedule, &cfg, step, &mut rng)?;
        if step % 200 == 0 || step == 1199 {
            println!("step {step:>4}  BCE {loss:.4}");
        }
    }

    let (context, _) = subtract_channel(&chunks[0].roll, Instrument::Drums);
    let scfg = SamplerConfig {
        steps: 20,
        mode: SamplerMode::Binary,
        seed: 2,
        ..SamplerConfig::default()
    };
    let (generated, attempts) = binary_sample(
        &model,
        &context,
        Instrument::Drums,
        &schedule,
        &scfg,
        // The toy drum channel sits near density 0.01, right at the default
        // floor, so give the small model a little slack on the sparse side.
        &RejectionConfig {
            min_density: 0.005,
            ..RejectionConfig::default()
        },
    )?;
    let align = onset_alignment(&generated, Instrument::Drums, Instrument::Bass);
    println!(
        "\ngenerated drums in {attempts} attempt(s): density {:.4}, onset alignment vs bass {:.3}",
        note_density(&generated, Instrument::Drums),
        align.fraction
    );
    Ok(())
}
