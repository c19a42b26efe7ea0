//! The four-metric evaluation suite: train two distinct toy embedders
//! on the style-labeled corpus, then compute FD, FAD, pairwise KLD, and
//! Inception Score for a generated-vs-real comparison.
//!
//! Run: `cargo run --release --example evaluate_metrics`

use stemfill::audio::StftConfig;
use stemfill::dataset::{build_triplets, generate_toy_corpus, TOY_STYLES};
use stemfill::metrics::{evaluate, train_embedder, EmbedderTrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let styles: Vec<String> = TOY_STYLES.iter().map(|s| s.to_string()).collect();
    let sessions = generate_toy_corpus(21, 12, &styles, 8000)?;
    let stft = StftConfig::small();
    let mut labeled = Vec::new();
    for toy in &sessions {
        let label = toy.session.label.unwrap();
        for t in build_triplets(&toy.session, "drums", &stft)? {
            labeled.push((t.full, label));
        }
    }
    println!("{} labeled spectrograms, {} classes", labeled.len(), TOY_STYLES.len());

    let cfg = EmbedderTrainConfig { epochs: 4, widths: [4, 8, 8], ..Default::default() };
    let (fd_emb, acc) = train_embedder("fd-toy", &labeled, &cfg)?;
    println!("fd embedder held-out accuracy: {acc:.3}");
    let cfg2 = EmbedderTrainConfig {
        epochs: 4,
        widths: [8, 8, 16],
        seed: 99,
        ..Default::default()
    };
    let (fad_emb, acc2) = train_embedder("fad-toy", &labeled, &cfg2)?;
    println!("fad embedder held-out accuracy: {acc2:.3}");

    // "Generated" = one half of the corpus, "real" = the other half:
    // same distribution, so the distances should be small but nonzero.
    let half = labeled.len() / 2;
    let generated: Vec<_> = labeled[..half].iter().map(|(s, _)| s.clone()).collect();
    let real: Vec<_> = labeled[half..2 * half].iter().map(|(s, _)| s.clone()).collect();
    let report = evaluate(&generated, &real, &fd_emb, &fad_emb, "example")?;
    println!("\n{}", serde_json::to_string_pretty(&report)?);

    // Self-comparison collapses the Fréchet distances to zero.
    let self_report = evaluate(&generated, &generated, &fd_emb, &fad_emb, "example")?;
    println!(
        "\nself-comparison: FD {:.2e}, FAD {:.2e}, KLD {:.2e}",
        self_report.fd, self_report.fad, self_report.kld
    );
    Ok(())
}
