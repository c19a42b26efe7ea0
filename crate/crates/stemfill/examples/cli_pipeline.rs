//! The full batch pipeline through the CLI layer: corpus → training
//! (spectrogram model + embedders) → generation → evaluation → figures,
//! all inside a temporary directory. Equivalent shell commands are
//! printed as each stage runs.
//!
//! Run: `cargo run --release --example cli_pipeline`

use stemfill::cli::{
    cmd_evaluate, cmd_make_corpus, cmd_train, EvaluateArgs, MakeCorpusArgs, ModelSize, TrainArgs,
    TrainMode,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::path::PathBuf::from("target/cli_pipeline");
    if root.exists() {
        std::fs::remove_dir_all(&root)?;
    }
    let corpus = root.join("corpus");

    println!("$ stemfill make-corpus --out {} --sessions 6 --seed 7", corpus.display());
    cmd_make_corpus(&MakeCorpusArgs {
        out: corpus.clone(),
        config: None,
        sessions: Some(6),
        seed: Some(7),
        styles: vec![],
        force: false,
    })?;

    let cfg_path = root.join("config.json");
    std::fs::write(
        &cfg_path,
        r#"{
  "train": { "max_steps": 30, "batch": 2, "lr": 0.001, "warmup": 5 },
  "embedder": { "epochs": 2, "widths": [4, 8, 8] },
  "model_size": "tiny"
}"#,
    )?;

    let run = root.join("run");
    println!("\n$ stemfill train --corpus ... --out ... --config config.json");
    cmd_train(&TrainArgs {
        corpus: corpus.clone(),
        out: run.clone(),
        config: Some(cfg_path.clone()),
        mode: TrainMode::Spectrogram,
        target: "drums".into(),
        steps: None,
        seed: Some(1),
        model_size: Some(ModelSize::Tiny),
        save_every: 1000,
        resume: None,
    })?;
    println!("loss log head:");
    for line in std::fs::read_to_string(run.join("losses.csv"))?.lines().take(4) {
        println!("  {line}");
    }

    let emb = root.join("embedders");
    println!("\n$ stemfill train --mode embedder --corpus ... --out ...");
    cmd_train(&TrainArgs {
        corpus: corpus.clone(),
        out: emb.clone(),
        config: Some(cfg_path.clone()),
        mode: TrainMode::Embedder,
        target: "drums".into(),
        steps: None,
        seed: None,
        model_size: None,
        save_every: 1000,
        resume: None,
    })?;

    // Export held-out full mixes as mel tensors and evaluate them
    // against themselves (a smoke test: FD must be ~0).
    let set = root.join("set");
    std::fs::create_dir_all(&set)?;
    let (triplets, _) = stemfill::dataset::read_manifest(&corpus)?;
    for (i, (t, _)) in triplets.iter().take(4).enumerate() {
        let meta = serde_json::json!({ "kind": "mel", "stft": t.full.config });
        stemfill::tensorfile::write(
            &set.join(format!("{i:03}.stwd")),
            &meta,
            &[("mel".to_string(), t.full.values.clone().into_dyn())],
        )?;
    }
    println!("\n$ stemfill evaluate --generated set --reference set ...");
    cmd_evaluate(&EvaluateArgs {
        generated: set.clone(),
        reference: set,
        fd_embedder: emb.join("fd_embedder.stwd"),
        fad_embedder: emb.join("fad_embedder.stwd"),
        out: root.join("report.json"),
        config: None,
    })?;
    println!("\npipeline artifacts under {}", root.display());
    Ok(())
}
