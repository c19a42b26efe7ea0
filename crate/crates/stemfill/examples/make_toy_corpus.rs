//! Build the deterministic toy corpus: multi-stem sessions in four
//! styles, audio triplets (full mix / stem-subtracted mix / instruction),
//! piano-roll chunks, and a JSONL manifest.
//!
//! Run: `cargo run --release --example make_toy_corpus -- [out_dir]`

use stemfill::audio::StftConfig;
use stemfill::dataset::{
    build_roll_chunks, build_triplets, generate_toy_corpus, write_manifest, RollEntry, Split,
    DEFAULT_BARS_PER_CHUNK, TOY_STYLES,
};
use stemfill::pianoroll::Instrument;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "target/toy_corpus".into());
    let out = std::path::PathBuf::from(out);
    std::fs::create_dir_all(&out)?;

    let styles: Vec<String> = TOY_STYLES.iter().map(|s| s.to_string()).collect();
    let sessions = generate_toy_corpus(7, 8, &styles, 8000)?;
    let stft = StftConfig::small();

    let mut triplets = Vec::new();
    let mut rolls = Vec::new();
    for (i, toy) in sessions.iter().enumerate() {
        // 6 train sessions, 2 test.
        let split = if i < 6 { Split::Train } else { Split::Test };
        for t in build_triplets(&toy.session, "drums", &stft)? {
            println!(
                "session {} chunk {}: \"{}\" [{}]",
                t.session_id, t.chunk_index, t.instruction.text, toy.style
            );
            triplets.push((t, split));
        }
        for (ci, chunk) in build_roll_chunks(
            &toy.midi,
            Instrument::Drums,
            DEFAULT_BARS_PER_CHUNK,
            &toy.session.tags,
        )?
        .into_iter()
        .enumerate()
        {
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
    let records = write_manifest(&out, &triplets, &rolls)?;
    println!(
        "\nwrote {} manifest records ({} triplets, {} roll chunks) to {}",
        records.len(),
        triplets.len(),
        rolls.len(),
        out.display()
    );
    Ok(())
}
