//! The symbolic pipeline: Standard MIDI File parsing, piano-roll
//! quantization, the roll→MIDI→roll fixed point, channel subtraction,
//! and PNG rendering with the drum channel outlined.
//!
//! Run: `cargo run --release --example midi_pianoroll -- [out.png]`

use stemfill::dataset::generate_toy_corpus;
use stemfill::pianoroll::{
    from_pianoroll, note_density, parse_midi, subtract_channel, to_pianoroll, write_midi,
    Instrument, DEFAULT_STEPS_PER_BAR,
};
use stemfill::render::save_roll_png;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "target/pianoroll.png".into());
    let sessions = generate_toy_corpus(5, 1, &["reggae".into()], 8000)?;
    let doc = &sessions[0].midi;
    println!(
        "toy session MIDI: {} tracks, {} notes, {} ticks/quarter",
        doc.tracks.len(),
        doc.note_count(),
        doc.ticks_per_quarter
    );

    // Bytes → document → bytes round trip.
    let bytes = write_midi(doc);
    let reparsed = parse_midi(&bytes)?;
    assert_eq!(reparsed.note_count(), doc.note_count());
    println!("SMF round trip: {} bytes, note count preserved", bytes.len());

    // Document → roll, and the roll→MIDI→roll fixed point.
    let (roll, dropped) = to_pianoroll(doc, DEFAULT_STEPS_PER_BAR, 8)?;
    let roll2 = {
        let doc2 = from_pianoroll(&roll, 120.0);
        to_pianoroll(&doc2, DEFAULT_STEPS_PER_BAR, 8)?.0
    };
    assert_eq!(roll.data, roll2.data, "roll -> MIDI -> roll is a fixed point");
    println!(
        "quantized roll: {} steps x {} pitches ({dropped} notes outside the pitch window)",
        roll.steps(),
        roll.pitches()
    );
    for inst in Instrument::ALL {
        println!("  {:?} density {:.4}", inst, note_density(&roll, inst));
    }

    let (context, target) = subtract_channel(&roll, Instrument::Drums);
    println!(
        "subtract drums: context density {:.4}, target density {:.4}",
        Instrument::ALL
            .iter()
            .map(|&i| note_density(&context, i))
            .sum::<f64>(),
        note_density(&target, Instrument::Drums)
    );

    let out = std::path::PathBuf::from(out);
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_roll_png(&out, &roll, Some(Instrument::Drums))?;
    println!("rendered {} (drum notes outlined)", out.display());
    Ok(())
}
