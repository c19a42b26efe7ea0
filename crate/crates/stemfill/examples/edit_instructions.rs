//! Text edit instructions: deterministic template generation, caption
//! shortening for the baseline, validity checking, and the hashed
//! bag-of-words embedding the denoiser consumes.
//!
//! Optionally, set `STEMFILL_LLM_ENDPOINT` / `STEMFILL_LLM_KEY` /
//! `STEMFILL_LLM_MODEL` to rewrite captions with a chat-completion
//! service; without them the template path is used.
//!
//! Run: `cargo run --release --example edit_instructions`

use stemfill::instruct::{
    is_valid_instruction, shorten_caption, stable_hash, template_instruction, tokenize_buckets,
    ClientConfig, llm_instruction,
};

fn main() {
    for (stem, tags, seed) in [
        ("drums", vec!["rock".to_string()], 1),
        ("bass", vec!["jazz".to_string(), "laid-back".to_string()], 2),
        ("guitar", vec!["edm".to_string()], 3),
    ] {
        let instr = template_instruction(stem, &tags, seed);
        println!(
            "template[{seed}] -> \"{}\" (valid: {})",
            instr.text,
            is_valid_instruction(&instr.text)
        );
    }

    let caption = "A laid-back jazz trio recording with brushed drums and upright bass";
    println!(
        "\ncaption: \"{caption}\"\n5-word truncation: \"{}\"",
        shorten_caption(caption)
    );

    let text = "Add rock-style drums";
    let buckets = tokenize_buckets(text);
    println!(
        "\n\"{text}\" -> hash buckets {:?} (stable hash {:#x})",
        buckets,
        stable_hash(text)
    );

    match ClientConfig::from_env() {
        Ok(cfg) => match llm_instruction(caption, "drums", &cfg) {
            Ok(out) => println!(
                "\nLLM rewrite: \"{}\" (fallback used: {})",
                out.instruction.text, out.used_fallback
            ),
            Err(e) => println!("\nLLM request failed: {e}"),
        },
        Err(_) => {
            println!("\nno LLM endpoint configured; template fallback is the default path")
        }
    }
}
