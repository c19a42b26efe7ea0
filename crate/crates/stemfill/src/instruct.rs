//! Text edit instructions and their conditioning embeddings.
//!
//! Instructions ("Add rock-style drums") come from deterministic seeded
//! templates by default, or optionally from any chat-completion-style HTTP
//! endpoint configured through environment variables. Either way the text
//! is validated (non-empty, starts with "add" or "insert"), then embedded
//! as a hashed bag of words: tokens hash into `VOCAB` buckets and the
//! embedding is the mean of the corresponding rows of the denoiser's
//! trainable bucket table. The all-zero vector is reserved as the
//! dropped-conditioning sentinel.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::time::Duration;

use ndarray::{Array1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::Elem;

/// Hash buckets in the bag-of-words vocabulary.
pub const VOCAB: usize = 1024;
/// Embedding dimension.
pub const EMBED_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum InstructError {
    #[error("llm endpoint not configured (set {0})")]
    NotConfigured(&'static str),
    #[error("unsupported endpoint url {0:?} (only http:// is supported)")]
    BadEndpoint(String),
    #[error("llm request failed after {attempts} attempts: {last}")]
    RetryExhausted { attempts: u32, last: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A validated text edit instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct EditInstruction {
    pub text: String,
    pub target_stem: String,
    pub style_tags: Vec<String>,
}

/// Does this text satisfy the instruction invariants: non-empty and starting
/// with an action word ("add" or "insert", case-insensitive)?
pub fn is_valid_instruction(text: &str) -> bool {
    let first = text.split_whitespace().next().unwrap_or("");
    let first = first.to_lowercase();
    first == "add" || first == "insert"
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

const TEMPLATES: [(&str, &str); 4] = [
    // (before-style, after-style) halves around the style tag
    ("Add ", "-style {stem}"),
    ("Insert a ", " {stem} groove"),
    ("Add some ", " {stem}"),
    ("Insert ", "-flavored {stem}"),
];

/// Deterministic-by-seed template instruction for the given stem and style
/// tags. The first tag list entry that looks like a style is used when the
/// seeded draw lands on it; with no tags the style slot is filled with
/// "new".
pub fn template_instruction(target_stem: &str, tags: &[String], seed: u64) -> EditInstruction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.gen_range(0..TEMPLATES.len());
    let style = if tags.is_empty() {
        "new".to_string()
    } else {
        tags[rng.gen_range(0..tags.len())].clone()
    };
    let (head, tail) = TEMPLATES[t];
    let text = format!("{head}{style}{}", tail.replace("{stem}", target_stem));
    debug_assert!(is_valid_instruction(&text));
    EditInstruction {
        text,
        target_stem: target_stem.to_string(),
        style_tags: tags.to_vec(),
    }
}

/// First five whitespace tokens of a caption, the shortened form fed to the
/// baseline sampler.
pub fn shorten_caption(caption: &str) -> String {
    caption
        .split_whitespace()
        .take(5)
        .collect::<Vec<_>>()
        .join(" ")
}

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

/// Stable 64-bit FNV-1a string hash, used both for token bucketing and for
/// deriving deterministic per-record instruction seeds.
pub fn stable_hash(text: &str) -> u64 {
    fnv1a(text)
}

fn fnv1a(token: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in token.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Lowercase, strip punctuation, split on whitespace, hash each token to a
/// bucket index in `0..VOCAB`.
pub fn tokenize_buckets(text: &str) -> Vec<usize> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| (fnv1a(t) % VOCAB as u64) as usize)
        .collect()
}

/// Mean of the table rows for the instruction's token buckets; the zero
/// vector if the text has no tokens. `table` is the denoiser's trainable
/// `[VOCAB, D]` bucket table.
pub fn embed_instruction<T: Elem>(instr: &EditInstruction, table: &ArrayView2<T>) -> Array1<T> {
    let buckets = tokenize_buckets(&instr.text);
    let d = table.dim().1;
    let mut out = Array1::<T>::zeros(d);
    if buckets.is_empty() {
        return out;
    }
    for &b in &buckets {
        out += &table.row(b);
    }
    out.mapv_into(|v| v / T::from_f64(buckets.len() as f64))
}

// ---------------------------------------------------------------------------
// Optional LLM client
// ---------------------------------------------------------------------------

pub const ENV_ENDPOINT: &str = "STEMFILL_LLM_ENDPOINT";
pub const ENV_KEY: &str = "STEMFILL_LLM_KEY";
pub const ENV_MODEL: &str = "STEMFILL_LLM_MODEL";

/// Connection settings for a chat-completion-style HTTP endpoint.
#[derive(Debug, Clone)]
pub struct ClientConfig {
    /// `http://host[:port]/path`
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub retries: u32,
    /// Responses are cached here keyed by prompt hash, when set.
    pub cache_dir: Option<PathBuf>,
}

impl ClientConfig {
    /// Read endpoint configuration from `STEMFILL_LLM_*` environment
    /// variables. Errors if no endpoint is set.
    pub fn from_env() -> Result<ClientConfig, InstructError> {
        let endpoint =
            std::env::var(ENV_ENDPOINT).map_err(|_| InstructError::NotConfigured(ENV_ENDPOINT))?;
        Ok(ClientConfig {
            endpoint,
            api_key: std::env::var(ENV_KEY).ok(),
            model: std::env::var(ENV_MODEL).unwrap_or_else(|_| "default".into()),
            timeout: Duration::from_secs(30),
            retries: 3,
            cache_dir: None,
        })
    }
}

/// Result of an LLM instruction request.
#[derive(Debug, Clone)]
pub struct LlmOutcome {
    pub instruction: EditInstruction,
    /// Set when the response failed validation and the template was used.
    pub used_fallback: bool,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

/// Ask the configured endpoint for a one-sentence edit instruction for
/// `target_stem` given a track caption. Invalid responses (no add/insert
/// action word) fall back to [`template_instruction`] with the fallback
/// flag set; transport errors are retried up to `cfg.retries` times before
/// surfacing as [`InstructError::RetryExhausted`].
pub fn llm_instruction(
    caption: &str,
    target_stem: &str,
    cfg: &ClientConfig,
) -> Result<LlmOutcome, InstructError> {
    let prompt = format!(
        "A music track is described as: \"{caption}\". The {target_stem} stem has been removed. \
         Reply with a single short instruction, starting with the word Add or Insert, that asks \
         for the missing {target_stem} to be put back in a style matching the description. \
         Reply with the instruction only."
    );
    let content = match cached_response(cfg, &prompt)? {
        Some(hit) => hit,
        None => {
            let body = serde_json::json!({
                "model": cfg.model,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": 0.0,
            })
            .to_string();
            let content = request_with_retries(cfg, &body)?;
            store_response(cfg, &prompt, &content)?;
            content
        }
    };
    let text = content.trim().trim_matches('"').to_string();
    if is_valid_instruction(&text) {
        Ok(LlmOutcome {
            instruction: EditInstruction {
                text,
                target_stem: target_stem.to_string(),
                style_tags: vec![],
            },
            used_fallback: false,
        })
    } else {
        let tags: Vec<String> = caption.split_whitespace().take(1).map(str::to_string).collect();
        Ok(LlmOutcome {
            instruction: template_instruction(target_stem, &tags, fnv1a(caption)),
            used_fallback: true,
        })
    }
}

fn cache_path(cfg: &ClientConfig, prompt: &str) -> Option<PathBuf> {
    let dir = cfg.cache_dir.as_ref()?;
    let hash = Sha256::digest(prompt.as_bytes());
    let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
    Some(dir.join(format!("{hex}.txt")))
}

fn cached_response(cfg: &ClientConfig, prompt: &str) -> Result<Option<String>, InstructError> {
    match cache_path(cfg, prompt) {
        Some(p) if p.exists() => Ok(Some(std::fs::read_to_string(p)?)),
        _ => Ok(None),
    }
}

fn store_response(cfg: &ClientConfig, prompt: &str, content: &str) -> Result<(), InstructError> {
    if let Some(p) = cache_path(cfg, prompt) {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(p, content)?;
    }
    Ok(())
}

fn request_with_retries(cfg: &ClientConfig, body: &str) -> Result<String, InstructError> {
    let attempts = cfg.retries.max(1);
    let mut last = String::new();
    for i in 0..attempts {
        match request_once(cfg, body) {
            Ok(content) => return Ok(content),
            Err(e) => last = e,
        }
        if i + 1 < attempts {
            std::thread::sleep(Duration::from_millis(50 << i));
        }
    }
    Err(InstructError::RetryExhausted { attempts, last })
}

/// One POST over plain HTTP. Returns the first choice's message content, or
/// a retryable error description.
fn request_once(cfg: &ClientConfig, body: &str) -> Result<String, String> {
    let rest = cfg
        .endpoint
        .strip_prefix("http://")
        .ok_or_else(|| InstructError::BadEndpoint(cfg.endpoint.clone()).to_string())?;
    let (authority, path) = match rest.find('/') {
        Some(i) => (&rest[..i], &rest[i..]),
        None => (rest, "/"),
    };
    let addr = if authority.contains(':') {
        authority.to_string()
    } else {
        format!("{authority}:80")
    };

    let mut stream = TcpStream::connect(&addr).map_err(|e| e.to_string())?;
    stream.set_read_timeout(Some(cfg.timeout)).map_err(|e| e.to_string())?;
    stream.set_write_timeout(Some(cfg.timeout)).map_err(|e| e.to_string())?;

    let auth = match &cfg.api_key {
        Some(k) => format!("Authorization: Bearer {k}\r\n"),
        None => String::new(),
    };
    let request = format!(
        "POST {path} HTTP/1.1\r\nHost: {authority}\r\nContent-Type: application/json\r\n\
         {auth}Content-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(request.as_bytes()).map_err(|e| e.to_string())?;

    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).map_err(|e| e.to_string())?;
    let text = String::from_utf8_lossy(&raw);
    let mut lines = text.splitn(2, "\r\n\r\n");
    let head = lines.next().unwrap_or("");
    let body = lines.next().unwrap_or("");
    let status: u16 = head
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .ok_or("malformed HTTP status line")?;
    if status != 200 {
        return Err(format!("HTTP status {status}"));
    }
    let parsed: ChatResponse =
        serde_json::from_str(body.trim()).map_err(|e| format!("bad response JSON: {e}"))?;
    parsed
        .choices
        .first()
        .map(|c| c.message.content.clone())
        .ok_or_else(|| "response had no choices".into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use std::net::TcpListener;

    #[test]
    fn seed_one_gives_the_reference_instruction() {
        let i = template_instruction("drums", &["rock".into()], 1);
        assert_eq!(i.text, "Add rock-style drums");
    }

    #[test]
    fn seed_two_mentions_style_and_stem() {
        let i = template_instruction("drums", &["jazz".into()], 2);
        assert!(i.text.contains("jazz"), "{}", i.text);
        assert!(i.text.contains("drums"), "{}", i.text);
        assert!(is_valid_instruction(&i.text));
    }

    #[test]
    fn templates_are_deterministic_and_valid() {
        for seed in 0..64 {
            let a = template_instruction("bass", &["edm".into(), "reggae".into()], seed);
            let b = template_instruction("bass", &["edm".into(), "reggae".into()], seed);
            assert_eq!(a, b);
            assert!(is_valid_instruction(&a.text), "{}", a.text);
            assert!(a.text.contains("bass"));
        }
    }

    #[test]
    fn caption_shortening_takes_five_words() {
        assert_eq!(
            shorten_caption("a slow jazz trio with brushed drums and upright bass"),
            "a slow jazz trio with"
        );
        assert_eq!(shorten_caption("two words"), "two words");
    }

    #[test]
    fn tokenizer_normalizes_case_and_punctuation() {
        assert_eq!(
            tokenize_buckets("Add rock drums"),
            tokenize_buckets("add rock drums.")
        );
        assert!(tokenize_buckets("  ...  ").is_empty());
        assert!(tokenize_buckets("add").iter().all(|&b| b < VOCAB));
    }

    fn test_table() -> Array2<f32> {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dist = Normal::new(0.0f32, 0.02).unwrap();
        Array2::from_shape_fn((VOCAB, EMBED_DIM), |_| dist.sample(&mut rng))
    }

    #[test]
    fn embedding_is_deterministic_and_nonzero_for_nonempty() {
        let table = test_table();
        let i = template_instruction("drums", &["rock".into()], 1);
        let a = embed_instruction(&i, &table.view());
        let b = embed_instruction(&i, &table.view());
        assert_eq!(a, b);
        assert!(a.iter().any(|&v| v != 0.0), "non-empty text must not hit the sentinel");
    }

    #[test]
    fn empty_text_embeds_to_the_sentinel() {
        let table = test_table();
        let i = EditInstruction {
            text: String::new(),
            target_stem: "drums".into(),
            style_tags: vec![],
        };
        let v = embed_instruction(&i, &table.view());
        assert!(v.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_variants_embed_identically() {
        let table = test_table();
        let a = EditInstruction {
            text: "Add rock drums".into(),
            target_stem: "drums".into(),
            style_tags: vec![],
        };
        let b = EditInstruction {
            text: "add rock drums.".into(),
            target_stem: "drums".into(),
            style_tags: vec![],
        };
        assert_eq!(
            embed_instruction(&a, &table.view()),
            embed_instruction(&b, &table.view())
        );
    }

    /// Serve `responses` (status, body) once each on an ephemeral port.
    fn mock_server(responses: Vec<(u16, String)>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = match listener.accept() {
                    Ok(s) => s,
                    Err(_) => return,
                };
                let mut buf = [0u8; 4096];
                let _ = stream.read(&mut buf);
                let reason = if status == 200 { "OK" } else { "Error" };
                let resp = format!(
                    "HTTP/1.1 {status} {reason}\r\nContent-Length: {}\r\n\
                     Connection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(resp.as_bytes());
            }
        });
        format!("http://{addr}/v1/chat/completions")
    }

    fn chat_body(content: &str) -> String {
        serde_json::json!({"choices": [{"message": {"content": content}}]}).to_string()
    }

    fn test_config(endpoint: String) -> ClientConfig {
        ClientConfig {
            endpoint,
            api_key: Some("test-key".into()),
            model: "default".into(),
            timeout: Duration::from_secs(5),
            retries: 3,
            cache_dir: None,
        }
    }

    #[test]
    fn fixture_response_accepted() {
        let cfg = test_config(mock_server(vec![(200, chat_body("Insert a punchy drum beat"))]));
        let out = llm_instruction("an energetic rock song", "drums", &cfg).unwrap();
        assert!(!out.used_fallback);
        assert_eq!(out.instruction.text, "Insert a punchy drum beat");
    }

    #[test]
    fn invalid_response_falls_back_to_template() {
        let cfg = test_config(mock_server(vec![(200, chat_body("The drums are missing."))]));
        let out = llm_instruction("an energetic rock song", "drums", &cfg).unwrap();
        assert!(out.used_fallback);
        assert!(is_valid_instruction(&out.instruction.text));
        assert!(out.instruction.text.contains("drums"));
    }

    #[test]
    fn server_errors_exhaust_retries() {
        let cfg = test_config(mock_server(vec![
            (500, "oops".into()),
            (500, "oops".into()),
            (500, "oops".into()),
        ]));
        let err = llm_instruction("a calm piano piece", "bass", &cfg).unwrap_err();
        match err {
            InstructError::RetryExhausted { attempts, last } => {
                assert_eq!(attempts, 3);
                assert!(last.contains("500"), "{last}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn responses_are_cached_by_prompt_hash() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = test_config(mock_server(vec![(200, chat_body("Add a warm bass line"))]));
        cfg.cache_dir = Some(dir.path().to_path_buf());
        let first = llm_instruction("a dub track", "bass", &cfg).unwrap();
        assert_eq!(first.instruction.text, "Add a warm bass line");
        // server has no second response queued, so this must come from disk
        let second = llm_instruction("a dub track", "bass", &cfg).unwrap();
        assert_eq!(second.instruction.text, "Add a warm bass line");
    }

    #[test]
    fn https_endpoint_rejected() {
        let cfg = test_config("https://example.com/v1".into());
        let err = llm_instruction("x", "drums", &cfg).unwrap_err();
        assert!(matches!(err, InstructError::RetryExhausted { .. }));
    }
}
