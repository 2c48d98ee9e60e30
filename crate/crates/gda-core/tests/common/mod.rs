//! Support code shared by the integration suites.
//!
//! - The corpus generator synthesizes deterministic English-like prose from
//!   fixed word banks, so corpus-dependent tests need no network, no bundled
//!   data files, and no licensing questions, while still exercising the
//!   byte-level statistics a language model actually learns: a stable
//!   lexicon, whitespace rhythm, punctuation, and sentence structure.
//! - Each integration binary compiles its own copy of this module and uses
//!   a different subset, so dead-code warnings are silenced here.

#![allow(dead_code)]

use std::path::Path;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ARTICLES: &[&str] = &["the", "a", "one", "every", "some", "this", "that", "each"];

const ADJECTIVES: &[&str] = &[
    "old", "young", "quiet", "loud", "bright", "dark", "heavy", "light", "narrow", "wide",
    "early", "late", "warm", "cold", "dry", "wet", "slow", "quick", "plain", "strange",
    "steep", "flat", "rough", "smooth", "pale", "deep", "shallow", "distant", "near", "empty",
    "full", "broken", "whole", "green", "grey", "golden", "silver", "stone", "wooden", "iron",
    "gentle", "sharp", "soft", "hard", "thin", "thick", "tall", "small",
];

const NOUNS: &[&str] = &[
    "river", "mountain", "valley", "forest", "meadow", "harbor", "village", "garden", "window",
    "doorway", "lantern", "bridge", "road", "path", "field", "orchard", "mill", "tower",
    "market", "square", "fountain", "bell", "boat", "wagon", "horse", "sparrow", "heron",
    "fox", "badger", "owl", "willow", "oak", "birch", "stone", "cloud", "storm", "wind",
    "rain", "snow", "morning", "evening", "night", "summer", "winter", "autumn", "spring",
    "farmer", "miller", "sailor", "weaver", "stranger", "child", "letter", "story", "song",
    "candle", "kettle", "loaf", "cellar", "attic", "stairway", "hedge", "gate", "barn",
];

const VERBS: &[&str] = &[
    "crossed", "followed", "watched", "entered", "left", "reached", "climbed", "opened",
    "closed", "carried", "gathered", "dropped", "found", "lost", "held", "turned", "passed",
    "touched", "filled", "emptied", "mended", "built", "burned", "planted", "harvested",
    "remembered", "forgot", "studied", "counted", "measured", "weighed", "traded", "sold",
    "bought", "borrowed", "returned", "repaired", "painted", "swept", "lit",
];

const ADVERBS: &[&str] = &[
    "slowly", "quickly", "quietly", "loudly", "carefully", "carelessly", "early", "late",
    "often", "rarely", "together", "alone", "again", "finally", "suddenly", "gradually",
    "eagerly", "calmly", "gladly", "barely", "almost", "nearly", "twice", "once",
];

const PREPOSITIONS: &[&str] = &[
    "near", "beside", "beyond", "under", "over", "through", "across", "along", "behind",
    "before", "after", "around", "toward", "against", "within", "without",
];

const CONJUNCTIONS: &[&str] = &["and", "but", "while", "because", "until", "though", "so"];

fn pick<'a>(rng: &mut ChaCha8Rng, bank: &[&'a str]) -> &'a str {
    bank[rng.gen_range(0..bank.len())]
}

/// Noun phrase: article, optional adjective(s), noun.
fn noun_phrase(rng: &mut ChaCha8Rng, out: &mut String) {
    out.push_str(pick(rng, ARTICLES));
    out.push(' ');
    let adjectives = match rng.gen_range(0..10) {
        0..=4 => 0,
        5..=8 => 1,
        _ => 2,
    };
    for _ in 0..adjectives {
        out.push_str(pick(rng, ADJECTIVES));
        out.push(' ');
    }
    out.push_str(pick(rng, NOUNS));
}

/// One clause, lowercase, no terminal punctuation.
fn clause(rng: &mut ChaCha8Rng, out: &mut String) {
    noun_phrase(rng, out);
    out.push(' ');
    out.push_str(pick(rng, VERBS));
    match rng.gen_range(0..10) {
        // object phrase
        0..=3 => {
            out.push(' ');
            noun_phrase(rng, out);
        }
        // prepositional phrase
        4..=6 => {
            out.push(' ');
            out.push_str(pick(rng, PREPOSITIONS));
            out.push(' ');
            noun_phrase(rng, out);
        }
        // adverb
        7..=8 => {
            out.push(' ');
            out.push_str(pick(rng, ADVERBS));
        }
        // object + trailing adverb
        _ => {
            out.push(' ');
            noun_phrase(rng, out);
            out.push(' ');
            out.push_str(pick(rng, ADVERBS));
        }
    }
}

fn sentence(rng: &mut ChaCha8Rng, out: &mut String) {
    let mut body = String::new();
    clause(rng, &mut body);
    match rng.gen_range(0..10) {
        // compound sentence
        0..=2 => {
            body.push_str(", ");
            body.push_str(pick(rng, CONJUNCTIONS));
            body.push(' ');
            clause(rng, &mut body);
        }
        // joined by semicolon
        3 => {
            body.push_str("; ");
            clause(rng, &mut body);
        }
        _ => {}
    }
    // Every bank word is ASCII lowercase, so capitalizing byte 0 is safe.
    out.push(body.as_bytes()[0].to_ascii_uppercase() as char);
    out.push_str(&body[1..]);
    out.push(if rng.gen_range(0..12) == 0 { '!' } else { '.' });
}

/// Deterministic English-like prose of at least `target_bytes` bytes.
/// Entirely synthesized from the word banks above, so it is public-domain
/// by construction and identical across runs for the same seed.
pub fn synth_corpus(target_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(target_bytes + 256);
    let mut in_para = 0usize;
    let mut para_len = rng.gen_range(4..=9);
    while out.len() < target_bytes {
        sentence(&mut rng, &mut out);
        in_para += 1;
        if in_para >= para_len {
            out.push_str("\n\n");
            in_para = 0;
            para_len = rng.gen_range(4..=9);
        } else {
            out.push(' ');
        }
    }
    out
}

/// Captured result of one `gda` invocation.
pub struct CmdOut {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl CmdOut {
    /// Last non-empty stdout line; the summary line by the CLI contract.
    pub fn summary(&self) -> &str {
        self.stdout
            .lines()
            .rev()
            .find(|l| !l.trim().is_empty())
            .unwrap_or("")
    }

    /// `key=value` lookup inside the summary line.
    pub fn summary_field(&self, key: &str) -> Option<String> {
        summary_field(self.summary(), key)
    }
}

/// `key=value` lookup inside any space-separated summary line.
pub fn summary_field(line: &str, key: &str) -> Option<String> {
    line.split_whitespace()
        .filter_map(|tok| tok.split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v.to_string())
}

/// Run the CLI binary with `args` in `dir` and capture everything.
pub fn gda_in(dir: &Path, args: &[&str]) -> CmdOut {
    let output = Command::new(env!("CARGO_BIN_EXE_gda"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn gda binary");
    CmdOut {
        code: output.status.code().expect("gda exit code"),
        stdout: String::from_utf8_lossy(&output.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
    }
}
