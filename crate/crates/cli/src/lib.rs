//! Library half of the `s3rec` command-line tool. Each subcommand lives in
//! [`commands`] and is callable without going through `main`.

pub mod commands;
pub mod config;

use s3rec::ahe::{keygen, keygen_unchecked, AheKeyPair};
use s3rec::Result;

pub use config::{RunConfig, TransportKind};

/// Generates a Paillier key, allowing non-standard sizes only when asked.
pub fn generate_key(bits: u32, seed: u64, insecure_test_keys: bool) -> Result<AheKeyPair> {
    if insecure_test_keys {
        keygen_unchecked(bits, seed)
    } else {
        keygen(bits, seed)
    }
}

/// `# key = value` comment lines for embedding a config in text outputs.
pub fn comment_header(lines: impl IntoIterator<Item = String>) -> String {
    lines.into_iter().map(|l| format!("# {l}\n")).collect()
}
