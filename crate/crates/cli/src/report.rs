use serde::Serialize;
use sha2::{Digest, Sha256};

/// One metric value, printed as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub task: String,
    pub dataset: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the compact JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config serializes");
    hex(&Sha256::digest(text.as_bytes()))
}

/// Writes one line to stdout. A closed pipe (e.g. `| head`) ends the
/// process quietly instead of panicking.
pub fn out_line(text: &str) {
    use std::io::Write;
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = writeln!(stdout, "{text}") {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        panic!("writing to stdout: {e}");
    }
}

pub fn emit(records: &[Record]) {
    for r in records {
        out_line(&serde_json::to_string(r).expect("record serializes"));
    }
}
