//! Line-delimited JSON trajectory and event logs.

use serde::Serialize;
use serde_json::json;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

/// A JSONL sink; every record carries `schema_version` and a `kind` tag.
pub struct JsonlLog {
    out: Option<BufWriter<std::fs::File>>,
}

impl JsonlLog {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self { out: Some(BufWriter::new(std::fs::File::create(path)?)) })
    }

    /// A log that drops everything; handy for tests and benchmarks.
    pub fn sink() -> Self {
        Self { out: None }
    }

    pub fn record<T: Serialize>(&mut self, kind: &str, t: f64, payload: &T) {
        let Some(out) = self.out.as_mut() else { return };
        let value = json!({
            "schema_version": SCHEMA_VERSION,
            "kind": kind,
            "t": t,
            "data": payload,
        });
        // A failed write is not worth crashing an episode over; drop the sink.
        if serde_json::to_writer(&mut *out, &value).and_then(|_| {
            out.write_all(b"\n").map_err(serde_json::Error::io)
        }).is_err()
        {
            self.out = None;
        }
    }

    pub fn flush(&mut self) {
        if let Some(out) = self.out.as_mut() {
            let _ = out.flush();
        }
    }
}
