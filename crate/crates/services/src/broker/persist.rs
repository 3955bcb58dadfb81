//! JSON-lines append log of entity deltas and subscriptions.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Entity, Subscription};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub(super) enum LogRecord {
    Upsert(Entity),
    Subscribe(Subscription),
}

pub(super) struct AppendLog {
    out: BufWriter<File>,
}

impl AppendLog {
    /// Opens (creating if needed) the log and returns the records already in it.
    /// A torn final line from an interrupted write is ignored.
    pub fn open(path: &Path) -> std::io::Result<(Self, Vec<LogRecord>)> {
        let mut records = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
            let last = lines.len().saturating_sub(1);
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str(line) {
                    Ok(r) => records.push(r),
                    Err(_) if i == last => tracing::warn!("ignoring torn final log record"),
                    Err(e) => return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((Self { out: BufWriter::new(file) }, records))
    }

    pub fn append(&mut self, record: &LogRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}
