use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::{ExtractionRecord, SweepError};

/// Append-only JSONL store of [`ExtractionRecord`]s with an index of the
/// (report_id, config_hash) pairs already present.
#[derive(Debug)]
pub struct ResultStore {
    path: PathBuf,
    file: File,
    records: Vec<ExtractionRecord>,
    completed: HashSet<(String, String)>,
    sync: bool,
}

struct Parsed {
    records: Vec<ExtractionRecord>,
    /// Byte length of the valid prefix.
    valid_len: usize,
    torn_tail: bool,
}

fn parse_store(path: &Path, bytes: &[u8]) -> Result<Parsed, SweepError> {
    let corrupt = |line: usize, message: String| SweepError::StoreCorrupt {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut offset = 0;
    let mut line_no = 0;
    while offset < bytes.len() {
        line_no += 1;
        let (line, terminated) = match bytes[offset..].iter().position(|&b| b == b'\n') {
            Some(end) => (&bytes[offset..offset + end], true),
            None => (&bytes[offset..], false),
        };
        let next = offset + line.len() + usize::from(terminated);
        if line.iter().all(u8::is_ascii_whitespace) {
            offset = next;
            continue;
        }
        let parsed = std::str::from_utf8(line)
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str::<ExtractionRecord>(s).map_err(|e| e.to_string()));
        match parsed {
            Ok(rec) => {
                if !seen.insert(rec.key()) {
                    return Err(corrupt(
                        line_no,
                        format!("duplicate record for {:?}", rec.key()),
                    ));
                }
                records.push(rec);
            }
            // an unterminated final line is a write cut short by a crash
            Err(_) if !terminated => {
                return Ok(Parsed {
                    records,
                    valid_len: offset,
                    torn_tail: true,
                })
            }
            Err(e) => return Err(corrupt(line_no, e)),
        }
        offset = next;
    }
    Ok(Parsed {
        records,
        valid_len: bytes.len(),
        torn_tail: false,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SweepError + '_ {
    move |source| SweepError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads every record without modifying the file. A torn final line is
/// skipped with a warning.
pub fn load_records(path: &Path) -> Result<Vec<ExtractionRecord>, SweepError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let parsed = parse_store(path, &bytes)?;
    if parsed.torn_tail {
        log::warn!("{}: ignoring incomplete final line", path.display());
    }
    Ok(parsed.records)
}

impl ResultStore {
    /// Opens or creates the store. A torn final line left by a crash is
    /// truncated away; any other unreadable line aborts.
    pub fn open(path: &Path) -> Result<Self, SweepError> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io_err(path))?;
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let parsed = parse_store(path, &bytes)?;
        if parsed.torn_tail {
            log::warn!(
                "{}: truncating incomplete final line at byte {}",
                path.display(),
                parsed.valid_len
            );
            file.set_len(parsed.valid_len as u64)
                .map_err(io_err(path))?;
        }
        // an intact final record may still lack its newline
        if parsed.valid_len > 0 && bytes[parsed.valid_len - 1] != b'\n' {
            file.seek(SeekFrom::End(0)).map_err(io_err(path))?;
            file.write_all(b"\n").map_err(io_err(path))?;
        }
        let completed = parsed.records.iter().map(ExtractionRecord::key).collect();
        Ok(Self {
            path: path.to_path_buf(),
            file,
            records: parsed.records,
            completed,
            sync: true,
        })
    }

    /// Whether each append is followed by an fsync (default true).
    pub fn set_sync(&mut self, sync: bool) {
        self.sync = sync;
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> &[ExtractionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, report_id: &str, config_hash: &str) -> bool {
        self.completed
            .contains(&(report_id.to_string(), config_hash.to_string()))
    }

    /// Writes one line and flushes it to disk. Refuses duplicates.
    pub fn append(&mut self, record: &ExtractionRecord) -> Result<(), SweepError> {
        let key = record.key();
        if self.completed.contains(&key) {
            return Err(SweepError::StoreCorrupt {
                path: self.path.clone(),
                line: self.records.len() + 1,
                message: format!("refusing duplicate append for {key:?}"),
            });
        }
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(io_err(&self.path))?;
        if self.sync {
            self.file.sync_data().map_err(io_err(&self.path))?;
        }
        self.completed.insert(key);
        self.records.push(record.clone());
        Ok(())
    }
}
