//! Line-delimited JSON artifacts with an optional schema header line.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// First line of every artifact this crate writes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub schema: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<String>,
}

impl Header {
    pub fn new(schema: &str, run: Option<&str>) -> Self {
        Header {
            schema: schema.to_string(),
            version: SCHEMA_VERSION,
            run: run.map(str::to_string),
        }
    }
}

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: schema `{found}` where `{expected}` was expected")]
    Schema {
        path: String,
        expected: String,
        found: String,
    },
}

pub fn to_line<T: Serialize>(item: &T) -> String {
    serde_json::to_string(item).expect("artifact types serialize infallibly")
}

pub fn write_lines<T: Serialize>(
    w: &mut impl Write,
    header: Option<&Header>,
    items: &[T],
) -> io::Result<()> {
    if let Some(h) = header {
        writeln!(w, "{}", to_line(h))?;
    }
    for item in items {
        writeln!(w, "{}", to_line(item))?;
    }
    Ok(())
}

pub fn write_file<T: Serialize>(path: &Path, header: Option<&Header>, items: &[T]) -> Result<(), JsonlError> {
    let io_err = |source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    write_lines(&mut w, header, items).map_err(io_err)?;
    w.flush().map_err(io_err)
}

fn is_header(line: &str) -> Option<Header> {
    if !line.contains("\"schema\"") {
        return None;
    }
    serde_json::from_str::<Header>(line).ok()
}

/// Parses items, skipping blank lines and a leading header. When `schema` is
/// given, a header naming a different schema is an error.
pub fn read_str<T: DeserializeOwned>(
    text: &str,
    origin: &str,
    schema: Option<&str>,
) -> Result<(Option<Header>, Vec<T>), JsonlError> {
    let mut header = None;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if header.is_none() && items.is_empty() {
            if let Some(h) = is_header(line) {
                if let Some(expected) = schema {
                    if h.schema != expected {
                        return Err(JsonlError::Schema {
                            path: origin.to_string(),
                            expected: expected.to_string(),
                            found: h.schema,
                        });
                    }
                }
                header = Some(h);
                continue;
            }
        }
        let item = serde_json::from_str(line).map_err(|e| JsonlError::Parse {
            path: origin.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok((header, items))
}

pub fn read_file<T: DeserializeOwned>(
    path: &Path,
    schema: Option<&str>,
) -> Result<(Option<Header>, Vec<T>), JsonlError> {
    let origin = path.display().to_string();
    let file = File::open(path).map_err(|source| JsonlError::Io {
        path: origin.clone(),
        source,
    })?;
    let mut text = String::new();
    let mut reader = BufReader::new(file);
    loop {
        let mut line = String::new();
        let n = reader.read_line(&mut line).map_err(|source| JsonlError::Io {
            path: origin.clone(),
            source,
        })?;
        if n == 0 {
            break;
        }
        text.push_str(&line);
    }
    read_str(&text, &origin, schema)
}

pub mod schema {
    pub const SAMPLES: &str = "clot.samples";
    pub const INSTRUCTIONS: &str = "clot.instructions";
    pub const CHOICE: &str = "clot.choice_questions";
    pub const RANKING: &str = "clot.ranking_questions";
    pub const VERDICTS: &str = "clot.screen_verdicts";
    pub const OUTCOMES: &str = "clot.refinement_outcomes";
    pub const ANSWERS: &str = "clot.answers";
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        a: u32,
    }

    #[test]
    fn header_is_skipped_and_checked() {
        let mut buf = Vec::new();
        let h = Header::new("x", Some("abc"));
        write_lines(&mut buf, Some(&h), &[Row { a: 1 }, Row { a: 2 }]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let (hdr, rows): (_, Vec<Row>) = read_str(&text, "mem", Some("x")).unwrap();
        assert_eq!(hdr, Some(h));
        assert_eq!(rows, vec![Row { a: 1 }, Row { a: 2 }]);
        assert!(read_str::<Row>(&text, "mem", Some("y")).is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = read_str::<Row>("{\"a\":1}\n\n{oops}\n", "mem", None).unwrap_err();
        assert!(err.to_string().starts_with("mem:3:"), "{err}");
    }
}
