//! Frame JSON Lines: one frame object per line.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::Frame;

#[derive(Debug, Error)]
pub enum FrameFileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: feature dimension {got} differs from {expected} in earlier frames")]
    FeatureDim {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: empty frame_id")]
    EmptyId { line: usize },
}

impl FrameFileError {
    fn io(path: &Path, source: io::Error) -> Self {
        FrameFileError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Reads frames, checking that all non-empty proposal sets share one
/// feature dimension.
pub fn read_frames<R: Read>(reader: R) -> Result<Vec<Frame>, FrameFileError> {
    let mut frames = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| FrameFileError::Io {
            path: "<reader>".into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let frame: Frame = serde_json::from_str(&line).map_err(|source| FrameFileError::Json {
            line: line_no,
            source,
        })?;
        if frame.frame_id.is_empty() {
            return Err(FrameFileError::EmptyId { line: line_no });
        }
        if !frame.proposals.is_empty() {
            let d = frame.proposals.feature_dim();
            match dim {
                Some(expected) if expected != d => {
                    return Err(FrameFileError::FeatureDim {
                        line: line_no,
                        expected,
                        got: d,
                    })
                }
                _ => dim = Some(d),
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

pub fn write_frames<W: Write>(mut writer: W, frames: &[Frame]) -> io::Result<()> {
    for f in frames {
        serde_json::to_writer(&mut writer, f)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn load_frames(path: &Path) -> Result<Vec<Frame>, FrameFileError> {
    let file = fs::File::open(path).map_err(|e| FrameFileError::io(path, e))?;
    read_frames(file)
}

/// Writes `frames` to `path` atomically.
pub fn save_frames(frames: &[Frame], path: &Path) -> Result<(), FrameFileError> {
    write_atomic(path, |w| write_frames(w, frames)).map_err(|e| FrameFileError::io(path, e))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic<F>(path: &Path, body: F) -> io::Result<()>
where
    F: FnOnce(&mut io::BufWriter<&mut tempfile::NamedTempFile>) -> io::Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = io::BufWriter::new(&mut tmp);
        body(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
