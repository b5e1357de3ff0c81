//! FASTA documents handed from sequence selection to structure prediction.

use thiserror::Error;

use crate::domain::{validate_residues, CandidateSequence, DomainError};

pub const LINE_WIDTH: usize = 60;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FastaError {
    #[error("nothing to write: empty selection")]
    Empty,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Writes `>id` headers followed by residue lines wrapped at 60 columns.
pub fn compile_fasta(selected: &[CandidateSequence]) -> Result<String, FastaError> {
    if selected.is_empty() {
        return Err(FastaError::Empty);
    }
    let mut doc = String::new();
    for seq in selected {
        doc.push('>');
        doc.push_str(seq.id.as_str());
        doc.push('\n');
        for chunk in seq.residues.as_bytes().chunks(LINE_WIDTH) {
            // residues are ASCII by invariant
            doc.push_str(std::str::from_utf8(chunk).unwrap_or_default());
            doc.push('\n');
        }
    }
    Ok(doc)
}

/// Parses `(id, residues)` records in document order.
pub fn parse_fasta(doc: &str) -> Result<Vec<(String, String)>, FastaError> {
    let mut records: Vec<(String, String, usize)> = Vec::new();
    for (idx, raw) in doc.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            let id = header.split_whitespace().next().unwrap_or_default();
            if id.is_empty() {
                return Err(FastaError::Parse {
                    line: line_no,
                    message: "empty header".into(),
                });
            }
            if let Some((prev, body, at)) = records.last() {
                if body.is_empty() {
                    return Err(empty_body(prev, *at));
                }
            }
            records.push((id.to_owned(), String::new(), line_no));
            continue;
        }
        let Some((_, body, _)) = records.last_mut() else {
            return Err(FastaError::Parse {
                line: line_no,
                message: "sequence data before first header".into(),
            });
        };
        if let Err(DomainError::InvalidResidue { residue, position }) = validate_residues(line) {
            return Err(FastaError::Parse {
                line: line_no,
                message: format!("illegal residue {residue:?} at column {}", position + 1),
            });
        }
        body.push_str(line);
    }
    if let Some((prev, body, at)) = records.last() {
        if body.is_empty() {
            return Err(empty_body(prev, *at));
        }
    }
    Ok(records.into_iter().map(|(id, body, _)| (id, body)).collect())
}

fn empty_body(id: &str, line: usize) -> FastaError {
    FastaError::Parse {
        line,
        message: format!("record {id} has no sequence"),
    }
}
