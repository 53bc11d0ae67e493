//! OTSL-lite table grammar.
//!
//! ```text
//! table := row+ EOS?
//! row   := cell+ NL
//! cell  := FCEL word | ECEL
//! ```
//! Every row must carry the same number of cells.

use crate::corpus::{TokenId, Vocabulary};

/// Parsed table: `None` marks an empty (ECEL) cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub rows: Vec<Vec<Option<TokenId>>>,
}

impl Table {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Serializes back to OTSL-lite tokens (without EOS).
    pub fn to_tokens(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        let mut out = Vec::new();
        for row in &self.rows {
            for cell in row {
                match cell {
                    Some(w) => {
                        out.push(vocab.fcel);
                        out.push(*w);
                    }
                    None => out.push(vocab.ecel),
                }
            }
            out.push(vocab.nl);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("empty table")]
    Empty,
    #[error("unexpected token at {0}")]
    Unexpected(usize),
    #[error("FCEL without content at {0}")]
    MissingContent(usize),
    #[error("row {row} has {got} cells, expected {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("row without cells at {0}")]
    EmptyRow(usize),
    #[error("unterminated row")]
    Unterminated,
    #[error("tokens after EOS")]
    TrailingTokens,
}

/// Parses an OTSL-lite token stream. A single trailing EOS is accepted.
pub fn parse(tokens: &[TokenId], vocab: &Vocabulary) -> Result<Table, ParseError> {
    let body = match tokens.iter().position(|&t| t == vocab.eos) {
        Some(p) if p + 1 == tokens.len() => &tokens[..p],
        Some(_) => return Err(ParseError::TrailingTokens),
        None => tokens,
    };
    if body.is_empty() {
        return Err(ParseError::Empty);
    }
    let mut rows: Vec<Vec<Option<TokenId>>> = Vec::new();
    let mut current = Vec::new();
    let mut i = 0;
    while i < body.len() {
        let t = body[i];
        if t == vocab.fcel {
            match body.get(i + 1) {
                Some(&w) if vocab.is_word(w) => {
                    current.push(Some(w));
                    i += 2;
                }
                _ => return Err(ParseError::MissingContent(i)),
            }
        } else if t == vocab.ecel {
            current.push(None);
            i += 1;
        } else if t == vocab.nl {
            if current.is_empty() {
                return Err(ParseError::EmptyRow(i));
            }
            if let Some(first) = rows.first() {
                if first.len() != current.len() {
                    return Err(ParseError::Ragged {
                        row: rows.len(),
                        got: current.len(),
                        expected: first.len(),
                    });
                }
            }
            rows.push(std::mem::take(&mut current));
            i += 1;
        } else {
            return Err(ParseError::Unexpected(i));
        }
    }
    if !current.is_empty() {
        return Err(ParseError::Unterminated);
    }
    Ok(Table { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, VocabConfig};

    #[test]
    fn parses_and_reserializes() {
        let v = build_vocabulary(&VocabConfig::default()).unwrap();
        let a = v.id("a").unwrap();
        let b = v.id("b").unwrap();
        let toks = vec![v.fcel, a, v.ecel, v.nl, v.fcel, b, v.fcel, a, v.nl, v.eos];
        let t = parse(&toks, &v).unwrap();
        assert_eq!(t.n_rows(), 2);
        assert_eq!(t.n_cols(), 2);
        assert_eq!(t.rows[0], vec![Some(a), None]);
        assert_eq!(t.to_tokens(&v), toks[..toks.len() - 1].to_vec());
    }

    #[test]
    fn rejects_malformed() {
        let v = build_vocabulary(&VocabConfig::default()).unwrap();
        let a = v.id("a").unwrap();
        assert_eq!(parse(&[], &v), Err(ParseError::Empty));
        assert!(matches!(
            parse(&[v.fcel, a, v.nl, v.fcel, a, v.ecel, v.nl], &v),
            Err(ParseError::Ragged { .. })
        ));
        assert!(matches!(parse(&[v.fcel, v.nl], &v), Err(ParseError::MissingContent(0))));
        assert_eq!(parse(&[v.fcel, a], &v), Err(ParseError::Unterminated));
        assert_eq!(parse(&[v.nl], &v), Err(ParseError::EmptyRow(0)));
        assert_eq!(parse(&[v.fcel, a, v.nl, v.eos, a], &v), Err(ParseError::TrailingTokens));
    }
}
