//! Fixed, pre-trained word embeddings.
//!
//! The on-disk format is the common plain text layout for word vectors:
//! one entry per line, the token followed by `dim`
//! space-separated decimal values, no header. A row whose token is
//! [`UNKNOWN_TOKEN`] supplies the fallback vector for out-of-vocabulary
//! tokens; when the file has no such row the fallback is the mean of all
//! stored vectors.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Reserved token carrying the out-of-vocabulary vector.
pub const UNKNOWN_TOKEN: &str = "*UNKNOWN*";

#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    vocab: HashMap<String, usize>,
    tokens: Vec<String>,
    vectors: Array2<f64>,
    unknown: Array1<f64>,
}

/// Out-of-vocabulary statistics over the distinct tokens of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Coverage {
    pub oov_fraction: f64,
    /// Sorted lexicographically.
    pub oov_types: Vec<String>,
    pub n_types: usize,
}

impl EmbeddingTable {
    /// Builds a table from `(token, vector)` rows. `unknown` overrides the
    /// fallback vector; otherwise the mean of all rows is used.
    pub fn from_rows<I>(rows: I, unknown: Option<Vec<f64>>) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut tokens = Vec::new();
        let mut flat = Vec::new();
        let mut dim = None;
        for (row, (token, values)) in rows.into_iter().enumerate() {
            let expected = *dim.get_or_insert(values.len());
            if expected == 0 {
                return Err(Error::Invalid("embedding dimension must be positive".into()));
            }
            if values.len() != expected {
                return Err(Error::parse(
                    "embeddings",
                    row + 1,
                    format!("expected {expected} values, found {}", values.len()),
                ));
            }
            if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
                return Err(Error::parse("embeddings", row + 1, format!("non-finite value {bad}")));
            }
            tokens.push(token);
            flat.extend(values);
        }
        let dim = match (dim, &unknown) {
            (Some(d), _) => d,
            (None, Some(u)) if !u.is_empty() => u.len(),
            _ => return Err(Error::Empty("embedding table has no rows")),
        };
        let vectors = Array2::from_shape_vec((tokens.len(), dim), flat)
            .expect("row lengths were checked against dim");

        let unknown = match unknown {
            Some(u) if u.len() != dim => {
                return Err(Error::Dimension {
                    expected: dim,
                    found: u.len(),
                })
            }
            Some(u) => Array1::from(u),
            None => vectors
                .mean_axis(Axis(0))
                .ok_or(Error::Empty("embedding table has no rows"))?,
        };

        let mut vocab = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if vocab.insert(t.clone(), i).is_some() {
                return Err(Error::parse("embeddings", i + 1, format!("duplicate token {t:?}")));
            }
        }
        Ok(EmbeddingTable {
            vocab,
            tokens,
            vectors,
            unknown,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file), &path.display().to_string())
    }

    /// Parses the text format. `context` names the source in error messages.
    pub fn from_reader<R: BufRead>(reader: R, context: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut unknown = None;
        let mut dim: Option<usize> = None;
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::io(context, e))?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let token = fields.next().expect("non-blank line has a field");
            let values = fields
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::parse(context, lineno, format!("not a finite number: {f:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            let expected = *dim.get_or_insert(values.len());
            if values.is_empty() {
                return Err(Error::parse(context, lineno, "token has no vector values"));
            }
            if values.len() != expected {
                return Err(Error::parse(
                    context,
                    lineno,
                    format!("expected {expected} values, found {}", values.len()),
                ));
            }
            if token == UNKNOWN_TOKEN {
                unknown = Some(values);
            } else {
                rows.push((token.to_string(), values));
            }
        }
        if rows.is_empty() && unknown.is_none() {
            return Err(Error::Empty("embedding file contains no vectors"));
        }
        Self::from_rows(rows, unknown)
    }

    /// Writes the table in the same text format it is loaded from, including
    /// the fallback row.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let write_row = |out: &mut W, token: &str, row: ArrayView1<f64>| -> std::io::Result<()> {
            write!(out, "{token}")?;
            for v in row {
                write!(out, " {v}")?;
            }
            writeln!(out)
        };
        for (token, row) in self.tokens.iter().zip(self.vectors.rows()) {
            write_row(&mut out, token, row)?;
        }
        write_row(&mut out, UNKNOWN_TOKEN, self.unknown.view())
    }

    pub fn dim(&self) -> usize {
        self.unknown.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vocab.contains_key(token)
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.vocab.get(token).copied()
    }

    /// Vector for `token`, or the shared fallback when it is not in the
    /// vocabulary. Never fails.
    pub fn lookup(&self, token: &str) -> ArrayView1<'_, f64> {
        match self.vocab.get(token) {
            Some(&i) => self.vectors.row(i),
            None => self.unknown.view(),
        }
    }

    pub fn unknown_vector(&self) -> ArrayView1<'_, f64> {
        self.unknown.view()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Fraction of distinct corpus tokens missing from the vocabulary.
    pub fn coverage_report<'a, I>(&self, corpus: I) -> Result<Coverage>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let types: BTreeSet<&str> = corpus.into_iter().collect();
        if types.is_empty() {
            return Err(Error::Empty("coverage corpus"));
        }
        let oov_types: Vec<String> = types
            .iter()
            .filter(|t| !self.contains(t))
            .map(|t| t.to_string())
            .collect();
        Ok(Coverage {
            oov_fraction: oov_types.len() as f64 / types.len() as f64,
            n_types: types.len(),
            oov_types,
        })
    }
}
