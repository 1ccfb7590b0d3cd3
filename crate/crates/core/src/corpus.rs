//! Answer-selection dataset: tokenization, stopwords and the TSV reader.
//!
//! A dataset file has one question/answer pair per line with four
//! tab-separated columns, `question_id  label  question_text  answer_text`,
//! no header, and lines for one question contiguous. Answer ids are the
//! zero-based position of the answer within its question.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Placeholder substituted for standalone number tokens.
pub const NUM_TOKEN: &str = "<num>";

const BUILTIN_STOPWORDS: &str = include_str!("stopwords.txt");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaInstance {
    pub question_id: String,
    pub answer_id: String,
    pub question_tokens: Vec<String>,
    pub answer_tokens: Vec<String>,
    pub label: u8,
}

impl QaInstance {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuestionGroup {
    pub question_id: String,
    pub instances: Vec<QaInstance>,
}

impl QuestionGroup {
    pub fn question_tokens(&self) -> &[String] {
        self.instances
            .first()
            .map(|i| i.question_tokens.as_slice())
            .unwrap_or(&[])
    }

    pub fn n_positive(&self) -> usize {
        self.instances.iter().filter(|i| i.is_positive()).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitStats {
    pub n_questions: usize,
    pub n_pairs: usize,
    pub pct_correct: f64,
}

impl fmt::Display for SplitStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:>6} {:>8} {:>6.1}",
            self.n_questions, self.n_pairs, self.pct_correct
        )
    }
}

/// A set of tokens filtered out before bag-of-words encoding and overlap
/// counting.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Stoplist(HashSet<String>);

impl Stoplist {
    /// The shipped list of English function words (`src/stopwords.txt`).
    pub fn builtin() -> Self {
        BUILTIN_STOPWORDS
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect()
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<S: Into<String>> FromIterator<S> for Stoplist {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Stoplist(iter.into_iter().map(Into::into).collect())
    }
}

fn is_number(token: &str) -> bool {
    token.chars().any(|c| c.is_ascii_digit())
        && token.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',')
}

/// Lowercases and splits on whitespace and punctuation. Punctuation is
/// dropped; a `.` or `,` between digits stays inside a number so `1,229`
/// and `3.5` remain single tokens, which are then replaced by [`NUM_TOKEN`].
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut tokens = Vec::new();
    let mut current = String::new();

    let flush = |current: &mut String, tokens: &mut Vec<String>| {
        if !current.is_empty() {
            if is_number(current) {
                tokens.push(NUM_TOKEN.to_string());
            } else {
                tokens.push(current.clone());
            }
            current.clear();
        }
    };

    let placeholder: Vec<char> = NUM_TOKEN.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if chars[i..].starts_with(&placeholder) {
            flush(&mut current, &mut tokens);
            tokens.push(NUM_TOKEN.to_string());
            i += placeholder.len();
            continue;
        }
        let c = chars[i];
        let inside_number = (c == '.' || c == ',')
            && current.ends_with(|p: char| p.is_ascii_digit())
            && is_number(&current)
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if c.is_alphanumeric() || inside_number {
            current.push(c);
        } else {
            flush(&mut current, &mut tokens);
        }
        i += 1;
    }
    flush(&mut current, &mut tokens);
    tokens
}

/// Order-preserving stopword filter.
pub fn remove_stopwords<S: AsRef<str>>(tokens: &[S], stoplist: &Stoplist) -> Vec<String> {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .filter(|t| !stoplist.contains(t))
        .map(str::to_string)
        .collect()
}

pub fn parse_dataset(path: impl AsRef<Path>) -> Result<Vec<QuestionGroup>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset_from(BufReader::new(file), &path.display().to_string())
}

pub fn parse_dataset_from<R: BufRead>(reader: R, context: &str) -> Result<Vec<QuestionGroup>> {
    let mut groups: Vec<QuestionGroup> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(context, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::parse(
                context,
                lineno,
                format!("expected 4 tab-separated columns, found {}", cols.len()),
            ));
        }
        let question_id = cols[0].trim();
        if question_id.is_empty() {
            return Err(Error::parse(context, lineno, "empty question id"));
        }
        let label = match cols[1].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::parse(context, lineno, format!("bad label {other:?}"))),
        };
        let question_tokens = tokenize(cols[2]);
        let answer_tokens = tokenize(cols[3]);
        if question_tokens.is_empty() {
            return Err(Error::parse(context, lineno, "question has no tokens"));
        }
        if answer_tokens.is_empty() {
            return Err(Error::parse(context, lineno, "answer has no tokens"));
        }

        let continues = groups
            .last()
            .is_some_and(|g| g.question_id == question_id);
        if !continues {
            if !seen.insert(question_id.to_string()) {
                return Err(Error::parse(
                    context,
                    lineno,
                    format!("question {question_id:?} reappears after other questions"),
                ));
            }
            groups.push(QuestionGroup {
                question_id: question_id.to_string(),
                instances: Vec::new(),
            });
        }
        let group = groups.last_mut().expect("group pushed above");
        if let Some(first) = group.instances.first() {
            if first.question_tokens != question_tokens {
                return Err(Error::parse(
                    context,
                    lineno,
                    format!("question {question_id:?} has differing question text"),
                ));
            }
        }
        group.instances.push(QaInstance {
            question_id: question_id.to_string(),
            answer_id: group.instances.len().to_string(),
            question_tokens,
            answer_tokens,
            label,
        });
    }
    Ok(groups)
}

/// Writes groups in the dataset TSV format, tokens joined by single spaces.
pub fn write_dataset<W: Write>(groups: &[QuestionGroup], mut out: W) -> std::io::Result<()> {
    for g in groups {
        for inst in &g.instances {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                inst.question_id,
                inst.label,
                inst.question_tokens.join(" "),
                inst.answer_tokens.join(" ")
            )?;
        }
    }
    Ok(())
}

pub fn split_stats(groups: &[QuestionGroup]) -> Result<SplitStats> {
    if groups.is_empty() {
        return Err(Error::Empty("no question groups"));
    }
    let n_pairs: usize = groups.iter().map(|g| g.instances.len()).sum();
    if n_pairs == 0 {
        return Err(Error::Empty("no question/answer pairs"));
    }
    let positives: usize = groups.iter().map(QuestionGroup::n_positive).sum();
    Ok(SplitStats {
        n_questions: groups.len(),
        n_pairs,
        pct_correct: 100.0 * positives as f64 / n_pairs as f64,
    })
}

/// All tokens of every question and answer, in file order.
pub fn corpus_tokens(groups: &[QuestionGroup]) -> impl Iterator<Item = &str> {
    groups.iter().flat_map(|g| {
        g.question_tokens()
            .iter()
            .chain(g.instances.iter().flat_map(|i| i.answer_tokens.iter()))
            .map(String::as_str)
    })
}
