//! Ranking metrics (MAP, MRR) and trec_eval run/qrels files.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Orders ids numerically when both are integers, lexicographically
/// otherwise.
pub fn compare_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedEntry {
    pub answer_id: String,
    pub score: f64,
    pub label: u8,
}

/// Candidates of one question sorted by descending score, ties by
/// ascending answer id.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    question_id: String,
    entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn new(question_id: impl Into<String>, mut entries: Vec<RankedEntry>) -> Self {
        entries.sort_by(|x, y| {
            y.score
                .total_cmp(&x.score)
                .then_with(|| compare_ids(&x.answer_id, &y.answer_id))
        });
        RankedList {
            question_id: question_id.into(),
            entries,
        }
    }

    pub fn question_id(&self) -> &str {
        &self.question_id
    }

    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn labels(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn has_positive(&self) -> bool {
        self.entries.iter().any(|e| e.label == 1)
    }
}

/// Mean of precision@rank over the ranks of every positive.
pub fn average_precision(ranked_labels: &[u8]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &l) in ranked_labels.iter().enumerate() {
        if l == 1 {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::Invalid("average precision needs a positive label".into()));
    }
    Ok(sum / hits as f64)
}

pub fn reciprocal_rank(ranked_labels: &[u8]) -> Result<f64> {
    ranked_labels
        .iter()
        .position(|&l| l == 1)
        .map(|i| 1.0 / (i + 1) as f64)
        .ok_or_else(|| Error::Invalid("reciprocal rank needs a positive label".into()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub map: f64,
    pub mrr: f64,
    /// Questions with at least one positive; the others are left out of
    /// both means.
    pub n_scored: usize,
}

impl std::fmt::Display for Evaluation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "MAP {:.4}  MRR {:.4}  (n={})", self.map, self.mrr, self.n_scored)
    }
}

pub fn evaluate(rankings: &[RankedList]) -> Result<Evaluation> {
    if rankings.is_empty() {
        return Err(Error::Empty("no rankings to evaluate"));
    }
    let mut ap_sum = 0.0;
    let mut rr_sum = 0.0;
    let mut n = 0usize;
    for r in rankings.iter().filter(|r| r.has_positive()) {
        let labels = r.labels();
        ap_sum += average_precision(&labels)?;
        rr_sum += reciprocal_rank(&labels)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Invalid("no question has a positive answer".into()));
    }
    Ok(Evaluation {
        map: ap_sum / n as f64,
        mrr: rr_sum / n as f64,
        n_scored: n,
    })
}

/// Run and qrels file contents in trec_eval format.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrecFiles {
    pub run: String,
    pub qrels: String,
}

/// Run lines are `qid Q0 answer_id rank score run_id` with 1-based rank;
/// qrels lines are `qid 0 answer_id label`. Both are ordered by question id
/// then rank.
pub fn export_trec(rankings: &[RankedList], run_id: &str) -> TrecFiles {
    let mut order: Vec<&RankedList> = rankings.iter().collect();
    order.sort_by(|a, b| compare_ids(&a.question_id, &b.question_id));
    let mut run = String::new();
    let mut qrels = String::new();
    for r in order {
        for (i, e) in r.entries.iter().enumerate() {
            let _ = writeln!(
                run,
                "{} Q0 {} {} {:e} {}",
                r.question_id,
                e.answer_id,
                i + 1,
                e.score,
                run_id
            );
            let _ = writeln!(qrels, "{} 0 {} {}", r.question_id, e.answer_id, e.label);
        }
    }
    TrecFiles { run, qrels }
}

/// Rebuilds rankings from run and qrels text, ordering each question by the
/// run file's rank column. Run entries missing from the qrels count as
/// non-relevant.
pub fn parse_trec(run: &str, qrels: &str) -> Result<Vec<RankedList>> {
    let mut labels: HashMap<(String, String), u8> = HashMap::new();
    for (i, line) in qrels.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(Error::parse("qrels", i + 1, "expected 4 fields"));
        }
        let label = match f[3] {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::parse("qrels", i + 1, format!("bad label {other:?}"))),
        };
        labels.insert((f[0].to_string(), f[2].to_string()), label);
    }

    let mut by_question: Vec<(String, Vec<(usize, RankedEntry)>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, line) in run.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(Error::parse("run", i + 1, "expected 6 fields"));
        }
        let rank: usize = f[3]
            .parse()
            .map_err(|_| Error::parse("run", i + 1, "bad rank"))?;
        let score: f64 = f[4]
            .parse()
            .map_err(|_| Error::parse("run", i + 1, "bad score"))?;
        let label = labels
            .get(&(f[0].to_string(), f[2].to_string()))
            .copied()
            .unwrap_or(0);
        let slot = *index.entry(f[0].to_string()).or_insert_with(|| {
            by_question.push((f[0].to_string(), Vec::new()));
            by_question.len() - 1
        });
        by_question[slot].1.push((
            rank,
            RankedEntry {
                answer_id: f[2].to_string(),
                score,
                label,
            },
        ));
    }
    Ok(by_question
        .into_iter()
        .map(|(qid, mut entries)| {
            entries.sort_by_key(|(rank, _)| *rank);
            RankedList {
                question_id: qid,
                entries: entries.into_iter().map(|(_, e)| e).collect(),
            }
        })
        .collect())
}
