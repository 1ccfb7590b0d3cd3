//! Word-overlap features and the logistic-regression combiner.
//!
//! Three features per pair, in fixed order: the number of distinct
//! non-stopword question tokens that also occur in the answer, the same
//! overlap weighted by IDF, and the matcher probability. Ranking by either
//! count alone gives the word-count baselines.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{QaInstance, QuestionGroup, Stoplist};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::matcher::{sigmoid, ModelTheta};
use crate::trainer::predict_groups;

/// L2 strength on the combiner weights.
pub const DEFAULT_L2: f64 = 0.01;

/// Stopping threshold on the Euclidean norm of the objective gradient.
pub const GRAD_TOL: f64 = 1e-8;

const MAX_ITERATIONS: usize = 1000;
const HISTORY: usize = 10;
const COMBINER_MAGIC: &str = "anselect-combiner-v1";

pub type Features = [f64; 3];

/// Document frequencies over answer sentences; `idf(w) = ln(N / df(w))`,
/// and `ln N` for words never seen.
#[derive(Clone, Debug, PartialEq)]
pub struct IdfTable {
    n_docs: usize,
    doc_freq: HashMap<String, usize>,
}

impl IdfTable {
    pub fn from_doc_freq(n_docs: usize, doc_freq: HashMap<String, usize>) -> Result<Self> {
        if n_docs == 0 {
            return Err(Error::Empty("IDF needs at least one document"));
        }
        if let Some((w, df)) = doc_freq.iter().find(|(_, &df)| df == 0 || df > n_docs) {
            return Err(Error::Invalid(format!("document frequency {df} of {w:?} outside 1..={n_docs}")));
        }
        Ok(IdfTable { n_docs, doc_freq })
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn doc_freq(&self, token: &str) -> usize {
        self.doc_freq.get(token).copied().unwrap_or(0)
    }

    pub fn idf(&self, token: &str) -> f64 {
        let n = self.n_docs as f64;
        match self.doc_freq.get(token) {
            Some(&df) => (n / df as f64).ln(),
            None => n.ln(),
        }
    }
}

/// Answer sentences of `groups` are the documents.
pub fn build_idf(groups: &[QuestionGroup]) -> Result<IdfTable> {
    let mut doc_freq: HashMap<String, usize> = HashMap::new();
    let mut n_docs = 0;
    for inst in groups.iter().flat_map(|g| &g.instances) {
        n_docs += 1;
        let unique: HashSet<&str> = inst.answer_tokens.iter().map(String::as_str).collect();
        for t in unique {
            *doc_freq.entry(t.to_string()).or_default() += 1;
        }
    }
    if n_docs == 0 {
        return Err(Error::Empty("IDF needs at least one answer sentence"));
    }
    IdfTable::from_doc_freq(n_docs, doc_freq)
}

/// Distinct non-stopword question types found in the answer, sorted.
fn matched_types<'a, S: AsRef<str>>(q_tokens: &'a [S], a_tokens: &[S], stoplist: &Stoplist) -> Vec<&'a str> {
    let answer: HashSet<&str> = a_tokens.iter().map(AsRef::as_ref).collect();
    let mut matched: Vec<&str> = q_tokens
        .iter()
        .map(AsRef::as_ref)
        .filter(|t| !stoplist.contains(t) && answer.contains(t))
        .collect();
    matched.sort_unstable();
    matched.dedup();
    matched
}

pub fn cooccurrence_count<S: AsRef<str>>(q_tokens: &[S], a_tokens: &[S], stoplist: &Stoplist) -> usize {
    matched_types(q_tokens, a_tokens, stoplist).len()
}

pub fn idf_weighted_count<S: AsRef<str>>(
    q_tokens: &[S],
    a_tokens: &[S],
    stoplist: &Stoplist,
    idf: &IdfTable,
) -> f64 {
    matched_types(q_tokens, a_tokens, stoplist)
        .into_iter()
        .map(|t| idf.idf(t))
        .sum()
}

fn count_features(instance: &QaInstance, stoplist: &Stoplist, idf: &IdfTable, prob: f64) -> Features {
    let q = &instance.question_tokens;
    let a = &instance.answer_tokens;
    [
        cooccurrence_count(q, a, stoplist) as f64,
        idf_weighted_count(q, a, stoplist, idf),
        prob,
    ]
}

/// `[count, idf_count, matcher probability]`.
pub fn extract_features(
    instance: &QaInstance,
    theta: &ModelTheta,
    embeddings: &EmbeddingTable,
    idf: &IdfTable,
    stoplist: &Stoplist,
) -> Result<Features> {
    let prob = theta.probability(&instance.question_tokens, &instance.answer_tokens, embeddings, stoplist)?;
    Ok(count_features(instance, stoplist, idf, prob))
}

/// Features for every instance, grouped like the input.
pub fn group_features(
    groups: &[QuestionGroup],
    theta: &ModelTheta,
    embeddings: &EmbeddingTable,
    idf: &IdfTable,
    stoplist: &Stoplist,
) -> Result<Vec<Vec<Features>>> {
    let probs = predict_groups(groups, theta, embeddings, stoplist)?;
    Ok(groups
        .iter()
        .zip(probs)
        .map(|(g, p)| {
            g.instances
                .iter()
                .zip(p)
                .map(|(inst, prob)| count_features(inst, stoplist, idf, prob))
                .collect()
        })
        .collect())
}

/// `question_id  answer_id  count  idf_count  model_prob  label` rows.
pub fn features_tsv(groups: &[QuestionGroup], features: &[Vec<Features>]) -> String {
    let mut s = String::from("question_id\tanswer_id\tcount\tidf_count\tmodel_prob\tlabel\n");
    for (g, fs) in groups.iter().zip(features) {
        for (inst, f) in g.instances.iter().zip(fs) {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                inst.question_id, inst.answer_id, f[0], f[1], f[2], inst.label
            );
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct CombinerModel {
    pub weights: [f64; 3],
    pub bias: f64,
    pub l2: f64,
}

impl CombinerModel {
    pub fn predict(&self, features: &Features) -> f64 {
        sigmoid(dot3(&self.weights, features) + self.bias)
    }

    /// Writes the model with the IDF table it was trained with.
    pub fn write_to<W: Write>(&self, idf: &IdfTable, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{COMBINER_MAGIC}")?;
        writeln!(
            out,
            "weights {:e} {:e} {:e}",
            self.weights[0], self.weights[1], self.weights[2]
        )?;
        writeln!(out, "bias {:e}", self.bias)?;
        writeln!(out, "l2 {:e}", self.l2)?;
        writeln!(out, "idf_docs {}", idf.n_docs)?;
        let mut entries: Vec<(&String, &usize)> = idf.doc_freq.iter().collect();
        entries.sort();
        for (token, df) in entries {
            writeln!(out, "df {token} {df}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(reader: R, context: &str) -> Result<(CombinerModel, IdfTable)> {
        let mut weights = None;
        let mut bias = None;
        let mut l2 = None;
        let mut n_docs = None;
        let mut doc_freq = HashMap::new();
        let num = |v: &str, line: usize| -> Result<f64> {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::parse(context, line, format!("bad number {v:?}")))
        };
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(context, e))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                [] => {}
                [m] if lineno == 1 && *m == COMBINER_MAGIC => {}
                _ if lineno == 1 => return Err(Error::parse(context, 1, "missing combiner header")),
                ["weights", a, b, c] => weights = Some([num(a, lineno)?, num(b, lineno)?, num(c, lineno)?]),
                ["bias", v] => bias = Some(num(v, lineno)?),
                ["l2", v] => l2 = Some(num(v, lineno)?),
                ["idf_docs", v] => {
                    n_docs = Some(v.parse::<usize>().map_err(|_| Error::parse(context, lineno, "bad idf_docs"))?)
                }
                ["df", token, v] => {
                    let df = v.parse::<usize>().map_err(|_| Error::parse(context, lineno, "bad df"))?;
                    doc_freq.insert(token.to_string(), df);
                }
                _ => return Err(Error::parse(context, lineno, format!("unexpected line {line:?}"))),
            }
        }
        match (weights, bias, l2, n_docs) {
            (Some(weights), Some(bias), Some(l2), Some(n)) => Ok((
                CombinerModel { weights, bias, l2 },
                IdfTable::from_doc_freq(n, doc_freq)?,
            )),
            _ => Err(Error::parse(context, 0, "incomplete combiner file")),
        }
    }
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Mean cross-entropy plus `(l2/2)·‖w‖²` and its gradient, for the packed
/// parameter vector `[w1, w2, w3, bias]`.
pub fn combiner_objective(params: &[f64; 4], features: &[Features], labels: &[u8], l2: f64) -> (f64, [f64; 4]) {
    let w = [params[0], params[1], params[2]];
    let n = features.len() as f64;
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for (x, &y) in features.iter().zip(labels) {
        let z = dot3(&w, x) + params[3];
        // softplus(z) − y·z
        let sp = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
        loss += sp - f64::from(y) * z;
        let d = sigmoid(z) - f64::from(y);
        for k in 0..3 {
            grad[k] += d * x[k];
        }
        grad[3] += d;
    }
    loss /= n;
    for g in grad.iter_mut() {
        *g /= n;
    }
    loss += 0.5 * l2 * (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]);
    for k in 0..3 {
        grad[k] += l2 * w[k];
    }
    (loss, grad)
}

fn dot4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm4(a: &[f64; 4]) -> f64 {
    dot4(a, a).sqrt()
}

/// Limited-memory BFGS with a backtracking Armijo line search.
fn lbfgs<F>(mut x: [f64; 4], objective: F) -> Result<([f64; 4], f64)>
where
    F: Fn(&[f64; 4]) -> (f64, [f64; 4]),
{
    let (mut f, mut g) = objective(&x);
    let mut history: VecDeque<([f64; 4], [f64; 4], f64)> = VecDeque::with_capacity(HISTORY);

    for _ in 0..MAX_ITERATIONS {
        if norm4(&g) < GRAD_TOL {
            return Ok((x, f));
        }
        // two-loop recursion
        let mut q = g;
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot4(s, &q);
            for k in 0..4 {
                q[k] -= a * y[k];
            }
            alphas.push(a);
        }
        let gamma = history
            .back()
            .map_or(1.0 / norm4(&g).max(1.0), |(s, y, _)| dot4(s, y) / dot4(y, y));
        let mut dir = q.map(|v| v * gamma);
        for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot4(y, &dir);
            for k in 0..4 {
                dir[k] += s[k] * (a - b);
            }
        }
        dir = dir.map(|v| -v);
        let mut slope = dot4(&g, &dir);
        if slope >= 0.0 {
            history.clear();
            dir = g.map(|v| -v);
            slope = -dot4(&g, &g);
        }

        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-20 {
            let trial: [f64; 4] = std::array::from_fn(|k| x[k] + step * dir[k]);
            let (ft, gt) = objective(&trial);
            // The second clause accepts steps in the round-off regime where
            // f no longer resolves the decrease but the gradient still shrinks.
            if ft.is_finite() && (ft <= f + 1e-4 * step * slope || (ft <= f && norm4(&gt) < norm4(&g))) {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            return Err(Error::NotConverged {
                iterations: MAX_ITERATIONS,
                grad_norm: norm4(&g),
            });
        };
        let s: [f64; 4] = std::array::from_fn(|k| x_new[k] - x[k]);
        let y: [f64; 4] = std::array::from_fn(|k| g_new[k] - g[k]);
        let sy = dot4(&s, &y);
        if sy > 1e-300 {
            if history.len() == HISTORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        f = f_new;
        g = g_new;
    }
    if norm4(&g) < GRAD_TOL {
        return Ok((x, f));
    }
    Err(Error::NotConverged {
        iterations: MAX_ITERATIONS,
        grad_norm: norm4(&g),
    })
}

/// Fits the combiner from the origin.
pub fn train_combiner(features: &[Features], labels: &[u8], l2: f64) -> Result<CombinerModel> {
    train_combiner_from(features, labels, l2, [0.0; 4]).map(|(m, _)| m)
}

/// Fits the combiner from `start = [w1, w2, w3, bias]`, returning the model
/// and its final objective value.
pub fn train_combiner_from(
    features: &[Features],
    labels: &[u8],
    l2: f64,
    start: [f64; 4],
) -> Result<(CombinerModel, f64)> {
    if features.len() != labels.len() {
        return Err(Error::Dimension {
            expected: features.len(),
            found: labels.len(),
        });
    }
    if !(l2.is_finite() && l2 >= 0.0) {
        return Err(Error::Invalid(format!("l2 must be non-negative, got {l2}")));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Invalid("labels must be 0 or 1".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite feature value".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Invalid("combiner training needs both classes".into()));
    }
    let (x, f) = lbfgs(start, |p| combiner_objective(p, features, labels, l2))?;
    Ok((
        CombinerModel {
            weights: [x[0], x[1], x[2]],
            bias: x[3],
            l2,
        },
        f,
    ))
}

/// Combined probability `σ(wᵀf + b)` for one instance.
pub fn predict_combined(
    instance: &QaInstance,
    theta: &ModelTheta,
    combiner: &CombinerModel,
    embeddings: &EmbeddingTable,
    idf: &IdfTable,
    stoplist: &Stoplist,
) -> Result<f64> {
    Ok(combiner.predict(&extract_features(instance, theta, embeddings, idf, stoplist)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Random,
    Count,
    WeightedCount,
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Baseline::Random),
            "count" => Ok(Baseline::Count),
            "wgt-count" => Ok(Baseline::WeightedCount),
            other => Err(Error::Invalid(format!("unknown baseline {other:?}"))),
        }
    }
}

/// Scores of a baseline for every instance. Random scores are uniform in
/// [0, 1) from a generator seeded with `seed`.
pub fn baseline_scores(
    kind: Baseline,
    groups: &[QuestionGroup],
    idf: &IdfTable,
    stoplist: &Stoplist,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups
        .iter()
        .map(|g| {
            g.instances
                .iter()
                .map(|inst| {
                    let (q, a) = (&inst.question_tokens, &inst.answer_tokens);
                    match kind {
                        Baseline::Random => rng.random::<f64>(),
                        Baseline::Count => cooccurrence_count(q, a, stoplist) as f64,
                        Baseline::WeightedCount => idf_weighted_count(q, a, stoplist, idf),
                    }
                })
                .collect()
        })
        .collect()
}
