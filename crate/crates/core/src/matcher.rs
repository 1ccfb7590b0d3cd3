//! Bilinear question/answer matching.
//!
//! `p(correct | q, a) = σ(qᵀ M a + b)`, trained by minimising summed
//! cross-entropy plus `(λ/2)·‖θ‖²` over every parameter of the model,
//! biases and encoder weights included.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use ndarray::{Array1, Array2};

use crate::corpus::Stoplist;
use crate::embeddings::EmbeddingTable;
use crate::encoders::{encode_unigram, BigramForward, BigramParams, SentenceVector};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_FLOOR, 1 − PROB_FLOOR]` inside logs.
pub const PROB_FLOOR: f64 = 1e-12;

const CHECKPOINT_MAGIC: &str = "anselect-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Unigram,
    Bigram,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Unigram => "unigram",
            ModelKind::Bigram => "bigram",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unigram" => Ok(ModelKind::Unigram),
            "bigram" => Ok(ModelKind::Bigram),
            other => Err(Error::Invalid(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatcherParams {
    pub m: Array2<f64>,
    pub bias: f64,
}

impl MatcherParams {
    pub fn zeros(dim: usize) -> Self {
        MatcherParams {
            m: Array2::zeros((dim, dim)),
            bias: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }
}

/// Every trainable parameter: the matcher, plus the bigram composition
/// weights when the bigram encoder is used. The same shape doubles as the
/// gradient and AdaGrad accumulator container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelTheta {
    pub matcher: MatcherParams,
    pub bigram: Option<BigramParams>,
}

impl ModelTheta {
    pub fn zeros(dim: usize, kind: ModelKind) -> Self {
        ModelTheta {
            matcher: MatcherParams::zeros(dim),
            bigram: match kind {
                ModelKind::Unigram => None,
                ModelKind::Bigram => Some(BigramParams::zeros(dim)),
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim(), self.kind())
    }

    pub fn kind(&self) -> ModelKind {
        if self.bigram.is_some() {
            ModelKind::Bigram
        } else {
            ModelKind::Unigram
        }
    }

    pub fn dim(&self) -> usize {
        self.matcher.dim()
    }

    /// Parameter blocks in canonical order: M, T_L, T_R, b_c, b.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.matcher.m.as_slice().expect("standard layout")];
        if let Some(bg) = &self.bigram {
            out.push(bg.t_left.as_slice().expect("standard layout"));
            out.push(bg.t_right.as_slice().expect("standard layout"));
            out.push(bg.bias.as_slice().expect("standard layout"));
        }
        out.push(std::slice::from_ref(&self.matcher.bias));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.matcher.m.as_slice_mut().expect("standard layout")];
        if let Some(bg) = &mut self.bigram {
            out.push(bg.t_left.as_slice_mut().expect("standard layout"));
            out.push(bg.t_right.as_slice_mut().expect("standard layout"));
            out.push(bg.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(std::slice::from_mut(&mut self.matcher.bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let n = self.param_count();
        if values.len() != n {
            return Err(Error::Dimension {
                expected: n,
                found: values.len(),
            });
        }
        let mut rest = values;
        for block in self.slices_mut() {
            let (head, tail) = rest.split_at(block.len());
            block.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Squared Frobenius norm over all parameters.
    pub fn squared_norm(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|v| v * v).sum()
    }

    pub fn same_shape(&self, other: &ModelTheta) -> bool {
        let a = self.slices();
        let b = other.slices();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelTheta) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Invalid("parameter shapes differ".into()));
        }
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Encodes a sentence with this model's encoder: bag-of-words with
    /// stopword removal, or the bigram convolution on unfiltered tokens.
    pub fn encode<S: AsRef<str>>(
        &self,
        tokens: &[S],
        embeddings: &EmbeddingTable,
        stoplist: &Stoplist,
    ) -> Result<SentenceVector> {
        match &self.bigram {
            None => encode_unigram(tokens, embeddings, stoplist),
            Some(bg) => Ok(BigramForward::new(tokens, bg, embeddings)?.output().clone()),
        }
    }

    /// Matching probability of one question/answer token pair.
    pub fn probability<S: AsRef<str>>(
        &self,
        question: &[S],
        answer: &[S],
        embeddings: &EmbeddingTable,
        stoplist: &Stoplist,
    ) -> Result<f64> {
        let q = self.encode(question, embeddings, stoplist)?;
        let a = self.encode(answer, embeddings, stoplist)?;
        score(&q, &a, &self.matcher)
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{CHECKPOINT_MAGIC} dim={} model={}", self.dim(), self.kind())?;
        let write_rows = |out: &mut W, values: &[f64], width: usize| -> std::io::Result<()> {
            for row in values.chunks(width) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
            Ok(())
        };
        let dim = self.dim();
        for block in self.slices() {
            write_rows(&mut out, block, dim)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(reader: R, context: &str) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or(Error::Empty("checkpoint file is empty"))?;
        let header = header.map_err(|e| Error::io(context, e))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::parse(context, 1, "missing anselect-v1 header"));
        }
        let mut dim = None;
        let mut kind = None;
        for f in fields {
            match f.split_once('=') {
                Some(("dim", v)) => {
                    dim = Some(v.parse::<usize>().map_err(|_| Error::parse(context, 1, "bad dim"))?)
                }
                Some(("model", v)) => kind = Some(v.parse::<ModelKind>()?),
                _ => return Err(Error::parse(context, 1, format!("unexpected header field {f:?}"))),
            }
        }
        let (dim, kind) = match (dim, kind) {
            (Some(d), Some(k)) if d > 0 => (d, k),
            _ => return Err(Error::parse(context, 1, "header needs dim>0 and model")),
        };

        let mut theta = ModelTheta::zeros(dim, kind);
        let widths: Vec<usize> = theta.slices().iter().map(|s| s.len()).collect();
        let mut values = Vec::with_capacity(theta.param_count());
        for width in widths {
            let mut remaining = width;
            while remaining > 0 {
                let (idx, line) = lines
                    .next()
                    .ok_or_else(|| Error::parse(context, 0, "checkpoint truncated"))?;
                let line = line.map_err(|e| Error::io(context, e))?;
                let row = line
                    .split_whitespace()
                    .map(|v| {
                        v.parse::<f64>()
                            .ok()
                            .filter(|x| x.is_finite())
                            .ok_or_else(|| Error::parse(context, idx + 1, format!("bad value {v:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let expected = remaining.min(dim);
                if row.len() != expected {
                    return Err(Error::parse(
                        context,
                        idx + 1,
                        format!("expected {expected} values, found {}", row.len()),
                    ));
                }
                remaining -= row.len();
                values.extend(row);
            }
        }
        if let Some((idx, Ok(extra))) = lines.next() {
            if !extra.trim().is_empty() {
                return Err(Error::parse(context, idx + 1, "trailing data after checkpoint"));
            }
        }
        theta.set_flat(&values)?;
        Ok(theta)
    }
}

/// Logistic function, stable for large |z|.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eᶻ)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Cross-entropy of label `y` under logit `z`, each log term floored at
/// `ln(PROB_FLOOR)`.
pub(crate) fn cross_entropy(z: f64, label: u8) -> f64 {
    let cap = -PROB_FLOOR.ln();
    // −ln σ(z) = softplus(−z); −ln(1 − σ(z)) = softplus(z)
    let nll = if label == 1 { softplus(-z) } else { softplus(z) };
    nll.min(cap)
}

fn bilinear(q: &SentenceVector, a: &SentenceVector, params: &MatcherParams) -> Result<f64> {
    let dim = params.dim();
    for found in [params.m.ncols(), q.dim(), a.dim()] {
        if found != dim {
            return Err(Error::Dimension { expected: dim, found });
        }
    }
    Ok(q.as_array().dot(&params.m.dot(a.as_array())) + params.bias)
}

/// `σ(qᵀ M a + b)`.
pub fn score(q: &SentenceVector, a: &SentenceVector, params: &MatcherParams) -> Result<f64> {
    Ok(sigmoid(bilinear(q, a, params)?))
}

/// An encoded pair with its label.
#[derive(Clone, Debug)]
pub struct LabeledPair {
    pub question: SentenceVector,
    pub answer: SentenceVector,
    pub label: u8,
}

/// A tokenized pair with its label.
#[derive(Clone, Copy, Debug)]
pub struct TokenPair<'a> {
    pub question: &'a [String],
    pub answer: &'a [String],
    pub label: u8,
}

fn check_label(label: u8) -> Result<()> {
    if label > 1 {
        return Err(Error::Invalid(format!("label must be 0 or 1, got {label}")));
    }
    Ok(())
}

/// Summed cross-entropy of the batch plus `(λ/2)·‖θ‖²`.
pub fn batch_loss(batch: &[LabeledPair], theta: &ModelTheta, lambda: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let mut data = 0.0;
    for pair in batch {
        check_label(pair.label)?;
        let z = bilinear(&pair.question, &pair.answer, &theta.matcher)?;
        data += cross_entropy(z, pair.label);
    }
    Ok(data + 0.5 * lambda * theta.squared_norm())
}

/// Same objective as [`batch_loss`], encoding each pair with `theta`'s
/// encoder first.
pub fn token_batch_loss(
    batch: &[TokenPair<'_>],
    theta: &ModelTheta,
    embeddings: &EmbeddingTable,
    stoplist: &Stoplist,
    lambda: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let mut data = 0.0;
    for pair in batch {
        check_label(pair.label)?;
        let q = theta.encode(pair.question, embeddings, stoplist)?;
        let a = theta.encode(pair.answer, embeddings, stoplist)?;
        data += cross_entropy(bilinear(&q, &a, &theta.matcher)?, pair.label);
    }
    Ok(data + 0.5 * lambda * theta.squared_norm())
}

/// Loss and its gradient with respect to every parameter of `theta`,
/// backpropagating through the bigram encoder when present. The
/// regularizer gradient `λθ` is added once for the whole batch.
pub fn loss_gradients(
    batch: &[TokenPair<'_>],
    theta: &ModelTheta,
    embeddings: &EmbeddingTable,
    stoplist: &Stoplist,
    lambda: f64,
) -> Result<(f64, ModelTheta)> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let mut grads = theta.zeros_like();
    let mut data = 0.0;
    let m = &theta.matcher.m;
    for pair in batch {
        check_label(pair.label)?;
        match &theta.bigram {
            None => {
                let q = encode_unigram(pair.question, embeddings, stoplist)?;
                let a = encode_unigram(pair.answer, embeddings, stoplist)?;
                let z = bilinear(&q, &a, &theta.matcher)?;
                data += cross_entropy(z, pair.label);
                let delta = sigmoid(z) - f64::from(pair.label);
                accumulate_outer(&mut grads.matcher.m, delta, q.as_array(), a.as_array());
                grads.matcher.bias += delta;
            }
            Some(bg) => {
                let fq = BigramForward::new(pair.question, bg, embeddings)?;
                let fa = BigramForward::new(pair.answer, bg, embeddings)?;
                let (q, a) = (fq.output(), fa.output());
                let z = bilinear(q, a, &theta.matcher)?;
                data += cross_entropy(z, pair.label);
                let delta = sigmoid(z) - f64::from(pair.label);
                accumulate_outer(&mut grads.matcher.m, delta, q.as_array(), a.as_array());
                grads.matcher.bias += delta;

                let dq: Array1<f64> = m.dot(a.as_array()) * delta;
                let da: Array1<f64> = m.t().dot(q.as_array()) * delta;
                let gb = grads.bigram.as_mut().expect("bigram grads match theta");
                fq.backward(dq.view(), gb)?;
                fa.backward(da.view(), gb)?;
            }
        }
    }
    if lambda != 0.0 {
        grads.add_scaled(lambda, theta)?;
    }
    Ok((data + 0.5 * lambda * theta.squared_norm(), grads))
}

fn accumulate_outer(target: &mut Array2<f64>, alpha: f64, left: &Array1<f64>, right: &Array1<f64>) {
    for (mut row, &l) in target.rows_mut().into_iter().zip(left) {
        row.scaled_add(alpha * l, right);
    }
}
