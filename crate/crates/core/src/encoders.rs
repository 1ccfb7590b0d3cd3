//! Sentence encoders: a length-normalised bag of word vectors, and a
//! one-layer bigram convolution with tanh activation and average pooling.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use crate::corpus::Stoplist;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};

/// A fixed-length sentence representation in embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceVector(Array1<f64>);

impl SentenceVector {
    pub fn new(values: Array1<f64>) -> Self {
        SentenceVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }
}

impl From<Vec<f64>> for SentenceVector {
    fn from(v: Vec<f64>) -> Self {
        SentenceVector(Array1::from(v))
    }
}

/// Composition weights of the bigram encoder. Also used as the gradient
/// container for those weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BigramParams {
    /// Applied to the left word of each bigram.
    pub t_left: Array2<f64>,
    /// Applied to the right word of each bigram.
    pub t_right: Array2<f64>,
    pub bias: Array1<f64>,
}

impl BigramParams {
    pub fn zeros(dim: usize) -> Self {
        BigramParams {
            t_left: Array2::zeros((dim, dim)),
            t_right: Array2::zeros((dim, dim)),
            bias: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn check(&self, dim: usize) -> Result<()> {
        for found in [
            self.t_left.nrows(),
            self.t_left.ncols(),
            self.t_right.nrows(),
            self.t_right.ncols(),
            self.bias.len(),
        ] {
            if found != dim {
                return Err(Error::Dimension { expected: dim, found });
            }
        }
        Ok(())
    }
}

/// Bag-of-words encoding: stopwords are dropped and the remaining word
/// vectors averaged. A sentence made only of stopwords is averaged
/// unfiltered.
///
/// The sum runs over distinct tokens in sorted order, weighted by their
/// counts, so any permutation of the input gives a bitwise-identical
/// vector.
pub fn encode_unigram<S: AsRef<str>>(
    tokens: &[S],
    table: &EmbeddingTable,
    stoplist: &Stoplist,
) -> Result<SentenceVector> {
    if tokens.is_empty() {
        return Err(Error::Empty("cannot encode an empty sentence"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in tokens.iter().map(AsRef::as_ref).filter(|t| !stoplist.contains(t)) {
        *counts.entry(t).or_default() += 1;
    }
    if counts.is_empty() {
        for t in tokens {
            *counts.entry(t.as_ref()).or_default() += 1;
        }
    }
    let n: usize = counts.values().sum();
    let mut sum = Array1::zeros(table.dim());
    for (token, count) in counts {
        sum.scaled_add(count as f64, &table.lookup(token));
    }
    Ok(SentenceVector(sum / n as f64))
}

/// Word vectors of a sentence as rows, right-padded with the unknown vector
/// when the sentence has a single token.
fn word_matrix<S: AsRef<str>>(tokens: &[S], table: &EmbeddingTable) -> Result<Array2<f64>> {
    if tokens.is_empty() {
        return Err(Error::Empty("cannot encode an empty sentence"));
    }
    let rows = tokens.len().max(2);
    let mut words = Array2::zeros((rows, table.dim()));
    for (mut row, t) in words.rows_mut().into_iter().zip(tokens) {
        row.assign(&table.lookup(t.as_ref()));
    }
    if tokens.len() == 1 {
        words.row_mut(1).assign(&table.unknown_vector());
    }
    Ok(words)
}

/// Intermediate values of one bigram forward pass, kept for backprop.
#[derive(Clone, Debug)]
pub struct BigramForward {
    words: Array2<f64>,
    /// tanh activations, one row per bigram.
    features: Array2<f64>,
    output: SentenceVector,
}

impl BigramForward {
    pub fn new<S: AsRef<str>>(
        tokens: &[S],
        params: &BigramParams,
        table: &EmbeddingTable,
    ) -> Result<Self> {
        params.check(table.dim())?;
        let words = word_matrix(tokens, table)?;
        let n = words.nrows();
        let left = words.slice(s![..n - 1, ..]);
        let right = words.slice(s![1.., ..]);
        let mut pre = left.dot(&params.t_left.t()) + right.dot(&params.t_right.t());
        pre += &params.bias;
        let features = pre.mapv_into(f64::tanh);
        let output = features
            .mean_axis(Axis(0))
            .expect("at least one bigram");
        Ok(BigramForward {
            words,
            features,
            output: SentenceVector(output),
        })
    }

    pub fn output(&self) -> &SentenceVector {
        &self.output
    }

    /// Per-bigram activations before pooling, one row per bigram.
    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    /// Adds the gradient of `upstream · output` with respect to the
    /// parameters into `grads`.
    pub fn backward(&self, upstream: ArrayView1<f64>, grads: &mut BigramParams) -> Result<()> {
        let dim = self.output.dim();
        if upstream.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                found: upstream.len(),
            });
        }
        grads.check(dim)?;
        let n = self.words.nrows();
        let scale = 1.0 / (n - 1) as f64;
        // d(pre-activation) = upstream ⊙ (1 − tanh²) / (n − 1)
        let mut delta = self.features.mapv(|c| (1.0 - c * c) * scale);
        delta *= &upstream;
        let left = self.words.slice(s![..n - 1, ..]);
        let right = self.words.slice(s![1.., ..]);
        grads.t_left += &delta.t().dot(&left);
        grads.t_right += &delta.t().dot(&right);
        grads.bias += &delta.sum_axis(Axis(0));
        Ok(())
    }
}

/// Bigram convolution: each adjacent word pair `(x_i, x_{i+1})` maps to
/// `tanh(T_L x_i + T_R x_{i+1} + b)` and the sentence vector is the mean
/// over all pairs. Stopwords are not removed.
pub fn encode_bigram<S: AsRef<str>>(
    tokens: &[S],
    params: &BigramParams,
    table: &EmbeddingTable,
) -> Result<SentenceVector> {
    Ok(BigramForward::new(tokens, params, table)?.output)
}

/// Gradients of `upstream · encode_bigram(tokens)` with respect to the
/// bigram parameters.
pub fn encode_bigram_backward<S: AsRef<str>>(
    tokens: &[S],
    params: &BigramParams,
    table: &EmbeddingTable,
    upstream: ArrayView1<f64>,
) -> Result<BigramParams> {
    let forward = BigramForward::new(tokens, params, table)?;
    let mut grads = BigramParams::zeros(params.dim());
    forward.backward(upstream, &mut grads)?;
    Ok(grads)
}
