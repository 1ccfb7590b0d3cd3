//! Parameter initialisation, AdaGrad training and dev-MAP grid search.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{QuestionGroup, Stoplist};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::matcher::{cross_entropy, loss_gradients, ModelKind, ModelTheta, TokenPair};
use crate::metrics::{evaluate, Evaluation, RankedEntry, RankedList};

/// Standard deviation of the Gaussian initialiser.
pub const INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub learning_rate: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adagrad_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model_kind: ModelKind::Unigram,
            learning_rate: 0.05,
            lambda: 1e-4,
            epochs: 15,
            batch_size: 10,
            seed: 1,
            adagrad_epsilon: 1e-8,
        }
    }
}

const CONFIG_KEYS: [&str; 7] = [
    "model_kind",
    "learning_rate",
    "lambda",
    "epochs",
    "batch_size",
    "seed",
    "adagrad_epsilon",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Invalid(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    /// A zero learning rate is accepted; it makes training a no-op.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Invalid(format!("{what} in {self:?}")));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.adagrad_epsilon.is_finite() && self.adagrad_epsilon >= 0.0) {
            return bad("adagrad_epsilon must be finite and non-negative");
        }
        Ok(())
    }

    /// Sets one field from its textual `key = value` form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "model_kind" | "model" => self.model_kind = value.parse()?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "adagrad_epsilon" => self.adagrad_epsilon = parse_value(key, value)?,
            other => return Err(Error::Invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("config", i + 1, "expected key = value"))?;
            self.set(k, v)
                .map_err(|e| Error::parse("config", i + 1, e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model_kind = {}", self.model_kind);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "adagrad_epsilon = {}", self.adagrad_epsilon);
        s
    }
}

/// Grid used when none is supplied: η × λ at 15 epochs, batches of 10.
pub fn default_grid(base: &TrainConfig) -> Vec<TrainConfig> {
    let mut grid = Vec::new();
    for eta in [0.01, 0.05, 0.1] {
        for lambda in [0.0, 1e-4, 1e-3, 1e-2] {
            grid.push(TrainConfig {
                learning_rate: eta,
                lambda,
                epochs: 15,
                batch_size: 10,
                ..base.clone()
            });
        }
    }
    grid
}

/// Parses a grid file: `key = v1, v2, ...` lines, expanded as a Cartesian
/// product over `base`. Earlier keys in the fixed field order vary slowest.
pub fn parse_grid(text: &str, base: &TrainConfig) -> Result<Vec<TrainConfig>> {
    let mut axes: Vec<(&'static str, Vec<String>)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse("grid", i + 1, "expected key = v1, v2, ..."))?;
        let k = k.trim();
        let key = CONFIG_KEYS
            .iter()
            .find(|c| **c == k || (k == "model" && **c == "model_kind"))
            .ok_or_else(|| Error::parse("grid", i + 1, format!("unknown key {k:?}")))?;
        let values: Vec<String> = v
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if values.is_empty() {
            return Err(Error::parse("grid", i + 1, "no values"));
        }
        if axes.iter().any(|(name, _)| name == key) {
            return Err(Error::parse("grid", i + 1, format!("duplicate key {key}")));
        }
        axes.push((key, values));
    }
    axes.sort_by_key(|(name, _)| CONFIG_KEYS.iter().position(|c| c == name));

    let mut grid = vec![base.clone()];
    for (key, values) in &axes {
        let mut next = Vec::with_capacity(grid.len() * values.len());
        for cfg in &grid {
            for v in values {
                let mut c = cfg.clone();
                c.set(key, v)?;
                next.push(c);
            }
        }
        grid = next;
    }
    for c in &grid {
        c.validate()?;
    }
    Ok(grid)
}

fn init_with(dim: usize, kind: ModelKind, rng: &mut ChaCha8Rng) -> ModelTheta {
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal parameters");
    let mut theta = ModelTheta::zeros(dim, kind);
    for block in theta.slices_mut() {
        for v in block.iter_mut() {
            *v = normal.sample(rng);
        }
    }
    theta
}

/// Every parameter drawn i.i.d. from N(0, 0.01²) with a generator seeded
/// from `seed`.
pub fn init_params(dim: usize, kind: ModelKind, seed: u64) -> ModelTheta {
    init_with(dim, kind, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Per-entry sums of squared gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaGradState {
    pub accumulators: ModelTheta,
}

impl AdaGradState {
    pub fn new(theta: &ModelTheta) -> Self {
        AdaGradState {
            accumulators: theta.zeros_like(),
        }
    }
}

/// `G += g²; θ −= η·g / (√G + ε)` per entry. Entries with a zero gradient
/// are left untouched, which keeps `ε = 0` well defined.
pub fn adagrad_step(
    theta: &mut ModelTheta,
    grads: &ModelTheta,
    state: &mut AdaGradState,
    eta: f64,
    eps: f64,
) -> Result<()> {
    if !theta.same_shape(grads) || !theta.same_shape(&state.accumulators) {
        return Err(Error::Invalid("AdaGrad shapes disagree".into()));
    }
    for ((p, g), acc) in theta
        .slices_mut()
        .into_iter()
        .zip(grads.slices())
        .zip(state.accumulators.slices_mut())
    {
        for ((p, &g), acc) in p.iter_mut().zip(g).zip(acc.iter_mut()) {
            if g == 0.0 {
                continue;
            }
            *acc += g * g;
            *p -= eta * g / (acc.sqrt() + eps);
        }
    }
    Ok(())
}

/// Matcher probabilities for every instance, grouped like the input. Each
/// question is encoded once per group.
pub fn predict_groups(
    groups: &[QuestionGroup],
    theta: &ModelTheta,
    embeddings: &EmbeddingTable,
    stoplist: &Stoplist,
) -> Result<Vec<Vec<f64>>> {
    groups
        .par_iter()
        .map(|g| {
            let q = theta.encode(g.question_tokens(), embeddings, stoplist)?;
            g.instances
                .iter()
                .map(|inst| {
                    let a = theta.encode(&inst.answer_tokens, embeddings, stoplist)?;
                    crate::matcher::score(&q, &a, &theta.matcher)
                })
                .collect()
        })
        .collect()
}

/// Pairs each instance with its score and ranks every group.
pub fn rank_groups(groups: &[QuestionGroup], scores: &[Vec<f64>]) -> Vec<RankedList> {
    groups
        .iter()
        .zip(scores)
        .map(|(g, s)| {
            RankedList::new(
                g.question_id.clone(),
                g.instances
                    .iter()
                    .zip(s)
                    .map(|(inst, &score)| RankedEntry {
                        answer_id: inst.answer_id.clone(),
                        score,
                        label: inst.label,
                    })
                    .collect(),
            )
        })
        .collect()
}

/// MAP/MRR of the matcher alone on `groups`; `None` when no question has a
/// positive answer.
pub fn evaluate_model(
    groups: &[QuestionGroup],
    theta: &ModelTheta,
    embeddings: &EmbeddingTable,
    stoplist: &Stoplist,
) -> Result<Option<Evaluation>> {
    if !groups.iter().any(|g| g.n_positive() > 0) {
        return Ok(None);
    }
    let scores = predict_groups(groups, theta, embeddings, stoplist)?;
    evaluate(&rank_groups(groups, &scores)).map(Some)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Full objective divided by the number of training pairs.
    pub train_loss: f64,
    pub dev: Option<Evaluation>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot from the best dev-MAP epoch, or the last epoch without
    /// dev data.
    pub theta: ModelTheta,
    pub best_epoch: usize,
    pub trace: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_dev(&self) -> Option<Evaluation> {
        self.trace
            .iter()
            .find(|r| r.epoch == self.best_epoch)
            .and_then(|r| r.dev)
    }

    /// `epoch  train_loss  dev_map  dev_mrr` TSV; dev columns are `NA`
    /// without dev data.
    pub fn trace_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tdev_map\tdev_mrr\n");
        for r in &self.trace {
            match r.dev {
                Some(e) => {
                    let _ = writeln!(s, "{}\t{}\t{}\t{}", r.epoch, r.train_loss, e.map, e.mrr);
                }
                None => {
                    let _ = writeln!(s, "{}\t{}\tNA\tNA", r.epoch, r.train_loss);
                }
            }
        }
        s
    }
}

pub(crate) fn training_pairs(groups: &[QuestionGroup]) -> Vec<TokenPair<'_>> {
    groups
        .iter()
        .flat_map(|g| g.instances.iter())
        .map(|i| TokenPair {
            question: &i.question_tokens,
            answer: &i.answer_tokens,
            label: i.label,
        })
        .collect()
}

/// Full objective (summed cross-entropy plus `(λ/2)‖θ‖²`) over `pairs`.
pub fn dataset_loss(
    pairs: &[TokenPair<'_>],
    theta: &ModelTheta,
    embeddings: &EmbeddingTable,
    stoplist: &Stoplist,
    lambda: f64,
) -> Result<f64> {
    let terms: Vec<f64> = pairs
        .par_iter()
        .map(|p| {
            let q = theta.encode(p.question, embeddings, stoplist)?;
            let a = theta.encode(p.answer, embeddings, stoplist)?;
            let z = q.as_array().dot(&theta.matcher.m.dot(a.as_array())) + theta.matcher.bias;
            Ok(cross_entropy(z, p.label))
        })
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum::<f64>() + 0.5 * lambda * theta.squared_norm())
}

/// Trains with AdaGrad on shuffled mini-batches. Each mini-batch carries
/// `λ·|B|/N` of the regulariser so one epoch sums to the full objective.
/// The returned parameters are those of the epoch with the best dev MAP,
/// earliest on ties.
pub fn train(
    train_groups: &[QuestionGroup],
    dev_groups: &[QuestionGroup],
    embeddings: &EmbeddingTable,
    stoplist: &Stoplist,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let pairs = training_pairs(train_groups);
    if pairs.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let n = pairs.len() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut theta = init_with(embeddings.dim(), config.model_kind, &mut rng);
    let mut state = AdaGradState::new(&theta);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelTheta)> = None;
    let mut batch = Vec::with_capacity(config.batch_size);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| pairs[i]));
            let lambda = config.lambda * batch.len() as f64 / n;
            let (loss, grads) = loss_gradients(&batch, &theta, embeddings, stoplist, lambda)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            adagrad_step(
                &mut theta,
                &grads,
                &mut state,
                config.learning_rate,
                config.adagrad_epsilon,
            )?;
        }
        if !theta.is_finite() {
            return Err(Error::Diverged { epoch, loss: f64::NAN });
        }
        let train_loss = dataset_loss(&pairs, &theta, embeddings, stoplist, config.lambda)? / n;
        if !train_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: train_loss });
        }
        let dev = evaluate_model(dev_groups, &theta, embeddings, stoplist)?;
        trace.push(EpochRecord { epoch, train_loss, dev });

        let candidate = dev.map_or(f64::NEG_INFINITY, |e| e.map);
        let improves = match &best {
            None => true,
            Some((score, _, _)) => candidate > *score || (dev.is_none() && epoch == config.epochs),
        };
        if improves {
            best = Some((candidate, epoch, theta.clone()));
        }
    }
    let (_, best_epoch, theta) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        theta,
        best_epoch,
        trace,
    })
}

#[derive(Clone, Debug)]
pub struct GridRow {
    pub config: TrainConfig,
    pub outcome: std::result::Result<GridScore, String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridScore {
    pub dev_map: f64,
    pub dev_mrr: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub best_index: usize,
    pub best_config: TrainConfig,
    pub best_theta: ModelTheta,
    pub table: Vec<GridRow>,
}

impl GridOutcome {
    pub fn table_tsv(&self) -> String {
        let mut s = String::from(
            "cell\tmodel_kind\tlearning_rate\tlambda\tepochs\tbatch_size\tseed\tdev_map\tdev_mrr\tbest_epoch\terror\n",
        );
        for (i, row) in self.table.iter().enumerate() {
            let c = &row.config;
            let _ = write!(
                s,
                "{i}\t{}\t{}\t{}\t{}\t{}\t{}\t",
                c.model_kind, c.learning_rate, c.lambda, c.epochs, c.batch_size, c.seed
            );
            let _ = match &row.outcome {
                Ok(g) => writeln!(s, "{}\t{}\t{}\t", g.dev_map, g.dev_mrr, g.best_epoch),
                Err(e) => writeln!(s, "NA\tNA\tNA\t{}", e.replace(['\t', '\n'], " ")),
            };
        }
        s
    }
}

/// Trains every configuration (in parallel) and keeps the one with the
/// highest dev MAP, earliest in grid order on ties. Failed cells are
/// recorded in the table and skipped.
pub fn grid_search(
    grid: &[TrainConfig],
    train_groups: &[QuestionGroup],
    dev_groups: &[QuestionGroup],
    embeddings: &EmbeddingTable,
    stoplist: &Stoplist,
) -> Result<GridOutcome> {
    if grid.is_empty() {
        return Err(Error::Empty("hyperparameter grid"));
    }
    if !dev_groups.iter().any(|g| g.n_positive() > 0) {
        return Err(Error::Invalid("grid search needs dev questions with a positive answer".into()));
    }
    let results: Vec<Result<TrainOutcome>> = grid
        .par_iter()
        .map(|cfg| train(train_groups, dev_groups, embeddings, stoplist, cfg))
        .collect();

    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64, ModelTheta)> = None;
    for (i, (cfg, result)) in grid.iter().zip(results).enumerate() {
        let outcome = match result {
            Ok(out) => {
                let dev = out.best_dev().expect("dev data present");
                if best.as_ref().is_none_or(|(_, m, _)| dev.map > *m) {
                    best = Some((i, dev.map, out.theta));
                }
                Ok(GridScore {
                    dev_map: dev.map,
                    dev_mrr: dev.mrr,
                    best_epoch: out.best_epoch,
                })
            }
            Err(e) => Err(e.to_string()),
        };
        table.push(GridRow {
            config: cfg.clone(),
            outcome,
        });
    }
    let (best_index, _, best_theta) = best.ok_or_else(|| {
        Error::Invalid(format!(
            "every grid cell failed; first error: {}",
            table[0].outcome.as_ref().err().cloned().unwrap_or_default()
        ))
    })?;
    Ok(GridOutcome {
        best_index,
        best_config: grid[best_index].clone(),
        best_theta,
        table,
    })
}
