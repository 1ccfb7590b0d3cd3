//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use anselect::corpus::{parse_dataset_from, QuestionGroup, Stoplist};
use anselect::embeddings::EmbeddingTable;
use anselect::matcher::{token_batch_loss, ModelKind, ModelTheta, TokenPair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` tokens `w0..w{n-1}` with N(0, 1) vectors plus an explicit unknown row.
pub fn random_table(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> EmbeddingTable {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        rows.push((format!("w{i}"), v));
    }
    let unknown: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    EmbeddingTable::from_rows(rows, Some(unknown)).unwrap()
}

pub fn random_sentence(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<String> {
    let len = rng.random_range(1..=max_len);
    (0..len)
        .map(|_| {
            // occasionally out of vocabulary
            let i = rng.random_range(0..vocab + 1);
            if i == vocab {
                "oov".to_string()
            } else {
                format!("w{i}")
            }
        })
        .collect()
}

pub fn random_theta(rng: &mut ChaCha8Rng, dim: usize, kind: ModelKind, std: f64) -> ModelTheta {
    let normal = Normal::new(0.0, std).unwrap();
    let mut theta = ModelTheta::zeros(dim, kind);
    let flat: Vec<f64> = (0..theta.param_count()).map(|_| normal.sample(rng)).collect();
    theta.set_flat(&flat).unwrap();
    theta
}

/// Central finite-difference gradient of the token-level objective.
pub fn numeric_gradient(
    batch: &[TokenPair<'_>],
    theta: &ModelTheta,
    table: &EmbeddingTable,
    stoplist: &Stoplist,
    lambda: f64,
    step: f64,
) -> Vec<f64> {
    let base = theta.to_flat();
    let mut probe = theta.clone();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        probe.set_flat(&plus).unwrap();
        let up = token_batch_loss(batch, &probe, table, stoplist, lambda).unwrap();
        let mut minus = base.clone();
        minus[i] -= step;
        probe.set_flat(&minus).unwrap();
        let down = token_batch_loss(batch, &probe, table, stoplist, lambda).unwrap();
        grad.push((up - down) / (2.0 * step));
    }
    grad
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst relative error over the parameter blocks of `theta` (M, T_L, T_R,
/// b_c, b).
pub fn blockwise_relative_error(theta: &ModelTheta, analytic: &[f64], numeric: &[f64]) -> f64 {
    let mut offset = 0;
    let mut worst: f64 = 0.0;
    for block in theta.slices() {
        let r = offset..offset + block.len();
        worst = worst.max(relative_error(&analytic[r.clone()], &numeric[r]));
        offset += block.len();
    }
    worst
}

/// Brute-force AP and RR straight from the definitions. Ranks come from
/// pairwise comparison: an item is outranked by every item with a higher
/// score, or an equal score and a smaller numeric id.
pub fn brute_force_ap_rr(candidates: &[(usize, f64, u8)]) -> (f64, f64) {
    let rank = |i: usize| -> usize {
        let (id_i, s_i, _) = candidates[i];
        1 + candidates
            .iter()
            .filter(|&&(id_j, s_j, _)| s_j > s_i || (s_j == s_i && id_j < id_i))
            .count()
    };
    let positives: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].2 == 1).collect();
    let ranks: Vec<usize> = positives.iter().map(|&i| rank(i)).collect();
    let ap = ranks
        .iter()
        .map(|&r| ranks.iter().filter(|&&o| o <= r).count() as f64 / r as f64)
        .sum::<f64>()
        / ranks.len() as f64;
    let rr = 1.0 / *ranks.iter().min().unwrap() as f64;
    (ap, rr)
}

/// Random candidate lists with at least one positive; scores come from a
/// small set so ties occur.
pub fn random_rankings(rng: &mut ChaCha8Rng, n: usize, max_candidates: usize) -> Vec<Vec<(usize, f64, u8)>> {
    (0..n)
        .map(|_| {
            let k = rng.random_range(1..=max_candidates);
            let mut c: Vec<(usize, f64, u8)> = (0..k)
                .map(|id| {
                    let score = if rng.random_bool(0.3) {
                        rng.random_range(0..4) as f64 / 4.0
                    } else {
                        rng.random::<f64>()
                    };
                    (id, score, u8::from(rng.random_bool(0.3)))
                })
                .collect();
            if c.iter().all(|x| x.2 == 0) {
                let j = rng.random_range(0..k);
                c[j].2 = 1;
            }
            c
        })
        .collect()
}

/// The twenty separable triples: five questions with four answers each.
/// Question words point along axis 1, correct answer words along +axis 0
/// and wrong answer words along −axis 0, each with small noise, so
/// `M = c·e1·e0ᵀ` separates the classes.
pub struct Separable {
    pub table: EmbeddingTable,
    pub groups: Vec<QuestionGroup>,
}

pub fn separable_triples(seed: u64) -> Separable {
    let mut rng = rng(seed);
    let dim = 4;
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut rows = Vec::new();
    for (prefix, axis, sign) in [("qw", 1, 1.0), ("pw", 0, 1.0), ("nw", 0, -1.0)] {
        for i in 0..6 {
            let mut v: Vec<f64> = (0..dim).map(|_| noise.sample(&mut rng)).collect();
            v[axis] += sign;
            rows.push((format!("{prefix}{i}"), v));
        }
    }
    let table = EmbeddingTable::from_rows(rows, None).unwrap();

    let mut text = String::new();
    for q in 0..5 {
        let question: Vec<String> = (0..3).map(|_| format!("qw{}", rng.random_range(0..6))).collect();
        for a in 0..4 {
            let positive = a == 0 || (a == 1 && q % 2 == 0);
            let prefix = if positive { "pw" } else { "nw" };
            let answer: Vec<String> = (0..4).map(|_| format!("{prefix}{}", rng.random_range(0..6))).collect();
            text.push_str(&format!(
                "s{q}\t{}\t{}\t{}\n",
                u8::from(positive),
                question.join(" "),
                answer.join(" ")
            ));
        }
    }
    let groups = parse_dataset_from(text.as_bytes(), "separable").unwrap();
    Separable { table, groups }
}

/// Fraction of training pairs classified correctly at threshold 0.5.
pub fn accuracy(groups: &[QuestionGroup], theta: &ModelTheta, table: &EmbeddingTable, stoplist: &Stoplist) -> f64 {
    let mut right = 0;
    let mut total = 0;
    for inst in groups.iter().flat_map(|g| &g.instances) {
        let p = theta
            .probability(&inst.question_tokens, &inst.answer_tokens, table, stoplist)
            .unwrap();
        right += usize::from((p > 0.5) == (inst.label == 1));
        total += 1;
    }
    right as f64 / total as f64
}

/// A synthetic answer-selection corpus in the dataset TSV format. Correct
/// answers share content words with their question; some wrong answers do
/// too, so overlap is informative but imperfect.
pub fn synthetic_corpus(seed: u64, n_questions: usize, answers_per_question: usize) -> String {
    let mut rng = rng(seed);
    let mut text = String::new();
    for q in 0..n_questions {
        let topic: Vec<String> = (0..3).map(|_| format!("w{}", rng.random_range(0..40))).collect();
        let question = format!("what is the {} of {}?", topic[0], topic[1]);
        let mut any_positive = false;
        for a in 0..answers_per_question {
            let positive = rng.random_bool(0.2) || (a + 1 == answers_per_question && !any_positive);
            any_positive |= positive;
            let mut words: Vec<String> = (0..6).map(|_| format!("w{}", rng.random_range(0..40))).collect();
            if positive || rng.random_bool(0.2) {
                words[1] = topic[0].clone();
            }
            if positive {
                words[3] = topic[1].clone();
                words.push("1984".into());
            }
            text.push_str(&format!("{q}\t{}\t{question}\tthe {}.\n", u8::from(positive), words.join(" ")));
        }
    }
    text
}

/// Embeddings for the synthetic corpus vocabulary `w0..w39` plus function
/// words, in the text file format.
pub fn synthetic_embeddings(seed: u64, dim: usize) -> String {
    let mut rng = rng(seed);
    let normal = Normal::new(0.0, 0.5).unwrap();
    let mut text = String::new();
    let words = (0..40).map(|i| format!("w{i}")).chain(["what", "is", "the", "of"].map(String::from));
    for w in words {
        text.push_str(&w);
        for _ in 0..dim {
            text.push_str(&format!(" {}", normal.sample(&mut rng)));
        }
        text.push('\n');
    }
    text
}
