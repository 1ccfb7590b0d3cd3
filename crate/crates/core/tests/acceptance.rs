//! Acceptance suite: one PASS/FAIL/BLOCKED line per criterion.
//!
//! Criteria that need the public TREC answer-selection data run only when
//! `ANSELECT_DATA_DIR` points at a directory holding `train.tsv`,
//! `train-all.tsv`, `dev.tsv`, `test.tsv` and `embeddings.txt`; otherwise
//! they report BLOCKED and do not count as failures.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anselect::combiner::{
    baseline_scores, build_idf, group_features, train_combiner, train_combiner_from, Baseline, Features,
};
use anselect::corpus::{parse_dataset, parse_dataset_from, QuestionGroup, Stoplist};
use anselect::embeddings::EmbeddingTable;
use anselect::encoders::encode_unigram;
use anselect::matcher::{loss_gradients, ModelKind, TokenPair};
use anselect::metrics::{evaluate, export_trec, parse_trec, Evaluation, RankedEntry, RankedList};
use anselect::trainer::{
    adagrad_step, default_grid, evaluate_model, grid_search, predict_groups, rank_groups, train, AdaGradState,
    TrainConfig,
};
use common::*;
use rand::seq::SliceRandom;
use rand::Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Blocked(String),
}

type Check = Result<String, String>;

fn timed(limit: Duration, f: impl FnOnce() -> Check) -> Verdict {
    let start = Instant::now();
    let result = f();
    let elapsed = start.elapsed();
    match result {
        Ok(msg) if elapsed < limit => Verdict::Pass(format!("{msg}; {:.2?} < {limit:?}", elapsed)),
        Ok(msg) => Verdict::Fail(format!("{msg}; too slow: {:.2?} >= {limit:?}", elapsed)),
        Err(msg) => Verdict::Fail(msg),
    }
}

fn untimed(f: impl FnOnce() -> Check) -> Verdict {
    match f() {
        Ok(msg) => Verdict::Pass(msg),
        Err(msg) => Verdict::Fail(msg),
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn to_list(qid: usize, cands: &[(usize, f64, u8)]) -> RankedList {
    RankedList::new(
        qid.to_string(),
        cands
            .iter()
            .map(|&(id, score, label)| RankedEntry { answer_id: id.to_string(), score, label })
            .collect(),
    )
}

fn metric_oracle() -> Check {
    let mut r = rng(1);
    let lists = random_rankings(&mut r, 1000, 20);
    let rankings: Vec<RankedList> = lists.iter().enumerate().map(|(i, c)| to_list(i, c)).collect();
    let got = evaluate(&rankings).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (list, cands) in rankings.iter().zip(&lists) {
        let (ap, rr) = brute_force_ap_rr(cands);
        let one = evaluate(std::slice::from_ref(list)).map_err(|e| e.to_string())?;
        worst = worst.max((one.map - ap).abs()).max((one.mrr - rr).abs());
    }
    let (ap, rr): (Vec<f64>, Vec<f64>) = lists.iter().map(|c| brute_force_ap_rr(c)).unzip();
    let map = ap.iter().sum::<f64>() / 1000.0;
    let mrr = rr.iter().sum::<f64>() / 1000.0;
    worst = worst.max((got.map - map).abs()).max((got.mrr - mrr).abs());
    ensure(worst <= 1e-12, format!("max deviation {worst:e} > 1e-12"))?;
    Ok(format!("1000 rankings, max deviation {worst:e} <= 1e-12"))
}

fn gradient_check() -> Check {
    let mut r = rng(2);
    let stop = Stoplist::empty();
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let dim = r.random_range(1..=10);
        let table = random_table(&mut r, 12, dim);
        let theta = random_theta(&mut r, dim, ModelKind::Bigram, 0.3);
        let lambda = if case % 2 == 0 { 0.0 } else { 0.01 };
        let q = random_sentence(&mut r, 12, 8);
        let a = random_sentence(&mut r, 12, 8);
        let batch = [TokenPair { question: &q, answer: &a, label: r.random_range(0..2) }];
        let (_, g) = loss_gradients(&batch, &theta, &table, &stop, lambda).map_err(|e| e.to_string())?;
        let numeric = numeric_gradient(&batch, &theta, &table, &stop, lambda, 1e-5);
        worst = worst.max(blockwise_relative_error(&theta, &g.to_flat(), &numeric));
    }
    ensure(worst < 1e-4, format!("worst relative error {worst:e} >= 1e-4"))?;
    Ok(format!("100 bigram instances, worst relative error {worst:.2e} < 1e-4"))
}

fn overfit() -> Check {
    let data = separable_triples(3);
    let stop = Stoplist::builtin();
    let mut parts = Vec::new();
    for kind in [ModelKind::Unigram, ModelKind::Bigram] {
        let cfg = TrainConfig {
            model_kind: kind,
            learning_rate: 0.5,
            lambda: 0.0,
            epochs: 200,
            batch_size: 10,
            seed: 17,
            adagrad_epsilon: 1e-8,
        };
        let out = train(&data.groups, &[], &data.table, &stop, &cfg).map_err(|e| e.to_string())?;
        let loss = out.trace.last().unwrap().train_loss;
        let acc = accuracy(&data.groups, &out.theta, &data.table, &stop);
        ensure(loss < 0.05 && acc == 1.0, format!("{kind}: loss {loss:.4}, accuracy {acc}"))?;
        parts.push(format!("{kind} loss {loss:.2e} acc {acc}"));
    }
    Ok(format!("20 triples, 200 epochs: {}", parts.join(", ")))
}

fn invariances() -> Check {
    // unigram permutation invariance, bitwise
    let mut r = rng(8);
    let table = random_table(&mut r, 30, 8);
    let stop: Stoplist = ["w0", "w1"].into_iter().collect();
    for _ in 0..500 {
        let mut s = random_sentence(&mut r, 30, 15);
        let base = encode_unigram(&s, &table, &stop).map_err(|e| e.to_string())?;
        s.shuffle(&mut r);
        let perm = encode_unigram(&s, &table, &stop).map_err(|e| e.to_string())?;
        ensure(base == perm, "unigram encoding changed under permutation")?;
    }

    // one correct answer per question: MAP equals MRR
    for _ in 0..200 {
        let lists: Vec<RankedList> = (0..20)
            .map(|q| {
                let k = r.random_range(1..=15);
                let pos = r.random_range(0..k);
                let c: Vec<(usize, f64, u8)> = (0..k).map(|i| (i, r.random::<f64>(), u8::from(i == pos))).collect();
                to_list(q, &c)
            })
            .collect();
        let e = evaluate(&lists).map_err(|e| e.to_string())?;
        ensure(e.map == e.mrr, format!("MAP {} != MRR {}", e.map, e.mrr))?;
    }

    // first AdaGrad step moves every touched entry by exactly eta
    let mut theta = anselect::trainer::init_params(5, ModelKind::Bigram, 4);
    let before = theta.to_flat();
    let grads = {
        let mut g = theta.zeros_like();
        let flat: Vec<f64> = (0..before.len())
            .map(|i| if i % 7 == 0 { 0.0 } else { r.random_range(-50.0..50.0) })
            .collect();
        g.set_flat(&flat).unwrap();
        g
    };
    let mut state = AdaGradState::new(&theta);
    adagrad_step(&mut theta, &grads, &mut state, 0.1, 0.0).map_err(|e| e.to_string())?;
    for ((b, a), g) in before.iter().zip(theta.to_flat()).zip(grads.to_flat()) {
        let step = (a - b).abs();
        let want = if g == 0.0 { 0.0 } else { 0.1 };
        ensure((step - want).abs() <= 1e-15, format!("first step {step} != {want}"))?;
    }

    // seed -> theta -> metrics determinism
    let train_groups = parse_dataset_from(synthetic_corpus(11, 25, 5).as_bytes(), "train").unwrap();
    let dev_groups = parse_dataset_from(synthetic_corpus(12, 10, 5).as_bytes(), "dev").unwrap();
    let emb = EmbeddingTable::from_reader(synthetic_embeddings(13, 6).as_bytes(), "emb").unwrap();
    let stop = Stoplist::builtin();
    let cfg = TrainConfig {
        model_kind: ModelKind::Bigram,
        epochs: 5,
        learning_rate: 0.1,
        ..TrainConfig::default()
    };
    let a = train(&train_groups, &dev_groups, &emb, &stop, &cfg).map_err(|e| e.to_string())?;
    let b = train(&train_groups, &dev_groups, &emb, &stop, &cfg).map_err(|e| e.to_string())?;
    ensure(a.theta.to_flat() == b.theta.to_flat(), "parameters differ across identical runs")?;
    let ea = evaluate_model(&dev_groups, &a.theta, &emb, &stop).map_err(|e| e.to_string())?;
    let eb = evaluate_model(&dev_groups, &b.theta, &emb, &stop).map_err(|e| e.to_string())?;
    ensure(ea == eb && a.trace == b.trace, "metrics differ across identical runs")?;

    // trec export round trip
    let scores = predict_groups(&dev_groups, &a.theta, &emb, &stop).map_err(|e| e.to_string())?;
    let rankings = rank_groups(&dev_groups, &scores);
    let direct = evaluate(&rankings).map_err(|e| e.to_string())?;
    let files = export_trec(&rankings, "acc");
    let back = evaluate(&parse_trec(&files.run, &files.qrels).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(
        format!("{:.4} {:.4}", direct.map, direct.mrr) == format!("{:.4} {:.4}", back.map, back.mrr),
        format!("trec round trip {direct} vs {back}"),
    )?;
    Ok("permutation, MAP=MRR, AdaGrad first step, determinism, trec round trip".into())
}

fn combiner_convexity() -> Check {
    let mut r = rng(9);
    let n = 400;
    let features: Vec<Features> = (0..n)
        .map(|_| [r.random_range(0..5) as f64, r.random_range(0.0..12.0), r.random::<f64>()])
        .collect();
    let labels: Vec<u8> = features
        .iter()
        .map(|f| u8::from(r.random::<f64>() < 1.0 / (1.0 + (-(0.6 * f[0] + 0.1 * f[1] + f[2] - 2.0)).exp())))
        .collect();
    let (_, f0) = train_combiner_from(&features, &labels, 0.01, [0.0; 4]).map_err(|e| e.to_string())?;
    let (_, f1) = train_combiner_from(&features, &labels, 0.01, [3.0, -2.0, 5.0, 4.0]).map_err(|e| e.to_string())?;
    ensure((f0 - f1).abs() <= 1e-9, format!("restart objectives {f0} vs {f1}"))?;

    let zeros = vec![[0.0; 3]; 37];
    let zl: Vec<u8> = (0..37).map(|i| u8::from(i < 11)).collect();
    let m = train_combiner(&zeros, &zl, 0.01).map_err(|e| e.to_string())?;
    let rate: f64 = 11.0 / 37.0;
    let want = (rate / (1.0 - rate)).ln();
    ensure(
        (m.bias - want).abs() <= 1e-6 && m.weights.iter().all(|w| w.abs() <= 1e-6),
        format!("zero-feature fit bias {} weights {:?}, want {want}", m.bias, m.weights),
    )?;
    Ok(format!(
        "restart gap {:.1e} <= 1e-9; zero-feature bias error {:.1e} <= 1e-6",
        (f0 - f1).abs(),
        (m.bias - want).abs()
    ))
}

/// The TREC answer-selection files, if available.
struct Trec {
    train: Vec<QuestionGroup>,
    train_all: Option<Vec<QuestionGroup>>,
    dev: Vec<QuestionGroup>,
    test: Vec<QuestionGroup>,
    embeddings: EmbeddingTable,
}

fn load_trec() -> Result<Trec, String> {
    let dir = std::env::var_os("ANSELECT_DATA_DIR").ok_or("ANSELECT_DATA_DIR not set")?;
    let dir = PathBuf::from(dir);
    let load = |name: &str| -> Result<Vec<QuestionGroup>, String> {
        parse_dataset(dir.join(name)).map_err(|e| e.to_string())
    };
    let train_all_path: &Path = &dir.join("train-all.tsv");
    Ok(Trec {
        train: load("train.tsv")?,
        train_all: train_all_path.exists().then(|| load("train-all.tsv")).transpose()?,
        dev: load("dev.tsv")?,
        test: load("test.tsv")?,
        embeddings: EmbeddingTable::load(dir.join("embeddings.txt")).map_err(|e| e.to_string())?,
    })
}

fn within(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol
}

fn count_baselines(d: &Trec) -> Check {
    let stop = Stoplist::builtin();
    let idf = build_idf(&d.train).map_err(|e| e.to_string())?;
    let mut msgs = Vec::new();
    for (kind, map, mrr) in [(Baseline::Count, 0.5707, 0.6266), (Baseline::WeightedCount, 0.5961, 0.6515)] {
        let e = evaluate(&rank_groups(&d.test, &baseline_scores(kind, &d.test, &idf, &stop, 0)))
            .map_err(|e| e.to_string())?;
        ensure(
            within(e.map, map, 0.02) && within(e.mrr, mrr, 0.02),
            format!("{kind:?}: {e}, target {map}/{mrr} ± 0.02"),
        )?;
        msgs.push(format!("{kind:?} {e}"));
    }
    Ok(msgs.join("; "))
}

fn random_baseline(d: &Trec) -> Check {
    let stop = Stoplist::builtin();
    let idf = build_idf(&d.train).map_err(|e| e.to_string())?;
    let (mut map, mut mrr) = (0.0, 0.0);
    for seed in 0..50 {
        let e = evaluate(&rank_groups(&d.test, &baseline_scores(Baseline::Random, &d.test, &idf, &stop, seed)))
            .map_err(|e| e.to_string())?;
        map += e.map / 50.0;
        mrr += e.mrr / 50.0;
    }
    ensure(
        within(map, 0.3965, 0.03) && within(mrr, 0.4929, 0.03),
        format!("mean MAP {map:.4} MRR {mrr:.4}, target 0.3965/0.4929 ± 0.03"),
    )?;
    Ok(format!("50 seeds: MAP {map:.4} MRR {mrr:.4}"))
}

/// Test-set metrics of the dev-selected model and of its count combination.
struct ModelResult {
    bare: Evaluation,
    combined: Evaluation,
}

fn fit_and_score(train_groups: &[QuestionGroup], d: &Trec, kind: ModelKind) -> Result<ModelResult, String> {
    let stop = Stoplist::builtin();
    let base = TrainConfig { model_kind: kind, ..TrainConfig::default() };
    let grid = grid_search(&default_grid(&base), train_groups, &d.dev, &d.embeddings, &stop).map_err(|e| e.to_string())?;
    let theta = grid.best_theta;
    let bare = evaluate_model(&d.test, &theta, &d.embeddings, &stop)
        .map_err(|e| e.to_string())?
        .ok_or("test split has no positives")?;
    let idf = build_idf(train_groups).map_err(|e| e.to_string())?;
    let feats = group_features(train_groups, &theta, &d.embeddings, &idf, &stop).map_err(|e| e.to_string())?;
    let labels: Vec<u8> = train_groups.iter().flat_map(|g| g.instances.iter().map(|i| i.label)).collect();
    let flat: Vec<Features> = feats.into_iter().flatten().collect();
    let model = train_combiner(&flat, &labels, 0.01).map_err(|e| e.to_string())?;
    let test_scores: Vec<Vec<f64>> = group_features(&d.test, &theta, &d.embeddings, &idf, &stop)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|fs| fs.iter().map(|f| model.predict(f)).collect())
        .collect();
    let combined = evaluate(&rank_groups(&d.test, &test_scores)).map_err(|e| e.to_string())?;
    Ok(ModelResult { bare, combined })
}

fn model_results(d: &Trec, uni: &ModelResult, bi: &ModelResult) -> Check {
    ensure(uni.bare.map >= 0.50, format!("TRAIN unigram MAP {:.4} < 0.50", uni.bare.map))?;
    ensure(
        bi.combined.map >= 0.65 && bi.combined.mrr >= 0.72,
        format!("TRAIN bigram+count {} below 0.65/0.72", bi.combined),
    )?;
    let mut msg = format!("TRAIN unigram MAP {:.4}; bigram+count {}", uni.bare.map, bi.combined);
    match &d.train_all {
        Some(all) => {
            let r = fit_and_score(all, d, ModelKind::Bigram)?;
            ensure(r.combined.map >= 0.66, format!("TRAIN-ALL bigram+count MAP {:.4} < 0.66", r.combined.map))?;
            msg.push_str(&format!("; TRAIN-ALL bigram+count {}", r.combined));
        }
        None => return Err("train-all.tsv missing".into()),
    }
    Ok(msg)
}

fn ordering(uni: &ModelResult, bi: &ModelResult) -> Check {
    ensure(bi.bare.map >= uni.bare.map, format!("bigram {:.4} < unigram {:.4}", bi.bare.map, uni.bare.map))?;
    for (name, r) in [("unigram", uni), ("bigram", bi)] {
        let gain = r.combined.map - r.bare.map;
        ensure(gain >= 0.05, format!("{name} +count gain {gain:.4} < 0.05"))?;
    }
    Ok(format!(
        "unigram {:.4} -> {:.4}, bigram {:.4} -> {:.4}",
        uni.bare.map, uni.combined.map, bi.bare.map, bi.combined.map
    ))
}

fn main() {
    let mut verdicts: Vec<(&str, Verdict)> = vec![
        ("C1 metric oracle equivalence", timed(Duration::from_secs(1), metric_oracle)),
        ("C2 gradient correctness", timed(Duration::from_secs(10), gradient_check)),
        ("C3 overfit oracle", timed(Duration::from_secs(5), overfit)),
    ];

    match load_trec() {
        Ok(d) => {
            verdicts.push(("C4 count baselines", timed(Duration::from_secs(10), || count_baselines(&d))));
            verdicts.push(("C5 random baseline", untimed(|| random_baseline(&d))));
            let start = Instant::now();
            let results = fit_and_score(&d.train, &d, ModelKind::Unigram)
                .and_then(|u| fit_and_score(&d.train, &d, ModelKind::Bigram).map(|b| (u, b)));
            let train_time = start.elapsed();
            match results {
                Ok((uni, bi)) => {
                    let c6 = match model_results(&d, &uni, &bi) {
                        Ok(m) if train_time < Duration::from_secs(600) => Verdict::Pass(format!("{m}; TRAIN {train_time:.0?}")),
                        Ok(m) => Verdict::Fail(format!("{m}; TRAIN took {train_time:.0?} >= 10 min")),
                        Err(m) => Verdict::Fail(m),
                    };
                    verdicts.push(("C6 model results", c6));
                    verdicts.push(("C7 ordering", untimed(|| ordering(&uni, &bi))));
                }
                Err(e) => {
                    verdicts.push(("C6 model results", Verdict::Fail(e.clone())));
                    verdicts.push(("C7 ordering", Verdict::Fail(e)));
                }
            }
        }
        Err(reason) => {
            for name in ["C4 count baselines", "C5 random baseline", "C6 model results", "C7 ordering"] {
                verdicts.push((name, Verdict::Blocked(format!("TREC dataset not present ({reason})"))));
            }
        }
    }

    verdicts.push(("C8 invariance suite", untimed(invariances)));
    verdicts.push(("C9 combiner convexity", untimed(combiner_convexity)));

    let mut failed = 0;
    for (name, v) in &verdicts {
        match v {
            Verdict::Pass(m) => println!("PASS    {name}: {m}"),
            Verdict::Fail(m) => {
                failed += 1;
                println!("FAIL    {name}: {m}");
            }
            Verdict::Blocked(m) => println!("BLOCKED {name}: {m}"),
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
