//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Run with `cargo test -p milslide-cli --test acceptance`. A single criterion can
//! be selected with `MILSLIDE_ACCEPT=3` (comma-separated list).

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use milslide::metrics::{
    auroc, balanced_accuracy, classification_report, regression_report, ConfusionCounts,
};
use milslide::mil::{
    read_checkpoint, top_k_patches, write_checkpoint, Gradients, MilClassifier, MilModel,
    MilRegressor, ModelDims, ParamBlocks,
};
use milslide::rng::StreamRng;
use milslide::store::{read_bag, write_bag, EmbeddingBag, LabelSet, TileCoord};
use milslide::synthetic::{
    generate_bags, generate_regression_bags, RegressionRule, SyntheticSet, SyntheticSpec,
};
use milslide::tiler::{
    build_tissue_mask, downsample_area, extract_tiles_with, plan_grid, saturation,
};
use milslide::train::{train_bags_with, LossKind, Task, TrainConfig};
use milslide::{evaluate, EvalReport};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_bag(rng: &mut StreamRng, n: usize, dim: usize, labels: LabelSet) -> EmbeddingBag {
    let width = (n as f64).sqrt().ceil() as usize;
    let coords = (0..n)
        .map(|i| TileCoord::new((i % width) as u32, (i / width) as u32))
        .collect();
    let features = (0..n * dim).map(|_| rng.normal() as f32).collect();
    EmbeddingBag::new(
        format!("r{}", rng.below(1 << 30)),
        dim,
        coords,
        features,
        labels,
    )
    .expect("valid bag")
}

// ---------------------------------------------------------------- criterion 1

/// Model under finite-difference test with a fixed linear functional on its outputs.
enum Probe {
    Classifier(MilClassifier, [f64; 2]),
    Regressor(MilRegressor, f64),
}

impl Probe {
    fn params(&mut self) -> Vec<&mut [f32]> {
        match self {
            Probe::Classifier(m, _) => m.blocks_mut(),
            Probe::Regressor(m, _) => m.blocks_mut(),
        }
    }

    /// Loss and ReLU activation pattern.
    fn eval(&self, bag: &EmbeddingBag) -> (f64, Vec<bool>) {
        match self {
            Probe::Classifier(m, c) => {
                let (out, trace) = m.forward_traced(bag).expect("forward");
                let loss = c[0] * out.logits[0] + c[1] * out.logits[1];
                (
                    loss,
                    trace.pre_activation.iter().map(|&v| v > 0.0).collect(),
                )
            }
            Probe::Regressor(m, c) => {
                let (out, trace) = m.forward_traced(bag).expect("forward");
                (
                    c * out.prediction,
                    trace.pre_activation.iter().map(|&v| v > 0.0).collect(),
                )
            }
        }
    }

    fn analytic(&self, bag: &EmbeddingBag) -> Gradients {
        match self {
            Probe::Classifier(m, c) => m.gradients(bag, *c).expect("backward"),
            Probe::Regressor(m, c) => m.gradients(bag, *c).expect("backward"),
        }
    }
}

const FD_EPS: f64 = 1e-3;
const FD_TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared in absolute terms.
const FD_FLOOR: f64 = 1e-6;
/// Models with at most this many parameters have every coordinate checked.
const FULL_CHECK_LIMIT: usize = 4000;
const SAMPLES_PER_BLOCK: usize = 4;

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(FD_FLOOR)
}

#[derive(Default)]
struct FdStats {
    checked: usize,
    /// Coordinates compared against the interval-mean gradient.
    interval: usize,
    kinks: usize,
    directions: usize,
    worst: f64,
    failures: Vec<String>,
}

fn fd_case(
    probe: &mut Probe,
    bag: &EmbeddingBag,
    rng: &mut StreamRng,
    label: &str,
    stats: &mut FdStats,
) {
    // Biases start at zero; move them off it so they are exercised generically.
    for block in probe.params() {
        if block.iter().all(|&v| v == 0.0) {
            for v in block.iter_mut() {
                *v = (0.1 * rng.normal()) as f32;
            }
        }
    }
    let grads = probe.analytic(bag);
    let sizes: Vec<usize> = grads.blocks.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let coords: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &len)| {
            let picks = if total <= FULL_CHECK_LIMIT {
                (0..len).collect()
            } else {
                rng.sample_indices(len, SAMPLES_PER_BLOCK.min(len))
            };
            picks.into_iter().map(move |i| (b, i))
        })
        .collect();

    for (b, i) in coords {
        let orig = probe.params()[b][i];
        let plus = (f64::from(orig) + FD_EPS) as f32;
        let minus = (f64::from(orig) - FD_EPS) as f32;
        probe.params()[b][i] = plus;
        let (lp, pattern_p) = probe.eval(bag);
        probe.params()[b][i] = minus;
        let (lm, pattern_m) = probe.eval(bag);
        probe.params()[b][i] = orig;
        if pattern_p != pattern_m {
            stats.kinks += 1;
            continue;
        }
        let fd = (lp - lm) / (f64::from(plus) - f64::from(minus));
        let mut err = rel_err(fd, grads.blocks[b][i]);
        if err >= FD_TOL {
            // The central difference equals the mean gradient over [minus, plus]; when
            // third-order truncation dominates, compare against that mean (Simpson).
            probe.params()[b][i] = plus;
            let g_plus = probe.analytic(bag).blocks[b][i];
            probe.params()[b][i] = minus;
            let g_minus = probe.analytic(bag).blocks[b][i];
            probe.params()[b][i] = orig;
            let mean = (g_minus + 4.0 * grads.blocks[b][i] + g_plus) / 6.0;
            err = rel_err(fd, mean);
            stats.interval += 1;
        }
        stats.worst = stats.worst.max(err);
        stats.checked += 1;
        if err >= FD_TOL && stats.failures.len() < 5 {
            stats.failures.push(format!(
                "{label} block {b}[{i}]: fd {fd:e} vs {:e}",
                grads.blocks[b][i]
            ));
        }
    }

    if total > FULL_CHECK_LIMIT {
        // Directional derivative along a random unit direction covers every coordinate at once.
        let (_, base_pattern) = probe.eval(bag);
        for _attempt in 0..4 {
            let dir: Vec<Vec<f64>> = sizes
                .iter()
                .map(|&n| (0..n).map(|_| rng.normal()).collect())
                .collect();
            let norm = dir.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            let saved: Vec<Vec<f32>> = probe.params().iter().map(|b| b.to_vec()).collect();
            let shifted = |sign: f64, probe: &mut Probe| -> Vec<Vec<f32>> {
                for ((block, d), s) in probe.params().into_iter().zip(&dir).zip(&saved) {
                    for ((v, dv), sv) in block.iter_mut().zip(d).zip(s) {
                        *v = (f64::from(*sv) + sign * FD_EPS * dv / norm) as f32;
                    }
                }
                probe.params().iter().map(|b| b.to_vec()).collect()
            };
            let p_plus = shifted(1.0, probe);
            let (lp, pat_p) = probe.eval(bag);
            let p_minus = shifted(-1.0, probe);
            let (lm, pat_m) = probe.eval(bag);
            for (block, s) in probe.params().into_iter().zip(&saved) {
                block.copy_from_slice(s);
            }
            if pat_p != base_pattern || pat_m != base_pattern {
                stats.kinks += 1;
                continue;
            }
            let predicted: f64 = grads
                .blocks
                .iter()
                .zip(p_plus.iter().zip(&p_minus))
                .flat_map(|(g, (pp, pm))| {
                    g.iter()
                        .zip(pp.iter().zip(pm))
                        .map(|(g, (a, b))| g * (f64::from(*a) - f64::from(*b)))
                })
                .sum();
            let step = 2.0 * FD_EPS;
            let err = rel_err((lp - lm) / step, predicted / step);
            stats.worst = stats.worst.max(err);
            stats.directions += 1;
            if err >= FD_TOL && stats.failures.len() < 5 {
                stats
                    .failures
                    .push(format!("{label} direction: {:e} vs {predicted:e}", lp - lm));
            }
            break;
        }
    }
}

fn gradient_case(d: usize, h: usize, a: usize, n: usize, seed: u64) -> FdStats {
    let mut stats = FdStats::default();
    let case_seed = seed * 1_000_003 + (d * 7919 + h * 31 + a * 17 + n) as u64;
    let mut rng = StreamRng::new(case_seed, 77);
    let bag = random_bag(&mut rng, n, d, LabelSet::default());
    let dims = ModelDims::new(d, h, a);
    let label = format!("D{d} H{h} A{a} N{n} seed{seed}");
    let c = [rng.normal(), rng.normal()];
    let mut probe = Probe::Classifier(MilClassifier::init(dims, case_seed).unwrap(), c);
    fd_case(
        &mut probe,
        &bag,
        &mut rng,
        &format!("classifier {label}"),
        &mut stats,
    );
    let mut r = MilRegressor::init(dims, case_seed).unwrap();
    r.target_offset = 98.6;
    r.target_scale = 1.7;
    let mut probe = Probe::Regressor(r, rng.normal());
    fd_case(
        &mut probe,
        &bag,
        &mut rng,
        &format!("regressor {label}"),
        &mut stats,
    );
    stats
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut cases = Vec::new();
    for d in [4usize, 64] {
        for h in [8usize, 512] {
            for a in [4usize, 256] {
                for n in [1usize, 2, 17, 100] {
                    for seed in 0..10u64 {
                        cases.push((d, h, a, n, seed));
                    }
                }
            }
        }
    }
    let per_case: Vec<FdStats> = cases
        .par_iter()
        .map(|&(d, h, a, n, seed)| gradient_case(d, h, a, n, seed))
        .collect();
    let mut stats = FdStats::default();
    for s in per_case {
        stats.checked += s.checked;
        stats.interval += s.interval;
        stats.kinks += s.kinks;
        stats.directions += s.directions;
        stats.worst = stats.worst.max(s.worst);
        stats.failures.extend(s.failures);
    }
    stats.failures.truncate(5);
    let elapsed = start.elapsed();
    let detail = format!(
        "{} cases, {} coordinates ({} against interval mean) + {} directions, worst rel err {:.2e}, {} kink skips, {:.1}s{}",
        cases.len(),
        stats.checked,
        stats.interval,
        stats.directions,
        stats.worst,
        stats.kinks,
        elapsed.as_secs_f64(),
        if stats.failures.is_empty() { String::new() } else { format!("; {}", stats.failures.join("; ")) }
    )
    ;
    check(
        stats.failures.is_empty() && elapsed < Duration::from_secs(120),
        detail,
    )
}

// ------------------------------------------------------------ criteria 2 and 3

struct Planted {
    set: SyntheticSet,
    model: Option<MilClassifier>,
    train_time: Duration,
}

const TRAIN_BAGS: std::ops::Range<usize> = 0..200;
const VALID_BAGS: std::ops::Range<usize> = 200..240;
const TEST_BAGS: std::ops::Range<usize> = 240..300;

fn planted_model() -> Result<Planted, String> {
    let set = generate_bags(&SyntheticSpec {
        n_bags: 300,
        seed: 42,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let start = Instant::now();
    let config = TrainConfig {
        seed: 42,
        ..Default::default()
    };
    let out = train_bags_with(
        &set.bags[TRAIN_BAGS],
        &set.bags[VALID_BAGS],
        Task::Mir,
        &config,
    )
    .map_err(|e| e.to_string())?;
    let model = match out.model {
        MilModel::Classifier(m) => m,
        MilModel::Regressor(_) => return Err("expected a classifier".into()),
    };
    Ok(Planted {
        set,
        model: Some(model),
        train_time: start.elapsed(),
    })
}

fn criterion_classification(p: &Planted) -> Outcome {
    let model = MilModel::Classifier(p.model.clone().expect("trained"));
    let (report, _) =
        evaluate(&model, &p.set.bags[TEST_BAGS], Task::Mir).map_err(|e| e.to_string())?;
    let EvalReport::Classification(s) = report else {
        return Err("expected a classification report".into());
    };
    let ba = s.report.balanced_accuracy;
    check(
        ba >= 0.95 && s.auroc >= 0.98 && p.train_time < Duration::from_secs(300),
        format!(
            "balanced accuracy {ba:.4} (>= 0.95), AUROC {:.4} (>= 0.98), trained in {:.0}s",
            s.auroc,
            p.train_time.as_secs_f64()
        ),
    )
}

fn criterion_localization(p: &Planted) -> Outcome {
    let model = p.model.as_ref().expect("trained");
    let mut precisions = Vec::new();
    for i in TEST_BAGS {
        let planted = &p.set.planted[i];
        if planted.is_empty() {
            continue;
        }
        let out = model.forward(&p.set.bags[i]).map_err(|e| e.to_string())?;
        let top = top_k_patches(out.attention.branch(1).map_err(|e| e.to_string())?, 5)
            .map_err(|e| e.to_string())?;
        let hits = top
            .iter()
            .filter(|j| planted.binary_search(j).is_ok())
            .count();
        precisions.push(hits as f64 / 5.0);
    }
    let mean = precisions.iter().sum::<f64>() / precisions.len() as f64;
    check(
        mean >= 0.80,
        format!(
            "mean top-5 precision {mean:.4} (>= 0.80) over {} positive bags",
            precisions.len()
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

/// Model widths for the regression runs.
const REGRESSION_HIDDEN: usize = 128;
const REGRESSION_ATTENTION: usize = 64;

fn criterion_regression() -> Outcome {
    let set = generate_regression_bags(
        &SyntheticSpec {
            n_bags: 500,
            seed: 42,
            ..Default::default()
        },
        &RegressionRule::default(),
    )
    .map_err(|e| e.to_string())?;
    let bags = &set.bags;
    let mut lines = Vec::new();
    let mut ok = true;
    for loss in [LossKind::Mse, LossKind::Wmse] {
        let config = TrainConfig {
            loss,
            seed: 42,
            hidden: REGRESSION_HIDDEN,
            attention: REGRESSION_ATTENTION,
            ..Default::default()
        };
        let out = train_bags_with(&bags[..300], &bags[300..400], Task::TMax, &config)
            .map_err(|e| e.to_string())?;
        let MilModel::Regressor(m) = &out.model else {
            return Err("expected a regressor".into());
        };
        let mut preds = Vec::new();
        let mut targets = Vec::new();
        for bag in &bags[400..] {
            preds.push(m.forward(bag).map_err(|e| e.to_string())?.prediction);
            targets.push(Task::TMax.target(bag).map_err(|e| e.to_string())?);
        }
        let stats = regression_report(&preds, &targets).map_err(|e| e.to_string())?;
        ok &= stats.r2 >= 0.7 && (0.7..=1.1).contains(&stats.slope);
        lines.push(format!(
            "{loss}: r2 {:.4} slope {:.4}",
            stats.r2, stats.slope
        ));
    }
    check(
        ok,
        format!("{} (r2 >= 0.7, slope in [0.7, 1.1])", lines.join(", ")),
    )
}

// ---------------------------------------------------------------- criterion 5

fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut twice_wins = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            pos += 1;
        } else {
            neg += 1;
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                twice_wins += 2;
            } else if scores[i] == scores[j] {
                twice_wins += 1;
            }
        }
    }
    twice_wins as f64 / (2 * pos * neg) as f64
}

fn direct_metrics(pred: &[bool], actual: &[bool]) -> [f64; 3] {
    let mut m = [[0.0f64; 2]; 2];
    for (&p, &a) in pred.iter().zip(actual) {
        m[usize::from(a)][usize::from(p)] += 1.0;
    }
    let (tn, fp, fn_, tp) = (m[0][0], m[0][1], m[1][0], m[1][1]);
    let n = tn + fp + fn_ + tp;
    let ba = 0.5 * (tp / (tp + fn_) + tn / (tn + fp));
    let mcc = (tp * tn - fp * fn_) / ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    let po = (tp + tn) / n;
    let pe = ((tp + fp) / n) * ((tp + fn_) / n) + ((tn + fn_) / n) * ((tn + fp) / n);
    [ba, mcc, (po - pe) / (1.0 - pe)]
}

fn criterion_metrics() -> Outcome {
    let mut rng = StreamRng::new(5, 5);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut tries = 0;
    while checked < 1000 {
        tries += 1;
        let n = 2 + rng.below(499) as usize;
        // Coarse score grid forces ties.
        let levels = 1 + rng.below(50);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.below(levels) as f64 / levels as f64)
            .collect();
        let actual: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
        let pred: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
        let (pos, npred) = (
            actual.iter().filter(|&&a| a).count(),
            pred.iter().filter(|&&p| p).count(),
        );
        if pos == 0 || pos == n || npred == 0 || npred == n {
            continue;
        }
        let ours = auroc(&scores, &actual).map_err(|e| e.to_string())?;
        let oracle = pairwise_auroc(&scores, &actual);
        if ours != oracle {
            return Err(format!("set {checked}: AUROC {ours} vs pairwise {oracle}"));
        }
        let report = classification_report(
            &ConfusionCounts::from_predictions(&pred, &actual).map_err(|e| e.to_string())?,
        );
        let direct = direct_metrics(&pred, &actual);
        for (ours, oracle) in [report.balanced_accuracy, report.mcc, report.kappa]
            .iter()
            .zip(direct)
        {
            worst = worst.max((ours - oracle).abs());
        }
        checked += 1;
    }
    check(
        worst <= 1e-12,
        format!("AUROC exact on {checked} sets ({tries} drawn); worst BA/MCC/kappa diff {worst:.1e} (<= 1e-12)"),
    )
}

// ---------------------------------------------------------------- criterion 6

fn criterion_table() -> Outcome {
    // (specificity, sensitivity, reported balanced accuracy) per feature extractor.
    let rows = [
        ("EfficientNet", 0.97, 0.70, 0.837),
        ("Phikon", 0.96, 0.81, 0.885),
        ("UNI", 0.96, 0.79, 0.872),
    ];
    let mut ok = true;
    let parts: Vec<String> = rows
        .iter()
        .map(|&(name, spec, sens, reported)| {
            let ba = balanced_accuracy(sens, spec);
            ok &= (ba - reported).abs() <= 0.005;
            format!("{name} {ba:.4} vs {reported:.3}")
        })
        .collect();
    check(ok, format!("{} (within 0.005)", parts.join(", ")))
}

// ---------------------------------------------------------------- criterion 7

fn criterion_invariants() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 200,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (
        1usize..40,
        1usize..9,
        1usize..17,
        1usize..9,
        any::<u64>(),
        -50.0f64..50.0,
    );
    let result = runner.run(&strategy, |(n, d, h, a, seed, shift)| {
        let mut rng = StreamRng::new(seed, 3);
        let bag = random_bag(&mut rng, n, d, LabelSet::default());
        let model = MilClassifier::init(ModelDims::new(d, h, a), seed).unwrap();
        let out = model.forward(&bag).unwrap();

        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let permuted = model.forward(&bag.permuted(&order).unwrap()).unwrap();
        for c in 0..2 {
            prop_assert!((out.logits[c] - permuted.logits[c]).abs() <= 1e-9);
            prop_assert!((out.probs[c] - permuted.probs[c]).abs() <= 1e-9);
            let w = out.attention.branch(c).unwrap();
            let pw = permuted.attention.branch(c).unwrap();
            for (k, &src) in order.iter().enumerate() {
                prop_assert!((pw[k] - w[src]).abs() <= 1e-9);
            }
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(w.iter().all(|&x| x > 0.0));
        }
        prop_assert!(out.probs.iter().all(|&p| p >= 0.0));
        prop_assert!((out.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);

        let scores: ndarray::Array1<f64> = (0..n).map(|_| rng.normal() * 10.0).collect();
        let base = milslide::mil::layers::softmax(&scores);
        let moved = milslide::mil::layers::softmax(&scores.mapv(|v| v + shift));
        for (x, y) in base.iter().zip(moved.iter()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }

        let mut r = MilRegressor::init(ModelDims::new(d, h, a), seed).unwrap();
        r.target_offset = 3.0;
        let rp = r.forward(&bag).unwrap().prediction;
        let rq = r
            .forward(&bag.permuted(&order).unwrap())
            .unwrap()
            .prediction;
        prop_assert!((rp - rq).abs() <= 1e-9);
        Ok(())
    });
    match result {
        Ok(()) => Ok("permutation, simplex and shift invariance hold on 200 random bags".into()),
        Err(e) => Err(e.to_string()),
    }
}

// ---------------------------------------------------------------- criterion 8

fn same_bits(a: &EmbeddingBag, b: &EmbeddingBag) -> bool {
    a.slide_id() == b.slide_id()
        && a.dim() == b.dim()
        && a.coords() == b.coords()
        && a.labels() == b.labels()
        && a.features()
            .iter()
            .map(|v| v.to_bits())
            .eq(b.features().iter().map(|v| v.to_bits()))
}

fn criterion_formats() -> Outcome {
    let mut rng = StreamRng::new(8, 8);
    let mut round_trips = 0;
    for i in 0..100 {
        let labels = LabelSet {
            mir_stage: (i % 3 != 0).then(|| rng.below(4) as u8),
            wbc: (i % 2 == 0).then(|| rng.uniform_range(4.0, 30.0) as f32),
            t_max: (i % 5 != 0).then(|| rng.uniform_range(97.0, 104.0) as f32),
        };
        let n = 1 + rng.below(60) as usize;
        let d = 1 + rng.below(20) as usize;
        let bag = random_bag(&mut rng, n, d, labels);
        let mut bytes = Vec::new();
        write_bag(&bag, &mut bytes).map_err(|e| e.to_string())?;
        let back = read_bag(bytes.as_slice()).map_err(|e| e.to_string())?;
        let mut again = Vec::new();
        write_bag(&back, &mut again).map_err(|e| e.to_string())?;
        if !same_bits(&bag, &back) || bytes != again {
            return Err(format!("bag {i} did not round-trip"));
        }
        round_trips += 1;
    }

    let bag = random_bag(
        &mut rng,
        20,
        6,
        LabelSet {
            mir_stage: Some(2),
            ..Default::default()
        },
    );
    let mut bag_bytes = Vec::new();
    write_bag(&bag, &mut bag_bytes).map_err(|e| e.to_string())?;
    let model = MilModel::Classifier(MilClassifier::init(ModelDims::new(6, 8, 4), 3).unwrap());
    let mut ckpt_bytes = Vec::new();
    write_checkpoint(&model, &mut ckpt_bytes).map_err(|e| e.to_string())?;
    let mut reg = MilRegressor::init(ModelDims::new(6, 8, 4), 4).unwrap();
    reg.fit_target_scaling(&[98.0, 99.5, 101.0]);
    let reg_model = MilModel::Regressor(reg);
    let mut reg_bytes = Vec::new();
    write_checkpoint(&reg_model, &mut reg_bytes).map_err(|e| e.to_string())?;

    let mut detected = [0usize; 3];
    let mut benign = [0usize; 3];
    for t in 0..100 {
        for (k, bytes) in [&bag_bytes, &ckpt_bytes, &reg_bytes]
            .into_iter()
            .enumerate()
        {
            let mut corrupt = bytes.clone();
            let pos = rng.below(corrupt.len() as u64) as usize;
            corrupt[pos] ^= 1 + rng.below(255) as u8;
            let unchanged = match k {
                0 => match read_bag(corrupt.as_slice()) {
                    Err(_) => false,
                    Ok(b) => {
                        if !same_bits(&b, &bag) {
                            return Err(format!(
                                "bag corruption {t} at byte {pos} went undetected"
                            ));
                        }
                        true
                    }
                },
                _ => {
                    let original = if k == 1 { &model } else { &reg_model };
                    match read_checkpoint(corrupt.as_slice()) {
                        Err(_) => false,
                        Ok(m) => {
                            if &m != original {
                                return Err(format!(
                                    "checkpoint corruption {t} at byte {pos} went undetected"
                                ));
                            }
                            true
                        }
                    }
                }
            };
            if unchanged {
                benign[k] += 1;
            } else {
                detected[k] += 1;
            }
        }
    }
    Ok(format!(
        "{round_trips} bit-exact round trips; corruptions detected bag {}/100, classifier {}/100, regressor {}/100 (benign {:?})",
        detected[0], detected[1], detected[2], benign
    ))
}

// ---------------------------------------------------------------- criterion 9

fn criterion_tiler() -> Outcome {
    let mut rng = StreamRng::new(9, 9);
    for case in 0..50 {
        let scale = [1.0, 2.0, 4.0][rng.below(3) as usize];
        let min_side = (224.0 * scale) as u64;
        let w = (min_side + rng.below(3000)) as u32;
        let h = (min_side + rng.below(3000)) as u32;
        let grid = plan_grid(w, h, 224, scale).map_err(|e| e.to_string())?;
        let s = scale as u32;
        let (cols, rows) = ((w / s) / 224, (h / s) / 224);
        if (grid.cols, grid.rows) != (cols, rows) {
            return Err(format!(
                "case {case}: {w}x{h} at {scale} gave {}x{}, expected {cols}x{rows}",
                grid.cols, grid.rows
            ));
        }
        if case < 5 {
            let level = downsample_area(&RgbImage::from_pixel(w, h, Rgb([180, 60, 150])), scale);
            if level.dimensions() != (grid.level_width, grid.level_height) {
                return Err(format!("case {case}: level image {:?}", level.dimensions()));
            }
        }
    }

    // Magenta left of x = 500, white to the right; tiles never straddle evenly.
    let img = RgbImage::from_fn(1000, 700, |x, _| {
        if x < 500 {
            Rgb([200, 40, 180])
        } else {
            Rgb([255, 255, 255])
        }
    });
    let grid = plan_grid(1000, 700, 224, 1.0).map_err(|e| e.to_string())?;
    let level = downsample_area(&img, 1.0);
    let mask = build_tissue_mask(&level, &grid, 0.10).map_err(|e| e.to_string())?;
    let mut expected = BTreeSet::new();
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let mut tissue = 0u32;
            for y in row * 224..(row + 1) * 224 {
                for x in col * 224..(col + 1) * 224 {
                    tissue += u32::from(saturation(img.get_pixel(x, y)) > 0);
                }
            }
            if f64::from(tissue) / (224.0 * 224.0) >= 0.10 {
                expected.insert((col, row));
            }
        }
    }
    let kept: BTreeSet<(u32, u32)> = mask.kept_coords().iter().map(|c| (c.col, c.row)).collect();
    if kept != expected {
        return Err(format!("half-tissue kept {kept:?}, expected {expected:?}"));
    }

    let blob = RgbImage::from_fn(1344, 896, |x, y| {
        let (dx, dy) = (x as f64 - 600.0, y as f64 - 420.0);
        if dx * dx + dy * dy < 300.0 * 300.0 {
            Rgb([170, 60, 160])
        } else {
            Rgb([245, 245, 245])
        }
    });
    let grid = plan_grid(1344, 896, 224, 2.0).map_err(|e| e.to_string())?;
    let level = downsample_area(&blob, 2.0);
    let mask = build_tissue_mask(&level, &grid, 0.10).map_err(|e| e.to_string())?;
    let seq = extract_tiles_with(&level, &grid, &mask, false).map_err(|e| e.to_string())?;
    let par = extract_tiles_with(&level, &grid, &mask, true).map_err(|e| e.to_string())?;
    if seq != par {
        return Err("parallel and sequential tile sets differ".into());
    }
    Ok(format!(
        "50 grid sizes match floor arithmetic; half-tissue kept {} tiles {:?}; parallel == sequential ({} tiles)",
        kept.len(),
        kept,
        seq.len()
    ))
}

// --------------------------------------------------------------- criterion 10

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_milslide"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn full_pipeline(root: &Path) -> Result<(Vec<u8>, Vec<u8>, Vec<u8>), String> {
    let s = |p: &Path| p.to_str().expect("utf8").to_string();
    let data = root.join("bags");
    let manifest = data.join("manifest.tsv");
    let model = root.join("model.milw");
    let report = root.join("eval.csv");
    let features = root.join("features.csv");
    run_cli(&[
        "synth",
        "--bags",
        "60",
        "--instances",
        "30",
        "--dim",
        "16",
        "--seed",
        "7",
        "--out",
        &s(&data),
    ])?;
    run_cli(&[
        "split",
        "--dir",
        &s(&data),
        "--frac",
        "0.6:0.2:0.2",
        "--seed",
        "7",
    ])?;
    run_cli(&[
        "train",
        "--manifest",
        &s(&manifest),
        "--task",
        "mir",
        "--epochs",
        "8",
        "--hidden",
        "32",
        "--attention",
        "16",
        "--lr",
        "5e-4",
        "--seed",
        "7",
        "--out",
        &s(&model),
    ])?;
    run_cli(&[
        "eval",
        "--model",
        &s(&model),
        "--manifest",
        &s(&manifest),
        "--out",
        &s(&report),
    ])?;
    run_cli(&[
        "export-features",
        "--model",
        &s(&model),
        "--manifest",
        &s(&manifest),
        "--out",
        &s(&features),
    ])?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    Ok((read(&report)?, read(&model)?, read(&features)?))
}

fn criterion_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = full_pipeline(a.path())?;
    let second = full_pipeline(b.path())?;
    check(
        first == second,
        format!(
            "eval CSV ({} B), checkpoint ({} B) and feature CSV ({} B) byte-identical: {}",
            first.0.len(),
            first.1.len(),
            first.2.len(),
            first == second
        ),
    )
}

// ------------------------------------------------------------------- driver

fn main() {
    let selected: Option<BTreeSet<usize>> = std::env::var("MILSLIDE_ACCEPT")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |i: usize| selected.as_ref().is_none_or(|s| s.contains(&i));

    let planted = (wanted(2) || wanted(3)).then(planted_model);
    let get_planted = || -> Result<&Planted, String> {
        planted
            .as_ref()
            .expect("trained when selected")
            .as_ref()
            .map_err(Clone::clone)
    };

    let names = [
        "gradient correctness",
        "planted-signal classification",
        "attention localization",
        "regression sanity",
        "metric oracle equivalence",
        "reported table consistency",
        "MIL invariants",
        "format robustness",
        "tiler correctness",
        "end-to-end determinism",
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (i, name) in names.iter().enumerate() {
        let id = i + 1;
        if !wanted(id) {
            continue;
        }
        let start = Instant::now();
        let outcome = match id {
            1 => criterion_gradients(),
            2 => get_planted().and_then(criterion_classification),
            3 => get_planted().and_then(criterion_localization),
            4 => criterion_regression(),
            5 => criterion_metrics(),
            6 => criterion_table(),
            7 => criterion_invariants(),
            8 => criterion_formats(),
            9 => criterion_tiler(),
            _ => criterion_determinism(),
        };
        ran += 1;
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {id:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
