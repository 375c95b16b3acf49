//! Acceptance suite: one PASS/FAIL line per numbered criterion, followed by
//! supplementary checks on the desk-scale runs. Tolerances are pinned
//! below. Exit status is nonzero when a numbered criterion fails.
//!
//! Desk scale: 600 train / 200 copyrighted / 600 non-member sequences,
//! 8 features, length 20, desk model preset, 10 model seeds.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cap_core::audit::{
    auc_gain, emit_report, precision_at_k, run_audit, AuditReport, DeltaRule, RunSeeds,
    DEFAULT_K_LIST,
};
use cap_core::datagen::{generate_synthetic, DatasetBundle, Label, SyntheticConfig};
use cap_core::extreme_stats::{fit_gpd, select_threshold};
use cap_core::models::{distance, to_precision, Mode, ModelConfig, Preset, Seq2SeqModel, Tape};
use cap_core::training::{
    prune_active, train_prompter, train_target, PruningOptions, ThresholdRule, TrainOptions,
    TrainReport,
};

const SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];
const DATA_SEED: u64 = 0;

// Criterion 1
const SEP_PRECISION_MIN: f64 = 90.0;
const SEP_AUC_MIN: f64 = 0.95;
// Criterion 2
const OVERLAP_AUC_RANGE: (f64, f64) = (0.30, 0.70);
const OVERLAP_P10_GAP: f64 = 30.0;
// Criterion 3
const BENCH_SEEDS: [u64; 2] = [0, 1];
const SPEEDUP_RATIO_MAX: f64 = 0.8;
const AUC_DEGRADATION_MAX: f64 = 0.05;
// Criterion 5
const XI_TOL: f64 = 0.1;
const SIGMA_REL_TOL: f64 = 0.10;
// Criterion 6
const MC_P100_TOL: f64 = 3.0;
const MC_AUC_TOL: f64 = 0.02;
// Criterion 7
const GRAD_REL_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

const TARGET_OPTS: TrainOptions = TrainOptions {
    max_epochs: 200,
    batch_size: 32,
    lr: 1e-3,
    seed: 0,
    es_patience: 30,
};
const PROMPTER_OPTS: TrainOptions = TrainOptions {
    max_epochs: 30,
    batch_size: 32,
    lr: 1e-3,
    seed: 0,
    es_patience: 1,
};
const ALPHA: usize = 2;
const OMEGA: f64 = 0.1;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn desk_bundle(overlap: bool) -> DatasetBundle {
    generate_synthetic(&SyntheticConfig {
        n_per_subset: 600,
        n_copyrighted: 200,
        features: 8,
        seq_len: 20,
        overlap,
        seed: DATA_SEED,
    })
    .unwrap()
    .normalized()
}

fn pairs(split: &[cap_core::datagen::SequenceSample]) -> Vec<(Array2<f64>, Array2<f64>)> {
    split.iter().map(|s| (s.key.clone(), s.value.clone())).collect()
}

fn desk_config() -> ModelConfig {
    Preset::DESK.config(10, 8, 10, 8)
}

fn train_phi(bundle: &DatasetBundle, seed: u64) -> (Seq2SeqModel<f32>, TrainReport) {
    let opts = TrainOptions { seed, ..TARGET_OPTS };
    train_target::<f32>(&desk_config(), &pairs(&bundle.d_tr), &pairs(&bundle.d_v), &opts).unwrap()
}

struct PrompterRun {
    theta: Seq2SeqModel<f32>,
    report: TrainReport,
    audit: AuditReport,
    seconds: f64,
}

fn run_prompter(
    bundle: &DatasetBundle,
    phi: &Seq2SeqModel<f32>,
    seed: u64,
    pruning: Option<PruningOptions>,
) -> PrompterRun {
    let values: Vec<Array2<f64>> = bundle.d2().iter().map(|s| s.value.clone()).collect();
    let opts = TrainOptions { seed, ..PROMPTER_OPTS };
    let started = Instant::now();
    let (theta, report) =
        train_prompter(&desk_config().swapped(), phi, &values, &opts, pruning.as_ref()).unwrap();
    let seconds = started.elapsed().as_secs_f64();
    let seeds = RunSeeds {
        data: DATA_SEED,
        target: seed,
        prompter: seed,
    };
    let audit = run_audit(
        &theta,
        phi,
        &bundle.d2(),
        DeltaRule::default(),
        &DEFAULT_K_LIST,
        "acceptance",
        seeds,
        pruning.is_some(),
    )
    .unwrap();
    PrompterRun {
        theta,
        report,
        audit,
        seconds,
    }
}

struct SeedRuns {
    seed: u64,
    phi: Seq2SeqModel<f32>,
    phi_report: TrainReport,
    separable: PrompterRun,
    overlap: PrompterRun,
    phi_digest_before: [u8; 32],
}

/// Separable and overlap bundles share `d_tr` and `d_v` for a given data
/// seed, so one target per seed serves both.
fn desk_runs(sep: &DatasetBundle, ovl: &DatasetBundle) -> Vec<SeedRuns> {
    assert_eq!(sep.d_tr, ovl.d_tr);
    assert_eq!(sep.d_v, ovl.d_v);
    SEEDS
        .iter()
        .map(|&seed| {
            let (phi, phi_report) = train_phi(sep, seed);
            let phi_digest_before = phi.param_digest();
            let separable = run_prompter(sep, &phi, seed, None);
            let overlap = run_prompter(ovl, &phi, seed, None);
            eprintln!(
                "  seed {seed}: target best epoch {} | separable AUC {:.3} | overlap AUC {:.3}",
                phi_report.best_epoch, separable.audit.auc_gain, overlap.audit.auc_gain
            );
            SeedRuns {
                seed,
                phi,
                phi_report,
                separable,
                overlap,
                phi_digest_before,
            }
        })
        .collect()
}

fn metric(runs: &[SeedRuns], pick: impl Fn(&SeedRuns) -> f64) -> f64 {
    mean(&runs.iter().map(pick).collect::<Vec<_>>())
}

fn criterion_1(runs: &[SeedRuns]) -> Outcome {
    let p5 = metric(runs, |r| r.separable.audit.precision_at[&5]);
    let p10 = metric(runs, |r| r.separable.audit.precision_at[&10]);
    let auc = metric(runs, |r| r.separable.audit.auc_gain);
    outcome(
        p5 >= SEP_PRECISION_MIN && p10 >= SEP_PRECISION_MIN && auc >= SEP_AUC_MIN,
        format!("mean P@5 {p5:.1}, P@10 {p10:.1}, AUC-Gain {auc:.4} over {} seeds", runs.len()),
    )
}

fn criterion_2(runs: &[SeedRuns]) -> Outcome {
    let auc = metric(runs, |r| r.overlap.audit.auc_gain);
    let p10 = metric(runs, |r| r.overlap.audit.precision_at[&10]);
    let p10_sep = metric(runs, |r| r.separable.audit.precision_at[&10]);
    outcome(
        auc >= OVERLAP_AUC_RANGE.0 && auc <= OVERLAP_AUC_RANGE.1 && p10 <= p10_sep - OVERLAP_P10_GAP,
        format!("overlap AUC-Gain {auc:.4}, P@10 {p10:.1} vs separable {p10_sep:.1}"),
    )
}

fn criterion_3(sep: &DatasetBundle, runs: &[SeedRuns]) -> Outcome {
    let (mut t_base, mut t_opt) = (0.0, 0.0);
    let mut worst_delta: f64 = 0.0;
    let mut pruned = true;
    let mut notes = Vec::new();
    for &seed in &BENCH_SEEDS {
        let phi = &runs.iter().find(|r| r.seed == seed).unwrap().phi;
        let base = run_prompter(sep, phi, seed, None);
        let opt = run_prompter(sep, phi, seed, Some(PruningOptions::gpd(ALPHA, OMEGA)));
        t_base += base.seconds;
        t_opt += opt.seconds;
        worst_delta = worst_delta.max((opt.audit.auc_gain - base.audit.auc_gain).abs());
        pruned &= !opt.report.pruning_events.is_empty();
        notes.push(format!(
            "s{seed}: {:.1}s/{:.1}s final |I| {}",
            opt.seconds,
            base.seconds,
            opt.report.active_sizes.last().unwrap()
        ));
    }
    let ratio = t_opt / t_base;
    outcome(
        pruned && ratio <= SPEEDUP_RATIO_MAX && worst_delta <= AUC_DEGRADATION_MAX,
        format!(
            "time ratio {ratio:.3}, max |dAUC| {worst_delta:.4}, pruning fired {pruned} ({})",
            notes.join(", ")
        ),
    )
}

fn tiny_config(len: usize, features: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 1,
        d_model: 8,
        d_ff: 8,
        in_features: features,
        out_features: features,
        in_len: len,
        out_len: len,
        dropout: 0.0,
    }
}

fn random_values(n: usize, rng: &mut ChaCha8Rng) -> Vec<Array2<f64>> {
    (0..n)
        .map(|_| Array2::from_shape_fn((2, 2), |_| rng.random::<f64>() * 4.0 - 2.0))
        .collect()
}

fn floor_holds(report: &TrainReport, total: usize) -> bool {
    let sizes_ok = report.active_sizes.iter().all(|&s| 3 * s > total);
    let events_ok = report.pruning_events.iter().all(|e| 3 * e.active_after > total);
    let monotone = report.active_sizes.windows(2).all(|w| w[1] <= w[0]);
    sizes_ok && events_ok && monotone
}

fn criterion_4() -> Outcome {
    let cfg = tiny_config(2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut phi = Seq2SeqModel::<f32>::build(cfg, 4).unwrap();
    phi.set_mode(Mode::Inference);
    let opts = TrainOptions {
        max_epochs: 8,
        batch_size: 4,
        lr: 1e-2,
        seed: 0,
        es_patience: 1,
    };
    let forced = PruningOptions {
        alpha: 1,
        omega: f64::MAX,
        rule: ThresholdRule::Exhaustive,
    };
    let mut failures = Vec::new();
    let mut reached_floor = 0;
    for total in 3..=30 {
        let values = random_values(total, &mut rng);
        let (_, report) = train_prompter(&cfg, &phi, &values, &opts, Some(&forced)).unwrap();
        let floor = total / 3 + 1;
        if !floor_holds(&report, total) {
            failures.push(format!("|D2|={total}"));
        }
        if report.active_sizes.last() == Some(&floor) || report.pruning_events.last().map(|e| e.active_after) == Some(floor) {
            reached_floor += 1;
        }
        // Exhaustive pure pruning from every starting size and threshold.
        for start in (total / 3 + 1)..=total {
            let errors: Vec<f64> = (0..start).map(|_| rng.random::<f64>()).collect();
            let idx: Vec<usize> = (0..start).collect();
            let mut taus = errors.clone();
            taus.push(f64::NEG_INFINITY);
            for &tau in &taus {
                let mut active = idx.clone();
                prune_active(&mut active, &idx, &errors, tau, total);
                let removed: Vec<usize> = idx.iter().copied().filter(|i| !active.contains(i)).collect();
                let min_removed = removed.iter().map(|&i| errors[i]).fold(f64::INFINITY, f64::min);
                let max_kept = active.iter().map(|&i| errors[i]).fold(f64::NEG_INFINITY, f64::max);
                if 3 * active.len() <= total {
                    failures.push(format!("pure |D2|={total} start={start}"));
                }
                if removed.iter().any(|&i| errors[i] < tau) || (!removed.is_empty() && min_removed < max_kept) {
                    failures.push(format!("order |D2|={total} start={start}"));
                }
            }
        }
    }
    // Randomized GPD-driven runs.
    let mut random_runs = 0;
    let mut random_events = 0;
    for _ in 0..12 {
        let total = rng.random_range(30..90);
        let values = random_values(total, &mut rng);
        let p = PruningOptions::gpd(rng.random_range(1..3), rng.random::<f64>() * 0.5);
        let o = TrainOptions {
            max_epochs: rng.random_range(4..10),
            seed: rng.random(),
            ..opts
        };
        let (_, report) = train_prompter(&cfg, &phi, &values, &o, Some(&p)).unwrap();
        random_runs += 1;
        random_events += report.pruning_events.len();
        if !floor_holds(&report, total) {
            failures.push(format!("random |D2|={total}"));
        }
    }
    failures.dedup();
    outcome(
        failures.is_empty() && reached_floor == 28 && random_events > 0,
        format!(
            "28 forced runs ({reached_floor} reached the floor), {random_runs} random runs ({random_events} pruning events), violations: {}",
            if failures.is_empty() { "none".into() } else { failures.join(" ") }
        ),
    )
}

/// Inverse-CDF draw from GPD(xi, sigma) at location 0.
fn sample_gpd(xi: f64, sigma: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            if xi == 0.0 {
                -sigma * (1.0 - u).ln()
            } else {
                sigma / xi * ((1.0 - u).powf(-xi) - 1.0)
            }
        })
        .collect()
}

fn criterion_5() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for (i, &(xi, sigma)) in [(0.0, 1.0), (0.25, 2.0), (-0.2, 1.0), (0.5, 0.5)].iter().enumerate() {
        let x = sample_gpd(xi, sigma, 10_000, 100 + i as u64);
        let fit = fit_gpd(&x).unwrap();
        // The location is the sample minimum, slightly above 0.
        let good = (fit.xi - xi).abs() <= XI_TOL && ((fit.sigma - sigma) / sigma).abs() <= SIGMA_REL_TOL;
        ok &= good;
        notes.push(format!("({xi},{sigma})->({:.3},{:.3})", fit.xi, fit.sigma));
    }
    let mut band_ok = 0;
    let cases = [(1_000, 1), (1_000, 2), (2_500, 3), (5_000, 4), (10_000, 5)];
    for &(n, seed) in &cases {
        let mut x = sample_gpd(0.0, 1.0, n, seed);
        let tau = select_threshold(&x, 0.8).unwrap();
        x.sort_by(f64::total_cmp);
        let pct = |q: f64| x[((n - 1) as f64 * q).round() as usize];
        if x.contains(&tau) && tau >= pct(0.75) && tau <= pct(0.85) {
            band_ok += 1;
        }
    }
    ok &= band_ok == cases.len();
    outcome(
        ok,
        format!("fits {}; threshold in [p75, p85] for {band_ok}/{} exponential samples", notes.join(" "), cases.len()),
    )
}

/// Brute-force Precision@K and AUC-Gain with exact integer bookkeeping.
fn brute_force(labels: &[bool]) -> (Vec<f64>, Option<f64>) {
    let n = labels.len();
    let m = labels.iter().filter(|&&b| b).count();
    let precisions = (1..=n)
        .map(|k| 100.0 * labels[..k].iter().filter(|&&b| b).count() as f64 / k as f64)
        .collect();
    if m == 0 {
        return (precisions, None);
    }
    // Twice the trapezoid sum, in units of 1/(n*m).
    let twice_area = |seq: &[bool]| -> u64 {
        let mut y = 0u64;
        let mut acc = 0u64;
        for &b in seq {
            let prev = y;
            y += b as u64;
            acc += prev + y;
        }
        acc
    };
    let mut ideal = labels.to_vec();
    ideal.sort_by(|a, b| b.cmp(a));
    (precisions, Some(twice_area(labels) as f64 / twice_area(&ideal) as f64))
}

fn criterion_6() -> Outcome {
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    for len in 1..=8usize {
        for mask in 0u32..(1 << len) {
            let bits: Vec<bool> = (0..len).map(|i| mask >> i & 1 == 1).collect();
            let labels: Vec<Label> = bits
                .iter()
                .map(|&b| if b { Label::MemberCopyrighted } else { Label::NonmemberCopyrighted })
                .collect();
            let (p_ref, auc_ref) = brute_force(&bits);
            for k in 1..=len {
                if (precision_at_k(&labels, k).unwrap() - p_ref[k - 1]).abs() > 1e-9 {
                    mismatches += 1;
                }
            }
            match (auc_gain(&labels), auc_ref) {
                (Ok(a), Some(r)) if (a - r).abs() <= 1e-12 => {}
                (Err(_), None) => {}
                _ => mismatches += 1,
            }
            checked += 1;
        }
    }
    // Random rankings of 600 members among 2,600.
    let mut rng = ChaCha8Rng::seed_from_u64(2600);
    let mut labels: Vec<Label> = (0..2600)
        .map(|i| if i < 600 { Label::MemberCopyrighted } else { Label::NonmemberCopyrighted })
        .collect();
    let (mut p100, mut auc) = (0.0, 0.0);
    const SHUFFLES: usize = 1000;
    for _ in 0..SHUFFLES {
        labels.shuffle(&mut rng);
        p100 += precision_at_k(&labels, 100).unwrap();
        auc += auc_gain(&labels).unwrap();
    }
    p100 /= SHUFFLES as f64;
    auc /= SHUFFLES as f64;
    let expected_p100 = 100.0 * 600.0 / 2600.0;
    // Random raw area is 1/2 + 1/(2N) in expectation; ideal area 1 - M/(2N).
    let expected_auc = (0.5 + 0.5 / 2600.0) / (1.0 - 600.0 / 5200.0);
    outcome(
        mismatches == 0
            && (p100 - expected_p100).abs() <= MC_P100_TOL
            && (auc - expected_auc).abs() <= MC_AUC_TOL,
        format!(
            "{checked} label sequences, {mismatches} mismatches; random P@100 {p100:.2} (expect {expected_p100:.2}), AUC-Gain {auc:.4} (expect {expected_auc:.4})"
        ),
    )
}

fn composite_loss(theta: &Seq2SeqModel<f64>, phi: &Seq2SeqModel<f64>, v: &Array2<f64>, batch: usize) -> f64 {
    let mut tape = Tape::new();
    let input = tape.constant(v.clone());
    let prompts = theta.trace(&mut tape, input, batch, None).unwrap();
    let out = phi.trace(&mut tape, prompts.output, batch, None).unwrap();
    let loss = tape.mse(out.output, v.clone());
    tape.value(loss)[[0, 0]]
}

fn criterion_7() -> Outcome {
    let cfg = Preset::DESK.config(4, 3, 5, 3);
    assert_eq!(cfg.n_layers, 2);
    let mut phi = Seq2SeqModel::<f64>::build(cfg, 70).unwrap();
    phi.set_mode(Mode::Inference);
    let mut theta = Seq2SeqModel::<f64>::build(cfg.swapped(), 71).unwrap();
    let batch = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let v = Array2::from_shape_fn((batch * 5, 3), |_| rng.random::<f64>() * 2.0 - 1.0);

    let mut tape = Tape::new();
    let input = tape.constant(v.clone());
    let prompts = theta.trace(&mut tape, input, batch, None).unwrap();
    let out = phi.trace(&mut tape, prompts.output, batch, None).unwrap();
    let loss = tape.mse(out.output, v.clone());
    let grads = tape.backward(loss);
    let analytic: Vec<Array2<f64>> = prompts
        .params
        .iter()
        .zip(&theta.params().values)
        .map(|(&p, val)| grads.get(p).cloned().unwrap_or_else(|| Array2::zeros(val.dim())))
        .collect();

    let (mut num_sq, mut diff_sq, mut worst, mut checked) = (0.0, 0.0, 0.0f64, 0);
    let n_tensors = theta.params().len();
    for t in 0..n_tensors {
        let (r, c) = theta.params().values[t].dim();
        for _ in 0..3 {
            let (i, j) = (rng.random_range(0..r), rng.random_range(0..c));
            let orig = theta.params().values[t][[i, j]];
            theta.params_mut().values[t][[i, j]] = orig + FD_STEP;
            let up = composite_loss(&theta, &phi, &v, batch);
            theta.params_mut().values[t][[i, j]] = orig - FD_STEP;
            let down = composite_loss(&theta, &phi, &v, batch);
            theta.params_mut().values[t][[i, j]] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[t][[i, j]];
            num_sq += numeric * numeric;
            diff_sq += (a - numeric).powi(2);
            let scale = a.abs().max(numeric.abs());
            if scale > 1e-7 {
                worst = worst.max((a - numeric).abs() / scale);
            }
            checked += 1;
        }
    }
    let rel = (diff_sq / num_sq).sqrt();
    outcome(
        rel <= GRAD_REL_TOL && worst <= GRAD_REL_TOL,
        format!("{checked} coordinates over {n_tensors} tensors: aggregate rel err {rel:.2e}, worst entry {worst:.2e}"),
    )
}

fn criterion_8(runs: &[SeedRuns]) -> Outcome {
    let frozen = runs.iter().all(|r| r.phi.param_digest() == r.phi_digest_before);
    // Rerun one seed end to end on a smaller bundle and compare report bytes.
    let small = generate_synthetic(&SyntheticConfig {
        n_per_subset: 120,
        n_copyrighted: 40,
        features: 8,
        seq_len: 20,
        overlap: false,
        seed: 3,
    })
    .unwrap()
    .normalized();
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    let mut digests = Vec::new();
    for rep in 0..2 {
        let opts = TrainOptions {
            max_epochs: 5,
            seed: 11,
            ..TARGET_OPTS
        };
        let (phi, _) =
            train_target::<f32>(&desk_config(), &pairs(&small.d_tr), &pairs(&small.d_v), &opts).unwrap();
        let before = phi.param_digest();
        let run = run_prompter(&small, &phi, 11, Some(PruningOptions::gpd(1, 0.5)));
        let frozen_here = phi.param_digest() == before;
        let path = dir.path().join(format!("r{rep}.json"));
        emit_report(&run.audit, &path).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
        digests.push((before, run.theta.param_digest(), frozen_here));
    }
    let identical = bytes[0] == bytes[1] && digests[0] == digests[1];
    let frozen_small = digests.iter().all(|d| d.2);
    outcome(
        frozen && frozen_small && identical,
        format!(
            "target digests unchanged across {} desk seeds: {frozen}; repeated run reports byte-identical: {identical} ({} bytes)",
            runs.len(),
            bytes[0].len()
        ),
    )
}

/// Independent pass: per-sample forward and a hand-written MSE.
fn independent_distances(run: &PrompterRun, phi: &Seq2SeqModel<f32>, bundle: &DatasetBundle) -> (f64, f64) {
    let (mut member, mut nonmember) = (Vec::new(), Vec::new());
    for s in bundle.d2() {
        let v = to_precision::<f32>(&s.value);
        let k = run.theta.forward(&v).unwrap();
        let v_hat = phi.forward(&k).unwrap();
        let sq: f64 = v
            .iter()
            .zip(v_hat.iter())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        let d = sq / v.len() as f64;
        if s.label.is_member() {
            member.push(d);
        } else {
            nonmember.push(d);
        }
    }
    (mean(&member), mean(&nonmember))
}

fn supplementary(runs: &[SeedRuns], sep: &DatasetBundle) -> Vec<(String, Outcome)> {
    let mut out = Vec::new();
    let first = &runs[0];

    let (m, n) = independent_distances(&first.separable, &first.phi, sep);
    out.push((
        "prompter: mean distance D_c < D_nc (independent pass)".into(),
        outcome(m < n, format!("seed {}: {m:.4} < {n:.4}", first.seed)),
    ));

    let ranked = &first.separable.audit.ranked;
    let mut ds: Vec<f64> = ranked.iter().map(|r| r.distance).collect();
    ds.sort_by(f64::total_cmp);
    let median = (ds[(ds.len() - 1) / 2] + ds[ds.len() / 2]) / 2.0;
    let v: Vec<_> = ranked.iter().filter(|r| r.distance < median).collect();
    let members = v.iter().filter(|r| r.label.is_member()).count();
    let base = sep.d_c.len() as f64 / (sep.d_c.len() + sep.d_nc.len()) as f64;
    let rate = members as f64 / v.len().max(1) as f64;
    out.push((
        "audit: violations at median delta enriched in members".into(),
        outcome(rate > base, format!("{members}/{} = {rate:.3} > base rate {base:.3}", v.len())),
    ));

    let recomputed: Vec<f64> = DEFAULT_K_LIST
        .iter()
        .map(|&k| {
            100.0 * ranked[..k].iter().filter(|r| r.label == Label::MemberCopyrighted).count() as f64 / k as f64
        })
        .collect();
    let stored: Vec<f64> = DEFAULT_K_LIST.iter().map(|k| first.separable.audit.precision_at[k]).collect();
    out.push((
        "audit: report Precision@K equals recomputation from ranking".into(),
        outcome(recomputed == stored, format!("{stored:?}")),
    ));

    // Values are unpredictable from keys beyond their pattern mean, so the
    // bound below cannot be met by any model on this generator; reported
    // as measured.
    let all_values: Vec<f64> = sep
        .d_tr
        .iter()
        .chain(&sep.d_v)
        .chain(&sep.d_nc)
        .flat_map(|s| s.value.iter().copied().collect::<Vec<_>>())
        .collect();
    let mu = mean(&all_values);
    let var = all_values.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / all_values.len() as f64;
    let val = metric(runs, |r| r.phi_report.best_loss);
    let train_floor: f64 = {
        let d_tr_vals: Vec<f64> = sep.d_tr.iter().flat_map(|s| s.value.iter().copied().collect::<Vec<_>>()).collect();
        let m = mean(&d_tr_vals);
        d_tr_vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d_tr_vals.len() as f64
    };
    out.push((
        "target: validation distance <= 0.1 x variance of normalized values".into(),
        outcome(
            val <= 0.1 * var,
            format!(
                "mean best validation {val:.3} vs bound {:.3}; d_tr value variance {train_floor:.3}",
                0.1 * var
            ),
        ),
    ));

    let phi_dist: Vec<f64> = sep
        .d_tr
        .iter()
        .take(50)
        .map(|s| {
            let k = to_precision::<f32>(&s.key);
            distance(&to_precision::<f32>(&s.value), &first.phi.forward(&k).unwrap()).unwrap()
        })
        .collect();
    out.push((
        "target: in-distribution distance near the irreducible value variance".into(),
        outcome(
            mean(&phi_dist) <= 1.25 * train_floor,
            format!("{:.3} vs variance {train_floor:.3}", mean(&phi_dist)),
        ),
    ));
    out
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((5, "GPD oracle", criterion_5()));
    results.push((6, "metric oracle equivalence", criterion_6()));
    results.push((7, "gradient check", criterion_7()));
    results.push((4, "floor invariant suite", criterion_4()));

    eprintln!("desk-scale runs over {} seeds...", SEEDS.len());
    let sep = desk_bundle(false);
    let ovl = desk_bundle(true);
    let runs = desk_runs(&sep, &ovl);
    results.push((1, "synthetic separable reproduction", criterion_1(&runs)));
    results.push((2, "synthetic overlap degradation", criterion_2(&runs)));
    results.push((3, "pruning speedup", criterion_3(&sep, &runs)));
    results.push((8, "freeze and determinism", criterion_8(&runs)));
    results.sort_by_key(|r| r.0);

    println!();
    for (id, name, o) in &results {
        println!(
            "[{}] criterion {id}: {name} :: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    for (name, o) in supplementary(&runs, &sep) {
        println!("[{}] example: {name} :: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    let passed = results.iter().filter(|r| r.2.passed).count();
    println!(
        "{passed}/{} criteria passed in {:.0}s",
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if passed != results.len() {
        std::process::exit(1);
    }
}
