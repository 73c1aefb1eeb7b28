// SPDX-License-Identifier: Apache-2.0

//! End-to-end acceptance suite. Every criterion prints one line of the form
//! `criterion N [name]: PASS|WARN|FAIL detail`; only FAIL fails the test.
//! Criteria 7, 8 and 10 are soft: a miss of at most one point is a WARN.

use std::io::Write as _;
use std::time::Instant;

use ares_core::evaluation::{auroc, choose_gamma, evaluate_trained, fpr95, run_ablation_suite, RunReport};
use ares_core::model::gradcheck::check_gradients;
use ares_core::model::{loss_and_backward, Checkpoint, GradientTape, LossSpec, MlpNetwork, NetworkShape, VirtualSource};
use ares_core::numerics::{fit_gaussian, jsd_gauss1d, kld_gauss1d, Gauss1d, GaussianModel, Rng};
use ares_core::synthdata::{DataBundle, DataConfig};
use ares_core::synthesis::{log_densities, sample_virtual_outliers, select_epsilon, ExpandedSet};
use ares_core::training::{train, TrainConfig};

const SEEDS: u64 = 5;
const EPOCH_SEEDS: u64 = 3;
const BENCH_SET: &str = "ring";

#[derive(Clone, Copy, PartialEq, Eq)]
enum Verdict {
    Pass,
    Warn,
    Fail,
}

struct Outcome {
    id: u32,
    name: &'static str,
    verdict: Verdict,
    detail: String,
}

fn report(o: &Outcome) {
    let v = match o.verdict {
        Verdict::Pass => "PASS",
        Verdict::Warn => "WARN",
        Verdict::Fail => "FAIL",
    };
    // Written past the test harness capture so the lines always show.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {} [{}]: {v} {}", o.id, o.name, o.detail);
    let _ = out.flush();
}

fn hard(ok: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

/// Soft comparison of `value ≤ bound`, with one point (0.01) of slack for a warning.
fn soft(value: f64, bound: f64) -> Verdict {
    if value <= bound {
        Verdict::Pass
    } else if value <= bound + 0.01 {
        Verdict::Warn
    } else {
        Verdict::Fail
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------- criterion 1

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    // Split up front so narrow peaks cannot hide between the first samples.
    let pieces = 64;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| {
            let (x0, x1) = (a + i as f64 * h, a + (i + 1) as f64 * h);
            let (f0, f1, fm) = (f(x0), f(x1), f(0.5 * (x0 + x1)));
            let whole = h / 6.0 * (f0 + 4.0 * fm + f1);
            simpson(f, x0, x1, f0, fm, f1, whole, tol / pieces as f64, 40)
        })
        .sum()
}

fn kld_by_quadrature(p: Gauss1d, q: Gauss1d) -> f64 {
    let f = |x: f64| {
        let lp = p.logpdf(x);
        lp.exp() * (lp - q.logpdf(x))
    };
    let s = p.std();
    adaptive_simpson(&f, p.mu - 16.0 * s, p.mu + 16.0 * s, 1e-13)
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = Rng::new(1);
    let mut worst = 0.0f64;
    let mut symmetric = true;
    let mut self_zero = 0.0f64;
    for _ in 0..200 {
        let p = Gauss1d::new(rng.uniform_range(-3.0, 3.0), rng.uniform_range(0.3, 3.0).powi(2));
        let q = Gauss1d::new(rng.uniform_range(-3.0, 3.0), rng.uniform_range(0.3, 3.0).powi(2));
        let closed = kld_gauss1d(p, q);
        let quad = kld_by_quadrature(p, q);
        worst = worst.max((closed - quad).abs() / quad.abs());
        symmetric &= jsd_gauss1d(p, q).to_bits() == jsd_gauss1d(q, p).to_bits();
        self_zero = self_zero.max(jsd_gauss1d(p, p).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    Outcome {
        id: 1,
        name: "divergence oracle",
        verdict: hard(worst <= 1e-6 && symmetric && self_zero <= 1e-12 && secs < 5.0),
        detail: format!(
            "max KLD rel err {worst:.2e} (<= 1e-6), JSD symmetric {symmetric}, max JSD(P,P) {self_zero:.1e}, {secs:.2}s"
        ),
    }
}

// ---------------------------------------------------------------- criterion 2

/// `log N(v; mu, a)` through Gauss–Jordan inversion and an LU determinant.
fn dense_logpdf(mu: &[f64], a: &[f64], v: &[f64]) -> f64 {
    let p = mu.len();
    let mut m: Vec<f64> = a.to_vec();
    let mut inv = vec![0.0; p * p];
    for i in 0..p {
        inv[i * p + i] = 1.0;
    }
    let mut log_det = 0.0;
    for c in 0..p {
        let piv = (c..p).max_by(|&x, &y| m[x * p + c].abs().total_cmp(&m[y * p + c].abs())).unwrap();
        if piv != c {
            for k in 0..p {
                m.swap(c * p + k, piv * p + k);
                inv.swap(c * p + k, piv * p + k);
            }
        }
        let d = m[c * p + c];
        log_det += d.abs().ln();
        for k in 0..p {
            m[c * p + k] /= d;
            inv[c * p + k] /= d;
        }
        for r in 0..p {
            if r != c {
                let f = m[r * p + c];
                for k in 0..p {
                    m[r * p + k] -= f * m[c * p + k];
                    inv[r * p + k] -= f * inv[c * p + k];
                }
            }
        }
    }
    let diff: Vec<f64> = v.iter().zip(mu).map(|(a, b)| a - b).collect();
    let mut quad = 0.0;
    for i in 0..p {
        for j in 0..p {
            quad += diff[i] * inv[i * p + j] * diff[j];
        }
    }
    -0.5 * (p as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
}

fn criterion_2() -> Outcome {
    let pts = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0], vec![2.0, 2.0]];
    let fit = fit_gaussian(&pts, 0.0).expect("hand case fits");
    let hand = fit.mu == [1.0, 1.0] && fit.sigma == [1.0, 0.0, 0.0, 1.0];

    let mut rng = Rng::new(2);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let p = 1 + trial % 16;
        let a: Vec<f64> = (0..p * p).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let mut sigma = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..p {
                sigma[i * p + j] = (0..p).map(|k| a[i * p + k] * a[j * p + k]).sum::<f64>() / p as f64;
            }
            sigma[i * p + i] += 0.5;
        }
        let mu: Vec<f64> = (0..p).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let model = GaussianModel::from_moments(mu.clone(), sigma.clone(), 1e-6).expect("SPD model");
        let mut regularized = sigma.clone();
        for i in 0..p {
            regularized[i * p + i] += model.ridge;
        }
        for _ in 0..20 {
            let v: Vec<f64> = (0..p).map(|_| rng.uniform_range(-4.0, 4.0)).collect();
            let got = model.logpdf(&v).expect("finite logpdf");
            worst = worst.max((got - dense_logpdf(&mu, &regularized, &v)).abs());
        }
    }
    Outcome {
        id: 2,
        name: "gaussian fit oracle",
        verdict: hard(hand && worst <= 1e-9),
        detail: format!("hand case exact {hand}, max |logpdf - dense| {worst:.2e} (<= 1e-9) over 50 models"),
    }
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let mut rng = Rng::new(3);
    let (mut eps_ok, mut set_ok) = (0, 0);
    for _ in 0..100 {
        let p = 2 + rng.below(5);
        let n = 200 + rng.below(1800);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.normal() * 2.0).collect()).collect();
        let xs = ExpandedSet::identity(&points);
        let model = fit_gaussian(&points, 1e-6).expect("fit");
        let m = 10 + rng.below(n - 10);
        let t_rank = 2 + rng.below(m - 1);

        let mut replay = rng.clone();
        let eps = select_epsilon(&xs, &model, m, t_rank, &mut rng).expect("epsilon");
        let ll = log_densities(&points, &model).expect("densities");
        let mut picked: Vec<f64> = replay.sample_indices(n, m).into_iter().map(|i| ll[i]).collect();
        picked.sort_by(f64::total_cmp);
        eps_ok += usize::from(eps == picked[t_rank - 1]);

        let count = 1 + rng.below(t_rank - 1);
        let batch = sample_virtual_outliers(&xs, &model, eps, count).expect("enough below epsilon");
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| ll[a].total_cmp(&ll[b]).then(a.cmp(&b)));
        let expected = &order[..count];
        set_ok += usize::from(batch.indices == expected && expected.iter().all(|&i| ll[i] < eps));
    }
    let secs = t.elapsed().as_secs_f64();
    Outcome {
        id: 3,
        name: "epsilon quantile",
        verdict: hard(eps_ok == 100 && set_ok == 100 && secs < 10.0),
        detail: format!("epsilon matches {eps_ok}/100, bottom-B set matches {set_ok}/100, {secs:.2}s"),
    }
}

// ---------------------------------------------------------------- criterion 4

fn pair_count_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut twice: u64 = 0;
    for &a in id {
        for &b in ood {
            twice += if a > b {
                2
            } else if a == b {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * id.len() as u64 * ood.len() as u64) as f64
}

fn scan_fpr95(id: &[f64], ood: &[f64]) -> (f64, f64) {
    let n = id.len() as f64;
    let mut best = f64::NEG_INFINITY;
    for &c in id {
        let tpr = id.iter().filter(|&&s| s >= c).count() as f64 / n;
        if tpr >= 0.95 && c > best {
            best = c;
        }
    }
    let fpr = ood.iter().filter(|&&s| s >= best).count() as f64 / ood.len() as f64;
    (best, fpr)
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let hand = auroc(&[2.0, 1.0], &[1.5, 0.0]).unwrap() == 0.75;
    let mut rng = Rng::new(4);
    let (mut auc_ok, mut fpr_ok) = (0, 0);
    for trial in 0..100 {
        let n = 20 + rng.below(981);
        let m = 1 + rng.below(1000);
        // Every third trial draws from a coarse grid so ties are common.
        let draw = |rng: &mut Rng, shift: f64| {
            let x = rng.normal() + shift;
            if trial % 3 == 0 {
                (x * 4.0).round() / 4.0
            } else {
                x
            }
        };
        let shift = rng.uniform_range(-1.0, 1.0);
        let id: Vec<f64> = (0..n).map(|_| draw(&mut rng, shift)).collect();
        let ood: Vec<f64> = (0..m).map(|_| draw(&mut rng, 0.0)).collect();
        auc_ok += usize::from(auroc(&id, &ood).unwrap() == pair_count_auroc(&id, &ood));
        let (gamma, fpr) = scan_fpr95(&id, &ood);
        fpr_ok += usize::from(choose_gamma(&id).unwrap() == gamma && fpr95(&id, &ood).unwrap() == fpr);
    }
    let secs = t.elapsed().as_secs_f64();
    Outcome {
        id: 4,
        name: "metric oracles",
        verdict: hard(hand && auc_ok == 100 && fpr_ok == 100 && secs < 20.0),
        detail: format!("hand case {hand}, AUROC exact {auc_ok}/100, FPR95 exact {fpr_ok}/100, {secs:.2}s"),
    }
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    let shape = NetworkShape {
        input: 3,
        hidden: vec![6],
        feature: 4,
        classes: 3,
    };
    let mut rng = Rng::new(5);
    let mut net = MlpNetwork::new(&shape, &mut rng).unwrap();
    for w in &mut net.energy_free {
        *w = rng.uniform_range(-0.5, 0.5);
    }
    let xs: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
    let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let pairs: Vec<(usize, usize, f64)> = (0..8).map(|i| (i, (i + 3) % 8, rng.uniform())).collect();
    let spec = LossSpec {
        beta: 0.1,
        ..LossSpec::default()
    };

    let ce = |net: &MlpNetwork| -> f64 {
        let cache = net.forward_batch(&refs).unwrap();
        loss_and_backward(net, &cache, &labels, None, &spec, None).unwrap().total
    };
    let full = |net: &MlpNetwork| -> f64 {
        let cache = net.forward_batch(&refs).unwrap();
        let v = VirtualSource::Attached { cache: &cache, pairs: &pairs };
        loss_and_backward(net, &cache, &labels, Some(v), &spec, None).unwrap().total
    };

    let mut tape = GradientTape::for_network(&net);
    let cache = net.forward_batch(&refs).unwrap();
    loss_and_backward(&net, &cache, &labels, None, &spec, Some(&mut tape)).unwrap();
    let an: Vec<f64> = tape.values().copied().collect();
    let ce_err = check_gradients(&net, &an, None, 1e-5, 1e-8, |n| Ok(ce(n))).unwrap().max_rel_error;

    tape.zero();
    let v = VirtualSource::Attached { cache: &cache, pairs: &pairs };
    loss_and_backward(&net, &cache, &labels, Some(v), &spec, Some(&mut tape)).unwrap();
    let an: Vec<f64> = tape.values().copied().collect();
    let full_err = check_gradients(&net, &an, None, 1e-5, 1e-8, |n| Ok(full(n))).unwrap().max_rel_error;
    let w_nonzero = tape.grads.energy_free.iter().any(|g| *g != 0.0);

    Outcome {
        id: 5,
        name: "gradient correctness",
        verdict: hard(ce_err <= 1e-4 && full_err <= 1e-3 && w_nonzero),
        detail: format!(
            "CE max rel err {ce_err:.2e} (<= 1e-4), composite max rel err {full_err:.2e} (<= 1e-3), energy-weight gradient nonzero {w_nonzero}"
        ),
    }
}

// ------------------------------------------------------------- criteria 6–10

fn set_metric(r: &RunReport, f: fn(&ares_core::evaluation::SetMetrics) -> f64) -> f64 {
    let s = r.sets.iter().find(|s| s.name == BENCH_SET).expect("benchmark OOD set present");
    f(s)
}

fn row<'a>(reports: &'a [RunReport], label: &str) -> &'a RunReport {
    let r = reports.iter().find(|r| r.variant == label).unwrap_or_else(|| panic!("variant {label} missing"));
    assert!(r.error.is_none(), "variant {label} failed: {:?}", r.error);
    r
}

struct Bench {
    /// One ablation suite per seed.
    suites: Vec<Vec<RunReport>>,
    baselines: Vec<RunReport>,
    slowest_full: f64,
}

fn run_bench() -> Bench {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut suites = Vec::new();
    let mut baselines = Vec::new();
    let mut slowest_full = 0.0f64;
    for seed in 0..SEEDS {
        let data = DataBundle::generate(&DataConfig::default(), seed).unwrap();
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::desk()
        };
        let suite = run_ablation_suite(&cfg, &data, None, threads).unwrap();
        slowest_full = slowest_full.max(row(&suite, "stages/full").train_seconds);
        suites.push(suite);

        let base_cfg = TrainConfig { beta: 0.0, ..cfg };
        let (net, _) = train(&base_cfg, &data).unwrap();
        assert!(net.energy_weights().iter().all(|&w| w == 1.0), "baseline keeps w = 1");
        baselines.push(evaluate_trained(&net, &base_cfg, &data).unwrap());
    }
    Bench {
        suites,
        baselines,
        slowest_full,
    }
}

fn mean_over(b: &Bench, label: &str, seeds: u64, f: fn(&ares_core::evaluation::SetMetrics) -> f64) -> f64 {
    let xs: Vec<f64> = b.suites[..seeds as usize].iter().map(|s| set_metric(row(s, label), f)).collect();
    mean(&xs)
}

fn criterion_6(b: &Bench) -> Outcome {
    let ares = mean_over(b, "stages/full", SEEDS, |s| s.auroc);
    let base = mean(&b.baselines.iter().map(|r| set_metric(r, |s| s.auroc)).collect::<Vec<_>>());
    let ok = ares >= 0.85 && ares - base >= 0.05 && b.slowest_full < 120.0;
    Outcome {
        id: 6,
        name: "end-to-end separation",
        verdict: hard(ok),
        detail: format!(
            "mean {BENCH_SET} AUROC ARES {ares:.4} (>= 0.85) vs baseline {base:.4}, gain {:.2} points (>= 5), slowest run {:.1}s",
            100.0 * (ares - base),
            b.slowest_full
        ),
    }
}

fn criterion_7(b: &Bench) -> Outcome {
    let full = mean_over(b, "stages/full", SEEDS, |s| s.fpr95);
    let mut worst = Verdict::Pass;
    let mut parts = vec![format!("full {full:.4}")];
    for v in ["no-escape", "no-expansion", "no-estimation"] {
        let x = mean_over(b, &format!("stages/{v}"), SEEDS, |s| s.fpr95);
        let verdict = soft(full, x);
        if verdict as u8 > worst as u8 {
            worst = verdict;
        }
        parts.push(format!("{v} {x:.4}"));
    }
    Outcome {
        id: 7,
        name: "ablation direction",
        verdict: worst,
        detail: format!("mean {BENCH_SET} FPR95: {}", parts.join(", ")),
    }
}

fn criterion_8(b: &Bench) -> Outcome {
    let jsd = mean_over(b, "losses/loss-jsd", SEEDS, |s| s.fpr95);
    let ce = mean_over(b, "losses/loss-ce", SEEDS, |s| s.fpr95);
    let nce = mean_over(b, "losses/loss-nce", SEEDS, |s| s.fpr95);
    let (a, c) = (soft(jsd, ce), soft(jsd, nce));
    let verdict = if a == Verdict::Fail || c == Verdict::Fail {
        Verdict::Fail
    } else if a == Verdict::Warn || c == Verdict::Warn {
        Verdict::Warn
    } else {
        Verdict::Pass
    };
    Outcome {
        id: 8,
        name: "loss ablation",
        verdict,
        detail: format!("mean {BENCH_SET} FPR95: jsd {jsd:.4}, ce {ce:.4}, nce {nce:.4}"),
    }
}

fn criterion_10(b: &Bench) -> Outcome {
    let base = TrainConfig::desk().total_epochs;
    let short = mean_over(b, &format!("epochs/epochs-{base}"), EPOCH_SEEDS, |s| s.auroc);
    let long = mean_over(b, &format!("epochs/epochs-{}", 2 * base), EPOCH_SEEDS, |s| s.auroc);
    let gap = (short - long).abs();
    Outcome {
        id: 10,
        name: "epoch-budget robustness",
        verdict: soft(gap, 0.05),
        detail: format!(
            "mean {BENCH_SET} AUROC over {EPOCH_SEEDS} seeds: {base} epochs {short:.4}, {} epochs {long:.4}, gap {:.2} points (<= 5)",
            2 * base,
            100.0 * gap
        ),
    }
}

fn criterion_9() -> Outcome {
    let data = DataBundle::generate(&DataConfig::default(), 9).unwrap();
    let cfg = TrainConfig {
        seed: 9,
        ..TrainConfig::desk()
    };
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| -> Vec<Vec<u8>> {
        let (net, log) = train(&cfg, &data).unwrap();
        let report = evaluate_trained(&net, &cfg, &data).unwrap();
        let ck = dir.path().join(format!("{tag}.json"));
        Checkpoint::new(&net, cfg.total_epochs, None, log.records.clone()).save(&ck).unwrap();
        vec![
            log.records_csv().into_bytes(),
            std::fs::read(&ck).unwrap(),
            report.to_json().unwrap().into_bytes(),
        ]
    };
    let (a, b) = (run("a"), run("b"));
    let same: Vec<bool> = a.iter().zip(&b).map(|(x, y)| x == y).collect();
    Outcome {
        id: 9,
        name: "determinism",
        verdict: hard(same.iter().all(|&s| s)),
        detail: format!(
            "identical train log {}, checkpoint {}, report {}",
            same[0], same[1], same[2]
        ),
    }
}

#[test]
fn acceptance() {
    let mut outcomes = Vec::new();
    for f in [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5] {
        let o = f();
        report(&o);
        outcomes.push(o);
    }
    let bench = run_bench();
    for f in [criterion_6, criterion_7, criterion_8] {
        let o = f(&bench);
        report(&o);
        outcomes.push(o);
    }
    let o = criterion_9();
    report(&o);
    outcomes.push(o);
    let o = criterion_10(&bench);
    report(&o);
    outcomes.push(o);

    let failed: Vec<u32> = outcomes.iter().filter(|o| o.verdict == Verdict::Fail).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
