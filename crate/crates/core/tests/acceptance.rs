//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Positional arguments filter criteria by substring.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use linebo::acquisition::ei;
use linebo::gp::{lml_and_grad, Dataset, GpModel, KernelParams, Posterior, TargetScaling};
use linebo::harness::benchmarks::BenchmarkSpec;
use linebo::harness::config::{Algorithm, GpSection, RunConfig};
use linebo::harness::evaluator::{ExternalEvaluator, ExternalMode, ExternalSpec, ObjectiveHandle};
use linebo::harness::experiment::{run_bench, BenchOptions};
use linebo::harness::journal::{EvalRecord, EventKind};
use linebo::linesearch::{maximize_on_interval, select_dimension, DimSelectPolicy, LineGridConfig, MAX_REFINE_EVALS};
use linebo::orchestrator::{
    run_async_batch, run_fullspace_bo, run_random_search, run_sequential, BudgetConfig, ExecConfig, InnerOptimizer,
    LatencyModel, OptimizerConfig, RunLabel, RunResult, Strategy,
};
use linebo::space::{clip_line, in_unit_cube};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- GP oracle

fn se(p: &KernelParams, a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).zip(&p.lengthscales).map(|((x, y), l)| ((x - y) / l).powi(2)).sum();
    p.signal_var * (-0.5 * s).exp()
}

fn gp_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=10);
        let d = rng.random_range(1..=5);
        let data = Dataset::from_pairs(
            d,
            (0..n).map(|_| ((0..d).map(|_| rng.random()).collect::<Vec<f64>>(), 2.0 * rng.sample::<f64, _>(StandardNormal))),
        )
        .unwrap();
        let params = KernelParams::new(
            rng.random_range(0.3..3.0),
            (0..d).map(|_| rng.random_range(0.1..2.0)).collect(),
            10f64.powf(rng.random_range(-5.0..-1.0)),
        )
        .unwrap();
        let model = GpModel::new(data, params).unwrap();
        let p = model.params();
        let pts = model.data().points();
        let sc = model.scaling();
        let y = DVector::from_iterator(n, model.data().targets().iter().map(|t| (t - sc.mean) / sc.scale));
        let mut k = DMatrix::from_fn(n, n, |a, b| se(p, &pts[a], &pts[b]));
        for i in 0..n {
            k[(i, i)] += p.noise_var + model.jitter();
        }
        let lu = k.lu();
        let alpha = lu.solve(&y).ok_or("dense solve failed")?;
        for _ in 0..5 {
            let q: Vec<f64> = (0..d).map(|_| rng.random()).collect();
            let ks = DVector::from_iterator(n, pts.iter().map(|x| se(p, x, &q)));
            let mean = ks.dot(&alpha);
            let var = (p.signal_var - ks.dot(&lu.solve(&ks).ok_or("dense solve failed")?)).max(0.0);
            let got = model.predict_std(&q).map_err(|e| e.to_string())?;
            worst = worst.max((got.mean - mean).abs()).max((got.var - var).abs());
        }
    }
    check(worst < 1e-8, format!("max deviation {worst:.2e} over 100 instances (tol 1e-8)"))
}

fn lml_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = rng.random_range(1..=5);
        let n = rng.random_range(5..=20);
        let data = Dataset::from_pairs(
            d,
            (0..n).map(|_| ((0..d).map(|_| rng.random()).collect::<Vec<f64>>(), rng.sample::<f64, _>(StandardNormal))),
        )
        .unwrap();
        let (sc, _) = TargetScaling::from_targets(data.targets());
        let y: Vec<f64> = data.targets().iter().map(|&t| sc.apply(t)).collect();
        let mut theta = vec![rng.random_range(-1.0..1.0)];
        for _ in 0..d {
            theta.push(rng.random_range(-1.5..0.5));
        }
        theta.push(rng.random_range(-8.0..-2.0));
        let at = |t: &[f64]| lml_and_grad(&data, &y, &KernelParams::from_log(t, d, false), false).unwrap();
        let (_, g) = at(&theta);
        let h = 1e-5;
        let fd: Vec<f64> = (0..theta.len())
            .map(|i| {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[i] += h;
                dn[i] -= h;
                (at(&up).0 - at(&dn).0) / (2.0 * h)
            })
            .collect();
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        worst = worst.max(g.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale);
    }
    check(worst < 1e-4, format!("max relative error {worst:.2e} at 20 settings (tol 1e-4)"))
}

// ---------------------------------------------------------------- acquisition

fn ei_monte_carlo() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = 1_000_000;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let mu = rng.random_range(-2.0..2.0);
        let sd = rng.random_range(0.01..2.0);
        let best = rng.random_range(-2.0..2.0);
        // stratified draws: one uniform per equal-probability cell
        let mc = (0..n)
            .map(|i| {
                let u = (i as f64 + rng.random::<f64>()) / n as f64;
                let z = normal.inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16));
                (best - (mu + sd * z)).max(0.0)
            })
            .sum::<f64>()
            / n as f64;
        worst = worst.max((ei(Posterior { mean: mu, var: sd * sd }, best) - mc).abs());
    }
    let mut bad = 0;
    for _ in 0..100_000 {
        let mu = rng.random_range(-1.0..1.0) * 10f64.powf(rng.random_range(-3.0..6.0));
        let best = rng.random_range(-1.0..1.0) * 10f64.powf(rng.random_range(-3.0..6.0));
        let var = if rng.random_bool(0.05) { 0.0 } else { 10f64.powf(rng.random_range(-24.0..12.0)) };
        let v = ei(Posterior { mean: mu, var }, best);
        if !(v.is_finite() && v >= 0.0) {
            bad += 1;
        }
    }
    check(
        worst < 1e-3 && bad == 0,
        format!("max |EI - MC| {worst:.2e} over 50 triples (tol 1e-3); {bad} of 1e5 fuzzed inputs negative or non-finite"),
    )
}

// ---------------------------------------------------------------- line geometry

fn clipping_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let mut violations = 0;
    for _ in 0..1000 {
        let d = rng.random_range(1..=10);
        let anchor: Vec<f64> = (0..d).map(|_| rng.random()).collect();
        let dir: Vec<f64> = if rng.random_bool(0.3) {
            let mut e = vec![0.0; d];
            e[rng.random_range(0..d)] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            e
        } else {
            (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let Ok(seg) = clip_line(&anchor, &dir) else {
            violations += 1;
            continue;
        };
        let (lo, hi) = (seg.beta_lo(), seg.beta_hi());
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let unit: Vec<f64> = dir.iter().map(|v| v / norm).collect();
        let at = |b: f64| -> Vec<f64> { anchor.iter().zip(&unit).map(|(x, v)| x + b * v).collect() };
        if !(lo <= 0.0 && 0.0 <= hi && in_unit_cube(&at(lo), 1e-12) && in_unit_cube(&at(hi), 1e-12)) {
            violations += 1;
            continue;
        }
        let reach = 1.5 * (d as f64).sqrt();
        let (mut acc_lo, mut acc_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..1000 {
            let b = rng.random_range(-reach..reach);
            if in_unit_cube(&at(b), 0.0) {
                acc_lo = acc_lo.min(b);
                acc_hi = acc_hi.max(b);
            }
        }
        // accepted samples lie inside the segment, and just past either end
        // the line has left the cube
        if acc_lo < lo - 1e-12 || acc_hi > hi + 1e-12 {
            violations += 1;
        }
        if in_unit_cube(&at(lo - 1e-9), 0.0) || in_unit_cube(&at(hi + 1e-9), 0.0) {
            violations += 1;
        }
    }
    check(violations == 0, format!("{violations} violations over 1000 anchor/direction pairs"))
}

fn line_grid_vs_dense() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let dense = 1_000_000;
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 50 {
        let k = rng.random_range(2..=5);
        let comps: Vec<(f64, f64, f64)> = (0..k)
            .map(|_| (rng.random_range(0.2..1.5), rng.random_range(0.0..1.0), rng.random_range(0.02..0.2)))
            .collect();
        let wiggle = (rng.random_range(0.0..0.1), rng.random_range(5.0..30.0));
        let f = |x: f64| {
            comps.iter().map(|(w, c, s)| w * (-0.5 * ((x - c) / s).powi(2)).exp()).sum::<f64>() + wiggle.0 * (wiggle.1 * x).sin()
        };
        let vals: Vec<f64> = (0..=dense).map(|i| f(i as f64 / dense as f64)).collect();
        let i_best = (0..vals.len()).fold(0, |b, i| if vals[i] > vals[b] { i } else { b });
        // skip mixtures whose two highest separated peaks nearly tie
        let runner_up = (1..dense)
            .filter(|&i| vals[i] >= vals[i - 1] && vals[i] >= vals[i + 1])
            .chain([0, dense])
            .filter(|&i| (i as f64 - i_best as f64).abs() > 2000.0)
            .map(|i| vals[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if vals[i_best] - runner_up < 1e-3 * vals[i_best].abs().max(1e-3) {
            continue;
        }
        let opt = maximize_on_interval(0.0, 1.0, &LineGridConfig::default(), |b| b.iter().map(|&x| f(x)).collect())
            .map_err(|e| e.to_string())?;
        worst = worst.max((opt.beta - i_best as f64 / dense as f64).abs());
        done += 1;
    }
    check(worst < 1e-4, format!("max |beta - dense argmax| {worst:.2e} over 50 mixtures (tol 1e-4)"))
}

fn dimension_selection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1006);
    let d = 36;
    let data = Dataset::from_pairs(
        d,
        (0..8).map(|_| ((0..d).map(|_| rng.random()).collect::<Vec<f64>>(), rng.sample::<f64, _>(StandardNormal))),
    )
    .unwrap();
    let model = GpModel::new(data, KernelParams::new(1.0, vec![0.5; d], 1e-4).unwrap()).unwrap();
    let x_star = model.data().points()[0].clone();
    let uniform = DimSelectPolicy {
        p_random: 1.0,
        ..DimSelectPolicy::default()
    };
    let draws = 10_000;
    let mut counts = vec![0usize; d];
    for _ in 0..draws {
        counts[select_dimension(&model, &x_star, &uniform, &mut rng).map_err(|e| e.to_string())?.index] += 1;
    }
    let expected = draws as f64 / d as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((d - 1) as f64).unwrap().inverse_cdf(0.99);

    let data = Dataset::from_pairs(4, (0..10).map(|k| (vec![0.5, 0.5, k as f64 / 9.0, 0.5], 4.0 * k as f64 / 9.0))).unwrap();
    let model = GpModel::new(data, KernelParams::new(1.0, vec![10.0, 10.0, 0.5, 10.0], 1e-6).unwrap()).unwrap();
    let thompson = DimSelectPolicy {
        p_random: 0.0,
        ..DimSelectPolicy::default()
    };
    let x_star = vec![0.5, 0.5, 0.0, 0.5];
    let mut hits = 0;
    for s in 0..200u64 {
        if select_dimension(&model, &x_star, &thompson, &mut ChaCha8Rng::seed_from_u64(s)).map_err(|e| e.to_string())?.index == 2 {
            hits += 1;
        }
    }
    check(
        chi2 < critical && hits >= 190,
        format!("chi-square {chi2:.2} vs critical {critical:.2} (df 35, alpha 0.01); dominant axis chosen {hits}/200 (need 190)"),
    )
}

// ---------------------------------------------------------------- cost contrast

/// Evaluations golden-section search spends to shrink a bracket of width `w`
/// below `tol`, at most `cap`.
fn golden_count(mut w: f64, tol: f64, cap: usize) -> usize {
    let shrink = (5f64.sqrt() - 1.0) / 2.0;
    let mut n = 2;
    while w > tol && n < cap {
        w *= shrink;
        n += 1;
    }
    n
}

fn acq_counts(journal: &[EvalRecord]) -> Vec<usize> {
    journal.iter().filter(|r| r.kind == EventKind::Proposal).filter_map(|r| r.acq_evals).collect()
}

fn cost_contrast() -> Outcome {
    let grid = LineGridConfig::default();
    let m = grid.grid_points;
    let step = 1.0 / (m - 1) as f64;
    let allowed = [m + golden_count(2.0 * step, grid.refine_tol, MAX_REFINE_EVALS), m + golden_count(step, grid.refine_tol, MAX_REFINE_EVALS)];
    let f = |x: &[f64], _: usize| -> Result<f64, linebo::harness::evaluator::EvalError> {
        Ok(x.iter().enumerate().map(|(j, v)| (v - 0.1 * j as f64).powi(2)).sum())
    };
    let obj: ObjectiveHandle = Arc::new(f);
    let budget = BudgetConfig {
        max_evals: 20,
        n_init: 8,
        batch_size: 1,
        repeats: 1,
    };
    let mut notes = Vec::new();
    let mut ok = true;
    for d in [2usize, 3, 4] {
        let space = linebo::space::DesignSpace::from_bounds(&vec![(-1.0, 1.0); d]).unwrap();
        let line = OptimizerConfig::new(Strategy::line(linebo::acquisition::AcqKind::Ei));
        let r = run_sequential(&obj, &space, &line, &budget, &ExecConfig::default(), &RunLabel::new("c", "line-ei", d as u64))
            .map_err(|e| e.to_string())?;
        let lc = acq_counts(&r.journal);
        let full = OptimizerConfig::new(Strategy::FullSpace {
            acq: linebo::acquisition::AcqSettings::with_kind(linebo::acquisition::AcqKind::Ei),
            inner: InnerOptimizer::Grid { per_dim: 8 },
        });
        let r = run_fullspace_bo(&obj, &space, &full, &budget, &ExecConfig::default(), &RunLabel::new("c", "fullspace-ei", d as u64))
            .map_err(|e| e.to_string())?;
        let fc = acq_counts(&r.journal);
        let want = 8usize.pow(d as u32);
        let line_ok = lc.len() == 12 && lc.iter().all(|c| allowed.contains(c));
        let full_ok = fc.len() == 12 && fc.iter().all(|&c| c == want);
        ok &= line_ok && full_ok;
        let mut distinct: Vec<usize> = lc.clone();
        distinct.sort();
        distinct.dedup();
        notes.push(format!("d={d}: line {distinct:?}, full-space {} (want {want})", fc.first().copied().unwrap_or(0)));
    }
    check(ok, format!("line counts must lie in {allowed:?}; {}", notes.join("; ")))
}

// ---------------------------------------------------------------- benchmarks

fn bench_profile() -> GpSection {
    GpSection {
        restarts: 1,
        max_iters: 50,
        isotropic: false,
        warm_start: true,
        refit_every_until: 50,
        refit_interval: 10,
    }
}

const BO_ALGOS: [Algorithm; 6] = [
    Algorithm::LinEasyBo,
    Algorithm::LineEi,
    Algorithm::LineLcb,
    Algorithm::FullSpaceEi,
    Algorithm::FullSpaceLcb,
    Algorithm::FullSpaceEasyBo,
];

/// One-sided Mann-Whitney p-value for `x` tending smaller than `y`, normal
/// approximation with tie and continuity corrections.
fn rank_sum_less(x: &[f64], y: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = x.iter().map(|&v| (v, true)).chain(y.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len();
    let mut rank_x = 0.0;
    let mut ties = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_x += all[i..=j].iter().filter(|e| e.1).count() as f64 * avg;
        i = j + 1;
    }
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let u = rank_x - nx * (nx + 1.0) / 2.0;
    let nn = nx + ny;
    let sigma = (nx * ny / 12.0 * ((nn + 1.0) - ties / (nn * (nn - 1.0)))).sqrt();
    if sigma == 0.0 {
        return 1.0;
    }
    let z = (u - nx * ny / 2.0 + 0.5) / sigma;
    Normal::new(0.0, 1.0).unwrap().cdf(z)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// `(bench label, algo, batch)` to per-seed `(final best, total time)`.
type Finals = BTreeMap<(String, String, usize), Vec<(f64, f64)>>;

fn bench_finals(opts: &BenchOptions) -> Result<Finals, String> {
    let mut finals = Finals::new();
    run_bench(opts, |label, r: &RunResult| {
        finals
            .entry((label.to_string(), r.algo.clone(), r.batch))
            .or_default()
            .push((r.best_value.unwrap_or(f64::INFINITY), r.total_time));
    })
    .map_err(|e| e.to_string())?;
    Ok(finals)
}

fn table_one(out: &Path, cache: &mut Option<Finals>) -> Outcome {
    let opts = BenchOptions {
        benchmarks: vec![("levy".into(), 12), ("rotated-quadratic".into(), 36)],
        algos: Algorithm::ALL.to_vec(),
        batches: vec![1],
        max_evals: 350,
        n_init: 20,
        repeats: 20,
        seed: 0,
        latency_s: 10.0,
        gp: bench_profile(),
        output_dir: out.join("table"),
    };
    let finals = bench_finals(&opts)?;
    let mut lines = Vec::new();
    let mut beats_random = true;
    let mut line_wins = 0;
    for (bench, _) in &opts.benchmarks {
        let label = format!("{bench}-{}", if bench == "levy" { 12 } else { 36 });
        let vals = |a: Algorithm| -> Vec<f64> {
            finals.get(&(label.clone(), a.name().to_string(), 1)).map(|v| v.iter().map(|f| f.0).collect()).unwrap_or_default()
        };
        let random = vals(Algorithm::Random);
        let mut medians = vec![format!("random {:.4}", median(&random))];
        for a in BO_ALGOS {
            let v = vals(a);
            let p = rank_sum_less(&v, &random);
            beats_random &= v.len() == 20 && p < 0.05;
            medians.push(format!("{} {:.4} (p {:.1e})", a.name(), median(&v), p));
        }
        let lin = vals(Algorithm::LinEasyBo);
        let full = vals(Algorithm::FullSpaceEasyBo);
        let p = rank_sum_less(&lin, &full);
        let win = median(&lin) <= median(&full) && p < 0.05;
        line_wins += win as usize;
        lines.push(format!(
            "{label}: {}; lineasybo vs fullspace-easybo p {p:.3} {}",
            medians.join(", "),
            if win { "holds" } else { "does not hold" }
        ));
    }
    *cache = Some(finals);
    check(
        beats_random && line_wins >= 1,
        format!(
            "(a) every BO variant beats random: {beats_random}; (b) line beats full-space on {line_wins}/2\n      {}",
            lines.join("\n      ")
        ),
    )
}

fn speedup(out: &Path, cache: &Option<Finals>) -> Outcome {
    let key1 = ("levy-12".to_string(), Algorithm::LinEasyBo.name().to_string(), 1usize);
    let mut opts = BenchOptions {
        benchmarks: vec![("levy".into(), 12)],
        algos: vec![Algorithm::LinEasyBo],
        batches: vec![15],
        max_evals: 350,
        n_init: 20,
        repeats: 20,
        seed: 0,
        latency_s: 10.0,
        gp: bench_profile(),
        output_dir: out.join("speedup"),
    };
    let b15 = bench_finals(&opts)?.remove(&("levy-12".to_string(), key1.1.clone(), 15)).ok_or("no B=15 runs")?;
    let b1 = match cache.as_ref().and_then(|c| c.get(&key1)) {
        Some(v) => v.clone(),
        None => {
            opts.batches = vec![1];
            opts.output_dir = out.join("speedup-b1");
            bench_finals(&opts)?.remove(&key1).ok_or("no B=1 runs")?
        }
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let v1: Vec<f64> = b1.iter().map(|f| f.0).collect();
    let v15: Vec<f64> = b15.iter().map(|f| f.0).collect();
    let (m1, m15) = (mean(&v1), mean(&v15));
    let s1 = (v1.iter().map(|v| (v - m1).powi(2)).sum::<f64>() / v1.len() as f64).sqrt();
    let t1: Vec<f64> = b1.iter().map(|f| f.1).collect();
    let t15: Vec<f64> = b15.iter().map(|f| f.1).collect();
    let per_seed = b1.len() == b15.len() && t1.iter().zip(&t15).all(|(a, b)| *b <= a / 10.0);
    let worst_ratio = t1.iter().zip(&t15).map(|(a, b)| a / b).fold(f64::INFINITY, f64::min);
    let value_ok = m15 <= m1 + s1;
    let within_band = (m15 - m1).abs() <= s1;
    check(
        per_seed && value_ok,
        format!(
            "time B=1 {:.0} s vs B=15 {:.0} s (smallest per-seed ratio {worst_ratio:.1}, need 10); final B=15 mean {m15:.4} vs B=1 {m1:.4} +- {s1:.4} ({})",
            mean(&t1),
            mean(&t15),
            if within_band { "inside the band" } else if value_ok { "below the band" } else { "above the band" }
        ),
    )
}

fn check_bookkeeping(journal: &[EvalRecord], batch: usize) -> Result<(), String> {
    let (mut dispatched, mut finished, mut observed) = (0usize, 0usize, 0usize);
    let mut outcome: HashMap<usize, usize> = HashMap::new();
    for rec in journal {
        match rec.kind {
            EventKind::Dispatch => dispatched += 1,
            EventKind::Observation | EventKind::Failure => {
                finished += 1;
                observed += (rec.kind == EventKind::Observation) as usize;
                *outcome.entry(rec.eval.ok_or("outcome without eval id")?).or_default() += 1;
            }
            EventKind::Proposal | EventKind::Fit => {
                if let Some(n) = rec.n_train {
                    if n != rec.n_completed + batch - 1 || rec.n_pending != batch - 1 {
                        return Err(format!("record {}: n_train {n} with {} completed", rec.seq, rec.n_completed));
                    }
                }
            }
        }
        if rec.n_completed != observed
            || rec.n_pending != dispatched - finished
            || rec.n_completed + rec.n_pending + rec.remaining() != rec.max_evals
        {
            return Err(format!("record {}: counters out of balance", rec.seq));
        }
    }
    if outcome.len() != dispatched || outcome.values().any(|&c| c != 1) {
        return Err("dispatches and outcomes do not pair up".into());
    }
    Ok(())
}

fn bench_setup(algo: Algorithm, latency: LatencyModel, budget: BudgetConfig) -> Result<(RunConfig, ObjectiveHandle), String> {
    let mut cfg = RunConfig::for_benchmark(BenchmarkSpec::new("levy", 12), algo).map_err(|e| e.to_string())?;
    cfg.gp = bench_profile();
    cfg.clock.latency = latency;
    cfg.budget = budget;
    let obj = cfg.objective().map_err(|e| e.to_string())?;
    Ok((cfg, obj))
}

fn async_correctness() -> Outcome {
    let budget = |max_evals, batch_size| BudgetConfig {
        max_evals,
        n_init: 20,
        batch_size,
        repeats: 1,
    };
    let (cfg, obj) = bench_setup(Algorithm::LinEasyBo, LatencyModel::Constant { seconds: 10.0 }, budget(80, 1))?;
    let space = cfg.design_space().map_err(|e| e.to_string())?;
    let label = RunLabel::new("a", "lineasybo", 5);
    let seq = run_sequential(&obj, &space, &cfg.optimizer(), &cfg.budget, &cfg.exec(), &label).map_err(|e| e.to_string())?;
    let asy = run_async_batch(&obj, &space, &cfg.optimizer(), &cfg.budget, &cfg.exec(), &label).map_err(|e| e.to_string())?;
    let bits = |r: &RunResult| -> Vec<(u64, Option<u64>)> { r.trace.iter().map(|t| (t.best.to_bits(), t.sim_time.map(f64::to_bits))).collect() };
    let identical = bits(&seq) == bits(&asy) && seq.trace.len() == 80;
    let mut notes = vec![format!("B=1 trace identical to sequential: {identical}")];
    let mut ok = identical;
    for b in [5usize, 10, 15] {
        let (cfg, obj) = bench_setup(Algorithm::LinEasyBo, LatencyModel::Exponential { mean: 10.0 }, budget(120, b))?;
        let r = run_async_batch(&obj, &space, &cfg.optimizer(), &cfg.budget, &cfg.exec(), &RunLabel::new("a", "lineasybo", b as u64))
            .map_err(|e| e.to_string())?;
        let res = check_bookkeeping(&r.journal, b).and_then(|_| {
            if r.completed == 120 {
                Ok(())
            } else {
                Err(format!("{} completed", r.completed))
            }
        });
        ok &= res.is_ok();
        notes.push(format!("B={b}: {}", res.err().unwrap_or_else(|| "identities hold".into())));
    }
    check(ok, notes.join("; "))
}

fn trace_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("trace-")) {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap_or_default());
            }
        }
    }
    out
}

fn bench_determinism(out: &Path) -> Outcome {
    let opts = |dir: &str| BenchOptions {
        benchmarks: vec![("levy".into(), 4), ("rotated-quadratic".into(), 6)],
        algos: Algorithm::ALL.to_vec(),
        batches: vec![1, 4],
        max_evals: 30,
        n_init: 10,
        repeats: 2,
        seed: 17,
        latency_s: 10.0,
        gp: bench_profile(),
        output_dir: out.join(dir),
    };
    run_bench(&opts("det-a"), |_, _| {}).map_err(|e| e.to_string())?;
    run_bench(&opts("det-b"), |_, _| {}).map_err(|e| e.to_string())?;
    let a = trace_files(&out.join("det-a"));
    let b = trace_files(&out.join("det-b"));
    let differing = a.iter().filter(|(k, v)| b.get(*k) != Some(*v)).count();
    check(
        !a.is_empty() && a.len() == b.len() && differing == 0,
        format!("{} trace files, {differing} differ", a.len()),
    )
}

// ---------------------------------------------------------------- protocol fuzzing

const FUZZ_SCRIPT: &str = r#"
import json, sys, time
req = json.loads(sys.stdin.readline())
cases = json.load(open(sys.argv[1]))
case = cases.get(str(req["id"]))
if case is None:
    print(json.dumps({"y": sum(req["x"])}), flush=True)
elif case == "hang":
    time.sleep(60)
elif case == "exit3":
    sys.exit(3)
else:
    sys.stdout.buffer.write(bytes.fromhex(case))
    sys.stdout.flush()
"#;

/// A malformed reply and the failure tag the protocol calls for.
fn malformed(rng: &mut ChaCha8Rng, k: usize) -> (String, &'static str) {
    let hex = |b: &[u8]| b.iter().map(|x| format!("{x:02x}")).collect::<String>();
    let text = |s: String| hex(s.as_bytes());
    let num = rng.random_range(-100.0..100.0f64);
    match k % 16 {
        0 => (text(format!("{{\"y\": {num}")), "protocol_violation"),
        1 => {
            let alphabet = b"0123456789#@!%&*()[]:;,. <>";
            let junk: String = (0..rng.random_range(1..40)).map(|_| char::from(alphabet[rng.random_range(0..alphabet.len())])).collect();
            (text(format!("{junk}\n")), "protocol_violation")
        }
        2 => (text(format!("{{\"z\": {num}}}\n")), "protocol_violation"),
        3 => (text(format!("{{\"y\": {num}, \"error\": \"both\"}}\n")), "protocol_violation"),
        4 => (text(format!("{{\"y\": \"{num}x\"}}\n")), "protocol_violation"),
        5 => (text("{\"y\": null}\n".into()), "protocol_violation"),
        6 => (text(["{\"y\": NaN}\n", "{\"y\": Infinity}\n", "{\"y\": -Infinity}\n", "{\"y\": nan}\n"][rng.random_range(0..4)].into()), "non_finite_value"),
        7 => (text(format!("{{\"y\": {}e{}}}\n", rng.random_range(1..9), rng.random_range(309..999))), "non_finite_value"),
        8 => {
            let mut b: Vec<u8> = b"{\"y\": ".to_vec();
            b.extend((0..rng.random_range(1..8)).map(|_| rng.random_range(0x80..=0xffu8)));
            b.extend(b"}\n");
            (hex(&b), "protocol_violation")
        }
        9 => (text("\n".into()), "protocol_violation"),
        10 => (String::new(), "process_crash"),
        11 => ("exit3".into(), "process_crash"),
        12 => (text(format!("[{num}]\n")), "protocol_violation"),
        13 => {
            let mut b = vec![0x01u8];
            b.extend((0..rng.random_range(0..64)).map(|_| rng.random::<u8>()));
            (hex(&b), "protocol_violation")
        }
        14 => (text(format!("{{\"y\": {{\"v\": {num}}}}}\n")), "protocol_violation"),
        _ => (text(format!("{{\"y\": {num}}} trailing\n")), "protocol_violation"),
    }
}

fn protocol_fuzzing(out: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1012);
    let n = 1000;
    let mut cases = serde_json::Map::new();
    let mut expected = Vec::with_capacity(n);
    for id in 0..n {
        let (payload, tag) = if id % 200 == 199 { ("hang".to_string(), "timeout") } else { malformed(&mut rng, id) };
        cases.insert(id.to_string(), serde_json::Value::String(payload));
        expected.push(tag);
    }
    std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
    let cases_path = out.join("cases.json");
    std::fs::write(&cases_path, serde_json::to_string(&cases).unwrap()).map_err(|e| e.to_string())?;
    let script = out.join("fuzz.py");
    std::fs::write(&script, FUZZ_SCRIPT).map_err(|e| e.to_string())?;
    let ev = ExternalEvaluator::new(ExternalSpec {
        command: vec!["python3".into(), script.to_string_lossy().into(), cases_path.to_string_lossy().into()],
        mode: ExternalMode::OneShot,
        timeout_s: Some(1.0),
        workdir: None,
    })
    .map_err(|e| e.to_string())?;
    let obj: ObjectiveHandle = Arc::new(ev);
    let space = linebo::space::DesignSpace::from_bounds(&[(0.0, 1.0), (0.0, 1.0)]).unwrap();
    let budget = BudgetConfig {
        max_evals: 5,
        n_init: 5,
        batch_size: 1,
        repeats: 1,
    };
    let exec = ExecConfig {
        max_failures: Some(2000),
        ..ExecConfig::default()
    };
    let run = catch_unwind(AssertUnwindSafe(|| run_random_search(&obj, &space, &budget, &exec, &RunLabel::new("fuzz", "random", 0))));
    let r = match run {
        Err(_) => return Err("coordinator panicked".into()),
        Ok(Err(e)) => return Err(format!("run failed: {e}")),
        Ok(Ok(r)) => r,
    };
    let mut seen: HashMap<usize, String> = HashMap::new();
    for rec in r.journal.iter().filter(|r| r.kind == EventKind::Failure) {
        seen.insert(rec.eval.unwrap_or(usize::MAX), rec.error.clone().unwrap_or_default());
    }
    let mut mismatched = Vec::new();
    for (id, tag) in expected.iter().enumerate() {
        match seen.get(&id) {
            Some(e) if e.starts_with(tag) => {}
            other => mismatched.push(format!("id {id}: want {tag}, got {other:?}")),
        }
    }
    let ok = mismatched.is_empty() && seen.len() == n && r.completed == 5 && !r.aborted;
    mismatched.truncate(5);
    check(
        ok,
        format!(
            "{} failure records for {n} malformed replies, {} observations after them, aborted {}{}",
            seen.len(),
            r.completed,
            r.aborted,
            if mismatched.is_empty() { String::new() } else { format!("; {}", mismatched.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------- driver

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let scratch = tempfile::tempdir().expect("scratch directory");
    let out = scratch.path().to_path_buf();
    let mut cache: Option<Finals> = None;
    let mut failed = 0;
    let mut ran = 0;

    let mut run = |name: &str, limit_s: Option<f64>, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(name) {
            return;
        }
        ran += 1;
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        let slow = limit_s.is_some_and(|l| secs > l);
        let (status, detail) = match res {
            Ok(d) if !slow => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; took longer than {:.0} s", limit_s.unwrap_or(0.0))),
            Err(d) => ("FAIL", d),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} {name} [{secs:.1} s]: {detail}");
    };

    run("gp-oracle", Some(5.0), &mut gp_oracle);
    run("lml-gradient", Some(10.0), &mut lml_gradient);
    run("ei-monte-carlo", Some(30.0), &mut ei_monte_carlo);
    run("line-clipping", Some(5.0), &mut clipping_soundness);
    run("line-grid", Some(30.0), &mut line_grid_vs_dense);
    run("dimension-selection", Some(60.0), &mut dimension_selection);
    run("cost-contrast", Some(120.0), &mut cost_contrast);
    run("table-ordering", None, &mut || {
        let t = Instant::now();
        let res = table_one(&out, &mut cache);
        let mins = t.elapsed().as_secs_f64() / 60.0;
        let note = format!(" [runtime {mins:.1} min, target 30 min]");
        res.map(|d| d + &note).map_err(|d| d + &note)
    });
    run("async-correctness", Some(300.0), &mut async_correctness);
    run("batch-speedup", Some(600.0), &mut || speedup(&out, &cache));
    run("bench-determinism", None, &mut || bench_determinism(&out));
    run("protocol-fuzzing", None, &mut || protocol_fuzzing(&out.join("fuzz")));

    println!("{} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
