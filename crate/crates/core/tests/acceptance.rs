//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::time::Instant;

use btgp::abstraction::{transition_bounds, ReferenceOptions, TransitionQuery};
use btgp::gp::Dataset;
use btgp::kernel::{BtKernel, SeKernel};
use btgp::linalg::Mat;
use btgp::partition::{CellId, PartitionScheme, StateBox};
use btgp::systems::BenchmarkSystem;
use btgp::verify::{InnerProblem, Successor};
use btgp::abstraction::ImcRow;
use btgp::{
    build_imc, build_imc_continuous_reference, error_table, fit, interval_iteration, run_pipeline, simulate, solve_inner,
    Eps1Branch, ErrorConfig, Imc, ImcOptions, IterationOptions, PipelineConfig, SeGp, Sense, TransitionVariance,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const CASE: &str = include_str!("../examples/casestudy.cfg");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn main() {
    let checks: Vec<(&str, &str, fn() -> Outcome)> = vec![
        ("AC1", "case-study reproduction", ac1_case_study),
        ("AC2", "abstraction speedup", ac2_speedup),
        ("AC3", "inner solver exactness", ac3_inner_solver),
        ("AC4", "transition bound exactness", ac4_transition_bounds),
        ("AC5", "aggregation exactness", ac5_aggregation),
        ("AC6", "feature map identity", ac6_feature_map),
        ("AC7", "verification oracle", ac7_verification),
        ("AC8", "error bound coverage", ac8_coverage),
        ("AC9", "soundness sandwich", ac9_sandwich),
        ("AC10", "determinism", ac10_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let t = Instant::now();
        let o = check();
        println!(
            "{id} {} {name}: {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn cell(q: usize, i: usize) -> CellId {
    CellId::new(i as u64, q).unwrap()
}

/// Spearman rank correlation with average ranks for ties.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        let (a, b) = (rx[i] - mx, ry[i] - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    sxy / (sxx * syy).sqrt()
}

fn ac1_case_study() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::parse(
        CASE,
        &[
            ("output.dir".into(), format!("\"{}\"", dir.path().display())),
            ("output.write_imc".into(), "false".into()),
        ],
    )
    .unwrap();
    let report = match run_pipeline(&cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("pipeline failed: {e}")),
    };
    let scheme = cfg.scheme().unwrap();
    let b = &report.bounds;
    let targets = scheme.project_set(&cfg.target_box().unwrap()).unwrap();
    let target_ok = targets.iter().all(|s| b.v_min[s.index()] == 1.0);
    let ordered = (0..scheme.num_cells()).all(|i| b.v_min[i] <= b.v_max[i]);

    let (mut dist, mut vals) = (Vec::new(), Vec::new());
    for s in scheme.cells() {
        let c = scheme.cell_center(&s).unwrap();
        let d = c.iter().map(|v| (v.abs() - 3.0).max(0.0)).fold(0.0, f64::max);
        dist.push(d);
        vals.push(b.v_min[s.index()]);
    }
    let rho = spearman(&dist, &vals);
    let t = &report.times;
    let fit_time = t.fit + t.bound;
    let timing = fit_time <= 60.0 && t.abstraction <= 30.0 && t.verify <= 60.0;
    outcome(
        target_ok && ordered && rho <= -0.8 && timing && report.bounds.converged,
        format!(
            "{} target cells at 1, ordered={ordered}, spearman={rho:.3}, fit+bound {fit_time:.1} s, abstraction {:.1} s, verification {:.1} s, {}",
            targets.len(),
            t.abstraction,
            t.verify,
            report.certificate
        ),
    )
}

fn ac2_speedup() -> Outcome {
    let dom = StateBox::cube(2, -10.0, 10.0).unwrap();
    let data = simulate(&BenchmarkSystem::sine(), 500, 3, &dom).unwrap();
    let scheme = PartitionScheme::cyclic(dom, 6).unwrap();
    let kernel = BtKernel::uniform(scheme.clone()).unwrap();
    let model = fit(&data, &kernel).unwrap();
    let kernels = vec![
        SeKernel::new(12.0, vec![4000.0, 2500.0]).unwrap(),
        SeKernel::new(7.0, vec![500.0, 2000.0]).unwrap(),
    ];
    let ec = ErrorConfig::new(0.2, vec![0.015, 0.006], kernels).unwrap();
    let errors = error_table(&data, &model, &ec).unwrap();
    let targets = scheme.project_set(&StateBox::cube(2, -5.0, 5.0).unwrap()).unwrap();
    let se = SeGp::fit(&data, vec![SeKernel::new(1.0, vec![2.0, 2.0]).unwrap(); 2]).unwrap();
    let opts = ImcOptions::default();

    let reps = 20;
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(build_imc(&model, &errors, &targets, &[8.0, 8.0], &opts).unwrap());
    }
    let fast = t.elapsed().as_secs_f64() / reps as f64;
    let ropts = ReferenceOptions {
        grid: 5,
        noise_std: 3.16,
        imc: opts,
    };
    let t = Instant::now();
    let reference = build_imc_continuous_reference(&se, &scheme, &errors, &targets, &[8.0, 8.0], &ropts).unwrap();
    let slow = t.elapsed().as_secs_f64();
    std::hint::black_box(reference);
    let ratio = slow / fast;
    outcome(
        ratio >= 10.0,
        format!("build_imc {:.2} ms, reference {:.2} ms, speedup {ratio:.0}x", fast * 1e3, slow * 1e3),
    )
}

/// Vertex enumeration of `opt sum p_i v_i + r` subject to the box
/// constraints and `sum p + r + l = 1`.
fn vertex_oracle(p: &InnerProblem<f64>, sense: Sense) -> Option<f64> {
    let mut lo: Vec<f64> = p.successors.iter().map(|s| s.lower).collect();
    let mut hi: Vec<f64> = p.successors.iter().map(|s| s.upper).collect();
    let mut val: Vec<f64> = p.successors.iter().map(|s| s.value).collect();
    lo.extend([p.reward.0, p.loss.0]);
    hi.extend([p.reward.1, p.loss.1]);
    val.extend([1.0, 0.0]);
    let k = lo.len();
    let mut best: Option<f64> = None;
    for free in 0..k {
        for mask in 0..1u32 << (k - 1) {
            let mut x = vec![0.0; k];
            let mut bit = 0;
            for i in 0..k {
                if i == free {
                    continue;
                }
                x[i] = if mask >> bit & 1 == 1 { hi[i] } else { lo[i] };
                bit += 1;
            }
            x[free] = 1.0 - x.iter().sum::<f64>();
            if x[free] < lo[free] - 1e-12 || x[free] > hi[free] + 1e-12 {
                continue;
            }
            let v: f64 = x.iter().zip(&val).map(|(a, b)| a * b).sum();
            best = Some(match (best, sense) {
                (None, _) => v,
                (Some(b), Sense::Max) => b.max(v),
                (Some(b), Sense::Min) => b.min(v),
            });
        }
    }
    best
}

fn random_inner(rng: &mut ChaCha8Rng) -> InnerProblem<f64> {
    loop {
        let k = rng.random_range(1..=4);
        let bounds = |rng: &mut ChaCha8Rng| {
            let a: f64 = rng.random_range(0.0..0.5);
            let b: f64 = rng.random_range(0.0..0.6);
            let lo = if rng.random_bool(0.2) { 0.0 } else { a * 0.6 };
            (lo, (lo + b).min(1.0))
        };
        let successors: Vec<Successor<f64>> = (0..k)
            .map(|id| {
                let (l, u) = bounds(rng);
                Successor {
                    id,
                    lower: l,
                    upper: u,
                    value: rng.random_range(0.0..1.0),
                }
            })
            .collect();
        let reward = bounds(rng);
        let loss = bounds(rng);
        let p = InnerProblem { successors, reward, loss };
        if p.check().is_ok() {
            return p;
        }
    }
}

fn ac3_inner_solver() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let p = random_inner(&mut rng);
        for sense in [Sense::Min, Sense::Max] {
            let (v, _) = solve_inner(&p, sense).unwrap();
            let want = vertex_oracle(&p, sense).expect("feasible problem has a vertex");
            worst = worst.max((v - want).abs());
        }
    }
    outcome(worst <= 1e-12, format!("max |error| {worst:.2e} over 10000 instances, both senses"))
}

/// `P(a <= X <= b)` for `X ~ N(mean, std^2)` by composite Simpson on the
/// part of `[a, b]` within 12 standard deviations.
fn quad_prob(a: f64, b: f64, mean: f64, std: f64) -> f64 {
    let lo = a.max(mean - 12.0 * std);
    let hi = b.min(mean + 12.0 * std);
    if hi <= lo {
        return 0.0;
    }
    let pdf = |x: f64| {
        let z = (x - mean) / std;
        (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
    };
    let n = (((hi - lo) / (std / 40.0)).ceil() as usize).max(2).next_multiple_of(2);
    let h = (hi - lo) / n as f64;
    let mut s = pdf(lo) + pdf(hi);
    for i in 1..n {
        s += pdf(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Min and max of `quad_prob` over shifts in `[-eps, eps]`: grid search,
/// then golden-section refinement around the best grid point.
fn shift_oracle(a: f64, b: f64, mean: f64, std: f64, eps: f64) -> (f64, f64) {
    let g = |e: f64| quad_prob(a, b, mean + e, std);
    let n = 100;
    let pts: Vec<f64> = (0..=n).map(|i| -eps + 2.0 * eps * i as f64 / n as f64).collect();
    let vals: Vec<f64> = pts.iter().map(|&e| g(e)).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let k = (0..=n).max_by(|&i, &j| vals[i].total_cmp(&vals[j])).unwrap();
    let (mut l, mut r) = (pts[k.saturating_sub(1)], pts[(k + 1).min(n)]);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let (m1, m2) = (r - phi * (r - l), l + phi * (r - l));
        if g(m1) < g(m2) {
            l = m1;
        } else {
            r = m2;
        }
    }
    (lo, vals[k].max(g(0.5 * (l + r))))
}

fn ac4_transition_bounds() -> Outcome {
    let scheme = PartitionScheme::cyclic(StateBox::cube(2, -10.0, 10.0).unwrap(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let dest = cell(6, rng.random_range(0..64));
        let q = TransitionQuery {
            source: cell(6, rng.random_range(0..64)),
            dest,
            mean: (0..2).map(|_| rng.random_range(-12.0..12.0)).collect(),
            var: (0..2).map(|_| rng.random_range(0.05..9.0)).collect(),
            eps: (0..2).map(|_| rng.random_range(0.0..3.0)).collect(),
        };
        let (lo, hi) = transition_bounds(&scheme, &q).unwrap();
        let bx = scheme.cell_box(&dest).unwrap();
        let (mut olo, mut ohi) = (1.0, 1.0);
        for d in 0..2 {
            let (l, h) = shift_oracle(bx.lower()[d], bx.upper()[d], q.mean[d], q.var[d].sqrt(), q.eps[d]);
            olo *= l;
            ohi *= h;
        }
        worst = worst.max((lo - olo).abs()).max((hi - ohi).abs());
    }
    outcome(worst <= 1e-6, format!("max |error| {worst:.2e} over 1000 queries"))
}

fn random_dataset(rng: &mut ChaCha8Rng, n: usize, dim: usize, noise: f64) -> Dataset<f64> {
    let x = Mat::from_fn(n, dim, |_, _| rng.random_range(-1.0..1.0));
    let y = Mat::from_fn(n, dim, |_, _| rng.random_range(-2.0..2.0));
    Dataset::new(x, y, noise).unwrap()
}

fn ac5_aggregation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let dim = rng.random_range(1..=2);
        let q = rng.random_range(1..=4);
        let n = rng.random_range(1..=200);
        let noise = rng.random_range(0.1..2.0);
        let scheme = PartitionScheme::cyclic(StateBox::cube(dim, -1.0, 1.0).unwrap(), q).unwrap();
        let w: Vec<f64> = (0..q).map(|_| rng.random_range(0.1..1.0)).collect();
        let kernel = BtKernel::new(scheme.clone(), w).unwrap();
        let data = random_dataset(&mut rng, n, dim, noise);
        let model = fit(&data, &kernel).unwrap();

        let kn = DMatrix::from_fn(n, n, |i, j| {
            kernel.eval(data.input(i), data.input(j)).unwrap() + if i == j { noise * noise } else { 0.0 }
        });
        let lu = kn.lu();
        for s in scheme.cells() {
            let c = scheme.cell_center(&s).unwrap();
            let k = DVector::from_fn(n, |i, _| kernel.eval(data.input(i), &c).unwrap());
            let kinv = lu.solve(&k).unwrap();
            let var = kernel.eval(&c, &c).unwrap() - k.dot(&kinv);
            for d in 0..dim {
                let y = DVector::from_fn(n, |i, _| data.output(i)[d]);
                let mean = kinv.dot(&y);
                worst = worst.max((model.mean(&s, d) - mean).abs()).max((model.variance(&s, d) - var).abs());
            }
        }
    }
    outcome(worst <= 1e-8, format!("max |error| {worst:.2e} over 100 datasets"))
}

fn ac6_feature_map() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let dim = rng.random_range(1..=3);
        let q = rng.random_range(1..=10);
        let scheme = PartitionScheme::cyclic(StateBox::cube(dim, -3.0, 3.0).unwrap(), q).unwrap();
        let w: Vec<f64> = (0..q).map(|_| rng.random_range(0.0..1.0)).collect();
        let kernel = BtKernel::new(scheme, w).unwrap();
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = if rng.random_bool(0.3) {
            x.iter().map(|v| v + rng.random_range(-0.01..0.01f64)).map(|v: f64| v.clamp(-3.0, 3.0)).collect()
        } else {
            (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()
        };
        let (fx, fy) = (kernel.feature_map(&x).unwrap(), kernel.feature_map(&y).unwrap());
        let dot: f64 = fx.iter().zip(&fy).map(|(a, b)| a * b).sum();
        mismatches += usize::from(dot.to_bits() != kernel.eval(&x, &y).unwrap().to_bits());
    }
    let mut worst_ratio: f64 = f64::INFINITY;
    for _ in 0..20 {
        let q = rng.random_range(2..=12);
        let scheme = PartitionScheme::cyclic(StateBox::cube(2, 0.0, 1.0).unwrap(), q).unwrap();
        let kernel = BtKernel::uniform(scheme).unwrap();
        let pts: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
        let g = kernel.gram(&pts).unwrap();
        let m = DMatrix::from_fn(50, 50, |i, j| g[(i, j)]);
        let eig = SymmetricEigen::new(m).eigenvalues;
        let norm = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        worst_ratio = worst_ratio.min(eig.min() / norm);
    }
    outcome(
        mismatches == 0 && worst_ratio >= -1e-9,
        format!("{mismatches} bit mismatches in 1000 pairs, min eigenvalue / norm {worst_ratio:.2e} on 50-point sets"),
    )
}

fn random_point_chain(rng: &mut ChaCha8Rng, q: usize) -> Imc {
    let n = 1usize << q;
    let targets: Vec<CellId> = (0..n).filter(|&i| i % 5 == 2).map(|i| cell(q, i)).collect();
    let rows = (0..n)
        .map(|_| {
            let k = rng.random_range(1..=6);
            let mut dst: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
            dst.sort_unstable();
            dst.dedup();
            let raw: Vec<f64> = dst.iter().map(|_| rng.random_range(0.05..1.0)).collect();
            let keep = rng.random_range(0.6..0.99) / raw.iter().sum::<f64>();
            ImcRow::new(dst.iter().zip(&raw).map(|(&d, &r)| (d, r * keep, r * keep)).collect(), 0.0).unwrap()
        })
        .collect();
    Imc::from_rows(q, cell(q, 0), &targets, rows, 1.0).unwrap()
}

/// Value iteration on the exact chain `V <- P_T 1 + P V` with targets at 1.
fn plain_value_iteration(imc: &Imc) -> Vec<f64> {
    let n = imc.num_states();
    let mut v: Vec<f64> = (0..n).map(|s| if imc.is_target(s) { 1.0 } else { 0.0 }).collect();
    for _ in 0..1_000_000 {
        let next: Vec<f64> = (0..n)
            .map(|s| {
                if imc.is_target(s) {
                    return 1.0;
                }
                let row = imc.row(s);
                row.dst.iter().zip(row.lower).map(|(&d, &p)| p * v[d as usize]).sum()
            })
            .collect();
        let change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if change < 1e-16 {
            break;
        }
    }
    v
}

fn ac7_verification() -> Outcome {
    let nu = 1e-8;
    let opts = IterationOptions { nu, max_iters: 1_000_000 };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    let mut all_converged = true;
    for _ in 0..100 {
        let imc = random_point_chain(&mut rng, 5);
        let b = interval_iteration(&imc, &opts).unwrap();
        all_converged &= b.converged;
        let v = plain_value_iteration(&imc);
        for s in 0..imc.num_states() {
            worst = worst.max((b.v_min[s] - v[s]).abs()).max((b.v_max[s] - v[s]).abs());
        }
    }
    let rows = vec![
        ImcRow::new(vec![(0, 0.25, 0.25), (1, 0.5, 0.5)], 0.0).unwrap(),
        ImcRow::new(vec![(1, 1.0, 1.0)], 0.0).unwrap(),
    ];
    let two = Imc::from_rows(1, cell(1, 0), &[cell(1, 1)], rows, 1.0).unwrap();
    let b = interval_iteration(&two, &opts).unwrap();
    let analytic = (b.v_min[0] - 2.0 / 3.0).abs().max((b.v_max[0] - 2.0 / 3.0).abs());
    outcome(
        all_converged && worst <= 10.0 * nu && analytic <= nu,
        format!("max |error| {worst:.2e} on 100 point chains (limit {:.0e}), two-state chain error {analytic:.2e}", 10.0 * nu),
    )
}

fn ac8_coverage() -> Outcome {
    let kernels = vec![
        SeKernel::new(1.0, vec![2.0, 3.0]).unwrap(),
        SeKernel::new(0.8, vec![2.5, 2.0]).unwrap(),
    ];
    let mut frng = ChaCha8Rng::seed_from_u64(808);
    let centers: Vec<Vec<f64>> = (0..8).map(|_| vec![frng.random_range(-5.0..5.0), frng.random_range(-5.0..5.0)]).collect();
    let weights: Vec<Vec<f64>> = (0..2).map(|_| (0..8).map(|_| frng.random_range(-1.0..1.0)).collect()).collect();
    let system = BenchmarkSystem::se_expansion(centers, weights, kernels.clone(), 1.0).unwrap();
    let bounds = system.rkhs_norms().unwrap();

    let dom = StateBox::cube(2, -5.0, 5.0).unwrap();
    let scheme = PartitionScheme::cyclic(dom.clone(), 4).unwrap();
    let kernel = BtKernel::uniform(scheme.clone()).unwrap();
    let mut ec = ErrorConfig::new(0.1, bounds.clone(), kernels).unwrap();
    ec.branch = Eps1Branch::Min;
    let draws = 200;
    let mut held = 0;
    let mut tightest: f64 = f64::INFINITY;
    for seed in 0..draws {
        let data = simulate(&system, 500, 1000 + seed, &dom).unwrap();
        let model = fit(&data, &kernel).unwrap();
        let errors = error_table(&data, &model, &ec).unwrap();
        let mut ok = true;
        for s in scheme.cells() {
            let bx = scheme.cell_box(&s).unwrap();
            for i in 0..10 {
                for j in 0..10 {
                    let x = [
                        bx.lower()[0] + (bx.upper()[0] - bx.lower()[0]) * i as f64 / 9.0,
                        bx.lower()[1] + (bx.upper()[1] - bx.lower()[1]) * j as f64 / 9.0,
                    ];
                    let f = system.drift(&x);
                    for d in 0..2 {
                        let err = (f[d] - model.mean(&s, d)).abs();
                        let eps = errors.get(&s, d);
                        tightest = tightest.min(eps - err);
                        ok &= err <= eps;
                    }
                }
            }
        }
        held += usize::from(ok);
    }
    let rate = held as f64 / draws as f64;
    let need = ec.confidence();
    outcome(
        rate >= need,
        format!(
            "bound held in {held}/{draws} draws ({rate:.3} >= {need:.2}), norms {:.3}/{:.3}, smallest slack {tightest:.3}",
            bounds[0], bounds[1]
        ),
    )
}

/// A stable 1-D map `f(x) = w (k(x, c) - k(x, -c))` with slope `slope` at
/// the origin and a known SE-RKHS norm.
fn near_linear_system(slope: f64, noise: f64) -> BenchmarkSystem<f64> {
    let (c, l) = (10.0_f64, 10.0_f64);
    let slope_per_weight = 2.0 * c / (l * l) * (-0.5 * c * c / (l * l)).exp();
    let w = slope / slope_per_weight;
    let k = SeKernel::new(1.0, vec![l]).unwrap();
    BenchmarkSystem::se_expansion(vec![vec![c], vec![-c]], vec![vec![w, -w]], vec![k], noise).unwrap()
}

/// Fraction of `runs` trajectories from `x0` that enter `target` before
/// leaving `domain`.
fn monte_carlo(system: &BenchmarkSystem<f64>, x0: f64, target: (f64, f64), domain: (f64, f64), runs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..runs {
        let mut x = x0;
        for _ in 0..10_000 {
            if x >= target.0 && x <= target.1 {
                hits += 1;
                break;
            }
            if x < domain.0 || x > domain.1 {
                break;
            }
            let z: f64 = rng.sample(StandardNormal);
            x = system.drift(&[x])[0] + system.noise_std * z;
        }
    }
    hits as f64 / runs as f64
}

fn ac9_sandwich() -> Outcome {
    let system = near_linear_system(0.5, 0.2);
    let norm = system.rkhs_norms().unwrap()[0];
    let btgp::systems::Dynamics::SeExpansion { kernels, .. } = &system.dynamics else {
        unreachable!("expansion system")
    };
    let kernel = kernels[0].clone();
    let (dlo, dhi) = (-4.0, 4.0);
    let dom = StateBox::cube(1, dlo, dhi).unwrap();
    let scheme = PartitionScheme::cyclic(dom.clone(), 6).unwrap();
    let bt = BtKernel::uniform(scheme.clone()).unwrap();
    let target_box = StateBox::cube(1, -1.0, 1.0).unwrap();
    let targets = scheme.project_set(&target_box).unwrap();
    let x0 = 3.0;
    let delta = 0.1;
    let mut ec = ErrorConfig::new(delta, vec![norm], vec![kernel]).unwrap();
    ec.branch = Eps1Branch::Min;
    ec.scale_noise = true;
    let opts = ImcOptions {
        variance: TransitionVariance::Noise,
        ..ImcOptions::default()
    };

    let estimate = monte_carlo(&system, x0, (-1.0, 1.0), (dlo, dhi), 1_000_000, 9);
    let draws = 50;
    let mut inside = 0;
    let (mut lo_sum, mut hi_sum) = (0.0, 0.0);
    for seed in 0..draws {
        let data = simulate(&system, 3000, 2000 + seed, &dom).unwrap();
        let model = fit(&data, &bt).unwrap();
        let errors = error_table(&data, &model, &ec).unwrap();
        let imc = build_imc(&model, &errors, &targets, &[x0], &opts).unwrap();
        let b = interval_iteration(&imc, &IterationOptions::default()).unwrap();
        let s = scheme.encode(&[x0]).unwrap().index();
        inside += usize::from(b.v_min[s] <= estimate && estimate <= b.v_max[s]);
        lo_sum += b.v_min[s];
        hi_sum += b.v_max[s];
    }
    let rate = inside as f64 / draws as f64;
    let need = 1.0 - 2.0 * delta;
    outcome(
        rate >= need,
        format!(
            "estimate {estimate:.4} inside [V_min, V_max] in {inside}/{draws} draws ({rate:.2} >= {need:.2}); mean bounds [{:.4}, {:.4}]",
            lo_sum / draws as f64,
            hi_sum / draws as f64
        ),
    )
}

fn ac10_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: usize, sub: &str| {
        let cfg = PipelineConfig::parse(
            CASE,
            &[
                ("model.precision".into(), "8".into()),
                ("data.samples".into(), "1000".into()),
                ("output.dir".into(), format!("\"{}\"", dir.path().join(sub).display())),
            ],
        )
        .unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_pipeline(&cfg)).unwrap()
    };
    let a = run(1, "a");
    let b = run(1, "b");
    let c = run(8, "c");
    let json = |r: &btgp::PipelineReport| {
        (
            serde_json::to_string(&r.certificate).unwrap(),
            serde_json::to_string(&r.bounds).unwrap(),
        )
    };
    let same_runs = json(&a) == json(&b);
    let same_threads = json(&a) == json(&c);
    let files = std::fs::read(dir.path().join("a/certificate.json")).unwrap() == std::fs::read(dir.path().join("c/certificate.json")).unwrap();
    outcome(
        same_runs && same_threads && files,
        format!("repeat identical: {same_runs}, 1 vs 8 threads identical: {same_threads}, certificate files identical: {files}"),
    )
}
