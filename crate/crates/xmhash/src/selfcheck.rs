//! Built-in verification suite behind the `selfcheck` command.
//!
//! Four named checks exercise the numerical core against independent
//! oracles:
//!
//! - `gradient-finite-difference`: analytic encoder-output gradients vs
//!   central finite differences of the objective, plus the MLP backward
//!   pass vs finite differences through the network parameters;
//! - `code-sweep-exhaustive`: on 4-instance, 3-bit problems, enumerate all
//!   4096 code matrices and confirm the coordinate-descent fixed point is
//!   coordinate-wise optimal (no single-column replacement improves the
//!   code-step objective), and that the objective never rises during the
//!   sweeps;
//! - `classifier-normal-equations`: the ridge solve's normal-equation
//!   residual is at machine level and random perturbations never lower the
//!   classifier objective;
//! - `retrieval-metric-oracles`: ranking metrics match a naive
//!   reimplementation, including the average-precision hand case
//!   [relevant, irrelevant, relevant] -> 5/6.
//!
//! [`CheckOverrides`] is a mutation hook for tests: flipping the sign of
//! the image-modality gradient must make the gradient check fail, proving
//! the suite can catch a wrong derivative rather than passing vacuously.

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::dataset::SimilarityView;
use crate::encoder::{backward, forward, Activation, MlpParams};
use crate::matrix::Matrix;
use crate::objective::{eval_objective, grad_t, grad_v, HyperParams};
use crate::retrieval::{
    mean_average_precision, pr_curve, precision_at, rank, MetricsReport, PackedCode, QuerySet,
    RetrievalIndex,
};
use crate::solver::{
    build_d_matrix, classifier_objective, code_step_objective, dcc_update_bit, solve_w,
    CodeMatrix, MaskedOutputs,
};

/// Tolerances. The acceptance suite pins these against its own literals,
/// so loosening one here cannot silently weaken the gate.
pub const GRAD_REL_TOL: f64 = 1e-6;
pub const ENCODER_GRAD_REL_TOL: f64 = 1e-5;
pub const W_RESIDUAL_REL_TOL: f64 = 1e-8;
pub const METRIC_ABS_TOL: f64 = 1e-12;
/// Central-difference step for both gradient checks.
pub const FD_STEP: f64 = 1e-6;
/// Number of random tiny instances the gradient check covers.
pub const GRAD_CHECK_INSTANCES: usize = 24;

/// Mutation hooks. All false in normal operation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CheckOverrides {
    /// Negate the image-modality gradient before comparing against finite
    /// differences; the gradient check must then fail.
    pub flip_grad_v_sign: bool,
}

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    /// Worst measured error or a short failure description.
    pub detail: String,
}

/// Run every check in order. The list of names is stable; callers may rely
/// on it.
pub fn run_all(overrides: &CheckOverrides) -> Vec<CheckReport> {
    vec![
        check_gradients(overrides),
        check_code_sweep(),
        check_classifier_solve(),
        check_metric_oracles(),
    ]
}

fn rel_err(analytic: f64, reference: f64) -> f64 {
    (analytic - reference).abs() / analytic.abs().max(1.0)
}

/// A small random instance with a label-consistent similarity view, the
/// same construction the objective's own tests use.
#[allow(clippy::type_complexity)]
fn random_instance(
    rng: &mut ChaCha20Rng,
    n: usize,
    m: usize,
    k: usize,
    c: usize,
) -> (Matrix, Matrix, Matrix, Matrix, SimilarityView, Matrix, HyperParams) {
    let labels = Matrix::from_fn(n, c, |i, j| {
        if j == i % c || rng.random::<f64>() < 0.4 {
            1.0
        } else {
            0.0
        }
    });
    let phi: Vec<usize> = rand::seq::index::sample(rng, n, m).into_vec();
    let mut values = Vec::with_capacity(m * n);
    for &qi in &phi {
        for j in 0..n {
            let share = (0..c).any(|cc| labels[(qi, cc)] == 1.0 && labels[(j, cc)] == 1.0);
            values.push(if share { 1i8 } else { -1 });
        }
    }
    let neg_weight = rng.random_range(0.5..2.0);
    let sim = SimilarityView::from_parts(phi, values, n, neg_weight);
    let v = Matrix::from_fn(m, k, |_, _| rng.random_range(-0.9..0.9));
    let t = Matrix::from_fn(m, k, |_, _| rng.random_range(-0.9..0.9));
    let b = Matrix::from_fn(n, k, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
    let w = Matrix::from_fn(k, c, |_, _| rng.random_range(-0.5..0.5));
    let hp = HyperParams {
        k,
        m,
        alpha: 1.3,
        beta: 0.8,
        gamma: 2.1,
        eta: 0.5,
        mu: 1.7,
        ..Default::default()
    };
    (v, t, b, w, sim, labels, hp)
}

/// Analytic gradients vs central finite differences, objective level and
/// encoder level.
pub fn check_gradients(overrides: &CheckOverrides) -> CheckReport {
    let name = "gradient-finite-difference";
    let mut rng = ChaCha20Rng::seed_from_u64(0xC0FFEE);
    let h = FD_STEP;
    let mut worst = 0.0f64;

    for trial in 0..GRAD_CHECK_INSTANCES {
        let n = rng.random_range(2..=6);
        let m = rng.random_range(1..=n.min(4));
        let k = rng.random_range(1..=4);
        let c = rng.random_range(1..=3);
        let (v, t, b, w, sim, labels, hp) = random_instance(&mut rng, n, m, k, c);

        for i in 0..m {
            let mut gv = grad_v(i, &v, &t, &b, &w, &sim, &labels, &hp);
            if overrides.flip_grad_v_sign {
                for g in &mut gv {
                    *g = -*g;
                }
            }
            let gt = grad_t(i, &v, &t, &b, &w, &sim, &labels, &hp);
            for q in 0..k {
                let mut vp = v.clone();
                vp[(i, q)] += h;
                let mut vm = v.clone();
                vm[(i, q)] -= h;
                let fd = (eval_objective(&vp, &t, &b, &w, &sim, &labels, &hp).total
                    - eval_objective(&vm, &t, &b, &w, &sim, &labels, &hp).total)
                    / (2.0 * h);
                let e = rel_err(gv[q], fd);
                worst = worst.max(e);
                if e > GRAD_REL_TOL {
                    return CheckReport {
                        name,
                        passed: false,
                        detail: format!(
                            "image gradient off by {e:.3e} (trial {trial}, row {i}, bit {q}): \
                             analytic {} vs finite difference {fd}",
                            gv[q]
                        ),
                    };
                }

                let mut tp = t.clone();
                tp[(i, q)] += h;
                let mut tm = t.clone();
                tm[(i, q)] -= h;
                let fd = (eval_objective(&v, &tp, &b, &w, &sim, &labels, &hp).total
                    - eval_objective(&v, &tm, &b, &w, &sim, &labels, &hp).total)
                    / (2.0 * h);
                let e = rel_err(gt[q], fd);
                worst = worst.max(e);
                if e > GRAD_REL_TOL {
                    return CheckReport {
                        name,
                        passed: false,
                        detail: format!(
                            "text gradient off by {e:.3e} (trial {trial}, row {i}, bit {q})"
                        ),
                    };
                }
            }
        }
    }

    // Encoder backward vs finite differences through every parameter, with
    // a fixed random linear functional of the outputs as the loss.
    let params = MlpParams::init(&[3, 5, 2], &[Activation::Relu, Activation::Tanh], 0xFEED);
    let x = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
    let coeffs = Matrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
    let loss = |p: &MlpParams| -> f64 {
        let (out, _) = forward(p, &x);
        (0..4)
            .map(|r| (0..2).map(|c| coeffs[(r, c)] * out[(r, c)]).sum::<f64>())
            .sum()
    };
    let (_, trace) = forward(&params, &x);
    let grads = backward(&params, &trace, &coeffs);
    for (li, lg) in grads.iter().enumerate() {
        for r in 0..lg.weight.rows() {
            for c in 0..lg.weight.cols() {
                let mut pp = params.clone();
                pp.layers_mut()[li].weight[(r, c)] += h;
                let mut pm = params.clone();
                pm.layers_mut()[li].weight[(r, c)] -= h;
                let fd = (loss(&pp) - loss(&pm)) / (2.0 * h);
                let e = rel_err(lg.weight[(r, c)], fd);
                worst = worst.max(e);
                if e > ENCODER_GRAD_REL_TOL {
                    return CheckReport {
                        name,
                        passed: false,
                        detail: format!("encoder weight gradient off by {e:.3e} (layer {li})"),
                    };
                }
            }
        }
        for bi in 0..lg.bias.len() {
            let mut pp = params.clone();
            pp.layers_mut()[li].bias[bi] += h;
            let mut pm = params.clone();
            pm.layers_mut()[li].bias[bi] -= h;
            let fd = (loss(&pp) - loss(&pm)) / (2.0 * h);
            let e = rel_err(lg.bias[bi], fd);
            worst = worst.max(e);
            if e > ENCODER_GRAD_REL_TOL {
                return CheckReport {
                    name,
                    passed: false,
                    detail: format!("encoder bias gradient off by {e:.3e} (layer {li})"),
                };
            }
        }
    }

    CheckReport {
        name,
        passed: true,
        detail: format!("worst relative error {worst:.3e}"),
    }
}

/// Exhaustive enumeration oracle for the discrete code sweep.
pub fn check_code_sweep() -> CheckReport {
    let name = "code-sweep-exhaustive";
    let (n, k) = (4usize, 3usize);
    let slack = |x: f64| 1e-9 * (1.0 + x.abs());

    for seed in 0..3u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(0xDCC0 + seed);
        let (v, t, _, w, sim, labels, hp) = random_instance(&mut rng, n, 2, k, 2);
        let mut b = CodeMatrix::random(n, k, seed);
        let masked = MaskedOutputs::new(&v, &t, sim.query_index(), n);
        let d = build_d_matrix(&v, &t, &masked, &w, &labels, &sim, &hp);

        // Sweep to a fixed point, watching that no column update raises
        // the code-step objective.
        let mut prev = code_step_objective(&b, &v, &t, &w, &d, &sim, &hp);
        for _ in 0..50 {
            let before = b.clone();
            for col in 0..k {
                dcc_update_bit(&mut b, col, &v, &t, &w, &d, &sim, &hp);
                let now = code_step_objective(&b, &v, &t, &w, &d, &sim, &hp);
                if now > prev + slack(prev) {
                    return CheckReport {
                        name,
                        passed: false,
                        detail: format!(
                            "column update raised the objective: {prev} -> {now} (seed {seed})"
                        ),
                    };
                }
                prev = now;
            }
            if b == before {
                break;
            }
        }
        let fixed = code_step_objective(&b, &v, &t, &w, &d, &sim, &hp);

        // Enumerate all 2^(n*k) = 4096 code matrices. Track the global
        // minimum and verify coordinate-wise optimality: any matrix
        // differing from the fixed point in exactly one column scores no
        // better.
        let mut global_min = f64::INFINITY;
        for mask in 0..(1u32 << (n * k)) {
            let cand = Matrix::from_fn(n, k, |i, q| {
                if mask >> (i * k + q) & 1 == 1 {
                    1.0
                } else {
                    -1.0
                }
            });
            let cand = CodeMatrix::from_real(cand);
            let obj = code_step_objective(&cand, &v, &t, &w, &d, &sim, &hp);
            global_min = global_min.min(obj);

            let differing: Vec<usize> = (0..k)
                .filter(|&q| (0..n).any(|i| cand.get(i, q) != b.get(i, q)))
                .collect();
            if differing.len() == 1 && obj < fixed - slack(fixed) {
                return CheckReport {
                    name,
                    passed: false,
                    detail: format!(
                        "column {} replacement lowers the objective: {fixed} -> {obj} (seed {seed})",
                        differing[0]
                    ),
                };
            }
        }
        if fixed < global_min - slack(global_min) {
            return CheckReport {
                name,
                passed: false,
                detail: format!("fixed point {fixed} below enumerated minimum {global_min}"),
            };
        }
    }

    CheckReport {
        name,
        passed: true,
        detail: "fixed points coordinate-wise optimal over all 4096 matrices".into(),
    }
}

/// Normal-equation residual and perturbation optimality of the ridge
/// solve.
pub fn check_classifier_solve() -> CheckReport {
    let name = "classifier-normal-equations";
    let mut worst_residual = 0.0f64;

    for seed in 0..5u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(0x51DE + seed);
        let (n, m, k, c) = (8, 4, 4, 3);
        let (v, t, _, _, sim, labels, hp) = random_instance(&mut rng, n, m, k, c);
        let b = CodeMatrix::random(n, k, seed + 7);
        let phi = sim.query_index().to_vec();
        let masked = MaskedOutputs::new(&v, &t, &phi, n);
        let w = match solve_w(&v, &t, &masked, &b, &labels, &hp) {
            Ok(w) => w,
            Err(e) => {
                return CheckReport {
                    name,
                    passed: false,
                    detail: format!("solve failed: {e}"),
                }
            }
        };

        // Residual of (alpha V^T V + alpha T^T T + beta B^T B + eta I) W
        // = (alpha V_ring + alpha T_ring + beta B)^T L, relative to the
        // right-hand side.
        let mut lhs = v.matmul_tn(&v);
        lhs.scale(hp.alpha);
        let mut tt = t.matmul_tn(&t);
        tt.scale(hp.alpha);
        lhs.add_scaled(&tt, 1.0);
        lhs.add_scaled(&b.real().matmul_tn(b.real()), hp.beta);
        lhs.add_scaled(&Matrix::identity(k), hp.eta);

        let mut basis = masked.v_ring.clone();
        basis.scale(hp.alpha);
        basis.add_scaled(&masked.t_ring, hp.alpha);
        basis.add_scaled(b.real(), hp.beta);
        // basis: n x k, labels: n x c  ->  basis^T labels: k x c.
        let rhs = basis.matmul_tn(&labels);

        let lhs_w = lhs.matmul(&w);
        let resid = lhs_w.sub(&rhs).frobenius_sq().sqrt() / rhs.frobenius_sq().sqrt().max(1.0);
        worst_residual = worst_residual.max(resid);
        if resid > W_RESIDUAL_REL_TOL {
            return CheckReport {
                name,
                passed: false,
                detail: format!("normal-equation residual {resid:.3e} (seed {seed})"),
            };
        }

        // 100 random perturbations at mixed scales never lower the
        // classifier objective.
        let base = classifier_objective(&v, &t, &b, &w, &labels, &phi, &hp);
        let slack = 1e-9 * (1.0 + base.abs());
        for p in 0..100 {
            let scale = [1e-3, 1e-2, 1e-1, 1.0][p % 4];
            let mut cand = w.clone();
            for r in 0..k {
                for cc in 0..c {
                    cand[(r, cc)] += scale * rng.random_range(-1.0..1.0);
                }
            }
            let obj = classifier_objective(&v, &t, &b, &cand, &labels, &phi, &hp);
            if obj < base - slack {
                return CheckReport {
                    name,
                    passed: false,
                    detail: format!(
                        "perturbation at scale {scale} lowered the objective: {base} -> {obj}"
                    ),
                };
            }
        }
    }

    CheckReport {
        name,
        passed: true,
        detail: format!("worst relative residual {worst_residual:.3e}"),
    }
}

/// Naive recomputation oracle for MAP, precision at n and the PR curve,
/// plus the exact average-precision hand case.
pub fn check_metric_oracles() -> CheckReport {
    let name = "retrieval-metric-oracles";
    let mut rng = ChaCha20Rng::seed_from_u64(0x3E7);

    // Hand case: ranked relevance [1, 0, 1] gives (1/1 + 2/3) / 2 = 5/6.
    {
        let codes = CodeMatrix::from_real(Matrix::from_rows(&[
            &[1.0, 1.0],
            &[-1.0, 1.0],
            &[-1.0, -1.0],
        ]));
        let labels = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]);
        let index = RetrievalIndex::new(codes, labels);
        let query = PackedCode::from_signs(&[1.0, 1.0]);
        let queries = QuerySet::new(vec![query], Matrix::from_rows(&[&[1.0, 0.0]]));
        let map = mean_average_precision(&index, &queries);
        let want = (1.0 + 2.0 / 3.0) / 2.0;
        if map != want {
            return CheckReport {
                name,
                passed: false,
                detail: format!("hand case average precision {map} != {want}"),
            };
        }
    }

    // Random 30-item index, 10 queries, recomputed naively.
    let (n, q, k, c) = (30usize, 10usize, 6usize, 3usize);
    let db_codes = CodeMatrix::random(n, k, 0xAB);
    let db_labels = Matrix::from_fn(n, c, |i, j| {
        if j == i % c || rng.random::<f64>() < 0.3 {
            1.0
        } else {
            0.0
        }
    });
    let q_labels = Matrix::from_fn(q, c, |i, j| {
        if j == i % c || rng.random::<f64>() < 0.3 {
            1.0
        } else {
            0.0
        }
    });
    let q_codes: Vec<PackedCode> = (0..q)
        .map(|_| {
            let signs: Vec<f64> = (0..k)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            PackedCode::from_signs(&signs)
        })
        .collect();
    // Keep plain sign-vector copies for the naive path.
    let db_sign_rows: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..k).map(|b| db_codes.get(i, b)).collect())
        .collect();
    let q_sign_rows: Vec<Vec<f64>> = q_codes
        .iter()
        .map(|code| {
            (0..k)
                .map(|b| if code.words()[0] >> b & 1 == 1 { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();

    let index = RetrievalIndex::new(db_codes, db_labels.clone());
    let queries = QuerySet::new(q_codes, q_labels.clone());
    let cutoffs = [1usize, 5, 10, 50];
    let report = MetricsReport::compute(&index, &queries, &cutoffs);

    // Naive path: sign-vector mismatch counts, (distance, index) sort,
    // plain-loop precision/recall/average precision.
    let relevant = |qi: usize, dbi: usize| -> bool {
        (0..c).any(|j| q_labels[(qi, j)] == 1.0 && db_labels[(dbi, j)] == 1.0)
    };
    let mut naive_map = 0.0;
    // Cutoffs beyond the index size are dropped, mirroring the library.
    let mut naive_p: std::collections::BTreeMap<usize, f64> = cutoffs
        .iter()
        .filter(|&&cut| cut <= n)
        .map(|&cut| (cut, 0.0))
        .collect();
    // Per-radius (precision sum, recall sum) over queries.
    let mut naive_pr = vec![(0.0f64, 0.0f64); k + 1];
    for qi in 0..q {
        let mut order: Vec<(usize, usize)> = (0..n)
            .map(|dbi| {
                let dist = db_sign_rows[dbi]
                    .iter()
                    .zip(&q_sign_rows[qi])
                    .filter(|(a, b)| a != b)
                    .count();
                (dist, dbi)
            })
            .collect();
        order.sort();
        let total_rel = (0..n).filter(|&dbi| relevant(qi, dbi)).count();

        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank_0, &(_, dbi)) in order.iter().enumerate() {
            if relevant(qi, dbi) {
                hits += 1;
                ap += hits as f64 / (rank_0 + 1) as f64;
            }
        }
        naive_map += if total_rel == 0 { 0.0 } else { ap / total_rel as f64 };

        for (&cut, acc) in naive_p.iter_mut() {
            let hits = order[..cut].iter().filter(|&&(_, dbi)| relevant(qi, dbi)).count();
            *acc += hits as f64 / cut as f64;
        }

        for radius in 0..=k {
            let retrieved: Vec<usize> = order
                .iter()
                .filter(|&&(d, _)| d <= radius)
                .map(|&(_, dbi)| dbi)
                .collect();
            let rel_in = retrieved.iter().filter(|&&dbi| relevant(qi, dbi)).count();
            // Documented conventions: empty retrieval counts precision 1,
            // zero-relevant queries count recall 1.
            let prec = if retrieved.is_empty() {
                1.0
            } else {
                rel_in as f64 / retrieved.len() as f64
            };
            let rec = if total_rel == 0 {
                1.0
            } else {
                rel_in as f64 / total_rel as f64
            };
            naive_pr[radius].0 += prec;
            naive_pr[radius].1 += rec;
        }
    }
    naive_map /= q as f64;
    for acc in naive_p.values_mut() {
        *acc /= q as f64;
    }

    if (report.map - naive_map).abs() > METRIC_ABS_TOL {
        return CheckReport {
            name,
            passed: false,
            detail: format!("MAP {} vs naive {naive_map}", report.map),
        };
    }
    if report.p_at_n.len() != naive_p.len() {
        return CheckReport {
            name,
            passed: false,
            detail: format!(
                "cutoff filtering disagrees: {:?} vs naive {:?}",
                report.p_at_n.keys().collect::<Vec<_>>(),
                naive_p.keys().collect::<Vec<_>>()
            ),
        };
    }
    for (&cut, &want) in &naive_p {
        match report.p_at_n.get(&cut) {
            Some(&got) if (got - want).abs() <= METRIC_ABS_TOL => {}
            got => {
                return CheckReport {
                    name,
                    passed: false,
                    detail: format!("precision at {cut}: {got:?} vs naive {want}"),
                }
            }
        }
    }
    for (radius, &(p_sum, r_sum)) in naive_pr.iter().enumerate() {
        let (want_p, want_r) = (p_sum / q as f64, r_sum / q as f64);
        let (rad, got_p, got_r) = report.pr_curve[radius];
        if rad as usize != radius
            || (got_p - want_p).abs() > METRIC_ABS_TOL
            || (got_r - want_r).abs() > METRIC_ABS_TOL
        {
            return CheckReport {
                name,
                passed: false,
                detail: format!(
                    "PR curve at radius {radius}: ({got_p}, {got_r}) vs naive ({want_p}, {want_r})"
                ),
            };
        }
    }

    // Cross-check rank and the curve helpers on one query so the check
    // covers the public entry points directly.
    let probe = rank(&index, queries.codes().first().expect("non-empty"));
    if probe.ranked.len() != n {
        return CheckReport {
            name,
            passed: false,
            detail: "rank returned a partial permutation".into(),
        };
    }
    let _ = (precision_at(&index, &queries, 5), pr_curve(&index, &queries));

    CheckReport {
        name,
        passed: true,
        detail: "metrics agree with the naive recomputation".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes_every_check() {
        let reports = run_all(&CheckOverrides::default());
        assert_eq!(reports.len(), 4);
        for r in &reports {
            assert!(r.passed, "{} failed: {}", r.name, r.detail);
        }
    }

    #[test]
    fn report_names_are_stable() {
        let names: Vec<&str> = run_all(&CheckOverrides::default())
            .iter()
            .map(|r| r.name)
            .collect();
        assert_eq!(
            names,
            vec![
                "gradient-finite-difference",
                "code-sweep-exhaustive",
                "classifier-normal-equations",
                "retrieval-metric-oracles",
            ]
        );
    }

    #[test]
    fn flipped_gradient_sign_is_caught() {
        let report = check_gradients(&CheckOverrides {
            flip_grad_v_sign: true,
        });
        assert!(!report.passed, "mutated gradient slipped through");
        assert!(report.detail.contains("image gradient"));
    }
}
