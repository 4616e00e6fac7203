//! Acceptance report: one PASS/FAIL line per criterion. A FAIL is reported,
//! not raised; the property suite in `properties.rs` enforces invariants.
//!
//! Criterion 10 (full-scale tables) runs only with `FIMATCH_FULL_SCALE=1`.

mod common;

use std::time::Instant;

use common::*;
use fimatch::engine::{EmConfig, Method, Recipients};
use fimatch::measurement::{fit_calibration, CalibrationSpec, MeDonors, MeVariant};
use fimatch::models::LogisticModel;
use fimatch::rng::{derive_seed, substream, tags};
use fimatch::scoretest::score_test;
use fimatch::variance::StageA;
use fimatch::simlab::{gen_sim2, run_study, Estimator, Sim2Params, StudyConfig, StudyKind, StudySummary};
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rayon::prelude::*;

fn report(id: usize, pass: bool, detail: &str) {
    println!("criterion {id:>2}: {}  {detail}", if pass { "PASS" } else { "FAIL" });
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

fn study(kind: StudyKind, replicates: usize, f: impl FnOnce(&mut StudyConfig)) -> StudySummary {
    let mut config = StudyConfig::default_for(kind);
    config.replicates = replicates;
    f(&mut config);
    let started = Instant::now();
    let summary = run_study(&config).expect("study runs");
    println!(
        "   ({} x {} replicates in {:.0} s, {} failed fits)",
        kind_name(kind),
        replicates,
        started.elapsed().as_secs_f64(),
        summary.failures().len()
    );
    summary
}

fn kind_name(kind: StudyKind) -> &'static str {
    match kind {
        StudyKind::Sim1 => "sim1",
        StudyKind::Sim1Sens => "sim1_sens",
        StudyKind::Sim2 => "sim2",
        StudyKind::Splitq => "splitq",
    }
}

fn mean(s: &StudySummary, param: &str, method: Estimator) -> f64 {
    s.row(param, method).map_or(f64::NAN, |r| r.mc_mean)
}

/// Checks MC means against targets; returns (all within, detail text).
fn means_check(s: &StudySummary, method: Estimator, targets: &[(&str, f64)], tol: f64) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for (p, t) in targets {
        let m = mean(s, p, method);
        ok &= within(m, *t, tol);
        parts.push(format!("{p} {m:.3}/{t}"));
    }
    (ok, format!("{} [{}]", method.name(), parts.join(", ")))
}

fn sim1_tables(s: &StudySummary, tol_fi: f64, tol_sri: f64) -> (bool, String) {
    let truth = [("beta0", 1.0), ("beta1", 1.0), ("sigma2", 1.0), ("pi", 0.375)];
    let sri = [("beta0", 1.90), ("beta1", 0.54), ("sigma2", 1.73), ("pi", 0.305)];
    let (a, da) = means_check(s, Estimator::Pfi, &truth, tol_fi);
    let (b, db) = means_check(s, Estimator::Hdfi, &truth, tol_fi);
    let (c, dc) = means_check(s, Estimator::Sri, &sri, tol_sri);
    (a && b && c, format!("{da}; {db}; {dc}"))
}

fn criteria_1_to_3() {
    let s = study(StudyKind::Sim1, 500, |c| c.m = 10);
    let (ok, detail) = sim1_tables(&s, 0.03, 0.05);
    report(1, ok, &detail);

    let v = s.row("beta1", Estimator::Pfi).map_or(f64::NAN, |r| r.mc_variance);
    report(2, (0.008..=0.013).contains(&v), &format!("PFI beta1 MC variance {v:.5} vs [0.008, 0.013]"));

    let mut ok = true;
    let mut parts = Vec::new();
    for method in [Estimator::Pfi, Estimator::Hdfi] {
        for p in ["beta1", "pi"] {
            let rb = s.row(p, method).and_then(|r| r.variance_relative_bias).unwrap_or(f64::NAN);
            ok &= rb.abs() <= 0.10;
            parts.push(format!("{} {p} {rb:+.3}", method.name()));
        }
    }
    report(3, ok, &format!("variance relative bias [{}] vs +-0.10", parts.join(", ")));
}

fn criterion_4() {
    let mut ok = true;
    let mut parts = Vec::new();
    for (rho, target) in [(0.0, 1.00), (0.1, 1.14), (0.2, 1.28)] {
        let s = study(StudyKind::Sim1Sens, 500, |c| c.rho = Some(rho));
        let t2 = mean(&s, "theta2", Estimator::Pfi);
        let t1 = mean(&s, "theta1", Estimator::Pfi);
        ok &= within(t2, target, 0.03) && within(t1, 2.0, 0.02);
        parts.push(format!("rho {rho}: theta2 {t2:.3}/{target}, theta1 {t1:.3}/2"));
    }
    report(4, ok, &format!("PFI [{}]", parts.join("; ")));
}

fn sim2_checks(s: &StudySummary, tol_naive: f64, tol_fi: f64) -> (bool, String) {
    let row = |m| s.row("gamma_x", m).expect("gamma_x row");
    let (pfi, hdfi, wrc, naive) = (row(Estimator::Pfi), row(Estimator::Hdfi), row(Estimator::Wrc), row(Estimator::Naive));
    let naive_ok = within(naive.bias, -0.2241, tol_naive);
    let fi_ok = pfi.bias.abs() < tol_fi && hdfi.bias.abs() < tol_fi;
    // comparable: within 25% of each other
    let close = (pfi.mc_mse - hdfi.mc_mse).abs() <= 0.25 * pfi.mc_mse.min(hdfi.mc_mse);
    let order = close && pfi.mc_mse.max(hdfi.mc_mse) < wrc.mc_mse && wrc.mc_mse < naive.mc_mse;
    let detail = format!(
        "bias naive {:+.4} (target -0.2241), PFI {:+.4}, HDFI {:+.4}, WRC {:+.4}; MSE PFI {:.4} HDFI {:.4} WRC {:.4} naive {:.4} \
         [naive {}, FI {}, ordering {}]",
        naive.bias,
        pfi.bias,
        hdfi.bias,
        wrc.bias,
        pfi.mc_mse,
        hdfi.mc_mse,
        wrc.mc_mse,
        naive.mc_mse,
        verdict(naive_ok),
        verdict(fi_ok),
        verdict(order)
    );
    (naive_ok && fi_ok && order, detail)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "off"
    }
}

fn criteria_5_and_6() {
    let s = study(StudyKind::Sim2, 200, |c| c.m = 200);
    let (ok, detail) = sim2_checks(&s, 0.04, 0.06);
    report(5, ok, &detail);

    let rb = |m| s.row("gamma_x", m).and_then(|r| r.variance_relative_bias).unwrap_or(f64::NAN);
    let (p, h) = (rb(Estimator::Pfi), rb(Estimator::Hdfi));
    report(
        6,
        p.abs() <= 0.10 && h.abs() <= 0.10,
        &format!("gamma_x variance relative bias PFI {p:+.3}, HDFI {h:+.3} vs +-0.10"),
    );
}

fn run_property<S: proptest::strategy::Strategy>(
    name: &str,
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Check,
    failures: &mut Vec<String>,
) where
    S::Value: std::fmt::Debug,
{
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    if let Err(e) = runner.run(&strategy, test) {
        failures.push(format!("{name}: {e}"));
    }
}

fn criterion_7() {
    let started = Instant::now();
    let mut failures = Vec::new();
    run_property("E-step normalization", 20, fixture(), |f| em_steps_normalized_and_monotone(&f), &mut failures);
    run_property("EM monotonicity", 20, fixture(), |f| em_trace_monotone(&f), &mut failures);
    run_property(
        "zero-slope identity",
        20,
        (fixture(), -2.0f64..2.0, 0.1f64..3.0),
        |(f, b0, s2)| zero_slope_keeps_initial_weights(&f, b0, s2),
        &mut failures,
    );
    run_property("score at MLE", 20, (0u64..u64::MAX, 30usize..300), |(s, n)| score_vanishes_at_mle(s, n), &mut failures);
    run_property("finite differences", 100, derivative_point(), derivatives_match, &mut failures);
    run_property("PPS frequency", 5, (weight_vector(), 0u64..u64::MAX), |(w, s)| pps_frequencies(&w, s), &mut failures);
    if let Err(e) = pfi_agrees_with_tsls(7) {
        failures.push(format!("2SLS agreement: {e}"));
    }
    let secs = started.elapsed().as_secs_f64();
    let detail = if failures.is_empty() {
        format!("7 properties hold; {secs:.1} s (limit 60 s)")
    } else {
        format!("{secs:.1} s; {}", failures.join("; "))
    };
    report(7, failures.is_empty() && secs < 60.0, &detail);
}

fn criterion_8() {
    let s = study(StudyKind::Splitq, 1000, |_| {});
    let pfi = s.row("mu2", Estimator::Pfi).expect("mu2 PFI row");
    let direct = s.row("mu2", Estimator::Direct).expect("mu2 direct row");
    let formula = pfi.mean_variance_estimate.unwrap_or(f64::NAN);
    let ratio = pfi.mc_variance / formula - 1.0;
    report(
        8,
        pfi.mc_variance < direct.mc_variance && ratio.abs() <= 0.15,
        &format!(
            "MC variance {:.6} vs direct {:.6}; analytic {:.6} ({:+.3} relative, limit +-0.15)",
            pfi.mc_variance, direct.mc_variance, formula, ratio
        ),
    );
}

fn criterion_9() {
    let reps = 500u64;
    let seed = 20140101;
    let started = Instant::now();
    let outcomes: Vec<Option<bool>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let sample = gen_sim2(400, 400, &Sim2Params::default(), &mut substream(derive_seed(seed, tags::DATA), r));
            let problem = sample.problem().ok()?;
            let calib = fit_calibration(&problem, CalibrationSpec::Working).ok()?;
            let donors = MeDonors::new(&problem, &calib, MeVariant::Working).ok()?;
            let rec = Recipients::from_problem(&problem);
            let start = LogisticModel::new(0.0, vec![0.0]).ok()?;
            let config = EmConfig {
                m: 50,
                seed: derive_seed(derive_seed(seed, tags::REPLICATE), r),
                method: Method::Pfi,
                ..EmConfig::default()
            };
            let test = score_test(&donors, &rec, &start, &[(1, 1.0)], &config, StageA::Estimated).ok()?;
            Some(test.rejects(0.05))
        })
        .collect();
    let done: Vec<bool> = outcomes.iter().flatten().copied().collect();
    let rate = done.iter().filter(|r| **r).count() as f64 / done.len() as f64;
    report(
        9,
        (0.03..=0.08).contains(&rate),
        &format!(
            "rejection rate {rate:.3} at alpha 0.05 over {} replicates ({} failed; {:.0} s) vs [0.03, 0.08]",
            done.len(),
            reps as usize - done.len(),
            started.elapsed().as_secs_f64()
        ),
    );
}

fn criterion_10() {
    if std::env::var("FIMATCH_FULL_SCALE").map_or(true, |v| v != "1") {
        println!("criterion 10: NOT RUN  extended run; set FIMATCH_FULL_SCALE=1");
        return;
    }
    let s1 = study(StudyKind::Sim1, 5000, |c| c.m = 10);
    let k1 = 10f64.sqrt();
    let (ok1, d1) = sim1_tables(&s1, 0.03 / k1, 0.05 / k1);
    let s2 = study(StudyKind::Sim2, 1000, |c| c.m = 200);
    let k2 = 5f64.sqrt();
    let (ok2, d2) = sim2_checks(&s2, 0.04 / k2, 0.06 / k2);
    report(10, ok1 && ok2, &format!("sim1: {d1} | sim2: {d2}"));
}

fn main() {
    // libtest arguments (filters, --list) are accepted and ignored
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    criterion_7();
    criteria_1_to_3();
    criterion_4();
    criteria_5_and_6();
    criterion_8();
    criterion_9();
    criterion_10();
}
