//! End-to-end acceptance checks with their tolerances and time limits.
//!
//! Everything runs inside one test so the timings are not skewed by other
//! tests sharing the machine. Each criterion prints one PASS/FAIL line.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ddgcn::selftest::{
    aggregation_oracle, factorized_equivalence, gradient_audit, hyperparameters, phi_properties,
    residual_identity, shape_table, spatial_reduction, temporal_reduction, training_sanity,
    SanitySetup,
};
use ddgcn::training::parse_history_csv;

struct Outcome {
    id: u32,
    name: &'static str,
    passed: bool,
    within_time: bool,
    detail: String,
}

fn criterion(
    id: u32,
    name: &'static str,
    limit: Duration,
    log: &mut Vec<Outcome>,
    f: impl FnOnce() -> (bool, String),
) -> Duration {
    let start = Instant::now();
    let (passed, detail) = f();
    let elapsed = start.elapsed();
    let within_time = elapsed < limit;
    let o = Outcome {
        id,
        name,
        passed,
        within_time,
        detail: format!("{detail}; {:.2}s of {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()),
    };
    println!(
        "criterion {:>2} {}: {} ({})",
        o.id,
        o.name,
        if o.passed && o.within_time { "PASS" } else { "FAIL" },
        o.detail
    );
    log.push(o);
    elapsed
}

fn oracle(diff: ddgcn::Result<f64>) -> (bool, String) {
    match diff {
        Ok(d) => (d < 1e-10, format!("max abs diff {d:.3e} < 1e-10")),
        Err(e) => (false, format!("error: {e}")),
    }
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool")
        .install(f)
}

fn train_once(dir: &Path, config: &Path) -> Result<Vec<ddgcn::training::EpochRecord>, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_ddgcn"))
        .args(["train", "--seed", "7", "--config"])
        .arg(config)
        .arg("--out")
        .arg(dir)
        .env("DDGCN_THREADS", "1")
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    let csv = std::fs::read_to_string(dir.join("loss_history.csv")).map_err(|e| e.to_string())?;
    parse_history_csv(&csv).map_err(|e| e.to_string())
}

#[test]
fn acceptance_criteria() {
    let s = Duration::from_secs;
    let mut log = Vec::new();

    criterion(1, "aggregation vs loop oracle", s(5), &mut log, || oracle(aggregation_oracle(1)));
    criterion(2, "pose reduction vs per-frame convolutions", s(5), &mut log, || oracle(spatial_reduction(2)));
    criterion(3, "trajectory reduction vs per-joint convolutions", s(5), &mut log, || {
        oracle(temporal_reduction(3))
    });
    criterion(4, "factorized SLMP vs masked two-step", s(5), &mut log, || oracle(factorized_equivalence(4)));
    criterion(5, "gradient audit of the toy network", s(60), &mut log, || match gradient_audit() {
        Ok(r) => {
            let worst = r.worst_group().map(|g| g.name.clone()).unwrap_or_default();
            (
                r.max_rel_error < 1e-4,
                format!("max rel error {:.3e} < 1e-4 ({worst}, {} groups)", r.max_rel_error, r.groups.len()),
            )
        }
        Err(e) => (false, format!("error: {e}")),
    });
    criterion(6, "shape conformance", s(5), &mut log, || match shape_table() {
        Ok(rows) => {
            let text: Vec<String> = rows
                .iter()
                .map(|r| format!("{} {:?}{}", r.what, r.actual, if r.actual == r.expected { "" } else { " MISMATCH" }))
                .collect();
            (rows.iter().all(|r| r.actual == r.expected), text.join(", "))
        }
        Err(e) => (false, format!("error: {e}")),
    });
    criterion(7, "dynamic weight properties", s(10), &mut log, || match phi_properties(100_000, 5) {
        Ok(r) => (
            r.holds(),
            format!(
                "{} pairs, |phi1| max {:.6}, |phi2| max {:.6}, {} antisymmetry violations, phi2(u,u) max {:.3e}",
                r.pairs, r.max_abs_phi1, r.max_abs_phi2, r.antisymmetry_violations, r.max_self_phi2
            ),
        ),
        Err(e) => (false, format!("error: {e}")),
    });
    criterion(8, "zero decode gives the padded input", s(1), &mut log, || match residual_identity() {
        Ok(ok) => (ok, if ok { "bitwise equal".into() } else { "differs".into() }),
        Err(e) => (false, format!("error: {e}")),
    });

    let setup = SanitySetup::default();
    let sanity_time = criterion(9, "training sanity on synthetic chains", s(600), &mut log, || {
        match single_thread(|| training_sanity(&setup)) {
            Ok(r) => (
                r.loss_ratio() < 0.5 && r.improvement() >= 0.2,
                format!(
                    "final/epoch-1 loss {:.3} < 0.5; held-out future error {:.4} vs zero-velocity {:.4}, {:.1}% better (need 20%)",
                    r.loss_ratio(),
                    r.model_mpjpe,
                    r.zero_velocity_mpjpe,
                    100.0 * r.improvement()
                ),
            ),
            Err(e) => (false, format!("error: {e}")),
        }
    });

    criterion(10, "optimization defaults", s(1), &mut log, || {
        let rows = hyperparameters();
        let bad: Vec<String> = rows
            .iter()
            .filter(|&&(_, e, a)| (e - a).abs() > 1e-15 * e.abs().max(1.0))
            .map(|(n, e, a)| format!("{n}: {a} != {e}"))
            .collect();
        (bad.is_empty(), if bad.is_empty() { format!("{} values match", rows.len()) } else { bad.join("; ") })
    });

    criterion(11, "seeded training is reproducible", sanity_time * 2, &mut log, || {
        let dir = tempfile::tempdir().expect("tempdir");
        let config = dir.path().join("config.json");
        std::fs::write(&config, r#"{"data": {"synth": {"sequences": 50}}}"#).expect("write config");
        let runs: Result<Vec<_>, String> = ["a", "b"].iter().map(|r| train_once(&dir.path().join(r), &config)).collect();
        match runs {
            Ok(h) => {
                let worst = h[0]
                    .iter()
                    .zip(&h[1])
                    .map(|(a, b)| (a.train_loss - b.train_loss).abs())
                    .fold(0.0, f64::max);
                (
                    h[0].len() == 50 && h[0].len() == h[1].len() && worst <= 1e-12,
                    format!("{} epochs each, max loss difference {worst:.1e}", h[0].len()),
                )
            }
            Err(e) => (false, format!("train failed: {e}")),
        }
    });

    let failed: Vec<String> = log
        .iter()
        .filter(|o| !(o.passed && o.within_time))
        .map(|o| format!("{} ({})", o.id, o.name))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
