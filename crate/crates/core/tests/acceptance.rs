//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ctxmat::context::Hierarchy;
use ctxmat::experiment::{run_experiment, BenchmarkConfig, ExperimentKind, ExperimentReport};
use ctxmat::gradcheck::{network_suite, op_suite};
use ctxmat::graph::{Feeds, Op};
use ctxmat::maps::LabelMap;
use ctxmat::net::{build_network, InjectionLayer, NetworkConfig};
use ctxmat::stats::{entropy, granularity_study, CooccurrenceTable};
use ctxmat::synth::{bayes_oracle, default_world, ContextMode};
use ctxmat::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 0;

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

fn fixture() -> serde_json::Value {
    serde_json::from_str(include_str!("fixtures/oracle.json")).unwrap()
}

fn threshold(name: &str) -> f64 {
    fixture()["thresholds"][name].as_f64().unwrap()
}

fn accuracy(rep: &ExperimentReport, label: &str) -> f64 {
    rep.row(label).map(|r| r.accuracy).unwrap_or(f64::NAN)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut reports = op_suite(SEED, 1e-5, 1e-5).unwrap();
    let ops = reports.len();
    for layer in InjectionLayer::ALL {
        reports.extend(network_suite(SEED, layer, 1e-5, 1e-4).unwrap());
    }
    let worst_op = reports[..ops].iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let worst_net = reports[ops..].iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    let elapsed = start.elapsed();
    outcome(
        worst_op < 1e-5 && worst_net < 1e-4 && failed.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} checks, worst op {worst_op:.2e}, worst network {worst_net:.2e}, failed {failed:?}, {:.1}s",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn entropy_anchor() -> Outcome {
    let h = entropy(&[1.0 / 16.0; 16]);
    outcome((h - 2.7726).abs() <= 0.005, format!("H(uniform-16) = {h:.6}"))
}

/// Random nested partition of `n` leaves into at most `k` groups.
fn assign(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..k)).collect()
}

fn refinement() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut violations = 0;
    let mut worst_gap = 0.0f64;
    for _ in 0..100 {
        let leaves = rng.gen_range(8..32);
        let low = assign(leaves, rng.gen_range(4..12), &mut rng);
        let mid = assign(12, rng.gen_range(2..6), &mut rng);
        let high = assign(6, rng.gen_range(1..3), &mut rng);
        let names: Vec<String> = (0..leaves).map(|i| format!("leaf{i}")).collect();
        let ancestors = (0..leaves)
            .map(|i| {
                let (l, m) = (low[i], mid[low[i]]);
                vec![format!("high{}", high[m]), format!("mid{m}"), format!("low{l}")]
            })
            .collect();
        let h = Hierarchy::new(
            ["high", "mid", "low", "leaf"].map(String::from).to_vec(),
            names.clone(),
            ancestors,
        )
        .unwrap();
        let nm = rng.gen_range(2..10);
        let counts: Vec<Vec<u64>> = (0..nm)
            .map(|_| (0..leaves).map(|_| if rng.gen_bool(0.3) { 0 } else { rng.gen_range(1..200) }).collect())
            .collect();
        let materials = (0..nm).map(|m| format!("m{m}")).collect();
        let table = CooccurrenceTable::from_counts(materials, names, counts).unwrap();
        let levels = granularity_study(&table, &h, None).unwrap();
        for pair in levels.windows(2) {
            if pair[1].expected_entropy > pair[0].expected_entropy {
                violations += 1;
                worst_gap = worst_gap.max(pair[1].expected_entropy - pair[0].expected_entropy);
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        violations == 0 && elapsed < Duration::from_secs(10),
        format!("{violations} violations (worst {worst_gap:.3e}) over 100 tables, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn ablation(rep: &ExperimentReport) -> Outcome {
    let f = fixture();
    let w = default_world();
    let mut frozen_ok = (w.measured_ambiguity_rate() - f["ambiguity_rate"].as_f64().unwrap()).abs() < 1e-12;
    for mode in ContextMode::ALL {
        let frozen = f["bayes_oracle"][mode.name()].as_f64().unwrap();
        frozen_ok &= (bayes_oracle(&w, mode) - frozen).abs() < 1e-12 && (rep.oracle[mode.name()] - frozen).abs() < 1e-12;
    }
    let (none, place, object, both) = (
        accuracy(rep, "None"),
        accuracy(rep, "Only Places"),
        accuracy(rep, "Only Objects"),
        accuracy(rep, "Places + Objects"),
    );
    let gap = threshold("ablation_gap_points");
    let oracle_both = f["bayes_oracle"]["both"].as_f64().unwrap() * 100.0;
    let passed = frozen_ok
        && both - object >= gap
        && object - none >= gap
        && both - place >= gap
        && oracle_both - both <= threshold("oracle_distance_points");
    outcome(
        passed,
        format!(
            "none {none:.2}, places {place:.2}, objects {object:.2}, both {both:.2}, oracle(both) {oracle_both:.2}, frozen oracle {}",
            if frozen_ok { "matches" } else { "differs" }
        ),
    )
}

fn injection(bench: &BenchmarkConfig) -> Outcome {
    let rep = run_experiment(ExperimentKind::Injection, bench, SEED).unwrap();
    let (up, p1) = (accuracy(&rep, "upsampling"), accuracy(&rep, "pool1"));
    let rows: Vec<String> = rep.rows.iter().map(|r| format!("{} {:.2}", r.label, r.accuracy)).collect();
    outcome(
        up >= p1 + threshold("injection_margin_points") && rep.failed_invariants().is_empty(),
        format!("{} over {} seeds", rows.join(", "), bench.replicates),
    )
}

fn resolution(bench: &BenchmarkConfig) -> Outcome {
    let rep = run_experiment(ExperimentKind::Resolution, bench, SEED).unwrap();
    let accs: Vec<f64> = rep.rows.iter().map(|r| r.accuracy).collect();
    let spread = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - accs.iter().cloned().fold(f64::INFINITY, f64::min);
    let rows: Vec<String> = rep.rows.iter().map(|r| format!("{} {:.2}", r.label, r.accuracy)).collect();
    outcome(
        rep.rows.len() == 5 && spread <= threshold("resolution_spread_points") && rep.failed_invariants().is_empty(),
        format!("{}, spread {spread:.2}", rows.join(", ")),
    )
}

fn multiply_prior(bench: &BenchmarkConfig) -> Outcome {
    let rep = run_experiment(ExperimentKind::MultiplyPrior, bench, SEED).unwrap();
    let d = &rep.details;
    let errors = d["confident_errors"].as_u64().unwrap();
    let by_prior = d["fixed_by_prior"].as_u64().unwrap();
    let by_context = d["fixed_by_context"].as_u64().unwrap();
    let (prior_rate, context_rate) = if errors > 0 {
        (by_prior as f64 / errors as f64, by_context as f64 / errors as f64)
    } else {
        (f64::NAN, f64::NAN)
    };
    outcome(
        errors > 0
            && prior_rate < threshold("prior_fix_max")
            && context_rate >= threshold("context_fix_min")
            && rep.failed_invariants().is_empty(),
        format!(
            "{errors} confident errors, prior fixes {:.1}%, context fixes {:.1}%",
            prior_rate * 100.0,
            context_rate * 100.0
        ),
    )
}

/// Adds a perturbation input onto the logits of a full network and checks
/// that perturbing unlabeled pixels leaves the loss and every parameter
/// gradient bitwise unchanged.
fn masked_isolation() -> Outcome {
    let config = NetworkConfig {
        num_materials: 4,
        stage_widths: vec![4, 4, 4, 4],
        context_channels: 3,
        patch_size: 16,
        ..NetworkConfig::default()
    };
    let net = build_network(&config, 17).unwrap();
    let nodes = net.nodes();
    let mut g = net.graph().clone();
    let delta = g.input("delta");
    let shifted = g.binary(Op::Add, nodes.logits, delta, "shifted").unwrap();
    let loss = g.binary(Op::MaskedCrossEntropy, shifted, nodes.labels, "probe_loss").unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (16, 16);
    let labels = LabelMap::new(
        h,
        w,
        (0..h * w).map(|i| if i % 3 == 0 { LabelMap::UNLABELED } else { (i % 4) as u16 }).collect(),
    )
    .unwrap();
    let mut feeds = Feeds::new();
    feeds.insert("image".into(), Tensor::uniform(&[1, 3, h, w], 0.0, 1.0, &mut rng));
    feeds.insert("context".into(), Tensor::uniform(&[1, 3, h, w], 0.0, 1.0, &mut rng));
    feeds.insert("labels".into(), labels.to_tensor());

    let run = |d: Tensor| {
        let mut f = feeds.clone();
        f.insert("delta".into(), d);
        let eval = g.forward(&f).unwrap();
        let l = eval.value(loss).item();
        (l, g.backward(&eval, loss).unwrap().into_params())
    };
    let (l0, g0) = run(Tensor::zeros(&[1, 4, h, w]));
    let mut worst = 0;
    let mut trials = 0;
    for _ in 0..5 {
        let d = Tensor::from_fn(&[1, 4, h, w], |i| if (i % (h * w)) % 3 == 0 { rng.gen_range(-1e3..1e3) } else { 0.0 });
        let (l1, g1) = run(d);
        trials += 1;
        if l1.to_bits() != l0.to_bits() {
            worst += 1;
            continue;
        }
        if g0.len() != g1.len() || g0.iter().any(|(n, t)| !g1.get(n).is_some_and(|u| u.bit_eq(t))) {
            worst += 1;
        }
    }
    outcome(worst == 0, format!("{trials} perturbations, {} parameters compared, {worst} differing", g0.len()))
}

fn determinism(first: &ExperimentReport, bench: &BenchmarkConfig) -> Outcome {
    let second = run_experiment(ExperimentKind::Ablation, bench, SEED).unwrap();
    let (a, b) = (first.to_json().unwrap(), second.to_json().unwrap());
    outcome(a == b, format!("two ablation reports of {} bytes, identical: {}", a.len(), a == b))
}

fn main() -> ExitCode {
    // cargo passes harness flags such as --nocapture; nothing to filter here
    let bench = BenchmarkConfig::default();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, o: Outcome| {
        println!("criterion {n} {}: {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    record(1, "gradient correctness", gradients());
    record(2, "entropy anchor", entropy_anchor());
    record(3, "refinement monotonicity", refinement());
    let start = Instant::now();
    let ablation_report = run_experiment(ExperimentKind::Ablation, &bench, SEED).unwrap();
    let ablation_secs = start.elapsed().as_secs_f64();
    let mut o = ablation(&ablation_report);
    o.detail.push_str(&format!(", {ablation_secs:.0}s"));
    record(4, "context ablation ordering", o);
    record(5, "injection level trend", injection(&bench));
    record(6, "resolution insensitivity", resolution(&bench));
    record(7, "multiply-prior negative result", multiply_prior(&bench));
    record(8, "masked loss isolation", masked_isolation());
    record(9, "determinism", determinism(&ablation_report, &bench));
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
