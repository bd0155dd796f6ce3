//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! naming its criterion before asserting.

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use seedtune::acquisition::{expected_improvement, expected_improvement_closed_form, incumbent, qnei_score, AcqSpec};
use seedtune::cli::{run_cmd, validate_worker_cmd};
use seedtune::gp::{fit_gp, Dataset, FitOptions, GpHyperparams, GpModel};
use seedtune::harness::{
    run_experiment, EventLog, ExperimentReport, ExperimentSpec, ObjectiveSpec, SyntheticKind, SyntheticObjective,
};
use seedtune::optimizer::{AshaAction, Method, OptimizerSettings, RungLadder, RungResult};
use seedtune::space::{ParamSpace, ParamSpec};

use common::{median, DenseGp};

const ECHO: &str = env!("CARGO_BIN_EXE_seedtune-echo-worker");

/// Writes straight to stdout so the line shows up even when the test
/// harness captures output.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn verdict(criterion: u32, ok: bool, detail: &str, started: Instant) {
    say(&format!(
        "{} criterion {criterion}: {detail} ({:.1}s)",
        if ok { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    ));
}

fn unit_space(d: usize) -> ParamSpace {
    ParamSpace::new((0..d).map(|i| ParamSpec::linear(format!("x{i}"), 0.0, 1.0)).collect()).unwrap()
}

fn branin_space() -> ParamSpace {
    ParamSpace::new(vec![ParamSpec::linear("x1", 0.0, 1.0), ParamSpec::linear("x2", 0.0, 1.0)]).unwrap()
}

#[test]
fn criterion_1_posterior_matches_dense_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for _ in 0..50 {
        let d = rng.random_range(1..=3);
        let n = rng.random_range(1..=8);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random()).collect()).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let hp = GpHyperparams {
            lengthscales: (0..d).map(|_| 10f64.powf(rng.random_range(-1.3..0.3))).collect(),
            signal_variance: 10f64.powf(rng.random_range(-1.0..1.0)),
            noise_variance: 10f64.powf(rng.random_range(-4.0..-0.5)),
        };
        let model = GpModel::condition(Dataset::new(points.clone(), values.clone()).unwrap(), hp.clone(), true).unwrap();
        let oracle = DenseGp {
            points,
            values,
            lengthscales: hp.lengthscales.clone(),
            signal_variance: hp.signal_variance,
            noise_variance: hp.noise_variance,
            diag_extra: model.jitter(),
        };
        let scale = model.standardization().scale;
        let prior = hp.signal_variance * scale * scale;
        for _ in 0..20 {
            let x: Vec<f64> = (0..d).map(|_| rng.random()).collect();
            let p = model.predict(&x, false);
            let (m, v) = oracle.predict(&x);
            worst_mean = worst_mean.max((p.mean - m).abs() / m.abs().max(scale));
            worst_var = worst_var.max((p.variance - v).abs() / v.abs().max(1e-3 * prior));
        }
    }
    let ok = worst_mean < 1e-6 && worst_var < 1e-6 && started.elapsed() < Duration::from_secs(10);
    verdict(1, ok, &format!("max rel err mean {worst_mean:.2e}, variance {worst_var:.2e}"), started);
    assert!(ok);
}

#[test]
fn criterion_2_ei_matches_monte_carlo() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let draws = 1_000_000;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mean: f64 = rng.random_range(-2.0..2.0);
        let sd: f64 = rng.random_range(0.05..2.0);
        let inc: f64 = rng.random_range(-2.0..2.0);
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let z: f64 = rng.sample(StandardNormal);
            let i = (inc - (mean + sd * z)).max(0.0);
            s1 += i;
            s2 += i * i;
        }
        let mc = s1 / draws as f64;
        let se = ((s2 / draws as f64 - mc * mc) / draws as f64).sqrt().max(1e-12);
        worst = worst.max((expected_improvement_closed_form(mean, sd, inc) - mc).abs() / se);
    }
    let ok = worst <= 3.0 && started.elapsed() < Duration::from_secs(30);
    verdict(2, ok, &format!("max |analytic - MC| = {worst:.2} SE"), started);
    assert!(ok);
}

#[test]
fn criterion_3_qnei_reduces_to_ei_without_noise() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let space = unit_space(2);
    let objective = SyntheticObjective::new(SyntheticKind::NoisyBranin2d, 0.0);
    let points: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.random(), rng.random()]).collect();
    let values: Vec<f64> = points
        .iter()
        .map(|u| objective.true_value(&space, &space.from_unit(u).unwrap()).unwrap())
        .collect();
    let data = Dataset::new(points, values).unwrap();
    let fitted = fit_gp(&data, &FitOptions::default(), 3).unwrap();
    let hp = GpHyperparams { noise_variance: 1e-8, ..fitted.hyperparams().clone() };
    let model = GpModel::condition(data, hp, true).unwrap();
    let inc = incumbent(&model);
    let spec = AcqSpec::qnei(4096, 17);

    let mut worst = 0.0f64;
    let mut scored = 0;
    while scored < 20 {
        let x: Vec<f64> = vec![rng.random(), rng.random()];
        let ei = expected_improvement(&model, &x, inc);
        // Relative error is meaningless where EI underflows.
        if ei < 1e-6 * model.standardization().scale {
            continue;
        }
        let q = qnei_score(&model, &x, &spec).unwrap();
        worst = worst.max((q - ei).abs() / ei);
        scored += 1;
    }
    let ok = worst <= 0.05 && started.elapsed() < Duration::from_secs(60);
    verdict(3, ok, &format!("max relative gap {:.2}% over 20 candidates", 100.0 * worst), started);
    assert!(ok);
}

/// Synchronous successive halving: every rung keeps the best third.
fn sha_oracle(values: &[[f64; 3]], eta: usize) -> Vec<BTreeSet<usize>> {
    let mut alive: Vec<usize> = (0..values.len()).collect();
    let mut promoted = Vec::new();
    for rung in 0..2 {
        alive.sort_by(|&a, &b| values[a][rung].total_cmp(&values[b][rung]).then(a.cmp(&b)));
        alive.truncate(alive.len() / eta);
        promoted.push(alive.iter().copied().collect());
    }
    promoted
}

#[test]
fn criterion_4_asha_promotions_match_synchronous_halving() {
    let started = Instant::now();
    let space = branin_space();
    let objective = SyntheticObjective::new(SyntheticKind::NoisyBranin2d, 0.0);
    let mut ladder = RungLadder::new(3, 1.0 / 9.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let configs: Vec<_> = (0..27).map(|_| space.sample_uniform(&mut rng)).collect();
    let value = |c: usize, rung: usize| {
        objective.evaluate(&space, &configs[c], 0, ladder_fraction(rung)).unwrap()
    };
    let table: Vec<[f64; 3]> = (0..27).map(|c| [value(c, 0), value(c, 1), value(c, 2)]).collect();

    let mut trial = 0;
    for (c, row) in table.iter().enumerate() {
        ladder.record(0, RungResult { config_id: c, trial_id: trial, value: row[0] });
        trial += 1;
    }
    while let AshaAction::Promote { config_id, to_rung } = ladder.next_action() {
        ladder.mark_promoted(to_rung - 1, config_id);
        ladder.record(to_rung, RungResult { config_id, trial_id: trial, value: table[config_id][to_rung] });
        trial += 1;
    }
    let expected = sha_oracle(&table, 3);
    let got: Vec<BTreeSet<usize>> = (0..2).map(|r| ladder.promoted(r).clone()).collect();
    let ok = got == expected && got[0].len() == 9 && got[1].len() == 3 && started.elapsed() < Duration::from_secs(5);
    verdict(4, ok, &format!("promotions per rung {:?}", got.iter().map(BTreeSet::len).collect::<Vec<_>>()), started);
    assert!(ok);
}

fn ladder_fraction(rung: usize) -> f64 {
    RungLadder::new(3, 1.0 / 9.0).unwrap().fraction(rung)
}

fn branin_experiment(label: &str, method: Method, k: usize, runs: usize) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(
        label,
        branin_space(),
        ObjectiveSpec::synthetic(SyntheticKind::NoisyBranin2d, 0.2),
        OptimizerSettings::new(method).with_repetitions(k),
    );
    spec.hpo_runs = runs;
    spec.master_seed = 2024;
    spec
}

fn run(spec: &ExperimentSpec) -> ExperimentReport {
    let mut log = EventLog::new(std::io::sink(), true);
    let report = run_experiment(spec, &mut log).unwrap();
    assert_eq!(report.failed_runs(), 0, "{}", spec.label);
    report
}

#[test]
fn criterion_5_budgets_are_matched() {
    let started = Instant::now();
    let mut problems = Vec::new();
    let cases = [
        ("random", Method::RandomSearch, 1),
        ("random_x5", Method::RandomSearch, 5),
        ("asha", Method::Asha, 1),
        ("bo_ei", Method::BoEi, 1),
        ("bo_lcb", Method::BoLcb, 1),
        ("bo_qnei", Method::BoQnei, 1),
    ];
    for (label, method, k) in cases {
        let report = run(&branin_experiment(label, method, k, 1));
        let details = report.runs[0].result.as_ref().unwrap();
        let charged: f64 = details.ledger.iter().map(|t| t.budget_fraction).sum();
        if !(99.0 - 1e-9..=100.0 + 1e-9).contains(&charged) {
            problems.push(format!("{label} charged {charged}"));
        }
        if method == Method::RandomSearch {
            let configs: BTreeSet<usize> = details.ledger.iter().map(|t| t.config_id).collect();
            let (want_trials, want_configs) = if k == 1 { (100, 100) } else { (100, 20) };
            if details.ledger.len() != want_trials || configs.len() != want_configs {
                problems.push(format!("{label}: {} trials over {} configs", details.ledger.len(), configs.len()));
            }
            for c in &configs {
                let reps = details.ledger.iter().filter(|t| t.config_id == *c).count();
                if reps != k {
                    problems.push(format!("{label}: config {c} has {reps} repetitions"));
                }
            }
        }
    }
    let ok = problems.is_empty();
    verdict(5, ok, &if ok { "all methods within [99, 100]".to_string() } else { problems.join("; ") }, started);
    assert!(ok);
}

#[test]
fn criterion_6_logs_are_reproducible_and_worker_protocol_holds() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("experiment.json");
    std::fs::write(
        &config,
        r#"{
            "space": [
                {"name": "x1", "transform": "linear", "low": 0, "high": 1},
                {"name": "x2", "transform": "linear", "low": 0, "high": 1}
            ],
            "objective": {"kind": "noisy_branin_2d", "noise_sd": 0.2},
            "methods": [{"method": "random"}, {"method": "asha"}, {"method": "bo_qnei", "mc_samples": 64}],
            "budget": {"capacity": 15, "checkpoints": [5, 15]},
            "evaluation": {"final_eval_seeds": 5, "hpo_runs": 2},
            "master_seed": 9
        }"#,
    )
    .unwrap();
    let mut logs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        assert_eq!(run_cmd(&config, &out, Some(11), true, &mut std::io::sink()), 0);
        logs.push(std::fs::read(out.join("results.jsonl")).unwrap());
    }
    let identical = logs[0] == logs[1] && !logs[0].is_empty();
    let mut transcript = Vec::new();
    let code = validate_worker_cmd(ECHO, Duration::from_secs(10), &mut transcript);
    let transcript = String::from_utf8(transcript).unwrap();
    let ok = identical && code == 0 && transcript.lines().all(|l| l.starts_with("PASS"));
    verdict(6, ok, &format!("logs identical: {identical}, loopback worker exit {code}"), started);
    assert!(ok, "{transcript}");
}

/// Nearest-rank bootstrap interval for the median of `a` minus the median of `b`.
fn median_difference_interval(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut diffs: Vec<f64> = (0..2000)
        .map(|_| {
            let ra: Vec<f64> = (0..a.len()).map(|_| a[rng.random_range(0..a.len())]).collect();
            let rb: Vec<f64> = (0..b.len()).map(|_| b[rng.random_range(0..b.len())]).collect();
            median(&ra) - median(&rb)
        })
        .collect();
    diffs.sort_by(f64::total_cmp);
    (diffs[49], diffs[1949])
}

#[test]
fn criterion_7_and_8_branin_benchmark() {
    let started = Instant::now();
    let methods = [
        ("random", Method::RandomSearch, 1),
        ("random_x5", Method::RandomSearch, 5),
        ("bo_qnei", Method::BoQnei, 1),
        ("bo_ei", Method::BoEi, 1),
    ];
    let reports: Vec<ExperimentReport> = methods
        .iter()
        .map(|(label, method, k)| run(&branin_experiment(label, *method, *k, 20)))
        .collect();
    let regrets = |i: usize, cp: f64| -> Vec<f64> {
        reports[i].at_checkpoint(cp).iter().map(|r| r.regret.unwrap()).collect()
    };
    let mut medians = Vec::new();
    for (i, (label, _, _)) in methods.iter().enumerate() {
        let per_cp: Vec<f64> = [25.0, 50.0, 100.0].iter().map(|&cp| median(&regrets(i, cp))).collect();
        say(&format!("  {label}: median regret at 25/50/100 = {:.4} / {:.4} / {:.4}", per_cp[0], per_cp[1], per_cp[2]));
        medians.push(per_cp);
    }

    let mut ok = true;
    let mut failed = Vec::new();
    for (name, a, b) in [("bo_qnei <= random", 2, 0), ("random <= random_x5", 0, 1), ("bo_qnei <= bo_ei", 2, 3)] {
        if medians[a][2] <= medians[b][2] {
            say(&format!("  {name}: {:.4} <= {:.4}", medians[a][2], medians[b][2]));
        } else {
            let (lo, hi) = median_difference_interval(&regrets(a, 100.0), &regrets(b, 100.0));
            say(&format!(
                "  {name} fails: {:.4} > {:.4}, 95% bootstrap interval of the difference [{lo:.4}, {hi:.4}]",
                medians[a][2], medians[b][2]
            ));
            ok = false;
            failed.push(name);
        }
    }
    for bo in [2, 3] {
        // The full budget must not leave the median BO recommendation worse
        // than a quarter of it.
        let m = &medians[bo];
        if m[2] > m[0] {
            say(&format!("  {} median regret at 100 exceeds the one at 25", methods[bo].0));
            ok = false;
            failed.push(methods[bo].0);
        }
    }
    let in_time = started.elapsed() < Duration::from_secs(15 * 60);
    ok &= in_time;
    verdict(
        7,
        ok,
        &if failed.is_empty() { "all directions hold".to_string() } else { format!("failed: {}", failed.join(", ")) },
        started,
    );

    // Optimism of the observed best for random search at the final checkpoint.
    let gaps: Vec<f64> = reports[0]
        .at_checkpoint(100.0)
        .iter()
        .map(|r| r.best_observed.unwrap() - r.final_mean)
        .collect();
    for (run, gap) in gaps.iter().enumerate() {
        say(&format!("  random run {run}: observed best minus final mean = {gap:.4}"));
    }
    let gap = median(&gaps);
    let optimistic = gap > 0.0;
    verdict(8, optimistic, &format!("median optimism gap {gap:.4}"), started);

    assert!(ok && optimistic);
}
