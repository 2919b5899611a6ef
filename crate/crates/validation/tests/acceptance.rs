//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fedsim::client::Correction;
use fedsim::data::{dirichlet_partition, sort_and_partition, synth_gaussian_mixture};
use fedsim::engine::{
    attention_heatmap, Algorithm, Hooks, PartitionScheme, Population, QuadraticTestbed, RunConfig,
    Simulation,
};
use fedsim::models::{quadratic_optimum, Batch, LossModel};
use fedsim::seeding::stream;
use fedsim::server::{
    attention_scores, average_aggregate, igfl_server_aggregate, AttentionOption, RoundUpdates,
};
use fedsim::{ParamVector, ServerState};
use fedsim_cli::{run_experiment, RunOptions, METRICS_FILE};
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Check = fn() -> Verdict;

const DRIFT_LR: f64 = 0.01;

/// Desk-scale learning rate. At 0.01 and above every algorithm reaches the
/// same plateau within 300 rounds, which leaves nothing to order.
const DESK_LR: f64 = 0.003;

/// The desk-scale corpus: 10 classes x 1000 examples, 20 features.
fn desk(algo: Algorithm, seed: u64) -> RunConfig {
    RunConfig {
        algo,
        clients: 10,
        rounds: 300,
        sample_rate: 1.0,
        batch_size: 100,
        epochs: 1,
        lr: DESK_LR,
        seed,
        timing: false,
        ..RunConfig::default()
    }
}

fn gradients() -> Verdict {
    let mut worst = [0.0f64; 3];
    for i in 0..20u64 {
        let mut rng = stream(100, &[i]);
        let d = rng.random_range(1..30);
        let center = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let curv = (0..d).map(|_| rng.random_range(0.01..10.0)).collect();
        let q = LossModel::quadratic(ParamVector::from_vec(center), ParamVector::from_vec(curv)).unwrap();
        let w = ParamVector::from_vec((0..d).map(|_| rng.random_range(-5.0..5.0)).collect());
        worst[0] = worst[0].max(q.gradient_check(&w, &Batch::analytic(), 1e-5).unwrap());

        let (dim, hidden, classes, rows) = (
            rng.random_range(1..12),
            rng.random_range(1..12),
            rng.random_range(2..7),
            rng.random_range(1..20),
        );
        let x = (0..rows * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let b = Batch::new(x, y, dim).unwrap();
        for (slot, m) in [
            (1, LossModel::logistic(dim, classes).unwrap()),
            (2, LossModel::mlp(dim, hidden, classes).unwrap()),
        ] {
            let w = ParamVector::from_vec((0..m.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect());
            worst[slot] = worst[slot].max(m.gradient_check(&w, &b, 1e-5).unwrap());
        }
    }
    verdict(
        worst.iter().all(|&e| e <= 1e-5),
        format!(
            "max relative error quadratic {:.1e}, logistic {:.1e}, mlp {:.1e} (<= 1e-5, 20 instances each)",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn centralized() -> Verdict {
    let bed = QuadraticTestbed {
        clients: 10,
        ..QuadraticTestbed::DRIFT
    };
    let objectives = bed.objectives::<f64>(7).unwrap();
    let cfg = RunConfig {
        algo: Algorithm::Fedavg,
        clients: 10,
        rounds: 100,
        lr: 0.1,
        ..RunConfig::default()
    };
    let pop = Population::Analytic {
        objectives: objectives.clone(),
        local_steps: 1,
    };
    let mut sim = Simulation::new(cfg, pop).unwrap();
    let mut w = ParamVector::<f64>::zeros(bed.dim);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        sim.run_round().unwrap();
        let mut g = ParamVector::zeros(bed.dim);
        for m in &objectives {
            g.axpy(0.1, &m.gradient(&w, &Batch::analytic()).unwrap());
        }
        w.axpy(-0.1, &g);
        worst = worst.max(sim.server().params.max_abs_diff(&w).unwrap());
    }
    verdict(worst <= 1e-12, format!("max per-coordinate gap {worst:.1e} over 100 rounds (<= 1e-12)"))
}

fn degenerate() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let base = RunConfig {
        rounds: 40,
        ..desk(Algorithm::Fedavg, 5)
    };
    let a = dir.path().join("fedavg");
    let b = dir.path().join("igfl");
    run_experiment(&base, &a, RunOptions::default()).unwrap();
    let hooked = RunOptions {
        hooks: Hooks {
            client_correction: Correction::Off,
            uniform_attention: true,
        },
        heatmap: false,
    };
    run_experiment(&RunConfig { algo: Algorithm::Igfl, ..base }, &b, hooked).unwrap();
    let (x, y) = (
        fs::read(a.join(METRICS_FILE)).unwrap(),
        fs::read(b.join(METRICS_FILE)).unwrap(),
    );
    verdict(x == y, format!("{} vs {} CSV bytes, identical: {}", x.len(), y.len(), x == y))
}

fn drift_distances(local_steps: usize) -> [f64; 3] {
    let bed = QuadraticTestbed::DRIFT;
    let wstar = quadratic_optimum(&bed.objectives::<f64>(0).unwrap()).unwrap();
    [Algorithm::Fedavg, Algorithm::IgflC, Algorithm::Fedavgm].map(|a| {
        let s: ServerState = bed.run(a, local_steps, DRIFT_LR, 200, 0).unwrap();
        s.params.sub(&wstar).unwrap().norm()
    })
}

fn drift_reduction() -> Verdict {
    let [fedavg, igfl_c, _] = drift_distances(10);
    let ratio = igfl_c / fedavg;
    verdict(
        igfl_c < fedavg && ratio <= 0.8,
        format!("|w - w*|: fedavg {fedavg:.4}, igfl_c {igfl_c:.4}, ratio {ratio:.3} (<= 0.8)"),
    )
}

fn amortization_trend() -> Verdict {
    let adv: Vec<f64> = [10, 50, 250]
        .into_iter()
        .map(|t| {
            let [_, igfl_c, fedavgm] = drift_distances(t);
            fedavgm - igfl_c
        })
        .collect();
    verdict(
        adv[0] <= adv[1] && adv[1] <= adv[2],
        format!(
            "fedavgm - igfl_c distance at T=10,50,250: {:.5}, {:.5}, {:.5} (non-decreasing)",
            adv[0], adv[1], adv[2]
        ),
    )
}

fn desk_ordering() -> Verdict {
    let algos = [Algorithm::Fedavg, Algorithm::Igfl, Algorithm::IgflC, Algorithm::IgflS];
    let mut acc = [0.0f64; 4];
    for seed in 0..3 {
        for (k, &a) in algos.iter().enumerate() {
            let report = Simulation::<f64>::from_config(desk(a, seed)).unwrap().run().unwrap();
            acc[k] += 100.0 * report.summary_accuracy.unwrap() / 3.0;
        }
    }
    let [fedavg, igfl, igfl_c, igfl_s] = acc;
    let pass = igfl >= fedavg + 1.0
        && igfl >= igfl_c
        && igfl >= igfl_s
        && igfl_c >= fedavg - 0.5
        && igfl_s >= fedavg - 0.5;
    verdict(
        pass,
        format!("mean last-10% accuracy: fedavg {fedavg:.2}, igfl {igfl:.2}, igfl_c {igfl_c:.2}, igfl_s {igfl_s:.2}"),
    )
}

fn random_updates(rng: &mut impl Rng, n: usize, d: usize) -> (Vec<ParamVector<f64>>, Vec<ParamVector<f64>>) {
    let mut draw = || ParamVector::from_vec((0..d).map(|_| rng.random_range(-3.0..3.0)).collect());
    let cur = (0..n).map(|_| draw()).collect();
    let prev = (0..n).map(|_| draw()).collect();
    (cur, prev)
}

fn attention_suite() -> Verdict {
    let options = [AttentionOption::SelfAttention, AttentionOption::Global, AttentionOption::Time];
    let (mut simplex, mut perm_ok, mut avg_gap, mut hull_ok) = (0.0f64, true, 0.0f64, true);
    let mut cases = 0;
    for case in 0..2000u64 {
        let mut rng = stream(700, &[case]);
        let (n, d) = (rng.random_range(1..=8), rng.random_range(1..=32));
        let (cur, prev) = random_updates(&mut rng, n, d);
        let ids: Vec<usize> = (0..n).collect();
        let mut perm = ids.clone();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let u = RoundUpdates::new(ids.clone(), cur.clone(), prev.clone()).unwrap();
        let pu = RoundUpdates::new(
            perm.clone(),
            perm.iter().map(|&p| cur[p].clone()).collect(),
            perm.iter().map(|&p| prev[p].clone()).collect(),
        )
        .unwrap();
        let same = RoundUpdates::new(ids, vec![cur[0].clone(); n], prev.clone()).unwrap();
        let state = ServerState::new(ParamVector::zeros(d));
        let avg = average_aggregate(&state, &same).unwrap();
        for opt in options {
            let s = attention_scores(&u, opt).unwrap();
            let (err, nonneg) = s.simplex_error();
            simplex = simplex.max(if nonneg { err } else { f64::INFINITY });
            let (s0, a0) = igfl_server_aggregate(&state, &u, opt).unwrap();
            let (s1, a1) = igfl_server_aggregate(&state, &pu, opt).unwrap();
            perm_ok &= s0.params == s1.params;
            perm_ok &= (0..n).all(|a| (0..n).all(|b| a1.row(a)[b] == a0.row(perm[a])[perm[b]]));
            let (si, _) = igfl_server_aggregate(&state, &same, opt).unwrap();
            avg_gap = avg_gap.max(si.params.max_abs_diff(&avg.params).unwrap());
            for k in 0..d {
                let lo = cur.iter().map(|c| c[k]).fold(f64::INFINITY, f64::min);
                let hi = cur.iter().map(|c| c[k]).fold(f64::NEG_INFINITY, f64::max);
                hull_ok &= lo - 1e-12 <= s0.params[k] && s0.params[k] <= hi + 1e-12;
            }
        }
        cases += 1;
    }
    verdict(
        simplex <= 1e-12 && perm_ok && avg_gap <= 1e-12 && hull_ok,
        format!(
            "{cases} cases x 3 options: simplex error {simplex:.1e}, permutation exact {perm_ok}, \
             identical-delta gap {avg_gap:.1e}, convex hull {hull_ok}"
        ),
    )
}

fn heatmaps() -> Verdict {
    let heatmap_cfg = |partition, seed| RunConfig {
        algo: Algorithm::Igfl,
        attention: AttentionOption::SelfAttention,
        partition,
        eval_every: 300,
        ..desk(Algorithm::Igfl, seed)
    };
    let mut rates = Vec::new();
    for seed in 0..50 {
        let mut sim = Simulation::<f64>::from_config(heatmap_cfg(PartitionScheme::Sort, seed)).unwrap();
        rates.push(attention_heatmap(&mut sim).unwrap().matching_rate);
    }
    let rates: Vec<f64> = rates.into_iter().filter(|r| !r.is_nan()).collect();
    let matching = rates.iter().sum::<f64>() / rates.len() as f64;
    let mut top = 0.0;
    let paired_runs = 10;
    for seed in 0..paired_runs {
        let mut sim = Simulation::<f64>::from_config(heatmap_cfg(PartitionScheme::Paired, seed)).unwrap();
        top += attention_heatmap(&mut sim).unwrap().paired_top_rate / paired_runs as f64;
    }
    verdict(
        matching >= 0.90 && top >= 0.90,
        format!(
            "mean matching rate {matching:.3} over {} populations (>= 0.90); paired top-score rows {top:.3} over {paired_runs} (>= 0.90)",
            rates.len()
        ),
    )
}

fn partitioners() -> Verdict {
    let ds = synth_gaussian_mixture::<f64>(10, 1000, 4, 2.0, 0).unwrap();
    let max_share = |h: &Vec<usize>| *h.iter().max().unwrap() as f64 / h.iter().sum::<usize>() as f64;
    let (mut near, mut total) = (0, 0);
    let mut skewed = Vec::new();
    let mut exact = true;
    for seed in 0..50 {
        for (rho, sink) in [(1000.0, 0), (0.1, 1)] {
            let p = dirichlet_partition(&ds, 100, rho, seed).unwrap();
            let mut all = p.clients().concat();
            all.sort_unstable();
            exact &= all == (0..ds.len()).collect::<Vec<_>>();
            for h in p.class_histograms(&ds) {
                let m = max_share(&h);
                if sink == 0 {
                    total += 1;
                    near += usize::from((m - 0.1).abs() < 0.05);
                } else {
                    skewed.push(m);
                }
            }
        }
    }
    skewed.sort_by(f64::total_cmp);
    let median = 0.5 * (skewed[skewed.len() / 2 - 1] + skewed[skewed.len() / 2]);
    let mut two_labels = true;
    for seed in 0..50 {
        let p = sort_and_partition(&ds, 10, seed).unwrap();
        let mut all = p.clients().concat();
        all.sort_unstable();
        exact &= all == (0..ds.len()).collect::<Vec<_>>();
        two_labels &= p.label_sets(&ds).iter().all(|l| l.len() <= 2);
    }
    let frac = near as f64 / total as f64;
    verdict(
        frac >= 0.95 && median > 0.4 && two_labels && exact,
        format!(
            "rho=1000 within 0.05: {frac:.3} (>= 0.95); rho=0.1 median max share {median:.3} (> 0.4); \
             sort <= 2 labels {two_labels}; disjoint and covering {exact}"
        ),
    )
}

fn determinism() -> Verdict {
    let strip = |text: String| -> Vec<String> {
        text.lines()
            .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap_or_default())
            .collect()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut same = Vec::new();
    for algo in Algorithm::ALL {
        let cfg = RunConfig {
            rounds: 20,
            sample_rate: 0.5,
            timing: true,
            ..desk(algo, 9)
        };
        let mut runs = Vec::new();
        for k in 0..2 {
            let out = dir.path().join(format!("{}-{k}", algo.name()));
            run_experiment(&cfg, &out, RunOptions::default()).unwrap();
            runs.push(strip(fs::read_to_string(out.join(METRICS_FILE)).unwrap()));
        }
        if runs[0] == runs[1] {
            same.push(algo.name());
        }
    }
    verdict(
        same.len() == Algorithm::ALL.len(),
        format!("identical CSVs (elapsed_ms excluded) for {}/{} algorithms", same.len(), Algorithm::ALL.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, Check, Duration); 10] = [
        ("gradient correctness", gradients, Duration::from_secs(5)),
        ("centralized equivalence", centralized, Duration::from_secs(1)),
        ("degenerate equivalence", degenerate, Duration::from_secs(10)),
        ("drift reduction", drift_reduction, Duration::from_secs(10)),
        ("amortization trend", amortization_trend, Duration::from_secs(120)),
        ("desk-scale ordering", desk_ordering, Duration::from_secs(15 * 60)),
        ("attention properties", attention_suite, Duration::from_secs(5)),
        ("heatmap matching rate", heatmaps, Duration::from_secs(30 * 60)),
        ("partitioner statistics", partitioners, Duration::from_secs(10)),
        ("determinism", determinism, Duration::from_secs(120)),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let took = start.elapsed();
        let in_time = took <= *budget;
        let pass = v.pass && in_time;
        failed += usize::from(!pass);
        println!(
            "{} criterion {n:>2} {name}: {} [{:.2}s, budget {}s{}]",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { ", over budget" },
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
