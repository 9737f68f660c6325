//! Acceptance suite: ten criteria, one pass/fail line each.
//!
//! Runs as a custom harness (sequentially) so criteria print in order
//! and a failed criterion does not abort the rest.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use structreg::corpus::{generate_synthetic, Dataset, SynthSpec};
use structreg::decompose::{decompose_epoch, DecompositionPolicy};
use structreg::features::{extract, Layout, TemplateSet};
use structreg::models::{
    crf_loss_grad, forward_backward, oracle, score_lattice, viterbi, Model,
};
use structreg::theory::{
    generalization_bound, probe_stability, sgd_iterations, stability_bounds, SgdTheoryParams,
    TheoryParams,
};
use structreg::train::{
    evaluate_accuracy, measure_epochs_to_tolerance, regularized_objective, stream_objective,
    train, TrainConfig,
};

fn main() {
    let criteria: Vec<(&str, fn())> = vec![
        ("exact-inference oracle equivalence", c1_oracle_equivalence),
        ("CRF gradient vs finite differences", c2_gradient),
        ("alpha=1 identity", c3_alpha_one_identity),
        ("decomposition distribution", c4_decomposition_distribution),
        ("bound calculators", c5_bound_calculators),
        ("generalization trend", c6_generalization_trend),
        ("convergence speedup trend", c7_convergence_trend),
        ("stability trend", c8_stability_trend),
        ("determinism & persistence", c9_determinism),
        ("perceptron averaging protocol", c10_perceptron),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match catch_unwind(AssertUnwindSafe(f)) {
            Ok(()) => println!("criterion {:2} ({}): PASS", i + 1, name),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .map(String::as_str)
                    .or_else(|| e.downcast_ref::<&str>().copied())
                    .unwrap_or("panic");
                println!("criterion {:2} ({}): FAIL — {}", i + 1, name, msg);
                failures += 1;
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

/// The synthetic benchmark for the trend criteria: 5 labels, vocab 100,
/// mean length 40, 200 train / 400 test sequences, feature-rich default
/// templates. The soft emissions and high surface noise make the task
/// transition-dominated, where structure regularization has bite.
fn benchmark_task(seed: u64) -> (Dataset, Dataset) {
    let spec = SynthSpec {
        num_labels: 5,
        vocab_size: 100,
        mean_length: 40.0,
        num_samples: 600,
        transition_sharpness: 8.0,
        emission_sharpness: 2.0,
        noise_rate: 0.4,
        seed,
    };
    let mut all = generate_synthetic(&spec).unwrap();
    extract(&mut all, &TemplateSet::default(), false).unwrap();
    all.freeze();
    let mut train_ds = all.clone();
    train_ds.samples.truncate(200);
    let mut test_ds = all;
    test_ds.samples.drain(..200);
    (train_ds, test_ds)
}

/// Random instance: sparse feature vectors plus random weights.
fn random_instance(
    rng: &mut ChaCha8Rng,
    n: usize,
    yn: usize,
    d: usize,
) -> (Layout, Vec<f64>, Vec<Vec<(u32, f64)>>) {
    let layout = Layout::new(d, yn, false).unwrap();
    let weights: Vec<f64> = (0..layout.total()).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let feats: Vec<Vec<(u32, f64)>> = (0..n)
        .map(|_| {
            let k = rng.gen_range(1..=3.min(d));
            let mut idx: Vec<u32> = (0..d as u32).collect();
            for i in 0..k {
                let j = rng.gen_range(i..d);
                idx.swap(i, j);
            }
            let mut v: Vec<(u32, f64)> = idx[..k]
                .iter()
                .map(|&f| (f, rng.gen_range(-1.0..1.0)))
                .collect();
            v.sort_unstable_by_key(|&(f, _)| f);
            v
        })
        .collect();
    (layout, weights, feats)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

// --------------------------------------------------------------- criteria

fn c1_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..200 {
        let yn = rng.gen_range(2..=5usize);
        // keep |Y|^n small enough that the per-query enumeration oracle
        // stays well under the one-minute budget (and <= 1e5 paths)
        let max_n = (1usize..=11)
            .rev()
            .find(|&n| (yn as f64).powi(n as i32) <= 2000.0)
            .unwrap();
        let n = rng.gen_range(1..=max_n);
        let (layout, weights, feats) = random_instance(&mut rng, n, yn, 8);
        let mut lat = score_lattice(&layout, &weights, 1.0, &feats).unwrap();
        forward_backward(&mut lat).unwrap();

        let log_z = oracle::log_z(&lat);
        assert!(
            rel_err(lat.log_z, log_z) <= 1e-9,
            "case {}: logZ {} vs oracle {}",
            case,
            lat.log_z,
            log_z
        );
        for k in 0..n {
            for y in 0..yn {
                let got = lat.node_marginal(k, y);
                let want = oracle::node_marginal(&lat, k, y);
                assert!(
                    rel_err(got, want) <= 1e-9,
                    "case {}: node marginal ({},{})",
                    case,
                    k,
                    y
                );
            }
        }
        for k in 1..n {
            for p in 0..yn {
                for y in 0..yn {
                    let got = lat.pair_marginal(k, p, y);
                    let want = oracle::pair_marginal(&lat, k, p, y);
                    assert!(
                        rel_err(got, want) <= 1e-9,
                        "case {}: pair marginal",
                        case
                    );
                }
            }
        }
        let (path, score) = viterbi(&layout, &weights, 1.0, &feats).unwrap();
        let (opath, oscore) = oracle::argmax(&lat);
        assert_eq!(path, opath, "case {}: viterbi path", case);
        assert!(rel_err(score, oscore) <= 1e-9, "case {}: viterbi score", case);
    }
}

fn c2_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let h = 1e-4;
    for case in 0..100 {
        let yn = rng.gen_range(2..=3usize);
        let n = rng.gen_range(1..=4usize);
        let d = 5;
        let (layout, mut weights, feats) = random_instance(&mut rng, n, yn, d);
        let gold: Vec<u32> = (0..n).map(|_| rng.gen_range(0..yn as u32)).collect();
        let (_, grad) = crf_loss_grad(&layout, &weights, 1.0, &feats, &gold).unwrap();
        let dense: std::collections::HashMap<usize, f64> = grad.into_iter().collect();
        for i in 0..layout.total() {
            let orig = weights[i];
            weights[i] = orig + h;
            let (lp, _) = crf_loss_grad(&layout, &weights, 1.0, &feats, &gold).unwrap();
            weights[i] = orig - h;
            let (lm, _) = crf_loss_grad(&layout, &weights, 1.0, &feats, &gold).unwrap();
            weights[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let analytic = dense.get(&i).copied().unwrap_or(0.0);
            assert!(
                rel_err(analytic, fd) < 1e-6,
                "case {}: coord {}: analytic {} vs fd {}",
                case,
                i,
                analytic,
                fd
            );
        }
    }
}

fn c3_alpha_one_identity() {
    let (tr, _) = benchmark_task(3);
    let policy = DecompositionPolicy::new(0.0, 77).unwrap();
    assert!(policy.disabled());
    for epoch in 0..3u64 {
        let stream = decompose_epoch(&tr, &policy, epoch);
        // every mini is a whole sample, and parents form a permutation
        let mut seen = vec![false; tr.len()];
        for m in &stream.minis {
            assert_eq!(m.start, 0);
            assert_eq!(m.end, tr.samples[m.parent].len());
            assert!(!seen[m.parent], "parent visited twice");
            seen[m.parent] = true;
        }
        assert!(seen.iter().all(|&s| s), "not a permutation of samples");
        // the shuffle is seeded: the same epoch replays identically
        let replay = decompose_epoch(&tr, &policy, epoch);
        assert_eq!(stream.minis, replay.minis);
    }
    // epoch order differs (seeded reshuffle per epoch)
    let e0 = decompose_epoch(&tr, &policy, 0);
    let e1 = decompose_epoch(&tr, &policy, 1);
    assert_ne!(e0.minis, e1.minis);

    // objective identity: stream objective over whole samples == R_lambda
    let layout = Layout::new(tr.feature_alphabet.len(), tr.label_alphabet.len(), false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let weights: Vec<f64> = (0..layout.total()).map(|_| rng.gen_range(-0.2..0.2)).collect();
    let lambda = 1.0;
    let a = stream_objective(&tr, &e0.minis, &layout, &weights, lambda).unwrap();
    let b = regularized_objective(&tr, &layout, &weights, lambda).unwrap();
    assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "objective {} vs {}", a, b);
}

fn c4_decomposition_distribution() {
    use structreg::decompose::decompose_sample;
    // interior segment statistics at n' = 5.5
    let policy = DecompositionPolicy::new(5.5, 99).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 200;
    let mut interior = Vec::new();
    let mut trials = 0;
    while interior.len() < 10_000 {
        let spans = decompose_sample(n, &policy, &mut rng);
        assert_eq!(spans.first().unwrap().0, 0);
        assert_eq!(spans.last().unwrap().1, n);
        for w in spans.windows(2) {
            assert_eq!(w[0].1, w[1].0, "spans must partition [0,n)");
        }
        for &(s, e) in &spans[1..spans.len().saturating_sub(1)] {
            interior.push(e - s);
        }
        trials += 1;
        assert!(trials < 10_000, "not enough interior segments");
    }
    assert!(interior.iter().all(|&l| l == 5 || l == 6), "interior length outside {{5,6}}");
    let mean = interior.iter().sum::<usize>() as f64 / interior.len() as f64;
    assert!((5.39..=5.61).contains(&mean), "interior mean {} outside [5.39, 5.61]", mean);

    // Figure 1: n=6, n'=2, no phase randomization -> fixed grid
    let mut grid_policy = DecompositionPolicy::new(2.0, 1).unwrap();
    grid_policy.phase_randomization = false;
    let spans = decompose_sample(6, &grid_policy, &mut rng);
    assert_eq!(spans, vec![(0, 2), (2, 4), (4, 6)]);
}

fn c5_bound_calculators() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for _ in 0..20 {
        let n = rng.gen_range(4.0..50.0f64).floor();
        let p = TheoryParams {
            d: rng.gen_range(1.0..1e4f64).floor(),
            tau: rng.gen_range(0.1..4.0),
            rho: rng.gen_range(0.1..4.0),
            v: rng.gen_range(0.1..2.0),
            n,
            m: rng.gen_range(10.0..1e4f64).floor(),
            lambda: rng.gen_range(0.01..10.0),
            alpha: rng.gen_range(1.0..n),
            gamma: rng.gen_range(0.5..2.0),
            delta: rng.gen_range(0.01..0.5),
        };
        // independently scripted arithmetic, straight from the formulas
        let base = p.d * p.tau * p.rho * p.rho * p.v * p.v * p.n * p.n
            / (p.m * p.lambda * p.alpha * p.alpha);
        let b = stability_bounds(&p).unwrap();
        assert!(rel_err(b.delta_fn, base) <= 1e-12);
        assert!(rel_err(b.delta_loss, p.tau * base) <= 1e-12);
        assert!(rel_err(b.delta_sample, p.n * p.tau * base) <= 1e-12);
        assert!(rel_err(b.delta_fn_bar, p.alpha * b.delta_fn) <= 1e-12);
        assert!(rel_err(b.delta_loss_bar, p.alpha * b.delta_loss) <= 1e-12);
        assert!(rel_err(b.delta_sample_bar, p.alpha * b.delta_sample) <= 1e-12);

        let risk = rng.gen_range(0.0..1.0);
        let g = generalization_bound(&p, risk).unwrap();
        let dd = p.d * p.tau * p.tau * p.rho * p.rho * p.v * p.v * p.n * p.n
            / (p.m * p.lambda * p.alpha);
        let overfit = 2.0 * dd
            + ((4.0 * p.m - 2.0) * dd + p.gamma) * ((1.0 / p.delta).ln() / (2.0 * p.m)).sqrt();
        assert!(rel_err(g.overfit_term, overfit) <= 1e-12);
        assert!(rel_err(g.bound, risk + overfit) <= 1e-12);

        let sp = SgdTheoryParams {
            c: rng.gen_range(0.1..2.0),
            q: rng.gen_range(1.0..100.0f64).floor(),
            kappa: rng.gen_range(0.5..10.0),
            epsilon: rng.gen_range(1e-4..0.1),
            beta: rng.gen_range(0.1..1.0),
            a0: rng.gen_range(1.0..100.0),
        };
        let s = sgd_iterations(&sp, p.n, p.alpha).unwrap();
        let eta = sp.c * sp.epsilon * sp.beta * p.alpha * p.alpha / (sp.q * sp.kappa * sp.kappa * p.n * p.n);
        if eta * sp.c < 1.0 {
            let t = sp.q * sp.kappa * sp.kappa * p.n * p.n * (sp.q * sp.a0 / sp.epsilon).ln()
                / (sp.epsilon * sp.beta * sp.c * sp.c * p.alpha * p.alpha);
            assert!(rel_err(s.eta, eta) <= 1e-12);
            assert!(rel_err(s.t_min, t.max(0.0)) <= 1e-12);
            // t_min * alpha^2 is constant in alpha
            let s1 = sgd_iterations(&sp, p.n, 1.0).unwrap();
            assert!(rel_err(s.t_min * p.alpha * p.alpha, s1.t_min) <= 1e-12);
        }
    }
}

fn c6_generalization_trend() {
    let grid = [2.5, 5.0, 5.5, 10.5];
    let mut wins = 0;
    let mut base_sum = 0.0;
    let mut grid_sums = [0.0f64; 4];
    for seed in 0..10u64 {
        let (tr, te) = benchmark_task(seed);
        let mut cfg = TrainConfig::crf(seed * 31 + 7);
        cfg.max_epochs = 50;
        let (m, _) = train(&tr, None, &cfg).unwrap();
        let base = evaluate_accuracy(&m, &te).unwrap();
        base_sum += base;
        let mut best = f64::NEG_INFINITY;
        for (gi, &mini) in grid.iter().enumerate() {
            let mut c = cfg.clone();
            c.mini_size = mini;
            let (m, _) = train(&tr, None, &c).unwrap();
            let acc = evaluate_accuracy(&m, &te).unwrap();
            grid_sums[gi] += acc;
            best = best.max(acc);
        }
        if best > base {
            wins += 1;
        }
    }
    assert!(
        grid_sums.iter().any(|&s| s >= base_sum),
        "no grid n' reaches the baseline mean accuracy"
    );
    assert!(wins >= 8, "best-n' beats baseline in only {}/10 seeds", wins);
}

fn c7_convergence_trend() {
    let mut epoch_wins = 0;
    let mut time_wins = 0;
    for seed in 0..10u64 {
        let (tr, _) = benchmark_task(seed);
        // Epochs to the 5% tolerance for each arm, then the wall-clock of
        // training for exactly that many epochs. Timing repeats are
        // interleaved across arms and reduced by min so transient machine
        // load cannot bias the comparison toward either arm.
        let mut cfgs = Vec::new();
        let mut e2ts = Vec::new();
        for mini in [0.0, 5.0] {
            let mut cfg = TrainConfig::crf(seed * 31 + 7);
            cfg.mini_size = mini;
            cfg.eta0 = 0.3;
            cfg.decay = 0.95;
            cfg.max_epochs = 150;
            let e2t = measure_epochs_to_tolerance(&tr, &cfg, 0.05)
                .unwrap()
                .expect("run never reached the 5% tolerance");
            cfg.max_epochs = e2t;
            cfg.convergence_threshold = 1e-12;
            cfgs.push(cfg);
            e2ts.push(e2t);
        }
        let mut walls = [f64::INFINITY; 2];
        for _rep in 0..3 {
            for (i, cfg) in cfgs.iter().enumerate() {
                let t0 = std::time::Instant::now();
                train(&tr, None, cfg).unwrap();
                walls[i] = walls[i].min(t0.elapsed().as_secs_f64());
            }
        }
        if e2ts[1] <= e2ts[0] {
            epoch_wins += 1;
        }
        if walls[1] < walls[0] {
            time_wins += 1;
        }
    }
    assert!(epoch_wins >= 8, "epochs-to-tolerance lower in only {}/10 seeds", epoch_wins);
    assert!(time_wins >= 8, "wall-clock lower in only {}/10 seeds", time_wins);
}

fn c8_stability_trend() {
    let mut wins = 0;
    for seed in 0..10u64 {
        let spec = SynthSpec {
            num_labels: 5,
            vocab_size: 100,
            mean_length: 20.0,
            num_samples: 150,
            transition_sharpness: 8.0,
            emission_sharpness: 8.0,
            noise_rate: 0.2,
            seed,
        };
        let mut all = generate_synthetic(&spec).unwrap();
        extract(&mut all, &TemplateSet::default(), false).unwrap();
        all.freeze();
        let mut tr = all.clone();
        tr.samples.truncate(100);
        let mut held = all;
        held.samples.drain(..100);

        let mut medians = Vec::new();
        for mini in [0.0, 4.0] {
            let mut cfg = TrainConfig::crf(seed * 31 + 7);
            cfg.mini_size = mini;
            cfg.max_epochs = 80;
            cfg.lambda = 0.3;
            let probe = probe_stability(&tr, &held, &cfg, 200, 20, seed).unwrap();
            medians.push(probe.median_of_means());
        }
        if medians[1] < medians[0] {
            wins += 1;
        }
    }
    assert!(wins >= 8, "stability median lower in only {}/10 seeds", wins);
}

fn c9_determinism() {
    let bin = env!("CARGO_BIN_EXE_structreg");
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);

    // synth twice -> identical corpora
    for out in ["a.conll", "b.conll"] {
        let st = Command::new(bin)
            .args(["synth", "--samples", "60", "--mean-length", "15", "--seed", "9"])
            .args(["--output", p(out).to_str().unwrap()])
            .status()
            .unwrap();
        assert!(st.success());
    }
    let corpus_a = std::fs::read(p("a.conll")).unwrap();
    assert_eq!(corpus_a, std::fs::read(p("b.conll")).unwrap(), "synth not deterministic");

    // train twice -> byte-identical model files and report TSVs
    for (model, rep) in [("m1.bin", "r1"), ("m2.bin", "r2")] {
        let st = Command::new(bin)
            .args(["train", "--input", p("a.conll").to_str().unwrap()])
            .args(["--output", p(model).to_str().unwrap()])
            .args(["--report", p(rep).to_str().unwrap()])
            .args(["--mini-size", "3.5", "--epochs", "8", "--seed", "4"])
            .status()
            .unwrap();
        assert!(st.success());
    }
    let m1 = std::fs::read(p("m1.bin")).unwrap();
    assert_eq!(m1, std::fs::read(p("m2.bin")).unwrap(), "model files differ");
    assert_eq!(
        std::fs::read(p("r1.tsv")).unwrap(),
        std::fs::read(p("r2.tsv")).unwrap(),
        "report TSVs differ"
    );

    // sweep twice -> byte-identical results TSV
    for out in ["s1.tsv", "s2.tsv"] {
        let st = Command::new(bin)
            .args(["sweep", "--train", p("a.conll").to_str().unwrap()])
            .args(["--test", p("a.conll").to_str().unwrap()])
            .args(["--grid", "0,3.5", "--seeds", "1,2", "--models", "crf"])
            .args(["--epochs", "5", "--output", p(out).to_str().unwrap()])
            .status()
            .unwrap();
        assert!(st.success());
    }
    assert_eq!(
        std::fs::read(p("s1.tsv")).unwrap(),
        std::fs::read(p("s2.tsv")).unwrap(),
        "sweep TSVs differ"
    );

    // stability twice -> byte-identical TSV
    for out in ["st1.tsv", "st2.tsv"] {
        let st = Command::new(bin)
            .args(["stability", "--mini-sizes", "0,4", "--seeds", "1", "--removals", "3"])
            .args(["--probe-points", "10", "--synth-samples", "20", "--epochs", "5"])
            .args(["--output", p(out).to_str().unwrap()])
            .status()
            .unwrap();
        assert!(st.success());
    }
    assert_eq!(
        std::fs::read(p("st1.tsv")).unwrap(),
        std::fs::read(p("st2.tsv")).unwrap(),
        "stability TSVs differ"
    );

    // model round-trip is bit-exact
    let model = Model::read(&mut std::io::Cursor::new(&m1)).unwrap();
    let mut back = Vec::new();
    model.write(&mut back).unwrap();
    assert_eq!(m1, back, "model round-trip not bit-exact");

    // missing input -> exit 2, no partial model file
    let out = Command::new(bin)
        .args(["train", "--input", p("missing.conll").to_str().unwrap()])
        .args(["--output", p("nope.bin").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!p("nope.bin").exists(), "partial model file left behind");
}

fn c10_perceptron() {
    let mut wins = 0;
    for seed in 0..10u64 {
        let (tr, te) = benchmark_task(seed);
        let mut cfg = TrainConfig::perceptron(seed * 31 + 7);
        cfg.max_epochs = 10;
        cfg.perceptron_average = true;
        let (avg_model, _) = train(&tr, None, &cfg).unwrap();
        cfg.perceptron_average = false;
        let (final_model, _) = train(&tr, None, &cfg).unwrap();
        let avg = evaluate_accuracy(&avg_model, &te).unwrap();
        let last = evaluate_accuracy(&final_model, &te).unwrap();
        if avg > last {
            wins += 1;
        }
    }
    assert!(wins >= 8, "averaging beats final weights in only {}/10 seeds", wins);
}
