use ndarray::Array2;
use qcse::rng::{stream, Stream};
use qcse::tabular::{
    contraction_ratio, marginal_state_distribution, run_verification, soft_policy_evaluation,
    soft_policy_iteration, soft_q_exact, theorem2_report, Fault, TabularMdp, TabularPolicy, Theorem2Config,
    VerifyConfig, EVAL_TOL,
};
use rand::Rng;

#[test]
fn iterative_evaluation_agrees_with_linear_solve() {
    let mut rng = stream(1, Stream::Sampling);
    for _ in 0..30 {
        let (ns, na) = (rng.random_range(1..8), rng.random_range(1..4));
        let mdp = TabularMdp::random(ns, na, 0.9, &mut rng).unwrap();
        let pi = TabularPolicy::random(ns, na, &mut rng);
        let r_int = Array2::from_shape_fn((ns, na), |_| rng.random_range(0.0..1.0));
        let it = soft_policy_evaluation(&mdp, &pi, &r_int, EVAL_TOL).unwrap();
        let exact = soft_q_exact(&mdp, &pi, &r_int).unwrap();
        let gap = it.q.iter().zip(exact.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-8, "{gap}");
        // iteration count is bounded by the contraction rate
        let bound = (EVAL_TOL.ln() / 0.9f64.ln()) as usize + 400;
        assert!(it.sweeps <= bound);
    }
}

#[test]
fn contraction_on_a_four_by_three_mdp() {
    let mut rng = stream(4, Stream::Sampling);
    let mdp = TabularMdp::random(4, 3, 0.8, &mut rng).unwrap();
    let pi = TabularPolicy::random(4, 3, &mut rng);
    let ratio = contraction_ratio(&mdp, &pi, &Array2::zeros((4, 3)), 1e-8).unwrap();
    assert!(ratio <= 0.8 + 1e-6, "{ratio}");
}

#[test]
fn soft_iteration_is_monotone_and_optimal() {
    let mut rng = stream(7, Stream::Sampling);
    for _ in 0..10 {
        let (ns, na) = (rng.random_range(2..8), rng.random_range(2..4));
        let mdp = TabularMdp::random(ns, na, 0.9, &mut rng).unwrap();
        let r_int = Array2::zeros((ns, na));
        let out = soft_policy_iteration(&mdp, &r_int, EVAL_TOL).unwrap();
        assert!(out.min_improvement() >= -1e-9);
        for _ in 0..20 {
            let q = soft_q_exact(&mdp, &TabularPolicy::random(ns, na, &mut rng), &r_int).unwrap();
            assert!(q.iter().zip(out.q().iter()).all(|(a, b)| *a <= b + 1e-6));
        }
    }
}

#[test]
fn marginal_matches_rollouts() {
    let mut rng = stream(5, Stream::Sampling);
    let mdp = TabularMdp::random(5, 2, 0.9, &mut rng).unwrap();
    let pi = TabularPolicy::random(5, 2, &mut rng);
    let horizon = 10;
    let exact = marginal_state_distribution(&mdp, &pi, horizon).unwrap();
    let draw = |w: &mut dyn Iterator<Item = f64>, rng: &mut rand_chacha::ChaCha8Rng| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, p) in w.enumerate() {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
        last
    };
    let episodes = 1_000_000;
    let mut counts = [0usize; 5];
    for _ in 0..episodes {
        let mut s = draw(&mut mdp.p0.iter().copied(), &mut rng);
        for t in 0..horizon {
            counts[s] += 1;
            if t + 1 < horizon {
                let a = draw(&mut pi.probs.row(s).iter().copied(), &mut rng);
                s = draw(&mut mdp.p.slice(ndarray::s![s, a, ..]).iter().copied(), &mut rng);
            }
        }
    }
    for (c, p) in counts.iter().zip(&exact) {
        let freq = *c as f64 / (episodes * horizon) as f64;
        // visits within one episode are correlated; bound the variance by horizon
        let sigma = (p * (1.0 - p) / episodes as f64).sqrt();
        assert!((freq - p).abs() < 3.0 * sigma + 1e-12, "{freq} vs {p}");
    }
}

#[test]
fn theorem2_exact_cases() {
    let report = theorem2_report(&Theorem2Config { pairs: 50, ..Theorem2Config::default() }).unwrap();
    assert!(report.exact_cases_hold());
    assert!(report.violation_fraction >= 0.0 && report.violation_fraction <= 1.0);
}

fn quick() -> VerifyConfig {
    VerifyConfig {
        mdps: 8,
        policies_per_mdp: 10,
        simplex_divisions: 20,
        theorem2: Theorem2Config { pairs: 20, ..Theorem2Config::default() },
        smm_seeds: 3,
        ..VerifyConfig::default()
    }
}

#[test]
fn verification_passes_and_catches_a_broken_improvement() {
    let good = run_verification(&quick()).unwrap();
    assert!(good.passed, "{:?}", good.failures);
    assert!(good.bound_unrestricted.holds < good.bound_unrestricted.pairs);
    let bad = run_verification(&VerifyConfig { fault: Some(Fault::ReversedImprovement), ..quick() }).unwrap();
    assert!(!bad.passed);
    assert!(!bad.optimality.monotone || !bad.optimality.dominant);
}
