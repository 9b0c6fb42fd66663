use ndarray::{array, Array2};
use qcse::agents::{Actions, ActorCritic, AgentConfig, Algo, Batch, CqlVariant};
use qcse::approx::Activation;
use qcse::entropy::ConditionMode;
use qcse::envs::{Action, ActionSpace};
use qcse::rng::{stream, Stream};
use rand::Rng;

const STATE_DIM: usize = 3;

fn agent(algo: Algo, space: ActionSpace, tweak: impl FnOnce(&mut AgentConfig)) -> ActorCritic {
    let mut cfg = AgentConfig { algo, hidden: vec![8, 8], activation: Activation::Tanh, ..AgentConfig::default() };
    tweak(&mut cfg);
    ActorCritic::new(cfg, STATE_DIM, space, &mut stream(3, Stream::Init)).unwrap()
}

fn batch(space: ActionSpace, n: usize, seed: u64) -> Batch {
    let mut rng = stream(seed, Stream::Dataset);
    let states = Array2::from_shape_fn((n, STATE_DIM), |_| rng.random_range(-1.0..1.0));
    let next_states = Array2::from_shape_fn((n, STATE_DIM), |_| rng.random_range(-1.0..1.0));
    let actions = match space {
        ActionSpace::Discrete(k) => Actions::Discrete((0..n).map(|_| rng.random_range(0..k)).collect()),
        ActionSpace::Continuous(d) => Actions::Continuous(Array2::from_shape_fn((n, d), |_| rng.random_range(-0.9..0.9))),
    };
    Batch {
        states,
        actions,
        rewards: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        next_states,
        dones: (0..n).map(|i| i % 4 == 0).collect(),
        reference: Some((0..n).map(|_| rng.random_range(-0.5..0.5)).collect()),
    }
}

const SPACES: [ActionSpace; 2] = [ActionSpace::Discrete(4), ActionSpace::Continuous(2)];

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn check_critic_gradient(ac: &ActorCritic, b: &Batch) {
    let obj = ac.critic_objective(b, &mut stream(9, Stream::Sampling)).unwrap();
    let h = 1e-6;
    for i in 0..2 {
        let n = ac.critics.online[i].params().len();
        for p in (0..n).step_by(3) {
            let mut plus = ac.clone();
            plus.critics.online[i].params_mut()[p] += h;
            let mut minus = ac.clone();
            minus.critics.online[i].params_mut()[p] -= h;
            let lp = plus.critic_objective(b, &mut stream(9, Stream::Sampling)).unwrap().stats.loss;
            let lm = minus.critic_objective(b, &mut stream(9, Stream::Sampling)).unwrap().stats.loss;
            let fd = (lp - lm) / (2.0 * h);
            let err = rel_err(obj.grads[i][p], fd);
            assert!(err < 1e-4, "{:?} critic {i} param {p}: {} vs {fd}", ac.config.algo, obj.grads[i][p]);
        }
    }
}

#[test]
fn critic_gradients_match_finite_differences() {
    for space in SPACES {
        for (algo, variant) in [
            (Algo::Sac, CqlVariant::NextState),
            (Algo::Cql, CqlVariant::NextState),
            (Algo::Cql, CqlVariant::LogSumExp),
            (Algo::Calql, CqlVariant::NextState),
            (Algo::Awac, CqlVariant::NextState),
        ] {
            let ac = agent(algo, space, |c| {
                c.cql_variant = variant;
                c.cql_samples = 3;
            });
            check_critic_gradient(&ac, &batch(space, 6, 1));
        }
    }
}

#[test]
fn actor_gradients_match_finite_differences() {
    for space in SPACES {
        for algo in [Algo::Sac, Algo::Awac] {
            let mut ac = agent(algo, space, |_| {});
            if algo == Algo::Awac {
                // advantage weights carry no gradient; keep them constant so the
                // finite difference sees the same surrogate
                for net in ac.critics.online.iter_mut() {
                    net.params_mut().iter_mut().for_each(|p| *p = 0.0);
                }
            }
            let b = batch(space, 5, 2);
            let obj = ac.actor_objective(&b, &mut stream(4, Stream::Sampling)).unwrap();
            let h = 1e-6;
            for p in 0..ac.policy.params().len() {
                let mut plus = ac.clone();
                plus.policy.params_mut()[p] += h;
                let mut minus = ac.clone();
                minus.policy.params_mut()[p] -= h;
                let lp = plus.actor_objective(&b, &mut stream(4, Stream::Sampling)).unwrap().loss;
                let lm = minus.actor_objective(&b, &mut stream(4, Stream::Sampling)).unwrap().loss;
                let fd = (lp - lm) / (2.0 * h);
                assert!(rel_err(obj.grad[p], fd) < 1e-4, "{algo:?} {space:?} param {p}: {} vs {fd}", obj.grad[p]);
            }
        }
    }
}

#[test]
fn zero_discount_regresses_on_rewards() {
    for space in SPACES {
        let ac = agent(Algo::Sac, space, |c| c.gamma = 0.0);
        let b = batch(space, 7, 3);
        let obj = ac.critic_objective(&b, &mut stream(0, Stream::Sampling)).unwrap();
        let [q1, q2] = ac.critics.values_of(&ac.critics.online, b.states.view(), &b.actions).unwrap();
        let mse = |q: &[f64]| q.iter().zip(&b.rewards).map(|(x, r)| (x - r).powi(2)).sum::<f64>() / 7.0;
        assert!((obj.stats.loss - 0.5 * (mse(&q1) + mse(&q2))).abs() < 1e-12);
        assert_eq!(obj.targets, b.rewards);
    }
}

#[test]
fn terminal_transitions_do_not_bootstrap() {
    for space in SPACES {
        let ac = agent(Algo::Cql, space, |_| {});
        let mut b = batch(space, 8, 4);
        b.dones = vec![true; 8];
        let obj = ac.critic_objective(&b, &mut stream(0, Stream::Sampling)).unwrap();
        assert_eq!(obj.targets, b.rewards);
    }
}

#[test]
fn targets_use_the_minimum_of_the_target_pair() {
    // lifting the second target critic's output bias cannot change a
    // minimum that the first critic already attains
    for space in SPACES {
        let ac = agent(Algo::Sac, space, |_| {});
        let b = batch(space, 6, 5);
        let base = ac.critic_objective(&b, &mut stream(1, Stream::Sampling)).unwrap().targets;
        let mut lifted = ac.clone();
        lifted.critics.target[1] = lifted.critics.target[0].clone();
        let n = lifted.critics.target[1].params().len();
        let outputs = match space {
            ActionSpace::Discrete(k) => k,
            ActionSpace::Continuous(_) => 1,
        };
        for p in n - outputs..n {
            lifted.critics.target[1].params_mut()[p] += 100.0;
        }
        let mut single = ac.clone();
        single.critics.target[1] = single.critics.target[0].clone();
        let t_lifted = lifted.critic_objective(&b, &mut stream(1, Stream::Sampling)).unwrap().targets;
        let t_single = single.critic_objective(&b, &mut stream(1, Stream::Sampling)).unwrap().targets;
        assert_eq!(t_lifted, t_single);
        assert_ne!(base, t_single);
    }
}

#[test]
fn zero_weight_conservative_terms_reduce_to_sac() {
    for space in SPACES {
        let b = batch(space, 6, 6);
        let mut sac = agent(Algo::Sac, space, |_| {});
        let mut cql = agent(Algo::Cql, space, |c| c.conservative_weight = 0.0);
        let mut calql = agent(Algo::Calql, space, |c| c.conservative_weight = 0.0);
        let mut rngs = [stream(2, Stream::Sampling), stream(2, Stream::Sampling), stream(2, Stream::Sampling)];
        for _ in 0..3 {
            let a = sac.update(&b, &mut rngs[0]).unwrap();
            let c = cql.update(&b, &mut rngs[1]).unwrap();
            let d = calql.update(&b, &mut rngs[2]).unwrap();
            assert_eq!(a, c);
            assert_eq!(a, d);
        }
        assert_eq!(sac.critics.online, cql.critics.online);
        assert_eq!(sac.policy, calql.policy);
    }
}

#[test]
fn duplicated_batch_has_the_same_loss() {
    let space = ActionSpace::Discrete(4);
    let ac = agent(Algo::Cql, space, |_| {});
    let one = batch(space, 1, 7);
    let mut two = one.clone();
    two.states = ndarray::concatenate![ndarray::Axis(0), one.states, one.states];
    two.next_states = ndarray::concatenate![ndarray::Axis(0), one.next_states, one.next_states];
    let Actions::Discrete(a) = &one.actions else { unreachable!() };
    two.actions = Actions::Discrete(vec![a[0], a[0]]);
    two.rewards = vec![one.rewards[0]; 2];
    two.dones = vec![one.dones[0]; 2];
    two.reference = Some(vec![one.reference.as_ref().unwrap()[0]; 2]);
    let l1 = ac.critic_objective(&one, &mut stream(0, Stream::Sampling)).unwrap().stats.loss;
    let l2 = ac.critic_objective(&two, &mut stream(0, Stream::Sampling)).unwrap().stats.loss;
    assert!((l1 - l2).abs() < 1e-12);
}

/// Linear discrete critic `Q(s, .) = s W + b` with `|S| = 1` feature.
fn linear_agent(algo: Algo, w: [f64; 2], bias: [f64; 2]) -> ActorCritic {
    let mut ac = ActorCritic::new(
        AgentConfig { algo, hidden: vec![], gamma: 0.5, ..AgentConfig::default() },
        1,
        ActionSpace::Discrete(2),
        &mut stream(0, Stream::Init),
    )
    .unwrap();
    for net in ac.critics.online.iter_mut().chain(ac.critics.target.iter_mut()) {
        net.params_mut().copy_from_slice(&[w[0], w[1], bias[0], bias[1]]);
    }
    // uniform policy
    ac.policy.params_mut().iter_mut().for_each(|p| *p = 0.0);
    ac
}

fn one_transition(s: f64, a: usize, r: f64, s2: f64, reference: f64) -> Batch {
    Batch {
        states: array![[s]],
        actions: Actions::Discrete(vec![a]),
        rewards: vec![r],
        next_states: array![[s2]],
        dones: vec![false],
        reference: Some(vec![reference]),
    }
}

#[test]
fn hand_derived_losses_on_a_linear_critic() {
    // Q(s, 0) = 2s, Q(s, 1) = -s + 1; uniform policy; alpha 0.2; gamma 0.5
    let b = one_transition(1.0, 0, 0.5, 2.0, 0.25);
    let ln2 = 2f64.ln();
    let q_sa = 2.0;
    let (q0n, q1n) = (4.0, -1.0);
    let v_next = 0.5 * (q0n + q1n) + 0.2 * ln2;
    let y = 0.5 + 0.5 * v_next;
    let bellman = (q_sa - y) * (q_sa - y);

    let sac = linear_agent(Algo::Sac, [2.0, -1.0], [0.0, 1.0]);
    let obj = sac.critic_objective(&b, &mut stream(0, Stream::Sampling)).unwrap();
    assert!((obj.targets[0] - y).abs() < 1e-12);
    assert!((obj.stats.loss - bellman).abs() < 1e-12);
    // d/dW[0][0] of 1/2 (Q - y)^2 per critic = (Q - y) * s
    assert!((obj.grads[0][0] - (q_sa - y) * 1.0).abs() < 1e-12);
    assert_eq!(obj.grads[0][1], 0.0);

    // next-state regulariser: -Q(s,a) + E_pi Q(s', .)
    let cql = linear_agent(Algo::Cql, [2.0, -1.0], [0.0, 1.0]);
    let obj = cql.critic_objective(&b, &mut stream(0, Stream::Sampling)).unwrap();
    let reg = -q_sa + 0.5 * (q0n + q1n);
    assert!((obj.stats.regularizer - reg).abs() < 1e-12);
    assert!((obj.stats.loss - bellman - reg).abs() < 1e-12);

    // calibrated: E_pi max(Q(s, .), V) - Q(s, a) with V between Q(s,1)=0 and Q(s,0)=2
    let calql = linear_agent(Algo::Calql, [2.0, -1.0], [0.0, 1.0]);
    let b = one_transition(1.0, 0, 0.5, 2.0, 1.0);
    let obj = calql.critic_objective(&b, &mut stream(0, Stream::Sampling)).unwrap();
    let reg = 0.5 * (2.0f64.max(1.0) + 0.0f64.max(1.0)) - 2.0;
    assert!((obj.stats.regularizer - reg).abs() < 1e-12);
}

#[test]
fn calibration_saturates_on_both_sides() {
    let high = linear_agent(Algo::Calql, [0.0, 0.0], [10.0, 12.0]);
    let b = one_transition(1.0, 1, 0.0, 1.0, -50.0);
    let reg = high.critic_objective(&b, &mut stream(0, Stream::Sampling)).unwrap().stats.regularizer;
    assert!((reg - (11.0 - 12.0)).abs() < 1e-12);

    let low = linear_agent(Algo::Calql, [0.0, 0.0], [1.0, -1.0]);
    let b = one_transition(1.0, 0, 0.0, 1.0, 40.0);
    let lowcal = low.critic_objective(&b, &mut stream(0, Stream::Sampling)).unwrap();
    assert!((lowcal.stats.regularizer - (40.0 - 1.0)).abs() < 1e-12);
    // the max's inactive branch passes no gradient: the untaken action's bias
    // only sees the Bellman term, which is zero for action 1
    let sac = linear_agent(Algo::Sac, [0.0, 0.0], [1.0, -1.0]);
    let plain = sac.critic_objective(&b, &mut stream(0, Stream::Sampling)).unwrap();
    assert_eq!(lowcal.grads[0][3], plain.grads[0][3]);
}

#[test]
fn missing_reference_values_are_an_error() {
    let ac = agent(Algo::Calql, ActionSpace::Discrete(4), |_| {});
    let mut b = batch(ActionSpace::Discrete(4), 4, 1);
    b.reference = None;
    assert!(ac.critic_objective(&b, &mut stream(0, Stream::Sampling)).is_err());
}

#[test]
fn awac_with_flat_critics_is_behaviour_cloning() {
    for space in SPACES {
        let mut ac = agent(Algo::Awac, space, |_| {});
        for net in ac.critics.online.iter_mut() {
            net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        }
        let b = batch(space, 6, 8);
        let obj = ac.actor_objective(&b, &mut stream(0, Stream::Sampling)).unwrap();
        let bc = match &b.actions {
            Actions::Discrete(a) => {
                let lp = ac.action_log_probs(b.states.view()).unwrap();
                -a.iter().enumerate().map(|(i, &ai)| lp[[i, ai]]).sum::<f64>() / 6.0
            }
            Actions::Continuous(a) => {
                let out = ac.policy.forward(b.states.view()).unwrap();
                let (lp, _) = qcse::agents::gaussian_log_prob_of(out.view(), a.view());
                -lp.iter().sum::<f64>() / 6.0
            }
        };
        assert!((obj.loss - bc).abs() < 1e-12);
    }
}

#[test]
fn near_deterministic_policy_at_the_argmax_is_stationary() {
    let mut ac = linear_agent(Algo::Sac, [0.0, 0.0], [1.0, 0.0]);
    ac.config.alpha = 1e-12;
    let n = ac.policy.params().len();
    ac.policy.params_mut()[n - 2] = 40.0;
    let b = one_transition(0.3, 0, 0.0, 0.3, 0.0);
    let obj = ac.actor_objective(&b, &mut stream(0, Stream::Sampling)).unwrap();
    assert!(obj.grad.iter().all(|g| g.abs() < 1e-15));
}

#[test]
fn two_action_softmax_gradient_closed_form() {
    // d/dz0 of sum_a pi_a (alpha ln pi_a - Q_a) = pi0 pi1 [(alpha ln pi0 - Q0) - (alpha ln pi1 - Q1)]
    let mut ac = linear_agent(Algo::Sac, [0.0, 0.0], [0.7, -0.4]);
    let n = ac.policy.params().len();
    ac.policy.params_mut()[n - 2] = 0.3;
    ac.policy.params_mut()[n - 1] = -0.1;
    let b = one_transition(0.0, 0, 0.0, 0.0, 0.0);
    let obj = ac.actor_objective(&b, &mut stream(0, Stream::Sampling)).unwrap();
    let (z0, z1) = (0.3f64, -0.1f64);
    let p0 = z0.exp() / (z0.exp() + z1.exp());
    let p1 = 1.0 - p0;
    let want = p0 * p1 * ((0.2 * p0.ln() - 0.7) - (0.2 * p1.ln() + 0.4));
    assert!((obj.grad[n - 2] - want).abs() < 1e-12);
    assert!((obj.grad[n - 1] + want).abs() < 1e-12);
}

#[test]
fn action_selection() {
    let cont = agent(Algo::Sac, ActionSpace::Continuous(2), |_| {});
    let mut rng = stream(0, Stream::Sampling);
    let s = [0.2, -0.3, 0.9];
    assert_eq!(cont.select_action(&s, false, &mut rng).unwrap(), cont.select_action(&s, false, &mut rng).unwrap());
    for _ in 0..1000 {
        let Action::Continuous(a) = cont.select_action(&s, true, &mut rng).unwrap() else { unreachable!() };
        assert!(a.iter().all(|x| x.abs() <= 1.0));
    }
    assert!(cont.select_action(&[0.0], true, &mut rng).is_err());

    let disc = agent(Algo::Sac, ActionSpace::Discrete(4), |_| {});
    let probs: Vec<f64> =
        disc.action_log_probs(array![[0.2, -0.3, 0.9]].view()).unwrap().row(0).iter().map(|l| l.exp()).collect();
    let draws = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        let Action::Discrete(a) = disc.select_action(&s, true, &mut rng).unwrap() else { unreachable!() };
        counts[a] += 1;
    }
    for (c, p) in counts.iter().zip(&probs) {
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((*c as f64 / draws as f64 - p).abs() < 3.0 * sigma);
    }
}

#[test]
fn updates_are_deterministic_and_leave_targets_to_the_ema() {
    for space in SPACES {
        let b = batch(space, 16, 10);
        let mut a = agent(Algo::Cql, space, |c| c.ema_rate = 1.0);
        let mut c = a.clone();
        let target_before = a.critics.target.clone();
        for _ in 0..5 {
            let sa = a.update(&b, &mut stream(5, Stream::Sampling)).unwrap();
            let sc = c.update(&b, &mut stream(5, Stream::Sampling)).unwrap();
            assert_eq!(sa, sc);
        }
        assert_eq!(a.critics.target, target_before);
        assert_ne!(a.critics.online, target_before);
        assert_eq!(a.policy, c.policy);
    }
}

#[test]
fn autotuned_temperature_moves_toward_the_target_entropy() {
    let space = ActionSpace::Discrete(4);
    let mut ac = agent(Algo::Sac, space, |c| {
        c.autotune_alpha = true;
        c.target_entropy = Some(0.0);
        c.alpha_lr = 1e-2;
    });
    let b = batch(space, 16, 11);
    let start = ac.alpha();
    for _ in 0..20 {
        ac.update(&b, &mut stream(0, Stream::Sampling)).unwrap();
    }
    // target entropy 0 is below the near-uniform policy's, so alpha shrinks
    assert!(ac.alpha() < start);
}

#[test]
fn condition_values_by_mode() {
    for space in SPACES {
        let mut ac = agent(Algo::Awac, space, |_| {});
        let b = batch(space, 10, 12);
        let mut rng = stream(0, Stream::Intrinsic);
        let q = ac.condition_values(b.states.view(), &b.actions, ConditionMode::Q, false, &mut rng).unwrap();
        assert_eq!(q, ac.critics.q_hat(b.states.view(), &b.actions).unwrap());
        let v = ac.condition_values(b.states.view(), &b.actions, ConditionMode::V, false, &mut rng).unwrap();
        assert_eq!(v.len(), 10);
        assert!(ac.condition_values(b.states.view(), &b.actions, ConditionMode::None, false, &mut rng).unwrap().is_empty());
        assert!(ac.condition_values(b.states.view(), &b.actions, ConditionMode::Q, true, &mut rng).is_err());
        ac.enable_scratch_critics(&mut stream(1, Stream::Init)).unwrap();
        let before = ac.condition_values(b.states.view(), &b.actions, ConditionMode::Q, true, &mut rng).unwrap();
        ac.update_scratch(&b, &mut rng).unwrap();
        let after = ac.condition_values(b.states.view(), &b.actions, ConditionMode::Q, true, &mut rng).unwrap();
        assert_ne!(before, after);
    }
}

#[test]
fn checkpoint_round_trip() {
    let space = ActionSpace::Continuous(2);
    let mut ac = agent(Algo::Calql, space, |_| {});
    let b = batch(space, 8, 13);
    ac.update(&b, &mut stream(0, Stream::Sampling)).unwrap();
    let mut buf = Vec::new();
    ac.save(&mut buf).unwrap();
    let mut back = ActorCritic::load(&mut buf.as_slice()).unwrap();
    assert_eq!(back.policy, ac.policy);
    assert_eq!(back.critics.online, ac.critics.online);
    let x = ac.update(&b, &mut stream(1, Stream::Sampling)).unwrap();
    let y = back.update(&b, &mut stream(1, Stream::Sampling)).unwrap();
    assert_eq!(x, y);
    assert!(ActorCritic::load(&mut &buf[..buf.len() / 2]).is_err());
}
