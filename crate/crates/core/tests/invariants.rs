use dvpo_core::dataset::{
    assign_returns_from_preference, assign_returns_from_scores, binarize, build_pairs, split,
    ScoredResponse, Split,
};
use dvpo_core::env::{
    bellman_residual, value_iteration, Backup, Episode, LenRange, TabularMdp, TabularPolicy,
    TaskKind, Token, TokenTask, Vocabulary,
};
use dvpo_core::eval::{
    equivalence_gap, judge_win_rate_with, policy_gradient, reward_to_value, value_to_reward,
};
use dvpo_core::gvm::mc_targets;
use dvpo_core::models::{init_model, BackboneConfig, Model, Role};
use dvpo_core::rl::{account_step, rollout, Algorithm, RlConfig};
use dvpo_core::seed;
use proptest::prelude::*;
use rand::Rng;
use std::collections::{HashMap, HashSet};

fn mdp_from(s: u64) -> (TabularMdp, Vec<f64>) {
    let mut rng = seed::rng(s);
    let widths: Vec<usize> = (0..rng.random_range(1..4))
        .map(|_| rng.random_range(1..4))
        .collect();
    let gamma = rng.random_range(0.3..=1.0);
    let mdp = TabularMdp::layered(&widths, rng.random_range(1..4), gamma, &mut rng).unwrap();
    let logits = (0..mdp.n_states * mdp.n_actions)
        .map(|_| rng.random_range(-3.0..3.0))
        .collect();
    (mdp, logits)
}

fn small_policy() -> (TokenTask, Model) {
    let vocab = Vocabulary::with_payload(4);
    let task = TokenTask::new(TaskKind::Copy, vocab, LenRange::new(2, 3), 5);
    let cfg = BackboneConfig {
        dim: 16,
        layers: 1,
        mlp_hidden: 16,
        ..BackboneConfig::new(vocab)
    };
    (task, init_model(&cfg, Role::Policy, None).unwrap())
}

fn payload(n: usize, s: u64) -> Vec<Token> {
    let p = Vocabulary::with_payload(4).payload_tokens();
    let mut rng = seed::rng(s);
    (0..n).map(|_| p[rng.random_range(0..p.len())]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn terminal_returns_are_discounted_reward(len in 1usize..12, gamma in 0.0f64..=1.0, r in -1.0f64..=1.0) {
        let ep = Episode::terminal(payload(1, 0), payload(len, 1), vec![0.0; len], r).unwrap();
        for (t, g) in ep.returns_to_go(gamma).iter().enumerate() {
            prop_assert!((g - gamma.powi((len - 1 - t) as i32) * r).abs() <= 1e-12);
        }
    }

    #[test]
    fn value_iteration_satisfies_bellman(s in any::<u64>()) {
        let (mdp, logits) = mdp_from(s);
        let pi = TabularPolicy::from_logits(mdp.n_states, mdp.n_actions, &logits).unwrap();
        let q = value_iteration(&mdp, Backup::Policy(&pi), 1e-12).unwrap();
        prop_assert!(bellman_residual(&mdp, &mdp.reward, &q, Backup::Policy(&pi)) <= 1e-9);
        let q = value_iteration(&mdp, Backup::Optimal, 1e-12).unwrap();
        prop_assert!(bellman_residual(&mdp, &mdp.reward, &q, Backup::Optimal) <= 1e-9);
    }

    #[test]
    fn ground_truth_reward_is_pure(ps in any::<u64>(), rs in any::<u64>(), len in 1usize..6) {
        let task = TokenTask::new(TaskKind::Copy, Vocabulary::with_payload(4), LenRange::new(2, 4), 6);
        let p = task.sample_prompt(ps);
        let y = payload(len, rs);
        prop_assert_eq!(task.ground_truth_reward(&p, &y).unwrap(), task.ground_truth_reward(&p, &y).unwrap());
    }

    #[test]
    fn return_schemes_agree_on_order(scores in proptest::collection::vec(-1.0f64..=1.0, 2..6), s in any::<u64>()) {
        let prompt = payload(3, s);
        let mut recs: Vec<ScoredResponse> = scores
            .iter()
            .enumerate()
            .map(|(i, sc)| ScoredResponse::new(prompt.clone(), payload(i + 1, i as u64), *sc, "p"))
            .collect();
        assign_returns_from_scores(&mut recs).unwrap();
        let pref = assign_returns_from_preference(&binarize(&recs)).unwrap();
        let by_resp: HashMap<_, _> = recs.iter().map(|r| (r.response.clone(), r.return_label.unwrap())).collect();
        for a in &pref {
            for b in &pref {
                if a.return_label > b.return_label {
                    prop_assert!(by_resp[&a.response] > by_resp[&b.response]);
                }
            }
        }
        for p in build_pairs(&recs) {
            prop_assert!(by_resp[&p.chosen] > by_resp[&p.rejected]);
        }
    }

    #[test]
    fn splits_are_prompt_disjoint(n in 3usize..30, s in any::<u64>()) {
        let mut recs: Vec<ScoredResponse> = (0..n)
            .flat_map(|i| (0..3).map(move |j| ScoredResponse::new(payload(2, i as u64 % 7), payload(2, j), 0.0, "p")))
            .collect();
        split(&mut recs, &[0.6, 0.2, 0.2], s).unwrap();
        let mut seen: HashMap<Vec<Token>, Split> = HashMap::new();
        for r in &recs {
            let sp = *seen.entry(r.prompt.clone()).or_insert(r.split);
            prop_assert_eq!(sp, r.split);
        }
    }

    #[test]
    fn mc_targets_are_flat_without_discount(len in 1usize..10, r in -1.0f64..=1.0) {
        let mut rew = vec![0.0; len];
        rew[len - 1] = r;
        prop_assert!(mc_targets(&rew, 1.0).iter().all(|t| *t == r));
    }

    #[test]
    fn bellman_inversion_round_trips(s in any::<u64>()) {
        let (mdp, logits) = mdp_from(s);
        let pi = TabularPolicy::from_logits(mdp.n_states, mdp.n_actions, &logits).unwrap();
        let q = reward_to_value(&mdp.reward, &mdp, &pi, 1e-13).unwrap();
        let r = value_to_reward(&q, &mdp, &pi).unwrap();
        for st in (0..mdp.n_states).filter(|st| !mdp.terminal[*st]) {
            for a in 0..mdp.n_actions {
                let i = mdp.idx(st, a);
                prop_assert!((r[i] - mdp.reward[i]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn baselines_leave_gradient_unchanged(s in any::<u64>(), b in proptest::collection::vec(-5.0f64..5.0, 16)) {
        let (mdp, logits) = mdp_from(s);
        let q = reward_to_value(&mdp.reward, &mdp, &TabularPolicy::from_logits(mdp.n_states, mdp.n_actions, &logits).unwrap(), 1e-13).unwrap();
        let base: Vec<f64> = (0..mdp.n_states).map(|i| b[i % b.len()]).collect();
        let g0 = policy_gradient(&mdp, &logits, &q.values, &vec![0.0; mdp.n_states]).unwrap();
        let gb = policy_gradient(&mdp, &logits, &q.values, &base).unwrap();
        for (x, y) in g0.iter().zip(&gb) {
            prop_assert!((x - y).abs() <= 1e-8);
        }
    }

    #[test]
    fn noise_free_gradients_coincide(s in any::<u64>()) {
        let (mdp, logits) = mdp_from(s);
        prop_assert!(equivalence_gap(&mdp, &logits, 0.0, 0.0, s).unwrap().gap <= 1e-9);
    }

    #[test]
    fn win_rate_is_antisymmetric(sa in any::<u64>(), sb in any::<u64>(), n in 1usize..40, s in any::<u64>()) {
        let task = TokenTask::new(TaskKind::Copy, Vocabulary::with_payload(4), LenRange::new(2, 3), 5);
        let gen = |k: u64| move |p: &[Token]| -> dvpo_core::Result<Vec<Token>> {
            let h = p.iter().fold(k, |acc, t| seed::derive(acc, &[*t as u64]));
            Ok(payload(1 + (h % 4) as usize, h))
        };
        let ab = judge_win_rate_with(gen(sa), gen(sb), &task, n, s).unwrap();
        let ba = judge_win_rate_with(gen(sb), gen(sa), &task, n, s).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab.win_rate));
        prop_assert!((ab.win_rate + ba.win_rate - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn group_generation_scales_with_n(n in 2usize..12) {
        let d = account_step(&RlConfig::new(Algorithm::Dvpo)).unwrap();
        let g = account_step(&RlConfig { group_size: n, ..RlConfig::new(Algorithm::Grpo) }).unwrap();
        prop_assert_eq!(g.generation_multiplier, n * d.generation_multiplier);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn policy_is_causal_and_normalized(s in any::<u64>(), len in 2usize..6, cut in 0usize..5) {
        let (_, pol) = small_policy();
        let prompt = payload(3, s);
        let y = payload(len, s ^ 1);
        let cut = cut % (len - 1);
        let mut edited = y.clone();
        let pay = Vocabulary::with_payload(4).payload_tokens();
        for t in edited.iter_mut().skip(cut + 1) {
            *t = if *t == pay[0] { pay[1] } else { pay[0] };
        }
        let a = pol.policy_log_probs(&[], &prompt, &y).unwrap();
        let b = pol.policy_log_probs(&[], &prompt, &edited).unwrap();
        prop_assert!((0..=cut).all(|t| a[t] == b[t]));
        for t in 0..len {
            let row = pol.next_token_log_probs(&[], &prompt, &y[..t]).unwrap();
            prop_assert!((row.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn rollout_ratios_start_at_one(s in any::<u64>()) {
        let (task, pol) = small_policy();
        let prompts: Vec<_> = (0..3).map(|i| task.sample_prompt(s.wrapping_add(i))).collect();
        let batch = rollout(&pol, &pol, &task, &prompts, 2, 1.0, s).unwrap();
        let mut seen = HashSet::new();
        for it in &batch.items {
            let e = &it.episode;
            let lp = pol.policy_log_probs(&[], &e.prompt, &e.response).unwrap();
            for (a, b) in lp.iter().zip(&e.behavior_logprobs) {
                prop_assert!(((a - b).exp() - 1.0).abs() <= 1e-9);
            }
            seen.insert(e.response.clone());
        }
        prop_assert!(!seen.is_empty());
    }
}
