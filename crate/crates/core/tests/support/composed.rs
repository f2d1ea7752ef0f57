use dvpo_core::env::{LenRange, TaskKind, TokenTask, Vocabulary};
use dvpo_core::gvm::{gvm_loss_node, GvmExample, TargetSpec};
use dvpo_core::models::{init_model, BackboneConfig, Model, Role};
use dvpo_core::rl::{clipped_objective, rollout};
use dvpo_core::seed;
use numkit::{finite_diff_gradient, max_relative_error, Graph, ParamSet, Var};
use rand::Rng;

fn tiny(vocab: Vocabulary) -> BackboneConfig {
    BackboneConfig {
        dim: 8,
        heads: 2,
        mlp_hidden: 12,
        max_seq_len: 16,
        ..BackboneConfig::new(vocab)
    }
}

fn jitter(m: &mut Model, s: u64) {
    let mut rng = seed::rng(s);
    let names: Vec<String> = m.params.names().cloned().collect();
    for n in names {
        for x in m.params.get_mut(&n).unwrap().data_mut() {
            *x += rng.random_range(-0.2..0.2);
        }
    }
}

fn check(model: &Model, build: impl Fn(&mut Graph, &Model) -> dvpo_core::Result<Var>) -> f64 {
    let mut g = Graph::new();
    let l = build(&mut g, model).unwrap();
    let analytic = g.backward(l).unwrap();
    let loss = |p: &ParamSet| -> numkit::Result<f64> {
        let mut m = model.clone();
        m.params = p.clone();
        let mut g = Graph::new();
        let l = build(&mut g, &m).map_err(|e| numkit::NumError::Invalid(e.to_string()))?;
        Ok(g.scalar(l))
    };
    let numeric = finite_diff_gradient(loss, &model.params, 1e-5).unwrap();
    max_relative_error(&analytic, &numeric)
}

/// Tape vs finite-difference error of the value-regression loss.
pub fn value_regression_error() -> f64 {
    let vocab = Vocabulary::with_payload(4);
    let mut m = init_model(&tiny(vocab), Role::Value, None).unwrap();
    jitter(&mut m, 1);
    let examples = [
        GvmExample {
            conditioning: vec![],
            prompt: vec![4, 5],
            response: vec![5, 6, 7, 1],
            token_rewards: vec![0.0, 0.0, 0.0, 0.8],
        },
        GvmExample {
            conditioning: vec![6],
            prompt: vec![7],
            response: vec![7, 1],
            token_rewards: vec![0.1, -0.4],
        },
    ];
    let spec = TargetSpec {
        gamma: 0.9,
        ..TargetSpec::default()
    };
    check(&m, |g, m| {
        let a = gvm_loss_node(g, m, &examples[0], &spec)?;
        let b = gvm_loss_node(g, m, &examples[1], &spec)?;
        Ok(g.add(a, b)?)
    })
}

/// Tape vs finite-difference error of the clipped policy loss with a KL term.
pub fn clipped_policy_error() -> f64 {
    let vocab = Vocabulary::with_payload(4);
    let task = TokenTask::new(TaskKind::Copy, vocab, LenRange::new(2, 3), 4);
    let mut pol = init_model(&tiny(vocab), Role::Policy, None).unwrap();
    let mut reference = pol.clone();
    jitter(&mut reference, 2);
    let mut batch = rollout(
        &pol,
        &reference,
        &task,
        &[vec![4, 5], vec![6, 7, 4]],
        2,
        1.0,
        3,
    )
    .unwrap();
    jitter(&mut pol, 4);
    let mut rng = seed::rng(5);
    for it in batch.items.iter_mut() {
        let n = it.episode.len();
        it.advantages = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        // keep ratios away from the clip boundaries
        for lp in it.episode.behavior_logprobs.iter_mut() {
            *lp += rng.random_range(-0.1..0.1);
        }
    }
    check(&pol, |g, m| {
        Ok(clipped_objective(g, m, &batch.items, 0.2, 0.05)?.0)
    })
}
