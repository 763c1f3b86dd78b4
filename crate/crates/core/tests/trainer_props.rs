use std::sync::Arc;

use dqn_portfolio::environment::{Environment, EpisodeConfig};
use dqn_portfolio::qnet::{NetworkShape, QNetwork};
use dqn_portfolio::synthetic;
use dqn_portfolio::trainer::{
    build_targets, Episode, EpisodeCatalog, ExperienceList, ReplayMemory, Trainer, TrainerConfig,
};
use proptest::prelude::*;

fn shape(assets: usize) -> NetworkShape {
    NetworkShape {
        assets,
        window: 5,
        encoder_hidden: 6,
        latent: 3,
        regressor_hidden: vec![8],
    }
}

fn env(assets: usize, seed: u64) -> Environment {
    let market = Arc::new(synthetic::random_walk_market(assets, 60, seed).unwrap());
    Environment::new(
        market,
        EpisodeConfig {
            assets,
            window: 5,
            delta: 20_000.0,
            cost_sell: 0.0025,
            cost_buy: 0.0025,
            initial_value: 1_000_000.0,
            initial_weights: EpisodeConfig::equal_weights(assets),
        },
    )
    .unwrap()
}

fn trainer(assets: usize, seed: u64, batch: usize, capacity: usize) -> Trainer {
    let cfg = TrainerConfig {
        epochs: 3,
        batch_size: batch,
        learning_rate: 1e-3,
        memory_capacity: capacity,
        seed,
        ..TrainerConfig::default()
    };
    Trainer::new(env(assets, seed), cfg, QNetwork::new(&shape(assets), seed)).unwrap()
}

fn episode(first: usize, len: usize) -> Episode {
    Episode {
        label: 2000,
        first,
        last: first + len - 1,
    }
}

#[test]
fn one_epoch_stores_one_list_per_period() {
    let mut t = trainer(2, 4, 100, 100);
    let log = t.run_epoch(0, &episode(10, 5), 0.5).unwrap();
    assert_eq!(t.replay().len(), 5);
    assert_eq!(log.updates, 0);
    let periods: Vec<usize> = t.replay().iter().map(|l| l.state.period).collect();
    assert_eq!(periods, vec![10, 11, 12, 13, 14]);
    for (k, list) in t.replay().iter().enumerate() {
        assert!(list.entries.iter().all(|e| e.terminal == (k == 4)));
    }
}

#[test]
fn stored_trajectory_follows_a_stored_outcome() {
    let mut t = trainer(2, 9, 4, 100);
    t.run_epoch(0, &episode(8, 12), 0.5).unwrap();
    let lists: Vec<&ExperienceList> = t.replay().iter().collect();
    for pair in lists.windows(2) {
        let next = &pair[1].state;
        assert!(pair[0]
            .entries
            .iter()
            .any(|e| e.next_state.value == next.value && e.next_state.weights == next.weights));
    }
}

#[test]
fn fixed_seed_reproduces_the_run() {
    let run = |seed| {
        let catalog = EpisodeCatalog {
            episodes: vec![episode(6, 10), episode(20, 10), episode(34, 10)],
            test_year: 2003,
        };
        let out = trainer(2, seed, 4, 50).train(&catalog, |_, _| {}).unwrap();
        (out.log, out.network.flat_params())
    };
    let (a_log, a_params) = run(5);
    let (b_log, b_params) = run(5);
    assert_eq!(a_log, b_log);
    assert_eq!(a_params, b_params);
    let (c_log, _) = run(6);
    assert_ne!(a_log, c_log);
}

#[test]
fn masked_outputs_do_not_move_the_loss() {
    let mut t = trainer(2, 2, 100, 100);
    t.run_epoch(0, &episode(10, 3), 1.0).unwrap();
    let list = t.replay().get(0).unwrap().clone();
    let net = t.network();
    let q = net.forward(&list.state).unwrap();
    let (z, active) = build_targets(&list, t.target(), 0.9, &q, t.environment().config()).unwrap();
    assert_eq!(active.iter().filter(|a| **a).count(), list.entries.len());
    for (j, on) in active.iter().enumerate() {
        if !on {
            assert_eq!(z[j], q[j]);
        }
    }
    let (loss, grads) = net
        .backward(&list.state.features, &list.state.weights, &z, &active)
        .unwrap();
    let expected: f64 = (0..q.len())
        .filter(|j| active[*j])
        .map(|j| (z[j] - q[j]).powi(2))
        .sum();
    assert!((loss - expected).abs() <= 1e-12 * expected.max(1.0));
    let mut shifted = z.clone();
    for (j, on) in active.iter().enumerate() {
        if !on {
            shifted[j] += 1.0;
        }
    }
    let all_inactive = vec![false; q.len()];
    let (zero_loss, zero_grads) = net
        .backward(
            &list.state.features,
            &list.state.weights,
            &shifted,
            &all_inactive,
        )
        .unwrap();
    assert_eq!(zero_loss, 0.0);
    assert!(zero_grads.flat().iter().all(|g| *g == 0.0));
    assert!(grads.all_finite());
}

#[test]
fn gamma_zero_update_reduces_the_loss() {
    let mut t = trainer(1, 3, 100, 100);
    t.run_epoch(0, &episode(10, 4), 1.0).unwrap();
    let list = t.replay().get(0).unwrap().clone();
    let mut net = t.network().clone();
    net.encoder_frozen = false;
    let loss_of = |n: &QNetwork| {
        let q = n.forward(&list.state).unwrap();
        let (z, active) = build_targets(&list, n, 0.0, &q, t.environment().config()).unwrap();
        n.backward(&list.state.features, &list.state.weights, &z, &active)
            .unwrap()
    };
    let mut previous = f64::INFINITY;
    for _ in 0..20 {
        let (loss, grads) = loss_of(&net);
        assert!(loss <= previous + 1e-15, "{loss} after {previous}");
        previous = loss;
        net.sgd_update(&grads, 1e-3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn replay_keeps_the_newest_lists(capacity in 1usize..12, pushes in 0usize..40) {
        let mut t = trainer(1, 1, 100, 100);
        t.run_epoch(0, &episode(10, 1), 1.0).unwrap();
        let template = t.replay().get(0).unwrap().clone();
        let mut memory = ReplayMemory::new(capacity);
        for k in 0..pushes {
            let mut list = template.clone();
            list.state.period = k;
            memory.push(list);
        }
        let kept: Vec<usize> = memory.iter().map(|l| l.state.period).collect();
        let expected: Vec<usize> = (pushes.saturating_sub(capacity)..pushes).collect();
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn stored_entries_are_exactly_the_feasible_set(seed in 0u64..1000, eps in 0.0f64..1.0) {
        let mut t = trainer(2, seed, 4, 100);
        t.run_epoch(0, &episode(6, 8), eps).unwrap();
        for list in t.replay().iter() {
            let ctx = t.environment().context(&list.state);
            let set = ctx.feasible_set();
            prop_assert_eq!(list.entries.len(), set.len());
            for e in &list.entries {
                prop_assert!(ctx.is_feasible(&e.action));
            }
        }
    }

    #[test]
    fn batches_are_distinct_indices(len in 0usize..30, batch in 1usize..10, seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut t = trainer(1, 1, 100, 100);
        t.run_epoch(0, &episode(10, 1), 1.0).unwrap();
        let template = t.replay().get(0).unwrap().clone();
        let mut memory = ReplayMemory::new(64);
        for _ in 0..len {
            memory.push(template.clone());
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        match memory.sample_indices(batch, &mut rng) {
            None => prop_assert!(len < batch),
            Some(mut idx) => {
                prop_assert_eq!(idx.len(), batch);
                idx.sort_unstable();
                idx.dedup();
                prop_assert_eq!(idx.len(), batch);
                prop_assert!(idx.iter().all(|i| *i < len));
            }
        }
    }
}
