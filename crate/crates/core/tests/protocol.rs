use std::collections::HashSet;
use std::sync::Arc;

use drr_core::agent::{AgentBundle, AgentConfig};
use drr_core::baselines::LinUcbModel;
use drr_core::datasets::{build_sessions, split_random, Dataset, IdMaps, RatingEvent, RatingScale, Split};
use drr_core::envloop::{
    build_eval_sessions, run_offline, run_online, train, DrrLearner, DrrOnline, DrrRanker, RewardSpec, TrainConfig,
    TrainLog,
};
use drr_core::pmf::{train_pmf, EmbeddingTable, PmfConfig};
use drr_core::replay::Transition;
use drr_core::staterep::{History, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synthetic(users: usize, items: usize, per_user: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    for u in 0..users {
        let mut pool: Vec<usize> = (0..items).collect();
        for t in 0..per_user {
            let i = pool.swap_remove(rng.random_range(0..pool.len()));
            let rating = rng.random_range(1..=5) as f64;
            events.push(RatingEvent { user: u, item: i, rating, timestamp: t as i64 });
        }
    }
    Dataset::new(events, users, items, RatingScale::FIVE_STAR, Arc::new(IdMaps::default())).unwrap()
}

fn small_config(variant: Variant) -> AgentConfig {
    AgentConfig {
        variant,
        n: 2,
        k: 4,
        actor_hidden: [8, 8],
        critic_hidden: [8, 8],
        batch_size: 8,
        eps_decay_steps: 100,
        ..Default::default()
    }
}

struct World {
    split: Split,
    tbl: EmbeddingTable<f64>,
}

fn world() -> World {
    let ds = synthetic(12, 20, 14, 3);
    let split = split_random(&ds, 0.8, 1).unwrap();
    let cfg = PmfConfig { k: 4, epochs: 5, ..Default::default() };
    let tbl = train_pmf(&split.train, &cfg).unwrap();
    World { split, tbl }
}

fn run_training(w: &World, variant: Variant, episodes: usize, horizon: usize, seed: u64) -> (AgentBundle<f64>, TrainLog) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bundle = AgentBundle::new(small_config(variant), &mut rng).unwrap();
    let mut learner = DrrLearner::new(bundle, &w.tbl, (episodes * horizon) as u64).unwrap();
    let sessions = build_sessions(&w.split.train, 2).unwrap();
    let cfg = TrainConfig { episodes, horizon, seed };
    let log = train(&mut learner, &sessions, &w.split.train.rating_lookup(), RewardSpec::FiveStar, &cfg).unwrap();
    (learner.bundle, log)
}

#[test]
fn single_step_accounting() {
    let w = world();
    let sessions = build_sessions(&w.split.train, 2).unwrap();
    for (batch, expected_updates) in [(64, 0), (1, 1)] {
        let mut cfg = small_config(Variant::DrrAve);
        cfg.batch_size = batch;
        cfg.eps_start = 1.0;
        cfg.eps_end = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bundle = AgentBundle::new(cfg, &mut rng).unwrap();
        let mut learner = DrrLearner::new(bundle, &w.tbl, 1).unwrap();
        let tc = TrainConfig { episodes: 1, horizon: 1, seed: 0 };
        let log = train(&mut learner, &sessions, &w.split.train.rating_lookup(), RewardSpec::FiveStar, &tc).unwrap();
        assert_eq!(log.transitions, 1);
        assert_eq!(learner.replay.len(), 1);
        assert_eq!(log.updates, expected_updates);
        assert_eq!(learner.bundle.updates, expected_updates);
    }
}

#[test]
fn training_never_repeats_items_and_is_deterministic() {
    let w = world();
    for variant in Variant::ALL {
        let (b1, log1) = run_training(&w, variant, 15, 6, 5);
        let (b2, log2) = run_training(&w, variant, 15, 6, 5);
        assert_eq!(log1, log2);
        assert_eq!(b1.param_digest(), b2.param_digest());
        assert!(log1.updates > 0);
        let mut by_episode: Vec<Vec<usize>> = vec![Vec::new(); 15];
        for r in &log1.rows {
            by_episode[r.episode].push(r.item);
            assert!((-1.0..=1.0).contains(&r.reward));
        }
        for items in &by_episode {
            let unique: HashSet<_> = items.iter().collect();
            assert_eq!(unique.len(), items.len(), "{variant}: repeated item in {items:?}");
            assert_eq!(items.len(), 6);
        }
    }
}

#[test]
fn offline_evaluation_invariants() {
    let w = world();
    let (bundle, _) = run_training(&w, Variant::DrrP, 10, 5, 2);
    let before = bundle.param_digest();
    let sessions = build_eval_sessions(&w.split, 2).unwrap();
    assert!(!sessions.is_empty());
    let ranker = DrrRanker { bundle: &bundle, tbl: &w.tbl };
    let records = run_offline(&ranker, &sessions, &[1, 3], 10, RatingScale::FIVE_STAR, 1).unwrap();
    assert_eq!(bundle.param_digest(), before);
    for (rec, s) in records.iter().zip(&sessions) {
        assert_eq!(rec.steps.len(), s.candidates.len().min(10));
        for (j, step) in rec.steps.iter().enumerate() {
            assert_eq!(step.available, s.candidates.len() - j);
            assert_eq!(step.top[0], step.item);
        }
        let items: HashSet<usize> = rec.steps.iter().map(|x| x.item).collect();
        assert_eq!(items.len(), rec.steps.len());
    }
    let threaded = run_offline(&ranker, &sessions, &[1, 3], 10, RatingScale::FIVE_STAR, 3).unwrap();
    assert_eq!(threaded, records);
}

#[test]
fn online_resets_parameters_every_session() {
    let w = world();
    let (bundle, _) = run_training(&w, Variant::DrrAve, 10, 5, 4);
    let sessions = build_eval_sessions(&w.split, 2).unwrap();
    let mut policy = DrrOnline::new(&bundle, &w.tbl, 0.1, 100).unwrap();
    let report = run_online(&mut policy, &w.tbl, &sessions, 4, RewardSpec::FiveStar, 9).unwrap();
    assert_eq!(policy.session_start_digests.len(), sessions.len());
    assert!(policy.session_start_digests.iter().all(|&d| d == bundle.param_digest()));
    assert_eq!(policy.learner.replay.len(), 4 * sessions.len());
    let total: f64 = report.episodes.iter().map(|e| e.total_reward()).sum();
    assert!((total - report.cumulative_reward).abs() < 1e-9);
    for ep in &report.episodes {
        let items: HashSet<usize> = ep.steps.iter().map(|s| s.item).collect();
        assert_eq!(items.len(), ep.steps.len());
    }
}

#[test]
fn online_edge_cases() {
    let w = world();
    let (bundle, _) = run_training(&w, Variant::DrrN, 5, 3, 1);
    let sessions = build_eval_sessions(&w.split, 2).unwrap();

    let mut policy = DrrOnline::new(&bundle, &w.tbl, 0.1, 10).unwrap();
    let report = run_online(&mut policy, &w.tbl, &sessions, 0, RewardSpec::FiveStar, 0).unwrap();
    assert_eq!(report.cumulative_reward, 0.0);
    assert!(report.episodes.iter().all(|e| e.steps.is_empty()));

    // a simulator that predicts 3 everywhere pays nothing
    let flat = EmbeddingTable::<f64>::zeros(4, w.tbl.num_users, w.tbl.num_items, 3.0, RatingScale::FIVE_STAR);
    let mut policy = DrrOnline::new(&bundle, &flat, 0.1, 10).unwrap();
    let report = run_online(&mut policy, &flat, &sessions, 5, RewardSpec::FiveStar, 0).unwrap();
    assert_eq!(report.cumulative_reward, 0.0);
    let mut bandit = LinUcbModel::new(&flat, 0.5).unwrap();
    let report = run_online(&mut bandit, &flat, &sessions, 5, RewardSpec::FiveStar, 0).unwrap();
    assert_eq!(report.cumulative_reward, 0.0);
    assert!(report.episodes.iter().all(|e| e.steps.len() == 5));
}

#[test]
fn critic_reaches_constant_reward_with_zero_discount() {
    // three items, one user, every transition pays 0.5
    let mut tbl = EmbeddingTable::<f64>::zeros(2, 1, 3, 3.0, RatingScale::FIVE_STAR);
    tbl.user_vectors.copy_from_slice(&[0.4, -0.3]);
    tbl.item_vectors.copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 0.6, 0.6]);
    let cfg = AgentConfig {
        variant: Variant::DrrAve,
        n: 2,
        k: 2,
        actor_hidden: [8, 8],
        critic_hidden: [16, 16],
        gamma: 0.0,
        critic_lr: 1e-2,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bundle = AgentBundle::new(cfg, &mut rng).unwrap();
    let histories = [vec![0, 1], vec![1, 2], vec![2, 0]];
    let batch: Vec<Transition<f64>> = histories
        .iter()
        .enumerate()
        .map(|(j, h)| {
            let h = History::new(h.clone()).unwrap();
            let next = h.update(j, 0.5);
            Transition::new(0, h, vec![0.2 * j as f64, -0.1], 0.5, next, false).unwrap()
        })
        .collect();
    let refs: Vec<&Transition<f64>> = batch.iter().collect();
    for _ in 0..2000 {
        bundle.critic_update(&refs, &[1.0; 3], &tbl).unwrap();
    }
    for t in &batch {
        let s = bundle.actor.state_rep.compute(t.user, &t.history, &tbl).unwrap();
        let q = bundle.critic_forward(&s.values, &t.action).unwrap();
        assert!((q - 0.5).abs() < 0.01, "q = {q}");
    }
}
