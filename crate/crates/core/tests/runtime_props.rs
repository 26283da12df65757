//! Voting, prior aggregation, prediction and consolidation invariants.

use metacl::codec::{chunk, ChunkSet};
use metacl::consolidation::{aggregate_priors, consolidate, learn_task, ConsolidationConfig, PriorStore};
use metacl::gan::argmax_rows;
use metacl::hypernet::{Gaussian, HyperConfig, HyperParams, TaskDescriptor};
use metacl::rng::RngStream;
use metacl::runtime::{majority_vote, ModelCounter, VoteTally};
use metacl::tensor::Tensor;
use proptest::prelude::*;

fn small_hyper_config() -> HyperConfig {
    HyperConfig {
        latent_dim: 3,
        hidden: 6,
        chunk_size: 9,
        chunk_embed_dim: 2,
        epochs: 2,
        ..HyperConfig::default()
    }
}

fn fake_models(count: usize, chunks: usize, chunk_size: usize, rng: &mut RngStream) -> Vec<ChunkSet> {
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..chunks * chunk_size - 3).map(|_| 0.1 * rng.normal()).collect();
            chunk(&v, chunk_size).unwrap()
        })
        .collect()
}

#[test]
fn ties_go_to_the_lowest_class() {
    let votes = vec![vec![2, 1, 0], vec![1, 2, 0], vec![3, 3, 0], vec![0, 0, 0]];
    assert_eq!(majority_vote(&votes).unwrap(), vec![0, 0, 0]);
    assert_eq!(majority_vote(&[vec![4, 1], vec![4, 2]]).unwrap(), vec![4, 1]);
    assert!(majority_vote(&[]).is_err());
}

#[test]
fn tally_rejects_malformed_votes() {
    let mut t = VoteTally::new(2, 3);
    assert!(t.add(&[0]).is_err());
    assert!(t.add(&[0, 3]).is_err());
    t.add(&[2, 1]).unwrap();
    assert_eq!(t.voters(), 1);
    assert_eq!(t.winners(), vec![2, 1]);
}

#[test]
fn counter_tracks_the_peak_number_of_live_models() {
    let arch = metacl::gan::Architecture::new(metacl::bench::ImageShape::new(1, 8, 8), 4);
    let params = metacl::gan::ModelParams::init(arch, &mut RngStream::new(0)).unwrap();
    let counter = ModelCounter::new();
    for _ in 0..3 {
        let live = counter.hold(params.clone());
        assert_eq!(counter.live(), 1);
        drop(live);
    }
    assert_eq!((counter.live(), counter.peak(), counter.total()), (0, 1, 3));
    let a = counter.hold(params.clone());
    let b = counter.hold(params);
    assert_eq!(counter.peak(), 2);
    drop((a, b));
    assert_eq!(counter.live(), 0);
}

#[test]
fn priors_must_be_recorded_in_order() {
    let cfg = small_hyper_config();
    let hyper = HyperParams::init(&cfg, 3, 4, &mut RngStream::new(1)).unwrap();
    let mut store = PriorStore::new();
    assert!(store.record_prior(1, &hyper).is_err());
    store.record_prior(0, &hyper).unwrap();
    assert!(store.record_prior(0, &hyper).is_err());
    assert_eq!(store.get(0).unwrap(), &hyper.prior_of(&TaskDescriptor::new(0, 3).unwrap()).unwrap());
}

#[test]
fn consolidation_visits_stored_tasks_in_order_and_freezes_priors() {
    let cfg = small_hyper_config();
    let mut rng = RngStream::new(2);
    let mut hyper = HyperParams::init(&cfg, 3, 4, &mut rng).unwrap();
    let mut store = PriorStore::new();
    for k in 0..3 {
        let models = fake_models(2, 4, cfg.chunk_size, &mut rng);
        let t = TaskDescriptor::new(k, 3).unwrap();
        let before = store.clone();
        let report = learn_task(&mut hyper, &mut store, &models, &t, &cfg, &ConsolidationConfig::default(), &rng.child("learn", k as u64)).unwrap();
        assert_eq!(report.train.epoch_mse.len(), cfg.epochs);
        assert_eq!(store.len(), k + 1);
        for j in 0..k {
            assert_eq!(store.get(j), before.get(j), "stored prior {j} changed while learning task {k}");
        }
    }

    let cc = ConsolidationConfig {
        pseudo_models: 3,
        passes: 2,
    };
    let priors_before: Vec<Gaussian> = (0..3).map(|j| hyper.prior_of(&TaskDescriptor::new(j, 3).unwrap()).unwrap()).collect();
    let frozen = store.clone();
    let report = consolidate(&mut hyper, &store, 3, &cc, &cfg, &RngStream::new(3)).unwrap();
    let expected: Vec<(usize, usize, usize)> = (0..2).flat_map(|p| (0..3).map(move |j| (p, j, 3))).collect();
    assert_eq!(report.visits, expected);
    assert_eq!(report.steps, 2 * 3 * 3 * 4);
    assert_eq!(store, frozen);
    for (j, before) in priors_before.iter().enumerate() {
        let after = hyper.prior_of(&TaskDescriptor::new(j, 3).unwrap()).unwrap();
        assert_eq!(&after, before, "prior map of task {j} moved during consolidation");
    }
    assert!(consolidate(&mut hyper, &PriorStore::new(), 1, &cc, &cfg, &RngStream::new(3)).is_err());
}

fn gaussians(n: usize, dim: usize) -> impl Strategy<Value = Vec<Gaussian>> {
    prop::collection::vec(
        (prop::collection::vec(-3.0..3.0f64, dim), prop::collection::vec(-3.0..3.0f64, dim))
            .prop_map(|(mu, log_var)| Gaussian { mu, log_var }),
        n,
    )
}

proptest! {
    #[test]
    fn vote_ignores_model_order(
        votes in prop::collection::vec(prop::collection::vec(0usize..5, 6), 1..9),
        perm_seed in any::<u64>(),
    ) {
        let mut shuffled = votes.clone();
        RngStream::new(perm_seed).shuffle(&mut shuffled);
        prop_assert_eq!(majority_vote(&votes).unwrap(), majority_vote(&shuffled).unwrap());
    }

    #[test]
    fn unanimous_votes_win(labels in prop::collection::vec(0usize..5, 1..10), voters in 1usize..6) {
        let votes = vec![labels.clone(); voters];
        prop_assert_eq!(majority_vote(&votes).unwrap(), labels);
    }

    #[test]
    fn aggregate_prior_ignores_task_order(
        priors in (1usize..6, 1usize..5).prop_flat_map(|(n, d)| gaussians(n, d)),
        perm_seed in any::<u64>(),
    ) {
        let mut shuffled = priors.clone();
        RngStream::new(perm_seed).shuffle(&mut shuffled);
        let a = aggregate_priors(&priors).unwrap();
        let b = aggregate_priors(&shuffled).unwrap();
        for d in 0..a.dim() {
            prop_assert!((a.mu[d] - b.mu[d]).abs() < 1e-12);
            prop_assert!((a.log_var[d] - b.log_var[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_ignores_a_constant_logit_shift(
        scores in prop::collection::vec(-50i32..50, 4 * 6),
        shift in -1000i32..1000,
    ) {
        let base = Tensor::new(vec![4, 6], scores.iter().map(|&s| f64::from(s)).collect()).unwrap();
        let shifted = Tensor::new(vec![4, 6], scores.iter().map(|&s| f64::from(s + shift)).collect()).unwrap();
        prop_assert_eq!(argmax_rows(&base, None), argmax_rows(&shifted, None));
        let allowed = [1, 4, 5];
        let restricted = argmax_rows(&base, Some(&allowed));
        prop_assert!(restricted.iter().all(|c| allowed.contains(c)));
        prop_assert_eq!(restricted, argmax_rows(&shifted, Some(&allowed)));
    }
}
