use drcvr::datasets::{DatasetKind, Event, InteractionDataset};
use drcvr::estimators::ImputationLoss;
use drcvr::models::Checkpoint;
use drcvr::training::hyper::{hypergradient, upper_loss};
use drcvr::training::{
    train, trilevel_train, Estimator, LambdaConfig, MetaConfig, PropensityConfig, PropensityMode, TrainConfig, Trainer,
};

fn toy() -> InteractionDataset {
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for u in 0..20 {
        for i in 0..25 {
            if (u * 5 + i * 3) % 4 == 0 {
                let e = Event { user: u, item: i, converted: (u * i + u) % 3 == 0 };
                if (u + i) % 9 == 0 {
                    validation.push(e);
                } else {
                    train.push(e);
                }
            }
        }
    }
    InteractionDataset::new(DatasetKind::Real, 20, 25, train, validation, Vec::new()).unwrap()
}

fn config(estimator: Estimator) -> TrainConfig {
    TrainConfig {
        estimator,
        rank: 4,
        init_std: 0.1,
        learning_rate: 0.01,
        batch_size: 16,
        max_epochs: 3,
        propensity: PropensityConfig { epochs: 2, batch_size: 64, ..Default::default() },
        meta: MetaConfig { batch_size: 16, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn every_estimator_round_trips_through_a_checkpoint() {
    let ds = toy();
    for estimator in Estimator::ALL {
        let cfg = config(estimator);
        let outcome = train(&ds, &cfg, 4).unwrap();
        assert_eq!(outcome.models.imputation.is_some(), estimator.imputation_loss().is_some(), "{}", estimator.name());
        assert_eq!(outcome.models.lambda.is_some(), estimator == Estimator::DrMseTrilevel);
        let bytes = outcome.checkpoint(&cfg, 4).to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.models, outcome.models);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

#[test]
fn drmse_uses_its_own_imputation_loss() {
    assert_eq!(Estimator::DrMse.imputation_loss(), Some(ImputationLoss::DrMse));
    assert_eq!(Estimator::Naive.imputation_loss(), None);
    assert!(!Estimator::Naive.needs_propensity());
}

#[test]
fn hypergradient_matches_finite_differences_mid_training() {
    let ds = toy();
    for mode in [PropensityMode::Pretrained, PropensityMode::Joint] {
        let mut cfg = config(Estimator::DrMseTrilevel);
        cfg.init_std = 0.5;
        cfg.propensity.mode = mode;
        cfg.lambda = LambdaConfig { embed_std: 0.5, learning_rate: 0.005, ..Default::default() };
        cfg.meta.pseudo_learning_rate = 1.0;
        let mut trainer = Trainer::new(&ds, &cfg, 2).unwrap();
        trainer.epoch(1).unwrap();
        let batch = trainer.sample_meta_batch().unwrap();
        let models = trainer.meta_models().unwrap();
        let net = trainer.state().lambda.clone().unwrap();
        let analytic = hypergradient(&models, &net, &batch).unwrap();
        let h = 1e-4;
        let (mut diff, mut norm) = (0.0, 0.0);
        for (idx, a) in analytic.grad_xi.iter().enumerate() {
            let mut plus = net.clone();
            plus.params_mut()[idx] += h;
            let mut minus = net.clone();
            minus.params_mut()[idx] -= h;
            let fd = (upper_loss(&models, &plus, &batch).unwrap() - upper_loss(&models, &minus, &batch).unwrap())
                / (2.0 * h);
            diff += (a - fd).powi(2);
            norm += fd * fd;
        }
        assert!(norm > 0.0);
        assert!(diff.sqrt() / norm.sqrt() < 1e-3, "{mode:?}: {} / {}", diff.sqrt(), norm.sqrt());
    }
}

#[test]
fn trilevel_runs_are_reproducible() {
    let ds = toy();
    let cfg = config(Estimator::DrMseTrilevel);
    let a = trilevel_train(&ds, &cfg, 8).unwrap();
    let b = trilevel_train(&ds, &cfg, 8).unwrap();
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.checkpoint(&cfg, 8).to_bytes().unwrap(), b.checkpoint(&cfg, 8).to_bytes().unwrap());
    assert!(a.epochs.iter().all(|e| e.outer_steps > 0 && e.mean_lambda.is_some()));
}
