use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::data::Label;

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        depth: 1,
        base_channels: 2,
        init_seed: 11,
        ..ModelConfig::default()
    }
}

fn tiny_plan(seed: u64) -> PartitionPlan {
    PartitionPlan {
        clients: vec![
            vec![(Label::Benign, 6), (Label::Normal, 2)],
            vec![(Label::Malignant, 6), (Label::Normal, 2)],
            vec![(Label::Benign, 4), (Label::Malignant, 4)],
        ],
        server_test: vec![(Label::Benign, 2), (Label::Malignant, 2), (Label::Normal, 2)],
        scale: 1.0,
        seed,
    }
}

fn tiny_cfg() -> FedConfig {
    FedConfig {
        rounds: 2,
        local_epochs: 2,
        batch_size: 4,
        adam_lr: 1e-2,
        seed: 5,
        ..FedConfig::default()
    }
}

fn tiny_federation(cfg: FedConfig) -> Federation {
    let model = AttentionUNet::build(tiny_model_config()).unwrap();
    let partition = build_partition(&tiny_plan(3), &SampleSource::Synthetic { size: 8 }).unwrap();
    Federation::new(model, partition, cfg, AugmentationConfig::default()).unwrap()
}

#[derive(Default)]
struct Recorder {
    starts: Vec<(usize, usize, Vec<f64>)>,
    ends: Vec<LocalUpdate>,
    globals: Vec<Vec<f64>>,
}

impl RoundObserver for Recorder {
    fn local_start(&mut self, round: usize, client: usize, weights: &[f64]) {
        self.starts.push((round, client, weights.to_vec()));
    }

    fn local_end(&mut self, _round: usize, update: &LocalUpdate) {
        self.ends.push(update.clone());
    }

    fn round_end(&mut self, _report: &RoundReport, state: &GlobalState) -> Result<()> {
        self.globals.push(state.weights.clone());
        Ok(())
    }
}

#[test]
fn aggregate_identical_vectors_is_identity() {
    let w = vec![0.1, -3.7, 1e-9, 42.0];
    let out = aggregate(&[(&w, 450), (&w, 250), (&w, 163)]).unwrap();
    assert_eq!(out, w);
}

#[test]
fn aggregate_midpoint() {
    let (a, b) = (vec![0.0; 5], vec![2.0; 5]);
    assert_eq!(aggregate(&[(&a, 7), (&b, 7)]).unwrap(), vec![1.0; 5]);
}

#[test]
fn aggregate_matches_weighted_mean_oracle() {
    let mut r = rng::stream(1, &[]);
    let ws: Vec<Vec<f64>> = (0..3).map(|_| (0..100).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let n = [450usize, 250, 163];
    let out = aggregate(&[(&ws[0], n[0]), (&ws[1], n[1]), (&ws[2], n[2])]).unwrap();
    let total: f64 = n.iter().map(|&x| x as f64).sum();
    for i in 0..100 {
        let mut expect = 0.0;
        for j in 0..3 {
            expect += n[j] as f64 / total * ws[j][i];
        }
        assert!((out[i] - expect).abs() <= 1e-12, "coordinate {i}");
    }
}

#[test]
fn aggregate_errors() {
    assert!(matches!(aggregate(&[]), Err(Error::Usage(_))));
    let (a, b) = (vec![1.0; 3], vec![1.0; 4]);
    assert!(matches!(aggregate(&[(&a, 1), (&b, 1)]), Err(Error::Shape { .. })));
    assert!(aggregate(&[(&a, 0)]).is_err());
}

proptest! {
    #[test]
    fn aggregate_is_permutation_invariant(
        ws in prop::collection::vec((prop::collection::vec(-10.0f64..10.0, 6), 1usize..500), 1..5),
        seed in any::<u64>(),
    ) {
        let pairs: Vec<(&[f64], usize)> = ws.iter().map(|(w, n)| (w.as_slice(), *n)).collect();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rng::stream(seed, &[]));
        let a = aggregate(&pairs).unwrap();
        let b = aggregate(&shuffled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}

#[test]
fn proximal_gradient_vanishes_at_anchor() {
    let w = vec![0.3, -0.2, 5.0];
    let obj = LocalObjective {
        mu: 0.1,
        weight_decay: 0.0,
    };
    let mut g = vec![0.0; 3];
    obj.add_gradient(&mut g, &w, &w);
    assert_eq!(g, vec![0.0; 3]);
    assert_eq!(obj.penalty(&w, &w), 0.0);
}

#[test]
fn proximal_objective_decreases_under_small_gradient_step() {
    let model_cfg = tiny_model_config();
    let mut model = AttentionUNet::build(model_cfg).unwrap();
    let anchor = model.get_weights();
    let mut r = rng::stream(2, &[]);
    let mut w: Vec<f64> = anchor.iter().map(|a| a + r.random_range(-0.05..0.05)).collect();
    let samples: Vec<_> = [Label::Benign, Label::Malignant, Label::Normal]
        .iter()
        .enumerate()
        .map(|(i, &l)| crate::data::generate_phantom(l, 8, &mut rng::stream(i as u64, &[9])))
        .collect();
    let (images, masks) = to_batch(&samples).unwrap();
    let obj = LocalObjective {
        mu: 0.1,
        weight_decay: 0.0,
    };
    let objective = |model: &mut AttentionUNet, w: &[f64]| {
        model.set_weights(w).unwrap();
        let (loss, grad) = model.loss_and_gradient(&images, &masks).unwrap();
        (loss + obj.penalty(w, &anchor), grad)
    };
    let (before, mut grad) = objective(&mut model, &w);
    obj.add_gradient(&mut grad, &w, &anchor);
    for (wi, gi) in w.iter_mut().zip(&grad) {
        *wi -= 1e-6 * gi;
    }
    let (after, _) = objective(&mut model, &w);
    assert!(after <= before, "{after} > {before}");
}

#[test]
fn zero_mu_fedprox_equals_fedavg() {
    let base = FedConfig {
        mu: 0.0,
        weight_decay: 0.0,
        ..tiny_cfg()
    };
    let mut prox = tiny_federation(base.clone());
    let mut avg = tiny_federation(FedConfig {
        algorithm: Algorithm::FedAvg,
        mu: 0.7,
        weight_decay: 0.3,
        ..base
    });
    let (mut rp, mut ra) = (Recorder::default(), Recorder::default());
    let a = prox.run(&mut rp).unwrap();
    let b = avg.run(&mut ra).unwrap();
    assert_eq!(a, b);
    assert_eq!(rp.globals, ra.globals);
    assert_eq!(prox.state(), avg.state());
}

#[test]
fn strong_proximal_term_limits_drift() {
    let mut drift = Vec::new();
    for mu in [0.0, 10.0] {
        let cfg = FedConfig {
            rounds: 1,
            local_epochs: 3,
            mu,
            weight_decay: 0.0,
            ..tiny_cfg()
        };
        let mut fed = tiny_federation(cfg);
        let mut rec = Recorder::default();
        fed.run(&mut rec).unwrap();
        let global = &rec.starts[0].2;
        let norms: Vec<f64> = rec
            .ends
            .iter()
            .map(|u| u.weights.iter().zip(global).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect();
        drift.push(norms);
    }
    for (c, (free, pulled)) in drift[0].iter().zip(&drift[1]).enumerate() {
        assert!(pulled < free, "client {c}: {pulled} >= {free}");
    }
}

#[test]
fn clients_start_from_the_global_weights() {
    let mut fed = tiny_federation(tiny_cfg());
    let initial = fed.state().weights.clone();
    let mut rec = Recorder::default();
    fed.run(&mut rec).unwrap();
    assert_eq!(rec.starts.len(), 6);
    for (round, client, w) in &rec.starts {
        let expect = if *round == 0 { &initial } else { &rec.globals[round - 1] };
        assert_eq!(w, expect, "round {round} client {client}");
    }
}

#[test]
fn single_client_global_equals_local_update() {
    let model = AttentionUNet::build(tiny_model_config()).unwrap();
    let mut partition = build_partition(&tiny_plan(4), &SampleSource::Synthetic { size: 8 }).unwrap();
    partition.clients.truncate(1);
    let cfg = FedConfig { rounds: 1, ..tiny_cfg() };
    let mut fed = Federation::new(model, partition, cfg, AugmentationConfig::default()).unwrap();
    let mut rec = Recorder::default();
    fed.run(&mut rec).unwrap();
    assert_eq!(fed.state().weights, rec.ends[0].weights);
}

#[test]
fn history_tracks_rounds() {
    let cfg = FedConfig { rounds: 3, local_epochs: 1, ..tiny_cfg() };
    let mut fed = tiny_federation(cfg);
    let reports = fed.run(&mut NoObserver).unwrap();
    assert_eq!(fed.state().history.len(), 3);
    assert_eq!(reports.iter().map(|r| r.round).collect::<Vec<_>>(), [1, 2, 3]);
    for r in &reports {
        assert!(r.server_metrics.in_unit_range());
        assert_eq!(r.per_client_metrics.len(), 3);
        assert!(r.per_client_metrics.iter().all(MetricsRow::in_unit_range));
    }
    assert_eq!(fed.state().history, reports.iter().map(|r| r.server_metrics).collect::<Vec<_>>());
    assert!(matches!(fed.run_round(&mut NoObserver), Err(Error::Usage(_))));
}

#[test]
fn sample_counts_are_train_split_sizes() {
    let fed = tiny_federation(tiny_cfg());
    for c in fed.clients() {
        assert_eq!(c.train.len() + c.test.len(), 8);
        assert_eq!(c.sample_count(), c.train.len());
        let ids: Vec<u64> = c.train.iter().map(|s| s.id).collect();
        assert!(c.test.iter().all(|s| !ids.contains(&s.id)));
    }
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut fed = tiny_federation(tiny_cfg());
        let reports = fed.run(&mut NoObserver).unwrap();
        (reports, fed.state().clone())
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
}

#[test]
fn parallel_clients_match_sequential() {
    let mut seq = tiny_federation(tiny_cfg());
    let mut par = tiny_federation(FedConfig {
        parallel: true,
        ..tiny_cfg()
    });
    assert_eq!(seq.run(&mut NoObserver).unwrap(), par.run(&mut NoObserver).unwrap());
    assert_eq!(seq.state(), par.state());
}

#[test]
fn empty_train_set_is_a_config_error() {
    let model_cfg = tiny_model_config();
    let mut model = AttentionUNet::build(model_cfg).unwrap();
    let global = model.get_weights();
    let mut client = ClientState {
        id: 0,
        train: Dataset::default(),
        test: Dataset::default(),
        optimizer: None,
    };
    let err = local_train(
        &mut model,
        &mut client,
        &global,
        0,
        &FedConfig::default(),
        &AugmentationConfig::disabled(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config { .. }));
}

#[test]
fn run_federation_smoke() {
    let cfg = FedConfig {
        rounds: 1,
        local_epochs: 1,
        ..tiny_cfg()
    };
    let reports = run_federation(
        &cfg,
        &tiny_model_config(),
        &AugmentationConfig::disabled(),
        &tiny_plan(8),
        &SampleSource::Synthetic { size: 8 },
        &mut NoObserver,
    )
    .unwrap();
    assert_eq!(reports.len(), 1);
}

#[test]
fn config_validation_names_fields() {
    let bad = [
        (FedConfig { rounds: 0, ..FedConfig::default() }, "fed.rounds"),
        (FedConfig { local_epochs: 0, ..FedConfig::default() }, "fed.local_epochs"),
        (FedConfig { batch_size: 0, ..FedConfig::default() }, "fed.batch_size"),
        (FedConfig { mu: -0.1, ..FedConfig::default() }, "fed.mu"),
        (FedConfig { adam_lr: 0.0, ..FedConfig::default() }, "fed.adam_lr"),
        (FedConfig { adam_beta2: 1.0, ..FedConfig::default() }, "fed.adam_beta2"),
    ];
    for (cfg, field) in bad {
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains(field), "{msg}");
    }
    FedConfig::default().validate().unwrap();
    assert_eq!("FedAvg".parse::<Algorithm>().unwrap(), Algorithm::FedAvg);
}

#[test]
fn per_client_epochs_override() {
    let cfg = FedConfig {
        client_epochs: vec![1, 2, 3],
        ..FedConfig::default()
    };
    assert_eq!((cfg.epochs_for(0), cfg.epochs_for(2)), (1, 3));
    let model = AttentionUNet::build(tiny_model_config()).unwrap();
    let partition = build_partition(&tiny_plan(3), &SampleSource::Synthetic { size: 8 }).unwrap();
    let wrong = FedConfig {
        client_epochs: vec![1, 2],
        ..tiny_cfg()
    };
    assert!(Federation::new(model, partition, wrong, AugmentationConfig::default()).is_err());
}
