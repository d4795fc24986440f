use dynopf_core::dynamics::DynamicsConfig;
use dynopf_core::grid::{bundled, Network};
use dynopf_core::node::{
    fit_normalization, node_error, node_loss, percentage_error, sample_node_dataset, train_node, NodeConfig, NodeDataset,
    NodeSurrogate, NodeTrainConfig, SplitTag,
};
use std::sync::OnceLock;

fn net() -> Network {
    bundled("wscc9").unwrap()
}

fn dataset() -> &'static NodeDataset {
    static DS: OnceLock<NodeDataset> = OnceLock::new();
    DS.get_or_init(|| sample_node_dataset(&net(), 0, 60, 4, &DynamicsConfig::default()).unwrap())
}

fn small_surrogate(seed: u64) -> NodeSurrogate {
    let norm = fit_normalization(dataset(), DynamicsConfig::default().delta_max);
    NodeSurrogate::new(0, norm, &NodeConfig { hidden: vec![8, 8], substeps: 2 }, seed).unwrap()
}

#[test]
fn dataset_targets_start_at_the_sampled_state() {
    let ds = dataset();
    assert_eq!(ds.samples.len(), 60);
    let split = &ds.split;
    assert_eq!(split.train.len() + split.val.len() + split.test.len(), 60);
    for s in &ds.samples {
        assert_eq!(s.target.len(), 31);
        assert!((s.target[0].delta - s.input.delta0).abs() < 1e-12);
        assert!((s.target[0].omega - s.input.omega0).abs() < 1e-12);
    }
}

#[test]
fn dataset_csv_round_trips() {
    let ds = dataset();
    let back = NodeDataset::from_csv(&ds.to_csv(), ds.manifest.clone()).unwrap();
    assert_eq!(&back, ds);
}

#[test]
fn rollout_starts_at_input_and_has_grid_length() {
    let s = small_surrogate(1);
    let x = dataset().samples[0].input;
    let traj = s.rollout(&x).unwrap();
    assert_eq!(traj.len(), 31);
    assert!((traj[0].delta - x.delta0).abs() < 1e-12);
    assert!((traj[0].omega - x.omega0).abs() < 1e-12);
}

#[test]
fn checkpoint_restores_identical_rollouts() {
    let s = small_surrogate(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("node.json");
    s.save(&path).unwrap();
    let back = NodeSurrogate::load(&path).unwrap();
    let x = dataset().samples[3].input;
    assert_eq!(s.rollout(&x).unwrap(), back.rollout(&x).unwrap());
}

#[test]
fn training_lowers_the_loss_and_error() {
    let ds = dataset();
    let mut s = small_surrogate(3);
    let train: Vec<_> = ds.split.train.iter().map(|&i| &ds.samples[i]).collect();
    let cfg = NodeTrainConfig { epochs: 6, batch: 16, lr: 1e-2, ..Default::default() };
    let before = node_loss(&s, &train, cfg.clip).unwrap();
    let err_before = node_error(&s, ds, SplitTag::Train).unwrap();
    let report = train_node(&mut s, ds, &cfg).unwrap();
    assert_eq!(report.train_loss.len(), 6);
    assert!(node_loss(&s, &train, cfg.clip).unwrap() < before);
    assert!(node_error(&s, ds, SplitTag::Train).unwrap() < err_before);
}

#[test]
fn training_is_deterministic() {
    let ds = dataset();
    let cfg = NodeTrainConfig { epochs: 2, batch: 16, ..Default::default() };
    let mut a = small_surrogate(5);
    let mut b = small_surrogate(5);
    assert_eq!(train_node(&mut a, ds, &cfg).unwrap(), train_node(&mut b, ds, &cfg).unwrap());
    assert_eq!(a.rollout(&ds.samples[0].input).unwrap(), b.rollout(&ds.samples[0].input).unwrap());
}

#[test]
fn percentage_error_of_exact_prediction_is_zero() {
    let t = &dataset().samples[7].target;
    assert_eq!(percentage_error(t, t), 0.0);
}
