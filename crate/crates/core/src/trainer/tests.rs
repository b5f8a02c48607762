use super::*;
use crate::data::{generate_blobs, DatasetSpec};
use crate::eval::purity_flow;

fn blobs(classes: usize, per_class: usize, sep: f64, seed: u64) -> LabeledDataset {
    generate_blobs(&DatasetSpec::blobs(classes, per_class, 2, sep, seed)).unwrap()
}

fn mlp_cfg(method: &str, members: usize, k: usize) -> TrainConfig {
    TrainConfig {
        method: method.into(),
        members,
        epochs: 6,
        batch_size: 16,
        seed: 3,
        arch: ArchKind::Mlp,
        hidden: [16, 16],
        penalty: PenaltyConfig { k, t_tau: 3, ..Default::default() },
        ..Default::default()
    }
}

fn grad_owners(method: &str, members: usize, k: usize, fusion: FusionKind) -> (Vec<bool>, Option<bool>) {
    let ds = blobs(2, 4, 4.0, 1);
    let cfg = TrainConfig { fusion, ..mlp_cfg(method, members, k) };
    let registry = ObjectiveRegistry::with_builtin();
    let objective = registry.create(method, &cfg.penalty).unwrap();
    let mut state = EnsembleState::new(&cfg, ds.example_shape(), 2, objective.uses_auxiliary()).unwrap();
    let x = ds.batch(&[0]).unwrap();
    compute_gradients(&mut state, objective.as_ref(), &x, &ds.labels_of(&[0]), 1, None).unwrap();
    let owners = state.members.iter().map(|m| m.params.has_nonzero_grad()).collect();
    let fusion = match &state.fusion {
        FusionState::Module(f) => Some(f.params.has_nonzero_grad()),
        _ => None,
    };
    (owners, fusion)
}

#[test]
fn smcl_single_example_updates_one_member() {
    let (owners, _) = grad_owners("smcl", 3, 1, FusionKind::None);
    assert_eq!(owners.iter().filter(|&&o| o).count(), 1);
}

#[test]
fn ie_updates_every_member() {
    let (owners, _) = grad_owners("ie", 3, 1, FusionKind::None);
    assert!(owners.iter().all(|&o| o));
}

#[test]
fn penalties_reach_unassigned_members() {
    for method in ["cmcl", "amcl"] {
        let (owners, _) = grad_owners(method, 3, 1, FusionKind::None);
        assert!(owners.iter().all(|&o| o), "{method}");
    }
}

#[test]
fn fusion_module_collects_gradients() {
    let (_, fusion) = grad_owners("amcl", 2, 1, FusionKind::Module);
    assert_eq!(fusion, Some(true));
}

#[test]
fn amcl_freezes_a_permutation_on_two_blobs() {
    let ds = blobs(2, 40, 6.0, 2);
    let (state, log) = train(&ds, &mlp_cfg("amcl", 2, 1)).unwrap();
    let w = state.specialization().expect("frozen");
    for c in 0..2 {
        assert_eq!(w.row(c).iter().filter(|&&f| f).count(), 1);
    }
    for m in 0..2 {
        assert_eq!(w.classes_of(m).len(), 1);
    }
    let phases: Vec<Phase> = log.records.iter().map(|r| r.phase).collect();
    assert_eq!(&phases[..3], &[Phase::LossBased; 3]);
    assert_eq!(&phases[3..], &[Phase::MemoryBased; 3]);
    assert_eq!(state.memory.counter.epochs_accumulated, 3);
}

#[test]
fn assignments_follow_specialization_after_freeze() {
    let ds = blobs(3, 20, 3.0, 5);
    let (state, log) = train(&ds, &mlp_cfg("amcl", 3, 1)).unwrap();
    let w = state.specialization().unwrap();
    for r in log.records.iter().filter(|r| r.phase == Phase::MemoryBased) {
        assert_eq!(r.purity_violations, 0);
    }
    for row in purity_flow(&log.snapshots()).iter().filter(|r| r.phase == "mba") {
        let expect = if w.get(row.class, row.member) { 1.0 } else { 0.0 };
        assert_eq!(row.ratio, expect);
    }
}

#[test]
fn counts_stop_after_threshold() {
    let ds = blobs(2, 10, 4.0, 1);
    let (state, log) = train(&ds, &mlp_cfg("amcl", 2, 1)).unwrap();
    let counted: u64 = log.records[..3].iter().flat_map(|r| r.snapshot.counts.iter()).sum();
    assert_eq!(state.memory.counter.total(), counted);
    assert_eq!(counted, 3 * 20);
}

#[test]
fn log_snapshots_survive_csv() {
    let ds = blobs(3, 6, 4.0, 1);
    let (_, log) = train(&ds, &mlp_cfg("amcl", 2, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    log.write_csv(&path).unwrap();
    assert_eq!(TrainLog::read_snapshots(&path).unwrap(), log.snapshots());
    std::fs::write(&path, "epoch,phase,loss,oracle_error,top1_error,count_x\n").unwrap();
    assert!(matches!(TrainLog::read_snapshots(&path), Err(Error::Input(_))));
}

#[test]
fn freezing_rules() {
    let ds = blobs(2, 10, 4.0, 1);
    let (mut state, _) = train(&ds, &mlp_cfg("amcl", 2, 1)).unwrap();
    assert!(matches!(freeze_specialization(&mut state), Err(Error::State(_))));

    let cfg = mlp_cfg("amcl", 2, 1);
    let mut fresh = EnsembleState::new(&cfg, &[2], 2, true).unwrap();
    assert!(matches!(freeze_specialization(&mut fresh), Err(Error::State(_))));
}

#[test]
fn training_is_reproducible() {
    let ds = blobs(3, 12, 3.0, 9);
    for fusion in [FusionKind::None, FusionKind::Share] {
        let cfg = TrainConfig { fusion, ..mlp_cfg("cmcl", 2, 1) };
        let (a, la) = train(&ds, &cfg).unwrap();
        let (b, lb) = train(&ds, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
    }
}

#[test]
fn configuration_errors() {
    let ds = blobs(2, 5, 4.0, 1);
    let cfg = TrainConfig { num_classes: Some(3), ..mlp_cfg("ie", 2, 1) };
    assert!(matches!(train(&ds, &cfg), Err(Error::Config(_))));
    let cfg = mlp_cfg("smcl", 5, 6);
    assert!(matches!(train(&ds, &cfg), Err(Error::Config(m)) if m.contains("K must satisfy")));
    let cfg = TrainConfig { epochs: 0, ..mlp_cfg("ie", 2, 1) };
    assert!(matches!(train(&ds, &cfg), Err(Error::Config(_))));
    let cfg = mlp_cfg("vmcl", 2, 1);
    assert!(matches!(train(&ds, &cfg), Err(Error::Config(_))));
    let mut cfg = mlp_cfg("amcl", 2, 1);
    cfg.penalty.t_tau = 0;
    assert!(matches!(train(&ds, &cfg), Err(Error::State(_))));
}

#[test]
fn training_reduces_oracle_error() {
    let ds = blobs(4, 30, 3.0, 4);
    let cfg = TrainConfig { epochs: 8, ..mlp_cfg("smcl", 3, 1) };
    let (state, log) = train(&ds, &cfg).unwrap();
    let first = log.records.first().unwrap().oracle_error;
    let final_oracle = state.predict(&ds.inputs).unwrap().oracle_error(&ds.labels).unwrap();
    assert!(final_oracle < first, "{final_oracle} vs {first}");
}

#[test]
fn smcl_with_full_overlap_matches_ie() {
    let ds = blobs(3, 10, 3.0, 6);
    let (_, ie) = train(&ds, &TrainConfig { epochs: 3, ..mlp_cfg("ie", 3, 3) }).unwrap();
    let (_, smcl) = train(&ds, &TrainConfig { epochs: 3, ..mlp_cfg("smcl", 3, 3) }).unwrap();
    for (a, b) in ie.records.iter().zip(&smcl.records) {
        assert!((a.loss - b.loss).abs() < 1e-9);
        assert_eq!(a.top1_error, b.top1_error);
    }
}

#[test]
fn cnn_ensemble_trains_with_fusion() {
    let ds = crate::data::generate_images(&DatasetSpec::images(2, 6, 8, 0.05, 1)).unwrap();
    let cfg = TrainConfig {
        method: "amcl".into(),
        epochs: 2,
        batch_size: 4,
        fusion: FusionKind::Module,
        penalty: PenaltyConfig { t_tau: 1, ..Default::default() },
        ..Default::default()
    };
    let (state, log) = train(&ds, &cfg).unwrap();
    assert_eq!(log.records.len(), 2);
    let preds = state.predict(&ds.inputs).unwrap();
    assert_eq!(preds.members[0].shape(), &[12, 3]);
}
