use super::*;
use crate::autodiff::prob::{cross_entropy_onehot, kl_to_onehot, kl_uniform_to, softmax};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn probs(rows: &[&[&[f64]]]) -> ProbBatch {
    let width = rows[0][0].len();
    let members = rows[0].len();
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().flat_map(|p| p.iter().copied())).collect();
    ProbBatch::new(rows.len(), members, width, data).unwrap()
}

fn random_probs(rng: &mut ChaCha8Rng, batch: usize, members: usize, width: usize) -> ProbBatch {
    let mut data = Vec::new();
    for _ in 0..batch * members {
        let logits: Vec<f64> = (0..width).map(|_| rng.random_range(-3.0..3.0)).collect();
        data.extend(softmax(&logits));
    }
    ProbBatch::new(batch, members, width, data).unwrap()
}

/// Exhaustive minimum of `sum v*l` over every subset of size `k` of one row.
fn brute_force_row_min(row: &[f64], k: usize) -> f64 {
    let m = row.len();
    (0u32..1 << m)
        .filter(|mask| mask.count_ones() as usize == k)
        .map(|mask| (0..m).filter(|i| mask & (1 << i) != 0).map(|i| row[i]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn auxiliary_labels() {
    assert_eq!(append_auxiliary(0, 2).unwrap().to_vec(), vec![1.0, 0.0, 0.0]);
    let last = append_auxiliary(3, 4).unwrap();
    assert_eq!(last.hot(), 3);
    assert!(!last.is_auxiliary());
    assert_eq!(auxiliary_target(2).to_vec(), vec![0.0, 0.0, 1.0]);
    assert!(matches!(append_auxiliary(2, 2), Err(Error::Input(_))));
}

#[test]
fn ie_and_oracle_examples() {
    let l = LossMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    assert_eq!(ie_loss(&l), 10.0);
    assert_eq!(ie_loss(&LossMatrix::new(2, 2, vec![0.0; 4]).unwrap()), 0.0);
    let l = LossMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.5]]).unwrap();
    assert_eq!(oracle_loss(&l), 1.5);
    let single = LossMatrix::from_rows(&[vec![0.3], vec![1.7]]).unwrap();
    assert_eq!(oracle_loss(&single), ie_loss(&single));
}

#[test]
fn oracle_row_min_never_exceeds_row_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (b, m) = (rng.random_range(1..8), rng.random_range(1..6));
        let data: Vec<f64> = (0..b * m).map(|_| rng.random_range(0.0..5.0)).collect();
        let l = LossMatrix::new(b, m, data).unwrap();
        for j in 0..b {
            let row = l.row(j);
            let min = row.iter().copied().fold(f64::INFINITY, f64::min);
            assert!(min <= row.iter().sum::<f64>() / m as f64);
        }
        assert!(oracle_loss(&l) <= ie_loss(&l) / m as f64 + 1e-12);
    }
}

#[test]
fn top_k_examples() {
    let l = LossMatrix::from_rows(&[vec![0.2, 0.5, 0.9]]).unwrap();
    assert_eq!(assign_top_k(&l, 1).unwrap().row(0), &[true, false, false]);
    assert_eq!(assign_top_k(&l, 3).unwrap().row(0), &[true, true, true]);
    let tie = LossMatrix::from_rows(&[vec![0.4, 0.4, 0.1]]).unwrap();
    assert_eq!(assign_top_k(&tie, 2).unwrap().row(0), &[true, false, true]);
    assert!(matches!(assign_top_k(&l, 0), Err(Error::Config(_))));
    assert!(matches!(assign_top_k(&l, 4), Err(Error::Config(_))));
}

#[test]
fn top_k_matches_subset_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let data: Vec<f64> = (0..24).map(|_| rng.random_range(0.0..3.0)).collect();
        let l = LossMatrix::new(6, 4, data).unwrap();
        for k in 1..=4 {
            let v = assign_top_k(&l, k).unwrap();
            let expect: f64 = (0..6).map(|j| brute_force_row_min(l.row(j), k)).sum();
            assert_eq!(v.objective(&l), expect);
        }
    }
}

#[test]
fn lba_hand_evaluation() {
    let p = probs(&[&[&[0.7, 0.2, 0.1], &[0.1, 0.2, 0.7]]]);
    let label = [append_auxiliary(0, 2).unwrap()];
    let neg_log_07 = 0.356675;
    for beta in [0.0, 0.5, 0.75, 2.0] {
        let cfg = PenaltyConfig { beta, k: 1, ..Default::default() };
        let (loss, v) = lba_loss(&p, &label, &cfg).unwrap();
        assert_eq!(v.row(0), &[true, false]);
        assert!((loss - (neg_log_07 + beta * neg_log_07)).abs() < 1e-6);
    }
}

#[test]
fn lba_perfect_specialization_is_zero() {
    let p = probs(&[&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]], &[&[0.0, 0.0, 1.0], &[0.0, 1.0, 0.0]]]);
    let labels = [append_auxiliary(0, 2).unwrap(), append_auxiliary(1, 2).unwrap()];
    for beta in [0.0, 0.75, 3.0] {
        let cfg = PenaltyConfig { beta, k: 1, ..Default::default() };
        assert_eq!(lba_loss(&p, &labels, &cfg).unwrap().0, 0.0);
    }
}

#[test]
fn lba_rejects_auxiliary_ground_truth() {
    let p = probs(&[&[&[0.2, 0.3, 0.5], &[0.1, 0.2, 0.7]]]);
    let cfg = PenaltyConfig::default();
    assert!(matches!(lba_loss(&p, &[auxiliary_target(2)], &cfg), Err(Error::Input(_))));
}

#[test]
fn lba_without_penalty_is_assigned_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_probs(&mut rng, 5, 3, 4);
    let classes = [0, 2, 1, 1, 0];
    let labels: Vec<_> = classes.iter().map(|&c| append_auxiliary(c, 3).unwrap()).collect();
    let cfg = PenaltyConfig { beta: 0.0, k: 2, ..Default::default() };
    let (loss, v) = lba_loss(&p, &labels, &cfg).unwrap();
    let mut expect = 0.0;
    for (j, l) in labels.iter().enumerate() {
        for m in 0..3 {
            if v.get(j, m) {
                expect += cross_entropy_onehot(p.get(j, m), &l.to_vec()).unwrap();
            }
        }
    }
    assert!((loss - expect).abs() < 1e-12);
}

#[test]
fn lba_penalty_matches_kl_to_auxiliary() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = random_probs(&mut rng, 4, 3, 3);
    let classes = [0, 1, 1, 0];
    let labels: Vec<_> = classes.iter().map(|&c| append_auxiliary(c, 2).unwrap()).collect();
    let cfg = PenaltyConfig { beta: 0.6, k: 1, ..Default::default() };
    let (loss, v) = lba_loss(&p, &labels, &cfg).unwrap();
    let aux = auxiliary_target(2).to_vec();
    let mut expect = 0.0;
    for (j, l) in labels.iter().enumerate() {
        for m in 0..3 {
            let pm = p.get(j, m);
            expect += if v.get(j, m) {
                cross_entropy_onehot(pm, &l.to_vec()).unwrap()
            } else {
                0.6 * kl_to_onehot(&aux, pm).unwrap()
            };
        }
    }
    assert!((loss - expect).abs() < 1e-12);
}

#[test]
fn counter_bookkeeping() {
    let mut c = AssignmentCounter::new(3, 2);
    let v = Assignment::from_flags(1, 2, 1, vec![false, true]).unwrap();
    c.accumulate(&v, &[2]).unwrap();
    assert_eq!(c.get(2, 1), 1);
    assert_eq!(c.total(), 1);

    let mut c = AssignmentCounter::new(2, 3);
    let v = Assignment::from_flags(1, 3, 2, vec![true, false, true]).unwrap();
    c.accumulate(&v, &[1]).unwrap();
    assert_eq!(c.row(1), &[1, 0, 1]);
    assert_eq!(c.row(0), &[0, 0, 0]);
}

#[test]
fn counter_rows_sum_to_k_times_class_frequency() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (classes_n, members, k) = (4, 5, 2);
    let mut counter = AssignmentCounter::new(classes_n, members);
    let mut seen = vec![0u64; classes_n];
    for _ in 0..20 {
        let batch = 7;
        let p = random_probs(&mut rng, batch, members, classes_n);
        let classes: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes_n)).collect();
        let (_, v) = smcl_loss(&p, &classes, k).unwrap();
        counter.accumulate(&v, &classes).unwrap();
        classes.iter().for_each(|&c| seen[c] += 1);
    }
    for (c, &n) in seen.iter().enumerate() {
        assert_eq!(counter.row(c).iter().sum::<u64>(), k as u64 * n);
    }
}

#[test]
fn accumulate_after_freeze_is_state_error() {
    let mut mem = AssignmentMemory::new(2, 2);
    let v = Assignment::from_flags(2, 2, 1, vec![true, false, false, true]).unwrap();
    mem.counter.accumulate(&v, &[0, 1]).unwrap();
    mem.freeze(1).unwrap();
    assert!(matches!(mem.counter.accumulate(&v, &[0, 1]), Err(Error::State(_))));
    assert!(matches!(mem.freeze(1), Err(Error::State(_))));
}

#[test]
fn freeze_of_empty_counter_is_state_error() {
    let mut mem = AssignmentMemory::new(2, 2);
    assert!(matches!(mem.freeze(1), Err(Error::State(_))));
}

#[test]
fn fix_specialization_examples() {
    let c = AssignmentCounter::from_counts(2, 2, vec![10, 2, 3, 7]).unwrap();
    let w = fix_specialization(&c, 1).unwrap();
    assert_eq!(w.flags(), &[true, false, false, true]);
    let tie = AssignmentCounter::from_counts(1, 2, vec![5, 5]).unwrap();
    assert_eq!(fix_specialization(&tie, 1).unwrap().flags(), &[true, false]);
    let zero = AssignmentCounter::from_counts(1, 3, vec![0, 0, 0]).unwrap();
    assert_eq!(fix_specialization(&zero, 2).unwrap().flags(), &[true, true, false]);
}

#[test]
fn fix_specialization_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..200 {
        let (nc, m) = (rng.random_range(1..6), rng.random_range(1..6));
        let k = rng.random_range(1..=m);
        let counts: Vec<u64> = (0..nc * m).map(|_| rng.random_range(0..6)).collect();
        let c = AssignmentCounter::from_counts(nc, m, counts.clone()).unwrap();
        let w = fix_specialization(&c, k).unwrap();
        for class in 0..nc {
            let mut ranked: Vec<(u64, usize)> = (0..m).map(|i| (counts[class * m + i], i)).collect();
            ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut chosen: Vec<usize> = ranked[..k].iter().map(|r| r.1).collect();
            chosen.sort_unstable();
            let got: Vec<usize> = (0..m).filter(|&i| w.get(class, i)).collect();
            assert_eq!(got, chosen);
        }
        assert_eq!(fix_specialization(&c, k).unwrap(), w);
    }
}

#[test]
fn mba_reads_assignment_from_memory() {
    let w = SpecializationMatrix::from_flags(2, 2, 1, vec![false, true, true, false]).unwrap();
    // Member 0 has the lower loss on class 0, but class 0 belongs to member 1.
    let p = probs(&[&[&[0.9, 0.05, 0.05], &[0.3, 0.2, 0.5]]]);
    let labels = [append_auxiliary(0, 2).unwrap()];
    let gamma = 0.75;
    let cfg = PenaltyConfig { gamma, k: 1, ..Default::default() };
    let plan = mba_plan(&p, &labels, &w, &cfg).unwrap();
    assert_eq!(plan.assignment.row(0), &[false, true]);
    assert_eq!(plan.weights[0], vec![0.0, 0.0, gamma]);
    assert_eq!(plan.weights[1], vec![1.0, 0.0, 0.0]);
    let expect = -(0.3f64).ln() + gamma * -(0.05f64).ln();
    assert!((plan.value - expect).abs() < 1e-12);
    assert!((mba_loss(&p, &labels, Some(&w), &cfg).unwrap() - expect).abs() < 1e-12);
    assert!(matches!(mba_loss(&p, &labels, None, &cfg), Err(Error::State(_))));
}

#[test]
fn cmcl_examples() {
    let p = probs(&[&[&[0.9, 0.1], &[0.5, 0.5]]]);
    let cfg = PenaltyConfig { beta: 0.75, k: 1, ..Default::default() };
    let (loss, v) = cmcl_loss(&p, &[0], &cfg).unwrap();
    assert_eq!(v.row(0), &[true, false]);
    assert!((loss - -(0.9f64).ln()).abs() < 1e-12);

    let p = probs(&[&[&[0.9, 0.1], &[0.75, 0.25]]]);
    for beta in [0.0, 0.75, 1.5] {
        let cfg = PenaltyConfig { beta, k: 1, ..Default::default() };
        let (loss, _) = cmcl_loss(&p, &[0], &cfg).unwrap();
        let penalty = loss - -(0.9f64).ln();
        assert!((penalty - beta * 0.143841).abs() < 1e-6);
        assert!((penalty - beta * kl_uniform_to(&[0.75, 0.25]).unwrap()).abs() < 1e-12);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = random_probs(&mut rng, 6, 3, 3);
    let classes = [0, 1, 2, 2, 1, 0];
    let off = PenaltyConfig { beta: 0.0, k: 1, ..Default::default() };
    assert_eq!(cmcl_loss(&p, &classes, &off).unwrap().0, smcl_loss(&p, &classes, 1).unwrap().0);
}

#[test]
fn amcl_dispatch_boundary() {
    let cfg = PenaltyConfig { t_tau: 3, k: 1, ..Default::default() };
    let p = probs(&[&[&[0.6, 0.3, 0.1], &[0.2, 0.2, 0.6]]]);
    let labels = [append_auxiliary(1, 2).unwrap()];
    let mut mem = AssignmentMemory::new(2, 2);
    let lba = amcl_objective(3, &p, &labels, &mem, &cfg).unwrap();
    assert_eq!(lba, lba_plan(&p, &labels, &cfg).unwrap());
    assert!(matches!(amcl_objective(4, &p, &labels, &mem, &cfg), Err(Error::State(_))));

    mem.counter.accumulate(&Assignment::from_flags(2, 2, 1, vec![true, false, false, true]).unwrap(), &[0, 1]).unwrap();
    let w = mem.freeze(1).unwrap().clone();
    let mba = amcl_objective(4, &p, &labels, &mem, &cfg).unwrap();
    assert_eq!(mba, mba_plan(&p, &labels, &w, &cfg).unwrap());
}

#[test]
fn zero_threshold_is_rejected() {
    let amcl = AuxiliaryMcl { penalty: PenaltyConfig { t_tau: 0, ..Default::default() } };
    assert!(matches!(amcl.validate(2, 5), Err(Error::State(_))));
    let cfg = PenaltyConfig { t_tau: 0, ..Default::default() };
    let p = probs(&[&[&[0.6, 0.3, 0.1], &[0.2, 0.2, 0.6]]]);
    let labels = [append_auxiliary(1, 2).unwrap()];
    let mem = AssignmentMemory::new(2, 2);
    assert!(matches!(amcl_objective(1, &p, &labels, &mem, &cfg), Err(Error::State(_))));
}

#[test]
fn registry_lookup() {
    let r = ObjectiveRegistry::with_builtin();
    assert_eq!(r.names(), vec!["amcl", "cmcl", "ie", "smcl"]);
    let cfg = PenaltyConfig::default();
    assert!(r.create("amcl", &cfg).unwrap().uses_auxiliary());
    assert!(!r.create("cmcl", &cfg).unwrap().uses_auxiliary());
    assert!(matches!(r.create("vmcl", &cfg), Err(Error::Config(_))));
}

fn full_overlap_losses(p_aux: &ProbBatch, p_plain: &ProbBatch, classes: &[usize]) -> [f64; 4] {
    let m = p_aux.members();
    let cfg = PenaltyConfig { beta: 0.0, gamma: 0.0, k: m, t_tau: 1 };
    let labels: Vec<_> = classes.iter().map(|&c| append_auxiliary(c, p_aux.width() - 1).unwrap()).collect();
    let w = SpecializationMatrix::from_flags(p_aux.width() - 1, m, m, vec![true; (p_aux.width() - 1) * m]).unwrap();
    let ie_aux = ie_plan(p_aux, classes).unwrap().value;
    [
        smcl_loss(p_plain, classes, m).unwrap().0 - ie_plan(p_plain, classes).unwrap().value,
        lba_loss(p_aux, &labels, &cfg).unwrap().0 - ie_aux,
        mba_loss(p_aux, &labels, Some(&w), &cfg).unwrap() - ie_aux,
        cmcl_loss(p_plain, classes, &cfg).unwrap().0 - ie_plan(p_plain, classes).unwrap().value,
    ]
}

#[test]
fn full_overlap_reduces_to_independent_ensemble() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..100 {
        let (b, m, nc) = (rng.random_range(1..9), rng.random_range(1..5), rng.random_range(2..5));
        let p_aux = random_probs(&mut rng, b, m, nc + 1);
        let p_plain = random_probs(&mut rng, b, m, nc);
        let classes: Vec<usize> = (0..b).map(|_| rng.random_range(0..nc)).collect();
        for d in full_overlap_losses(&p_aux, &p_plain, &classes) {
            assert!(d.abs() <= 1e-9);
        }
    }
}

proptest! {
    #[test]
    fn assignments_always_have_k_ones(
        data in proptest::collection::vec(0.0f64..10.0, 1..60),
        members in 1usize..7,
        k_seed in 0usize..100,
    ) {
        let rows = data.len() / members;
        prop_assume!(rows > 0);
        let l = LossMatrix::new(rows, members, data[..rows * members].to_vec()).unwrap();
        let k = 1 + k_seed % members;
        let v = assign_top_k(&l, k).unwrap();
        for j in 0..rows {
            prop_assert_eq!(v.row(j).iter().filter(|&&f| f).count(), k);
        }
    }

    #[test]
    fn frozen_assignment_depends_only_on_class(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nc, m) = (3, 3);
        let k = rng.random_range(1..=m);
        let counts: Vec<u64> = (0..nc * m).map(|_| rng.random_range(0..20)).collect();
        let w = fix_specialization(&AssignmentCounter::from_counts(nc, m, counts).unwrap(), k).unwrap();
        let cfg = PenaltyConfig { k, ..Default::default() };
        let classes: Vec<usize> = (0..8).map(|_| rng.random_range(0..nc)).collect();
        let labels: Vec<_> = classes.iter().map(|&c| append_auxiliary(c, nc).unwrap()).collect();
        let a = mba_plan(&random_probs(&mut rng, 8, m, nc + 1), &labels, &w, &cfg).unwrap();
        let b = mba_plan(&random_probs(&mut rng, 8, m, nc + 1), &labels, &w, &cfg).unwrap();
        prop_assert_eq!(&a.assignment, &b.assignment);
        for (j, &c) in classes.iter().enumerate() {
            prop_assert_eq!(a.assignment.row(j), w.row(c));
        }
    }
}
