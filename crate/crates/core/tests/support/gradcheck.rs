//! Central finite-difference gradient checks shared by the core and
//! acceptance test suites.

use amcl_core::autodiff::{row_softmax, Graph, NodeId, ParamStore, Tensor};
use amcl_core::objective::{EnsembleObjective, ProbBatch};
use amcl_core::trainer::{compute_gradients, EnsembleState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Below this magnitude on both sides the absolute difference is used.
const FLOOR: f64 = 1e-7;
const KINK: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
    /// Entries whose step straddled a relu or maxpool switch.
    pub skipped: usize,
    /// Entry with the largest error, as `tensor[index]`.
    pub worst: String,
}

impl GradReport {
    fn record(&mut self, err: f64, label: impl FnOnce() -> String) {
        if err > self.max_rel {
            self.max_rel = err;
            self.worst = label();
        }
        self.checked += 1;
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel <= TOLERANCE && self.skipped * 20 <= self.checked + self.skipped
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < FLOOR {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so relu kinks sit far from the step.
pub fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Fixed random linear read-out to a scalar: `sum(r * x)`.
pub fn probe(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
    let n: usize = g.shape(x).iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = g.reshape(x, vec![1, n]).unwrap();
    let w = g.input(random_tensor(&mut rng, &[1, n], -1.0, 1.0)).unwrap();
    let b = g.input(Tensor::zeros(&[1])).unwrap();
    let y = g.dense(flat, w, b).unwrap();
    g.sum(y).unwrap()
}

fn sample_indices(n: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Checks d(build)/d(inputs) for a scalar-valued graph builder.
pub fn check_graph<F>(name: &str, inputs: Vec<Tensor>, build: F) -> GradReport
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let mut store = ParamStore::new();
    for (i, t) in inputs.into_iter().enumerate() {
        store.push(format!("in{i}"), t);
    }
    let eval = |store: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = (0..store.len()).map(|i| g.param(0, store, i).unwrap()).collect();
        let out = build(&mut g, &ids);
        g.value(out).data()[0]
    };
    {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = (0..store.len()).map(|i| g.param(0, &store, i).unwrap()).collect();
        let out = build(&mut g, &ids);
        g.backward(out, &mut [&mut store]).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut report = GradReport { name: name.into(), checked: 0, max_rel: 0.0, skipped: 0, worst: String::new() };
    for i in 0..store.len() {
        let analytic = store.get(i).grad().expect("gradient").to_vec();
        for k in sample_indices(analytic.len(), 60, &mut rng) {
            let orig = store.get(i).data()[k];
            store.get_mut(i).data_mut()[k] = orig + STEP;
            let up = eval(&store);
            store.get_mut(i).data_mut()[k] = orig - STEP;
            let down = eval(&store);
            store.get_mut(i).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            report.record(rel_err(analytic[k], numeric), || format!("{}[{k}] {} vs {numeric}", store.name(i), analytic[k]));
        }
    }
    report
}

/// Objective value per example, exactly as the trainer differentiates it.
fn batch_objective(
    state: &EnsembleState,
    objective: &dyn EnsembleObjective,
    x: &Tensor,
    classes: &[usize],
    epoch: usize,
) -> f64 {
    let mut g = Graph::new();
    let logits = state.forward(&mut g, x, None).unwrap();
    let per: Vec<Vec<f64>> = logits.iter().map(|&id| row_softmax(g.value(id))).collect();
    let probs = ProbBatch::from_members(&per, state.arch.output_dim()).unwrap();
    objective.plan(&probs, classes, epoch, &state.memory).unwrap().value / classes.len() as f64
}

/// Checks the trainer's gradients of a full ensemble objective against
/// finite differences of the objective value.
pub fn check_objective(
    name: &str,
    state: &mut EnsembleState,
    objective: &dyn EnsembleObjective,
    x: &Tensor,
    classes: &[usize],
    epoch: usize,
    per_tensor: usize,
) -> GradReport {
    state.stores_mut().into_iter().for_each(|s| s.tensors_mut().for_each(Tensor::clear_grad));
    compute_gradients(state, objective, x, classes, epoch, None).unwrap();
    let analytic: Vec<Vec<Vec<f64>>> = state
        .stores()
        .iter()
        .map(|s| s.iter().map(|(_, t)| t.grad().expect("gradient").to_vec()).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut report = GradReport { name: name.into(), checked: 0, max_rel: 0.0, skipped: 0, worst: String::new() };
    for (s, tensors) in analytic.iter().enumerate() {
        for (i, grad) in tensors.iter().enumerate() {
            for k in sample_indices(grad.len(), per_tensor, &mut rng) {
                let orig = state.stores()[s].get(i).data()[k];
                let centre = batch_objective(state, objective, x, classes, epoch);
                state.stores_mut()[s].get_mut(i).data_mut()[k] = orig + STEP;
                let up = batch_objective(state, objective, x, classes, epoch);
                state.stores_mut()[s].get_mut(i).data_mut()[k] = orig - STEP;
                let down = batch_objective(state, objective, x, classes, epoch);
                state.stores_mut()[s].get_mut(i).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                // One-sided slopes disagree only when the step crosses a kink.
                let (fwd, bwd) = ((up - centre) / STEP, (centre - down) / STEP);
                if (fwd - bwd).abs() > KINK * fwd.abs().max(bwd.abs()).max(FLOOR) {
                    report.skipped += 1;
                    continue;
                }
                let label = || format!("store{s}/{}[{k}] {} vs {numeric}", state.stores()[s].name(i), grad[k]);
                report.record(rel_err(grad[k], numeric), label);
            }
        }
    }
    report
}

/// Every differentiable op on a random small instance.
pub fn op_reports(seed: u64) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let r = &mut rng;

    out.push(check_graph(
        "dense",
        vec![random_tensor(r, &[3, 4], -1.0, 1.0), random_tensor(r, &[5, 4], -1.0, 1.0), random_tensor(r, &[5], -1.0, 1.0)],
        |g, p| {
            let y = g.dense(p[0], p[1], p[2]).unwrap();
            probe(g, y, 1)
        },
    ));
    for (name, k, cin, cout, hw) in [("conv2d_3x3", 3, 2, 3, 5), ("conv2d_1x1", 1, 2, 3, 5), ("conv2d_wide", 1, 48, 16, 8)] {
        out.push(check_graph(
            name,
            vec![
                random_tensor(r, &[2, cin, hw, hw], -1.0, 1.0),
                random_tensor(r, &[cout, cin, k, k], -1.0, 1.0),
                random_tensor(r, &[cout], -1.0, 1.0),
            ],
            |g, p| {
                let y = g.conv2d(p[0], p[1], p[2]).unwrap();
                probe(g, y, 2)
            },
        ));
    }
    out.push(check_graph("relu", vec![off_zero(r, &[4, 5])], |g, p| {
        let y = g.relu(p[0]).unwrap();
        probe(g, y, 3)
    }));
    out.push(check_graph("sigmoid", vec![random_tensor(r, &[4, 5], -3.0, 3.0)], |g, p| {
        let y = g.sigmoid(p[0]).unwrap();
        probe(g, y, 4)
    }));
    let mut pool_in = random_tensor(r, &[2, 2, 4, 4], 0.0, 1.0);
    for (i, v) in pool_in.data_mut().iter_mut().enumerate() {
        *v += 0.01 * i as f64;
    }
    out.push(check_graph("maxpool2x2", vec![pool_in], |g, p| {
        let y = g.maxpool2x2(p[0]).unwrap();
        probe(g, y, 5)
    }));
    for axis in [0, 1] {
        out.push(check_graph(&format!("softmax_axis{axis}"), vec![random_tensor(r, &[3, 4], -2.0, 2.0)], move |g, p| {
            let y = g.softmax(p[0], axis).unwrap();
            probe(g, y, 6)
        }));
    }
    out.push(check_graph(
        "concat",
        vec![random_tensor(r, &[2, 3, 4, 4], -1.0, 1.0), random_tensor(r, &[2, 2, 4, 4], -1.0, 1.0)],
        |g, p| {
            let y = g.concat(&[p[0], p[1]]).unwrap();
            probe(g, y, 7)
        },
    ));
    out.push(check_graph("global_avg_pool", vec![random_tensor(r, &[2, 3, 4, 4], -1.0, 1.0)], |g, p| {
        let y = g.global_avg_pool(p[0]).unwrap();
        probe(g, y, 8)
    }));
    out.push(check_graph(
        "channel_scale",
        vec![random_tensor(r, &[2, 3, 4, 4], -1.0, 1.0), random_tensor(r, &[2, 3], 0.0, 1.0)],
        |g, p| {
            let y = g.channel_scale(p[0], p[1]).unwrap();
            probe(g, y, 9)
        },
    ));
    out.push(check_graph(
        "add_scale",
        vec![random_tensor(r, &[3, 4], -1.0, 1.0), random_tensor(r, &[3, 4], -1.0, 1.0)],
        |g, p| {
            let s = g.scale(p[1], -0.7).unwrap();
            let y = g.add(p[0], s).unwrap();
            probe(g, y, 10)
        },
    ));
    out.push(check_graph("reshape_flatten_sum", vec![random_tensor(r, &[2, 3, 2, 2], -1.0, 1.0)], |g, p| {
        let a = g.reshape(p[0], vec![6, 4]).unwrap();
        let b = g.flatten(a).unwrap();
        let s = g.sum(b).unwrap();
        let q = probe(g, b, 11);
        g.add(s, q).unwrap()
    }));
    out.push(check_graph(
        "row_mix",
        vec![
            random_tensor(r, &[4, 5], -1.0, 1.0),
            random_tensor(r, &[4, 5], -1.0, 1.0),
            random_tensor(r, &[4, 5], -1.0, 1.0),
        ],
        |g, p| {
            let y = g.row_mix(&[p[0], p[1], p[2]], &[2, 0, 0, 1]).unwrap();
            probe(g, y, 12)
        },
    ));
    out.push(check_graph(
        "gated_fusion",
        vec![
            random_tensor(r, &[2, 4, 4, 4], -1.0, 1.0),
            random_tensor(r, &[2, 4, 4, 4], -1.0, 1.0),
            random_tensor(r, &[4, 8, 1, 1], -1.0, 1.0),
            random_tensor(r, &[4], -1.0, 1.0),
            random_tensor(r, &[2, 4], -1.0, 1.0),
            random_tensor(r, &[2], 0.1, 1.0),
            random_tensor(r, &[4, 2], -1.0, 1.0),
            random_tensor(r, &[4], -1.0, 1.0),
        ],
        |g, p| {
            let cat = g.concat(&[p[0], p[1]]).unwrap();
            let proj = g.conv2d(cat, p[2], p[3]).unwrap();
            let sq = g.global_avg_pool(proj).unwrap();
            let h = g.dense(sq, p[4], p[5]).unwrap();
            let h = g.relu(h).unwrap();
            let h = g.dense(h, p[6], p[7]).unwrap();
            let gate = g.sigmoid(h).unwrap();
            let fused = g.channel_scale(proj, gate).unwrap();
            let own = g.scale(p[0], 0.5).unwrap();
            let a = g.add(fused, own).unwrap();
            let b = g.add(fused, p[1]).unwrap();
            let pa = probe(g, a, 13);
            let pb = probe(g, b, 14);
            g.add(pa, pb).unwrap()
        },
    ));
    let weights: Vec<f64> = (0..12).map(|_| r.random_range(0.0..1.0)).collect();
    out.push(check_graph("weighted_nll", vec![random_tensor(r, &[4, 3], -2.0, 2.0)], move |g, p| {
        g.weighted_nll(p[0], weights.clone()).unwrap()
    }));
    out
}

/// Loss-based and memory-based objectives through small ensembles, with and
/// without the fusion module.
/// Nudges every parameter off its initial value. The averaging fusion init and
/// zero biases leave exact maxpool ties, where the loss is not differentiable.
pub fn jitter(state: &mut EnsembleState, rng: &mut ChaCha8Rng) {
    for store in state.stores_mut() {
        for i in 0..store.len() {
            store.get_mut(i).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
        }
    }
}

pub fn objective_reports(seed: u64) -> Vec<GradReport> {
    use amcl_core::data::{generate_blobs, generate_images, DatasetSpec};
    use amcl_core::model::ArchKind;
    use amcl_core::objective::{
        AssignmentCounter, AssignmentMemory, ObjectiveRegistry, PenaltyConfig, SpecializationMatrix,
    };
    use amcl_core::trainer::{FusionKind, TrainConfig};

    let registry = ObjectiveRegistry::with_builtin();
    let penalty = PenaltyConfig { beta: 0.75, gamma: 0.6, k: 1, t_tau: 2 };
    let mut out = Vec::new();
    let blobs = generate_blobs(&DatasetSpec::blobs(3, 2, 4, 2.0, seed)).unwrap();
    let mut images = generate_images(&DatasetSpec::images(2, 2, 8, 0.1, seed)).unwrap();
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        images.inputs.data_mut().iter_mut().for_each(|v| *v += rng.random_range(0.0..0.5));
    }
    let cases = [
        ("mlp", ArchKind::Mlp, FusionKind::None, &blobs, 40),
        ("mlp_fusion", ArchKind::Mlp, FusionKind::Module, &blobs, 40),
        ("cnn", ArchKind::SimpleCnn, FusionKind::None, &images, 6),
        ("cnn_fusion", ArchKind::SimpleCnn, FusionKind::Module, &images, 6),
    ];
    for (tag, arch, fusion, ds, per_tensor) in cases {
        let nc = ds.num_classes;
        let members = 3;
        let idx: Vec<usize> = (0..ds.len()).collect();
        let x = ds.batch(&idx).unwrap();
        let classes = ds.labels_of(&idx);
        let cfg = TrainConfig {
            method: "amcl".into(),
            members,
            seed,
            arch,
            hidden: [6, 5],
            fusion,
            penalty,
            ..Default::default()
        };
        let amcl = registry.create("amcl", &penalty).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut state = EnsembleState::new(&cfg, ds.example_shape(), nc, true).unwrap();
        jitter(&mut state, &mut rng);
        out.push(check_objective(&format!("lba_{tag}"), &mut state, amcl.as_ref(), &x, &classes, 1, per_tensor));

        let flags: Vec<bool> = (0..nc * members).map(|i| i % members == (i / members) % members).collect();
        let w = SpecializationMatrix::from_flags(nc, members, 1, flags).unwrap();
        state.memory = AssignmentMemory::restore(AssignmentCounter::new(nc, members), Some(w));
        out.push(check_objective(&format!("mba_{tag}"), &mut state, amcl.as_ref(), &x, &classes, 3, per_tensor));

        for method in ["cmcl", "smcl", "ie"] {
            let obj = registry.create(method, &penalty).unwrap();
            let mut plain = EnsembleState::new(&cfg, ds.example_shape(), nc, false).unwrap();
            jitter(&mut plain, &mut rng);
            out.push(check_objective(&format!("{method}_{tag}"), &mut plain, obj.as_ref(), &x, &classes, 1, per_tensor));
        }
    }
    out
}
