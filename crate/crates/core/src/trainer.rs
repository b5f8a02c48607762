//! Ensemble training loops for every registered objective.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::prob::argmax;
use crate::autodiff::{row_softmax, sgd_step, Graph, MomentumBuffers, NodeId, ParamStore, SgdConfig, Tensor};
use crate::data::LabeledDataset;
use crate::error::{self, config, Error, Result};
use crate::eval::{oracle_error, top1_error, CountSnapshot, Predictions};
use crate::fusion::{FusionConfig, FusionModule, SharePlan};
use crate::model::{build_member, ArchKind, ArchitectureSpec, MemberModel};
use crate::objective::{
    AssignmentMemory, EnsembleObjective, ObjectivePlan, ObjectiveRegistry, PenaltyConfig, Phase, ProbBatch,
    SpecializationMatrix,
};

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    None,
    Module,
    Share,
}

impl FusionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::None => "none",
            FusionKind::Module => "module",
            FusionKind::Share => "share",
        }
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionKind::None),
            "module" | "fusion_module" => Ok(FusionKind::Module),
            "share" | "feature_share" => Ok(FusionKind::Share),
            other => config(format!("unknown fusion '{other}' (none, module, share)")),
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: String,
    pub members: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
    /// Also carries the overlap `k` and the threshold epoch `t_tau`.
    pub penalty: PenaltyConfig,
    pub fusion: FusionKind,
    pub fusion_cfg: FusionConfig,
    pub arch: ArchKind,
    /// Hidden widths when `arch` is the MLP.
    pub hidden: [usize; 2],
    /// Expected class count; checked against the dataset when set.
    pub num_classes: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: "amcl".into(),
            members: 2,
            epochs: 40,
            batch_size: 64,
            seed: 0,
            sgd: SgdConfig::default(),
            penalty: PenaltyConfig::default(),
            fusion: FusionKind::None,
            fusion_cfg: FusionConfig::default(),
            arch: ArchKind::SimpleCnn,
            hidden: [32, 32],
            num_classes: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, registry: &ObjectiveRegistry) -> Result<()> {
        if self.members == 0 {
            return config("an ensemble needs at least one member");
        }
        if self.epochs == 0 {
            return config("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return config("batch size must be at least 1");
        }
        self.penalty.validate(self.members)?;
        self.sgd.validate()?;
        self.fusion_cfg.validate()?;
        registry.create(&self.method, &self.penalty)?.validate(self.members, self.epochs)
    }

    pub fn architecture(&self, input_shape: &[usize], num_classes: usize, auxiliary: bool) -> ArchitectureSpec {
        let spec = match self.arch {
            ArchKind::SimpleCnn => ArchitectureSpec::simple_cnn(input_shape.to_vec(), num_classes),
            ArchKind::Mlp => ArchitectureSpec::mlp(input_shape.to_vec(), self.hidden, num_classes),
        };
        spec.with_auxiliary(auxiliary)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FusionState {
    None,
    Module(FusionModule),
    /// Feature sharing during training only.
    Share { p_share: f64 },
}

impl FusionState {
    pub fn kind(&self) -> FusionKind {
        match self {
            FusionState::None => FusionKind::None,
            FusionState::Module(_) => FusionKind::Module,
            FusionState::Share { .. } => FusionKind::Share,
        }
    }
}

/// Members, shared fusion parameters, optimizer state and assignment memory.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleState {
    pub method: String,
    pub arch: ArchitectureSpec,
    pub members: Vec<MemberModel>,
    pub fusion: FusionState,
    pub penalty: PenaltyConfig,
    pub memory: AssignmentMemory,
    /// One buffer set per member, then one for the fusion module if present.
    pub momentum: Vec<MomentumBuffers>,
    pub epochs_completed: usize,
}

impl EnsembleState {
    pub fn new(cfg: &TrainConfig, input_shape: &[usize], num_classes: usize, auxiliary: bool) -> Result<Self> {
        let arch = cfg.architecture(input_shape, num_classes, auxiliary);
        arch.validate()?;
        let members = (0..cfg.members).map(|m| build_member(&arch, m, cfg.seed)).collect::<Result<Vec<_>>>()?;
        let fusion = match cfg.fusion {
            FusionKind::None => FusionState::None,
            FusionKind::Module => FusionState::Module(FusionModule::new(&arch, cfg.members, &cfg.fusion_cfg, cfg.seed)?),
            FusionKind::Share => FusionState::Share { p_share: cfg.fusion_cfg.p_share },
        };
        let mut state = Self {
            method: cfg.method.clone(),
            arch,
            members,
            fusion,
            penalty: cfg.penalty,
            memory: AssignmentMemory::new(num_classes, cfg.members),
            momentum: Vec::new(),
            epochs_completed: 0,
        };
        state.momentum = state.stores().iter().map(|s| MomentumBuffers::for_store(s)).collect();
        Ok(state)
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn auxiliary(&self) -> bool {
        self.arch.auxiliary
    }

    pub fn specialization(&self) -> Option<&SpecializationMatrix> {
        self.memory.specialization()
    }

    /// Parameter stores in graph-tag order.
    pub fn stores(&self) -> Vec<&ParamStore> {
        let mut v: Vec<&ParamStore> = self.members.iter().map(|m| &m.params).collect();
        if let FusionState::Module(f) = &self.fusion {
            v.push(&f.params);
        }
        v
    }

    pub fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let mut v: Vec<&mut ParamStore> = self.members.iter_mut().map(|m| &mut m.params).collect();
        if let FusionState::Module(f) = &mut self.fusion {
            v.push(&mut f.params);
        }
        v
    }

    /// Builds every member's logits for one batch.
    pub fn forward(&self, graph: &mut Graph, x: &Tensor, share: Option<&SharePlan>) -> Result<Vec<NodeId>> {
        let input = graph.input(x.clone())?;
        let bound = self.members.iter().enumerate().map(|(m, mm)| mm.bind(graph, m)).collect::<Result<Vec<_>>>()?;
        let taps = self
            .members
            .iter()
            .zip(&bound)
            .map(|(mm, b)| mm.forward_tap(graph, b, input))
            .collect::<Result<Vec<_>>>()?;
        let heads_in = match (&self.fusion, share) {
            (FusionState::Module(f), _) => {
                let bf = f.bind(graph, self.members.len())?;
                f.apply(graph, &bf, &taps)?.per_member
            }
            (FusionState::Share { .. }, Some(plan)) => plan.apply(graph, &taps)?,
            _ => taps,
        };
        self.members
            .iter()
            .zip(&bound)
            .zip(heads_in)
            .map(|((mm, b), h)| mm.forward_head(graph, b, h))
            .collect()
    }

    /// Member probabilities over a whole input tensor, evaluated in chunks.
    pub fn predict(&self, inputs: &Tensor) -> Result<Predictions> {
        let n = inputs.shape()[0];
        let per = inputs.numel() / n;
        let width = self.arch.output_dim();
        let mut out = vec![Vec::with_capacity(n * width); self.members.len()];
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let mut shape = inputs.shape().to_vec();
            shape[0] = end - start;
            let x = Tensor::new(shape, inputs.data()[start * per..end * per].to_vec())?;
            let mut g = Graph::new();
            let logits = self.forward(&mut g, &x, None)?;
            for (m, id) in logits.into_iter().enumerate() {
                out[m].extend(row_softmax(g.value(id)));
            }
            start = end;
        }
        let members = out.into_iter().map(|d| Tensor::new(vec![n, width], d)).collect::<Result<Vec<_>>>()?;
        Predictions::new(members, self.num_classes(), self.auxiliary())
    }
}

/// Outcome of one forward/backward pass, before the optimizer step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub plan: ObjectivePlan,
    pub probs: ProbBatch,
}

/// Forward pass, objective plan and backward pass for one batch. Gradients
/// of the batch-mean loss are added into the state's parameter stores.
pub fn compute_gradients(
    state: &mut EnsembleState,
    objective: &dyn EnsembleObjective,
    x: &Tensor,
    classes: &[usize],
    epoch: usize,
    share: Option<&SharePlan>,
) -> Result<StepOutput> {
    let batch = classes.len();
    if x.shape()[0] != batch {
        return config("batch inputs and labels differ in length");
    }
    let mut g = Graph::new();
    let logits = state.forward(&mut g, x, share)?;
    let width = state.arch.output_dim();
    let per_member: Vec<Vec<f64>> = logits.iter().map(|&id| row_softmax(g.value(id))).collect();
    let probs = ProbBatch::from_members(&per_member, width)?;
    let plan = objective.plan(&probs, classes, epoch, &state.memory)?;
    if !plan.value.is_finite() {
        let member_losses: Vec<f64> = logits
            .iter()
            .map(|&id| g.value(id).data().iter().fold(0.0f64, |a, v| a.max(v.abs())))
            .collect();
        return Err(Error::Numeric(format!(
            "non-finite loss {} at epoch {epoch} (method {}, batch {batch}, max |logit| per member {member_losses:?})",
            plan.value, state.method
        )));
    }
    let mut total = None;
    for (m, &id) in logits.iter().enumerate() {
        let l = g.weighted_nll(id, plan.weights[m].clone())?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let loss = g.scale(total.expect("at least one member"), 1.0 / batch as f64)?;
    let mut stores = state.stores_mut();
    g.backward(loss, &mut stores)?;
    Ok(StepOutput { plan, probs })
}

/// Applies one momentum SGD step to every parameter store.
pub fn apply_sgd(state: &mut EnsembleState, cfg: &SgdConfig) -> Result<()> {
    let mut momentum = std::mem::take(&mut state.momentum);
    let result = state.stores_mut().into_iter().zip(momentum.iter_mut()).try_for_each(|(s, b)| sgd_step(s, b, cfg));
    state.momentum = momentum;
    result
}

/// Hard-codes the specialization from the accumulated counts.
pub fn freeze_specialization(state: &mut EnsembleState) -> Result<&SpecializationMatrix> {
    if state.memory.counter.epochs_accumulated < state.penalty.t_tau {
        return error::state(format!(
            "specialization frozen after {} of {} counting epochs",
            state.memory.counter.epochs_accumulated, state.penalty.t_tau
        ));
    }
    state.memory.freeze(state.penalty.k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean per-example objective value over the epoch.
    pub loss: f64,
    /// Errors of the predictions made during the epoch's training steps.
    pub oracle_error: f64,
    pub top1_error: f64,
    /// Ground-truth assignments made during this epoch.
    pub snapshot: CountSnapshot,
    /// Steps whose assignment disagreed with the frozen specialization.
    pub purity_violations: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn snapshots(&self) -> Vec<CountSnapshot> {
        self.records.iter().map(|r| r.snapshot.clone()).collect()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use crate::eval::fmt_f;
        let mut w = csv::Writer::from_path(path)?;
        let members = self.records.first().map_or(0, |r| r.snapshot.members);
        let classes = self.records.first().map_or(0, |r| r.snapshot.num_classes);
        let mut header = vec!["epoch".to_string(), "phase".into(), "loss".into(), "oracle_error".into(), "top1_error".into()];
        for c in 0..classes {
            for m in 0..members {
                header.push(format!("count_c{c}_m{m}"));
            }
        }
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                r.phase.as_str().to_string(),
                fmt_f(r.loss),
                fmt_f(r.oracle_error),
                fmt_f(r.top1_error),
            ];
            row.extend(r.snapshot.counts.iter().map(u64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the per-epoch count snapshots back from a file written by [`TrainLog::write_csv`].
    pub fn read_snapshots(path: &std::path::Path) -> Result<Vec<CountSnapshot>> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let mut shape = (0, 0);
        for h in header.iter().skip(5) {
            let parsed = h
                .strip_prefix("count_c")
                .and_then(|rest| rest.split_once("_m"))
                .and_then(|(c, m)| Some((c.parse::<usize>().ok()?, m.parse::<usize>().ok()?)));
            let Some((c, m)) = parsed else {
                return Err(Error::Input(format!("{}: unexpected column '{h}'", path.display())));
            };
            shape = (shape.0.max(c + 1), shape.1.max(m + 1));
        }
        let (num_classes, members) = shape;
        if header.len() != 5 + num_classes * members {
            return Err(Error::Input(format!("{}: incomplete count columns", path.display())));
        }
        let bad = |what: &str| Error::Input(format!("{}: bad {what}", path.display()));
        let mut out = Vec::new();
        for row in r.records() {
            let row = row?;
            let counts = row.iter().skip(5).map(|v| v.parse::<u64>().map_err(|_| bad("count"))).collect::<Result<_>>()?;
            out.push(CountSnapshot {
                epoch: row[0].parse().map_err(|_| bad("epoch"))?,
                phase: row[1].to_string(),
                num_classes,
                members,
                counts,
            });
        }
        Ok(out)
    }
}

pub fn train(dataset: &LabeledDataset, cfg: &TrainConfig) -> Result<(EnsembleState, TrainLog)> {
    train_with(dataset, cfg, &ObjectiveRegistry::with_builtin(), |_, _| Ok(()))
}

/// Trains with a custom registry and a hook called after every epoch.
pub fn train_with<F>(
    dataset: &LabeledDataset,
    cfg: &TrainConfig,
    registry: &ObjectiveRegistry,
    mut hook: F,
) -> Result<(EnsembleState, TrainLog)>
where
    F: FnMut(&EnsembleState, &EpochRecord) -> Result<()>,
{
    cfg.validate(registry)?;
    if let Some(nc) = cfg.num_classes {
        if nc != dataset.num_classes {
            return config(format!("dataset has {} classes, configuration expects {nc}", dataset.num_classes));
        }
    }
    if dataset.num_classes < 2 {
        return config("training needs at least 2 classes");
    }
    if dataset.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let objective = registry.create(&cfg.method, &cfg.penalty)?;
    let mut state = EnsembleState::new(cfg, dataset.example_shape(), dataset.num_classes, objective.uses_auxiliary())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainLog::default();
    let (nc, members) = (dataset.num_classes, cfg.members);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let phase = objective.phase(epoch);
        let mut counts = vec![0u64; nc * members];
        let mut loss_sum = 0.0;
        let mut violations = 0;
        let mut member_argmax = Vec::with_capacity(dataset.len());
        let mut ensemble_argmax = Vec::with_capacity(dataset.len());
        let mut seen = Vec::with_capacity(dataset.len());

        for idx in order.chunks(cfg.batch_size) {
            let x = dataset.batch(idx)?;
            let classes = dataset.labels_of(idx);
            let share = match state.fusion {
                FusionState::Share { p_share } => Some(SharePlan::draw(members, idx.len(), p_share, &mut rng)),
                _ => None,
            };
            let out = compute_gradients(&mut state, objective.as_ref(), &x, &classes, epoch, share.as_ref())?;
            apply_sgd(&mut state, &cfg.sgd)?;
            objective.record(&out.plan, &classes, epoch, &mut state.memory)?;

            let w = if phase == Phase::MemoryBased { state.memory.specialization() } else { None };
            for (j, &y) in classes.iter().enumerate() {
                let row = out.plan.assignment.row(j);
                for (m, &on) in row.iter().enumerate() {
                    counts[y * members + m] += on as u64;
                }
                if let Some(w) = w {
                    violations += (row != w.row(y)) as usize;
                }
                let stripped: Vec<&[f64]> = (0..members).map(|m| &out.probs.get(j, m)[..nc]).collect();
                member_argmax.push(stripped.iter().map(|p| argmax(p)).collect::<Vec<_>>());
                let mut avg = vec![0.0; nc];
                stripped.iter().for_each(|p| avg.iter_mut().zip(p.iter()).for_each(|(a, v)| *a += v));
                ensemble_argmax.push(argmax(&avg));
            }
            seen.extend_from_slice(&classes);
            loss_sum += out.plan.value;
        }
        if violations > 0 {
            return error::state(format!("{violations} assignments in epoch {epoch} disagree with the frozen specialization"));
        }
        objective.end_epoch(epoch, &mut state.memory)?;
        state.epochs_completed = epoch;

        let record = EpochRecord {
            epoch,
            phase,
            loss: loss_sum / dataset.len() as f64,
            oracle_error: oracle_error(&member_argmax, &seen)?,
            top1_error: top1_error(&ensemble_argmax, &seen)?,
            snapshot: CountSnapshot { epoch, phase: phase.as_str().into(), num_classes: nc, members, counts },
            purity_violations: violations,
        };
        log::info!(
            "epoch {epoch} [{phase}] loss {:.4} oracle {:.2}% top-1 {:.2}%",
            record.loss,
            record.oracle_error,
            record.top1_error
        );
        hook(&state, &record)?;
        log.records.push(record);
    }
    state.stores_mut().into_iter().for_each(|s| s.tensors_mut().for_each(Tensor::clear_grad));
    Ok((state, log))
}

#[cfg(test)]
mod tests;
