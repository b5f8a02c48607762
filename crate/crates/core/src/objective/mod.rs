//! Ensemble objectives and the assignment machinery behind them.
//!
//! Every objective here is a weighted sum of clamped negative log-probabilities
//! plus a constant, so each one is expressed as an [`ObjectivePlan`]: per-member
//! weight matrices over output slots. The same plan yields the loss value and,
//! through the fused softmax-NLL graph op, the training gradient. Assignments
//! are hard per step (no gradient flows through the choice of `v`).

mod registry;

pub use registry::{
    AuxiliaryMcl, ConfidentMcl, EnsembleObjective, IndependentEnsemble, ObjectiveFactory, ObjectiveRegistry,
    Phase, StochasticMcl,
};

use crate::autodiff::prob::clamped_neg_log;
use crate::error::{config, state, Error, Result};

/// One-hot label over `num_classes + 1` slots; the last slot is the auxiliary class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentedLabel {
    hot: usize,
    len: usize,
}

impl AugmentedLabel {
    pub fn hot(&self) -> usize {
        self.hot
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_auxiliary(&self) -> bool {
        self.hot == self.len - 1
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.len];
        v[self.hot] = 1.0;
        v
    }
}

pub fn append_auxiliary(y: usize, num_classes: usize) -> Result<AugmentedLabel> {
    if y >= num_classes {
        return Err(Error::Input(format!("label {y} out of range for {num_classes} classes")));
    }
    Ok(AugmentedLabel { hot: y, len: num_classes + 1 })
}

/// The target with only the auxiliary slot set.
pub fn auxiliary_target(num_classes: usize) -> AugmentedLabel {
    AugmentedLabel { hot: num_classes, len: num_classes + 1 }
}

/// Per-example, per-member losses `[B x M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl LossMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 || data.len() != rows * cols {
            return config(format!("loss matrix {rows}x{cols} given {} values", data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("loss matrix contains non-finite entries".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return config("ragged loss matrix");
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn members(&self) -> usize {
        self.cols
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.cols..(j + 1) * self.cols]
    }
}

/// Independent-ensemble objective: the sum of every entry.
pub fn ie_loss(losses: &LossMatrix) -> f64 {
    losses.data.iter().sum()
}

/// Oracle objective: the sum of row minima.
pub fn oracle_loss(losses: &LossMatrix) -> f64 {
    (0..losses.rows).map(|j| losses.row(j).iter().copied().fold(f64::INFINITY, f64::min)).sum()
}

/// Binary example-to-member indicator `[B x M]`, exactly `k` ones per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    rows: usize,
    members: usize,
    k: usize,
    flags: Vec<bool>,
}

impl Assignment {
    pub fn from_flags(rows: usize, members: usize, k: usize, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != rows * members {
            return config("assignment flag count does not match its shape");
        }
        for j in 0..rows {
            let n = flags[j * members..(j + 1) * members].iter().filter(|&&f| f).count();
            if n != k {
                return state(format!("assignment row {j} has {n} ones, expected {k}"));
            }
        }
        Ok(Self { rows, members, k, flags })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, j: usize, m: usize) -> bool {
        self.flags[j * self.members + m]
    }

    pub fn row(&self, j: usize) -> &[bool] {
        &self.flags[j * self.members..(j + 1) * self.members]
    }

    /// `sum_jm v_jm * l_jm`.
    pub fn objective(&self, losses: &LossMatrix) -> f64 {
        (0..self.rows)
            .map(|j| self.row(j).iter().zip(losses.row(j)).filter(|(&v, _)| v).map(|(_, l)| l).sum::<f64>())
            .sum()
    }
}

/// Picks, per row, the `k` smallest losses. Ties go to the smaller member index.
pub fn assign_top_k(losses: &LossMatrix, k: usize) -> Result<Assignment> {
    let m = losses.members();
    if k == 0 || k > m {
        return config(format!("K must satisfy 1 ≤ K ≤ M (K={k}, M={m})"));
    }
    let mut flags = vec![false; losses.rows * m];
    let mut order: Vec<usize> = (0..m).collect();
    for j in 0..losses.rows {
        let row = losses.row(j);
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        for &i in &order[..k] {
            flags[j * m + i] = true;
        }
    }
    Ok(Assignment { rows: losses.rows, members: m, k, flags })
}

/// Objective hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenaltyConfig {
    /// Weight of the unassigned-member penalty during loss-based assignment.
    pub beta: f64,
    /// Weight of the unassigned-member penalty during memory-based assignment.
    pub gamma: f64,
    /// Members assigned per example.
    pub k: usize,
    /// Last epoch (1-based) trained with loss-based assignment.
    pub t_tau: usize,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self { beta: 0.75, gamma: 0.75, k: 1, t_tau: 10 }
    }
}

impl PenaltyConfig {
    pub fn validate(&self, members: usize) -> Result<()> {
        if self.k == 0 || self.k > members {
            return config(format!("K must satisfy 1 ≤ K ≤ M (K={}, M={members})", self.k));
        }
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return config(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Member output distributions for a batch: `[B x M x W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbBatch {
    batch: usize,
    members: usize,
    width: usize,
    data: Vec<f64>,
}

impl ProbBatch {
    pub fn new(batch: usize, members: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || members == 0 || data.len() != batch * members * width {
            return config(format!("probability batch {batch}x{members}x{width} given {} values", data.len()));
        }
        for (i, row) in data.chunks(width).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Input(format!("row {i} is not a distribution (sum {s})")));
            }
        }
        Ok(Self { batch, members, width, data })
    }

    /// Builds from per-member `[B x W]` blocks.
    pub fn from_members(per_member: &[Vec<f64>], width: usize) -> Result<Self> {
        let members = per_member.len();
        if members == 0 || width == 0 {
            return config("empty probability batch");
        }
        let batch = per_member[0].len() / width;
        let mut data = Vec::with_capacity(batch * members * width);
        for j in 0..batch {
            for block in per_member {
                if block.len() != batch * width {
                    return config("member probability blocks differ in size");
                }
                data.extend_from_slice(&block[j * width..(j + 1) * width]);
            }
        }
        Self::new(batch, members, width, data)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, j: usize, m: usize) -> &[f64] {
        let start = (j * self.members + m) * self.width;
        &self.data[start..start + self.width]
    }

    /// `-log p[label]` for every example and member.
    pub fn label_losses(&self, labels: &[usize]) -> Result<LossMatrix> {
        if labels.len() != self.batch {
            return config("label count does not match the batch");
        }
        let mut data = Vec::with_capacity(self.batch * self.members);
        for (j, &y) in labels.iter().enumerate() {
            if y >= self.width {
                return Err(Error::Input(format!("label {y} out of range for width {}", self.width)));
            }
            for m in 0..self.members {
                data.push(clamped_neg_log(self.get(j, m)[y]));
            }
        }
        LossMatrix::new(self.batch, self.members, data)
    }
}

/// Loss expressed as `sum_m sum_bk weights[m][b,k] * -log clamp(p[b,m,k]) + constant`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectivePlan {
    pub value: f64,
    /// Members receiving the ground-truth term for each example.
    pub assignment: Assignment,
    /// Per-member weights, `[B x W]` each.
    pub weights: Vec<Vec<f64>>,
    pub constant: f64,
}

impl ObjectivePlan {
    fn build(probs: &ProbBatch, assignment: Assignment, weights: Vec<Vec<f64>>, constant: f64) -> Self {
        let w = probs.width();
        let mut value = constant;
        for (m, block) in weights.iter().enumerate() {
            for j in 0..probs.batch() {
                let p = probs.get(j, m);
                for (k, &wt) in block[j * w..(j + 1) * w].iter().enumerate() {
                    if wt != 0.0 {
                        value += wt * clamped_neg_log(p[k]);
                    }
                }
            }
        }
        Self { value, assignment, weights, constant }
    }
}

/// What an unassigned member is pushed towards.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Penalty {
    None,
    /// `coef * KL(uniform || p)`.
    Uniform(f64),
    /// `coef * KL(A(y) || p) = coef * -log p[aux]`.
    Auxiliary(f64),
}

fn assigned_plan(probs: &ProbBatch, labels: &[usize], assignment: Assignment, penalty: Penalty) -> ObjectivePlan {
    let (b, m_count, w) = (probs.batch(), probs.members(), probs.width());
    let mut weights = vec![vec![0.0; b * w]; m_count];
    let mut constant = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        for (m, block) in weights.iter_mut().enumerate() {
            let row = &mut block[j * w..(j + 1) * w];
            if assignment.get(j, m) {
                row[y] += 1.0;
                continue;
            }
            match penalty {
                Penalty::None => {}
                Penalty::Uniform(coef) => {
                    row.iter_mut().for_each(|v| *v += coef / w as f64);
                    constant -= coef * (w as f64).ln();
                }
                Penalty::Auxiliary(coef) => row[w - 1] += coef,
            }
        }
    }
    ObjectivePlan::build(probs, assignment, weights, constant)
}

fn check_augmented(probs: &ProbBatch, labels: &[AugmentedLabel]) -> Result<Vec<usize>> {
    if labels.len() != probs.batch() {
        return config("label count does not match the batch");
    }
    labels
        .iter()
        .map(|l| {
            if l.len() != probs.width() {
                config(format!("label length {} does not match output width {}", l.len(), probs.width()))
            } else if l.is_auxiliary() {
                Err(Error::Input("ground-truth label is hot at the auxiliary slot".into()))
            } else {
                Ok(l.hot())
            }
        })
        .collect()
}

/// Independent ensemble: every member takes the ground-truth term for every example.
pub fn ie_plan(probs: &ProbBatch, labels: &[usize]) -> Result<ObjectivePlan> {
    let losses = probs.label_losses(labels)?;
    let assignment = assign_top_k(&losses, probs.members())?;
    Ok(assigned_plan(probs, labels, assignment, Penalty::None))
}

/// Stochastic MCL: ground truth only for the `k` lowest-loss members.
pub fn smcl_plan(probs: &ProbBatch, labels: &[usize], k: usize) -> Result<ObjectivePlan> {
    let losses = probs.label_losses(labels)?;
    let assignment = assign_top_k(&losses, k)?;
    Ok(assigned_plan(probs, labels, assignment, Penalty::None))
}

/// Confident MCL on heads without an auxiliary slot: unassigned members are
/// pushed towards the uniform distribution with weight `beta`.
pub fn cmcl_plan(probs: &ProbBatch, labels: &[usize], cfg: &PenaltyConfig) -> Result<ObjectivePlan> {
    let losses = probs.label_losses(labels)?;
    let assignment = assign_top_k(&losses, cfg.k)?;
    Ok(assigned_plan(probs, labels, assignment, Penalty::Uniform(cfg.beta)))
}

/// Loss-based assignment with the auxiliary class.
pub fn lba_plan(probs: &ProbBatch, labels: &[AugmentedLabel], cfg: &PenaltyConfig) -> Result<ObjectivePlan> {
    let hot = check_augmented(probs, labels)?;
    let losses = probs.label_losses(&hot)?;
    let assignment = assign_top_k(&losses, cfg.k)?;
    Ok(assigned_plan(probs, &hot, assignment, Penalty::Auxiliary(cfg.beta)))
}

/// Memory-based assignment: ground-truth recipients are read from the frozen
/// specialization matrix, never from the current losses.
pub fn mba_plan(
    probs: &ProbBatch,
    labels: &[AugmentedLabel],
    w: &SpecializationMatrix,
    cfg: &PenaltyConfig,
) -> Result<ObjectivePlan> {
    let hot = check_augmented(probs, labels)?;
    if w.members() != probs.members() || w.num_classes() + 1 != probs.width() {
        return config("specialization matrix does not match the ensemble");
    }
    let mut flags = Vec::with_capacity(probs.batch() * probs.members());
    for &c in &hot {
        flags.extend_from_slice(w.row(c));
    }
    let assignment = Assignment::from_flags(probs.batch(), probs.members(), w.k(), flags)?;
    Ok(assigned_plan(probs, &hot, assignment, Penalty::Auxiliary(cfg.gamma)))
}

pub fn lba_loss(probs: &ProbBatch, labels: &[AugmentedLabel], cfg: &PenaltyConfig) -> Result<(f64, Assignment)> {
    let plan = lba_plan(probs, labels, cfg)?;
    Ok((plan.value, plan.assignment))
}

pub fn mba_loss(
    probs: &ProbBatch,
    labels: &[AugmentedLabel],
    w: Option<&SpecializationMatrix>,
    cfg: &PenaltyConfig,
) -> Result<f64> {
    let Some(w) = w else {
        return state("memory-based assignment requires a frozen specialization matrix");
    };
    Ok(mba_plan(probs, labels, w, cfg)?.value)
}

pub fn cmcl_loss(probs: &ProbBatch, labels: &[usize], cfg: &PenaltyConfig) -> Result<(f64, Assignment)> {
    let plan = cmcl_plan(probs, labels, cfg)?;
    Ok((plan.value, plan.assignment))
}

pub fn smcl_loss(probs: &ProbBatch, labels: &[usize], k: usize) -> Result<(f64, Assignment)> {
    let plan = smcl_plan(probs, labels, k)?;
    Ok((plan.value, plan.assignment))
}

/// Dispatches on the epoch: loss-based through `t_tau`, memory-based afterwards.
pub fn amcl_objective(
    epoch: usize,
    probs: &ProbBatch,
    labels: &[AugmentedLabel],
    memory: &AssignmentMemory,
    cfg: &PenaltyConfig,
) -> Result<ObjectivePlan> {
    if epoch <= cfg.t_tau {
        return lba_plan(probs, labels, cfg);
    }
    match memory.specialization() {
        Some(w) => mba_plan(probs, labels, w, cfg),
        None => state(format!(
            "epoch {epoch} needs memory-based assignment but no specialization was frozen (t_tau = {})",
            cfg.t_tau
        )),
    }
}

/// Cumulative ground-truth assignment counts per class and member.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssignmentCounter {
    num_classes: usize,
    members: usize,
    counts: Vec<u64>,
    pub epochs_accumulated: usize,
    frozen: bool,
}

impl AssignmentCounter {
    pub fn new(num_classes: usize, members: usize) -> Self {
        Self { num_classes, members, counts: vec![0; num_classes * members], epochs_accumulated: 0, frozen: false }
    }

    pub fn from_counts(num_classes: usize, members: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * members {
            return config("count matrix does not match its shape");
        }
        Ok(Self { num_classes, members, counts, epochs_accumulated: 0, frozen: false })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn row(&self, c: usize) -> &[u64] {
        &self.counts[c * self.members..(c + 1) * self.members]
    }

    pub fn get(&self, c: usize, m: usize) -> u64 {
        self.counts[c * self.members + m]
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `counts[c(j)][m] += v[j][m]`.
    pub fn accumulate(&mut self, v: &Assignment, classes: &[usize]) -> Result<()> {
        if self.frozen {
            return state("assignment counter is frozen");
        }
        self.add(v, classes)
    }

    pub(crate) fn add(&mut self, v: &Assignment, classes: &[usize]) -> Result<()> {
        if v.members() != self.members || v.rows() != classes.len() {
            return config("assignment does not match the counter");
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::Input(format!("class {c} out of range")));
        }
        for (j, &c) in classes.iter().enumerate() {
            for m in 0..self.members {
                if v.get(j, m) {
                    self.counts[c * self.members + m] += 1;
                }
            }
        }
        Ok(())
    }

    pub(crate) fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }
}

/// Binary class-to-member flags, exactly `k` per class row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpecializationMatrix {
    num_classes: usize,
    members: usize,
    k: usize,
    flags: Vec<bool>,
}

impl SpecializationMatrix {
    pub fn from_flags(num_classes: usize, members: usize, k: usize, flags: Vec<bool>) -> Result<Self> {
        Assignment::from_flags(num_classes, members, k, flags.clone())?;
        Ok(Self { num_classes, members, k, flags })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, c: usize) -> &[bool] {
        &self.flags[c * self.members..(c + 1) * self.members]
    }

    pub fn get(&self, c: usize, m: usize) -> bool {
        self.flags[c * self.members + m]
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    /// Classes flagged for member `m`.
    pub fn classes_of(&self, m: usize) -> Vec<usize> {
        (0..self.num_classes).filter(|&c| self.get(c, m)).collect()
    }
}

/// Row-wise top-`k` of the counts. Ties go to the smaller member index.
pub fn fix_specialization(counter: &AssignmentCounter, k: usize) -> Result<SpecializationMatrix> {
    let m = counter.members();
    if k == 0 || k > m {
        return config(format!("K must satisfy 1 ≤ K ≤ M (K={k}, M={m})"));
    }
    if counter.num_classes() == 0 {
        return config("empty assignment counter");
    }
    let mut flags = vec![false; counter.num_classes() * m];
    let mut order: Vec<usize> = (0..m).collect();
    for c in 0..counter.num_classes() {
        let row = counter.row(c);
        if row.iter().all(|&n| n == 0) {
            log::warn!("class {c} was never assigned; defaulting to members 0..{k}");
        }
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        order.sort_by(|&a, &b| row[b].cmp(&row[a]).then(a.cmp(&b)));
        for &i in &order[..k] {
            flags[c * m + i] = true;
        }
    }
    let w = SpecializationMatrix { num_classes: counter.num_classes(), members: m, k, flags };
    for member in 0..m {
        if w.classes_of(member).is_empty() {
            log::warn!("member {member} has no specialized class and will only see auxiliary targets");
        }
    }
    Ok(w)
}

/// Counter plus the (eventually) frozen specialization.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMemory {
    pub counter: AssignmentCounter,
    specialization: Option<SpecializationMatrix>,
}

impl AssignmentMemory {
    pub fn new(num_classes: usize, members: usize) -> Self {
        Self { counter: AssignmentCounter::new(num_classes, members), specialization: None }
    }

    pub fn restore(counter: AssignmentCounter, specialization: Option<SpecializationMatrix>) -> Self {
        let mut counter = counter;
        counter.set_frozen(specialization.is_some());
        Self { counter, specialization }
    }

    pub fn specialization(&self) -> Option<&SpecializationMatrix> {
        self.specialization.as_ref()
    }

    pub fn is_frozen(&self) -> bool {
        self.specialization.is_some()
    }

    /// Fixes the specialization from the counts and stops accumulation.
    pub fn freeze(&mut self, k: usize) -> Result<&SpecializationMatrix> {
        if self.specialization.is_some() {
            return state("specialization is already frozen");
        }
        if self.counter.total() == 0 {
            return state("cannot freeze specialization from an empty counter");
        }
        let w = fix_specialization(&self.counter, k)?;
        self.counter.set_frozen(true);
        Ok(self.specialization.insert(w))
    }
}

#[cfg(test)]
mod tests;
