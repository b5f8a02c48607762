//! Named ensemble objectives behind one trait, selectable at runtime.

use std::collections::BTreeMap;
use std::fmt;

use super::{
    amcl_objective, append_auxiliary, cmcl_plan, ie_plan, smcl_plan, AssignmentMemory, ObjectivePlan, PenaltyConfig,
    ProbBatch,
};
use crate::error::{config, state, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Assignment from the current losses.
    LossBased,
    /// Assignment read from the frozen specialization matrix.
    MemoryBased,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::LossBased => "lba",
            Phase::MemoryBased => "mba",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub trait EnsembleObjective: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether member heads carry the auxiliary slot.
    fn uses_auxiliary(&self) -> bool {
        false
    }

    fn phase(&self, _epoch: usize) -> Phase {
        Phase::LossBased
    }

    fn validate(&self, _members: usize, _epochs: usize) -> Result<()> {
        Ok(())
    }

    /// Loss weights for one batch. `epoch` is 1-based.
    fn plan(&self, probs: &ProbBatch, classes: &[usize], epoch: usize, memory: &AssignmentMemory)
        -> Result<ObjectivePlan>;

    /// Called after each optimizer step with the plan that produced it.
    fn record(&self, _plan: &ObjectivePlan, _classes: &[usize], _epoch: usize, _memory: &mut AssignmentMemory) -> Result<()> {
        Ok(())
    }

    fn end_epoch(&self, _epoch: usize, _memory: &mut AssignmentMemory) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct IndependentEnsemble;

impl EnsembleObjective for IndependentEnsemble {
    fn name(&self) -> &'static str {
        "ie"
    }

    fn plan(&self, probs: &ProbBatch, classes: &[usize], _: usize, _: &AssignmentMemory) -> Result<ObjectivePlan> {
        ie_plan(probs, classes)
    }
}

#[derive(Clone, Debug)]
pub struct StochasticMcl {
    pub k: usize,
}

impl EnsembleObjective for StochasticMcl {
    fn name(&self) -> &'static str {
        "smcl"
    }

    fn validate(&self, members: usize, _: usize) -> Result<()> {
        PenaltyConfig { k: self.k, ..Default::default() }.validate(members)
    }

    fn plan(&self, probs: &ProbBatch, classes: &[usize], _: usize, _: &AssignmentMemory) -> Result<ObjectivePlan> {
        smcl_plan(probs, classes, self.k)
    }
}

#[derive(Clone, Debug)]
pub struct ConfidentMcl {
    pub penalty: PenaltyConfig,
}

impl EnsembleObjective for ConfidentMcl {
    fn name(&self) -> &'static str {
        "cmcl"
    }

    fn validate(&self, members: usize, _: usize) -> Result<()> {
        self.penalty.validate(members)
    }

    fn plan(&self, probs: &ProbBatch, classes: &[usize], _: usize, _: &AssignmentMemory) -> Result<ObjectivePlan> {
        cmcl_plan(probs, classes, &self.penalty)
    }
}

/// Auxiliary-class MCL: loss-based assignment through `t_tau` while counting
/// assignments, then a frozen class-to-member specialization.
#[derive(Clone, Debug)]
pub struct AuxiliaryMcl {
    pub penalty: PenaltyConfig,
}

impl EnsembleObjective for AuxiliaryMcl {
    fn name(&self) -> &'static str {
        "amcl"
    }

    fn uses_auxiliary(&self) -> bool {
        true
    }

    fn phase(&self, epoch: usize) -> Phase {
        if epoch <= self.penalty.t_tau {
            Phase::LossBased
        } else {
            Phase::MemoryBased
        }
    }

    fn validate(&self, members: usize, _: usize) -> Result<()> {
        self.penalty.validate(members)?;
        if self.penalty.t_tau == 0 {
            return state("t_tau = 0 would start in memory-based assignment with an empty counter");
        }
        Ok(())
    }

    fn plan(&self, probs: &ProbBatch, classes: &[usize], epoch: usize, memory: &AssignmentMemory) -> Result<ObjectivePlan> {
        let num_classes = probs.width() - 1;
        let labels = classes.iter().map(|&c| append_auxiliary(c, num_classes)).collect::<Result<Vec<_>>>()?;
        amcl_objective(epoch, probs, &labels, memory, &self.penalty)
    }

    fn record(&self, plan: &ObjectivePlan, classes: &[usize], epoch: usize, memory: &mut AssignmentMemory) -> Result<()> {
        if epoch <= self.penalty.t_tau {
            memory.counter.accumulate(&plan.assignment, classes)?;
        }
        Ok(())
    }

    fn end_epoch(&self, epoch: usize, memory: &mut AssignmentMemory) -> Result<()> {
        if epoch <= self.penalty.t_tau {
            memory.counter.epochs_accumulated += 1;
        }
        if epoch == self.penalty.t_tau {
            let w = memory.freeze(self.penalty.k)?;
            log::info!("specialization frozen after epoch {epoch}: {:?}", w.flags());
        }
        Ok(())
    }
}

pub type ObjectiveFactory = Box<dyn Fn(&PenaltyConfig) -> Box<dyn EnsembleObjective> + Send + Sync>;

/// Objectives by name.
pub struct ObjectiveRegistry {
    entries: BTreeMap<String, ObjectiveFactory>,
}

impl Default for ObjectiveRegistry {
    fn default() -> Self {
        Self::with_builtin()
    }
}

impl ObjectiveRegistry {
    pub fn empty() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn with_builtin() -> Self {
        let mut r = Self::empty();
        r.register("ie", Box::new(|_| Box::new(IndependentEnsemble)));
        r.register("smcl", Box::new(|p| Box::new(StochasticMcl { k: p.k })));
        r.register("cmcl", Box::new(|p| Box::new(ConfidentMcl { penalty: *p })));
        r.register("amcl", Box::new(|p| Box::new(AuxiliaryMcl { penalty: *p })));
        r
    }

    pub fn register(&mut self, name: impl Into<String>, factory: ObjectiveFactory) {
        self.entries.insert(name.into(), factory);
    }

    pub fn create(&self, name: &str, penalty: &PenaltyConfig) -> Result<Box<dyn EnsembleObjective>> {
        match self.entries.get(name) {
            Some(f) => Ok(f(penalty)),
            None => config(format!("unknown method '{name}' (available: {})", self.names().join(", "))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

impl fmt::Debug for ObjectiveRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObjectiveRegistry").field("names", &self.names()).finish()
    }
}
