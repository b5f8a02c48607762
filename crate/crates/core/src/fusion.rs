//! Cross-member feature exchange at the tap point.
//!
//! [`FusionModule`] concatenates every member's tap features, projects them
//! back to one member's width with a 1x1 convolution (dense layer for MLPs),
//! gates channels with a squeeze-excitation style sigmoid gate, and hands the
//! single fused tensor back to all members (plus each member's own tap scaled
//! by `residual_scale`). [`SharePlan`] implements the stochastic
//! feature-sharing baseline, which permutes member features per example.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::error::{config, Result};
use crate::model::{member_seed, ArchKind, ArchitectureSpec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    /// Bottleneck reduction of the channel gate.
    pub reduction: usize,
    pub residual_scale: f64,
    /// Per-example probability of permuting features in the sharing baseline.
    pub p_share: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { reduction: 4, residual_scale: 1.0, p_share: 0.5 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 {
            return config("fusion reduction must be positive");
        }
        if !(0.0..=1.0).contains(&self.residual_scale) {
            return config(format!("residual scale must lie in [0, 1], got {}", self.residual_scale));
        }
        if !(0.0..=1.0).contains(&self.p_share) {
            return config(format!("p_share must lie in [0, 1], got {}", self.p_share));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModule {
    pub members: usize,
    pub channels: usize,
    pub spatial: bool,
    pub gated: bool,
    pub residual_scale: f64,
    pub params: ParamStore,
}

#[derive(Clone, Debug)]
pub struct BoundFusion {
    ids: Vec<NodeId>,
}

/// Graph nodes produced by one fusion pass.
#[derive(Clone, Debug)]
pub struct FusedTaps {
    pub fused: NodeId,
    /// Channel gate `[B, C]`, absent when the module is ungated.
    pub gate: Option<NodeId>,
    pub per_member: Vec<NodeId>,
}

impl FusionModule {
    /// Projection starts as the member average; the gate starts near 0.5.
    pub fn new(arch: &ArchitectureSpec, members: usize, cfg: &FusionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if members == 0 {
            return config("fusion needs at least one member");
        }
        let c = arch.tap_channels();
        let spatial = arch.kind == ArchKind::SimpleCnn;
        let hidden = (c / cfg.reduction).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(member_seed(seed, usize::MAX >> 1));

        let mut proj = vec![0.0; c * members * c];
        for o in 0..c {
            for m in 0..members {
                proj[o * members * c + m * c + o] = 1.0 / members as f64;
            }
        }
        let proj_shape = if spatial { vec![c, members * c, 1, 1] } else { vec![c, members * c] };
        let mut uniform = |n: usize, fan_in: usize, scale: f64| -> Vec<f64> {
            let b = scale * (6.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-b..b)).collect()
        };
        let mut params = ParamStore::new();
        params.push("proj.w", Tensor::new(proj_shape, proj)?);
        params.push("proj.b", Tensor::zeros(&[c]));
        params.push("gate1.w", Tensor::new(vec![hidden, c], uniform(hidden * c, c, 1.0))?);
        params.push("gate1.b", Tensor::zeros(&[hidden]));
        params.push("gate2.w", Tensor::new(vec![c, hidden], uniform(c * hidden, hidden, 0.1))?);
        params.push("gate2.b", Tensor::zeros(&[c]));
        Ok(Self { members, channels: c, spatial, gated: true, residual_scale: cfg.residual_scale, params })
    }

    /// Single-member identity fusion: identity projection, no gate, no residual.
    pub fn identity(arch: &ArchitectureSpec) -> Result<Self> {
        let mut f = Self::new(arch, 1, &FusionConfig { residual_scale: 0.0, ..Default::default() }, 0)?;
        f.gated = false;
        Ok(f)
    }

    pub fn bind(&self, graph: &mut Graph, tag: usize) -> Result<BoundFusion> {
        let ids = (0..self.params.len()).map(|i| graph.param(tag, &self.params, i)).collect::<Result<_>>()?;
        Ok(BoundFusion { ids })
    }

    pub fn apply(&self, graph: &mut Graph, bound: &BoundFusion, taps: &[NodeId]) -> Result<FusedTaps> {
        if taps.len() != self.members {
            return config(format!("fusion expects {} taps, got {}", self.members, taps.len()));
        }
        let shape = graph.shape(taps[0]).to_vec();
        if taps.iter().any(|&t| graph.shape(t) != shape.as_slice()) {
            return config("all tap features must share one shape");
        }
        if shape.len() < 2 || shape[1] != self.channels || (shape.len() == 4) != self.spatial {
            return config(format!("tap shape {shape:?} does not fit a {}-channel fusion module", self.channels));
        }
        let p = &bound.ids;
        let cat = if taps.len() == 1 { taps[0] } else { graph.concat(taps)? };
        let proj = if self.spatial { graph.conv2d(cat, p[0], p[1])? } else { graph.dense(cat, p[0], p[1])? };
        let (fused, gate) = if self.gated {
            let squeezed = graph.global_avg_pool(proj)?;
            let h = graph.dense(squeezed, p[2], p[3])?;
            let h = graph.relu(h)?;
            let h = graph.dense(h, p[4], p[5])?;
            let gate = graph.sigmoid(h)?;
            (graph.channel_scale(proj, gate)?, Some(gate))
        } else {
            (proj, None)
        };
        let per_member = taps
            .iter()
            .map(|&t| {
                if self.residual_scale == 0.0 {
                    Ok(fused)
                } else {
                    let own = graph.scale(t, self.residual_scale)?;
                    graph.add(fused, own)
                }
            })
            .collect::<Result<_>>()?;
        Ok(FusedTaps { fused, gate, per_member })
    }

    /// Shared fused tensor for a list of tap features, outside training.
    pub fn fuse(&self, taps: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, 0)?;
        let ids = taps.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return config("fuse needs at least one tap");
        }
        let out = self.apply(&mut g, &bound, &ids)?;
        Ok(g.value(out.fused).clone())
    }
}

/// Per-example source assignment for the feature-sharing baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct SharePlan {
    /// `picks[m][b]`: the member whose features member `m` receives for example `b`.
    pub picks: Vec<Vec<usize>>,
    /// Whether a permutation was drawn for example `b`.
    pub shared: Vec<bool>,
}

impl SharePlan {
    pub fn draw<R: Rng>(members: usize, batch: usize, p_share: f64, rng: &mut R) -> Self {
        let mut picks = vec![vec![0; batch]; members];
        let mut shared = vec![false; batch];
        let mut perm: Vec<usize> = (0..members).collect();
        for b in 0..batch {
            perm.iter_mut().enumerate().for_each(|(i, p)| *p = i);
            if rng.random::<f64>() < p_share {
                perm.shuffle(rng);
                shared[b] = true;
            }
            for (m, &src) in perm.iter().enumerate() {
                picks[m][b] = src;
            }
        }
        Self { picks, shared }
    }

    pub fn apply(&self, graph: &mut Graph, taps: &[NodeId]) -> Result<Vec<NodeId>> {
        if taps.len() != self.picks.len() {
            return config("share plan does not match the member count");
        }
        self.picks.iter().map(|pick| graph.row_mix(taps, pick)).collect()
    }
}

/// Permutes member features per example with probability `p_share`.
pub fn feature_share(taps: &[Tensor], p_share: f64, seed: u64) -> Result<Vec<Tensor>> {
    if taps.is_empty() {
        return config("feature_share needs at least one tap");
    }
    if taps.iter().any(|t| t.shape() != taps[0].shape()) {
        return config("all tap features must share one shape");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = SharePlan::draw(taps.len(), taps[0].shape()[0], p_share, &mut rng);
    let mut g = Graph::new();
    let ids = taps.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = plan.apply(&mut g, &ids)?;
    Ok(out.into_iter().map(|id| g.value(id).clone()).collect())
}
