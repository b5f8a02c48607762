//! Ensemble member architectures.
//!
//! Every member exposes a tap point just before its first pooling layer (after
//! the first hidden layer for MLPs). The fusion strategies read member
//! features there and hand replacement features back.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{row_softmax, Graph, NodeId, ParamStore, Tensor};
use crate::error::{config, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchKind {
    SimpleCnn,
    Mlp,
}

impl ArchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchKind::SimpleCnn => "simple_cnn",
            ArchKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple_cnn" | "cnn" => Ok(ArchKind::SimpleCnn),
            "mlp" => Ok(ArchKind::Mlp),
            other => config(format!("unsupported architecture kind '{other}'")),
        }
    }
}

/// Filter counts of the three-layer reference CNN.
pub const SIMPLE_CNN_FILTERS: [usize; 3] = [32, 64, 128];

#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    /// Shape of one example: `[C, H, W]` for CNNs, anything for MLPs (flattened).
    pub input_shape: Vec<usize>,
    /// Conv filter counts for CNNs, hidden widths for MLPs.
    pub widths: Vec<usize>,
    pub num_classes: usize,
    /// Whether the head carries the extra auxiliary logit.
    pub auxiliary: bool,
}

impl ArchitectureSpec {
    pub fn simple_cnn(input_shape: Vec<usize>, num_classes: usize) -> Self {
        Self {
            kind: ArchKind::SimpleCnn,
            input_shape,
            widths: SIMPLE_CNN_FILTERS.to_vec(),
            num_classes,
            auxiliary: true,
        }
    }

    pub fn mlp(input_shape: Vec<usize>, hidden: [usize; 2], num_classes: usize) -> Self {
        Self { kind: ArchKind::Mlp, input_shape, widths: hidden.to_vec(), num_classes, auxiliary: true }
    }

    pub fn with_auxiliary(mut self, auxiliary: bool) -> Self {
        self.auxiliary = auxiliary;
        self
    }

    pub fn output_dim(&self) -> usize {
        self.num_classes + usize::from(self.auxiliary)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return config("at least two classes are required");
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return config(format!("invalid input shape {:?}", self.input_shape));
        }
        if self.widths.contains(&0) {
            return config("layer widths must be positive");
        }
        match self.kind {
            ArchKind::SimpleCnn => {
                if self.widths.len() != 3 {
                    return config("simple_cnn needs exactly three filter counts");
                }
                let s = &self.input_shape;
                if s.len() != 3 || !s[1].is_multiple_of(8) || !s[2].is_multiple_of(8) {
                    return config(format!(
                        "simple_cnn input must be [C, H, W] with H and W divisible by 8, got {s:?}"
                    ));
                }
            }
            ArchKind::Mlp => {
                if self.widths.len() != 2 {
                    return config("mlp needs exactly two hidden widths");
                }
            }
        }
        Ok(())
    }

    /// Channel count of the tap-point features.
    pub fn tap_channels(&self) -> usize {
        self.widths[0]
    }

    /// Shape of the tap-point features for a batch.
    pub fn tap_shape(&self, batch: usize) -> Vec<usize> {
        match self.kind {
            ArchKind::SimpleCnn => vec![batch, self.widths[0], self.input_shape[1], self.input_shape[2]],
            ArchKind::Mlp => vec![batch, self.widths[0]],
        }
    }

    /// Parameter names and shapes, in binding order.
    fn layout(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        let out = self.output_dim();
        let w = &self.widths;
        match self.kind {
            ArchKind::SimpleCnn => {
                let c = self.input_shape[0];
                let flat = w[2] * (self.input_shape[1] / 8) * (self.input_shape[2] / 8);
                vec![
                    ("conv1.w", vec![w[0], c, 3, 3], c * 9),
                    ("conv1.b", vec![w[0]], 0),
                    ("conv2.w", vec![w[1], w[0], 3, 3], w[0] * 9),
                    ("conv2.b", vec![w[1]], 0),
                    ("conv3.w", vec![w[2], w[1], 3, 3], w[1] * 9),
                    ("conv3.b", vec![w[2]], 0),
                    ("fc.w", vec![out, flat], flat),
                    ("fc.b", vec![out], 0),
                ]
            }
            ArchKind::Mlp => {
                let d = self.input_len();
                vec![
                    ("fc1.w", vec![w[0], d], d),
                    ("fc1.b", vec![w[0]], 0),
                    ("fc2.w", vec![w[1], w[0]], w[0]),
                    ("fc2.b", vec![w[1]], 0),
                    ("out.w", vec![out, w[1]], w[1]),
                    ("out.b", vec![out], 0),
                ]
            }
        }
    }
}

/// Derives a member's generator seed from the master seed.
pub fn member_seed(seed: u64, member: usize) -> u64 {
    let mut z = seed ^ (member as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemberModel {
    pub index: usize,
    pub spec: ArchitectureSpec,
    pub params: ParamStore,
}

/// Graph handles of a member's parameters for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundMember {
    ids: Vec<NodeId>,
}

/// He-style uniform init for hidden layers; the head is scaled down so an
/// untrained member starts close to uniform.
pub fn build_member(spec: &ArchitectureSpec, member: usize, seed: u64) -> Result<MemberModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(member_seed(seed, member));
    let layout = spec.layout();
    let head = layout.len() - 2;
    let mut params = ParamStore::new();
    for (i, (name, shape, fan_in)) in layout.into_iter().enumerate() {
        let numel: usize = shape.iter().product();
        let data = if fan_in == 0 {
            vec![0.0; numel]
        } else {
            let mut bound = (6.0 / fan_in as f64).sqrt();
            if i == head {
                bound *= 0.1;
            }
            (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
        };
        params.push(name, Tensor::new(shape, data)?);
    }
    Ok(MemberModel { index: member, spec: spec.clone(), params })
}

impl MemberModel {
    pub fn bind(&self, graph: &mut Graph, tag: usize) -> Result<BoundMember> {
        let ids = (0..self.params.len()).map(|i| graph.param(tag, &self.params, i)).collect::<Result<_>>()?;
        Ok(BoundMember { ids })
    }

    fn check_batch(&self, graph: &Graph, x: NodeId) -> Result<usize> {
        let s = graph.shape(x);
        if s.len() != self.spec.input_shape.len() + 1 || s[1..] != self.spec.input_shape[..] {
            return config(format!(
                "batch shape {s:?} does not match member input {:?}",
                self.spec.input_shape
            ));
        }
        Ok(s[0])
    }

    /// Runs the layers up to and including the tap point.
    pub fn forward_tap(&self, graph: &mut Graph, bound: &BoundMember, x: NodeId) -> Result<NodeId> {
        let batch = self.check_batch(graph, x)?;
        let p = &bound.ids;
        match self.spec.kind {
            ArchKind::SimpleCnn => {
                let h = graph.conv2d(x, p[0], p[1])?;
                graph.relu(h)
            }
            ArchKind::Mlp => {
                let flat = graph.reshape(x, vec![batch, self.spec.input_len()])?;
                let h = graph.dense(flat, p[0], p[1])?;
                graph.relu(h)
            }
        }
    }

    /// Runs the remaining layers from (possibly replaced) tap features to logits.
    pub fn forward_head(&self, graph: &mut Graph, bound: &BoundMember, tap: NodeId) -> Result<NodeId> {
        let expected = self.spec.tap_shape(graph.shape(tap)[0]);
        if graph.shape(tap) != expected.as_slice() {
            return config(format!("tap features {:?} do not match {expected:?}", graph.shape(tap)));
        }
        let p = &bound.ids;
        match self.spec.kind {
            ArchKind::SimpleCnn => {
                let mut h = graph.maxpool2x2(tap)?;
                for layer in [2, 4] {
                    h = graph.conv2d(h, p[layer], p[layer + 1])?;
                    h = graph.relu(h)?;
                    h = graph.maxpool2x2(h)?;
                }
                let flat = graph.flatten(h)?;
                graph.dense(flat, p[6], p[7])
            }
            ArchKind::Mlp => {
                let h = graph.dense(tap, p[2], p[3])?;
                let h = graph.relu(h)?;
                graph.dense(h, p[4], p[5])
            }
        }
    }
}

/// Stand-alone forward pass returning `(logits, tap_features)`.
///
/// Injected features replace the member's own tap output.
pub fn forward_member(model: &MemberModel, batch: &Tensor, injected: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, 0)?;
    let x = g.input(batch.clone())?;
    let tap = model.forward_tap(&mut g, &bound, x)?;
    let head_in = match injected {
        Some(t) => {
            if t.shape() != g.shape(tap) {
                return config(format!("injected features {:?} do not match tap {:?}", t.shape(), g.shape(tap)));
            }
            g.input(t.clone())?
        }
        None => tap,
    };
    let logits = model.forward_head(&mut g, &bound, head_in)?;
    Ok((g.value(logits).clone(), g.value(tap).clone()))
}

/// Row-wise softmax of the member's logits: `[B, output_dim]`.
pub fn predict_proba(model: &MemberModel, batch: &Tensor) -> Result<Tensor> {
    let (logits, _) = forward_member(model, batch, None)?;
    Tensor::new(logits.shape().to_vec(), row_softmax(&logits))
}
