//! Surrogate losses whose backward pass realizes a gradient estimator.
//!
//! All three estimators reduce to "build a scalar root, call backward":
//!
//! * naive: root = Σ costs. Sampling paths contribute nothing because
//!   sampled indices entered the graph as plain integers.
//! * full: root = Σ differentiable costs + Σ_z log p(z) · (Q̂_z − b),
//!   where Q̂_z sums the detached values of the costs downstream of z and
//!   b is a control-variate baseline. The expectation of the resulting
//!   gradient over sampling equals the gradient of the expected loss.
//! * gumbel: root = Σ costs, with gradients flowing through relaxed
//!   sampling nodes instead of score terms.
//!
//! Downstream rule for sequences: a cost at step s is influenced by the
//! sample at step t iff s > t, and a sequence-level cost by every sample.

use crate::distributions::CategoricalSample;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeRef};

/// When a cost is incurred, for the downstream rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostStep {
    /// Per-step cost at this decoder time step.
    AtStep(usize),
    /// Cost of the whole emitted sequence (e.g. a corpus metric reward).
    SequenceLevel,
}

/// One scalar cost leaf of the stochastic computation graph.
#[derive(Debug, Clone, Copy)]
pub struct CostNode {
    pub node: NodeRef,
    /// Cached forward value; what score terms multiply.
    pub value: f64,
    /// Whether backward through `node` reaches parameters. A reward
    /// computed outside the graph (BLEU) is not differentiable and its
    /// node is a constant.
    pub differentiable: bool,
    pub step: CostStep,
}

/// Control variate subtracted from every score-term multiplier.
#[derive(Debug, Clone, Copy)]
pub enum Baseline {
    None,
    Ema { value: f64, decay: f64 },
}

impl Baseline {
    pub fn none() -> Self {
        Baseline::None
    }

    pub fn ema(decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::invalid(
                "baseline",
                format!("decay must be in [0,1), got {decay}"),
            ));
        }
        Ok(Baseline::Ema { value: 0.0, decay })
    }

    pub fn value(&self) -> f64 {
        match self {
            Baseline::None => 0.0,
            Baseline::Ema { value, .. } => *value,
        }
    }

    /// Fold one observed return into the moving average. No-op for
    /// [`Baseline::None`].
    pub fn update(&mut self, observed_return: f64) {
        if let Baseline::Ema { value, decay } = self {
            *value = *decay * *value + (1.0 - *decay) * observed_return;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Naive,
    Full,
    Gumbel,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimatorKind::Naive => "naive",
            EstimatorKind::Full => "full",
            EstimatorKind::Gumbel => "gumbel",
        })
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(EstimatorKind::Naive),
            "full" => Ok(EstimatorKind::Full),
            "gumbel" => Ok(EstimatorKind::Gumbel),
            other => Err(Error::invalid(
                "estimator",
                format!("unknown estimator `{other}` (naive|full|gumbel)"),
            )),
        }
    }
}

/// Scalar root ready for backward.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateLoss {
    pub root: NodeRef,
    pub kind: EstimatorKind,
}

/// Costs influenced by the sample `z` under the sequence downstream rule.
pub fn downstream_costs(costs: &[CostNode], z: &CategoricalSample) -> Vec<CostNode> {
    costs
        .iter()
        .filter(|c| match c.step {
            CostStep::AtStep(s) => s > z.step,
            CostStep::SequenceLevel => true,
        })
        .copied()
        .collect()
}

fn sum_cost_nodes(g: &mut Graph, costs: impl Iterator<Item = NodeRef>) -> Result<NodeRef> {
    let mut acc: Option<NodeRef> = None;
    for node in costs {
        acc = Some(match acc {
            None => node,
            Some(a) => g.add(a, node)?,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => g.scalar(0.0),
    }
}

/// Sum of costs with sampling paths ignored.
pub fn surrogate_naive(g: &mut Graph, costs: &[CostNode]) -> Result<SurrogateLoss> {
    if let Some(c) = costs.iter().find(|c| !c.differentiable) {
        return Err(Error::EstimatorMisuse {
            estimator: "naive",
            detail: format!("non-differentiable cost at {:?} has no gradient path", c.step),
        });
    }
    let root = sum_cost_nodes(g, costs.iter().map(|c| c.node))?;
    Ok(SurrogateLoss {
        root,
        kind: EstimatorKind::Naive,
    })
}

/// Score-function estimator with reward-to-go and baseline.
pub fn surrogate_full(
    g: &mut Graph,
    costs: &[CostNode],
    samples: &[CategoricalSample],
    baseline: &Baseline,
) -> Result<SurrogateLoss> {
    let mut root = sum_cost_nodes(
        g,
        costs.iter().filter(|c| c.differentiable).map(|c| c.node),
    )?;
    let b = baseline.value();
    for z in samples {
        let q_hat: f64 = downstream_costs(costs, z).iter().map(|c| c.value).sum();
        // (Q̂ − b) is a detached constant: the score term trains the
        // distribution, never the costs through this path.
        let score = g.scale(z.log_prob, q_hat - b)?;
        root = g.add(root, score)?;
    }
    Ok(SurrogateLoss {
        root,
        kind: EstimatorKind::Full,
    })
}

/// Reparameterized estimator: plain cost sum over a decode whose sampling
/// went through relaxed nodes. Rejects graphs with hard stochastic draws,
/// since those would silently fall back to naive behavior.
pub fn surrogate_gumbel(g: &mut Graph, costs: &[CostNode]) -> Result<SurrogateLoss> {
    if g.n_stochastic() > 0 {
        return Err(Error::EstimatorMisuse {
            estimator: "gumbel",
            detail: format!(
                "graph holds {} hard stochastic draws; decode was not run in relaxed mode",
                g.n_stochastic()
            ),
        });
    }
    if let Some(c) = costs.iter().find(|c| !c.differentiable) {
        return Err(Error::EstimatorMisuse {
            estimator: "gumbel",
            detail: format!("non-differentiable cost at {:?} has no gradient path", c.step),
        });
    }
    let root = sum_cost_nodes(g, costs.iter().map(|c| c.node))?;
    Ok(SurrogateLoss {
        root,
        kind: EstimatorKind::Gumbel,
    })
}

/// Dispatch on estimator kind.
pub fn build_surrogate(
    g: &mut Graph,
    kind: EstimatorKind,
    costs: &[CostNode],
    samples: &[CategoricalSample],
    baseline: &Baseline,
) -> Result<SurrogateLoss> {
    match kind {
        EstimatorKind::Naive => surrogate_naive(g, costs),
        EstimatorKind::Full => surrogate_full(g, costs, samples, baseline),
        EstimatorKind::Gumbel => surrogate_gumbel(g, costs),
    }
}
