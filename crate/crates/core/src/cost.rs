//! Cost contributions attached to trajectory nodes.
//!
//! A cost is `Σ_{n ∈ obs} value_n(x_n)`. Backward sweeps seed `λ` with
//! `grad_n(x_n)` and `ξ` with `hessvec_n(x_n, δ_n)` whenever they reach an
//! observation node.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::ode::Trajectory;

pub trait CostAttachment {
    /// Sorted node indices carrying a cost term.
    fn obs_nodes(&self) -> &[usize];

    fn value(&self, node: usize, x: &[f64]) -> f64;

    fn grad(&self, node: usize, x: &[f64], out: &mut [f64]);

    fn hessvec(&self, node: usize, x: &[f64], v: &[f64], out: &mut [f64]);

    /// Total cost over a trajectory.
    fn total(&self, traj: &Trajectory) -> Result<f64> {
        check_nodes(self, traj.steps())?;
        Ok(self
            .obs_nodes()
            .iter()
            .map(|&n| self.value(n, traj.node(n)))
            .sum())
    }
}

impl<T: CostAttachment + ?Sized> CostAttachment for &T {
    fn obs_nodes(&self) -> &[usize] {
        (**self).obs_nodes()
    }
    fn value(&self, node: usize, x: &[f64]) -> f64 {
        (**self).value(node, x)
    }
    fn grad(&self, node: usize, x: &[f64], out: &mut [f64]) {
        (**self).grad(node, x, out)
    }
    fn hessvec(&self, node: usize, x: &[f64], v: &[f64], out: &mut [f64]) {
        (**self).hessvec(node, x, v, out)
    }
}

pub(crate) fn check_nodes<C: CostAttachment + ?Sized>(cost: &C, steps: usize) -> Result<()> {
    let nodes = cost.obs_nodes();
    if let Some(&n) = nodes.iter().find(|&&n| n > steps) {
        return Err(Error::InvalidArgument(format!(
            "observation node {n} lies beyond the last step {steps}"
        )));
    }
    if nodes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "observation nodes must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// A cost that is identically zero.
#[derive(Debug, Clone, Default)]
pub struct ZeroCost {
    nodes: Vec<usize>,
}

impl ZeroCost {
    pub fn at(nodes: Vec<usize>) -> Self {
        Self { nodes }
    }
}

impl CostAttachment for ZeroCost {
    fn obs_nodes(&self) -> &[usize] {
        &self.nodes
    }
    fn value(&self, _: usize, _: &[f64]) -> f64 {
        0.0
    }
    fn grad(&self, _: usize, _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn hessvec(&self, _: usize, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// `Σ_n ‖x_n[block] - target_n‖²` over a contiguous block of the state.
#[derive(Debug, Clone)]
pub struct SquaredMisfit {
    nodes: Vec<usize>,
    targets: Vec<Vec<f64>>,
    block: Range<usize>,
}

impl SquaredMisfit {
    /// `observations` must be sorted by node with one target per node.
    pub fn new(observations: Vec<(usize, Vec<f64>)>, block: Range<usize>) -> Result<Self> {
        let (nodes, targets): (Vec<_>, Vec<_>) = observations.into_iter().unzip();
        if nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "observation nodes must be strictly increasing".into(),
            ));
        }
        if let Some(t) = targets.iter().find(|t| t.len() != block.len()) {
            return Err(Error::DimensionMismatch {
                expected: block.len(),
                got: t.len(),
            });
        }
        Ok(Self {
            nodes,
            targets,
            block,
        })
    }

    /// Single terminal observation over the whole state.
    pub fn terminal(node: usize, target: Vec<f64>) -> Self {
        let len = target.len();
        Self {
            nodes: vec![node],
            targets: vec![target],
            block: 0..len,
        }
    }

    fn target(&self, node: usize) -> &[f64] {
        let k = self
            .nodes
            .binary_search(&node)
            .expect("node is an observation node");
        &self.targets[k]
    }
}

impl CostAttachment for SquaredMisfit {
    fn obs_nodes(&self) -> &[usize] {
        &self.nodes
    }

    fn value(&self, node: usize, x: &[f64]) -> f64 {
        x[self.block.clone()]
            .iter()
            .zip(self.target(node))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    fn grad(&self, node: usize, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let target = self.target(node);
        for (k, idx) in self.block.clone().enumerate() {
            out[idx] = 2.0 * (x[idx] - target[k]);
        }
    }

    fn hessvec(&self, _: usize, _: &[f64], v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for idx in self.block.clone() {
            out[idx] = 2.0 * v[idx];
        }
    }
}
