//! Per-scale heatmap loss and the summed multi-scale objective.
//!
//! For one sample with `N` keypoint channels,
//!
//! ```text
//! L_i = (1/N) * sum_n sum_{x,y} (P_n(x,y) - G_n(x,y))^2
//! ```
//!
//! i.e. squared error summed over pixels and averaged over keypoints only. The
//! total is the plain sum of every per-stack, per-scale term plus the term of
//! the refined (regression) output. Batches average the per-sample losses.

use std::fmt::Write as _;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::heatmap::HeatmapStack;
use crate::model::{MultiScaleOutputs, OutputVars};
use crate::tensor::{Scalar, Tensor};

/// Loss of one predicted stack against its groundtruth.
pub fn scale_loss<T: Scalar>(pred: &HeatmapStack<T>, gt: &HeatmapStack<T>) -> Result<T> {
    if pred.maps.shape() != gt.maps.shape() || pred.scale != gt.scale {
        return Err(Error::shape(format!(
            "scale_loss: prediction {:?}@/{} vs groundtruth {:?}@/{}",
            pred.maps.shape(),
            pred.scale,
            gt.maps.shape(),
            gt.scale
        )));
    }
    let n = T::lit(pred.channels() as f64);
    let sum: T = pred
        .maps
        .data()
        .iter()
        .zip(gt.maps.data())
        .map(|(&p, &g)| (p - g) * (p - g))
        .sum();
    Ok(sum / n)
}

/// Graph form of [`scale_loss`] over a `[B, N, H, W]` prediction, averaged over the batch.
pub fn scale_loss_node<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: &Tensor<T>) -> Result<Var> {
    let [b, n, _, _] = g.value(pred).dims4()?;
    g.squared_error(pred, gt, T::one() / T::lit((b * n) as f64))
}

/// Identifies one supervised prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TermKey {
    pub stack: usize,
    pub scale: usize,
}

impl TermKey {
    pub fn label(&self) -> String {
        format!("s{}/{}", self.stack, self.scale)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub per_term: Vec<(TermKey, f64)>,
    pub regression_term: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn term_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.per_term.iter().map(|(k, _)| k.label()).collect();
        if self.regression_term.is_some() {
            names.push("refined".into());
        }
        names
    }

    pub fn term_values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.per_term.iter().map(|(_, l)| *l).collect();
        v.extend(self.regression_term);
        v
    }

    /// Tab-separated `step, term..., total` record.
    pub fn log_line(&self, step: usize) -> String {
        let mut s = step.to_string();
        for v in self.term_values() {
            let _ = write!(s, "\t{v:.6e}");
        }
        let _ = write!(s, "\t{:.6e}", self.total);
        s
    }

    pub fn log_header(&self) -> String {
        let mut s = "step".to_string();
        for n in self.term_names() {
            s.push('\t');
            s.push_str(&n);
        }
        s.push_str("\ttotal");
        s
    }

    /// Element-wise running mean update used for per-epoch averages.
    pub(crate) fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        for ((_, a), (_, b)) in self.per_term.iter_mut().zip(&other.per_term) {
            *a += weight * b;
        }
        if let (Some(a), Some(b)) = (self.regression_term.as_mut(), other.regression_term) {
            *a += weight * b;
        }
        self.total += weight * other.total;
    }

    pub(crate) fn zeroed(&self) -> LossBreakdown {
        LossBreakdown {
            per_term: self.per_term.iter().map(|(k, _)| (*k, 0.0)).collect(),
            regression_term: self.regression_term.map(|_| 0.0),
            total: 0.0,
        }
    }
}

fn find_gt<T: Scalar>(gt_pyramid: &[HeatmapStack<T>], scale: usize) -> Result<&HeatmapStack<T>> {
    gt_pyramid
        .iter()
        .find(|s| s.scale == scale)
        .ok_or_else(|| Error::invalid(format!("groundtruth pyramid has no stack for divisor {scale}")))
}

/// Loss breakdown for one sample's outputs.
pub fn total_loss<T: Scalar>(
    outputs: &MultiScaleOutputs<T>,
    gt_pyramid: &[HeatmapStack<T>],
    gt_base: &HeatmapStack<T>,
) -> Result<LossBreakdown> {
    let mut per_term = Vec::new();
    for (s, stack) in outputs.per_stack.iter().enumerate() {
        for pred in stack {
            let gt = find_gt(gt_pyramid, pred.scale)?;
            per_term.push((TermKey { stack: s, scale: pred.scale }, scale_loss(pred, gt)?.as_f64()));
        }
    }
    let regression_term = outputs
        .refined
        .as_ref()
        .map(|r| scale_loss(r, gt_base).map(|v| v.as_f64()))
        .transpose()?;
    let total = per_term.iter().map(|(_, v)| v).sum::<f64>() + regression_term.unwrap_or(0.0);
    Ok(LossBreakdown {
        per_term,
        regression_term,
        total,
    })
}

/// Batched groundtruth: one `[B, N, h, w]` tensor per supervised divisor.
#[derive(Clone, Debug)]
pub struct BatchTargets<T: Scalar> {
    pub scales: Vec<usize>,
    pub maps: Vec<Tensor<T>>,
}

impl<T: Scalar> BatchTargets<T> {
    pub fn for_scale(&self, scale: usize) -> Result<&Tensor<T>> {
        self.scales
            .iter()
            .position(|&s| s == scale)
            .map(|i| &self.maps[i])
            .ok_or_else(|| Error::invalid(format!("batch targets missing divisor {scale}")))
    }
}

/// Graph form of [`total_loss`]. Returns the total node and the term nodes
/// (per-stack terms in order, then the refined term).
pub fn total_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    outputs: &OutputVars,
    scales: &[usize],
    targets: &BatchTargets<T>,
) -> Result<(Var, Vec<(Option<TermKey>, Var)>)> {
    let mut terms = Vec::new();
    for (s, stack) in outputs.per_stack.iter().enumerate() {
        for (&pred, &scale) in stack.iter().zip(scales) {
            let node = scale_loss_node(g, pred, targets.for_scale(scale)?)?;
            terms.push((Some(TermKey { stack: s, scale }), node));
        }
    }
    if let Some(r) = outputs.refined {
        let node = scale_loss_node(g, r, targets.for_scale(1)?)?;
        terms.push((None, node));
    }
    let nodes: Vec<Var> = terms.iter().map(|(_, v)| *v).collect();
    let total = g.add_scalars(&nodes)?;
    Ok((total, terms))
}

/// Reads the values of the nodes returned by [`total_loss_node`].
pub fn breakdown_from_graph<T: Scalar>(
    g: &Graph<T>,
    total: Var,
    terms: &[(Option<TermKey>, Var)],
) -> Result<LossBreakdown> {
    let mut per_term = Vec::new();
    let mut regression_term = None;
    for (key, v) in terms {
        let value = g.value(*v).item()?.as_f64();
        match key {
            Some(k) => per_term.push((*k, value)),
            None => regression_term = Some(value),
        }
    }
    Ok(LossBreakdown {
        per_term,
        regression_term,
        total: g.value(total).item()?.as_f64(),
    })
}
