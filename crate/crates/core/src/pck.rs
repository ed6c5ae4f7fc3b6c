//! Percentage of Correct Keypoints.
//!
//! A keypoint counts as correct when `||gt - pred|| / H < alpha` (strict), where
//! `H` is half the head size (PCKh) or the torso size (PCK). The overall score
//! averages the indicator over every evaluated (sample, keypoint) pair.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::keypoints::{Keypoint, KeypointSet, NUM_KEYPOINTS, PART_GROUPS};

/// Groundtruth needed to score one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseLabel {
    pub keypoints: KeypointSet,
    /// Head to neck distance in pixels.
    pub head_size: f64,
    /// Thorax to pelvis distance in pixels.
    pub torso_size: f64,
}

/// Anything carrying a [`PoseLabel`].
pub trait Annotated {
    fn label(&self) -> &PoseLabel;
}

impl Annotated for PoseLabel {
    fn label(&self) -> &PoseLabel {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// Half the head size (PCKh).
    HeadHalf,
    /// Torso size (PCK).
    Torso,
}

impl Normalization {
    pub fn length(self, label: &PoseLabel) -> f64 {
        match self {
            Normalization::HeadHalf => 0.5 * label.head_size,
            Normalization::Torso => label.torso_size,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Normalization::HeadHalf => "head",
            Normalization::Torso => "torso",
        }
    }
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" | "head_half" | "pckh" => Ok(Normalization::HeadHalf),
            "torso" | "pck" => Ok(Normalization::Torso),
            _ => Err(Error::config(format!("unknown normalization {s:?} (expected head|torso)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum KeypointFilter {
    All,
    /// Occluded keypoints whose skeleton neighbours are all visible.
    RecoverableOccluded,
    Only(Vec<Keypoint>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PckConfig {
    pub alpha: f64,
    pub normalization: Normalization,
    pub filter: KeypointFilter,
}

impl PckConfig {
    pub fn new(alpha: f64, normalization: Normalization) -> Self {
        Self {
            alpha,
            normalization,
            filter: KeypointFilter::All,
        }
    }

    fn selects(&self, label: &KeypointSet, k: Keypoint) -> bool {
        if !label.is_visible(k) {
            return false;
        }
        match &self.filter {
            KeypointFilter::All => true,
            KeypointFilter::RecoverableOccluded => {
                label.is_occluded(k) && k.neighbors().all(|n| label.is_visible(n) && !label.is_occluded(n))
            }
            KeypointFilter::Only(list) => list.contains(&k),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub correct: usize,
    pub evaluated: usize,
}

impl Tally {
    pub fn fraction(&self) -> Option<f64> {
        (self.evaluated > 0).then(|| self.correct as f64 / self.evaluated as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PckReport {
    pub alpha: f64,
    pub normalization: Normalization,
    /// Number of samples scored.
    pub samples: usize,
    pub overall: Tally,
    pub per_keypoint: [Tally; NUM_KEYPOINTS],
}

impl PckReport {
    /// Overall fraction, `None` when nothing was evaluated.
    pub fn score(&self) -> Option<f64> {
        self.overall.fraction()
    }

    pub fn keypoint(&self, k: Keypoint) -> Option<f64> {
        self.per_keypoint[k.index()].fraction()
    }

    /// Column value of a part group: the mean of its defined per-keypoint fractions.
    pub fn part(&self, keypoints: &[Keypoint]) -> Option<f64> {
        let vals: Vec<f64> = keypoints.iter().filter_map(|&k| self.keypoint(k)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Tab-separated per-part table followed by a `key=value` block.
    pub fn render(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|v| format!("{:.1}", 100.0 * v)).unwrap_or_else(|| "-".into());
        let mut s = String::new();
        let header: Vec<&str> = PART_GROUPS.iter().map(|(n, _)| *n).collect();
        let _ = writeln!(s, "{}\tTotal", header.join("\t"));
        let cells: Vec<String> = PART_GROUPS.iter().map(|(_, ks)| fmt(self.part(ks))).collect();
        let _ = writeln!(s, "{}\t{}", cells.join("\t"), fmt(self.score()));
        s.push('\n');
        let _ = writeln!(s, "alpha={}", self.alpha);
        let _ = writeln!(s, "normalization={}", self.normalization.name());
        let _ = writeln!(s, "samples={}", self.samples);
        let _ = writeln!(s, "evaluated={}", self.overall.evaluated);
        let _ = writeln!(s, "correct={}", self.overall.correct);
        let _ = writeln!(
            s,
            "overall={}",
            self.score().map(|v| format!("{v:.6}")).unwrap_or_else(|| "undefined".into())
        );
        for k in Keypoint::ALL {
            let v = self.keypoint(k).map(|v| format!("{v:.6}")).unwrap_or_else(|| "undefined".into());
            let _ = writeln!(s, "pck.{}={v}", k.name());
        }
        s
    }
}

/// Scores `preds` against `gts` under `cfg`.
pub fn pck<A: Annotated>(preds: &[KeypointSet], gts: &[A], cfg: &PckConfig) -> Result<PckReport> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} groundtruth samples",
            preds.len(),
            gts.len()
        )));
    }
    if !(cfg.alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {}", cfg.alpha)));
    }
    let mut per_keypoint = [Tally::default(); NUM_KEYPOINTS];
    for (m, (pred, gt)) in preds.iter().zip(gts).enumerate() {
        let label = gt.label();
        let h = cfg.normalization.length(label);
        if !(h > 0.0) {
            return Err(Error::invalid(format!(
                "sample {m}: normalization length {h} is not positive"
            )));
        }
        for k in Keypoint::ALL {
            if !cfg.selects(&label.keypoints, k) {
                continue;
            }
            let t = &mut per_keypoint[k.index()];
            t.evaluated += 1;
            if pred.is_visible(k) && pred.point(k).dist(label.keypoints.point(k)) / h < cfg.alpha {
                t.correct += 1;
            }
        }
    }
    let overall = per_keypoint.iter().fold(Tally::default(), |acc, t| Tally {
        correct: acc.correct + t.correct,
        evaluated: acc.evaluated + t.evaluated,
    });
    Ok(PckReport {
        alpha: cfg.alpha,
        normalization: cfg.normalization,
        samples: preds.len(),
        overall,
        per_keypoint,
    })
}

/// One report per threshold.
pub fn pck_sweep<A: Annotated>(
    preds: &[KeypointSet],
    gts: &[A],
    alphas: &[f64],
    cfg: &PckConfig,
) -> Result<Vec<PckReport>> {
    if alphas.is_empty() {
        return Err(Error::invalid("pck_sweep needs at least one alpha"));
    }
    alphas
        .iter()
        .map(|&alpha| pck(preds, gts, &PckConfig { alpha, ..cfg.clone() }))
        .collect()
}

/// PCK restricted to occluded keypoints that are recoverable from visible neighbours.
pub fn occluded_subset<A: Annotated>(preds: &[KeypointSet], gts: &[A], cfg: &PckConfig) -> Result<PckReport> {
    pck(
        preds,
        gts,
        &PckConfig {
            filter: KeypointFilter::RecoverableOccluded,
            ..cfg.clone()
        },
    )
}
