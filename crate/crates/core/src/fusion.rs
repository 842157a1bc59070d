//! Late fusion: weighted sums of final-layer scores from networks that each
//! see a different view (full image, foreground, background) of a sample.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_bg, build_fg, AnnotatedSample, DatasetVariant};
use crate::error::{Error, Result};
use crate::eval::{predict_image, rank_of, topk_accuracy, PatchProtocol, ScoreRecord};
use crate::geometry::{BoxRect, Ratio};
use crate::imaging;
use crate::nn::Network;
use crate::proposals::ScoredBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Orig,
    Fg,
    Bg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Guided,
    Unguided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionMember {
    /// Network identifier; the CLI reads it as a checkpoint path.
    pub ckpt: String,
    pub role: Role,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

fn default_k() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub members: Vec<FusionMember>,
    #[serde(default)]
    pub mode: FusionMode,
    #[serde(default = "default_k")]
    pub proposal_k: usize,
}

impl FusionSpec {
    /// Equal weights over the given members.
    pub fn equal(mode: FusionMode, members: &[(&str, Role)]) -> Self {
        Self {
            members: members
                .iter()
                .map(|(id, role)| FusionMember {
                    ckpt: id.to_string(),
                    role: *role,
                    weight: 1.0,
                })
                .collect(),
            mode,
            proposal_k: default_k(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::Config("fusion needs at least one member".into()));
        }
        if let Some(m) = self.members.iter().find(|m| !m.weight.is_finite()) {
            return Err(Error::Config(format!(
                "member {} has non-finite weight",
                m.ckpt
            )));
        }
        for (i, a) in self.members.iter().enumerate() {
            if self.members[..i]
                .iter()
                .any(|b| b.ckpt == a.ckpt && b.role == a.role)
            {
                return Err(Error::Config(format!(
                    "{} appears twice as {:?}",
                    a.ckpt, a.role
                )));
            }
        }
        if self.mode == FusionMode::Unguided && self.proposal_k == 0 {
            return Err(Error::Config("proposal_k must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.weight).collect()
    }
}

/// `sum_i weights[i] * scores[i]`, accumulated in member order.
pub fn weighted_sum(weights: &[f64], scores: &[&[f32]]) -> Result<Vec<f64>> {
    if weights.len() != scores.len() || scores.is_empty() {
        return Err(Error::Config(format!(
            "{} weights for {} score vectors",
            weights.len(),
            scores.len()
        )));
    }
    let c = scores[0].len();
    let mut out = vec![0.0f64; c];
    for (w, s) in weights.iter().zip(scores) {
        if s.len() != c {
            return Err(Error::CategoryMismatch(s.len(), c));
        }
        for (o, &v) in out.iter_mut().zip(*s) {
            *o += w * v as f64;
        }
    }
    Ok(out)
}

fn check_nets(spec: &FusionSpec, nets: &[&Network<f32>]) -> Result<()> {
    spec.validate()?;
    if nets.len() != spec.members.len() {
        return Err(Error::Config(format!(
            "{} networks for {} members",
            nets.len(),
            spec.members.len()
        )));
    }
    let c = nets[0].category_count();
    match nets.iter().find(|n| n.category_count() != c) {
        Some(n) => Err(Error::CategoryMismatch(n.category_count(), c)),
        None => Ok(()),
    }
}

/// Each member's ten-patch scores on its ground-truth view of `sample`.
pub fn guided_member_scores(
    spec: &FusionSpec,
    nets: &[&Network<f32>],
    sample: &AnnotatedSample,
) -> Result<Vec<Vec<f32>>> {
    check_nets(spec, nets)?;
    if sample.boxes.is_empty() {
        return Err(Error::NoBoxes);
    }
    let fg = build_fg(sample)?;
    let bg = build_bg(sample)?;
    spec.members
        .iter()
        .zip(nets)
        .map(|(m, net)| {
            let view = match m.role {
                Role::Orig => &sample.image,
                Role::Fg => &fg,
                Role::Bg => &bg,
            };
            predict_image(net, view, PatchProtocol::Ten)
        })
        .collect()
}

pub fn guided_fuse(
    spec: &FusionSpec,
    nets: &[&Network<f32>],
    sample: &AnnotatedSample,
) -> Result<Vec<f64>> {
    let scores = guided_member_scores(spec, nets, sample)?;
    weighted_sum(
        &spec.weights(),
        &scores.iter().map(Vec::as_slice).collect::<Vec<_>>(),
    )
}

/// Mean center-crop scores of `net` over views built from each proposal.
pub fn proposal_average(
    net: &Network<f32>,
    image: &RgbImage,
    proposals: &[BoxRect],
    role: Role,
) -> Result<Vec<f32>> {
    if proposals.is_empty() {
        return Err(Error::Empty("proposal list"));
    }
    let rows = proposals
        .iter()
        .map(|p| {
            let view = match role {
                Role::Fg => imaging::crop(image, p),
                Role::Bg => {
                    let mut v = image.clone();
                    imaging::zero_boxes(&mut v, std::slice::from_ref(p));
                    v
                }
                Role::Orig => image.clone(),
            };
            predict_image(net, &view, PatchProtocol::Center)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mut acc = vec![0.0f64; rows[0].len()];
    for r in &rows {
        for (a, &v) in acc.iter_mut().zip(r) {
            *a += v as f64;
        }
    }
    Ok(acc.iter().map(|a| (a / n) as f32).collect())
}

/// Each member's scores without ground truth: FG and BG members average over
/// the first `proposal_k` proposals, Orig members see the whole image.
pub fn unguided_member_scores(
    spec: &FusionSpec,
    nets: &[&Network<f32>],
    image: &RgbImage,
    proposals: &[BoxRect],
) -> Result<Vec<Vec<f32>>> {
    check_nets(spec, nets)?;
    let top = &proposals[..proposals.len().min(spec.proposal_k)];
    spec.members
        .iter()
        .zip(nets)
        .map(|(m, net)| match m.role {
            Role::Orig => predict_image(net, image, PatchProtocol::Ten),
            role => proposal_average(net, image, top, role),
        })
        .collect()
}

pub fn unguided_fuse(
    spec: &FusionSpec,
    nets: &[&Network<f32>],
    image: &RgbImage,
    proposals: &[BoxRect],
) -> Result<Vec<f64>> {
    let scores = unguided_member_scores(spec, nets, image, proposals)?;
    weighted_sum(
        &spec.weights(),
        &scores.iter().map(Vec::as_slice).collect::<Vec<_>>(),
    )
}

/// Per-member scores for every sample of an original-image test variant.
/// `member_scores[m][i]` is member `m` on sample `i`.
pub struct MemberScores {
    pub source_ids: Vec<String>,
    pub labels: Vec<u32>,
    pub member_scores: Vec<Vec<Vec<f32>>>,
}

impl MemberScores {
    pub fn compute(
        spec: &FusionSpec,
        nets: &[&Network<f32>],
        variant: &DatasetVariant,
        proposals: Option<&BTreeMap<String, Vec<ScoredBox>>>,
    ) -> Result<Self> {
        check_nets(spec, nets)?;
        let items: Vec<_> = match spec.mode {
            FusionMode::Guided => variant
                .items
                .iter()
                .filter(|i| !i.record.boxes.is_empty())
                .collect(),
            FusionMode::Unguided => variant.items.iter().collect(),
        };
        if items.is_empty() {
            return Err(Error::Empty("fusion test set"));
        }
        let per_sample = items
            .par_iter()
            .map(|item| match spec.mode {
                FusionMode::Guided => {
                    let s = AnnotatedSample::new(
                        item.record.source_id.clone(),
                        item.image.clone(),
                        item.record.boxes.clone(),
                        item.record.label,
                    )?;
                    guided_member_scores(spec, nets, &s)
                }
                FusionMode::Unguided => {
                    let boxes: Vec<BoxRect> = proposals
                        .and_then(|p| p.get(&item.record.source_id))
                        .map(|v| v.iter().map(|s| s.rect).collect())
                        .unwrap_or_default();
                    unguided_member_scores(spec, nets, &item.image, &boxes)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut member_scores = vec![Vec::with_capacity(items.len()); spec.members.len()];
        for sample in per_sample {
            for (m, s) in sample.into_iter().enumerate() {
                member_scores[m].push(s);
            }
        }
        Ok(Self {
            source_ids: items.iter().map(|i| i.record.source_id.clone()).collect(),
            labels: items.iter().map(|i| i.record.label).collect(),
            member_scores,
        })
    }

    /// Joins score dumps of several members on `source_id`; only samples
    /// present in every dump are kept.
    pub fn from_records(dumps: &[Vec<ScoreRecord>]) -> Result<Self> {
        let Some(first) = dumps.first() else {
            return Err(Error::Empty("score dump list"));
        };
        let maps: Vec<BTreeMap<&str, &ScoreRecord>> = dumps
            .iter()
            .map(|d| d.iter().map(|r| (r.source_id.as_str(), r)).collect())
            .collect();
        let mut ids: Vec<&str> = first.iter().map(|r| r.source_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.retain(|id| maps.iter().all(|m| m.contains_key(id)));
        if ids.is_empty() {
            return Err(Error::Empty("samples shared by all score dumps"));
        }
        Ok(Self {
            labels: ids.iter().map(|id| maps[0][id].label).collect(),
            member_scores: maps
                .iter()
                .map(|m| ids.iter().map(|id| m[id].scores.clone()).collect())
                .collect(),
            source_ids: ids.into_iter().map(String::from).collect(),
        })
    }

    pub fn fused(&self, weights: &[f64]) -> Result<Vec<Vec<f64>>> {
        (0..self.labels.len())
            .map(|i| {
                let rows: Vec<&[f32]> =
                    self.member_scores.iter().map(|m| m[i].as_slice()).collect();
                weighted_sum(weights, &rows)
            })
            .collect()
    }

    pub fn member_top1(&self, m: usize) -> Result<Ratio> {
        topk_accuracy(&self.member_scores[m], &self.labels, 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub mode: FusionMode,
    pub weights: Vec<f64>,
    pub samples: usize,
    pub top1: Ratio,
    pub top5: Ratio,
    /// Top-1 of each member on its own view.
    pub member_top1: Vec<Ratio>,
}

pub fn fusion_report(spec: &FusionSpec, scores: &MemberScores) -> Result<FusionReport> {
    let weights = spec.weights();
    let fused = scores.fused(&weights)?;
    let c = fused[0].len();
    Ok(FusionReport {
        mode: spec.mode,
        samples: fused.len(),
        top1: topk_accuracy(&fused, &scores.labels, 1)?,
        top5: topk_accuracy(&fused, &scores.labels, 5.min(c))?,
        member_top1: (0..weights.len())
            .map(|m| scores.member_top1(m))
            .collect::<Result<_>>()?,
        weights,
    })
}

/// Grid search over the weight simplex with resolution `1/steps`, maximizing
/// top-1 on a held-out set. Ties go to the weights closest to equal, then to
/// the first in enumeration order.
pub fn tune_weights(scores: &MemberScores, steps: usize) -> Result<Vec<f64>> {
    let m = scores.member_scores.len();
    if scores.labels.is_empty() {
        return Err(Error::Empty("held-out set"));
    }
    if m == 0 || steps == 0 {
        return Err(Error::Config(
            "tuning needs members and a positive step count".into(),
        ));
    }
    let equal = 1.0 / m as f64;
    let mut best: Option<(u64, f64, Vec<f64>)> = None;
    for parts in compositions(steps, m) {
        let w: Vec<f64> = parts.iter().map(|&p| p as f64 / steps as f64).collect();
        let fused = scores.fused(&w)?;
        let hits = fused
            .iter()
            .zip(&scores.labels)
            .filter(|(f, &l)| rank_of(f, l as usize) == 0)
            .count() as u64;
        let dist: f64 = w.iter().map(|x| (x - equal) * (x - equal)).sum();
        let better = match &best {
            None => true,
            Some((h, d, _)) => hits > *h || (hits == *h && dist < *d - 1e-12),
        };
        if better {
            best = Some((hits, dist, w));
        }
    }
    Ok(best.expect("at least one composition").2)
}

/// All ways to write `total` as an ordered sum of `parts` non-negative integers.
fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    (0..=total)
        .rev()
        .flat_map(|first| {
            compositions(total - first, parts - 1)
                .into_iter()
                .map(move |mut rest| {
                    rest.insert(0, first);
                    rest
                })
        })
        .collect()
}
