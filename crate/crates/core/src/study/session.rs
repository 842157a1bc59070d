use std::collections::{BTreeMap, BTreeSet};

use image::RgbImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::StudyError;
use crate::dataset::DatasetVariant;
use crate::eval::{predict_image, topk_accuracy, PatchProtocol};
use crate::geometry::Ratio;
use crate::nn::Network;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Fg,
    Bg,
}

impl std::str::FromStr for Condition {
    type Err = StudyError;

    fn from_str(s: &str) -> Result<Self, StudyError> {
        match s {
            "fg" => Ok(Self::Fg),
            "bg" => Ok(Self::Bg),
            other => Err(StudyError::UnknownCondition(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub label: u32,
    pub name: String,
}

/// Test images of one condition, with coarse labels.
pub struct StudyPool {
    pub condition: Condition,
    pub roster: Vec<RosterEntry>,
    pub source_ids: Vec<String>,
    pub labels: Vec<u32>,
    pub images: Vec<RgbImage>,
}

impl StudyPool {
    /// `names[label]` is the display name; missing names fall back to
    /// `category-<label>`.
    pub fn from_variant(condition: Condition, variant: &DatasetVariant, names: &[String]) -> Self {
        let present: BTreeSet<u32> = variant.items.iter().map(|i| i.record.label).collect();
        Self {
            condition,
            roster: present
                .into_iter()
                .map(|label| RosterEntry {
                    label,
                    name: names
                        .get(label as usize)
                        .cloned()
                        .unwrap_or_else(|| format!("category-{label}")),
                })
                .collect(),
            source_ids: variant
                .items
                .iter()
                .map(|i| i.record.source_id.clone())
                .collect(),
            labels: variant.labels(),
            images: variant.items.iter().map(|i| i.image.clone()).collect(),
        }
    }

    pub fn index_of(&self, source_id: &str) -> Option<usize> {
        self.source_ids.iter().position(|s| s == source_id)
    }

    pub fn name_of(&self, label: u32) -> String {
        self.roster
            .iter()
            .find(|r| r.label == label)
            .map_or_else(|| format!("category-{label}"), |r| r.name.clone())
    }
}

/// Draws `count` distinct pool indices. With `cover` set, every roster
/// category contributes at least one image before the rest is filled at
/// random; the final list is shuffled.
pub fn sample_trials(
    pool: &StudyPool,
    count: usize,
    cover: bool,
    seed: u64,
) -> Result<Vec<usize>, StudyError> {
    if count == 0 {
        return Err(StudyError::BadRequest(
            "trial_count must be positive".into(),
        ));
    }
    if count > pool.labels.len() {
        return Err(StudyError::NotEnoughImages {
            wanted: count,
            available: pool.labels.len(),
        });
    }
    if cover && count < pool.roster.len() {
        return Err(StudyError::CoverageImpossible {
            trials: count,
            categories: pool.roster.len(),
        });
    }
    let mut rng = seed::rng(seed);
    let mut chosen = Vec::with_capacity(count);
    let mut taken = vec![false; pool.labels.len()];
    if cover {
        for entry in &pool.roster {
            let members: Vec<usize> = (0..pool.labels.len())
                .filter(|&i| pool.labels[i] == entry.label)
                .collect();
            let &pick = members
                .choose(&mut rng)
                .expect("roster labels come from the pool");
            taken[pick] = true;
            chosen.push(pick);
        }
    }
    let mut rest: Vec<usize> = (0..pool.labels.len()).filter(|&i| !taken[i]).collect();
    rest.shuffle(&mut rng);
    chosen.extend(rest.into_iter().take(count - chosen.len()));
    chosen.shuffle(&mut rng);
    Ok(chosen)
}

/// Persisted session history. Replaying the events rebuilds the session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        condition: Condition,
        seed: u64,
        trials: Vec<String>,
    },
    Served {
        index: usize,
    },
    Response {
        index: usize,
        picks: Vec<u32>,
        #[serde(default)]
        elapsed_ms: Option<u64>,
        received_unix_ms: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub picks: Vec<u32>,
    pub elapsed_ms: Option<u64>,
    pub received_unix_ms: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub id: String,
    pub condition: Condition,
    pub seed: u64,
    /// Source ids in presentation order.
    pub trials: Vec<String>,
    pub served: usize,
    pub responses: BTreeMap<usize, Response>,
}

pub fn trial_id(session: &str, index: usize) -> String {
    format!("{session}-t{index}")
}

/// Splits a trial id into session id and index.
pub fn parse_trial_id(trial: &str) -> Option<(&str, usize)> {
    let (s, i) = trial.rsplit_once("-t")?;
    Some((s, i.parse().ok()?))
}

impl Session {
    pub fn replay(events: &[Event]) -> Result<Self, StudyError> {
        let Some(Event::Created {
            session_id,
            condition,
            seed,
            trials,
        }) = events.first()
        else {
            return Err(StudyError::Storage(
                "session log does not start with creation".into(),
            ));
        };
        let mut s = Session {
            id: session_id.clone(),
            condition: *condition,
            seed: *seed,
            trials: trials.clone(),
            served: 0,
            responses: BTreeMap::new(),
        };
        for e in &events[1..] {
            s.apply(e)?;
        }
        Ok(s)
    }

    pub fn apply(&mut self, event: &Event) -> Result<(), StudyError> {
        match event {
            Event::Created { .. } => {
                return Err(StudyError::Storage("second creation event".into()))
            }
            Event::Served { index } => {
                if *index != self.served || *index >= self.trials.len() {
                    return Err(StudyError::Storage(format!(
                        "out-of-order serve of trial {index}"
                    )));
                }
                self.served += 1;
            }
            Event::Response {
                index,
                picks,
                elapsed_ms,
                received_unix_ms,
            } => {
                self.responses.insert(
                    *index,
                    Response {
                        picks: picks.clone(),
                        elapsed_ms: *elapsed_ms,
                        received_unix_ms: *received_unix_ms,
                    },
                );
            }
        }
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.responses.len() == self.trials.len()
    }

    pub fn remaining(&self) -> usize {
        self.trials.len() - self.responses.len()
    }

    /// The trial to show next: a served but unanswered trial if one exists,
    /// otherwise the next unserved one (which the caller must record as
    /// served). `None` when the session is complete.
    pub fn next_trial(&self) -> Option<(usize, bool)> {
        if let Some(i) = (0..self.served).find(|i| !self.responses.contains_key(i)) {
            return Some((i, false));
        }
        (self.served < self.trials.len()).then_some((self.served, true))
    }

    /// Validates a response against the session state and roster.
    pub fn check_response(
        &self,
        trial: &str,
        picks: &[u32],
        roster: &[RosterEntry],
    ) -> Result<usize, StudyError> {
        let index = match parse_trial_id(trial) {
            Some((sid, i)) if sid == self.id && i < self.trials.len() => i,
            _ => return Err(StudyError::UnknownTrial(trial.to_string())),
        };
        if self.is_complete() {
            return Err(StudyError::SessionComplete(self.id.clone()));
        }
        if index >= self.served {
            return Err(StudyError::TrialNotServed(trial.to_string()));
        }
        if self.responses.contains_key(&index) {
            return Err(StudyError::DuplicateResponse(trial.to_string()));
        }
        if picks.is_empty() || picks.len() > 5 {
            return Err(StudyError::PickCount(picks.len()));
        }
        for (i, p) in picks.iter().enumerate() {
            if picks[..i].contains(p) {
                return Err(StudyError::DuplicatePick(*p));
            }
            if !roster.iter().any(|r| r.label == *p) {
                return Err(StudyError::PickOutsideRoster(*p));
            }
        }
        Ok(index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetColumns {
    pub net_id: String,
    pub top1: Ratio,
    pub top5: Ratio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub label: u32,
    pub name: String,
    pub answered: usize,
    pub human_top1: Ratio,
    pub human_top5: Ratio,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub net_top1: Option<Ratio>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub session_id: String,
    pub condition: Condition,
    pub answered: usize,
    pub trials: usize,
    pub complete: bool,
    pub human_top1: Ratio,
    pub human_top5: Ratio,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub network: Option<NetColumns>,
    pub per_category: Vec<CategoryRow>,
}

/// Human accuracy on answered trials, plus network accuracy on exactly the
/// same images when a network is given.
pub fn build_report(
    session: &Session,
    pool: &StudyPool,
    net: Option<(&str, &Network<f32>)>,
    partial: bool,
) -> Result<StudyReport, StudyError> {
    if session.responses.is_empty() {
        return Err(StudyError::NoAnswers(session.id.clone()));
    }
    if !session.is_complete() && !partial {
        return Err(StudyError::Incomplete(session.id.clone()));
    }
    let mut labels = Vec::new();
    let mut images = Vec::new();
    let mut top1 = Vec::new();
    let mut top5 = Vec::new();
    for (&i, r) in &session.responses {
        let idx = pool.index_of(&session.trials[i]).ok_or_else(|| {
            StudyError::Storage(format!(
                "trial image {} missing from pool",
                session.trials[i]
            ))
        })?;
        let label = pool.labels[idx];
        labels.push(label);
        images.push(&pool.images[idx]);
        top1.push(r.picks.first() == Some(&label));
        top5.push(r.picks.contains(&label));
    }
    let n = labels.len() as u64;
    let count = |v: &[bool]| v.iter().filter(|&&b| b).count() as u64;

    let (network, net_hits) = match net {
        None => (None, None),
        Some((id, net)) => {
            let scores = images
                .iter()
                .map(|img| predict_image(net, img, PatchProtocol::Ten))
                .collect::<crate::Result<Vec<_>>>()
                .map_err(|e| StudyError::Storage(e.to_string()))?;
            let err = |e: crate::Error| StudyError::BadRequest(e.to_string());
            let c = net.category_count();
            let cols = NetColumns {
                net_id: id.to_string(),
                top1: topk_accuracy(&scores, &labels, 1).map_err(err)?,
                top5: topk_accuracy(&scores, &labels, 5.min(c)).map_err(err)?,
            };
            let hits: Vec<bool> = scores
                .iter()
                .zip(&labels)
                .map(|(s, &l)| crate::eval::rank_of(s, l as usize) == 0)
                .collect();
            (Some(cols), Some(hits))
        }
    };

    let mut per: BTreeMap<u32, (usize, u64, u64, u64)> = BTreeMap::new();
    for (k, &l) in labels.iter().enumerate() {
        let e = per.entry(l).or_default();
        e.0 += 1;
        e.1 += top1[k] as u64;
        e.2 += top5[k] as u64;
        e.3 += net_hits.as_ref().map_or(0, |h| h[k] as u64);
    }
    Ok(StudyReport {
        session_id: session.id.clone(),
        condition: session.condition,
        answered: labels.len(),
        trials: session.trials.len(),
        complete: session.is_complete(),
        human_top1: Ratio::of(count(&top1), n),
        human_top5: Ratio::of(count(&top5), n),
        network,
        per_category: per
            .into_iter()
            .map(|(label, (a, h1, h5, nh))| CategoryRow {
                label,
                name: pool.name_of(label),
                answered: a,
                human_top1: Ratio::of(h1, a as u64),
                human_top5: Ratio::of(h5, a as u64),
                net_top1: net_hits.as_ref().map(|_| Ratio::of(nh, a as u64)),
            })
            .collect(),
    })
}
