//! Community inference: momentum over observed models, relevance ranking
//! against a target item set, and the entropy-MIA / gradient-AIA proxies.

mod aia;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{InteractionDataset, ItemId, UserId};
use crate::defenses::SharedModel;
use crate::error::{Error, Result};
use crate::linalg::{ema, mix_seed, Matrix};
use crate::metrics::{accuracy_at_round, ground_truth, AdversaryTrace, GroundTruth};
use crate::models::{gmf_logit, prme_score, score_row, ModelKind, RecModel, TrainConfig};

pub use aia::{aia_proxy, AiaClassifier, AiaConfig, Mlp};

/// What the adversary is looking for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    /// Sorted, deduplicated target items.
    pub items: Vec<ItemId>,
    pub k: usize,
    pub beta: f64,
    /// User whose train set the target was taken from, if any.
    pub owner: Option<UserId>,
}

impl TargetSpec {
    pub fn new(mut items: Vec<ItemId>, k: usize, beta: f64, n_users: usize) -> Result<Self> {
        items.sort_unstable();
        items.dedup();
        if items.is_empty() {
            return Err(Error::Config("target item set is empty".into()));
        }
        if k == 0 || k > n_users {
            return Err(Error::Config(format!("K={k} must be in 1..={n_users}")));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Config(format!("beta={beta} must be in [0,1)")));
        }
        Ok(TargetSpec {
            items,
            k,
            beta,
            owner: None,
        })
    }

    pub fn of_user(dataset: &InteractionDataset, owner: UserId, k: usize, beta: f64) -> Result<Self> {
        let mut t = TargetSpec::new(dataset.train(owner).to_vec(), k, beta, dataset.n_users())?;
        t.owner = Some(owner);
        Ok(t)
    }
}

/// Item rows an adversary keeps in its momentum models. Relevance only ever
/// reads target rows, so a single-target adversary stores just those.
#[derive(Clone, Debug)]
pub enum Projection {
    All { n_items: usize },
    Rows {
        items: Vec<ItemId>,
        slot: HashMap<ItemId, usize>,
    },
}

impl Projection {
    pub fn rows(mut items: Vec<ItemId>) -> Self {
        items.sort_unstable();
        items.dedup();
        let slot = items.iter().enumerate().map(|(s, &i)| (i, s)).collect();
        Projection::Rows { items, slot }
    }

    /// Union of the targets' items, or every item when that is smaller.
    pub fn for_targets(targets: &[TargetSpec], n_items: usize) -> Self {
        let union: BTreeSet<ItemId> = targets.iter().flat_map(|t| t.items.iter().copied()).collect();
        if union.len() * 2 >= n_items {
            Projection::All { n_items }
        } else {
            Projection::rows(union.into_iter().collect())
        }
    }

    fn len(&self) -> usize {
        match self {
            Projection::All { n_items } => *n_items,
            Projection::Rows { items, .. } => items.len(),
        }
    }

    fn slot_of(&self, item: ItemId) -> Option<usize> {
        match self {
            Projection::All { n_items } => (item < *n_items).then_some(item),
            Projection::Rows { slot, .. } => slot.get(&item).copied(),
        }
    }
}

/// Momentum model `M_u`: the projected parameters of a sender's models,
/// averaged as `M = beta * M + (1 - beta) * theta` after the first one.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumModel {
    /// Sender's own user row; absent when it was withheld.
    pub user_row: Option<Vec<f64>>,
    /// Projected item rows, `projection.len() * dim`, row-major.
    pub items: Vec<f64>,
    pub head: Option<Vec<f64>>,
    pub observations: usize,
    pub last_round: usize,
}

impl MomentumModel {
    fn item_row(&self, slot: usize, dim: usize) -> &[f64] {
        &self.items[slot * dim..(slot + 1) * dim]
    }
}

/// Per-coalition adversary state.
#[derive(Clone, Debug)]
pub struct AdversaryState {
    pub momentum: BTreeMap<UserId, MomentumModel>,
    pub observed: BTreeSet<UserId>,
    pub colluder_ids: BTreeSet<UserId>,
    pub projection: Projection,
    pub beta: f64,
    pub dim: usize,
    /// Momentum messages forwarded between colluders.
    pub multicasts: u64,
}

impl AdversaryState {
    pub fn new(projection: Projection, beta: f64, dim: usize, colluders: impl IntoIterator<Item = UserId>) -> Self {
        AdversaryState {
            momentum: BTreeMap::new(),
            observed: BTreeSet::new(),
            colluder_ids: colluders.into_iter().collect(),
            projection,
            beta,
            dim,
            multicasts: 0,
        }
    }

    fn project(&self, model: &SharedModel) -> Vec<f64> {
        let src = model.item_emb();
        let d = self.dim;
        let mut out = Vec::with_capacity(self.projection.len() * d);
        match &self.projection {
            Projection::All { .. } => out.extend_from_slice(src.as_slice()),
            Projection::Rows { items, .. } => {
                for &i in items {
                    out.extend_from_slice(src.row(i));
                }
            }
        }
        out
    }

    /// Folds one received model of `sender` into its momentum model.
    pub fn observe(&mut self, sender: UserId, model: &SharedModel, round: usize) -> Result<()> {
        let items = model.item_emb();
        if items.cols() != self.dim {
            return Err(Error::Protocol(format!(
                "model from user {sender} has dim {}, expected {}",
                items.cols(),
                self.dim
            )));
        }
        if let Projection::All { n_items } = self.projection {
            if items.rows() != n_items {
                return Err(Error::Protocol(format!(
                    "model from user {sender} has {} items, expected {n_items}",
                    items.rows()
                )));
            }
        } else if let Projection::Rows { items: rows, .. } = &self.projection {
            if rows.last().is_some_and(|&i| i >= items.rows()) {
                return Err(Error::Protocol(format!("model from user {sender} is missing target rows")));
            }
        }
        let user_row = model.user_row(sender).map(<[f64]>::to_vec);
        let projected = self.project(model);
        let head = model.head().map(<[f64]>::to_vec);
        let beta = self.beta;
        match self.momentum.get_mut(&sender) {
            None => {
                self.momentum.insert(
                    sender,
                    MomentumModel {
                        user_row,
                        items: projected,
                        head,
                        observations: 1,
                        last_round: round,
                    },
                );
            }
            Some(m) => {
                if m.user_row.is_some() != user_row.is_some() || m.head.is_some() != head.is_some() {
                    return Err(Error::Protocol(format!("user {sender} changed its model layout")));
                }
                if let (Some(mr), Some(r)) = (m.user_row.as_mut(), user_row.as_ref()) {
                    ema(beta, r, mr);
                }
                ema(beta, &projected, &mut m.items);
                if let (Some(mh), Some(h)) = (m.head.as_mut(), head.as_ref()) {
                    ema(beta, h, mh);
                }
                m.observations += 1;
                m.last_round = round;
            }
        }
        self.observed.insert(sender);
        // colluders forward the updated momentum to each other
        self.multicasts += self.colluder_ids.len().saturating_sub(1) as u64;
        Ok(())
    }
}

/// Mean predicted relevance of `target_items` for user `u` under `model`.
pub fn relevance(model: &RecModel, u: UserId, target_items: &[ItemId], kind: ModelKind) -> Result<f64> {
    for &i in target_items {
        model.check_ids(u, i)?;
    }
    Ok(relevance_with_row(
        model.user_emb.row(u),
        &model.item_emb,
        model.head.as_deref(),
        target_items,
        kind,
    ))
}

/// Relevance with an explicit user row (the owner's or a fictive one).
pub fn relevance_with_row(
    user_row: &[f64],
    item_emb: &Matrix,
    head: Option<&[f64]>,
    target_items: &[ItemId],
    kind: ModelKind,
) -> f64 {
    if target_items.is_empty() {
        return 0.0;
    }
    target_items
        .iter()
        .map(|&i| score_row(kind, user_row, item_emb.row(i), head))
        .sum::<f64>()
        / target_items.len() as f64
}

/// Top-`k` users by score, ties broken by lower id.
pub fn predict_community(scores: &BTreeMap<UserId, f64>, k: usize) -> Vec<UserId> {
    let mut ranked: Vec<(UserId, f64)> = scores.iter().map(|(&u, &s)| (u, s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(k).map(|(u, _)| u).collect()
}

/// Binary entropy in bits.
pub fn binary_entropy(p: f64) -> f64 {
    let h = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.log2() };
    h(p) + h(1.0 - p)
}

/// Whether the entropy MIA flags a prediction as a training member.
#[inline]
pub fn mia_member(p: f64, rho: f64) -> bool {
    p > 0.5 && binary_entropy(p) < rho
}

/// Entropy-threshold membership proxy: rank observed users by how many
/// target items they confidently predict as positives.
pub fn mia_proxy(state: &AdversaryState, target: &TargetSpec, rho: f64, kind: ModelKind) -> Result<Vec<UserId>> {
    let mut counts = BTreeMap::new();
    for (&u, m) in &state.momentum {
        let row = m
            .user_row
            .as_deref()
            .ok_or_else(|| Error::Attack(format!("no user row for {u}; MIA proxy needs full models")))?;
        let mut count = 0usize;
        for &i in &target.items {
            let slot = state
                .projection
                .slot_of(i)
                .ok_or_else(|| Error::Attack(format!("item {i} outside the adversary projection")))?;
            let p = score_row(kind, row, m.item_row(slot, state.dim), m.head.as_deref());
            if kind == ModelKind::Gmf && mia_member(p, rho) {
                count += 1;
            }
        }
        counts.insert(u, count as f64);
    }
    Ok(predict_community(&counts, target.k))
}

/// Trains a fictive user row that likes `target_items` against frozen item
/// embeddings, with the same loss as the attacked model kind. Epochs come
/// from `cfg.local_epochs`.
pub fn fit_fictive_user(
    target_items: &[ItemId],
    item_emb: &Matrix,
    head: Option<&[f64]>,
    cfg: &TrainConfig,
    kind: ModelKind,
) -> Result<Vec<f64>> {
    let n_items = item_emb.rows();
    let d = item_emb.cols();
    if target_items.iter().any(|&i| i >= n_items) {
        return Err(Error::Index {
            kind: "item",
            id: *target_items.iter().max().unwrap(),
            len: n_items,
        });
    }
    if kind == ModelKind::Gmf && head.is_none() {
        return Err(Error::Shape("GMF fictive user needs output weights".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_std).expect("valid init std");
    let mut row: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
    let mut positives = target_items.to_vec();
    positives.sort_unstable();
    positives.dedup();
    let has_neg = positives.len() < n_items;
    let draw_negative = |rng: &mut ChaCha8Rng| loop {
        let i = rng.random_range(0..n_items);
        if positives.binary_search(&i).is_err() {
            break i;
        }
    };
    let mut samples: Vec<(ItemId, ItemId, f64)> = Vec::new();
    let mut grad = vec![0.0; d];
    for _ in 0..cfg.local_epochs {
        samples.clear();
        for &p in &positives {
            match kind {
                ModelKind::Gmf => {
                    samples.push((p, p, 1.0));
                    if has_neg {
                        for _ in 0..cfg.neg_ratio {
                            let n = draw_negative(&mut rng);
                            samples.push((n, n, 0.0));
                        }
                    }
                }
                ModelKind::Prme if has_neg => {
                    for _ in 0..cfg.neg_ratio {
                        samples.push((p, draw_negative(&mut rng), 0.0));
                    }
                }
                ModelKind::Prme => {}
            }
        }
        samples.shuffle(&mut rng);
        for batch in samples.chunks(cfg.batch_size) {
            grad.fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            for &(a, b, y) in batch {
                match kind {
                    ModelKind::Gmf => {
                        let h = head.unwrap();
                        let e = item_emb.row(a);
                        let dz = (crate::linalg::sigmoid(gmf_logit(&row, e, h)) - y) * scale;
                        for k in 0..d {
                            grad[k] += dz * h[k] * e[k];
                        }
                    }
                    ModelKind::Prme => {
                        let (ep, en) = (item_emb.row(a), item_emb.row(b));
                        let x = prme_score(&row, ep) - prme_score(&row, en);
                        let dx = (crate::linalg::sigmoid(x) - 1.0) * scale;
                        for k in 0..d {
                            grad[k] += dx * 2.0 * (ep[k] - en[k]);
                        }
                    }
                }
            }
            for k in 0..d {
                row[k] -= cfg.lr * grad[k];
            }
        }
    }
    Ok(row)
}

/// Deserializes either a single number or a list of numbers.
fn one_or_many<'de, D>(de: D) -> std::result::Result<Vec<f64>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(match OneOrMany::deserialize(de)? {
        OneOrMany::One(x) => vec![x],
        OneOrMany::Many(v) => v,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    Cia,
    Mia,
    Aia,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    UserTrainsetOf(UserId),
    Items(Vec<ItemId>),
}

fn default_k() -> usize {
    50
}

fn default_beta() -> f64 {
    0.99
}

fn default_adversaries() -> Option<usize> {
    Some(100)
}

fn default_fictive_epochs() -> usize {
    20
}

/// The `adversary` block of a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryConfig {
    #[serde(default)]
    pub kind: AttackKind,
    /// Explicit target; when absent every sampled adversary targets its own
    /// train set.
    #[serde(default)]
    pub target: Option<TargetSource>,
    #[serde(default = "default_k", alias = "K")]
    pub k: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Entropy thresholds for the MIA proxy, evaluated alongside CIA.
    #[serde(default, deserialize_with = "one_or_many")]
    pub rho: Vec<f64>,
    #[serde(default)]
    pub colluder_fraction: f64,
    /// Number of sampled adversaries; `None` lets every user play it.
    #[serde(default = "default_adversaries")]
    pub n_adversaries: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_fictive_epochs")]
    pub fictive_epochs: usize,
    #[serde(default)]
    pub aia: Option<AiaConfig>,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig {
            kind: AttackKind::Cia,
            target: None,
            k: default_k(),
            beta: default_beta(),
            rho: Vec::new(),
            colluder_fraction: 0.0,
            n_adversaries: default_adversaries(),
            seed: 0,
            fictive_epochs: default_fictive_epochs(),
            aia: None,
        }
    }
}

impl AdversaryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!("adversary.beta={} must be in [0,1)", self.beta)));
        }
        if self.k == 0 {
            return Err(Error::Config("adversary.K must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.colluder_fraction) {
            return Err(Error::Config(format!(
                "adversary.colluder_fraction={} must be in [0,1)",
                self.colluder_fraction
            )));
        }
        if self.rho.iter().any(|r| r.is_nan() || *r < 0.0) {
            return Err(Error::Config("adversary.rho values must be >= 0".into()));
        }
        if self.n_adversaries == Some(0) {
            return Err(Error::Config("adversary.n_adversaries must be >= 1".into()));
        }
        if self.kind == AttackKind::Mia && self.rho.is_empty() {
            return Err(Error::Config("adversary.kind = mia needs at least one rho".into()));
        }
        if self.kind == AttackKind::Aia && self.aia.is_none() {
            return Err(Error::Config("adversary.kind = aia needs an [adversary.aia] block".into()));
        }
        Ok(())
    }

    /// Target specs for the adversaries this config describes, each paired
    /// with its ground truth. Owners are drawn from `pool` when the target is
    /// implicit.
    pub fn build_targets(
        &self,
        dataset: &InteractionDataset,
        pool: &[UserId],
    ) -> Result<Vec<(TargetSpec, GroundTruth)>> {
        let n = dataset.n_users();
        let specs: Vec<TargetSpec> = match &self.target {
            Some(TargetSource::UserTrainsetOf(u)) => {
                if *u >= n {
                    return Err(Error::Index { kind: "user", id: *u, len: n });
                }
                vec![TargetSpec::of_user(dataset, *u, self.k, self.beta)?]
            }
            Some(TargetSource::Items(items)) => {
                if let Some(&bad) = items.iter().find(|&&i| i >= dataset.n_items()) {
                    return Err(Error::Index { kind: "item", id: bad, len: dataset.n_items() });
                }
                vec![TargetSpec::new(items.clone(), self.k, self.beta, n)?]
            }
            None => {
                let mut owners = pool.to_vec();
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &[0xAD]));
                owners.shuffle(&mut rng);
                if let Some(cap) = self.n_adversaries {
                    owners.truncate(cap);
                }
                owners.sort_unstable();
                owners
                    .into_iter()
                    .map(|u| TargetSpec::of_user(dataset, u, self.k, self.beta))
                    .collect::<Result<_>>()?
            }
        };
        specs
            .into_iter()
            .map(|t| {
                let gt = ground_truth(dataset, &t.items, t.k, t.owner)?;
                Ok((t, gt))
            })
            .collect()
    }
}

/// Hook the training protocols call when the adversary can see traffic.
pub trait AdversaryHook {
    /// Whether `receiver` (`None` = the federated server) is adversarial.
    fn observes(&self, receiver: Option<UserId>) -> bool;

    /// Called at the start of a federated round with the broadcast model.
    fn begin_round(&mut self, _round: usize, _global: Option<&SharedModel>) -> Result<()> {
        Ok(())
    }

    fn observe(&mut self, receiver: Option<UserId>, sender: UserId, model: &SharedModel, round: usize) -> Result<()>;

    /// End of a round (federated round or `N` gossip wake-ups).
    fn end_round(&mut self, _round: usize) -> Result<()> {
        Ok(())
    }

    /// Records accuracies for every adversary at this round.
    fn checkpoint(&mut self, round: usize) -> Result<()>;
}

/// Accuracy traces of one target over the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetOutcome {
    pub owner: Option<UserId>,
    pub n_target_items: usize,
    pub cia: AdversaryTrace,
    /// One trace per configured `rho`.
    pub mia: Vec<AdversaryTrace>,
    /// AIA accuracies at the rounds it was launched.
    pub aia: Vec<f64>,
    pub final_prediction: Vec<UserId>,
}

struct TargetState {
    spec: TargetSpec,
    truth: GroundTruth,
    outcome: TargetOutcome,
    fictive_row: Option<Vec<f64>>,
    aia: Option<AiaClassifier>,
    aia_scores: BTreeMap<UserId, f64>,
}

/// One adversary: the federated server, a single gossip node or a group of
/// colluding gossip nodes sharing their momentum models.
pub struct Adversary {
    pub members: Vec<UserId>,
    pub state: AdversaryState,
    targets: Vec<TargetState>,
    /// Running momentum of received item embeddings, used to fit fictive
    /// users when victims withhold their user rows.
    reference_items: Option<Matrix>,
    reference_head: Option<Vec<f64>>,
    round_sum: Option<(Matrix, Option<Vec<f64>>, usize)>,
}

impl Adversary {
    pub fn new(
        members: Vec<UserId>,
        targets: Vec<(TargetSpec, GroundTruth)>,
        n_items: usize,
        dim: usize,
        beta: f64,
        n_rho: usize,
    ) -> Self {
        let specs: Vec<TargetSpec> = targets.iter().map(|(t, _)| t.clone()).collect();
        let projection = Projection::for_targets(&specs, n_items);
        let state = AdversaryState::new(projection, beta, dim, members.iter().copied());
        let targets = targets
            .into_iter()
            .map(|(spec, truth)| TargetState {
                outcome: TargetOutcome {
                    owner: spec.owner,
                    n_target_items: spec.items.len(),
                    cia: AdversaryTrace::default(),
                    mia: vec![AdversaryTrace::default(); n_rho],
                    aia: Vec::new(),
                    final_prediction: Vec::new(),
                },
                spec,
                truth,
                fictive_row: None,
                aia: None,
                aia_scores: BTreeMap::new(),
            })
            .collect();
        Adversary {
            members,
            state,
            targets,
            reference_items: None,
            reference_head: None,
            round_sum: None,
        }
    }

    pub fn outcomes(&self) -> impl Iterator<Item = &TargetOutcome> {
        self.targets.iter().map(|t| &t.outcome)
    }

    fn accumulate_reference(&mut self, model: &SharedModel) {
        let items = model.item_emb();
        match &mut self.round_sum {
            None => {
                self.round_sum = Some((items.clone(), model.head().map(<[f64]>::to_vec), 1));
            }
            Some((sum, head, n)) => {
                crate::linalg::axpy(1.0, items.as_slice(), sum.as_mut_slice());
                if let (Some(h), Some(mh)) = (head.as_mut(), model.head()) {
                    crate::linalg::axpy(1.0, mh, h);
                }
                *n += 1;
            }
        }
    }

    /// Folds this round's mean received item embeddings into the reference
    /// momentum and refits the fictive users against it.
    fn refresh_fictive(&mut self, round: usize, kind: ModelKind, cfg: &TrainConfig) -> Result<()> {
        let Some((mut sum, mut head, n)) = self.round_sum.take() else {
            return Ok(());
        };
        let inv = 1.0 / n as f64;
        sum.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
        if let Some(h) = head.as_mut() {
            h.iter_mut().for_each(|v| *v *= inv);
        }
        let beta = self.state.beta;
        match self.reference_items.as_mut() {
            None => {
                self.reference_items = Some(sum);
                self.reference_head = head;
            }
            Some(r) => {
                ema(beta, sum.as_slice(), r.as_mut_slice());
                if let (Some(rh), Some(h)) = (self.reference_head.as_mut(), head.as_ref()) {
                    ema(beta, h, rh);
                }
            }
        }
        let items = self.reference_items.as_ref().unwrap();
        for (ti, t) in self.targets.iter_mut().enumerate() {
            let fcfg = cfg.reseeded(&[0xF1C7, ti as u64, round as u64]);
            t.fictive_row = Some(fit_fictive_user(&t.spec.items, items, self.reference_head.as_deref(), &fcfg, kind)?);
        }
        Ok(())
    }

    fn record_checkpoint(&mut self, kind: ModelKind, rhos: &[f64]) -> Result<()> {
        let d = self.state.dim;
        let proj = &self.state.projection;
        // score each needed item once per observed full model
        let mut needed: Vec<usize> = self
            .targets
            .iter()
            .flat_map(|t| t.spec.items.iter().filter_map(|&i| proj.slot_of(i)))
            .collect();
        needed.sort_unstable();
        needed.dedup();
        let mut cached: BTreeMap<UserId, Vec<f64>> = BTreeMap::new();
        for (&u, m) in &self.state.momentum {
            if let Some(row) = m.user_row.as_deref() {
                let mut scores = vec![f64::NAN; proj.len()];
                for &s in &needed {
                    scores[s] = score_row(kind, row, m.item_row(s, d), m.head.as_deref());
                }
                cached.insert(u, scores);
            }
        }
        for t in self.targets.iter_mut() {
            let slots: Vec<usize> = t
                .spec
                .items
                .iter()
                .map(|&i| {
                    proj.slot_of(i)
                        .ok_or_else(|| Error::Attack(format!("item {i} outside projection")))
                })
                .collect::<Result<_>>()?;
            let mut scores = BTreeMap::new();
            let mut mia_counts: Vec<BTreeMap<UserId, f64>> = vec![BTreeMap::new(); rhos.len()];
            for (&u, m) in &self.state.momentum {
                let per_item: Vec<f64> = match (cached.get(&u), t.fictive_row.as_deref()) {
                    (Some(all), _) => slots.iter().map(|&s| all[s]).collect(),
                    (None, Some(row)) => slots
                        .iter()
                        .map(|&s| score_row(kind, row, m.item_row(s, d), m.head.as_deref()))
                        .collect(),
                    // withheld user rows and no fictive user yet
                    (None, None) => continue,
                };
                let rel = per_item.iter().sum::<f64>() / per_item.len() as f64;
                if !rel.is_finite() {
                    return Err(Error::Attack(format!("non-finite relevance for user {u}")));
                }
                scores.insert(u, rel);
                for (ri, &rho) in rhos.iter().enumerate() {
                    let c = if kind == ModelKind::Gmf {
                        per_item.iter().filter(|&&p| mia_member(p, rho)).count()
                    } else {
                        0
                    };
                    mia_counts[ri].insert(u, c as f64);
                }
            }
            let k = t.spec.k;
            let predicted = predict_community(&scores, k);
            let observed_true = t.truth.community.iter().filter(|u| self.state.observed.contains(u)).count();
            let bound = observed_true as f64 / k as f64;
            t.outcome.cia.accuracies.push(accuracy_at_round(&predicted, &t.truth.community, k));
            t.outcome.cia.upper_bounds.push(bound);
            t.outcome.final_prediction = predicted;
            for (ri, counts) in mia_counts.iter().enumerate() {
                let p = predict_community(counts, k);
                t.outcome.mia[ri].accuracies.push(accuracy_at_round(&p, &t.truth.community, k));
                t.outcome.mia[ri].upper_bounds.push(bound);
            }
            if !t.aia_scores.is_empty() {
                let p = predict_community(&t.aia_scores, k);
                t.outcome.aia.push(accuracy_at_round(&p, &t.truth.community, k));
                t.aia_scores.clear();
            }
        }
        Ok(())
    }
}

/// The CIA adversaries of one run, as seen by the protocols.
pub struct CiaHarness {
    pub adversaries: Vec<Adversary>,
    kind: ModelKind,
    rhos: Vec<f64>,
    fictive_cfg: TrainConfig,
    /// receiver node -> adversary index
    by_member: HashMap<UserId, usize>,
    server: Option<usize>,
    aia: Option<AiaRuntime>,
    pub checkpoints: Vec<usize>,
    observations: u64,
}

struct AiaRuntime {
    cfg: AiaConfig,
    dataset_items: usize,
    train_cfg: TrainConfig,
    global: Option<SharedModel>,
    active: bool,
}

impl CiaHarness {
    /// Federated server adversary running every target at once.
    pub fn server(
        dataset: &InteractionDataset,
        cfg: &AdversaryConfig,
        kind: ModelKind,
        train_cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let pool: Vec<UserId> = (0..dataset.n_users()).collect();
        let targets = cfg.build_targets(dataset, &pool)?;
        let adv = Adversary::new(Vec::new(), targets, dataset.n_items(), train_cfg.dim, cfg.beta, cfg.rho.len());
        let mut h = Self::from_adversaries(vec![adv], kind, cfg, train_cfg);
        h.server = Some(0);
        if let Some(aia) = &cfg.aia {
            h.aia = Some(AiaRuntime {
                cfg: aia.clone(),
                dataset_items: dataset.n_items(),
                train_cfg: train_cfg.clone(),
                global: None,
                active: false,
            });
        }
        Ok(h)
    }

    /// Gossip adversaries. Without colluders every sampled node is its own
    /// adversary targeting its train set; with colluders one coalition of
    /// `round(f * N)` random nodes is formed and its members' train sets are
    /// the targets.
    pub fn gossip(
        dataset: &InteractionDataset,
        cfg: &AdversaryConfig,
        kind: ModelKind,
        train_cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.aia.is_some() {
            return Err(Error::Config("the AIA proxy needs a federated server".into()));
        }
        let n = dataset.n_users();
        let n_colluders = (cfg.colluder_fraction * n as f64).round() as usize;
        let d = train_cfg.dim;
        let adversaries = if n_colluders <= 1 {
            let pool: Vec<UserId> = (0..n).collect();
            let targets = cfg.build_targets(dataset, &pool)?;
            if cfg.target.is_some() {
                // explicit target: a single random node plays the adversary
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[0x51]));
                let node = rng.random_range(0..n);
                vec![Adversary::new(vec![node], targets, dataset.n_items(), d, cfg.beta, cfg.rho.len())]
            } else {
                targets
                    .into_iter()
                    .map(|(t, gt)| {
                        let node = t.owner.expect("implicit targets have owners");
                        Adversary::new(vec![node], vec![(t, gt)], dataset.n_items(), d, cfg.beta, cfg.rho.len())
                    })
                    .collect()
            }
        } else {
            let mut all: Vec<UserId> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[0xC0]));
            all.shuffle(&mut rng);
            let mut members: Vec<UserId> = all[..n_colluders].to_vec();
            members.sort_unstable();
            let targets = cfg.build_targets(dataset, &members)?;
            vec![Adversary::new(members, targets, dataset.n_items(), d, cfg.beta, cfg.rho.len())]
        };
        Ok(Self::from_adversaries(adversaries, kind, cfg, train_cfg))
    }

    fn from_adversaries(adversaries: Vec<Adversary>, kind: ModelKind, cfg: &AdversaryConfig, train_cfg: &TrainConfig) -> Self {
        let mut by_member = HashMap::new();
        for (ai, a) in adversaries.iter().enumerate() {
            for &m in &a.members {
                by_member.insert(m, ai);
            }
        }
        let fictive_cfg = TrainConfig {
            local_epochs: cfg.fictive_epochs,
            seed: mix_seed(train_cfg.seed, &[cfg.seed, 0xF1]),
            ..train_cfg.clone()
        };
        CiaHarness {
            adversaries,
            kind,
            rhos: cfg.rho.clone(),
            fictive_cfg,
            by_member,
            server: None,
            aia: None,
            checkpoints: Vec::new(),
            observations: 0,
        }
    }

    pub fn rhos(&self) -> &[f64] {
        &self.rhos
    }

    pub fn observations(&self) -> u64 {
        self.observations
    }

    pub fn outcomes(&self) -> Vec<TargetOutcome> {
        self.adversaries.iter().flat_map(|a| a.outcomes().cloned()).collect()
    }

    /// Nodes controlled by any adversary.
    pub fn member_nodes(&self) -> BTreeSet<UserId> {
        self.by_member.keys().copied().collect()
    }

    pub fn observed_by(&self, adversary: usize) -> &BTreeSet<UserId> {
        &self.adversaries[adversary].state.observed
    }

    fn adversary_for(&self, receiver: Option<UserId>) -> Option<usize> {
        match receiver {
            None => self.server,
            Some(r) => self.by_member.get(&r).copied(),
        }
    }
}

impl AdversaryHook for CiaHarness {
    fn observes(&self, receiver: Option<UserId>) -> bool {
        self.adversary_for(receiver).is_some()
    }

    fn begin_round(&mut self, round: usize, global: Option<&SharedModel>) -> Result<()> {
        let Some(rt) = self.aia.as_mut() else {
            return Ok(());
        };
        rt.active = rt.cfg.rounds.contains(&round);
        if !rt.active {
            return Ok(());
        }
        let global = global.ok_or_else(|| Error::Attack("AIA needs the broadcast model".into()))?;
        let SharedModel::Full(base) = global else {
            return Err(Error::Attack("AIA proxy expects full shared models".into()));
        };
        rt.global = Some(global.clone());
        let server = self.server.expect("AIA runs on the server");
        for (ti, t) in self.adversaries[server].targets.iter_mut().enumerate() {
            let cfg = AiaConfig {
                seed: mix_seed(rt.cfg.seed, &[ti as u64, round as u64]),
                ..rt.cfg.clone()
            };
            t.aia = Some(aia_proxy(&t.spec.items, base, rt.dataset_items, &cfg, &rt.train_cfg)?);
            t.aia_scores.clear();
        }
        Ok(())
    }

    fn observe(&mut self, receiver: Option<UserId>, sender: UserId, model: &SharedModel, round: usize) -> Result<()> {
        let Some(ai) = self.adversary_for(receiver) else {
            return Ok(());
        };
        self.observations += 1;
        let adv = &mut self.adversaries[ai];
        adv.state.observe(sender, model, round)?;
        if !model.has_user_block() {
            adv.accumulate_reference(model);
        }
        if let Some(rt) = self.aia.as_ref().filter(|rt| rt.active) {
            let global = rt.global.as_ref().expect("set in begin_round");
            let lr = rt.train_cfg.lr;
            let grad: Vec<f64> = global
                .item_emb()
                .as_slice()
                .iter()
                .zip(model.item_emb().as_slice())
                .map(|(g, m)| if lr > 0.0 { (g - m) / lr } else { 0.0 })
                .collect();
            for t in adv.targets.iter_mut() {
                if let Some(clf) = &t.aia {
                    t.aia_scores.insert(sender, clf.confidence(&grad));
                }
            }
        }
        Ok(())
    }

    fn end_round(&mut self, round: usize) -> Result<()> {
        let kind = self.kind;
        let cfg = &self.fictive_cfg;
        self.adversaries
            .par_iter_mut()
            .map(|adv| adv.refresh_fictive(round, kind, cfg))
            .collect::<Result<Vec<()>>>()?;
        Ok(())
    }

    fn checkpoint(&mut self, round: usize) -> Result<()> {
        let (kind, rhos) = (self.kind, &self.rhos);
        self.adversaries
            .par_iter_mut()
            .map(|adv| adv.record_checkpoint(kind, rhos))
            .collect::<Result<Vec<()>>>()?;
        self.checkpoints.push(round);
        Ok(())
    }
}

#[cfg(test)]
mod tests;
