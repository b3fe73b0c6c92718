//! GMF and PRME-style recommenders: scoring, local mini-batch SGD and
//! utility metrics.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{InteractionDataset, ItemId, UserId};
use crate::defenses::{add_share_less_grad, dp_sgd_step, DefenseKind, DefensePolicy};
use crate::error::{Error, Result};
use crate::linalg::{axpy, mix_seed, sigmoid, Matrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Generalized matrix factorization: `sigmoid(h . (e_u * e_i))`.
    #[default]
    Gmf,
    /// Metric embedding: relevance `-||e_u - e_i||^2`, pairwise ranking loss.
    #[serde(alias = "prme-style")]
    Prme,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Gmf => "gmf",
            ModelKind::Prme => "prme",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub neg_ratio: usize,
    pub dim: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian embedding initialization.
    pub init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3.0,
            local_epochs: 1,
            batch_size: 64,
            neg_ratio: 4,
            dim: 16,
            seed: 0,
            init_std: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, v: String| Err(Error::Config(format!("train.{f} must be positive, got {v}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", self.lr.to_string());
        }
        if self.local_epochs == 0 {
            return bad("local_epochs", "0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "0".into());
        }
        if self.neg_ratio == 0 {
            return bad("neg_ratio", "0".into());
        }
        if self.dim == 0 {
            return bad("dim", "0".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std", self.init_std.to_string());
        }
        Ok(())
    }

    /// Same config with the seed replaced by a value derived from `parts`.
    pub fn reseeded(&self, parts: &[u64]) -> TrainConfig {
        TrainConfig {
            seed: mix_seed(self.seed, parts),
            ..self.clone()
        }
    }
}

/// Recommender parameters: user embeddings, item embeddings and, for GMF,
/// the output-layer weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecModel {
    pub user_emb: Matrix,
    pub item_emb: Matrix,
    pub head: Option<Vec<f64>>,
}

pub fn init_model(n_users: usize, n_items: usize, cfg: &TrainConfig, kind: ModelKind) -> RecModel {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_std).expect("valid init std");
    let user_emb = Matrix::from_fn(n_users, cfg.dim, |_, _| normal.sample(&mut rng));
    let item_emb = Matrix::from_fn(n_items, cfg.dim, |_, _| normal.sample(&mut rng));
    let head = match kind {
        // Unit output weights plus the same Gaussian jitter; a head drawn at
        // the embedding scale leaves the trilinear logit stuck near zero.
        ModelKind::Gmf => Some((0..cfg.dim).map(|_| 1.0 + normal.sample(&mut rng)).collect()),
        ModelKind::Prme => None,
    };
    RecModel {
        user_emb,
        item_emb,
        head,
    }
}

#[inline]
pub(crate) fn gmf_logit(user: &[f64], item: &[f64], head: &[f64]) -> f64 {
    let mut z = 0.0;
    for k in 0..head.len() {
        z += head[k] * user[k] * item[k];
    }
    z
}

#[inline]
pub(crate) fn prme_score(user: &[f64], item: &[f64]) -> f64 {
    -user
        .iter()
        .zip(item)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
}

/// Relevance of `item` for a user represented by `user_row`, without bounds
/// checks on the row itself.
#[inline]
pub fn score_row(kind: ModelKind, user_row: &[f64], item_row: &[f64], head: Option<&[f64]>) -> f64 {
    match kind {
        ModelKind::Gmf => sigmoid(gmf_logit(user_row, item_row, head.expect("GMF model without head"))),
        ModelKind::Prme => prme_score(user_row, item_row),
    }
}

impl RecModel {
    pub fn dim(&self) -> usize {
        self.item_emb.cols()
    }

    pub fn n_users(&self) -> usize {
        self.user_emb.rows()
    }

    pub fn n_items(&self) -> usize {
        self.item_emb.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.user_emb.as_slice().iter().all(|v| v.is_finite())
            && self.item_emb.as_slice().iter().all(|v| v.is_finite())
            && self.head.iter().flatten().all(|v| v.is_finite())
    }

    pub fn check_ids(&self, u: UserId, i: ItemId) -> Result<()> {
        if u >= self.n_users() {
            return Err(Error::Index {
                kind: "user",
                id: u,
                len: self.n_users(),
            });
        }
        if i >= self.n_items() {
            return Err(Error::Index {
                kind: "item",
                id: i,
                len: self.n_items(),
            });
        }
        Ok(())
    }

    pub fn score(&self, kind: ModelKind, u: UserId, i: ItemId) -> Result<f64> {
        match kind {
            ModelKind::Gmf => score_gmf(self, u, i),
            ModelKind::Prme => score_prme(self, u, i),
        }
    }

    pub fn same_shape(&self, other: &RecModel) -> bool {
        self.user_emb.same_shape(&other.user_emb)
            && self.item_emb.same_shape(&other.item_emb)
            && self.head.as_ref().map(Vec::len) == other.head.as_ref().map(Vec::len)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: RecModel = serde_json::from_str(text)?;
        if m.user_emb.cols() != m.item_emb.cols() || m.head.as_ref().is_some_and(|h| h.len() != m.dim()) {
            return Err(Error::Shape("checkpoint blocks disagree on dim".into()));
        }
        Ok(m)
    }

    /// Little-endian binary checkpoint: magic, shapes, then row-major f64s.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [self.n_users(), self.n_items(), self.dim(), self.head.is_some() as usize] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        let blocks = [self.user_emb.as_slice(), self.item_emb.as_slice(), self.head.as_deref().unwrap_or(&[])];
        for v in blocks.into_iter().flatten() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let origin = Path::new("<checkpoint>");
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::io(origin, e))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Shape("not a model checkpoint".into()));
        }
        let mut header = [0usize; 4];
        for h in header.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|e| Error::io(origin, e))?;
            *h = u64::from_le_bytes(b) as usize;
        }
        let [n_users, n_items, dim, has_head] = header;
        let mut read_block = |n: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b).map_err(|e| Error::io(origin, e))?;
                out.push(f64::from_le_bytes(b));
            }
            Ok(out)
        };
        let user_emb = Matrix::from_vec(n_users, dim, read_block(n_users * dim)?).expect("sized");
        let item_emb = Matrix::from_vec(n_items, dim, read_block(n_items * dim)?).expect("sized");
        let head = if has_head == 1 { Some(read_block(dim)?) } else { None };
        Ok(RecModel {
            user_emb,
            item_emb,
            head,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_binary(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_binary(BufReader::new(f))
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CIAM";

pub fn score_gmf(model: &RecModel, u: UserId, i: ItemId) -> Result<f64> {
    model.check_ids(u, i)?;
    let head = model
        .head
        .as_deref()
        .ok_or_else(|| Error::Shape("GMF scoring needs output weights".into()))?;
    Ok(sigmoid(gmf_logit(model.user_emb.row(u), model.item_emb.row(i), head)))
}

pub fn score_prme(model: &RecModel, u: UserId, i: ItemId) -> Result<f64> {
    model.check_ids(u, i)?;
    Ok(prme_score(model.user_emb.row(u), model.item_emb.row(i)))
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// BCE term for one (user, item, label) triple; accumulates `scale`-weighted
/// gradients into the three buffers and returns the unscaled loss.
#[inline]
#[allow(clippy::too_many_arguments)]
fn gmf_accumulate(
    user: &[f64],
    item: &[f64],
    head: &[f64],
    label: f64,
    scale: f64,
    g_user: &mut [f64],
    g_item: &mut [f64],
    g_head: &mut [f64],
) -> f64 {
    let z = gmf_logit(user, item, head);
    let dz = (sigmoid(z) - label) * scale;
    for k in 0..head.len() {
        g_user[k] += dz * head[k] * item[k];
        g_item[k] += dz * head[k] * user[k];
        g_head[k] += dz * user[k] * item[k];
    }
    softplus(z) - label * z
}

/// Pairwise ranking term `-ln sigmoid(s(u,pos) - s(u,neg))` for metric
/// embeddings; accumulates gradients and returns the unscaled loss.
#[inline]
fn prme_accumulate(
    user: &[f64],
    pos: &[f64],
    neg: &[f64],
    scale: f64,
    g_user: &mut [f64],
    g_pos: &mut [f64],
    g_neg: &mut [f64],
) -> f64 {
    let x = prme_score(user, pos) - prme_score(user, neg);
    let dx = (sigmoid(x) - 1.0) * scale;
    for k in 0..user.len() {
        g_user[k] += dx * 2.0 * (pos[k] - neg[k]);
        g_pos[k] += dx * 2.0 * (user[k] - pos[k]);
        g_neg[k] -= dx * 2.0 * (user[k] - neg[k]);
    }
    softplus(-x)
}

/// Dense gradient of a model-wide loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrad {
    pub user_emb: Matrix,
    pub item_emb: Matrix,
    pub head: Option<Vec<f64>>,
}

/// Mean binary cross-entropy of a GMF model over `(user, item, label)`
/// samples and its exact gradient.
pub fn gmf_bce_loss_grad(model: &RecModel, samples: &[(UserId, ItemId, f64)]) -> Result<(f64, ModelGrad)> {
    let head = model
        .head
        .as_deref()
        .ok_or_else(|| Error::Shape("GMF loss needs output weights".into()))?;
    let d = model.dim();
    let mut grad = ModelGrad {
        user_emb: Matrix::zeros(model.n_users(), d),
        item_emb: Matrix::zeros(model.n_items(), d),
        head: Some(vec![0.0; d]),
    };
    let scale = 1.0 / samples.len().max(1) as f64;
    let mut loss = 0.0;
    let mut gu = vec![0.0; d];
    let mut gi = vec![0.0; d];
    for &(u, i, y) in samples {
        model.check_ids(u, i)?;
        gu.fill(0.0);
        gi.fill(0.0);
        loss += gmf_accumulate(
            model.user_emb.row(u),
            model.item_emb.row(i),
            head,
            y,
            scale,
            &mut gu,
            &mut gi,
            grad.head.as_mut().unwrap(),
        );
        axpy(1.0, &gu, grad.user_emb.row_mut(u));
        axpy(1.0, &gi, grad.item_emb.row_mut(i));
    }
    Ok((loss * scale, grad))
}

/// Sum of the gradients applied during one call to local training. This is
/// what a server can reconstruct as `(before - after) / lr`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientRecord {
    pub user: UserId,
    pub user_grad: Vec<f64>,
    /// Touched item rows, sorted by id.
    pub item_grads: Vec<(ItemId, Vec<f64>)>,
    pub head_grad: Option<Vec<f64>>,
    /// Mean data loss of each local epoch (before the step it drives).
    pub epoch_losses: Vec<f64>,
    /// Set when the user rated every item and no negatives were drawn.
    pub no_negatives: bool,
}

impl GradientRecord {
    /// Item-embedding gradient as a flat `n_items * dim` vector.
    pub fn dense_item_grad(&self, n_items: usize, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_items * dim];
        for (i, g) in &self.item_grads {
            out[i * dim..(i + 1) * dim].copy_from_slice(g);
        }
        out
    }

    pub fn touched_items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.item_grads.iter().map(|(i, _)| *i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate {
    pub model: RecModel,
    pub gradient: GradientRecord,
}

/// Mutable view of the parameters one user trains.
pub struct UserParams<'a> {
    pub user: UserId,
    pub user_row: &'a mut [f64],
    pub item_emb: &'a mut Matrix,
    pub head: Option<&'a mut Vec<f64>>,
}

/// Runs local SGD for `user` on a copy of `model`.
pub fn local_train(
    model: &RecModel,
    user: UserId,
    train_items: &[ItemId],
    cfg: &TrainConfig,
    kind: ModelKind,
    defense: &DefensePolicy,
) -> Result<LocalUpdate> {
    let mut out = model.clone();
    let gradient = local_train_in_place(&mut out, user, train_items, cfg, kind, defense)?;
    Ok(LocalUpdate { model: out, gradient })
}

pub fn local_train_in_place(
    model: &mut RecModel,
    user: UserId,
    train_items: &[ItemId],
    cfg: &TrainConfig,
    kind: ModelKind,
    defense: &DefensePolicy,
) -> Result<GradientRecord> {
    if user >= model.n_users() {
        return Err(Error::Index {
            kind: "user",
            id: user,
            len: model.n_users(),
        });
    }
    let RecModel {
        user_emb,
        item_emb,
        head,
    } = model;
    let params = UserParams {
        user,
        user_row: user_emb.row_mut(user),
        item_emb,
        head: head.as_mut(),
    };
    train_user(params, train_items, cfg, kind, defense, None)
}

struct NegativeSampler {
    n_items: usize,
    complement: Option<Vec<ItemId>>,
}

impl NegativeSampler {
    fn new(n_items: usize, positives: &[ItemId]) -> Self {
        let complement = (positives.len() * 2 > n_items)
            .then(|| (0..n_items).filter(|i| positives.binary_search(i).is_err()).collect());
        NegativeSampler { n_items, complement }
    }

    fn is_empty(&self, positives: &[ItemId]) -> bool {
        match &self.complement {
            Some(c) => c.is_empty(),
            None => positives.len() >= self.n_items,
        }
    }

    fn sample<R: Rng>(&self, positives: &[ItemId], rng: &mut R) -> ItemId {
        match &self.complement {
            Some(c) => *c.choose(rng).expect("non-empty complement"),
            None => loop {
                let i = rng.random_range(0..self.n_items);
                if positives.binary_search(&i).is_err() {
                    break i;
                }
            },
        }
    }
}

/// Local mini-batch SGD over one user's parameters.
///
/// `reference` is the item-embedding matrix the share-less penalty pulls
/// towards; when absent the entry state of `params.item_emb` is used.
pub fn train_user(
    params: UserParams<'_>,
    train_items: &[ItemId],
    cfg: &TrainConfig,
    kind: ModelKind,
    defense: &DefensePolicy,
    reference: Option<&Matrix>,
) -> Result<GradientRecord> {
    let UserParams {
        user,
        user_row,
        item_emb,
        mut head,
    } = params;
    if train_items.is_empty() {
        return Err(Error::Config(format!("user {user} has no train items")));
    }
    if kind == ModelKind::Gmf && head.is_none() {
        return Err(Error::Shape("GMF training needs output weights".into()));
    }
    let n_items = item_emb.rows();
    let d = item_emb.cols();
    if user_row.len() != d {
        return Err(Error::Shape(format!("user row has {} dims, items {}", user_row.len(), d)));
    }
    let mut positives = train_items.to_vec();
    positives.sort_unstable();
    positives.dedup();
    if let Some(&bad) = positives.iter().find(|&&i| i >= n_items) {
        return Err(Error::Index {
            kind: "item",
            id: bad,
            len: n_items,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sampler = NegativeSampler::new(n_items, &positives);
    let no_negatives = sampler.is_empty(&positives);
    if no_negatives {
        log::warn!("user {user} interacted with every item; training on positives only");
    }

    let share_less_tau = match defense.kind {
        DefenseKind::ShareLess => Some(defense.tau),
        _ => None,
    };
    let dp = defense.kind == DefenseKind::DpSgd;
    let keep_entry = dp || (share_less_tau.is_some() && reference.is_none());
    // entry values of every row we touch: share-less reference and DP rollback
    let mut entry_rows: HashMap<ItemId, Vec<f64>> = HashMap::new();
    let entry_user = user_row.to_vec();
    let entry_head = head.as_deref().cloned();

    let mut rec_user = vec![0.0; d];
    let mut rec_items: HashMap<ItemId, Vec<f64>> = HashMap::new();
    let mut rec_head = head.as_ref().map(|_| vec![0.0; d]);
    let mut epoch_losses = Vec::with_capacity(cfg.local_epochs);

    // (a, b, label): GMF uses (item, -, label); PRME uses (pos, neg, -)
    let mut samples: Vec<(ItemId, ItemId, f64)> = Vec::new();
    let mut g_user = vec![0.0; d];
    let mut g_head = vec![0.0; d];
    let mut g_items: Vec<(ItemId, Vec<f64>)> = Vec::new();
    let mut slot: HashMap<ItemId, usize> = HashMap::new();

    for _epoch in 0..cfg.local_epochs {
        samples.clear();
        for &p in &positives {
            match kind {
                ModelKind::Gmf => {
                    samples.push((p, p, 1.0));
                    if !no_negatives {
                        for _ in 0..cfg.neg_ratio {
                            let n = sampler.sample(&positives, &mut rng);
                            samples.push((n, n, 0.0));
                        }
                    }
                }
                ModelKind::Prme => {
                    if !no_negatives {
                        for _ in 0..cfg.neg_ratio {
                            samples.push((p, sampler.sample(&positives, &mut rng), 0.0));
                        }
                    }
                }
            }
        }
        samples.shuffle(&mut rng);
        let mut epoch_loss = 0.0;

        for batch in samples.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            g_user.fill(0.0);
            g_head.fill(0.0);
            g_items.clear();
            slot.clear();
            let mut grad_slot = |i: ItemId, g_items: &mut Vec<(ItemId, Vec<f64>)>| -> usize {
                *slot.entry(i).or_insert_with(|| {
                    g_items.push((i, vec![0.0; d]));
                    g_items.len() - 1
                })
            };
            for &(a, b, label) in batch {
                match kind {
                    ModelKind::Gmf => {
                        let s = grad_slot(a, &mut g_items);
                        epoch_loss += gmf_accumulate(
                            user_row,
                            item_emb.row(a),
                            head.as_deref().unwrap(),
                            label,
                            scale,
                            &mut g_user,
                            &mut g_items[s].1,
                            &mut g_head,
                        );
                    }
                    ModelKind::Prme => {
                        let sa = grad_slot(a, &mut g_items);
                        let sb = grad_slot(b, &mut g_items);
                        let mut ga = vec![0.0; d];
                        let mut gb = vec![0.0; d];
                        epoch_loss += prme_accumulate(
                            user_row,
                            item_emb.row(a),
                            item_emb.row(b),
                            scale,
                            &mut g_user,
                            &mut ga,
                            &mut gb,
                        );
                        axpy(1.0, &ga, &mut g_items[sa].1);
                        axpy(1.0, &gb, &mut g_items[sb].1);
                    }
                }
            }
            if keep_entry || share_less_tau.is_some() {
                for (i, g) in g_items.iter_mut() {
                    let row = item_emb.row(*i);
                    if keep_entry {
                        entry_rows.entry(*i).or_insert_with(|| row.to_vec());
                    }
                    if let Some(tau) = share_less_tau {
                        let reference_row = match reference {
                            Some(m) => m.row(*i),
                            None => entry_rows[i].as_slice(),
                        };
                        add_share_less_grad(row, reference_row, tau, g);
                    }
                }
            }
            if dp {
                // bound every local step as well; noise is added once per round
                let sq = crate::linalg::dot(&g_user, &g_user)
                    + crate::linalg::dot(&g_head, &g_head)
                    + g_items.iter().map(|(_, g)| crate::linalg::dot(g, g)).sum::<f64>();
                let norm = sq.sqrt();
                if norm > defense.clip {
                    let c = defense.clip / norm;
                    g_user.iter_mut().chain(g_head.iter_mut()).for_each(|v| *v *= c);
                    g_items.iter_mut().flat_map(|(_, g)| g.iter_mut()).for_each(|v| *v *= c);
                }
            }
            // apply
            axpy(-cfg.lr, &g_user, user_row);
            axpy(1.0, &g_user, &mut rec_user);
            for (i, g) in &g_items {
                axpy(-cfg.lr, g, item_emb.row_mut(*i));
                axpy(1.0, g, rec_items.entry(*i).or_insert_with(|| vec![0.0; d]));
            }
            if let (Some(h), Some(rh)) = (head.as_deref_mut(), rec_head.as_mut()) {
                axpy(-cfg.lr, &g_head, h);
                axpy(1.0, &g_head, rh);
            }
        }
        epoch_losses.push(if samples.is_empty() { 0.0 } else { epoch_loss / samples.len() as f64 });
    }

    let mut item_grads: Vec<(ItemId, Vec<f64>)> = rec_items.into_iter().collect();
    item_grads.sort_unstable_by_key(|(i, _)| *i);
    let mut record = GradientRecord {
        user,
        user_grad: rec_user,
        item_grads,
        head_grad: rec_head,
        epoch_losses,
        no_negatives,
    };

    if dp {
        apply_local_dp(
            &mut record,
            user_row,
            item_emb,
            head,
            &entry_user,
            &entry_rows,
            entry_head.as_deref(),
            cfg,
            defense,
        );
    }
    Ok(record)
}

/// Replaces the local round's aggregate gradient by its clipped and noised
/// version and rewrites the parameters as `entry - lr * noised`. The
/// protected vector covers the user's own row, every item row and the head.
#[allow(clippy::too_many_arguments)]
fn apply_local_dp(
    record: &mut GradientRecord,
    user_row: &mut [f64],
    item_emb: &mut Matrix,
    head: Option<&mut Vec<f64>>,
    entry_user: &[f64],
    entry_rows: &HashMap<ItemId, Vec<f64>>,
    entry_head: Option<&[f64]>,
    cfg: &TrainConfig,
    defense: &DefensePolicy,
) {
    let d = item_emb.cols();
    let n_items = item_emb.rows();
    let mut flat = Vec::with_capacity(d * (n_items + 2));
    flat.extend_from_slice(&record.user_grad);
    flat.extend(record.dense_item_grad(n_items, d));
    if let Some(h) = &record.head_grad {
        flat.extend_from_slice(h);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[0xD9]));
    let noised = dp_sgd_step(&flat, defense.clip, defense.noise_mult, &mut rng);

    let (g_user, rest) = noised.split_at(d);
    let (g_items, g_head) = rest.split_at(n_items * d);
    for k in 0..d {
        user_row[k] = entry_user[k] - cfg.lr * g_user[k];
    }
    for i in 0..n_items {
        let g = &g_items[i * d..(i + 1) * d];
        let row = item_emb.row_mut(i);
        if let Some(entry) = entry_rows.get(&i) {
            row.copy_from_slice(entry);
        }
        axpy(-cfg.lr, g, row);
    }
    if let (Some(h), Some(eh)) = (head, entry_head) {
        for k in 0..d {
            h[k] = eh[k] - cfg.lr * g_head[k];
        }
    }
    record.user_grad = g_user.to_vec();
    record.item_grads = (0..n_items).map(|i| (i, g_items[i * d..(i + 1) * d].to_vec())).collect();
    if record.head_grad.is_some() {
        record.head_grad = Some(g_head.to_vec());
    }
}

/// Leave-one-out hit ratio: one held-out item per user ranked against up
/// to 99 sampled items the user never interacted with. `score(u, i)` is
/// the user's relevance for item `i`.
pub fn hit_ratio_by<F>(dataset: &InteractionDataset, k: usize, seed: u64, score: F) -> f64
where
    F: Fn(UserId, ItemId) -> f64,
{
    let mut hits = 0usize;
    let mut evaluated = 0usize;
    for u in 0..dataset.n_users() {
        let test = dataset.test(u);
        if test.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[u as u64]));
        let held_out = *test.choose(&mut rng).unwrap();
        let pool: Vec<ItemId> = (0..dataset.n_items()).filter(|&i| !dataset.interacted(u, i)).collect();
        let negatives: Vec<ItemId> = pool.choose_multiple(&mut rng, 99).copied().collect();
        let pos = score(u, held_out);
        let ahead = negatives.iter().filter(|&&n| score(u, n) > pos).count();
        evaluated += 1;
        if ahead < k {
            hits += 1;
        }
    }
    if evaluated == 0 {
        0.0
    } else {
        hits as f64 / evaluated as f64
    }
}

pub fn hit_ratio_at_k(model: &RecModel, dataset: &InteractionDataset, k: usize, kind: ModelKind, seed: u64) -> f64 {
    let head = model.head.as_deref();
    hit_ratio_by(dataset, k, seed, |u, i| {
        score_row(kind, model.user_emb.row(u), model.item_emb.row(i), head)
    })
}

/// Precision/recall F1 of the top-`k` unseen items against the user's held
/// out set, averaged over users with at least one test item.
pub fn f1_by<F>(dataset: &InteractionDataset, k: usize, score: F) -> f64
where
    F: Fn(UserId, ItemId) -> f64,
{
    let mut total = 0.0;
    let mut evaluated = 0usize;
    for u in 0..dataset.n_users() {
        let test = dataset.test(u);
        if test.is_empty() {
            continue;
        }
        let mut ranked: Vec<(f64, ItemId)> = (0..dataset.n_items())
            .filter(|&i| !dataset.in_train(u, i))
            .map(|i| (score(u, i), i))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let top: Vec<ItemId> = ranked.iter().take(k).map(|x| x.1).collect();
        total += f1_score(&top, test, k);
        evaluated += 1;
    }
    if evaluated == 0 {
        0.0
    } else {
        total / evaluated as f64
    }
}

/// F1 of a top-`k` list against a sorted relevant set.
pub fn f1_score(top: &[ItemId], relevant: &[ItemId], k: usize) -> f64 {
    let hits = top.iter().filter(|i| relevant.binary_search(i).is_ok()).count();
    if hits == 0 {
        return 0.0;
    }
    let precision = hits as f64 / k as f64;
    let recall = hits as f64 / relevant.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn f1_at_k(model: &RecModel, dataset: &InteractionDataset, k: usize, kind: ModelKind) -> f64 {
    let head = model.head.as_deref();
    f1_by(dataset, k, |u, i| score_row(kind, model.user_emb.row(u), model.item_emb.row(i), head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(seed: u64, n_users: usize, n_items: usize, dim: usize) -> RecModel {
        let cfg = TrainConfig {
            dim,
            seed,
            init_std: 0.5,
            ..TrainConfig::default()
        };
        init_model(n_users, n_items, &cfg, ModelKind::Gmf)
    }

    fn flat(m: &RecModel) -> Vec<f64> {
        let mut v = m.user_emb.as_slice().to_vec();
        v.extend_from_slice(m.item_emb.as_slice());
        v.extend(m.head.iter().flatten());
        v
    }

    fn set_flat(m: &mut RecModel, idx: usize, value: f64) {
        let nu = m.user_emb.as_slice().len();
        let ni = m.item_emb.as_slice().len();
        if idx < nu {
            m.user_emb.as_mut_slice()[idx] = value;
        } else if idx < nu + ni {
            m.item_emb.as_mut_slice()[idx - nu] = value;
        } else {
            m.head.as_mut().unwrap()[idx - nu - ni] = value;
        }
    }

    #[test]
    fn gmf_gradient_matches_finite_differences() {
        let model = toy(3, 2, 3, 4);
        let samples = [(0, 0, 1.0), (0, 2, 0.0), (1, 1, 1.0), (1, 0, 0.0)];
        let (_, g) = gmf_bce_loss_grad(&model, &samples).unwrap();
        let mut analytic = g.user_emb.as_slice().to_vec();
        analytic.extend_from_slice(g.item_emb.as_slice());
        analytic.extend(g.head.iter().flatten());
        let base = flat(&model);
        let h = 1e-6;
        for (idx, &a) in analytic.iter().enumerate() {
            let mut plus = model.clone();
            set_flat(&mut plus, idx, base[idx] + h);
            let mut minus = model.clone();
            set_flat(&mut minus, idx, base[idx] - h);
            let fp = gmf_bce_loss_grad(&plus, &samples).unwrap().0;
            let fm = gmf_bce_loss_grad(&minus, &samples).unwrap().0;
            let numeric = (fp - fm) / (2.0 * h);
            assert!((a - numeric).abs() <= 1e-7 + 1e-5 * numeric.abs(), "param {idx}: {a} vs {numeric}");
        }
    }

    #[test]
    fn scores_follow_their_definitions() {
        let model = toy(1, 1, 2, 3);
        let p = score_gmf(&model, 0, 1).unwrap();
        let h = model.head.as_ref().unwrap();
        let z: f64 = (0..3).map(|k| h[k] * model.user_emb.row(0)[k] * model.item_emb.row(1)[k]).sum();
        assert!((p - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
        let s = score_prme(&model, 0, 1).unwrap();
        let d2: f64 = (0..3).map(|k| (model.user_emb.row(0)[k] - model.item_emb.row(1)[k]).powi(2)).sum();
        assert_eq!(s, -d2);
        assert!(score_gmf(&model, 0, 2).is_err());
        assert!(score_gmf(&model, 1, 0).is_err());
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let model = toy(5, 2, 6, 4);
        let cfg = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        let out = local_train(&model, 1, &[0, 3], &cfg, ModelKind::Gmf, &DefensePolicy::none()).unwrap();
        assert_eq!(out.model, model);
    }

    #[test]
    fn local_training_lowers_the_loss() {
        let model = toy(7, 1, 20, 8);
        let cfg = TrainConfig {
            lr: 0.5,
            local_epochs: 30,
            ..TrainConfig::default()
        };
        let out = local_train(&model, 0, &[1, 2, 3], &cfg, ModelKind::Gmf, &DefensePolicy::none()).unwrap();
        let l = &out.gradient.epoch_losses;
        assert!(l.last().unwrap() < &(0.5 * l[0]), "{l:?}");
        for kind in [ModelKind::Gmf, ModelKind::Prme] {
            let m = init_model(1, 20, &TrainConfig { init_std: 0.1, ..cfg.clone() }, kind);
            let out = local_train(&m, 0, &[4, 5], &cfg, kind, &DefensePolicy::none()).unwrap();
            let l = &out.gradient.epoch_losses;
            assert!(l.last().unwrap() < &l[0], "{kind}: {l:?}");
        }
    }

    #[test]
    fn dp_without_noise_and_loose_clip_matches_plain_sgd() {
        let model = toy(9, 2, 10, 4);
        let cfg = TrainConfig { lr: 0.1, ..TrainConfig::default() };
        let plain = local_train(&model, 0, &[1, 2], &cfg, ModelKind::Gmf, &DefensePolicy::none()).unwrap();
        let dp = local_train(&model, 0, &[1, 2], &cfg, ModelKind::Gmf, &DefensePolicy::dp_sgd(1e9, 0.0)).unwrap();
        for (a, b) in flat(&plain.model).iter().zip(flat(&dp.model)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = toy(0, 1, 4, 2);
        let none = DefensePolicy::none();
        let cfg = TrainConfig::default();
        assert!(local_train(&model, 0, &[], &cfg, ModelKind::Gmf, &none).is_err());
        assert!(local_train(&model, 0, &[9], &cfg, ModelKind::Gmf, &none).is_err());
        assert!(local_train(&model, 3, &[0], &cfg, ModelKind::Gmf, &none).is_err());
        assert!(TrainConfig { batch_size: 0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..cfg }.validate().is_err());
    }

    #[test]
    fn user_with_every_item_trains_on_positives() {
        let model = toy(2, 1, 3, 2);
        let out = local_train(&model, 0, &[0, 1, 2], &TrainConfig::default(), ModelKind::Gmf, &DefensePolicy::none()).unwrap();
        assert!(out.gradient.no_negatives);
    }

    #[test]
    fn serialization_round_trips() {
        let model = toy(4, 3, 5, 3);
        assert_eq!(RecModel::from_json(&model.to_json().unwrap()).unwrap(), model);
        let mut buf = Vec::new();
        model.write_binary(&mut buf).unwrap();
        assert_eq!(RecModel::read_binary(buf.as_slice()).unwrap(), model);
        assert!(RecModel::read_binary(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn f1_values() {
        assert_eq!(f1_score(&[1, 2], &[3], 2), 0.0);
        assert!((f1_score(&[1, 2], &[2, 5], 2) - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn gmf_scores_are_probabilities(seed in 0u64..1000, u in 0usize..3, i in 0usize..5) {
            let p = score_gmf(&toy(seed, 3, 5, 4), u, i).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }
}
