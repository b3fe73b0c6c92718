//! Gradient-classifier proxy: an MLP trained on item-embedding gradients of
//! fictive users that do or do not like the target items.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ItemId;
use crate::defenses::DefensePolicy;
use crate::error::{Error, Result};
use crate::linalg::{mix_seed, sigmoid, Matrix};
use crate::models::{init_model, local_train, ModelKind, RecModel, TrainConfig};

fn default_n() -> usize {
    20
}

fn default_epochs() -> usize {
    60
}

fn default_lr() -> f64 {
    1e-3
}

fn default_rounds() -> Vec<usize> {
    vec![1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AiaConfig {
    /// Fictive users drawn from the target items.
    #[serde(default = "default_n")]
    pub n_in: usize,
    /// Fictive users drawn from the other items.
    #[serde(default = "default_n")]
    pub n_out: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Rounds at which the classifier is trained and applied.
    #[serde(default = "default_rounds")]
    pub rounds: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for AiaConfig {
    fn default() -> Self {
        AiaConfig {
            n_in: default_n(),
            n_out: default_n(),
            epochs: default_epochs(),
            lr: default_lr(),
            rounds: default_rounds(),
            seed: 0,
        }
    }
}

const HIDDEN: [usize; 4] = [256, 128, 64, 32];
const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    #[inline]
    fn step(&mut self, idx: usize, param: &mut f64, g: f64, lr: f64, t: i32) {
        let m = &mut self.m[idx];
        let v = &mut self.v[idx];
        *m = ADAM_B1 * *m + (1.0 - ADAM_B1) * g;
        *v = ADAM_B2 * *v + (1.0 - ADAM_B2) * g * g;
        let mh = *m / (1.0 - ADAM_B1.powi(t));
        let vh = *v / (1.0 - ADAM_B2.powi(t));
        *param -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
}

/// Dense layer stored as `out x in`.
#[derive(Clone, Debug)]
struct Dense {
    w: Matrix,
    b: Vec<f64>,
}

/// Binary classifier `in -> 256 -> 128 -> 64 -> 32 -> 1` with ReLU hidden
/// units and a sigmoid output. The first layer takes sparse inputs and is
/// stored input-major so only the touched input rows are read or updated.
#[derive(Clone, Debug)]
pub struct Mlp {
    /// `in x 256`
    first: Matrix,
    first_b: Vec<f64>,
    rest: Vec<Dense>,
}

/// Sparse input: sorted `(index, value)` pairs.
pub type SparseInput = Vec<(usize, f64)>;

struct Trace {
    /// Post-activation outputs of every layer, the last one being the logit.
    acts: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(in_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = |fan_in: usize| Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let d0 = he(in_dim);
        let first = Matrix::from_fn(in_dim, HIDDEN[0], |_, _| d0.sample(&mut rng));
        let mut rest = Vec::new();
        let mut sizes = HIDDEN.to_vec();
        sizes.push(1);
        for w in sizes.windows(2) {
            let dist = he(w[0]);
            rest.push(Dense {
                w: Matrix::from_fn(w[1], w[0], |_, _| dist.sample(&mut rng)),
                b: vec![0.0; w[1]],
            });
        }
        Mlp {
            first,
            first_b: vec![0.0; HIDDEN[0]],
            rest,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.first.rows()
    }

    fn forward(&self, x: &[(usize, f64)]) -> Trace {
        let mut h = self.first_b.clone();
        for &(j, v) in x {
            crate::linalg::axpy(v, self.first.row(j), &mut h);
        }
        h.iter_mut().for_each(|a| *a = a.max(0.0));
        let mut acts = vec![h];
        let last = self.rest.len() - 1;
        for (li, layer) in self.rest.iter().enumerate() {
            let prev = acts.last().unwrap();
            let mut out: Vec<f64> = (0..layer.w.rows())
                .map(|o| layer.b[o] + crate::linalg::dot(layer.w.row(o), prev))
                .collect();
            if li != last {
                out.iter_mut().for_each(|a| *a = a.max(0.0));
            }
            acts.push(out);
        }
        Trace { acts }
    }

    /// Probability that `x` comes from a target-liking user.
    pub fn predict(&self, x: &[(usize, f64)]) -> f64 {
        sigmoid(self.forward(x).acts.last().unwrap()[0])
    }

    /// Full-batch Adam on mean BCE; returns the loss of each epoch.
    pub fn fit(&mut self, xs: &[SparseInput], ys: &[f64], epochs: usize, lr: f64) -> Vec<f64> {
        let n = xs.len().max(1) as f64;
        let mut adam_first = Adam::new(self.first.as_slice().len());
        let mut adam_first_b = Adam::new(self.first_b.len());
        let mut adam_rest: Vec<(Adam, Adam)> = self
            .rest
            .iter()
            .map(|l| (Adam::new(l.w.as_slice().len()), Adam::new(l.b.len())))
            .collect();
        let mut losses = Vec::with_capacity(epochs);
        let width = HIDDEN[0];
        for epoch in 0..epochs {
            let t = epoch as i32 + 1;
            let mut g_first: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
            let mut g_first_b = vec![0.0; width];
            let mut g_rest: Vec<(Matrix, Vec<f64>)> = self
                .rest
                .iter()
                .map(|l| (Matrix::zeros(l.w.rows(), l.w.cols()), vec![0.0; l.b.len()]))
                .collect();
            let mut loss = 0.0;
            for (x, &y) in xs.iter().zip(ys) {
                let tr = self.forward(x);
                let z = tr.acts.last().unwrap()[0];
                let p = sigmoid(z);
                loss += if y > 0.5 { -(p.max(1e-12)).ln() } else { -((1.0 - p).max(1e-12)).ln() };
                let mut delta = vec![(p - y) / n];
                for li in (0..self.rest.len()).rev() {
                    let input = &tr.acts[li];
                    let layer = &self.rest[li];
                    let (gw, gb) = &mut g_rest[li];
                    for o in 0..layer.w.rows() {
                        gb[o] += delta[o];
                        crate::linalg::axpy(delta[o], input, gw.row_mut(o));
                    }
                    let mut back = vec![0.0; layer.w.cols()];
                    for o in 0..layer.w.rows() {
                        crate::linalg::axpy(delta[o], layer.w.row(o), &mut back);
                    }
                    // ReLU derivative of the layer feeding this one
                    for (bk, a) in back.iter_mut().zip(input) {
                        if *a <= 0.0 {
                            *bk = 0.0;
                        }
                    }
                    delta = back;
                }
                for k in 0..width {
                    g_first_b[k] += delta[k];
                }
                for &(j, v) in x {
                    let row = g_first.entry(j).or_insert_with(|| vec![0.0; width]);
                    crate::linalg::axpy(v, &delta, row);
                }
            }
            losses.push(loss / n);
            for (j, g) in &g_first {
                let row = self.first.row_mut(*j);
                for k in 0..width {
                    adam_first.step(j * width + k, &mut row[k], g[k], lr, t);
                }
            }
            for k in 0..width {
                adam_first_b.step(k, &mut self.first_b[k], g_first_b[k], lr, t);
            }
            for (li, (gw, gb)) in g_rest.iter().enumerate() {
                let (aw, ab) = &mut adam_rest[li];
                let layer = &mut self.rest[li];
                for (idx, (p, g)) in layer.w.as_mut_slice().iter_mut().zip(gw.as_slice()).enumerate() {
                    aw.step(idx, p, *g, lr, t);
                }
                for (idx, (p, g)) in layer.b.iter_mut().zip(gb).enumerate() {
                    ab.step(idx, p, *g, lr, t);
                }
            }
        }
        losses
    }

    pub fn is_finite(&self) -> bool {
        self.first.as_slice().iter().chain(&self.first_b).all(|v| v.is_finite())
            && self
                .rest
                .iter()
                .all(|l| l.w.as_slice().iter().chain(&l.b).all(|v| v.is_finite()))
    }
}

/// Trained classifier, or a seeded random ranking when training diverged.
#[derive(Clone, Debug)]
pub struct AiaClassifier {
    mlp: Option<Mlp>,
    scale: f64,
    fallback_seed: u64,
    pub train_losses: Vec<f64>,
}

impl AiaClassifier {
    pub fn is_fallback(&self) -> bool {
        self.mlp.is_none()
    }

    fn sparse(&self, grad: &[f64]) -> SparseInput {
        grad.iter()
            .enumerate()
            .filter(|(_, g)| **g != 0.0)
            .map(|(j, g)| (j, g * self.scale))
            .collect()
    }

    /// Confidence that a dense item-embedding gradient belongs to a member
    /// of the target community.
    pub fn confidence(&self, grad: &[f64]) -> f64 {
        match &self.mlp {
            Some(mlp) if grad.len() == mlp.in_dim() => mlp.predict(&self.sparse(grad)),
            _ => {
                let h = grad
                    .iter()
                    .fold(self.fallback_seed, |acc, g| mix_seed(acc, &[g.to_bits()]));
                (h >> 11) as f64 / (1u64 << 53) as f64
            }
        }
    }
}

/// Trains the classifier from fictive users starting at `base`: `n_in`
/// of them rate random halves of the target items, `n_out` rate the same
/// number of other items.
pub fn aia_proxy(
    target_items: &[ItemId],
    base: &RecModel,
    n_items: usize,
    cfg: &AiaConfig,
    train_cfg: &TrainConfig,
) -> Result<AiaClassifier> {
    if cfg.n_in + cfg.n_out == 0 {
        return Err(Error::Config("AIA needs at least one fictive dataset".into()));
    }
    if target_items.is_empty() || target_items.iter().any(|&i| i >= n_items) {
        return Err(Error::Config("AIA target items out of range".into()));
    }
    let kind = if base.head.is_some() { ModelKind::Gmf } else { ModelKind::Prme };
    let d = base.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let others: Vec<ItemId> = (0..n_items).filter(|i| target_items.binary_search(i).is_err()).collect();
    let size = target_items.len().div_ceil(2);
    let mut xs_dense: Vec<Vec<f64>> = Vec::new();
    let mut ys = Vec::new();
    for f in 0..cfg.n_in + cfg.n_out {
        let inside = f < cfg.n_in;
        let pool = if inside || others.is_empty() { target_items } else { &others };
        let items: Vec<ItemId> = pool.choose_multiple(&mut rng, size.min(pool.len())).copied().collect();
        let fictive_cfg = train_cfg.reseeded(&[0xA1A, f as u64, cfg.seed]);
        let mut model = init_model(1, 0, &fictive_cfg, kind);
        model.item_emb = base.item_emb.clone();
        model.head = base.head.clone();
        if model.user_emb.cols() != d {
            return Err(Error::Shape("AIA train config dim differs from the model".into()));
        }
        let update = local_train(&model, 0, &items, &fictive_cfg, kind, &DefensePolicy::none())?;
        xs_dense.push(update.gradient.dense_item_grad(n_items, d));
        ys.push(if inside { 1.0 } else { 0.0 });
    }
    let (sum_sq, nnz) = xs_dense
        .iter()
        .flatten()
        .filter(|v| **v != 0.0)
        .fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    let rms = if nnz == 0 { 1.0 } else { (sum_sq / nnz as f64).sqrt() };
    let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    let xs: Vec<SparseInput> = xs_dense
        .iter()
        .map(|x| {
            x.iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(j, v)| (j, v * scale))
                .collect()
        })
        .collect();
    let mut mlp = Mlp::new(n_items * d, rng.random());
    let losses = mlp.fit(&xs, &ys, cfg.epochs, cfg.lr);
    let diverged = !mlp.is_finite() || losses.iter().any(|l| !l.is_finite());
    if diverged {
        log::warn!("AIA classifier diverged; falling back to a random ranking");
    }
    Ok(AiaClassifier {
        mlp: (!diverged).then_some(mlp),
        scale,
        fallback_seed: cfg.seed,
        train_losses: losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_learns_separable_sparse_data() {
        let xs: Vec<SparseInput> = (0..20)
            .map(|i| if i % 2 == 0 { vec![(0, 1.0), (3, 0.5)] } else { vec![(1, 1.0), (2, 0.5)] })
            .collect();
        let ys: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let mut mlp = Mlp::new(4, 3);
        let losses = mlp.fit(&xs, &ys, 100, 1e-2);
        assert!(losses.last().unwrap() < &0.05, "{losses:?}");
        assert!(mlp.predict(&xs[0]) > 0.9 && mlp.predict(&xs[1]) < 0.1);
    }

    #[test]
    fn rejects_empty_fictive_sets() {
        let model = init_model(2, 5, &TrainConfig::default(), ModelKind::Gmf);
        let cfg = AiaConfig {
            n_in: 0,
            n_out: 0,
            ..AiaConfig::default()
        };
        assert!(aia_proxy(&[0, 1], &model, 5, &cfg, &TrainConfig::default()).is_err());
    }
}
