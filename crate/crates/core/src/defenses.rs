//! Share-less parameter withholding and local DP-SGD.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ItemId, UserId};
use crate::error::{Error, Result};
use crate::linalg::{norm2, Matrix};
use crate::models::RecModel;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    #[default]
    None,
    ShareLess,
    DpSgd,
}

fn default_tau() -> f64 {
    0.03
}

fn default_clip() -> f64 {
    2.0
}

fn default_delta() -> f64 {
    1e-6
}

/// Which defense a client applies during local training and before sharing.
/// Parameters of inactive kinds are carried but ignored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefensePolicy {
    #[serde(default)]
    pub kind: DefenseKind,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_clip")]
    pub clip: f64,
    #[serde(default)]
    pub noise_mult: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

impl Default for DefensePolicy {
    fn default() -> Self {
        DefensePolicy {
            kind: DefenseKind::None,
            tau: default_tau(),
            clip: default_clip(),
            noise_mult: 0.0,
            delta: default_delta(),
        }
    }
}

impl DefensePolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn share_less(tau: f64) -> Self {
        DefensePolicy {
            kind: DefenseKind::ShareLess,
            tau,
            ..Self::default()
        }
    }

    pub fn dp_sgd(clip: f64, noise_mult: f64) -> Self {
        DefensePolicy {
            kind: DefenseKind::DpSgd,
            clip,
            noise_mult,
            ..Self::default()
        }
    }

    pub fn is_share_less(&self) -> bool {
        self.kind == DefenseKind::ShareLess
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DefenseKind::None => Ok(()),
            DefenseKind::ShareLess if !(self.tau >= 0.0 && self.tau.is_finite()) => {
                Err(Error::Config(format!("defense.tau must be >= 0, got {}", self.tau)))
            }
            DefenseKind::DpSgd if !(self.clip > 0.0 && self.clip.is_finite()) => {
                Err(Error::Config(format!("defense.clip must be > 0, got {}", self.clip)))
            }
            DefenseKind::DpSgd if !(self.noise_mult >= 0.0 && self.noise_mult.is_finite()) => Err(
                Error::Config(format!("defense.noise_mult must be >= 0, got {}", self.noise_mult)),
            ),
            DefenseKind::DpSgd if !(self.delta > 0.0 && self.delta < 1.0) => {
                Err(Error::Config(format!("defense.delta must be in (0,1), got {}", self.delta)))
            }
            _ => Ok(()),
        }
    }
}

/// Regularized local loss: `base + tau * sum_j ||updated_j - reference_j||_2`
/// over `items`.
pub fn share_less_loss(
    base_loss: f64,
    item_emb_updated: &Matrix,
    item_emb_reference: &Matrix,
    items: &[ItemId],
    tau: f64,
) -> f64 {
    let penalty: f64 = items
        .iter()
        .map(|&j| {
            item_emb_updated
                .row(j)
                .iter()
                .zip(item_emb_reference.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    base_loss + tau * penalty
}

/// Adds the gradient of `tau * ||updated - reference||_2` to `grad`.
/// The subgradient at zero distance is taken as zero.
pub fn add_share_less_grad(updated: &[f64], reference: &[f64], tau: f64, grad: &mut [f64]) {
    if tau == 0.0 {
        return;
    }
    let dist = updated
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if dist > 0.0 {
        for ((g, a), b) in grad.iter_mut().zip(updated).zip(reference) {
            *g += tau * (a - b) / dist;
        }
    }
}

/// Shareable part of a model under share-less: no user-embedding block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialUpdate {
    pub item_emb: Matrix,
    pub head: Option<Vec<f64>>,
}

pub fn strip_private_params(update: &RecModel) -> PartialUpdate {
    PartialUpdate {
        item_emb: update.item_emb.clone(),
        head: update.head.clone(),
    }
}

/// What a client puts on the wire.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "payload", rename_all = "snake_case")]
pub enum SharedModel {
    Full(RecModel),
    Partial(PartialUpdate),
}

impl SharedModel {
    pub fn item_emb(&self) -> &Matrix {
        match self {
            SharedModel::Full(m) => &m.item_emb,
            SharedModel::Partial(p) => &p.item_emb,
        }
    }

    pub fn head(&self) -> Option<&[f64]> {
        match self {
            SharedModel::Full(m) => m.head.as_deref(),
            SharedModel::Partial(p) => p.head.as_deref(),
        }
    }

    /// The sender's own user row, if it was shared. A single-row user block
    /// is the compact form used by gossip nodes and always belongs to the
    /// sender.
    pub fn user_row(&self, owner: UserId) -> Option<&[f64]> {
        match self {
            SharedModel::Full(m) if m.user_emb.rows() == 1 => Some(m.user_emb.row(0)),
            SharedModel::Full(m) if owner < m.user_emb.rows() => Some(m.user_emb.row(owner)),
            _ => None,
        }
    }

    pub fn has_user_block(&self) -> bool {
        matches!(self, SharedModel::Full(_))
    }
}

/// Scales `grad` in place so that its L2 norm is at most `clip`; returns
/// the pre-clipping norm.
pub fn clip_gradient(grad: &mut [f64], clip: f64) -> f64 {
    let norm = norm2(grad);
    if norm > clip {
        let scale = clip / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// Clip to norm `clip`, then add i.i.d. `N(0, (noise_mult * clip)^2)` to
/// every coordinate.
pub fn dp_sgd_step<R: Rng + ?Sized>(grad: &[f64], clip: f64, noise_mult: f64, rng: &mut R) -> Vec<f64> {
    let mut out = grad.to_vec();
    clip_gradient(&mut out, clip);
    let sigma = noise_mult * clip;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite positive sigma");
        for g in out.iter_mut() {
            *g += normal.sample(rng);
        }
    }
    out
}

/// Advisory epsilon from this crate's own Renyi-DP accountant for `steps`
/// adaptive compositions of the Gaussian mechanism (no subsampling
/// amplification). Not a bound the experiments are calibrated against.
pub fn gaussian_rdp_epsilon(noise_mult: f64, steps: usize, delta: f64) -> f64 {
    if noise_mult <= 0.0 || steps == 0 {
        return if steps == 0 { 0.0 } else { f64::INFINITY };
    }
    let per_alpha = steps as f64 / (2.0 * noise_mult * noise_mult);
    let mut best = f64::INFINITY;
    let mut alpha = 1.0 + 1.0 / 64.0;
    while alpha < 4096.0 {
        let eps = per_alpha * alpha + (1.0 / delta).ln() / (alpha - 1.0);
        best = best.min(eps);
        alpha *= 1.05;
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn share_less_penalty_values() {
        let upd = Matrix::from_vec(2, 2, vec![3.0, 4.0, 1.0, 1.0]).unwrap();
        let reference = Matrix::zeros(2, 2);
        assert_eq!(share_less_loss(0.7, &upd, &reference, &[0], 0.0), 0.7);
        assert_eq!(share_less_loss(0.7, &reference, &reference, &[0, 1], 1.0), 0.7);
        assert!((share_less_loss(0.7, &upd, &reference, &[0], 1.0) - 5.7).abs() < 1e-12);
    }

    #[test]
    fn share_less_grad_is_unit_direction() {
        let mut g = vec![0.0, 0.0];
        add_share_less_grad(&[3.0, 4.0], &[0.0, 0.0], 2.0, &mut g);
        assert!((g[0] - 1.2).abs() < 1e-12 && (g[1] - 1.6).abs() < 1e-12);
        let mut z = vec![0.0, 0.0];
        add_share_less_grad(&[1.0, 1.0], &[1.0, 1.0], 2.0, &mut z);
        assert_eq!(z, vec![0.0, 0.0]);
    }

    #[test]
    fn clipping_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = vec![0.3, -0.4];
        assert_eq!(dp_sgd_step(&g, 1.0, 0.0, &mut rng), g);
        // ||g|| = 2C
        let g = vec![6.0, 8.0];
        let out = dp_sgd_step(&g, 5.0, 0.0, &mut rng);
        assert!((out[0] - 3.0).abs() < 1e-12 && (out[1] - 4.0).abs() < 1e-12);
        assert!((norm2(&out) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn partial_update_serialization_has_no_user_block() {
        let model = RecModel {
            user_emb: Matrix::zeros(2, 2),
            item_emb: Matrix::from_vec(1, 2, vec![0.5, 0.25]).unwrap(),
            head: Some(vec![1.0, 1.0]),
        };
        let msg = SharedModel::Partial(strip_private_params(&model));
        let json = serde_json::to_string(&msg).unwrap();
        assert!(!json.contains("user_emb"));
        let back: SharedModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, msg);
        assert!(!back.has_user_block());
        assert!(back.user_row(0).is_none());
    }

    #[test]
    fn validate_ranges() {
        assert!(DefensePolicy::dp_sgd(0.0, 1.0).validate().is_err());
        assert!(DefensePolicy::dp_sgd(1.0, -1.0).validate().is_err());
        assert!(DefensePolicy::share_less(-0.1).validate().is_err());
        assert!(DefensePolicy { tau: -5.0, ..DefensePolicy::none() }.validate().is_ok());
    }

    #[test]
    fn rdp_epsilon_shrinks_with_noise() {
        let a = gaussian_rdp_epsilon(1.0, 100, 1e-6);
        let b = gaussian_rdp_epsilon(4.0, 100, 1e-6);
        assert!(a > b && b > 0.0);
        assert!(gaussian_rdp_epsilon(0.0, 10, 1e-6).is_infinite());
    }
}
