//! Federated averaging with an honest-but-curious server.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::AdversaryHook;
use crate::data::{InteractionDataset, UserId};
use crate::defenses::{strip_private_params, DefenseKind, DefensePolicy, PartialUpdate, SharedModel};
use crate::error::{Error, Result};
use crate::linalg::{axpy, mix_seed, Matrix};
use crate::models::{f1_by, hit_ratio_by, init_model, score_row, train_user, ModelKind, RecModel, TrainConfig, UserParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggWeights {
    Uniform,
    /// Proportional to the client's number of train interactions.
    #[default]
    ByDataSize,
}

fn default_rounds() -> usize {
    100
}

fn default_fraction() -> f64 {
    1.0
}

fn default_eval_every() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_fraction")]
    pub participation_fraction: f64,
    #[serde(default)]
    pub agg_weights: AggWeights,
    #[serde(default)]
    pub seed: u64,
    /// Utility and attack checkpoints every this many rounds (and at the end).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            rounds: default_rounds(),
            participation_fraction: default_fraction(),
            agg_weights: AggWeights::default(),
            seed: 0,
            eval_every: default_eval_every(),
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("protocol.rounds must be >= 1".into()));
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "protocol.participation_fraction={} must be in (0,1]",
                self.participation_fraction
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("protocol.eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Utility of the trained models at one checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityPoint {
    pub round: usize,
    pub value: f64,
}

/// What a protocol run produced, complete or not.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Global model with every user's latest row (federated only).
    pub model: Option<RecModel>,
    pub utility: Vec<UtilityPoint>,
    pub rounds_completed: usize,
    /// Set when the run stopped early; holds the reason.
    pub incomplete: Option<String>,
    pub messages: u64,
}

/// Cut-off of the utility metrics.
pub const UTILITY_K: usize = 20;

/// HR@20 for GMF, F1@20 for PRME, with `score(u, i)` from whatever model
/// user `u` holds.
pub fn utility_by<F>(dataset: &InteractionDataset, kind: ModelKind, seed: u64, score: F) -> f64
where
    F: Fn(UserId, usize) -> f64,
{
    match kind {
        ModelKind::Gmf => hit_ratio_by(dataset, UTILITY_K, seed, score),
        ModelKind::Prme => f1_by(dataset, UTILITY_K, score),
    }
}

/// Users processed per parallel batch; bounds the number of live model
/// copies.
const CHUNK: usize = 64;

struct ClientResult {
    user: UserId,
    message: SharedModel,
    /// Updated user row kept by the client under share-less.
    private_row: Option<Vec<f64>>,
}

fn train_client(
    dataset: &InteractionDataset,
    global: &RecModel,
    client_rows: Option<&Matrix>,
    u: UserId,
    cfg: &TrainConfig,
    kind: ModelKind,
    defense: &DefensePolicy,
) -> Result<ClientResult> {
    if let Some(rows) = client_rows {
        let mut row = rows.row(u).to_vec();
        let mut item_emb = global.item_emb.clone();
        let mut head = global.head.clone();
        let params = UserParams {
            user: u,
            user_row: &mut row,
            item_emb: &mut item_emb,
            head: head.as_mut(),
        };
        train_user(params, dataset.train(u), cfg, kind, defense, Some(&global.item_emb))?;
        Ok(ClientResult {
            user: u,
            message: SharedModel::Partial(PartialUpdate { item_emb, head }),
            private_row: Some(row),
        })
    } else {
        let mut local = global.clone();
        let RecModel { user_emb, item_emb, head } = &mut local;
        let params = UserParams {
            user: u,
            user_row: user_emb.row_mut(u),
            item_emb,
            head: head.as_mut(),
        };
        train_user(params, dataset.train(u), cfg, kind, defense, None)?;
        Ok(ClientResult {
            user: u,
            message: SharedModel::Full(local),
            private_row: None,
        })
    }
}

/// Model each user would score with: global items and head, the user's
/// latest row.
fn evaluation_model(global: &RecModel, client_rows: Option<&Matrix>) -> RecModel {
    let mut m = global.clone();
    if let Some(rows) = client_rows {
        m.user_emb = rows.clone();
    }
    m
}

/// Runs FedAvg for `cfg.rounds` rounds. Mid-run failures (training or the
/// adversary) do not return `Err`; the outcome is flagged incomplete.
pub fn run_federated(
    dataset: &InteractionDataset,
    kind: ModelKind,
    train_cfg: &TrainConfig,
    cfg: &FedConfig,
    defense: &DefensePolicy,
    mut hook: Option<&mut dyn AdversaryHook>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    train_cfg.validate()?;
    defense.validate()?;
    dataset.validate()?;
    let n = dataset.n_users();
    let d = train_cfg.dim;
    let share_less = defense.kind == DefenseKind::ShareLess;
    let mut global = init_model(n, dataset.n_items(), train_cfg, kind);
    // Under share-less the server never sees user rows; clients keep theirs.
    let mut client_rows = share_less.then(|| global.user_emb.clone());
    let eligible: Vec<UserId> = (0..n).filter(|&u| !dataset.train(u).is_empty()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[0xFED]));
    let weights: Vec<f64> = (0..n)
        .map(|u| match cfg.agg_weights {
            AggWeights::Uniform => 1.0,
            AggWeights::ByDataSize => dataset.train(u).len() as f64,
        })
        .collect();
    let eval_seed = mix_seed(cfg.seed, &[0xE7A1]);

    let mut outcome = RunOutcome {
        model: None,
        utility: Vec::new(),
        rounds_completed: 0,
        incomplete: None,
        messages: 0,
    };

    'rounds: for round in 1..=cfg.rounds {
        let participants: Vec<UserId> = if cfg.participation_fraction >= 1.0 {
            eligible.clone()
        } else {
            let m = ((cfg.participation_fraction * eligible.len() as f64).round() as usize).clamp(1, eligible.len());
            let mut picked: Vec<UserId> = sample(&mut rng, eligible.len(), m).into_iter().map(|i| eligible[i]).collect();
            picked.sort_unstable();
            picked
        };

        if let Some(h) = hook.as_deref_mut() {
            let broadcast = if share_less {
                SharedModel::Partial(strip_private_params(&global))
            } else {
                SharedModel::Full(global.clone())
            };
            if let Err(e) = h.begin_round(round, Some(&broadcast)) {
                outcome.incomplete = Some(format!("adversary failed in round {round}: {e}"));
                break;
            }
        }

        let mut item_sum = Matrix::zeros(global.n_items(), d);
        let mut head_sum = global.head.as_ref().map(|_| vec![0.0; d]);
        let mut weight_sum = 0.0;
        let mut new_rows: Vec<(UserId, Vec<f64>)> = Vec::new();

        for chunk in participants.chunks(CHUNK * rayon::current_num_threads().max(1)) {
            let results: Vec<Result<ClientResult>> = chunk
                .par_iter()
                .map(|&u| {
                    let ucfg = train_cfg.reseeded(&[round as u64, u as u64]);
                    train_client(dataset, &global, client_rows.as_ref(), u, &ucfg, kind, defense)
                })
                .collect();
            // merge in user-id order so results do not depend on scheduling
            for r in results {
                let c = match r {
                    Ok(c) => c,
                    Err(e) => {
                        outcome.incomplete = Some(format!("local training failed in round {round}: {e}"));
                        break 'rounds;
                    }
                };
                outcome.messages += 1;
                if let Some(h) = hook.as_deref_mut() {
                    if let Err(e) = h.observe(None, c.user, &c.message, round) {
                        outcome.incomplete = Some(format!("adversary failed in round {round}: {e}"));
                        break 'rounds;
                    }
                }
                let w = weights[c.user];
                weight_sum += w;
                axpy(w, c.message.item_emb().as_slice(), item_sum.as_mut_slice());
                if let (Some(hs), Some(h)) = (head_sum.as_mut(), c.message.head()) {
                    axpy(w, h, hs);
                }
                match (c.private_row, &c.message) {
                    (Some(row), _) => new_rows.push((c.user, row)),
                    (None, SharedModel::Full(m)) => new_rows.push((c.user, m.user_emb.row(c.user).to_vec())),
                    (None, SharedModel::Partial(_)) => {}
                }
            }
        }

        if weight_sum > 0.0 {
            let inv = 1.0 / weight_sum;
            item_sum.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
            global.item_emb = item_sum;
            if let (Some(h), Some(hs)) = (global.head.as_mut(), head_sum) {
                *h = hs.into_iter().map(|v| v * inv).collect();
            }
        }
        // each participant's own row is authoritative for that row
        let rows = client_rows.as_mut().unwrap_or(&mut global.user_emb);
        for (u, row) in new_rows {
            rows.row_mut(u).copy_from_slice(&row);
        }
        if !global.is_finite() || client_rows.as_ref().is_some_and(|m| m.as_slice().iter().any(|v| !v.is_finite())) {
            outcome.incomplete = Some(format!("model diverged in round {round}"));
            break;
        }

        if let Some(h) = hook.as_deref_mut() {
            if let Err(e) = h.end_round(round) {
                outcome.incomplete = Some(format!("adversary failed in round {round}: {e}"));
                break;
            }
        }
        if round % cfg.eval_every == 0 || round == cfg.rounds {
            let eval = evaluation_model(&global, client_rows.as_ref());
            let head = eval.head.as_deref();
            let value = utility_by(dataset, kind, eval_seed, |u, i| {
                score_row(kind, eval.user_emb.row(u), eval.item_emb.row(i), head)
            });
            outcome.utility.push(UtilityPoint { round, value });
            log::info!("fed round {round}: utility {value:.4}");
            if let Some(h) = hook.as_deref_mut() {
                if let Err(e) = h.checkpoint(round) {
                    outcome.incomplete = Some(format!("adversary failed in round {round}: {e}"));
                    break;
                }
            }
        }
        outcome.rounds_completed = round;
    }
    outcome.model = Some(evaluation_model(&global, client_rows.as_ref()));
    Ok(outcome)
}
