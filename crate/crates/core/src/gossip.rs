//! Gossip learning over a dynamic P-out-regular digraph.
//!
//! One iteration is one wake event: a uniformly chosen node casts its model
//! to one out-neighbor, averages its inbox into its own model and trains
//! locally. `N` iterations make a round. View refreshes follow a per-node
//! geometric clock in iteration time; a refresh that fell due is applied
//! when the node next acts, which is exact in distribution for the random
//! sampler since only the view at cast time is ever read.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::attack::AdversaryHook;
use crate::data::{InteractionDataset, ItemId, UserId};
use crate::defenses::{DefenseKind, DefensePolicy, PartialUpdate, SharedModel};
use crate::error::{Error, Result};
use crate::federated::{utility_by, RunOutcome, UtilityPoint};
use crate::linalg::{axpy, mix_seed, Matrix};
use crate::models::{init_model, score_row, train_user, ModelKind, RecModel, TrainConfig, UserParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeerSampler {
    #[default]
    Random,
    Personalized,
}

fn default_rounds() -> usize {
    200
}

fn default_p() -> usize {
    3
}

fn default_refresh() -> f64 {
    0.1
}

fn default_exploration() -> f64 {
    0.4
}

fn default_eval_every() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GossipConfig {
    /// Number of rounds; the run has `rounds * N` iterations.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_p", alias = "P")]
    pub p: usize,
    /// Rate of the exponential view-refresh clock, per iteration.
    #[serde(default = "default_refresh")]
    pub refresh: f64,
    #[serde(default)]
    pub sampler: PeerSampler,
    #[serde(default = "default_exploration")]
    pub exploration_ratio: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Verify the view invariants after every iteration.
    #[serde(default)]
    pub check_invariants: bool,
    /// JSON-lines message trace.
    #[serde(default)]
    pub trace: Option<PathBuf>,
}

impl Default for GossipConfig {
    fn default() -> Self {
        GossipConfig {
            rounds: default_rounds(),
            p: default_p(),
            refresh: default_refresh(),
            sampler: PeerSampler::Random,
            exploration_ratio: default_exploration(),
            seed: 0,
            eval_every: default_eval_every(),
            check_invariants: false,
            trace: None,
        }
    }
}

impl GossipConfig {
    pub fn validate(&self, n_users: usize) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("protocol.rounds must be >= 1".into()));
        }
        if self.p == 0 || self.p >= n_users.max(1) {
            return Err(Error::Config(format!(
                "protocol.P={} must be in 1..{} for {n_users} users",
                self.p, n_users
            )));
        }
        if !(self.refresh > 0.0 && self.refresh.is_finite()) {
            return Err(Error::Config(format!("protocol.refresh={} must be > 0", self.refresh)));
        }
        if !(0.0..=1.0).contains(&self.exploration_ratio) {
            return Err(Error::Config(format!(
                "protocol.exploration_ratio={} must be in [0,1]",
                self.exploration_ratio
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("protocol.eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Out-views of every node and their refresh clocks.
#[derive(Clone, Debug)]
pub struct GossipNetwork {
    p: usize,
    views: Vec<Vec<UserId>>,
    next_refresh: Vec<u64>,
    clock: Exp<f64>,
}

/// `p` distinct uniform nodes other than `u` among `0..n`.
pub fn random_view<R: Rng + ?Sized>(u: UserId, n: usize, p: usize, rng: &mut R) -> Vec<UserId> {
    sample(rng, n - 1, p)
        .into_iter()
        .map(|i| if i >= u { i + 1 } else { i })
        .collect()
}

/// Refills a view slot by slot: with probability `exploration_ratio` a
/// uniform node, otherwise the best not-yet-chosen candidate by `perf`
/// (ties to lower id). Candidates without a known score are only reachable
/// through exploration; when the scored ones run out, slots are padded
/// uniformly.
pub fn personalized_sample<R: Rng + ?Sized>(
    u: UserId,
    n: usize,
    perf: &HashMap<UserId, f64>,
    exploration_ratio: f64,
    p: usize,
    rng: &mut R,
) -> Vec<UserId> {
    let mut ranked: Vec<(UserId, f64)> = perf.iter().filter(|(&v, _)| v != u && v < n).map(|(&v, &s)| (v, s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut next_ranked = ranked.into_iter().map(|(v, _)| v);
    let mut view: Vec<UserId> = Vec::with_capacity(p);
    while view.len() < p {
        let explore = exploration_ratio >= 1.0 || rng.random::<f64>() < exploration_ratio;
        let pick = if explore {
            None
        } else {
            next_ranked.by_ref().find(|v| !view.contains(v))
        };
        let v = match pick {
            Some(v) => v,
            None => loop {
                let v = rng.random_range(0..n);
                if v != u && !view.contains(&v) {
                    break v;
                }
            },
        };
        view.push(v);
    }
    view
}

impl GossipNetwork {
    pub fn new<R: Rng + ?Sized>(n: usize, p: usize, refresh: f64, rng: &mut R) -> Result<Self> {
        if p == 0 || p >= n {
            return Err(Error::Config(format!("out-degree P={p} needs more than P users, have {n}")));
        }
        let clock = Exp::new(refresh).map_err(|e| Error::Config(format!("refresh rate: {e}")))?;
        let views = (0..n).map(|u| random_view(u, n, p, rng)).collect();
        let mut net = GossipNetwork {
            p,
            views,
            next_refresh: vec![0; n],
            clock,
        };
        for u in 0..n {
            net.schedule(u, 0, rng);
        }
        Ok(net)
    }

    pub fn n(&self) -> usize {
        self.views.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn view(&self, u: UserId) -> &[UserId] {
        &self.views[u]
    }

    /// Next refresh strictly after `t`, a geometric number of iterations away.
    fn schedule<R: Rng + ?Sized>(&mut self, u: UserId, t: u64, rng: &mut R) {
        let gap = self.clock.sample(rng).ceil().max(1.0);
        self.next_refresh[u] = t.saturating_add(gap as u64);
    }

    pub fn refresh_due(&self, u: UserId, t: u64) -> bool {
        self.next_refresh[u] <= t
    }

    pub fn set_view<R: Rng + ?Sized>(&mut self, u: UserId, view: Vec<UserId>, t: u64, rng: &mut R) -> Result<()> {
        check_view(u, &view, self.p, self.n())?;
        self.views[u] = view;
        self.schedule(u, t, rng);
        Ok(())
    }

    pub fn check_invariants(&self) -> Result<()> {
        for (u, view) in self.views.iter().enumerate() {
            check_view(u, view, self.p, self.n())?;
        }
        Ok(())
    }
}

fn check_view(u: UserId, view: &[UserId], p: usize, n: usize) -> Result<()> {
    if view.len() != p {
        return Err(Error::Protocol(format!("view of {u} has {} members, expected {p}", view.len())));
    }
    for (i, &v) in view.iter().enumerate() {
        if v == u {
            return Err(Error::Protocol(format!("view of {u} contains itself")));
        }
        if v >= n {
            return Err(Error::Index { kind: "user", id: v, len: n });
        }
        if view[..i].contains(&v) {
            return Err(Error::Protocol(format!("view of {u} lists {v} twice")));
        }
    }
    Ok(())
}

/// Uniform average of the item embeddings and head of `own` and `inbox`.
/// Every node keeps its own user row.
pub fn aggregate_uniform(items: &mut Matrix, head: Option<&mut Vec<f64>>, inbox: &[SharedModel]) -> Result<()> {
    if inbox.is_empty() {
        return Ok(());
    }
    let w = 1.0 / (inbox.len() + 1) as f64;
    for m in inbox {
        if !m.item_emb().same_shape(items) {
            return Err(Error::Shape("inbox model has a different item block".into()));
        }
    }
    let mut acc = items.clone();
    for m in inbox {
        axpy(1.0, m.item_emb().as_slice(), acc.as_mut_slice());
    }
    acc.as_mut_slice().iter_mut().for_each(|v| *v *= w);
    *items = acc;
    if let Some(h) = head {
        let mut acc = h.clone();
        for m in inbox {
            let mh = m
                .head()
                .ok_or_else(|| Error::Shape("inbox model lacks output weights".into()))?;
            axpy(1.0, mh, &mut acc);
        }
        acc.iter_mut().for_each(|v| *v *= w);
        *h = acc;
    }
    Ok(())
}

struct Node {
    row: Vec<f64>,
    items: Matrix,
    head: Option<Vec<f64>>,
    inbox: Vec<SharedModel>,
    /// Last-known quality of other nodes' models on this node's data.
    perf: HashMap<UserId, f64>,
}

impl Node {
    fn message(&self, share_less: bool) -> SharedModel {
        if share_less {
            SharedModel::Partial(PartialUpdate {
                item_emb: self.items.clone(),
                head: self.head.clone(),
            })
        } else {
            SharedModel::Full(RecModel {
                user_emb: Matrix::from_vec(1, self.row.len(), self.row.clone()).expect("sized"),
                item_emb: self.items.clone(),
                head: self.head.clone(),
            })
        }
    }
}

const PERF_ITEMS: usize = 10;
const PERF_NEGATIVES: usize = 20;
const PERF_K: usize = 5;

/// HR@5 of a received model on up to ten of the receiver's train items,
/// each ranked against twenty items the receiver never rated, scored with
/// the receiver's own user row.
fn perf_proxy(
    dataset: &InteractionDataset,
    receiver: UserId,
    row: &[f64],
    msg: &SharedModel,
    kind: ModelKind,
    seed: u64,
) -> f64 {
    let train = dataset.train(receiver);
    if train.is_empty() {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = msg.item_emb();
    let head = msg.head();
    let n_items = dataset.n_items();
    let chosen: Vec<ItemId> = sample(&mut rng, train.len(), PERF_ITEMS.min(train.len()))
        .into_iter()
        .map(|i| train[i])
        .collect();
    let mut hits = 0;
    for &pos in &chosen {
        let s = score_row(kind, row, items.row(pos), head);
        let mut ahead = 0;
        let mut drawn = 0;
        let mut guard = 0;
        while drawn < PERF_NEGATIVES && guard < PERF_NEGATIVES * 50 {
            guard += 1;
            let neg = rng.random_range(0..n_items);
            if dataset.interacted(receiver, neg) {
                continue;
            }
            drawn += 1;
            if score_row(kind, row, items.row(neg), head) > s {
                ahead += 1;
            }
        }
        if ahead < PERF_K {
            hits += 1;
        }
    }
    hits as f64 / chosen.len() as f64
}

#[derive(Serialize)]
struct TraceEvent {
    t: u64,
    src: UserId,
    dst: Option<UserId>,
    event: &'static str,
}

/// Runs gossip learning. As in the federated runner, failures after the
/// start are reported through the incomplete flag.
pub fn run_gossip(
    dataset: &InteractionDataset,
    kind: ModelKind,
    train_cfg: &TrainConfig,
    cfg: &GossipConfig,
    defense: &DefensePolicy,
    mut hook: Option<&mut dyn AdversaryHook>,
) -> Result<RunOutcome> {
    let n = dataset.n_users();
    cfg.validate(n)?;
    train_cfg.validate()?;
    defense.validate()?;
    dataset.validate()?;
    let share_less = defense.kind == DefenseKind::ShareLess;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[0x6055]));
    let mut net = GossipNetwork::new(n, cfg.p, cfg.refresh, &mut rng)?;

    // every node starts from the same initial model
    let init = init_model(n, dataset.n_items(), train_cfg, kind);
    let mut nodes: Vec<Node> = (0..n)
        .map(|u| Node {
            row: init.user_emb.row(u).to_vec(),
            items: init.item_emb.clone(),
            head: init.head.clone(),
            inbox: Vec::new(),
            perf: HashMap::new(),
        })
        .collect();
    drop(init);

    let mut trace = match &cfg.trace {
        Some(path) => Some(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?)),
        None => None,
    };
    let mut outcome = RunOutcome {
        model: None,
        utility: Vec::new(),
        rounds_completed: 0,
        incomplete: None,
        messages: 0,
    };
    let eval_seed = mix_seed(cfg.seed, &[0xE7A1]);
    let iterations = (cfg.rounds as u64) * n as u64;
    let mut wakes: Vec<u64> = vec![0; n];

    for t in 0..iterations {
        let round = (t / n as u64) as usize + 1;
        let u = rng.random_range(0..n);
        if net.refresh_due(u, t) {
            let view = match cfg.sampler {
                PeerSampler::Random => random_view(u, n, cfg.p, &mut rng),
                PeerSampler::Personalized => {
                    personalized_sample(u, n, &nodes[u].perf, cfg.exploration_ratio, cfg.p, &mut rng)
                }
            };
            net.set_view(u, view, t, &mut rng)?;
            if let Some(w) = trace.as_mut() {
                write_trace(w, &TraceEvent { t, src: u, dst: None, event: "refresh" }, &cfg.trace)?;
            }
        }

        // cast
        let dst = net.view(u)[rng.random_range(0..cfg.p)];
        let msg = nodes[u].message(share_less);
        outcome.messages += 1;
        if let Some(w) = trace.as_mut() {
            write_trace(w, &TraceEvent { t, src: u, dst: Some(dst), event: "cast" }, &cfg.trace)?;
        }
        if let Some(h) = hook.as_deref_mut() {
            if h.observes(Some(dst)) {
                if let Err(e) = h.observe(Some(dst), u, &msg, round) {
                    outcome.incomplete = Some(format!("adversary failed at iteration {t}: {e}"));
                    break;
                }
            }
        }
        if cfg.sampler == PeerSampler::Personalized {
            let s = perf_proxy(dataset, dst, &nodes[dst].row, &msg, kind, mix_seed(eval_seed, &[t, dst as u64]));
            nodes[dst].perf.insert(u, s);
        }
        nodes[dst].inbox.push(msg);

        // aggregate and train
        let node = &mut nodes[u];
        let inbox = std::mem::take(&mut node.inbox);
        if let Err(e) = aggregate_uniform(&mut node.items, node.head.as_mut(), &inbox) {
            outcome.incomplete = Some(format!("aggregation failed at iteration {t}: {e}"));
            break;
        }
        drop(inbox);
        if !dataset.train(u).is_empty() {
            wakes[u] += 1;
            let ucfg = train_cfg.reseeded(&[u as u64, wakes[u]]);
            let params = UserParams {
                user: u,
                user_row: &mut node.row,
                item_emb: &mut node.items,
                head: node.head.as_mut(),
            };
            if let Err(e) = train_user(params, dataset.train(u), &ucfg, kind, defense, None) {
                outcome.incomplete = Some(format!("local training failed at iteration {t}: {e}"));
                break;
            }
            let finite = node.row.iter().chain(node.items.as_slice()).chain(node.head.iter().flatten()).all(|v| v.is_finite());
            if !finite {
                outcome.incomplete = Some(format!("model of node {u} diverged at iteration {t}"));
                break;
            }
        }
        if cfg.check_invariants {
            net.check_invariants()?;
        }

        if (t + 1) % n as u64 == 0 {
            if let Some(h) = hook.as_deref_mut() {
                if let Err(e) = h.end_round(round) {
                    outcome.incomplete = Some(format!("adversary failed in round {round}: {e}"));
                    break;
                }
            }
            if round.is_multiple_of(cfg.eval_every) || round == cfg.rounds {
                let value = utility_by(dataset, kind, eval_seed, |v, i| {
                    let node = &nodes[v];
                    score_row(kind, &node.row, node.items.row(i), node.head.as_deref())
                });
                outcome.utility.push(UtilityPoint { round, value });
                log::info!("gossip round {round}: utility {value:.4}");
                if let Some(h) = hook.as_deref_mut() {
                    if let Err(e) = h.checkpoint(round) {
                        outcome.incomplete = Some(format!("adversary failed in round {round}: {e}"));
                        break;
                    }
                }
            }
            outcome.rounds_completed = round;
        }
    }
    if let Some(mut w) = trace {
        let path = cfg.trace.as_ref().expect("trace path");
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(outcome)
}

fn write_trace(w: &mut BufWriter<File>, ev: &TraceEvent, path: &Option<PathBuf>) -> Result<()> {
    let path = path.as_ref().expect("trace path");
    serde_json::to_writer(&mut *w, ev)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))
}
