use super::*;
use crate::defenses::{strip_private_params, PartialUpdate};
use crate::models::init_model;
use proptest::prelude::*;

fn full(user_rows: Vec<Vec<f64>>, items: Vec<Vec<f64>>, head: Option<Vec<f64>>) -> RecModel {
    let d = items[0].len();
    RecModel {
        user_emb: Matrix::from_vec(user_rows.len(), d, user_rows.concat()).unwrap(),
        item_emb: Matrix::from_vec(items.len(), d, items.concat()).unwrap(),
        head,
    }
}

fn scores(pairs: &[(UserId, f64)]) -> BTreeMap<UserId, f64> {
    pairs.iter().copied().collect()
}

/// Every size-`k` subset that satisfies the ranking condition.
fn brute_force_top_k(scores: &BTreeMap<UserId, f64>, k: usize) -> Vec<Vec<UserId>> {
    let ids: Vec<UserId> = scores.keys().copied().collect();
    let k = k.min(ids.len());
    let beats = |a: UserId, b: UserId| scores[&a] > scores[&b] || (scores[&a] == scores[&b] && a < b);
    let mut found = Vec::new();
    for mask in 0u32..(1 << ids.len()) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let inside: Vec<UserId> = (0..ids.len()).filter(|b| mask >> b & 1 == 1).map(|b| ids[b]).collect();
        let outside: Vec<UserId> = (0..ids.len()).filter(|b| mask >> b & 1 == 0).map(|b| ids[b]).collect();
        if inside.iter().all(|&c| outside.iter().all(|&o| beats(c, o))) {
            found.push(inside);
        }
    }
    found
}

#[test]
fn tie_goes_to_lower_id() {
    let s = scores(&[(0, 0.9), (1, 0.9), (2, 0.1)]);
    assert_eq!(predict_community(&s, 1), vec![0]);
    let s = scores(&[(4, 0.9), (2, 0.9), (7, 0.95)]);
    assert_eq!(predict_community(&s, 2), vec![7, 2]);
}

#[test]
fn fewer_observed_than_k_returns_all() {
    let s = scores(&[(3, 0.2), (1, 0.5)]);
    assert_eq!(predict_community(&s, 5), vec![1, 3]);
}

#[test]
fn gmf_zero_user_row_scores_one_half() {
    let m = full(vec![vec![0.0, 0.0]], vec![vec![1.0, 2.0], vec![-3.0, 0.5]], Some(vec![1.0, 1.0]));
    assert_eq!(relevance(&m, 0, &[0, 1], ModelKind::Gmf).unwrap(), 0.5);
}

#[test]
fn relevance_is_mean_of_item_scores() {
    let m = full(
        vec![vec![0.5, -1.0], vec![2.0, 0.25]],
        vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 1.0]],
        Some(vec![0.7, 1.3]),
    );
    for u in 0..2 {
        let direct: f64 = [0usize, 2]
            .iter()
            .map(|&i| {
                let z: f64 = (0..2).map(|k| [0.7, 1.3][k] * m.user_emb.row(u)[k] * m.item_emb.row(i)[k]).sum();
                1.0 / (1.0 + (-z).exp())
            })
            .sum::<f64>()
            / 2.0;
        assert!((relevance(&m, u, &[0, 2], ModelKind::Gmf).unwrap() - direct).abs() < 1e-12);
    }
    let single = relevance(&m, 1, &[1], ModelKind::Prme).unwrap();
    assert!((single - -(5.0f64.powi(2) + 0.25f64.powi(2))).abs() < 1e-12);
    assert!(relevance(&m, 2, &[0], ModelKind::Gmf).is_err());
}

#[test]
fn binary_entropy_values() {
    assert!((binary_entropy(0.5) - 1.0).abs() < 1e-12);
    assert_eq!(binary_entropy(1.0), 0.0);
    assert!(!mia_member(0.999, 0.0));
    assert!(mia_member(0.999, 0.2));
    // confident negatives are not members
    assert!(!mia_member(0.001, 0.2));
}

#[test]
fn momentum_first_observation_then_ema() {
    let mut st = AdversaryState::new(Projection::All { n_items: 2 }, 0.5, 1, []);
    let a = SharedModel::Full(full(vec![vec![2.0]], vec![vec![4.0], vec![8.0]], Some(vec![1.0])));
    let b = SharedModel::Full(full(vec![vec![0.0]], vec![vec![0.0], vec![0.0]], Some(vec![3.0])));
    st.observe(0, &a, 1).unwrap();
    assert_eq!(st.momentum[&0].items, vec![4.0, 8.0]);
    st.observe(0, &b, 2).unwrap();
    let m = &st.momentum[&0];
    assert_eq!(m.items, vec![2.0, 4.0]);
    assert_eq!(m.user_row.as_deref(), Some(&[1.0][..]));
    assert_eq!(m.head.as_deref(), Some(&[2.0][..]));
    assert_eq!(m.observations, 2);
}

#[test]
fn beta_zero_tracks_latest() {
    let mut st = AdversaryState::new(Projection::All { n_items: 1 }, 0.0, 1, []);
    for v in [1.0, 5.0, -2.0] {
        let m = SharedModel::Full(full(vec![vec![v]], vec![vec![v]], Some(vec![v])));
        st.observe(3, &m, 0).unwrap();
        assert_eq!(st.momentum[&3].items, vec![v]);
    }
}

#[test]
fn shape_mismatch_is_protocol_error() {
    let mut st = AdversaryState::new(Projection::All { n_items: 3 }, 0.9, 2, []);
    let m = SharedModel::Full(full(vec![vec![0.0, 0.0]], vec![vec![0.0, 0.0]], None));
    assert!(matches!(st.observe(0, &m, 0), Err(Error::Protocol(_))));
}

#[test]
fn projection_keeps_target_rows_only() {
    let mut st = AdversaryState::new(Projection::rows(vec![2, 0]), 0.9, 1, []);
    let m = SharedModel::Full(full(vec![vec![1.0]], vec![vec![10.0], vec![11.0], vec![12.0]], None));
    st.observe(5, &m, 0).unwrap();
    assert_eq!(st.momentum[&5].items, vec![10.0, 12.0]);
}

#[test]
fn colluders_count_multicasts() {
    let mut st = AdversaryState::new(Projection::All { n_items: 1 }, 0.9, 1, [1, 2, 3]);
    let m = SharedModel::Full(full(vec![vec![1.0]], vec![vec![1.0]], None));
    st.observe(7, &m, 0).unwrap();
    st.observe(8, &m, 0).unwrap();
    assert_eq!(st.multicasts, 4);
}

#[test]
fn fictive_user_zero_lr_is_init() {
    let items = Matrix::from_fn(6, 4, |r, c| (r + c) as f64 * 0.1);
    let cfg = TrainConfig {
        lr: 0.0,
        local_epochs: 5,
        dim: 4,
        ..TrainConfig::default()
    };
    let a = fit_fictive_user(&[1, 2], &items, Some(&[1.0; 4]), &cfg, ModelKind::Gmf).unwrap();
    let b = fit_fictive_user(&[1, 2], &items, Some(&[1.0; 4]), &TrainConfig { local_epochs: 1, ..cfg.clone() }, ModelKind::Gmf).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.abs() < 0.1));
}

#[test]
fn fictive_user_prefers_its_target() {
    // four orthogonal-ish items; only item 2 is liked
    let items = Matrix::from_vec(
        4,
        4,
        vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
    )
    .unwrap();
    let head = vec![1.0; 4];
    let cfg = TrainConfig {
        lr: 1.0,
        local_epochs: 300,
        dim: 4,
        ..TrainConfig::default()
    };
    for kind in [ModelKind::Gmf, ModelKind::Prme] {
        let e = fit_fictive_user(&[2], &items, Some(&head), &cfg, kind).unwrap();
        let s = |i: usize| score_row(kind, &e, items.row(i), Some(&head));
        for other in [0, 1, 3] {
            assert!(s(2) > s(other), "{kind}: {} vs {}", s(2), s(other));
        }
    }
}

#[test]
fn mia_counts_memorized_items() {
    // user 0 memorized items 0 and 1, user 1 nothing
    let mut st = AdversaryState::new(Projection::All { n_items: 3 }, 0.9, 1, []);
    let items = vec![vec![1.0], vec![1.0], vec![-1.0]];
    st.observe(0, &SharedModel::Full(full(vec![vec![50.0]], items.clone(), Some(vec![1.0]))), 0).unwrap();
    st.observe(1, &SharedModel::Full(full(vec![vec![0.0]], items, Some(vec![1.0]))), 0).unwrap();
    let t = TargetSpec::new(vec![0, 1], 1, 0.9, 2).unwrap();
    assert_eq!(mia_proxy(&st, &t, 0.5, ModelKind::Gmf).unwrap(), vec![0]);
    // rho = 0 flags nothing, so the tie-break order decides
    let t1 = TargetSpec { k: 2, ..t };
    assert_eq!(mia_proxy(&st, &t1, 0.0, ModelKind::Gmf).unwrap(), vec![0, 1]);
}

#[test]
fn target_spec_validation() {
    assert!(TargetSpec::new(vec![], 1, 0.5, 3).is_err());
    assert!(TargetSpec::new(vec![1], 0, 0.5, 3).is_err());
    assert!(TargetSpec::new(vec![1], 4, 0.5, 3).is_err());
    assert!(TargetSpec::new(vec![1], 1, 1.0, 3).is_err());
    assert_eq!(TargetSpec::new(vec![3, 1, 3], 1, 0.0, 3).unwrap().items, vec![1, 3]);
}

#[test]
fn adversary_config_parses_scalar_or_list_rho() {
    let a: AdversaryConfig = toml::from_str("K = 10\nrho = 0.6").unwrap();
    assert_eq!(a.k, 10);
    assert_eq!(a.rho, vec![0.6]);
    let b: AdversaryConfig = toml::from_str("rho = [0.2, 0.4]\ntarget = { user_trainset_of = 3 }").unwrap();
    assert_eq!(b.rho, vec![0.2, 0.4]);
    assert_eq!(b.target, Some(TargetSource::UserTrainsetOf(3)));
    assert!(toml::from_str::<AdversaryConfig>("bogus = 1").is_err());
}

fn toy_dataset() -> InteractionDataset {
    let sets = vec![vec![0, 1], vec![0, 1], vec![2, 3], vec![2, 3], vec![0, 2]];
    InteractionDataset::from_sets("toy", 4, sets, vec![vec![]; 5]).unwrap()
}

#[test]
fn server_harness_recovers_separable_community() {
    let ds = toy_dataset();
    let cfg = AdversaryConfig {
        target: Some(TargetSource::Items(vec![0, 1])),
        k: 2,
        beta: 0.5,
        ..AdversaryConfig::default()
    };
    let tc = TrainConfig { dim: 2, ..TrainConfig::default() };
    let mut h = CiaHarness::server(&ds, &cfg, ModelKind::Gmf, &tc).unwrap();
    assert!(h.observes(None) && !h.observes(Some(0)));
    // users 0 and 1 like items 0,1 (dimension 0); others like dimension 1
    let items = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
    for u in 0..5 {
        let mut rows = vec![vec![0.0, 0.0]; 5];
        rows[u] = if u < 2 { vec![3.0, 0.0] } else { vec![0.0, 3.0] };
        let m = SharedModel::Full(full(rows, items.clone(), Some(vec![1.0, 1.0])));
        h.observe(None, u, &m, 1).unwrap();
    }
    h.checkpoint(1).unwrap();
    let out = h.outcomes();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].cia.accuracies, vec![1.0]);
    assert_eq!(out[0].cia.upper_bounds, vec![1.0]);
    assert_eq!(out[0].final_prediction, vec![0, 1]);
}

#[test]
fn share_less_path_uses_fictive_row() {
    let ds = toy_dataset();
    let cfg = AdversaryConfig {
        target: Some(TargetSource::Items(vec![0, 1])),
        k: 2,
        beta: 0.5,
        fictive_epochs: 200,
        ..AdversaryConfig::default()
    };
    let tc = TrainConfig { dim: 2, lr: 1.0, ..TrainConfig::default() };
    let mut h = CiaHarness::server(&ds, &cfg, ModelKind::Gmf, &tc).unwrap();
    let base = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
    for u in 0..5 {
        // community members pushed the target items up in their local copy
        let mut items = base.clone();
        if u < 2 {
            items[0][0] += 0.5;
            items[1][0] += 0.5;
        }
        let m = full(vec![vec![0.0, 0.0]], items, Some(vec![1.0, 1.0]));
        let msg = SharedModel::Partial(strip_private_params(&m));
        assert!(msg.user_row(u).is_none());
        h.observe(None, u, &msg, 1).unwrap();
    }
    h.end_round(1).unwrap();
    h.checkpoint(1).unwrap();
    let out = h.outcomes();
    assert_eq!(out[0].final_prediction, vec![0, 1]);
    // no user rows were ever stored
    assert!(h.adversaries[0].state.momentum.values().all(|m| m.user_row.is_none()));
}

#[test]
fn gossip_harness_assigns_single_adversaries() {
    let ds = toy_dataset();
    let cfg = AdversaryConfig {
        k: 2,
        n_adversaries: Some(3),
        ..AdversaryConfig::default()
    };
    let h = CiaHarness::gossip(&ds, &cfg, ModelKind::Gmf, &TrainConfig::default()).unwrap();
    assert_eq!(h.adversaries.len(), 3);
    for a in &h.adversaries {
        assert_eq!(a.members.len(), 1);
        let owner = a.outcomes().next().unwrap().owner;
        assert_eq!(owner, Some(a.members[0]));
    }
    assert!(!h.observes(None));
}

#[test]
fn gossip_harness_forms_one_coalition() {
    let sets: Vec<Vec<ItemId>> = (0..20).map(|u| vec![u % 5, 5 + u % 3]).collect();
    let ds = InteractionDataset::from_sets("c", 8, sets, vec![vec![]; 20]).unwrap();
    let cfg = AdversaryConfig {
        k: 3,
        colluder_fraction: 0.2,
        ..AdversaryConfig::default()
    };
    let h = CiaHarness::gossip(&ds, &cfg, ModelKind::Gmf, &TrainConfig::default()).unwrap();
    assert_eq!(h.adversaries.len(), 1);
    let members = &h.adversaries[0].members;
    assert_eq!(members.len(), 4);
    for o in h.outcomes() {
        assert!(members.contains(&o.owner.unwrap()));
    }
    assert_eq!(h.member_nodes().len(), 4);
}

#[test]
fn aia_needs_a_server() {
    let cfg = AdversaryConfig {
        aia: Some(AiaConfig::default()),
        k: 1,
        ..AdversaryConfig::default()
    };
    assert!(CiaHarness::gossip(&toy_dataset(), &cfg, ModelKind::Gmf, &TrainConfig::default()).is_err());
}

#[test]
fn aia_runs_end_to_end_on_a_toy_server() {
    let ds = toy_dataset();
    let cfg = AdversaryConfig {
        kind: AttackKind::Aia,
        target: Some(TargetSource::Items(vec![0, 1])),
        k: 2,
        aia: Some(AiaConfig {
            n_in: 4,
            n_out: 4,
            epochs: 20,
            ..AiaConfig::default()
        }),
        ..AdversaryConfig::default()
    };
    let tc = TrainConfig { dim: 2, lr: 0.5, ..TrainConfig::default() };
    let mut h = CiaHarness::server(&ds, &cfg, ModelKind::Gmf, &tc).unwrap();
    let global = init_model(5, 4, &tc, ModelKind::Gmf);
    h.begin_round(1, Some(&SharedModel::Full(global.clone()))).unwrap();
    for u in 0..5 {
        let upd = crate::models::local_train(&global, u, ds.train(u), &tc.reseeded(&[u as u64]), ModelKind::Gmf, &crate::defenses::DefensePolicy::none()).unwrap();
        h.observe(None, u, &SharedModel::Full(upd.model), 1).unwrap();
    }
    h.checkpoint(1).unwrap();
    let out = h.outcomes();
    assert_eq!(out[0].aia.len(), 1);
    assert!((0.0..=1.0).contains(&out[0].aia[0]));
}

#[test]
fn partial_messages_never_expose_rows() {
    let m = init_model(3, 4, &TrainConfig::default(), ModelKind::Gmf);
    let p = SharedModel::Partial(PartialUpdate {
        item_emb: m.item_emb.clone(),
        head: m.head.clone(),
    });
    for u in 0..3 {
        assert!(p.user_row(u).is_none());
    }
}

proptest! {
    #[test]
    fn momentum_fixed_point(vals in prop::collection::vec(-5.0f64..5.0, 6), beta in 0.0f64..0.999, reps in 1usize..20) {
        let model = SharedModel::Full(full(vec![vals[0..2].to_vec()], vec![vals[2..4].to_vec()], Some(vals[4..6].to_vec())));
        let mut st = AdversaryState::new(Projection::All { n_items: 1 }, beta, 2, []);
        for _ in 0..reps {
            st.observe(0, &model, 0).unwrap();
        }
        let m = &st.momentum[&0];
        prop_assert_eq!(m.user_row.as_deref().unwrap(), &vals[0..2]);
        prop_assert_eq!(&m.items[..], &vals[2..4]);
        prop_assert_eq!(m.head.as_deref().unwrap(), &vals[4..6]);
    }

    #[test]
    fn argsort_invariance(raw in prop::collection::vec(-3i32..3, 1..12), k in 1usize..8, shift in -10.0f64..10.0, scale in 0.1f64..5.0) {
        let s: BTreeMap<UserId, f64> = raw.iter().enumerate().map(|(u, &v)| (u * 3, v as f64)).collect();
        let t: BTreeMap<UserId, f64> = s.iter().map(|(&u, &v)| (u, (v * scale + shift).exp())).collect();
        prop_assert_eq!(predict_community(&s, k), predict_community(&t, k));
    }

    #[test]
    fn predict_matches_brute_force(raw in prop::collection::vec(0i32..4, 1..=6), k in 1usize..=3) {
        let s: BTreeMap<UserId, f64> = raw.iter().enumerate().map(|(u, &v)| (u, v as f64 / 4.0)).collect();
        let got = predict_community(&s, k);
        let oracle = brute_force_top_k(&s, k);
        prop_assert_eq!(oracle.len(), 1);
        let mut sorted = got.clone();
        sorted.sort_unstable();
        prop_assert_eq!(&sorted, &oracle[0]);
        // returned in rank order
        for w in got.windows(2) {
            prop_assert!(s[&w[0]] > s[&w[1]] || (s[&w[0]] == s[&w[1]] && w[0] < w[1]));
        }
    }
}
