//! Interaction data: raw rating/check-in ingestion, binarization and the
//! per-user train/test split.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type UserId = usize;
pub type ItemId = usize;

/// On-disk layout of a raw interaction file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// MovieLens-100k `u.data`: `user item rating timestamp`, tab separated.
    Movielens100k,
    /// `user<TAB>item[<TAB>timestamp]`, further columns ignored.
    CheckinTsv,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens100k" | "ml100k" | "ml-100k" => Ok(DatasetFormat::Movielens100k),
            "checkin_tsv" | "checkin" => Ok(DatasetFormat::CheckinTsv),
            other => Err(Error::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetFormat::Movielens100k => f.write_str("movielens100k"),
            DatasetFormat::CheckinTsv => f.write_str("checkin_tsv"),
        }
    }
}

/// One line of a raw interaction file, keys kept verbatim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub user: String,
    pub item: String,
    pub timestamp: Option<i64>,
    pub value: Option<f64>,
}

pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Vec<RawRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_records(BufReader::new(file), format, path)
}

/// Parses records from any reader; `origin` only labels error messages.
pub fn parse_records<R: Read>(
    reader: BufReader<R>,
    format: DatasetFormat,
    origin: &Path,
) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno,
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        let record = match format {
            DatasetFormat::Movielens100k => {
                if cols.len() != 4 {
                    return Err(fail(format!("expected 4 tab-separated columns, found {}", cols.len())));
                }
                let value = cols[2]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| fail(format!("bad rating `{}`", cols[2])))?;
                let timestamp = cols[3]
                    .trim()
                    .parse::<i64>()
                    .map_err(|_| fail(format!("bad timestamp `{}`", cols[3])))?;
                RawRecord {
                    user: cols[0].trim().to_string(),
                    item: cols[1].trim().to_string(),
                    timestamp: Some(timestamp),
                    value: Some(value),
                }
            }
            DatasetFormat::CheckinTsv => {
                if cols.len() < 2 {
                    return Err(fail("expected at least user and item columns".into()));
                }
                RawRecord {
                    user: cols[0].trim().to_string(),
                    item: cols[1].trim().to_string(),
                    timestamp: cols.get(2).and_then(|c| c.trim().parse::<i64>().ok()),
                    value: None,
                }
            }
        };
        if record.user.is_empty() || record.item.is_empty() {
            return Err(fail("empty user or item key".into()));
        }
        out.push(record);
    }
    Ok(out)
}

/// Binary implicit-feedback dataset with dense ids and a per-user split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionDataset {
    pub name: String,
    user_keys: Vec<String>,
    item_keys: Vec<String>,
    train: Vec<Vec<ItemId>>,
    test: Vec<Vec<ItemId>>,
}

impl InteractionDataset {
    /// Builds a dataset from dense per-user item lists. Lists are sorted and
    /// deduplicated; invariants are checked.
    pub fn from_sets(
        name: impl Into<String>,
        n_items: usize,
        train: Vec<Vec<ItemId>>,
        test: Vec<Vec<ItemId>>,
    ) -> Result<Self> {
        if train.len() != test.len() {
            return Err(Error::Shape(format!(
                "{} train rows vs {} test rows",
                train.len(),
                test.len()
            )));
        }
        let norm = |mut v: Vec<ItemId>| {
            v.sort_unstable();
            v.dedup();
            v
        };
        let ds = InteractionDataset {
            name: name.into(),
            user_keys: (0..train.len()).map(|u| u.to_string()).collect(),
            item_keys: (0..n_items).map(|i| i.to_string()).collect(),
            train: train.into_iter().map(norm).collect(),
            test: test.into_iter().map(norm).collect(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n_items = self.n_items();
        for u in 0..self.n_users() {
            let (tr, te) = (&self.train[u], &self.test[u]);
            if tr.is_empty() {
                return Err(Error::Shape(format!("user {u} has no train items")));
            }
            if let Some(&bad) = tr.iter().chain(te).find(|&&i| i >= n_items) {
                return Err(Error::Index {
                    kind: "item",
                    id: bad,
                    len: n_items,
                });
            }
            if te.iter().any(|i| tr.binary_search(i).is_ok()) {
                return Err(Error::Shape(format!("user {u} has overlapping train/test items")));
            }
        }
        Ok(())
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn n_users(&self) -> usize {
        self.train.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_keys.len()
    }

    /// Sorted train items of `u`.
    pub fn train(&self, u: UserId) -> &[ItemId] {
        &self.train[u]
    }

    /// Sorted held-out items of `u`.
    pub fn test(&self, u: UserId) -> &[ItemId] {
        &self.test[u]
    }

    pub fn in_train(&self, u: UserId, i: ItemId) -> bool {
        self.train[u].binary_search(&i).is_ok()
    }

    pub fn interacted(&self, u: UserId, i: ItemId) -> bool {
        self.in_train(u, i) || self.test[u].binary_search(&i).is_ok()
    }

    pub fn user_key(&self, u: UserId) -> &str {
        &self.user_keys[u]
    }

    pub fn item_key(&self, i: ItemId) -> &str {
        &self.item_keys[i]
    }

    pub fn n_train_interactions(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }

    pub fn n_interactions(&self) -> usize {
        self.n_train_interactions() + self.test.iter().map(Vec::len).sum::<usize>()
    }
}

/// Orders keys numerically when both parse as integers, lexically otherwise.
fn key_order(a: &str, b: &str) -> Ordering {
    match (a.parse::<i128>(), b.parse::<i128>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

fn dense_ids<'a>(keys: impl Iterator<Item = &'a str>) -> (Vec<String>, HashMap<&'a str, usize>) {
    let mut uniq: Vec<&str> = keys.collect::<BTreeSet<_>>().into_iter().collect();
    uniq.sort_by(|a, b| key_order(a, b));
    let map = uniq.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    (uniq.into_iter().map(str::to_string).collect(), map)
}

/// Number of held-out items for a user with `n` interactions.
pub fn test_count(n: usize, test_fraction: f64) -> usize {
    if n <= 1 || test_fraction <= 0.0 {
        return 0;
    }
    // guard against 0.2 * 5 landing a hair above 1.0
    let raw = (test_fraction * n as f64 - 1e-9).ceil() as usize;
    raw.min(n - 1)
}

/// Remaps keys to dense ids, turns every observed interaction into a
/// positive and draws a seeded per-user test split.
pub fn binarize_and_split(
    records: &[RawRecord],
    test_fraction: f64,
    seed: u64,
) -> Result<InteractionDataset> {
    if records.is_empty() {
        return Err(Error::Config("cannot split an empty record list".into()));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test_fraction {test_fraction} outside [0, 1)")));
    }
    let (user_keys, user_ids) = dense_ids(records.iter().map(|r| r.user.as_str()));
    let (item_keys, item_ids) = dense_ids(records.iter().map(|r| r.item.as_str()));

    let mut per_user: Vec<BTreeSet<ItemId>> = vec![BTreeSet::new(); user_keys.len()];
    for r in records {
        per_user[user_ids[r.user.as_str()]].insert(item_ids[r.item.as_str()]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(per_user.len());
    let mut test = Vec::with_capacity(per_user.len());
    for (u, items) in per_user.into_iter().enumerate() {
        let mut items: Vec<ItemId> = items.into_iter().collect();
        let n_test = test_count(items.len(), test_fraction);
        if items.len() == 1 && test_fraction > 0.0 {
            log::warn!("user {} has a single interaction; kept in train", user_keys[u]);
        }
        items.shuffle(&mut rng);
        let mut te = items.split_off(items.len() - n_test);
        items.sort_unstable();
        te.sort_unstable();
        train.push(items);
        test.push(te);
    }

    let ds = InteractionDataset {
        name: String::new(),
        user_keys,
        item_keys,
        train,
        test,
    };
    ds.validate()?;
    Ok(ds)
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_split_seed() -> u64 {
    7
}

/// JSON/TOML description of where a dataset lives and how to split it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub format: DatasetFormat,
    pub path: PathBuf,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_split_seed")]
    pub seed: u64,
}

impl DatasetManifest {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Resolves a relative `path` against `root` (usually the data root).
    pub fn resolve(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(root) if self.path.is_relative() => root.join(&self.path),
            _ => self.path.clone(),
        }
    }

    pub fn load(&self, root: Option<&Path>) -> Result<InteractionDataset> {
        let path = self.resolve(root);
        if !path.exists() {
            return Err(Error::MissingDataset {
                name: self.name.clone(),
                path,
            });
        }
        let records = load_dataset(&path, self.format)?;
        Ok(binarize_and_split(&records, self.test_fraction, self.seed)?.with_name(&self.name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse(text: &str, format: DatasetFormat) -> Result<Vec<RawRecord>> {
        parse_records(BufReader::new(Cursor::new(text.to_string())), format, Path::new("mem"))
    }

    fn rec(u: &str, i: &str) -> RawRecord {
        RawRecord {
            user: u.into(),
            item: i.into(),
            timestamp: None,
            value: None,
        }
    }

    #[test]
    fn empty_input_gives_no_records() {
        assert!(parse("", DatasetFormat::Movielens100k).unwrap().is_empty());
        assert!(parse("", DatasetFormat::CheckinTsv).unwrap().is_empty());
    }

    #[test]
    fn three_line_tsv() {
        let recs = parse("a\tx\t10\nb\ty\nc\tz\t30\textra\n", DatasetFormat::CheckinTsv).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0], RawRecord { user: "a".into(), item: "x".into(), timestamp: Some(10), value: None });
        assert_eq!(recs[1].timestamp, None);
        assert_eq!((recs[2].user.as_str(), recs[2].item.as_str()), ("c", "z"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse("1\t2\t3\t4\n1\t2\t3\n", DatasetFormat::Movielens100k).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(parse("1\t2\tx\t4\n", DatasetFormat::Movielens100k), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn unknown_format_tag() {
        assert!(matches!("parquet".parse::<DatasetFormat>(), Err(Error::Config(_))));
        assert_eq!("ml100k".parse::<DatasetFormat>().unwrap(), DatasetFormat::Movielens100k);
    }

    #[test]
    fn two_users_five_items_split() {
        let recs: Vec<_> = ["u1", "u2"]
            .iter()
            .flat_map(|u| (0..5).map(move |i| rec(u, &format!("i{i}"))))
            .collect();
        let ds = binarize_and_split(&recs, 0.2, 3).unwrap();
        for u in 0..2 {
            assert_eq!(ds.test(u).len(), 1);
            assert_eq!(ds.train(u).len(), 4);
        }
    }

    #[test]
    fn zero_fraction_keeps_everything_in_train() {
        let recs = vec![rec("1", "1"), rec("1", "2"), rec("2", "1")];
        let ds = binarize_and_split(&recs, 0.0, 1).unwrap();
        assert_eq!(ds.n_train_interactions(), 3);
        assert!((0..ds.n_users()).all(|u| ds.test(u).is_empty()));
    }

    #[test]
    fn single_interaction_user_stays_in_train() {
        let recs = vec![rec("1", "1"), rec("2", "1"), rec("2", "2"), rec("2", "3")];
        let ds = binarize_and_split(&recs, 0.5, 1).unwrap();
        assert_eq!(ds.train(0), &[0]);
        assert!(ds.test(0).is_empty());
        assert_eq!(ds.test(1).len(), 2);
    }

    #[test]
    fn duplicates_collapse_and_keys_sort_numerically() {
        let recs = vec![rec("10", "5"), rec("10", "5"), rec("9", "40"), rec("9", "5")];
        let ds = binarize_and_split(&recs, 0.0, 0).unwrap();
        assert_eq!(ds.user_key(0), "9");
        assert_eq!(ds.item_key(0), "5");
        assert_eq!(ds.n_interactions(), 3);
    }

    #[test]
    fn empty_records_rejected() {
        assert!(binarize_and_split(&[], 0.2, 0).is_err());
        assert!(binarize_and_split(&[rec("a", "b")], 1.0, 0).is_err());
    }

    #[test]
    fn from_sets_checks_invariants() {
        assert!(InteractionDataset::from_sets("x", 3, vec![vec![0, 1]], vec![vec![1]]).is_err());
        assert!(InteractionDataset::from_sets("x", 3, vec![vec![0, 3]], vec![vec![]]).is_err());
        assert!(InteractionDataset::from_sets("x", 3, vec![vec![]], vec![vec![1]]).is_err());
        assert!(InteractionDataset::from_sets("x", 3, vec![vec![2, 0]], vec![vec![1]]).is_ok());
    }

    #[test]
    fn manifest_json_defaults() {
        let m: DatasetManifest =
            serde_json::from_str(r#"{"name":"ml","format":"movielens100k","path":"ml-100k/u.data"}"#).unwrap();
        assert_eq!(m.test_fraction, 0.2);
        assert_eq!(m.resolve(Some(Path::new("/d"))), PathBuf::from("/d/ml-100k/u.data"));
    }
}
