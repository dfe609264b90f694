//! Interaction ingestion, k-core filtering, and per-user train/validation/test splits.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprinter;

/// External keys for users and items, sorted so that dense indices do not
/// depend on file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub users: Arc<[String]>,
    pub items: Arc<[String]>,
}

impl Vocabulary {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn item_index(&self, key: &str) -> Option<usize> {
        self.items.binary_search_by(|k| k.as_str().cmp(key)).ok()
    }

    pub fn user_index(&self, key: &str) -> Option<usize> {
        self.users.binary_search_by(|k| k.as_str().cmp(key)).ok()
    }
}

/// Implicit-feedback interactions over a dense vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSet {
    vocab: Vocabulary,
    user_items: Vec<Vec<u32>>,
    item_users: Vec<Vec<u32>>,
}

impl InteractionSet {
    /// Build from dense index pairs. Duplicates collapse; neighbor lists are sorted.
    pub fn from_pairs(vocab: Vocabulary, pairs: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let mut user_items = vec![Vec::new(); vocab.n_users()];
        let mut item_users = vec![Vec::new(); vocab.n_items()];
        for (u, i) in pairs {
            user_items[u as usize].push(i);
            item_users[i as usize].push(u);
        }
        for list in user_items.iter_mut().chain(item_users.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }
        Self {
            vocab,
            user_items,
            item_users,
        }
    }

    /// Build from external keys, creating a sorted vocabulary.
    pub fn from_keys<'a>(records: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let records: Vec<_> = records.into_iter().collect();
        let users: BTreeSet<&str> = records.iter().map(|r| r.0).collect();
        let items: BTreeSet<&str> = records.iter().map(|r| r.1).collect();
        let vocab = Vocabulary {
            users: users.into_iter().map(String::from).collect(),
            items: items.into_iter().map(String::from).collect(),
        };
        let pairs: Vec<_> = records
            .iter()
            .map(|(u, i)| {
                (
                    vocab.user_index(u).unwrap() as u32,
                    vocab.item_index(i).unwrap() as u32,
                )
            })
            .collect();
        Self::from_pairs(vocab, pairs)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn n_users(&self) -> usize {
        self.vocab.n_users()
    }

    pub fn n_items(&self) -> usize {
        self.vocab.n_items()
    }

    pub fn len(&self) -> usize {
        self.user_items.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Items of user `u` (sorted).
    pub fn user_items(&self, u: usize) -> &[u32] {
        &self.user_items[u]
    }

    /// Users of item `i` (sorted).
    pub fn item_users(&self, i: usize) -> &[u32] {
        &self.item_users[i]
    }

    pub fn contains(&self, u: usize, i: u32) -> bool {
        self.user_items[u].binary_search(&i).is_ok()
    }

    /// All pairs in `(user, item)` order.
    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.user_items
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u as u32, i)))
    }

    pub fn user_degrees(&self) -> Vec<usize> {
        self.user_items.iter().map(Vec::len).collect()
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        self.item_users.iter().map(Vec::len).collect()
    }

    /// Content hash over vocabulary and pairs.
    pub fn fingerprint(&self) -> String {
        let mut fp = Fingerprinter::new("interactions");
        for u in self.vocab.users.iter() {
            fp.str(u);
        }
        fp.u64(u64::MAX);
        for i in self.vocab.items.iter() {
            fp.str(i);
        }
        for (u, i) in self.pairs() {
            fp.u64(u as u64).u64(i as u64);
        }
        fp.finish()
    }
}

fn detect_delimiter(line: &str) -> char {
    if line.contains('\t') {
        '\t'
    } else {
        ','
    }
}

/// Load `user,item[,rating,timestamp]` records (comma or tab delimited).
///
/// A first line whose second column reads `item` or `item_id` (any case) is
/// treated as a header. Ratings are ignored: every record is a positive.
pub fn load_interactions(path: &Path) -> Result<InteractionSet> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records: Vec<(String, String)> = Vec::new();
    let mut delimiter = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            continue;
        }
        let delim = *delimiter.get_or_insert_with(|| detect_delimiter(trimmed));
        let fields: Vec<&str> = trimmed.split(delim).map(str::trim).collect();
        let parse_err = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: message.to_string(),
        };
        if fields.len() < 2 || fields.len() > 4 {
            return Err(parse_err("expected user,item[,rating,timestamp]"));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_err("empty user or item key"));
        }
        if records.is_empty() && matches!(fields[1].to_ascii_lowercase().as_str(), "item" | "item_id") {
            continue;
        }
        for (name, value) in ["rating", "timestamp"].iter().zip(&fields[2..]) {
            if !value.is_empty() && value.parse::<f64>().is_err() {
                return Err(parse_err(&format!("{name} is not numeric: {value:?}")));
            }
        }
        records.push((fields[0].to_string(), fields[1].to_string()));
    }
    if records.is_empty() {
        return Err(Error::EmptyCorpus(path.to_path_buf()));
    }
    Ok(InteractionSet::from_keys(
        records.iter().map(|(u, i)| (u.as_str(), i.as_str())),
    ))
}

/// Statistics from a k-core peeling run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KcoreStats {
    pub rounds: usize,
    pub removed_users: usize,
    pub removed_items: usize,
    pub removed_pairs: usize,
}

/// Iteratively drop users and items with fewer than `k` interactions until a
/// fixpoint, then re-index densely (preserving key order).
pub fn apply_kcore(set: &InteractionSet, k: usize) -> Result<(InteractionSet, KcoreStats)> {
    if k == 0 {
        return Err(Error::Config("k-core threshold must be at least 1".into()));
    }
    let mut user_alive = vec![true; set.n_users()];
    let mut item_alive = vec![true; set.n_items()];
    let mut user_deg = set.user_degrees();
    let mut item_deg = set.item_degrees();
    let mut rounds = 0;
    loop {
        let mut changed = false;
        for u in 0..set.n_users() {
            if user_alive[u] && user_deg[u] < k {
                user_alive[u] = false;
                changed = true;
                for &i in set.user_items(u) {
                    if item_alive[i as usize] {
                        item_deg[i as usize] -= 1;
                    }
                }
            }
        }
        for i in 0..set.n_items() {
            if item_alive[i] && item_deg[i] < k {
                item_alive[i] = false;
                changed = true;
                for &u in set.item_users(i) {
                    if user_alive[u as usize] {
                        user_deg[u as usize] -= 1;
                    }
                }
            }
        }
        if !changed {
            break;
        }
        rounds += 1;
    }

    let removed_users = user_alive.iter().filter(|a| !**a).count();
    let removed_items = item_alive.iter().filter(|a| !**a).count();
    let kept: Vec<(&str, &str)> = set
        .pairs()
        .filter(|&(u, i)| user_alive[u as usize] && item_alive[i as usize])
        .map(|(u, i)| {
            (
                set.vocab.users[u as usize].as_str(),
                set.vocab.items[i as usize].as_str(),
            )
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyAfterFilter {
            k,
            rounds,
            removed_users,
            removed_items,
        });
    }
    let stats = KcoreStats {
        rounds,
        removed_users,
        removed_items,
        removed_pairs: set.len() - kept.len(),
    };
    Ok((InteractionSet::from_keys(kept), stats))
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config(format!("split ratios must be non-negative: {parts:?}")));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// `(train, valid, test)` counts for a user with `n` interactions: floors
    /// for validation and test, remainder to train, and at least one test item
    /// once `n >= 5`.
    pub fn allocate(&self, n: usize) -> (usize, usize, usize) {
        let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
        let mut test = floor(self.test).min(n);
        if test == 0 && n >= 5 {
            test = 1;
        }
        let valid = floor(self.valid).min(n - test);
        (n - test - valid, valid, test)
    }
}

/// Three disjoint views over one vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitBundle {
    pub train: InteractionSet,
    pub valid: InteractionSet,
    pub test: InteractionSet,
    pub seed: u64,
}

impl SplitBundle {
    pub fn vocab(&self) -> &Vocabulary {
        self.train.vocab()
    }

    pub fn fingerprint(&self) -> String {
        let mut fp = Fingerprinter::new("split");
        fp.str(&self.train.fingerprint())
            .str(&self.valid.fingerprint())
            .str(&self.test.fingerprint())
            .u64(self.seed);
        fp.finish()
    }

    /// Write `train.tsv`, `valid.tsv`, `test.tsv` and `split.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, view) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            let path = dir.join(format!("{name}.tsv"));
            let mut out = Vec::new();
            writeln!(out, "user\titem").unwrap();
            for (u, i) in view.pairs() {
                writeln!(out, "{}\t{}", self.vocab().users[u as usize], self.vocab().items[i as usize]).unwrap();
            }
            crate::io::write_atomic(&path, &out)?;
        }
        let header = SplitHeader {
            seed: self.seed,
            n_users: self.vocab().n_users(),
            n_items: self.vocab().n_items(),
            train: self.train.len(),
            valid: self.valid.len(),
            test: self.test.len(),
            fingerprint: self.fingerprint(),
        };
        crate::io::write_json(&dir.join("split.json"), &header)
    }

    /// Read a bundle written by [`SplitBundle::write`].
    pub fn read(dir: &Path) -> Result<Self> {
        let header: SplitHeader = crate::io::read_json(&dir.join("split.json"))?;
        let mut raw = Vec::new();
        for name in ["train", "valid", "test"] {
            let path = dir.join(format!("{name}.tsv"));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let pairs: Vec<(String, String)> = text
                .lines()
                .skip(1)
                .filter(|l| !l.is_empty())
                .map(|l| {
                    let (u, i) = l.split_once('\t').ok_or_else(|| Error::Parse {
                        path: path.clone(),
                        line: 0,
                        message: format!("bad split row {l:?}"),
                    })?;
                    Ok((u.to_string(), i.to_string()))
                })
                .collect::<Result<_>>()?;
            raw.push(pairs);
        }
        let all = InteractionSet::from_keys(raw.iter().flatten().map(|(u, i)| (u.as_str(), i.as_str())));
        let vocab = all.vocab().clone();
        let view = |pairs: &[(String, String)]| {
            InteractionSet::from_pairs(
                vocab.clone(),
                pairs.iter().map(|(u, i)| {
                    (
                        vocab.user_index(u).unwrap() as u32,
                        vocab.item_index(i).unwrap() as u32,
                    )
                }),
            )
        };
        let bundle = SplitBundle {
            train: view(&raw[0]),
            valid: view(&raw[1]),
            test: view(&raw[2]),
            seed: header.seed,
        };
        if bundle.fingerprint() != header.fingerprint {
            return Err(Error::format("split manifest", "fingerprint does not match split files"));
        }
        Ok(bundle)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitHeader {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub fingerprint: String,
}

/// Per-user random split. Each user's items are shuffled by a generator keyed
/// on `(seed, user index)`.
pub fn split(set: &InteractionSet, ratios: SplitRatios, seed: u64) -> Result<SplitBundle> {
    ratios.validate()?;
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for u in 0..set.n_users() {
        let mut items = set.user_items(u).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u as u64);
        items.shuffle(&mut rng);
        let (_, n_valid, n_test) = ratios.allocate(items.len());
        let u = u as u32;
        test.extend(items[..n_test].iter().map(|&i| (u, i)));
        valid.extend(items[n_test..n_test + n_valid].iter().map(|&i| (u, i)));
        train.extend(items[n_test + n_valid..].iter().map(|&i| (u, i)));
    }
    let vocab = set.vocab().clone();
    Ok(SplitBundle {
        train: InteractionSet::from_pairs(vocab.clone(), train),
        valid: InteractionSet::from_pairs(vocab.clone(), valid),
        test: InteractionSet::from_pairs(vocab, test),
        seed,
    })
}

/// Text and image reference for one item.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMetadata {
    pub title: String,
    pub brand: String,
    pub description: String,
    pub category: String,
    pub image: Option<String>,
}

impl ItemMetadata {
    pub fn has_image(&self) -> bool {
        self.image.is_some()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetadataCoverage {
    pub with_image: f64,
    pub with_title: f64,
    pub orphan_rows: usize,
    pub malformed_rows: usize,
}

/// Metadata aligned to an item vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct MetadataTable {
    pub rows: Vec<ItemMetadata>,
    pub coverage: MetadataCoverage,
}

impl MetadataTable {
    /// A table where every item has empty fields and no image.
    pub fn empty(n_items: usize) -> Self {
        let mut table = Self {
            rows: vec![ItemMetadata::default(); n_items],
            coverage: MetadataCoverage::default(),
        };
        table.refresh_coverage();
        table
    }

    fn refresh_coverage(&mut self) {
        let n = self.rows.len().max(1) as f64;
        self.coverage.with_image = self.rows.iter().filter(|r| r.has_image()).count() as f64 / n;
        self.coverage.with_title = self.rows.iter().filter(|r| !r.title.is_empty()).count() as f64 / n;
    }

    pub fn absent_images(&self) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| !self.rows[i].has_image()).collect()
    }
}

#[derive(Debug, Deserialize)]
struct RawMetadata {
    #[serde(alias = "asin", alias = "item_id")]
    item: String,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    brand: Option<String>,
    #[serde(default)]
    description: Option<String>,
    #[serde(default, alias = "categories")]
    category: Option<serde_json::Value>,
    #[serde(default, alias = "imUrl", alias = "image_url")]
    image: Option<String>,
}

fn flatten_category(value: &serde_json::Value, out: &mut Vec<String>) {
    match value {
        serde_json::Value::String(s) if !s.trim().is_empty() => out.push(s.trim().to_string()),
        serde_json::Value::Array(items) => items.iter().for_each(|v| flatten_category(v, out)),
        _ => {}
    }
}

/// Load one-JSON-object-per-line metadata aligned to the vocabulary of `set`.
///
/// Rows for unknown items are counted as orphans; unparseable rows are counted
/// and skipped. Neither is fatal.
pub fn load_metadata(path: &Path, set: &InteractionSet) -> Result<MetadataTable> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut table = MetadataTable::empty(set.n_items());
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawMetadata = match serde_json::from_str(&line) {
            Ok(raw) => raw,
            Err(err) => {
                log::warn!("{}:{}: skipping metadata row: {err}", path.display(), idx + 1);
                table.coverage.malformed_rows += 1;
                continue;
            }
        };
        let Some(index) = set.vocab().item_index(&raw.item) else {
            table.coverage.orphan_rows += 1;
            continue;
        };
        let mut categories = Vec::new();
        if let Some(value) = &raw.category {
            flatten_category(value, &mut categories);
        }
        categories.dedup();
        let clean = |s: Option<String>| s.map(|s| s.trim().to_string()).unwrap_or_default();
        table.rows[index] = ItemMetadata {
            title: clean(raw.title),
            brand: clean(raw.brand),
            description: clean(raw.description),
            category: categories.join(", "),
            image: raw.image.map(|s| s.trim().to_string()).filter(|s| !s.is_empty()),
        };
    }
    table.refresh_coverage();
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_temp(contents: &str) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        file.write_all(contents.as_bytes()).unwrap();
        file
    }

    #[test]
    fn load_counts_users_items_pairs() {
        let f = write_temp("a,X\na,Y\nb,X\n");
        let set = load_interactions(f.path()).unwrap();
        assert_eq!((set.n_users(), set.n_items(), set.len()), (2, 2, 3));
    }

    #[test]
    fn duplicate_records_collapse() {
        let f = write_temp("a\tX\t5\t100\na\tX\t3\t200\n");
        let set = load_interactions(f.path()).unwrap();
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn header_line_is_skipped() {
        let f = write_temp("user,item,rating\na,X,5\n");
        let set = load_interactions(f.path()).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(&*set.vocab().users, ["a".to_string()]);
    }

    #[test]
    fn malformed_line_is_named() {
        let mut text = String::new();
        for i in 0..10 {
            if i == 6 {
                text.push_str("justonefield\n");
            } else {
                text.push_str(&format!("u{i},i{i}\n"));
            }
        }
        let f = write_temp(&text);
        match load_interactions(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_temp("\n\n");
        assert!(matches!(load_interactions(f.path()), Err(Error::EmptyCorpus(_))));
    }

    #[test]
    fn star_graph_peels_to_empty() {
        let set = InteractionSet::from_keys((0..5).map(|i| ("u", ["a", "b", "c", "d", "e"][i])));
        match apply_kcore(&set, 2) {
            Err(Error::EmptyAfterFilter { removed_users, removed_items, .. }) => {
                assert_eq!((removed_users, removed_items), (1, 5));
            }
            other => panic!("expected empty-after-filter, got {other:?}"),
        }
    }

    fn complete(users: usize, items: usize) -> InteractionSet {
        let keys: Vec<(String, String)> = (0..users)
            .flat_map(|u| (0..items).map(move |i| (format!("u{u}"), format!("i{i}"))))
            .collect();
        InteractionSet::from_keys(keys.iter().map(|(u, i)| (u.as_str(), i.as_str())))
    }

    #[test]
    fn complete_bipartite_survives_five_core() {
        let set = complete(5, 5);
        let (out, stats) = apply_kcore(&set, 5).unwrap();
        assert_eq!(out, set);
        assert_eq!(stats.rounds, 0);
    }

    #[test]
    fn one_core_is_identity() {
        let set = InteractionSet::from_keys([("a", "X"), ("b", "Y"), ("b", "X")]);
        assert_eq!(apply_kcore(&set, 1).unwrap().0, set);
    }

    #[test]
    fn kcore_zero_rejected() {
        let set = complete(2, 2);
        assert!(matches!(apply_kcore(&set, 0), Err(Error::Config(_))));
    }

    #[test]
    fn allocation_rules() {
        let r = SplitRatios::default();
        assert_eq!(r.allocate(10), (8, 1, 1));
        assert_eq!(r.allocate(5), (4, 0, 1));
        assert_eq!(r.allocate(3), (3, 0, 0));
        assert_eq!(r.allocate(30), (24, 3, 3));
    }

    #[test]
    fn bad_ratios_rejected() {
        let set = complete(5, 5);
        let r = SplitRatios { train: 0.8, valid: 0.1, test: 0.2 };
        assert!(matches!(split(&set, r, 1), Err(Error::Config(_))));
    }

    #[test]
    fn split_round_trips_through_disk() {
        let set = complete(6, 12);
        let bundle = split(&set, SplitRatios::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bundle.write(dir.path()).unwrap();
        assert_eq!(SplitBundle::read(dir.path()).unwrap(), bundle);
    }

    #[test]
    fn metadata_alignment_and_coverage() {
        let set = InteractionSet::from_keys([("u", "A"), ("u", "B"), ("u", "C")]);
        let f = write_temp(concat!(
            "{\"item\":\"A\",\"title\":\"baby carrier\",\"image\":\"a.jpg\"}\n",
            "{\"asin\":\"B\",\"title\":\"stroller\",\"imUrl\":\"b.jpg\",\"categories\":[[\"Baby\",\"Gear\"]]}\n",
            "{\"item\":\"C\",\"title\":\"bib\"}\n",
            "{\"item\":\"Z\",\"title\":\"orphan\"}\n",
            "not json\n",
        ));
        let meta = load_metadata(f.path(), &set).unwrap();
        assert_eq!(meta.coverage.with_title, 1.0);
        assert_eq!(meta.absent_images(), vec![2]);
        assert_eq!(meta.coverage.orphan_rows, 1);
        assert_eq!(meta.coverage.malformed_rows, 1);
        assert_eq!(meta.rows[1].category, "Baby, Gear");
    }

    fn corpus_strategy() -> impl Strategy<Value = InteractionSet> {
        proptest::collection::vec((0u8..12, 0u8..15), 1..200).prop_map(|pairs| {
            let keys: Vec<(String, String)> =
                pairs.iter().map(|(u, i)| (format!("u{u}"), format!("i{i}"))).collect();
            InteractionSet::from_keys(keys.iter().map(|(u, i)| (u.as_str(), i.as_str())))
        })
    }

    proptest! {
        #[test]
        fn kcore_is_a_fixpoint(set in corpus_strategy(), k in 1usize..4) {
            if let Ok((once, _)) = apply_kcore(&set, k) {
                prop_assert!(once.user_degrees().iter().all(|&d| d >= k));
                prop_assert!(once.item_degrees().iter().all(|&d| d >= k));
                let (twice, stats) = apply_kcore(&once, k).unwrap();
                prop_assert_eq!(&twice, &once);
                prop_assert_eq!(stats.removed_pairs, 0);
            }
        }

        #[test]
        fn split_is_deterministic_and_partitions(set in corpus_strategy(), seed in any::<u64>()) {
            let a = split(&set, SplitRatios::default(), seed).unwrap();
            let b = split(&set, SplitRatios::default(), seed).unwrap();
            prop_assert_eq!(&a, &b);
            for u in 0..set.n_users() {
                let mut all: Vec<u32> = a.train.user_items(u).iter()
                    .chain(a.valid.user_items(u))
                    .chain(a.test.user_items(u))
                    .copied()
                    .collect();
                let total = all.len();
                all.sort_unstable();
                all.dedup();
                prop_assert_eq!(all.len(), total);
                prop_assert_eq!(all.as_slice(), set.user_items(u));
            }
        }

        #[test]
        fn vocabulary_is_dense(set in corpus_strategy()) {
            prop_assert!(set.pairs().all(|(u, i)| (u as usize) < set.n_users() && (i as usize) < set.n_items()));
            prop_assert!(set.user_degrees().iter().all(|&d| d > 0));
            prop_assert!(set.item_degrees().iter().all(|&d| d > 0));
        }
    }
}
