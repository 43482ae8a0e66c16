//! Dataset ingestion and example construction: load raw interaction files,
//! filter low-activity users/items to a fixed point, split each user's
//! timeline 8:1:1, window fixed-length histories and sample candidate sets.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{sample_distinct, substream};

/// Reserved dense item index for left-padding.
pub const PAD_ITEM: u32 = 0;
/// How the PAD sentinel is rendered in prompts and interface files.
pub const PAD_ITEM_TITLE: &str = "<pad_item>";

#[derive(Clone, Debug, PartialEq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub timestamp: i64,
    pub rating: Option<f64>,
}

/// Interactions sorted by (user, timestamp, input order) plus the raw-id
/// tables. Item index 0 is the PAD sentinel; real items start at 1.
#[derive(Clone, Debug)]
pub struct InteractionLog {
    pub interactions: Vec<Interaction>,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

impl InteractionLog {
    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    /// Number of real items (PAD excluded).
    pub fn n_items(&self) -> usize {
        self.item_ids.len() - 1
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Interaction indices grouped per user, preserving chronological order.
    pub fn per_user(&self) -> Vec<Vec<usize>> {
        let mut seqs: Vec<Vec<usize>> = vec![Vec::new(); self.n_users()];
        for (i, it) in self.interactions.iter().enumerate() {
            seqs[it.user as usize].push(i);
        }
        seqs
    }
}

/// Item index -> normalized title; row 0 is the PAD sentinel.
#[derive(Clone, Debug)]
pub struct ItemCatalog {
    pub titles: Vec<String>,
}

impl ItemCatalog {
    pub fn title(&self, item: u32) -> &str {
        &self.titles[item as usize]
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Valid => write!(f, "valid"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split tag `{other}`"))),
        }
    }
}

/// Fixed-length next-item example. `history` is exactly `l_hist` long,
/// oldest to newest, left-padded with PAD.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqExample {
    pub id: String,
    pub user: u32,
    pub history: Vec<u32>,
    pub target: u32,
    pub split: Split,
}

impl SeqExample {
    /// Real (non-PAD) history items, oldest to newest.
    pub fn real_history(&self) -> &[u32] {
        let start = self
            .history
            .iter()
            .position(|&i| i != PAD_ITEM)
            .unwrap_or(self.history.len());
        &self.history[start..]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub items: Vec<u32>,
    pub target_index: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Tsv,
    Csv,
    Movielens100k,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub sparsity: f64,
}

pub fn stats(log: &InteractionLog) -> DatasetStats {
    let n_users = log.n_users();
    let n_items = log.n_items();
    let n = log.len();
    let cells = (n_users as f64) * (n_items as f64);
    let sparsity = if cells > 0.0 { 1.0 - n as f64 / cells } else { 0.0 };
    DatasetStats {
        n_users,
        n_items,
        n_interactions: n,
        sparsity,
    }
}

struct RawRow {
    user: String,
    item: String,
    timestamp: i64,
    rating: Option<f64>,
}

/// Load interactions plus the item-title catalog.
///
/// * `Tsv`/`Csv`: columns `user, item, timestamp[, rating]`, optional header.
///   Titles come from `titles_path` or the default sidecar `<path>.titles`
///   (tab-separated `item_id <TAB> title`).
/// * `Movielens100k`: `path` is the dataset directory or its `u.data` file;
///   titles are read from the sibling `u.item` (pipe-separated, latin-1).
pub fn load_interactions(
    path: &Path,
    format: DataFormat,
    titles_path: Option<&Path>,
) -> Result<(InteractionLog, ItemCatalog)> {
    let (rows, titles_by_raw) = match format {
        DataFormat::Tsv => {
            let rows = parse_delimited(path, '\t', ColumnOrder::UserItemTimeRating)?;
            let tpath = titles_path
                .map(PathBuf::from)
                .unwrap_or_else(|| default_sidecar(path));
            (rows, parse_title_sidecar(&tpath)?)
        }
        DataFormat::Csv => {
            let rows = parse_delimited(path, ',', ColumnOrder::UserItemTimeRating)?;
            let tpath = titles_path
                .map(PathBuf::from)
                .unwrap_or_else(|| default_sidecar(path));
            (rows, parse_title_sidecar(&tpath)?)
        }
        DataFormat::Movielens100k => {
            let (data_path, item_path) = ml100k_paths(path, titles_path)?;
            let rows = parse_delimited(&data_path, '\t', ColumnOrder::UserItemRatingTime)?;
            (rows, parse_ml100k_items(&item_path)?)
        }
    };

    if rows.is_empty() {
        return Err(Error::Ingest("no interactions".to_string()));
    }
    build_log(rows, titles_by_raw)
}

fn default_sidecar(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".titles");
    PathBuf::from(os)
}

fn ml100k_paths(path: &Path, titles_path: Option<&Path>) -> Result<(PathBuf, PathBuf)> {
    let data_path = if path.is_dir() {
        path.join("u.data")
    } else {
        path.to_path_buf()
    };
    let item_path = match titles_path {
        Some(p) => p.to_path_buf(),
        None => data_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("u.item"),
    };
    Ok((data_path, item_path))
}

enum ColumnOrder {
    UserItemTimeRating,
    UserItemRatingTime,
}

fn parse_delimited(path: &Path, sep: char, order: ColumnOrder) -> Result<Vec<RawRow>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Ingest(format!("cannot read {}: {e}", path.display())))?;
    let pstr = path.display().to_string();
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(sep).map(str::trim).collect();
        if fields.len() < 3 {
            return Err(Error::parse(
                &pstr,
                lineno + 1,
                format!("expected at least 3 columns, got {}", fields.len()),
            ));
        }
        let third_numeric = fields[2].parse::<f64>().is_ok();
        if lineno == 0 && !third_numeric {
            // Header row.
            continue;
        }
        let (ts_field, rating_field) = match order {
            ColumnOrder::UserItemTimeRating => (fields[2], fields.get(3).copied()),
            ColumnOrder::UserItemRatingTime => {
                let ts = fields.get(3).copied().ok_or_else(|| {
                    Error::parse(&pstr, lineno + 1, "expected 4 columns (user item rating timestamp)")
                })?;
                (ts, Some(fields[2]))
            }
        };
        let timestamp: i64 = ts_field.parse().map_err(|_| {
            Error::parse(&pstr, lineno + 1, format!("bad timestamp `{ts_field}`"))
        })?;
        if timestamp < 0 {
            return Err(Error::parse(&pstr, lineno + 1, "negative timestamp"));
        }
        let rating = match rating_field {
            Some(r) if !r.is_empty() => Some(r.parse::<f64>().map_err(|_| {
                Error::parse(&pstr, lineno + 1, format!("bad rating `{r}`"))
            })?),
            _ => None,
        };
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::parse(&pstr, lineno + 1, "empty user or item id"));
        }
        rows.push(RawRow {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            timestamp,
            rating,
        });
    }
    Ok(rows)
}

fn parse_title_sidecar(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Ingest(format!("cannot read title sidecar {}: {e}", path.display()))
    })?;
    let pstr = path.display().to_string();
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (id, title) = line.split_once('\t').ok_or_else(|| {
            Error::parse(&pstr, lineno + 1, "expected `item_id<TAB>title`")
        })?;
        map.insert(id.trim().to_string(), title.to_string());
    }
    Ok(map)
}

/// `u.item` is pipe-separated latin-1: `id|title|release|...`.
fn parse_ml100k_items(path: &Path) -> Result<HashMap<String, String>> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Ingest(format!("cannot read item file {}: {e}", path.display()))
    })?;
    // latin-1 bytes map 1:1 onto the first 256 Unicode code points.
    let text: String = bytes.iter().map(|&b| b as char).collect();
    let pstr = path.display().to_string();
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '|');
        let id = parts
            .next()
            .ok_or_else(|| Error::parse(&pstr, lineno + 1, "missing item id"))?;
        let title = parts
            .next()
            .ok_or_else(|| Error::parse(&pstr, lineno + 1, "missing title"))?;
        map.insert(id.trim().to_string(), title.to_string());
    }
    Ok(map)
}

fn normalize_title(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn build_log(
    rows: Vec<RawRow>,
    titles_by_raw: HashMap<String, String>,
) -> Result<(InteractionLog, ItemCatalog)> {
    let mut user_index: HashMap<String, u32> = HashMap::new();
    let mut item_index: HashMap<String, u32> = HashMap::new();
    let mut user_ids: Vec<String> = Vec::new();
    let mut item_ids: Vec<String> = vec![PAD_ITEM_TITLE.to_string()];
    let mut titles: Vec<String> = vec![PAD_ITEM_TITLE.to_string()];

    let mut interactions = Vec::with_capacity(rows.len());
    for row in rows {
        let user = *user_index.entry(row.user.clone()).or_insert_with(|| {
            user_ids.push(row.user.clone());
            (user_ids.len() - 1) as u32
        });
        let item = match item_index.get(&row.item) {
            Some(&i) => i,
            None => {
                let title = titles_by_raw
                    .get(&row.item)
                    .map(|t| normalize_title(t))
                    .ok_or_else(|| {
                        Error::Ingest(format!("missing title for item `{}`", row.item))
                    })?;
                if title.is_empty() {
                    return Err(Error::Ingest(format!(
                        "empty title for item `{}`",
                        row.item
                    )));
                }
                item_ids.push(row.item.clone());
                titles.push(title);
                let idx = (item_ids.len() - 1) as u32;
                item_index.insert(row.item.clone(), idx);
                idx
            }
        };
        interactions.push(Interaction {
            user,
            item,
            timestamp: row.timestamp,
            rating: row.rating,
        });
    }

    // Drop duplicate (user, item, timestamp) triples, keeping first occurrence.
    let mut seen: HashMap<(u32, u32, i64), ()> = HashMap::new();
    interactions.retain(|it| seen.insert((it.user, it.item, it.timestamp), ()).is_none());

    // Stable sort: ties keep input order.
    interactions.sort_by_key(|it| (it.user, it.timestamp));

    Ok((
        InteractionLog {
            interactions,
            user_ids,
            item_ids,
        },
        ItemCatalog { titles },
    ))
}

/// Iteratively remove users and items with fewer than `threshold`
/// interactions until both constraints hold simultaneously. Dense indices
/// are preserved; use [`compact`] afterwards to re-densify.
pub fn filter_min_interactions(log: &InteractionLog, threshold: usize) -> Result<InteractionLog> {
    assert!(threshold >= 1, "threshold must be >= 1");
    let mut kept: Vec<Interaction> = log.interactions.clone();
    loop {
        let mut user_counts: HashMap<u32, usize> = HashMap::new();
        let mut item_counts: HashMap<u32, usize> = HashMap::new();
        for it in &kept {
            *user_counts.entry(it.user).or_default() += 1;
            *item_counts.entry(it.item).or_default() += 1;
        }
        let before = kept.len();
        kept.retain(|it| {
            user_counts[&it.user] >= threshold && item_counts[&it.item] >= threshold
        });
        if kept.len() == before {
            break;
        }
    }
    if kept.is_empty() {
        return Err(Error::Data("dataset exhausted by filtering".to_string()));
    }
    Ok(InteractionLog {
        interactions: kept,
        user_ids: log.user_ids.clone(),
        item_ids: log.item_ids.clone(),
    })
}

/// Re-densify user/item indices after filtering so downstream models see a
/// contiguous item universe. PAD stays at index 0.
pub fn compact(log: &InteractionLog, catalog: &ItemCatalog) -> (InteractionLog, ItemCatalog) {
    let mut user_map: HashMap<u32, u32> = HashMap::new();
    let mut item_map: HashMap<u32, u32> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = vec![PAD_ITEM_TITLE.to_string()];
    let mut titles = vec![PAD_ITEM_TITLE.to_string()];

    let mut users_present: Vec<u32> = log.interactions.iter().map(|it| it.user).collect();
    users_present.sort_unstable();
    users_present.dedup();
    for u in users_present {
        user_map.insert(u, user_ids.len() as u32);
        user_ids.push(log.user_ids[u as usize].clone());
    }
    let mut items_present: Vec<u32> = log.interactions.iter().map(|it| it.item).collect();
    items_present.sort_unstable();
    items_present.dedup();
    for i in items_present {
        item_map.insert(i, item_ids.len() as u32);
        item_ids.push(log.item_ids[i as usize].clone());
        titles.push(catalog.titles[i as usize].clone());
    }

    let interactions = log
        .interactions
        .iter()
        .map(|it| Interaction {
            user: user_map[&it.user],
            item: item_map[&it.item],
            timestamp: it.timestamp,
            rating: it.rating,
        })
        .collect();

    (
        InteractionLog {
            interactions,
            user_ids,
            item_ids,
        },
        ItemCatalog { titles },
    )
}

/// Floor of `ratio * n` where `ratio` is meant as an exact decimal (0.8,
/// 0.1, ...). A small epsilon absorbs binary representation error so that
/// e.g. 0.8 * 5 floors to 4, never 3.
fn ratio_floor(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

/// Per-user chronological split; returns one tag per interaction, parallel
/// to `log.interactions`.
pub fn chronological_split(log: &InteractionLog, ratios: (f64, f64, f64)) -> Result<Vec<Split>> {
    let (r0, r1, r2) = ratios;
    if r0 <= 0.0 || r1 <= 0.0 || r2 <= 0.0 {
        return Err(Error::Data("split ratios must be positive".to_string()));
    }
    if (r0 + r1 + r2 - 1.0).abs() > 1e-9 {
        return Err(Error::Data("split ratios must sum to 1".to_string()));
    }
    let mut tags = vec![Split::Train; log.len()];
    for (user, idxs) in log.per_user().iter().enumerate() {
        if idxs.is_empty() {
            continue;
        }
        let n = idxs.len();
        let n_train = ratio_floor(r0, n);
        let n_train_valid = ratio_floor(r0 + r1, n);
        if n_train == 0 {
            return Err(Error::Data(format!(
                "user `{}` has too few interactions for a non-empty train segment",
                log.user_ids[user]
            )));
        }
        for (pos, &i) in idxs.iter().enumerate() {
            tags[i] = if pos < n_train {
                Split::Train
            } else if pos < n_train_valid {
                Split::Valid
            } else {
                Split::Test
            };
        }
    }
    Ok(tags)
}

/// One example per (user, target position >= 1). The target carries the
/// split tag of its own interaction; history context may reach backwards
/// across split boundaries but never forwards.
pub fn window_examples(log: &InteractionLog, tags: &[Split], l_hist: usize) -> Vec<SeqExample> {
    assert_eq!(tags.len(), log.len());
    assert!(l_hist >= 1);
    let mut out = Vec::new();
    for (user, idxs) in log.per_user().iter().enumerate() {
        let seq: Vec<u32> = idxs.iter().map(|&i| log.interactions[i].item).collect();
        for pos in 1..seq.len() {
            let start = pos.saturating_sub(l_hist);
            let mut history = vec![PAD_ITEM; l_hist - (pos - start)];
            history.extend_from_slice(&seq[start..pos]);
            out.push(SeqExample {
                id: format!("u{user}:t{pos}"),
                user: user as u32,
                history,
                target: seq[pos],
                split: tags[idxs[pos]],
            });
        }
    }
    out
}

/// Sample a candidate set around an arbitrary target: `m` distinct items,
/// exactly one equal to `target`, negatives drawn uniformly without
/// replacement from real items not in `exclude` and != target, positions
/// shuffled. Deterministic in `(seed, label)`.
pub fn sample_candidates_around(
    target: u32,
    exclude: &[u32],
    n_items: usize,
    m: usize,
    seed: u64,
    label: &str,
) -> Result<CandidateSet> {
    if n_items < m {
        return Err(Error::Data(format!(
            "item universe ({n_items}) smaller than candidate count ({m})"
        )));
    }
    let mut excluded = vec![false; n_items + 1];
    excluded[PAD_ITEM as usize] = true;
    for &e in exclude {
        excluded[e as usize] = true;
    }
    excluded[target as usize] = true;
    let pool: Vec<u32> = (1..=n_items as u32).filter(|&i| !excluded[i as usize]).collect();
    if pool.len() < m - 1 {
        return Err(Error::Data(format!(
            "item universe too small after exclusions: need {} negatives, have {}",
            m - 1,
            pool.len()
        )));
    }
    let mut rng = substream(seed, label);
    let mut items = vec![target];
    items.extend(sample_distinct(&pool, m - 1, &mut rng));
    // Shuffle with the same substream so order is pinned by (seed, label).
    use rand::seq::SliceRandom;
    items.shuffle(&mut rng);
    let target_index = items.iter().position(|&i| i == target).expect("target present");
    Ok(CandidateSet {
        items,
        target_index,
    })
}

/// Candidate set for a windowed example: negatives avoid the target and the
/// unpadded history. Keyed by `(seed, example id)`.
pub fn sample_candidates(
    example: &SeqExample,
    n_items: usize,
    m: usize,
    seed: u64,
) -> Result<CandidateSet> {
    sample_candidates_around(
        example.target,
        example.real_history(),
        n_items,
        m,
        seed,
        &format!("cand:{}", example.id),
    )
}

/// Canonical example file: `user_id \t h1,...,hL \t target \t split`, raw
/// external ids, PAD rendered as `<pad_item>`, one record per line in
/// example order.
pub fn write_examples(examples: &[SeqExample], log: &InteractionLog, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let hist: Vec<&str> = ex
            .history
            .iter()
            .map(|&i| log.item_ids[i as usize].as_str())
            .collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            log.user_ids[ex.user as usize],
            hist.join(","),
            log.item_ids[ex.target as usize],
            ex.split
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Candidate file: `example_id \t c1,...,cm \t target_index`.
pub fn write_candidates(
    entries: &[(String, CandidateSet)],
    log: &InteractionLog,
    path: &Path,
) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for (id, cs) in entries {
        let items: Vec<&str> = cs
            .items
            .iter()
            .map(|&i| log.item_ids[i as usize].as_str())
            .collect();
        writeln!(w, "{}\t{}\t{}", id, items.join(","), cs.target_index)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, content: &str) -> PathBuf {
        let p = dir.path().join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        p
    }

    fn toy_log(rows: &[(&str, &str, i64)]) -> (InteractionLog, ItemCatalog) {
        let raw: Vec<RawRow> = rows
            .iter()
            .map(|(u, i, t)| RawRow {
                user: u.to_string(),
                item: i.to_string(),
                timestamp: *t,
                rating: None,
            })
            .collect();
        let titles: HashMap<String, String> = rows
            .iter()
            .map(|(_, i, _)| (i.to_string(), format!("title {i}")))
            .collect();
        build_log(raw, titles).unwrap()
    }

    #[test]
    fn single_row_tsv_loads() {
        let dir = tempfile::tempdir().unwrap();
        let data = write_tmp(&dir, "x.tsv", "u1\ti1\t5\n");
        write_tmp(&dir, "x.tsv.titles", "i1\tFirst Item\n");
        let (log, cat) = load_interactions(&data, DataFormat::Tsv, None).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log.n_users(), 1);
        assert_eq!(log.n_items(), 1);
        assert_eq!(cat.title(1), "First Item");
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let data = write_tmp(&dir, "x.tsv", "");
        write_tmp(&dir, "x.tsv.titles", "");
        let err = load_interactions(&data, DataFormat::Tsv, None).unwrap_err();
        assert!(err.to_string().contains("no interactions"), "{err}");
    }

    #[test]
    fn missing_title_names_the_item() {
        let dir = tempfile::tempdir().unwrap();
        let data = write_tmp(&dir, "x.tsv", "u1\tmystery\t5\n");
        write_tmp(&dir, "x.tsv.titles", "other\tSome Title\n");
        let err = load_interactions(&data, DataFormat::Tsv, None).unwrap_err();
        assert!(err.to_string().contains("mystery"), "{err}");
    }

    #[test]
    fn bad_row_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let data = write_tmp(&dir, "x.tsv", "u1\ti1\t5\nu2\ti1\tnot_a_ts\n");
        write_tmp(&dir, "x.tsv.titles", "i1\tT\n");
        let err = load_interactions(&data, DataFormat::Tsv, None).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn duplicates_dropped_and_sorted() {
        let (log, _) = toy_log(&[
            ("u2", "a", 9),
            ("u1", "a", 5),
            ("u1", "b", 3),
            ("u1", "a", 5), // exact duplicate
        ]);
        assert_eq!(log.len(), 3);
        // Users are interned in first-seen order (u2 -> 0, u1 -> 1); within
        // each user, interactions are sorted by timestamp.
        let keys: Vec<(u32, i64)> = log
            .interactions
            .iter()
            .map(|i| (i.user, i.timestamp))
            .collect();
        assert_eq!(keys, vec![(0, 9), (1, 3), (1, 5)]);
    }

    #[test]
    fn ml100k_fixture_parses_native_format() {
        let dir = tempfile::tempdir().unwrap();
        // u.data: user \t item \t rating \t timestamp
        let data = write_tmp(&dir, "u.data", "1\t10\t4\t100\n2\t10\t5\t90\n1\t20\t3\t120\n");
        write_tmp(
            &dir,
            "u.item",
            "10|Alien (1979)|01-Jan-1979||http://x\n20|Brazil (1985)|x||y\n",
        );
        let (log, cat) =
            load_interactions(&data, DataFormat::Movielens100k, None).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log.n_items(), 2);
        assert_eq!(cat.title(1), "Alien (1979)");
        assert_eq!(log.interactions[0].rating, Some(4.0));
    }

    /// Independent fixed-point oracle: repeatedly remove *all* violating
    /// users and items simultaneously until nothing changes.
    fn filter_oracle(log: &InteractionLog, threshold: usize) -> Vec<Interaction> {
        let mut kept = log.interactions.clone();
        loop {
            let mut uc: HashMap<u32, usize> = HashMap::new();
            let mut ic: HashMap<u32, usize> = HashMap::new();
            for it in &kept {
                *uc.entry(it.user).or_default() += 1;
                *ic.entry(it.item).or_default() += 1;
            }
            let bad_users: Vec<u32> =
                uc.iter().filter(|(_, &c)| c < threshold).map(|(&u, _)| u).collect();
            let bad_items: Vec<u32> =
                ic.iter().filter(|(_, &c)| c < threshold).map(|(&i, _)| i).collect();
            if bad_users.is_empty() && bad_items.is_empty() {
                break;
            }
            kept.retain(|it| !bad_users.contains(&it.user) && !bad_items.contains(&it.item));
        }
        kept
    }

    #[test]
    fn filter_cascade_matches_fixed_point_oracle() {
        // Ten users; item "x" is held almost exclusively by user u0, and u0
        // is at exactly the threshold only while "x" survives.
        let mut rows: Vec<(String, String, i64)> = Vec::new();
        for k in 0..4 {
            rows.push(("u0".into(), "x".into(), k));
        }
        rows.push(("u0".into(), "a".into(), 10));
        for u in 1..10 {
            for k in 0..6 {
                rows.push((format!("u{u}"), format!("i{}", k % 3), 100 + k));
            }
        }
        let rows_ref: Vec<(&str, &str, i64)> =
            rows.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)).collect();
        let (log, _) = toy_log(&rows_ref);
        let filtered = filter_min_interactions(&log, 5).unwrap();
        let oracle = filter_oracle(&log, 5);
        assert_eq!(filtered.interactions, oracle);
        // u0 must be gone: "x" has only 4 interactions, dropping it puts u0
        // below the threshold.
        assert!(filtered.interactions.iter().all(|it| it.user != 0));
    }

    #[test]
    fn filter_user_below_threshold_removed() {
        let mut rows = vec![("small", "i0", 0), ("small", "i1", 1), ("small", "i2", 2), ("small", "i0", 3)];
        for u in 0..6 {
            for k in 0..6 {
                rows.push((["a", "b", "c", "d", "e", "f"][u], ["i0", "i1", "i2"][k % 3], 10 + k as i64));
            }
        }
        let (log, _) = toy_log(&rows);
        let filtered = filter_min_interactions(&log, 5).unwrap();
        let small_idx = log.user_ids.iter().position(|u| u == "small").unwrap() as u32;
        assert!(filtered.interactions.iter().all(|it| it.user != small_idx));
    }

    #[test]
    fn filter_identity_when_all_above_threshold() {
        // 5x5 grid: every user and every item has exactly 5 interactions.
        let mut rows = Vec::new();
        for u in 0..5 {
            for k in 0..5 {
                rows.push((
                    ["a", "b", "c", "d", "e"][u],
                    ["x", "y", "z", "w", "v"][k],
                    k as i64,
                ));
            }
        }
        let (log, _) = toy_log(&rows);
        let filtered = filter_min_interactions(&log, 5).unwrap();
        assert_eq!(filtered.interactions, log.interactions);
    }

    #[test]
    fn filter_exhaustion_is_an_error() {
        let (log, _) = toy_log(&[("u1", "a", 0), ("u1", "b", 1)]);
        assert!(filter_min_interactions(&log, 5).is_err());
    }

    fn user_log(n: usize) -> InteractionLog {
        let rows: Vec<(String, String, i64)> = (0..n)
            .map(|k| ("u".to_string(), format!("i{k}"), k as i64))
            .collect();
        let rows_ref: Vec<(&str, &str, i64)> =
            rows.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)).collect();
        toy_log(&rows_ref).0
    }

    #[test]
    fn split_boundaries_match_floor_rule_for_lengths_3_to_20() {
        for n in 3..=20usize {
            let log = user_log(n);
            let tags = chronological_split(&log, (0.8, 0.1, 0.1)).unwrap();
            let train = tags.iter().filter(|&&t| t == Split::Train).count();
            let valid = tags.iter().filter(|&&t| t == Split::Valid).count();
            let test = tags.iter().filter(|&&t| t == Split::Test).count();
            // Exact-rational floor rule, computed independently in integers:
            // floor(0.8n) = 8n/10, floor(0.9n) = 9n/10.
            let want_train = 8 * n / 10;
            let want_valid = 9 * n / 10 - 8 * n / 10;
            assert_eq!((train, valid, test), (want_train, want_valid, n - 9 * n / 10),
                "n={n}");
        }
    }

    #[test]
    fn split_examples_from_spec() {
        for (n, want) in [(10usize, (8, 1, 1)), (9, (7, 1, 1)), (100, (80, 10, 10))] {
            let log = user_log(n);
            let tags = chronological_split(&log, (0.8, 0.1, 0.1)).unwrap();
            let train = tags.iter().filter(|&&t| t == Split::Train).count();
            let valid = tags.iter().filter(|&&t| t == Split::Valid).count();
            let test = tags.iter().filter(|&&t| t == Split::Test).count();
            assert_eq!((train, valid, test), want, "n={n}");
        }
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let log = user_log(10);
        assert!(chronological_split(&log, (0.5, 0.2, 0.2)).is_err());
        assert!(chronological_split(&log, (1.0, -0.1, 0.1)).is_err());
    }

    #[test]
    fn window_enumeration_matches_bruteforce_on_12_items() {
        let log = user_log(12);
        let tags = chronological_split(&log, (0.8, 0.1, 0.1)).unwrap();
        let examples = window_examples(&log, &tags, 10);
        // Brute-force oracle: slice the raw sequence directly.
        let seq: Vec<u32> = log.interactions.iter().map(|i| i.item).collect();
        assert_eq!(examples.len(), 11);
        for (k, ex) in examples.iter().enumerate() {
            let pos = k + 1;
            assert_eq!(ex.target, seq[pos]);
            let start = pos.saturating_sub(10);
            let mut want = vec![PAD_ITEM; 10 - (pos - start)];
            want.extend_from_slice(&seq[start..pos]);
            assert_eq!(ex.history, want, "pos={pos}");
        }
        // Last target is the test split's final item with the preceding 10
        // as history.
        let last = examples.last().unwrap();
        assert_eq!(last.split, Split::Test);
        assert_eq!(last.history, seq[1..11].to_vec());
    }

    #[test]
    fn window_pads_short_histories() {
        let log = user_log(3);
        let tags = vec![Split::Train; 3];
        let examples = window_examples(&log, &tags, 10);
        let ex = &examples[1]; // target = 3rd interaction
        let mut want = vec![PAD_ITEM; 8];
        want.extend_from_slice(&[1, 2]);
        assert_eq!(ex.history, want);
    }

    #[test]
    fn window_l_hist_one() {
        let log = user_log(5);
        let tags = vec![Split::Train; 5];
        let examples = window_examples(&log, &tags, 1);
        for (k, ex) in examples.iter().enumerate() {
            assert_eq!(ex.history.len(), 1);
            assert_eq!(ex.history[0], (k + 1) as u32);
        }
    }

    fn example_with(history: Vec<u32>, target: u32) -> SeqExample {
        SeqExample {
            id: "u0:t1".to_string(),
            user: 0,
            history,
            target,
            split: Split::Train,
        }
    }

    #[test]
    fn candidates_contain_target_once_and_none_from_history() {
        let ex = example_with(vec![PAD_ITEM, PAD_ITEM, 3, 4, 5], 7);
        let cs = sample_candidates(&ex, 40, 15, 11).unwrap();
        assert_eq!(cs.items.len(), 15);
        assert_eq!(cs.items.iter().filter(|&&i| i == 7).count(), 1);
        assert_eq!(cs.items[cs.target_index], 7);
        for &c in &cs.items {
            if c != 7 {
                assert!(!ex.real_history().contains(&c));
            }
            assert_ne!(c, PAD_ITEM);
        }
        let mut uniq = cs.items.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 15);
    }

    #[test]
    fn candidates_m1_is_just_the_target() {
        let ex = example_with(vec![1, 2], 3);
        let cs = sample_candidates(&ex, 5, 1, 0).unwrap();
        assert_eq!(cs.items, vec![3]);
        assert_eq!(cs.target_index, 0);
    }

    #[test]
    fn candidates_deterministic_per_seed_and_example() {
        let ex = example_with(vec![1, 2, 3], 9);
        let a = sample_candidates(&ex, 30, 15, 42).unwrap();
        let b = sample_candidates(&ex, 30, 15, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_candidates(&ex, 30, 15, 43).unwrap();
        assert_ne!(a.items, c.items);
    }

    #[test]
    fn candidates_error_when_universe_too_small() {
        let ex = example_with(vec![1, 2, 3, 4], 5);
        // 6 items total, 4 excluded by history + 1 target: only 1 negative left.
        assert!(sample_candidates(&ex, 6, 15, 0).is_err());
    }

    #[test]
    fn interface_files_round_trip_shapes() {
        let log = user_log(5);
        let tags = vec![Split::Train; 5];
        let examples = window_examples(&log, &tags, 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("examples.tsv");
        write_examples(&examples, &log, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), examples.len());
        let fields: Vec<&str> = lines[0].split('\t').collect();
        assert_eq!(fields.len(), 4);
        assert_eq!(fields[1].split(',').count(), 3);
        assert!(fields[1].contains(PAD_ITEM_TITLE));

        let cs = sample_candidates(&examples[2], 5, 2, 1).unwrap();
        let cp = dir.path().join("cands.tsv");
        write_candidates(&[(examples[2].id.clone(), cs)], &log, &cp).unwrap();
        let ctext = fs::read_to_string(&cp).unwrap();
        assert_eq!(ctext.lines().count(), 1);
        assert!(ctext.starts_with("u0:t3\t"));
    }

    proptest! {
        #[test]
        fn prop_filter_is_idempotent(
            rows in proptest::collection::vec((0u8..8, 0u8..8, 0i64..50), 1..120),
            threshold in 1usize..4,
        ) {
            let named: Vec<(String, String, i64)> = rows
                .iter()
                .map(|(u, i, t)| (format!("u{u}"), format!("i{i}"), *t))
                .collect();
            let rows_ref: Vec<(&str, &str, i64)> =
                named.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)).collect();
            let (log, _) = toy_log(&rows_ref);
            if let Ok(once) = filter_min_interactions(&log, threshold) {
                let twice = filter_min_interactions(&once, threshold).unwrap();
                prop_assert_eq!(once.interactions, twice.interactions);
            }
        }

        #[test]
        fn prop_split_is_monotone_per_user(n in 3usize..40) {
            let log = user_log(n);
            let tags = chronological_split(&log, (0.8, 0.1, 0.1)).unwrap();
            let mut max_train = i64::MIN;
            let mut min_valid = i64::MAX;
            let mut min_test = i64::MAX;
            for (it, tag) in log.interactions.iter().zip(&tags) {
                match tag {
                    Split::Train => max_train = max_train.max(it.timestamp),
                    Split::Valid => min_valid = min_valid.min(it.timestamp),
                    Split::Test => min_test = min_test.min(it.timestamp),
                }
            }
            if min_valid != i64::MAX {
                prop_assert!(max_train <= min_valid);
            }
            if min_test != i64::MAX {
                prop_assert!(max_train <= min_test);
                if min_valid != i64::MAX {
                    prop_assert!(min_valid <= min_test);
                }
            }
        }

        #[test]
        fn prop_candidate_soundness(
            hist_len in 0usize..6,
            target in 1u32..20,
            seed in 0u64..1000,
        ) {
            let history: Vec<u32> = (1..=hist_len as u32).map(|i| (i * 3) % 19 + 1).collect();
            let mut padded = vec![PAD_ITEM; 6 - hist_len];
            padded.extend(history);
            let ex = example_with(padded, target);
            let cs = sample_candidates(&ex, 40, 10, seed).unwrap();
            prop_assert_eq!(cs.items.iter().filter(|&&i| i == target).count(), 1);
            prop_assert_eq!(cs.items[cs.target_index], target);
            for &c in &cs.items {
                if c != target {
                    prop_assert!(!ex.real_history().contains(&c));
                }
            }
        }
    }
}
