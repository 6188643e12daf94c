//! Interaction ingestion, k-core filtering, sliding windows, chronological
//! splitting and on-disk dataset persistence.

pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmentation::{
    tokenize_prompt, ItemCatalog, ItemId, PromptTemplate, SegmentationError, TokenId,
    TokenizedPrompt, Vocabulary,
};

pub use synthetic::{generate_synthetic, sparse_transition, SyntheticSpec};

/// History length plus one target.
pub const WINDOW_LEN: usize = 11;
pub const CORE_K: usize = 5;
pub const SPLIT_RATIOS: [usize; 3] = [8, 1, 1];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("item {0} has interactions but no catalog title")]
    MissingTitle(u64),
    #[error("no windows to split")]
    Empty,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> DataError + '_ {
    move |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub item_id: u64,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: u64,
    /// Non-decreasing in timestamp.
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogRecord {
    pub item_id: u64,
    pub title: String,
}

/// Groups raw `(user, item, timestamp)` rows by user (ascending id) and
/// sorts each user's events by timestamp, keeping file order among ties.
pub fn group_interactions(
    rows: impl IntoIterator<Item = (u64, Event)>,
) -> Vec<InteractionSequence> {
    let mut by_user: BTreeMap<u64, Vec<Event>> = BTreeMap::new();
    for (user, ev) in rows {
        by_user.entry(user).or_default().push(ev);
    }
    by_user
        .into_iter()
        .map(|(user_id, mut events)| {
            events.sort_by_key(|e| e.timestamp);
            InteractionSequence { user_id, events }
        })
        .collect()
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
    path: &Path,
) -> Result<T, DataError> {
    let line = record.position().map_or(0, |p| p.line());
    let raw = record.get(idx).ok_or_else(|| DataError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("missing column {name}"),
    })?;
    raw.trim().parse().map_err(|_| DataError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("bad {name} {raw:?}"),
    })
}

fn reader(path: &Path) -> Result<csv::Reader<File>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file))
}

/// Reads `user_id,item_id,timestamp` rows. Duplicate rows are kept.
pub fn load_interactions(path: &Path) -> Result<Vec<InteractionSequence>, DataError> {
    let mut rdr = reader(path)?;
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err(path))?;
        let user: u64 = parse_field(&record, 0, "user_id", path)?;
        let item_id = parse_field(&record, 1, "item_id", path)?;
        let timestamp = parse_field(&record, 2, "timestamp", path)?;
        rows.push((user, Event { item_id, timestamp }));
    }
    Ok(group_interactions(rows))
}

/// Reads `item_id,title` rows.
pub fn load_catalog(path: &Path) -> Result<Vec<CatalogRecord>, DataError> {
    let mut rdr = reader(path)?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err(path))?;
        let item_id = parse_field(&record, 0, "item_id", path)?;
        let title = record.get(1).unwrap_or("").to_string();
        out.push(CatalogRecord { item_id, title });
    }
    Ok(out)
}

pub fn write_interactions(path: &Path, sequences: &[InteractionSequence]) -> Result<(), DataError> {
    let mut w = writer(path)?;
    w.write_record(["user_id", "item_id", "timestamp"])
        .map_err(csv_err(path))?;
    for seq in sequences {
        for ev in &seq.events {
            w.write_record([
                seq.user_id.to_string(),
                ev.item_id.to_string(),
                ev.timestamp.to_string(),
            ])
            .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_catalog(path: &Path, records: &[CatalogRecord]) -> Result<(), DataError> {
    let mut w = writer(path)?;
    w.write_record(["item_id", "title"])
        .map_err(csv_err(path))?;
    for r in records {
        w.write_record([r.item_id.to_string(), r.title.clone()])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, DataError> {
    let file = File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(BufWriter::new(file)))
}

/// Repeatedly drops users and items with fewer than `k` interactions until
/// nothing changes.
pub fn k_core_filter(sequences: &[InteractionSequence], k: usize) -> Vec<InteractionSequence> {
    let mut current: Vec<InteractionSequence> = sequences.to_vec();
    loop {
        let mut item_counts: HashMap<u64, usize> = HashMap::new();
        for s in &current {
            for e in &s.events {
                *item_counts.entry(e.item_id).or_default() += 1;
            }
        }
        let before: usize = current.iter().map(|s| s.events.len()).sum();
        let next: Vec<InteractionSequence> = current
            .iter()
            .filter(|s| s.events.len() >= k)
            .map(|s| InteractionSequence {
                user_id: s.user_id,
                events: s
                    .events
                    .iter()
                    .copied()
                    .filter(|e| item_counts[&e.item_id] >= k)
                    .collect(),
            })
            .filter(|s| !s.events.is_empty())
            .collect();
        let after: usize = next.iter().map(|s| s.events.len()).sum();
        let done = after == before && next.len() == current.len();
        current = next;
        if done {
            return current;
        }
    }
}

pub fn five_core_filter(sequences: &[InteractionSequence]) -> Vec<InteractionSequence> {
    k_core_filter(sequences, CORE_K)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub user_id: u64,
    pub history: Vec<ItemId>,
    pub target: ItemId,
    /// Timestamp of the target interaction.
    pub timestamp: i64,
}

/// Stride-1 windows of `window_len` consecutive events; each yields the first
/// `window_len - 1` items as history and the last as target.
pub fn sliding_windows(user_id: u64, events: &[(ItemId, i64)], window_len: usize) -> Vec<Window> {
    assert!(window_len >= 2, "window length must be at least 2");
    if events.len() < window_len {
        return Vec::new();
    }
    events
        .windows(window_len)
        .map(|w| {
            let (target, timestamp) = w[window_len - 1];
            Window {
                user_id,
                history: w[..window_len - 1].iter().map(|&(i, _)| i).collect(),
                target,
                timestamp,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitName::Train),
            "valid" => Some(SplitName::Valid),
            "test" => Some(SplitName::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Window>,
    pub valid: Vec<Window>,
    pub test: Vec<Window>,
}

/// Stable sort by timestamp, then prefix/middle/suffix at the floor of the
/// cumulative ratio boundaries.
pub fn chronological_split(windows: Vec<Window>, ratios: [usize; 3]) -> Result<Splits, DataError> {
    if windows.is_empty() {
        return Err(DataError::Empty);
    }
    let mut windows = windows;
    windows.sort_by_key(|w| w.timestamp);
    let n = windows.len();
    let total: usize = ratios.iter().sum();
    let b1 = n * ratios[0] / total;
    let b2 = n * (ratios[0] + ratios[1]) / total;
    let test = windows.split_off(b2);
    let valid = windows.split_off(b1);
    Ok(Splits {
        train: windows,
        valid,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    /// interactions / (users × items)
    pub density: f64,
}

impl DatasetSummary {
    pub fn of(sequences: &[InteractionSequence]) -> Self {
        let items: BTreeSet<u64> = sequences
            .iter()
            .flat_map(|s| s.events.iter().map(|e| e.item_id))
            .collect();
        let interactions = sequences.iter().map(|s| s.events.len()).sum();
        let users = sequences.len();
        let denom = users * items.len();
        Self {
            users,
            items: items.len(),
            interactions,
            density: if denom == 0 {
                0.0
            } else {
                interactions as f64 / denom as f64
            },
        }
    }
}

/// Preprocessed windows plus the catalog of surviving items (dense ids).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Title of every dense item id.
    pub titles: Vec<String>,
    /// Original id of every dense item id.
    pub raw_item_ids: Vec<u64>,
    pub splits: Splits,
}

impl Dataset {
    pub fn n_items(&self) -> usize {
        self.titles.len()
    }

    pub fn catalog(&self) -> Result<(ItemCatalog, Vocabulary), DataError> {
        Ok(ItemCatalog::from_title_strings(&self.titles)?)
    }

    pub fn split(&self, name: SplitName) -> &[Window] {
        match name {
            SplitName::Train => &self.splits.train,
            SplitName::Valid => &self.splits.valid,
            SplitName::Test => &self.splits.test,
        }
    }

    /// Writes `catalog.csv`, `windows.csv` and `split.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let catalog: Vec<CatalogRecord> = self
            .titles
            .iter()
            .enumerate()
            .map(|(i, t)| CatalogRecord {
                item_id: i as u64,
                title: t.clone(),
            })
            .collect();
        write_catalog(&dir.join("catalog.csv"), &catalog)?;

        let wpath = dir.join("windows.csv");
        let spath = dir.join("split.csv");
        let mut ww = writer(&wpath)?;
        let mut sw = writer(&spath)?;
        ww.write_record(["window", "user_id", "history", "target", "timestamp"])
            .map_err(csv_err(&wpath))?;
        sw.write_record(["window", "split"])
            .map_err(csv_err(&spath))?;
        let all = [SplitName::Train, SplitName::Valid, SplitName::Test]
            .into_iter()
            .flat_map(|s| self.split(s).iter().map(move |w| (s, w)));
        for (idx, (split, w)) in all.enumerate() {
            let history: Vec<String> = w.history.iter().map(|i| i.to_string()).collect();
            ww.write_record([
                idx.to_string(),
                w.user_id.to_string(),
                history.join("|"),
                w.target.to_string(),
                w.timestamp.to_string(),
            ])
            .map_err(csv_err(&wpath))?;
            sw.write_record([idx.to_string(), split.as_str().to_string()])
                .map_err(csv_err(&spath))?;
        }
        ww.flush().map_err(|source| DataError::Io {
            path: wpath.clone(),
            source,
        })?;
        sw.flush().map_err(|source| DataError::Io {
            path: spath.clone(),
            source,
        })
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let catalog = load_catalog(&dir.join("catalog.csv"))?;
        let titles: Vec<String> = catalog.iter().map(|r| r.title.clone()).collect();
        for (i, r) in catalog.iter().enumerate() {
            if r.item_id != i as u64 {
                return Err(DataError::Parse {
                    path: dir.join("catalog.csv"),
                    line: i as u64 + 2,
                    message: "item ids must be dense and ordered".into(),
                });
            }
        }

        let wpath = dir.join("windows.csv");
        let mut windows = Vec::new();
        for record in reader(&wpath)?.records() {
            let record = record.map_err(csv_err(&wpath))?;
            let line = record.position().map_or(0, |p| p.line());
            let history = record
                .get(2)
                .unwrap_or("")
                .split('|')
                .map(|s| s.parse::<ItemId>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| DataError::Parse {
                    path: wpath.clone(),
                    line,
                    message: "bad history".into(),
                })?;
            windows.push(Window {
                user_id: parse_field(&record, 1, "user_id", &wpath)?,
                history,
                target: parse_field(&record, 3, "target", &wpath)?,
                timestamp: parse_field(&record, 4, "timestamp", &wpath)?,
            });
        }

        let spath = dir.join("split.csv");
        let mut splits = Splits::default();
        for (record, w) in reader(&spath)?.records().zip(windows) {
            let record = record.map_err(csv_err(&spath))?;
            let line = record.position().map_or(0, |p| p.line());
            let name = record
                .get(1)
                .and_then(SplitName::parse)
                .ok_or(DataError::Parse {
                    path: spath.clone(),
                    line,
                    message: "bad split name".into(),
                })?;
            match name {
                SplitName::Train => splits.train.push(w),
                SplitName::Valid => splits.valid.push(w),
                SplitName::Test => splits.test.push(w),
            }
        }
        let raw_item_ids = (0..titles.len() as u64).collect();
        Ok(Self {
            titles,
            raw_item_ids,
            splits,
        })
    }
}

/// k-core filtering, dense item re-indexing, windowing and the 8:1:1
/// chronological split.
pub fn preprocess(
    sequences: &[InteractionSequence],
    catalog: &[CatalogRecord],
) -> Result<(Dataset, DatasetSummary), DataError> {
    let filtered = five_core_filter(sequences);
    let summary = DatasetSummary::of(&filtered);

    let titles_by_id: HashMap<u64, &str> = catalog
        .iter()
        .map(|r| (r.item_id, r.title.as_str()))
        .collect();
    let surviving: BTreeSet<u64> = filtered
        .iter()
        .flat_map(|s| s.events.iter().map(|e| e.item_id))
        .collect();
    let mut dense: HashMap<u64, ItemId> = HashMap::new();
    let mut titles = Vec::new();
    let mut raw_item_ids = Vec::new();
    for raw in surviving {
        let title = titles_by_id.get(&raw).ok_or(DataError::MissingTitle(raw))?;
        dense.insert(raw, titles.len());
        titles.push(title.to_string());
        raw_item_ids.push(raw);
    }

    let mut windows = Vec::new();
    for s in &filtered {
        let events: Vec<(ItemId, i64)> = s
            .events
            .iter()
            .map(|e| (dense[&e.item_id], e.timestamp))
            .collect();
        windows.extend(sliding_windows(s.user_id, &events, WINDOW_LEN));
    }
    let splits = chronological_split(windows, SPLIT_RATIOS)?;
    Ok((
        Dataset {
            titles,
            raw_item_ids,
            splits,
        },
        summary,
    ))
}

/// A tokenized history paired with its target item.
pub type Example = (TokenizedPrompt, ItemId);

/// Tokenizes every window's history with `template`.
pub fn tokenize_windows(
    windows: &[Window],
    catalog: &ItemCatalog,
    template: &PromptTemplate,
) -> Result<Vec<Example>, DataError> {
    windows
        .iter()
        .map(|w| {
            if w.target >= catalog.n_items() {
                return Err(SegmentationError::CatalogMiss(w.target).into());
            }
            Ok((tokenize_prompt(&w.history, catalog, template)?, w.target))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceStats {
    /// Mean occurrence count over distinct token pairs seen inside one item.
    pub intra_pair_mean_frequency: Option<f64>,
    /// Mean occurrence count over distinct token pairs seen across items.
    pub cross_pair_mean_frequency: Option<f64>,
    pub n_intra_pairs: usize,
    pub n_cross_pairs: usize,
}

/// Counts how often each unordered token pair occurs within the same item vs.
/// across items of the same history, then averages per distinct pair.
pub fn cooccurrence_stats<'a>(
    histories: impl IntoIterator<Item = &'a [ItemId]>,
    catalog: &ItemCatalog,
) -> Result<CooccurrenceStats, DataError> {
    let mut intra: HashMap<(TokenId, TokenId), u64> = HashMap::new();
    let mut cross: HashMap<(TokenId, TokenId), u64> = HashMap::new();
    for history in histories {
        let mut tokens: Vec<(TokenId, usize)> = Vec::new();
        for (slot, &item) in history.iter().enumerate() {
            let title = catalog
                .title(item)
                .ok_or(SegmentationError::CatalogMiss(item))?;
            tokens.extend(title.iter().map(|&t| (t, slot)));
        }
        for (p, &(a, sa)) in tokens.iter().enumerate() {
            for &(b, sb) in &tokens[p + 1..] {
                let key = (a.min(b), a.max(b));
                let map = if sa == sb { &mut intra } else { &mut cross };
                *map.entry(key).or_default() += 1;
            }
        }
    }
    let mean = |m: &HashMap<(TokenId, TokenId), u64>| {
        (!m.is_empty()).then(|| m.values().sum::<u64>() as f64 / m.len() as f64)
    };
    Ok(CooccurrenceStats {
        intra_pair_mean_frequency: mean(&intra),
        cross_pair_mean_frequency: mean(&cross),
        n_intra_pairs: intra.len(),
        n_cross_pairs: cross.len(),
    })
}
