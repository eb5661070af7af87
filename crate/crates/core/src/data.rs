//! Sparse ordinal observations: rating files, survey tables, level rescaling
//! and the per-user train / validation / test protocol.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{CrbmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Entry {
    pub instance: usize,
    pub item: usize,
    /// 1-based ordinal level.
    pub level: usize,
    pub timestamp: Option<i64>,
}

/// A sparse matrix of ordinal levels with dense internal indices and the
/// external identifiers they came from. Splits of one set share its id maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub instance_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// Number of levels of each item's scale.
    pub item_levels: Vec<usize>,
    pub entries: Vec<Entry>,
}

impl ObservationSet {
    pub fn n_instances(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Same id maps and scales, different entries.
    pub fn with_entries(&self, entries: Vec<Entry>) -> Self {
        Self {
            instance_ids: self.instance_ids.clone(),
            item_ids: self.item_ids.clone(),
            item_levels: self.item_levels.clone(),
            entries,
        }
    }

    /// `(item, level)` pairs of every instance, ordered by item.
    pub fn by_instance(&self) -> Vec<Vec<(usize, usize)>> {
        let mut rows = vec![Vec::new(); self.n_instances()];
        for e in &self.entries {
            rows[e.instance].push((e.item, e.level));
        }
        rows.iter_mut().for_each(|r| r.sort_unstable());
        rows
    }

    /// `(instance, level)` pairs of every item, ordered by instance.
    pub fn by_item(&self) -> Vec<Vec<(usize, usize)>> {
        let mut cols = vec![Vec::new(); self.n_items()];
        for e in &self.entries {
            cols[e.item].push((e.instance, e.level));
        }
        cols.iter_mut().for_each(|c| c.sort_unstable());
        cols
    }

    /// True when every instance observes every item.
    pub fn is_fully_observed(&self) -> bool {
        self.entries.len() == self.n_instances() * self.n_items()
            && self.by_instance().iter().all(|r| r.len() == self.n_items())
    }

    pub fn max_levels(&self) -> usize {
        self.item_levels.iter().copied().max().unwrap_or(0)
    }

    pub fn instance_index(&self) -> HashMap<&str, usize> {
        self.instance_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect()
    }

    pub fn item_index(&self) -> HashMap<&str, usize> {
        self.item_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }
}

/// Field delimiter of a text table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delimiter {
    Tab,
    Comma,
    DoubleColon,
    Whitespace,
}

impl Delimiter {
    pub fn detect(line: &str) -> Self {
        if line.contains('\t') {
            Delimiter::Tab
        } else if line.contains("::") {
            Delimiter::DoubleColon
        } else if line.contains(',') {
            Delimiter::Comma
        } else {
            Delimiter::Whitespace
        }
    }

    pub fn split<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            Delimiter::Tab => line.split('\t').map(str::trim).collect(),
            Delimiter::Comma => line.split(',').map(str::trim).collect(),
            Delimiter::DoubleColon => line.split("::").map(str::trim).collect(),
            Delimiter::Whitespace => line.split_whitespace().collect(),
        }
    }
}

/// Layout of a rating file: `user, item, rating[, timestamp]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingFormat {
    /// Ratings must lie in `1..=levels`.
    pub levels: usize,
    /// Detected from the first line when `None`.
    pub delimiter: Option<Delimiter>,
    /// Detected from the first line when `None`: a header is assumed if the
    /// rating column of the first line is not numeric.
    pub header: Option<bool>,
}

impl RatingFormat {
    pub fn new(levels: usize) -> Self {
        Self {
            levels,
            delimiter: None,
            header: None,
        }
    }
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> CrbmError {
    CrbmError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parses an ordinal level written as an integer (or an integral float).
fn parse_level(field: &str) -> Option<i64> {
    if let Ok(v) = field.parse::<i64>() {
        return Some(v);
    }
    let v: f64 = field.parse().ok()?;
    (v.fract() == 0.0 && v.is_finite()).then_some(v as i64)
}

#[derive(Default)]
struct Interner {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Interner {
    fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), i);
        i
    }
}

/// Reads a delimited rating file. Ids are reindexed densely in order of
/// first appearance. A repeated `(user, item)` pair keeps the entry with the
/// latest timestamp, or the last line when timestamps are absent; each
/// repeat produces a warning in the returned list.
pub fn load_ratings(path: impl AsRef<Path>, format: &RatingFormat) -> Result<(ObservationSet, Vec<String>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut users = Interner::default();
    let mut items = Interner::default();
    let mut entries: Vec<Entry> = Vec::new();
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    let mut warnings = Vec::new();
    let mut delimiter = format.delimiter;
    let mut first = true;

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let delim = *delimiter.get_or_insert_with(|| Delimiter::detect(line));
        let fields = delim.split(line);
        if first {
            first = false;
            let header = format
                .header
                .unwrap_or_else(|| fields.get(2).is_some_and(|f| f.parse::<f64>().is_err()));
            if header {
                continue;
            }
        }
        if fields.len() < 3 || fields.len() > 4 {
            return Err(parse_error(
                path,
                lineno,
                format!("expected 3 or 4 fields, found {}", fields.len()),
            ));
        }
        let level = parse_level(fields[2])
            .ok_or_else(|| parse_error(path, lineno, format!("rating `{}` is not an integer level", fields[2])))?;
        if level < 1 || level as usize > format.levels {
            return Err(parse_error(
                path,
                lineno,
                format!("rating {level} outside 1..={}", format.levels),
            ));
        }
        let timestamp = match fields.get(3) {
            Some(t) if !t.is_empty() => Some(
                t.parse::<i64>()
                    .map_err(|_| parse_error(path, lineno, format!("timestamp `{t}` is not an integer")))?,
            ),
            _ => None,
        };
        let entry = Entry {
            instance: users.intern(fields[0]),
            item: items.intern(fields[1]),
            level: level as usize,
            timestamp,
        };
        match seen.get(&(entry.instance, entry.item)) {
            Some(&at) => {
                warnings.push(format!(
                    "{}:{lineno}: duplicate rating for user `{}` item `{}`",
                    path.display(),
                    fields[0],
                    fields[1]
                ));
                let keep_new = match (entries[at].timestamp, entry.timestamp) {
                    (Some(old), Some(new)) => new >= old,
                    _ => true,
                };
                if keep_new {
                    entries[at] = entry;
                }
            }
            None => {
                seen.insert((entry.instance, entry.item), entries.len());
                entries.push(entry);
            }
        }
    }
    if entries.is_empty() {
        return Err(CrbmError::EmptyDataset);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let n_items = items.ids.len();
    Ok((
        ObservationSet {
            instance_ids: users.ids,
            item_ids: items.ids,
            item_levels: vec![format.levels; n_items],
            entries,
        },
        warnings,
    ))
}

/// Writes entries as a tab-delimited rating file with a header; the
/// timestamp column is present when any entry carries one.
pub fn write_ratings(set: &ObservationSet, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let timed = set.entries.iter().any(|e| e.timestamp.is_some());
    if timed {
        writeln!(out, "user\titem\trating\ttimestamp")?;
    } else {
        writeln!(out, "user\titem\trating")?;
    }
    for e in &set.entries {
        let (u, i) = (&set.instance_ids[e.instance], &set.item_ids[e.item]);
        match (timed, e.timestamp) {
            (true, Some(t)) => writeln!(out, "{u}\t{i}\t{}\t{t}", e.level)?,
            (true, None) => writeln!(out, "{u}\t{i}\t{}\t", e.level)?,
            (false, _) => writeln!(out, "{u}\t{i}\t{}", e.level)?,
        }
    }
    out.flush()?;
    Ok(())
}

/// Maps levels of a `from_levels`-point scale onto `to_levels` points by
/// `ceil(level * to / from)`.
pub fn rescale_level(level: usize, from_levels: usize, to_levels: usize) -> usize {
    (level * to_levels).div_ceil(from_levels).max(1)
}

pub fn rescale_levels(set: &ObservationSet, from_levels: usize, to_levels: usize) -> Result<ObservationSet> {
    if to_levels < 2 || from_levels < 1 {
        return Err(CrbmError::invalid(format!(
            "cannot rescale {from_levels} levels to {to_levels}"
        )));
    }
    let entries = set
        .entries
        .iter()
        .map(|e| Entry {
            level: rescale_level(e.level, from_levels, to_levels),
            ..*e
        })
        .collect();
    Ok(ObservationSet {
        item_levels: vec![to_levels; set.n_items()],
        ..set.with_entries(entries)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitConfig {
    pub min_ratings: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Order each user's entries by timestamp (train, then validation, then
    /// test) instead of selecting at random.
    pub by_time: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            min_ratings: 30,
            n_valid: 5,
            n_test: 10,
            by_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: ObservationSet,
    pub valid: ObservationSet,
    pub test: ObservationSet,
}

/// Per-user hold-out: users with fewer than `min_ratings` entries are dropped;
/// each remaining user gives `n_test` entries to test, `n_valid` to
/// validation and the rest to training.
pub fn split_protocol<R: Rng + ?Sized>(set: &ObservationSet, config: &SplitConfig, rng: &mut R) -> Result<Split> {
    if config.min_ratings < config.n_valid + config.n_test + 1 {
        return Err(CrbmError::invalid(format!(
            "min_ratings {} must exceed n_valid + n_test = {}",
            config.min_ratings,
            config.n_valid + config.n_test
        )));
    }
    let mut per_user: Vec<Vec<Entry>> = vec![Vec::new(); set.n_instances()];
    for e in &set.entries {
        per_user[e.instance].push(*e);
    }
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut rows in per_user {
        if rows.len() < config.min_ratings {
            continue;
        }
        if config.by_time {
            if let Some(e) = rows.iter().find(|e| e.timestamp.is_none()) {
                return Err(CrbmError::MissingTimestamps {
                    instance: set.instance_ids[e.instance].clone(),
                });
            }
            rows.sort_by_key(|e| e.timestamp);
        } else {
            rows.shuffle(rng);
        }
        let n = rows.len();
        let test_from = n - config.n_test;
        let valid_from = test_from - config.n_valid;
        test.extend_from_slice(&rows[test_from..]);
        valid.extend_from_slice(&rows[valid_from..test_from]);
        train.extend_from_slice(&rows[..valid_from]);
    }
    Ok(Split {
        train: set.with_entries(train),
        valid: set.with_entries(valid),
        test: set.with_entries(test),
    })
}

/// Reads a `name levels` schema, one column per line.
pub fn load_schema(path: impl AsRef<Path>) -> Result<Vec<(String, usize)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields = Delimiter::detect(line).split(line);
        if fields.len() != 2 {
            return Err(parse_error(path, lineno + 1, "schema lines are `name levels`"));
        }
        let levels: usize = fields[1].parse().map_err(|_| {
            parse_error(
                path,
                lineno + 1,
                format!("level count `{}` is not an integer", fields[1]),
            )
        })?;
        if levels < 2 {
            return Err(parse_error(path, lineno + 1, "a column needs at least 2 levels"));
        }
        out.push((fields[0].to_owned(), levels));
    }
    if out.is_empty() {
        return Err(parse_error(path, 1, "schema declares no columns"));
    }
    Ok(out)
}

fn is_missing(field: &str) -> bool {
    field.is_empty() || field.eq_ignore_ascii_case("na") || field == "."
}

/// Reads a respondent-by-question table with a header row. Each schema
/// column becomes an item with its own number of levels; blank, `NA` or `.`
/// cells are missing. A leading header column absent from the schema is
/// used as the respondent id, otherwise rows are numbered from 1.
pub fn load_survey(path: impl AsRef<Path>, schema: &[(String, usize)]) -> Result<ObservationSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header_line) = lines.next().ok_or(CrbmError::EmptyDataset)?;
    let delim = Delimiter::detect(header_line);
    let header = delim.split(header_line.trim_end_matches(['\r', '\n']));
    let schema_index: HashMap<&str, usize> = schema.iter().enumerate().map(|(i, (n, _))| (n.as_str(), i)).collect();
    let id_column = !schema_index.contains_key(header[0]);
    let mut column_item = Vec::with_capacity(header.len());
    for (c, name) in header.iter().enumerate() {
        if c == 0 && id_column {
            column_item.push(None);
            continue;
        }
        let item = schema_index
            .get(name)
            .copied()
            .ok_or_else(|| CrbmError::SchemaMismatch {
                path: path.to_path_buf(),
                line: 1,
                column: name.to_string(),
                message: "is not declared in the schema".into(),
            })?;
        column_item.push(Some(item));
    }
    for (name, _) in schema {
        if !header.contains(&name.as_str()) {
            return Err(CrbmError::SchemaMismatch {
                path: path.to_path_buf(),
                line: 1,
                column: name.clone(),
                message: "is declared in the schema but missing from the header".into(),
            });
        }
    }

    let mut instance_ids = Vec::new();
    let mut entries = Vec::new();
    for (lineno, raw) in lines {
        let lineno = lineno + 1;
        // keep empty trailing cells, so split without trimming the line
        let fields: Vec<&str> = match delim {
            Delimiter::Whitespace => raw.split_whitespace().collect(),
            _ => delim.split(raw.trim_end_matches(['\r', '\n'])),
        };
        if fields.len() != header.len() {
            return Err(parse_error(
                path,
                lineno,
                format!("expected {} fields, found {}", header.len(), fields.len()),
            ));
        }
        let instance = instance_ids.len();
        instance_ids.push(if id_column {
            fields[0].to_owned()
        } else {
            (instance + 1).to_string()
        });
        for (field, item) in fields.iter().zip(&column_item) {
            let Some(item) = *item else { continue };
            if is_missing(field) {
                continue;
            }
            let levels = schema[item].1;
            let value = parse_level(field)
                .ok_or_else(|| parse_error(path, lineno, format!("value `{field}` is not an integer level")))?;
            if value < 1 {
                return Err(parse_error(path, lineno, format!("value {value} is below level 1")));
            }
            if value as usize > levels {
                return Err(CrbmError::SchemaMismatch {
                    path: path.to_path_buf(),
                    line: lineno,
                    column: schema[item].0.clone(),
                    message: format!("value {value} exceeds its {levels} levels"),
                });
            }
            entries.push(Entry {
                instance,
                item,
                level: value as usize,
                timestamp: None,
            });
        }
    }
    if entries.is_empty() {
        return Err(CrbmError::EmptyDataset);
    }
    Ok(ObservationSet {
        instance_ids,
        item_ids: schema.iter().map(|(n, _)| n.clone()).collect(),
        item_levels: schema.iter().map(|(_, l)| *l).collect(),
        entries,
    })
}
