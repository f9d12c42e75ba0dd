use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AuxEdgeSet, Side, Vocab};
use crate::error::{Error, Result};

/// Field separator of an interactions file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Tsv,
    Csv,
}

impl Format {
    fn separator(self) -> char {
        match self {
            Format::Tsv => '\t',
            Format::Csv => ',',
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(Format::Tsv),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Config(format!("unknown file format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub user: String,
    pub item: String,
    pub rating: Option<f64>,
    pub timestamp: Option<i64>,
}

impl Record {
    pub fn new(user: impl Into<String>, item: impl Into<String>) -> Self {
        Record {
            user: user.into(),
            item: item.into(),
            rating: None,
            timestamp: None,
        }
    }
}

/// Parsed interactions with the number of rejected lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawInteractions {
    pub records: Vec<Record>,
    pub malformed: usize,
}

impl RawInteractions {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        RawInteractions {
            records: pairs.into_iter().map(|(u, i)| Record::new(u, i)).collect(),
            malformed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_record(line: &str, sep: char) -> Option<Record> {
    let fields: Vec<&str> = line.split(sep).map(str::trim).collect();
    if fields.len() < 2 || fields[0].is_empty() || fields[1].is_empty() {
        return None;
    }
    let rating = match fields.get(2) {
        None => None,
        Some(&"") => None,
        Some(s) => {
            let r: f64 = s.parse().ok()?;
            if !r.is_finite() || !(1.0..=5.0).contains(&r) {
                return None;
            }
            Some(r)
        }
    };
    let timestamp = match fields.get(3) {
        None => None,
        Some(&"") => None,
        Some(s) => Some(s.parse().ok()?),
    };
    Some(Record {
        user: fields[0].to_owned(),
        item: fields[1].to_owned(),
        rating,
        timestamp,
    })
}

fn is_header(line: &str, sep: char) -> bool {
    line.split(sep)
        .nth(2)
        .is_some_and(|f| !f.trim().is_empty() && f.trim().parse::<f64>().is_err())
}

/// Reads `user<SEP>item[<SEP>rating[<SEP>timestamp]]` lines.
///
/// Blank lines and `#` comments are skipped; a header is recognized on the first data
/// line by a non-numeric third field. More than 10% malformed lines is a format error.
pub fn load_interactions(path: &Path, format: Format) -> Result<RawInteractions> {
    let text = read_to_string(path)?;
    parse_interactions(&text, format)
}

pub(crate) fn parse_interactions(text: &str, format: Format) -> Result<RawInteractions> {
    let sep = format.separator();
    let mut out = RawInteractions::default();
    let mut lines = 0usize;
    let mut first = true;
    for line in text.lines() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if first {
            first = false;
            if is_header(line, sep) {
                continue;
            }
        }
        lines += 1;
        match parse_record(line, sep) {
            Some(r) => out.records.push(r),
            None => out.malformed += 1,
        }
    }
    if lines == 0 {
        log::warn!("interactions file contains no records");
    } else if out.malformed * 10 > lines {
        return Err(Error::Format(format!(
            "{} of {lines} lines are malformed",
            out.malformed
        )));
    } else if out.malformed > 0 {
        log::warn!("skipped {} malformed lines", out.malformed);
    }
    Ok(out)
}

/// Reads an auxiliary edge file (`id_a<TAB>id_b[<TAB>label]`) declared by a
/// `#side=user-user|item-item|user-item` header comment.
///
/// Ids absent from the vocabularies (e.g. removed by k-core filtering) are dropped.
pub fn load_aux_edges(path: &Path, users: &Vocab, items: &Vocab) -> Result<AuxEdgeSet> {
    let text = read_to_string(path)?;
    parse_aux_edges(&text, users, items)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub(crate) fn parse_aux_edges(text: &str, users: &Vocab, items: &Vocab) -> Result<AuxEdgeSet> {
    let mut side = None;
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    let mut any_label = false;
    let mut dropped = 0usize;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(s) = comment.trim().strip_prefix("side=") {
                side = Some(s.parse::<Side>()?);
            }
            continue;
        }
        let side = side.ok_or_else(|| Error::Format("missing `#side=` header".into()))?;
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::Format(format!("malformed edge line `{line}`")));
        }
        let (va, vb) = match side {
            Side::UserUser => (users, users),
            Side::ItemItem => (items, items),
            Side::UserItem => (users, items),
        };
        let label = match fields.get(2) {
            Some(s) if !s.is_empty() => {
                any_label = true;
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad label in `{line}`")))?
            }
            _ => f64::NAN,
        };
        match (va.get(fields[0]), vb.get(fields[1])) {
            (Some(a), Some(b)) => {
                pairs.push((a, b));
                labels.push(label);
            }
            _ => dropped += 1,
        }
    }
    let side = side.ok_or_else(|| Error::Format("missing `#side=` header".into()))?;
    if dropped > 0 {
        log::info!("dropped {dropped} auxiliary edges with unknown ids");
    }
    let labels = if any_label {
        if labels.iter().any(|l| l.is_nan()) {
            return Err(Error::Format("labels must be given on every line or none".into()));
        }
        Some(labels)
    } else {
        None
    };
    AuxEdgeSet::new(side, pairs, labels, users.len(), items.len())
}

/// Builds item-item pairs from an `item<TAB>category` file: two items sharing a
/// category form a pair. Each item keeps at most `cap` sampled partners.
pub fn load_categories(path: &Path, items: &Vocab, cap: usize, seed: u64) -> Result<AuxEdgeSet> {
    let text = read_to_string(path)?;
    Ok(category_pairs(&text, items, cap, seed))
}

pub(crate) fn category_pairs(text: &str, items: &Vocab, cap: usize, seed: u64) -> AuxEdgeSet {
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut item_cats: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split('\t').map(str::trim);
        let (Some(item), Some(cat)) = (it.next(), it.next()) else {
            continue;
        };
        if let Some(idx) = items.get(item) {
            members.entry(cat).or_default().push(idx);
            item_cats.entry(idx).or_default().push(cat);
        }
    }
    for m in members.values_mut() {
        m.sort_unstable();
        m.dedup();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for (&item, cats) in &item_cats {
        let pools: Vec<&[usize]> = cats.iter().map(|c| members[c].as_slice()).collect();
        let total: usize = pools.iter().map(|p| p.len()).sum();
        if total <= cap + cats.len() {
            let mut partners: Vec<usize> = pools.iter().flat_map(|p| p.iter().copied()).collect();
            partners.sort_unstable();
            partners.dedup();
            pairs.extend(partners.into_iter().filter(|&p| p != item).map(|p| (item, p)));
            continue;
        }
        // Draw positions in the concatenated member lists.
        let mut chosen = HashSet::new();
        let mut attempts = 0;
        while chosen.len() < cap && attempts < 8 * cap {
            attempts += 1;
            let mut k = rng.random_range(0..total);
            let mut partner = None;
            for p in &pools {
                if k < p.len() {
                    partner = Some(p[k]);
                    break;
                }
                k -= p.len();
            }
            if let Some(p) = partner.filter(|&p| p != item) {
                if chosen.insert(p) {
                    pairs.push((item, p));
                }
            }
        }
    }
    AuxEdgeSet::new(Side::ItemItem, pairs, None, 0, items.len())
        .expect("category pairs are in range by construction")
}
