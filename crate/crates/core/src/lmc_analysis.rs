//! Literal-meaning-coverage (LMC) statistics: per-item averages, coverage
//! buckets, the idiom-vs-synonym change table and Fleiss' kappa.
//!
//! All comparisons run on exact rationals; `f64` values are derived for
//! reporting only.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

pub type Rational = Ratio<i128>;

/// Ratings live in `1..=CATEGORIES`.
pub const CATEGORIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Idiom,
    CommonWord,
    /// A synonym of a sampled idiom, annotated for the change comparison.
    Synonym,
}

impl FromStr for ItemKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "idiom" => Ok(ItemKind::Idiom),
            "word" | "common_word" => Ok(ItemKind::CommonWord),
            "synonym" => Ok(ItemKind::Synonym),
            other => Err(Error::Invalid(format!(
                "unknown item kind `{other}` (expected idiom, word or synonym)"
            ))),
        }
    }
}

impl fmt::Display for ItemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ItemKind::Idiom => "idiom",
            ItemKind::CommonWord => "word",
            ItemKind::Synonym => "synonym",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AnnotationRecord {
    pub item: String,
    pub kind: ItemKind,
    pub ratings: Vec<u8>,
}

impl AnnotationRecord {
    pub fn new(item: impl Into<String>, kind: ItemKind, ratings: Vec<u8>) -> Result<Self> {
        let record = AnnotationRecord {
            item: item.into(),
            kind,
            ratings,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratings.is_empty() {
            return Err(Error::Invalid(format!("`{}` has no ratings", self.item)));
        }
        if let Some(r) = self.ratings.iter().find(|r| !(1..=CATEGORIES as u8).contains(r)) {
            return Err(Error::Invalid(format!("`{}` has rating {r}, expected 1..={CATEGORIES}", self.item)));
        }
        Ok(())
    }
}

/// Mean rating, exactly.
pub fn final_lmc(record: &AnnotationRecord) -> Rational {
    let sum: i128 = record.ratings.iter().map(|&r| r as i128).sum();
    Rational::new(sum, record.ratings.len() as i128)
}

fn to_f64(r: &Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn ser_ratio<S: Serializer>(r: &Rational, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&r.to_string())
}

/// `[1, 5/3)`, `[5/3, 7/3)`, `[7/3, 3]`, printed as 1.66 / 2.33.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Bucket {
    Low,
    Middle,
    High,
}

impl Bucket {
    pub const LABELS: [&'static str; 3] = ["[1.00, 1.66)", "[1.66, 2.33)", "[2.33, 3.00]"];

    pub fn of(lmc: Rational) -> Bucket {
        if lmc < Rational::new(5, 3) {
            Bucket::Low
        } else if lmc < Rational::new(7, 3) {
            Bucket::Middle
        } else {
            Bucket::High
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketShares {
    pub labels: [&'static str; 3],
    pub counts: [usize; 3],
    pub total: usize,
    pub shares: [f64; 3],
}

impl BucketShares {
    pub fn exact(&self) -> [Rational; 3] {
        self.counts.map(|c| Rational::new(c as i128, self.total as i128))
    }
}

pub fn bucket_distribution(records: &[AnnotationRecord]) -> Result<BucketShares> {
    if records.is_empty() {
        return Err(Error::Invalid("bucket distribution needs at least one record".into()));
    }
    let mut counts = [0usize; 3];
    for r in records {
        counts[Bucket::of(final_lmc(r)).index()] += 1;
    }
    let total = records.len();
    Ok(BucketShares {
        labels: Bucket::LABELS,
        counts,
        total,
        shares: counts.map(|c| c as f64 / total as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FleissKappa {
    pub kappa: f64,
    #[serde(serialize_with = "ser_ratio")]
    pub exact: Rational,
    pub mean_agreement: f64,
    pub chance_agreement: f64,
    pub items: usize,
    pub raters: usize,
    /// Every rating fell in one category, so chance agreement is 1 and κ is
    /// set to 1 by convention.
    pub degenerate: bool,
}

/// Fleiss' kappa from an items × categories count table; every row must sum
/// to the same rater count n ≥ 2.
pub fn fleiss_kappa_counts(table: &[Vec<u64>]) -> Result<FleissKappa> {
    let first = table
        .first()
        .ok_or_else(|| Error::Invalid("Fleiss' kappa needs at least one item".into()))?;
    let k = first.len();
    let n: u64 = first.iter().sum();
    if n < 2 {
        return Err(Error::Invalid(format!("Fleiss' kappa needs at least 2 raters per item, got {n}")));
    }
    for (i, row) in table.iter().enumerate() {
        if row.len() != k {
            return Err(Error::Invalid(format!("item {i} has {} categories, expected {k}", row.len())));
        }
        let s: u64 = row.iter().sum();
        if s != n {
            return Err(Error::Invalid(format!("item {i} has {s} raters, expected {n}")));
        }
    }
    let big_n = table.len() as i128;
    let n = n as i128;
    let agreeing: i128 = table
        .iter()
        .flat_map(|row| row.iter().map(|&c| c as i128 * (c as i128 - 1)))
        .sum();
    let p_bar = Rational::new(agreeing, big_n * n * (n - 1));
    let totals: Vec<i128> = (0..k).map(|j| table.iter().map(|row| row[j] as i128).sum()).collect();
    let p_e = Rational::new(totals.iter().map(|t| t * t).sum(), (big_n * n) * (big_n * n));
    let one = Rational::from_integer(1);
    let (exact, degenerate) = if p_e == one {
        (one, true)
    } else {
        ((p_bar - p_e) / (one - p_e), false)
    };
    Ok(FleissKappa {
        kappa: to_f64(&exact),
        exact,
        mean_agreement: to_f64(&p_bar),
        chance_agreement: to_f64(&p_e),
        items: table.len(),
        raters: n as usize,
        degenerate,
    })
}

pub fn rating_counts(record: &AnnotationRecord) -> Vec<u64> {
    let mut counts = vec![0u64; CATEGORIES];
    for &r in &record.ratings {
        counts[r as usize - 1] += 1;
    }
    counts
}

pub fn fleiss_kappa(records: &[AnnotationRecord]) -> Result<FleissKappa> {
    let table: Vec<Vec<u64>> = records.iter().map(rating_counts).collect();
    fleiss_kappa_counts(&table)
}

/// Landis–Koch style label for a kappa value.
pub fn agreement_band(kappa: f64) -> &'static str {
    match kappa {
        k if k >= 0.81 => "almost perfect",
        k if k >= 0.61 => "substantial",
        k if k >= 0.41 => "moderate",
        k if k >= 0.21 => "fair",
        k if k >= 0.0 => "slight",
        _ => "poor",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Change {
    Higher,
    Equal,
    Lower,
}

/// Direction from the idiom's LMC to the mean LMC of its synonyms.
pub fn classify_change(idiom: Rational, synonym_mean: Rational) -> Change {
    match synonym_mean.cmp(&idiom) {
        std::cmp::Ordering::Greater => Change::Higher,
        std::cmp::Ordering::Equal => Change::Equal,
        std::cmp::Ordering::Less => Change::Lower,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChangeShares {
    pub higher: f64,
    pub equal: f64,
    pub lower: f64,
    /// `[higher, equal, lower]`
    pub counts: [usize; 3],
    pub compared: usize,
    /// Idioms with no annotated synonym.
    pub skipped: usize,
}

/// Compares each idiom's final LMC with the mean final LMC of its synonyms.
/// Synonyms are looked up by name in `annotated`; idioms left without any
/// annotated synonym are counted in `skipped`.
pub fn lmc_change(
    idioms: &[AnnotationRecord],
    links: &BTreeMap<String, Vec<String>>,
    annotated: &[AnnotationRecord],
) -> Result<ChangeShares> {
    let by_name: HashMap<&str, &AnnotationRecord> = annotated.iter().map(|r| (r.item.as_str(), r)).collect();
    let mut counts = [0usize; 3];
    let mut skipped = 0;
    for idiom in idioms {
        let synonyms: Vec<Rational> = links
            .get(&idiom.item)
            .into_iter()
            .flatten()
            .filter_map(|s| by_name.get(s.as_str()))
            .map(|r| final_lmc(r))
            .collect();
        if synonyms.is_empty() {
            skipped += 1;
            continue;
        }
        let mean = synonyms.iter().sum::<Rational>() / Rational::from_integer(synonyms.len() as i128);
        counts[classify_change(final_lmc(idiom), mean) as usize] += 1;
    }
    let compared: usize = counts.iter().sum();
    if compared == 0 {
        return Err(Error::Invalid("no idiom has an annotated synonym".into()));
    }
    let share = |c: usize| c as f64 / compared as f64;
    Ok(ChangeShares {
        higher: share(counts[0]),
        equal: share(counts[1]),
        lower: share(counts[2]),
        counts,
        compared,
        skipped,
    })
}

/// Reads `item,kind,r1,r2,…` rows. A leading header row starting with `item`
/// is skipped.
pub fn read_annotations<R: std::io::Read>(reader: R, path: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in csv.records().enumerate() {
        let line = i + 1;
        let row = row.map_err(|e| Error::parse(path, line, e.to_string()))?;
        if line == 1 && row.get(0) == Some("item") {
            continue;
        }
        if row.len() < 3 {
            return Err(Error::parse(path, line, format!("expected item,kind,ratings…, got {} fields", row.len())));
        }
        let kind: ItemKind = row[1].parse().map_err(|e: Error| Error::parse(path, line, e.to_string()))?;
        let ratings = row
            .iter()
            .skip(2)
            .filter(|f| !f.is_empty())
            .map(|f| f.parse::<u8>().map_err(|_| Error::parse(path, line, format!("bad rating `{f}`"))))
            .collect::<Result<Vec<_>>>()?;
        let record = AnnotationRecord::new(&row[0], kind, ratings).map_err(|e| Error::parse(path, line, e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_annotations(file, path)
}

/// Reads `idiom<TAB>syn1 syn2 …` lines; blank lines and `#` comments are
/// ignored.
pub fn read_synonym_links<R: BufRead>(reader: R, path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let mut links = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let text = line.trim_end();
        if text.trim().is_empty() || text.starts_with('#') {
            continue;
        }
        let (idiom, rest) = text
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, i + 1, "expected `idiom<TAB>synonyms`"))?;
        let synonyms: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
        if synonyms.is_empty() {
            return Err(Error::parse(path, i + 1, format!("`{idiom}` lists no synonyms")));
        }
        if links.insert(idiom.trim().to_string(), synonyms).is_some() {
            return Err(Error::parse(path, i + 1, format!("duplicate idiom `{idiom}`")));
        }
    }
    Ok(links)
}

pub fn load_synonym_links(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<String>>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_synonym_links(std::io::BufReader::new(file), path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub items: usize,
    pub final_lmc: BTreeMap<String, f64>,
    pub buckets: BucketShares,
    pub kappa: Option<FleissKappa>,
    pub agreement: Option<&'static str>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmcReport {
    pub idioms: Option<GroupSummary>,
    pub common_words: Option<GroupSummary>,
    pub change: Option<ChangeShares>,
}

fn summarize(records: &[AnnotationRecord]) -> Result<Option<GroupSummary>> {
    if records.is_empty() {
        return Ok(None);
    }
    // kappa is undefined for single-rater or ragged tables; report it as absent
    let kappa = fleiss_kappa(records).ok();
    Ok(Some(GroupSummary {
        items: records.len(),
        final_lmc: records.iter().map(|r| (r.item.clone(), to_f64(&final_lmc(r)))).collect(),
        buckets: bucket_distribution(records)?,
        agreement: kappa.as_ref().map(|k| agreement_band(k.kappa)),
        kappa,
    }))
}

/// Coverage buckets and kappa per item kind, plus the change table when
/// synonym links are given.
pub fn analyze(records: &[AnnotationRecord], links: Option<&BTreeMap<String, Vec<String>>>) -> Result<LmcReport> {
    let of_kind = |k: ItemKind| records.iter().filter(|r| r.kind == k).cloned().collect::<Vec<_>>();
    let idioms = of_kind(ItemKind::Idiom);
    let change = match links {
        Some(links) if !idioms.is_empty() => Some(lmc_change(&idioms, links, records)?),
        _ => None,
    };
    Ok(LmcReport {
        idioms: summarize(&idioms)?,
        common_words: summarize(&of_kind(ItemKind::CommonWord))?,
        change,
    })
}
