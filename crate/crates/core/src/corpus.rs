//! Dataset ingestion and deterministic stratified splitting.
//!
//! Records are line-delimited JSON objects with `idx`, `func` and `target`
//! fields (the Devign/Reveal community layout). Label polarity is declared
//! by the caller and normalized to [`Verdict`] on load.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{SampleId, Verdict};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

/// Class order used when distributing rounding remainders.
const CLASS_ORDER: [Verdict; 2] = [Verdict::Vulnerable, Verdict::Clean];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSample {
    pub id: SampleId,
    pub code: String,
    pub label: Verdict,
}

impl CodeSample {
    pub fn new(id: SampleId, code: impl Into<String>, label: Verdict) -> Self {
        Self {
            id,
            code: code.into(),
            label,
        }
    }
}

/// What a raw `target` of 1 means in a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelPolarity {
    #[default]
    OneIsVulnerable,
    OneIsClean,
}

impl LabelPolarity {
    pub fn decode(self, raw: u8) -> Option<Verdict> {
        let v = Verdict::from_target(raw)?;
        Some(match self {
            LabelPolarity::OneIsVulnerable => v,
            LabelPolarity::OneIsClean => v.flip(),
        })
    }

    pub fn encode(self, verdict: Verdict) -> u8 {
        match self {
            LabelPolarity::OneIsVulnerable => verdict.as_target(),
            LabelPolarity::OneIsClean => verdict.flip().as_target(),
        }
    }
}

impl FromStr for LabelPolarity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "one-is-vulnerable" | "1-is-vulnerable" | "vulnerable" => Ok(Self::OneIsVulnerable),
            "one-is-clean" | "1-is-clean" | "clean" => Ok(Self::OneIsClean),
            other => Err(format!(
                "unknown polarity `{other}` (expected one-is-vulnerable or one-is-clean)"
            )),
        }
    }
}

/// An ordered set of samples with unique ids, kept in ascending id order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    samples: Vec<CodeSample>,
    pub source_name: String,
}

impl Corpus {
    pub fn new(source_name: impl Into<String>, mut samples: Vec<CodeSample>) -> Result<Self> {
        samples.sort_by_key(|s| s.id);
        for pair in samples.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::DuplicateId(pair[0].id));
            }
        }
        if let Some(s) = samples.iter().find(|s| s.code.is_empty()) {
            return Err(Error::EmptyCode(s.id));
        }
        Ok(Self {
            samples,
            source_name: source_name.into(),
        })
    }

    pub fn samples(&self) -> &[CodeSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: SampleId) -> Option<&CodeSample> {
        self.samples
            .binary_search_by_key(&id, |s| s.id)
            .ok()
            .map(|i| &self.samples[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = SampleId> + '_ {
        self.samples.iter().map(|s| s.id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, CodeSample> {
        self.samples.iter()
    }

    pub fn count(&self, label: Verdict) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    pub fn truths(&self) -> BTreeMap<SampleId, Verdict> {
        self.samples.iter().map(|s| (s.id, s.label)).collect()
    }

    /// Sub-corpus with the given ids, all of which must exist.
    pub fn select(&self, ids: &[SampleId]) -> Result<Corpus> {
        let samples = ids
            .iter()
            .map(|&id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::ManifestMismatch(format!("id {id} not in corpus")))
            })
            .collect::<Result<Vec<_>>>()?;
        Corpus::new(self.source_name.clone(), samples)
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a CodeSample;
    type IntoIter = std::slice::Iter<'a, CodeSample>;

    fn into_iter(self) -> Self::IntoIter {
        self.samples.iter()
    }
}

#[derive(Deserialize)]
struct RawRecord {
    idx: Option<serde_json::Value>,
    func: Option<serde_json::Value>,
    target: Option<serde_json::Value>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    idx: SampleId,
    func: &'a str,
    target: u8,
}

/// Loads a line-delimited dataset file, normalizing labels per `polarity`.
pub fn load_corpus(path: impl AsRef<Path>, polarity: LabelPolarity) -> Result<Corpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let malformed = |line: usize, msg: String| Error::MalformedRecord {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut samples = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
        let id = raw
            .idx
            .as_ref()
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| malformed(line_no, "missing or non-integer `idx`".into()))?;
        let code = raw
            .func
            .as_ref()
            .and_then(serde_json::Value::as_str)
            .ok_or_else(|| malformed(line_no, "missing or non-string `func`".into()))?;
        let target = raw
            .target
            .as_ref()
            .and_then(serde_json::Value::as_u64)
            .filter(|t| *t <= 1)
            .ok_or_else(|| malformed(line_no, "`target` must be 0 or 1".into()))?;
        if code.is_empty() {
            return Err(malformed(line_no, "empty `func`".into()));
        }
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id));
        }
        let label = polarity.decode(target as u8).expect("binary target");
        samples.push(CodeSample::new(id, code, label));
    }
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let source = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Corpus::new(source, samples)
}

/// Writes a corpus in dataset layout, encoding labels per `polarity`.
pub fn write_corpus(
    corpus: &Corpus,
    path: impl AsRef<Path>,
    polarity: LabelPolarity,
) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in corpus {
        let rec = OutRecord {
            idx: s.id,
            func: &s.code,
            target: polarity.encode(s.label),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Fraction of Vulnerable samples.
pub fn class_ratio(corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(corpus.count(Verdict::Vulnerable) as f64 / corpus.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Valid,
    Test,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Train, Part::Valid, Part::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Valid => "valid",
            Part::Test => "test",
        }
    }
}

impl FromStr for Part {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Part::Train),
            "valid" | "validation" => Ok(Part::Valid),
            "test" => Ok(Part::Test),
            other => Err(format!("unknown split part `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitCorpus {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl SplitCorpus {
    pub fn part(&self, part: Part) -> &Corpus {
        match part {
            Part::Train => &self.train,
            Part::Valid => &self.valid,
            Part::Test => &self.test,
        }
    }

    pub fn parts(&self) -> impl Iterator<Item = (Part, &Corpus)> {
        Part::ALL.into_iter().map(move |p| (p, self.part(p)))
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All samples across the three parts in ascending id order.
    pub fn all_samples(&self) -> Vec<&CodeSample> {
        let mut all: Vec<_> = self.parts().flat_map(|(_, c)| c.iter()).collect();
        all.sort_by_key(|s| s.id);
        all
    }

    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            source: self.train.source_name.clone(),
            seed: self.seed,
            ratios: self.ratios,
            train: self.train.ids().collect(),
            valid: self.valid.ids().collect(),
            test: self.test.ids().collect(),
        }
    }
}

/// Re-loadable record of a split's membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub source: String,
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<SampleId>,
    pub valid: Vec<SampleId>,
    pub test: Vec<SampleId>,
}

impl SplitManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds the split over `corpus`; the manifest must partition it exactly.
    pub fn apply(&self, corpus: &Corpus) -> Result<SplitCorpus> {
        let mut listed = BTreeSet::new();
        for id in self.train.iter().chain(&self.valid).chain(&self.test) {
            if !listed.insert(*id) {
                return Err(Error::ManifestMismatch(format!("id {id} listed twice")));
            }
        }
        let corpus_ids: BTreeSet<_> = corpus.ids().collect();
        if listed != corpus_ids {
            let extra: Vec<_> = listed.difference(&corpus_ids).take(10).collect();
            let absent: Vec<_> = corpus_ids.difference(&listed).take(10).collect();
            return Err(Error::ManifestMismatch(format!(
                "ids not in corpus {extra:?}, corpus ids not in manifest {absent:?}"
            )));
        }
        Ok(SplitCorpus {
            train: corpus.select(&self.train)?,
            valid: corpus.select(&self.valid)?,
            test: corpus.select(&self.test)?,
            seed: self.seed,
            ratios: self.ratios,
        })
    }
}

fn validate_ratios(ratios: [f64; 3]) -> Result<()> {
    let ok = ratios.iter().all(|r| r.is_finite() && *r >= 0.0)
        && (ratios.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidRatios(ratios))
    }
}

const FRAC_EPS: f64 = 1e-9;

/// Every floor/ceiling rounding of `count · ratios` that sums to `count`,
/// most preferred first. Preference is largest-remainder order: a larger
/// total of rounded-up fractions wins, then rounding up the lower part index.
fn roundings(count: usize, ratios: &[f64; 3]) -> Vec<[usize; 3]> {
    let mut floors = [0usize; 3];
    let mut fracs = [0f64; 3];
    for j in 0..3 {
        let quota = count as f64 * ratios[j];
        let floor = (quota + FRAC_EPS).floor();
        floors[j] = floor as usize;
        fracs[j] = (quota - floor).max(0.0);
    }
    let mut out: Vec<([bool; 3], f64, [usize; 3])> = Vec::new();
    for mask in 0u8..8 {
        let up = [mask & 4 != 0, mask & 2 != 0, mask & 1 != 0];
        if (0..3).any(|j| up[j] && fracs[j] <= FRAC_EPS) {
            continue;
        }
        let alloc: [usize; 3] = std::array::from_fn(|j| floors[j] + up[j] as usize);
        if alloc.iter().sum::<usize>() != count {
            continue;
        }
        let gain: f64 = (0..3).filter(|&j| up[j]).map(|j| fracs[j]).sum();
        out.push((up, gain, alloc));
    }
    out.sort_by(|a, b| {
        if (a.1 - b.1).abs() > FRAC_EPS {
            b.1.total_cmp(&a.1)
        } else {
            b.0.cmp(&a.0)
        }
    });
    out.into_iter().map(|(_, _, alloc)| alloc).collect()
}

/// Largest-remainder apportionment of `total` over `ratios`, ties to the lower index.
pub(crate) fn largest_remainder(total: usize, ratios: &[f64; 3]) -> [usize; 3] {
    roundings(total, ratios)[0]
}

/// Per-class allocation of the split: `[class][part]` in [`CLASS_ORDER`].
///
/// Part sizes follow the largest-remainder apportionment of the whole
/// corpus. Among the class roundings that reproduce those sizes, the one
/// closest to the Vulnerable class's own largest-remainder allocation is
/// taken. If no rounding matches the sizes, each class is apportioned on
/// its own.
pub(crate) fn stratified_allocation(
    class_counts: [usize; 2],
    ratios: &[f64; 3],
) -> [[usize; 3]; 2] {
    let [pos, neg] = class_counts;
    let targets = largest_remainder(pos + neg, ratios);
    let neg_options = roundings(neg, ratios);
    let pos_options = roundings(pos, ratios);
    for v in &pos_options {
        let c: Option<Vec<usize>> = (0..3).map(|j| targets[j].checked_sub(v[j])).collect();
        if let Some(c) = c {
            let c = [c[0], c[1], c[2]];
            if neg_options.contains(&c) {
                return [*v, c];
            }
        }
    }
    log::debug!("no rounding of {class_counts:?} matches part sizes {targets:?}");
    [pos_options[0], neg_options[0]]
}

/// Stratified train/valid/test split with seeded membership.
pub fn split_stratified(corpus: &Corpus, ratios: [f64; 3], seed: u64) -> Result<SplitCorpus> {
    validate_ratios(ratios)?;
    let by_class: Vec<Vec<SampleId>> = CLASS_ORDER
        .iter()
        .map(|&c| {
            corpus
                .iter()
                .filter(|s| s.label == c)
                .map(|s| s.id)
                .collect()
        })
        .collect();
    for (class, ids) in CLASS_ORDER.iter().zip(&by_class) {
        if ids.is_empty() {
            log::warn!(
                "corpus `{}` has no {class} samples; stratification is degenerate",
                corpus.source_name
            );
        }
    }
    let alloc = stratified_allocation([by_class[0].len(), by_class[1].len()], &ratios);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<SampleId>; 3] = Default::default();
    for (mut ids, counts) in by_class.into_iter().zip(alloc) {
        ids.shuffle(&mut rng);
        let mut rest = ids.as_slice();
        for (part, n) in parts.iter_mut().zip(counts) {
            let (head, tail) = rest.split_at(n);
            part.extend_from_slice(head);
            rest = tail;
        }
    }
    let [train, valid, test] = parts;
    Ok(SplitCorpus {
        train: corpus.select(&train)?,
        valid: corpus.select(&valid)?,
        test: corpus.select(&test)?,
        seed,
        ratios,
    })
}
