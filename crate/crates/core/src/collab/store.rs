//! Append-only assessment store.
//!
//! Line 1 is a header naming the configuration that produced the records;
//! every following line is one assessment. A later line for the same id
//! supersedes earlier ones. `compact` rewrites the file with one record
//! per id in ascending id order, which is the canonical byte form.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Assessment, HintMode, Stage, Status};
use crate::backends::DetectorReply;
use crate::dialogue::{LlmVerdict, ParsedReply};
use crate::error::{Error, Result};
use crate::{SampleId, Verdict};

const STORE_KIND: &str = "assessment-store";
const STORE_FORMAT: u32 = 1;

/// Identity of the run that owns a store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreMeta {
    /// Digest of every setting that affects record contents.
    pub config_digest: String,
    /// Digest of the Phase I settings alone (shared across hint modes).
    pub phase1_digest: String,
    pub template_version: String,
    /// `None` for stores that only ever hold Phase I results.
    pub hint_mode: Option<HintMode>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    store: String,
    format: u32,
    #[serde(flatten)]
    meta: StoreMeta,
}

#[derive(Serialize, Deserialize)]
struct Record {
    idx: SampleId,
    z: Verdict,
    z_score: f64,
    c1: LlmVerdict,
    n1: Option<String>,
    c2: LlmVerdict,
    n2: Option<String>,
    refined: bool,
    hint_mode: HintMode,
    prompt_hash: String,
    refine_prompt_hash: Option<String>,
    stage: Stage,
    status: Status,
    r1: String,
    r2: Option<String>,
}

impl From<&Assessment> for Record {
    fn from(a: &Assessment) -> Self {
        Record {
            idx: a.id,
            z: a.detector.verdict,
            z_score: a.detector.score,
            c1: a.llm_initial.verdict,
            n1: a.llm_initial.description.clone(),
            c2: a.llm_final.verdict,
            n2: a.llm_final.description.clone(),
            refined: a.refined,
            hint_mode: a.hint_mode,
            prompt_hash: a.prompt_hash.clone(),
            refine_prompt_hash: a.refine_prompt_hash.clone(),
            stage: a.stage,
            status: a.status,
            r1: a.reply_initial.clone(),
            r2: a.reply_final.clone(),
        }
    }
}

impl From<Record> for Assessment {
    fn from(r: Record) -> Self {
        Assessment {
            id: r.idx,
            detector: DetectorReply {
                verdict: r.z,
                score: r.z_score,
            },
            llm_initial: ParsedReply {
                verdict: r.c1,
                description: r.n1,
            },
            llm_final: ParsedReply {
                verdict: r.c2,
                description: r.n2,
            },
            reply_initial: r.r1,
            reply_final: r.r2,
            refined: r.refined,
            hint_mode: r.hint_mode,
            stage: r.stage,
            status: r.status,
            prompt_hash: r.prompt_hash,
            refine_prompt_hash: r.refine_prompt_hash,
        }
    }
}

fn record_line(a: &Assessment) -> String {
    let mut line = serde_json::to_string(&Record::from(a)).expect("record serializes");
    line.push('\n');
    line
}

impl Assessment {
    /// Digest of the assessment's store record.
    pub fn digest(&self) -> String {
        crate::digest::sha256_hex(record_line(self))
    }
}

fn header_line(meta: &StoreMeta) -> String {
    let mut line = serde_json::to_string(&Header {
        store: STORE_KIND.into(),
        format: STORE_FORMAT,
        meta: meta.clone(),
    })
    .expect("header serializes");
    line.push('\n');
    line
}

#[derive(Debug)]
pub struct AssessmentStore {
    path: Option<PathBuf>,
    meta: StoreMeta,
    records: BTreeMap<SampleId, Assessment>,
    writer: Option<BufWriter<File>>,
}

impl AssessmentStore {
    pub fn in_memory(meta: StoreMeta) -> Self {
        Self {
            path: None,
            meta,
            records: BTreeMap::new(),
            writer: None,
        }
    }

    /// Opens `path` for appending, creating it if absent.
    ///
    /// An existing store must carry exactly `meta`; anything else is a stale
    /// cache and is refused.
    pub fn open(path: impl AsRef<Path>, meta: StoreMeta) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(path, header_line(&meta)).map_err(|e| Error::io(path, e))?;
            let mut store = Self::in_memory(meta);
            store.path = Some(path.to_path_buf());
            store.writer = Some(append_writer(path)?);
            return Ok(store);
        }
        let (found, records, torn) = read_store(path)?;
        if found != meta {
            return Err(Error::StaleStore {
                path: path.to_path_buf(),
                found: describe(&found),
                expected: describe(&meta),
            });
        }
        let mut store = Self {
            path: Some(path.to_path_buf()),
            meta,
            records,
            writer: None,
        };
        if torn {
            log::warn!("{}: dropping torn final line", path.display());
            store.rewrite()?;
        }
        store.writer = Some(append_writer(path)?);
        Ok(store)
    }

    /// Loads a store read-only, taking its metadata from the header.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (meta, records, _) = read_store(path)?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            meta,
            records,
            writer: None,
        })
    }

    pub fn meta(&self) -> &StoreMeta {
        &self.meta
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, id: SampleId) -> Option<&Assessment> {
        self.records.get(&id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Assessment> {
        self.records.values()
    }

    /// Records the assessment, superseding any earlier one for its id.
    pub fn append(&mut self, assessment: Assessment) -> Result<()> {
        if let (Some(w), Some(path)) = (self.writer.as_mut(), self.path.as_ref()) {
            w.write_all(record_line(&assessment).as_bytes())
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path, e))?;
        }
        self.records.insert(assessment.id, assessment);
        Ok(())
    }

    /// Canonical serialization: header, then one record per id in id order.
    pub fn to_canonical_string(&self) -> String {
        let mut out = header_line(&self.meta);
        for a in self.records.values() {
            out.push_str(&record_line(a));
        }
        out
    }

    /// Rewrites the backing file in canonical form.
    pub fn compact(&mut self) -> Result<()> {
        if self.path.is_none() {
            return Ok(());
        }
        self.writer = None;
        self.rewrite()?;
        self.writer = Some(append_writer(self.path.as_ref().expect("path"))?);
        Ok(())
    }

    fn rewrite(&self) -> Result<()> {
        let path = self.path.as_ref().expect("file-backed store");
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_canonical_string()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

fn describe(meta: &StoreMeta) -> String {
    format!(
        "config {} / template v{} / hint mode {}",
        crate::digest::short(&meta.config_digest),
        meta.template_version,
        meta.hint_mode.map_or("-", HintMode::as_str)
    )
}

fn append_writer(path: &Path) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

/// Returns header, latest record per id, and whether a torn final line was dropped.
fn read_store(path: &Path) -> Result<(StoreMeta, BTreeMap<SampleId, Assessment>, bool)> {
    let bad = |line: usize, msg: String| Error::Store {
        path: path.to_path_buf(),
        msg: format!("line {line}: {msg}"),
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut lines = Vec::new();
    let mut buf = String::new();
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        lines.push(buf.clone());
    }
    let Some(first) = lines.first() else {
        return Err(bad(1, "missing header".into()));
    };
    let header: Header =
        serde_json::from_str(first.trim_end()).map_err(|e| bad(1, e.to_string()))?;
    if header.store != STORE_KIND || header.format != STORE_FORMAT {
        return Err(bad(
            1,
            format!("not a format-{STORE_FORMAT} assessment store"),
        ));
    }
    let mut records = BTreeMap::new();
    let mut torn = false;
    let last = lines.len() - 1;
    for (i, line) in lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Record>(line.trim_end()) {
            Ok(r) => {
                records.insert(r.idx, Assessment::from(r));
            }
            Err(_) if i == last && !line.ends_with('\n') => torn = true,
            Err(e) => return Err(bad(i + 1, e.to_string())),
        }
    }
    Ok((header.meta, records, torn))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(mode: HintMode) -> StoreMeta {
        StoreMeta {
            config_digest: "c0ffee".into(),
            phase1_digest: "beef".into(),
            template_version: "1".into(),
            hint_mode: Some(mode),
        }
    }

    fn assessment(id: SampleId) -> Assessment {
        Assessment {
            id,
            detector: DetectorReply::from_score(0.75),
            llm_initial: ParsedReply::clean(),
            llm_final: ParsedReply::vulnerable("off-by-one in loop bound"),
            reply_initial: "No".into(),
            reply_final: Some("Yes, off-by-one in loop bound".into()),
            refined: true,
            hint_mode: HintMode::Detector,
            stage: Stage::Final,
            status: Status::Ok,
            prompt_hash: format!("h{id}"),
            refine_prompt_hash: Some(format!("g{id}")),
        }
    }

    #[test]
    fn reload_reproduces_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let mut s = AssessmentStore::open(&path, meta(HintMode::Detector)).unwrap();
        for id in [5, 2, 9] {
            s.append(assessment(id)).unwrap();
        }
        let mut updated = assessment(2);
        updated.llm_final = ParsedReply::clean();
        s.append(updated.clone()).unwrap();
        drop(s);

        let back = AssessmentStore::open(&path, meta(HintMode::Detector)).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.get(2), Some(&updated));
        assert_eq!(back.get(9), Some(&assessment(9)));
    }

    #[test]
    fn stale_store_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        AssessmentStore::open(&path, meta(HintMode::Detector)).unwrap();
        let err = AssessmentStore::open(&path, meta(HintMode::None)).unwrap_err();
        assert!(matches!(err, Error::StaleStore { .. }), "{err}");
    }

    #[test]
    fn compact_is_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        let mut sa = AssessmentStore::open(&a, meta(HintMode::Detector)).unwrap();
        let mut sb = AssessmentStore::open(&b, meta(HintMode::Detector)).unwrap();
        for id in [3, 1, 2] {
            sa.append(assessment(id)).unwrap();
        }
        for id in [2, 3, 1, 3] {
            sb.append(assessment(id)).unwrap();
        }
        sa.compact().unwrap();
        sb.compact().unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(fs::read_to_string(&a).unwrap(), sa.to_canonical_string());
    }

    #[test]
    fn torn_tail_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let mut s = AssessmentStore::open(&path, meta(HintMode::Detector)).unwrap();
        s.append(assessment(1)).unwrap();
        s.append(assessment(2)).unwrap();
        drop(s);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() - 20]).unwrap();

        let mut s = AssessmentStore::open(&path, meta(HintMode::Detector)).unwrap();
        assert_eq!(s.len(), 1);
        s.append(assessment(2)).unwrap();
        drop(s);
        let s = AssessmentStore::open(&path, meta(HintMode::Detector)).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let mut s = AssessmentStore::open(&path, meta(HintMode::Detector)).unwrap();
        s.append(assessment(1)).unwrap();
        drop(s);
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("garbage\n");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            AssessmentStore::load(&path),
            Err(Error::Store { .. })
        ));
    }

    #[test]
    fn record_field_names() {
        let line = record_line(&assessment(4));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        for key in [
            "idx",
            "z",
            "z_score",
            "c1",
            "n1",
            "c2",
            "n2",
            "refined",
            "hint_mode",
            "prompt_hash",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["z"], "vulnerable");
        assert_eq!(v["c1"], "clean");
        assert!(v["n1"].is_null());
    }
}
