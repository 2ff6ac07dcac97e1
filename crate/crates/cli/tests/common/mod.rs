//! Scripted corpus shared by the CLI and acceptance tests.
//!
//! Every reply is a pure function of the sample id, so fixtures written to
//! different directories are byte-identical.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_collabvd"));
    c.env_remove("RUST_LOG");
    c
}

pub fn run(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn collabvd")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[track_caller]
pub fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(&o),
        stderr(&o)
    );
    o
}

pub fn vulnerable(i: u64) -> bool {
    (i * 37) % 100 < 46
}

pub fn detector_says_vulnerable(i: u64) -> bool {
    vulnerable(i) ^ (i % 7 == 3)
}

/// Sample whose first reply is evasive; the re-ask resolves it.
pub fn evasive_once(i: u64) -> bool {
    i % 25 == 12
}

/// Sample whose every reply is evasive.
pub fn evasive_always(i: u64) -> bool {
    i % 50 == 37
}

/// Phase I answer after re-asks, or `None` when it stays unknown.
pub fn llm_initial(i: u64) -> Option<bool> {
    if evasive_always(i) {
        None
    } else {
        Some(vulnerable(i) ^ (i % 4 == 1))
    }
}

/// Ids whose Phase I answers disagree.
pub fn disagreements(n: u64) -> BTreeSet<u64> {
    (0..n)
        .filter(|&i| llm_initial(i).is_some_and(|c| c != detector_says_vulnerable(i)))
        .collect()
}

pub fn code(i: u64) -> String {
    let body = match i % 3 {
        0 => "memcpy(tmp, buf, n);".to_string(),
        1 => "if (n < 16) memcpy(tmp, buf, n);".to_string(),
        _ => format!(
            "for (int k = 0; k <= n; k++) tmp[k % {}] = buf[k];",
            16 + i % 5
        ),
    };
    format!("int f{i}(const char *buf, int n) {{\n    char tmp[16];\n    {body}\n    return tmp[0];\n}}")
}

fn yes(i: u64) -> String {
    format!("Yes, the copy into tmp in f{i} can overflow the 16-byte buffer.")
}

const NO: &str = "No, the length stays within the buffer.";
const EVASIVE: &str = "Hard to say without more context.";

/// Replies indexed by user turn.
pub fn replies(i: u64) -> Vec<String> {
    if evasive_always(i) {
        return vec![EVASIVE.to_string(); 4];
    }
    let mut out = Vec::new();
    if evasive_once(i) {
        out.push(EVASIVE.to_string());
    }
    let initial = llm_initial(i).unwrap();
    out.push(if initial { yes(i) } else { NO.to_string() });
    // Recheck answer: even ids defer to the hint, odd ids hold their ground.
    let after = if i % 2 == 0 {
        detector_says_vulnerable(i)
    } else {
        initial
    };
    out.push(if after {
        format!("Yes, on recheck f{i} still copies n bytes into a 16-byte buffer.")
    } else {
        "No, on recheck the copy is bounded.".to_string()
    });
    out
}

pub struct Fixture {
    pub dir: PathBuf,
    pub n: u64,
}

impl Fixture {
    /// Writes `data.jsonl`, `detector.jsonl` and `chat.jsonl` under `dir`.
    pub fn write(dir: &Path, n: u64) -> Fixture {
        fs::create_dir_all(dir).unwrap();
        let mut data = String::new();
        let mut det = String::new();
        let mut chat = String::new();
        for i in 0..n {
            let d = detector_says_vulnerable(i);
            data += &json!({"idx": i, "func": code(i), "target": vulnerable(i) as u8}).to_string();
            det += &json!({
                "idx": i,
                "verdict": if d { "vulnerable" } else { "clean" },
                "score": if d { 0.83 } else { 0.17 },
            })
            .to_string();
            chat += &json!({"idx": i, "replies": replies(i)}).to_string();
            for s in [&mut data, &mut det, &mut chat] {
                s.push('\n');
            }
        }
        fs::write(dir.join("data.jsonl"), data).unwrap();
        fs::write(dir.join("detector.jsonl"), det).unwrap();
        fs::write(dir.join("chat.jsonl"), chat).unwrap();
        Fixture {
            dir: dir.to_path_buf(),
            n,
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn ingest(&self) -> Output {
        ok(run(
            &self.dir,
            &[
                "ingest",
                "--data",
                "data.jsonl",
                "--manifest",
                "out/split.json",
            ],
        ))
    }

    pub fn assess(&self, mode: &str, store: &str) -> Output {
        run(
            &self.dir,
            &[
                "assess",
                "--data",
                "data.jsonl",
                "--manifest",
                "out/split.json",
                "--detector",
                "script:detector.jsonl",
                "--llm",
                "script:chat.jsonl",
                "--hint-mode",
                mode,
                "--store",
                store,
                "--concurrency",
                "4",
            ],
        )
    }

    pub fn synthesize(&self, store: &str, out_dir: &str) -> Output {
        run(
            &self.dir,
            &[
                "synthesize",
                "--data",
                "data.jsonl",
                "--manifest",
                "out/split.json",
                "--store",
                store,
                "--out-dir",
                out_dir,
            ],
        )
    }
}
