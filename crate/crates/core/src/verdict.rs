use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Dataset-level sample identifier (the `idx` column).
pub type SampleId = u64;

/// Binary vulnerability verdict.
///
/// Every label, detector reply and LLM answer is mapped onto this enum at
/// the boundary, so no comparison downstream depends on a 0/1 convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Vulnerable,
    Clean,
}

impl Verdict {
    /// Canonical serialized encoding: 1 = Vulnerable.
    pub fn as_target(self) -> u8 {
        match self {
            Verdict::Vulnerable => 1,
            Verdict::Clean => 0,
        }
    }

    pub fn from_target(target: u8) -> Option<Self> {
        match target {
            1 => Some(Verdict::Vulnerable),
            0 => Some(Verdict::Clean),
            _ => None,
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Verdict::Vulnerable => Verdict::Clean,
            Verdict::Clean => Verdict::Vulnerable,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Vulnerable => "vulnerable",
            Verdict::Clean => "clean",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verdict {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vulnerable" | "1" | "yes" => Ok(Verdict::Vulnerable),
            "clean" | "0" | "no" => Ok(Verdict::Clean),
            other => Err(format!("unknown verdict `{other}`")),
        }
    }
}
