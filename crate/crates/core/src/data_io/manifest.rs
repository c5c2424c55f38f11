use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FuseError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = FuseError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(FuseError::Data(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Infrared-visible or medical pairs. Decides which source lends its chroma
/// to the fused output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    #[default]
    Ivf,
    Mif,
}

impl FromStr for Modality {
    type Err = FuseError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ivf" => Ok(Modality::Ivf),
            "mif" => Ok(Modality::Mif),
            other => Err(FuseError::Data(format!("unknown modality `{other}`"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Ivf => "ivf",
            Modality::Mif => "mif",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ManifestEntry {
    pub path_a: PathBuf,
    pub path_b: PathBuf,
    pub split: Split,
}

/// Tab-separated pair list, one `<path_a>\t<path_b>\t<split>` record per
/// line. Blank lines and `#` comments are ignored, except a
/// `# modality: ivf|mif` directive. Relative paths resolve against the
/// manifest's directory. Entries are kept sorted by path.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub modality: Modality,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FuseError::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            FuseError::Data(msg) => FuseError::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut modality = Modality::default();
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.trim_start().strip_prefix('#') {
                if let Some(value) = comment.trim().strip_prefix("modality:") {
                    modality = value.parse()?;
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(FuseError::Data(format!(
                    "line {}: expected 3 tab-separated fields, found {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let resolve = |p: &str| {
                let p = Path::new(p.trim());
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                }
            };
            entries.push(ManifestEntry {
                path_a: resolve(fields[0]),
                path_b: resolve(fields[1]),
                split: fields[2]
                    .parse()
                    .map_err(|e| FuseError::Data(format!("line {}: {e}", lineno + 1)))?,
            });
        }
        entries.sort();
        Ok(Self { modality, entries })
    }

    /// Serializes with paths relative to `base` where possible.
    pub fn to_tsv(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut out = format!("# modality: {}\n", self.modality);
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", rel(&e.path_a), rel(&e.path_b), e.split));
        }
        out
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Checks that every referenced file exists.
    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            for p in [&e.path_a, &e.path_b] {
                if !p.is_file() {
                    return Err(FuseError::Data(format!("manifest references missing file {}", p.display())));
                }
            }
        }
        Ok(())
    }
}
