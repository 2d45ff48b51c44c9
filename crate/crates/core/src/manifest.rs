//! Corpus manifest: one `speaker<TAB>utterance<TAB>path<TAB>split` per line.
//! Relative paths resolve against the manifest's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluator::Trial;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub speaker: String,
    pub utterance: String,
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && !id.contains(['/', '\\', '\t', '\n']) && id != "." && id != ".."
}

impl CorpusManifest {
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |why: String| Error::format(format!("manifest line {}: {why}", n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad("expected `speaker<TAB>utterance<TAB>path<TAB>split`".into()));
            }
            let split = Split::parse(f[3]).ok_or_else(|| bad(format!("unknown split {:?}", f[3])))?;
            for id in [f[0], f[1]] {
                if !valid_id(id) {
                    return Err(bad(format!("invalid id {id:?}")));
                }
            }
            entries.push(ManifestEntry {
                speaker: f[0].to_string(),
                utterance: f[1].to_string(),
                path: PathBuf::from(f[2]),
                split,
            });
        }
        let manifest = CorpusManifest {
            entries,
            root: root.to_path_buf(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new(""));
        CorpusManifest::parse(&text, root).map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }

    pub fn format(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\t{}\n", e.speaker, e.utterance, e.path.display(), e.split.as_str()))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, self.format().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.utterance.as_str()) {
                return Err(Error::format(format!("duplicate utterance id {}", e.utterance)));
            }
        }
        Ok(())
    }

    /// Every trial id must be a test-split utterance.
    pub fn check_trials(&self, trials: &[Trial]) -> Result<()> {
        let test: BTreeSet<&str> = self
            .entries
            .iter()
            .filter(|e| e.split == Split::Test)
            .map(|e| e.utterance.as_str())
            .collect();
        let missing: BTreeSet<&str> = trials
            .iter()
            .flat_map(|t| [t.a.as_str(), t.b.as_str()])
            .filter(|id| !test.contains(id))
            .collect();
        if !missing.is_empty() {
            let list: Vec<&str> = missing.into_iter().take(5).collect();
            return Err(Error::format(format!(
                "trial list references utterances not in the test split: {}",
                list.join(", ")
            )));
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}
