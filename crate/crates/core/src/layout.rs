//! On-disk layout of an experiment directory.
//!
//! ```text
//! config.json            config snapshot, written before any computation
//! config.sha256          hash of the snapshot, checked on resume
//! .lock                  single-writer lock
//! cache.jsonl            LLM response cache
//! questions/{train,test}.json
//! generations/gen_NNN.json
//! matches/gen_NNN.jsonl
//! transcripts/gen_NNN.jsonl
//! ratings/gen_NNN.json
//! checkpoints/swiss_NNN.json
//! evaluation/{panel,comparison,diversity}.json
//! staticgen_pool.json   StaticGen runs only
//! reports/
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn config_hash(&self) -> PathBuf {
        self.root.join("config.sha256")
    }

    pub fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }

    pub fn cache(&self) -> PathBuf {
        self.root.join("cache.jsonl")
    }

    pub fn questions(&self, split: &str) -> PathBuf {
        self.root.join("questions").join(format!("{split}.json"))
    }

    pub fn generation(&self, g: usize) -> PathBuf {
        self.root.join("generations").join(format!("gen_{g:03}.json"))
    }

    pub fn matches(&self, g: usize) -> PathBuf {
        self.root.join("matches").join(format!("gen_{g:03}.jsonl"))
    }

    pub fn transcripts(&self, g: usize) -> PathBuf {
        self.root.join("transcripts").join(format!("gen_{g:03}.jsonl"))
    }

    pub fn ratings(&self, g: usize) -> PathBuf {
        self.root.join("ratings").join(format!("gen_{g:03}.json"))
    }

    pub fn swiss_checkpoint(&self, g: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("swiss_{g:03}.json"))
    }

    pub fn panel(&self) -> PathBuf {
        self.root.join("evaluation").join("panel.json")
    }

    pub fn comparison(&self) -> PathBuf {
        self.root.join("evaluation").join("comparison.json")
    }

    pub fn diversity(&self) -> PathBuf {
        self.root.join("evaluation").join("diversity.json")
    }

    pub fn staticgen_pool(&self) -> PathBuf {
        self.root.join("staticgen_pool.json")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn create_dirs(&self) -> io::Result<()> {
        for d in [
            "questions",
            "generations",
            "matches",
            "transcripts",
            "ratings",
            "checkpoints",
            "evaluation",
            "reports",
        ] {
            fs::create_dir_all(self.root.join(d))?;
        }
        Ok(())
    }

    /// Indices of generation state files present, ascending.
    pub fn generations(&self) -> io::Result<Vec<usize>> {
        let dir = self.root.join("generations");
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in fs::read_dir(dir)? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(n) = name
                .strip_prefix("gen_")
                .and_then(|s| s.strip_suffix(".json"))
                .and_then(|s| s.parse().ok())
            {
                out.push(n);
            }
        }
        out.sort_unstable();
        Ok(out)
    }
}

/// Write via a temporary sibling and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
