use std::path::{Path, PathBuf};

/// File names inside a checkpoint directory.
pub struct Layout {
    dir: PathBuf,
}

impl Layout {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Checkpoint stem of a stage (`vqvae`, `text`, `audio`).
    pub fn stem(&self, stage: &str) -> PathBuf {
        self.dir.join(stage)
    }

    pub fn exists(&self, stage: &str) -> bool {
        self.stem(stage).with_extension("json").is_file()
            && self.stem(stage).with_extension("bin").is_file()
    }

    pub fn loss_csv(&self, stage: &str) -> PathBuf {
        self.dir.join(format!("{stage}_loss.csv"))
    }

    pub fn run_manifest(&self, stage: &str) -> PathBuf {
        self.dir.join(format!("{stage}_run.json"))
    }

    pub fn bank(&self) -> PathBuf {
        self.dir.join("bank")
    }
}
