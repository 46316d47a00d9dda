//! File names inside a run directory.

use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn clusters_dir(&self) -> PathBuf {
        self.root.join("clusters")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.model_dir().join("checkpoint.bin")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.model_dir().join(format!("epoch-{epoch:03}.bin"))
    }

    pub fn train_log(&self) -> PathBuf {
        self.model_dir().join("train_log.csv")
    }

    pub fn epoch_log(&self) -> PathBuf {
        self.model_dir().join("epochs.csv")
    }

    pub fn final_map(&self) -> PathBuf {
        self.model_dir().join("cluster_map.json")
    }

    pub fn epoch_map(&self, epoch: usize) -> PathBuf {
        self.model_dir().join(format!("cluster_map-epoch-{epoch:03}.json"))
    }

    pub fn batch_plan(&self, epoch: usize) -> PathBuf {
        self.model_dir().join(format!("batch_plan-epoch-{epoch:03}.jsonl"))
    }

    pub fn warm_checkpoint(&self) -> PathBuf {
        self.clusters_dir().join("warm.bin")
    }

    pub fn voiceprints(&self) -> (PathBuf, PathBuf) {
        let d = self.clusters_dir();
        (d.join("voiceprints.bin"), d.join("voiceprints.json"))
    }

    pub fn cluster_map(&self) -> PathBuf {
        self.clusters_dir().join("cluster_map.json")
    }

    pub fn trials(&self) -> PathBuf {
        self.eval_dir().join("trials.txt")
    }

    pub fn scores(&self) -> PathBuf {
        self.eval_dir().join("scores.csv")
    }

    pub fn metrics(&self) -> PathBuf {
        self.eval_dir().join("report.json")
    }

    pub fn grid(&self) -> PathBuf {
        self.root.join("grid.csv")
    }
}

/// Corpus files inside a corpus directory.
#[derive(Debug, Clone)]
pub struct CorpusDir {
    root: PathBuf,
}

impl CorpusDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn train(&self) -> (PathBuf, PathBuf) {
        (self.root.join("manifest.json"), self.root.join("features.bin"))
    }

    pub fn eval(&self) -> (PathBuf, PathBuf) {
        (self.root.join("eval_manifest.json"), self.root.join("eval_features.bin"))
    }

    pub fn stats(&self) -> PathBuf {
        self.root.join("stats.json")
    }
}
