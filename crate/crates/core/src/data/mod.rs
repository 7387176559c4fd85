//! Corpus ingestion, feature files, vocabulary and batching.

mod batch;
mod features;
mod manifest;
mod synth;
mod vocab;

pub use batch::{pad_batch, Batch, BatchError, TokenMatrix};
pub use features::{read_feature_file, write_feature_file, FeatureError, FeatureSet};
pub use manifest::{load_manifest, save_manifest, DialogueRecord, ManifestError, Split};
pub use synth::{assign_splits, grammar_terminals, synth_dataset, Scene, SynthCorpus, ATTR_ACTIONS, ATTR_ACTORS, ATTR_OBJECTS, ATTR_ROOMS, ATTR_SOUNDS};
pub use vocab::{build_vocabulary, detokenize, tokenize, tokenize_text, TokenSequence, Vocabulary, VocabError, EOS_ID, PAD_ID, SOS_ID, UNK_ID};

use std::collections::HashMap;
use std::path::Path;

/// Feature tensors keyed by video id.
pub struct FeatureStore {
    map: HashMap<String, FeatureSet>,
}

impl FeatureStore {
    pub fn new() -> Self {
        FeatureStore { map: HashMap::new() }
    }

    pub fn insert(&mut self, video_id: &str, features: FeatureSet) {
        self.map.insert(video_id.to_string(), features);
    }

    pub fn get(&self, video_id: &str) -> Option<&FeatureSet> {
        self.map.get(video_id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Load `{video_id}.vis.qacf` / `{video_id}.aud.qacf` pairs for every
    /// record from `dir`.
    pub fn load_for(
        dir: &Path,
        records: &[DialogueRecord],
    ) -> Result<Self, FeatureError> {
        let mut store = FeatureStore::new();
        for rec in records {
            let vis = read_feature_file(&dir.join(format!("{}.vis.qacf", rec.video_id)))?;
            let aud = read_feature_file(&dir.join(format!("{}.aud.qacf", rec.video_id)))?;
            store.insert(&rec.video_id, FeatureSet::from_arrays(vis, aud)?);
        }
        Ok(store)
    }

    /// Write one `.vis.qacf` and one `.aud.qacf` per video id into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<(), FeatureError> {
        let mut ids: Vec<&String> = self.map.keys().collect();
        ids.sort();
        for id in ids {
            let fs = &self.map[id];
            write_feature_file(&dir.join(format!("{id}.vis.qacf")), &fs.visual_dyn())?;
            write_feature_file(&dir.join(format!("{id}.aud.qacf")), &fs.audio_dyn())?;
        }
        Ok(())
    }
}

impl Default for FeatureStore {
    fn default() -> Self {
        Self::new()
    }
}

/// A loaded corpus: records per split plus their features.
pub struct Dataset {
    pub train: Vec<DialogueRecord>,
    pub val: Vec<DialogueRecord>,
    pub test: Vec<DialogueRecord>,
    pub features: FeatureStore,
}

impl Dataset {
    pub fn records(&self, split: Split) -> &[DialogueRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Load `train.json` / `val.json` / `test.json` (each optional) plus the
    /// `features/` subdirectory from a data directory.
    pub fn load_dir(dir: &Path) -> Result<Self, DataError> {
        let load = |name: &str, split: Split| -> Result<Vec<DialogueRecord>, DataError> {
            let p = dir.join(name);
            if p.exists() {
                Ok(load_manifest(&p, split)?)
            } else {
                Ok(Vec::new())
            }
        };
        let train = load("train.json", Split::Train)?;
        let val = load("val.json", Split::Val)?;
        let test = load("test.json", Split::Test)?;
        if train.is_empty() && val.is_empty() && test.is_empty() {
            return Err(DataError::EmptyDataDir(dir.display().to_string()));
        }
        let fdir = dir.join("features");
        let mut features = FeatureStore::new();
        for split in [&train, &val, &test] {
            let loaded = FeatureStore::load_for(&fdir, split)?;
            for (k, v) in loaded.map {
                features.map.insert(k, v);
            }
        }
        Ok(Dataset { train, val, test, features })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("no manifest files found in {0}")]
    EmptyDataDir(String),
}
