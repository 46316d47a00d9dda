//! Speaker and utterance identifiers, the JSON corpus manifest, and an
//! indexed in-memory corpus pairing the manifest with its feature matrix.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpeakerId(String);

impl SpeakerId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::InvalidManifest("empty speaker id".into()));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SpeakerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UtteranceId(String);

impl UtteranceId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::InvalidManifest("empty utterance id".into()));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for UtteranceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEntry {
    pub id: SpeakerId,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEntry {
    pub id: UtteranceId,
    pub speaker_id: SpeakerId,
    /// Row of this utterance in the feature file.
    pub row_index: usize,
}

/// Corpus description as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub speakers: Vec<SpeakerEntry>,
    pub utterances: Vec<UtteranceEntry>,
    pub dim: usize,
}

impl CorpusManifest {
    /// Structural checks: unique non-empty ids, every utterance pointing at a
    /// listed speaker, positive dimension.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidManifest("dim must be positive".into()));
        }
        let mut speakers = HashSet::new();
        for s in &self.speakers {
            if s.id.as_str().is_empty() {
                return Err(Error::InvalidManifest("empty speaker id".into()));
            }
            if !speakers.insert(&s.id) {
                return Err(Error::InvalidManifest(format!("duplicate speaker `{}`", s.id)));
            }
        }
        let mut utts = HashSet::new();
        for u in &self.utterances {
            if u.id.as_str().is_empty() {
                return Err(Error::InvalidManifest("empty utterance id".into()));
            }
            if !utts.insert(&u.id) {
                return Err(Error::InvalidManifest(format!("duplicate utterance `{}`", u.id)));
            }
            if !speakers.contains(&u.speaker_id) {
                return Err(Error::InvalidManifest(format!(
                    "utterance `{}` references unknown speaker `{}`",
                    u.id, u.speaker_id
                )));
            }
        }
        Ok(())
    }

    /// Drops speakers with fewer than two utterances (no positive pair is
    /// possible for them) along with their utterances. Returns the dropped ids.
    pub fn prune_ineligible(&mut self) -> Vec<SpeakerId> {
        let mut counts: HashMap<&SpeakerId, usize> = HashMap::new();
        for u in &self.utterances {
            *counts.entry(&u.speaker_id).or_default() += 1;
        }
        let dropped: Vec<SpeakerId> = self
            .speakers
            .iter()
            .filter(|s| counts.get(&s.id).copied().unwrap_or(0) < 2)
            .map(|s| s.id.clone())
            .collect();
        if !dropped.is_empty() {
            let gone: HashSet<&SpeakerId> = dropped.iter().collect();
            self.speakers.retain(|s| !gone.contains(&s.id));
            self.utterances.retain(|u| !gone.contains(&u.speaker_id));
            log::warn!(
                "excluded {} speaker(s) with fewer than 2 utterances",
                dropped.len()
            );
        }
        dropped
    }
}

/// A validated manifest with its feature rows and lookup tables.
///
/// Speakers and utterances are addressed by their position in the manifest
/// (`speaker index`, `utterance index`); ids are resolved through the
/// accessors.
#[derive(Debug, Clone)]
pub struct Corpus {
    manifest: CorpusManifest,
    features: Array2<f64>,
    speaker_utts: Vec<Vec<usize>>,
    utt_speaker: Vec<usize>,
    speaker_lookup: HashMap<SpeakerId, usize>,
    utt_lookup: HashMap<UtteranceId, usize>,
}

impl Corpus {
    /// Builds the corpus, pruning ineligible speakers first.
    pub fn new(mut manifest: CorpusManifest, features: Array2<f64>) -> Result<Self> {
        manifest.validate()?;
        manifest.prune_ineligible();
        if features.ncols() != manifest.dim {
            return Err(Error::dim(manifest.dim, features.ncols()));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
        let speaker_lookup: HashMap<SpeakerId, usize> = manifest
            .speakers
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        let mut speaker_utts = vec![Vec::new(); manifest.speakers.len()];
        let mut utt_speaker = Vec::with_capacity(manifest.utterances.len());
        let mut utt_lookup = HashMap::with_capacity(manifest.utterances.len());
        for (ui, u) in manifest.utterances.iter().enumerate() {
            if u.row_index >= features.nrows() {
                return Err(Error::InvalidManifest(format!(
                    "utterance `{}` row {} out of range ({} rows)",
                    u.id,
                    u.row_index,
                    features.nrows()
                )));
            }
            let si = speaker_lookup[&u.speaker_id];
            speaker_utts[si].push(ui);
            utt_speaker.push(si);
            utt_lookup.insert(u.id.clone(), ui);
        }
        Ok(Self {
            manifest,
            features,
            speaker_utts,
            utt_speaker,
            speaker_lookup,
            utt_lookup,
        })
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn num_speakers(&self) -> usize {
        self.manifest.speakers.len()
    }

    pub fn num_utterances(&self) -> usize {
        self.manifest.utterances.len()
    }

    pub fn speaker_id(&self, speaker: usize) -> &SpeakerId {
        &self.manifest.speakers[speaker].id
    }

    pub fn speaker_index(&self, id: &SpeakerId) -> Option<usize> {
        self.speaker_lookup.get(id).copied()
    }

    pub fn utterance_id(&self, utt: usize) -> &UtteranceId {
        &self.manifest.utterances[utt].id
    }

    pub fn utterance_index(&self, id: &UtteranceId) -> Option<usize> {
        self.utt_lookup.get(id).copied()
    }

    pub fn utterances_of(&self, speaker: usize) -> &[usize] {
        &self.speaker_utts[speaker]
    }

    pub fn speaker_of(&self, utt: usize) -> usize {
        self.utt_speaker[utt]
    }

    pub fn attribute(&self, speaker: usize, key: &str) -> Option<&str> {
        self.manifest.speakers[speaker]
            .attributes
            .get(key)
            .map(String::as_str)
    }

    /// Feature row of an utterance.
    pub fn feature(&self, utt: usize) -> ArrayView1<'_, f64> {
        self.features.row(self.manifest.utterances[utt].row_index)
    }

    /// Stacks the feature rows of `utts` into a matrix.
    pub fn gather(&self, utts: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((utts.len(), self.dim()));
        for (mut row, &u) in out.rows_mut().into_iter().zip(utts) {
            row.assign(&self.feature(u));
        }
        out
    }

    /// Restricts the corpus to the given speakers (by index), keeping the
    /// full feature matrix so row indices stay valid.
    pub fn subset(&self, speakers: &[usize]) -> Result<Corpus> {
        let keep: HashSet<&SpeakerId> = speakers.iter().map(|&s| self.speaker_id(s)).collect();
        let manifest = CorpusManifest {
            speakers: self
                .manifest
                .speakers
                .iter()
                .filter(|s| keep.contains(&s.id))
                .cloned()
                .collect(),
            utterances: self
                .manifest
                .utterances
                .iter()
                .filter(|u| keep.contains(&u.speaker_id))
                .cloned()
                .collect(),
            dim: self.manifest.dim,
        };
        Corpus::new(manifest, self.features.clone())
    }
}
