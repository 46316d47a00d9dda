//! Batch composition: the cluster-driven hard negative sampler, the uniform
//! baseline, the within-batch pair labels, and reproducible epoch plans.
//!
//! Every batch holds `batch_size / 2` distinct speakers with two distinct
//! utterances each. Speaker `k` of a batch occupies slots `2k` and `2k + 1`.

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::clustering::SpeakerClusterMap;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::seeds::{batch_stream, stream_rng};

/// What to do when the next drawn cluster holds more speakers than the
/// remaining hard budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OvershootPolicy {
    /// Subsample the last cluster to hit the budget exactly.
    #[default]
    Truncate,
    /// Add the whole cluster, capped only by the batch size.
    Allow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    /// Utterances per batch; even.
    pub batch_size: usize,
    /// Fraction of speaker slots filled from clusters.
    pub hard_ratio: f64,
    #[serde(default)]
    pub overshoot: OvershootPolicy,
}

impl BatchSpec {
    pub fn new(batch_size: usize, hard_ratio: f64) -> Result<Self> {
        let spec = Self {
            batch_size,
            hard_ratio,
            overshoot: OvershootPolicy::Truncate,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::InvalidBatchSpec(format!(
                "batch size {} must be even and at least 2",
                self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.hard_ratio) {
            return Err(Error::InvalidBatchSpec(format!(
                "hard ratio {} outside [0, 1]",
                self.hard_ratio
            )));
        }
        Ok(())
    }

    /// Distinct speakers per batch.
    pub fn speaker_slots(&self) -> usize {
        self.batch_size / 2
    }

    /// Cluster-sourced speakers per batch: `round(hard_ratio * batch_size / 2)`.
    pub fn hard_budget(&self) -> usize {
        (self.hard_ratio * self.speaker_slots() as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "provenance", content = "cluster")]
pub enum Provenance {
    Random,
    Cluster(usize),
}

impl Provenance {
    pub fn cluster(self) -> Option<usize> {
        match self {
            Provenance::Cluster(c) => Some(c),
            Provenance::Random => None,
        }
    }
}

/// Corpus indices of one batch position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub speaker: usize,
    pub utterance: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub slots: Vec<Slot>,
    /// One entry per speaker, in slot order.
    pub provenance: Vec<Provenance>,
    /// Clusters drawn for this batch, in draw order.
    pub source_clusters: Vec<usize>,
    /// Hard budget the cluster map could not cover.
    pub hard_deficit: usize,
}

impl Batch {
    pub fn num_speakers(&self) -> usize {
        self.provenance.len()
    }

    pub fn speakers(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().step_by(2).map(|s| s.speaker)
    }

    pub fn utterances(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.utterance).collect()
    }

    pub fn slot_speakers(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.speaker).collect()
    }

    pub fn cluster_sourced(&self) -> usize {
        self.provenance.iter().filter(|p| p.cluster().is_some()).count()
    }

    /// Provenance of every slot.
    pub fn slot_provenance(&self) -> Vec<Provenance> {
        self.provenance.iter().flat_map(|&p| [p, p]).collect()
    }
}

/// A cluster map resolved against a corpus: per-cluster speaker indices.
/// Speakers of the map missing from the corpus are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRosters {
    rosters: Vec<Vec<usize>>,
}

impl ClusterRosters {
    pub fn new(map: &SpeakerClusterMap, corpus: &Corpus) -> Self {
        let rosters = map
            .rosters()
            .iter()
            .map(|r| {
                let mut ids: Vec<usize> = r.iter().filter_map(|s| corpus.speaker_index(s)).collect();
                ids.sort_unstable();
                ids
            })
            .collect();
        Self { rosters }
    }

    pub fn from_indices(rosters: Vec<Vec<usize>>) -> Self {
        Self { rosters }
    }

    pub fn rosters(&self) -> &[Vec<usize>] {
        &self.rosters
    }

    pub fn k(&self) -> usize {
        self.rosters.len()
    }
}

fn push_speaker<R: Rng + ?Sized>(
    corpus: &Corpus,
    speaker: usize,
    provenance: Provenance,
    batch: &mut Batch,
    rng: &mut R,
) {
    let utts = corpus.utterances_of(speaker);
    let pick = index::sample(rng, utts.len(), 2);
    batch.slots.push(Slot {
        speaker,
        utterance: utts[pick.index(0)],
    });
    batch.slots.push(Slot {
        speaker,
        utterance: utts[pick.index(1)],
    });
    batch.provenance.push(provenance);
}

fn fill_random<R: Rng + ?Sized>(
    corpus: &Corpus,
    spec: &BatchSpec,
    taken: &[bool],
    mut batch: Batch,
    rng: &mut R,
) -> Result<Batch> {
    let need = spec.speaker_slots() - batch.num_speakers();
    let candidates: Vec<usize> = (0..corpus.num_speakers()).filter(|&s| !taken[s]).collect();
    if candidates.len() < need {
        return Err(Error::InsufficientSpeakers {
            needed: spec.speaker_slots(),
            available: corpus.num_speakers(),
        });
    }
    let picks: Vec<usize> = index::sample(rng, candidates.len(), need)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    for s in picks {
        push_speaker(corpus, s, Provenance::Random, &mut batch, rng);
    }
    Ok(batch)
}

fn check_corpus(corpus: &Corpus, spec: &BatchSpec) -> Result<()> {
    spec.validate()?;
    if corpus.num_speakers() < spec.speaker_slots() {
        return Err(Error::InsufficientSpeakers {
            needed: spec.speaker_slots(),
            available: corpus.num_speakers(),
        });
    }
    Ok(())
}

fn empty_batch(spec: &BatchSpec) -> Batch {
    Batch {
        slots: Vec::with_capacity(spec.batch_size),
        provenance: Vec::with_capacity(spec.speaker_slots()),
        source_clusters: Vec::new(),
        hard_deficit: 0,
    }
}

/// Baseline batch: `batch_size / 2` speakers drawn uniformly without
/// replacement, two distinct utterances each.
pub fn random_sample_batch<R: Rng + ?Sized>(corpus: &Corpus, spec: &BatchSpec, rng: &mut R) -> Result<Batch> {
    check_corpus(corpus, spec)?;
    let taken = vec![false; corpus.num_speakers()];
    fill_random(corpus, spec, &taken, empty_batch(spec), rng)
}

/// Cluster-driven batch. Clusters are drawn uniformly without replacement
/// and contribute their speakers until the hard budget is met; the rest of
/// the batch is filled uniformly from the remaining speakers.
///
/// With a zero budget no cluster is drawn and the random stream is consumed
/// exactly as by [`random_sample_batch`].
pub fn chns_sample_batch<R: Rng + ?Sized>(
    rosters: &ClusterRosters,
    corpus: &Corpus,
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Batch> {
    check_corpus(corpus, spec)?;
    let budget = spec.hard_budget();
    let mut batch = empty_batch(spec);
    let mut taken = vec![false; corpus.num_speakers()];

    if budget > 0 {
        let usable: Vec<usize> = (0..rosters.k())
            .filter(|&c| !rosters.rosters[c].is_empty())
            .collect();
        if usable.is_empty() {
            return Err(Error::EmptyClusterMap);
        }
        let order = index::sample(rng, usable.len(), usable.len());
        for c in order.into_iter().map(|i| usable[i]) {
            let hard = batch.num_speakers();
            if hard >= budget {
                break;
            }
            let roster = &rosters.rosters[c];
            let room = match spec.overshoot {
                OvershootPolicy::Truncate => budget - hard,
                OvershootPolicy::Allow => spec.speaker_slots() - hard,
            };
            let chosen: Vec<usize> = if roster.len() <= room {
                roster.clone()
            } else {
                let mut pick: Vec<usize> = index::sample(rng, roster.len(), room).into_vec();
                pick.sort_unstable();
                pick.into_iter().map(|i| roster[i]).collect()
            };
            for s in chosen {
                taken[s] = true;
                push_speaker(corpus, s, Provenance::Cluster(c), &mut batch, rng);
            }
            batch.source_clusters.push(c);
        }
        batch.hard_deficit = budget.saturating_sub(batch.num_speakers());
        if batch.hard_deficit > 0 {
            log::warn!(
                "cluster map covers only {} of {} hard speaker slots",
                batch.num_speakers(),
                budget
            );
        }
    }
    fill_random(corpus, spec, &taken, batch, rng)
}

/// Same-cluster pairs of different speakers are hard negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairLabel {
    #[serde(rename = "SELF")]
    SelfPair,
    #[serde(rename = "P")]
    Positive,
    #[serde(rename = "HN")]
    HardNegative,
    #[serde(rename = "N")]
    Negative,
}

impl PairLabel {
    pub fn is_negative(self) -> bool {
        matches!(self, PairLabel::HardNegative | PairLabel::Negative)
    }

    pub fn code(self) -> u8 {
        match self {
            PairLabel::SelfPair => 0,
            PairLabel::Positive => 1,
            PairLabel::HardNegative => 2,
            PairLabel::Negative => 3,
        }
    }
}

/// Square matrix of pair labels over batch slots, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLabelMatrix {
    n: usize,
    labels: Vec<PairLabel>,
}

impl PairLabelMatrix {
    /// Labels from per-slot speaker ids and optional source clusters.
    pub fn from_slots(speakers: &[usize], clusters: &[Option<usize>]) -> Self {
        assert_eq!(speakers.len(), clusters.len());
        let n = speakers.len();
        let mut labels = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                labels.push(if i == j {
                    PairLabel::SelfPair
                } else if speakers[i] == speakers[j] {
                    PairLabel::Positive
                } else if clusters[i].is_some() && clusters[i] == clusters[j] {
                    PairLabel::HardNegative
                } else {
                    PairLabel::Negative
                });
            }
        }
        Self { n, labels }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> PairLabel {
        self.labels[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[PairLabel] {
        &self.labels[i * self.n..(i + 1) * self.n]
    }

    pub fn count(&self, label: PairLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn codes(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.code()).collect()
    }
}

pub fn pair_labels(batch: &Batch) -> PairLabelMatrix {
    let clusters: Vec<Option<usize>> = batch.slot_provenance().iter().map(|p| p.cluster()).collect();
    PairLabelMatrix::from_slots(&batch.slot_speakers(), &clusters)
}

/// Batch source for a run.
#[derive(Debug, Clone, Copy)]
pub enum Sampler<'a> {
    Random,
    Chns(&'a ClusterRosters),
}

impl Sampler<'_> {
    pub fn sample<R: Rng + ?Sized>(&self, corpus: &Corpus, spec: &BatchSpec, rng: &mut R) -> Result<Batch> {
        match self {
            Sampler::Random => random_sample_batch(corpus, spec, rng),
            Sampler::Chns(r) => chns_sample_batch(r, corpus, spec, rng),
        }
    }
}

/// Batches per epoch: `floor(utterances / batch_size)`.
pub fn batches_per_epoch(corpus: &Corpus, spec: &BatchSpec) -> usize {
    corpus.num_utterances() / spec.batch_size
}

/// Batch `index` of `epoch`, drawn from its own counter-based stream.
pub fn plan_batch(
    sampler: Sampler<'_>,
    corpus: &Corpus,
    spec: &BatchSpec,
    seed: u64,
    epoch: u32,
    index: u32,
) -> Result<Batch> {
    let mut rng = stream_rng(seed, batch_stream(epoch, index));
    sampler.sample(corpus, spec, &mut rng)
}

/// All batches of one epoch.
pub fn epoch_plan(
    sampler: Sampler<'_>,
    corpus: &Corpus,
    spec: &BatchSpec,
    seed: u64,
    epoch: u32,
) -> Result<Vec<Batch>> {
    (0..batches_per_epoch(corpus, spec) as u32)
        .map(|i| plan_batch(sampler, corpus, spec, seed, epoch, i))
        .collect()
}

/// One JSON-lines record of a batch plan export.
pub fn batch_record(batch: &Batch, corpus: &Corpus, epoch: u32, index: u32) -> serde_json::Value {
    let speakers: Vec<serde_json::Value> = batch
        .slots
        .chunks(2)
        .zip(&batch.provenance)
        .map(|(pair, prov)| {
            json!({
                "id": corpus.speaker_id(pair[0].speaker),
                "utterances": pair.iter().map(|s| corpus.utterance_id(s.utterance)).collect::<Vec<_>>(),
                "provenance": match prov { Provenance::Random => "random", Provenance::Cluster(_) => "cluster" },
                "cluster": prov.cluster(),
            })
        })
        .collect();
    json!({
        "epoch": epoch,
        "index": index,
        "speakers": speakers,
        "source_clusters": batch.source_clusters,
    })
}

pub fn write_batch_plan(path: &Path, corpus: &Corpus, epoch: u32, batches: &[Batch]) -> Result<()> {
    let mut out = Vec::new();
    for (i, b) in batches.iter().enumerate() {
        serde_json::to_writer(&mut out, &batch_record(b, corpus, epoch, i as u32))?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusManifest, SpeakerEntry, SpeakerId, UtteranceEntry, UtteranceId};
    use crate::seeds::stream_rng;
    use ndarray::Array2;
    use std::collections::{HashMap, HashSet};

    fn corpus(speakers: usize, utts: usize) -> Corpus {
        let mut sp = Vec::new();
        let mut ut = Vec::new();
        for s in 0..speakers {
            let id = SpeakerId::new(format!("spk{s:03}")).unwrap();
            sp.push(SpeakerEntry {
                id: id.clone(),
                attributes: Default::default(),
            });
            for u in 0..utts {
                ut.push(UtteranceEntry {
                    id: UtteranceId::new(format!("spk{s:03}-{u}")).unwrap(),
                    speaker_id: id.clone(),
                    row_index: s * utts + u,
                });
            }
        }
        Corpus::new(
            CorpusManifest {
                speakers: sp,
                utterances: ut,
                dim: 1,
            },
            Array2::zeros((speakers * utts, 1)),
        )
        .unwrap()
    }

    fn check_shape(b: &Batch, spec: &BatchSpec, corpus: &Corpus) {
        assert_eq!(b.slots.len(), spec.batch_size);
        let speakers: HashSet<usize> = b.speakers().collect();
        assert_eq!(speakers.len(), spec.speaker_slots());
        for pair in b.slots.chunks(2) {
            assert_eq!(pair[0].speaker, pair[1].speaker);
            assert_ne!(pair[0].utterance, pair[1].utterance);
            for s in pair {
                assert_eq!(corpus.speaker_of(s.utterance), s.speaker);
            }
        }
    }

    #[test]
    fn spec_validation_and_budget() {
        assert!(BatchSpec::new(7, 0.5).is_err());
        assert!(BatchSpec::new(0, 0.5).is_err());
        assert!(BatchSpec::new(8, 1.5).is_err());
        assert!(BatchSpec::new(8, -0.1).is_err());
        assert_eq!(BatchSpec::new(1300, 1.0).unwrap().hard_budget(), 650);
        assert_eq!(BatchSpec::new(20, 0.8).unwrap().hard_budget(), 8);
        assert_eq!(BatchSpec::new(64, 0.5).unwrap().hard_budget(), 16);
    }

    #[test]
    fn random_batch_covers_exact_corpus() {
        let c = corpus(10, 3);
        let spec = BatchSpec::new(20, 0.0).unwrap();
        let b = random_sample_batch(&c, &spec, &mut stream_rng(1, 0)).unwrap();
        check_shape(&b, &spec, &c);
        let all: HashSet<usize> = b.speakers().collect();
        assert_eq!(all, (0..10).collect());
        assert!(b.provenance.iter().all(|p| *p == Provenance::Random));
    }

    #[test]
    fn insufficient_speakers() {
        let c = corpus(5, 3);
        let spec = BatchSpec::new(20, 0.0).unwrap();
        assert!(matches!(
            random_sample_batch(&c, &spec, &mut stream_rng(1, 0)),
            Err(Error::InsufficientSpeakers { .. })
        ));
    }

    #[test]
    fn zero_budget_chns_equals_random_sampler() {
        let c = corpus(40, 4);
        let rosters = ClusterRosters::from_indices(vec![(0..20).collect(), (20..40).collect()]);
        let spec = BatchSpec::new(16, 0.0).unwrap();
        for seed in 0..20 {
            let a = chns_sample_batch(&rosters, &c, &spec, &mut stream_rng(seed, 0)).unwrap();
            let b = random_sample_batch(&c, &spec, &mut stream_rng(seed, 0)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn empty_cluster_map_is_an_error() {
        let c = corpus(10, 3);
        let spec = BatchSpec::new(8, 0.5).unwrap();
        let rosters = ClusterRosters::from_indices(vec![vec![], vec![]]);
        assert!(matches!(
            chns_sample_batch(&rosters, &c, &spec, &mut stream_rng(0, 0)),
            Err(Error::EmptyClusterMap)
        ));
    }

    #[test]
    fn truncation_hits_budget_on_two_cluster_toy_map() {
        // 20 speakers, clusters of 6 and 7 (rest unclustered), BS = 20 so the
        // hard budget is round(0.8 * 10) = 8: the first drawn cluster (6 or 7)
        // falls short, the second is truncated to fill the remainder.
        let c = corpus(20, 3);
        let rosters = ClusterRosters::from_indices(vec![(0..6).collect(), (6..13).collect()]);
        let spec = BatchSpec::new(20, 0.8).unwrap();
        for seed in 0..50 {
            let b = chns_sample_batch(&rosters, &c, &spec, &mut stream_rng(seed, 3)).unwrap();
            check_shape(&b, &spec, &c);
            assert_eq!(b.cluster_sourced(), 8);
            assert_eq!(b.source_clusters.len(), 2);
            let first = b.source_clusters[0];
            let first_size = rosters.rosters()[first].len();
            let from_first = b.provenance.iter().filter(|p| **p == Provenance::Cluster(first)).count();
            assert_eq!(from_first, first_size);
            assert_eq!(8 - first_size, b.cluster_sourced() - from_first);
            // cluster speakers come first, in contiguous blocks
            assert!(b.provenance[..8].iter().all(|p| p.cluster().is_some()));
            assert!(b.provenance[8..].iter().all(|p| *p == Provenance::Random));
        }
    }

    #[test]
    fn overshoot_policy_keeps_whole_cluster() {
        let c = corpus(20, 3);
        let rosters = ClusterRosters::from_indices(vec![(0..6).collect(), (6..13).collect()]);
        let mut spec = BatchSpec::new(20, 0.8).unwrap();
        spec.overshoot = OvershootPolicy::Allow;
        let b = chns_sample_batch(&rosters, &c, &spec, &mut stream_rng(0, 0)).unwrap();
        check_shape(&b, &spec, &c);
        assert_eq!(b.cluster_sourced(), 10);
    }

    #[test]
    fn cluster_larger_than_budget_is_subsampled() {
        let c = corpus(30, 3);
        let rosters = ClusterRosters::from_indices(vec![(0..30).collect()]);
        let spec = BatchSpec::new(20, 1.0).unwrap();
        let b = chns_sample_batch(&rosters, &c, &spec, &mut stream_rng(0, 0)).unwrap();
        check_shape(&b, &spec, &c);
        assert_eq!(b.cluster_sourced(), 10);
        assert_eq!(b.source_clusters, vec![0]);
    }

    #[test]
    fn deficit_is_reported_when_map_is_too_small() {
        let c = corpus(20, 3);
        let rosters = ClusterRosters::from_indices(vec![vec![0, 1], vec![2]]);
        let spec = BatchSpec::new(20, 1.0).unwrap();
        let b = chns_sample_batch(&rosters, &c, &spec, &mut stream_rng(0, 0)).unwrap();
        check_shape(&b, &spec, &c);
        assert_eq!(b.cluster_sourced(), 3);
        assert_eq!(b.hard_deficit, 7);
    }

    #[test]
    fn pair_labels_random_pair_of_speakers() {
        let b = Batch {
            slots: vec![
                Slot { speaker: 0, utterance: 0 },
                Slot { speaker: 0, utterance: 1 },
                Slot { speaker: 1, utterance: 2 },
                Slot { speaker: 1, utterance: 3 },
            ],
            provenance: vec![Provenance::Random, Provenance::Random],
            source_clusters: vec![],
            hard_deficit: 0,
        };
        let m = pair_labels(&b);
        use PairLabel::*;
        let expected = [
            [SelfPair, Positive, Negative, Negative],
            [Positive, SelfPair, Negative, Negative],
            [Negative, Negative, SelfPair, Positive],
            [Negative, Negative, Positive, SelfPair],
        ];
        for i in 0..4 {
            assert_eq!(m.row(i), &expected[i]);
        }
    }

    #[test]
    fn pair_labels_hand_enumerated_cluster_block() {
        // speakers 0..3 from cluster 7, speaker 3 random
        let slots: Vec<Slot> = (0..8).map(|i| Slot { speaker: i / 2, utterance: i }).collect();
        let b = Batch {
            slots,
            provenance: vec![
                Provenance::Cluster(7),
                Provenance::Cluster(7),
                Provenance::Cluster(7),
                Provenance::Random,
            ],
            source_clusters: vec![7],
            hard_deficit: 0,
        };
        let m = pair_labels(&b);
        use PairLabel::*;
        let expected: [&str; 8] = [
            "SPHHHHNN", "PSHHHHNN", "HHSPHHNN", "HHPSHHNN", "HHHHSPNN", "HHHHPSNN", "NNNNNNSP",
            "NNNNNNPS",
        ];
        for (i, row) in expected.iter().enumerate() {
            for (j, ch) in row.chars().enumerate() {
                let want = match ch {
                    'S' => SelfPair,
                    'P' => Positive,
                    'H' => HardNegative,
                    _ => Negative,
                };
                assert_eq!(m.get(i, j), want, "({i},{j})");
            }
        }
        assert_eq!(m.count(HardNegative), 24);
    }

    #[test]
    fn pair_label_block_structure_at_hard_ratio_point_eight() {
        let c = corpus(20, 3);
        let rosters = ClusterRosters::from_indices(vec![(0..6).collect(), (6..13).collect()]);
        let spec = BatchSpec::new(20, 0.8).unwrap();
        let b = chns_sample_batch(&rosters, &c, &spec, &mut stream_rng(4, 0)).unwrap();
        let m = pair_labels(&b);
        let c1 = b.provenance.iter().filter(|p| **p == Provenance::Cluster(b.source_clusters[0])).count();
        // C1 block, then C2 block, then the random remainder
        for i in 0..20 {
            for j in 0..20 {
                let (si, sj) = (i / 2, j / 2);
                let block = |s: usize| if s < c1 { 0 } else if s < 8 { 1 } else { 2 };
                let want = if i == j {
                    PairLabel::SelfPair
                } else if si == sj {
                    PairLabel::Positive
                } else if block(si) == block(sj) && block(si) < 2 {
                    PairLabel::HardNegative
                } else {
                    PairLabel::Negative
                };
                assert_eq!(m.get(i, j), want);
            }
        }
    }

    #[test]
    fn speaker_inclusion_is_uniform() {
        let c = corpus(100, 2);
        let spec = BatchSpec::new(20, 0.0).unwrap();
        let mut counts = vec![0u32; 100];
        let draws = 10_000;
        for i in 0..draws {
            let b = random_sample_batch(&c, &spec, &mut stream_rng(77, i)).unwrap();
            b.speakers().for_each(|s| counts[s] += 1);
        }
        // each speaker included with p = 10/100
        let expected = draws as f64 * 0.1;
        let chi2: f64 = counts
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        // chi-square, 99 dof: mean 99, sd ~14; 3 sd bound
        assert!(chi2 < 99.0 + 3.0 * (2.0f64 * 99.0).sqrt(), "chi2 = {chi2}");
        let sd = (expected * 0.9).sqrt();
        assert!(counts.iter().all(|&o| (o as f64 - expected).abs() < 4.0 * sd));
    }

    #[test]
    fn epoch_plan_is_reproducible_and_varies_by_epoch() {
        let c = corpus(100, 10);
        let spec = BatchSpec::new(100, 0.0).unwrap();
        let plan = epoch_plan(Sampler::Random, &c, &spec, 5, 0).unwrap();
        assert_eq!(plan.len(), 10);
        assert_eq!(plan, epoch_plan(Sampler::Random, &c, &spec, 5, 0).unwrap());
        let again = plan_batch(Sampler::Random, &c, &spec, 5, 0, 3).unwrap();
        assert_eq!(again, plan[3]);
        let mut seen: HashMap<Vec<usize>, u32> = HashMap::new();
        for epoch in 0..100 {
            let b = plan_batch(Sampler::Random, &c, &spec, 5, epoch, 0).unwrap();
            *seen.entry(b.utterances()).or_default() += 1;
        }
        assert_eq!(seen.len(), 100);
    }

    #[test]
    fn batch_record_layout() {
        let c = corpus(4, 2);
        let spec = BatchSpec::new(4, 0.5).unwrap();
        let rosters = ClusterRosters::from_indices(vec![vec![0, 1], vec![2, 3]]);
        let b = chns_sample_batch(&rosters, &c, &spec, &mut stream_rng(0, 0)).unwrap();
        let rec = batch_record(&b, &c, 2, 9);
        assert_eq!(rec["epoch"], 2);
        assert_eq!(rec["index"], 9);
        assert_eq!(rec["speakers"].as_array().unwrap().len(), 2);
        assert_eq!(rec["speakers"][0]["provenance"], "cluster");
        assert_eq!(rec["speakers"][1]["provenance"], "random");
        assert!(rec["speakers"][1]["cluster"].is_null());
        assert_eq!(rec["speakers"][0]["utterances"].as_array().unwrap().len(), 2);
        assert_eq!(rec["source_clusters"].as_array().unwrap().len(), 1);
    }
}
