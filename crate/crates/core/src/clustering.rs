//! Speaker voiceprints and their K-Means partition into groups of similar
//! speakers.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, SpeakerId};
use crate::embedding::{centroid, normalize, squared_distance, Embedding};
use crate::error::{Error, Result};
use crate::io;
use crate::seeds::mix_seed;

/// Default number of utterances averaged into a voiceprint.
pub const VOICEPRINT_UTTERANCES: usize = 10;

/// Per-speaker centroid of sampled utterance embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Voiceprint {
    pub speaker: SpeakerId,
    pub vector: Vec<f64>,
    /// Number of utterances averaged.
    pub m: usize,
}

/// Picks `min(m, available)` distinct utterances of `speaker` uniformly.
pub fn sample_voiceprint_utterances<R: Rng + ?Sized>(
    corpus: &Corpus,
    speaker: usize,
    m: usize,
    rng: &mut R,
) -> Vec<usize> {
    let utts = corpus.utterances_of(speaker);
    let take = m.min(utts.len());
    let mut picked: Vec<usize> = index::sample(rng, utts.len(), take)
        .into_iter()
        .map(|i| utts[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Voiceprint of one speaker given a per-utterance embedding lookup.
pub fn compute_voiceprint<R, F>(
    corpus: &Corpus,
    speaker: &SpeakerId,
    lookup: F,
    m: usize,
    rng: &mut R,
) -> Result<Voiceprint>
where
    R: Rng + ?Sized,
    F: Fn(usize) -> Result<Embedding>,
{
    let si = corpus
        .speaker_index(speaker)
        .ok_or_else(|| Error::UnknownSpeaker(speaker.to_string()))?;
    if corpus.utterances_of(si).is_empty() || m == 0 {
        return Err(Error::NoUtterances(speaker.to_string()));
    }
    let picked = sample_voiceprint_utterances(corpus, si, m, rng);
    let embeddings = picked.iter().map(|&u| lookup(u)).collect::<Result<Vec<_>>>()?;
    Ok(Voiceprint {
        speaker: speaker.clone(),
        vector: centroid(&embeddings)?,
        m: picked.len(),
    })
}

/// Voiceprints for every corpus speaker, in manifest order. `embed` maps a
/// feature matrix to one embedding row per input row.
pub fn compute_voiceprints<F>(corpus: &Corpus, embed: F, m: usize, seed: u64) -> Result<Vec<Voiceprint>>
where
    F: Fn(&Array2<f64>) -> Result<Array2<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<Vec<usize>> = (0..corpus.num_speakers())
        .map(|s| sample_voiceprint_utterances(corpus, s, m, &mut rng))
        .collect();
    let flat: Vec<usize> = picks.iter().flatten().copied().collect();
    let embedded = embed(&corpus.gather(&flat))?;
    let mut row = 0;
    picks
        .iter()
        .enumerate()
        .map(|(s, utts)| {
            let rows: Vec<Vec<f64>> = (row..row + utts.len())
                .map(|r| embedded.row(r).to_vec())
                .collect();
            row += utts.len();
            if rows.is_empty() {
                return Err(Error::NoUtterances(corpus.speaker_id(s).to_string()));
            }
            Ok(Voiceprint {
                speaker: corpus.speaker_id(s).clone(),
                vector: centroid(&rows)?,
                m: rows.len(),
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct VoiceprintSidecar {
    speakers: Vec<SpeakerId>,
    utterances_used: Vec<usize>,
}

/// Writes voiceprints as a feature file plus a JSON sidecar naming the
/// speaker of each row.
pub fn write_voiceprints(bin: &Path, sidecar: &Path, vps: &[Voiceprint]) -> Result<()> {
    let dim = vps.first().map_or(0, |v| v.vector.len());
    let mut m = Array2::zeros((vps.len(), dim));
    for (mut row, vp) in m.rows_mut().into_iter().zip(vps) {
        if vp.vector.len() != dim {
            return Err(Error::dim(dim, vp.vector.len()));
        }
        row.assign(&ndarray::ArrayView1::from(&vp.vector[..]));
    }
    io::write_features(bin, &m)?;
    io::write_json(
        sidecar,
        &VoiceprintSidecar {
            speakers: vps.iter().map(|v| v.speaker.clone()).collect(),
            utterances_used: vps.iter().map(|v| v.m).collect(),
        },
    )
}

pub fn read_voiceprints(bin: &Path, sidecar: &Path) -> Result<Vec<Voiceprint>> {
    let m = io::read_features(bin)?;
    let side: VoiceprintSidecar = io::read_json(sidecar)?;
    if side.speakers.len() != m.nrows() || side.utterances_used.len() != m.nrows() {
        return Err(Error::Format {
            path: sidecar.to_path_buf(),
            reason: "sidecar row count does not match voiceprint file".into(),
        });
    }
    Ok(side
        .speakers
        .into_iter()
        .zip(side.utterances_used)
        .zip(m.rows())
        .map(|((speaker, m), row)| Voiceprint {
            speaker,
            vector: row.to_vec(),
            m,
        })
        .collect())
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let dim = points.first().ok_or(Error::EmptyList)?.len();
    for p in points {
        if p.len() != dim {
            return Err(Error::dim(dim, p.len()));
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("k-means input"));
        }
    }
    Ok(dim)
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|x| (x + 0.0).to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn require_k(points: &[Vec<f64>], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidConfig("cluster count must be at least 1".into()));
    }
    let distinct = distinct_count(points);
    if k > distinct {
        return Err(Error::TooFewPoints {
            needed: k,
            found: distinct,
        });
    }
    Ok(())
}

/// k-means++ seeding: the first centroid is uniform, each next one is drawn
/// with probability proportional to the squared distance to the nearest
/// centroid chosen so far.
pub fn kmeans_plus_plus_init<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    check_points(points)?;
    require_k(points, k)?;
    let first = rng.random_range(0..points.len());
    let mut centroids = vec![points[first].clone()];
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        // Positive total weight is guaranteed by k <= distinct points.
        let dist = WeightedIndex::new(&nearest).map_err(|_| Error::TooFewPoints {
            needed: k,
            found: centroids.len(),
        })?;
        let next = dist.sample(rng);
        centroids.push(points[next].clone());
        let c = centroids.last().unwrap();
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, c));
        }
    }
    Ok(centroids)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

/// A fitted K-Means model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub k: usize,
    pub inertia: f64,
    pub iterations_run: usize,
    pub seed: u64,
    /// Labels of the fitted points under `centroids`.
    pub labels: Vec<usize>,
    /// Objective after every assignment step, first entry from the seeding.
    pub inertia_history: Vec<f64>,
}

fn nearest_centroid(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(p, c);
        // strict: ties keep the lowest index
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Assignment step followed by empty-cluster repair. Every empty cluster is
/// reseeded at the point farthest from its current centroid, then points are
/// reassigned, until no cluster is empty.
fn assign_with_repair(points: &[Vec<f64>], centroids: &mut [Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let k = centroids.len();
    for _ in 0..(10 * k + 100) {
        let (labels, dists): (Vec<usize>, Vec<f64>) =
            points.iter().map(|p| nearest_centroid(p, centroids)).unzip();
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        if counts.iter().all(|&c| c > 0) {
            return Ok((labels, dists.iter().sum()));
        }
        let mut labels = labels;
        let mut dists = dists;
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let far = (0..points.len())
                .filter(|&i| counts[labels[i]] > 1 && dists[i] > 0.0)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                })
                .ok_or(Error::TooFewPoints {
                    needed: k,
                    found: distinct_count(points),
                })?;
            centroids[j] = points[far].clone();
            counts[labels[far]] -= 1;
            labels[far] = j;
            dists[far] = 0.0;
            counts[j] = 1;
        }
    }
    Err(Error::InvalidConfig("empty-cluster repair did not settle".into()))
}

fn check_monotone(history: &[f64]) -> Result<()> {
    if let [.., before, after] = history {
        if *after > before * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::InertiaIncreased {
                iteration: history.len() - 1,
                before: *before,
                after: *after,
            });
        }
    }
    Ok(())
}

/// Lloyd's algorithm from a k-means++ start. Deterministic given `seed`.
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, seed: u64, opts: &KMeansOptions) -> Result<ClusterModel> {
    let dim = check_points(points)?;
    require_k(points, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus_init(points, k, &mut rng)?;
    let (mut labels, inertia) = assign_with_repair(points, &mut centroids)?;
    let mut history = vec![inertia];
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            let mean: Vec<f64> = s.iter().map(|x| x / n as f64).collect();
            shift = shift.max(squared_distance(c, &mean).sqrt());
            *c = mean;
        }
        let (next, inertia) = assign_with_repair(points, &mut centroids)?;
        labels = next;
        history.push(inertia);
        check_monotone(&history)?;
        if shift < opts.tol {
            break;
        }
    }

    Ok(ClusterModel {
        centroids,
        k,
        inertia: *history.last().unwrap(),
        iterations_run: iterations,
        seed,
        labels,
        inertia_history: history,
    })
}

/// Nearest centroid per point, ties to the lowest cluster index.
pub fn assign(model: &ClusterModel, points: &[Vec<f64>]) -> Result<Vec<usize>> {
    let dim = model.centroids.first().map_or(0, Vec::len);
    points
        .iter()
        .map(|p| {
            if p.len() != dim {
                return Err(Error::dim(dim, p.len()));
            }
            Ok(nearest_centroid(p, &model.centroids).0)
        })
        .collect()
}

/// Disjoint, exhaustive partition of speakers into clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerClusterMap {
    k: usize,
    seed: u64,
    inertia: f64,
    assignment: BTreeMap<SpeakerId, usize>,
    rosters: Vec<Vec<SpeakerId>>,
}

/// JSON layout of a cluster map file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterMapFile {
    pub k: usize,
    pub seed: u64,
    pub inertia: f64,
    pub assignment: BTreeMap<SpeakerId, usize>,
}

impl SpeakerClusterMap {
    pub fn from_assignment(
        k: usize,
        seed: u64,
        inertia: f64,
        assignment: BTreeMap<SpeakerId, usize>,
    ) -> Result<Self> {
        let mut rosters = vec![Vec::new(); k];
        for (speaker, &c) in &assignment {
            if c >= k {
                return Err(Error::InvalidConfig(format!(
                    "speaker `{speaker}` assigned to cluster {c} >= k = {k}"
                )));
            }
            rosters[c].push(speaker.clone());
        }
        Ok(Self {
            k,
            seed,
            inertia,
            assignment,
            rosters,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    pub fn cluster_of(&self, speaker: &SpeakerId) -> Option<usize> {
        self.assignment.get(speaker).copied()
    }

    pub fn assignment(&self) -> &BTreeMap<SpeakerId, usize> {
        &self.assignment
    }

    pub fn rosters(&self) -> &[Vec<SpeakerId>] {
        &self.rosters
    }

    pub fn num_speakers(&self) -> usize {
        self.assignment.len()
    }

    pub fn mean_roster_size(&self) -> f64 {
        self.num_speakers() as f64 / self.k as f64
    }

    pub fn to_file(&self) -> ClusterMapFile {
        ClusterMapFile {
            k: self.k,
            seed: self.seed,
            inertia: self.inertia,
            assignment: self.assignment.clone(),
        }
    }

    pub fn from_file(file: ClusterMapFile) -> Result<Self> {
        Self::from_assignment(file.k, file.seed, file.inertia, file.assignment)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, &self.to_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(io::read_json(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterOptions {
    pub kmeans: KMeansOptions,
    /// Normalize voiceprints to unit length before clustering.
    pub renormalize: bool,
    /// Independent fits with derived seeds; the lowest inertia wins.
    pub restarts: usize,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self {
            kmeans: KMeansOptions::default(),
            renormalize: false,
            restarts: 10,
        }
    }
}

/// Best of `restarts` fits by inertia. The first fit uses `seed` itself, the
/// others derived seeds; ties keep the earlier fit.
pub fn kmeans_best_of(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    opts: &KMeansOptions,
    restarts: usize,
) -> Result<ClusterModel> {
    let mut best: Option<ClusterModel> = None;
    for r in 0..restarts.max(1) {
        let s = if r == 0 { seed } else { mix_seed(seed, &[r as u64]) };
        let model = kmeans_fit(points, k, s, opts)?;
        if best.as_ref().is_none_or(|b| model.inertia < b.inertia) {
            best = Some(model);
        }
    }
    Ok(best.unwrap())
}

/// Clusters voiceprints and returns the speaker partition with its model.
pub fn build_cluster_map(
    voiceprints: &[Voiceprint],
    k: usize,
    seed: u64,
    opts: &ClusterOptions,
) -> Result<(SpeakerClusterMap, ClusterModel)> {
    let points: Vec<Vec<f64>> = voiceprints
        .iter()
        .map(|v| {
            if opts.renormalize {
                normalize(&v.vector).map(Embedding::into_vec)
            } else {
                Ok(v.vector.clone())
            }
        })
        .collect::<Result<_>>()?;
    let model = kmeans_best_of(&points, k, seed, &opts.kmeans, opts.restarts)?;
    let assignment = voiceprints
        .iter()
        .zip(&model.labels)
        .map(|(v, &l)| (v.speaker.clone(), l))
        .collect::<BTreeMap<_, _>>();
    if assignment.len() != voiceprints.len() {
        return Err(Error::InvalidManifest("duplicate speaker among voiceprints".into()));
    }
    let map = SpeakerClusterMap::from_assignment(k, seed, model.inertia, assignment)?;
    Ok((map, model))
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    let comb2 = |n: usize| (n * n.saturating_sub(1)) as f64 / 2.0;
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| comb2(n)).sum();
    let sum_a: f64 = rows.values().map(|&n| comb2(n)).sum();
    let sum_b: f64 = cols.values().map(|&n| comb2(n)).sum();
    let total = comb2(a.len());
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max = (sum_a + sum_b) / 2.0;
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
