//! Verification trials, scoring, EER and minimum detection cost, and the
//! distribution of in-batch negative similarities.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, UtteranceId};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::sampler::Batch;

/// Manifest attribute shared by hard non-target pairs.
pub const HARD_ATTRIBUTE: &str = "family";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trial {
    pub enroll: UtteranceId,
    pub test: UtteranceId,
    pub target: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialPolicy {
    #[default]
    Random,
    /// Non-targets only between speakers sharing [`HARD_ATTRIBUTE`].
    Hard,
}

impl std::str::FromStr for TrialPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "hard" => Ok(Self::Hard),
            other => Err(Error::InvalidConfig(format!("unknown trial policy {other:?}"))),
        }
    }
}

type Pair = (usize, usize);

fn ordered(a: usize, b: usize) -> Pair {
    (a.min(b), a.max(b))
}

fn choose2(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Draws `n` distinct pairs out of `possible`. Small pools are enumerated and
/// subsampled; large ones use rejection against a seen-set.
fn draw_pairs<R, E, D>(n: usize, possible: usize, enumerate: E, mut draw: D, rng: &mut R, what: &str) -> Result<Vec<Pair>>
where
    R: Rng + ?Sized,
    E: FnOnce() -> Vec<Pair>,
    D: FnMut(&mut R) -> Pair,
{
    if n > possible {
        return Err(Error::InsufficientData(format!(
            "{n} {what} trials requested, {possible} possible"
        )));
    }
    if 2 * n >= possible {
        let all = enumerate();
        debug_assert_eq!(all.len(), possible);
        let mut picks = index::sample(rng, possible, n).into_vec();
        picks.sort_unstable();
        return Ok(picks.into_iter().map(|i| all[i]).collect());
    }
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = draw(rng);
        if seen.insert(p) {
            out.push(p);
        }
    }
    Ok(out)
}

/// Builds a trial list: `n_target` same-speaker pairs of distinct utterances,
/// then `n_nontarget` cross-speaker pairs. No pair appears twice.
pub fn generate_trials<R: Rng + ?Sized>(
    corpus: &Corpus,
    policy: TrialPolicy,
    n_target: usize,
    n_nontarget: usize,
    rng: &mut R,
) -> Result<Vec<Trial>> {
    let speakers = corpus.num_speakers();
    let targets = {
        let eligible: Vec<usize> = (0..speakers)
            .filter(|&s| corpus.utterances_of(s).len() >= 2)
            .collect();
        let weights: Vec<usize> = eligible.iter().map(|&s| choose2(corpus.utterances_of(s).len())).collect();
        let possible: usize = weights.iter().sum();
        let enumerate = || {
            let mut all = Vec::with_capacity(possible);
            for &s in &eligible {
                let u = corpus.utterances_of(s);
                for i in 0..u.len() {
                    for j in i + 1..u.len() {
                        all.push(ordered(u[i], u[j]));
                    }
                }
            }
            all
        };
        let pick = if possible > 0 {
            Some(WeightedIndex::new(&weights).expect("positive weights"))
        } else {
            None
        };
        let draw = |rng: &mut R| {
            let s = eligible[pick.as_ref().unwrap().sample(rng)];
            let u = corpus.utterances_of(s);
            let pair = index::sample(rng, u.len(), 2);
            ordered(u[pair.index(0)], u[pair.index(1)])
        };
        draw_pairs(n_target, possible, enumerate, draw, rng, "target")?
    };

    let nontargets = match policy {
        TrialPolicy::Random => {
            let total = corpus.num_utterances();
            let same: usize = (0..speakers).map(|s| choose2(corpus.utterances_of(s).len())).sum();
            let possible = choose2(total) - same;
            let enumerate = || {
                let mut all = Vec::with_capacity(possible);
                for a in 0..total {
                    for b in a + 1..total {
                        if corpus.speaker_of(a) != corpus.speaker_of(b) {
                            all.push((a, b));
                        }
                    }
                }
                all
            };
            let draw = |rng: &mut R| loop {
                let a = rng.random_range(0..total);
                let b = rng.random_range(0..total);
                if corpus.speaker_of(a) != corpus.speaker_of(b) {
                    return ordered(a, b);
                }
            };
            draw_pairs(n_nontarget, possible, enumerate, draw, rng, "non-target")?
        }
        TrialPolicy::Hard => {
            let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for s in 0..speakers {
                let attr = corpus.attribute(s, HARD_ATTRIBUTE).ok_or_else(|| Error::MissingAttribute {
                    speaker: corpus.speaker_id(s).to_string(),
                    attribute: HARD_ATTRIBUTE.into(),
                })?;
                groups.entry(attr).or_default().push(s);
            }
            // utterance pools of groups holding at least two speakers
            let pools: Vec<Vec<usize>> = groups
                .values()
                .filter(|g| g.len() >= 2)
                .map(|g| g.iter().flat_map(|&s| corpus.utterances_of(s).iter().copied()).collect())
                .collect();
            let possible: usize = groups
                .values()
                .map(|g| {
                    let n: usize = g.iter().map(|&s| corpus.utterances_of(s).len()).sum();
                    choose2(n) - g.iter().map(|&s| choose2(corpus.utterances_of(s).len())).sum::<usize>()
                })
                .sum();
            let enumerate = || {
                let mut all = Vec::with_capacity(possible);
                for pool in &pools {
                    for i in 0..pool.len() {
                        for j in i + 1..pool.len() {
                            if corpus.speaker_of(pool[i]) != corpus.speaker_of(pool[j]) {
                                all.push(ordered(pool[i], pool[j]));
                            }
                        }
                    }
                }
                all
            };
            let sizes: Vec<usize> = pools.iter().map(Vec::len).collect();
            let pick = if pools.is_empty() {
                None
            } else {
                Some(WeightedIndex::new(&sizes).expect("non-empty pools"))
            };
            let draw = |rng: &mut R| loop {
                let pool = &pools[pick.as_ref().unwrap().sample(rng)];
                let a = pool[rng.random_range(0..pool.len())];
                let b = pool[rng.random_range(0..pool.len())];
                if corpus.speaker_of(a) != corpus.speaker_of(b) {
                    return ordered(a, b);
                }
            };
            draw_pairs(n_nontarget, possible, enumerate, draw, rng, "hard non-target")?
        }
    };

    let trial = |(a, b): Pair, target| Trial {
        enroll: corpus.utterance_id(a).clone(),
        test: corpus.utterance_id(b).clone(),
        target,
    };
    Ok(targets
        .into_iter()
        .map(|p| trial(p, true))
        .chain(nontargets.into_iter().map(|p| trial(p, false)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrials {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredTrials {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::dim(scores.len(), labels.len()));
        }
        if scores.is_empty() {
            return Err(Error::EmptyList);
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("trial score"));
        }
        Ok(Self { scores, labels })
    }

    pub fn n_target(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_nontarget(&self) -> usize {
        self.labels.len() - self.n_target()
    }
}

/// Cosine score of every trial; each distinct utterance is embedded once.
pub fn score_trials(params: &EncoderParams, trials: &[Trial], corpus: &Corpus) -> Result<ScoredTrials> {
    let resolve = |id: &UtteranceId| {
        corpus
            .utterance_index(id)
            .ok_or_else(|| Error::UnknownUtterance(id.to_string()))
    };
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut order = Vec::new();
    let mut pairs = Vec::with_capacity(trials.len());
    for t in trials {
        if t.enroll == t.test {
            return Err(Error::InvalidConfig(format!("trial pairs {} with itself", t.enroll)));
        }
        let mut row = |u: usize| {
            *rows.entry(u).or_insert_with(|| {
                order.push(u);
                order.len() - 1
            })
        };
        let (a, b) = (resolve(&t.enroll)?, resolve(&t.test)?);
        pairs.push((row(a), row(b)));
    }
    let emb = params.embed(&corpus.gather(&order))?;
    let scores = pairs
        .iter()
        .map(|&(a, b)| emb.row(a).dot(&emb.row(b)).clamp(-1.0, 1.0))
        .collect();
    ScoredTrials::new(scores, trials.iter().map(|t| t.target).collect())
}

/// Error rates at every sweep point: below all scores, every midpoint between
/// consecutive distinct scores, and above all scores. Scores `>= t` are
/// accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub thresholds: Vec<f64>,
    /// Fraction of non-targets accepted.
    pub far: Vec<f64>,
    /// Fraction of targets rejected.
    pub frr: Vec<f64>,
}

pub fn threshold_sweep(scored: &ScoredTrials) -> Result<Sweep> {
    let (nt, nn) = (scored.n_target(), scored.n_nontarget());
    if nt == 0 || nn == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut idx: Vec<usize> = (0..scored.scores.len()).collect();
    idx.sort_by(|&a, &b| scored.scores[a].total_cmp(&scored.scores[b]));
    let lo = scored.scores[idx[0]];
    let hi = scored.scores[idx[idx.len() - 1]];
    let mut sweep = Sweep {
        thresholds: vec![lo - 1.0],
        far: vec![1.0],
        frr: vec![0.0],
    };
    // walking upward, everything below the current threshold is rejected
    let (mut rejected_t, mut rejected_n) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scored.scores[idx[i]];
        while i < idx.len() && scored.scores[idx[i]] == s {
            if scored.labels[idx[i]] {
                rejected_t += 1;
            } else {
                rejected_n += 1;
            }
            i += 1;
        }
        let t = if i < idx.len() {
            (s + scored.scores[idx[i]]) / 2.0
        } else {
            hi + 1.0
        };
        sweep.thresholds.push(t);
        sweep.far.push((nn - rejected_n) as f64 / nn as f64);
        sweep.frr.push(rejected_t as f64 / nt as f64);
    }
    Ok(sweep)
}

/// Equal error rate and its threshold, interpolated linearly between the two
/// sweep points where `FAR - FRR` changes sign.
pub fn compute_eer(scored: &ScoredTrials) -> Result<(f64, f64)> {
    let sw = threshold_sweep(scored)?;
    Ok(eer_from_sweep(&sw))
}

pub fn eer_from_sweep(sw: &Sweep) -> (f64, f64) {
    let diff = |k: usize| sw.far[k] - sw.frr[k];
    // the first point has diff = +1 and the last diff = -1
    let k = (0..sw.far.len()).find(|&k| diff(k) <= 0.0).expect("sweep ends below zero");
    if diff(k) == 0.0 {
        return (sw.far[k], sw.thresholds[k]);
    }
    let (d0, d1) = (diff(k - 1), diff(k));
    let a = d0 / (d0 - d1);
    let eer = sw.far[k - 1] + a * (sw.far[k] - sw.far[k - 1]);
    let t = sw.thresholds[k - 1] + a * (sw.thresholds[k] - sw.thresholds[k - 1]);
    (eer, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
    /// Divide by the cost of the better trivial system.
    pub normalize: bool,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.05,
            c_miss: 1.0,
            c_fa: 1.0,
            normalize: false,
        }
    }
}

/// Minimum detection cost over the sweep and the threshold attaining it
/// (the lowest such threshold on ties).
pub fn compute_min_dcf(scored: &ScoredTrials, p: &DcfParams) -> Result<(f64, f64)> {
    Ok(min_dcf_from_sweep(&threshold_sweep(scored)?, p))
}

pub fn min_dcf_from_sweep(sw: &Sweep, p: &DcfParams) -> (f64, f64) {
    let norm = if p.normalize {
        (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target))
    } else {
        1.0
    };
    let mut best = (f64::INFINITY, f64::NAN);
    for k in 0..sw.far.len() {
        let dcf = (p.c_miss * p.p_target * sw.frr[k] + p.c_fa * (1.0 - p.p_target) * sw.far[k]) / norm;
        if dcf < best.0 {
            best = (dcf, sw.thresholds[k]);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub min_dcf_threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

pub fn metric_report(scored: &ScoredTrials, p: &DcfParams) -> Result<MetricReport> {
    let sw = threshold_sweep(scored)?;
    let (eer, eer_threshold) = eer_from_sweep(&sw);
    let (min_dcf, min_dcf_threshold) = min_dcf_from_sweep(&sw, p);
    Ok(MetricReport {
        eer,
        eer_threshold,
        min_dcf,
        min_dcf_threshold,
        n_target: scored.n_target(),
        n_nontarget: scored.n_nontarget(),
    })
}

/// `<0|1> <enroll> <test>` per line.
pub fn format_trials(trials: &[Trial]) -> String {
    let mut out = String::new();
    for t in trials {
        let _ = writeln!(out, "{} {} {}", u8::from(t.target), t.enroll, t.test);
    }
    out
}

pub fn parse_trials(text: &str, path: &Path) -> Result<Vec<Trial>> {
    let bad = |line: usize, reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: format!("line {line}: {reason}"),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [label, enroll, test] = parts[..] else {
                return Err(bad(i + 1, "expected 3 fields"));
            };
            let target = match label {
                "1" => true,
                "0" => false,
                _ => return Err(bad(i + 1, "label must be 0 or 1")),
            };
            Ok(Trial {
                enroll: UtteranceId::new(enroll)?,
                test: UtteranceId::new(test)?,
                target,
            })
        })
        .collect()
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    fs::write(path, format_trials(trials)).map_err(|e| Error::io(path, e))
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trials(&text, path)
}

/// Cosine similarity of every unordered cross-speaker slot pair of a batch.
pub fn batch_negative_similarities(batch: &Batch, embeddings: &Array2<f64>) -> Vec<f64> {
    let speakers = batch.slot_speakers();
    let mut out = Vec::new();
    for i in 0..speakers.len() {
        for j in i + 1..speakers.len() {
            if speakers[i] != speakers[j] {
                out.push(embeddings.row(i).dot(&embeddings.row(j)));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeHistogram {
    /// `bins + 1` edges spanning [-1, 1].
    pub edges: Vec<f64>,
    /// Fraction of pairs per bin; all zero when there are no negatives.
    pub mass: Vec<f64>,
    pub mean: Option<f64>,
    pub count: usize,
}

impl NegativeHistogram {
    pub fn from_values(values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
        }
        let edges = (0..=bins).map(|b| -1.0 + 2.0 * b as f64 / bins as f64).collect();
        let mut counts = vec![0usize; bins];
        for &v in values {
            let b = (((v + 1.0) / 2.0 * bins as f64).floor() as isize).clamp(0, bins as isize - 1);
            counts[b as usize] += 1;
        }
        let n = values.len();
        Ok(Self {
            edges,
            mass: counts
                .iter()
                .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                .collect(),
            mean: (n > 0).then(|| values.iter().sum::<f64>() / n as f64),
            count: n,
        })
    }
}

/// Pools negative-pair similarities of `batches` under `params`.
pub fn negative_similarity_histogram(
    batches: &[Batch],
    params: &EncoderParams,
    corpus: &Corpus,
    bins: usize,
) -> Result<NegativeHistogram> {
    let mut values = Vec::new();
    for b in batches {
        let emb = params.embed(&corpus.gather(&b.utterances()))?;
        values.extend(batch_negative_similarities(b, &emb));
    }
    NegativeHistogram::from_values(&values, bins)
}
