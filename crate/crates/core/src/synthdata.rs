//! Synthetic speaker corpora with planted families of similar speakers.
//!
//! Family means are random unit vectors in a latent space scaled by
//! `family_spread`. A speaker's latent is the normalized sum of its family
//! mean and a Gaussian offset; utterances are a fixed random linear mix of the
//! speaker latent plus Gaussian session noise. Spreads are RMS offset lengths,
//! so they do not change meaning with the dimensions.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusManifest, SpeakerEntry, SpeakerId, UtteranceEntry, UtteranceId};
use crate::error::{Error, Result};
use crate::evalkit::HARD_ATTRIBUTE;
use crate::seeds::{mix_seed, stream_rng};

const TRAIN_SPLIT: u64 = 1;
const EVAL_SPLIT: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_families: usize,
    pub speakers_per_family: usize,
    pub utterances_per_speaker: usize,
    pub feature_dim: usize,
    pub latent_dim: usize,
    /// Length of the family mean vectors.
    pub family_spread: f64,
    /// RMS length of a speaker's offset from its family mean.
    pub speaker_spread: f64,
    /// RMS length of the per-utterance noise in feature space.
    pub session_noise: f64,
    /// Required `family_spread / speaker_spread`.
    pub min_separation: f64,
    /// Seeds the family means and the channel mix.
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_families: 20,
            speakers_per_family: 10,
            utterances_per_speaker: 30,
            feature_dim: 40,
            latent_dim: 16,
            family_spread: 1.0,
            speaker_spread: 0.5,
            session_noise: 0.35,
            min_separation: 1.0,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn separation(&self) -> f64 {
        self.family_spread / self.speaker_spread
    }

    pub fn num_speakers(&self) -> usize {
        self.n_families * self.speakers_per_family
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        if self.n_families == 0 || self.speakers_per_family == 0 || self.feature_dim == 0 || self.latent_dim == 0 {
            return bad("counts and dimensions must be at least 1");
        }
        if self.utterances_per_speaker < 2 {
            return bad("every speaker needs at least 2 utterances");
        }
        let spreads = [self.family_spread, self.speaker_spread, self.session_noise];
        if spreads.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return bad("spreads must be finite and positive");
        }
        if !(self.separation() > self.min_separation) {
            return bad("speaker_spread too large for the family separation");
        }
        Ok(())
    }
}

/// Family means (rows) and the latent-to-feature channel mix.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub family_means: Array2<f64>,
    /// `feature_dim x latent_dim`.
    pub channel_mix: Array2<f64>,
}

pub fn build_world(spec: &CorpusSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, &[0]));
    let mut family_means = Array2::zeros((spec.n_families, spec.latent_dim));
    for mut row in family_means.rows_mut() {
        let v = gaussian(&mut rng, spec.latent_dim);
        let n = v.dot(&v).sqrt();
        row.assign(&(v * (spec.family_spread / n)));
    }
    let scale = 1.0 / (spec.feature_dim as f64).sqrt();
    let channel_mix = Array2::from_shape_fn((spec.feature_dim, spec.latent_dim), |_| {
        rng.sample::<f64, _>(StandardNormal) * scale
    });
    Ok(World {
        family_means,
        channel_mix,
    })
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.sample(StandardNormal))
}

/// A generated corpus with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// Unit speaker latents, in manifest speaker order.
    pub speaker_latents: Array2<f64>,
    pub families: Vec<usize>,
}

fn generate(
    spec: &CorpusSpec,
    world: &World,
    seed: u64,
    speakers_per_family: usize,
    prefix: &str,
) -> Result<SyntheticCorpus> {
    let (n_speakers, upf) = (spec.n_families * speakers_per_family, spec.utterances_per_speaker);
    let spk_scale = spec.speaker_spread / (spec.latent_dim as f64).sqrt();
    let sess_scale = spec.session_noise / (spec.feature_dim as f64).sqrt();
    let mut speakers = Vec::with_capacity(n_speakers);
    let mut utterances = Vec::with_capacity(n_speakers * upf);
    let mut latents = Array2::zeros((n_speakers, spec.latent_dim));
    let mut features = Array2::zeros((n_speakers * upf, spec.feature_dim));
    let mut families = Vec::with_capacity(n_speakers);
    for s in 0..n_speakers {
        let family = s / speakers_per_family;
        // one stream per speaker keeps speakers independent of each other
        let mut rng = stream_rng(seed, s as u64);
        let z = &world.family_means.row(family) + &(gaussian(&mut rng, spec.latent_dim) * spk_scale);
        let n = z.dot(&z).sqrt();
        if n <= crate::embedding::ZERO_NORM {
            return Err(Error::ZeroVector);
        }
        let latent = z / n;
        let clean = world.channel_mix.dot(&latent);
        let sid = SpeakerId::new(format!("{prefix}s{s:04}"))?;
        for u in 0..upf {
            let row = utterances.len();
            features
                .row_mut(row)
                .assign(&(&clean + &(gaussian(&mut rng, spec.feature_dim) * sess_scale)));
            utterances.push(UtteranceEntry {
                id: UtteranceId::new(format!("{sid}-u{u:03}"))?,
                speaker_id: sid.clone(),
                row_index: row,
            });
        }
        latents.row_mut(s).assign(&latent);
        speakers.push(SpeakerEntry {
            id: sid,
            attributes: [(HARD_ATTRIBUTE.to_string(), family.to_string())].into(),
        });
        families.push(family);
    }
    let manifest = CorpusManifest {
        speakers,
        utterances,
        dim: spec.feature_dim,
    };
    Ok(SyntheticCorpus {
        corpus: Corpus::new(manifest, features)?,
        speaker_latents: latents,
        families,
    })
}

/// The training corpus of `spec`. Family ids are stored as the `family`
/// speaker attribute.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<SyntheticCorpus> {
    let world = build_world(spec)?;
    generate(spec, &world, mix_seed(seed, &[TRAIN_SPLIT]), spec.speakers_per_family, "")
}

/// Held-out speakers drawn from the same families and channel as the
/// training corpus of `spec`. Ids carry an `eval-` prefix.
pub fn generate_eval_corpus(spec: &CorpusSpec, seed: u64, speakers_per_family: usize) -> Result<SyntheticCorpus> {
    if speakers_per_family == 0 {
        return Err(Error::InvalidSpec("evaluation needs at least one speaker per family".into()));
    }
    let world = build_world(spec)?;
    generate(spec, &world, mix_seed(seed, &[EVAL_SPLIT]), speakers_per_family, "eval-")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// Mean cosine between centroids of distinct same-family speakers.
    pub within_family_cosine: Option<f64>,
    /// Mean cosine between centroids of speakers of different families.
    pub cross_family_cosine: Option<f64>,
    /// RMS distance of each speaker's utterances to their centroid.
    pub speaker_spread: Vec<f64>,
    pub mean_speaker_spread: f64,
}

/// Hardness summary. Speakers without a family attribute form one group.
pub fn corpus_stats(corpus: &Corpus) -> Result<CorpusStats> {
    let n = corpus.num_speakers();
    let mut centroids = Array2::zeros((n, corpus.dim()));
    let mut spread = Vec::with_capacity(n);
    for s in 0..n {
        let x = corpus.gather(corpus.utterances_of(s));
        let c = x.mean_axis(Axis(0)).ok_or(Error::NoUtterances(corpus.speaker_id(s).to_string()))?;
        let ss: f64 = x.rows().into_iter().map(|r| (&r - &c).mapv(|d| d * d).sum()).sum();
        spread.push((ss / x.nrows() as f64).sqrt());
        let norm = c.dot(&c).sqrt();
        if norm <= crate::embedding::ZERO_NORM {
            return Err(Error::ZeroVector);
        }
        centroids.row_mut(s).assign(&(c / norm));
    }
    let gram = centroids.dot(&centroids.t());
    let family: Vec<&str> = (0..n).map(|s| corpus.attribute(s, HARD_ATTRIBUTE).unwrap_or("")).collect();
    let (mut within, mut cross) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..n {
        for j in i + 1..n {
            let acc = if family[i] == family[j] { &mut within } else { &mut cross };
            acc.0 += gram[[i, j]];
            acc.1 += 1;
        }
    }
    let mean = |(sum, k): (f64, usize)| (k > 0).then(|| sum / k as f64);
    Ok(CorpusStats {
        within_family_cosine: mean(within),
        cross_family_cosine: mean(cross),
        mean_speaker_spread: spread.iter().sum::<f64>() / n.max(1) as f64,
        speaker_spread: spread,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{adjusted_rand_index, kmeans_best_of, ClusterOptions};
    use crate::embedding::{cosine_sim, normalize};

    fn small() -> CorpusSpec {
        CorpusSpec {
            n_families: 4,
            speakers_per_family: 5,
            utterances_per_speaker: 10,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn counts_and_attributes() {
        let g = generate_corpus(&small(), 1).unwrap();
        assert_eq!(g.corpus.num_speakers(), 20);
        assert_eq!(g.corpus.num_utterances(), 200);
        assert_eq!(g.corpus.dim(), 40);
        assert_eq!(g.corpus.attribute(7, "family"), Some("1"));
        let e = generate_eval_corpus(&small(), 1, 2).unwrap();
        assert_eq!(e.corpus.num_speakers(), 8);
        assert!(e.corpus.speaker_id(0).as_str().starts_with("eval-"));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_corpus(&small(), 3).unwrap();
        let b = generate_corpus(&small(), 3).unwrap();
        let c = generate_corpus(&small(), 4).unwrap();
        assert_eq!(a.corpus.features(), b.corpus.features());
        assert_eq!(a.corpus.manifest(), b.corpus.manifest());
        assert_ne!(a.corpus.features(), c.corpus.features());
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            CorpusSpec { n_families: 0, ..small() },
            CorpusSpec { utterances_per_speaker: 1, ..small() },
            CorpusSpec { speaker_spread: 0.0, ..small() },
            CorpusSpec { speaker_spread: 2.0, ..small() },
            CorpusSpec { session_noise: f64::NAN, ..small() },
        ] {
            assert!(matches!(generate_corpus(&spec, 0), Err(Error::InvalidSpec(_))), "{spec:?}");
        }
    }

    #[test]
    fn vanishing_speaker_spread_collapses_families() {
        let spec = CorpusSpec {
            speaker_spread: 1e-9,
            ..small()
        };
        let g = generate_corpus(&spec, 0).unwrap();
        let lat = &g.speaker_latents;
        for i in 0..5 {
            for j in 0..5 {
                assert!((lat.row(i).dot(&lat.row(j)) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nearest_latent_neighbor_shares_family() {
        // separation 4: fraction of speakers whose nearest other speaker is in
        // the same family, pooled over seeds
        let spec = CorpusSpec {
            speaker_spread: 0.25,
            ..CorpusSpec::default()
        };
        let (mut hits, mut total) = (0, 0);
        for seed in 0..10 {
            let g = generate_corpus(&CorpusSpec { seed, ..spec }, seed).unwrap();
            let gram = g.speaker_latents.dot(&g.speaker_latents.t());
            for i in 0..gram.nrows() {
                let nn = (0..gram.ncols())
                    .filter(|&j| j != i)
                    .max_by(|&a, &b| gram[[i, a]].total_cmp(&gram[[i, b]]))
                    .unwrap();
                hits += usize::from(g.families[nn] == g.families[i]);
                total += 1;
            }
        }
        assert!(hits as f64 >= 0.95 * total as f64, "{hits}/{total}");
    }

    #[test]
    fn kmeans_recovers_planted_families() {
        let spec = CorpusSpec {
            speaker_spread: 1.0 / 6.0,
            ..CorpusSpec::default()
        };
        let mut perfect = 0;
        for seed in 0..10 {
            let g = generate_corpus(&CorpusSpec { seed, ..spec }, seed).unwrap();
            let pts: Vec<Vec<f64>> = g.speaker_latents.rows().into_iter().map(|r| r.to_vec()).collect();
            let opts = ClusterOptions::default();
            let model = kmeans_best_of(&pts, spec.n_families, seed, &opts.kmeans, opts.restarts).unwrap();
            perfect += usize::from(adjusted_rand_index(&model.labels, &g.families) == 1.0);
        }
        assert!(perfect >= 9, "{perfect}/10");
    }

    #[test]
    fn stats_match_pair_scan() {
        let g = generate_corpus(&small(), 5).unwrap();
        let c = &g.corpus;
        let stats = corpus_stats(c).unwrap();
        let cents: Vec<_> = (0..c.num_speakers())
            .map(|s| {
                let x = c.gather(c.utterances_of(s));
                normalize(x.mean_axis(Axis(0)).unwrap().as_slice().unwrap()).unwrap()
            })
            .collect();
        let (mut w, mut x) = (vec![], vec![]);
        for i in 0..cents.len() {
            for j in 0..cents.len() {
                if i < j {
                    let cos = cosine_sim(&cents[i], &cents[j]).unwrap();
                    if g.families[i] == g.families[j] {
                        w.push(cos);
                    } else {
                        x.push(cos);
                    }
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((stats.within_family_cosine.unwrap() - mean(&w)).abs() < 1e-12);
        assert!((stats.cross_family_cosine.unwrap() - mean(&x)).abs() < 1e-12);
        assert!(stats.within_family_cosine > stats.cross_family_cosine);
        let one = CorpusSpec { n_families: 1, ..small() };
        let stats = corpus_stats(&generate_corpus(&one, 0).unwrap().corpus).unwrap();
        assert_eq!(stats.cross_family_cosine, None);
    }
}
