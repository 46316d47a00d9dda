use std::collections::{BTreeMap, HashSet};

use chns::clustering::{assign, kmeans_fit, KMeansOptions, SpeakerClusterMap};
use chns::corpus::{CorpusManifest, SpeakerEntry, UtteranceEntry};
use chns::embedding::{cosine_sim, normalize, pairwise_similarity_matrix, sq_euclidean};
use chns::encoder::{forward, EncoderParams};
use chns::evalkit::{compute_eer, compute_min_dcf, generate_trials, DcfParams, ScoredTrials, TrialPolicy};
use chns::loss::{contrastive_loss, ContrastiveConfig};
use chns::sampler::{pair_labels, plan_batch, BatchSpec, ClusterRosters, PairLabel, PairLabelMatrix, Sampler};
use chns::synthdata::{generate_corpus, CorpusSpec};
use chns::{Corpus, SpeakerId, UtteranceId};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, dim).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn points(max: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, dim), 4..max)
}

/// Corpus with `utts[s]` utterances for speaker `s` and 2-d features.
fn corpus(utts: &[usize], families: usize) -> Corpus {
    let mut speakers = Vec::new();
    let mut utterances = Vec::new();
    for (s, &n) in utts.iter().enumerate() {
        let id = SpeakerId::new(format!("p{s:03}")).unwrap();
        for u in 0..n {
            utterances.push(UtteranceEntry {
                id: UtteranceId::new(format!("p{s:03}-{u}")).unwrap(),
                speaker_id: id.clone(),
                row_index: utterances.len(),
            });
        }
        speakers.push(SpeakerEntry {
            id,
            attributes: [("family".to_string(), (s % families).to_string())].into(),
        });
    }
    let rows = utterances.len();
    let features = Array2::from_shape_fn((rows, 2), |(r, c)| (r * 7 + c * 3) as f64 % 11.0 - 5.0 + c as f64 * 0.1);
    Corpus::new(
        CorpusManifest {
            speakers,
            utterances,
            dim: 2,
        },
        features,
    )
    .unwrap()
}

fn labels_for(speakers: &[usize], clusters: &[Option<usize>]) -> PairLabelMatrix {
    PairLabelMatrix::from_slots(speakers, clusters)
}

/// Slot speakers for `n` speakers with two slots each, plus cluster tags.
fn batch_layout() -> impl Strategy<Value = (Vec<usize>, Vec<Option<usize>>)> {
    prop::collection::vec(prop::option::of(0usize..3), 2..8).prop_map(|tags| {
        let speakers = (0..tags.len()).flat_map(|s| [s, s]).collect();
        let clusters = tags.iter().flat_map(|&c| [c, c]).collect();
        (speakers, clusters)
    })
}

fn similarity(n: usize, values: &[f64]) -> Array2<f64> {
    let mut s = Array2::from_shape_fn((n, n), |(i, j)| values[(i.min(j) * n + i.max(j)) % values.len()]);
    s.diag_mut().fill(1.0);
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalize_is_idempotent(v in vector(7)) {
        let once = normalize(&v).unwrap();
        let twice = normalize(once.as_slice()).unwrap();
        for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn unit_distance_is_linear_in_cosine(a in vector(5), b in vector(5)) {
        let (a, b) = (normalize(&a).unwrap(), normalize(&b).unwrap());
        let c = cosine_sim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert!((sq_euclidean(&a, &b).unwrap() - (2.0 - 2.0 * c)).abs() < 1e-9);
    }

    #[test]
    fn similarity_matrix_is_symmetric_with_unit_diagonal(vs in prop::collection::vec(vector(4), 1..8)) {
        let es: Vec<_> = vs.iter().map(|v| normalize(v).unwrap()).collect();
        let m = pairwise_similarity_matrix(&es).unwrap();
        for i in 0..es.len() {
            prop_assert!((m[[i, i]] - 1.0).abs() < 1e-12);
            for j in 0..es.len() {
                prop_assert_eq!(m[[i, j]], m[[j, i]]);
                prop_assert!((-1.0..=1.0).contains(&m[[i, j]]));
            }
        }
    }

    #[test]
    fn kmeans_is_a_deterministic_monotone_partition(pts in points(40, 3), k in 1usize..5, seed in 0u64..1000) {
        let distinct: HashSet<Vec<u64>> = pts.iter().map(|p| p.iter().map(|x| x.to_bits()).collect()).collect();
        prop_assume!(distinct.len() >= k);
        let opts = KMeansOptions::default();
        let a = kmeans_fit(&pts, k, seed, &opts).unwrap();
        let b = kmeans_fit(&pts, k, seed, &opts).unwrap();
        prop_assert_eq!(&a.labels, &b.labels);
        prop_assert!(a.inertia_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12));
        let mut counts = vec![0; k];
        a.labels.iter().for_each(|&l| counts[l] += 1);
        prop_assert!(counts.iter().all(|&c| c > 0));
        prop_assert_eq!(counts.iter().sum::<usize>(), pts.len());

        let assignment: BTreeMap<SpeakerId, usize> = a
            .labels
            .iter()
            .enumerate()
            .map(|(i, &l)| (SpeakerId::new(format!("s{i}")).unwrap(), l))
            .collect();
        let map = SpeakerClusterMap::from_assignment(k, seed, a.inertia, assignment).unwrap();
        let mut seen = HashSet::new();
        for r in map.rosters() {
            for s in r {
                prop_assert!(seen.insert(s.clone()));
            }
        }
        prop_assert_eq!(seen.len(), pts.len());
    }

    #[test]
    fn unit_nearest_by_distance_is_nearest_by_cosine(pts in points(30, 4), seed in 0u64..100) {
        let unit: Vec<Vec<f64>> = pts
            .iter()
            .filter_map(|p| normalize(p).ok().map(|e| e.into_vec()))
            .collect();
        prop_assume!(unit.len() >= 3);
        let mut model = kmeans_fit(&unit, 3, seed, &KMeansOptions::default()).unwrap();
        model.centroids = model.centroids.iter().map(|c| normalize(c).unwrap().into_vec()).collect();
        let by_distance = assign(&model, &unit).unwrap();
        for (p, &l) in unit.iter().zip(&by_distance) {
            let cos: Vec<f64> = model.centroids.iter().map(|c| c.iter().zip(p).map(|(a, b)| a * b).sum()).collect();
            let best = cos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(cos[l] >= best - 1e-12);
        }
    }

    #[test]
    fn chns_batches_are_well_formed(
        utts in prop::collection::vec(2usize..6, 6..40),
        k in 1usize..8,
        half in 1usize..12,
        hard_ratio in 0.0f64..=1.0,
        seed in 0u64..10_000,
    ) {
        let c = corpus(&utts, 3);
        let half = half.min(c.num_speakers());
        let assignment: BTreeMap<SpeakerId, usize> =
            (0..c.num_speakers()).map(|s| (c.speaker_id(s).clone(), (s * 7 + seed as usize) % k)).collect();
        let map = SpeakerClusterMap::from_assignment(k, 0, 0.0, assignment).unwrap();
        let rosters = ClusterRosters::new(&map, &c);
        let spec = BatchSpec::new(2 * half, hard_ratio).unwrap();
        let batch = plan_batch(Sampler::Chns(&rosters), &c, &spec, seed, 0, 0).unwrap();
        prop_assert_eq!(batch.slots.len(), spec.batch_size);
        let speakers: Vec<usize> = batch.speakers().collect();
        prop_assert_eq!(speakers.iter().collect::<HashSet<_>>().len(), half);
        for pair in batch.slots.chunks(2) {
            prop_assert_eq!(pair[0].speaker, pair[1].speaker);
            prop_assert_ne!(pair[0].utterance, pair[1].utterance);
        }
        prop_assert!(batch.cluster_sourced() + batch.hard_deficit >= spec.hard_budget());
        prop_assert_eq!(batch.hard_deficit, 0);
        let drawn: HashSet<usize> = batch.source_clusters.iter().copied().collect();
        prop_assert_eq!(drawn.len(), batch.source_clusters.len());
        let labels = pair_labels(&batch);
        let slot_speakers = batch.slot_speakers();
        let prov = batch.slot_provenance();
        for i in 0..labels.n() {
            prop_assert_eq!(labels.row(i).iter().filter(|&&l| l == PairLabel::Positive).count(), 1);
            for j in 0..labels.n() {
                if labels.get(i, j) == PairLabel::HardNegative {
                    prop_assert_ne!(slot_speakers[i], slot_speakers[j]);
                    prop_assert!(prov[i].cluster().is_some() && prov[i].cluster() == prov[j].cluster());
                }
            }
        }
    }

    #[test]
    fn loss_is_invariant_under_slot_permutation(
        (speakers, clusters) in batch_layout(),
        values in prop::collection::vec(-1.0f64..1.0, 64),
        beta in 0.0f64..0.5,
        rot in 0usize..16,
    ) {
        let n = speakers.len();
        let s = similarity(n, &values);
        let cfg = ContrastiveConfig { beta, ..ContrastiveConfig::default() };
        let base = contrastive_loss(&s, &labels_for(&speakers, &clusters), &cfg, 0.1).unwrap().value;
        let perm: Vec<usize> = (0..n).map(|i| (i * 5 + rot) % n).collect();
        prop_assume!(perm.iter().collect::<HashSet<_>>().len() == n);
        let ps = Array2::from_shape_fn((n, n), |(i, j)| s[[perm[i], perm[j]]]);
        let sp: Vec<usize> = perm.iter().map(|&p| speakers[p]).collect();
        let cl: Vec<Option<usize>> = perm.iter().map(|&p| clusters[p]).collect();
        let permuted = contrastive_loss(&ps, &labels_for(&sp, &cl), &cfg, 0.1).unwrap().value;
        prop_assert!((base - permuted).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn loss_moves_the_right_way_in_single_entries(
        (speakers, clusters) in batch_layout(),
        values in prop::collection::vec(-0.9f64..0.9, 64),
        beta in 0.0f64..0.5,
        i in 0usize..16,
        j in 0usize..16,
    ) {
        let n = speakers.len();
        let (i, j) = (i % n, j % n);
        prop_assume!(i != j);
        let s = similarity(n, &values);
        let labels = labels_for(&speakers, &clusters);
        let cfg = ContrastiveConfig { beta, ..ContrastiveConfig::default() };
        let base = contrastive_loss(&s, &labels, &cfg, 0.1).unwrap().value;
        let mut up = s.clone();
        up[[i, j]] += 0.05;
        let moved = contrastive_loss(&up, &labels, &cfg, 0.1).unwrap().value;
        if labels.get(i, j) == PairLabel::Positive {
            prop_assert!(moved < base);
        } else {
            prop_assert!(moved > base);
        }
    }

    #[test]
    fn constant_negatives_fold_into_the_unhardened_loss(
        (speakers, clusters) in batch_layout(),
        pos in 0.0f64..1.0,
        c in -1.0f64..1.0,
        beta in 0.0f64..0.5,
        tau in 0.05f64..1.0,
    ) {
        let n = speakers.len();
        let s = Array2::from_shape_fn((n, n), |(i, j)| {
            if i == j { 1.0 } else if speakers[i] == speakers[j] { pos } else { c }
        });
        let labels = labels_for(&speakers, &clusters);
        let cfg = ContrastiveConfig { beta, ..ContrastiveConfig::default() };
        let ours = contrastive_loss(&s, &labels, &cfg, tau).unwrap().value;
        // each anchor has one positive and n - 2 negatives
        let term = (1.0 + (n - 2) as f64 * (beta * c).exp() * ((c - pos) / tau).exp()).ln();
        prop_assert!((ours - n as f64 * term).abs() <= 1e-10 * ours.abs().max(1.0));
    }

    #[test]
    fn encoder_outputs_are_unit_norm(seed in 0u64..500, rows in 1usize..10, scale in 0.1f64..100.0) {
        let params = EncoderParams::init(&[5, 7, 3], seed).unwrap();
        let x = Array2::from_shape_fn((rows, 5), |(r, c)| scale * (((r * 5 + c) as f64 * 0.7 + seed as f64).sin() + 0.01));
        if let Ok(e) = forward(&params, &x) {
            for r in e.rows() {
                prop_assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eer_ignores_increasing_transforms(
        scores in prop::collection::vec(-3.0f64..3.0, 4..200),
        labels in prop::collection::vec(any::<bool>(), 200),
    ) {
        let mut labels = labels[..scores.len()].to_vec();
        labels[0] = true;
        labels[1] = false;
        let a = ScoredTrials::new(scores.clone(), labels.clone()).unwrap();
        let b = ScoredTrials::new(scores.iter().map(|s| (2.0 * s).exp() + 3.0).collect(), labels).unwrap();
        let (ea, _) = compute_eer(&a).unwrap();
        let (eb, _) = compute_eer(&b).unwrap();
        prop_assert_eq!(ea, eb);
        let p = DcfParams::default();
        let bound = (p.p_target * p.c_miss).min((1.0 - p.p_target) * p.c_fa);
        prop_assert!(compute_min_dcf(&a, &p).unwrap().0 <= bound);
    }

    #[test]
    fn hard_trials_share_the_family(seed in 0u64..200, fams in 2usize..5) {
        let c = corpus(&vec![4; 4 * fams], fams);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trials = generate_trials(&c, TrialPolicy::Hard, 20, 20, &mut rng).unwrap();
        for t in &trials {
            let (e, x) = (c.utterance_index(&t.enroll).unwrap(), c.utterance_index(&t.test).unwrap());
            let (se, sx) = (c.speaker_of(e), c.speaker_of(x));
            prop_assert_ne!(e, x);
            if t.target {
                prop_assert_eq!(se, sx);
            } else {
                prop_assert_ne!(se, sx);
                prop_assert_eq!(c.attribute(se, "family"), c.attribute(sx, "family"));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn synthetic_corpora_are_deterministic(seed in 0u64..1_000_000, fams in 1usize..4, utts in 2usize..5) {
        let spec = CorpusSpec {
            n_families: fams,
            speakers_per_family: 3,
            utterances_per_speaker: utts,
            seed,
            ..CorpusSpec::default()
        };
        let a = generate_corpus(&spec, seed).unwrap().corpus;
        let b = generate_corpus(&spec, seed).unwrap().corpus;
        prop_assert_eq!(a.manifest(), b.manifest());
        prop_assert!(a.features().iter().zip(b.features()).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert!((0..a.num_speakers()).all(|s| a.utterances_of(s).len() >= 2));
    }
}
