//! Browser demo. A [`Demo`] holds a small synthetic corpus, a warm-started
//! encoder and its speaker clusters, and answers three queries as JSON:
//! a batch with its pair-label matrix, negative-similarity histograms for
//! random and cluster-based batches, and an error-rate sweep over scored
//! trials.

use chns::clustering::SpeakerClusterMap;
use chns::encoder::{warm_start, EncoderParams, TrainConfig};
use chns::evalkit::{
    generate_trials, metric_report, negative_similarity_histogram, score_trials, threshold_sweep, DcfParams,
    TrialPolicy,
};
use chns::sampler::{pair_labels, plan_batch, BatchSpec, ClusterRosters, PairLabel, Provenance, Sampler};
use chns::seeds::mix_seed;
use chns::synthdata::{generate_corpus, generate_eval_corpus, CorpusSpec};
use chns::Corpus;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const EVAL_SPEAKERS_PER_FAMILY: usize = 5;
const TRIALS: u64 = 1;

pub struct Demo {
    seed: u64,
    corpus: Corpus,
    eval: Corpus,
    params: EncoderParams,
    map: SpeakerClusterMap,
    rosters: ClusterRosters,
}

impl Demo {
    pub fn build(seed: u64, k: usize, epochs: usize) -> chns::Result<Self> {
        let spec = CorpusSpec {
            seed,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec, seed)?.corpus;
        let eval = generate_eval_corpus(&spec, seed, EVAL_SPEAKERS_PER_FAMILY)?.corpus;
        let cfg = TrainConfig {
            k,
            epochs,
            seed,
            ..TrainConfig::default()
        };
        let (warm, map) = warm_start(&cfg, &corpus)?;
        let rosters = ClusterRosters::new(&map, &corpus);
        Ok(Self {
            seed,
            corpus,
            eval,
            params: warm.params,
            map,
            rosters,
        })
    }

    pub fn summary(&self) -> Value {
        json!({
            "speakers": self.corpus.num_speakers(),
            "utterances": self.corpus.num_utterances(),
            "k": self.map.k(),
            "mean_roster": self.map.mean_roster_size(),
        })
    }

    /// One CHNS batch: per-slot speakers and clusters plus the label codes
    /// (0 self, 1 positive, 2 hard negative, 3 negative), row-major.
    pub fn batch(&self, batch_size: usize, hard_ratio: f64, index: u32) -> chns::Result<Value> {
        let spec = BatchSpec::new(batch_size, hard_ratio)?;
        let b = plan_batch(Sampler::Chns(&self.rosters), &self.corpus, &spec, self.seed, 0, index)?;
        let labels = pair_labels(&b);
        let clusters: Vec<Option<usize>> = b.slot_provenance().iter().map(|p| p.cluster()).collect();
        let random_slots = b.provenance.iter().filter(|p| matches!(p, Provenance::Random)).count();
        Ok(json!({
            "n": labels.n(),
            "speakers": b.slot_speakers(),
            "clusters": clusters,
            "codes": labels.codes(),
            "source_clusters": b.source_clusters,
            "cluster_speakers": b.cluster_sourced(),
            "random_speakers": random_slots,
            "counts": {
                "positive": labels.count(PairLabel::Positive),
                "hard_negative": labels.count(PairLabel::HardNegative),
                "negative": labels.count(PairLabel::Negative),
            },
        }))
    }

    /// Negative-pair cosine histograms under the warm model.
    pub fn histograms(&self, batch_size: usize, hard_ratio: f64, batches: u32, bins: usize) -> chns::Result<Value> {
        let spec = BatchSpec::new(batch_size, hard_ratio)?;
        let mut out = serde_json::Map::new();
        for (name, sampler) in [("random", Sampler::Random), ("chns", Sampler::Chns(&self.rosters))] {
            let plan = (0..batches)
                .map(|i| plan_batch(sampler, &self.corpus, &spec, self.seed, 1, i))
                .collect::<chns::Result<Vec<_>>>()?;
            let h = negative_similarity_histogram(&plan, &self.params, &self.corpus, bins)?;
            out.insert(name.into(), serde_json::to_value(h)?);
        }
        Ok(Value::Object(out))
    }

    /// Scores held-out trials and returns the full sweep with its EER and
    /// minimum detection cost.
    pub fn sweep(&self, hard: bool, n_trials: usize, p_target: f64) -> chns::Result<Value> {
        let policy = if hard { TrialPolicy::Hard } else { TrialPolicy::Random };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &[TRIALS]));
        let trials = generate_trials(&self.eval, policy, n_trials, n_trials, &mut rng)?;
        let scored = score_trials(&self.params, &trials, &self.eval)?;
        let dcf = DcfParams {
            p_target,
            ..DcfParams::default()
        };
        let sw = threshold_sweep(&scored)?;
        let report = metric_report(&scored, &dcf)?;
        // the outer sweep points sit one unit beyond the scores
        let last = sw.thresholds.len() - 1;
        let mut thresholds = sw.thresholds.clone();
        thresholds[0] = thresholds[0].max(-1.0);
        thresholds[last] = thresholds[last].min(1.0);
        Ok(json!({
            "thresholds": thresholds,
            "far": sw.far,
            "frr": sw.frr,
            "report": report,
        }))
    }
}

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen(js_name = Demo)]
pub struct WasmDemo(Demo);

#[wasm_bindgen(js_class = Demo)]
impl WasmDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, k: usize, epochs: usize) -> Result<WasmDemo, JsValue> {
        Demo::build(seed as u64, k, epochs).map(WasmDemo).map_err(js_err)
    }

    pub fn summary(&self) -> String {
        self.0.summary().to_string()
    }

    pub fn batch(&self, batch_size: usize, hard_ratio: f64, index: u32) -> Result<String, JsValue> {
        self.0.batch(batch_size, hard_ratio, index).map(|v| v.to_string()).map_err(js_err)
    }

    pub fn histograms(&self, batch_size: usize, hard_ratio: f64, batches: u32, bins: usize) -> Result<String, JsValue> {
        self.0
            .histograms(batch_size, hard_ratio, batches, bins)
            .map(|v| v.to_string())
            .map_err(js_err)
    }

    pub fn sweep(&self, hard: bool, n_trials: usize, p_target: f64) -> Result<String, JsValue> {
        self.0.sweep(hard, n_trials, p_target).map(|v| v.to_string()).map_err(js_err)
    }
}
