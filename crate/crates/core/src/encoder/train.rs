//! The training loop.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::network::{backward, forward, forward_cached, normalization_backward, save_checkpoint, EncoderParams};
use super::optim::{adam_step, lr_at, AdamConfig, OptimizerState};
use crate::clustering::{
    build_cluster_map, compute_voiceprints, ClusterOptions, SpeakerClusterMap, Voiceprint, VOICEPRINT_UTTERANCES,
};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::evalkit::{generate_trials, metric_report, score_trials, DcfParams, MetricReport, Trial, TrialPolicy};
use crate::io::write_json;
use crate::loss::{aam_softmax_loss, contrastive_loss, normalize_rows, similarity_grad_to_embeddings, AamConfig, ContrastiveConfig};
use crate::sampler::{batches_per_epoch, pair_labels, plan_batch, Batch, BatchSpec, ClusterRosters, OvershootPolicy, Sampler};
use crate::seeds::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    #[default]
    SupCon,
    /// SupCon with hardened negatives.
    Hscl,
    AamSoftmax,
}

impl LossMode {
    pub fn is_contrastive(self) -> bool {
        self != LossMode::AamSoftmax
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    #[default]
    Random,
    Chns,
}

impl std::fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerMode::Random => "random",
            SamplerMode::Chns => "chns",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hard_ratio: f64,
    pub overshoot: OvershootPolicy,
    pub max_lr: f64,
    pub warmup_fraction: f64,
    pub sampler: SamplerMode,
    /// Train with random batches until this epoch, then switch to CHNS.
    pub curriculum_switch_epoch: Option<usize>,
    /// Rebuild the cluster map with the current model at the switch.
    pub recluster_on_switch: bool,
    pub loss: LossMode,
    /// Temperature settings and the hardening exponent used in `hscl` mode.
    pub contrastive: ContrastiveConfig,
    pub aam: AamConfig,
    /// Hidden layer widths; empty gives a single affine map.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    /// Cluster count for (re)clustering.
    pub k: usize,
    pub cluster: ClusterOptions,
    pub voiceprint_utterances: usize,
    /// Speakers held out from training for per-epoch validation.
    pub validation_speakers: usize,
    /// Target and non-target validation trials (each).
    pub validation_trials: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            hard_ratio: 1.0,
            overshoot: OvershootPolicy::Truncate,
            max_lr: 0.003,
            warmup_fraction: 0.05,
            sampler: SamplerMode::Random,
            curriculum_switch_epoch: None,
            recluster_on_switch: true,
            loss: LossMode::SupCon,
            contrastive: ContrastiveConfig::hscl(),
            aam: AamConfig::default(),
            hidden: Vec::new(),
            embedding_dim: 64,
            k: 20,
            cluster: ClusterOptions::default(),
            voiceprint_utterances: VOICEPRINT_UTTERANCES,
            validation_speakers: 10,
            validation_trials: 200,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

// seed-derivation tags
const INIT: u64 = 1;
const BATCHES: u64 = 2;
const VALIDATION: u64 = 3;
const VOICEPRINTS: u64 = 5;
const CLUSTERS: u64 = 6;
const CLASSES: u64 = 7;
const WARM: u64 = 8;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction));
        }
        if !self.max_lr.is_finite() || self.max_lr < 0.0 {
            return bad(format!("max_lr {} must be finite and non-negative", self.max_lr));
        }
        if self.embedding_dim == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if self.uses_chns() && self.k == 0 {
            return bad("k must be at least 1 for CHNS".into());
        }
        if self.voiceprint_utterances == 0 {
            return bad("voiceprint_utterances must be at least 1".into());
        }
        self.batch_spec().validate()?;
        self.contrastive.validate()
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            batch_size: self.batch_size,
            hard_ratio: self.hard_ratio,
            overshoot: self.overshoot,
        }
    }

    /// Loss settings in effect: hardening only in `hscl` mode.
    pub fn effective_contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            beta: if self.loss == LossMode::Hscl { self.contrastive.beta } else { 0.0 },
            ..self.contrastive
        }
    }

    pub fn uses_chns(&self) -> bool {
        self.sampler == SamplerMode::Chns || self.curriculum_switch_epoch.is_some()
    }

    /// Whether CHNS batches are drawn from the first epoch.
    pub fn chns_from_start(&self) -> bool {
        match self.curriculum_switch_epoch {
            Some(e) => e == 0,
            None => self.sampler == SamplerMode::Chns,
        }
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        std::iter::once(input_dim)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.embedding_dim))
            .collect()
    }
}

/// Epochs of random-batch training behind the initial clustering: 5% of the
/// run, at least one.
pub fn warm_epochs(total_epochs: usize) -> usize {
    (total_epochs as f64 * 0.05).ceil().max(1.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub tau: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub sampler: SamplerMode,
    /// The cluster map was rebuilt at the start of this epoch.
    pub reclustered: bool,
    pub tau: f64,
    pub val_eer: Option<f64>,
    pub val_min_dcf: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Epochs at which the cluster map was rebuilt.
    pub fn recluster_epochs(&self) -> Vec<usize> {
        self.epochs.iter().filter(|e| e.reclustered).map(|e| e.epoch).collect()
    }

    /// First epoch sampled with CHNS after a random-batch epoch.
    pub fn sampler_switch_epoch(&self) -> Option<usize> {
        self.epochs
            .windows(2)
            .find(|w| w[0].sampler == SamplerMode::Random && w[1].sampler == SamplerMode::Chns)
            .map(|w| w[1].epoch)
    }

    pub fn write_steps_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.steps)
    }

    pub fn write_epochs_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.epochs)
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// State handed to the per-epoch callback.
pub struct EpochEnd<'a> {
    pub record: &'a EpochRecord,
    pub params: &'a EncoderParams,
    /// Speakers trained on (validation speakers removed).
    pub train_corpus: &'a Corpus,
    /// This epoch's batches, indexed into `train_corpus`.
    pub batches: &'a [Batch],
    /// Set when the map was rebuilt during this epoch.
    pub new_map: Option<&'a SpeakerClusterMap>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub log: TrainLog,
    /// The map in use at the end of training, if any.
    pub cluster_map: Option<SpeakerClusterMap>,
    pub tau: f64,
    pub validation: Option<MetricReport>,
}

/// Held-out speakers and their fixed trial list.
struct Validation {
    corpus: Corpus,
    trials: Vec<Trial>,
}

fn split_validation(cfg: &TrainConfig, corpus: &Corpus) -> Result<(Corpus, Option<Validation>)> {
    if cfg.validation_speakers == 0 {
        return Ok((corpus.clone(), None));
    }
    let n = corpus.num_speakers();
    if cfg.validation_speakers >= n {
        return Err(Error::InsufficientSpeakers {
            needed: cfg.validation_speakers + 1,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[VALIDATION]));
    let mut held: Vec<usize> = index::sample(&mut rng, n, cfg.validation_speakers).into_vec();
    held.sort_unstable();
    let train: Vec<usize> = (0..n).filter(|s| held.binary_search(s).is_err()).collect();
    let val = corpus.subset(&held)?;
    let trials = generate_trials(&val, TrialPolicy::Random, cfg.validation_trials, cfg.validation_trials, &mut rng)?;
    Ok((corpus.subset(&train)?, Some(Validation { corpus: val, trials })))
}

/// Voiceprints of every corpus speaker under `params` and their clustering
/// into `cfg.k` groups. `tag` separates the streams of successive
/// reclusterings.
pub fn voiceprints_and_map(
    params: &EncoderParams,
    corpus: &Corpus,
    cfg: &TrainConfig,
    tag: u64,
) -> Result<(Vec<Voiceprint>, SpeakerClusterMap)> {
    let vps = compute_voiceprints(
        corpus,
        |x| forward(params, x),
        cfg.voiceprint_utterances,
        mix_seed(cfg.seed, &[VOICEPRINTS, tag]),
    )?;
    let (map, _) = build_cluster_map(&vps, cfg.k, mix_seed(cfg.seed, &[CLUSTERS, tag]), &cfg.cluster)?;
    Ok((vps, map))
}

pub fn cluster_with_model(
    params: &EncoderParams,
    corpus: &Corpus,
    cfg: &TrainConfig,
    tag: u64,
) -> Result<SpeakerClusterMap> {
    Ok(voiceprints_and_map(params, corpus, cfg, tag)?.1)
}

/// Trainable state besides the encoder.
struct Extras {
    log_tau: f64,
    /// Unnormalized class weights for the angular-margin loss.
    class_weights: Option<Array2<f64>>,
}

pub fn train(cfg: &TrainConfig, corpus: &Corpus, initial_map: Option<&SpeakerClusterMap>) -> Result<TrainOutcome> {
    train_with_hook(cfg, corpus, initial_map, |_| Ok(()))
}

/// Runs training and calls `hook` after every epoch.
pub fn train_with_hook<H>(
    cfg: &TrainConfig,
    corpus: &Corpus,
    initial_map: Option<&SpeakerClusterMap>,
    mut hook: H,
) -> Result<TrainOutcome>
where
    H: FnMut(EpochEnd<'_>) -> Result<()>,
{
    cfg.validate()?;
    if cfg.chns_from_start() && initial_map.is_none() {
        return Err(Error::ClusterMapMissing);
    }
    let spec = cfg.batch_spec();
    let (train_corpus, validation) = split_validation(cfg, corpus)?;
    let per_epoch = batches_per_epoch(&train_corpus, &spec);
    if per_epoch == 0 {
        return Err(Error::InsufficientData(format!(
            "{} training utterances do not fill a batch of {}",
            train_corpus.num_utterances(),
            spec.batch_size
        )));
    }
    let total_steps = per_epoch * cfg.epochs;
    let contrastive = cfg.effective_contrastive();

    let mut params = EncoderParams::init(&cfg.layer_dims(corpus.dim()), mix_seed(cfg.seed, &[INIT]))?;
    let mut extras = Extras {
        log_tau: contrastive.tau_init.ln(),
        class_weights: (cfg.loss == LossMode::AamSoftmax).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[CLASSES]));
            Array2::from_shape_fn((train_corpus.num_speakers(), cfg.embedding_dim), |_| {
                rng.sample(StandardNormal)
            })
        }),
    };
    let train_tau = cfg.loss.is_contrastive() && contrastive.tau_trainable;
    let mut sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    if train_tau {
        sizes.push(1);
    }
    if let Some(w) = &extras.class_weights {
        sizes.push(w.len());
    }
    let mut opt = OptimizerState::new(&sizes, cfg.adam);
    let batch_seed = mix_seed(cfg.seed, &[BATCHES]);

    let mut map = initial_map.cloned();
    let mut rosters = map.as_ref().map(|m| ClusterRosters::new(m, &train_corpus));
    let mut log = TrainLog::default();
    let mut last_report = None;
    for epoch in 0..cfg.epochs {
        let mut reclustered = false;
        if cfg.curriculum_switch_epoch == Some(epoch) && epoch > 0 && (cfg.recluster_on_switch || map.is_none()) {
            let m = cluster_with_model(&params, &train_corpus, cfg, epoch as u64)?;
            log::info!("epoch {epoch}: reclustered into {} groups", m.k());
            rosters = Some(ClusterRosters::new(&m, &train_corpus));
            map = Some(m);
            reclustered = true;
        }
        let mode = match cfg.curriculum_switch_epoch {
            Some(e) if epoch >= e => SamplerMode::Chns,
            Some(_) => SamplerMode::Random,
            None => cfg.sampler,
        };
        let sampler = match (mode, &rosters) {
            (SamplerMode::Chns, Some(r)) => Sampler::Chns(r),
            (SamplerMode::Chns, None) => return Err(Error::ClusterMapMissing),
            (SamplerMode::Random, _) => Sampler::Random,
        };
        let mut loss_sum = 0.0;
        let mut batches = Vec::with_capacity(per_epoch);
        for b in 0..per_epoch {
            let step = epoch * per_epoch + b;
            let lr = lr_at(step, total_steps, cfg.warmup_fraction, cfg.max_lr);
            let batch = plan_batch(sampler, &train_corpus, &spec, batch_seed, epoch as u32, b as u32)?;
            let cache = forward_cached(&params, &train_corpus.gather(&batch.utterances()))?;
            let emb = &cache.output;
            let tau = extras.log_tau.exp();
            let (value, grad_emb, grad_log_tau, grad_classes) = if let Some(w) = &extras.class_weights {
                let norms = w.map_axis(Axis(1), |r| r.dot(&r).sqrt());
                let wn = normalize_rows(w);
                let targets = batch.slot_speakers();
                let out = aam_softmax_loss(emb, &wn, &targets, &cfg.aam)?;
                let gw = normalization_backward(&wn, &norms, &out.grad_weights);
                (out.value, out.grad_embeddings, 0.0, Some(gw))
            } else {
                let s = emb.dot(&emb.t());
                let out = contrastive_loss(&s, &pair_labels(&batch), &contrastive, tau)?;
                let ge = similarity_grad_to_embeddings(&out.grad_similarity, emb);
                (out.value, ge, out.grad_log_tau, None)
            };
            let grads = backward(&params, &cache, &grad_emb)?;

            let tau_grad = [grad_log_tau];
            let mut grad_refs: Vec<&[f64]> = grads.tensors();
            let mut log_tau_slot = [extras.log_tau];
            let mut param_refs: Vec<&mut [f64]> = params.tensors_mut();
            if train_tau {
                grad_refs.push(&tau_grad);
                param_refs.push(&mut log_tau_slot);
            }
            if let (Some(w), Some(gw)) = (extras.class_weights.as_mut(), grad_classes.as_ref()) {
                grad_refs.push(gw.as_slice().unwrap());
                param_refs.push(w.as_slice_mut().unwrap());
            }
            adam_step(&mut opt, &mut param_refs, &grad_refs, lr)?;
            extras.log_tau = log_tau_slot[0].max(contrastive.tau_min.ln());

            let logged_tau = if cfg.loss.is_contrastive() { tau } else { 1.0 / cfg.aam.scale };
            log.steps.push(StepRecord {
                epoch,
                step,
                lr,
                tau: logged_tau,
                loss: value,
            });
            loss_sum += value;
            batches.push(batch);
        }
        let report = match &validation {
            Some(v) => Some(metric_report(
                &score_trials(&params, &v.trials, &v.corpus)?,
                &DcfParams::default(),
            )?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / per_epoch as f64,
            sampler: mode,
            reclustered,
            tau: extras.log_tau.exp(),
            val_eer: report.map(|r| r.eer),
            val_min_dcf: report.map(|r| r.min_dcf),
        };
        log::debug!(
            "epoch {epoch}: loss {:.5} tau {:.4} val_eer {:?}",
            record.mean_loss,
            record.tau,
            record.val_eer
        );
        log.epochs.push(record);
        last_report = report;
        hook(EpochEnd {
            record: &record,
            params: &params,
            train_corpus: &train_corpus,
            batches: &batches,
            new_map: if reclustered { map.as_ref() } else { None },
        })?;
    }
    Ok(TrainOutcome {
        params,
        log,
        cluster_map: map,
        tau: extras.log_tau.exp(),
        validation: last_report,
    })
}

/// Trains a random-batch SupCon model for [`warm_epochs`] of `cfg.epochs`
/// and clusters the corpus speakers with it.
pub fn warm_start(cfg: &TrainConfig, corpus: &Corpus) -> Result<(TrainOutcome, SpeakerClusterMap)> {
    let warm_cfg = TrainConfig {
        epochs: warm_epochs(cfg.epochs),
        sampler: SamplerMode::Random,
        curriculum_switch_epoch: None,
        loss: LossMode::SupCon,
        seed: mix_seed(cfg.seed, &[WARM]),
        ..cfg.clone()
    };
    let outcome = train(&warm_cfg, corpus, None)?;
    let map = cluster_with_model(&outcome.params, corpus, &warm_cfg, 0)?;
    Ok((outcome, map))
}

/// JSON sidecar of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: Option<usize>,
    pub tau: f64,
    pub config: TrainConfig,
}

/// Writes `<stem>.bin` and `<stem>.json` next to each other.
pub fn save_checkpoint_with_meta(bin: &Path, params: &EncoderParams, meta: &CheckpointMeta) -> Result<()> {
    save_checkpoint(bin, params)?;
    write_json(&bin.with_extension("json"), meta)
}

/// Embeds every utterance of `corpus` and returns the rows, in corpus order.
pub fn embed_corpus(params: &EncoderParams, corpus: &Corpus) -> Result<Array2<f64>> {
    forward(params, corpus.features())
}

/// Mean embedding norm deviation from one; a sanity probe for tests.
pub fn max_norm_deviation(emb: &Array2<f64>) -> f64 {
    emb.map_axis(Axis(1), |r| (r.dot(&r).sqrt() - 1.0).abs())
        .fold(0.0, |a: f64, &b| a.max(b))
}
