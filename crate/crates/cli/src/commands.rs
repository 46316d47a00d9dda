use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chns::clustering::{write_voiceprints, SpeakerClusterMap};
use chns::encoder::{
    load_checkpoint, save_checkpoint_with_meta, train_with_hook, voiceprints_and_map, warm_start, CheckpointMeta,
    EncoderParams, LossMode, SamplerMode, TrainConfig,
};
use chns::evalkit::{
    generate_trials, metric_report, negative_similarity_histogram, read_trials, score_trials, write_trials,
    MetricReport, ScoredTrials, Trial,
};
use chns::io::{load_corpus, read_json, save_corpus, write_json};
use chns::sampler::{plan_batch, write_batch_plan, Batch, ClusterRosters, Sampler};
use chns::seeds::mix_seed;
use chns::synthdata::{corpus_stats, generate_corpus, generate_eval_corpus};
use chns::Corpus;
use log::info;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{self, ExperimentConfig, PlanExport};
use crate::layout::{CorpusDir, RunDir};
use crate::{CliError, Common};

const TRIALS: u64 = 11;
const GRID: u64 = 12;
const HISTOGRAMS: u64 = 13;

/// Resolves the config and writes its snapshot into the run directory. An
/// existing snapshot that differs is only replaced with `--force`.
fn setup(common: &Common) -> Result<(ExperimentConfig, RunDir)> {
    let cfg = config::resolve(common.config.as_deref(), &common.set, common.seed)?;
    let run = RunDir::new(&common.out);
    fs::create_dir_all(run.root()).with_context(|| format!("creating {}", run.root().display()))?;
    let text = config::to_toml(&cfg)?;
    let path = run.config();
    if path.exists() && !common.force && fs::read_to_string(&path).ok().as_deref() != Some(text.as_str()) {
        return Err(CliError::RefusedOverwrite(path).into());
    }
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok((cfg, run))
}

/// Refuses to clobber outputs unless `--force`, then creates their parents.
fn claim(paths: &[PathBuf], force: bool) -> Result<()> {
    for p in paths {
        if p.exists() && !force {
            return Err(CliError::RefusedOverwrite(p.clone()).into());
        }
    }
    for p in paths {
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    Ok(())
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Missing(path).into())
    }
}

fn corpus_dir(cfg: &ExperimentConfig, run: &RunDir) -> CorpusDir {
    CorpusDir::new(cfg.paths.corpus.clone().unwrap_or_else(|| run.corpus_dir()))
}

fn load_pair((manifest, features): (PathBuf, PathBuf)) -> Result<Corpus> {
    let manifest = require(manifest)?;
    let features = require(features)?;
    Ok(load_corpus(&manifest, &features)?)
}

fn load_model(cfg: &ExperimentConfig, run: &RunDir) -> Result<EncoderParams> {
    let path = require(cfg.paths.checkpoint.clone().unwrap_or_else(|| run.checkpoint()))?;
    Ok(load_checkpoint(&path)?)
}

fn meta(cfg: &TrainConfig, epoch: Option<usize>, tau: f64) -> CheckpointMeta {
    CheckpointMeta {
        seed: cfg.seed,
        epoch,
        tau,
        config: cfg.clone(),
    }
}

pub fn gen_data(common: &Common) -> Result<()> {
    let (cfg, run) = setup(common)?;
    let dir = CorpusDir::new(run.corpus_dir());
    let (tm, tf) = dir.train();
    let (em, ef) = dir.eval();
    claim(&[tm.clone(), tf.clone(), em.clone(), ef.clone(), dir.stats()], common.force)?;
    let train = generate_corpus(&cfg.corpus, cfg.seed)?;
    let eval = generate_eval_corpus(&cfg.corpus, cfg.seed, cfg.eval.speakers_per_family)?;
    save_corpus(&train.corpus, &tm, &tf)?;
    save_corpus(&eval.corpus, &em, &ef)?;
    let stats = corpus_stats(&train.corpus)?;
    write_json(&dir.stats(), &stats)?;
    println!(
        "corpus: {} speakers, {} utterances; eval: {} speakers; within-family cosine {:.3}",
        train.corpus.num_speakers(),
        train.corpus.num_utterances(),
        eval.corpus.num_speakers(),
        stats.within_family_cosine.unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn cluster(common: &Common) -> Result<()> {
    let (cfg, run) = setup(common)?;
    let corpus = load_pair(corpus_dir(&cfg, &run).train())?;
    let (vp_bin, vp_side) = run.voiceprints();
    let mut outputs = vec![vp_bin.clone(), vp_side.clone(), run.cluster_map()];
    let explicit = cfg.paths.checkpoint.clone().or_else(|| run.checkpoint().exists().then(|| run.checkpoint()));
    if explicit.is_none() {
        outputs.push(run.warm_checkpoint());
    }
    claim(&outputs, common.force)?;
    let params = match explicit {
        Some(p) => load_checkpoint(&require(p)?)?,
        None => {
            info!("no checkpoint; warm-starting a random-batch model");
            let (warm, _) = warm_start(&cfg.train, &corpus)?;
            save_checkpoint_with_meta(&run.warm_checkpoint(), &warm.params, &meta(&cfg.train, None, warm.tau))?;
            warm.params
        }
    };
    let (vps, map) = voiceprints_and_map(&params, &corpus, &cfg.train, 0)?;
    write_voiceprints(&vp_bin, &vp_side, &vps)?;
    map.save(&run.cluster_map())?;
    println!(
        "clusters: k={} over {} speakers, mean roster {:.2}, inertia {:.4}",
        map.k(),
        map.num_speakers(),
        map.mean_roster_size(),
        map.inertia()
    );
    Ok(())
}

/// The map CHNS starts from: `paths.cluster_map`, else the run's own.
fn initial_map(cfg: &ExperimentConfig, run: &RunDir) -> Result<Option<SpeakerClusterMap>> {
    if !cfg.train.chns_from_start() {
        return Ok(None);
    }
    let path = match &cfg.paths.cluster_map {
        Some(p) => require(p.clone())?,
        None if run.cluster_map().exists() => run.cluster_map(),
        None => {
            return Err(CliError::Config(
                "CHNS from the first epoch needs paths.cluster_map (or run `cluster` first)".into(),
            )
            .into())
        }
    };
    Ok(Some(SpeakerClusterMap::load(&path)?))
}

pub fn train(common: &Common) -> Result<()> {
    let (cfg, run) = setup(common)?;
    let corpus = load_pair(corpus_dir(&cfg, &run).train())?;
    let map = initial_map(&cfg, &run)?;
    claim(&[run.checkpoint(), run.train_log(), run.epoch_log()], common.force)?;
    let tcfg = &cfg.train;
    let mut last_sampler: Option<SamplerMode> = None;
    let outcome = train_with_hook(tcfg, &corpus, map.as_ref(), |end| {
        let e = end.record.epoch;
        let export = match cfg.output.batch_plans {
            PlanExport::None => false,
            PlanExport::All => true,
            PlanExport::Changes => last_sampler != Some(end.record.sampler),
        };
        last_sampler = Some(end.record.sampler);
        if export {
            write_batch_plan(&run.batch_plan(e), end.train_corpus, e as u32, end.batches)?;
        }
        if let Some(m) = end.new_map {
            m.save(&run.epoch_map(e))?;
        }
        if cfg.output.epoch_checkpoints {
            save_checkpoint_with_meta(&run.epoch_checkpoint(e), end.params, &meta(tcfg, Some(e), end.record.tau))?;
        }
        info!(
            "epoch {e}: loss {:.4}, tau {:.4}, sampler {}{}",
            end.record.mean_loss,
            end.record.tau,
            end.record.sampler,
            end.record.val_eer.map(|v| format!(", val EER {:.4}", v)).unwrap_or_default()
        );
        Ok(())
    })?;
    save_checkpoint_with_meta(&run.checkpoint(), &outcome.params, &meta(tcfg, None, outcome.tau))?;
    outcome.log.write_steps_csv(&run.train_log())?;
    outcome.log.write_epochs_csv(&run.epoch_log())?;
    if let Some(m) = &outcome.cluster_map {
        m.save(&run.final_map())?;
    }
    let last = outcome.log.epochs.last().map(|e| e.mean_loss).unwrap_or(f64::NAN);
    println!(
        "trained {} epochs ({}), final loss {:.4}, tau {:.4}",
        tcfg.epochs,
        strategy(tcfg),
        last,
        outcome.tau
    );
    Ok(())
}

fn eval_trials(cfg: &ExperimentConfig, eval: &Corpus) -> Result<Vec<Trial>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[TRIALS]));
    Ok(generate_trials(eval, cfg.eval.policy, cfg.eval.n_target, cfg.eval.n_nontarget, &mut rng)?)
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    enroll: &'a str,
    test: &'a str,
    target: u8,
    score: f64,
}

fn write_scores(path: &Path, trials: &[Trial], scored: &ScoredTrials) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for (t, &s) in trials.iter().zip(&scored.scores) {
        w.serialize(ScoreRow {
            enroll: t.enroll.as_str(),
            test: t.test.as_str(),
            target: t.target as u8,
            score: s,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn eval(common: &Common) -> Result<()> {
    let (cfg, run) = setup(common)?;
    let eval = load_pair(corpus_dir(&cfg, &run).eval())?;
    let params = load_model(&cfg, &run)?;
    claim(&[run.trials(), run.scores(), run.metrics()], common.force)?;
    let trials = eval_trials(&cfg, &eval)?;
    write_trials(&run.trials(), &trials)?;
    let trials = read_trials(&run.trials())?;
    let scored = score_trials(&params, &trials, &eval)?;
    write_scores(&run.scores(), &trials, &scored)?;
    let report = metric_report(&scored, &cfg.eval.dcf)?;
    write_json(&run.metrics(), &report)?;
    println!(
        "EER {:.4} (threshold {:.4}), minDCF {:.4} over {} target / {} non-target trials",
        report.eer, report.eer_threshold, report.min_dcf, report.n_target, report.n_nontarget
    );
    Ok(())
}

#[derive(Serialize)]
struct GridRow {
    k: usize,
    hard_ratio: f64,
    eer: Option<f64>,
    min_dcf: Option<f64>,
    seed: u64,
    status: String,
}

/// One warm model clusters the corpus once per `k`; every cell then trains a
/// CHNS model from scratch on its own derived seed.
pub fn grid(common: &Common) -> Result<()> {
    let (cfg, run) = setup(common)?;
    let dir = corpus_dir(&cfg, &run);
    let corpus = load_pair(dir.train())?;
    let eval = load_pair(dir.eval())?;
    if cfg.grid.k.is_empty() || cfg.grid.hard_ratio.is_empty() {
        return Err(CliError::Config("grid.k and grid.hard_ratio must be non-empty".into()).into());
    }
    claim(&[run.grid()], common.force)?;
    let trials = eval_trials(&cfg, &eval)?;
    let warm_cfg = TrainConfig {
        seed: mix_seed(cfg.seed, &[GRID]),
        ..cfg.train.clone()
    };
    let (warm, _) = warm_start(&warm_cfg, &corpus)?;
    let mut w = csv::Writer::from_path(run.grid()).with_context(|| format!("writing {}", run.grid().display()))?;
    for &k in &cfg.grid.k {
        let map = voiceprints_and_map(&warm.params, &corpus, &TrainConfig { k, ..warm_cfg.clone() }, 0);
        for &hr in &cfg.grid.hard_ratio {
            let seed = mix_seed(cfg.seed, &[k as u64, hr.to_bits()]);
            let cell = TrainConfig {
                k,
                hard_ratio: hr,
                sampler: SamplerMode::Chns,
                curriculum_switch_epoch: None,
                seed,
                ..cfg.train.clone()
            };
            let result: Result<MetricReport> = match &map {
                Ok((_, m)) => run_cell(&cell, &corpus, m, &eval, &trials, &cfg),
                Err(e) => Err(anyhow::anyhow!("clustering failed: {e}")),
            };
            let row = match result {
                Ok(r) => {
                    info!("k={k} hard_ratio={hr}: EER {:.4}, minDCF {:.4}", r.eer, r.min_dcf);
                    GridRow {
                        k,
                        hard_ratio: hr,
                        eer: Some(r.eer),
                        min_dcf: Some(r.min_dcf),
                        seed,
                        status: "ok".into(),
                    }
                }
                Err(e) => GridRow {
                    k,
                    hard_ratio: hr,
                    eer: None,
                    min_dcf: None,
                    seed,
                    status: format!("failed: {e:#}"),
                },
            };
            w.serialize(row)?;
            w.flush()?;
        }
    }
    println!("grid: {} cells written to {}", cfg.grid.k.len() * cfg.grid.hard_ratio.len(), run.grid().display());
    Ok(())
}

fn run_cell(
    cell: &TrainConfig,
    corpus: &Corpus,
    map: &SpeakerClusterMap,
    eval: &Corpus,
    trials: &[Trial],
    cfg: &ExperimentConfig,
) -> Result<MetricReport> {
    let out = chns::encoder::train(cell, corpus, Some(map))?;
    let scored = score_trials(&out.params, trials, eval)?;
    Ok(metric_report(&scored, &cfg.eval.dcf)?)
}

/// Human label of a training configuration.
pub fn strategy(cfg: &TrainConfig) -> String {
    let base = match cfg.loss {
        LossMode::AamSoftmax => return "AAMSoftmax".into(),
        LossMode::SupCon => "SupCon",
        LossMode::Hscl => "H-SCL",
    };
    match (cfg.sampler, cfg.curriculum_switch_epoch) {
        (SamplerMode::Random, _) => base.into(),
        (SamplerMode::Chns, None | Some(0)) => format!("{base} + CHNS"),
        (SamplerMode::Chns, Some(e)) => format!("{base} + CHNS (switch at epoch {e})"),
    }
}

#[derive(Serialize)]
struct TableRow {
    run: String,
    strategy: String,
    eer: Option<f64>,
    min_dcf: Option<f64>,
    n_target: Option<usize>,
    n_nontarget: Option<usize>,
    status: String,
}

#[derive(Serialize)]
struct HistRow<'a> {
    run: &'a str,
    mode: &'a str,
    bin_lo: f64,
    bin_hi: f64,
    mass: f64,
}

/// Negative-pair similarity under a run's model, for random and CHNS batches.
fn run_histograms(
    run: &RunDir,
    run_cfg: &ExperimentConfig,
    report_cfg: &ExperimentConfig,
) -> Result<Vec<(&'static str, chns::evalkit::NegativeHistogram)>> {
    let corpus = load_pair(corpus_dir(run_cfg, run).train())?;
    let params = load_model(run_cfg, run)?;
    let map = if run.final_map().exists() {
        SpeakerClusterMap::load(&run.final_map())?
    } else if run.cluster_map().exists() {
        SpeakerClusterMap::load(&run.cluster_map())?
    } else {
        voiceprints_and_map(&params, &corpus, &run_cfg.train, 0)?.1
    };
    let rosters = ClusterRosters::new(&map, &corpus);
    let spec = run_cfg.train.batch_spec();
    let seed = mix_seed(report_cfg.seed, &[HISTOGRAMS]);
    let mut out = Vec::new();
    for (mode, sampler) in [("random", Sampler::Random), ("chns", Sampler::Chns(&rosters))] {
        let batches: Vec<Batch> = (0..report_cfg.report.batches as u32)
            .map(|i| plan_batch(sampler, &corpus, &spec, seed, 0, i))
            .collect::<chns::Result<_>>()?;
        out.push((mode, negative_similarity_histogram(&batches, &params, &corpus, report_cfg.report.bins)?));
    }
    Ok(out)
}

pub fn report(common: &Common, runs: &[PathBuf]) -> Result<()> {
    if runs.is_empty() {
        return Err(CliError::Config("report needs at least one run directory".into()).into());
    }
    let (cfg, out) = setup(common)?;
    let table_path = out.report_dir().join("table.csv");
    let hist_path = out.report_dir().join("histograms.csv");
    claim(&[table_path.clone(), hist_path.clone()], common.force)?;
    let mut table = csv::Writer::from_path(&table_path)?;
    let mut hists = csv::Writer::from_path(&hist_path)?;
    for dir in runs {
        let run = RunDir::new(dir);
        let name = dir.display().to_string();
        let text = fs::read_to_string(require(run.config())?)?;
        let run_cfg = config::from_toml(&text)?;
        let row = match read_json::<MetricReport>(&run.metrics()) {
            Ok(r) => TableRow {
                run: name.clone(),
                strategy: strategy(&run_cfg.train),
                eer: Some(r.eer),
                min_dcf: Some(r.min_dcf),
                n_target: Some(r.n_target),
                n_nontarget: Some(r.n_nontarget),
                status: "ok".into(),
            },
            Err(e) => TableRow {
                run: name.clone(),
                strategy: strategy(&run_cfg.train),
                eer: None,
                min_dcf: None,
                n_target: None,
                n_nontarget: None,
                status: format!("no metrics: {e}"),
            },
        };
        table.serialize(row)?;
        match run_histograms(&run, &run_cfg, &cfg) {
            Ok(hs) => {
                for (mode, h) in hs {
                    println!("{name} {mode}: mean negative cosine {:.4}", h.mean.unwrap_or(f64::NAN));
                    for (b, &mass) in h.mass.iter().enumerate() {
                        hists.serialize(HistRow {
                            run: &name,
                            mode,
                            bin_lo: h.edges[b],
                            bin_hi: h.edges[b + 1],
                            mass,
                        })?;
                    }
                }
            }
            Err(e) => log::warn!("{name}: no histograms ({e:#})"),
        }
    }
    table.flush()?;
    hists.flush()?;
    println!("report: {} runs -> {}", runs.len(), out.report_dir().display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_sixteen_cells() {
        let g = ExperimentConfig::default().grid;
        assert_eq!(g.k.len() * g.hard_ratio.len(), 16);
    }

    #[test]
    fn strategy_labels_cover_the_comparison_table() {
        let base = TrainConfig::default();
        let with = |loss, sampler| strategy(&TrainConfig { loss, sampler, ..base.clone() });
        let labels = [
            with(LossMode::AamSoftmax, SamplerMode::Random),
            with(LossMode::SupCon, SamplerMode::Random),
            with(LossMode::Hscl, SamplerMode::Random),
            with(LossMode::SupCon, SamplerMode::Chns),
            with(LossMode::Hscl, SamplerMode::Chns),
        ];
        assert_eq!(labels, ["AAMSoftmax", "SupCon", "H-SCL", "SupCon + CHNS", "H-SCL + CHNS"]);
    }
}
