//! Multi-seed experiments: one directory per seed plus a JSON summary.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{finetune_online, pretrain_offline, FinetuneCounters, MetricLog, MetricRecord, ReplayBuffer, TrainConfig};
use crate::agents::ActorCritic;
use crate::envs::{Dataset, EnvSpec};
use crate::rng::{stream, Stream};
use crate::stats::{mean, median};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SeedStatus {
    Completed,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Digest of the config, environment, dataset and seed that produced it.
    pub fingerprint: String,
    #[serde(flatten)]
    pub status: SeedStatus,
    pub pretrain_final: Option<MetricRecord>,
    pub finetune_final: Option<MetricRecord>,
    /// Means over fine-tuning records past three quarters of the run.
    pub final_quarter_norm_score: Option<f64>,
    pub final_quarter_buffer_entropy: Option<f64>,
    pub counters: Option<FinetuneCounters>,
}

impl SeedResult {
    /// Normalized score at the end of the last phase that ran.
    pub fn final_norm_score(&self) -> Option<f64> {
        self.finetune_final.as_ref().or(self.pretrain_final.as_ref()).map(|r| r.norm_score)
    }

    pub fn final_return(&self) -> Option<f64> {
        self.finetune_final.as_ref().or(self.pretrain_final.as_ref()).map(|r| r.eval_return)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
    pub n: usize,
}

impl Aggregate {
    fn of(values: &[f64]) -> Option<Self> {
        (!values.is_empty()).then(|| Aggregate { mean: mean(values), median: median(values), n: values.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub env_id: String,
    pub seeds: Vec<SeedResult>,
    pub failed: Vec<u64>,
    pub final_norm_score: Option<Aggregate>,
    pub final_return: Option<Aggregate>,
    pub final_quarter_norm_score: Option<Aggregate>,
    pub final_quarter_buffer_entropy: Option<Aggregate>,
}

impl ExperimentSummary {
    pub fn from_results(env_id: String, seeds: Vec<SeedResult>) -> Self {
        let completed: Vec<&SeedResult> = seeds.iter().filter(|r| r.status == SeedStatus::Completed).collect();
        let collect = |f: &dyn Fn(&SeedResult) -> Option<f64>| -> Option<Aggregate> {
            Aggregate::of(&completed.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
        };
        Self {
            env_id,
            failed: seeds.iter().filter(|r| r.status != SeedStatus::Completed).map(|r| r.seed).collect(),
            final_norm_score: collect(&|r| r.final_norm_score()),
            final_return: collect(&|r| r.final_return()),
            final_quarter_norm_score: collect(&|r| r.final_quarter_norm_score),
            final_quarter_buffer_entropy: collect(&|r| r.final_quarter_buffer_entropy),
            seeds,
        }
    }
}

pub fn fingerprint(cfg: &TrainConfig, env: &EnvSpec, dataset: &Dataset, seed: u64) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg)?);
    h.update(serde_json::to_vec(env)?);
    h.update(serde_json::to_vec(&dataset.meta)?);
    for t in &dataset.transitions {
        h.update(serde_json::to_vec(t)?);
    }
    h.update(seed.to_le_bytes());
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn final_quarter(log: &MetricLog, total: usize) -> (Option<f64>, Option<f64>) {
    let recs = log.final_quarter(total);
    let scores: Vec<f64> = recs.iter().map(|r| r.norm_score).collect();
    let ent: Vec<f64> = recs.iter().filter_map(|r| r.buffer_entropy).collect();
    let m = |v: &[f64]| (!v.is_empty()).then(|| mean(v));
    (m(&scores), m(&ent))
}

fn agent_digest(agent: &ActorCritic) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    agent.save(&mut bytes)?;
    Ok(Sha256::digest(&bytes).to_vec())
}

fn reuse(path: &Path, fp: &str) -> Option<SeedResult> {
    let prev: SeedResult = serde_json::from_slice(&std::fs::read(path).ok()?).ok()?;
    (prev.fingerprint == fp && prev.status == SeedStatus::Completed).then_some(prev)
}

fn save_agent(agent: &ActorCritic, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    agent.save(&mut f)
}

fn check_pairing(env: &EnvSpec, dataset: &Dataset) -> Result<()> {
    if dataset.meta.state_dim != env.state_dim() || dataset.meta.action_space != env.action_space() {
        return Err(Error::Dimension(format!("dataset {} does not match environment {}", dataset.meta.env_id, env.id())));
    }
    Ok(())
}

/// Fresh agent for `seed`, drawn from its init stream.
pub fn initial_agent(cfg: &TrainConfig, env: &EnvSpec, seed: u64) -> Result<ActorCritic> {
    ActorCritic::new(cfg.agent.clone(), env.state_dim(), env.action_space(), &mut stream(seed, Stream::Init))
}

pub const PRETRAINED_AGENT: &str = "agent_pretrained.json";

/// Offline phase for one seed. With `dir`, writes `pretrain.csv` and the
/// pretrained agent; an interrupted run resumes from its checkpoint.
pub fn pretrain_seed(cfg: &TrainConfig, env: &EnvSpec, dataset: &Dataset, seed: u64, dir: Option<&Path>) -> Result<(ActorCritic, MetricLog)> {
    cfg.validate()?;
    check_pairing(env, dataset)?;
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
    }
    let anchors = env.anchors()?;
    let offline = ReplayBuffer::from_dataset(dataset, cfg.agent.gamma)?;
    let mut agent = initial_agent(cfg, env, seed)?;
    let log = pretrain_offline(&mut agent, &offline, env, &anchors, cfg, seed, dir)?;
    if let Some(d) = dir {
        log.write_csv(&d.join("pretrain.csv"))?;
        save_agent(&agent, &d.join(PRETRAINED_AGENT))?;
    }
    Ok((agent, log))
}

/// Online phase for one seed starting from `agent`. With `dir`, writes
/// `finetune.csv`, the final agent and `result.json`; a completed result
/// for the same inputs is returned without rerunning. Training failures
/// are recorded in the result rather than returned.
pub fn finetune_seed(
    cfg: &TrainConfig,
    env: &EnvSpec,
    dataset: &Dataset,
    mut agent: ActorCritic,
    pretrain_log: Option<&MetricLog>,
    seed: u64,
    dir: Option<&Path>,
) -> Result<SeedResult> {
    cfg.validate()?;
    let mut h = Sha256::new();
    h.update(fingerprint(cfg, env, dataset, seed)?);
    h.update(agent_digest(&agent)?);
    let fp: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let result_path = dir.map(|d| d.join("result.json"));
    if let Some(prev) = result_path.as_deref().and_then(|p| reuse(p, &fp)) {
        log::info!("seed {seed}: reusing finished run");
        return Ok(prev);
    }
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
    }
    let outcome = (|| -> Result<Option<(MetricLog, FinetuneCounters)>> {
        check_pairing(env, dataset)?;
        if cfg.online_steps == 0 {
            return Ok(None);
        }
        let anchors = env.anchors()?;
        let offline = ReplayBuffer::from_dataset(dataset, cfg.agent.gamma)?;
        let ft = finetune_online(&mut agent, env, &anchors, &offline, cfg, seed, dir)?;
        if let Some(d) = dir {
            ft.log.write_csv(&d.join("finetune.csv"))?;
            save_agent(&agent, &d.join("agent_final.json"))?;
        }
        Ok(Some((ft.log, ft.counters)))
    })();
    let pretrain_final = pretrain_log.and_then(|l| l.last().cloned());
    let result = match outcome {
        Ok(ft) => {
            let (q_score, q_ent) = ft.as_ref().map(|(log, _)| final_quarter(log, cfg.online_steps)).unwrap_or((None, None));
            SeedResult {
                seed,
                fingerprint: fp,
                status: SeedStatus::Completed,
                pretrain_final,
                finetune_final: ft.as_ref().and_then(|(log, _)| log.last().cloned()),
                final_quarter_norm_score: q_score,
                final_quarter_buffer_entropy: q_ent,
                counters: ft.map(|(_, c)| c),
            }
        }
        Err(e) => failed(seed, fp, &e),
    };
    if let Some(path) = result_path {
        std::fs::write(path, serde_json::to_vec_pretty(&result)?)?;
    }
    Ok(result)
}

fn failed(seed: u64, fingerprint: String, e: &Error) -> SeedResult {
    log::error!("seed {seed} failed: {e}");
    SeedResult {
        seed,
        fingerprint,
        status: SeedStatus::Failed { error: e.to_string() },
        pretrain_final: None,
        finetune_final: None,
        final_quarter_norm_score: None,
        final_quarter_buffer_entropy: None,
        counters: None,
    }
}

/// Pretrain then fine-tune one seed in `dir`.
pub fn run_seed(cfg: &TrainConfig, env: &EnvSpec, dataset: &Dataset, seed: u64, dir: Option<&Path>) -> Result<SeedResult> {
    match pretrain_seed(cfg, env, dataset, seed, dir) {
        Ok((agent, log)) => finetune_seed(cfg, env, dataset, agent, Some(&log), seed, dir),
        Err(e @ (Error::Io(_) | Error::Json(_))) => Err(e),
        Err(e) => {
            let result = failed(seed, fingerprint(cfg, env, dataset, seed)?, &e);
            if let Some(d) = dir {
                std::fs::create_dir_all(d)?;
                std::fs::write(d.join("result.json"), serde_json::to_vec_pretty(&result)?)?;
            }
            Ok(result)
        }
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Run every seed in order, isolating failures, and write `summary.json`
/// under `out` when given.
pub fn run_experiment(cfg: &TrainConfig, env: &EnvSpec, dataset: &Dataset, seeds: &[u64], out: Option<&Path>) -> Result<ExperimentSummary> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    cfg.validate()?;
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let dir = out.map(|o| seed_dir(o, seed));
        results.push(run_seed(cfg, env, dataset, seed, dir.as_deref())?);
    }
    let summary = ExperimentSummary::from_results(env.id(), results);
    if let Some(o) = out {
        std::fs::create_dir_all(o)?;
        std::fs::write(o.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    }
    Ok(summary)
}
