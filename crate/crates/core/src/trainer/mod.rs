//! Offline pretraining, online fine-tuning with reward augmentation on the
//! online share of each batch, evaluation, and multi-seed experiments.

mod buffer;
mod metrics;
mod run;

use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample as sample_without_replacement;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use buffer::{build_batch, ReplayBuffer, Source};
pub use metrics::{MetricLog, MetricRecord, METRIC_HEADER};
pub use run::{
    finetune_seed, fingerprint, initial_agent, pretrain_seed, run_experiment, run_seed, seed_dir, Aggregate, ExperimentSummary,
    SeedResult, SeedStatus, PRETRAINED_AGENT,
};

use crate::agents::{ActorCritic, AgentConfig, Batch};
use crate::entropy::{buffer_entropy_estimate, modify_rewards, qcse_intrinsic, EntropyConfig};
use crate::envs::{Anchors, EnvSpec};
use crate::rng::{stream, Stream, StreamRng, StreamState};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub offline_steps: usize,
    pub online_steps: usize,
    pub batch_size: usize,
    /// Offline fraction of every fine-tuning batch (rounded down).
    pub mix_ratio: f64,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Environment steps collected before the first fine-tuning update;
    /// defaults to the online share of a batch.
    pub warmup_steps: Option<usize>,
    pub online_capacity: usize,
    /// Neighbour count of the buffer-entropy monitor.
    pub monitor_k: usize,
    pub monitor_samples: usize,
    /// Pretraining checkpoint period, when an output directory is given.
    pub checkpoint_interval: usize,
    /// Record elapsed milliseconds; off by default so logs are reproducible.
    pub log_wall_clock: bool,
    /// Condition the bonus on separately initialised critics.
    pub scratch_condition_q: bool,
    pub entropy: EntropyConfig,
    pub agent: AgentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            offline_steps: 20_000,
            online_steps: 50_000,
            batch_size: 256,
            mix_ratio: 0.5,
            eval_interval: 1000,
            eval_episodes: 20,
            warmup_steps: None,
            online_capacity: 1_000_000,
            monitor_k: 10,
            monitor_samples: 5000,
            checkpoint_interval: 5000,
            log_wall_clock: false,
            scratch_condition_q: false,
            entropy: EntropyConfig::default(),
            agent: AgentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn offline_share(&self) -> usize {
        (self.mix_ratio * self.batch_size as f64).floor() as usize
    }

    pub fn online_share(&self) -> usize {
        self.batch_size - self.offline_share()
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.online_share())
    }

    /// The config with every setting that only affects fine-tuning reset,
    /// so pretraining runs differing only online share checkpoints.
    pub fn pretraining_view(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            online_steps: d.online_steps,
            mix_ratio: d.mix_ratio,
            warmup_steps: d.warmup_steps,
            online_capacity: d.online_capacity,
            monitor_k: d.monitor_k,
            monitor_samples: d.monitor_samples,
            scratch_condition_q: d.scratch_condition_q,
            entropy: d.entropy,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return bad(format!("mix_ratio {} outside [0, 1]", self.mix_ratio));
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return bad("eval_interval and eval_episodes must be positive".into());
        }
        if self.online_capacity == 0 || self.monitor_k == 0 || self.checkpoint_interval == 0 {
            return bad("online_capacity, monitor_k and checkpoint_interval must be positive".into());
        }
        self.entropy.validate()?;
        self.agent.validate()?;
        let k = self.entropy.k;
        if self.entropy.enabled() {
            if self.batch_size < 2 * (k + 1) {
                return bad(format!("batch_size {} below 2(k + 1) = {}", self.batch_size, 2 * (k + 1)));
            }
            let online = self.online_share();
            if online > 0 && online <= k {
                return bad(format!("online share {online} of the batch is too small for k = {k}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean_return: f64,
    pub norm_score: f64,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over a combined word
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic-mode rollouts with episode seeds derived from `seed`.
pub fn evaluate_policy(agent: &ActorCritic, env: &EnvSpec, anchors: &Anchors, episodes: usize, seed: u64) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("need at least one evaluation episode".into()));
    }
    let mut e = env.build()?;
    // the deterministic mode draws nothing from this stream
    let mut unused = stream(seed, Stream::Eval);
    let mut total = 0.0;
    for ep in 0..episodes {
        let mut s = e.reset(mix(seed, ep as u64));
        loop {
            let a = agent.select_action(&s, false, &mut unused)?;
            let t = e.step(&a)?;
            total += t.reward;
            if t.ends_episode() {
                break;
            }
            s = t.next_state;
        }
    }
    let mean_return = total / episodes as f64;
    Ok(EvalResult { mean_return, norm_score: anchors.normalize(mean_return) })
}

#[derive(Default)]
struct Accum {
    n: usize,
    critic: f64,
    actor: f64,
    q: f64,
    intrinsic: f64,
    intrinsic_n: usize,
}

impl Accum {
    fn add(&mut self, s: &crate::agents::UpdateStats) {
        self.n += 1;
        self.critic += s.critic_loss;
        self.actor += s.actor_loss;
        self.q += s.mean_q;
    }

    fn take(&mut self) -> (f64, f64, f64, f64) {
        let n = self.n.max(1) as f64;
        let m = self.intrinsic_n.max(1) as f64;
        let out = (self.critic / n, self.actor / n, self.q / n, self.intrinsic / m);
        *self = Accum::default();
        out
    }
}

fn check_finite(stats: &crate::agents::UpdateStats) -> Result<()> {
    if [stats.critic_loss, stats.actor_loss, stats.mean_q].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("training losses {stats:?}")));
    }
    Ok(())
}

fn write_diagnostic(agent: &ActorCritic, dir: Option<&Path>, phase: &str) {
    if let Some(dir) = dir {
        let path = dir.join(format!("diagnostic_{phase}.json"));
        match std::fs::File::create(&path).map_err(Error::from).and_then(|mut f| agent.save(&mut f)) {
            Ok(()) => log::error!("wrote diagnostic checkpoint {}", path.display()),
            Err(e) => log::error!("could not write diagnostic checkpoint: {e}"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PretrainCheckpoint {
    config: TrainConfig,
    seed: u64,
    step: usize,
    agent: ActorCritic,
    log: MetricLog,
    rng: StreamState,
}

const PRETRAIN_CHECKPOINT: &str = "pretrain_checkpoint.json";

fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    serde_json::to_writer(std::io::BufWriter::new(std::fs::File::create(&tmp)?), value)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// `offline_steps` updates on offline batches only, evaluating every
/// `eval_interval` steps. With `dir`, progress is checkpointed there and a
/// checkpoint from the same config and seed (up to a smaller step budget)
/// is resumed.
pub fn pretrain_offline(
    agent: &mut ActorCritic,
    offline: &ReplayBuffer,
    env: &EnvSpec,
    anchors: &Anchors,
    cfg: &TrainConfig,
    seed: u64,
    dir: Option<&Path>,
) -> Result<MetricLog> {
    cfg.validate()?;
    if offline.is_empty() {
        return Err(Error::InvalidArgument("offline buffer is empty".into()));
    }
    let mut rng = stream(seed, Stream::Sampling);
    let mut log = MetricLog::default();
    let mut start = 0;
    let ckpt_path = dir.map(|d| d.join(PRETRAIN_CHECKPOINT));
    if let Some(path) = ckpt_path.as_ref().filter(|p| p.exists()) {
        let ck: PretrainCheckpoint = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))
            .map_err(|e| Error::Schema(format!("pretraining checkpoint: {e}")))?;
        // a checkpoint may be extended to more steps, never shortened
        let mut same = ck.config.pretraining_view();
        same.offline_steps = cfg.offline_steps;
        if same == cfg.pretraining_view() && ck.seed == seed && ck.step <= cfg.offline_steps {
            log::info!("resuming pretraining at step {}", ck.step);
            *agent = ck.agent;
            log = ck.log;
            rng = ck.rng.restore();
            start = ck.step;
        } else {
            log::warn!("ignoring pretraining checkpoint from a different config");
        }
    }
    let clock = Instant::now();
    let mut acc = Accum::default();
    let state_dim = agent.state_dim;
    for step in start + 1..=cfg.offline_steps {
        let idx = offline.sample_indices(cfg.batch_size, &mut rng)?;
        let picks: Vec<_> = idx.iter().map(|&i| (offline, i)).collect();
        let (batch, _) = build_batch(&picks, state_dim, agent.action_space)?;
        let stats = agent.update(&batch, &mut rng).and_then(|s| check_finite(&s).map(|_| s));
        let stats = match stats {
            Ok(s) => s,
            Err(e) => {
                write_diagnostic(agent, dir, "pretrain");
                return Err(e);
            }
        };
        acc.add(&stats);
        if step % cfg.eval_interval == 0 || step == cfg.offline_steps {
            let eval = evaluate_policy(agent, env, anchors, cfg.eval_episodes, mix(seed, step as u64))?;
            let (critic_loss, actor_loss, mean_q, _) = acc.take();
            log.push(MetricRecord {
                step,
                critic_loss,
                actor_loss,
                mean_q,
                mean_intrinsic: 0.0,
                buffer_entropy: None,
                eval_return: eval.mean_return,
                norm_score: eval.norm_score,
                wall_ms: if cfg.log_wall_clock { clock.elapsed().as_millis() as u64 } else { 0 },
            });
        }
        if let Some(path) = &ckpt_path {
            if step % cfg.checkpoint_interval == 0 || step == cfg.offline_steps {
                let ck = PretrainCheckpoint {
                    config: cfg.pretraining_view(),
                    seed,
                    step,
                    agent: agent.clone(),
                    log: log.clone(),
                    rng: StreamState::capture(&rng),
                };
                save_json(&ck, path)?;
            }
        }
    }
    Ok(log)
}

/// Bookkeeping that backs the online-only and boundedness guarantees.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneCounters {
    pub env_steps: usize,
    pub online_pushes: u64,
    pub updates: usize,
    pub augmented_batches: usize,
    /// Offline rows whose reward was changed; always 0.
    pub offline_augmented: usize,
    /// Largest `|r_mod - r|` seen.
    pub max_reward_shift: f64,
}

pub struct FinetuneOutcome {
    pub log: MetricLog,
    pub counters: FinetuneCounters,
    pub online: ReplayBuffer,
}

/// Replace the rewards of online rows by `lambda tanh(bonus) + r`. Returns
/// the raw bonus of those rows.
fn augment(
    agent: &ActorCritic,
    batch: &mut Batch,
    sources: &[Source],
    cfg: &TrainConfig,
    rng: &mut StreamRng,
    counters: &mut FinetuneCounters,
) -> Result<Vec<f64>> {
    let online: Vec<usize> = (0..batch.len()).filter(|&i| sources[i] == Source::Online).collect();
    if online.is_empty() {
        return Ok(Vec::new());
    }
    let states = batch.states.select(ndarray::Axis(0), &online);
    let actions = match &batch.actions {
        crate::agents::Actions::Discrete(a) => crate::agents::Actions::Discrete(online.iter().map(|&i| a[i]).collect()),
        crate::agents::Actions::Continuous(a) => crate::agents::Actions::Continuous(a.select(ndarray::Axis(0), &online)),
    };
    let cond = agent.condition_values(states.view(), &actions, cfg.entropy.condition_mode, cfg.scratch_condition_q, rng)?;
    let bonus = qcse_intrinsic(states.view(), &cond, &cfg.entropy)?.rewards;
    let base: Vec<f64> = online.iter().map(|&i| batch.rewards[i]).collect();
    let modified = modify_rewards(&base, &bonus, cfg.entropy.lambda)?;
    let before = batch.rewards.clone();
    for (j, &i) in online.iter().enumerate() {
        batch.rewards[i] = modified[j];
    }
    for i in 0..batch.len() {
        let shift = (batch.rewards[i] - before[i]).abs();
        if sources[i] == Source::Offline && shift != 0.0 {
            counters.offline_augmented += 1;
        }
        counters.max_reward_shift = counters.max_reward_shift.max(shift);
    }
    counters.augmented_batches += 1;
    Ok(bonus)
}

/// Online fine-tuning: one environment step per iteration, then (after
/// warm-up) one update on a mixed batch whose online rows carry the
/// intrinsic bonus.
pub fn finetune_online(
    agent: &mut ActorCritic,
    env: &EnvSpec,
    anchors: &Anchors,
    offline: &ReplayBuffer,
    cfg: &TrainConfig,
    seed: u64,
    dir: Option<&Path>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let offline_n = cfg.offline_share();
    let online_n = cfg.online_share();
    if offline_n > 0 && offline.is_empty() {
        return Err(Error::InvalidArgument("mixed batches need a nonempty offline buffer".into()));
    }
    let mut env_rng = stream(seed, Stream::Env);
    let mut act_rng = stream(seed, Stream::Behavior);
    let mut rng = stream(seed, Stream::Sampling);
    let mut intrinsic_rng = stream(seed, Stream::Intrinsic);
    let mut monitor_rng = stream(seed, Stream::Monitor);
    if cfg.scratch_condition_q && agent.scratch.is_none() {
        agent.enable_scratch_critics(&mut intrinsic_rng)?;
    }
    let mut online = ReplayBuffer::new(Source::Online, cfg.online_capacity, agent.config.gamma)?;
    let mut counters = FinetuneCounters::default();
    let mut log = MetricLog::default();
    let mut acc = Accum::default();
    let clock = Instant::now();
    let mut e = env.build()?;
    let mut state = e.reset(env_rng.random());
    let bonus_on = cfg.entropy.enabled();
    for step in 1..=cfg.online_steps {
        let action = agent.select_action(&state, true, &mut act_rng)?;
        let t = e.step(&action)?;
        let ends = t.ends_episode();
        state = if ends { e.reset(env_rng.random()) } else { t.next_state.clone() };
        online.push(t);
        counters.env_steps += 1;
        counters.online_pushes = online.pushed();

        if step >= cfg.warmup() && online.len() >= online_n.max(1) {
            let mut picks = Vec::with_capacity(cfg.batch_size);
            for i in offline.sample_indices(offline_n, &mut rng)? {
                picks.push((offline, i));
            }
            for i in online.sample_indices(online_n, &mut rng)? {
                picks.push((&online, i));
            }
            let (mut batch, sources) = build_batch(&picks, agent.state_dim, agent.action_space)?;
            if bonus_on {
                let bonus = augment(agent, &mut batch, &sources, cfg, &mut intrinsic_rng, &mut counters)?;
                acc.intrinsic += bonus.iter().sum::<f64>() / bonus.len().max(1) as f64;
                acc.intrinsic_n += 1;
            }
            let result = agent.update(&batch, &mut rng).and_then(|s| check_finite(&s).map(|_| s));
            let stats = match result {
                Ok(s) => s,
                Err(err) => {
                    write_diagnostic(agent, dir, "finetune");
                    return Err(err);
                }
            };
            if cfg.scratch_condition_q && bonus_on {
                let (plain, _) = build_batch(&picks, agent.state_dim, agent.action_space)?;
                agent.update_scratch(&plain, &mut intrinsic_rng)?;
            }
            acc.add(&stats);
            counters.updates += 1;
        }

        if step % cfg.eval_interval == 0 || step == cfg.online_steps {
            let eval = evaluate_policy(agent, env, anchors, cfg.eval_episodes, mix(seed ^ 0x6f6e6c69, step as u64))?;
            let buffer_entropy = if online.len() > cfg.monitor_k {
                let m = cfg.monitor_samples.min(online.len());
                let idx = sample_without_replacement(&mut monitor_rng, online.len(), m).into_vec();
                Some(buffer_entropy_estimate(online.states(&idx, agent.state_dim).view(), cfg.monitor_k)?)
            } else {
                None
            };
            let (critic_loss, actor_loss, mean_q, mean_intrinsic) = acc.take();
            log.push(MetricRecord {
                step,
                critic_loss,
                actor_loss,
                mean_q,
                mean_intrinsic,
                buffer_entropy,
                eval_return: eval.mean_return,
                norm_score: eval.norm_score,
                wall_ms: if cfg.log_wall_clock { clock.elapsed().as_millis() as u64 } else { 0 },
            });
        }
    }
    Ok(FinetuneOutcome { log, counters, online })
}
