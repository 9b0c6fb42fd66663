//! Offline datasets and their on-disk format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "QCSEDSET"
//! hlen     u32      length of the JSON header
//! header   hlen     JSON: DatasetMeta
//! count    u64      number of records (must equal header.size)
//! records  count x { len: u32, payload: len bytes }
//! ```
//!
//! A record payload is `state (f64 x d) | action | reward f64 |
//! next_state (f64 x d) | flags u8` where the action is either
//! `0u8, index u32` or `1u8, n u32, f64 x n` and flag bit 0 is `done`,
//! bit 1 is `truncated`. Floats are stored as raw IEEE-754 bits.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::behavior::{run_episode, train_medium, BehaviorPolicy};
use super::{Action, ActionSpace, Behavior, EnvSpec, Transition};
use crate::rng::{self, Stream};
use crate::{Error, Result};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"QCSEDSET";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub env_id: String,
    pub env: EnvSpec,
    pub behavior: Behavior,
    pub seed: u64,
    pub size: usize,
    pub state_dim: usize,
    pub action_space: ActionSpace,
    /// Normalised score of the behavior policy (NaN-free; 0 for random).
    pub behavior_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub transitions: Vec<Transition>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Undiscounted return of each episode, in order. A trailing episode cut
    /// by the dataset end counts as an episode.
    pub fn episode_returns(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut acc = 0.0;
        for t in &self.transitions {
            acc += t.reward;
            if t.ends_episode() {
                out.push(acc);
                acc = 0.0;
            }
        }
        out
    }

    /// Discounted Monte-Carlo return-to-go of every transition along its
    /// episode. Truncated episodes bootstrap with zero.
    pub fn returns_to_go(&self, gamma: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.transitions.len()];
        let mut next = 0.0;
        for (i, t) in self.transitions.iter().enumerate().rev() {
            if t.ends_episode() {
                next = 0.0;
            }
            next = t.reward + gamma * next;
            out[i] = next;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.transitions.is_empty() {
            return Err(Error::Schema("dataset has no transitions".into()));
        }
        if self.transitions.len() != self.meta.size {
            return Err(Error::Schema(format!(
                "header declares {} transitions, found {}",
                self.meta.size,
                self.transitions.len()
            )));
        }
        let d = self.meta.state_dim;
        for (i, t) in self.transitions.iter().enumerate() {
            if t.state.len() != d || t.next_state.len() != d {
                return Err(Error::Schema(format!("transition {i} has the wrong state dimension")));
            }
            if !t.reward.is_finite() {
                return Err(Error::Schema(format!("transition {i} has a non-finite reward")));
            }
            let ok = match (&t.action, self.meta.action_space) {
                (Action::Discrete(a), ActionSpace::Discrete(n)) => *a < n,
                (Action::Continuous(v), ActionSpace::Continuous(n)) => v.len() == n,
                _ => false,
            };
            if !ok {
                return Err(Error::Schema(format!("transition {i} action does not fit the action space")));
            }
        }
        Ok(())
    }
}

/// Collect exactly `size` transitions from `behavior`. Pure in
/// `(env, behavior, size, seed)`.
pub fn generate_dataset(env: &EnvSpec, behavior: Behavior, size: usize, seed: u64) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    env.validate()?;
    let mut rng = rng::stream(seed, Stream::Dataset);
    let mut sim = env.build()?;
    let (mut transitions, behavior_score) = match behavior {
        Behavior::Random => (collect(env, sim.as_mut(), &BehaviorPolicy::Uniform, size, &mut rng)?, 0.0),
        Behavior::Medium => {
            let mut brng = rng::stream(seed, Stream::Behavior);
            let trained = train_medium(env, 0, &mut brng)?;
            (collect(env, sim.as_mut(), &trained.policy, size, &mut rng)?, trained.score)
        }
        Behavior::MediumReplay => {
            let mut brng = rng::stream(seed, Stream::Behavior);
            let trained = train_medium(env, size, &mut brng)?;
            (trained.replay, trained.score)
        }
    };
    transitions.truncate(size);
    if let Some(last) = transitions.last_mut() {
        if !last.ends_episode() {
            last.truncated = true;
        }
    }
    let meta = DatasetMeta {
        schema_version: DATASET_SCHEMA_VERSION,
        env_id: env.id(),
        env: env.clone(),
        behavior,
        seed,
        size,
        state_dim: env.state_dim(),
        action_space: env.action_space(),
        behavior_score,
    };
    let ds = Dataset { meta, transitions };
    ds.validate()?;
    Ok(ds)
}

fn collect(
    spec: &EnvSpec,
    env: &mut dyn super::Environment,
    policy: &BehaviorPolicy,
    size: usize,
    rng: &mut crate::rng::StreamRng,
) -> Result<Vec<Transition>> {
    let mut out = Vec::with_capacity(size + env.max_steps());
    while out.len() < size {
        let seed = rng.random();
        run_episode(spec, env, policy, seed, rng, &mut out)?;
    }
    Ok(out)
}

fn encode_record(t: &Transition, buf: &mut Vec<u8>) {
    buf.clear();
    for v in &t.state {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    match &t.action {
        Action::Discrete(a) => {
            buf.push(0);
            buf.extend_from_slice(&(*a as u32).to_le_bytes());
        }
        Action::Continuous(v) => {
            buf.push(1);
            buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    buf.extend_from_slice(&t.reward.to_le_bytes());
    for v in &t.next_state {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(u8::from(t.done) | (u8::from(t.truncated) << 1));
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Schema("dataset file truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn vec(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

fn decode_record(payload: &[u8], dim: usize) -> Result<Transition> {
    let mut c = Cursor { bytes: payload, pos: 0 };
    let state = c.vec(dim)?;
    let action = match c.u8()? {
        0 => Action::Discrete(c.u32()? as usize),
        1 => {
            let n = c.u32()? as usize;
            Action::Continuous(c.vec(n)?)
        }
        tag => return Err(Error::Schema(format!("unknown action tag {tag}"))),
    };
    let reward = c.f64()?;
    let next_state = c.vec(dim)?;
    let flags = c.u8()?;
    if c.pos != payload.len() || flags > 3 {
        return Err(Error::Schema("malformed transition record".into()));
    }
    Ok(Transition { state, action, reward, next_state, done: flags & 1 != 0, truncated: flags & 2 != 0 })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let header = serde_json::to_vec(&ds.meta)?;
    let mut out = Vec::with_capacity(header.len() + 64 * ds.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    let mut rec = Vec::new();
    for t in &ds.transitions {
        encode_record(t, &mut rec);
        out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
        out.extend_from_slice(&rec);
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8).map_err(|_| Error::Schema("not a dataset file".into()))? != MAGIC {
        return Err(Error::Schema("not a dataset file (bad magic)".into()));
    }
    let hlen = c.u32()? as usize;
    let meta: DatasetMeta =
        serde_json::from_slice(c.take(hlen)?).map_err(|e| Error::Schema(format!("bad dataset header: {e}")))?;
    if meta.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "dataset schema version {} is not the supported version {}",
            meta.schema_version, DATASET_SCHEMA_VERSION
        )));
    }
    let count = c.u64()? as usize;
    if count != meta.size {
        return Err(Error::Schema(format!("record count {count} disagrees with header size {}", meta.size)));
    }
    let mut transitions = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        transitions.push(decode_record(c.take(len)?, meta.state_dim)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Schema("trailing bytes after the last record".into()));
    }
    let ds = Dataset { meta, transitions };
    ds.validate()?;
    Ok(ds)
}
