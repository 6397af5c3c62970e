//! Simulated downstream agents.
//!
//! An [`Environment`] is a fixed population of task contexts plus a frozen
//! outcome model standing in for the agent. Each context has an archetype:
//!
//! * `easy`: the agent succeeds alone; extra tokens only distract it.
//! * `hard`: the agent needs a specific key token in its memory.
//! * `trap`: any memory derails the agent.
//! * `neutral`: memory has no effect either way.
//!
//! [`ExternalAgent`] speaks newline-delimited JSON to a real agent process.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bank::{BankHeader, ExperienceBank, ExperienceEntry, SplitTag};
use crate::error::{Error, ProtocolError, Result};
use crate::policy::TokenId;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Archetype {
    Easy,
    Hard,
    Trap,
    Neutral,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [
        Archetype::Easy,
        Archetype::Hard,
        Archetype::Trap,
        Archetype::Neutral,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Archetype::Easy => "easy",
            Archetype::Hard => "hard",
            Archetype::Trap => "trap",
            Archetype::Neutral => "neutral",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub context_id: String,
    pub features: Vec<f64>,
    pub archetype: Archetype,
    pub required_key: Option<TokenId>,
    pub base_success: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub success: u8,
    pub steps_used: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuccessModel {
    pub easy_base: f64,
    pub hard_base: f64,
    pub key_gain: f64,
    pub distraction_per_token: f64,
    pub trap_penalty: f64,
}

impl Default for SuccessModel {
    fn default() -> Self {
        Self {
            easy_base: 0.9,
            hard_base: 0.1,
            key_gain: 0.8,
            distraction_per_token: 0.25,
            trap_penalty: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub num_contexts: usize,
    /// Must be at least `4 + num_keys`; extra dimensions carry noise only.
    pub feature_dim: usize,
    pub content_size: usize,
    /// Content ids `0..num_keys` are keys; the rest are generic tokens.
    pub num_keys: usize,
    pub archetype_mix: BTreeMap<Archetype, f64>,
    pub success: SuccessModel,
    pub feature_noise: f64,
    /// Height of the archetype and key one-hot entries.
    pub feature_scale: f64,
    /// Length of the keyless hints synthesized for non-hard contexts.
    pub generic_hint_len: usize,
    pub stochastic: bool,
    pub seed: u64,
}

impl Default for EnvironmentSpec {
    fn default() -> Self {
        Self {
            num_contexts: 200,
            feature_dim: 12,
            content_size: 16,
            num_keys: 8,
            archetype_mix: BTreeMap::from([
                (Archetype::Easy, 0.4),
                (Archetype::Hard, 0.4),
                (Archetype::Trap, 0.1),
                (Archetype::Neutral, 0.1),
            ]),
            success: SuccessModel::default(),
            feature_noise: 0.05,
            feature_scale: 4.0,
            generic_hint_len: 4,
            stochastic: false,
            seed: 0,
        }
    }
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.archetype_mix.values().sum();
        if (total - 1.0).abs() > 1e-9 || self.archetype_mix.values().any(|&f| f < 0.0) {
            return Err(Error::Spec(format!(
                "archetype fractions must be non-negative and sum to 1, got {total}"
            )));
        }
        if self.num_keys == 0 || self.num_keys >= self.content_size {
            return Err(Error::Spec(
                "need 1 <= num_keys < content_size so generic tokens exist".into(),
            ));
        }
        if self.feature_dim < 4 + self.num_keys {
            return Err(Error::Spec(format!(
                "feature_dim {} cannot hold 4 archetype + {} key dimensions",
                self.feature_dim, self.num_keys
            )));
        }
        if self.num_contexts == 0 || self.generic_hint_len == 0 {
            return Err(Error::Spec("num_contexts and generic_hint_len must be positive".into()));
        }
        if !(self.feature_noise >= 0.0) || !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return Err(Error::Spec("feature_noise must be >= 0 and feature_scale > 0".into()));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `num_contexts` over the mix.
    fn archetype_counts(&self) -> Vec<(Archetype, usize)> {
        let n = self.num_contexts;
        let mut counts: Vec<(Archetype, usize, f64)> = Archetype::ALL
            .iter()
            .map(|&a| {
                let exact = self.archetype_mix.get(&a).copied().unwrap_or(0.0) * n as f64;
                (a, exact.floor() as usize, exact - exact.floor())
            })
            .collect();
        let assigned: usize = counts.iter().map(|c| c.1).sum();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&i, &j| counts[j].2.total_cmp(&counts[i].2).then(i.cmp(&j)));
        for &i in order.iter().take(n.saturating_sub(assigned)) {
            counts[i].1 += 1;
        }
        counts.into_iter().map(|(a, c, _)| (a, c)).collect()
    }
}

/// Anything that turns (context, optional memory) into a task outcome.
pub trait Agent: Sync {
    /// `ordinal` keys the outcome randomness so repeated calls get
    /// independent draws yet runs replay exactly.
    fn run(&self, context: &Context, memory: Option<&[TokenId]>, ordinal: u64) -> Result<TaskOutcome>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub spec: EnvironmentSpec,
    pub contexts: Vec<Context>,
    index: HashMap<String, usize>,
}

pub fn make_environment(spec: &EnvironmentSpec) -> Result<Environment> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, &[rng::hash_str("make_environment")]);
    let mut kinds: Vec<Archetype> = spec
        .archetype_counts()
        .into_iter()
        .flat_map(|(a, c)| std::iter::repeat_n(a, c))
        .collect();
    kinds.shuffle(&mut rng);

    let noise = Normal::new(0.0, spec.feature_noise).map_err(|e| Error::Spec(e.to_string()))?;
    let m = spec.success;
    let mut neutral_seen = 0usize;
    let contexts: Vec<Context> = kinds
        .into_iter()
        .enumerate()
        .map(|(i, archetype)| {
            let mut features = vec![0.0; spec.feature_dim];
            features[archetype.index()] = spec.feature_scale;
            let required_key = (archetype == Archetype::Hard)
                .then(|| rng.random_range(0..spec.num_keys) as TokenId);
            if let Some(k) = required_key {
                features[4 + k as usize] = spec.feature_scale;
            }
            for x in features.iter_mut() {
                *x += noise.sample(&mut rng);
            }
            let base_success = match archetype {
                Archetype::Easy | Archetype::Trap => m.easy_base,
                Archetype::Hard => m.hard_base,
                Archetype::Neutral => {
                    // Alternate so neutral contexts fill both the
                    // everyone-succeeds and nobody-succeeds outcome classes.
                    neutral_seen += 1;
                    if neutral_seen % 2 == 1 {
                        m.easy_base
                    } else {
                        m.hard_base
                    }
                }
            };
            Context {
                context_id: format!("ctx-{i:04}"),
                features,
                archetype,
                required_key,
                base_success: base_success.clamp(0.0, 1.0),
            }
        })
        .collect();
    let index = contexts
        .iter()
        .enumerate()
        .map(|(i, c)| (c.context_id.clone(), i))
        .collect();
    Ok(Environment {
        spec: spec.clone(),
        contexts,
        index,
    })
}

impl Environment {
    pub fn context(&self, context_id: &str) -> Result<&Context> {
        self.index
            .get(context_id)
            .map(|&i| &self.contexts[i])
            .ok_or_else(|| Error::UnknownContext(context_id.to_string()))
    }

    pub fn contexts_of(&self, archetype: Archetype) -> impl Iterator<Item = &Context> {
        self.contexts.iter().filter(move |c| c.archetype == archetype)
    }

    /// Success probability under the outcome model, clamped to `[0, 1]`.
    /// An empty memory is treated the same as no memory.
    pub fn success_probability(&self, context: &Context, memory: Option<&[TokenId]>) -> f64 {
        let m = self.spec.success;
        let mem = memory.filter(|m| !m.is_empty());
        let len = mem.map_or(0, <[TokenId]>::len) as f64;
        let p = match (context.archetype, mem) {
            (_, None) => context.base_success,
            (Archetype::Easy, Some(_)) => context.base_success - m.distraction_per_token * len,
            (Archetype::Hard, Some(toks)) => {
                let has_key = context.required_key.is_some_and(|k| toks.contains(&k));
                context.base_success + if has_key { m.key_gain } else { 0.0 }
                    - m.distraction_per_token * len
            }
            (Archetype::Trap, Some(_)) => context.base_success - m.trap_penalty,
            (Archetype::Neutral, Some(_)) => context.base_success,
        };
        p.clamp(0.0, 1.0)
    }

    pub fn outcome_rng(&self, context: &Context, ordinal: u64) -> StreamRng {
        rng::stream(
            self.spec.seed,
            &[rng::hash_str("agent"), rng::hash_str(&context.context_id), ordinal],
        )
    }

    /// One frozen-agent episode. Deterministic environments threshold the
    /// success probability at 0.5; stochastic ones draw a Bernoulli from `rng`.
    pub fn agent_run(
        &self,
        context_id: &str,
        memory: Option<&[TokenId]>,
        rng: &mut impl Rng,
    ) -> Result<TaskOutcome> {
        let context = self.context(context_id)?;
        let p = self.success_probability(context, memory);
        let success = if self.spec.stochastic {
            rng.random::<f64>() < p
        } else {
            p >= 0.5
        };
        Ok(TaskOutcome {
            success: u8::from(success),
            steps_used: 1,
        })
    }
}

impl Agent for Environment {
    fn run(&self, context: &Context, memory: Option<&[TokenId]>, ordinal: u64) -> Result<TaskOutcome> {
        let mut rng = self.outcome_rng(context, ordinal);
        self.agent_run(&context.context_id, memory, &mut rng)
    }
}

/// Builds the offline bank. Hard contexts get hints holding their key plus,
/// per extra slot, a distractor with probability `noise`; every other
/// context gets keyless generic hints.
pub fn synthesize_bank(
    env: &Environment,
    hints_per_context: usize,
    noise: f64,
    seed: u64,
) -> Result<ExperienceBank> {
    const DISTRACTOR_SLOTS: usize = 3;
    if hints_per_context == 0 {
        return Err(Error::Domain("hints_per_context must be positive".into()));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::Domain(format!("noise must lie in [0, 1], got {noise}")));
    }
    let spec = &env.spec;
    let generic = spec.num_keys as TokenId..spec.content_size as TokenId;
    let mut entries = Vec::with_capacity(env.contexts.len() * hints_per_context);
    for ctx in &env.contexts {
        let mut rng = rng::stream(seed, &[rng::hash_str("bank"), rng::hash_str(&ctx.context_id)]);
        for h in 0..hints_per_context {
            let guidance = match ctx.required_key {
                Some(key) => {
                    let mut toks = vec![key];
                    for _ in 0..DISTRACTOR_SLOTS {
                        if rng.random::<f64>() < noise {
                            toks.push(rng.random_range(generic.clone()));
                        }
                    }
                    toks.shuffle(&mut rng);
                    toks
                }
                None => (0..spec.generic_hint_len)
                    .map(|_| rng.random_range(generic.clone()))
                    .collect(),
            };
            entries.push(ExperienceEntry {
                entry_id: format!("{}-h{h}", ctx.context_id),
                context_id: ctx.context_id.clone(),
                context_features: ctx.features.clone(),
                guidance_tokens: guidance,
                split_tag: SplitTag::Unassigned,
            });
        }
    }
    ExperienceBank::new(
        BankHeader {
            feature_dim: spec.feature_dim,
            vocab_size: spec.content_size,
        },
        entries,
    )
}

#[derive(Debug, Serialize)]
struct AgentRequest<'a> {
    id: String,
    context_id: &'a str,
    features: &'a [f64],
    memory_tokens: Option<&'a [TokenId]>,
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: mpsc::Receiver<std::io::Result<String>>,
    next_id: u64,
}

/// A downstream agent living in another process, reached over a byte stream.
pub struct ExternalAgent {
    conn: Mutex<Connection>,
    timeout: Duration,
    child: Option<Mutex<Child>>,
}

impl ExternalAgent {
    pub fn new(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        timeout: Duration,
    ) -> Self {
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Self {
            conn: Mutex::new(Connection {
                writer: Box::new(writer),
                lines: rx,
                next_id: 0,
            }),
            timeout,
            child: None,
        }
    }

    pub fn connect_tcp(addr: &str, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(ProtocolError::Transport)?;
        let reader = stream.try_clone().map_err(ProtocolError::Transport)?;
        Ok(Self::new(reader, stream, timeout))
    }

    /// Spawns `program` and talks to it over its standard streams.
    pub fn spawn(program: &str, args: &[String], timeout: Duration) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(ProtocolError::Transport)?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut agent = Self::new(stdout, stdin, timeout);
        agent.child = Some(Mutex::new(child));
        Ok(agent)
    }

    /// Sends one request and waits for the matching response.
    pub fn external_agent_run(
        &self,
        context: &Context,
        memory: Option<&[TokenId]>,
    ) -> Result<TaskOutcome, ProtocolError> {
        let mut conn = self.conn.lock().expect("agent connection poisoned");
        let id = format!("req-{}", conn.next_id);
        conn.next_id += 1;
        let request = AgentRequest {
            id: id.clone(),
            context_id: &context.context_id,
            features: &context.features,
            memory_tokens: memory,
        };
        let mut line = serde_json::to_string(&request)
            .map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        line.push('\n');
        conn.writer.write_all(line.as_bytes())?;
        conn.writer.flush()?;
        let reply = match conn.lines.recv_timeout(self.timeout) {
            Ok(Ok(l)) => l,
            Ok(Err(e)) => return Err(ProtocolError::Transport(e)),
            Err(mpsc::RecvTimeoutError::Timeout) => return Err(ProtocolError::Timeout(self.timeout)),
            Err(mpsc::RecvTimeoutError::Disconnected) => return Err(ProtocolError::Closed),
        };
        parse_response(&reply, &id)
    }
}

impl Drop for ExternalAgent {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            if let Ok(mut c) = child.lock() {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

fn parse_response(line: &str, expected_id: &str) -> Result<TaskOutcome, ProtocolError> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let id = value
        .get("id")
        .and_then(|v| v.as_str())
        .ok_or_else(|| ProtocolError::Malformed(format!("missing string id in `{line}`")))?;
    if id != expected_id {
        return Err(ProtocolError::IdMismatch {
            expected: expected_id.to_string(),
            got: id.to_string(),
        });
    }
    let success = value
        .get("success")
        .and_then(|v| v.as_i64())
        .ok_or_else(|| ProtocolError::Malformed(format!("missing integer success in `{line}`")))?;
    match success {
        0 | 1 => Ok(TaskOutcome {
            success: success as u8,
            steps_used: 0,
        }),
        other => Err(ProtocolError::NonBinary(other)),
    }
}

impl Agent for ExternalAgent {
    fn run(&self, context: &Context, memory: Option<&[TokenId]>, _ordinal: u64) -> Result<TaskOutcome> {
        Ok(self.external_agent_run(context, memory)?)
    }
}
