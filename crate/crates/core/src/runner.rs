//! Experiment plumbing behind the command-line tool: configuration with
//! dotted overrides, the on-disk layout of an output directory, ablation
//! variants and the individual pipeline commands.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::advantage::{EstimatorRegistry, Gating};
use crate::bank::{load_bank, save_bank, split_bank, ExperienceBank, SplitTag};
use crate::env::{make_environment, synthesize_bank, Context, Environment, EnvironmentSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::policy::{init_policy, PolicyParameters, Vocabulary};
use crate::rng::{derive_seed, hash_str};
use crate::rollout::RolloutMode;
use crate::stage1::{train_stage1, Stage1Config};
use crate::stage2::{train_stage2_with, Stage2Config, StepRecord, TrainingHistory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankGenConfig {
    pub hints_per_context: usize,
    /// Probability of each distractor slot in a hard-context hint.
    pub noise: f64,
    pub train_fraction: f64,
}

impl Default for BankGenConfig {
    fn default() -> Self {
        Self {
            hints_per_context: 5,
            noise: 0.3,
            train_fraction: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every component seed is derived from this one.
    pub seed: u64,
    /// Thread count for rollouts and evaluation; 0 uses all cores.
    pub workers: usize,
    pub out_dir: PathBuf,
    pub ablation: String,
    /// Policy checkpoint for `eval`; defaults to the stage-2 output.
    pub checkpoint: Option<PathBuf>,
    pub init_scale: f64,
    /// Save a stage-2 checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub env: EnvironmentSpec,
    pub bank: BankGenConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            out_dir: PathBuf::from("out"),
            ablation: "none".into(),
            checkpoint: None,
            init_scale: 0.1,
            checkpoint_every: 0,
            env: EnvironmentSpec::default(),
            bank: BankGenConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            eval: EvalOptions::default(),
        }
    }
}

/// Seeds handed to the components that are not configured through a
/// nested config record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DerivedSeeds {
    pub bank: u64,
    pub split: u64,
    pub init: u64,
}

impl RunConfig {
    /// Overwrites every component seed with one derived from `seed`.
    pub fn propagate_seed(&mut self) -> DerivedSeeds {
        let d = |tag: &str| derive_seed(self.seed, &[hash_str(tag)]);
        self.env.seed = d("env");
        self.stage1.seed = d("stage1");
        self.stage2.seed = d("stage2");
        self.stage2.sampling.seed = d("stage2-sampling");
        DerivedSeeds {
            bank: d("bank"),
            split: d("split"),
            init: d("init"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be a non-negative number".into()));
        }
        if self.eval.max_content_tokens == 0 {
            return Err(Error::Config("eval.max_content_tokens must be positive".into()));
        }
        self.env.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        AblationRegistry::builtin().get(&self.ablation)?;
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout {
            root: self.out_dir.clone(),
        }
    }
}

/// Applies `path.to.key=value` overrides on top of a JSON document. Values
/// that parse as JSON are used as such, anything else becomes a string.
pub fn apply_overrides(doc: &mut Value, overrides: &[(String, String)]) -> Result<()> {
    for (key, raw) in overrides {
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        let mut node = &mut *doc;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("malformed override key `{key}`")));
        }
        for (i, part) in parts.iter().enumerate() {
            let obj = match node {
                Value::Object(m) => m,
                Value::Null => {
                    *node = Value::Object(Default::default());
                    node.as_object_mut().expect("just set")
                }
                _ => return Err(Error::Config(format!("`{key}`: `{part}` is not inside an object"))),
            };
            if i + 1 == parts.len() {
                obj.insert(part.to_string(), value.clone());
                break;
            }
            node = obj.entry(part.to_string()).or_insert(Value::Null);
        }
    }
    Ok(())
}

/// Reads an optional JSON config file and applies the overrides.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config {}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    apply_overrides(&mut doc, overrides)?;
    let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// File names inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn env(&self) -> PathBuf {
        self.root.join("env.json")
    }
    pub fn bank(&self) -> PathBuf {
        self.root.join("bank.jsonl")
    }
    pub fn stage1(&self) -> PathBuf {
        self.root.join("stage1.json")
    }
    pub fn stage1_loss(&self) -> PathBuf {
        self.root.join("stage1_loss.csv")
    }
    pub fn stage2(&self) -> PathBuf {
        self.root.join("stage2.json")
    }
    pub fn stage2_history(&self) -> PathBuf {
        self.root.join("stage2_history.csv")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn ablation_dir(&self, name: &str) -> PathBuf {
        self.root.join("ablation").join(name)
    }
    pub fn ablation_table(&self) -> PathBuf {
        self.root.join("ablation.csv")
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} not found at {}", path.display())))
    }
}

/// A variant of the stage-2 recipe.
pub trait Ablation: Send + Sync {
    fn name(&self) -> &'static str;
    /// Whether stage 2 starts from the distilled checkpoint.
    fn uses_stage1(&self) -> bool {
        true
    }
    fn configure(&self, config: &mut Stage2Config);
}

struct Full;
struct NoStage1Init;
struct Unified;
struct NoStructuredRollout;
struct NoDeltaGating;
struct NoLengthReward;

impl Ablation for Full {
    fn name(&self) -> &'static str {
        "none"
    }
    fn configure(&self, _config: &mut Stage2Config) {}
}

impl Ablation for NoStage1Init {
    fn name(&self) -> &'static str {
        "no-stage1-init"
    }
    fn uses_stage1(&self) -> bool {
        false
    }
    fn configure(&self, config: &mut Stage2Config) {
        config.from_scratch = true;
    }
}

impl Ablation for Unified {
    fn name(&self) -> &'static str {
        "unified"
    }
    fn uses_stage1(&self) -> bool {
        false
    }
    fn configure(&self, config: &mut Stage2Config) {
        config.from_scratch = true;
        config.unified_mode = true;
    }
}

impl Ablation for NoStructuredRollout {
    fn name(&self) -> &'static str {
        "no-structured-rollout"
    }
    fn configure(&self, config: &mut Stage2Config) {
        config.rollout_mode = RolloutMode::Iid;
    }
}

impl Ablation for NoDeltaGating {
    fn name(&self) -> &'static str {
        "no-delta-gating"
    }
    fn configure(&self, config: &mut Stage2Config) {
        config.gating = Gating::NaiveSum;
    }
}

impl Ablation for NoLengthReward {
    fn name(&self) -> &'static str {
        "no-length-reward"
    }
    fn configure(&self, config: &mut Stage2Config) {
        config.use_length_reward = false;
    }
}

/// Ablations in table order.
pub struct AblationRegistry {
    entries: Vec<Box<dyn Ablation>>,
}

impl AblationRegistry {
    pub fn builtin() -> Self {
        Self {
            entries: vec![
                Box::new(Full),
                Box::new(NoStage1Init),
                Box::new(Unified),
                Box::new(NoStructuredRollout),
                Box::new(NoDeltaGating),
                Box::new(NoLengthReward),
            ],
        }
    }

    pub fn register(&mut self, ablation: Box<dyn Ablation>) {
        self.entries.retain(|a| a.name() != ablation.name());
        self.entries.push(ablation);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Ablation> {
        self.entries
            .iter()
            .find(|a| a.name() == name)
            .map(|a| a.as_ref())
            .ok_or_else(|| Error::UnknownName {
                kind: "ablation",
                name: name.to_string(),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|a| a.name()).collect()
    }
}

/// Runs `f` on a thread pool sized by `workers`.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    pool.install(f)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub contexts: usize,
    pub archetypes: BTreeMap<String, usize>,
    pub entries: usize,
    pub train_entries: usize,
    pub test_entries: usize,
}

/// Writes the environment spec and a split experience bank.
pub fn cmd_gen(config: &RunConfig) -> Result<GenSummary> {
    let mut cfg = config.clone();
    let seeds = cfg.propagate_seed();
    let env = make_environment(&cfg.env)?;
    let bank = synthesize_bank(&env, cfg.bank.hints_per_context, cfg.bank.noise, seeds.bank)?;
    let (train, test) = split_bank(&bank, cfg.bank.train_fraction, seeds.split)?;
    let train_ids: HashSet<&str> = train.entries.iter().map(|e| e.entry_id.as_str()).collect();
    let mut tagged = bank.clone();
    for e in &mut tagged.entries {
        e.split_tag = if train_ids.contains(e.entry_id.as_str()) {
            SplitTag::Train
        } else {
            SplitTag::Test
        };
    }
    let layout = cfg.layout();
    write(&layout.env(), &serde_json::to_string_pretty(&cfg.env)?)?;
    save_bank(&tagged, layout.bank())?;
    let mut archetypes = BTreeMap::new();
    for c in &env.contexts {
        *archetypes.entry(c.archetype.name().to_string()).or_insert(0) += 1;
    }
    Ok(GenSummary {
        contexts: env.contexts.len(),
        archetypes,
        entries: tagged.len(),
        train_entries: train.len(),
        test_entries: test.len(),
    })
}

/// Environment and bank written by [`cmd_gen`].
pub fn load_inputs(layout: &Layout) -> Result<(Environment, ExperienceBank)> {
    require(&layout.env(), "environment spec")?;
    require(&layout.bank(), "experience bank")?;
    let spec: EnvironmentSpec = serde_json::from_str(&fs::read_to_string(layout.env())?)?;
    let env = make_environment(&spec)?;
    let bank = load_bank(layout.bank())?;
    if bank.header.feature_dim != spec.feature_dim || bank.header.vocab_size != spec.content_size {
        return Err(Error::Schema("bank header does not match the environment spec".into()));
    }
    Ok((env, bank))
}

fn fresh_policy(cfg: &RunConfig, seed: u64) -> Result<PolicyParameters> {
    init_policy(
        cfg.env.feature_dim,
        Vocabulary::new(cfg.env.content_size)?,
        cfg.init_scale,
        seed,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

pub fn stage1_loss_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, l) in history.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

/// Distills the bank into a fresh policy.
pub fn cmd_stage1(config: &RunConfig) -> Result<Stage1Summary> {
    let mut cfg = config.clone();
    let seeds = cfg.propagate_seed();
    let layout = cfg.layout();
    let (_, bank) = load_inputs(&layout)?;
    let policy = fresh_policy(&cfg, seeds.init)?;
    let (trained, history) = with_workers(cfg.workers, || train_stage1(&policy, &bank, &cfg.stage1))?;
    trained.save(layout.stage1())?;
    write(&layout.stage1_loss(), &stage1_loss_csv(&history))?;
    Ok(Stage1Summary {
        epochs: history.len(),
        final_loss: history.last().copied(),
        checkpoint: layout.stage1(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Summary {
    pub ablation: String,
    pub steps: usize,
    pub final_mean_reward: Option<f64>,
    pub final_abstain_rate: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Stage 2 under `ablation`, writing the checkpoint and history to
/// `checkpoint` and `history_path`.
fn run_stage2(
    cfg: &RunConfig,
    seeds: DerivedSeeds,
    ablation: &dyn Ablation,
    env: &Environment,
    bank: &ExperienceBank,
    checkpoint: &Path,
    history_path: &Path,
) -> Result<(PolicyParameters, TrainingHistory)> {
    let mut s2 = cfg.stage2;
    ablation.configure(&mut s2);
    let start = if ablation.uses_stage1() {
        let path = cfg.layout().stage1();
        require(&path, "stage-1 checkpoint")?;
        PolicyParameters::load(path)?
    } else {
        fresh_policy(cfg, seeds.init)?
    };
    if let Some(dir) = checkpoint.parent() {
        fs::create_dir_all(dir)?;
    }
    let every = cfg.checkpoint_every;
    let mut hook = |record: &StepRecord, policy: &PolicyParameters| -> Result<()> {
        let done = record.step + 1;
        if every > 0 && done % every == 0 {
            policy.save(periodic_checkpoint(checkpoint, done))?;
        }
        Ok(())
    };
    let (trained, history) = with_workers(cfg.workers, || {
        train_stage2_with(&start, env, env, bank, &s2, &EstimatorRegistry::builtin(), &mut hook)
    })?;
    trained.save(checkpoint)?;
    write(history_path, &history.to_csv())?;
    Ok((trained, history))
}

/// `dir/name.json` becomes `dir/name_step{step}.json`.
pub fn periodic_checkpoint(checkpoint: &Path, step: usize) -> PathBuf {
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("policy");
    checkpoint.with_file_name(format!("{stem}_step{step}.json"))
}

pub fn cmd_stage2(config: &RunConfig) -> Result<Stage2Summary> {
    let mut cfg = config.clone();
    let seeds = cfg.propagate_seed();
    let layout = cfg.layout();
    let (env, bank) = load_inputs(&layout)?;
    let registry = AblationRegistry::builtin();
    let ablation = registry.get(&cfg.ablation)?;
    let (_, history) = run_stage2(
        &cfg,
        seeds,
        ablation,
        &env,
        &bank,
        &layout.stage2(),
        &layout.stage2_history(),
    )?;
    let last = history.steps.last();
    Ok(Stage2Summary {
        ablation: ablation.name().to_string(),
        steps: history.steps.len(),
        final_mean_reward: last.map(|r| r.mean_reward),
        final_abstain_rate: last.map(|r| r.abstain_rate),
        checkpoint: layout.stage2(),
    })
}

/// Contexts whose bank entries are all in the test split.
pub fn test_contexts(env: &Environment, bank: &ExperienceBank) -> Result<Vec<Context>> {
    let ids = bank.with_tag(SplitTag::Test);
    let ids = ids.context_ids();
    let contexts: Vec<Context> = env
        .contexts
        .iter()
        .filter(|c| ids.contains(c.context_id.as_str()))
        .cloned()
        .collect();
    if contexts.is_empty() {
        return Err(Error::Domain("the bank has no test-split contexts".into()));
    }
    Ok(contexts)
}

fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    write(&dir.join("summary.csv"), &report.summary_csv())?;
    write(&dir.join("bins.csv"), &report.bins_csv())?;
    write(&dir.join("venn.csv"), &report.venn_csv())?;
    write(&dir.join("report.json"), &serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// Evaluates a checkpoint on the test contexts.
pub fn cmd_eval(config: &RunConfig) -> Result<EvalReport> {
    let mut cfg = config.clone();
    cfg.propagate_seed();
    let layout = cfg.layout();
    let checkpoint = cfg.checkpoint.clone().unwrap_or_else(|| layout.stage2());
    require(&checkpoint, "policy checkpoint")?;
    let (env, bank) = load_inputs(&layout)?;
    let policy = PolicyParameters::load(&checkpoint)?;
    let contexts = test_contexts(&env, &bank)?;
    let report = with_workers(cfg.workers, || evaluate(&env, &contexts, &bank, &policy, &cfg.eval))?;
    write_report(&report, &layout.eval_dir())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: String,
    pub success_rate: f64,
    pub mean_memory_tokens: f64,
    pub final_abstain_rate: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("ablation,success_rate,mean_memory_tokens,final_abstain_rate\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.ablation, r.success_rate, r.mean_memory_tokens, r.final_abstain_rate
        ));
    }
    out
}

/// Runs every registered variant through stage 2 and evaluation. Stage 1 is
/// trained here when its checkpoint is missing.
pub fn cmd_ablate(config: &RunConfig) -> Result<Vec<AblationRow>> {
    let mut cfg = config.clone();
    let seeds = cfg.propagate_seed();
    let layout = cfg.layout();
    let (env, bank) = load_inputs(&layout)?;
    if !layout.stage1().exists() {
        cmd_stage1(config)?;
    }
    let contexts = test_contexts(&env, &bank)?;
    let registry = AblationRegistry::builtin();
    let mut rows = Vec::new();
    for name in registry.names() {
        let ablation = registry.get(name)?;
        let dir = layout.ablation_dir(name);
        let (policy, history) = run_stage2(
            &cfg,
            seeds,
            ablation,
            &env,
            &bank,
            &dir.join("policy.json"),
            &dir.join("history.csv"),
        )?;
        let report = with_workers(cfg.workers, || evaluate(&env, &contexts, &bank, &policy, &cfg.eval))?;
        write_report(&report, &dir)?;
        let policy_row = report
            .methods
            .iter()
            .find(|m| m.method == "policy")
            .expect("evaluate reports the policy");
        rows.push(AblationRow {
            ablation: name.to_string(),
            success_rate: policy_row.success_rate,
            mean_memory_tokens: policy_row.mean_memory_tokens,
            final_abstain_rate: history.steps.last().map_or(0.0, |r| r.abstain_rate),
        });
    }
    write(&layout.ablation_table(), &ablation_csv(&rows))?;
    Ok(rows)
}

/// gen, stage1, stage2 and eval in sequence.
pub fn run_pipeline(config: &RunConfig) -> Result<EvalReport> {
    cmd_gen(config)?;
    cmd_stage1(config)?;
    cmd_stage2(config)?;
    cmd_eval(config)
}
