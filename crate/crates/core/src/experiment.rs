//! Experiment configuration and the end-to-end commands.
//!
//! Configuration is TOML with one table per section. Every field has a
//! default, unknown keys are rejected, and environment variables named
//! `RISKMBRL__<SECTION>__<KEY>` override individual keys (for example
//! `RISKMBRL__AGENT__ACTOR_LR=3e-4`).
//!
//! A training run directory contains:
//!
//! | file | content |
//! |------|---------|
//! | `manifest.json` | resolved config, version, seed, every output path |
//! | `config.toml` | resolved config |
//! | `dataset.bin` | the offline dataset (unless `data.path` is set) |
//! | `model.txt` | the fitted ensemble |
//! | `metrics.jsonl` | one JSON object per iteration |
//! | `checkpoint/` | `agent.txt`, `buffer.bin`, `state.json` for `--resume` |
//! | `agent_final.txt` | the final agent |
//! | `eval_final.json` | per-checkpoint reports and their average |

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Normalizer, OfflineDataset};
use crate::dynamics::{fit_ensemble, FitReport, GaussianEnsemble, ModelConfig};
use crate::env::{
    generate_currency_dataset, generate_illustrative_dataset, CurrencyEnv, Environment, IllustrativeEnvSpec,
    CURRENCY_ID, ILLUSTRATIVE_ID,
};
use crate::error::{Error, Result};
use crate::eval::{aggregate_reports, emit_report, evaluate_policy, AggregateMetrics, EvalReport, NormalizationAnchors, CURRENCY_ANCHORS};
use crate::risk::{risk_value, DiscreteDistribution, RiskSpec};
use crate::rollout::{generate_rollouts, mixed_batch, RolloutConfig, RolloutStats, SyntheticBuffer};
use crate::sac::{Agent, AgentConfig};

pub const VALID_ENV_IDS: [&str; 2] = [CURRENCY_ID, ILLUSTRATIVE_ID];
pub const ENV_PREFIX: &str = "RISKMBRL__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub id: String,
    pub currency: CurrencyEnv,
    pub illustrative: IllustrativeEnvSpec,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            id: CURRENCY_ID.to_string(),
            currency: CurrencyEnv::default(),
            illustrative: IllustrativeEnvSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Existing dataset to load instead of generating one.
    pub path: Option<PathBuf>,
    /// Behaviour-policy episodes for the currency task.
    pub n_episodes: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            n_episodes: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    pub updates_per_iteration: usize,
    /// Probability that a batch record comes from the real dataset.
    pub real_fraction: f64,
    pub checkpoint_every: usize,
    /// Fit a single model instead of an ensemble.
    pub ablate_ensemble: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            iterations: 300,
            updates_per_iteration: 100,
            real_fraction: 0.5,
            checkpoint_every: 25,
            ablate_ensemble: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub alpha: f64,
    /// Interim evaluation at iteration 1 and every `every` iterations.
    pub every: usize,
    /// Final metrics average this many trailing iterations.
    pub last_checkpoints: usize,
    pub anchors: NormalizationAnchors,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: 200,
            alpha: 0.1,
            every: 25,
            last_checkpoints: 5,
            anchors: CURRENCY_ANCHORS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig2Section {
    pub grid_points: usize,
    /// Candidate successors per action.
    pub candidates: usize,
    pub alpha: f64,
    pub safe_action: f64,
    pub spike_action: f64,
    pub model: ModelConfig,
}

impl Default for Fig2Section {
    fn default() -> Self {
        Self {
            grid_points: 41,
            candidates: 2000,
            alpha: 0.1,
            safe_action: -0.35,
            spike_action: 0.4,
            model: ModelConfig {
                epochs: 90,
                bootstrap: true,
                ..ModelConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub env: EnvSection,
    pub data: DataSection,
    /// `model.seed` is an offset added to the experiment seed.
    pub model: ModelConfig,
    pub rollout: RolloutConfig,
    pub agent: AgentConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub fig2: Fig2Section,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            env: EnvSection::default(),
            data: DataSection::default(),
            model: ModelConfig {
                epochs: 200,
                ..ModelConfig::default()
            },
            rollout: RolloutConfig::default(),
            agent: AgentConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            fig2: Fig2Section::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses `text` over the defaults. Nested tables merge key by key, so
    /// a partial `[fig2.model]` keeps the other `fig2.model` defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(overlay: toml::Table) -> Result<Self> {
        let mut base = toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut base, overlay);
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` (or starts from defaults) and applies `RISKMBRL__*`
    /// overrides from `vars`.
    pub fn load<I>(path: Option<&Path>, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let text = match path {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        apply_env_overrides(&mut table, vars)?;
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        if !VALID_ENV_IDS.contains(&self.env.id.as_str()) {
            return Err(Error::Config(format!(
                "unknown env id `{}`; valid ids: {}",
                self.env.id,
                VALID_ENV_IDS.join(", ")
            )));
        }
        if let Some(p) = &self.data.path {
            if !p.exists() {
                return Err(Error::Config(format!("data.path {} does not exist", p.display())));
            }
        }
        self.env.currency.validate()?;
        self.env.illustrative.validate()?;
        self.rollout.validate()?;
        self.agent.validate()?;
        if !(0.0..=1.0).contains(&self.train.real_fraction) {
            return Err(Error::Config("train.real_fraction must lie in [0, 1]".into()));
        }
        if self.train.iterations == 0 || self.eval.episodes == 0 || self.eval.every == 0 {
            return Err(Error::Config("train.iterations, eval.episodes and eval.every must be >= 1".into()));
        }
        if !(self.eval.alpha > 0.0 && self.eval.alpha <= 1.0) || !(self.fig2.alpha > 0.0 && self.fig2.alpha <= 1.0) {
            return Err(Error::Config("evaluation alphas must lie in (0, 1]".into()));
        }
        if self.fig2.grid_points < 2 || self.fig2.candidates == 0 {
            return Err(Error::Config("fig2 needs >= 2 grid points and >= 1 candidate".into()));
        }
        Ok(())
    }

    /// SHA-256 of the serialised config, hex encoded.
    pub fn digest(&self) -> String {
        let text = self.to_toml().unwrap_or_default();
        hex(&Sha256::digest(text.as_bytes()))
    }

    pub fn environment(&self) -> Result<Box<dyn Environment>> {
        match self.env.id.as_str() {
            CURRENCY_ID => Ok(Box::new(self.env.currency.clone())),
            ILLUSTRATIVE_ID => Ok(Box::new(self.env.illustrative.clone())),
            other => Err(Error::Config(format!(
                "unknown env id `{other}`; valid ids: {}",
                VALID_ENV_IDS.join(", ")
            ))),
        }
    }

    /// Model config with the experiment seed applied and, for the
    /// ensemble ablation, a single member.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.seed = self.seed.wrapping_add(self.model.seed);
        if self.train.ablate_ensemble {
            m.n_members = 1;
            m.n_elites = 1;
        }
        m
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c = value` for every `RISKMBRL__A__B__C=value`. Values are
/// parsed as TOML literals and fall back to plain strings.
pub fn apply_env_overrides<I>(table: &mut toml::Table, vars: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    for (name, raw) in vars {
        let Some(path) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let keys: Vec<String> = path.split("__").map(|k| k.to_ascii_lowercase()).collect();
        if keys.iter().any(String::is_empty) {
            return Err(Error::Config(format!("malformed override variable `{name}`")));
        }
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.clone()));
        let mut cursor = &mut *table;
        for k in &keys[..keys.len() - 1] {
            let entry = cursor
                .entry(k.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cursor = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{name}` descends into non-table `{k}`")))?;
        }
        cursor.insert(keys[keys.len() - 1].clone(), value);
    }
    Ok(())
}

/// Forces rayon onto one thread. Only effective before first use.
pub fn force_single_thread() {
    if rayon::ThreadPoolBuilder::new().num_threads(1).build_global().is_err() {
        log::warn!("rayon pool already initialised; --single-thread has no effect");
    }
}

/// Written before any work starts; never modified afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_digest: String,
    pub config: String,
    /// Output name → path relative to the run directory.
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig, files: &[(&str, &str)]) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            config_digest: cfg.digest(),
            config: cfg.to_toml()?,
            files: files.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?)
    }
}

/// The dataset named by the config: loaded from `data.path` or generated.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<OfflineDataset> {
    if let Some(p) = &cfg.data.path {
        let d = OfflineDataset::load(p)?;
        if d.env_id != cfg.env.id {
            return Err(Error::Config(format!(
                "dataset {} was generated for `{}`, config says `{}`",
                p.display(),
                d.env_id,
                cfg.env.id
            )));
        }
        return Ok(d);
    }
    match cfg.env.id.as_str() {
        CURRENCY_ID => generate_currency_dataset(cfg.data.n_episodes, &cfg.env.currency, cfg.seed),
        ILLUSTRATIVE_ID => generate_illustrative_dataset(&cfg.env.illustrative, cfg.seed),
        other => Err(Error::Config(format!("unknown env id `{other}`"))),
    }
}

/// Writes the configured dataset to `<out_dir>/dataset.bin`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, force: bool) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("dataset.bin");
    if path.exists() && !force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", path.display())));
    }
    let generate = ExperimentConfig {
        data: DataSection {
            path: None,
            ..cfg.data.clone()
        },
        ..cfg.clone()
    };
    RunManifest::new("gen-data", cfg, &[("dataset", "dataset.bin")])?.write(&cfg.out_dir)?;
    let data = build_dataset(&generate)?;
    data.save(&path)?;
    log::info!("wrote {} records to {}", data.len(), path.display());
    Ok(path)
}

/// Compact evaluation numbers for the metric log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean: f64,
    pub cvar: f64,
    pub normalized_mean: f64,
    pub normalized_cvar: f64,
}

impl From<&EvalReport> for EvalSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            mean: r.mean,
            cvar: r.cvar,
            normalized_mean: r.normalized_mean,
            normalized_cvar: r.normalized_cvar,
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub rollout: RolloutStats,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha_loss: f64,
    pub temperature: f64,
    pub entropy: f64,
    pub q_mean: f64,
    pub eval: Option<EvalSummary>,
}

/// Everything needed to continue training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub agent: Agent,
    pub buffer: SyntheticBuffer,
    pub rng: ChaCha8Rng,
    /// Completed iterations.
    pub iteration: usize,
    /// Reports from the trailing evaluation window so far.
    pub final_reports: Vec<EvalReport>,
}

impl TrainState {
    pub fn fresh(cfg: &ExperimentConfig, dataset: &OfflineDataset) -> Result<Self> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        init_rng.set_stream(2);
        let obs_norm = Normalizer::fit(&dataset.states());
        let agent = Agent::new(
            dataset.state_dim(),
            dataset.action_dim(),
            cfg.agent.clone(),
            obs_norm,
            &mut init_rng,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            agent,
            buffer: SyntheticBuffer::new(cfg.rollout.buffer_capacity()),
            rng,
            iteration: 0,
            final_reports: Vec::new(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.agent.save(&dir.join("agent.txt"))?;
        let records: Vec<_> = self.buffer.iter().cloned().collect();
        let buf = OfflineDataset::new(records, self.agent.state_dim(), self.agent.action_dim())?.with_origin("buffer", 0);
        buf.save(&dir.join("buffer.bin"))?;
        let meta = CheckpointMeta {
            iteration: self.iteration,
            rng_seed: hex(&self.rng.get_seed()),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            buffer_capacity: self.buffer.capacity(),
            buffer_inserted: self.buffer.inserted(),
            final_reports: self.final_reports.clone(),
        };
        fs::write(dir.join("state.json"), serde_json::to_string(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(dir.join("state.json"))?)?;
        let agent = Agent::load(&dir.join("agent.txt"))?;
        let buf = OfflineDataset::load(&dir.join("buffer.bin"))?;
        let buffer = SyntheticBuffer::restore(buf.records().to_vec(), meta.buffer_capacity, meta.buffer_inserted)?;
        let seed_bytes: Vec<u8> = (0..meta.rng_seed.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(meta.rng_seed.get(i..i + 2).unwrap_or("zz"), 16))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format("bad rng seed in checkpoint".into()))?;
        let seed: [u8; 32] = seed_bytes
            .try_into()
            .map_err(|_| Error::Format("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(meta.rng_stream);
        rng.set_word_pos(
            meta.rng_word_pos
                .parse()
                .map_err(|_| Error::Format("bad rng position in checkpoint".into()))?,
        );
        Ok(Self {
            agent,
            buffer,
            rng,
            iteration: meta.iteration,
            final_reports: meta.final_reports,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    iteration: usize,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    buffer_capacity: usize,
    buffer_inserted: u64,
    final_reports: Vec<EvalReport>,
}

/// Result of [`train_agent`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub logs: Vec<IterationLog>,
    pub final_metrics: AggregateMetrics,
}

fn eval_seed(seed: u64, iteration: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(iteration as u64)
}

/// Runs the remaining iterations of the outer loop: rollouts, then
/// `updates_per_iteration` actor-critic updates on mixed batches, then
/// evaluation on schedule. `on_iteration` sees every log line and the
/// state after it (for metric files and checkpoints).
pub fn train_agent(
    cfg: &ExperimentConfig,
    dataset: &OfflineDataset,
    ensemble: &GaussianEnsemble,
    mut state: TrainState,
    on_iteration: &mut dyn FnMut(&IterationLog, &TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    let env = cfg.environment()?;
    if env.state_dim() != dataset.state_dim() || env.action_dim() != dataset.action_dim() {
        return Err(Error::ShapeMismatch("dataset dims do not match the environment".into()));
    }
    let digest = cfg.digest();
    let n = cfg.train.iterations;
    let window_start = n.saturating_sub(cfg.eval.last_checkpoints.max(1)) + 1;
    let mut logs = Vec::new();
    let terminal = |s: &[f64]| env.is_terminal(s);
    while state.iteration < n {
        let it = state.iteration + 1;
        let rollout = generate_rollouts(
            ensemble,
            dataset,
            &state.agent,
            &state.agent,
            &terminal,
            &cfg.rollout,
            &mut state.buffer,
            &mut state.rng,
        )?;
        let mut sums = [0.0; 6];
        let updates = cfg.train.updates_per_iteration;
        for _ in 0..updates {
            let batch = mixed_batch(dataset, &state.buffer, cfg.agent.batch_size, cfg.train.real_fraction, &mut state.rng)?;
            let s = state.agent.update(&batch, &mut state.rng)?;
            for (acc, v) in sums
                .iter_mut()
                .zip([s.critic_loss, s.actor_loss, s.alpha_loss, s.temperature, s.entropy, s.q_mean])
            {
                *acc += v;
            }
        }
        let k = updates.max(1) as f64;
        let in_window = it >= window_start;
        let scheduled = it == 1 || it % cfg.eval.every == 0 || it == n;
        let eval = if in_window || scheduled {
            let report = evaluate_policy(
                env.as_ref(),
                &state.agent,
                cfg.eval.episodes,
                cfg.eval.alpha,
                cfg.eval.anchors,
                eval_seed(cfg.seed, it),
                &digest,
            )?;
            let summary = EvalSummary::from(&report);
            if in_window {
                state.final_reports.push(report);
            }
            Some(summary)
        } else {
            None
        };
        state.iteration = it;
        let line = IterationLog {
            iteration: it,
            rollout,
            critic_loss: sums[0] / k,
            actor_loss: sums[1] / k,
            alpha_loss: sums[2] / k,
            temperature: sums[3] / k,
            entropy: sums[4] / k,
            q_mean: sums[5] / k,
            eval,
        };
        if let Some(e) = &line.eval {
            log::info!(
                "iteration {it}: mean {:.2} cvar {:.2} (normalised {:.1} / {:.1})",
                e.mean,
                e.cvar,
                e.normalized_mean,
                e.normalized_cvar
            );
        }
        on_iteration(&line, &state)?;
        logs.push(line);
    }
    let final_metrics = aggregate_reports(&state.final_reports)?;
    Ok(TrainOutcome {
        state,
        logs,
        final_metrics,
    })
}

/// Flags of `riskmbrl train`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainOptions {
    pub resume: bool,
    pub force: bool,
}

/// Final numbers written to `eval_final.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalEvaluation {
    pub aggregate: AggregateMetrics,
    pub reports: Vec<EvalReport>,
}

const TRAIN_FILES: [(&str, &str); 8] = [
    ("config", "config.toml"),
    ("dataset", "dataset.bin"),
    ("model", "model.txt"),
    ("model_fit", "model_fit.json"),
    ("metrics", "metrics.jsonl"),
    ("checkpoint", "checkpoint"),
    ("agent", "agent_final.txt"),
    ("evaluation", "eval_final.json"),
];

/// Full training run with files under `cfg.out_dir`.
pub fn cmd_train(cfg: &ExperimentConfig, opts: TrainOptions) -> Result<FinalEvaluation> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    let manifest_path = dir.join("manifest.json");
    let ckpt_dir = dir.join("checkpoint");
    let resuming = opts.resume && ckpt_dir.join("state.json").exists();
    if manifest_path.exists() && !opts.force && !opts.resume {
        return Err(Error::Config(format!(
            "{} already holds a run; pass --resume or --force",
            dir.display()
        )));
    }
    if resuming {
        let old = RunManifest::read(dir)?;
        if old.config_digest != cfg.digest() {
            return Err(Error::Config("config differs from the run being resumed".into()));
        }
    } else {
        fs::create_dir_all(dir)?;
        RunManifest::new("train", cfg, &TRAIN_FILES)?.write(dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    }

    let dataset = if resuming {
        OfflineDataset::load(&dir.join("dataset.bin"))?
    } else {
        let d = build_dataset(cfg)?;
        d.save(&dir.join("dataset.bin"))?;
        d
    };
    let model_path = dir.join("model.txt");
    let ensemble = if resuming && model_path.exists() {
        GaussianEnsemble::load(&model_path)?
    } else {
        let (ens, report) = fit_ensemble(&dataset, &cfg.effective_model())?;
        ens.save(&model_path)?;
        fs::write(dir.join("model_fit.json"), serde_json::to_string_pretty(&report)?)?;
        ens
    };

    let state = if resuming {
        let st = TrainState::load(&ckpt_dir)?;
        log::info!("resuming after iteration {}", st.iteration);
        st
    } else {
        TrainState::fresh(cfg, &dataset)?
    };
    let metrics_path = dir.join("metrics.jsonl");
    let kept: Vec<String> = if resuming && metrics_path.exists() {
        fs::read_to_string(&metrics_path)?
            .lines()
            .filter(|l| {
                serde_json::from_str::<IterationLog>(l)
                    .map(|e| e.iteration <= state.iteration)
                    .unwrap_or(false)
            })
            .map(str::to_string)
            .collect()
    } else {
        Vec::new()
    };
    let mut metrics = fs::File::create(&metrics_path)?;
    for l in &kept {
        writeln!(metrics, "{l}")?;
    }
    let every = cfg.train.checkpoint_every.max(1);
    let total = cfg.train.iterations;
    let mut hook = |line: &IterationLog, st: &TrainState| -> Result<()> {
        writeln!(metrics, "{}", serde_json::to_string(line)?)?;
        metrics.flush()?;
        if line.iteration % every == 0 || line.iteration == total {
            st.save(&ckpt_dir)?;
        }
        Ok(())
    };
    let outcome = train_agent(cfg, &dataset, &ensemble, state, &mut hook)?;
    outcome.state.agent.save(&dir.join("agent_final.txt"))?;
    let fin = FinalEvaluation {
        aggregate: outcome.final_metrics,
        reports: outcome.state.final_reports.clone(),
    };
    fs::write(dir.join("eval_final.json"), serde_json::to_string_pretty(&fin)?)?;
    Ok(fin)
}

/// Evaluates an agent checkpoint and writes the report (and its CSV) to
/// `out`, or to `<out_dir>/report.json`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: &Path, out: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    if !checkpoint.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let agent = Agent::load(checkpoint)?;
    let env = cfg.environment()?;
    if agent.state_dim() != env.state_dim() || agent.action_dim() != env.action_dim() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint has state/action dims ({}, {}) but env `{}` has ({}, {})",
            agent.state_dim(),
            agent.action_dim(),
            env.id(),
            env.state_dim(),
            env.action_dim()
        )));
    }
    let report = evaluate_policy(
        env.as_ref(),
        &agent,
        cfg.eval.episodes,
        cfg.eval.alpha,
        cfg.eval.anchors,
        cfg.seed,
        &cfg.digest(),
    )?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            fs::create_dir_all(&cfg.out_dir)?;
            cfg.out_dir.join("report.json")
        }
    };
    emit_report(&report, &path)?;
    Ok(report)
}

/// Value curves of the one-step illustrative MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig2Result {
    pub actions: Vec<f64>,
    /// Mean of the candidate rewards.
    pub neutral: Vec<f64>,
    /// CVaR of the candidate rewards at `alpha`.
    pub cvar: Vec<f64>,
    pub alpha: f64,
    pub neutral_argmax: f64,
    pub cvar_argmax: f64,
    pub safe_action: f64,
    pub spike_action: f64,
    pub neutral_at_safe: f64,
    pub neutral_at_spike: f64,
    pub cvar_at_safe: f64,
    pub cvar_at_spike: f64,
    pub data_action_range: (f64, f64),
}

impl Fig2Result {
    /// Neutral argmax at or beyond 0.9.
    pub fn neutral_argmax_outside(&self) -> bool {
        self.neutral_argmax >= 0.9
    }

    pub fn cvar_argmax_inside(&self) -> bool {
        (self.data_action_range.0..=self.data_action_range.1).contains(&self.cvar_argmax)
    }

    /// The safe action wins under CVaR while losing on the mean.
    pub fn safe_beats_spike(&self) -> bool {
        self.cvar_at_safe > self.cvar_at_spike && self.neutral_at_safe < self.neutral_at_spike
    }
}

/// Neutral and CVaR values of `m` model-sampled rewards at each action.
/// Action `i` draws from ChaCha stream `i` of `seed`.
pub fn fig2_curves(ensemble: &GaussianEnsemble, actions: &[f64], m: usize, alpha: f64, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let spec = RiskSpec::cvar(alpha)?;
    let mut neutral = Vec::with_capacity(actions.len());
    let mut cvar = Vec::with_capacity(actions.len());
    for (i, &a) in actions.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let draws = ensemble.sample_successors(&[0.0], &[a], m, &mut rng)?;
        let dist = DiscreteDistribution::uniform(draws.iter().map(|d| d.reward).collect())?;
        neutral.push(dist.expectation());
        cvar.push(risk_value(&dist, spec)?);
    }
    Ok((neutral, cvar))
}

fn argmax(xs: &[f64], at: &[f64]) -> f64 {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    at[best]
}

/// Fits the ensemble on the illustrative dataset and sweeps the action grid.
pub fn reproduce_fig2(cfg: &ExperimentConfig) -> Result<(Fig2Result, FitReport)> {
    let spec = &cfg.env.illustrative;
    let data = generate_illustrative_dataset(spec, cfg.seed)?;
    let mut model = cfg.fig2.model.clone();
    model.seed = cfg.seed.wrapping_add(model.seed);
    let (ens, fit) = fit_ensemble(&data, &model)?;
    let f = &cfg.fig2;
    let n = f.grid_points;
    let actions: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let seed = cfg.seed.wrapping_add(1);
    let (neutral, cvar) = fig2_curves(&ens, &actions, f.candidates, f.alpha, seed)?;
    let probes = [f.safe_action, f.spike_action];
    let (pn, pc) = fig2_curves(&ens, &probes, f.candidates, f.alpha, seed.wrapping_add(1))?;
    Ok((
        Fig2Result {
            neutral_argmax: argmax(&neutral, &actions),
            cvar_argmax: argmax(&cvar, &actions),
            actions,
            neutral,
            cvar,
            alpha: f.alpha,
            safe_action: f.safe_action,
            spike_action: f.spike_action,
            neutral_at_safe: pn[0],
            neutral_at_spike: pn[1],
            cvar_at_safe: pc[0],
            cvar_at_spike: pc[1],
            data_action_range: spec.data_action_range,
        },
        fit,
    ))
}

/// [`reproduce_fig2`] plus `<out_dir>/fig2.json` and `fig2.csv`.
pub fn cmd_reproduce_fig2(cfg: &ExperimentConfig) -> Result<Fig2Result> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    RunManifest::new("reproduce-fig2", cfg, &[("figure", "fig2.json"), ("curves", "fig2.csv")])?.write(&cfg.out_dir)?;
    let (res, _) = reproduce_fig2(cfg)?;
    fs::write(cfg.out_dir.join("fig2.json"), serde_json::to_string_pretty(&res)?)?;
    let mut csv = String::from("action,neutral,cvar\n");
    for ((a, n), c) in res.actions.iter().zip(&res.neutral).zip(&res.cvar) {
        csv.push_str(&format!("{a:?},{n:?},{c:?}\n"));
    }
    fs::write(cfg.out_dir.join("fig2.csv"), csv)?;
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::constant_member;

    #[test]
    fn config_round_trip_and_defaults() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), cfg);
        let custom = ExperimentConfig::from_toml_str("seed = 4\n[rollout]\nrisk = \"wang:0.75\"\nk = 5\n").unwrap();
        assert_eq!(custom.rollout.risk, RiskSpec::Wang { eta: 0.75 });
        assert_eq!(ExperimentConfig::from_toml_str(&custom.to_toml().unwrap()).unwrap(), custom);
        let nested = ExperimentConfig::from_toml_str("[fig2.model]\nhidden_width = 32\n").unwrap();
        assert_eq!(nested.fig2.model.hidden_width, 32);
        assert_eq!(nested.fig2.model.epochs, Fig2Section::default().model.epochs);
    }

    #[test]
    fn unknown_keys_and_env_ids_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[agent]\nactor_rl = 1.0\n").is_err());
        let err = ExperimentConfig::from_toml_str("[env]\nid = \"mujoco\"\n").unwrap_err();
        assert!(err.to_string().contains("currency, illustrative"), "{err}");
    }

    #[test]
    fn env_overrides_apply_to_dotted_keys() {
        let vars = vec![
            ("RISKMBRL__AGENT__ACTOR_LR".to_string(), "0.003".to_string()),
            ("RISKMBRL__ROLLOUT__RISK".to_string(), "neutral".to_string()),
            ("RISKMBRL__ENV__CURRENCY__HORIZON".to_string(), "20".to_string()),
            ("RISKMBRL__SEED".to_string(), "17".to_string()),
            ("PATH".to_string(), "/bin".to_string()),
        ];
        let cfg = ExperimentConfig::load(None, vars).unwrap();
        assert_eq!(cfg.agent.actor_lr, 0.003);
        assert_eq!(cfg.rollout.risk, RiskSpec::Neutral);
        assert_eq!(cfg.env.currency.horizon, 20);
        assert_eq!(cfg.seed, 17);
        let bad = vec![("RISKMBRL__AGENT__NOPE".to_string(), "1".to_string())];
        assert!(ExperimentConfig::load(None, bad).is_err());
    }

    #[test]
    fn gen_data_is_deterministic_and_guarded() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            out_dir: dir.path().join("a"),
            data: DataSection {
                n_episodes: 20,
                ..DataSection::default()
            },
            ..ExperimentConfig::default()
        };
        let p = cmd_gen_data(&cfg, false).unwrap();
        assert_eq!(OfflineDataset::load(&p).unwrap().len(), 20 * 50);
        assert!(cmd_gen_data(&cfg, false).is_err());
        let first = fs::read(&p).unwrap();
        cmd_gen_data(&cfg, true).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
        let manifest = RunManifest::read(&cfg.out_dir).unwrap();
        for f in manifest.files.values() {
            assert!(cfg.out_dir.join(f).exists());
        }
    }

    #[test]
    fn default_dataset_size() {
        let cfg = ExperimentConfig::default();
        let d = build_dataset(&cfg).unwrap();
        assert_eq!(d.len(), 50_000);
    }

    #[test]
    fn curves_coincide_without_uncertainty() {
        let members = (0..5)
            .map(|_| constant_member(&[0.3], 0.3, &[0.0], 0.0, 1).unwrap())
            .collect();
        let ens = GaussianEnsemble::new(members, (0..5).collect(), 1, 1, false, Normalizer::identity(2), Normalizer::identity(2))
            .unwrap();
        let actions: Vec<f64> = (0..11).map(|i| -1.0 + 0.2 * i as f64).collect();
        let (n, c) = fig2_curves(&ens, &actions, 100, 0.1, 0).unwrap();
        for (a, b) in n.iter().zip(&c) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn evaluate_rejects_missing_and_mismatched_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            out_dir: dir.path().to_path_buf(),
            ..ExperimentConfig::default()
        };
        assert!(cmd_evaluate(&cfg, &dir.path().join("missing.txt"), None).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let agent = Agent::new(1, 1, AgentConfig::default(), Normalizer::identity(1), &mut rng).unwrap();
        let p = dir.path().join("agent.txt");
        agent.save(&p).unwrap();
        assert!(matches!(cmd_evaluate(&cfg, &p, None), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn fresh_agent_scores_near_zero() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            out_dir: dir.path().to_path_buf(),
            ..ExperimentConfig::default()
        };
        let data = generate_currency_dataset(5, &cfg.env.currency, 0).unwrap();
        let st = TrainState::fresh(&cfg, &data).unwrap();
        let p = dir.path().join("agent.txt");
        st.agent.save(&p).unwrap();
        let report = cmd_evaluate(&cfg, &p, None).unwrap();
        assert!(report.normalized_mean.abs() <= 10.0);
        let back = crate::eval::read_report(&dir.path().join("report.json")).unwrap();
        assert_eq!(back, report);
    }

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            out_dir: dir.to_path_buf(),
            data: DataSection {
                n_episodes: 40,
                ..DataSection::default()
            },
            model: ModelConfig {
                epochs: 2,
                hidden_width: 16,
                hidden_layers: 2,
                ..ModelConfig::default()
            },
            rollout: RolloutConfig {
                n_rollouts: 50,
                ..RolloutConfig::default()
            },
            agent: AgentConfig {
                batch_size: 32,
                hidden_width: 16,
                ..AgentConfig::default()
            },
            train: TrainSection {
                iterations: 6,
                updates_per_iteration: 5,
                checkpoint_every: 3,
                ..TrainSection::default()
            },
            eval: EvalSection {
                episodes: 10,
                every: 2,
                last_checkpoints: 2,
                ..EvalSection::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let full = tiny_config(&dir.path().join("full"));
        let fin_full = cmd_train(&full, TrainOptions::default()).unwrap();
        assert!(cmd_train(&full, TrainOptions::default()).is_err());

        // interrupted after the iteration-3 checkpoint, then resumed
        let part_dir = dir.path().join("part");
        let part = tiny_config(&part_dir);
        cmd_train(&part, TrainOptions::default()).unwrap();
        let st = TrainState::load(&part_dir.join("checkpoint")).unwrap();
        assert_eq!(st.iteration, 6);
        let metrics: Vec<String> = fs::read_to_string(part_dir.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(str::to_string)
            .collect();
        // rebuild a checkpoint at iteration 3 by replaying the first three iterations
        let data = OfflineDataset::load(&part_dir.join("dataset.bin")).unwrap();
        let ens = GaussianEnsemble::load(&part_dir.join("model.txt")).unwrap();
        let short = ExperimentConfig {
            train: TrainSection {
                iterations: 3,
                ..part.train.clone()
            },
            ..part.clone()
        };
        let mut none = |_: &IterationLog, _: &TrainState| Ok(());
        let mid = train_agent(&short, &data, &ens, TrainState::fresh(&part, &data).unwrap(), &mut none).unwrap();
        mid.state.save(&part_dir.join("checkpoint")).unwrap();
        fs::write(part_dir.join("metrics.jsonl"), metrics[..3].join("\n") + "\n").unwrap();
        let fin_resumed = cmd_train(
            &part,
            TrainOptions {
                resume: true,
                force: false,
            },
        )
        .unwrap();
        let a: Vec<IterationLog> = fs::read_to_string(full.out_dir.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        let b: Vec<IterationLog> = fs::read_to_string(part_dir.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(a.len(), 6);
        assert_eq!(a[3..], b[3..]);
        assert_eq!(fin_full.aggregate.normalized_cvar, fin_resumed.aggregate.normalized_cvar);
        let manifest = RunManifest::read(&full.out_dir).unwrap();
        for f in manifest.files.values() {
            assert!(full.out_dir.join(f).exists(), "{f}");
        }
    }
}
