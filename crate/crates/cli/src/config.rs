use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use dglight::critic::CriticConfig;
use dglight::grpo::GrpoConfig;
use dglight::jsgrpo::{InteriorMode, JsConfig};
use dglight::policy::SamplingParams;
use dglight::rollout::RolloutConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Fixedtime,
    Maxpressure,
    Random,
    CriticGreedy,
    MockPolicy,
    Llm,
}

impl ControllerKind {
    pub fn label(self) -> &'static str {
        match self {
            ControllerKind::Fixedtime => "fixedtime",
            ControllerKind::Maxpressure => "maxpressure",
            ControllerKind::Random => "random",
            ControllerKind::CriticGreedy => "critic-greedy",
            ControllerKind::MockPolicy => "mock-policy",
            ControllerKind::Llm => "llm",
        }
    }
}

/// Everything a run depends on. Written to every output directory as `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: Option<String>,
    pub network: Option<PathBuf>,
    pub flow: Option<PathBuf>,
    pub dataset: Option<String>,
    /// Vehicles per second per entry road for generated grids.
    pub demand_rate: f64,
    pub lane_length: f64,
    pub episode: u64,
    pub interval: u64,
    pub controller: ControllerKind,
    pub seed: u64,
    pub critic_rounds: usize,
    pub critic: CriticConfig,
    pub rollout: RolloutConfig,
    pub grpo: GrpoConfig,
    pub jsgrpo: JsConfig,
    pub sampling: SamplingParams,
    pub llm_url: Option<String>,
    pub model: String,
    pub critic_checkpoint: Option<PathBuf>,
    pub policy_checkpoint: Option<PathBuf>,
    pub records: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: None,
            network: None,
            flow: None,
            dataset: None,
            demand_rate: 0.1,
            lane_length: 300.0,
            episode: 3600,
            interval: 30,
            controller: ControllerKind::Maxpressure,
            seed: 0,
            critic_rounds: 20,
            critic: CriticConfig::default(),
            rollout: RolloutConfig::default(),
            grpo: GrpoConfig::default(),
            jsgrpo: JsConfig::default(),
            sampling: SamplingParams::default(),
            llm_url: None,
            model: "default".into(),
            critic_checkpoint: None,
            policy_checkpoint: None,
            records: None,
            out: PathBuf::from("out"),
        }
    }
}

/// Flags shared by every subcommand. Values given here override the config file.
#[derive(Args, Debug, Default)]
pub struct Flags {
    /// JSON run config; flags take precedence over its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Grid size as ROWSxCOLS
    #[arg(long, global = true)]
    pub grid: Option<String>,
    #[arg(long, global = true)]
    pub network: Option<PathBuf>,
    #[arg(long, global = true)]
    pub flow: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset: Option<String>,
    #[arg(long, global = true)]
    pub rate: Option<f64>,
    #[arg(long, global = true)]
    pub episode: Option<u64>,
    #[arg(long, global = true)]
    pub interval: Option<u64>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    /// Use max pressure instead of policy resampling inside forked rollouts
    #[arg(long, global = true)]
    pub cheap: bool,
    #[arg(long, global = true)]
    pub rounds: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Completion endpoint; falls back to DGLIGHT_LLM_URL
    #[arg(long, global = true)]
    pub llm_url: Option<String>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub controller: Option<ControllerKind>,
    /// Critic checkpoint to load
    #[arg(long, global = true)]
    pub critic: Option<PathBuf>,
    /// Mock-policy checkpoint to load
    #[arg(long, global = true)]
    pub policy: Option<PathBuf>,
    /// Rollout record file to train on
    #[arg(long, global = true)]
    pub records: Option<PathBuf>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(flags: Flags) -> anyhow::Result<Self> {
        let mut c = match &flags.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if flags.grid.is_some() {
            c.network = None;
            c.grid = flags.grid;
        }
        if flags.network.is_some() {
            c.grid = None;
            c.network = flags.network;
        }
        if flags.flow.is_some() {
            c.flow = flags.flow;
        }
        set(&mut c.dataset, flags.dataset.map(Some));
        set(&mut c.demand_rate, flags.rate);
        set(&mut c.episode, flags.episode);
        set(&mut c.interval, flags.interval);
        set(&mut c.seed, flags.seed);
        set(&mut c.rollout.k, flags.k);
        set(&mut c.grpo.group_size, flags.k);
        set(&mut c.sampling.n, flags.k);
        set(&mut c.jsgrpo.horizon, flags.horizon);
        set(&mut c.jsgrpo.gamma, flags.gamma);
        set(&mut c.jsgrpo.alpha, flags.alpha);
        set(&mut c.jsgrpo.beta, flags.beta);
        if flags.cheap {
            c.jsgrpo.interior = InteriorMode::MaxPressure;
        }
        set(&mut c.critic_rounds, flags.rounds);
        set(&mut c.grpo.epochs, flags.epochs);
        set(&mut c.out, flags.out);
        set(&mut c.llm_url, flags.llm_url.map(Some));
        set(&mut c.model, flags.model);
        set(&mut c.controller, flags.controller);
        set(&mut c.critic_checkpoint, flags.critic.map(Some));
        set(&mut c.policy_checkpoint, flags.policy.map(Some));
        set(&mut c.records, flags.records.map(Some));

        c.critic.episode = dglight::controller::EpisodeSpec::new(c.episode, c.interval)?;
        c.critic.seed = c.seed;
        c.rollout.episode = c.episode;
        c.rollout.interval = c.interval;
        c.rollout.seed = c.seed;
        c.grpo.seed = c.seed;
        c.grpo.r_invalid = c.rollout.r_invalid;
        c.grpo.temperature = c.sampling.temperature;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.grid.is_some() && self.network.is_some() {
            bail!("give either --grid or --network, not both");
        }
        if let Some(g) = &self.grid {
            parse_grid(g)?;
        }
        self.critic.validate()?;
        self.rollout.validate()?;
        self.grpo.validate()?;
        self.jsgrpo.validate()?;
        self.sampling.validate()?;
        for path in [&self.network, &self.flow, &self.critic_checkpoint, &self.policy_checkpoint, &self.records]
            .into_iter()
            .flatten()
        {
            if !path.exists() {
                bail!("{} does not exist", path.display());
            }
        }
        Ok(())
    }

    pub fn dataset_name(&self) -> String {
        if let Some(d) = &self.dataset {
            return d.clone();
        }
        match (&self.grid, &self.network) {
            (Some(g), _) => format!("grid{g}"),
            (None, Some(p)) => p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            _ => String::new(),
        }
    }
}

pub fn parse_grid(spec: &str) -> anyhow::Result<(usize, usize)> {
    let (r, c) = spec.split_once(['x', 'X']).with_context(|| format!("grid {spec:?} is not ROWSxCOLS"))?;
    let (r, c): (usize, usize) = (r.parse()?, c.parse()?);
    if r == 0 || c == 0 {
        bail!("grid {spec:?} must have at least one row and column");
    }
    Ok((r, c))
}
