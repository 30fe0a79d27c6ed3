//! World assembly and the epoch loop for the three simulation studies.
//!
//! An epoch resets every inventory, then runs `steps_per_epoch` steps in which
//! each live agent (in a freshly shuffled order) observes, samples an action
//! from its current policy and acts. Sell actions are routed to the market
//! decider immediately. Parameters change only after the last step, when every
//! model trains on its own buffer.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::env::{
    AgentAction, AgentState, EnvConfig, EventRecord, MarketPrediction, Resource, Specialization,
    ACTION_COUNT, OBSERVATION_SIZE, PREDICTION_COUNT,
};
use crate::error::{Error, Result};
use crate::metrics::{probe_market, ProbeResult, ProbeTarget};
use crate::population::{
    generate_heldout_probes, generate_population, generate_replacement_cohort, CodeRegistry,
    GroupLabel, IdentityCode, ManifestRow, PopulationSpec, ReplacementSchedule, Scheme, CODE_DIGITS,
};
use crate::ppo::{train_on_epoch, PolicyModel, RolloutBuffer, TrainStats, TrainerConfig};
use crate::rng::{derive_stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    /// Random codes; the market must learn every individual.
    Individuation,
    /// Group label correlated with skill.
    Regularity,
    /// Regularity world with iterative replacement by uncorrelated agents.
    Generational,
}

impl Study {
    pub fn name(self) -> &'static str {
        match self {
            Study::Individuation => "individuation",
            Study::Regularity => "regularity",
            Study::Generational => "generational",
        }
    }

    pub fn scheme(self) -> Scheme {
        match self {
            Study::Individuation => Scheme::Random,
            Study::Regularity | Study::Generational => Scheme::Correlated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub study: Study,
    pub size: usize,
    /// Training epochs for a fresh world (ignored by the generational phase,
    /// which follows the replacement schedule).
    pub epochs: u32,
    pub steps_per_epoch: u32,
    pub runs: u32,
    pub trainer: TrainerConfig,
    pub env: EnvConfig,
    pub replacement: ReplacementSchedule,
    /// Write a world checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: u32,
    pub probes_per_group: usize,
    /// Sample probe predictions instead of taking the argmax.
    pub probe_sampling: bool,
    /// Epochs averaged for each export timepoint.
    pub eval_window: u32,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            study: Study::Regularity,
            size: 300,
            epochs: 200,
            steps_per_epoch: 200,
            runs: 20,
            trainer: TrainerConfig::default(),
            env: EnvConfig::default(),
            replacement: ReplacementSchedule::default(),
            checkpoint_every: 0,
            probes_per_group: 10,
            probe_sampling: false,
            eval_window: 10,
        }
    }
}

impl StudyConfig {
    pub fn population_spec(&self) -> PopulationSpec {
        PopulationSpec {
            size: self.size,
            scheme: self.study.scheme(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.population_spec().validate()?;
        self.trainer.validate()?;
        if self.steps_per_epoch == 0 {
            return Err(Error::config("steps_per_epoch must be at least 1"));
        }
        if self.runs == 0 {
            return Err(Error::config("runs must be at least 1"));
        }
        if self.probes_per_group == 0 {
            return Err(Error::config("probes_per_group must be at least 1"));
        }
        if self.eval_window == 0 {
            return Err(Error::config("eval_window must be at least 1"));
        }
        if self.study == Study::Generational {
            for n in self.population_spec().group_sizes() {
                self.replacement.per_wave(n)?;
            }
        }
        Ok(())
    }
}

/// Where an agent sits relative to its group's dominant specialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleClass {
    /// Randomly coded population; no group label.
    Individual,
    Majority,
    Minority,
    Builder,
    /// Replacement agent whose skill matches the group's dominant skill.
    ReplacementMajority,
    /// Replacement agent whose skill differs from the group's dominant skill.
    ReplacementMinority,
}

impl RoleClass {
    pub fn classify(group: Option<GroupLabel>, skill: Specialization, wave_introduced: u32) -> Self {
        let Some(group) = group else {
            return if skill == Specialization::Builder {
                RoleClass::Builder
            } else {
                RoleClass::Individual
            };
        };
        if skill == Specialization::Builder {
            return RoleClass::Builder;
        }
        match (wave_introduced > 0, skill == group.majority()) {
            (false, true) => RoleClass::Majority,
            (false, false) => RoleClass::Minority,
            (true, true) => RoleClass::ReplacementMajority,
            (true, false) => RoleClass::ReplacementMinority,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RoleClass::Individual => "individual",
            RoleClass::Majority => "majority",
            RoleClass::Minority => "minority",
            RoleClass::Builder => "builder",
            RoleClass::ReplacementMajority => "replacement_majority",
            RoleClass::ReplacementMinority => "replacement_minority",
        }
    }

    pub fn is_minority(self) -> bool {
        matches!(self, RoleClass::Minority | RoleClass::ReplacementMinority)
    }

    pub fn is_replacement(self) -> bool {
        matches!(self, RoleClass::ReplacementMajority | RoleClass::ReplacementMinority)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSlot {
    pub id: u32,
    pub state: AgentState,
    pub group: Option<GroupLabel>,
    pub wave_introduced: u32,
    pub model: PolicyModel,
    pub buffer: RolloutBuffer,
}

impl AgentSlot {
    pub fn role(&self) -> RoleClass {
        RoleClass::classify(self.group, self.state.skill, self.wave_introduced)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSlot {
    pub model: PolicyModel,
    pub buffer: RolloutBuffer,
    /// Incremented each time the market decider is swapped for a fresh one.
    pub generation: u32,
}

/// Every agent ever created, with the wave that removed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub agent_id: u32,
    pub code: IdentityCode,
    pub group: Option<GroupLabel>,
    pub skill: Specialization,
    pub wave_introduced: u32,
    pub wave_removed: Option<u32>,
}

impl RosterEntry {
    pub fn manifest_row(&self) -> ManifestRow {
        ManifestRow {
            agent_id: self.agent_id,
            code: self.code.to_string(),
            group: self.group.map_or("none", |g| g.color()).to_string(),
            specialization: self.skill.name().to_string(),
            wave_introduced: self.wave_introduced,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub code: IdentityCode,
    pub group: Option<GroupLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Streams {
    env: Stream,
    order: Stream,
    agent_policy: Stream,
    market_policy: Stream,
    init: Stream,
    population: Stream,
    probe: Stream,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Streams {
            env: derive_stream(seed, "env"),
            order: derive_stream(seed, "order"),
            agent_policy: derive_stream(seed, "agent-policy"),
            market_policy: derive_stream(seed, "market-policy"),
            init: derive_stream(seed, "init"),
            population: derive_stream(seed, "population"),
            probe: derive_stream(seed, "probe"),
        }
    }
}

/// Complete, serializable simulation state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub config: StudyConfig,
    pub seed: u64,
    pub agents: Vec<AgentSlot>,
    pub market: MarketSlot,
    /// Epochs completed so far.
    pub epoch: u32,
    /// Replacement waves applied so far.
    pub wave: u32,
    pub next_agent_id: u32,
    pub registry: CodeRegistry,
    pub probes: Vec<Probe>,
    pub roster: Vec<RosterEntry>,
    streams: Streams,
}

/// Per-agent tallies for one epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentEpochStats {
    pub agent_id: u32,
    pub chop_attempts: u32,
    pub chop_successes: u32,
    pub mine_attempts: u32,
    pub mine_successes: u32,
    pub build_attempts: u32,
    pub build_successes: u32,
    pub buy_wood: u32,
    pub buy_stone: u32,
    pub sell_wood: u32,
    pub sell_stone: u32,
    pub coordinated_sales: u32,
    pub insufficient_sales: u32,
    /// Market predictions made for this agent's sell attempts.
    pub predicted_wood: u32,
    pub predicted_stone: u32,
    /// Reward collected this epoch.
    pub coins: f64,
}

impl AgentEpochStats {
    pub fn sells(&self) -> u32 {
        self.sell_wood + self.sell_stone
    }

    pub fn sold(&self, r: Resource) -> u32 {
        match r {
            Resource::Wood => self.sell_wood,
            Resource::Stone => self.sell_stone,
        }
    }

    pub fn extracted(&self, r: Resource) -> u32 {
        match r {
            Resource::Wood => self.chop_attempts,
            Resource::Stone => self.mine_attempts,
        }
    }

    pub fn predicted(&self, r: Resource) -> u32 {
        match r {
            Resource::Wood => self.predicted_wood,
            Resource::Stone => self.predicted_stone,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaleRecord {
    pub agent_id: u32,
    pub offered: Resource,
    pub prediction: MarketPrediction,
    pub coordinated: bool,
    pub insufficient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTrainRecord {
    pub model_id: String,
    pub stats: TrainStats,
}

/// Everything that happened in one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// Zero-based index of this epoch within the world's lifetime.
    pub epoch: u32,
    pub wave: u32,
    pub market_generation: u32,
    /// Aligned with the world's agent list at the time of the epoch.
    pub agents: Vec<AgentEpochStats>,
    pub sales: Vec<SaleRecord>,
    /// Filled only when event recording is requested.
    pub events: Vec<EventRecord>,
    pub market_reward: f64,
    pub market_steps: usize,
    pub training: Vec<ModelTrainRecord>,
}

impl WorldState {
    /// A fresh, untrained world for `config`.
    pub fn new(config: StudyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut streams = Streams::new(seed);
        let mut registry = CodeRegistry::default();
        let spec = config.population_spec();
        let members = generate_population(&spec, &mut registry, &mut streams.population)?;
        let mut probes = Vec::new();
        match spec.scheme {
            Scheme::Random => {
                let n = config.probes_per_group * GroupLabel::ALL.len();
                for code in generate_heldout_probes(None, n, &mut registry, &mut streams.population)? {
                    probes.push(Probe { code, group: None });
                }
            }
            Scheme::Correlated => {
                for g in GroupLabel::ALL {
                    for code in generate_heldout_probes(
                        Some(g),
                        config.probes_per_group,
                        &mut registry,
                        &mut streams.population,
                    )? {
                        probes.push(Probe { code, group: Some(g) });
                    }
                }
            }
        }
        let market_model = PolicyModel::new(CODE_DIGITS, PREDICTION_COUNT, &mut streams.init);
        let mut world = WorldState {
            config,
            seed,
            agents: Vec::with_capacity(members.len()),
            market: MarketSlot {
                model: market_model,
                buffer: RolloutBuffer::new(CODE_DIGITS),
                generation: 0,
            },
            epoch: 0,
            wave: 0,
            next_agent_id: 0,
            registry,
            probes,
            roster: Vec::new(),
            streams,
        };
        for m in members {
            world.admit(m.state, m.group, m.wave_introduced);
        }
        Ok(world)
    }

    fn admit(&mut self, state: AgentState, group: Option<GroupLabel>, wave_introduced: u32) {
        let id = self.next_agent_id;
        self.next_agent_id += 1;
        self.roster.push(RosterEntry {
            agent_id: id,
            code: state.identity,
            group,
            skill: state.skill,
            wave_introduced,
            wave_removed: None,
        });
        let model = PolicyModel::new(OBSERVATION_SIZE, ACTION_COUNT, &mut self.streams.init);
        self.agents.push(AgentSlot {
            id,
            state,
            group,
            wave_introduced,
            model,
            buffer: RolloutBuffer::new(OBSERVATION_SIZE),
        });
    }

    pub fn group_size(&self, group: GroupLabel) -> usize {
        self.agents.iter().filter(|a| a.group == Some(group)).count()
    }

    /// Fraction of choppers among extraction specialists, per probe target.
    pub fn wood_truth_mix(&self, group: Option<GroupLabel>) -> f64 {
        let (mut wood, mut total) = (0usize, 0usize);
        for a in self.agents.iter().filter(|a| group.is_none() || a.group == group) {
            match a.state.skill {
                Specialization::Chopper => {
                    wood += 1;
                    total += 1;
                }
                Specialization::Miner => total += 1,
                Specialization::Builder => {}
            }
        }
        if total == 0 {
            0.5
        } else {
            wood as f64 / total as f64
        }
    }

    /// Evaluates the market on the held-out probes without changing it.
    pub fn probe(&self) -> Result<Vec<ProbeResult>> {
        let targets: Vec<ProbeTarget> = self
            .probes
            .iter()
            .map(|p| ProbeTarget {
                code: p.code,
                group: p.group,
            })
            .collect();
        let mut rng = self.streams.probe.clone();
        probe_market(
            &self.market.model,
            &targets,
            |g| self.wood_truth_mix(g),
            self.config.probe_sampling.then_some(&mut rng),
        )
    }

    /// Runs one epoch: act, then train every model on its own buffer.
    pub fn run_epoch(&mut self, record_events: bool) -> Result<EpochLog> {
        let steps = self.config.steps_per_epoch;
        let env = self.config.env.clone();
        let WorldState {
            agents,
            market,
            streams,
            epoch,
            ..
        } = self;
        for a in agents.iter_mut() {
            a.state.reset();
        }
        let mut stats: Vec<AgentEpochStats> = agents
            .iter()
            .map(|a| AgentEpochStats {
                agent_id: a.id,
                ..AgentEpochStats::default()
            })
            .collect();
        let mut sales = Vec::new();
        let mut events = Vec::new();
        let mut market_reward = 0.0;
        let mut order: Vec<usize> = (0..agents.len()).collect();

        for step in 0..steps {
            order.shuffle(&mut streams.order);
            for &i in &order {
                let slot = &mut agents[i];
                let obs = slot.state.observe(&env);
                let (action_idx, logp, value) = slot.model.act(&obs, &mut streams.agent_policy)?;
                let action = AgentAction::from_index(action_idx)
                    .ok_or_else(|| Error::training("actor produced an out-of-range action"))?;

                let mut market_step = None;
                let outcome = slot.state.apply_action(action, &env, &mut streams.env, |seller, _| {
                    let code = seller.identity.as_input();
                    let (p, mlogp, mvalue) = market.model.act(&code, &mut streams.market_policy)?;
                    let prediction = MarketPrediction::from_index(p)
                        .ok_or_else(|| Error::training("market produced an out-of-range prediction"))?;
                    market_step = Some((code, p, mlogp, mvalue));
                    Ok(prediction)
                })?;
                slot.buffer
                    .store(&obs, action_idx, logp, outcome.agent_reward, value)?;

                let s = &mut stats[i];
                match action {
                    AgentAction::ChopWood => {
                        s.chop_attempts += 1;
                        s.chop_successes += u32::from(outcome.success);
                    }
                    AgentAction::MineStone => {
                        s.mine_attempts += 1;
                        s.mine_successes += u32::from(outcome.success);
                    }
                    AgentAction::Build => {
                        s.build_attempts += 1;
                        s.build_successes += u32::from(outcome.success);
                    }
                    AgentAction::BuyWood => s.buy_wood += 1,
                    AgentAction::BuyStone => s.buy_stone += 1,
                    AgentAction::SellWood => s.sell_wood += 1,
                    AgentAction::SellStone => s.sell_stone += 1,
                }
                let mut market_delta = 0.0;
                if let Some(sale) = outcome.sale {
                    let (code, p, mlogp, mvalue) = market_step.expect("sale without market step");
                    let t = sale.transaction;
                    market_delta = t.market_reward;
                    market_reward += t.market_reward;
                    market.buffer.store(&code, p, mlogp, t.market_reward, mvalue)?;
                    match sale.prediction {
                        MarketPrediction::PredictWood => s.predicted_wood += 1,
                        MarketPrediction::PredictStone => s.predicted_stone += 1,
                    }
                    s.coordinated_sales += u32::from(t.coordinated);
                    s.insufficient_sales += u32::from(t.insufficient);
                    sales.push(SaleRecord {
                        agent_id: slot.id,
                        offered: sale.offered,
                        prediction: sale.prediction,
                        coordinated: t.coordinated,
                        insufficient: t.insufficient,
                    });
                }
                if record_events {
                    events.push(EventRecord {
                        epoch: *epoch,
                        step,
                        agent_id: slot.id,
                        action,
                        success: outcome.success,
                        agent_reward: outcome.agent_reward,
                        market_reward: market_delta,
                        wood_delta: outcome.wood_delta,
                        stone_delta: outcome.stone_delta,
                    });
                }
            }
        }
        for (s, a) in stats.iter_mut().zip(agents.iter()) {
            s.coins = a.state.coins;
        }

        // End of epoch: every model learns from its own experience.
        let trainer = self.config.trainer.clone();
        let mut training = Vec::with_capacity(self.agents.len() + 1);
        let market_steps = self.market.buffer.len();
        for a in &mut self.agents {
            a.buffer.mark_terminal();
            if let Some(st) = train_on_epoch(&mut a.model, &mut a.buffer, &trainer)? {
                training.push(ModelTrainRecord {
                    model_id: format!("agent-{}", a.id),
                    stats: st,
                });
            }
        }
        self.market.buffer.mark_terminal();
        if let Some(st) = train_on_epoch(&mut self.market.model, &mut self.market.buffer, &trainer)? {
            training.push(ModelTrainRecord {
                model_id: format!("market-{}", self.market.generation),
                stats: st,
            });
        }

        let log = EpochLog {
            epoch: self.epoch,
            wave: self.wave,
            market_generation: self.market.generation,
            agents: stats,
            sales,
            events,
            market_reward,
            market_steps,
            training,
        };
        self.epoch += 1;
        Ok(log)
    }

    /// Replaces one wave's share of the original agents in every group.
    pub fn apply_replacement(&mut self, wave: u32) -> Result<()> {
        let schedule = self.config.replacement.clone();
        if wave != self.wave + 1 || wave > schedule.waves {
            return Err(Error::config(format!(
                "replacement wave {wave} out of order (last applied {}, schedule has {})",
                self.wave, schedule.waves
            )));
        }
        if self.agents.iter().any(|a| a.group.is_none()) {
            return Err(Error::config("replacement requires a group-labelled population"));
        }
        for group in GroupLabel::ALL {
            let per_wave = schedule.per_wave(self.group_size(group))?;
            let mut originals: Vec<u32> = self
                .agents
                .iter()
                .filter(|a| a.group == Some(group) && a.wave_introduced == 0)
                .map(|a| a.id)
                .collect();
            if originals.len() < per_wave {
                return Err(Error::config(format!(
                    "group {} has only {} original agents left for wave {wave}",
                    group.color(),
                    originals.len()
                )));
            }
            originals.shuffle(&mut self.streams.population);
            let leaving = &originals[..per_wave];
            self.agents.retain(|a| !leaving.contains(&a.id));
            for entry in self.roster.iter_mut().filter(|e| leaving.contains(&e.agent_id)) {
                entry.wave_removed = Some(wave);
            }
            let cohort = generate_replacement_cohort(
                group,
                per_wave,
                wave,
                &mut self.registry,
                &mut self.streams.population,
            )?;
            for m in cohort {
                self.admit(m.state, m.group, m.wave_introduced);
            }
        }
        self.wave = wave;
        Ok(())
    }

    /// Swaps in a fresh, untrained market decider.
    pub fn replace_market(&mut self) {
        self.market = MarketSlot {
            model: PolicyModel::new(CODE_DIGITS, PREDICTION_COUNT, &mut self.streams.init),
            buffer: RolloutBuffer::new(CODE_DIGITS),
            generation: self.market.generation + 1,
        };
    }

    pub fn checkpoint(&self) -> Result<Vec<u8>> {
        checkpoint::encode("world", self)
    }

    pub fn restore(bytes: &[u8]) -> Result<Self> {
        checkpoint::decode("world", bytes)
    }
}

/// Phase of a run an epoch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Wave(u32),
    PostMarket,
}

/// Named points of a generational run used for trajectory exports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timepoint {
    /// End of the pre-replacement training.
    Initial,
    /// End of the block that follows the second replacement wave.
    Wave2,
    /// End of the run, after every wave (and market replacement, if enabled).
    Wave5,
}

impl Timepoint {
    pub const ALL: [Timepoint; 3] = [Timepoint::Initial, Timepoint::Wave2, Timepoint::Wave5];

    pub fn name(self) -> &'static str {
        match self {
            Timepoint::Initial => "initial",
            Timepoint::Wave2 => "wave2",
            Timepoint::Wave5 => "wave5",
        }
    }

    pub fn parse(s: &str) -> Option<Timepoint> {
        Timepoint::ALL.into_iter().find(|t| t.name() == s)
    }
}

/// Compact per-epoch record kept in a run artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub phase: Phase,
    pub wave: u32,
    pub market_generation: u32,
    pub agents: Vec<AgentEpochStats>,
    pub probes: Vec<ProbeResult>,
    pub market_reward: f64,
    pub market_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub timepoint: Timepoint,
    /// Number of epochs completed at the boundary.
    pub epochs_done: u32,
}

pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;

/// The metric history of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub schema_version: u32,
    pub seed: u64,
    pub config: StudyConfig,
    pub roster: Vec<RosterEntry>,
    pub epochs: Vec<EpochRecord>,
    pub boundaries: Vec<Boundary>,
}

impl RunArtifact {
    pub fn new(world: &WorldState) -> Self {
        RunArtifact {
            schema_version: ARTIFACT_SCHEMA_VERSION,
            seed: world.seed,
            config: world.config.clone(),
            roster: world.roster.clone(),
            epochs: Vec::new(),
            boundaries: Vec::new(),
        }
    }

    pub fn roster_entry(&self, agent_id: u32) -> Option<&RosterEntry> {
        self.roster.iter().find(|r| r.agent_id == agent_id)
    }

    pub fn boundary(&self, timepoint: Timepoint) -> Option<u32> {
        self.boundaries
            .iter()
            .find(|b| b.timepoint == timepoint)
            .map(|b| b.epochs_done)
    }

    fn mark(&mut self, timepoint: Timepoint, epochs_done: u32) {
        self.boundaries.retain(|b| b.timepoint != timepoint);
        self.boundaries.push(Boundary {
            timepoint,
            epochs_done,
        });
    }
}

/// Receives each epoch as it completes, after its record was appended.
pub trait EpochObserver {
    fn on_epoch(&mut self, world: &WorldState, log: &EpochLog, artifact: &RunArtifact) -> Result<()>;
}

impl<F> EpochObserver for F
where
    F: FnMut(&WorldState, &EpochLog, &RunArtifact) -> Result<()>,
{
    fn on_epoch(&mut self, world: &WorldState, log: &EpochLog, artifact: &RunArtifact) -> Result<()> {
        self(world, log, artifact)
    }
}

/// No-op observer.
pub fn silent(_: &WorldState, _: &EpochLog, _: &RunArtifact) -> Result<()> {
    Ok(())
}

/// A world together with the history that produced it; the unit that is
/// checkpointed and resumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub world: WorldState,
    pub artifact: RunArtifact,
}

impl Session {
    pub fn fresh(config: &StudyConfig, seed: u64) -> Result<Self> {
        if config.study == Study::Generational {
            return Err(Error::config(
                "the generational study starts from a trained regularity world",
            ));
        }
        let world = WorldState::new(config.clone(), seed)?;
        let artifact = RunArtifact::new(&world);
        Ok(Session { world, artifact })
    }

    /// Turns a finished regularity session into the start of a generational run.
    pub fn into_generational(mut self, schedule: &ReplacementSchedule) -> Result<Self> {
        let world = &mut self.world;
        if world.config.study != Study::Regularity {
            return Err(Error::config("generational runs start from a regularity world"));
        }
        if world.epoch < world.config.epochs {
            return Err(Error::config(format!(
                "regularity world has trained {} of {} epochs",
                world.epoch, world.config.epochs
            )));
        }
        world.config.study = Study::Generational;
        world.config.replacement = schedule.clone();
        world.config.validate()?;
        self.artifact.config = world.config.clone();
        let done = world.epoch;
        self.artifact.mark(Timepoint::Initial, done);
        Ok(self)
    }

    pub fn checkpoint(&self) -> Result<Vec<u8>> {
        checkpoint::encode("session", self)
    }

    pub fn restore(bytes: &[u8]) -> Result<Self> {
        checkpoint::decode("session", bytes)
    }

    pub fn is_complete(&self) -> bool {
        match self.world.config.study {
            Study::Individuation | Study::Regularity => self.world.epoch >= self.world.config.epochs,
            Study::Generational => self.artifact.boundary(Timepoint::Wave5).is_some(),
        }
    }

    /// Trains until the study's protocol is complete, picking up wherever the
    /// session stopped.
    pub fn run(&mut self, observer: &mut dyn EpochObserver) -> Result<()> {
        match self.world.config.study {
            Study::Individuation | Study::Regularity => {
                let remaining = self.world.config.epochs.saturating_sub(self.world.epoch);
                self.run_epochs(remaining, Phase::Train, observer)?;
                let done = self.world.epoch;
                self.artifact.mark(Timepoint::Initial, done);
                Ok(())
            }
            Study::Generational => self.run_generational(observer),
        }
    }

    fn run_generational(&mut self, observer: &mut dyn EpochObserver) -> Result<()> {
        let schedule = self.world.config.replacement.clone();
        let start = self.artifact.boundary(Timepoint::Initial).ok_or_else(|| {
            Error::config("generational session has no pre-replacement boundary")
        })?;
        for wave in 1..=schedule.waves {
            let end = start + wave * schedule.inter_wave_epochs;
            if self.world.epoch >= end {
                continue;
            }
            if self.world.wave < wave {
                self.world.apply_replacement(wave)?;
            }
            let remaining = end - self.world.epoch;
            self.run_epochs(remaining, Phase::Wave(wave), observer)?;
            if wave == 2 {
                self.artifact.mark(Timepoint::Wave2, end);
            }
        }
        if schedule.replace_market {
            let end = start + schedule.waves * schedule.inter_wave_epochs + schedule.post_market_epochs;
            if self.world.market.generation == 0 {
                self.world.replace_market();
            }
            let remaining = end.saturating_sub(self.world.epoch);
            self.run_epochs(remaining, Phase::PostMarket, observer)?;
        }
        let done = self.world.epoch;
        self.artifact.mark(Timepoint::Wave5, done);
        Ok(())
    }

    /// Trains for `epochs` epochs, appending one record per epoch.
    pub fn run_epochs(
        &mut self,
        epochs: u32,
        phase: Phase,
        observer: &mut dyn EpochObserver,
    ) -> Result<()> {
        for _ in 0..epochs {
            let log = self.world.run_epoch(false)?;
            let probes = self.world.probe()?;
            self.artifact.epochs.push(EpochRecord {
                epoch: log.epoch,
                phase,
                wave: log.wave,
                market_generation: log.market_generation,
                agents: log.agents.clone(),
                probes,
                market_reward: log.market_reward,
                market_steps: log.market_steps,
            });
            if self.artifact.roster != self.world.roster {
                self.artifact.roster = self.world.roster.clone();
            }
            observer.on_epoch(&self.world, &log, &self.artifact)?;
        }
        Ok(())
    }
}

/// Runs a whole study for one seed.
///
/// A generational study needs the finished regularity session it continues
/// from; fresh studies ignore `start`.
pub fn run_study(
    config: &StudyConfig,
    seed: u64,
    start: Option<Session>,
    observer: &mut dyn EpochObserver,
) -> Result<Session> {
    config.validate()?;
    let mut session = match config.study {
        Study::Individuation | Study::Regularity => Session::fresh(config, seed)?,
        Study::Generational => {
            let start = start.ok_or_else(|| {
                Error::config("the generational study requires a finished regularity run to start from")
            })?;
            let mut session = start.into_generational(&config.replacement)?;
            let world = &mut session.world;
            world.config.steps_per_epoch = config.steps_per_epoch;
            world.config.trainer = config.trainer.clone();
            world.config.checkpoint_every = config.checkpoint_every;
            world.config.eval_window = config.eval_window;
            session.artifact.config = world.config.clone();
            session
        }
    };
    session.run(observer)?;
    Ok(session)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(study: Study, size: usize) -> StudyConfig {
        StudyConfig {
            study,
            size,
            epochs: 2,
            steps_per_epoch: 5,
            probes_per_group: 2,
            ..StudyConfig::default()
        }
    }

    #[test]
    fn role_classes() {
        use Specialization::*;
        let p = Some(GroupLabel::Purple);
        assert_eq!(RoleClass::classify(p, Chopper, 0), RoleClass::Majority);
        assert_eq!(RoleClass::classify(p, Miner, 0), RoleClass::Minority);
        assert_eq!(RoleClass::classify(p, Builder, 0), RoleClass::Builder);
        assert_eq!(RoleClass::classify(p, Miner, 3), RoleClass::ReplacementMinority);
        assert_eq!(RoleClass::classify(p, Chopper, 3), RoleClass::ReplacementMajority);
        assert_eq!(RoleClass::classify(None, Miner, 0), RoleClass::Individual);
    }

    #[test]
    fn epoch_buffers_and_logs_line_up() {
        let mut world = WorldState::new(tiny(Study::Regularity, 30), 1).unwrap();
        let log = world.run_epoch(true).unwrap();
        assert_eq!(log.events.len(), 30 * 5);
        let sells: u32 = log.agents.iter().map(|a| a.sells()).sum();
        assert_eq!(log.market_steps, sells as usize);
        assert_eq!(log.sales.len(), sells as usize);
        // Every agent trained on exactly steps_per_epoch transitions.
        for rec in log.training.iter().filter(|r| r.model_id.starts_with("agent-")) {
            assert_eq!(rec.stats.steps, 5);
        }
        assert!(world.agents.iter().all(|a| a.buffer.is_empty()));
        assert_eq!(world.epoch, 1);
    }

    #[test]
    fn replacement_preserves_group_sizes() {
        let mut cfg = tiny(Study::Regularity, 60);
        cfg.replacement.waves = 5;
        let mut world = WorldState::new(cfg, 2).unwrap();
        world.config.study = Study::Generational;
        let sizes: Vec<usize> = GroupLabel::ALL.iter().map(|g| world.group_size(*g)).collect();
        assert!(world.apply_replacement(2).is_err());
        for wave in 1..=5 {
            let before: Vec<u32> = world.agents.iter().map(|a| a.id).collect();
            world.apply_replacement(wave).unwrap();
            let after: Vec<usize> = GroupLabel::ALL.iter().map(|g| world.group_size(*g)).collect();
            assert_eq!(after, sizes);
            let new: Vec<&AgentSlot> = world.agents.iter().filter(|a| a.wave_introduced == wave).collect();
            assert_eq!(new.len(), 12); // 4 per group
            let choppers = new.iter().filter(|a| a.state.skill == Specialization::Chopper).count();
            assert_eq!(choppers, 6);
            assert!(new.iter().all(|a| !before.contains(&a.id)));
        }
        assert!(world.agents.iter().all(|a| a.wave_introduced > 0));
        assert!(world.apply_replacement(6).is_err());
    }

    #[test]
    fn market_replacement_bumps_generation() {
        let mut world = WorldState::new(tiny(Study::Regularity, 30), 3).unwrap();
        let old = world.market.model.clone();
        world.replace_market();
        assert_eq!(world.market.generation, 1);
        assert_ne!(world.market.model, old);
    }

    #[test]
    fn generational_needs_checkpoint() {
        let cfg = StudyConfig {
            study: Study::Generational,
            ..tiny(Study::Generational, 60)
        };
        let err = run_study(&cfg, 1, None, &mut silent).unwrap_err();
        assert!(err.to_string().contains("regularity run"), "{err}");
    }

    #[test]
    fn generational_protocol_and_resume() {
        let mut cfg = tiny(Study::Regularity, 60);
        cfg.epochs = 1;
        cfg.steps_per_epoch = 3;
        cfg.replacement = ReplacementSchedule {
            waves: 5,
            inter_wave_epochs: 1,
            post_market_epochs: 2,
            replace_market: true,
        };
        let base = run_study(&cfg, 9, None, &mut silent).unwrap();
        assert!(base.is_complete());
        let gen_cfg = StudyConfig {
            study: Study::Generational,
            ..cfg.clone()
        };
        let full = run_study(&gen_cfg, 9, Some(base.clone()), &mut silent).unwrap();
        assert_eq!(full.world.epoch, 1 + 5 + 2);
        assert_eq!(full.world.wave, 5);
        assert_eq!(full.world.market.generation, 1);
        assert_eq!(full.artifact.boundary(Timepoint::Initial), Some(1));
        assert_eq!(full.artifact.boundary(Timepoint::Wave2), Some(3));
        assert_eq!(full.artifact.boundary(Timepoint::Wave5), Some(8));
        let phases: Vec<Phase> = full.artifact.epochs.iter().map(|e| e.phase).collect();
        assert_eq!(phases[3], Phase::Wave(3));
        assert_eq!(phases[7], Phase::PostMarket);

        // Stop after four epochs, round-trip through a checkpoint, finish.
        let mut partial = base.into_generational(&gen_cfg.replacement).unwrap();
        let mut stop = |w: &WorldState, _: &EpochLog, _: &RunArtifact| {
            if w.epoch == 4 {
                Err(Error::training("stop"))
            } else {
                Ok(())
            }
        };
        assert!(partial.run(&mut stop).is_err());
        let mut resumed = Session::restore(&partial.checkpoint().unwrap()).unwrap();
        assert!(!resumed.is_complete());
        resumed.run(&mut silent).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn generational_rejects_indivisible_groups() {
        let cfg = StudyConfig {
            replacement: ReplacementSchedule {
                waves: 3,
                ..ReplacementSchedule::default()
            },
            ..tiny(Study::Generational, 60)
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("divisible"));
    }
}
