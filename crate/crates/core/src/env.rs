//! The produce-and-trade environment.
//!
//! Producer agents observe their own inventory and pick one of seven actions
//! per step. Extraction and building succeed with a probability set by the
//! agent's specialization; buying always succeeds; selling requires the market
//! decider to predict the offered resource.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::population::IdentityCode;

/// Reward and transfer constants of the economy.
///
/// The browser game reads the same values from `fixtures/economy.json`; the
/// `economy_fixture_matches_constants` test keeps the two in sync.
pub mod economy {
    pub const BUILD_REWARD: f64 = 15.0;
    pub const SALE_REWARD: f64 = 1.0;
    pub const BUY_COST: f64 = 2.0;
    pub const SALE_UNITS: u32 = 2;
    pub const MARKET_MATCH_REWARD: f64 = 1.0;
    pub const MARKET_MISS_REWARD: f64 = -1.0;
    pub const MARKET_INSUFFICIENT_REWARD: f64 = -0.3;
}

pub const OBSERVATION_SIZE: usize = 6;
pub const ACTION_COUNT: usize = 7;
pub const PREDICTION_COUNT: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Resource {
    Wood,
    Stone,
}

impl Resource {
    pub fn other(self) -> Resource {
        match self {
            Resource::Wood => Resource::Stone,
            Resource::Stone => Resource::Wood,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Resource::Wood => "wood",
            Resource::Stone => "stone",
        }
    }
}

/// Tasks whose success is gated by skill.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Chop,
    Mine,
    Build,
}

impl Task {
    pub fn extracting(resource: Resource) -> Task {
        match resource {
            Resource::Wood => Task::Chop,
            Resource::Stone => Task::Mine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Specialization {
    Chopper,
    Miner,
    Builder,
}

impl Specialization {
    pub const ALL: [Specialization; 3] = [
        Specialization::Chopper,
        Specialization::Miner,
        Specialization::Builder,
    ];

    /// Success probability of `task` for this specialization.
    pub fn success(self, task: Task) -> f64 {
        use Specialization::*;
        use Task::*;
        match (self, task) {
            (Chopper, Chop) => 0.75,
            (Chopper, Mine) => 0.25,
            (Chopper, Build) => 0.05,
            (Miner, Chop) => 0.25,
            (Miner, Mine) => 0.75,
            (Miner, Build) => 0.05,
            (Builder, Chop) => 0.1,
            (Builder, Mine) => 0.1,
            (Builder, Build) => 0.95,
        }
    }

    /// The resource this specialization extracts best, if any.
    pub fn skilled_resource(self) -> Option<Resource> {
        match self {
            Specialization::Chopper => Some(Resource::Wood),
            Specialization::Miner => Some(Resource::Stone),
            Specialization::Builder => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Specialization::Chopper => "chopper",
            Specialization::Miner => "miner",
            Specialization::Builder => "builder",
        }
    }

    pub fn from_name(name: &str) -> Option<Specialization> {
        Specialization::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentAction {
    ChopWood,
    MineStone,
    Build,
    SellWood,
    SellStone,
    BuyWood,
    BuyStone,
}

impl AgentAction {
    /// Network output order.
    pub const ALL: [AgentAction; ACTION_COUNT] = [
        AgentAction::ChopWood,
        AgentAction::MineStone,
        AgentAction::Build,
        AgentAction::SellWood,
        AgentAction::SellStone,
        AgentAction::BuyWood,
        AgentAction::BuyStone,
    ];

    pub fn from_index(index: usize) -> Option<AgentAction> {
        Self::ALL.get(index).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_social(self) -> bool {
        matches!(
            self,
            AgentAction::SellWood
                | AgentAction::SellStone
                | AgentAction::BuyWood
                | AgentAction::BuyStone
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentAction::ChopWood => "chop_wood",
            AgentAction::MineStone => "mine_stone",
            AgentAction::Build => "build",
            AgentAction::SellWood => "sell_wood",
            AgentAction::SellStone => "sell_stone",
            AgentAction::BuyWood => "buy_wood",
            AgentAction::BuyStone => "buy_stone",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MarketPrediction {
    PredictWood,
    PredictStone,
}

impl MarketPrediction {
    pub const ALL: [MarketPrediction; PREDICTION_COUNT] =
        [MarketPrediction::PredictWood, MarketPrediction::PredictStone];

    pub fn from_index(index: usize) -> Option<MarketPrediction> {
        Self::ALL.get(index).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn resource(self) -> Resource {
        match self {
            MarketPrediction::PredictWood => Resource::Wood,
            MarketPrediction::PredictStone => Resource::Stone,
        }
    }

    pub fn of(resource: Resource) -> MarketPrediction {
        match resource {
            Resource::Wood => MarketPrediction::PredictWood,
            Resource::Stone => MarketPrediction::PredictStone,
        }
    }
}

/// Tunable environment rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// An observation flag is set when the matching count exceeds this value.
    pub flag_threshold: f64,
    /// Whether a failed build roll still uses up one wood and one stone.
    pub failed_build_consumes: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            flag_threshold: 1.0,
            failed_build_consumes: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub identity: IdentityCode,
    pub skill: Specialization,
    pub wood: u32,
    pub stone: u32,
    pub coins: f64,
}

pub type Observation = [f64; OBSERVATION_SIZE];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransactionOutcome {
    pub agent_reward: f64,
    pub market_reward: f64,
    pub wood_delta: i32,
    pub stone_delta: i32,
    pub coordinated: bool,
    pub insufficient: bool,
}

/// What a single agent action did to the world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub success: bool,
    pub agent_reward: f64,
    pub wood_delta: i32,
    pub stone_delta: i32,
    /// Present only for sell actions.
    pub sale: Option<SaleEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaleEvent {
    pub offered: Resource,
    pub prediction: MarketPrediction,
    pub transaction: TransactionOutcome,
}

/// One row of the per-action event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub epoch: u32,
    pub step: u32,
    pub agent_id: u32,
    pub action: AgentAction,
    pub success: bool,
    pub agent_reward: f64,
    pub market_reward: f64,
    pub wood_delta: i32,
    pub stone_delta: i32,
}

impl AgentState {
    pub fn new(identity: IdentityCode, skill: Specialization) -> Self {
        AgentState {
            identity,
            skill,
            wood: 0,
            stone: 0,
            coins: 0.0,
        }
    }

    pub fn holding(&self, resource: Resource) -> u32 {
        match resource {
            Resource::Wood => self.wood,
            Resource::Stone => self.stone,
        }
    }

    fn holding_mut(&mut self, resource: Resource) -> &mut u32 {
        match resource {
            Resource::Wood => &mut self.wood,
            Resource::Stone => &mut self.stone,
        }
    }

    /// Clears inventory and coins.
    pub fn reset(&mut self) {
        self.wood = 0;
        self.stone = 0;
        self.coins = 0.0;
    }

    /// `(wood, stone, coins, wood-flag, stone-flag, coin-flag)`.
    pub fn observe(&self, config: &EnvConfig) -> Observation {
        let flag = |v: f64| if v > config.flag_threshold { 1.0 } else { 0.0 };
        let wood = f64::from(self.wood);
        let stone = f64::from(self.stone);
        [wood, stone, self.coins, flag(wood), flag(stone), flag(self.coins)]
    }

    /// Chop or mine once. Returns whether a unit was gained.
    pub fn attempt_extract<R: Rng + ?Sized>(&mut self, resource: Resource, rng: &mut R) -> bool {
        let p = self.skill.success(Task::extracting(resource));
        let success = rng.gen_bool(p);
        if success {
            *self.holding_mut(resource) += 1;
        }
        success
    }

    /// Build a house from one wood and one stone.
    ///
    /// Without both ingredients the attempt fails without a roll.
    pub fn attempt_build<R: Rng + ?Sized>(&mut self, config: &EnvConfig, rng: &mut R) -> bool {
        if self.wood == 0 || self.stone == 0 {
            return false;
        }
        let success = rng.gen_bool(self.skill.success(Task::Build));
        if success || config.failed_build_consumes {
            self.wood -= 1;
            self.stone -= 1;
        }
        if success {
            self.coins += economy::BUILD_REWARD;
        }
        success
    }

    /// Buy one unit. Coins may go negative.
    pub fn attempt_buy(&mut self, resource: Resource) {
        self.coins -= economy::BUY_COST;
        *self.holding_mut(resource) += 1;
    }

    /// Settles a sale offer against the market's prediction.
    pub fn resolve_sale(
        &mut self,
        offered: Resource,
        prediction: MarketPrediction,
    ) -> TransactionOutcome {
        let mut outcome = TransactionOutcome {
            agent_reward: 0.0,
            market_reward: economy::MARKET_MISS_REWARD,
            wood_delta: 0,
            stone_delta: 0,
            coordinated: false,
            insufficient: false,
        };
        if prediction.resource() != offered {
            return outcome;
        }
        if self.holding(offered) < economy::SALE_UNITS {
            outcome.market_reward = economy::MARKET_INSUFFICIENT_REWARD;
            outcome.insufficient = true;
            return outcome;
        }
        *self.holding_mut(offered) -= economy::SALE_UNITS;
        self.coins += economy::SALE_REWARD;
        let units = -(economy::SALE_UNITS as i32);
        match offered {
            Resource::Wood => outcome.wood_delta = units,
            Resource::Stone => outcome.stone_delta = units,
        }
        outcome.agent_reward = economy::SALE_REWARD;
        outcome.market_reward = economy::MARKET_MATCH_REWARD;
        outcome.coordinated = true;
        outcome
    }

    /// Applies `action`, asking `predict` for the market's guess when selling.
    pub fn apply_action<R, F>(
        &mut self,
        action: AgentAction,
        config: &EnvConfig,
        rng: &mut R,
        predict: F,
    ) -> Result<StepOutcome>
    where
        R: Rng + ?Sized,
        F: FnOnce(&AgentState, Resource) -> Result<MarketPrediction>,
    {
        let (wood0, stone0, coins0) = (self.wood, self.stone, self.coins);
        let mut sale = None;
        let success = match action {
            AgentAction::ChopWood => self.attempt_extract(Resource::Wood, rng),
            AgentAction::MineStone => self.attempt_extract(Resource::Stone, rng),
            AgentAction::Build => self.attempt_build(config, rng),
            AgentAction::BuyWood => {
                self.attempt_buy(Resource::Wood);
                true
            }
            AgentAction::BuyStone => {
                self.attempt_buy(Resource::Stone);
                true
            }
            AgentAction::SellWood | AgentAction::SellStone => {
                let offered = if action == AgentAction::SellWood {
                    Resource::Wood
                } else {
                    Resource::Stone
                };
                let prediction = predict(self, offered)?;
                let transaction = self.resolve_sale(offered, prediction);
                sale = Some(SaleEvent {
                    offered,
                    prediction,
                    transaction,
                });
                transaction.coordinated
            }
        };
        Ok(StepOutcome {
            success,
            agent_reward: self.coins - coins0,
            wood_delta: self.wood as i32 - wood0 as i32,
            stone_delta: self.stone as i32 - stone0 as i32,
            sale,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;

    fn agent(skill: Specialization, wood: u32, stone: u32, coins: f64) -> AgentState {
        AgentState {
            identity: IdentityCode::new(0b100_0000000000001),
            skill,
            wood,
            stone,
            coins,
        }
    }

    #[test]
    fn skill_table_is_exact() {
        use Specialization::*;
        assert_eq!(Chopper.success(Task::Chop), 0.75);
        assert_eq!(Chopper.success(Task::Mine), 0.25);
        assert_eq!(Chopper.success(Task::Build), 0.05);
        assert_eq!(Miner.success(Task::Mine), 0.75);
        assert_eq!(Miner.success(Task::Chop), 0.25);
        assert_eq!(Miner.success(Task::Build), 0.05);
        assert_eq!(Builder.success(Task::Build), 0.95);
        assert_eq!(Builder.success(Task::Chop), 0.1);
        assert_eq!(Builder.success(Task::Mine), 0.1);
    }

    #[test]
    fn action_space_shape() {
        assert_eq!(AgentAction::ALL.len(), 7);
        assert_eq!(AgentAction::ALL.iter().filter(|a| a.is_social()).count(), 4);
        for (i, a) in AgentAction::ALL.iter().enumerate() {
            assert_eq!(a.index(), i);
        }
        assert_eq!(MarketPrediction::ALL.len(), 2);
    }

    #[test]
    fn observation_flags_use_threshold() {
        let cfg = EnvConfig::default();
        assert_eq!(agent(Specialization::Chopper, 0, 0, 0.0).observe(&cfg), [0.0; 6]);
        assert_eq!(
            agent(Specialization::Chopper, 3, 0, 2.0).observe(&cfg),
            [3.0, 0.0, 2.0, 1.0, 0.0, 1.0]
        );
        assert_eq!(
            agent(Specialization::Chopper, 1, 1, 1.0).observe(&cfg),
            [1.0, 1.0, 1.0, 0.0, 0.0, 0.0]
        );
        let above_zero = EnvConfig {
            flag_threshold: 0.0,
            ..EnvConfig::default()
        };
        assert_eq!(
            agent(Specialization::Chopper, 1, 1, 1.0).observe(&above_zero),
            [1.0, 1.0, 1.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn extraction_frequencies_match_skill() {
        let mut rng = derive_stream(11, "extract-test");
        let trials = 10_000;
        let mut chopper = agent(Specialization::Chopper, 0, 0, 0.0);
        let hits = (0..trials)
            .filter(|_| chopper.attempt_extract(Resource::Wood, &mut rng))
            .count();
        let rate = hits as f64 / trials as f64;
        assert!((rate - 0.75).abs() <= 0.02, "rate {rate}");
        assert_eq!(chopper.wood as usize, hits);
        assert_eq!(chopper.coins, 0.0);

        let mut builder = agent(Specialization::Builder, 0, 0, 0.0);
        let hits = (0..trials)
            .filter(|_| builder.attempt_extract(Resource::Stone, &mut rng))
            .count();
        let rate = hits as f64 / trials as f64;
        assert!((rate - 0.1).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn build_needs_both_ingredients() {
        let cfg = EnvConfig::default();
        let mut rng = derive_stream(3, "build-test");
        let mut a = agent(Specialization::Builder, 0, 5, 0.0);
        for _ in 0..100 {
            assert!(!a.attempt_build(&cfg, &mut rng));
        }
        assert_eq!((a.wood, a.stone, a.coins), (0, 5, 0.0));
    }

    #[test]
    fn successful_build_pays_fifteen() {
        let cfg = EnvConfig::default();
        let mut rng = derive_stream(3, "build-test");
        // Builders succeed 95% of the time; retry until one lands.
        loop {
            let mut a = agent(Specialization::Builder, 1, 1, 0.0);
            if a.attempt_build(&cfg, &mut rng) {
                assert_eq!((a.wood, a.stone, a.coins), (0, 0, 15.0));
                break;
            }
            assert_eq!((a.wood, a.stone, a.coins), (1, 1, 0.0));
        }
    }

    #[test]
    fn chopper_build_rate() {
        let cfg = EnvConfig::default();
        let mut rng = derive_stream(5, "build-rate");
        let trials = 10_000;
        let mut hits = 0;
        for _ in 0..trials {
            let mut a = agent(Specialization::Chopper, 1, 1, 0.0);
            if a.attempt_build(&cfg, &mut rng) {
                hits += 1;
            }
        }
        let rate = hits as f64 / trials as f64;
        assert!((rate - 0.05).abs() <= 0.01, "rate {rate}");
    }

    #[test]
    fn failed_build_consumption_is_configurable() {
        let cfg = EnvConfig {
            failed_build_consumes: true,
            ..EnvConfig::default()
        };
        let mut rng = derive_stream(9, "build-consume");
        let mut a = agent(Specialization::Chopper, 50, 50, 0.0);
        let mut successes = 0;
        for _ in 0..50 {
            if a.attempt_build(&cfg, &mut rng) {
                successes += 1;
            }
        }
        assert_eq!((a.wood, a.stone), (0, 0));
        assert_eq!(a.coins, 15.0 * successes as f64);
    }

    #[test]
    fn buying_can_go_negative() {
        let mut a = agent(Specialization::Chopper, 0, 0, 10.0);
        a.attempt_buy(Resource::Wood);
        assert_eq!((a.wood, a.coins), (1, 8.0));

        let mut b = agent(Specialization::Miner, 0, 0, 0.0);
        b.attempt_buy(Resource::Stone);
        assert_eq!((b.stone, b.coins), (1, -2.0));

        let mut c = agent(Specialization::Miner, 0, 0, 4.0);
        c.attempt_buy(Resource::Wood);
        c.attempt_buy(Resource::Wood);
        assert_eq!((c.wood, c.coins), (2, 0.0));
    }

    #[test]
    fn sale_resolution_cases() {
        let mut a = agent(Specialization::Chopper, 5, 0, 0.0);
        let out = a.resolve_sale(Resource::Wood, MarketPrediction::PredictWood);
        assert_eq!((a.wood, a.coins), (3, 1.0));
        assert_eq!((out.agent_reward, out.market_reward), (1.0, 1.0));
        assert_eq!((out.wood_delta, out.stone_delta), (-2, 0));
        assert!(out.coordinated && !out.insufficient);

        let mut b = agent(Specialization::Chopper, 5, 0, 0.0);
        let out = b.resolve_sale(Resource::Wood, MarketPrediction::PredictStone);
        assert_eq!((b.wood, b.coins), (5, 0.0));
        assert_eq!((out.agent_reward, out.market_reward), (0.0, -1.0));
        assert!(!out.coordinated && !out.insufficient);

        let mut c = agent(Specialization::Chopper, 1, 0, 0.0);
        let out = c.resolve_sale(Resource::Wood, MarketPrediction::PredictWood);
        assert_eq!((c.wood, c.coins), (1, 0.0));
        assert_eq!((out.agent_reward, out.market_reward), (0.0, -0.3));
        assert!(!out.coordinated && out.insufficient);
    }

    #[test]
    fn apply_action_reports_deltas() {
        let cfg = EnvConfig::default();
        let mut rng = derive_stream(1, "apply");
        let mut a = agent(Specialization::Miner, 0, 3, 0.0);
        let out = a
            .apply_action(AgentAction::SellStone, &cfg, &mut rng, |_, offered| {
                Ok(MarketPrediction::of(offered))
            })
            .unwrap();
        assert!(out.success);
        assert_eq!((out.agent_reward, out.stone_delta, out.wood_delta), (1.0, -2, 0));
        assert_eq!(out.sale.unwrap().transaction.market_reward, 1.0);

        let out = a
            .apply_action(AgentAction::BuyWood, &cfg, &mut rng, |_, _| unreachable!())
            .unwrap();
        assert_eq!((out.agent_reward, out.wood_delta), (-2.0, 1));
        assert!(out.sale.is_none());
    }
}
