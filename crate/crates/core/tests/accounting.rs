//! Replays recorded event logs through an independent bookkeeping oracle.

use std::collections::HashMap;

use coordsim::env::AgentAction;
use coordsim::experiments::{Study, StudyConfig, WorldState};

const BUILD: f64 = 15.0;
const SALE: f64 = 1.0;
const BUY: f64 = 2.0;

#[derive(Default, Clone, Copy)]
struct Ledger {
    wood: i64,
    stone: i64,
    coins: f64,
}

/// The reward and inventory change an action must produce, given what the
/// log says happened and what the agent held beforehand.
fn expected(action: AgentAction, success: bool, before: Ledger) -> (f64, i32, i32) {
    match (action, success) {
        (AgentAction::ChopWood, true) => (0.0, 1, 0),
        (AgentAction::MineStone, true) => (0.0, 0, 1),
        (AgentAction::Build, true) => {
            assert!(before.wood >= 1 && before.stone >= 1, "build succeeded without ingredients");
            (BUILD, -1, -1)
        }
        (AgentAction::BuyWood, _) => (-BUY, 1, 0),
        (AgentAction::BuyStone, _) => (-BUY, 0, 1),
        (AgentAction::SellWood, true) => {
            assert!(before.wood >= 2, "sale succeeded with {} wood", before.wood);
            (SALE, -2, 0)
        }
        (AgentAction::SellStone, true) => {
            assert!(before.stone >= 2, "sale succeeded with {} stone", before.stone);
            (SALE, 0, -2)
        }
        (_, false) => (0.0, 0, 0),
    }
}

fn replay(study: Study, size: usize, seed: u64, epochs: u32) {
    let cfg = StudyConfig {
        study,
        size,
        steps_per_epoch: 60,
        probes_per_group: 2,
        ..StudyConfig::default()
    };
    let mut world = WorldState::new(cfg, seed).unwrap();
    for _ in 0..epochs {
        let log = world.run_epoch(true).unwrap();
        assert_eq!(log.events.len(), 60 * world.agents.len());
        let mut books: HashMap<u32, Ledger> = HashMap::new();
        let mut market = 0.0;
        let mut sells = 0;
        for e in &log.events {
            let before = books.get(&e.agent_id).copied().unwrap_or_default();
            let (reward, dw, ds) = expected(e.action, e.success, before);
            assert_eq!((e.agent_reward, e.wood_delta, e.stone_delta), (reward, dw, ds), "{e:?}");
            if matches!(e.action, AgentAction::SellWood | AgentAction::SellStone) {
                sells += 1;
                let held = match e.action {
                    AgentAction::SellWood => before.wood,
                    _ => before.stone,
                };
                // Market: +1 on a completed sale, -0.3 when it matched a seller
                // short of stock, -1 on a mismatch.
                let want = if e.success {
                    1.0
                } else if e.market_reward != -1.0 {
                    assert!(held < 2);
                    -0.3
                } else {
                    -1.0
                };
                assert_eq!(e.market_reward, want, "{e:?}");
                market += e.market_reward;
            } else {
                assert_eq!(e.market_reward, 0.0);
            }
            let b = books.entry(e.agent_id).or_default();
            b.wood += i64::from(dw);
            b.stone += i64::from(ds);
            b.coins += reward;
            assert!(b.wood >= 0 && b.stone >= 0);
        }
        assert_eq!(log.sales.len(), sells);
        assert!((market - log.market_reward).abs() < 1e-9);
        for (a, s) in world.agents.iter().zip(&log.agents) {
            let b = books[&a.id];
            assert_eq!((b.wood, b.stone), (i64::from(a.state.wood), i64::from(a.state.stone)));
            assert!((b.coins - a.state.coins).abs() < 1e-9);
            assert_eq!(s.coins, a.state.coins);
            let sells = log.events.iter().filter(|e| e.agent_id == a.id && matches!(e.action, AgentAction::SellWood | AgentAction::SellStone)).count() as u32;
            assert_eq!(s.sells(), sells);
            assert_eq!(s.predicted_wood + s.predicted_stone, sells);
        }
    }
}

#[test]
fn individuation_log_replays_exactly() {
    replay(Study::Individuation, 30, 11, 3);
}

#[test]
fn regularity_log_replays_exactly() {
    replay(Study::Regularity, 30, 12, 3);
}
