//! The browser game reads `fixtures/economy.json`; it must agree with the
//! simulator's constants exactly.

use coordsim::env::{economy, Specialization, Task};
use serde_json::Value;

fn fixture() -> Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/economy.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn economy_fixture_matches_constants() {
    let f = fixture();
    let num = |k: &str| f[k].as_f64().unwrap_or_else(|| panic!("missing {k}"));
    assert_eq!(num("build_reward"), economy::BUILD_REWARD);
    assert_eq!(num("sale_reward"), economy::SALE_REWARD);
    assert_eq!(num("buy_cost"), economy::BUY_COST);
    assert_eq!(num("sale_units"), f64::from(economy::SALE_UNITS));
    assert_eq!(num("market_match_reward"), economy::MARKET_MATCH_REWARD);
    assert_eq!(num("market_miss_reward"), economy::MARKET_MISS_REWARD);
    assert_eq!(num("market_insufficient_reward"), economy::MARKET_INSUFFICIENT_REWARD);
    assert_eq!((num("build_wood"), num("build_stone"), num("buy_units")), (1.0, 1.0, 1.0));
    for s in Specialization::ALL {
        let row = &f["success"][s.name()];
        for (task, key) in [(Task::Chop, "chop"), (Task::Mine, "mine"), (Task::Build, "build")] {
            assert_eq!(row[key].as_f64().unwrap(), s.success(task), "{} {key}", s.name());
        }
    }
}
