//! Browser bindings: train a small world epoch by epoch, probe its market,
//! and sample the skill table.
//!
//! Each binding is a thin wrapper over a plain Rust function returning a
//! serializable summary, so the logic is testable on the host.

use coordsim::env::{AgentState, EnvConfig, Resource, Specialization, Task};
use coordsim::experiments::{silent, Phase, RoleClass, Session, Study, StudyConfig};
use coordsim::metrics::{pooled_probe_stereotypic, population_prediction_ratio, tally_where};
use coordsim::population::{GroupLabel, IdentityCode};
use coordsim::rng::derive_stream;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Serialize)]
pub struct GroupSummary {
    pub group: String,
    pub majority_sale: Option<f64>,
    pub minority_sale: Option<f64>,
    pub probe_stereotypic: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochSummary {
    pub epoch: u32,
    pub prediction_ratio: Option<f64>,
    pub probe_stereotypic: Option<f64>,
    pub mean_reward: f64,
    pub groups: Vec<GroupSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeSummary {
    pub group: String,
    pub probes: u32,
    pub predicted_wood: u32,
    pub stereotypic: Option<f64>,
    pub expected_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SkillSample {
    pub task: String,
    pub attempts: u32,
    pub successes: u32,
    pub configured: f64,
}

fn parse_study(name: &str) -> Result<Study, String> {
    match name {
        "individuation" => Ok(Study::Individuation),
        "regularity" => Ok(Study::Regularity),
        other => Err(format!("unknown study '{other}' (individuation or regularity)")),
    }
}

/// A world trained in the page, one epoch per call.
pub struct World {
    session: Session,
}

impl World {
    pub fn create(study: &str, size: usize, steps_per_epoch: u32, seed: u64) -> Result<World, String> {
        let config = StudyConfig {
            study: parse_study(study)?,
            size,
            steps_per_epoch,
            epochs: u32::MAX,
            ..StudyConfig::default()
        };
        let session = Session::fresh(&config, seed).map_err(|e| e.to_string())?;
        Ok(World { session })
    }

    pub fn epoch(&self) -> u32 {
        self.session.world.epoch
    }

    pub fn advance(&mut self) -> Result<EpochSummary, String> {
        self.session
            .run_epochs(1, Phase::Train, &mut silent)
            .map_err(|e| e.to_string())?;
        let a = &self.session.artifact;
        let rec = a.epochs.last().unwrap();
        let window = std::slice::from_ref(rec);
        let all = tally_where(window, &a.roster, |_, _| true);
        let groups = match self.session.world.config.study {
            Study::Individuation => Vec::new(),
            _ => [GroupLabel::Purple, GroupLabel::Yellow]
                .into_iter()
                .map(|g| {
                    let sale = |role| {
                        tally_where(window, &a.roster, |r, c| r.group == Some(g) && c == role)
                            .sale
                            .ratio()
                    };
                    GroupSummary {
                        group: g.color().into(),
                        majority_sale: sale(RoleClass::Majority),
                        minority_sale: sale(RoleClass::Minority),
                        probe_stereotypic: rec
                            .probes
                            .iter()
                            .find(|p| p.group == Some(g))
                            .and_then(|p| p.stereotypic),
                    }
                })
                .collect(),
        };
        Ok(EpochSummary {
            epoch: rec.epoch + 1,
            prediction_ratio: population_prediction_ratio(rec, &a.roster),
            probe_stereotypic: pooled_probe_stereotypic(&rec.probes),
            mean_reward: all.mean_reward().unwrap_or(0.0),
            groups,
        })
    }

    pub fn probe(&self) -> Result<Vec<ProbeSummary>, String> {
        let results = self.session.world.probe().map_err(|e| e.to_string())?;
        Ok(results
            .into_iter()
            .map(|r| ProbeSummary {
                group: r.group.map_or("none", |g| g.color()).into(),
                probes: r.probes,
                predicted_wood: r.predicted_wood,
                stereotypic: r.stereotypic,
                expected_accuracy: r.expected_accuracy,
            })
            .collect())
    }
}

/// Empirical success rates of `attempts` tries at each task.
pub fn sample_skills(specialization: &str, attempts: u32, seed: u64) -> Result<Vec<SkillSample>, String> {
    let skill = Specialization::from_name(specialization)
        .ok_or_else(|| format!("unknown specialization '{specialization}'"))?;
    let mut rng = derive_stream(seed, "demo-skills");
    let config = EnvConfig::default();
    let mut agent = AgentState::new(IdentityCode::new(0), skill);
    let mut out = Vec::new();
    for (task, name) in [(Task::Chop, "chop"), (Task::Mine, "mine"), (Task::Build, "build")] {
        let mut successes = 0;
        for _ in 0..attempts {
            agent.reset();
            let ok = match task {
                Task::Chop => agent.attempt_extract(Resource::Wood, &mut rng),
                Task::Mine => agent.attempt_extract(Resource::Stone, &mut rng),
                Task::Build => {
                    agent.wood = 1;
                    agent.stone = 1;
                    agent.attempt_build(&config, &mut rng)
                }
            };
            successes += u32::from(ok);
        }
        out.push(SkillSample {
            task: name.into(),
            attempts,
            successes,
            configured: skill.success(task),
        });
    }
    Ok(out)
}

fn to_js<T: Serialize>(value: Result<T, String>) -> Result<String, JsError> {
    value
        .and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub struct DemoWorld {
    inner: World,
}

#[wasm_bindgen]
impl DemoWorld {
    #[wasm_bindgen(constructor)]
    pub fn new(study: &str, size: usize, steps_per_epoch: u32, seed: u32) -> Result<DemoWorld, JsError> {
        World::create(study, size, steps_per_epoch, u64::from(seed))
            .map(|inner| DemoWorld { inner })
            .map_err(|e| JsError::new(&e))
    }

    pub fn epoch(&self) -> u32 {
        self.inner.epoch()
    }

    /// Trains one epoch and returns its summary as JSON.
    pub fn step(&mut self) -> Result<String, JsError> {
        to_js(self.inner.advance())
    }

    /// Held-out probe results as JSON.
    pub fn probe(&self) -> Result<String, JsError> {
        to_js(self.inner.probe())
    }
}

#[wasm_bindgen(js_name = sampleSkills)]
pub fn sample_skills_js(specialization: &str, attempts: u32, seed: u32) -> Result<String, JsError> {
    to_js(sample_skills(specialization, attempts, u64::from(seed)))
}
