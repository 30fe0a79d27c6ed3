//! Outcome measures, held-out probes, trajectory exports and tidy tables.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::env::{Resource, Specialization};
use crate::error::{Error, Result};
use crate::experiments::{AgentEpochStats, EpochRecord, RoleClass, RosterEntry, RunArtifact, Timepoint};
use crate::population::{GroupLabel, IdentityCode};
use crate::ppo::PolicyModel;
use crate::rng::{derive_stream, Stream};

pub const EXPORT_SCHEMA_VERSION: u32 = 1;
pub const AGENT_GAME_EPOCHS: usize = 200;

/// Numerator / denominator pair; the ratio is undefined when nothing was counted.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Tally {
    pub hits: u64,
    pub total: u64,
}

impl Tally {
    pub fn add(&mut self, hits: u32, total: u32) {
        self.hits += u64::from(hits);
        self.total += u64::from(total);
    }

    pub fn ratio(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hits as f64 / self.total as f64)
    }
}

/// The resource a group is expected to bring, if it has one.
pub fn stereotype(group: Option<GroupLabel>) -> Option<Resource> {
    group.and_then(|g| g.majority().skilled_resource())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeTarget {
    pub code: IdentityCode,
    pub group: Option<GroupLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub group: Option<GroupLabel>,
    pub probes: u32,
    pub predicted_wood: u32,
    /// Share of probes predicted to bring the group's stereotypic resource.
    pub stereotypic: Option<f64>,
    /// Expected accuracy against the group's true chopper/miner mix.
    pub expected_accuracy: f64,
    /// The chopper share among extraction specialists used as ground truth.
    pub truth_wood: f64,
}

/// Evaluates the market on never-seen codes.
///
/// Each probe is assigned its argmax prediction (or a sampled one when `sampler`
/// is given). The model is only read.
pub fn probe_market<F>(
    market: &PolicyModel,
    probes: &[ProbeTarget],
    truth_wood: F,
    mut sampler: Option<&mut Stream>,
) -> Result<Vec<ProbeResult>>
where
    F: Fn(Option<GroupLabel>) -> f64,
{
    let mut by_group: BTreeMap<Option<GroupLabel>, (u32, u32)> = BTreeMap::new();
    for p in probes {
        let dist = market.distribution(&p.code.as_input())?;
        let index = match sampler.as_deref_mut() {
            Some(rng) => dist.sample(rng)?.0,
            None => dist.argmax(),
        };
        let e = by_group.entry(p.group).or_default();
        e.0 += 1;
        e.1 += u32::from(index == 0);
    }
    Ok(by_group
        .into_iter()
        .map(|(group, (n, wood))| {
            let mix = truth_wood(group);
            let wood_share = f64::from(wood) / f64::from(n);
            let stereotypic = stereotype(group).map(|r| match r {
                Resource::Wood => wood_share,
                Resource::Stone => 1.0 - wood_share,
            });
            ProbeResult {
                group,
                probes: n,
                predicted_wood: wood,
                stereotypic,
                expected_accuracy: wood_share * mix + (1.0 - wood_share) * (1.0 - mix),
                truth_wood: mix,
            }
        })
        .collect())
}

/// Pooled stereotypic-prediction share over the probes of groups that have a stereotype.
pub fn pooled_probe_stereotypic(probes: &[ProbeResult]) -> Option<f64> {
    let mut t = 0.0;
    let mut n = 0u32;
    for p in probes {
        if let Some(s) = p.stereotypic {
            t += s * f64::from(p.probes);
            n += p.probes;
        }
    }
    (n > 0).then(|| t / f64::from(n))
}

/// Outcome measures for one (epoch, group, role-class) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub group: Option<GroupLabel>,
    pub role: RoleClass,
    pub agents: u32,
    pub skilled_extraction: Option<f64>,
    pub skilled_sale: Option<f64>,
    pub skill_consistent_prediction: Option<f64>,
    pub stereotypic_sale: Option<f64>,
    pub mean_reward: f64,
}

/// Per-group quantities for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSignal {
    pub epoch: u32,
    pub group: Option<GroupLabel>,
    /// Offers of each resource the market observed from this group.
    pub offered_wood: u32,
    pub offered_stone: u32,
    pub probe: Option<ProbeResult>,
}

/// Tallies accumulated over a set of agent-epochs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CellTally {
    pub agents: u32,
    pub extraction: Tally,
    pub sale: Tally,
    pub prediction: Tally,
    pub stereotypic_sale: Tally,
    pub stereotypic_prediction: Tally,
    pub reward: f64,
}

impl CellTally {
    pub fn add(&mut self, stats: &AgentEpochStats, skill: Specialization, group: Option<GroupLabel>) {
        self.agents += 1;
        self.reward += stats.coins;
        if let Some(r) = skill.skilled_resource() {
            self.extraction
                .add(stats.extracted(r), stats.chop_attempts + stats.mine_attempts);
            self.sale.add(stats.sold(r), stats.sells());
            self.prediction
                .add(stats.predicted(r), stats.predicted_wood + stats.predicted_stone);
        }
        if let Some(r) = stereotype(group) {
            self.stereotypic_sale.add(stats.sold(r), stats.sells());
            self.stereotypic_prediction
                .add(stats.predicted(r), stats.predicted_wood + stats.predicted_stone);
        }
    }

    pub fn mean_reward(&self) -> Option<f64> {
        (self.agents > 0).then(|| self.reward / f64::from(self.agents))
    }
}

fn roster_index(roster: &[RosterEntry]) -> HashMap<u32, &RosterEntry> {
    roster.iter().map(|r| (r.agent_id, r)).collect()
}

/// Accumulates every agent in `records` for which `keep` holds.
pub fn tally_where<F>(records: &[EpochRecord], roster: &[RosterEntry], mut keep: F) -> CellTally
where
    F: FnMut(&RosterEntry, RoleClass) -> bool,
{
    let index = roster_index(roster);
    let mut cell = CellTally::default();
    for rec in records {
        for a in &rec.agents {
            let r = index[&a.agent_id];
            let role = RoleClass::classify(r.group, r.skill, r.wave_introduced);
            if keep(r, role) {
                cell.add(a, r.skill, r.group);
            }
        }
    }
    cell
}

/// Splits one epoch into (group, role-class) cells.
pub fn compute_epoch_metrics(record: &EpochRecord, roster: &[RosterEntry]) -> Vec<EpochMetrics> {
    let index = roster_index(roster);
    let mut cells: BTreeMap<(Option<GroupLabel>, RoleClass), CellTally> = BTreeMap::new();
    for a in &record.agents {
        let r = index[&a.agent_id];
        let role = RoleClass::classify(r.group, r.skill, r.wave_introduced);
        cells.entry((r.group, role)).or_default().add(a, r.skill, r.group);
    }
    cells
        .into_iter()
        .map(|((group, role), c)| EpochMetrics {
            epoch: record.epoch,
            group,
            role,
            agents: c.agents,
            skilled_extraction: c.extraction.ratio(),
            skilled_sale: c.sale.ratio(),
            skill_consistent_prediction: c.prediction.ratio(),
            stereotypic_sale: c.stereotypic_sale.ratio(),
            mean_reward: c.mean_reward().unwrap_or(0.0),
        })
        .collect()
}

/// The market's raw learning signal and probe results per group.
pub fn group_signals(record: &EpochRecord, roster: &[RosterEntry]) -> Vec<GroupSignal> {
    let index = roster_index(roster);
    let mut tallies: BTreeMap<Option<GroupLabel>, (u32, u32)> = BTreeMap::new();
    for a in &record.agents {
        let e = tallies.entry(index[&a.agent_id].group).or_default();
        e.0 += a.sell_wood;
        e.1 += a.sell_stone;
    }
    tallies
        .into_iter()
        .map(|(group, (w, s))| GroupSignal {
            epoch: record.epoch,
            group,
            offered_wood: w,
            offered_stone: s,
            probe: record.probes.iter().find(|p| p.group == group).cloned(),
        })
        .collect()
}

/// Share of all market predictions in the epoch that matched the seller's skill.
pub fn population_prediction_ratio(record: &EpochRecord, roster: &[RosterEntry]) -> Option<f64> {
    tally_where(std::slice::from_ref(record), roster, |_, _| true)
        .prediction
        .ratio()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketGameAgent {
    pub id12: String,
    pub color: String,
    pub approach_weight: f64,
    pub wood_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketGameExport {
    pub schema_version: u32,
    pub game: String,
    pub timepoint: Timepoint,
    pub agents: Vec<MarketGameAgent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentGameEpoch {
    pub epoch: u32,
    /// The minority agent's skilled resource: `wood` or `stone`.
    pub skill: String,
    pub skill_consistent_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentGameExport {
    pub schema_version: u32,
    pub game: String,
    pub timepoint: Timepoint,
    pub epochs: Vec<AgentGameEpoch>,
}

fn window(artifact: &RunArtifact, timepoint: Timepoint, len: usize) -> Result<&[EpochRecord]> {
    let end = artifact.boundary(timepoint).ok_or_else(|| {
        Error::Export(format!("run has no '{}' timepoint", timepoint.name()))
    })? as usize;
    let first = artifact.epochs.first().map_or(0, |r| r.epoch as usize);
    if end < first + len || end > first + artifact.epochs.len() {
        return Err(Error::Export(format!(
            "timepoint '{}' needs {len} recorded epochs before epoch {end}",
            timepoint.name()
        )));
    }
    Ok(&artifact.epochs[end - first - len..end - first])
}

/// Approach weights and resource mix of every agent present at `timepoint`.
pub fn export_market_game(artifact: &RunArtifact, timepoint: Timepoint) -> Result<MarketGameExport> {
    let records = window(artifact, timepoint, artifact.config.eval_window as usize)?;
    let index = roster_index(&artifact.roster);
    let mut offers: BTreeMap<u32, (u32, u32)> = BTreeMap::new();
    // Agents present at the boundary are the ones in the final epoch.
    for a in &records.last().unwrap().agents {
        offers.insert(a.agent_id, (0, 0));
    }
    for rec in records {
        for a in &rec.agents {
            if let Some(e) = offers.get_mut(&a.agent_id) {
                e.0 += a.sell_wood;
                e.1 += a.sell_stone;
            }
        }
    }
    let total: u32 = offers.values().map(|(w, s)| w + s).sum();
    if total == 0 {
        return Err(Error::Export("no sell attempts in the evaluation window".into()));
    }
    let mut rng = derive_stream(artifact.seed, &format!("nametag/{}", timepoint.name()));
    let tags = sample(&mut rng, 1 << 12, offers.len());
    let mut agents = Vec::with_capacity(offers.len());
    for ((id, (w, s)), tag) in offers.into_iter().zip(tags.iter()) {
        let group = index[&id]
            .group
            .ok_or_else(|| Error::Export("market game needs a group-labelled run".into()))?;
        let n = w + s;
        agents.push(MarketGameAgent {
            id12: format!("{tag:012b}"),
            color: group.color().to_string(),
            approach_weight: f64::from(n) / f64::from(total),
            wood_prob: if n == 0 { 0.5 } else { f64::from(w) / f64::from(n) },
        });
    }
    Ok(MarketGameExport {
        schema_version: EXPORT_SCHEMA_VERSION,
        game: "market".into(),
        timepoint,
        agents,
    })
}

/// Per-epoch skill-consistent prediction rate the market showed minority agents.
///
/// Epochs in which a series had no predictions repeat the previous value
/// (0.5 before the first defined epoch).
pub fn export_agent_game(
    artifact: &RunArtifact,
    timepoint: Timepoint,
    epochs: usize,
) -> Result<AgentGameExport> {
    let records = window(artifact, timepoint, epochs)?;
    let index = roster_index(&artifact.roster);
    let mut out = Vec::with_capacity(2 * epochs);
    let mut last = [0.5, 0.5];
    for (e, rec) in records.iter().enumerate() {
        let mut tallies = [Tally::default(), Tally::default()];
        for a in &rec.agents {
            let r = index[&a.agent_id];
            let role = RoleClass::classify(r.group, r.skill, r.wave_introduced);
            if !role.is_minority() || stereotype(r.group).is_none() {
                continue;
            }
            let Some(skilled) = r.skill.skilled_resource() else {
                continue;
            };
            tallies[skilled as usize].add(a.predicted(skilled), a.predicted_wood + a.predicted_stone);
        }
        for r in [Resource::Wood, Resource::Stone] {
            let k = r as usize;
            if let Some(p) = tallies[k].ratio() {
                last[k] = p;
            }
            out.push(AgentGameEpoch {
                epoch: e as u32 + 1,
                skill: r.name().into(),
                skill_consistent_prob: last[k],
            });
        }
    }
    Ok(AgentGameExport {
        schema_version: EXPORT_SCHEMA_VERSION,
        game: "agent".into(),
        timepoint,
        epochs: out,
    })
}

/// Structural checks a consumer of an export can rely on.
pub fn validate_market_export(e: &MarketGameExport) -> Result<()> {
    if e.schema_version != EXPORT_SCHEMA_VERSION || e.game != "market" {
        return Err(Error::Export("unexpected schema version or game".into()));
    }
    let mut seen = HashSet::new();
    let mut sum = 0.0;
    for a in &e.agents {
        if a.id12.len() != 12 || !a.id12.bytes().all(|b| b == b'0' || b == b'1') {
            return Err(Error::Export(format!("bad id12 '{}'", a.id12)));
        }
        if !seen.insert(&a.id12) {
            return Err(Error::Export(format!("duplicate id12 '{}'", a.id12)));
        }
        if GroupLabel::from_color(&a.color).is_none() {
            return Err(Error::Export(format!("unknown color '{}'", a.color)));
        }
        if !(a.approach_weight >= 0.0) || !(0.0..=1.0).contains(&a.wood_prob) {
            return Err(Error::Export(format!("out-of-range values for '{}'", a.id12)));
        }
        sum += a.approach_weight;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Export(format!("approach weights sum to {sum}, not 1")));
    }
    Ok(())
}

pub fn validate_agent_export(e: &AgentGameExport) -> Result<()> {
    if e.schema_version != EXPORT_SCHEMA_VERSION || e.game != "agent" {
        return Err(Error::Export("unexpected schema version or game".into()));
    }
    for row in &e.epochs {
        if !(0.0..=1.0).contains(&row.skill_consistent_prob) {
            return Err(Error::Export(format!("epoch {} probability out of range", row.epoch)));
        }
        if row.skill != "wood" && row.skill != "stone" {
            return Err(Error::Export(format!("unknown skill '{}'", row.skill)));
        }
    }
    Ok(())
}

/// One long-format analysis row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TidyRow {
    pub study: String,
    pub seed: u64,
    /// One-based epoch number.
    pub epoch: u32,
    /// `(epoch - 100) / 100`, so that epoch 100 is the zero point.
    pub epoch_centered: f64,
    pub phase: String,
    pub group: String,
    pub role_class: String,
    pub measure: String,
    /// `NA` when the denominator was zero.
    #[serde(with = "na_float")]
    pub value: Option<f64>,
}

mod na_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_str(&x.to_string()),
            None => s.serialize_str("NA"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let s = String::deserialize(d)?;
        if s == "NA" {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(serde::de::Error::custom)
        }
    }
}

pub const TIDY_HEADER: &str = "study,seed,epoch,epoch_centered,phase,group,role_class,measure,value";

fn phase_name(p: crate::experiments::Phase) -> String {
    match p {
        crate::experiments::Phase::Train => "train".into(),
        crate::experiments::Phase::Wave(w) => format!("wave{w}"),
        crate::experiments::Phase::PostMarket => "post_market".into(),
    }
}

fn group_name(g: Option<GroupLabel>) -> String {
    g.map_or("none", |g| g.color()).to_string()
}

/// Long-format rows for one run: six measures per (group, role-class) cell
/// and five per group, every epoch.
pub fn tidy_rows(artifact: &RunArtifact) -> Vec<TidyRow> {
    let mut rows = Vec::new();
    let study = artifact.config.study.name().to_string();
    for rec in &artifact.epochs {
        let epoch = rec.epoch + 1;
        let base = |group: String, role: &str, measure: &str, value: Option<f64>| TidyRow {
            study: study.clone(),
            seed: artifact.seed,
            epoch,
            epoch_centered: (f64::from(epoch) - 100.0) / 100.0,
            phase: phase_name(rec.phase),
            group,
            role_class: role.to_string(),
            measure: measure.to_string(),
            value,
        };
        for m in compute_epoch_metrics(rec, &artifact.roster) {
            let g = group_name(m.group);
            let role = m.role.name();
            rows.push(base(g.clone(), role, "agents", Some(f64::from(m.agents))));
            rows.push(base(g.clone(), role, "skilled_extraction_ratio", m.skilled_extraction));
            rows.push(base(g.clone(), role, "skilled_sale_ratio", m.skilled_sale));
            rows.push(base(
                g.clone(),
                role,
                "skill_consistent_prediction_ratio",
                m.skill_consistent_prediction,
            ));
            rows.push(base(g.clone(), role, "stereotypic_sale_ratio", m.stereotypic_sale));
            rows.push(base(g, role, "mean_reward", Some(m.mean_reward)));
        }
        for s in group_signals(rec, &artifact.roster) {
            let g = group_name(s.group);
            rows.push(base(g.clone(), "all", "offered_wood", Some(f64::from(s.offered_wood))));
            rows.push(base(g.clone(), "all", "offered_stone", Some(f64::from(s.offered_stone))));
            let probe = s.probe.as_ref();
            rows.push(base(
                g.clone(),
                "all",
                "probe_stereotypic_proportion",
                probe.and_then(|p| p.stereotypic),
            ));
            rows.push(base(
                g.clone(),
                "all",
                "probe_expected_accuracy",
                probe.map(|p| p.expected_accuracy),
            ));
            rows.push(base(
                g,
                "all",
                "probe_wood_proportion",
                probe.map(|p| f64::from(p.predicted_wood) / f64::from(p.probes)),
            ));
        }
    }
    rows
}

pub fn write_tidy<W: Write>(artifacts: &[RunArtifact], out: W) -> Result<usize> {
    let mut w = csv::Writer::from_writer(out);
    let mut n = 0;
    for a in artifacts {
        for row in tidy_rows(a) {
            w.serialize(row)?;
            n += 1;
        }
    }
    w.flush()?;
    Ok(n)
}

pub fn read_tidy<R: Read>(input: R) -> Result<Vec<TidyRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// One row of the training-statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub epoch: u32,
    pub model_id: String,
    pub steps: usize,
    pub clip: f64,
    pub value: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
}
