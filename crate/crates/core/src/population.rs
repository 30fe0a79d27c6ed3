//! Identity codes, group labels and population generators.
//!
//! A 16-digit identity code is stored as a `u16` whose three most significant
//! bits carry the group-label segment and whose 13 low bits carry the
//! individual segment.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{AgentState, Specialization};
use crate::error::{Error, Result};

pub const CODE_DIGITS: usize = 16;
pub const GROUP_DIGITS: usize = 3;
pub const INDIVIDUAL_BITS: u32 = 13;
const INDIVIDUAL_SPACE: u32 = 1 << INDIVIDUAL_BITS;

/// Population sizes the generators accept.
pub const SUPPORTED_SIZES: [usize; 5] = [30, 60, 100, 300, 600];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdentityCode(u16);

impl IdentityCode {
    pub fn new(bits: u16) -> Self {
        IdentityCode(bits)
    }

    pub fn from_parts(group_segment: u8, individual: u16) -> Self {
        debug_assert!(group_segment < 8 && u32::from(individual) < INDIVIDUAL_SPACE);
        IdentityCode((u16::from(group_segment) << INDIVIDUAL_BITS) | individual)
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn group_segment(self) -> u8 {
        (self.0 >> INDIVIDUAL_BITS) as u8
    }

    pub fn individual_segment(self) -> u16 {
        self.0 & (INDIVIDUAL_SPACE as u16 - 1)
    }

    /// Digit `i` counted from the left.
    pub fn digit(self, i: usize) -> u8 {
        ((self.0 >> (CODE_DIGITS - 1 - i)) & 1) as u8
    }

    /// The market decider's input: one 0/1 value per digit.
    pub fn as_input(self) -> [f64; CODE_DIGITS] {
        let mut out = [0.0; CODE_DIGITS];
        for (i, v) in out.iter_mut().enumerate() {
            *v = f64::from(self.digit(i));
        }
        out
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s.len() != CODE_DIGITS || !s.bytes().all(|b| b == b'0' || b == b'1') {
            return None;
        }
        u16::from_str_radix(s, 2).ok().map(IdentityCode)
    }
}

impl fmt::Display for IdentityCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016b}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupLabel {
    Purple,
    Yellow,
    Cyan,
}

impl GroupLabel {
    pub const ALL: [GroupLabel; 3] = [GroupLabel::Purple, GroupLabel::Yellow, GroupLabel::Cyan];

    /// One-hot segment: purple `100`, yellow `010`, cyan `001`.
    pub fn segment(self) -> u8 {
        match self {
            GroupLabel::Purple => 0b100,
            GroupLabel::Yellow => 0b010,
            GroupLabel::Cyan => 0b001,
        }
    }

    pub fn from_segment(segment: u8) -> Option<GroupLabel> {
        GroupLabel::ALL.into_iter().find(|g| g.segment() == segment)
    }

    pub fn color(self) -> &'static str {
        match self {
            GroupLabel::Purple => "purple",
            GroupLabel::Yellow => "yellow",
            GroupLabel::Cyan => "cyan",
        }
    }

    pub fn from_color(color: &str) -> Option<GroupLabel> {
        GroupLabel::ALL.into_iter().find(|g| g.color() == color)
    }

    /// The specialization held by half of this group under the correlated scheme.
    pub fn majority(self) -> Specialization {
        match self {
            GroupLabel::Purple => Specialization::Chopper,
            GroupLabel::Yellow => Specialization::Miner,
            GroupLabel::Cyan => Specialization::Builder,
        }
    }

    /// The two minority specializations, the extraction specialist first.
    fn minorities(self) -> [Specialization; 2] {
        match self {
            GroupLabel::Purple => [Specialization::Miner, Specialization::Builder],
            GroupLabel::Yellow => [Specialization::Chopper, Specialization::Builder],
            GroupLabel::Cyan => [Specialization::Chopper, Specialization::Miner],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Codes drawn uniformly at random, independent of skill.
    Random,
    /// Group segment correlated with skill (50/25/25 within each group).
    Correlated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PopulationSpec {
    pub size: usize,
    pub scheme: Scheme,
}

/// Per-group head counts: `(choppers, miners, builders)`.
pub type Composition = (usize, usize, usize);

/// Splits `total` proportionally to `weights` with the largest-remainder rule.
/// Ties go to the earlier entry.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_SIZES.contains(&self.size) {
            return Err(Error::config(format!(
                "population size {} is not one of the supported sizes {:?}",
                self.size, SUPPORTED_SIZES
            )));
        }
        Ok(())
    }

    /// Group sizes in `GroupLabel::ALL` order.
    pub fn group_sizes(&self) -> [usize; 3] {
        let v = apportion(self.size, &[1.0, 1.0, 1.0]);
        [v[0], v[1], v[2]]
    }

    /// Head counts per group under the correlated scheme.
    pub fn composition(&self, group: GroupLabel) -> Composition {
        let idx = GroupLabel::ALL.iter().position(|g| *g == group).unwrap();
        let n = self.group_sizes()[idx];
        let split = apportion(n, &[0.5, 0.25, 0.25]);
        let mut counts = [0usize; 3];
        let specs = [group.majority(), group.minorities()[0], group.minorities()[1]];
        for (spec, c) in specs.iter().zip(split) {
            counts[*spec as usize] += c;
        }
        (counts[0], counts[1], counts[2])
    }
}

/// A generated agent with its bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub state: AgentState,
    /// `None` for randomly coded populations.
    pub group: Option<GroupLabel>,
    pub wave_introduced: u32,
}

/// Every identity code issued so far, including probe codes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CodeRegistry {
    issued: BTreeSet<u16>,
}

impl CodeRegistry {
    pub fn contains(&self, code: IdentityCode) -> bool {
        self.issued.contains(&code.bits())
    }

    pub fn len(&self) -> usize {
        self.issued.len()
    }

    pub fn is_empty(&self) -> bool {
        self.issued.is_empty()
    }

    fn issue_in_group<R: Rng + ?Sized>(&mut self, segment: u8, rng: &mut R) -> Result<IdentityCode> {
        let lo = u16::from(segment) << INDIVIDUAL_BITS;
        let used = self
            .issued
            .range(lo..=lo | (INDIVIDUAL_SPACE as u16 - 1))
            .count();
        if used as u32 >= INDIVIDUAL_SPACE {
            return Err(Error::CodeSpaceExhausted(segment));
        }
        loop {
            let individual = rng.gen_range(0..INDIVIDUAL_SPACE) as u16;
            let code = IdentityCode::from_parts(segment, individual);
            if self.issued.insert(code.bits()) {
                return Ok(code);
            }
        }
    }

    fn issue_any<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<IdentityCode> {
        if self.issued.len() > u16::MAX as usize {
            return Err(Error::CodeSpaceExhausted(0));
        }
        loop {
            let code = IdentityCode(rng.gen());
            if self.issued.insert(code.bits()) {
                return Ok(code);
            }
        }
    }

    fn issue<R: Rng + ?Sized>(&mut self, group: Option<GroupLabel>, rng: &mut R) -> Result<IdentityCode> {
        match group {
            Some(g) => self.issue_in_group(g.segment(), rng),
            None => self.issue_any(rng),
        }
    }
}

fn skill_list(counts: Composition) -> Vec<Specialization> {
    let (c, m, b) = counts;
    let mut out = Vec::with_capacity(c + m + b);
    out.extend(std::iter::repeat_n(Specialization::Chopper, c));
    out.extend(std::iter::repeat_n(Specialization::Miner, m));
    out.extend(std::iter::repeat_n(Specialization::Builder, b));
    out
}

/// Builds an initial population.
pub fn generate_population<R: Rng + ?Sized>(
    spec: &PopulationSpec,
    registry: &mut CodeRegistry,
    rng: &mut R,
) -> Result<Vec<Member>> {
    spec.validate()?;
    let mut members = Vec::with_capacity(spec.size);
    match spec.scheme {
        Scheme::Random => {
            let thirds = apportion(spec.size, &[1.0, 1.0, 1.0]);
            let mut skills = skill_list((thirds[0], thirds[1], thirds[2]));
            skills.shuffle(rng);
            for skill in skills {
                let code = registry.issue(None, rng)?;
                members.push(Member {
                    state: AgentState::new(code, skill),
                    group: None,
                    wave_introduced: 0,
                });
            }
        }
        Scheme::Correlated => {
            for group in GroupLabel::ALL {
                let mut skills = skill_list(spec.composition(group));
                skills.shuffle(rng);
                for skill in skills {
                    let code = registry.issue(Some(group), rng)?;
                    members.push(Member {
                        state: AgentState::new(code, skill),
                        group: Some(group),
                        wave_introduced: 0,
                    });
                }
            }
        }
    }
    Ok(members)
}

/// Fresh agents for one replacement wave: half choppers, half miners.
pub fn generate_replacement_cohort<R: Rng + ?Sized>(
    group: GroupLabel,
    count: usize,
    wave: u32,
    registry: &mut CodeRegistry,
    rng: &mut R,
) -> Result<Vec<Member>> {
    if !count.is_multiple_of(2) {
        return Err(Error::config(format!(
            "replacement cohort size {count} must be even to split choppers and miners equally"
        )));
    }
    let mut skills = skill_list((count / 2, count / 2, 0));
    skills.shuffle(rng);
    skills
        .into_iter()
        .map(|skill| {
            Ok(Member {
                state: AgentState::new(registry.issue(Some(group), rng)?, skill),
                group: Some(group),
                wave_introduced: wave,
            })
        })
        .collect()
}

/// Codes that are reserved but never given to a trained agent.
pub fn generate_heldout_probes<R: Rng + ?Sized>(
    group: Option<GroupLabel>,
    count: usize,
    registry: &mut CodeRegistry,
    rng: &mut R,
) -> Result<Vec<IdentityCode>> {
    if count == 0 {
        return Err(Error::config("probe count must be at least 1"));
    }
    (0..count).map(|_| registry.issue(group, rng)).collect()
}

/// Replacement protocol parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplacementSchedule {
    pub waves: u32,
    pub inter_wave_epochs: u32,
    pub post_market_epochs: u32,
    pub replace_market: bool,
}

impl Default for ReplacementSchedule {
    fn default() -> Self {
        ReplacementSchedule {
            waves: 5,
            inter_wave_epochs: 100,
            post_market_epochs: 200,
            replace_market: true,
        }
    }
}

impl ReplacementSchedule {
    pub fn fraction(&self) -> f64 {
        1.0 / f64::from(self.waves)
    }

    /// Agents replaced per group per wave, checking divisibility.
    pub fn per_wave(&self, group_size: usize) -> Result<usize> {
        let waves = self.waves as usize;
        if waves == 0 {
            return Err(Error::config("replacement.waves must be at least 1"));
        }
        if !group_size.is_multiple_of(waves) {
            return Err(Error::config(format!(
                "group size {group_size} is not divisible by replacement.waves = {waves}"
            )));
        }
        let per = group_size / waves;
        if !per.is_multiple_of(2) {
            return Err(Error::config(format!(
                "per-wave cohort of {per} agents per group must be even \
                 (group size {group_size} / {waves} waves)"
            )));
        }
        Ok(per)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub agent_id: u32,
    pub code: String,
    pub group: String,
    pub specialization: String,
    pub wave_introduced: u32,
}

pub fn write_manifest<W: Write>(rows: &[ManifestRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest<R: Read>(input: R) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
