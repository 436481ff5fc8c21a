//! Preference samples, datasets, generation, and on-disk format.
//!
//! A sample is a prompt-matched trajectory pair with a binary label: label 1
//! means the first trajectory was preferred. Samples remember where their
//! label came from (offline logistic draw, forced online, online logistic
//! draw) and which online iteration produced them; offline samples use
//! iteration -1.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{TokenMdp, Trajectory};
use crate::policy::{rollout, Policy};
use crate::reward::{btl_prob, LinearReward};

/// Where a sample's label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    OfflineBtl,
    OnlineForced,
    OnlineBtl,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Provenance::OfflineBtl => "offline-btl",
            Provenance::OnlineForced => "online-forced",
            Provenance::OnlineBtl => "online-btl",
        };
        f.write_str(s)
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline-btl" => Ok(Provenance::OfflineBtl),
            "online-forced" => Ok(Provenance::OnlineForced),
            "online-btl" => Ok(Provenance::OnlineBtl),
            other => Err(Error::Parse(format!("unknown provenance {other:?}"))),
        }
    }
}

/// One labeled comparison between two trajectories of the same prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceSample {
    /// 1 when `traj0` is preferred, 0 when `traj1` is.
    pub label: u8,
    pub traj0: Trajectory,
    pub traj1: Trajectory,
    pub provenance: Provenance,
    /// Online iteration that produced the pair; -1 for offline data.
    pub iteration: i64,
}

impl PreferenceSample {
    pub fn prompt(&self) -> u32 {
        self.traj0.prompt
    }

    fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Parse(format!("label must be 0 or 1, got {}", self.label)));
        }
        if self.traj0.prompt != self.traj1.prompt {
            return Err(Error::MalformedTrajectory(format!(
                "paired trajectories have different prompts: {} vs {}",
                self.traj0.prompt, self.traj1.prompt
            )));
        }
        Ok(())
    }
}

/// Ordered collection of preference samples with generation metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    samples: Vec<PreferenceSample>,
    pub annotator0: String,
    pub annotator1: String,
    pub seed: u64,
}

/// Naming and seed metadata recorded with a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotators {
    pub name0: String,
    pub name1: String,
    pub seed: u64,
}

impl Default for Annotators {
    fn default() -> Self {
        Self {
            name0: "softened-teacher".into(),
            name1: "uniform".into(),
            seed: 0,
        }
    }
}

impl PreferenceDataset {
    pub fn new(annotator0: String, annotator1: String, seed: u64) -> Self {
        Self {
            samples: Vec::new(),
            annotator0,
            annotator1,
            seed,
        }
    }

    pub fn samples(&self) -> &[PreferenceSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn max_iteration(&self) -> Option<i64> {
        self.samples.iter().map(|s| s.iteration).max()
    }

    /// Appends samples, refusing any whose iteration index runs behind data
    /// already present.
    pub fn append(&mut self, samples: Vec<PreferenceSample>) -> Result<()> {
        let mut max_iter = self.max_iteration();
        for sample in samples {
            sample.validate()?;
            if let Some(existing) = max_iter {
                if sample.iteration < existing {
                    return Err(Error::IterationOrderViolation {
                        new: sample.iteration,
                        existing,
                    });
                }
            }
            max_iter = Some(max_iter.map_or(sample.iteration, |m| m.max(sample.iteration)));
            self.samples.push(sample);
        }
        Ok(())
    }

    /// Writes the dataset as a header line plus one record per line.
    pub fn write_records(&self, w: &mut impl Write) -> Result<()> {
        for name in [&self.annotator0, &self.annotator1] {
            if name.contains([',', '\n', '=']) {
                return Err(Error::ConfigInvalid(format!(
                    "annotator name {name:?} contains a reserved character"
                )));
            }
        }
        writeln!(
            w,
            "pbkd-pref-v1,annotator0={},annotator1={},seed={}",
            self.annotator0, self.annotator1, self.seed
        )?;
        for s in &self.samples {
            writeln!(
                w,
                "1,{},{},{},{},{},{},{}",
                s.label,
                s.traj0.prompt,
                join_actions(&s.traj0.actions),
                join_actions(&s.traj1.actions),
                s.provenance,
                s.iteration,
                self.seed
            )?;
        }
        Ok(())
    }

    /// Reads a dataset written by `write_records`, recomputing trajectory
    /// features from the MDP, so a round trip is bit-exact.
    pub fn read_records(r: impl BufRead, mdp: &TokenMdp) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty dataset file".into()))??;
        let mut parts = header.split(',');
        let version = parts.next().unwrap_or_default();
        if version != "pbkd-pref-v1" {
            return Err(Error::Parse(format!(
                "unsupported dataset version {version:?}"
            )));
        }
        let mut annotator0 = None;
        let mut annotator1 = None;
        let mut seed = None;
        for field in parts {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("malformed header field {field:?}")))?;
            match key {
                "annotator0" => annotator0 = Some(value.to_string()),
                "annotator1" => annotator1 = Some(value.to_string()),
                "seed" => {
                    seed = Some(value.parse::<u64>().map_err(|e| {
                        Error::Parse(format!("bad seed {value:?}: {e}"))
                    })?)
                }
                other => return Err(Error::Parse(format!("unknown header field {other:?}"))),
            }
        }
        let (annotator0, annotator1, seed) = match (annotator0, annotator1, seed) {
            (Some(a), Some(b), Some(s)) => (a, b, s),
            _ => return Err(Error::Parse("incomplete dataset header".into())),
        };
        let mut dataset = PreferenceDataset::new(annotator0, annotator1, seed);
        let mut pending = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(Error::Parse(format!(
                    "record {} has {} fields, expected 8",
                    i + 1,
                    fields.len()
                )));
            }
            if fields[0] != "1" {
                return Err(Error::Parse(format!(
                    "unsupported record version {:?}",
                    fields[0]
                )));
            }
            let label: u8 = parse_field(fields[1], "label")?;
            let prompt: u32 = parse_field(fields[2], "prompt")?;
            let actions0 = parse_actions(fields[3])?;
            let actions1 = parse_actions(fields[4])?;
            let provenance: Provenance = fields[5].parse()?;
            let iteration: i64 = parse_field(fields[6], "iteration")?;
            let record_seed: u64 = parse_field(fields[7], "seed")?;
            if record_seed != seed {
                return Err(Error::Parse(format!(
                    "record {} seed {} disagrees with header seed {}",
                    i + 1,
                    record_seed,
                    seed
                )));
            }
            pending.push(PreferenceSample {
                label,
                traj0: mdp.make_trajectory(prompt, actions0)?,
                traj1: mdp.make_trajectory(prompt, actions1)?,
                provenance,
                iteration,
            });
        }
        dataset.append(pending)?;
        Ok(dataset)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_records(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_from(path: &Path, mdp: &TokenMdp) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_records(std::io::BufReader::new(file), mdp)
    }
}

fn join_actions(actions: &[u32]) -> String {
    let mut out = String::new();
    for (i, a) in actions.iter().enumerate() {
        if i > 0 {
            out.push('-');
        }
        out.push_str(&a.to_string());
    }
    out
}

fn parse_actions(s: &str) -> Result<Vec<u32>> {
    s.split('-')
        .map(|t| {
            t.parse::<u32>()
                .map_err(|e| Error::Parse(format!("bad action {t:?}: {e}")))
        })
        .collect()
}

fn parse_field<T: FromStr>(s: &str, what: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    s.parse::<T>()
        .map_err(|e| Error::Parse(format!("bad {what} {s:?}: {e}")))
}

/// Draws an offline preference dataset: prompt from d0, one trajectory from
/// each annotator policy, and a logistic label under the ground-truth reward.
pub fn gen_offline(
    mdp: &TokenMdp,
    mu0: &dyn Policy,
    mu1: &dyn Policy,
    rstar: &LinearReward,
    n: usize,
    rng: &mut impl Rng,
    meta: Annotators,
) -> Result<PreferenceDataset> {
    let mut dataset = PreferenceDataset::new(meta.name0, meta.name1, meta.seed);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let prompt = mdp.sample_prompt(rng);
        let traj0 = rollout(mdp, mu0, prompt, rng)?;
        let traj1 = rollout(mdp, mu1, prompt, rng)?;
        let p = btl_prob(rstar, mdp, &traj0, &traj1)?;
        let u: f64 = rng.gen();
        samples.push(PreferenceSample {
            label: u8::from(u < p),
            traj0,
            traj1,
            provenance: Provenance::OfflineBtl,
            iteration: -1,
        });
    }
    dataset.append(samples)?;
    Ok(dataset)
}

/// How online pairs are labeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Labeling {
    /// The teacher trajectory is always preferred.
    Forced,
    /// Logistic draw under the ground-truth reward.
    Oracle,
}

/// Draws one online comparison: teacher trajectory versus student trajectory
/// on a shared prompt.
pub fn gen_online_sample(
    mdp: &TokenMdp,
    teacher: &dyn Policy,
    student: &dyn Policy,
    iteration: i64,
    labeling: Labeling,
    rstar: Option<&LinearReward>,
    rng: &mut impl Rng,
) -> Result<PreferenceSample> {
    let prompt = mdp.sample_prompt(rng);
    let traj0 = rollout(mdp, teacher, prompt, rng)?;
    let traj1 = rollout(mdp, student, prompt, rng)?;
    let (label, provenance) = match labeling {
        Labeling::Forced => (1, Provenance::OnlineForced),
        Labeling::Oracle => {
            let rstar = rstar.ok_or(Error::MissingOracle)?;
            let p = btl_prob(rstar, mdp, &traj0, &traj1)?;
            let u: f64 = rng.gen();
            (u8::from(u < p), Provenance::OnlineBtl)
        }
    };
    Ok(PreferenceSample {
        label,
        traj0,
        traj1,
        provenance,
        iteration,
    })
}
