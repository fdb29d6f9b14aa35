//! Exact per-prompt scores and their group averages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use super::dataset::EvalQuestion;
use crate::knowledge::{Concept, EntityClass};

/// Binary verdict for one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub question_id: String,
    pub value: bool,
    pub judge_id: String,
    /// Set when the verdict could not be parsed and was scored False.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<String>,
}

/// `true_count` out of `total`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub true_count: u64,
    pub total: u64,
}

impl Tally {
    fn add(&mut self, value: bool) {
        self.total += 1;
        if value {
            self.true_count += 1;
        }
    }

    /// Exact fraction; `None` for an empty tally.
    pub fn ratio(&self) -> Option<BigRational> {
        (self.total > 0).then(|| BigRational::new(self.true_count.into(), self.total.into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptScore {
    pub prompt_id: String,
    pub tally: Tally,
    pub per_concept: BTreeMap<Concept, Tally>,
}

impl PromptScore {
    /// Per-prompt accuracy: true answers over questions.
    pub fn s(&self) -> BigRational {
        self.tally.ratio().expect("scores have at least one question")
    }

    pub fn m(&self) -> u64 {
        self.tally.total
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScoreError {
    #[error("prompt {prompt_id} has no questions")]
    NoQuestions { prompt_id: String },
    #[error(
        "judgments for prompt {prompt_id} do not cover its questions (missing: {missing:?}, duplicate: {duplicate:?}, unknown: {unknown:?})"
    )]
    Coverage {
        prompt_id: String,
        missing: Vec<String>,
        duplicate: Vec<String>,
        unknown: Vec<String>,
    },
    #[error("prompt {0} has no entity class")]
    MissingClass(String),
}

/// Score one prompt. Every question must be judged exactly once.
pub fn score_prompt(
    prompt_id: &str,
    judgments: &[Judgment],
    questions: &[&EvalQuestion],
) -> Result<PromptScore, ScoreError> {
    if questions.is_empty() {
        return Err(ScoreError::NoQuestions {
            prompt_id: prompt_id.to_string(),
        });
    }
    let by_id: BTreeMap<&str, &EvalQuestion> = questions.iter().map(|q| (q.id.as_str(), *q)).collect();
    let mut seen: BTreeMap<&str, bool> = BTreeMap::new();
    let mut duplicate = BTreeSet::new();
    let mut unknown = BTreeSet::new();
    for j in judgments {
        if !by_id.contains_key(j.question_id.as_str()) {
            unknown.insert(j.question_id.clone());
        } else if seen.insert(j.question_id.as_str(), j.value).is_some() {
            duplicate.insert(j.question_id.clone());
        }
    }
    let missing: Vec<String> = by_id
        .keys()
        .filter(|id| !seen.contains_key(*id))
        .map(|id| id.to_string())
        .collect();
    if !missing.is_empty() || !duplicate.is_empty() || !unknown.is_empty() {
        return Err(ScoreError::Coverage {
            prompt_id: prompt_id.to_string(),
            missing,
            duplicate: duplicate.into_iter().collect(),
            unknown: unknown.into_iter().collect(),
        });
    }
    let mut tally = Tally::default();
    let mut per_concept: BTreeMap<Concept, Tally> = BTreeMap::new();
    for (id, value) in seen {
        tally.add(value);
        per_concept.entry(by_id[id].concept).or_default().add(value);
    }
    Ok(PromptScore {
        prompt_id: prompt_id.to_string(),
        tally,
        per_concept,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grouping {
    EntityClass,
    Concept,
    All,
}

/// Prompt-level (macro) or question-level (micro) averaging inside each group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

/// Exact fraction serialized as `"n/d"`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exact(pub BigRational);

impl Exact {
    pub fn percent(&self) -> f64 {
        let scaled = &self.0 * BigRational::from_integer(BigInt::from(100));
        scaled.numer().to_f64().unwrap_or(f64::NAN) / scaled.denom().to_f64().unwrap_or(f64::NAN)
    }
}

impl fmt::Display for Exact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.0.numer(), self.0.denom())
    }
}

impl Serialize for Exact {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Exact {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let (n, den) = s.split_once('/').ok_or_else(|| serde::de::Error::custom("expected n/d"))?;
        let n: BigInt = n.parse().map_err(serde::de::Error::custom)?;
        let den: BigInt = den.parse().map_err(serde::de::Error::custom)?;
        if den.is_zero() {
            return Err(serde::de::Error::custom("zero denominator"));
        }
        Ok(Exact(BigRational::new(n, den)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub group: String,
    pub mean: Exact,
    pub percent: f64,
    /// Prompts (macro) or questions (micro) contributing to the mean.
    pub support: u64,
}

impl ReportRow {
    fn new(group: impl Into<String>, mean: BigRational, support: u64) -> Self {
        let mean = Exact(mean);
        Self {
            group: group.into(),
            percent: mean.percent(),
            mean,
            support,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub grouping: Grouping,
    pub averaging: Averaging,
    pub rows: Vec<ReportRow>,
    /// Unweighted mean over the entity-class means.
    pub all: Option<ReportRow>,
}

fn mean(values: &[BigRational]) -> Option<BigRational> {
    if values.is_empty() {
        return None;
    }
    let sum = values.iter().fold(BigRational::zero(), |acc, v| acc + v);
    Some(sum / BigRational::from_integer(BigInt::from(values.len())))
}

fn class_means(
    scores: &[PromptScore],
    classes: &BTreeMap<String, EntityClass>,
    averaging: Averaging,
) -> Result<BTreeMap<EntityClass, (BigRational, u64)>, ScoreError> {
    let mut groups: BTreeMap<EntityClass, Vec<&PromptScore>> = BTreeMap::new();
    for s in scores {
        let class = classes
            .get(&s.prompt_id)
            .ok_or_else(|| ScoreError::MissingClass(s.prompt_id.clone()))?;
        groups.entry(*class).or_default().push(s);
    }
    Ok(groups
        .into_iter()
        .map(|(class, members)| match averaging {
            Averaging::Macro => {
                let vals: Vec<BigRational> = members.iter().map(|s| s.s()).collect();
                (class, (mean(&vals).expect("non-empty group"), members.len() as u64))
            }
            Averaging::Micro => {
                let t = members.iter().fold(Tally::default(), |mut acc, s| {
                    acc.true_count += s.tally.true_count;
                    acc.total += s.tally.total;
                    acc
                });
                (class, (t.ratio().expect("non-empty group"), t.total))
            }
        })
        .collect())
}

/// Average scores by entity class or concept. Classes and concepts without any data are
/// omitted. Under macro averaging a prompt with no questions in a concept does not
/// contribute to that concept's mean.
pub fn macro_average(
    scores: &[PromptScore],
    classes: &BTreeMap<String, EntityClass>,
    grouping: Grouping,
    averaging: Averaging,
) -> Result<ReportTable, ScoreError> {
    let by_class = class_means(scores, classes, averaging)?;
    let class_vals: Vec<BigRational> = by_class.values().map(|(m, _)| m.clone()).collect();
    let all = mean(&class_vals).map(|m| ReportRow::new("All", m, by_class.len() as u64));

    let rows = match grouping {
        Grouping::EntityClass => by_class
            .iter()
            .map(|(c, (m, n))| ReportRow::new(c.abbrev(), m.clone(), *n))
            .collect(),
        Grouping::Concept => Concept::ALL
            .iter()
            .filter_map(|&concept| {
                let tallies: Vec<Tally> = scores
                    .iter()
                    .filter_map(|s| s.per_concept.get(&concept).copied())
                    .filter(|t| t.total > 0)
                    .collect();
                match averaging {
                    Averaging::Macro => {
                        let vals: Vec<BigRational> = tallies.iter().filter_map(Tally::ratio).collect();
                        mean(&vals).map(|m| ReportRow::new(concept.to_string(), m, vals.len() as u64))
                    }
                    Averaging::Micro => {
                        let t = tallies.iter().fold(Tally::default(), |mut acc, t| {
                            acc.true_count += t.true_count;
                            acc.total += t.total;
                            acc
                        });
                        t.ratio().map(|m| ReportRow::new(concept.to_string(), m, t.total))
                    }
                }
            })
            .collect(),
        Grouping::All => all.iter().cloned().collect(),
    };
    Ok(ReportTable {
        grouping,
        averaging,
        rows,
        all,
    })
}

impl ReportTable {
    pub fn row(&self, group: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.group == group)
    }

    /// One header line of group names and one line of percentages.
    pub fn render(&self, title: &str) -> String {
        let mut groups: Vec<&ReportRow> = self.rows.iter().collect();
        if self.grouping != Grouping::All {
            groups.extend(self.all.iter());
        }
        let head: Vec<String> = groups.iter().map(|r| format!("{:>6}", r.group)).collect();
        let vals: Vec<String> = groups.iter().map(|r| format!("{:>6.1}", r.percent)).collect();
        format!("{title:<10} | {}\n{:<10} | {}\n", head.join(" "), "Acc (%)", vals.join(" "))
    }
}
