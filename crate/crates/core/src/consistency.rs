//! Execution-based candidate selection: error filtering, grouping by result
//! digest, mass ranking, and cross-paradigm majority selection.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{execute, result_key_with, ComparePolicy, ExecutionOutcome, ResultKey};
use crate::schema::DatabaseSchema;

#[derive(Debug, Error, PartialEq)]
pub enum SelectError {
    #[error("no candidates to select from")]
    EmptyInput,
    #[error("candidate {0} has not been executed")]
    NotExecuted(usize),
    #[error("negative weight on candidate {0}")]
    NegativeWeight(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSource {
    pub paradigm_id: String,
    pub sample_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlCandidate {
    pub sql: String,
    pub source: CandidateSource,
    /// Sequence probability, when the backend reports one.
    pub weight: Option<f64>,
    pub outcome: Option<ExecutionOutcome>,
}

impl SqlCandidate {
    pub fn new(sql: impl Into<String>, paradigm_id: impl Into<String>, sample_index: usize) -> Self {
        SqlCandidate {
            sql: sql.into(),
            source: CandidateSource {
                paradigm_id: paradigm_id.into(),
                sample_index,
            },
            weight: None,
            outcome: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen: SqlCandidate,
    /// `None` when every candidate failed.
    pub group_key: Option<ResultKey>,
    pub group_mass: f64,
    pub valid_count: usize,
    pub error_count: usize,
    pub tie_broken: bool,
    pub all_invalid: bool,
}

fn keyed(
    candidates: &[SqlCandidate],
    policy: ComparePolicy,
) -> Result<Vec<(usize, Option<ResultKey>)>, SelectError> {
    candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let outcome = c.outcome.as_ref().ok_or(SelectError::NotExecuted(i))?;
            Ok((i, result_key_with(outcome, policy).ok()))
        })
        .collect()
}

/// Picks the candidate whose execution result carries the largest mass.
///
/// Failed executions are discarded. Group mass is the summed weight when
/// `use_weights` is set and every candidate carries a weight, otherwise the
/// member count. Tied groups resolve to the one holding the earliest
/// `sample_index`; inside the winning group the lexicographically smallest
/// SQL is returned.
pub fn consistency_select(
    candidates: &[SqlCandidate],
    use_weights: bool,
    policy: ComparePolicy,
) -> Result<SelectionResult, SelectError> {
    if candidates.is_empty() {
        return Err(SelectError::EmptyInput);
    }
    if let Some(i) = candidates
        .iter()
        .position(|c| c.weight.is_some_and(|w| w < 0.0))
    {
        return Err(SelectError::NegativeWeight(i));
    }
    let keys = keyed(candidates, policy)?;
    let weighted = use_weights && candidates.iter().all(|c| c.weight.is_some());

    struct Group {
        members: Vec<usize>,
    }
    let mut groups: BTreeMap<ResultKey, Group> = BTreeMap::new();
    for (i, key) in &keys {
        if let Some(k) = key {
            groups
                .entry(k.clone())
                .or_insert_with(|| Group { members: Vec::new() })
                .members
                .push(*i);
        }
    }
    let valid_count: usize = groups.values().map(|g| g.members.len()).sum();
    let error_count = candidates.len() - valid_count;
    if groups.is_empty() {
        return Ok(SelectionResult {
            chosen: candidates[0].clone(),
            group_key: None,
            group_mass: 0.0,
            valid_count: 0,
            error_count,
            tie_broken: false,
            all_invalid: true,
        });
    }

    let mut scored: Vec<(ResultKey, f64, usize, Vec<usize>)> = groups
        .into_iter()
        .map(|(k, mut g)| {
            g.members
                .sort_by_key(|&i| (candidates[i].source.sample_index, i));
            let mass = if weighted {
                g.members
                    .iter()
                    .map(|&i| candidates[i].weight.unwrap_or(0.0))
                    .sum()
            } else {
                g.members.len() as f64
            };
            let earliest = candidates[g.members[0]].source.sample_index;
            (k, mass, earliest, g.members)
        })
        .collect();
    let best_mass = scored
        .iter()
        .map(|g| g.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let tied = scored.iter().filter(|g| g.1 == best_mass).count();
    scored.retain(|g| g.1 == best_mass);
    scored.sort_by(|a, b| a.2.cmp(&b.2).then_with(|| a.0.cmp(&b.0)));
    let (key, mass, _, members) = scored.swap_remove(0);
    let chosen = members
        .iter()
        .copied()
        .min_by(|&a, &b| candidates[a].sql.cmp(&candidates[b].sql))
        .unwrap_or(members[0]);

    Ok(SelectionResult {
        chosen: candidates[chosen].clone(),
        group_key: Some(key),
        group_mass: mass,
        valid_count,
        error_count,
        tie_broken: tied > 1,
        all_invalid: false,
    })
}

/// Rank of a paradigm: its position in `priority`, unlisted ones after in
/// input order.
fn priority_rank(priority: &[String], paradigm: &str, input_index: usize) -> usize {
    priority
        .iter()
        .position(|p| p == paradigm)
        .unwrap_or(priority.len() + input_index)
}

/// Majority vote across paradigms over already executed candidates (one per
/// paradigm). Tied groups resolve by paradigm priority, and the chosen
/// member is the highest-priority paradigm inside the winning group.
pub fn cross_paradigm_select_executed(
    candidates: &[SqlCandidate],
    priority: &[String],
    policy: ComparePolicy,
) -> Result<SelectionResult, SelectError> {
    if candidates.is_empty() {
        return Err(SelectError::EmptyInput);
    }
    let keys = keyed(candidates, policy)?;
    let rank = |i: usize| priority_rank(priority, &candidates[i].source.paradigm_id, i);

    let mut groups: BTreeMap<ResultKey, Vec<usize>> = BTreeMap::new();
    for (i, key) in &keys {
        if let Some(k) = key {
            groups.entry(k.clone()).or_default().push(*i);
        }
    }
    let valid_count: usize = groups.values().map(Vec::len).sum();
    let error_count = candidates.len() - valid_count;
    if groups.is_empty() {
        let first = (0..candidates.len()).min_by_key(|&i| rank(i)).unwrap_or(0);
        return Ok(SelectionResult {
            chosen: candidates[first].clone(),
            group_key: None,
            group_mass: 0.0,
            valid_count: 0,
            error_count,
            tie_broken: false,
            all_invalid: true,
        });
    }
    let best = groups.values().map(Vec::len).max().unwrap_or(0);
    let tied = groups.values().filter(|g| g.len() == best).count();
    let (key, members) = groups
        .into_iter()
        .filter(|(_, g)| g.len() == best)
        .min_by_key(|(_, g)| g.iter().map(|&i| rank(i)).min())
        .expect("at least one group");
    let chosen = members.iter().copied().min_by_key(|&i| rank(i)).unwrap_or(members[0]);
    Ok(SelectionResult {
        chosen: candidates[chosen].clone(),
        group_key: Some(key),
        group_mass: members.len() as f64,
        valid_count,
        error_count,
        tie_broken: tied > 1,
        all_invalid: false,
    })
}

/// Executes each paradigm's SQL on `database` and applies
/// [`cross_paradigm_select_executed`].
pub fn cross_paradigm_select(
    per_paradigm: &[(String, String)],
    database: &DatabaseSchema,
    priority: &[String],
    policy: ComparePolicy,
    timeout: Duration,
) -> Result<SelectionResult, SelectError> {
    let candidates: Vec<SqlCandidate> = per_paradigm
        .iter()
        .map(|(paradigm, sql)| {
            let mut c = SqlCandidate::new(sql.clone(), paradigm.clone(), 0);
            c.outcome = Some(execute(sql, database, timeout));
            c
        })
        .collect();
    cross_paradigm_select_executed(&candidates, priority, policy)
}
