//! Constitution principles, stage-specific sampling, and prompt templating.
//!
//! A constitution is a flat list of natural-language rules, each tagged with
//! the pipeline stage it serves: critiquing a response, revising it, or
//! judging a preference pair. The set is immutable after load and safe to
//! share across workers; all sampling takes a caller-owned RNG.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{canonical_json, sha256_hex};

#[derive(Debug, thiserror::Error)]
pub enum ConstitutionError {
    #[error("failed to parse constitution: {0}")]
    Parse(String),
    #[error("duplicate principle id {0:?}")]
    DuplicateId(String),
    #[error("principle {0:?} has empty text")]
    EmptyText(String),
    #[error("no principles for stage {0}")]
    EmptyStage(Stage),
    #[error("critique principle {critique:?} names pair_id {pair_id:?} but no revision principle carries it")]
    DanglingPair { critique: String, pair_id: String },
    #[error("expected a {expected} principle, got {got} ({id:?})")]
    WrongStage { expected: Stage, got: Stage, id: String },
    #[error("template {template:?} is missing bindings for: {missing:?}")]
    MissingSlots { template: String, missing: Vec<String> },
    #[error("template {template:?} received bindings for unknown slots: {extra:?}")]
    ExtraBindings { template: String, extra: Vec<String> },
    #[error("template {template:?}: body placeholders {body:?} do not match declared slots {declared:?}")]
    SlotMismatch {
        template: String,
        body: Vec<String>,
        declared: Vec<String>,
    },
}

/// Pipeline stage a principle is written for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Critique,
    Revision,
    Preference,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Critique => f.write_str("critique"),
            Stage::Revision => f.write_str("revision"),
            Stage::Preference => f.write_str("preference"),
        }
    }
}

/// One constitution rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Principle {
    pub id: String,
    pub stage: Stage,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConstitutionFile {
    principles: Vec<Principle>,
}

/// A validated, immutable set of principles.
#[derive(Debug, Clone)]
pub struct ConstitutionSet {
    principles: Vec<Principle>,
    version: String,
    by_id: HashMap<String, usize>,
}

impl ConstitutionSet {
    /// Validate a principle list and compute its content-hash version.
    pub fn new(principles: Vec<Principle>) -> Result<Self, ConstitutionError> {
        let mut by_id = HashMap::new();
        for (idx, p) in principles.iter().enumerate() {
            if p.text.trim().is_empty() {
                return Err(ConstitutionError::EmptyText(p.id.clone()));
            }
            if by_id.insert(p.id.clone(), idx).is_some() {
                return Err(ConstitutionError::DuplicateId(p.id.clone()));
            }
        }
        for stage in [Stage::Critique, Stage::Revision, Stage::Preference] {
            if !principles.iter().any(|p| p.stage == stage) {
                return Err(ConstitutionError::EmptyStage(stage));
            }
        }
        let revision_pairs: HashSet<&str> = principles
            .iter()
            .filter(|p| p.stage == Stage::Revision)
            .filter_map(|p| p.pair_id.as_deref())
            .collect();
        for p in &principles {
            if p.stage == Stage::Critique {
                if let Some(pair_id) = &p.pair_id {
                    if !revision_pairs.contains(pair_id.as_str()) {
                        return Err(ConstitutionError::DanglingPair {
                            critique: p.id.clone(),
                            pair_id: pair_id.clone(),
                        });
                    }
                }
            }
        }
        let version = version_hash(&principles);
        Ok(Self { principles, version, by_id })
    }

    pub fn principles(&self) -> &[Principle] {
        &self.principles
    }

    /// Lowercase hex SHA-256 over the canonicalized principle list.
    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn get(&self, id: &str) -> Option<&Principle> {
        self.by_id.get(id).map(|&idx| &self.principles[idx])
    }

    pub fn stage_pool(&self, stage: Stage) -> Vec<&Principle> {
        self.principles.iter().filter(|p| p.stage == stage).collect()
    }

    /// Uniform draw over the stage-filtered pool.
    pub fn sample_principle<R: Rng>(
        &self,
        stage: Stage,
        rng: &mut R,
    ) -> Result<&Principle, ConstitutionError> {
        let pool = self.stage_pool(stage);
        pool.choose(rng)
            .copied()
            .ok_or(ConstitutionError::EmptyStage(stage))
    }

    /// The revision rule companion to a critique rule: the linked one when the
    /// critique carries a pair_id, otherwise an independent draw.
    pub fn paired_revision_for<R: Rng>(
        &self,
        critique: &Principle,
        rng: &mut R,
    ) -> Result<&Principle, ConstitutionError> {
        if critique.stage != Stage::Critique {
            return Err(ConstitutionError::WrongStage {
                expected: Stage::Critique,
                got: critique.stage,
                id: critique.id.clone(),
            });
        }
        if let Some(pair_id) = &critique.pair_id {
            return self
                .principles
                .iter()
                .find(|p| p.stage == Stage::Revision && p.pair_id.as_deref() == Some(pair_id))
                .ok_or_else(|| ConstitutionError::DanglingPair {
                    critique: critique.id.clone(),
                    pair_id: pair_id.clone(),
                });
        }
        self.sample_principle(Stage::Revision, rng)
    }

    /// Serialize back to the constitution file format.
    pub fn to_toml(&self) -> String {
        let file = ConstitutionFile { principles: self.principles.clone() };
        toml::to_string(&file).expect("constitution serializes")
    }

    /// The default rule set bundled with the toolkit.
    pub fn bundled_default() -> Self {
        load_constitution_str(include_str!("../assets/constitution.toml"))
            .expect("bundled constitution is valid")
    }
}

fn version_hash(principles: &[Principle]) -> String {
    let value = serde_json::to_value(principles).expect("principles serialize");
    sha256_hex(canonical_json(&value).as_bytes())
}

/// Parse and validate a constitution document (TOML, `[[principles]]` entries).
pub fn load_constitution(path: &Path) -> Result<ConstitutionSet, ConstitutionError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConstitutionError::Parse(format!("{}: {e}", path.display())))?;
    load_constitution_str(&text)
}

pub fn load_constitution_str(text: &str) -> Result<ConstitutionSet, ConstitutionError> {
    let file: ConstitutionFile =
        toml::from_str(text).map_err(|e| ConstitutionError::Parse(e.to_string()))?;
    ConstitutionSet::new(file.principles)
}

/// A named prompt body with `{{slot}}` placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    pub required_slots: Vec<String>,
}

impl PromptTemplate {
    /// Build a template, checking that body placeholders and declared slots
    /// agree in both directions.
    pub fn new(
        name: &str,
        body: &str,
        required_slots: &[&str],
    ) -> Result<Self, ConstitutionError> {
        let found = placeholders(body);
        let declared: HashSet<String> = required_slots.iter().map(|s| s.to_string()).collect();
        if found != declared {
            let mut body_slots: Vec<_> = found.into_iter().collect();
            let mut declared_slots: Vec<_> = declared.into_iter().collect();
            body_slots.sort();
            declared_slots.sort();
            return Err(ConstitutionError::SlotMismatch {
                template: name.to_string(),
                body: body_slots,
                declared: declared_slots,
            });
        }
        Ok(Self {
            name: name.to_string(),
            body: body.to_string(),
            required_slots: required_slots.iter().map(|s| s.to_string()).collect(),
        })
    }

    /// Substitute every placeholder in a single pass. Bindings are inserted
    /// verbatim; binding values are never rescanned.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<String, ConstitutionError> {
        let missing: Vec<String> = self
            .required_slots
            .iter()
            .filter(|slot| !bindings.contains_key(*slot))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(ConstitutionError::MissingSlots {
                template: self.name.clone(),
                missing,
            });
        }
        let extra: Vec<String> = bindings
            .keys()
            .filter(|key| !self.required_slots.iter().any(|s| s == *key))
            .cloned()
            .collect();
        if !extra.is_empty() {
            return Err(ConstitutionError::ExtraBindings {
                template: self.name.clone(),
                extra,
            });
        }

        let mut out = String::with_capacity(self.body.len());
        let mut rest = self.body.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after.find("}}").expect("validated placeholder");
            let slot = &after[..end];
            out.push_str(&bindings[slot]);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn placeholders(body: &str) -> HashSet<String> {
    let mut slots = HashSet::new();
    let mut rest = body;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                slots.insert(after[..end].to_string());
                rest = &after[end + 2..];
            }
            None => break,
        }
    }
    slots
}
