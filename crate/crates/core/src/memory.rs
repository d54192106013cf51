//! Per-viewpoint experience memory behind an exact flat cosine index.
//!
//! Each viewpoint owns one memory unit holding its image reference, landmark
//! tokens and accumulated experiences. Units with at least one of image or
//! landmarks get an index entry (their hybrid embedding) keyed by a unique
//! index id, giving bidirectional unit/index lookup. Retrieval is an
//! exhaustive scan, so it is exactly the cosine argmax; an approximate
//! index can be substituted behind the same contract if unit counts ever
//! warrant it.
//!
//! Mutation follows a single-writer model: retrieval may run concurrently,
//! inserts happen between episodes under exclusive access.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_sim_or, hybrid_embed, Embedder, EmbeddingVector};
use crate::env::EnvironmentGraph;

/// Embedding-cosine threshold above which two instructions (or two failure
/// rationales) count as the same experience.
pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.95;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("no memory unit for viewpoint '{0}'")]
    UnknownViewpoint(String),
    #[error("duplicate memory unit for viewpoint '{0}'")]
    DuplicateViewpoint(String),
    #[error("embedding: {0}")]
    Embedding(#[from] crate::embedding::EmbeddingError),
    #[error("memory file {path}: {reason}")]
    File { path: String, reason: String },
}

/// The three failure classes assigned by reflection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureType {
    /// Mid-route deviation: left the correct path before reaching the goal.
    Mrd,
    /// False goal recognition: stopped somewhere that is not the goal.
    Fgr,
    /// Post-goal continuation: reached the goal area and kept moving.
    Pgc,
}

impl FailureType {
    pub fn code(self) -> &'static str {
        match self {
            FailureType::Mrd => "MRD",
            FailureType::Fgr => "FGR",
            FailureType::Pgc => "PGC",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            FailureType::Mrd => "mid-route deviation (MRD)",
            FailureType::Fgr => "false goal recognition (FGR)",
            FailureType::Pgc => "post-goal continuation (PGC)",
        }
    }
}

impl std::fmt::Display for FailureType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

/// A completed route worth repeating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessExperience {
    pub instruction: String,
    /// Visited viewpoint ids from start to stop, length >= 2.
    pub trajectory: Vec<String>,
    /// Traversed meters, > 0.
    pub path_length: f64,
    pub episode_id: String,
    pub instr_embedding: EmbeddingVector,
}

/// The first wrong decision of a failed episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureExperience {
    pub instruction: String,
    /// Viewpoint at which the wrong decision was made.
    pub decision_viewpoint: String,
    /// The backend's stated reasoning for that decision, verbatim.
    pub rationale: String,
    pub failure_type: FailureType,
    /// Panoramic image reference of the decision viewpoint (may be empty).
    pub image_ref: String,
    pub episode_id: String,
    pub instr_embedding: EmbeddingVector,
}

/// Fixed per-viewpoint description used by the scene-description ablation
/// in place of learned experiences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub description: String,
    pub text_embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Experience {
    Success(SuccessExperience),
    Failure(FailureExperience),
    SceneDescription(SceneDescription),
}

impl Experience {
    /// Embedding compared against the current instruction when picking an
    /// experience inside a unit.
    pub fn context_embedding(&self) -> &EmbeddingVector {
        match self {
            Experience::Success(e) => &e.instr_embedding,
            Experience::Failure(e) => &e.instr_embedding,
            Experience::SceneDescription(e) => &e.text_embedding,
        }
    }

    pub fn episode_id(&self) -> &str {
        match self {
            Experience::Success(e) => &e.episode_id,
            Experience::Failure(e) => &e.episode_id,
            Experience::SceneDescription(_) => "",
        }
    }
}

/// One viewpoint's slice of the memory.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryUnit {
    pub viewpoint_id: String,
    pub image_ref: String,
    pub landmarks: Vec<String>,
    pub experiences: Vec<Experience>,
    /// Unique id linking this unit to its index entry, if it has one.
    pub index_id: u64,
}

/// Exact flat cosine index: entries scanned in index-id order, so equal
/// scores resolve to the lowest index id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VectorIndex {
    entries: Vec<(u64, EmbeddingVector)>,
}

impl VectorIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u64, EmbeddingVector)] {
        &self.entries
    }

    fn push(&mut self, index_id: u64, vector: EmbeddingVector) {
        debug_assert!(self.entries.iter().all(|(id, _)| *id != index_id));
        self.entries.push((index_id, vector));
        self.entries.sort_by_key(|(id, _)| *id);
    }

    /// Exhaustive top-1 scan. Returns `(index_id, score)`.
    pub fn search_top1(&self, query: &EmbeddingVector) -> Option<(u64, f64)> {
        let mut best: Option<(u64, f64)> = None;
        for (id, vector) in &self.entries {
            let score = cosine_sim_or(query, vector, f64::NEG_INFINITY);
            match best {
                Some((_, b)) if score <= b => {}
                _ => best = Some((*id, score)),
            }
        }
        best
    }
}

/// What happened to an experience offered to the memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertOutcome {
    /// Stored as a new entry.
    Inserted,
    /// Replaced a less efficient similar route.
    Replaced,
    /// A similar route at least as efficient already exists.
    Discarded,
    /// Duplicate failure, dropped.
    Ignored,
}

impl std::fmt::Display for InsertOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InsertOutcome::Inserted => "inserted",
            InsertOutcome::Replaced => "replaced",
            InsertOutcome::Discarded => "discarded",
            InsertOutcome::Ignored => "ignored",
        })
    }
}

/// Verdict of the success filter against one unit's existing experiences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Discard,
    /// Replace the experience at this position.
    Replace(usize),
    Insert,
}

/// Success filter: a new route is "similar" to a stored one when both end at
/// the same goal viewpoint and their instruction embeddings agree at or
/// above the threshold. A similar stored route that is at least as short
/// wins; a longer one is replaced.
pub fn filter_success(
    existing: &[Experience],
    new: &SuccessExperience,
    similarity_threshold: f64,
) -> FilterDecision {
    let new_goal = new.trajectory.last();
    let mut replace_at = None;
    for (i, exp) in existing.iter().enumerate() {
        let Experience::Success(old) = exp else {
            continue;
        };
        if old.trajectory.last() != new_goal {
            continue;
        }
        let sim = cosine_sim_or(&old.instr_embedding, &new.instr_embedding, -1.0);
        if sim < similarity_threshold {
            continue;
        }
        if old.path_length <= new.path_length {
            return FilterDecision::Discard;
        }
        if replace_at.is_none() {
            replace_at = Some(i);
        }
    }
    match replace_at {
        Some(i) => FilterDecision::Replace(i),
        None => FilterDecision::Insert,
    }
}

/// Lowercase with runs of whitespace collapsed, for exact-duplicate checks.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// A retrieval result: the winning unit and the experience chosen inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalHit {
    pub viewpoint_id: String,
    pub index_id: u64,
    /// Cosine between the query and the unit's index embedding.
    pub score: f64,
    pub experience: Experience,
}

/// The whole store: units, index, and the linking tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceMemory {
    dimension: usize,
    similarity_threshold: f64,
    units: Vec<MemoryUnit>,
    index: VectorIndex,
    by_viewpoint: BTreeMap<String, usize>,
}

impl ExperienceMemory {
    pub fn new(dimension: usize) -> Self {
        ExperienceMemory {
            dimension,
            similarity_threshold: DEFAULT_SIMILARITY_THRESHOLD,
            units: Vec::new(),
            index: VectorIndex::default(),
            by_viewpoint: BTreeMap::new(),
        }
    }

    pub fn with_similarity_threshold(mut self, threshold: f64) -> Self {
        self.similarity_threshold = threshold;
        self
    }

    /// One unit per viewpoint of the graph (in id order), indexed by its
    /// hybrid embedding. Viewpoints with neither image nor landmarks get a
    /// unit but no index entry and stay unreachable by retrieval.
    pub fn build(
        graph: &EnvironmentGraph,
        embedder: &dyn Embedder,
    ) -> Result<Self, MemoryError> {
        let mut memory = ExperienceMemory::new(embedder.dimension());
        for vp in graph.viewpoints() {
            let embedding = match hybrid_embed(&vp.image_ref, &vp.landmarks, embedder) {
                Ok(v) if !v.is_zero() => Some(v),
                _ => None,
            };
            memory.add_unit(&vp.id, &vp.image_ref, &vp.landmarks, embedding)?;
        }
        Ok(memory)
    }

    /// Appends a unit, assigning the next index id. The embedding, when
    /// present, becomes the unit's index entry.
    pub fn add_unit(
        &mut self,
        viewpoint_id: &str,
        image_ref: &str,
        landmarks: &[String],
        embedding: Option<EmbeddingVector>,
    ) -> Result<u64, MemoryError> {
        if self.by_viewpoint.contains_key(viewpoint_id) {
            return Err(MemoryError::DuplicateViewpoint(viewpoint_id.to_string()));
        }
        let index_id = self.units.len() as u64;
        if let Some(vector) = embedding {
            self.index.push(index_id, vector);
        }
        self.by_viewpoint
            .insert(viewpoint_id.to_string(), self.units.len());
        self.units.push(MemoryUnit {
            viewpoint_id: viewpoint_id.to_string(),
            image_ref: image_ref.to_string(),
            landmarks: landmarks.to_vec(),
            experiences: Vec::new(),
            index_id,
        });
        Ok(index_id)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn similarity_threshold(&self) -> f64 {
        self.similarity_threshold
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn units(&self) -> &[MemoryUnit] {
        &self.units
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn unit(&self, viewpoint_id: &str) -> Option<&MemoryUnit> {
        self.by_viewpoint
            .get(viewpoint_id)
            .map(|&i| &self.units[i])
    }

    pub fn unit_by_index_id(&self, index_id: u64) -> Option<&MemoryUnit> {
        self.units.iter().find(|u| u.index_id == index_id)
    }

    /// Top-1 retrieval: the unit whose index embedding is most cosine-similar
    /// to `observation`, then one experience inside it.
    ///
    /// Returns nothing when the index is empty, the best score is below
    /// `threshold`, or the winning unit holds no experiences. Inside the
    /// winning unit, failures anchored at the current viewpoint come first,
    /// then the experience whose context embedding best matches the
    /// instruction, then the most recently stored.
    pub fn retrieve(
        &self,
        observation: &EmbeddingVector,
        instr_embedding: &EmbeddingVector,
        current_viewpoint: &str,
        threshold: f64,
    ) -> Option<RetrievalHit> {
        if observation.is_zero() {
            return None;
        }
        let (index_id, score) = self.index.search_top1(observation)?;
        if score < threshold {
            return None;
        }
        let unit = self.unit_by_index_id(index_id)?;
        let experience = select_experience(&unit.experiences, instr_embedding, current_viewpoint)?;
        Some(RetrievalHit {
            viewpoint_id: unit.viewpoint_id.clone(),
            index_id,
            score,
            experience: experience.clone(),
        })
    }

    /// Inserts a successful route into every unit along its trajectory,
    /// applying the success filter per unit. Fails without mutating anything
    /// if any trajectory viewpoint has no unit.
    pub fn insert_success(
        &mut self,
        experience: SuccessExperience,
    ) -> Result<Vec<(String, InsertOutcome)>, MemoryError> {
        for id in &experience.trajectory {
            if !self.by_viewpoint.contains_key(id) {
                return Err(MemoryError::UnknownViewpoint(id.clone()));
            }
        }
        let mut outcomes = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for id in &experience.trajectory {
            if !seen.insert(id.clone()) {
                continue;
            }
            let unit = &mut self.units[self.by_viewpoint[id]];
            let outcome =
                match filter_success(&unit.experiences, &experience, self.similarity_threshold) {
                    FilterDecision::Discard => InsertOutcome::Discarded,
                    FilterDecision::Replace(i) => {
                        unit.experiences[i] = Experience::Success(experience.clone());
                        InsertOutcome::Replaced
                    }
                    FilterDecision::Insert => {
                        unit.experiences
                            .push(Experience::Success(experience.clone()));
                        InsertOutcome::Inserted
                    }
                };
            outcomes.push((id.clone(), outcome));
        }
        Ok(outcomes)
    }

    /// Inserts a failure into its decision viewpoint's unit unless an
    /// equivalent one is already stored: same failure type and either the
    /// identical normalized rationale or a rationale embedding at or above
    /// the similarity threshold.
    pub fn insert_failure(
        &mut self,
        experience: FailureExperience,
        embedder: &dyn Embedder,
    ) -> Result<InsertOutcome, MemoryError> {
        let unit_pos = *self
            .by_viewpoint
            .get(&experience.decision_viewpoint)
            .ok_or_else(|| {
                MemoryError::UnknownViewpoint(experience.decision_viewpoint.clone())
            })?;
        let new_norm = normalize_text(&experience.rationale);
        let new_embedding = embedder.embed_text(&experience.rationale)?;
        for stored in &self.units[unit_pos].experiences {
            let Experience::Failure(old) = stored else {
                continue;
            };
            if old.failure_type != experience.failure_type {
                continue;
            }
            if normalize_text(&old.rationale) == new_norm {
                return Ok(InsertOutcome::Ignored);
            }
            let old_embedding = embedder.embed_text(&old.rationale)?;
            if cosine_sim_or(&old_embedding, &new_embedding, -1.0) >= self.similarity_threshold {
                return Ok(InsertOutcome::Ignored);
            }
        }
        self.units[unit_pos]
            .experiences
            .push(Experience::Failure(experience));
        Ok(InsertOutcome::Inserted)
    }

    /// Seeds a unit with a fixed scene description (ablation mode).
    pub fn insert_scene_description(
        &mut self,
        viewpoint_id: &str,
        description: String,
        embedder: &dyn Embedder,
    ) -> Result<(), MemoryError> {
        let unit_pos = *self
            .by_viewpoint
            .get(viewpoint_id)
            .ok_or_else(|| MemoryError::UnknownViewpoint(viewpoint_id.to_string()))?;
        let text_embedding = embedder.embed_text(&description)?;
        self.units[unit_pos]
            .experiences
            .push(Experience::SceneDescription(SceneDescription {
                description,
                text_embedding,
            }));
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        let err = |reason: String| MemoryError::File {
            path: path.display().to_string(),
            reason,
        };
        let embeddings: BTreeMap<u64, &EmbeddingVector> = self
            .index
            .entries()
            .iter()
            .map(|(id, v)| (*id, v))
            .collect();
        let file = MemoryFile {
            version: 1,
            dimension: self.dimension,
            similarity_threshold: self.similarity_threshold,
            units: self
                .units
                .iter()
                .map(|u| UnitRecord {
                    viewpoint_id: u.viewpoint_id.clone(),
                    image_ref: u.image_ref.clone(),
                    landmarks: u.landmarks.clone(),
                    index_id: u.index_id,
                    embedding: embeddings.get(&u.index_id).map(|v| (*v).clone()),
                    experiences: u.experiences.clone(),
                })
                .collect(),
        };
        let body = serde_json::to_string_pretty(&file).map_err(|e| err(e.to_string()))?;
        std::fs::write(path, body + "\n").map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let err = |reason: String| MemoryError::File {
            path: path.display().to_string(),
            reason,
        };
        let raw = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let file: MemoryFile = serde_json::from_str(&raw).map_err(|e| err(e.to_string()))?;
        if file.version != 1 {
            return Err(err(format!("unsupported version {}", file.version)));
        }
        let mut memory =
            ExperienceMemory::new(file.dimension).with_similarity_threshold(file.similarity_threshold);
        for (pos, record) in file.units.into_iter().enumerate() {
            if memory.by_viewpoint.contains_key(&record.viewpoint_id) {
                return Err(err(format!(
                    "unit {pos}: duplicate viewpoint '{}'",
                    record.viewpoint_id
                )));
            }
            if record.index_id != pos as u64 {
                return Err(err(format!(
                    "unit {pos}: index_id {} out of order",
                    record.index_id
                )));
            }
            if let Some(vector) = &record.embedding {
                if vector.dimension() != file.dimension {
                    return Err(err(format!(
                        "unit {pos}: embedding dimension {} != {}",
                        vector.dimension(),
                        file.dimension
                    )));
                }
                let norm = vector.norm();
                if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                    return Err(err(format!(
                        "unit {pos}: embedding norm {norm} is not unit length"
                    )));
                }
            }
            for (i, exp) in record.experiences.iter().enumerate() {
                let v = exp.context_embedding();
                let norm = v.norm();
                let ok = v.is_zero() || (norm.is_finite() && (norm - 1.0).abs() <= 1e-6);
                if !ok {
                    return Err(err(format!(
                        "unit {pos}: experience {i} embedding norm {norm} is not unit length"
                    )));
                }
            }
            if let Some(vector) = record.embedding {
                memory.index.push(record.index_id, vector);
            }
            memory
                .by_viewpoint
                .insert(record.viewpoint_id.clone(), memory.units.len());
            memory.units.push(MemoryUnit {
                viewpoint_id: record.viewpoint_id,
                image_ref: record.image_ref,
                landmarks: record.landmarks,
                experiences: record.experiences,
                index_id: record.index_id,
            });
        }
        Ok(memory)
    }
}

/// Experience choice inside the winning unit.
fn select_experience<'a>(
    experiences: &'a [Experience],
    instr_embedding: &EmbeddingVector,
    current_viewpoint: &str,
) -> Option<&'a Experience> {
    let anchored: Vec<&Experience> = experiences
        .iter()
        .filter(|e| {
            matches!(e, Experience::Failure(f) if f.decision_viewpoint == current_viewpoint)
        })
        .collect();
    let pool: Vec<&Experience> = if anchored.is_empty() {
        experiences.iter().collect()
    } else {
        anchored
    };
    // Later entries are more recent; >= keeps the last of equal scores.
    let mut best: Option<(&Experience, f64)> = None;
    for exp in pool {
        let sim = cosine_sim_or(exp.context_embedding(), instr_embedding, f64::NEG_INFINITY);
        match best {
            Some((_, b)) if sim < b => {}
            _ => best = Some((exp, sim)),
        }
    }
    best.map(|(e, _)| e)
}

#[derive(Serialize, Deserialize)]
struct MemoryFile {
    version: u32,
    dimension: usize,
    similarity_threshold: f64,
    units: Vec<UnitRecord>,
}

#[derive(Serialize, Deserialize)]
struct UnitRecord {
    viewpoint_id: String,
    image_ref: String,
    landmarks: Vec<String>,
    index_id: u64,
    embedding: Option<EmbeddingVector>,
    experiences: Vec<Experience>,
}
