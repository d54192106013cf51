//! Graph-world navigation substrate: viewpoints, edges, episodes, geodesic
//! distances, and the four standard metrics (NE, SR, OSR, SPL).
//!
//! Environments and episodes are immutable after load and safe to share
//! across any number of episode runners.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Success radius in meters used by scoring and reflection.
pub const DEFAULT_SUCCESS_RADIUS: f64 = 3.0;

/// Edge lengths may deviate from the endpoint Euclidean distance by at most
/// this fraction.
const EDGE_LENGTH_TOLERANCE: f64 = 0.10;

pub type Position = [f64; 3];

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown viewpoint id '{0}'")]
    UnknownViewpoint(String),
    #[error("duplicate viewpoint id '{0}'")]
    DuplicateViewpoint(String),
    #[error("edge {a} -- {b}: {reason}")]
    InvalidEdge { a: String, b: String, reason: String },
    #[error("viewpoint '{id}': non-finite position")]
    NonFinitePosition { id: String },
    #[error("episode '{id}': {reason}")]
    InvalidEpisode { id: String, reason: String },
    #[error("trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("{path}: {reason}")]
    File { path: String, reason: String },
}

/// A navigable node: position, landmark tokens and an opaque reference to a
/// panoramic image asset (may be empty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub id: String,
    pub position: Position,
    #[serde(default)]
    pub landmarks: Vec<String>,
    #[serde(default)]
    pub image_ref: String,
}

pub fn euclidean(a: Position, b: Position) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// An undirected graph of viewpoints with metric edge lengths.
#[derive(Debug, Clone)]
pub struct EnvironmentGraph {
    viewpoints: BTreeMap<String, Viewpoint>,
    /// Adjacency sorted by neighbor id for deterministic candidate order.
    adjacency: BTreeMap<String, Vec<(String, f64)>>,
    edge_count: usize,
}

#[derive(Serialize, Deserialize)]
struct EdgeRecord {
    from: String,
    to: String,
    length: f64,
}

#[derive(Serialize, Deserialize)]
struct EnvironmentFile {
    version: u32,
    viewpoints: Vec<Viewpoint>,
    edges: Vec<EdgeRecord>,
}

impl EnvironmentGraph {
    /// Validates and assembles a graph. Edges must reference existing ids,
    /// have positive length, and stay within 10% of the endpoint Euclidean
    /// distance.
    pub fn new(
        viewpoints: Vec<Viewpoint>,
        edges: Vec<(String, String, f64)>,
    ) -> Result<Self, EnvError> {
        let mut map = BTreeMap::new();
        for vp in viewpoints {
            if vp.position.iter().any(|c| !c.is_finite()) {
                return Err(EnvError::NonFinitePosition { id: vp.id });
            }
            if map.insert(vp.id.clone(), vp.clone()).is_some() {
                return Err(EnvError::DuplicateViewpoint(vp.id));
            }
        }
        let mut adjacency: BTreeMap<String, Vec<(String, f64)>> =
            map.keys().map(|id| (id.clone(), Vec::new())).collect();
        let mut seen = std::collections::BTreeSet::new();
        let edge_count = edges.len();
        for (a, b, length) in edges {
            let invalid = |reason: String| EnvError::InvalidEdge {
                a: a.clone(),
                b: b.clone(),
                reason,
            };
            let pa = map
                .get(&a)
                .ok_or_else(|| EnvError::UnknownViewpoint(a.clone()))?
                .position;
            let pb = map
                .get(&b)
                .ok_or_else(|| EnvError::UnknownViewpoint(b.clone()))?
                .position;
            if !(length > 0.0 && length.is_finite()) {
                return Err(invalid(format!("non-positive length {length}")));
            }
            let euclid = euclidean(pa, pb);
            if (length - euclid).abs() > EDGE_LENGTH_TOLERANCE * euclid {
                return Err(invalid(format!(
                    "length {length} deviates more than 10% from Euclidean {euclid:.4}"
                )));
            }
            let key = if a <= b {
                (a.clone(), b.clone())
            } else {
                (b.clone(), a.clone())
            };
            if !seen.insert(key) {
                return Err(invalid("duplicate edge".into()));
            }
            adjacency.get_mut(&a).unwrap().push((b.clone(), length));
            adjacency.get_mut(&b).unwrap().push((a.clone(), length));
        }
        for neighbors in adjacency.values_mut() {
            neighbors.sort_by(|x, y| x.0.cmp(&y.0));
        }
        Ok(EnvironmentGraph {
            viewpoints: map,
            adjacency,
            edge_count,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let err = |reason: String| EnvError::File {
            path: path.display().to_string(),
            reason,
        };
        let raw = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let file: EnvironmentFile = serde_json::from_str(&raw).map_err(|e| err(e.to_string()))?;
        if file.version != 1 {
            return Err(err(format!("unsupported version {}", file.version)));
        }
        Self::new(
            file.viewpoints,
            file.edges
                .into_iter()
                .map(|e| (e.from, e.to, e.length))
                .collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        let err = |reason: String| EnvError::File {
            path: path.display().to_string(),
            reason,
        };
        let mut edges = Vec::new();
        for (id, neighbors) in &self.adjacency {
            for (other, length) in neighbors {
                if id < other {
                    edges.push(EdgeRecord {
                        from: id.clone(),
                        to: other.clone(),
                        length: *length,
                    });
                }
            }
        }
        let file = EnvironmentFile {
            version: 1,
            viewpoints: self.viewpoints.values().cloned().collect(),
            edges,
        };
        let body = serde_json::to_string_pretty(&file).map_err(|e| err(e.to_string()))?;
        std::fs::write(path, body + "\n").map_err(|e| err(e.to_string()))
    }

    pub fn viewpoint(&self, id: &str) -> Result<&Viewpoint, EnvError> {
        self.viewpoints
            .get(id)
            .ok_or_else(|| EnvError::UnknownViewpoint(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.viewpoints.contains_key(id)
    }

    pub fn viewpoints(&self) -> impl Iterator<Item = &Viewpoint> {
        self.viewpoints.values()
    }

    pub fn len(&self) -> usize {
        self.viewpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.viewpoints.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Neighbors of `id` sorted by id.
    pub fn neighbors(&self, id: &str) -> Result<&[(String, f64)], EnvError> {
        self.adjacency
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| EnvError::UnknownViewpoint(id.to_string()))
    }

    pub fn edge_length(&self, a: &str, b: &str) -> Option<f64> {
        self.adjacency
            .get(a)?
            .iter()
            .find(|(n, _)| n == b)
            .map(|(_, l)| *l)
    }

    /// Shortest-path distance over edge lengths. Zero for `a == b`, infinity
    /// when the two viewpoints are in different components.
    pub fn geodesic_distance(&self, a: &str, b: &str) -> Result<f64, EnvError> {
        if !self.contains(a) {
            return Err(EnvError::UnknownViewpoint(a.to_string()));
        }
        if !self.contains(b) {
            return Err(EnvError::UnknownViewpoint(b.to_string()));
        }
        if a == b {
            return Ok(0.0);
        }

        #[derive(PartialEq)]
        struct Entry(f64, String);
        impl Eq for Entry {}
        impl Ord for Entry {
            fn cmp(&self, other: &Self) -> Ordering {
                // Min-heap on distance; ties on id keep the order total.
                other
                    .0
                    .partial_cmp(&self.0)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| other.1.cmp(&self.1))
            }
        }
        impl PartialOrd for Entry {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }

        let mut dist: BTreeMap<&str, f64> = BTreeMap::new();
        let mut heap = BinaryHeap::new();
        dist.insert(a, 0.0);
        heap.push(Entry(0.0, a.to_string()));
        while let Some(Entry(d, id)) = heap.pop() {
            if id == b {
                return Ok(d);
            }
            if d > *dist.get(id.as_str()).unwrap_or(&f64::INFINITY) {
                continue;
            }
            for (next, length) in &self.adjacency[&id] {
                let nd = d + length;
                if nd < *dist.get(next.as_str()).unwrap_or(&f64::INFINITY) {
                    dist.insert(self.key(next), nd);
                    heap.push(Entry(nd, next.clone()));
                }
            }
        }
        Ok(f64::INFINITY)
    }

    /// Borrows the canonical key so the distance map does not clone ids.
    fn key(&self, id: &str) -> &str {
        self.viewpoints
            .get_key_value(id)
            .map(|(k, _)| k.as_str())
            .expect("id validated")
    }

    /// Total length of a walk; errors on any non-edge transition.
    pub fn walk_length(&self, walk: &[String]) -> Result<f64, EnvError> {
        let mut total = 0.0;
        for pair in walk.windows(2) {
            for id in pair {
                if !self.contains(id) {
                    return Err(EnvError::UnknownViewpoint(id.clone()));
                }
            }
            total += self.edge_length(&pair[0], &pair[1]).ok_or_else(|| {
                EnvError::InvalidTrajectory(format!("no edge between {} and {}", pair[0], pair[1]))
            })?;
        }
        Ok(total)
    }
}

/// One navigation task: an instruction, endpoints, and the annotated
/// reference path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub instruction: String,
    pub start_id: String,
    pub goal_id: String,
    pub reference_path: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeFile {
    version: u32,
    episodes: Vec<Episode>,
}

impl Episode {
    /// Fails fast on malformed or disconnected episodes.
    pub fn validate(&self, graph: &EnvironmentGraph) -> Result<(), EnvError> {
        let invalid = |reason: String| EnvError::InvalidEpisode {
            id: self.id.clone(),
            reason,
        };
        graph.viewpoint(&self.start_id)?;
        graph.viewpoint(&self.goal_id)?;
        if self.reference_path.first() != Some(&self.start_id) {
            return Err(invalid("reference path does not begin at start".into()));
        }
        if self.reference_path.last() != Some(&self.goal_id) {
            return Err(invalid("reference path does not end at goal".into()));
        }
        for pair in self.reference_path.windows(2) {
            if graph.edge_length(&pair[0], &pair[1]).is_none() {
                return Err(invalid(format!(
                    "reference step {} -> {} is not an edge",
                    pair[0], pair[1]
                )));
            }
        }
        if !graph
            .geodesic_distance(&self.start_id, &self.goal_id)?
            .is_finite()
        {
            return Err(invalid("start and goal are disconnected".into()));
        }
        Ok(())
    }
}

/// Loads and validates an episode file against a graph.
pub fn load_episodes(path: &Path, graph: &EnvironmentGraph) -> Result<Vec<Episode>, EnvError> {
    let err = |reason: String| EnvError::File {
        path: path.display().to_string(),
        reason,
    };
    let raw = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let file: EpisodeFile = serde_json::from_str(&raw).map_err(|e| err(e.to_string()))?;
    if file.version != 1 {
        return Err(err(format!("unsupported version {}", file.version)));
    }
    for episode in &file.episodes {
        episode.validate(graph)?;
    }
    Ok(file.episodes)
}

pub fn save_episodes(path: &Path, episodes: &[Episode]) -> Result<(), EnvError> {
    let err = |reason: String| EnvError::File {
        path: path.display().to_string(),
        reason,
    };
    let file = EpisodeFile {
        version: 1,
        episodes: episodes.to_vec(),
    };
    let body = serde_json::to_string_pretty(&file).map_err(|e| err(e.to_string()))?;
    std::fs::write(path, body + "\n").map_err(|e| err(e.to_string()))
}

/// The four standard metrics for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    /// Euclidean distance from the final position to the goal, meters.
    pub ne: f64,
    /// Stopped within the success radius.
    pub success: bool,
    /// Any visited viewpoint came within the success radius.
    pub oracle_success: bool,
    /// Success weighted by path length, in [0, 1].
    pub spl: f64,
}

/// Scores a visited-viewpoint walk against an episode.
///
/// Success requires an explicit stop inside the radius; running out of steps
/// inside the radius only counts toward oracle success. SPL is
/// `L / max(P, L)` on success (L the start-goal geodesic, P the traversed
/// length) and 0 otherwise.
pub fn score_episode(
    graph: &EnvironmentGraph,
    episode: &Episode,
    walk: &[String],
    stopped: bool,
    radius: f64,
) -> Result<MetricSet, EnvError> {
    if walk.is_empty() {
        return Err(EnvError::InvalidTrajectory("empty trajectory".into()));
    }
    if walk[0] != episode.start_id {
        return Err(EnvError::InvalidTrajectory(format!(
            "trajectory starts at {} instead of {}",
            walk[0], episode.start_id
        )));
    }
    let goal = graph.viewpoint(&episode.goal_id)?.position;
    let traversed = graph.walk_length(walk)?;

    let final_pos = graph.viewpoint(walk.last().unwrap())?.position;
    let ne = euclidean(final_pos, goal);
    let success = stopped && ne <= radius;
    let mut oracle_success = false;
    for id in walk {
        if euclidean(graph.viewpoint(id)?.position, goal) <= radius {
            oracle_success = true;
            break;
        }
    }

    let spl = if success {
        let geodesic = graph.geodesic_distance(&episode.start_id, &episode.goal_id)?;
        if !geodesic.is_finite() {
            return Err(EnvError::InvalidEpisode {
                id: episode.id.clone(),
                reason: "start and goal are disconnected".into(),
            });
        }
        if geodesic == 0.0 && traversed == 0.0 {
            1.0
        } else {
            geodesic / traversed.max(geodesic)
        }
    } else {
        0.0
    };

    Ok(MetricSet {
        ne,
        success,
        oracle_success,
        spl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vp(id: &str, x: f64, y: f64) -> Viewpoint {
        Viewpoint {
            id: id.to_string(),
            position: [x, y, 0.0],
            landmarks: vec![],
            image_ref: String::new(),
        }
    }

    fn edge(a: &str, b: &str, l: f64) -> (String, String, f64) {
        (a.to_string(), b.to_string(), l)
    }

    fn line_graph() -> EnvironmentGraph {
        EnvironmentGraph::new(
            vec![vp("a", 0.0, 0.0), vp("b", 4.0, 0.0), vp("c", 8.0, 0.0)],
            vec![edge("a", "b", 4.0), edge("b", "c", 4.0)],
        )
        .unwrap()
    }

    fn line_episode() -> Episode {
        Episode {
            id: "ep".into(),
            instruction: "walk to the end".into(),
            start_id: "a".into(),
            goal_id: "c".into(),
            reference_path: vec!["a".into(), "b".into(), "c".into()],
        }
    }

    #[test]
    fn geodesic_identity_is_zero() {
        let g = line_graph();
        assert_eq!(g.geodesic_distance("a", "a").unwrap(), 0.0);
    }

    #[test]
    fn geodesic_single_edge() {
        let g = EnvironmentGraph::new(
            vec![vp("a", 0.0, 0.0), vp("b", 4.0, 0.0)],
            vec![edge("a", "b", 4.0)],
        )
        .unwrap();
        assert_eq!(g.geodesic_distance("a", "b").unwrap(), 4.0);
    }

    // Cycle with lengths 1,1,1,5: the short way around wins.
    // Frozen against exhaustive path enumeration (see enumerate_paths below).
    #[test]
    fn geodesic_prefers_short_side_of_cycle() {
        let g = EnvironmentGraph::new(
            vec![
                vp("a", 0.0, 0.0),
                vp("b", 1.0, 0.0),
                vp("c", 1.0, 1.0),
                vp("d", 0.0, 5.0),
            ],
            vec![
                edge("a", "b", 1.0),
                edge("b", "c", 1.0),
                edge("c", "d", (1.0f64 + 16.0).sqrt()),
                edge("d", "a", 5.0),
            ],
        )
        .unwrap();
        // Oracle: enumerate every simple path a -> c and take the minimum.
        fn enumerate_paths(
            g: &EnvironmentGraph,
            at: &str,
            goal: &str,
            visited: &mut Vec<String>,
            length: f64,
            best: &mut f64,
        ) {
            if at == goal {
                *best = best.min(length);
                return;
            }
            for (next, l) in g.neighbors(at).unwrap() {
                if !visited.iter().any(|v| v == next) {
                    visited.push(next.clone());
                    enumerate_paths(g, next, goal, visited, length + l, best);
                    visited.pop();
                }
            }
        }
        let mut best = f64::INFINITY;
        enumerate_paths(&g, "a", "c", &mut vec!["a".into()], 0.0, &mut best);
        assert_eq!(best, 2.0);
        assert_eq!(g.geodesic_distance("a", "c").unwrap(), 2.0);
    }

    #[test]
    fn geodesic_is_symmetric_and_infinite_when_disconnected() {
        let g = EnvironmentGraph::new(
            vec![vp("a", 0.0, 0.0), vp("b", 4.0, 0.0), vp("x", 100.0, 0.0)],
            vec![edge("a", "b", 4.0)],
        )
        .unwrap();
        assert_eq!(
            g.geodesic_distance("a", "b").unwrap(),
            g.geodesic_distance("b", "a").unwrap()
        );
        assert!(g.geodesic_distance("a", "x").unwrap().is_infinite());
    }

    #[test]
    fn geodesic_rejects_unknown_id() {
        let g = line_graph();
        assert!(matches!(
            g.geodesic_distance("a", "nope"),
            Err(EnvError::UnknownViewpoint(_))
        ));
    }

    #[test]
    fn edges_must_match_euclidean_within_tolerance() {
        let result = EnvironmentGraph::new(
            vec![vp("a", 0.0, 0.0), vp("b", 4.0, 0.0)],
            vec![edge("a", "b", 5.0)],
        );
        assert!(matches!(result, Err(EnvError::InvalidEdge { .. })));
    }

    #[test]
    fn duplicate_edges_are_rejected() {
        let result = EnvironmentGraph::new(
            vec![vp("a", 0.0, 0.0), vp("b", 4.0, 0.0)],
            vec![edge("a", "b", 4.0), edge("b", "a", 4.0)],
        );
        assert!(matches!(result, Err(EnvError::InvalidEdge { .. })));
    }

    #[test]
    fn optimal_stopped_walk_scores_spl_one() {
        let g = line_graph();
        let ep = line_episode();
        let m = score_episode(&g, &ep, &ep.reference_path, true, 3.0).unwrap();
        assert_eq!(m.ne, 0.0);
        assert!(m.success);
        assert!(m.oracle_success);
        assert_eq!(m.spl, 1.0);
    }

    #[test]
    fn stopping_at_start_far_from_goal_fails() {
        let g = line_graph();
        let ep = line_episode();
        let m = score_episode(&g, &ep, &["a".to_string()], true, 3.0).unwrap();
        assert_eq!(m.ne, 8.0);
        assert!(!m.success);
        assert!(!m.oracle_success);
        assert_eq!(m.spl, 0.0);
    }

    // Doubling back once doubles the traversed length: SPL 0.5 by hand,
    // L = 8 and P = 16.
    #[test]
    fn double_length_detour_scores_spl_half() {
        let g = line_graph();
        let ep = line_episode();
        let walk: Vec<String> = ["a", "b", "a", "b", "c"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let m = score_episode(&g, &ep, &walk, true, 3.0).unwrap();
        assert!(m.success);
        assert!((m.spl - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn budget_exhaustion_at_goal_is_oracle_only() {
        let g = line_graph();
        let ep = line_episode();
        let m = score_episode(&g, &ep, &ep.reference_path, false, 3.0).unwrap();
        assert!(!m.success);
        assert!(m.oracle_success);
        assert_eq!(m.spl, 0.0);
    }

    #[test]
    fn non_edge_transition_is_an_error() {
        let g = line_graph();
        let ep = line_episode();
        let walk: Vec<String> = ["a", "c"].iter().map(|s| s.to_string()).collect();
        assert!(matches!(
            score_episode(&g, &ep, &walk, true, 3.0),
            Err(EnvError::InvalidTrajectory(_))
        ));
    }

    #[test]
    fn episode_validation_catches_bad_reference_and_disconnection() {
        let g = EnvironmentGraph::new(
            vec![vp("a", 0.0, 0.0), vp("b", 4.0, 0.0), vp("x", 90.0, 0.0)],
            vec![edge("a", "b", 4.0)],
        )
        .unwrap();
        let mut ep = Episode {
            id: "bad".into(),
            instruction: "go".into(),
            start_id: "a".into(),
            goal_id: "x".into(),
            reference_path: vec!["a".into(), "x".into()],
        };
        assert!(ep.validate(&g).is_err());
        ep.goal_id = "b".into();
        ep.reference_path = vec!["a".into(), "b".into()];
        assert!(ep.validate(&g).is_ok());
    }

    #[test]
    fn environment_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("env.json");
        let g = line_graph();
        g.save(&path).unwrap();
        let loaded = EnvironmentGraph::load(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.edge_length("a", "b"), Some(4.0));
        assert_eq!(
            loaded.neighbors("b").unwrap(),
            g.neighbors("b").unwrap()
        );
    }

    #[test]
    fn environment_file_version_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("env.json");
        std::fs::write(&path, r#"{"version":2,"viewpoints":[],"edges":[]}"#).unwrap();
        assert!(EnvironmentGraph::load(&path).is_err());
    }
}
