//! Post-episode evaluation: success/failure classification over trajectory
//! geometry, the MRD / FGR / PGC taxonomy with first-wrong-step extraction,
//! and the resulting memory updates.
//!
//! `classify` and `make_update` are pure; `reflect_and_commit` needs
//! exclusive access to the memory (single-writer contract).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{Embedder, EmbeddingError};
use crate::env::{euclidean, EnvError, EnvironmentGraph, Episode};
use crate::memory::{
    ExperienceMemory, FailureExperience, FailureType, InsertOutcome, MemoryError,
    SuccessExperience,
};
use crate::ragp::{EpisodeResult, StepKind};

#[derive(Debug, Error)]
pub enum ReflectionError {
    #[error("episode has no decisions to classify")]
    NoDecisions,
    #[error("malformed trajectory: {0}")]
    MalformedTrajectory(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Verdict for one episode. `first_wrong_step` indexes the episode's
/// decision history: a Move for MRD and PGC, the Stop for FGR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum ReflectionOutcome {
    Success,
    Failure {
        failure_type: FailureType,
        first_wrong_step: usize,
    },
}

/// The single memory update an episode produces.
#[derive(Debug, Clone, PartialEq)]
pub enum MemoryUpdate {
    Success(SuccessExperience),
    Failure(FailureExperience),
}

/// Assigns exactly one of Success, MRD, FGR, PGC.
///
/// Success means a stop inside the radius. Failures are ordered
/// PGC > MRD > FGR: entering the goal radius and moving again is post-goal
/// continuation regardless of any earlier distance increase; otherwise the
/// first geodesic-distance increase marks a mid-route deviation; what
/// remains is a false goal recognition at the stop. When the step budget
/// ran out instead of a stop, the FGR case has no stop decision to blame
/// and degrades to MRD at the last move.
pub fn classify(
    graph: &EnvironmentGraph,
    episode: &Episode,
    result: &EpisodeResult,
    radius: f64,
) -> Result<ReflectionOutcome, ReflectionError> {
    let steps = &result.trajectory;
    if steps.is_empty() {
        return Err(ReflectionError::MalformedTrajectory("empty".into()));
    }
    if steps[0].kind != StepKind::Start || steps[0].viewpoint_id != episode.start_id {
        return Err(ReflectionError::MalformedTrajectory(format!(
            "trajectory does not begin with a start anchor at {}",
            episode.start_id
        )));
    }
    let history = &steps[1..];
    if history.is_empty() {
        return Err(ReflectionError::NoDecisions);
    }

    let goal_pos = graph.viewpoint(&episode.goal_id)?.position;
    let final_pos = graph.viewpoint(&steps.last().unwrap().viewpoint_id)?.position;
    if result.stopped && euclidean(final_pos, goal_pos) <= radius {
        return Ok(ReflectionOutcome::Success);
    }

    // Position after each trajectory entry (stops repeat the position).
    let mut euclid_to_goal = Vec::with_capacity(steps.len());
    for step in steps.iter() {
        let pos = graph.viewpoint(&step.viewpoint_id)?.position;
        euclid_to_goal.push(euclidean(pos, goal_pos));
    }
    let entered = euclid_to_goal.iter().position(|d| *d <= radius);

    if let Some(enter_at) = entered {
        // Decision j is taken at trajectory position j.
        if let Some(j) = (enter_at..history.len()).find(|&j| history[j].kind == StepKind::Move) {
            return Ok(ReflectionOutcome::Failure {
                failure_type: FailureType::Pgc,
                first_wrong_step: j,
            });
        }
    } else {
        let mut geodesic = Vec::with_capacity(steps.len());
        for step in steps.iter() {
            geodesic.push(graph.geodesic_distance(&step.viewpoint_id, &episode.goal_id)?);
        }
        for t in 1..steps.len() {
            if steps[t].kind == StepKind::Move && geodesic[t] > geodesic[t - 1] {
                return Ok(ReflectionOutcome::Failure {
                    failure_type: FailureType::Mrd,
                    first_wrong_step: t - 1,
                });
            }
        }
    }

    if result.stopped {
        Ok(ReflectionOutcome::Failure {
            failure_type: FailureType::Fgr,
            first_wrong_step: history.len() - 1,
        })
    } else {
        // Budget exhaustion: no stop decision exists, blame the last move.
        let j = history
            .iter()
            .rposition(|s| s.kind == StepKind::Move)
            .expect("unstopped history contains only moves");
        Ok(ReflectionOutcome::Failure {
            failure_type: FailureType::Mrd,
            first_wrong_step: j,
        })
    }
}

/// Turns a verdict into the experience to store.
///
/// Successes cover the whole visited walk with its traversed length;
/// failures carry the viewpoint at which the wrong decision was made, that
/// decision's rationale verbatim, and the viewpoint's image reference.
/// A success whose walk never left the start has nothing worth storing and
/// yields `None`.
pub fn make_update(
    graph: &EnvironmentGraph,
    episode: &Episode,
    result: &EpisodeResult,
    outcome: ReflectionOutcome,
    embedder: &dyn Embedder,
) -> Result<Option<MemoryUpdate>, ReflectionError> {
    let instr_embedding = embedder.embed_text(&episode.instruction)?;
    match outcome {
        ReflectionOutcome::Success => {
            let walk = result.visited_ids();
            if walk.len() < 2 {
                return Ok(None);
            }
            let path_length = graph.walk_length(&walk)?;
            Ok(Some(MemoryUpdate::Success(SuccessExperience {
                instruction: episode.instruction.clone(),
                trajectory: walk,
                path_length,
                episode_id: episode.id.clone(),
                instr_embedding,
            })))
        }
        ReflectionOutcome::Failure {
            failure_type,
            first_wrong_step,
        } => {
            let history = result.history();
            if first_wrong_step >= history.len() {
                return Err(ReflectionError::MalformedTrajectory(format!(
                    "first wrong step {first_wrong_step} outside history of {}",
                    history.len()
                )));
            }
            // The decision at history index j was made standing at
            // trajectory position j.
            let decision_viewpoint = result.trajectory[first_wrong_step].viewpoint_id.clone();
            let image_ref = graph.viewpoint(&decision_viewpoint)?.image_ref.clone();
            Ok(Some(MemoryUpdate::Failure(FailureExperience {
                instruction: episode.instruction.clone(),
                decision_viewpoint,
                rationale: history[first_wrong_step].rationale.clone(),
                failure_type,
                image_ref,
                episode_id: episode.id.clone(),
                instr_embedding,
            })))
        }
    }
}

/// Classifies, builds the update, and commits it through the experience
/// filter. Returns the verdict and the per-unit insert outcomes.
pub fn reflect_and_commit(
    memory: &mut ExperienceMemory,
    graph: &EnvironmentGraph,
    episode: &Episode,
    result: &EpisodeResult,
    embedder: &dyn Embedder,
    radius: f64,
) -> Result<(ReflectionOutcome, Vec<(String, InsertOutcome)>), ReflectionError> {
    let outcome = classify(graph, episode, result, radius)?;
    let outcomes = match make_update(graph, episode, result, outcome, embedder)? {
        Some(MemoryUpdate::Success(exp)) => memory.insert_success(exp)?,
        Some(MemoryUpdate::Failure(exp)) => {
            let viewpoint = exp.decision_viewpoint.clone();
            vec![(viewpoint, memory.insert_failure(exp, embedder)?)]
        }
        None => Vec::new(),
    };
    Ok((outcome, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use crate::env::{MetricSet, Viewpoint};
    use crate::ragp::TrajectoryStep;

    fn graph_line(radius_sized: bool) -> EnvironmentGraph {
        // a - b - c - d with 1 m edges; radius tests use 0.5.
        let spacing = if radius_sized { 1.0 } else { 4.0 };
        let vps = ["a", "b", "c", "d"]
            .iter()
            .enumerate()
            .map(|(i, id)| Viewpoint {
                id: id.to_string(),
                position: [i as f64 * spacing, 0.0, 0.0],
                landmarks: vec![],
                image_ref: format!("img_{id}"),
            })
            .collect();
        EnvironmentGraph::new(
            vps,
            vec![
                ("a".into(), "b".into(), spacing),
                ("b".into(), "c".into(), spacing),
                ("c".into(), "d".into(), spacing),
            ],
        )
        .unwrap()
    }

    fn episode_to(goal: &str) -> Episode {
        Episode {
            id: "ep".into(),
            instruction: "go to the end of the hall".into(),
            start_id: "a".into(),
            goal_id: goal.to_string(),
            reference_path: match goal {
                "d" => vec!["a".into(), "b".into(), "c".into(), "d".into()],
                "c" => vec!["a".into(), "b".into(), "c".into()],
                _ => vec!["a".into(), "b".into()],
            },
        }
    }

    fn step(kind: StepKind, viewpoint: &str, i: usize) -> TrajectoryStep {
        TrajectoryStep {
            viewpoint_id: viewpoint.to_string(),
            kind,
            rationale: format!("rationale {i}"),
            analysis: format!("analysis {i}"),
            plan: vec![],
        }
    }

    fn result_from(walk: &[(StepKind, &str)], stopped: bool) -> EpisodeResult {
        let trajectory = walk
            .iter()
            .enumerate()
            .map(|(i, (kind, id))| step(*kind, id, i))
            .collect();
        EpisodeResult {
            episode_id: "ep".into(),
            trajectory,
            stopped,
            metrics: MetricSet {
                ne: 0.0,
                success: false,
                oracle_success: false,
                spl: 0.0,
            },
            error: None,
        }
    }

    use StepKind::{Move, Start, Stop};

    #[test]
    fn stopping_at_goal_is_success() {
        let g = graph_line(true);
        let ep = episode_to("d");
        let r = result_from(
            &[(Start, "a"), (Move, "b"), (Move, "c"), (Move, "d"), (Stop, "d")],
            true,
        );
        assert_eq!(
            classify(&g, &ep, &r, 0.5).unwrap(),
            ReflectionOutcome::Success
        );
    }

    #[test]
    fn stopping_short_is_fgr_at_the_stop() {
        let g = graph_line(true);
        let ep = episode_to("d");
        let r = result_from(&[(Start, "a"), (Move, "b"), (Stop, "b")], true);
        assert_eq!(
            classify(&g, &ep, &r, 0.5).unwrap(),
            ReflectionOutcome::Failure {
                failure_type: FailureType::Fgr,
                first_wrong_step: 1,
            }
        );
    }

    #[test]
    fn moving_past_the_goal_is_pgc_at_the_first_move_after_entry() {
        let g = graph_line(true);
        let ep = episode_to("d");
        let r = result_from(
            &[
                (Start, "a"),
                (Move, "b"),
                (Move, "c"),
                (Move, "d"),
                (Move, "c"),
                (Stop, "c"),
            ],
            true,
        );
        // Entered the radius at trajectory position 3; the move decided
        // there is history index 3 (the d -> c move).
        assert_eq!(
            classify(&g, &ep, &r, 0.5).unwrap(),
            ReflectionOutcome::Failure {
                failure_type: FailureType::Pgc,
                first_wrong_step: 3,
            }
        );
    }

    #[test]
    fn distance_increase_is_mrd_at_the_earliest_bad_move() {
        // Star: goal g sits opposite x from the hub a.
        let g = EnvironmentGraph::new(
            vec![
                Viewpoint {
                    id: "a".into(),
                    position: [0.0, 0.0, 0.0],
                    landmarks: vec![],
                    image_ref: String::new(),
                },
                Viewpoint {
                    id: "x".into(),
                    position: [1.0, 0.0, 0.0],
                    landmarks: vec![],
                    image_ref: String::new(),
                },
                Viewpoint {
                    id: "g".into(),
                    position: [-1.0, 0.0, 0.0],
                    landmarks: vec![],
                    image_ref: String::new(),
                },
            ],
            vec![
                ("a".into(), "x".into(), 1.0),
                ("a".into(), "g".into(), 1.0),
            ],
        )
        .unwrap();
        let ep = Episode {
            id: "ep".into(),
            instruction: "go".into(),
            start_id: "a".into(),
            goal_id: "g".into(),
            reference_path: vec!["a".into(), "g".into()],
        };
        let r = result_from(&[(Start, "a"), (Move, "x"), (Stop, "x")], true);
        assert_eq!(
            classify(&g, &ep, &r, 0.5).unwrap(),
            ReflectionOutcome::Failure {
                failure_type: FailureType::Mrd,
                first_wrong_step: 0,
            }
        );
    }

    #[test]
    fn budget_exhaustion_outside_radius_blames_the_last_move() {
        let g = graph_line(true);
        let ep = episode_to("d");
        // Monotone approach, no stop, ended short: would be FGR but there is
        // no stop decision.
        let r = result_from(&[(Start, "a"), (Move, "b")], false);
        assert_eq!(
            classify(&g, &ep, &r, 0.5).unwrap(),
            ReflectionOutcome::Failure {
                failure_type: FailureType::Mrd,
                first_wrong_step: 0,
            }
        );
    }

    #[test]
    fn pgc_wins_over_mrd_when_both_apply() {
        let g = graph_line(true);
        let ep = episode_to("c");
        // Reaches c (the goal), then backtracks twice: the distance also
        // increases afterward, but entry into the radius decides.
        let r = result_from(
            &[
                (Start, "a"),
                (Move, "b"),
                (Move, "c"),
                (Move, "b"),
                (Move, "a"),
                (Stop, "a"),
            ],
            true,
        );
        assert_eq!(
            classify(&g, &ep, &r, 0.5).unwrap(),
            ReflectionOutcome::Failure {
                failure_type: FailureType::Pgc,
                first_wrong_step: 2,
            }
        );
    }

    #[test]
    fn classification_is_invariant_under_id_relabeling() {
        // Same geometry, ids reversed lexicographically.
        let relabel = |id: &str| format!("zz_{id}");
        let g = graph_line(true);
        let renamed = EnvironmentGraph::new(
            g.viewpoints()
                .map(|v| Viewpoint {
                    id: relabel(&v.id),
                    position: v.position,
                    landmarks: v.landmarks.clone(),
                    image_ref: v.image_ref.clone(),
                })
                .collect(),
            [("a", "b"), ("b", "c"), ("c", "d")]
                .iter()
                .map(|(x, y)| (relabel(x), relabel(y), 1.0))
                .collect(),
        )
        .unwrap();
        let ep = episode_to("d");
        let renamed_ep = Episode {
            id: ep.id.clone(),
            instruction: ep.instruction.clone(),
            start_id: relabel(&ep.start_id),
            goal_id: relabel(&ep.goal_id),
            reference_path: ep.reference_path.iter().map(|s| relabel(s)).collect(),
        };
        let walk = [
            (Start, "a"),
            (Move, "b"),
            (Move, "c"),
            (Move, "d"),
            (Move, "c"),
            (Stop, "c"),
        ];
        let r = result_from(&walk, true);
        let renamed_walk: Vec<(StepKind, String)> =
            walk.iter().map(|(k, id)| (*k, relabel(id))).collect();
        let renamed_refs: Vec<(StepKind, &str)> = renamed_walk
            .iter()
            .map(|(k, id)| (*k, id.as_str()))
            .collect();
        let renamed_r = result_from(&renamed_refs, true);
        assert_eq!(
            classify(&g, &ep, &r, 0.5).unwrap(),
            classify(&renamed, &renamed_ep, &renamed_r, 0.5).unwrap()
        );
    }

    #[test]
    fn no_decisions_is_an_error() {
        let g = graph_line(true);
        let ep = episode_to("d");
        let r = result_from(&[(Start, "a")], false);
        assert!(matches!(
            classify(&g, &ep, &r, 0.5),
            Err(ReflectionError::NoDecisions)
        ));
    }

    #[test]
    fn success_update_covers_the_walk_with_traversed_length() {
        let g = graph_line(false);
        let ep = episode_to("d");
        let r = result_from(
            &[(Start, "a"), (Move, "b"), (Move, "c"), (Move, "d"), (Stop, "d")],
            true,
        );
        let e = HashEmbedder::new(32);
        let update = make_update(&g, &ep, &r, ReflectionOutcome::Success, &e)
            .unwrap()
            .unwrap();
        let MemoryUpdate::Success(exp) = update else {
            panic!("expected success update");
        };
        assert_eq!(exp.trajectory, vec!["a", "b", "c", "d"]);
        assert_eq!(exp.path_length, 12.0);
        assert_eq!(exp.episode_id, "ep");
    }

    #[test]
    fn failure_update_copies_the_rationale_verbatim() {
        let g = graph_line(true);
        let ep = episode_to("d");
        let r = result_from(&[(Start, "a"), (Move, "b"), (Move, "c"), (Stop, "c")], true);
        let e = HashEmbedder::new(32);
        // MRD blamed on history index 1: decided standing at b.
        let outcome = ReflectionOutcome::Failure {
            failure_type: FailureType::Mrd,
            first_wrong_step: 1,
        };
        let update = make_update(&g, &ep, &r, outcome, &e).unwrap().unwrap();
        let MemoryUpdate::Failure(exp) = update else {
            panic!("expected failure update");
        };
        assert_eq!(exp.decision_viewpoint, "b");
        assert_eq!(exp.rationale, "rationale 2");
        assert_eq!(exp.image_ref, "img_b");
        assert_eq!(exp.failure_type, FailureType::Mrd);
    }

    #[test]
    fn fgr_update_uses_the_stop_rationale_at_the_stop_viewpoint() {
        let g = graph_line(true);
        let ep = episode_to("d");
        let r = result_from(&[(Start, "a"), (Move, "b"), (Stop, "b")], true);
        let e = HashEmbedder::new(32);
        let outcome = classify(&g, &ep, &r, 0.5).unwrap();
        let update = make_update(&g, &ep, &r, outcome, &e).unwrap().unwrap();
        let MemoryUpdate::Failure(exp) = update else {
            panic!("expected failure update");
        };
        assert_eq!(exp.decision_viewpoint, "b");
        assert_eq!(exp.rationale, "rationale 2");
        assert_eq!(exp.failure_type, FailureType::Fgr);
    }

    #[test]
    fn committing_the_same_reflection_twice_is_idempotent() {
        let g = graph_line(false);
        let ep = episode_to("d");
        let e = HashEmbedder::new(32);
        let mut memory = ExperienceMemory::build(&g, &e).unwrap();

        // Failure path.
        let r = result_from(&[(Start, "a"), (Move, "b"), (Stop, "b")], true);
        let (_, first) = reflect_and_commit(&mut memory, &g, &ep, &r, &e, 3.0).unwrap();
        assert_eq!(first[0].1, InsertOutcome::Inserted);
        let snapshot = memory.clone();
        let (_, second) = reflect_and_commit(&mut memory, &g, &ep, &r, &e, 3.0).unwrap();
        assert_eq!(second[0].1, InsertOutcome::Ignored);
        assert_eq!(memory, snapshot);

        // Success path.
        let r = result_from(
            &[(Start, "a"), (Move, "b"), (Move, "c"), (Move, "d"), (Stop, "d")],
            true,
        );
        let (outcome, inserts) = reflect_and_commit(&mut memory, &g, &ep, &r, &e, 3.0).unwrap();
        assert_eq!(outcome, ReflectionOutcome::Success);
        assert_eq!(inserts.len(), 4);
        let snapshot = memory.clone();
        let (_, again) = reflect_and_commit(&mut memory, &g, &ep, &r, &e, 3.0).unwrap();
        assert!(again.iter().all(|(_, o)| *o == InsertOutcome::Discarded));
        assert_eq!(memory, snapshot);
    }

    #[test]
    fn shorter_similar_success_replaces_the_stored_route() {
        let g = graph_line(false);
        let ep = episode_to("c");
        let e = HashEmbedder::new(32);
        let mut memory = ExperienceMemory::build(&g, &e).unwrap();
        let detour = result_from(
            &[
                (Start, "a"),
                (Move, "b"),
                (Move, "a"),
                (Move, "b"),
                (Move, "c"),
                (Stop, "c"),
            ],
            true,
        );
        reflect_and_commit(&mut memory, &g, &ep, &detour, &e, 3.0).unwrap();
        let direct = result_from(&[(Start, "a"), (Move, "b"), (Move, "c"), (Stop, "c")], true);
        let (_, outcomes) = reflect_and_commit(&mut memory, &g, &ep, &direct, &e, 3.0).unwrap();
        assert!(outcomes
            .iter()
            .any(|(_, o)| *o == InsertOutcome::Replaced));
    }
}
