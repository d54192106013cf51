//! Small deterministic worlds for tests, demos and the acceptance suite.

use crate::env::{EnvironmentGraph, Episode, Viewpoint};

fn viewpoint(id: &str, x: f64, y: f64, landmarks: &[&str], image_ref: &str) -> Viewpoint {
    Viewpoint {
        id: id.to_string(),
        position: [x, y, 0.0],
        landmarks: landmarks.iter().map(|s| s.to_string()).collect(),
        image_ref: image_ref.to_string(),
    }
}

fn edge(a: &str, b: &str, length: f64) -> (String, String, f64) {
    (a.to_string(), b.to_string(), length)
}

/// An ambiguous fork. From `a_fork`, both `b_couch` and `c_couch` show a
/// couch and score identically against a couch-seeking instruction, so a
/// greedy policy tie-breaks to `b_couch`, a dead end far from the goal.
/// The fork viewpoint itself overlooks both branches (its landmark set is
/// the union), which makes its memory unit the best retrieval match for the
/// fused candidate views.
pub fn fork_environment() -> EnvironmentGraph {
    EnvironmentGraph::new(
        vec![
            viewpoint("a_fork", 0.0, 0.0, &["couch", "plant", "lamp"], ""),
            viewpoint("b_couch", 4.0, 0.0, &["couch", "plant"], ""),
            viewpoint("c_couch", 0.0, 4.0, &["couch", "lamp"], ""),
            viewpoint("d_goal", 0.0, 6.0, &["couch", "goal"], ""),
        ],
        vec![
            edge("a_fork", "b_couch", 4.0),
            edge("a_fork", "c_couch", 4.0),
            edge("c_couch", "d_goal", 2.0),
        ],
    )
    .expect("fork environment is well formed")
}

pub const FORK_INSTRUCTION: &str = "go to the couch";

/// One pass over the fork, from the fork to the goal behind `c_couch`.
pub fn fork_episode(id: &str) -> Episode {
    Episode {
        id: id.to_string(),
        instruction: FORK_INSTRUCTION.to_string(),
        start_id: "a_fork".to_string(),
        goal_id: "d_goal".to_string(),
        reference_path: vec![
            "a_fork".to_string(),
            "c_couch".to_string(),
            "d_goal".to_string(),
        ],
    }
}

/// A corridor s0 .. s4 with 4 m spacing plus one dead-end branch at each of
/// s0, s1, s2. Scripted wrong moves into a branch strictly increase the
/// geodesic distance to any corridor goal.
pub fn line_environment() -> EnvironmentGraph {
    let mut viewpoints = Vec::new();
    let mut edges = Vec::new();
    for i in 0..5 {
        let id = format!("s{i}");
        viewpoints.push(viewpoint(
            &id,
            4.0 * i as f64,
            0.0,
            &["hall"],
            &format!("img_{id}"),
        ));
        if i > 0 {
            edges.push(edge(&format!("s{}", i - 1), &id, 4.0));
        }
    }
    for i in 0..3 {
        let id = format!("x{i}");
        viewpoints.push(viewpoint(
            &id,
            4.0 * i as f64,
            4.0,
            &["alcove"],
            &format!("img_{id}"),
        ));
        edges.push(edge(&format!("s{i}"), &id, 4.0));
    }
    EnvironmentGraph::new(viewpoints, edges).expect("line environment is well formed")
}

/// Straight corridor episode between two `s*` viewpoints.
pub fn line_episode(id: &str, start: usize, goal: usize) -> Episode {
    let range: Vec<String> = if start <= goal {
        (start..=goal).map(|i| format!("s{i}")).collect()
    } else {
        (goal..=start).rev().map(|i| format!("s{i}")).collect()
    };
    Episode {
        id: id.to_string(),
        instruction: "walk down the hall to the far end".to_string(),
        start_id: format!("s{start}"),
        goal_id: format!("s{goal}"),
        reference_path: range,
    }
}

/// Five nodes with integer coordinates chosen so every metric value in the
/// acceptance checks is exact hand arithmetic: a straight a-b-c corridor
/// (4 m edges) plus a parallel detour through d and e.
pub fn metric_environment() -> EnvironmentGraph {
    EnvironmentGraph::new(
        vec![
            viewpoint("a", 0.0, 0.0, &["entry"], ""),
            viewpoint("b", 4.0, 0.0, &["middle"], ""),
            viewpoint("c", 8.0, 0.0, &["target"], ""),
            viewpoint("d", 4.0, 3.0, &["side"], ""),
            viewpoint("e", 8.0, 3.0, &["side"], ""),
        ],
        vec![
            edge("a", "b", 4.0),
            edge("b", "c", 4.0),
            edge("b", "d", 3.0),
            edge("d", "e", 4.0),
            edge("e", "c", 3.0),
        ],
    )
    .expect("metric environment is well formed")
}

pub fn metric_episode() -> Episode {
    Episode {
        id: "metric".to_string(),
        instruction: "go straight to the target".to_string(),
        start_id: "a".to_string(),
        goal_id: "c".to_string(),
        reference_path: vec!["a".to_string(), "b".to_string(), "c".to_string()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_validate_against_their_environments() {
        let fork = fork_environment();
        fork_episode("p1").validate(&fork).unwrap();
        let line = line_environment();
        line_episode("e1", 0, 4).validate(&line).unwrap();
        line_episode("e2", 1, 4).validate(&line).unwrap();
        let metric = metric_environment();
        metric_episode().validate(&metric).unwrap();
    }

    #[test]
    fn fork_geometry_matches_the_intended_trap() {
        let g = fork_environment();
        // The dead end is far from the goal; the good branch is inside the
        // default success radius of the goal.
        let b = g.viewpoint("b_couch").unwrap().position;
        let c = g.viewpoint("c_couch").unwrap().position;
        let goal = g.viewpoint("d_goal").unwrap().position;
        assert!(crate::env::euclidean(b, goal) > 3.0);
        assert!(crate::env::euclidean(c, goal) <= 3.0);
        // Moving to the dead end strictly increases the geodesic distance.
        let from_fork = g.geodesic_distance("a_fork", "d_goal").unwrap();
        let from_dead_end = g.geodesic_distance("b_couch", "d_goal").unwrap();
        assert!(from_dead_end > from_fork);
    }
}
