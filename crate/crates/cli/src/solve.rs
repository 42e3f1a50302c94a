//! Direct graph-level workflow: load g2o files, filter inter-robot
//! closures, optimize, and dump the result.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use nalgebra::Vector3;

use peerslam_core::g2o::{read_g2o, write_g2o, G2oDocument};
use peerslam_core::graph::{EdgeKind, GlobalKey, MeasurementEdge, PoseGraph};
use peerslam_core::network::NetworkConfig;
use peerslam_core::pcm::{select_inliers, PcmConfig};
use peerslam_core::pgo::{pgo_objective, run_distributed_pgo, PgoConfig};
use peerslam_core::se3::Pose3;

use crate::{CliError, Result};

/// What the solve subcommand reports back.
pub struct SolveSummary {
    pub robots: Vec<u8>,
    pub candidate_closures: usize,
    pub accepted_closures: usize,
    pub objective: f64,
    pub separator_bytes: u64,
    pub estimates: BTreeMap<GlobalKey, Pose3>,
}

/// Merges multiple g2o documents; duplicate vertex keys are an error.
pub fn merge_documents(documents: Vec<G2oDocument>) -> Result<G2oDocument> {
    let mut merged = G2oDocument::default();
    for document in documents {
        for (key, pose) in document.poses {
            if merged.poses.insert(key, pose).is_some() {
                return Err(CliError::Config(format!(
                    "vertex {key} appears in more than one input"
                )));
            }
        }
        merged.edges.extend(document.edges);
    }
    Ok(merged)
}

/// Splits a document into per-robot graphs plus the inter-robot closures.
pub fn graphs_of(document: &G2oDocument) -> Result<(BTreeMap<u8, PoseGraph>, Vec<MeasurementEdge>)> {
    let mut graphs: BTreeMap<u8, PoseGraph> = BTreeMap::new();
    for (key, pose) in &document.poses {
        graphs
            .entry(key.robot_id)
            .or_insert_with(|| PoseGraph::new(key.robot_id))
            .poses
            .insert(*key, pose.clone());
    }
    let mut closures = Vec::new();
    for edge in &document.edges {
        match edge.kind {
            EdgeKind::Odometry => {
                graphs
                    .get_mut(&edge.from.robot_id)
                    .expect("vertex check at parse")
                    .add_odometry(edge.clone())?;
            }
            EdgeKind::InterRobotLoopClosure => closures.push(edge.clone()),
        }
    }
    Ok((graphs, closures))
}

/// Loads the inputs, optionally gates closures per robot pair, runs the
/// distributed solve, and writes the optimized graph to `output`.
pub fn solve(
    inputs: &[impl AsRef<Path>],
    pcm_threshold: Option<f64>,
    output: &Path,
) -> Result<SolveSummary> {
    if inputs.is_empty() {
        return Err(CliError::Config("solve needs at least one input".into()));
    }
    let mut documents = Vec::new();
    for input in inputs {
        let path = input.as_ref();
        let file = fs::File::open(path)
            .map_err(|e| CliError::Io(format!("cannot open {}: {e}", path.display())))?;
        documents.push(read_g2o(BufReader::new(file))?);
    }
    let document = merge_documents(documents)?;
    let (graphs, candidates) = graphs_of(&document)?;

    let mut by_pair: BTreeMap<(u8, u8), Vec<MeasurementEdge>> = BTreeMap::new();
    for edge in &candidates {
        let (a, b) = (edge.from.robot_id, edge.to.robot_id);
        by_pair
            .entry((a.min(b), a.max(b)))
            .or_default()
            .push(edge.clone());
    }

    let mut accepted = Vec::new();
    match pcm_threshold {
        Some(threshold) => {
            let config = PcmConfig {
                likelihood_threshold: threshold,
                ..PcmConfig::default()
            };
            for ((a, b), edges) in &by_pair {
                let outcome = select_inliers(&graphs[a], &graphs[b], edges, &config)?;
                accepted.extend(outcome.inlier_indices.iter().map(|&i| edges[i].clone()));
            }
        }
        None => accepted = candidates.clone(),
    }

    let positions: BTreeMap<u8, Vector3<f64>> =
        graphs.keys().map(|&r| (r, Vector3::zeros())).collect();
    let outcome = run_distributed_pgo(
        &graphs,
        &accepted,
        &PgoConfig::default(),
        &NetworkConfig::default(),
        &positions,
    )?;
    let objective = pgo_objective(&graphs, &accepted, &outcome.estimates)?;

    let mut edges = Vec::new();
    for graph in graphs.values() {
        edges.extend(graph.odometry.values().cloned());
    }
    edges.extend(accepted.iter().cloned());
    let solved = G2oDocument {
        poses: outcome.estimates.clone(),
        edges,
    };
    let mut buffer = Vec::new();
    write_g2o(&mut buffer, &solved)?;
    fs::write(output, &buffer)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", output.display())))?;

    Ok(SolveSummary {
        robots: graphs.keys().copied().collect(),
        candidate_closures: candidates.len(),
        accepted_closures: accepted.len(),
        objective,
        separator_bytes: outcome.separator_bytes,
        estimates: outcome.estimates,
    })
}
