//! Early fusion of vehicle and infrastructure track sets: endpoint-distance
//! cost construction, Hungarian assignment with gating, Kalman track-to-track
//! fusion of matched pairs, and union with the unmatched remainder.

mod hungarian;
mod kalman;

pub use kalman::{kalman_fuse_pair, KalmanConfig};

use crate::data_model::{ObservedTrack, Provenance, Scene, TrackSet};
use crate::{Error, Result};

/// Pairwise association costs between vehicle tracks (rows) and
/// infrastructure tracks (columns). `+inf` marks infeasible pairs (class
/// mismatch or no common valid timestep).
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub costs: Vec<f64>,
    pub row_ids: Vec<u32>,
    pub col_ids: Vec<u32>,
}

impl CostMatrix {
    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.col_ids.len()
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.costs[row * self.col_ids.len() + col]
    }
}

/// Outcome of assignment: matched id pairs plus the unmatched remainder of
/// each side. Together they partition the input ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub pairs: Vec<(u32, u32)>,
    pub unmatched_vehicle: Vec<u32>,
    pub unmatched_infra: Vec<u32>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Association cost for one pair: the sum of distances at the earliest and
/// latest timesteps valid in both tracks; a single common step counts twice.
/// Infeasible (class mismatch, no common step) is `+inf`.
fn pair_cost(a: &ObservedTrack, b: &ObservedTrack) -> f64 {
    if a.class_label != b.class_label {
        return f64::INFINITY;
    }
    let mut first = None;
    let mut last = None;
    for t in 0..a.valid.len() {
        if a.valid[t] && b.valid[t] {
            if first.is_none() {
                first = Some(t);
            }
            last = Some(t);
        }
    }
    match (first, last) {
        (Some(f), Some(l)) => {
            dist(a.positions[f], b.positions[f]) + dist(a.positions[l], b.positions[l])
        }
        _ => f64::INFINITY,
    }
}

/// Builds the association cost matrix restricted to the first and last
/// common-valid timestamps of each pair.
pub fn build_cost_matrix(vehicle: &TrackSet, infra: &TrackSet) -> Result<CostMatrix> {
    if vehicle.history_len != infra.history_len {
        return Err(Error::Validation(format!(
            "cost matrix: history lengths differ ({} vs {})",
            vehicle.history_len, infra.history_len
        )));
    }
    let mut costs = Vec::with_capacity(vehicle.len() * infra.len());
    for v in &vehicle.tracks {
        for i in &infra.tracks {
            costs.push(pair_cost(v, i));
        }
    }
    Ok(CostMatrix {
        costs,
        row_ids: vehicle.tracks.iter().map(|t| t.track_id).collect(),
        col_ids: infra.tracks.iter().map(|t| t.track_id).collect(),
    })
}

/// Minimum-total-cost assignment over feasible pairs. Any assigned pair with
/// cost above `2 * gate` (the gate applies per endpoint, the cost sums two
/// endpoints) is demoted to unmatched. Rectangular matrices are supported.
pub fn hungarian_assign(matrix: &CostMatrix, gate: f64) -> Result<MatchResult> {
    if !(gate.is_finite() && gate > 0.0) {
        return Err(Error::Config(format!("gate must be positive, got {gate}")));
    }
    let rows = matrix.rows();
    let cols = matrix.cols();
    let assignment = hungarian::solve(&matrix.costs, rows, cols);
    let mut pairs = Vec::new();
    let mut col_taken = vec![false; cols];
    for (row, assigned) in assignment.iter().enumerate() {
        if let Some(col) = *assigned {
            if matrix.at(row, col) <= 2.0 * gate {
                pairs.push((matrix.row_ids[row], matrix.col_ids[col]));
                col_taken[col] = true;
            }
        }
    }
    pairs.sort_unstable();
    let matched_rows: std::collections::BTreeSet<u32> = pairs.iter().map(|&(v, _)| v).collect();
    let unmatched_vehicle = matrix
        .row_ids
        .iter()
        .copied()
        .filter(|id| !matched_rows.contains(id))
        .collect();
    let unmatched_infra = matrix
        .col_ids
        .iter()
        .enumerate()
        .filter(|&(c, _)| !col_taken[c])
        .map(|(_, &id)| id)
        .collect();
    Ok(MatchResult {
        pairs,
        unmatched_vehicle,
        unmatched_infra,
    })
}

/// A track set whose tracks all carry provenance back to their source views.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedTrackSet {
    pub set: TrackSet,
}

impl FusedTrackSet {
    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }
}

/// Early fusion of one scene: match with the Hungarian assignment, fuse
/// matched pairs with the Kalman filter, and concatenate unmatched tracks
/// from both views. Track ids are renumbered 0.. in deterministic order
/// (fused pairs by vehicle id, then unmatched vehicle, then unmatched infra).
pub fn early_fuse(scene: &Scene, cfg: &KalmanConfig) -> Result<FusedTrackSet> {
    cfg.validate()?;
    let matrix = build_cost_matrix(&scene.vehicle_tracks, &scene.infra_tracks)?;
    let matches = hungarian_assign(&matrix, cfg.gate_m)?;
    fuse_with_matches(scene, cfg, &matches)
}

/// Fusion step given an existing match result (shared by the CLI report
/// path so matching runs once).
pub fn fuse_with_matches(
    scene: &Scene,
    cfg: &KalmanConfig,
    matches: &MatchResult,
) -> Result<FusedTrackSet> {
    let dt = scene.dt;
    let mut tracks = Vec::with_capacity(
        matches.pairs.len() + matches.unmatched_vehicle.len() + matches.unmatched_infra.len(),
    );
    for &(v_id, i_id) in &matches.pairs {
        let v = scene.vehicle_tracks.track_by_id(v_id).ok_or_else(|| {
            Error::State(format!("match references unknown vehicle track {v_id}"))
        })?;
        let i = scene
            .infra_tracks
            .track_by_id(i_id)
            .ok_or_else(|| Error::State(format!("match references unknown infra track {i_id}")))?;
        tracks.push(kalman_fuse_pair(v, i, dt, cfg)?);
    }
    for &v_id in &matches.unmatched_vehicle {
        let v = scene
            .vehicle_tracks
            .track_by_id(v_id)
            .ok_or_else(|| Error::State(format!("unknown vehicle track {v_id}")))?;
        let mut t = v.clone();
        t.provenance = Some(Provenance::VehicleOnly { vehicle_id: v_id });
        tracks.push(t);
    }
    for &i_id in &matches.unmatched_infra {
        let i = scene
            .infra_tracks
            .track_by_id(i_id)
            .ok_or_else(|| Error::State(format!("unknown infra track {i_id}")))?;
        let mut t = i.clone();
        t.provenance = Some(Provenance::InfraOnly { infra_id: i_id });
        tracks.push(t);
    }
    for (new_id, track) in tracks.iter_mut().enumerate() {
        track.track_id = new_id as u32;
    }
    Ok(FusedTrackSet {
        set: TrackSet::new(tracks, scene.history_len, dt),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{ClassLabel, TrackSource};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn track_xy(id: u32, pts: Vec<[f64; 2]>, valid: Vec<bool>) -> ObservedTrack {
        ObservedTrack {
            track_id: id,
            class_label: ClassLabel::Vehicle,
            positions: pts,
            valid,
            source: TrackSource::VehicleView,
            provenance: None,
        }
    }

    fn line_track(id: u32, x0: f64, t_h: usize) -> ObservedTrack {
        track_xy(
            id,
            (0..t_h).map(|t| [x0 + t as f64, 0.0]).collect(),
            vec![true; t_h],
        )
    }

    fn set(tracks: Vec<ObservedTrack>, t_h: usize) -> TrackSet {
        TrackSet::new(tracks, t_h, 0.1)
    }

    #[test]
    fn identical_tracks_cost_zero() {
        let v = set(vec![line_track(0, 0.0, 10)], 10);
        let i = set(vec![line_track(0, 0.0, 10)], 10);
        let m = build_cost_matrix(&v, &i).unwrap();
        assert_eq!(m.at(0, 0), 0.0);
    }

    #[test]
    fn offset_tracks_sum_both_endpoints() {
        let v = set(vec![line_track(0, 0.0, 10)], 10);
        let i = set(vec![line_track(0, 3.0, 10)], 10);
        let m = build_cost_matrix(&v, &i).unwrap();
        assert!((m.at(0, 0) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn class_mismatch_and_disjoint_masks_are_infeasible() {
        let mut ped = line_track(0, 0.0, 4);
        ped.class_label = ClassLabel::Pedestrian;
        let v = set(vec![line_track(0, 0.0, 4), ped], 4);
        let mut disjoint = line_track(0, 0.0, 4);
        disjoint.valid = vec![false, true, false, false];
        let mut other = line_track(1, 0.0, 4);
        other.valid = vec![true, false, false, true];
        // v[0] has a full mask; i[0] valid only at t=1 -> common step exists
        let i = set(vec![disjoint, other], 4);
        let m = build_cost_matrix(&v, &i).unwrap();
        assert!(m.at(0, 0).is_finite());
        assert!(
            m.at(1, 0).is_infinite(),
            "class mismatch must be infeasible"
        );
        // single common step doubles the single distance
        let mut single_a = line_track(0, 0.0, 4);
        single_a.valid = vec![false, true, false, false];
        let mut single_b = line_track(0, 1.0, 4);
        single_b.valid = vec![false, true, true, false];
        let c = pair_cost(&single_a, &single_b);
        assert!((c - 2.0).abs() < 1e-12);
        // fully disjoint masks -> infeasible
        let mut dis_a = line_track(0, 0.0, 4);
        dis_a.valid = vec![true, false, true, false];
        let mut dis_b = line_track(0, 0.0, 4);
        dis_b.valid = vec![false, true, false, true];
        assert!(pair_cost(&dis_a, &dis_b).is_infinite());
    }

    #[test]
    fn costs_match_reference_mask_scan() {
        // reference: collect common valid indices, take min and max
        fn reference(a: &ObservedTrack, b: &ObservedTrack) -> f64 {
            if a.class_label != b.class_label {
                return f64::INFINITY;
            }
            let common: Vec<usize> = (0..a.valid.len())
                .filter(|&t| a.valid[t] && b.valid[t])
                .collect();
            if common.is_empty() {
                return f64::INFINITY;
            }
            let d = |t: usize| {
                let (pa, pb) = (a.positions[t], b.positions[t]);
                ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt()
            };
            d(*common.first().unwrap()) + d(*common.last().unwrap())
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let t_h = rng.gen_range(1..12);
            let mk = |rng: &mut ChaCha8Rng, id: u32| {
                let class = match rng.gen_range(0..3) {
                    0 => ClassLabel::Vehicle,
                    1 => ClassLabel::Pedestrian,
                    _ => ClassLabel::Cyclist,
                };
                let mut valid: Vec<bool> = (0..t_h).map(|_| rng.gen_bool(0.6)).collect();
                if !valid.iter().any(|&v| v) {
                    valid[0] = true;
                }
                ObservedTrack {
                    track_id: id,
                    class_label: class,
                    positions: (0..t_h)
                        .map(|_| [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)])
                        .collect(),
                    valid,
                    source: TrackSource::VehicleView,
                    provenance: None,
                }
            };
            let a = mk(&mut rng, 0);
            let b = mk(&mut rng, 0);
            let got = pair_cost(&a, &b);
            let want = reference(&a, &b);
            if want.is_infinite() {
                assert!(got.is_infinite());
            } else {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_pair_within_gate_matches() {
        let m = CostMatrix {
            costs: vec![0.5],
            row_ids: vec![3],
            col_ids: vec![9],
        };
        let result = hungarian_assign(&m, 3.0).unwrap();
        assert_eq!(result.pairs, vec![(3, 9)]);
        assert!(result.unmatched_vehicle.is_empty());
        assert!(result.unmatched_infra.is_empty());
    }

    #[test]
    fn diagonal_dominant_matrix() {
        let m = CostMatrix {
            costs: vec![1.0, 100.0, 100.0, 1.0],
            row_ids: vec![0, 1],
            col_ids: vec![0, 1],
        };
        let result = hungarian_assign(&m, 3.0).unwrap();
        assert_eq!(result.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn gate_demotes_expensive_assignments() {
        let m = CostMatrix {
            costs: vec![7.0],
            row_ids: vec![0],
            col_ids: vec![0],
        };
        // 7.0 > 2 * 3.0 -> demoted
        let result = hungarian_assign(&m, 3.0).unwrap();
        assert!(result.pairs.is_empty());
        assert_eq!(result.unmatched_vehicle, vec![0]);
        assert_eq!(result.unmatched_infra, vec![0]);
        // 7.0 <= 2 * 3.6 -> kept
        let result = hungarian_assign(&m, 3.6).unwrap();
        assert_eq!(result.pairs.len(), 1);
    }

    #[test]
    fn partition_property_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let rows = rng.gen_range(0..6);
            let cols = rng.gen_range(0..6);
            let costs: Vec<f64> = (0..rows * cols)
                .map(|_| {
                    if rng.gen_bool(0.2) {
                        f64::INFINITY
                    } else {
                        rng.gen_range(0.0..12.0)
                    }
                })
                .collect();
            let m = CostMatrix {
                costs,
                row_ids: (0..rows as u32).collect(),
                col_ids: (0..cols as u32).collect(),
            };
            let r = hungarian_assign(&m, 3.0).unwrap();
            let mut vehicle_ids: Vec<u32> = r.pairs.iter().map(|&(v, _)| v).collect();
            vehicle_ids.extend(&r.unmatched_vehicle);
            vehicle_ids.sort_unstable();
            assert_eq!(vehicle_ids, (0..rows as u32).collect::<Vec<_>>());
            let mut infra_ids: Vec<u32> = r.pairs.iter().map(|&(_, i)| i).collect();
            infra_ids.extend(&r.unmatched_infra);
            infra_ids.sort_unstable();
            assert_eq!(infra_ids, (0..cols as u32).collect::<Vec<_>>());
        }
    }

    #[test]
    fn gate_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..40 {
            let n = rng.gen_range(1..6);
            let costs: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..12.0)).collect();
            let m = CostMatrix {
                costs,
                row_ids: (0..n as u32).collect(),
                col_ids: (0..n as u32).collect(),
            };
            let mut prev = usize::MAX;
            for gate in [6.0, 4.0, 2.0, 1.0, 0.5] {
                let r = hungarian_assign(&m, gate).unwrap();
                assert!(r.pairs.len() <= prev);
                prev = r.pairs.len();
            }
        }
    }

    #[test]
    fn swapping_sets_transposes_the_matching() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..40 {
            let rows = rng.gen_range(1..6);
            let cols = rng.gen_range(1..6);
            let costs: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.0..10.0)).collect();
            let m = CostMatrix {
                costs: costs.clone(),
                row_ids: (0..rows as u32).collect(),
                col_ids: (0..cols as u32).collect(),
            };
            let mut transposed = vec![0.0; rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    transposed[j * rows + i] = costs[i * cols + j];
                }
            }
            let mt = CostMatrix {
                costs: transposed,
                row_ids: (0..cols as u32).collect(),
                col_ids: (0..rows as u32).collect(),
            };
            let a = hungarian_assign(&m, 100.0).unwrap();
            let b = hungarian_assign(&mt, 100.0).unwrap();
            let mut swapped: Vec<(u32, u32)> = b.pairs.iter().map(|&(i, v)| (v, i)).collect();
            swapped.sort_unstable();
            assert_eq!(a.pairs, swapped);
        }
    }

    fn scene_from_sets(vehicle: TrackSet, infra: TrackSet) -> Scene {
        let t_h = vehicle.history_len;
        Scene {
            scene_id: 0,
            dt: vehicle.dt,
            history_len: t_h,
            future_len: 1,
            vehicle_tracks: vehicle,
            infra_tracks: infra,
            map: Default::default(),
            futures: Default::default(),
            gt_identity: None,
            focal_ids: vec![],
        }
    }

    #[test]
    fn empty_infra_view_passes_vehicle_through() {
        let scene = scene_from_sets(
            set(vec![line_track(0, 0.0, 6), line_track(1, 20.0, 6)], 6),
            set(vec![], 6),
        );
        let fused = early_fuse(&scene, &KalmanConfig::default()).unwrap();
        assert_eq!(fused.len(), 2);
        for track in &fused.set.tracks {
            assert!(matches!(
                track.provenance,
                Some(Provenance::VehicleOnly { .. })
            ));
        }
        // positions pass through untouched
        assert_eq!(
            fused.set.tracks[0].positions,
            scene.vehicle_tracks.tracks[0].positions
        );
    }

    #[test]
    fn two_matched_pairs_fuse_to_two_tracks() {
        let scene = scene_from_sets(
            set(vec![line_track(0, 0.0, 6), line_track(1, 50.0, 6)], 6),
            set(vec![line_track(0, 0.2, 6), line_track(1, 50.2, 6)], 6),
        );
        let fused = early_fuse(&scene, &KalmanConfig::default()).unwrap();
        assert_eq!(fused.len(), 2);
        for track in &fused.set.tracks {
            assert!(matches!(track.provenance, Some(Provenance::Fused { .. })));
        }
    }

    #[test]
    fn output_count_is_pairs_plus_unmatched() {
        // two matchable pairs, one vehicle-only, one infra-only (far away)
        let scene = scene_from_sets(
            set(
                vec![
                    line_track(0, 0.0, 6),
                    line_track(1, 60.0, 6),
                    line_track(2, 200.0, 6),
                ],
                6,
            ),
            set(
                vec![
                    line_track(0, 0.3, 6),
                    line_track(1, 60.3, 6),
                    line_track(2, 500.0, 6),
                ],
                6,
            ),
        );
        let fused = early_fuse(&scene, &KalmanConfig::default()).unwrap();
        assert_eq!(fused.len(), 4);
        let fused_count = fused
            .set
            .tracks
            .iter()
            .filter(|t| matches!(t.provenance, Some(Provenance::Fused { .. })))
            .count();
        assert_eq!(fused_count, 2);
        // ids renumbered densely
        let ids: Vec<u32> = fused.set.tracks.iter().map(|t| t.track_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fused_mask_is_or_of_parents() {
        let mut v = line_track(0, 0.0, 6);
        v.valid = vec![true, false, true, false, true, false];
        let mut i = line_track(0, 0.1, 6);
        i.valid = vec![true, true, false, false, false, true];
        let scene = scene_from_sets(set(vec![v.clone()], 6), set(vec![i.clone()], 6));
        let fused = early_fuse(&scene, &KalmanConfig::default()).unwrap();
        assert_eq!(fused.len(), 1);
        let expect: Vec<bool> = v
            .valid
            .iter()
            .zip(&i.valid)
            .map(|(&a, &b)| a || b)
            .collect();
        assert_eq!(fused.set.tracks[0].valid, expect);
    }
}
