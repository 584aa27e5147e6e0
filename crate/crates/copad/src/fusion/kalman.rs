//! Constant-velocity Kalman track-to-track fusion.
//!
//! State is `[x, y, vx, vy]` with a discretized white-acceleration process
//! noise model. At each timestep the filter applies one measurement update
//! per valid source (vehicle first, then infrastructure); for linear-Gaussian
//! updates the order only matters at floating-point level.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::data_model::{ObservedTrack, Provenance, TrackSource};
use crate::{Error, Result};

fn default_gate() -> f64 {
    3.0
}
fn default_process_noise() -> f64 {
    0.5
}
fn default_meas_noise() -> f64 {
    0.25
}

/// Fusion tuning parameters. Also the `fusion` section of the run-config
/// file (keys `gate_m`, `process_noise`, `meas_noise_vehicle`,
/// `meas_noise_infra`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KalmanConfig {
    /// Association gate per matched endpoint, meters (default 3.0).
    #[serde(default = "default_gate")]
    pub gate_m: f64,
    /// White-acceleration process noise q in (m/s^2)^2 (default 0.5).
    #[serde(default = "default_process_noise")]
    pub process_noise: f64,
    /// Vehicle-view measurement noise in m^2 (default 0.25).
    #[serde(default = "default_meas_noise")]
    pub meas_noise_vehicle: f64,
    /// Infrastructure-view measurement noise in m^2 (default 0.25).
    #[serde(default = "default_meas_noise")]
    pub meas_noise_infra: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        KalmanConfig {
            gate_m: default_gate(),
            process_noise: default_process_noise(),
            meas_noise_vehicle: default_meas_noise(),
            meas_noise_infra: default_meas_noise(),
        }
    }
}

impl KalmanConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gate_m", self.gate_m),
            ("process_noise", self.process_noise),
            ("meas_noise_vehicle", self.meas_noise_vehicle),
            ("meas_noise_infra", self.meas_noise_infra),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "fusion.{name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Diffuse initial variance for position and velocity.
const DIFFUSE_VAR: f64 = 100.0;

struct Filter {
    x: Vector4<f64>,
    p: Matrix4<f64>,
    f: Matrix4<f64>,
    q: Matrix4<f64>,
    h: Matrix2x4<f64>,
}

impl Filter {
    fn new(dt: f64, q: f64, init_pos: [f64; 2]) -> Filter {
        let mut f = Matrix4::identity();
        f[(0, 2)] = dt;
        f[(1, 3)] = dt;
        let dt2 = dt * dt;
        let dt3 = dt2 * dt;
        let dt4 = dt3 * dt;
        let mut qm = Matrix4::zeros();
        qm[(0, 0)] = dt4 / 4.0;
        qm[(1, 1)] = dt4 / 4.0;
        qm[(2, 2)] = dt2;
        qm[(3, 3)] = dt2;
        qm[(0, 2)] = dt3 / 2.0;
        qm[(2, 0)] = dt3 / 2.0;
        qm[(1, 3)] = dt3 / 2.0;
        qm[(3, 1)] = dt3 / 2.0;
        qm *= q;
        let mut h = Matrix2x4::zeros();
        h[(0, 0)] = 1.0;
        h[(1, 1)] = 1.0;
        Filter {
            x: Vector4::new(init_pos[0], init_pos[1], 0.0, 0.0),
            p: Matrix4::identity() * DIFFUSE_VAR,
            f,
            q: qm,
            h,
        }
    }

    fn predict(&mut self) {
        self.x = self.f * self.x;
        self.p = self.f * self.p * self.f.transpose() + self.q;
    }

    fn update(&mut self, z: [f64; 2], r: f64) {
        let z = Vector2::new(z[0], z[1]);
        let innovation = z - self.h * self.x;
        let s = self.h * self.p * self.h.transpose() + Matrix2::identity() * r;
        let s_inv = s.try_inverse().expect("innovation covariance is SPD");
        let k: Matrix4x2<f64> = self.p * self.h.transpose() * s_inv;
        self.x += k * innovation;
        let ikh = Matrix4::identity() - k * self.h;
        // Joseph form keeps P symmetric positive definite
        self.p = ikh * self.p * ikh.transpose() + k * (Matrix2::identity() * r) * k.transpose();
    }

    fn position(&self) -> [f64; 2] {
        [self.x[0], self.x[1]]
    }
}

/// Fuses two matched tracks of the same class into one filtered track.
/// The output valid mask is the OR of the parents' masks, the class is
/// preserved, and the source is `Fused`.
pub fn kalman_fuse_pair(
    vehicle: &ObservedTrack,
    infra: &ObservedTrack,
    dt: f64,
    cfg: &KalmanConfig,
) -> Result<ObservedTrack> {
    if vehicle.history_len() != infra.history_len() {
        return Err(Error::Validation(format!(
            "fuse pair: history lengths differ ({} vs {})",
            vehicle.history_len(),
            infra.history_len()
        )));
    }
    if vehicle.class_label != infra.class_label {
        return Err(Error::Validation("fuse pair: class labels differ".into()));
    }
    let t_h = vehicle.history_len();
    let first = (0..t_h)
        .find(|&t| vehicle.valid[t] || infra.valid[t])
        .ok_or_else(|| Error::Validation("fuse pair: no valid step in either track".into()))?;

    // Initial position: mean of the measurements valid at the first step.
    let mut init = [0.0, 0.0];
    let mut count = 0.0;
    for track in [vehicle, infra] {
        if let Some(p) = track.valid_position(first) {
            init[0] += p[0];
            init[1] += p[1];
            count += 1.0;
        }
    }
    init[0] /= count;
    init[1] /= count;

    let mut filter = Filter::new(dt, cfg.process_noise, init);
    let mut positions = vec![[0.0, 0.0]; t_h];
    let mut valid = vec![false; t_h];
    for t in first..t_h {
        if t > first {
            filter.predict();
        }
        if let Some(z) = vehicle.valid_position(t) {
            filter.update(z, cfg.meas_noise_vehicle);
        }
        if let Some(z) = infra.valid_position(t) {
            filter.update(z, cfg.meas_noise_infra);
        }
        if vehicle.valid[t] || infra.valid[t] {
            positions[t] = filter.position();
            valid[t] = true;
        }
    }

    Ok(ObservedTrack {
        track_id: vehicle.track_id,
        class_label: vehicle.class_label,
        positions,
        valid,
        source: TrackSource::Fused,
        provenance: Some(Provenance::Fused {
            vehicle_id: vehicle.track_id,
            infra_id: infra.track_id,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::ClassLabel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn track(points: Vec<[f64; 2]>, valid: Vec<bool>, source: TrackSource) -> ObservedTrack {
        ObservedTrack {
            track_id: 0,
            class_label: ClassLabel::Vehicle,
            positions: points,
            valid,
            source,
            provenance: None,
        }
    }

    #[test]
    fn static_identical_pair_is_fixed_point() {
        let t_h = 8;
        let pts = vec![[4.0, -2.0]; t_h];
        let a = track(pts.clone(), vec![true; t_h], TrackSource::VehicleView);
        let b = track(
            pts.clone(),
            vec![true; t_h],
            TrackSource::InfrastructureView,
        );
        let fused = kalman_fuse_pair(&a, &b, 0.1, &KalmanConfig::default()).unwrap();
        for t in 1..t_h {
            assert!((fused.positions[t][0] - 4.0).abs() < 1e-9);
            assert!((fused.positions[t][1] + 2.0).abs() < 1e-9);
        }
        assert_eq!(fused.source, TrackSource::Fused);
        assert_eq!(fused.class_label, ClassLabel::Vehicle);
    }

    #[test]
    fn symmetric_single_step_measurements_fuse_to_origin() {
        let d = 1.5;
        let a = track(vec![[d, 0.0]], vec![true], TrackSource::VehicleView);
        let b = track(vec![[-d, 0.0]], vec![true], TrackSource::InfrastructureView);
        let fused = kalman_fuse_pair(&a, &b, 0.1, &KalmanConfig::default()).unwrap();
        assert!(fused.positions[0][0].abs() < 1e-9);
        assert!(fused.positions[0][1].abs() < 1e-9);
    }

    #[test]
    fn update_order_is_irrelevant_within_float_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t_h = 12;
        let noise = Normal::new(0.0, 0.4).unwrap();
        let pts_a: Vec<[f64; 2]> = (0..t_h)
            .map(|t| [t as f64 + noise.sample(&mut rng), noise.sample(&mut rng)])
            .collect();
        let pts_b: Vec<[f64; 2]> = (0..t_h)
            .map(|t| [t as f64 + noise.sample(&mut rng), noise.sample(&mut rng)])
            .collect();
        let a = track(pts_a, vec![true; t_h], TrackSource::VehicleView);
        let b = track(pts_b, vec![true; t_h], TrackSource::InfrastructureView);
        let cfg = KalmanConfig::default();
        let ab = kalman_fuse_pair(&a, &b, 0.1, &cfg).unwrap();
        let ba = kalman_fuse_pair(&b, &a, 0.1, &cfg).unwrap();
        for t in 0..t_h {
            assert!((ab.positions[t][0] - ba.positions[t][0]).abs() < 1e-9);
            assert!((ab.positions[t][1] - ba.positions[t][1]).abs() < 1e-9);
        }
    }

    /// Independent scalar oracle: per-axis (position, velocity) recursion
    /// written with explicit 2x2 algebra.
    struct ScalarKalman {
        pos: f64,
        vel: f64,
        p: [[f64; 2]; 2],
        dt: f64,
        q: f64,
    }

    impl ScalarKalman {
        fn new(init: f64, dt: f64, q: f64) -> ScalarKalman {
            ScalarKalman {
                pos: init,
                vel: 0.0,
                p: [[DIFFUSE_VAR, 0.0], [0.0, DIFFUSE_VAR]],
                dt,
                q,
            }
        }

        fn predict(&mut self) {
            let dt = self.dt;
            let (p00, p01, p10, p11) = (self.p[0][0], self.p[0][1], self.p[1][0], self.p[1][1]);
            self.pos += dt * self.vel;
            let n00 = p00 + dt * (p10 + p01) + dt * dt * p11;
            let n01 = p01 + dt * p11;
            let n10 = p10 + dt * p11;
            let n11 = p11;
            let dt2 = dt * dt;
            self.p = [
                [
                    n00 + self.q * dt2 * dt2 / 4.0,
                    n01 + self.q * dt2 * dt / 2.0,
                ],
                [n10 + self.q * dt2 * dt / 2.0, n11 + self.q * dt2],
            ];
        }

        fn update(&mut self, z: f64, r: f64) {
            let s = self.p[0][0] + r;
            let k0 = self.p[0][0] / s;
            let k1 = self.p[1][0] / s;
            let innov = z - self.pos;
            self.pos += k0 * innov;
            self.vel += k1 * innov;
            let (p00, p01, p10, p11) = (self.p[0][0], self.p[0][1], self.p[1][0], self.p[1][1]);
            self.p = [
                [(1.0 - k0) * p00, (1.0 - k0) * p01],
                [p10 - k1 * p00, p11 - k1 * p01],
            ];
        }
    }

    #[test]
    fn matches_scalar_recursion_on_random_1d_tracks() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let cfg = KalmanConfig {
            gate_m: 3.0,
            process_noise: 0.7,
            meas_noise_vehicle: 0.3,
            meas_noise_infra: 0.2,
        };
        let dt = 0.1;
        for _ in 0..30 {
            let t_h = rng.gen_range(2..15);
            let speed: f64 = rng.gen_range(-8.0..8.0);
            let start: f64 = rng.gen_range(-20.0..20.0);
            let noise = Normal::new(0.0, 0.5).unwrap();
            let xs_a: Vec<f64> = (0..t_h)
                .map(|t| start + speed * dt * t as f64 + noise.sample(&mut rng))
                .collect();
            let xs_b: Vec<f64> = (0..t_h)
                .map(|t| start + speed * dt * t as f64 + noise.sample(&mut rng))
                .collect();
            let a = track(
                xs_a.iter().map(|&x| [x, 0.0]).collect(),
                vec![true; t_h],
                TrackSource::VehicleView,
            );
            let b = track(
                xs_b.iter().map(|&x| [x, 0.0]).collect(),
                vec![true; t_h],
                TrackSource::InfrastructureView,
            );
            let fused = kalman_fuse_pair(&a, &b, dt, &cfg).unwrap();

            let mut oracle = ScalarKalman::new(0.5 * (xs_a[0] + xs_b[0]), dt, cfg.process_noise);
            for t in 0..t_h {
                if t > 0 {
                    oracle.predict();
                }
                oracle.update(xs_a[t], cfg.meas_noise_vehicle);
                oracle.update(xs_b[t], cfg.meas_noise_infra);
                assert!(
                    (fused.positions[t][0] - oracle.pos).abs() < 1e-9,
                    "t={t}: filter {} vs oracle {}",
                    fused.positions[t][0],
                    oracle.pos
                );
                assert!(fused.positions[t][1].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mask_union_and_gap_handling() {
        let t_h = 6;
        let pts: Vec<[f64; 2]> = (0..t_h).map(|t| [t as f64, 1.0]).collect();
        let a = track(
            pts.clone(),
            vec![true, false, false, true, false, false],
            TrackSource::VehicleView,
        );
        let b = track(
            pts.clone(),
            vec![false, true, false, false, false, true],
            TrackSource::InfrastructureView,
        );
        let fused = kalman_fuse_pair(&a, &b, 0.1, &KalmanConfig::default()).unwrap();
        assert_eq!(fused.valid, vec![true, true, false, true, false, true]);
    }

    #[test]
    fn zero_valid_steps_is_an_error() {
        let a = track(
            vec![[0.0, 0.0]; 3],
            vec![false; 3],
            TrackSource::VehicleView,
        );
        let b = track(
            vec![[0.0, 0.0]; 3],
            vec![false; 3],
            TrackSource::InfrastructureView,
        );
        assert!(kalman_fuse_pair(&a, &b, 0.1, &KalmanConfig::default()).is_err());
    }

    #[test]
    fn noisy_identical_truth_reduces_error() {
        // identical constant-velocity truth observed twice with independent
        // noise: fused RMSE beats the better single view on average
        let mut rng = ChaCha8Rng::seed_from_u64(321);
        let dt = 0.1;
        let cfg = KalmanConfig::default();
        let sigma = 0.5;
        let noise = Normal::new(0.0, sigma).unwrap();
        let trials = 120;
        let t_h = 20;
        let (mut se_fused, mut se_a, mut se_b) = (0.0, 0.0, 0.0);
        let mut n_samples = 0.0;
        for _ in 0..trials {
            let vx: f64 = rng.gen_range(-10.0..10.0);
            let vy: f64 = rng.gen_range(-10.0..10.0);
            let truth: Vec<[f64; 2]> = (0..t_h)
                .map(|t| [vx * dt * t as f64, vy * dt * t as f64])
                .collect();
            let obs = |rng: &mut ChaCha8Rng| -> Vec<[f64; 2]> {
                truth
                    .iter()
                    .map(|p| [p[0] + noise.sample(rng), p[1] + noise.sample(rng)])
                    .collect()
            };
            let a = track(obs(&mut rng), vec![true; t_h], TrackSource::VehicleView);
            let b = track(
                obs(&mut rng),
                vec![true; t_h],
                TrackSource::InfrastructureView,
            );
            let fused = kalman_fuse_pair(&a, &b, dt, &cfg).unwrap();
            for t in 0..t_h {
                let d2 = |p: [f64; 2]| (p[0] - truth[t][0]).powi(2) + (p[1] - truth[t][1]).powi(2);
                se_fused += d2(fused.positions[t]);
                se_a += d2(a.positions[t]);
                se_b += d2(b.positions[t]);
                n_samples += 1.0;
            }
        }
        let rmse = |se: f64| (se / n_samples).sqrt();
        assert!(
            rmse(se_fused) <= rmse(se_a).min(rmse(se_b)),
            "fused {} vs views {} / {}",
            rmse(se_fused),
            rmse(se_a),
            rmse(se_b)
        );
    }
}
