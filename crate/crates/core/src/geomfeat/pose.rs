//! Six-point perspective-n-point head pose.
//!
//! The head frame has +x toward the person's left eye side of the image, +y up
//! and +z out of the face. The camera frame has y down and z into the scene,
//! so a head with identity rotation is seen frontal and upright through the
//! fixed flip `diag(1, −1, −1)`.

use nalgebra::{Matrix3, Rotation3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use super::{Point, PoseAngles, SixPoints};
use crate::error::{Error, Result};

type Params = SVector<f64, 6>;
type Residual = SVector<f64, 12>;
type Jacobian = SMatrix<f64, 12, 6>;

/// Canonical 3D positions of the six landmarks, nose tip at the origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceModel {
    pub points: [[f64; 3]; 6],
}

impl Default for FaceModel {
    fn default() -> Self {
        FaceModel {
            points: [
                [0.0, 0.0, 0.0],
                [0.0, -330.0, -65.0],
                [-225.0, 170.0, -135.0],
                [225.0, 170.0, -135.0],
                [-150.0, -150.0, -125.0],
                [150.0, -150.0, -125.0],
            ],
        }
    }
}

impl FaceModel {
    fn point(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.points[i])
    }
}

/// Pinhole intrinsics without distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    /// Focal length equal to the image width, principal point at the centre.
    pub fn for_image(width: f64, height: f64) -> Self {
        Camera {
            focal: width,
            cx: width / 2.0,
            cy: height / 2.0,
        }
    }
}

/// Head rotation (head frame to a camera-aligned upright frame) and the
/// camera-frame position of the nose tip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadPose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl HeadPose {
    pub fn from_euler_degrees(yaw: f64, pitch: f64, roll: f64, translation: Vector3<f64>) -> Self {
        HeadPose {
            rotation: rotation_from_euler(yaw.to_radians(), pitch.to_radians(), roll.to_radians()),
            translation,
        }
    }

    /// (yaw, pitch, roll) in degrees.
    pub fn euler_degrees(&self) -> (f64, f64, f64) {
        let (y, p, r) = euler_from_rotation(&self.rotation);
        (y.to_degrees(), p.to_degrees(), r.to_degrees())
    }

    fn camera_rotation(&self) -> Matrix3<f64> {
        flip() * self.rotation.matrix()
    }
}

fn flip() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0))
}

/// `R = Ry(yaw) · Rx(pitch) · Rz(roll)`, radians.
pub fn rotation_from_euler(yaw: f64, pitch: f64, roll: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), yaw)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch)
        * Rotation3::from_axis_angle(&Vector3::z_axis(), roll)
}

/// Inverse of [`rotation_from_euler`]; pitch lies in [−90°, 90°].
pub fn euler_from_rotation(r: &Rotation3<f64>) -> (f64, f64, f64) {
    let m = r.matrix();
    let pitch = (-m[(1, 2)]).clamp(-1.0, 1.0).asin();
    let yaw = m[(0, 2)].atan2(m[(2, 2)]);
    let roll = m[(1, 0)].atan2(m[(1, 1)]);
    (yaw, pitch, roll)
}

/// Pixel positions of the six model points under `pose`.
pub fn project(model: &FaceModel, pose: &HeadPose, camera: &Camera) -> SixPoints {
    let rc = pose.camera_rotation();
    let mut out = [Point::default(); 6];
    for (i, slot) in out.iter_mut().enumerate() {
        let p = rc * model.point(i) + pose.translation;
        *slot = Point::new(
            camera.focal * p.x / p.z + camera.cx,
            camera.focal * p.y / p.z + camera.cy,
        );
    }
    SixPoints(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSolution {
    pub pose: HeadPose,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub iterations: usize,
    /// Root-mean-square reprojection error in pixels.
    pub rms_error: f64,
}

impl PoseSolution {
    pub fn angles(&self) -> PoseAngles {
        PoseAngles {
            yaw: self.yaw,
            pitch: self.pitch,
        }
    }
}

/// Levenberg–Marquardt over axis-angle rotation and translation with a
/// central-difference Jacobian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSolver {
    pub model: FaceModel,
    pub max_iterations: usize,
    pub step_tolerance: f64,
}

impl Default for PoseSolver {
    fn default() -> Self {
        PoseSolver {
            model: FaceModel::default(),
            max_iterations: 100,
            step_tolerance: 1e-10,
        }
    }
}

impl PoseSolver {
    fn pose_of(theta: &Params) -> HeadPose {
        HeadPose {
            rotation: Rotation3::new(Vector3::new(theta[0], theta[1], theta[2])),
            translation: Vector3::new(theta[3], theta[4], theta[5]),
        }
    }

    fn residual(&self, theta: &Params, target: &[f64; 12], camera: &Camera) -> Residual {
        let proj = project(&self.model, &Self::pose_of(theta), camera).coords();
        Residual::from_fn(|i, _| proj[i] - target[i])
    }

    fn jacobian(&self, theta: &Params, target: &[f64; 12], camera: &Camera) -> Jacobian {
        let mut j = Jacobian::zeros();
        for c in 0..6 {
            let h = 1e-6 * theta[c].abs().max(1.0);
            let mut plus = *theta;
            let mut minus = *theta;
            plus[c] += h;
            minus[c] -= h;
            let d = (self.residual(&plus, target, camera) - self.residual(&minus, target, camera)) / (2.0 * h);
            j.set_column(c, &d);
        }
        j
    }

    pub fn solve(&self, pts: &SixPoints, width: f64, height: f64) -> Result<PoseSolution> {
        check_geometry(pts)?;
        let camera = Camera::for_image(width, height);
        let target = pts.coords();
        let nose = pts.nose_tip();
        let mut theta = Params::from_column_slice(&[
            0.0,
            0.0,
            0.0,
            nose.x - camera.cx,
            nose.y - camera.cy,
            camera.focal,
        ]);
        let mut r = self.residual(&theta, &target, &camera);
        let mut cost = r.norm_squared();
        let mut lambda = 1e-3;
        let mut converged = false;
        let mut iterations = 0;
        while iterations < self.max_iterations {
            iterations += 1;
            let j = self.jacobian(&theta, &target, &camera);
            let a = j.transpose() * j;
            let g = j.transpose() * r;
            let mut accepted = false;
            // Inner loop raises damping until the step lowers the cost.
            while lambda < 1e16 {
                let mut damped = a;
                for d in 0..6 {
                    damped[(d, d)] += lambda * a[(d, d)].max(1e-12);
                }
                let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
                    lambda *= 10.0;
                    continue;
                };
                let cand = theta + step;
                let cand_r = self.residual(&cand, &target, &camera);
                let cand_cost = cand_r.norm_squared();
                if cand_cost.is_finite() && cand_cost <= cost {
                    theta = cand;
                    r = cand_r;
                    cost = cand_cost;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if step.norm() < self.step_tolerance {
                        converged = true;
                    }
                    break;
                }
                lambda *= 10.0;
            }
            // No damping level improves the cost: already at a minimum.
            if !accepted || converged || cost == 0.0 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Convergence(format!(
                "head pose did not converge in {} iterations (rms {:.3e} px)",
                self.max_iterations,
                (cost / 12.0).sqrt()
            )));
        }
        let pose = Self::pose_of(&theta);
        let rc = pose.camera_rotation();
        if (0..6).any(|i| (rc * self.model.point(i) + pose.translation).z <= 0.0) {
            return Err(Error::Convergence("head pose solution lies behind the camera".into()));
        }
        let (yaw, pitch, roll) = pose.euler_degrees();
        Ok(PoseSolution {
            pose,
            yaw,
            pitch,
            roll,
            iterations,
            rms_error: (cost / 12.0).sqrt(),
        })
    }
}

/// Rejects non-finite input and point sets that are (nearly) collinear.
fn check_geometry(pts: &SixPoints) -> Result<()> {
    if pts.0.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return Err(Error::Degenerate("landmarks contain non-finite coordinates".into()));
    }
    let n = pts.0.len() as f64;
    let mx = pts.0.iter().map(|p| p.x).sum::<f64>() / n;
    let my = pts.0.iter().map(|p| p.y).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in &pts.0 {
        let (dx, dy) = (p.x - mx, p.y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    if tr <= 0.0 || det <= 1e-9 * tr * tr {
        return Err(Error::Degenerate("landmarks are collinear or coincident".into()));
    }
    Ok(())
}

/// Yaw and pitch in degrees with the default face model and solver.
pub fn estimate_head_pose(pts: &SixPoints, width: f64, height: f64) -> Result<PoseAngles> {
    Ok(PoseSolver::default().solve(pts, width, height)?.angles())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euler_roundtrip() {
        for &(y, p, r) in &[(0.3, -0.2, 0.1), (-2.0, 1.2, -0.5), (0.0, 0.0, 0.0)] {
            let (y2, p2, r2) = euler_from_rotation(&rotation_from_euler(y, p, r));
            assert!((y - y2).abs() < 1e-12 && (p - p2).abs() < 1e-12 && (r - r2).abs() < 1e-12);
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let line = SixPoints(std::array::from_fn(|i| Point::new(i as f64 * 10.0, i as f64 * 5.0)));
        assert!(matches!(estimate_head_pose(&line, 640.0, 480.0), Err(Error::Degenerate(_))));
        let same = SixPoints([Point::new(5.0, 5.0); 6]);
        assert!(matches!(estimate_head_pose(&same, 640.0, 480.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn identity_pose_is_frontal() {
        let cam = Camera::for_image(640.0, 480.0);
        let pose = HeadPose::from_euler_degrees(0.0, 0.0, 0.0, Vector3::new(0.0, 0.0, 3000.0));
        let pts = project(&FaceModel::default(), &pose, &cam);
        // Eyes above the nose in the image (smaller v), chin below.
        assert!(pts.0[2].y < pts.0[0].y && pts.0[1].y > pts.0[0].y);
        let a = estimate_head_pose(&pts, 640.0, 480.0).unwrap();
        assert!(a.yaw.abs() < 0.01 && a.pitch.abs() < 0.01, "{a:?}");
    }
}
