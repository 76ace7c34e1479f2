use nalgebra::{Matrix2x3, Matrix3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use supergauss::scene::{covariance, project, quaternion_to_rotation, Camera, COV2D_DILATION};

fn random_quat(rng: &mut impl Rng) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

fn random_camera(rng: &mut impl Rng) -> Camera {
    let eye = Vector3::from_fn(|_, _| rng.gen_range(-4.0..4.0)) + Vector3::new(0.0, 0.0, 6.0);
    let target = Vector3::from_fn(|_, _| rng.gen_range(-0.3..0.3));
    let f = rng.gen_range(30.0..120.0);
    Camera::look_at(eye, target, Vector3::new(0.1, 0.2, 1.0), f, f * rng.gen_range(0.9..1.1), 64, 48).unwrap()
}

/// Descending eigenvalues of a symmetric 3×3 matrix, closed form.
fn eigenvalues(a: &Matrix3<f64>) -> [f64; 3] {
    let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
    let q = a.trace() / 3.0;
    let p2 = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    if p == 0.0 {
        return [q; 3];
    }
    let b = (a - Matrix3::identity() * q) / p;
    let phi = (b.determinant() / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

#[test]
fn covariance_eigenvalues_are_squared_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let ls = Vector3::from_fn(|_, _| rng.gen_range(-2.0..1.0));
        let sigma = covariance(random_quat(&mut rng), ls).unwrap();
        let mut want: Vec<f64> = ls.iter().map(|s| (2.0 * s).exp()).collect();
        want.sort_by(|a, b| b.total_cmp(a));
        for (got, want) in eigenvalues(&sigma).iter().zip(&want) {
            assert!((got - want).abs() <= 1e-9 * want.max(1.0), "{got} vs {want}");
        }
    }
}

#[test]
fn projected_covariance_matches_numeric_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let cam = random_camera(&mut rng);
        let x = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let sigma = covariance(random_quat(&mut rng), Vector3::from_fn(|_, _| rng.gen_range(-3.0..-0.5))).unwrap();
        let p = project(&x, &sigma, &cam).unwrap();

        let t = cam.to_camera(&x);
        let pix = |t: Vector3<f64>| [cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy];
        let mut j = Matrix2x3::zeros();
        for c in 0..3 {
            let h = 1e-6 * t[c].abs().max(1.0);
            let mut up = t;
            let mut down = t;
            up[c] += h;
            down[c] -= h;
            let (a, b) = (pix(up), pix(down));
            j[(0, c)] = (a[0] - b[0]) / (2.0 * h);
            j[(1, c)] = (a[1] - b[1]) / (2.0 * h);
        }
        let w = cam.rotation;
        let want = j * w * sigma * w.transpose() * j.transpose();
        for r in 0..2 {
            for c in 0..2 {
                let got = p.cov[(r, c)] - if r == c { COV2D_DILATION } else { 0.0 };
                let scale = want[(r, c)].abs().max(want.norm() * 1e-3);
                assert!((got - want[(r, c)]).abs() <= 1e-4 * scale, "{got} vs {}", want[(r, c)]);
            }
        }
        let m = pix(t);
        assert!((p.mean.x - m[0]).abs() < 1e-12 && (p.mean.y - m[1]).abs() < 1e-12);
    }
}

#[test]
fn projection_is_rigid_motion_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let cam = random_camera(&mut rng);
        let x = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let sigma = covariance(random_quat(&mut rng), Vector3::from_fn(|_, _| rng.gen_range(-3.0..0.0))).unwrap();
        let a = quaternion_to_rotation(random_quat(&mut rng)).unwrap();
        let ta = Vector3::from_fn(|_, _| rng.gen_range(-5.0..5.0));

        // move the world by (a, ta) and the camera along with it
        let x2 = a * x + ta;
        let sigma2 = a * sigma * a.transpose();
        let r2 = cam.rotation * a.transpose();
        let t2 = cam.translation - r2 * ta;
        let cam2 = Camera::new(r2, t2, cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height).unwrap();

        let p1 = project(&x, &sigma, &cam).unwrap();
        let p2 = project(&x2, &sigma2, &cam2).unwrap();
        assert!((p1.mean - p2.mean).norm() < 1e-10);
        assert!((p1.cov - p2.cov).norm() < 1e-10 * p1.cov.norm().max(1.0));
        assert!((p1.depth - p2.depth).abs() < 1e-10);
    }
}

proptest! {
    #[test]
    fn projected_covariance_is_floored(
        q in prop::array::uniform4(-1.0f64..1.0),
        ls in prop::array::uniform3(-8.0f64..1.0),
        x in prop::array::uniform3(-1.0f64..1.0),
    ) {
        prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let cam = Camera::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 5.0), 50.0, 50.0, 32.0, 32.0, 64, 64).unwrap();
        let sigma = covariance(q, Vector3::from(ls)).unwrap();
        let p = project(&Vector3::from(x), &sigma, &cam).unwrap();
        prop_assert_eq!(p.cov[(0, 1)], p.cov[(1, 0)]);
        let eig = p.cov.symmetric_eigenvalues();
        prop_assert!(eig.min() >= COV2D_DILATION * (1.0 - 1e-9));
    }

    #[test]
    fn quaternion_sign_does_not_matter(q in prop::array::uniform4(-1.0f64..1.0), ls in prop::array::uniform3(-3.0f64..1.0)) {
        prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let a = covariance(q, Vector3::from(ls)).unwrap();
        let b = covariance(q.map(|v| -v), Vector3::from(ls)).unwrap();
        prop_assert_eq!(a, b);
    }
}
