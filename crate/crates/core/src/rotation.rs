//! Unit-quaternion rotations.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Rotation stored as a unit quaternion `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub q: [f64; 4],
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation {
            q: [1.0, 0.0, 0.0, 0.0],
        }
    }

    /// Normalizes `q`; returns `None` for a zero or non-finite quaternion.
    pub fn from_quaternion(q: [f64; 4]) -> Option<Self> {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !n.is_finite() || n == 0.0 {
            return None;
        }
        Some(Rotation {
            q: q.map(|v| v / n),
        })
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let n = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (s, c) = (angle / 2.0).sin_cos();
        Rotation {
            q: [c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n],
        }
    }

    /// Uniform sample on SO(3) from a normalized 4D Gaussian.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            if let Some(r) = Rotation::from_quaternion(q) {
                return r;
            }
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let [w, x, y, z] = self.q;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = self.matrix();
        std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
    }

    /// `R^T v`, the inverse rotation.
    pub fn apply_inverse(&self, v: [f64; 3]) -> [f64; 3] {
        let m = self.matrix();
        std::array::from_fn(|i| m[0][i] * v[0] + m[1][i] * v[1] + m[2][i] * v[2])
    }

    pub fn is_identity(&self) -> bool {
        let [w, x, y, z] = self.q;
        w.abs() == 1.0 && x == 0.0 && y == 0.0 && z == 0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(m: &[[f64; 3]; 3]) -> f64 {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    proptest! {
        #[test]
        fn matrix_is_special_orthogonal(q in prop::array::uniform4(-1.0f64..1.0)) {
            prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-6);
            let r = Rotation::from_quaternion(q).unwrap();
            let m = r.matrix();
            for i in 0..3 {
                for j in 0..3 {
                    let g: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                    let e = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((g - e).abs() < 1e-10);
                }
            }
            prop_assert!((det(&m) - 1.0).abs() < 1e-10);
            let v = [0.3, -1.2, 0.7];
            let back = r.apply_inverse(r.apply(v));
            for i in 0..3 {
                prop_assert!((back[i] - v[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn axis_angle_about_z() {
        let r = Rotation::from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let v = r.apply([1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_rotations_average_to_zero() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 20000;
        let mut mean = [[0.0; 3]; 3];
        for _ in 0..n {
            let m = Rotation::random(&mut rng).matrix();
            for i in 0..3 {
                for j in 0..3 {
                    mean[i][j] += m[i][j] / n as f64;
                }
            }
        }
        let bound = 3.0 / (n as f64).sqrt();
        for row in mean {
            for v in row {
                assert!(v.abs() <= bound, "{v}");
            }
        }
    }
}
