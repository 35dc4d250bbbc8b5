//! The differentiable stand-in for a 3D representation: a set of `K` points
//! in `R^d`, rendered under orthonormal view transforms.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::MixturePrior;
use crate::schedule::DISCRETE_STEPS;
use crate::{Matrix, Vector};

const ORTHONORMAL_TOLERANCE: f64 = 1e-10;

/// `K` points in dimension `d`, stored flat as `[p_0, p_1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    dimension: usize,
    data: Vector,
}

impl SceneParams {
    pub fn new(dimension: usize, data: Vector) -> Result<Self> {
        if dimension == 0 || !data.len().is_multiple_of(dimension) {
            return Err(Error::Dimension {
                expected: dimension,
                got: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                iteration: 0,
                detail: "scene parameters must be finite".into(),
            });
        }
        Ok(Self { dimension, data })
    }

    pub fn from_points(points: &[Vector]) -> Result<Self> {
        let dimension = points.first().map_or(0, |p| p.len());
        let flat: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
        Self::new(dimension, Vector::from_vec(flat))
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn n_points(&self) -> usize {
        self.data.len() / self.dimension
    }

    pub fn as_vector(&self) -> &Vector {
        &self.data
    }

    pub fn as_vector_mut(&mut self) -> &mut Vector {
        &mut self.data
    }

    pub fn point(&self, k: usize) -> Vector {
        self.data.rows(k * self.dimension, self.dimension).into_owned()
    }

    pub fn points(&self) -> Vec<Vector> {
        (0..self.n_points()).map(|k| self.point(k)).collect()
    }
}

/// Camera-pose analog: an orthonormal matrix with determinant `+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTransform {
    matrix: Matrix,
}

impl ViewTransform {
    pub fn identity(dimension: usize) -> Self {
        Self {
            matrix: Matrix::identity(dimension, dimension),
        }
    }

    /// Planar rotation by `angle` radians.
    pub fn rotation_2d(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            matrix: Matrix::from_row_slice(2, 2, &[c, -s, s, c]),
        }
    }

    pub fn from_matrix(matrix: Matrix) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::View("matrix must be square".into()));
        }
        let n = matrix.nrows();
        let gram = matrix.transpose() * &matrix;
        if (gram - Matrix::identity(n, n)).amax() > ORTHONORMAL_TOLERANCE {
            return Err(Error::View("matrix is not orthonormal".into()));
        }
        if (matrix.determinant() - 1.0).abs() > ORTHONORMAL_TOLERANCE {
            return Err(Error::View("determinant must be +1".into()));
        }
        Ok(Self { matrix })
    }

    /// Draws a uniformly random rotation (a uniform angle when `d = 2`).
    pub fn random<R: Rng + ?Sized>(dimension: usize, rng: &mut R) -> Self {
        match dimension {
            1 => Self::identity(1),
            2 => Self::rotation_2d(rng.random_range(0.0..std::f64::consts::TAU)),
            d => {
                let g = Matrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
                let qr = g.qr();
                let mut q = qr.q();
                let r = qr.r();
                for j in 0..d {
                    if r[(j, j)] < 0.0 {
                        q.column_mut(j).neg_mut();
                    }
                }
                if q.determinant() < 0.0 {
                    q.column_mut(0).neg_mut();
                }
                Self { matrix: q }
            }
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn dimension(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn compose(&self, other: &ViewTransform) -> ViewTransform {
        ViewTransform {
            matrix: &self.matrix * &other.matrix,
        }
    }

    /// Maps a gradient with respect to the rendered view back onto `theta`
    /// (the transpose of the block-diagonal render Jacobian).
    pub fn pullback(&self, grad_view: &Vector) -> Vector {
        let d = self.dimension();
        let mut out = Vector::zeros(grad_view.len());
        let rt = self.matrix.transpose();
        for k in 0..grad_view.len() / d {
            let block = &rt * grad_view.rows(k * d, d);
            out.rows_mut(k * d, d).copy_from(&block);
        }
        out
    }

    /// Full Jacobian `d z_0 / d theta`: `K` copies of the view matrix on the diagonal.
    pub fn render_jacobian(&self, n_points: usize) -> Matrix {
        let d = self.dimension();
        let mut jac = Matrix::zeros(n_points * d, n_points * d);
        for k in 0..n_points {
            jac.view_mut((k * d, k * d), (d, d)).copy_from(&self.matrix);
        }
        jac
    }
}

/// `z_0 = g(c, theta)`: applies the view transform to every point.
pub fn render(theta: &SceneParams, view: &ViewTransform) -> Result<Vector> {
    let d = theta.dimension();
    if view.dimension() != d {
        return Err(Error::Dimension {
            expected: d,
            got: view.dimension(),
        });
    }
    let mut out = Vector::zeros(theta.as_vector().len());
    for k in 0..theta.n_points() {
        let p = view.matrix() * theta.as_vector().rows(k * d, d);
        out.rows_mut(k * d, d).copy_from(&p);
    }
    Ok(out)
}

/// The data distribution as seen from view `c`.
pub fn view_prior(base: &MixturePrior, view: &ViewTransform) -> MixturePrior {
    base.transformed(view.matrix())
}

/// Uniform timestep sampling with a linearly decaying warm-up extension of
/// the upper bound. Bounds are in 1000-step units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimestepSampler {
    pub t_low: f64,
    pub t_high_base: f64,
    pub t_warm_init: f64,
    pub warm_iters: usize,
}

impl Default for TimestepSampler {
    fn default() -> Self {
        Self {
            t_low: 20.0,
            t_high_base: 500.0,
            t_warm_init: 480.0,
            warm_iters: 1500,
        }
    }
}

impl TimestepSampler {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_low.is_finite() && self.t_high_base.is_finite() && self.t_low < self.t_high_base) {
            return Err(Error::config("sampler.t_low", "must be finite and below t_high_base"));
        }
        if !(self.t_warm_init.is_finite() && self.t_warm_init >= 0.0) {
            return Err(Error::config("sampler.t_warm_init", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn t_warm(&self, iteration: usize) -> f64 {
        if self.warm_iters == 0 || iteration >= self.warm_iters {
            0.0
        } else {
            self.t_warm_init * (1.0 - iteration as f64 / self.warm_iters as f64)
        }
    }

    /// Support `[low, high]` of the draw at `iteration`, in schedule units.
    pub fn support(&self, iteration: usize) -> (f64, f64) {
        (
            self.t_low / DISCRETE_STEPS,
            (self.t_high_base + self.t_warm(iteration)) / DISCRETE_STEPS,
        )
    }

    pub fn sample<R: Rng + ?Sized>(&self, iteration: usize, rng: &mut R) -> f64 {
        let (lo, hi) = self.support(iteration);
        rng.random_range(lo..hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{Condition, EpsilonModel};
    use crate::schedule::NoiseSchedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn theta() -> SceneParams {
        SceneParams::new(2, Vector::from_vec(vec![1.0, 2.0, -0.5, 0.25, 3.0, -1.0])).unwrap()
    }

    #[test]
    fn identity_render() {
        let th = theta();
        assert_eq!(render(&th, &ViewTransform::identity(2)).unwrap(), *th.as_vector());
    }

    #[test]
    fn half_turn_is_an_involution() {
        let th = theta();
        let half = ViewTransform::rotation_2d(std::f64::consts::PI);
        let once = SceneParams::new(2, render(&th, &half).unwrap()).unwrap();
        let twice = render(&once, &half).unwrap();
        assert!((twice - th.as_vector()).norm() < 1e-12);
    }

    #[test]
    fn random_views_are_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in 1..6 {
            let v = ViewTransform::random(d, &mut rng);
            assert!(ViewTransform::from_matrix(v.matrix().clone()).is_ok());
        }
        let reflection = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(ViewTransform::from_matrix(reflection).is_err());
        assert!(ViewTransform::from_matrix(Matrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])).is_err());
    }

    #[test]
    fn pullback_matches_full_jacobian() {
        let v = ViewTransform::rotation_2d(0.7);
        let g = Vector::from_vec(vec![0.3, -1.0, 2.0, 0.5, -0.2, 0.1]);
        let full = v.render_jacobian(3).transpose() * &g;
        assert!((v.pullback(&g) - full).norm() < 1e-14);
    }

    #[test]
    fn view_prior_identity_and_composition() {
        let base = MixturePrior::desk_default();
        assert_eq!(view_prior(&base, &ViewTransform::identity(2)), base);
        let (a, b) = (ViewTransform::rotation_2d(0.4), ViewTransform::rotation_2d(1.1));
        let twice = view_prior(&view_prior(&base, &a), &b);
        let once = view_prior(&base, &b.compose(&a));
        for (x, y) in twice.means().iter().zip(once.means()) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn score_is_rotation_equivariant() {
        let base = MixturePrior::desk_default();
        let view = ViewTransform::rotation_2d(2.3);
        let sch = NoiseSchedule::default();
        let plain = EpsilonModel::new(sch, base.clone());
        let rotated = EpsilonModel::new(sch, view_prior(&base, &view));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let z = Vector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let t = rng.random_range(0.01..0.99);
            for cond in [Condition::Unconditional, Condition::prompt("b")] {
                let lhs = rotated.epsilon(&(view.matrix() * &z), t, &cond).unwrap();
                let rhs = view.matrix() * plain.epsilon(&z, t, &cond).unwrap();
                assert!((lhs - rhs).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn sampler_support_follows_warmup() {
        let s = TimestepSampler::default();
        assert_eq!(s.support(0), (0.02, 0.98));
        assert_eq!(s.support(1500), (0.02, 0.5));
        assert_eq!(s.support(4000), (0.02, 0.5));
        let (_, hi) = s.support(750);
        assert!((hi - 0.74).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for it in [0, 300, 1499, 2000] {
            let (lo, hi) = s.support(it);
            for _ in 0..100 {
                let t = s.sample(it, &mut rng);
                assert!(t >= lo && t < hi);
            }
        }
    }
}
