//! Gaussian-process regression over one-hot-encoded material assignments and
//! the expected-improvement acquisition function.
//!
//! The GP uses fixed hyperparameters with per-episode target standardization:
//! variance 1, length scale sqrt(K*B)/2, noise 1e-6. Models are immutable;
//! `fit` returns a new value, and `predict`/`expected_improvement` are
//! read-only and callable concurrently.

use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("material index {index} out of range (space size {space})")]
    IndexOutOfRange { index: usize, space: usize },
    #[error("encoded vector length {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("kernel matrix is not positive definite even with jitter")]
    NotPositiveDefinite,
}

/// Maps an assignment over K objects with B materials to a K*B binary vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneHotCodec {
    pub num_objects: usize,
    pub num_materials: usize,
}

impl OneHotCodec {
    pub fn encoded_len(&self) -> usize {
        self.num_objects * self.num_materials
    }

    pub fn encode(&self, materials: &[usize]) -> Result<Vec<f64>, SurrogateError> {
        if materials.len() != self.num_objects {
            return Err(SurrogateError::DimensionMismatch {
                got: materials.len() * self.num_materials,
                expected: self.encoded_len(),
            });
        }
        let mut v = vec![0.0; self.encoded_len()];
        for (k, &b) in materials.iter().enumerate() {
            if b >= self.num_materials {
                return Err(SurrogateError::IndexOutOfRange {
                    index: b,
                    space: self.num_materials,
                });
            }
            v[k * self.num_materials + b] = 1.0;
        }
        Ok(v)
    }

    pub fn decode(&self, v: &[f64]) -> Result<Vec<usize>, SurrogateError> {
        if v.len() != self.encoded_len() {
            return Err(SurrogateError::DimensionMismatch {
                got: v.len(),
                expected: self.encoded_len(),
            });
        }
        Ok((0..self.num_objects)
            .map(|k| {
                let block = &v[k * self.num_materials..(k + 1) * self.num_materials];
                block
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    Rbf,
    Matern52,
}

#[derive(Debug, Clone, Copy)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub variance: f64,
    pub length_scale: f64,
}

impl KernelConfig {
    /// Default hyperparameters for an encoded space of the given width.
    pub fn for_dim(family: KernelFamily, encoded_len: usize) -> KernelConfig {
        KernelConfig {
            family,
            variance: 1.0,
            length_scale: (encoded_len as f64).sqrt() / 2.0,
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match self.family {
            KernelFamily::Rbf => {
                self.variance * (-d2 / (2.0 * self.length_scale * self.length_scale)).exp()
            }
            KernelFamily::Matern52 => {
                let r = d2.sqrt() / self.length_scale;
                let s = 5f64.sqrt() * r;
                self.variance * (1.0 + s + 5.0 * r * r / 3.0) * (-s).exp()
            }
        }
    }
}

/// GP posterior over standardized targets with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub kernel: KernelConfig,
    pub noise_variance: f64,
    train_x: Vec<Vec<f64>>,
    train_y: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
    chol: Option<Array2<f64>>,
    alpha: Array1<f64>,
}

impl GpModel {
    pub fn new(kernel: KernelConfig, noise_variance: f64) -> GpModel {
        GpModel {
            kernel,
            noise_variance,
            train_x: Vec::new(),
            train_y: Vec::new(),
            y_mean: 0.0,
            y_scale: 1.0,
            chol: None,
            alpha: Array1::zeros(0),
        }
    }

    pub fn len(&self) -> usize {
        self.train_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_x.is_empty()
    }

    /// Adds one observation and refreshes the factorization.
    pub fn fit(&self, x: Vec<f64>, y: f64) -> Result<GpModel, SurrogateError> {
        if let Some(first) = self.train_x.first() {
            if x.len() != first.len() {
                return Err(SurrogateError::DimensionMismatch {
                    got: x.len(),
                    expected: first.len(),
                });
            }
        }
        let mut next = self.clone();
        next.train_x.push(x);
        next.train_y.push(y);
        next.refit()?;
        Ok(next)
    }

    pub fn fit_all(
        kernel: KernelConfig,
        noise_variance: f64,
        xs: Vec<Vec<f64>>,
        ys: Vec<f64>,
    ) -> Result<GpModel, SurrogateError> {
        let mut m = GpModel::new(kernel, noise_variance);
        m.train_x = xs;
        m.train_y = ys;
        m.refit()?;
        Ok(m)
    }

    fn refit(&mut self) -> Result<(), SurrogateError> {
        let n = self.train_x.len();
        if n == 0 {
            self.y_mean = 0.0;
            self.y_scale = 1.0;
            self.chol = None;
            self.alpha = Array1::zeros(0);
            return Ok(());
        }
        // Standardization stats over distinct observations only, so repeated
        // evaluations of the same candidate leave the posterior unchanged.
        let mut unique: Vec<(&Vec<f64>, f64)> = Vec::new();
        for (x, &y) in self.train_x.iter().zip(&self.train_y) {
            if !unique
                .iter()
                .any(|(ux, uy)| *uy == y && ux.as_slice() == x.as_slice())
            {
                unique.push((x, y));
            }
        }
        let un = unique.len() as f64;
        self.y_mean = unique.iter().map(|(_, y)| y).sum::<f64>() / un;
        let var = unique
            .iter()
            .map(|(_, y)| (y - self.y_mean) * (y - self.y_mean))
            .sum::<f64>()
            / un;
        self.y_scale = var.sqrt().max(1e-9);

        let mut gram = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                gram[(i, j)] = self.kernel.eval(&self.train_x[i], &self.train_x[j]);
            }
            gram[(i, i)] += self.noise_variance;
        }
        let l = cholesky_with_jitter(gram)?;
        let ys: Array1<f64> = self
            .train_y
            .iter()
            .map(|y| (y - self.y_mean) / self.y_scale)
            .collect();
        let tmp = solve_lower(&l, &ys);
        self.alpha = solve_upper_transposed(&l, &tmp);
        self.chol = Some(l);
        Ok(())
    }

    /// Posterior mean and standard deviation at `x` (de-standardized).
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64), SurrogateError> {
        if self.train_x.is_empty() {
            return Ok((0.0, self.kernel.variance.sqrt()));
        }
        if x.len() != self.train_x[0].len() {
            return Err(SurrogateError::DimensionMismatch {
                got: x.len(),
                expected: self.train_x[0].len(),
            });
        }
        let kstar: Array1<f64> = self
            .train_x
            .iter()
            .map(|t| self.kernel.eval(t, x))
            .collect();
        let mean_std = kstar.dot(&self.alpha);
        let l = self.chol.as_ref().expect("factorization present");
        let v = solve_lower(l, &kstar);
        let mut var = self.kernel.eval(x, x) - v.dot(&v);
        if var < 1e-12 {
            var = 0.0;
        }
        Ok((
            self.y_mean + self.y_scale * mean_std,
            self.y_scale * var.sqrt(),
        ))
    }
}

fn cholesky_with_jitter(mut a: Array2<f64>) -> Result<Array2<f64>, SurrogateError> {
    let n = a.nrows();
    let mut jitter = 0.0;
    for _ in 0..8 {
        match cholesky(&a) {
            Some(l) => return Ok(l),
            None => {
                let bump = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
                for i in 0..n {
                    a[(i, i)] += bump - jitter;
                }
                jitter = bump;
            }
        }
    }
    Err(SurrogateError::NotPositiveDefinite)
}

fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[(i, i)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Some(l)
}

fn solve_lower(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = b.len();
    let mut x = Array1::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[(i, k)] * x[k];
        }
        x[i] = sum / l[(i, i)];
    }
    x
}

fn solve_upper_transposed(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = b.len();
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut sum = b[i];
        for k in (i + 1)..n {
            sum -= l[(k, i)] * x[k];
        }
        x[i] = sum / l[(i, i)];
    }
    x
}

/// Standard normal density.
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF via the complementary error function.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Expected improvement for maximization: with Z = (mu - f_best - eps) / sigma,
/// EI = (mu - f_best - eps) * Phi(Z) + sigma * phi(Z), and 0 when sigma = 0.
///
/// The tuner minimizes the gap, so it feeds the GP negated objectives and this
/// formula applies unchanged.
pub fn expected_improvement(
    model: &GpModel,
    x: &[f64],
    f_best: f64,
    epsilon: f64,
) -> Result<f64, SurrogateError> {
    let (mu, sigma) = model.predict(x)?;
    Ok(ei_closed_form(mu, sigma, f_best, epsilon))
}

pub fn ei_closed_form(mu: f64, sigma: f64, f_best: f64, epsilon: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    let improve = mu - f_best - epsilon;
    let z = improve / sigma;
    (improve * std_normal_cdf(z) + sigma * std_normal_pdf(z)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_gp(dim: usize) -> GpModel {
        GpModel::new(
            KernelConfig::for_dim(KernelFamily::Matern52, dim),
            1e-6,
        )
    }

    #[test]
    fn one_hot_encoding_basics() {
        let codec = OneHotCodec {
            num_objects: 1,
            num_materials: 9,
        };
        let v = codec.encode(&[3]).unwrap();
        assert_eq!(v, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let codec2 = OneHotCodec {
            num_objects: 2,
            num_materials: 3,
        };
        assert_eq!(codec2.encode(&[0, 2]).unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(codec2.encode(&[0, 3]).is_err());
    }

    #[test]
    fn empty_model_returns_prior() {
        let gp = default_gp(9);
        let codec = OneHotCodec {
            num_objects: 1,
            num_materials: 9,
        };
        let (mu, sigma) = gp.predict(&codec.encode(&[4]).unwrap()).unwrap();
        assert_eq!(mu, 0.0);
        assert_relative_eq!(sigma, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn single_point_interpolates() {
        let codec = OneHotCodec {
            num_objects: 1,
            num_materials: 9,
        };
        let x0 = codec.encode(&[2]).unwrap();
        let gp = default_gp(9).fit(x0.clone(), 5.0).unwrap();
        let (mu, sigma) = gp.predict(&x0).unwrap();
        assert!((mu - 5.0).abs() < 1e-6);
        assert!(sigma <= 1e-3);
    }

    /// Independent dense solve: explicit Gauss-Jordan inverse of the Gram
    /// matrix, no Cholesky, its own standardization.
    fn dense_oracle(
        kernel: &KernelConfig,
        noise: f64,
        xs: &[Vec<f64>],
        ys: &[f64],
        q: &[f64],
    ) -> (f64, f64) {
        let n = xs.len();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n as f64;
        let scale = var.sqrt().max(1e-9); // inputs are distinct in this test
        let mut aug = vec![vec![0.0; 2 * n]; n];
        for i in 0..n {
            for j in 0..n {
                aug[i][j] = kernel.eval(&xs[i], &xs[j]) + if i == j { noise } else { 0.0 };
            }
            aug[i][n + i] = 1.0;
        }
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&a, &b| aug[a][col].abs().partial_cmp(&aug[b][col].abs()).unwrap())
                .unwrap();
            aug.swap(col, pivot);
            let p = aug[col][col];
            for v in aug[col].iter_mut() {
                *v /= p;
            }
            for row in 0..n {
                if row != col {
                    let f = aug[row][col];
                    for k in 0..2 * n {
                        aug[row][k] -= f * aug[col][k];
                    }
                }
            }
        }
        let kq: Vec<f64> = xs.iter().map(|x| kernel.eval(x, q)).collect();
        let yq: Vec<f64> = ys.iter().map(|y| (y - mean) / scale).collect();
        let mut mu = 0.0;
        let mut kinv_k = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                kinv_k[i] += aug[i][n + j] * kq[j];
            }
        }
        for i in 0..n {
            mu += kinv_k[i] * yq[i];
        }
        let mut var_q = kernel.eval(q, q);
        for i in 0..n {
            var_q -= kq[i] * kinv_k[i];
        }
        if var_q < 1e-12 {
            var_q = 0.0;
        }
        (mean + scale * mu, scale * var_q.sqrt())
    }

    #[test]
    fn posterior_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let codec = OneHotCodec {
            num_objects: 2,
            num_materials: 5,
        };
        for trial in 0..6 {
            let n = 5 + trial;
            let mut xs: Vec<Vec<f64>> = Vec::new();
            let mut ys = Vec::new();
            let mut gp = default_gp(codec.encoded_len());
            while xs.len() < n {
                let assign: Vec<usize> = (0..2).map(|_| rng.gen_range(0..5)).collect();
                let x = codec.encode(&assign).unwrap();
                if xs.contains(&x) {
                    continue;
                }
                let y: f64 = rng.gen_range(-10.0..10.0);
                gp = gp.fit(x.clone(), y).unwrap();
                xs.push(x);
                ys.push(y);
            }
            let q = codec
                .encode(&[rng.gen_range(0..5), rng.gen_range(0..5)])
                .unwrap();
            let (mu, sigma) = gp.predict(&q).unwrap();
            let (mu_o, sigma_o) = dense_oracle(&gp.kernel, 1e-6, &xs, &ys, &q);
            assert_relative_eq!(mu, mu_o, epsilon = 1e-8, max_relative = 1e-8);
            assert_relative_eq!(sigma, sigma_o, epsilon = 1e-8, max_relative = 1e-8);
        }
    }

    #[test]
    fn ei_boundary_and_closed_form_value() {
        assert_eq!(ei_closed_form(3.0, 0.0, 1.0, 0.01), 0.0);
        // mu = f_best + eps puts Z at 0, so EI = sigma * phi(0).
        let ei = ei_closed_form(1.01, 2.0, 1.0, 0.01);
        assert_relative_eq!(ei, 2.0 * std_normal_pdf(0.0), epsilon = 1e-12);
        assert_relative_eq!(ei, 0.7978845608028654, epsilon = 1e-9);
    }

    #[test]
    fn duplicated_noiseless_point_leaves_mean_unchanged() {
        let codec = OneHotCodec {
            num_objects: 2,
            num_materials: 4,
        };
        let xs = [
            codec.encode(&[0, 1]).unwrap(),
            codec.encode(&[2, 3]).unwrap(),
            codec.encode(&[1, 1]).unwrap(),
        ];
        let ys = [1.0, -2.0, 0.5];
        let mut gp1 = default_gp(codec.encoded_len());
        for (x, y) in xs.iter().zip(ys) {
            gp1 = gp1.fit(x.clone(), y).unwrap();
        }
        let gp2 = gp1.fit(xs[0].clone(), ys[0]).unwrap();
        let q = codec.encode(&[3, 0]).unwrap();
        let (m1, _) = gp1.predict(&q).unwrap();
        let (m2, _) = gp2.predict(&q).unwrap();
        assert!((m1 - m2).abs() < 1e-4, "m1={m1} m2={m2}");
    }

    proptest! {
        #[test]
        fn kernel_is_symmetric_with_unit_diagonal(
            a in proptest::collection::vec(0usize..6, 3),
            b in proptest::collection::vec(0usize..6, 3),
        ) {
            let codec = OneHotCodec { num_objects: 3, num_materials: 6 };
            let ka = codec.encode(&a).unwrap();
            let kb = codec.encode(&b).unwrap();
            for family in [KernelFamily::Rbf, KernelFamily::Matern52] {
                let k = KernelConfig::for_dim(family, codec.encoded_len());
                prop_assert!((k.eval(&ka, &kb) - k.eval(&kb, &ka)).abs() < 1e-15);
                prop_assert!((k.eval(&ka, &ka) - k.variance).abs() < 1e-15);
            }
        }

        #[test]
        fn encoded_distance_is_twice_hamming(
            a in proptest::collection::vec(0usize..5, 4),
            b in proptest::collection::vec(0usize..5, 4),
        ) {
            let codec = OneHotCodec { num_objects: 4, num_materials: 5 };
            let ka = codec.encode(&a).unwrap();
            let kb = codec.encode(&b).unwrap();
            let d2: f64 = ka.iter().zip(&kb).map(|(x, y)| (x - y) * (x - y)).sum();
            let hamming = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            prop_assert!((d2 - 2.0 * hamming as f64).abs() < 1e-12);
        }

        #[test]
        fn decode_inverts_encode(a in proptest::collection::vec(0usize..7, 3)) {
            let codec = OneHotCodec { num_objects: 3, num_materials: 7 };
            prop_assert_eq!(codec.decode(&codec.encode(&a).unwrap()).unwrap(), a);
        }

        #[test]
        fn ei_nonnegative_and_increasing_in_sigma(
            mu in -5.0f64..5.0,
            f_best in -5.0f64..5.0,
            s1 in 0.01f64..3.0,
            bump in 0.01f64..2.0,
        ) {
            let lo = ei_closed_form(mu, s1, f_best, 0.01);
            let hi = ei_closed_form(mu, s1 + bump, f_best, 0.01);
            prop_assert!(lo >= 0.0);
            prop_assert!(hi >= lo - 1e-12);
        }
    }
}
