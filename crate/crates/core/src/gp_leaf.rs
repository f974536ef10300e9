//! Exact single-output Gaussian-process experts.
//!
//! Every expert uses a zero mean function and a Matérn-3/2 covariance with one
//! lengthscale per covariate dimension (ARD):
//!
//! ```text
//! k(x, x') = sf2 * (1 + sqrt(3) r) * exp(-sqrt(3) r),   r^2 = sum_d (x_d - x'_d)^2 / l_d^2
//! ```
//!
//! Hyperparameters live in log space so that gradient steps never leave the
//! admissible region.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::LN_2PI;
use crate::region::Region;

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Relative jitter levels tried, in order, when the covariance is not numerically positive definite.
pub const JITTER_LEVELS: [f64; 7] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

/// Predictive variances down to this negative value are treated as rounding noise.
pub const VARIANCE_CLAMP_TOL: f64 = 1e-10;

/// Log-space kernel and likelihood hyperparameters of one expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_variance: f64,
    pub log_noise_variance: f64,
}

impl KernelHyperparams {
    pub fn new(lengthscales: &[f64], signal_variance: f64, noise_variance: f64) -> Result<Self> {
        let h = KernelHyperparams {
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_signal_variance: signal_variance.ln(),
            log_noise_variance: noise_variance.ln(),
        };
        h.validate()?;
        Ok(h)
    }

    pub fn dims(&self) -> usize {
        self.log_lengthscales.len()
    }

    /// Number of free parameters, `D + 2`.
    pub fn len(&self) -> usize {
        self.dims() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| {
            let e = v.exp();
            e.is_finite() && e > 0.0
        };
        if self.log_lengthscales.is_empty() {
            return Err(Error::InvalidArgument(
                "kernel needs at least one lengthscale".into(),
            ));
        }
        if !self.log_lengthscales.iter().all(|&v| ok(v))
            || !ok(self.log_signal_variance)
            || !ok(self.log_noise_variance)
        {
            return Err(Error::InvalidArgument(format!(
                "hyperparameters must be finite and positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Flat parameter vector: lengthscales, signal variance, noise variance (all logs).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_lengthscales.clone();
        v.push(self.log_signal_variance);
        v.push(self.log_noise_variance);
        v
    }

    pub fn from_slice(params: &[f64]) -> Result<Self> {
        if params.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "expected at least 3 parameters, got {}",
                params.len()
            )));
        }
        let d = params.len() - 2;
        let h = KernelHyperparams {
            log_lengthscales: params[..d].to_vec(),
            log_signal_variance: params[d],
            log_noise_variance: params[d + 1],
        };
        h.validate()?;
        Ok(h)
    }

    fn inverse_lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| (-l).exp()).collect()
    }
}

#[inline]
fn scaled_sq_dist(a: &[f64], b: &[f64], inv_ls: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(inv_ls)
        .map(|((x, y), il)| {
            let t = (x - y) * il;
            t * t
        })
        .sum()
}

#[inline]
fn matern_from_sq(sf2: f64, r2: f64) -> f64 {
    let sr = SQRT3 * r2.sqrt();
    sf2 * (1.0 + sr) * (-sr).exp()
}

/// Matérn-3/2 ARD covariance between two points.
pub fn matern32(x: &[f64], x2: &[f64], h: &KernelHyperparams) -> Result<f64> {
    if x.len() != x2.len() || x.len() != h.dims() {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch: {} vs {} with {} lengthscales",
            x.len(),
            x2.len(),
            h.dims()
        )));
    }
    let inv = h.inverse_lengthscales();
    Ok(matern_from_sq(h.signal_variance(), scaled_sq_dist(x, x2, &inv)))
}

/// Covariance matrix over the rows of `x`; exactly symmetric with `sf2` on the diagonal.
pub fn gram_matrix(x: &DMatrix<f64>, h: &KernelHyperparams) -> Result<DMatrix<f64>> {
    if x.ncols() != h.dims() {
        return Err(Error::InvalidArgument(format!(
            "matrix has {} columns, kernel has {} lengthscales",
            x.ncols(),
            h.dims()
        )));
    }
    let rows: Vec<f64> = x.transpose().as_slice().to_vec();
    Ok(gram_rows(&rows, x.ncols(), h))
}

/// Gram matrix over points stored row-major in `points`.
fn gram_rows(points: &[f64], dims: usize, h: &KernelHyperparams) -> DMatrix<f64> {
    let n = points.len() / dims;
    let sf2 = h.signal_variance();
    let inv = h.inverse_lengthscales();
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        let xj = &points[j * dims..(j + 1) * dims];
        k[(j, j)] = sf2;
        for i in 0..j {
            let v = matern_from_sq(sf2, scaled_sq_dist(&points[i * dims..(i + 1) * dims], xj, &inv));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cached factorisation of `C = K + (noise + jitter) I`.
#[derive(Clone, Debug)]
struct Fitted {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    mll: f64,
    jitter: f64,
}

/// Factorises `c`, escalating a diagonal jitter proportional to its mean diagonal on failure.
fn robust_cholesky(c: DMatrix<f64>, context: &str) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(chol) = Cholesky::new(c.clone()) {
        return Ok((chol, 0.0));
    }
    let n = c.nrows();
    let mean_diag = c.diagonal().sum() / n as f64;
    let mut tried = Vec::with_capacity(JITTER_LEVELS.len());
    for lambda in JITTER_LEVELS {
        let jitter = lambda * mean_diag;
        tried.push(jitter);
        let mut cj = c.clone();
        for i in 0..n {
            cj[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(cj) {
            log::debug!("{context}: cholesky needed jitter {jitter:e}");
            return Ok((chol, jitter));
        }
    }
    Err(Error::NumericalFailure {
        context: context.to_string(),
        jitters: tried,
    })
}

/// Lower Cholesky factor of `c` under the same jitter policy as the experts.
pub(crate) fn jittered_cholesky_factor(c: DMatrix<f64>, context: &str) -> Result<(DMatrix<f64>, f64)> {
    robust_cholesky(c, context).map(|(chol, j)| (chol.unpack(), j))
}

/// Inverse of a lower-triangular matrix by column-wise forward substitution.
/// Only the lower triangle of `l` is read.
fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut inv = DMatrix::zeros(n, n);
    // column-major storage: column k of `l` is contiguous
    let ls = l.as_slice();
    for (j, x) in inv.as_mut_slice().chunks_exact_mut(n).enumerate() {
        x[j] = 1.0;
        for k in j..n {
            let col = &ls[k * n..(k + 1) * n];
            let xk = x[k] / col[k];
            x[k] = xk;
            for (xi, li) in x[k + 1..].iter_mut().zip(&col[k + 1..]) {
                *xi -= li * xk;
            }
        }
    }
    inv
}

/// A single-output exact GP expert conditioned on the data inside one covariate region.
#[derive(Clone, Debug)]
pub struct GpLeaf {
    pub scope_output: usize,
    pub region: Region,
    pub hyperparams: KernelHyperparams,
    /// Training covariates, row-major.
    train_x: Vec<f64>,
    train_y: Vec<f64>,
    /// Dataset rows the expert was built from.
    rows: Vec<usize>,
    fitted: Option<Fitted>,
}

impl GpLeaf {
    /// Creates an unfitted expert. `train_x` holds one point per row.
    pub fn new(
        scope_output: usize,
        region: Region,
        hyperparams: KernelHyperparams,
        train_x: &DMatrix<f64>,
        train_y: &DVector<f64>,
        rows: Vec<usize>,
    ) -> Result<Self> {
        let points = train_x.transpose().as_slice().to_vec();
        Self::from_rows(scope_output, region, hyperparams, points, train_y.as_slice().to_vec(), rows)
    }

    pub(crate) fn from_rows(
        scope_output: usize,
        region: Region,
        hyperparams: KernelHyperparams,
        train_x: Vec<f64>,
        train_y: Vec<f64>,
        rows: Vec<usize>,
    ) -> Result<Self> {
        hyperparams.validate()?;
        let d = hyperparams.dims();
        if train_y.is_empty() {
            return Err(Error::InvalidArgument("expert needs at least one training point".into()));
        }
        if train_x.len() != d * train_y.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} covariates of dimension {d}, got {} values",
                train_y.len(),
                train_x.len()
            )));
        }
        if region.dims() != d {
            return Err(Error::InvalidArgument(format!(
                "region has {} dimensions, kernel has {d}",
                region.dims()
            )));
        }
        if rows.len() != train_y.len() {
            return Err(Error::InvalidArgument("row index count differs from target count".into()));
        }
        if let Some(i) = train_x.chunks(d).position(|p| !region.contains(p)) {
            return Err(Error::InvalidArgument(format!(
                "training point {i} lies outside the expert's region"
            )));
        }
        Ok(GpLeaf {
            scope_output,
            region,
            hyperparams,
            train_x,
            train_y,
            rows,
            fitted: None,
        })
    }

    pub fn n_train(&self) -> usize {
        self.train_y.len()
    }

    pub fn dims(&self) -> usize {
        self.hyperparams.dims()
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn train_x(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_train(), self.dims(), &self.train_x)
    }

    pub fn train_y(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.train_y)
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted.is_some()
    }

    /// Replaces the hyperparameters and drops any cached factorisation.
    pub fn set_hyperparams(&mut self, h: KernelHyperparams) -> Result<()> {
        h.validate()?;
        if h.dims() != self.dims() {
            return Err(Error::InvalidArgument(format!(
                "expected {} lengthscales, got {}",
                self.dims(),
                h.dims()
            )));
        }
        self.hyperparams = h;
        self.fitted = None;
        Ok(())
    }

    /// `C = K + noise * I` without jitter.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mut c = gram_rows(&self.train_x, self.dims(), &self.hyperparams);
        let noise = self.hyperparams.noise_variance();
        for i in 0..c.nrows() {
            c[(i, i)] += noise;
        }
        c
    }

    /// Factorises the covariance and caches `alpha = C^-1 y` and the log marginal likelihood.
    pub fn fit(&mut self) -> Result<()> {
        let n = self.n_train();
        let (chol, jitter) = robust_cholesky(self.covariance(), "expert covariance")?;
        let y = self.train_y();
        let alpha = chol.solve(&y);
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let mll = -0.5 * (y.dot(&alpha) + log_det + n as f64 * LN_2PI);
        self.fitted = Some(Fitted {
            chol,
            alpha,
            mll,
            jitter,
        });
        Ok(())
    }

    fn fitted(&self) -> Result<&Fitted> {
        self.fitted
            .as_ref()
            .ok_or_else(|| Error::State("expert has not been fitted".into()))
    }

    pub fn mll(&self) -> Result<f64> {
        Ok(self.fitted()?.mll)
    }

    pub fn alpha(&self) -> Result<&DVector<f64>> {
        Ok(&self.fitted()?.alpha)
    }

    /// Lower Cholesky factor of the (possibly jittered) covariance.
    pub fn chol_factor(&self) -> Result<DMatrix<f64>> {
        Ok(self.fitted()?.chol.l())
    }

    /// Diagonal jitter added during the last fit (zero when none was needed).
    pub fn jitter(&self) -> Result<f64> {
        Ok(self.fitted()?.jitter)
    }

    fn cross_cov(&self, x_star: &[f64]) -> DVector<f64> {
        let d = self.dims();
        let sf2 = self.hyperparams.signal_variance();
        let inv = self.hyperparams.inverse_lengthscales();
        DVector::from_iterator(
            self.n_train(),
            self.train_x
                .chunks(d)
                .map(|p| matern_from_sq(sf2, scaled_sq_dist(p, x_star, &inv))),
        )
    }

    /// Posterior mean and variance of the latent function at `x_star`.
    pub fn posterior(&self, x_star: &[f64]) -> Result<(f64, f64)> {
        let f = self.fitted()?;
        if x_star.len() != self.dims() {
            return Err(Error::InvalidArgument(format!(
                "test point has {} dimensions, expert has {}",
                x_star.len(),
                self.dims()
            )));
        }
        let ks = self.cross_cov(x_star);
        let mean = ks.dot(&f.alpha);
        let v = f
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("cholesky factor has a positive diagonal");
        let var = self.hyperparams.signal_variance() - v.norm_squared();
        if var < -VARIANCE_CLAMP_TOL {
            return Err(Error::NumericalFailure {
                context: format!("negative predictive variance {var:e}"),
                jitters: vec![f.jitter],
            });
        }
        Ok((mean, var.max(0.0)))
    }

    /// Gradient of the log marginal likelihood with respect to the log hyperparameters,
    /// ordered as [`KernelHyperparams::to_vec`].
    pub fn mll_gradient(&self) -> Result<Vec<f64>> {
        let f = self.fitted()?;
        let n = self.n_train();
        let d = self.dims();
        let h = &self.hyperparams;
        let sf2 = h.signal_variance();
        let inv = h.inverse_lengthscales();
        let alpha = &f.alpha;
        let l_inv = lower_triangular_inverse(f.chol.l_dirty());
        let c_inv = l_inv.transpose() * &l_inv;

        // W = alpha alpha^T - C^-1;  dmll/dtheta = 1/2 tr(W dC/dtheta)
        let mut g_ls = vec![0.0; d];
        let mut g_sf = 0.0;
        let mut trace_w = 0.0;
        let pts = &self.train_x;
        for j in 0..n {
            let xj = &pts[j * d..(j + 1) * d];
            let wjj = alpha[j] * alpha[j] - c_inv[(j, j)];
            trace_w += wjj;
            g_sf += wjj * sf2;
            for i in 0..j {
                let xi = &pts[i * d..(i + 1) * d];
                let w = 2.0 * (alpha[i] * alpha[j] - c_inv[(i, j)]);
                let r2 = scaled_sq_dist(xi, xj, &inv);
                let sr = SQRT3 * r2.sqrt();
                let e = (-sr).exp();
                g_sf += w * sf2 * (1.0 + sr) * e;
                // dk/dlog(l_d) = 3 sf2 exp(-sqrt3 r) (x_d - x'_d)^2 / l_d^2
                let base = w * 3.0 * sf2 * e;
                for k in 0..d {
                    let t = (xi[k] - xj[k]) * inv[k];
                    g_ls[k] += base * t * t;
                }
            }
        }
        let mut grad: Vec<f64> = g_ls.into_iter().map(|g| 0.5 * g).collect();
        grad.push(0.5 * g_sf);
        grad.push(0.5 * trace_w * h.noise_variance());
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hp(ls: &[f64], sf2: f64, noise: f64) -> KernelHyperparams {
        KernelHyperparams::new(ls, sf2, noise).unwrap()
    }

    fn leaf_from(x: &DMatrix<f64>, y: &[f64], h: KernelHyperparams) -> GpLeaf {
        let n = x.nrows();
        let mut leaf = GpLeaf::new(
            0,
            Region::unbounded(x.ncols()),
            h,
            x,
            &DVector::from_column_slice(y),
            (0..n).collect(),
        )
        .unwrap();
        leaf.fit().unwrap();
        leaf
    }

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (DMatrix<f64>, Vec<f64>, KernelHyperparams) {
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let ls: Vec<f64> = (0..d).map(|_| rng.random_range(0.3..2.0)).collect();
        let h = hp(&ls, rng.random_range(0.5..2.0), rng.random_range(0.05..0.5));
        (x, y, h)
    }

    /// Dense oracle: explicit inverse and determinant, no Cholesky.
    fn dense_oracle(x: &DMatrix<f64>, y: &[f64], h: &KernelHyperparams, xs: &[f64]) -> (f64, f64, f64) {
        let n = x.nrows();
        let mut c = DMatrix::from_fn(n, n, |i, j| {
            let a: Vec<f64> = x.row(i).iter().copied().collect();
            let b: Vec<f64> = x.row(j).iter().copied().collect();
            matern32(&a, &b, h).unwrap()
        });
        for i in 0..n {
            c[(i, i)] += h.noise_variance();
        }
        let y = DVector::from_column_slice(y);
        let inv = c.clone().try_inverse().unwrap();
        let mll = -0.5 * ((y.transpose() * &inv * &y)[(0, 0)] + c.determinant().ln() + n as f64 * LN_2PI);
        let ks = DVector::from_fn(n, |i, _| {
            let a: Vec<f64> = x.row(i).iter().copied().collect();
            matern32(&a, xs, h).unwrap()
        });
        let mean = (ks.transpose() * &inv * &y)[(0, 0)];
        let var = h.signal_variance() - (ks.transpose() * &inv * &ks)[(0, 0)];
        (mll, mean, var)
    }

    #[test]
    fn kernel_at_zero_distance_is_signal_variance() {
        let h = hp(&[0.7, 1.3], 1.0, 0.1);
        assert_eq!(matern32(&[0.3, -2.0], &[0.3, -2.0], &h).unwrap(), 1.0);
        let h = hp(&[0.7, 1.3], 2.5, 0.1);
        assert_eq!(matern32(&[1.0, 1.0], &[1.0, 1.0], &h).unwrap(), 2.5);
    }

    #[test]
    fn kernel_unit_distance_value() {
        // (1 + sqrt 3) exp(-sqrt 3), 40-digit reference
        let h = hp(&[1.0], 1.0, 0.1);
        let k = matern32(&[0.0], &[1.0], &h).unwrap();
        assert!((k - 0.483_357_724_596_507_65).abs() < 1e-15);
    }

    #[test]
    fn kernel_is_symmetric_and_checks_dims() {
        let h = hp(&[0.5, 2.0], 1.3, 0.1);
        let a = [0.1, -0.4];
        let b = [1.2, 0.9];
        assert_eq!(matern32(&a, &b, &h).unwrap(), matern32(&b, &a, &h).unwrap());
        assert!(matches!(matern32(&[0.0], &b, &h), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gram_matrix_cases() {
        let h = hp(&[1.0, 1.0, 1.0], 1.7, 0.1);
        let one = DMatrix::from_row_slice(1, 3, &[0.2, 0.3, 0.4]);
        assert_eq!(gram_matrix(&one, &h).unwrap(), DMatrix::from_element(1, 1, 1.7));

        let dup = DMatrix::from_row_slice(2, 3, &[0.2, 0.3, 0.4, 0.2, 0.3, 0.4]);
        assert_eq!(gram_matrix(&dup, &h).unwrap(), DMatrix::from_element(2, 2, 1.7));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let h = hp(&[0.4, 0.9, 1.6], 0.8, 0.1);
        let k = gram_matrix(&x, &h).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let a: Vec<f64> = x.row(i).iter().copied().collect();
                let b: Vec<f64> = x.row(j).iter().copied().collect();
                assert_eq!(k[(i, j)], k[(j, i)]);
                assert!((k[(i, j)] - matern32(&a, &b, &h).unwrap()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_point_closed_forms() {
        let x = DMatrix::from_row_slice(1, 1, &[0.37]);
        let leaf = leaf_from(&x, &[0.0], hp(&[1.0], 1.0, 1.0));
        let expected = -0.5 * (2f64.ln() + LN_2PI);
        assert!((leaf.mll().unwrap() - expected).abs() < 1e-14);
        assert_eq!(leaf.alpha().unwrap()[0], 0.0);

        let leaf = leaf_from(&x, &[2.0], hp(&[1.0], 1.0, 1.0));
        let (m, v) = leaf.posterior(&[0.37]).unwrap();
        assert!((m - 1.0).abs() < 1e-14);
        assert!((v - 0.5).abs() < 1e-14);
    }

    #[test]
    fn far_away_prediction_reverts_to_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (x, y, h) = random_problem(&mut rng, 6, 2);
        let leaf = leaf_from(&x, &y, h.clone());
        let (m, v) = leaf.posterior(&[1e3, -1e3]).unwrap();
        assert!(m.abs() < 1e-12);
        assert!((v - h.signal_variance()).abs() < 1e-12);
    }

    #[test]
    fn cholesky_and_alpha_reconstruct() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let (x, y, h) = random_problem(&mut rng, 12, 3);
            let leaf = leaf_from(&x, &y, h);
            let l = leaf.chol_factor().unwrap();
            let c = leaf.covariance();
            let rec = &l * l.transpose();
            for (a, b) in rec.iter().zip(c.iter()) {
                assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-300) + 1e-14);
            }
            let resid = &c * leaf.alpha().unwrap() - leaf.train_y();
            assert!(resid.amax() < 1e-8);
        }
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let n = 1 + trial % 20;
            let (x, y, h) = random_problem(&mut rng, n, 2);
            let leaf = leaf_from(&x, &y, h.clone());
            let xs = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let (mll, mean, var) = dense_oracle(&x, &y, &h, &xs);
            let (m, v) = leaf.posterior(&xs).unwrap();
            assert!((leaf.mll().unwrap() - mll).abs() < 1e-8 * mll.abs().max(1.0));
            assert!((m - mean).abs() < 1e-8);
            assert!((v - var.max(0.0)).abs() < 1e-8);
        }
    }

    #[test]
    fn noise_gradient_single_point() {
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let leaf = leaf_from(&x, &[0.0], hp(&[0.8], 1.5, 0.3));
        let g = leaf.mll_gradient().unwrap();
        let expected = -0.5 * 0.3 / (1.5 + 0.3);
        assert!((g[2] - expected).abs() < 1e-14);
        // no pairwise terms with a single point
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let (x, y, h) = random_problem(&mut rng, 8, 3);
            let leaf = leaf_from(&x, &y, h.clone());
            let g = leaf.mll_gradient().unwrap();
            let base = h.to_vec();
            for (k, gk) in g.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut p = base.clone();
                    p[k] += delta;
                    leaf_from(&x, &y, KernelHyperparams::from_slice(&p).unwrap()).mll().unwrap()
                };
                let fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
                let rel = (fd - gk).abs() / fd.abs().max(1e-3);
                assert!(rel < 1e-4, "param {k}: analytic {gk}, fd {fd}");
            }
        }
    }

    #[test]
    fn adding_a_point_never_increases_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let (x, y, h) = random_problem(&mut rng, 6, 2);
            let xs = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let before = leaf_from(&x, &y, h.clone()).posterior(&xs).unwrap().1;
            let mut x2 = x.clone().insert_row(6, 0.0);
            x2[(6, 0)] = xs[0];
            x2[(6, 1)] = xs[1];
            let mut y2 = y.clone();
            y2.push(0.3);
            let after = leaf_from(&x2, &y2, h).posterior(&xs).unwrap().1;
            assert!(after <= before + 1e-12);
        }
    }

    #[test]
    fn duplicate_points_fit_without_noise() {
        let x = DMatrix::from_row_slice(3, 1, &[0.5, 0.5, 0.5]);
        let h = KernelHyperparams {
            log_lengthscales: vec![0.0],
            log_signal_variance: 0.0,
            log_noise_variance: -60.0,
        };
        let leaf = leaf_from(&x, &[1.0, 1.0, 1.0], h);
        assert!(leaf.jitter().unwrap() > 0.0);
        assert!(leaf.mll().unwrap().is_finite());
    }

    #[test]
    fn unfitted_leaf_is_a_state_error() {
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let leaf = GpLeaf::new(
            0,
            Region::unbounded(1),
            hp(&[1.0], 1.0, 0.1),
            &x,
            &DVector::from_column_slice(&[1.0]),
            vec![0],
        )
        .unwrap();
        assert!(matches!(leaf.posterior(&[0.0]), Err(Error::State(_))));
        assert!(matches!(leaf.mll_gradient(), Err(Error::State(_))));
    }

    #[test]
    fn points_outside_region_are_rejected() {
        let x = DMatrix::from_row_slice(1, 1, &[2.0]);
        let region = Region {
            lower: vec![0.0],
            upper: vec![2.0],
        };
        let r = GpLeaf::new(0, region, hp(&[1.0], 1.0, 0.1), &x, &DVector::from_column_slice(&[1.0]), vec![0]);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }
}
