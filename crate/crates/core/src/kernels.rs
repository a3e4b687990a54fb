//! Model parameters and the closed-form quantities derived from them.
//!
//! A [`RateModel`] bundles the within-patch resampling rate `c(r, x, y)`
//! (an `x` individual is replaced by a copy of `y`), the per-capita mutation
//! rate `θ(r, x)`, the migration rate `λ((r, x), (r', y))` (an `x` individual
//! at `r` is replaced by a migrant `y` from `r'`), the mutation law and the
//! global bound `C` on all three rates.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::ops::Deref;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::exprlang::{Bindings, RateExpr};

/// A point of trait space `ℝᵈ`.
///
/// Equality, ordering and hashing are bit-exact on the coordinates: copies
/// made by resampling compare equal, freshly mutated values never do.
#[derive(Clone, Default)]
pub struct Trait(SmallVec<[f64; 2]>);

impl Trait {
    pub fn new(coords: impl IntoIterator<Item = f64>) -> Trait {
        Trait(coords.into_iter().collect())
    }

    pub fn scalar(v: f64) -> Trait {
        Trait(SmallVec::from_elem(v, 1))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn coords_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Deref for Trait {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl PartialEq for Trait {
    fn eq(&self, other: &Self) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Eq for Trait {}

impl Hash for Trait {
    fn hash<H: Hasher>(&self, state: &mut H) {
        for v in &self.0 {
            v.to_bits().hash(state);
        }
    }
}

impl Ord for Trait {
    fn cmp(&self, other: &Self) -> Ordering {
        for (a, b) in self.0.iter().zip(&other.0) {
            match a.total_cmp(b) {
                Ordering::Equal => {}
                o => return o,
            }
        }
        self.0.len().cmp(&other.0.len())
    }
}

impl PartialOrd for Trait {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for Trait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl From<f64> for Trait {
    fn from(v: f64) -> Trait {
        Trait::scalar(v)
    }
}

impl From<Vec<f64>> for Trait {
    fn from(v: Vec<f64>) -> Trait {
        Trait(SmallVec::from_vec(v))
    }
}

/// A position in `[0, 1] × ℝᵈ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTrait {
    pub r: f64,
    pub x: Trait,
}

type KernelFn = dyn Fn(&Bindings<'_>) -> f64 + Send + Sync;

/// One of the three rate kernels.
#[derive(Clone)]
pub enum RateFn {
    Constant(f64),
    Expr(RateExpr),
    /// A compiled closure. `spatial` declares whether it reads `r` or `rp`.
    Custom { f: Arc<KernelFn>, spatial: bool },
}

impl RateFn {
    pub fn custom(f: impl Fn(&Bindings<'_>) -> f64 + Send + Sync + 'static) -> RateFn {
        RateFn::Custom {
            f: Arc::new(f),
            spatial: false,
        }
    }

    pub fn custom_spatial(f: impl Fn(&Bindings<'_>) -> f64 + Send + Sync + 'static) -> RateFn {
        RateFn::Custom {
            f: Arc::new(f),
            spatial: true,
        }
    }

    /// A bare numeric literal becomes `Constant`.
    pub fn parse(src: &str) -> Result<RateFn> {
        if let Ok(v) = src.trim().parse::<f64>() {
            if v.is_finite() {
                return Ok(RateFn::Constant(v));
            }
        }
        Ok(RateFn::Expr(RateExpr::parse(src)?))
    }

    fn eval(&self, kernel: &'static str, b: &Bindings<'_>) -> Result<f64> {
        match self {
            RateFn::Constant(v) => Ok(*v),
            RateFn::Expr(e) => e.eval(b).map_err(|source| Error::Eval { kernel, source }),
            RateFn::Custom { f, .. } => Ok(f(b)),
        }
    }

    pub fn uses_position(&self) -> bool {
        match self {
            RateFn::Constant(_) => false,
            RateFn::Expr(e) => e.uses_position(),
            RateFn::Custom { spatial, .. } => *spatial,
        }
    }

    /// True only when the kernel is the literal constant zero.
    pub fn is_zero(&self) -> bool {
        matches!(self, RateFn::Constant(v) if *v == 0.0)
    }
}

impl fmt::Debug for RateFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RateFn::Constant(v) => write!(f, "Constant({v})"),
            RateFn::Expr(e) => write!(f, "Expr({:?})", e.source()),
            RateFn::Custom { spatial, .. } => write!(f, "Custom {{ spatial: {spatial} }}"),
        }
    }
}

/// The law `m(r, x, dh)` of the scaled mutation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MutationKind {
    /// `h ~ N(0, s² I)`.
    IsotropicGaussian { std: f64 },
    /// `h` uniform in the ball of the given radius.
    UniformBall { radius: f64 },
    /// Independent `±1` on every axis.
    DiscretePm,
    /// `h = 0`.
    Degenerate,
}

/// Mutation law `Qᵉ(r, x, ·)`: `y = x + ε h` with `h ~ m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MutationFamily {
    pub kind: MutationKind,
    pub epsilon: f64,
}

impl MutationFamily {
    pub fn new(kind: MutationKind, epsilon: f64) -> Result<MutationFamily> {
        let fam = MutationFamily { kind, epsilon };
        fam.validate()?;
        Ok(fam)
    }

    pub fn degenerate() -> MutationFamily {
        MutationFamily {
            kind: MutationKind::Degenerate,
            epsilon: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "mutation scale epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        match self.kind {
            MutationKind::IsotropicGaussian { std } if !(std >= 0.0 && std.is_finite()) => Err(
                Error::InvalidParameter(format!("gaussian std must be finite and >= 0, got {std}")),
            ),
            MutationKind::UniformBall { radius } if !(radius > 0.0 && radius.is_finite()) => Err(
                Error::InvalidParameter(format!("ball radius must be finite and > 0, got {radius}")),
            ),
            _ => Ok(()),
        }
    }

    /// Whether `y` can differ from `x`.
    pub fn moves(&self) -> bool {
        self.epsilon > 0.0
            && !matches!(
                self.kind,
                MutationKind::Degenerate | MutationKind::IsotropicGaussian { std: 0.0 }
            )
    }

    /// Draws one scaled step `h` in `d` dimensions.
    pub fn sample_step<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> SmallVec<[f64; 2]> {
        match self.kind {
            MutationKind::IsotropicGaussian { std } => (0..d)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            MutationKind::UniformBall { radius } => {
                let mut dir: SmallVec<[f64; 2]> =
                    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let u: f64 = rng.random();
                let len = radius * u.powf(1.0 / d as f64);
                if norm > 0.0 {
                    dir.iter_mut().for_each(|v| *v *= len / norm);
                }
                dir
            }
            MutationKind::DiscretePm => (0..d)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect(),
            MutationKind::Degenerate => SmallVec::from_elem(0.0, d),
        }
    }

    /// Samples `y ~ Qᵉ(r, x, ·)`. The law does not depend on `r`.
    pub fn sample<R: Rng + ?Sized>(&self, _r: f64, x: &Trait, rng: &mut R) -> Trait {
        if self.epsilon == 0.0 || self.kind == MutationKind::Degenerate {
            return x.clone();
        }
        let h = self.sample_step(x.dim(), rng);
        Trait::new(x.iter().zip(&h).map(|(xi, hi)| xi + self.epsilon * hi))
    }

    /// Finite support of the scaled step, when it has one.
    pub fn discrete_steps(&self, d: usize) -> Option<Vec<(Vec<f64>, f64)>> {
        match self.kind {
            MutationKind::Degenerate => Some(vec![(vec![0.0; d], 1.0)]),
            MutationKind::IsotropicGaussian { std: 0.0 } => {
                Some(vec![(vec![0.0; d], 1.0)])
            }
            MutationKind::DiscretePm => {
                let p = 0.5f64.powi(d as i32);
                Some(
                    (0..1usize << d)
                        .map(|mask| {
                            let h = (0..d)
                                .map(|i| if mask >> i & 1 == 1 { 1.0 } else { -1.0 })
                                .collect();
                            (h, p)
                        })
                        .collect(),
                )
            }
            _ => None,
        }
    }

    /// Covariance of the scaled step in `d` dimensions, with a square-root
    /// factor.
    pub fn covariance(&self, d: usize) -> Result<MutationCovariance> {
        self.validate()?;
        if d == 0 {
            return Err(Error::InvalidParameter("trait dimension must be >= 1".into()));
        }
        let scale = match self.kind {
            MutationKind::IsotropicGaussian { std } => std * std,
            MutationKind::UniformBall { radius } => radius * radius / (d as f64 + 2.0),
            MutationKind::DiscretePm => 1.0,
            MutationKind::Degenerate => 0.0,
        };
        MutationCovariance::from_matrix(DMatrix::identity(d, d) * scale)
    }
}

/// `Σ` together with a factor `σ` such that `σ σᵀ = Σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MutationCovariance {
    pub sigma: DMatrix<f64>,
    pub factor: DMatrix<f64>,
}

impl MutationCovariance {
    /// Factors a symmetric positive semidefinite matrix: Cholesky when it is
    /// positive definite, the spectral square root otherwise.
    pub fn from_matrix(sigma: DMatrix<f64>) -> Result<MutationCovariance> {
        if !sigma.is_square() {
            return Err(Error::InvalidParameter("covariance must be square".into()));
        }
        let asym = (&sigma - sigma.transpose()).abs().max();
        let scale = sigma.abs().max().max(1.0);
        if asym > 1e-12 * scale {
            return Err(Error::InvalidParameter(format!(
                "covariance is not symmetric (max asymmetry {asym:e})"
            )));
        }
        if let Some(ch) = sigma.clone().cholesky() {
            let factor = ch.l();
            return Ok(MutationCovariance { sigma, factor });
        }
        let eig = sigma.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
            return Err(Error::InvalidParameter(
                "covariance is not positive semidefinite".into(),
            ));
        }
        let sqrt_l = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let factor =
            &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_l) * eig.eigenvectors.transpose();
        Ok(MutationCovariance { sigma, factor })
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }
}

/// Fixation probability of a single invader from the two replacement rates.
///
/// `c_xy` is the rate at which a resident is replaced by the invader's type,
/// `c_yx` the reverse. Returns `1 / Σ_{k=0}^{N-1} ρᵏ` with `ρ = c_yx / c_xy`,
/// and `0` when `c_xy = 0`.
pub fn fixation_probability_from_rates(c_xy: f64, c_yx: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidParameter("population size N must be >= 1".into()));
    }
    if !(c_xy >= 0.0 && c_yx >= 0.0 && c_xy.is_finite() && c_yx.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "rates must be finite and non-negative, got {c_xy} and {c_yx}"
        )));
    }
    if c_xy == 0.0 {
        return Ok(0.0);
    }
    if n == 1 {
        return Ok(1.0);
    }
    let rho = c_yx / c_xy;
    if rho == 1.0 {
        return Ok(1.0 / n as f64);
    }
    if rho == 0.0 {
        return Ok(1.0);
    }
    if (rho - 1.0).abs() < 1e-12 {
        let mut sum = 1.0;
        let mut term = 1.0;
        for _ in 1..n {
            term *= rho;
            sum += term;
        }
        return Ok(1.0 / sum);
    }
    let log_rho = rho.ln();
    let nf = n as f64;
    let alpha = if log_rho < 0.0 {
        log_rho.exp_m1() / (nf * log_rho).exp_m1()
    } else {
        (-(nf - 1.0) * log_rho).exp() * (-log_rho).exp_m1() / (-nf * log_rho).exp_m1()
    };
    Ok(alpha.clamp(0.0, 1.0))
}

/// Rate kernels, mutation law and the global rate bound.
#[derive(Debug, Clone)]
pub struct RateModel {
    c: RateFn,
    theta: RateFn,
    lambda: RateFn,
    mutation: MutationFamily,
    bound: f64,
    dim: usize,
}

impl RateModel {
    pub fn new(
        c: RateFn,
        theta: RateFn,
        lambda: RateFn,
        mutation: MutationFamily,
        bound: f64,
        dim: usize,
    ) -> Result<RateModel> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "rate bound C must be finite and > 0, got {bound}"
            )));
        }
        if dim == 0 {
            return Err(Error::InvalidParameter("trait dimension must be >= 1".into()));
        }
        mutation.validate()?;
        Ok(RateModel {
            c,
            theta,
            lambda,
            mutation,
            bound,
            dim,
        })
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mutation(&self) -> &MutationFamily {
        &self.mutation
    }

    pub fn c_kernel(&self) -> &RateFn {
        &self.c
    }

    pub fn theta_kernel(&self) -> &RateFn {
        &self.theta
    }

    pub fn lambda_kernel(&self) -> &RateFn {
        &self.lambda
    }

    /// No kernel depends on patch position.
    pub fn is_homogeneous(&self) -> bool {
        !(self.c.uses_position() || self.theta.uses_position() || self.lambda.uses_position())
    }

    fn checked(&self, kernel: &'static str, value: f64) -> Result<f64> {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::InvalidRate { kernel, value });
        }
        if value > self.bound {
            return Err(Error::BoundViolation {
                kernel,
                value,
                bound: self.bound,
            });
        }
        Ok(value)
    }

    /// Rate at which an `x` individual at `r` is replaced by a copy of `y`.
    pub fn c(&self, r: f64, x: &[f64], y: &[f64]) -> Result<f64> {
        let b = Bindings { r, rp: r, x, y };
        self.checked("c", self.c.eval("c", &b)?)
    }

    pub fn theta(&self, r: f64, x: &[f64]) -> Result<f64> {
        let b = Bindings { r, rp: r, x, y: x };
        self.checked("theta", self.theta.eval("theta", &b)?)
    }

    /// Rate at which `x` at `r` is replaced by a migrant `y` from `rp`.
    pub fn lambda(&self, r: f64, x: &[f64], rp: f64, y: &[f64]) -> Result<f64> {
        let b = Bindings { r, rp, x, y };
        self.checked("lambda", self.lambda.eval("lambda", &b)?)
    }

    /// `α(r, y, x)`: probability that one `y` invader fixes among `N - 1`
    /// `x` residents.
    pub fn fixation_probability(&self, r: f64, y: &[f64], x: &[f64], n: usize) -> Result<f64> {
        if n == 0 {
            return Err(Error::InvalidParameter("population size N must be >= 1".into()));
        }
        let c_xy = self.c(r, x, y)?;
        let c_yx = self.c(r, y, x)?;
        fixation_probability_from_rates(c_xy, c_yx, n)
    }

    /// `Fit(r, y, x) = log(c(r, x, y) / c(r, y, x))`.
    pub fn relative_fitness(&self, r: f64, y: &[f64], x: &[f64]) -> Result<f64> {
        let c_xy = self.c(r, x, y)?;
        let c_yx = self.c(r, y, x)?;
        if c_xy <= 0.0 || c_yx <= 0.0 {
            return Err(Error::FitnessDomain { c_xy, c_yx });
        }
        Ok((c_xy / c_yx).ln())
    }

    /// Central-difference gradient of `f(y)` at `y = x`, step
    /// `1e-5 · max(1, ‖x‖)`.
    fn gradient_at_diagonal(
        &self,
        x: &[f64],
        mut f: impl FnMut(&[f64]) -> Result<f64>,
    ) -> Result<Vec<f64>> {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let h = 1e-5 * norm.max(1.0);
        let mut y: Vec<f64> = x.to_vec();
        let mut grad = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            y[i] = x[i] + h;
            let plus = f(&y)?;
            y[i] = x[i] - h;
            let minus = f(&y)?;
            y[i] = x[i];
            grad.push((plus - minus) / (2.0 * h));
        }
        Ok(grad)
    }

    /// `∇₂Fit(r, x, x)`: gradient of the relative fitness in the mutant.
    pub fn fitness_gradient(&self, r: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.gradient_at_diagonal(x, |y| self.relative_fitness(r, y, x))
    }

    /// `∇₂α(r, x, x)`: gradient of the fixation probability in the invader.
    pub fn fixation_gradient(&self, r: f64, x: &[f64], n: usize) -> Result<Vec<f64>> {
        self.gradient_at_diagonal(x, |y| self.fixation_probability(r, y, x, n))
    }

    /// Evaluates all three kernels at `probes` random points with `r, r'`
    /// uniform on `[0, 1]` and trait coordinates uniform on `[lo, hi]`, plus
    /// the given anchor traits. Fails on the first rate outside `[0, C]`.
    pub fn probe_bounds(
        &self,
        lo: f64,
        hi: f64,
        anchors: &[Trait],
        probes: usize,
        seed: u64,
    ) -> Result<()> {
        if !(lo <= hi) {
            return Err(Error::InvalidParameter(format!(
                "probe domain [{lo}, {hi}] is empty"
            )));
        }
        let mut rng = crate::exec::stream(seed, 0);
        let d = self.dim;
        let draw = |rng: &mut crate::exec::SimRng| -> Vec<f64> {
            (0..d).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
        };
        for a in anchors {
            for b in anchors {
                for &r in &[0.0, 0.5, 1.0] {
                    self.c(r, a, b)?;
                    self.theta(r, a)?;
                    self.lambda(r, a, 1.0 - r, b)?;
                }
            }
        }
        for _ in 0..probes {
            let r: f64 = rng.random();
            let rp: f64 = rng.random();
            let x = draw(&mut rng);
            let y = draw(&mut rng);
            self.c(r, &x, &y)?;
            self.theta(r, &x)?;
            self.lambda(r, &x, rp, &y)?;
        }
        Ok(())
    }
}
