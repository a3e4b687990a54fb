//! Small-mutation regime: the spatial weight system and, for homogeneous
//! kernels, the antisymmetric replicator equation
//! `dw̄ⁱ/dt = w̄ⁱ Σⱼ aᵢⱼ w̄ʲ` with `aᵢⱼ = G(xⁱ, xʲ)` and
//! `G(y, x) = N² (λ(x, y) α(y, x) − λ(y, x) α(x, y))`.

use log::debug;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{RateModel, Trait};
use crate::meanfield::{clip_negative, integrate, FlowSystem};

/// Position at which homogeneous kernels are evaluated.
const ANY_POSITION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    pub a: DMatrix<f64>,
    pub traits: Vec<Trait>,
}

impl InteractionMatrix {
    /// Wraps a given matrix, checking antisymmetry to `1e-12`.
    pub fn from_matrix(a: DMatrix<f64>, traits: Vec<Trait>) -> Result<InteractionMatrix> {
        if !a.is_square() || a.nrows() != traits.len() {
            return Err(Error::InvalidParameter(
                "interaction matrix must be n×n for n traits".into(),
            ));
        }
        let asym = (&a + a.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "interaction matrix is not antisymmetric (max |A + Aᵀ| = {asym:e})"
            )));
        }
        Ok(InteractionMatrix { a, traits })
    }

    pub fn n(&self) -> usize {
        self.traits.len()
    }
}

fn check_distinct(traits: &[Trait]) -> Result<()> {
    for (i, t) in traits.iter().enumerate() {
        if let Some(j) = traits[..i].iter().position(|s| s == t) {
            return Err(Error::InvalidParameter(format!(
                "traits {} and {} are both {t:?}; the matrix would have two identical rows",
                j + 1,
                i + 1
            )));
        }
    }
    Ok(())
}

/// `aᵢⱼ = N² (λ(xʲ, xⁱ) α(xⁱ, xʲ) − λ(xⁱ, xʲ) α(xʲ, xⁱ))`, antisymmetrized.
pub fn build_interaction_matrix(
    model: &RateModel,
    traits: &[Trait],
    n: usize,
) -> Result<InteractionMatrix> {
    if !model.is_homogeneous() {
        return Err(Error::Precondition(
            "the replicator reduction needs a homogeneous model".into(),
        ));
    }
    if traits.is_empty() {
        return Err(Error::InvalidParameter("need at least one trait".into()));
    }
    check_distinct(traits)?;
    let r = ANY_POSITION;
    let k = traits.len();
    let n2 = (n * n) as f64;
    // flux[j][i]: rate at which an xʲ site adopts xⁱ
    let mut flux = DMatrix::<f64>::zeros(k, k);
    for j in 0..k {
        for i in 0..k {
            if i != j {
                let lambda = model.lambda(r, &traits[j], r, &traits[i])?;
                let alpha = model.fixation_probability(r, &traits[i], &traits[j], n)?;
                flux[(j, i)] = n2 * lambda * alpha;
            }
        }
    }
    let raw = DMatrix::from_fn(k, k, |i, j| flux[(j, i)] - flux[(i, j)]);
    let asym = (&raw + raw.transpose()).abs().max();
    debug!("interaction matrix max asymmetry before symmetrization: {asym:e}");
    let a = (&raw - raw.transpose()) * 0.5;
    Ok(InteractionMatrix {
        a,
        traits: traits.to_vec(),
    })
}

/// Mean weights at recorded times.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicatorTrajectory {
    pub times: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
}

impl ReplicatorTrajectory {
    pub fn series(&self, i: usize) -> Vec<f64> {
        self.weights.iter().map(|w| w[i]).collect()
    }
}

fn check_simplex(w0: &[f64], n: usize) -> Result<()> {
    if w0.len() != n {
        return Err(Error::InvalidParameter(format!(
            "expected {n} initial weights, got {}",
            w0.len()
        )));
    }
    let total: f64 = w0.iter().sum();
    if w0.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidParameter(format!(
            "initial weights must be nonnegative and sum to 1, got {w0:?}"
        )));
    }
    Ok(())
}

/// RK4 for the replicator equation. Weights are not renormalized; any weight
/// below `-1e-8` aborts. Records every `record_interval` and the final
/// state.
pub fn replicator_integrate(
    a: &InteractionMatrix,
    w0: &[f64],
    dt: f64,
    horizon: f64,
    record_interval: f64,
) -> Result<ReplicatorTrajectory> {
    check_simplex(w0, a.n())?;
    let mat = &a.a;
    let f = |w: &[f64], out: &mut [f64]| {
        let v = DVector::from_column_slice(w);
        let aw = mat * &v;
        for i in 0..w.len() {
            out[i] = w[i] * aw[i];
        }
    };
    let mut traj = ReplicatorTrajectory {
        times: Vec::new(),
        weights: Vec::new(),
    };
    let mut y = w0.to_vec();
    integrate(
        &f,
        &mut y,
        dt,
        horizon,
        record_interval,
        |w| {
            if let Some(v) = w.iter().find(|v| !(**v >= -1e-8)) {
                return Err(Error::Numerical(format!("replicator weight fell to {v}")));
            }
            Ok(())
        },
        |t, w| {
            traj.times.push(t);
            traj.weights.push(w.to_vec());
        },
    )?;
    Ok(traj)
}

/// Weights `wⁱ(r_g)` on the midpoint grid `r_g = (g + ½)/G`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialSnapshot {
    pub time: f64,
    /// `w[i][g]`.
    pub w: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTrajectory {
    pub traits: Vec<Trait>,
    pub grid: Vec<f64>,
    pub snapshots: Vec<SpatialSnapshot>,
}

impl SpatialTrajectory {
    /// `w̄ⁱ = (1/G) Σ_g wⁱ(r_g)` at one snapshot.
    pub fn mean_weights(&self, snapshot: usize) -> Vec<f64> {
        let g = self.grid.len() as f64;
        self.snapshots[snapshot]
            .w
            .iter()
            .map(|row| row.iter().sum::<f64>() / g)
            .collect()
    }
}

/// RK4 for the spatial weight system, with `r'`-integrals by the midpoint
/// rule on `G` cells. `w0[i][g]` is the density of trait `i` at `r_g`.
pub fn spatial_weights_integrate(
    model: &RateModel,
    traits: &[Trait],
    w0: &[Vec<f64>],
    n: usize,
    dt: f64,
    horizon: f64,
    record_interval: f64,
) -> Result<SpatialTrajectory> {
    check_distinct(traits)?;
    let nt = traits.len();
    if w0.len() != nt || nt == 0 {
        return Err(Error::InvalidParameter(format!(
            "expected {nt} weight rows, got {}",
            w0.len()
        )));
    }
    let g = w0[0].len();
    if g == 0 || w0.iter().any(|row| row.len() != g) {
        return Err(Error::InvalidParameter("weight rows must share one grid size >= 1".into()));
    }
    let total: f64 = w0.iter().flatten().sum::<f64>() / g as f64;
    if w0.iter().flatten().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidParameter(format!(
            "initial weights must be nonnegative with total mass 1, got {total}"
        )));
    }
    let grid: Vec<f64> = (0..g).map(|p| (p as f64 + 0.5) / g as f64).collect();
    // cell masses m[p][i] = wⁱ(r_p) / G follow the measure flow without mutation
    let sys = FlowSystem::build(model, &grid, traits, n, false)?;
    let mut m = vec![0.0; g * nt];
    for i in 0..nt {
        for p in 0..g {
            m[p * nt + i] = w0[i][p] / g as f64;
        }
    }
    let mut snapshots = Vec::new();
    integrate(
        &|y, out| sys.derivative(y, out),
        &mut m,
        dt,
        horizon,
        record_interval,
        |y| clip_negative(y, -1e-8),
        |t, y| {
            let w = (0..nt)
                .map(|i| (0..g).map(|p| y[p * nt + i] * g as f64).collect())
                .collect();
            snapshots.push(SpatialSnapshot { time: t, w });
        },
    )?;
    Ok(SpatialTrajectory {
        traits: traits.to_vec(),
        grid,
        snapshots,
    })
}

/// Zero-based index `i*` with `w̄^{i*}₀ > 0` and `a_{i*j} > 0` for all
/// `j ≠ i*`, if one exists.
pub fn invasion_check(a: &InteractionMatrix, w0: &[f64]) -> Result<Option<usize>> {
    check_simplex(w0, a.n())?;
    Ok((0..a.n()).find(|&i| w0[i] > 0.0 && (0..a.n()).all(|j| j == i || a.a[(i, j)] > 0.0)))
}

/// Interior rest point `w*` with `A w* = 0` and `Σ w* = 1`, if the system
/// determines one with all entries positive.
pub fn interior_equilibrium(a: &InteractionMatrix) -> Option<Vec<f64>> {
    let n = a.n();
    let mut m = DMatrix::<f64>::zeros(n + 1, n);
    m.view_mut((0, 0), (n, n)).copy_from(&a.a);
    m.row_mut(n).fill(1.0);
    let mut b = DVector::<f64>::zeros(n + 1);
    b[n] = 1.0;
    let svd = m.svd(true, true);
    let w = svd.solve(&b, 1e-12).ok()?;
    let resid = (&a.a * &w).norm();
    (resid < 1e-9 && w.iter().all(|&v| v > 0.0)).then(|| w.iter().copied().collect())
}
