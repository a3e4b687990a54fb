//! Large-`K` limit: the deterministic measure flow, tagged sites driven by
//! it, the homogeneous McKean–Vlasov particle system, and the chaos scan.

use std::collections::BTreeMap;

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};
use crate::exec::{run_replicates, stream_seed, Execution, SimRng};
use crate::kernels::{RateModel, Trait};
use crate::stats::{correlation, Estimate};
use crate::tss::{tss_run, tss_run_observed, SiteConfiguration, TssConfig};

pub use crate::measure::{Atom, AtomicMeasure};

/// Masses `m[p][i]` of the atoms `(positions[p], traits[i])` at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct MassSnapshot {
    pub time: f64,
    pub mass: Vec<Vec<f64>>,
}

/// Solution of the measure flow on a fixed finite support.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldTrajectory {
    pub positions: Vec<f64>,
    pub traits: Vec<Trait>,
    pub snapshots: Vec<MassSnapshot>,
}

impl MeanFieldTrajectory {
    pub fn measure(&self, snapshot: usize) -> AtomicMeasure {
        let s = &self.snapshots[snapshot];
        AtomicMeasure::new(self.positions.iter().enumerate().flat_map(|(p, &r)| {
            self.traits
                .iter()
                .enumerate()
                .map(move |(i, x)| Atom { r, x: x.clone(), w: s.mass[p][i].max(0.0) })
        }))
        .expect("mass is conserved")
    }

    /// Total mass of each trait over all positions.
    pub fn trait_weights(&self, snapshot: usize) -> Vec<f64> {
        let s = &self.snapshots[snapshot];
        (0..self.traits.len())
            .map(|i| s.mass.iter().map(|row| row[i]).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub n: usize,
    pub horizon: f64,
    pub dt: f64,
    pub snapshot_interval: f64,
}

/// Coefficient tables of the closed mass system.
pub(crate) struct FlowSystem {
    n_pos: usize,
    n_traits: usize,
    /// `N θ(r_p, x^k) Q(x^k → x^i) α(r_p, x^i, x^k)`, indexed `[p][k][i]`.
    mutation: Vec<f64>,
    /// `N² α(r_p, x^j, x^k)`, indexed `[p][j][k]`.
    alpha: Vec<f64>,
    /// `λ((r_p, x^k), (r_q, x^j))`, indexed `[p][k][q][j]`.
    lambda: Vec<f64>,
}

impl FlowSystem {
    pub(crate) fn build(
        model: &RateModel,
        positions: &[f64],
        traits: &[Trait],
        n: usize,
        with_mutation: bool,
    ) -> Result<FlowSystem> {
        let (np, nt) = (positions.len(), traits.len());
        let mut sys = FlowSystem {
            n_pos: np,
            n_traits: nt,
            mutation: vec![0.0; np * nt * nt],
            alpha: vec![0.0; np * nt * nt],
            lambda: vec![0.0; np * nt * np * nt],
        };
        let n2 = (n * n) as f64;
        for (p, &r) in positions.iter().enumerate() {
            for j in 0..nt {
                for k in 0..nt {
                    sys.alpha[(p * nt + j) * nt + k] =
                        n2 * model.fixation_probability(r, &traits[j], &traits[k], n)?;
                }
            }
            for k in 0..nt {
                for (q, &rq) in positions.iter().enumerate() {
                    for j in 0..nt {
                        sys.lambda[((p * nt + k) * np + q) * nt + j] =
                            model.lambda(r, &traits[k], rq, &traits[j])?;
                    }
                }
            }
        }
        if !with_mutation || model.theta_kernel().is_zero() || !model.mutation().moves() {
            return Ok(sys);
        }
        let steps = model.mutation().discrete_steps(model.dim()).ok_or_else(|| {
            Error::Precondition(
                "mutation law has continuous support and leaks mass out of the trait set".into(),
            )
        })?;
        let eps = model.mutation().epsilon;
        for (p, &r) in positions.iter().enumerate() {
            for k in 0..nt {
                let theta = model.theta(r, &traits[k])?;
                if theta == 0.0 {
                    continue;
                }
                for (h, prob) in &steps {
                    let y: Vec<f64> = traits[k].iter().zip(h).map(|(x, h)| x + eps * h).collect();
                    let i = traits
                        .iter()
                        .position(|t| {
                            t.iter()
                                .zip(&y)
                                .all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + a.abs()))
                        })
                        .ok_or_else(|| {
                            Error::Precondition(format!(
                                "mutation from {:?} reaches {y:?}, outside the trait set",
                                traits[k]
                            ))
                        })?;
                    if i != k {
                        let alpha = model.fixation_probability(r, &traits[i], &traits[k], n)?;
                        sys.mutation[(p * nt + k) * nt + i] += n as f64 * theta * prob * alpha;
                    }
                }
            }
        }
        Ok(sys)
    }

    pub(crate) fn derivative(&self, m: &[f64], out: &mut [f64]) {
        let (np, nt) = (self.n_pos, self.n_traits);
        // f[p][k][j] = Σ_q λ((r_p, x^k), (r_q, x^j)) m[q][j]
        let mut f = vec![0.0; np * nt * nt];
        for p in 0..np {
            for k in 0..nt {
                for q in 0..np {
                    let row = &self.lambda[((p * nt + k) * np + q) * nt..((p * nt + k) * np + q + 1) * nt];
                    for j in 0..nt {
                        f[(p * nt + k) * nt + j] += row[j] * m[q * nt + j];
                    }
                }
            }
        }
        for p in 0..np {
            for i in 0..nt {
                let mut d = 0.0;
                for k in 0..nt {
                    d += m[p * nt + k] * self.mutation[(p * nt + k) * nt + i];
                    d -= m[p * nt + i] * self.mutation[(p * nt + i) * nt + k];
                    // gain: a k-site adopts x^i from any x^i-site
                    d += m[p * nt + k] * self.alpha[(p * nt + i) * nt + k] * f[(p * nt + k) * nt + i];
                    // loss: the x^i-site adopts x^k
                    d -= m[p * nt + i] * self.alpha[(p * nt + k) * nt + i] * f[(p * nt + i) * nt + k];
                }
                out[p * nt + i] = d;
            }
        }
    }
}

fn rk4_step(f: &dyn Fn(&[f64], &mut [f64]), y: &mut [f64], dt: f64, scratch: &mut [Vec<f64>; 5]) {
    let [k1, k2, k3, k4, tmp] = scratch;
    f(y, k1);
    for i in 0..y.len() {
        tmp[i] = y[i] + 0.5 * dt * k1[i];
    }
    f(tmp, k2);
    for i in 0..y.len() {
        tmp[i] = y[i] + 0.5 * dt * k2[i];
    }
    f(tmp, k3);
    for i in 0..y.len() {
        tmp[i] = y[i] + dt * k3[i];
    }
    f(tmp, k4);
    for i in 0..y.len() {
        y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Fixed-step RK4 from `t = 0` to `horizon`, calling `record` at every
/// multiple of `snapshot_interval` (rounded to whole steps). The last step is
/// shortened to land on the horizon.
pub(crate) fn integrate(
    f: &dyn Fn(&[f64], &mut [f64]),
    y: &mut [f64],
    dt: f64,
    horizon: f64,
    snapshot_interval: f64,
    mut check: impl FnMut(&mut [f64]) -> Result<()>,
    mut record: impl FnMut(f64, &[f64]),
) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) || !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "need dt > 0 and a finite horizon >= 0, got dt = {dt}, horizon = {horizon}"
        )));
    }
    if !(snapshot_interval > 0.0) {
        return Err(Error::InvalidParameter("snapshot interval must be > 0".into()));
    }
    // absorb rounding so that horizon = k dt takes exactly k steps
    let steps = (horizon / dt * (1.0 - 1e-12)).ceil().max(0.0) as u64;
    let every = ((snapshot_interval / dt).round() as u64).max(1);
    let mut scratch: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; y.len()]);
    record(0.0, y);
    for s in 1..=steps {
        let t_prev = (s - 1) as f64 * dt;
        let h = if s == steps { horizon - t_prev } else { dt };
        rk4_step(f, y, h, &mut scratch);
        check(y)?;
        if s % every == 0 || s == steps {
            let t = if s == steps { horizon } else { s as f64 * dt };
            record(t, y);
        }
    }
    Ok(())
}

/// Weight-floor check shared by the deterministic solvers: entries in
/// `[floor, 0)` are clipped to zero with a warning, anything lower fails.
pub(crate) fn clip_negative(y: &mut [f64], floor: f64) -> Result<()> {
    let mut clipped = 0usize;
    for v in y.iter_mut() {
        if *v < 0.0 {
            if *v < floor || v.is_nan() {
                return Err(Error::Numerical(format!("weight fell to {v}")));
            }
            *v = 0.0;
            clipped += 1;
        }
    }
    if clipped > 0 {
        warn!("clipped {clipped} slightly negative weights to zero");
    }
    Ok(())
}

/// Integrates the measure flow for an initial measure supported on
/// `positions × trait_set`.
pub fn meanfield_finite_solve(
    model: &RateModel,
    init: &AtomicMeasure,
    trait_set: &[Trait],
    cfg: &FlowConfig,
) -> Result<MeanFieldTrajectory> {
    if cfg.n == 0 {
        return Err(Error::InvalidParameter("patch size N must be >= 1".into()));
    }
    for (a, t) in trait_set.iter().enumerate() {
        if trait_set[..a].contains(t) {
            return Err(Error::InvalidParameter(format!("duplicate trait {t:?} in trait set")));
        }
    }
    let mut positions: Vec<f64> = init.atoms().iter().map(|a| a.r).collect();
    positions.sort_by(f64::total_cmp);
    positions.dedup();
    let nt = trait_set.len();
    let mut m = vec![0.0; positions.len() * nt];
    for a in init.atoms() {
        let p = positions.iter().position(|&r| r == a.r).unwrap();
        let i = trait_set.iter().position(|t| *t == a.x).ok_or_else(|| {
            Error::InvalidParameter(format!("initial atom trait {:?} is not in the trait set", a.x))
        })?;
        m[p * nt + i] += a.w;
    }
    let sys = FlowSystem::build(model, &positions, trait_set, cfg.n, true)?;
    let mut snapshots = Vec::new();
    let mut record = |t: f64, y: &[f64]| {
        snapshots.push(MassSnapshot {
            time: t,
            mass: y.chunks(nt).map(|c| c.to_vec()).collect(),
        })
    };
    let check = |y: &mut [f64]| -> Result<()> {
        clip_negative(y, -1e-12)?;
        let total: f64 = y.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::Numerical(format!("total mass drifted to {total}")));
        }
        Ok(())
    };
    integrate(
        &|y, out| sys.derivative(y, out),
        &mut m,
        cfg.dt,
        cfg.horizon,
        cfg.snapshot_interval,
        check,
        &mut record,
    )?;
    Ok(MeanFieldTrajectory {
        positions,
        traits: trait_set.to_vec(),
        snapshots,
    })
}

/// A measure given at increasing times, read as piecewise constant and
/// right-continuous; a single entry means constant in time.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurePath {
    times: Vec<f64>,
    measures: Vec<AtomicMeasure>,
}

impl MeasurePath {
    pub fn new(times: Vec<f64>, measures: Vec<AtomicMeasure>) -> Result<MeasurePath> {
        if times.is_empty() || times.len() != measures.len() {
            return Err(Error::InvalidParameter(
                "measure path needs matching, nonempty time and measure lists".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidParameter("measure path times must increase".into()));
        }
        Ok(MeasurePath { times, measures })
    }

    pub fn constant(measure: AtomicMeasure) -> MeasurePath {
        MeasurePath {
            times: vec![0.0],
            measures: vec![measure],
        }
    }

    pub fn from_trajectory(traj: &MeanFieldTrajectory) -> MeasurePath {
        MeasurePath {
            times: traj.snapshots.iter().map(|s| s.time).collect(),
            measures: (0..traj.snapshots.len()).map(|s| traj.measure(s)).collect(),
        }
    }

    /// Left limit at `t`: the last snapshot taken strictly before `t`.
    pub fn before(&self, t: f64) -> &AtomicMeasure {
        let idx = self.times.partition_point(|&s| s < t);
        &self.measures[idx.saturating_sub(1)]
    }

    fn covers(&self, horizon: f64) -> bool {
        self.times[0] <= 0.0
            && (self.times.len() == 1 || *self.times.last().unwrap() >= horizon * (1.0 - 1e-12))
    }
}

/// A tagged site at position `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedSite {
    pub z: f64,
    pub x: Trait,
}

/// Trajectory of one tagged site: initial trait and every change.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedPath {
    pub z: f64,
    pub initial: Trait,
    pub jumps: Vec<(f64, Trait)>,
}

impl TaggedPath {
    pub fn final_trait(&self) -> &Trait {
        self.jumps.last().map_or(&self.initial, |(_, x)| x)
    }

    pub fn at(&self, t: f64) -> &Trait {
        let idx = self.jumps.partition_point(|(s, _)| *s <= t);
        if idx == 0 {
            &self.initial
        } else {
            &self.jumps[idx - 1].1
        }
    }
}

fn tagged_site_path(
    model: &RateModel,
    site: &TaggedSite,
    nu: &MeasurePath,
    n: usize,
    horizon: f64,
    rng: &mut SimRng,
) -> Result<TaggedPath> {
    let c_max = model.bound();
    let mut_major = if model.theta_kernel().is_zero() { 0.0 } else { n as f64 * c_max };
    let mig_major = if model.lambda_kernel().is_zero() { 0.0 } else { (n * n) as f64 * c_max };
    let total = mut_major + mig_major;
    let mut path = TaggedPath {
        z: site.z,
        initial: site.x.clone(),
        jumps: Vec::new(),
    };
    if total == 0.0 {
        return Ok(path);
    }
    let wait = Exp::new(total).expect("positive rate");
    let mut x = site.x.clone();
    let mut t = 0.0;
    loop {
        t += wait.sample(rng);
        if t > horizon {
            break;
        }
        let new = if rng.random::<f64>() * total < mut_major {
            let theta = model.theta(site.z, &x)?;
            if rng.random::<f64>() * c_max >= theta {
                continue;
            }
            let y = model.mutation().sample(site.z, &x, rng);
            let alpha = model.fixation_probability(site.z, &y, &x, n)?;
            if rng.random::<f64>() >= alpha {
                continue;
            }
            y
        } else {
            let atom = nu.before(t).sample(rng);
            let lambda = model.lambda(site.z, &x, atom.r, &atom.x)?;
            let alpha = model.fixation_probability(site.z, &atom.x, &x, n)?;
            if rng.random::<f64>() * c_max >= lambda * alpha {
                continue;
            }
            atom.x.clone()
        };
        if new != x {
            path.jumps.push((t, new.clone()));
            x = new;
        }
    }
    Ok(path)
}

/// Independent tagged sites driven by a given measure path. Site `j` uses
/// stream `(seed, j)`.
pub fn tagged_sites_run(
    model: &RateModel,
    sites: &[TaggedSite],
    nu: &MeasurePath,
    n: usize,
    horizon: f64,
    seed: u64,
    exec: Execution,
) -> Result<Vec<TaggedPath>> {
    if n == 0 {
        return Err(Error::InvalidParameter("patch size N must be >= 1".into()));
    }
    if !nu.covers(horizon) {
        return Err(Error::Precondition(format!(
            "measure path does not cover [0, {horizon}]"
        )));
    }
    for s in sites {
        if !(0.0..=1.0).contains(&s.z) || s.x.dim() != model.dim() {
            return Err(Error::InvalidParameter(format!("invalid tagged site {s:?}")));
        }
    }
    run_replicates(exec, sites.len(), seed, |j, rng| {
        tagged_site_path(model, &sites[j], nu, n, horizon, rng)
    })
}

#[derive(Debug, Clone)]
pub struct McKeanVlasovRun {
    pub particles: Vec<Trait>,
    /// Empirical trait law at each snapshot time.
    pub laws: Vec<(f64, BTreeMap<Trait, f64>)>,
}

fn require_homogeneous(model: &RateModel) -> Result<()> {
    if model.is_homogeneous() {
        Ok(())
    } else {
        Err(Error::Precondition(
            "this operation needs a homogeneous model (no kernel may depend on r or rp)".into(),
        ))
    }
}

/// `M` interacting particles with initial traits drawn i.i.d. from the
/// trait marginal of `mu0`. This is the substitution sequence with `K = M`
/// under homogeneous kernels.
pub fn mckean_vlasov_run(
    model: &RateModel,
    m: usize,
    mu0: &AtomicMeasure,
    n: usize,
    horizon: f64,
    snapshot_interval: f64,
    rng: &mut SimRng,
) -> Result<McKeanVlasovRun> {
    require_homogeneous(model)?;
    if m < 2 {
        return Err(Error::InvalidParameter(format!("need M >= 2 particles, got {m}")));
    }
    let x: Vec<Trait> = (0..m).map(|_| mu0.sample(rng).x.clone()).collect();
    let mut cfg = TssConfig::new(n, horizon);
    cfg.snapshot_interval = Some(snapshot_interval);
    let mut laws = Vec::new();
    let w = 1.0 / m as f64;
    let (state, _) = tss_run_observed(model, SiteConfiguration::new(x)?, &cfg, rng, |t, xs| {
        let mut law = BTreeMap::new();
        for x in xs {
            *law.entry(x.clone()).or_insert(0.0) += w;
        }
        laws.push((t, law));
    })?;
    Ok(McKeanVlasovRun {
        particles: state.x,
        laws,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationRow {
    pub k: usize,
    pub estimate: f64,
    pub stderr: f64,
}

/// Correlation between `statistic(X¹_t*)` and `statistic(X²_t*)` across
/// replicates of the substitution sequence with `K` sites drawn i.i.d. from
/// the trait marginal of `mu0`, for each `K`.
///
/// The scan point `K_list[k]` uses master seed `stream_seed(seed, k)`.
#[allow(clippy::too_many_arguments)]
pub fn chaos_decay_scan(
    model: &RateModel,
    k_list: &[usize],
    mu0: &AtomicMeasure,
    n: usize,
    statistic: &(dyn Fn(&Trait) -> f64 + Sync),
    t_star: f64,
    replicates: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<CorrelationRow>> {
    require_homogeneous(model)?;
    if k_list.windows(2).any(|w| w[0] >= w[1]) || k_list.first().is_some_and(|&k| k < 2) {
        return Err(Error::InvalidParameter(
            "K list must be increasing with every K >= 2".into(),
        ));
    }
    if replicates < 3 {
        return Err(Error::InvalidParameter("need at least 3 replicates".into()));
    }
    let cfg = TssConfig::new(n, t_star);
    k_list
        .iter()
        .enumerate()
        .map(|(idx, &k)| {
            let pairs = run_replicates(exec, replicates, stream_seed(seed, idx as u64), |_, rng| {
                let x: Vec<Trait> = (0..k).map(|_| mu0.sample(rng).x.clone()).collect();
                let run = tss_run(model, SiteConfiguration::new(x)?, &cfg, rng)?;
                Ok((statistic(&run.state.x[0]), statistic(&run.state.x[1])))
            })?;
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let Estimate { value, stderr } = correlation(&a, &b);
            Ok(CorrelationRow {
                k,
                estimate: value,
                stderr,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::stream;
    use crate::kernels::{MutationFamily, MutationKind, RateFn};
    use crate::stats::mean_estimate;

    fn model(c: RateFn, theta: RateFn, lambda: RateFn, mutation: MutationFamily, bound: f64) -> RateModel {
        RateModel::new(c, theta, lambda, mutation, bound, 1).unwrap()
    }

    fn example1(n: usize) -> RateModel {
        model(
            RateFn::Constant(1.0),
            RateFn::Constant(0.0),
            RateFn::parse(&format!("x * (1 + y) / {n}")).unwrap(),
            MutationFamily::degenerate(),
            1.0,
        )
    }

    fn flow(n: usize, horizon: f64, dt: f64) -> FlowConfig {
        FlowConfig { n, horizon, dt, snapshot_interval: 0.5 }
    }

    fn uniform_grid(g: usize, weights: &[(f64, f64)]) -> AtomicMeasure {
        AtomicMeasure::new((0..g).flat_map(|p| {
            let r = (p as f64 + 0.5) / g as f64;
            weights
                .iter()
                .map(move |&(x, w)| Atom { r, x: Trait::scalar(x), w: w / g as f64 })
        }))
        .unwrap()
    }

    #[test]
    fn monomorphic_flow_is_constant() {
        let m = example1(2);
        let init = uniform_grid(8, &[(0.4, 1.0)]);
        let traj = meanfield_finite_solve(&m, &init, &[Trait::scalar(0.4)], &flow(2, 5.0, 0.01)).unwrap();
        for s in &traj.snapshots {
            assert_eq!(s.mass, traj.snapshots[0].mass);
        }
    }

    #[test]
    fn two_trait_flow_is_logistic() {
        // Mean weight of x¹ = 0.2 follows w' = 0.3 w (1 - w).
        let m = example1(2);
        let init = uniform_grid(4, &[(0.2, 0.3), (0.5, 0.7)]);
        let traits = [Trait::scalar(0.2), Trait::scalar(0.5)];
        let traj = meanfield_finite_solve(&m, &init, &traits, &flow(2, 20.0, 0.01)).unwrap();
        for (s, snap) in traj.snapshots.iter().enumerate() {
            let w = traj.trait_weights(s)[0];
            let t = snap.time;
            let exact = 0.3 * (0.3 * t).exp() / (0.7 + 0.3 * (0.3 * t).exp());
            assert!((w - exact).abs() < 1e-9, "t = {t}: {w} vs {exact}");
            let total: f64 = traj.trait_weights(s).iter().sum();
            assert!((total - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn discrete_mutation_stays_on_the_lattice() {
        let m = model(
            RateFn::Constant(0.5),
            RateFn::Constant(0.4),
            RateFn::Constant(0.0),
            MutationFamily::new(MutationKind::DiscretePm, 1.0).unwrap(),
            1.0,
        );
        let lattice: Vec<Trait> = (-3..=3).map(|i| Trait::scalar(i as f64)).collect();
        let init = AtomicMeasure::dirac(0.5, Trait::scalar(0.0)).unwrap();
        // The walk leaves the lattice from its ends.
        assert!(meanfield_finite_solve(&m, &init, &lattice, &flow(3, 1.0, 0.01)).is_err());
        let frozen_edges = model(
            RateFn::Constant(0.5),
            RateFn::parse("0.4 * max(0, 1 - abs(x) / 3)").unwrap(),
            RateFn::Constant(0.0),
            MutationFamily::new(MutationKind::DiscretePm, 1.0).unwrap(),
            1.0,
        );
        let traj = meanfield_finite_solve(&frozen_edges, &init, &lattice, &flow(3, 4.0, 0.01)).unwrap();
        let last = traj.snapshots.len() - 1;
        let w = traj.trait_weights(last);
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        assert!(w[3] < 1.0 && (w[2] - w[4]).abs() < 1e-12);
        let gaussian = model(
            RateFn::Constant(0.5),
            RateFn::Constant(0.4),
            RateFn::Constant(0.0),
            MutationFamily::new(MutationKind::IsotropicGaussian { std: 1.0 }, 0.1).unwrap(),
            1.0,
        );
        assert!(matches!(
            meanfield_finite_solve(&gaussian, &init, &lattice, &flow(3, 1.0, 0.01)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn rk4_self_convergence() {
        let m = example1(2);
        let init = uniform_grid(4, &[(0.2, 0.2), (0.5, 0.3), (0.9, 0.5)]);
        let traits = [Trait::scalar(0.2), Trait::scalar(0.5), Trait::scalar(0.9)];
        let a = meanfield_finite_solve(&m, &init, &traits, &flow(2, 10.0, 0.02)).unwrap();
        let b = meanfield_finite_solve(&m, &init, &traits, &flow(2, 10.0, 0.01)).unwrap();
        let (la, lb) = (a.snapshots.last().unwrap(), b.snapshots.last().unwrap());
        for (ra, rb) in la.mass.iter().zip(&lb.mass) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn frozen_tagged_sites() {
        let m = model(
            RateFn::Constant(1.0),
            RateFn::Constant(0.0),
            RateFn::Constant(0.0),
            MutationFamily::degenerate(),
            1.0,
        );
        let nu = MeasurePath::constant(AtomicMeasure::dirac(0.5, Trait::scalar(2.0)).unwrap());
        let sites = vec![TaggedSite { z: 0.2, x: Trait::scalar(0.0) }; 3];
        let paths = tagged_sites_run(&m, &sites, &nu, 4, 10.0, 1, Execution::Sequential).unwrap();
        assert!(paths.iter().all(|p| p.jumps.is_empty()));
    }

    #[test]
    fn tagged_holding_time_is_exponential() {
        let n = 3;
        let m = model(
            RateFn::parse("1 / (1 + exp(x - y))").unwrap(),
            RateFn::Constant(0.0),
            RateFn::parse("0.3 + 0.5 * rp * x").unwrap(),
            MutationFamily::degenerate(),
            1.0,
        );
        let (r_star, y_star, z, x0) = (0.8, 1.0, 0.3, 0.5);
        let nu = MeasurePath::constant(AtomicMeasure::dirac(r_star, Trait::scalar(y_star)).unwrap());
        let sites = vec![TaggedSite { z, x: Trait::scalar(x0) }; 10_000];
        let paths = tagged_sites_run(&m, &sites, &nu, n, 1e3, 2, Execution::Parallel).unwrap();
        let times: Vec<f64> = paths.iter().map(|p| p.jumps[0].0).collect();
        let rate = (n * n) as f64
            * m.lambda(z, &[x0], r_star, &[y_star]).unwrap()
            * m.fixation_probability(z, &[y_star], &[x0], n).unwrap();
        let est = mean_estimate(&times);
        assert!(est.within(1.0 / rate, 4.0), "{est:?} vs {}", 1.0 / rate);
        assert!(paths.iter().all(|p| p.jumps.len() == 1));
    }

    #[test]
    fn tagged_sites_are_uncorrelated() {
        let m = model(
            RateFn::Constant(1.0),
            RateFn::Constant(0.0),
            RateFn::Constant(0.5),
            MutationFamily::degenerate(),
            1.0,
        );
        let nu = MeasurePath::constant(
            AtomicMeasure::new([
                Atom { r: 0.5, x: Trait::scalar(0.0), w: 0.5 },
                Atom { r: 0.5, x: Trait::scalar(1.0), w: 0.5 },
            ])
            .unwrap(),
        );
        let sites = [TaggedSite { z: 0.1, x: Trait::scalar(0.0) }, TaggedSite { z: 0.9, x: Trait::scalar(0.0) }];
        let pairs = run_replicates(Execution::Parallel, 10_000, 3, |i, _| {
            let p = tagged_sites_run(&m, &sites, &nu, 3, 0.5, stream_seed(3, i as u64), Execution::Sequential)?;
            Ok((p[0].final_trait()[0], p[1].final_trait()[0]))
        })
        .unwrap();
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let est = correlation(&a, &b);
        assert!(est.within(0.0, 4.0), "{est:?}");
    }

    #[test]
    fn left_limits_of_a_path() {
        let mu = |x: f64| AtomicMeasure::dirac(0.5, Trait::scalar(x)).unwrap();
        let path = MeasurePath::new(vec![0.0, 1.0, 2.0], vec![mu(0.0), mu(1.0), mu(2.0)]).unwrap();
        assert_eq!(path.before(1.0).atoms()[0].x[0], 0.0);
        assert_eq!(path.before(1.5).atoms()[0].x[0], 1.0);
        assert_eq!(path.before(0.0).atoms()[0].x[0], 0.0);
        assert!(path.covers(2.0) && !path.covers(3.0));
    }

    #[test]
    fn mckean_vlasov_preconditions_and_freezing() {
        let m = example1(2);
        let mu0 = AtomicMeasure::dirac(0.5, Trait::scalar(0.2)).unwrap();
        assert!(mckean_vlasov_run(&m, 1, &mu0, 2, 1.0, 0.5, &mut stream(1, 0)).is_err());
        let spatial = model(
            RateFn::Constant(1.0),
            RateFn::Constant(0.0),
            RateFn::parse("r / 2").unwrap(),
            MutationFamily::degenerate(),
            1.0,
        );
        assert!(mckean_vlasov_run(&spatial, 10, &mu0, 2, 1.0, 0.5, &mut stream(1, 0)).is_err());

        let frozen = model(
            RateFn::Constant(1.0),
            RateFn::Constant(0.7),
            RateFn::Constant(0.0),
            MutationFamily::degenerate(),
            1.0,
        );
        let two = AtomicMeasure::new([
            Atom { r: 0.5, x: Trait::scalar(0.0), w: 0.5 },
            Atom { r: 0.5, x: Trait::scalar(1.0), w: 0.5 },
        ])
        .unwrap();
        let run = mckean_vlasov_run(&frozen, 100, &two, 3, 5.0, 1.0, &mut stream(2, 0)).unwrap();
        let first = &run.laws[0].1;
        assert!(run.laws.iter().all(|(_, law)| law == first));
    }

    #[test]
    fn mckean_vlasov_particles_are_exchangeable() {
        let m = example1(2);
        let two = AtomicMeasure::new([
            Atom { r: 0.5, x: Trait::scalar(0.2), w: 0.5 },
            Atom { r: 0.5, x: Trait::scalar(0.5), w: 0.5 },
        ])
        .unwrap();
        let diffs = run_replicates(Execution::Parallel, 10_000, 4, |_, rng| {
            let run = mckean_vlasov_run(&m, 20, &two, 2, 2.0, 2.0, rng)?;
            Ok(run.particles[0][0] - run.particles[1][0])
        })
        .unwrap();
        assert!(mean_estimate(&diffs).within(0.0, 4.0));
    }

    #[test]
    fn chaos_scan_edge_cases() {
        let m = model(
            RateFn::Constant(1.0),
            RateFn::Constant(0.0),
            RateFn::Constant(1.0),
            MutationFamily::degenerate(),
            1.0,
        );
        let mu0 = AtomicMeasure::new([
            Atom { r: 0.5, x: Trait::scalar(0.0), w: 0.5 },
            Atom { r: 0.5, x: Trait::scalar(1.0), w: 0.5 },
        ])
        .unwrap();
        let stat = |x: &Trait| x[0];
        let rows = chaos_decay_scan(&m, &[10], &mu0, 5, &stat, 0.0, 4000, 1, Execution::Parallel).unwrap();
        assert!(rows[0].estimate.abs() <= 4.0 / 4000f64.sqrt());

        let isolated = model(
            RateFn::Constant(1.0),
            RateFn::Constant(0.0),
            RateFn::Constant(0.0),
            MutationFamily::degenerate(),
            1.0,
        );
        let rows = chaos_decay_scan(&isolated, &[10], &mu0, 5, &stat, 2.0, 4000, 2, Execution::Parallel).unwrap();
        assert!(rows[0].estimate.abs() <= 4.0 / 4000f64.sqrt());
        assert!(chaos_decay_scan(&m, &[10, 5], &mu0, 5, &stat, 1.0, 100, 1, Execution::Parallel).is_err());
    }
}
