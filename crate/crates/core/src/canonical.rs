//! Accelerated-time limit under slow migration: each site's trait follows
//!
//! ```text
//! dX = ((N-1)/2) θ Σ ∇₂Fit(z, X, X) dt + √θ σ dB
//! ```
//!
//! and jumps to `y` at rate `N² λ((z, X), (r, y)) α(z, y, X)` against the
//! population measure `ξ_{t-}(dr, dy)`. `ξ` is always represented by a
//! particle ensemble.
//!
//! Discretization: Euler–Maruyama for the diffusion, then one thinned jump
//! pass per step, both reading the ensemble frozen at the start of the step.

use std::sync::Mutex;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec::{run_replicates, stream, Execution, SimRng};
use crate::kernels::{MutationCovariance, RateModel, Trait};
use crate::stats::{mean, variance};

/// Largest admissible per-step jump proposal probability `N² C dt`.
pub const MAX_JUMP_PROBABILITY: f64 = 0.1;

/// A site at fixed position `r` carrying trait `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalParticle {
    pub r: f64,
    pub x: Trait,
}

/// Equally weighted particles standing in for `ξ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct XiEnsemble {
    particles: Vec<CanonicalParticle>,
    time: f64,
}

impl XiEnsemble {
    pub fn new(particles: Vec<CanonicalParticle>) -> Result<XiEnsemble> {
        if particles.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "an ensemble needs M >= 2 particles, got {}",
                particles.len()
            )));
        }
        check_particles(&particles)?;
        Ok(XiEnsemble {
            particles,
            time: 0.0,
        })
    }

    pub fn particles(&self) -> &[CanonicalParticle] {
        &self.particles
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }
}

fn check_particles(particles: &[CanonicalParticle]) -> Result<()> {
    let d = particles.first().map_or(0, |p| p.x.dim());
    for p in particles {
        if !(0.0..=1.0).contains(&p.r) || !p.x.is_finite() || p.x.dim() != d || d == 0 {
            return Err(Error::InvalidParameter(format!("invalid particle {p:?}")));
        }
    }
    Ok(())
}

/// `((N-1)/2) θ(r, x) Σ ∇₂Fit(r, x, x)`.
pub fn drift(model: &RateModel, r: f64, x: &[f64], n: usize) -> Result<Vec<f64>> {
    let cov = model.mutation().covariance(x.len())?;
    drift_with(model, &cov, r, x, n)
}

fn drift_with(
    model: &RateModel,
    cov: &MutationCovariance,
    r: f64,
    x: &[f64],
    n: usize,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidParameter("patch size N must be >= 1".into()));
    }
    let theta = model.theta(r, x)?;
    if theta == 0.0 || n == 1 {
        return Ok(vec![0.0; x.len()]);
    }
    let grad = DVector::from_vec(model.fitness_gradient(r, x)?);
    let scale = (n as f64 - 1.0) / 2.0 * theta;
    Ok((&cov.sigma * grad * scale).iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalConfig {
    pub n: usize,
    pub dt: f64,
    pub horizon: f64,
    /// `None` records only the initial and final states.
    pub snapshot_interval: Option<f64>,
}

impl CanonicalConfig {
    pub fn new(n: usize, dt: f64, horizon: f64) -> CanonicalConfig {
        CanonicalConfig {
            n,
            dt,
            horizon,
            snapshot_interval: None,
        }
    }

    fn validate(&self, model: &RateModel) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("patch size N must be >= 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) || !(self.horizon >= 0.0 && self.horizon.is_finite())
        {
            return Err(Error::InvalidParameter(format!(
                "need dt > 0 and a finite horizon >= 0, got dt = {}, horizon = {}",
                self.dt, self.horizon
            )));
        }
        if let Some(s) = self.snapshot_interval {
            if !(s > 0.0) {
                return Err(Error::InvalidParameter(format!("snapshot interval {s} must be > 0")));
            }
        }
        let p = self.jump_probability(model);
        if p >= MAX_JUMP_PROBABILITY {
            return Err(Error::Precondition(format!(
                "per-step jump probability N² C dt = {p} must stay below {MAX_JUMP_PROBABILITY}; reduce dt"
            )));
        }
        Ok(())
    }

    fn jump_probability(&self, model: &RateModel) -> f64 {
        if model.lambda_kernel().is_zero() {
            0.0
        } else {
            (self.n * self.n) as f64 * model.bound() * self.dt
        }
    }

    fn steps(&self) -> usize {
        (self.horizon / self.dt * (1.0 - 1e-12)).ceil() as usize
    }

    fn record_every(&self) -> Option<usize> {
        self.snapshot_interval
            .map(|s| ((s / self.dt).round() as usize).max(1))
    }

    fn step_time(&self, k: usize) -> f64 {
        (k as f64 * self.dt).min(self.horizon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSnapshot {
    pub time: f64,
    pub x: Vec<Trait>,
}

impl EnsembleSnapshot {
    /// Per-coordinate sample mean.
    pub fn mean(&self) -> Vec<f64> {
        self.coords().iter().map(|c| mean(c)).collect()
    }

    /// Per-coordinate unbiased sample variance.
    pub fn variance(&self) -> Vec<f64> {
        self.coords().iter().map(|c| variance(c)).collect()
    }

    /// Column `i` holds coordinate `i` of every particle.
    pub fn coords(&self) -> Vec<Vec<f64>> {
        let d = self.x.first().map_or(0, |x| x.dim());
        (0..d).map(|i| self.x.iter().map(|x| x[i]).collect()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalTrajectory {
    pub positions: Vec<f64>,
    pub snapshots: Vec<EnsembleSnapshot>,
    pub jumps_proposed: u64,
    pub jumps_accepted: u64,
}

impl CanonicalTrajectory {
    pub fn final_snapshot(&self) -> &EnsembleSnapshot {
        self.snapshots.last().expect("a trajectory always has its initial snapshot")
    }

    pub fn ensemble(&self, s: usize) -> XiEnsemble {
        XiEnsemble {
            particles: self
                .positions
                .iter()
                .zip(&self.snapshots[s].x)
                .map(|(&r, x)| CanonicalParticle { r, x: x.clone() })
                .collect(),
            time: self.snapshots[s].time,
        }
    }
}

/// Outcome of one particle update.
#[derive(Default)]
struct StepTally {
    proposed: bool,
    accepted: bool,
}

/// Shared per-step machinery for the ensemble and tagged runs.
struct Stepper<'a> {
    model: &'a RateModel,
    cov: MutationCovariance,
    n: usize,
    /// `N² C`, or zero when `λ` is identically zero.
    jump_rate: f64,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a RateModel, cfg: &CanonicalConfig) -> Result<Stepper<'a>> {
        cfg.validate(model)?;
        Ok(Stepper {
            model,
            cov: model.mutation().covariance(model.dim())?,
            n: cfg.n,
            jump_rate: cfg.jump_probability(model) / cfg.dt,
        })
    }

    /// Advances a trait at position `z` by `h`; `target` draws a jump
    /// target from the frozen measure.
    fn advance<'t>(
        &self,
        z: f64,
        x: &Trait,
        h: f64,
        rng: &mut SimRng,
        target: impl FnOnce(&mut SimRng) -> (f64, &'t Trait),
    ) -> Result<(Trait, StepTally)> {
        let d = x.dim();
        let mut tally = StepTally::default();
        let mut next = x.clone();
        let theta = self.model.theta(z, x)?;
        if theta > 0.0 && self.model.mutation().moves() {
            let mu = drift_with(self.model, &self.cov, z, x, self.n)?;
            let db = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let noise = &self.cov.factor * db * (theta * h).sqrt();
            for i in 0..d {
                next.coords_mut()[i] += mu[i] * h + noise[i];
            }
        }
        if self.jump_rate > 0.0 && rng.random::<f64>() < self.jump_rate * h {
            tally.proposed = true;
            let (rp, y) = target(rng);
            let lam = self.model.lambda(z, x, rp, y)?;
            let accept = if lam == 0.0 {
                0.0
            } else {
                lam * self.model.fixation_probability(z, y, x, self.n)? / self.model.bound()
            };
            if rng.random::<f64>() < accept {
                tally.accepted = true;
                next = y.clone();
            }
        }
        if !next.is_finite() {
            return Err(Error::Numerical(format!("trait left the finite range at z = {z}")));
        }
        Ok((next, tally))
    }
}

struct Slot {
    rng: SimRng,
    x: Trait,
    tally: StepTally,
}

/// Ensemble run. Particle `j` draws from stream `(seed, j)`, so the output
/// does not depend on `exec`.
pub fn canonical_ensemble_run(
    model: &RateModel,
    ensemble0: &XiEnsemble,
    cfg: &CanonicalConfig,
    seed: u64,
    exec: Execution,
) -> Result<CanonicalTrajectory> {
    let stepper = Stepper::new(model, cfg)?;
    if ensemble0.particles.iter().any(|p| p.x.dim() != model.dim()) {
        return Err(Error::InvalidParameter(format!(
            "ensemble traits must have dimension {}",
            model.dim()
        )));
    }
    let positions: Vec<f64> = ensemble0.particles.iter().map(|p| p.r).collect();
    let mut slots: Vec<Slot> = ensemble0
        .particles
        .iter()
        .enumerate()
        .map(|(j, p)| Slot {
            rng: stream(seed, j as u64),
            x: p.x.clone(),
            tally: StepTally::default(),
        })
        .collect();
    let m = slots.len();
    let mut traj = CanonicalTrajectory {
        positions: positions.clone(),
        snapshots: vec![EnsembleSnapshot {
            time: 0.0,
            x: slots.iter().map(|s| s.x.clone()).collect(),
        }],
        jumps_proposed: 0,
        jumps_accepted: 0,
    };
    let steps = cfg.steps();
    let every = cfg.record_every();
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    for k in 0..steps {
        let t0 = cfg.step_time(k);
        let h = cfg.step_time(k + 1) - t0;
        let frozen: Vec<Trait> = slots.iter().map(|s| s.x.clone()).collect();
        exec.for_each_mut(&mut slots, |j, slot| {
            let step = stepper.advance(positions[j], &frozen[j], h, &mut slot.rng, |rng| {
                let i = rng.random_range(0..m);
                (positions[i], &frozen[i])
            });
            match step {
                Ok((x, tally)) => {
                    slot.x = x;
                    slot.tally = tally;
                }
                Err(e) => {
                    failure.lock().unwrap().get_or_insert(e);
                }
            }
        });
        if let Some(e) = failure.lock().unwrap().take() {
            return Err(e);
        }
        for s in &slots {
            traj.jumps_proposed += s.tally.proposed as u64;
            traj.jumps_accepted += s.tally.accepted as u64;
        }
        let last = k + 1 == steps;
        if last || every.is_some_and(|e| (k + 1) % e == 0) {
            traj.snapshots.push(EnsembleSnapshot {
                time: cfg.step_time(k + 1),
                x: slots.iter().map(|s| s.x.clone()).collect(),
            });
        }
    }
    Ok(traj)
}

/// Stored `ξ` snapshots, read with the left-limit convention.
#[derive(Debug, Clone, PartialEq)]
pub struct XiPath {
    times: Vec<f64>,
    snapshots: Vec<Vec<CanonicalParticle>>,
}

impl XiPath {
    pub fn new(times: Vec<f64>, snapshots: Vec<Vec<CanonicalParticle>>) -> Result<XiPath> {
        if times.is_empty() || times.len() != snapshots.len() {
            return Err(Error::InvalidParameter(
                "xi path needs matching, nonempty time and snapshot lists".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidParameter("xi path times must increase".into()));
        }
        for s in &snapshots {
            if s.is_empty() {
                return Err(Error::InvalidParameter("xi snapshots must be nonempty".into()));
            }
            check_particles(s)?;
        }
        Ok(XiPath { times, snapshots })
    }

    /// Time-independent `ξ`.
    pub fn constant(particles: Vec<CanonicalParticle>) -> Result<XiPath> {
        XiPath::new(vec![0.0], vec![particles])
    }

    pub fn from_trajectory(traj: &CanonicalTrajectory) -> XiPath {
        XiPath {
            times: traj.snapshots.iter().map(|s| s.time).collect(),
            snapshots: (0..traj.snapshots.len())
                .map(|s| traj.ensemble(s).particles)
                .collect(),
        }
    }

    /// The last snapshot taken strictly before `t` (the first one at `t = 0`).
    pub fn before(&self, t: f64) -> &[CanonicalParticle] {
        let idx = self.times.partition_point(|&s| s < t);
        &self.snapshots[idx.saturating_sub(1)]
    }

    fn covers(&self, horizon: f64, dt: f64) -> bool {
        // a step starting at t reads the snapshot before t, so the last one
        // needed is the one preceding the final step
        self.times[0] <= 0.0
            && (self.times.len() == 1
                || *self.times.last().unwrap() >= (horizon - dt).max(0.0) * (1.0 - 1e-12))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedCanonicalPath {
    pub z: f64,
    pub times: Vec<f64>,
    pub x: Vec<Trait>,
    /// Times of accepted jumps, including ones that land on the same trait.
    pub jump_times: Vec<f64>,
}

impl TaggedCanonicalPath {
    pub fn final_trait(&self) -> &Trait {
        self.x.last().expect("a path always has its initial point")
    }
}

/// One tagged site at `z` driven by stored `ξ` snapshots.
pub fn tagged_canonical_run(
    model: &RateModel,
    z: f64,
    x0: &Trait,
    xi: &XiPath,
    cfg: &CanonicalConfig,
    rng: &mut SimRng,
) -> Result<TaggedCanonicalPath> {
    let stepper = Stepper::new(model, cfg)?;
    if !(0.0..=1.0).contains(&z) || x0.dim() != model.dim() || !x0.is_finite() {
        return Err(Error::InvalidParameter(format!("invalid tagged site ({z}, {x0:?})")));
    }
    if !xi.covers(cfg.horizon, cfg.dt) {
        return Err(Error::Precondition(format!(
            "xi snapshots do not cover [0, {}]",
            cfg.horizon
        )));
    }
    let mut path = TaggedCanonicalPath {
        z,
        times: vec![0.0],
        x: vec![x0.clone()],
        jump_times: Vec::new(),
    };
    let mut x = x0.clone();
    let steps = cfg.steps();
    let every = cfg.record_every();
    for k in 0..steps {
        let t0 = cfg.step_time(k);
        let t1 = cfg.step_time(k + 1);
        let pool = xi.before(t0);
        let (next, tally) = stepper.advance(z, &x, t1 - t0, rng, |rng| {
            let p = &pool[rng.random_range(0..pool.len())];
            (p.r, &p.x)
        })?;
        x = next;
        if tally.accepted {
            path.jump_times.push(t1);
        }
        if k + 1 == steps || every.is_some_and(|e| (k + 1) % e == 0) {
            path.times.push(t1);
            path.x.push(x.clone());
        }
    }
    Ok(path)
}

/// Independent tagged sites; site `j` starts from `starts[j]` and draws from
/// stream `(seed, j)`.
pub fn tagged_canonical_replicates(
    model: &RateModel,
    starts: &[CanonicalParticle],
    xi: &XiPath,
    cfg: &CanonicalConfig,
    seed: u64,
    exec: Execution,
) -> Result<Vec<TaggedCanonicalPath>> {
    run_replicates(exec, starts.len(), seed, |j, rng| {
        tagged_canonical_run(model, starts[j].r, &starts[j].x, xi, cfg, rng)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{MutationFamily, MutationKind, RateFn};
    use crate::stats::{mean_estimate, proportion, variance_estimate};

    fn model(c: &str, theta: f64, lambda: &str, std: f64, bound: f64) -> RateModel {
        let mutation = if std > 0.0 {
            MutationFamily::new(MutationKind::IsotropicGaussian { std }, 0.01).unwrap()
        } else {
            MutationFamily::degenerate()
        };
        RateModel::new(
            RateFn::parse(c).unwrap(),
            RateFn::Constant(theta),
            RateFn::parse(lambda).unwrap(),
            mutation,
            bound,
            1,
        )
        .unwrap()
    }

    fn ensemble(m: usize, x0: f64) -> XiEnsemble {
        XiEnsemble::new(
            (0..m)
                .map(|j| CanonicalParticle {
                    r: (j as f64 + 0.5) / m as f64,
                    x: Trait::scalar(x0),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn drift_examples() {
        let sym = model("1 + x * y", 1.0, "0", 1.0, 10.0);
        assert!(drift(&sym, 0.3, &[0.4], 2).unwrap()[0].abs() < 1e-9);
        let exp = model("exp(y - x)", 1.0, "0", 1.0, 10.0);
        let d2 = drift(&exp, 0.3, &[0.4], 2).unwrap()[0];
        assert!((d2 - 1.0).abs() < 1e-8, "{d2}");
        let d5 = drift(&exp, 0.3, &[0.4], 5).unwrap()[0];
        assert!((d5 - 4.0 * d2).abs() < 1e-8);
    }

    #[test]
    fn brownian_moments() {
        let m = model("1", 1.0, "0", 1.0, 1.0);
        let cfg = CanonicalConfig::new(2, 1e-2, 1.0);
        let traj = canonical_ensemble_run(&m, &ensemble(10_000, 0.5), &cfg, 3, Execution::Parallel).unwrap();
        let fin = traj.final_snapshot();
        assert!((fin.time - 1.0).abs() < 1e-12);
        let xs = &fin.coords()[0];
        assert!(mean_estimate(xs).within(0.5, 4.0));
        assert!(variance_estimate(xs).within(1.0, 4.0));
    }

    #[test]
    fn frozen_without_mutation_or_migration() {
        let m = model("1", 0.0, "0", 1.0, 1.0);
        let ens = XiEnsemble::new(vec![
            CanonicalParticle { r: 0.1, x: Trait::scalar(0.2) },
            CanonicalParticle { r: 0.9, x: Trait::scalar(-1.0) },
        ])
        .unwrap();
        let mut cfg = CanonicalConfig::new(3, 1e-2, 2.0);
        cfg.snapshot_interval = Some(0.5);
        let traj = canonical_ensemble_run(&m, &ens, &cfg, 1, Execution::Sequential).unwrap();
        assert_eq!(traj.snapshots.len(), 5);
        assert!(traj.snapshots.iter().all(|s| s.x == traj.snapshots[0].x));
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let m = model("exp(y - x)", 1.0, "0.5", 0.5, 10.0);
        let cfg = CanonicalConfig::new(2, 1e-3, 0.2);
        let a = canonical_ensemble_run(&m, &ensemble(50, 0.0), &cfg, 9, Execution::Sequential).unwrap();
        let b = canonical_ensemble_run(&m, &ensemble(50, 0.0), &cfg, 9, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jump_bound_enforced() {
        let m = model("1", 1.0, "1", 1.0, 1.0);
        let cfg = CanonicalConfig::new(4, 1e-2, 1.0);
        let err = canonical_ensemble_run(&m, &ensemble(4, 0.0), &cfg, 0, Execution::Sequential);
        assert!(matches!(err, Err(Error::Precondition(_))));
        assert!(XiEnsemble::new(vec![CanonicalParticle { r: 0.5, x: Trait::scalar(0.0) }]).is_err());
    }

    #[test]
    fn holding_time_against_a_dirac() {
        // rate N² λ α = 4 · 0.5 · 0.5 = 1
        let m = model("1", 0.0, "0.5", 0.0, 1.0);
        let xi = XiPath::constant(vec![CanonicalParticle { r: 0.7, x: Trait::scalar(1.0) }]).unwrap();
        let cfg = CanonicalConfig::new(2, 1e-3, 30.0);
        let starts = vec![CanonicalParticle { r: 0.2, x: Trait::scalar(0.0) }; 4000];
        let paths = tagged_canonical_replicates(&m, &starts, &xi, &cfg, 5, Execution::Parallel).unwrap();
        let first: Vec<f64> = paths.iter().map(|p| p.jump_times[0]).collect();
        assert!(mean_estimate(&first).within(1.0, 4.0), "{:?}", mean_estimate(&first));
        assert!(paths.iter().all(|p| p.final_trait()[0] == 1.0));
    }

    #[test]
    fn accepted_jump_rate_matches() {
        // c constant gives α = 1/N, so each particle jumps at N λ = 0.6
        let m = model("1", 0.0, "0.3", 0.0, 1.0);
        let ens = XiEnsemble::new(
            (0..400)
                .map(|j| CanonicalParticle { r: 0.5, x: Trait::scalar((j % 7) as f64) })
                .collect(),
        )
        .unwrap();
        let cfg = CanonicalConfig::new(2, 1e-2, 5.0);
        let traj = canonical_ensemble_run(&m, &ens, &cfg, 11, Execution::Parallel).unwrap();
        let expected = 400.0 * 5.0 * 0.6;
        let got = traj.jumps_accepted as f64;
        assert!((got - expected).abs() <= 4.0 * expected.sqrt(), "{got} vs {expected}");
        assert!(traj.jumps_accepted <= traj.jumps_proposed);
    }

    #[test]
    fn tagged_sites_follow_the_ensemble_law() {
        // selection toward larger traits plus migration: compare the law of a
        // site in the ensemble with a tagged site driven by its snapshots
        let m = model("exp(sin(y - x))", 1.0, "0.5", 0.3, 3.0);
        let ens = XiEnsemble::new(
            (0..3000)
                .map(|j| CanonicalParticle { r: 0.5, x: Trait::scalar(if j % 3 == 0 { 1.0 } else { -1.0 }) })
                .collect(),
        )
        .unwrap();
        let mut cfg = CanonicalConfig::new(2, 5e-3, 1.0);
        cfg.snapshot_interval = Some(5e-3);
        let traj = canonical_ensemble_run(&m, &ens, &cfg, 21, Execution::Parallel).unwrap();
        let xi = XiPath::from_trajectory(&traj);
        let tagged = tagged_canonical_replicates(&m, ens.particles(), &xi, &cfg, 22, Execution::Parallel).unwrap();
        let a = mean_estimate(&traj.final_snapshot().coords()[0]);
        let b = mean_estimate(&tagged.iter().map(|p| p.final_trait()[0]).collect::<Vec<_>>());
        let se = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
        assert!((a.value - b.value).abs() <= 4.0 * se, "{a:?} vs {b:?}");
        let pa = proportion(traj.final_snapshot().x.iter().filter(|x| x[0] > 0.0).count(), 3000);
        let pb = proportion(tagged.iter().filter(|p| p.final_trait()[0] > 0.0).count(), 3000);
        let se = (pa.stderr.powi(2) + pb.stderr.powi(2)).sqrt();
        assert!((pa.value - pb.value).abs() <= 4.0 * se, "{pa:?} vs {pb:?}");
    }

    #[test]
    fn tagged_without_migration_is_the_sde() {
        let m = model("exp(y - x)", 1.0, "0", 1.0, 10.0);
        let xi = XiPath::constant(vec![CanonicalParticle { r: 0.5, x: Trait::scalar(0.0) }]).unwrap();
        let cfg = CanonicalConfig::new(2, 1e-2, 1.0);
        let starts = vec![CanonicalParticle { r: 0.5, x: Trait::scalar(0.0) }; 5000];
        let paths = tagged_canonical_replicates(&m, &starts, &xi, &cfg, 2, Execution::Parallel).unwrap();
        let xs: Vec<f64> = paths.iter().map(|p| p.final_trait()[0]).collect();
        assert!(mean_estimate(&xs).within(1.0, 4.0));
        assert!(variance_estimate(&xs).within(1.0, 4.0));
        assert!(paths.iter().all(|p| p.jump_times.is_empty()));
    }

    #[test]
    fn xi_path_coverage() {
        let m = model("1", 0.0, "0.5", 0.0, 1.0);
        let p = || vec![CanonicalParticle { r: 0.5, x: Trait::scalar(0.0) }];
        let xi = XiPath::new(vec![0.0, 0.5], vec![p(), p()]).unwrap();
        let cfg = CanonicalConfig::new(2, 1e-2, 2.0);
        let mut rng = stream(0, 0);
        let err = tagged_canonical_run(&m, 0.5, &Trait::scalar(0.0), &xi, &cfg, &mut rng);
        assert!(matches!(err, Err(Error::Precondition(_))));
    }
}
