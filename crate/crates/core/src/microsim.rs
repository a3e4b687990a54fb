//! Exact simulation of the individual-based metapopulation.
//!
//! `K` patches at positions `ℓ/K` hold `N` individuals each. Within a patch,
//! every ordered pair `(i, j)` fires at rate `c(r, xᵢ, xⱼ)` and `i` becomes a
//! copy of `j`. Every individual mutates at rate `γθ(r, x)`. Every ordered
//! pair of individuals in distinct patches fires at rate `γλ/K` and the
//! target becomes a copy of the migrant.
//!
//! Simulation is by uniformization with one majorant per event block. The
//! resampling block only proposes inside polymorphic patches, since
//! resampling is a no-op in a monomorphic one; migration proposes a source
//! patch uniformly among the `K - 1` others. Both choices change the number
//! of wasted proposals, not the law of the trajectory.

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};
use crate::exec::{run_replicates, Execution, SimRng, SnapshotClock};
use crate::kernels::{RateModel, Trait};
use crate::measure::{Atom, AtomicMeasure};

/// Traits of all `K × N` individuals, patch-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroState {
    k: usize,
    n: usize,
    traits: Vec<Trait>,
    time: f64,
}

/// Result of [`MicroState::dominant_trait`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Dominant {
    Monomorphic(Trait),
    Polymorphic,
}

impl MicroState {
    pub fn new(k: usize, n: usize, traits: Vec<Trait>) -> Result<MicroState> {
        if k == 0 || n == 0 {
            return Err(Error::InvalidParameter(format!(
                "need K >= 1 and N >= 1, got K = {k}, N = {n}"
            )));
        }
        if traits.len() != k * n {
            return Err(Error::InvalidParameter(format!(
                "expected K*N = {} traits, got {}",
                k * n,
                traits.len()
            )));
        }
        let d = traits[0].dim();
        if d == 0 || traits.iter().any(|t| t.dim() != d || !t.is_finite()) {
            return Err(Error::InvalidParameter(
                "traits must be finite and share one dimension >= 1".into(),
            ));
        }
        Ok(MicroState {
            k,
            n,
            traits,
            time: 0.0,
        })
    }

    /// Every patch monomorphic with the given dominant trait.
    pub fn monomorphic(dominant: &[Trait], n: usize) -> Result<MicroState> {
        let traits = dominant
            .iter()
            .flat_map(|x| std::iter::repeat_n(x.clone(), n))
            .collect();
        MicroState::new(dominant.len(), n, traits)
    }

    pub fn with_time(mut self, time: f64) -> MicroState {
        self.time = time;
        self
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn dim(&self) -> usize {
        self.traits[0].dim()
    }

    pub fn traits(&self) -> &[Trait] {
        &self.traits
    }

    pub fn patch(&self, l: usize) -> &[Trait] {
        &self.traits[l * self.n..(l + 1) * self.n]
    }

    /// Position `(l + 1) / K` of the zero-based patch `l`.
    pub fn position(&self, l: usize) -> f64 {
        (l + 1) as f64 / self.k as f64
    }

    pub fn is_monomorphic(&self, l: usize) -> bool {
        let p = self.patch(l);
        p.iter().all(|t| *t == p[0])
    }

    pub fn dominant_trait(&self, l: usize) -> Dominant {
        if self.is_monomorphic(l) {
            Dominant::Monomorphic(self.patch(l)[0].clone())
        } else {
            Dominant::Polymorphic
        }
    }

    /// The dominant trait of every patch, or `None` if any is polymorphic.
    pub fn dominant_vector(&self) -> Option<Vec<Trait>> {
        (0..self.k)
            .map(|l| match self.dominant_trait(l) {
                Dominant::Monomorphic(x) => Some(x),
                Dominant::Polymorphic => None,
            })
            .collect()
    }

    /// `Σ_{ℓ,i} δ_(ℓ/K, x) / (NK)`, with coinciding atoms merged.
    pub fn empirical_measure(&self) -> AtomicMeasure {
        let w = 1.0 / (self.n * self.k) as f64;
        AtomicMeasure::new((0..self.k).flat_map(|l| {
            let r = self.position(l);
            self.patch(l).iter().map(move |x| Atom { r, x: x.clone(), w })
        }))
        .expect("empirical measure of a valid state")
    }

    /// Number of individuals carrying exactly `x`.
    pub fn count(&self, x: &Trait) -> usize {
        self.traits.iter().filter(|t| *t == x).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MicroEventKind {
    Resample,
    Mutate,
    Migrate,
}

/// One accepted event. `source` is the copied individual, absent for
/// mutations.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroEvent {
    pub time: f64,
    pub kind: MicroEventKind,
    pub patch: usize,
    pub index: usize,
    pub source: Option<(usize, usize)>,
    pub old: Trait,
    pub new: Trait,
}

pub type MicroEventLog = Vec<MicroEvent>;

/// Proposal and acceptance counts per block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EventCounts {
    pub proposed: [u64; 3],
    pub accepted: [u64; 3],
}

impl EventCounts {
    pub fn accepted(&self, kind: MicroEventKind) -> u64 {
        self.accepted[kind as usize]
    }

    pub fn proposed(&self, kind: MicroEventKind) -> u64 {
        self.proposed[kind as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroConfig {
    /// Mutation and migration scale `γ`.
    pub gamma: f64,
    pub horizon: f64,
    /// Stop as soon as every patch is monomorphic.
    pub stop_when_monomorphic: bool,
    pub record_events: bool,
    /// Record the state at `t₀, t₀ + Δ, …` up to the horizon.
    pub snapshot_interval: Option<f64>,
}

impl MicroConfig {
    pub fn new(gamma: f64, horizon: f64) -> MicroConfig {
        MicroConfig {
            gamma,
            horizon,
            stop_when_monomorphic: false,
            record_events: false,
            snapshot_interval: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MicroRun {
    pub state: MicroState,
    pub events: MicroEventLog,
    pub snapshots: Vec<MicroState>,
    pub counts: EventCounts,
}

struct PolySet {
    members: Vec<usize>,
    slot: Vec<usize>,
}

impl PolySet {
    fn new(state: &MicroState) -> PolySet {
        let mut set = PolySet {
            members: Vec::new(),
            slot: vec![usize::MAX; state.k],
        };
        for l in 0..state.k {
            set.update(l, !state.is_monomorphic(l));
        }
        set
    }

    fn update(&mut self, l: usize, poly: bool) {
        let present = self.slot[l] != usize::MAX;
        if poly && !present {
            self.slot[l] = self.members.len();
            self.members.push(l);
        } else if !poly && present {
            let s = self.slot[l];
            let last = *self.members.last().unwrap();
            self.members.swap_remove(s);
            if last != l {
                self.slot[last] = s;
            }
            self.slot[l] = usize::MAX;
        }
    }
}

fn check_run_params(gamma: f64, horizon: f64) -> Result<()> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!("gamma must be finite and >= 0, got {gamma}")));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "horizon must be finite and >= 0, got {horizon}"
        )));
    }
    Ok(())
}

/// Simulates the individual-based process from `init` for `cfg.horizon`
/// units of unrescaled time.
pub fn micro_run(
    model: &RateModel,
    init: MicroState,
    cfg: &MicroConfig,
    rng: &mut SimRng,
) -> Result<MicroRun> {
    check_run_params(cfg.gamma, cfg.horizon)?;
    if init.dim() != model.dim() {
        return Err(Error::InvalidParameter(format!(
            "state has trait dimension {}, model expects {}",
            init.dim(),
            model.dim()
        )));
    }
    if let Some(dt) = cfg.snapshot_interval {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("snapshot interval must be > 0, got {dt}")));
        }
    }

    let mut state = init;
    let (k, n) = (state.k, state.n);
    let c_max = model.bound();
    let gamma = cfg.gamma;
    let t_end = state.time + cfg.horizon;
    let t0 = state.time;

    let pair_rate = (n * (n - 1)) as f64 * c_max;
    let mut_rate = if model.theta_kernel().is_zero() {
        0.0
    } else {
        gamma * c_max * (n * k) as f64
    };
    let mig_rate = if k < 2 || model.lambda_kernel().is_zero() {
        0.0
    } else {
        gamma * c_max * (n * n * (k - 1)) as f64
    };

    let mut poly = PolySet::new(&state);
    let mut events = Vec::new();
    let mut snapshots = Vec::new();
    let mut counts = EventCounts::default();
    let mut clock = SnapshotClock::new(t0, cfg.snapshot_interval, t_end);

    loop {
        if cfg.stop_when_monomorphic && poly.members.is_empty() {
            break;
        }
        let res_rate = poly.members.len() as f64 * pair_rate;
        let total = res_rate + mut_rate + mig_rate;
        let t_next = if total > 0.0 {
            state.time + Exp::new(total).expect("positive rate").sample(rng)
        } else {
            f64::INFINITY
        };
        if t_next > t_end {
            clock.drain(t_end, true, |s| snapshots.push(state.clone().with_time(s)));
            state.time = t_end;
            break;
        }
        clock.drain(t_next, false, |s| snapshots.push(state.clone().with_time(s)));
        state.time = t_next;

        let u = rng.random::<f64>() * total;
        if u < res_rate {
            counts.proposed[0] += 1;
            let l = poly.members[rng.random_range(0..poly.members.len())];
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let base = l * n;
            if state.traits[base + i] == state.traits[base + j] {
                continue;
            }
            let r = state.position(l);
            let rate = model.c(r, &state.traits[base + i], &state.traits[base + j])?;
            if rng.random::<f64>() * c_max < rate {
                counts.accepted[0] += 1;
                let new = state.traits[base + j].clone();
                let old = std::mem::replace(&mut state.traits[base + i], new);
                if cfg.record_events {
                    events.push(MicroEvent {
                        time: state.time,
                        kind: MicroEventKind::Resample,
                        patch: l,
                        index: i,
                        source: Some((l, j)),
                        old,
                        new: state.traits[base + i].clone(),
                    });
                }
                let mono = state.is_monomorphic(l);
                poly.update(l, !mono);
            }
        } else if u < res_rate + mut_rate {
            counts.proposed[1] += 1;
            let idx = rng.random_range(0..n * k);
            let (l, i) = (idx / n, idx % n);
            let r = state.position(l);
            let rate = model.theta(r, &state.traits[idx])?;
            if rng.random::<f64>() * c_max < rate {
                counts.accepted[1] += 1;
                let new = model.mutation().sample(r, &state.traits[idx], rng);
                if !new.is_finite() {
                    return Err(Error::Numerical(format!("mutation produced {new:?}")));
                }
                let old = std::mem::replace(&mut state.traits[idx], new);
                if cfg.record_events {
                    events.push(MicroEvent {
                        time: state.time,
                        kind: MicroEventKind::Mutate,
                        patch: l,
                        index: i,
                        source: None,
                        old,
                        new: state.traits[idx].clone(),
                    });
                }
                let mono = state.is_monomorphic(l);
                poly.update(l, !mono);
            }
        } else {
            counts.proposed[2] += 1;
            let l = rng.random_range(0..k);
            let i = rng.random_range(0..n);
            let mut lp = rng.random_range(0..k - 1);
            if lp >= l {
                lp += 1;
            }
            let j = rng.random_range(0..n);
            let (tgt, src) = (l * n + i, lp * n + j);
            let rate = model.lambda(
                state.position(l),
                &state.traits[tgt],
                state.position(lp),
                &state.traits[src],
            )?;
            if rng.random::<f64>() * c_max < rate {
                counts.accepted[2] += 1;
                let new = state.traits[src].clone();
                let old = std::mem::replace(&mut state.traits[tgt], new);
                if cfg.record_events {
                    events.push(MicroEvent {
                        time: state.time,
                        kind: MicroEventKind::Migrate,
                        patch: l,
                        index: i,
                        source: Some((lp, j)),
                        old,
                        new: state.traits[tgt].clone(),
                    });
                }
                let mono = state.is_monomorphic(l);
                poly.update(l, !mono);
            }
        }
    }

    Ok(MicroRun {
        state,
        events,
        snapshots,
        counts,
    })
}

/// Independent replicates from a common initial state; replicate `i` uses
/// stream `(seed, i)`.
pub fn micro_replicates(
    model: &RateModel,
    init: &MicroState,
    cfg: &MicroConfig,
    seed: u64,
    replicates: usize,
    exec: Execution,
) -> Result<Vec<MicroRun>> {
    run_replicates(exec, replicates, seed, |_, rng| {
        micro_run(model, init.clone(), cfg, rng)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::stream;
    use crate::kernels::{fixation_probability_from_rates, MutationFamily, MutationKind, RateFn};
    use crate::stats::{mean_estimate, proportion};

    fn model(c: RateFn, theta: f64, lambda: f64, bound: f64) -> RateModel {
        RateModel::new(
            c,
            RateFn::Constant(theta),
            RateFn::Constant(lambda),
            MutationFamily::new(MutationKind::IsotropicGaussian { std: 1.0 }, 0.1).unwrap(),
            bound,
            1,
        )
        .unwrap()
    }

    fn two_valued_c(c_xy: f64, c_yx: f64) -> RateFn {
        // trait 0 is the resident x, trait 1 the invader y
        RateFn::custom(move |b| if b.x[0] == 0.0 && b.y[0] == 1.0 { c_xy } else { c_yx })
    }

    #[test]
    fn frozen_without_variation() {
        let m = model(RateFn::Constant(1.0), 0.0, 1.0, 1.0);
        let init = MicroState::monomorphic(&vec![Trait::scalar(0.3); 3], 4).unwrap();
        let mut rng = stream(1, 0);
        let run = micro_run(&m, init.clone(), &MicroConfig::new(0.0, 100.0), &mut rng).unwrap();
        assert_eq!(run.state.traits(), init.traits());
        assert_eq!(run.counts.proposed, [0, 0, 0]);
        let run = micro_run(&m, init.clone(), &MicroConfig::new(1.0, 20.0), &mut rng).unwrap();
        assert_eq!(run.state.traits(), init.traits());
        assert!(run.counts.accepted(MicroEventKind::Migrate) > 0);
    }

    #[test]
    fn two_individual_fixation_matches_alpha() {
        let (c_xy, c_yx) = (0.8, 0.3);
        let m = model(two_valued_c(c_xy, c_yx), 0.0, 0.0, 1.0);
        let init = MicroState::new(1, 2, vec![Trait::scalar(1.0), Trait::scalar(0.0)]).unwrap();
        let mut cfg = MicroConfig::new(0.0, f64::MAX / 4.0);
        cfg.stop_when_monomorphic = true;
        let runs = micro_replicates(&m, &init, &cfg, 2, 100_000, Execution::Parallel).unwrap();
        let wins = runs.iter().filter(|r| r.state.traits()[0][0] == 1.0).count();
        let alpha = fixation_probability_from_rates(c_xy, c_yx, 2).unwrap();
        assert!((alpha - 1.0 / (1.0 + c_yx / c_xy)).abs() < 1e-15);
        let est = proportion(wins, runs.len());
        let se = (alpha * (1.0 - alpha) / runs.len() as f64).sqrt();
        assert!((est.value - alpha).abs() <= 4.0 * se, "{} vs {alpha}", est.value);
    }

    #[test]
    fn migration_count_is_poisson() {
        let (gamma, lambda, t) = (2.0, 0.5, 10.0);
        let m = model(RateFn::Constant(1.0), 0.0, lambda, 1.0);
        let init = MicroState::new(2, 1, vec![Trait::scalar(0.0), Trait::scalar(1.0)]).unwrap();
        let cfg = MicroConfig::new(gamma, t);
        let runs = micro_replicates(&m, &init, &cfg, 3, 10_000, Execution::Parallel).unwrap();
        let counts: Vec<f64> = runs
            .iter()
            .map(|r| r.counts.accepted(MicroEventKind::Migrate) as f64)
            .collect();
        // ordered patch pairs K(K-1) = 2, N = 1
        let expected = gamma * lambda * 1.0 * 2.0 / 2.0 * t;
        let se = (expected / counts.len() as f64).sqrt();
        let est = mean_estimate(&counts);
        assert!((est.value - expected).abs() <= 4.0 * se, "{} vs {expected}", est.value);
    }

    #[test]
    fn thinning_rate_of_a_single_block() {
        let theta = 0.3;
        let m = model(RateFn::Constant(1.0), theta, 0.0, 1.0);
        let init = MicroState::new(1, 1, vec![Trait::scalar(0.0)]).unwrap();
        let t = 1e5 / theta;
        let run = micro_run(&m, init, &MicroConfig::new(1.0, t), &mut stream(4, 0)).unwrap();
        let accepted = run.counts.accepted(MicroEventKind::Mutate) as f64;
        let mean = theta * t;
        assert!((accepted - mean).abs() <= 3.0 * mean.sqrt(), "{accepted} vs {mean}");
    }

    #[test]
    fn patch_sizes_and_event_times() {
        let m = model(RateFn::parse("1 / (1 + abs(x - y))").unwrap(), 0.5, 0.7, 1.0);
        let init = MicroState::monomorphic(&[Trait::scalar(0.0), Trait::scalar(1.0), Trait::scalar(2.0)], 4)
            .unwrap();
        let mut cfg = MicroConfig::new(0.5, 30.0);
        cfg.record_events = true;
        cfg.snapshot_interval = Some(1.0);
        let run = micro_run(&m, init, &cfg, &mut stream(5, 0)).unwrap();
        assert_eq!(run.state.traits().len(), 12);
        assert_eq!(run.snapshots.len(), 31);
        assert!(run.events.windows(2).all(|w| w[0].time < w[1].time));
        assert!(run.snapshots.iter().all(|s| s.traits().len() == 12));
        assert!(!run.events.is_empty());
    }

    #[test]
    fn neutral_counts_are_martingales() {
        let m = model(RateFn::Constant(1.0), 0.0, 0.0, 1.0);
        let a = Trait::scalar(0.0);
        let b = Trait::scalar(1.0);
        let traits = vec![a.clone(), b.clone(), b.clone(), a.clone(), a.clone(), b.clone()];
        let init = MicroState::new(2, 3, traits).unwrap();
        let runs = micro_replicates(&m, &init, &MicroConfig::new(0.0, 2.0), 6, 10_000, Execution::Parallel)
            .unwrap();
        let counts: Vec<f64> = runs.iter().map(|r| r.state.count(&a) as f64).collect();
        let est = mean_estimate(&counts);
        assert!(est.within(3.0, 4.0), "{est:?}");
    }

    #[test]
    fn dominance_queries() {
        let s = MicroState::new(2, 2, vec![Trait::scalar(1.0), Trait::scalar(1.0), Trait::scalar(1.0), Trait::scalar(2.0)])
            .unwrap();
        assert_eq!(s.dominant_trait(0), Dominant::Monomorphic(Trait::scalar(1.0)));
        assert_eq!(s.dominant_trait(1), Dominant::Polymorphic);
        assert_eq!(s.dominant_vector(), None);
    }

    #[test]
    fn long_runs_absorb() {
        let n = 5;
        let m = model(RateFn::Constant(1.0), 0.0, 0.0, 1.0);
        let mut traits = vec![Trait::scalar(0.0); n].to_vec();
        traits[0] = Trait::scalar(1.0);
        traits[1] = Trait::scalar(1.0);
        let init = MicroState::new(1, n, traits).unwrap();
        let horizon = 50.0 * (n * n) as f64;
        let runs = micro_replicates(&m, &init, &MicroConfig::new(0.0, horizon), 7, 10_000, Execution::Parallel)
            .unwrap();
        let absorbed = runs.iter().filter(|r| r.state.is_monomorphic(0)).count();
        assert!(absorbed as f64 / runs.len() as f64 > 0.999);
    }

    #[test]
    fn empirical_measure_atoms() {
        let s = MicroState::new(1, 2, vec![Trait::scalar(0.5), Trait::scalar(0.7)]).unwrap();
        let mu = s.empirical_measure();
        assert_eq!(mu.atoms().len(), 2);
        assert!(mu.atoms().iter().all(|a| a.r == 1.0 && a.w == 0.5));
        let mono = MicroState::monomorphic(&vec![Trait::scalar(0.1); 4], 3).unwrap();
        let mu = mono.empirical_measure();
        assert_eq!(mu.atoms().len(), 4);
        assert!(mu.atoms().iter().all(|a| (a.w - 0.25).abs() < 1e-15));
    }

    #[test]
    fn bound_violation_aborts() {
        let m = model(RateFn::parse("2 + x").unwrap(), 0.0, 0.0, 1.0);
        let init = MicroState::new(1, 2, vec![Trait::scalar(0.0), Trait::scalar(1.0)]).unwrap();
        let err = micro_run(&m, init, &MicroConfig::new(0.0, 10.0), &mut stream(8, 0)).unwrap_err();
        assert!(matches!(err, Error::BoundViolation { kernel: "c", .. }));
    }
}
