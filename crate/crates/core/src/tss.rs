//! Coupled trait substitution sequence: one dominant trait per site, jumping
//! by mutation-fixation and migration-fixation.
//!
//! Site `ℓ` at position `ℓ/K` with trait `xℓ` jumps to `y ~ Q(ℓ/K, xℓ, ·)` at
//! rate `N θ α(ℓ/K, y, xℓ)`, and to `x^ℓ'` at rate
//! `(N²/K) λ((ℓ/K, xℓ), (ℓ'/K, x^ℓ')) α(ℓ/K, x^ℓ', xℓ)` for every `ℓ'`
//! (self-pairs included; they are no-ops).

use std::collections::BTreeMap;

use log::debug;
use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};
use crate::exec::{run_replicates, stream_seed, Execution, SimRng, SnapshotClock};
use crate::kernels::{RateModel, Trait};
use crate::microsim::{micro_run, MicroConfig, MicroState};
use crate::stats::total_variation;

/// Largest `K` simulated with the exact next-jump chain.
pub const EXACT_MAX_SITES: usize = 64;

/// Dominant trait of every site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteConfiguration {
    pub x: Vec<Trait>,
    pub time: f64,
}

impl SiteConfiguration {
    pub fn new(x: Vec<Trait>) -> Result<SiteConfiguration> {
        if x.is_empty() {
            return Err(Error::InvalidParameter("need at least one site".into()));
        }
        let d = x[0].dim();
        if d == 0 || x.iter().any(|t| t.dim() != d || !t.is_finite()) {
            return Err(Error::InvalidParameter(
                "site traits must be finite and share one dimension >= 1".into(),
            ));
        }
        Ok(SiteConfiguration { x, time: 0.0 })
    }

    pub fn k(&self) -> usize {
        self.x.len()
    }

    pub fn position(&self, l: usize) -> f64 {
        (l + 1) as f64 / self.x.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TssMethod {
    /// Exact chain for `K <= 64`, uniformization above.
    #[default]
    Auto,
    Exact,
    Uniformized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TssConfig {
    /// Patch size `N`.
    pub n: usize,
    pub horizon: f64,
    pub snapshot_interval: Option<f64>,
    pub method: TssMethod,
}

impl TssConfig {
    pub fn new(n: usize, horizon: f64) -> TssConfig {
        TssConfig {
            n,
            horizon,
            snapshot_interval: None,
            method: TssMethod::Auto,
        }
    }
}

/// Jump counts. Mutation counts refer to fixations; migration counts
/// include every accepted migration-fixation, also between equal traits
/// under uniformization.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TssCounts {
    pub mutation_proposed: u64,
    pub mutation_fixed: u64,
    pub migration_fixed: u64,
}

#[derive(Debug, Clone)]
pub struct TssRun {
    pub state: SiteConfiguration,
    pub snapshots: Vec<SiteConfiguration>,
    pub counts: TssCounts,
}

fn validate(model: &RateModel, init: &SiteConfiguration, cfg: &TssConfig) -> Result<()> {
    if cfg.n == 0 {
        return Err(Error::InvalidParameter("patch size N must be >= 1".into()));
    }
    if !(cfg.horizon >= 0.0) || cfg.horizon.is_nan() {
        return Err(Error::InvalidParameter(format!("horizon must be >= 0, got {}", cfg.horizon)));
    }
    if let Some(dt) = cfg.snapshot_interval {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("snapshot interval must be > 0, got {dt}")));
        }
    }
    if init.x[0].dim() != model.dim() {
        return Err(Error::InvalidParameter(format!(
            "sites have trait dimension {}, model expects {}",
            init.x[0].dim(),
            model.dim()
        )));
    }
    Ok(())
}

/// Simulates the substitution sequence, calling `observe(t, sites)` at each
/// snapshot time.
pub fn tss_run_observed(
    model: &RateModel,
    init: SiteConfiguration,
    cfg: &TssConfig,
    rng: &mut SimRng,
    mut observe: impl FnMut(f64, &[Trait]),
) -> Result<(SiteConfiguration, TssCounts)> {
    validate(model, &init, cfg)?;
    let exact = match cfg.method {
        TssMethod::Auto => init.k() <= EXACT_MAX_SITES,
        TssMethod::Exact => true,
        TssMethod::Uniformized => false,
    };
    if exact {
        ExactChain::new(model, init, cfg.n)?.run(cfg, rng, &mut observe)
    } else {
        run_uniformized(model, init, cfg, rng, &mut observe)
    }
}

pub fn tss_run(
    model: &RateModel,
    init: SiteConfiguration,
    cfg: &TssConfig,
    rng: &mut SimRng,
) -> Result<TssRun> {
    let mut snapshots = Vec::new();
    let (state, counts) = tss_run_observed(model, init, cfg, rng, |t, x| {
        snapshots.push(SiteConfiguration {
            x: x.to_vec(),
            time: t,
        })
    })?;
    Ok(TssRun {
        state,
        snapshots,
        counts,
    })
}

pub fn tss_replicates(
    model: &RateModel,
    init: &SiteConfiguration,
    cfg: &TssConfig,
    seed: u64,
    replicates: usize,
    exec: Execution,
) -> Result<Vec<TssRun>> {
    run_replicates(exec, replicates, seed, |_, rng| {
        tss_run(model, init.clone(), cfg, rng)
    })
}

/// Mutation proposal at site `l`: draws `y` and fixes it with probability
/// `α(r, y, xℓ)`. Returns the new trait when it fixes.
fn try_mutation(
    model: &RateModel,
    r: f64,
    x: &Trait,
    n: usize,
    rng: &mut SimRng,
) -> Result<Option<Trait>> {
    let y = model.mutation().sample(r, x, rng);
    if !y.is_finite() {
        return Err(Error::Numerical(format!("mutation produced {y:?}")));
    }
    let alpha = model.fixation_probability(r, &y, x, n)?;
    Ok((rng.random::<f64>() < alpha).then_some(y))
}

/// Next-jump simulation with the full `K × K` table of migration-fixation
/// rates, updated along the row and column of the site that changed.
struct ExactChain<'m> {
    model: &'m RateModel,
    n: usize,
    sites: SiteConfiguration,
    mutation: Vec<f64>,
    migration: Vec<f64>,
    row_sum: Vec<f64>,
}

impl<'m> ExactChain<'m> {
    fn new(model: &'m RateModel, sites: SiteConfiguration, n: usize) -> Result<ExactChain<'m>> {
        let k = sites.k();
        let mut chain = ExactChain {
            model,
            n,
            sites,
            mutation: vec![0.0; k],
            migration: vec![0.0; k * k],
            row_sum: vec![0.0; k],
        };
        for l in 0..k {
            chain.mutation[l] = chain.mutation_rate(l)?;
            for lp in 0..k {
                chain.migration[l * k + lp] = chain.migration_rate(l, lp)?;
            }
        }
        chain.refresh_sums();
        Ok(chain)
    }

    fn mutation_rate(&self, l: usize) -> Result<f64> {
        if self.model.theta_kernel().is_zero() {
            return Ok(0.0);
        }
        Ok(self.n as f64 * self.model.theta(self.sites.position(l), &self.sites.x[l])?)
    }

    fn migration_rate(&self, l: usize, lp: usize) -> Result<f64> {
        let (x, y) = (&self.sites.x[l], &self.sites.x[lp]);
        if x == y || self.model.lambda_kernel().is_zero() {
            return Ok(0.0);
        }
        let k = self.sites.k() as f64;
        let (r, rp) = (self.sites.position(l), self.sites.position(lp));
        let lambda = self.model.lambda(r, x, rp, y)?;
        let alpha = self.model.fixation_probability(r, y, x, self.n)?;
        Ok((self.n * self.n) as f64 / k * lambda * alpha)
    }

    fn refresh_sums(&mut self) {
        let k = self.sites.k();
        for l in 0..k {
            self.row_sum[l] = self.migration[l * k..(l + 1) * k].iter().sum();
        }
    }

    fn set_site(&mut self, l: usize, y: Trait) -> Result<()> {
        let k = self.sites.k();
        self.sites.x[l] = y;
        self.mutation[l] = self.mutation_rate(l)?;
        for other in 0..k {
            self.migration[l * k + other] = self.migration_rate(l, other)?;
            self.migration[other * k + l] = self.migration_rate(other, l)?;
        }
        self.refresh_sums();
        Ok(())
    }

    fn run(
        mut self,
        cfg: &TssConfig,
        rng: &mut SimRng,
        observe: &mut impl FnMut(f64, &[Trait]),
    ) -> Result<(SiteConfiguration, TssCounts)> {
        let k = self.sites.k();
        let t_end = self.sites.time + cfg.horizon;
        let mut clock = SnapshotClock::new(self.sites.time, cfg.snapshot_interval, t_end);
        let mut counts = TssCounts::default();
        loop {
            let mut_total: f64 = self.mutation.iter().sum();
            let mig_total: f64 = self.row_sum.iter().sum();
            let total = mut_total + mig_total;
            let t_next = if total > 0.0 {
                self.sites.time + Exp::new(total).expect("positive rate").sample(rng)
            } else {
                f64::INFINITY
            };
            if t_next > t_end {
                clock.drain(t_end, true, |s| observe(s, &self.sites.x));
                self.sites.time = t_end;
                break;
            }
            clock.drain(t_next, false, |s| observe(s, &self.sites.x));
            self.sites.time = t_next;

            let mut u = rng.random::<f64>() * total;
            if u < mut_total {
                let l = pick(&self.mutation, &mut u);
                counts.mutation_proposed += 1;
                let r = self.sites.position(l);
                if let Some(y) = try_mutation(self.model, r, &self.sites.x[l], self.n, rng)? {
                    counts.mutation_fixed += 1;
                    self.set_site(l, y)?;
                }
            } else {
                u -= mut_total;
                let l = pick(&self.row_sum, &mut u);
                let lp = pick(&self.migration[l * k..(l + 1) * k], &mut u);
                counts.migration_fixed += 1;
                let y = self.sites.x[lp].clone();
                self.set_site(l, y)?;
            }
        }
        Ok((self.sites, counts))
    }
}

/// Index `i` with `Σ_{j<i} w_j <= u < Σ_{j<=i} w_j`; leaves the residual in
/// `u`. Falls back to the last positive weight under rounding.
fn pick(weights: &[f64], u: &mut f64) -> usize {
    for (i, &w) in weights.iter().enumerate() {
        if *u < w {
            return i;
        }
        *u -= w;
    }
    let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1);
    *u = 0.0;
    last
}

/// Uniformization with per-site majorant `N C + N² C`.
fn run_uniformized(
    model: &RateModel,
    mut sites: SiteConfiguration,
    cfg: &TssConfig,
    rng: &mut SimRng,
    observe: &mut impl FnMut(f64, &[Trait]),
) -> Result<(SiteConfiguration, TssCounts)> {
    let k = sites.k();
    let n = cfg.n;
    let c_max = model.bound();
    let mut_major = if model.theta_kernel().is_zero() {
        0.0
    } else {
        n as f64 * c_max
    };
    let mig_major = if model.lambda_kernel().is_zero() {
        0.0
    } else {
        (n * n) as f64 * c_max
    };
    let per_site = mut_major + mig_major;
    let t_end = sites.time + cfg.horizon;
    let mut clock = SnapshotClock::new(sites.time, cfg.snapshot_interval, t_end);
    let mut counts = TssCounts::default();
    let clock_rate = per_site * k as f64;
    let waiting = (clock_rate > 0.0).then(|| Exp::new(clock_rate).expect("positive rate"));

    loop {
        let t_next = match &waiting {
            Some(e) => sites.time + e.sample(rng),
            None => f64::INFINITY,
        };
        if t_next > t_end {
            clock.drain(t_end, true, |s| observe(s, &sites.x));
            sites.time = t_end;
            break;
        }
        clock.drain(t_next, false, |s| observe(s, &sites.x));
        sites.time = t_next;

        let l = rng.random_range(0..k);
        let r = sites.position(l);
        if rng.random::<f64>() * per_site < mut_major {
            let theta = model.theta(r, &sites.x[l])?;
            if rng.random::<f64>() * c_max < theta {
                counts.mutation_proposed += 1;
                if let Some(y) = try_mutation(model, r, &sites.x[l], n, rng)? {
                    counts.mutation_fixed += 1;
                    sites.x[l] = y;
                }
            }
        } else {
            let lp = rng.random_range(0..k);
            let rp = sites.position(lp);
            let lambda = model.lambda(r, &sites.x[l], rp, &sites.x[lp])?;
            let alpha = model.fixation_probability(r, &sites.x[lp], &sites.x[l], n)?;
            if rng.random::<f64>() * c_max < lambda * alpha {
                counts.migration_fixed += 1;
                if lp != l {
                    sites.x[l] = sites.x[lp].clone();
                }
            }
        }
    }
    Ok((sites, counts))
}

/// Outcome of one replicate at the comparison time.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Outcome {
    Sites(Vec<Trait>),
    /// At least one patch was polymorphic (individual-based runs only).
    Polymorphic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub n: usize,
    pub gammas: Vec<f64>,
    /// Comparison time on the substitution time scale.
    pub t_star: f64,
    pub replicates: usize,
    pub seed: u64,
    /// Largest tolerated fraction of polymorphic individual-based snapshots.
    pub max_polymorphic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceRow {
    pub gamma: f64,
    pub tv: f64,
    pub stderr: f64,
    pub polymorphic_fraction: f64,
}

/// Plug-in standard error of the total-variation distance between two
/// independent empirical laws with `n_p` and `n_q` samples.
fn tv_stderr(p: &BTreeMap<Outcome, f64>, q: &BTreeMap<Outcome, f64>, n_p: usize, n_q: usize) -> f64 {
    let mut var = 0.0;
    let keys: std::collections::BTreeSet<&Outcome> = p.keys().chain(q.keys()).collect();
    for key in keys {
        let a = p.get(key).copied().unwrap_or(0.0);
        let b = q.get(key).copied().unwrap_or(0.0);
        var += a * (1.0 - a) / n_p as f64 + b * (1.0 - b) / n_q as f64;
    }
    0.5 * var.sqrt()
}

/// Total-variation distance at substitution time `t*` between the law of the
/// dominant-trait vector of the individual-based model (run to `t*/γ`) and
/// that of the substitution sequence, for every `γ`.
///
/// Substitution runs use master seed `stream_seed(seed, 0)`; the runs at
/// `gammas[g]` use `stream_seed(seed, g + 1)`.
pub fn tss_vs_micro_compare(
    model: &RateModel,
    init: &SiteConfiguration,
    cfg: &CompareConfig,
    exec: Execution,
) -> Result<Vec<DivergenceRow>> {
    if cfg.replicates == 0 {
        return Err(Error::InvalidParameter("need at least one replicate".into()));
    }
    if !(cfg.t_star >= 0.0 && cfg.t_star.is_finite()) {
        return Err(Error::InvalidParameter(format!("t* must be finite and >= 0, got {}", cfg.t_star)));
    }
    let finite_mutation = model.theta_kernel().is_zero()
        || model.mutation().discrete_steps(model.dim()).is_some();
    if !finite_mutation {
        return Err(Error::Precondition(
            "comparison needs a finite trait set: use theta = 0 or a discrete mutation law".into(),
        ));
    }
    let tss_cfg = TssConfig::new(cfg.n, cfg.t_star);
    let tss_outcomes: Vec<Outcome> = run_replicates(exec, cfg.replicates, stream_seed(cfg.seed, 0), |_, rng| {
        Ok(Outcome::Sites(tss_run(model, init.clone(), &tss_cfg, rng)?.state.x))
    })?;
    let tss_law = crate::stats::empirical_law(&tss_outcomes);

    let micro_init = MicroState::monomorphic(&init.x, cfg.n)?;
    let mut rows = Vec::with_capacity(cfg.gammas.len());
    for (g, &gamma) in cfg.gammas.iter().enumerate() {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma must be > 0, got {gamma}")));
        }
        let micro_cfg = MicroConfig::new(gamma, cfg.t_star / gamma);
        let outcomes: Vec<Outcome> =
            run_replicates(exec, cfg.replicates, stream_seed(cfg.seed, g as u64 + 1), |_, rng| {
                let run = micro_run(model, micro_init.clone(), &micro_cfg, rng)?;
                Ok(match run.state.dominant_vector() {
                    Some(x) => Outcome::Sites(x),
                    None => Outcome::Polymorphic,
                })
            })?;
        let poly = outcomes.iter().filter(|o| **o == Outcome::Polymorphic).count() as f64
            / outcomes.len() as f64;
        if poly > cfg.max_polymorphic {
            return Err(Error::Precondition(format!(
                "gamma = {gamma}: {:.1}% of individual-based snapshots are polymorphic \
                 (limit {:.1}%); gamma is too large for the substitution regime",
                100.0 * poly,
                100.0 * cfg.max_polymorphic
            )));
        }
        let law = crate::stats::empirical_law(&outcomes);
        let tv = total_variation(&law, &tss_law);
        let stderr = tv_stderr(&law, &tss_law, outcomes.len(), tss_outcomes.len());
        debug!("gamma = {gamma}: tv = {tv}, polymorphic = {poly}");
        rows.push(DivergenceRow {
            gamma,
            tv,
            stderr,
            polymorphic_fraction: poly,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::stream;
    use crate::kernels::{MutationFamily, MutationKind, RateFn};
    use crate::stats::{mean_estimate, proportion};

    fn model(c: RateFn, theta: RateFn, lambda: RateFn, mutation: MutationFamily) -> RateModel {
        RateModel::new(c, theta, lambda, mutation, 1.0, 1).unwrap()
    }

    fn sites(v: &[f64]) -> SiteConfiguration {
        SiteConfiguration::new(v.iter().map(|&x| Trait::scalar(x)).collect()).unwrap()
    }

    #[test]
    fn single_site_only_mutates() {
        let m = model(
            RateFn::Constant(1.0),
            RateFn::Constant(0.5),
            RateFn::Constant(1.0),
            MutationFamily::new(MutationKind::IsotropicGaussian { std: 1.0 }, 0.1).unwrap(),
        );
        for method in [TssMethod::Exact, TssMethod::Uniformized] {
            let mut cfg = TssConfig::new(3, 50.0);
            cfg.method = method;
            let run = tss_run(&m, sites(&[0.0]), &cfg, &mut stream(1, 0)).unwrap();
            assert!(run.counts.mutation_fixed > 0);
            if method == TssMethod::Exact {
                assert_eq!(run.counts.migration_fixed, 0);
            }
        }
    }

    #[test]
    fn equal_sites_without_mutation_are_frozen() {
        let m = model(
            RateFn::Constant(1.0),
            RateFn::Constant(0.0),
            RateFn::Constant(1.0),
            MutationFamily::degenerate(),
        );
        let init = sites(&[0.4; 5]);
        let run = tss_run(&m, init.clone(), &TssConfig::new(4, 100.0), &mut stream(2, 0)).unwrap();
        assert_eq!(run.state.x, init.x);
    }

    fn absorption_frequency(method: TssMethod) -> (f64, f64) {
        // c(x, y) = 1 + y: higher traits replace lower ones faster
        let m = model(
            RateFn::parse("(1 + y) / 2").unwrap(),
            RateFn::Constant(0.0),
            RateFn::Constant(1.0),
            MutationFamily::degenerate(),
        );
        let n = 4;
        let (a, b) = (0.2, 0.7);
        let mut cfg = TssConfig::new(n, 40.0);
        cfg.method = method;
        let runs = tss_replicates(&m, &sites(&[a, b]), &cfg, 3, 100_000, Execution::Parallel).unwrap();
        let hits = runs.iter().filter(|r| r.state.x[0][0] == a && r.state.x[1][0] == a).count();
        let alpha_ab = m.fixation_probability(0.0, &[a], &[b], n).unwrap();
        let alpha_ba = m.fixation_probability(0.0, &[b], &[a], n).unwrap();
        let p = alpha_ab / (alpha_ab + alpha_ba);
        (proportion(hits, runs.len()).value, p)
    }

    #[test]
    fn two_site_absorption_exact() {
        let (freq, p) = absorption_frequency(TssMethod::Exact);
        let se = (p * (1.0 - p) / 100_000.0).sqrt();
        assert!((freq - p).abs() <= 4.0 * se, "{freq} vs {p}");
    }

    #[test]
    fn two_site_absorption_uniformized() {
        let (freq, p) = absorption_frequency(TssMethod::Uniformized);
        let se = (p * (1.0 - p) / 100_000.0).sqrt();
        assert!((freq - p).abs() <= 4.0 * se, "{freq} vs {p}");
    }

    #[test]
    fn mutation_fixation_rate_audit() {
        // θ = 0.6, c(x, y) = exp(y - x) / e, N = 3, unit Gaussian steps of
        // scale 0.5: E[α] by quadrature over the step law.
        let (theta, n, eps) = (0.6, 3usize, 0.5);
        let m = RateModel::new(
            RateFn::parse("exp(y - x - 1)").unwrap(),
            RateFn::Constant(theta),
            RateFn::Constant(0.0),
            MutationFamily::new(MutationKind::IsotropicGaussian { std: 1.0 }, eps).unwrap(),
            1e6,
            1,
        )
        .unwrap();
        let steps = 20_000;
        let (lo, hi) = (-9.0, 9.0);
        let dh = (hi - lo) / steps as f64;
        let mut e_alpha = 0.0;
        for i in 0..steps {
            let h = lo + (i as f64 + 0.5) * dh;
            let pdf = (-h * h / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let a = m.fixation_probability(0.0, &[eps * h], &[0.0], n).unwrap();
            e_alpha += pdf * a * dh;
        }
        let t = 5.0;
        let cfg = TssConfig::new(n, t);
        let runs = tss_replicates(&m, &sites(&[0.0]), &cfg, 4, 10_000, Execution::Parallel).unwrap();
        let counts: Vec<f64> = runs.iter().map(|r| r.counts.mutation_fixed as f64).collect();
        let est = mean_estimate(&counts);
        let expected = t * n as f64 * theta * e_alpha;
        assert!(est.within(expected, 4.0), "{est:?} vs {expected}");
    }

    #[test]
    fn homogeneous_sites_are_exchangeable() {
        let m = model(
            RateFn::parse("0.5 + 0.25 * sin(x * y)").unwrap(),
            RateFn::Constant(0.3),
            RateFn::parse("0.5 + 0.25 * cos(x - 2 * y)").unwrap(),
            MutationFamily::new(MutationKind::DiscretePm, 0.25).unwrap(),
        );
        let cfg = TssConfig::new(3, 2.0);
        let init_rng_seed = 9;
        let runs = run_replicates(Execution::Parallel, 10_000, 5, |i, rng| {
            let mut init_rng = stream(init_rng_seed, i as u64);
            let x: Vec<Trait> = (0..3)
                .map(|_| Trait::scalar(if init_rng.random::<bool>() { 0.0 } else { 1.0 }))
                .collect();
            tss_run(&m, SiteConfiguration::new(x).unwrap(), &cfg, rng)
        })
        .unwrap();
        let diff: Vec<f64> = runs.iter().map(|r| r.state.x[0][0] - r.state.x[1][0]).collect();
        let est = mean_estimate(&diff);
        assert!(est.within(0.0, 4.0), "{est:?}");
    }

    #[test]
    fn snapshots_cover_the_horizon() {
        let m = model(
            RateFn::Constant(1.0),
            RateFn::Constant(0.2),
            RateFn::Constant(0.8),
            MutationFamily::new(MutationKind::DiscretePm, 1.0).unwrap(),
        );
        let mut cfg = TssConfig::new(2, 3.0);
        cfg.snapshot_interval = Some(0.5);
        let run = tss_run(&m, sites(&[0.0, 1.0, 2.0]), &cfg, &mut stream(6, 0)).unwrap();
        let times: Vec<f64> = run.snapshots.iter().map(|s| s.time).collect();
        assert_eq!(times, vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn comparison_edge_cases() {
        let m = model(
            RateFn::Constant(1.0),
            RateFn::Constant(0.0),
            RateFn::Constant(0.5),
            MutationFamily::degenerate(),
        );
        let cfg = CompareConfig {
            n: 3,
            gammas: vec![1e-2],
            t_star: 0.0,
            replicates: 200,
            seed: 1,
            max_polymorphic: 0.05,
        };
        let rows = tss_vs_micro_compare(&m, &sites(&[0.0, 1.0]), &cfg, Execution::Sequential).unwrap();
        assert_eq!(rows[0].tv, 0.0);

        let frozen = model(
            RateFn::Constant(1.0),
            RateFn::Constant(0.0),
            RateFn::Constant(0.0),
            MutationFamily::degenerate(),
        );
        let cfg = CompareConfig { t_star: 3.0, ..cfg };
        let rows = tss_vs_micro_compare(&frozen, &sites(&[0.0, 1.0]), &cfg, Execution::Sequential).unwrap();
        assert_eq!(rows[0].tv, 0.0);

        let continuous = model(
            RateFn::Constant(1.0),
            RateFn::Constant(0.5),
            RateFn::Constant(0.0),
            MutationFamily::new(MutationKind::IsotropicGaussian { std: 1.0 }, 0.1).unwrap(),
        );
        assert!(tss_vs_micro_compare(&continuous, &sites(&[0.0, 1.0]), &cfg, Execution::Sequential).is_err());
    }

    #[test]
    fn large_gamma_is_rejected() {
        let m = model(
            RateFn::Constant(0.05),
            RateFn::Constant(0.0),
            RateFn::Constant(1.0),
            MutationFamily::degenerate(),
        );
        let cfg = CompareConfig {
            n: 5,
            gammas: vec![1.0],
            t_star: 1.0,
            replicates: 500,
            seed: 2,
            max_polymorphic: 0.05,
        };
        let err = tss_vs_micro_compare(&m, &sites(&[0.0, 1.0]), &cfg, Execution::Sequential).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }
}
