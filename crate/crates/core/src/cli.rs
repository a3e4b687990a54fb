//! Configuration, orchestration and output files for the `metapop` binary.
//!
//! A run reads one JSON config, dispatches to a regime, and writes into the
//! output directory:
//!
//! | regime | data files | columns |
//! |---|---|---|
//! | micro | `micro_rep{i}.csv` | `t,patch,x0..` (one row per individual) |
//! | tss | `tss_rep{i}.csv` | `t,patch,x0..` |
//! | meanfield | `meanfield.csv` | `t,r,x0..,weight` |
//! | replicator | `replicator_meanweights.csv`, `replicator_spatial.csv` | `t,w1..wn`; `t,trait_index,grid_index,w` |
//! | canonical | `canonical.csv` | `t,particle,x0..` |
//! | compare | `divergence.csv` or `chaos.csv` | `gamma,tv,stderr,polymorphic_fraction`; `K,estimate,stderr` |
//!
//! plus `summary.json` and `manifest.json`, or `failure.json` when the run
//! errors. Numbers are written in shortest round-trip form.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::canonical::{canonical_ensemble_run, CanonicalConfig, CanonicalParticle, XiEnsemble};
use crate::error::Error;
use crate::exec::{with_threads, Execution};
use crate::kernels::{MutationFamily, MutationKind, RateFn, RateModel, Trait};
use crate::measure::{Atom, AtomicMeasure};
use crate::meanfield::{chaos_decay_scan, meanfield_finite_solve, FlowConfig};
use crate::microsim::{micro_replicates, MicroConfig, MicroState};
use crate::replicator::{
    build_interaction_matrix, invasion_check, replicator_integrate, spatial_weights_integrate,
};
use crate::tss::{tss_replicates, tss_vs_micro_compare, CompareConfig, SiteConfiguration, TssConfig};

const DEFAULT_DT: f64 = 1e-3;
const SNAPSHOTS_PER_HORIZON: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Micro,
    Tss,
    Meanfield,
    Replicator,
    Canonical,
    Compare,
}

impl Regime {
    fn name(self) -> &'static str {
        match self {
            Regime::Micro => "micro",
            Regime::Tss => "tss",
            Regime::Meanfield => "meanfield",
            Regime::Replicator => "replicator",
            Regime::Canonical => "canonical",
            Regime::Compare => "compare",
        }
    }
}

/// A rate kernel given as a number or an expression string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelSpec {
    Number(f64),
    Expr(String),
}

/// A trait given as a scalar or a coordinate list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TraitSpec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl TraitSpec {
    fn to_trait(&self) -> Trait {
        match self {
            TraitSpec::Scalar(v) => Trait::scalar(*v),
            TraitSpec::Vector(v) => Trait::new(v.iter().copied()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationKindSpec {
    IsotropicGaussian,
    UniformBall,
    DiscretePm,
    #[default]
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MutationSpec {
    #[serde(default)]
    pub kind: MutationKindSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec {
            lo: -1.0,
            hi: 1.0,
            count: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub c: KernelSpec,
    pub theta: KernelSpec,
    pub lambda: KernelSpec,
    #[serde(default)]
    pub mutation: MutationSpec,
    pub bound_c: f64,
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default)]
    pub probe: ProbeSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sizes {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scales {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numerics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_interval: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    pub r: f64,
    pub x: TraitSpec,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Initial {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub traits: Vec<TraitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub atoms: Vec<AtomSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trait_set: Option<Vec<TraitSpec>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareKind {
    TssVsMicro,
    Chaos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSpec {
    pub kind: CompareKind,
    pub t_star: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gammas: Vec<f64>,
    #[serde(default = "default_max_polymorphic")]
    pub max_polymorphic: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub k_list: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Dotted field path, e.g. `sizes.k`.
    pub parameter: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub regime: Regime,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub replicates: usize,
    pub model: ModelSpec,
    #[serde(default)]
    pub sizes: Sizes,
    #[serde(default)]
    pub scales: Scales,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub initial: Initial,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

fn one() -> usize {
    1
}

fn default_max_polymorphic() -> f64 {
    0.05
}

/// One problem with a config, located by its field path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Diagnostic {
        Diagnostic {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// A config that passed validation, with its model built.
#[derive(Debug, Clone)]
pub struct ValidatedConfig {
    pub config: RunConfig,
    pub model: RateModel,
}

/// Reads, parses and validates a config file.
pub fn validate_config(path: &Path) -> Result<ValidatedConfig, Vec<Diagnostic>> {
    let text = fs::read_to_string(path)
        .map_err(|e| vec![Diagnostic::new("", format!("cannot read {}: {e}", path.display()))])?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| vec![Diagnostic::new("", format!("invalid JSON: {e}"))])?;
    validate_value(value)
}

/// Validates an already parsed config document.
pub fn validate_value(value: Value) -> Result<ValidatedConfig, Vec<Diagnostic>> {
    let mut config: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        vec![Diagnostic::new(if path == "." { String::new() } else { path }, e.into_inner().to_string())]
    })?;
    normalize(&mut config);
    let mut diags = check_required(&config);
    let model = build_model(&config, &mut diags);
    if !diags.is_empty() {
        return Err(diags);
    }
    let model = model.expect("model is built when there are no diagnostics");
    let anchors = anchor_traits(&config);
    if let Some(bad) = anchors.iter().find(|t| t.dim() != config.model.dim) {
        return Err(vec![Diagnostic::new(
            "initial",
            format!("trait {bad:?} does not have dimension {}", config.model.dim),
        )]);
    }
    let probe = &config.model.probe;
    if let Err(e) = model.probe_bounds(probe.lo, probe.hi, &anchors, probe.count, config.seed) {
        return Err(vec![Diagnostic::new("model.bound_c", format!("bound probe failed: {e}"))]);
    }
    Ok(ValidatedConfig { config, model })
}

/// Fills `dt`, `G` and the snapshot interval.
fn normalize(config: &mut RunConfig) {
    let num = &mut config.numerics;
    num.dt.get_or_insert(DEFAULT_DT);
    if num.snapshot_interval.is_none() {
        num.snapshot_interval = num.horizon.map(|h| h / SNAPSHOTS_PER_HORIZON);
    }
    config.sizes.g.get_or_insert(1);
    if config.model.mutation.kind != MutationKindSpec::Degenerate {
        config.scales.epsilon.get_or_insert(1.0);
    }
}

fn check_required(config: &RunConfig) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let regime = config.regime.name();
    let mut need = |present: bool, path: &str| {
        if !present {
            diags.push(Diagnostic::new(path, format!("required for regime {regime}")));
        }
    };
    let sizes = &config.sizes;
    let init = &config.initial;
    match config.regime {
        Regime::Micro => {
            need(sizes.k.is_some(), "sizes.k");
            need(sizes.n.is_some(), "sizes.n");
            need(config.scales.gamma.is_some(), "scales.gamma");
            need(config.numerics.horizon.is_some(), "numerics.horizon");
            need(!init.traits.is_empty(), "initial.traits");
        }
        Regime::Tss => {
            need(sizes.k.is_some(), "sizes.k");
            need(sizes.n.is_some(), "sizes.n");
            need(config.numerics.horizon.is_some(), "numerics.horizon");
            need(!init.traits.is_empty(), "initial.traits");
        }
        Regime::Meanfield => {
            need(sizes.n.is_some(), "sizes.n");
            need(config.numerics.horizon.is_some(), "numerics.horizon");
            need(!init.atoms.is_empty(), "initial.atoms");
        }
        Regime::Replicator => {
            need(sizes.n.is_some(), "sizes.n");
            need(config.numerics.horizon.is_some(), "numerics.horizon");
            need(!init.traits.is_empty(), "initial.traits");
            need(init.weights.is_some(), "initial.weights");
        }
        Regime::Canonical => {
            need(sizes.m.is_some(), "sizes.m");
            need(sizes.n.is_some(), "sizes.n");
            need(config.numerics.horizon.is_some(), "numerics.horizon");
            need(!init.traits.is_empty(), "initial.traits");
        }
        Regime::Compare => {
            need(sizes.n.is_some(), "sizes.n");
            need(!init.traits.is_empty(), "initial.traits");
            match &config.compare {
                None => need(false, "compare"),
                Some(c) => match c.kind {
                    CompareKind::TssVsMicro => {
                        need(sizes.k.is_some(), "sizes.k");
                        need(!c.gammas.is_empty(), "compare.gammas");
                    }
                    CompareKind::Chaos => need(!c.k_list.is_empty(), "compare.k_list"),
                },
            }
        }
    }
    if let (Some(w), false) = (&init.weights, init.traits.is_empty()) {
        if w.len() != init.traits.len() {
            diags.push(Diagnostic::new(
                "initial.weights",
                format!("expected {} weights, one per trait", init.traits.len()),
            ));
        }
    }
    if config.replicates == 0 {
        diags.push(Diagnostic::new("replicates", "must be >= 1"));
    }
    diags
}

fn build_kernel(spec: &KernelSpec, path: &str, diags: &mut Vec<Diagnostic>) -> Option<RateFn> {
    match spec {
        KernelSpec::Number(v) => Some(RateFn::Constant(*v)),
        KernelSpec::Expr(src) => match RateFn::parse(src) {
            Ok(f) => Some(f),
            Err(Error::Parse(e)) => {
                let at = e.offset().map(|o| format!(" (offset {o})")).unwrap_or_default();
                diags.push(Diagnostic::new(path, format!("{e}{at}")));
                None
            }
            Err(e) => {
                diags.push(Diagnostic::new(path, e.to_string()));
                None
            }
        },
    }
}

fn build_mutation(config: &RunConfig, diags: &mut Vec<Diagnostic>) -> Option<MutationFamily> {
    let spec = &config.model.mutation;
    let epsilon = config.scales.epsilon.unwrap_or(0.0);
    let kind = match spec.kind {
        MutationKindSpec::Degenerate => return Some(MutationFamily::degenerate()),
        MutationKindSpec::DiscretePm => MutationKind::DiscretePm,
        MutationKindSpec::IsotropicGaussian => match spec.std {
            Some(std) => MutationKind::IsotropicGaussian { std },
            None => {
                diags.push(Diagnostic::new("model.mutation.std", "required for isotropic_gaussian"));
                return None;
            }
        },
        MutationKindSpec::UniformBall => match spec.radius {
            Some(radius) => MutationKind::UniformBall { radius },
            None => {
                diags.push(Diagnostic::new("model.mutation.radius", "required for uniform_ball"));
                return None;
            }
        },
    };
    MutationFamily::new(kind, epsilon)
        .map_err(|e| diags.push(Diagnostic::new("model.mutation", e.to_string())))
        .ok()
}

fn build_model(config: &RunConfig, diags: &mut Vec<Diagnostic>) -> Option<RateModel> {
    let m = &config.model;
    let c = build_kernel(&m.c, "model.c", diags);
    let theta = build_kernel(&m.theta, "model.theta", diags);
    let lambda = build_kernel(&m.lambda, "model.lambda", diags);
    let mutation = build_mutation(config, diags);
    let (c, theta, lambda, mutation) = (c?, theta?, lambda?, mutation?);
    RateModel::new(c, theta, lambda, mutation, m.bound_c, m.dim)
        .map_err(|e| diags.push(Diagnostic::new("model", e.to_string())))
        .ok()
}

fn anchor_traits(config: &RunConfig) -> Vec<Trait> {
    let init = &config.initial;
    let mut set: BTreeSet<Trait> = init.traits.iter().map(TraitSpec::to_trait).collect();
    set.extend(init.atoms.iter().map(|a| a.x.to_trait()));
    if let Some(ts) = &init.trait_set {
        set.extend(ts.iter().map(TraitSpec::to_trait));
    }
    set.into_iter().collect()
}

/// Result of one runtime invariant check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantCheck {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub tolerance: f64,
}

impl InvariantCheck {
    /// Passes when `value <= tolerance`.
    fn at_most(name: &str, value: f64, tolerance: f64) -> InvariantCheck {
        InvariantCheck {
            name: name.into(),
            pass: value <= tolerance,
            value,
            tolerance,
        }
    }
}

/// Everything a run produced, before it is written out.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub checks: Vec<InvariantCheck>,
    /// Regime-specific terminal statistics merged into the summary.
    pub terminal: Value,
    /// `(file name, contents)` of every data file.
    pub files: Vec<(String, Vec<u8>)>,
}

impl RunOutput {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

struct Table {
    w: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new(header: &[String]) -> Table {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(header).expect("writing to memory cannot fail");
        Table { w }
    }

    fn row(&mut self, fields: impl IntoIterator<Item = String>) {
        self.w
            .write_record(fields.into_iter().collect::<Vec<_>>())
            .expect("writing to memory cannot fail");
    }

    fn finish(self) -> Vec<u8> {
        self.w.into_inner().expect("writing to memory cannot fail")
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn header(lead: &[&str], d: usize, tail: &[&str]) -> Vec<String> {
    lead.iter()
        .map(|s| s.to_string())
        .chain((0..d).map(|i| format!("x{i}")))
        .chain(tail.iter().map(|s| s.to_string()))
        .collect()
}

fn coords(x: &Trait) -> impl Iterator<Item = String> + '_ {
    x.iter().map(|&v| num(v))
}

fn rep_name(prefix: &str, i: usize) -> String {
    format!("{prefix}_rep{i:04}.csv")
}

fn required<T: Copy>(v: Option<T>, what: &str) -> crate::Result<T> {
    v.ok_or_else(|| Error::InvalidParameter(format!("{what} is required")))
}

/// Patch `l` starts from `initial.traits[l % len]`.
fn patch_traits(init: &Initial, k: usize) -> crate::Result<Vec<Trait>> {
    let traits: Vec<Trait> = init.traits.iter().map(TraitSpec::to_trait).collect();
    if traits.is_empty() {
        return Err(Error::InvalidParameter("initial.traits is empty".into()));
    }
    Ok((0..k).map(|l| traits[l % traits.len()].clone()).collect())
}

fn finite_check(name: &str, all_finite: bool) -> InvariantCheck {
    InvariantCheck {
        name: name.into(),
        pass: all_finite,
        value: if all_finite { 0.0 } else { 1.0 },
        tolerance: 0.0,
    }
}

/// Largest increase along a sequence that should not increase.
fn max_increase(values: &[f64]) -> f64 {
    values.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

/// Runs a validated config.
pub fn execute(cfg: &ValidatedConfig, exec: Execution) -> crate::Result<RunOutput> {
    let config = &cfg.config;
    let model = &cfg.model;
    match config.regime {
        Regime::Micro => run_micro(config, model, exec),
        Regime::Tss => run_tss(config, model, exec),
        Regime::Meanfield => run_meanfield(config, model),
        Regime::Replicator => run_replicator(config, model),
        Regime::Canonical => run_canonical(config, model, exec),
        Regime::Compare => run_compare(config, model, exec),
    }
}

fn run_micro(config: &RunConfig, model: &RateModel, exec: Execution) -> crate::Result<RunOutput> {
    let k = required(config.sizes.k, "sizes.k")?;
    let n = required(config.sizes.n, "sizes.n")?;
    let horizon = required(config.numerics.horizon, "numerics.horizon")?;
    let mut mc = MicroConfig::new(required(config.scales.gamma, "scales.gamma")?, horizon);
    mc.snapshot_interval = config.numerics.snapshot_interval;
    let init = MicroState::monomorphic(&patch_traits(&config.initial, k)?, n)?;
    let runs = micro_replicates(model, &init, &mc, config.seed, config.replicates, exec)?;
    let mut files = Vec::new();
    let mut max_time: f64 = 0.0;
    let mut monomorphic = 0usize;
    let mut finite = true;
    for (i, run) in runs.iter().enumerate() {
        let mut t = Table::new(&header(&["t", "patch"], model.dim(), &[]));
        let states = if run.snapshots.is_empty() {
            std::slice::from_ref(&run.state)
        } else {
            &run.snapshots[..]
        };
        for s in states {
            for l in 0..s.k() {
                for x in s.patch(l) {
                    finite &= x.is_finite();
                    t.row([num(s.time()), l.to_string()].into_iter().chain(coords(x)));
                }
            }
        }
        max_time = max_time.max(run.state.time());
        monomorphic += (0..k).filter(|&l| run.state.is_monomorphic(l)).count();
        files.push((rep_name("micro", i), t.finish()));
    }
    let checks = vec![
        finite_check("traits_finite", finite),
        InvariantCheck::at_most("time_within_horizon", max_time - horizon, 0.0),
    ];
    let terminal = json!({
        "monomorphic_patch_fraction": monomorphic as f64 / (k * runs.len()) as f64,
    });
    Ok(RunOutput { checks, terminal, files })
}

fn run_tss(config: &RunConfig, model: &RateModel, exec: Execution) -> crate::Result<RunOutput> {
    let k = required(config.sizes.k, "sizes.k")?;
    let mut tc = TssConfig::new(
        required(config.sizes.n, "sizes.n")?,
        required(config.numerics.horizon, "numerics.horizon")?,
    );
    tc.snapshot_interval = config.numerics.snapshot_interval;
    let init = SiteConfiguration::new(patch_traits(&config.initial, k)?)?;
    let runs = tss_replicates(model, &init, &tc, config.seed, config.replicates, exec)?;
    let mut files = Vec::new();
    let mut finite = true;
    let mut excess: i64 = i64::MIN;
    let (mut proposed, mut fixed, mut migrated) = (0u64, 0u64, 0u64);
    for (i, run) in runs.iter().enumerate() {
        let mut t = Table::new(&header(&["t", "patch"], model.dim(), &[]));
        let states = if run.snapshots.is_empty() {
            std::slice::from_ref(&run.state)
        } else {
            &run.snapshots[..]
        };
        for s in states {
            for (l, x) in s.x.iter().enumerate() {
                finite &= x.is_finite();
                t.row([num(s.time), l.to_string()].into_iter().chain(coords(x)));
            }
        }
        excess = excess.max(run.counts.mutation_fixed as i64 - run.counts.mutation_proposed as i64);
        proposed += run.counts.mutation_proposed;
        fixed += run.counts.mutation_fixed;
        migrated += run.counts.migration_fixed;
        files.push((rep_name("tss", i), t.finish()));
    }
    let checks = vec![
        finite_check("traits_finite", finite),
        InvariantCheck::at_most("mutation_fixations_within_proposals", excess as f64, 0.0),
    ];
    let terminal = json!({
        "mutation_proposed": proposed,
        "mutation_fixed": fixed,
        "migration_fixed": migrated,
    });
    Ok(RunOutput { checks, terminal, files })
}

fn run_meanfield(config: &RunConfig, model: &RateModel) -> crate::Result<RunOutput> {
    let init = AtomicMeasure::new(config.initial.atoms.iter().map(|a| Atom {
        r: a.r,
        x: a.x.to_trait(),
        w: a.w,
    }))?;
    let trait_set: Vec<Trait> = match &config.initial.trait_set {
        Some(ts) => ts.iter().map(TraitSpec::to_trait).collect(),
        None => init.trait_marginal().into_keys().collect(),
    };
    let fc = FlowConfig {
        n: required(config.sizes.n, "sizes.n")?,
        horizon: required(config.numerics.horizon, "numerics.horizon")?,
        dt: required(config.numerics.dt, "numerics.dt")?,
        snapshot_interval: required(config.numerics.snapshot_interval, "numerics.snapshot_interval")?,
    };
    let traj = meanfield_finite_solve(model, &init, &trait_set, &fc)?;
    let mut t = Table::new(&header(&["t", "r"], model.dim(), &["weight"]));
    let mut drift: f64 = 0.0;
    let mut min_w = f64::INFINITY;
    for s in &traj.snapshots {
        let mut total = 0.0;
        for (p, row) in s.mass.iter().enumerate() {
            for (i, &w) in row.iter().enumerate() {
                total += w;
                min_w = min_w.min(w);
                t.row(
                    [num(s.time), num(traj.positions[p])]
                        .into_iter()
                        .chain(coords(&traj.traits[i]))
                        .chain([num(w)]),
                );
            }
        }
        drift = drift.max((total - 1.0).abs());
    }
    let last = traj.snapshots.len() - 1;
    let weights: Vec<Value> = traj
        .trait_weights(last)
        .iter()
        .zip(&traj.traits)
        .map(|(w, x)| json!({"x": x.coords(), "weight": w}))
        .collect();
    let checks = vec![
        InvariantCheck::at_most("mass_conservation", drift, 1e-10),
        InvariantCheck::at_most("negative_weight", (-min_w).max(0.0), 1e-12),
    ];
    Ok(RunOutput {
        checks,
        terminal: json!({ "trait_weights": weights }),
        files: vec![("meanfield.csv".into(), t.finish())],
    })
}

fn run_replicator(config: &RunConfig, model: &RateModel) -> crate::Result<RunOutput> {
    let traits: Vec<Trait> = config.initial.traits.iter().map(TraitSpec::to_trait).collect();
    let w0 = config.initial.weights.clone().unwrap_or_default();
    let n = required(config.sizes.n, "sizes.n")?;
    let g = config.sizes.g.unwrap_or(1);
    let dt = required(config.numerics.dt, "numerics.dt")?;
    let horizon = required(config.numerics.horizon, "numerics.horizon")?;
    let interval = required(config.numerics.snapshot_interval, "numerics.snapshot_interval")?;
    let mut files = Vec::new();
    let mut means: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut invader = None;
    if g == 1 && model.is_homogeneous() {
        let a = build_interaction_matrix(model, &traits, n)?;
        invader = invasion_check(&a, &w0)?;
        let traj = replicator_integrate(&a, &w0, dt, horizon, interval)?;
        means.extend(traj.times.into_iter().zip(traj.weights));
    } else {
        let profile: Vec<Vec<f64>> = w0.iter().map(|&w| vec![w; g]).collect();
        let traj = spatial_weights_integrate(model, &traits, &profile, n, dt, horizon, interval)?;
        let mut t = Table::new(&["t", "trait_index", "grid_index", "w"].map(String::from));
        for (s, snap) in traj.snapshots.iter().enumerate() {
            for (i, row) in snap.w.iter().enumerate() {
                for (p, &w) in row.iter().enumerate() {
                    t.row([num(snap.time), (i + 1).to_string(), p.to_string(), num(w)]);
                }
            }
            means.push((snap.time, traj.mean_weights(s)));
        }
        files.push(("replicator_spatial.csv".to_string(), t.finish()));
    }
    let cols: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=traits.len()).map(|i| format!("w{i}")))
        .collect();
    let mut t = Table::new(&cols);
    for (time, w) in &means {
        t.row(std::iter::once(num(*time)).chain(w.iter().map(|&v| num(v))));
    }
    files.insert(0, ("replicator_meanweights.csv".to_string(), t.finish()));
    let drift = means
        .iter()
        .map(|(_, w)| (w.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let min_w = means.iter().flat_map(|(_, w)| w.iter().copied()).fold(f64::INFINITY, f64::min);
    let mut checks = vec![
        InvariantCheck::at_most("mass_conservation", drift, 1e-10),
        InvariantCheck {
            name: "positivity".into(),
            pass: min_w > 0.0,
            value: min_w,
            tolerance: 0.0,
        },
    ];
    if let Some(i) = invader {
        let s: Vec<f64> = means.iter().map(|(_, w)| 1.0 - w[i]).collect();
        checks.push(InvariantCheck::at_most("invader_complement_nonincreasing", max_increase(&s), 1e-9));
    }
    let terminal = json!({
        "invader": invader.map(|i| i + 1),
        "mean_weights": means.last().map(|(_, w)| w.clone()),
    });
    Ok(RunOutput { checks, terminal, files })
}

fn run_canonical(config: &RunConfig, model: &RateModel, exec: Execution) -> crate::Result<RunOutput> {
    let m = required(config.sizes.m, "sizes.m")?;
    let traits: Vec<Trait> = config.initial.traits.iter().map(TraitSpec::to_trait).collect();
    let ensemble = XiEnsemble::new(
        (0..m)
            .map(|j| CanonicalParticle {
                r: (j as f64 + 0.5) / m as f64,
                x: traits[j % traits.len()].clone(),
            })
            .collect(),
    )?;
    let mut cc = CanonicalConfig::new(
        required(config.sizes.n, "sizes.n")?,
        required(config.numerics.dt, "numerics.dt")?,
        required(config.numerics.horizon, "numerics.horizon")?,
    );
    cc.snapshot_interval = config.numerics.snapshot_interval;
    let traj = canonical_ensemble_run(model, &ensemble, &cc, config.seed, exec)?;
    let mut t = Table::new(&header(&["t", "particle"], model.dim(), &[]));
    let mut finite = true;
    for s in &traj.snapshots {
        for (j, x) in s.x.iter().enumerate() {
            finite &= x.is_finite();
            t.row([num(s.time), j.to_string()].into_iter().chain(coords(x)));
        }
    }
    let fin = traj.final_snapshot();
    let terminal = json!({
        "mean": fin.mean(),
        "variance": fin.variance(),
        "jumps_accepted": traj.jumps_accepted,
    });
    Ok(RunOutput {
        checks: vec![finite_check("traits_finite", finite)],
        terminal,
        files: vec![("canonical.csv".into(), t.finish())],
    })
}

fn run_compare(config: &RunConfig, model: &RateModel, exec: Execution) -> crate::Result<RunOutput> {
    let spec = config
        .compare
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("compare section is required".into()))?;
    let n = required(config.sizes.n, "sizes.n")?;
    match spec.kind {
        CompareKind::TssVsMicro => {
            let k = required(config.sizes.k, "sizes.k")?;
            let init = SiteConfiguration::new(patch_traits(&config.initial, k)?)?;
            let mut gammas = spec.gammas.clone();
            gammas.sort_by(|a, b| b.total_cmp(a));
            let cc = CompareConfig {
                n,
                gammas,
                t_star: spec.t_star,
                replicates: config.replicates,
                seed: config.seed,
                max_polymorphic: spec.max_polymorphic,
            };
            let rows = tss_vs_micro_compare(model, &init, &cc, exec)?;
            let mut t = Table::new(&["gamma", "tv", "stderr", "polymorphic_fraction"].map(String::from));
            for r in &rows {
                t.row([num(r.gamma), num(r.tv), num(r.stderr), num(r.polymorphic_fraction)]);
            }
            let tv: Vec<f64> = rows.iter().map(|r| r.tv).collect();
            let poly = rows.iter().map(|r| r.polymorphic_fraction).fold(0.0, f64::max);
            let se = rows.iter().map(|r| r.stderr).fold(0.0, f64::max);
            let checks = vec![
                InvariantCheck::at_most("tv_nonincreasing_as_gamma_decreases", max_increase(&tv), 2.0 * se),
                InvariantCheck::at_most("polymorphic_fraction", poly, spec.max_polymorphic),
            ];
            let terminal = json!({ "tv": tv });
            Ok(RunOutput {
                checks,
                terminal,
                files: vec![("divergence.csv".into(), t.finish())],
            })
        }
        CompareKind::Chaos => {
            let traits: Vec<Trait> = config.initial.traits.iter().map(TraitSpec::to_trait).collect();
            let uniform = vec![1.0 / traits.len() as f64; traits.len()];
            let weights = config.initial.weights.clone().unwrap_or(uniform);
            let mu0 = AtomicMeasure::new(
                traits.into_iter().zip(weights).map(|(x, w)| Atom { r: 0.5, x, w }),
            )?;
            let rows = chaos_decay_scan(
                model,
                &spec.k_list,
                &mu0,
                n,
                &|x: &Trait| x[0],
                spec.t_star,
                config.replicates,
                config.seed,
                exec,
            )?;
            let mut t = Table::new(&["K", "estimate", "stderr"].map(String::from));
            for r in &rows {
                t.row([r.k.to_string(), num(r.estimate), num(r.stderr)]);
            }
            let abs: Vec<f64> = rows.iter().map(|r| r.estimate.abs()).collect();
            let se = rows.iter().map(|r| r.stderr).fold(0.0, f64::max);
            let checks = vec![InvariantCheck::at_most(
                "abs_correlation_nonincreasing_in_k",
                max_increase(&abs),
                2.0 * se,
            )];
            Ok(RunOutput {
                checks,
                terminal: json!({ "abs_correlation": abs }),
                files: vec![("chaos.csv".into(), t.finish())],
            })
        }
    }
}

fn config_hash(config: &RunConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("configs always serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Parse(_) => "parse",
        Error::Eval { .. } => "eval",
        Error::BoundViolation { .. } => "bound_violation",
        Error::InvalidRate { .. } => "invalid_rate",
        Error::FitnessDomain { .. } => "fitness_domain",
        Error::InvalidParameter(_) => "invalid_parameter",
        Error::Numerical(_) => "numerical",
        Error::Precondition(_) => "precondition",
    }
}

fn write_json(path: &Path, value: &Value) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json values always serialize");
    text.push('\n');
    fs::write(path, text)
}

/// Process exit status of a finished run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Passed,
    ChecksFailed,
    Failed,
}

impl Status {
    pub fn code(self) -> i32 {
        match self {
            Status::Passed => 0,
            Status::ChecksFailed => 1,
            Status::Failed => 2,
        }
    }
}

/// Runs a validated config and writes every output file into `out`.
pub fn run_to_dir(cfg: &ValidatedConfig, out: &Path, threads: Option<usize>) -> std::io::Result<Status> {
    fs::create_dir_all(out)?;
    let exec = if threads == Some(1) {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let started = unix_now();
    let regime = cfg.config.regime.name();
    info!("running regime {regime} with seed {}", cfg.config.seed);
    let result = with_threads(threads, || execute(cfg, exec));
    let output = match result {
        Ok(o) => o,
        Err(e) => {
            let record = json!({
                "regime": regime,
                "seed": cfg.config.seed,
                "kind": error_kind(&e),
                "error": e.to_string(),
            });
            write_json(&out.join("failure.json"), &record)?;
            return Ok(Status::Failed);
        }
    };
    let mut names = Vec::new();
    for (name, bytes) in &output.files {
        fs::write(out.join(name), bytes)?;
        names.push(name.clone());
    }
    let mut summary = json!({
        "regime": regime,
        "seed": cfg.config.seed,
        "invariant_checks": output.checks,
    });
    if let (Value::Object(s), Value::Object(t)) = (&mut summary, &output.terminal) {
        s.insert("terminal".into(), Value::Object(t.clone()));
        if let Some(inv) = t.get("invader") {
            s.insert("invader".into(), inv.clone());
        }
    }
    write_json(&out.join("summary.json"), &summary)?;
    names.push("summary.json".into());
    let manifest = json!({
        "config_sha256": config_hash(&cfg.config),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.config.seed,
        "regime": regime,
        "started_unix": started,
        "finished_unix": unix_now(),
        "files": names,
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(if output.passed() {
        Status::Passed
    } else {
        Status::ChecksFailed
    })
}

#[derive(Debug, Parser)]
#[command(name = "metapop", version, about = "Moran metapopulation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a config and print it with defaults filled in.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the regime named in the config.
    Run(RunArgs),
    /// Run a config whose regime is `compare`.
    Compare(RunArgs),
    /// Run the base config once per value of its `sweep` section.
    Sweep(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 runs single-threaded.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

fn print_diagnostics(diags: &[Diagnostic]) {
    let doc = json!({ "valid": false, "diagnostics": diags });
    println!("{}", serde_json::to_string_pretty(&doc).expect("json values always serialize"));
}

fn load(args: &RunArgs) -> Result<Value, Vec<Diagnostic>> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| vec![Diagnostic::new("", format!("cannot read {}: {e}", args.config.display()))])?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| vec![Diagnostic::new("", format!("invalid JSON: {e}"))])?;
    if let (Some(seed), Value::Object(map)) = (args.seed, &mut value) {
        map.insert("seed".into(), json!(seed));
    }
    Ok(value)
}

fn fail_validation(out: &Path, diags: &[Diagnostic]) -> i32 {
    print_diagnostics(diags);
    let record = json!({ "kind": "config", "diagnostics": diags });
    if fs::create_dir_all(out).is_ok() {
        let _ = write_json(&out.join("failure.json"), &record);
    }
    Status::Failed.code()
}

fn run_command(args: &RunArgs, require_compare: bool) -> i32 {
    let cfg = match load(args).and_then(validate_value) {
        Ok(c) => c,
        Err(d) => return fail_validation(&args.out, &d),
    };
    if require_compare && cfg.config.regime != Regime::Compare {
        return fail_validation(&args.out, &[Diagnostic::new("regime", "the compare subcommand needs regime \"compare\"")]);
    }
    finish(run_to_dir(&cfg, &args.out, args.threads))
}

fn finish(status: std::io::Result<Status>) -> i32 {
    match status {
        Ok(s) => s.code(),
        Err(e) => {
            eprintln!("error: {e}");
            Status::Failed.code()
        }
    }
}

fn set_path(doc: &mut Value, dotted: &str, v: Value) -> Result<(), Diagnostic> {
    let mut cur = doc;
    let parts: Vec<&str> = dotted.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cur
            .as_object_mut()
            .ok_or_else(|| Diagnostic::new("sweep.parameter", format!("`{dotted}` does not name an object field")))?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), v);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert_with(|| json!({}));
    }
    Err(Diagnostic::new("sweep.parameter", "empty parameter path"))
}

fn sweep_command(args: &RunArgs) -> i32 {
    let base = match load(args) {
        Ok(v) => v,
        Err(d) => return fail_validation(&args.out, &d),
    };
    let sweep: SweepSpec = match base.get("sweep").cloned().map(serde_json::from_value) {
        Some(Ok(s)) => s,
        Some(Err(e)) => return fail_validation(&args.out, &[Diagnostic::new("sweep", e.to_string())]),
        None => return fail_validation(&args.out, &[Diagnostic::new("sweep", "required for the sweep subcommand")]),
    };
    let mut t = Table::new(&["index", "value", "status"].map(String::from));
    let mut worst = Status::Passed;
    for (i, v) in sweep.values.iter().enumerate() {
        let mut doc = base.clone();
        if let Value::Object(map) = &mut doc {
            map.remove("sweep");
        }
        if let Err(d) = set_path(&mut doc, &sweep.parameter, v.clone()) {
            return fail_validation(&args.out, &[d]);
        }
        let dir = args.out.join(format!("sweep_{i:03}"));
        let status = match validate_value(doc) {
            Ok(cfg) => match run_to_dir(&cfg, &dir, args.threads) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    Status::Failed
                }
            },
            Err(d) => {
                fail_validation(&dir, &d);
                Status::Failed
            }
        };
        let label = match status {
            Status::Passed => "passed",
            Status::ChecksFailed => "checks_failed",
            Status::Failed => "failed",
        };
        t.row([i.to_string(), v.to_string(), label.to_string()]);
        if status.code() > worst.code() {
            worst = status;
        }
    }
    if let Err(e) = fs::create_dir_all(&args.out).and_then(|_| fs::write(args.out.join("sweep.csv"), t.finish())) {
        eprintln!("error: {e}");
        return Status::Failed.code();
    }
    worst.code()
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match &cli.command {
        Command::Validate { config } => match validate_config(config) {
            Ok(cfg) => {
                let doc = json!({ "valid": true, "config": cfg.config });
                println!("{}", serde_json::to_string_pretty(&doc).expect("json values always serialize"));
                0
            }
            Err(d) => {
                print_diagnostics(&d);
                Status::Failed.code()
            }
        },
        Command::Run(args) => run_command(args, false),
        Command::Compare(args) => run_command(args, true),
        Command::Sweep(args) => sweep_command(args),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tss_doc() -> Value {
        json!({
            "regime": "tss",
            "model": {"c": "1 + 0.5 * y", "theta": 0.2, "lambda": "0.5", "bound_c": 2,
                      "mutation": {"kind": "discrete_pm"}},
            "sizes": {"k": 3, "n": 4},
            "scales": {"epsilon": 0.1},
            "numerics": {"horizon": 2.0},
            "initial": {"traits": [0.0]}
        })
    }

    #[test]
    fn defaults_are_filled() {
        let cfg = validate_value(tss_doc()).unwrap();
        assert_eq!(cfg.config.numerics.dt, Some(DEFAULT_DT));
        assert_eq!(cfg.config.sizes.g, Some(1));
        assert_eq!(cfg.config.numerics.snapshot_interval, Some(0.02));
        assert_eq!(cfg.config.replicates, 1);
    }

    #[test]
    fn syntax_error_names_the_field() {
        let mut doc = tss_doc();
        doc["model"]["lambda"] = json!("x +");
        let d = validate_value(doc).unwrap_err();
        assert_eq!(d[0].path, "model.lambda");
        assert!(d[0].message.contains("offset 3") || d[0].message.contains("offset 4"), "{}", d[0].message);
    }

    #[test]
    fn schema_errors_carry_a_path() {
        let mut doc = tss_doc();
        doc["sizes"]["k"] = json!("three");
        let d = validate_value(doc).unwrap_err();
        assert_eq!(d[0].path, "sizes.k");
        let mut doc = tss_doc();
        doc["sizes"].as_object_mut().unwrap().remove("n");
        let d = validate_value(doc).unwrap_err();
        assert_eq!(d[0].path, "sizes.n");
    }

    #[test]
    fn probe_catches_a_low_bound() {
        let mut doc = tss_doc();
        doc["model"]["c"] = json!(2.0);
        doc["model"]["bound_c"] = json!(1.0);
        let d = validate_value(doc).unwrap_err();
        assert_eq!(d[0].path, "model.bound_c");
    }

    #[test]
    fn csv_numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, 12345.678, -2.5e10] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn sweep_paths() {
        let mut doc = tss_doc();
        set_path(&mut doc, "sizes.k", json!(5)).unwrap();
        set_path(&mut doc, "numerics.new_field", json!(1)).unwrap();
        assert_eq!(doc["sizes"]["k"], json!(5));
        assert!(set_path(&mut doc, "regime.x", json!(1)).is_err());
    }
}
