//! Finitely supported probability measures on `[0, 1] × ℝᵈ`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::Trait;

/// One weighted atom `w δ_(r, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub r: f64,
    pub x: Trait,
    pub w: f64,
}

/// A probability measure given by weighted atoms with distinct `(r, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomicMeasure {
    atoms: Vec<Atom>,
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct Key(u64, Trait);

fn position_key(r: f64) -> u64 {
    // total order on finite doubles, with -0 folded onto +0
    let r = if r == 0.0 { 0.0 } else { r };
    let bits = r.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

impl AtomicMeasure {
    /// Merges duplicate `(r, x)` pairs and checks the total mass.
    pub fn new(atoms: impl IntoIterator<Item = Atom>) -> Result<AtomicMeasure> {
        let mut merged: BTreeMap<Key, (f64, f64)> = BTreeMap::new();
        let mut dim = None;
        for a in atoms {
            if !(0.0..=1.0).contains(&a.r) {
                return Err(Error::InvalidParameter(format!(
                    "atom position {} outside [0, 1]",
                    a.r
                )));
            }
            if !(a.w >= 0.0 && a.w.is_finite()) {
                return Err(Error::InvalidParameter(format!("atom weight {} is invalid", a.w)));
            }
            if !a.x.is_finite() || a.x.dim() == 0 {
                return Err(Error::InvalidParameter(format!("atom trait {:?} is invalid", a.x)));
            }
            match dim {
                None => dim = Some(a.x.dim()),
                Some(d) if d != a.x.dim() => {
                    return Err(Error::InvalidParameter("atoms have mixed trait dimensions".into()))
                }
                _ => {}
            }
            merged.entry(Key(position_key(a.r), a.x)).or_insert((a.r, 0.0)).1 += a.w;
        }
        let atoms: Vec<Atom> = merged
            .into_iter()
            .map(|(Key(_, x), (r, w))| Atom { r, x, w })
            .collect();
        let total: f64 = atoms.iter().map(|a| a.w).sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidParameter(format!(
                "measure has total mass {total}, expected 1"
            )));
        }
        Ok(AtomicMeasure { atoms })
    }

    /// Uniform measure over the given points.
    pub fn empirical(points: impl IntoIterator<Item = (f64, Trait)>) -> Result<AtomicMeasure> {
        let points: Vec<_> = points.into_iter().collect();
        let w = 1.0 / points.len() as f64;
        AtomicMeasure::new(points.into_iter().map(|(r, x)| Atom { r, x, w }))
    }

    pub fn dirac(r: f64, x: Trait) -> Result<AtomicMeasure> {
        AtomicMeasure::new([Atom { r, x, w: 1.0 }])
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.w).sum()
    }

    pub fn dim(&self) -> usize {
        self.atoms.first().map_or(0, |a| a.x.dim())
    }

    /// Marginal law of the trait coordinate.
    pub fn trait_marginal(&self) -> BTreeMap<Trait, f64> {
        let mut out = BTreeMap::new();
        for a in &self.atoms {
            *out.entry(a.x.clone()).or_insert(0.0) += a.w;
        }
        out
    }

    /// Draws one atom with probability proportional to its weight.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &Atom {
        let total = self.total_mass();
        let mut u = rng.random::<f64>() * total;
        for a in &self.atoms {
            if u < a.w {
                return a;
            }
            u -= a.w;
        }
        self.atoms.iter().rev().find(|a| a.w > 0.0).unwrap_or(&self.atoms[0])
    }
}
