//! Carleson-type cube sequences: the packing constant, the embedding
//! estimate with its classical factor 4, sparsity of cube families, and the
//! unweighted square-function ratio that underpins the square-function
//! bounds elsewhere in the crate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{CubeId, Lattice};
use crate::measure::{cube_averages, norm, Measure, StepFunction};

/// Nonnegative values attached to cubes; absent cubes count as 0.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CubeSequence {
    entries: BTreeMap<usize, f64>,
}

impl CubeSequence {
    pub fn new() -> Self {
        CubeSequence::default()
    }

    pub fn from_entries(lattice: &Lattice, entries: &[(CubeId, f64)]) -> Result<Self> {
        let mut s = CubeSequence::new();
        for (c, v) in entries {
            lattice.require_valid(c)?;
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::InvalidData(format!("sequence value {v} at {c:?}")));
            }
            s.entries.insert(lattice.cube_index(c), *v);
        }
        Ok(s)
    }

    pub fn set(&mut self, lattice: &Lattice, c: &CubeId, v: f64) {
        self.entries.insert(lattice.cube_index(c), v);
    }

    pub fn set_by_index(&mut self, cube_idx: usize, v: f64) {
        self.entries.insert(cube_idx, v);
    }

    pub fn get_by_index(&self, cube_idx: usize) -> f64 {
        self.entries.get(&cube_idx).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().map(|(&i, &v)| (i, v))
    }

    pub fn to_json_entries(&self, lattice: &Lattice) -> Vec<(CubeId, f64)> {
        self.entries.iter().map(|(&i, &v)| (lattice.cube_from_index(i), v)).collect()
    }
}

/// Smallest `Λ` with `Σ_{Q ⊆ R} a_Q ≤ Λ μ(R)` over positive-mass `R`;
/// infinite when a massless subtree carries positive sequence mass.
/// Single bottom-up pass with per-subtree accumulators.
pub fn carleson_constant(a: &CubeSequence, m: &Measure) -> f64 {
    let lat = m.lattice;
    let mut subtree = vec![0.0f64; lat.num_cubes()];
    for (i, v) in a.iter() {
        subtree[i] = v;
    }
    let mut best: f64 = 0.0;
    for g in (0..=lat.depth).rev() {
        let off = lat.gen_offset(g);
        for k in 0..lat.cubes_at(g) {
            let idx = off + k;
            if g < lat.depth {
                let c = lat.cube_from_index(idx);
                let child_off = lat.gen_offset(g + 1);
                let mut s = subtree[idx];
                for ch in lat.children(&c).unwrap() {
                    s += subtree[child_off + lat.lex_rank(&ch)];
                }
                subtree[idx] = s;
            }
            let mass = m.mass_by_index(idx);
            if mass > 0.0 {
                best = best.max(subtree[idx] / mass);
            } else if subtree[idx] > 0.0 {
                return f64::INFINITY;
            }
        }
    }
    best
}

/// `Σ a_Q ⟨f⟩_Q² / ‖f‖²`; the embedding estimate bounds this by four times
/// the Carleson constant.
pub fn embedding_ratio(a: &CubeSequence, m: &Measure, f: &StepFunction) -> Result<f64> {
    let nf = norm(f, m)?;
    if nf == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let avgs = cube_averages(f, m);
    let mut s = 0.0;
    for (i, v) in a.iter() {
        s += v * avgs[i] * avgs[i];
    }
    Ok(s / (nf * nf))
}

/// Packing constant of a cube family: the Carleson constant of the
/// sequence `μ(Q)·1_{Q ∈ S}`.
pub fn sparsity_check(s: &[CubeId], m: &Measure) -> f64 {
    let lat = m.lattice;
    let mut a = CubeSequence::new();
    for c in s {
        let idx = lat.cube_index(c);
        a.set_by_index(idx, m.mass_by_index(idx));
    }
    carleson_constant(&a, m)
}

pub fn sparsity_check_indices(s: impl Iterator<Item = usize>, m: &Measure) -> f64 {
    let mut a = CubeSequence::new();
    for idx in s {
        a.set_by_index(idx, m.mass_by_index(idx));
    }
    carleson_constant(&a, m)
}

/// `Σ_{Q ≠ root} |⟨f⟩_{Q^(1)} − ⟨f⟩_Q|² μ(Q) / ‖f‖²`. In the finite model
/// this never exceeds 1: the summands are exactly the norms of the plain
/// martingale differences, and those are orthogonal.
pub fn usf_ratio(f: &StepFunction, m: &Measure) -> Result<f64> {
    let nf = norm(f, m)?;
    if nf == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(usf_sum(f, m) / (nf * nf))
}

/// Unnormalized square-function sum (see `usf_ratio`).
pub fn usf_sum(f: &StepFunction, m: &Measure) -> f64 {
    let lat = m.lattice;
    let avgs = cube_averages(f, m);
    let mut s = 0.0;
    for g in 1..=lat.depth {
        let off = lat.gen_offset(g);
        for k in 0..lat.cubes_at(g) {
            let idx = off + k;
            let mass = m.mass_by_index(idx);
            if mass == 0.0 {
                continue;
            }
            let c = lat.cube_from_index(idx);
            let p = lat.parent(&c).unwrap();
            let d = avgs[lat.cube_index(&p)] - avgs[idx];
            s += d * d * mass;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lat1(d: u32) -> Lattice {
        Lattice::new(1, d).unwrap()
    }

    #[test]
    fn leaves_only_sequence_has_constant_one() {
        let lat = lat1(3);
        let m = Measure::uniform(lat);
        let mut a = CubeSequence::new();
        let off = lat.gen_offset(lat.depth);
        for k in 0..lat.cubes_at(lat.depth) {
            a.set_by_index(off + k, m.mass_by_index(off + k));
        }
        assert!((carleson_constant(&a, &m) - 1.0).abs() < 1e-12);

        let f = StepFunction::constant(lat, 1.0);
        assert!((embedding_ratio(&a, &m, &f).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_sequence_and_empty_family() {
        let lat = lat1(2);
        let m = Measure::uniform(lat);
        assert_eq!(carleson_constant(&CubeSequence::new(), &m), 0.0);
        assert_eq!(sparsity_check(&[], &m), 0.0);
    }

    #[test]
    fn full_tree_packs_depth_plus_one() {
        let lat = lat1(3);
        let m = Measure::new(lat, vec![0.3, 0.1, 0.25, 0.05, 0.05, 0.05, 0.1, 0.1]).unwrap();
        let mut a = CubeSequence::new();
        for c in lat.all_cubes() {
            a.set(&lat, &c, m.mass(&c));
        }
        assert!((carleson_constant(&a, &m) - 4.0).abs() < 1e-12);
        let all = lat.all_cubes();
        assert!((sparsity_check(&all, &m) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn one_generation_is_sparse_with_constant_one() {
        let lat = lat1(3);
        let m = Measure::uniform(lat);
        let gen2: Vec<CubeId> =
            lat.all_cubes().into_iter().filter(|c| c.g == 2).collect();
        assert!((sparsity_check(&gen2, &m) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_mass_subtree_with_positive_entry_is_infinite() {
        let lat = lat1(1);
        let m = Measure::new(lat, vec![1.0, 0.0]).unwrap();
        let mut a = CubeSequence::new();
        a.set(&lat, &CubeId::new(1, vec![1]), 0.5);
        assert!(carleson_constant(&a, &m).is_infinite());
    }

    #[test]
    fn carleson_constant_monotone_in_sequence() {
        let lat = lat1(3);
        let m = Measure::new(lat, vec![0.2, 0.1, 0.15, 0.05, 0.1, 0.1, 0.2, 0.1]).unwrap();
        let mut small = CubeSequence::new();
        let mut big = CubeSequence::new();
        for (i, c) in lat.all_cubes().iter().enumerate() {
            let v = 0.01 * (i as f64 + 1.0);
            small.set(&lat, c, v);
            big.set(&lat, c, v * 1.5 + 0.01);
        }
        assert!(carleson_constant(&small, &m) <= carleson_constant(&big, &m));
    }

    #[test]
    fn usf_depth_one_hand_value() {
        let lat = lat1(1);
        let m = Measure::uniform(lat);
        let f = StepFunction::new(lat, vec![1.0, 3.0]).unwrap();
        // Differences to the root average 2 are ±1 with mass 1/2 each.
        assert!((usf_ratio(&f, &m).unwrap() - 0.2).abs() < 1e-14);

        let c = StepFunction::constant(lat, 5.0);
        assert!(usf_ratio(&c, &m).unwrap().abs() < 1e-14);
    }

    #[test]
    fn single_cube_sequence_embedding_bound() {
        // Supported on one cube R the ratio cannot exceed a_R / μ(R).
        let lat = lat1(2);
        let m = Measure::new(lat, vec![0.4, 0.1, 0.3, 0.2]).unwrap();
        let r = CubeId::new(1, vec![0]);
        let mut a = CubeSequence::new();
        a.set(&lat, &r, 0.7);
        let bound = 0.7 / m.mass(&r);
        for vals in [[1.0, 0.0, 0.0, 0.0], [1.0, -2.0, 0.5, 3.0], [2.0, 2.0, 2.0, 2.0]] {
            let f = StepFunction::new(lat, vals.to_vec()).unwrap();
            assert!(embedding_ratio(&a, &m, &f).unwrap() <= bound + 1e-12);
        }
    }
}
