use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{CubeId, Lattice};

/// A nonnegative measure given by its leaf atoms. Cube masses are cached
/// eagerly, bottom-up, so `mass` is O(1) and exactly additive over children.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Measure {
    pub lattice: Lattice,
    pub leaf_weights: Vec<f64>,
    #[serde(skip)]
    cube_mass: Vec<f64>,
}

impl Measure {
    pub fn new(lattice: Lattice, leaf_weights: Vec<f64>) -> Result<Self> {
        if leaf_weights.len() != lattice.num_leaves() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} leaf weights, got {}",
                lattice.num_leaves(),
                leaf_weights.len()
            )));
        }
        if leaf_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidData("leaf weights must be finite and >= 0".into()));
        }
        let mut m = Measure { lattice, leaf_weights, cube_mass: Vec::new() };
        m.rebuild_cache();
        Ok(m)
    }

    /// Total mass one, split evenly over the leaves.
    pub fn uniform(lattice: Lattice) -> Self {
        let l = lattice.num_leaves();
        Measure::new(lattice, vec![1.0 / l as f64; l]).unwrap()
    }

    pub(crate) fn rebuild_cache(&mut self) {
        self.cube_mass = aggregate_leaves(&self.lattice, &self.leaf_weights);
    }

    /// Restore caches after deserialization.
    pub fn finalize(mut self) -> Result<Self> {
        let weights = std::mem::take(&mut self.leaf_weights);
        Measure::new(self.lattice, weights)
    }

    pub fn mass(&self, q: &CubeId) -> f64 {
        self.cube_mass[self.lattice.cube_index(q)]
    }

    pub fn mass_by_index(&self, cube_idx: usize) -> f64 {
        self.cube_mass[cube_idx]
    }

    pub fn total(&self) -> f64 {
        self.cube_mass[0]
    }

    pub fn weight(&self, leaf: usize) -> f64 {
        self.leaf_weights[leaf]
    }
}

/// Sum leaf values into every cube of the tree; entry `i` of the result is
/// the sum over the leaves under cube `i`. O(#cubes) by accumulating each
/// generation into its parents.
pub fn aggregate_leaves(lattice: &Lattice, leaf_values: &[f64]) -> Vec<f64> {
    let mut sums = vec![0.0; lattice.num_cubes()];
    let leaf_off = lattice.gen_offset(lattice.depth);
    sums[leaf_off..].copy_from_slice(leaf_values);
    for g in (0..lattice.depth).rev() {
        let off = lattice.gen_offset(g);
        let child_off = lattice.gen_offset(g + 1);
        for k in 0..lattice.cubes_at(g) {
            let parent = lattice.cube_from_index(off + k);
            let mut s = 0.0;
            for ch in lattice.children(&parent).unwrap() {
                s += sums[child_off + lattice.lex_rank(&ch)];
            }
            sums[off + k] = s;
        }
    }
    sums
}

/// A function constant on leaves: the whole crate works with these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub lattice: Lattice,
    pub values: Vec<f64>,
}

impl StepFunction {
    pub fn new(lattice: Lattice, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.num_leaves() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values, got {}",
                lattice.num_leaves(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("step function values must be finite".into()));
        }
        Ok(StepFunction { lattice, values })
    }

    pub fn zero(lattice: Lattice) -> Self {
        let l = lattice.num_leaves();
        StepFunction { lattice, values: vec![0.0; l] }
    }

    pub fn constant(lattice: Lattice, c: f64) -> Self {
        let l = lattice.num_leaves();
        StepFunction { lattice, values: vec![c; l] }
    }

    pub fn indicator(lattice: Lattice, q: &CubeId) -> Self {
        let mut f = StepFunction::zero(lattice);
        lattice.for_each_leaf(q, |l| f.values[l] = 1.0);
        f
    }

    /// Pointwise `f * 1_Q`.
    pub fn restrict(&self, q: &CubeId) -> StepFunction {
        let mut out = StepFunction::zero(self.lattice);
        self.lattice.for_each_leaf(q, |l| out.values[l] = self.values[l]);
        out
    }

    pub fn abs(&self) -> StepFunction {
        StepFunction {
            lattice: self.lattice,
            values: self.values.iter().map(|v| v.abs()).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> StepFunction {
        StepFunction { lattice: self.lattice, values: self.values.iter().map(|v| c * v).collect() }
    }

    pub fn add(&self, other: &StepFunction) -> StepFunction {
        StepFunction {
            lattice: self.lattice,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &StepFunction) -> StepFunction {
        StepFunction {
            lattice: self.lattice,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn mul_pointwise(&self, other: &StepFunction) -> StepFunction {
        StepFunction {
            lattice: self.lattice,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &StepFunction) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b;
        }
    }
}

fn check_same_lattice(a: &Lattice, b: &Lattice) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::LatticeMismatch(format!("{a:?} vs {b:?}")))
    }
}

/// `mass(Q)^-1 ∫_Q f dμ`, with the zero-mass convention: a massless cube
/// averages to 0.
pub fn average(f: &StepFunction, q: &CubeId, m: &Measure) -> f64 {
    let mass = m.mass(q);
    if mass == 0.0 {
        return 0.0;
    }
    let mut s = 0.0;
    m.lattice.for_each_leaf(q, |l| s += f.values[l] * m.leaf_weights[l]);
    s / mass
}

/// Per-cube integrals `∫_Q f dμ` for every cube, bottom-up.
pub fn cube_integrals(f: &StepFunction, m: &Measure) -> Vec<f64> {
    let weighted: Vec<f64> =
        f.values.iter().zip(&m.leaf_weights).map(|(v, w)| v * w).collect();
    aggregate_leaves(&m.lattice, &weighted)
}

/// Per-cube averages for every cube (0 on massless cubes).
pub fn cube_averages(f: &StepFunction, m: &Measure) -> Vec<f64> {
    let ints = cube_integrals(f, m);
    ints.iter()
        .enumerate()
        .map(|(i, s)| {
            let mass = m.mass_by_index(i);
            if mass == 0.0 {
                0.0
            } else {
                s / mass
            }
        })
        .collect()
}

/// The `L²(μ)` pairing `Σ f g w`.
pub fn inner(f: &StepFunction, g: &StepFunction, m: &Measure) -> Result<f64> {
    check_same_lattice(&f.lattice, &g.lattice)?;
    check_same_lattice(&f.lattice, &m.lattice)?;
    Ok(f.values
        .iter()
        .zip(&g.values)
        .zip(&m.leaf_weights)
        .map(|((a, b), w)| a * b * w)
        .sum())
}

pub fn norm(f: &StepFunction, m: &Measure) -> Result<f64> {
    Ok(inner(f, f, m)?.max(0.0).sqrt())
}

/// `sqrt(∫_Q f^2 dμ)` without building the restriction.
pub fn norm_on(f: &StepFunction, q: &CubeId, m: &Measure) -> f64 {
    let mut s = 0.0;
    m.lattice.for_each_leaf(q, |l| s += f.values[l] * f.values[l] * m.leaf_weights[l]);
    s.max(0.0).sqrt()
}

/// Dyadic maximal function: at each leaf, the largest average of `|f|`
/// over the ancestor chain (the leaf itself included).
pub fn dyadic_maximal(f: &StepFunction, m: &Measure) -> StepFunction {
    let abs_avgs = cube_averages(&f.abs(), m);
    let lat = m.lattice;
    let mut out = StepFunction::zero(lat);
    for l in 0..lat.num_leaves() {
        let mut c = lat.leaf_cube(l);
        let mut best = abs_avgs[lat.cube_index(&c)];
        while let Some(p) = lat.parent(&c) {
            best = best.max(abs_avgs[lat.cube_index(&p)]);
            c = p;
        }
        out.values[l] = best;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lat1(d: u32) -> Lattice {
        Lattice::new(1, d).unwrap()
    }

    #[test]
    fn mass_aggregates_leaves() {
        let lat = lat1(2);
        let m = Measure::uniform(lat);
        assert!((m.total() - 1.0).abs() < 1e-15);

        let zero = Measure::new(lat, vec![0.0; 4]).unwrap();
        for c in lat.all_cubes() {
            assert_eq!(zero.mass(&c), 0.0);
        }

        let m2 = Measure::new(lat, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m2.mass(&CubeId::new(1, vec![0])), 3.0);
        assert_eq!(m2.total(), 10.0);
    }

    #[test]
    fn averages_with_zero_mass_convention() {
        let lat = lat1(1);
        let m = Measure::uniform(lat);
        let f = StepFunction::new(lat, vec![1.0, 3.0]).unwrap();
        assert!((average(&f, &lat.root(), &m) - 2.0).abs() < 1e-15);

        let ones = StepFunction::constant(lat, 1.0);
        for c in lat.all_cubes() {
            assert!((average(&ones, &c, &m) - 1.0).abs() < 1e-15);
        }

        let m0 = Measure::new(lat, vec![1.0, 0.0]).unwrap();
        assert_eq!(average(&f, &CubeId::new(1, vec![1]), &m0), 0.0);
    }

    #[test]
    fn pairing_basics() {
        let lat = lat1(1);
        let m = Measure::uniform(lat);
        let f = StepFunction::new(lat, vec![1.0, -1.0]).unwrap();
        let g = StepFunction::new(lat, vec![1.0, 1.0]).unwrap();
        assert_eq!(inner(&f, &g, &m).unwrap(), 0.0);
        assert!((inner(&g, &g, &m).unwrap() - m.total()).abs() < 1e-15);
        assert!(inner(&f, &f, &m).unwrap() >= 0.0);
    }

    #[test]
    fn maximal_function_dominates() {
        let lat = lat1(1);
        let m = Measure::uniform(lat);
        let f = StepFunction::new(lat, vec![1.0, 0.0]).unwrap();
        let mf = dyadic_maximal(&f, &m);
        // Right leaf sees only the root average 1/2.
        assert!((mf.values[1] - 0.5).abs() < 1e-15);
        assert!((mf.values[0] - 1.0).abs() < 1e-15);

        let c = StepFunction::constant(lat, -3.0);
        let mc = dyadic_maximal(&c, &m);
        assert!(mc.values.iter().all(|v| (v - 3.0).abs() < 1e-15));

        for l in 0..lat.num_leaves() {
            if m.weight(l) > 0.0 {
                assert!(mf.values[l] + 1e-15 >= f.values[l].abs());
            }
        }
    }

    #[test]
    fn average_refines_with_split_weights() {
        // Refining the tree while splitting weights proportionally leaves
        // coarse averages unchanged.
        let coarse = lat1(1);
        let fine = lat1(2);
        let mc = Measure::new(coarse, vec![0.6, 0.4]).unwrap();
        let mf = Measure::new(fine, vec![0.3, 0.3, 0.2, 0.2]).unwrap();
        let fc = StepFunction::new(coarse, vec![2.0, -1.0]).unwrap();
        let ff = StepFunction::new(fine, vec![2.0, 2.0, -1.0, -1.0]).unwrap();
        let qc = CubeId::new(1, vec![0]);
        let qf = CubeId::new(1, vec![0]);
        assert!((average(&fc, &qc, &mc) - average(&ff, &qf, &mf)).abs() < 1e-14);
        assert!((average(&fc, &coarse.root(), &mc) - average(&ff, &fine.root(), &mf)).abs() < 1e-14);
    }
}
