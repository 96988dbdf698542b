//! Martingale calculus adapted to a single accretive test function `b`:
//! weighted expectations, differences, the telescoping decomposition, and
//! the square-function / dual square-function ratios.
//!
//! Adjoints are never hand-derived here: every operator is assembled as a
//! sum of rank-one terms and transposed structurally against the `L²(μ)`
//! pairing. The closed-form coefficient paths used in hot loops are checked
//! against that transpose in the tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{CubeId, Lattice};
use crate::measure::{cube_integrals, norm, Measure, StepFunction};

/// A test function together with its certified constants: `delta` is the
/// smallest `|⟨b⟩_Q|` over positive-mass cubes, `c_inf` the essential sup.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccretiveFunction {
    pub b: StepFunction,
    pub delta: f64,
    pub c_inf: f64,
}

/// Failure evidence when a candidate test function degenerates: the cubes
/// whose average vanishes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccretiveFailure {
    pub offending: Vec<CubeId>,
    pub c_inf: f64,
}

/// Scan every positive-mass cube for the average lower bound. Returns the
/// certified function or the list of offending cubes.
pub fn check_accretive(
    b: &StepFunction,
    m: &Measure,
) -> std::result::Result<AccretiveFunction, AccretiveFailure> {
    let lat = m.lattice;
    let ints = cube_integrals(b, m);
    let mut c_inf: f64 = 0.0;
    for l in 0..lat.num_leaves() {
        if m.weight(l) > 0.0 {
            c_inf = c_inf.max(b.values[l].abs());
        }
    }
    let mut delta = f64::INFINITY;
    let mut offending = Vec::new();
    for idx in 0..lat.num_cubes() {
        let mass = m.mass_by_index(idx);
        if mass == 0.0 {
            continue;
        }
        let avg = (ints[idx] / mass).abs();
        if avg == 0.0 {
            offending.push(lat.cube_from_index(idx));
        }
        delta = delta.min(avg);
    }
    if !offending.is_empty() || !delta.is_finite() {
        return Err(AccretiveFailure { offending, c_inf });
    }
    Ok(AccretiveFunction { b: b.clone(), delta, c_inf })
}

/// `E_Q f = (⟨f⟩_Q / ⟨b⟩_Q) · 1_Q b`; the zero function on massless cubes.
pub fn expectation(b: &StepFunction, m: &Measure, q: &CubeId, f: &StepFunction) -> StepFunction {
    let lat = m.lattice;
    let mut out = StepFunction::zero(lat);
    let mass = m.mass(q);
    if mass == 0.0 {
        return out;
    }
    let mut int_f = 0.0;
    let mut int_b = 0.0;
    lat.for_each_leaf(q, |l| {
        int_f += f.values[l] * m.weight(l);
        int_b += b.values[l] * m.weight(l);
    });
    let ratio = int_f / int_b;
    lat.for_each_leaf(q, |l| out.values[l] = ratio * b.values[l]);
    out
}

/// `Δ_Q f = Σ_{Q' ∈ ch Q} E_{Q'} f − E_Q f`, supported on `Q` and
/// integrating to zero against `μ`.
pub fn difference(
    b: &StepFunction,
    m: &Measure,
    q: &CubeId,
    f: &StepFunction,
) -> Result<StepFunction> {
    let lat = m.lattice;
    if q.g >= lat.depth {
        return Err(Error::LeafCube(q.clone()));
    }
    let mut out = StepFunction::zero(lat);
    for ch in lat.children(q)? {
        accumulate_expectation(b, m, &ch, f, 1.0, &mut out);
    }
    accumulate_expectation(b, m, q, f, -1.0, &mut out);
    Ok(out)
}

fn accumulate_expectation(
    b: &StepFunction,
    m: &Measure,
    q: &CubeId,
    f: &StepFunction,
    sign: f64,
    out: &mut StepFunction,
) {
    let lat = m.lattice;
    if m.mass(q) == 0.0 {
        return;
    }
    let mut int_f = 0.0;
    let mut int_b = 0.0;
    lat.for_each_leaf(q, |l| {
        int_f += f.values[l] * m.weight(l);
        int_b += b.values[l] * m.weight(l);
    });
    let ratio = sign * int_f / int_b;
    lat.for_each_leaf(q, |l| out.values[l] += ratio * b.values[l]);
}

// ---------------------------------------------------------------------------
// Rank-one assembly and structural pairing transposes.
// ---------------------------------------------------------------------------

/// `f ↦ out · (innᵀ f)` (plain, unweighted contraction on the input side).
#[derive(Debug, Clone)]
pub(crate) struct RankOne {
    pub out: Vec<f64>,
    pub inn: Vec<f64>,
}

/// A finite sum of rank-one terms: every expectation/difference operator in
/// the crate assembles into this shape.
#[derive(Debug, Clone)]
pub(crate) struct AssembledOp {
    pub terms: Vec<RankOne>,
    pub dim: usize,
}

impl AssembledOp {
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for t in &self.terms {
            let c: f64 = t.inn.iter().zip(f).map(|(a, b)| a * b).sum();
            if c != 0.0 {
                for (o, u) in out.iter_mut().zip(&t.out) {
                    *o += c * u;
                }
            }
        }
        out
    }

    /// Transpose against the pairing `⟨u, v⟩_w = Σ u v w`: each rank-one
    /// term `out·innᵀ` becomes `(inn/w)·(out·w)ᵀ`, with zero rows on
    /// weightless coordinates.
    pub fn transpose_weighted(&self, w: &[f64]) -> AssembledOp {
        let terms = self
            .terms
            .iter()
            .map(|t| RankOne {
                out: t
                    .inn
                    .iter()
                    .zip(w)
                    .map(|(v, &wl)| if wl > 0.0 { v / wl } else { 0.0 })
                    .collect(),
                inn: t.out.iter().zip(w).map(|(v, &wl)| v * wl).collect(),
            })
            .collect();
        AssembledOp { terms, dim: self.dim }
    }
}

/// The expectation operator on `Q` as a rank-one map.
pub(crate) fn expectation_op(b: &StepFunction, m: &Measure, q: &CubeId) -> AssembledOp {
    let lat = m.lattice;
    let dim = lat.num_leaves();
    let mass = m.mass(q);
    if mass == 0.0 {
        return AssembledOp { terms: vec![], dim };
    }
    let mut int_b = 0.0;
    lat.for_each_leaf(q, |l| int_b += b.values[l] * m.weight(l));
    let mut out = vec![0.0; dim];
    let mut inn = vec![0.0; dim];
    lat.for_each_leaf(q, |l| {
        out[l] = b.values[l] / int_b;
        inn[l] = m.weight(l);
    });
    AssembledOp { terms: vec![RankOne { out, inn }], dim }
}

/// The difference operator on `Q` as a sum of rank-one maps.
pub(crate) fn difference_op(b: &StepFunction, m: &Measure, q: &CubeId) -> Result<AssembledOp> {
    let lat = m.lattice;
    if q.g >= lat.depth {
        return Err(Error::LeafCube(q.clone()));
    }
    let mut terms = Vec::new();
    for ch in lat.children(q)? {
        terms.extend(expectation_op(b, m, &ch).terms);
    }
    for mut t in expectation_op(b, m, q).terms {
        for v in &mut t.out {
            *v = -*v;
        }
        terms.push(t);
    }
    Ok(AssembledOp { terms, dim: lat.num_leaves() })
}

/// `(Δ_Q)^* g`, computed as the structural pairing transpose of the
/// assembled difference operator.
pub fn difference_adjoint(
    b: &StepFunction,
    m: &Measure,
    q: &CubeId,
    g: &StepFunction,
) -> Result<StepFunction> {
    let op = difference_op(b, m, q)?.transpose_weighted(&m.leaf_weights);
    StepFunction::new(m.lattice, op.apply(&g.values))
}

// ---------------------------------------------------------------------------
// Fast per-cube norms from precomputed integrals.
// ---------------------------------------------------------------------------

/// Shared integral tables for one `(b, μ)` pair: `∫_Q b`, `∫_Q b²` per cube.
pub(crate) struct BTables {
    pub int_b: Vec<f64>,
    pub int_b2: Vec<f64>,
}

pub(crate) fn b_tables(b: &StepFunction, m: &Measure) -> BTables {
    BTables {
        int_b: cube_integrals(b, m),
        int_b2: cube_integrals(&b.mul_pointwise(b), m),
    }
}

/// `‖Δ_Q f‖²_μ` from integral tables; `int_f` is `∫ f dμ` per cube.
pub(crate) fn diff_norm_sq_from_tables(
    lat: &Lattice,
    m: &Measure,
    tb: &BTables,
    int_f: &[f64],
    q: &CubeId,
) -> f64 {
    let qi = lat.cube_index(q);
    let ratio_q = if m.mass_by_index(qi) > 0.0 { int_f[qi] / tb.int_b[qi] } else { 0.0 };
    let mut s = 0.0;
    for ch in lat.children(q).unwrap() {
        let ci = lat.cube_index(&ch);
        if m.mass_by_index(ci) == 0.0 {
            continue;
        }
        let coef = int_f[ci] / tb.int_b[ci] - ratio_q;
        s += coef * coef * tb.int_b2[ci];
    }
    s
}

/// Coefficients of `(Δ_Q)^* g` on the children of `Q`: the function equals
/// `Σ coef_{Q'} 1_{Q'}` on positive-weight leaves. `int_bg` is `∫ b g dμ`
/// per cube.
pub(crate) fn adjoint_coeffs_from_tables(
    lat: &Lattice,
    m: &Measure,
    tb: &BTables,
    int_bg: &[f64],
    q: &CubeId,
) -> Vec<(CubeId, f64)> {
    let qi = lat.cube_index(q);
    let ratio_q = if m.mass_by_index(qi) > 0.0 { int_bg[qi] / tb.int_b[qi] } else { 0.0 };
    let mut out = Vec::new();
    for ch in lat.children(q).unwrap() {
        let ci = lat.cube_index(&ch);
        if m.mass_by_index(ci) == 0.0 {
            continue;
        }
        out.push((ch, int_bg[ci] / tb.int_b[ci] - ratio_q));
    }
    out
}

/// `‖(Δ_Q)^* g‖²_μ` from integral tables.
pub(crate) fn adjoint_norm_sq_from_tables(
    lat: &Lattice,
    m: &Measure,
    tb: &BTables,
    int_bg: &[f64],
    q: &CubeId,
) -> f64 {
    adjoint_coeffs_from_tables(lat, m, tb, int_bg, q)
        .into_iter()
        .map(|(ch, c)| c * c * m.mass(&ch))
        .sum()
}

// ---------------------------------------------------------------------------
// Decomposition and ratios.
// ---------------------------------------------------------------------------

/// The full telescoping decomposition: one difference piece per non-leaf
/// cube plus the root expectation.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub pieces: Vec<(CubeId, StepFunction)>,
    pub root_piece: StepFunction,
}

impl Decomposition {
    /// Sum of all pieces; equals the input on positive-mass leaves.
    pub fn sum(&self) -> StepFunction {
        let mut acc = self.root_piece.clone();
        for (_, p) in &self.pieces {
            acc.add_assign(p);
        }
        acc
    }

    /// Largest relative reconstruction error over positive-mass leaves.
    pub fn reconstruction_error(&self, f: &StepFunction, m: &Measure) -> f64 {
        let s = self.sum();
        let diff = s.sub(f);
        let mut num = 0.0;
        let mut den = 0.0;
        for l in 0..m.lattice.num_leaves() {
            if m.weight(l) > 0.0 {
                num += diff.values[l] * diff.values[l] * m.weight(l);
                den += f.values[l] * f.values[l] * m.weight(l);
            }
        }
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }

    /// `[{cube, piece_norm}]`, optionally carrying the full piece vectors.
    pub fn to_json(&self, m: &Measure, full_vectors: bool) -> serde_json::Value {
        let mut items = Vec::new();
        for (c, p) in &self.pieces {
            let mut entry = serde_json::json!({
                "cube": c,
                "piece_norm": norm(p, m).unwrap_or(f64::NAN),
            });
            if full_vectors {
                entry["values"] = serde_json::json!(p.values);
            }
            items.push(entry);
        }
        let mut root = serde_json::json!({
            "cube": m.lattice.root(),
            "piece_norm": norm(&self.root_piece, m).unwrap_or(f64::NAN),
            "kind": "root_expectation",
        });
        if full_vectors {
            root["values"] = serde_json::json!(self.root_piece.values);
        }
        serde_json::json!({ "root": root, "differences": items })
    }
}

pub fn decompose(b: &StepFunction, m: &Measure, f: &StepFunction) -> Decomposition {
    let lat = m.lattice;
    let mut pieces = Vec::new();
    for g in 0..lat.depth {
        let off = lat.gen_offset(g);
        for k in 0..lat.cubes_at(g) {
            let q = lat.cube_from_index(off + k);
            pieces.push((q.clone(), difference(b, m, &q, f).unwrap()));
        }
    }
    Decomposition { pieces, root_piece: expectation(b, m, &lat.root(), f) }
}

/// `(Σ_Q ‖Δ_Q f‖² + ‖E_root f‖²) / ‖f‖²`.
pub fn square_fn_ratio(b: &StepFunction, m: &Measure, f: &StepFunction) -> Result<f64> {
    let nf = norm(f, m)?;
    if nf == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let lat = m.lattice;
    let tb = b_tables(b, m);
    let int_f = cube_integrals(f, m);
    let mut s = 0.0;
    for g in 0..lat.depth {
        let off = lat.gen_offset(g);
        for k in 0..lat.cubes_at(g) {
            let q = lat.cube_from_index(off + k);
            s += diff_norm_sq_from_tables(&lat, m, &tb, &int_f, &q);
        }
    }
    if m.total() > 0.0 {
        let ratio = int_f[0] / tb.int_b[0];
        s += ratio * ratio * tb.int_b2[0];
    }
    Ok(s / (nf * nf))
}

/// `Σ_Q ‖(Δ_Q)^* f‖² / ‖f‖²`.
pub fn dual_square_fn_ratio(b: &StepFunction, m: &Measure, f: &StepFunction) -> Result<f64> {
    let nf = norm(f, m)?;
    if nf == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let lat = m.lattice;
    let tb = b_tables(b, m);
    let int_bf = cube_integrals(&b.mul_pointwise(f), m);
    let mut s = 0.0;
    for g in 0..lat.depth {
        let off = lat.gen_offset(g);
        for k in 0..lat.cubes_at(g) {
            let q = lat.cube_from_index(off + k);
            s += adjoint_norm_sq_from_tables(&lat, m, &tb, &int_bf, &q);
        }
    }
    Ok(s / (nf * nf))
}

/// `‖ Σ_{ℓ(Q) ≤ 2^-d, Q non-leaf} Δ_Q f ‖_μ` — the tail of the
/// decomposition from generation `d` downward.
pub fn truncated_sum_norm(b: &StepFunction, m: &Measure, f: &StepFunction, d: u32) -> f64 {
    let lat = m.lattice;
    let mut acc = StepFunction::zero(lat);
    for g in d..lat.depth {
        let off = lat.gen_offset(g);
        for k in 0..lat.cubes_at(g) {
            let q = lat.cube_from_index(off + k);
            for ch in lat.children(&q).unwrap() {
                accumulate_expectation(b, m, &ch, f, 1.0, &mut acc);
            }
            accumulate_expectation(b, m, &q, f, -1.0, &mut acc);
        }
    }
    norm(&acc, m).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{average, inner};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn lat1(d: u32) -> Lattice {
        Lattice::new(1, d).unwrap()
    }

    fn random_f(lat: Lattice, rng: &mut ChaCha8Rng) -> StepFunction {
        StepFunction::new(lat, (0..lat.num_leaves()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn accretivity_constants() {
        let lat = lat1(1);
        let m = Measure::uniform(lat);

        let ones = StepFunction::constant(lat, 1.0);
        let a = check_accretive(&ones, &m).unwrap();
        assert_eq!(a.delta, 1.0);
        assert_eq!(a.c_inf, 1.0);

        let cancel = StepFunction::new(lat, vec![1.0, -1.0]).unwrap();
        let fail = check_accretive(&cancel, &m).unwrap_err();
        assert_eq!(fail.offending, vec![lat.root()]);

        let b = StepFunction::new(lat, vec![2.0, 1.0]).unwrap();
        let a = check_accretive(&b, &m).unwrap();
        assert!((a.delta - 1.0).abs() < 1e-15);
        assert!((a.c_inf - 2.0).abs() < 1e-15);
    }

    #[test]
    fn expectation_reproduces_b_and_kills_zero() {
        let lat = lat1(1);
        let m = Measure::uniform(lat);
        let b = StepFunction::new(lat, vec![2.0, 1.0]).unwrap();

        let eb = expectation(&b, &m, &lat.root(), &b);
        for l in 0..2 {
            assert!((eb.values[l] - b.values[l]).abs() < 1e-14);
        }

        let z = expectation(&b, &m, &lat.root(), &StepFunction::zero(lat));
        assert!(z.values.iter().all(|v| *v == 0.0));

        let f = StepFunction::new(lat, vec![1.0, 3.0]).unwrap();
        let e = expectation(&b, &m, &lat.root(), &f);
        // averages: f -> 2, b -> 3/2, so the ratio is 4/3.
        for l in 0..2 {
            assert!((e.values[l] - 4.0 / 3.0 * b.values[l]).abs() < 1e-14);
        }
    }

    #[test]
    fn difference_values_and_mean_zero() {
        let lat = lat1(1);
        let m = Measure::uniform(lat);
        let ones = StepFunction::constant(lat, 1.0);
        let f = StepFunction::new(lat, vec![1.0, 3.0]).unwrap();
        let d = difference(&ones, &m, &lat.root(), &f).unwrap();
        assert!((d.values[0] + 1.0).abs() < 1e-14);
        assert!((d.values[1] - 1.0).abs() < 1e-14);

        let b = StepFunction::new(lat, vec![2.0, 1.0]).unwrap();
        let db = difference(&b, &m, &lat.root(), &b).unwrap();
        assert!(db.values.iter().all(|v| v.abs() < 1e-14));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lat3 = lat1(3);
        let m3 = Measure::uniform(lat3);
        let b3 = StepFunction::new(
            lat3,
            (0..8).map(|_| rng.gen_range(0.5..2.0)).collect(),
        )
        .unwrap();
        for q in lat3.all_cubes() {
            if q.g == lat3.depth {
                assert!(difference(&b3, &m3, &q, &b3).is_err());
                continue;
            }
            let f = random_f(lat3, &mut rng);
            let d = difference(&b3, &m3, &q, &f).unwrap();
            let integral = inner(&d, &StepFunction::constant(lat3, 1.0), &m3).unwrap();
            assert!(integral.abs() < 1e-12);
            // Supported on q.
            for l in 0..lat3.num_leaves() {
                if !lat3.contains(&q, &lat3.leaf_cube(l)) {
                    assert_eq!(d.values[l], 0.0);
                }
            }
        }
    }

    #[test]
    fn projections_square_to_themselves() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lat = lat1(3);
        let m = Measure::new(lat, (0..8).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap();
        let b = StepFunction::new(lat, (0..8).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap();
        let f = random_f(lat, &mut rng);
        for q in lat.all_cubes() {
            let e = expectation(&b, &m, &q, &f);
            let ee = expectation(&b, &m, &q, &e);
            let err = norm(&ee.sub(&e), &m).unwrap();
            assert!(err <= 1e-10 * (1.0 + norm(&e, &m).unwrap()));
            if q.g < lat.depth {
                let d = difference(&b, &m, &q, &f).unwrap();
                let dd = difference(&b, &m, &q, &d).unwrap();
                let err = norm(&dd.sub(&d), &m).unwrap();
                assert!(err <= 1e-10 * (1.0 + norm(&d, &m).unwrap()));
            }
        }
    }

    #[test]
    fn bounded_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lat = lat1(3);
        let m = Measure::new(lat, (0..8).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap();
        let b = StepFunction::new(lat, (0..8).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap();
        let acc = check_accretive(&b, &m).unwrap();
        for _ in 0..20 {
            let f = random_f(lat, &mut rng);
            for q in lat.all_cubes() {
                let e = expectation(&b, &m, &q, &f);
                let bound = acc.c_inf / acc.delta * crate::measure::norm_on(&f, &q, &m);
                assert!(norm(&e, &m).unwrap() <= bound * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn decompose_reconstructs() {
        let lat = lat1(2);
        let m = Measure::uniform(lat);
        let b = StepFunction::new(lat, vec![2.0, 1.0, 1.0, 2.0]).unwrap();

        // f = b collapses to the root piece alone.
        let dec = decompose(&b, &m, &b);
        for (_, p) in &dec.pieces {
            assert!(norm(p, &m).unwrap() < 1e-14);
        }
        assert!(dec.reconstruction_error(&b, &m) < 1e-14);

        let f = StepFunction::new(lat, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let dec = decompose(&b, &m, &f);
        assert!(dec.reconstruction_error(&f, &m) < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let lat4 = lat1(4);
        for _ in 0..25 {
            let m4 =
                Measure::new(lat4, (0..16).map(|_| rng.gen_range(0.05..1.0)).collect()).unwrap();
            let b4 = StepFunction::new(lat4, (0..16).map(|_| rng.gen_range(0.4..2.5)).collect())
                .unwrap();
            let f4 = random_f(lat4, &mut rng);
            let dec = decompose(&b4, &m4, &f4);
            assert!(dec.reconstruction_error(&f4, &m4) <= 1e-10);
        }
    }

    #[test]
    fn unit_b_recovers_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lat = lat1(4);
        let m = Measure::new(lat, (0..16).map(|_| rng.gen_range(0.05..1.0)).collect()).unwrap();
        let ones = StepFunction::constant(lat, 1.0);
        for _ in 0..10 {
            let f = random_f(lat, &mut rng);
            let r = square_fn_ratio(&ones, &m, &f).unwrap();
            assert!((r - 1.0).abs() < 1e-10, "Parseval ratio {r}");
            let d = dual_square_fn_ratio(&ones, &m, &f).unwrap();
            assert!(d <= 1.0 + 1e-10);
        }
    }

    #[test]
    fn ratio_for_f_equal_b_comes_from_root_term() {
        let lat = lat1(2);
        let m = Measure::uniform(lat);
        let b = StepFunction::new(lat, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let r = square_fn_ratio(&b, &m, &b).unwrap();
        // Differences vanish on f = b, so only ‖E_root b‖² = ‖b‖² remains.
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truncated_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lat = lat1(3);
        let m = Measure::new(lat, (0..8).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap();
        let b = StepFunction::new(lat, (0..8).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap();
        let acc = check_accretive(&b, &m).unwrap();

        assert!(truncated_sum_norm(&b, &m, &b, 0) < 1e-12);
        for _ in 0..10 {
            let f = random_f(lat, &mut rng);
            let nf = norm(&f, &m).unwrap();
            assert_eq!(truncated_sum_norm(&b, &m, &f, lat.depth), 0.0);
            for d in 0..=lat.depth {
                let t = truncated_sum_norm(&b, &m, &f, d);
                assert!(t <= (1.0 + acc.c_inf / acc.delta) * nf * (1.0 + 1e-12));
            }
            // Full truncation telescopes to f − E_root f on positive mass.
            let full = truncated_sum_norm(&b, &m, &f, 0);
            let resid = f.sub(&expectation(&b, &m, &lat.root(), &f));
            assert!((full - norm(&resid, &m).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_is_the_structural_transpose() {
        // The coefficient path must coincide with the rank-one transpose.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let lat = Lattice::new(2, 2).unwrap();
        let leaves = lat.num_leaves();
        let m = Measure::new(lat, (0..leaves).map(|_| rng.gen_range(0.05..1.0)).collect()).unwrap();
        let b =
            StepFunction::new(lat, (0..leaves).map(|_| rng.gen_range(0.4..2.0)).collect()).unwrap();
        let tb = b_tables(&b, &m);
        for q in lat.all_cubes() {
            if q.g == lat.depth {
                continue;
            }
            let g = random_f(lat, &mut rng);
            let adj = difference_adjoint(&b, &m, &q, &g).unwrap();
            // Defining identity ⟨Δ f, g⟩ = ⟨f, Δ* g⟩.
            for _ in 0..3 {
                let f = random_f(lat, &mut rng);
                let lhs = inner(&difference(&b, &m, &q, &f).unwrap(), &g, &m).unwrap();
                let rhs = inner(&f, &adj, &m).unwrap();
                assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
            }
            // Coefficient form agrees in L²(μ).
            let int_bg = cube_integrals(&b.mul_pointwise(&g), &m);
            let mut from_coeffs = StepFunction::zero(lat);
            for (ch, c) in adjoint_coeffs_from_tables(&lat, &m, &tb, &int_bg, &q) {
                lat.for_each_leaf(&ch, |l| from_coeffs.values[l] = c);
            }
            let diff = from_coeffs.sub(&adj);
            assert!(norm(&diff, &m).unwrap() < 1e-12);
            let nsq: f64 = adjoint_norm_sq_from_tables(&lat, &m, &tb, &int_bg, &q);
            let direct = inner(&adj, &adj, &m).unwrap();
            assert!((nsq - direct).abs() < 1e-12 * (1.0 + direct));
        }
    }

    #[test]
    fn orthogonality_to_constants_scaled() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let lat = lat1(4);
        let m = Measure::new(lat, (0..16).map(|_| rng.gen_range(0.02..1.0)).collect()).unwrap();
        let b = StepFunction::new(lat, (0..16).map(|_| rng.gen_range(0.3..2.0)).collect()).unwrap();
        for _ in 0..5 {
            let f = random_f(lat, &mut rng);
            let nf = norm(&f, &m).unwrap();
            for q in lat.all_cubes() {
                if q.g == lat.depth {
                    continue;
                }
                let d = difference(&b, &m, &q, &f).unwrap();
                let integral = inner(&d, &StepFunction::constant(lat, 1.0), &m).unwrap();
                assert!(integral.abs() <= 1e-12 * nf * m.mass(&q).sqrt() + 1e-15);
            }
        }
    }

    #[test]
    fn average_convention_on_massless_cube() {
        let lat = lat1(1);
        let m = Measure::new(lat, vec![1.0, 0.0]).unwrap();
        let b = StepFunction::new(lat, vec![1.0, 5.0]).unwrap();
        let f = StepFunction::new(lat, vec![2.0, 7.0]).unwrap();
        let q = CubeId::new(1, vec![1]);
        assert_eq!(average(&f, &q, &m), 0.0);
        let e = expectation(&b, &m, &q, &f);
        assert!(e.values.iter().all(|v| *v == 0.0));
    }
}
