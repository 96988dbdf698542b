//! Sparse per-cube test systems: verification of the defining conditions,
//! the stopping-time construction with its mass-decay report, the partition
//! into changed/unchanged regions, the system-adapted expectations and
//! differences, the explicit adjoint, projection defects, and the change
//! sequence `β`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::carleson::{sparsity_check_indices, CubeSequence};
use crate::error::{Error, Result};
use crate::lattice::{CubeId, Lattice};
use crate::martingale::{AssembledOp, Decomposition, RankOne};
use crate::measure::{cube_integrals, norm, Measure, StepFunction};

/// Value tolerance used when deciding whether `b_Q` changed from its
/// parent's restriction.
pub const CHANGE_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub enum SystemStorage {
    /// One global function: `b_Q = b·1_Q` for every cube.
    Constant(StepFunction),
    /// Per-cube values on the cube's own leaves (leaf-enumeration order).
    Table(Vec<Vec<f64>>),
}

/// A family `{b_Q}` of test functions, one per cube, with declared
/// constants: `|∫_Q b_Q dμ| ≥ delta·μ(Q)` and `sup|b_Q| ≤ c`.
#[derive(Debug, Clone)]
pub struct AccretiveSystem {
    pub lattice: Lattice,
    pub storage: SystemStorage,
    pub delta: f64,
    pub c: f64,
    /// For constructed systems: per cube, the index of the anchor cube
    /// whose test function it inherits.
    pub provenance: Option<Vec<usize>>,
}

impl AccretiveSystem {
    pub fn constant(b: StepFunction, delta: f64, c: f64) -> Self {
        AccretiveSystem { lattice: b.lattice, storage: SystemStorage::Constant(b), delta, c, provenance: None }
    }

    pub fn from_table(
        lattice: Lattice,
        table: Vec<Vec<f64>>,
        delta: f64,
        c: f64,
    ) -> Result<Self> {
        if table.len() != lattice.num_cubes() {
            return Err(Error::ShapeMismatch(format!(
                "system table has {} entries, lattice has {} cubes",
                table.len(),
                lattice.num_cubes()
            )));
        }
        for (idx, vals) in table.iter().enumerate() {
            let q = lattice.cube_from_index(idx);
            let expect = 1usize << (lattice.n * (lattice.depth - q.g));
            if vals.len() != expect {
                return Err(Error::ShapeMismatch(format!(
                    "cube {q:?} carries {} values, expected {expect}",
                    vals.len()
                )));
            }
        }
        Ok(AccretiveSystem { lattice, storage: SystemStorage::Table(table), delta, c, provenance: None })
    }

    /// Value of `b_Q` at a leaf under `Q`.
    pub fn b_value(&self, q: &CubeId, leaf: usize) -> f64 {
        match &self.storage {
            SystemStorage::Constant(b) => b.values[leaf],
            SystemStorage::Table(t) => {
                t[self.lattice.cube_index(q)][self.lattice.leaf_rank_within(q, leaf)]
            }
        }
    }

    /// `b_Q` as a dense step function (zero outside `Q`).
    pub fn b_on(&self, q: &CubeId) -> StepFunction {
        let lat = self.lattice;
        match &self.storage {
            SystemStorage::Constant(b) => b.restrict(q),
            SystemStorage::Table(t) => {
                let vals = &t[lat.cube_index(q)];
                let mut out = StepFunction::zero(lat);
                let mut pos = 0usize;
                lat.for_each_leaf(q, |l| {
                    out.values[l] = vals[pos];
                    pos += 1;
                });
                out
            }
        }
    }

    /// `∫_Q b_Q dμ` for every cube (each cube integrating its own function).
    pub fn own_integrals(&self, m: &Measure) -> Vec<f64> {
        match &self.storage {
            SystemStorage::Constant(b) => cube_integrals(b, m),
            SystemStorage::Table(t) => {
                let lat = self.lattice;
                let mut out = vec![0.0; lat.num_cubes()];
                for (idx, vals) in t.iter().enumerate() {
                    let q = lat.cube_from_index(idx);
                    let mut s = 0.0;
                    let mut pos = 0usize;
                    lat.for_each_leaf(&q, |l| {
                        s += vals[pos] * m.weight(l);
                        pos += 1;
                    });
                    out[idx] = s;
                }
                out
            }
        }
    }

    /// `∫_Q b_Q·g dμ` for every cube.
    pub fn own_g_integrals(&self, m: &Measure, g: &StepFunction) -> Vec<f64> {
        match &self.storage {
            SystemStorage::Constant(b) => cube_integrals(&b.mul_pointwise(g), m),
            SystemStorage::Table(t) => {
                let lat = self.lattice;
                let mut out = vec![0.0; lat.num_cubes()];
                for (idx, vals) in t.iter().enumerate() {
                    let q = lat.cube_from_index(idx);
                    let mut s = 0.0;
                    let mut pos = 0usize;
                    lat.for_each_leaf(&q, |l| {
                        s += vals[pos] * g.values[l] * m.weight(l);
                        pos += 1;
                    });
                    out[idx] = s;
                }
                out
            }
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let b = match &self.storage {
            SystemStorage::Constant(f) => serde_json::json!({
                "mode": "constant",
                "values": f.values,
            }),
            SystemStorage::Table(t) => {
                let entries: Vec<serde_json::Value> = t
                    .iter()
                    .enumerate()
                    .map(|(idx, vals)| {
                        serde_json::json!({
                            "cube": self.lattice.cube_from_index(idx),
                            "values": vals,
                        })
                    })
                    .collect();
                serde_json::json!({ "mode": "table", "entries": entries })
            }
        };
        let mut v = serde_json::json!({ "delta": self.delta, "c": self.c, "b": b });
        if let Some(p) = &self.provenance {
            v["provenance"] = serde_json::json!(p
                .iter()
                .enumerate()
                .map(|(q, a)| serde_json::json!({
                    "cube": self.lattice.cube_from_index(q),
                    "anchor": self.lattice.cube_from_index(*a),
                }))
                .collect::<Vec<_>>());
        }
        v
    }

    pub fn from_json(lattice: Lattice, v: &serde_json::Value) -> Result<Self> {
        let bad = |s: &str| Error::InvalidData(format!("system json: {s}"));
        let delta = v["delta"].as_f64().ok_or_else(|| bad("missing delta"))?;
        let c = v["c"].as_f64().ok_or_else(|| bad("missing c"))?;
        let b = &v["b"];
        let mode = b["mode"].as_str().ok_or_else(|| bad("missing b.mode"))?;
        let mut sys = match mode {
            "constant" => {
                let values: Vec<f64> =
                    serde_json::from_value(b["values"].clone()).map_err(|e| bad(&e.to_string()))?;
                AccretiveSystem::constant(StepFunction::new(lattice, values)?, delta, c)
            }
            "table" => {
                let entries = b["entries"].as_array().ok_or_else(|| bad("missing b.entries"))?;
                let mut table = vec![Vec::new(); lattice.num_cubes()];
                for e in entries {
                    let cube: CubeId = serde_json::from_value(e["cube"].clone())
                        .map_err(|e| bad(&e.to_string()))?;
                    lattice.require_valid(&cube)?;
                    let vals: Vec<f64> = serde_json::from_value(e["values"].clone())
                        .map_err(|e| bad(&e.to_string()))?;
                    table[lattice.cube_index(&cube)] = vals;
                }
                AccretiveSystem::from_table(lattice, table, delta, c)?
            }
            other => return Err(bad(&format!("unknown mode {other}"))),
        };
        if let Some(p) = v.get("provenance").and_then(|p| p.as_array()) {
            let mut anchors = vec![0usize; lattice.num_cubes()];
            for e in p {
                let cube: CubeId =
                    serde_json::from_value(e["cube"].clone()).map_err(|e| bad(&e.to_string()))?;
                let anchor: CubeId =
                    serde_json::from_value(e["anchor"].clone()).map_err(|e| bad(&e.to_string()))?;
                anchors[lattice.cube_index(&cube)] = lattice.cube_index(&anchor);
            }
            sys.provenance = Some(anchors);
        }
        Ok(sys)
    }
}

// ---------------------------------------------------------------------------
// Verification.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemReport {
    pub delta_achieved: f64,
    pub c_achieved: f64,
    /// Change set, as cube indices (root excluded by the clamped-parent
    /// convention).
    pub s_b: Vec<usize>,
    /// Packing constant of the change set against the system's measure.
    pub lambda: f64,
    pub violations: Vec<String>,
    /// When provenance is present: whether the value-detected change set is
    /// contained in the structurally recorded one.
    pub provenance_consistent: Option<bool>,
    pub pass: bool,
}

/// Check conditions (i)-(iii) over all cubes, extract the change set and
/// its packing constant.
pub fn verify_system(sys: &AccretiveSystem, m: &Measure) -> SystemReport {
    let lat = sys.lattice;
    let own = sys.own_integrals(m);
    let mut violations = Vec::new();

    let mut c_achieved: f64 = 0.0;
    let mut delta_achieved = f64::INFINITY;
    for idx in 0..lat.num_cubes() {
        let q = lat.cube_from_index(idx);
        let mass = m.mass_by_index(idx);
        if mass == 0.0 {
            continue;
        }
        let mut sup: f64 = 0.0;
        lat.for_each_leaf(&q, |l| {
            if m.weight(l) > 0.0 {
                sup = sup.max(sys.b_value(&q, l).abs());
            }
        });
        c_achieved = c_achieved.max(sup);
        if sup > sys.c * (1.0 + 1e-9) {
            violations.push(format!("sup bound violated on {q:?}: {sup} > {}", sys.c));
        }
        let avg = (own[idx] / mass).abs();
        delta_achieved = delta_achieved.min(avg);
        if avg < sys.delta * (1.0 - 1e-9) {
            violations.push(format!("average floor violated on {q:?}: {avg} < {}", sys.delta));
        }
    }
    if !delta_achieved.is_finite() {
        delta_achieved = 0.0;
        violations.push("measure has no positive-mass cubes".into());
    }

    let s_b = change_set(sys);
    let lambda = sparsity_check_indices(s_b.iter().copied(), m);
    if !lambda.is_finite() {
        violations.push("change set is not sparse: infinite packing constant".into());
    }

    let provenance_consistent = sys.provenance.as_ref().map(|anchors| {
        s_b.iter().all(|&q| anchors[q] == q)
    });

    let pass = violations.is_empty() && delta_achieved > 0.0;
    SystemReport { delta_achieved, c_achieved, s_b, lambda, violations, provenance_consistent, pass }
}

/// Cubes whose function differs from the parent's restriction, compared
/// value-by-value with tolerance `CHANGE_TOL`. The root never qualifies:
/// with the clamped parent it trivially equals its own restriction.
pub fn change_set(sys: &AccretiveSystem) -> Vec<usize> {
    let lat = sys.lattice;
    if matches!(sys.storage, SystemStorage::Constant(_)) {
        return Vec::new();
    }
    let mut out = Vec::new();
    for idx in 1..lat.num_cubes() {
        let q = lat.cube_from_index(idx);
        let p = lat.parent(&q).unwrap();
        let mut changed = false;
        lat.for_each_leaf(&q, |l| {
            if changed {
                return;
            }
            let a = sys.b_value(&q, l);
            let b = sys.b_value(&p, l);
            if (a - b).abs() > CHANGE_TOL * (1.0f64).max(a.abs()).max(b.abs()) {
                changed = true;
            }
        });
        if changed {
            out.push(idx);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Stopping-time construction.
// ---------------------------------------------------------------------------

/// Supplies a fresh test function when the construction opens a new
/// stopping cube.
pub trait TestFunctionSource {
    /// Must return a function with `|⟨·⟩_q^μ| ≥ delta` and ess-sup `≤ c`
    /// whenever `μ(q) > 0`.
    fn make(&mut self, q: &CubeId, m: &Measure) -> StepFunction;
}

/// Restriction of one fixed function; useful when no stops are expected.
pub struct ConstantSource(pub StepFunction);

impl TestFunctionSource for ConstantSource {
    fn make(&mut self, q: &CubeId, _m: &Measure) -> StepFunction {
        self.0.restrict(q)
    }
}

/// Deterministic randomized source: mean-pinned noise with the mean drawn
/// in `[1.05δ, max(1.05δ, 0.85c)]` and amplitude capped so values stay in
/// `[-c, c]` while the cube average lands exactly on the mean.
pub struct SeededSource {
    pub seed: u64,
    pub delta: f64,
    pub c: f64,
}

impl TestFunctionSource for SeededSource {
    fn make(&mut self, q: &CubeId, m: &Measure) -> StepFunction {
        use rand::prelude::*;
        let lat = m.lattice;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
            self.seed ^ (lat.cube_index(q) as u64).wrapping_mul(0x9e3779b97f4a7c15),
        );
        let lo = 1.05 * self.delta;
        let hi = (0.85 * self.c).max(lo);
        let mean = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };

        let leaves = lat.leaves_of(q);
        let noise: Vec<f64> = leaves.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mass = m.mass(q);
        let mut out = StepFunction::zero(lat);
        if mass == 0.0 {
            for &l in &leaves {
                out.values[l] = sign * mean;
            }
            return out;
        }
        let avg: f64 =
            leaves.iter().zip(&noise).map(|(&l, e)| e * m.weight(l)).sum::<f64>() / mass;
        let centered: Vec<f64> = noise.iter().map(|e| e - avg).collect();
        let max_abs = centered.iter().fold(0.0f64, |a, e| a.max(e.abs()));
        let rho = rng.gen_range(0.3..0.95);
        let amp = if max_abs > 0.0 { rho * (self.c - mean) / max_abs } else { 0.0 };
        for (&l, e) in leaves.iter().zip(&centered) {
            out.values[l] = sign * (mean + amp * e);
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StopRow {
    pub cube: CubeId,
    pub level: u32,
    /// Mass of the next level of stops inside this cube, over its own mass.
    pub child_mass_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoppingReport {
    pub tau: f64,
    pub rows: Vec<StopRow>,
    pub max_ratio: f64,
    pub num_stops: usize,
}

/// Run the stopping-time construction: descend from the root, open a new
/// test function on every maximal cube whose average against the current
/// one drops below `delta²`, and assign to each cube the function of its
/// closest stopping ancestor.
///
/// Every one-generation mass ratio in the report obeys
/// `ratio ≤ (c−δ)/(c−δ²)`; the emitted system satisfies the average floor
/// with constant `delta²`.
pub fn stopping_construction<S: TestFunctionSource>(
    source: &mut S,
    m: &Measure,
    delta: f64,
    c: f64,
) -> Result<(AccretiveSystem, StoppingReport)> {
    if !(delta < 1.0 && 1.0 < c) {
        return Err(Error::InfeasibleParams(format!("need delta < 1 < c, got {delta}, {c}")));
    }
    let lat = m.lattice;
    let root = lat.root();
    let b_root = source.make(&root, m);
    validate_top(&b_root, m, &root, delta, c)?;

    let threshold = delta * delta;
    let mut anchor_fn: HashMap<usize, StepFunction> = HashMap::new();
    let mut is_stop = vec![false; lat.num_cubes()];
    let mut level = vec![0u32; lat.num_cubes()];
    let mut rows = Vec::new();

    // (anchor cube index, its test function's per-cube integrals, level)
    let mut queue: Vec<(usize, u32)> = vec![(0, 0)];
    anchor_fn.insert(0, b_root);

    while let Some((top_idx, lvl)) = queue.pop() {
        let top = lat.cube_from_index(top_idx);
        let ints = cube_integrals(&anchor_fn[&top_idx], m);
        let mut next_mass = 0.0;
        let mut stack: Vec<CubeId> = lat.children(&top).unwrap_or_default();
        while let Some(q) = stack.pop() {
            let qi = lat.cube_index(&q);
            let mass = m.mass_by_index(qi);
            if mass == 0.0 {
                continue;
            }
            if ints[qi].abs() < threshold * mass {
                // Maximal stop: open a fresh function, recurse later.
                is_stop[qi] = true;
                level[qi] = lvl + 1;
                next_mass += mass;
                let fresh = source.make(&q, m);
                validate_top(&fresh, m, &q, delta, c)?;
                anchor_fn.insert(qi, fresh);
                queue.push((qi, lvl + 1));
            } else if q.g < lat.depth {
                stack.extend(lat.children(&q).unwrap());
            }
        }
        let top_mass = m.mass_by_index(top_idx);
        rows.push(StopRow {
            cube: top,
            level: lvl,
            child_mass_ratio: if top_mass > 0.0 { next_mass / top_mass } else { 0.0 },
        });
    }

    // Anchor assignment, top-down: a cube inherits its parent's anchor
    // unless it is itself a stop.
    let mut anchors = vec![0usize; lat.num_cubes()];
    for idx in 1..lat.num_cubes() {
        let q = lat.cube_from_index(idx);
        let p = lat.parent(&q).unwrap();
        anchors[idx] = if is_stop[idx] { idx } else { anchors[lat.cube_index(&p)] };
    }

    let mut table = vec![Vec::new(); lat.num_cubes()];
    for idx in 0..lat.num_cubes() {
        let q = lat.cube_from_index(idx);
        let anchor = &anchor_fn[&anchors[idx]];
        let mut vals = Vec::with_capacity(1usize << (lat.n * (lat.depth - q.g)));
        lat.for_each_leaf(&q, |l| vals.push(anchor.values[l]));
        table[idx] = vals;
    }

    let mut sys = AccretiveSystem::from_table(lat, table, threshold, c)?;
    sys.provenance = Some(anchors);
    let tau = (c - delta) / (c - delta * delta);
    let max_ratio = rows.iter().fold(0.0f64, |a, r| a.max(r.child_mass_ratio));
    let num_stops = is_stop.iter().filter(|s| **s).count();
    Ok((sys, StoppingReport { tau, rows, max_ratio, num_stops }))
}

fn validate_top(b: &StepFunction, m: &Measure, q: &CubeId, delta: f64, c: f64) -> Result<()> {
    let mass = m.mass(q);
    if mass == 0.0 {
        return Ok(());
    }
    let mut int = 0.0;
    let mut sup: f64 = 0.0;
    m.lattice.for_each_leaf(q, |l| {
        int += b.values[l] * m.weight(l);
        if m.weight(l) > 0.0 {
            sup = sup.max(b.values[l].abs());
        }
    });
    if (int / mass).abs() < delta * (1.0 - 1e-12) {
        return Err(Error::Precondition(format!(
            "test function on {q:?} has average {} below {delta}",
            int / mass
        )));
    }
    if sup > c * (1.0 + 1e-12) {
        return Err(Error::Precondition(format!(
            "test function on {q:?} has sup {sup} above {c}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Partition and the glued global function.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Partition {
    /// For each cube, the minimal change-set cube containing it (index),
    /// when one exists.
    pub p_q: Vec<Option<usize>>,
}

impl Partition {
    pub fn in_changed_region(&self, cube_idx: usize) -> bool {
        self.p_q[cube_idx].is_some()
    }
}

/// Split the tree by the change set: cubes inside some changed cube (with
/// their minimal container) versus the rest. Works on any cube set, so
/// synthetic sets (including the root) can be explored directly.
pub fn partition(lattice: &Lattice, s_b: &[usize]) -> Partition {
    let mut is_s = vec![false; lattice.num_cubes()];
    for &i in s_b {
        is_s[i] = true;
    }
    let mut p_q = vec![None; lattice.num_cubes()];
    for idx in 0..lattice.num_cubes() {
        let q = lattice.cube_from_index(idx);
        p_q[idx] = if is_s[idx] {
            Some(idx)
        } else if let Some(p) = lattice.parent(&q) {
            p_q[lattice.cube_index(&p)]
        } else {
            None
        };
    }
    Partition { p_q }
}

/// Glue the unchanged-region functions into one global `b`: zero wherever
/// every containing cube lies in the changed region. Errors when two
/// unchanged cubes disagree at a leaf, which indicates a corrupted system.
pub fn global_b(sys: &AccretiveSystem, part: &Partition) -> Result<StepFunction> {
    let lat = sys.lattice;
    let mut out = StepFunction::zero(lat);
    for l in 0..lat.num_leaves() {
        let mut val: Option<f64> = None;
        let mut c = lat.leaf_cube(l);
        loop {
            let idx = lat.cube_index(&c);
            if !part.in_changed_region(idx) {
                let v = sys.b_value(&c, l);
                match val {
                    None => val = Some(v),
                    Some(prev) => {
                        if (prev - v).abs() > CHANGE_TOL * (1.0f64).max(prev.abs()).max(v.abs()) {
                            return Err(Error::ConsistencyViolation {
                                leaf: l,
                                detail: format!("values {prev} vs {v} on the unchanged chain"),
                            });
                        }
                    }
                }
            }
            match lat.parent(&c) {
                Some(p) => c = p,
                None => break,
            }
        }
        out.values[l] = val.unwrap_or(0.0);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// System-adapted expectations, differences, adjoints, defects.
// ---------------------------------------------------------------------------

pub fn sys_expectation(
    sys: &AccretiveSystem,
    m: &Measure,
    q: &CubeId,
    f: &StepFunction,
) -> StepFunction {
    let lat = m.lattice;
    let mass = m.mass(q);
    if mass == 0.0 {
        return StepFunction::zero(lat);
    }
    let mut int_f = 0.0;
    let mut int_b = 0.0;
    lat.for_each_leaf(q, |l| {
        int_f += f.values[l] * m.weight(l);
        int_b += sys.b_value(q, l) * m.weight(l);
    });
    let ratio = int_f / int_b;
    let mut out = StepFunction::zero(lat);
    lat.for_each_leaf(q, |l| out.values[l] = ratio * sys.b_value(q, l));
    out
}

pub fn sys_difference(
    sys: &AccretiveSystem,
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
        let e = sys_expectation(sys, m, &ch, f);
        out.add_assign(&e);
    }
    let e = sys_expectation(sys, m, q, f);
    Ok(out.sub(&e))
}

pub(crate) fn sys_expectation_op(sys: &AccretiveSystem, m: &Measure, q: &CubeId) -> AssembledOp {
    let lat = m.lattice;
    let dim = lat.num_leaves();
    let mass = m.mass(q);
    if mass == 0.0 {
        return AssembledOp { terms: vec![], dim };
    }
    let mut int_b = 0.0;
    lat.for_each_leaf(q, |l| int_b += sys.b_value(q, l) * m.weight(l));
    let mut out = vec![0.0; dim];
    let mut inn = vec![0.0; dim];
    lat.for_each_leaf(q, |l| {
        out[l] = sys.b_value(q, l) / int_b;
        inn[l] = m.weight(l);
    });
    AssembledOp { terms: vec![RankOne { out, inn }], dim }
}

pub(crate) fn sys_difference_op(
    sys: &AccretiveSystem,
    m: &Measure,
    q: &CubeId,
) -> Result<AssembledOp> {
    let lat = m.lattice;
    if q.g >= lat.depth {
        return Err(Error::LeafCube(q.clone()));
    }
    let mut terms = Vec::new();
    for ch in lat.children(q)? {
        terms.extend(sys_expectation_op(sys, m, &ch).terms);
    }
    for mut t in sys_expectation_op(sys, m, q).terms {
        for v in &mut t.out {
            *v = -*v;
        }
        terms.push(t);
    }
    Ok(AssembledOp { terms, dim: lat.num_leaves() })
}

/// The explicit adjoint: `Σ_{Q' ∈ ch Q} (⟨b_{Q'} f⟩_{Q'}/⟨b_{Q'}⟩_{Q'} −
/// ⟨b_Q f⟩_Q/⟨b_Q⟩_Q) 1_{Q'}`, skipping massless children.
pub fn sys_adjoint_difference(
    sys: &AccretiveSystem,
    m: &Measure,
    q: &CubeId,
    f: &StepFunction,
) -> Result<StepFunction> {
    let lat = m.lattice;
    if q.g >= lat.depth {
        return Err(Error::LeafCube(q.clone()));
    }
    let mut out = StepFunction::zero(lat);
    for (ch, coef) in sys_adjoint_coeffs(sys, m, q, f)? {
        lat.for_each_leaf(&ch, |l| out.values[l] = coef);
    }
    Ok(out)
}

/// Child coefficients of the explicit adjoint.
pub fn sys_adjoint_coeffs(
    sys: &AccretiveSystem,
    m: &Measure,
    q: &CubeId,
    f: &StepFunction,
) -> Result<Vec<(CubeId, f64)>> {
    let lat = m.lattice;
    if q.g >= lat.depth {
        return Err(Error::LeafCube(q.clone()));
    }
    let ratio_on = |c: &CubeId| -> f64 {
        if m.mass(c) == 0.0 {
            return 0.0;
        }
        let mut int_bf = 0.0;
        let mut int_b = 0.0;
        lat.for_each_leaf(c, |l| {
            let bv = sys.b_value(c, l);
            int_bf += bv * f.values[l] * m.weight(l);
            int_b += bv * m.weight(l);
        });
        int_bf / int_b
    };
    let ratio_q = ratio_on(q);
    let mut out = Vec::new();
    for ch in lat.children(q)? {
        if m.mass(&ch) == 0.0 {
            continue;
        }
        out.push((ch.clone(), ratio_on(&ch) - ratio_q));
    }
    Ok(out)
}

/// The adjoint computed the other way: structural pairing transpose of the
/// assembled difference operator. The explicit formula must agree with
/// this in `L²(μ)`.
pub fn sys_adjoint_via_transpose(
    sys: &AccretiveSystem,
    m: &Measure,
    q: &CubeId,
    f: &StepFunction,
) -> Result<StepFunction> {
    let op = sys_difference_op(sys, m, q)?.transpose_weighted(&m.leaf_weights);
    StepFunction::new(m.lattice, op.apply(&f.values))
}

/// Projection defects `φ_P` on the changed children of `Q`, together with
/// which child each lives on. `Δ_Q f − Δ_Q² f = Σ φ_P` exactly.
pub fn defect(
    sys: &AccretiveSystem,
    m: &Measure,
    q: &CubeId,
    f: &StepFunction,
    s_b: &[usize],
) -> Result<Vec<(CubeId, StepFunction)>> {
    let lat = m.lattice;
    if q.g >= lat.depth {
        return Err(Error::LeafCube(q.clone()));
    }
    let mut is_s = vec![false; lat.num_cubes()];
    for &i in s_b {
        is_s[i] = true;
    }
    let mass_q = m.mass(q);
    if mass_q == 0.0 {
        return Ok(Vec::new());
    }
    let mut int_f = 0.0;
    let mut int_bq = 0.0;
    lat.for_each_leaf(q, |l| {
        int_f += f.values[l] * m.weight(l);
        int_bq += sys.b_value(q, l) * m.weight(l);
    });
    let lead = int_f / int_bq;
    let avg_bq_q = int_bq / mass_q;

    let mut out = Vec::new();
    for p in lat.children(q)? {
        let pi = lat.cube_index(&p);
        if !is_s[pi] || m.mass_by_index(pi) == 0.0 {
            continue;
        }
        let mut int_bq_p = 0.0;
        let mut int_bp = 0.0;
        lat.for_each_leaf(&p, |l| {
            int_bq_p += sys.b_value(q, l) * m.weight(l);
            int_bp += sys.b_value(&p, l) * m.weight(l);
        });
        let mass_p = m.mass_by_index(pi);
        let avg_bq_p = int_bq_p / mass_p;
        let avg_bp_p = int_bp / mass_p;
        let mut phi = StepFunction::zero(lat);
        lat.for_each_leaf(&p, |l| {
            phi.values[l] =
                lead * (avg_bq_p / avg_bp_p * sys.b_value(&p, l) - sys.b_value(q, l));
        });
        let _ = avg_bq_q;
        out.push((p, phi));
    }
    Ok(out)
}

/// Full system decomposition: one difference per non-leaf cube plus the
/// root expectation. Reconstruction is exact on positive-mass leaves.
pub fn sys_decompose(sys: &AccretiveSystem, m: &Measure, f: &StepFunction) -> Decomposition {
    let lat = m.lattice;
    let mut pieces = Vec::new();
    for g in 0..lat.depth {
        let off = lat.gen_offset(g);
        for k in 0..lat.cubes_at(g) {
            let q = lat.cube_from_index(off + k);
            pieces.push((q.clone(), sys_difference(sys, m, &q, f).unwrap()));
        }
    }
    Decomposition { pieces, root_piece: sys_expectation(sys, m, &lat.root(), f) }
}

pub fn sys_square_fn_ratio(sys: &AccretiveSystem, m: &Measure, f: &StepFunction) -> Result<f64> {
    let nf = norm(f, m)?;
    if nf == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let lat = m.lattice;
    let mut s = 0.0;
    for g in 0..lat.depth {
        let off = lat.gen_offset(g);
        for k in 0..lat.cubes_at(g) {
            let q = lat.cube_from_index(off + k);
            let d = sys_difference(sys, m, &q, f)?;
            s += crate::measure::inner(&d, &d, m)?;
        }
    }
    let e = sys_expectation(sys, m, &lat.root(), f);
    s += crate::measure::inner(&e, &e, m)?;
    Ok(s / (nf * nf))
}

pub fn sys_dual_square_fn_ratio(
    sys: &AccretiveSystem,
    m: &Measure,
    f: &StepFunction,
) -> Result<f64> {
    let nf = norm(f, m)?;
    if nf == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(sys_dual_square_sum(sys, m, f)? / (nf * nf))
}

/// `Σ_Q ‖(Δ_Q)^* f‖²` over non-leaf cubes, from the explicit coefficients.
pub fn sys_dual_square_sum(sys: &AccretiveSystem, m: &Measure, f: &StepFunction) -> Result<f64> {
    let lat = m.lattice;
    let own_b = sys.own_integrals(m);
    let own_bf = sys.own_g_integrals(m, f);
    let ratio = |idx: usize| -> f64 {
        if m.mass_by_index(idx) == 0.0 {
            0.0
        } else {
            own_bf[idx] / own_b[idx]
        }
    };
    let mut s = 0.0;
    for g in 0..lat.depth {
        let off = lat.gen_offset(g);
        for k in 0..lat.cubes_at(g) {
            let q = lat.cube_from_index(off + k);
            let rq = ratio(off + k);
            for ch in lat.children(&q)? {
                let ci = lat.cube_index(&ch);
                if m.mass_by_index(ci) == 0.0 {
                    continue;
                }
                let coef = ratio(ci) - rq;
                s += coef * coef * m.mass_by_index(ci);
            }
        }
    }
    Ok(s)
}

/// The change sequence: `β_Q = |⟨b_{Q^(1)}⟩_Q − ⟨b_{Q^(1)}⟩_{Q^(1)}|² μ(Q)`
/// off the change set, zero on it (and at the root).
pub fn beta_sequence(sys: &AccretiveSystem, m: &Measure, s_b: &[usize]) -> CubeSequence {
    let lat = sys.lattice;
    let mut is_s = vec![false; lat.num_cubes()];
    for &i in s_b {
        is_s[i] = true;
    }
    let own_b = sys.own_integrals(m);
    let mut seq = CubeSequence::new();
    for idx in 1..lat.num_cubes() {
        if is_s[idx] {
            continue;
        }
        let mass = m.mass_by_index(idx);
        if mass == 0.0 {
            continue;
        }
        let q = lat.cube_from_index(idx);
        let p = lat.parent(&q).unwrap();
        let pi = lat.cube_index(&p);
        let mass_p = m.mass_by_index(pi);
        if mass_p == 0.0 {
            continue;
        }
        // Average of the parent's function over the child.
        let mut int_bp_q = 0.0;
        lat.for_each_leaf(&q, |l| int_bp_q += sys.b_value(&p, l) * m.weight(l));
        let d = int_bp_q / mass - own_b[pi] / mass_p;
        seq.set_by_index(idx, d * d * mass);
    }
    seq
}

// ---------------------------------------------------------------------------
// Paired systems.
// ---------------------------------------------------------------------------

/// Two systems, one per measure, with the cross-sparsity data of each
/// change set against the other measure.
#[derive(Debug, Clone)]
pub struct PairedSystem {
    pub b1: AccretiveSystem,
    pub b2: AccretiveSystem,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedReport {
    pub r1: SystemReport,
    pub r2: SystemReport,
    pub lambda_s1_mu: f64,
    pub lambda_s1_nu: f64,
    pub lambda_s2_nu: f64,
    pub lambda_s2_mu: f64,
    pub pass: bool,
}

/// Verify both systems and all four packing constants.
pub fn verify_paired(ps: &PairedSystem, mu: &Measure, nu: &Measure) -> PairedReport {
    let r1 = verify_system(&ps.b1, mu);
    let r2 = verify_system(&ps.b2, nu);
    let lambda_s1_mu = r1.lambda;
    let lambda_s2_nu = r2.lambda;
    let lambda_s1_nu = sparsity_check_indices(r1.s_b.iter().copied(), nu);
    let lambda_s2_mu = sparsity_check_indices(r2.s_b.iter().copied(), mu);
    let pass = r1.pass
        && r2.pass
        && lambda_s1_nu.is_finite()
        && lambda_s2_mu.is_finite();
    PairedReport { r1, r2, lambda_s1_mu, lambda_s1_nu, lambda_s2_nu, lambda_s2_mu, pass }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::martingale;
    use crate::measure::inner;
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
    fn constant_system_has_empty_change_set() {
        let lat = lat1(3);
        let m = Measure::uniform(lat);
        let b = StepFunction::new(lat, (0..8).map(|i| 1.0 + 0.1 * i as f64).collect()).unwrap();
        let sys = AccretiveSystem::constant(b, 0.5, 2.0);
        let rep = verify_system(&sys, &m);
        assert!(rep.s_b.is_empty());
        assert_eq!(rep.lambda, 0.0);
        assert!(rep.pass);
    }

    #[test]
    fn single_altered_cube_is_detected() {
        let lat = lat1(2);
        let m = Measure::uniform(lat);
        let b = StepFunction::constant(lat, 1.0);
        // Table copy of the constant system, then change one cube.
        let mut table = Vec::new();
        for idx in 0..lat.num_cubes() {
            let q = lat.cube_from_index(idx);
            let mut vals = Vec::new();
            lat.for_each_leaf(&q, |l| vals.push(b.values[l]));
            table.push(vals);
        }
        let p0 = CubeId::new(1, vec![1]);
        let p0i = lat.cube_index(&p0);
        table[p0i] = vec![2.0, 2.0];
        // Descendants keep the parent's function, so only p0 changes.
        for ch in lat.children(&p0).unwrap() {
            table[lat.cube_index(&ch)] = vec![2.0];
        }
        let sys = AccretiveSystem::from_table(lat, table, 0.5, 2.5).unwrap();
        let rep = verify_system(&sys, &m);
        assert_eq!(rep.s_b, vec![p0i]);
    }

    #[test]
    fn stopping_with_unit_function_never_stops() {
        let lat = lat1(4);
        let m = Measure::uniform(lat);
        let mut src = ConstantSource(StepFunction::constant(lat, 1.0));
        let (sys, rep) = stopping_construction(&mut src, &m, 0.5, 2.0).unwrap();
        assert_eq!(rep.num_stops, 0);
        assert!(verify_system(&sys, &m).s_b.is_empty());
    }

    #[test]
    fn stopping_ratios_obey_tau() {
        let mut max_seen: f64 = 0.0;
        for seed in 0..40u64 {
            let lat = lat1(5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Measure::new(
                lat,
                (0..lat.num_leaves()).map(|_| rng.gen_range(0.05..1.0)).collect(),
            )
            .unwrap();
            let (delta, c) = (0.5, 2.0);
            let mut src = SeededSource { seed: seed.wrapping_mul(77), delta, c };
            let (sys, rep) = stopping_construction(&mut src, &m, delta, c).unwrap();
            let tau = (c - delta) / (c - delta * delta);
            assert!((tau - 6.0 / 7.0).abs() < 1e-15);
            for row in &rep.rows {
                assert!(row.child_mass_ratio <= tau + 1e-12, "ratio {}", row.child_mass_ratio);
                max_seen = max_seen.max(row.child_mass_ratio);
            }
            // Threshold semantics: the emitted floor is delta².
            let vrep = verify_system(&sys, &m);
            assert!(vrep.pass, "{:?}", vrep.violations);
            assert!(vrep.delta_achieved >= delta * delta * (1.0 - 1e-9));
            assert_eq!(vrep.provenance_consistent, Some(true));
            // Sparsity inherited from the geometric decay.
            assert!(vrep.lambda <= 1.0 / (1.0 - tau) + 0.01);
        }
        assert!(max_seen > 0.0, "expected at least one nontrivial stop across seeds");
    }

    #[test]
    fn partition_cases() {
        let lat = lat1(3);
        // Empty set: nothing is contained in a changed cube.
        let p = partition(&lat, &[]);
        assert!(p.p_q.iter().all(|x| x.is_none()));

        // The whole tree under a changed root.
        let p = partition(&lat, &[0]);
        assert!(p.p_q.iter().all(|x| *x == Some(0)));

        // Nested stops: minimality picks the closer one.
        let outer = lat.cube_index(&CubeId::new(1, vec![0]));
        let inner_c = lat.cube_index(&CubeId::new(2, vec![1]));
        let p = partition(&lat, &[outer, inner_c]);
        let deep = lat.cube_index(&CubeId::new(3, vec![2]));
        assert_eq!(p.p_q[deep], Some(inner_c));
        let shallow = lat.cube_index(&CubeId::new(2, vec![0]));
        assert_eq!(p.p_q[shallow], Some(outer));
        assert_eq!(p.p_q[lat.cube_index(&CubeId::new(1, vec![1]))], None);
    }

    #[test]
    fn global_b_gluing() {
        let lat = lat1(2);
        let m = Measure::uniform(lat);
        let b = StepFunction::new(lat, vec![1.0, 2.0, 1.5, 0.5]).unwrap();
        let sys = AccretiveSystem::constant(b.clone(), 0.4, 2.0);
        let rep = verify_system(&sys, &m);
        let part = partition(&lat, &rep.s_b);
        let glued = global_b(&sys, &part).unwrap();
        assert_eq!(glued.values, b.values);

        // Synthetic root-only change set: everything is changed region.
        let part_root = partition(&lat, &[0]);
        let glued0 = global_b(&sys, &part_root).unwrap();
        assert!(glued0.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn global_b_matches_unchanged_cubes_pointwise() {
        let lat = lat1(4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m =
            Measure::new(lat, (0..16).map(|_| rng.gen_range(0.05..1.0)).collect()).unwrap();
        let mut src = SeededSource { seed: 99, delta: 0.6, c: 3.0 };
        let (sys, _) = stopping_construction(&mut src, &m, 0.6, 3.0).unwrap();
        let rep = verify_system(&sys, &m);
        let part = partition(&lat, &rep.s_b);
        let glued = global_b(&sys, &part).unwrap();
        for idx in 0..lat.num_cubes() {
            if part.in_changed_region(idx) {
                continue;
            }
            let q = lat.cube_from_index(idx);
            lat.for_each_leaf(&q, |l| {
                assert!((glued.values[l] - sys.b_value(&q, l)).abs() < 1e-12);
            });
        }
    }

    #[test]
    fn constant_system_ops_reduce_to_single_function_calculus() {
        let lat = lat1(3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = Measure::new(lat, (0..8).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap();
        let b = StepFunction::new(lat, (0..8).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap();
        let sys = AccretiveSystem::constant(b.clone(), 0.3, 2.0);
        let f = random_f(lat, &mut rng);
        for q in lat.all_cubes() {
            let e1 = sys_expectation(&sys, &m, &q, &f);
            let e2 = martingale::expectation(&b, &m, &q, &f);
            assert!(norm(&e1.sub(&e2), &m).unwrap() < 1e-12);
            if q.g < lat.depth {
                let d1 = sys_difference(&sys, &m, &q, &f).unwrap();
                let d2 = martingale::difference(&b, &m, &q, &f).unwrap();
                assert!(norm(&d1.sub(&d2), &m).unwrap() < 1e-12);
            }
        }
        let dec1 = sys_decompose(&sys, &m, &f);
        let dec2 = martingale::decompose(&b, &m, &f);
        assert!(norm(&dec1.sum().sub(&dec2.sum()), &m).unwrap() < 1e-12);
    }

    #[test]
    fn difference_of_own_function_vanishes_without_changed_children() {
        let lat = lat1(3);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = Measure::new(lat, (0..8).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap();
        let b = StepFunction::new(lat, (0..8).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap();
        let sys = AccretiveSystem::constant(b.clone(), 0.3, 2.0);
        let q = CubeId::new(1, vec![0]);
        let bq = sys.b_on(&q);
        let d = sys_difference(&sys, &m, &q, &bq).unwrap();
        assert!(norm(&d, &m).unwrap() < 1e-12);
    }

    #[test]
    fn sys_difference_has_zero_average() {
        let lat = lat1(4);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let m = Measure::new(lat, (0..16).map(|_| rng.gen_range(0.05..1.0)).collect()).unwrap();
        let mut src = SeededSource { seed: 5, delta: 0.5, c: 2.0 };
        let (sys, _) = stopping_construction(&mut src, &m, 0.5, 2.0).unwrap();
        for _ in 0..5 {
            let f = random_f(lat, &mut rng);
            for q in lat.all_cubes() {
                if q.g == lat.depth {
                    continue;
                }
                let d = sys_difference(&sys, &m, &q, &f).unwrap();
                let avg = crate::measure::average(&d, &q, &m);
                assert!(avg.abs() < 1e-11);
            }
        }
    }

    #[test]
    fn adjoint_formula_matches_transpose_and_hand_value() {
        let lat = lat1(1);
        let m = Measure::uniform(lat);
        let sys = AccretiveSystem::constant(StepFunction::constant(lat, 1.0), 1.0, 1.0);
        let f = StepFunction::new(lat, vec![1.0, 3.0]).unwrap();
        let adj = sys_adjoint_difference(&sys, &m, &lat.root(), &f).unwrap();
        assert!((adj.values[0] + 1.0).abs() < 1e-14);
        assert!((adj.values[1] - 1.0).abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lat4 = lat1(4);
        let m4 = Measure::new(lat4, (0..16).map(|_| rng.gen_range(0.05..1.0)).collect()).unwrap();
        let mut src = SeededSource { seed: 13, delta: 0.5, c: 2.0 };
        let (sys4, _) = stopping_construction(&mut src, &m4, 0.5, 2.0).unwrap();
        for _ in 0..5 {
            let f = random_f(lat4, &mut rng);
            for q in lat4.all_cubes() {
                if q.g == lat4.depth {
                    continue;
                }
                let a = sys_adjoint_difference(&sys4, &m4, &q, &f).unwrap();
                let t = sys_adjoint_via_transpose(&sys4, &m4, &q, &f).unwrap();
                assert!(norm(&a.sub(&t), &m4).unwrap() <= 1e-12 * (1.0 + norm(&f, &m4).unwrap()));
            }
        }

        // Constant function against a constant system: both ratios agree.
        let kappa = StepFunction::constant(lat, 4.0);
        let adj = sys_adjoint_difference(&sys, &m, &lat.root(), &kappa).unwrap();
        assert!(adj.values.iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn defect_identity_and_bound() {
        let lat = lat1(4);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let m = Measure::new(lat, (0..16).map(|_| rng.gen_range(0.05..1.0)).collect()).unwrap();
        let (delta, c) = (0.6, 2.5);
        let mut src = SeededSource { seed: 3, delta, c };
        let (sys, _) = stopping_construction(&mut src, &m, delta, c).unwrap();
        let rep = verify_system(&sys, &m);
        let ratio = rep.c_achieved / rep.delta_achieved;
        let phi_bound = ratio * (ratio + 1.0);

        for _ in 0..5 {
            let f = random_f(lat, &mut rng);
            for q in lat.all_cubes() {
                if q.g == lat.depth {
                    continue;
                }
                let d = sys_difference(&sys, &m, &q, &f).unwrap();
                let dd = sys_difference(&sys, &m, &q, &d).unwrap();
                let resid = d.sub(&dd);
                let phis = defect(&sys, &m, &q, &f, &rep.s_b).unwrap();
                let mut phi_sum = StepFunction::zero(lat);
                for (_, p) in &phis {
                    phi_sum.add_assign(p);
                }
                let err = norm(&resid.sub(&phi_sum), &m).unwrap();
                assert!(err <= 1e-10 * (1.0 + norm(&d, &m).unwrap()), "defect identity: {err}");

                let avg_f_q = crate::measure::average(&f, &q, &m);
                for (p, phi) in &phis {
                    let bound = phi_bound * avg_f_q.abs() * m.mass(p).sqrt();
                    assert!(norm(phi, &m).unwrap() <= bound * (1.0 + 1e-9) + 1e-15);
                }

                // No changed children means an honest projection.
                let s_children: Vec<&CubeId> = phis.iter().map(|(p, _)| p).collect();
                if s_children.is_empty() {
                    assert!(norm(&resid, &m).unwrap() <= 1e-10 * (1.0 + norm(&d, &m).unwrap()));
                }
            }
        }
    }

    #[test]
    fn reconstruction_for_stopping_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..10u64 {
            let lat = lat1(5);
            let m = Measure::new(
                lat,
                (0..lat.num_leaves()).map(|_| rng.gen_range(0.02..1.0)).collect(),
            )
            .unwrap();
            let mut src = SeededSource { seed, delta: 0.5, c: 2.0 };
            let (sys, _) = stopping_construction(&mut src, &m, 0.5, 2.0).unwrap();
            let f = random_f(lat, &mut rng);
            let dec = sys_decompose(&sys, &m, &f);
            assert!(dec.reconstruction_error(&f, &m) <= 1e-10);
        }
    }

    #[test]
    fn beta_values_and_carleson_bound() {
        let lat = lat1(1);
        let m = Measure::uniform(lat);
        // Constant global function 1: every beta vanishes.
        let sys1 = AccretiveSystem::constant(StepFunction::constant(lat, 1.0), 1.0, 1.0);
        let beta = beta_sequence(&sys1, &m, &[]);
        assert!(beta.iter().all(|(_, v)| v == 0.0));

        // b = 1 on the left, 2 on the right: each child sits (1/2)² off the
        // root average.
        let b = StepFunction::new(lat, vec![1.0, 2.0]).unwrap();
        let sys2 = AccretiveSystem::constant(b, 1.0, 2.0);
        let beta = beta_sequence(&sys2, &m, &[]);
        for (idx, v) in beta.iter() {
            let q = lat.cube_from_index(idx);
            assert!((v - 0.25 * m.mass(&q)).abs() < 1e-14);
        }

        // Random sparse systems: the packing constant of beta stays under
        // the derived c²(5 + Λ).
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for seed in 0..10u64 {
            let lat = lat1(5);
            let m = Measure::new(
                lat,
                (0..lat.num_leaves()).map(|_| rng.gen_range(0.05..1.0)).collect(),
            )
            .unwrap();
            let mut src = SeededSource { seed: seed + 100, delta: 0.5, c: 2.0 };
            let (sys, _) = stopping_construction(&mut src, &m, 0.5, 2.0).unwrap();
            let rep = verify_system(&sys, &m);
            let beta = beta_sequence(&sys, &m, &rep.s_b);
            let lam_beta = crate::carleson::carleson_constant(&beta, &m);
            let bound = rep.c_achieved * rep.c_achieved * (5.0 + rep.lambda);
            assert!(lam_beta <= bound * (1.0 + 1e-9), "{lam_beta} vs {bound}");
        }
    }

    #[test]
    fn defining_identity_of_sys_adjoint() {
        let lat = lat1(3);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let m = Measure::new(lat, (0..8).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap();
        let mut src = SeededSource { seed: 1, delta: 0.5, c: 2.0 };
        let (sys, _) = stopping_construction(&mut src, &m, 0.5, 2.0).unwrap();
        for q in lat.all_cubes() {
            if q.g == lat.depth {
                continue;
            }
            for _ in 0..3 {
                let f = random_f(lat, &mut rng);
                let g = random_f(lat, &mut rng);
                let lhs = inner(&sys_difference(&sys, &m, &q, &f).unwrap(), &g, &m).unwrap();
                let rhs =
                    inner(&f, &sys_adjoint_difference(&sys, &m, &q, &g).unwrap(), &m).unwrap();
                assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            }
        }
    }

    #[test]
    fn system_json_roundtrip() {
        let lat = lat1(3);
        let m = Measure::uniform(lat);
        let mut src = SeededSource { seed: 9, delta: 0.5, c: 2.0 };
        let (sys, _) = stopping_construction(&mut src, &m, 0.5, 2.0).unwrap();
        let v = sys.to_json();
        let back = AccretiveSystem::from_json(lat, &v).unwrap();
        for q in lat.all_cubes() {
            let a = sys.b_on(&q);
            let b = back.b_on(&q);
            assert_eq!(a.values, b.values);
        }
        assert_eq!(sys.provenance, back.provenance);
    }
}
