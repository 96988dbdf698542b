//! Two-weight operator kernels: application and pairing, the weighted
//! adjoint, the operator norm, triangular-localization checkers for both
//! the accretive-pair and accretive-system settings, testing-condition
//! evaluators, the doubling scan, and generators for multiplier and shift
//! instances.

use serde::{Deserialize, Serialize};

use crate::accretive_system::{
    partition, sys_difference, AccretiveSystem, PairedReport, PairedSystem, Partition,
};
use crate::error::{Error, Result};
use crate::lattice::{CubeId, Lattice};
use crate::linalg;
use crate::martingale::{self, AccretiveFunction};
use crate::measure::{cube_integrals, inner, norm, norm_on, Measure, StepFunction};

/// How the kernel was built; kept so instances serialize the compact form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum OperatorMode {
    Dense,
    Multiplier(Vec<(CubeId, f64)>),
}

/// A leaf-to-leaf kernel acting from `L²(μ)` to `L²(ν)`:
/// `(Tf)_j = Σ_i K[j,i] f_i`, with source values on massless leaves
/// ignored (they are invisible to the pairing).
#[derive(Debug, Clone)]
pub struct OperatorRep {
    pub lattice: Lattice,
    /// Row-major `L x L`.
    pub kernel: Vec<f64>,
    pub mu: Measure,
    pub nu: Measure,
    pub mode: OperatorMode,
}

impl OperatorRep {
    pub fn from_dense(lattice: Lattice, kernel: Vec<f64>, mu: Measure, nu: Measure) -> Result<Self> {
        let l = lattice.num_leaves();
        if kernel.len() != l * l {
            return Err(Error::ShapeMismatch(format!(
                "kernel has {} entries, expected {}",
                kernel.len(),
                l * l
            )));
        }
        if mu.lattice != lattice || nu.lattice != lattice {
            return Err(Error::LatticeMismatch("operator measures must share the lattice".into()));
        }
        if kernel.iter().any(|k| !k.is_finite()) {
            return Err(Error::InvalidData("kernel entries must be finite".into()));
        }
        Ok(OperatorRep { lattice, kernel, mu, nu, mode: OperatorMode::Dense })
    }

    pub fn zero(lattice: Lattice, mu: Measure, nu: Measure) -> Self {
        let l = lattice.num_leaves();
        OperatorRep { lattice, kernel: vec![0.0; l * l], mu, nu, mode: OperatorMode::Dense }
    }

    pub fn identity(lattice: Lattice, mu: Measure, nu: Measure) -> Self {
        let l = lattice.num_leaves();
        let mut kernel = vec![0.0; l * l];
        for i in 0..l {
            kernel[i * l + i] = 1.0;
        }
        OperatorRep { lattice, kernel, mu, nu, mode: OperatorMode::Dense }
    }

    /// Pointwise multiplication by `w` as a kernel.
    pub fn multiplication(w: &StepFunction, mu: Measure, nu: Measure) -> Self {
        let l = w.lattice.num_leaves();
        let mut kernel = vec![0.0; l * l];
        for i in 0..l {
            kernel[i * l + i] = w.values[i];
        }
        OperatorRep { lattice: w.lattice, kernel, mu, nu, mode: OperatorMode::Dense }
    }

    pub fn apply(&self, f: &StepFunction) -> Result<StepFunction> {
        if f.lattice != self.lattice {
            return Err(Error::LatticeMismatch("apply: function on a different lattice".into()));
        }
        let l = self.lattice.num_leaves();
        let mut out = vec![0.0; l];
        for j in 0..l {
            let row = &self.kernel[j * l..(j + 1) * l];
            let mut s = 0.0;
            for i in 0..l {
                if self.mu.weight(i) > 0.0 {
                    s += row[i] * f.values[i];
                }
            }
            out[j] = s;
        }
        StepFunction::new(self.lattice, out)
    }

    /// `⟨Tf, g⟩_ν`.
    pub fn bilinear(&self, f: &StepFunction, g: &StepFunction) -> Result<f64> {
        inner(&self.apply(f)?, g, &self.nu)
    }

    /// The adjoint against the two pairings: `⟨Tf, g⟩_ν = ⟨f, T*g⟩_μ`.
    /// Massless source leaves give zero rows.
    pub fn adjoint(&self) -> OperatorRep {
        let l = self.lattice.num_leaves();
        let mut kernel = vec![0.0; l * l];
        for i in 0..l {
            let wi = self.mu.weight(i);
            if wi == 0.0 {
                continue;
            }
            for j in 0..l {
                kernel[i * l + j] = self.nu.weight(j) * self.kernel[j * l + i] / wi;
            }
        }
        OperatorRep {
            lattice: self.lattice,
            kernel,
            mu: self.nu.clone(),
            nu: self.mu.clone(),
            mode: OperatorMode::Dense,
        }
    }

    /// `sup ‖Tf‖_ν / ‖f‖_μ` over positive-weight coordinates, via power
    /// iteration on the weight-conjugated kernel.
    pub fn operator_norm(&self) -> Result<f64> {
        let (sigma, ok) = self.norm_estimate_full();
        if ok {
            Ok(sigma)
        } else {
            Err(Error::NormNonConvergence { best: sigma })
        }
    }

    /// Best available estimate regardless of convergence.
    pub fn operator_norm_estimate(&self) -> f64 {
        self.norm_estimate_full().0
    }

    fn norm_estimate_full(&self) -> (f64, bool) {
        let l = self.lattice.num_leaves();
        let sqrt_mu: Vec<f64> = self.mu.leaf_weights.iter().map(|w| w.sqrt()).collect();
        let sqrt_nu: Vec<f64> = self.nu.leaf_weights.iter().map(|w| w.sqrt()).collect();
        let kernel = &self.kernel;
        let apply = |v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; l];
            for j in 0..l {
                if sqrt_nu[j] == 0.0 {
                    continue;
                }
                let row = &kernel[j * l..(j + 1) * l];
                let mut s = 0.0;
                for i in 0..l {
                    if sqrt_mu[i] > 0.0 {
                        s += row[i] * v[i] / sqrt_mu[i];
                    }
                }
                out[j] = s * sqrt_nu[j];
            }
            out
        };
        let apply_t = |u: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; l];
            for j in 0..l {
                let uj = u[j] * sqrt_nu[j];
                if uj == 0.0 {
                    continue;
                }
                let row = &kernel[j * l..(j + 1) * l];
                for i in 0..l {
                    out[i] += row[i] * uj;
                }
            }
            for i in 0..l {
                out[i] = if sqrt_mu[i] > 0.0 { out[i] / sqrt_mu[i] } else { 0.0 };
            }
            out
        };
        linalg::power_sigma_max(l, l, apply, apply_t, 1e-13, 50_000)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let kernel = match &self.mode {
            OperatorMode::Multiplier(lambda) => serde_json::json!({
                "mode": "multiplier",
                "lambda": lambda
                    .iter()
                    .map(|(c, v)| serde_json::json!({"cube": c, "value": v}))
                    .collect::<Vec<_>>(),
            }),
            OperatorMode::Dense => {
                let l = self.lattice.num_leaves();
                let rows: Vec<Vec<f64>> =
                    (0..l).map(|j| self.kernel[j * l..(j + 1) * l].to_vec()).collect();
                serde_json::json!({ "mode": "dense", "rows": rows })
            }
        };
        serde_json::json!({ "lattice": self.lattice, "kernel": kernel })
    }

    pub fn from_json(v: &serde_json::Value, mu: Measure, nu: Measure) -> Result<Self> {
        let bad = |s: &str| Error::InvalidData(format!("operator json: {s}"));
        let lattice: Lattice =
            serde_json::from_value(v["lattice"].clone()).map_err(|e| bad(&e.to_string()))?;
        let k = &v["kernel"];
        match k["mode"].as_str().ok_or_else(|| bad("missing kernel.mode"))? {
            "dense" => {
                let rows: Vec<Vec<f64>> =
                    serde_json::from_value(k["rows"].clone()).map_err(|e| bad(&e.to_string()))?;
                let l = lattice.num_leaves();
                if rows.len() != l || rows.iter().any(|r| r.len() != l) {
                    return Err(bad("dense kernel shape"));
                }
                OperatorRep::from_dense(lattice, rows.concat(), mu, nu)
            }
            "multiplier" => {
                let entries = k["lambda"].as_array().ok_or_else(|| bad("missing lambda"))?;
                let mut lambda = Vec::new();
                for e in entries {
                    let cube: CubeId = serde_json::from_value(e["cube"].clone())
                        .map_err(|e| bad(&e.to_string()))?;
                    let value =
                        e["value"].as_f64().ok_or_else(|| bad("lambda value not a number"))?;
                    lambda.push((cube, value));
                }
                make_haar_multiplier(lattice, &mu, &lambda)
            }
            other => Err(bad(&format!("unknown kernel mode {other}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Doubling scan.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoublingReport {
    /// Largest `μ(parent)/μ(child)` over positive-mass children.
    pub factor: f64,
    /// Set when a positive-mass parent has a massless child; the measure
    /// is then not doubling and the effective factor is infinite.
    pub zero_mass_child: bool,
}

impl DoublingReport {
    pub fn effective(&self) -> f64 {
        if self.zero_mass_child {
            f64::INFINITY
        } else {
            self.factor
        }
    }
}

pub fn doubling_constant(m: &Measure) -> DoublingReport {
    let lat = m.lattice;
    let mut factor: f64 = 0.0;
    let mut zero_mass_child = false;
    for g in 1..=lat.depth {
        let off = lat.gen_offset(g);
        for k in 0..lat.cubes_at(g) {
            let q = lat.cube_from_index(off + k);
            let p = lat.parent(&q).unwrap();
            let mp = m.mass(&p);
            let mq = m.mass_by_index(off + k);
            if mq > 0.0 {
                factor = factor.max(mp / mq);
            } else if mp > 0.0 {
                zero_mass_child = true;
            }
        }
    }
    DoublingReport { factor, zero_mass_child }
}

// ---------------------------------------------------------------------------
// Well-localized checkers.
// ---------------------------------------------------------------------------

/// Default tolerance for normalized localization violations.
pub const WL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WlReport {
    pub radius: u32,
    pub pass: bool,
    /// Max normalized violation over the constrained windows, excluding
    /// the ambiguous parent endpoint at radius zero.
    pub max_violation: f64,
    /// The parent endpoint `R = Q^(1)` at radius zero, reported separately:
    /// whether it is meant to be constrained is left visible, not decided.
    pub boundary_violation: f64,
    pub worst_pair: Option<(CubeId, CubeId)>,
    pub tol: f64,
    pub op_norm_estimate: f64,
}

/// One directional scan. `apply_test(Q)` produces the tested image
/// (already in the target space); `adjoint_norm(R, image_tables)` gives
/// `‖(Δ_R)^* image‖` on the target side.
struct TriangularScan<'a> {
    lattice: Lattice,
    source: &'a Measure,
    radius: u32,
    norm_est: f64,
    tol: f64,
}

impl<'a> TriangularScan<'a> {
    /// Windows: `ℓ(R) ≤ 2 ℓ(Q)` and (`R ⊄ Q^{(r)}` or
    /// (`ℓ(R) ≤ 2^{-r} ℓ(Q)` and `R ⊄ Q`)), endpoints included.
    fn run<FV, FN>(&self, mut image_for: FV, mut adj_norm: FN) -> WlReport
    where
        FV: FnMut(&CubeId) -> StepFunction,
        FN: FnMut(&CubeId, &StepFunction) -> f64,
    {
        let lat = self.lattice;
        let r = self.radius;
        let mut max_violation: f64 = 0.0;
        let mut boundary_violation: f64 = 0.0;
        let mut worst = None;
        for q in lat.all_cubes() {
            let mass_q = self.source.mass(&q);
            if mass_q == 0.0 {
                continue;
            }
            let image = image_for(&q);
            let q_anc = lat.ancestor(&q, r);
            let denom = {
                let d = self.norm_est * mass_q.sqrt();
                if d > 0.0 {
                    d
                } else {
                    1.0
                }
            };
            for g_r in q.g.saturating_sub(1)..lat.depth {
                let off = lat.gen_offset(g_r);
                for k in 0..lat.cubes_at(g_r) {
                    let rc = lat.cube_from_index(off + k);
                    let outside_anc = !lat.contains(&q_anc, &rc);
                    let deep_outside =
                        g_r >= q.g + r && !lat.contains(&q, &rc);
                    if !(outside_anc || deep_outside) {
                        continue;
                    }
                    let v = adj_norm(&rc, &image) / denom;
                    // Parent endpoint: exactly R = Q^(1) at radius zero.
                    let is_parent_endpoint =
                        r == 0 && rc.g + 1 == q.g && lat.contains(&rc, &q);
                    if is_parent_endpoint {
                        boundary_violation = boundary_violation.max(v);
                    } else if v > max_violation {
                        max_violation = v;
                        worst = Some((q.clone(), rc));
                    }
                }
            }
        }
        WlReport {
            radius: r,
            pass: max_violation <= self.tol,
            max_violation,
            boundary_violation,
            worst_pair: worst,
            tol: self.tol,
            op_norm_estimate: self.norm_est,
        }
    }
}

/// Triangular localization for an accretive pair: both `T` and `T*` are
/// scanned; violations are normalized by `‖T‖·μ(Q)^{1/2}`.
pub fn check_wl_global(
    op: &OperatorRep,
    b1: &AccretiveFunction,
    b2: &AccretiveFunction,
    radius: u32,
    tol: f64,
) -> WlReport {
    let norm_est = op.operator_norm_estimate();
    let fwd = wl_side_fn(op, &b1.b, &b2.b, radius, norm_est, tol);
    let adj_op = op.adjoint();
    let adj = wl_side_fn(&adj_op, &b2.b, &b1.b, radius, norm_est, tol);
    merge_reports(fwd, adj)
}

fn wl_side_fn(
    op: &OperatorRep,
    b_source: &StepFunction,
    b_target: &StepFunction,
    radius: u32,
    norm_est: f64,
    tol: f64,
) -> WlReport {
    let lat = op.lattice;
    let target = op.nu.clone();
    let tb = martingale::b_tables(b_target, &target);
    let scan = TriangularScan { lattice: lat, source: &op.mu, radius, norm_est, tol };
    scan.run(
        |q| {
            let cut = b_source.restrict(q);
            op.apply(&cut).unwrap()
        },
        |rc, image| {
            if rc.g >= lat.depth {
                return 0.0;
            }
            let int_bg = cube_integrals(&b_target.mul_pointwise(image), &target);
            martingale::adjoint_norm_sq_from_tables(&lat, &target, &tb, &int_bg, rc)
                .max(0.0)
                .sqrt()
        },
    )
}

fn merge_reports(a: WlReport, b: WlReport) -> WlReport {
    let boundary = a.boundary_violation.max(b.boundary_violation);
    let mut out = if a.max_violation >= b.max_violation { a } else { b };
    out.boundary_violation = boundary;
    out.pass = out.max_violation <= out.tol;
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WlLocalReport {
    pub base: WlReport,
    /// Smallest admissible constant in the cut-localization comparison;
    /// empirical, no normative threshold.
    pub csc_kappa: f64,
    /// Violation of the identity `T(b_Q) = T(b_S 1_Q)` on equal strata.
    pub csc_identity_violation: f64,
}

/// Triangular localization plus the cut-localization comparison for a
/// paired system.
pub fn check_wl_local(
    op: &OperatorRep,
    ps: &PairedSystem,
    rep: &PairedReport,
    radius: u32,
    tol: f64,
) -> WlLocalReport {
    let norm_est = op.operator_norm_estimate();
    let fwd = wl_side_sys(op, &ps.b1, &ps.b2, radius, norm_est, tol);
    let adj_op = op.adjoint();
    let adj = wl_side_sys(&adj_op, &ps.b2, &ps.b1, radius, norm_est, tol);
    let base = merge_reports(fwd, adj);

    let part1 = partition(&op.lattice, &rep.r1.s_b);
    let (k1, id1) = csc_scan(op, &ps.b1, &ps.b2, &part1, radius, norm_est);
    let part2 = partition(&op.lattice, &rep.r2.s_b);
    let (k2, id2) = csc_scan(&adj_op, &ps.b2, &ps.b1, &part2, radius, norm_est);

    WlLocalReport {
        base,
        csc_kappa: k1.max(k2),
        csc_identity_violation: id1.max(id2),
    }
}

fn wl_side_sys(
    op: &OperatorRep,
    sys_source: &AccretiveSystem,
    sys_target: &AccretiveSystem,
    radius: u32,
    norm_est: f64,
    tol: f64,
) -> WlReport {
    let lat = op.lattice;
    let target = op.nu.clone();
    let own_b = sys_target.own_integrals(&target);
    let scan = TriangularScan { lattice: lat, source: &op.mu, radius, norm_est, tol };
    scan.run(
        |q| op.apply(&sys_source.b_on(q)).unwrap(),
        |rc, image| {
            if rc.g >= lat.depth {
                return 0.0;
            }
            let own_bg = sys_target.own_g_integrals(&target, image);
            sys_adjoint_norm_from_own(&lat, &target, &own_b, &own_bg, rc).sqrt()
        },
    )
}

/// `‖(Δ_R)^* g‖²` for a system, from own-function integrals.
pub(crate) fn sys_adjoint_norm_from_own(
    lat: &Lattice,
    m: &Measure,
    own_b: &[f64],
    own_bg: &[f64],
    r: &CubeId,
) -> f64 {
    let ri = lat.cube_index(r);
    let ratio_r = if m.mass_by_index(ri) > 0.0 { own_bg[ri] / own_b[ri] } else { 0.0 };
    let mut s = 0.0;
    for ch in lat.children(r).unwrap() {
        let ci = lat.cube_index(&ch);
        let mass = m.mass_by_index(ci);
        if mass == 0.0 {
            continue;
        }
        let coef = own_bg[ci] / own_b[ci] - ratio_r;
        s += coef * coef * mass;
    }
    s
}

/// Scan all same-stratum nested pairs `Q ⊆ S` against the targets
/// `R ∈ ch^r(Q)`: returns (smallest admissible kappa, identity violation).
fn csc_scan(
    op: &OperatorRep,
    sys_source: &AccretiveSystem,
    sys_target: &AccretiveSystem,
    part_source: &Partition,
    radius: u32,
    norm_est: f64,
) -> (f64, f64) {
    let lat = op.lattice;
    let target = op.nu.clone();
    let own_b = sys_target.own_integrals(&target);
    let mut kappa: f64 = 1.0;
    let mut identity_viol: f64 = 0.0;

    for s in lat.all_cubes() {
        if op.mu.mass(&s) == 0.0 {
            continue;
        }
        let b_s = sys_source.b_on(&s);
        let image_s = op.apply(&b_s).unwrap();
        let own_bg_s = sys_target.own_g_integrals(&target, &image_s);
        let si = lat.cube_index(&s);
        // Q runs over the descendants of S in the same stratum.
        let mut stack = vec![s.clone()];
        while let Some(q) = stack.pop() {
            let qi = lat.cube_index(&q);
            if part_source.p_q[qi] == part_source.p_q[si] && op.mu.mass(&q) > 0.0 {
                let cut = b_s.restrict(&q);
                let image_cut = op.apply(&cut).unwrap();
                // The identity T(b_Q) = T(b_S · 1_Q).
                let image_q = op.apply(&sys_source.b_on(&q)).unwrap();
                let denom = {
                    let d = norm_est * op.mu.mass(&q).sqrt();
                    if d > 0.0 {
                        d
                    } else {
                        1.0
                    }
                };
                identity_viol = identity_viol
                    .max(norm(&image_cut.sub(&image_q), &target).unwrap() / denom);

                if q.g + radius < lat.depth {
                    let own_bg_cut = sys_target.own_g_integrals(&target, &image_cut);
                    let floor = {
                        let f = 1e-13 * (1.0 + norm_est) * op.mu.mass(&s).sqrt();
                        f * f
                    };
                    for rc in lat.descendants_at(&q, radius).unwrap() {
                        if rc.g >= lat.depth {
                            continue;
                        }
                        let num =
                            sys_adjoint_norm_from_own(&lat, &target, &own_b, &own_bg_cut, &rc);
                        let den =
                            sys_adjoint_norm_from_own(&lat, &target, &own_b, &own_bg_s, &rc);
                        if den > floor {
                            kappa = kappa.max(num / den);
                        } else if num > floor {
                            kappa = f64::INFINITY;
                        }
                    }
                }
            }
            if q.g < lat.depth {
                stack.extend(lat.children(&q).unwrap());
            }
        }
    }
    (kappa, identity_viol)
}

// ---------------------------------------------------------------------------
// Testing conditions.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestingConstants {
    pub radius: u32,
    pub t_a_fwd: f64,
    pub t_a_adj: f64,
    /// Cut variants `‖1_Q T(..)‖²/μ(Q)`; equal to `t_a_*` in the pair
    /// setting, recorded separately in the system setting.
    pub t_a_fwd_cut: f64,
    pub t_a_adj_cut: f64,
    /// Pairing form of condition (b) over comparable windows.
    pub t_b: f64,
    /// Compression form: sup of `‖ΠᵥT Πᵤ‖` over difference ranges.
    pub t_b_delta: f64,
    pub t_c_fwd: f64,
    pub t_c_adj: f64,
}

/// Orthonormal basis of a difference range in `L²(w)`, stored on the
/// cube's leaves.
struct RangeBasis {
    leaves: Vec<usize>,
    vecs: Vec<Vec<f64>>,
}

fn range_basis<FD>(lat: &Lattice, m: &Measure, q: &CubeId, mut diff: FD) -> RangeBasis
where
    FD: FnMut(&StepFunction) -> StepFunction,
{
    let leaves = lat.leaves_of(q);
    let children = lat.children(q).unwrap();
    let gens: Vec<Vec<f64>> = children
        .iter()
        .map(|ch| {
            let d = diff(&StepFunction::indicator(*lat, ch));
            leaves.iter().map(|&l| d.values[l]).collect()
        })
        .collect();
    let k = gens.len();
    let mut gram = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            let mut s = 0.0;
            for (pos, &l) in leaves.iter().enumerate() {
                s += gens[a][pos] * gens[b][pos] * m.weight(l);
            }
            gram[a * k + b] = s;
        }
    }
    let (eig, v) = linalg::jacobi_eigh(&mut gram, k);
    let lmax = eig.iter().cloned().fold(0.0f64, f64::max);
    let mut vecs = Vec::new();
    for j in 0..k {
        if eig[j] > 1e-12 * lmax.max(1e-300) {
            let scale = 1.0 / eig[j].sqrt();
            let mut e = vec![0.0; leaves.len()];
            for a in 0..k {
                let c = v[a * k + j] * scale;
                for pos in 0..leaves.len() {
                    e[pos] += c * gens[a][pos];
                }
            }
            vecs.push(e);
        }
    }
    RangeBasis { leaves, vecs }
}

/// sup over unit vectors of the bilinear form between two range bases:
/// largest singular value of the coefficient matrix.
fn compressed_sup(
    images: &[StepFunction],
    target_basis: &RangeBasis,
    nu: &Measure,
) -> f64 {
    let ru = images.len();
    let rv = target_basis.vecs.len();
    if ru == 0 || rv == 0 {
        return 0.0;
    }
    let mut c = vec![0.0; rv * ru];
    for (j, img) in images.iter().enumerate() {
        for (k, e) in target_basis.vecs.iter().enumerate() {
            let mut s = 0.0;
            for (pos, &l) in target_basis.leaves.iter().enumerate() {
                s += img.values[l] * e[pos] * nu.weight(l);
            }
            c[k * ru + j] = s;
        }
    }
    // sigma_max via the small Gram matrix.
    let mut ctc = vec![0.0; ru * ru];
    for a in 0..ru {
        for b in 0..ru {
            let mut s = 0.0;
            for k in 0..rv {
                s += c[k * ru + a] * c[k * ru + b];
            }
            ctc[a * ru + b] = s;
        }
    }
    linalg::max_eig_sym(&mut ctc, ru).max(0.0).sqrt()
}

/// Testing constants for an accretive pair: the localized conditions (a)
/// and (b), with the compression form alongside.
pub fn testing_global(
    op: &OperatorRep,
    b1: &AccretiveFunction,
    b2: &AccretiveFunction,
    radius: u32,
) -> TestingConstants {
    let lat = op.lattice;
    let adj = op.adjoint();

    let t_a_fwd = testing_a_cut(op, &b1.b);
    let t_a_adj = testing_a_cut(&adj, &b2.b);
    let t_b = testing_b_pairing(op, &b1.b, &b2.b, radius);
    let t_b_delta = testing_b_compression(
        op,
        radius,
        |q, f| martingale::difference(&b1.b, &op.mu, q, f).unwrap(),
        |r, f| martingale::difference(&b2.b, &op.nu, r, f).unwrap(),
    );
    let _ = lat;
    TestingConstants {
        radius,
        t_a_fwd,
        t_a_adj,
        t_a_fwd_cut: t_a_fwd,
        t_a_adj_cut: t_a_adj,
        t_b,
        t_b_delta,
        t_c_fwd: 0.0,
        t_c_adj: 0.0,
    }
}

fn testing_a_cut(op: &OperatorRep, b_source: &StepFunction) -> f64 {
    let lat = op.lattice;
    let mut best: f64 = 0.0;
    for q in lat.all_cubes() {
        let mass = op.mu.mass(&q);
        if mass == 0.0 {
            continue;
        }
        let image = op.apply(&b_source.restrict(&q)).unwrap();
        let v = norm_on(&image, &q, &op.nu);
        best = best.max(v * v / mass);
    }
    best
}

fn testing_b_pairing(
    op: &OperatorRep,
    b1: &StepFunction,
    b2: &StepFunction,
    radius: u32,
) -> f64 {
    let lat = op.lattice;
    let mut best: f64 = 0.0;
    let norm_b2: Vec<f64> = lat
        .all_cubes()
        .iter()
        .map(|r| norm_on(b2, r, &op.nu))
        .collect();
    for q in lat.all_cubes() {
        if op.mu.mass(&q) == 0.0 {
            continue;
        }
        let nq = norm_on(b1, &q, &op.mu);
        if nq == 0.0 {
            continue;
        }
        let image = op.apply(&b1.restrict(&q)).unwrap();
        let ints = cube_integrals(&image.mul_pointwise(b2), &op.nu);
        let lo = q.g.saturating_sub(radius);
        let hi = (q.g + radius).min(lat.depth);
        for g in lo..=hi {
            let off = lat.gen_offset(g);
            for k in 0..lat.cubes_at(g) {
                let nr = norm_b2[off + k];
                if nr == 0.0 {
                    continue;
                }
                best = best.max(ints[off + k].abs() / (nq * nr));
            }
        }
    }
    best
}

fn testing_b_compression<FU, FV>(
    op: &OperatorRep,
    radius: u32,
    mut diff_source: FU,
    mut diff_target: FV,
) -> f64
where
    FU: FnMut(&CubeId, &StepFunction) -> StepFunction,
    FV: FnMut(&CubeId, &StepFunction) -> StepFunction,
{
    let lat = op.lattice;
    if lat.depth == 0 {
        return 0.0;
    }
    // Orthonormal bases of the target ranges, per non-leaf cube.
    let mut target_bases: Vec<Option<RangeBasis>> = Vec::with_capacity(lat.num_cubes());
    for c in lat.all_cubes() {
        if c.g < lat.depth {
            target_bases.push(Some(range_basis(&lat, &op.nu, &c, |f| diff_target(&c, f))));
        } else {
            target_bases.push(None);
        }
    }
    let mut best: f64 = 0.0;
    for q in lat.all_cubes() {
        if q.g >= lat.depth {
            continue;
        }
        // Orthonormal source basis and its images under T.
        let src = range_basis(&lat, &op.mu, &q, |f| diff_source(&q, f));
        if src.vecs.is_empty() {
            continue;
        }
        let images: Vec<StepFunction> = src
            .vecs
            .iter()
            .map(|e| {
                let mut f = StepFunction::zero(lat);
                for (pos, &l) in src.leaves.iter().enumerate() {
                    f.values[l] = e[pos];
                }
                op.apply(&f).unwrap()
            })
            .collect();
        let lo = q.g.saturating_sub(radius);
        let hi = (q.g + radius).min(lat.depth - 1);
        for g in lo..=hi {
            let off = lat.gen_offset(g);
            for k in 0..lat.cubes_at(g) {
                if let Some(tb) = &target_bases[off + k] {
                    best = best.max(compressed_sup(&images, tb, &op.nu));
                }
            }
        }
    }
    best
}

/// Testing constants for a paired system: unlocalized (a), compression (b),
/// and the change-set condition (c) with its adjoint twin.
pub fn testing_local(
    op: &OperatorRep,
    ps: &PairedSystem,
    rep: &PairedReport,
    radius: u32,
) -> TestingConstants {
    let lat = op.lattice;
    let adj = op.adjoint();

    let (t_a_fwd, t_a_fwd_cut) = testing_a_sys(op, &ps.b1);
    let (t_a_adj, t_a_adj_cut) = testing_a_sys(&adj, &ps.b2);
    let t_b = testing_b_compression(
        op,
        radius,
        |q, f| sys_difference(&ps.b1, &op.mu, q, f).unwrap(),
        |r, f| sys_difference(&ps.b2, &op.nu, r, f).unwrap(),
    );
    let t_c_fwd = testing_c(op, &ps.b1, &rep.r2.s_b, radius);
    let t_c_adj = testing_c(&adj, &ps.b2, &rep.r1.s_b, radius);
    let _ = lat;
    TestingConstants {
        radius,
        t_a_fwd,
        t_a_adj,
        t_a_fwd_cut,
        t_a_adj_cut,
        t_b,
        t_b_delta: t_b,
        t_c_fwd,
        t_c_adj,
    }
}

fn testing_a_sys(op: &OperatorRep, sys: &AccretiveSystem) -> (f64, f64) {
    let lat = op.lattice;
    let mut uncut: f64 = 0.0;
    let mut cut: f64 = 0.0;
    for q in lat.all_cubes() {
        let mass = op.mu.mass(&q);
        if mass == 0.0 {
            continue;
        }
        let image = op.apply(&sys.b_on(&q)).unwrap();
        let full = norm(&image, &op.nu).unwrap();
        let local = norm_on(&image, &q, &op.nu);
        uncut = uncut.max(full * full / mass);
        cut = cut.max(local * local / mass);
    }
    (uncut, cut)
}

/// `sup ‖1_P T(b_Q)‖² / μ(P)` over `P ∈ ch^{r+1}(Q)` in the target change
/// set.
fn testing_c(op: &OperatorRep, sys: &AccretiveSystem, s_b_target: &[usize], radius: u32) -> f64 {
    let lat = op.lattice;
    let mut in_s = vec![false; lat.num_cubes()];
    for &i in s_b_target {
        in_s[i] = true;
    }
    let mut best: f64 = 0.0;
    let span = radius + 1;
    for q in lat.all_cubes() {
        if q.g + span > lat.depth || op.mu.mass(&q) == 0.0 {
            continue;
        }
        let descendants = lat.descendants_at(&q, span).unwrap();
        if !descendants.iter().any(|p| in_s[lat.cube_index(p)]) {
            continue;
        }
        let image = op.apply(&sys.b_on(&q)).unwrap();
        for p in descendants {
            let pi = lat.cube_index(&p);
            if !in_s[pi] {
                continue;
            }
            let mass_p = op.mu.mass_by_index(pi);
            if mass_p == 0.0 {
                continue;
            }
            let v = norm_on(&image, &p, &op.nu);
            best = best.max(v * v / mass_p);
        }
    }
    best
}

/// Everything a verification run reports about one operator, in the shape
/// external tools consume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestingReport {
    pub t_a_fwd: f64,
    pub t_a_adj: f64,
    pub t_b: f64,
    pub t_b_delta: f64,
    pub t_c_fwd: f64,
    pub t_c_adj: f64,
    pub wl_pass: bool,
    pub wl_max_violation: f64,
    pub wl_boundary_violation: f64,
    pub csc_kappa: f64,
    pub csc_identity_violation: f64,
    pub radius: u32,
}

impl TestingReport {
    pub fn from_global(wl: &WlReport, tc: &TestingConstants) -> Self {
        TestingReport {
            t_a_fwd: tc.t_a_fwd,
            t_a_adj: tc.t_a_adj,
            t_b: tc.t_b,
            t_b_delta: tc.t_b_delta,
            t_c_fwd: tc.t_c_fwd,
            t_c_adj: tc.t_c_adj,
            wl_pass: wl.pass,
            wl_max_violation: wl.max_violation,
            wl_boundary_violation: wl.boundary_violation,
            csc_kappa: 1.0,
            csc_identity_violation: 0.0,
            radius: tc.radius,
        }
    }

    pub fn from_local(wl: &WlLocalReport, tc: &TestingConstants) -> Self {
        TestingReport {
            t_a_fwd: tc.t_a_fwd,
            t_a_adj: tc.t_a_adj,
            t_b: tc.t_b,
            t_b_delta: tc.t_b_delta,
            t_c_fwd: tc.t_c_fwd,
            t_c_adj: tc.t_c_adj,
            wl_pass: wl.base.pass,
            wl_max_violation: wl.base.max_violation,
            wl_boundary_violation: wl.base.boundary_violation,
            csc_kappa: wl.csc_kappa,
            csc_identity_violation: wl.csc_identity_violation,
            radius: tc.radius,
        }
    }
}

// ---------------------------------------------------------------------------
// Generators.
// ---------------------------------------------------------------------------

/// Assemble `Σ_Q λ_Q Δ_Q` (plain differences, one measure) as a kernel.
pub fn make_haar_multiplier(
    lattice: Lattice,
    m: &Measure,
    lambda: &[(CubeId, f64)],
) -> Result<OperatorRep> {
    let l = lattice.num_leaves();
    let mut kernel = vec![0.0; l * l];
    for (q, lam) in lambda {
        lattice.require_valid(q)?;
        if q.g >= lattice.depth {
            return Err(Error::LeafCube(q.clone()));
        }
        if *lam == 0.0 {
            continue;
        }
        // Children add their averaging kernels, the cube subtracts its own.
        for ch in lattice.children(q)? {
            add_averaging(&lattice, m, &ch, *lam, &mut kernel);
        }
        add_averaging(&lattice, m, q, -*lam, &mut kernel);
    }
    Ok(OperatorRep {
        lattice,
        kernel,
        mu: m.clone(),
        nu: m.clone(),
        mode: OperatorMode::Multiplier(lambda.to_vec()),
    })
}

fn add_averaging(lat: &Lattice, m: &Measure, q: &CubeId, coef: f64, kernel: &mut [f64]) {
    let mass = m.mass(q);
    if mass == 0.0 {
        return;
    }
    let l = lat.num_leaves();
    let leaves = lat.leaves_of(q);
    for &j in &leaves {
        for &i in &leaves {
            kernel[j * l + i] += coef * m.weight(i) / mass;
        }
    }
}

/// Shift couplings between difference ranges with legs below the radius:
/// guaranteed to pass the triangular scan when both test functions are
/// constant. The coefficient bound caps each coupling against orthonormal
/// range vectors.
pub fn make_shift_std(
    mu: &Measure,
    nu: &Measure,
    radius: u32,
    rng: &mut impl rand::Rng,
    bound: f64,
    density: f64,
) -> Result<OperatorRep> {
    let lat = mu.lattice;
    if nu.lattice != lat {
        return Err(Error::LatticeMismatch("shift: measures on different lattices".into()));
    }
    let l = lat.num_leaves();
    let mut kernel = vec![0.0; l * l];
    let max_leg = radius.saturating_sub(1);
    for c in lat.all_cubes() {
        if c.g >= lat.depth || !rng.gen_bool(density) {
            continue;
        }
        let s = rng.gen_range(0..=max_leg.min(lat.depth - 1 - c.g));
        let t = rng.gen_range(0..=max_leg.min(lat.depth - 1 - c.g));
        let sources = lat.descendants_at(&c, s)?;
        let targets = lat.descendants_at(&c, t)?;
        let p = &sources[rng.gen_range(0..sources.len())];
        let r = &targets[rng.gen_range(0..targets.len())];
        let coef = rng.gen_range(-bound..bound);

        let h_in = normalized_haar(&StepFunction::constant(lat, 1.0), mu, p, rng);
        let h_out = normalized_haar(&StepFunction::constant(lat, 1.0), nu, r, rng);
        let (Some(h_in), Some(h_out)) = (h_in, h_out) else { continue };
        // T f += coef · ⟨f, h_in⟩_μ · h_out
        for j in 0..l {
            let hj = h_out.values[j];
            if hj == 0.0 {
                continue;
            }
            for i in 0..l {
                let hi = h_in.values[i] * mu.weight(i);
                if hi != 0.0 {
                    kernel[j * l + i] += coef * hj * hi;
                }
            }
        }
    }
    OperatorRep::from_dense(lat, kernel, mu.clone(), nu.clone())
}

fn normalized_haar(
    b: &StepFunction,
    m: &Measure,
    q: &CubeId,
    rng: &mut impl rand::Rng,
) -> Option<StepFunction> {
    let lat = m.lattice;
    let seed = StepFunction::new(
        lat,
        (0..lat.num_leaves()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let h = martingale::difference(b, m, q, &seed).ok()?;
    let n = norm(&h, m).ok()?;
    if n < 1e-12 {
        return None;
    }
    Some(h.scale(1.0 / n))
}

/// Structured candidates for an accretive pair, rejection-sampled against
/// the checker; the checker stays normative. Errors after `max_attempts`
/// rejected candidates.
pub fn make_shift_candidate_global(
    mu: &Measure,
    nu: &Measure,
    b1: &AccretiveFunction,
    b2: &AccretiveFunction,
    radius: u32,
    rng: &mut impl rand::Rng,
    bound: f64,
    max_attempts: u32,
    tol: f64,
) -> Result<OperatorRep> {
    let lat = mu.lattice;
    for attempt in 0..max_attempts {
        // Shrink the adapted couplings on successive attempts.
        let scale = 0.5f64.powi(attempt as i32);
        let op = shift_candidate_adapted(mu, nu, &b1.b, &b2.b, radius, rng, bound * scale)?;
        let rep = check_wl_global(&op, b1, b2, radius, tol);
        if rep.pass {
            return Ok(op);
        }
        let _ = lat;
    }
    Err(Error::GeneratorExhausted { attempts: max_attempts })
}

fn shift_candidate_adapted(
    mu: &Measure,
    nu: &Measure,
    b1: &StepFunction,
    b2: &StepFunction,
    radius: u32,
    rng: &mut impl rand::Rng,
    bound: f64,
) -> Result<OperatorRep> {
    let lat = mu.lattice;
    let l = lat.num_leaves();
    let mut kernel = vec![0.0; l * l];
    let max_leg = radius.saturating_sub(1);
    for c in lat.all_cubes() {
        if c.g >= lat.depth || !rng.gen_bool(0.5) {
            continue;
        }
        let s = rng.gen_range(0..=max_leg.min(lat.depth - 1 - c.g));
        let t = rng.gen_range(0..=max_leg.min(lat.depth - 1 - c.g));
        let sources = lat.descendants_at(&c, s)?;
        let targets = lat.descendants_at(&c, t)?;
        let p = &sources[rng.gen_range(0..sources.len())];
        let r = &targets[rng.gen_range(0..targets.len())];
        let coef = rng.gen_range(-bound..bound);
        let h_in = normalized_haar(b1, mu, p, rng);
        let h_out = normalized_haar(b2, nu, r, rng);
        let (Some(h_in), Some(h_out)) = (h_in, h_out) else { continue };
        for j in 0..l {
            let hj = h_out.values[j];
            if hj == 0.0 {
                continue;
            }
            for i in 0..l {
                let hi = h_in.values[i] * mu.weight(i);
                if hi != 0.0 {
                    kernel[j * l + i] += coef * hj * hi;
                }
            }
        }
    }
    OperatorRep::from_dense(lat, kernel, mu.clone(), nu.clone())
}

/// Candidates for a paired system: a bounded multiplication plus scaled
/// system blocks, rejection-sampled against the local checker with the
/// block weight halving on each rejection. The final fallback (weight 0)
/// is a pure multiplication, which always localizes.
pub fn make_shift_candidate_local(
    mu: &Measure,
    nu: &Measure,
    ps: &PairedSystem,
    rep: &PairedReport,
    radius: u32,
    rng: &mut impl rand::Rng,
    bound: f64,
    max_attempts: u32,
    tol: f64,
) -> Result<OperatorRep> {
    let lat = mu.lattice;
    let l = lat.num_leaves();
    for attempt in 0..=max_attempts {
        let block_scale = if attempt == max_attempts { 0.0 } else { 0.5f64.powi(attempt as i32) };
        let w = StepFunction::new(lat, (0..l).map(|_| rng.gen_range(-bound..bound)).collect())?;
        let mut op = OperatorRep::multiplication(&w, mu.clone(), nu.clone());
        if block_scale > 0.0 {
            for c in lat.all_cubes() {
                if c.g >= lat.depth || !rng.gen_bool(0.3) {
                    continue;
                }
                add_system_block(&mut op, ps, &c, rng.gen_range(-bound..bound) * block_scale);
            }
        }
        let wl = check_wl_local(&op, ps, rep, radius, tol);
        if wl.base.pass && wl.csc_kappa.is_finite() {
            return Ok(op);
        }
    }
    Err(Error::GeneratorExhausted { attempts: max_attempts })
}

/// `op += coef · Δ^ν_C ∘ (Δ^μ_C)^*` assembled through the rank-one terms.
fn add_system_block(op: &mut OperatorRep, ps: &PairedSystem, c: &CubeId, coef: f64) {
    let lat = op.lattice;
    let l = lat.num_leaves();
    let Ok(out_op) = crate::accretive_system::sys_difference_op(&ps.b2, &op.nu, c) else {
        return;
    };
    let Ok(in_op) = crate::accretive_system::sys_difference_op(&ps.b1, &op.mu, c) else {
        return;
    };
    let in_t = in_op.transpose_weighted(&op.mu.leaf_weights);
    // Product of two rank-one sums: scalars between inner legs.
    for a in &out_op.terms {
        for b in &in_t.terms {
            let s: f64 = a.inn.iter().zip(&b.out).map(|(x, y)| x * y).sum();
            let cc = coef * s;
            if cc == 0.0 {
                continue;
            }
            for j in 0..l {
                let oj = a.out[j];
                if oj == 0.0 {
                    continue;
                }
                for i in 0..l {
                    let bi = b.inn[i];
                    if bi != 0.0 {
                        op.kernel[j * l + i] += cc * oj * bi;
                    }
                }
            }
        }
    }
    op.mode = OperatorMode::Dense;
}

/// A dense kernel with one coupling between two far cubes of equal
/// generation; the canonical localization counterexample.
pub fn make_far_entry_counterexample(lattice: Lattice, mu: Measure, nu: Measure) -> OperatorRep {
    let l = lattice.num_leaves();
    let mut kernel = vec![0.0; l * l];
    kernel[(l - 1) * l] = 1.0;
    OperatorRep { lattice, kernel, mu, nu, mode: OperatorMode::Dense }
}
