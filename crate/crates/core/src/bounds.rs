//! Explicit constants for every inequality the trace asserts. Each formula
//! is derived from four primitives that hold exactly in the finite model:
//!
//! * the unweighted square-function sum is at most `‖f‖²` (orthogonality of
//!   the plain martingale differences),
//! * the embedding estimate `Σ a_Q ⟨f⟩_Q² ≤ 4 Λ ‖f‖²` with the classical
//!   factor 4 (maximal-function constant 2, squared),
//! * the expectation bound `‖E_Q f‖ ≤ (c/δ)·‖f 1_Q‖`,
//! * packing constants of change sets as computed.
//!
//! Everything downstream is triangle inequalities and Cauchy-Schwarz with
//! the bookkeeping spelled out per function.

/// Classical factor in the embedding estimate.
pub const EMBEDDING_FACTOR: f64 = 4.0;

/// Sharp bound of the unweighted square-function ratio in the finite model.
pub const USF_BOUND: f64 = 1.0;

/// `‖E_Q f‖ ≤ (c/δ)·‖f 1_Q‖`.
pub fn expectation_bound(delta: f64, c: f64) -> f64 {
    c / delta
}

/// Tail sums of differences: `‖Σ_{g ≥ d} Δ_Q f‖ ≤ (1 + c/δ)·‖f‖` for every
/// truncation depth `d` (the tail telescopes to `f` minus one generation of
/// expectations, whose squares add over disjoint supports).
pub fn truncation_bound(delta: f64, c: f64) -> f64 {
    1.0 + c / delta
}

/// Defect size: `‖φ_P‖ ≤ (c/δ)(c/δ + 1)·|⟨f⟩_Q| μ(P)^{1/2}`.
pub fn phi_bound(delta: f64, c: f64) -> f64 {
    let r = c / delta;
    r * (r + 1.0)
}

/// Mass-decay rate of one stopping generation: `(c−δ)/(c−δ²)`, with
/// constant exactly one. From `δ μ(R) ≤ |∫_R b| ≤ c μ(R∖E) + δ² μ(E)`.
pub fn tau(delta: f64, c: f64) -> f64 {
    (c - delta) / (c - delta * delta)
}

/// Geometric accumulation of stop masses inside any cube.
pub fn stopping_carleson_bound(t: f64) -> f64 {
    1.0 / (1.0 - t)
}

/// Packing constant of the change sequence `β`:
/// `Λ_β ≤ c²(5 + Λ)`. Per cube `R`: the own term costs `4c²`, the
/// same-anchor stratum is one square-function sum of a function bounded by
/// `c` (`≤ c² μ(R)`), and the strata below changed cubes pay `c² μ(P)` each,
/// packed by `Λ`.
pub fn beta_carleson_bound(c: f64, lambda: f64) -> f64 {
    c * c * (5.0 + lambda)
}

/// Square-function sum over differences only (no root term):
/// `Σ ‖Δ_Q f‖² ≤ K·‖f‖²` with
/// `K = 8(5+Λ)(c/δ)⁴ + (32Λ + 2)(c/δ)²`.
///
/// Chain per non-root cube, after inserting the parent function scaled by
/// the child's average: the change term is controlled by the embedding
/// estimate against `β` (giving `2(c²/δ⁴)·4·Λ_β`), cubes in the change set
/// pay `2·4(c/δ)²` against the packing of the change set (embedding gives
/// another 4), and the average-jump term is `2(c/δ)²` by the unweighted
/// square-function bound.
pub fn sq_delta_bound(delta: f64, c: f64, lambda: f64) -> f64 {
    let x = c / delta;
    let x2 = x * x;
    8.0 * (5.0 + lambda) * x2 * x2 + (32.0 * lambda + 2.0) * x2
}

/// Square-function sum including the root expectation.
pub fn sq_bound(delta: f64, c: f64, lambda: f64) -> f64 {
    let x = c / delta;
    sq_delta_bound(delta, c, lambda) + x * x
}

/// Dual square-function sum `Σ ‖(Δ_Q)^* f‖² ≤ K·‖f‖²` with
/// `K = 8(5+Λ)(c/δ)⁴ + (48Λ + 6)(c/δ)²`.
///
/// Same insertion on the adjoint side: change-set cubes pay
/// `2(2c)²/δ²·4Λ`, the off-change term meets `β` (`2(c²/δ⁴)·4Λ_β`), and the
/// numerator-jump term splits along the partition into an unchanged part
/// (`c²` by the square-function bound applied to `b·f`) plus a changed part
/// (`2c²(1+4Λ)` via the maximal-stopping-descendant decomposition), all
/// divided by `δ²` and doubled.
pub fn dual_delta_bound(delta: f64, c: f64, lambda: f64) -> f64 {
    let x = c / delta;
    let x2 = x * x;
    8.0 * (5.0 + lambda) * x2 * x2 + (48.0 * lambda + 6.0) * x2
}

/// Specialization of `sq_bound` for a single accretive function
/// (empty change set): `40(c/δ)⁴ + 3(c/δ)²`.
pub fn mart_sq_bound(delta: f64, c: f64) -> f64 {
    sq_bound(delta, c, 0.0)
}

/// Dual version for a single accretive function: `40(c/δ)⁴ + 2(c/δ)²`
/// (without a change set the numerator-jump term is a single
/// square-function sum of `b·f`).
pub fn mart_dual_bound(delta: f64, c: f64) -> f64 {
    let x = c / delta;
    let x2 = x * x;
    40.0 * x2 * x2 + 2.0 * x2
}

/// Comparable-window counting: number of cubes `R ⊆ Q^{(r)}` with
/// `2^{-r} ℓ(Q) ≤ ℓ(R) ≤ ℓ(Q)`, counted generation by generation.
pub fn m_count(n: u32, r: u32) -> f64 {
    (0..=r).map(|t| (1u64 << (n * (r + t))) as f64).sum()
}

/// Reverse multiplicity: a fixed `R` plays that role for at most
/// `(r+1)·2^{n r}` cubes `Q`.
pub fn n_count(n: u32, r: u32) -> f64 {
    ((r + 1) as u64 * (1u64 << (n * r))) as f64
}

/// Number of non-leaf cubes in generations `0..=min(r, depth-1)`; the
/// finite count entering the near-root tail of the collapsed sum.
pub fn shallow_cube_count(n: u32, r: u32, depth: u32) -> f64 {
    if depth == 0 {
        return 0.0;
    }
    let top = r.min(depth - 1);
    (0..=top).map(|g| (1u64 << (n * g)) as f64).sum()
}
