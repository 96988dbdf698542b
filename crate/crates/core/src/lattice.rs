use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard cap on `n * depth`; above this the leaf arrays stop being "desk
/// scale" and every dense routine in the crate would blow up.
pub const MAX_TOTAL_BITS: u32 = 20;

/// A finite dyadic tree over the unit cube in dimension `n`.
///
/// Generation `g` holds the `2^(n*g)` cubes of side length `2^-g`;
/// generation `depth` holds the leaves. Cube enumeration order is
/// (generation, lexicographic coordinates) everywhere, so indices and
/// serialized reports are stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lattice {
    pub n: u32,
    pub depth: u32,
}

/// Address of one cube: generation plus per-axis coordinates in `[0, 2^g)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CubeId {
    pub g: u32,
    pub coords: Vec<u64>,
}

impl CubeId {
    pub fn new(g: u32, coords: Vec<u64>) -> Self {
        CubeId { g, coords }
    }

    /// Side length `2^-g`, exact in f64 for any sane generation.
    pub fn side_length(&self) -> f64 {
        (0.5f64).powi(self.g as i32)
    }
}

impl Lattice {
    pub fn new(n: u32, depth: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::InfeasibleParams("dimension n must be positive".into()));
        }
        if n * depth > MAX_TOTAL_BITS {
            return Err(Error::InfeasibleParams(format!(
                "n*depth = {} exceeds the supported {} bits (2^{} leaves)",
                n * depth,
                MAX_TOTAL_BITS,
                n * depth
            )));
        }
        Ok(Lattice { n, depth })
    }

    pub fn root(&self) -> CubeId {
        CubeId::new(0, vec![0; self.n as usize])
    }

    pub fn num_leaves(&self) -> usize {
        1usize << (self.n * self.depth)
    }

    /// Number of cubes in generation `g`.
    pub fn cubes_at(&self, g: u32) -> usize {
        1usize << (self.n * g)
    }

    /// Total number of cubes over all generations `0..=depth`.
    pub fn num_cubes(&self) -> usize {
        (0..=self.depth).map(|g| self.cubes_at(g)).sum()
    }

    /// Offset of generation `g` in the flat cube enumeration.
    pub fn gen_offset(&self, g: u32) -> usize {
        (0..g).map(|h| self.cubes_at(h)).sum()
    }

    pub fn is_valid(&self, c: &CubeId) -> bool {
        c.g <= self.depth
            && c.coords.len() == self.n as usize
            && c.coords.iter().all(|&x| x < (1u64 << c.g))
    }

    /// Lexicographic rank of `c` within its generation (axis 0 most
    /// significant).
    pub fn lex_rank(&self, c: &CubeId) -> usize {
        let mut r: usize = 0;
        for &x in &c.coords {
            r = (r << c.g) | x as usize;
        }
        r
    }

    /// Flat index of `c` in (generation, lexicographic) order.
    pub fn cube_index(&self, c: &CubeId) -> usize {
        debug_assert!(self.is_valid(c));
        self.gen_offset(c.g) + self.lex_rank(c)
    }

    pub fn cube_from_index(&self, mut idx: usize) -> CubeId {
        for g in 0..=self.depth {
            let count = self.cubes_at(g);
            if idx < count {
                let mut coords = vec![0u64; self.n as usize];
                let mut r = idx;
                for i in (0..self.n as usize).rev() {
                    coords[i] = (r & ((1usize << g) - 1)) as u64;
                    r >>= g;
                }
                return CubeId::new(g, coords);
            }
            idx -= count;
        }
        panic!("cube index out of range");
    }

    /// Leaf index of a generation-`depth` cube.
    pub fn leaf_index(&self, c: &CubeId) -> usize {
        debug_assert_eq!(c.g, self.depth);
        self.lex_rank(c)
    }

    pub fn leaf_cube(&self, idx: usize) -> CubeId {
        let mut coords = vec![0u64; self.n as usize];
        let mut r = idx;
        for i in (0..self.n as usize).rev() {
            coords[i] = (r & ((1usize << self.depth) - 1)) as u64;
            r >>= self.depth;
        }
        CubeId::new(self.depth, coords)
    }

    /// Parent cube, or `None` at the root.
    pub fn parent(&self, c: &CubeId) -> Option<CubeId> {
        if c.g == 0 {
            return None;
        }
        Some(CubeId::new(c.g - 1, c.coords.iter().map(|&x| x >> 1).collect()))
    }

    /// Ancestor of order `r`, clamped to the root when `r` exceeds the
    /// generation. Clamping keeps containment tests meaningful for the
    /// single-root model.
    pub fn ancestor(&self, c: &CubeId, r: u32) -> CubeId {
        let steps = r.min(c.g);
        CubeId::new(c.g - steps, c.coords.iter().map(|&x| x >> steps).collect())
    }

    pub fn children(&self, c: &CubeId) -> Result<Vec<CubeId>> {
        self.descendants_at(c, 1)
    }

    /// All `2^(n*r)` descendants of `c` exactly `r` generations down.
    pub fn descendants_at(&self, c: &CubeId, r: u32) -> Result<Vec<CubeId>> {
        if c.g + r > self.depth {
            return Err(Error::DepthExceeded { requested: c.g + r, depth: self.depth });
        }
        let n = self.n as usize;
        let per_axis = 1u64 << r;
        let total = 1usize << (self.n * r);
        let mut out = Vec::with_capacity(total);
        for k in 0..total {
            let mut coords = vec![0u64; n];
            let mut kk = k as u64;
            for i in (0..n).rev() {
                let off = kk & (per_axis - 1);
                kk >>= r;
                coords[i] = (c.coords[i] << r) | off;
            }
            out.push(CubeId::new(c.g + r, coords));
        }
        Ok(out)
    }

    /// True iff `b ⊆ a` as dyadic cubes.
    pub fn contains(&self, a: &CubeId, b: &CubeId) -> bool {
        if b.g < a.g {
            return false;
        }
        self.ancestor(b, b.g - a.g) == *a
    }

    /// Visit the leaf indices under `c`, in leaf-enumeration order within
    /// the cube. Rows along the last axis are contiguous runs.
    pub fn for_each_leaf<F: FnMut(usize)>(&self, c: &CubeId, mut f: F) {
        let shift = self.depth - c.g;
        let run = 1usize << shift;
        let n = self.n as usize;
        if n == 1 {
            let base = (c.coords[0] as usize) << shift;
            for l in base..base + run {
                f(l);
            }
            return;
        }
        // Row-major over the leading n-1 axes; last axis is contiguous.
        let rows = 1usize << ((n as u32 - 1) * shift);
        for row in 0..rows {
            let mut base = 0usize;
            let mut rr = row;
            for i in (0..n - 1).rev() {
                let off = rr & (run - 1);
                rr >>= shift;
                base |= ((c.coords[i] as usize) << shift | off) << ((n - 1 - i) * self.depth as usize);
            }
            base |= (c.coords[n - 1] as usize) << shift;
            for l in base..base + run {
                f(l);
            }
        }
    }

    pub fn leaves_of(&self, c: &CubeId) -> Vec<usize> {
        let mut v = Vec::with_capacity(1usize << (self.n * (self.depth - c.g)));
        self.for_each_leaf(c, |l| v.push(l));
        v
    }

    /// Position of `leaf` inside `c`'s leaf enumeration (the order used by
    /// `for_each_leaf`). Unchecked precondition: the leaf lies under `c`.
    pub fn leaf_rank_within(&self, c: &CubeId, leaf: usize) -> usize {
        let shift = self.depth - c.g;
        let leaf_cube = self.leaf_cube(leaf);
        let mut r = 0usize;
        for i in 0..self.n as usize {
            let off = leaf_cube.coords[i] - (c.coords[i] << shift);
            r = (r << shift) | off as usize;
        }
        r
    }

    /// All cubes in (generation, lexicographic) order.
    pub fn all_cubes(&self) -> Vec<CubeId> {
        let mut v = Vec::with_capacity(self.num_cubes());
        for g in 0..=self.depth {
            for k in 0..self.cubes_at(g) {
                v.push(self.cube_from_index(self.gen_offset(g) + k));
            }
        }
        v
    }

    pub fn require_valid(&self, c: &CubeId) -> Result<()> {
        if self.is_valid(c) {
            Ok(())
        } else {
            Err(Error::InvalidData(format!("cube {c:?} not in lattice {self:?}")))
        }
    }
}
