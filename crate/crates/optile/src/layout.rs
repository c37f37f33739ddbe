//! Data layouts: functions from a tensor shape to a buffer indexing
//! expression, which is a bijection from tensor coordinates to buffer offsets.
//!
//! A layout is a permutation of the logical dimensions (outermost physical
//! dimension first) optionally extended with packed strips. Packing a
//! dimension `d` with strip size `s` splits it into a quotient dimension
//! `x_d / s`, kept at `d`'s position in the order, and a remainder dimension
//! `x_d mod s` placed innermost. A strip may additionally be odd-even
//! shuffled, replacing the remainder with `shuffle(s, x_d mod s)`; a full
//! shuffled strip occupies the same byte range as an unshuffled one, so lane
//! order changes while residency does not.
//!
//! Layouts also drive two abstract analyses carried on tensor specs and
//! updated when tiling:
//!
//! * *contiguousness*: how many innermost physical dimensions span densely
//!   packed bytes, and
//! * *alignment*: whether every tile origin falls on a cache-line boundary.
//!
//! Both are deliberately conservative; property tests check they never claim
//! more than a brute-force enumeration of buffer offsets confirms.

use std::collections::HashMap;
use std::fmt;

#[derive(Clone, Copy, Debug, Eq, PartialEq, Hash)]
pub struct Pack {
    pub dim: u8,
    pub size: u32,
    pub odd_even: bool,
}

#[derive(Clone, Debug, Eq, PartialEq, Hash)]
pub struct Layout {
    /// Logical dimensions, outermost physical dimension first.
    pub order: Vec<u8>,
    /// At most one pack per logical dimension; strips are placed innermost,
    /// in list order.
    pub packs: Vec<Pack>,
}

#[derive(thiserror::Error, Debug, Clone, Eq, PartialEq)]
pub enum LayoutError {
    #[error("layout order is not a permutation of 0..{rank}")]
    BadOrder { rank: u8 },
    #[error("pack on dimension {dim} is invalid: {reason}")]
    BadPack { dim: u8, reason: &'static str },
    #[error("strip size {size} does not divide extent {extent}")]
    NonDividingStrip { size: u32, extent: u32 },
    #[error("tile shape does not divide the source shape")]
    NonDividingTile,
}

/// Odd-even (riffle) interleave of a strip index: element `x` of a strip of
/// even size `s` lands at `2 * (x mod (s/2)) + floor(2x / s)`.
///
/// Panics if `s` is odd or `x` is out of range.
pub fn odd_even_shuffle(s: u32, x: u32) -> u32 {
    assert!(s > 0 && s % 2 == 0, "strip size must be even, got {s}");
    assert!(x < s, "index {x} out of range for strip size {s}");
    2 * (x % (s / 2)) + 2 * x / s
}

#[derive(Clone, Copy, Debug, Eq, PartialEq, Hash)]
pub enum PhysDimKind {
    /// The whole logical dimension.
    Whole,
    /// `x / size` of a packed logical dimension.
    Quotient { size: u32 },
    /// `x mod size` of a packed logical dimension, possibly shuffled.
    Strip { size: u32, odd_even: bool },
}

/// One physical dimension of a layout instantiated at a concrete shape.
#[derive(Clone, Copy, Debug, Eq, PartialEq, Hash)]
pub struct PhysDim {
    pub logical: u8,
    pub kind: PhysDimKind,
    pub extent: u32,
}

impl Layout {
    pub fn row_major(rank: u8) -> Layout {
        Layout {
            order: (0..rank).collect(),
            packs: Vec::new(),
        }
    }

    pub fn col_major(rank: u8) -> Layout {
        Layout {
            order: (0..rank).rev().collect(),
            packs: Vec::new(),
        }
    }

    pub fn with_pack(mut self, dim: u8, size: u32, odd_even: bool) -> Layout {
        self.packs.push(Pack {
            dim,
            size,
            odd_even,
        });
        self
    }

    pub fn rank(&self) -> u8 {
        self.order.len() as u8
    }

    /// Structural validity for a given rank. Divisibility against a shape is
    /// checked separately: tiles legitimately carry layouts whose strip sizes
    /// exceed the tile extents.
    pub fn check(&self, rank: u8) -> Result<(), LayoutError> {
        let mut seen = vec![false; rank as usize];
        if self.order.len() != rank as usize {
            return Err(LayoutError::BadOrder { rank });
        }
        for &d in &self.order {
            if d >= rank || seen[d as usize] {
                return Err(LayoutError::BadOrder { rank });
            }
            seen[d as usize] = true;
        }
        let mut packed = vec![false; rank as usize];
        for p in &self.packs {
            if p.dim >= rank {
                return Err(LayoutError::BadPack {
                    dim: p.dim,
                    reason: "dimension out of range",
                });
            }
            if packed[p.dim as usize] {
                return Err(LayoutError::BadPack {
                    dim: p.dim,
                    reason: "dimension packed twice",
                });
            }
            packed[p.dim as usize] = true;
            if p.size < 2 || !p.size.is_power_of_two() {
                return Err(LayoutError::BadPack {
                    dim: p.dim,
                    reason: "strip size must be a power of two >= 2",
                });
            }
            if p.odd_even && p.size < 4 {
                return Err(LayoutError::BadPack {
                    dim: p.dim,
                    reason: "shuffled strips need size >= 4",
                });
            }
        }
        Ok(())
    }

    fn pack_for(&self, dim: u8) -> Option<&Pack> {
        self.packs.iter().find(|p| p.dim == dim)
    }

    /// The physical dimensions at a concrete shape, outermost first. Strip
    /// extents clamp to the shape, so this is usable for tiles smaller than
    /// the strip size.
    pub fn physical_dims(&self, shape: &[u32]) -> Vec<PhysDim> {
        debug_assert_eq!(shape.len(), self.order.len());
        let mut dims = Vec::with_capacity(self.order.len() + self.packs.len());
        for &d in &self.order {
            let extent = shape[d as usize];
            match self.pack_for(d) {
                None => dims.push(PhysDim {
                    logical: d,
                    kind: PhysDimKind::Whole,
                    extent,
                }),
                Some(p) => dims.push(PhysDim {
                    logical: d,
                    kind: PhysDimKind::Quotient { size: p.size },
                    extent: extent.div_ceil(p.size),
                }),
            }
        }
        for p in &self.packs {
            dims.push(PhysDim {
                logical: p.dim,
                kind: PhysDimKind::Strip {
                    size: p.size,
                    odd_even: p.odd_even,
                },
                extent: shape[p.dim as usize].min(p.size),
            });
        }
        dims
    }

    /// Buffer offset for one coordinate. The workhorse behind both the
    /// symbolic indexing expression and the brute-force property checks.
    pub fn buffer_offset(&self, shape: &[u32], coord: &[u32]) -> u64 {
        let phys = self.physical_dims(shape);
        let strides = phys_strides(&phys);
        let mut offset = 0u64;
        for (pd, stride) in phys.iter().zip(&strides) {
            let x = coord[pd.logical as usize];
            let term = match pd.kind {
                PhysDimKind::Whole => x,
                PhysDimKind::Quotient { size } => x / size,
                PhysDimKind::Strip { size, odd_even } => {
                    let rem = x % size;
                    if odd_even {
                        odd_even_shuffle(size, rem)
                    } else {
                        rem
                    }
                }
            };
            offset += u64::from(term) * stride;
        }
        offset
    }

    /// The symbolic buffer indexing expression at a concrete shape, over
    /// coordinate symbols `0..rank`. Fails when a strip size does not divide
    /// its packed extent, since the expression would not be a bijection.
    pub fn buffer_index_expr(&self, shape: &[u32]) -> Result<IndexExpr, LayoutError> {
        self.check(shape.len() as u8)?;
        for p in &self.packs {
            let extent = shape[p.dim as usize];
            if p.size > extent || extent % p.size != 0 {
                return Err(LayoutError::NonDividingStrip {
                    size: p.size,
                    extent,
                });
            }
        }
        let phys = self.physical_dims(shape);
        let strides = phys_strides(&phys);
        let mut terms = Vec::new();
        for (pd, &stride) in phys.iter().zip(&strides) {
            if pd.extent == 1 {
                continue;
            }
            let x = IndexExpr::Sym(u32::from(pd.logical));
            let term = match pd.kind {
                PhysDimKind::Whole => x,
                PhysDimKind::Quotient { size } => x.div_const(i64::from(size)),
                PhysDimKind::Strip { size, odd_even } => {
                    let rem = x.mod_const(i64::from(size));
                    if odd_even {
                        shuffle_expr(size, rem)
                    } else {
                        rem
                    }
                }
            };
            terms.push(term.mul_const(stride as i64));
        }
        Ok(IndexExpr::sum(terms))
    }

    /// A shape-specific fingerprint of the indexing expression: the physical
    /// dimensions with extent > 1, canonicalized. Unshuffled strips covering
    /// the whole extent collapse to whole dimensions, and a quotient/strip
    /// pair whose strides nest exactly (`(x/s)*s*t + (x%s)*t = x*t`) merges
    /// back into one dimension. Two layouts with equal signatures index
    /// identically at that shape.
    pub fn signature(&self, shape: &[u32]) -> Vec<(u8, PhysDimKind, u32, u64)> {
        let phys = self.physical_dims(shape);
        let strides = phys_strides(&phys);
        let mut sig = Vec::new();
        for (pd, &stride) in phys.iter().zip(&strides) {
            if pd.extent == 1 {
                continue;
            }
            let mut kind = pd.kind;
            if let PhysDimKind::Strip { size, odd_even } = kind {
                // A strip at least as large as the extent is the identity map
                // unless shuffled.
                if !odd_even && size >= shape[pd.logical as usize] {
                    kind = PhysDimKind::Whole;
                }
            }
            sig.push((pd.logical, kind, pd.extent, stride));
        }
        loop {
            let mut merged = false;
            'outer: for qi in 0..sig.len() {
                let (d, PhysDimKind::Quotient { size }, qe, qs) = sig[qi] else {
                    continue;
                };
                for si in 0..sig.len() {
                    let (sd, PhysDimKind::Strip { size: ss, odd_even: false }, se, st) = sig[si]
                    else {
                        continue;
                    };
                    if sd == d && ss == size && se == size && qs == u64::from(size) * st {
                        sig[qi] = (d, PhysDimKind::Whole, qe * se, st);
                        sig.remove(si);
                        merged = true;
                        break 'outer;
                    }
                }
            }
            if !merged {
                break;
            }
        }
        sig.sort_by(|a, b| b.3.cmp(&a.3).then(a.0.cmp(&b.0)));
        sig
    }

    pub fn extensionally_equal(&self, other: &Layout, shape: &[u32]) -> bool {
        self.signature(shape) == other.signature(shape)
    }

    /// Physical rank: the number of physical dimensions, counting strips.
    pub fn physical_rank(&self) -> u8 {
        (self.order.len() + self.packs.len()) as u8
    }
}

fn phys_strides(phys: &[PhysDim]) -> Vec<u64> {
    let mut strides = vec![0u64; phys.len()];
    let mut acc = 1u64;
    for (i, pd) in phys.iter().enumerate().rev() {
        strides[i] = acc;
        acc *= u64::from(pd.extent);
    }
    strides
}

fn shuffle_expr(size: u32, rem: IndexExpr) -> IndexExpr {
    // shuffle(s, x) = 2 * (x mod (s/2)) + 2x / s, here with x = rem.
    let half = i64::from(size / 2);
    IndexExpr::sum(vec![
        rem.clone().mod_const(half).mul_const(2),
        rem.mul_const(2).div_const(i64::from(size)),
    ])
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rank = self.rank();
        let row: Vec<u8> = (0..rank).collect();
        let col: Vec<u8> = (0..rank).rev().collect();
        if self.order == row {
            write!(f, "row_major")?;
        } else if rank >= 2 && self.order == col {
            write!(f, "col_major")?;
        } else {
            write!(f, "order(")?;
            for (i, d) in self.order.iter().enumerate() {
                if i > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{d}")?;
            }
            write!(f, ")")?;
        }
        for p in &self.packs {
            if p.odd_even {
                write!(f, "+pack_shuf({},{})", p.dim, p.size)?;
            } else {
                write!(f, "+pack({},{})", p.dim, p.size)?;
            }
        }
        Ok(())
    }
}

/// An integer index expression: sums of coordinate symbols scaled, floor
/// divided, and reduced modulo constants. Evaluable at any point and
/// printable as C arithmetic.
#[derive(Clone, Debug, Eq, PartialEq, Hash)]
pub enum IndexExpr {
    Const(i64),
    Sym(u32),
    Add(Box<IndexExpr>, Box<IndexExpr>),
    Mul(Box<IndexExpr>, i64),
    Div(Box<IndexExpr>, i64),
    Mod(Box<IndexExpr>, i64),
}

impl IndexExpr {
    pub fn sum(terms: Vec<IndexExpr>) -> IndexExpr {
        let mut terms: Vec<IndexExpr> = terms
            .into_iter()
            .filter(|t| !matches!(t, IndexExpr::Const(0)))
            .collect();
        match terms.len() {
            0 => IndexExpr::Const(0),
            1 => terms.pop().unwrap(),
            _ => {
                let mut it = terms.into_iter();
                let first = it.next().unwrap();
                it.fold(first, |acc, t| IndexExpr::Add(Box::new(acc), Box::new(t)))
            }
        }
    }

    pub fn add(self, other: IndexExpr) -> IndexExpr {
        match (&self, &other) {
            (IndexExpr::Const(0), _) => other,
            (_, IndexExpr::Const(0)) => self,
            (IndexExpr::Const(a), IndexExpr::Const(b)) => IndexExpr::Const(a + b),
            _ => IndexExpr::Add(Box::new(self), Box::new(other)),
        }
    }

    pub fn mul_const(self, c: i64) -> IndexExpr {
        match (&self, c) {
            (_, 0) => IndexExpr::Const(0),
            (_, 1) => self,
            (IndexExpr::Const(a), _) => IndexExpr::Const(a * c),
            _ => IndexExpr::Mul(Box::new(self), c),
        }
    }

    pub fn div_const(self, c: i64) -> IndexExpr {
        debug_assert!(c > 0);
        match (&self, c) {
            (_, 1) => self,
            (IndexExpr::Const(a), _) => IndexExpr::Const(a.div_euclid(c)),
            _ => IndexExpr::Div(Box::new(self), c),
        }
    }

    pub fn mod_const(self, c: i64) -> IndexExpr {
        debug_assert!(c > 0);
        match (&self, c) {
            (_, 1) => IndexExpr::Const(0),
            (IndexExpr::Const(a), _) => IndexExpr::Const(a.rem_euclid(c)),
            _ => IndexExpr::Mod(Box::new(self), c),
        }
    }

    pub fn eval(&self, env: &impl Fn(u32) -> i64) -> i64 {
        match self {
            IndexExpr::Const(c) => *c,
            IndexExpr::Sym(s) => env(*s),
            IndexExpr::Add(a, b) => a.eval(env) + b.eval(env),
            IndexExpr::Mul(a, c) => a.eval(env) * c,
            IndexExpr::Div(a, c) => a.eval(env).div_euclid(*c),
            IndexExpr::Mod(a, c) => a.eval(env).rem_euclid(*c),
        }
    }

    /// Replaces each symbol with the expression `subst` returns for it.
    pub fn substitute(&self, subst: &impl Fn(u32) -> IndexExpr) -> IndexExpr {
        match self {
            IndexExpr::Const(c) => IndexExpr::Const(*c),
            IndexExpr::Sym(s) => subst(*s),
            IndexExpr::Add(a, b) => a.substitute(subst).add(b.substitute(subst)),
            IndexExpr::Mul(a, c) => a.substitute(subst).mul_const(*c),
            IndexExpr::Div(a, c) => a.substitute(subst).div_const(*c),
            IndexExpr::Mod(a, c) => a.substitute(subst).mod_const(*c),
        }
    }

    pub fn free_symbols(&self, out: &mut Vec<u32>) {
        match self {
            IndexExpr::Const(_) => {}
            IndexExpr::Sym(s) => {
                if !out.contains(s) {
                    out.push(*s);
                }
            }
            IndexExpr::Add(a, b) => {
                a.free_symbols(out);
                b.free_symbols(out);
            }
            IndexExpr::Mul(a, _) | IndexExpr::Div(a, _) | IndexExpr::Mod(a, _) => {
                a.free_symbols(out)
            }
        }
    }
}

/// Result of re-deriving the layout analyses for a tile of a source tensor.
#[derive(Clone, Copy, Debug, Eq, PartialEq)]
pub struct TileAnalysis {
    pub aligned: bool,
    pub contiguousness: u8,
}

/// Derives the alignment and contiguousness of a tile. The layout itself is
/// inherited from the source unchanged.
///
/// Contiguousness counts the innermost physical dimensions whose elements the
/// tile covers as one dense run of bytes per outer coordinate: full source
/// dimensions extend a run, a single partial (unshuffled) dimension may cap
/// it, and extent-1 dimensions pass through. A tile is aligned only when the
/// source was aligned and fully contiguous and every tiled physical dimension
/// steps its origins by a multiple of the cache line.
pub fn tile_transfer(
    src_shape: &[u32],
    layout: &Layout,
    src_aligned: bool,
    src_contig: u8,
    tile_shape: &[u32],
    dtype_bytes: u64,
    line_size: u64,
) -> Result<TileAnalysis, LayoutError> {
    if src_shape.len() != tile_shape.len() {
        return Err(LayoutError::NonDividingTile);
    }
    for (t, s) in tile_shape.iter().zip(src_shape) {
        if *t == 0 || t > s || s % t != 0 {
            return Err(LayoutError::NonDividingTile);
        }
    }
    let src_phys = layout.physical_dims(src_shape);
    let tile_phys = layout.physical_dims(tile_shape);
    let strides = phys_strides(&src_phys);
    let rank = src_phys.len();

    // Contiguousness: scan physical dims innermost-out.
    let mut contig = 0u8;
    let mut all_inner_full = true;
    for j in (0..rank).rev() {
        let t = tile_phys[j].extent;
        let s = src_phys[j].extent;
        if t == 1 {
            contig += 1;
            if s > 1 {
                all_inner_full = false;
            }
            continue;
        }
        let dims_at_or_inner = (rank - j) as u8;
        if dims_at_or_inner > src_contig || !all_inner_full {
            break;
        }
        if let PhysDimKind::Strip {
            odd_even: true, ..
        } = tile_phys[j].kind
        {
            // A partial shuffled strip scatters; a full one is still dense.
            if t < s {
                break;
            }
        }
        contig += 1;
        if t < s {
            all_inner_full = false;
        }
    }

    // Alignment: every tiled physical dimension must step tile origins by a
    // whole number of cache lines, and shuffled strips may not be tiled.
    let src_fully_contig = src_contig >= layout.physical_rank();
    let mut aligned = src_aligned && src_fully_contig;
    if aligned {
        for j in 0..rank {
            let t = u64::from(tile_phys[j].extent);
            let s = u64::from(src_phys[j].extent);
            if t == s {
                continue;
            }
            let shuffled = matches!(
                tile_phys[j].kind,
                PhysDimKind::Strip {
                    odd_even: true,
                    ..
                }
            );
            if shuffled || (t * strides[j] * dtype_bytes) % line_size != 0 {
                aligned = false;
                break;
            }
        }
    }

    Ok(TileAnalysis {
        aligned,
        contiguousness: contig,
    })
}

/// Number of cache lines backing a tensor: its bytes are split into dense
/// runs spanning the innermost `contig` physical dimensions, and each run
/// occupies whole lines.
pub fn cache_lines(
    shape: &[u32],
    layout: &Layout,
    contig: u8,
    dtype_bytes: u64,
    line_size: u64,
) -> u64 {
    let phys = layout.physical_dims(shape);
    let run_elems: u64 = phys
        .iter()
        .rev()
        .take(contig as usize)
        .map(|pd| u64::from(pd.extent))
        .product();
    let run_bytes = run_elems * dtype_bytes;
    let total_bytes: u64 = phys.iter().map(|pd| u64::from(pd.extent)).product::<u64>() * dtype_bytes;
    debug_assert_eq!(total_bytes % run_bytes, 0);
    (total_bytes / run_bytes) * run_bytes.div_ceil(line_size)
}

/// Lexicographic index of this layout's dimension order among all
/// permutations of its rank. Stable across runs; used by compact encodings.
pub fn order_code(order: &[u8]) -> u8 {
    let rank = order.len();
    let mut remaining: Vec<u8> = (0..rank as u8).collect();
    let mut code = 0usize;
    for (i, &d) in order.iter().enumerate() {
        let pos = remaining.iter().position(|&r| r == d).unwrap();
        let mut factorial = 1usize;
        for f in 1..(rank - i) {
            factorial *= f;
        }
        code += pos * factorial;
        remaining.remove(pos);
    }
    code as u8
}

pub fn order_from_code(rank: u8, mut code: usize) -> Option<Vec<u8>> {
    let mut remaining: Vec<u8> = (0..rank).collect();
    let mut order = Vec::with_capacity(rank as usize);
    for i in 0..rank {
        let mut factorial = 1usize;
        for f in 1..(rank - i) as usize {
            factorial *= f;
        }
        let pos = code / factorial;
        if pos >= remaining.len() {
            return None;
        }
        code %= factorial;
        order.push(remaining.remove(pos));
    }
    Some(order)
}

/// One-byte pack descriptor: `dim << 6 | shuffled << 5 | log2(size)`, with 0
/// meaning no pack on any dimension.
pub fn pack_code(pack: &Pack) -> u8 {
    (pack.dim << 6) | ((pack.odd_even as u8) << 5) | (pack.size.ilog2() as u8)
}

pub fn pack_from_code(code: u8) -> Option<Pack> {
    if code == 0 {
        return None;
    }
    Some(Pack {
        dim: code >> 6,
        size: 1 << (code & 0x1f),
        odd_even: (code >> 5) & 1 == 1,
    })
}

fn permutations(rank: u8) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    for _ in 0..rank {
        let mut next = Vec::new();
        for p in &out {
            for d in 0..rank {
                if !p.contains(&d) {
                    let mut q = p.clone();
                    q.push(d);
                    next.push(q);
                }
            }
        }
        out = next;
    }
    out
}

/// Every layout the search considers for a shape: all dimension orders, each
/// extended with at most one packed dimension (strip sizes are the powers of
/// two in `[2, extent]`, shuffled variants from size 4 up), deduplicated by
/// extensional equality of their indexing expressions at this shape.
pub fn enumerate_layouts(shape: &[u32]) -> Vec<Layout> {
    let rank = shape.len() as u8;
    let mut out: Vec<Layout> = Vec::new();
    let mut seen: HashMap<Vec<(u8, PhysDimKind, u32, u64)>, ()> = HashMap::new();
    let mut push = |l: Layout, out: &mut Vec<Layout>| {
        let sig = l.signature(shape);
        if seen.insert(sig, ()).is_none() {
            out.push(l);
        }
    };
    // Plain orders first so the familiar names win deduplication.
    let orders = permutations(rank);
    for order in &orders {
        push(
            Layout {
                order: order.clone(),
                packs: Vec::new(),
            },
            &mut out,
        );
    }
    for order in &orders {
        let base = Layout {
            order: order.clone(),
            packs: Vec::new(),
        };
        for dim in 0..rank {
            let extent = shape[dim as usize];
            let mut size = 2;
            while size <= extent {
                push(base.clone().with_pack(dim, size, false), &mut out);
                if size >= 4 {
                    push(base.clone().with_pack(dim, size, true), &mut out);
                }
                size *= 2;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_values() {
        assert_eq!(odd_even_shuffle(8, 0), 0);
        assert_eq!(odd_even_shuffle(8, 1), 2);
        assert_eq!(odd_even_shuffle(8, 4), 1);
        assert_eq!(odd_even_shuffle(8, 7), 7);
    }

    #[test]
    fn shuffle_is_permutation_for_even_sizes() {
        for s in (2..=64u32).step_by(2) {
            let mut seen = vec![false; s as usize];
            for x in 0..s {
                let y = odd_even_shuffle(s, x);
                assert!(!seen[y as usize], "collision at s={s} x={x}");
                seen[y as usize] = true;
            }
        }
    }

    #[test]
    #[should_panic(expected = "even")]
    fn shuffle_rejects_odd_size() {
        odd_even_shuffle(7, 0);
    }

    #[test]
    fn row_major_offsets() {
        let l = Layout::row_major(2);
        assert_eq!(l.buffer_offset(&[4, 4], &[1, 2]), 6);
        let expr = l.buffer_index_expr(&[4, 4]).unwrap();
        assert_eq!(expr.eval(&|s| [1, 2][s as usize]), 6);
    }

    #[test]
    fn col_major_offsets() {
        let l = Layout::col_major(2);
        // With m = 4 rows the offset is m*j + i.
        assert_eq!(l.buffer_offset(&[4, 4], &[1, 2]), 9);
        let expr = l.buffer_index_expr(&[4, 4]).unwrap();
        assert_eq!(expr.eval(&|s| [1, 2][s as usize]), 9);
    }

    #[test]
    fn strip_layout_is_bijection() {
        // Column-major order with the second dimension packed by 8:
        // offset = (m*s) * (j/s) + s*i + (j mod s) on a 4x16 shape.
        let l = Layout::col_major(2).with_pack(1, 8, false);
        let shape = [4u32, 16];
        let mut seen = vec![false; 64];
        for i in 0..4 {
            for j in 0..16 {
                let off = l.buffer_offset(&shape, &[i, j]) as usize;
                assert!(!seen[off], "collision at ({i},{j})");
                seen[off] = true;
            }
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn index_expr_rejects_non_dividing_strip() {
        let l = Layout::row_major(2).with_pack(1, 8, false);
        assert!(matches!(
            l.buffer_index_expr(&[4, 4]),
            Err(LayoutError::NonDividingStrip { .. })
        ));
    }

    fn exhaustive_bijection(l: &Layout, shape: &[u32]) -> bool {
        let volume: u64 = shape.iter().map(|&e| u64::from(e)).product();
        let mut seen = vec![false; volume as usize];
        let mut coord = vec![0u32; shape.len()];
        loop {
            let off = l.buffer_offset(shape, &coord) as usize;
            if off >= seen.len() || seen[off] {
                return false;
            }
            seen[off] = true;
            let mut d = shape.len();
            loop {
                if d == 0 {
                    return seen.iter().all(|&b| b);
                }
                d -= 1;
                coord[d] += 1;
                if coord[d] < shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
    }

    #[test]
    fn enumerated_layouts_are_bijections() {
        for shape in [vec![16u32], vec![4, 16], vec![2, 4, 8], vec![2, 2, 4, 4]] {
            for l in enumerate_layouts(&shape) {
                assert!(exhaustive_bijection(&l, &shape), "{l} on {shape:?}");
            }
        }
    }

    #[test]
    fn enumeration_contains_expected_orders() {
        let rank1 = enumerate_layouts(&[16]);
        assert!(rank1.contains(&Layout::row_major(1)));
        let rank2 = enumerate_layouts(&[4, 16]);
        assert!(rank2.contains(&Layout::row_major(2)));
        assert!(rank2.contains(&Layout::col_major(2)));
    }

    #[test]
    fn enumeration_matches_brute_force_dedup() {
        // Re-apply the generation rules without signatures and deduplicate by
        // comparing full offset tables.
        let shape = [4u32, 16];
        let mut tables: Vec<Vec<u64>> = Vec::new();
        let mut count = 0;
        for order in permutations(2) {
            let mut candidates = vec![Layout {
                order: order.clone(),
                packs: vec![],
            }];
            for dim in 0..2u8 {
                let mut size = 2;
                while size <= shape[dim as usize] {
                    candidates.push(
                        Layout {
                            order: order.clone(),
                            packs: vec![],
                        }
                        .with_pack(dim, size, false),
                    );
                    if size >= 4 {
                        candidates.push(
                            Layout {
                                order: order.clone(),
                                packs: vec![],
                            }
                            .with_pack(dim, size, true),
                        );
                    }
                    size *= 2;
                }
            }
            for c in candidates {
                let mut table = Vec::with_capacity(64);
                for i in 0..4 {
                    for j in 0..16 {
                        table.push(c.buffer_offset(&shape, &[i, j]));
                    }
                }
                if !tables.contains(&table) {
                    tables.push(table);
                    count += 1;
                }
            }
        }
        assert_eq!(enumerate_layouts(&shape).len(), count);
    }

    #[test]
    fn enumerated_layouts_pairwise_distinct() {
        // Deduplication must be exactly extensional: no two kept layouts may
        // share an offset table.
        for shape in [vec![16u32], vec![4, 16], vec![2, 4, 8]] {
            let ls = enumerate_layouts(&shape);
            let tables: Vec<Vec<u64>> = ls
                .iter()
                .map(|l| {
                    let mut table = Vec::new();
                    let mut coord = vec![0u32; shape.len()];
                    'outer: loop {
                        table.push(l.buffer_offset(&shape, &coord));
                        let mut d = shape.len();
                        loop {
                            if d == 0 {
                                break 'outer;
                            }
                            d -= 1;
                            coord[d] += 1;
                            if coord[d] < shape[d] {
                                break;
                            }
                            coord[d] = 0;
                        }
                    }
                    table
                })
                .collect();
            for i in 0..tables.len() {
                for j in i + 1..tables.len() {
                    assert_ne!(tables[i], tables[j], "{} == {}", ls[i], ls[j]);
                }
            }
        }
    }

    #[test]
    fn tile_transfer_identity_tile() {
        let l = Layout::row_major(2);
        let a = tile_transfer(&[4, 4], &l, true, 2, &[4, 4], 4, 64).unwrap();
        assert_eq!(a.contiguousness, 2);
        assert!(a.aligned);
    }

    #[test]
    fn tile_transfer_row_slice() {
        let l = Layout::row_major(2);
        let a = tile_transfer(&[4, 16], &l, true, 2, &[1, 16], 4, 64).unwrap();
        assert_eq!(a.contiguousness, 2);
        assert!(a.aligned);
    }

    #[test]
    fn tile_transfer_column_slice() {
        let l = Layout::row_major(2);
        let a = tile_transfer(&[4, 16], &l, true, 2, &[4, 1], 4, 64).unwrap();
        assert_eq!(a.contiguousness, 1);
        assert!(!a.aligned);
    }

    #[test]
    fn tile_transfer_rejects_non_dividing() {
        let l = Layout::row_major(2);
        assert!(tile_transfer(&[4, 16], &l, true, 2, &[3, 16], 4, 64).is_err());
    }

    #[test]
    fn cache_lines_examples() {
        let rm3 = Layout::row_major(3);
        assert_eq!(cache_lines(&[1, 1, 16], &rm3, 3, 4, 64), 1);
        let rm2 = Layout::row_major(2);
        assert_eq!(cache_lines(&[4, 16], &rm2, 2, 4, 64), 4);
        // A 4x1 tile of a row-major 4x16 tensor: four 4-byte runs.
        assert_eq!(cache_lines(&[4, 1], &rm2, 1, 4, 64), 4);
    }

    #[test]
    fn cache_lines_non_increasing_in_contiguousness() {
        let l = Layout::row_major(3);
        let shape = [4u32, 4, 8];
        let mut prev = u64::MAX;
        for c in 0..=3u8 {
            let lines = cache_lines(&shape, &l, c, 4, 64);
            assert!(lines <= prev);
            prev = lines;
        }
    }
}
