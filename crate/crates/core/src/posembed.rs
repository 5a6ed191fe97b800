//! Token position grids and the two conventional position embeddings:
//! absolute (APE, added to tokens at the stem) and relative position bias
//! (RPB, added to the attention matrix).
//!
//! Token indexing: when a grid carries a class token it sits at index 0 and
//! has no spatial coordinate; spatial tokens follow in row-major order, so
//! spatial entry `k` sits at `(k mod width, k div width)`.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RopeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Position {
    pub x: i64,
    pub y: i64,
}

impl Position {
    pub fn new(x: i64, y: i64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Position) -> f64 {
        let dx = (self.x - other.x) as f64;
        let dy = (self.y - other.y) as f64;
        dx.hypot(dy)
    }
}

/// 2D coordinates of every token in an H×W patch grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionGrid {
    width: usize,
    height: usize,
    positions: Vec<Position>,
    has_class_token: bool,
}

impl PositionGrid {
    pub fn new(width: usize, height: usize, class_token: bool) -> Result<Self> {
        if width == 0 || height == 0 {
            return invalid(format!(
                "grid extents must be positive, got {width}x{height}"
            ));
        }
        let positions = (0..width * height)
            .map(|k| Position::new((k % width) as i64, (k / width) as i64))
            .collect();
        Ok(Self {
            width,
            height,
            positions,
            has_class_token: class_token,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn has_class_token(&self) -> bool {
        self.has_class_token
    }

    /// Spatial positions, in token order (class token excluded).
    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn num_spatial(&self) -> usize {
        self.positions.len()
    }

    /// Total token count N, including the class token if present.
    pub fn num_tokens(&self) -> usize {
        self.positions.len() + self.spatial_offset()
    }

    /// Index of the first spatial token.
    pub fn spatial_offset(&self) -> usize {
        usize::from(self.has_class_token)
    }

    /// Position of token `n`, or `None` for the class token.
    pub fn position(&self, n: usize) -> Option<Position> {
        let off = self.spatial_offset();
        if n < off {
            None
        } else {
            self.positions.get(n - off).copied()
        }
    }

    /// Same grid with every position shifted by `(dx, dy)`.
    ///
    /// The shifted grid no longer satisfies `0 <= p < extent`; it exists to
    /// probe translation invariance.
    pub fn translated(&self, dx: i64, dy: i64) -> Self {
        let mut out = self.clone();
        for p in &mut out.positions {
            p.x += dx;
            p.y += dy;
        }
        out
    }

    /// Reorders the spatial tokens: new spatial token `i` is old spatial
    /// token `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.num_spatial())?;
        let mut out = self.clone();
        out.positions = perm.iter().map(|&i| self.positions[i]).collect();
        Ok(out)
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return invalid(format!(
            "permutation has {} entries, expected {n}",
            perm.len()
        ));
    }
    let mut seen = vec![false; n];
    for &i in perm {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return invalid("not a permutation");
        }
    }
    Ok(())
}

pub fn make_grid(width: usize, height: usize, class_token: bool) -> Result<PositionGrid> {
    PositionGrid::new(width, height, class_token)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApeKind {
    Sinusoidal,
    Learnable,
}

/// Absolute position embedding, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct ApeTable {
    pub kind: ApeKind,
    pub values: Array2<f64>,
}

impl ApeTable {
    pub fn d(&self) -> usize {
        self.values.ncols()
    }

    /// Learnable table drawn from N(0, std²); the class-token row is an
    /// ordinary trainable vector.
    pub fn learnable<R: Rng + ?Sized>(
        grid: &PositionGrid,
        d: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, std)
            .map_err(|e| RopeError::InvalidArgument(format!("bad APE std: {e}")))?;
        let values = Array2::from_shape_simple_fn((grid.num_tokens(), d), || normal.sample(rng));
        Ok(Self {
            kind: ApeKind::Learnable,
            values,
        })
    }

    pub fn zeros(grid: &PositionGrid, d: usize, kind: ApeKind) -> Self {
        Self {
            kind,
            values: Array2::zeros((grid.num_tokens(), d)),
        }
    }
}

/// Sinusoidal APE. Dims `4t..4t+3` hold sin/cos of `p^x` then sin/cos of
/// `p^y`, each divided by `10^(4t / floor(d/4))`. The class-token row is 0.
pub fn sinusoidal_ape(grid: &PositionGrid, d: usize) -> Result<ApeTable> {
    if d == 0 || !d.is_multiple_of(4) {
        return invalid(format!(
            "sinusoidal APE width must be a positive multiple of 4, got {d}"
        ));
    }
    let quarter = d / 4;
    let mut values = Array2::zeros((grid.num_tokens(), d));
    let off = grid.spatial_offset();
    for (k, p) in grid.positions().iter().enumerate() {
        let mut row = values.row_mut(k + off);
        for t in 0..quarter {
            let div = 10f64.powf(4.0 * t as f64 / quarter as f64);
            let ax = p.x as f64 / div;
            let ay = p.y as f64 / div;
            row[4 * t] = ax.sin();
            row[4 * t + 1] = ax.cos();
            row[4 * t + 2] = ay.sin();
            row[4 * t + 3] = ay.cos();
        }
    }
    Ok(ApeTable {
        kind: ApeKind::Sinusoidal,
        values,
    })
}

pub fn add_ape(tokens: &Array2<f64>, ape: &ApeTable) -> Result<Array2<f64>> {
    if tokens.dim() != ape.values.dim() {
        return invalid(format!(
            "token shape {:?} does not match APE shape {:?}",
            tokens.dim(),
            ape.values.dim()
        ));
    }
    Ok(tokens + &ape.values)
}

/// Bilinear (corner-aligned) resampling of a learnable table onto a new
/// grid; sinusoidal tables are regenerated analytically. The class-token
/// row is carried over unchanged.
pub fn resize_ape(ape: &ApeTable, old: &PositionGrid, new: &PositionGrid) -> Result<ApeTable> {
    if ape.values.nrows() != old.num_tokens() {
        return invalid("APE table was not built for the given source grid");
    }
    if old.has_class_token() != new.has_class_token() {
        return invalid("class-token presence must match between grids");
    }
    let d = ape.d();
    if ape.kind == ApeKind::Sinusoidal {
        return sinusoidal_ape(new, d);
    }
    let mut values = Array2::zeros((new.num_tokens(), d));
    if new.has_class_token() {
        values.row_mut(0).assign(&ape.values.row(0));
    }
    let (ow, oh) = (old.width(), old.height());
    let (nw, nh) = (new.width(), new.height());
    let src = |k: usize| ape.values.row(k + old.spatial_offset());
    for j in 0..nh {
        let (y0, y1, fy) = source_coord(j, nh, oh);
        for i in 0..nw {
            let (x0, x1, fx) = source_coord(i, nw, ow);
            let mut row = values.row_mut(j * nw + i + new.spatial_offset());
            let c00 = src(y0 * ow + x0);
            let c10 = src(y0 * ow + x1);
            let c01 = src(y1 * ow + x0);
            let c11 = src(y1 * ow + x1);
            for c in 0..d {
                let top = c00[c] * (1.0 - fx) + c10[c] * fx;
                let bottom = c01[c] * (1.0 - fx) + c11[c] * fx;
                row[c] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(ApeTable {
        kind: ApeKind::Learnable,
        values,
    })
}

// Maps destination index `i` of `dst` cells onto the source axis of `src`
// cells with corners aligned; returns the two neighbours and the weight of
// the second.
fn source_coord(i: usize, dst: usize, src: usize) -> (usize, usize, f64) {
    if dst == 1 || src == 1 {
        return (0, 0, 0.0);
    }
    let s = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
    let lo = (s.floor() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    (lo, hi, s - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RpbPlacement {
    /// Bias added to the logits before softmax.
    #[default]
    PreSoftmax,
    /// Bias added to the probabilities after softmax; rows are no longer
    /// normalized. Only for reproducing the literal additive form.
    PostSoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RpbExtension {
    /// Offsets beyond the table extent are an error.
    #[default]
    Strict,
    /// Offsets beyond the table extent read as 0.
    ZeroPad,
}

/// Relative position bias for one head: a bias per offset in
/// `{-W..W} x {-H..H}` plus one scalar shared by every pair touching the
/// class token.
#[derive(Debug, Clone, PartialEq)]
pub struct RpbTable {
    width_extent: usize,
    height_extent: usize,
    /// `(2W+1) x (2H+1)`, indexed `[dx + W, dy + H]`.
    biases: Array2<f64>,
    pub class_bias: f64,
}

impl RpbTable {
    pub fn zeros(width_extent: usize, height_extent: usize) -> Self {
        Self {
            width_extent,
            height_extent,
            biases: Array2::zeros((2 * width_extent + 1, 2 * height_extent + 1)),
            class_bias: 0.0,
        }
    }

    /// Table sized for every offset a `grid` can produce.
    pub fn for_grid(grid: &PositionGrid) -> Self {
        Self::zeros(grid.width(), grid.height())
    }

    pub fn from_biases(biases: Array2<f64>, class_bias: f64) -> Result<Self> {
        let (r, c) = biases.dim();
        if r % 2 == 0 || c % 2 == 0 {
            return invalid(format!("RPB table dims must be odd, got {r}x{c}"));
        }
        Ok(Self {
            width_extent: r / 2,
            height_extent: c / 2,
            biases,
            class_bias,
        })
    }

    pub fn random<R: Rng + ?Sized>(grid: &PositionGrid, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut t = Self::for_grid(grid);
        t.biases.mapv_inplace(|_| normal.sample(rng));
        t.class_bias = normal.sample(rng);
        t
    }

    pub fn width_extent(&self) -> usize {
        self.width_extent
    }

    pub fn height_extent(&self) -> usize {
        self.height_extent
    }

    pub fn biases(&self) -> &Array2<f64> {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut Array2<f64> {
        &mut self.biases
    }

    fn index(&self, dx: i64, dy: i64) -> Option<(usize, usize)> {
        let (w, h) = (self.width_extent as i64, self.height_extent as i64);
        if dx.abs() <= w && dy.abs() <= h {
            Some(((dx + w) as usize, (dy + h) as usize))
        } else {
            None
        }
    }

    pub fn get(&self, dx: i64, dy: i64) -> Option<f64> {
        self.index(dx, dy).map(|ix| self.biases[ix])
    }

    pub fn set(&mut self, dx: i64, dy: i64, value: f64) -> Result<()> {
        let ix = self.index(dx, dy).ok_or(RopeError::OutOfRange {
            dx,
            dy,
            width: self.width_extent,
            height: self.height_extent,
        })?;
        self.biases[ix] = value;
        Ok(())
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Array2<f64>, &mut f64) {
        (&mut self.biases, &mut self.class_bias)
    }

    pub(crate) fn accumulate(&mut self, dx: i64, dy: i64, value: f64) {
        if let Some(ix) = self.index(dx, dy) {
            self.biases[ix] += value;
        }
    }
}

/// Expands a bias table into the `N x N` matrix `E[n, m] = T[p_n - p_m]`.
pub fn expand_rpb(
    table: &RpbTable,
    grid: &PositionGrid,
    extension: RpbExtension,
) -> Result<Array2<f64>> {
    let n = grid.num_tokens();
    let off = grid.spatial_offset();
    let mut out = Array2::from_elem((n, n), table.class_bias);
    let pos = grid.positions();
    for (a, pa) in pos.iter().enumerate() {
        for (b, pb) in pos.iter().enumerate() {
            let (dx, dy) = (pa.x - pb.x, pa.y - pb.y);
            out[[a + off, b + off]] = match (table.get(dx, dy), extension) {
                (Some(v), _) => v,
                (None, RpbExtension::ZeroPad) => 0.0,
                (None, RpbExtension::Strict) => {
                    return Err(RopeError::OutOfRange {
                        dx,
                        dy,
                        width: table.width_extent,
                        height: table.height_extent,
                    })
                }
            };
        }
    }
    Ok(out)
}

/// Zero-pads a bias table to a larger offset extent.
pub fn extend_rpb(table: &RpbTable, new_width: usize, new_height: usize) -> Result<RpbTable> {
    if new_width < table.width_extent || new_height < table.height_extent {
        return invalid(format!(
            "cannot shrink RPB extent ({}, {}) to ({new_width}, {new_height})",
            table.width_extent, table.height_extent
        ));
    }
    let mut out = RpbTable::zeros(new_width, new_height);
    out.class_bias = table.class_bias;
    let (ox, oy) = (
        new_width - table.width_extent,
        new_height - table.height_extent,
    );
    for ((i, j), v) in table.biases.indexed_iter() {
        out.biases[[i + ox, j + oy]] = *v;
    }
    Ok(out)
}

/// Flat JSON form shared by APE and RPB tables: `{kind, shape, values}`
/// with values in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableDoc {
    pub kind: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TableDoc {
    pub fn to_array(&self) -> Result<Array2<f64>> {
        if self.shape.len() != 2 {
            return invalid(format!("expected a 2D shape, got {:?}", self.shape));
        }
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.values.clone())
            .map_err(|e| RopeError::InvalidArgument(e.to_string()))
    }
}

fn row_major(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

impl From<&ApeTable> for TableDoc {
    fn from(t: &ApeTable) -> Self {
        let kind = match t.kind {
            ApeKind::Sinusoidal => "ape_sinusoidal",
            ApeKind::Learnable => "ape_learnable",
        };
        TableDoc {
            kind: kind.into(),
            shape: t.values.shape().to_vec(),
            values: row_major(&t.values),
        }
    }
}

impl TryFrom<&TableDoc> for ApeTable {
    type Error = RopeError;

    fn try_from(doc: &TableDoc) -> Result<Self> {
        let kind = match doc.kind.as_str() {
            "ape_sinusoidal" => ApeKind::Sinusoidal,
            "ape_learnable" => ApeKind::Learnable,
            other => return invalid(format!("not an APE table kind: {other}")),
        };
        Ok(ApeTable {
            kind,
            values: doc.to_array()?,
        })
    }
}

impl From<&RpbTable> for TableDoc {
    fn from(t: &RpbTable) -> Self {
        // The class-token scalar is appended after the offset grid.
        let mut values = row_major(&t.biases);
        values.push(t.class_bias);
        TableDoc {
            kind: "rpb".into(),
            shape: t.biases.shape().to_vec(),
            values,
        }
    }
}

impl TryFrom<&TableDoc> for RpbTable {
    type Error = RopeError;

    fn try_from(doc: &TableDoc) -> Result<Self> {
        if doc.kind != "rpb" || doc.shape.len() != 2 {
            return invalid("not an RPB table document");
        }
        let cells = doc.shape[0] * doc.shape[1];
        if doc.values.len() != cells + 1 {
            return invalid("RPB document value count does not match its shape");
        }
        let biases =
            Array2::from_shape_vec((doc.shape[0], doc.shape[1]), doc.values[..cells].to_vec())
                .map_err(|e| RopeError::InvalidArgument(e.to_string()))?;
        RpbTable::from_biases(biases, doc.values[cells])
    }
}

/// CSV with one row per token: `token,px,py,v0,..,v{d-1}`. The class-token
/// row leaves the coordinates empty.
pub fn ape_to_csv(ape: &ApeTable, grid: &PositionGrid) -> Result<String> {
    if ape.values.nrows() != grid.num_tokens() {
        return invalid("APE table does not match grid");
    }
    let mut header = vec!["token".to_string(), "px".into(), "py".into()];
    header.extend((0..ape.d()).map(|c| format!("v{c}")));
    let rows = ape.values.axis_iter(Axis(0)).enumerate().map(|(n, row)| {
        let (px, py) = match grid.position(n) {
            Some(p) => (p.x.to_string(), p.y.to_string()),
            None => (String::new(), String::new()),
        };
        let mut rec = vec![n.to_string(), px, py];
        rec.extend(row.iter().map(|&v| crate::io::fmt_f64(v)));
        rec
    });
    crate::io::csv_string(header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_row_major() {
        let g = make_grid(2, 2, false).unwrap();
        let got: Vec<_> = g.positions().iter().map(|p| (p.x, p.y)).collect();
        assert_eq!(got, vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
        let g = make_grid(1, 1, false).unwrap();
        assert_eq!(g.positions(), &[Position::new(0, 0)]);
    }

    #[test]
    fn grid_14x14_enumeration() {
        let g = make_grid(14, 14, false).unwrap();
        assert_eq!(g.num_spatial(), 196);
        // Independent enumeration: nested loops, y outer.
        let mut expected = Vec::new();
        for y in 0..14 {
            for x in 0..14 {
                expected.push(Position::new(x, y));
            }
        }
        assert_eq!(g.positions(), expected.as_slice());
        assert_eq!(*g.positions().last().unwrap(), Position::new(13, 13));
    }

    #[test]
    fn grid_rejects_zero_extent() {
        assert!(matches!(
            make_grid(0, 3, false),
            Err(RopeError::InvalidArgument(_))
        ));
        assert!(matches!(
            make_grid(3, 0, true),
            Err(RopeError::InvalidArgument(_))
        ));
    }

    #[test]
    fn class_token_occupies_index_zero() {
        let g = make_grid(2, 3, true).unwrap();
        assert_eq!(g.num_tokens(), 7);
        assert_eq!(g.position(0), None);
        assert_eq!(g.position(1), Some(Position::new(0, 0)));
        assert_eq!(g.position(6), Some(Position::new(1, 2)));
    }

    #[test]
    fn sinusoidal_origin_and_values() {
        let g = make_grid(2, 1, false).unwrap();
        let ape = sinusoidal_ape(&g, 8).unwrap();
        let origin = ape.values.row(0);
        for t in 0..2 {
            assert_eq!(origin[4 * t], 0.0);
            assert_eq!(origin[4 * t + 1], 1.0);
            assert_eq!(origin[4 * t + 2], 0.0);
            assert_eq!(origin[4 * t + 3], 1.0);
        }
        let p10 = ape.values.row(1);
        assert!((p10[0] - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!((p10[1] - 0.540_302_305_868_139_8).abs() < 1e-15);
        // t = 1: divisor 10^(4/2) = 100.
        assert!((p10[4] - 0.01f64.sin()).abs() < 1e-18);
        assert!((p10[4] - 0.009_999_833_334).abs() < 1e-12);
    }

    #[test]
    fn sinusoidal_rejects_bad_width() {
        let g = make_grid(2, 2, false).unwrap();
        assert!(sinusoidal_ape(&g, 6).is_err());
        assert!(sinusoidal_ape(&g, 0).is_err());
    }

    #[test]
    fn sinusoidal_class_row_is_zero() {
        let g = make_grid(3, 3, true).unwrap();
        let ape = sinusoidal_ape(&g, 8).unwrap();
        assert!(ape.values.row(0).iter().all(|&v| v == 0.0));
        assert_eq!(ape.values.nrows(), 10);
    }

    #[test]
    fn add_ape_identities() {
        let g = make_grid(2, 2, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tokens = ApeTable::learnable(&g, 4, 1.0, &mut rng).unwrap().values;
        let zero = ApeTable::zeros(&g, 4, ApeKind::Learnable);
        assert_eq!(add_ape(&tokens, &zero).unwrap(), tokens);

        let ape = sinusoidal_ape(&g, 4).unwrap();
        assert_eq!(add_ape(&Array2::zeros((4, 4)), &ape).unwrap(), ape.values);

        let neg = ApeTable {
            kind: ApeKind::Learnable,
            values: -&tokens,
        };
        assert!(add_ape(&tokens, &neg).unwrap().iter().all(|&v| v == 0.0));
        assert!(add_ape(&Array2::zeros((3, 4)), &ape).is_err());
    }

    #[test]
    fn expand_rpb_cases() {
        let g = make_grid(2, 2, false).unwrap();
        let zero = RpbTable::for_grid(&g);
        assert!(expand_rpb(&zero, &g, RpbExtension::Strict)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));

        let mut t = RpbTable::for_grid(&g);
        t.set(-1, -1, 3.5).unwrap();
        let e = expand_rpb(&t, &g, RpbExtension::Strict).unwrap();
        // n = (0,0) is token 0; m = (1,1) is token 3.
        assert_eq!(e[[0, 3]], 3.5);
        assert_eq!(e[[3, 0]], 0.0);

        let mut t = RpbTable::for_grid(&g);
        t.set(0, 0, 5.0).unwrap();
        let e = expand_rpb(&t, &g, RpbExtension::Strict).unwrap();
        assert_eq!(e, Array2::<f64>::eye(4) * 5.0);
    }

    #[test]
    fn expand_rpb_class_token_uses_scalar() {
        let g = make_grid(2, 2, true).unwrap();
        let mut t = RpbTable::for_grid(&g);
        t.class_bias = -2.0;
        let e = expand_rpb(&t, &g, RpbExtension::Strict).unwrap();
        assert!(e.row(0).iter().all(|&v| v == -2.0));
        assert!(e.column(0).iter().all(|&v| v == -2.0));
        assert_eq!(e[[1, 1]], 0.0);
    }

    #[test]
    fn expand_rpb_out_of_range() {
        let small = make_grid(2, 2, false).unwrap();
        let big = make_grid(4, 4, false).unwrap();
        let t = RpbTable::for_grid(&small);
        assert!(matches!(
            expand_rpb(&t, &big, RpbExtension::Strict),
            Err(RopeError::OutOfRange { .. })
        ));
        assert!(expand_rpb(&t, &big, RpbExtension::ZeroPad).is_ok());
    }

    #[test]
    fn extend_rpb_pads_with_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = RpbTable::random(&make_grid(1, 1, false).unwrap(), 1.0, &mut rng);
        assert_eq!(t.biases().dim(), (3, 3));
        assert_eq!(extend_rpb(&t, 1, 1).unwrap(), t);

        let e = extend_rpb(&t, 2, 2).unwrap();
        assert_eq!(e.biases().dim(), (5, 5));
        for dx in -2i64..=2 {
            for dy in -2i64..=2 {
                let want = t.get(dx, dy).unwrap_or(0.0);
                assert_eq!(e.get(dx, dy).unwrap(), want);
            }
        }
        assert!(extend_rpb(&t, 0, 1).is_err());
    }

    #[test]
    fn extended_expansion_matches_original_on_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let small = make_grid(3, 2, false).unwrap();
        let t = RpbTable::random(&small, 1.0, &mut rng);
        let big = make_grid(6, 5, false).unwrap();
        let ext = extend_rpb(&t, 6, 5).unwrap();
        let e_ext = expand_rpb(&ext, &big, RpbExtension::Strict).unwrap();
        let e_pad = expand_rpb(&t, &big, RpbExtension::ZeroPad).unwrap();
        assert_eq!(e_ext, e_pad);
        for (n, pn) in big.positions().iter().enumerate() {
            for (m, pm) in big.positions().iter().enumerate() {
                let want = t.get(pn.x - pm.x, pn.y - pm.y).unwrap_or(0.0);
                assert_eq!(e_ext[[n, m]], want);
            }
        }
    }

    #[test]
    fn resize_same_grid_is_identity() {
        let g = make_grid(3, 2, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ape = ApeTable::learnable(&g, 4, 1.0, &mut rng).unwrap();
        assert_eq!(resize_ape(&ape, &g, &g).unwrap(), ape);
        let sin = sinusoidal_ape(&g, 4).unwrap();
        assert_eq!(resize_ape(&sin, &g, &g).unwrap(), sin);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let g = make_grid(3, 4, false).unwrap();
        let ape = ApeTable {
            kind: ApeKind::Learnable,
            values: Array2::from_elem((12, 4), 0.75),
        };
        let out = resize_ape(&ape, &g, &make_grid(7, 5, false).unwrap()).unwrap();
        assert!(out.values.iter().all(|&v| (v - 0.75).abs() < 1e-15));
        assert_eq!(out.values.nrows(), 35);
    }

    #[test]
    fn resize_2x2_to_3x3_center_is_corner_mean() {
        let g2 = make_grid(2, 2, true).unwrap();
        let g3 = make_grid(3, 3, true).unwrap();
        let values = ndarray::array![[9.0], [1.0], [2.0], [3.0], [4.0]];
        let ape = ApeTable {
            kind: ApeKind::Learnable,
            values,
        };
        let out = resize_ape(&ape, &g2, &g3).unwrap();
        // Oracle: bilinear weights at source (0.5, 0.5) are all 1/4.
        assert!((out.values[[1 + 4, 0]] - 2.5).abs() < 1e-15);
        // Corners map onto corners; class row is copied.
        assert_eq!(out.values[[0, 0]], 9.0);
        assert_eq!(out.values[[1, 0]], 1.0);
        assert_eq!(out.values[[1 + 8, 0]], 4.0);
    }

    #[test]
    fn table_doc_round_trip() {
        let g = make_grid(2, 3, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rpb = RpbTable::random(&g, 1.0, &mut rng);
        let doc = TableDoc::from(&rpb);
        let json = serde_json::to_string(&doc).unwrap();
        let back: TableDoc = serde_json::from_str(&json).unwrap();
        assert_eq!(RpbTable::try_from(&back).unwrap(), rpb);

        let ape = sinusoidal_ape(&g, 8).unwrap();
        let doc = TableDoc::from(&ape);
        assert_eq!(doc.shape, vec![6, 8]);
        assert_eq!(ApeTable::try_from(&doc).unwrap(), ape);
    }

    #[test]
    fn ape_csv_has_row_per_token() {
        let g = make_grid(2, 2, true).unwrap();
        let ape = sinusoidal_ape(&g, 4).unwrap();
        let csv = ape_to_csv(&ape, &g).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "token,px,py,v0,v1,v2,v3");
        assert!(lines[1].starts_with("0,,,"));
        assert!(lines[3].starts_with("2,1,0,"));
    }
}
