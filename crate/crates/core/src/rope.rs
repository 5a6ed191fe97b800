//! Rotary position embeddings: frequency generation, rotation tables for
//! 1D, axial 2D and mixed 2D layouts, and their application to query/key
//! channels.
//!
//! A head vector of width `d_head` is viewed as `d_head/2` complex numbers,
//! channel `2t` being the real part and `2t+1` the imaginary part of
//! complex channel `t`. A rotation table holds one unit complex number per
//! (token, complex channel).

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RopeError};
use crate::posembed::PositionGrid;

pub const DEFAULT_BASE_1D: f64 = 10_000.0;
pub const DEFAULT_BASE_AXIAL: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FreqMode {
    #[serde(rename = "1d")]
    OneD,
    #[serde(rename = "axial")]
    Axial2D,
    #[serde(rename = "mixed")]
    Mixed2D,
}

/// Rotation frequencies of a single attention head.
///
/// `values` layout: `OneD` and `Axial2D` store `θ_t`; `Mixed2D` stores the
/// interleaved pairs `θx_0, θy_0, θx_1, θy_1, ...`, one pair per complex
/// channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencySet {
    mode: FreqMode,
    d_head: usize,
    learnable: bool,
    /// Axial frequencies trained through the mixed parameterization: the
    /// cross-axis entries are held at zero by masking their gradient.
    #[serde(default)]
    pinned_cross: bool,
    #[serde(default)]
    seed: Option<u64>,
    values: Vec<f64>,
}

impl FrequencySet {
    /// Arbitrary mixed frequencies, one `(θx, θy)` pair per complex channel.
    pub fn mixed(d_head: usize, pairs: &[(f64, f64)]) -> Result<Self> {
        if d_head == 0 || !d_head.is_multiple_of(2) {
            return invalid(format!("d_head must be even and positive, got {d_head}"));
        }
        if pairs.len() != d_head / 2 {
            return invalid(format!(
                "expected {} frequency pairs, got {}",
                d_head / 2,
                pairs.len()
            ));
        }
        let values: Vec<f64> = pairs.iter().flat_map(|&(x, y)| [x, y]).collect();
        check_finite(&values)?;
        Ok(Self {
            mode: FreqMode::Mixed2D,
            d_head,
            learnable: true,
            pinned_cross: false,
            seed: None,
            values,
        })
    }

    /// Parses and validates a serialized set.
    pub fn from_json(text: &str) -> Result<Self> {
        let set: Self = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    /// Checks that `values` has the length its mode and `d_head` imply.
    pub fn validate(&self) -> Result<()> {
        let d = self.d_head;
        let expected = match self.mode {
            FreqMode::OneD if d > 0 && d.is_multiple_of(2) => d / 2,
            FreqMode::Axial2D if d > 0 && d.is_multiple_of(4) => d / 4,
            FreqMode::Mixed2D if d > 0 && d.is_multiple_of(2) => d,
            _ => return invalid(format!("d_head {d} is not valid for {:?}", self.mode)),
        };
        if self.values.len() != expected {
            return invalid(format!(
                "expected {expected} frequency values, got {}",
                self.values.len()
            ));
        }
        if self.learnable && self.mode != FreqMode::Mixed2D {
            return invalid("only mixed frequency sets can be learnable");
        }
        check_finite(&self.values)
    }

    pub fn mode(&self) -> FreqMode {
        self.mode
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    /// Number of complex rotation channels, always `d_head / 2`.
    pub fn channels(&self) -> usize {
        self.d_head / 2
    }

    pub fn is_learnable(&self) -> bool {
        self.learnable
    }

    pub fn pinned_cross(&self) -> bool {
        self.pinned_cross
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for learning updates. Only learnable sets may change.
    pub fn values_mut(&mut self) -> Result<&mut [f64]> {
        if !self.learnable {
            return Err(RopeError::InvalidState(
                "frequency set is not learnable".into(),
            ));
        }
        Ok(&mut self.values)
    }

    pub(crate) fn raw_values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Mixed pair of complex channel `t`.
    pub fn pair(&self, t: usize) -> (f64, f64) {
        debug_assert_eq!(self.mode, FreqMode::Mixed2D);
        (self.values[2 * t], self.values[2 * t + 1])
    }

    /// `(θx, θy)` actually seen by each complex channel after layout
    /// expansion. `OneD` reports its frequency on the x slot.
    pub fn channel_frequencies(&self) -> Vec<(f64, f64)> {
        match self.mode {
            FreqMode::OneD => self.values.iter().map(|&f| (f, 0.0)).collect(),
            FreqMode::Axial2D => self
                .values
                .iter()
                .flat_map(|&f| [(f, 0.0), (0.0, f)])
                .collect(),
            FreqMode::Mixed2D => self.values.chunks(2).map(|p| (p[0], p[1])).collect(),
        }
    }

    /// Per-value flags, `true` where a gradient step may move the value.
    pub fn trainable_mask(&self) -> Vec<bool> {
        if !self.learnable {
            return vec![false; self.values.len()];
        }
        if self.mode == FreqMode::Mixed2D && self.pinned_cross {
            // Axial layout: even channels carry x, odd channels carry y.
            return (0..self.values.len())
                .map(|i| {
                    let (t, is_y) = (i / 2, i % 2 == 1);
                    (t % 2 == 1) == is_y
                })
                .collect();
        }
        vec![true; self.values.len()]
    }

    /// Zeroes gradient entries for values that are held fixed.
    pub fn mask_gradient(&self, grad: &mut [f64]) {
        for (g, keep) in grad.iter_mut().zip(self.trainable_mask()) {
            if !keep {
                *g = 0.0;
            }
        }
    }

    /// Plain gradient-descent step `θ ← θ − lr·∇`, honouring the mask.
    pub fn descend(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.values.len() {
            return invalid("gradient length does not match frequency count");
        }
        let mask = self.trainable_mask();
        let values = self.values_mut()?;
        for ((v, g), keep) in values.iter_mut().zip(grad).zip(mask) {
            if keep {
                *v -= lr * g;
            }
        }
        Ok(())
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(RopeError::Numeric("frequencies must be finite".into()))
    }
}

/// `θ_t = base^(-t / (d_head/2))` for `t in 0..d_head/2`.
pub fn freqs_1d(d_head: usize, base: f64) -> Result<FrequencySet> {
    if d_head == 0 || !d_head.is_multiple_of(2) {
        return invalid(format!("1D RoPE needs an even d_head, got {d_head}"));
    }
    if !(base > 0.0 && base.is_finite()) {
        return invalid(format!("frequency base must be positive, got {base}"));
    }
    let half = d_head / 2;
    let values = (0..half)
        .map(|t| base.powf(-(t as f64) / half as f64))
        .collect();
    Ok(FrequencySet {
        mode: FreqMode::OneD,
        d_head,
        learnable: false,
        pinned_cross: false,
        seed: None,
        values,
    })
}

/// `θ_t = base^(-t / (d_head/4))` for `t in 0..d_head/4`, shared by both axes.
pub fn freqs_axial(d_head: usize, base: f64) -> Result<FrequencySet> {
    if d_head == 0 || !d_head.is_multiple_of(4) {
        return invalid(format!(
            "axial RoPE needs d_head divisible by 4, got {d_head}"
        ));
    }
    if !(base > 0.0 && base.is_finite()) {
        return invalid(format!("frequency base must be positive, got {base}"));
    }
    let quarter = d_head / 4;
    let values = (0..quarter)
        .map(|t| base.powf(-(t as f64) / quarter as f64))
        .collect();
    Ok(FrequencySet {
        mode: FreqMode::Axial2D,
        d_head,
        learnable: false,
        pinned_cross: false,
        seed: None,
        values,
    })
}

/// Learnable mixed frequencies starting at the axial layout: complex
/// channel `2j` gets `(θ_j, 0)` and channel `2j+1` gets `(0, θ_j)` with
/// `θ_j = 100^(-j / (d_head/4))`. A table built from this set equals the
/// axial table exactly.
///
/// The initialization is deterministic; `seed` is only recorded.
pub fn freqs_mixed_init(d_head: usize, seed: u64) -> Result<FrequencySet> {
    if d_head == 0 || !d_head.is_multiple_of(2) {
        return invalid(format!("mixed RoPE needs an even d_head, got {d_head}"));
    }
    let quarter = d_head as f64 / 4.0;
    let values = (0..d_head / 2)
        .flat_map(|t| {
            let f = DEFAULT_BASE_AXIAL.powf(-((t / 2) as f64) / quarter);
            if t % 2 == 0 {
                [f, 0.0]
            } else {
                [0.0, f]
            }
        })
        .collect();
    Ok(FrequencySet {
        mode: FreqMode::Mixed2D,
        d_head,
        learnable: true,
        pinned_cross: false,
        seed: Some(seed),
        values,
    })
}

/// Axial frequencies made learnable: the mixed parameterization with the
/// cross-axis entries pinned at zero.
pub fn freqs_axial_learnable(d_head: usize, seed: u64) -> Result<FrequencySet> {
    let mut f = freqs_mixed_init(d_head, seed)?;
    f.pinned_cross = true;
    Ok(f)
}

/// Per-head query or key values, `N x d_head`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensor(pub Array2<f64>);

impl HeadTensor {
    pub fn new(data: Array2<f64>) -> Self {
        Self(data)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }

    pub fn num_tokens(&self) -> usize {
        self.0.nrows()
    }

    pub fn d_head(&self) -> usize {
        self.0.ncols()
    }

    /// Paired-real view: channel `2t` is the real part, `2t+1` the imaginary
    /// part of complex channel `t`.
    pub fn to_complex_pairs(&self) -> Result<Array2<Complex64>> {
        let (n, d) = self.0.dim();
        if d % 2 != 0 {
            return invalid(format!("paired-real view needs an even width, got {d}"));
        }
        Ok(Array2::from_shape_fn((n, d / 2), |(i, t)| {
            Complex64::new(self.0[[i, 2 * t]], self.0[[i, 2 * t + 1]])
        }))
    }

    pub fn from_complex_pairs(z: &Array2<Complex64>) -> Self {
        let (n, h) = z.dim();
        Self(Array2::from_shape_fn((n, 2 * h), |(i, c)| {
            let v = z[[i, c / 2]];
            if c % 2 == 0 {
                v.re
            } else {
                v.im
            }
        }))
    }
}

/// Precomputed `N x (d_head/2)` unit complex multipliers, stored as
/// (cos, sin) pairs alongside the angles they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationTable {
    angles: Array2<f64>,
    entries: Array2<Complex64>,
    grid: PositionGrid,
    source: FrequencySet,
}

impl RotationTable {
    fn from_angles(angles: Array2<f64>, grid: PositionGrid, source: FrequencySet) -> Self {
        let entries = angles.mapv(|a| Complex64::new(a.cos(), a.sin()));
        Self {
            angles,
            entries,
            grid,
            source,
        }
    }

    /// Table for any frequency mode. `OneD` uses the spatial token index as
    /// its 1D position.
    pub fn build(freqs: &FrequencySet, grid: &PositionGrid) -> Self {
        let channels = freqs.channels();
        let n = grid.num_tokens();
        let off = grid.spatial_offset();
        let mut angles = Array2::zeros((n, channels));
        let v = &freqs.values;
        for (k, p) in grid.positions().iter().enumerate() {
            let mut row = angles.row_mut(k + off);
            let (px, py) = (p.x as f64, p.y as f64);
            match freqs.mode {
                FreqMode::OneD => {
                    for t in 0..channels {
                        row[t] = v[t] * k as f64;
                    }
                }
                FreqMode::Axial2D => {
                    for j in 0..channels / 2 {
                        row[2 * j] = v[j] * px;
                        row[2 * j + 1] = v[j] * py;
                    }
                }
                FreqMode::Mixed2D => {
                    for t in 0..channels {
                        row[t] = v[2 * t] * px + v[2 * t + 1] * py;
                    }
                }
            }
        }
        Self::from_angles(angles, grid.clone(), freqs.clone())
    }

    /// Identity rotation (every entry `1 + 0i`).
    pub fn identity(grid: &PositionGrid, d_head: usize) -> Result<Self> {
        let source = freqs_1d(d_head, DEFAULT_BASE_1D)?;
        let angles = Array2::zeros((grid.num_tokens(), d_head / 2));
        Ok(Self::from_angles(angles, grid.clone(), source))
    }

    pub fn angles(&self) -> &Array2<f64> {
        &self.angles
    }

    pub fn entries(&self) -> &Array2<Complex64> {
        &self.entries
    }

    pub fn grid(&self) -> &PositionGrid {
        &self.grid
    }

    pub fn source(&self) -> &FrequencySet {
        &self.source
    }

    pub fn num_tokens(&self) -> usize {
        self.entries.nrows()
    }

    pub fn d_head(&self) -> usize {
        2 * self.entries.ncols()
    }

    /// Inverse rotation.
    pub fn conjugate(&self) -> Self {
        Self::from_angles(-&self.angles, self.grid.clone(), self.source.clone())
    }

    /// Every angle, class-token row included, offset by `phi`.
    pub fn with_phase(&self, phi: f64) -> Self {
        Self::from_angles(
            self.angles.mapv(|a| a + phi),
            self.grid.clone(),
            self.source.clone(),
        )
    }
}

fn expect_mode(freqs: &FrequencySet, mode: FreqMode) -> Result<()> {
    if freqs.mode != mode {
        return invalid(format!(
            "expected {mode:?} frequencies, got {:?}",
            freqs.mode
        ));
    }
    Ok(())
}

/// `R(n, t) = e^(i θ_t n)` over `n_tokens` sequential positions.
pub fn rotation_1d(freqs: &FrequencySet, n_tokens: usize) -> Result<RotationTable> {
    expect_mode(freqs, FreqMode::OneD)?;
    let grid = PositionGrid::new(n_tokens, 1, false)?;
    Ok(RotationTable::build(freqs, &grid))
}

/// `R(n, 2t) = e^(i θ_t p^x_n)`, `R(n, 2t+1) = e^(i θ_t p^y_n)`.
pub fn rotation_axial(freqs: &FrequencySet, grid: &PositionGrid) -> Result<RotationTable> {
    expect_mode(freqs, FreqMode::Axial2D)?;
    Ok(RotationTable::build(freqs, grid))
}

/// `R(n, t) = e^(i (θx_t p^x_n + θy_t p^y_n))`.
pub fn rotation_mixed(freqs: &FrequencySet, grid: &PositionGrid) -> Result<RotationTable> {
    expect_mode(freqs, FreqMode::Mixed2D)?;
    Ok(RotationTable::build(freqs, grid))
}

/// Hadamard product of the complex view with the table.
pub fn apply_rope(v: &HeadTensor, table: &RotationTable) -> Result<HeadTensor> {
    let (n, d) = v.0.dim();
    if n != table.num_tokens() || d != table.d_head() {
        return invalid(format!(
            "head tensor {n}x{d} does not match rotation table {}x{}",
            table.num_tokens(),
            table.d_head()
        ));
    }
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        for t in 0..d / 2 {
            let r = table.entries[[i, t]];
            let (a, b) = (v.0[[i, 2 * t]], v.0[[i, 2 * t + 1]]);
            out[[i, 2 * t]] = a * r.re - b * r.im;
            out[[i, 2 * t + 1]] = a * r.im + b * r.re;
        }
    }
    Ok(HeadTensor(out))
}

/// Gradient with respect to rotation angles, given upstream sensitivities
/// `G = ∂L/∂Re R + i ∂L/∂Im R` on the table entries:
/// `∂L/∂angle = Re[conj(G) · iR] = Im(G)·Re(R) − Re(G)·Im(R)`.
pub(crate) fn angle_gradient(
    entries: &Array2<Complex64>,
    upstream: &Array2<Complex64>,
) -> Array2<f64> {
    let mut out = Array2::zeros(entries.dim());
    Zip::from(&mut out)
        .and(entries)
        .and(upstream)
        .for_each(|o, r, g| *o = g.im * r.re - g.re * r.im);
    out
}

/// Chains per-entry angle gradients into the flat frequency layout of
/// `freqs` (see [`FrequencySet`]). Class-token rows carry no position and
/// contribute nothing.
pub(crate) fn angles_to_freq_grad(
    freqs: &FrequencySet,
    grid: &PositionGrid,
    dangle: &Array2<f64>,
) -> Vec<f64> {
    let mut g = vec![0.0; freqs.values.len()];
    let off = grid.spatial_offset();
    let channels = freqs.channels();
    for (k, p) in grid.positions().iter().enumerate() {
        let row = dangle.row(k + off);
        let (px, py) = (p.x as f64, p.y as f64);
        match freqs.mode {
            FreqMode::OneD => {
                for t in 0..channels {
                    g[t] += row[t] * k as f64;
                }
            }
            FreqMode::Axial2D => {
                for j in 0..channels / 2 {
                    g[j] += row[2 * j] * px + row[2 * j + 1] * py;
                }
            }
            FreqMode::Mixed2D => {
                for t in 0..channels {
                    g[2 * t] += row[t] * px;
                    g[2 * t + 1] += row[t] * py;
                }
            }
        }
    }
    g
}

/// Gradient of a scalar loss with respect to each learnable frequency
/// pair `(∂L/∂θx_t, ∂L/∂θy_t)`, from upstream sensitivities on the
/// rotation-table entries (convention as in [`angle_gradient`]).
///
/// The result is the raw gradient; pinned entries are not masked here.
pub fn freq_gradient(
    grid: &PositionGrid,
    freqs: &FrequencySet,
    upstream: &Array2<Complex64>,
) -> Result<Vec<(f64, f64)>> {
    expect_mode(freqs, FreqMode::Mixed2D)?;
    if !freqs.learnable {
        return Err(RopeError::InvalidState(
            "frequency gradient requested for a fixed frequency set".into(),
        ));
    }
    if upstream.dim() != (grid.num_tokens(), freqs.channels()) {
        return invalid("upstream sensitivities do not match table shape");
    }
    let table = RotationTable::build(freqs, grid);
    let dangle = angle_gradient(&table.entries, upstream);
    let flat = angles_to_freq_grad(freqs, grid, &dangle);
    Ok(flat.chunks(2).map(|p| (p[0], p[1])).collect())
}

/// JSON form of a rotation table: frequencies plus grid shape and angles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RotationDoc {
    pub mode: FreqMode,
    pub d_head: usize,
    /// Flat frequency values in [`FrequencySet`] order.
    pub frequencies: Vec<f64>,
    pub grid_width: usize,
    pub grid_height: usize,
    pub class_token: bool,
    /// Row-major `N x (d_head/2)` angles in radians.
    pub angles: Vec<f64>,
}

impl From<&RotationTable> for RotationDoc {
    fn from(t: &RotationTable) -> Self {
        Self {
            mode: t.source.mode,
            d_head: t.d_head(),
            frequencies: t.source.values.clone(),
            grid_width: t.grid.width(),
            grid_height: t.grid.height(),
            class_token: t.grid.has_class_token(),
            angles: t.angles.iter().copied().collect(),
        }
    }
}

/// Long-format CSV: `token,px,py,channel,angle,cos,sin`.
pub fn rotation_to_csv(table: &RotationTable) -> Result<String> {
    use crate::io::fmt_f64;
    let header = ["token", "px", "py", "channel", "angle", "cos", "sin"];
    let mut rows = Vec::with_capacity(table.entries.len());
    for ((n, t), r) in table.entries.indexed_iter() {
        let (px, py) = match table.grid.position(n) {
            Some(p) => (p.x.to_string(), p.y.to_string()),
            None => (String::new(), String::new()),
        };
        rows.push(vec![
            n.to_string(),
            px,
            py,
            t.to_string(),
            fmt_f64(table.angles[[n, t]]),
            fmt_f64(r.re),
            fmt_f64(r.im),
        ]);
    }
    crate::io::csv_string(header, rows)
}
