//! Scaled dot-product attention with pluggable position embeddings.
//!
//! All modes keep the `1/sqrt(d_head)` factor on the query-key product,
//! including the rotary ones.

use ndarray::{s, Array1, Array2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RopeError};
use crate::par::{map_indices, Execution};
use crate::posembed::{expand_rpb, PositionGrid, RpbExtension, RpbPlacement, RpbTable};
use crate::rope::{angle_gradient, apply_rope, HeadTensor, RotationTable};

/// Relative position bias bound to the grid it is expanded over.
#[derive(Debug, Clone, PartialEq)]
pub struct RpbBias {
    pub table: RpbTable,
    pub grid: PositionGrid,
    pub placement: RpbPlacement,
    pub extension: RpbExtension,
}

impl RpbBias {
    pub fn new(table: RpbTable, grid: PositionGrid) -> Self {
        Self {
            table,
            grid,
            placement: RpbPlacement::PreSoftmax,
            extension: RpbExtension::Strict,
        }
    }

    pub fn expand(&self) -> Result<Array2<f64>> {
        expand_rpb(&self.table, &self.grid, self.extension)
    }
}

/// Position-embedding treatment of one attention head. APE is applied at
/// the network stem and is not represented here.
#[derive(Debug, Clone, PartialEq)]
pub enum PeMode {
    None,
    Rpb(RpbBias),
    Rope(RotationTable),
    RopePlusRpb {
        rotation: RotationTable,
        rpb: RpbBias,
    },
}

impl PeMode {
    pub fn label(&self) -> &'static str {
        match self {
            PeMode::None => "none",
            PeMode::Rpb(b) if b.placement == RpbPlacement::PostSoftmax => "rpb_post_softmax",
            PeMode::Rpb(_) => "rpb",
            PeMode::Rope(_) => "rope",
            PeMode::RopePlusRpb { .. } => "rope+rpb",
        }
    }

    fn rotation(&self) -> Option<&RotationTable> {
        match self {
            PeMode::Rope(r) | PeMode::RopePlusRpb { rotation: r, .. } => Some(r),
            _ => None,
        }
    }

    fn rpb(&self) -> Option<&RpbBias> {
        match self {
            PeMode::Rpb(b) | PeMode::RopePlusRpb { rpb: b, .. } => Some(b),
            _ => None,
        }
    }
}

/// Attention of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    pub head: usize,
    pub d_head: usize,
    pub mode: String,
    /// Row-stochastic except under post-softmax RPB.
    pub probs: Array2<f64>,
    /// Pre-softmax values (scaled similarities plus any pre-softmax bias).
    pub logits: Array2<f64>,
}

impl AttentionResult {
    pub fn num_tokens(&self) -> usize {
        self.probs.nrows()
    }

    pub fn to_csv(&self) -> Result<String> {
        crate::io::matrix_to_csv(&self.probs)
    }
}

/// JSON export of an [`AttentionResult`] with its metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionDoc {
    pub head: usize,
    pub mode: String,
    pub d_head: usize,
    pub grid_width: Option<usize>,
    pub grid_height: Option<usize>,
    pub class_token: Option<bool>,
    pub n: usize,
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
}

impl AttentionDoc {
    pub fn new(result: &AttentionResult, grid: Option<&PositionGrid>) -> Self {
        Self {
            head: result.head,
            mode: result.mode.clone(),
            d_head: result.d_head,
            grid_width: grid.map(PositionGrid::width),
            grid_height: grid.map(PositionGrid::height),
            class_token: grid.map(PositionGrid::has_class_token),
            n: result.num_tokens(),
            probs: result.probs.iter().copied().collect(),
            logits: result.logits.iter().copied().collect(),
        }
    }
}

/// Row softmax with per-row max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn ensure_finite(a: &Array2<f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(RopeError::Numeric(format!(
            "{what} contains non-finite values"
        )))
    }
}

/// Intermediate values of one head's forward pass, kept for the backward
/// pass.
#[derive(Debug, Clone)]
pub(crate) struct HeadCache {
    q: Array2<f64>,
    k: Array2<f64>,
    q_rot: Array2<f64>,
    k_rot: Array2<f64>,
    soft: Array2<f64>,
    scale: f64,
}

/// Gradients of one head with respect to its inputs and position tables.
#[derive(Debug, Clone)]
pub(crate) struct HeadGrads {
    pub dq: Array2<f64>,
    pub dk: Array2<f64>,
    /// Gradient on the expanded `N x N` bias, when the mode has one.
    pub dbias: Option<Array2<f64>>,
    /// Gradient on the rotation angles, when the mode rotates.
    pub dangle: Option<Array2<f64>>,
}

pub(crate) fn head_forward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    mode: &PeMode,
) -> Result<(AttentionResult, HeadCache)> {
    if q.dim() != k.dim() {
        return invalid(format!(
            "query {:?} and key {:?} shapes differ",
            q.dim(),
            k.dim()
        ));
    }
    let (n, d) = q.dim();
    if d == 0 {
        return invalid("d_head must be positive");
    }
    ensure_finite(q, "query")?;
    ensure_finite(k, "key")?;
    let (q_rot, k_rot) = match mode.rotation() {
        Some(table) => (
            apply_rope(&HeadTensor(q.clone()), table)?.0,
            apply_rope(&HeadTensor(k.clone()), table)?.0,
        ),
        None => (q.clone(), k.clone()),
    };
    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = q_rot.dot(&k_rot.t()) * scale;
    let bias = match mode.rpb() {
        Some(b) => {
            let e = b.expand()?;
            if e.dim() != (n, n) {
                return invalid(format!("bias is {:?}, attention is {n}x{n}", e.dim()));
            }
            Some((e, b.placement))
        }
        None => None,
    };
    if let Some((e, RpbPlacement::PreSoftmax)) = &bias {
        logits += e;
    }
    let soft = softmax_rows(&logits);
    let probs = match &bias {
        Some((e, RpbPlacement::PostSoftmax)) => &soft + e,
        _ => soft.clone(),
    };
    ensure_finite(&probs, "attention")?;
    let result = AttentionResult {
        head: 0,
        d_head: d,
        mode: mode.label().to_string(),
        probs,
        logits,
    };
    let cache = HeadCache {
        q: q.clone(),
        k: k.clone(),
        q_rot,
        k_rot,
        soft,
        scale,
    };
    Ok((result, cache))
}

// Given G' = ∂L/∂z' for z' = z∘R (complex view), returns (∂L/∂z, ∂L/∂R).
fn unrotate(
    grad_rot: &Array2<f64>,
    input: &Array2<f64>,
    table: &RotationTable,
) -> (Array2<f64>, Array2<Complex64>) {
    let g = HeadTensor(grad_rot.clone())
        .to_complex_pairs()
        .expect("even width");
    let z = HeadTensor(input.clone())
        .to_complex_pairs()
        .expect("even width");
    let r = table.entries();
    let dz = ndarray::Zip::from(&g)
        .and(r)
        .map_collect(|g, r| g * r.conj());
    let dr = ndarray::Zip::from(&g)
        .and(&z)
        .map_collect(|g, z| g * z.conj());
    (HeadTensor::from_complex_pairs(&dz).0, dr)
}

pub(crate) fn head_backward(cache: &HeadCache, mode: &PeMode, dprobs: &Array2<f64>) -> HeadGrads {
    let soft = &cache.soft;
    // Softmax Jacobian, row by row: dS = P ∘ (dP − <dP, P>).
    let inner = (dprobs * soft).sum_axis(Axis(1));
    let dlogits = soft * &(dprobs - &inner.insert_axis(Axis(1)));
    let dbias = mode.rpb().map(|b| match b.placement {
        RpbPlacement::PreSoftmax => dlogits.clone(),
        RpbPlacement::PostSoftmax => dprobs.clone(),
    });
    let dq_rot = dlogits.dot(&cache.k_rot) * cache.scale;
    let dk_rot = dlogits.t().dot(&cache.q_rot) * cache.scale;
    match mode.rotation() {
        Some(table) => {
            let (dq, drq) = unrotate(&dq_rot, &cache.q, table);
            let (dk, drk) = unrotate(&dk_rot, &cache.k, table);
            let dangle = angle_gradient(table.entries(), &(drq + drk));
            HeadGrads {
                dq,
                dk,
                dbias,
                dangle: Some(dangle),
            }
        }
        None => HeadGrads {
            dq: dq_rot,
            dk: dk_rot,
            dbias,
            dangle: None,
        },
    }
}

/// Single-head attention.
pub fn attend(q: &HeadTensor, k: &HeadTensor, mode: &PeMode) -> Result<AttentionResult> {
    head_forward(&q.0, &k.0, mode).map(|(r, _)| r)
}

/// Projections of one head: each `d x d_head`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjection {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhaWeights {
    pub heads: Vec<HeadProjection>,
    /// `d x d` output projection and its bias.
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
}

impl MhaWeights {
    pub fn d(&self) -> usize {
        self.wo.nrows()
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn d_head(&self) -> usize {
        self.heads.first().map_or(0, |h| h.wq.ncols())
    }

    fn validate(&self) -> Result<()> {
        let d = self.d();
        let h = self.head_count();
        if h == 0 || !d.is_multiple_of(h) {
            return invalid(format!("model width {d} not divisible by head count {h}"));
        }
        let dh = d / h;
        for p in &self.heads {
            for w in [&p.wq, &p.wk, &p.wv] {
                if w.dim() != (d, dh) {
                    return invalid(format!(
                        "head projection {:?}, expected ({d}, {dh})",
                        w.dim()
                    ));
                }
            }
        }
        if self.wo.dim() != (d, d) || self.bo.len() != d {
            return invalid("output projection shape mismatch");
        }
        Ok(())
    }
}

/// Everything a multi-head forward pass produces, including the per-head
/// caches the backward pass needs.
#[derive(Debug, Clone)]
pub(crate) struct MhaForward {
    pub output: Array2<f64>,
    pub results: Vec<AttentionResult>,
    pub q: Vec<Array2<f64>>,
    pub k: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub caches: Vec<HeadCache>,
    pub concat: Array2<f64>,
}

pub(crate) fn mha_forward(
    x: &Array2<f64>,
    weights: &MhaWeights,
    modes: &[PeMode],
    exec: Execution,
) -> Result<MhaForward> {
    weights.validate()?;
    if x.ncols() != weights.d() {
        return invalid(format!(
            "input width {} vs model width {}",
            x.ncols(),
            weights.d()
        ));
    }
    if modes.len() != weights.head_count() {
        return invalid(format!(
            "{} position modes for {} heads",
            modes.len(),
            weights.head_count()
        ));
    }
    let per_head = map_indices(exec, weights.head_count(), |h| -> Result<_> {
        let p = &weights.heads[h];
        let q = x.dot(&p.wq);
        let k = x.dot(&p.wk);
        let v = x.dot(&p.wv);
        let (mut res, cache) = head_forward(&q, &k, &modes[h])?;
        res.head = h;
        let out = res.probs.dot(&v);
        Ok((q, k, v, res, cache, out))
    });
    let n = x.nrows();
    let dh = weights.d_head();
    let mut fwd = MhaForward {
        output: Array2::zeros((0, 0)),
        results: Vec::new(),
        q: Vec::new(),
        k: Vec::new(),
        v: Vec::new(),
        caches: Vec::new(),
        concat: Array2::zeros((n, weights.d())),
    };
    for (h, item) in per_head.into_iter().enumerate() {
        let (q, k, v, res, cache, out) = item?;
        fwd.concat
            .slice_mut(s![.., h * dh..(h + 1) * dh])
            .assign(&out);
        fwd.q.push(q);
        fwd.k.push(k);
        fwd.v.push(v);
        fwd.results.push(res);
        fwd.caches.push(cache);
    }
    fwd.output = fwd.concat.dot(&weights.wo) + &weights.bo;
    Ok(fwd)
}

/// Multi-head attention: head `h` projects with its own triplet, applies its
/// own position mode, and the concatenated head outputs go through the
/// output projection. Heads are evaluated independently and combined in
/// head order.
pub fn multi_head_attend(
    x: &Array2<f64>,
    weights: &MhaWeights,
    modes: &[PeMode],
    exec: Execution,
) -> Result<(Array2<f64>, Vec<AttentionResult>)> {
    let f = mha_forward(x, weights, modes, exec)?;
    Ok((f.output, f.results))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseShiftReport {
    pub phi: f64,
    pub max_abs_diff: f64,
}

/// Right-multiplying by this `d_head x d_head` block-diagonal matrix rotates
/// every complex channel of a row vector by `phi`.
pub fn phase_rotation_matrix(d_head: usize, phi: f64) -> Array2<f64> {
    let (sin, cos) = phi.sin_cos();
    let mut m = Array2::zeros((d_head, d_head));
    for t in 0..d_head / 2 {
        let (a, b) = (2 * t, 2 * t + 1);
        m[[a, a]] = cos;
        m[[a, b]] = sin;
        m[[b, a]] = -sin;
        m[[b, b]] = cos;
    }
    m
}

/// Compares attention under a uniform query-side phase offset `phi` with
/// attention under the original table but a query projection pre-rotated
/// by `phi`. The two agree when the projection can absorb the phase.
pub fn phase_shift_check(
    x: &Array2<f64>,
    wq: &Array2<f64>,
    wk: &Array2<f64>,
    phi: f64,
    table: &RotationTable,
) -> Result<PhaseShiftReport> {
    let q = x.dot(wq);
    let k = x.dot(wk);
    if q.ncols() != table.d_head() || q.nrows() != table.num_tokens() {
        return invalid("projections do not match rotation table");
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    // (a) shifted angles on the query side only.
    let qa = apply_rope(&HeadTensor(q), &table.with_phase(phi))?.0;
    let ka = apply_rope(&HeadTensor(k.clone()), table)?.0;
    let a = softmax_rows(&(qa.dot(&ka.t()) * scale));
    // (b) phase folded into the query weights.
    let wq_shifted = wq.dot(&phase_rotation_matrix(wq.ncols(), phi));
    let qb = apply_rope(&HeadTensor(x.dot(&wq_shifted)), table)?.0;
    let b = softmax_rows(&(qb.dot(&ka.t()) * scale));
    let max_abs_diff = (&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(PhaseShiftReport { phi, max_abs_diff })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posembed::make_grid;
    use crate::rope::{freqs_axial, rotation_axial, FrequencySet, RotationTable};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn zero_inputs_give_uniform_rows() {
        let q = HeadTensor::new(Array2::zeros((4, 2)));
        let r = attend(&q, &q, &PeMode::None).unwrap();
        assert!(r.probs.iter().all(|&p| p == 0.25));
    }

    #[test]
    fn identity_rotation_equals_no_rope() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = make_grid(3, 3, true).unwrap();
        let q = HeadTensor::new(rand_mat(&mut rng, 10, 8));
        let k = HeadTensor::new(rand_mat(&mut rng, 10, 8));
        let a = attend(&q, &k, &PeMode::None).unwrap();
        let id = RotationTable::identity(&grid, 8).unwrap();
        let b = attend(&q, &k, &PeMode::Rope(id)).unwrap();
        assert!(max_diff(&a.probs, &b.probs) <= 1e-15);
    }

    #[test]
    fn two_token_quarter_turn() {
        // d_head = 2, θ = π/2, positions 0 and 1, q = k = [1, 0].
        let grid = make_grid(2, 1, false).unwrap();
        let f = FrequencySet::mixed(2, &[(FRAC_PI_2, 0.0)]).unwrap();
        let table = RotationTable::build(&f, &grid);
        let q = HeadTensor::new(ndarray::array![[1.0, 0.0], [1.0, 0.0]]);
        let r = attend(&q, &q, &PeMode::Rope(table)).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let want0 = s.exp() / (s.exp() + 1.0);
        assert!((r.probs[[0, 0]] - want0).abs() < 1e-15);
        assert!((r.probs[[0, 1]] - (1.0 - want0)).abs() < 1e-15);
        assert!(r.logits[[0, 1]].abs() < 1e-16);
    }

    #[test]
    fn pre_softmax_rpb_shifts_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = make_grid(2, 2, false).unwrap();
        let table = RpbTable::random(&grid, 1.0, &mut rng);
        let bias = RpbBias::new(table.clone(), grid.clone());
        let e = bias.expand().unwrap();
        let q = HeadTensor::new(rand_mat(&mut rng, 4, 4));
        let k = HeadTensor::new(rand_mat(&mut rng, 4, 4));
        let plain = attend(&q, &k, &PeMode::None).unwrap();
        let with = attend(&q, &k, &PeMode::Rpb(bias)).unwrap();
        assert!(max_diff(&(&plain.logits + &e), &with.logits) < 1e-15);
        for row in with.probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn post_softmax_rpb_breaks_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = make_grid(2, 2, false).unwrap();
        let mut table = RpbTable::for_grid(&grid);
        table.set(1, 0, 0.5).unwrap();
        let mut bias = RpbBias::new(table, grid);
        bias.placement = RpbPlacement::PostSoftmax;
        let q = HeadTensor::new(rand_mat(&mut rng, 4, 4));
        let r = attend(&q, &q, &PeMode::Rpb(bias)).unwrap();
        assert_eq!(r.mode, "rpb_post_softmax");
        let worst = r
            .probs
            .rows()
            .into_iter()
            .map(|row| (row.sum() - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(worst > 0.4);
    }

    #[test]
    fn attend_errors() {
        let q = HeadTensor::new(Array2::zeros((3, 4)));
        let k = HeadTensor::new(Array2::zeros((2, 4)));
        assert!(matches!(
            attend(&q, &k, &PeMode::None),
            Err(RopeError::InvalidArgument(_))
        ));
        let mut bad = Array2::zeros((3, 4));
        bad[[1, 1]] = f64::NAN;
        let bad = HeadTensor::new(bad);
        assert!(matches!(
            attend(&bad, &bad, &PeMode::None),
            Err(RopeError::Numeric(_))
        ));
        let grid = make_grid(2, 2, false).unwrap();
        let table = rotation_axial(&freqs_axial(4, 100.0).unwrap(), &grid).unwrap();
        assert!(attend(&q, &q, &PeMode::Rope(table)).is_err());
    }

    #[test]
    fn rope_attention_permutation_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = make_grid(3, 2, false).unwrap();
        let f = FrequencySet::mixed(4, &[(0.9, 0.3), (-0.2, 1.1)]).unwrap();
        let q = rand_mat(&mut rng, 6, 4);
        let k = rand_mat(&mut rng, 6, 4);
        let base = attend(
            &HeadTensor::new(q.clone()),
            &HeadTensor::new(k.clone()),
            &PeMode::Rope(RotationTable::build(&f, &grid)),
        )
        .unwrap();
        let perm = [4, 0, 5, 2, 1, 3];
        let pgrid = grid.permuted(&perm).unwrap();
        let pq = q.select(Axis(0), &perm);
        let pk = k.select(Axis(0), &perm);
        let permuted = attend(
            &HeadTensor::new(pq),
            &HeadTensor::new(pk),
            &PeMode::Rope(RotationTable::build(&f, &pgrid)),
        )
        .unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let d = permuted.probs[[i, j]] - base.probs[[perm[i], perm[j]]];
                assert!(d.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn scaling_preserves_row_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let q = rand_mat(&mut rng, 5, 4);
            let k = rand_mat(&mut rng, 5, 4);
            let c = rng.random_range(0.1..5.0);
            let a = attend(
                &HeadTensor::new(q.clone()),
                &HeadTensor::new(k.clone()),
                &PeMode::None,
            )
            .unwrap();
            let b = attend(
                &HeadTensor::new(q * c),
                &HeadTensor::new(k * c),
                &PeMode::None,
            )
            .unwrap();
            for (ra, rb) in a.probs.rows().into_iter().zip(b.probs.rows()) {
                let am = |r: ndarray::ArrayView1<f64>| {
                    r.iter()
                        .enumerate()
                        .max_by(|x, y| x.1.total_cmp(y.1))
                        .unwrap()
                        .0
                };
                assert_eq!(am(ra), am(rb));
            }
        }
    }

    fn weights(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> MhaWeights {
        let dh = d / heads;
        MhaWeights {
            heads: (0..heads)
                .map(|_| HeadProjection {
                    wq: rand_mat(rng, d, dh),
                    wk: rand_mat(rng, d, dh),
                    wv: rand_mat(rng, d, dh),
                })
                .collect(),
            wo: rand_mat(rng, d, d),
            bo: Array1::zeros(d),
        }
    }

    #[test]
    fn uniform_attention_averages_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_mat(&mut rng, 5, 4);
        let w = MhaWeights {
            heads: vec![HeadProjection {
                wq: Array2::zeros((4, 4)),
                wk: Array2::zeros((4, 4)),
                wv: Array2::eye(4),
            }],
            wo: Array2::eye(4),
            bo: Array1::zeros(4),
        };
        let (out, _) = multi_head_attend(&x, &w, &[PeMode::None], Execution::Sequential).unwrap();
        let mean = x.mean_axis(Axis(0)).unwrap();
        for row in out.rows() {
            assert!(row
                .iter()
                .zip(mean.iter())
                .all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }

    #[test]
    fn single_identity_head_reduces_to_attend() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_mat(&mut rng, 6, 4);
        let w = MhaWeights {
            heads: vec![HeadProjection {
                wq: Array2::eye(4),
                wk: Array2::eye(4),
                wv: Array2::eye(4),
            }],
            wo: Array2::eye(4),
            bo: Array1::zeros(4),
        };
        let (out, res) = multi_head_attend(&x, &w, &[PeMode::None], Execution::Parallel).unwrap();
        let direct = attend(
            &HeadTensor::new(x.clone()),
            &HeadTensor::new(x.clone()),
            &PeMode::None,
        )
        .unwrap();
        assert_eq!(res[0].probs, direct.probs);
        assert!(max_diff(&out, &direct.probs.dot(&x)) < 1e-15);
    }

    #[test]
    fn heads_with_different_frequencies_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grid = make_grid(3, 3, false).unwrap();
        let w = weights(&mut rng, 8, 2);
        let x = rand_mat(&mut rng, 9, 8);
        let f0 = FrequencySet::mixed(4, &[(1.0, 0.0), (0.0, 1.0)]).unwrap();
        let f1 = FrequencySet::mixed(4, &[(0.3, 0.7), (-0.5, 0.2)]).unwrap();
        let modes = [
            PeMode::Rope(RotationTable::build(&f0, &grid)),
            PeMode::Rope(RotationTable::build(&f1, &grid)),
        ];
        let (out, res) = multi_head_attend(&x, &w, &modes, Execution::Parallel).unwrap();
        assert_eq!(out.dim(), (9, 8));
        assert_eq!(res[0].probs.dim(), res[1].probs.dim());
        assert!(max_diff(&res[0].probs, &res[1].probs) > 1e-3);
        assert_eq!((res[0].head, res[1].head), (0, 1));

        let (seq_out, seq_res) = multi_head_attend(&x, &w, &modes, Execution::Sequential).unwrap();
        assert_eq!(seq_out, out);
        assert_eq!(seq_res, res);
    }

    #[test]
    fn mha_rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut w = weights(&mut rng, 8, 2);
        let x = rand_mat(&mut rng, 4, 8);
        assert!(multi_head_attend(&x, &w, &[PeMode::None], Execution::Sequential).is_err());
        w.heads.push(w.heads[0].clone());
        assert!(multi_head_attend(
            &x,
            &w,
            &[PeMode::None, PeMode::None, PeMode::None],
            Execution::Sequential
        )
        .is_err());
    }

    #[test]
    fn phase_shift_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let grid = make_grid(3, 3, false).unwrap();
        let table = rotation_axial(&freqs_axial(8, 100.0).unwrap(), &grid).unwrap();
        let x = rand_mat(&mut rng, 9, 8);
        let wq = rand_mat(&mut rng, 8, 8);
        let wk = rand_mat(&mut rng, 8, 8);
        assert_eq!(
            phase_shift_check(&x, &wq, &wk, 0.0, &table)
                .unwrap()
                .max_abs_diff,
            0.0
        );
        assert!(
            phase_shift_check(&x, &wq, &wk, 2.0 * PI, &table)
                .unwrap()
                .max_abs_diff
                < 1e-12
        );
        for _ in 0..20 {
            let phi = rng.random_range(-PI..PI);
            assert!(
                phase_shift_check(&x, &wq, &wk, phi, &table)
                    .unwrap()
                    .max_abs_diff
                    < 1e-10
            );
        }
    }

    // Finite-difference oracle on the head backward pass, for every mode.
    #[test]
    fn head_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grid = make_grid(2, 2, true).unwrap();
        let f = FrequencySet::mixed(4, &[(0.8, -0.3), (0.1, 0.9)]).unwrap();
        let rot = RotationTable::build(&f, &grid);
        let mut post = RpbBias::new(RpbTable::random(&grid, 0.5, &mut rng), grid.clone());
        post.placement = RpbPlacement::PostSoftmax;
        let pre = RpbBias::new(RpbTable::random(&grid, 0.5, &mut rng), grid.clone());
        let modes = [
            PeMode::None,
            PeMode::Rope(rot.clone()),
            PeMode::Rpb(post),
            PeMode::RopePlusRpb {
                rotation: rot,
                rpb: pre,
            },
        ];
        let w = rand_mat(&mut rng, 5, 5);
        for mode in &modes {
            let q = rand_mat(&mut rng, 5, 4);
            let k = rand_mat(&mut rng, 5, 4);
            let loss = |q: &Array2<f64>, k: &Array2<f64>| {
                let (r, _) = head_forward(q, k, mode).unwrap();
                (&r.probs * &w).sum()
            };
            let (_, cache) = head_forward(&q, &k, mode).unwrap();
            let g = head_backward(&cache, mode, &w);
            let h = 1e-6;
            for (which, analytic) in [(0, &g.dq), (1, &g.dk)] {
                for idx in 0..20 {
                    let ix = (idx / 4, idx % 4);
                    let (mut qp, mut kp) = (q.clone(), k.clone());
                    let (mut qm, mut km) = (q.clone(), k.clone());
                    if which == 0 {
                        qp[ix] += h;
                        qm[ix] -= h;
                    } else {
                        kp[ix] += h;
                        km[ix] -= h;
                    }
                    let num = (loss(&qp, &kp) - loss(&qm, &km)) / (2.0 * h);
                    assert!((num - analytic[ix]).abs() < 1e-8, "{} {ix:?}", mode.label());
                }
            }
        }
    }
}
