//! Frequency-domain reconstruction, attention statistics, and FLOP /
//! parameter accounting.

use std::collections::BTreeSet;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionResult;
use crate::error::{invalid, Result};
use crate::par::{map_indices, Execution};
use crate::posembed::{ApeKind, PositionGrid};
use crate::rope::{freqs_axial, FreqMode, FrequencySet, DEFAULT_BASE_AXIAL};
use crate::tinyvit::{AttentionRecipe, ModelConfig};

/// A 2D DFT bin `(kx, ky)`, both in `0..S`.
pub type Bin = (usize, usize);

fn fft2(data: &mut Array2<Complex64>, inverse: bool) {
    let (rows, cols) = data.dim();
    let mut planner = FftPlanner::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(cols)
    } else {
        planner.plan_fft_forward(cols)
    };
    for mut row in data.rows_mut() {
        let mut buf = row.to_vec();
        row_fft.process(&mut buf);
        row.iter_mut().zip(buf).for_each(|(d, v)| *d = v);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(rows)
    } else {
        planner.plan_fft_forward(rows)
    };
    for mut col in data.columns_mut() {
        let mut buf = col.to_vec();
        col_fft.process(&mut buf);
        col.iter_mut().zip(buf).for_each(|(d, v)| *d = v);
    }
    if inverse {
        let norm = 1.0 / (rows * cols) as f64;
        data.mapv_inplace(|v| v * norm);
    }
}

fn check_size(size: usize) -> Result<()> {
    if size < 8 || !size.is_power_of_two() {
        return invalid(format!(
            "image size must be a power of two >= 8, got {size}"
        ));
    }
    Ok(())
}

/// Unit impulse at `(S/2, S/2)`.
pub fn centered_impulse(size: usize) -> Array2<f64> {
    let mut img = Array2::zeros((size, size));
    img[[size / 2, size / 2]] = 1.0;
    img
}

/// Every bin of an `S x S` transform.
pub fn all_bins(size: usize) -> Vec<Bin> {
    (0..size)
        .flat_map(|ky| (0..size).map(move |kx| (kx, ky)))
        .collect()
}

/// Nearest bin `round(θ·S/2π)` of each channel's `(θx, θy)`, with the
/// conjugate partner `(-kx, -ky) mod S` added. Sorted and deduplicated.
pub fn frequency_bins(freqs: &FrequencySet, size: usize) -> Result<Vec<Bin>> {
    if freqs.mode() == FreqMode::OneD {
        return invalid("1D frequencies have no 2D spectrum");
    }
    check_size(size)?;
    let s = size as i64;
    let to_bin = |theta: f64| -> i64 {
        let k = (theta * size as f64 / std::f64::consts::TAU).round() as i64;
        k.rem_euclid(s)
    };
    let mut set = BTreeSet::new();
    for (tx, ty) in freqs.channel_frequencies() {
        let (kx, ky) = (to_bin(tx), to_bin(ty));
        set.insert((ky, kx));
        set.insert(((s - ky) % s, (s - kx) % s));
    }
    Ok(set
        .into_iter()
        .map(|(ky, kx)| (kx as usize, ky as usize))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub size: usize,
    pub kept_bins: Vec<Bin>,
    /// `S x S`, row index y, column index x.
    #[serde(skip)]
    pub image: Array2<f64>,
    /// `‖recon − input‖ / ‖input‖`.
    pub error: f64,
    /// Share of the off-center energy lying on row `S/2` or column `S/2`.
    pub axial_energy_fraction: f64,
}

/// Keeps only `bins` of the input's 2D DFT and transforms back. The real
/// part of the inverse is returned, so pass conjugate-complete bin sets.
pub fn reconstruct_with_bins(image: &Array2<f64>, bins: &[Bin]) -> Result<ReconReport> {
    let (rows, cols) = image.dim();
    if rows != cols {
        return invalid(format!("image must be square, got {rows}x{cols}"));
    }
    check_size(rows)?;
    if let Some(b) = bins.iter().find(|(kx, ky)| *kx >= rows || *ky >= rows) {
        return invalid(format!("bin {b:?} outside a {rows}x{rows} transform"));
    }
    let mut spec = image.mapv(|v| Complex64::new(v, 0.0));
    fft2(&mut spec, false);
    let mut kept = Array2::<Complex64>::zeros((rows, cols));
    for &(kx, ky) in bins {
        kept[[ky, kx]] = spec[[ky, kx]];
    }
    fft2(&mut kept, true);
    let recon = kept.mapv(|v| v.re);
    let norm = image.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = recon
        .iter()
        .zip(image)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let error = if norm > 0.0 { diff / norm } else { diff };
    let mut kept_bins: Vec<Bin> = bins.to_vec();
    kept_bins.sort_by_key(|&(kx, ky)| (ky, kx));
    kept_bins.dedup();
    Ok(ReconReport {
        size: rows,
        kept_bins,
        axial_energy_fraction: axial_energy_fraction(&recon),
        image: recon,
        error,
    })
}

/// Energy on the centre row and column (centre pixel excluded) over all
/// off-centre energy; 0 when there is none.
pub fn axial_energy_fraction(image: &Array2<f64>) -> f64 {
    let (rows, cols) = image.dim();
    let (cy, cx) = (rows / 2, cols / 2);
    let mut axial = 0.0;
    let mut total = 0.0;
    for ((y, x), v) in image.indexed_iter() {
        if (y, x) == (cy, cx) {
            continue;
        }
        let e = v * v;
        total += e;
        if y == cy || x == cx {
            axial += e;
        }
    }
    if total > 0.0 {
        axial / total
    } else {
        0.0
    }
}

/// Reconstructs a centred impulse from only the bins the frequency set
/// reaches.
pub fn fft_reconstruct(freqs: &FrequencySet, size: usize) -> Result<ReconReport> {
    let bins = frequency_bins(freqs, size)?;
    reconstruct_with_bins(&centered_impulse(size), &bins)
}

/// Mixed set whose channel magnitudes match the axial set of the same
/// width but point in random directions, so every channel has a nonzero
/// cross term. Seeds from `seed` upward are tried until the set occupies
/// as many bins at `size` as the axial set does; the seed used is returned.
pub fn mixed_comparison_set(d_head: usize, size: usize, seed: u64) -> Result<(FrequencySet, u64)> {
    let axial = freqs_axial(d_head, DEFAULT_BASE_AXIAL)?;
    let target = frequency_bins(&axial, size)?.len();
    let magnitudes: Vec<f64> = axial
        .channel_frequencies()
        .iter()
        .map(|(x, y)| x + y)
        .collect();
    for s in seed..seed.saturating_add(10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let pairs: Vec<(f64, f64)> = magnitudes
            .iter()
            .map(|&m| {
                // Stay clear of the axes so no channel degenerates to axial.
                let quadrant = rng.random_range(0..4) as f64 * std::f64::consts::FRAC_PI_2;
                let alpha = quadrant + rng.random_range(0.15..(std::f64::consts::FRAC_PI_2 - 0.15));
                (m * alpha.cos(), m * alpha.sin())
            })
            .collect();
        let set = FrequencySet::mixed(d_head, &pairs)?;
        if frequency_bins(&set, size)?.len() == target {
            return Ok((set, s));
        }
    }
    invalid(format!(
        "no mixed set with {target} bins found for d_head={d_head}, size={size}"
    ))
}

fn check_square(result: &AttentionResult) -> Result<usize> {
    let (r, c) = result.probs.dim();
    if r != c || r == 0 {
        return invalid(format!(
            "attention matrix must be square and non-empty, got {r}x{c}"
        ));
    }
    Ok(r)
}

/// Mean over spatial queries of `Σ_m P(n,m)·‖p_n − p_m‖`, in patch units.
/// Class-token rows and columns are dropped and each remaining row is
/// renormalized over its spatial keys.
pub fn attention_distance(result: &AttentionResult, grid: &PositionGrid) -> Result<f64> {
    let n = check_square(result)?;
    if n != grid.num_tokens() {
        return invalid(format!(
            "attention has {n} tokens, grid has {}",
            grid.num_tokens()
        ));
    }
    if grid.num_spatial() == 0 {
        return invalid("no spatial tokens");
    }
    let off = grid.spatial_offset();
    let pos = grid.positions();
    let mut total = 0.0;
    for (a, pa) in pos.iter().enumerate() {
        let row = result.probs.row(a + off);
        let mut mass = 0.0;
        let mut acc = 0.0;
        for (b, pb) in pos.iter().enumerate() {
            let p = row[b + off];
            if p < 0.0 {
                return invalid(format!("negative probability {p}"));
            }
            mass += p;
            acc += p * pa.distance(*pb);
        }
        if mass > 0.0 {
            total += acc / mass;
        }
    }
    Ok(total / pos.len() as f64)
}

/// Mean over rows of `−Σ p ln p`, with `0 ln 0 = 0`.
pub fn attention_entropy(result: &AttentionResult) -> Result<f64> {
    let n = check_square(result)?;
    let mut total = 0.0;
    for row in result.probs.rows() {
        let mut sum = 0.0;
        let mut h = 0.0;
        for &p in row {
            if p < 0.0 || !p.is_finite() {
                return invalid(format!("invalid probability {p}"));
            }
            sum += p;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        if (sum - 1.0).abs() > 1e-6 {
            return invalid(format!("row sums to {sum}, not 1"));
        }
        total += h;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub layer: usize,
    pub head: usize,
    pub distance: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnStats {
    pub heads: Vec<HeadStats>,
    /// How the numbers were averaged.
    pub scope: String,
}

pub const ATTN_SCOPE: &str =
    "per head; mean over spatial queries; class token excluded from distance, included in entropy";

/// Distance and entropy of every head of every layer, in layer-major order.
pub fn attention_stats(
    layers: &[Vec<AttentionResult>],
    grid: &PositionGrid,
    exec: Execution,
) -> Result<AttnStats> {
    let flat: Vec<(usize, &AttentionResult)> = layers
        .iter()
        .enumerate()
        .flat_map(|(l, heads)| heads.iter().map(move |r| (l, r)))
        .collect();
    let stats = map_indices(exec, flat.len(), |i| -> Result<HeadStats> {
        let (layer, r) = flat[i];
        Ok(HeadStats {
            layer,
            head: r.head,
            distance: attention_distance(r, grid)?,
            entropy: attention_entropy(r)?,
        })
    });
    Ok(AttnStats {
        heads: stats.into_iter().collect::<Result<_>>()?,
        scope: ATTN_SCOPE.to_string(),
    })
}

pub const FUSED_COMPLEX: &str = "fused-complex";
pub const REAL_FLOPS: &str = "real-6-per-complex";

/// Forward multiply-accumulate count of one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostItem {
    pub name: String,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// Label of the convention for `rotation_ops`.
    pub convention: String,
    /// Complex multiplies applied to queries and keys, one op each.
    pub rotation_ops: u64,
    /// Same rotations as real floating-point operations (6 per multiply).
    pub rotation_real_flops: u64,
    /// Backbone multiply-accumulates plus `rotation_ops`.
    pub total_flops: u64,
    /// Trainable position parameters inside attention layers (frequencies
    /// and relative bias tables).
    pub extra_params: u64,
    /// All parameters, `extra_params` included.
    pub total_params: u64,
    pub rotation_flop_ratio: f64,
    pub extra_param_ratio: f64,
    pub breakdown: Vec<CostItem>,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// FLOP and parameter accounting for a standard ViT of the config's shape.
///
/// FLOPs are multiply-accumulates of the matrix products: patch embedding
/// `S·p²C·d`, per block `3Nd² + 2N²d + Nd² + 2Nd·h`, classifier `d·K`,
/// where `S` is the spatial token count, `N` includes the class token and
/// `h` is the MLP width. Norms, softmax, activations and bias adds are not
/// counted. Rotations are added under the fused-complex convention:
/// `2·S·(d/2)` per rotary layer.
///
/// Parameters: patch embedding `p²C·d + d`, class token `d`, learnable APE
/// `N·d`, per block two norms `4d`, attention `4d² + d` (`+3d` with qkv
/// bias), MLP `2dh + h + d`, final norm `2d`, classifier `dK + K`, plus the
/// trainable frequencies (`d` per mixed layer, `d/2` per learnable axial
/// layer) and bias tables (`(2W+1)(2H+1) + 1` per head).
///
/// With zero layers every attention-side count (rotations and extra
/// parameters) is 0; the stem and classifier are still counted.
pub fn count_costs(cfg: &ModelConfig) -> CostReport {
    let d = cfg.d as u64;
    let h = cfg.mlp_hidden() as u64;
    let s = (cfg.grid_width * cfg.grid_height) as u64;
    let n = s + cfg.class_token as u64;
    let stem = &cfg.stem;
    let patch_in = (stem.patch_size * stem.patch_size * stem.in_channels) as u64;
    let k = stem.num_classes as u64;
    let layers = cfg.layer_count as u64;
    let mut breakdown = vec![CostItem {
        name: "patch_embed".into(),
        flops: s * patch_in * d,
        params: patch_in * d + d,
    }];
    let mut stem_params = 0;
    if cfg.class_token {
        stem_params += d;
    }
    if cfg.ape.enabled && cfg.ape.kind == ApeKind::Learnable {
        stem_params += n * d;
    }
    breakdown.push(CostItem {
        name: "tokens".into(),
        flops: 0,
        params: stem_params,
    });
    let qkv_bias = if stem.qkv_bias { 3 * d } else { 0 };
    let block = CostItem {
        name: "blocks".into(),
        flops: layers * (3 * n * d * d + 2 * n * n * d + n * d * d + 2 * n * d * h),
        params: layers * (4 * d + 4 * d * d + d + qkv_bias + 2 * d * h + h + d),
    };
    breakdown.push(block);
    breakdown.push(CostItem {
        name: "head".into(),
        flops: d * k,
        params: 2 * d + d * k + k,
    });

    let mut rotation_ops = 0;
    let mut extra_params = 0;
    let table = ((2 * cfg.grid_width + 1) * (2 * cfg.grid_height + 1) + 1) as u64;
    for l in 0..cfg.layer_count {
        let r = cfg.recipe(l);
        if r.uses_rope() {
            rotation_ops += 2 * s * (d / 2);
        }
        extra_params += match r {
            AttentionRecipe::RopeMixed | AttentionRecipe::RpbRopeMixed => d,
            AttentionRecipe::RopeAxialLearnable => d / 2,
            _ => 0,
        };
        if r.uses_rpb() {
            extra_params += cfg.head_count as u64 * table;
        }
    }
    breakdown.push(CostItem {
        name: "position".into(),
        flops: rotation_ops,
        params: extra_params,
    });
    let total_flops: u64 = breakdown.iter().map(|c| c.flops).sum();
    let total_params: u64 = breakdown.iter().map(|c| c.params).sum();
    CostReport {
        convention: FUSED_COMPLEX.into(),
        rotation_ops,
        rotation_real_flops: 6 * rotation_ops,
        total_flops,
        extra_params,
        total_params,
        rotation_flop_ratio: ratio(rotation_ops, total_flops),
        extra_param_ratio: ratio(extra_params, total_params),
        breakdown,
    }
}
