//! Seeded property suite over the rotation, attention, analysis and
//! gradient code. Every trial draws from its own ChaCha stream, so results
//! are identical for a given seed whatever the execution strategy.

use std::fmt::Write as _;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{all_bins, attention_entropy, reconstruct_with_bins};
use crate::attention::{attend, phase_shift_check, softmax_rows, AttentionResult, PeMode};
use crate::error::Result;
use crate::par::{map_indices, Execution};
use crate::posembed::{expand_rpb, make_grid, PositionGrid, RpbExtension, RpbTable};
use crate::rope::{
    apply_rope, freqs_1d, freqs_axial, freqs_mixed_init, FreqMode, FrequencySet, HeadTensor,
    RotationTable, DEFAULT_BASE_1D,
};
use crate::tinyvit::{
    forward_on_grid, grad_check, AttentionRecipe, ModelConfig, ParamClass, Params,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckOptions {
    pub seed: u64,
    /// Trials of the relative-position identity; the other properties use
    /// fixed, smaller counts.
    pub identity_trials: usize,
    /// Rotates keys the wrong way in the relative-position identity. Only
    /// for checking that the suite can fail.
    pub inject_fault: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            identity_trials: 1000,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub trials: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub seed: u64,
    pub results: Vec<PropertyResult>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name.as_str())
            .collect()
    }

    /// One `PASS`/`FAIL` line per property, then a summary line.
    pub fn to_text(&self) -> String {
        let mut s = format!("rope2d property suite\nseed {}\n", self.seed);
        for r in &self.results {
            let _ = writeln!(
                s,
                "{} {} trials={} max_error={:.3e} tolerance={:.0e}",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.trials,
                r.max_error,
                r.tolerance
            );
        }
        let passed = self.results.iter().filter(|r| r.passed).count();
        let _ = writeln!(s, "summary {passed}/{} passed", self.results.len());
        s
    }
}

fn trial_rng(seed: u64, property: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((property << 32) | trial as u64);
    rng
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn random_freqs(rng: &mut ChaCha8Rng, d_head: usize) -> FrequencySet {
    match rng.random_range(0..3) {
        0 => freqs_axial(d_head, 100.0).expect("d_head divisible by 4"),
        1 => freqs_1d(d_head, DEFAULT_BASE_1D).expect("even d_head"),
        _ => {
            let pairs: Vec<(f64, f64)> = (0..d_head / 2)
                .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            FrequencySet::mixed(d_head, &pairs).expect("even d_head")
        }
    }
}

fn random_grid(rng: &mut ChaCha8Rng, max: usize, class_token: bool) -> PositionGrid {
    make_grid(
        rng.random_range(1..=max),
        rng.random_range(1..=max),
        class_token,
    )
    .expect("positive extents")
}

fn collect(name: &str, tolerance: f64, errors: Vec<f64>) -> PropertyResult {
    let max_error = errors
        .iter()
        .fold(0.0f64, |m, &e| if e.is_nan() { f64::NAN } else { m.max(e) });
    PropertyResult {
        name: name.into(),
        passed: max_error <= tolerance,
        trials: errors.len(),
        max_error,
        tolerance,
    }
}

// Rotated dot product q̄_n·k̄_m against Re[Σ q_t conj(k_t) e^{iΔ_t}] with Δ
// taken straight from the frequencies and the position offset.
fn relative_position_identity(opts: &CheckOptions, exec: Execution) -> PropertyResult {
    let errors = map_indices(exec, opts.identity_trials, |t| {
        let mut rng = trial_rng(opts.seed, 1, t);
        let d_head = 4 * rng.random_range(1..=8);
        let freqs = random_freqs(&mut rng, d_head);
        let class_token = rng.random_bool(0.5);
        let (sx, sy) = (rng.random_range(-8..=8), rng.random_range(-8..=8));
        let grid = random_grid(&mut rng, 8, class_token).translated(sx, sy);
        let n_tok = grid.num_tokens();
        let table = RotationTable::build(&freqs, &grid);
        let key_table = if opts.inject_fault {
            table.conjugate()
        } else {
            table.clone()
        };
        let q = rand_mat(&mut rng, n_tok, d_head);
        let k = rand_mat(&mut rng, n_tok, d_head);
        let qr = apply_rope(&HeadTensor(q.clone()), &table)
            .expect("shapes")
            .0;
        let kr = apply_rope(&HeadTensor(k.clone()), &key_table)
            .expect("shapes")
            .0;
        let (n, m) = (rng.random_range(0..n_tok), rng.random_range(0..n_tok));
        let got = qr.row(n).dot(&kr.row(m));
        // Angle coordinates: the spatial index for 1D sets, the grid
        // position otherwise, the origin for the class token.
        let coord = |i: usize| match grid.position(i) {
            None => (0.0, 0.0),
            Some(_) if freqs.mode() == FreqMode::OneD => ((i - grid.spatial_offset()) as f64, 0.0),
            Some(p) => (p.x as f64, p.y as f64),
        };
        let ((xn, yn), (xm, ym)) = (coord(n), coord(m));
        let want: f64 = freqs
            .channel_frequencies()
            .iter()
            .enumerate()
            .map(|(c, &(tx, ty))| {
                let delta = tx * (xn - xm) + ty * (yn - ym);
                let qc = Complex64::new(q[[n, 2 * c]], q[[n, 2 * c + 1]]);
                let kc = Complex64::new(k[[m, 2 * c]], k[[m, 2 * c + 1]]);
                (qc * kc.conj() * Complex64::from_polar(1.0, delta)).re
            })
            .sum();
        (got - want).abs()
    });
    collect("relative_position_identity", 1e-12, errors)
}

fn unit_modulus(opts: &CheckOptions, exec: Execution) -> PropertyResult {
    let errors = map_indices(exec, 200, |t| {
        let mut rng = trial_rng(opts.seed, 2, t);
        let d_head = 4 * rng.random_range(1..=8);
        let freqs = random_freqs(&mut rng, d_head);
        let grid = random_grid(&mut rng, 8, true);
        let table = RotationTable::build(&freqs, &grid);
        table
            .entries()
            .iter()
            .fold(0.0f64, |m, z| m.max((z.norm() - 1.0).abs()))
    });
    collect("unit_modulus", 1e-12, errors)
}

fn norm_preservation(opts: &CheckOptions, exec: Execution) -> PropertyResult {
    let errors = map_indices(exec, 200, |t| {
        let mut rng = trial_rng(opts.seed, 3, t);
        let d_head = 4 * rng.random_range(1..=8);
        let freqs = random_freqs(&mut rng, d_head);
        let grid = random_grid(&mut rng, 8, true);
        let v = rand_mat(&mut rng, grid.num_tokens(), d_head);
        let r = apply_rope(&HeadTensor(v.clone()), &RotationTable::build(&freqs, &grid))
            .expect("shapes")
            .0;
        v.rows()
            .into_iter()
            .zip(r.rows())
            .map(|(a, b)| {
                (a.dot(&a).sqrt() - b.dot(&b).sqrt()).abs() / a.dot(&a).sqrt().max(1e-300)
            })
            .fold(0.0f64, f64::max)
    });
    collect("norm_preservation", 1e-12, errors)
}

fn translation_invariance(opts: &CheckOptions, exec: Execution) -> PropertyResult {
    let errors = map_indices(exec, 100, |t| {
        let mut rng = trial_rng(opts.seed, 4, t);
        let d_head = 4 * rng.random_range(1..=8);
        let freqs = if t % 2 == 0 {
            freqs_axial(d_head, 100.0).expect("divisible by 4")
        } else {
            let pairs: Vec<(f64, f64)> = (0..d_head / 2)
                .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            FrequencySet::mixed(d_head, &pairs).expect("even")
        };
        let grid = random_grid(&mut rng, 6, false);
        let (sx, sy) = (rng.random_range(-20..=20), rng.random_range(-20..=20));
        let shifted = grid.translated(sx, sy);
        let q = HeadTensor(rand_mat(&mut rng, grid.num_tokens(), d_head));
        let k = HeadTensor(rand_mat(&mut rng, grid.num_tokens(), d_head));
        let a = attend(&q, &k, &PeMode::Rope(RotationTable::build(&freqs, &grid))).expect("attend");
        let b = attend(
            &q,
            &k,
            &PeMode::Rope(RotationTable::build(&freqs, &shifted)),
        )
        .expect("attend");
        max_abs_diff(&a.probs, &b.probs)
    });
    collect("translation_invariance", 1e-10, errors)
}

fn mixed_degenerates_to_axial(opts: &CheckOptions, exec: Execution) -> PropertyResult {
    let errors = map_indices(exec, 16, |t| {
        let mut rng = trial_rng(opts.seed, 5, t);
        let d_head = 4 * (t + 1);
        let class_token = rng.random_bool(0.5);
        let grid = random_grid(&mut rng, 8, class_token);
        let mixed =
            RotationTable::build(&freqs_mixed_init(d_head, opts.seed).expect("even"), &grid);
        let axial = RotationTable::build(&freqs_axial(d_head, 100.0).expect("div 4"), &grid);
        // Bit-for-bit: any difference at all counts as a full error.
        if mixed.entries() == axial.entries() && mixed.angles() == axial.angles() {
            0.0
        } else {
            1.0
        }
    });
    collect("mixed_degenerates_to_axial", 0.0, errors)
}

fn phase_shift_absorption(opts: &CheckOptions, exec: Execution) -> PropertyResult {
    let errors = map_indices(exec, 100, |t| {
        let mut rng = trial_rng(opts.seed, 6, t);
        let d_head = 4 * rng.random_range(1..=4);
        let d = d_head * rng.random_range(1..=3);
        let freqs = random_freqs(&mut rng, d_head);
        let class_token = rng.random_bool(0.5);
        let grid = random_grid(&mut rng, 5, class_token);
        let x = rand_mat(&mut rng, grid.num_tokens(), d);
        let wq = rand_mat(&mut rng, d, d_head);
        let wk = rand_mat(&mut rng, d, d_head);
        let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        phase_shift_check(&x, &wq, &wk, phi, &RotationTable::build(&freqs, &grid))
            .map_or(f64::NAN, |r| r.max_abs_diff)
    });
    collect("phase_shift_absorption", 1e-10, errors)
}

fn class_token_identity(opts: &CheckOptions, exec: Execution) -> PropertyResult {
    let errors = map_indices(exec, 50, |t| {
        let mut rng = trial_rng(opts.seed, 7, t);
        let d_head = 4 * rng.random_range(1..=8);
        let freqs = random_freqs(&mut rng, d_head);
        let grid = random_grid(&mut rng, 8, true);
        let table = RotationTable::build(&freqs, &grid);
        table
            .entries()
            .row(0)
            .iter()
            .fold(0.0f64, |m, z| m.max((z - Complex64::new(1.0, 0.0)).norm()))
    });
    collect("class_token_identity", 0.0, errors)
}

fn rpb_translation_invariance(opts: &CheckOptions, exec: Execution) -> PropertyResult {
    let errors = map_indices(exec, 50, |t| {
        let mut rng = trial_rng(opts.seed, 8, t);
        let class_token = rng.random_bool(0.5);
        let grid = random_grid(&mut rng, 6, class_token);
        let table = RpbTable::random(&grid, 1.0, &mut rng);
        let (sx, sy) = (rng.random_range(-9..=9), rng.random_range(-9..=9));
        let shifted = grid.translated(sx, sy);
        let a = expand_rpb(&table, &grid, RpbExtension::Strict);
        let b = expand_rpb(&table, &shifted, RpbExtension::Strict);
        match (a, b) {
            (Ok(a), Ok(b)) => max_abs_diff(&a, &b),
            _ => f64::NAN,
        }
    });
    collect("rpb_translation_invariance", 0.0, errors)
}

fn softmax_row_stochastic(opts: &CheckOptions, exec: Execution) -> PropertyResult {
    let errors = map_indices(exec, 100, |t| {
        let mut rng = trial_rng(opts.seed, 9, t);
        let n = rng.random_range(1..=50);
        let logits = rand_mat(&mut rng, n, n) * 30.0;
        let p = softmax_rows(&logits);
        p.rows()
            .into_iter()
            .map(|r| {
                if r.iter().any(|&v| v < 0.0) {
                    f64::INFINITY
                } else {
                    (r.sum() - 1.0).abs()
                }
            })
            .fold(0.0f64, f64::max)
    });
    collect("softmax_row_stochastic", 1e-12, errors)
}

fn fourier_full_identity(opts: &CheckOptions, exec: Execution) -> PropertyResult {
    let errors = map_indices(exec, 20, |t| {
        let mut rng = trial_rng(opts.seed, 10, t);
        let size = 8 << rng.random_range(0..3);
        let img = rand_mat(&mut rng, size, size);
        reconstruct_with_bins(&img, &all_bins(size)).map_or(f64::NAN, |r| r.error)
    });
    collect("fourier_full_identity", 1e-10, errors)
}

fn entropy_bounds(opts: &CheckOptions, exec: Execution) -> PropertyResult {
    let errors = map_indices(exec, 100, |t| {
        let mut rng = trial_rng(opts.seed, 11, t);
        let n = rng.random_range(1..=40);
        // Sparse rows exercise the 0·ln 0 convention.
        let raw = Array2::from_shape_simple_fn((n, n), || {
            if rng.random_bool(0.3) {
                0.0
            } else {
                rng.random_range(0.0..1.0)
            }
        });
        let mut probs = raw;
        for mut row in probs.rows_mut() {
            let s = row.sum();
            if s > 0.0 {
                row.mapv_inplace(|v| v / s);
            } else {
                row.fill(1.0 / n as f64);
            }
        }
        let r = AttentionResult {
            head: 0,
            d_head: 0,
            mode: "none".into(),
            logits: probs.clone(),
            probs,
        };
        match attention_entropy(&r) {
            Ok(e) => (-e).max(e - (n as f64).ln()).max(0.0),
            Err(_) => f64::NAN,
        }
    });
    collect("entropy_bounds", 1e-12, errors)
}

fn permutation_consistency(opts: &CheckOptions, exec: Execution) -> PropertyResult {
    let errors = map_indices(exec, 10, |t| -> f64 {
        let mut rng = trial_rng(opts.seed, 12, t);
        let recipe = [AttentionRecipe::RopeAxial, AttentionRecipe::RopeMixed][t % 2];
        let mut cfg = ModelConfig::toy(3, 3, 8, 2, 2, recipe);
        cfg.seed = opts.seed.wrapping_add(t as u64);
        let mut run = || -> Result<f64> {
            let mut params = Params::init(&cfg)?;
            for f in params.layers.iter_mut().flat_map(|l| l.freqs.iter_mut()) {
                if f.is_learnable() {
                    for v in f.values_mut()? {
                        *v += rng.random_range(-0.3..0.3);
                    }
                }
            }
            let grid = cfg.grid()?;
            let n = grid.num_tokens();
            let x = rand_mat(&mut rng, n, cfg.d);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let xp = Array2::from_shape_fn((n, cfg.d), |(i, j)| x[[perm[i], j]]);
            let a = forward_on_grid(&cfg, &params, &x, &grid, Execution::Sequential)?.output;
            let b = forward_on_grid(
                &cfg,
                &params,
                &xp,
                &grid.permuted(&perm)?,
                Execution::Sequential,
            )?
            .output;
            let ap = Array2::from_shape_fn(a.dim(), |(i, j)| a[[perm[i], j]]);
            Ok(max_abs_diff(&ap, &b))
        };
        run().unwrap_or(f64::NAN)
    });
    collect("forward_permutation_consistency", 1e-12, errors)
}

fn gradient_agreement(opts: &CheckOptions, exec: Execution) -> PropertyResult {
    let recipes = [
        AttentionRecipe::RpbRopeMixed,
        AttentionRecipe::RopeAxialLearnable,
    ];
    let errors: Vec<f64> = recipes
        .iter()
        .enumerate()
        .flat_map(|(i, &recipe)| {
            let mut cfg = ModelConfig::toy(3, 3, 8, 2, 1, recipe);
            cfg.ape.enabled = true;
            cfg.class_token = i == 0;
            cfg.seed = opts.seed;
            let mut rng = trial_rng(opts.seed, 13, i);
            let x = rand_mat(&mut rng, cfg.grid().expect("grid").num_tokens(), cfg.d);
            match Params::init(&cfg)
                .and_then(|p| grad_check(&cfg, &p, &x, &ParamClass::ALL, 1e-6, exec))
            {
                Ok(reports) => reports.into_iter().map(|r| r.rel_error).collect(),
                Err(_) => vec![f64::NAN],
            }
        })
        .collect();
    collect("gradient_finite_difference", 1e-5, errors)
}

/// Runs every property in a fixed order.
pub fn run_checks(opts: &CheckOptions, exec: Execution) -> CheckReport {
    let props: [fn(&CheckOptions, Execution) -> PropertyResult; 13] = [
        relative_position_identity,
        unit_modulus,
        norm_preservation,
        translation_invariance,
        mixed_degenerates_to_axial,
        phase_shift_absorption,
        class_token_identity,
        rpb_translation_invariance,
        softmax_row_stochastic,
        fourier_full_identity,
        entropy_bounds,
        permutation_consistency,
        gradient_agreement,
    ];
    CheckReport {
        seed: opts.seed,
        results: props.iter().map(|p| p(opts, exec)).collect(),
    }
}
