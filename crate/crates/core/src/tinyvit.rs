//! A small pre-norm ViT encoder built from the position embeddings and the
//! attention engine, with a hand-written backward pass.
//!
//! Block: `h = x + MHA(LN(x))`, `y = h + MLP(LN(h))`, MLP = linear → GELU
//! (tanh form) → linear. APE, when enabled, is added once before the first
//! block. Each layer owns one frequency set and/or one bias table per head.
//!
//! The scalar used by [`grad_check`] is the sum of squared outputs.

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    head_backward, mha_forward, HeadProjection, MhaForward, MhaWeights, PeMode, RpbBias,
};
use crate::error::{invalid, Result, RopeError};
use crate::par::{map_indices, Execution};
use crate::posembed::{
    sinusoidal_ape, ApeKind, ApeTable, PositionGrid, RpbExtension, RpbPlacement, RpbTable,
};
use crate::rope::{
    angles_to_freq_grad, freqs_axial, freqs_axial_learnable, freqs_mixed_init, FrequencySet,
    RotationTable,
};

const LN_EPS: f64 = 1e-5;

/// Position-embedding recipe of one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionRecipe {
    None,
    Rpb,
    RopeAxial,
    /// Axial layout whose frequencies are trained; cross-axis terms stay 0.
    RopeAxialLearnable,
    RopeMixed,
    #[serde(rename = "rpb+rope_axial")]
    RpbRopeAxial,
    #[serde(rename = "rpb+rope_mixed")]
    RpbRopeMixed,
}

impl AttentionRecipe {
    pub fn uses_rope(self) -> bool {
        !matches!(self, AttentionRecipe::None | AttentionRecipe::Rpb)
    }

    pub fn uses_rpb(self) -> bool {
        matches!(
            self,
            AttentionRecipe::Rpb | AttentionRecipe::RpbRopeAxial | AttentionRecipe::RpbRopeMixed
        )
    }

    /// Whether the rotary frequencies are parameters of the model.
    pub fn learnable_freqs(self) -> bool {
        matches!(
            self,
            AttentionRecipe::RopeMixed
                | AttentionRecipe::RpbRopeMixed
                | AttentionRecipe::RopeAxialLearnable
        )
    }

    pub fn is_mixed(self) -> bool {
        matches!(
            self,
            AttentionRecipe::RopeMixed | AttentionRecipe::RpbRopeMixed
        )
    }

    fn requires_quarter_divisible(self) -> bool {
        matches!(
            self,
            AttentionRecipe::RopeAxial
                | AttentionRecipe::RpbRopeAxial
                | AttentionRecipe::RopeAxialLearnable
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApePolicy {
    pub enabled: bool,
    pub kind: ApeKind,
}

impl Default for ApePolicy {
    fn default() -> Self {
        Self {
            enabled: false,
            kind: ApeKind::Learnable,
        }
    }
}

/// Patch-embedding and classifier shape. The toy engine takes tokens
/// directly; these only feed cost accounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StemSpec {
    pub patch_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub qkv_bias: bool,
}

impl Default for StemSpec {
    fn default() -> Self {
        Self {
            patch_size: 16,
            in_channels: 3,
            num_classes: 1000,
            qkv_bias: true,
        }
    }
}

fn default_mlp_ratio() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid_width: usize,
    pub grid_height: usize,
    #[serde(default)]
    pub class_token: bool,
    pub d: usize,
    pub head_count: usize,
    pub layer_count: usize,
    #[serde(default)]
    pub ape: ApePolicy,
    /// Recipe used by every layer unless `layer_attention` overrides it.
    pub attention: AttentionRecipe,
    #[serde(default)]
    pub layer_attention: Option<Vec<AttentionRecipe>>,
    #[serde(default)]
    pub rpb_placement: RpbPlacement,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stem: StemSpec,
}

impl ModelConfig {
    /// Minimal single-recipe config; everything else at defaults.
    pub fn toy(
        grid_width: usize,
        grid_height: usize,
        d: usize,
        head_count: usize,
        layer_count: usize,
        attention: AttentionRecipe,
    ) -> Self {
        Self {
            grid_width,
            grid_height,
            class_token: false,
            d,
            head_count,
            layer_count,
            ape: ApePolicy::default(),
            attention,
            layer_attention: None,
            rpb_placement: RpbPlacement::PreSoftmax,
            mlp_ratio: 4.0,
            seed: 0,
            stem: StemSpec::default(),
        }
    }

    /// ViT-B/16 at 224px with mixed RoPE on every layer.
    pub fn vit_b() -> Self {
        let mut cfg = Self::toy(14, 14, 768, 12, 12, AttentionRecipe::RopeMixed);
        cfg.class_token = true;
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn d_head(&self) -> usize {
        self.d / self.head_count.max(1)
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.d as f64 * self.mlp_ratio).round() as usize
    }

    pub fn grid(&self) -> Result<PositionGrid> {
        PositionGrid::new(self.grid_width, self.grid_height, self.class_token)
    }

    pub fn recipe(&self, layer: usize) -> AttentionRecipe {
        self.layer_attention
            .as_ref()
            .and_then(|v| v.get(layer).copied())
            .unwrap_or(self.attention)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_count == 0 || self.d == 0 || !self.d.is_multiple_of(self.head_count) {
            return invalid(format!(
                "model width {} must be a positive multiple of head count {}",
                self.d, self.head_count
            ));
        }
        if let Some(v) = &self.layer_attention {
            if v.len() != self.layer_count {
                return invalid("layer_attention length must equal layer_count");
            }
        }
        let dh = self.d_head();
        for l in 0..self.layer_count {
            let r = self.recipe(l);
            if r.uses_rope() && !dh.is_multiple_of(2) {
                return invalid(format!("RoPE needs an even head width, got {dh}"));
            }
            if r.requires_quarter_divisible() && !dh.is_multiple_of(4) {
                return invalid(format!(
                    "axial RoPE needs head width divisible by 4, got {dh}"
                ));
            }
        }
        if self.ape.enabled && self.ape.kind == ApeKind::Sinusoidal && !self.d.is_multiple_of(4) {
            return invalid("sinusoidal APE needs d divisible by 4");
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 {
            return invalid("mlp_ratio must be positive");
        }
        self.grid()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            gamma: Array1::zeros(self.gamma.len()),
            beta: Array1::zeros(self.beta.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1: LayerNorm,
    pub attn: MhaWeights,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    /// One per head when the layer rotates, otherwise empty.
    pub freqs: Vec<FrequencySet>,
    /// One per head when the layer uses a bias table, otherwise empty.
    pub rpb: Vec<RpbTable>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub ape: Option<ApeTable>,
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    Frequencies,
    Projections,
    Ape,
    Rpb,
    LayerNorm,
    Mlp,
}

impl ParamClass {
    pub const ALL: [ParamClass; 6] = [
        ParamClass::Frequencies,
        ParamClass::Projections,
        ParamClass::Ape,
        ParamClass::Rpb,
        ParamClass::LayerNorm,
        ParamClass::Mlp,
    ];
}

/// A named, mutable view of one learnable tensor.
pub struct ParamSlot<'a> {
    pub name: String,
    pub class: ParamClass,
    pub data: &'a mut [f64],
}

fn slice1(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn slice2(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

impl Params {
    /// Deterministic initialization from `cfg.seed`: Gaussian weights,
    /// unit LayerNorm gains, zero biases, rotary frequencies at their
    /// (axial) defaults, Gaussian bias tables and learnable APE.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let grid = cfg.grid()?;
        let (d, dh, hidden) = (cfg.d, cfg.d_head(), cfg.mlp_hidden());
        fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64) -> Array2<f64> {
            let n = Normal::new(0.0, std).expect("finite std");
            Array2::from_shape_simple_fn((r, c), || n.sample(rng))
        }
        let w_std = 1.0 / (d as f64).sqrt();
        let ape = match (cfg.ape.enabled, cfg.ape.kind) {
            (false, _) => None,
            (true, ApeKind::Sinusoidal) => Some(sinusoidal_ape(&grid, d)?),
            (true, ApeKind::Learnable) => Some(ApeTable {
                kind: ApeKind::Learnable,
                values: gauss(&mut rng, grid.num_tokens(), d, 0.5),
            }),
        };
        let mut layers = Vec::with_capacity(cfg.layer_count);
        for l in 0..cfg.layer_count {
            let recipe = cfg.recipe(l);
            let heads = (0..cfg.head_count)
                .map(|_| HeadProjection {
                    wq: gauss(&mut rng, d, dh, w_std),
                    wk: gauss(&mut rng, d, dh, w_std),
                    wv: gauss(&mut rng, d, dh, w_std),
                })
                .collect();
            let attn = MhaWeights {
                heads,
                wo: gauss(&mut rng, d, d, w_std),
                bo: Array1::zeros(d),
            };
            let mlp = Mlp {
                w1: gauss(&mut rng, d, hidden, w_std),
                b1: Array1::zeros(hidden),
                w2: gauss(&mut rng, hidden, d, 1.0 / (hidden as f64).sqrt()),
                b2: Array1::zeros(d),
            };
            let freqs = if recipe.uses_rope() {
                (0..cfg.head_count)
                    .map(|_| match recipe {
                        AttentionRecipe::RopeAxial | AttentionRecipe::RpbRopeAxial => {
                            freqs_axial(dh, crate::rope::DEFAULT_BASE_AXIAL)
                        }
                        AttentionRecipe::RopeAxialLearnable => freqs_axial_learnable(dh, cfg.seed),
                        _ => freqs_mixed_init(dh, cfg.seed),
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let rpb = if recipe.uses_rpb() {
                let normal = Normal::new(0.0, 0.5).expect("finite std");
                (0..cfg.head_count)
                    .map(|_| {
                        let mut t = RpbTable::for_grid(&grid);
                        t.biases_mut().mapv_inplace(|_| normal.sample(&mut rng));
                        t.class_bias = normal.sample(&mut rng);
                        t
                    })
                    .collect()
            } else {
                Vec::new()
            };
            layers.push(LayerParams {
                ln1: LayerNorm::new(d),
                attn,
                ln2: LayerNorm::new(d),
                mlp,
                freqs,
                rpb,
            });
        }
        Ok(Self { ape, layers })
    }

    /// Same structure, every value zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.dim());
        let z1 = |a: &Array1<f64>| Array1::zeros(a.len());
        Self {
            ape: self.ape.as_ref().map(|a| ApeTable {
                kind: a.kind,
                values: z2(&a.values),
            }),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1: l.ln1.zeros_like(),
                    attn: MhaWeights {
                        heads: l
                            .attn
                            .heads
                            .iter()
                            .map(|h| HeadProjection {
                                wq: z2(&h.wq),
                                wk: z2(&h.wk),
                                wv: z2(&h.wv),
                            })
                            .collect(),
                        wo: z2(&l.attn.wo),
                        bo: z1(&l.attn.bo),
                    },
                    ln2: l.ln2.zeros_like(),
                    mlp: Mlp {
                        w1: z2(&l.mlp.w1),
                        b1: z1(&l.mlp.b1),
                        w2: z2(&l.mlp.w2),
                        b2: z1(&l.mlp.b2),
                    },
                    freqs: l
                        .freqs
                        .iter()
                        .map(|f| {
                            let mut g = f.clone();
                            g.raw_values_mut().fill(0.0);
                            g
                        })
                        .collect(),
                    rpb: l
                        .rpb
                        .iter()
                        .map(|t| {
                            let mut g = RpbTable::zeros(t.width_extent(), t.height_extent());
                            g.class_bias = 0.0;
                            g
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Every learnable tensor in a fixed order. Fixed frequency sets and
    /// sinusoidal APE are not parameters and do not appear.
    pub fn slots_mut(&mut self) -> Vec<ParamSlot<'_>> {
        let mut out = Vec::new();
        let mut push = |name: String, class, data| out.push(ParamSlot { name, class, data });
        if let Some(ape) = self.ape.as_mut() {
            if ape.kind == ApeKind::Learnable {
                push("ape".into(), ParamClass::Ape, slice2(&mut ape.values));
            }
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            push(
                format!("layer{l}.ln1.gamma"),
                ParamClass::LayerNorm,
                slice1(&mut layer.ln1.gamma),
            );
            push(
                format!("layer{l}.ln1.beta"),
                ParamClass::LayerNorm,
                slice1(&mut layer.ln1.beta),
            );
            for (h, p) in layer.attn.heads.iter_mut().enumerate() {
                push(
                    format!("layer{l}.head{h}.wq"),
                    ParamClass::Projections,
                    slice2(&mut p.wq),
                );
                push(
                    format!("layer{l}.head{h}.wk"),
                    ParamClass::Projections,
                    slice2(&mut p.wk),
                );
                push(
                    format!("layer{l}.head{h}.wv"),
                    ParamClass::Projections,
                    slice2(&mut p.wv),
                );
            }
            push(
                format!("layer{l}.wo"),
                ParamClass::Projections,
                slice2(&mut layer.attn.wo),
            );
            push(
                format!("layer{l}.bo"),
                ParamClass::Projections,
                slice1(&mut layer.attn.bo),
            );
            for (h, f) in layer.freqs.iter_mut().enumerate() {
                if f.is_learnable() {
                    push(
                        format!("layer{l}.head{h}.freqs"),
                        ParamClass::Frequencies,
                        f.raw_values_mut(),
                    );
                }
            }
            for (h, t) in layer.rpb.iter_mut().enumerate() {
                let (biases, class_bias) = t.parts_mut();
                push(
                    format!("layer{l}.head{h}.rpb_class"),
                    ParamClass::Rpb,
                    std::slice::from_mut(class_bias),
                );
                push(
                    format!("layer{l}.head{h}.rpb"),
                    ParamClass::Rpb,
                    slice2(biases),
                );
            }
            push(
                format!("layer{l}.ln2.gamma"),
                ParamClass::LayerNorm,
                slice1(&mut layer.ln2.gamma),
            );
            push(
                format!("layer{l}.ln2.beta"),
                ParamClass::LayerNorm,
                slice1(&mut layer.ln2.beta),
            );
            push(
                format!("layer{l}.mlp.w1"),
                ParamClass::Mlp,
                slice2(&mut layer.mlp.w1),
            );
            push(
                format!("layer{l}.mlp.b1"),
                ParamClass::Mlp,
                slice1(&mut layer.mlp.b1),
            );
            push(
                format!("layer{l}.mlp.w2"),
                ParamClass::Mlp,
                slice2(&mut layer.mlp.w2),
            );
            push(
                format!("layer{l}.mlp.b2"),
                ParamClass::Mlp,
                slice1(&mut layer.mlp.b2),
            );
        }
        out
    }

    /// Flat copy of every slot, in slot order.
    pub fn flat_slots(&self) -> Vec<(String, ParamClass, Vec<f64>)> {
        let mut copy = self.clone();
        copy.slots_mut()
            .into_iter()
            .map(|s| (s.name, s.class, s.data.to_vec()))
            .collect()
    }
}

/// Uniform `[-1, 1)` tokens shaped for the config's grid.
pub fn random_tokens(cfg: &ModelConfig, seed: u64) -> Result<Array2<f64>> {
    let n = cfg.grid()?.num_tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Array2::from_shape_simple_fn((n, cfg.d), || {
        rng.random_range(-1.0..1.0)
    }))
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, ln: &LayerNorm) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * inv_std.view().insert_axis(Axis(1));
    let y = &xhat * &ln.gamma + &ln.beta;
    (y, LnCache { xhat, inv_std })
}

// Returns dx; accumulates dgamma/dbeta into `grad`.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    ln: &LayerNorm,
    grad: &mut LayerNorm,
) -> Array2<f64> {
    grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.beta += &dy.sum_axis(Axis(0));
    let dxhat = dy * &ln.gamma;
    let d = dy.ncols() as f64;
    let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
    let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
    let inner = &dxhat
        - &mean_dxhat.insert_axis(Axis(1))
        - &(&cache.xhat * &mean_dxhat_xhat.insert_axis(Axis(1)));
    inner * cache.inv_std.view().insert_axis(Axis(1))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + GELU_A * z * z * z)).tanh())
}

fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + GELU_A * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * z * z)
}

struct LayerCache {
    ln1: LnCache,
    u: Array2<f64>,
    mha: MhaForward,
    modes: Vec<PeMode>,
    ln2: LnCache,
    u2: Array2<f64>,
    z: Array2<f64>,
    a: Array2<f64>,
}

/// Output of [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub output: Array2<f64>,
    /// `attention[layer][head]`.
    pub attention: Vec<Vec<crate::attention::AttentionResult>>,
}

fn layer_modes(
    cfg: &ModelConfig,
    layer: &LayerParams,
    recipe: AttentionRecipe,
    grid: &PositionGrid,
) -> Vec<PeMode> {
    (0..cfg.head_count)
        .map(|h| {
            let rotation = recipe
                .uses_rope()
                .then(|| RotationTable::build(&layer.freqs[h], grid));
            let rpb = recipe.uses_rpb().then(|| RpbBias {
                table: layer.rpb[h].clone(),
                grid: grid.clone(),
                placement: cfg.rpb_placement,
                extension: RpbExtension::ZeroPad,
            });
            match (rotation, rpb) {
                (None, None) => PeMode::None,
                (Some(r), None) => PeMode::Rope(r),
                (None, Some(b)) => PeMode::Rpb(b),
                (Some(rotation), Some(rpb)) => PeMode::RopePlusRpb { rotation, rpb },
            }
        })
        .collect()
}

fn check_shapes(
    cfg: &ModelConfig,
    params: &Params,
    tokens: &Array2<f64>,
    grid: &PositionGrid,
) -> Result<()> {
    cfg.validate()?;
    if tokens.dim() != (grid.num_tokens(), cfg.d) {
        return invalid(format!(
            "tokens {:?}, expected ({}, {})",
            tokens.dim(),
            grid.num_tokens(),
            cfg.d
        ));
    }
    if params.layers.len() != cfg.layer_count {
        return invalid("parameter layer count does not match config");
    }
    if cfg.ape.enabled != params.ape.is_some() {
        return invalid("APE parameters do not match the APE policy");
    }
    if let Some(ape) = &params.ape {
        if ape.values.dim() != tokens.dim() {
            return invalid("APE table does not match the token grid; resize it first");
        }
    }
    for (l, layer) in params.layers.iter().enumerate() {
        let r = cfg.recipe(l);
        if r.uses_rope() && layer.freqs.len() != cfg.head_count {
            return invalid(format!("layer {l} needs one frequency set per head"));
        }
        if r.uses_rpb() && layer.rpb.len() != cfg.head_count {
            return invalid(format!("layer {l} needs one bias table per head"));
        }
        if layer.freqs.iter().any(|f| f.d_head() != cfg.d_head()) {
            return invalid(format!(
                "layer {l} frequency width does not match head width"
            ));
        }
    }
    Ok(())
}

fn forward_cached(
    cfg: &ModelConfig,
    params: &Params,
    tokens: &Array2<f64>,
    grid: &PositionGrid,
    exec: Execution,
) -> Result<(Array2<f64>, Vec<LayerCache>)> {
    check_shapes(cfg, params, tokens, grid)?;
    let mut x = match &params.ape {
        Some(ape) => tokens + &ape.values,
        None => tokens.clone(),
    };
    let mut caches = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let modes = layer_modes(cfg, layer, cfg.recipe(l), grid);
        let (u, ln1) = layer_norm(&x, &layer.ln1);
        let mha = mha_forward(&u, &layer.attn, &modes, exec)?;
        let h = &x + &mha.output;
        let (u2, ln2) = layer_norm(&h, &layer.ln2);
        let z = u2.dot(&layer.mlp.w1) + &layer.mlp.b1;
        let a = z.mapv(gelu);
        let m = a.dot(&layer.mlp.w2) + &layer.mlp.b2;
        x = &h + &m;
        caches.push(LayerCache {
            ln1,
            u,
            mha,
            modes,
            ln2,
            u2,
            z,
            a,
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(RopeError::Numeric(
            "forward produced non-finite values".into(),
        ));
    }
    Ok((x, caches))
}

/// Runs the encoder on the config's own grid.
pub fn forward(
    cfg: &ModelConfig,
    params: &Params,
    tokens: &Array2<f64>,
    exec: Execution,
) -> Result<ForwardOutput> {
    forward_on_grid(cfg, params, tokens, &cfg.grid()?, exec)
}

/// Runs the encoder with explicit token positions, e.g. a permuted or
/// larger grid. Rotation tables are rebuilt for `grid` from the stored
/// frequencies; bias tables read 0 beyond their extent.
pub fn forward_on_grid(
    cfg: &ModelConfig,
    params: &Params,
    tokens: &Array2<f64>,
    grid: &PositionGrid,
    exec: Execution,
) -> Result<ForwardOutput> {
    let (output, caches) = forward_cached(cfg, params, tokens, grid, exec)?;
    Ok(ForwardOutput {
        output,
        attention: caches.into_iter().map(|c| c.mha.results).collect(),
    })
}

/// Sum of squared outputs.
pub fn loss(
    cfg: &ModelConfig,
    params: &Params,
    tokens: &Array2<f64>,
    exec: Execution,
) -> Result<f64> {
    let out = forward(cfg, params, tokens, exec)?.output;
    let l = out.mapv(|v| v * v).sum();
    if l.is_finite() {
        Ok(l)
    } else {
        Err(RopeError::Numeric("loss is not finite".into()))
    }
}

fn rpb_table_grad(dbias: &Array2<f64>, grid: &PositionGrid, grad: &mut RpbTable) {
    let n = grid.num_tokens();
    for i in 0..n {
        for j in 0..n {
            match (grid.position(i), grid.position(j)) {
                (Some(p), Some(q)) => grad.accumulate(p.x - q.x, p.y - q.y, dbias[[i, j]]),
                _ => grad.class_bias += dbias[[i, j]],
            }
        }
    }
}

/// Loss and analytic gradient of every parameter.
pub fn gradient(
    cfg: &ModelConfig,
    params: &Params,
    tokens: &Array2<f64>,
    exec: Execution,
) -> Result<(f64, Params)> {
    let grid = cfg.grid()?;
    let (out, caches) = forward_cached(cfg, params, tokens, &grid, exec)?;
    let loss = out.mapv(|v| v * v).sum();
    let mut grads = params.zeros_like();
    let mut dx = out * 2.0;
    let dh = cfg.d_head();
    for (l, cache) in caches.iter().enumerate().rev() {
        let layer = &params.layers[l];
        let g = &mut grads.layers[l];
        // MLP branch.
        let dm = &dx;
        g.mlp.w2 += &cache.a.t().dot(dm);
        g.mlp.b2 += &dm.sum_axis(Axis(0));
        let da = dm.dot(&layer.mlp.w2.t());
        let dz = da * &cache.z.mapv(gelu_grad);
        g.mlp.w1 += &cache.u2.t().dot(&dz);
        g.mlp.b1 += &dz.sum_axis(Axis(0));
        let du2 = dz.dot(&layer.mlp.w1.t());
        let mut dhid = dx.clone();
        dhid += &layer_norm_backward(&du2, &cache.ln2, &layer.ln2, &mut g.ln2);

        // Attention branch.
        let d_attn = &dhid;
        g.attn.wo += &cache.mha.concat.t().dot(d_attn);
        g.attn.bo += &d_attn.sum_axis(Axis(0));
        let dconcat = d_attn.dot(&layer.attn.wo.t());
        let per_head = map_indices(exec, cfg.head_count, |h| {
            let d_out = dconcat.slice(s![.., h * dh..(h + 1) * dh]);
            let probs = &cache.mha.results[h].probs;
            let dprobs = d_out.dot(&cache.mha.v[h].t());
            let dv = probs.t().dot(&d_out);
            let hg = head_backward(&cache.mha.caches[h], &cache.modes[h], &dprobs);
            (hg, dv)
        });
        let mut du = Array2::zeros(cache.u.dim());
        for (h, (hg, dv)) in per_head.into_iter().enumerate() {
            let p = &layer.attn.heads[h];
            let gp = &mut g.attn.heads[h];
            gp.wq += &cache.u.t().dot(&hg.dq);
            gp.wk += &cache.u.t().dot(&hg.dk);
            gp.wv += &cache.u.t().dot(&dv);
            du += &hg.dq.dot(&p.wq.t());
            du += &hg.dk.dot(&p.wk.t());
            du += &dv.dot(&p.wv.t());
            if let Some(dangle) = &hg.dangle {
                let fg = angles_to_freq_grad(&layer.freqs[h], &grid, dangle);
                for (a, b) in g.freqs[h].raw_values_mut().iter_mut().zip(fg) {
                    *a += b;
                }
            }
            if let Some(db) = &hg.dbias {
                rpb_table_grad(db, &grid, &mut g.rpb[h]);
            }
        }
        dx = dhid + layer_norm_backward(&du, &cache.ln1, &layer.ln1, &mut g.ln1);
    }
    if let Some(ape) = grads.ape.as_mut() {
        if ape.kind == ApeKind::Learnable {
            ape.values += &dx;
        }
    }
    Ok((loss, grads))
}

/// Analytic vs central-difference gradient of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub name: String,
    pub class: ParamClass,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `‖a − f‖ / max(‖a‖, ‖f‖, 1e-12)`.
    pub rel_error: f64,
    pub step: f64,
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = norm(analytic.iter().zip(numeric).map(|(a, f)| a - f));
    let scale = norm(analytic.iter().copied())
        .max(norm(numeric.iter().copied()))
        .max(1e-12);
    diff / scale
}

/// Compares [`gradient`] with central differences for every parameter
/// tensor whose class is in `classes`. Each perturbed evaluation works on
/// its own copy of the parameters, so the differences fan out across
/// threads.
pub fn grad_check(
    cfg: &ModelConfig,
    params: &Params,
    tokens: &Array2<f64>,
    classes: &[ParamClass],
    step: f64,
    exec: Execution,
) -> Result<Vec<GradReport>> {
    if !(step > 0.0 && step.is_finite()) {
        return invalid(format!(
            "finite-difference step must be positive, got {step}"
        ));
    }
    let (_, grads) = gradient(cfg, params, tokens, exec)?;
    let analytic = grads.flat_slots();
    let selected: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .filter(|(_, (_, class, _))| classes.contains(class))
        .flat_map(|(s, (_, _, v))| (0..v.len()).map(move |e| (s, e)))
        .collect();
    // Inner forward passes run sequentially; the fan-out is across entries.
    let numeric = map_indices(exec, selected.len(), |job| -> Result<f64> {
        let (s, e) = selected[job];
        let eval = |delta: f64| {
            let mut p = params.clone();
            p.slots_mut()[s].data[e] += delta;
            loss(cfg, &p, tokens, Execution::Sequential)
        };
        Ok((eval(step)? - eval(-step)?) / (2.0 * step))
    });
    let mut by_slot: Vec<Vec<f64>> = analytic.iter().map(|_| Vec::new()).collect();
    for ((s, _), v) in selected.iter().zip(numeric) {
        by_slot[*s].push(v?);
    }
    Ok(analytic
        .into_iter()
        .zip(by_slot)
        .filter(|((_, class, _), _)| classes.contains(class))
        .map(|((name, class, a), f)| GradReport {
            rel_error: relative_error(&a, &f),
            name,
            class,
            analytic: a,
            numeric: f,
            step,
        })
        .collect())
}

/// One row of a frequency-fitting run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    /// Student frequencies in flat `FrequencySet` order.
    pub freqs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    /// Step at which the loss stopped being finite, if it did.
    pub diverged_at: Option<usize>,
}

impl TrainTrace {
    pub fn final_row(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn last_finite_loss(&self) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .map(|r| r.loss)
            .find(|l| l.is_finite())
    }

    /// `step,loss,f0,..` with frequencies in flat order.
    pub fn to_csv(&self) -> Result<String> {
        let width = self.rows.first().map_or(0, |r| r.freqs.len());
        let mut header = vec!["step".to_string(), "loss".into()];
        header.extend((0..width).map(|i| format!("f{i}")));
        let rows = self.rows.iter().map(|r| {
            let mut rec = vec![r.step.to_string(), crate::io::fmt_f64(r.loss)];
            rec.extend(r.freqs.iter().map(|&v| crate::io::fmt_f64(v)));
            rec
        });
        crate::io::csv_string(header, rows)
    }
}

/// Settings of the synthetic frequency-recovery task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Number of random query/key draws the loss averages over.
    pub batch: usize,
    /// Standard deviation of the random query/key entries.
    pub input_scale: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 1e-2,
            seed: 0,
            batch: 8,
            input_scale: 1.0,
        }
    }
}

/// Recovers a teacher's mixed frequencies by gradient descent.
///
/// A fixed batch of random queries and keys (drawn from `opts.seed`) is
/// attended once with the teacher's rotation table. The student starts at
/// the axial layout and minimizes the batch mean of the squared Frobenius
/// distance between its attention matrices and the teacher's, with plain
/// gradient descent. The trace holds one row per step, before that step's
/// update; `steps = 0` yields only the initial row.
pub fn fit_frequencies(
    teacher: &FrequencySet,
    cfg: &ModelConfig,
    opts: &FitOptions,
    exec: Execution,
) -> Result<TrainTrace> {
    if teacher.mode() != crate::rope::FreqMode::Mixed2D {
        return invalid("teacher must be a mixed frequency set");
    }
    if teacher.d_head() != cfg.d_head() {
        return invalid(format!(
            "teacher head width {} does not match config head width {}",
            teacher.d_head(),
            cfg.d_head()
        ));
    }
    if opts.batch == 0
        || opts.lr.is_nan()
        || opts.lr < 0.0
        || opts.input_scale.is_nan()
        || opts.input_scale <= 0.0
    {
        return invalid("batch must be positive, lr non-negative, input_scale positive");
    }
    let grid = cfg.grid()?;
    let n = grid.num_tokens();
    let dh = teacher.d_head();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let normal = Normal::new(0.0, opts.input_scale).expect("finite scale");
    let samples: Vec<(Array2<f64>, Array2<f64>)> = (0..opts.batch)
        .map(|_| {
            let q = Array2::from_shape_simple_fn((n, dh), || normal.sample(&mut rng));
            let k = Array2::from_shape_simple_fn((n, dh), || normal.sample(&mut rng));
            (q, k)
        })
        .collect();
    let teacher_mode = PeMode::Rope(RotationTable::build(teacher, &grid));
    let targets = samples
        .iter()
        .map(|(q, k)| crate::attention::head_forward(q, k, &teacher_mode).map(|(r, _)| r.probs))
        .collect::<Result<Vec<_>>>()?;

    let mut student = freqs_mixed_init(dh, opts.seed)?;
    let mut trace = TrainTrace {
        rows: Vec::with_capacity(opts.steps + 1),
        diverged_at: None,
    };
    let inv_batch = 1.0 / opts.batch as f64;
    for step in 0..=opts.steps {
        let mode = PeMode::Rope(RotationTable::build(&student, &grid));
        let per_sample = map_indices(exec, opts.batch, |b| -> Result<(f64, Vec<f64>)> {
            let (q, k) = &samples[b];
            let (res, cache) = crate::attention::head_forward(q, k, &mode)?;
            let diff = &res.probs - &targets[b];
            let l = diff.mapv(|v| v * v).sum() * inv_batch;
            let dprobs = diff * (2.0 * inv_batch);
            let hg = head_backward(&cache, &mode, &dprobs);
            let dangle = hg.dangle.expect("rotary mode");
            Ok((l, angles_to_freq_grad(&student, &grid, &dangle)))
        });
        let mut loss = 0.0;
        let mut grad = vec![0.0; student.values().len()];
        let mut failed = false;
        for item in per_sample {
            match item {
                Ok((l, g)) => {
                    loss += l;
                    grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                Err(RopeError::Numeric(_)) => failed = true,
                Err(e) => return Err(e),
            }
        }
        if failed || !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            trace.diverged_at = Some(step);
            break;
        }
        trace.rows.push(TraceRow {
            step,
            loss,
            freqs: student.values().to_vec(),
        });
        if step < opts.steps {
            student.descend(&grad, opts.lr)?;
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(cfg: &ModelConfig, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.grid().unwrap().num_tokens();
        Array2::from_shape_simple_fn((n, cfg.d), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn empty_network_is_identity() {
        let cfg = ModelConfig::toy(3, 3, 8, 2, 0, AttentionRecipe::None);
        let p = Params::init(&cfg).unwrap();
        let x = tokens(&cfg, 1);
        assert_eq!(
            forward(&cfg, &p, &x, Execution::Sequential).unwrap().output,
            x
        );
    }

    #[test]
    fn zero_ape_matches_no_ape() {
        let mut cfg = ModelConfig::toy(3, 3, 8, 2, 1, AttentionRecipe::RopeMixed);
        let p_off = Params::init(&cfg).unwrap();
        cfg.ape.enabled = true;
        let mut p_on = p_off.clone();
        p_on.ape = Some(ApeTable::zeros(&cfg.grid().unwrap(), 8, ApeKind::Learnable));
        let x = tokens(&cfg, 2);
        let a = forward(&cfg, &p_on, &x, Execution::Sequential)
            .unwrap()
            .output;
        cfg.ape.enabled = false;
        let b = forward(&cfg, &p_off, &x, Execution::Sequential)
            .unwrap()
            .output;
        assert_eq!(a, b);
    }

    #[test]
    fn mixed_at_axial_init_matches_axial() {
        let cfg_m = ModelConfig::toy(4, 3, 16, 2, 2, AttentionRecipe::RopeMixed);
        let cfg_a = ModelConfig::toy(4, 3, 16, 2, 2, AttentionRecipe::RopeAxial);
        let pm = Params::init(&cfg_m).unwrap();
        let pa = Params::init(&cfg_a).unwrap();
        let x = tokens(&cfg_m, 3);
        let a = forward(&cfg_m, &pm, &x, Execution::Parallel)
            .unwrap()
            .output;
        let b = forward(&cfg_a, &pa, &x, Execution::Parallel)
            .unwrap()
            .output;
        let diff = (&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff <= 1e-12, "{diff}");
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::toy(2, 2, 10, 3, 1, AttentionRecipe::None)
            .validate()
            .is_err());
        assert!(ModelConfig::toy(2, 2, 12, 2, 1, AttentionRecipe::RopeAxial)
            .validate()
            .is_err());
        assert!(ModelConfig::toy(2, 2, 12, 2, 1, AttentionRecipe::RopeMixed)
            .validate()
            .is_ok());
        let json = r#"{"grid_width":3,"grid_height":3,"d":8,"head_count":2,
            "layer_count":1,"attention":"rpb+rope_mixed","ape":{"enabled":true,"kind":"learnable"}}"#;
        let cfg = ModelConfig::from_json(json).unwrap();
        assert_eq!(cfg.attention, AttentionRecipe::RpbRopeMixed);
        assert_eq!(cfg.mlp_hidden(), 32);
    }

    #[test]
    fn zero_input_gives_zero_gradients() {
        let cfg = ModelConfig::toy(3, 3, 8, 2, 1, AttentionRecipe::RpbRopeMixed);
        let p = Params::init(&cfg).unwrap();
        let x = Array2::zeros((9, 8));
        let all = grad_check(&cfg, &p, &x, &ParamClass::ALL, 1e-6, Execution::Parallel).unwrap();
        for r in &all {
            assert!(r.analytic.iter().all(|&v| v == 0.0), "{}", r.name);
        }
        // Additive biases see an O(step^2) central difference; the position
        // tables and weight matrices see an exact zero.
        let classes = [ParamClass::Frequencies, ParamClass::Rpb];
        for r in grad_check(&cfg, &p, &x, &classes, 1e-6, Execution::Parallel).unwrap() {
            assert_eq!(r.rel_error, 0.0, "{}", r.name);
        }
    }

    #[test]
    fn every_class_matches_finite_differences() {
        let mut cfg = ModelConfig::toy(3, 3, 8, 2, 1, AttentionRecipe::RpbRopeMixed);
        cfg.class_token = true;
        cfg.ape.enabled = true;
        let p = Params::init(&cfg).unwrap();
        let x = tokens(&cfg, 4);
        let reports =
            grad_check(&cfg, &p, &x, &ParamClass::ALL, 1e-6, Execution::Parallel).unwrap();
        let mut seen = std::collections::HashSet::new();
        for r in &reports {
            seen.insert(r.class);
            assert!(r.rel_error < 1e-5, "{} rel err {}", r.name, r.rel_error);
        }
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn post_softmax_rpb_gradients() {
        let mut cfg = ModelConfig::toy(2, 2, 8, 1, 2, AttentionRecipe::Rpb);
        cfg.rpb_placement = RpbPlacement::PostSoftmax;
        let p = Params::init(&cfg).unwrap();
        let x = tokens(&cfg, 5);
        for r in grad_check(
            &cfg,
            &p,
            &x,
            &[ParamClass::Rpb],
            1e-6,
            Execution::Sequential,
        )
        .unwrap()
        {
            assert!(r.rel_error < 1e-5, "{} {}", r.name, r.rel_error);
        }
    }

    #[test]
    fn grad_check_is_deterministic() {
        let cfg = ModelConfig::toy(3, 3, 8, 2, 1, AttentionRecipe::RopeMixed);
        let p = Params::init(&cfg).unwrap();
        let x = tokens(&cfg, 6);
        let classes = [ParamClass::Frequencies];
        let a = grad_check(&cfg, &p, &x, &classes, 1e-6, Execution::Parallel).unwrap();
        let b = grad_check(&cfg, &p, &x, &classes, 1e-6, Execution::Parallel).unwrap();
        let c = grad_check(&cfg, &p, &x, &classes, 1e-6, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        // Both heads report all 2 * (d_head/2) mixed frequencies.
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|r| r.analytic.len() == 4));
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let cfg = ModelConfig::toy(2, 2, 8, 2, 1, AttentionRecipe::None);
        let p = Params::init(&cfg).unwrap();
        let x = tokens(&cfg, 7);
        assert!(grad_check(&cfg, &p, &x, &ParamClass::ALL, 0.0, Execution::Sequential).is_err());
    }

    #[test]
    fn fit_from_optimum_stays_put() {
        let cfg = ModelConfig::toy(4, 4, 8, 1, 1, AttentionRecipe::RopeMixed);
        let teacher = freqs_mixed_init(8, 0).unwrap();
        let opts = FitOptions {
            steps: 20,
            ..FitOptions::default()
        };
        let trace = fit_frequencies(&teacher, &cfg, &opts, Execution::Parallel).unwrap();
        assert_eq!(trace.rows.len(), 21);
        assert_eq!(trace.rows[0].loss, 0.0);
        assert!(trace.rows.iter().all(|r| r.freqs == teacher.values()));
    }

    #[test]
    fn fit_with_zero_lr_is_constant() {
        let cfg = ModelConfig::toy(4, 4, 8, 1, 1, AttentionRecipe::RopeMixed);
        let mut teacher = freqs_mixed_init(8, 0).unwrap();
        teacher.values_mut().unwrap()[0] += 0.3;
        let opts = FitOptions {
            steps: 10,
            lr: 0.0,
            ..FitOptions::default()
        };
        let trace = fit_frequencies(&teacher, &cfg, &opts, Execution::Sequential).unwrap();
        let first = &trace.rows[0];
        assert!(first.loss > 0.0);
        assert!(trace
            .rows
            .iter()
            .all(|r| r.freqs == first.freqs && r.loss == first.loss));

        let zero = FitOptions { steps: 0, ..opts };
        assert_eq!(
            fit_frequencies(&teacher, &cfg, &zero, Execution::Sequential)
                .unwrap()
                .rows
                .len(),
            1
        );
    }

    #[test]
    fn fit_reports_divergence() {
        let cfg = ModelConfig::toy(4, 4, 8, 1, 1, AttentionRecipe::RopeMixed);
        let mut teacher = freqs_mixed_init(8, 0).unwrap();
        teacher.values_mut().unwrap()[0] += 0.3;
        let opts = FitOptions {
            steps: 50,
            lr: f64::MAX,
            ..FitOptions::default()
        };
        let trace = fit_frequencies(&teacher, &cfg, &opts, Execution::Sequential).unwrap();
        assert!(trace.diverged_at.is_some());
        assert!(trace.last_finite_loss().unwrap().is_finite());
    }
}
