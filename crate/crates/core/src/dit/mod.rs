//! The denoising diffusion transformer.
//!
//! Pipeline: patchify -> linear token embedding + 2D sinusoidal positions
//! -> L transformer blocks with noise-level-conditioned modulation
//! (scale/shift on the normalized activations, gated residuals) -> final
//! normalization + linear projection -> unpatchify.
//!
//! The conditioning head of every block and the final projection start at
//! zero, so a freshly initialized model is exactly the zero function and
//! every block starts as the identity.

pub mod checkpoint;

use crate::autograd::Var;
use crate::diffusion::SIGMA_CLAMP;
use crate::error::{ConfigError, TensorError, TensorResult};
use crate::rng::{randn, stream_rng, streams};
use crate::tensor::Tensor;
use crate::transforms::CsiImage;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

/// Transformer hyperparameters for a given channel geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DitConfig {
    pub n_r: usize,
    pub n_t: usize,
    /// Patch size; must divide both n_r and n_t.
    pub patch: usize,
    /// Token dimension; must be divisible by 4 (2D positions) and by heads.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Max period of the sinusoidal embedding frequency ladder.
    pub cond_freq_max: f64,
}

impl DitConfig {
    /// Production defaults: d=128, L=2, P=4, 8 heads.
    pub fn default_for(n_r: usize, n_t: usize) -> Self {
        Self {
            n_r,
            n_t,
            patch: 4,
            dim: 128,
            layers: 2,
            heads: 8,
            mlp_ratio: 4.0,
            cond_freq_max: 1e4,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.patch == 0 || self.n_r % self.patch != 0 || self.n_t % self.patch != 0 {
            return Err(ConfigError::Invalid(format!(
                "patch {} must divide geometry {}x{}",
                self.patch, self.n_r, self.n_t
            )));
        }
        if self.layers < 1 {
            return Err(ConfigError::Invalid("layers must be >= 1".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "heads {} must divide dim {}",
                self.heads, self.dim
            )));
        }
        if self.dim % 4 != 0 {
            return Err(ConfigError::Invalid(format!(
                "dim {} must be divisible by 4 for 2D positional embedding",
                self.dim
            )));
        }
        if !(self.mlp_ratio > 0.0) || !(self.cond_freq_max > 1.0) {
            return Err(ConfigError::Invalid(
                "mlp_ratio must be positive and cond_freq_max > 1".into(),
            ));
        }
        Ok(())
    }

    /// Token count M = (n_r/P) * (n_t/P).
    pub fn tokens(&self) -> usize {
        (self.n_r / self.patch) * (self.n_t / self.patch)
    }

    /// Flattened patch length 2*P^2.
    pub fn patch_dim(&self) -> usize {
        2 * self.patch * self.patch
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.dim as f64).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Expected shape of every named parameter tensor.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let d = self.dim;
        let pd = self.patch_dim();
        let hidden = self.mlp_hidden();
        let mut m = BTreeMap::new();
        m.insert("patch_proj.weight".into(), vec![pd, d]);
        m.insert("patch_proj.bias".into(), vec![d]);
        m.insert("cond_mlp.fc1.weight".into(), vec![d, d]);
        m.insert("cond_mlp.fc1.bias".into(), vec![d]);
        m.insert("cond_mlp.fc2.weight".into(), vec![d, d]);
        m.insert("cond_mlp.fc2.bias".into(), vec![d]);
        for i in 0..self.layers {
            // no qkv bias: a key-side bias cancels inside the row softmax,
            // leaving dead parameters
            m.insert(format!("block{i}.qkv.weight"), vec![d, 3 * d]);
            m.insert(format!("block{i}.attn_out.weight"), vec![d, d]);
            m.insert(format!("block{i}.attn_out.bias"), vec![d]);
            m.insert(format!("block{i}.mlp_in.weight"), vec![d, hidden]);
            m.insert(format!("block{i}.mlp_in.bias"), vec![hidden]);
            m.insert(format!("block{i}.mlp_out.weight"), vec![hidden, d]);
            m.insert(format!("block{i}.mlp_out.bias"), vec![d]);
            m.insert(format!("block{i}.cond_head.weight"), vec![d, 6 * d]);
            m.insert(format!("block{i}.cond_head.bias"), vec![6 * d]);
        }
        m.insert("final_proj.weight".into(), vec![d, pd]);
        m.insert("final_proj.bias".into(), vec![pd]);
        m
    }

    /// Closed-form parameter count; matches the enumerated tensor sizes.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let pd = self.patch_dim();
        let hidden = self.mlp_hidden();
        let per_block =
            d * 3 * d + d * d + d + d * hidden + hidden + hidden * d + d + d * 6 * d + 6 * d;
        pd * d + d + 2 * (d * d + d) + self.layers * per_block + d * pd + pd
    }
}

/// Named parameter tensors of the network.
#[derive(Clone, Debug)]
pub struct DitParams {
    tensors: BTreeMap<String, Tensor>,
}

impl DitParams {
    /// Deterministic initialization: Xavier-normal weights, zero biases,
    /// and zeroed conditioning heads and final projection.
    pub fn init(cfg: &DitConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, streams::param_init());
        let mut tensors = BTreeMap::new();
        for (name, shape) in cfg.param_shapes() {
            let zero = name.contains("cond_head")
                || name.starts_with("final_proj")
                || name.ends_with(".bias");
            let t = if zero {
                Tensor::zeros(&shape)
            } else {
                let fan_in = shape[0] as f64;
                let fan_out = shape[1] as f64;
                let std = (2.0 / (fan_in + fan_out)).sqrt();
                Tensor::from_fn(&shape, |_| std * randn(&mut rng))
            };
            tensors.insert(name, t);
        }
        Self { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter tensor '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter tensor '{name}'"))
    }

    pub fn map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn map_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn total_len(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Wrap every tensor in a graph leaf. The returned map is what the
    /// forward graph reads; after `backward`, gradients are read from the
    /// same leaves.
    pub fn to_vars(&self) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), Var::leaf(v.clone())))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Patchify / unpatchify
// ---------------------------------------------------------------------------

/// `[2, H, W]` -> `[M, 2*P^2]`: non-overlapping P x P patches in raster
/// order, each flattened channel-major. Pure data rearrangement, equivalent
/// to a stride-P convolution with a P x P kernel.
pub fn patchify_var(x: &Var, cfg: &DitConfig) -> TensorResult<Var> {
    let (p, h, w) = (cfg.patch, cfg.n_r, cfg.n_t);
    if x.shape() != [2, h, w] {
        return Err(TensorError::InvalidShape {
            op: "patchify",
            shape: x.shape().to_vec(),
            reason: format!("expected [2, {h}, {w}]"),
        });
    }
    x.reshape(&[2, h / p, p, w / p, p])?
        .permute(&[1, 3, 0, 2, 4])?
        .reshape(&[cfg.tokens(), cfg.patch_dim()])
}

/// Inverse of [`patchify_var`].
pub fn unpatchify_var(tokens: &Var, cfg: &DitConfig) -> TensorResult<Var> {
    let (p, h, w) = (cfg.patch, cfg.n_r, cfg.n_t);
    if tokens.shape() != [cfg.tokens(), cfg.patch_dim()] {
        return Err(TensorError::InvalidShape {
            op: "unpatchify",
            shape: tokens.shape().to_vec(),
            reason: format!("expected [{}, {}]", cfg.tokens(), cfg.patch_dim()),
        });
    }
    tokens
        .reshape(&[h / p, w / p, 2, p, p])?
        .permute(&[2, 0, 3, 1, 4])?
        .reshape(&[2, h, w])
}

pub fn patchify(x: &CsiImage, cfg: &DitConfig) -> TensorResult<Tensor> {
    Ok(patchify_var(&Var::leaf(x.data.clone()), cfg)?.value().clone())
}

pub fn unpatchify(tokens: &Tensor, cfg: &DitConfig) -> TensorResult<CsiImage> {
    let v = unpatchify_var(&Var::leaf(tokens.clone()), cfg)?;
    CsiImage::from_tensor(v.value().clone())
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

/// Sin/cos features of a scalar position over a geometric frequency ladder
/// running from 1 down to 1/max_period. `half` sines then `half` cosines.
fn sincos_features(pos: f64, half: usize, max_period: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * half);
    for j in 0..half {
        let omega = max_period.powf(-(j as f64) / half as f64);
        out.push((pos * omega).sin());
    }
    for j in 0..half {
        let omega = max_period.powf(-(j as f64) / half as f64);
        out.push((pos * omega).cos());
    }
    out
}

/// Deterministic 2D sinusoidal positions for the patch grid: the first
/// dim/2 channels encode the patch row, the rest the patch column.
pub fn pos_embed_2d(cfg: &DitConfig) -> TensorResult<Tensor> {
    if cfg.dim % 4 != 0 {
        return Err(TensorError::InvalidShape {
            op: "pos_embed_2d",
            shape: vec![cfg.dim],
            reason: "dim must be divisible by 4".into(),
        });
    }
    let (gh, gw) = (cfg.n_r / cfg.patch, cfg.n_t / cfg.patch);
    let quarter = cfg.dim / 4;
    let mut data = Vec::with_capacity(cfg.tokens() * cfg.dim);
    for row in 0..gh {
        let row_feat = sincos_features(row as f64, quarter, cfg.cond_freq_max);
        for col in 0..gw {
            let col_feat = sincos_features(col as f64, quarter, cfg.cond_freq_max);
            data.extend_from_slice(&row_feat);
            data.extend_from_slice(&col_feat);
        }
    }
    Tensor::new(vec![cfg.tokens(), cfg.dim], data)
}

/// Sinusoidal features of ln(sigma), shape `[1, dim]`. The conditioning MLP
/// turns these into the modulation vector.
pub fn sigma_features(sigma_t: f64, cfg: &DitConfig) -> TensorResult<Tensor> {
    if !(sigma_t > 0.0) {
        return Err(TensorError::Domain {
            op: "sigma_features",
            reason: format!("noise level must be positive, got {sigma_t}"),
        });
    }
    let feat = sincos_features(sigma_t.ln(), cfg.dim / 2, cfg.cond_freq_max);
    Tensor::new(vec![1, cfg.dim], feat)
}

// ---------------------------------------------------------------------------
// Forward graph
// ---------------------------------------------------------------------------

const LN_EPS: f64 = 1e-6;

fn linear(x: &Var, params: &BTreeMap<String, Var>, name: &str) -> TensorResult<Var> {
    let w = &params[&format!("{name}.weight")];
    let b = &params[&format!("{name}.bias")];
    x.matmul(w)?.add(b)
}

/// Conditioning vector `c`: sigma features through the two-layer MLP.
fn cond_vector(
    sigma_t: f64,
    cfg: &DitConfig,
    params: &BTreeMap<String, Var>,
) -> TensorResult<Var> {
    let feat = Var::leaf(sigma_features(sigma_t, cfg)?);
    let h = linear(&feat, params, "cond_mlp.fc1")?.silu()?;
    linear(&h, params, "cond_mlp.fc2")
}

/// Multi-head scaled dot-product self-attention, no mask, no dropout.
fn attention(
    x: &Var,
    cfg: &DitConfig,
    params: &BTreeMap<String, Var>,
    block: usize,
) -> TensorResult<Var> {
    let d = cfg.dim;
    let dh = cfg.head_dim();
    let qkv = x.matmul(&params[&format!("block{block}.qkv.weight")])?;
    let parts = qkv.split(1, &[d, d, d])?;
    let head_sizes = vec![dh; cfg.heads];
    let q = parts[0].split(1, &head_sizes)?;
    let k = parts[1].split(1, &head_sizes)?;
    let v = parts[2].split(1, &head_sizes)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let scores = q[h].matmul(&k[h].transpose()?)?.scale(scale)?;
        heads.push(scores.softmax_lastdim()?.matmul(&v[h])?);
    }
    let refs: Vec<&Var> = heads.iter().collect();
    let merged = Var::concat(&refs, 1)?;
    linear(&merged, params, &format!("block{block}.attn_out"))
}

/// One transformer block with conditioned modulation and gated residuals:
///   (g1,b1,a1,g2,b2,a2) = cond_head(c)
///   h   = tokens + a1 .* Attn((1+g1) .* LN(tokens) + b1)
///   out = h      + a2 .* MLP ((1+g2) .* LN(h) + b2)
pub fn dit_block(
    tokens: &Var,
    c: &Var,
    cfg: &DitConfig,
    params: &BTreeMap<String, Var>,
    block: usize,
) -> TensorResult<Var> {
    let d = cfg.dim;
    let modulation = linear(c, params, &format!("block{block}.cond_head"))?;
    let m = modulation.split(1, &[d; 6])?;
    let (g1, b1, a1, g2, b2, a2) = (&m[0], &m[1], &m[2], &m[3], &m[4], &m[5]);

    let normed = tokens.layer_norm(LN_EPS)?;
    let attn_in = normed.mul(&g1.add_scalar(1.0)?)?.add(b1)?;
    let attn_out = attention(&attn_in, cfg, params, block)?;
    let h = tokens.add(&attn_out.mul(a1)?)?;

    let normed2 = h.layer_norm(LN_EPS)?;
    let mlp_in = normed2.mul(&g2.add_scalar(1.0)?)?.add(b2)?;
    let hidden = linear(&mlp_in, params, &format!("block{block}.mlp_in"))?.gelu()?;
    let mlp_out = linear(&hidden, params, &format!("block{block}.mlp_out"))?;
    h.add(&mlp_out.mul(a2)?)
}

/// Full forward graph from an input image leaf to the predicted clean image
/// (`[2, n_r, n_t]`). Callers that need parameter gradients pass leaves
/// created from the parameter tensors and read their grads after backward.
pub fn dit_forward_graph(
    params: &BTreeMap<String, Var>,
    cfg: &DitConfig,
    x_t: &Var,
    sigma_t: f64,
) -> TensorResult<Var> {
    let patches = patchify_var(x_t, cfg)?;
    let mut tokens = linear(&patches, params, "patch_proj")?;
    tokens = tokens.add(&Var::leaf(pos_embed_2d(cfg)?))?;
    let c = cond_vector(sigma_t, cfg, params)?;
    for i in 0..cfg.layers {
        tokens = dit_block(&tokens, &c, cfg, params, i)?;
    }
    let out = linear(&tokens.layer_norm(LN_EPS)?, params, "final_proj")?;
    unpatchify_var(&out, cfg)
}

/// Configuration + parameters + a forward-pass counter.
#[derive(Debug)]
pub struct DitModel {
    pub cfg: DitConfig,
    pub params: DitParams,
    nfe: AtomicU64,
}

impl DitModel {
    pub fn new(cfg: DitConfig, params: DitParams) -> Self {
        Self {
            cfg,
            params,
            nfe: AtomicU64::new(0),
        }
    }

    pub fn init(cfg: DitConfig, seed: u64) -> Self {
        let params = DitParams::init(&cfg, seed);
        Self::new(cfg, params)
    }

    /// Predict the clean image from a noisy one at the given noise level.
    /// Counts one network function evaluation. The conditioning level is
    /// clamped to the training-time range.
    pub fn forward(&self, x_t: &CsiImage, sigma_t: f64) -> TensorResult<CsiImage> {
        let sigma = sigma_t.clamp(SIGMA_CLAMP.0, SIGMA_CLAMP.1);
        let vars = self.params.to_vars();
        let out = dit_forward_graph(&vars, &self.cfg, &Var::leaf(x_t.data.clone()), sigma)?;
        self.nfe.fetch_add(1, Ordering::Relaxed);
        CsiImage::from_tensor(out.value().clone())
    }

    /// Forward passes performed so far.
    pub fn nfe_count(&self) -> u64 {
        self.nfe.load(Ordering::Relaxed)
    }

    pub fn reset_nfe(&self) {
        self.nfe.store(0, Ordering::Relaxed);
    }
}
