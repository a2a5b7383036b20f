//! Conditional masked LRM: tokenization, transformer, triplane upsampling and field heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::masking::PatchMask;
use crate::tensor::{Checkpoint, Graph, OptimState, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::{Error, Result};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_res: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub plane_res: usize,
    pub plane_channels: usize,
    pub decoder_hidden: usize,
    pub beta_init: f64,
    /// Initial value of the SDF head's output bias.
    pub sdf_bias_init: f64,
    pub ln_eps: f64,
    /// Zero-initialize the output projections of every attention/MLP sublayer.
    pub zero_init_residual: bool,
    /// Process only the triplane tokens in the last block (x̂ is never used downstream).
    pub drop_final_x: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_res: 64,
            patch_size: 8,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            mlp_ratio: 4,
            plane_res: 32,
            plane_channels: 16,
            decoder_hidden: 64,
            beta_init: 0.1,
            sdf_bias_init: 0.1,
            ln_eps: 1e-5,
            zero_init_residual: true,
            drop_final_x: false,
        }
    }
}

impl ModelConfig {
    /// Full-size reference configuration.
    pub fn full_scale() -> Self {
        ModelConfig {
            image_res: 512,
            patch_size: 16,
            d_model: 1024,
            n_layers: 24,
            n_heads: 16,
            plane_res: 64,
            plane_channels: 32,
            ..Default::default()
        }
    }

    /// Small configuration used for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_res: 8,
            patch_size: 4,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            mlp_ratio: 2,
            plane_res: 4,
            plane_channels: 2,
            decoder_hidden: 4,
            zero_init_residual: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        let bad = |m: &str| Err(Error::ConfigMismatch(m.to_string()));
        if p == 0 || !self.image_res.is_multiple_of(p) {
            return bad(&format!("patch_size {p} must divide image_res {}", self.image_res));
        }
        if !self.plane_res.is_multiple_of(p) || self.plane_res < 2 {
            return bad(&format!("patch_size {p} must divide plane_res {}", self.plane_res));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(&format!("n_heads {} must divide d_model {}", self.n_heads, self.d_model));
        }
        if self.plane_channels == 0 || self.decoder_hidden == 0 || self.mlp_ratio == 0 {
            return bad("plane_channels, decoder_hidden and mlp_ratio must be positive");
        }
        if !(self.beta_init > 0.0) {
            return bad("beta_init must be positive");
        }
        Ok(())
    }

    pub fn tokens_per_view(&self) -> usize {
        let g = self.image_res / self.patch_size;
        g * g
    }

    pub fn plane_grid(&self) -> usize {
        self.plane_res / self.patch_size
    }

    pub fn triplane_tokens(&self) -> usize {
        3 * self.plane_grid() * self.plane_grid()
    }

    pub fn latent_width(&self) -> usize {
        3 * self.plane_channels
    }
}

/// Raw per-view inputs: interleaved RGB (`H*W*3`) and Plücker channels (`H*W*6`).
#[derive(Clone, Debug, PartialEq)]
pub struct ViewInput {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f64>,
    pub plucker: Vec<f64>,
}

impl ViewInput {
    pub fn new(height: usize, width: usize, rgb: Vec<f64>, plucker: Vec<f64>) -> Result<Self> {
        if rgb.len() != height * width * 3 || plucker.len() != height * width * 6 {
            return Err(Error::shape("view input", &[height, width], &[rgb.len(), plucker.len()]));
        }
        Ok(ViewInput {
            height,
            width,
            rgb,
            plucker,
        })
    }
}

/// How the conditional branch is fed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    #[default]
    Clean,
    /// Every conditional image token replaced by the mask token.
    MaskTokens,
}

/// Split `H×W×C` into row-major non-overlapping `p×p` patches, each flattened as `(row, col, channel)`.
pub fn patchify(data: &[f64], height: usize, width: usize, channels: usize, p: usize) -> Result<Vec<f64>> {
    if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
        return Err(Error::invalid(format!("patch size {p} does not divide {height}x{width}")));
    }
    if data.len() != height * width * channels {
        return Err(Error::shape("patchify", &[height, width, channels], &[data.len()]));
    }
    let mut out = Vec::with_capacity(data.len());
    for pr in 0..height / p {
        for pc in 0..width / p {
            for r in 0..p {
                let row = pr * p + r;
                let start = (row * width + pc * p) * channels;
                out.extend_from_slice(&data[start..start + p * channels]);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        zero: bool,
        rng: &mut R,
    ) -> Self {
        let w = if zero {
            Tensor::zeros(&[fan_in, fan_out])
        } else {
            Tensor::trunc_normal(&[fan_in, fan_out], INIT_STD, rng)
        };
        Linear {
            w: store.add(format!("{name}.w"), w),
            b: Some(store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))),
        }
    }

    /// `x @ W + b` for `x` of shape `[.., fan_in]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// Bias-free `x @ W`, used for tangent propagation.
    pub fn forward_linear<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        g.matmul(x, w)
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, eps: f64) -> Result<Var> {
        let n = g.layer_norm(x, T::c(eps));
        let gm = g.param(store, self.gamma);
        let bt = g.param(store, self.beta);
        let y = g.mul(n, gm)?;
        g.add(y, bt)
    }
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    up: Linear,
    down: Linear,
}

impl Mlp {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln_cross: Norm,
    ln_cond: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    cross_out: Linear,
    ln_mlp1: Norm,
    mlp1: Mlp,
    ln_self: Norm,
    qkv: Linear,
    self_out: Linear,
    ln_mlp2: Norm,
    mlp2: Mlp,
}

/// Three-layer field head (two hidden GELU layers).
#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

impl Head {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        let (i, h, o) = dims;
        Head {
            l1: Linear::new(store, &format!("{name}.l1"), i, h, false, rng),
            l2: Linear::new(store, &format!("{name}.l2"), h, h, false, rng),
            l3: Linear::new(store, &format!("{name}.l3"), h, o, false, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.gelu(h);
        let h = self.l2.forward(g, store, h)?;
        let h = g.gelu(h);
        self.l3.forward(g, store, h)
    }

    /// Output together with its directional derivatives along `k` input tangents
    /// (`tangents` is `[k, n, in]`; returns output `[n, o]` and `[k, n, o]`).
    pub fn forward_with_tangents<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        tangents: Var,
    ) -> Result<(Var, Var)> {
        let h1 = self.l1.forward(g, store, x)?;
        let a1 = g.gelu(h1);
        let h2 = self.l2.forward(g, store, a1)?;
        let a2 = g.gelu(h2);
        let out = self.l3.forward(g, store, a2)?;

        let dh1 = self.l1.forward_linear(g, store, tangents)?;
        let s1 = g.gelu_prime(h1);
        let da1 = g.mul(dh1, s1)?;
        let dh2 = self.l2.forward_linear(g, store, da1)?;
        let s2 = g.gelu_prime(h2);
        let da2 = g.mul(dh2, s2)?;
        let dout = self.l3.forward_linear(g, store, da2)?;
        Ok((out, dout))
    }
}

/// Decoded field values at a batch of points.
#[derive(Clone, Copy, Debug)]
pub struct FieldOutput {
    /// `[n, 1]`
    pub sdf: Var,
    /// `[n, 3]` in `(0, 1)`
    pub rgb: Var,
    /// `[n, 3]` SDF gradient, when requested
    pub grad: Option<Var>,
}

/// Anything that maps points of `[-1, 1]^3` to SDF, color and density scale.
pub trait FieldDecoder<T: Scalar> {
    fn decode(&self, g: &mut Graph<T>, planes: Var, points: &[T], with_grad: bool) -> Result<FieldOutput>;

    /// Laplace scale `beta` as a `[1]` variable.
    fn beta(&self, g: &mut Graph<T>) -> Var;
}

/// Parameter handles of the full model.
#[derive(Clone, Debug)]
struct Layout {
    embed_rgb: Linear,
    embed_plucker: Linear,
    mask_token: ParamId,
    triplane_tokens: ParamId,
    blocks: Vec<Block>,
    ln_final: Norm,
    upsample: Linear,
    sdf_head: Head,
    rgb_head: Head,
    beta_raw: ParamId,
}

#[derive(Clone, Debug)]
pub struct MaskedLrm<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

pub type Model32 = MaskedLrm<f32>;
pub type Model64 = MaskedLrm<f64>;

/// Inverse of softplus.
fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Outputs of the transformer for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[3, P, P, c]`
    pub planes: Var,
    /// Transformed view tokens (unused downstream), absent with `drop_final_x`.
    pub x_hat: Option<Var>,
    /// `[3 (P/p)^2, d]`
    pub triplane_tokens: Var,
}

impl<T: Scalar> MaskedLrm<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new();
        let c = &config;
        let (d, p) = (c.d_model, c.patch_size);
        let zr = c.zero_init_residual;
        let embed_rgb = Linear::new(&mut s, "embed.rgb", p * p * 3, d, false, rng);
        let embed_plucker = Linear::new(&mut s, "embed.plucker", p * p * 6, d, false, rng);
        let mask_token = s.add("mask_token", Tensor::trunc_normal(&[d], INIT_STD, rng));
        let triplane_tokens = s.add(
            "triplane_tokens",
            Tensor::trunc_normal(&[c.triplane_tokens(), d], INIT_STD, rng),
        );
        let hidden = d * c.mlp_ratio;
        let mut blocks = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let n = |x: &str| format!("blocks.{l}.{x}");
            blocks.push(Block {
                ln_cross: Norm::new(&mut s, &n("ln_cross"), d),
                ln_cond: Norm::new(&mut s, &n("ln_cond"), d),
                q: Linear::new(&mut s, &n("cross.q"), d, d, false, rng),
                k: Linear::new(&mut s, &n("cross.k"), d, d, false, rng),
                v: Linear::new(&mut s, &n("cross.v"), d, d, false, rng),
                cross_out: Linear::new(&mut s, &n("cross.out"), d, d, zr, rng),
                ln_mlp1: Norm::new(&mut s, &n("ln_mlp1"), d),
                mlp1: Mlp {
                    up: Linear::new(&mut s, &n("mlp1.up"), d, hidden, false, rng),
                    down: Linear::new(&mut s, &n("mlp1.down"), hidden, d, zr, rng),
                },
                ln_self: Norm::new(&mut s, &n("ln_self"), d),
                qkv: Linear::new(&mut s, &n("self.qkv"), d, 3 * d, false, rng),
                self_out: Linear::new(&mut s, &n("self.out"), d, d, zr, rng),
                ln_mlp2: Norm::new(&mut s, &n("ln_mlp2"), d),
                mlp2: Mlp {
                    up: Linear::new(&mut s, &n("mlp2.up"), d, hidden, false, rng),
                    down: Linear::new(&mut s, &n("mlp2.down"), hidden, d, zr, rng),
                },
            });
        }
        let ln_final = Norm::new(&mut s, "ln_final", d);
        let upsample = Linear::new(&mut s, "upsample", d, p * p * c.plane_channels, false, rng);
        let lw = c.latent_width();
        let sdf_head = Head::new(&mut s, "sdf_head", (lw, c.decoder_hidden, 1), rng);
        let rgb_head = Head::new(&mut s, "rgb_head", (lw, c.decoder_hidden, 3), rng);
        if let Some(b) = sdf_head.l3.b {
            *s.get_mut(b) = Tensor::full(&[1], T::c(c.sdf_bias_init));
        }
        let beta_raw = s.add("beta_raw", Tensor::full(&[1], T::c(softplus_inv(c.beta_init))));
        Ok(MaskedLrm {
            config,
            params: s,
            layout: Layout {
                embed_rgb,
                embed_plucker,
                mask_token,
                triplane_tokens,
                blocks,
                ln_final,
                upsample,
                sdf_head,
                rgb_head,
                beta_raw,
            },
        })
    }

    pub fn mask_token_id(&self) -> ParamId {
        self.layout.mask_token
    }

    pub fn triplane_tokens_id(&self) -> ParamId {
        self.layout.triplane_tokens
    }

    pub fn embed_rgb(&self) -> Linear {
        self.layout.embed_rgb
    }

    pub fn embed_plucker(&self) -> Linear {
        self.layout.embed_plucker
    }

    pub fn sdf_head(&self) -> Head {
        self.layout.sdf_head
    }

    pub fn rgb_head(&self) -> Head {
        self.layout.rgb_head
    }

    pub fn upsample_layer(&self) -> Linear {
        self.layout.upsample
    }

    /// Overwrite every parameter except the density scale with `U(-scale, scale)` draws.
    /// Keeps finite-difference checks away from vanishing gradients.
    pub fn randomize_params<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        let ids: Vec<ParamId> = self.params.ids().filter(|&id| id != self.layout.beta_raw).collect();
        for id in ids {
            let shape = self.params.get(id).shape().to_vec();
            *self.params.get_mut(id) = Tensor::uniform(&shape, -scale, scale, rng);
        }
    }

    pub fn to_checkpoint(&self, state: Option<OptimState<T>>) -> Result<Checkpoint<T>> {
        Ok(Checkpoint {
            meta: toml::to_string(&self.config).map_err(|e| Error::Parse(e.to_string()))?,
            params: self.params.clone(),
            state,
        })
    }

    /// Rebuild a model from a checkpoint of any dtype; returns the optimizer state if stored.
    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<(Self, Option<OptimState<T>>)> {
        let config: ModelConfig = toml::from_str(&ck.meta).map_err(|e| Error::Parse(e.to_string()))?;
        let mut model = Self::new(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        if ck.params.len() != model.params.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {} parameters, model has {}",
                ck.params.len(),
                model.params.len()
            )));
        }
        model.params.load_from(&ck.params)?;
        Ok((model, ck.state))
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, Option<OptimState<T>>)> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    /// Current value of the Laplace scale.
    pub fn beta_value(&self) -> f64 {
        let r = self.params.get(self.layout.beta_raw).data()[0].f64();
        if r > 30.0 {
            r
        } else {
            r.exp().ln_1p()
        }
    }

    fn check_view(&self, v: &ViewInput) -> Result<()> {
        let r = self.config.image_res;
        if v.height != r || v.width != r {
            return Err(Error::ConfigMismatch(format!(
                "view is {}x{}, model expects {r}x{r}",
                v.height, v.width
            )));
        }
        Ok(())
    }

    /// Linear projection of each flattened patch: `[tokens, d]`.
    pub fn patch_embed(&self, g: &mut Graph<T>, layer: Linear, data: &[f64], channels: usize, res: usize) -> Result<Var> {
        let p = self.config.patch_size;
        let patches = patchify(data, res, res, channels, p)?;
        let n = patches.len() / (p * p * channels);
        let x = g.constant(Tensor::from_f64(&[n, p * p * channels], &patches)?);
        layer.forward(g, &self.params, x)
    }

    /// Flagged rows take the learnable mask token.
    pub fn apply_mask_tokens(&self, g: &mut Graph<T>, tokens: Var, mask: &PatchMask) -> Result<Var> {
        let n = g.shape(tokens)[0];
        if mask.len() != n {
            return Err(Error::shape("apply_mask_tokens", &[n], &[mask.len()]));
        }
        if mask.count() == 0 {
            return Ok(tokens);
        }
        let m = g.param(&self.params, self.layout.mask_token);
        g.row_where(&mask.flags, tokens, m)
    }

    /// `(x, z)`: masked view tokens plus Plücker tokens, concatenated over views; conditional tokens.
    pub fn assemble_inputs(
        &self,
        g: &mut Graph<T>,
        cond: &ViewInput,
        views: &[(&ViewInput, &PatchMask)],
        cond_mode: CondMode,
    ) -> Result<(Option<Var>, Var)> {
        self.check_view(cond)?;
        let res = self.config.image_res;
        let l = &self.layout;
        let mut x_parts = Vec::with_capacity(views.len());
        for (v, m) in views {
            self.check_view(v)?;
            let img = self.patch_embed(g, l.embed_rgb, &v.rgb, 3, res)?;
            let img = self.apply_mask_tokens(g, img, m)?;
            let pl = self.patch_embed(g, l.embed_plucker, &v.plucker, 6, res)?;
            x_parts.push(g.add(img, pl)?);
        }
        let ci = self.patch_embed(g, l.embed_rgb, &cond.rgb, 3, res)?;
        let ci = match cond_mode {
            CondMode::Clean => ci,
            CondMode::MaskTokens => {
                let n = g.shape(ci)[0];
                let full = PatchMask {
                    rows: 1,
                    cols: n,
                    patch_size: self.config.patch_size,
                    flags: vec![true; n],
                };
                self.apply_mask_tokens(g, ci, &full)?
            }
        };
        let cp = self.patch_embed(g, l.embed_plucker, &cond.plucker, 6, res)?;
        let z = g.add(ci, cp)?;
        let x = match x_parts.len() {
            0 => None,
            1 => Some(x_parts[0]),
            _ => Some(g.concat(&x_parts, 0)?),
        };
        Ok((x, z))
    }

    /// Transformer over `x ‖ triplane tokens` with cross-attention to `z`.
    pub fn transformer_forward(&self, g: &mut Graph<T>, x: Option<Var>, z: Var, tokens: Var) -> Result<(Option<Var>, Var)> {
        let d = self.config.d_model;
        for v in [Some(z), Some(tokens), x].into_iter().flatten() {
            if g.shape(v).len() != 2 || g.shape(v)[1] != d {
                return Err(Error::shape("transformer", g.shape(v), &[d]));
            }
        }
        let n_t = g.shape(tokens)[0];
        let mut n_x = x.map_or(0, |x| g.shape(x)[0]);
        let mut h = match x {
            Some(x) => g.concat(&[x, tokens], 0)?,
            None => tokens,
        };
        let (s, eps, heads) = (&self.params, self.config.ln_eps, self.config.n_heads);
        let n_blocks = self.layout.blocks.len();
        for (bi, b) in self.layout.blocks.iter().enumerate() {
            if self.config.drop_final_x && bi + 1 == n_blocks && n_x > 0 {
                let end = g.shape(h)[0];
                h = g.slice(h, 0, n_x, end)?;
                n_x = 0;
            }
            let hn = b.ln_cross.forward(g, s, h, eps)?;
            let zn = b.ln_cond.forward(g, s, z, eps)?;
            let q = b.q.forward(g, s, hn)?;
            let k = b.k.forward(g, s, zn)?;
            let v = b.v.forward(g, s, zn)?;
            let a = g.attention(q, k, v, heads)?;
            let a = b.cross_out.forward(g, s, a)?;
            h = g.add(h, a)?;

            let hn = b.ln_mlp1.forward(g, s, h, eps)?;
            let m = b.mlp1.forward(g, s, hn)?;
            h = g.add(h, m)?;

            let hn = b.ln_self.forward(g, s, h, eps)?;
            let qkv = b.qkv.forward(g, s, hn)?;
            let q = g.slice(qkv, 1, 0, d)?;
            let k = g.slice(qkv, 1, d, 2 * d)?;
            let v = g.slice(qkv, 1, 2 * d, 3 * d)?;
            let a = g.attention(q, k, v, heads)?;
            let a = b.self_out.forward(g, s, a)?;
            h = g.add(h, a)?;

            let hn = b.ln_mlp2.forward(g, s, h, eps)?;
            let m = b.mlp2.forward(g, s, hn)?;
            h = g.add(h, m)?;
        }
        let total = g.shape(h)[0];
        let t_hat = g.slice(h, 0, total - n_t, total)?;
        let x_hat = if n_x > 0 { Some(g.slice(h, 0, 0, n_x)?) } else { None };
        Ok((x_hat, t_hat))
    }

    /// Each token becomes a `p×p×c` patch of its plane: `[3 g², d] -> [3, P, P, c]`.
    pub fn upsample_triplanes(&self, g: &mut Graph<T>, t_hat: Var) -> Result<Var> {
        let c = &self.config;
        let (gr, p, ch) = (c.plane_grid(), c.patch_size, c.plane_channels);
        if g.shape(t_hat) != [3 * gr * gr, c.d_model] {
            return Err(Error::shape("upsample_triplanes", g.shape(t_hat), &[3 * gr * gr, c.d_model]));
        }
        let n = self.layout.ln_final.forward(g, &self.params, t_hat, c.ln_eps)?;
        let u = self.layout.upsample.forward(g, &self.params, n)?;
        tokens_to_planes(g, u, gr, p, ch)
    }

    /// Full encoder: views and conditional image to triplanes.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        cond: &ViewInput,
        views: &[(&ViewInput, &PatchMask)],
        cond_mode: CondMode,
    ) -> Result<Encoded> {
        let (x, z) = self.assemble_inputs(g, cond, views, cond_mode)?;
        let tokens = g.param(&self.params, self.layout.triplane_tokens);
        let (x_hat, t_hat) = self.transformer_forward(g, x, z, tokens)?;
        let planes = self.upsample_triplanes(g, t_hat)?;
        Ok(Encoded {
            planes,
            x_hat,
            triplane_tokens: t_hat,
        })
    }

    /// Concatenated xy, yz, xz features at each point: `[n, 3c]`.
    pub fn sample_triplane(&self, g: &mut Graph<T>, planes: Var, points: &[T]) -> Result<Var> {
        g.triplane_sample(planes, points)
    }

    pub fn decode_sdf(&self, g: &mut Graph<T>, latent: Var) -> Result<Var> {
        self.check_latent(g, latent)?;
        self.layout.sdf_head.forward(g, &self.params, latent)
    }

    pub fn decode_rgb(&self, g: &mut Graph<T>, latent: Var) -> Result<Var> {
        self.check_latent(g, latent)?;
        let o = self.layout.rgb_head.forward(g, &self.params, latent)?;
        Ok(g.sigmoid(o))
    }

    fn check_latent(&self, g: &Graph<T>, latent: Var) -> Result<()> {
        let w = self.config.latent_width();
        let s = g.shape(latent);
        if s.len() != 2 || s[1] != w {
            return Err(Error::shape("decode", s, &[w]));
        }
        Ok(())
    }
}

/// `[3 g², p² c] -> [3, g p, g p, c]` with tokens in row-major patch order per plane.
pub fn tokens_to_planes<T: Scalar>(g: &mut Graph<T>, u: Var, grid: usize, p: usize, ch: usize) -> Result<Var> {
    let u = g.reshape(u, &[3, grid, grid, p, p, ch])?;
    let u = g.permute(u, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(u, &[3, grid * p, grid * p, ch])
}

impl<T: Scalar> FieldDecoder<T> for MaskedLrm<T> {
    fn decode(&self, g: &mut Graph<T>, planes: Var, points: &[T], with_grad: bool) -> Result<FieldOutput> {
        let latent = g.triplane_sample(planes, points)?;
        let n = points.len() / 3;
        let rgb = self.decode_rgb(g, latent)?;
        if !with_grad {
            let sdf = self.decode_sdf(g, latent)?;
            return Ok(FieldOutput { sdf, rgb, grad: None });
        }
        let lw = self.config.latent_width();
        let mut parts = Vec::with_capacity(3);
        for axis in 0..3 {
            let d = g.triplane_sample_deriv(planes, points, axis)?;
            parts.push(g.reshape(d, &[1, n, lw])?);
        }
        let tangents = g.concat(&parts, 0)?;
        let (sdf, dsdf) = self.layout.sdf_head.forward_with_tangents(g, &self.params, latent, tangents)?;
        // [3, n, 1] -> [n, 3]
        let dsdf = g.reshape(dsdf, &[3, n])?;
        let grad = g.transpose(dsdf)?;
        Ok(FieldOutput {
            sdf,
            rgb,
            grad: Some(grad),
        })
    }

    fn beta(&self, g: &mut Graph<T>) -> Var {
        let r = g.param(&self.params, self.layout.beta_raw);
        g.softplus(r)
    }
}
