//! The forecasting network.
//!
//! * an embedder (causal dilated depthwise-separable conv stack) maps every
//!   step of a series to a `d`-vector; an EMA copy of it produces targets;
//! * a learned query pools each context series to one vector;
//! * the predictor encodes the pooled context as a set and decodes the
//!   held-out prompt tokens, each attending only to itself and the context;
//! * a decoder MLP turns (gradient-stopped) latent predictions into a
//!   categorical distribution over value bins;
//! * a regression head predicts the generating parameters of each held-out
//!   series from its pooled latents.

pub mod si;

mod layers;
mod params;

use latpfn_autodiff::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{BinSpec, ContextBatch, FEATURES};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, INIT_STREAM};
use layers::{layer_norm, Attention, DiagonalSelfAttention, Ffn, Linear};
use params::Init;
pub use params::{Bound, Group, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub embed_layers: usize,
    pub kernel: usize,
    /// Hidden width of the pointwise part of an embedder block, in multiples
    /// of `width`.
    pub expansion: usize,
    pub predictor_layers: usize,
    pub decoder_layers: usize,
    pub si_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub bins: BinSpec,
    pub label_smoothing: f64,
    pub lambda_latent: f64,
    pub lambda_si: f64,
    pub si_targets: usize,
    /// Input values are clamped to `[-input_clip, input_clip]`.
    pub input_clip: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            embed_layers: 8,
            kernel: 3,
            expansion: 1,
            predictor_layers: 3,
            decoder_layers: 3,
            si_layers: 2,
            heads: 4,
            ffn_mult: 2,
            bins: BinSpec::default(),
            label_smoothing: 0.01,
            lambda_latent: 3.77e-3,
            lambda_si: 1e-7,
            si_targets: si::SI_TARGETS,
            input_clip: 10.0,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        for (name, v) in [
            ("embed_layers", self.embed_layers),
            ("kernel", self.kernel),
            ("expansion", self.expansion),
            ("predictor_layers", self.predictor_layers),
            ("decoder_layers", self.decoder_layers),
            ("si_layers", self.si_layers),
            ("ffn_mult", self.ffn_mult),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if !(self.lambda_latent >= 0.0 && self.lambda_si >= 0.0) {
            return bad("loss weights must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} not in [0, 1)", self.label_smoothing));
        }
        if self.si_targets != si::SI_TARGETS && self.si_targets != si::SI_TARGETS + 1 {
            return bad(format!("si_targets must be 9 or 10, got {}", self.si_targets));
        }
        if self.bins.count < 2 || !(self.bins.lo < self.bins.hi) {
            return bad("bins need count >= 2 and lo < hi".into());
        }
        if !(self.input_clip > 0.0) {
            return bad("input_clip must be > 0".into());
        }
        Ok(())
    }

    /// Dilation of embedder block `l`.
    pub fn dilation(&self, l: usize) -> usize {
        1 << l
    }
}

#[derive(Clone, Debug)]
struct Block {
    dw: ParamId,
    dw_b: ParamId,
    pw1: Linear,
    pw2: Linear,
    dilation: usize,
}

#[derive(Clone, Debug)]
struct Embedder {
    input: Linear,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: Attention,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    diag: DiagonalSelfAttention,
    cross: Attention,
    ffn: Ffn,
}

/// Stacked model inputs for `B` context batches of one shape.
#[derive(Clone, Debug)]
pub struct Inputs<T> {
    pub b: usize,
    pub n: usize,
    pub n_h: usize,
    pub s: usize,
    pub h: usize,
    /// `[B*N, S, 3]`.
    pub context: Tensor<T>,
    /// `[B*N_h, S, 3]`, horizon values hidden.
    pub prompt: Tensor<T>,
    /// `[B*N_h, S, 3]`, horizon values visible.
    pub target: Tensor<T>,
    /// Bin of every target value, `B*N_h*H` entries.
    pub bins: Vec<usize>,
    /// `[B*N_h, K]`.
    pub si: Option<Tensor<T>>,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Context step embeddings `[B*N, S, d]`.
    pub d_bar: Var,
    /// Pooled context `[B, N, d]`.
    pub eta: Var,
    /// Prompt step embeddings `[B*N_h, S, d]`.
    pub z_bar: Var,
    /// Held-out history embeddings `[B*N_h, S-H, d]`.
    pub x_bar: Var,
    /// Latent prediction `[B*N_h, H, d]`.
    pub y_hat: Var,
    /// Latent target `[B*N_h, H, d]`.
    pub y_bar: Option<Var>,
    /// `[B*N_h*H, bins]`.
    pub logits: Var,
    /// `[B*N_h, K]`.
    pub si_pred: Option<Var>,
    pub latent_loss: Option<Var>,
    pub si_loss: Option<Var>,
    pub main_loss: Option<Var>,
    pub decoder_loss: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Shadow values of the embedder parameters, aligned with
    /// [`Model::embedder_ids`].
    pub ema: Vec<Tensor<f32>>,
    embedder_ids: Vec<ParamId>,
    embedder: Embedder,
    query: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    out: Linear,
    head: Vec<Linear>,
    si_head: Vec<Linear>,
}

fn mlp(init: &mut Init, name: &str, dims: &[usize], group: Group) -> Vec<Linear> {
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| Linear::new(init, &format!("{name}.{i}"), w[0], w[1], true, group))
        .collect()
}

fn mlp_forward<T: Real>(g: &mut Graph<T>, p: &Bound, layers: &[Linear], x: Var) -> latpfn_autodiff::Result<Var> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        h = l.forward(g, p, h)?;
        if i + 1 < layers.len() {
            h = g.gelu(h);
        }
    }
    Ok(h)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let mut store = ParamStore::default();
        let mut rng = stream_rng(seed, INIT_STREAM);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let e = Group::Embedder;
        let input = Linear::new(&mut init, "embed.input", FEATURES, d, true, e);
        let blocks = (0..config.embed_layers)
            .map(|l| Block {
                dw: init.normal(
                    format!("embed.{l}.dw"),
                    &[config.kernel, d],
                    (1.0 / config.kernel as f64).sqrt(),
                    e,
                ),
                dw_b: init.zeros(format!("embed.{l}.dw_b"), &[d], e),
                pw1: Linear::new(&mut init, &format!("embed.{l}.pw1"), d, d * config.expansion, true, e),
                pw2: Linear::new(&mut init, &format!("embed.{l}.pw2"), d * config.expansion, d, true, e),
                dilation: config.dilation(l),
            })
            .collect();
        let query = init.zeros("pool.query".into(), &[d, 1], Group::Pool);
        let pr = Group::Predictor;
        let hidden = d * config.ffn_mult;
        let encoder = (0..config.predictor_layers)
            .map(|l| EncoderLayer {
                attn: Attention::new(&mut init, &format!("enc.{l}.attn"), d, config.heads, pr),
                ffn: Ffn::new(&mut init, &format!("enc.{l}.ffn"), d, hidden, pr),
            })
            .collect();
        let decoder = (0..config.predictor_layers)
            .map(|l| DecoderLayer {
                diag: DiagonalSelfAttention::new(&mut init, &format!("dec.{l}.self"), d, pr),
                cross: Attention::new(&mut init, &format!("dec.{l}.cross"), d, config.heads, pr),
                ffn: Ffn::new(&mut init, &format!("dec.{l}.ffn"), d, hidden, pr),
            })
            .collect();
        let out = Linear::new(&mut init, "dec.out", d, d, true, pr);
        let mut dims = vec![d; config.decoder_layers];
        dims.push(config.bins.count);
        let head = mlp(&mut init, "head", &dims, Group::Decoder);
        let mut dims = vec![2 * d];
        dims.extend(std::iter::repeat_n(d, config.si_layers - 1));
        dims.push(config.si_targets);
        let si_head = mlp(&mut init, "si", &dims, Group::Si);

        let embedder_ids = store.ids(|g| g == Group::Embedder);
        let ema = embedder_ids.iter().map(|&i| store.get(i).clone()).collect();
        Ok(Self {
            config,
            params: store,
            ema,
            embedder_ids,
            embedder: Embedder { input, blocks },
            query,
            encoder,
            decoder,
            out,
            head,
            si_head,
        })
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn embedder_ids(&self) -> &[ParamId] {
        &self.embedder_ids
    }

    /// Online parameters as trainable leaves.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>) -> Bound {
        Bound::new(g, &self.params, true)
    }

    /// Online parameters as constants.
    pub fn bind_frozen<T: Real>(&self, g: &mut Graph<T>) -> Bound {
        Bound::new(g, &self.params, false)
    }

    /// `online` with every embedder parameter swapped for its EMA shadow,
    /// registered as a constant.
    pub fn bind_ema<T: Real>(&self, g: &mut Graph<T>, online: &Bound) -> Bound {
        let mut vars = online.vars.clone();
        for (k, &id) in self.embedder_ids.iter().enumerate() {
            vars[id] = g.constant(self.ema[k].cast::<T>());
        }
        Bound { vars }
    }

    /// `shadow <- m * shadow + (1 - m) * online`.
    pub fn ema_update(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::Config(format!("EMA decay {m} not in [0, 1]")));
        }
        let (a, b) = (m as f32, (1.0 - m) as f32);
        for (k, &id) in self.embedder_ids.iter().enumerate() {
            let online = self.params.get(id).data();
            for (s, &o) in self.ema[k].data_mut().iter_mut().zip(online) {
                *s = a * *s + b * o;
            }
        }
        Ok(())
    }

    /// Stacks batches of one shape into model inputs.
    pub fn inputs<T: Real>(&self, batches: &[ContextBatch]) -> Result<Inputs<T>> {
        let first = batches.first().ok_or_else(|| Error::Shape("no batches".into()))?;
        let (n, n_h, s, h) = (first.n(), first.n_h(), first.s(), first.h());
        let mut context = Vec::with_capacity(batches.len() * n * s * FEATURES);
        let mut prompt = Vec::with_capacity(batches.len() * n_h * s * FEATURES);
        let mut target = Vec::with_capacity(prompt.capacity());
        let mut bins = Vec::with_capacity(batches.len() * n_h * h);
        let mut si = Vec::new();
        let all_si = batches.iter().all(|b| b.si_target.is_some());
        let clip = self.config.input_clip;
        let push = |dst: &mut Vec<T>, src: &[f32]| {
            dst.extend(src.chunks(FEATURES).flat_map(|f| {
                [
                    T::c(f[0] as f64),
                    T::c((f[1] as f64).clamp(-clip, clip)),
                    T::c(f[2] as f64),
                ]
            }))
        };
        for b in batches {
            if (b.n(), b.n_h(), b.s(), b.h()) != (n, n_h, s, h) {
                return Err(Error::Shape(format!(
                    "batch shape (N={}, N_h={}, S={}, H={}) differs from (N={n}, N_h={n_h}, S={s}, H={h})",
                    b.n(),
                    b.n_h(),
                    b.s(),
                    b.h()
                )));
            }
            push(&mut context, b.context.data());
            push(&mut prompt, b.prompt_features()?.data());
            push(&mut target, b.target_features()?.data());
            for &v in b.target.data() {
                bins.push(self.config.bins.index(v as f64)?);
            }
            if all_si {
                let t = b.si_target.as_ref().expect("checked");
                if t.shape() != [n_h, self.config.si_targets] {
                    return Err(Error::Shape(format!(
                        "si targets {:?}, model expects [{n_h}, {}]",
                        t.shape(),
                        self.config.si_targets
                    )));
                }
                si.extend(t.data().iter().map(|&x| T::c(x as f64)));
            }
        }
        let nb = batches.len();
        Ok(Inputs {
            b: nb,
            n,
            n_h,
            s,
            h,
            context: Tensor::new(&[nb * n, s, FEATURES], context)?,
            prompt: Tensor::new(&[nb * n_h, s, FEATURES], prompt)?,
            target: Tensor::new(&[nb * n_h, s, FEATURES], target)?,
            bins,
            si: if all_si {
                Some(Tensor::new(&[nb * n_h, self.config.si_targets], si)?)
            } else {
                None
            },
        })
    }

    /// Step embeddings `[M, S, d]` of features `[M, S, 3]`.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, p: &Bound, feats: Var) -> Result<Var> {
        let shape = g.shape(feats);
        if shape.len() != 3 || shape[2] != FEATURES {
            return Err(Error::Shape(format!(
                "embedder expects [M, S, {FEATURES}], got {shape:?}"
            )));
        }
        let eps = self.config.ln_eps;
        let mut h = self.embedder.input.forward(g, p, feats)?;
        for blk in &self.embedder.blocks {
            let u = g.depthwise_conv1d(h, p.get(blk.dw), blk.dilation)?;
            let u = g.add(u, p.get(blk.dw_b))?;
            let u = blk.pw1.forward(g, p, u)?;
            let u = g.gelu(u);
            let u = blk.pw2.forward(g, p, u)?;
            let r = g.add(h, u)?;
            h = layer_norm(g, r, eps)?;
        }
        Ok(h)
    }

    /// Learned-query attention pooling over the step axis: `[M, S, d] -> [M, d]`.
    pub fn pool<T: Real>(&self, g: &mut Graph<T>, p: &Bound, emb: Var) -> Result<Var> {
        let s = g.shape(emb).to_vec();
        let scores = g.matmul(emb, p.get(self.query))?;
        let scores = g.scale(scores, T::c(1.0 / (s[2] as f64).sqrt()));
        let w = g.softmax(scores, 1)?;
        let w = g.transpose(w)?;
        let pooled = g.bmm(w, emb, false)?;
        Ok(g.reshape(pooled, &[s[0], s[2]])?)
    }

    /// Latent target: EMA embedding of the unmasked held-out series, horizon
    /// steps only, gradient-stopped.
    pub fn embed_target<T: Real>(&self, g: &mut Graph<T>, ema: &Bound, target: Var, h: usize) -> Result<Var> {
        let full = self.embed(g, ema, target)?;
        let s = g.shape(full)[1];
        let sel = g.narrow(full, 1, s - h, h)?;
        Ok(g.stop_gradient(sel))
    }

    /// Runs the predictor. `z_bar [B*N_h, S, d]`, `eta [B, N, d]`;
    /// returns `[B*N_h, H, d]`.
    pub fn predict<T: Real>(&self, g: &mut Graph<T>, p: &Bound, z_bar: Var, eta: Var, h: usize) -> Result<Var> {
        let eps = self.config.ln_eps;
        let zs = g.shape(z_bar).to_vec();
        let es = g.shape(eta).to_vec();
        let (b, d) = (es[0], es[2]);
        if zs[0] % b != 0 || zs[2] != d {
            return Err(Error::Shape(format!("prompt {zs:?} incompatible with context {es:?}")));
        }
        let n_h = zs[0] / b;

        let mut c = eta;
        for layer in &self.encoder {
            let x = layer_norm(g, c, eps)?;
            let a = layer.attn.forward(g, p, x, x)?;
            c = g.add(c, a)?;
            let x = layer_norm(g, c, eps)?;
            let f = layer.ffn.forward(g, p, x)?;
            c = g.add(c, f)?;
        }
        let c = layer_norm(g, c, eps)?;

        // Under the diagonal mask history tokens never influence horizon
        // tokens, so only the horizon tokens are decoded.
        let t = g.narrow(z_bar, 1, zs[1] - h, h)?;
        let mut t = g.reshape(t, &[b, n_h * h, d])?;
        for layer in &self.decoder {
            let x = layer_norm(g, t, eps)?;
            let a = layer.diag.forward(g, p, x)?;
            t = g.add(t, a)?;
            let x = layer_norm(g, t, eps)?;
            let a = layer.cross.forward(g, p, x, c)?;
            t = g.add(t, a)?;
            let x = layer_norm(g, t, eps)?;
            let f = layer.ffn.forward(g, p, x)?;
            t = g.add(t, f)?;
        }
        let t = layer_norm(g, t, eps)?;
        let y = self.out.forward(g, p, t)?;
        Ok(g.reshape(y, &[b * n_h, h, d])?)
    }

    /// Bin logits `[B*N_h*H, bins]` from gradient-stopped latent predictions.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, y_hat: Var) -> Result<Var> {
        let s = g.shape(y_hat).to_vec();
        let x = g.stop_gradient(y_hat);
        let x = g.reshape(x, &[s[0] * s[1], s[2]])?;
        Ok(mlp_forward(g, p, &self.head, x)?)
    }

    /// Parameter regression from pooled `[x_bar ; y_hat]` and the mean pooled
    /// context. Returns `[B*N_h, K]`.
    pub fn si_forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, y_hat: Var, x_bar: Var, eta: Var) -> Result<Var> {
        let seq = g.concat(&[x_bar, y_hat], 1)?;
        let pooled = self.pool(g, p, seq)?;
        let rows = g.shape(pooled)[0];
        let b = g.shape(eta)[0];
        let ctx = g.mean_axis(eta, 1, false)?;
        let n_h = rows / b;
        let idx: Vec<usize> = (0..rows).map(|r| r / n_h).collect();
        let ctx = g.index_select(ctx, 0, &idx)?;
        let x = g.concat(&[pooled, ctx], 1)?;
        Ok(mlp_forward(g, p, &self.si_head, x)?)
    }

    /// Full forward pass. When `ema` is given the latent target and all
    /// losses are built as well.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, ema: Option<&Bound>, x: &Inputs<T>) -> Result<Forward> {
        let d = self.width();
        let ctx = g.constant(x.context.clone());
        let d_bar = self.embed(g, p, ctx)?;
        let eta = self.pool(g, p, d_bar)?;
        let eta = g.reshape(eta, &[x.b, x.n, d])?;
        let prompt = g.constant(x.prompt.clone());
        let z_bar = self.embed(g, p, prompt)?;
        let x_bar = g.narrow(z_bar, 1, 0, x.s - x.h)?;
        let y_hat = self.predict(g, p, z_bar, eta, x.h)?;
        let logits = self.decode(g, p, y_hat)?;

        let mut out = Forward {
            d_bar,
            eta,
            z_bar,
            x_bar,
            y_hat,
            y_bar: None,
            logits,
            si_pred: None,
            latent_loss: None,
            si_loss: None,
            main_loss: None,
            decoder_loss: None,
        };
        let Some(ema) = ema else { return Ok(out) };

        let target = g.constant(x.target.clone());
        let y_bar = self.embed_target(g, ema, target, x.h)?;
        let latent = g.mse(y_hat, y_bar)?;
        let mut main = g.scale(latent, T::c(self.config.lambda_latent));
        if let Some(si_t) = &x.si {
            let pred = self.si_forward(g, p, y_hat, x_bar, eta)?;
            let t = g.constant(si_t.clone());
            let l = g.mse(pred, t)?;
            let w = g.scale(l, T::c(self.config.lambda_si));
            main = g.add(main, w)?;
            out.si_pred = Some(pred);
            out.si_loss = Some(l);
        }
        let dec = g.cross_entropy_smoothed(logits, &x.bins, T::c(self.config.label_smoothing))?;
        out.y_bar = Some(y_bar);
        out.latent_loss = Some(latent);
        out.main_loss = Some(main);
        out.decoder_loss = Some(dec);
        Ok(out)
    }

    /// SI loss against explicit targets; fails when none are available.
    pub fn si_loss<T: Real>(&self, g: &mut Graph<T>, pred: Var, targets: Option<&Tensor<T>>) -> Result<Var> {
        let t = targets.ok_or_else(|| {
            Error::Data("system identification needs generating parameters; real-data batches have none".into())
        })?;
        let t = g.constant(t.clone());
        Ok(g.mse(pred, t)?)
    }

    /// Fixed-length summary of a window `[S, 3]`: pooled step embeddings.
    pub fn summary_embed(&self, feats: &Tensor<f32>) -> Result<Vec<f32>> {
        let steps = feats.shape()[0];
        let mut g = Graph::<f32>::new();
        let p = self.bind_frozen(&mut g);
        let x = g.constant(feats.clone().reshape(&[1, steps, FEATURES])?);
        let e = self.embed(&mut g, &p, x)?;
        let v = self.pool(&mut g, &p, e)?;
        Ok(g.value(v).data().to_vec())
    }

    /// Per-step embeddings `[S, d]` of a window `[S, 3]`.
    pub fn step_embeddings(&self, feats: &Tensor<f32>) -> Result<Tensor<f32>> {
        let steps = feats.shape()[0];
        let mut g = Graph::<f32>::new();
        let p = self.bind_frozen(&mut g);
        let x = g.constant(feats.clone().reshape(&[1, steps, FEATURES])?);
        let e = self.embed(&mut g, &p, x)?;
        Ok(g.value(e).clone().reshape(&[steps, self.width()])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{generate_context_batch, BatchShape, HyperPrior};
    use crate::rng::stream_rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            width: 8,
            embed_layers: 3,
            predictor_layers: 1,
            heads: 2,
            ..ModelConfig::default()
        }
    }

    fn batches(shape: BatchShape, count: usize, seed: u64) -> Vec<ContextBatch> {
        let hp = HyperPrior::default();
        let mut rng = stream_rng(seed, 0);
        (0..count)
            .map(|_| generate_context_batch(&hp, shape, 9, &mut rng).unwrap().batch)
            .collect()
    }

    const SHAPE: BatchShape = BatchShape {
        n: 3,
        n_h: 2,
        s: 16,
        h: 4,
    };

    #[test]
    fn shapes_through_the_network() {
        let m = Model::new(tiny(), 1).unwrap();
        let bs = batches(SHAPE, 2, 1);
        let x = m.inputs::<f32>(&bs).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let e = m.bind_ema(&mut g, &p);
        let f = m.forward(&mut g, &p, Some(&e), &x).unwrap();
        assert_eq!(g.shape(f.d_bar), &[6, 16, 8]);
        assert_eq!(g.shape(f.eta), &[2, 3, 8]);
        assert_eq!(g.shape(f.y_hat), &[4, 4, 8]);
        assert_eq!(g.shape(f.y_bar.unwrap()), &[4, 4, 8]);
        assert_eq!(g.shape(f.logits), &[16, 100]);
        assert_eq!(g.shape(f.si_pred.unwrap()), &[4, 9]);
        assert!(g.value(f.main_loss.unwrap()).item().is_finite());
    }

    #[test]
    fn embed_rejects_wrong_feature_count() {
        let m = Model::new(tiny(), 1).unwrap();
        let mut g = Graph::<f32>::new();
        let p = m.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 5, 2]));
        assert!(m.embed(&mut g, &p, x).is_err());
    }

    #[test]
    fn target_equals_online_embedding_at_init() {
        let m = Model::new(tiny(), 2).unwrap();
        let x = m.inputs::<f32>(&batches(SHAPE, 1, 2)).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let e = m.bind_ema(&mut g, &p);
        let t = g.constant(x.target.clone());
        let y_bar = m.embed_target(&mut g, &e, t, x.h).unwrap();
        let online = m.embed(&mut g, &p, t).unwrap();
        let sel = g.narrow(online, 1, x.s - x.h, x.h).unwrap();
        assert_eq!(g.value(y_bar), g.value(sel));
    }

    #[test]
    fn pooling_identical_steps_returns_the_step() {
        let m = Model::new(tiny(), 3).unwrap();
        let mut g = Graph::<f64>::new();
        let mut p = m.bind(&mut g);
        p.vars[m.query] = g.constant(Tensor::from_fn(&[8, 1], |i| i as f64 - 3.0));
        let row: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let emb = g.constant(Tensor::from_fn(&[2, 5, 8], |i| row[i % 8]));
        let v = m.pool(&mut g, &p, emb).unwrap();
        for (k, &x) in g.value(v).data().iter().enumerate() {
            assert!((x - row[k % 8]).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_block_equals_masked_full_attention() {
        let m = Model::new(tiny(), 4).unwrap();
        let layer = &m.decoder[0].diag;
        let mut g = Graph::<f64>::new();
        let p = m.bind(&mut g);
        let mut rng = stream_rng(4, 1);
        use rand::Rng as _;
        let x = g.constant(Tensor::from_fn(&[1, 5, 8], |_| rng.random_range(-1.0..1.0)));
        let q = g.constant(Tensor::from_fn(&[1, 5, 8], |_| rng.random_range(-1.0..1.0)));
        let diag = layer.forward(&mut g, &p, x).unwrap();
        let v = layer.v.forward(&mut g, &p, x).unwrap();
        let mask = g.constant(Tensor::from_fn(&[5, 5], |i| if i / 5 == i % 5 { 0.0 } else { -1e30 }));
        let a = g.scaled_dot_attention(q, q, v, Some(mask)).unwrap();
        let full = layer.o.forward(&mut g, &p, a).unwrap();
        assert!(g.value(diag).max_abs_diff(g.value(full)) < 1e-12);
    }

    #[test]
    fn ema_update_arithmetic() {
        let mut m = Model::new(tiny(), 5).unwrap();
        let before = m.ema.clone();
        for &id in m.embedder_ids.clone().iter() {
            let shape = m.params.get(id).shape().to_vec();
            m.params.set(id, Tensor::zeros(&shape)).unwrap();
        }
        m.ema_update(1.0).unwrap();
        assert_eq!(m.ema, before);
        for t in &mut m.ema {
            *t = Tensor::ones(t.shape());
        }
        m.ema_update(0.9952).unwrap();
        assert!(m
            .ema
            .iter()
            .all(|t| t.data().iter().all(|&v| (v - 0.9952).abs() < 1e-7)));
        m.ema_update(0.0).unwrap();
        assert!(m.ema.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(m.ema_update(1.5).is_err());
    }

    #[test]
    fn si_loss_requires_targets() {
        let m = Model::new(tiny(), 6).unwrap();
        let mut g = Graph::<f32>::new();
        let pred = g.constant(Tensor::zeros(&[2, 9]));
        assert!(m.si_loss(&mut g, pred, None).is_err());
        let t = Tensor::zeros(&[2, 9]);
        let l = m.si_loss(&mut g, pred, Some(&t)).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig {
            width: 10,
            heads: 4,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            si_targets: 8,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            lambda_si: -1.0,
            ..tiny()
        }
        .validate()
        .is_err());
        let d = ModelConfig::default();
        assert_eq!(
            (d.embed_layers, d.predictor_layers, d.decoder_layers, d.si_layers),
            (8, 3, 3, 2)
        );
        assert_eq!(d.lambda_latent, 3.77e-3);
        assert_eq!(d.label_smoothing, 0.01);
        assert_eq!((0..8).map(|l| d.dilation(l)).last(), Some(128));
    }
}
