//! Slice embedding, positional lookup, and the three transformer stacks:
//! the visible encoder, the decoupled cross-attention encoder that predicts
//! masked positions, and the momentum-updated target encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::numeric::{Activation, Axis, Graph, ParamId, ParamSet, Tensor, Var};
use crate::slicing;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub visible_layers: usize,
    pub masked_layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub sigma: usize,
    pub channels: usize,
    pub max_slices: usize,
    pub activation: Activation,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            visible_layers: 4,
            masked_layers: 2,
            heads: 4,
            ffn_width: 128,
            sigma: 12,
            channels: 1,
            max_slices: 512,
            activation: Activation::Gelu,
            ln_eps: 1e-9,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.visible_layers == 0 || self.masked_layers == 0 {
            return bad("encoder depths must be at least 1".into());
        }
        if self.ffn_width == 0 || self.sigma == 0 || self.channels == 0 || self.max_slices == 0 {
            return bad("ffn_width, sigma, channels and max_slices must be positive".into());
        }
        if !(self.ln_eps > 0.0) || !(self.init_std >= 0.0) {
            return bad("ln_eps must be > 0 and init_std >= 0".into());
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 11] = [
        "d_model",
        "visible_layers",
        "masked_layers",
        "heads",
        "ffn_width",
        "sigma",
        "channels",
        "max_slices",
        "activation",
        "ln_eps",
        "init_std",
    ];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            d_model: kv.get("d_model", d.d_model)?,
            visible_layers: kv.get("visible_layers", d.visible_layers)?,
            masked_layers: kv.get("masked_layers", d.masked_layers)?,
            heads: kv.get("heads", d.heads)?,
            ffn_width: kv.get("ffn_width", d.ffn_width)?,
            sigma: kv.get("sigma", d.sigma)?,
            channels: kv.get("channels", d.channels)?,
            max_slices: kv.get("max_slices", d.max_slices)?,
            activation: kv.get("activation", d.activation)?,
            ln_eps: kv.get("ln_eps", d.ln_eps)?,
            init_std: kv.get("init_std", d.init_std)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Parameter handles of one post-norm transformer layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

const LAYER_FIELDS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1.gamma", "ln1.beta", "ffn.w1", "ffn.b1",
    "ffn.w2", "ffn.b2", "ln2.gamma", "ln2.beta",
];

impl LayerIds {
    fn shapes(c: &EncoderConfig) -> [Vec<usize>; 16] {
        let (d, f) = (c.d_model, c.ffn_width);
        [
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
            vec![d],
            vec![d],
        ]
    }

    fn from_ids(ids: [ParamId; 16]) -> Self {
        let [wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b] = ids;
        Self {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln1_g,
            ln1_b,
            w1,
            b1,
            w2,
            b2,
            ln2_g,
            ln2_b,
        }
    }

    pub fn as_array(&self) -> [ParamId; 16] {
        [
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo, self.ln1_g,
            self.ln1_b, self.w1, self.b1, self.w2, self.b2, self.ln2_g, self.ln2_b,
        ]
    }

    fn init(set: &mut ParamSet, prefix: &str, c: &EncoderConfig, rng: &mut ChaCha8Rng, frozen: bool) -> Self {
        let shapes = Self::shapes(c);
        let ids = std::array::from_fn(|i| {
            let name = format!("{prefix}.{}", LAYER_FIELDS[i]);
            let shape = &shapes[i];
            let t = if LAYER_FIELDS[i].ends_with("gamma") {
                Tensor::full(shape, 1.0)
            } else if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                Tensor::randn(shape, c.init_std, rng)
            };
            if frozen {
                set.insert_frozen(name, t)
            } else {
                set.insert(name, t)
            }
        });
        Self::from_ids(ids)
    }

    fn lookup(set: &ParamSet, prefix: &str, c: &EncoderConfig) -> Result<Self> {
        let shapes = Self::shapes(c);
        let mut ids = [ParamId(0); 16];
        for (i, field) in LAYER_FIELDS.iter().enumerate() {
            ids[i] = lookup_shaped(set, &format!("{prefix}.{field}"), &shapes[i])?;
        }
        Ok(Self::from_ids(ids))
    }
}

fn lookup_shaped(set: &ParamSet, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = set
        .id(name)
        .ok_or_else(|| Error::CheckpointCorrupt(format!("missing array `{name}`")))?;
    if set.get(id).shape() != shape {
        return Err(Error::CheckpointShape {
            name: name.to_string(),
            expected: shape.to_vec(),
            found: set.get(id).shape().to_vec(),
        });
    }
    Ok(id)
}

/// All encoder-side arrays plus typed handles into them.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub set: ParamSet,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub pos: ParamId,
    pub mask_token: ParamId,
    pub visible: Vec<LayerIds>,
    pub decoupled: Vec<LayerIds>,
    pub target: Vec<LayerIds>,
}

/// Whether a forward pass records gradients into the parameters it reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grad {
    Track,
    Stop,
}

fn bind(g: &mut Graph, id: ParamId, mode: Grad) -> Var {
    match mode {
        Grad::Track => g.param(id),
        Grad::Stop => g.param_detached(id),
    }
}

impl EncoderParams {
    /// Scaled-Gaussian weights, zero biases, unit norm gains; the target
    /// encoder starts as an exact copy of the visible encoder.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let conv_w = set.insert(
            "conv.weight",
            Tensor::randn(&[c.d_model, c.sigma * c.channels], c.init_std, &mut rng),
        );
        let conv_b = set.insert("conv.bias", Tensor::zeros(&[c.d_model]));
        let pos = set.insert("pos", Tensor::randn(&[c.max_slices, c.d_model], c.init_std, &mut rng));
        let mask_token = set.insert("mask_token", Tensor::randn(&[1, c.d_model], c.init_std, &mut rng));
        let visible: Vec<LayerIds> = (0..c.visible_layers)
            .map(|l| LayerIds::init(&mut set, &format!("visible.{l}"), c, &mut rng, false))
            .collect();
        let decoupled = (0..c.masked_layers)
            .map(|l| LayerIds::init(&mut set, &format!("decoupled.{l}"), c, &mut rng, false))
            .collect();
        let mut target = Vec::with_capacity(visible.len());
        for (l, layer) in visible.iter().enumerate() {
            let src = layer.as_array();
            let ids = std::array::from_fn(|i| {
                let t = set.get(src[i]).clone();
                set.insert_frozen(format!("target.{l}.{}", LAYER_FIELDS[i]), t)
            });
            target.push(LayerIds::from_ids(ids));
        }
        Ok(Self {
            set,
            conv_w,
            conv_b,
            pos,
            mask_token,
            visible,
            decoupled,
            target,
        })
    }

    /// Rebinds handles on a loaded set, validating every shape against `config`.
    pub fn from_set(config: &EncoderConfig, mut set: ParamSet) -> Result<Self> {
        config.validate()?;
        let c = config;
        let conv_w = lookup_shaped(&set, "conv.weight", &[c.d_model, c.sigma * c.channels])?;
        let conv_b = lookup_shaped(&set, "conv.bias", &[c.d_model])?;
        let pos = lookup_shaped(&set, "pos", &[c.max_slices, c.d_model])?;
        let mask_token = lookup_shaped(&set, "mask_token", &[1, c.d_model])?;
        let visible = (0..c.visible_layers)
            .map(|l| LayerIds::lookup(&set, &format!("visible.{l}"), c))
            .collect::<Result<Vec<_>>>()?;
        let decoupled = (0..c.masked_layers)
            .map(|l| LayerIds::lookup(&set, &format!("decoupled.{l}"), c))
            .collect::<Result<Vec<_>>>()?;
        let target = (0..c.visible_layers)
            .map(|l| LayerIds::lookup(&set, &format!("target.{l}"), c))
            .collect::<Result<Vec<_>>>()?;
        for layer in &target {
            for id in layer.as_array() {
                set.set_trainable(id, false);
            }
        }
        Ok(Self {
            set,
            conv_w,
            conv_b,
            pos,
            mask_token,
            visible,
            decoupled,
            target,
        })
    }

    /// `(target, visible)` handle pairs for the momentum update.
    pub fn twin_pairs(&self) -> impl Iterator<Item = (ParamId, ParamId)> + '_ {
        self.target
            .iter()
            .zip(&self.visible)
            .flat_map(|(t, v)| t.as_array().into_iter().zip(v.as_array()))
    }

    pub fn target_ids(&self) -> Vec<ParamId> {
        self.target.iter().flat_map(|l| l.as_array()).collect()
    }

    pub fn visible_ids(&self) -> Vec<ParamId> {
        self.visible.iter().flat_map(|l| l.as_array()).collect()
    }

    /// `ξ ← m·ξ + (1−m)·θ` elementwise.
    pub fn momentum_update(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::InvalidArgument(format!("momentum {m} outside [0, 1]")));
        }
        let pairs: Vec<_> = self.twin_pairs().collect();
        for (t, v) in pairs {
            let theta = self.set.get(v).clone();
            for (xi, th) in self.set.get_mut(t).data_mut().iter_mut().zip(theta.data()) {
                *xi = momentum_blend(*xi, *th, m);
            }
        }
        Ok(())
    }
}

/// One element of the momentum recursion.
#[inline]
pub fn momentum_blend(target: f64, online: f64, m: f64) -> f64 {
    m * target + (1.0 - m) * online
}

/// Output of one attention sublayer together with its per-head weight matrices.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Encoder stack bound to a configuration; stateless apart from the parameters.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl Encoders {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        let params = EncoderParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Maps `n` slices (row-major `n × σ × m`) to `n × d` via a width-σ, stride-σ convolution.
    pub fn embed_slices(&self, g: &mut Graph, slices: &[f64], mode: Grad) -> Result<Var> {
        let c = &self.config;
        let per = c.sigma * c.channels;
        if slices.is_empty() || slices.len() % per != 0 {
            return Err(Error::shape("embed_slices", &[slices.len()], &[per]));
        }
        let rows = slices.len() / c.channels;
        let input = g.constant(Tensor::new(vec![rows, c.channels], slices.to_vec())?);
        let w = bind(g, self.params.conv_w, mode);
        let b = bind(g, self.params.conv_b, mode);
        g.conv1d(input, w, b, c.sigma, c.sigma)
    }

    /// Adds the positional row of each slice's original index.
    pub fn add_positional(&self, g: &mut Graph, z: Var, positions: &[usize], mode: Grad) -> Result<Var> {
        let max = self.config.max_slices;
        if let Some(&p) = positions.iter().find(|&&p| p >= max) {
            return Err(Error::InvalidArgument(format!(
                "slice position {p} exceeds the positional table (max_slices = {max}); raise max_slices or the slice length"
            )));
        }
        let table = bind(g, self.params.pos, mode);
        let rows = g.gather_rows(table, positions)?;
        g.add(z, rows)
    }

    pub fn attention(
        &self,
        g: &mut Graph,
        queries: Var,
        context: Var,
        layer: &LayerIds,
        mode: Grad,
    ) -> Result<AttentionOutput> {
        let c = &self.config;
        let dh = c.head_dim();
        let p = |g: &mut Graph, id| bind(g, id, mode);
        let (wq, bq, wk, bk, wv, bv) = (
            p(g, layer.wq),
            p(g, layer.bq),
            p(g, layer.wk),
            p(g, layer.bk),
            p(g, layer.wv),
            p(g, layer.bv),
        );
        let q = g.linear(queries, wq, bq)?;
        let k = g.linear(context, wk, bk)?;
        let v = g.linear(context, wv, bv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(c.heads);
        let mut weights = Vec::with_capacity(c.heads);
        for h in 0..c.heads {
            let qh = g.narrow_cols(q, h * dh, dh)?;
            let kh = g.narrow_cols(k, h * dh, dh)?;
            let vh = g.narrow_cols(v, h * dh, dh)?;
            let scores = g.matmul_bt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let a = g.softmax(scores)?;
            weights.push(a);
            heads.push(g.matmul(a, vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat(&heads, Axis::Cols)?
        };
        let (wo, bo) = (p(g, layer.wo), p(g, layer.bo));
        let output = g.linear(joined, wo, bo)?;
        Ok(AttentionOutput { output, weights })
    }

    /// Attention then feedforward, each wrapped as `LayerNorm(x + sublayer(x))`.
    /// `context = None` gives self-attention.
    pub fn layer(&self, g: &mut Graph, x: Var, context: Option<Var>, layer: &LayerIds, mode: Grad) -> Result<Var> {
        let c = &self.config;
        let att = self.attention(g, x, context.unwrap_or(x), layer, mode)?;
        let r1 = g.add(x, att.output)?;
        let (g1, b1) = (bind(g, layer.ln1_g, mode), bind(g, layer.ln1_b, mode));
        let x1 = g.layer_norm(r1, g1, b1, c.ln_eps)?;
        let (w1, fb1, w2, fb2) = (
            bind(g, layer.w1, mode),
            bind(g, layer.b1, mode),
            bind(g, layer.w2, mode),
            bind(g, layer.b2, mode),
        );
        let h = g.linear(x1, w1, fb1)?;
        let h = g.activation(h, c.activation)?;
        let f = g.linear(h, w2, fb2)?;
        let r2 = g.add(x1, f)?;
        let (g2, b2) = (bind(g, layer.ln2_g, mode), bind(g, layer.ln2_b, mode));
        g.layer_norm(r2, g2, b2, c.ln_eps)
    }

    pub fn encode_visible(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.run_stack(g, z, &self.params.visible, Grad::Track)
    }

    /// Same architecture as the visible encoder, evaluated with the target
    /// weights and cut from the gradient record.
    pub fn encode_target(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.run_stack(g, z, &self.params.target, Grad::Stop)
    }

    fn run_stack(&self, g: &mut Graph, mut x: Var, layers: &[LayerIds], mode: Grad) -> Result<Var> {
        if g.value(x).rows() == 0 {
            return Err(Error::InvalidArgument("encoder input has no rows".into()));
        }
        for layer in layers {
            x = self.layer(g, x, None, layer, mode)?;
        }
        Ok(x)
    }

    /// Mask-token queries at the masked positions cross-attend to `h`.
    pub fn decode_masked(&self, g: &mut Graph, h: Var, masked_positions: &[usize]) -> Result<Var> {
        if masked_positions.is_empty() {
            return Err(Error::InvalidArgument("decode_masked needs at least one masked position".into()));
        }
        let token = g.param(self.params.mask_token);
        let tokens = g.gather_rows(token, &vec![0; masked_positions.len()])?;
        let mut q = self.add_positional(g, tokens, masked_positions, Grad::Track)?;
        for layer in &self.params.decoupled {
            q = self.layer(g, q, Some(h), layer, Grad::Track)?;
        }
        Ok(q)
    }

    /// Pooled temporal representation of a standardized series: every slice
    /// is visible, the visible encoder output is averaged over positions.
    pub fn extract_features(&self, series: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params.set);
        let pooled = self.pooled(&mut g, series, Grad::Stop)?;
        Ok(g.value(pooled).data().to_vec())
    }

    /// In-graph form of [`Encoders::extract_features`]; `1 × d`.
    pub fn pooled(&self, g: &mut Graph, series: &[f64], mode: Grad) -> Result<Var> {
        let c = &self.config;
        let batch = slicing::slice(series, c.channels, c.sigma)?;
        let positions: Vec<usize> = (0..batch.num_slices).collect();
        let z = self.embed_slices(g, &batch.slices, mode)?;
        let z = self.add_positional(g, z, &positions, mode)?;
        let h = self.run_stack(g, z, &self.params.visible, mode)?;
        g.mean_axis(h, Axis::Rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            visible_layers: 2,
            masked_layers: 1,
            heads: 2,
            ffn_width: 12,
            sigma: 3,
            channels: 1,
            max_slices: 16,
            init_std: 0.3,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.masked_layers = 0;
        assert!(c.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_slice_with_zero_bias_embeds_to_zero() {
        let enc = Encoders::new(tiny(), 1).unwrap();
        let mut g = Graph::new(&enc.params.set);
        let z = enc.embed_slices(&mut g, &[0.0; 3], Grad::Stop).unwrap();
        assert_eq!(g.value(z).shape(), &[1, 8]);
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_matches_explicit_dot_products() {
        let enc = Encoders::new(tiny(), 2).unwrap();
        let slices = [0.5, -1.0, 2.0, 3.0, 0.25, -0.75];
        let mut g = Graph::new(&enc.params.set);
        let z = enc.embed_slices(&mut g, &slices, Grad::Stop).unwrap();
        let w = enc.params.set.get(enc.params.conv_w);
        for s in 0..2 {
            for o in 0..8 {
                let expect: f64 = (0..3).map(|t| w.data()[o * 3 + t] * slices[s * 3 + t]).sum();
                assert!((g.value(z).data()[s * 8 + o] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn positional_rows_follow_original_index() {
        let mut enc = Encoders::new(tiny(), 3).unwrap();
        let mut g = Graph::new(&enc.params.set);
        let z = g.constant(Tensor::zeros(&[1, 8]));
        let out = enc.add_positional(&mut g, z, &[5], Grad::Stop).unwrap();
        assert_eq!(g.value(out).data(), enc.params.set.get(enc.params.pos).row(5));
        assert!(enc.add_positional(&mut g, z, &[16], Grad::Stop).is_err());
        drop(g);

        let pos = enc.params.pos;
        enc.params.set.set(pos, Tensor::zeros(&[16, 8])).unwrap();
        let mut g = Graph::new(&enc.params.set);
        let z = g.constant(Tensor::full(&[2, 8], 0.7));
        let out = enc.add_positional(&mut g, z, &[3, 9], Grad::Stop).unwrap();
        assert_eq!(g.value(out), g.value(z));
    }

    #[test]
    fn singleton_sequence_attends_with_weight_one() {
        let enc = Encoders::new(tiny(), 4).unwrap();
        let mut g = Graph::new(&enc.params.set);
        let x = g.constant(Tensor::full(&[1, 8], 0.3));
        let att = enc.attention(&mut g, x, x, &enc.params.visible[0], Grad::Stop).unwrap();
        for w in att.weights {
            assert_eq!(g.value(w).data(), &[1.0]);
        }
    }

    #[test]
    fn momentum_update_rules() {
        let mut enc = Encoders::new(tiny(), 5).unwrap();
        let before = enc.params.set.clone();
        enc.params.momentum_update(1.0).unwrap();
        assert_eq!(enc.params.set, before);
        assert!(enc.params.momentum_update(1.5).is_err());
        assert!(enc.params.momentum_update(-0.1).is_err());
        assert_eq!(momentum_blend(1.0, 0.0, 0.99), 0.99);
    }
}
