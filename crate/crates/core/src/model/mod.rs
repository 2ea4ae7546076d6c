//! Spiking Transformer with selectable positional encoding.
//!
//! Rows on the tape are time-major: row `t * B * L + b * L + l` holds
//! position `l` of sample `b` at time-step `t`.

mod train;
mod weights;

pub use train::{evaluate, train, Adam, EpochRecord, TrainConfig, TrainHistory};
pub use weights::{load_weights, save_weights, weights_from_bytes, weights_to_bytes, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use std::fmt;

use ndarray::{Array2, Array3, ArrayD, ArrayView3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::attention::{log_pe_bias, Grid2D, PositionalScheme};
use crate::bitcodec::min_width_for_length;
use crate::error::{config_err, dim_err, Result};
use crate::neuron::{LifParams, Surrogate};
use crate::tensor::{AttentionSpec, BatchNormState, DiffTensor, ParamId, ParamStore, Tape, Var};

/// Positional encoding used by every attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeVariant {
    /// XNOR scores, no positional term.
    None,
    Gray,
    Gray2d,
    Log,
    Crpe,
    /// Dot-product scores, no positional term.
    DotBaseline,
}

impl PeVariant {
    pub const ALL: [PeVariant; 6] = [Self::None, Self::Gray, Self::Gray2d, Self::Log, Self::Crpe, Self::DotBaseline];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Gray => "gray",
            Self::Gray2d => "gray2d",
            Self::Log => "log",
            Self::Crpe => "crpe",
            Self::DotBaseline => "dot-baseline",
        }
    }
}

impl fmt::Display for PeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PeVariant {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| config_err(format!("unknown positional encoding {s:?}")))
    }
}

/// Attention scale: `1/sqrt(width)` by default, a fixed value, or learned.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum SigmaSetting {
    #[default]
    Default,
    Fixed(f64),
    Learnable,
}

impl Serialize for SigmaSetting {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Default => s.serialize_str("default"),
            Self::Learnable => s.serialize_str("learnable"),
            Self::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for SigmaSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Self::Fixed(v)),
            Raw::Word(w) if w == "default" => Ok(Self::Default),
            Raw::Word(w) if w == "learnable" => Ok(Self::Learnable),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "sigma must be a number, \"default\" or \"learnable\", got {w:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Head {
    Classification { classes: usize },
    Regression { channels: usize, horizon: usize },
}

impl Head {
    pub fn outputs(&self) -> usize {
        match *self {
            Self::Classification { classes } => classes,
            Self::Regression { channels, horizon } => channels * horizon,
        }
    }
}

/// How the head reads the per-position mean spike rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    /// Rates at the last position.
    Last,
    /// Rates of every position, concatenated.
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub steps: usize,
    pub seq_len: usize,
    pub features: usize,
    pub pe: PeVariant,
    /// Gray word width; defaults to the smallest width covering `seq_len`.
    #[serde(default)]
    pub gray_bits: Option<u32>,
    /// Patch grid for `gray2d`.
    #[serde(default)]
    pub grid: Option<Grid2D>,
    #[serde(default)]
    pub gray_bits_h: Option<u32>,
    #[serde(default)]
    pub gray_bits_w: Option<u32>,
    #[serde(default)]
    pub sigma: SigmaSetting,
    pub head: Head,
    /// Defaults to `last` for classification and `flatten` for regression.
    #[serde(default)]
    pub readout: Option<Readout>,
    #[serde(default)]
    pub lif: LifParams,
    #[serde(default = "default_alpha")]
    pub surrogate_alpha: f64,
}

fn default_alpha() -> f64 {
    Surrogate::default().alpha
}

impl ModelConfig {
    /// Two blocks, `D = 32`, hidden width 64 and four time-steps.
    pub fn small(seq_len: usize, features: usize, pe: PeVariant, head: Head) -> Self {
        Self {
            blocks: 2,
            d_model: 32,
            d_ffn: 64,
            steps: 4,
            seq_len,
            features,
            pe,
            gray_bits: None,
            grid: None,
            gray_bits_h: None,
            gray_bits_w: None,
            sigma: SigmaSetting::Default,
            head,
            readout: None,
            lif: LifParams::default(),
            surrogate_alpha: default_alpha(),
        }
    }

    pub fn readout(&self) -> Readout {
        self.readout.unwrap_or(match self.head {
            Head::Classification { .. } => Readout::Last,
            Head::Regression { .. } => Readout::Flatten,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("blocks", self.blocks),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("steps", self.steps),
            ("seq_len", self.seq_len),
            ("features", self.features),
            ("head outputs", self.head.outputs()),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(config_err(format!("{name} must be positive")));
        }
        self.lif.validate()?;
        Surrogate::new(self.surrogate_alpha)?;
        if let SigmaSetting::Fixed(s) = self.sigma {
            if !(s.is_finite() && s >= 0.0) {
                return Err(config_err(format!("sigma must be a non-negative number, got {s}")));
            }
        }
        self.scheme().map(|_| ())
    }

    /// Attention scheme for this configuration.
    pub fn scheme(&self) -> Result<PositionalScheme> {
        let l = self.seq_len;
        Ok(match self.pe {
            PeVariant::None => PositionalScheme::Xnor,
            PeVariant::DotBaseline => PositionalScheme::Dot,
            PeVariant::Gray => {
                let bits = self.gray_bits.unwrap_or_else(|| min_width_for_length(l));
                if bits == 0 || bits > 32 || (1u64 << bits) < l as u64 {
                    return Err(config_err(format!("gray PE needs 2^b >= L, got b={bits}, L={l}")));
                }
                PositionalScheme::Gray { bits }
            }
            PeVariant::Gray2d => {
                let grid = self.grid.ok_or_else(|| config_err("gray2d PE needs a grid"))?;
                if grid.len() != l {
                    return Err(config_err(format!("grid {}x{} does not cover L={l}", grid.h, grid.w)));
                }
                let bh = self.gray_bits_h.unwrap_or_else(|| min_width_for_length(grid.h));
                let bw = self.gray_bits_w.unwrap_or_else(|| min_width_for_length(grid.w));
                if (1u64 << bh) < grid.h as u64 || (1u64 << bw) < grid.w as u64 {
                    return Err(config_err("gray2d bit widths do not cover the grid"));
                }
                PositionalScheme::Gray2d { grid, bits_h: bh, bits_w: bw }
            }
            PeVariant::Log => {
                if l < 2 {
                    return Err(config_err("log PE needs L >= 2"));
                }
                PositionalScheme::Log { bias: log_pe_bias(l)? }
            }
            PeVariant::Crpe => {
                if l < 2 {
                    return Err(config_err("complete RPE needs L >= 2"));
                }
                PositionalScheme::CompleteRpe
            }
        })
    }

    /// Initial attention scale.
    pub fn sigma_value(&self) -> Result<f64> {
        Ok(match self.sigma {
            SigmaSetting::Fixed(s) => s,
            _ => 1.0 / (self.scheme()?.effective_width(self.d_model) as f64).sqrt(),
        })
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("plain struct");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    wq: ParamId,
    bn_q: BatchNormState,
    wk: ParamId,
    bn_k: BatchNormState,
    wv: ParamId,
    bn_v: BatchNormState,
    wo: ParamId,
    bn_o: BatchNormState,
    w1: ParamId,
    bn_1: BatchNormState,
    w2: ParamId,
    bn_2: BatchNormState,
}

/// Tape handles produced by one forward pass.
pub struct ForwardOutput {
    /// Logits or forecasts, `[batch, outputs]`.
    pub output: Var,
    /// Mean spike rate of the last block, `[batch * L, D]`.
    pub rates: Var,
    /// Attention output of each block (the node also holds the score maps).
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    scheme: PositionalScheme,
    store: ParamStore,
    w_emb: ParamId,
    bn_emb: BatchNormState,
    blocks: Vec<Block>,
    w_head: ParamId,
    b_head: ParamId,
    log_sigma: Option<ParamId>,
    sigma: f64,
}

fn uniform_matrix(store: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
    let bound = 1.0 / (rows as f64).sqrt();
    let m = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound));
    store.insert(name, DiffTensor::from_matrix(m, true))
}

impl Model {
    /// Builds a model with weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let scheme = config.scheme()?;
        let sigma = config.sigma_value()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, h) = (config.d_model, config.d_ffn);
        let w_emb = uniform_matrix(&mut store, "embed.w".into(), config.features, d, &mut rng);
        let bn_emb = BatchNormState::new(&mut store, "embed.bn", d);
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let mut lin = |store: &mut ParamStore, name: &str, r, c| {
                let id = uniform_matrix(store, format!("block{i}.{name}.w"), r, c, &mut rng);
                let bn = BatchNormState::new(store, &format!("block{i}.{name}.bn"), c);
                (id, bn)
            };
            let (wq, bn_q) = lin(&mut store, "q", d, d);
            let (wk, bn_k) = lin(&mut store, "k", d, d);
            let (wv, bn_v) = lin(&mut store, "v", d, d);
            let (wo, bn_o) = lin(&mut store, "o", d, d);
            let (w1, bn_1) = lin(&mut store, "ffn1", d, h);
            let (w2, bn_2) = lin(&mut store, "ffn2", h, d);
            blocks.push(Block { wq, bn_q, wk, bn_k, wv, bn_v, wo, bn_o, w1, bn_1, w2, bn_2 });
        }
        let head_in = match config.readout() {
            Readout::Last => d,
            Readout::Flatten => d * config.seq_len,
        };
        let w_head = uniform_matrix(&mut store, "head.w".into(), head_in, config.head.outputs(), &mut rng);
        let b_head = store.insert(
            "head.b",
            DiffTensor::new(ArrayD::zeros(IxDyn(&[config.head.outputs()])), true).expect("rank 1"),
        );
        let log_sigma = match config.sigma {
            SigmaSetting::Learnable => Some(store.insert("attn.log_sigma", DiffTensor::scalar(sigma.ln(), true))),
            _ => None,
        };
        Ok(Self { config, scheme, store, w_emb, bn_emb, blocks, w_head, b_head, log_sigma, sigma })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn scheme(&self) -> &PositionalScheme {
        &self.scheme
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Current attention scale.
    pub fn sigma(&self) -> f64 {
        match self.log_sigma {
            Some(id) => self.store.get(id).values.iter().next().copied().expect("scalar").exp(),
            None => self.sigma,
        }
    }

    /// Number of learnable scalars.
    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub(crate) fn batch_norms(&self) -> Vec<(&'static str, usize, &BatchNormState)> {
        let mut out = vec![("embed", usize::MAX, &self.bn_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, bn) in
                [("q", &b.bn_q), ("k", &b.bn_k), ("v", &b.bn_v), ("o", &b.bn_o), ("ffn1", &b.bn_1), ("ffn2", &b.bn_2)]
            {
                out.push((n, i, bn));
            }
        }
        out
    }

    pub(crate) fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormState> {
        let mut out = vec![&mut self.bn_emb];
        for b in &mut self.blocks {
            out.extend([&mut b.bn_q, &mut b.bn_k, &mut b.bn_v, &mut b.bn_o, &mut b.bn_1, &mut b.bn_2]);
        }
        out
    }

    /// Records a forward pass over `x` shaped `[batch, L, features]`.
    ///
    /// Training mode uses batch statistics and updates the running ones.
    pub fn forward(&mut self, tape: &mut Tape, x: ArrayView3<'_, f64>, training: bool) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let (b, l, f) = x.dim();
        if l != cfg.seq_len || f != cfg.features {
            return Err(config_err(format!(
                "input [{b}, {l}, {f}] does not match L={}, features={}",
                cfg.seq_len, cfg.features
            )));
        }
        if b == 0 {
            return Err(dim_err("empty batch"));
        }
        let steps = cfg.steps;
        let lif = cfg.lif;
        let sur = Surrogate { alpha: cfg.surrogate_alpha };
        let spec = AttentionSpec { slices: steps * b, len: l };
        let store = &self.store;

        let input = x.as_standard_layout().into_owned().into_shape_with_order((b * l, f)).expect("same count");
        let xin = tape.constant(input);
        let w = tape.param(store, self.w_emb);
        let e = tape.linear(xin, w)?;
        let e = tape.repeat_time(e, steps)?;
        let mut current = tape.batch_norm(e, store, &mut self.bn_emb, training)?;
        let mut xs = tape.spike(current, steps, lif, sur)?;

        let sigma = match self.log_sigma {
            Some(id) => {
                let s = tape.param(store, id);
                tape.exp(s)
            }
            None => tape.constant(Array2::from_elem((1, 1), self.sigma)),
        };

        let mut attention = Vec::with_capacity(self.blocks.len());
        for blk in &mut self.blocks {
            let branch = |tape: &mut Tape, inp: Var, w: ParamId, bn: &mut BatchNormState| -> Result<Var> {
                let wv = tape.param(store, w);
                let y = tape.linear(inp, wv)?;
                tape.batch_norm(y, store, bn, training)
            };
            let q = branch(tape, xs, blk.wq, &mut blk.bn_q)?;
            let q = tape.spike(q, steps, lif, sur)?;
            let k = branch(tape, xs, blk.wk, &mut blk.bn_k)?;
            let k = tape.spike(k, steps, lif, sur)?;
            let v = branch(tape, xs, blk.wv, &mut blk.bn_v)?;
            let v = tape.spike(v, steps, lif, sur)?;
            let a = tape.spiking_attention(q, k, v, sigma, &self.scheme, spec)?;
            attention.push(a);
            let o = branch(tape, a, blk.wo, &mut blk.bn_o)?;
            let r = tape.add(o, current)?;
            let x1 = tape.spike(r, steps, lif, sur)?;
            let h = branch(tape, x1, blk.w1, &mut blk.bn_1)?;
            let h = tape.spike(h, steps, lif, sur)?;
            let f2 = branch(tape, h, blk.w2, &mut blk.bn_2)?;
            current = tape.add(f2, r)?;
            xs = tape.spike(current, steps, lif, sur)?;
        }

        let rates = tape.mean_time(xs, steps)?;
        let feats = match cfg.readout() {
            Readout::Last => tape.select_rows(rates, (0..b).map(|i| i * l + l - 1).collect())?,
            Readout::Flatten => tape.reshape(rates, b, l * cfg.d_model)?,
        };
        let wh = tape.param(store, self.w_head);
        let bh = tape.param(store, self.b_head);
        let y = tape.linear(feats, wh)?;
        let output = tape.add_row(y, bh)?;
        Ok(ForwardOutput { output, rates, attention })
    }

    /// Inference-mode predictions, `[batch, outputs]`.
    pub fn predict(&mut self, x: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x, false)?;
        Ok(tape.value(out.output).clone())
    }

    /// Inference-mode attention score maps of every block, each
    /// `[T * batch, L, L]` with slice index `t * batch + b`.
    pub fn attention_maps(&mut self, x: ArrayView3<'_, f64>) -> Result<Vec<Array3<f64>>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x, false)?;
        Ok(out
            .attention
            .iter()
            .map(|&a| tape.attention_scores(a).expect("attention node").clone())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cls(pe: PeVariant) -> ModelConfig {
        let mut c = ModelConfig::small(8, 4, pe, Head::Classification { classes: 4 });
        c.d_model = 8;
        c.d_ffn = 16;
        c
    }

    fn input(b: usize, l: usize, f: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((b, l, f), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn config_validation() {
        let mut c = cls(PeVariant::Gray);
        c.gray_bits = Some(2);
        assert!(Model::new(c, 0).is_err());
        let mut c = cls(PeVariant::None);
        c.blocks = 0;
        assert!(Model::new(c, 0).is_err());
        let c = cls(PeVariant::Gray2d);
        assert!(Model::new(c.clone(), 0).is_err());
        let mut c = c;
        c.grid = Some(Grid2D::new(2, 4).unwrap());
        assert!(Model::new(c, 0).is_ok());
    }

    #[test]
    fn same_parameter_count_for_none_and_gray() {
        let a = Model::new(cls(PeVariant::None), 0).unwrap();
        let b = Model::new(cls(PeVariant::Gray), 0).unwrap();
        assert_eq!(a.trainable_count(), b.trainable_count());
        assert_eq!(b.scheme().effective_width(8), 8 + 3);
    }

    #[test]
    fn forward_shapes_and_binary_rates() {
        let mut m = Model::new(cls(PeVariant::Log), 1).unwrap();
        let x = input(3, 8, 4, 2);
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, x.view(), true).unwrap();
        assert_eq!(tape.shape(out.output), (3, 4));
        assert_eq!(tape.shape(out.rates), (24, 8));
        // Mean of T = 4 binary values.
        assert!(tape.value(out.rates).iter().all(|&r| (r * 4.0).fract() == 0.0));
    }

    #[test]
    fn digest_tracks_config() {
        let a = cls(PeVariant::None);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.steps = 2;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn sigma_settings() {
        let mut c = cls(PeVariant::Gray);
        assert!((c.sigma_value().unwrap() - 1.0 / 11f64.sqrt()).abs() < 1e-15);
        c.sigma = SigmaSetting::Learnable;
        let m = Model::new(c, 0).unwrap();
        assert!((m.sigma() - 1.0 / 11f64.sqrt()).abs() < 1e-12);
        let s: SigmaSetting = serde_json::from_str("0.25").unwrap();
        assert_eq!(s, SigmaSetting::Fixed(0.25));
        let s: SigmaSetting = serde_json::from_str("\"learnable\"").unwrap();
        assert_eq!(s, SigmaSetting::Learnable);
        assert!(serde_json::from_str::<SigmaSetting>("\"often\"").is_err());
    }
}
