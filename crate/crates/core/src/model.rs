//! The full CTR model and its ablation variants.
//!
//! A forward pass embeds the batch, extracts aggregated interests with
//! OMIE (or similarity filtering for variant A), encodes the short-term
//! window together with the target, samples augmented interests, and feeds
//! `[r, r*, e_other, e_s*]` to the prediction MLP. Training additionally
//! evaluates the diffusion and contrastive losses.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cmic::{contrastive_loss, CmicConfig, ProjectionHeads};
use crate::dmig::{
    diffusion_loss, sample, Denoiser, DmigConfig, Guidance, NoiseSchedule, SampleMode, SampleStart,
};
use crate::error::{Error, Result};
use crate::features::{embed_batch, EmbeddingDims, EmbeddingTables, Schema, SequenceIds, TrainingExample};
use crate::nn::{Attention, FeedForward, LayerNorm, Linear};
use crate::numerics::{derive_seed, Matrix, ParamStore, Rng, RowMap, Tape, Var};
use crate::omie::{self, OmieConfig, OmieParams, RoutingAssignment};

/// BCE clamp on predicted probabilities.
pub const PREDICTION_CLAMP: f64 = 1e-7;

const STREAM_DIFFUSION: u64 = 0xD1FF;
const STREAM_SAMPLE: u64 = 0x5A3E;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationVariant {
    #[default]
    Full,
    /// Similarity filtering in place of OMIE, one interest.
    A,
    /// No aggregated interests in the prediction input.
    B,
    /// No contrastive calibration.
    C,
    /// No diffusion and no contrastive calibration.
    D,
    /// No short-term encoder.
    E,
    /// No contextual-interest guidance.
    W,
    /// No interest-channel guidance.
    X,
    /// Neither guidance signal.
    Y,
    /// Sampling starts from pure noise.
    Z,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 10] = [
        Self::Full,
        Self::A,
        Self::B,
        Self::C,
        Self::D,
        Self::E,
        Self::W,
        Self::X,
        Self::Y,
        Self::Z,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Full => "Full",
            Self::A => "A",
            Self::B => "B",
            Self::C => "C",
            Self::D => "D",
            Self::E => "E",
            Self::W => "W",
            Self::X => "X",
            Self::Y => "Y",
            Self::Z => "Z",
        }
    }

    pub fn similarity_only(self) -> bool {
        self == Self::A
    }

    pub fn predicts_from_aggregated(self) -> bool {
        self != Self::B
    }

    pub fn uses_diffusion(self) -> bool {
        self != Self::D
    }

    pub fn uses_contrastive(self) -> bool {
        !matches!(self, Self::C | Self::D)
    }

    pub fn uses_short_term(self) -> bool {
        self != Self::E
    }

    pub fn guidance(self) -> Guidance {
        match self {
            Self::W => Guidance {
                context: false,
                channel: true,
            },
            Self::X => Guidance {
                context: true,
                channel: false,
            },
            Self::Y => Guidance {
                context: false,
                channel: false,
            },
            _ => Guidance::default(),
        }
    }

    pub fn sample_start(self) -> SampleStart {
        if self == Self::Z {
            SampleStart::Noise
        } else {
            SampleStart::Perturbed
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Self::ALL
            .into_iter()
            .find(|v| v.tag().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::Config(format!("unknown variant `{t}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Long-term sequence length `l`.
    pub seq_len: usize,
    /// Short-term window `k`.
    pub short_len: usize,
    pub embedding: EmbeddingDims,
    #[serde(flatten)]
    pub omie: OmieConfig,
    #[serde(flatten)]
    pub dmig: DmigConfig,
    #[serde(flatten)]
    pub cmic: CmicConfig,
    pub lambda_d: f64,
    pub mlp_widths: Vec<usize>,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub encoder_ffn_width: usize,
    pub variant: AblationVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq_len: 200,
            short_len: 20,
            embedding: EmbeddingDims::default(),
            omie: OmieConfig::default(),
            dmig: DmigConfig::default(),
            cmic: CmicConfig::default(),
            lambda_d: 0.01,
            mlp_widths: vec![200, 80],
            encoder_layers: 1,
            encoder_heads: 2,
            encoder_ffn_width: 32,
            variant: AblationVariant::Full,
        }
    }
}

impl ModelConfig {
    pub fn d(&self) -> usize {
        self.embedding.behavior()
    }

    /// Interests produced per example (one for variant A).
    pub fn channels(&self) -> usize {
        if self.variant.similarity_only() {
            1
        } else {
            self.omie.channels
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if d == 0 || self.embedding.other == 0 {
            return Err(Error::Config("embedding widths must be positive".into()));
        }
        if self.seq_len == 0 || self.short_len == 0 || self.short_len > self.seq_len {
            return Err(Error::Config(format!(
                "need 1 <= short_len <= seq_len, got {} and {}",
                self.short_len, self.seq_len
            )));
        }
        if self.encoder_heads == 0 || d % self.encoder_heads != 0 {
            return Err(Error::Config(format!(
                "encoder_heads must divide d = {d}, got {}",
                self.encoder_heads
            )));
        }
        if self.encoder_layers == 0 || self.encoder_ffn_width == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.mlp_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("mlp widths must be positive".into()));
        }
        if !(self.lambda_d >= 0.0) {
            return Err(Error::Config("lambda_d must be non-negative".into()));
        }
        self.omie.validate(d)?;
        self.dmig.validate()?;
        self.cmic.validate()
    }

    /// Width of `[r, r*, e_other, e_s*]` for `other_fields` auxiliary ids.
    pub fn prediction_width(&self, other_fields: usize) -> usize {
        let d = self.d();
        let block = self.channels() * d;
        let v = self.variant;
        let mut w = self.embedding.other * other_fields + d;
        if v.predicts_from_aggregated() {
            w += block;
        }
        if v.uses_diffusion() {
            w += block;
        }
        w
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attention_norm: LayerNorm,
    attention: Attention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

/// Transformer over `[E_k; e_s]` with learned positions; the output is the
/// last row.
#[derive(Clone, Debug)]
pub struct ShortTermEncoder {
    pub positions: crate::numerics::ParamId,
    layers: Vec<EncoderLayer>,
    window: usize,
}

impl ShortTermEncoder {
    fn new(store: &mut ParamStore, config: &ModelConfig, rng: &mut Rng) -> Self {
        let d = config.d();
        let positions = store.add_normal("encoder.positions", config.short_len + 1, d, 0.01, rng);
        let layers = (0..config.encoder_layers)
            .map(|l| {
                let name = format!("encoder.layer{l}");
                EncoderLayer {
                    attention_norm: LayerNorm::new(store, &format!("{name}.attention_norm"), d),
                    attention: Attention::new(
                        store,
                        &format!("{name}.attention"),
                        d,
                        config.encoder_heads,
                        rng,
                    ),
                    ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), d, config.encoder_ffn_width, rng),
                }
            })
            .collect();
        Self {
            positions,
            layers,
            window: config.short_len + 1,
        }
    }

    /// `x` stacks `k+1` rows per example; returns one row per example.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = self.window;
        let pos = tape.param(store, self.positions);
        let mut h = tape.add_tiled(x, pos)?;
        for layer in &self.layers {
            let a = layer.attention_norm.forward(tape, store, h)?;
            let s = layer.attention.forward(tape, store, a, a, n, n)?;
            h = tape.add(h, s)?;
            let a = layer.ffn_norm.forward(tape, store, h)?;
            let f = layer.ffn.forward(tape, store, a)?;
            h = tape.add(h, f)?;
        }
        let groups = tape.shape(h).0 / n;
        tape.gather_rows(h, (0..groups).map(|g| g * n + n - 1).collect())
    }

    /// Zeroes every block so the encoder returns `e_s` unchanged.
    pub fn make_identity(&self, store: &mut ParamStore) {
        store.value_mut(self.positions).fill(0.0);
        for layer in &self.layers {
            layer.attention.output.zero(store);
            layer.ffn.outer.zero(store);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// One batch and the stream keys that make its random draws reproducible.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub examples: &'a [&'a TrainingExample],
    /// Dataset index of each example.
    pub indices: &'a [u64],
    pub seed: u64,
    /// Optimizer step; 0 during evaluation.
    pub step: u64,
    pub phase: Phase,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `B×1` click probabilities.
    pub prediction: Var,
    /// `(B·c)×d` interest channels.
    pub channels: Var,
    /// `(B·c)×d` aggregated interests.
    pub interests: Var,
    /// `(B·c)×d` augmented interests.
    pub augmented: Option<Var>,
    /// `B×d`
    pub short_term: Var,
    /// Empty for variant A.
    pub routing: Vec<RoutingAssignment>,
    pub losses: Option<Losses>,
}

#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub total: Var,
    pub ctr: Var,
    pub diffusion: Option<Var>,
    pub contrastive: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub schema: Schema,
    pub init_seed: u64,
    pub store: ParamStore,
    pub tables: EmbeddingTables,
    pub omie: OmieParams,
    pub encoder: Option<ShortTermEncoder>,
    pub denoiser: Option<Denoiser>,
    pub heads: Option<ProjectionHeads>,
    pub mlp: Vec<Linear>,
    schedule: NoiseSchedule,
}

impl Model {
    pub fn new(config: ModelConfig, schema: Schema, seed: u64) -> Result<Self> {
        config.validate()?;
        if schema.item_vocab < 2 || schema.category_vocab < 2 || schema.other_vocab < 1 {
            return Err(Error::Config("vocabularies must hold padding plus one id".into()));
        }
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let d = config.d();
        let v = config.variant;
        let tables = EmbeddingTables::init(&schema, config.embedding, &mut store, &mut rng);
        let omie = OmieParams::init(&mut store, d, config.channels(), &mut rng);
        let encoder = v
            .uses_short_term()
            .then(|| ShortTermEncoder::new(&mut store, &config, &mut rng));
        let denoiser = v
            .uses_diffusion()
            .then(|| Denoiser::new(&mut store, d, &config.dmig, v.guidance(), &mut rng));
        let heads = v
            .uses_contrastive()
            .then(|| ProjectionHeads::new(&mut store, d, &mut rng));
        let mut widths = vec![config.prediction_width(schema.other_fields)];
        widths.extend(&config.mlp_widths);
        widths.push(1);
        let mlp = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut store, &format!("mlp.layer{i}"), w[0], w[1], &mut rng))
            .collect();
        let schedule = config.dmig.schedule()?;
        Ok(Self {
            config,
            schema,
            init_seed: seed,
            store,
            tables,
            omie,
            encoder,
            denoiser,
            heads,
            mlp,
            schedule,
        })
    }

    pub fn variant(&self) -> AblationVariant {
        self.config.variant
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn forward(&self, tape: &mut Tape, batch: Batch<'_>) -> Result<ForwardOutput> {
        self.forward_with(tape, &self.store, batch)
    }

    /// Forward pass reading parameters from `store`, which must share this
    /// model's layout.
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, batch: Batch<'_>) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let v = cfg.variant;
        let b = batch.examples.len();
        if b == 0 || batch.indices.len() != b {
            return Err(Error::Contract("batch must be non-empty with one index per example".into()));
        }
        for ex in batch.examples {
            self.schema.check(ex)?;
        }
        let l = cfg.seq_len;
        let k = cfg.short_len;
        let d = cfg.d();
        let c = cfg.channels();
        let ids = SequenceIds::build_refs(batch.examples, &self.tables, store, l)?;
        let emb = embed_batch(tape, store, &self.tables, &ids)?;
        let filter = cfg.omie.filter()?;

        let (channels, interests, routing) = if v.similarity_only() {
            let w = tape.param(store, self.omie.projection);
            let projected = tape.matmul(emb.e_s, w)?;
            let channels = omie::orthogonalize_groups(tape, projected, 1)?;
            let scores = tape.grouped_matmul_bt(emb.e, emb.e_s, l, 1)?;
            let selected: Vec<Vec<usize>> = tape.frozen(|t| {
                let s = t.value(scores).data();
                (0..b)
                    .map(|bi| omie::similarity_select(&s[bi * l..(bi + 1) * l], ids.example_mask(bi), filter))
                    .collect()
            });
            let mut map = RowMap::new();
            for (bi, rows) in selected.iter().enumerate() {
                let global: Vec<usize> = rows.iter().map(|&i| bi * l + i).collect();
                map.push_mean(&global);
            }
            let interests = tape.combine_rows(emb.e, map)?;
            (channels, interests, Vec::new())
        } else {
            let out = omie::extract(tape, store, &self.omie, &emb, &ids, c, filter)?;
            (out.channels, out.interests, out.routing)
        };

        let short_term = match &self.encoder {
            Some(enc) => {
                let mut rows = Vec::with_capacity(b * (k + 1));
                for bi in 0..b {
                    rows.extend((l - k..l).map(|p| bi * l + p));
                    rows.push(b * l + bi);
                }
                let stacked = tape.concat_rows(&[emb.e, emb.e_s])?;
                let x = tape.gather_rows(stacked, rows)?;
                enc.forward(tape, store, x)?
            }
            None => emb.e_s,
        };

        let mut diffusion = None;
        let augmented = match &self.denoiser {
            Some(den) => {
                let r_det = tape.detach(interests);
                let o_det = tape.detach(channels);
                let rv = tape.value(r_det).clone();
                let ov = tape.value(o_det).clone();
                let stream = |tag: u64| -> Vec<u64> {
                    batch
                        .indices
                        .iter()
                        .map(|&i| derive_seed(batch.seed, &[tag, batch.step, i]))
                        .collect()
                };
                if batch.phase == Phase::Train {
                    let seeds = stream(STREAM_DIFFUSION);
                    diffusion = Some(diffusion_loss(tape, store, den, &self.schedule, &rv, &ov, c, &seeds)?);
                }
                let seeds = stream(STREAM_SAMPLE);
                let mode = match batch.phase {
                    Phase::Train => SampleMode::Train,
                    Phase::Eval => SampleMode::Eval,
                };
                let sampled: std::result::Result<Matrix, String> = tape.frozen(|_| {
                    sample(
                        store,
                        den,
                        &self.schedule,
                        &rv,
                        &ov,
                        c,
                        cfg.dmig.sample_steps,
                        mode,
                        v.sample_start(),
                        &seeds,
                    )
                    .map_err(|e| e.to_string())
                });
                Some(tape.constant(sampled.map_err(Error::Numerical)?))
            }
            None => None,
        };

        let mut parts = Vec::with_capacity(4);
        if v.predicts_from_aggregated() {
            parts.push(tape.reshape(interests, b, c * d)?);
        }
        if let Some(rs) = augmented {
            parts.push(tape.reshape(rs, b, c * d)?);
        }
        parts.push(emb.e_other);
        parts.push(short_term);
        let mut h = tape.concat_cols(&parts)?;
        for (i, layer) in self.mlp.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < self.mlp.len() {
                h = tape.gelu(h);
            }
        }
        let prediction = tape.sigmoid(h);

        let losses = if batch.phase == Phase::Train {
            let labels = batch.examples.iter().map(|e| e.label as f64).collect();
            let ctr = tape.bce_mean(prediction, labels, PREDICTION_CLAMP)?;
            let mut total = ctr;
            if let Some(ld) = diffusion {
                let w = tape.scale(ld, cfg.lambda_d);
                total = tape.add(total, w)?;
            }
            let mut contrastive = None;
            if let (Some(heads), Some(rs)) = (&self.heads, augmented) {
                if b >= 2 {
                    let lc = contrastive_loss(tape, store, heads, interests, rs, c, cfg.cmic.tau)?;
                    let w = tape.scale(lc, cfg.cmic.lambda_cl);
                    total = tape.add(total, w)?;
                    contrastive = Some(lc);
                }
            }
            Some(Losses {
                total,
                ctr,
                diffusion,
                contrastive,
            })
        } else {
            None
        };

        Ok(ForwardOutput {
            prediction,
            channels,
            interests,
            augmented,
            short_term,
            routing,
            losses,
        })
    }

    /// Click probabilities for a batch in evaluation mode.
    pub fn predict(&self, examples: &[&TrainingExample], indices: &[u64], seed: u64) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(
            &mut tape,
            Batch {
                examples,
                indices,
                seed,
                step: 0,
                phase: Phase::Eval,
            },
        )?;
        Ok(tape.value(out.prediction).data().to_vec())
    }

    /// Serialized checkpoint: magic, manifest length, manifest JSON, then
    /// every parameter as little-endian `f64` in declaration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = CheckpointManifest {
            config: self.config.clone(),
            schema: self.schema.clone(),
            init_seed: self.init_seed,
            params: self
                .store
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(14 + json.len() + 8 * self.store.total_entries());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 14 || &bytes[..6] != CHECKPOINT_MAGIC {
            return Err(bad("missing DMIN01 header"));
        }
        let len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(14..14 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: CheckpointManifest =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let mut model = Model::new(manifest.config, manifest.schema, manifest.init_seed)?;
        if model.store.len() != manifest.params.len() {
            return Err(bad("parameter count does not match the configuration"));
        }
        let mut pos = 14 + len;
        for (id, entry) in model.store.ids().zip(&manifest.params).collect::<Vec<_>>() {
            let p = model.store.get_mut(id);
            if p.name != entry.name || p.value.shape() != (entry.rows, entry.cols) {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {}x{} does not match `{}` {:?}",
                    entry.name,
                    entry.rows,
                    entry.cols,
                    p.name,
                    p.value.shape()
                )));
            }
            let n = p.value.len();
            let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad("truncated parameter data"))?;
            for (dst, chunk) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            pos += 8 * n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after parameter data"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"DMIN01";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    config: ModelConfig,
    schema: Schema,
    init_seed: u64,
    params: Vec<ParamEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Adam, AdamConfig};

    fn schema() -> Schema {
        Schema {
            item_vocab: 50,
            category_vocab: 6,
            other_vocab: 10,
            other_fields: 1,
        }
    }

    fn micro(variant: AblationVariant) -> ModelConfig {
        ModelConfig {
            seq_len: 16,
            short_len: 4,
            mlp_widths: vec![16, 8],
            variant,
            omie: OmieConfig {
                channels: 2,
                top_p_percent: 50.0,
                ..OmieConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    fn examples(n: usize, seed: u64) -> Vec<TrainingExample> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|u| {
                let len = rng.range_inclusive(3, 16);
                TrainingExample {
                    user_id: u as u64,
                    behaviors: (0..len)
                        .map(|_| [rng.range_inclusive(1, 49) as u32, rng.range_inclusive(1, 5) as u32])
                        .collect(),
                    target: [rng.range_inclusive(1, 49) as u32, rng.range_inclusive(1, 5) as u32],
                    other: vec![rng.range_inclusive(1, 9) as u32],
                    label: (u % 2) as u8,
                }
            })
            .collect()
    }

    fn batch<'a>(refs: &'a [&'a TrainingExample], idx: &'a [u64], phase: Phase) -> Batch<'a> {
        Batch {
            examples: refs,
            indices: idx,
            seed: 3,
            step: 1,
            phase,
        }
    }

    #[test]
    fn prediction_widths() {
        let w = |v| ModelConfig { variant: v, ..ModelConfig::default() }.prediction_width(1);
        assert_eq!(w(AblationVariant::Full), 80);
        assert_eq!(w(AblationVariant::D), 48);
        assert_eq!(w(AblationVariant::B), 48);
        assert_eq!(w(AblationVariant::A), 32);
        assert_eq!(w(AblationVariant::C), 80);
    }

    #[test]
    fn variant_tags_round_trip() {
        for v in AblationVariant::ALL {
            assert_eq!(v.tag().parse::<AblationVariant>().unwrap(), v);
        }
        assert_eq!("full".parse::<AblationVariant>().unwrap(), AblationVariant::Full);
        assert!("Q".parse::<AblationVariant>().is_err());
    }

    #[test]
    fn config_defaults_and_json_keys() {
        let c: ModelConfig = serde_json::from_str(r#"{"channels": 2, "T_prime": 5, "tau": 0.1}"#).unwrap();
        assert_eq!(c.omie.channels, 2);
        assert_eq!(c.dmig.sample_steps, 5);
        assert_eq!(c.cmic.tau, 0.1);
        assert_eq!(c.dmig.steps, 1000);
        assert_eq!(c.lambda_d, 0.01);
        assert_eq!(c.cmic.lambda_cl, 0.001);
        let bad = ModelConfig {
            encoder_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn every_variant_runs_forward() {
        let data = examples(4, 1);
        let refs: Vec<&TrainingExample> = data.iter().collect();
        let idx = [0, 1, 2, 3];
        for v in AblationVariant::ALL {
            let model = Model::new(micro(v), schema(), 7).unwrap();
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, batch(&refs, &idx, Phase::Train)).unwrap();
            let p = tape.value(out.prediction);
            assert_eq!(p.shape(), (4, 1));
            assert!(p.data().iter().all(|&x| x > 0.0 && x < 1.0));
            let losses = out.losses.unwrap();
            assert!(tape.value(losses.total).item().is_finite());
            assert_eq!(losses.diffusion.is_some(), v.uses_diffusion(), "{v}");
            assert_eq!(losses.contrastive.is_some(), v.uses_contrastive(), "{v}");
        }
    }

    #[test]
    fn zeroed_final_layer_predicts_half() {
        let mut model = Model::new(micro(AblationVariant::Full), schema(), 7).unwrap();
        model.mlp.last().unwrap().zero(&mut model.store);
        let data = examples(3, 2);
        let refs: Vec<&TrainingExample> = data.iter().collect();
        let p = model.predict(&refs, &[0, 1, 2], 1).unwrap();
        assert!(p.iter().all(|&x| x == 0.5));
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, batch(&refs, &[0, 1, 2], Phase::Train)).unwrap();
        let ctr = tape.value(out.losses.unwrap().ctr).item();
        assert!((ctr - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn zero_loss_weights_leave_only_ctr() {
        let mut cfg = micro(AblationVariant::Full);
        cfg.lambda_d = 0.0;
        cfg.cmic.lambda_cl = 0.0;
        let model = Model::new(cfg, schema(), 7).unwrap();
        let data = examples(4, 2);
        let refs: Vec<&TrainingExample> = data.iter().collect();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, batch(&refs, &[0, 1, 2, 3], Phase::Train)).unwrap();
        let l = out.losses.unwrap();
        assert_eq!(tape.value(l.total).item(), tape.value(l.ctr).item());
    }

    #[test]
    fn identity_encoder_returns_target() {
        let model = {
            let mut m = Model::new(micro(AblationVariant::Full), schema(), 7).unwrap();
            let enc = m.encoder.clone().unwrap();
            enc.make_identity(&mut m.store);
            m
        };
        let data = examples(2, 3);
        let refs: Vec<&TrainingExample> = data.iter().collect();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, batch(&refs, &[0, 1], Phase::Eval)).unwrap();
        let item = model.store.value(model.tables.item);
        let cat = model.store.value(model.tables.category);
        for (bi, ex) in data.iter().enumerate() {
            let mut want = item.row(ex.target[0] as usize).to_vec();
            want.extend_from_slice(cat.row(ex.target[1] as usize));
            let got = tape.value(out.short_term).row(bi);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn encoder_is_order_sensitive() {
        let model = Model::new(micro(AblationVariant::Full), schema(), 7).unwrap();
        let mut ex = examples(1, 4).remove(0);
        ex.behaviors = vec![[3, 1], [9, 2], [17, 3], [25, 4], [40, 5]];
        let mut swapped = ex.clone();
        swapped.behaviors.swap(1, 3);
        let run = |e: &TrainingExample| {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, batch(&[e], &[0], Phase::Eval)).unwrap();
            tape.value(out.short_term).clone()
        };
        let (a, b) = (run(&ex), run(&swapped));
        assert!(a.sub(&b).unwrap().max_abs() > 1e-12);
    }

    #[test]
    fn batched_extraction_matches_single_example_path() {
        let model = Model::new(micro(AblationVariant::Full), schema(), 7).unwrap();
        let data = examples(3, 5);
        let refs: Vec<&TrainingExample> = data.iter().collect();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, batch(&refs, &[0, 1, 2], Phase::Eval)).unwrap();
        let d = model.config.d();
        let c = model.config.channels();
        let w = model.store.value(model.omie.projection);
        let filter = model.config.omie.filter().unwrap();
        for (bi, ex) in data.iter().enumerate() {
            let inp = crate::features::embed_example(ex, &model.tables, &model.store, 16, 4).unwrap();
            let s = omie::project_target(&inp.e_s, w, c).unwrap();
            let o = omie::orthogonalize(&s).unwrap();
            let a = omie::score(&inp.e, &o).unwrap();
            let routing = omie::filter(&a, omie::route(&a, &inp.mask), filter, &inp.mask);
            assert_eq!(routing, out.routing[bi]);
            let r = omie::aggregate(&inp.e, &routing);
            for j in 0..c {
                for t in 0..d {
                    let got = tape.value(out.interests).get(bi * c + j, t);
                    assert!((got - r.0.get(j, t)).abs() < 1e-14);
                    let got = tape.value(out.channels).get(bi * c + j, t);
                    assert!((got - o.0.get(j, t)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn eval_is_batch_invariant_and_calls_no_diffusion_loss() {
        let model = Model::new(micro(AblationVariant::Full), schema(), 7).unwrap();
        let data = examples(5, 6);
        let refs: Vec<&TrainingExample> = data.iter().collect();
        let before = crate::dmig::call_counts();
        let all = model.predict(&refs, &[0, 1, 2, 3, 4], 9).unwrap();
        let head = model.predict(&refs[..2], &[0, 1], 9).unwrap();
        let tail = model.predict(&refs[2..], &[2, 3, 4], 9).unwrap();
        let after = crate::dmig::call_counts();
        assert_eq!(after.loss, before.loss);
        let joined: Vec<f64> = head.into_iter().chain(tail).collect();
        for (a, b) in all.iter().zip(&joined) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Model::new(micro(AblationVariant::X), schema(), 11).unwrap();
        let bytes = model.to_bytes();
        assert_eq!(&bytes[..6], b"DMIN01");
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert!(Model::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(Model::from_bytes(&wrong), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn overfits_a_micro_batch() {
        let mut model = Model::new(micro(AblationVariant::Full), schema(), 5).unwrap();
        let data = examples(8, 8);
        let refs: Vec<&TrainingExample> = data.iter().collect();
        let idx: Vec<u64> = (0..8).collect();
        let mut adam = Adam::new(AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        });
        let mut ctr = f64::INFINITY;
        for step in 0..200 {
            let mut tape = Tape::new();
            let out = model
                .forward(
                    &mut tape,
                    Batch {
                        examples: &refs,
                        indices: &idx,
                        seed: 1,
                        step,
                        phase: Phase::Train,
                    },
                )
                .unwrap();
            let l = out.losses.unwrap();
            ctr = tape.value(l.ctr).item();
            model.store.zero_grad();
            tape.backward(l.total, &mut model.store).unwrap();
            adam.step(&mut model.store);
        }
        assert!(ctr < 0.05, "{ctr}");
    }
}
