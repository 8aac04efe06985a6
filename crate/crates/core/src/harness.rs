//! Training, evaluation, ablation and gradient checking.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::GeneratorConfig;
use crate::dmig::{call_counts, CallCounts};
use crate::error::{Error, Result};
use crate::features::{Schema, TrainingExample};
use crate::model::{AblationVariant, Batch, Model, ModelConfig, Phase};
use crate::numerics::{derive_seed, Adam, AdamConfig, Rng, Tape};
use crate::omie::OmieConfig;

const STREAM_INIT: u64 = 0x1417;
const STREAM_SHUFFLE: u64 = 0x5F1E;

/// Probability that a random positive outscores a random negative, ties
/// counting one half, via average ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        let tied_pos = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += mean_rank * tied_pos as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Relative AUC improvement over a base model, in percent, rounded to two
/// decimals.
pub fn rela_impr(auc_model: f64, auc_base: f64) -> Result<f64> {
    if auc_base == 0.5 {
        return Err(Error::UndefinedMetric(
            "RelaImpr is undefined for a base AUC of 0.5".into(),
        ));
    }
    let raw = ((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0;
    Ok((raw * 100.0).round() / 100.0)
}

/// SHA-256 over git's blob framing (`"blob <len>\0"` followed by content).
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn dataset_hash(examples: &[TrainingExample]) -> String {
    let mut buf = Vec::new();
    for ex in examples {
        buf.extend_from_slice(ex.to_json_line().as_bytes());
        buf.push(b'\n');
    }
    content_hash(&buf)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Seeds for repeated runs in ablations.
    pub seeds: Vec<u64>,
    /// Examples held out at the end of a file for ablation scoring.
    pub test_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            lr: 0.001,
            seed: 1,
            seeds: vec![1, 2, 3],
            test_size: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Everything a run reads from its JSON configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.data.seq_len > self.model.seq_len {
            return Err(Error::Config(format!(
                "generated sequences (up to {}) exceed the model length {}",
                self.data.seq_len, self.model.seq_len
            )));
        }
        Ok(())
    }

    /// Replaces every seed with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
        self.train.seeds = vec![seed];
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub total: f64,
    pub ctr: f64,
    pub diffusion: Option<f64>,
    pub contrastive: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub losses: Vec<StepLosses>,
}

/// One epoch of mini-batch Adam over a seeded permutation of `examples`.
pub fn train(
    config: &ModelConfig,
    schema: &Schema,
    examples: &[TrainingExample],
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    tc.validate()?;
    if examples.is_empty() {
        return Err(Error::Contract("no training examples".into()));
    }
    let mut model = Model::new(config.clone(), schema.clone(), derive_seed(tc.seed, &[STREAM_INIT]))?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    Rng::derive(tc.seed, &[STREAM_SHUFFLE]).shuffle(&mut order);
    let mut adam = Adam::new(tc.adam());
    let mut losses = Vec::with_capacity(examples.len().div_ceil(tc.batch_size));
    let mut tape = Tape::new();
    for (step, chunk) in order.chunks(tc.batch_size).enumerate() {
        let refs: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
        let indices: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
        tape.clear();
        let out = model.forward(
            &mut tape,
            Batch {
                examples: &refs,
                indices: &indices,
                seed: tc.seed,
                step: step as u64,
                phase: Phase::Train,
            },
        )
        .map_err(|e| if e.is_numerical() { Error::Divergence { step } } else { e })?;
        let l = out.losses.expect("training pass computes losses");
        let total = tape.value(l.total).item();
        if !total.is_finite() {
            return Err(Error::Divergence { step });
        }
        model.store.zero_grad();
        tape.backward(l.total, &mut model.store)?;
        adam.step(&mut model.store);
        if model.store.iter().any(|p| !p.value.is_finite()) {
            return Err(Error::Divergence { step });
        }
        losses.push(StepLosses {
            step,
            total,
            ctr: tape.value(l.ctr).item(),
            diffusion: l.diffusion.map(|v| tape.value(v).item()),
            contrastive: l.contrastive.map(|v| tape.value(v).item()),
        });
    }
    Ok(TrainOutcome { model, losses })
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub auc: f64,
    pub predictions: Vec<f64>,
    /// Diffusion calls made while scoring.
    pub calls: CallCounts,
}

/// Scores every example with evaluation-mode sampling.
pub fn predict_all(model: &Model, examples: &[TrainingExample], seed: u64, batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(examples.len());
    let bs = batch_size.max(1);
    for (bi, chunk) in examples.chunks(bs).enumerate() {
        let refs: Vec<&TrainingExample> = chunk.iter().collect();
        let indices: Vec<u64> = (0..chunk.len()).map(|j| (bi * bs + j) as u64).collect();
        out.extend(model.predict(&refs, &indices, seed)?);
    }
    if out.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numerical("non-finite prediction".into()));
    }
    Ok(out)
}

pub fn evaluate(model: &Model, examples: &[TrainingExample], seed: u64, batch_size: usize) -> Result<Evaluation> {
    let before = call_counts();
    let predictions = predict_all(model, examples, seed, batch_size)?;
    let after = call_counts();
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    Ok(Evaluation {
        auc: auc(&predictions, &labels)?,
        predictions,
        calls: CallCounts {
            loss: after.loss - before.loss,
            sample: after.sample - before.sample,
        },
    })
}

/// Splits off the last `test_size` examples.
pub fn split_holdout(examples: &[TrainingExample], test_size: usize) -> Result<(&[TrainingExample], &[TrainingExample])> {
    if test_size == 0 || test_size >= examples.len() {
        return Err(Error::Config(format!(
            "test_size {test_size} must be in 1..{}",
            examples.len()
        )));
    }
    Ok(examples.split_at(examples.len() - test_size))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub seeds: Vec<u64>,
    pub aucs: Vec<f64>,
    pub mean_auc: f64,
    pub min_auc: f64,
    pub max_auc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Column-aligned summary; RelaImpr is against the Full row when present.
    pub fn to_table(&self) -> String {
        let base = self.row(AblationVariant::Full).map(|r| r.mean_auc);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:>9} {:>9} {:>9} {:>10} {:>9}",
            "variant", "mean_auc", "min_auc", "max_auc", "rela_impr", "seconds"
        );
        for r in &self.rows {
            let rel = base
                .and_then(|b| rela_impr(r.mean_auc, b).ok())
                .map(|v| format!("{v:.2}%"))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<8} {:>9.4} {:>9.4} {:>9.4} {:>10} {:>9.1}",
                r.variant.tag(),
                r.mean_auc,
                r.min_auc,
                r.max_auc,
                rel,
                r.seconds
            );
        }
        out
    }
}

/// Trains and scores each variant once per seed.
pub fn ablate(
    config: &ModelConfig,
    schema: &Schema,
    train_set: &[TrainingExample],
    test_set: &[TrainingExample],
    tc: &TrainConfig,
    variants: &[AblationVariant],
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let started = Instant::now();
        let cfg = ModelConfig {
            variant,
            ..config.clone()
        };
        let mut aucs = Vec::with_capacity(tc.seeds.len());
        for &seed in &tc.seeds {
            let run = TrainConfig {
                seed,
                ..tc.clone()
            };
            let outcome = train(&cfg, schema, train_set, &run)?;
            aucs.push(evaluate(&outcome.model, test_set, seed, run.batch_size)?.auc);
        }
        let mean = if aucs.is_empty() {
            f64::NAN
        } else {
            aucs.iter().sum::<f64>() / aucs.len() as f64
        };
        rows.push(AblationRow {
            variant,
            seeds: tc.seeds.clone(),
            min_auc: aucs.iter().cloned().fold(f64::INFINITY, f64::min),
            max_auc: aucs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            mean_auc: mean,
            aucs,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(AblationReport { rows })
}

pub fn parse_variants(list: &str) -> Result<Vec<AblationVariant>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub entries: usize,
    pub analytic_norm: f64,
    /// Against the five-point stencil.
    pub relative_error: f64,
    /// Against the plain two-point stencil at the same step.
    pub two_point_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub variant: AblationVariant,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.groups.iter().map(|g| g.relative_error).fold(0.0, f64::max)
    }

    pub fn max_two_point_error(&self) -> f64 {
        self.groups.iter().map(|g| g.two_point_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error() < GRAD_CHECK_TOLERANCE
    }
}

/// Small configuration used by the end-to-end gradient check.
pub fn micro_config(variant: AblationVariant) -> (ModelConfig, GeneratorConfig) {
    let model = ModelConfig {
        seq_len: 16,
        short_len: 4,
        mlp_widths: vec![16, 8],
        encoder_ffn_width: 16,
        omie: OmieConfig {
            channels: 2,
            top_p_percent: 50.0,
            ..OmieConfig::default()
        },
        variant,
        ..ModelConfig::default()
    };
    let data = GeneratorConfig {
        users: 2,
        items: 40,
        topics: 4,
        seq_len: 16,
        segments: 4,
        seed: 7,
        ..GeneratorConfig::default()
    };
    (model, data)
}

/// Central finite differences of the training loss against backprop,
/// using the fourth-order stencil at step `GRAD_CHECK_STEP`.
///
/// Every random draw, stop-gradient and discrete routing decision of the
/// base pass is replayed in the perturbed passes, so the check sees the
/// same piecewise-smooth function that backprop differentiates. Padding
/// rows are skipped; groups larger than `max_entries` are subsampled.
pub fn grad_check(
    config: &ModelConfig,
    schema: &Schema,
    examples: &[TrainingExample],
    seed: u64,
    max_entries: usize,
) -> Result<GradCheckReport> {
    let mut model = Model::new(config.clone(), schema.clone(), seed)?;
    let refs: Vec<&TrainingExample> = examples.iter().collect();
    let indices: Vec<u64> = (0..examples.len() as u64).collect();
    let batch = Batch {
        examples: &refs,
        indices: &indices,
        seed,
        step: 0,
        phase: Phase::Train,
    };
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, batch)?;
    let loss = out.losses.expect("training pass").total;
    model.store.zero_grad();
    tape.backward(loss, &mut model.store)?;
    let trace = tape.into_trace();

    let eval = |store: &crate::numerics::ParamStore| -> Result<f64> {
        let mut t = Tape::replaying(trace.clone());
        let o = model.forward_with(&mut t, store, batch)?;
        Ok(t.value(o.losses.expect("training pass").total).item())
    };

    let mut groups = Vec::with_capacity(model.store.len());
    let mut probe = model.store.clone();
    let mut rng = Rng::derive(seed, &[0x6C4E]);
    for id in model.store.ids().collect::<Vec<_>>() {
        let p = model.store.get(id);
        let cols = p.value.cols();
        let mut candidates: Vec<usize> = (0..p.value.len())
            .filter(|&k| !p.frozen_rows.contains(&(k / cols)))
            .collect();
        if candidates.len() > max_entries {
            let keep = rng.sample_distinct(candidates.len(), max_entries);
            let mut picked: Vec<usize> = keep.into_iter().map(|i| candidates[i]).collect();
            picked.sort_unstable();
            candidates = picked;
        }
        let (mut diff2, mut fd2, mut an2, mut diff2_two) = (0.0, 0.0, 0.0, 0.0);
        let h = GRAD_CHECK_STEP;
        for &k in &candidates {
            let orig = probe.value(id).data()[k];
            let mut at = |offset: f64| -> Result<f64> {
                probe.value_mut(id).data_mut()[k] = orig + offset;
                eval(&probe)
            };
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            probe.value_mut(id).data_mut()[k] = orig;
            let two = (p1 - m1) / (2.0 * h);
            let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let an = model.store.grad(id).data()[k];
            diff2 += (fd - an) * (fd - an);
            diff2_two += (two - an) * (two - an);
            fd2 += fd * fd;
            an2 += an * an;
        }
        let scale = fd2.sqrt().max(an2.sqrt()).max(1e-8);
        groups.push(GroupCheck {
            name: p.name.clone(),
            entries: candidates.len(),
            analytic_norm: an2.sqrt(),
            relative_error: diff2.sqrt() / scale,
            two_point_error: diff2_two.sqrt() / scale,
        });
    }
    Ok(GradCheckReport {
        variant: config.variant,
        groups,
    })
}

/// Provenance record written next to every training or evaluation result.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub dataset_hash: String,
    pub examples: usize,
    pub metrics: BTreeMap<String, serde_json::Value>,
    pub wall_time_secs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_hash: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub losses: Vec<StepLosses>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingDump {
    pub index: usize,
    pub user_id: u64,
    pub channels: Vec<Vec<f64>>,
    pub interests: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augmented: Option<Vec<Vec<f64>>>,
}

/// Per-example interest channels, aggregated and augmented interests.
pub fn dump_embeddings(
    model: &Model,
    examples: &[TrainingExample],
    seed: u64,
    batch_size: usize,
    out: &mut dyn std::io::Write,
) -> Result<usize> {
    let c = model.config.channels();
    let bs = batch_size.max(1);
    let rows = |m: &crate::numerics::Matrix, bi: usize| -> Vec<Vec<f64>> {
        (0..c).map(|j| m.row(bi * c + j).to_vec()).collect()
    };
    let mut written = 0;
    for (chunk_i, chunk) in examples.chunks(bs).enumerate() {
        let refs: Vec<&TrainingExample> = chunk.iter().collect();
        let indices: Vec<u64> = (0..chunk.len()).map(|j| (chunk_i * bs + j) as u64).collect();
        let mut tape = Tape::new();
        let o = model.forward(
            &mut tape,
            Batch {
                examples: &refs,
                indices: &indices,
                seed,
                step: 0,
                phase: Phase::Eval,
            },
        )?;
        for (bi, ex) in chunk.iter().enumerate() {
            let rec = EmbeddingDump {
                index: chunk_i * bs + bi,
                user_id: ex.user_id,
                channels: rows(tape.value(o.channels), bi),
                interests: rows(tape.value(o.interests), bi),
                augmented: o.augmented.map(|a| rows(tape.value(a), bi)),
            };
            let line = serde_json::to_string(&rec).expect("dump serializes");
            writeln!(out, "{line}").map_err(|e| Error::io("<embeddings>", e))?;
            written += 1;
        }
    }
    Ok(written)
}
