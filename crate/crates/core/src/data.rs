//! Synthetic click data with planted multi-interest structure, and JSONL
//! ingestion.
//!
//! Items are split evenly into `G` topics and an item's category is its
//! topic (shifted by one for the padding id). Topics come in partner pairs
//! `(2m, 2m+1)`. Each user holds a mixture of distinct topics: one dominant
//! and the rest secondary. A target is *relevant* to a user when its topic
//! is the dominant one or the partner of a secondary one; relevant targets
//! click with probability `q_hi`, all others with `q_lo`. Partner-driven
//! positives make up `secondary_share` of all positives. Their evidence
//! sits in behaviors that are not similar to the target.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::features::{Schema, TrainingExample, PADDING_ID};
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub users: usize,
    /// Real items, excluding padding.
    pub items: usize,
    pub topics: usize,
    pub mixture_size: usize,
    pub seq_len: usize,
    pub noise_fraction: f64,
    /// Share of positives explained by a secondary topic's partner.
    pub secondary_share: f64,
    /// Probability that a target is relevant to its user.
    pub relevant_share: f64,
    pub q_hi: f64,
    pub q_lo: f64,
    /// Real ids of the auxiliary segment field, excluding padding.
    pub segments: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            users: 60_000,
            items: 2_000,
            topics: 8,
            mixture_size: 3,
            seq_len: 200,
            noise_fraction: 0.2,
            secondary_share: 0.4,
            relevant_share: 0.5,
            q_hi: 0.8,
            q_lo: 0.2,
            segments: 16,
            seed: 42,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("noise_fraction", self.noise_fraction)?;
        unit("secondary_share", self.secondary_share)?;
        unit("relevant_share", self.relevant_share)?;
        unit("q_hi", self.q_hi)?;
        unit("q_lo", self.q_lo)?;
        if self.topics < 2 || self.topics % 2 != 0 {
            return Err(Error::Config(format!(
                "topics must be an even number >= 2, got {}",
                self.topics
            )));
        }
        if self.mixture_size == 0 || self.mixture_size > self.topics {
            return Err(Error::Config(format!(
                "mixture_size must be in 1..={}, got {}",
                self.topics, self.mixture_size
            )));
        }
        if self.items < self.topics {
            return Err(Error::Config("need at least one item per topic".into()));
        }
        if self.seq_len < 2 || self.segments == 0 {
            return Err(Error::Config("seq_len >= 2 and segments >= 1 required".into()));
        }
        let (dom, sec) = self.target_mix();
        if sec > self.relevant_share + 1e-12 || dom < -1e-12 {
            return Err(Error::Config(
                "secondary_share is too large for the requested relevant_share".into(),
            ));
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        Schema {
            item_vocab: self.items + 1,
            category_vocab: self.topics + 1,
            other_vocab: self.segments + 1,
            other_fields: 1,
        }
    }

    /// Probabilities that a target comes from the dominant topic and from a
    /// secondary topic's partner.
    pub fn target_mix(&self) -> (f64, f64) {
        let rate = self.q_lo + (self.q_hi - self.q_lo) * self.relevant_share;
        let sec = if self.q_hi > 0.0 {
            self.secondary_share * rate / self.q_hi
        } else {
            0.0
        };
        (self.relevant_share - sec, sec)
    }

    pub fn topic_of(&self, item: u32) -> usize {
        (item as usize - 1) % self.topics
    }

    fn random_item(&self, topic: usize, rng: &mut Rng) -> u32 {
        let per_topic = (self.items - topic).div_ceil(self.topics);
        (1 + topic + self.topics * rng.below(per_topic)) as u32
    }
}

pub fn partner(topic: usize) -> usize {
    topic ^ 1
}

/// A user's hidden interest state.
#[derive(Clone, Debug, PartialEq)]
pub struct UserProfile {
    /// Dominant topic first.
    pub topics: Vec<usize>,
    pub weights: Vec<f64>,
}

impl UserProfile {
    pub fn dominant(&self) -> usize {
        self.topics[0]
    }

    /// Dominant topic or a partner of a secondary topic.
    pub fn is_relevant(&self, topic: usize) -> bool {
        topic == self.dominant() || self.topics[1..].iter().any(|&s| partner(s) == topic)
    }

    pub fn contains(&self, topic: usize) -> bool {
        self.topics.contains(&topic)
    }
}

/// One generated example together with its hidden profile.
#[derive(Clone, Debug)]
pub struct Generated {
    pub example: TrainingExample,
    pub profile: UserProfile,
}

/// Deterministic example for `user` under `config`.
pub fn generate_user(config: &GeneratorConfig, user: u64) -> Generated {
    let mut rng = Rng::derive(config.seed, &[user]);
    let g = config.topics;
    let m = config.mixture_size;
    let topics: Vec<usize> = rng.sample_distinct(g, m);
    let total = (m * (m + 1) / 2) as f64;
    let weights: Vec<f64> = (0..m).map(|j| (m - j) as f64 / total).collect();
    let profile = UserProfile { topics, weights };

    let len = rng.range_inclusive(config.seq_len / 2, config.seq_len);
    let behaviors = (0..len)
        .map(|_| {
            let item = if rng.bernoulli(config.noise_fraction) {
                1 + rng.below(config.items) as u32
            } else {
                let u = rng.uniform();
                let mut acc = 0.0;
                let mut pick = profile.topics[m - 1];
                for (t, w) in profile.topics.iter().zip(&profile.weights) {
                    acc += w;
                    if u < acc {
                        pick = *t;
                        break;
                    }
                }
                config.random_item(pick, &mut rng)
            };
            [item, config.topic_of(item) as u32 + 1]
        })
        .collect();

    let (p_dom, p_sec) = config.target_mix();
    let u = rng.uniform();
    let mut partners: Vec<usize> = profile.topics[1..]
        .iter()
        .map(|&s| partner(s))
        .filter(|&t| t != profile.dominant())
        .collect();
    partners.dedup();
    let target_topic = if u < p_dom || (u < p_dom + p_sec && partners.is_empty()) {
        profile.dominant()
    } else if u < p_dom + p_sec {
        partners[rng.below(partners.len())]
    } else {
        let outside: Vec<usize> = (0..g).filter(|&t| !profile.is_relevant(t)).collect();
        if outside.is_empty() {
            rng.below(g)
        } else {
            outside[rng.below(outside.len())]
        }
    };
    let target_item = config.random_item(target_topic, &mut rng);
    let q = if profile.is_relevant(target_topic) {
        config.q_hi
    } else {
        config.q_lo
    };
    let label = u8::from(rng.bernoulli(q));
    let segment = 1 + rng.below(config.segments) as u32;
    Generated {
        example: TrainingExample {
            user_id: user,
            behaviors,
            target: [target_item, target_topic as u32 + 1],
            other: vec![segment],
            label,
        },
        profile,
    }
}

/// Examples for users `0..config.users`.
pub fn generate(config: &GeneratorConfig) -> Result<Vec<TrainingExample>> {
    config.validate()?;
    Ok((0..config.users as u64)
        .map(|u| generate_user(config, u).example)
        .collect())
}

/// Streams the generated dataset to `path` as JSONL.
pub fn generate_to_file(config: &GeneratorConfig, path: &Path) -> Result<usize> {
    config.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for u in 0..config.users as u64 {
        let line = generate_user(config, u).example.to_json_line();
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(config.users)
}

pub fn write_jsonl(examples: &[TrainingExample], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        writeln!(w, "{}", ex.to_json_line()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const KEYS: [&str; 5] = ["user_id", "behaviors", "target", "other", "label"];

fn id_at(v: &Value, line: usize, field: &'static str) -> Result<u32> {
    let raw = v.as_u64().ok_or_else(|| Error::InvalidRecord {
        line,
        message: format!("`{field}` ids must be non-negative integers"),
    })?;
    if raw > u32::MAX as u64 {
        return Err(Error::IdOverflow {
            line,
            field,
            id: raw,
            vocab: u32::MAX as usize + 1,
        });
    }
    if raw == PADDING_ID as u64 {
        return Err(Error::InvalidRecord {
            line,
            message: format!("`{field}` uses the reserved padding id 0"),
        });
    }
    Ok(raw as u32)
}

fn pair_at(v: &Value, line: usize, item: &'static str, cat: &'static str) -> Result<[u32; 2]> {
    match v.as_array().map(Vec::as_slice) {
        Some([a, b]) => Ok([id_at(a, line, item)?, id_at(b, line, cat)?]),
        _ => Err(Error::InvalidRecord {
            line,
            message: format!("`{item}` entries must be [item, category] pairs"),
        }),
    }
}

/// Parses and validates one JSONL line (1-based `line`).
pub fn parse_line(text: &str, line: usize) -> Result<TrainingExample> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::MalformedLine {
        line,
        message: e.to_string(),
    })?;
    let obj = v.as_object().ok_or_else(|| Error::MalformedLine {
        line,
        message: "expected a JSON object".into(),
    })?;
    for key in KEYS {
        if !obj.contains_key(key) {
            return Err(Error::MissingKey { line, key });
        }
    }
    let invalid = |message: &str| Error::InvalidRecord {
        line,
        message: message.to_string(),
    };
    let user_id = obj["user_id"]
        .as_u64()
        .ok_or_else(|| invalid("`user_id` must be a non-negative integer"))?;
    let behaviors = obj["behaviors"]
        .as_array()
        .ok_or_else(|| invalid("`behaviors` must be an array"))?
        .iter()
        .map(|b| pair_at(b, line, "behaviors.item", "behaviors.category"))
        .collect::<Result<Vec<_>>>()?;
    let target = pair_at(&obj["target"], line, "target.item", "target.category")?;
    let other = obj["other"]
        .as_array()
        .ok_or_else(|| invalid("`other` must be an array"))?
        .iter()
        .map(|o| id_at(o, line, "other"))
        .collect::<Result<Vec<_>>>()?;
    let label = match obj["label"].as_u64() {
        Some(l @ (0 | 1)) => l as u8,
        _ => return Err(invalid("`label` must be 0 or 1")),
    };
    Ok(TrainingExample {
        user_id,
        behaviors,
        target,
        other,
        label,
    })
}

/// Validated examples from a reader, in order. Blank lines are skipped.
pub fn read_examples<R: BufRead>(reader: R) -> impl Iterator<Item = Result<TrainingExample>> {
    reader
        .lines()
        .enumerate()
        .filter_map(|(i, line)| match line {
            Ok(text) if text.trim().is_empty() => None,
            Ok(text) => Some(parse_line(&text, i + 1)),
            Err(e) => Some(Err(Error::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            })),
        })
}

pub fn load(path: &Path) -> Result<Vec<TrainingExample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_examples(BufReader::new(file)).collect()
}

/// Loads and checks every id against `schema`.
pub fn load_with_schema(path: &Path, schema: &Schema) -> Result<Vec<TrainingExample>> {
    let examples = load(path)?;
    for (i, ex) in examples.iter().enumerate() {
        schema.check(ex).map_err(|e| match e {
            Error::Ingest { field, id, vocab } => Error::IdOverflow {
                line: i + 1,
                field,
                id,
                vocab,
            },
            Error::Contract(message) => Error::InvalidRecord { line: i + 1, message },
            other => other,
        })?;
    }
    Ok(examples)
}

/// Smallest schema covering every id in `examples`.
pub fn infer_schema(examples: &[TrainingExample]) -> Result<Schema> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Contract("cannot infer a schema from no examples".into()))?;
    let mut s = Schema {
        item_vocab: 2,
        category_vocab: 2,
        other_vocab: 2,
        other_fields: first.other.len(),
    };
    for ex in examples {
        for b in ex.behaviors.iter().chain(std::iter::once(&ex.target)) {
            s.item_vocab = s.item_vocab.max(b[0] as usize + 1);
            s.category_vocab = s.category_vocab.max(b[1] as usize + 1);
        }
        for &o in &ex.other {
            s.other_vocab = s.other_vocab.max(o as usize + 1);
        }
    }
    Ok(s)
}
