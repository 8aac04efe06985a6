//! Embedding tables and per-example input assembly.
//!
//! A behavior embedding is the concatenation of its item-id and category-id
//! embeddings, so `d = item_dim + category_dim`. Sequences are front-padded
//! with id 0, whose table row is pinned at zero, so the most recent behavior
//! always sits in the last row of `E`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamId, ParamStore, Rng, Tape, Var};

/// Reserved id for padding in every table.
pub const PADDING_ID: u32 = 0;

/// One `(user, target, label)` record; a single JSONL line on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub user_id: u64,
    /// `(item id, category id)` pairs, most recent last.
    pub behaviors: Vec<[u32; 2]>,
    pub target: [u32; 2],
    pub other: Vec<u32>,
    pub label: u8,
}

impl TrainingExample {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// Vocabulary sizes (including the padding id 0) of each id space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub item_vocab: usize,
    pub category_vocab: usize,
    pub other_vocab: usize,
    /// Number of ids in `other` per example.
    pub other_fields: usize,
}

impl Schema {
    /// Checks every id against its vocabulary.
    pub fn check(&self, ex: &TrainingExample) -> Result<()> {
        let check = |field: &'static str, id: u32, vocab: usize| {
            if id as usize >= vocab {
                Err(Error::Ingest {
                    field,
                    id: id as u64,
                    vocab,
                })
            } else {
                Ok(())
            }
        };
        for b in &ex.behaviors {
            check("behaviors.item", b[0], self.item_vocab)?;
            check("behaviors.category", b[1], self.category_vocab)?;
        }
        check("target.item", ex.target[0], self.item_vocab)?;
        check("target.category", ex.target[1], self.category_vocab)?;
        if ex.other.len() != self.other_fields {
            return Err(Error::Contract(format!(
                "expected {} other ids, found {}",
                self.other_fields,
                ex.other.len()
            )));
        }
        for &o in &ex.other {
            check("other", o, self.other_vocab)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingDims {
    pub item: usize,
    pub category: usize,
    /// Per-field width of the auxiliary ids.
    pub other: usize,
}

impl Default for EmbeddingDims {
    fn default() -> Self {
        Self {
            item: 4,
            category: 4,
            other: 8,
        }
    }
}

impl EmbeddingDims {
    /// Behavior / target embedding width `d`.
    pub fn behavior(&self) -> usize {
        self.item + self.category
    }
}

pub const EMBEDDING_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub item: ParamId,
    pub category: ParamId,
    pub other: ParamId,
    pub dims: EmbeddingDims,
    pub other_fields: usize,
}

impl EmbeddingTables {
    /// Draws every entry from `N(0, 0.01²)` and pins the padding rows at zero.
    pub fn init(schema: &Schema, dims: EmbeddingDims, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let item = store.add_normal("emb.item", schema.item_vocab, dims.item, EMBEDDING_INIT_STD, rng);
        let category = store.add_normal(
            "emb.category",
            schema.category_vocab,
            dims.category,
            EMBEDDING_INIT_STD,
            rng,
        );
        let other = store.add_normal("emb.other", schema.other_vocab, dims.other, EMBEDDING_INIT_STD, rng);
        for id in [item, category, other] {
            store.freeze_row(id, PADDING_ID as usize);
        }
        Self {
            item,
            category,
            other,
            dims,
            other_fields: schema.other_fields,
        }
    }

    pub fn d(&self) -> usize {
        self.dims.behavior()
    }

    pub fn other_width(&self) -> usize {
        self.dims.other * self.other_fields
    }

    fn item_vocab(&self, store: &ParamStore) -> usize {
        store.value(self.item).rows()
    }

    fn category_vocab(&self, store: &ParamStore) -> usize {
        store.value(self.category).rows()
    }
}

/// Embedded view of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct InputBundle {
    /// `l×d`, front-padded.
    pub e: Matrix,
    /// `k×d`, the last `k` rows of `e`.
    pub e_k: Matrix,
    pub e_s: Vec<f64>,
    pub e_other: Vec<f64>,
    /// `true` for real behaviors.
    pub mask: Vec<bool>,
}

fn check_vocab(field: &'static str, id: u32, vocab: usize) -> Result<()> {
    if id as usize >= vocab {
        return Err(Error::Ingest {
            field,
            id: id as u64,
            vocab,
        });
    }
    Ok(())
}

/// Embeds one example into an [`InputBundle`] with sequence length `l` and
/// short window `k`.
pub fn embed_example(
    ex: &TrainingExample,
    tables: &EmbeddingTables,
    store: &ParamStore,
    l: usize,
    k: usize,
) -> Result<InputBundle> {
    let ids = SequenceIds::build(std::slice::from_ref(ex), tables, store, l)?;
    let d = tables.d();
    let item = store.value(tables.item);
    let cat = store.value(tables.category);
    let di = tables.dims.item;
    let mut e = Matrix::zeros(l, d);
    for pos in 0..l {
        let row = e.row_mut(pos);
        row[..di].copy_from_slice(item.row(ids.items[pos]));
        row[di..].copy_from_slice(cat.row(ids.categories[pos]));
    }
    let mut e_k = Matrix::zeros(k, d);
    for j in 0..k.min(l) {
        e_k.row_mut(k - 1 - j).copy_from_slice(e.row(l - 1 - j));
    }
    let mut e_s = item.row(ex.target[0] as usize).to_vec();
    e_s.extend_from_slice(cat.row(ex.target[1] as usize));
    let other = store.value(tables.other);
    let mut e_other = Vec::with_capacity(tables.other_width());
    for &o in &ex.other {
        e_other.extend_from_slice(other.row(o as usize));
    }
    Ok(InputBundle {
        e,
        e_k,
        e_s,
        e_other,
        mask: ids.mask,
    })
}

/// Flattened, front-padded ids for a batch.
#[derive(Clone, Debug)]
pub struct SequenceIds {
    pub l: usize,
    pub items: Vec<usize>,
    pub categories: Vec<usize>,
    pub mask: Vec<bool>,
    pub valid: Vec<usize>,
    pub target_items: Vec<usize>,
    pub target_categories: Vec<usize>,
    pub other: Vec<usize>,
}

impl SequenceIds {
    pub fn build(
        batch: &[TrainingExample],
        tables: &EmbeddingTables,
        store: &ParamStore,
        l: usize,
    ) -> Result<Self> {
        Self::build_refs(&batch.iter().collect::<Vec<_>>(), tables, store, l)
    }

    pub fn build_refs(
        batch: &[&TrainingExample],
        tables: &EmbeddingTables,
        store: &ParamStore,
        l: usize,
    ) -> Result<Self> {
        let iv = tables.item_vocab(store);
        let cv = tables.category_vocab(store);
        let ov = store.value(tables.other).rows();
        let b = batch.len();
        let mut out = Self {
            l,
            items: vec![0; b * l],
            categories: vec![0; b * l],
            mask: vec![false; b * l],
            valid: Vec::with_capacity(b),
            target_items: Vec::with_capacity(b),
            target_categories: Vec::with_capacity(b),
            other: Vec::with_capacity(b * tables.other_fields),
        };
        for (bi, ex) in batch.iter().enumerate() {
            let n = ex.behaviors.len();
            if n > l {
                return Err(Error::Contract(format!(
                    "sequence of {n} behaviors exceeds the configured length {l}"
                )));
            }
            let start = bi * l + (l - n);
            for (j, beh) in ex.behaviors.iter().enumerate() {
                check_vocab("behaviors.item", beh[0], iv)?;
                check_vocab("behaviors.category", beh[1], cv)?;
                out.items[start + j] = beh[0] as usize;
                out.categories[start + j] = beh[1] as usize;
                out.mask[start + j] = true;
            }
            out.valid.push(n);
            check_vocab("target.item", ex.target[0], iv)?;
            check_vocab("target.category", ex.target[1], cv)?;
            out.target_items.push(ex.target[0] as usize);
            out.target_categories.push(ex.target[1] as usize);
            if ex.other.len() != tables.other_fields {
                return Err(Error::Contract(format!(
                    "expected {} other ids, found {}",
                    tables.other_fields,
                    ex.other.len()
                )));
            }
            for &o in &ex.other {
                check_vocab("other", o, ov)?;
                out.other.push(o as usize);
            }
        }
        Ok(out)
    }

    pub fn batch_size(&self) -> usize {
        self.valid.len()
    }

    pub fn example_mask(&self, b: usize) -> &[bool] {
        &self.mask[b * self.l..(b + 1) * self.l]
    }
}

/// Tape handles for a batch's embeddings.
#[derive(Clone, Copy, Debug)]
pub struct BatchEmbeddings {
    /// `(B·l)×d`
    pub e: Var,
    /// `B×d`
    pub e_s: Var,
    /// `B×d_o`
    pub e_other: Var,
}

pub fn embed_batch(
    tape: &mut Tape,
    store: &ParamStore,
    tables: &EmbeddingTables,
    ids: &SequenceIds,
) -> Result<BatchEmbeddings> {
    let item = tape.param(store, tables.item);
    let cat = tape.param(store, tables.category);
    let other = tape.param(store, tables.other);
    let ei = tape.gather_rows(item, ids.items.clone())?;
    let ec = tape.gather_rows(cat, ids.categories.clone())?;
    let e = tape.concat_cols(&[ei, ec])?;
    let si = tape.gather_rows(item, ids.target_items.clone())?;
    let sc = tape.gather_rows(cat, ids.target_categories.clone())?;
    let e_s = tape.concat_cols(&[si, sc])?;
    let b = ids.batch_size();
    let go = tape.gather_rows(other, ids.other.clone())?;
    let e_other = tape.reshape(go, b, tables.other_width())?;
    Ok(BatchEmbeddings { e, e_s, e_other })
}
