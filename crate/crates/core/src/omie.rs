//! Orthogonal multi-interest extraction.
//!
//! The projected target is reshaped into `c` rows of width `d` and made
//! row-orthonormal with modified Gram–Schmidt; each row is an interest
//! channel. Every real behavior is routed to its best-scoring channel, each
//! channel keeps only behaviors ranked in the top of its score column, and
//! the survivors are mean-pooled into one aggregated interest per channel.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{BatchEmbeddings, SequenceIds};
use crate::numerics::{Matrix, ParamId, ParamStore, Rng, RowMap, Tape, Var};

/// Residual norm below which a Gram–Schmidt row is replaced.
pub const RESCUE_THRESHOLD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    TopP,
    TopK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OmieConfig {
    pub channels: usize,
    pub top_p_percent: f64,
    pub filter_mode: FilterMode,
    pub top_k_count: usize,
}

impl Default for OmieConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            top_p_percent: 20.0,
            filter_mode: FilterMode::TopP,
            top_k_count: 40,
        }
    }
}

impl OmieConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.channels == 0 || self.channels > d {
            return Err(Error::Config(format!(
                "channels must be in 1..={d}, got {}",
                self.channels
            )));
        }
        self.filter()?;
        Ok(())
    }

    pub fn filter(&self) -> Result<Filter> {
        match self.filter_mode {
            FilterMode::TopP => Filter::top_p(self.top_p_percent),
            FilterMode::TopK => Filter::top_k(self.top_k_count),
        }
    }
}

/// How many behaviors a channel keeps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Filter {
    TopPercent(f64),
    TopCount(usize),
}

impl Filter {
    pub fn top_p(percent: f64) -> Result<Self> {
        if !(percent > 0.0 && percent <= 100.0) {
            return Err(Error::Config(format!(
                "top_p_percent must be in (0, 100], got {percent}"
            )));
        }
        Ok(Filter::TopPercent(percent))
    }

    pub fn top_k(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("top_k_count must be positive".into()));
        }
        Ok(Filter::TopCount(count))
    }

    /// Number kept out of `n` real behaviors.
    pub fn keep_count(&self, n: usize) -> usize {
        if n == 0 {
            return 0;
        }
        match *self {
            Filter::TopPercent(p) => {
                let m = (p * n as f64 / 100.0 + 1e-9).floor() as usize;
                m.clamp(1, n)
            }
            Filter::TopCount(k) => k.min(n),
        }
    }
}

/// Row-orthonormal interest channels `O` (`c×d`).
#[derive(Clone, Debug, PartialEq)]
pub struct InterestChannels(pub Matrix);

impl InterestChannels {
    /// `‖O Oᵀ − I‖∞`
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.0.matmul_bt(&self.0).expect("square by construction");
        gram.sub(&Matrix::identity(gram.rows()))
            .expect("same shape")
            .max_abs()
    }
}

/// Behavior routing `Φ` and channel filtering `Γ` for one example.
///
/// Routing is exclusive, so each matrix is stored as one entry per
/// behavior: the routed channel (`None` for padding) and whether the
/// behavior survived filtering in that channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingAssignment {
    pub channels: usize,
    pub routed: Vec<Option<usize>>,
    pub kept: Vec<bool>,
}

impl RoutingAssignment {
    pub fn phi(&self, i: usize, j: usize) -> bool {
        self.routed[i] == Some(j)
    }

    pub fn gamma(&self, i: usize, j: usize) -> bool {
        self.kept[i] && self.routed[i] == Some(j)
    }

    /// Behavior indices with `Γ_{i,j} = 1`, ascending.
    pub fn selected(&self, j: usize) -> Vec<usize> {
        (0..self.routed.len()).filter(|&i| self.gamma(i, j)).collect()
    }
}

/// Aggregated interests `r` (`c×d`).
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedInterests(pub Matrix);

/// `e_s W` reshaped row-major into `c` rows of width `d`.
pub fn project_target(e_s: &[f64], w: &Matrix, channels: usize) -> Result<Matrix> {
    let d = e_s.len();
    if w.rows() != d || w.cols() != channels * d {
        return Err(Error::Dimension {
            op: "project_target",
            left: (1, d),
            right: w.shape(),
        });
    }
    Matrix::row_vector(e_s).matmul(w)?.reshape(channels, d)
}

/// Modified Gram–Schmidt over the rows of `s` (value-level wrapper around
/// [`orthogonalize_groups`]).
pub fn orthogonalize(s: &Matrix) -> Result<InterestChannels> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let o = orthogonalize_groups(&mut tape, sv, s.rows())?;
    Ok(InterestChannels(tape.value(o).clone()))
}

/// First canonical direction orthogonal to `accepted`, normalized.
fn rescue_direction(accepted: &[&[f64]], d: usize) -> Vec<f64> {
    for k in 0..d {
        let mut u = vec![0.0; d];
        u[k] = 1.0;
        for o in accepted {
            let dot: f64 = u.iter().zip(o.iter()).map(|(a, b)| a * b).sum();
            for (x, y) in u.iter_mut().zip(o.iter()) {
                *x -= dot * y;
            }
        }
        let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-3 {
            u.iter_mut().for_each(|v| *v /= n);
            return u;
        }
    }
    unreachable!("fewer than d accepted rows always leave a canonical direction")
}

/// Differentiable row-wise Gram–Schmidt on `s ((G·c)×d)`, one group of `c`
/// rows per example. Rows whose residual falls below [`RESCUE_THRESHOLD`]
/// are replaced by a detached canonical direction.
pub fn orthogonalize_groups(tape: &mut Tape, s: Var, c: usize) -> Result<Var> {
    let (rows, d) = tape.shape(s);
    if c == 0 || rows % c != 0 {
        return Err(Error::Dimension {
            op: "orthogonalize",
            left: (rows, d),
            right: (c, d),
        });
    }
    if c > d {
        return Err(Error::Config(format!(
            "cannot orthogonalize {c} channels in dimension {d}"
        )));
    }
    let groups = rows / c;
    let mut accepted: Vec<Var> = Vec::with_capacity(c);
    for j in 0..c {
        let mut v = tape.gather_rows(s, (0..groups).map(|g| g * c + j).collect())?;
        for &o in &accepted {
            let coef = tape.row_dot(v, o)?;
            let proj = tape.mul_col(o, coef)?;
            v = tape.sub(v, proj)?;
        }
        let prev = accepted.clone();
        let rescues: Vec<(usize, Vec<f64>)> = tape.frozen(|t| {
            let vv = t.value(v);
            (0..groups)
                .filter(|&g| vv.row(g).iter().map(|x| x * x).sum::<f64>().sqrt() < RESCUE_THRESHOLD)
                .map(|g| {
                    let acc: Vec<&[f64]> = prev.iter().map(|&o| t.value(o).row(g)).collect();
                    (g, rescue_direction(&acc, d))
                })
                .collect()
        });
        let mut o = tape.normalize_rows(v, 1e-12);
        if !rescues.is_empty() {
            o = tape.replace_rows(o, rescues)?;
        }
        accepted.push(o);
    }
    let stacked = tape.concat_rows(&accepted)?;
    // channel-major -> example-major
    let order = (0..groups)
        .flat_map(|g| (0..c).map(move |j| j * groups + g))
        .collect();
    tape.gather_rows(stacked, order)
}

/// `A = E Oᵀ`
pub fn score(e: &Matrix, o: &InterestChannels) -> Result<Matrix> {
    e.matmul_bt(&o.0)
}

/// Higher score first, then lower row index.
fn rank_order(col: &[f64], a: usize, b: usize) -> Ordering {
    col[b].total_cmp(&col[a]).then(a.cmp(&b))
}

/// Exclusive top-1 routing; ties go to the lowest channel index.
pub fn route(a: &Matrix, mask: &[bool]) -> Vec<Option<usize>> {
    (0..a.rows())
        .map(|i| {
            if !mask[i] {
                return None;
            }
            let row = a.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            Some(best)
        })
        .collect()
}

/// Indices of the `m` best real behaviors of one score column.
fn top_rows(column: &[f64], mask: &[bool], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..column.len()).filter(|&i| mask[i]).collect();
    if m == 0 {
        return Vec::new();
    }
    if m < idx.len() {
        idx.select_nth_unstable_by(m - 1, |&a, &b| rank_order(column, a, b));
        idx.truncate(m);
    }
    idx.sort_unstable();
    idx
}

/// Channel filtering on top of a routing.
pub fn filter(a: &Matrix, routed: Vec<Option<usize>>, filter: Filter, mask: &[bool]) -> RoutingAssignment {
    let c = a.cols();
    let n = mask.iter().filter(|&&m| m).count();
    let m = filter.keep_count(n);
    let mut kept = vec![false; a.rows()];
    let mut column = vec![0.0; a.rows()];
    for j in 0..c {
        if !routed.contains(&Some(j)) {
            continue;
        }
        for (i, v) in column.iter_mut().enumerate() {
            *v = a.get(i, j);
        }
        for i in top_rows(&column, mask, m) {
            if routed[i] == Some(j) {
                kept[i] = true;
            }
        }
    }
    RoutingAssignment {
        channels: c,
        routed,
        kept,
    }
}

/// Mean of each channel's surviving behaviors; zero for empty channels.
pub fn aggregate(e: &Matrix, routing: &RoutingAssignment) -> AggregatedInterests {
    let d = e.cols();
    let mut r = Matrix::zeros(routing.channels, d);
    for j in 0..routing.channels {
        let sel = routing.selected(j);
        if sel.is_empty() {
            continue;
        }
        let w = 1.0 / sel.len() as f64;
        let row = r.row_mut(j);
        for i in sel {
            for (o, v) in row.iter_mut().zip(e.row(i)) {
                *o += w * v;
            }
        }
    }
    AggregatedInterests(r)
}

/// Similarity-only selection: the best `filter.keep_count(n)` real behaviors
/// by `⟨e_i, e_s⟩`.
pub fn similarity_select(scores: &[f64], mask: &[bool], filter: Filter) -> Vec<usize> {
    let n = mask.iter().filter(|&&m| m).count();
    top_rows(scores, mask, filter.keep_count(n))
}

#[derive(Clone, Debug)]
pub struct OmieParams {
    /// `d × (c·d)` target projection.
    pub projection: ParamId,
}

impl OmieParams {
    pub fn init(store: &mut ParamStore, d: usize, c: usize, rng: &mut Rng) -> Self {
        Self {
            projection: store.add_glorot("omie.projection", d, c * d, rng),
        }
    }
}

/// Batched extraction result.
#[derive(Clone, Debug)]
pub struct OmieOutput {
    /// `(B·c)×d` interest channels.
    pub channels: Var,
    /// `(B·l)×c` behavior/channel scores.
    pub scores: Var,
    pub routing: Vec<RoutingAssignment>,
    /// `(B·c)×d` aggregated interests.
    pub interests: Var,
}

pub fn extract(
    tape: &mut Tape,
    store: &ParamStore,
    params: &OmieParams,
    emb: &BatchEmbeddings,
    ids: &SequenceIds,
    c: usize,
    filt: Filter,
) -> Result<OmieOutput> {
    let b = ids.batch_size();
    let l = ids.l;
    let d = tape.shape(emb.e_s).1;
    let w = tape.param(store, params.projection);
    let projected = tape.matmul(emb.e_s, w)?;
    let s = tape.reshape(projected, b * c, d)?;
    let channels = orthogonalize_groups(tape, s, c)?;
    let scores = tape.grouped_matmul_bt(emb.e, channels, l, c)?;
    let routing: Vec<RoutingAssignment> = tape.frozen(|t| {
        let a = t.value(scores);
        (0..b)
            .map(|bi| {
                let block = Matrix::from_vec(l, c, a.data()[bi * l * c..(bi + 1) * l * c].to_vec())
                    .expect("block shape");
                let mask = ids.example_mask(bi);
                filter(&block, route(&block, mask), filt, mask)
            })
            .collect()
    });
    let mut map = RowMap::new();
    for (bi, ra) in routing.iter().enumerate() {
        for j in 0..c {
            let rows: Vec<usize> = ra.selected(j).into_iter().map(|i| bi * l + i).collect();
            map.push_mean(&rows);
        }
    }
    let interests = tape.combine_rows(emb.e, map)?;
    Ok(OmieOutput {
        channels,
        scores,
        routing,
        interests,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn all_valid(n: usize) -> Vec<bool> {
        vec![true; n]
    }

    #[test]
    fn projection_examples() {
        let w = Matrix::zeros(8, 32);
        let s = project_target(&[0.3; 8], &w, 4).unwrap();
        assert_eq!(s.shape(), (4, 8));
        assert!(s.data().iter().all(|&v| v == 0.0));

        let w = Matrix::from_rows(&[[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0]]);
        let s = project_target(&[1.0, 2.0], &w, 2).unwrap();
        assert_eq!(s, Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0]]));
    }

    #[test]
    fn gram_schmidt_examples() {
        let o = orthogonalize(&Matrix::from_rows(&[[2.0, 0.0], [0.0, 3.0]])).unwrap();
        assert_eq!(o.0, Matrix::identity(2));
        let o = orthogonalize(&Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0]])).unwrap();
        assert!(o.0.sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn duplicated_rows_are_rescued() {
        let o = orthogonalize(&Matrix::from_rows(&[[0.6, 0.8, 0.0], [0.6, 0.8, 0.0]])).unwrap();
        assert!(o.orthonormality_error() < 1e-12);
        // first canonical direction with a usable residual is e_1
        let second = o.0.row(1);
        let dot: f64 = second.iter().zip(o.0.row(0)).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12);
        let zeros = orthogonalize(&Matrix::zeros(3, 5)).unwrap();
        assert!(zeros.orthonormality_error() < 1e-12);
        assert_eq!(zeros.0.row(0), &[1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn too_many_channels_is_config_error() {
        assert!(matches!(
            orthogonalize(&Matrix::zeros(3, 2)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn score_examples() {
        let mut rng = Rng::new(1);
        let o = orthogonalize(&rng.gaussian(4, 8)).unwrap();
        let a = score(&o.0, &o).unwrap();
        assert!(a.sub(&Matrix::identity(4)).unwrap().max_abs() < 1e-12);

        let mut e = rng.gaussian(5, 8);
        e.row_mut(2).fill(0.0);
        let a = score(&e, &o).unwrap();
        assert!(a.row(2).iter().all(|&v| v == 0.0));
        for i in 0..5 {
            for j in 0..4 {
                let dot: f64 = e.row(i).iter().zip(o.0.row(j)).map(|(x, y)| x * y).sum();
                assert!((a.get(i, j) - dot).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn routing_examples() {
        let a = Matrix::from_rows(&[[0.9, 0.1], [0.2, 0.8], [0.5, 0.4], [0.5, 0.5]]);
        let r = route(&a, &[true, true, true, true]);
        assert_eq!(r, vec![Some(0), Some(1), Some(0), Some(0)]);
        let r = route(&a, &[true, false, true, true]);
        assert_eq!(r[1], None);
    }

    #[test]
    fn filter_examples() {
        let mut rng = Rng::new(2);
        let a = rng.gaussian(10, 3);
        let mask = all_valid(10);
        let routed = route(&a, &mask);
        let full = filter(&a, routed.clone(), Filter::top_p(100.0).unwrap(), &mask);
        for i in 0..10 {
            assert_eq!(full.kept[i], true);
        }

        let a = Matrix::from_rows(&[[0.9, 0.0], [0.8, 0.1], [0.1, 0.3], [0.0, 0.7]]);
        let mask = all_valid(4);
        let g = filter(&a, route(&a, &mask), Filter::top_p(25.0).unwrap(), &mask);
        assert_eq!(g.selected(0), vec![0]);
        assert_eq!(g.selected(1), vec![3]);

        assert_eq!(Filter::top_p(20.0).unwrap().keep_count(5000), 1000);
        assert_eq!(Filter::top_p(20.0).unwrap().keep_count(3), 1);
        assert_eq!(Filter::top_k(40).unwrap().keep_count(10), 10);
        assert!(Filter::top_p(0.0).is_err());
        assert!(Filter::top_p(100.5).is_err());
    }

    #[test]
    fn rank_ties_prefer_lower_row() {
        let a = Matrix::from_rows(&[[0.5], [0.5], [0.5], [0.1]]);
        let mask = all_valid(4);
        let g = filter(&a, route(&a, &mask), Filter::top_p(50.0).unwrap(), &mask);
        assert_eq!(g.selected(0), vec![0, 1]);
    }

    #[test]
    fn filter_ignores_padding_population() {
        // two padded rows scoring 0 must not count toward n
        let a = Matrix::from_rows(&[[0.0], [0.0], [-0.5], [-0.2], [-0.9], [-0.1]]);
        let mask = [false, false, true, true, true, true];
        let g = filter(&a, route(&a, &mask), Filter::top_p(50.0).unwrap(), &mask);
        assert_eq!(g.selected(0), vec![3, 5]);
    }

    #[test]
    fn aggregate_examples() {
        let e = Matrix::from_rows(&[[1.0, 1.0], [3.0, 3.0], [5.0, 7.0]]);
        let ra = RoutingAssignment {
            channels: 3,
            routed: vec![Some(0), Some(0), Some(1)],
            kept: vec![true, true, true],
        };
        let r = aggregate(&e, &ra);
        assert_eq!(r.0.row(0), &[2.0, 2.0]);
        assert_eq!(r.0.row(1), &[5.0, 7.0]);
        assert_eq!(r.0.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn orthogonality_over_random_targets() {
        let mut rng = Rng::new(77);
        for c in [2usize, 4, 8] {
            for _ in 0..200 {
                let e_s = rng.gaussian(1, 8);
                let w = rng.gaussian(8, c * 8);
                let s = project_target(e_s.data(), &w, c).unwrap();
                let o = orthogonalize(&s).unwrap();
                assert!(o.orthonormality_error() < 1e-5);
            }
        }
    }

    fn arb_scores(max_l: usize, c: usize) -> impl Strategy<Value = (Matrix, Vec<bool>)> {
        (2..max_l).prop_flat_map(move |l| {
            (
                proptest::collection::vec(-10.0f64..10.0, l * c),
                proptest::collection::vec(proptest::bool::weighted(0.8), l),
            )
                .prop_map(move |(v, m)| (Matrix::from_vec(l, c, v).unwrap(), m))
        })
    }

    proptest! {
        #[test]
        fn routing_is_exclusive((a, mask) in arb_scores(40, 4)) {
            let r = route(&a, &mask);
            for i in 0..a.rows() {
                let count = (0..4).filter(|&j| r[i] == Some(j)).count();
                prop_assert_eq!(count, usize::from(mask[i]));
            }
        }

        #[test]
        fn gamma_implies_phi_and_is_monotone((a, mask) in arb_scores(40, 3), p1 in 1.0f64..100.0, p2 in 1.0f64..100.0) {
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            let routed = route(&a, &mask);
            let g_lo = filter(&a, routed.clone(), Filter::top_p(lo).unwrap(), &mask);
            let g_hi = filter(&a, routed, Filter::top_p(hi).unwrap(), &mask);
            for i in 0..a.rows() {
                for j in 0..3 {
                    prop_assert!(!g_lo.gamma(i, j) || g_lo.phi(i, j));
                    prop_assert!(!g_lo.gamma(i, j) || g_hi.gamma(i, j));
                }
            }
        }

        #[test]
        fn permutation_covariance(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let l = 12;
            let e = rng.gaussian(l, 8);
            let o = orthogonalize(&rng.gaussian(3, 8)).unwrap();
            let mask = vec![true; l];
            let filt = Filter::top_p(50.0).unwrap();
            let a = score(&e, &o).unwrap();
            let r = aggregate(&e, &filter(&a, route(&a, &mask), filt, &mask));
            let mut perm: Vec<usize> = (0..l).collect();
            rng.shuffle(&mut perm);
            let rows: Vec<&[f64]> = perm.iter().map(|&p| e.row(p)).collect();
            let ep = Matrix::from_rows(&rows);
            let ap = score(&ep, &o).unwrap();
            let gp = filter(&ap, route(&ap, &mask), filt, &mask);
            let g = filter(&a, route(&a, &mask), filt, &mask);
            for (new_i, &old_i) in perm.iter().enumerate() {
                prop_assert_eq!(gp.routed[new_i], g.routed[old_i]);
                prop_assert_eq!(gp.kept[new_i], g.kept[old_i]);
            }
            let rp = aggregate(&ep, &gp);
            prop_assert!(rp.0.sub(&r.0).unwrap().max_abs() < 1e-12);
        }

        #[test]
        fn positive_scaling_keeps_selection(seed in 0u64..1000, factor in 0.01f64..100.0) {
            let mut rng = Rng::new(seed);
            let e = rng.gaussian(15, 8);
            let o = orthogonalize(&rng.gaussian(4, 8)).unwrap();
            let mask = vec![true; 15];
            let filt = Filter::top_p(30.0).unwrap();
            let a = score(&e, &o).unwrap();
            let a2 = score(&e.scale(factor), &o).unwrap();
            let g = filter(&a, route(&a, &mask), filt, &mask);
            let g2 = filter(&a2, route(&a2, &mask), filt, &mask);
            prop_assert_eq!(g, g2);
        }
    }
}
