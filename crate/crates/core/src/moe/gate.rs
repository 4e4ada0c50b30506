use std::collections::BTreeSet;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};

use crate::config::MoeConfig;
use crate::error::{Error, Result};

/// Per-expert token capacity, enforced independently on `segments`
/// contiguous, equally sized token ranges.
///
/// With `segments == N_MP` every schedule sees the same admission decisions:
/// a gate over one MP shard of the tokens applies exactly the rule a gate
/// over all tokens applies to that shard's range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapacityPolicy {
    pub per_segment: usize,
    pub segments: usize,
}

impl CapacityPolicy {
    pub fn single(capacity: usize) -> Self {
        Self {
            per_segment: capacity,
            segments: 1,
        }
    }

    /// `T' = ceil(T / N_MP)` slots per expert for each of the `N_MP` shards.
    pub fn for_mp(cfg: &MoeConfig, mp: usize) -> Self {
        let t = cfg.capacity();
        Self {
            per_segment: t.div_ceil(mp),
            segments: mp,
        }
    }

    /// The policy a gate over one segment alone has to apply.
    pub fn per_shard(&self) -> Self {
        Self::single(self.per_segment)
    }

    /// Rows per expert in the dispatch tensor.
    pub fn slots(&self) -> usize {
        self.per_segment * self.segments
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Route {
    pub expert: usize,
    /// Softmax probability of this expert for the token.
    pub score: f64,
    /// Row inside the expert's slice of the dispatch tensor, `None` if the
    /// expert was already full.
    pub slot: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct GateOutput {
    /// Shape `(E, slots, M)`; unused slots stay zero.
    pub dispatch: Array3<f64>,
    /// The k routes of every token, best expert first.
    pub routes: Vec<Vec<Route>>,
    /// `(token, expert)` pairs rejected by capacity.
    pub dropped: BTreeSet<(usize, usize)>,
    pub policy: CapacityPolicy,
}

impl GateOutput {
    pub fn num_tokens(&self) -> usize {
        self.routes.len()
    }

    pub fn used_slots(&self, expert: usize) -> usize {
        self.routes
            .iter()
            .flatten()
            .filter(|r| r.expert == expert && r.slot.is_some())
            .count()
    }
}

fn softmax_row(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Softmax gate with top-k selection and capacity-limited slot assignment.
///
/// Ties between equal probabilities go to the lower expert index. Slots are
/// handed out in ascending token order; within a token its experts are
/// visited best-first.
pub fn gate(
    tokens: ArrayView2<f64>,
    gate_weights: ArrayView2<f64>,
    top_k: usize,
    policy: CapacityPolicy,
) -> Result<GateOutput> {
    let (n, m) = tokens.dim();
    let (gm, experts) = gate_weights.dim();
    if gm != m {
        return Err(Error::Dimension(format!(
            "gate weights have {gm} rows but tokens have embedding {m}"
        )));
    }
    if top_k == 0 || top_k > experts {
        return Err(Error::InvalidConfig(format!("top-k {top_k} must be in 1..={experts}")));
    }
    if n == 0 || policy.segments == 0 || n % policy.segments != 0 {
        return Err(Error::Indivisible {
            op: "gate",
            len: n as u64,
            parts: policy.segments as u64,
        });
    }
    let seg_len = n / policy.segments;
    let slots = policy.slots();
    let logits = tokens.dot(&gate_weights);

    let mut dispatch = Array3::zeros((experts, slots, m));
    let mut fill = vec![vec![0usize; experts]; policy.segments];
    let mut routes = Vec::with_capacity(n);
    let mut dropped = BTreeSet::new();

    let mut order: Vec<usize> = (0..experts).collect();
    for t in 0..n {
        let mut probs = logits.row(t).to_vec();
        softmax_row(&mut probs);
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));

        let seg = t / seg_len;
        let mut token_routes = Vec::with_capacity(top_k);
        for &e in &order[..top_k] {
            let used = &mut fill[seg][e];
            let slot = if *used < policy.per_segment {
                let slot = seg * policy.per_segment + *used;
                *used += 1;
                dispatch.slice_mut(s![e, slot, ..]).assign(&tokens.row(t));
                Some(slot)
            } else {
                dropped.insert((t, e));
                None
            };
            token_routes.push(Route {
                expert: e,
                score: probs[e],
                slot,
            });
        }
        routes.push(token_routes);
    }

    Ok(GateOutput {
        dispatch,
        routes,
        dropped,
        policy,
    })
}

/// Weighted sum of each token's expert outputs; dropped routes add nothing.
pub fn combine(gate: &GateOutput, expert_out: ArrayView3<f64>) -> Result<Array2<f64>> {
    if expert_out.dim() != gate.dispatch.dim() {
        return Err(Error::Dimension(format!(
            "expert output {:?} does not match dispatch tensor {:?}",
            expert_out.dim(),
            gate.dispatch.dim()
        )));
    }
    let m = expert_out.dim().2;
    let mut out = Array2::zeros((gate.num_tokens(), m));
    for (t, routes) in gate.routes.iter().enumerate() {
        let mut row = out.row_mut(t);
        for r in routes {
            if let Some(slot) = r.slot {
                row.scaled_add(r.score, &expert_out.slice(s![r.expert, slot, ..]));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ties_go_to_lower_expert() {
        let tokens = Array2::from_elem((5, 3), 0.7);
        let w = Array2::zeros((3, 2));
        let out = gate(tokens.view(), w.view(), 1, CapacityPolicy::single(5)).unwrap();
        for routes in &out.routes {
            assert_eq!(routes.len(), 1);
            assert_eq!(routes[0].expert, 0);
            assert!((routes[0].score - 0.5).abs() < 1e-15);
        }
        assert_eq!(out.used_slots(0), 5);
        assert_eq!(out.used_slots(1), 0);
    }

    #[test]
    fn full_selection_hits_every_expert() {
        let tokens = array![[1.0, -2.0], [0.5, 0.25], [3.0, 1.0]];
        let w = array![[0.3, -0.1], [0.2, 0.4]];
        let out = gate(tokens.view(), w.view(), 2, CapacityPolicy::single(3)).unwrap();
        assert!(out.dropped.is_empty());
        for e in 0..2 {
            assert_eq!(out.used_slots(e), 3);
            for t in 0..3 {
                let row = out.routes[t].iter().find(|r| r.expert == e).unwrap();
                let slot = row.slot.unwrap();
                assert_eq!(out.dispatch.slice(s![e, slot, ..]), tokens.row(t));
            }
        }
    }

    #[test]
    fn capacity_one_drops_surplus() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tokens = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let w = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));
        let out = gate(tokens.view(), w.view(), 1, CapacityPolicy::single(1)).unwrap();
        for e in 0..2 {
            assert!(out.used_slots(e) <= 1);
        }
        assert_eq!(out.dropped.len(), 4 - out.used_slots(0) - out.used_slots(1));

        // brute force: the first token choosing each expert keeps it
        let mut expected = BTreeSet::new();
        let mut taken = [false; 2];
        for (t, routes) in out.routes.iter().enumerate() {
            let e = routes[0].expert;
            if taken[e] {
                expected.insert((t, e));
            }
            taken[e] = true;
        }
        assert_eq!(out.dropped, expected);
    }

    #[test]
    fn segmented_capacity_matches_per_shard_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tokens = Array2::from_shape_fn((12, 4), |_| rng.gen_range(-1.0..1.0));
        let w = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let policy = CapacityPolicy {
            per_segment: 2,
            segments: 3,
        };
        let full = gate(tokens.view(), w.view(), 2, policy).unwrap();
        for seg in 0..3 {
            let part = tokens.slice(s![seg * 4..(seg + 1) * 4, ..]);
            let shard = gate(part, w.view(), 2, policy.per_shard()).unwrap();
            let shifted: BTreeSet<_> = shard.dropped.iter().map(|&(t, e)| (t + seg * 4, e)).collect();
            let expected: BTreeSet<_> = full.dropped.iter().copied().filter(|&(t, _)| t / 4 == seg).collect();
            assert_eq!(shifted, expected);
            for e in 0..3 {
                assert_eq!(
                    shard.dispatch.slice(s![e, .., ..]),
                    full.dispatch.slice(s![e, seg * 2..(seg + 1) * 2, ..])
                );
            }
        }
    }

    #[test]
    fn gate_errors() {
        let tokens = Array2::zeros((4, 3));
        assert!(gate(
            tokens.view(),
            Array2::zeros((3, 2)).view(),
            3,
            CapacityPolicy::single(1)
        )
        .is_err());
        assert!(gate(
            tokens.view(),
            Array2::zeros((2, 2)).view(),
            1,
            CapacityPolicy::single(1)
        )
        .is_err());
        let policy = CapacityPolicy {
            per_segment: 1,
            segments: 3,
        };
        assert!(gate(tokens.view(), Array2::zeros((3, 2)).view(), 1, policy).is_err());
    }

    #[test]
    fn combine_weights_by_score() {
        let tokens = array![[1.0, 0.0], [0.0, 1.0]];
        let w = Array2::zeros((2, 2));
        let out = gate(tokens.view(), w.view(), 2, CapacityPolicy::single(2)).unwrap();
        // identity experts: output = sum of scores * token = token
        let y = combine(&out, out.dispatch.view()).unwrap();
        assert!((&y - &tokens).iter().all(|v| v.abs() < 1e-15));
    }
}
