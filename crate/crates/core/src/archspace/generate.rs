use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ArchError, Architecture, Constraints, OpCode};

/// Spaces at most this large are counted exactly before sampling.
pub const ENUMERATION_LIMIT: usize = 10_000;
/// Consecutive rejections tolerated per requested architecture.
pub const REJECTION_BUDGET: usize = 1_000;

fn forward_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|s| (s + 1..n).map(move |d| (s, d))).collect()
}

/// Number of distinct architectures reachable by the generator (forward
/// edges only), or `None` once the count exceeds `limit`.
pub fn count_forward_space(constraints: &Constraints, limit: usize) -> Option<usize> {
    let mut total = 0usize;
    for n in 2..=constraints.max_nodes {
        if n - 1 > constraints.max_edges {
            break;
        }
        let pairs = forward_pairs(n);
        if pairs.len() >= usize::BITS as usize {
            return None;
        }
        let mut structures = 0usize;
        let op_choices = 3usize.checked_pow((n - 2) as u32)?;
        for mask in 0u64..(1u64 << pairs.len()) {
            if mask.count_ones() as usize > constraints.max_edges {
                continue;
            }
            let edges: Vec<_> = pairs
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, &e)| e)
                .collect();
            let mut nodes = vec![OpCode::OpA; n];
            nodes[0] = OpCode::Input;
            nodes[n - 1] = OpCode::Output;
            let a = Architecture {
                nodes,
                edges,
                id: String::new(),
            };
            if a.structural_violations().is_empty() {
                structures += 1;
                if total + structures.saturating_mul(op_choices) > limit {
                    return None;
                }
            }
        }
        total += structures * op_choices;
        if total > limit {
            return None;
        }
    }
    Some(total)
}

fn sample_one<R: Rng>(constraints: &Constraints, rng: &mut R) -> Architecture {
    let n = rng.gen_range(2..=constraints.max_nodes);
    let mut nodes = Vec::with_capacity(n);
    nodes.push(OpCode::Input);
    for _ in 1..n - 1 {
        nodes.push(OpCode::HIDDEN[rng.gen_range(0..3)]);
    }
    nodes.push(OpCode::Output);
    let pairs = forward_pairs(n);
    let hi = constraints.max_edges.min(pairs.len());
    let lo = (n - 1).min(hi);
    let m = rng.gen_range(lo..=hi);
    let mut edges: Vec<_> = sample(rng, pairs.len(), m)
        .into_iter()
        .map(|i| pairs[i])
        .collect();
    edges.sort_unstable();
    Architecture::new(nodes, edges)
}

/// Draws `count` distinct valid architectures by rejection sampling.
pub fn generate_space(
    seed: u64,
    count: usize,
    constraints: &Constraints,
) -> Result<Vec<Architecture>, ArchError> {
    if constraints.max_nodes < 2 || constraints.max_edges < 1 {
        return Err(ArchError::Constraints(format!(
            "need max_nodes >= 2 and max_edges >= 1, got {constraints:?}"
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    if let Some(available) = count_forward_space(constraints, ENUMERATION_LIMIT) {
        if available < count {
            return Err(ArchError::SpaceTooSmall {
                available,
                requested: count,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut rejections = 0;
        loop {
            let a = sample_one(constraints, &mut rng);
            if a.validate(constraints).is_empty() && seen.insert(a.id.clone()) {
                out.push(a);
                break;
            }
            rejections += 1;
            if rejections >= REJECTION_BUDGET {
                return Err(ArchError::BudgetExhausted {
                    produced: out.len(),
                    requested: count,
                });
            }
        }
    }
    Ok(out)
}
