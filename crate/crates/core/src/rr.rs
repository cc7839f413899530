//! Randomized response over the full pair space.
//!
//! Every unordered entity pair carries one membership bit, flipped
//! independently with probability `1/(1+e^ε)`. The output is ε-DP for the
//! relation set but costs `Θ(N²)` and densifies the graph for small ε.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::graph::{Relation, TextAttributedGraph};
use crate::rng;

/// Entity count above which the baseline refuses to run without an override.
pub const RR_ENTITY_GUARD: usize = 5000;

/// `1 / (1 + e^ε)`; 0.5 at ε = 0 and → 0 as ε → ∞.
pub fn flip_probability(epsilon: f64) -> f64 {
    // exp overflows to +inf for large ε, giving exactly 0.
    1.0 / (1.0 + epsilon.exp())
}

/// Number of unordered pairs over `n` entities.
pub fn pair_count(n: usize) -> u64 {
    let n = n as u64;
    n * n.saturating_sub(1) / 2
}

#[derive(Debug, Clone, PartialEq)]
pub struct RrOutput {
    pub relations: Vec<Relation>,
    pub flip_probability: f64,
    pub pairs_visited: u64,
}

/// Applies randomized response to every pair of `graph`'s entities.
pub fn randomized_response(
    graph: &TextAttributedGraph,
    epsilon: f64,
    seed: u64,
    allow_large: bool,
) -> Result<RrOutput> {
    if !(epsilon >= 0.0) {
        return Err(invalid("epsilon must be non-negative"));
    }
    let n = graph.n_entities();
    if n > RR_ENTITY_GUARD && !allow_large {
        return Err(invalid(format!(
            "{n} entities exceed the randomized-response guard of {RR_ENTITY_GUARD} \
             ({} pairs); pass the override to proceed",
            pair_count(n)
        )));
    }
    let p = flip_probability(epsilon);
    let mut rng = rng::stream(seed, "rr", &[]);
    let input = graph.relations();
    let mut next = 0;
    let mut out = Vec::new();
    for u in 0..n as u32 {
        for v in (u + 1)..n as u32 {
            let pair = Relation::new(u, v).expect("u < v");
            let present = next < input.len() && input[next] == pair;
            if present {
                next += 1;
            }
            let flip = p > 0.0 && rng.gen::<f64>() < p;
            if present != flip {
                out.push(pair);
            }
        }
    }
    Ok(RrOutput {
        relations: out,
        flip_probability: p,
        pairs_visited: pair_count(n),
    })
}

/// Expected output size `|E|(1−p) + (pairs−|E|)p`.
pub fn expected_output_size(n_entities: usize, n_relations: usize, epsilon: f64) -> f64 {
    let p = flip_probability(epsilon);
    let pairs = pair_count(n_entities) as f64;
    let e = n_relations as f64;
    e * (1.0 - p) + (pairs - e) * p
}
