//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ragaudit::retriever::{EncoderShape, ReferenceEncoder, ReferenceRetriever, Side, TokenSequence};
use ragaudit::shapley::{Coalition, SetValueOracle};

const WORDS: &[&str] = &[
    "salmonella", "outbreak", "recall", "listeria", "cheese", "poultry", "storage", "temperature", "bacteria",
    "kitchen", "restaurant", "inspection", "washing", "hands", "raw", "cooked", "vegetables", "water", "illness",
    "symptoms", "fever", "hospital", "report", "agency", "guidance", "freezer", "bread", "milk", "eggs", "lettuce",
];

pub fn random_text(rng: &mut impl Rng, words: usize) -> String {
    (0..words).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// Small seeded retriever plus a tokenized query and document.
pub struct RetrieverFixture {
    pub retriever: ReferenceRetriever,
    pub query: TokenSequence,
    pub document: TokenSequence,
}

pub fn retriever_fixture(seed: u64) -> RetrieverFixture {
    let shape = EncoderShape { vocab: 257, h: 16, max_len: 64 };
    let retriever = ReferenceRetriever::new(
        ReferenceEncoder::seeded(seed, shape),
        ReferenceEncoder::seeded(seed.wrapping_add(1_000_003), shape),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nq = rng.random_range(3..7);
    let nd = rng.random_range(8..20);
    let query = retriever.tokenizer(Side::Query).encode(&random_text(&mut rng, nq));
    let document = retriever.tokenizer(Side::Document).encode(&random_text(&mut rng, nd));
    RetrieverFixture { retriever, query, document }
}

/// Retrieval score computed from scratch with explicit loops.
pub fn naive_score(enc_q: &ReferenceEncoder, q: &DMatrix<f64>, qmask: &[bool], enc_d: &ReferenceEncoder, d: &DMatrix<f64>, dmask: &[bool]) -> f64 {
    let eq = naive_encode(enc_q, q, qmask);
    let ed = naive_encode(enc_d, d, dmask);
    eq.iter().zip(&ed).map(|(a, b)| a * b).sum()
}

pub fn naive_encode(enc: &ReferenceEncoder, emb: &DMatrix<f64>, mask: &[bool]) -> Vec<f64> {
    let h = emb.ncols();
    let mut pooled = vec![0.0; h];
    let mut count = 0.0;
    for i in 0..emb.nrows() {
        if mask[i] {
            for c in 0..h {
                pooled[c] += emb[(i, c)];
            }
            count += 1.0;
        }
    }
    (0..h)
        .map(|r| {
            let z: f64 = (0..h).map(|c| enc.projection[(r, c)] * pooled[c] / count).sum::<f64>() + enc.bias[r];
            match enc.activation {
                ragaudit::retriever::Activation::Tanh => z.tanh(),
                ragaudit::retriever::Activation::Identity => z,
            }
        })
        .collect()
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(x: &DMatrix<f64>, eps: f64, f: impl Fn(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(x.nrows(), x.ncols());
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[(i, j)] += eps;
            minus[(i, j)] -= eps;
            g[(i, j)] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
    }
    g
}

/// Shapley values by averaging marginal contributions over every
/// permutation of the players.
pub fn permutation_shapley<O: SetValueOracle>(oracle: &O) -> Vec<Vec<f64>> {
    let k = oracle.arity();
    let m = oracle.output_dim();
    let mut values = std::collections::HashMap::new();
    let mut value = |c: Coalition| -> Vec<f64> { values.entry(c.mask()).or_insert_with(|| oracle.evaluate(c).unwrap()).clone() };
    let mut phi = vec![vec![0.0; m]; k];
    let mut perm: Vec<usize> = (0..k).collect();
    let mut count = 0usize;
    loop {
        let mut current = Coalition::EMPTY;
        let mut prev = value(current);
        for &p in &perm {
            current = current.with(p);
            let next = value(current);
            for j in 0..m {
                phi[p][j] += next[j] - prev[j];
            }
            prev = next;
        }
        count += 1;
        if !next_permutation(&mut perm) {
            break;
        }
    }
    for row in &mut phi {
        for v in row.iter_mut() {
            *v /= count as f64;
        }
    }
    phi
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
