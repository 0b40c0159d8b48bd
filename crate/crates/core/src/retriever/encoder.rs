use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tokenize::{TokenSequence, Tokenizer, FIRST_REGULAR_ID};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RAGW";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Which side of the query/document pair an operation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Query,
    #[serde(alias = "context")]
    Document,
}

/// Per-position embeddings, `n` rows of width `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub vectors: DMatrix<f64>,
}

impl EmbeddingSequence {
    pub fn positions(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.vectors.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let h = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != h) {
            return Err(Error::Shape(format!("ragged embedding rows: {} vs {h}", bad.len())));
        }
        Ok(EmbeddingSequence {
            vectors: DMatrix::from_row_iterator(rows.len(), h, rows.iter().flatten().copied()),
        })
    }
}

/// Dimensions of a reference encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub vocab: usize,
    pub h: usize,
    pub max_len: usize,
}

impl Default for EncoderShape {
    fn default() -> Self {
        EncoderShape { vocab: 4096, h: 32, max_len: 128 }
    }
}

/// Minimal dense encoder: `act(W · meanpool(token + position) + b)`.
///
/// The mean runs over non-padding positions. Positional embeddings are
/// fixed sinusoids, so only the token table, `W`, and `b` are weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEncoder {
    pub shape: EncoderShape,
    pub token_embeddings: DMatrix<f64>,
    pub projection: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
    positional: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct WeightFile {
    vocab: usize,
    h: usize,
    max_len: usize,
    #[serde(default = "default_activation")]
    activation: Activation,
    token_embeddings: Vec<Vec<f64>>,
    projection: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl ReferenceEncoder {
    pub fn new(
        shape: EncoderShape,
        token_embeddings: DMatrix<f64>,
        projection: DMatrix<f64>,
        bias: DVector<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if shape.vocab <= FIRST_REGULAR_ID as usize {
            return Err(Error::UnknownSpecialToken(format!(
                "vocabulary of {} cannot hold the special tokens",
                shape.vocab
            )));
        }
        if token_embeddings.shape() != (shape.vocab, shape.h) {
            return Err(Error::Weights(format!(
                "token table is {:?}, expected ({}, {})",
                token_embeddings.shape(),
                shape.vocab,
                shape.h
            )));
        }
        if projection.shape() != (shape.h, shape.h) || bias.len() != shape.h {
            return Err(Error::Weights(format!(
                "projection {:?} / bias {} do not match h = {}",
                projection.shape(),
                bias.len(),
                shape.h
            )));
        }
        let finite = token_embeddings.iter().chain(projection.iter()).chain(bias.iter()).all(|x| x.is_finite());
        if !finite {
            return Err(Error::Weights("non-finite weight".into()));
        }
        Ok(ReferenceEncoder {
            positional: sinusoidal(shape.max_len, shape.h),
            shape,
            token_embeddings,
            projection,
            bias,
            activation,
        })
    }

    /// Deterministic weights from a seed: token embeddings `N(0, 1)`,
    /// projection `N(0, 1/h)`, bias `N(0, 0.01)`.
    pub fn seeded(seed: u64, shape: EncoderShape) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let tokens = DMatrix::from_fn(shape.vocab, shape.h, |_, _| unit.sample(&mut rng));
        let scale = 1.0 / (shape.h as f64).sqrt();
        let projection = DMatrix::from_fn(shape.h, shape.h, |_, _| scale * unit.sample(&mut rng));
        let bias = DVector::from_fn(shape.h, |_, _| 0.1 * unit.sample(&mut rng));
        ReferenceEncoder::new(shape, tokens, projection, bias, Activation::Tanh)
            .expect("seeded shapes are consistent")
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.shape.vocab as u32, self.shape.max_len)
    }

    pub fn hidden(&self) -> usize {
        self.shape.h
    }

    /// Fixed positional embedding of position `i`.
    pub fn positional(&self, i: usize) -> DVector<f64> {
        self.positional.row(i).transpose()
    }

    pub fn token_embedding(&self, id: u32) -> Result<DVector<f64>> {
        let id = id as usize;
        if id >= self.shape.vocab {
            return Err(Error::UnknownSpecialToken(format!("token id {id} outside vocabulary")));
        }
        Ok(self.token_embeddings.row(id).transpose())
    }

    /// `Φ(x)`: token embedding plus positional embedding per position.
    pub fn embed(&self, x: &TokenSequence) -> Result<EmbeddingSequence> {
        if x.len() > self.shape.max_len {
            return Err(Error::Shape(format!(
                "sequence of {} exceeds max_len {}",
                x.len(),
                self.shape.max_len
            )));
        }
        let mut vectors = DMatrix::zeros(x.len(), self.shape.h);
        for (i, &t) in x.tokens.iter().enumerate() {
            let row = self.token_embedding(t)? + self.positional(i);
            vectors.set_row(i, &row.transpose());
        }
        Ok(EmbeddingSequence { vectors })
    }

    fn pool(&self, emb: &DMatrix<f64>, mask: &[bool]) -> Result<(DVector<f64>, usize)> {
        if emb.ncols() != self.shape.h {
            return Err(Error::DimensionMismatch { expected: self.shape.h, found: emb.ncols() });
        }
        if mask.len() != emb.nrows() {
            return Err(Error::Shape(format!("mask of {} for {} positions", mask.len(), emb.nrows())));
        }
        let mut sum = DVector::zeros(self.shape.h);
        let mut count = 0;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            sum += emb.row(i).transpose();
            count += 1;
        }
        if count == 0 {
            return Err(Error::Precondition("no unmasked positions to pool".into()));
        }
        Ok((sum / count as f64, count))
    }

    fn pre_activation(&self, emb: &DMatrix<f64>, mask: &[bool]) -> Result<(DVector<f64>, usize)> {
        let (pooled, count) = self.pool(emb, mask)?;
        Ok((&self.projection * pooled + &self.bias, count))
    }

    /// Encodes raw embeddings with a pooling mask.
    pub fn encode_embeddings(&self, emb: &DMatrix<f64>, mask: &[bool]) -> Result<DVector<f64>> {
        let (z, _) = self.pre_activation(emb, mask)?;
        Ok(z.map(|v| self.activation.apply(v)))
    }

    pub fn encode(&self, x: &TokenSequence) -> Result<DVector<f64>> {
        self.encode_embeddings(&self.embed(x)?.vectors, &x.attention_mask())
    }

    /// Gradient of `upstream · encode(emb)` with respect to every row of
    /// `emb`. Rows outside the pooling mask get zero gradient.
    pub fn backward(&self, emb: &DMatrix<f64>, mask: &[bool], upstream: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (z, count) = self.pre_activation(emb, mask)?;
        let dz = upstream.component_mul(&z.map(|v| self.activation.derivative(v)));
        let row = (self.projection.transpose() * dz / count as f64).transpose();
        let mut grad = DMatrix::zeros(emb.nrows(), emb.ncols());
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            grad.set_row(i, &row);
        }
        Ok(grad)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(MAGIC) {
            Self::from_binary(&mut bytes.as_slice())
        } else {
            Self::from_json(std::str::from_utf8(&bytes).map_err(|e| Error::Weights(e.to_string()))?)
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: WeightFile = serde_json::from_str(text)?;
        let shape = EncoderShape { vocab: file.vocab, h: file.h, max_len: file.max_len };
        let tokens = rows_to_matrix(&file.token_embeddings, shape.vocab, shape.h, "token_embeddings")?;
        let projection = rows_to_matrix(&file.projection, shape.h, shape.h, "projection")?;
        ReferenceEncoder::new(shape, tokens, projection, DVector::from_vec(file.bias), file.activation)
    }

    pub fn to_json(&self) -> String {
        let rows = |m: &DMatrix<f64>| m.row_iter().map(|r| r.iter().copied().collect()).collect();
        let file = WeightFile {
            vocab: self.shape.vocab,
            h: self.shape.h,
            max_len: self.shape.max_len,
            activation: self.activation,
            token_embeddings: rows(&self.token_embeddings),
            projection: rows(&self.projection),
            bias: self.bias.iter().copied().collect(),
        };
        serde_json::to_string(&file).expect("weights serialize")
    }

    /// Little-endian layout: magic `RAGW`, `u32` version, `u32` vocab, `u32`
    /// h, `u32` max_len, `u8` activation (0 tanh, 1 identity), three zero
    /// bytes, then `f64` token table, projection (both row-major) and bias.
    pub fn write_binary<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(MAGIC)?;
        for v in [FORMAT_VERSION, self.shape.vocab as u32, self.shape.h as u32, self.shape.max_len as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        let act = match self.activation {
            Activation::Tanh => 0u8,
            Activation::Identity => 1u8,
        };
        out.write_all(&[act, 0, 0, 0])?;
        for m in [&self.token_embeddings, &self.projection] {
            for row in m.row_iter() {
                for v in row.iter() {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        for v in self.bias.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn from_binary<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Weights("bad magic".into()));
        }
        let read_u32 = |input: &mut R| -> Result<u32> {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let version = read_u32(input)?;
        if version != FORMAT_VERSION {
            return Err(Error::Weights(format!("unsupported version {version}")));
        }
        let shape = EncoderShape {
            vocab: read_u32(input)? as usize,
            h: read_u32(input)? as usize,
            max_len: read_u32(input)? as usize,
        };
        let mut flags = [0u8; 4];
        input.read_exact(&mut flags)?;
        let activation = match flags[0] {
            0 => Activation::Tanh,
            1 => Activation::Identity,
            other => return Err(Error::Weights(format!("unknown activation tag {other}"))),
        };
        let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            input.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
        };
        let tokens = DMatrix::from_row_slice(shape.vocab, shape.h, &read_f64s(shape.vocab * shape.h)?);
        let projection = DMatrix::from_row_slice(shape.h, shape.h, &read_f64s(shape.h * shape.h)?);
        let bias = DVector::from_vec(read_f64s(shape.h)?);
        ReferenceEncoder::new(shape, tokens, projection, bias, activation)
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Weights(format!("{what} must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_row_iterator(nrows, ncols, rows.iter().flatten().copied()))
}

/// `pos[i][2c] = sin(i / 10000^(2c/h))`, `pos[i][2c+1] = cos(...)`.
fn sinusoidal(max_len: usize, h: usize) -> DMatrix<f64> {
    DMatrix::from_fn(max_len, h, |i, c| {
        let freq = 10000f64.powf((2 * (c / 2)) as f64 / h as f64);
        let angle = i as f64 / freq;
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// A dual-encoder retriever scoring `e_qry(q) · e_ctx(d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRetriever {
    pub query: ReferenceEncoder,
    pub context: ReferenceEncoder,
}

impl ReferenceRetriever {
    pub fn new(query: ReferenceEncoder, context: ReferenceEncoder) -> Result<Self> {
        if query.hidden() != context.hidden() {
            return Err(Error::DimensionMismatch { expected: query.hidden(), found: context.hidden() });
        }
        Ok(ReferenceRetriever { query, context })
    }

    /// Both sides share one encoder.
    pub fn shared(encoder: ReferenceEncoder) -> Self {
        ReferenceRetriever { query: encoder.clone(), context: encoder }
    }

    pub fn encoder(&self, side: Side) -> &ReferenceEncoder {
        match side {
            Side::Query => &self.query,
            Side::Document => &self.context,
        }
    }

    /// Tokenizer for one side.
    pub fn tokenizer(&self, side: Side) -> Tokenizer {
        self.encoder(side).tokenizer()
    }

    /// Score of already-embedded inputs together with the gradient with
    /// respect to the `side` embeddings.
    pub fn score_and_gradient(
        &self,
        side: Side,
        embeddings: &DMatrix<f64>,
        mask: &[bool],
        companion: &DMatrix<f64>,
        companion_mask: &[bool],
    ) -> Result<(f64, DMatrix<f64>)> {
        let other = match side {
            Side::Query => Side::Document,
            Side::Document => Side::Query,
        };
        let own = self.encoder(side);
        let e_other = self.encoder(other).encode_embeddings(companion, companion_mask)?;
        let e_own = own.encode_embeddings(embeddings, mask)?;
        let grad = own.backward(embeddings, mask, &e_other)?;
        Ok((e_own.dot(&e_other), grad))
    }
}

/// `e_qry(q) · e_ctx(d)`.
pub fn score(q: &TokenSequence, d: &TokenSequence, enc_q: &ReferenceEncoder, enc_d: &ReferenceEncoder) -> Result<f64> {
    if enc_q.hidden() != enc_d.hidden() {
        return Err(Error::DimensionMismatch { expected: enc_q.hidden(), found: enc_d.hidden() });
    }
    Ok(enc_q.encode(q)?.dot(&enc_d.encode(d)?))
}

/// Brute-force ranking of `corpus` against `q`: descending score, ties by
/// ascending corpus index.
pub fn retrieve_topk(
    retriever: &ReferenceRetriever,
    q: &TokenSequence,
    corpus: &[TokenSequence],
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("corpus"));
    }
    if k > corpus.len() {
        return Err(Error::Precondition(format!("k = {k} exceeds corpus size {}", corpus.len())));
    }
    let e_q = retriever.query.encode(q)?;
    let mut scored = corpus
        .iter()
        .enumerate()
        .map(|(i, d)| Ok((i, e_q.dot(&retriever.context.encode(d)?))))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}
