//! Piecewise convolutional relation classifier.
//!
//! The encoder concatenates a word vector with two position vectors (relative
//! distance to the head and tail entities) per token, applies one
//! convolutional layer, max-pools each filter over the three segments
//! delimited by the entity end positions, and classifies the tanh-squashed
//! pooled vector with a linear softmax layer. Forward and backward passes are
//! written by hand; the gradient of one example w.r.t. every trainable
//! parameter is exact and is verified against central finite differences.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GradVec, Layout, Matrix, ParamVec, PerExampleLoss};

/// Reserved vocabulary entry for padding tokens.
pub const PAD_TOKEN: &str = "<pad>";
/// Reserved vocabulary entry for out-of-vocabulary tokens.
pub const UNK_TOKEN: &str = "<unk>";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Token-to-row mapping with the two reserved rows at indices 0 and 1.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from tokens in the given order, skipping
    /// duplicates and the reserved strings.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut list = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut index = HashMap::new();
        index.insert(PAD_TOKEN.to_string(), PAD_ID);
        index.insert(UNK_TOKEN.to_string(), UNK_ID);
        for t in tokens {
            let t = t.as_ref();
            if !index.contains_key(t) {
                index.insert(t.to_string(), list.len());
                list.push(t.to_string());
            }
        }
        Vocab {
            tokens: list,
            index,
        }
    }

    /// Row id of a token; unknown tokens map to the reserved row.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// All tokens in row order, including the reserved rows.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Ordered relation names plus the id of the not-target type.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationSchema {
    names: Vec<String>,
    none_id: usize,
}

impl RelationSchema {
    pub fn new(names: Vec<String>, none: &str) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Input(format!("duplicate relation name {n:?}")));
            }
        }
        let none_id = names
            .iter()
            .position(|n| n == none)
            .ok_or_else(|| Error::Input(format!("none relation {none:?} not in schema")))?;
        Ok(RelationSchema { names, none_id })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_relations(&self) -> usize {
        self.names.len()
    }

    pub fn none_id(&self) -> usize {
        self.none_id
    }

    pub fn none_name(&self) -> &str {
        &self.names[self.none_id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    /// All relation ids except the not-target type.
    pub fn positive_ids(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.names.len()).filter(move |&r| r != self.none_id)
    }
}

/// One sentence with marked entity spans and a (possibly noisy) relation label.
///
/// Spans are inclusive token index pairs. `gold_label` is the hidden truth
/// carried by synthetic corpora only.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub tokens: Vec<String>,
    pub head_span: (usize, usize),
    pub tail_span: (usize, usize),
    pub label: usize,
    pub gold_label: Option<usize>,
}

impl Instance {
    pub fn validate(&self, schema: &RelationSchema) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::Input(format!("instance {}: empty token list", self.id)));
        }
        for (name, span) in [("head", self.head_span), ("tail", self.tail_span)] {
            if span.0 > span.1 || span.1 >= n {
                return Err(Error::Input(format!(
                    "instance {}: {name} span [{},{}] out of range for {n} tokens",
                    self.id, span.0, span.1
                )));
            }
        }
        let overlap = self.head_span.0 <= self.tail_span.1 && self.tail_span.0 <= self.head_span.1;
        if overlap {
            return Err(Error::Input(format!(
                "instance {}: head and tail spans overlap",
                self.id
            )));
        }
        if self.label >= schema.n_relations() {
            return Err(Error::Input(format!(
                "instance {}: relation id {} outside schema",
                self.id, self.label
            )));
        }
        if let Some(g) = self.gold_label {
            if g >= schema.n_relations() {
                return Err(Error::Input(format!(
                    "instance {}: gold relation id {g} outside schema",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// True when the distant-supervision label disagrees with the hidden
    /// gold label; `None` when no gold label is available.
    pub fn is_noisy(&self) -> Option<bool> {
        self.gold_label.map(|g| g != self.label)
    }
}

/// Word vectors plus the two relative-position embedding tables.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    vocab: Vocab,
    word_dim: usize,
    vectors: Matrix,
    position_dim: usize,
    max_rel_distance: usize,
    pos_head: Matrix,
    pos_tail: Matrix,
}

impl EmbeddingTable {
    /// Randomly initialized table over the given token set. Reserved rows are
    /// zero; everything else is uniform in [-0.1, 0.1].
    pub fn random<I, S, R>(
        tokens: I,
        word_dim: usize,
        position_dim: usize,
        max_rel_distance: usize,
        rng: &mut R,
    ) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
        R: Rng,
    {
        let vocab = Vocab::from_tokens(tokens);
        let mut vectors = Matrix::zeros(vocab.len(), word_dim);
        for r in 2..vocab.len() {
            for v in vectors.row_mut(r) {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
        Self::with_vectors(vocab, vectors, position_dim, max_rel_distance, rng)
    }

    /// Builds a table from existing word vectors (row-aligned with `vocab`),
    /// drawing the position tables from `rng`.
    pub fn with_vectors<R: Rng>(
        vocab: Vocab,
        vectors: Matrix,
        position_dim: usize,
        max_rel_distance: usize,
        rng: &mut R,
    ) -> Self {
        assert_eq!(vectors.rows(), vocab.len(), "word matrix must cover the vocabulary");
        let buckets = 2 * max_rel_distance + 1;
        let mut pos_head = Matrix::zeros(buckets, position_dim);
        let mut pos_tail = Matrix::zeros(buckets, position_dim);
        for m in [&mut pos_head, &mut pos_tail] {
            for r in 0..buckets {
                for v in m.row_mut(r) {
                    *v = rng.gen_range(-0.1..0.1);
                }
            }
        }
        EmbeddingTable {
            word_dim: vectors.cols(),
            vocab,
            vectors,
            position_dim,
            max_rel_distance,
            pos_head,
            pos_tail,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn word_dim(&self) -> usize {
        self.word_dim
    }

    pub fn position_dim(&self) -> usize {
        self.position_dim
    }

    pub fn max_rel_distance(&self) -> usize {
        self.max_rel_distance
    }

    pub fn word_vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn position_vectors(&self) -> (&Matrix, &Matrix) {
        (&self.pos_head, &self.pos_tail)
    }

    /// Number of rows in each position table.
    pub fn position_buckets(&self) -> usize {
        2 * self.max_rel_distance + 1
    }

    /// Bucket index for the signed distance from a token to a span:
    /// 0 inside the span, negative left of it, positive right of it,
    /// clipped to [-max_rel_distance, +max_rel_distance].
    pub fn distance_bucket(&self, token_idx: usize, span: (usize, usize)) -> usize {
        let t = token_idx as isize;
        let (s, e) = (span.0 as isize, span.1 as isize);
        let d = if t < s {
            t - s
        } else if t > e {
            t - e
        } else {
            0
        };
        let m = self.max_rel_distance as isize;
        (d.clamp(-m, m) + m) as usize
    }
}

/// Hyperparameters of the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcnnConfig {
    pub n_filters: usize,
    pub window: usize,
    pub n_relations: usize,
    pub word_dim: usize,
    pub position_dim: usize,
    /// Whether word embeddings are updated during training. The paper leaves
    /// this open; on by default.
    pub train_embeddings: bool,
}

impl PcnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_filters < 1 {
            return Err(Error::Config("n_filters must be >= 1".into()));
        }
        if self.window % 2 == 0 || self.window == 0 {
            return Err(Error::Config(format!(
                "convolution window must be odd, got {}",
                self.window
            )));
        }
        if self.n_relations < 2 {
            return Err(Error::Config("need at least two relation types".into()));
        }
        Ok(())
    }

    /// Width of one encoded token row.
    pub fn row_dim(&self) -> usize {
        self.word_dim + 2 * self.position_dim
    }
}

const WORD_EMB: &str = "word_emb";
const POS_HEAD: &str = "pos_head";
const POS_TAIL: &str = "pos_tail";
const CONV_W: &str = "conv_w";
const CONV_B: &str = "conv_b";
const OUT_W: &str = "out_w";
const OUT_B: &str = "out_b";

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    features: Matrix,
    /// Convolution activations, one row per filter.
    conv: Matrix,
    /// Winning position per (filter, segment); `None` marks an empty segment
    /// pooled as the activation of a zero feature row (the filter bias).
    argmax: Vec<[Option<usize>; 3]>,
    hidden: Vec<f64>,
    pub probs: Vec<f64>,
}

/// The classifier: embedding table, hyperparameters, and the fixed parameter
/// layout. Parameter values themselves travel separately as [`ParamVec`]s.
#[derive(Debug, Clone)]
pub struct Pcnn {
    cfg: PcnnConfig,
    emb: EmbeddingTable,
    layout: Arc<Layout>,
}

impl Pcnn {
    pub fn new(cfg: PcnnConfig, emb: EmbeddingTable) -> Result<Self> {
        cfg.validate()?;
        if emb.word_dim() != cfg.word_dim {
            return Err(Error::Config(format!(
                "embedding word_dim {} does not match config word_dim {}",
                emb.word_dim(),
                cfg.word_dim
            )));
        }
        if emb.position_dim() != cfg.position_dim {
            return Err(Error::Config(format!(
                "embedding position_dim {} does not match config position_dim {}",
                emb.position_dim(),
                cfg.position_dim
            )));
        }
        let buckets = emb.position_buckets();
        let mut blocks: Vec<(&str, Vec<usize>)> = Vec::new();
        if cfg.train_embeddings {
            blocks.push((WORD_EMB, vec![emb.vocab().len(), cfg.word_dim]));
        }
        blocks.push((POS_HEAD, vec![buckets, cfg.position_dim]));
        blocks.push((POS_TAIL, vec![buckets, cfg.position_dim]));
        blocks.push((CONV_W, vec![cfg.n_filters, cfg.window, cfg.row_dim()]));
        blocks.push((CONV_B, vec![cfg.n_filters]));
        blocks.push((OUT_W, vec![cfg.n_relations, 3 * cfg.n_filters]));
        blocks.push((OUT_B, vec![cfg.n_relations]));
        let layout = Layout::new(&blocks);
        Ok(Pcnn { cfg, emb, layout })
    }

    pub fn config(&self) -> &PcnnConfig {
        &self.cfg
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.emb
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// Fresh parameters: embedding blocks copied from the table, convolution
    /// and output layers uniform in [-0.1, 0.1].
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamVec {
        let mut params = ParamVec::zeros(self.layout.clone());
        if self.cfg.train_embeddings {
            params
                .block_mut(WORD_EMB)
                .copy_from_slice(self.emb.word_vectors().data());
        }
        params
            .block_mut(POS_HEAD)
            .copy_from_slice(self.emb.pos_head.data());
        params
            .block_mut(POS_TAIL)
            .copy_from_slice(self.emb.pos_tail.data());
        for name in [CONV_W, CONV_B, OUT_W, OUT_B] {
            for v in params.block_mut(name) {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
        params
    }

    /// Encodes a sentence from the embedding table alone: one row per token,
    /// `word ++ head-position ++ tail-position`.
    pub fn encode(&self, instance: &Instance) -> Result<Matrix> {
        if instance.tokens.is_empty() {
            return Err(Error::Input(format!(
                "instance {}: cannot encode an empty sentence",
                instance.id
            )));
        }
        let mut m = Matrix::zeros(instance.tokens.len(), self.cfg.row_dim());
        for (t, token) in instance.tokens.iter().enumerate() {
            let word = self.emb.word_vectors().row(self.emb.vocab().id(token));
            let hb = self.emb.distance_bucket(t, instance.head_span);
            let tb = self.emb.distance_bucket(t, instance.tail_span);
            let row = m.row_mut(t);
            let (w, p) = (self.cfg.word_dim, self.cfg.position_dim);
            row[..w].copy_from_slice(word);
            row[w..w + p].copy_from_slice(self.emb.pos_head.row(hb));
            row[w + p..].copy_from_slice(self.emb.pos_tail.row(tb));
        }
        Ok(m)
    }

    /// Encodes a sentence using the parameter vector's embedding blocks
    /// (falling back to the table for frozen word vectors). This is the
    /// featurization the trainable path differentiates through.
    fn features(&self, params: &ParamVec, instance: &Instance) -> Result<Matrix> {
        if instance.tokens.is_empty() {
            return Err(Error::Input(format!(
                "instance {}: cannot encode an empty sentence",
                instance.id
            )));
        }
        let (w, p) = (self.cfg.word_dim, self.cfg.position_dim);
        let word_block = self.cfg.train_embeddings.then(|| params.block(WORD_EMB));
        let pos_head = params.block(POS_HEAD);
        let pos_tail = params.block(POS_TAIL);
        let mut m = Matrix::zeros(instance.tokens.len(), self.cfg.row_dim());
        for (t, token) in instance.tokens.iter().enumerate() {
            let id = self.emb.vocab().id(token);
            let word: &[f64] = match word_block {
                Some(block) => &block[id * w..(id + 1) * w],
                None => self.emb.word_vectors().row(id),
            };
            let hb = self.emb.distance_bucket(t, instance.head_span);
            let tb = self.emb.distance_bucket(t, instance.tail_span);
            let row = m.row_mut(t);
            row[..w].copy_from_slice(word);
            row[w..w + p].copy_from_slice(&pos_head[hb * p..(hb + 1) * p]);
            row[w + p..].copy_from_slice(&pos_tail[tb * p..(tb + 1) * p]);
        }
        Ok(m)
    }

    /// Convolution, piecewise max pooling, tanh, linear softmax over a
    /// precomputed feature matrix.
    pub fn forward_features(
        &self,
        params: &ParamVec,
        features: Matrix,
        head_span: (usize, usize),
        tail_span: (usize, usize),
    ) -> Result<(Vec<f64>, ForwardCache)> {
        let l = features.rows();
        if l == 0 {
            return Err(Error::Input("cannot run forward on an empty sentence".into()));
        }
        let nf = self.cfg.n_filters;
        let window = self.cfg.window;
        let row_dim = self.cfg.row_dim();
        let pad = (window - 1) / 2;
        let conv_w = params.block(CONV_W);
        let conv_b = params.block(CONV_B);

        let mut conv = Matrix::zeros(nf, l);
        for f in 0..nf {
            let filter = &conv_w[f * window * row_dim..(f + 1) * window * row_dim];
            let bias = conv_b[f];
            for t in 0..l {
                let mut acc = bias;
                for j in 0..window {
                    let src = t as isize + j as isize - pad as isize;
                    if src >= 0 && (src as usize) < l {
                        let x = features.row(src as usize);
                        let w = &filter[j * row_dim..(j + 1) * row_dim];
                        for (wi, xi) in w.iter().zip(x.iter()) {
                            acc += wi * xi;
                        }
                    }
                }
                conv.row_mut(f)[t] = acc;
            }
        }

        let segments = segment_ranges(l, head_span, tail_span);
        let mut argmax = vec![[None; 3]; nf];
        let mut pooled = vec![0.0; 3 * nf];
        for f in 0..nf {
            let row = conv.row(f);
            for (s, seg) in segments.iter().enumerate() {
                match seg {
                    Some((a, b)) => {
                        let mut best = *a;
                        for t in (*a + 1)..=*b {
                            if row[t] > row[best] {
                                best = t;
                            }
                        }
                        argmax[f][s] = Some(best);
                        pooled[3 * f + s] = row[best];
                    }
                    // Empty segment: pooled value is the activation of a
                    // single zero feature row, which is the filter bias.
                    None => pooled[3 * f + s] = conv_b[f],
                }
            }
        }

        let hidden: Vec<f64> = pooled.iter().map(|&v| v.tanh()).collect();

        let out_w = params.block(OUT_W);
        let out_b = params.block(OUT_B);
        let nr = self.cfg.n_relations;
        let mut logits = vec![0.0; nr];
        for r in 0..nr {
            let w = &out_w[r * 3 * nf..(r + 1) * 3 * nf];
            let mut acc = out_b[r];
            for (wi, hi) in w.iter().zip(hidden.iter()) {
                acc += wi * hi;
            }
            logits[r] = acc;
        }
        let probs = softmax(&logits);

        Ok((
            probs.clone(),
            ForwardCache {
                features,
                conv,
                argmax,
                hidden,
                probs,
            },
        ))
    }

    /// Full forward pass for one instance using the trainable featurization.
    pub fn forward(&self, params: &ParamVec, instance: &Instance) -> Result<(Vec<f64>, ForwardCache)> {
        let features = self.features(params, instance)?;
        self.forward_features(params, features, instance.head_span, instance.tail_span)
    }

    /// Argmax relation and its probability; ties go to the lowest relation id.
    pub fn predict(&self, params: &ParamVec, instance: &Instance) -> Result<(usize, f64)> {
        let (probs, _) = self.forward(params, instance)?;
        let mut best = 0;
        for (r, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = r;
            }
        }
        Ok((best, probs[best]))
    }

    /// Cross-entropy loss of the instance's label.
    pub fn example_loss(&self, params: &ParamVec, instance: &Instance) -> Result<f64> {
        let (probs, _) = self.forward(params, instance)?;
        Ok(-probs[instance.label].max(1e-12).ln())
    }

    /// Cross-entropy loss and its exact gradient w.r.t. all parameters.
    pub fn example_loss_and_grad(
        &self,
        params: &ParamVec,
        instance: &Instance,
    ) -> Result<(f64, GradVec)> {
        let (probs, cache) = self.forward(params, instance)?;
        let loss = -probs[instance.label].max(1e-12).ln();

        let nf = self.cfg.n_filters;
        let nr = self.cfg.n_relations;
        let window = self.cfg.window;
        let row_dim = self.cfg.row_dim();
        let pad = (window - 1) / 2;
        let (wd, pd) = (self.cfg.word_dim, self.cfg.position_dim);
        let l = cache.features.rows();

        let mut grad = GradVec::zeros(self.layout.clone());

        // Softmax cross-entropy: dlogits = probs - onehot(label).
        let mut dlogits = probs;
        dlogits[instance.label] -= 1.0;

        // Output layer.
        {
            let out_w = params.block(OUT_W);
            let mut dhidden = vec![0.0; 3 * nf];
            {
                let gw = grad.block_mut(OUT_W);
                for r in 0..nr {
                    for k in 0..3 * nf {
                        gw[r * 3 * nf + k] += dlogits[r] * cache.hidden[k];
                        dhidden[k] += out_w[r * 3 * nf + k] * dlogits[r];
                    }
                }
            }
            {
                let gb = grad.block_mut(OUT_B);
                for r in 0..nr {
                    gb[r] += dlogits[r];
                }
            }

            // tanh backward, then route pooled gradients through the argmax.
            let conv_w = params.block(CONV_W);
            let mut dfeatures = Matrix::zeros(l, row_dim);
            for f in 0..nf {
                for s in 0..3 {
                    let dpool = dhidden[3 * f + s] * (1.0 - cache.hidden[3 * f + s].powi(2));
                    if dpool == 0.0 {
                        continue;
                    }
                    match cache.argmax[f][s] {
                        Some(t) => {
                            // One conv activation receives the gradient.
                            grad.block_mut(CONV_B)[f] += dpool;
                            let filter = &conv_w[f * window * row_dim..(f + 1) * window * row_dim];
                            let gfilter_base = f * window * row_dim;
                            for j in 0..window {
                                let src = t as isize + j as isize - pad as isize;
                                if src >= 0 && (src as usize) < l {
                                    let x = cache.features.row(src as usize);
                                    let gw = grad.block_mut(CONV_W);
                                    for c in 0..row_dim {
                                        gw[gfilter_base + j * row_dim + c] += dpool * x[c];
                                    }
                                    let df = dfeatures.row_mut(src as usize);
                                    for c in 0..row_dim {
                                        df[c] += dpool * filter[j * row_dim + c];
                                    }
                                }
                            }
                        }
                        // Empty segment pooled the bias directly.
                        None => grad.block_mut(CONV_B)[f] += dpool,
                    }
                }
            }

            // Scatter feature gradients into the embedding blocks.
            for t in 0..l {
                let df = dfeatures.row(t);
                if self.cfg.train_embeddings {
                    let id = self.emb.vocab().id(&instance.tokens[t]);
                    let gw = grad.block_mut(WORD_EMB);
                    for c in 0..wd {
                        gw[id * wd + c] += df[c];
                    }
                }
                let hb = self.emb.distance_bucket(t, instance.head_span);
                let gh = grad.block_mut(POS_HEAD);
                for c in 0..pd {
                    gh[hb * pd + c] += df[wd + c];
                }
                let tb = self.emb.distance_bucket(t, instance.tail_span);
                let gt = grad.block_mut(POS_TAIL);
                for c in 0..pd {
                    gt[tb * pd + c] += df[wd + pd + c];
                }
            }
        }

        Ok((loss, grad))
    }
}

impl PerExampleLoss for Pcnn {
    type Example = Instance;

    fn loss(&self, params: &ParamVec, example: &Instance) -> Result<f64> {
        self.example_loss(params, example)
    }

    fn loss_and_grad(&self, params: &ParamVec, example: &Instance) -> Result<(f64, GradVec)> {
        self.example_loss_and_grad(params, example)
    }
}

/// Inclusive token ranges of the three pooling segments, delimited by the end
/// of the left entity and the end of the right entity. `None` marks a segment
/// with no tokens.
pub fn segment_ranges(
    len: usize,
    head_span: (usize, usize),
    tail_span: (usize, usize),
) -> [Option<(usize, usize)>; 3] {
    let (left_end, right_end) = if head_span.0 <= tail_span.0 {
        (head_span.1, tail_span.1)
    } else {
        (tail_span.1, head_span.1)
    };
    let b1 = left_end.min(len - 1);
    let b2 = right_end.min(len - 1);
    let seg = |a: usize, b: usize| if a <= b { Some((a, b)) } else { None };
    [
        seg(0, b1),
        if b1 + 1 <= b2 { Some((b1 + 1, b2)) } else { None },
        if b2 + 1 <= len - 1 { Some((b2 + 1, len - 1)) } else { None },
    ]
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_diff_grad, grad_rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn schema4() -> RelationSchema {
        RelationSchema::new(
            vec!["NA".into(), "a".into(), "b".into(), "c".into()],
            "NA",
        )
        .unwrap()
    }

    fn test_model(
        word_dim: usize,
        position_dim: usize,
        n_filters: usize,
        n_relations: usize,
        seed: u64,
    ) -> Pcnn {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let tokens: Vec<String> = (0..10).map(|i| format!("tok{i}")).collect();
        let emb = EmbeddingTable::random(tokens.iter(), word_dim, position_dim, 5, &mut rng);
        Pcnn::new(
            PcnnConfig {
                n_filters,
                window: 3,
                n_relations,
                word_dim,
                position_dim,
                train_embeddings: true,
            },
            emb,
        )
        .unwrap()
    }

    fn sentence(n: usize, head: (usize, usize), tail: (usize, usize), label: usize) -> Instance {
        Instance {
            id: "t0".into(),
            tokens: (0..n).map(|i| format!("tok{i}")).collect(),
            head_span: head,
            tail_span: tail,
            label,
            gold_label: None,
        }
    }

    #[test]
    fn encode_shape() {
        let model = test_model(4, 2, 3, 4, 7);
        let inst = sentence(7, (1, 1), (4, 4), 1);
        let m = model.encode(&inst).unwrap();
        assert_eq!(m.rows(), 7);
        assert_eq!(m.cols(), 8);
    }

    #[test]
    fn encode_zero_distance_row_at_head_start() {
        let model = test_model(4, 2, 3, 4, 7);
        let inst = sentence(7, (2, 3), (5, 5), 1);
        let m = model.encode(&inst).unwrap();
        let zero_bucket = model.embeddings().max_rel_distance();
        let expected = model.embeddings().pos_head.row(zero_bucket);
        assert_eq!(&m.row(2)[4..6], expected);
        assert_eq!(&m.row(3)[4..6], expected); // inside-span tokens too
    }

    #[test]
    fn encode_distance_clipping() {
        let model = test_model(4, 2, 3, 4, 7);
        let emb = model.embeddings();
        // 100 tokens right of the tail end clips to +max.
        assert_eq!(emb.distance_bucket(105, (3, 5)), 2 * emb.max_rel_distance());
        assert_eq!(emb.distance_bucket(0, (3, 5)), emb.max_rel_distance() - 3);
    }

    #[test]
    fn encode_rejects_empty_sentence() {
        let model = test_model(4, 2, 3, 4, 7);
        let mut inst = sentence(3, (0, 0), (2, 2), 1);
        inst.tokens.clear();
        assert!(matches!(model.encode(&inst), Err(Error::Input(_))));
    }

    #[test]
    fn forward_uniform_under_zero_params() {
        let model = test_model(4, 2, 3, 4, 7);
        let params = ParamVec::zeros(model.layout().clone());
        let inst = sentence(5, (0, 0), (3, 3), 1);
        let (probs, _) = model.forward(&params, &inst).unwrap();
        for &p in &probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_probs_sum_to_one() {
        let model = test_model(4, 2, 5, 4, 11);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let params = model.init_params(&mut rng);
        for n in [3usize, 5, 9] {
            let inst = sentence(n, (0, 0), (n - 1, n - 1), 1);
            let (probs, _) = model.forward(&params, &inst).unwrap();
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn segmentation_three_token_sentence() {
        // Entities at tokens 0 and 2: segments [0,0], [1,2], and an empty tail.
        let segs = segment_ranges(3, (0, 0), (2, 2));
        assert_eq!(segs, [Some((0, 0)), Some((1, 2)), None]);
        // Reversed entity order gives the same boundaries.
        assert_eq!(segment_ranges(3, (2, 2), (0, 0)), segs);
        // Entity not at the end leaves a real third segment.
        assert_eq!(
            segment_ranges(6, (1, 1), (3, 4)),
            [Some((0, 1)), Some((2, 4)), Some((5, 5))]
        );
    }

    #[test]
    fn pooled_vector_length_and_empty_segment_bias() {
        let model = test_model(4, 2, 3, 4, 7);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let params = model.init_params(&mut rng);
        let inst = sentence(3, (0, 0), (2, 2), 1);
        let (_, cache) = model.forward(&params, &inst).unwrap();
        assert_eq!(cache.hidden.len(), 3 * 3);
        // Third segment is empty: pooled value is tanh(bias).
        let conv_b = params.block(CONV_B);
        for f in 0..3 {
            assert_eq!(cache.hidden[3 * f + 2], conv_b[f].tanh());
        }
    }

    #[test]
    fn loss_uniform_is_log_n_relations() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let tokens: Vec<String> = (0..10).map(|i| format!("tok{i}")).collect();
        let emb = EmbeddingTable::random(tokens.iter(), 4, 2, 5, &mut rng);
        let model = Pcnn::new(
            PcnnConfig {
                n_filters: 3,
                window: 3,
                n_relations: 5,
                word_dim: 4,
                position_dim: 2,
                train_embeddings: true,
            },
            emb,
        )
        .unwrap();
        let params = ParamVec::zeros(model.layout().clone());
        let inst = sentence(5, (0, 0), (3, 3), 2);
        let (loss, grad) = model.example_loss_and_grad(&params, &inst).unwrap();
        assert!((loss - 5.0f64.ln()).abs() < 1e-12);
        assert!(grad.data().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn loss_zero_for_certain_prediction() {
        let model = test_model(4, 2, 3, 4, 7);
        let mut params = ParamVec::zeros(model.layout().clone());
        // Zero hidden layer: logits equal the output bias.
        let out_b = params.block_mut(OUT_B);
        out_b[1] = 40.0;
        out_b[0] = -40.0;
        out_b[2] = -40.0;
        out_b[3] = -40.0;
        let inst = sentence(5, (0, 0), (3, 3), 1);
        let (loss, grad) = model.example_loss_and_grad(&params, &inst).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn predict_argmax_and_ties() {
        let model = test_model(4, 2, 3, 4, 7);
        let mut params = ParamVec::zeros(model.layout().clone());
        {
            let out_b = params.block_mut(OUT_B);
            out_b[0] = 0.1f64.ln();
            out_b[1] = 0.6f64.ln();
            out_b[2] = 0.2f64.ln();
            out_b[3] = 0.1f64.ln();
        }
        let inst = sentence(5, (0, 0), (3, 3), 1);
        let (rel, p) = model.predict(&params, &inst).unwrap();
        assert_eq!(rel, 1);
        assert!((p - 0.6).abs() < 1e-12);

        // Uniform tie: lowest relation id wins.
        let zero = ParamVec::zeros(model.layout().clone());
        let (rel, p) = model.predict(&zero, &inst).unwrap();
        assert_eq!(rel, 0);
        assert!((p - 0.25).abs() < 1e-12);
    }

    #[test]
    fn predict_invariant_to_logit_shift() {
        let model = test_model(4, 2, 3, 4, 7);
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let params = model.init_params(&mut rng);
        let inst = sentence(6, (1, 1), (4, 4), 2);
        let (rel, _) = model.predict(&params, &inst).unwrap();
        let mut shifted = params.clone();
        for v in shifted.block_mut(OUT_B) {
            *v += 3.7;
        }
        let (rel2, _) = model.predict(&shifted, &inst).unwrap();
        assert_eq!(rel, rel2);
    }

    #[test]
    fn encode_position_equivariance_under_pad_prefix() {
        let model = test_model(4, 2, 3, 4, 7);
        let inst = sentence(6, (1, 1), (4, 4), 1);
        let m = model.encode(&inst).unwrap();

        let shift = 3;
        let mut padded = inst.clone();
        let mut tokens: Vec<String> = vec![PAD_TOKEN.to_string(); shift];
        tokens.extend(inst.tokens.iter().cloned());
        padded.tokens = tokens;
        padded.head_span = (inst.head_span.0 + shift, inst.head_span.1 + shift);
        padded.tail_span = (inst.tail_span.0 + shift, inst.tail_span.1 + shift);
        let mp = model.encode(&padded).unwrap();

        for t in 0..inst.tokens.len() {
            assert_eq!(m.row(t), mp.row(t + shift));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = test_model(4, 2, 5, 4, 13);
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let params = model.init_params(&mut rng);
        let inst = sentence(8, (2, 2), (5, 6), 3);
        let (p1, _) = model.forward(&params, &inst).unwrap();
        let (p2, _) = model.forward(&params, &inst).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn gradient_matches_finite_differences_spot_check() {
        let schema = schema4();
        let mut rng = ChaCha20Rng::seed_from_u64(40);
        for trial in 0..5u64 {
            let model = test_model(4, 2, 3, schema.n_relations(), 100 + trial);
            let params = model.init_params(&mut rng);
            let n = 5 + (trial as usize % 3);
            let inst = sentence(n, (0, 0), (n - 2, n - 2), (trial as usize) % 4);
            let (_, analytic) = model.example_loss_and_grad(&params, &inst).unwrap();
            let numeric =
                finite_diff_grad(|p| model.example_loss(p, &inst), &params, 1e-4).unwrap();
            let max_err = analytic
                .data()
                .iter()
                .zip(numeric.data().iter())
                .map(|(&a, &b)| grad_rel_error(a, b))
                .fold(0.0, f64::max);
            assert!(max_err <= 1e-3, "trial {trial}: max rel error {max_err:e}");
        }
    }

    #[test]
    fn frozen_embeddings_shrink_layout() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let tokens: Vec<String> = (0..10).map(|i| format!("tok{i}")).collect();
        let emb = EmbeddingTable::random(tokens.iter(), 4, 2, 5, &mut rng);
        let frozen = Pcnn::new(
            PcnnConfig {
                n_filters: 3,
                window: 3,
                n_relations: 4,
                word_dim: 4,
                position_dim: 2,
                train_embeddings: false,
            },
            emb,
        )
        .unwrap();
        assert!(frozen.layout().range(WORD_EMB).is_none());
        // Gradients still check out against the reduced parameter set.
        let params = frozen.init_params(&mut rng);
        let inst = sentence(5, (0, 0), (3, 3), 1);
        let (_, analytic) = frozen.example_loss_and_grad(&params, &inst).unwrap();
        let numeric = finite_diff_grad(|p| frozen.example_loss(p, &inst), &params, 1e-4).unwrap();
        for (&a, &b) in analytic.data().iter().zip(numeric.data().iter()) {
            assert!(grad_rel_error(a, b) <= 1e-3);
        }
    }

    #[test]
    fn instance_validation() {
        let schema = schema4();
        let mut inst = sentence(4, (0, 0), (2, 2), 1);
        assert!(inst.validate(&schema).is_ok());
        inst.head_span = (3, 5);
        assert!(matches!(inst.validate(&schema), Err(Error::Input(_))));
        inst.head_span = (1, 2);
        inst.tail_span = (2, 3);
        assert!(matches!(inst.validate(&schema), Err(Error::Input(_))));
        inst.tail_span = (3, 3);
        inst.label = 9;
        assert!(matches!(inst.validate(&schema), Err(Error::Input(_))));
    }
}
