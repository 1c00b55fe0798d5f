use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lstm::{self, LstmShape, LstmTrace};
use super::mask::{build_mask, masked_softmax, masked_softmax_vjp, softmax, softmax_vjp, HierarchyMask};
use crate::corpus::{Dataset, Product, Taxonomy};
use crate::error::{Error, Result};
use crate::features::{fit_tfidf, tokenize, EmbeddingTable, Locale, Vocabulary};
use crate::linear::argmax;
use crate::model::Prediction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    MeanPool,
    BiRecurrent,
    DualTower,
}

/// Encoder used inside each tower of a dual-tower network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TowerKind {
    MeanPool,
    BiRecurrent,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_pool" => Ok(EncoderKind::MeanPool),
            "bi_recurrent" => Ok(EncoderKind::BiRecurrent),
            "dual_tower" => Ok(EncoderKind::DualTower),
            other => Err(Error::InvalidArgument(format!("unknown encoder `{other}`"))),
        }
    }
}

impl std::str::FromStr for TowerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_pool" => Ok(TowerKind::MeanPool),
            "bi_recurrent" => Ok(TowerKind::BiRecurrent),
            other => Err(Error::InvalidArgument(format!("unknown tower encoder `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    #[serde(default = "default_tower")]
    pub tower: TowerKind,
    pub hidden_size: usize,
    pub max_tokens: usize,
    pub fine_tune_embeddings: bool,
}

fn default_tower() -> TowerKind {
    TowerKind::BiRecurrent
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::BiRecurrent,
            tower: TowerKind::BiRecurrent,
            hidden_size: 200,
            max_tokens: 32,
            fine_tune_embeddings: true,
        }
    }
}

impl EncoderConfig {
    pub fn towers(&self) -> usize {
        match self.kind {
            EncoderKind::DualTower => 2,
            _ => 1,
        }
    }

    fn tower_kind(&self) -> TowerKind {
        match self.kind {
            EncoderKind::MeanPool => TowerKind::MeanPool,
            EncoderKind::BiRecurrent => TowerKind::BiRecurrent,
            EncoderKind::DualTower => self.tower,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub encoder: EncoderConfig,
    pub dense_units: usize,
    pub masking: bool,
    /// Separate encoder + dense stacks for the two heads instead of a shared one.
    #[serde(default)]
    pub independent_heads: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            encoder: EncoderConfig::default(),
            dense_units: 100,
            masking: true,
            independent_heads: false,
        }
    }
}

/// Token index, lowercasing rule and embedding width of one input language.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerInput {
    pub vocabulary: Vocabulary,
    pub locale: Locale,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Block {
    offset: usize,
    len: usize,
}

impl Block {
    fn of<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        &theta[self.offset..self.offset + self.len]
    }

    fn of_mut<'a>(&self, theta: &'a mut [f64]) -> &'a mut [f64] {
        &mut theta[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct TowerLayout {
    embedding: Block,
    dim: usize,
    /// forward and backward (weights, bias) when recurrent
    recurrent: Option<[(Block, Block); 2]>,
    out_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct BranchLayout {
    towers: Vec<TowerLayout>,
    rep_dim: usize,
    dense_w: Block,
    dense_b: Block,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    branches: Vec<BranchLayout>,
    cat_w: Block,
    cat_b: Block,
    sub_w: Block,
    sub_b: Block,
    total: usize,
}

struct Allocator(usize);

impl Allocator {
    fn take(&mut self, len: usize) -> Block {
        let b = Block { offset: self.0, len };
        self.0 += len;
        b
    }
}

impl Layout {
    fn new(config: &NetworkConfig, towers: &[TowerInput], c: usize, s: usize) -> Self {
        let mut alloc = Allocator(0);
        let h = config.encoder.hidden_size;
        let kind = config.encoder.tower_kind();
        let n_branches = if config.independent_heads { 2 } else { 1 };
        let branches = (0..n_branches)
            .map(|_| {
                let towers: Vec<TowerLayout> = towers
                    .iter()
                    .map(|t| {
                        let embedding = alloc.take(t.vocabulary.len() * t.dim);
                        let (recurrent, out_dim) = match kind {
                            TowerKind::MeanPool => (None, t.dim),
                            TowerKind::BiRecurrent => {
                                let shape = LstmShape { input: t.dim, hidden: h };
                                let mut dir = || (alloc.take(shape.weight_len()), alloc.take(shape.bias_len()));
                                (Some([dir(), dir()]), 2 * h)
                            }
                        };
                        TowerLayout {
                            embedding,
                            dim: t.dim,
                            recurrent,
                            out_dim,
                        }
                    })
                    .collect();
                let rep_dim = towers.iter().map(|t| t.out_dim).sum();
                BranchLayout {
                    towers,
                    rep_dim,
                    dense_w: alloc.take(config.dense_units * rep_dim),
                    dense_b: alloc.take(config.dense_units),
                }
            })
            .collect();
        let u = config.dense_units;
        let cat_w = alloc.take(c * u);
        let cat_b = alloc.take(c);
        let sub_w = alloc.take(s * u);
        let sub_b = alloc.take(s);
        Layout {
            branches,
            cat_w,
            cat_b,
            sub_w,
            sub_b,
            total: alloc.0,
        }
    }
}

struct TowerTrace {
    ids: Vec<usize>,
    recurrent: Option<[LstmTrace; 2]>,
    rep: Vec<f64>,
}

struct BranchTrace {
    towers: Vec<TowerTrace>,
    rep: Vec<f64>,
    hidden: Vec<f64>,
}

/// Intermediate values of one forward pass.
pub(crate) struct Trace {
    branches: Vec<BranchTrace>,
    sub_logits: Vec<f64>,
    pub cat_probs: Vec<f64>,
    pub sub_probs: Vec<f64>,
    mask_category: Option<usize>,
}

/// Token ids of a product, one list per tower.
pub type EncodedTitle = Vec<Vec<usize>>;

/// Two-head classifier: encoder, shared rectified dense layer, softmax
/// category head and (optionally masked) softmax subcategory head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierNetwork {
    config: NetworkConfig,
    taxonomy: Taxonomy,
    mask: HierarchyMask,
    towers: Vec<TowerInput>,
    layout: Layout,
    theta: Vec<f64>,
}

fn check_finite(values: &[f64], layer: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer: layer.into() })
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(k, bk)| bk + w[k * n..(k + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// Accumulates `dW += g xᵀ`, `db += g` and returns `Wᵀ g`.
fn affine_backward(w: &[f64], x: &[f64], g: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let n = x.len();
    let mut dx = vec![0.0; n];
    for (k, &gk) in g.iter().enumerate() {
        db[k] += gk;
        if gk == 0.0 {
            continue;
        }
        let row = &w[k * n..(k + 1) * n];
        let drow = &mut dw[k * n..(k + 1) * n];
        for j in 0..n {
            drow[j] += gk * x[j];
            dx[j] += gk * row[j];
        }
    }
    dx
}

impl ClassifierNetwork {
    /// Randomly initialized network. Embedding rows of tokens found in the
    /// matching table are copied from it.
    pub fn new(
        config: NetworkConfig,
        taxonomy: Taxonomy,
        towers: Vec<TowerInput>,
        tables: &[&EmbeddingTable],
        seed: u64,
    ) -> Result<Self> {
        Self::validate(&config, &towers)?;
        if tables.len() != towers.len() {
            return Err(Error::InvalidArgument(format!(
                "encoder needs {} embedding tables, got {}",
                towers.len(),
                tables.len()
            )));
        }
        for (t, table) in towers.iter().zip(tables) {
            if t.dim != table.dim() {
                return Err(Error::DimensionMismatch {
                    expected: t.dim,
                    found: table.dim(),
                });
            }
        }
        let layout = Layout::new(&config, &towers, taxonomy.num_categories(), taxonomy.num_subcategories());
        let mut theta = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |block: Block, fan_in: usize, theta: &mut [f64]| {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for v in block.of_mut(theta) {
                *v = rng.gen_range(-bound..bound);
            }
        };
        for branch in &layout.branches {
            for (tl, (input, table)) in branch.towers.iter().zip(towers.iter().zip(tables)) {
                uniform(tl.embedding, tl.dim, &mut theta);
                let emb = tl.embedding.of_mut(&mut theta);
                for (i, tok) in input.vocabulary.tokens().iter().enumerate() {
                    if let Some(v) = table.get(tok) {
                        emb[i * tl.dim..(i + 1) * tl.dim].copy_from_slice(v);
                    }
                }
                if let Some(dirs) = &tl.recurrent {
                    for (w, _) in dirs {
                        uniform(*w, tl.dim + config.encoder.hidden_size, &mut theta);
                    }
                }
            }
            uniform(branch.dense_w, branch.rep_dim, &mut theta);
        }
        uniform(layout.cat_w, config.dense_units, &mut theta);
        uniform(layout.sub_w, config.dense_units, &mut theta);
        let mask = build_mask(&taxonomy);
        Ok(ClassifierNetwork {
            config,
            taxonomy,
            mask,
            towers,
            layout,
            theta,
        })
    }

    /// Fits tower vocabularies on the training titles (primary, then
    /// secondary for dual-tower) and initializes from `tables`.
    pub fn for_dataset(
        config: NetworkConfig,
        train: &Dataset,
        tables: &[&EmbeddingTable],
        seed: u64,
    ) -> Result<Self> {
        let primary: Vec<_> = train
            .products()
            .iter()
            .map(|p| tokenize(&p.title_primary, train.locale()))
            .collect();
        let mut towers = Vec::new();
        let dim_of = |i: usize| tables.get(i).map(|t| t.dim()).unwrap_or(0);
        towers.push(TowerInput {
            vocabulary: fit_tfidf(&primary)?,
            locale: train.locale(),
            dim: dim_of(0),
        });
        if config.encoder.towers() == 2 {
            let secondary: Vec<_> = train
                .products()
                .iter()
                .map(|p| tokenize(p.title_secondary.as_deref().unwrap_or(""), Locale::Generic))
                .collect();
            towers.push(TowerInput {
                vocabulary: fit_tfidf(&secondary)?,
                locale: Locale::Generic,
                dim: dim_of(1),
            });
        }
        Self::new(config, train.taxonomy().clone(), towers, tables, seed)
    }

    /// Rebuilds a trained network from stored parameters.
    pub fn from_parts(
        config: NetworkConfig,
        taxonomy: Taxonomy,
        towers: Vec<TowerInput>,
        theta: Vec<f64>,
    ) -> Result<Self> {
        Self::validate(&config, &towers)?;
        let layout = Layout::new(&config, &towers, taxonomy.num_categories(), taxonomy.num_subcategories());
        if theta.len() != layout.total {
            return Err(Error::DimensionMismatch {
                expected: layout.total,
                found: theta.len(),
            });
        }
        check_finite(&theta, "parameters")?;
        let mask = build_mask(&taxonomy);
        Ok(ClassifierNetwork {
            config,
            taxonomy,
            mask,
            towers,
            layout,
            theta,
        })
    }

    fn validate(config: &NetworkConfig, towers: &[TowerInput]) -> Result<()> {
        let e = &config.encoder;
        if e.hidden_size == 0 || e.max_tokens == 0 || config.dense_units == 0 {
            return Err(Error::InvalidArgument(
                "hidden size, token cap and dense width must be positive".into(),
            ));
        }
        if towers.len() != e.towers() {
            return Err(Error::InvalidArgument(format!(
                "{:?} encoder needs {} towers, got {}",
                e.kind,
                e.towers(),
                towers.len()
            )));
        }
        if towers.iter().any(|t| t.dim == 0) {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn mask(&self) -> &HierarchyMask {
        &self.mask
    }

    pub fn towers(&self) -> &[TowerInput] {
        &self.towers
    }

    /// Flat parameter store. Per branch: each tower's embedding rows then, if
    /// recurrent, forward and backward LSTM (weights, bias); then dense
    /// weights (row-major, units × input) and bias. After all branches:
    /// category head weights and bias, subcategory head weights and bias.
    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn set_masking(&mut self, enabled: bool) {
        self.config.masking = enabled;
    }

    /// Parameter ranges holding embedding rows.
    pub(crate) fn embedding_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.layout
            .branches
            .iter()
            .flat_map(|b| &b.towers)
            .map(|t| t.embedding.offset..t.embedding.offset + t.embedding.len)
            .collect()
    }

    /// Token ids per tower, OOV tokens dropped, truncated to the token cap.
    pub fn encode(&self, product: &Product) -> EncodedTitle {
        self.towers
            .iter()
            .enumerate()
            .map(|(i, tower)| {
                let text = if i == 0 {
                    product.title_primary.as_str()
                } else {
                    product.title_secondary.as_deref().unwrap_or("")
                };
                tokenize(text, tower.locale)
                    .iter()
                    .take(self.config.encoder.max_tokens)
                    .filter_map(|t| tower.vocabulary.index_of(t))
                    .collect()
            })
            .collect()
    }

    fn tower_forward(&self, tl: &TowerLayout, ids: &[usize]) -> TowerTrace {
        let emb = tl.embedding.of(&self.theta);
        let rows: Vec<&[f64]> = ids.iter().map(|&i| &emb[i * tl.dim..(i + 1) * tl.dim]).collect();
        match &tl.recurrent {
            None => {
                let mut rep = vec![0.0; tl.dim];
                if !rows.is_empty() {
                    for r in &rows {
                        rep.iter_mut().zip(*r).for_each(|(a, b)| *a += b);
                    }
                    let n = rows.len() as f64;
                    rep.iter_mut().for_each(|a| *a /= n);
                }
                TowerTrace {
                    ids: ids.to_vec(),
                    recurrent: None,
                    rep,
                }
            }
            Some([(fw, fb), (bw, bb)]) => {
                let shape = LstmShape {
                    input: tl.dim,
                    hidden: self.config.encoder.hidden_size,
                };
                let fwd = lstm::forward(shape, fw.of(&self.theta), fb.of(&self.theta), &rows);
                let reversed: Vec<&[f64]> = rows.iter().rev().copied().collect();
                let bwd = lstm::forward(shape, bw.of(&self.theta), bb.of(&self.theta), &reversed);
                let mut rep = fwd.last_hidden.clone();
                rep.extend_from_slice(&bwd.last_hidden);
                TowerTrace {
                    ids: ids.to_vec(),
                    recurrent: Some([fwd, bwd]),
                    rep,
                }
            }
        }
    }

    pub(crate) fn forward_encoded(&self, encoded: &EncodedTitle, teacher: Option<usize>) -> Result<Trace> {
        let mut branches = Vec::with_capacity(self.layout.branches.len());
        for bl in &self.layout.branches {
            let towers: Vec<TowerTrace> = bl
                .towers
                .iter()
                .zip(encoded)
                .map(|(tl, ids)| self.tower_forward(tl, ids))
                .collect();
            let rep: Vec<f64> = towers.iter().flat_map(|t| t.rep.iter().copied()).collect();
            check_finite(&rep, "encoder")?;
            let mut hidden = affine(bl.dense_w.of(&self.theta), bl.dense_b.of(&self.theta), &rep);
            check_finite(&hidden, "dense")?;
            hidden.iter_mut().for_each(|v| *v = v.max(0.0));
            branches.push(BranchTrace { towers, rep, hidden });
        }
        let cat_hidden = &branches[0].hidden;
        let sub_hidden = &branches[branches.len() - 1].hidden;
        let l = &self.layout;
        let cat_logits = affine(l.cat_w.of(&self.theta), l.cat_b.of(&self.theta), cat_hidden);
        check_finite(&cat_logits, "category head")?;
        let sub_logits = affine(l.sub_w.of(&self.theta), l.sub_b.of(&self.theta), sub_hidden);
        check_finite(&sub_logits, "subcategory head")?;
        let cat_probs = softmax(&cat_logits);
        let (sub_probs, mask_category) = if self.config.masking {
            let c = teacher.unwrap_or_else(|| argmax(&cat_probs));
            if c >= self.mask.num_categories() {
                return Err(Error::InvalidArgument(format!("category index {c} out of range")));
            }
            (masked_softmax(&sub_logits, self.mask.row(c))?.probs, Some(c))
        } else {
            (softmax(&sub_logits), None)
        };
        Ok(Trace {
            branches,
            sub_logits,
            cat_probs,
            sub_probs,
            mask_category,
        })
    }

    /// Encoder output (tower representations concatenated) of the first branch.
    pub fn representation(&self, product: &Product) -> Result<Vec<f64>> {
        let t = self.forward_encoded(&self.encode(product), None)?;
        Ok(t.branches.into_iter().next().map(|b| b.rep).unwrap_or_default())
    }

    /// Category and subcategory distributions. The subcategory mask row is
    /// `teacher` when given, else the predicted category.
    pub fn forward(&self, product: &Product, teacher: Option<usize>) -> Result<(Vec<f64>, Vec<f64>)> {
        let t = self.forward_encoded(&self.encode(product), teacher)?;
        Ok((t.cat_probs, t.sub_probs))
    }

    /// As [`forward`](Self::forward) but checks `mask` against the bound taxonomy.
    pub fn forward_with_mask(
        &self,
        product: &Product,
        mask: &HierarchyMask,
        teacher: Option<usize>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if mask != &self.mask {
            return Err(Error::DimensionMismatch {
                expected: self.mask.num_categories() * self.mask.num_subcategories(),
                found: mask.num_categories() * mask.num_subcategories(),
            });
        }
        self.forward(product, teacher)
    }

    fn check_gold(&self, cat: usize, sub: usize) -> Result<()> {
        if cat >= self.taxonomy.num_categories() || sub >= self.taxonomy.num_subcategories() {
            return Err(Error::InvalidArgument(format!(
                "gold labels ({cat}, {sub}) out of range"
            )));
        }
        Ok(())
    }

    /// `−ln P(cat) − ln P(sub)` with the gold category as the mask row.
    pub fn loss(&self, product: &Product, gold_cat: usize, gold_sub: usize) -> Result<f64> {
        self.check_gold(gold_cat, gold_sub)?;
        let t = self.forward_encoded(&self.encode(product), Some(gold_cat))?;
        Ok(-t.cat_probs[gold_cat].ln() - t.sub_probs[gold_sub].ln())
    }

    /// Adds `scale · ∂loss/∂θ` for one example into `grad`, returns the loss.
    pub(crate) fn accumulate_gradient(
        &self,
        encoded: &EncodedTitle,
        gold_cat: usize,
        gold_sub: usize,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        let trace = self.forward_encoded(encoded, Some(gold_cat))?;
        let loss = -trace.cat_probs[gold_cat].ln() - trace.sub_probs[gold_sub].ln();
        if !loss.is_finite() {
            return Err(Error::NonFinite { layer: "loss".into() });
        }
        let l = &self.layout;

        let mut d_cat: Vec<f64> = trace.cat_probs.iter().map(|p| p * scale).collect();
        d_cat[gold_cat] -= scale;
        let mut g_probs = vec![0.0; trace.sub_probs.len()];
        g_probs[gold_sub] = -scale / trace.sub_probs[gold_sub];
        let d_sub = match trace.mask_category {
            Some(c) => masked_softmax_vjp(&trace.sub_logits, self.mask.row(c), &trace.sub_probs, &g_probs),
            None => softmax_vjp(&trace.sub_probs, &g_probs),
        };

        let n_branches = trace.branches.len();
        let mut d_hidden: Vec<Vec<f64>> = trace.branches.iter().map(|b| vec![0.0; b.hidden.len()]).collect();
        {
            let (dw, rest) = grad[l.cat_w.offset..].split_at_mut(l.cat_w.len);
            let db = &mut rest[..l.cat_b.len];
            let dh = affine_backward(l.cat_w.of(&self.theta), &trace.branches[0].hidden, &d_cat, dw, db);
            d_hidden[0].iter_mut().zip(dh).for_each(|(a, b)| *a += b);
        }
        {
            let (dw, rest) = grad[l.sub_w.offset..].split_at_mut(l.sub_w.len);
            let db = &mut rest[..l.sub_b.len];
            let dh = affine_backward(
                l.sub_w.of(&self.theta),
                &trace.branches[n_branches - 1].hidden,
                &d_sub,
                dw,
                db,
            );
            d_hidden[n_branches - 1].iter_mut().zip(dh).for_each(|(a, b)| *a += b);
        }

        for ((bl, bt), mut dh) in l.branches.iter().zip(&trace.branches).zip(d_hidden) {
            // relu
            dh.iter_mut().zip(&bt.hidden).for_each(|(d, h)| {
                if *h <= 0.0 {
                    *d = 0.0;
                }
            });
            let (dw, rest) = grad[bl.dense_w.offset..].split_at_mut(bl.dense_w.len);
            let db = &mut rest[..bl.dense_b.len];
            let d_rep = affine_backward(bl.dense_w.of(&self.theta), &bt.rep, &dh, dw, db);

            let mut start = 0;
            for (tl, tt) in bl.towers.iter().zip(&bt.towers) {
                let d_out = &d_rep[start..start + tl.out_dim];
                start += tl.out_dim;
                if tt.ids.is_empty() {
                    continue;
                }
                let d_rows: Vec<Vec<f64>> = match (&tl.recurrent, &tt.recurrent) {
                    (None, _) => {
                        let n = tt.ids.len() as f64;
                        let row: Vec<f64> = d_out.iter().map(|g| g / n).collect();
                        vec![row; tt.ids.len()]
                    }
                    (Some([(fw, fb), (bw, bb)]), Some([ftrace, btrace])) => {
                        let h = self.config.encoder.hidden_size;
                        let shape = LstmShape { input: tl.dim, hidden: h };
                        let mut fwd_dx = {
                            let (gw, gb) = split_pair(grad, *fw, *fb);
                            lstm::backward(shape, fw.of(&self.theta), ftrace, &d_out[..h], gw, gb)
                        };
                        let bwd_dx = {
                            let (gw, gb) = split_pair(grad, *bw, *bb);
                            lstm::backward(shape, bw.of(&self.theta), btrace, &d_out[h..], gw, gb)
                        };
                        for (row, back) in fwd_dx.iter_mut().zip(bwd_dx.iter().rev()) {
                            row.iter_mut().zip(back).for_each(|(a, b)| *a += b);
                        }
                        fwd_dx
                    }
                    _ => unreachable!("trace matches layout"),
                };
                let demb = tl.embedding.of_mut(grad);
                for (&id, dr) in tt.ids.iter().zip(&d_rows) {
                    demb[id * tl.dim..(id + 1) * tl.dim]
                        .iter_mut()
                        .zip(dr)
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
        Ok(loss)
    }

    /// Mean batch loss and its exact gradient with respect to every parameter.
    pub fn compute_gradients(&self, batch: &[(&Product, usize, usize)]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut grad = vec![0.0; self.theta.len()];
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for &(product, c, s) in batch {
            self.check_gold(c, s)?;
            let encoded = self.encode(product);
            total += self.accumulate_gradient(&encoded, c, s, scale, &mut grad)?;
        }
        Ok((total * scale, grad))
    }

    /// Argmax category, then argmax subcategory under that category's mask row.
    pub fn predict_hierarchical(&self, product: &Product) -> Result<Prediction> {
        self.predict_encoded(&self.encode(product))
    }

    pub(crate) fn predict_encoded(&self, encoded: &EncodedTitle) -> Result<Prediction> {
        let t = self.forward_encoded(encoded, None)?;
        Ok(Prediction {
            category: argmax(&t.cat_probs),
            subcategory: argmax(&t.sub_probs),
            category_scores: t.cat_probs,
            subcategory_scores: t.sub_probs,
        })
    }
}

fn split_pair(grad: &mut [f64], w: Block, b: Block) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(w.offset + w.len, b.offset);
    let (gw, rest) = grad[w.offset..].split_at_mut(w.len);
    (gw, &mut rest[..b.len])
}
