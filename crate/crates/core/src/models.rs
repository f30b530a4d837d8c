//! Victim-side classifiers with manual backprop and plain local SGD.
//!
//! Both families end in the same two-layer head. A crafted block, when
//! grafted, sits in front of the head: directly on the pixels for images and
//! on the flattened sequence embedding for text.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::craft::{CraftedModule, Insertion, ModuleKind};
use crate::data::{ImageSample, Sample, TextRecord};
use crate::error::{Error, Result};
use crate::math::{
    grad_check, matmul, matmul_at, matmul_bt, relu, relu_mask, softmax_cross_entropy_row, squared_error_row,
    GradCheckReport, Matrix,
};

pub const HEAD_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        ParamBlock {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    fn set_grad(&mut self, grad: Matrix) {
        debug_assert_eq!(grad.shape(), self.value.shape());
        self.grad = grad;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Names and shapes of the parameter blocks in canonical flattening order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub blocks: Vec<BlockSpec>,
}

impl BlockLayout {
    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(|b| b.rows * b.cols).sum()
    }

    /// Offset and spec of the named block.
    pub fn locate(&self, name: &str) -> Option<(usize, &BlockSpec)> {
        let mut offset = 0;
        for b in &self.blocks {
            if b.name == name {
                return Some((offset, b));
            }
            offset += b.rows * b.cols;
        }
        None
    }

    pub fn segment<'a>(&self, flat: &'a [f64], name: &str) -> Result<&'a [f64]> {
        if flat.len() != self.total_len() {
            return Err(Error::Shape(format!(
                "vector of length {} does not match layout of {} parameters",
                flat.len(),
                self.total_len()
            )));
        }
        let (offset, spec) = self
            .locate(name)
            .ok_or_else(|| Error::Shape(format!("layout has no block {name:?}")))?;
        Ok(&flat[offset..offset + spec.rows * spec.cols])
    }

    pub fn matrix(&self, flat: &[f64], name: &str) -> Result<Matrix> {
        let seg = self.segment(flat, name)?;
        let (_, spec) = self.locate(name).expect("segment found it");
        Matrix::new(spec.rows, spec.cols, seg.to_vec())
    }
}

/// Flattened `θ_after − θ_before` in canonical block order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateVector(pub Vec<f64>);

impl UpdateVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn zeros(len: usize) -> Self {
        UpdateVector(vec![0.0; len])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    SquaredError,
}

/// `input → affine → ReLU → affine → logits`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub blocks: Vec<ParamBlock>,
    pub loss: LossKind,
}

fn uniform_init(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

impl Head {
    pub fn new(input_dim: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b0 = 1.0 / (input_dim as f64).sqrt();
        let b1 = 1.0 / (hidden as f64).sqrt();
        Head {
            blocks: vec![
                ParamBlock::new("head.0.weight", uniform_init(hidden, input_dim, b0, &mut rng)),
                ParamBlock::new("head.0.bias", Matrix::zeros(1, hidden)),
                ParamBlock::new("head.1.weight", uniform_init(classes, hidden, b1, &mut rng)),
                ParamBlock::new("head.1.bias", Matrix::zeros(1, classes)),
            ],
            loss: LossKind::CrossEntropy,
        }
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].value.cols()
    }

    pub fn classes(&self) -> usize {
        self.blocks[2].value.rows()
    }

    fn logits(&self, input: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        let mut pre = matmul_bt(input, &self.blocks[0].value)?;
        pre.add_row_broadcast(&self.blocks[1].value)?;
        let hidden = relu(&pre);
        let mut logits = matmul_bt(&hidden, &self.blocks[2].value)?;
        logits.add_row_broadcast(&self.blocks[3].value)?;
        Ok((pre, hidden, logits))
    }

    fn batch_loss(&self, logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
        let m = labels.len() as f64;
        let mut total = 0.0;
        let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
        for (r, &label) in labels.iter().enumerate() {
            let (loss, grad) = match self.loss {
                LossKind::CrossEntropy => softmax_cross_entropy_row(logits.row(r), label)?,
                LossKind::SquaredError => squared_error_row(logits.row(r), label)?,
            };
            total += loss;
            for (d, g) in dlogits.row_mut(r).iter_mut().zip(grad) {
                *d = g / m;
            }
        }
        Ok((total / m, dlogits))
    }

    fn loss(&self, input: &Matrix, labels: &[usize]) -> Result<f64> {
        let (_, _, logits) = self.logits(input)?;
        Ok(self.batch_loss(&logits, labels)?.0)
    }

    /// Mean loss; stores batch-mean grads and returns the input gradient.
    fn forward_backward(&mut self, input: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
        if input.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "head expects {} inputs, got {}",
                self.input_dim(),
                input.cols()
            )));
        }
        let (pre, hidden, logits) = self.logits(input)?;
        let (loss, dlogits) = self.batch_loss(&logits, labels)?;
        let dw2 = matmul_at(&dlogits, &hidden)?;
        let db2 = dlogits.column_sums();
        let dhidden = matmul(&dlogits, &self.blocks[2].value)?.hadamard(&relu_mask(&pre))?;
        let dw1 = matmul_at(&dhidden, input)?;
        let db1 = dhidden.column_sums();
        let dinput = matmul(&dhidden, &self.blocks[0].value)?;
        self.blocks[0].set_grad(dw1);
        self.blocks[1].set_grad(db1);
        self.blocks[2].set_grad(dw2);
        self.blocks[3].set_grad(db2);
        Ok((loss, dinput))
    }
}

/// A crafted block installed in a model, with gradient storage.
#[derive(Debug, Clone, PartialEq)]
pub struct CraftedLayer {
    pub kind: ModuleKind,
    pub insertion: Insertion,
    pub w1: ParamBlock,
    pub b1: ParamBlock,
    pub w2: ParamBlock,
    pub b2: ParamBlock,
}

impl CraftedLayer {
    pub fn from_module(module: &CraftedModule) -> Self {
        CraftedLayer {
            kind: module.kind,
            insertion: module.insertion,
            w1: ParamBlock::new("crafted.w1", module.w1.clone()),
            b1: ParamBlock::new("crafted.b1", module.b1.clone()),
            w2: ParamBlock::new("crafted.w2", module.w2.clone()),
            b2: ParamBlock::new("crafted.b2", module.b2.clone()),
        }
    }

    /// Current parameter values as a module.
    pub fn module(&self) -> CraftedModule {
        CraftedModule {
            w1: self.w1.value.clone(),
            b1: self.b1.value.clone(),
            w2: self.w2.value.clone(),
            b2: self.b2.value.clone(),
            kind: self.kind,
            insertion: self.insertion,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.value.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.value.rows()
    }

    fn blocks(&self) -> [&ParamBlock; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn blocks_mut(&mut self) -> [&mut ParamBlock; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Returns `(pre-activation, output)`.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut pre = matmul_bt(x, &self.w1.value)?;
        pre.add_row_broadcast(&self.b1.value)?;
        let mut out = matmul_bt(&relu(&pre), &self.w2.value)?;
        out.add_row_broadcast(&self.b2.value)?;
        Ok((pre, out))
    }

    fn backward(&mut self, x: &Matrix, pre: &Matrix, dout: &Matrix, need_dx: bool) -> Result<Option<Matrix>> {
        let act = relu(pre);
        self.w2.set_grad(matmul_at(dout, &act)?);
        self.b2.set_grad(dout.column_sums());
        let dpre = matmul(dout, &self.w2.value)?.hadamard(&relu_mask(pre))?;
        self.w1.set_grad(matmul_at(&dpre, x)?);
        self.b1.set_grad(dpre.column_sums());
        if need_dx {
            Ok(Some(matmul(&dpre, &self.w1.value)?))
        } else {
            Ok(None)
        }
    }
}

/// Behaviour shared by both model families.
pub trait LocalModel: Clone + Send + Sync {
    type Sample: Sample;

    /// Parameter blocks in canonical order.
    fn blocks(&self) -> Vec<&ParamBlock>;
    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock>;
    /// Mean loss over the batch; grads hold batch-mean gradients afterwards.
    fn forward_backward(&mut self, batch: &[Self::Sample]) -> Result<f64>;
    fn loss(&self, batch: &[Self::Sample]) -> Result<f64>;
    /// Dimension of the vector a crafted block would see.
    fn feature_dim(&self) -> usize;
    fn insertion(&self) -> Insertion;
    fn crafted(&self) -> Option<&CraftedLayer>;
    fn crafted_mut(&mut self) -> &mut Option<CraftedLayer>;

    fn layout(&self) -> BlockLayout {
        BlockLayout {
            blocks: self
                .blocks()
                .iter()
                .map(|b| BlockSpec {
                    name: b.name.clone(),
                    rows: b.value.rows(),
                    cols: b.value.cols(),
                })
                .collect(),
        }
    }

    fn flat_params(&self) -> Vec<f64> {
        self.blocks()
            .iter()
            .flat_map(|b| b.value.data().iter().copied())
            .collect()
    }

    fn flat_grads(&self) -> Vec<f64> {
        self.blocks()
            .iter()
            .flat_map(|b| b.grad.data().iter().copied())
            .collect()
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.blocks().iter().map(|b| b.value.len()).sum();
        if flat.len() != total {
            return Err(Error::Shape(format!("expected {total} parameters, got {}", flat.len())));
        }
        let mut offset = 0;
        for b in self.blocks_mut() {
            let n = b.value.len();
            b.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn zero_grads(&mut self) {
        for b in self.blocks_mut() {
            b.zero_grad();
        }
    }
}

fn check_batch<S>(batch: &[S]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageModel {
    pub dim: usize,
    pub crafted: Option<CraftedLayer>,
    pub head: Head,
}

impl ImageModel {
    pub fn new(dim: usize, classes: usize, seed: u64) -> Self {
        ImageModel {
            dim,
            crafted: None,
            head: Head::new(dim, HEAD_HIDDEN, classes, seed),
        }
    }

    fn inputs(&self, batch: &[ImageSample]) -> Result<(Matrix, Vec<usize>)> {
        check_batch(batch)?;
        let rows: Vec<&[f64]> = batch.iter().map(|s| s.pixels.as_slice()).collect();
        let x = Matrix::from_rows(&rows)?;
        if x.cols() != self.dim {
            return Err(Error::Shape(format!(
                "model expects {} pixels, got {}",
                self.dim,
                x.cols()
            )));
        }
        Ok((x, batch.iter().map(|s| s.label).collect()))
    }
}

impl LocalModel for ImageModel {
    type Sample = ImageSample;

    fn blocks(&self) -> Vec<&ParamBlock> {
        let mut v: Vec<&ParamBlock> = Vec::new();
        if let Some(c) = &self.crafted {
            v.extend(c.blocks());
        }
        v.extend(self.head.blocks.iter());
        v
    }

    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut v: Vec<&mut ParamBlock> = Vec::new();
        if let Some(c) = &mut self.crafted {
            v.extend(c.blocks_mut());
        }
        v.extend(self.head.blocks.iter_mut());
        v
    }

    fn forward_backward(&mut self, batch: &[ImageSample]) -> Result<f64> {
        let (x, labels) = self.inputs(batch)?;
        match &mut self.crafted {
            Some(c) => {
                let (pre, out) = c.forward(&x)?;
                let (loss, dout) = self.head.forward_backward(&out, &labels)?;
                c.backward(&x, &pre, &dout, false)?;
                Ok(loss)
            }
            None => Ok(self.head.forward_backward(&x, &labels)?.0),
        }
    }

    fn loss(&self, batch: &[ImageSample]) -> Result<f64> {
        let (x, labels) = self.inputs(batch)?;
        match &self.crafted {
            Some(c) => self.head.loss(&c.forward(&x)?.1, &labels),
            None => self.head.loss(&x, &labels),
        }
    }

    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn insertion(&self) -> Insertion {
        Insertion::ImageFront
    }

    fn crafted(&self) -> Option<&CraftedLayer> {
        self.crafted.as_ref()
    }

    fn crafted_mut(&mut self) -> &mut Option<CraftedLayer> {
        &mut self.crafted
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextModel {
    pub seq_len: usize,
    pub embedding: ParamBlock,
    pub crafted: Option<CraftedLayer>,
    pub head: Head,
}

/// Published embedding table: uniform entries with standard deviation
/// `1/√e`; the pad row is zero.
pub fn init_embedding(vocab_size: usize, embed_dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x656d_6265_6464_696e);
    let bound = (3.0 / embed_dim as f64).sqrt();
    Matrix::from_fn(vocab_size, embed_dim, |r, _| {
        let v = rng.gen_range(-bound..bound);
        if r == crate::data::PAD_INDEX {
            0.0
        } else {
            v
        }
    })
}

impl TextModel {
    pub fn new(vocab_size: usize, seq_len: usize, embed_dim: usize, classes: usize, seed: u64) -> Self {
        TextModel {
            seq_len,
            embedding: ParamBlock::new("embedding", init_embedding(vocab_size, embed_dim, seed)),
            crafted: None,
            head: Head::new(seq_len * embed_dim, HEAD_HIDDEN, classes, seed),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.value.cols()
    }

    /// Concatenated token embeddings, one row per record.
    pub fn embed(&self, batch: &[TextRecord]) -> Result<Matrix> {
        check_batch(batch)?;
        let e = self.embed_dim();
        let vocab = self.embedding.value.rows();
        let mut z = Matrix::zeros(batch.len(), self.seq_len * e);
        for (r, rec) in batch.iter().enumerate() {
            if rec.tokens.len() != self.seq_len {
                return Err(Error::Shape(format!(
                    "record has {} tokens, model expects {}",
                    rec.tokens.len(),
                    self.seq_len
                )));
            }
            let row = z.row_mut(r);
            for (p, &t) in rec.tokens.iter().enumerate() {
                if t >= vocab {
                    return Err(Error::Index(format!("token {t} >= vocabulary {vocab}")));
                }
                row[p * e..(p + 1) * e].copy_from_slice(self.embedding.value.row(t));
            }
        }
        Ok(z)
    }
}

impl LocalModel for TextModel {
    type Sample = TextRecord;

    fn blocks(&self) -> Vec<&ParamBlock> {
        let mut v: Vec<&ParamBlock> = Vec::new();
        if let Some(c) = &self.crafted {
            v.extend(c.blocks());
        }
        v.push(&self.embedding);
        v.extend(self.head.blocks.iter());
        v
    }

    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut v: Vec<&mut ParamBlock> = Vec::new();
        if let Some(c) = &mut self.crafted {
            v.extend(c.blocks_mut());
        }
        v.push(&mut self.embedding);
        v.extend(self.head.blocks.iter_mut());
        v
    }

    fn forward_backward(&mut self, batch: &[TextRecord]) -> Result<f64> {
        let z = self.embed(batch)?;
        let labels: Vec<usize> = batch.iter().map(|r| r.label).collect();
        let (loss, dz) = match &mut self.crafted {
            Some(c) => {
                let (pre, out) = c.forward(&z)?;
                let (loss, dout) = self.head.forward_backward(&out, &labels)?;
                let dz = c.backward(&z, &pre, &dout, true)?.expect("requested");
                (loss, dz)
            }
            None => self.head.forward_backward(&z, &labels)?,
        };
        let e = self.embed_dim();
        let mut grad = Matrix::zeros(self.embedding.value.rows(), e);
        for (r, rec) in batch.iter().enumerate() {
            let drow = dz.row(r);
            for (p, &t) in rec.tokens.iter().enumerate() {
                for (g, d) in grad.row_mut(t).iter_mut().zip(&drow[p * e..(p + 1) * e]) {
                    *g += d;
                }
            }
        }
        self.embedding.set_grad(grad);
        Ok(loss)
    }

    fn loss(&self, batch: &[TextRecord]) -> Result<f64> {
        let z = self.embed(batch)?;
        let labels: Vec<usize> = batch.iter().map(|r| r.label).collect();
        match &self.crafted {
            Some(c) => self.head.loss(&c.forward(&z)?.1, &labels),
            None => self.head.loss(&z, &labels),
        }
    }

    fn feature_dim(&self) -> usize {
        self.seq_len * self.embed_dim()
    }

    fn insertion(&self) -> Insertion {
        Insertion::PostEmbedding
    }

    fn crafted(&self) -> Option<&CraftedLayer> {
        self.crafted.as_ref()
    }

    fn crafted_mut(&mut self) -> &mut Option<CraftedLayer> {
        &mut self.crafted
    }
}

/// Finite-difference check of every parameter of `model` on `batch`.
pub fn grad_check_model<M: LocalModel>(model: &M, batch: &[M::Sample]) -> Result<GradCheckReport> {
    let params: Vec<Matrix> = model.blocks().iter().map(|b| b.value.clone()).collect();
    let mut work = model.clone();
    grad_check(
        |p| {
            for (b, v) in work.blocks_mut().into_iter().zip(p) {
                b.value = v.clone();
            }
            work.zero_grads();
            let loss = work.forward_backward(batch)?;
            Ok((loss, work.blocks().iter().map(|b| b.grad.clone()).collect()))
        },
        &params,
    )
}

/// Runs plain SGD from the received parameters and returns the parameter
/// delta. `batch_size == 0` (or ≥ the data size) means full batch; the
/// received model is left untouched.
pub fn local_train<M: LocalModel>(
    model: &M,
    data: &[M::Sample],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<UpdateVector> {
    if data.is_empty() {
        return Err(Error::Config("local training needs at least one sample".into()));
    }
    if epochs == 0 {
        return Err(Error::Config("local training needs at least one epoch".into()));
    }
    let before = model.flat_params();
    let mut work = model.clone();
    let bs = if batch_size == 0 || batch_size >= data.len() {
        data.len()
    } else {
        batch_size
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch: Vec<M::Sample> = Vec::with_capacity(bs);
    for _ in 0..epochs {
        if bs < data.len() {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(bs) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i].clone()));
            let loss = work.forward_backward(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Evaluation(format!("non-finite training loss {loss}")));
            }
            for b in work.blocks_mut() {
                let grad = std::mem::replace(&mut b.grad, Matrix::zeros(0, 0));
                b.value.sub_scaled(&grad, lr)?;
                b.grad = grad;
            }
        }
    }
    let after = work.flat_params();
    Ok(UpdateVector(after.iter().zip(&before).map(|(a, b)| a - b).collect()))
}

/// `−update / (lr · epochs)`: the attacker's gradient estimate.
pub fn estimate_gradient(update: &[f64], epochs: usize, lr: f64) -> Result<Vec<f64>> {
    if lr == 0.0 || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate {lr} cannot be inverted")));
    }
    if epochs == 0 {
        return Err(Error::Config("epochs must be at least one".into()));
    }
    let f = -1.0 / (lr * epochs as f64);
    Ok(update.iter().map(|u| u * f).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::craft::{craft_linear_leakage, craft_zero_gradient, graft, BinVector, BrightnessCdf};
    use crate::data::{brightness, parse_text_corpus, synth_images, synth_text_lines};

    fn small_images(n: usize, seed: u64) -> Vec<ImageSample> {
        synth_images(n, 4, 3, seed)
    }

    fn bins_for(samples: &[ImageSample], k: usize) -> BinVector {
        BinVector::new(&BrightnessCdf::from_images(samples).unwrap(), k).unwrap()
    }

    #[test]
    fn grad_check_plain_and_crafted_image_models() {
        let data = small_images(6, 1);
        let model = ImageModel::new(16, 3, 5);
        let r = grad_check_model(&model, &data).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");

        let aux = small_images(40, 2);
        let h = bins_for(&aux, 5);
        let mut crafted = graft(&model, &craft_linear_leakage(&h, 16, 1.0)).unwrap();
        // samples below h_1 feed an all-zero vector into the head; keep its
        // hidden pre-activations off the ReLU kink
        crafted.head.blocks[1].value.fill(0.05);
        let r = grad_check_model(&crafted, &data).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");

        let mse = ImageModel {
            head: crafted.head.clone().with_loss(LossKind::SquaredError),
            ..crafted.clone()
        };
        let r = grad_check_model(&mse, &data).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn grad_check_text_model() {
        let lines = synth_text_lines(8, 12, 2, 5, 2, 3);
        let (recs, vocab) = parse_text_corpus(&lines.join("\n"), 4, "t").unwrap();
        let model = TextModel::new(vocab.len(), 4, 3, 2, 9);
        let r = grad_check_model(&model, &recs[..3]).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let aux: Vec<_> = recs[3..].to_vec();
        let cdf = BrightnessCdf::from_text(&aux, &model.embedding.value).unwrap();
        let h = BinVector::new(&cdf, 3).unwrap();
        let module = crate::craft::craft_linear_leakage_at(&h, 12, 1.0 / 3.0, Insertion::PostEmbedding);
        let crafted = graft(&model, &module).unwrap();
        let r = grad_check_model(&crafted, &recs[..3]).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn zero_gradient_block_has_exact_zero_grads() {
        let aux = small_images(50, 3);
        let h = bins_for(&aux, 6);
        let mut model = graft(&ImageModel::new(16, 3, 1), &craft_zero_gradient(&h, 16, 1.0)).unwrap();
        let batch: Vec<_> = aux[..10].to_vec();
        model.forward_backward(&batch).unwrap();
        let c = model.crafted.as_ref().unwrap();
        assert!(c.w1.grad.data().iter().all(|&g| g == 0.0));
        assert!(c.b1.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicated_batch_gives_identical_mean_grads() {
        let s = small_images(1, 4);
        let mut a = ImageModel::new(16, 3, 2);
        let mut b = a.clone();
        a.forward_backward(&s).unwrap();
        b.forward_backward(&[s[0].clone(), s[0].clone()]).unwrap();
        for (x, y) in a.flat_grads().iter().zip(b.flat_grads()) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }

    #[test]
    fn single_full_batch_step_is_scaled_gradient() {
        let data = small_images(8, 5);
        let model = ImageModel::new(16, 3, 3);
        let lr = 0.05;
        let update = local_train(&model, &data, 1, 0, lr, 0).unwrap();
        let mut g = model.clone();
        g.forward_backward(&data).unwrap();
        for (u, gr) in update.0.iter().zip(g.flat_grads()) {
            assert!((u + lr * gr).abs() < 1e-15);
        }
        let est = estimate_gradient(&update.0, 1, lr).unwrap();
        for (e, gr) in est.iter().zip(g.flat_grads()) {
            assert!((e - gr).abs() <= 1e-12 * gr.abs().max(1e-3));
        }
        let zero = local_train(&model, &data, 3, 0, 0.0, 0).unwrap();
        assert!(zero.0.iter().all(|&u| u == 0.0));
        assert!(local_train(&model, &[], 1, 0, lr, 0).is_err());
    }

    #[test]
    fn local_train_is_deterministic_and_stateless() {
        let data = small_images(12, 6);
        let model = ImageModel::new(16, 3, 3);
        let snapshot = model.clone();
        let a = local_train(&model, &data, 3, 4, 0.1, 9).unwrap();
        let b = local_train(&model, &data, 3, 4, 0.1, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(model, snapshot);
    }

    #[test]
    fn zero_gradient_client_keeps_first_layer_fixed_over_epochs() {
        let aux = small_images(60, 7);
        let h = bins_for(&aux, 8);
        let model = graft(&ImageModel::new(16, 3, 1), &craft_zero_gradient(&h, 16, 1.0)).unwrap();
        // data whose brightness stays within the auxiliary range
        let data: Vec<_> = small_images(40, 8)
            .into_iter()
            .filter(|s| brightness(&s.pixels).unwrap() <= h.max())
            .collect();
        let update = local_train(&model, &data, 5, 0, 0.1, 0).unwrap();
        let layout = model.layout();
        assert!(layout
            .segment(&update.0, "crafted.w1")
            .unwrap()
            .iter()
            .all(|&u| u == 0.0));
        assert!(layout
            .segment(&update.0, "crafted.b1")
            .unwrap()
            .iter()
            .all(|&u| u == 0.0));
    }

    #[test]
    fn multi_epoch_estimate_tracks_first_gradient() {
        let data = synth_images(30, 28, 2, 11);
        let aux = synth_images(200, 28, 2, 12);
        let h = bins_for(&aux, 32);
        let model = graft(&ImageModel::new(784, 2, 1), &craft_linear_leakage(&h, 784, 1.0)).unwrap();
        let lr = 1e-3;
        let update = local_train(&model, &data, 5, 0, lr, 0).unwrap();
        let est = estimate_gradient(&update.0, 5, lr).unwrap();
        let mut g = model.clone();
        g.forward_backward(&data).unwrap();
        let truth = g.flat_grads();
        let dotp: f64 = est.iter().zip(&truth).map(|(a, b)| a * b).sum();
        let na: f64 = est.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = truth.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(dotp / (na * nb) > 0.99, "cosine {}", dotp / (na * nb));

        let scaled: Vec<f64> = update.0.iter().map(|u| u * 3.0).collect();
        for (a, b) in estimate_gradient(&scaled, 5, lr * 3.0).unwrap().iter().zip(&est) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-12));
        }
        assert!(estimate_gradient(&update.0, 5, 0.0).is_err());
    }

    #[test]
    fn layout_segments() {
        let model = ImageModel::new(16, 3, 1);
        let layout = model.layout();
        assert_eq!(layout.total_len(), model.flat_params().len());
        assert_eq!(layout.blocks[0].name, "head.0.weight");
        assert!(layout.segment(&[0.0; 3], "head.0.bias").is_err());
    }
}
