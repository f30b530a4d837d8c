//! Closed-form sample recovery from the crafted block's first-layer update.

use serde::{Deserialize, Serialize};

use crate::data::{strip_trailing_pads, Vocabulary};
use crate::error::{Error, Result};
use crate::fl::AttackerView;
use crate::math::Matrix;
use crate::models::{estimate_gradient, BlockLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinStatus {
    Recovered,
    Empty,
    CollisionSuspect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRecovery {
    /// 1-based.
    pub bin: usize,
    /// Clipped to [0,1] for images; `None` for empty bins.
    pub vector: Option<Vec<f64>>,
    /// Unclipped ratio.
    pub raw: Option<Vec<f64>>,
    pub denom_mass: f64,
    pub status: BinStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredBatch {
    pub items: Vec<BinRecovery>,
    pub modality: Modality,
}

impl RecoveredBatch {
    pub fn recovered(&self) -> impl Iterator<Item = &BinRecovery> {
        self.items.iter().filter(|b| b.vector.is_some())
    }

    pub fn non_empty(&self) -> usize {
        self.recovered().count()
    }
}

/// Extracts the crafted `w1`/`b1` segments and converts them into gradient
/// estimates.
pub fn slice_crafted_grads(
    aggregate: &[f64],
    layout: &BlockLayout,
    lr: f64,
    epochs: usize,
) -> Result<(Matrix, Vec<f64>)> {
    let w1 = layout.matrix(aggregate, "crafted.w1")?;
    let b1 = layout.segment(aggregate, "crafted.b1")?;
    if b1.len() != w1.rows() {
        return Err(Error::Shape(format!(
            "b1 has {} entries but w1 has {} rows",
            b1.len(),
            w1.rows()
        )));
    }
    let g_w1 = Matrix::new(w1.rows(), w1.cols(), estimate_gradient(w1.data(), epochs, lr)?)?;
    let g_b1 = estimate_gradient(b1, epochs, lr)?;
    Ok((g_w1, g_b1))
}

/// Default empty-bin threshold: `1e-8 · max|g_b1|`.
pub fn default_epsilon(g_b1: &[f64]) -> f64 {
    1e-8 * g_b1.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// For `l = 1..=k`: `(g_w1[l+1] − g_w1[l]) / (g_b1[l+1] − g_b1[l])` with the
/// `k+1` terms taken as zero. Bins whose denominator is below `epsilon`
/// (default [`default_epsilon`]) are empty.
pub fn recover_bins(g_w1: &Matrix, g_b1: &[f64], epsilon: Option<f64>, modality: Modality) -> Result<RecoveredBatch> {
    let k = g_b1.len();
    if g_w1.rows() != k {
        return Err(Error::Shape(format!("g_w1 has {} rows, g_b1 has {k}", g_w1.rows())));
    }
    let eps = epsilon.unwrap_or_else(|| default_epsilon(g_b1));
    let d = g_w1.cols();
    let zeros = vec![0.0; d];
    let items = (0..k)
        .map(|l| {
            let (next_w, next_b) = if l + 1 < k {
                (g_w1.row(l + 1), g_b1[l + 1])
            } else {
                (zeros.as_slice(), 0.0)
            };
            let den = next_b - g_b1[l];
            let mass = den.abs();
            if mass < eps || den == 0.0 {
                return BinRecovery {
                    bin: l + 1,
                    vector: None,
                    raw: None,
                    denom_mass: mass,
                    status: BinStatus::Empty,
                };
            }
            let raw: Vec<f64> = next_w.iter().zip(g_w1.row(l)).map(|(a, b)| (a - b) / den).collect();
            let vector = match modality {
                Modality::Image => raw.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
                Modality::Text => raw.clone(),
            };
            BinRecovery {
                bin: l + 1,
                vector: Some(vector),
                raw: Some(raw),
                denom_mass: mass,
                status: BinStatus::Recovered,
            }
        })
        .collect();
    Ok(RecoveredBatch { items, modality })
}

/// The attack path: consumes only what the server holds.
pub fn reconstruct(view: &AttackerView, modality: Modality) -> Result<RecoveredBatch> {
    let (g_w1, g_b1) = slice_crafted_grads(&view.aggregate, &view.layout, view.lr, view.local_epochs)?;
    recover_bins(&g_w1, &g_b1, None, modality)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredText {
    pub tokens: Vec<usize>,
    pub per_position_distance: Vec<f64>,
}

/// Nearest table row (Euclidean, lowest index on ties) for each length-`e`
/// chunk of `batchvec`.
pub fn invert_embeddings(batchvec: &[f64], embedding: &Matrix) -> Result<RecoveredText> {
    let e = embedding.cols();
    if e == 0 || !batchvec.len().is_multiple_of(e) {
        return Err(Error::Shape(format!(
            "vector of length {} does not split into chunks of {e}",
            batchvec.len()
        )));
    }
    let mut tokens = Vec::with_capacity(batchvec.len() / e);
    let mut dist = Vec::with_capacity(batchvec.len() / e);
    for chunk in batchvec.chunks(e) {
        let mut best = (usize::MAX, f64::INFINITY);
        for t in 0..embedding.rows() {
            let mut d2 = 0.0;
            for (a, b) in chunk.iter().zip(embedding.row(t)) {
                d2 += (a - b) * (a - b);
            }
            if d2 < best.1 {
                best = (t, d2);
            }
        }
        if best.0 == usize::MAX {
            return Err(Error::Shape("embedding table is empty or chunk is not finite".into()));
        }
        tokens.push(best.0);
        dist.push(best.1.sqrt());
    }
    Ok(RecoveredText {
        tokens,
        per_position_distance: dist,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredRecord {
    pub bin: usize,
    pub tokens: Vec<usize>,
    pub text: String,
    pub mean_distance: f64,
}

pub fn recover_text_batch(
    batch: &RecoveredBatch,
    embedding: &Matrix,
    vocab: &Vocabulary,
) -> Result<Vec<RecoveredRecord>> {
    if batch.modality != Modality::Text {
        return Err(Error::Config("batch was not recovered from a text model".into()));
    }
    batch
        .recovered()
        .map(|item| {
            let inv = invert_embeddings(item.vector.as_ref().expect("recovered"), embedding)?;
            let n = inv.per_position_distance.len().max(1) as f64;
            Ok(RecoveredRecord {
                bin: item.bin,
                text: vocab.decode(&inv.tokens),
                mean_distance: inv.per_position_distance.iter().sum::<f64>() / n,
                tokens: strip_trailing_pads(&inv.tokens).to_vec(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::craft::{craft_linear_leakage, BinVector, BrightnessCdf};
    use crate::craft::{graft, CraftedModule};
    use crate::data::{brightness, synth_images, ImageSample};
    use crate::models::{init_embedding, ImageModel, LocalModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graft_test_model(module: &CraftedModule, d: usize, classes: usize) -> ImageModel {
        graft(&ImageModel::new(d, classes, 1), module).unwrap()
    }

    fn grads(model: &crate::models::ImageModel, batch: &[ImageSample]) -> (Matrix, Vec<f64>) {
        let mut m = model.clone();
        m.forward_backward(batch).unwrap();
        let c = m.crafted.as_ref().unwrap();
        (c.w1.grad.clone(), c.b1.grad.data().to_vec())
    }

    #[test]
    fn single_sample_is_recovered_exactly() {
        let aux = synth_images(200, 8, 2, 1);
        let h = BinVector::new(&BrightnessCdf::from_images(&aux).unwrap(), 10).unwrap();
        let model = graft_test_model(&craft_linear_leakage(&h, 64, 1.0), 64, 2);
        let sample = synth_images(50, 8, 2, 2)
            .into_iter()
            .find(|s| h.bin_of(brightness(&s.pixels).unwrap()).is_some())
            .unwrap();
        let (gw, gb) = grads(&model, std::slice::from_ref(&sample));
        let rec = recover_bins(&gw, &gb, None, Modality::Image).unwrap();
        assert_eq!(rec.non_empty(), 1);
        let v = rec.recovered().next().unwrap().vector.as_ref().unwrap();
        let err = v
            .iter()
            .zip(&sample.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "max abs error {err}");
    }

    #[test]
    fn distinct_bins_recover_every_sample() {
        let aux = synth_images(400, 8, 2, 3);
        let h = BinVector::new(&BrightnessCdf::from_images(&aux).unwrap(), 24).unwrap();
        let model = graft_test_model(&craft_linear_leakage(&h, 64, 1.0), 64, 2);
        let mut seen = std::collections::HashSet::new();
        let batch: Vec<ImageSample> = synth_images(600, 8, 2, 4)
            .into_iter()
            .filter(|s| match h.bin_of(brightness(&s.pixels).unwrap()) {
                Some(b) if b < h.k() => seen.insert(b),
                _ => false,
            })
            .collect();
        assert!(batch.len() >= 20);
        let (gw, gb) = grads(&model, &batch);
        let rec = recover_bins(&gw, &gb, None, Modality::Image).unwrap();
        assert_eq!(rec.non_empty(), batch.len());
        for s in &batch {
            let bin = h.bin_of(brightness(&s.pixels).unwrap()).unwrap();
            let v = rec.items[bin - 1].vector.as_ref().unwrap();
            let p = crate::metrics::psnr(v, &s.pixels, 1.0).unwrap();
            assert!(p > 60.0, "bin {bin}: {p} dB");
        }
    }

    #[test]
    fn collided_pair_mixes() {
        let aux = synth_images(200, 8, 2, 5);
        let h = BinVector::new(&BrightnessCdf::from_images(&aux).unwrap(), 4).unwrap();
        let model = graft_test_model(&craft_linear_leakage(&h, 64, 1.0), 64, 2);
        let a = synth_images(1, 8, 2, 6).remove(0);
        // b: same brightness, mirrored image
        let mut b = a.clone();
        b.pixels.reverse();
        b.source_id = 99;
        let bin = h.bin_of(brightness(&a.pixels).unwrap());
        let (gw, gb) = grads(&model, &[a.clone(), b.clone()]);
        let rec = recover_bins(&gw, &gb, None, Modality::Image).unwrap();
        if bin.is_some() {
            assert_eq!(rec.non_empty(), 1);
            let v = rec.recovered().next().unwrap().vector.clone().unwrap();
            let pa = crate::metrics::psnr(&v, &a.pixels, 1.0).unwrap();
            let pb = crate::metrics::psnr(&v, &b.pixels, 1.0).unwrap();
            assert!(pa < 60.0 && pb < 60.0);
        }
    }

    #[test]
    fn empty_and_scaled_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gw = Matrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
        let gb: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = recover_bins(&gw, &gb, None, Modality::Text).unwrap();
        for c in [1e-3, -2.0, 1e3] {
            let scaled = recover_bins(
                &gw.scale(c),
                &gb.iter().map(|v| v * c).collect::<Vec<_>>(),
                None,
                Modality::Text,
            )
            .unwrap();
            for (x, y) in base.items.iter().zip(&scaled.items) {
                for (p, q) in x.raw.as_ref().unwrap().iter().zip(y.raw.as_ref().unwrap()) {
                    assert!((p - q).abs() <= 1e-9 * p.abs().max(1.0));
                }
            }
        }
        let zero = recover_bins(&Matrix::zeros(4, 3), &[0.0; 4], None, Modality::Image).unwrap();
        assert!(zero.items.iter().all(|b| b.status == BinStatus::Empty));
        assert!(recover_bins(&Matrix::zeros(3, 3), &[0.0; 4], None, Modality::Image).is_err());
    }

    #[test]
    fn slice_round_trip_and_truncation() {
        let h = BinVector::from_edges(vec![0.2, 0.4, 0.6]).unwrap();
        let model = graft_test_model(&craft_linear_leakage(&h, 4, 1.0), 4, 2);
        let layout = model.layout();
        let flat: Vec<f64> = (0..layout.total_len()).map(|i| i as f64).collect();
        let (gw, gb) = slice_crafted_grads(&flat, &layout, 1.0, 1).unwrap();
        assert_eq!(gw.data(), &flat[..12].iter().map(|v| -v).collect::<Vec<_>>()[..]);
        assert_eq!(gb, flat[12..15].iter().map(|v| -v).collect::<Vec<_>>());
        assert!(matches!(
            slice_crafted_grads(&flat[1..], &layout, 1.0, 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn token_inversion() {
        let table = init_embedding(50, 8, 3);
        let exact = invert_embeddings(table.row(7), &table).unwrap();
        assert_eq!(exact.tokens, vec![7]);
        assert_eq!(exact.per_position_distance, vec![0.0]);

        // noise below half the minimum inter-row gap cannot change the answer
        let mut gap = f64::INFINITY;
        for i in 0..50 {
            for j in i + 1..50 {
                let d: f64 = table
                    .row(i)
                    .iter()
                    .zip(table.row(j))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                gap = gap.min(d);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
        let noisy: Vec<f64> = table
            .row(7)
            .iter()
            .zip(&noise)
            .map(|(a, n)| a + n / norm * 0.49 * gap)
            .collect();
        assert_eq!(invert_embeddings(&noisy, &table).unwrap().tokens, vec![7]);

        assert_eq!(invert_embeddings(&[0.0; 16], &table).unwrap().tokens, vec![0, 0]);
        assert!(invert_embeddings(&[0.0; 9], &table).is_err());
    }
}
