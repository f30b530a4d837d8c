//! Recovery quality: PSNR, SSIM, WER and bin-to-sample matching.

use serde::{Deserialize, Serialize};

use crate::data::{strip_trailing_pads, ImageSample, TextRecord};
use crate::error::{Error, Result};
use crate::reconstruct::{BinStatus, Modality, RecoveredBatch, RecoveredRecord};

pub const PSNR_CAP: f64 = 200.0;
pub const SSIM_WINDOW: usize = 8;

pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("psnr over lengths {} and {}", a.len(), b.len())));
    }
    if peak <= 0.0 {
        return Err(Error::Config("psnr peak must be positive".into()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM over all 8×8 windows (stride 1) of two `side × side` images
/// with values in [0,1].
pub fn ssim(a: &[f64], b: &[f64], side: usize) -> Result<f64> {
    if a.len() != side * side || b.len() != side * side {
        return Err(Error::Shape(format!(
            "ssim expects {side}x{side} images, got {} and {} values",
            a.len(),
            b.len()
        )));
    }
    if side < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "image side {side} smaller than the {SSIM_WINDOW}px window"
        )));
    }
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let positions = side - SSIM_WINDOW + 1;
    let mut total = 0.0;
    for y in 0..positions {
        for x in 0..positions {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in y..y + SSIM_WINDOW {
                for c in x..x + SSIM_WINDOW {
                    let (p, q) = (a[r * side + c], b[r * side + c]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
    }
    Ok(total / (positions * positions) as f64)
}

pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Word-level edit distance over reference length.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Config("word error rate needs a non-empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub psnr: f64,
    pub ssim: f64,
    pub wer: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            psnr: 20.0,
            ssim: 0.9,
            wer: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub bin: usize,
    pub source_id: u64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub wer: Option<f64>,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_samples: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub rate: f64,
    pub successes: usize,
    pub total: usize,
    /// Means over successful pairs.
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_wer: Option<f64>,
    /// Means over every matched pair.
    pub overall_mean_psnr: Option<f64>,
    pub overall_mean_ssim: Option<f64>,
    pub overall_mean_wer: Option<f64>,
}

/// Repeatedly pairs the globally best remaining `(row, col)` score; ties go to
/// the lowest row, then column. `scores[row][col]`.
pub fn greedy_assign(scores: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let mut cells: Vec<(f64, usize, usize)> = scores
        .iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, &s)| (s, r, c)))
        .collect();
    cells.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let rows = scores.len();
    let cols = scores.first().map_or(0, Vec::len);
    let mut row_used = vec![false; rows];
    let mut col_used = vec![false; cols];
    let mut out = Vec::new();
    for (_, r, c) in cells {
        if !row_used[r] && !col_used[c] {
            row_used[r] = true;
            col_used[c] = true;
            out.push((r, c));
            if out.len() == rows.min(cols) {
                break;
            }
        }
    }
    out
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn summarize(result: &MatchResult, total: usize) -> RateSummary {
    let ok = || result.pairs.iter().filter(|p| p.success);
    let successes = ok().count();
    RateSummary {
        rate: if total == 0 {
            0.0
        } else {
            successes as f64 / total as f64
        },
        successes,
        total,
        mean_psnr: mean(ok().filter_map(|p| p.psnr)),
        mean_ssim: mean(ok().filter_map(|p| p.ssim)),
        mean_wer: mean(ok().filter_map(|p| p.wer)),
        overall_mean_psnr: mean(result.pairs.iter().filter_map(|p| p.psnr)),
        overall_mean_ssim: mean(result.pairs.iter().filter_map(|p| p.ssim)),
        overall_mean_wer: mean(result.pairs.iter().filter_map(|p| p.wer)),
    }
}

/// Greedy PSNR matching of recovered bins to ground-truth images.
pub fn match_images(
    recovered: &RecoveredBatch,
    truth: &[ImageSample],
    thresholds: &Thresholds,
) -> Result<(MatchResult, RateSummary)> {
    if recovered.modality != Modality::Image {
        return Err(Error::Config("image matching on a non-image batch".into()));
    }
    let bins: Vec<_> = recovered.recovered().collect();
    let scores = bins
        .iter()
        .map(|b| {
            let v = b.vector.as_ref().expect("recovered");
            truth
                .iter()
                .map(|s| psnr(v, &s.pixels, 1.0))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let side = truth
        .first()
        .map_or(0, |s| (s.pixels.len() as f64).sqrt().round() as usize);
    let mut matched = vec![false; truth.len()];
    let mut pairs = Vec::new();
    for (bi, si) in greedy_assign(&scores) {
        matched[si] = true;
        let p = scores[bi][si];
        let s = ssim(bins[bi].vector.as_ref().expect("recovered"), &truth[si].pixels, side)?;
        pairs.push(MatchedPair {
            bin: bins[bi].bin,
            source_id: truth[si].source_id,
            psnr: Some(p),
            ssim: Some(s),
            wer: None,
            success: p > thresholds.psnr && s > thresholds.ssim,
        });
    }
    pairs.sort_by_key(|p| p.bin);
    let result = MatchResult {
        pairs,
        unmatched_samples: truth
            .iter()
            .zip(&matched)
            .filter(|(_, &m)| !m)
            .map(|(s, _)| s.source_id)
            .collect(),
    };
    let summary = summarize(&result, truth.len());
    Ok((result, summary))
}

/// Greedy `1 − WER` matching of recovered records to ground truth; trailing
/// pads are ignored on both sides.
pub fn match_texts(
    recovered: &[RecoveredRecord],
    truth: &[TextRecord],
    thresholds: &Thresholds,
) -> Result<(MatchResult, RateSummary)> {
    let wers: Vec<Vec<f64>> = recovered
        .iter()
        .map(|r| {
            truth
                .iter()
                .map(|t| wer(strip_trailing_pads(&t.tokens), strip_trailing_pads(&r.tokens)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<Vec<f64>> = wers.iter().map(|row| row.iter().map(|w| 1.0 - w).collect()).collect();
    let mut matched = vec![false; truth.len()];
    let mut pairs = Vec::new();
    for (ri, ti) in greedy_assign(&scores) {
        matched[ti] = true;
        let w = wers[ri][ti];
        pairs.push(MatchedPair {
            bin: recovered[ri].bin,
            source_id: truth[ti].source_id,
            psnr: None,
            ssim: None,
            wer: Some(w),
            success: w < thresholds.wer,
        });
    }
    pairs.sort_by_key(|p| p.bin);
    let result = MatchResult {
        pairs,
        unmatched_samples: truth
            .iter()
            .zip(&matched)
            .filter(|(_, &m)| !m)
            .map(|(s, _)| s.source_id)
            .collect(),
    };
    let summary = summarize(&result, truth.len());
    Ok((result, summary))
}

/// Marks recovered bins whose best PSNR against every truth image falls
/// below `psnr_threshold`.
pub fn flag_collisions(batch: &mut RecoveredBatch, truth: &[ImageSample], psnr_threshold: f64) -> Result<usize> {
    let mut flagged = 0;
    for item in batch.items.iter_mut() {
        let Some(v) = &item.vector else { continue };
        let mut best = f64::NEG_INFINITY;
        for s in truth {
            best = best.max(psnr(v, &s.pixels, 1.0)?);
        }
        if best < psnr_threshold {
            item.status = BinStatus::CollisionSuspect;
            flagged += 1;
        }
    }
    Ok(flagged)
}
