//! One federated round: per-client publication, local training, pairwise
//! additive masking over fixed-point words, and aggregation.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use web_time::Instant;

use crate::craft::{graft, CraftedModule, ModuleKind};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::models::{local_train, BlockLayout, LocalModel, UpdateVector};

/// Reals ↔ two's-complement 64-bit words at a fixed binary scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointCodec {
    pub scale: f64,
    pub clip: f64,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        Self::with_scale(f64::from(1u32 << 20))
    }
}

impl FixedPointCodec {
    /// Clip defaults to `2^30 / scale`.
    pub fn with_scale(scale: f64) -> Self {
        FixedPointCodec {
            scale,
            clip: f64::from(1u32 << 30) / scale,
        }
    }

    pub fn encode(&self, x: f64) -> u64 {
        let c = x.clamp(-self.clip, self.clip);
        ((c * self.scale).round() as i64) as u64
    }

    pub fn decode(&self, word: u64) -> f64 {
        word as i64 as f64 / self.scale
    }

    /// Worst-case per-coordinate error of a decoded sum over `n` encodings.
    pub fn sum_tolerance(&self, n: usize) -> f64 {
        n as f64 / (2.0 * self.scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedUpdate {
    pub client: usize,
    pub words: Vec<u64>,
    /// Masked encoding of the constant 1; the masked sum must equal the
    /// number of contributing clients.
    pub check: u64,
}

fn pair_stream(round_seed: u64, i: usize, j: usize) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&round_seed.to_le_bytes());
    key[8..16].copy_from_slice(&(i as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(j as u64).to_le_bytes());
    key[24..].copy_from_slice(b"pairmask");
    ChaCha20Rng::from_seed(key)
}

/// Encodes each update and applies pairwise masks: for `i < j` the stream
/// seeded by `(round_seed, i, j)` is added to client `i` and subtracted from
/// client `j`, modulo 2⁶⁴.
pub fn mask_updates(updates: &[UpdateVector], round_seed: u64, codec: &FixedPointCodec) -> Result<Vec<MaskedUpdate>> {
    let n = updates.len();
    if n == 0 {
        return Err(Error::Config("masking needs at least one client".into()));
    }
    let len = updates[0].len();
    if updates.iter().any(|u| u.len() != len) {
        return Err(Error::Protocol("client updates differ in length".into()));
    }
    let mut out: Vec<MaskedUpdate> = updates
        .iter()
        .enumerate()
        .map(|(client, u)| MaskedUpdate {
            client,
            words: u.0.iter().map(|&x| codec.encode(x)).collect(),
            check: 1,
        })
        .collect();
    for i in 0..n {
        for j in i + 1..n {
            let mut rng = pair_stream(round_seed, i, j);
            for w in 0..len {
                let m = rng.next_u64();
                out[i].words[w] = out[i].words[w].wrapping_add(m);
                out[j].words[w] = out[j].words[w].wrapping_sub(m);
            }
            let m = rng.next_u64();
            out[i].check = out[i].check.wrapping_add(m);
            out[j].check = out[j].check.wrapping_sub(m);
        }
    }
    Ok(out)
}

/// Modular sum of all masked words, decoded.
pub fn unmask_sum(masked: &[MaskedUpdate], codec: &FixedPointCodec) -> Result<Vec<f64>> {
    let first = masked
        .first()
        .ok_or_else(|| Error::Protocol("nothing to aggregate".into()))?;
    let len = first.words.len();
    if masked.iter().any(|m| m.words.len() != len) {
        return Err(Error::Protocol("masked updates differ in length".into()));
    }
    let check = masked.iter().fold(0u64, |acc, m| acc.wrapping_add(m.check));
    if check != masked.len() as u64 {
        return Err(Error::Protocol(format!(
            "checksum mismatch: masks did not cancel ({} updates received)",
            masked.len()
        )));
    }
    let mut sum = vec![0u64; len];
    for m in masked {
        for (s, w) in sum.iter_mut().zip(&m.words) {
            *s = s.wrapping_add(*w);
        }
    }
    Ok(sum.into_iter().map(|w| codec.decode(w)).collect())
}

/// Unmasks the sum and applies a uniform weight. Per-client weights cannot be
/// applied after masking; callers with non-uniform weights pre-scale the
/// updates and pass uniform ones here.
pub fn aggregate(masked: &[MaskedUpdate], weights: &[f64], codec: &FixedPointCodec) -> Result<Vec<f64>> {
    if weights.len() != masked.len() {
        return Err(Error::Protocol(format!(
            "{} weights for {} updates",
            weights.len(),
            masked.len()
        )));
    }
    let w = weights.first().copied().unwrap_or(1.0);
    if weights.iter().any(|&v| (v - w).abs() > 1e-12) {
        return Err(Error::Protocol(
            "non-uniform weights cannot be applied to a masked sum".into(),
        ));
    }
    Ok(unmask_sum(masked, codec)?.into_iter().map(|v| v * w).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub n_clients: usize,
    pub victim: usize,
    pub local_epochs: usize,
    pub lr: f64,
    /// 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    /// FedAVG weights; empty means uniform `1/n`.
    pub weights: Vec<f64>,
    pub secure_aggregation: bool,
    pub codec: FixedPointCodec,
    /// Clients train on at most this many samples of their pool (0 = all).
    pub max_client_samples: usize,
}

impl RoundConfig {
    pub fn new(n_clients: usize, victim: usize, local_epochs: usize, lr: f64, seed: u64) -> Self {
        RoundConfig {
            n_clients,
            victim,
            local_epochs,
            lr,
            batch_size: 0,
            seed,
            weights: Vec::new(),
            secure_aggregation: true,
            codec: FixedPointCodec::default(),
            max_client_samples: 0,
        }
    }

    pub fn resolved_weights(&self) -> Vec<f64> {
        if self.weights.is_empty() {
            vec![1.0 / self.n_clients as f64; self.n_clients]
        } else {
            self.weights.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::Config("n_clients must be positive".into()));
        }
        if self.victim >= self.n_clients {
            return Err(Error::Config(format!(
                "victim {} >= n_clients {}",
                self.victim, self.n_clients
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        let w = self.resolved_weights();
        if w.len() != self.n_clients || w.iter().any(|&a| a < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Config(
                "weights must be n non-negative values summing to 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client: usize,
    pub module: ModuleKind,
    pub samples: usize,
    pub train_seconds: f64,
}

/// Coordinator log of a round. Holds no plain updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub config: RoundConfig,
    pub clients: Vec<ClientRecord>,
    pub update_len: usize,
    pub round_seconds: f64,
}

/// Everything the server legitimately holds after a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackerView {
    pub aggregate: Vec<f64>,
    pub layout: BlockLayout,
    /// The linear-leakage module published to the victim.
    pub published: CraftedModule,
    pub lr: f64,
    pub local_epochs: usize,
}

/// Per-client published models, local training, masking and aggregation.
pub fn run_round<M: LocalModel>(
    config: &RoundConfig,
    split: &DatasetSplit<M::Sample>,
    victim_module: &CraftedModule,
    honest_module: &CraftedModule,
    base: &M,
) -> Result<(AttackerView, Transcript)> {
    config.validate()?;
    if split.pools.len() != config.n_clients || split.victim != config.victim {
        return Err(Error::Config("split does not match round configuration".into()));
    }
    if victim_module.kind != ModuleKind::LinearLeakage || honest_module.kind != ModuleKind::ZeroGradient {
        return Err(Error::Config(
            "victim needs linear leakage, others zero gradient".into(),
        ));
    }
    let started = Instant::now();
    let victim_model = graft(base, victim_module)?;
    let honest_model = graft(base, honest_module)?;
    let layout = victim_model.layout();
    let len = layout.total_len();

    let train = |client: usize| -> Result<(UpdateVector, ClientRecord)> {
        let t = Instant::now();
        let (model, kind) = if client == config.victim {
            (&victim_model, ModuleKind::LinearLeakage)
        } else {
            (&honest_model, ModuleKind::ZeroGradient)
        };
        let pool = &split.pools[client];
        let take = if config.max_client_samples == 0 {
            pool.len()
        } else {
            pool.len().min(config.max_client_samples)
        };
        let data = &pool[..take];
        let update = if data.is_empty() {
            UpdateVector::zeros(len)
        } else {
            local_train(
                model,
                data,
                config.local_epochs,
                config.batch_size,
                config.lr,
                config.seed.wrapping_add(client as u64),
            )?
        };
        Ok((
            update,
            ClientRecord {
                client,
                module: kind,
                samples: take,
                train_seconds: t.elapsed().as_secs_f64(),
            },
        ))
    };

    #[cfg(feature = "parallel")]
    let results: Vec<Result<(UpdateVector, ClientRecord)>> = {
        use rayon::prelude::*;
        (0..config.n_clients).into_par_iter().map(train).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<(UpdateVector, ClientRecord)>> = (0..config.n_clients).map(train).collect();

    let mut updates = Vec::with_capacity(config.n_clients);
    let mut clients = Vec::with_capacity(config.n_clients);
    for r in results {
        let (u, rec) = r?;
        updates.push(u);
        clients.push(rec);
    }

    let weights = config.resolved_weights();
    let uniform = weights.iter().all(|&w| (w - weights[0]).abs() <= 1e-12);
    if !uniform {
        for (u, &w) in updates.iter_mut().zip(&weights) {
            u.0.iter_mut().for_each(|v| *v *= w);
        }
    }
    let applied: Vec<f64> = if uniform {
        weights.clone()
    } else {
        vec![1.0; config.n_clients]
    };

    let aggregate_vec = if config.secure_aggregation {
        let masked = mask_updates(&updates, config.seed, &config.codec)?;
        drop(updates);
        aggregate(&masked, &applied, &config.codec)?
    } else {
        let mut sum = vec![0.0; len];
        for u in &updates {
            for (s, v) in sum.iter_mut().zip(&u.0) {
                *s += v;
            }
        }
        sum.into_iter().map(|v| v * applied[0]).collect()
    };

    Ok((
        AttackerView {
            aggregate: aggregate_vec,
            layout,
            published: victim_module.clone(),
            lr: config.lr,
            local_epochs: config.local_epochs,
        },
        Transcript {
            config: config.clone(),
            clients,
            update_len: len,
            round_seconds: started.elapsed().as_secs_f64(),
        },
    ))
}
