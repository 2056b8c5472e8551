//! Adversarial data generation and the interlaced weights.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{CandidateDistribution, ModelState, ScoreVector};
use crate::tensor::sigmoid;
use crate::vocab::{TokenId, TokenSeq, Vocab, MASK};

use super::TrainConfig;

/// Confidence floor applied to `d[rank]` and `score_o[i]`.
pub const CONF_FLOOR: f64 = 1e-9;

/// Maps a uniform draw `u ∈ [0, 1]` to `floor(e^{u·ln Ct})` clamped to `[1, Ct]`.
pub fn rank_from_uniform(u: f64, ct: f64) -> usize {
    let x = (u * ct.ln()).exp();
    // exp(ln Ct) can land a hair under Ct
    let r = (x + 1e-9).floor();
    r.clamp(1.0, ct.floor()) as usize
}

/// Log-uniform candidate rank over `[1, Ct]`.
pub fn sample_candidate_rank(rng: &mut impl Rng, ct: f64) -> usize {
    rank_from_uniform(rng.random::<f64>(), ct)
}

/// `s = (d0 − d_rank)/d_rank − S_g`; `sigmoid(s) + 0.5` when `s ≥ 0`, else `tanh(s)`.
pub fn interlaced_weight_g(d: &CandidateDistribution, rank: usize, s_g: f64) -> Result<f64> {
    let d0 =
        *d.d.first()
            .ok_or_else(|| Error::InvalidInput("empty candidate distribution".into()))?;
    let dr = *d.d.get(rank).ok_or_else(|| {
        Error::InvalidInput(format!("rank {rank} beyond {} candidates", d.d.len()))
    })?;
    weight_g_from(d0, dr, rank, s_g)
}

pub(crate) fn weight_g_from(d0: f64, dr: f64, rank: usize, s_g: f64) -> Result<f64> {
    if dr.is_nan() || dr <= 0.0 {
        return Err(Error::DegenerateConfidence(rank));
    }
    let dr = dr.max(CONF_FLOOR);
    let s = (d0 - dr) / dr - s_g;
    Ok(if s >= 0.0 { sigmoid(s) + 0.5 } else { s.tanh() })
}

/// `score_g[i] / score_o[i]`.
pub fn interlaced_weight_d(score_g: &ScoreVector, score_o: &ScoreVector, i: usize) -> Result<f64> {
    if score_g.len() != score_o.len() {
        return Err(Error::Contract(format!(
            "score vectors of length {} and {} are not aligned",
            score_g.len(),
            score_o.len()
        )));
    }
    if i >= score_g.len() {
        return Err(Error::Contract(format!(
            "position {i} out of {}",
            score_g.len()
        )));
    }
    Ok(score_g.scores[i] / score_o.scores[i].max(CONF_FLOOR))
}

/// One sentence after masking and generator replacement.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialSample {
    pub original: TokenSeq,
    pub masked: TokenSeq,
    pub generated: TokenSeq,
    /// Masked positions, ascending.
    pub masked_at: Vec<usize>,
    /// Positions holding a generated token that differs from the original.
    pub r: Vec<usize>,
    /// All other positions.
    pub c: Vec<usize>,
    /// 1.0 = wrong, per position.
    pub labels: Vec<f64>,
    /// Sampled rank per masked position (aligned with `masked_at`).
    pub ranks: Vec<usize>,
    /// Discriminator weights per position; 1 outside `r`.
    pub w_g: Vec<f64>,
}

impl AdversarialSample {
    pub fn original_ids_at_r(&self) -> Vec<TokenId> {
        self.r.iter().map(|&i| self.original.ids()[i]).collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdversarialBatch {
    pub samples: Vec<AdversarialSample>,
    pub skipped: usize,
}

/// Chooses `max(1, round(ratio·k))` distinct positions.
pub fn choose_mask_positions(k: usize, ratio: f64, rng: &mut impl Rng) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let n = ((ratio * k as f64).round() as usize).clamp(1, k);
    let mut at = sample(rng, k, n).into_vec();
    at.sort_unstable();
    at
}

fn mask(seq: &TokenSeq, at: &[usize]) -> TokenSeq {
    let mut ids = seq.ids().to_vec();
    for &p in at {
        ids[p] = MASK;
    }
    TokenSeq::new(ids)
}

fn split_positions(k: usize, changed: &[usize]) -> Vec<usize> {
    (0..k).filter(|i| !changed.contains(i)).collect()
}

/// Masks each sentence, asks the generator for ranked candidates and fills
/// every masked slot with the candidate at a sampled rank (rank 0, the
/// generator's top guess, is never drawn). Ranks below `pos_threshold` are
/// labeled correct, the rest wrong.
pub fn build_adversarial_batch(
    sentences: &[TokenSeq],
    model: &ModelState,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdversarialBatch> {
    let mut batch = AdversarialBatch::default();
    for s in sentences {
        let k = s.len();
        if k == 0 {
            batch.skipped += 1;
            continue;
        }
        let masked_at = choose_mask_positions(k, cfg.mask_ratio, rng);
        let masked = mask(s, &masked_at);
        let dists = model.mlm_distributions(&masked)?;
        let mut gen = s.ids().to_vec();
        let mut ranks = Vec::with_capacity(masked_at.len());
        let mut labels = vec![0.0; k];
        let mut w_g = vec![1.0; k];
        let mut r = Vec::new();
        for (&pos, d) in masked_at.iter().zip(&dists) {
            let rank = sample_candidate_rank(rng, cfg.ct).min(d.ranked_ids.len() - 1);
            ranks.push(rank);
            let tok = d.ranked_ids[rank];
            gen[pos] = tok;
            if tok == s.ids()[pos] {
                continue;
            }
            r.push(pos);
            if rank >= cfg.pos_threshold {
                labels[pos] = 1.0;
            }
            let w = match interlaced_weight_g(d, rank, cfg.s_g) {
                Ok(w) => w,
                Err(Error::DegenerateConfidence(_)) => {
                    weight_g_from(d.d[0], CONF_FLOOR, rank, cfg.s_g)?
                }
                Err(e) => return Err(e),
            };
            w_g[pos] = if cfg.clamp_wg_nonneg { w.max(0.0) } else { w };
        }
        let c = split_positions(k, &r);
        batch.samples.push(AdversarialSample {
            original: s.clone(),
            masked,
            generated: TokenSeq::new(gen),
            masked_at,
            r,
            c,
            labels,
            ranks,
            w_g,
        });
    }
    if batch.skipped > 0 {
        log::warn!(
            "skipped {} sentences with no maskable position",
            batch.skipped
        );
    }
    Ok(batch)
}

/// Same masking, but replacements are uniform random content tokens that
/// differ from the original; every replaced position is labeled wrong.
pub fn build_random_batch(
    sentences: &[TokenSeq],
    vocab: &Vocab,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> AdversarialBatch {
    let content: Vec<TokenId> = vocab.content_ids().collect();
    let mut batch = AdversarialBatch::default();
    for s in sentences {
        let k = s.len();
        if k == 0 {
            batch.skipped += 1;
            continue;
        }
        let masked_at = choose_mask_positions(k, cfg.mask_ratio, rng);
        let masked = mask(s, &masked_at);
        let mut gen = s.ids().to_vec();
        let mut labels = vec![0.0; k];
        for &p in &masked_at {
            let tok = loop {
                let t = content[rng.random_range(0..content.len())];
                if t != s.ids()[p] {
                    break t;
                }
            };
            gen[p] = tok;
            labels[p] = 1.0;
        }
        let r = masked_at.clone();
        let c = split_positions(k, &r);
        batch.samples.push(AdversarialSample {
            original: s.clone(),
            masked,
            generated: TokenSeq::new(gen),
            ranks: vec![0; masked_at.len()],
            masked_at,
            r,
            c,
            labels,
            w_g: vec![1.0; k],
        });
    }
    batch
}
