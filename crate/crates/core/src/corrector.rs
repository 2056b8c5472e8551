//! Scoring-guided mask-and-refill correction search, and its policy-guided
//! fast path.

use std::cell::Cell;
use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{argmax, ModelState, PolicyOutput, ScoreVector};
use crate::tensor::soft_argmax;
use crate::vocab::{TokenSeq, MASK};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorrectorConfig {
    pub width: usize,
    pub depth: usize,
    /// Keep the unedited input as a candidate.
    pub include_identity: bool,
}

impl Default for CorrectorConfig {
    fn default() -> Self {
        CorrectorConfig {
            width: 2,
            depth: 4,
            include_identity: true,
        }
    }
}

/// What the search needs from a model. [`ModelState`] is the real
/// implementation; tests substitute mocks.
pub trait CorrectionModel {
    fn score(&self, s: &TokenSeq) -> Result<ScoreVector>;
    /// Replaces every mask in one pass.
    fn fill(&self, s: &TokenSeq) -> Result<TokenSeq>;
    fn score_and_policy(&self, s: &TokenSeq) -> Result<(ScoreVector, PolicyOutput)>;
    /// Longest sentence the model accepts.
    fn max_tokens(&self) -> usize;
}

impl CorrectionModel for ModelState {
    fn score(&self, s: &TokenSeq) -> Result<ScoreVector> {
        self.score_tokens(s)
    }
    fn fill(&self, s: &TokenSeq) -> Result<TokenSeq> {
        self.fill_masks(s)
    }
    fn score_and_policy(&self, s: &TokenSeq) -> Result<(ScoreVector, PolicyOutput)> {
        ModelState::score_and_policy(self, s)
    }
    fn max_tokens(&self) -> usize {
        self.config().max_len - 2
    }
}

/// Replace `[p_s, p_e)` by `num` masks, refill, rescore.
/// The identity candidate is `(0, 0, 0)` with `identity == true`.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateEdit {
    pub p_s: usize,
    pub p_e: usize,
    pub num: usize,
    pub identity: bool,
    pub filled: TokenSeq,
    /// Mean wrongness over `filled`; `+inf` when the candidate cannot be scored.
    pub norm_score: f64,
}

impl CandidateEdit {
    /// Tokens removed plus tokens inserted; zero for the identity.
    pub fn edit_size(&self) -> usize {
        if self.identity {
            0
        } else {
            self.p_e - self.p_s + self.num
        }
    }
}

/// Selection order: lower score, fewer edits, then lower `p_s`, `num`, `p_e`.
pub fn candidate_order(a: &CandidateEdit, b: &CandidateEdit) -> Ordering {
    a.norm_score
        .total_cmp(&b.norm_score)
        .then(a.edit_size().cmp(&b.edit_size()))
        .then(a.p_s.cmp(&b.p_s))
        .then(a.num.cmp(&b.num))
        .then(a.p_e.cmp(&b.p_e))
}

/// Model work done by one correction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SearchStats {
    /// Initial scoring pass (plus policy head on the fast path).
    pub detection_passes: usize,
    /// Candidates evaluated, identity included.
    pub candidate_evals: usize,
    /// Encoder invocations, fills and rescores counted separately.
    pub encoder_passes: usize,
}

impl SearchStats {
    /// Detection pass plus one per candidate.
    pub fn forward_passes(&self) -> usize {
        self.detection_passes + self.candidate_evals
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correction {
    pub output: TokenSeq,
    /// Position the search centred on.
    pub peak: usize,
    pub scores: ScoreVector,
    pub chosen: CandidateEdit,
    pub candidates: Vec<CandidateEdit>,
    pub stats: SearchStats,
}

/// Index of the highest score; ties go to the lowest index.
pub fn detect_peak(scores: &ScoreVector) -> usize {
    argmax(&scores.scores)
}

/// `(p_s, p_e, num)` triples around `p_m` for a sentence of length `k`,
/// ordered by `p_s`, `p_e`, then `num`. The identity is not included.
pub fn enumerate_candidates(
    k: usize,
    p_m: usize,
    cfg: &CorrectorConfig,
) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    if p_m >= k {
        return out;
    }
    let s_lo = p_m.saturating_sub(cfg.width);
    let e_hi = (p_m + 1 + cfg.width).min(k);
    for p_s in s_lo..=p_m {
        for p_e in (p_m + 1)..=e_hi {
            for num in 0..=cfg.depth {
                out.push((p_s, p_e, num));
            }
        }
    }
    out
}

/// Refills every mask of `s`; returns `s` itself when it holds none.
pub fn fill_masks<M: CorrectionModel + ?Sized>(s: &TokenSeq, model: &M) -> Result<TokenSeq> {
    if s.mask_positions().is_empty() {
        return Ok(s.clone());
    }
    model.fill(s)
}

struct Evaluator<'a, M: ?Sized> {
    model: &'a M,
    encoder_passes: Cell<usize>,
    evals: Cell<usize>,
}

impl<'a, M: CorrectionModel + ?Sized> Evaluator<'a, M> {
    fn new(model: &'a M) -> Self {
        Evaluator {
            model,
            encoder_passes: Cell::new(0),
            evals: Cell::new(0),
        }
    }

    fn bump(c: &Cell<usize>) {
        c.set(c.get() + 1);
    }

    fn identity(&self, s: &TokenSeq, scores: &ScoreVector) -> CandidateEdit {
        Self::bump(&self.evals);
        CandidateEdit {
            p_s: 0,
            p_e: 0,
            num: 0,
            identity: true,
            filled: s.clone(),
            norm_score: scores.mean(),
        }
    }

    fn edit(&self, s: &TokenSeq, p_s: usize, p_e: usize, num: usize) -> Result<CandidateEdit> {
        Self::bump(&self.evals);
        let masked = s.splice(p_s, p_e, &vec![MASK; num]);
        let mut cand = CandidateEdit {
            p_s,
            p_e,
            num,
            identity: false,
            filled: masked.clone(),
            norm_score: f64::INFINITY,
        };
        if masked.is_empty() || masked.len() > self.model.max_tokens() {
            return Ok(cand);
        }
        if num > 0 {
            Self::bump(&self.encoder_passes);
            cand.filled = self.model.fill(&masked)?;
        }
        Self::bump(&self.encoder_passes);
        cand.norm_score = self.model.score(&cand.filled)?.mean();
        Ok(cand)
    }

    fn finish(
        &self,
        s: &TokenSeq,
        peak: usize,
        scores: ScoreVector,
        candidates: Vec<CandidateEdit>,
    ) -> Result<Correction> {
        let chosen = candidates
            .iter()
            .min_by(|a, b| candidate_order(a, b))
            .cloned()
            .ok_or_else(|| Error::InvalidInput("no correction candidates".into()))?;
        let output = if chosen.norm_score.is_finite() {
            chosen.filled.clone()
        } else {
            s.clone()
        };
        Ok(Correction {
            output,
            peak,
            scores,
            chosen,
            candidates,
            stats: SearchStats {
                detection_passes: 1,
                candidate_evals: self.evals.get(),
                encoder_passes: self.encoder_passes.get() + 1,
            },
        })
    }
}

fn check_input<M: CorrectionModel + ?Sized>(s: &TokenSeq, model: &M) -> Result<()> {
    if s.is_empty() {
        return Err(Error::TooShort { len: 0, min: 1 });
    }
    if s.len() > model.max_tokens() {
        return Err(Error::TooLong {
            len: s.len(),
            max: model.max_tokens(),
        });
    }
    Ok(())
}

/// Full search: score, centre on the peak, try every candidate, keep the
/// lowest mean wrongness.
pub fn correct_explained<M: CorrectionModel + ?Sized>(
    s: &TokenSeq,
    model: &M,
    cfg: &CorrectorConfig,
) -> Result<Correction> {
    check_input(s, model)?;
    let ev = Evaluator::new(model);
    let scores = model.score(s)?;
    let peak = detect_peak(&scores);
    let mut cands = Vec::new();
    if cfg.include_identity {
        cands.push(ev.identity(s, &scores));
    }
    for (p_s, p_e, num) in enumerate_candidates(s.len(), peak, cfg) {
        cands.push(ev.edit(s, p_s, p_e, num)?);
    }
    ev.finish(s, peak, scores, cands)
}

pub fn correct<M: CorrectionModel + ?Sized>(
    s: &TokenSeq,
    model: &M,
    cfg: &CorrectorConfig,
) -> Result<TokenSeq> {
    Ok(correct_explained(s, model, cfg)?.output)
}

/// Rounds soft-argmax start/end slots to a half-open span with at least one
/// position inside `[0, k]`.
pub fn predicted_span(policy: &PolicyOutput, k: usize) -> Result<(usize, usize)> {
    let round = |v: f64| ((v + 0.5).floor().max(0.0) as usize).min(k);
    let mut s = round(soft_argmax(&policy.x_s)?);
    let mut e = round(soft_argmax(&policy.x_e)?);
    if e < s {
        log::debug!("policy span [{s}, {e}) reversed; swapping");
        std::mem::swap(&mut s, &mut e);
    }
    if e == s {
        log::debug!("policy span at {s} is empty; widening");
        if e < k {
            e += 1;
        } else {
            s = k.saturating_sub(1);
        }
    }
    Ok((s, e))
}

/// Fast path: the policy head proposes the span, only `num` varies.
pub fn correct_fast_explained<M: CorrectionModel + ?Sized>(
    s: &TokenSeq,
    model: &M,
    cfg: &CorrectorConfig,
) -> Result<Correction> {
    check_input(s, model)?;
    let ev = Evaluator::new(model);
    let (scores, policy) = model.score_and_policy(s)?;
    let (p_s, p_e) = predicted_span(&policy, s.len())?;
    let mut cands = Vec::new();
    if cfg.include_identity {
        cands.push(ev.identity(s, &scores));
    }
    for num in 0..=cfg.depth {
        cands.push(ev.edit(s, p_s, p_e, num)?);
    }
    ev.finish(s, p_s, scores, cands)
}

pub fn correct_fast<M: CorrectionModel + ?Sized>(
    s: &TokenSeq,
    model: &M,
    cfg: &CorrectorConfig,
) -> Result<TokenSeq> {
    Ok(correct_fast_explained(s, model, cfg)?.output)
}
