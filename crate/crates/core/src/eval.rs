//! Held-out metrics: top-K detection, masked-LM accuracy and P/R/F1,
//! character BLEU, pseudo-perplexity, and fast-path agreement.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corrector::{self, predicted_span, CorrectorConfig};
use crate::dataset::{self, PairRecord};
use crate::error::{Error, Result};
use crate::model::{argmax, ModelState, ScoreVector};
use crate::toy::{self, ErrorRecord};
use crate::train::choose_mask_positions;
use crate::vocab::{TokenId, TokenSeq, Vocab, MASK};

/// Widens a zero-width (pure deletion) span to the two neighbouring
/// positions so that it can be hit.
pub fn hittable_span(span: (usize, usize), k: usize) -> (usize, usize) {
    let (s, e) = span;
    if e > s {
        return (s, e.min(k));
    }
    (s.saturating_sub(1), (s + 1).min(k))
}

/// Whether any of the `topk` highest-scoring positions falls in `span`.
/// Ties rank the lower position first; `topk` is clamped to the length.
pub fn detection_hit(scores: &ScoreVector, span: (usize, usize), topk: usize) -> bool {
    let k = scores.len();
    let (s, e) = hittable_span(span, k);
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&a, &b| {
        scores.scores[b]
            .total_cmp(&scores.scores[a])
            .then(a.cmp(&b))
    });
    idx.iter()
        .take(topk.max(1).min(k))
        .any(|&i| i >= s && i < e)
}

/// Mean of [`detection_hit`] over a set.
pub fn detection_accuracy_topk(
    items: &[(ScoreVector, (usize, usize))],
    topk: usize,
) -> Result<f64> {
    if topk == 0 {
        return Err(Error::InvalidInput("K must be at least 1".into()));
    }
    if items.is_empty() {
        return Err(Error::Contract("no detection samples".into()));
    }
    let hits = items
        .iter()
        .filter(|(s, span)| detection_hit(s, *span, topk))
        .count();
    Ok(hits as f64 / items.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Averaging {
    Macro,
    Micro,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlmMetrics {
    pub acc: f64,
    pub prec: f64,
    pub rec: f64,
    pub f1: f64,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Accuracy plus precision/recall/F1 over the classes present in `targets`.
/// Macro F1 is the mean of per-class F1 scores.
pub fn mlm_metrics<T: Eq + Hash + Ord + Copy>(
    predictions: &[T],
    targets: &[T],
    avg: Averaging,
) -> Result<MlmMetrics> {
    if predictions.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Contract("no masked-LM samples".into()));
    }
    let n = targets.len() as f64;
    let correct = predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| p == t)
        .count() as f64;
    let acc = correct / n;
    // class -> (tp, predicted, actual)
    let mut counts: BTreeMap<T, (usize, usize, usize)> = BTreeMap::new();
    for &t in targets {
        counts.entry(t).or_default().2 += 1;
    }
    for (&p, &t) in predictions.iter().zip(targets) {
        if let Some(c) = counts.get_mut(&p) {
            c.1 += 1;
            if p == t {
                c.0 += 1;
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(match avg {
        Averaging::Macro => {
            let m = counts.len() as f64;
            let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
            for &(tp, pred, act) in counts.values() {
                let (pc, rc) = (ratio(tp, pred), ratio(tp, act));
                p += pc;
                r += rc;
                f += f1(pc, rc);
            }
            MlmMetrics {
                acc,
                prec: p / m,
                rec: r / m,
                f1: f / m,
            }
        }
        Averaging::Micro => {
            let tp: usize = counts.values().map(|c| c.0).sum();
            let pred: usize = counts.values().map(|c| c.1).sum();
            let act: usize = counts.values().map(|c| c.2).sum();
            let (p, r) = (ratio(tp, pred), ratio(tp, act));
            MlmMetrics {
                acc,
                prec: p,
                rec: r,
                f1: f1(p, r),
            }
        }
    })
}

fn ngram_counts<T: Eq + Hash + Copy>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram precisions for `n = 1..=max_n`, add-one smoothing from
/// `n = 2`, geometric mean times brevity penalty.
pub fn bleu<T: Eq + Hash + Copy>(candidate: &[T], reference: &[T], max_n: usize) -> f64 {
    if candidate.is_empty() || reference.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let c = ngram_counts(candidate, n);
        let r = ngram_counts(reference, n);
        let matched: usize = c
            .iter()
            .map(|(g, &cnt)| cnt.min(r.get(g).copied().unwrap_or(0)))
            .sum();
        let total = candidate.len().saturating_sub(n - 1);
        let p = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / max_n as f64).exp()
}

/// `exp` of the mean negative log-probability of each token when it alone
/// is masked.
pub fn model_perplexity(s: &TokenSeq, model: &ModelState) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::Contract("perplexity of an empty sentence".into()));
    }
    let vocab = model.vocab();
    let mut nll = 0.0;
    for (i, &id) in s.ids().iter().enumerate() {
        if !vocab.is_content(id) {
            return Err(Error::Contract(format!(
                "position {i} holds a special token"
            )));
        }
        let probs = model.mlm_probs(&s.with_token(i, MASK), &[i])?;
        nll -= probs[0][vocab.class_of(id)].max(f64::MIN_POSITIVE).ln();
    }
    Ok((nll / s.len() as f64).exp())
}

/// `ppl(input) / ppl(corrected)`; above 1 when the correction reads better.
pub fn ppl_ratio(input: &TokenSeq, corrected: &TokenSeq, model: &ModelState) -> Result<f64> {
    if input == corrected {
        return Ok(1.0);
    }
    Ok(model_perplexity(input, model)? / model_perplexity(corrected, model)?)
}

/// A held-out corrupted sentence with its clean source.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub corrupted: TokenSeq,
    pub clean: TokenSeq,
    pub span: (usize, usize),
}

impl EvalPair {
    pub fn from_record(r: &ErrorRecord) -> Self {
        EvalPair {
            corrupted: r.corrupted.clone(),
            clean: r.clean.clone(),
            span: (r.span_start, r.span_end),
        }
    }

    pub fn from_pair(r: &PairRecord, vocab: &Vocab) -> Result<Self> {
        Ok(EvalPair {
            corrupted: vocab.encode(&r.corrupted)?,
            clean: vocab.encode(&r.clean)?,
            span: (r.span_start, r.span_end),
        })
    }
}

/// Seed offset separating held-out data from the training stream.
pub const HELDOUT_SEED_OFFSET: u64 = 0x5eed_0001;

/// One corruption per sentence; sentences too short to corrupt are skipped.
pub fn make_pairs(clean: &[TokenSeq], vocab: &Vocab, seed: u64) -> Result<Vec<EvalPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(clean.len());
    for s in clean {
        match toy::inject_errors_with(s, vocab, &mut rng) {
            Ok(r) => out.push(EvalPair::from_record(&r)),
            Err(Error::TooShort { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// `n` toy sentences from the held-out stream of `seed`, none of which
/// occurs in `train`, each corrupted once.
pub fn heldout_pairs(
    seed: u64,
    n: usize,
    train: &[TokenSeq],
    vocab: &Vocab,
) -> Result<Vec<EvalPair>> {
    let seen: HashSet<&TokenSeq> = train.iter().collect();
    let base = seed.wrapping_add(HELDOUT_SEED_OFFSET);
    let mut clean = Vec::with_capacity(n);
    let mut round = 0u64;
    while clean.len() < n {
        let batch = toy::generate_corpus(base.wrapping_add(round << 32), n.max(64))?;
        clean.extend(batch.into_iter().filter(|s| !seen.contains(s)));
        clean.dedup();
        round += 1;
        if round > 64 {
            return Err(Error::InvalidInput(
                "could not draw enough held-out sentences outside the training corpus".into(),
            ));
        }
    }
    clean.truncate(n);
    make_pairs(&clean, vocab, base)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub topk: usize,
    pub corrector: CorrectorConfig,
    pub averaging: Averaging,
    pub mask_ratio: f64,
    pub seed: u64,
    /// Pairs used for the correction metrics (all when `None`).
    pub correct_limit: Option<usize>,
    pub detection: bool,
    pub mlm: bool,
    pub restoration: bool,
    pub fast_path: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            topk: 4,
            corrector: CorrectorConfig::default(),
            averaging: Averaging::Macro,
            mask_ratio: 0.15,
            seed: 0,
            correct_limit: None,
            detection: true,
            mlm: true,
            restoration: true,
            fast_path: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FastPathReport {
    /// Share of sentences where fast and full search return the same output.
    pub agreement: f64,
    pub passes_full: f64,
    pub passes_fast: f64,
    pub encoder_passes_full: f64,
    pub encoder_passes_fast: f64,
    /// Share of predicted spans intersecting the true span.
    pub span_overlap: f64,
    /// Same, with predicted spans shuffled across sentences.
    pub span_overlap_shuffled: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub n_samples: usize,
    pub topk: usize,
    pub slm_topk_acc: Option<f64>,
    pub mlm: Option<MlmMetrics>,
    pub bleu_corrected: Option<f64>,
    pub bleu_uncorrected: Option<f64>,
    pub ppl_ratio: Option<f64>,
    pub fast: Option<FastPathReport>,
    pub config: Vec<(String, String)>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn spans_meet(a: (usize, usize), b: (usize, usize), k: usize) -> bool {
    let a = hittable_span(a, k);
    let b = hittable_span(b, k);
    a.0.max(b.0) < a.1.min(b.1)
}

pub fn eval_detection(model: &ModelState, pairs: &[EvalPair], topk: usize) -> Result<f64> {
    let items = pairs
        .iter()
        .map(|p| Ok((model.score_tokens(&p.corrupted)?, p.span)))
        .collect::<Result<Vec<_>>>()?;
    detection_accuracy_topk(&items, topk)
}

/// Masks `mask_ratio` of each clean sentence and predicts every mask.
pub fn eval_mlm(
    model: &ModelState,
    clean: &[TokenSeq],
    mask_ratio: f64,
    seed: u64,
    avg: Averaging,
) -> Result<MlmMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut preds, mut targets): (Vec<TokenId>, Vec<TokenId>) = (Vec::new(), Vec::new());
    for s in clean {
        let at = choose_mask_positions(s.len(), mask_ratio, &mut rng);
        if at.is_empty() {
            continue;
        }
        let mut masked = s.clone();
        for &p in &at {
            masked = masked.with_token(p, MASK);
        }
        let probs = model.mlm_probs(&masked, &at)?;
        for (&p, pr) in at.iter().zip(&probs) {
            preds.push(model.vocab().id_of_class(argmax(pr)));
            targets.push(s.ids()[p]);
        }
    }
    mlm_metrics(&preds, &targets, avg)
}

pub struct Restoration {
    pub bleu_corrected: f64,
    pub bleu_uncorrected: f64,
    pub ppl_ratio: f64,
    pub outputs: Vec<TokenSeq>,
}

pub fn eval_restoration(
    model: &ModelState,
    pairs: &[EvalPair],
    cfg: &CorrectorConfig,
) -> Result<Restoration> {
    let mut bc = Vec::with_capacity(pairs.len());
    let mut bu = Vec::with_capacity(pairs.len());
    let mut pr = Vec::with_capacity(pairs.len());
    let mut outputs = Vec::with_capacity(pairs.len());
    for p in pairs {
        let out = corrector::correct(&p.corrupted, model, cfg)?;
        bc.push(bleu(out.ids(), p.clean.ids(), 4));
        bu.push(bleu(p.corrupted.ids(), p.clean.ids(), 4));
        pr.push(ppl_ratio(&p.corrupted, &out, model)?);
        outputs.push(out);
    }
    Ok(Restoration {
        bleu_corrected: mean(&bc),
        bleu_uncorrected: mean(&bu),
        ppl_ratio: mean(&pr),
        outputs,
    })
}

/// Compares the policy-guided path with full search.
pub fn eval_fast_path(
    model: &ModelState,
    pairs: &[EvalPair],
    cfg: &CorrectorConfig,
) -> Result<FastPathReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("no fast-path samples".into()));
    }
    let n = pairs.len() as f64;
    let mut r = FastPathReport::default();
    let mut agree = 0usize;
    let mut predicted = Vec::with_capacity(pairs.len());
    for p in pairs {
        let full = corrector::correct_explained(&p.corrupted, model, cfg)?;
        let fast = corrector::correct_fast_explained(&p.corrupted, model, cfg)?;
        agree += usize::from(full.output == fast.output);
        r.passes_full += full.stats.forward_passes() as f64 / n;
        r.passes_fast += fast.stats.forward_passes() as f64 / n;
        r.encoder_passes_full += full.stats.encoder_passes as f64 / n;
        r.encoder_passes_fast += fast.stats.encoder_passes as f64 / n;
        let policy = model.policy_spans(&p.corrupted)?;
        predicted.push(predicted_span(&policy, p.corrupted.len())?);
    }
    r.agreement = agree as f64 / n;
    let hits = |shift: usize| {
        pairs
            .iter()
            .enumerate()
            .filter(|(i, p)| {
                let k = p.corrupted.len();
                let (s, e) = predicted[(i + shift) % pairs.len()];
                let s = s.min(k.saturating_sub(1));
                spans_meet((s, e.min(k).max(s + 1)), p.span, k)
            })
            .count() as f64
            / n
    };
    r.span_overlap = hits(0);
    r.span_overlap_shuffled = if pairs.len() > 1 { hits(1) } else { 0.0 };
    Ok(r)
}

/// Runs the enabled metric groups over one held-out pair set.
pub fn evaluate(model: &ModelState, pairs: &[EvalPair], cfg: &EvalConfig) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let mut rep = EvalReport {
        n_samples: pairs.len(),
        topk: cfg.topk,
        ..EvalReport::default()
    };
    if cfg.detection {
        rep.slm_topk_acc = Some(eval_detection(model, pairs, cfg.topk)?);
    }
    if cfg.mlm {
        let clean: Vec<TokenSeq> = pairs.iter().map(|p| p.clean.clone()).collect();
        rep.mlm = Some(eval_mlm(
            model,
            &clean,
            cfg.mask_ratio,
            cfg.seed,
            cfg.averaging,
        )?);
    }
    let limited = &pairs[..cfg.correct_limit.unwrap_or(pairs.len()).min(pairs.len())];
    if cfg.restoration {
        let r = eval_restoration(model, limited, &cfg.corrector)?;
        rep.bleu_corrected = Some(r.bleu_corrected);
        rep.bleu_uncorrected = Some(r.bleu_uncorrected);
        rep.ppl_ratio = Some(r.ppl_ratio);
    }
    if cfg.fast_path {
        rep.fast = Some(eval_fast_path(model, limited, &cfg.corrector)?);
    }
    Ok(rep)
}

impl EvalReport {
    /// `(name, value)` pairs of every computed metric.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut m = vec![
            ("n_samples".to_string(), self.n_samples as f64),
            ("topk".to_string(), self.topk as f64),
        ];
        let mut put = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                m.push((k.to_string(), v));
            }
        };
        put("slm_topk_acc", self.slm_topk_acc);
        put("mlm_acc", self.mlm.map(|x| x.acc));
        put("mlm_prec", self.mlm.map(|x| x.prec));
        put("mlm_rec", self.mlm.map(|x| x.rec));
        put("mlm_f1", self.mlm.map(|x| x.f1));
        put("bleu_corrected", self.bleu_corrected);
        put("bleu_uncorrected", self.bleu_uncorrected);
        put("ppl_ratio", self.ppl_ratio);
        if let Some(f) = &self.fast {
            put("fast_agreement", Some(f.agreement));
            put("fast_passes", Some(f.passes_fast));
            put("full_passes", Some(f.passes_full));
            put("fast_encoder_passes", Some(f.encoder_passes_fast));
            put("full_encoder_passes", Some(f.encoder_passes_full));
            put("span_overlap", Some(f.span_overlap));
            put("span_overlap_shuffled", Some(f.span_overlap_shuffled));
        }
        m
    }

    /// `key=value` lines, config echo first.
    pub fn to_kv(&self) -> Vec<String> {
        self.config
            .iter()
            .map(|(k, v)| format!("config.{k}={v}"))
            .chain(
                self.metrics()
                    .into_iter()
                    .map(|(k, v)| format!("{k}={v:.6}")),
            )
            .collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>10}", "metric", "value");
        for (k, v) in self.metrics() {
            let _ = writeln!(s, "{k:<24} {v:>10.4}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let lines = self.to_kv();
        dataset::write_lines(path, &[], lines)
    }

    /// Reads back the metric lines written by [`EvalReport::write`].
    pub fn read_metrics(path: &Path) -> Result<Vec<(String, f64)>> {
        dataset::read_lines(path)?
            .iter()
            .filter(|l| !l.starts_with("config."))
            .map(|l| {
                let (k, v) = l
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidInput(format!("bad metric line {l:?}")))?;
                let v = v
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad metric value {v:?}")))?;
                Ok((k.to_string(), v))
            })
            .collect()
    }
}
