//! Span supervision distilled from the correction search, and training of
//! the policy head that predicts it.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corrector::{correct, CorrectorConfig};
use crate::dataset;
use crate::error::{Error, Result};
use crate::model::{Ctx, Encoded, Group, Groups, ModelState};
use crate::optim::{AdamW, LrSchedule};
use crate::tensor::{Graph, Var};
use crate::toy;
use crate::vocab::{TokenSeq, Vocab};

/// Start range `[s_l, s_h]`, end range `[e_l, e_h]` and the weight `mu`
/// between the low and high bound of each.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpanBounds {
    pub s_l: f64,
    pub s_h: f64,
    pub e_l: f64,
    pub e_h: f64,
    pub mu: f64,
}

impl SpanBounds {
    /// Both ranges collapsed onto one span, `mu = 1`.
    pub fn exact(start: usize, end: usize) -> Self {
        let (s, e) = (start as f64, end as f64);
        SpanBounds {
            s_l: s,
            s_h: s,
            e_l: e,
            e_h: e,
            mu: 1.0,
        }
    }
}

/// Half-open window of `a` outside the longest common prefix and suffix of
/// `a` and `b`.
pub fn diff_span(a: &TokenSeq, b: &TokenSeq) -> Result<(usize, usize)> {
    if a == b {
        return Err(Error::NoDiff);
    }
    let (a, b) = (a.ids(), b.ids());
    let m = a.len().min(b.len());
    let p = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let q = a
        .iter()
        .rev()
        .zip(b.iter().rev())
        .take(m - p)
        .take_while(|(x, y)| x == y)
        .count();
    Ok((p, a.len() - q))
}

/// Min/max of the two starts and the two ends. `strict` takes the end
/// range's lower bound from the second pair's start instead of its end.
pub fn range_bounds(
    is_wo: usize,
    ie_wo: usize,
    is_wcw: usize,
    ie_wcw: usize,
    strict: bool,
) -> SpanBounds {
    let e_low_other = if strict { is_wcw } else { ie_wcw };
    SpanBounds {
        s_l: is_wo.min(is_wcw) as f64,
        s_h: is_wo.max(is_wcw) as f64,
        e_l: ie_wo.min(e_low_other) as f64,
        e_h: ie_wo.max(ie_wcw) as f64,
        mu: 1.0,
    }
}

/// `|a ∩ b|² / (|a|·|b|)` for half-open spans; 1 when both are empty.
pub fn overlap_coeff(a: (usize, usize), b: (usize, usize)) -> f64 {
    let la = a.1.saturating_sub(a.0);
    let lb = b.1.saturating_sub(b.0);
    if la == 0 && lb == 0 {
        log::debug!("overlap of two empty spans taken as 1");
        return 1.0;
    }
    if la == 0 || lb == 0 {
        return 0.0;
    }
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    (inter * inter) as f64 / (la * lb) as f64
}

/// `μ·(p − lo)²·e^{lo − p} + (1 − μ)·(p − hi)²·e^{p − hi}`.
fn range_term(g: &mut Graph, p: Var, lo: f64, hi: f64, mu: f64) -> Result<Var> {
    let dl = g.add_scalar(p, -lo);
    let sl = g.square(dl);
    let nl = g.scale(dl, -1.0);
    let el = g.exp(nl);
    let a = g.mul(sl, el)?;
    let a = g.scale(a, mu);
    let dh = g.add_scalar(p, -hi);
    let sh = g.square(dh);
    let eh = g.exp(dh);
    let b = g.mul(sh, eh)?;
    let b = g.scale(b, 1.0 - mu);
    g.add(a, b)
}

/// Average of the start and end range losses on soft-argmax positions.
pub fn policy_loss(g: &mut Graph, x_s: Var, x_e: Var, b: &SpanBounds) -> Result<Var> {
    let ps = g.soft_argmax(x_s)?;
    let pe = g.soft_argmax(x_e)?;
    let ls = range_term(g, ps, b.s_l, b.s_h, b.mu)?;
    let le = range_term(g, pe, b.e_l, b.e_h, b.mu)?;
    let l = g.add(ls, le)?;
    Ok(g.scale(l, 0.5))
}

/// Where the policy's targets come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyTarget {
    /// Bounds between the true span and the search's edit.
    Distill,
    /// The injected span only.
    GroundTruth,
}

impl std::str::FromStr for PolicyTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distill" => Ok(PolicyTarget::Distill),
            "ground-truth" | "gt" => Ok(PolicyTarget::GroundTruth),
            _ => Err(Error::Config(format!(
                "unknown policy target {s:?} (expected distill or ground-truth)"
            ))),
        }
    }
}

impl std::fmt::Display for PolicyTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
        f.write_str(match self {
            PolicyTarget::Distill => "distill",
            PolicyTarget::GroundTruth => "ground-truth",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub target: PolicyTarget,
    pub strict_end_bounds: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            epochs: 10,
            batch: 16,
            lr: 1e-2,
            weight_decay: 0.01,
            seed: 0,
            target: PolicyTarget::Distill,
            strict_end_bounds: false,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config(
                "policy epochs and batch must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("policy lr must be positive".into()));
        }
        Ok(())
    }
}

/// One cached training target.
#[derive(Clone, Debug, PartialEq)]
pub struct Supervision {
    pub wrong: TokenSeq,
    pub bounds: SpanBounds,
}

/// Bounds for one corrupted sentence, or `None` when the target span is
/// undefined (the search left the sentence unchanged).
pub fn supervise_one(
    wrong: &TokenSeq,
    original: &TokenSeq,
    corrected: Option<&TokenSeq>,
    strict: bool,
) -> Result<Option<SpanBounds>> {
    let wo = diff_span(wrong, original)?;
    let Some(corrected) = corrected else {
        return Ok(Some(SpanBounds::exact(wo.0, wo.1)));
    };
    let wcw = match diff_span(wrong, corrected) {
        Ok(s) => s,
        Err(Error::NoDiff) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut b = range_bounds(wo.0, wo.1, wcw.0, wcw.1, strict);
    b.mu = overlap_coeff(wo, wcw);
    Ok(Some(b))
}

/// Corrupts each clean sentence once and derives its span target.
pub fn build_supervision(
    clean: &[TokenSeq],
    model: &ModelState,
    corr: &CorrectorConfig,
    cfg: &PolicyConfig,
) -> Result<(Vec<Supervision>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(11);
    let mut out = Vec::with_capacity(clean.len());
    let mut skipped = 0;
    for s in clean {
        let rec = match toy::inject_errors_with(s, model.vocab(), &mut rng) {
            Ok(r) => r,
            Err(Error::TooShort { .. }) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let fixed = match cfg.target {
            PolicyTarget::Distill => Some(correct(&rec.corrupted, model, corr)?),
            PolicyTarget::GroundTruth => None,
        };
        match supervise_one(
            &rec.corrupted,
            &rec.clean,
            fixed.as_ref(),
            cfg.strict_end_bounds,
        )? {
            Some(bounds) => out.push(Supervision {
                wrong: rec.corrupted,
                bounds,
            }),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::info!("policy supervision: {skipped} samples skipped");
    }
    Ok((out, skipped))
}

/// Trains the policy head on `data`; every other parameter is left as is.
/// Returns the mean loss of each epoch.
pub fn fit_policy(
    model: &mut ModelState,
    data: &[Supervision],
    cfg: &PolicyConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    // The encoder is frozen, so its output is computed once per sample.
    let hidden = data
        .iter()
        .map(|d| model.encode_full(&d.wrong))
        .collect::<Result<Vec<_>>>()?;
    let ids = model.param_ids(Group::Policy);
    let mut opt = AdamW::new(model.params(), cfg.weight_decay);
    let total = data.len().div_ceil(cfg.batch) * cfg.epochs;
    let sched = LrSchedule {
        peak: cfg.lr,
        warmup: (total as f64 * 0.05).ceil() as usize,
        total,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(12);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let trainable = Groups {
        policy: true,
        ..Groups::NONE
    };
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            model.params_mut().zero_grad();
            for &i in chunk {
                let mut g = Graph::new();
                let full = g.constant(hidden[i].clone());
                let mut cx = Ctx::new(&mut g, trainable);
                let enc = Encoded {
                    full,
                    len: data[i].wrong.len(),
                };
                let (xs, xe) = model.policy_logits_in(&mut cx, enc, Some(&mut rng))?;
                let l = policy_loss(cx.g, xs, xe, &data[i].bounds)?;
                let v = cx.g.value(l).item();
                if !v.is_finite() {
                    return Err(Error::Divergence {
                        step,
                        detail: format!("policy loss {v} at epoch {epoch}"),
                    });
                }
                sum += v;
                let l = cx.g.scale(l, 1.0 / chunk.len() as f64);
                g.backward(l, model.params_mut())?;
            }
            opt.step(model.params_mut(), &ids, sched.at(step));
            step += 1;
        }
        let mean = sum / data.len() as f64;
        log::info!("policy epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    Ok(epoch_losses)
}

/// Builds supervision from `clean` and trains the policy head on it.
pub fn train_policy(
    clean: &[TokenSeq],
    model: &mut ModelState,
    corr: &CorrectorConfig,
    cfg: &PolicyConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (data, _) = build_supervision(clean, model, corr, cfg)?;
    fit_policy(model, &data, cfg)
}

pub fn format_supervision(s: &Supervision, vocab: &Vocab) -> Result<String> {
    let b = &s.bounds;
    Ok(format!(
        "{}\t{}\t{}\t{}\t{}\t{}",
        vocab.decode(&s.wrong)?,
        b.s_l,
        b.s_h,
        b.e_l,
        b.e_h,
        b.mu
    ))
}

pub fn parse_supervision(line: &str, vocab: &Vocab) -> Result<Supervision> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 6 {
        return Err(Error::InvalidInput(format!(
            "supervision line needs 6 tab-separated fields, got {}",
            f.len()
        )));
    }
    let num = |s: &str| {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::InvalidInput(format!("bad number {s:?}")))
    };
    let bounds = SpanBounds {
        s_l: num(f[1])?,
        s_h: num(f[2])?,
        e_l: num(f[3])?,
        e_h: num(f[4])?,
        mu: num(f[5])?,
    };
    if bounds.s_l > bounds.s_h || bounds.e_l > bounds.e_h || !(0.0..=1.0).contains(&bounds.mu) {
        return Err(Error::InvalidInput(format!(
            "inconsistent bounds in {line:?}"
        )));
    }
    Ok(Supervision {
        wrong: vocab.encode(f[0])?,
        bounds,
    })
}

pub fn write_supervision(
    path: &Path,
    meta: &[(String, String)],
    data: &[Supervision],
    vocab: &Vocab,
) -> Result<()> {
    let lines = data
        .iter()
        .map(|s| format_supervision(s, vocab))
        .collect::<Result<Vec<_>>>()?;
    dataset::write_lines(path, meta, lines)
}

pub fn read_supervision(path: &Path, vocab: &Vocab) -> Result<Vec<Supervision>> {
    dataset::read_lines(path)?
        .iter()
        .map(|l| parse_supervision(l, vocab))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn enc(s: &str) -> TokenSeq {
        Vocab::toy().encode(s).unwrap()
    }

    #[test]
    fn diff_span_examples() {
        assert_eq!(diff_span(&enc("abcde"), &enc("abXde")).unwrap(), (2, 3));
        assert_eq!(diff_span(&enc("abc"), &enc("abcX")).unwrap(), (3, 3));
        assert_eq!(diff_span(&enc("Xbc"), &enc("Ybc")).unwrap(), (0, 1));
        assert_eq!(diff_span(&enc("aaa"), &enc("aa")).unwrap(), (2, 3));
        assert!(matches!(
            diff_span(&enc("ab"), &enc("ab")),
            Err(Error::NoDiff)
        ));
    }

    #[test]
    fn range_bounds_examples() {
        let b = range_bounds(3, 4, 5, 6, false);
        assert_eq!((b.s_l, b.s_h, b.e_l, b.e_h), (3.0, 5.0, 4.0, 6.0));
        let b = range_bounds(2, 3, 2, 3, false);
        assert_eq!((b.s_l, b.s_h, b.e_l, b.e_h), (2.0, 2.0, 3.0, 3.0));
        let b = range_bounds(3, 7, 5, 6, true);
        assert_eq!((b.e_l, b.e_h), (5.0, 7.0));
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(overlap_coeff((2, 5), (2, 5)), 1.0);
        assert_eq!(overlap_coeff((0, 2), (3, 5)), 0.0);
        assert!((overlap_coeff((0, 3), (1, 5)) - 4.0 / 12.0).abs() < 1e-15);
        assert_eq!(overlap_coeff((3, 3), (4, 4)), 1.0);
        assert_eq!(overlap_coeff((3, 3), (2, 4)), 0.0);
    }

    fn loss_at(xs: Vec<f64>, xe: Vec<f64>, b: &SpanBounds) -> f64 {
        let mut g = Graph::new();
        let n = xs.len();
        let xs = g.constant(Tensor::matrix(n, 1, xs).unwrap());
        let xe = g.constant(Tensor::matrix(n, 1, xe).unwrap());
        let l = policy_loss(&mut g, xs, xe, b).unwrap();
        g.value(l).item()
    }

    fn peaked(n: usize, at: usize) -> Vec<f64> {
        (0..n).map(|i| if i == at { 200.0 } else { 0.0 }).collect()
    }

    #[test]
    fn policy_loss_zero_on_selected_bounds() {
        let b = SpanBounds {
            s_l: 1.0,
            s_h: 3.0,
            e_l: 2.0,
            e_h: 5.0,
            mu: 1.0,
        };
        assert!(loss_at(peaked(6, 1), peaked(6, 2), &b).abs() < 1e-12);
        assert!(loss_at(peaked(6, 3), peaked(6, 2), &b) > 0.1);
        let b = SpanBounds { mu: 0.0, ..b };
        assert!(loss_at(peaked(6, 3), peaked(6, 5), &b).abs() < 1e-12);
        assert!(loss_at(peaked(6, 1), peaked(6, 5), &b) > 0.1);
    }

    #[test]
    fn restored_sentence_gives_exact_bounds() {
        let wrong = enc("KagXhub.");
        let orig = enc("Kagohub.");
        let b = supervise_one(&wrong, &orig, Some(&orig), false)
            .unwrap()
            .unwrap();
        assert_eq!(b, SpanBounds::exact(3, 4));
        assert_eq!(
            supervise_one(&wrong, &orig, Some(&wrong), false).unwrap(),
            None
        );
    }

    #[test]
    fn supervision_lines_round_trip() {
        let v = Vocab::toy();
        let s = Supervision {
            wrong: enc("KagXhub."),
            bounds: SpanBounds {
                s_l: 2.0,
                s_h: 3.0,
                e_l: 4.0,
                e_h: 4.0,
                mu: 0.25,
            },
        };
        let line = format_supervision(&s, &v).unwrap();
        assert_eq!(line, "KagXhub.\t2\t3\t4\t4\t0.25");
        assert_eq!(parse_supervision(&line, &v).unwrap(), s);
        assert!(parse_supervision("a\t3\t2\t4\t4\t0.5", &v).is_err());
        assert!(parse_supervision("a\t1\t2", &v).is_err());
    }

    #[test]
    fn policy_training_freezes_the_rest() {
        let vocab = Vocab::toy();
        let mut c = crate::model::ModelConfig::new(vocab.size());
        c.layers = 1;
        c.hidden = 16;
        c.heads = 2;
        c.ffn = 32;
        let mut m = ModelState::new(c, vocab, 1).unwrap();
        let clean = toy::generate_corpus(3, 6).unwrap();
        let before: Vec<_> = [Group::Encoder, Group::Mlm, Group::Scoring]
            .iter()
            .map(|&g| m.snapshot(g))
            .collect();
        let pol = m.snapshot(Group::Policy);
        let cfg = PolicyConfig {
            epochs: 1,
            batch: 2,
            target: PolicyTarget::GroundTruth,
            ..PolicyConfig::default()
        };
        let losses = train_policy(&clean, &mut m, &CorrectorConfig::default(), &cfg).unwrap();
        assert_eq!(losses.len(), 1);
        let after: Vec<_> = [Group::Encoder, Group::Mlm, Group::Scoring]
            .iter()
            .map(|&g| m.snapshot(g))
            .collect();
        assert_eq!(before, after);
        assert_ne!(pol, m.snapshot(Group::Policy));
    }
}
