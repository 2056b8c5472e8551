//! Joint multi-task and adversarial training of the generator (masked LM)
//! and discriminator (scoring head).

mod adversarial;
pub mod losses;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adversarial::{
    build_adversarial_batch, build_random_batch, choose_mask_positions, interlaced_weight_d,
    interlaced_weight_g, rank_from_uniform, sample_candidate_rank, AdversarialBatch,
    AdversarialSample, CONF_FLOOR,
};
pub use losses::{loss_discriminator, loss_generator, loss_mtl};

use crate::dataset;
use crate::error::{Error, Result};
use crate::model::{Ctx, Group, Groups, ModelConfig, ModelState};
use crate::optim::{AdamW, LrSchedule};
use crate::tensor::{Graph, ParamId};
use crate::vocab::{TokenSeq, Vocab};

/// Which objectives run on each batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Scoring head trained on uniform random substitutions; masked LM on a
    /// frozen encoder.
    Supervised,
    /// Multi-task step only.
    Mtl,
    /// Adversarial step only; the encoder is never updated.
    Gan,
    /// Multi-task step followed by an adversarial step.
    Amtl,
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Phase::Supervised),
            "mtl" | "mtl-only" => Ok(Phase::Mtl),
            "gan" | "gan-only" | "adv" => Ok(Phase::Gan),
            "amtl" => Ok(Phase::Amtl),
            _ => Err(Error::Config(format!(
                "unknown phase {s:?} (expected supervised, mtl, gan or amtl)"
            ))),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            Phase::Supervised => "supervised",
            Phase::Mtl => "mtl",
            Phase::Gan => "gan",
            Phase::Amtl => "amtl",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Upper end of the sampled candidate rank.
    pub ct: f64,
    /// Ranks below this are labeled correct.
    pub pos_threshold: usize,
    pub s_g: f64,
    pub lr: f64,
    /// Capped at 5% of the total step count.
    pub warmup_steps: usize,
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub phase: Phase,
    pub max_steps: Option<usize>,
    pub weight_decay: f64,
    pub clamp_wg_nonneg: bool,
    pub eq8_post_sigmoid: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ct: 1000.0,
            pos_threshold: 20,
            s_g: 1.15,
            lr: 2e-5,
            warmup_steps: 10_000,
            mask_ratio: 0.15,
            epochs: 1,
            batch: 16,
            seed: 0,
            phase: Phase::Amtl,
            max_steps: None,
            weight_decay: 0.01,
            clamp_wg_nonneg: false,
            eq8_post_sigmoid: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.ct > 1.0) || !self.ct.is_finite() {
            return bad("Ct must be a finite value above 1");
        }
        if self.pos_threshold as f64 >= self.ct {
            return bad("pos_threshold must be below Ct");
        }
        if !(self.s_g > 0.0) {
            return bad("S_g must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return bad("mask_ratio must lie in (0, 1]");
        }
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch must be at least 1");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    pub fn total_steps(&self, corpus_len: usize) -> usize {
        let per_epoch = corpus_len.div_ceil(self.batch);
        let t = per_epoch * self.epochs;
        self.max_steps.map_or(t, |m| t.min(m))
    }

    pub fn schedule(&self, total: usize) -> LrSchedule {
        let five_pct = (total as f64 * 0.05).ceil() as usize;
        LrSchedule {
            peak: self.lr,
            warmup: self.warmup_steps.min(five_pct),
            total,
        }
    }
}

/// One row of the training log. Losses an arm does not compute are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub l_mtl: Option<f64>,
    pub l_g: Option<f64>,
    pub l_d: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,step,L_MTL,L_G,L_D";

    pub fn csv_lines(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        std::iter::once(Self::CSV_HEADER.to_string())
            .chain(self.rows.iter().map(|r| {
                format!(
                    "{},{},{},{},{}",
                    r.epoch,
                    r.step,
                    f(r.l_mtl),
                    f(r.l_g),
                    f(r.l_d)
                )
            }))
            .collect()
    }

    pub fn write_csv(&self, path: &Path, meta: &[(String, String)]) -> Result<()> {
        dataset::write_lines(path, meta, self.csv_lines())
    }

    /// Mean of each column over the rows of `epoch`.
    pub fn epoch_means(&self, epoch: usize) -> [Option<f64>; 3] {
        let rows: Vec<&LogRow> = self.rows.iter().filter(|r| r.epoch == epoch).collect();
        let mean = |get: fn(&LogRow) -> Option<f64>| {
            let v: Vec<f64> = rows.iter().filter_map(|r| get(r)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        [mean(|r| r.l_mtl), mean(|r| r.l_g), mean(|r| r.l_d)]
    }
}

const MTL_GROUPS: Groups = Groups {
    encoder: true,
    mlm: true,
    scoring: true,
    policy: false,
};
const ADV_GROUPS: Groups = Groups {
    encoder: false,
    mlm: true,
    scoring: true,
    policy: false,
};

fn ids_for(model: &ModelState, groups: Groups) -> Vec<ParamId> {
    [Group::Encoder, Group::Mlm, Group::Scoring, Group::Policy]
        .into_iter()
        .filter(|g| groups.contains(*g))
        .flat_map(|g| model.param_ids(g))
        .collect()
}

fn classes_at(model: &ModelState, seq: &TokenSeq, at: &[usize]) -> Vec<usize> {
    at.iter()
        .map(|&p| model.vocab().class_of(seq.ids()[p]))
        .collect()
}

/// Owns the optimizer and the per-purpose random streams.
pub struct Trainer<'m> {
    model: &'m mut ModelState,
    cfg: TrainConfig,
    opt: AdamW,
    data_rng: ChaCha8Rng,
    drop_rng: ChaCha8Rng,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut ModelState, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(model.params(), cfg.weight_decay);
        let stream = |n: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(n);
            r
        };
        Ok(Trainer {
            data_rng: stream(1),
            drop_rng: stream(2),
            model,
            cfg,
            opt,
        })
    }

    pub fn model(&self) -> &ModelState {
        self.model
    }

    /// Builds the batch this trainer's phase trains on.
    pub fn make_batch(&mut self, sentences: &[TokenSeq]) -> Result<AdversarialBatch> {
        match self.cfg.phase {
            Phase::Supervised => Ok(build_random_batch(
                sentences,
                self.model.vocab(),
                &self.cfg,
                &mut self.data_rng,
            )),
            _ => build_adversarial_batch(sentences, self.model, &self.cfg, &mut self.data_rng),
        }
    }

    /// Multi-task step over encoder and both heads. Returns the mean loss.
    pub fn mtl_step(&mut self, batch: &AdversarialBatch, lr: f64) -> Result<f64> {
        let n = batch.samples.len();
        if n == 0 {
            return Ok(0.0);
        }
        self.model.params_mut().zero_grad();
        let mut total = 0.0;
        for s in &batch.samples {
            let mut g = Graph::new();
            let mut cx = Ctx::new(&mut g, MTL_GROUPS);
            let m = &*self.model;
            let enc_m = m.encode_in(&mut cx, &s.masked, Some(&mut self.drop_rng))?;
            let logits = m.mlm_logits_in(&mut cx, enc_m, &s.masked_at)?;
            let enc_g = m.encode_in(&mut cx, &s.generated, Some(&mut self.drop_rng))?;
            let z = m.score_logits_in(&mut cx, enc_g)?;
            let targets = classes_at(m, &s.original, &s.masked_at);
            let l = loss_mtl(cx.g, logits, &targets, z, &s.labels)?;
            let l = cx.g.scale(l, 1.0 / n as f64);
            total += g.value(l).item();
            g.backward(l, self.model.params_mut())?;
        }
        let ids = ids_for(self.model, MTL_GROUPS);
        self.opt.step(self.model.params_mut(), &ids, lr);
        Ok(total)
    }

    /// Adversarial step over the two heads; encoder parameters are read as
    /// constants and left untouched. Returns mean `(L_G, L_D)`.
    pub fn adversarial_step(&mut self, batch: &AdversarialBatch, lr: f64) -> Result<(f64, f64)> {
        let n = batch.samples.len();
        if n == 0 {
            return Ok((0.0, 0.0));
        }
        // W_D comes from the discriminator as it stands before this step.
        let mut w_ds = Vec::with_capacity(n);
        for s in &batch.samples {
            if s.r.is_empty() {
                w_ds.push(Vec::new());
                continue;
            }
            let sg = self.model.score_tokens(&s.generated)?;
            let so = self.model.score_tokens(&s.original)?;
            w_ds.push(
                s.r.iter()
                    .map(|&i| interlaced_weight_d(&sg, &so, i))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        self.model.params_mut().zero_grad();
        let (mut tg, mut td) = (0.0, 0.0);
        for (s, w_d) in batch.samples.iter().zip(&w_ds) {
            let mut g = Graph::new();
            let mut cx = Ctx::new(&mut g, ADV_GROUPS);
            let m = &*self.model;
            let lg = if s.r.is_empty() {
                None
            } else {
                let enc_m = m.encode_in(&mut cx, &s.masked, Some(&mut self.drop_rng))?;
                let logits = m.mlm_logits_in(&mut cx, enc_m, &s.r)?;
                let targets = classes_at(m, &s.original, &s.r);
                Some(loss_generator(cx.g, logits, &targets, w_d)?)
            };
            let enc_g = m.encode_in(&mut cx, &s.generated, Some(&mut self.drop_rng))?;
            let z = m.score_logits_in(&mut cx, enc_g)?;
            let ld = loss_discriminator(
                cx.g,
                z,
                &s.labels,
                &s.w_g,
                &s.r,
                &s.c,
                self.cfg.eq8_post_sigmoid,
            )?;
            let l = match lg {
                Some(lg) => {
                    tg += cx.g.value(lg).item() / n as f64;
                    cx.g.add(lg, ld)?
                }
                None => ld,
            };
            td += cx.g.value(ld).item() / n as f64;
            let l = cx.g.scale(l, 1.0 / n as f64);
            g.backward(l, self.model.params_mut())?;
        }
        let ids = ids_for(self.model, ADV_GROUPS);
        self.opt.step(self.model.params_mut(), &ids, lr);
        Ok((tg, td))
    }

    /// Scoring BCE through encoder and scoring head, then masked-LM CE
    /// through the masked-LM head only. Returns the summed mean loss.
    pub fn supervised_step(&mut self, batch: &AdversarialBatch, lr: f64) -> Result<f64> {
        let n = batch.samples.len();
        if n == 0 {
            return Ok(0.0);
        }
        let score_groups = Groups {
            encoder: true,
            scoring: true,
            ..Groups::NONE
        };
        let mlm_groups = Groups {
            mlm: true,
            ..Groups::NONE
        };
        let mut total = 0.0;
        for (groups, scoring) in [(score_groups, true), (mlm_groups, false)] {
            self.model.params_mut().zero_grad();
            for s in &batch.samples {
                let mut g = Graph::new();
                let mut cx = Ctx::new(&mut g, groups);
                let m = &*self.model;
                let l = if scoring {
                    let enc = m.encode_in(&mut cx, &s.generated, Some(&mut self.drop_rng))?;
                    let z = m.score_logits_in(&mut cx, enc)?;
                    let ones = vec![1.0; s.labels.len()];
                    losses::weighted_bce(cx.g, z, &s.labels, &ones)?
                } else {
                    let enc = m.encode_in(&mut cx, &s.masked, Some(&mut self.drop_rng))?;
                    let logits = m.mlm_logits_in(&mut cx, enc, &s.masked_at)?;
                    let targets = classes_at(m, &s.original, &s.masked_at);
                    let ones = vec![1.0; targets.len()];
                    losses::weighted_ce(cx.g, logits, &targets, &ones)?
                };
                let l = cx.g.scale(l, 1.0 / n as f64);
                total += g.value(l).item();
                g.backward(l, self.model.params_mut())?;
            }
            let ids = ids_for(self.model, groups);
            self.opt.step(self.model.params_mut(), &ids, lr);
        }
        Ok(total)
    }

    /// One batch of the configured phase.
    pub fn step(
        &mut self,
        sentences: &[TokenSeq],
        lr: f64,
    ) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
        let batch = self.make_batch(sentences)?;
        Ok(match self.cfg.phase {
            Phase::Supervised => (Some(self.supervised_step(&batch, lr)?), None, None),
            Phase::Mtl => (Some(self.mtl_step(&batch, lr)?), None, None),
            Phase::Gan => {
                let (g, d) = self.adversarial_step(&batch, lr)?;
                (None, Some(g), Some(d))
            }
            Phase::Amtl => {
                let m = self.mtl_step(&batch, lr)?;
                let (g, d) = self.adversarial_step(&batch, lr)?;
                (Some(m), Some(g), Some(d))
            }
        })
    }

    /// Runs every epoch (or until `max_steps`) over `corpus`.
    pub fn run(&mut self, corpus: &[TokenSeq]) -> Result<TrainLog> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let total = self.cfg.total_steps(corpus.len());
        let sched = self.cfg.schedule(total);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        shuffle_rng.set_stream(3);
        let mut log = TrainLog::default();
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut step = 0;
        'epochs: for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(self.cfg.batch) {
                if step >= total {
                    break 'epochs;
                }
                let sentences: Vec<TokenSeq> = chunk.iter().map(|&i| corpus[i].clone()).collect();
                let (l_mtl, l_g, l_d) = self.step(&sentences, sched.at(step))?;
                let row = LogRow {
                    epoch,
                    step,
                    l_mtl,
                    l_g,
                    l_d,
                };
                if [l_mtl, l_g, l_d].iter().flatten().any(|v| !v.is_finite()) {
                    return Err(self.divergence(&row));
                }
                log.rows.push(row);
                step += 1;
            }
            let [a, b, c] = log.epoch_means(epoch);
            log::info!(
                "epoch {epoch}: L_MTL={} L_G={} L_D={}",
                fmt_opt(a),
                fmt_opt(b),
                fmt_opt(c)
            );
        }
        Ok(log)
    }

    fn divergence(&self, row: &LogRow) -> Error {
        let p = self.model.params();
        let worst = p
            .ids()
            .filter(|&id| !p.value(id).is_finite())
            .map(|id| p.name(id).to_string())
            .collect::<Vec<_>>();
        let largest = p
            .ids()
            .map(|id| {
                let m = p
                    .value(id)
                    .data()
                    .iter()
                    .fold(0.0f64, |a, v| a.max(v.abs()));
                (m, id)
            })
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(m, id)| format!("{}={m:.3e}", p.name(id)))
            .unwrap_or_default();
        Error::Divergence {
            step: row.step,
            detail: format!(
                "epoch {} L_MTL={} L_G={} L_D={}; non-finite params: [{}]; largest |param|: {}",
                row.epoch,
                fmt_opt(row.l_mtl),
                fmt_opt(row.l_g),
                fmt_opt(row.l_d),
                worst.join(", "),
                largest
            ),
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Trains `model` in place.
pub fn train_model(
    model: &mut ModelState,
    corpus: &[TokenSeq],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    Trainer::new(model, cfg.clone())?.run(corpus)
}

/// Initializes a model from `cfg.seed` and trains it.
pub fn train(
    corpus: &[TokenSeq],
    model_cfg: ModelConfig,
    vocab: Vocab,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainLog)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut model = ModelState::new(model_cfg, vocab, cfg.seed)?;
    let log = train_model(&mut model, corpus, cfg)?;
    model.meta.push(("phase".into(), cfg.phase.to_string()));
    model.meta.push(("seed".into(), cfg.seed.to_string()));
    model
        .meta
        .push(("steps".into(), log.rows.len().to_string()));
    Ok((model, log))
}
