//! Fixtures shared by the integration and acceptance targets.

#![allow(dead_code)]

use amtl::gradcheck::{grad_check, grad_check_with_floor};
use amtl::model::{Ctx, Groups, ModelConfig, ModelState};
use amtl::policy::{overlap_coeff, policy_loss, range_bounds};
use amtl::tensor::{Graph, Params, Tensor};
use amtl::train::losses::{loss_discriminator, loss_generator, loss_mtl};
use amtl::vocab::{TokenSeq, Vocab, MASK};
use amtl::Result;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// A loss `L` evaluated through a whole model carries ~1e-14·|L| of
/// roundoff, i.e. ~1e-9·|L| in a central difference at `GRAD_EPS`. Below
/// 1e-5·|L| the relative target would sit under that noise, so the
/// whole-model check floors the denominator there.
pub const MODEL_DENOM_FLOOR: f64 = 1e-5;

/// Worst relative error of one loss over a batch of random instances.
#[derive(Debug)]
pub struct GradCase {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCase {
    fn new(name: &'static str) -> Self {
        GradCase {
            name,
            instances: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        }
    }

    fn absorb(&mut self, r: amtl::gradcheck::GradReport) {
        self.instances += 1;
        if r.max_rel_err >= self.max_rel_err {
            self.max_rel_err = r.max_rel_err;
            self.worst = r.worst_param_path;
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn split_rc(rng: &mut ChaCha8Rng, k: usize) -> (Vec<usize>, Vec<usize>) {
    let (mut r, mut c) = (Vec::new(), Vec::new());
    for i in 0..k {
        if rng.random_bool(0.4) {
            r.push(i);
        } else {
            c.push(i);
        }
    }
    (r, c)
}

/// Generator CE, discriminator BCE + ratio, MTL and policy range losses,
/// each on `n` random small instances with the inputs as parameters.
pub fn loss_gradient_suite(seed: u64, n: usize) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = GradCase::new("generator");
    let mut disc = GradCase::new("discriminator");
    let mut mtl = GradCase::new("mtl");
    let mut pol = GradCase::new("policy");

    for i in 0..n {
        let m = rng.random_range(1..=4);
        let vs = rng.random_range(3..=9);
        let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..vs)).collect();
        let w_d: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..5.0)).collect();
        let mut p = Params::new();
        let lid = p.add(
            "logits",
            Tensor::matrix(m, vs, randn(&mut rng, m * vs, 2.0))?,
        );
        gen.absorb(grad_check(
            |g: &mut Graph, p: &Params| {
                let x = g.param(p, lid);
                loss_generator(g, x, &targets, &w_d)
            },
            &mut p,
            GRAD_EPS,
        )?);

        let k = rng.random_range(2..=8);
        let labels: Vec<f64> = (0..k)
            .map(|_| f64::from(rng.random_bool(0.5) as u8))
            .collect();
        let w_g: Vec<f64> = (0..k).map(|_| rng.random_range(-0.99..1.5)).collect();
        let (r, c) = split_rc(&mut rng, k);
        let post = i % 2 == 1;
        let mut p = Params::new();
        let zid = p.add("z", Tensor::matrix(k, 1, randn(&mut rng, k, 2.0))?);
        disc.absorb(grad_check(
            |g: &mut Graph, p: &Params| {
                let z = g.param(p, zid);
                loss_discriminator(g, z, &labels, &w_g, &r, &c, post)
            },
            &mut p,
            GRAD_EPS,
        )?);

        let mut p = Params::new();
        let lid = p.add("mlm", Tensor::matrix(m, vs, randn(&mut rng, m * vs, 2.0))?);
        let zid = p.add("z", Tensor::matrix(k, 1, randn(&mut rng, k, 2.0))?);
        mtl.absorb(grad_check(
            |g: &mut Graph, p: &Params| {
                let x = g.param(p, lid);
                let z = g.param(p, zid);
                loss_mtl(g, x, &targets, z, &labels)
            },
            &mut p,
            GRAD_EPS,
        )?);

        let k = rng.random_range(1..=8);
        let span = |rng: &mut ChaCha8Rng| {
            let a = rng.random_range(0..=k);
            let b = rng.random_range(0..=k);
            (a.min(b), a.max(b))
        };
        let (wo, wcw) = (span(&mut rng), span(&mut rng));
        let mut b = range_bounds(wo.0, wo.1, wcw.0, wcw.1, rng.random_bool(0.5));
        b.mu = overlap_coeff(wo, wcw);
        let mut p = Params::new();
        let sid = p.add(
            "x_s",
            Tensor::matrix(k + 1, 1, randn(&mut rng, k + 1, 1.5))?,
        );
        let eid = p.add(
            "x_e",
            Tensor::matrix(k + 1, 1, randn(&mut rng, k + 1, 1.5))?,
        );
        pol.absorb(grad_check(
            |g: &mut Graph, p: &Params| {
                let xs = g.param(p, sid);
                let xe = g.param(p, eid);
                policy_loss(g, xs, xe, &b)
            },
            &mut p,
            GRAD_EPS,
        )?);
    }
    Ok(vec![gen, disc, mtl, pol])
}

pub fn tiny_model(seed: u64) -> ModelState {
    let vocab = Vocab::toy();
    let mut cfg = ModelConfig::new(vocab.size());
    cfg.layers = 1;
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.ffn = 16;
    ModelState::new(cfg, vocab, seed).unwrap()
}

pub fn random_seq(rng: &mut ChaCha8Rng, vocab: &Vocab, k: usize) -> TokenSeq {
    let ids: Vec<_> = vocab.content_ids().collect();
    TokenSeq::new((0..k).map(|_| *ids.choose(rng).unwrap()).collect())
}

/// The four losses again, this time through every parameter of a tiny
/// model: embeddings, attention, feed-forward, layer norms and heads.
pub fn model_gradient_suite(seed: u64, n: usize) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = vec![
        GradCase::new("generator/model"),
        GradCase::new("discriminator/model"),
        GradCase::new("mtl/model"),
        GradCase::new("policy/model"),
    ];
    for i in 0..n {
        let base = tiny_model(seed.wrapping_add(i as u64));
        let vocab = base.vocab().clone();
        let k = rng.random_range(3..=6);
        let seq = random_seq(&mut rng, &vocab, k);
        let at: Vec<usize> = {
            let mut v: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.4)).collect();
            if v.is_empty() {
                v.push(rng.random_range(0..k));
            }
            v
        };
        let masked = at.iter().fold(seq.clone(), |s, &p| s.with_token(p, MASK));
        let targets: Vec<usize> = at.iter().map(|&p| vocab.class_of(seq.ids()[p])).collect();
        let w_d: Vec<f64> = at.iter().map(|_| rng.random_range(0.2..3.0)).collect();
        let labels: Vec<f64> = (0..k)
            .map(|_| f64::from(rng.random_bool(0.5) as u8))
            .collect();
        let w_g: Vec<f64> = (0..k).map(|_| rng.random_range(-0.9..1.5)).collect();
        let (r, c) = split_rc(&mut rng, k);
        let b = {
            let s = rng.random_range(0..k);
            let e = rng.random_range(s + 1..=k);
            let mut b = range_bounds(s, e, s.saturating_sub(1), e, false);
            b.mu = overlap_coeff((s, e), (s.saturating_sub(1), e));
            b
        };

        let with_params = |p: &Params| {
            let mut m = base.clone();
            *m.params_mut() = p.clone();
            m
        };
        for (ci, case) in cases.iter_mut().enumerate() {
            let mut params = base.params().clone();
            let loss = |g: &mut Graph, p: &Params| {
                let m = with_params(p);
                let mut cx = Ctx::new(g, Groups::ALL);
                match ci {
                    0 => {
                        let enc = m.encode_in(&mut cx, &masked, None)?;
                        let x = m.mlm_logits_in(&mut cx, enc, &at)?;
                        loss_generator(cx.g, x, &targets, &w_d)
                    }
                    1 => {
                        let enc = m.encode_in(&mut cx, &seq, None)?;
                        let z = m.score_logits_in(&mut cx, enc)?;
                        loss_discriminator(cx.g, z, &labels, &w_g, &r, &c, false)
                    }
                    2 => {
                        let enc = m.encode_in(&mut cx, &masked, None)?;
                        let x = m.mlm_logits_in(&mut cx, enc, &at)?;
                        let z = m.score_logits_in(&mut cx, enc)?;
                        loss_mtl(cx.g, x, &targets, z, &labels)
                    }
                    _ => {
                        let enc = m.encode_in(&mut cx, &seq, None)?;
                        let (xs, xe) = m.policy_logits_in(&mut cx, enc, None)?;
                        policy_loss(cx.g, xs, xe, &b)
                    }
                }
            };
            let mut g = Graph::new();
            let l = loss(&mut g, &params)?;
            let floor = MODEL_DENOM_FLOOR * g.value(l).item().abs().max(1.0);
            case.absorb(grad_check_with_floor(loss, &mut params, GRAD_EPS, floor)?);
        }
    }
    Ok(cases)
}
