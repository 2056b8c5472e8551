//! Shared transformer encoder with three heads.
//!
//! The encoder reads `[BOS] c_1 … c_k [EOS]` and produces one row per
//! position. On top of it sit the masked-LM head (generator), the per-token
//! scoring head (discriminator, high = wrong) and the policy head, which
//! emits start/end logits over the `k + 1` boundary slots `0..=k`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{self, Graph, ParamId, Params, Tensor, Var};
use crate::vocab::{TokenId, TokenSeq, Vocab, BOS, EOS, MASK};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMTL";
pub const FORMAT_VERSION: u32 = 1;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Positions including the BOS and EOS slots.
    pub max_len: usize,
    pub vs: usize,
    pub dropout: f64,
    pub policy_dropout: f64,
}

impl ModelConfig {
    pub fn new(vs: usize) -> Self {
        ModelConfig {
            layers: 2,
            hidden: 128,
            heads: 4,
            ffn: 512,
            max_len: 64,
            vs,
            dropout: 0.1,
            policy_dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.layers == 0 || self.ffn == 0 {
            return bad("layers and ffn must be positive".into());
        }
        if self.max_len < crate::toy::MAX_LEN + 2 {
            return bad(format!(
                "max_len {} must cover the longest sentence plus 2",
                self.max_len
            ));
        }
        if self.vs < 8 {
            return bad(format!("vocabulary size {} below 8", self.vs));
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("policy_dropout", self.policy_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Encoder,
    Mlm,
    Scoring,
    Policy,
}

/// A set of groups, used both for "which params receive gradients" and
/// "which params the optimizer may touch".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Groups {
    pub encoder: bool,
    pub mlm: bool,
    pub scoring: bool,
    pub policy: bool,
}

impl Groups {
    pub const NONE: Groups = Groups {
        encoder: false,
        mlm: false,
        scoring: false,
        policy: false,
    };
    pub const ALL: Groups = Groups {
        encoder: true,
        mlm: true,
        scoring: true,
        policy: true,
    };

    pub fn contains(&self, g: Group) -> bool {
        match g {
            Group::Encoder => self.encoder,
            Group::Mlm => self.mlm,
            Group::Scoring => self.scoring,
            Group::Policy => self.policy,
        }
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    layers: Vec<LayerIds>,
    mlm_w: ParamId,
    mlm_b: ParamId,
    mlm_ln_g: ParamId,
    mlm_ln_b: ParamId,
    mlm_out_w: ParamId,
    mlm_out_b: ParamId,
    score_w: ParamId,
    score_b: ParamId,
    start_w: ParamId,
    start_b: ParamId,
    end_w: ParamId,
    end_b: ParamId,
}

/// Peak-first confidence over content tokens at one masked position.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateDistribution {
    pub position: usize,
    pub ranked_ids: Vec<TokenId>,
    pub d: Vec<f64>,
}

impl CandidateDistribution {
    fn from_probs(position: usize, probs: &[f64], vocab: &Vocab) -> Self {
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        CandidateDistribution {
            position,
            ranked_ids: order.iter().map(|&c| vocab.id_of_class(c)).collect(),
            d: order.iter().map(|&c| probs[c]).collect(),
        }
    }

    /// Rank (0 = top) of `id`, if it is a candidate.
    pub fn rank_of(&self, id: TokenId) -> Option<usize> {
        self.ranked_ids.iter().position(|&x| x == id)
    }
}

/// Per-token wrongness probabilities, one per position.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }
}

/// Start and end logits over the boundary slots `0..=k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub x_s: Vec<f64>,
    pub x_e: Vec<f64>,
}

/// Binds model parameters into one graph, reading each at most once.
pub struct Ctx<'g> {
    pub g: &'g mut Graph,
    cache: Vec<Option<Var>>,
    trainable: Groups,
}

impl<'g> Ctx<'g> {
    pub fn new(g: &'g mut Graph, trainable: Groups) -> Self {
        Ctx {
            g,
            cache: Vec::new(),
            trainable,
        }
    }

    fn p(&mut self, m: &ModelState, id: ParamId) -> Var {
        if self.cache.len() <= id.0 {
            self.cache.resize(m.params.len(), None);
        }
        if let Some(v) = self.cache[id.0] {
            return v;
        }
        let v = if self.trainable.contains(m.groups[id.0]) {
            self.g.param(&m.params, id)
        } else {
            self.g.frozen(&m.params, id)
        };
        self.cache[id.0] = Some(v);
        v
    }
}

/// Encoder output for one sentence inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `(k + 2) × hidden`, BOS and EOS rows included.
    pub full: Var,
    /// Number of sentence positions `k`.
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct ModelState {
    config: ModelConfig,
    vocab: Vocab,
    params: Params,
    groups: Vec<Group>,
    layout: Layout,
    /// Free-form `key=value` lines stored in the checkpoint header.
    pub meta: Vec<(String, String)>,
}

impl ModelState {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        if config.vs != vocab.size() {
            return Err(Error::Config(format!(
                "config vs {} differs from vocabulary size {}",
                config.vs,
                vocab.size()
            )));
        }
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut params = Params::new();
        let mut groups = Vec::new();
        let h = config.hidden;
        let mut add = |name: String, shape: &[usize], init: Init, group: Group| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Randn => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
            };
            groups.push(group);
            params.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
        };
        use Group::*;
        let tok_emb = add(
            "encoder.tok_emb".into(),
            &[config.vs, h],
            Init::Randn,
            Encoder,
        );
        let pos_emb = add(
            "encoder.pos_emb".into(),
            &[config.max_len, h],
            Init::Randn,
            Encoder,
        );
        let emb_ln_g = add("encoder.emb_ln.g".into(), &[h], Init::One, Encoder);
        let emb_ln_b = add("encoder.emb_ln.b".into(), &[h], Init::Zero, Encoder);
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let n = |s: &str| format!("encoder.layer{l}.{s}");
            layers.push(LayerIds {
                wq: add(n("wq"), &[h, h], Init::Randn, Encoder),
                bq: add(n("bq"), &[h], Init::Zero, Encoder),
                wk: add(n("wk"), &[h, h], Init::Randn, Encoder),
                bk: add(n("bk"), &[h], Init::Zero, Encoder),
                wv: add(n("wv"), &[h, h], Init::Randn, Encoder),
                bv: add(n("bv"), &[h], Init::Zero, Encoder),
                wo: add(n("wo"), &[h, h], Init::Randn, Encoder),
                bo: add(n("bo"), &[h], Init::Zero, Encoder),
                ln1_g: add(n("ln1.g"), &[h], Init::One, Encoder),
                ln1_b: add(n("ln1.b"), &[h], Init::Zero, Encoder),
                w1: add(n("w1"), &[h, config.ffn], Init::Randn, Encoder),
                b1: add(n("b1"), &[config.ffn], Init::Zero, Encoder),
                w2: add(n("w2"), &[config.ffn, h], Init::Randn, Encoder),
                b2: add(n("b2"), &[h], Init::Zero, Encoder),
                ln2_g: add(n("ln2.g"), &[h], Init::One, Encoder),
                ln2_b: add(n("ln2.b"), &[h], Init::Zero, Encoder),
            });
        }
        let classes = vocab.content_size();
        let layout = Layout {
            tok_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
            mlm_w: add("mlm.w".into(), &[h, h], Init::Randn, Mlm),
            mlm_b: add("mlm.b".into(), &[h], Init::Zero, Mlm),
            mlm_ln_g: add("mlm.ln.g".into(), &[h], Init::One, Mlm),
            mlm_ln_b: add("mlm.ln.b".into(), &[h], Init::Zero, Mlm),
            mlm_out_w: add("mlm.out.w".into(), &[h, classes], Init::Randn, Mlm),
            mlm_out_b: add("mlm.out.b".into(), &[classes], Init::Zero, Mlm),
            score_w: add("scoring.w".into(), &[h, 1], Init::Randn, Scoring),
            score_b: add("scoring.b".into(), &[1], Init::Zero, Scoring),
            start_w: add("policy.start.w".into(), &[h, 1], Init::Randn, Policy),
            start_b: add("policy.start.b".into(), &[1], Init::Zero, Policy),
            end_w: add("policy.end.w".into(), &[h, 1], Init::Randn, Policy),
            end_b: add("policy.end.b".into(), &[1], Init::Zero, Policy),
        };
        Ok(ModelState {
            config,
            vocab,
            params,
            groups,
            layout,
            meta: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn group_of(&self, id: ParamId) -> Group {
        self.groups[id.0]
    }

    pub fn param_ids(&self, group: Group) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|id| self.groups[id.0] == group)
            .collect()
    }

    /// Flat copy of every parameter in a group, in checkpoint order.
    pub fn snapshot(&self, group: Group) -> Vec<f64> {
        self.param_ids(group)
            .into_iter()
            .flat_map(|id| self.params.value(id).data().to_vec())
            .collect()
    }

    /// Overwrites one group with the values of a model of identical shape.
    pub fn copy_group_from(&mut self, other: &ModelState, group: Group) -> Result<()> {
        if self.config != other.config || self.vocab != other.vocab {
            return Err(Error::InvalidInput(
                "models differ in configuration or vocabulary".into(),
            ));
        }
        for id in self.param_ids(group) {
            *self.params.value_mut(id) = other.params.value(id).clone();
        }
        Ok(())
    }

    fn linear(&self, cx: &mut Ctx, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = cx.p(self, w);
        let b = cx.p(self, b);
        let y = cx.g.matmul(x, w)?;
        cx.g.add_row(y, b)
    }

    fn layer_norm(&self, cx: &mut Ctx, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
        let gm = cx.p(self, gamma);
        let bt = cx.p(self, beta);
        let n = cx.g.layer_norm_rows(x, LN_EPS);
        let n = cx.g.mul_row(n, gm)?;
        cx.g.add_row(n, bt)
    }

    /// Runs the encoder on `seq`. `rng` enables training-mode dropout.
    pub fn encode_in(
        &self,
        cx: &mut Ctx,
        seq: &TokenSeq,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Encoded> {
        let n = seq.len() + 2;
        if n > self.config.max_len {
            return Err(Error::TooLong {
                len: seq.len(),
                max: self.config.max_len - 2,
            });
        }
        let mut rows = Vec::with_capacity(n);
        rows.push(BOS as usize);
        for &id in seq.ids() {
            if id as usize >= self.config.vs {
                return Err(Error::InvalidInput(format!(
                    "token id {id} out of vocabulary"
                )));
            }
            rows.push(id as usize);
        }
        rows.push(EOS as usize);

        let l = &self.layout;
        let p = self.config.dropout;
        let h = self.config.hidden;
        let dh = h / self.config.heads;
        let att_scale = 1.0 / (dh as f64).sqrt();

        let tok = cx.p(self, l.tok_emb);
        let pos = cx.p(self, l.pos_emb);
        let tx = cx.g.gather_rows(tok, &rows)?;
        let px = cx.g.slice_rows(pos, 0, n)?;
        let x = cx.g.add(tx, px)?;
        let x = self.layer_norm(cx, x, l.emb_ln_g, l.emb_ln_b)?;
        let mut x = dropout(cx.g, x, p, rng.as_deref_mut());

        for ly in &l.layers {
            let q = self.linear(cx, x, ly.wq, ly.bq)?;
            let k = self.linear(cx, x, ly.wk, ly.bk)?;
            let v = self.linear(cx, x, ly.wv, ly.bv)?;
            let mut heads = Vec::with_capacity(self.config.heads);
            for hd in 0..self.config.heads {
                let qh = cx.g.slice_cols(q, hd * dh, dh)?;
                let kh = cx.g.slice_cols(k, hd * dh, dh)?;
                let vh = cx.g.slice_cols(v, hd * dh, dh)?;
                let s = cx.g.matmul_t(qh, kh)?;
                let s = cx.g.scale(s, att_scale);
                let a = cx.g.softmax_rows(s);
                heads.push(cx.g.matmul(a, vh)?);
            }
            let cat = cx.g.concat_cols(&heads)?;
            let o = self.linear(cx, cat, ly.wo, ly.bo)?;
            let o = dropout(cx.g, o, p, rng.as_deref_mut());
            let r = cx.g.add(x, o)?;
            let x1 = self.layer_norm(cx, r, ly.ln1_g, ly.ln1_b)?;
            let f = self.linear(cx, x1, ly.w1, ly.b1)?;
            let f = cx.g.gelu(f);
            let f = self.linear(cx, f, ly.w2, ly.b2)?;
            let f = dropout(cx.g, f, p, rng.as_deref_mut());
            let r = cx.g.add(x1, f)?;
            x = self.layer_norm(cx, r, ly.ln2_g, ly.ln2_b)?;
        }
        Ok(Encoded {
            full: x,
            len: seq.len(),
        })
    }

    /// Masked-LM logits over content classes at sentence positions `at`.
    pub fn mlm_logits_in(&self, cx: &mut Ctx, enc: Encoded, at: &[usize]) -> Result<Var> {
        let l = &self.layout;
        let rows: Vec<usize> = at.iter().map(|p| p + 1).collect();
        let hsel = cx.g.gather_rows(enc.full, &rows)?;
        let t = self.linear(cx, hsel, l.mlm_w, l.mlm_b)?;
        let t = cx.g.gelu(t);
        let t = self.layer_norm(cx, t, l.mlm_ln_g, l.mlm_ln_b)?;
        self.linear(cx, t, l.mlm_out_w, l.mlm_out_b)
    }

    /// Raw (pre-sigmoid) wrongness logits, `k × 1`.
    pub fn score_logits_in(&self, cx: &mut Ctx, enc: Encoded) -> Result<Var> {
        let hk = cx.g.slice_rows(enc.full, 1, enc.len)?;
        self.linear(cx, hk, self.layout.score_w, self.layout.score_b)
    }

    /// Start and end logits over slots `0..=k`, each `(k + 1) × 1`.
    /// Slot `i` reads the encoder row of position `i` (slot `k` reads EOS).
    pub fn policy_logits_in(
        &self,
        cx: &mut Ctx,
        enc: Encoded,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        let hk = cx.g.slice_rows(enc.full, 1, enc.len + 1)?;
        let hk = dropout(cx.g, hk, self.config.policy_dropout, rng);
        let l = &self.layout;
        let xs = self.linear(cx, hk, l.start_w, l.start_b)?;
        let xe = self.linear(cx, hk, l.end_w, l.end_b)?;
        Ok((xs, xe))
    }

    /// Content-position hidden states (`k × hidden`), eval mode.
    pub fn encode(&self, seq: &TokenSeq) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, Groups::NONE);
        let enc = self.encode_in(&mut cx, seq, None)?;
        let hk = cx.g.slice_rows(enc.full, 1, enc.len)?;
        Ok(cx.g.value(hk).clone())
    }

    /// All encoder rows (`(k + 2) × hidden`, BOS and EOS included), eval mode.
    pub fn encode_full(&self, seq: &TokenSeq) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, Groups::NONE);
        let enc = self.encode_in(&mut cx, seq, None)?;
        Ok(cx.g.value(enc.full).clone())
    }

    /// Softmax over content classes at every listed position.
    pub fn mlm_probs(&self, seq: &TokenSeq, at: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, Groups::NONE);
        let enc = self.encode_in(&mut cx, seq, None)?;
        let logits = self.mlm_logits_in(&mut cx, enc, at)?;
        let t = cx.g.value(logits);
        (0..at.len()).map(|r| tensor::softmax(t.row(r))).collect()
    }

    pub fn mlm_distribution(
        &self,
        seq: &TokenSeq,
        position: usize,
    ) -> Result<CandidateDistribution> {
        if seq.ids().get(position) != Some(&MASK) {
            return Err(Error::Contract(format!(
                "position {position} is not masked"
            )));
        }
        let probs = self.mlm_probs(seq, &[position])?;
        Ok(CandidateDistribution::from_probs(
            position,
            &probs[0],
            &self.vocab,
        ))
    }

    /// Distributions for every masked position of `seq`, one forward pass.
    pub fn mlm_distributions(&self, seq: &TokenSeq) -> Result<Vec<CandidateDistribution>> {
        let at = seq.mask_positions();
        if at.is_empty() {
            return Ok(Vec::new());
        }
        let probs = self.mlm_probs(seq, &at)?;
        Ok(at
            .iter()
            .zip(&probs)
            .map(|(&p, pr)| CandidateDistribution::from_probs(p, pr, &self.vocab))
            .collect())
    }

    /// Replaces every mask by its independent argmax in one pass.
    pub fn fill_masks(&self, seq: &TokenSeq) -> Result<TokenSeq> {
        let at = seq.mask_positions();
        if at.is_empty() {
            return Ok(seq.clone());
        }
        let probs = self.mlm_probs(seq, &at)?;
        let mut ids = seq.ids().to_vec();
        for (&p, pr) in at.iter().zip(&probs) {
            ids[p] = self.vocab.id_of_class(argmax(pr));
        }
        Ok(TokenSeq::new(ids))
    }

    pub fn score_tokens(&self, seq: &TokenSeq) -> Result<ScoreVector> {
        if seq.is_empty() {
            return Err(Error::Contract("cannot score an empty sentence".into()));
        }
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, Groups::NONE);
        let enc = self.encode_in(&mut cx, seq, None)?;
        let z = self.score_logits_in(&mut cx, enc)?;
        Ok(ScoreVector {
            scores: cx
                .g
                .value(z)
                .data()
                .iter()
                .map(|&v| tensor::sigmoid(v))
                .collect(),
        })
    }

    pub fn policy_spans(&self, seq: &TokenSeq) -> Result<PolicyOutput> {
        Ok(self.score_and_policy(seq)?.1)
    }

    /// Scores and policy logits from a single encoder pass.
    pub fn score_and_policy(&self, seq: &TokenSeq) -> Result<(ScoreVector, PolicyOutput)> {
        if seq.is_empty() {
            return Err(Error::Contract("cannot score an empty sentence".into()));
        }
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, Groups::NONE);
        let enc = self.encode_in(&mut cx, seq, None)?;
        let z = self.score_logits_in(&mut cx, enc)?;
        let (xs, xe) = self.policy_logits_in(&mut cx, enc, None)?;
        let scores =
            cx.g.value(z)
                .data()
                .iter()
                .map(|&v| tensor::sigmoid(v))
                .collect();
        Ok((
            ScoreVector { scores },
            PolicyOutput {
                x_s: cx.g.value(xs).data().to_vec(),
                x_e: cx.g.value(xe).data().to_vec(),
            },
        ))
    }

    fn config_text(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "layers={}", c.layers);
        let _ = writeln!(s, "hidden={}", c.hidden);
        let _ = writeln!(s, "heads={}", c.heads);
        let _ = writeln!(s, "ffn={}", c.ffn);
        let _ = writeln!(s, "max_len={}", c.max_len);
        let _ = writeln!(s, "vs={}", c.vs);
        let _ = writeln!(s, "dropout={}", c.dropout);
        let _ = writeln!(s, "policy_dropout={}", c.policy_dropout);
        let vocab: Vec<String> = self
            .vocab
            .chars()
            .iter()
            .map(|&ch| format!("{:x}", ch as u32))
            .collect();
        let _ = writeln!(s, "vocab={}", vocab.join(","));
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta.{k}={v}");
        }
        s
    }

    /// Checkpoint bytes: `AMTL`, u32 LE version, u32 LE config length, the
    /// UTF-8 config block, then every parameter as LE `f64` in layout order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.config_text();
        let mut out = Vec::with_capacity(12 + cfg.len() + self.params.numel() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        for id in self.params.ids() {
            for v in self.params.value(id).data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Corrupt(m.to_string());
        if bytes.len() < 12 {
            return Err(corrupt("shorter than the fixed header"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes
            .get(12..12 + cfg_len)
            .ok_or_else(|| corrupt("truncated config block"))?;
        let cfg = std::str::from_utf8(body).map_err(|_| corrupt("config is not UTF-8"))?;
        let (config, vocab, meta) = parse_config_text(cfg)?;
        let mut m = ModelState::new(config, vocab, 0)?;
        m.meta = meta;
        let data = &bytes[12 + cfg_len..];
        if data.len() != m.params.numel() * 8 {
            return Err(Error::Corrupt(format!(
                "expected {} parameter bytes, found {}",
                m.params.numel() * 8,
                data.len()
            )));
        }
        let mut chunks = data.chunks_exact(8);
        let ids: Vec<_> = m.params.ids().collect();
        for id in ids {
            for v in m.params.value_mut(id).data_mut() {
                *v = f64::from_le_bytes(chunks.next().unwrap().try_into().unwrap());
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

enum Init {
    Randn,
    Zero,
    One,
}

fn parse_config_text(text: &str) -> Result<(ModelConfig, Vocab, Vec<(String, String)>)> {
    let corrupt = |m: String| Error::Corrupt(m);
    let mut cfg = ModelConfig::new(0);
    let mut vocab = None;
    let mut meta = Vec::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corrupt(format!("config line {line:?}")))?;
        let num = || {
            v.parse::<usize>()
                .map_err(|_| corrupt(format!("bad value for {k}: {v:?}")))
        };
        let float = || {
            v.parse::<f64>()
                .map_err(|_| corrupt(format!("bad value for {k}: {v:?}")))
        };
        match k {
            "layers" => cfg.layers = num()?,
            "hidden" => cfg.hidden = num()?,
            "heads" => cfg.heads = num()?,
            "ffn" => cfg.ffn = num()?,
            "max_len" => cfg.max_len = num()?,
            "vs" => cfg.vs = num()?,
            "dropout" => cfg.dropout = float()?,
            "policy_dropout" => cfg.policy_dropout = float()?,
            "vocab" => {
                let chars = v
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|h| {
                        u32::from_str_radix(h, 16)
                            .ok()
                            .and_then(char::from_u32)
                            .ok_or_else(|| corrupt(format!("bad vocab entry {h:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                vocab = Some(Vocab::new(chars)?);
            }
            _ => match k.strip_prefix("meta.") {
                Some(mk) => meta.push((mk.to_string(), v.to_string())),
                None => return Err(corrupt(format!("unknown config key {k:?}"))),
            },
        }
    }
    let vocab = vocab.ok_or_else(|| corrupt("config has no vocab".into()))?;
    Ok((cfg, vocab, meta))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Inverted dropout; identity when `rng` is `None` or `p == 0`.
pub fn dropout(g: &mut Graph, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    let Some(rng) = rng else { return x };
    if p <= 0.0 {
        return x;
    }
    let shape = g.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - p);
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let m = g.constant(Tensor::new(shape, mask).expect("shape"));
    g.mul(x, m).expect("same shape")
}
