//! A synthetic character-level language with a decidable grammar, and the
//! single-span corruption procedure used to build wrong/correct pairs.
//!
//! Sentences are one to three clauses joined by conjunctions and closed by
//! `.`. Each clause is `[time] subject predicate` where the predicate obeys
//! selectional constraints: motion verbs take places, eating verbs take
//! foods, reading verbs take texts. Lexemes are 1–3 characters with no
//! separators, so membership is decided by a backtracking parse.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenSeq, Vocab};

pub const MIN_LEN: usize = 6;
pub const MAX_LEN: usize = 32;
pub const MAX_SPAN: usize = 4;

const SUBJECTS: &[&str] = &[
    "Ka", "Mo", "Tiv", "Ru", "Zel", "Bo", "Nyx", "Qi", "Ulf", "Jo", "Hal", "Vee", "Cyd", "Oz",
    "Pim", "Lux", "Gus", "Fen", "Ix",
];
const TIMES: &[&str] = &["Yst", "Tmr", "Nw", "Sn", "Dwn", "Ev", "Xm"];
const CONJS: &[&str] = &[",", "Af", "Ws"];
const MOTION_VERBS: &[&str] = &["go", "ran", "wik", "fly", "hop", "zip"];
const PREPS: &[&str] = &["to", "at", "in", "by"];
const PLACES: &[&str] = &["hub", "mar", "pok", "dun", "sel", "vaq", "izb", "cov"];
const EAT_VERBS: &[&str] = &["et", "chw", "gob", "sip", "mun"];
const ADJS: &[&str] = &["red", "hot", "ol", "wxy", "fej"];
const FOODS: &[&str] = &["pie", "fig", "nut", "jam", "bun", "kel", "qoa"];
const READ_VERBS: &[&str] = &["rd", "sk", "lrn", "vu"];
const NUMS: &[&str] = &["2", "3", "4", "5", "6", "7", "8", "9"];
const TEXTS: &[&str] = &["bk", "map", "zin", "poe", "tab", "hym"];
const END: &str = ".";

/// (verb class, optional modifier class, object class)
const PREDICATES: &[(&[&str], &[&str], &[&str])] = &[
    (MOTION_VERBS, PREPS, PLACES),
    (EAT_VERBS, ADJS, FOODS),
    (READ_VERBS, NUMS, TEXTS),
];

fn gen_clause(rng: &mut impl Rng, out: &mut String) {
    if rng.random_bool(0.3) {
        out.push_str(TIMES.choose(rng).unwrap());
    }
    out.push_str(SUBJECTS.choose(rng).unwrap());
    let (verbs, mods, objects) = PREDICATES.choose(rng).unwrap();
    out.push_str(verbs.choose(rng).unwrap());
    if rng.random_bool(0.5) {
        out.push_str(mods.choose(rng).unwrap());
    }
    out.push_str(objects.choose(rng).unwrap());
}

fn gen_sentence(rng: &mut impl Rng) -> String {
    loop {
        let clauses = match rng.random_range(0..10) {
            0..=3 => 1,
            4..=7 => 2,
            _ => 3,
        };
        let mut s = String::new();
        for c in 0..clauses {
            if c > 0 {
                s.push_str(CONJS.choose(rng).unwrap());
            }
            gen_clause(rng, &mut s);
        }
        s.push_str(END);
        let n = s.chars().count();
        if (MIN_LEN..=MAX_LEN).contains(&n) {
            return s;
        }
    }
}

/// `n` grammatical sentences as text; a pure function of `(seed, n)`.
pub fn generate_sentences(seed: u64, n: usize) -> Result<Vec<String>> {
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| gen_sentence(&mut rng)).collect())
}

/// `n` grammatical sentences encoded with [`Vocab::toy`].
pub fn generate_corpus(seed: u64, n: usize) -> Result<Vec<TokenSeq>> {
    let vocab = Vocab::toy();
    generate_sentences(seed, n)?
        .iter()
        .map(|s| vocab.encode(s))
        .collect()
}

// Membership: each rule maps a start offset to the set of reachable ends.

fn lex(s: &[char], pos: usize, class: &[&str]) -> Vec<usize> {
    class
        .iter()
        .filter_map(|w| {
            let n = w.chars().count();
            (pos + n <= s.len() && s[pos..pos + n].iter().copied().eq(w.chars())).then_some(pos + n)
        })
        .collect()
}

fn opt_lex(s: &[char], pos: usize, class: &[&str]) -> Vec<usize> {
    let mut ends = lex(s, pos, class);
    ends.push(pos);
    ends
}

fn then(s: &[char], starts: Vec<usize>, f: impl Fn(&[char], usize) -> Vec<usize>) -> Vec<usize> {
    let mut out: Vec<usize> = starts.into_iter().flat_map(|p| f(s, p)).collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn clause(s: &[char], pos: usize) -> Vec<usize> {
    let after_subj = then(s, opt_lex(s, pos, TIMES), |s, p| lex(s, p, SUBJECTS));
    let mut ends = Vec::new();
    for (verbs, mods, objects) in PREDICATES {
        let v = then(s, after_subj.clone(), |s, p| lex(s, p, verbs));
        let m = then(s, v, |s, p| opt_lex(s, p, mods));
        ends.extend(then(s, m, |s, p| lex(s, p, objects)));
    }
    ends.sort_unstable();
    ends.dedup();
    ends
}

/// Grammar membership oracle.
pub fn accepts(text: &str) -> bool {
    let s: Vec<char> = text.chars().collect();
    let mut frontier = clause(&s, 0);
    for _ in 1..3 {
        let more = then(&s, frontier.clone(), |s, p| {
            then(s, lex(s, p, CONJS), clause)
        });
        frontier.extend(more);
        frontier.sort_unstable();
        frontier.dedup();
    }
    frontier
        .into_iter()
        .any(|p| lex(&s, p, &[END]).contains(&s.len()))
}

/// A clean sentence and its single-span corruption.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErrorRecord {
    pub clean: TokenSeq,
    pub corrupted: TokenSeq,
    /// Half-open span of the replacement in `corrupted`.
    pub span_start: usize,
    pub span_end: usize,
    pub orig_len: usize,
    pub repl_len: usize,
}

/// Replaces one span of `1..=4` tokens by `0..=4` random content tokens.
pub fn inject_errors(s: &TokenSeq, vocab: &Vocab, seed: u64) -> Result<ErrorRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    inject_errors_with(s, vocab, &mut rng)
}

pub fn inject_errors_with(s: &TokenSeq, vocab: &Vocab, rng: &mut impl Rng) -> Result<ErrorRecord> {
    let k = s.len();
    if k < MIN_LEN {
        return Err(Error::TooShort {
            len: k,
            min: MIN_LEN,
        });
    }
    let orig_len = rng.random_range(1..=MAX_SPAN);
    let repl_len = rng.random_range(0..=MAX_SPAN);
    let start = rng.random_range(0..=k - orig_len);
    let content: Vec<TokenId> = vocab.content_ids().collect();
    let corrupted = loop {
        let repl: Vec<TokenId> = (0..repl_len)
            .map(|_| *content.choose(rng).unwrap())
            .collect();
        let c = s.splice(start, start + orig_len, &repl);
        if c != *s {
            break c;
        }
    };
    Ok(ErrorRecord {
        clean: s.clone(),
        corrupted,
        span_start: start,
        span_end: start + repl_len,
        orig_len,
        repl_len,
    })
}
