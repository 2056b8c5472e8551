//! The `amtl` command line.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::corrector::{correct_explained, correct_fast_explained, Correction};
use crate::dataset::{self, PairRecord};
use crate::error::{Error, Result};
use crate::eval::{self, EvalConfig, EvalPair, EvalReport};
use crate::model::{Group, ModelState};
use crate::policy;
use crate::toy;
use crate::train::{self, Phase};
use crate::vocab::{toy_chars, TokenSeq, Vocab};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Seed offset for the sentences behind policy supervision.
const POLICY_SEED_OFFSET: u64 = 0x5eed_0002;

#[derive(Parser, Debug)]
#[command(
    name = "amtl",
    version,
    about = "Adversarial multi-task text correction"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate toy sentences, or corrupted pairs with --pairs.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Number of sentences (defaults to corpus_size).
        #[arg(long)]
        n: Option<usize>,
        /// Write `corrupted<TAB>clean<TAB>start<TAB>end` lines.
        #[arg(long)]
        pairs: bool,
    },
    /// Train encoder, masked-LM and scoring heads.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        phase: Option<String>,
        /// Clean sentences, one per line (generated when absent).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Held-out pair file (generated when absent).
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        topk: Option<usize>,
    },
    /// Train the policy head of a trained checkpoint.
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Supervision cache: read when present, written otherwise.
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Correct sentences from a file or stdin, one per line.
    Correct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Checkpoint whose policy head replaces the model's.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        fast: bool,
        /// Append the chosen span, mask count and score.
        #[arg(long)]
        explain: bool,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        input: Option<PathBuf>,
    },
    /// Held-out metrics of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Pair file (generated like `train` does when absent).
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Training corpus the generated held-out set must avoid.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        topk: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
        /// Also compare the policy fast path with full search.
        #[arg(long)]
        fast: bool,
        /// Detection and masked-LM metrics only.
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first) and runs the command against the
/// given streams. Returns the process exit code.
pub fn run_with(
    argv: &[String],
    stdin: &mut dyn Read,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(stdout, "{text}")
            } else {
                write!(stderr, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli.cmd, stdin, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            match e {
                Error::Config(_) => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

/// [`run_with`] on the process streams.
pub fn run(argv: &[String]) -> i32 {
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    let mut out = std::io::BufWriter::new(stdout.lock());
    let code = run_with(argv, &mut stdin.lock(), &mut out, &mut stderr.lock());
    let _ = out.flush();
    code
}

fn resolve(common: &Common, tweak: impl FnOnce(&mut RunConfig) -> Result<()>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    tweak(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn echo(stderr: &mut dyn Write, verb: &str, cfg: &RunConfig) {
    let _ = writeln!(stderr, "# amtl {verb}");
    for (k, v) in cfg.to_pairs() {
        let _ = writeln!(stderr, "# {k}={v}");
    }
}

fn meta(verb: &str, cfg: &RunConfig) -> Vec<(String, String)> {
    std::iter::once(("command".to_string(), verb.to_string()))
        .chain(cfg.to_pairs())
        .collect()
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// The toy vocabulary when it covers `lines`, otherwise one built from them.
fn vocab_for(lines: &[String]) -> Result<Vocab> {
    let toy = toy_chars();
    if lines.iter().all(|l| l.chars().all(|c| toy.contains(&c))) {
        Ok(Vocab::toy())
    } else {
        Vocab::from_texts(lines.iter().map(String::as_str))
    }
}

fn load_corpus(path: Option<&Path>, cfg: &RunConfig) -> Result<(Vec<TokenSeq>, Vocab)> {
    match path {
        Some(p) => {
            let lines = dataset::read_lines(p)?;
            if lines.is_empty() {
                return Err(Error::EmptyCorpus);
            }
            let vocab = vocab_for(&lines)?;
            let seqs = lines
                .iter()
                .map(|l| vocab.encode(l))
                .collect::<Result<Vec<_>>>()?;
            Ok((seqs, vocab))
        }
        None => Ok((
            toy::generate_corpus(cfg.train.seed, cfg.corpus_size)?,
            Vocab::toy(),
        )),
    }
}

fn load_pairs(path: &Path, vocab: &Vocab) -> Result<Vec<EvalPair>> {
    dataset::read_pairs(path)?
        .iter()
        .map(|r| EvalPair::from_pair(r, vocab))
        .collect()
}

/// Training sentences and held-out pairs. A user corpus gives up its last
/// `min(heldout_size, n / 10)` sentences; the toy corpus draws fresh ones.
fn split_data(
    corpus: Option<&Path>,
    pairs: Option<&Path>,
    cfg: &RunConfig,
) -> Result<(Vec<TokenSeq>, Vocab, Vec<EvalPair>)> {
    let (mut seqs, vocab) = load_corpus(corpus, cfg)?;
    if let Some(p) = pairs {
        let held = load_pairs(p, &vocab)?;
        return Ok((seqs, vocab, held));
    }
    let held = if corpus.is_some() {
        let n = cfg.heldout_size.min(seqs.len() / 10);
        let tail = seqs.split_off(seqs.len() - n);
        eval::make_pairs(
            &tail,
            &vocab,
            cfg.train.seed.wrapping_add(eval::HELDOUT_SEED_OFFSET),
        )?
    } else {
        eval::heldout_pairs(cfg.train.seed, cfg.heldout_size, &seqs, &vocab)?
    };
    if seqs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok((seqs, vocab, held))
}

fn load_model(model: &Path, policy: Option<&Path>) -> Result<ModelState> {
    let mut m = ModelState::load(model)?;
    if let Some(p) = policy {
        let pm = ModelState::load(p)?;
        m.copy_group_from(&pm, Group::Policy)?;
    }
    Ok(m)
}

fn quick_eval(cfg: &EvalConfig) -> EvalConfig {
    EvalConfig {
        restoration: false,
        fast_path: false,
        ..cfg.clone()
    }
}

fn dispatch(
    cmd: Command,
    stdin: &mut dyn Read,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<()> {
    match cmd {
        Command::GenCorpus {
            common,
            out,
            n,
            pairs,
        } => {
            let cfg = resolve(&common, |c| {
                if let Some(n) = n {
                    c.corpus_size = n;
                }
                Ok(())
            })?;
            echo(stderr, "gen-corpus", &cfg);
            let vocab = Vocab::toy();
            let seqs = toy::generate_corpus(cfg.train.seed, cfg.corpus_size)?;
            let meta = meta("gen-corpus", &cfg);
            if pairs {
                let recs = eval::make_pairs(
                    &seqs,
                    &vocab,
                    cfg.train.seed.wrapping_add(eval::HELDOUT_SEED_OFFSET),
                )?;
                let lines = recs
                    .iter()
                    .map(|p| {
                        Ok(PairRecord {
                            corrupted: vocab.decode(&p.corrupted)?,
                            clean: vocab.decode(&p.clean)?,
                            span_start: p.span.0,
                            span_end: p.span.1,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                dataset::write_pairs(&out, &meta, &lines)?;
            } else {
                let lines = seqs
                    .iter()
                    .map(|s| vocab.decode(s))
                    .collect::<Result<Vec<_>>>()?;
                dataset::write_lines(&out, &meta, lines)?;
            }
            let _ = writeln!(stdout, "wrote {} lines to {}", seqs.len(), out.display());
            Ok(())
        }
        Command::Train {
            common,
            out,
            phase,
            corpus,
            heldout: heldout_path,
            topk,
        } => {
            let cfg = resolve(&common, |c| {
                if let Some(p) = &phase {
                    c.train.phase = p.parse::<Phase>()?;
                }
                if let Some(k) = topk {
                    c.eval.topk = k;
                }
                Ok(())
            })?;
            echo(stderr, "train", &cfg);
            let (corpus, vocab, held) =
                split_data(corpus.as_deref(), heldout_path.as_deref(), &cfg)?;
            let mc = cfg.model.model_config(vocab.size())?;
            let (mut model, log) = train::train(&corpus, mc, vocab, &cfg.train)?;
            model.meta.push(("topk".into(), cfg.eval.topk.to_string()));
            model.save(&out)?;
            let meta = meta("train", &cfg);
            log.write_csv(&sidecar(&out, ".log.csv"), &meta)?;
            let mut rep = eval::evaluate(&model, &held, &quick_eval(&cfg.eval))?;
            rep.config = cfg.to_pairs();
            rep.write(&sidecar(&out, ".metrics.txt"))?;
            write!(stdout, "{}", rep.to_table()).map_err(|e| Error::io(&out, e))?;
            Ok(())
        }
        Command::TrainPolicy {
            common,
            model,
            out,
            corpus,
            cache,
            width,
            depth,
        } => {
            let cfg = resolve(&common, |c| {
                if let Some(w) = width {
                    c.corrector.width = w;
                }
                if let Some(d) = depth {
                    c.corrector.depth = d;
                }
                Ok(())
            })?;
            echo(stderr, "train-policy", &cfg);
            let mut m = ModelState::load(&model)?;
            let data = match cache.as_deref().filter(|p| p.exists()) {
                Some(p) => policy::read_supervision(p, m.vocab())?,
                None => {
                    let clean = match corpus.as_deref() {
                        Some(p) => load_corpus(Some(p), &cfg)?.0,
                        None => toy::generate_corpus(
                            cfg.train.seed.wrapping_add(POLICY_SEED_OFFSET),
                            cfg.policy_samples,
                        )?,
                    };
                    let (data, skipped) =
                        policy::build_supervision(&clean, &m, &cfg.corrector, &cfg.policy)?;
                    let _ = writeln!(
                        stderr,
                        "# supervision: {} samples, {skipped} skipped",
                        data.len()
                    );
                    if let Some(p) = cache.as_deref() {
                        policy::write_supervision(
                            p,
                            &meta("train-policy", &cfg),
                            &data,
                            m.vocab(),
                        )?;
                    }
                    data
                }
            };
            let losses = policy::fit_policy(&mut m, &data, &cfg.policy)?;
            m.meta
                .push(("policy_target".into(), cfg.policy.target.to_string()));
            m.save(&out)?;
            for (i, l) in losses.iter().enumerate() {
                let _ = writeln!(stdout, "policy epoch {i}: loss {l:.6}");
            }
            Ok(())
        }
        Command::Correct {
            common,
            model,
            policy,
            fast,
            explain,
            width,
            depth,
            out,
            input,
        } => {
            let cfg = resolve(&common, |c| {
                if let Some(w) = width {
                    c.corrector.width = w;
                }
                if let Some(d) = depth {
                    c.corrector.depth = d;
                }
                Ok(())
            })?;
            echo(stderr, "correct", &cfg);
            let m = load_model(&model, policy.as_deref())?;
            let text = match &input {
                Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
                None => {
                    let mut s = String::new();
                    stdin
                        .read_to_string(&mut s)
                        .map_err(|e| Error::io("<stdin>", e))?;
                    s
                }
            };
            let mut lines = Vec::new();
            for (n, raw) in text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.starts_with("#amtl"))
            {
                let raw = raw.strip_suffix('\r').unwrap_or(raw);
                let sentence = raw.split('\t').next().unwrap_or("");
                if sentence.is_empty() {
                    lines.push(String::new());
                    continue;
                }
                let seq = m
                    .vocab()
                    .encode(sentence)
                    .map_err(|e| Error::InvalidInput(format!("line {}: {e}", n + 1)))?;
                let c = if fast {
                    correct_fast_explained(&seq, &m, &cfg.corrector)
                } else {
                    correct_explained(&seq, &m, &cfg.corrector)
                }
                .map_err(|e| Error::InvalidInput(format!("line {}: {e}", n + 1)))?;
                lines.push(render_correction(&c, &m, explain)?);
            }
            match &out {
                Some(p) => dataset::write_lines(p, &meta("correct", &cfg), &lines)?,
                None => {
                    for l in &lines {
                        writeln!(stdout, "{l}").map_err(|e| Error::io("<stdout>", e))?;
                    }
                }
            }
            Ok(())
        }
        Command::Eval {
            common,
            model,
            policy,
            pairs,
            corpus,
            topk,
            width,
            depth,
            fast,
            quick,
            out,
        } => {
            let m = load_model(&model, policy.as_deref())?;
            let model_seed = m
                .meta
                .iter()
                .find(|(k, _)| k == "seed")
                .and_then(|(_, v)| v.parse::<u64>().ok());
            let model_topk = m
                .meta
                .iter()
                .find(|(k, _)| k == "topk")
                .and_then(|(_, v)| v.parse::<usize>().ok());
            let cfg = resolve(&common, |c| {
                if common.seed.is_none() {
                    if let Some(s) = model_seed {
                        c.set("seed", &s.to_string())?;
                    }
                }
                if let Some(k) = topk.or(model_topk) {
                    c.eval.topk = k;
                }
                if let Some(w) = width {
                    c.corrector.width = w;
                }
                if let Some(d) = depth {
                    c.corrector.depth = d;
                }
                c.eval.fast_path = fast;
                Ok(())
            })?;
            echo(stderr, "eval", &cfg);
            let held = match pairs.as_deref() {
                Some(p) => load_pairs(p, m.vocab())?,
                None => split_data(corpus.as_deref(), None, &cfg)?.2,
            };
            let ecfg = if quick {
                quick_eval(&cfg.eval)
            } else {
                cfg.eval.clone()
            };
            let mut rep: EvalReport = eval::evaluate(&m, &held, &ecfg)?;
            rep.config = cfg.to_pairs();
            if let Some(p) = &out {
                rep.write(p)?;
            }
            write!(stdout, "{}", rep.to_table()).map_err(|e| Error::io("<stdout>", e))?;
            Ok(())
        }
    }
}

fn render_correction(c: &Correction, m: &ModelState, explain: bool) -> Result<String> {
    let text = m.vocab().decode(&c.output)?;
    if !explain {
        return Ok(text);
    }
    let e = &c.chosen;
    let span = if e.identity {
        "identity".to_string()
    } else {
        format!("[{},{})", e.p_s, e.p_e)
    };
    Ok(format!(
        "{text}\tspan={span}\tnum={}\tnorm_score={:.6}",
        e.num, e.norm_score
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str], input: &str) -> (i32, String, String) {
        let argv: Vec<String> = std::iter::once("amtl")
            .chain(args.iter().copied())
            .map(String::from)
            .collect();
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with(&argv, &mut input.as_bytes(), &mut out, &mut err);
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(call(&[], "").0, EXIT_USAGE);
        assert_eq!(call(&["frobnicate"], "").0, EXIT_USAGE);
        assert_eq!(call(&["train"], "").0, EXIT_USAGE);
        assert_eq!(call(&["--help"], "").0, 0);
    }

    #[test]
    fn config_errors_exit_2() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("c.txt");
        let o = out.to_str().unwrap();
        let (code, _, err) = call(&["gen-corpus", "--out", o, "--set", "bogus=1"], "");
        assert_eq!(code, EXIT_CONFIG, "{err}");
        let (code, _, _) = call(&["train", "--out", o, "--phase", "both"], "");
        assert_eq!(code, EXIT_CONFIG);
    }

    #[test]
    fn runtime_errors_exit_3() {
        let (code, _, err) = call(&["correct", "--model", "/nonexistent/m.ckpt"], "");
        assert_eq!(code, EXIT_RUNTIME);
        assert!(err.contains("error:"));
    }

    #[test]
    fn gen_corpus_writes_header_and_lines() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("c.txt");
        let (code, _, err) = call(
            &[
                "gen-corpus",
                "--out",
                out.to_str().unwrap(),
                "--n",
                "5",
                "--seed",
                "3",
            ],
            "",
        );
        assert_eq!(code, 0, "{err}");
        assert!(err.contains("# seed=3"));
        let text = fs::read_to_string(&out).unwrap();
        assert!(text.starts_with("#amtl format_version=1\n#amtl command=gen-corpus\n"));
        assert_eq!(dataset::read_lines(&out).unwrap().len(), 5);
    }
}
