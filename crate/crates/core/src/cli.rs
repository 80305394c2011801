//! Command-line front end.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use crate::checkpoint;
use crate::config::{parse_value, DataKind, RunConfig};
use crate::data::{
    byte_decode, byte_encode, byte_entropy, dump_tasks, gen_niah, BlockStream, CorpusBatches,
    PasskeyStream, TaskKind, TaskSpec,
};
use crate::error::{Error, Result};
use crate::eval::{flop_audit, niah_sweep, perplexity, ttft_bench, SweepSpec};
use crate::model::{generate, ModelConfig, ModelParams};
use crate::trainer::{train, Trainer};

#[derive(Debug, Parser)]
#[command(
    name = "avey",
    version,
    about = "Train and evaluate a ranker + neural processor language model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// JSON config with flat dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set model.d=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config; writes metrics.tsv and checkpoint/ into --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Total optimizer steps (train.total_steps).
        #[arg(long)]
        steps: Option<usize>,
        /// Run seed (train.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Training corpus (data.corpus).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps in this invocation; the schedule still
        /// spans the total.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Perplexity on a corpus, against the order-0 byte baseline.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Evaluate only this trailing share of the corpus.
        #[arg(long, default_value_t = 1.0)]
        tail: f64,
        /// Cap on the number of blocks evaluated.
        #[arg(long)]
        max_blocks: Option<usize>,
    },
    /// Greedy continuation of a prompt.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
    },
    /// Passkey recall over haystack lengths and needle depths.
    Niah {
        /// Without a checkpoint only --dump is performed.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Lengths in tokens; a `C` suffix multiplies by the context width.
        #[arg(long, default_value = "2C,4C,8C,16C", value_delimiter = ',')]
        lengths: Vec<String>,
        #[arg(long, default_value = "0,0.25,0.5,0.75,1", value_delimiter = ',')]
        depths: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 9)]
        digits: usize,
        #[arg(long, default_value = "kv")]
        kind: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Evaluate with the ranker disabled.
        #[arg(long)]
        no_ranker: bool,
        /// Write the instances as JSON lines.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Write the sweep result as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Time to first token and counted operations against prompt length.
    BenchTtft {
        /// Checkpoint to load; otherwise a fresh model from the config.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(
            long,
            default_value = "1024,2048,4096,8192,16384",
            value_delimiter = ','
        )]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Instrumented counters of one training pass against the closed forms.
    FlopAudit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a checkpoint manifest summary.
    Inspect { ckpt: PathBuf },
}

fn overrides(args: &ConfigArgs) -> Result<Map<String, Value>> {
    args.set
        .iter()
        .map(|kv| {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{kv}`")))?;
            Ok((k.trim().to_string(), parse_value(v.trim())))
        })
        .collect()
}

fn resolve(args: &ConfigArgs, extra: Map<String, Value>) -> Result<RunConfig> {
    let mut flags = overrides(args)?;
    flags.extend(extra);
    RunConfig::resolve(args.config.as_deref(), &flags)
}

/// Token length from `"512"` or `"4C"`.
pub fn parse_length(s: &str, context: usize) -> Result<usize> {
    let s = s.trim();
    let (num, mult) = match s.strip_suffix(['C', 'c']) {
        Some(n) => (n, context),
        None => (s, 1),
    };
    num.parse::<usize>()
        .map(|n| n * mult)
        .map_err(|_| Error::Config(format!("bad length `{s}`")))
}

fn corpus_split(bytes: &[u8], holdout: f64) -> (&[u8], &[u8]) {
    let cut = ((bytes.len() as f64) * (1.0 - holdout.clamp(0.0, 1.0))) as usize;
    bytes.split_at(cut)
}

fn stream_for(cfg: &RunConfig) -> Result<Box<dyn BlockStream>> {
    let n = cfg.model.seq_len;
    match cfg.data.kind {
        DataKind::Passkey => Ok(Box::new(PasskeyStream::new(
            n,
            cfg.data.value_digits,
            cfg.train.seed,
        ))),
        DataKind::Corpus => {
            let path = cfg
                .data
                .corpus
                .as_ref()
                .ok_or_else(|| Error::Config("data.corpus (or --corpus) is required".into()))?;
            let bytes = fs::read(path)?;
            let (head, _) = corpus_split(&bytes, cfg.data.holdout);
            Ok(Box::new(CorpusBatches::new(head, n, cfg.train.seed)?))
        }
    }
}

fn cmd_train(
    cfg: RunConfig,
    out: &Path,
    resume: bool,
    stop_after: Option<usize>,
    stdout: &mut dyn Write,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let ckpt = out.join("checkpoint");
    let mut trainer = if resume {
        let mut t = checkpoint::load::<f32>(&ckpt)?;
        t.cfg.total_steps = cfg.train.total_steps;
        t
    } else {
        Trainer::<f32>::new(cfg.model.clone(), cfg.train.clone())?
    };
    fs::write(out.join("config.json"), cfg.to_json() + "\n")?;
    let mut stream = stream_for(&cfg)?;
    let metrics = fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(out.join("metrics.tsv"))?;
    let mut metrics = BufWriter::new(metrics);
    writeln!(
        stdout,
        "training {} parameters for {} steps",
        trainer.params.parameter_count(),
        trainer.cfg.total_steps
    )?;
    let every = trainer.cfg.checkpoint_every;
    let result = train(
        &mut trainer,
        stream.as_mut(),
        stop_after,
        &mut metrics,
        |t, log| {
            if every > 0 && t.state.step % every == 0 {
                checkpoint::save(&ckpt, t)?;
            }
            if log.step % 100 == 0 {
                eprintln!(
                    "step {}\tloss {:.4}\t{:.0} tok/s",
                    log.step, log.loss, log.tok_per_s
                );
            }
            Ok(())
        },
    );
    metrics.flush()?;
    match result {
        Ok(logs) => {
            checkpoint::save(&ckpt, &trainer)?;
            if let Some(last) = logs.last() {
                writeln!(
                    stdout,
                    "final step {} loss {:.4} ppl {:.3}",
                    last.step, last.loss, last.ppl
                )?;
            }
            Ok(())
        }
        // the last saved checkpoint is the last good state
        Err(e) => Err(e),
    }
}

fn cmd_eval(
    ckpt: &Path,
    corpus: &Path,
    tail: f64,
    max_blocks: Option<usize>,
    out: &mut dyn Write,
) -> Result<()> {
    let (model, params) = checkpoint::load_params::<f32>(ckpt)?;
    let bytes = fs::read(corpus)?;
    let (_, region) = corpus_split(&bytes, tail);
    let c = CorpusBatches::new(region, model.seq_len, 0)?;
    let mut blocks: Vec<Vec<usize>> = c
        .blocks()
        .iter()
        .map(|r| byte_encode(&region[r.clone()]))
        .collect();
    if let Some(m) = max_blocks {
        blocks.truncate(m);
    }
    let ppl = perplexity(&params, &model, &blocks)?;
    let base = byte_entropy(region).exp();
    writeln!(out, "blocks\t{}", blocks.len())?;
    writeln!(out, "perplexity\t{ppl:.4}")?;
    writeln!(out, "order0_perplexity\t{base:.4}")?;
    writeln!(out, "ratio\t{:.4}", ppl / base)?;
    Ok(())
}

fn task_kind(s: &str) -> Result<TaskKind> {
    match s {
        "kv" | "passkey_kv" => Ok(TaskKind::PasskeyKv),
        "numeric" | "passkey_numeric" => Ok(TaskKind::PasskeyNumeric),
        _ => Err(Error::Config(format!("unknown task kind `{s}`"))),
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> Result<i32>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                write!(out, "{e}")?;
            } else {
                eprint!("{e}");
            }
            return Ok(code);
        }
    };
    match cli.command {
        Command::Train {
            cfg,
            out: dir,
            steps,
            seed,
            corpus,
            resume,
            stop_after,
        } => {
            let mut extra = Map::new();
            if let Some(s) = steps {
                extra.insert("train.total_steps".into(), s.into());
            }
            if let Some(s) = seed {
                extra.insert("train.seed".into(), s.into());
            }
            if let Some(c) = corpus {
                extra.insert(
                    "data.corpus".into(),
                    c.to_string_lossy().into_owned().into(),
                );
            }
            cmd_train(resolve(&cfg, extra)?, &dir, resume, stop_after, out)?;
        }
        Command::Eval {
            ckpt,
            corpus,
            tail,
            max_blocks,
        } => cmd_eval(&ckpt, &corpus, tail, max_blocks, out)?,
        Command::Generate {
            ckpt,
            prompt,
            max_new,
        } => {
            let (model, params) = checkpoint::load_params::<f32>(&ckpt)?;
            let toks = generate(&params, &model, &byte_encode(&prompt), max_new)?;
            writeln!(out, "{}", byte_decode(&toks))?;
        }
        Command::Niah {
            ckpt,
            lengths,
            depths,
            n,
            digits,
            kind,
            max_new,
            seed,
            no_ranker,
            dump,
            json,
            cfg,
        } => {
            let (mut model, params) = match &ckpt {
                Some(p) => {
                    let (m, p) = checkpoint::load_params::<f32>(p)?;
                    (m, Some(p))
                }
                None => (resolve(&cfg, Map::new())?.model, None),
            };
            model.ablations.no_ranker |= no_ranker;
            let context = model.context();
            let lengths = lengths
                .iter()
                .map(|l| parse_length(l, context))
                .collect::<Result<Vec<_>>>()?;
            let spec = SweepSpec {
                kind: task_kind(&kind)?,
                lengths,
                depths,
                n_per_cell: n,
                value_digits: digits,
                max_new,
                seed,
            };
            if let Some(path) = &dump {
                let mut f = BufWriter::new(File::create(path)?);
                for (di, &depth) in spec.depths.iter().enumerate() {
                    for (li, &len) in spec.lengths.iter().enumerate() {
                        let insts: Vec<_> = (0..n)
                            .map(|i| {
                                let seed =
                                    seed ^ ((di as u64) << 48) ^ ((li as u64) << 32) ^ i as u64;
                                gen_niah(&TaskSpec {
                                    kind: spec.kind,
                                    haystack_len: len,
                                    needle_depth: depth,
                                    value_digits: digits,
                                    key_len: 4,
                                    seed,
                                })
                            })
                            .collect();
                        dump_tasks(&mut f, &insts)?;
                    }
                }
                f.flush()?;
            }
            if let Some(params) = params {
                let tag = if model.ablations.no_ranker {
                    "no_ranker"
                } else {
                    "full"
                };
                let r = niah_sweep(&params, &model, &spec, tag)?;
                write!(out, "{}", r.grid())?;
                write!(out, "{}", r.heatmap())?;
                let (acc, cnt) = r.outside_window_accuracy();
                writeln!(
                    out,
                    "needle outside window: {cnt} instances, accuracy {acc:.3}"
                )?;
                if let Some(p) = json {
                    fs::write(p, serde_json::to_string_pretty(&r)? + "\n")?;
                }
            } else if dump.is_none() {
                return Err(Error::Config("niah needs --ckpt or --dump".into()));
            }
        }
        Command::BenchTtft {
            ckpt,
            lengths,
            repeats,
            cfg,
        } => {
            let (model, params): (ModelConfig, ModelParams<f32>) = match ckpt {
                Some(p) => checkpoint::load_params(&p)?,
                None => {
                    let rc = resolve(&cfg, Map::new())?;
                    let p = ModelParams::init(&rc.model, rc.train.seed)?;
                    (rc.model, p)
                }
            };
            let r = ttft_bench(&params, &model, &lengths, repeats, 0)?;
            write!(out, "{}", r.tsv())?;
            writeln!(out, "flop_slope\t{:.4}", r.flop_slope)?;
            writeln!(out, "time_slope\t{:.4}", r.time_slope)?;
        }
        Command::FlopAudit { cfg, seed } => {
            let rc = resolve(&cfg, Map::new())?;
            let audit = flop_audit(&rc.model, seed)?;
            write!(out, "{}", audit.report())?;
            if !audit.passed() {
                return Ok(1);
            }
        }
        Command::Inspect { ckpt } => {
            let m = checkpoint::read_manifest(&ckpt)?;
            writeln!(out, "format_version\t{}", m.format_version)?;
            writeln!(out, "step\t{}", m.step)?;
            writeln!(out, "rng\tseed={} cursor={}", m.rng.seed, m.rng.cursor)?;
            writeln!(out, "parameters\t{}", m.parameter_count())?;
            writeln!(out, "model\t{}", serde_json::to_string(&m.model)?)?;
            writeln!(out, "train\t{}", serde_json::to_string(&m.train)?)?;
            for t in &m.tensors {
                writeln!(out, "{}\t{:?}\t{}\t{}", t.name, t.shape, t.dtype, t.offset)?;
            }
        }
    }
    Ok(0)
}
