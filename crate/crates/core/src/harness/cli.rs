//! The `zamjit` command line.

use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::{
    bench, corpus_segments, diff_segment, gen, load_program, run_segment, Engine, HarnessError,
    RunConfig, Verdict, CORPUS,
};
use crate::bytecode::{self, disassemble};
use crate::chunk_pool::{DEFAULT_CHUNK_WORDS, DEFAULT_POOL_WORDS};
use crate::interpreter::Outcome;
use crate::runtime::{DEFAULT_STACK_WORDS, DEFAULT_YOUNG_WORDS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INVALID: i32 = 3;

pub const SEED_ENV: &str = "ZAMJIT_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "zamjit",
    version,
    about = "Stack-machine VM with an interpreter and a JIT"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one program and print its result.
    Run {
        #[command(flatten)]
        opts: Opts,
        /// A .zasm file, or corpus:NAME for a bundled program.
        file: String,
    },
    /// Time programs on the interpreter and the JIT (default: bundled corpus).
    Bench {
        #[command(flatten)]
        opts: Opts,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        files: Vec<String>,
    },
    /// Check that both engines agree (default: bundled corpus).
    Diff {
        #[command(flatten)]
        opts: Opts,
        /// Also check this many generated programs, seeded by --seed.
        #[arg(long)]
        random: Option<usize>,
        files: Vec<String>,
    },
    /// Print a program back as assembly.
    Disasm {
        #[command(flatten)]
        opts: Opts,
        file: String,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EngineArg {
    Interp,
    Jit,
}

#[derive(Args, Debug)]
struct Opts {
    #[arg(long, value_enum, default_value = "jit")]
    engine: EngineArg,
    /// Code pool size in words; 0 disables the JIT.
    #[arg(long = "pool-size", default_value_t = DEFAULT_POOL_WORDS)]
    pool_size: usize,
    /// Chunk size in words.
    #[arg(long = "chunk-size", default_value_t = DEFAULT_CHUNK_WORDS)]
    chunk_size: usize,
    /// Box every float result, even inside primitive chains.
    #[arg(long = "no-float-opt")]
    no_float_opt: bool,
    /// Print compiled ops per batch to stderr.
    #[arg(long = "dump-jit")]
    dump_jit: bool,
    /// Print counters as key=value lines to stderr.
    #[arg(long)]
    stats: bool,
    /// Generator seed; ZAMJIT_SEED takes precedence.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stack size in values.
    #[arg(long = "stack-size", default_value_t = DEFAULT_STACK_WORDS)]
    stack_size: usize,
    /// Minor heap size in words.
    #[arg(long = "minor-heap-size", default_value_t = DEFAULT_YOUNG_WORDS)]
    minor_heap_size: usize,
    /// Write the main output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Opts {
    fn config(&self) -> Result<RunConfig, HarnessError> {
        let seed = match std::env::var(SEED_ENV) {
            Ok(s) => s
                .trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("{SEED_ENV}={s} is not an integer")))?,
            Err(_) => self.seed,
        };
        let config = RunConfig {
            engine: match self.engine {
                EngineArg::Interp => Engine::Interp,
                EngineArg::Jit => Engine::Jit,
            },
            float_opt: !self.no_float_opt,
            chunk_words: self.chunk_size,
            pool_words: self.pool_size,
            stack_words: self.stack_size,
            young_words: self.minor_heap_size,
            stats: self.stats,
            dump_jit: self.dump_jit,
            seed,
        };
        config.check()?;
        Ok(config)
    }
}

fn exit_code(e: &HarnessError) -> i32 {
    match e {
        HarnessError::Asm { .. } => EXIT_INVALID,
        HarnessError::Io { .. } | HarnessError::Config(_) => EXIT_USAGE,
    }
}

/// Entry point of the binary: parses `args` (program name first) and
/// returns the process exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = io::stdout();
    let stderr = io::stderr();
    cli_run(args, &mut stdout.lock(), &mut stderr.lock())
}

/// [`cli_main`] with explicit output streams.
pub fn cli_run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(text.as_bytes())
            } else {
                stdout.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let opts = match &cli.command {
        Command::Run { opts, .. }
        | Command::Bench { opts, .. }
        | Command::Diff { opts, .. }
        | Command::Disasm { opts, .. } => opts,
    };
    let config = match opts.config() {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(stderr, "zamjit: {e}");
            return exit_code(&e);
        }
    };
    let mut file;
    let out: &mut dyn Write = match &opts.out {
        Some(path) => match File::create(path) {
            Ok(f) => {
                file = f;
                &mut file
            }
            Err(e) => {
                let _ = writeln!(stderr, "zamjit: {}: {e}", path.display());
                return EXIT_USAGE;
            }
        },
        None => stdout,
    };
    let result = match &cli.command {
        Command::Run { file, .. } => cmd_run(file, &config, out, stderr),
        Command::Bench { repeats, files, .. } => cmd_bench(files, *repeats, &config, out, stderr),
        Command::Diff { random, files, .. } => cmd_diff(files, *random, &config, out, stderr),
        Command::Disasm { file, .. } => cmd_disasm(file, out),
    };
    let code = result.unwrap_or_else(|e| {
        let _ = writeln!(stderr, "zamjit: {e}");
        exit_code(&e)
    });
    let _ = out.flush();
    code
}

fn cmd_run(
    path: &str,
    config: &RunConfig,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32, HarnessError> {
    let seg = load_program(path)?;
    let report = run_segment(&seg, config);
    if let Some(why) = &report.fallback {
        let _ = writeln!(err, "zamjit: {why}");
    }
    for batch in &report.dump {
        let _ = writeln!(err, "{batch}");
    }
    let _ = out.write_all(&report.output);
    let code = match &report.outcome {
        Outcome::Finished { .. } => {
            let _ = writeln!(out, "{}", report.value_text);
            EXIT_OK
        }
        Outcome::RuntimeError { kind, pc, message } => {
            let at = match pc {
                Some(c) => format!("{}:{}", c.seg, c.ofs),
                None => "compiled code".to_string(),
            };
            let _ = writeln!(err, "{kind:?} at {at}: {message}");
            EXIT_RUNTIME
        }
    };
    if config.stats {
        let _ = write!(err, "{}", report.stats);
    }
    Ok(code)
}

fn named_segments(files: &[String]) -> Result<Vec<(String, bytecode::Segment)>, HarnessError> {
    if files.is_empty() {
        return Ok(corpus_segments());
    }
    files
        .iter()
        .map(|f| load_program(f).map(|s| (s.source_name.clone(), s)))
        .collect()
}

fn cmd_bench(
    files: &[String],
    repeats: usize,
    config: &RunConfig,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32, HarnessError> {
    if repeats == 0 {
        return Err(HarnessError::Config("--repeats must be at least 1".into()));
    }
    let programs = named_segments(files)?;
    let report = bench(&programs, config, repeats);
    let _ = write!(err, "{}", report.to_table());
    let _ = out.write_all(report.to_tsv().as_bytes());
    Ok(if report.failures.is_empty() {
        EXIT_OK
    } else {
        EXIT_RUNTIME
    })
}

fn cmd_diff(
    files: &[String],
    random: Option<usize>,
    config: &RunConfig,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32, HarnessError> {
    let mut programs = match (files.is_empty(), random) {
        (true, Some(_)) => Vec::new(),
        _ => named_segments(files)?,
    };
    if let Some(n) = random {
        for (i, src) in gen::random_corpus(config.seed, n).iter().enumerate() {
            let name = format!("random-{}-{i}", config.seed);
            let seg = bytecode::load(src, &name).map_err(|source| HarnessError::Asm {
                name: name.clone(),
                source,
            })?;
            programs.push((name, seg));
        }
    }
    let mut mismatches = 0;
    for (name, seg) in &programs {
        match diff_segment(seg, config) {
            Verdict::Match => {
                let _ = writeln!(out, "{name}\tmatch");
            }
            Verdict::Mismatch(why) => {
                mismatches += 1;
                let _ = writeln!(out, "{name}\tMISMATCH\t{why}");
            }
        }
    }
    let _ = writeln!(
        err,
        "{} programs, {} mismatches",
        programs.len(),
        mismatches
    );
    Ok(if mismatches == 0 {
        EXIT_OK
    } else {
        EXIT_RUNTIME
    })
}

fn cmd_disasm(path: &str, out: &mut dyn Write) -> Result<i32, HarnessError> {
    let seg = load_program(path)?;
    let text = disassemble(&seg).map_err(|e| HarnessError::Config(e.to_string()))?;
    let _ = out.write_all(text.as_bytes());
    Ok(EXIT_OK)
}

/// Names accepted as `corpus:NAME` program paths.
pub fn corpus_names() -> Vec<&'static str> {
    CORPUS.iter().map(|(n, _)| *n).collect()
}
