//! Running programs on either engine, comparing engines, and benchmarking.

pub mod cli;
pub mod gen;

use std::fmt;
use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::bytecode::{self, AsmError, Segment};
use crate::chunk_pool::{DEFAULT_CHUNK_WORDS, DEFAULT_POOL_WORDS};
use crate::interpreter::{interpret, Outcome};
use crate::jit::{Jit, JitConfig};
use crate::runtime::{
    ErrorKind, StatCounters, Vm, VmConfig, DEFAULT_MAJOR_LIMIT_WORDS, DEFAULT_STACK_WORDS,
    DEFAULT_YOUNG_WORDS,
};

pub use cli::cli_main;

/// The bundled benchmark corpus, as `(name, source)`.
pub const CORPUS: &[(&str, &str)] = &[
    ("quicksort", include_str!("../../corpus/quicksort.zasm")),
    ("fftlike", include_str!("../../corpus/fftlike.zasm")),
    ("almaloop", include_str!("../../corpus/almaloop.zasm")),
    ("boyerlike", include_str!("../../corpus/boyerlike.zasm")),
    ("soli-small", include_str!("../../corpus/soli-small.zasm")),
    ("curry", include_str!("../../corpus/curry.zasm")),
];

pub fn corpus_program(name: &str) -> Option<&'static str> {
    CORPUS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    Interp,
    Jit,
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::Interp => "interp",
            Engine::Jit => "jit",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunConfig {
    pub engine: Engine,
    pub float_opt: bool,
    pub chunk_words: usize,
    pub pool_words: usize,
    pub stack_words: usize,
    pub young_words: usize,
    pub stats: bool,
    pub dump_jit: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            engine: Engine::Jit,
            float_opt: true,
            chunk_words: DEFAULT_CHUNK_WORDS,
            pool_words: DEFAULT_POOL_WORDS,
            stack_words: DEFAULT_STACK_WORDS,
            young_words: DEFAULT_YOUNG_WORDS,
            stats: false,
            dump_jit: false,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn vm_config(&self) -> VmConfig {
        VmConfig {
            stack_words: self.stack_words,
            young_words: self.young_words,
            major_limit_words: DEFAULT_MAJOR_LIMIT_WORDS,
        }
    }

    pub fn jit_config(&self) -> JitConfig {
        JitConfig {
            float_opt: self.float_opt,
            chunk_words: self.chunk_words,
            pool_words: self.pool_words,
            dump: self.dump_jit,
        }
    }

    /// Rejects pool geometries the chunk pool would refuse.
    pub fn check(&self) -> Result<(), HarnessError> {
        if self.pool_words > 0 {
            crate::chunk_pool::ChunkPool::new(0, self.chunk_words)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            if !self.pool_words.is_multiple_of(self.chunk_words) {
                return Err(HarnessError::Config(format!(
                    "pool size {} is not a multiple of the chunk size {}",
                    self.pool_words, self.chunk_words
                )));
            }
        }
        if self.stack_words == 0 || self.young_words < 16 {
            return Err(HarnessError::Config("stack or minor heap too small".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{name}: {source}")]
    Asm { name: String, source: AsmError },
    #[error("{0}")]
    Config(String),
}

/// Everything observable about one run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub outcome: Outcome,
    /// Structural rendering of the result value (empty on error).
    pub value_text: String,
    pub output: Vec<u8>,
    pub stats: StatCounters,
    pub seconds: f64,
    /// Why the JIT was bypassed, if it was.
    pub fallback: Option<String>,
    pub dump: Vec<String>,
}

impl RunReport {
    fn from_vm(vm: &Vm, outcome: Outcome, seconds: f64) -> RunReport {
        let value_text = outcome.result().map(|v| vm.describe(v)).unwrap_or_default();
        RunReport {
            outcome,
            value_text,
            output: vm.output.clone(),
            stats: vm.stats,
            seconds,
            fallback: None,
            dump: Vec::new(),
        }
    }
}

/// Reads and assembles a program, from a file or (`corpus:NAME`) the bundled corpus.
pub fn load_program(path: &str) -> Result<Segment, HarnessError> {
    let text = match path.strip_prefix("corpus:") {
        Some(name) => corpus_program(name)
            .ok_or_else(|| HarnessError::Config(format!("no bundled program `{name}`")))?
            .to_string(),
        None => std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_string(),
            source,
        })?,
    };
    let name = Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string());
    bytecode::load(&text, &name).map_err(|source| HarnessError::Asm { name, source })
}

fn run_interp(seg: &Segment, config: &RunConfig) -> RunReport {
    let mut vm = Vm::new(config.vm_config());
    let t = Instant::now();
    let outcome = interpret(&mut vm, seg);
    let seconds = t.elapsed().as_secs_f64();
    RunReport::from_vm(&vm, outcome, seconds)
}

/// Runs a validated segment. `seg` itself is never patched: the JIT works
/// on a private copy.
pub fn run_segment(seg: &Segment, config: &RunConfig) -> RunReport {
    if config.engine == Engine::Interp {
        return run_interp(seg, config);
    }
    if config.pool_words == 0 {
        let mut r = run_interp(seg, config);
        r.fallback = Some("JIT disabled by --pool-size=0; using the interpreter".into());
        return r;
    }
    let mut jit = match Jit::new(config.jit_config()) {
        Ok(j) => j,
        Err(e) => {
            let mut r = run_interp(seg, config);
            r.fallback = Some(format!("JIT unavailable ({e}); using the interpreter"));
            return r;
        }
    };
    let mut vm = Vm::new(config.vm_config());
    let copy = seg.fresh_copy();
    let t = Instant::now();
    let id = jit.load(copy);
    let outcome = jit.run(&mut vm, id);
    let seconds = t.elapsed().as_secs_f64();
    if outcome.error_kind() == Some(ErrorKind::PoolExhausted) {
        // start over from a pristine copy: the guest may already have
        // produced output or mutated globals
        let mut r = run_interp(seg, config);
        r.fallback = Some("JIT code pool exhausted; re-running on the interpreter".into());
        r.seconds += seconds;
        return r;
    }
    let mut r = RunReport::from_vm(&vm, outcome, seconds);
    r.dump = jit.take_dump();
    let _ = jit.release_bytecode(id);
    r
}

pub fn run_program(path: &str, config: &RunConfig) -> Result<RunReport, HarnessError> {
    let seg = load_program(path)?;
    Ok(run_segment(&seg, config))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Match,
    Mismatch(String),
}

impl Verdict {
    pub fn is_match(&self) -> bool {
        *self == Verdict::Match
    }
}

/// Compares the outcome kind, printed bytes and result of two runs.
pub fn compare_reports(a: &RunReport, b: &RunReport) -> Verdict {
    let kind = |r: &RunReport| r.outcome.error_kind();
    let mut diffs = Vec::new();
    if kind(a) != kind(b) {
        diffs.push(format!("outcome {:?} vs {:?}", kind(a), kind(b)));
    }
    if a.output != b.output {
        diffs.push(format!(
            "output {:?} vs {:?}",
            String::from_utf8_lossy(&a.output),
            String::from_utf8_lossy(&b.output)
        ));
    }
    if a.value_text != b.value_text {
        diffs.push(format!("result {} vs {}", a.value_text, b.value_text));
    }
    if diffs.is_empty() {
        Verdict::Match
    } else {
        Verdict::Mismatch(diffs.join("; "))
    }
}

/// Runs the interpreter and the JIT on separate pristine copies and compares.
pub fn diff_segment(seg: &Segment, config: &RunConfig) -> Verdict {
    let interp = run_segment(
        seg,
        &RunConfig {
            engine: Engine::Interp,
            ..*config
        },
    );
    let jit = run_segment(
        seg,
        &RunConfig {
            engine: Engine::Jit,
            ..*config
        },
    );
    compare_reports(&interp, &jit)
}

pub fn diff_engines(path: &str, config: &RunConfig) -> Result<Verdict, HarnessError> {
    let seg = load_program(path)?;
    Ok(diff_segment(&seg, config))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub name: String,
    pub t_interp: f64,
    pub t_jit: f64,
    pub t_jit_noopt: f64,
    pub sigma_jit: f64,
    pub sigma_opt: f64,
}

impl BenchRow {
    pub fn new(name: &str, t_interp: f64, t_jit: f64, t_jit_noopt: f64) -> BenchRow {
        BenchRow {
            name: name.to_string(),
            t_interp,
            t_jit,
            t_jit_noopt,
            sigma_jit: t_interp / t_jit,
            sigma_opt: t_jit_noopt / t_jit,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
    /// Programs whose row was dropped, with the reason.
    pub failures: Vec<(String, String)>,
}

pub const TSV_HEADER: &str = "name\tt_interp\tt_jit\tt_jit_noopt\tsigma_jit\tsigma_opt";

impl BenchReport {
    /// Machine-readable form. Floats are written in shortest round-trip form.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# repeats={}\n{TSV_HEADER}\n", self.repeats);
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.name, r.t_interp, r.t_jit, r.t_jit_noopt, r.sigma_jit, r.sigma_opt
            ));
        }
        s
    }

    pub fn parse_tsv(text: &str) -> Result<BenchReport, String> {
        let mut repeats = None;
        let mut rows = Vec::new();
        let mut header_seen = false;
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# repeats=") {
                repeats = Some(rest.trim().parse().map_err(|_| "bad repeats line")?);
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !header_seen {
                if line != TSV_HEADER {
                    return Err(format!("unexpected header `{line}`"));
                }
                header_seen = true;
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 6 {
                return Err(format!("expected 6 columns, found {}", cols.len()));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| format!("bad number `{s}`"));
            rows.push(BenchRow {
                name: cols[0].to_string(),
                t_interp: num(cols[1])?,
                t_jit: num(cols[2])?,
                t_jit_noopt: num(cols[3])?,
                sigma_jit: num(cols[4])?,
                sigma_opt: num(cols[5])?,
            });
        }
        if !header_seen {
            return Err("missing header".into());
        }
        Ok(BenchReport {
            repeats: repeats.unwrap_or(1),
            rows,
            failures: Vec::new(),
        })
    }

    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>12} {:>12} {:>12} {:>9} {:>9}\n",
            "program", "interp (s)", "jit (s)", "jit-noopt (s)", "σ_jit", "σ_opt"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<12} {:>12.6} {:>12.6} {:>12.6} {:>9.2} {:>9.2}\n",
                r.name, r.t_interp, r.t_jit, r.t_jit_noopt, r.sigma_jit, r.sigma_opt
            ));
        }
        for (name, why) in &self.failures {
            s.push_str(&format!("{name:<12} failed: {why}\n"));
        }
        s.push_str(&format!("best of {} runs\n", self.repeats));
        s
    }
}

fn timed(seg: &Segment, config: &RunConfig) -> Result<f64, String> {
    let r = run_segment(seg, config);
    if let Outcome::RuntimeError { kind, message, .. } = &r.outcome {
        return Err(format!("{kind:?}: {message}"));
    }
    Ok(r.seconds.max(f64::MIN_POSITIVE))
}

/// Times every program on the interpreter, the JIT, and the JIT without
/// float fusion, keeping the fastest of `repeats` runs for each. The three
/// configurations take turns within a repeat so that they see the same
/// machine conditions.
pub fn bench(programs: &[(String, Segment)], config: &RunConfig, repeats: usize) -> BenchReport {
    let repeats = repeats.max(1);
    let mut report = BenchReport {
        repeats,
        rows: Vec::new(),
        failures: Vec::new(),
    };
    let configs = [
        (Engine::Interp, true),
        (Engine::Jit, true),
        (Engine::Jit, false),
    ]
    .map(|(engine, float_opt)| RunConfig {
        engine,
        float_opt,
        ..*config
    });
    for (name, seg) in programs {
        let times = (0..repeats).try_fold([f64::INFINITY; 3], |mut best, _| {
            for (b, c) in best.iter_mut().zip(&configs) {
                *b = b.min(timed(seg, c)?);
            }
            Ok::<_, String>(best)
        });
        match times {
            Ok([ti, tj, tn]) => report.rows.push(BenchRow::new(name, ti, tj, tn)),
            Err(why) => report.failures.push((name.clone(), why)),
        }
    }
    report
}

/// The bundled corpus, assembled and validated.
pub fn corpus_segments() -> Vec<(String, Segment)> {
    CORPUS
        .iter()
        .map(|(name, src)| {
            let seg = bytecode::load(src, name).expect("bundled programs are valid");
            (name.to_string(), seg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn const7_on_both_engines() {
        let seg = bytecode::load("constint 7\nstop", "const7").unwrap();
        for engine in [Engine::Interp, Engine::Jit] {
            let r = run_segment(
                &seg,
                &RunConfig {
                    engine,
                    ..RunConfig::default()
                },
            );
            assert_eq!(r.value_text, "7");
            assert!(r.seconds > 0.0);
            assert!(r.fallback.is_none());
        }
        assert!(!seg.is_patched());
    }

    #[test]
    fn zero_pool_falls_back() {
        let seg = bytecode::load("constint 7\nstop", "const7").unwrap();
        let r = run_segment(
            &seg,
            &RunConfig {
                pool_words: 0,
                ..RunConfig::default()
            },
        );
        assert_eq!(r.value_text, "7");
        assert!(r.fallback.is_some());
    }

    #[test]
    fn tsv_round_trip() {
        let report = BenchReport {
            repeats: 5,
            rows: vec![
                BenchRow::new("a", 0.5, 0.25, 0.3),
                BenchRow::new("b", 1e-7, 3.3e-8, 0.1 + 0.2),
            ],
            failures: Vec::new(),
        };
        let text = report.to_tsv();
        assert_eq!(text.lines().nth(1), Some(TSV_HEADER));
        assert_eq!(BenchReport::parse_tsv(&text).unwrap(), report);
    }

    #[test]
    fn corpus_is_valid() {
        assert_eq!(corpus_segments().len(), CORPUS.len());
    }
}
