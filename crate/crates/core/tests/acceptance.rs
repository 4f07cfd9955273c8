//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to the
//! terminal (bypassing the test harness's output capture) before asserting.
//!
//! Tests take a shared lock so that the timing checks never run next to
//! another CPU-heavy test.

use std::io::Write as _;
use std::sync::{Mutex, MutexGuard};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use zamjit::bytecode::{load, Segment};
use zamjit::chunk_pool::DEFAULT_CHUNK_WORDS;
use zamjit::harness::cli::cli_run;
use zamjit::harness::gen::{random_corpus, CurryCase};
use zamjit::harness::{
    bench, compare_reports, corpus_segments, run_segment, Engine, RunConfig, Verdict,
};
use zamjit::runtime::{CodeAddr, Value, VmConfig};
use zamjit::{interpret, Jit, JitConfig, Vm};

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(name: &str, ok: bool, detail: &str) {
    let status = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{status}] {name}: {detail}");
}

fn config(engine: Engine) -> RunConfig {
    RunConfig {
        engine,
        ..RunConfig::default()
    }
}

#[test]
fn engine_equivalence() {
    let _g = serial();
    let mut programs: Vec<(String, Segment, RunConfig)> = corpus_segments()
        .into_iter()
        .map(|(n, s)| (n, s, RunConfig::default()))
        .collect();
    // a small nursery so that generated programs also exercise collection
    let small = RunConfig {
        young_words: 256,
        stack_words: 4096,
        ..RunConfig::default()
    };
    for (i, src) in random_corpus(0x5eed, 1000).iter().enumerate() {
        let seg = load(src, "generated").unwrap_or_else(|e| panic!("program {i}: {e}\n{src}"));
        programs.push((format!("generated-{i}"), seg, small));
    }

    let mut mismatches = Vec::new();
    let mut runs = 0;
    for (name, seg, base) in &programs {
        let interp = run_segment(
            seg,
            &RunConfig {
                engine: Engine::Interp,
                ..*base
            },
        );
        for float_opt in [true, false] {
            for chunk_words in [16, 256, DEFAULT_CHUNK_WORDS] {
                let cfg = RunConfig {
                    engine: Engine::Jit,
                    float_opt,
                    chunk_words,
                    pool_words: 64 * chunk_words,
                    ..*base
                };
                let jit = run_segment(seg, &cfg);
                runs += 1;
                if let Verdict::Mismatch(why) = compare_reports(&interp, &jit) {
                    mismatches.push(format!("{name} opt={float_opt} chunk={chunk_words}: {why}"));
                }
            }
        }
    }
    let ok = mismatches.is_empty();
    report(
        "engine equivalence",
        ok,
        &format!(
            "{} programs x 6 configurations, {runs} JIT runs, {} mismatches",
            programs.len(),
            mismatches.len()
        ),
    );
    assert!(ok, "{}", mismatches.join("\n"));
}

const FLOAT_CHAIN_LOOP: &str = "
global 0 = floatarray [1.5, 2.0]
global 1 = float 3.0
entry main
main:
    constint 100000
    push
loop:
    getglobal 1
    push
    getglobal 1
    push
    getglobal 1
    push
    constint 1
    push
    getglobal 0
    ccall caml_array_unsafe_get_float, 2
    ccall caml_mul_float, 2
    ccall caml_add_float, 2
    ccall caml_add_float, 2
    ccall caml_sqrt_float, 1
    acc 0
    offsetint -1
    assign 0
    acc 0
    branchif loop
    stop
";

#[test]
fn float_boxing_reduction() {
    let _g = serial();
    let n = 100_000u64;
    let seg = load(FLOAT_CHAIN_LOOP, "float-chain").unwrap();
    let interp = run_segment(&seg, &config(Engine::Interp));
    let jit = run_segment(&seg, &config(Engine::Jit));
    let noopt = run_segment(
        &seg,
        &RunConfig {
            float_opt: false,
            ..config(Engine::Jit)
        },
    );
    // the loop itself allocates nothing; every minor allocation is a float box
    let ok = interp.stats.minor_allocs == 5 * n
        && jit.stats.minor_allocs == n
        && jit.stats.boxes_elided == 4 * n
        && noopt.stats.minor_allocs == 5 * n
        && noopt.stats.boxes_elided == 0;
    report(
        "float boxing reduction",
        ok,
        &format!(
            "interp {} boxes, jit {} boxes ({} elided), jit without fusion {} boxes, N = {n}",
            interp.stats.minor_allocs,
            jit.stats.minor_allocs,
            jit.stats.boxes_elided,
            noopt.stats.minor_allocs
        ),
    );
    assert!(ok);
}

fn named(names: &[&str]) -> Vec<(String, Segment)> {
    corpus_segments()
        .into_iter()
        .filter(|(n, _)| names.contains(&n.as_str()))
        .collect()
}

#[test]
fn float_optimization_speedup() {
    let _g = serial();
    let rep = bench(&named(&["almaloop", "fftlike"]), &RunConfig::default(), 5);
    let ok = rep.failures.is_empty()
        && rep.rows.len() == 2
        && rep.rows.iter().all(|r| r.sigma_opt >= 1.10);
    let detail: Vec<String> = rep
        .rows
        .iter()
        .map(|r| format!("{} t_noopt/t_opt = {:.3}", r.name, r.sigma_opt))
        .collect();
    report("float optimization speedup >= 1.10", ok, &detail.join(", "));
    assert!(ok, "{}", rep.to_table());
}

#[test]
fn jit_versus_interpreter_speedup() {
    let _g = serial();
    let rep = bench(&named(&["quicksort", "almaloop"]), &RunConfig::default(), 5);
    let ok = rep.failures.is_empty()
        && rep.rows.len() == 2
        && rep.rows.iter().all(|r| r.sigma_jit >= 1.5);
    let detail: Vec<String> = rep
        .rows
        .iter()
        .map(|r| format!("{} t_interp/t_jit = {:.2}", r.name, r.sigma_jit))
        .collect();
    report("JIT vs interpreter speedup >= 1.5", ok, &detail.join(", "));
    assert!(ok, "{}", rep.to_table());
}

#[test]
fn chunk_lifecycle() {
    let _g = serial();
    let mut jit = Jit::new(JitConfig {
        chunk_words: 64,
        pool_words: 64 * 64,
        ..JitConfig::default()
    })
    .unwrap();
    let initial = jit.pool().free_count();
    let sources = random_corpus(99, 1000);
    let mut violations = Vec::new();
    let mut max_chunks = 0;
    for (i, src) in sources.iter().enumerate() {
        let seg = load(src, "generated").unwrap();
        let mut vm = Vm::new(VmConfig {
            stack_words: 4096,
            young_words: 1024,
            ..VmConfig::default()
        });
        let id = jit.load(seg);
        jit.run(&mut vm, id);
        let footprint = jit.pool().chunks_of(id).len();
        max_chunks = max_chunks.max(footprint);
        if jit.pool().owned_count() > footprint + 1 {
            violations.push(format!(
                "segment {i}: {} chunks in use",
                jit.pool().owned_count()
            ));
        }
        jit.release_bytecode(id).unwrap();
        if jit.pool().free_count() != initial {
            violations.push(format!(
                "segment {i}: {} free after release, expected {initial}",
                jit.pool().free_count()
            ));
        }
    }
    let ok = violations.is_empty();
    report(
        "chunk lifecycle",
        ok,
        &format!("1000 segments, free count back to {initial} after each release, largest footprint {max_chunks} chunks"),
    );
    assert!(ok, "{}", violations.join("\n"));
}

#[test]
fn chunk_continuation() {
    let _g = serial();
    let mut ok = true;
    let mut details = Vec::new();
    for (name, seg) in named(&["quicksort", "boyerlike", "fftlike"]) {
        let small = run_segment(
            &seg,
            &RunConfig {
                chunk_words: 16,
                pool_words: 16 * 4096,
                ..RunConfig::default()
            },
        );
        let large = run_segment(&seg, &RunConfig::default());
        let same = compare_reports(&large, &small).is_match() && small.fallback.is_none();
        let chunks = small.stats.chunks_allocated;
        ok &= same && chunks >= 3;
        details.push(format!(
            "{name}: {chunks} chunks of 16 words, same result: {same}"
        ));
    }
    report("chunk continuation", ok, &details.join(", "));
    assert!(ok);
}

/// Three batches on the first pass: `main` up to the unconditional branch,
/// the body of `f` (entered through the closure), and the code at `over`.
const BATCHES: &str = "
global 0 = int 0
entry main
main:
    closure 0, f
    setglobal 0
    push_retaddr r
    constint 5
    push
    getglobal 0
    apply 1
r:
    branch over
    constint 99
    stop
over:
    offsetint 1
    stop
f:
    acc 0
    offsetint 10
    return 1
";

#[test]
fn compile_once() {
    let _g = serial();
    let seg = load(BATCHES, "batches").unwrap();
    let entry = seg.entry;
    let mut jit = Jit::new(JitConfig::default()).unwrap();
    let id = jit.load(seg);
    let small = VmConfig {
        stack_words: 256,
        young_words: 256,
        ..VmConfig::default()
    };
    let mut vm = Vm::new(small);
    let first = jit.run(&mut vm, id);
    let after_first = vm.stats.compilations;
    let mut ok = first.result() == Some(Value::Int(16)) && after_first == 3;
    let mut total = after_first;
    for _ in 0..10_000 {
        let mut vm = Vm::new(small);
        vm.load_globals(&jit.segment(id).unwrap().globals_init.clone())
            .unwrap();
        let start = jit
            .enter_bytecode(
                &mut vm,
                CodeAddr {
                    seg: id,
                    ofs: entry as u32,
                },
            )
            .unwrap();
        let out = jit.execute(&mut vm, start);
        ok &= out.result() == Some(Value::Int(16));
        total += vm.stats.compilations;
    }
    ok &= total == 3;
    report(
        "compile once",
        ok,
        &format!("{after_first} batches on the first pass, {total} compilations after 10000 more entries"),
    );
    assert!(ok);
}

#[test]
fn currying_conformance() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = Vec::new();
    let mut split = 0;
    for i in 0..200 {
        let case = CurryCase::random(&mut rng);
        if case.outer < case.arity {
            split += 1;
        }
        let expected = Value::Int(case.expected());
        for (kind, src) in [
            ("full", case.full_program()),
            ("piecewise", case.piecewise_program()),
        ] {
            let seg = load(&src, kind).unwrap();
            let mut vm = Vm::new(VmConfig {
                stack_words: 1024,
                ..VmConfig::default()
            });
            let a = interpret(&mut vm, &seg).result();
            let mut jit = Jit::new(JitConfig::default()).unwrap();
            let mut vm = Vm::new(VmConfig::default());
            let id = jit.load(seg.fresh_copy());
            let b = jit.run(&mut vm, id).result();
            if a != Some(expected) || b != Some(expected) {
                failures.push(format!("case {i} {kind}: {case:?} interp {a:?} jit {b:?}"));
            }
        }
    }
    let ok = failures.is_empty();
    report(
        "currying conformance",
        ok,
        &format!("200 functions of arity 1-4 ({split} returning closures), full vs piecewise on both engines"),
    );
    assert!(ok, "{}", failures.join("\n"));
}

#[test]
fn fallback_with_empty_pool() {
    let _g = serial();
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/corpus");
    let mut ok = true;
    let mut details = Vec::new();
    for (name, _) in corpus_segments() {
        let path = format!("{dir}/{name}.zasm");
        let run = |args: &[&str]| {
            let mut out = Vec::new();
            let mut err = Vec::new();
            let mut argv = vec!["zamjit", "run"];
            argv.extend_from_slice(args);
            argv.push(&path);
            let code = cli_run(argv, &mut out, &mut err);
            (code, out, String::from_utf8_lossy(&err).into_owned())
        };
        let (c1, o1, _) = run(&["--engine=interp"]);
        let (c2, o2, e2) = run(&["--engine=jit", "--pool-size=0"]);
        let good = c1 == 0 && c2 == 0 && o1 == o2 && e2.contains("interpreter");
        ok &= good;
        if !good {
            details.push(format!("{name}: exit {c1}/{c2}, stderr {e2:?}"));
        }
    }
    report(
        "fallback with --pool-size=0",
        ok,
        &if details.is_empty() {
            "every corpus program matches the interpreter, exit 0".to_string()
        } else {
            details.join(", ")
        },
    );
    assert!(ok);
}
