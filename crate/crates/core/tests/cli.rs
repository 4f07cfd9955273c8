use std::process::{Command, Output};

use zamjit::harness::BenchReport;

fn zamjit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zamjit"))
        .args(args)
        .env_remove("ZAMJIT_SEED")
        .output()
        .unwrap()
}

fn example(name: &str) -> String {
    format!("{}/examples/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn scratch(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("zamjit-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn run_prints_result() {
    for engine in ["--engine=interp", "--engine=jit"] {
        let out = zamjit(&["run", engine, &example("const7.zasm")]);
        assert_eq!(out.status.code(), Some(0));
        assert_eq!(text(&out.stdout), "7\n");
    }
}

#[test]
fn empty_pool_falls_back_with_notice() {
    let out = zamjit(&[
        "run",
        "--engine=jit",
        "--pool-size=0",
        &example("const7.zasm"),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(text(&out.stdout), "7\n");
    assert!(
        text(&out.stderr).contains("interpreter"),
        "{}",
        text(&out.stderr)
    );
}

#[test]
fn runtime_error_exits_with_1() {
    for engine in ["--engine=interp", "--engine=jit"] {
        let out = zamjit(&["run", engine, &example("divzero.zasm")]);
        assert_eq!(out.status.code(), Some(1));
        assert!(
            text(&out.stderr).contains("DivisionByZero at"),
            "{}",
            text(&out.stderr)
        );
    }
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(zamjit(&["run"]).status.code(), Some(2));
    assert_eq!(zamjit(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        zamjit(&["run", "--engine=gcc", &example("const7.zasm")])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        zamjit(&["run", "/nonexistent/file.zasm"]).status.code(),
        Some(2)
    );
    assert_eq!(
        zamjit(&["run", "--chunk-size=3", &example("const7.zasm")])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn invalid_programs_exit_with_3() {
    let path = scratch("bad.zasm");
    std::fs::write(&path, "acc 0\nbranch nowhere\n").unwrap();
    let out = zamjit(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));

    std::fs::write(&path, "pop 1\nfrobnicate 3\n").unwrap();
    assert_eq!(
        zamjit(&["run", path.to_str().unwrap()]).status.code(),
        Some(3)
    );
}

#[test]
fn stats_and_dump_go_to_stderr() {
    let out = zamjit(&["run", "--stats", "--dump-jit", &example("const7.zasm")]);
    assert_eq!(text(&out.stdout), "7\n");
    let err = text(&out.stderr);
    assert!(err.contains("compilations=1"), "{err}");
    assert!(err.contains("CONSTINT 7"), "{err}");
}

#[test]
fn out_flag_writes_a_file() {
    let path = scratch("result.txt");
    let out = zamjit(&["run", "--out", path.to_str().unwrap(), "corpus:soli-small"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "498\n");
}

#[test]
fn disasm_output_reassembles() {
    let out = zamjit(&["disasm", "corpus:curry"]);
    assert_eq!(out.status.code(), Some(0));
    let path = scratch("curry.zasm");
    std::fs::write(&path, &out.stdout).unwrap();
    let run = zamjit(&["run", path.to_str().unwrap()]);
    assert_eq!(text(&run.stdout), "800180000\n");
}

#[test]
fn bench_writes_parseable_tsv() {
    let path = scratch("bench.tsv");
    let out = zamjit(&[
        "bench",
        "--repeats=1",
        &format!("--out={}", path.display()),
        &example("const7.zasm"),
        "corpus:curry",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let tsv = std::fs::read_to_string(&path).unwrap();
    assert!(tsv.contains("name\tt_interp\tt_jit\tt_jit_noopt\tsigma_jit\tsigma_opt"));
    let report = BenchReport::parse_tsv(&tsv).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.repeats, 1);
}

#[test]
fn seed_variable_overrides_flag() {
    let diff = |env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_zamjit"));
        cmd.args(["diff", "--random=2", "--seed=5"]);
        match env {
            Some(v) => cmd.env("ZAMJIT_SEED", v),
            None => cmd.env_remove("ZAMJIT_SEED"),
        };
        cmd.output().unwrap()
    };
    let flag = diff(None);
    assert_eq!(flag.status.code(), Some(0));
    assert!(text(&flag.stdout).starts_with("random-5-0\tmatch"));
    let env = diff(Some("11"));
    assert_eq!(env.status.code(), Some(0));
    assert!(
        text(&env.stdout).starts_with("random-11-0\tmatch"),
        "{}",
        text(&env.stdout)
    );
    assert_eq!(diff(Some("eleven")).status.code(), Some(2));
}

#[test]
fn diff_checks_the_corpus() {
    let out = zamjit(&["diff", "--chunk-size=16", "--pool-size=65536"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stdout));
    assert_eq!(text(&out.stdout).lines().count(), 6);
}
