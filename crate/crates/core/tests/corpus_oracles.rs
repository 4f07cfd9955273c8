//! Each bundled program's answer recomputed directly in Rust.

use zamjit::bytecode::{GlobalPayload, Segment};
use zamjit::harness::{corpus_segments, run_segment, Engine, RunConfig, RunReport};
use zamjit::runtime::{format_float, Value};
use zamjit::{interpret, Jit, JitConfig, Vm, VmConfig};

fn program(name: &str) -> Segment {
    corpus_segments()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, s)| s)
        .unwrap()
}

fn both(seg: &Segment) -> [RunReport; 2] {
    [Engine::Interp, Engine::Jit].map(|engine| {
        run_segment(
            seg,
            &RunConfig {
                engine,
                ..RunConfig::default()
            },
        )
    })
}

fn float_global(seg: &Segment, i: usize) -> Vec<f64> {
    match &seg.globals_init[i].payload {
        GlobalPayload::Float(f) => vec![*f],
        GlobalPayload::FloatArray(a) => a.clone(),
        other => panic!("global {i} is {other:?}"),
    }
}

/// The float a program leaves in the accumulator, on both engines.
fn float_results(seg: &Segment) -> [f64; 2] {
    let mut vm = Vm::new(VmConfig::default());
    let out = interpret(&mut vm, seg);
    let a = vm.unbox_float(out.result().unwrap()).unwrap();
    let mut vm = Vm::new(VmConfig::default());
    let mut jit = Jit::new(JitConfig::default()).unwrap();
    let id = jit.load(seg.fresh_copy());
    let out = jit.run(&mut vm, id);
    let b = vm.unbox_float(out.result().unwrap()).unwrap();
    [a, b]
}

#[test]
fn quicksort_sorts_the_generated_array() {
    let mut state: i64 = 12345;
    let mut arr = vec![0i64; 3000];
    for _ in 0..4 {
        for k in (0..3000).rev() {
            state = (state * 1103515245 + 12345) % 1000003;
            arr[k] = state;
        }
    }
    arr.sort();
    let expected = format!("{}\n{}\n", arr[0], arr[2999]);
    for r in both(&program("quicksort")) {
        assert_eq!(String::from_utf8_lossy(&r.output), expected);
        assert_eq!(r.outcome.result(), Some(Value::Int(0)));
    }
}

#[test]
fn almaloop_matches_direct_evaluation() {
    let seg = program("almaloop");
    let a = float_global(&seg, 0);
    let g = |i| float_global(&seg, i)[0];
    let (y, z, w) = (g(1), g(2), g(3));
    let (c0, c1, c2, c3) = (g(5), g(6), g(7), g(8));
    let mut sum = g(4);
    for _ in 0..600 {
        for i in (1..=64).rev() {
            let x = (a[i - 1] * y + z + w).sqrt();
            let p = ((c3 * x + c2) * x + c1) * x + c0;
            sum += p;
        }
    }
    for r in float_results(&seg) {
        assert_eq!(r.to_bits(), sum.to_bits(), "{r} vs {sum}");
    }
}

#[test]
fn fftlike_matches_direct_evaluation() {
    let seg = program("fftlike");
    let mut re = float_global(&seg, 0);
    let mut im = float_global(&seg, 1);
    let wr = float_global(&seg, 2);
    let wi = float_global(&seg, 3);
    let h = float_global(&seg, 4)[0];
    for _ in 0..4000 {
        for k in 0..8 {
            let t1 = im[k + 8] * wi[k];
            let tr = re[k + 8] * wr[k] - t1;
            let t2 = im[k + 8] * wr[k];
            let ti = re[k + 8] * wi[k] + t2;
            re[k + 8] = (re[k] - tr) * h;
            im[k + 8] = (im[k] - ti) * h;
            re[k] = (re[k] + tr) * h;
            im[k] = (im[k] + ti) * h;
        }
    }
    for r in float_results(&seg) {
        assert_eq!(r.to_bits(), im[0].to_bits());
    }
    for r in both(&seg) {
        assert_eq!(
            String::from_utf8_lossy(&r.output),
            format!("{}\n", format_float(re[0]))
        );
    }
}

#[test]
fn soli_small_counts_subsets() {
    // ways[t] = number of subsets of the items seen so far summing to t
    let mut ways = [0u64; 41];
    ways[0] = 1;
    for item in 1..=16 {
        for t in (item..=40).rev() {
            ways[t] += ways[t - item];
        }
    }
    for r in both(&program("soli-small")) {
        assert_eq!(r.outcome.result(), Some(Value::Int(ways[40] as i64)));
    }
}

#[test]
fn curry_sums_partial_applications() {
    let expected: i64 = (1..=20000i64).map(|i| (i + 1 + 2) + (i * 3 + 4)).sum();
    for r in both(&program("curry")) {
        assert_eq!(r.outcome.result(), Some(Value::Int(expected)));
    }
}

#[test]
fn boyerlike_rewriting_preserves_value() {
    for r in both(&program("boyerlike")) {
        assert_eq!(String::from_utf8_lossy(&r.output), "1\n".repeat(6));
        assert!(r.outcome.result().is_some());
    }
}
