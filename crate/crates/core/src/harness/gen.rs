//! Seeded generators of `.zasm` test programs.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::runtime::wrap63;

const FLOAT_ARRAY_LEN: i64 = 4;
const G_FLOATS: usize = 0;
const G_FLOAT: usize = 1;
const G_SCRATCH: usize = 2;
const G_FIRST_FUNC: usize = 3;

#[derive(Debug, Clone, Copy)]
struct Func {
    global: usize,
    arity: usize,
    captures: usize,
}

/// Emission state for one code body (main or a function).
struct Body {
    text: String,
    /// Absolute stack positions of integer locals, counted from the body's base.
    locals: Vec<usize>,
    depth: usize,
    captures: usize,
    loops: usize,
    /// Functions callable from this body.
    callable: usize,
}

struct Gen<'r> {
    rng: &'r mut ChaCha8Rng,
    labels: usize,
    funcs: Vec<Func>,
    fuel: i64,
}

impl Gen<'_> {
    fn label(&mut self, stem: &str) -> String {
        self.labels += 1;
        format!("{stem}{}", self.labels)
    }

    fn emit(&mut self, b: &mut Body, line: &str) {
        self.fuel -= 1;
        b.text.push_str("    ");
        b.text.push_str(line);
        b.text.push('\n');
    }

    fn place(b: &mut Body, label: &str) {
        let _ = writeln!(b.text, "{label}:");
    }

    fn push(&mut self, b: &mut Body) {
        self.emit(b, "push");
        b.depth += 1;
    }

    fn acc_of(b: &Body, pos: usize) -> usize {
        b.depth - 1 - pos
    }

    fn int_leaf(&mut self, b: &mut Body) {
        let r = self.rng.gen_range(0..10);
        if r < 4 && !b.locals.is_empty() {
            let pos = *b.locals.choose(self.rng).expect("nonempty");
            let line = format!("acc {}", Self::acc_of(b, pos));
            self.emit(b, &line);
        } else if r < 5 && b.captures > 0 {
            let i = self.rng.gen_range(1..=b.captures);
            self.emit(b, &format!("envacc {i}"));
        } else if r < 6 {
            self.emit(b, &format!("getglobal {G_SCRATCH}"));
        } else {
            let k = match self.rng.gen_range(0..6) {
                0 => self.rng.gen_range(i64::MIN / 2..i64::MAX / 2),
                _ => self.rng.gen_range(-20..=20),
            };
            self.emit(b, &format!("constint {k}"));
        }
    }

    fn int_expr(&mut self, b: &mut Body, budget: u32) {
        if budget == 0 || self.fuel <= 0 {
            return self.int_leaf(b);
        }
        match self.rng.gen_range(0..20) {
            0..=2 => self.int_leaf(b),
            3..=7 => {
                self.int_expr(b, budget - 1);
                self.push(b);
                self.int_expr(b, budget - 1);
                let op = match self.rng.gen_range(0..24) {
                    0..=4 => "addint",
                    5..=8 => "subint",
                    9..=11 => "mulint",
                    12 => "divint",
                    13 => "modint",
                    14 | 15 => "eq",
                    16 => "neq",
                    17 | 18 => "ltint",
                    19 => "leint",
                    20 | 21 => "gtint",
                    _ => "geint",
                };
                self.emit(b, op);
                b.depth -= 1;
            }
            8 => {
                self.int_expr(b, budget - 1);
                let k = self.rng.gen_range(-5..=5);
                self.emit(b, &format!("offsetint {k}"));
            }
            9 | 10 => {
                let (els, end) = (self.label("else"), self.label("fi"));
                self.int_expr(b, budget - 1);
                self.emit(b, &format!("branchifnot {els}"));
                self.int_expr(b, budget - 1);
                self.emit(b, &format!("branch {end}"));
                Self::place(b, &els);
                self.int_expr(b, budget - 1);
                Self::place(b, &end);
            }
            11 => {
                // a small block, then read one field back
                let size = self.rng.gen_range(1..=3);
                for _ in 1..size {
                    self.int_expr(b, budget - 1);
                    self.push(b);
                }
                self.int_expr(b, budget - 1);
                let tag = self.rng.gen_range(0..8);
                self.emit(b, &format!("makeblock {size}, {tag}"));
                b.depth -= size - 1;
                match self.rng.gen_range(0..3) {
                    0 => self.emit(b, "vectlength"),
                    1 => {
                        let i = self.rng.gen_range(0..size);
                        self.emit(b, &format!("getfield {i}"));
                    }
                    _ => {
                        // write one slot, then read one back
                        self.push(b);
                        self.int_expr(b, budget - 1);
                        self.push(b);
                        let i = self.rng.gen_range(0..size);
                        self.emit(b, &format!("constint {i}"));
                        self.push(b);
                        self.emit(b, "acc 2");
                        self.emit(b, "setvectitem");
                        b.depth -= 2;
                        let j = self.rng.gen_range(0..size);
                        self.emit(b, &format!("constint {j}"));
                        self.push(b);
                        self.emit(b, "acc 1");
                        self.emit(b, "getvectitem");
                        b.depth -= 1;
                        self.emit(b, "pop 1");
                        b.depth -= 1;
                    }
                }
            }
            12 | 13 => {
                self.float_expr(b, budget - 1);
                self.emit(b, "ccall caml_int_of_float, 1");
            }
            14 => {
                self.float_expr(b, budget - 1);
                self.push(b);
                self.float_expr(b, budget - 1);
                let p = ["caml_eq_float", "caml_lt_float", "caml_le_float"]
                    .choose(self.rng)
                    .expect("nonempty");
                self.emit(b, &format!("ccall {p}, 2"));
                b.depth -= 1;
            }
            15..=17 if b.callable > 0 => self.call(b, budget - 1),
            18 if b.callable > 0 => self.partial_call(b, budget - 1),
            _ => self.int_leaf(b),
        }
    }

    fn float_expr(&mut self, b: &mut Body, budget: u32) {
        let leaf = budget == 0 || self.fuel <= 0;
        match if leaf {
            self.rng.gen_range(0..3)
        } else {
            self.rng.gen_range(0..9)
        } {
            0 => self.emit(b, &format!("getglobal {G_FLOAT}")),
            1 => {
                let i = if self.rng.gen_ratio(1, 200) {
                    FLOAT_ARRAY_LEN
                } else {
                    self.rng.gen_range(0..FLOAT_ARRAY_LEN)
                };
                self.emit(b, &format!("constint {i}"));
                self.push(b);
                self.emit(b, &format!("getglobal {G_FLOATS}"));
                self.emit(b, "ccall caml_array_unsafe_get_float, 2");
                b.depth -= 1;
            }
            2 => {
                let k = self.rng.gen_range(-9..=9);
                self.emit(b, &format!("constint {k}"));
                self.emit(b, "ccall caml_float_of_int, 1");
            }
            3..=5 => {
                self.float_expr(b, budget - 1);
                self.push(b);
                self.float_expr(b, budget - 1);
                let p = [
                    "caml_add_float",
                    "caml_sub_float",
                    "caml_mul_float",
                    "caml_div_float",
                ]
                .choose(self.rng)
                .expect("nonempty");
                self.emit(b, &format!("ccall {p}, 2"));
                b.depth -= 1;
            }
            6 | 7 => {
                self.float_expr(b, budget - 1);
                let p = [
                    "caml_sqrt_float",
                    "caml_neg_float",
                    "caml_sin_float",
                    "caml_cos_float",
                ]
                .choose(self.rng)
                .expect("nonempty");
                self.emit(b, &format!("ccall {p}, 1"));
            }
            _ => {
                self.int_expr(b, budget - 1);
                self.emit(b, "ccall caml_float_of_int, 1");
            }
        }
    }

    fn pick_func(&mut self, b: &Body) -> Func {
        self.funcs[self.rng.gen_range(0..b.callable)]
    }

    fn call(&mut self, b: &mut Body, budget: u32) {
        let f = self.pick_func(b);
        let ret = self.label("ret");
        self.emit(b, &format!("push_retaddr {ret}"));
        b.depth += 3;
        for _ in 0..f.arity {
            self.int_expr(b, budget);
            self.push(b);
        }
        self.emit(b, &format!("getglobal {}", f.global));
        self.emit(b, &format!("apply {}", f.arity));
        Self::place(b, &ret);
        b.depth -= 3 + f.arity;
    }

    /// Applies a function to a prefix of its arguments, then the resulting
    /// closure to the rest.
    fn partial_call(&mut self, b: &mut Body, budget: u32) {
        let f = self.pick_func(b);
        if f.arity < 2 {
            return self.call(b, budget);
        }
        let k = self.rng.gen_range(1..f.arity);
        let r1 = self.label("ret");
        self.emit(b, &format!("push_retaddr {r1}"));
        b.depth += 3;
        for _ in 0..k {
            self.int_expr(b, budget);
            self.push(b);
        }
        self.emit(b, &format!("getglobal {}", f.global));
        self.emit(b, &format!("apply {k}"));
        Self::place(b, &r1);
        b.depth -= 3 + k;
        self.push(b);
        let partial = b.depth - 1;
        let r2 = self.label("ret");
        self.emit(b, &format!("push_retaddr {r2}"));
        b.depth += 3;
        for _ in k..f.arity {
            self.int_expr(b, budget);
            self.push(b);
        }
        let line = format!("acc {}", Self::acc_of(b, partial));
        self.emit(b, &line);
        self.emit(b, &format!("apply {}", f.arity - k));
        Self::place(b, &r2);
        b.depth -= 3 + (f.arity - k);
        self.emit(b, "pop 1");
        b.depth -= 1;
    }

    fn stmt(&mut self, b: &mut Body, budget: u32) {
        match self.rng.gen_range(0..12) {
            0..=2 => {
                if self.rng.gen_bool(0.5) {
                    self.int_expr(b, budget);
                } else {
                    self.float_expr(b, budget);
                }
                self.emit(b, "ccall caml_print, 1");
            }
            3 => {
                self.int_expr(b, budget);
                self.emit(b, &format!("setglobal {G_SCRATCH}"));
            }
            4 => {
                self.float_expr(b, budget);
                self.push(b);
                let i = self.rng.gen_range(0..FLOAT_ARRAY_LEN);
                self.emit(b, &format!("constint {i}"));
                self.push(b);
                self.emit(b, &format!("getglobal {G_FLOATS}"));
                self.emit(b, "ccall caml_array_unsafe_set_float, 3");
                b.depth -= 2;
            }
            5 | 6 => {
                self.int_expr(b, budget);
                self.push(b);
                b.locals.push(b.depth - 1);
                let n = self.rng.gen_range(1..=3);
                for _ in 0..n {
                    self.stmt(b, budget.saturating_sub(1));
                }
                if self.rng.gen_bool(0.5) {
                    self.int_expr(b, budget);
                    let pos = b.locals[b.locals.len() - 1];
                    let line = format!("assign {}", Self::acc_of(b, pos));
                    self.emit(b, &line);
                }
                b.locals.pop();
                self.emit(b, "pop 1");
                b.depth -= 1;
            }
            7 | 8 if b.loops < 2 && budget > 0 => {
                let n = self.rng.gen_range(1..=5);
                self.emit(b, &format!("constint {n}"));
                self.push(b);
                let counter = b.depth - 1;
                b.locals.push(counter);
                b.loops += 1;
                let head = self.label("loop");
                Self::place(b, &head);
                let m = self.rng.gen_range(1..=3);
                for _ in 0..m {
                    self.stmt(b, budget - 1);
                }
                let c = Self::acc_of(b, counter);
                self.emit(b, &format!("acc {c}"));
                self.emit(b, "offsetint -1");
                self.emit(b, &format!("assign {c}"));
                self.emit(b, &format!("acc {c}"));
                self.emit(b, &format!("branchif {head}"));
                b.loops -= 1;
                b.locals.pop();
                self.emit(b, "pop 1");
                b.depth -= 1;
            }
            9 => {
                let (els, end) = (self.label("else"), self.label("fi"));
                self.int_expr(b, budget);
                self.emit(b, &format!("branchifnot {els}"));
                self.stmt(b, budget.saturating_sub(1));
                self.emit(b, &format!("branch {end}"));
                Self::place(b, &els);
                self.stmt(b, budget.saturating_sub(1));
                Self::place(b, &end);
            }
            _ => {
                self.int_expr(b, budget);
                self.emit(b, &format!("setglobal {G_SCRATCH}"));
            }
        }
    }

    fn function(&mut self, idx: usize) -> String {
        let f = self.funcs[idx];
        let name = format!("f{idx}");
        let mut b = Body {
            text: String::new(),
            locals: (0..f.arity).collect(),
            depth: f.arity,
            captures: f.captures,
            loops: 1,
            callable: idx,
        };
        if f.arity > 1 {
            let _ = writeln!(b.text, "{name}_restart:\n    restart");
        }
        let _ = writeln!(b.text, "{name}:");
        if f.arity > 1 {
            self.emit(&mut b, &format!("grab {}", f.arity - 1));
        }
        if self.rng.gen_bool(0.3) {
            self.stmt(&mut b, 1);
        }
        if idx > 0 && self.rng.gen_bool(0.3) {
            // tail call
            let g = self.funcs[self.rng.gen_range(0..idx)];
            for _ in 0..g.arity {
                self.int_expr(&mut b, 1);
                self.push(&mut b);
            }
            self.emit(&mut b, &format!("getglobal {}", g.global));
            let s = b.depth;
            self.emit(&mut b, &format!("appterm {}, {s}", g.arity));
        } else {
            self.int_expr(&mut b, 2);
            self.emit(&mut b, &format!("return {}", f.arity));
        }
        b.text
    }
}

/// One random, well-formed program. Most programs run to `STOP`; some hit
/// a runtime error (division by zero, out-of-range index), which both
/// engines must report identically.
pub fn random_program(rng: &mut ChaCha8Rng) -> String {
    let nfuncs = rng.gen_range(0..=4);
    let funcs: Vec<Func> = (0..nfuncs)
        .map(|i| Func {
            global: G_FIRST_FUNC + i,
            arity: rng.gen_range(1..=3),
            captures: rng.gen_range(0..=2),
        })
        .collect();
    let mut gen = Gen {
        rng,
        labels: 0,
        funcs,
        fuel: 400,
    };

    let mut out = String::new();
    let floats: Vec<String> = (0..FLOAT_ARRAY_LEN)
        .map(|_| format!("{:?}", gen.rng.gen_range(-4.0f64..4.0)))
        .collect();
    let _ = writeln!(
        out,
        "global {G_FLOATS} = floatarray [{}]",
        floats.join(", ")
    );
    let _ = writeln!(
        out,
        "global {G_FLOAT} = float {:?}",
        gen.rng.gen_range(0.0f64..3.0)
    );
    let _ = writeln!(
        out,
        "global {G_SCRATCH} = int {}",
        gen.rng.gen_range(-9..=9)
    );
    for f in &gen.funcs {
        let _ = writeln!(out, "global {} = int 0", f.global);
    }
    out.push_str("entry main\n");

    let bodies: Vec<String> = (0..nfuncs).map(|i| gen.function(i)).collect();

    let mut main = Body {
        text: String::new(),
        locals: Vec::new(),
        depth: 0,
        captures: 0,
        loops: 0,
        callable: nfuncs,
    };
    let funcs = gen.funcs.clone();
    for (i, f) in funcs.iter().enumerate() {
        for _ in 1..f.captures {
            let k = gen.rng.gen_range(-50..=50);
            gen.emit(&mut main, &format!("constint {k}"));
            gen.emit(&mut main, "push");
        }
        let k = gen.rng.gen_range(-50..=50);
        gen.emit(&mut main, &format!("constint {k}"));
        gen.emit(&mut main, &format!("closure {}, f{i}", f.captures));
        gen.emit(&mut main, &format!("setglobal {}", f.global));
    }
    let nstmts = gen.rng.gen_range(1..=6);
    for _ in 0..nstmts {
        gen.stmt(&mut main, 3);
    }
    gen.int_expr(&mut main, 3);
    gen.emit(&mut main, "stop");
    debug_assert_eq!(main.depth, 0);

    out.push_str("main:\n");
    out.push_str(&main.text);
    for b in bodies {
        out.push_str(&b);
    }
    out
}

/// `n` programs from one seed; the same seed always yields the same list.
pub fn random_corpus(seed: u64, n: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_program(&mut rng)).collect()
}

/// A curried integer function `c0 + sum(c[i] * x[i])`, checked under full
/// and piecewise application.
#[derive(Debug, Clone)]
pub struct CurryCase {
    pub arity: usize,
    /// Arguments consumed by the outer function; the rest by the closure it
    /// returns. Equal to `arity` when the function is not split.
    pub outer: usize,
    pub c0: i64,
    pub coeffs: Vec<i64>,
    pub args: Vec<i64>,
    /// Sizes of the successive applications in the piecewise program.
    pub chunks: Vec<usize>,
}

impl CurryCase {
    pub fn random(rng: &mut ChaCha8Rng) -> CurryCase {
        let arity = rng.gen_range(1..=4);
        let outer = if arity > 1 && rng.gen_bool(0.5) {
            rng.gen_range(1..arity)
        } else {
            arity
        };
        let mut chunks = Vec::new();
        let mut left = arity;
        while left > 0 {
            let k = rng.gen_range(1..=left);
            chunks.push(k);
            left -= k;
        }
        let small = |rng: &mut ChaCha8Rng| rng.gen_range(-1000..=1000);
        CurryCase {
            arity,
            outer,
            c0: small(rng),
            coeffs: (0..arity).map(|_| small(rng)).collect(),
            args: (0..arity)
                .map(|_| {
                    if rng.gen_bool(0.2) {
                        rng.gen_range(i64::MIN / 4..i64::MAX / 4)
                    } else {
                        small(rng)
                    }
                })
                .collect(),
            chunks,
        }
    }

    /// The value both programs must produce, computed in the 63-bit ring.
    pub fn expected(&self) -> i64 {
        let m = 1i128 << 63;
        let mut acc = self.c0 as i128;
        for (c, x) in self.coeffs.iter().zip(&self.args) {
            acc = (acc + (*c as i128) * (*x as i128)).rem_euclid(m);
        }
        wrap63(acc as i64)
    }

    fn functions(&self) -> String {
        let mut s = String::new();
        let inner = self.arity - self.outer;
        let header = |s: &mut String, name: &str, arity: usize| {
            if arity > 1 {
                let _ = writeln!(s, "{name}_restart:\n    restart");
            }
            let _ = writeln!(s, "{name}:");
            if arity > 1 {
                let _ = writeln!(s, "    grab {}", arity - 1);
            }
        };
        // c0 + captured terms (from env) + own-argument terms
        let body = |s: &mut String, captured: usize, own: usize| {
            let _ = writeln!(s, "    constint {}", self.c0);
            for k in 1..=captured {
                let _ = writeln!(
                    s,
                    "    push\n    constint {}\n    push\n    envacc {k}\n    mulint\n    addint",
                    self.coeffs[k - 1]
                );
            }
            for i in 0..own {
                let _ = writeln!(
                    s,
                    "    push\n    constint {}\n    push\n    acc {}\n    mulint\n    addint",
                    self.coeffs[captured + i],
                    i + 2
                );
            }
        };
        header(&mut s, "f", self.outer);
        if inner == 0 {
            body(&mut s, 0, self.arity);
        } else {
            // capture x1..x_outer in a closure over `g`
            for _ in 1..self.outer {
                let _ = writeln!(s, "    acc {}\n    push", self.outer - 1);
            }
            let _ = writeln!(s, "    acc {}", self.outer - 1);
            let _ = writeln!(s, "    closure {}, g", self.outer);
        }
        let _ = writeln!(s, "    return {}", self.outer);
        if inner > 0 {
            header(&mut s, "g", inner);
            body(&mut s, self.outer, inner);
            let _ = writeln!(s, "    return {inner}");
        }
        s
    }

    fn program(&self, chunks: &[usize]) -> String {
        let mut s = String::from(
            "global 0 = int 0\nentry main\nmain:\n    closure 0, f\n    setglobal 0\n",
        );
        let mut consumed = 0;
        for (n, &k) in chunks.iter().enumerate() {
            let _ = writeln!(s, "    push_retaddr r{n}");
            for x in self.args[consumed..consumed + k].iter().rev() {
                let _ = writeln!(s, "    constint {x}\n    push");
            }
            if n == 0 {
                s.push_str("    getglobal 0\n");
            } else {
                // the previous partial result sits just above the frame
                let _ = writeln!(s, "    acc {}", 3 + k);
            }
            let _ = writeln!(s, "    apply {k}\nr{n}:");
            if n > 0 {
                s.push_str("    pop 1\n");
            }
            if n + 1 < chunks.len() {
                s.push_str("    push\n");
            }
            consumed += k;
        }
        s.push_str("    stop\n");
        s.push_str(&self.functions());
        s
    }

    /// All arguments in one `APPLY`.
    pub fn full_program(&self) -> String {
        self.program(&[self.arity])
    }

    /// Arguments supplied in `chunks` successive applications.
    pub fn piecewise_program(&self) -> String {
        self.program(&self.chunks)
    }
}
