//! On-demand compiler from bytecode to pool-resident threaded code.
//!
//! Every transfer to a bytecode address goes through [`Jit::enter_bytecode`]:
//! it reads the opcode word at that address, and either finds `BIAS +
//! offset` (already compiled) or compiles a batch starting there. A batch
//! is compiled instruction by instruction; each instruction's opcode word
//! is overwritten with the offset of its compiled op as soon as that op is
//! emitted. A batch ends at a terminator, at an unconditional branch, or
//! when it runs into an instruction that is already compiled.
//!
//! Compiled ops are a handler word followed by pre-decoded operands.
//! Targets that are not compiled yet are carried as `(segment, offset)`
//! pairs and resolved lazily; the resolving op then rewrites itself so the
//! lookup happens once.
//!
//! With float optimization on, a run of directly consecutive `CCALL`s whose
//! results feed the next call's first argument is compiled into fused ops
//! that pass the intermediate values through `Vm::facc` instead of boxing
//! them. Only the first instruction of such a run has its opcode word
//! patched, since the later ones expect a live float accumulator.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::bytecode::{decode_at, Instruction, Opcode, Segment, SegmentId, BIAS};
use crate::chunk_pool::{self, ChunkPool, PoolError, PoolOffset};
use crate::interpreter::Outcome;
use crate::ops::{self, CmpOp, IntOp};
use crate::runtime::{
    float_arith, float_compare, float_of_int, int_of_float, prim, CodeAddr, ErrorKind, Trap, Value,
    Vm, PRIMITIVES,
};

macro_rules! handlers {
    ($($name:ident = $num:expr, $text:expr, $width:expr;)*) => {
        /// Handler words of compiled ops. Values `0..=37` mirror the opcodes.
        pub mod handler {
            $(pub const $name: i64 = $num;)*
        }

        pub fn handler_name(h: i64) -> &'static str {
            match h {
                $($num => $text,)*
                _ => "?",
            }
        }

        /// Width of a compiled op in words, handler included.
        pub fn op_width(h: i64) -> usize {
            match h {
                $($num => $width,)*
                _ => 1,
            }
        }
    };
}

handlers! {
    STOP = 0, "STOP", 1;
    CONSTINT = 1, "CONSTINT", 2;
    ACC = 2, "ACC", 2;
    PUSH = 3, "PUSH", 1;
    POP = 4, "POP", 2;
    ASSIGN = 5, "ASSIGN", 2;
    ENVACC = 6, "ENVACC", 2;
    ADDINT = 7, "ADDINT", 1;
    SUBINT = 8, "SUBINT", 1;
    MULINT = 9, "MULINT", 1;
    DIVINT = 10, "DIVINT", 1;
    MODINT = 11, "MODINT", 1;
    EQ = 12, "EQ", 1;
    NEQ = 13, "NEQ", 1;
    LTINT = 14, "LTINT", 1;
    LEINT = 15, "LEINT", 1;
    GTINT = 16, "GTINT", 1;
    GEINT = 17, "GEINT", 1;
    OFFSETINT = 18, "OFFSETINT", 2;
    BRANCH = 19, "BRANCH", 4;
    BRANCHIF = 20, "BRANCHIF", 4;
    BRANCHIFNOT = 21, "BRANCHIFNOT", 4;
    CLOSURE = 22, "CLOSURE", 4;
    PUSH_RETADDR = 23, "PUSH_RETADDR", 3;
    APPLY = 24, "APPLY", 2;
    RETURN = 25, "RETURN", 2;
    RESTART = 26, "RESTART", 1;
    GRAB = 27, "GRAB", 4;
    APPTERM = 28, "APPTERM", 3;
    MAKEBLOCK = 29, "MAKEBLOCK", 3;
    GETFIELD = 30, "GETFIELD", 2;
    SETFIELD = 31, "SETFIELD", 2;
    GETGLOBAL = 32, "GETGLOBAL", 2;
    SETGLOBAL = 33, "SETGLOBAL", 2;
    VECTLENGTH = 34, "VECTLENGTH", 1;
    GETVECTITEM = 35, "GETVECTITEM", 1;
    SETVECTITEM = 36, "SETVECTITEM", 1;
    CCALL = 37, "CCALL", 3;
    JUMP = 38, "JUMP", 2;
    GOTO_BC = 39, "GOTO_BC", 3;
    ENTER_CLOSURE = 40, "ENTER_CLOSURE", 1;
    RET_FRAME = 41, "RET_FRAME", 1;
    CCALL_F = 42, "CCALL_F", 4;
}

const _: () = assert!(handler::JUMP == chunk_pool::JUMP_HANDLER);

/// Flag bits of a `CCALL_F` op.
pub const SRC_FACC: i64 = 1;
pub const DST_FACC: i64 = 2;

const UNRESOLVED: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JitConfig {
    pub float_opt: bool,
    pub chunk_words: usize,
    pub pool_words: usize,
    /// Record a text listing of every compiled batch.
    pub dump: bool,
}

impl JitConfig {
    pub const BIAS: i64 = BIAS;
}

impl Default for JitConfig {
    fn default() -> Self {
        JitConfig {
            float_opt: true,
            chunk_words: chunk_pool::DEFAULT_CHUNK_WORDS,
            pool_words: chunk_pool::DEFAULT_POOL_WORDS,
            dump: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JitError {
    #[error("unknown segment {0}")]
    UnknownSegment(SegmentId),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

struct LiveSegment {
    seg: Segment,
    boundaries: Vec<bool>,
    /// Set when a compilation into this segment ran out of pool space.
    broken: bool,
}

/// Length of the float run starting at `ofs` (which must hold a `CCALL`).
///
/// The run extends while each call produces a float and the following
/// instruction is a `CCALL` whose first argument is a float.
pub fn detect_float_run(code: &[i64], ofs: usize) -> usize {
    let Ok(first) = decode_at(code, ofs) else {
        return 0;
    };
    if first.opcode != Opcode::CCall {
        return 0;
    }
    let mut k = 1;
    let mut prev = first;
    while let Some(p) = PRIMITIVES.get(prev.operands[0] as usize) {
        if !p.produces_float {
            break;
        }
        let Ok(next) = decode_at(code, prev.next()) else {
            break;
        };
        if next.opcode != Opcode::CCall {
            break;
        }
        match PRIMITIVES.get(next.operands[0] as usize) {
            Some(q) if q.consumes_float_first => {}
            _ => break,
        }
        k += 1;
        prev = next;
    }
    k
}

/// `(src_facc, dst_facc)` for each call of a run of length `k`.
pub fn fusion_flags(prims: &[usize]) -> Vec<(bool, bool)> {
    let k = prims.len();
    prims
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let src = k >= 2 && j > 0;
            let dst = k >= 2 && j + 1 < k && PRIMITIVES[p].produces_float;
            (src, dst)
        })
        .collect()
}

/// The compiled form of one non-`CCALL`, non-branch instruction.
pub fn translate(ins: &Instruction, seg: SegmentId) -> Vec<i64> {
    let a = ins.operands[0];
    let b = ins.operands[1];
    let h = ins.opcode as i64;
    let abs = |ofs: i64| ins.iaddr as i64 + ofs;
    match ins.opcode {
        Opcode::Closure => vec![h, a, seg.0 as i64, abs(b)],
        Opcode::PushRetAddr => vec![h, seg.0 as i64, abs(a)],
        Opcode::Apply => vec![h, a, handler::ENTER_CLOSURE],
        Opcode::AppTerm => vec![h, a, b, handler::ENTER_CLOSURE],
        Opcode::Return => vec![h, a, handler::RET_FRAME, handler::ENTER_CLOSURE],
        Opcode::Grab => vec![h, a, seg.0 as i64, ins.iaddr as i64 - 1, handler::RET_FRAME],
        Opcode::CCall => vec![h, a, b],
        _ => {
            let mut out = vec![h];
            out.extend_from_slice(&ins.operands[..ins.opcode.arity()]);
            out
        }
    }
}

/// The JIT engine: code pool plus the table of live segments.
pub struct Jit {
    pub config: JitConfig,
    pool: ChunkPool,
    slots: Vec<Option<LiveSegment>>,
    index: HashMap<SegmentId, usize>,
    last: Option<(SegmentId, usize)>,
    dump_log: Vec<String>,
}

impl Jit {
    pub fn new(config: JitConfig) -> Result<Jit, JitError> {
        let pool = ChunkPool::new(config.pool_words, config.chunk_words)?;
        Ok(Jit {
            config,
            pool,
            slots: Vec::new(),
            index: HashMap::new(),
            last: None,
            dump_log: Vec::new(),
        })
    }

    pub fn pool(&self) -> &ChunkPool {
        &self.pool
    }

    /// Hands a segment to the engine; it is patched in place from now on.
    pub fn load(&mut self, seg: Segment) -> SegmentId {
        let id = seg.id;
        let boundaries = seg.boundary_map();
        self.slots.push(Some(LiveSegment {
            seg,
            boundaries,
            broken: false,
        }));
        self.index.insert(id, self.slots.len() - 1);
        id
    }

    pub fn segment(&self, id: SegmentId) -> Option<&Segment> {
        self.index
            .get(&id)
            .and_then(|&i| self.slots[i].as_ref())
            .map(|l| &l.seg)
    }

    pub fn is_live(&self, id: SegmentId) -> bool {
        self.index.contains_key(&id)
    }

    /// Text listing of compiled batches (when `dump` is on); drains the log.
    pub fn take_dump(&mut self) -> Vec<String> {
        std::mem::take(&mut self.dump_log)
    }

    /// Frees a segment and every chunk holding its compiled code.
    pub fn release_bytecode(&mut self, id: SegmentId) -> Result<usize, JitError> {
        let slot = self.index.remove(&id).ok_or(JitError::UnknownSegment(id))?;
        self.slots[slot] = None;
        if self.last.map(|(s, _)| s) == Some(id) {
            self.last = None;
        }
        Ok(self.pool.release_segment(id))
    }

    #[inline]
    fn slot_of(&mut self, id: SegmentId) -> Result<usize, Trap> {
        if let Some((s, i)) = self.last {
            if s == id {
                return Ok(i);
            }
        }
        let i = *self
            .index
            .get(&id)
            .ok_or_else(|| Trap::new(ErrorKind::SegmentReleased, format!("{id} is not live")))?;
        self.last = Some((id, i));
        Ok(i)
    }

    /// Bytecode trampoline: maps a bytecode address to its compiled code,
    /// compiling on first use.
    #[inline]
    pub fn enter_bytecode(&mut self, vm: &mut Vm, addr: CodeAddr) -> Result<PoolOffset, Trap> {
        let slot = self.slot_of(addr.seg)?;
        let live = self.slots[slot].as_ref().expect("indexed slot is live");
        let ofs = addr.ofs as usize;
        if live.boundaries.get(ofs) != Some(&true) {
            return Err(Trap::new(
                ErrorKind::BadCodeAddress,
                format!("{}:{} is not an instruction boundary", addr.seg, ofs),
            ));
        }
        if live.broken {
            return Err(Trap::new(
                ErrorKind::PoolExhausted,
                format!("{} lost its code to pool exhaustion", addr.seg),
            ));
        }
        let w = live.seg.code[ofs];
        if w >= BIAS {
            return Ok(PoolOffset((w - BIAS) as usize));
        }
        self.compile_slot(vm, slot, ofs)
    }

    /// Compile trampoline: compiles a batch starting at `addr`, whose opcode
    /// word must not be patched yet.
    pub fn compile(&mut self, vm: &mut Vm, addr: CodeAddr) -> Result<PoolOffset, Trap> {
        let slot = self.slot_of(addr.seg)?;
        self.compile_slot(vm, slot, addr.ofs as usize)
    }

    fn emit(&mut self, seg: SegmentId, words: &[i64]) -> Result<PoolOffset, Trap> {
        match self.pool.emit(seg, words) {
            Ok(o) => Ok(o),
            Err(e) => {
                if let Some(&slot) = self.index.get(&seg) {
                    if let Some(live) = self.slots[slot].as_mut() {
                        live.broken = true;
                    }
                }
                Err(Trap::new(ErrorKind::PoolExhausted, e.to_string()))
            }
        }
    }

    fn code_word(&self, slot: usize, ofs: usize) -> i64 {
        self.slots[slot].as_ref().expect("live").seg.code[ofs]
    }

    fn patch(&mut self, slot: usize, iaddr: usize, at: PoolOffset) {
        let code = &mut self.slots[slot].as_mut().expect("live").seg.code;
        debug_assert!(code[iaddr] < BIAS);
        code[iaddr] = BIAS + at.0 as i64;
    }

    /// Pool offset of an already-compiled target, if it is one.
    fn resolved(&self, slot: usize, target: usize) -> Option<i64> {
        let w = self.code_word(slot, target);
        (w >= BIAS).then_some(w - BIAS)
    }

    fn compile_slot(&mut self, vm: &mut Vm, slot: usize, start: usize) -> Result<PoolOffset, Trap> {
        let acquired_before = self.pool.acquisitions();
        let result = self.compile_batch(slot, start);
        vm.stats.compilations += 1;
        vm.stats.chunks_allocated += self.pool.acquisitions() - acquired_before;
        result
    }

    fn compile_batch(&mut self, slot: usize, start: usize) -> Result<PoolOffset, Trap> {
        let seg = self.slots[slot].as_ref().expect("live").seg.id;
        let code_len = self.slots[slot].as_ref().expect("live").seg.code.len();
        let mut listing = self.config.dump.then(String::new);
        let mut entry = None;
        let mut pc = start;

        let bad =
            |e: crate::bytecode::DecodeError| Trap::new(ErrorKind::BadCodeAddress, e.to_string());

        loop {
            if pc >= code_len {
                // Falling off the end: resolves to a bad-address error at run time.
                let at = self.emit(seg, &[handler::GOTO_BC, seg.0 as i64, pc as i64])?;
                note(
                    &mut listing,
                    at,
                    &[handler::GOTO_BC, seg.0 as i64, pc as i64],
                );
                entry.get_or_insert(at);
                break;
            }
            if pc != start {
                if let Some(target) = self.resolved(slot, pc) {
                    let op = [handler::JUMP, target];
                    let at = self.emit(seg, &op)?;
                    note(&mut listing, at, &op);
                    break;
                }
            }
            let ins = {
                let code = &self.slots[slot].as_ref().expect("live").seg.code;
                decode_at(code, pc).map_err(bad)?
            };

            if ins.opcode == Opcode::CCall && self.config.float_opt {
                let k = {
                    let code = &self.slots[slot].as_ref().expect("live").seg.code;
                    detect_float_run(code, pc)
                };
                if k >= 2 {
                    pc = self.emit_float_run(slot, seg, pc, k, &mut entry, &mut listing)?;
                    continue;
                }
            }

            match ins.opcode {
                Opcode::Branch => {
                    let target = ins.target().expect("branch has a target") as usize;
                    let op = if let Some(t) = self.resolved(slot, target) {
                        vec![handler::JUMP, t]
                    } else if target == pc {
                        vec![handler::JUMP, UNRESOLVED]
                    } else {
                        vec![handler::GOTO_BC, seg.0 as i64, target as i64]
                    };
                    let at = self.emit(seg, &op)?;
                    if op[1] == UNRESOLVED {
                        self.pool.set_word(at.0 + 1, at.0 as i64);
                    }
                    self.patch(slot, pc, at);
                    entry.get_or_insert(at);
                    note(&mut listing, at, &op);
                    break;
                }
                Opcode::BranchIf | Opcode::BranchIfNot => {
                    let target = ins.target().expect("branch has a target") as usize;
                    let resolved = self.resolved(slot, target).unwrap_or(UNRESOLVED);
                    let op = [ins.opcode as i64, resolved, seg.0 as i64, target as i64];
                    let at = self.emit(seg, &op)?;
                    if target == pc {
                        self.pool.set_word(at.0 + 1, at.0 as i64);
                    }
                    self.patch(slot, pc, at);
                    entry.get_or_insert(at);
                    note(&mut listing, at, &op);
                }
                _ => {
                    let op = translate(&ins, seg);
                    let at = self.emit(seg, &op)?;
                    self.patch(slot, pc, at);
                    entry.get_or_insert(at);
                    note(&mut listing, at, &op);
                    if matches!(ins.opcode, Opcode::Stop | Opcode::Return | Opcode::AppTerm) {
                        break;
                    }
                }
            }
            pc = ins.next();
        }

        if let Some(text) = listing {
            self.dump_log
                .push(format!("batch {}:{} ->\n{}", seg, start, text.trim_end()));
        }
        Ok(entry.expect("a batch emits at least one op"))
    }

    fn emit_float_run(
        &mut self,
        slot: usize,
        seg: SegmentId,
        start: usize,
        k: usize,
        entry: &mut Option<PoolOffset>,
        listing: &mut Option<String>,
    ) -> Result<usize, Trap> {
        let mut calls = Vec::with_capacity(k);
        let mut pc = start;
        for _ in 0..k {
            let code = &self.slots[slot].as_ref().expect("live").seg.code;
            let ins = decode_at(code, pc).expect("run was decoded by detect_float_run");
            calls.push(ins);
            pc = ins.next();
        }
        let prims: Vec<usize> = calls.iter().map(|c| c.operands[0] as usize).collect();
        for (j, (ins, (src, dst))) in calls.iter().zip(fusion_flags(&prims)).enumerate() {
            let flags = ((src as i64) * SRC_FACC) | ((dst as i64) * DST_FACC);
            let op = [handler::CCALL_F, ins.operands[0], ins.operands[1], flags];
            let at = self.emit(seg, &op)?;
            if j == 0 {
                self.patch(slot, ins.iaddr, at);
                entry.get_or_insert(at);
            }
            note(listing, at, &op);
        }
        Ok(pc)
    }

    /// Compiles (if needed) and runs the segment from its entry point.
    pub fn run(&mut self, vm: &mut Vm, id: SegmentId) -> Outcome {
        let (entry, globals) = match self.segment(id) {
            Some(s) => (s.entry, s.globals_init.clone()),
            None => {
                return Outcome::error(
                    Trap::new(ErrorKind::SegmentReleased, format!("{id} is not live")),
                    None,
                )
            }
        };
        if let Err(t) = vm.load_globals(&globals) {
            return Outcome::error(t, None);
        }
        let addr = CodeAddr {
            seg: id,
            ofs: entry as u32,
        };
        match self.enter_bytecode(vm, addr) {
            Ok(start) => self.execute(vm, start),
            Err(t) => Outcome::error(t, Some(addr)),
        }
    }

    /// Dispatch loop over compiled ops.
    pub fn execute(&mut self, vm: &mut Vm, start: PoolOffset) -> Outcome {
        let mut pc = start.0;
        match self.dispatch(vm, &mut pc) {
            Ok(v) => Outcome::Finished { result: v },
            Err(mut t) => {
                let _ = write!(t.message, " (compiled op {})", pc);
                Outcome::error(t, None)
            }
        }
    }

    fn dispatch(&mut self, vm: &mut Vm, pc: &mut usize) -> Result<Value, Trap> {
        loop {
            let at = *pc;
            let h = self.pool.word(at);
            vm.stats.instructions_executed += 1;
            match h {
                handler::STOP => return Ok(vm.accu),
                handler::CONSTINT => {
                    vm.accu = Value::int(self.pool.word(at + 1));
                    *pc = at + 2;
                }
                handler::ACC => {
                    vm.accu = vm.peek(self.pool.word(at + 1) as usize)?;
                    *pc = at + 2;
                }
                handler::PUSH => {
                    vm.push(vm.accu)?;
                    *pc = at + 1;
                }
                handler::POP => {
                    vm.drop_slots(self.pool.word(at + 1) as usize)?;
                    *pc = at + 2;
                }
                handler::ASSIGN => {
                    ops::assign(vm, self.pool.word(at + 1) as usize)?;
                    *pc = at + 2;
                }
                handler::ENVACC => {
                    ops::env_acc(vm, self.pool.word(at + 1) as usize)?;
                    *pc = at + 2;
                }
                handler::ADDINT => {
                    ops::int_op(vm, IntOp::Add)?;
                    *pc = at + 1;
                }
                handler::SUBINT => {
                    ops::int_op(vm, IntOp::Sub)?;
                    *pc = at + 1;
                }
                handler::MULINT => {
                    ops::int_op(vm, IntOp::Mul)?;
                    *pc = at + 1;
                }
                handler::DIVINT => {
                    ops::int_op(vm, IntOp::Div)?;
                    *pc = at + 1;
                }
                handler::MODINT => {
                    ops::int_op(vm, IntOp::Mod)?;
                    *pc = at + 1;
                }
                handler::EQ => {
                    ops::compare(vm, CmpOp::Eq)?;
                    *pc = at + 1;
                }
                handler::NEQ => {
                    ops::compare(vm, CmpOp::Neq)?;
                    *pc = at + 1;
                }
                handler::LTINT => {
                    ops::compare(vm, CmpOp::Lt)?;
                    *pc = at + 1;
                }
                handler::LEINT => {
                    ops::compare(vm, CmpOp::Le)?;
                    *pc = at + 1;
                }
                handler::GTINT => {
                    ops::compare(vm, CmpOp::Gt)?;
                    *pc = at + 1;
                }
                handler::GEINT => {
                    ops::compare(vm, CmpOp::Ge)?;
                    *pc = at + 1;
                }
                handler::OFFSETINT => {
                    ops::offset_int(vm, self.pool.word(at + 1))?;
                    *pc = at + 2;
                }
                handler::BRANCH | handler::BRANCHIF | handler::BRANCHIFNOT => {
                    let taken = match h {
                        handler::BRANCH => true,
                        handler::BRANCHIF => vm.accu.is_truthy(),
                        _ => !vm.accu.is_truthy(),
                    };
                    if !taken {
                        *pc = at + 4;
                        continue;
                    }
                    let resolved = self.pool.word(at + 1);
                    if resolved != UNRESOLVED {
                        *pc = resolved as usize;
                    } else {
                        let target = self.code_addr(at + 2);
                        let o = self.enter_bytecode(vm, target)?;
                        self.pool.set_word(at + 1, o.0 as i64);
                        *pc = o.0;
                    }
                }
                handler::CLOSURE => {
                    let nvars = self.pool.word(at + 1) as usize;
                    let code = self.code_addr(at + 2);
                    ops::closure(vm, nvars, code)?;
                    *pc = at + 4;
                }
                handler::PUSH_RETADDR => {
                    let ret = self.code_addr(at + 1);
                    ops::push_retaddr(vm, ret)?;
                    *pc = at + 3;
                }
                handler::APPLY => {
                    ops::closure_code(vm, vm.accu)?;
                    vm.extra_args = self.pool.word(at + 1) as usize - 1;
                    vm.env = vm.accu;
                    *pc = at + 2;
                }
                handler::ENTER_CLOSURE => {
                    let target = ops::closure_code(vm, vm.env)?;
                    *pc = self.enter_bytecode(vm, target)?.0;
                }
                handler::RETURN => {
                    vm.drop_slots(self.pool.word(at + 1) as usize)?;
                    if vm.extra_args > 0 {
                        ops::closure_code(vm, vm.accu)?;
                        vm.extra_args -= 1;
                        vm.env = vm.accu;
                        *pc = at + 3;
                    } else {
                        *pc = at + 2;
                    }
                }
                handler::RET_FRAME => {
                    let ret = ops::pop_frame(vm)?;
                    *pc = self.enter_bytecode(vm, ret)?.0;
                }
                handler::RESTART => {
                    ops::restart(vm)?;
                    *pc = at + 1;
                }
                handler::GRAB => {
                    let n = self.pool.word(at + 1) as usize;
                    if vm.extra_args >= n {
                        vm.extra_args -= n;
                        *pc = at + 5;
                    } else {
                        let restart_at = self.code_addr(at + 2);
                        let ret = ops::grab(vm, n, restart_at)?.expect("too few arguments");
                        *pc = self.enter_bytecode(vm, ret)?.0;
                    }
                }
                handler::APPTERM => {
                    let n = self.pool.word(at + 1) as usize;
                    let s = self.pool.word(at + 2) as usize;
                    ops::appterm(vm, n, s)?;
                    *pc = at + 3;
                }
                handler::MAKEBLOCK => {
                    let size = self.pool.word(at + 1) as usize;
                    let tag = self.pool.word(at + 2) as u8;
                    ops::make_block(vm, size, tag)?;
                    *pc = at + 3;
                }
                handler::GETFIELD => {
                    ops::get_field(vm, self.pool.word(at + 1) as usize)?;
                    *pc = at + 2;
                }
                handler::SETFIELD => {
                    ops::set_field(vm, self.pool.word(at + 1) as usize)?;
                    *pc = at + 2;
                }
                handler::GETGLOBAL => {
                    ops::get_global(vm, self.pool.word(at + 1) as usize)?;
                    *pc = at + 2;
                }
                handler::SETGLOBAL => {
                    ops::set_global(vm, self.pool.word(at + 1) as usize)?;
                    *pc = at + 2;
                }
                handler::VECTLENGTH => {
                    ops::vect_length(vm)?;
                    *pc = at + 1;
                }
                handler::GETVECTITEM => {
                    ops::get_vect_item(vm)?;
                    *pc = at + 1;
                }
                handler::SETVECTITEM => {
                    ops::set_vect_item(vm)?;
                    *pc = at + 1;
                }
                handler::CCALL => {
                    let p = self.pool.word(at + 1) as usize;
                    let nargs = self.pool.word(at + 2) as usize;
                    ccall(vm, p, nargs, false, false)?;
                    *pc = at + 3;
                }
                handler::CCALL_F => {
                    let p = self.pool.word(at + 1) as usize;
                    let nargs = self.pool.word(at + 2) as usize;
                    let flags = self.pool.word(at + 3);
                    ccall(vm, p, nargs, flags & SRC_FACC != 0, flags & DST_FACC != 0)?;
                    *pc = at + 4;
                }
                handler::JUMP => {
                    vm.stats.instructions_executed -= 1;
                    *pc = self.pool.word(at + 1) as usize;
                }
                handler::GOTO_BC => {
                    let target = self.code_addr(at + 1);
                    let o = self.enter_bytecode(vm, target)?;
                    self.pool.set_word(at, handler::JUMP);
                    self.pool.set_word(at + 1, o.0 as i64);
                    *pc = o.0;
                }
                other => {
                    return Err(Trap::new(
                        ErrorKind::BadCodeAddress,
                        format!("invalid handler word {other}"),
                    ))
                }
            }
        }
    }

    #[inline]
    fn code_addr(&self, at: usize) -> CodeAddr {
        CodeAddr {
            seg: SegmentId(self.pool.word(at) as u32),
            ofs: self.pool.word(at + 1) as u32,
        }
    }

    /// Renders the compiled ops of a segment's batches starting at `from`,
    /// following fall-through until a terminator.
    pub fn listing(&self, from: PoolOffset, max_ops: usize) -> String {
        let mut out = String::new();
        let mut at = from.0;
        for _ in 0..max_ops {
            let h = self.pool.word(at);
            let w = op_width(h);
            let ops: Vec<i64> = self.pool.words()[at..at + w].to_vec();
            note(&mut Some(&mut out), PoolOffset(at), &ops);
            match h {
                handler::STOP | handler::GOTO_BC | handler::ENTER_CLOSURE | handler::RET_FRAME => {
                    break
                }
                handler::JUMP => at = self.pool.word(at + 1) as usize,
                _ => at += w,
            }
        }
        out
    }
}

trait Listing {
    fn push_line(&mut self, line: &str);
}

impl Listing for Option<String> {
    fn push_line(&mut self, line: &str) {
        if let Some(s) = self {
            s.push_str(line);
            s.push('\n');
        }
    }
}

impl Listing for Option<&mut String> {
    fn push_line(&mut self, line: &str) {
        if let Some(s) = self {
            s.push_str(line);
            s.push('\n');
        }
    }
}

fn note(listing: &mut impl Listing, at: PoolOffset, op: &[i64]) {
    let mut line = format!("  {:>8}  {}", at.to_string(), handler_name(op[0]));
    let operands: Vec<String> = op[1..op_width(op[0]).min(op.len())]
        .iter()
        .map(|w| w.to_string())
        .collect();
    if !operands.is_empty() {
        line.push(' ');
        line.push_str(&operands.join(", "));
    }
    if op[0] == handler::CCALL_F || op[0] == handler::CCALL {
        line.push_str(&format!("  ; {}", PRIMITIVES[op[1] as usize].name));
    }
    listing.push_line(&line);
    let w = op_width(op[0]);
    if op.len() > w {
        note(listing, PoolOffset(at.0 + w), &op[w..]);
    }
}

/// Executes a primitive call with optional float-accumulator input/output.
///
/// Argument checks happen in the same order as [`Vm::prim_invoke`], so both
/// engines report the same error for the same bad call.
#[inline]
fn ccall(vm: &mut Vm, id: usize, nargs: usize, src: bool, dst: bool) -> Result<(), Trap> {
    let first = |vm: &Vm| -> Result<f64, Trap> {
        if src {
            Ok(vm.facc)
        } else {
            vm.unbox_float(vm.accu)
        }
    };
    match id {
        prim::ADD_FLOAT | prim::SUB_FLOAT | prim::MUL_FLOAT | prim::DIV_FLOAT => {
            let rhs = vm.peek(0)?;
            vm.drop_slots(1)?;
            let a = first(vm)?;
            let b = vm.unbox_float(rhs)?;
            finish_float(vm, float_arith(id, a, b), dst)
        }
        prim::SQRT_FLOAT | prim::NEG_FLOAT | prim::SIN_FLOAT | prim::COS_FLOAT => {
            let a = first(vm)?;
            finish_float(vm, float_arith(id, a, 0.0), dst)
        }
        prim::FLOAT_OF_INT => {
            let i = vm.accu.as_int()?;
            finish_float(vm, float_of_int(i), dst)
        }
        prim::INT_OF_FLOAT => {
            let a = first(vm)?;
            vm.accu = Value::Int(int_of_float(a));
            Ok(())
        }
        prim::ARRAY_GET_FLOAT => {
            let idx = vm.peek(0)?;
            vm.drop_slots(1)?;
            let idx = idx.as_int()?;
            let f = vm.heap.float_array_get(vm.accu, idx)?;
            finish_float(vm, f, dst)
        }
        prim::EQ_FLOAT | prim::LT_FLOAT | prim::LE_FLOAT => {
            let rhs = vm.peek(0)?;
            vm.drop_slots(1)?;
            let a = first(vm)?;
            let b = vm.unbox_float(rhs)?;
            vm.accu = Value::bool(float_compare(id, a, b));
            Ok(())
        }
        _ => {
            debug_assert!(!src && !dst);
            let mut args = [Value::UNIT; 3];
            args[0] = vm.accu;
            for (i, slot) in args.iter_mut().enumerate().take(nargs).skip(1) {
                *slot = vm.peek(i - 1)?;
            }
            vm.drop_slots(nargs - 1)?;
            vm.accu = vm.prim_invoke(id, &args[..nargs])?;
            Ok(())
        }
    }
}

#[inline]
fn finish_float(vm: &mut Vm, f: f64, dst: bool) -> Result<(), Trap> {
    if dst {
        vm.facc = f;
        vm.stats.boxes_elided += 1;
    } else {
        vm.accu = vm.box_float(f)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::assemble;
    use crate::runtime::VmConfig;

    fn jit() -> Jit {
        Jit::new(JitConfig::default()).unwrap()
    }

    fn vm() -> Vm {
        Vm::new(VmConfig::default())
    }

    #[test]
    fn first_entry_compiles_and_patches() {
        let mut jit = jit();
        let mut vm = vm();
        let id = jit.load(assemble("constint 7\nstop").unwrap());
        let addr = CodeAddr { seg: id, ofs: 0 };
        let o = jit.enter_bytecode(&mut vm, addr).unwrap();
        assert_eq!(vm.stats.compilations, 1);
        let code = &jit.segment(id).unwrap().code;
        assert_eq!(code[0], BIAS + o.0 as i64);
        assert!(code[2] >= BIAS);
        let again = jit.enter_bytecode(&mut vm, addr).unwrap();
        assert_eq!(again, o);
        assert_eq!(vm.stats.compilations, 1);
        assert_eq!(jit.execute(&mut vm, o).result(), Some(Value::Int(7)));
    }

    #[test]
    fn self_loop_jumps_to_itself() {
        let mut jit = jit();
        let mut vm = vm();
        let id = jit.load(assemble("l: branch l").unwrap());
        let o = jit
            .enter_bytecode(&mut vm, CodeAddr { seg: id, ofs: 0 })
            .unwrap();
        assert_eq!(jit.pool().word(o.0), handler::JUMP);
        assert_eq!(jit.pool().word(o.0 + 1), o.0 as i64);
    }

    #[test]
    fn forward_conditional_compiles_lazily() {
        let src = "
            constint 1
            branchif yes
            constint 2
            stop
        yes:
            constint 3
            stop
        ";
        let mut jit = jit();
        let mut vm = vm();
        let id = jit.load(assemble(src).unwrap());
        assert_eq!(jit.run(&mut vm, id).result(), Some(Value::Int(3)));
        assert_eq!(vm.stats.compilations, 2);
    }

    #[test]
    fn released_segment_rejects_entry() {
        let mut jit = jit();
        let mut vm = vm();
        let id = jit.load(assemble("constint 7\nstop").unwrap());
        jit.run(&mut vm, id);
        assert_eq!(jit.release_bytecode(id).unwrap(), 1);
        assert_eq!(jit.pool().free_count(), jit.pool().chunk_count());
        let err = jit
            .enter_bytecode(&mut vm, CodeAddr { seg: id, ofs: 0 })
            .unwrap_err();
        assert_eq!(err.kind, ErrorKind::SegmentReleased);
        assert_eq!(jit.release_bytecode(id), Err(JitError::UnknownSegment(id)));
    }

    const FLOAT_CHAIN: &str = "
        ccall caml_array_unsafe_get_float, 2
        ccall caml_mul_float, 2
        ccall caml_add_float, 2
        ccall caml_add_float, 2
        ccall caml_sqrt_float, 1
        push
        stop
    ";

    #[test]
    fn float_run_detection() {
        let seg = assemble(FLOAT_CHAIN).unwrap();
        assert_eq!(detect_float_run(&seg.code, 0), 5);
        assert_eq!(detect_float_run(&seg.code, 3), 4);
        let seg = assemble("ccall caml_print, 1\nccall caml_print, 1\nstop").unwrap();
        assert_eq!(detect_float_run(&seg.code, 0), 1);
        let seg = assemble(
            "ccall caml_array_unsafe_get_float, 2\nccall caml_mul_float, 2\nccall caml_int_of_float, 1\nccall caml_neg_float, 1\nstop",
        )
        .unwrap();
        assert_eq!(detect_float_run(&seg.code, 0), 3);
    }

    #[test]
    fn fusion_flags_chain() {
        let flags = fusion_flags(&[10, 2, 0, 0, 4]);
        assert_eq!(
            flags,
            vec![
                (false, true),
                (true, true),
                (true, true),
                (true, true),
                (true, false)
            ]
        );
        assert_eq!(fusion_flags(&[16]), vec![(false, false)]);
        assert_eq!(
            fusion_flags(&[10, 2, 9]),
            vec![(false, true), (true, true), (true, false)]
        );
    }

    #[test]
    fn dump_lists_batches() {
        let mut jit = Jit::new(JitConfig {
            dump: true,
            ..JitConfig::default()
        })
        .unwrap();
        let mut vm = vm();
        let id = jit.load(assemble("constint 7\nstop").unwrap());
        jit.run(&mut vm, id);
        let dump = jit.take_dump();
        assert_eq!(dump.len(), 1);
        assert!(dump[0].contains("CONSTINT 7"), "{}", dump[0]);
        assert!(dump[0].contains("STOP"));
    }
}
