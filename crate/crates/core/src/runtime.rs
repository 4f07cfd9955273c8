//! Values, the two-generation heap, and the primitive table.
//!
//! Blocks live either in the minor heap (a bump-allocated nursery) or in the
//! append-only major arena. Both arenas are arrays of 64-bit words: one
//! header word (`tag | size << 8`) followed by `size` payload words. Value
//! fields are stored in an internal word encoding; float blocks hold raw
//! binary64 bits and are never scanned by the collector.

use std::fmt;

use thiserror::Error;

use crate::bytecode::{GlobalInit, GlobalPayload, SegmentId};

pub const CLOSURE_TAG: u8 = 247;
pub const FLOAT_TAG: u8 = 253;
pub const FLOAT_ARRAY_TAG: u8 = 254;

pub const DEFAULT_STACK_WORDS: usize = 262_144;
pub const DEFAULT_YOUNG_WORDS: usize = 65_536;
/// 64 MiB of 8-byte words.
pub const DEFAULT_MAJOR_LIMIT_WORDS: usize = 64 * 1024 * 1024 / 8;

const INT_BITS: u32 = 63;
const YOUNG_BIT: u32 = 1 << 31;
const FORWARDED: u64 = 1 << 63;

/// Reduces `i` to the signed 63-bit range (two's complement wrap).
#[inline]
pub fn wrap63(i: i64) -> i64 {
    (i << (64 - INT_BITS)) >> (64 - INT_BITS)
}

/// Reference to a heap block. The high bit selects the minor heap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Handle(u32);

impl Handle {
    fn young(index: usize) -> Handle {
        Handle(index as u32 | YOUNG_BIT)
    }

    fn major(index: usize) -> Handle {
        Handle(index as u32)
    }

    #[inline]
    pub fn is_young(self) -> bool {
        self.0 & YOUNG_BIT != 0
    }

    /// Word index of the block header within its arena.
    #[inline]
    pub fn index(self) -> usize {
        (self.0 & !YOUNG_BIT) as usize
    }
}

/// A bytecode address: segment plus word index of an opcode word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CodeAddr {
    pub seg: SegmentId,
    pub ofs: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Value {
    Int(i64),
    Ref(Handle),
    Code(CodeAddr),
}

impl Value {
    pub const UNIT: Value = Value::Int(0);

    #[inline]
    pub fn int(i: i64) -> Value {
        Value::Int(wrap63(i))
    }

    #[inline]
    pub fn bool(b: bool) -> Value {
        Value::Int(b as i64)
    }

    #[inline]
    pub fn as_int(self) -> Result<i64, Trap> {
        match self {
            Value::Int(i) => Ok(i),
            other => Err(Trap::type_error(format!(
                "expected an integer, found {other:?}"
            ))),
        }
    }

    #[inline]
    pub fn is_truthy(self) -> bool {
        self != Value::Int(0)
    }

    #[inline]
    fn encode(self) -> u64 {
        match self {
            Value::Int(i) => ((i as u64) << 1) | 1,
            Value::Ref(h) => (h.0 as u64) << 2,
            Value::Code(c) => ((((c.seg.0 as u64) << 26) | c.ofs as u64) << 2) | 2,
        }
    }

    #[inline]
    fn decode(w: u64) -> Value {
        if w & 1 == 1 {
            Value::Int((w as i64) >> 1)
        } else if w & 2 == 0 {
            Value::Ref(Handle((w >> 2) as u32))
        } else {
            let bits = w >> 2;
            Value::Code(CodeAddr {
                seg: SegmentId((bits >> 26) as u32),
                ofs: (bits & ((1 << 26) - 1)) as u32,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorKind {
    TypeError,
    BoundsError,
    DivisionByZero,
    StackOverflow,
    BadCodeAddress,
    HeapExhausted,
    SegmentReleased,
    PoolExhausted,
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A runtime failure raised by an instruction or primitive.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind}: {message}")]
pub struct Trap {
    pub kind: ErrorKind,
    pub message: String,
}

impl Trap {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Trap {
        Trap {
            kind,
            message: message.into(),
        }
    }

    pub fn type_error(message: impl Into<String>) -> Trap {
        Trap::new(ErrorKind::TypeError, message)
    }

    pub fn bounds(message: impl Into<String>) -> Trap {
        Trap::new(ErrorKind::BoundsError, message)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StatCounters {
    pub minor_allocs: u64,
    pub minor_collections: u64,
    pub words_promoted: u64,
    pub instructions_executed: u64,
    pub compilations: u64,
    pub chunks_allocated: u64,
    pub boxes_elided: u64,
}

impl StatCounters {
    pub fn entries(&self) -> [(&'static str, u64); 7] {
        [
            ("minor_allocs", self.minor_allocs),
            ("minor_collections", self.minor_collections),
            ("words_promoted", self.words_promoted),
            ("instructions_executed", self.instructions_executed),
            ("compilations", self.compilations),
            ("chunks_allocated", self.chunks_allocated),
            ("boxes_elided", self.boxes_elided),
        ]
    }
}

impl fmt::Display for StatCounters {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Heap

#[inline]
fn header(tag: u8, size: usize) -> u64 {
    tag as u64 | ((size as u64) << 8)
}

#[inline]
fn header_tag(h: u64) -> u8 {
    h as u8
}

#[inline]
fn header_size(h: u64) -> usize {
    ((h & !FORWARDED) >> 8) as usize
}

#[inline]
fn scannable(tag: u8) -> bool {
    tag != FLOAT_TAG && tag != FLOAT_ARRAY_TAG
}

#[derive(Debug, Clone)]
pub struct Heap {
    young: Vec<u64>,
    young_ptr: usize,
    major: Vec<u64>,
    major_limit: usize,
    /// Major-arena word indices that may hold young references.
    remembered: Vec<usize>,
}

impl Heap {
    pub fn new(young_words: usize, major_limit: usize) -> Heap {
        Heap {
            young: vec![0; young_words],
            young_ptr: 0,
            major: Vec::new(),
            major_limit,
            remembered: Vec::new(),
        }
    }

    pub fn young_words(&self) -> usize {
        self.young.len()
    }

    /// Words used in the minor heap; the allocation cursor.
    pub fn young_cursor(&self) -> usize {
        self.young_ptr
    }

    pub fn major_words(&self) -> usize {
        self.major.len()
    }

    #[inline]
    fn word(&self, h: Handle, i: usize) -> u64 {
        if h.is_young() {
            self.young[h.index() + i]
        } else {
            self.major[h.index() + i]
        }
    }

    #[inline]
    fn word_mut(&mut self, h: Handle, i: usize) -> &mut u64 {
        if h.is_young() {
            &mut self.young[h.index() + i]
        } else {
            &mut self.major[h.index() + i]
        }
    }

    #[inline]
    pub fn tag(&self, h: Handle) -> u8 {
        header_tag(self.word(h, 0))
    }

    /// Payload size in words (element count for float arrays).
    #[inline]
    pub fn size(&self, h: Handle) -> usize {
        header_size(self.word(h, 0))
    }

    #[inline]
    fn check_values(&self, h: Handle, i: usize) -> Result<(), Trap> {
        let hd = self.word(h, 0);
        if !scannable(header_tag(hd)) {
            return Err(Trap::type_error("field access on a float block"));
        }
        if i >= header_size(hd) {
            return Err(Trap::bounds(format!(
                "field {i} of a block of size {}",
                header_size(hd)
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn field(&self, h: Handle, i: usize) -> Result<Value, Trap> {
        self.check_values(h, i)?;
        Ok(Value::decode(self.word(h, i + 1)))
    }

    #[inline]
    pub fn set_field(&mut self, h: Handle, i: usize, v: Value) -> Result<(), Trap> {
        self.check_values(h, i)?;
        self.store(h, i, v);
        Ok(())
    }

    /// Unchecked store with the old-to-young write barrier.
    #[inline]
    fn store(&mut self, h: Handle, i: usize, v: Value) {
        if !h.is_young() {
            if let Value::Ref(r) = v {
                if r.is_young() {
                    self.remembered.push(h.index() + i + 1);
                }
            }
        }
        *self.word_mut(h, i + 1) = v.encode();
    }

    /// Reads the contents of a boxed float.
    #[inline]
    pub fn unbox_float(&self, v: Value) -> Result<f64, Trap> {
        match v {
            Value::Ref(h) if self.tag(h) == FLOAT_TAG => Ok(f64::from_bits(self.word(h, 1))),
            other => Err(Trap::type_error(format!(
                "expected a boxed float, found {}",
                self.kind_name(other)
            ))),
        }
    }

    fn float_array(&self, v: Value) -> Result<Handle, Trap> {
        match v {
            Value::Ref(h) if self.tag(h) == FLOAT_ARRAY_TAG => Ok(h),
            other => Err(Trap::type_error(format!(
                "expected a float array, found {}",
                self.kind_name(other)
            ))),
        }
    }

    fn float_index(&self, h: Handle, idx: i64) -> Result<usize, Trap> {
        let len = self.size(h);
        if idx < 0 || idx as usize >= len {
            return Err(Trap::bounds(format!(
                "index {idx} of a float array of length {len}"
            )));
        }
        Ok(idx as usize)
    }

    pub fn float_array_get(&self, arr: Value, idx: i64) -> Result<f64, Trap> {
        let h = self.float_array(arr)?;
        let i = self.float_index(h, idx)?;
        Ok(f64::from_bits(self.word(h, i + 1)))
    }

    pub fn float_array_set(&mut self, arr: Value, idx: i64, f: f64) -> Result<(), Trap> {
        let h = self.float_array(arr)?;
        let i = self.float_index(h, idx)?;
        *self.word_mut(h, i + 1) = f.to_bits();
        Ok(())
    }

    fn kind_name(&self, v: Value) -> String {
        match v {
            Value::Int(i) => format!("integer {i}"),
            Value::Code(_) => "a code address".to_string(),
            Value::Ref(h) => format!("a block with tag {}", self.tag(h)),
        }
    }

    fn alloc_major(&mut self, tag: u8, size: usize) -> Result<Handle, Trap> {
        let base = self.major.len();
        if base + size + 1 > self.major_limit {
            return Err(Trap::new(
                ErrorKind::HeapExhausted,
                format!("major arena limit of {} words reached", self.major_limit),
            ));
        }
        let fill = if scannable(tag) {
            Value::UNIT.encode()
        } else {
            0
        };
        self.major.push(header(tag, size));
        self.major.resize(base + size + 1, fill);
        Ok(Handle::major(base))
    }

    #[inline]
    fn try_alloc_young(&mut self, tag: u8, size: usize) -> Option<Handle> {
        let base = self.young_ptr;
        if base + size + 1 > self.young.len() || self.is_oversized(size) {
            return None;
        }
        self.young_ptr = base + size + 1;
        self.young[base] = header(tag, size);
        let fill = if scannable(tag) {
            Value::UNIT.encode()
        } else {
            0
        };
        self.young[base + 1..base + 1 + size].fill(fill);
        Some(Handle::young(base))
    }

    fn is_oversized(&self, size: usize) -> bool {
        size + 1 > self.young.len() / 4
    }
}

// ---------------------------------------------------------------------------
// Primitives

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Primitive {
    pub id: usize,
    pub name: &'static str,
    pub arity: usize,
    /// The first argument (the accumulator) is a boxed float.
    pub consumes_float_first: bool,
    pub produces_float: bool,
}

macro_rules! primitives {
    ($($id:expr, $name:expr, $arity:expr, $cf:expr, $pf:expr;)*) => {
        pub const PRIMITIVES: &[Primitive] = &[
            $(Primitive { id: $id, name: $name, arity: $arity, consumes_float_first: $cf, produces_float: $pf },)*
        ];
    };
}

primitives! {
    0, "caml_add_float", 2, true, true;
    1, "caml_sub_float", 2, true, true;
    2, "caml_mul_float", 2, true, true;
    3, "caml_div_float", 2, true, true;
    4, "caml_sqrt_float", 1, true, true;
    5, "caml_neg_float", 1, true, true;
    6, "caml_sin_float", 1, true, true;
    7, "caml_cos_float", 1, true, true;
    8, "caml_float_of_int", 1, false, true;
    9, "caml_int_of_float", 1, true, false;
    10, "caml_array_unsafe_get_float", 2, false, true;
    11, "caml_array_unsafe_set_float", 3, false, false;
    12, "caml_eq_float", 2, true, false;
    13, "caml_lt_float", 2, true, false;
    14, "caml_le_float", 2, true, false;
    15, "caml_make_float_array", 2, false, false;
    16, "caml_print", 1, false, false;
}

pub mod prim {
    pub const ADD_FLOAT: usize = 0;
    pub const SUB_FLOAT: usize = 1;
    pub const MUL_FLOAT: usize = 2;
    pub const DIV_FLOAT: usize = 3;
    pub const SQRT_FLOAT: usize = 4;
    pub const NEG_FLOAT: usize = 5;
    pub const SIN_FLOAT: usize = 6;
    pub const COS_FLOAT: usize = 7;
    pub const FLOAT_OF_INT: usize = 8;
    pub const INT_OF_FLOAT: usize = 9;
    pub const ARRAY_GET_FLOAT: usize = 10;
    pub const ARRAY_SET_FLOAT: usize = 11;
    pub const EQ_FLOAT: usize = 12;
    pub const LT_FLOAT: usize = 13;
    pub const LE_FLOAT: usize = 14;
    pub const MAKE_FLOAT_ARRAY: usize = 15;
    pub const PRINT: usize = 16;
}

pub fn primitive_by_name(name: &str) -> Option<&'static Primitive> {
    PRIMITIVES.iter().find(|p| p.name == name)
}

/// Arithmetic of the float-to-float primitives (ids 0..=7).
#[inline]
pub fn float_arith(id: usize, a: f64, b: f64) -> f64 {
    match id {
        prim::ADD_FLOAT => a + b,
        prim::SUB_FLOAT => a - b,
        prim::MUL_FLOAT => a * b,
        prim::DIV_FLOAT => a / b,
        prim::SQRT_FLOAT => a.sqrt(),
        prim::NEG_FLOAT => -a,
        prim::SIN_FLOAT => a.sin(),
        prim::COS_FLOAT => a.cos(),
        _ => unreachable!("primitive {id} is not float arithmetic"),
    }
}

/// Float comparisons (ids 12..=14).
#[inline]
pub fn float_compare(id: usize, a: f64, b: f64) -> bool {
    match id {
        prim::EQ_FLOAT => a == b,
        prim::LT_FLOAT => a < b,
        prim::LE_FLOAT => a <= b,
        _ => unreachable!("primitive {id} is not a float comparison"),
    }
}

/// Truncation toward zero; NaN maps to 0 and out-of-range values saturate.
#[inline]
pub fn int_of_float(f: f64) -> i64 {
    wrap63(f as i64)
}

#[inline]
pub fn float_of_int(i: i64) -> f64 {
    i as f64
}

/// Shortest decimal text that reads back as the same binary64.
pub fn format_float(f: f64) -> String {
    if f.is_nan() {
        return "nan".into();
    }
    if f.is_infinite() {
        return if f > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let plain = format!("{f}");
    let sci = format!("{f:e}");
    if sci.len() < plain.len() {
        sci
    } else {
        plain
    }
}

// ---------------------------------------------------------------------------
// VM state

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VmConfig {
    pub stack_words: usize,
    pub young_words: usize,
    pub major_limit_words: usize,
}

impl Default for VmConfig {
    fn default() -> Self {
        VmConfig {
            stack_words: DEFAULT_STACK_WORDS,
            young_words: DEFAULT_YOUNG_WORDS,
            major_limit_words: DEFAULT_MAJOR_LIMIT_WORDS,
        }
    }
}

/// The hot machine state shared by both engines.
#[derive(Debug, Clone)]
pub struct Vm {
    pub accu: Value,
    pub stack: Vec<Value>,
    /// Index of the top of stack; the stack grows toward 0.
    pub sp: usize,
    pub env: Value,
    pub extra_args: usize,
    pub pc: Option<CodeAddr>,
    pub globals: Vec<Value>,
    pub heap: Heap,
    /// Unboxed float temporary between fused primitives.
    pub facc: f64,
    pub stats: StatCounters,
    /// Text written by `caml_print`.
    pub output: Vec<u8>,
}

impl Vm {
    pub fn new(config: VmConfig) -> Vm {
        Vm {
            accu: Value::UNIT,
            stack: vec![Value::UNIT; config.stack_words],
            sp: config.stack_words,
            env: Value::UNIT,
            extra_args: 0,
            pc: None,
            globals: Vec::new(),
            heap: Heap::new(config.young_words, config.major_limit_words),
            facc: 0.0,
            stats: StatCounters::default(),
            output: Vec::new(),
        }
    }

    pub fn stack_words(&self) -> usize {
        self.stack.len()
    }

    /// Installs the segment's global table. Float data goes to the major arena.
    pub fn load_globals(&mut self, inits: &[GlobalInit]) -> Result<(), Trap> {
        self.globals = Vec::with_capacity(inits.len());
        for g in inits {
            let v = match &g.payload {
                GlobalPayload::Int(k) => Value::int(*k),
                GlobalPayload::Float(f) => {
                    let h = self.heap.alloc_major(FLOAT_TAG, 1)?;
                    *self.heap.word_mut(h, 1) = f.to_bits();
                    Value::Ref(h)
                }
                GlobalPayload::FloatArray(fs) => {
                    let h = self.heap.alloc_major(FLOAT_ARRAY_TAG, fs.len())?;
                    for (i, f) in fs.iter().enumerate() {
                        *self.heap.word_mut(h, i + 1) = f.to_bits();
                    }
                    Value::Ref(h)
                }
            };
            self.globals.push(v);
        }
        Ok(())
    }

    #[inline]
    pub fn push(&mut self, v: Value) -> Result<(), Trap> {
        if self.sp == 0 {
            return Err(Trap::new(ErrorKind::StackOverflow, "stack exhausted"));
        }
        self.sp -= 1;
        self.stack[self.sp] = v;
        Ok(())
    }

    #[inline]
    pub fn pop(&mut self) -> Result<Value, Trap> {
        let v = self.peek(0)?;
        self.sp += 1;
        Ok(v)
    }

    #[inline]
    pub fn peek(&self, i: usize) -> Result<Value, Trap> {
        self.stack
            .get(self.sp + i)
            .copied()
            .ok_or_else(|| Trap::bounds(format!("stack slot {i} is below the stack base")))
    }

    #[inline]
    pub fn poke(&mut self, i: usize, v: Value) -> Result<(), Trap> {
        match self.stack.get_mut(self.sp + i) {
            Some(slot) => {
                *slot = v;
                Ok(())
            }
            None => Err(Trap::bounds(format!(
                "stack slot {i} is below the stack base"
            ))),
        }
    }

    /// Moves `sp` toward the base by `n` slots.
    #[inline]
    pub fn drop_slots(&mut self, n: usize) -> Result<(), Trap> {
        if self.sp + n > self.stack.len() {
            return Err(Trap::bounds(format!(
                "pop of {n} slots underflows the stack"
            )));
        }
        self.sp += n;
        Ok(())
    }

    /// Allocates a block of `size` payload words.
    ///
    /// Small requests bump the minor-heap cursor, collecting first when the
    /// nursery is full. Requests over a quarter of the nursery go straight
    /// to the major arena. Payload is pre-filled with `Int 0` (or `0.0`).
    #[inline]
    pub fn alloc_block(&mut self, tag: u8, size: usize) -> Result<Handle, Trap> {
        if let Some(h) = self.heap.try_alloc_young(tag, size) {
            self.stats.minor_allocs += 1;
            return Ok(h);
        }
        self.alloc_slow(tag, size)
    }

    #[cold]
    fn alloc_slow(&mut self, tag: u8, size: usize) -> Result<Handle, Trap> {
        if self.heap.is_oversized(size) {
            return self.heap.alloc_major(tag, size);
        }
        self.minor_collect()?;
        let h = self
            .heap
            .try_alloc_young(tag, size)
            .expect("nursery has room after a collection");
        self.stats.minor_allocs += 1;
        Ok(h)
    }

    #[inline]
    pub fn box_float(&mut self, f: f64) -> Result<Value, Trap> {
        let h = self.alloc_block(FLOAT_TAG, 1)?;
        *self.heap.word_mut(h, 1) = f.to_bits();
        Ok(Value::Ref(h))
    }

    /// Allocates a block and fills it from `fields`.
    pub fn alloc_with(&mut self, tag: u8, fields: &[Value]) -> Result<Value, Trap> {
        let h = self.alloc_block(tag, fields.len())?;
        for (i, v) in fields.iter().enumerate() {
            self.heap.store(h, i, *v);
        }
        Ok(Value::Ref(h))
    }

    /// Initializes field `i` of a block allocated during the current instruction.
    #[inline]
    pub fn init_field(&mut self, h: Handle, i: usize, v: Value) {
        self.heap.store(h, i, v);
    }

    /// Copies every live young block into the major arena and empties the
    /// nursery. Returns the number of words promoted.
    pub fn minor_collect(&mut self) -> Result<u64, Trap> {
        let scan_start = self.heap.major.len();
        let heap = &mut self.heap;

        self.accu = Value::decode(forward(heap, self.accu.encode())?);
        self.env = Value::decode(forward(heap, self.env.encode())?);
        for slot in &mut self.stack[self.sp..] {
            if let Value::Ref(r) = *slot {
                if r.is_young() {
                    *slot = Value::decode(forward(heap, slot.encode())?);
                }
            }
        }
        for g in &mut self.globals {
            *g = Value::decode(forward(heap, g.encode())?);
        }
        let remembered = std::mem::take(&mut heap.remembered);
        for idx in remembered {
            let w = heap.major[idx];
            heap.major[idx] = forward(heap, w)?;
        }

        // Cheney scan over the newly promoted region.
        let mut i = scan_start;
        while i < heap.major.len() {
            let hd = heap.major[i];
            let size = header_size(hd);
            if scannable(header_tag(hd)) {
                for j in i + 1..=i + size {
                    let w = heap.major[j];
                    heap.major[j] = forward(heap, w)?;
                }
            }
            i += size + 1;
        }

        heap.young_ptr = 0;
        let promoted = (heap.major.len() - scan_start) as u64;
        self.stats.minor_collections += 1;
        self.stats.words_promoted += promoted;
        Ok(promoted)
    }

    pub fn unbox_float(&self, v: Value) -> Result<f64, Trap> {
        self.heap.unbox_float(v)
    }

    /// Canonical text of an integer or boxed float.
    pub fn value_print(&self, v: Value) -> Result<String, Trap> {
        match v {
            Value::Int(i) => Ok(i.to_string()),
            Value::Ref(h) if self.heap.tag(h) == FLOAT_TAG => {
                Ok(format_float(f64::from_bits(self.heap.word(h, 1))))
            }
            other => Err(Trap::type_error(format!(
                "cannot print {}",
                self.heap.kind_name(other)
            ))),
        }
    }

    /// Structural rendering of any value, for comparing results across engines.
    pub fn describe(&self, v: Value) -> String {
        let mut out = String::new();
        self.describe_into(v, 6, &mut out);
        out
    }

    fn describe_into(&self, v: Value, depth: usize, out: &mut String) {
        use std::fmt::Write as _;
        match v {
            Value::Int(i) => {
                let _ = write!(out, "{i}");
            }
            Value::Code(c) => {
                let _ = write!(out, "<code@{}>", c.ofs);
            }
            Value::Ref(h) => {
                let tag = self.heap.tag(h);
                let size = self.heap.size(h);
                if tag == FLOAT_TAG || tag == FLOAT_ARRAY_TAG {
                    let elems: Vec<String> = (0..size)
                        .map(|i| format_float(f64::from_bits(self.heap.word(h, i + 1))))
                        .collect();
                    if tag == FLOAT_TAG {
                        out.push_str(&elems[0]);
                    } else {
                        let _ = write!(out, "[|{}|]", elems.join("; "));
                    }
                    return;
                }
                if depth == 0 {
                    out.push_str("...");
                    return;
                }
                let _ = write!(out, "{tag}:(");
                for i in 0..size {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    let f = Value::decode(self.heap.word(h, i + 1));
                    self.describe_into(f, depth - 1, out);
                }
                out.push(')');
            }
        }
    }

    /// Generic primitive entry point; `args[0]` is the accumulator.
    pub fn prim_invoke(&mut self, id: usize, args: &[Value]) -> Result<Value, Trap> {
        let p = PRIMITIVES
            .get(id)
            .ok_or_else(|| Trap::type_error(format!("unknown primitive {id}")))?;
        if args.len() != p.arity {
            return Err(Trap::type_error(format!(
                "{} expects {} arguments, got {}",
                p.name,
                p.arity,
                args.len()
            )));
        }
        match id {
            prim::ADD_FLOAT | prim::SUB_FLOAT | prim::MUL_FLOAT | prim::DIV_FLOAT => {
                let a = self.unbox_float(args[0])?;
                let b = self.unbox_float(args[1])?;
                self.box_float(float_arith(id, a, b))
            }
            prim::SQRT_FLOAT | prim::NEG_FLOAT | prim::SIN_FLOAT | prim::COS_FLOAT => {
                let a = self.unbox_float(args[0])?;
                self.box_float(float_arith(id, a, 0.0))
            }
            prim::FLOAT_OF_INT => {
                let i = args[0].as_int()?;
                self.box_float(float_of_int(i))
            }
            prim::INT_OF_FLOAT => Ok(Value::Int(int_of_float(self.unbox_float(args[0])?))),
            prim::ARRAY_GET_FLOAT => {
                let idx = args[1].as_int()?;
                let f = self.heap.float_array_get(args[0], idx)?;
                self.box_float(f)
            }
            prim::ARRAY_SET_FLOAT => {
                let idx = args[1].as_int()?;
                let f = self.unbox_float(args[2])?;
                self.heap.float_array_set(args[0], idx, f)?;
                Ok(Value::UNIT)
            }
            prim::EQ_FLOAT | prim::LT_FLOAT | prim::LE_FLOAT => {
                let a = self.unbox_float(args[0])?;
                let b = self.unbox_float(args[1])?;
                Ok(Value::bool(float_compare(id, a, b)))
            }
            prim::MAKE_FLOAT_ARRAY => self.make_float_array(args[0], args[1]),
            prim::PRINT => self.print(args[0]),
            _ => unreachable!(),
        }
    }

    pub fn make_float_array(&mut self, len: Value, init: Value) -> Result<Value, Trap> {
        let n = len.as_int()?;
        let f = self.unbox_float(init)?;
        if n < 0 {
            return Err(Trap::bounds(format!("negative float array length {n}")));
        }
        let h = self.heap.alloc_major(FLOAT_ARRAY_TAG, n as usize)?;
        for i in 0..n as usize {
            *self.heap.word_mut(h, i + 1) = f.to_bits();
        }
        Ok(Value::Ref(h))
    }

    pub fn print(&mut self, v: Value) -> Result<Value, Trap> {
        let text = self.value_print(v)?;
        self.output.extend_from_slice(text.as_bytes());
        self.output.push(b'\n');
        Ok(Value::UNIT)
    }
}

/// Forwards one encoded word: young references are copied to the major
/// arena (once) and rewritten; everything else is returned unchanged.
fn forward(heap: &mut Heap, w: u64) -> Result<u64, Trap> {
    let Value::Ref(h) = Value::decode(w) else {
        return Ok(w);
    };
    if !h.is_young() {
        return Ok(w);
    }
    let idx = h.index();
    let hd = heap.young[idx];
    if hd & FORWARDED != 0 {
        return Ok(Value::Ref(Handle::major(heap.young[idx + 1] as usize)).encode());
    }
    let size = header_size(hd);
    let base = heap.major.len();
    if base + size + 1 > heap.major_limit {
        return Err(Trap::new(
            ErrorKind::HeapExhausted,
            "major arena exhausted during minor collection",
        ));
    }
    heap.major
        .extend_from_slice(&heap.young[idx..idx + size + 1]);
    heap.young[idx] = hd | FORWARDED;
    heap.young[idx + 1] = base as u64;
    Ok(Value::Ref(Handle::major(base)).encode())
}
