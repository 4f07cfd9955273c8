//! Instruction set, `.zasm` assembler, disassembler and static validator.
//!
//! A [`Segment`] stores each instruction as its opcode word followed by its
//! operand words. Branch-like operands are offsets relative to the index of
//! the opcode word. Once the JIT compiles an instruction it overwrites the
//! opcode word with `BIAS + pool_offset`, so any word `>= BIAS` in opcode
//! position marks a compiled instruction.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::sync::atomic::{AtomicU32, Ordering};

use thiserror::Error;

use crate::runtime::{primitive_by_name, PRIMITIVES};

/// Opcode words below this value are opcodes; patched words hold `BIAS + pool offset`.
pub const BIAS: i64 = 256;

/// Largest accepted segment, in words.
pub const MAX_SEGMENT_WORDS: usize = 1 << 24;

/// Block tags that `MAKEBLOCK` may not produce.
pub const RESERVED_TAGS: [i64; 3] = [
    crate::runtime::CLOSURE_TAG as i64,
    crate::runtime::FLOAT_TAG as i64,
    crate::runtime::FLOAT_ARRAY_TAG as i64,
];

macro_rules! opcodes {
    ($($name:ident = $num:expr, $mnem:expr, [$($kind:ident),*];)*) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        #[repr(u8)]
        pub enum Opcode {
            $($name = $num,)*
        }

        impl Opcode {
            pub const ALL: &'static [Opcode] = &[$(Opcode::$name,)*];

            pub fn from_word(word: i64) -> Option<Opcode> {
                match word {
                    $($num => Some(Opcode::$name),)*
                    _ => None,
                }
            }

            pub fn mnemonic(self) -> &'static str {
                match self {
                    $(Opcode::$name => $mnem,)*
                }
            }

            /// Kinds of the operand words following the opcode word.
            pub fn operand_kinds(self) -> &'static [OperandKind] {
                match self {
                    $(Opcode::$name => &[$(OperandKind::$kind),*],)*
                }
            }
        }
    };
}

opcodes! {
    Stop = 0, "stop", [];
    ConstInt = 1, "constint", [Int];
    Acc = 2, "acc", [Int];
    Push = 3, "push", [];
    Pop = 4, "pop", [Int];
    Assign = 5, "assign", [Int];
    EnvAcc = 6, "envacc", [Int];
    AddInt = 7, "addint", [];
    SubInt = 8, "subint", [];
    MulInt = 9, "mulint", [];
    DivInt = 10, "divint", [];
    ModInt = 11, "modint", [];
    Eq = 12, "eq", [];
    Neq = 13, "neq", [];
    LtInt = 14, "ltint", [];
    LeInt = 15, "leint", [];
    GtInt = 16, "gtint", [];
    GeInt = 17, "geint", [];
    OffsetInt = 18, "offsetint", [Int];
    Branch = 19, "branch", [Label];
    BranchIf = 20, "branchif", [Label];
    BranchIfNot = 21, "branchifnot", [Label];
    Closure = 22, "closure", [Int, Label];
    PushRetAddr = 23, "push_retaddr", [Label];
    Apply = 24, "apply", [Int];
    Return = 25, "return", [Int];
    Restart = 26, "restart", [];
    Grab = 27, "grab", [Int];
    AppTerm = 28, "appterm", [Int, Int];
    MakeBlock = 29, "makeblock", [Int, Int];
    GetField = 30, "getfield", [Int];
    SetField = 31, "setfield", [Int];
    GetGlobal = 32, "getglobal", [Int];
    SetGlobal = 33, "setglobal", [Int];
    VectLength = 34, "vectlength", [];
    GetVectItem = 35, "getvectitem", [];
    SetVectItem = 36, "setvectitem", [];
    CCall = 37, "ccall", [Prim, Int];
}

impl Opcode {
    pub fn arity(self) -> usize {
        self.operand_kinds().len()
    }

    /// Total encoded size in words.
    pub fn width(self) -> usize {
        1 + self.arity()
    }

    /// Index of the code-offset operand, if the instruction has one.
    pub fn label_operand(self) -> Option<usize> {
        self.operand_kinds()
            .iter()
            .position(|k| *k == OperandKind::Label)
    }

    pub fn from_mnemonic(text: &str) -> Option<Opcode> {
        let lower = text.to_ascii_lowercase();
        Opcode::ALL
            .iter()
            .copied()
            .find(|op| op.mnemonic() == lower)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperandKind {
    Int,
    /// Code offset relative to the opcode word.
    Label,
    /// Primitive id.
    Prim,
}

/// Identifies one loaded segment; never reused within a process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SegmentId(pub u32);

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "seg{}", self.0)
    }
}

static NEXT_SEGMENT_ID: AtomicU32 = AtomicU32::new(1);

fn fresh_segment_id() -> SegmentId {
    SegmentId(NEXT_SEGMENT_ID.fetch_add(1, Ordering::Relaxed))
}

#[derive(Debug, Clone, PartialEq)]
pub enum GlobalPayload {
    Int(i64),
    Float(f64),
    FloatArray(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalInit {
    pub index: usize,
    pub payload: GlobalPayload,
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub id: SegmentId,
    pub code: Vec<i64>,
    pub entry: usize,
    pub globals_init: Vec<GlobalInit>,
    pub source_name: String,
}

impl Segment {
    /// Builds a segment from raw words without validating them.
    pub fn from_words(code: Vec<i64>, entry: usize, globals_init: Vec<GlobalInit>) -> Segment {
        Segment {
            id: fresh_segment_id(),
            code,
            entry,
            globals_init,
            source_name: String::from("<words>"),
        }
    }

    /// A copy with the same contents and a fresh id.
    pub fn fresh_copy(&self) -> Segment {
        Segment {
            id: fresh_segment_id(),
            ..self.clone()
        }
    }

    pub fn is_patched(&self) -> bool {
        self.instruction_boundaries()
            .map(|b| b.iter().any(|&i| self.code[i] >= BIAS))
            .unwrap_or(true)
    }

    /// Linear decode of the whole code array; `None` when decoding fails.
    pub fn instruction_boundaries(&self) -> Option<Vec<usize>> {
        let mut out = Vec::new();
        let mut pc = 0;
        while pc < self.code.len() {
            let op = Opcode::from_word(self.code[pc])?;
            out.push(pc);
            pc += op.width();
        }
        (pc == self.code.len()).then_some(out)
    }

    /// Bitmap of instruction starts, sized to the code array.
    pub fn boundary_map(&self) -> Vec<bool> {
        let mut map = vec![false; self.code.len()];
        if let Some(bounds) = self.instruction_boundaries() {
            for b in bounds {
                map[b] = true;
            }
        }
        map
    }
}

/// One decoded instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Instruction {
    pub opcode: Opcode,
    pub operands: [i64; 2],
    pub iaddr: usize,
}

impl Instruction {
    pub fn operand(&self, i: usize) -> i64 {
        self.operands[i]
    }

    pub fn next(&self) -> usize {
        self.iaddr + self.opcode.width()
    }

    /// Absolute target of the code-offset operand, if any.
    pub fn target(&self) -> Option<i64> {
        self.opcode
            .label_operand()
            .map(|i| self.iaddr as i64 + self.operands[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("invalid opcode word {word} at {iaddr}")]
    BadOpcode { iaddr: usize, word: i64 },
    #[error("instruction at {iaddr} is truncated")]
    Truncated { iaddr: usize },
    #[error("instruction at {iaddr} has been patched by the JIT")]
    Patched { iaddr: usize },
}

pub fn decode_at(code: &[i64], iaddr: usize) -> Result<Instruction, DecodeError> {
    let word = *code.get(iaddr).ok_or(DecodeError::Truncated { iaddr })?;
    if word >= BIAS {
        return Err(DecodeError::Patched { iaddr });
    }
    let opcode = Opcode::from_word(word).ok_or(DecodeError::BadOpcode { iaddr, word })?;
    let arity = opcode.arity();
    if code.len() - iaddr <= arity {
        return Err(DecodeError::Truncated { iaddr });
    }
    let mut operands = [0; 2];
    operands[..arity].copy_from_slice(&code[iaddr + 1..iaddr + 1 + arity]);
    Ok(Instruction {
        opcode,
        operands,
        iaddr,
    })
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Empty,
    SegmentTooLarge {
        words: usize,
    },
    BadOpcode {
        iaddr: usize,
        word: i64,
    },
    Truncated {
        iaddr: usize,
    },
    EntryNotBoundary {
        entry: usize,
    },
    BranchOffBoundary {
        iaddr: usize,
        target: i64,
    },
    GrabWithoutRestart {
        iaddr: usize,
    },
    UnknownPrimitive {
        iaddr: usize,
        prim: i64,
    },
    ArityMismatch {
        iaddr: usize,
        expected: usize,
        found: i64,
    },
    GlobalOutOfRange {
        iaddr: usize,
        index: i64,
    },
    BadBlockSize {
        iaddr: usize,
        size: i64,
    },
    ReservedTag {
        iaddr: usize,
        tag: i64,
    },
    NegativeOperand {
        iaddr: usize,
        value: i64,
    },
    BadGlobals {
        reason: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "segment has no instructions"),
            Violation::SegmentTooLarge { words } => write!(f, "segment has {words} words"),
            Violation::BadOpcode { iaddr, word } => write!(f, "BadOpcode@{iaddr}: word {word}"),
            Violation::Truncated { iaddr } => write!(f, "Truncated@{iaddr}"),
            Violation::EntryNotBoundary { entry } => write!(f, "EntryNotBoundary@{entry}"),
            Violation::BranchOffBoundary { iaddr, target } => {
                write!(f, "BranchOffBoundary@{iaddr}: target {target}")
            }
            Violation::GrabWithoutRestart { iaddr } => write!(f, "GrabWithoutRestart@{iaddr}"),
            Violation::UnknownPrimitive { iaddr, prim } => {
                write!(f, "UnknownPrimitive@{iaddr}: id {prim}")
            }
            Violation::ArityMismatch {
                iaddr,
                expected,
                found,
            } => write!(
                f,
                "ArityMismatch@{iaddr}: expected {expected}, found {found}"
            ),
            Violation::GlobalOutOfRange { iaddr, index } => {
                write!(f, "GlobalOutOfRange@{iaddr}: index {index}")
            }
            Violation::BadBlockSize { iaddr, size } => write!(f, "BadBlockSize@{iaddr}: {size}"),
            Violation::ReservedTag { iaddr, tag } => write!(f, "ReservedTag@{iaddr}: {tag}"),
            Violation::NegativeOperand { iaddr, value } => {
                write!(f, "NegativeOperand@{iaddr}: {value}")
            }
            Violation::BadGlobals { reason } => write!(f, "BadGlobals: {reason}"),
        }
    }
}

/// Checks every static rule; an empty result means the segment is valid.
pub fn validate(seg: &Segment) -> Vec<Violation> {
    let mut out = Vec::new();
    if seg.code.is_empty() {
        out.push(Violation::Empty);
        return out;
    }
    if seg.code.len() > MAX_SEGMENT_WORDS {
        out.push(Violation::SegmentTooLarge {
            words: seg.code.len(),
        });
        return out;
    }
    for (expected, g) in seg.globals_init.iter().enumerate() {
        if g.index != expected {
            out.push(Violation::BadGlobals {
                reason: format!("global {} declared where {} expected", g.index, expected),
            });
            break;
        }
    }

    let mut instrs = Vec::new();
    let mut pc = 0;
    while pc < seg.code.len() {
        match decode_at(&seg.code, pc) {
            Ok(ins) => {
                instrs.push(ins);
                pc = ins.next();
            }
            Err(DecodeError::Truncated { iaddr }) => {
                out.push(Violation::Truncated { iaddr });
                break;
            }
            Err(DecodeError::BadOpcode { iaddr, .. } | DecodeError::Patched { iaddr }) => {
                out.push(Violation::BadOpcode {
                    iaddr,
                    word: seg.code[iaddr],
                });
                break;
            }
        }
    }
    let mut boundary = vec![false; seg.code.len()];
    for ins in &instrs {
        boundary[ins.iaddr] = true;
    }
    let decoded = instrs.last().map(|i| i.next()) == Some(seg.code.len());
    if decoded && !boundary.get(seg.entry).copied().unwrap_or(false) {
        out.push(Violation::EntryNotBoundary { entry: seg.entry });
    }

    let nglobals = seg.globals_init.len() as i64;
    let is_boundary = |t: i64| t >= 0 && (t as usize) < boundary.len() && boundary[t as usize];
    for (n, ins) in instrs.iter().enumerate() {
        let iaddr = ins.iaddr;
        let ops = ins.operands;
        let non_negative = |out: &mut Vec<Violation>, v: i64| {
            if v < 0 {
                out.push(Violation::NegativeOperand { iaddr, value: v });
            }
        };
        if let Some(target) = ins.target() {
            if !is_boundary(target) {
                out.push(Violation::BranchOffBoundary { iaddr, target });
            }
        }
        match ins.opcode {
            Opcode::Acc | Opcode::Pop | Opcode::Assign | Opcode::GetField | Opcode::SetField => {
                non_negative(&mut out, ops[0])
            }
            Opcode::EnvAcc => {
                if ops[0] < 1 {
                    out.push(Violation::NegativeOperand {
                        iaddr,
                        value: ops[0],
                    });
                }
            }
            Opcode::Closure | Opcode::Return | Opcode::Grab => non_negative(&mut out, ops[0]),
            Opcode::Apply => {
                if ops[0] < 1 {
                    out.push(Violation::NegativeOperand {
                        iaddr,
                        value: ops[0],
                    });
                }
            }
            Opcode::AppTerm => {
                if ops[0] < 1 || ops[1] < ops[0] {
                    out.push(Violation::NegativeOperand {
                        iaddr,
                        value: ops[1] - ops[0],
                    });
                }
            }
            Opcode::MakeBlock => {
                if ops[0] < 1 {
                    out.push(Violation::BadBlockSize {
                        iaddr,
                        size: ops[0],
                    });
                }
                if !(0..=255).contains(&ops[1]) || RESERVED_TAGS.contains(&ops[1]) {
                    out.push(Violation::ReservedTag { iaddr, tag: ops[1] });
                }
            }
            Opcode::GetGlobal | Opcode::SetGlobal => {
                if ops[0] < 0 || ops[0] >= nglobals {
                    out.push(Violation::GlobalOutOfRange {
                        iaddr,
                        index: ops[0],
                    });
                }
            }
            Opcode::CCall => match usize::try_from(ops[0]).ok().and_then(|i| PRIMITIVES.get(i)) {
                None => out.push(Violation::UnknownPrimitive {
                    iaddr,
                    prim: ops[0],
                }),
                Some(p) if p.arity as i64 != ops[1] => out.push(Violation::ArityMismatch {
                    iaddr,
                    expected: p.arity,
                    found: ops[1],
                }),
                Some(_) => {}
            },
            _ => {}
        }
        if ins.opcode == Opcode::Grab {
            let preceded = n > 0
                && instrs[n - 1].opcode == Opcode::Restart
                && instrs[n - 1].iaddr + 1 == iaddr;
            if !preceded {
                out.push(Violation::GrabWithoutRestart { iaddr });
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Assembler

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AsmError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: unknown label `{label}`")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: unknown primitive `{name}`")]
    UnknownPrimitive { line: usize, name: String },
    #[error("line {line}: `{name}` takes {expected} arguments, ccall passes {found}")]
    ArityMismatch {
        line: usize,
        name: String,
        expected: usize,
        found: i64,
    },
    #[error("validation failed: {}", join_violations(.0))]
    Validation(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

enum RawOperand {
    Int(i64),
    Name(String),
}

struct PendingInstr {
    line: usize,
    opcode: Opcode,
    operands: Vec<RawOperand>,
    iaddr: usize,
}

fn parse_int(tok: &str) -> Option<i64> {
    tok.parse::<i64>().ok()
}

fn parse_real(tok: &str) -> Option<f64> {
    match tok.to_ascii_lowercase().as_str() {
        "nan" => Some(f64::NAN),
        "inf" | "+inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => tok.parse::<f64>().ok(),
    }
}

fn is_identifier(tok: &str) -> bool {
    let mut chars = tok.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-')
}

fn parse_global(line: usize, rest: &str) -> Result<GlobalInit, AsmError> {
    let err = |reason: &str| AsmError::Parse {
        line,
        reason: reason.to_string(),
    };
    let (idx, value) = rest.split_once('=').ok_or_else(|| err("expected `=`"))?;
    let index = idx
        .trim()
        .parse::<usize>()
        .map_err(|_| err("bad global index"))?;
    let value = value.trim();
    let (kind, body) = value
        .split_once(char::is_whitespace)
        .map(|(k, b)| (k, b.trim()))
        .unwrap_or((value, ""));
    let payload = match kind.to_ascii_lowercase().as_str() {
        "int" => GlobalPayload::Int(parse_int(body).ok_or_else(|| err("bad integer"))?),
        "float" => GlobalPayload::Float(parse_real(body).ok_or_else(|| err("bad real"))?),
        "floatarray" => {
            let inner = body
                .strip_prefix('[')
                .and_then(|b| b.strip_suffix(']'))
                .ok_or_else(|| err("floatarray needs [ ... ]"))?
                .trim();
            let mut elems = Vec::new();
            if !inner.is_empty() {
                for tok in inner.split(',') {
                    elems.push(parse_real(tok.trim()).ok_or_else(|| err("bad real"))?);
                }
            }
            GlobalPayload::FloatArray(elems)
        }
        _ => return Err(err("global payload must be int, float or floatarray")),
    };
    Ok(GlobalInit { index, payload })
}

/// Assembles `.zasm` source text into a segment.
pub fn assemble(text: &str) -> Result<Segment, AsmError> {
    assemble_named(text, "<input>")
}

pub fn assemble_named(text: &str, source_name: &str) -> Result<Segment, AsmError> {
    let mut labels: HashMap<String, usize> = HashMap::new();
    let mut pending: Vec<PendingInstr> = Vec::new();
    let mut globals: BTreeMap<usize, (usize, GlobalInit)> = BTreeMap::new();
    let mut entry: Option<(usize, String)> = None;
    let mut iaddr = 0usize;

    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let mut body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let perr = |reason: String| AsmError::Parse { line, reason };

        // Leading label, possibly followed by an instruction.
        if let Some((head, tail)) = body.split_once(':') {
            let head = head.trim();
            if is_identifier(head) && !head.contains(char::is_whitespace) {
                if labels.insert(head.to_string(), iaddr).is_some() {
                    return Err(perr(format!("duplicate label `{head}`")));
                }
                body = tail.trim();
                if body.is_empty() {
                    continue;
                }
            }
        }

        let (word, rest) = body
            .split_once(char::is_whitespace)
            .map(|(w, r)| (w, r.trim()))
            .unwrap_or((body, ""));
        match word.to_ascii_lowercase().as_str() {
            "entry" => {
                if !is_identifier(rest) {
                    return Err(perr("entry expects a label".into()));
                }
                entry = Some((line, rest.to_string()));
                continue;
            }
            "global" => {
                let g = parse_global(line, rest)?;
                if globals.insert(g.index, (line, g.clone())).is_some() {
                    return Err(perr(format!("duplicate global {}", g.index)));
                }
                continue;
            }
            _ => {}
        }

        let opcode = Opcode::from_mnemonic(word)
            .ok_or_else(|| perr(format!("unknown mnemonic `{word}`")))?;
        let toks: Vec<&str> = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',').map(str::trim).collect()
        };
        if toks.len() != opcode.arity() {
            return Err(perr(format!(
                "`{}` takes {} operand(s), found {}",
                opcode,
                opcode.arity(),
                toks.len()
            )));
        }
        let mut operands = Vec::with_capacity(toks.len());
        for (tok, kind) in toks.iter().zip(opcode.operand_kinds()) {
            let op = match (parse_int(tok), kind) {
                (Some(v), _) => RawOperand::Int(v),
                (None, OperandKind::Label | OperandKind::Prim) if is_identifier(tok) => {
                    RawOperand::Name(tok.to_string())
                }
                (None, _) => return Err(perr(format!("bad operand `{tok}`"))),
            };
            operands.push(op);
        }
        pending.push(PendingInstr {
            line,
            opcode,
            operands,
            iaddr,
        });
        iaddr += opcode.width();
    }

    let mut code = Vec::with_capacity(iaddr);
    for p in &pending {
        code.push(p.opcode as i64);
        let mut prim_arity = None;
        for (i, (op, kind)) in p.operands.iter().zip(p.opcode.operand_kinds()).enumerate() {
            let word = match (op, kind) {
                (RawOperand::Int(v), _) => *v,
                (RawOperand::Name(name), OperandKind::Label) => {
                    let target = labels.get(name).ok_or_else(|| AsmError::UnknownLabel {
                        line: p.line,
                        label: name.clone(),
                    })?;
                    *target as i64 - p.iaddr as i64
                }
                (RawOperand::Name(name), OperandKind::Prim) => {
                    let prim =
                        primitive_by_name(name).ok_or_else(|| AsmError::UnknownPrimitive {
                            line: p.line,
                            name: name.clone(),
                        })?;
                    prim_arity = Some((name.clone(), prim.arity));
                    prim.id as i64
                }
                (RawOperand::Name(_), OperandKind::Int) => unreachable!(),
            };
            if p.opcode == Opcode::CCall && i == 1 {
                if let Some((name, expected)) = prim_arity.take() {
                    if word != expected as i64 {
                        return Err(AsmError::ArityMismatch {
                            line: p.line,
                            name,
                            expected,
                            found: word,
                        });
                    }
                }
            }
            code.push(word);
        }
    }

    if code.is_empty() {
        return Err(AsmError::Validation(vec![Violation::Empty]));
    }

    let entry = match entry {
        None => 0,
        Some((line, name)) => *labels
            .get(&name)
            .ok_or(AsmError::UnknownLabel { line, label: name })?,
    };

    let mut globals_init = Vec::with_capacity(globals.len());
    for (expected, (idx, (line, g))) in globals.into_iter().enumerate() {
        if idx != expected {
            return Err(AsmError::Parse {
                line,
                reason: format!("globals must be dense from 0; missing global {expected}"),
            });
        }
        globals_init.push(g);
    }

    Ok(Segment {
        id: fresh_segment_id(),
        code,
        entry,
        globals_init,
        source_name: source_name.to_string(),
    })
}

/// Assembles and validates in one step.
pub fn load(text: &str, source_name: &str) -> Result<Segment, AsmError> {
    let seg = assemble_named(text, source_name)?;
    let violations = validate(&seg);
    if violations.is_empty() {
        Ok(seg)
    } else {
        Err(AsmError::Validation(violations))
    }
}

// ---------------------------------------------------------------------------
// Disassembler

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DisasmError {
    #[error("segment was patched by the JIT (opcode word at {iaddr} is {word})")]
    PatchedSegment { iaddr: usize, word: i64 },
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

fn format_real(f: f64) -> String {
    if f.is_nan() {
        "nan".to_string()
    } else {
        format!("{f:?}")
    }
}

/// Renders a segment as `.zasm` text that assembles back to the same words.
pub fn disassemble(seg: &Segment) -> Result<String, DisasmError> {
    let mut instrs = Vec::new();
    let mut pc = 0;
    while pc < seg.code.len() {
        match decode_at(&seg.code, pc) {
            Ok(ins) => {
                instrs.push(ins);
                pc = ins.next();
            }
            Err(DecodeError::Patched { iaddr }) => {
                return Err(DisasmError::PatchedSegment {
                    iaddr,
                    word: seg.code[iaddr],
                })
            }
            Err(e) => return Err(e.into()),
        }
    }
    let boundary: std::collections::HashSet<usize> = instrs.iter().map(|i| i.iaddr).collect();
    let mut targets: std::collections::BTreeSet<usize> = std::collections::BTreeSet::new();
    targets.insert(seg.entry);
    for ins in &instrs {
        if let Some(t) = ins.target() {
            if t >= 0 && boundary.contains(&(t as usize)) {
                targets.insert(t as usize);
            }
        }
    }

    let mut out = String::new();
    let _ = writeln!(out, "# {}", seg.source_name);
    for g in &seg.globals_init {
        let _ = match &g.payload {
            GlobalPayload::Int(k) => writeln!(out, "global {} = int {}", g.index, k),
            GlobalPayload::Float(f) => {
                writeln!(out, "global {} = float {}", g.index, format_real(*f))
            }
            GlobalPayload::FloatArray(fs) => {
                let elems: Vec<String> = fs.iter().map(|f| format_real(*f)).collect();
                writeln!(
                    out,
                    "global {} = floatarray [{}]",
                    g.index,
                    elems.join(", ")
                )
            }
        };
    }
    if boundary.contains(&seg.entry) {
        let _ = writeln!(out, "entry L{}", seg.entry);
    }
    for ins in &instrs {
        if targets.contains(&ins.iaddr) {
            let _ = writeln!(out, "L{}:", ins.iaddr);
        }
        let mut parts = Vec::new();
        for (i, kind) in ins.opcode.operand_kinds().iter().enumerate() {
            let w = ins.operands[i];
            let text = match kind {
                OperandKind::Label => {
                    let t = ins.iaddr as i64 + w;
                    if t >= 0 && boundary.contains(&(t as usize)) {
                        format!("L{t}")
                    } else {
                        w.to_string()
                    }
                }
                OperandKind::Prim => usize::try_from(w)
                    .ok()
                    .and_then(|i| PRIMITIVES.get(i))
                    .map(|p| p.name.to_string())
                    .unwrap_or_else(|| w.to_string()),
                OperandKind::Int => w.to_string(),
            };
            parts.push(text);
        }
        if parts.is_empty() {
            let _ = writeln!(out, "  {}", ins.opcode);
        } else {
            let _ = writeln!(out, "  {} {}", ins.opcode, parts.join(", "));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodes_constint_stop() {
        let seg = assemble("entry main\nmain:\n  constint 7\n  stop\n").unwrap();
        assert_eq!(
            seg.code,
            vec![Opcode::ConstInt as i64, 7, Opcode::Stop as i64]
        );
        assert_eq!(seg.entry, 0);
    }

    #[test]
    fn self_branch_has_zero_offset() {
        let seg = assemble("entry main\nmain:\n  branch main\n").unwrap();
        assert_eq!(seg.code, vec![Opcode::Branch as i64, 0]);
    }

    #[test]
    fn float_run_ccalls_resolve_to_table_ids() {
        let src = "\
            ccall caml_array_unsafe_get_float, 2
            ccall caml_mul_float, 2
            ccall caml_add_float, 2
            ccall caml_add_float, 2
            ccall caml_sqrt_float, 1
            stop
        ";
        let seg = assemble(src).unwrap();
        let pairs: Vec<(i64, i64)> = seg.code[..15]
            .chunks(3)
            .map(|c| {
                assert_eq!(c[0], Opcode::CCall as i64);
                (c[1], c[2])
            })
            .collect();
        assert_eq!(pairs, vec![(10, 2), (2, 2), (0, 2), (0, 2), (4, 1)]);
    }

    #[test]
    fn mnemonics_are_case_insensitive_and_comments_skipped() {
        let seg = assemble("# header\nCONSTINT 3 # trailing\n  Stop\n").unwrap();
        assert_eq!(seg.code, vec![1, 3, 0]);
    }

    #[test]
    fn label_and_instruction_on_one_line() {
        let seg = assemble("start: constint 1\nbranchif start\nstop").unwrap();
        assert_eq!(seg.code, vec![1, 1, 20, -2, 0]);
    }

    #[test]
    fn assembler_errors() {
        assert!(matches!(
            assemble("frobnicate 3"),
            Err(AsmError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            assemble("branch nowhere"),
            Err(AsmError::UnknownLabel { line: 1, .. })
        ));
        assert!(matches!(
            assemble("ccall caml_nope, 1"),
            Err(AsmError::UnknownPrimitive { .. })
        ));
        assert!(matches!(
            assemble("ccall caml_sqrt_float, 2"),
            Err(AsmError::ArityMismatch {
                expected: 1,
                found: 2,
                ..
            })
        ));
        assert!(matches!(
            assemble("constint 1, 2"),
            Err(AsmError::Parse { .. })
        ));
        assert!(matches!(
            assemble("# nothing here\n"),
            Err(AsmError::Validation(v)) if v == vec![Violation::Empty]
        ));
        assert!(matches!(
            assemble("global 1 = int 3\nstop"),
            Err(AsmError::Parse { .. })
        ));
        assert!(matches!(
            assemble("global 0 = int 3\nglobal 0 = int 4\nstop"),
            Err(AsmError::Parse { .. })
        ));
        assert!(matches!(
            assemble("a:\na:\nstop"),
            Err(AsmError::Parse { .. })
        ));
    }

    #[test]
    fn globals_parse() {
        let seg = assemble(
            "global 0 = int -4\nglobal 1 = float 2.5\nglobal 2 = floatarray [1.0, -0.5, 3e10]\nglobal 3 = floatarray []\nstop",
        )
        .unwrap();
        assert_eq!(
            seg.globals_init
                .iter()
                .map(|g| g.payload.clone())
                .collect::<Vec<_>>(),
            vec![
                GlobalPayload::Int(-4),
                GlobalPayload::Float(2.5),
                GlobalPayload::FloatArray(vec![1.0, -0.5, 3e10]),
                GlobalPayload::FloatArray(vec![]),
            ]
        );
    }

    #[test]
    fn disassemble_round_trips() {
        let src = "entry main\nmain:\n  constint 7\n  stop\n";
        let seg = assemble(src).unwrap();
        let text = disassemble(&seg).unwrap();
        let again = assemble(&text).unwrap();
        assert_eq!(again.code, seg.code);
        assert_eq!(again.entry, seg.entry);
        assert_eq!(again.globals_init, seg.globals_init);
    }

    #[test]
    fn disassemble_rejects_patched() {
        let mut seg = assemble("constint 7\nstop").unwrap();
        seg.code[0] = BIAS + 12;
        assert!(matches!(
            disassemble(&seg),
            Err(DisasmError::PatchedSegment { iaddr: 0, .. })
        ));
    }

    #[test]
    fn validate_accepts_minimal() {
        let seg = assemble("constint 7\nstop").unwrap();
        assert!(validate(&seg).is_empty());
    }

    #[test]
    fn validate_grab_needs_restart() {
        let seg = Segment::from_words(vec![Opcode::Grab as i64, 1, 0], 0, vec![]);
        assert_eq!(
            validate(&seg),
            vec![Violation::GrabWithoutRestart { iaddr: 0 }]
        );
        let ok = Segment::from_words(vec![26, 27, 1, 0], 0, vec![]);
        assert!(validate(&ok).is_empty());
    }

    #[test]
    fn validate_ccall_arity_against_table() {
        let seg = Segment::from_words(vec![Opcode::CCall as i64, 4, 2, 0], 0, vec![]);
        assert_eq!(
            validate(&seg),
            vec![Violation::ArityMismatch {
                iaddr: 0,
                expected: 1,
                found: 2
            }]
        );
    }

    #[test]
    fn validate_catches_structural_errors() {
        // branch into the middle of constint
        let seg = Segment::from_words(vec![1, 5, 19, -1, 0], 0, vec![]);
        assert_eq!(
            validate(&seg),
            vec![Violation::BranchOffBoundary {
                iaddr: 2,
                target: 1
            }]
        );
        let seg = Segment::from_words(vec![1], 0, vec![]);
        assert_eq!(validate(&seg), vec![Violation::Truncated { iaddr: 0 }]);
        let seg = Segment::from_words(vec![99], 0, vec![]);
        assert_eq!(
            validate(&seg),
            vec![Violation::BadOpcode { iaddr: 0, word: 99 }]
        );
        let seg = Segment::from_words(vec![1, 5, 0], 1, vec![]);
        assert_eq!(
            validate(&seg),
            vec![Violation::EntryNotBoundary { entry: 1 }]
        );
        let seg = Segment::from_words(vec![32, 0, 0], 0, vec![]);
        assert_eq!(
            validate(&seg),
            vec![Violation::GlobalOutOfRange { iaddr: 0, index: 0 }]
        );
        let seg = Segment::from_words(vec![29, 0, 0, 0], 0, vec![]);
        assert_eq!(
            validate(&seg),
            vec![Violation::BadBlockSize { iaddr: 0, size: 0 }]
        );
        let seg = Segment::from_words(vec![29, 1, 253, 0], 0, vec![]);
        assert_eq!(
            validate(&seg),
            vec![Violation::ReservedTag { iaddr: 0, tag: 253 }]
        );
        let seg = Segment::from_words(vec![6, 0, 2, -1, 0], 0, vec![]);
        assert_eq!(
            validate(&seg),
            vec![
                Violation::NegativeOperand { iaddr: 0, value: 0 },
                Violation::NegativeOperand {
                    iaddr: 2,
                    value: -1
                }
            ]
        );
        let seg = Segment::from_words(vec![37, 17, 1, 0], 0, vec![]);
        assert_eq!(
            validate(&seg),
            vec![Violation::UnknownPrimitive { iaddr: 0, prim: 17 }]
        );
    }

    #[test]
    fn decode_reports_patched_words() {
        assert_eq!(
            decode_at(&[BIAS + 3, 0], 0),
            Err(DecodeError::Patched { iaddr: 0 })
        );
        assert_eq!(decode_at(&[1], 0), Err(DecodeError::Truncated { iaddr: 0 }));
        assert_eq!(decode_at(&[0], 0).unwrap().opcode, Opcode::Stop);
    }

    #[test]
    fn opcode_numbering_is_dense() {
        for (i, op) in Opcode::ALL.iter().enumerate() {
            assert_eq!(*op as usize, i);
            assert_eq!(Opcode::from_word(i as i64), Some(*op));
        }
        assert_eq!(Opcode::ALL.len(), 38);
        assert!((Opcode::ALL.len() as i64) < BIAS);
    }
}
