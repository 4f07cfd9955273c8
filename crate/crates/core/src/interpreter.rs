//! Reference bytecode interpreter.
//!
//! Decodes every instruction from the segment's code array on every step
//! and boxes every float result. It is the semantic oracle the JIT is
//! tested against, and the baseline it is measured against.

use crate::bytecode::{decode_at, Instruction, Opcode, Segment};
use crate::ops::{self, CmpOp, IntOp};
use crate::runtime::{CodeAddr, ErrorKind, Trap, Value, Vm};

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Finished {
        result: Value,
    },
    RuntimeError {
        kind: ErrorKind,
        pc: Option<CodeAddr>,
        message: String,
    },
}

impl Outcome {
    pub fn error(trap: Trap, pc: Option<CodeAddr>) -> Outcome {
        Outcome::RuntimeError {
            kind: trap.kind,
            pc,
            message: trap.message,
        }
    }

    pub fn result(&self) -> Option<Value> {
        match self {
            Outcome::Finished { result } => Some(*result),
            Outcome::RuntimeError { .. } => None,
        }
    }

    pub fn error_kind(&self) -> Option<ErrorKind> {
        match self {
            Outcome::Finished { .. } => None,
            Outcome::RuntimeError { kind, .. } => Some(*kind),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepResult {
    Continue,
    Halt(Value),
    Error(Trap),
}

/// One interpreter run over a single (unpatched) segment.
pub struct Interpreter<'a> {
    seg: &'a Segment,
    boundaries: Vec<bool>,
    pc: usize,
}

impl<'a> Interpreter<'a> {
    pub fn new(seg: &'a Segment) -> Interpreter<'a> {
        Interpreter {
            seg,
            boundaries: seg.boundary_map(),
            pc: seg.entry,
        }
    }

    pub fn pc(&self) -> CodeAddr {
        CodeAddr {
            seg: self.seg.id,
            ofs: self.pc as u32,
        }
    }

    fn here(&self, ins: &Instruction, ofs: i64) -> Result<CodeAddr, Trap> {
        let target = ins.iaddr as i64 + ofs;
        self.check_target(CodeAddr {
            seg: self.seg.id,
            ofs: u32::try_from(target).map_err(|_| bad_address(target))?,
        })
    }

    fn check_target(&self, c: CodeAddr) -> Result<CodeAddr, Trap> {
        if c.seg == self.seg.id && self.boundaries.get(c.ofs as usize) == Some(&true) {
            Ok(c)
        } else {
            Err(Trap::new(
                ErrorKind::BadCodeAddress,
                format!("{}:{} is not an instruction boundary", c.seg, c.ofs),
            ))
        }
    }

    fn jump(&mut self, c: CodeAddr) -> Result<(), Trap> {
        self.pc = self.check_target(c)?.ofs as usize;
        Ok(())
    }

    /// Executes one instruction.
    pub fn step(&mut self, vm: &mut Vm) -> StepResult {
        match self.step_inner(vm) {
            Ok(Some(v)) => StepResult::Halt(v),
            Ok(None) => StepResult::Continue,
            Err(t) => StepResult::Error(t),
        }
    }

    fn step_inner(&mut self, vm: &mut Vm) -> Result<Option<Value>, Trap> {
        let ins = decode_at(&self.seg.code, self.pc)
            .map_err(|e| Trap::new(ErrorKind::BadCodeAddress, e.to_string()))?;
        vm.stats.instructions_executed += 1;
        let a = ins.operands[0];
        let b = ins.operands[1];
        let mut next = ins.next();
        match ins.opcode {
            Opcode::Stop => return Ok(Some(vm.accu)),
            Opcode::ConstInt => vm.accu = Value::int(a),
            Opcode::Acc => vm.accu = vm.peek(a as usize)?,
            Opcode::Push => vm.push(vm.accu)?,
            Opcode::Pop => vm.drop_slots(a as usize)?,
            Opcode::Assign => ops::assign(vm, a as usize)?,
            Opcode::EnvAcc => ops::env_acc(vm, a as usize)?,
            Opcode::AddInt => ops::int_op(vm, IntOp::Add)?,
            Opcode::SubInt => ops::int_op(vm, IntOp::Sub)?,
            Opcode::MulInt => ops::int_op(vm, IntOp::Mul)?,
            Opcode::DivInt => ops::int_op(vm, IntOp::Div)?,
            Opcode::ModInt => ops::int_op(vm, IntOp::Mod)?,
            Opcode::Eq => ops::compare(vm, CmpOp::Eq)?,
            Opcode::Neq => ops::compare(vm, CmpOp::Neq)?,
            Opcode::LtInt => ops::compare(vm, CmpOp::Lt)?,
            Opcode::LeInt => ops::compare(vm, CmpOp::Le)?,
            Opcode::GtInt => ops::compare(vm, CmpOp::Gt)?,
            Opcode::GeInt => ops::compare(vm, CmpOp::Ge)?,
            Opcode::OffsetInt => ops::offset_int(vm, a)?,
            Opcode::Branch => next = self.here(&ins, a)?.ofs as usize,
            Opcode::BranchIf => {
                if vm.accu.is_truthy() {
                    next = self.here(&ins, a)?.ofs as usize;
                }
            }
            Opcode::BranchIfNot => {
                if !vm.accu.is_truthy() {
                    next = self.here(&ins, a)?.ofs as usize;
                }
            }
            Opcode::Closure => {
                let code = self.here(&ins, b)?;
                ops::closure(vm, a as usize, code)?;
            }
            Opcode::PushRetAddr => {
                let ret = self.here(&ins, a)?;
                ops::push_retaddr(vm, ret)?;
            }
            Opcode::Apply => {
                let target = ops::apply(vm, a as usize)?;
                return self.jump(target).map(|_| None);
            }
            Opcode::Return => {
                let target = ops::return_(vm, a as usize)?;
                return self.jump(target).map(|_| None);
            }
            Opcode::Restart => ops::restart(vm)?,
            Opcode::Grab => {
                let restart_at = self.here(&ins, -1)?;
                if let Some(ret) = ops::grab(vm, a as usize, restart_at)? {
                    return self.jump(ret).map(|_| None);
                }
            }
            Opcode::AppTerm => {
                let target = ops::appterm(vm, a as usize, b as usize)?;
                return self.jump(target).map(|_| None);
            }
            Opcode::MakeBlock => ops::make_block(vm, a as usize, b as u8)?,
            Opcode::GetField => ops::get_field(vm, a as usize)?,
            Opcode::SetField => ops::set_field(vm, a as usize)?,
            Opcode::GetGlobal => ops::get_global(vm, a as usize)?,
            Opcode::SetGlobal => ops::set_global(vm, a as usize)?,
            Opcode::VectLength => ops::vect_length(vm)?,
            Opcode::GetVectItem => ops::get_vect_item(vm)?,
            Opcode::SetVectItem => ops::set_vect_item(vm)?,
            Opcode::CCall => {
                let nargs = b as usize;
                let mut args = Vec::with_capacity(nargs);
                args.push(vm.accu);
                for i in 0..nargs - 1 {
                    args.push(vm.peek(i)?);
                }
                vm.drop_slots(nargs - 1)?;
                vm.accu = vm.prim_invoke(a as usize, &args)?;
            }
        }
        self.pc = next;
        Ok(None)
    }
}

fn bad_address(target: i64) -> Trap {
    Trap::new(
        ErrorKind::BadCodeAddress,
        format!("branch target {target} outside the segment"),
    )
}

/// Runs `seg` from its entry point until `STOP` or a runtime error.
pub fn interpret(vm: &mut Vm, seg: &Segment) -> Outcome {
    if let Err(t) = vm.load_globals(&seg.globals_init) {
        return Outcome::error(t, None);
    }
    let mut interp = Interpreter::new(seg);
    loop {
        match interp.step(vm) {
            StepResult::Continue => {}
            StepResult::Halt(v) => {
                vm.pc = Some(interp.pc());
                return Outcome::Finished { result: v };
            }
            StepResult::Error(t) => {
                vm.pc = Some(interp.pc());
                return Outcome::error(t, vm.pc);
            }
        }
    }
}
