//! Instruction semantics shared by the interpreter and the compiled-code
//! dispatch loop. Both engines must agree word for word, so anything more
//! involved than a register move lives here.

use crate::runtime::{
    CodeAddr, ErrorKind, Handle, Trap, Value, Vm, CLOSURE_TAG, FLOAT_ARRAY_TAG, FLOAT_TAG,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Neq,
    Lt,
    Le,
    Gt,
    Ge,
}

#[inline]
pub fn int_op(vm: &mut Vm, op: IntOp) -> Result<(), Trap> {
    let rhs = vm.pop()?;
    let a = vm.accu.as_int()?;
    let b = rhs.as_int()?;
    let r = match op {
        IntOp::Add => a.wrapping_add(b),
        IntOp::Sub => a.wrapping_sub(b),
        IntOp::Mul => a.wrapping_mul(b),
        IntOp::Div | IntOp::Mod if b == 0 => {
            return Err(Trap::new(
                ErrorKind::DivisionByZero,
                "integer division by zero",
            ))
        }
        IntOp::Div => a.wrapping_div(b),
        IntOp::Mod => a.wrapping_rem(b),
    };
    vm.accu = Value::int(r);
    Ok(())
}

#[inline]
pub fn compare(vm: &mut Vm, op: CmpOp) -> Result<(), Trap> {
    let rhs = vm.pop()?;
    let r = match op {
        CmpOp::Eq => vm.accu == rhs,
        CmpOp::Neq => vm.accu != rhs,
        _ => {
            let a = vm.accu.as_int()?;
            let b = rhs.as_int()?;
            match op {
                CmpOp::Lt => a < b,
                CmpOp::Le => a <= b,
                CmpOp::Gt => a > b,
                CmpOp::Ge => a >= b,
                CmpOp::Eq | CmpOp::Neq => unreachable!(),
            }
        }
    };
    vm.accu = Value::bool(r);
    Ok(())
}

#[inline]
pub fn offset_int(vm: &mut Vm, k: i64) -> Result<(), Trap> {
    vm.accu = Value::int(vm.accu.as_int()?.wrapping_add(k));
    Ok(())
}

fn block_of(v: Value) -> Result<Handle, Trap> {
    match v {
        Value::Ref(h) => Ok(h),
        other => Err(Trap::type_error(format!(
            "expected a block, found {other:?}"
        ))),
    }
}

/// Code pointer stored in field 0 of a closure.
#[inline]
pub fn closure_code(vm: &Vm, closure: Value) -> Result<CodeAddr, Trap> {
    match vm.heap.field(block_of(closure)?, 0)? {
        Value::Code(c) => Ok(c),
        other => Err(Trap::type_error(format!(
            "field 0 of an applied block is {other:?}, not code"
        ))),
    }
}

pub fn closure(vm: &mut Vm, nvars: usize, code: CodeAddr) -> Result<(), Trap> {
    if nvars > 0 {
        vm.push(vm.accu)?;
    }
    if vm.sp + nvars > vm.stack_words() {
        return Err(Trap::bounds(
            "closure captures more slots than the stack holds",
        ));
    }
    let h = vm.alloc_block(CLOSURE_TAG, nvars + 1)?;
    vm.init_field(h, 0, Value::Code(code));
    for k in 1..=nvars {
        let v = vm.stack[vm.sp + k - 1];
        vm.init_field(h, k, v);
    }
    vm.sp += nvars;
    vm.accu = Value::Ref(h);
    Ok(())
}

pub fn push_retaddr(vm: &mut Vm, ret: CodeAddr) -> Result<(), Trap> {
    vm.push(Value::Int(vm.extra_args as i64))?;
    vm.push(vm.env)?;
    vm.push(Value::Code(ret))
}

#[inline]
pub fn apply(vm: &mut Vm, nargs: usize) -> Result<CodeAddr, Trap> {
    let target = closure_code(vm, vm.accu)?;
    vm.extra_args = nargs - 1;
    vm.env = vm.accu;
    Ok(target)
}

/// Pops a return frame: code address, saved env, saved extra_args.
pub fn pop_frame(vm: &mut Vm) -> Result<CodeAddr, Trap> {
    let ret = match vm.pop()? {
        Value::Code(c) => c,
        other => return Err(Trap::type_error(format!("return address is {other:?}"))),
    };
    vm.env = vm.pop()?;
    let extra = vm.pop()?.as_int()?;
    if extra < 0 {
        return Err(Trap::type_error("negative saved extra_args"));
    }
    vm.extra_args = extra as usize;
    Ok(ret)
}

/// `RETURN n`: either re-applies the result to pending arguments or pops the frame.
#[inline]
pub fn return_(vm: &mut Vm, n: usize) -> Result<CodeAddr, Trap> {
    vm.drop_slots(n)?;
    if vm.extra_args > 0 {
        let target = closure_code(vm, vm.accu)?;
        vm.extra_args -= 1;
        vm.env = vm.accu;
        Ok(target)
    } else {
        pop_frame(vm)
    }
}

/// `RESTART`: spreads the arguments saved in a partial application back onto the stack.
pub fn restart(vm: &mut Vm) -> Result<(), Trap> {
    let env = block_of(vm.env)?;
    if vm.heap.tag(env) == FLOAT_TAG || vm.heap.tag(env) == FLOAT_ARRAY_TAG {
        return Err(Trap::type_error("restart on a float block"));
    }
    let size = vm.heap.size(env);
    if size < 2 {
        return Err(Trap::bounds(format!("restart on a closure of size {size}")));
    }
    let m = size - 2;
    if vm.sp < m {
        return Err(Trap::new(
            ErrorKind::StackOverflow,
            "stack exhausted in restart",
        ));
    }
    vm.sp -= m;
    for i in 0..m {
        vm.stack[vm.sp + i] = vm.heap.field(env, i + 2)?;
    }
    vm.env = vm.heap.field(env, 1)?;
    vm.extra_args += m;
    Ok(())
}

/// `GRAB n`. Returns `None` when enough arguments are present; otherwise
/// builds the partial application and returns the popped return address.
pub fn grab(vm: &mut Vm, n: usize, restart_at: CodeAddr) -> Result<Option<CodeAddr>, Trap> {
    if vm.extra_args >= n {
        vm.extra_args -= n;
        return Ok(None);
    }
    let m = vm.extra_args + 1;
    if vm.sp + m > vm.stack_words() {
        return Err(Trap::bounds(
            "grab captures more slots than the stack holds",
        ));
    }
    let h = vm.alloc_block(CLOSURE_TAG, m + 2)?;
    vm.init_field(h, 0, Value::Code(restart_at));
    vm.init_field(h, 1, vm.env);
    for i in 0..m {
        let v = vm.stack[vm.sp + i];
        vm.init_field(h, i + 2, v);
    }
    vm.sp += m;
    vm.accu = Value::Ref(h);
    pop_frame(vm).map(Some)
}

/// `APPTERM n, s`: slides `n` arguments over the current `s`-slot frame and tail-calls.
pub fn appterm(vm: &mut Vm, n: usize, s: usize) -> Result<CodeAddr, Trap> {
    if vm.sp + s > vm.stack_words() {
        return Err(Trap::bounds("appterm frame exceeds the stack"));
    }
    let target = closure_code(vm, vm.accu)?;
    for i in (0..n).rev() {
        vm.stack[vm.sp + s - n + i] = vm.stack[vm.sp + i];
    }
    vm.sp += s - n;
    vm.extra_args += n - 1;
    vm.env = vm.accu;
    Ok(target)
}

pub fn make_block(vm: &mut Vm, size: usize, tag: u8) -> Result<(), Trap> {
    let h = vm.alloc_block(tag, size)?;
    vm.init_field(h, 0, vm.accu);
    for i in 1..size {
        let v = vm.pop()?;
        vm.init_field(h, i, v);
    }
    vm.accu = Value::Ref(h);
    Ok(())
}

#[inline]
pub fn get_field(vm: &mut Vm, i: usize) -> Result<(), Trap> {
    vm.accu = vm.heap.field(block_of(vm.accu)?, i)?;
    Ok(())
}

#[inline]
pub fn set_field(vm: &mut Vm, i: usize) -> Result<(), Trap> {
    let v = vm.pop()?;
    vm.heap.set_field(block_of(vm.accu)?, i, v)?;
    vm.accu = Value::UNIT;
    Ok(())
}

#[inline]
pub fn env_acc(vm: &mut Vm, i: usize) -> Result<(), Trap> {
    vm.accu = vm.heap.field(block_of(vm.env)?, i)?;
    Ok(())
}

pub fn vect_length(vm: &mut Vm) -> Result<(), Trap> {
    let h = block_of(vm.accu)?;
    vm.accu = Value::Int(vm.heap.size(h) as i64);
    Ok(())
}

fn vect_index(idx: i64) -> Result<usize, Trap> {
    usize::try_from(idx).map_err(|_| Trap::bounds(format!("negative vector index {idx}")))
}

#[inline]
pub fn get_vect_item(vm: &mut Vm) -> Result<(), Trap> {
    let idx = vm.pop()?.as_int()?;
    let i = vect_index(idx)?;
    get_field(vm, i)
}

#[inline]
pub fn set_vect_item(vm: &mut Vm) -> Result<(), Trap> {
    let idx = vm.pop()?.as_int()?;
    let v = vm.pop()?;
    let i = vect_index(idx)?;
    vm.heap.set_field(block_of(vm.accu)?, i, v)?;
    vm.accu = Value::UNIT;
    Ok(())
}

#[inline]
pub fn assign(vm: &mut Vm, i: usize) -> Result<(), Trap> {
    vm.poke(i, vm.accu)?;
    vm.accu = Value::UNIT;
    Ok(())
}

pub fn get_global(vm: &mut Vm, i: usize) -> Result<(), Trap> {
    vm.accu = *vm
        .globals
        .get(i)
        .ok_or_else(|| Trap::bounds(format!("global {i} out of range")))?;
    Ok(())
}

pub fn set_global(vm: &mut Vm, i: usize) -> Result<(), Trap> {
    let accu = vm.accu;
    *vm.globals
        .get_mut(i)
        .ok_or_else(|| Trap::bounds(format!("global {i} out of range")))? = accu;
    vm.accu = Value::UNIT;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::SegmentId;
    use crate::runtime::VmConfig;

    fn vm() -> Vm {
        Vm::new(VmConfig {
            stack_words: 32,
            young_words: 256,
            major_limit_words: 4096,
        })
    }

    fn code(ofs: u32) -> CodeAddr {
        CodeAddr {
            seg: SegmentId(0),
            ofs,
        }
    }

    #[test]
    fn addint_pops_operand() {
        let mut vm = vm();
        vm.push(Value::Int(4)).unwrap();
        vm.accu = Value::Int(3);
        let sp = vm.sp;
        int_op(&mut vm, IntOp::Add).unwrap();
        assert_eq!(vm.accu, Value::Int(7));
        assert_eq!(vm.sp, sp + 1);
    }

    #[test]
    fn divint_by_zero() {
        let mut vm = vm();
        vm.push(Value::Int(0)).unwrap();
        vm.accu = Value::Int(5);
        let err = int_op(&mut vm, IntOp::Div).unwrap_err();
        assert_eq!(err.kind, ErrorKind::DivisionByZero);
    }

    #[test]
    fn restart_spreads_two_captured_args() {
        let mut vm = vm();
        let saved_env = vm.alloc_with(0, &[Value::Int(99)]).unwrap();
        let clos = vm
            .alloc_with(
                CLOSURE_TAG,
                &[
                    Value::Code(code(4)),
                    saved_env,
                    Value::Int(10),
                    Value::Int(20),
                ],
            )
            .unwrap();
        vm.env = clos;
        vm.extra_args = 1;
        let sp = vm.sp;
        restart(&mut vm).unwrap();
        assert_eq!(vm.sp, sp - 2);
        assert_eq!(vm.peek(0).unwrap(), Value::Int(10));
        assert_eq!(vm.peek(1).unwrap(), Value::Int(20));
        assert_eq!(vm.env, saved_env);
        assert_eq!(vm.extra_args, 3);
    }

    #[test]
    fn grab_without_enough_args_builds_partial_application() {
        let mut vm = vm();
        let caller_env = Value::Int(77);
        vm.env = caller_env;
        vm.extra_args = 5;
        push_retaddr(&mut vm, code(40)).unwrap();
        vm.push(Value::Int(1)).unwrap(); // the single argument
        let f = vm.alloc_with(CLOSURE_TAG, &[Value::Code(code(3))]).unwrap();
        vm.accu = f;
        let target = apply(&mut vm, 1).unwrap();
        assert_eq!(target, code(3));
        assert_eq!(vm.extra_args, 0);

        let ret = grab(&mut vm, 1, code(2)).unwrap();
        assert_eq!(ret, Some(code(40)));
        assert_eq!(vm.env, caller_env);
        assert_eq!(vm.extra_args, 5);
        assert_eq!(vm.sp, vm.stack_words());
        let Value::Ref(pa) = vm.accu else { panic!() };
        assert_eq!(vm.heap.tag(pa), CLOSURE_TAG);
        assert_eq!(vm.heap.size(pa), 3);
        assert_eq!(vm.heap.field(pa, 0).unwrap(), Value::Code(code(2)));
        assert_eq!(vm.heap.field(pa, 1).unwrap(), f);
        assert_eq!(vm.heap.field(pa, 2).unwrap(), Value::Int(1));
    }

    #[test]
    fn grab_with_enough_args_consumes_them() {
        let mut vm = vm();
        vm.extra_args = 3;
        assert_eq!(grab(&mut vm, 2, code(0)).unwrap(), None);
        assert_eq!(vm.extra_args, 1);
    }

    #[test]
    fn appterm_slides_arguments() {
        let mut vm = vm();
        for v in [100, 101, 102, 1, 2] {
            vm.push(Value::Int(v)).unwrap();
        }
        // stack top: 2, 1, 102, 101, 100 ; current frame has s = 4 slots
        vm.accu = vm.alloc_with(CLOSURE_TAG, &[Value::Code(code(8))]).unwrap();
        let sp = vm.sp;
        let target = appterm(&mut vm, 2, 4).unwrap();
        assert_eq!(target, code(8));
        assert_eq!(vm.sp, sp + 2);
        assert_eq!(vm.peek(0).unwrap(), Value::Int(2));
        assert_eq!(vm.peek(1).unwrap(), Value::Int(1));
        assert_eq!(vm.peek(2).unwrap(), Value::Int(100));
        assert_eq!(vm.extra_args, 1);
    }

    #[test]
    fn make_block_takes_accu_then_stack() {
        let mut vm = vm();
        vm.push(Value::Int(3)).unwrap();
        vm.push(Value::Int(2)).unwrap();
        vm.accu = Value::Int(1);
        make_block(&mut vm, 3, 5).unwrap();
        let Value::Ref(h) = vm.accu else { panic!() };
        assert_eq!(vm.heap.tag(h), 5);
        let fields: Vec<Value> = (0..3).map(|i| vm.heap.field(h, i).unwrap()).collect();
        assert_eq!(fields, vec![Value::Int(1), Value::Int(2), Value::Int(3)]);
    }

    #[test]
    fn field_access_on_float_block_is_type_error() {
        let mut vm = vm();
        vm.accu = vm.box_float(1.0).unwrap();
        assert_eq!(
            get_field(&mut vm, 0).unwrap_err().kind,
            ErrorKind::TypeError
        );
    }
}
