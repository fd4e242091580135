//! Two-pass assembler and disassembler for guest programs.
//!
//! Grammar (one statement per line; `;` or `#` starts a comment):
//!
//! ```text
//! line      := [label ':'] [statement]
//! statement := mnemonic [operand {',' operand}] | directive
//! operand   := reg | 'zero' | '[' reg [('+'|'-') expr] ']' | expr
//! expr      := term {('+'|'-'|'*') term}
//! term      := number | symbol | char | '-' term | '(' expr ')'
//! ```
//!
//! Directives: `.text`, `.data ADDR`, `.entry EXPR`, `.equ NAME, EXPR`,
//! `.word EXPR,...`, `.byte EXPR,...`, `.ascii "s"`, `.asciz "s"`,
//! `.space N`, `.align N`.
//!
//! Pseudo-instructions: `li rd, imm32` (always two words), `mov rd, rs`
//! (two words), `call target`, `ret`, `b target`, `nop`.
//!
//! Branch and jump targets are absolute addresses (usually labels); the
//! assembler converts them to word offsets from the following instruction.

use std::collections::HashMap;

use thiserror::Error;

use super::isa::{format_instruction, AluOp, BranchOp, Instruction, Operand, Target};
use super::program::{DataSegment, GuestProgram, CODE_BASE};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("undefined symbol `{0}`")]
    UndefinedSymbol(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

type Result<T> = std::result::Result<T, AsmErrorKind>;

fn syntax<T>(msg: impl Into<String>) -> Result<T> {
    Err(AsmErrorKind::Syntax(msg.into()))
}

// ---------------------------------------------------------------------------
// Expressions

#[derive(Debug, Clone)]
enum Expr {
    Num(i64),
    Sym(String),
    Neg(Box<Expr>),
    Bin(char, Box<Expr>, Box<Expr>),
}

impl Expr {
    fn eval(&self, syms: &HashMap<String, i64>) -> Result<i64> {
        Ok(match self {
            Expr::Num(n) => *n,
            Expr::Sym(s) => *syms
                .get(s)
                .ok_or_else(|| AsmErrorKind::UndefinedSymbol(s.clone()))?,
            Expr::Neg(e) => -e.eval(syms)?,
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval(syms)?, b.eval(syms)?);
                match op {
                    '+' => a.wrapping_add(b),
                    '-' => a.wrapping_sub(b),
                    _ => a.wrapping_mul(b),
                }
            }
        })
    }
}

struct ExprParser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl<'a> ExprParser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(c @ (b'+' | b'-' | b'*')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin(c as char, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.term()?)))
            }
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(b')') {
                    return syntax("expected `)`");
                }
                self.pos += 1;
                Ok(e)
            }
            Some(b'\'') => {
                let rest = &self.s[self.pos..];
                if rest.len() >= 3 && rest[2] == b'\'' {
                    self.pos += 3;
                    Ok(Expr::Num(rest[1] as i64))
                } else {
                    syntax("bad character literal")
                }
            }
            Some(c) if c.is_ascii_digit() => {
                let start = self.pos;
                while self.pos < self.s.len()
                    && (self.s[self.pos].is_ascii_alphanumeric() || self.s[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let tok = std::str::from_utf8(&self.s[start..self.pos])
                    .unwrap()
                    .replace('_', "");
                parse_number(&tok).map(Expr::Num)
            }
            Some(c) if is_ident_start(c) => {
                let start = self.pos;
                while self.pos < self.s.len() && is_ident_char(self.s[self.pos]) {
                    self.pos += 1;
                }
                Ok(Expr::Sym(
                    std::str::from_utf8(&self.s[start..self.pos]).unwrap().to_string(),
                ))
            }
            Some(c) => syntax(format!("unexpected `{}` in expression", c as char)),
            None => syntax("expected expression"),
        }
    }
}

fn parse_number(tok: &str) -> Result<i64> {
    let lower = tok.to_ascii_lowercase();
    let parsed = if let Some(h) = lower.strip_prefix("0x") {
        i64::from_str_radix(h, 16)
    } else if let Some(b) = lower.strip_prefix("0b") {
        i64::from_str_radix(b, 2)
    } else {
        lower.parse::<i64>()
    };
    parsed.or_else(|_| syntax(format!("bad number `{tok}`")))
}

fn is_ident_start(c: u8) -> bool {
    c.is_ascii_alphabetic() || c == b'_' || c == b'.'
}

fn is_ident_char(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_' || c == b'.'
}

fn parse_expr(s: &str) -> Result<Expr> {
    let mut p = ExprParser {
        s: s.as_bytes(),
        pos: 0,
    };
    let e = p.expr()?;
    if p.peek().is_some() {
        return syntax(format!("trailing input in `{s}`"));
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// Operands

#[derive(Debug, Clone)]
enum Arg {
    Reg(u8),
    Zero,
    Mem(u8, Expr),
    Expr(Expr),
}

fn parse_reg(s: &str) -> Option<u8> {
    let s = s.trim();
    let lower = s.to_ascii_lowercase();
    let n = lower.strip_prefix('r')?;
    match n.parse::<u8>() {
        Ok(r) if r < 8 && n.len() == 1 => Some(r),
        _ => None,
    }
}

fn parse_arg(s: &str) -> Result<Arg> {
    let s = s.trim();
    if s.is_empty() {
        return syntax("empty operand");
    }
    if let Some(r) = parse_reg(s) {
        return Ok(Arg::Reg(r));
    }
    if s.eq_ignore_ascii_case("zero") {
        return Ok(Arg::Zero);
    }
    if let Some(inner) = s.strip_prefix('[') {
        let inner = inner
            .strip_suffix(']')
            .ok_or_else(|| AsmErrorKind::Syntax(format!("unterminated `{s}`")))?
            .trim();
        let split = inner.find(['+', '-']);
        let (reg, off) = match split {
            Some(i) => (&inner[..i], Some(&inner[i..])),
            None => (inner, None),
        };
        let reg = parse_reg(reg)
            .ok_or_else(|| AsmErrorKind::Syntax(format!("bad base register in `{s}`")))?;
        let off = match off {
            Some(o) => match o.strip_prefix('+') {
                Some(rest) => parse_expr(rest)?,
                None => parse_expr(o)?,
            },
            None => Expr::Num(0),
        };
        return Ok(Arg::Mem(reg, off));
    }
    Ok(Arg::Expr(parse_expr(s)?))
}

/// Splits on commas outside of quotes and brackets.
fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut depth = 0i32;
    let mut quote = false;
    for c in s.chars() {
        match c {
            '"' => {
                quote = !quote;
                cur.push(c);
            }
            '[' | '(' if !quote => {
                depth += 1;
                cur.push(c);
            }
            ']' | ')' if !quote => {
                depth -= 1;
                cur.push(c);
            }
            ',' if !quote && depth == 0 => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() || !out.is_empty() {
        out.push(cur);
    }
    out.into_iter().map(|s| s.trim().to_string()).collect()
}

fn strip_comment(line: &str) -> &str {
    let mut quote = false;
    let mut prev = '\0';
    for (i, c) in line.char_indices() {
        match c {
            '"' if prev != '\\' => quote = !quote,
            ';' | '#' if !quote => return &line[..i],
            '\'' if !quote => {
                // Skip a character literal such as ';'.
                if line[i..].len() >= 3 && line.as_bytes()[i + 2] == b'\'' {
                    return strip_comment_from(line, i + 3);
                }
            }
            _ => {}
        }
        prev = c;
    }
    line
}

fn strip_comment_from(line: &str, from: usize) -> &str {
    let tail = strip_comment(&line[from..]);
    &line[..from + tail.len()]
}

fn parse_string(s: &str) -> Result<Vec<u8>> {
    let s = s.trim();
    let inner = s
        .strip_prefix('"')
        .and_then(|t| t.strip_suffix('"'))
        .ok_or_else(|| AsmErrorKind::Syntax(format!("expected string literal, got `{s}`")))?;
    let mut out = Vec::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push(b'\n'),
                Some('t') => out.push(b'\t'),
                Some('0') => out.push(0),
                Some('\\') => out.push(b'\\'),
                Some('"') => out.push(b'"'),
                other => return syntax(format!("bad escape `\\{}`", other.unwrap_or(' '))),
            }
        } else {
            let mut buf = [0u8; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Statements

#[derive(Debug, Clone)]
enum Item {
    Inst { mnemonic: String, args: Vec<Arg> },
    Words(Vec<Expr>),
    Bytes(Vec<Expr>),
}

#[derive(Debug, Clone)]
struct Placed {
    line: usize,
    section: usize,
    addr: u32,
    item: Item,
}

fn inst_words(mnemonic: &str) -> Option<u32> {
    Some(match mnemonic {
        "li" | "mov" => 2,
        "loadi" | "loadhi" | "load" | "store" | "add" | "sub" | "mul" | "divu" | "and" | "or"
        | "xor" | "shl" | "shr" | "beq" | "bne" | "bltu" | "jmp" | "jal" | "sys" | "halt"
        | "call" | "ret" | "b" | "nop" => 1,
        _ => return None,
    })
}

struct Section {
    base: u32,
    bytes: Vec<u8>,
}

impl Section {
    fn cursor(&self) -> u64 {
        self.base as u64 + self.bytes.len() as u64
    }
}

/// Assembles `source` into a program image.
pub fn assemble(source: &str) -> std::result::Result<GuestProgram, AsmError> {
    let mut syms: HashMap<String, i64> = HashMap::new();
    // Section 0 is code; the rest are `.data` segments in source order.
    let mut sections = vec![Section {
        base: CODE_BASE,
        bytes: Vec::new(),
    }];
    let mut current = 0usize;
    let mut entry: Option<(usize, Expr)> = None;
    let mut placed: Vec<Placed> = Vec::new();

    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let err = |kind| AsmError { line, kind };
        let mut text = strip_comment(raw).trim();

        // Labels.
        while let Some(colon) = text.find(':') {
            let name = text[..colon].trim();
            if name.is_empty()
                || !is_ident_start(name.as_bytes()[0])
                || !name.bytes().all(is_ident_char)
            {
                break;
            }
            if syms.contains_key(name) {
                return Err(err(AsmErrorKind::DuplicateLabel(name.to_string())));
            }
            let addr = sections[current].cursor();
            syms.insert(name.to_string(), addr as i64);
            text = text[colon + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }

        let (head, rest) = match text.find(char::is_whitespace) {
            Some(i) => (&text[..i], text[i..].trim()),
            None => (text, ""),
        };
        let head_lc = head.to_ascii_lowercase();
        let ops = split_operands(rest);
        let want = |n: usize| -> std::result::Result<(), AsmError> {
            if ops.len() != n {
                Err(err(AsmErrorKind::Syntax(format!(
                    "`{head}` expects {n} operand(s), got {}",
                    ops.len()
                ))))
            } else {
                Ok(())
            }
        };
        let const_eval = |e: &Expr, syms: &HashMap<String, i64>| e.eval(syms).map_err(err);

        if head_lc.starts_with('.') {
            match head_lc.as_str() {
                ".text" => {
                    want(0)?;
                    current = 0;
                }
                ".data" => {
                    want(1)?;
                    let base = const_eval(&parse_expr(&ops[0]).map_err(err)?, &syms)?;
                    let base = u32::try_from(base).map_err(|_| {
                        err(AsmErrorKind::OutOfRange(format!("data address {base:#x}")))
                    })?;
                    sections.push(Section {
                        base,
                        bytes: Vec::new(),
                    });
                    current = sections.len() - 1;
                }
                ".entry" => {
                    want(1)?;
                    entry = Some((line, parse_expr(&ops[0]).map_err(err)?));
                }
                ".equ" | ".set" => {
                    want(2)?;
                    let name = ops[0].as_str();
                    if name.is_empty() || !name.bytes().all(is_ident_char) {
                        return Err(err(AsmErrorKind::Syntax(format!("bad symbol `{name}`"))));
                    }
                    if syms.contains_key(name) {
                        return Err(err(AsmErrorKind::DuplicateLabel(name.to_string())));
                    }
                    let v = const_eval(&parse_expr(&ops[1]).map_err(err)?, &syms)?;
                    syms.insert(name.to_string(), v);
                }
                ".word" | ".byte" => {
                    if ops.is_empty() {
                        return Err(err(AsmErrorKind::Syntax(format!("`{head}` needs values"))));
                    }
                    let exprs = ops
                        .iter()
                        .map(|o| parse_expr(o))
                        .collect::<Result<Vec<_>>>()
                        .map_err(err)?;
                    let (size, item) = if head_lc == ".word" {
                        (4 * exprs.len(), Item::Words(exprs))
                    } else {
                        (exprs.len(), Item::Bytes(exprs))
                    };
                    placed.push(Placed {
                        line,
                        section: current,
                        addr: sections[current].cursor() as u32,
                        item,
                    });
                    let len = sections[current].bytes.len() + size;
                    sections[current].bytes.resize(len, 0);
                }
                ".ascii" | ".asciz" => {
                    want(1)?;
                    let mut bytes = parse_string(&ops[0]).map_err(err)?;
                    if head_lc == ".asciz" {
                        bytes.push(0);
                    }
                    sections[current].bytes.extend_from_slice(&bytes);
                }
                ".space" => {
                    want(1)?;
                    let n = const_eval(&parse_expr(&ops[0]).map_err(err)?, &syms)?;
                    if !(0..=1 << 30).contains(&n) {
                        return Err(err(AsmErrorKind::OutOfRange(format!(".space {n}"))));
                    }
                    let len = sections[current].bytes.len() + n as usize;
                    sections[current].bytes.resize(len, 0);
                }
                ".align" => {
                    want(1)?;
                    let n = const_eval(&parse_expr(&ops[0]).map_err(err)?, &syms)?;
                    if !(1..=4096).contains(&n) {
                        return Err(err(AsmErrorKind::OutOfRange(format!(".align {n}"))));
                    }
                    while sections[current].cursor() % n as u64 != 0 {
                        sections[current].bytes.push(0);
                    }
                }
                _ => {
                    return Err(err(AsmErrorKind::Syntax(format!(
                        "unknown directive `{head}`"
                    ))))
                }
            }
        } else {
            let words = inst_words(&head_lc).ok_or_else(|| {
                err(AsmErrorKind::Syntax(format!("unknown mnemonic `{head}`")))
            })?;
            if current != 0 {
                return Err(err(AsmErrorKind::Syntax(
                    "instructions must be in the .text section".into(),
                )));
            }
            if sections[0].bytes.len() % 4 != 0 {
                return Err(err(AsmErrorKind::Syntax(
                    "instruction is not word aligned (use .align 4)".into(),
                )));
            }
            let args = ops
                .iter()
                .map(|o| parse_arg(o))
                .collect::<Result<Vec<_>>>()
                .map_err(err)?;
            placed.push(Placed {
                line,
                section: 0,
                addr: sections[0].cursor() as u32,
                item: Item::Inst {
                    mnemonic: head_lc,
                    args,
                },
            });
            let len = sections[0].bytes.len() + 4 * words as usize;
            sections[0].bytes.resize(len, 0);
        }
        if sections[current].cursor() > 1 << 32 {
            return Err(err(AsmErrorKind::OutOfRange(
                "section runs past the end of the address space".into(),
            )));
        }
    }

    // Pass two: resolve expressions and encode.
    for p in &placed {
        let err = |kind| AsmError { line: p.line, kind };
        let base = sections[p.section].base;
        let off = (p.addr - base) as usize;
        match &p.item {
            Item::Inst { mnemonic, args } => {
                let insts = encode_inst(mnemonic, args, p.addr, &syms).map_err(err)?;
                for (i, inst) in insts.iter().enumerate() {
                    sections[0].bytes[off + 4 * i..off + 4 * i + 4]
                        .copy_from_slice(&inst.encode().to_le_bytes());
                }
            }
            Item::Words(exprs) => {
                for (i, e) in exprs.iter().enumerate() {
                    let v = e.eval(&syms).map_err(err)?;
                    let w = fit_u32(v).map_err(err)?;
                    sections[p.section].bytes[off + 4 * i..off + 4 * i + 4]
                        .copy_from_slice(&w.to_le_bytes());
                }
            }
            Item::Bytes(exprs) => {
                for (i, e) in exprs.iter().enumerate() {
                    let v = e.eval(&syms).map_err(err)?;
                    if !(-128..=255).contains(&v) {
                        return Err(err(AsmErrorKind::OutOfRange(format!("byte {v}"))));
                    }
                    sections[p.section].bytes[off + i] = v as u8;
                }
            }
        }
    }

    let entry = match entry {
        Some((line, e)) => {
            let v = e.eval(&syms).map_err(|kind| AsmError { line, kind })?;
            let v = fit_u32(v).map_err(|kind| AsmError { line, kind })?;
            if v % 4 != 0 {
                return Err(AsmError {
                    line,
                    kind: AsmErrorKind::OutOfRange(format!("entry {v:#x} is misaligned")),
                });
            }
            v
        }
        None => CODE_BASE,
    };
    if sections[0].bytes.len() % 4 != 0 {
        let n = 4 - sections[0].bytes.len() % 4;
        sections[0].bytes.extend(std::iter::repeat(0).take(n));
    }
    let mut it = sections.into_iter();
    let code = it.next().expect("code section").bytes;
    let data = it
        .filter(|s| !s.bytes.is_empty())
        .map(|s| DataSegment {
            addr: s.base,
            bytes: s.bytes,
        })
        .collect();
    Ok(GuestProgram { entry, code, data })
}

fn fit_u32(v: i64) -> Result<u32> {
    if (i32::MIN as i64..=u32::MAX as i64).contains(&v) {
        Ok(v as u32)
    } else {
        Err(AsmErrorKind::OutOfRange(format!("{v:#x} does not fit in 32 bits")))
    }
}

fn fit_u16(v: i64, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| AsmErrorKind::OutOfRange(format!("{what} {v} not in 0..=65535")))
}

fn fit_i16(v: i64, what: &str) -> Result<i16> {
    i16::try_from(v).map_err(|_| AsmErrorKind::OutOfRange(format!("{what} {v} not in i16")))
}

fn rel_offset(target: i64, pc: u32) -> Result<i16> {
    let delta = target - (pc as i64 + 4);
    if delta % 4 != 0 {
        return Err(AsmErrorKind::OutOfRange(format!(
            "branch target {target:#x} is misaligned"
        )));
    }
    i16::try_from(delta / 4).map_err(|_| {
        AsmErrorKind::OutOfRange(format!("branch target {target:#x} too far from {pc:#x}"))
    })
}

fn encode_inst(
    mnemonic: &str,
    args: &[Arg],
    pc: u32,
    syms: &HashMap<String, i64>,
) -> Result<Vec<Instruction>> {
    let bad = || {
        syntax::<Vec<Instruction>>(format!(
            "bad operands for `{mnemonic}`: {}",
            args.iter()
                .map(|a| format!("{a:?}"))
                .collect::<Vec<_>>()
                .join(", ")
        ))
    };
    let reg = |a: &Arg| match a {
        Arg::Reg(r) => Some(*r),
        _ => None,
    };
    let target = |a: &Arg, pc: u32| -> Result<Target> {
        match a {
            Arg::Reg(r) => Ok(Target::Reg(*r)),
            Arg::Expr(e) => Ok(Target::Rel(rel_offset(e.eval(syms)?, pc)?)),
            _ => syntax("expected register or address"),
        }
    };
    let alu = |op: AluOp| -> Result<Vec<Instruction>> {
        match args {
            [Arg::Reg(rd), Arg::Reg(rs)] => Ok(vec![Instruction::Alu {
                op,
                rd: *rd,
                operand: Operand::Reg(*rs),
            }]),
            [Arg::Reg(rd), Arg::Expr(e)] => Ok(vec![Instruction::Alu {
                op,
                rd: *rd,
                operand: Operand::Imm(fit_u16(e.eval(syms)?, "immediate")?),
            }]),
            _ => bad(),
        }
    };
    let branch = |op: BranchOp| -> Result<Vec<Instruction>> {
        match args {
            [Arg::Reg(a), b, Arg::Expr(t)] => {
                let b = match b {
                    Arg::Reg(r) => Some(*r),
                    Arg::Zero => None,
                    _ => return bad(),
                };
                Ok(vec![Instruction::Branch {
                    op,
                    a: *a,
                    b,
                    offset: rel_offset(t.eval(syms)?, pc)?,
                }])
            }
            _ => bad(),
        }
    };
    match mnemonic {
        "loadi" | "loadhi" => match args {
            [Arg::Reg(rd), Arg::Expr(e)] => Ok(vec![Instruction::LoadI {
                rd: *rd,
                imm: fit_u16(e.eval(syms)?, "immediate")?,
                high: mnemonic == "loadhi",
            }]),
            _ => bad(),
        },
        "li" => match args {
            [Arg::Reg(rd), Arg::Expr(e)] => {
                let v = fit_u32(e.eval(syms)?)?;
                Ok(vec![
                    Instruction::LoadI {
                        rd: *rd,
                        imm: v as u16,
                        high: false,
                    },
                    Instruction::LoadI {
                        rd: *rd,
                        imm: (v >> 16) as u16,
                        high: true,
                    },
                ])
            }
            _ => bad(),
        },
        "mov" => match args {
            [Arg::Reg(rd), Arg::Reg(rs)] => Ok(vec![
                Instruction::LoadI {
                    rd: *rd,
                    imm: 0,
                    high: false,
                },
                Instruction::Alu {
                    op: AluOp::Or,
                    rd: *rd,
                    operand: Operand::Reg(*rs),
                },
            ]),
            _ => bad(),
        },
        "load" | "store" => match args {
            [Arg::Reg(r), Arg::Mem(base, off)] => {
                let offset = fit_i16(off.eval(syms)?, "offset")?;
                Ok(vec![if mnemonic == "load" {
                    Instruction::Load {
                        rd: *r,
                        base: *base,
                        offset,
                    }
                } else {
                    Instruction::Store {
                        src: *r,
                        base: *base,
                        offset,
                    }
                }])
            }
            _ => bad(),
        },
        "add" => alu(AluOp::Add),
        "sub" => alu(AluOp::Sub),
        "mul" => alu(AluOp::Mul),
        "divu" => alu(AluOp::DivU),
        "and" => alu(AluOp::And),
        "or" => alu(AluOp::Or),
        "xor" => alu(AluOp::Xor),
        "shl" => alu(AluOp::Shl),
        "shr" => alu(AluOp::Shr),
        "nop" if args.is_empty() => Ok(vec![Instruction::Alu {
            op: AluOp::Add,
            rd: 0,
            operand: Operand::Imm(0),
        }]),
        "beq" => branch(BranchOp::Eq),
        "bne" => branch(BranchOp::Ne),
        "bltu" => branch(BranchOp::LtU),
        "jmp" | "b" => match args {
            [t] => Ok(vec![Instruction::Jmp {
                target: target(t, pc)?,
            }]),
            _ => bad(),
        },
        "jal" => match args {
            [l, t] if reg(l).is_some() => Ok(vec![Instruction::Jal {
                link: reg(l).unwrap(),
                target: target(t, pc)?,
            }]),
            _ => bad(),
        },
        "call" => match args {
            [t] => Ok(vec![Instruction::Jal {
                link: 7,
                target: target(t, pc)?,
            }]),
            _ => bad(),
        },
        "ret" if args.is_empty() => Ok(vec![Instruction::Jmp {
            target: Target::Reg(7),
        }]),
        "sys" if args.is_empty() => Ok(vec![Instruction::Sys]),
        "halt" => match args {
            [Arg::Reg(r)] => Ok(vec![Instruction::Halt {
                code: Operand::Reg(*r),
            }]),
            [Arg::Expr(e)] => Ok(vec![Instruction::Halt {
                code: Operand::Imm(fit_u16(e.eval(syms)?, "halt code")?),
            }]),
            _ => bad(),
        },
        _ => bad(),
    }
}

/// Renders a program as assembler source that reassembles to the same image.
pub fn disassemble(program: &GuestProgram) -> String {
    let mut out = String::new();
    out.push_str(&format!(".entry {:#x}\n.text\n", program.entry));
    for (i, chunk) in program.code.chunks(4).enumerate() {
        let pc = CODE_BASE + 4 * i as u32;
        let w = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        match Instruction::decode(w) {
            Some(inst) => out.push_str(&format!("    {:<32} ; {pc:#010x}\n", format_instruction(inst, pc))),
            None => out.push_str(&format!("    .word {w:#010x}{:<16} ; {pc:#010x}\n", "")),
        }
    }
    for seg in &program.data {
        out.push_str(&format!(".data {:#x}\n", seg.addr));
        for chunk in seg.bytes.chunks(16) {
            let bytes: Vec<String> = chunk.iter().map(|b| format!("{b:#04x}")).collect();
            out.push_str(&format!("    .byte {}\n", bytes.join(", ")));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halt_zero_is_one_word() {
        let p = assemble("halt 0").unwrap();
        assert_eq!(p.code.len(), 4);
        assert_eq!(
            Instruction::decode(u32::from_le_bytes(p.code[..4].try_into().unwrap())),
            Some(Instruction::Halt {
                code: Operand::Imm(0)
            })
        );
        assert_eq!(p.entry, CODE_BASE);
    }

    #[test]
    fn unknown_mnemonic_reports_line() {
        let e = assemble("foo").unwrap_err();
        assert_eq!(e.line, 1);
        assert!(matches!(e.kind, AsmErrorKind::Syntax(_)));
        let e = assemble("halt 0\n\n  bar r1").unwrap_err();
        assert_eq!(e.line, 3);
    }

    #[test]
    fn duplicate_label_is_rejected() {
        let e = assemble("a: halt 0\na: halt 1").unwrap_err();
        assert_eq!(e, AsmError {
            line: 2,
            kind: AsmErrorKind::DuplicateLabel("a".into())
        });
    }

    #[test]
    fn branch_out_of_range() {
        let src = "beq r0, zero, far\n.space 200000\nfar: halt 0";
        let e = assemble(src).unwrap_err();
        assert_eq!(e.line, 1);
        assert!(matches!(e.kind, AsmErrorKind::OutOfRange(_)));
    }

    #[test]
    fn undefined_symbol() {
        let e = assemble("jmp nowhere").unwrap_err();
        assert_eq!(e.kind, AsmErrorKind::UndefinedSymbol("nowhere".into()));
    }

    #[test]
    fn labels_data_and_pseudos() {
        let src = r#"
            .equ COUNT, 3
            .entry start
            start:
                li r1, table      ; address of data
                load r2, [r1+4]
                mov r3, r2
                call sub
                halt r3
            sub:
                add r3, COUNT
                ret
            .data 0x200000
            table: .word 1, 2, -1
            name:  .asciz "a;b"
        "#;
        let p = assemble(src).unwrap();
        assert_eq!(p.entry, CODE_BASE);
        assert_eq!(p.data.len(), 1);
        assert_eq!(p.data[0].addr, 0x20_0000);
        assert_eq!(&p.data[0].bytes[..12], &[1, 0, 0, 0, 2, 0, 0, 0, 255, 255, 255, 255]);
        assert_eq!(&p.data[0].bytes[12..], b"a;b\0");
        let mut mem = crate::space::AddressSpace::new();
        p.load_into(&mut mem);
        let mut regs = crate::vm::Registers {
            pc: p.entry,
            ..Default::default()
        };
        let out = crate::vm::run_until_stop(&mut regs, &mut mem, 100);
        assert_eq!(out.stop, crate::vm::StopReason::Halt(5));
    }

    #[test]
    fn disassembly_reassembles_identically() {
        let src = "start: li r1, 0xdeadbeef\nloop: sub r1, 1\nbne r1, zero, loop\njmp r7\n.word 0\n.data 0x8000\n.ascii \"xyz\"";
        let p = assemble(src).unwrap();
        let text = disassemble(&p);
        assert_eq!(assemble(&text).unwrap(), p);
    }
}
