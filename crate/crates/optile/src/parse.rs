//! The textual spec grammar:
//!
//! ```text
//! spec   := KIND "(" shape ("," tspec)+ ("," "serial")? ")" ("limits=[" INT ("," INT)* "]")?
//! KIND   := "Matmul" | "MatmulAccum" | "Move" | "Zero" | "Compose[" KIND ("," KIND)* "]"
//! shape  := INT ("x" INT)*
//! tspec  := "(" DTYPE "," LEVEL "," LAYOUT ("," "ua")? ("," "c" INT)? ("," "v" INT)? ")"
//! DTYPE  := "u8" | "bf16" | "f32"
//! LEVEL  := "RF" | "VRF" | "L1" | "GL"
//! LAYOUT := ("row_major" | "col_major" | "order(" INT ("," INT)* ")")
//!           ("+pack(" INT "," INT ")" | "+pack_shuf(" INT "," INT ")")*
//! ```
//!
//! Omitted fields default to: aligned, fully contiguous, parallel allowed,
//! and the target's full capacities as limits. A VRF tensor with no `v`
//! field gets the unique legal vector size for its dtype.

use crate::layout::Layout;
use crate::memorylimits::{MemVec, MemoryLimits};
use crate::spec::{PrimKind, Spec, SpecKind};
use crate::target::{MemoryLevel, Target, LEVEL_COUNT};
use crate::tensorspec::{Dtype, TensorSpec};

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
#[error("parse error at byte {pos}: {message}")]
pub struct ParseError {
    pub pos: usize,
    pub message: String,
}

struct Parser<'a> {
    text: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            pos: self.pos,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.text.len() && self.text[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.text.get(self.pos).copied()
    }

    fn eat(&mut self, token: &str) -> bool {
        self.skip_ws();
        if self.text[self.pos..].starts_with(token.as_bytes()) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, token: &str) -> Result<(), ParseError> {
        if self.eat(token) {
            Ok(())
        } else {
            self.err(format!("expected {token:?}"))
        }
    }

    fn word(&mut self) -> &'a str {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.text.len()
            && (self.text[self.pos].is_ascii_alphanumeric() || self.text[self.pos] == b'_')
        {
            self.pos += 1;
        }
        std::str::from_utf8(&self.text[start..self.pos]).unwrap()
    }

    fn integer(&mut self) -> Result<u64, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.text.len() && self.text[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return self.err("expected an integer");
        }
        std::str::from_utf8(&self.text[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| ParseError {
                pos: start,
                message: "integer too large".into(),
            })
    }

    fn prim_kind(&mut self) -> Result<PrimKind, ParseError> {
        let at = self.pos;
        match self.word() {
            "MatmulAccum" => Ok(PrimKind::MatmulAccum),
            "Matmul" => Ok(PrimKind::Matmul),
            "Move" => Ok(PrimKind::Move),
            "Zero" => Ok(PrimKind::Zero),
            other => Err(ParseError {
                pos: at,
                message: format!("expected Matmul, MatmulAccum, Move, or Zero, found {other:?}"),
            }),
        }
    }

    fn kind(&mut self) -> Result<SpecKind, ParseError> {
        if self.eat("Compose[") {
            let mut kinds = vec![self.prim_kind()?];
            while self.eat(",") {
                kinds.push(self.prim_kind()?);
            }
            self.expect("]")?;
            Ok(SpecKind::Compose(kinds))
        } else {
            Ok(SpecKind::Prim(self.prim_kind()?))
        }
    }

    fn shape(&mut self) -> Result<Vec<u32>, ParseError> {
        let mut shape = vec![self.extent()?];
        while self.eat("x") {
            shape.push(self.extent()?);
        }
        Ok(shape)
    }

    fn extent(&mut self) -> Result<u32, ParseError> {
        let at = self.pos;
        let v = self.integer()?;
        let Ok(v) = u32::try_from(v) else {
            return Err(ParseError {
                pos: at,
                message: format!("extent {v} too large"),
            });
        };
        if v == 0 || !v.is_power_of_two() {
            return Err(ParseError {
                pos: at,
                message: format!("extent {v} is not a power of two"),
            });
        }
        Ok(v)
    }

    fn layout(&mut self, rank: u8) -> Result<Layout, ParseError> {
        let at = self.pos;
        let mut layout = if self.eat("row_major") {
            Layout::row_major(rank)
        } else if self.eat("col_major") {
            Layout::col_major(rank)
        } else if self.eat("order(") {
            let mut order = vec![self.integer()? as u8];
            while self.eat(",") {
                order.push(self.integer()? as u8);
            }
            self.expect(")")?;
            Layout {
                order,
                packs: Vec::new(),
            }
        } else {
            return self.err("expected row_major, col_major, or order(...)");
        };
        loop {
            let odd_even = if self.eat("+pack_shuf(") {
                true
            } else if self.eat("+pack(") {
                false
            } else {
                break;
            };
            let dim = self.integer()? as u8;
            self.expect(",")?;
            let size = self.integer()? as u32;
            self.expect(")")?;
            layout = layout.with_pack(dim, size, odd_even);
        }
        layout.check(rank).map_err(|e| ParseError {
            pos: at,
            message: e.to_string(),
        })?;
        Ok(layout)
    }

    /// Parses one tensor spec given its derived shape.
    fn tspec(&mut self, shape: &[u32], target: &Target) -> Result<TensorSpec, ParseError> {
        let at = self.pos;
        self.expect("(")?;
        let dtype = match self.word() {
            "u8" => Dtype::U8,
            "bf16" => Dtype::Bf16,
            "f32" => Dtype::F32,
            other => {
                return self.err(format!("expected u8, bf16, or f32, found {other:?}"));
            }
        };
        self.expect(",")?;
        let level: MemoryLevel = {
            let at = self.pos;
            self.word().parse().map_err(|()| ParseError {
                pos: at,
                message: "expected RF, VRF, L1, or GL".into(),
            })?
        };
        self.expect(",")?;
        let layout = self.layout(shape.len() as u8)?;

        let mut aligned = true;
        let mut contig = None;
        let mut vector_size = None;
        loop {
            let save = self.pos;
            if !self.eat(",") {
                break;
            }
            self.skip_ws();
            if self.eat("ua") {
                aligned = false;
            } else if self.peek() == Some(b'c') {
                self.pos += 1;
                contig = Some(self.integer()? as u8);
            } else if self.peek() == Some(b'v') {
                self.pos += 1;
                vector_size = Some(self.integer()? as u32);
            } else {
                self.pos = save;
                break;
            }
        }
        self.expect(")")?;

        // A spec operand is backed by a real buffer, so its strips must
        // divide its extents.
        if let Err(e) = layout.buffer_index_expr(shape) {
            return Err(ParseError {
                pos: at,
                message: e.to_string(),
            });
        }
        let contig = contig.unwrap_or_else(|| layout.physical_rank());
        if vector_size.is_none() && level.is_vector_rf() {
            vector_size = Some((target.vector_register_bytes / dtype.bytes()) as u32);
        }
        TensorSpec::new(
            dtype,
            shape.to_vec(),
            level,
            layout,
            aligned,
            contig,
            vector_size,
            target,
        )
        .map_err(|e| ParseError {
            pos: at,
            message: e.to_string(),
        })
    }

    fn limits(&mut self, target: &Target) -> Result<MemoryLimits, ParseError> {
        if !self.eat("limits=[") {
            return Ok(MemoryLimits::from_capacities(&target.capacities));
        }
        let mut values = vec![self.limit_value()?];
        while self.eat(",") {
            values.push(self.limit_value()?);
        }
        self.expect("]")?;
        if values.len() != LEVEL_COUNT {
            return self.err(format!(
                "expected {LEVEL_COUNT} limits (RF, VRF, L1, GL), got {}",
                values.len()
            ));
        }
        let mut mem = MemVec::zero();
        mem.0.copy_from_slice(&values);
        Ok(MemoryLimits::new(mem))
    }

    fn limit_value(&mut self) -> Result<u64, ParseError> {
        let at = self.pos;
        let v = self.integer()?;
        if v != 0 && !v.is_power_of_two() {
            return Err(ParseError {
                pos: at,
                message: format!("limit {v} must be 0 or a power of two"),
            });
        }
        Ok(v)
    }
}

pub fn parse_spec(text: &str, target: &Target) -> Result<Spec, ParseError> {
    let mut p = Parser {
        text: text.as_bytes(),
        pos: 0,
    };
    let kind_at = p.pos;
    let kind = p.kind()?;
    p.expect("(")?;
    let shape = p.shape()?;

    let info = crate::spec::operand_info(&kind, shape.len()).map_err(|e| ParseError {
        pos: kind_at,
        message: e.to_string(),
    })?;
    let operand_shapes: Vec<Vec<u32>> = info
        .dim_maps
        .iter()
        .map(|m| m.iter().map(|&d| shape[d as usize]).collect())
        .collect();

    let mut operands = Vec::new();
    let mut serial_only = false;
    while p.eat(",") {
        if p.eat("serial") {
            serial_only = true;
            break;
        }
        if operands.len() == operand_shapes.len() {
            return p.err(format!("{kind} takes {} operands", operand_shapes.len()));
        }
        let ts = p.tspec(&operand_shapes[operands.len()], target)?;
        operands.push(ts);
    }
    p.expect(")")?;
    let limits = p.limits(target)?;
    p.skip_ws();
    if p.pos != p.text.len() {
        return p.err("unexpected trailing input");
    }

    Spec::new(kind, shape, operands, serial_only, limits).map_err(|e| ParseError {
        pos: kind_at,
        message: e.to_string(),
    })
}
