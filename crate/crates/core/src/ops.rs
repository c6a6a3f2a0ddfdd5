//! The sixteen two-input Boolean operators.
//!
//! Every operator is stored as a bilinear polynomial
//! `c0 + ca*A + cb*B + cab*A*B`, which is its real-valued relaxation on
//! `[0,1]^2` and reproduces the truth table exactly at the binary corners.

use crate::error::{Error, Result};

pub const NUM_OPS: usize = 16;

pub const FALSE: u8 = 0;
pub const AND: u8 = 1;
pub const A_AND_NOT_B: u8 = 2;
pub const PASS_A: u8 = 3;
pub const NOT_A_AND_B: u8 = 4;
pub const PASS_B: u8 = 5;
pub const XOR: u8 = 6;
pub const OR: u8 = 7;
pub const NOR: u8 = 8;
pub const XNOR: u8 = 9;
pub const NOT_B: u8 = 10;
pub const A_OR_NOT_B: u8 = 11;
pub const NOT_A: u8 = 12;
pub const NOT_A_OR_B: u8 = 13;
pub const NAND: u8 = 14;
pub const TRUE: u8 = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Operator {
    pub name: &'static str,
    /// Outputs for inputs (0,0), (0,1), (1,0), (1,1), with A the first digit.
    pub truth: [u8; 4],
    /// Two-input gate OPs needed to realise the operator in hardware.
    pub cost: u32,
    coeffs: [i8; 4],
}

impl Operator {
    /// The clamp only absorbs rounding; on `[0,1]^2` the polynomial itself
    /// stays within `[0,1]`.
    #[inline]
    pub fn soft(&self, a: f64, b: f64) -> f64 {
        let [c0, ca, cb, cab] = self.coeffs;
        (f64::from(c0) + f64::from(ca) * a + f64::from(cb) * b + f64::from(cab) * a * b)
            .clamp(0.0, 1.0)
    }

    /// Partial derivatives of the soft form with respect to `a` and `b`.
    #[inline]
    pub fn soft_grad(&self, a: f64, b: f64) -> (f64, f64) {
        let [_, ca, cb, cab] = self.coeffs;
        (
            f64::from(ca) + f64::from(cab) * b,
            f64::from(cb) + f64::from(cab) * a,
        )
    }

    #[inline]
    pub fn hard(&self, a: bool, b: bool) -> bool {
        self.truth[(usize::from(a) << 1) | usize::from(b)] == 1
    }

    /// Polynomial coefficients `[c0, ca, cb, cab]`.
    pub fn coefficients(&self) -> [f64; 4] {
        self.coeffs.map(f64::from)
    }

    pub fn is_commutative(&self) -> bool {
        self.truth[1] == self.truth[2]
    }
}

const fn op(name: &'static str, truth: [u8; 4], coeffs: [i8; 4], cost: u32) -> Operator {
    Operator {
        name,
        truth,
        cost,
        coeffs,
    }
}

pub static OPERATORS: [Operator; NUM_OPS] = [
    op("False", [0, 0, 0, 0], [0, 0, 0, 0], 0),
    op("A and B", [0, 0, 0, 1], [0, 0, 0, 1], 1),
    op("not (A implies B)", [0, 0, 1, 0], [0, 1, 0, -1], 1),
    op("A", [0, 0, 1, 1], [0, 1, 0, 0], 0),
    op("not (A implied by B)", [0, 1, 0, 0], [0, 0, 1, -1], 1),
    op("B", [0, 1, 0, 1], [0, 0, 1, 0], 0),
    op("A xor B", [0, 1, 1, 0], [0, 1, 1, -2], 3),
    op("A or B", [0, 1, 1, 1], [0, 1, 1, -1], 1),
    op("not (A or B)", [1, 0, 0, 0], [1, -1, -1, 1], 1),
    op("not (A xor B)", [1, 0, 0, 1], [1, -1, -1, 2], 3),
    op("not B", [1, 0, 1, 0], [1, 0, -1, 0], 0),
    op("A implied by B", [1, 0, 1, 1], [1, 0, -1, 1], 1),
    op("not A", [1, 1, 0, 0], [1, -1, 0, 0], 0),
    op("A implies B", [1, 1, 0, 1], [1, -1, 0, 1], 1),
    op("not (A and B)", [1, 1, 1, 0], [1, 0, 0, -1], 1),
    op("True", [1, 1, 1, 1], [1, 0, 0, 0], 0),
];

pub fn operator(op_id: usize) -> Result<&'static Operator> {
    OPERATORS.get(op_id).ok_or(Error::InvalidOperator(op_id))
}

fn check_unit(what: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::Domain { what, value })
    }
}

/// Real-valued relaxation of operator `op_id` at `(a, b)`.
pub fn soft_logic(op_id: usize, a: f64, b: f64) -> Result<f64> {
    let op = operator(op_id)?;
    check_unit("a", a)?;
    check_unit("b", b)?;
    Ok(op.soft(a, b))
}

pub fn hard_logic(op_id: usize, a: bool, b: bool) -> Result<bool> {
    Ok(operator(op_id)?.hard(a, b))
}

pub fn op_cost(op_id: usize) -> Result<u32> {
    Ok(operator(op_id)?.cost)
}

/// Finds the operator whose truth table is `truth`.
pub fn from_truth(truth: [u8; 4]) -> u8 {
    OPERATORS
        .iter()
        .position(|o| o.truth == truth)
        .expect("all 16 truth tables are present") as u8
}
