//! Scalar reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`]s created from it.
//! [`Tape::backward`] then sweeps the recorded nodes in reverse and returns
//! the adjoint of every node with respect to a single scalar output.
//!
//! Model code is written once against the [`Real`] trait and runs either on
//! plain `f64` (density evaluation only) or on `Var` (density plus gradient).
//! A `Var` without a tape is a free constant and never allocates a node.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

const NO_PARENT: u32 = u32::MAX;

/// Operation recorded in a [`TapeNode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Constant,
    Add,
    Mul,
    Neg,
    Exp,
    Log,
    Pow,
    Div,
    Erf,
    Tanh,
    Softplus,
}

/// Which operation produced a domain error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainError {
    pub op: OpKind,
    pub argument: f64,
}

impl fmt::Display for DomainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} of invalid argument {}", self.op, self.argument)
    }
}

impl std::error::Error for DomainError {}

#[derive(Debug, Clone, Copy)]
pub struct TapeNode {
    pub op: OpKind,
    pub parents: [u32; 2],
    pub partials: [f64; 2],
    /// Constant operand folded into a binary op (the missing parent).
    pub aux: f64,
    pub value: f64,
}

impl TapeNode {
    fn parent(&self, slot: usize) -> Option<usize> {
        (self.parents[slot] != NO_PARENT).then_some(self.parents[slot] as usize)
    }
}

/// Arena of recorded operations. One tape per density evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<TapeNode>>,
    error: Cell<Option<DomainError>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("len", &self.len())
            .field("error", &self.error.get())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(capacity)),
            error: Cell::new(None),
        }
    }

    /// Creates a leaf node; gradients are reported with respect to leaves.
    pub fn var(&self, value: f64) -> Var<'_> {
        let index = self.push(TapeNode {
            op: OpKind::Constant,
            parents: [NO_PARENT; 2],
            partials: [0.0; 2],
            aux: 0.0,
            value,
        });
        Var {
            tape: Some(self),
            index,
            value,
        }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First domain error raised while recording, if any.
    pub fn domain_error(&self) -> Option<DomainError> {
        self.error.get()
    }

    /// Drops all nodes but keeps the allocation.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.error.set(None);
    }

    pub fn node(&self, index: usize) -> TapeNode {
        self.nodes.borrow()[index]
    }

    fn push(&self, node: TapeNode) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        assert!(index < NO_PARENT as usize, "tape overflow");
        nodes.push(node);
        index as u32
    }

    fn flag(&self, op: OpKind, argument: f64) {
        if self.error.get().is_none() {
            self.error.set(Some(DomainError { op, argument }));
        }
    }

    /// Reverse sweep from `output`. Nodes not on a path to the output get 0.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut adjoints = vec![0.0; nodes.len()];
        let Some(tape) = output.tape else {
            return Gradients { adjoints };
        };
        assert!(std::ptr::eq(tape, self), "output recorded on a different tape");
        adjoints[output.index as usize] = 1.0;
        for i in (0..=output.index as usize).rev() {
            let adjoint = adjoints[i];
            if adjoint == 0.0 {
                continue;
            }
            let node = &nodes[i];
            for slot in 0..2 {
                if let Some(p) = node.parent(slot) {
                    adjoints[p] += adjoint * node.partials[slot];
                }
            }
        }
        Gradients { adjoints }
    }

    /// Checks the DAG ordering and recomputes every node from its parents.
    /// Returns the index of the first inconsistent node.
    pub fn verify(&self) -> Result<(), usize> {
        let nodes = self.nodes.borrow();
        for (i, node) in nodes.iter().enumerate() {
            let parent_value = |slot: usize| node.parent(slot).map(|p| nodes[p].value);
            for slot in 0..2 {
                if let Some(p) = node.parent(slot) {
                    if p >= i {
                        return Err(i);
                    }
                }
            }
            let a = parent_value(0).unwrap_or(node.aux);
            let b = parent_value(1).unwrap_or(node.aux);
            let expected = match node.op {
                OpKind::Constant => node.value,
                OpKind::Add => a + b,
                OpKind::Mul => a * b,
                OpKind::Div => a / b,
                OpKind::Pow => a.powf(b),
                OpKind::Neg => -a,
                OpKind::Exp => a.exp(),
                OpKind::Log => a.ln(),
                OpKind::Erf => libm::erf(a),
                OpKind::Tanh => a.tanh(),
                OpKind::Softplus => softplus(a),
            };
            let same = expected == node.value
                || (expected.is_nan() && node.value.is_nan())
                || (expected - node.value).abs() <= 1e-12 * expected.abs().max(1.0);
            if !same {
                return Err(i);
            }
        }
        Ok(())
    }
}

/// Adjoints indexed by tape node.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> f64 {
        if var.tape.is_none() {
            return 0.0;
        }
        self.adjoints.get(var.index as usize).copied().unwrap_or(0.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.adjoints
    }
}

/// A scalar recorded on a tape, or a free constant when `tape` is `None`.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    index: u32,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tape {
            Some(_) => write!(f, "Var(#{} = {})", self.index, self.value),
            None => write!(f, "Var(const {})", self.value),
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(value: f64) -> Self {
        Self {
            tape: None,
            index: NO_PARENT,
            value,
        }
    }

    pub fn index(&self) -> Option<usize> {
        self.tape.map(|_| self.index as usize)
    }

    pub fn is_constant(&self) -> bool {
        self.tape.is_none()
    }

    fn unary(self, op: OpKind, value: f64, partial: f64) -> Self {
        match self.tape {
            None => Self::constant(value),
            Some(tape) => {
                let index = tape.push(TapeNode {
                    op,
                    parents: [self.index, NO_PARENT],
                    partials: [partial, 0.0],
                    aux: 0.0,
                    value,
                });
                Self {
                    tape: Some(tape),
                    index,
                    value,
                }
            }
        }
    }

    fn binary(op: OpKind, a: Self, b: Self, value: f64, da: f64, db: f64) -> Self {
        let tape = match (a.tape, b.tape) {
            (None, None) => return Self::constant(value),
            (Some(t), None) | (None, Some(t)) => t,
            (Some(t), Some(u)) => {
                assert!(std::ptr::eq(t, u), "operands recorded on different tapes");
                t
            }
        };
        let (parents, partials, aux) = match (a.tape.is_some(), b.tape.is_some()) {
            (true, true) => ([a.index, b.index], [da, db], 0.0),
            (true, false) => ([a.index, NO_PARENT], [da, 0.0], b.value),
            _ => ([NO_PARENT, b.index], [0.0, db], a.value),
        };
        let index = tape.push(TapeNode {
            op,
            parents,
            partials,
            aux,
            value,
        });
        Self {
            tape: Some(tape),
            index,
            value,
        }
    }

    fn flag(self, op: OpKind) {
        if let Some(tape) = self.tape {
            tape.flag(op, self.value);
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const TWO_OVER_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// Scalar arithmetic shared by `f64` and [`Var`].
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn lift(value: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn powf(self, exponent: f64) -> Self;
    fn pow(self, exponent: Self) -> Self;
    fn erf(self) -> Self;
    fn tanh(self) -> Self;
    fn softplus(self) -> Self;

    fn sqrt(self) -> Self {
        self.powf(0.5)
    }

    fn square(self) -> Self {
        self * self
    }
}

impl Real for f64 {
    fn lift(value: f64) -> Self {
        value
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn powf(self, exponent: f64) -> Self {
        f64::powf(self, exponent)
    }
    fn pow(self, exponent: Self) -> Self {
        f64::powf(self, exponent)
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn softplus(self) -> Self {
        softplus(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

impl Real for Var<'_> {
    fn lift(value: f64) -> Self {
        Var::constant(value)
    }
    fn value(self) -> f64 {
        self.value
    }
    fn exp(self) -> Self {
        let v = self.value.exp();
        self.unary(OpKind::Exp, v, v)
    }
    fn ln(self) -> Self {
        if self.value <= 0.0 || self.value.is_nan() {
            self.flag(OpKind::Log);
        }
        self.unary(OpKind::Log, self.value.ln(), 1.0 / self.value)
    }
    fn powf(self, exponent: f64) -> Self {
        let v = self.value.powf(exponent);
        if v.is_nan() && !self.value.is_nan() {
            self.flag(OpKind::Pow);
        }
        let d = if exponent == 0.0 {
            0.0
        } else {
            exponent * self.value.powf(exponent - 1.0)
        };
        Var::binary(OpKind::Pow, self, Var::constant(exponent), v, d, 0.0)
    }
    fn pow(self, exponent: Self) -> Self {
        let (a, b) = (self.value, exponent.value);
        let v = a.powf(b);
        if (v.is_nan() && !a.is_nan()) || (!exponent.is_constant() && a <= 0.0) {
            self.flag(OpKind::Pow);
        }
        let da = if b == 0.0 { 0.0 } else { b * a.powf(b - 1.0) };
        let db = if exponent.is_constant() { 0.0 } else { v * a.ln() };
        Var::binary(OpKind::Pow, self, exponent, v, da, db)
    }
    fn erf(self) -> Self {
        let x = self.value;
        self.unary(
            OpKind::Erf,
            libm::erf(x),
            TWO_OVER_SQRT_PI * (-x * x).exp(),
        )
    }
    fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.unary(OpKind::Tanh, t, 1.0 - t * t)
    }
    fn softplus(self) -> Self {
        self.unary(OpKind::Softplus, softplus(self.value), sigmoid(self.value))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self {
        Var::binary(OpKind::Add, self, rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self {
        self + (-rhs)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self {
        Var::binary(
            OpKind::Mul,
            self,
            rhs,
            self.value * rhs.value,
            rhs.value,
            self.value,
        )
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Self {
        let q = self.value / rhs.value;
        Var::binary(OpKind::Div, self, rhs, q, 1.0 / rhs.value, -q / rhs.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.unary(OpKind::Neg, -self.value, -1.0)
    }
}

macro_rules! scalar_rhs {
    ($($trait:ident $method:ident),*) => {$(
        impl<'t> $trait<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                $trait::$method(self, Var::constant(rhs))
            }
        }
        impl<'t> $trait<Var<'t>> for f64 {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                $trait::$method(Var::constant(self), rhs)
            }
        }
    )*};
}

scalar_rhs!(Add add, Sub sub, Mul mul, Div div);
