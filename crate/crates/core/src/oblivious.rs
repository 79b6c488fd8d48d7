//! Branchless data-oblivious primitives and an access-trace recorder.
//!
//! Every primitive is straight-line arithmetic on 64-bit words. Functions
//! built from them take a [`Tracer`]; the zero-sized [`NoTrace`] compiles to
//! nothing, while [`TraceRecorder`] captures an [`AccessTrace`] of operation
//! kinds and public shapes. Values never enter a trace.

use std::fmt;

/// Result of an oblivious comparison: all ones or all zeros.
///
/// There is no public constructor from raw integers.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Mask(u64);

impl Mask {
    pub const TRUE: Mask = Mask(u64::MAX);
    pub const FALSE: Mask = Mask(0);

    #[inline(always)]
    fn from_bit(bit: u64) -> Mask {
        Mask(0u64.wrapping_sub(bit & 1))
    }

    #[inline(always)]
    pub fn word(self) -> u64 {
        self.0
    }

    /// Reveals the mask. Only for values that are public by construction.
    pub fn declassify(self) -> bool {
        self.0 != 0
    }

    #[inline(always)]
    pub fn and(self, other: Mask) -> Mask {
        Mask(self.0 & other.0)
    }

    #[inline(always)]
    pub fn or(self, other: Mask) -> Mask {
        Mask(self.0 | other.0)
    }

    #[inline(always)]
    #[allow(clippy::should_implement_trait)]
    pub fn not(self) -> Mask {
        Mask(!self.0)
    }
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Mask(..)")
    }
}

/// What an observer of memory and control flow could see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TraceEvent {
    Greater,
    Equal,
    Move,
    Add,
    Mul,
    /// Read of element `index` of an array of `len` elements.
    Load { index: usize, len: usize },
    Store { index: usize, len: usize },
    /// A data-dependent branch was taken; only instrumented negative
    /// controls ever emit this.
    Branch { taken: bool },
}

impl TraceEvent {
    fn encode_into(&self, out: &mut Vec<u8>) {
        match *self {
            TraceEvent::Greater => out.push(1),
            TraceEvent::Equal => out.push(2),
            TraceEvent::Move => out.push(3),
            TraceEvent::Add => out.push(4),
            TraceEvent::Mul => out.push(5),
            TraceEvent::Load { index, len } => {
                out.push(6);
                out.extend_from_slice(&(index as u64).to_be_bytes());
                out.extend_from_slice(&(len as u64).to_be_bytes());
            }
            TraceEvent::Store { index, len } => {
                out.push(7);
                out.extend_from_slice(&(index as u64).to_be_bytes());
                out.extend_from_slice(&(len as u64).to_be_bytes());
            }
            TraceEvent::Branch { taken } => {
                out.push(8);
                out.push(taken as u8);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessTrace {
    pub events: Vec<TraceEvent>,
}

impl AccessTrace {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.events.len() * 2);
        for ev in &self.events {
            ev.encode_into(&mut out);
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }
}

pub trait Tracer {
    fn record(&mut self, event: TraceEvent);
}

/// Tracer that records nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoTrace;

impl Tracer for NoTrace {
    #[inline(always)]
    fn record(&mut self, _event: TraceEvent) {}
}

#[derive(Debug, Default)]
pub struct TraceRecorder {
    trace: AccessTrace,
}

impl Tracer for TraceRecorder {
    fn record(&mut self, event: TraceEvent) {
        self.trace.events.push(event);
    }
}

impl TraceRecorder {
    pub fn finish(self) -> AccessTrace {
        self.trace
    }
}

/// Runs `f` against a fresh recorder and returns what it observed.
pub fn record_trace<R>(f: impl FnOnce(&mut TraceRecorder) -> R) -> (R, AccessTrace) {
    let mut rec = TraceRecorder::default();
    let out = f(&mut rec);
    (out, rec.finish())
}

/// `a < b` on unsigned words as a 0/1 bit, without branches.
#[inline(always)]
fn lt_bit(a: u64, b: u64) -> u64 {
    ((!a & b) | ((!a | b) & a.wrapping_sub(b))) >> 63
}

/// All ones iff `a > b`.
#[inline(always)]
pub fn o_greater(a: u64, b: u64) -> Mask {
    Mask::from_bit(lt_bit(b, a))
}

/// All ones iff `a == b`.
#[inline(always)]
pub fn o_equal(a: u64, b: u64) -> Mask {
    let d = a ^ b;
    let nonzero = (d | d.wrapping_neg()) >> 63;
    Mask::from_bit(nonzero ^ 1)
}

/// `on_true` if the mask is set, otherwise `on_false`.
#[inline(always)]
pub fn o_move(m: Mask, on_true: u64, on_false: u64) -> u64 {
    (m.0 & on_true) | (!m.0 & on_false)
}

pub fn o_greater_t<T: Tracer>(t: &mut T, a: u64, b: u64) -> Mask {
    t.record(TraceEvent::Greater);
    o_greater(a, b)
}

pub fn o_equal_t<T: Tracer>(t: &mut T, a: u64, b: u64) -> Mask {
    t.record(TraceEvent::Equal);
    o_equal(a, b)
}

pub fn o_move_t<T: Tracer>(t: &mut T, m: Mask, on_true: u64, on_false: u64) -> u64 {
    t.record(TraceEvent::Move);
    o_move(m, on_true, on_false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexOutOfRange {
    pub len: usize,
}

/// Reads `table[secret_index]` by scanning every element once.
///
/// An index beyond the table yields 0 and an error; the range check compares
/// against the public length only after the scan completes.
pub fn o_select_index<T: Tracer>(t: &mut T, secret_index: u64, table: &[u64]) -> Result<u64, IndexOutOfRange> {
    let mut acc = 0u64;
    let mut hit = Mask::FALSE;
    for (i, &value) in table.iter().enumerate() {
        t.record(TraceEvent::Load { index: i, len: table.len() });
        let m = o_equal_t(t, secret_index, i as u64);
        hit = hit.or(m);
        acc = o_move_t(t, m, value, acc);
    }
    if hit.declassify() {
        Ok(acc)
    } else {
        Err(IndexOutOfRange { len: table.len() })
    }
}

/// Threshold test written with a secret-dependent branch. Trace checks must
/// tell its runs apart.
pub fn branching_canary<T: Tracer>(t: &mut T, secret: u64, threshold: u64) -> u64 {
    let taken = secret < threshold;
    t.record(TraceEvent::Branch { taken });
    if taken {
        1
    } else {
        t.record(TraceEvent::Mul);
        2
    }
}
