//! Thread-local counters that kernels report into.
//!
//! Kernels call the `record_*` functions unconditionally; the calls are
//! no-ops unless the current thread is inside [`measure`]. Recording
//! always happens on the thread that invoked the kernel, never from
//! worker threads, so counts are exact even for parallel kernels.

use std::cell::RefCell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocKind {
    /// A temporary between computation stages (what a memory planner
    /// would have to host).
    Intermediate,
    /// Per-row accumulators for values that become the output.
    Accumulator,
    /// Derived parameters, such as pre-transformed filters.
    Weight,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    pub label: &'static str,
    pub kind: AllocKind,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counters {
    pub allocations: Vec<Allocation>,
    /// Full read passes over a kernel's primary input.
    pub input_passes: u64,
    /// Scalar multiplies in the dominating inner loop (conv taps or
    /// transformed-domain products).
    pub multiplies: u64,
}

impl Counters {
    /// Sum of all intermediate allocations. Kernels hold every
    /// intermediate until they return, so this is also the peak.
    pub fn intermediate_bytes(&self) -> u64 {
        self.allocations
            .iter()
            .filter(|a| a.kind == AllocKind::Intermediate)
            .map(|a| a.bytes)
            .sum()
    }

    pub fn bytes_labeled(&self, label: &str) -> u64 {
        self.allocations
            .iter()
            .filter(|a| a.label == label)
            .map(|a| a.bytes)
            .sum()
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.allocations.iter().any(|a| a.label == label)
    }
}

thread_local! {
    static ACTIVE: RefCell<Option<Counters>> = const { RefCell::new(None) };
}

/// Runs `f` with fresh counters and returns what it recorded. Nested
/// calls are supported; the inner measurement is also folded into the
/// outer one.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, Counters) {
    let saved = ACTIVE.with(|a| a.borrow_mut().replace(Counters::default()));
    let out = f();
    let counters = ACTIVE.with(|a| {
        let mut slot = a.borrow_mut();
        let inner = slot.take().unwrap_or_default();
        if let Some(mut outer) = saved {
            outer.allocations.extend(inner.allocations.iter().cloned());
            outer.input_passes += inner.input_passes;
            outer.multiplies += inner.multiplies;
            *slot = Some(outer);
        }
        inner
    });
    (out, counters)
}

fn with_active(f: impl FnOnce(&mut Counters)) {
    ACTIVE.with(|a| {
        if let Some(c) = a.borrow_mut().as_mut() {
            f(c);
        }
    });
}

pub fn record_alloc(label: &'static str, kind: AllocKind, bytes: u64) {
    with_active(|c| c.allocations.push(Allocation { label, kind, bytes }));
}

pub fn record_intermediate<T>(label: &'static str, elements: usize) {
    record_alloc(
        label,
        AllocKind::Intermediate,
        (elements * std::mem::size_of::<T>()) as u64,
    );
}

pub fn record_pass() {
    with_active(|c| c.input_passes += 1);
}

pub fn record_multiplies(n: u64) {
    with_active(|c| c.multiplies += n);
}
