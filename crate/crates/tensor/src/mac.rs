//! Multiply-accumulate counting for the forward kernels.
//!
//! Counting is per thread: kernels record on the thread that calls them, before
//! any parallel fan-out, so totals do not depend on scheduling. Counts are
//! attributed to the current section path (e.g. `"pst/attention"`).

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{param_err, Result};

#[derive(Default)]
struct State {
    active: bool,
    disabled: bool,
    sections: Vec<&'static str>,
    counts: BTreeMap<String, u64>,
}

thread_local! {
    static STATE: RefCell<State> = RefCell::new(State::default());
}

/// MAC totals keyed by section path. The empty path holds unsectioned work.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MacCounts {
    counts: BTreeMap<String, u64>,
}

impl MacCounts {
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Sum over every path equal to `prefix` or nested below it.
    pub fn under(&self, prefix: &str) -> u64 {
        self.counts
            .iter()
            .filter(|(k, _)| {
                k.as_str() == prefix
                    || (k.starts_with(prefix) && k.as_bytes().get(prefix.len()) == Some(&b'/'))
            })
            .map(|(_, v)| v)
            .sum()
    }

    /// Sum over every path whose last component is `leaf`.
    pub fn leaf(&self, leaf: &str) -> u64 {
        self.counts
            .iter()
            .filter(|(k, _)| k.rsplit('/').next() == Some(leaf))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Associative merge, used when counts from several threads are combined.
    pub fn merge(&mut self, other: &MacCounts) {
        for (k, v) in &other.counts {
            *self.counts.entry(k.clone()).or_insert(0) += v;
        }
    }
}

/// Adds `macs` to the active counter, if any.
pub fn record(macs: u64) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        if s.active {
            let key = s.sections.join("/");
            *s.counts.entry(key).or_insert(0) += macs;
        }
    });
}

/// Runs `f` with every recorded MAC attributed under `name`.
pub fn section<R>(name: &'static str, f: impl FnOnce() -> R) -> R {
    STATE.with(|s| s.borrow_mut().sections.push(name));
    let out = f();
    STATE.with(|s| {
        s.borrow_mut().sections.pop();
    });
    out
}

/// Switches instrumentation off (or back on) for this thread.
pub fn set_instrumentation(enabled: bool) {
    STATE.with(|s| s.borrow_mut().disabled = !enabled);
}

/// Runs `f` and returns the MACs its kernels recorded.
///
/// Fails if instrumentation has been switched off on this thread or if a
/// counting scope is already open.
pub fn counted<R>(f: impl FnOnce() -> R) -> Result<(R, MacCounts)> {
    let ready = STATE.with(|s| {
        let mut s = s.borrow_mut();
        if s.disabled || s.active {
            return false;
        }
        s.active = true;
        s.counts.clear();
        true
    });
    if !ready {
        return param_err("MAC instrumentation is disabled or already counting");
    }
    let out = f();
    let counts = STATE.with(|s| {
        let mut s = s.borrow_mut();
        s.active = false;
        std::mem::take(&mut s.counts)
    });
    Ok((out, MacCounts { counts }))
}
