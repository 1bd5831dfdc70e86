//! Global timestamp oracle, owned by the configuration manager.
//!
//! Write timestamps come from a single monotonic counter. A timestamp is
//! "in flight" between issue and the end of install; the stable timestamp is
//! the largest value below every in-flight one, so a snapshot at the stable
//! timestamp never misses a version that is still being installed.
//!
//! Snapshots are pinned while their transaction is alive. The GC horizon is
//! the oldest pinned snapshot (or the stable timestamp when none are pinned).

use std::collections::{BTreeMap, BTreeSet};

use parking_lot::{Condvar, Mutex};

#[derive(Debug, Default)]
struct State {
    last: u64,
    inflight: BTreeSet<u64>,
    pins: BTreeMap<u64, usize>,
}

impl State {
    fn stable(&self) -> u64 {
        match self.inflight.first() {
            Some(first) => first - 1,
            None => self.last,
        }
    }

    fn horizon(&self) -> u64 {
        let stable = self.stable();
        match self.pins.first_key_value() {
            Some((ts, _)) => (*ts).min(stable),
            None => stable,
        }
    }
}

#[derive(Debug, Default)]
pub struct Oracle {
    state: Mutex<State>,
    settled: Condvar,
}

impl Oracle {
    pub fn stable(&self) -> u64 {
        self.state.lock().stable()
    }

    pub fn latest_issued(&self) -> u64 {
        self.state.lock().last
    }

    pub fn horizon(&self) -> u64 {
        self.state.lock().horizon()
    }

    /// Pins and returns the current stable timestamp.
    pub fn pin_stable(&self) -> u64 {
        let mut s = self.state.lock();
        let ts = s.stable();
        *s.pins.entry(ts).or_default() += 1;
        ts
    }

    /// Pins an explicit snapshot; fails if GC may already have passed it.
    pub fn pin_at(&self, ts: u64) -> bool {
        let mut s = self.state.lock();
        if ts < s.horizon() || ts > s.stable() {
            return false;
        }
        *s.pins.entry(ts).or_default() += 1;
        true
    }

    pub fn unpin(&self, ts: u64) {
        let mut s = self.state.lock();
        if let Some(n) = s.pins.get_mut(&ts) {
            *n -= 1;
            if *n == 0 {
                s.pins.remove(&ts);
            }
        }
    }

    pub fn begin_commit(&self) -> u64 {
        let mut s = self.state.lock();
        s.last += 1;
        let ts = s.last;
        s.inflight.insert(ts);
        ts
    }

    pub fn finish_commit(&self, ts: u64) {
        let mut s = self.state.lock();
        s.inflight.remove(&ts);
        self.settled.notify_all();
    }

    /// Blocks until every timestamp up to `ts` is installed or abandoned.
    pub fn wait_stable(&self, ts: u64) {
        let mut s = self.state.lock();
        while s.stable() < ts {
            self.settled.wait(&mut s);
        }
    }
}
