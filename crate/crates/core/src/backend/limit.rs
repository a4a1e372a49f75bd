use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, SharedBackend};

/// Caps the number of requests in flight through the wrapped backend.
pub struct Bounded {
    inner: SharedBackend,
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
    peak: AtomicUsize,
}

impl Bounded {
    pub fn new(inner: SharedBackend, limit: usize) -> Self {
        Self { inner, limit: limit.max(1), in_flight: Mutex::new(0), freed: Condvar::new(), peak: AtomicUsize::new(0) }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    /// Highest number of simultaneous requests observed so far.
    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::Relaxed)
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("limiter lock poisoned");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("limiter lock poisoned");
        }
        *n += 1;
        self.peak.fetch_max(*n, Ordering::Relaxed);
        Permit { owner: self }
    }
}

struct Permit<'a> {
    owner: &'a Bounded,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.owner.in_flight.lock().expect("limiter lock poisoned");
        *n -= 1;
        self.owner.freed.notify_one();
    }
}

impl ChatBackend for Bounded {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let _permit = self.acquire();
        self.inner.chat(request)
    }
}

/// Counts requests that reach the wrapped backend.
pub struct CallCounter {
    inner: SharedBackend,
    calls: AtomicU64,
}

impl CallCounter {
    pub fn new(inner: SharedBackend) -> Self {
        Self { inner, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }
}

impl ChatBackend for CallCounter {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.chat(request)
    }
}

/// Keeps a copy of every request, in arrival order.
pub struct Recorder {
    inner: SharedBackend,
    log: Mutex<Vec<ChatRequest>>,
}

impl Recorder {
    pub fn new(inner: SharedBackend) -> Self {
        Self { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("recorder lock poisoned").clone()
    }

    pub fn last(&self) -> Option<ChatRequest> {
        self.log.lock().expect("recorder lock poisoned").last().cloned()
    }

    pub fn clear(&self) {
        self.log.lock().expect("recorder lock poisoned").clear();
    }
}

impl ChatBackend for Recorder {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.log.lock().expect("recorder lock poisoned").push(request.clone());
        self.inner.chat(request)
    }
}
