//! Pending-block queue between the byte-stream producer and the carrier
//! loop. Bounded FIFO, safe for one producer and one consumer thread;
//! enqueue on a full queue blocks the producer — blocks are never dropped.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};

use super::DataBlock;

type HighWaterCallback = Box<dyn Fn(usize) + Send + Sync>;

struct QueueState {
    pending: VecDeque<DataBlock>,
    capacity: usize,
    high_water: usize,
}

struct Inner {
    state: Mutex<QueueState>,
    not_full: Condvar,
    not_empty: Condvar,
    on_high_water: Mutex<Option<HighWaterCallback>>,
}

/// FIFO of blocks awaiting a carrier. Clones share the queue.
#[derive(Clone)]
pub struct BlockQueue {
    inner: Arc<Inner>,
}

impl BlockQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        BlockQueue {
            inner: Arc::new(Inner {
                state: Mutex::new(QueueState {
                    pending: VecDeque::new(),
                    capacity,
                    high_water: capacity,
                }),
                not_full: Condvar::new(),
                not_empty: Condvar::new(),
                on_high_water: Mutex::new(None),
            }),
        }
    }

    pub fn with_default_capacity() -> Self {
        Self::new(super::DEFAULT_QUEUE_CAPACITY)
    }

    /// Invoke `cb(len)` whenever an enqueue reaches `mark` queued blocks.
    pub fn set_high_water<F>(&self, mark: usize, cb: F)
    where
        F: Fn(usize) + Send + Sync + 'static,
    {
        self.inner.state.lock().unwrap().high_water = mark;
        *self.inner.on_high_water.lock().unwrap() = Some(Box::new(cb));
    }

    pub fn len(&self) -> usize {
        self.inner.state.lock().unwrap().pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.inner.state.lock().unwrap().capacity
    }

    /// Blocking enqueue: waits while the queue is full.
    pub fn enqueue(&self, block: DataBlock) {
        let mut state = self.inner.state.lock().unwrap();
        while state.pending.len() >= state.capacity {
            state = self.inner.not_full.wait(state).unwrap();
        }
        state.pending.push_back(block);
        let len = state.pending.len();
        let high = state.high_water;
        drop(state);
        self.inner.not_empty.notify_one();
        if len >= high {
            if let Some(cb) = self.inner.on_high_water.lock().unwrap().as_ref() {
                cb(len);
            }
        }
    }

    /// Non-blocking enqueue; hands the block back when full.
    pub fn try_enqueue(&self, block: DataBlock) -> Result<(), DataBlock> {
        let mut state = self.inner.state.lock().unwrap();
        if state.pending.len() >= state.capacity {
            return Err(block);
        }
        state.pending.push_back(block);
        let len = state.pending.len();
        let high = state.high_water;
        drop(state);
        self.inner.not_empty.notify_one();
        if len >= high {
            if let Some(cb) = self.inner.on_high_water.lock().unwrap().as_ref() {
                cb(len);
            }
        }
        Ok(())
    }

    /// Blocking dequeue: waits while the queue is empty.
    pub fn dequeue(&self) -> DataBlock {
        let mut state = self.inner.state.lock().unwrap();
        while state.pending.is_empty() {
            state = self.inner.not_empty.wait(state).unwrap();
        }
        let block = state.pending.pop_front().unwrap();
        drop(state);
        self.inner.not_full.notify_one();
        block
    }

    /// Non-blocking dequeue.
    pub fn try_dequeue(&self) -> Option<DataBlock> {
        let mut state = self.inner.state.lock().unwrap();
        let block = state.pending.pop_front();
        drop(state);
        if block.is_some() {
            self.inner.not_full.notify_one();
        }
        block
    }
}
