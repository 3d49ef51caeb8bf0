//! The deterministic executor. Tasks are `!Send` futures polled on one
//! thread; the clock only advances when no task is runnable, jumping to the
//! earliest pending timer. Ready tasks run in FIFO wake order and timers
//! break ties by registration order, so a run is reproducible bit for bit.

use std::cell::{Cell, RefCell};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};

use super::VirtualTime;

type LocalFuture = Pin<Box<dyn Future<Output = ()> + 'static>>;

/// Handle to the simulation. Cheap to clone; all clones share one clock and
/// task set.
pub struct Sim {
    core: Rc<Core>,
}

impl Clone for Sim {
    fn clone(&self) -> Self {
        Sim {
            core: Rc::clone(&self.core),
        }
    }
}

struct Core {
    now: Cell<VirtualTime>,
    ready: Arc<ReadyQueue>,
    tasks: RefCell<BTreeMap<u64, Option<LocalFuture>>>,
    timers: RefCell<BinaryHeap<Reverse<TimerEntry>>>,
    next_task: Cell<u64>,
    timer_seq: Cell<u64>,
}

struct ReadyQueue(Mutex<VecDeque<u64>>);

struct TimerEntry {
    at: VirtualTime,
    seq: u64,
    waker: Waker,
}

impl PartialEq for TimerEntry {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl Eq for TimerEntry {}
impl PartialOrd for TimerEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for TimerEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

struct TaskWaker {
    id: u64,
    ready: Arc<ReadyQueue>,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.ready.0.lock().unwrap().push_back(self.id);
    }
}

impl Sim {
    pub fn new() -> Self {
        Sim {
            core: Rc::new(Core {
                now: Cell::new(0),
                ready: Arc::new(ReadyQueue(Mutex::new(VecDeque::new()))),
                tasks: RefCell::new(BTreeMap::new()),
                timers: RefCell::new(BinaryHeap::new()),
                next_task: Cell::new(0),
                timer_seq: Cell::new(0),
            }),
        }
    }

    /// Current virtual time in microseconds.
    pub fn now(&self) -> VirtualTime {
        self.core.now.get()
    }

    /// Spawn a task. It starts running at the next executor step.
    pub fn spawn<F>(&self, fut: F) -> JoinHandle<F::Output>
    where
        F: Future + 'static,
        F::Output: 'static,
    {
        let state = Rc::new(RefCell::new(JoinState {
            result: None,
            waker: None,
        }));
        let state2 = Rc::clone(&state);
        let wrapped = async move {
            let out = fut.await;
            let mut st = state2.borrow_mut();
            st.result = Some(out);
            if let Some(w) = st.waker.take() {
                w.wake();
            }
        };
        let id = self.core.next_task.get();
        self.core.next_task.set(id + 1);
        self.core.tasks.borrow_mut().insert(id, Some(Box::pin(wrapped)));
        self.core.ready.0.lock().unwrap().push_back(id);
        JoinHandle { state }
    }

    /// Sleep for `dur` microseconds of virtual time.
    pub fn sleep(&self, dur: u64) -> Sleep {
        self.sleep_until(self.now().saturating_add(dur))
    }

    /// Sleep until the given virtual instant (waking immediately if past).
    pub fn sleep_until(&self, deadline: VirtualTime) -> Sleep {
        Sleep {
            core: Rc::clone(&self.core),
            deadline,
            registered: false,
        }
    }

    /// Drive the simulation until `fut` completes, advancing virtual time as
    /// needed. Panics if every task blocks with no pending timer.
    pub fn run<F>(&self, fut: F) -> F::Output
    where
        F: Future + 'static,
        F::Output: 'static,
    {
        let handle = self.spawn(fut);
        loop {
            self.drain_ready();
            if let Some(out) = handle.state.borrow_mut().result.take() {
                return out;
            }
            if !self.advance_time() {
                panic!("sim deadlock: root future pending with no runnable task or timer");
            }
        }
    }

    /// Run queued tasks and timers until nothing remains runnable.
    pub fn run_until_idle(&self) {
        loop {
            self.drain_ready();
            if !self.advance_time() {
                return;
            }
        }
    }

    /// Drop every remaining task. Call when a simulation is finished so
    /// long-running daemon tasks (and their `Rc` handles) are released.
    pub fn finish(&self) {
        self.core.tasks.borrow_mut().clear();
        self.core.timers.borrow_mut().clear();
        self.core.ready.0.lock().unwrap().clear();
    }

    /// Convenience: build a sim, run one root future, tear everything down.
    pub fn execute<F, T>(build: impl FnOnce(Sim) -> F) -> T
    where
        F: Future<Output = T> + 'static,
        T: 'static,
    {
        let sim = Sim::new();
        let fut = build(sim.clone());
        let out = sim.run(fut);
        sim.finish();
        out
    }

    fn drain_ready(&self) {
        loop {
            let next = self.core.ready.0.lock().unwrap().pop_front();
            let Some(id) = next else { break };
            let fut = match self.core.tasks.borrow_mut().get_mut(&id) {
                Some(slot) => slot.take(),
                None => None,
            };
            let Some(mut fut) = fut else { continue };
            let waker = Waker::from(Arc::new(TaskWaker {
                id,
                ready: Arc::clone(&self.core.ready),
            }));
            let mut cx = Context::from_waker(&waker);
            match fut.as_mut().poll(&mut cx) {
                Poll::Ready(()) => {
                    self.core.tasks.borrow_mut().remove(&id);
                }
                Poll::Pending => {
                    if let Some(slot) = self.core.tasks.borrow_mut().get_mut(&id) {
                        *slot = Some(fut);
                    }
                }
            }
        }
    }

    /// Jump to the earliest timer and wake it. Returns false when no timer
    /// is pending.
    fn advance_time(&self) -> bool {
        let entry = match self.core.timers.borrow_mut().pop() {
            Some(Reverse(e)) => e,
            None => return false,
        };
        if entry.at > self.core.now.get() {
            self.core.now.set(entry.at);
        }
        entry.waker.wake();
        true
    }

    fn register_timer(&self, at: VirtualTime, waker: Waker) {
        let seq = self.core.timer_seq.get();
        self.core.timer_seq.set(seq + 1);
        self.core
            .timers
            .borrow_mut()
            .push(Reverse(TimerEntry { at, seq, waker }));
    }
}

impl Default for Sim {
    fn default() -> Self {
        Self::new()
    }
}

/// Future returned by [`Sim::sleep`].
pub struct Sleep {
    core: Rc<Core>,
    deadline: VirtualTime,
    registered: bool,
}

impl Future for Sleep {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        if self.core.now.get() >= self.deadline {
            return Poll::Ready(());
        }
        if !self.registered {
            self.registered = true;
            let sim = Sim {
                core: Rc::clone(&self.core),
            };
            sim.register_timer(self.deadline, cx.waker().clone());
        }
        Poll::Pending
    }
}

struct JoinState<T> {
    result: Option<T>,
    waker: Option<Waker>,
}

/// Await the completion of a spawned task.
pub struct JoinHandle<T> {
    state: Rc<RefCell<JoinState<T>>>,
}

impl<T> Future for JoinHandle<T> {
    type Output = T;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<T> {
        let mut st = self.state.borrow_mut();
        if let Some(out) = st.result.take() {
            Poll::Ready(out)
        } else {
            st.waker = Some(cx.waker().clone());
            Poll::Pending
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clock_starts_at_zero_and_advances_by_sleep() {
        let trace = Sim::execute(|sim| async move {
            let mut points = vec![sim.now()];
            sim.sleep(1_000).await;
            points.push(sim.now());
            sim.sleep(250).await;
            points.push(sim.now());
            points
        });
        assert_eq!(trace, vec![0, 1_000, 1_250]);
    }

    #[test]
    fn concurrent_sleeps_interleave_deterministically() {
        let order = Sim::execute(|sim| async move {
            let log = Rc::new(RefCell::new(Vec::new()));
            let mut handles = Vec::new();
            for (tag, delay) in [("c", 30u64), ("a", 10), ("b", 20), ("a2", 10)] {
                let sim2 = sim.clone();
                let log2 = Rc::clone(&log);
                handles.push(sim.spawn(async move {
                    sim2.sleep(delay).await;
                    log2.borrow_mut().push((sim2.now(), tag));
                }));
            }
            for h in handles {
                h.await;
            }
            let entries = log.borrow().clone();
            entries
        });
        // Same-deadline timers fire in registration order.
        assert_eq!(order, vec![(10, "a"), (10, "a2"), (20, "b"), (30, "c")]);
    }

    #[test]
    fn join_handle_returns_value() {
        let v = Sim::execute(|sim| async move {
            let h = sim.spawn(async { 41 + 1 });
            h.await
        });
        assert_eq!(v, 42);
    }

    #[test]
    fn run_does_not_wait_for_daemons() {
        let sim = Sim::new();
        let sim2 = sim.clone();
        let out = sim.run(async move {
            let sim3 = sim2.clone();
            sim2.spawn(async move {
                loop {
                    sim3.sleep(1_000).await;
                }
            });
            sim2.sleep(5_000).await;
            sim2.now()
        });
        assert_eq!(out, 5_000);
        sim.finish();
    }
}
