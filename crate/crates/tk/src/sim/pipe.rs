//! In-memory async plumbing: unbounded mailboxes, duplex byte streams, and
//! a deadline combinator. All single-threaded; wake order follows send
//! order so runs stay deterministic.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use super::exec::{Sim, Sleep};
use super::VirtualTime;

/// Multi-producer single-consumer queue. Cloning shares the queue.
pub struct Mailbox<T> {
    inner: Rc<RefCell<MailboxInner<T>>>,
}

impl<T> Clone for Mailbox<T> {
    fn clone(&self) -> Self {
        Mailbox {
            inner: Rc::clone(&self.inner),
        }
    }
}

struct MailboxInner<T> {
    queue: VecDeque<T>,
    closed: bool,
    wakers: Vec<Waker>,
}

impl<T> MailboxInner<T> {
    fn wake_all(&mut self) {
        for w in self.wakers.drain(..) {
            w.wake();
        }
    }
}

/// Result of [`Mailbox::recv_deadline`].
#[derive(Debug, PartialEq, Eq)]
pub enum RecvOutcome<T> {
    Item(T),
    Closed,
    TimedOut,
}

impl<T> Mailbox<T> {
    pub fn new() -> Self {
        Mailbox {
            inner: Rc::new(RefCell::new(MailboxInner {
                queue: VecDeque::new(),
                closed: false,
                wakers: Vec::new(),
            })),
        }
    }

    /// Push an item. Returns false if the mailbox was closed.
    pub fn send(&self, item: T) -> bool {
        let mut inner = self.inner.borrow_mut();
        if inner.closed {
            return false;
        }
        inner.queue.push_back(item);
        inner.wake_all();
        true
    }

    /// Close the mailbox; queued items remain receivable.
    pub fn close(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.closed = true;
        inner.wake_all();
    }

    pub fn is_closed(&self) -> bool {
        self.inner.borrow().closed
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.borrow().queue.is_empty()
    }

    pub fn try_recv(&self) -> Option<T> {
        self.inner.borrow_mut().queue.pop_front()
    }

    /// Receive the next item; `None` once closed and drained.
    pub fn recv(&self) -> Recv<'_, T> {
        Recv { mailbox: self }
    }

    /// Receive with a virtual-time deadline.
    pub fn recv_deadline(&self, sim: &Sim, deadline: VirtualTime) -> RecvDeadline<'_, T> {
        RecvDeadline {
            mailbox: self,
            sleep: sim.sleep_until(deadline),
        }
    }
}

impl<T> Default for Mailbox<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Recv<'a, T> {
    mailbox: &'a Mailbox<T>,
}

impl<T> Future for Recv<'_, T> {
    type Output = Option<T>;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Option<T>> {
        let mut inner = self.mailbox.inner.borrow_mut();
        if let Some(item) = inner.queue.pop_front() {
            return Poll::Ready(Some(item));
        }
        if inner.closed {
            return Poll::Ready(None);
        }
        inner.wakers.push(cx.waker().clone());
        Poll::Pending
    }
}

pub struct RecvDeadline<'a, T> {
    mailbox: &'a Mailbox<T>,
    sleep: Sleep,
}

impl<T> Future for RecvDeadline<'_, T> {
    type Output = RecvOutcome<T>;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        let this = unsafe { self.get_unchecked_mut() };
        {
            let mut inner = this.mailbox.inner.borrow_mut();
            if let Some(item) = inner.queue.pop_front() {
                return Poll::Ready(RecvOutcome::Item(item));
            }
            if inner.closed {
                return Poll::Ready(RecvOutcome::Closed);
            }
            inner.wakers.push(cx.waker().clone());
        }
        match unsafe { Pin::new_unchecked(&mut this.sleep) }.poll(cx) {
            Poll::Ready(()) => Poll::Ready(RecvOutcome::TimedOut),
            Poll::Pending => Poll::Pending,
        }
    }
}

/// Error from [`timeout`].
#[derive(Debug, PartialEq, Eq, thiserror::Error)]
#[error("virtual-time deadline elapsed")]
pub struct TimeoutError;

/// Run `fut` with a virtual-time budget of `dur` microseconds.
pub async fn timeout<F>(sim: &Sim, dur: u64, fut: F) -> Result<F::Output, TimeoutError>
where
    F: Future,
{
    let sleep = sim.sleep(dur);
    let mut fut = Box::pin(fut);
    let mut sleep = Box::pin(sleep);
    std::future::poll_fn(move |cx| {
        if let Poll::Ready(out) = fut.as_mut().poll(cx) {
            return Poll::Ready(Ok(out));
        }
        match sleep.as_mut().poll(cx) {
            Poll::Ready(()) => Poll::Ready(Err(TimeoutError)),
            Poll::Pending => Poll::Pending,
        }
    })
    .await
}

/// One direction of a duplex in-memory stream.
struct StreamHalf {
    buf: VecDeque<u8>,
    closed: bool,
    read_waker: Option<Waker>,
}

impl StreamHalf {
    fn new() -> Rc<RefCell<StreamHalf>> {
        Rc::new(RefCell::new(StreamHalf {
            buf: VecDeque::new(),
            closed: false,
            read_waker: None,
        }))
    }
}

/// Duplex byte stream, the local analogue of a connected socket. Writes are
/// instantaneous (unbounded); reads await data or EOF.
pub struct ByteStream {
    rx: Rc<RefCell<StreamHalf>>,
    tx: Rc<RefCell<StreamHalf>>,
}

impl ByteStream {
    /// A connected pair: bytes written to one end are read from the other.
    pub fn pair() -> (ByteStream, ByteStream) {
        let a = StreamHalf::new();
        let b = StreamHalf::new();
        (
            ByteStream {
                rx: Rc::clone(&a),
                tx: Rc::clone(&b),
            },
            ByteStream { rx: b, tx: a },
        )
    }

    /// Write all bytes. Returns false if the peer closed its read side.
    pub fn write_all(&self, data: &[u8]) -> bool {
        let mut tx = self.tx.borrow_mut();
        if tx.closed {
            return false;
        }
        tx.buf.extend(data);
        if let Some(w) = tx.read_waker.take() {
            w.wake();
        }
        true
    }

    /// Signal EOF to the peer.
    pub fn close(&self) {
        let mut tx = self.tx.borrow_mut();
        tx.closed = true;
        if let Some(w) = tx.read_waker.take() {
            w.wake();
        }
        let mut rx = self.rx.borrow_mut();
        rx.closed = true;
        if let Some(w) = rx.read_waker.take() {
            w.wake();
        }
    }

    /// Read up to `buf.len()` bytes; 0 means EOF.
    pub fn read<'a>(&'a self, buf: &'a mut [u8]) -> ReadFut<'a> {
        ReadFut { stream: self, buf }
    }

    /// Read an exact count, or `None` on premature EOF.
    pub async fn read_exact(&self, len: usize) -> Option<Vec<u8>> {
        let mut out = vec![0u8; len];
        let mut got = 0;
        while got < len {
            let n = self.read(&mut out[got..]).await;
            if n == 0 {
                return None;
            }
            got += n;
        }
        Some(out)
    }
}

pub struct ReadFut<'a> {
    stream: &'a ByteStream,
    buf: &'a mut [u8],
}

impl Future for ReadFut<'_> {
    type Output = usize;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<usize> {
        let this = self.get_mut();
        let mut rx = this.stream.rx.borrow_mut();
        if rx.buf.is_empty() {
            if rx.closed {
                return Poll::Ready(0);
            }
            rx.read_waker = Some(cx.waker().clone());
            return Poll::Pending;
        }
        let n = rx.buf.len().min(this.buf.len());
        for slot in this.buf.iter_mut().take(n) {
            *slot = rx.buf.pop_front().unwrap();
        }
        Poll::Ready(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mailbox_fifo_and_close() {
        Sim::execute(|sim| async move {
            let mb: Mailbox<u32> = Mailbox::new();
            let tx = mb.clone();
            sim.spawn(async move {
                tx.send(1);
                tx.send(2);
                tx.close();
            });
            assert_eq!(mb.recv().await, Some(1));
            assert_eq!(mb.recv().await, Some(2));
            assert_eq!(mb.recv().await, None);
        });
    }

    #[test]
    fn recv_deadline_times_out() {
        Sim::execute(|sim| async move {
            let mb: Mailbox<u32> = Mailbox::new();
            match mb.recv_deadline(&sim, 500).await {
                RecvOutcome::TimedOut => {}
                other => panic!("expected timeout, got {other:?}"),
            }
            assert_eq!(sim.now(), 500);
        });
    }

    #[test]
    fn timeout_wins_and_loses() {
        Sim::execute(|sim| async move {
            let fast = timeout(&sim, 1_000, sim.sleep(100)).await;
            assert!(fast.is_ok());
            let slow = timeout(&sim, 1_000, sim.sleep(10_000)).await;
            assert_eq!(slow, Err(TimeoutError));
        });
    }

    #[test]
    fn byte_stream_roundtrip_and_eof() {
        Sim::execute(|sim| async move {
            let (a, b) = ByteStream::pair();
            sim.spawn(async move {
                a.write_all(b"hello ");
                a.write_all(b"world");
                a.close();
            });
            let mut all = Vec::new();
            let mut buf = [0u8; 4];
            loop {
                let n = b.read(&mut buf).await;
                if n == 0 {
                    break;
                }
                all.extend_from_slice(&buf[..n]);
            }
            assert_eq!(all, b"hello world");
        });
    }
}
