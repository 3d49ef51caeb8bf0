//! Stream-multiplexing control protocol carried inside covert channels.
//!
//! Wire form, all integers big-endian:
//! `[len:u32][type:u8][stream_id:u32][body]` where `len` counts everything
//! after itself. OPEN_STREAM carries a [`Route`]; STREAM_DATA a raw byte
//! run; STREAM_CLOSE a one-byte reason; OPEN_RESULT a one-byte status
//! confirming (or refusing) the far end of a freshly opened stream;
//! KEEPALIVE is empty.

use thiserror::Error;

pub const MSG_OPEN_STREAM: u8 = 1;
pub const MSG_STREAM_DATA: u8 = 2;
pub const MSG_STREAM_CLOSE: u8 = 3;
pub const MSG_KEEPALIVE: u8 = 4;
pub const MSG_OPEN_RESULT: u8 = 5;

/// STREAM_CLOSE / OPEN_RESULT reasons.
pub const REASON_NORMAL: u8 = 0;
pub const REASON_NO_ROUTE: u8 = 1;
pub const REASON_REFUSED: u8 = 2;
pub const REASON_CHANNEL_LOST: u8 = 3;
pub const REASON_GAP_TIMEOUT: u8 = 4;
pub const REASON_OVERFLOW: u8 = 5;

/// OPEN_RESULT status for success.
pub const OPEN_OK: u8 = 0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ControlError {
    #[error("truncated control message")]
    Truncated,
    #[error("unknown control message type {0}")]
    UnknownType(u8),
    #[error("malformed route")]
    BadRoute,
}

/// Where a freshly decapsulated stream should terminate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExitSpec {
    /// The terminus forwards to its configured upstream target.
    Upstream,
    /// Explicit destination, as named by a SOCKS CONNECT.
    Target { host: String, port: u16 },
}

/// Rendezvous instructions attached to a multipath branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinSpec {
    pub circuit_id: u32,
    pub path_id: u16,
    pub path_count: u16,
    pub block_size: u32,
    /// Hops the rendezvous opens onward after joining.
    pub onward_hops: Vec<u32>,
}

/// Remaining route carried by OPEN_STREAM. A relay pops the first hop and
/// forwards; with no hops left it either joins (rendezvous) or exits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    pub hops: Vec<u32>,
    pub join: Option<JoinSpec>,
    pub exit: ExitSpec,
}

impl Route {
    pub fn direct(hops: Vec<u32>, exit: ExitSpec) -> Self {
        Route {
            hops,
            join: None,
            exit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlMessage {
    OpenStream { stream_id: u32, route: Route },
    StreamData { stream_id: u32, bytes: Vec<u8> },
    StreamClose { stream_id: u32, reason: u8 },
    OpenResult { stream_id: u32, status: u8 },
    Keepalive,
}

impl ControlMessage {
    pub fn encode(&self) -> Vec<u8> {
        let (msg_type, stream_id, body): (u8, u32, Vec<u8>) = match self {
            ControlMessage::OpenStream { stream_id, route } => {
                (MSG_OPEN_STREAM, *stream_id, encode_route(route))
            }
            ControlMessage::StreamData { stream_id, bytes } => {
                (MSG_STREAM_DATA, *stream_id, bytes.clone())
            }
            ControlMessage::StreamClose { stream_id, reason } => {
                (MSG_STREAM_CLOSE, *stream_id, vec![*reason])
            }
            ControlMessage::OpenResult { stream_id, status } => {
                (MSG_OPEN_RESULT, *stream_id, vec![*status])
            }
            ControlMessage::Keepalive => (MSG_KEEPALIVE, 0, Vec::new()),
        };
        let mut out = Vec::with_capacity(9 + body.len());
        out.extend_from_slice(&((5 + body.len()) as u32).to_be_bytes());
        out.push(msg_type);
        out.extend_from_slice(&stream_id.to_be_bytes());
        out.extend_from_slice(&body);
        out
    }

    /// Decode one message (without the leading length word).
    pub fn decode(frame: &[u8]) -> Result<Self, ControlError> {
        if frame.len() < 5 {
            return Err(ControlError::Truncated);
        }
        let msg_type = frame[0];
        let stream_id = u32::from_be_bytes(frame[1..5].try_into().unwrap());
        let body = &frame[5..];
        match msg_type {
            MSG_OPEN_STREAM => Ok(ControlMessage::OpenStream {
                stream_id,
                route: decode_route(body)?,
            }),
            MSG_STREAM_DATA => Ok(ControlMessage::StreamData {
                stream_id,
                bytes: body.to_vec(),
            }),
            MSG_STREAM_CLOSE => Ok(ControlMessage::StreamClose {
                stream_id,
                reason: body.first().copied().unwrap_or(REASON_NORMAL),
            }),
            MSG_OPEN_RESULT => Ok(ControlMessage::OpenResult {
                stream_id,
                status: body.first().copied().unwrap_or(REASON_REFUSED),
            }),
            MSG_KEEPALIVE => Ok(ControlMessage::Keepalive),
            other => Err(ControlError::UnknownType(other)),
        }
    }
}

fn encode_route(route: &Route) -> Vec<u8> {
    let mut out = Vec::new();
    out.push(route.join.is_some() as u8);
    if let Some(join) = &route.join {
        out.extend_from_slice(&join.circuit_id.to_be_bytes());
        out.extend_from_slice(&join.path_id.to_be_bytes());
        out.extend_from_slice(&join.path_count.to_be_bytes());
        out.extend_from_slice(&join.block_size.to_be_bytes());
        out.push(join.onward_hops.len() as u8);
        for hop in &join.onward_hops {
            out.extend_from_slice(&hop.to_be_bytes());
        }
    }
    out.push(route.hops.len() as u8);
    for hop in &route.hops {
        out.extend_from_slice(&hop.to_be_bytes());
    }
    match &route.exit {
        ExitSpec::Upstream => out.push(0),
        ExitSpec::Target { host, port } => {
            out.push(1);
            out.extend_from_slice(&(host.len() as u16).to_be_bytes());
            out.extend_from_slice(host.as_bytes());
            out.extend_from_slice(&port.to_be_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ControlError> {
        if self.pos + n > self.buf.len() {
            return Err(ControlError::BadRoute);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ControlError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ControlError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ControlError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode_route(body: &[u8]) -> Result<Route, ControlError> {
    let mut r = Reader { buf: body, pos: 0 };
    let join = if r.u8()? == 1 {
        let circuit_id = r.u32()?;
        let path_id = r.u16()?;
        let path_count = r.u16()?;
        let block_size = r.u32()?;
        let n = r.u8()? as usize;
        let mut onward_hops = Vec::with_capacity(n);
        for _ in 0..n {
            onward_hops.push(r.u32()?);
        }
        Some(JoinSpec {
            circuit_id,
            path_id,
            path_count,
            block_size,
            onward_hops,
        })
    } else {
        None
    };
    let n = r.u8()? as usize;
    let mut hops = Vec::with_capacity(n);
    for _ in 0..n {
        hops.push(r.u32()?);
    }
    let exit = match r.u8()? {
        0 => ExitSpec::Upstream,
        1 => {
            let len = r.u16()? as usize;
            let host = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| ControlError::BadRoute)?;
            let port = r.u16()?;
            ExitSpec::Target { host, port }
        }
        _ => return Err(ControlError::BadRoute),
    };
    if r.pos != body.len() {
        return Err(ControlError::BadRoute);
    }
    Ok(Route { hops, join, exit })
}

/// Accumulates channel bytes and yields complete control messages.
#[derive(Default)]
pub struct ControlFramer {
    buf: Vec<u8>,
}

impl ControlFramer {
    pub fn new() -> Self {
        ControlFramer { buf: Vec::new() }
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn next_message(&mut self) -> Option<Result<ControlMessage, ControlError>> {
        if self.buf.len() < 4 {
            return None;
        }
        let len = u32::from_be_bytes(self.buf[..4].try_into().unwrap()) as usize;
        if self.buf.len() < 4 + len {
            return None;
        }
        let frame: Vec<u8> = self.buf.drain(..4 + len).skip(4).collect();
        Some(ControlMessage::decode(&frame))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn messages_round_trip() {
        let samples = vec![
            ControlMessage::OpenStream {
                stream_id: 7,
                route: Route {
                    hops: vec![2, 3],
                    join: Some(JoinSpec {
                        circuit_id: 9,
                        path_id: 1,
                        path_count: 4,
                        block_size: 536,
                        onward_hops: vec![5],
                    }),
                    exit: ExitSpec::Target {
                        host: "server".into(),
                        port: 80,
                    },
                },
            },
            ControlMessage::OpenStream {
                stream_id: 8,
                route: Route::direct(vec![], ExitSpec::Upstream),
            },
            ControlMessage::StreamData {
                stream_id: 7,
                bytes: vec![1, 2, 3],
            },
            ControlMessage::StreamClose {
                stream_id: 7,
                reason: REASON_NO_ROUTE,
            },
            ControlMessage::OpenResult {
                stream_id: 7,
                status: OPEN_OK,
            },
            ControlMessage::Keepalive,
        ];
        for msg in samples {
            let wire = msg.encode();
            let mut framer = ControlFramer::new();
            framer.push(&wire);
            assert_eq!(framer.next_message().unwrap().unwrap(), msg);
        }
    }

    #[test]
    fn framer_handles_split_and_batched_input() {
        let a = ControlMessage::Keepalive.encode();
        let b = ControlMessage::StreamData {
            stream_id: 1,
            bytes: vec![9; 100],
        }
        .encode();
        let mut wire = Vec::new();
        wire.extend_from_slice(&a);
        wire.extend_from_slice(&b);
        let mut framer = ControlFramer::new();
        framer.push(&wire[..3]);
        assert!(framer.next_message().is_none());
        framer.push(&wire[3..50]);
        assert!(matches!(
            framer.next_message(),
            Some(Ok(ControlMessage::Keepalive))
        ));
        framer.push(&wire[50..]);
        match framer.next_message() {
            Some(Ok(ControlMessage::StreamData { stream_id: 1, bytes })) => {
                assert_eq!(bytes, vec![9; 100]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_route_rejected() {
        let mut wire = ControlMessage::OpenStream {
            stream_id: 1,
            route: Route::direct(vec![1], ExitSpec::Upstream),
        }
        .encode();
        let len = wire.len();
        wire.truncate(len - 1);
        let l = (wire.len() - 4) as u32;
        wire[..4].copy_from_slice(&l.to_be_bytes());
        let mut framer = ControlFramer::new();
        framer.push(&wire);
        assert!(framer.next_message().unwrap().is_err());
    }
}
