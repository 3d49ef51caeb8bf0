//! Conference-establishment signaling.
//!
//! Wire form: 4-byte big-endian length, 1-byte type, then a UTF-8 body of
//! `key=value` lines. The `session` line always comes first; remaining keys
//! are sorted. The handshake is pipelined — the initiator sends HELLO and
//! OFFER back to back, the receiver answers both, and the initiator
//! confirms with READY after validating the echoed parameters — so an
//! agreeing pair reaches READY in one round trip.

use std::collections::BTreeMap;

use super::ChannelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalingType {
    Hello = 1,
    Offer = 2,
    Answer = 3,
    Ready = 4,
    Close = 5,
}

impl SignalingType {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(SignalingType::Hello),
            2 => Some(SignalingType::Offer),
            3 => Some(SignalingType::Answer),
            4 => Some(SignalingType::Ready),
            5 => Some(SignalingType::Close),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignalingMessage {
    pub msg_type: SignalingType,
    pub session_id: u64,
    pub params: BTreeMap<String, String>,
}

impl SignalingMessage {
    pub fn new(msg_type: SignalingType, session_id: u64) -> Self {
        SignalingMessage {
            msg_type,
            session_id,
            params: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, key: &str, value: impl ToString) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = format!("session={}\n", self.session_id);
        for (k, v) in &self.params {
            body.push_str(k);
            body.push('=');
            body.push_str(v);
            body.push('\n');
        }
        let mut out = Vec::with_capacity(5 + body.len());
        out.extend_from_slice(&(1 + body.len() as u32).to_be_bytes());
        out.push(self.msg_type as u8);
        out.extend_from_slice(body.as_bytes());
        out
    }

    pub fn decode(wire: &[u8]) -> Result<Self, ChannelError> {
        if wire.len() < 5 {
            return Err(ChannelError::Protocol("short signaling message"));
        }
        let declared = u32::from_be_bytes([wire[0], wire[1], wire[2], wire[3]]) as usize;
        if declared != wire.len() - 4 {
            return Err(ChannelError::Protocol("signaling length mismatch"));
        }
        let msg_type = SignalingType::from_u8(wire[4])
            .ok_or(ChannelError::Protocol("unknown signaling type"))?;
        let body = std::str::from_utf8(&wire[5..])
            .map_err(|_| ChannelError::Protocol("signaling body not UTF-8"))?;
        let mut session_id = None;
        let mut params = BTreeMap::new();
        for line in body.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ChannelError::Protocol("malformed key=value line"))?;
            if k == "session" {
                session_id = Some(
                    v.parse::<u64>()
                        .map_err(|_| ChannelError::Protocol("bad session id"))?,
                );
            } else {
                params.insert(k.to_string(), v.to_string());
            }
        }
        Ok(SignalingMessage {
            msg_type,
            session_id: session_id.ok_or(ChannelError::Protocol("missing session id"))?,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let msg = SignalingMessage::new(SignalingType::Offer, 0xDEAD)
            .with_param("carrier", "media")
            .with_param("block_size", 536);
        let wire = msg.encode();
        assert_eq!(SignalingMessage::decode(&wire).unwrap(), msg);
    }

    #[test]
    fn body_orders_session_first_then_sorted_keys() {
        let msg = SignalingMessage::new(SignalingType::Offer, 9)
            .with_param("mode", "replace")
            .with_param("block_size", 1050)
            .with_param("carrier", "media")
            .with_param("fps", 30);
        let wire = msg.encode();
        let body = std::str::from_utf8(&wire[5..]).unwrap();
        assert_eq!(
            body,
            "session=9\nblock_size=1050\ncarrier=media\nfps=30\nmode=replace\n"
        );
    }

    #[test]
    fn rejects_truncated_and_garbage() {
        assert!(SignalingMessage::decode(&[0, 0]).is_err());
        let mut wire = SignalingMessage::new(SignalingType::Hello, 1).encode();
        wire[4] = 99;
        assert!(SignalingMessage::decode(&wire).is_err());
    }
}
