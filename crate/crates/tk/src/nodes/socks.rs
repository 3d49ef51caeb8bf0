//! SOCKS5 CONNECT subset (RFC 1928): no-auth negotiation and the CONNECT
//! command with IPv4, domain, and IPv6 address forms. BIND and UDP
//! ASSOCIATE are refused with `command not supported`.

use thiserror::Error;

use crate::sim::ConnEnd;

pub const SOCKS_VERSION: u8 = 0x05;
pub const METHOD_NO_AUTH: u8 = 0x00;
pub const METHOD_NO_ACCEPTABLE: u8 = 0xFF;
pub const CMD_CONNECT: u8 = 0x01;

pub const REP_SUCCESS: u8 = 0x00;
pub const REP_GENERAL_FAILURE: u8 = 0x01;
pub const REP_NETWORK_UNREACHABLE: u8 = 0x03;
pub const REP_HOST_UNREACHABLE: u8 = 0x04;
pub const REP_CONNECTION_REFUSED: u8 = 0x05;
pub const REP_COMMAND_NOT_SUPPORTED: u8 = 0x07;
pub const REP_ADDRESS_NOT_SUPPORTED: u8 = 0x08;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SocksError {
    #[error("peer closed during handshake")]
    Disconnected,
    #[error("unsupported SOCKS version {0}")]
    BadVersion(u8),
    #[error("no acceptable authentication method")]
    NoAcceptableMethod,
    #[error("unsupported command {0}")]
    BadCommand(u8),
    #[error("unsupported address type {0}")]
    BadAddressType(u8),
    #[error("server refused: reply code {0}")]
    Refused(u8),
}

/// Byte-granular reader over a message-oriented connection.
pub struct ConnReader {
    conn: ConnEnd,
    buf: Vec<u8>,
}

impl ConnReader {
    pub fn new(conn: ConnEnd) -> Self {
        ConnReader {
            conn,
            buf: Vec::new(),
        }
    }

    pub fn conn(&self) -> &ConnEnd {
        &self.conn
    }

    /// Bytes already read but not yet consumed (handed to the splicer).
    pub fn leftover(self) -> (ConnEnd, Vec<u8>) {
        (self.conn, self.buf)
    }

    pub async fn read_exact(&mut self, n: usize) -> Option<Vec<u8>> {
        while self.buf.len() < n {
            let pkt = self.conn.recv().await?;
            self.buf.extend_from_slice(&pkt);
        }
        let rest = self.buf.split_off(n);
        Some(std::mem::replace(&mut self.buf, rest))
    }
}

/// Decoded CONNECT destination.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SocksRequest {
    pub host: String,
    pub port: u16,
}

/// Server side: run the handshake up to (but not including) the final
/// reply. On success the caller attempts the connection and then sends
/// [`reply`] with the outcome.
pub async fn server_handshake(reader: &mut ConnReader) -> Result<SocksRequest, SocksError> {
    let head = reader.read_exact(2).await.ok_or(SocksError::Disconnected)?;
    if head[0] != SOCKS_VERSION {
        reader.conn().send(vec![SOCKS_VERSION, METHOD_NO_ACCEPTABLE]);
        reader.conn().close();
        return Err(SocksError::BadVersion(head[0]));
    }
    let n_methods = head[1] as usize;
    let methods = reader
        .read_exact(n_methods)
        .await
        .ok_or(SocksError::Disconnected)?;
    if !methods.contains(&METHOD_NO_AUTH) {
        reader.conn().send(vec![SOCKS_VERSION, METHOD_NO_ACCEPTABLE]);
        reader.conn().close();
        return Err(SocksError::NoAcceptableMethod);
    }
    reader.conn().send(vec![SOCKS_VERSION, METHOD_NO_AUTH]);

    let req = reader.read_exact(4).await.ok_or(SocksError::Disconnected)?;
    if req[0] != SOCKS_VERSION {
        reply(reader.conn(), REP_GENERAL_FAILURE);
        reader.conn().close();
        return Err(SocksError::BadVersion(req[0]));
    }
    if req[1] != CMD_CONNECT {
        reply(reader.conn(), REP_COMMAND_NOT_SUPPORTED);
        reader.conn().close();
        return Err(SocksError::BadCommand(req[1]));
    }
    let host = match req[3] {
        0x01 => {
            let raw = reader.read_exact(4).await.ok_or(SocksError::Disconnected)?;
            format!("{}.{}.{}.{}", raw[0], raw[1], raw[2], raw[3])
        }
        0x03 => {
            let len = reader.read_exact(1).await.ok_or(SocksError::Disconnected)?[0] as usize;
            let raw = reader
                .read_exact(len)
                .await
                .ok_or(SocksError::Disconnected)?;
            String::from_utf8_lossy(&raw).into_owned()
        }
        0x04 => {
            let raw = reader
                .read_exact(16)
                .await
                .ok_or(SocksError::Disconnected)?;
            let mut parts = Vec::with_capacity(8);
            for pair in raw.chunks(2) {
                parts.push(format!("{:02x}{:02x}", pair[0], pair[1]));
            }
            parts.join(":")
        }
        other => {
            reply(reader.conn(), REP_ADDRESS_NOT_SUPPORTED);
            reader.conn().close();
            return Err(SocksError::BadAddressType(other));
        }
    };
    let port_raw = reader.read_exact(2).await.ok_or(SocksError::Disconnected)?;
    let port = u16::from_be_bytes([port_raw[0], port_raw[1]]);
    Ok(SocksRequest { host, port })
}

/// Send the final server reply with the given code (BND fields zeroed).
pub fn reply(conn: &ConnEnd, rep: u8) {
    conn.send(vec![SOCKS_VERSION, rep, 0x00, 0x01, 0, 0, 0, 0, 0, 0]);
}

/// Client side of the CONNECT handshake (domain address form).
pub async fn client_connect(
    reader: &mut ConnReader,
    host: &str,
    port: u16,
) -> Result<(), SocksError> {
    reader.conn().send(vec![SOCKS_VERSION, 1, METHOD_NO_AUTH]);
    let choice = reader.read_exact(2).await.ok_or(SocksError::Disconnected)?;
    if choice[0] != SOCKS_VERSION || choice[1] != METHOD_NO_AUTH {
        return Err(SocksError::NoAcceptableMethod);
    }
    let mut req = vec![SOCKS_VERSION, CMD_CONNECT, 0x00, 0x03, host.len() as u8];
    req.extend_from_slice(host.as_bytes());
    req.extend_from_slice(&port.to_be_bytes());
    reader.conn().send(req);
    let head = reader.read_exact(4).await.ok_or(SocksError::Disconnected)?;
    if head[1] != REP_SUCCESS {
        return Err(SocksError::Refused(head[1]));
    }
    let skip = match head[3] {
        0x01 => 4 + 2,
        0x03 => {
            let len = reader.read_exact(1).await.ok_or(SocksError::Disconnected)?[0] as usize;
            len + 2
        }
        0x04 => 16 + 2,
        other => return Err(SocksError::BadAddressType(other)),
    };
    reader
        .read_exact(skip)
        .await
        .ok_or(SocksError::Disconnected)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{LinkParams, Network, Sim};

    async fn socket_pair(sim: &Sim) -> (ConnEnd, ConnEnd) {
        let net = Network::new(sim, 3);
        net.add_node("c");
        net.add_node("s");
        net.add_link("c", "s", LinkParams::delay_ms(1));
        let listener = net.listen("s", 1080);
        let h = sim.spawn(async move { listener.accept().await.unwrap() });
        let client = net.connect("c", "s", 1080).await.unwrap();
        (client, h.await)
    }

    #[test]
    fn connect_handshake_round_trip() {
        Sim::execute(|sim| async move {
            let (client, server) = socket_pair(&sim).await;
            let sim2 = sim.clone();
            let server_task = sim.spawn(async move {
                let mut reader = ConnReader::new(server);
                let req = server_handshake(&mut reader).await.unwrap();
                reply(reader.conn(), REP_SUCCESS);
                let _ = sim2;
                req
            });
            let mut reader = ConnReader::new(client);
            client_connect(&mut reader, "example.test", 8080).await.unwrap();
            let req = server_task.await;
            assert_eq!(
                req,
                SocksRequest {
                    host: "example.test".into(),
                    port: 8080
                }
            );
        });
    }

    #[test]
    fn version_four_greeting_is_rejected() {
        Sim::execute(|sim| async move {
            let (client, server) = socket_pair(&sim).await;
            let server_task = sim.spawn(async move {
                let mut reader = ConnReader::new(server);
                server_handshake(&mut reader).await
            });
            client.send(vec![0x04, 0x01, 0x00]);
            let err = server_task.await.unwrap_err();
            assert_eq!(err, SocksError::BadVersion(4));
            // Error reply then close.
            assert_eq!(client.recv().await, Some(vec![0x05, 0xFF]));
            assert_eq!(client.recv().await, None);
        });
    }

    #[test]
    fn bind_command_not_supported() {
        Sim::execute(|sim| async move {
            let (client, server) = socket_pair(&sim).await;
            let server_task = sim.spawn(async move {
                let mut reader = ConnReader::new(server);
                server_handshake(&mut reader).await
            });
            client.send(vec![0x05, 0x01, 0x00]);
            client.send(vec![0x05, 0x02, 0x00, 0x01, 1, 2, 3, 4, 0, 80]);
            assert_eq!(server_task.await.unwrap_err(), SocksError::BadCommand(2));
        });
    }
}
