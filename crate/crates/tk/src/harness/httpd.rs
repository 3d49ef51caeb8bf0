//! Minimal HTTP-like file service for the emulation.
//!
//! Request: `GET <name> <size>\r\n\r\n`. Response: `OK <size>\r\n\r\n`
//! followed by `<size>` body bytes generated deterministically from the
//! name, so every client can verify its download byte-for-byte (the
//! sentinel check). A separate sink service accepts uploads and discards
//! them.

use crate::sim::{ConnEnd, Network, Sim};

pub const HTTP_PORT: u16 = 80;
pub const SINK_PORT: u16 = 9;

const SERVER_CHUNK: usize = 16 * 1024;

/// Deterministic body byte `i` of the object `name`.
pub fn sentinel_byte(name: &str, i: u64) -> u8 {
    let seed = crate::sim::label_seed(0x5EED, name);
    ((seed
        .wrapping_mul(2_654_435_761)
        .wrapping_add(i.wrapping_mul(0x9E37_79B9)))
        % 251) as u8
}

/// Serve `GET` requests on `(node, HTTP_PORT)`.
pub fn spawn_file_server(sim: &Sim, net: &Network, node: &str) {
    let listener = net.listen(node, HTTP_PORT);
    let sim2 = sim.clone();
    sim.spawn(async move {
        while let Some(conn) = listener.accept().await {
            sim2.spawn(async move {
                serve_one(conn).await;
            });
        }
    });
}

async fn serve_one(conn: ConnEnd) {
    let mut buf = Vec::new();
    let header_end = loop {
        if let Some(pos) = find_subslice(&buf, b"\r\n\r\n") {
            break pos;
        }
        match conn.recv().await {
            Some(chunk) => buf.extend(chunk),
            None => return,
        }
    };
    let line = String::from_utf8_lossy(&buf[..header_end]).into_owned();
    let mut parts = line.split_whitespace();
    let (verb, name, size) = (
        parts.next().unwrap_or(""),
        parts.next().unwrap_or("").to_string(),
        parts.next().and_then(|s| s.parse::<u64>().ok()),
    );
    if verb != "GET" || name.is_empty() || size.is_none() {
        conn.send(b"ERR bad request\r\n\r\n".to_vec());
        conn.close();
        return;
    }
    let size = size.unwrap();
    conn.send(format!("OK {size}\r\n\r\n").into_bytes());
    let mut sent = 0u64;
    while sent < size {
        let n = (size - sent).min(SERVER_CHUNK as u64);
        let chunk: Vec<u8> = (sent..sent + n).map(|i| sentinel_byte(&name, i)).collect();
        conn.send(chunk);
        sent += n;
    }
    conn.close();
}

/// Accepts connections and discards everything received.
pub fn spawn_sink_server(sim: &Sim, net: &Network, node: &str) {
    let listener = net.listen(node, SINK_PORT);
    let sim2 = sim.clone();
    sim.spawn(async move {
        while let Some(conn) = listener.accept().await {
            sim2.spawn(async move {
                while conn.recv().await.is_some() {}
            });
        }
    });
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + needle.len())
}

/// Timing and integrity result of one download.
pub struct GetResult {
    pub ttfb_us: u64,
    pub total_us: u64,
    pub sentinel_ok: bool,
    pub bytes: u64,
}

/// Issue a `GET` over an established byte connection and verify the body.
pub async fn http_get(sim: &Sim, conn: &ConnEnd, name: &str, size: u64) -> Option<GetResult> {
    let start = sim.now();
    conn.send(format!("GET {name} {size}\r\n\r\n").into_bytes());
    let mut buf: Vec<u8> = Vec::new();
    let mut ttfb = None;
    let header_end = loop {
        if let Some(pos) = find_subslice(&buf, b"\r\n\r\n") {
            break pos;
        }
        match conn.recv().await {
            Some(chunk) => {
                if ttfb.is_none() && !chunk.is_empty() {
                    ttfb = Some(sim.now() - start);
                }
                buf.extend(chunk);
            }
            None => return None,
        }
    };
    if !buf.starts_with(b"OK ") {
        return None;
    }
    let mut body: Vec<u8> = buf.split_off(header_end);
    while (body.len() as u64) < size {
        match conn.recv().await {
            Some(chunk) => body.extend(chunk),
            None => break,
        }
    }
    let total_us = sim.now() - start;
    if body.len() as u64 != size {
        return None;
    }
    let sentinel_ok = body
        .iter()
        .enumerate()
        .all(|(i, &b)| b == sentinel_byte(name, i as u64));
    Some(GetResult {
        ttfb_us: ttfb.unwrap_or(total_us),
        total_us,
        sentinel_ok,
        bytes: size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::LinkParams;

    #[test]
    fn get_round_trip_with_sentinel() {
        Sim::execute(|sim| async move {
            let net = Network::new(&sim, 7);
            net.add_node("c");
            net.add_node("server");
            net.add_link("c", "server", LinkParams::delay_ms(30));
            spawn_file_server(&sim, &net, "server");
            let conn = net.connect("c", "server", HTTP_PORT).await.unwrap();
            let res = http_get(&sim, &conn, "file-a", 250 * 1024).await.unwrap();
            assert!(res.sentinel_ok);
            assert_eq!(res.bytes, 250 * 1024);
            // Uncapped link: TTFB is one round trip after the request.
            assert_eq!(res.ttfb_us, 60_000);
        });
    }

    #[test]
    fn distinct_names_have_distinct_bodies() {
        assert_ne!(
            (0..64).map(|i| sentinel_byte("a", i)).collect::<Vec<_>>(),
            (0..64).map(|i| sentinel_byte("b", i)).collect::<Vec<_>>()
        );
    }
}
