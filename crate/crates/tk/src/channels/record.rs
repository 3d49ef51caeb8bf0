//! Tunnel record layer: length-prefixed authenticated encryption under a
//! pre-shared key.
//!
//! Wire form: `[len:u16 BE][ciphertext]` where `len` counts the ciphertext
//! (plaintext + 16-byte tag). The nonce is never transmitted: it is
//! `[direction:1][counter:8 BE][0;3]`, with one counter per direction, so
//! records must be decrypted in send order and a counter value is never
//! reused under a key.

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};

use super::ChannelError;

/// Records never exceed 16 KiB on the wire.
pub const TUNNEL_RECORD_MAX: usize = 16 * 1024;

/// Maximum plaintext per record (wire limit minus prefix and tag).
pub const TUNNEL_PLAINTEXT_MAX: usize = TUNNEL_RECORD_MAX - 2 - 16;

/// Direction byte for initiator-to-responder records.
pub const DIR_INITIATOR: u8 = 0x00;
/// Direction byte for responder-to-initiator records.
pub const DIR_RESPONDER: u8 = 0x01;

fn nonce_bytes(dir: u8, counter: u64) -> [u8; 12] {
    let mut nonce = [0u8; 12];
    nonce[0] = dir;
    nonce[1..9].copy_from_slice(&counter.to_be_bytes());
    nonce
}

/// Sealing half: encrypts outbound plaintexts into records.
pub struct RecordSealer {
    cipher: ChaCha20Poly1305,
    dir: u8,
    counter: u64,
}

impl RecordSealer {
    pub fn new(psk: &[u8; 32], dir: u8) -> Self {
        RecordSealer {
            cipher: ChaCha20Poly1305::new(&Key::try_from(psk.as_slice()).expect("32-byte key")),
            dir,
            counter: 0,
        }
    }

    pub fn seal(&mut self, plaintext: &[u8]) -> Vec<u8> {
        assert!(plaintext.len() <= TUNNEL_PLAINTEXT_MAX, "record too large");
        let nonce = nonce_bytes(self.dir, self.counter);
        self.counter += 1;
        let ciphertext = self
            .cipher
            .encrypt(&Nonce::try_from(nonce.as_slice()).expect("12-byte nonce"), plaintext)
            .expect("encryption is infallible for in-memory buffers");
        let mut out = Vec::with_capacity(2 + ciphertext.len());
        out.extend_from_slice(&(ciphertext.len() as u16).to_be_bytes());
        out.extend_from_slice(&ciphertext);
        out
    }
}

/// Opening half: decrypts records in order, enforcing the counter.
pub struct RecordOpener {
    cipher: ChaCha20Poly1305,
    dir: u8,
    counter: u64,
}

impl RecordOpener {
    pub fn new(psk: &[u8; 32], dir: u8) -> Self {
        RecordOpener {
            cipher: ChaCha20Poly1305::new(&Key::try_from(psk.as_slice()).expect("32-byte key")),
            dir,
            counter: 0,
        }
    }

    pub fn open(&mut self, record: &[u8]) -> Result<Vec<u8>, ChannelError> {
        if record.len() < 2 {
            return Err(ChannelError::AuthFailure);
        }
        let declared = u16::from_be_bytes([record[0], record[1]]) as usize;
        if declared != record.len() - 2 {
            return Err(ChannelError::AuthFailure);
        }
        let nonce = nonce_bytes(self.dir, self.counter);
        let plaintext = self
            .cipher
            .decrypt(&Nonce::try_from(nonce.as_slice()).expect("12-byte nonce"), &record[2..])
            .map_err(|_| ChannelError::AuthFailure)?;
        self.counter += 1;
        Ok(plaintext)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PSK: [u8; 32] = [7u8; 32];

    #[test]
    fn seal_open_round_trip_in_order() {
        let mut sealer = RecordSealer::new(&PSK, DIR_INITIATOR);
        let mut opener = RecordOpener::new(&PSK, DIR_INITIATOR);
        for i in 0..10u8 {
            let msg = vec![i; 100 + usize::from(i)];
            let rec = sealer.seal(&msg);
            assert!(rec.len() <= TUNNEL_RECORD_MAX);
            assert_eq!(opener.open(&rec).unwrap(), msg);
        }
    }

    #[test]
    fn tampered_record_fails_auth() {
        let mut sealer = RecordSealer::new(&PSK, DIR_INITIATOR);
        let mut opener = RecordOpener::new(&PSK, DIR_INITIATOR);
        let mut rec = sealer.seal(b"covert");
        let idx = rec.len() / 2;
        rec[idx] ^= 0x01;
        assert_eq!(opener.open(&rec).unwrap_err(), ChannelError::AuthFailure);
    }

    #[test]
    fn wrong_psk_and_wrong_order_fail() {
        let mut sealer = RecordSealer::new(&PSK, DIR_INITIATOR);
        let mut wrong_key = RecordOpener::new(&[8u8; 32], DIR_INITIATOR);
        let rec = sealer.seal(b"x");
        assert_eq!(wrong_key.open(&rec).unwrap_err(), ChannelError::AuthFailure);

        // Skipping a record desynchronizes the counter.
        let mut opener = RecordOpener::new(&PSK, DIR_INITIATOR);
        let _rec0 = sealer.seal(b"first");
        let rec1 = sealer.seal(b"second");
        assert!(opener.open(&rec1).is_err());
    }

    #[test]
    fn directions_use_distinct_nonce_spaces() {
        let mut a = RecordSealer::new(&PSK, DIR_INITIATOR);
        let mut b = RecordSealer::new(&PSK, DIR_RESPONDER);
        assert_ne!(a.seal(b"same"), b.seal(b"same"));
    }
}
