//! Sequenced, authenticated channel between the gateway and control enclaves.
//!
//! Each direction has its own key derived from the Diffie–Hellman secret.
//! A message is `tag ‖ envelope` with associated data `CHANNEL_AAD ‖ tag`
//! and plaintext `seq (u64) ‖ payload`. Sequence numbers start at 1.

use crate::crypto::{kdf_session, CryptoError, SharedSecret, SymKey};
use crate::enclave::Enclave;

use super::wire::{Reader, CHANNEL_AAD};

pub const GW_TO_CC: &[u8] = b"gw->cc";
pub const CC_TO_GW: &[u8] = b"cc->gw";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Gateway,
    Control,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Arrival {
    /// The next expected sequence number.
    Fresh { seq: u64, payload: Vec<u8> },
    /// The most recently accepted sequence number again; `cached` is the
    /// reply already sent for it, if any.
    Duplicate { seq: u64, cached: Option<Vec<u8>> },
    /// Older than the most recent accepted message.
    Stale { seq: u64 },
    /// Skips ahead; accepted, but messages were lost in between.
    Gap { seq: u64, expected: u64, payload: Vec<u8> },
}

#[derive(Clone)]
pub struct ChannelEnd {
    send_key: SymKey,
    recv_key: SymKey,
    next_send: u64,
    last_recv: u64,
    cached_reply: Option<(u64, Vec<u8>)>,
}

fn channel_aad(tag: u8) -> Vec<u8> {
    let mut aad = CHANNEL_AAD.to_vec();
    aad.push(tag);
    aad
}

impl ChannelEnd {
    pub fn new(ss: &SharedSecret, side: Side) -> Self {
        let gw_to_cc = kdf_session(ss, GW_TO_CC);
        let cc_to_gw = kdf_session(ss, CC_TO_GW);
        let (send_key, recv_key) = match side {
            Side::Gateway => (gw_to_cc, cc_to_gw),
            Side::Control => (cc_to_gw, gw_to_cc),
        };
        ChannelEnd { send_key, recv_key, next_send: 1, last_recv: 0, cached_reply: None }
    }

    pub fn send_key(&self) -> &SymKey {
        &self.send_key
    }

    pub fn recv_key(&self) -> &SymKey {
        &self.recv_key
    }

    pub fn next_send(&self) -> u64 {
        self.next_send
    }

    pub fn last_recv(&self) -> u64 {
        self.last_recv
    }

    /// Adopts sequence state reported by the peer after a restart.
    pub fn resync(&mut self, next_send: u64, last_recv: u64) {
        self.next_send = next_send.max(1);
        self.last_recv = last_recv;
        self.cached_reply = None;
    }

    /// Encrypts `payload` under the next sequence number.
    pub fn seal(&mut self, enclave: &mut Enclave, tag: u8, payload: &[u8]) -> Result<(u64, Vec<u8>), CryptoError> {
        let seq = self.next_send;
        let mut plain = seq.to_be_bytes().to_vec();
        plain.extend_from_slice(payload);
        let env = enclave.encrypt(&self.send_key, &plain, &channel_aad(tag))?;
        self.next_send += 1;
        let mut out = vec![tag];
        out.extend_from_slice(&env.encode());
        Ok((seq, out))
    }

    pub fn open(&mut self, bytes: &[u8]) -> Result<(u8, Arrival), CryptoError> {
        let (&tag, body) = bytes.split_first().ok_or(CryptoError::Malformed("empty message"))?;
        let aad = channel_aad(tag);
        let mut r = Reader::new(body);
        let env = r.envelope(&aad)?;
        r.finish()?;
        let plain = crate::crypto::ae_decrypt(&self.recv_key, &env, &aad)?;
        let mut r = Reader::new(&plain);
        let seq = r.u64()?;
        let payload = r.rest().to_vec();
        let arrival = if seq == self.last_recv + 1 {
            self.last_recv = seq;
            Arrival::Fresh { seq, payload }
        } else if seq == self.last_recv {
            let cached = self.cached_reply.as_ref().filter(|(s, _)| *s == seq).map(|(_, b)| b.clone());
            Arrival::Duplicate { seq, cached }
        } else if seq < self.last_recv {
            Arrival::Stale { seq }
        } else {
            let expected = self.last_recv + 1;
            self.last_recv = seq;
            Arrival::Gap { seq, expected, payload }
        };
        Ok((tag, arrival))
    }

    /// Records the reply sent for incoming message `seq`, so that a
    /// retransmitted request gets the identical answer.
    pub fn remember_reply(&mut self, seq: u64, bytes: Vec<u8>) {
        self.cached_reply = Some((seq, bytes));
    }
}
