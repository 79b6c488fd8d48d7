//! Message tags, associated-data labels and byte layouts.
//!
//! Every message is `tag (u8) ‖ body`. Integers are big-endian. Envelopes
//! embedded in variable-length bodies use [`CipherEnvelope::encode`]
//! (`iv ‖ ct_len u32 ‖ ct ‖ tag`); reports use the fixed layout
//! `iv ‖ ct ‖ tag` since their plaintext length is constant.

use crate::crypto::{CipherEnvelope, CryptoError, IV_LEN, TAG_LEN};

use super::{MeterId, Nonce};

pub const GW_ATTEST: u8 = 0x01;
pub const CC_ATTEST: u8 = 0x02;
pub const TIME_ECHO: u8 = 0x03;
pub const INIT_ACK: u8 = 0x04;

pub const ATTEST_REQUEST: u8 = 0x10;
pub const GW_QUOTE: u8 = 0x11;
pub const INIT: u8 = 0x12;
pub const INIT_PRIME: u8 = 0x13;
pub const GET_INIT_KEY: u8 = 0x14;
pub const INIT_KEY_RESP: u8 = 0x15;
pub const DONE: u8 = 0x16;
pub const ECHO: u8 = 0x17;
pub const ACK: u8 = 0x18;
pub const INIT_TRIGGER: u8 = 0x19;

pub const REPORT: u8 = 0x20;
pub const REPORT_RESPONSE: u8 = 0x21;
pub const WINDOW_FORWARD: u8 = 0x22;
pub const WINDOW_ACK: u8 = 0x23;
pub const PRICE_BROADCAST: u8 = 0x24;

pub const RESEND_REQUEST: u8 = 0x30;
pub const RESEND_REPORT: u8 = 0x31;
pub const TIME_REQUEST: u8 = 0x32;
pub const TIME_RESPONSE: u8 = 0x33;

pub const REPORT_AAD: &[u8] = b"secgrid/report/v1";
pub const RESEND_REPORT_AAD: &[u8] = b"secgrid/resend-report/v1";
pub const RESPONSE_AAD: &[u8] = b"secgrid/response/v1";
pub const INIT_AAD: &[u8] = b"secgrid/init/v1";
pub const ECHO_AAD: &[u8] = b"secgrid/echo/v1";
pub const ACK_AAD: &[u8] = b"secgrid/ack/v1";
pub const RESEND_AAD: &[u8] = b"secgrid/resend/v1";
pub const PRICE_AAD: &[u8] = b"secgrid/price/v1";
pub const TIME_ECHO_AAD: &[u8] = b"secgrid/time-echo/v1";
pub const INIT_ACK_AAD: &[u8] = b"secgrid/init-ack/v1";
pub const TIME_REQUEST_AAD: &[u8] = b"secgrid/time-request/v1";
pub const TIME_RESPONSE_AAD: &[u8] = b"secgrid/time-response/v1";
pub const CHANNEL_AAD: &[u8] = b"secgrid/channel/v1/";

pub const CC_ATTEST_CTX: &[u8] = b"secgrid/sig/cc-attest/v1";
pub const TIME_ECHO_CTX: &[u8] = b"secgrid/sig/time-echo/v1";
pub const INIT_ACK_CTX: &[u8] = b"secgrid/sig/init-ack/v1";
pub const DONE_CTX: &[u8] = b"secgrid/sig/done/v1";

pub const REPORT_PLAIN_LEN: usize = 8 + 8 + 16 + 8;
pub const REPORT_LEN: usize = 1 + 8 + IV_LEN + REPORT_PLAIN_LEN + TAG_LEN;
pub const RESPONSE_PLAIN_LEN: usize = 8 + 8 + 16;

/// Messages on the SM↔UD pairing link. They are not network traffic.
pub fn is_local(tag: u8) -> bool {
    matches!(tag, INIT | INIT_TRIGGER)
}

pub fn tag_name(tag: u8) -> &'static str {
    match tag {
        GW_ATTEST => "gw_attest",
        CC_ATTEST => "cc_attest",
        TIME_ECHO => "time_echo",
        INIT_ACK => "init_ack",
        ATTEST_REQUEST => "attest_request",
        GW_QUOTE => "gw_quote",
        INIT => "init",
        INIT_PRIME => "init_prime",
        GET_INIT_KEY => "get_init_key",
        INIT_KEY_RESP => "init_key_resp",
        DONE => "done",
        ECHO => "echo",
        ACK => "ack",
        INIT_TRIGGER => "init_trigger",
        REPORT => "report",
        REPORT_RESPONSE => "report_response",
        WINDOW_FORWARD => "window_forward",
        WINDOW_ACK => "window_ack",
        PRICE_BROADCAST => "price_broadcast",
        RESEND_REQUEST => "resend_request",
        RESEND_REPORT => "resend_report",
        TIME_REQUEST => "time_request",
        TIME_RESPONSE => "time_response",
        _ => "unknown",
    }
}

/// Inverse of [`tag_name`].
pub fn tag_from_name(name: &str) -> Option<u8> {
    (0..=u8::MAX).find(|&t| tag_name(t) == name && name != "unknown")
}

/// Cursor over a message body. Every accessor fails on truncation.
pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], CryptoError> {
        if self.buf.len() < n {
            return Err(CryptoError::Malformed("truncated message"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], CryptoError> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8, CryptoError> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, CryptoError> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, CryptoError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, CryptoError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    /// A `u16`-length-prefixed byte string.
    pub fn short_bytes(&mut self) -> Result<&'a [u8], CryptoError> {
        let n = self.u16()? as usize;
        self.bytes(n)
    }

    pub fn envelope(&mut self, aad: &[u8]) -> Result<CipherEnvelope, CryptoError> {
        let (env, rest) = CipherEnvelope::decode_prefix(self.buf, aad)?;
        self.buf = rest;
        Ok(env)
    }

    pub fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }

    pub fn finish(&self) -> Result<(), CryptoError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(CryptoError::Malformed("trailing bytes"))
        }
    }
}

pub fn put_short_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u16).to_be_bytes());
    out.extend_from_slice(bytes);
}

/// `ID_i ‖ m_i ‖ nonce ‖ ctr_i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReportPlain {
    pub meter_id: MeterId,
    pub reading: u64,
    pub nonce: Nonce,
    pub ctr: u64,
}

impl ReportPlain {
    pub fn to_bytes(&self) -> [u8; REPORT_PLAIN_LEN] {
        let mut out = [0u8; REPORT_PLAIN_LEN];
        out[..8].copy_from_slice(&self.meter_id.to_be_bytes());
        out[8..16].copy_from_slice(&self.reading.to_be_bytes());
        out[16..32].copy_from_slice(&self.nonce);
        out[32..].copy_from_slice(&self.ctr.to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut r = Reader::new(bytes);
        let plain = ReportPlain { meter_id: r.u64()?, reading: r.u64()?, nonce: r.array()?, ctr: r.u64()? };
        r.finish()?;
        Ok(plain)
    }
}

/// Associated data of a report-shaped message.
pub fn report_aad(tag: u8) -> Option<&'static [u8]> {
    match tag {
        REPORT => Some(REPORT_AAD),
        RESEND_REPORT => Some(RESEND_REPORT_AAD),
        _ => None,
    }
}

/// `tag ‖ meter_id ‖ iv ‖ ct ‖ tag`.
pub fn encode_report(tag: u8, meter_id: MeterId, env: &CipherEnvelope) -> Vec<u8> {
    let mut out = Vec::with_capacity(REPORT_LEN);
    out.push(tag);
    out.extend_from_slice(&meter_id.to_be_bytes());
    out.extend_from_slice(&env.encode_fixed());
    out
}

pub fn decode_report(bytes: &[u8]) -> Result<(u8, MeterId, CipherEnvelope), CryptoError> {
    if bytes.len() != REPORT_LEN {
        return Err(CryptoError::Malformed("report length"));
    }
    let tag = bytes[0];
    let aad = report_aad(tag).ok_or(CryptoError::Malformed("not a report"))?;
    let meter_id = u64::from_be_bytes(bytes[1..9].try_into().unwrap());
    let env = CipherEnvelope::decode_fixed(&bytes[9..], REPORT_PLAIN_LEN, aad)?;
    Ok((tag, meter_id, env))
}

/// Clear meter id of a meter-addressed message, if the body is long enough
/// to carry one.
pub fn peek_meter_id(bytes: &[u8]) -> Option<MeterId> {
    bytes.get(1..9).map(|b| u64::from_be_bytes(b.try_into().unwrap()))
}

/// `tag ‖ meter_id ‖ envelope` for the per-meter control messages.
pub fn encode_meter_msg(tag: u8, meter_id: MeterId, env: &CipherEnvelope) -> Vec<u8> {
    let mut out = vec![tag];
    out.extend_from_slice(&meter_id.to_be_bytes());
    out.extend_from_slice(&env.encode());
    out
}

pub fn decode_meter_msg(bytes: &[u8], aad: &[u8]) -> Result<(MeterId, CipherEnvelope), CryptoError> {
    let mut r = Reader::new(bytes.get(1..).ok_or(CryptoError::Malformed("empty message"))?);
    let meter_id = r.u64()?;
    let env = r.envelope(aad)?;
    r.finish()?;
    Ok((meter_id, env))
}

/// Plaintext of a report response: `meter_id ‖ ctr_acked ‖ next_nonce`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResponsePlain {
    pub meter_id: MeterId,
    pub ctr: u64,
    pub next_nonce: Nonce,
}

impl ResponsePlain {
    pub fn to_bytes(&self) -> [u8; RESPONSE_PLAIN_LEN] {
        let mut out = [0u8; RESPONSE_PLAIN_LEN];
        out[..8].copy_from_slice(&self.meter_id.to_be_bytes());
        out[8..16].copy_from_slice(&self.ctr.to_be_bytes());
        out[16..].copy_from_slice(&self.next_nonce);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut r = Reader::new(bytes);
        let plain = ResponsePlain { meter_id: r.u64()?, ctr: r.u64()?, next_nonce: r.array()? };
        r.finish()?;
        Ok(plain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{ae_decrypt, AeKey, SymKey};

    #[test]
    fn report_plain_is_forty_bytes() {
        let p = ReportPlain { meter_id: 7, reading: 1234, nonce: [9; 16], ctr: 3 };
        let bytes = p.to_bytes();
        assert_eq!(bytes.len(), 40);
        assert_eq!(&bytes[..8], &7u64.to_be_bytes());
        assert_eq!(&bytes[32..], &3u64.to_be_bytes());
        assert_eq!(ReportPlain::from_bytes(&bytes), Ok(p));
        assert!(ReportPlain::from_bytes(&bytes[..39]).is_err());
    }

    #[test]
    fn report_layout() {
        let mut key = AeKey::new(SymKey::from_bytes([3; 16]), 2);
        let p = ReportPlain { meter_id: 42, reading: 5, nonce: [1; 16], ctr: 1 };
        let env = key.encrypt(&p.to_bytes(), REPORT_AAD).unwrap();
        let bytes = encode_report(REPORT, 42, &env);
        assert_eq!(bytes.len(), REPORT_LEN);
        assert_eq!(bytes.len(), 1 + 8 + 12 + 40 + 16);
        assert_eq!(bytes[0], REPORT);
        assert_eq!(&bytes[1..9], &42u64.to_be_bytes());
        assert_eq!(&bytes[9..21], &env.iv);
        let (tag, id, decoded) = decode_report(&bytes).unwrap();
        assert_eq!((tag, id), (REPORT, 42));
        let plain = ae_decrypt(key.key(), &decoded, REPORT_AAD).unwrap();
        assert_eq!(ReportPlain::from_bytes(&plain).unwrap(), p);
        assert!(decode_report(&bytes[..76]).is_err());
        let mut wrong_tag = bytes.clone();
        wrong_tag[0] = WINDOW_ACK;
        assert!(decode_report(&wrong_tag).is_err());
    }

    #[test]
    fn meter_msg_round_trip() {
        let mut key = AeKey::new(SymKey::from_bytes([4; 16]), 2);
        let env = key.encrypt(b"hello", ECHO_AAD).unwrap();
        let bytes = encode_meter_msg(ECHO, 9, &env);
        let (id, back) = decode_meter_msg(&bytes, ECHO_AAD).unwrap();
        assert_eq!(id, 9);
        assert_eq!(back, env);
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_meter_msg(&long, ECHO_AAD).is_err());
        assert_eq!(peek_meter_id(&bytes), Some(9));
        assert_eq!(peek_meter_id(&[ECHO, 1]), None);
    }

    #[test]
    fn response_plain_round_trip() {
        let r = ResponsePlain { meter_id: 1, ctr: 2, next_nonce: [3; 16] };
        assert_eq!(ResponsePlain::from_bytes(&r.to_bytes()), Ok(r));
    }

    #[test]
    fn tag_names_are_distinct() {
        let tags = [
            GW_ATTEST, CC_ATTEST, TIME_ECHO, INIT_ACK, ATTEST_REQUEST, GW_QUOTE, INIT, INIT_PRIME, GET_INIT_KEY,
            INIT_KEY_RESP, DONE, ECHO, ACK, INIT_TRIGGER, REPORT, REPORT_RESPONSE, WINDOW_FORWARD, WINDOW_ACK,
            PRICE_BROADCAST, RESEND_REQUEST, RESEND_REPORT, TIME_REQUEST, TIME_RESPONSE,
        ];
        let names: std::collections::BTreeSet<_> = tags.iter().map(|&t| tag_name(t)).collect();
        assert_eq!(names.len(), tags.len());
        assert!(!names.contains("unknown"));
    }
}
