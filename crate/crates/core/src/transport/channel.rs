//! Mutually authenticated, encrypted point-to-point channels.
//!
//! Three-message handshake over long-term Ed25519 identities:
//!
//! ```text
//! I -> R : hello_I = version | id_I | eph_I | nonce_I
//! R -> I : hello_R = version | id_R | eph_R | nonce_R , sig_R(H("R" | th))
//! I -> R : sig_I(H("I" | th))
//! ```
//!
//! where `th = H(hello_I | hello_R)`. Both sides derive one ChaCha20-Poly1305
//! key per direction from the X25519 shared secret with HKDF (salt `th`).
//! Record nonces are a per-direction counter, so replayed or reordered
//! records fail to open.

use std::collections::BTreeMap;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use x25519_dalek::{PublicKey, StaticSecret};

use super::{PartyId, TransportError, PROTOCOL_VERSION};
use crate::codec::{PayloadReader, PayloadWriter};

/// Long-term signing identity of one party.
pub struct Identity {
    signing: SigningKey,
}

impl Identity {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self { signing: SigningKey::generate(rng) }
    }

    pub fn from_secret(secret: [u8; 32]) -> Self {
        Self { signing: SigningKey::from_bytes(&secret) }
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn public_bytes(&self) -> [u8; 32] {
        self.signing.verifying_key().to_bytes()
    }

    fn sign(&self, msg: &[u8]) -> [u8; 64] {
        self.signing.sign(msg).to_bytes()
    }
}

/// Expected identity key for every party.
#[derive(Clone, Debug, Default)]
pub struct PeerDirectory {
    keys: BTreeMap<PartyId, VerifyingKey>,
}

impl PeerDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: PartyId, public: [u8; 32]) -> Result<(), TransportError> {
        let key = VerifyingKey::from_bytes(&public)
            .map_err(|_| TransportError::Authentication(format!("invalid identity key for {id}")))?;
        self.keys.insert(id, key);
        Ok(())
    }

    fn verify(&self, id: &PartyId, msg: &[u8], sig: &[u8]) -> Result<(), TransportError> {
        let key = self.keys.get(id).ok_or_else(|| TransportError::UnknownParty(id.clone()))?;
        let sig = Signature::from_slice(sig).map_err(|_| TransportError::Authentication("malformed signature".into()))?;
        key.verify_strict(msg, &sig)
            .map_err(|_| TransportError::Authentication(format!("bad handshake signature from {id}")))
    }
}

struct Hello {
    version: u8,
    id: PartyId,
    eph: [u8; 32],
}

fn make_hello<R: RngCore + CryptoRng>(me: &PartyId, rng: &mut R) -> (StaticSecret, Vec<u8>) {
    let secret = StaticSecret::random_from_rng(&mut *rng);
    let mut nonce = [0u8; 32];
    rng.fill_bytes(&mut nonce);
    let mut w = PayloadWriter::new();
    w.u8(PROTOCOL_VERSION).str(me.as_str()).bytes(PublicKey::from(&secret).as_bytes()).bytes(&nonce);
    (secret, w.finish())
}

fn parse_hello(r: &mut PayloadReader<'_>) -> Result<Hello, TransportError> {
    let version = r.u8()?;
    if version != PROTOCOL_VERSION {
        return Err(TransportError::Negotiation { ours: PROTOCOL_VERSION, theirs: version });
    }
    let id = PartyId::new(r.str()?);
    let eph: [u8; 32] =
        r.bytes()?.try_into().map_err(|_| TransportError::Decode("ephemeral key must be 32 bytes".into()))?;
    let nonce = r.bytes()?;
    if nonce.len() != 32 {
        return Err(TransportError::Decode("handshake nonce must be 32 bytes".into()));
    }
    Ok(Hello { version, id, eph })
}

fn transcript(hello_i: &[u8], hello_r: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"kfed.handshake.v1");
    h.update((hello_i.len() as u32).to_be_bytes());
    h.update(hello_i);
    h.update((hello_r.len() as u32).to_be_bytes());
    h.update(hello_r);
    h.finalize().into()
}

fn role_digest(role: &[u8], th: &[u8; 32]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(role);
    h.update(th);
    h.finalize().into()
}

fn derive_keys(secret: &StaticSecret, peer_eph: &[u8; 32], th: &[u8; 32]) -> ([u8; 32], [u8; 32]) {
    let shared = secret.diffie_hellman(&PublicKey::from(*peer_eph));
    let hk = Hkdf::<Sha256>::new(Some(th), shared.as_bytes());
    let mut i2r = [0u8; 32];
    let mut r2i = [0u8; 32];
    hk.expand(b"initiator->responder", &mut i2r).expect("valid length");
    hk.expand(b"responder->initiator", &mut r2i).expect("valid length");
    (i2r, r2i)
}

pub struct InitiatorHandshake {
    secret: StaticSecret,
    hello: Vec<u8>,
}

impl InitiatorHandshake {
    pub fn start<R: RngCore + CryptoRng>(me: &PartyId, rng: &mut R) -> (Self, Vec<u8>) {
        let (secret, hello) = make_hello(me, rng);
        (Self { secret, hello: hello.clone() }, hello)
    }

    /// Checks the responder is `expected` and returns the session plus the
    /// final handshake message.
    pub fn finish(
        self,
        identity: &Identity,
        msg2: &[u8],
        directory: &PeerDirectory,
        expected: &PartyId,
    ) -> Result<(Session, Vec<u8>), TransportError> {
        let mut r = PayloadReader::new(msg2);
        let hello_r_bytes = r.bytes()?;
        let sig = r.bytes()?.to_vec();
        r.finish()?;
        let mut hr = PayloadReader::new(hello_r_bytes);
        let hello_r = parse_hello(&mut hr)?;
        hr.finish()?;
        if &hello_r.id != expected {
            return Err(TransportError::Authentication(format!("expected {expected}, peer claims {}", hello_r.id)));
        }
        let th = transcript(&self.hello, hello_r_bytes);
        directory.verify(&hello_r.id, &role_digest(b"R", &th), &sig)?;
        let (i2r, r2i) = derive_keys(&self.secret, &hello_r.eph, &th);
        let mut w = PayloadWriter::new();
        w.bytes(&identity.sign(&role_digest(b"I", &th)));
        Ok((Session::new(hello_r.id, i2r, r2i), w.finish()))
    }
}

pub struct ResponderHandshake {
    peer: PartyId,
    th: [u8; 32],
    keys: ([u8; 32], [u8; 32]),
}

impl ResponderHandshake {
    pub fn respond<R: RngCore + CryptoRng>(
        identity: &Identity,
        me: &PartyId,
        msg1: &[u8],
        directory: &PeerDirectory,
        rng: &mut R,
    ) -> Result<(Self, Vec<u8>), TransportError> {
        let mut r = PayloadReader::new(msg1);
        let hello_i = parse_hello(&mut r)?;
        r.finish()?;
        debug_assert_eq!(hello_i.version, PROTOCOL_VERSION);
        if !directory.keys.contains_key(&hello_i.id) {
            return Err(TransportError::UnknownParty(hello_i.id));
        }
        let (secret, hello_r) = make_hello(me, rng);
        let th = transcript(msg1, &hello_r);
        let keys = derive_keys(&secret, &hello_i.eph, &th);
        let mut w = PayloadWriter::new();
        w.bytes(&hello_r).bytes(&identity.sign(&role_digest(b"R", &th)));
        Ok((Self { peer: hello_i.id, th, keys }, w.finish()))
    }

    pub fn peer(&self) -> &PartyId {
        &self.peer
    }

    pub fn finish(self, msg3: &[u8], directory: &PeerDirectory) -> Result<Session, TransportError> {
        let mut r = PayloadReader::new(msg3);
        let sig = r.bytes()?;
        r.finish()?;
        directory.verify(&self.peer, &role_digest(b"I", &self.th), sig)?;
        let (i2r, r2i) = self.keys;
        Ok(Session::new(self.peer, r2i, i2r))
    }
}

/// Runs both handshake sides in memory; returns (initiator, responder) sessions.
pub fn handshake_pair<R: RngCore + CryptoRng>(
    a: (&PartyId, &Identity),
    b: (&PartyId, &Identity),
    directory: &PeerDirectory,
    rng: &mut R,
) -> Result<(Session, Session), TransportError> {
    let (init, m1) = InitiatorHandshake::start(a.0, rng);
    let (resp, m2) = ResponderHandshake::respond(b.1, b.0, &m1, directory, rng)?;
    let (sa, m3) = init.finish(a.1, &m2, directory, b.0)?;
    let sb = resp.finish(&m3, directory)?;
    Ok((sa, sb))
}

/// Encrypting half of a session.
pub struct Sealer {
    cipher: ChaCha20Poly1305,
    counter: u64,
}

/// Decrypting half of a session.
pub struct Opener {
    cipher: ChaCha20Poly1305,
    counter: u64,
}

fn nonce(counter: u64) -> Nonce {
    let mut n = [0u8; 12];
    n[4..].copy_from_slice(&counter.to_be_bytes());
    Nonce::from(n)
}

impl Sealer {
    pub fn seal(&mut self, plaintext: &[u8]) -> Vec<u8> {
        let ct = self.cipher.encrypt(&nonce(self.counter), plaintext).expect("chacha20poly1305 encryption is infallible");
        self.counter += 1;
        ct
    }
}

impl Opener {
    pub fn open(&mut self, record: &[u8]) -> Result<Vec<u8>, TransportError> {
        let pt = self
            .cipher
            .decrypt(&nonce(self.counter), record)
            .map_err(|_| TransportError::Authentication("record failed to authenticate".into()))?;
        self.counter += 1;
        Ok(pt)
    }
}

pub struct Session {
    peer: PartyId,
    pub sealer: Sealer,
    pub opener: Opener,
}

impl Session {
    fn new(peer: PartyId, send_key: [u8; 32], recv_key: [u8; 32]) -> Self {
        Self {
            peer,
            sealer: Sealer { cipher: ChaCha20Poly1305::new(Key::from_slice(&send_key)), counter: 0 },
            opener: Opener { cipher: ChaCha20Poly1305::new(Key::from_slice(&recv_key)), counter: 0 },
        }
    }

    pub fn peer(&self) -> &PartyId {
        &self.peer
    }

    pub fn split(self) -> (PartyId, Sealer, Opener) {
        (self.peer, self.sealer, self.opener)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn setup() -> (PartyId, Identity, PartyId, Identity, PeerDirectory, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (a, b) = (PartyId::new("alice"), PartyId::new("bob"));
        let ia = Identity::generate(&mut rng);
        let ib = Identity::generate(&mut rng);
        let mut dir = PeerDirectory::new();
        dir.insert(a.clone(), ia.public_bytes()).unwrap();
        dir.insert(b.clone(), ib.public_bytes()).unwrap();
        (a, ia, b, ib, dir, rng)
    }

    #[test]
    fn records_flow_both_ways() {
        let (a, ia, b, ib, dir, mut rng) = setup();
        let (mut sa, mut sb) = handshake_pair((&a, &ia), (&b, &ib), &dir, &mut rng).unwrap();
        assert_eq!(sa.peer(), &b);
        assert_eq!(sb.peer(), &a);
        for i in 0..3u8 {
            let c = sa.sealer.seal(&[i; 10]);
            assert_eq!(sb.opener.open(&c).unwrap(), vec![i; 10]);
            let c = sb.sealer.seal(b"pong");
            assert_eq!(sa.opener.open(&c).unwrap(), b"pong");
        }
    }

    #[test]
    fn replayed_record_fails() {
        let (a, ia, b, ib, dir, mut rng) = setup();
        let (mut sa, mut sb) = handshake_pair((&a, &ia), (&b, &ib), &dir, &mut rng).unwrap();
        let c = sa.sealer.seal(b"once");
        sb.opener.open(&c).unwrap();
        assert!(matches!(sb.opener.open(&c), Err(TransportError::Authentication(_))));
    }

    #[test]
    fn impostor_responder_is_rejected() {
        let (a, ia, b, _ib, dir, mut rng) = setup();
        let mallory = Identity::generate(&mut rng);
        let (init, m1) = InitiatorHandshake::start(&a, &mut rng);
        let (_resp, m2) = ResponderHandshake::respond(&mallory, &b, &m1, &dir, &mut rng).unwrap();
        assert!(matches!(init.finish(&ia, &m2, &dir, &b), Err(TransportError::Authentication(_))));
    }

    #[test]
    fn unexpected_responder_identity_is_rejected() {
        let (a, ia, _b, ib, dir, mut rng) = setup();
        let (init, m1) = InitiatorHandshake::start(&a, &mut rng);
        let (_resp, m2) = ResponderHandshake::respond(&ib, &PartyId::new("bob"), &m1, &dir, &mut rng).unwrap();
        assert!(init.finish(&ia, &m2, &dir, &PartyId::new("carol")).is_err());
    }

    #[test]
    fn unknown_initiator_is_rejected() {
        let (_a, _ia, b, ib, dir, mut rng) = setup();
        let (_init, m1) = InitiatorHandshake::start(&PartyId::new("eve"), &mut rng);
        assert!(matches!(
            ResponderHandshake::respond(&ib, &b, &m1, &dir, &mut rng),
            Err(TransportError::UnknownParty(_))
        ));
    }

    #[test]
    fn version_mismatch_fails_negotiation() {
        let (a, _ia, b, ib, dir, mut rng) = setup();
        let (_init, mut m1) = InitiatorHandshake::start(&a, &mut rng);
        m1[0] = PROTOCOL_VERSION + 1;
        assert!(matches!(
            ResponderHandshake::respond(&ib, &b, &m1, &dir, &mut rng),
            Err(TransportError::Negotiation { .. })
        ));
    }
}
