//! The sealed protocol core.
//!
//! Everything that touches other users' plaintext queries or key material
//! lives behind this boundary: session keys from attestation, the replay
//! guard, the past-query table, the pending-query table that remembers which
//! relay carries the real query, and the relay-side forwarding handler. The
//! host talks to it only through the methods below, which mirror a narrow
//! enclave call interface. The host sees envelopes, peer identities and the
//! results of its own user's real query; it never gets a relayed query back.
//!
//! Attestation is simulated: a quote is the digest of the protocol-core build
//! plus an ephemeral X25519 public key. A peer whose digest is not on the
//! allow-list gets no session key and can neither send nor receive queries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::{Mutex, RwLock};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use x25519_dalek::{PublicKey, StaticSecret};

use crate::backend::SearchBackend;
use crate::error::{Error, Result};
use crate::fakes::{PastQueryTable, SeedStats};
use crate::model::{Millis, QueryId, SearchResult};
use crate::peers::{PeerDescriptor, PeerId};
use crate::wire::{self, Body, Envelope, MsgType, Nonce128, SessionKey};

/// Nonces are remembered this long per sender.
pub const DEFAULT_REPLAY_WINDOW_MS: Millis = 600_000;
const KEY_RING: usize = 4;

/// Digest identifying this protocol-core build.
pub fn build_digest() -> String {
    digest_of(concat!(env!("CARGO_PKG_NAME"), "/", env!("CARGO_PKG_VERSION"), "/protocol-1"))
}

pub fn digest_of(build: &str) -> String {
    let h = Sha256::digest(build.as_bytes());
    h.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationRecord {
    pub peer_id: PeerId,
    pub quote_hash: String,
    pub verified_at: Millis,
    pub session_key: SessionKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingQuery {
    pub query_id: QueryId,
    pub real_relay: PeerId,
    pub fake_relays: BTreeSet<PeerId>,
    pub issued_at: Millis,
    pub deadline: Millis,
}

#[derive(Debug)]
struct PendingEntry {
    info: PendingQuery,
    query: String,
    real_ticket: u64,
    tickets: HashMap<u64, PeerId>,
}

/// What the host must send for one protected query.
#[derive(Debug, Clone)]
pub struct Dispatch {
    pub query_id: QueryId,
    pub forwards: Vec<(PeerDescriptor, Envelope)>,
    /// Number of fakes actually attached.
    pub k: usize,
    /// Requested fakes that could not be sent (no fake or no relay).
    pub shortfall: usize,
}

/// Fate of an incoming QueryResponse.
#[derive(Debug, Clone, PartialEq)]
pub enum ResponseOutcome {
    Real {
        query_id: QueryId,
        results: Vec<SearchResult>,
    },
    RealFailed {
        query_id: QueryId,
        reason: String,
    },
    /// Response to a fake query, discarded.
    DroppedFake { query_id: QueryId },
    /// No pending query matches (late or duplicate).
    Unknown,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounters {
    pub replayed: u64,
    pub undecryptable: u64,
    pub unattested: u64,
}

#[derive(Debug, Default)]
struct Counters {
    replayed: AtomicU64,
    undecryptable: AtomicU64,
    unattested: AtomicU64,
}

#[derive(Debug, Default)]
struct ReplayGuard {
    seen: HashMap<PeerId, BTreeMap<Nonce128, Millis>>,
}

impl ReplayGuard {
    /// Records `nonce`; false when it was already seen inside the window.
    fn admit(&mut self, sender: &PeerId, nonce: Nonce128, now: Millis, window: Millis) -> bool {
        let seen = self.seen.entry(sender.clone()).or_default();
        if seen.len() > 4096 {
            seen.retain(|_, at| *at + window > now);
        }
        match seen.get(&nonce) {
            Some(at) if *at + window > now => false,
            _ => {
                seen.insert(nonce, now);
                true
            }
        }
    }
}

pub struct SealedCore {
    id: PeerId,
    digest: String,
    allow_list: BTreeSet<String>,
    bucket: usize,
    replay_window: Millis,
    sessions: RwLock<HashMap<PeerId, AttestationRecord>>,
    /// Per peer, keys of recent handshakes, newest first, each flagged once
    /// both sides are known to hold it: we completed the handshake as
    /// initiator, or the peer sent something sealed under it. Messages are
    /// sealed with the newest confirmed key and opened with any key held, so
    /// crossed or overlapping handshakes never leave the two sides unable to
    /// talk.
    keys: RwLock<HashMap<PeerId, Vec<(SessionKey, bool)>>>,
    handshakes: Mutex<HashMap<PeerId, StaticSecret>>,
    replay: Mutex<ReplayGuard>,
    table: PastQueryTable,
    pending: Mutex<HashMap<QueryId, PendingEntry>>,
    rng: Mutex<ChaCha20Rng>,
    counters: Counters,
}

impl std::fmt::Debug for SealedCore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SealedCore").field("id", &self.id).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub struct CoreSettings {
    pub build_digest: String,
    pub allow_list: BTreeSet<String>,
    pub table_capacity: usize,
    pub bucket_size: usize,
    pub replay_window_ms: Millis,
}

impl Default for CoreSettings {
    fn default() -> Self {
        let digest = build_digest();
        CoreSettings {
            allow_list: [digest.clone()].into(),
            build_digest: digest,
            table_capacity: crate::fakes::DEFAULT_TABLE_CAPACITY,
            bucket_size: wire::DEFAULT_BUCKET_SIZE,
            replay_window_ms: DEFAULT_REPLAY_WINDOW_MS,
        }
    }
}

impl SealedCore {
    pub fn new(id: PeerId, settings: CoreSettings, seed: u64) -> Self {
        SealedCore {
            id,
            digest: settings.build_digest,
            allow_list: settings.allow_list,
            bucket: settings.bucket_size,
            replay_window: settings.replay_window_ms,
            sessions: RwLock::new(HashMap::new()),
            keys: RwLock::new(HashMap::new()),
            handshakes: Mutex::new(HashMap::new()),
            replay: Mutex::new(ReplayGuard::default()),
            table: PastQueryTable::new(settings.table_capacity),
            pending: Mutex::new(HashMap::new()),
            rng: Mutex::new(ChaCha20Rng::seed_from_u64(seed)),
            counters: Counters::default(),
        }
    }

    pub fn id(&self) -> &PeerId {
        &self.id
    }

    fn nonce(&self) -> Nonce128 {
        let mut n = [0u8; 16];
        self.rng.lock().fill_bytes(&mut n);
        n
    }

    fn session_key(&self, peer: &PeerId) -> Option<SessionKey> {
        let keys = self.keys.read();
        keys.get(peer)?.iter().find(|(_, ok)| *ok).map(|(k, _)| k.clone())
    }

    /// Whether we may open a conversation with `peer`: a session exists and
    /// both sides are known to hold its key.
    pub fn has_session(&self, peer: &PeerId) -> bool {
        self.session_key(peer).is_some()
    }

    pub fn attestation(&self, peer: &PeerId) -> Option<AttestationRecord> {
        self.sessions.read().get(peer).cloned()
    }

    pub fn forget_session(&self, peer: &PeerId) {
        self.sessions.write().remove(peer);
        self.keys.write().remove(peer);
    }

    pub fn drop_counters(&self) -> DropCounters {
        DropCounters {
            replayed: self.counters.replayed.load(Ordering::Relaxed),
            undecryptable: self.counters.undecryptable.load(Ordering::Relaxed),
            unattested: self.counters.unattested.load(Ordering::Relaxed),
        }
    }

    // --- attestation ---

    fn quote(&self, secret: &StaticSecret) -> Body {
        Body::Quote {
            build_digest: self.digest.clone(),
            public_key: PublicKey::from(secret).to_bytes(),
        }
    }

    fn fresh_secret(&self) -> StaticSecret {
        let mut bytes = [0u8; 32];
        self.rng.lock().fill_bytes(&mut bytes);
        StaticSecret::from(bytes)
    }

    fn derive_key(&self, peer: &PeerId, shared: &[u8; 32]) -> SessionKey {
        let (a, b) = if self.id <= *peer {
            (&self.id, peer)
        } else {
            (peer, &self.id)
        };
        let mut h = Sha256::new();
        h.update(b"session-key/v1");
        h.update(shared);
        h.update((a.as_str().len() as u32).to_be_bytes());
        h.update(a.as_str().as_bytes());
        h.update(b.as_str().as_bytes());
        SessionKey(h.finalize().into())
    }

    fn install(&self, peer: &PeerId, digest: String, key: SessionKey, now: Millis, confirmed: bool) -> AttestationRecord {
        let record = AttestationRecord {
            peer_id: peer.clone(),
            quote_hash: digest,
            verified_at: now,
            session_key: key.clone(),
        };
        let mut keys = self.keys.write();
        let ring = keys.entry(peer.clone()).or_default();
        ring.insert(0, (key, confirmed));
        ring.truncate(KEY_RING);
        self.sessions.write().insert(peer.clone(), record.clone());
        record
    }

    /// Opens a handshake towards `peer`.
    pub fn begin_attest(&self, peer: &PeerId) -> Envelope {
        let secret = self.fresh_secret();
        let body = self.quote(&secret);
        self.handshakes.lock().insert(peer.clone(), secret);
        wire::seal(self.nonce(), MsgType::Attest, &self.id, &body, None, self.bucket)
            .expect("attest bodies are never sealed")
    }

    fn check_quote(&self, env: &Envelope) -> Result<(String, PublicKey)> {
        match wire::open(env, None)? {
            Body::Quote {
                build_digest,
                public_key,
            } => {
                if !self.allow_list.contains(&build_digest) {
                    return Err(Error::AttestationRejected {
                        peer: env.sender_id.to_string(),
                        digest: build_digest,
                    });
                }
                Ok((build_digest, PublicKey::from(public_key)))
            }
            _ => Err(Error::Decode("expected a quote".into())),
        }
    }

    /// Responder side: verifies the initiator's quote and answers with ours.
    pub fn answer_attest(&self, env: &Envelope, now: Millis) -> Result<Envelope> {
        if env.msg_type != MsgType::Attest {
            return Err(Error::UnexpectedMessage(env.msg_type));
        }
        let (digest, their_public) = self.check_quote(env)?;
        let secret = self.fresh_secret();
        let shared = secret.diffie_hellman(&their_public);
        let key = self.derive_key(&env.sender_id, shared.as_bytes());
        self.install(&env.sender_id, digest, key, now, false);
        let body = self.quote(&secret);
        wire::seal(self.nonce(), MsgType::AttestReply, &self.id, &body, None, self.bucket)
    }

    /// Initiator side: verifies the reply and installs the session key.
    pub fn complete_attest(&self, reply: &Envelope, now: Millis) -> Result<AttestationRecord> {
        if reply.msg_type != MsgType::AttestReply {
            return Err(Error::UnexpectedMessage(reply.msg_type));
        }
        let secret = self
            .handshakes
            .lock()
            .remove(&reply.sender_id)
            .ok_or_else(|| Error::Decode(format!("no handshake open with {}", reply.sender_id)))?;
        let (digest, their_public) = self.check_quote(reply)?;
        let shared = secret.diffie_hellman(&their_public);
        let key = self.derive_key(&reply.sender_id, shared.as_bytes());
        Ok(self.install(&reply.sender_id, digest, key, now, true))
    }

    pub fn abort_attest(&self, peer: &PeerId) {
        self.handshakes.lock().remove(peer);
    }

    // --- sealed channel ---

    /// Authenticates an incoming sealed envelope and checks its nonce.
    fn admit(&self, env: &Envelope, now: Millis) -> Result<Body> {
        let ring = self.keys.read().get(&env.sender_id).cloned().unwrap_or_default();
        if ring.is_empty() {
            self.counters.unattested.fetch_add(1, Ordering::Relaxed);
            return Err(Error::Unattested(env.sender_id.to_string()));
        }
        let Some((i, body)) = ring
            .iter()
            .enumerate()
            .find_map(|(i, (k, _))| wire::open(env, Some(k)).ok().map(|b| (i, b)))
        else {
            self.counters.undecryptable.fetch_add(1, Ordering::Relaxed);
            return Err(Error::Decrypt(env.sender_id.to_string()));
        };
        if !self
            .replay
            .lock()
            .admit(&env.sender_id, env.nonce, now, self.replay_window)
        {
            self.counters.replayed.fetch_add(1, Ordering::Relaxed);
            return Err(Error::Replay(env.sender_id.to_string()));
        }
        if !ring[i].1 {
            let mut keys = self.keys.write();
            if let Some(entry) = keys
                .get_mut(&env.sender_id)
                .and_then(|r| r.iter_mut().find(|(k, _)| *k == ring[i].0))
            {
                entry.1 = true;
            }
        }
        Ok(body)
    }

    fn seal_to(&self, peer: &PeerId, msg_type: MsgType, body: &Body) -> Result<Envelope> {
        let key = self
            .session_key(peer)
            .ok_or_else(|| Error::Unattested(peer.to_string()))?;
        wire::seal(self.nonce(), msg_type, &self.id, body, Some(&key), self.bucket)
    }

    /// Seals a shuffle offer for `peer`.
    pub fn seal_shuffle(&self, peer: &PeerId, reply: bool, entries: Vec<PeerDescriptor>) -> Result<Envelope> {
        let ty = if reply { MsgType::ShuffleReply } else { MsgType::Shuffle };
        self.seal_to(peer, ty, &Body::Shuffle { entries })
    }

    /// Opens a shuffle message. Query traffic cannot be opened through here.
    pub fn open_shuffle(&self, env: &Envelope, now: Millis) -> Result<Vec<PeerDescriptor>> {
        if !matches!(env.msg_type, MsgType::Shuffle | MsgType::ShuffleReply) {
            return Err(Error::UnexpectedMessage(env.msg_type));
        }
        match self.admit(env, now)? {
            Body::Shuffle { entries } => Ok(entries),
            _ => Err(Error::Decode("expected shuffle entries".into())),
        }
    }

    // --- fake query table ---

    pub fn table_len(&self) -> usize {
        self.table.len()
    }

    pub fn seed_table<'a>(&self, lines: impl IntoIterator<Item = &'a str>) -> SeedStats {
        self.table.seed_lines(lines)
    }

    pub fn seed_table_from(&self, path: &std::path::Path) -> Result<SeedStats> {
        self.table.bootstrap_seed(path)
    }

    // --- client side ---

    /// Picks `k` fakes and assigns the real query and the fakes to distinct
    /// relays. `relays` must hold at least one peer; the real query goes to a
    /// random one of them and at most `relays.len() - 1` fakes are attached.
    pub fn dispatch(
        &self,
        query_id: QueryId,
        query: &str,
        k: usize,
        relays: Vec<PeerDescriptor>,
        now: Millis,
        deadline: Millis,
    ) -> Result<Dispatch> {
        if relays.is_empty() {
            return Err(Error::NoEligibleRelay);
        }
        let usable = k.min(relays.len() - 1);
        let draw = {
            let mut rng = self.rng.lock();
            self.table.sample_fakes(usable, query, &mut *rng)
        };
        let k_eff = draw.queries.len();
        let shortfall = k - k_eff;

        let mut relays = relays;
        let real_idx = self.rng.lock().gen_range(0..=k_eff);
        relays.truncate(k_eff + 1);
        let mut fakes = draw.queries.into_iter();

        let mut forwards = Vec::with_capacity(k_eff + 1);
        let mut tickets = HashMap::with_capacity(k_eff + 1);
        let mut real_ticket = 0;
        let mut fake_relays = BTreeSet::new();
        let mut real_relay = None;
        for (i, relay) in relays.into_iter().enumerate() {
            let ticket = self.rng.lock().next_u64();
            let text = if i == real_idx {
                real_ticket = ticket;
                real_relay = Some(relay.peer_id.clone());
                query.to_owned()
            } else {
                fake_relays.insert(relay.peer_id.clone());
                fakes.next().expect("one fake per non-real relay")
            };
            let env = self.seal_to(&relay.peer_id, MsgType::QueryForward, &Body::Query { ticket, query: text })?;
            tickets.insert(ticket, relay.peer_id.clone());
            forwards.push((relay, env));
        }
        let info = PendingQuery {
            query_id,
            real_relay: real_relay.expect("real relay assigned"),
            fake_relays,
            issued_at: now,
            deadline,
        };
        self.pending.lock().insert(
            query_id,
            PendingEntry {
                info,
                query: query.to_owned(),
                real_ticket,
                tickets,
            },
        );
        Ok(Dispatch {
            query_id,
            forwards,
            k: k_eff,
            shortfall,
        })
    }

    /// Re-sends the real query of `query_id` through `relay`.
    pub fn redirect_real(&self, query_id: QueryId, relay: &PeerDescriptor) -> Result<Envelope> {
        let mut pending = self.pending.lock();
        let entry = pending
            .get_mut(&query_id)
            .ok_or_else(|| Error::Decode(format!("no pending query {query_id}")))?;
        let ticket = self.rng.lock().next_u64();
        let env = self.seal_to(
            &relay.peer_id,
            MsgType::QueryForward,
            &Body::Query {
                ticket,
                query: entry.query.clone(),
            },
        )?;
        entry.tickets.remove(&entry.real_ticket);
        entry.tickets.insert(ticket, relay.peer_id.clone());
        entry.real_ticket = ticket;
        entry.info.real_relay = relay.peer_id.clone();
        Ok(env)
    }

    /// Identity of the relay currently carrying the real query.
    pub fn real_relay(&self, query_id: QueryId) -> Option<PeerId> {
        self.pending.lock().get(&query_id).map(|e| e.info.real_relay.clone())
    }

    pub fn pending(&self, query_id: QueryId) -> Option<PendingQuery> {
        self.pending.lock().get(&query_id).map(|e| e.info.clone())
    }

    pub fn pending_count(&self) -> usize {
        self.pending.lock().len()
    }

    /// Forgets a query once it is answered or abandoned.
    pub fn finish(&self, query_id: QueryId) {
        self.pending.lock().remove(&query_id);
    }

    /// Handles a QueryResponse: real results are handed to the host, answers
    /// to fake queries are dropped here.
    pub fn accept_response(&self, env: &Envelope, now: Millis) -> Result<ResponseOutcome> {
        if env.msg_type != MsgType::QueryResponse {
            return Err(Error::UnexpectedMessage(env.msg_type));
        }
        let body = self.admit(env, now)?;
        let (ticket, outcome) = match body {
            Body::Results { ticket, results } => (ticket, Ok(results)),
            Body::Failure { ticket, reason } => (ticket, Err(reason)),
            _ => return Err(Error::Decode("expected query results".into())),
        };
        let mut pending = self.pending.lock();
        let Some((&query_id, entry)) = pending
            .iter_mut()
            .find(|(_, e)| e.tickets.get(&ticket) == Some(&env.sender_id))
        else {
            return Ok(ResponseOutcome::Unknown);
        };
        entry.tickets.remove(&ticket);
        if ticket != entry.real_ticket {
            return Ok(ResponseOutcome::DroppedFake { query_id });
        }
        Ok(match outcome {
            Ok(results) => ResponseOutcome::Real { query_id, results },
            Err(reason) => ResponseOutcome::RealFailed { query_id, reason },
        })
    }

    // --- relay side ---

    /// Serves a forwarded query: records it as a future fake, queries the
    /// engine under this relay's identity and seals the answer back. Real
    /// and fake queries are indistinguishable here and handled the same way.
    pub fn handle_forward(&self, env: &Envelope, backend: &dyn SearchBackend, now: Millis) -> Result<Envelope> {
        if env.msg_type != MsgType::QueryForward {
            return Err(Error::UnexpectedMessage(env.msg_type));
        }
        let (ticket, query) = match self.admit(env, now)? {
            Body::Query { ticket, query } => (ticket, query),
            _ => return Err(Error::Decode("expected a query".into())),
        };
        let body = match self.table.record(&query) {
            Err(e) => Body::Failure {
                ticket,
                reason: e.to_string(),
            },
            Ok(()) => match backend.search(&self.id, &query, now) {
                Ok(results) => Body::Results { ticket, results },
                Err(e) => Body::Failure {
                    ticket,
                    reason: e.to_string(),
                },
            },
        };
        self.seal_to(&env.sender_id, MsgType::QueryResponse, &body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::StubBackend;

    fn core(id: &str) -> SealedCore {
        SealedCore::new(PeerId::from(id), CoreSettings::default(), id.len() as u64 * 31 + 7)
    }

    fn pair(a: &SealedCore, b: &SealedCore) {
        let hello = a.begin_attest(b.id());
        let reply = b.answer_attest(&hello, 0).unwrap();
        a.complete_attest(&reply, 0).unwrap();
    }

    fn relay(id: &str) -> PeerDescriptor {
        let mut p = PeerDescriptor::at(id, 0);
        p.attested = true;
        p
    }

    #[test]
    fn handshake_installs_matching_keys() {
        let a = core("a");
        let b = core("bb");
        pair(&a, &b);
        let ka = a.attestation(b.id()).unwrap();
        let kb = b.attestation(a.id()).unwrap();
        assert_eq!(ka.session_key, kb.session_key);
        assert_eq!(ka.quote_hash, build_digest());
    }

    #[test]
    fn crossed_handshakes_still_talk() {
        let a = core("a");
        let b = core("bb");
        let from_a = a.begin_attest(b.id());
        let from_b = b.begin_attest(a.id());
        let to_a = b.answer_attest(&from_a, 0).unwrap();
        let to_b = a.answer_attest(&from_b, 0).unwrap();
        a.complete_attest(&to_a, 0).unwrap();
        b.complete_attest(&to_b, 0).unwrap();
        assert_ne!(a.attestation(b.id()).unwrap().session_key, b.attestation(a.id()).unwrap().session_key);

        let stub = StubBackend::new(vec![]);
        let d = a.dispatch(QueryId(1), "crossed", 0, vec![relay("bb")], 0, 1_000).unwrap();
        let reply = b.handle_forward(&d.forwards[0].1, &stub, 0).unwrap();
        assert!(matches!(a.accept_response(&reply, 0).unwrap(), ResponseOutcome::Real { .. }));
        let d = b.dispatch(QueryId(2), "crossed back", 0, vec![relay("a")], 0, 1_000).unwrap();
        assert!(a.handle_forward(&d.forwards[0].1, &stub, 0).is_ok());
    }

    #[test]
    fn rogue_digest_rejected_both_ways() {
        let good = core("good");
        let rogue = SealedCore::new(
            "rogue".into(),
            CoreSettings {
                build_digest: digest_of("patched build"),
                allow_list: [build_digest(), digest_of("patched build")].into(),
                ..Default::default()
            },
            1,
        );
        // rogue initiates: rejected by the honest responder
        let hello = rogue.begin_attest(good.id());
        assert!(matches!(
            good.answer_attest(&hello, 0),
            Err(Error::AttestationRejected { .. })
        ));
        // honest initiator: the rogue answers but its quote is refused
        let hello = good.begin_attest(rogue.id());
        let reply = rogue.answer_attest(&hello, 0).unwrap();
        assert!(good.complete_attest(&reply, 0).is_err());
        assert!(!good.has_session(rogue.id()));
    }

    #[test]
    fn forward_round_trip_and_replay() {
        let client = core("client");
        let r = core("relay");
        pair(&client, &r);
        r.seed_table(["seed one"]);
        client.seed_table(["unrelated fake"]);
        let backend = StubBackend::new(vec![]);
        let d = client
            .dispatch(QueryId(1), "my query", 0, vec![relay("relay")], 0, 5_000)
            .unwrap();
        assert_eq!(d.forwards.len(), 1);
        let env = &d.forwards[0].1;
        let resp = r.handle_forward(env, &backend, 1).unwrap();
        assert_eq!(r.table_len(), 2);
        assert_eq!(backend.calls(), 1);
        assert!(matches!(r.handle_forward(env, &backend, 2), Err(Error::Replay(_))));
        assert_eq!(backend.calls(), 1);
        assert_eq!(r.drop_counters().replayed, 1);
        match client.accept_response(&resp, 3).unwrap() {
            ResponseOutcome::Real { query_id, results } => {
                assert_eq!(query_id, QueryId(1));
                assert!(results.is_empty());
            }
            other => panic!("{other:?}"),
        }
        // the same response again is a replay
        assert!(client.accept_response(&resp, 4).is_err());
    }

    #[test]
    fn unattested_sender_dropped() {
        let client = core("client");
        let r = core("relay");
        let stranger = core("stranger");
        pair(&client, &r);
        pair(&stranger, &client);
        client.seed_table(["x"]);
        let d = client.dispatch(QueryId(9), "hello", 0, vec![relay("relay")], 0, 1).unwrap();
        // relay has never attested "stranger", and an envelope relabelled
        // with a foreign sender does not authenticate
        let mut forged = d.forwards[0].1.clone();
        forged.sender_id = "stranger".into();
        let backend = StubBackend::default();
        assert!(matches!(r.handle_forward(&forged, &backend, 0), Err(Error::Unattested(_))));
        assert_eq!(r.drop_counters().unattested, 1);
        assert_eq!(backend.calls(), 0);
    }

    #[test]
    fn fakes_dropped_real_kept() {
        let client = core("client");
        let relays: Vec<SealedCore> = (0..4).map(|i| core(&format!("r{i}"))).collect();
        for r in &relays {
            pair(&client, r);
        }
        client.seed_table(["fake a", "fake b", "fake c", "fake d"]);
        let descs: Vec<_> = relays.iter().map(|r| relay(r.id().as_str())).collect();
        let d = client.dispatch(QueryId(5), "the real one", 3, descs, 0, 10).unwrap();
        assert_eq!((d.k, d.shortfall, d.forwards.len()), (3, 0, 4));
        let pending = client.pending(QueryId(5)).unwrap();
        assert_eq!(pending.fake_relays.len(), 3);
        assert!(!pending.fake_relays.contains(&pending.real_relay));

        let backend = StubBackend::new(vec![SearchResult {
            url: "u".into(),
            title: "t".into(),
            rank: 1,
        }]);
        let mut real = 0;
        let mut dropped = 0;
        for (desc, env) in &d.forwards {
            let r = relays.iter().find(|r| r.id() == &desc.peer_id).unwrap();
            let resp = r.handle_forward(env, &backend, 1).unwrap();
            match client.accept_response(&resp, 2).unwrap() {
                ResponseOutcome::Real { .. } => real += 1,
                ResponseOutcome::DroppedFake { .. } => dropped += 1,
                other => panic!("{other:?}"),
            }
        }
        assert_eq!((real, dropped), (1, 3));
    }

    #[test]
    fn dispatch_limited_by_relays_and_fakes() {
        let client = core("client");
        let relays: Vec<SealedCore> = (0..3).map(|i| core(&format!("r{i}"))).collect();
        for r in &relays {
            pair(&client, r);
        }
        client.seed_table(["only fake"]);
        let descs: Vec<_> = relays.iter().map(|r| relay(r.id().as_str())).collect();
        let d = client.dispatch(QueryId(1), "q", 5, descs, 0, 1).unwrap();
        assert_eq!(d.k, 1);
        assert_eq!(d.shortfall, 4);
        assert_eq!(d.forwards.len(), 2);
    }

    #[test]
    fn shuffle_channel_refuses_queries() {
        let a = core("a");
        let b = core("bb");
        pair(&a, &b);
        a.seed_table(["x"]);
        let env = a.seal_shuffle(b.id(), false, vec![PeerDescriptor::at("z", 3)]).unwrap();
        assert_eq!(b.open_shuffle(&env, 0).unwrap()[0].peer_id, PeerId::from("z"));
        let d = a.dispatch(QueryId(1), "secret", 0, vec![relay("bb")], 0, 1).unwrap();
        assert!(b.open_shuffle(&d.forwards[0].1, 0).is_err());
    }
}
