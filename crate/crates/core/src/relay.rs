//! Host side of a node: owns the local user's profile and sensitivity
//! settings, the peer view and the sealed core, and runs the query flow:
//!
//! 1. assess the query and decide `k`;
//! 2. draw `k + 1` distinct relays from the view;
//! 3. let the sealed core pick `k` fakes and seal one query per relay;
//! 4. send everything, keep the real relay's answer, drop the rest.
//!
//! The same node also serves as a relay for others through
//! [`RelayNode::handle_envelope`]. Transports are pluggable: the in-memory
//! [`MemoryNetwork`] below, TCP in the node runtime, or a discrete-event
//! simulator driving [`RelayNode::prepare_query`] and
//! [`RelayNode::accept_response`] directly.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::{Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::backend::SearchBackend;
use crate::enclave::{AttestationRecord, CoreSettings, Dispatch, DropCounters, ResponseOutcome, SealedCore};
use crate::error::{Error, Result};
use crate::model::{Millis, ProtectionDecision, QueryId, QueryRecord, SearchResult, SensitiveTopicDictionary, UserId, UserProfile};
use crate::peers::{PartialView, PeerDescriptor, PeerId, DEFAULT_VIEW_SIZE};
use crate::sensitivity::{decide_k, SensitivityConfig};
use crate::wire::{Envelope, MsgType};

pub const DEFAULT_DEADLINE_MS: Millis = 5_000;
pub const REAL_PATH_RETRIES: usize = 1;
const DECISION_LOG_LEN: usize = 100;

pub trait Clock: Send + Sync {
    fn now(&self) -> Millis;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Millis {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as Millis)
            .unwrap_or(0)
    }
}

/// Clock advanced by hand, for tests and simulations.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start: Millis) -> Self {
        ManualClock(AtomicU64::new(start))
    }

    pub fn set(&self, t: Millis) {
        self.0.store(t, Ordering::SeqCst);
    }

    pub fn advance(&self, dt: Millis) {
        self.0.fetch_add(dt, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Millis {
        self.0.load(Ordering::SeqCst)
    }
}

/// Request/response delivery of one envelope to a peer.
pub trait Transport: Send + Sync {
    fn exchange(&self, to: &PeerDescriptor, env: Envelope, timeout_ms: Millis) -> Result<Envelope>;
}

#[derive(Debug, Clone)]
pub struct NodeSettings {
    pub sensitivity: SensitivityConfig,
    pub view_size: usize,
    pub deadline_ms: Millis,
    pub core: CoreSettings,
    /// Send exactly this many fakes instead of the adaptive choice.
    pub fixed_k: Option<usize>,
}

impl Default for NodeSettings {
    fn default() -> Self {
        NodeSettings {
            sensitivity: SensitivityConfig::default(),
            view_size: DEFAULT_VIEW_SIZE,
            deadline_ms: DEFAULT_DEADLINE_MS,
            core: CoreSettings::default(),
            fixed_k: None,
        }
    }
}

/// A decision as surfaced to the local user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub query: String,
    pub k: usize,
    pub semantic_sensitive: bool,
    pub linkability: f64,
    pub matched_topics: BTreeSet<String>,
    /// Fakes actually sent; lower than `k` when protection was degraded.
    pub k_effective: usize,
    pub degraded: bool,
}

impl DecisionRecord {
    fn new(query: &str, d: &ProtectionDecision, k_effective: usize) -> Self {
        DecisionRecord {
            query: query.to_owned(),
            k: d.k,
            semantic_sensitive: d.semantic_sensitive,
            linkability: d.linkability,
            matched_topics: d.matched_topics.clone(),
            k_effective,
            degraded: k_effective < d.k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub results: Vec<SearchResult>,
    pub decision: DecisionRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStatus {
    pub view_size: usize,
    pub table_size: usize,
    pub pending: usize,
    pub degraded_count: u64,
    pub drops: DropCounters,
}

/// A query made ready for sending.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub decision: ProtectionDecision,
    pub dispatch: Dispatch,
    pub query: QueryRecord,
}

pub struct RelayNode {
    me: PeerDescriptor,
    settings: RwLock<NodeSettings>,
    dictionaries: RwLock<Vec<SensitiveTopicDictionary>>,
    profile: RwLock<UserProfile>,
    core: SealedCore,
    view: Mutex<PartialView>,
    backend: Arc<dyn SearchBackend>,
    clock: Arc<dyn Clock>,
    rng: Mutex<ChaCha20Rng>,
    decisions: Mutex<VecDeque<DecisionRecord>>,
    degraded: AtomicU64,
    next_query: AtomicU64,
    /// One handshake at a time, so concurrent callers never open two with
    /// the same peer.
    attesting: Mutex<()>,
}

impl std::fmt::Debug for RelayNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RelayNode").field("id", &self.me.peer_id).finish_non_exhaustive()
    }
}

impl RelayNode {
    pub fn new(
        me: PeerDescriptor,
        settings: NodeSettings,
        backend: Arc<dyn SearchBackend>,
        clock: Arc<dyn Clock>,
        seed: u64,
    ) -> Self {
        let core = SealedCore::new(me.peer_id.clone(), settings.core.clone(), seed ^ 0x5ea1_c0de);
        let view = PartialView::new(me.peer_id.clone(), settings.view_size);
        RelayNode {
            profile: RwLock::new(UserProfile::new(UserId(me.peer_id.0.clone()))),
            me,
            settings: RwLock::new(settings),
            dictionaries: RwLock::new(Vec::new()),
            core,
            view: Mutex::new(view),
            backend,
            clock,
            rng: Mutex::new(ChaCha20Rng::seed_from_u64(seed)),
            decisions: Mutex::new(VecDeque::new()),
            degraded: AtomicU64::new(0),
            next_query: AtomicU64::new(1),
            attesting: Mutex::new(()),
        }
    }

    pub fn id(&self) -> &PeerId {
        &self.me.peer_id
    }

    pub fn descriptor(&self) -> &PeerDescriptor {
        &self.me
    }

    pub fn core(&self) -> &SealedCore {
        &self.core
    }

    pub fn now(&self) -> Millis {
        self.clock.now()
    }

    pub fn settings(&self) -> NodeSettings {
        self.settings.read().clone()
    }

    pub fn sensitivity(&self) -> SensitivityConfig {
        self.settings.read().sensitivity.clone()
    }

    pub fn set_enabled_topics(&self, topics: BTreeSet<String>) {
        self.settings.write().sensitivity.enabled_topics = topics;
    }

    pub fn set_dictionaries(&self, dicts: Vec<SensitiveTopicDictionary>) {
        *self.dictionaries.write() = dicts;
    }

    pub fn available_topics(&self) -> Vec<String> {
        self.dictionaries.read().iter().map(|d| d.topic.clone()).collect()
    }

    pub fn set_profile(&self, profile: UserProfile) {
        *self.profile.write() = profile;
    }

    pub fn profile_len(&self) -> usize {
        self.profile.read().len()
    }

    pub fn view_snapshot(&self) -> PartialView {
        self.view.lock().clone()
    }

    /// Fills the view from a registry of addresses.
    pub fn bootstrap_view(&self, registry: &[String]) -> Result<()> {
        let size = self.settings.read().view_size;
        let now = self.now();
        let view = PartialView::bootstrap(self.me.peer_id.clone(), registry, size, now, &mut *self.rng.lock())?;
        *self.view.lock() = view;
        Ok(())
    }

    pub fn add_peer(&self, peer: PeerDescriptor) {
        self.view.lock().insert(peer);
    }

    pub fn is_bootstrapped(&self) -> bool {
        !self.view.lock().is_empty() && self.core.table_len() > 0
    }

    pub fn status(&self) -> NodeStatus {
        NodeStatus {
            view_size: self.view.lock().len(),
            table_size: self.core.table_len(),
            pending: self.core.pending_count(),
            degraded_count: self.degraded.load(Ordering::Relaxed),
            drops: self.core.drop_counters(),
        }
    }

    /// Most recent decisions, newest last.
    pub fn recent_decisions(&self, n: usize) -> Vec<DecisionRecord> {
        let log = self.decisions.lock();
        log.iter().skip(log.len().saturating_sub(n)).cloned().collect()
    }

    fn log_decision(&self, record: DecisionRecord) {
        if record.degraded {
            self.degraded.fetch_add(1, Ordering::Relaxed);
        }
        let mut log = self.decisions.lock();
        if log.len() == DECISION_LOG_LEN {
            log.pop_front();
        }
        log.push_back(record);
    }

    // --- serving peers ---

    /// Answers one envelope from a peer. Errors mean the envelope is dropped
    /// without reply.
    pub fn handle_envelope(&self, env: &Envelope) -> Result<Envelope> {
        let now = self.now();
        match env.msg_type {
            MsgType::QueryForward => self.core.handle_forward(env, self.backend.as_ref(), now),
            MsgType::Attest => {
                let reply = self.core.answer_attest(env, now)?;
                let mut view = self.view.lock();
                if !view.contains(&env.sender_id) && view.len() < view.view_size() {
                    view.insert(PeerDescriptor::at(env.sender_id.as_str(), now));
                }
                // usable as a relay once the initiator confirms the key
                Ok(reply)
            }
            MsgType::Shuffle => {
                let entries = self.core.open_shuffle(env, now)?;
                let reply = {
                    let mut rng = self.rng.lock();
                    self.view.lock().answer_shuffle(&self.me, entries, now, &mut *rng)
                };
                self.refresh_attested();
                self.core.seal_shuffle(&env.sender_id, true, reply)
            }
            other => Err(Error::UnexpectedMessage(other)),
        }
    }

    /// Marks view entries we already hold a session with as attested.
    fn refresh_attested(&self) {
        let now = self.now();
        let mut view = self.view.lock();
        let ids: Vec<PeerId> = view.peers().filter(|p| !p.attested).map(|p| p.peer_id.clone()).collect();
        for id in ids {
            if self.core.has_session(&id) {
                view.mark_attested(&id, true, now);
            }
        }
    }

    // --- talking to peers ---

    /// Runs the attestation handshake with `peer`.
    pub fn attest_peer(&self, peer: &PeerDescriptor, transport: &dyn Transport) -> Result<AttestationRecord> {
        let _one = self.attesting.lock();
        self.attest_locked(peer, transport)
    }

    fn attest_locked(&self, peer: &PeerDescriptor, transport: &dyn Transport) -> Result<AttestationRecord> {
        let hello = self.core.begin_attest(&peer.peer_id);
        let timeout = self.settings.read().deadline_ms;
        let result = transport
            .exchange(peer, hello, timeout)
            .and_then(|reply| self.core.complete_attest(&reply, self.now()));
        let now = self.now();
        let mut view = self.view.lock();
        match &result {
            Ok(_) => view.mark_attested(&peer.peer_id, true, now),
            Err(e) => {
                self.core.abort_attest(&peer.peer_id);
                if e.is_unresponsive() {
                    view.blacklist(&peer.peer_id, now);
                } else {
                    view.mark_attested(&peer.peer_id, false, now);
                    view.remove(&peer.peer_id);
                }
            }
        }
        result
    }

    /// Attests every view member not yet attested. Returns how many peers
    /// are now eligible relays.
    pub fn ensure_attested(&self, transport: &dyn Transport) -> usize {
        let _one = self.attesting.lock();
        self.refresh_attested();
        let todo = self.view.lock().unattested(self.now());
        for peer in todo {
            // a handshake initiated by the peer may have landed meanwhile
            if !self.core.has_session(&peer.peer_id) {
                let _ = self.attest_locked(&peer, transport);
            }
        }
        self.refresh_attested();
        self.view.lock().eligible_count(self.now())
    }

    /// One round of view shuffling with a random peer.
    pub fn shuffle_once(&self, transport: &dyn Transport) -> Result<()> {
        let now = self.now();
        let partner = self
            .view
            .lock()
            .random_peer(now, &mut *self.rng.lock())
            .ok_or(Error::NoPeers)?;
        if !self.core.has_session(&partner.peer_id) {
            let _one = self.attesting.lock();
            if !self.core.has_session(&partner.peer_id) {
                self.attest_locked(&partner, transport)?;
            }
        }
        let timeout = self.settings.read().deadline_ms;
        let mut view = self.view.lock().clone();
        let mut rng = ChaCha20Rng::seed_from_u64(self.rng.lock().gen());
        let result = view.shuffle_exchange(&self.me, &partner.peer_id, now, &mut rng, |offer| {
            let env = self.core.seal_shuffle(&partner.peer_id, false, offer)?;
            let reply = transport.exchange(&partner, env, timeout)?;
            if reply.msg_type != MsgType::ShuffleReply {
                return Err(Error::UnexpectedMessage(reply.msg_type));
            }
            self.core.open_shuffle(&reply, self.now())
        });
        *self.view.lock() = view;
        self.refresh_attested();
        result
    }

    // --- local queries ---

    /// Assesses `raw` and seals it with its fakes, ready for sending.
    pub fn prepare_query(&self, raw: &str) -> Result<Prepared> {
        if self.view.lock().is_empty() {
            return Err(Error::NotBootstrapped("empty peer view"));
        }
        self.prepare_with(raw, |n, now, rng, view| Ok(view.sample_relays(n, now, rng)?.relays))
    }

    /// Like [`prepare_query`](Self::prepare_query) but every envelope goes
    /// through `relay`, the way a single-proxy design would route them.
    pub fn prepare_query_through(&self, raw: &str, relay: &PeerDescriptor) -> Result<Prepared> {
        self.prepare_with(raw, |n, _, _, _| Ok(vec![relay.clone(); n]))
    }

    fn prepare_with<F>(&self, raw: &str, pick: F) -> Result<Prepared>
    where
        F: FnOnce(usize, Millis, &mut ChaCha20Rng, &PartialView) -> Result<Vec<PeerDescriptor>>,
    {
        if self.core.table_len() == 0 {
            return Err(Error::NotBootstrapped("empty fake query table"));
        }
        let now = self.now();
        let query_id = QueryId(self.next_query.fetch_add(1, Ordering::Relaxed));
        let query = QueryRecord::real(query_id.0, raw, now);
        if query.terms.is_empty() {
            return Err(Error::EmptyQuery);
        }
        let settings = self.settings.read().clone();
        let mut decision = {
            let profile = self.profile.read();
            let dicts = self.dictionaries.read();
            decide_k(&query, &profile, &dicts, &settings.sensitivity)
        };
        if let Some(k) = settings.fixed_k {
            decision.k = k;
        }
        let relays = pick(decision.k + 1, now, &mut *self.rng.lock(), &*self.view.lock())?;
        let dispatch = self.core.dispatch(
            query_id,
            raw,
            decision.k,
            relays,
            now,
            now + settings.deadline_ms,
        )?;
        Ok(Prepared {
            decision,
            dispatch,
            query,
        })
    }

    /// Feeds one QueryResponse to the sealed core.
    pub fn accept_response(&self, env: &Envelope) -> Result<ResponseOutcome> {
        let outcome = self.core.accept_response(env, self.now());
        if outcome.is_ok() {
            self.view.lock().mark_alive(&env.sender_id, self.now());
        }
        outcome
    }

    /// Records a finished query: the profile learns it, the decision is
    /// logged and the pending entry is dropped.
    pub fn complete_query(&self, prepared: &Prepared, succeeded: bool) -> DecisionRecord {
        self.core.finish(prepared.dispatch.query_id);
        let record = DecisionRecord::new(&prepared.query.raw_text, &prepared.decision, prepared.dispatch.k);
        if succeeded {
            self.profile.write().push(prepared.query.clone());
        }
        self.log_decision(record.clone());
        record
    }

    pub fn mark_unresponsive(&self, peer: &PeerId) {
        self.view.lock().blacklist(peer, self.now());
    }

    /// Picks a relay for a retry, avoiding every peer in `used`.
    pub fn fresh_relay(&self, used: &BTreeSet<PeerId>) -> Option<PeerDescriptor> {
        let now = self.now();
        let view = self.view.lock();
        let candidates: Vec<&PeerDescriptor> = view
            .peers()
            .filter(|p| p.is_eligible(now) && !used.contains(&p.peer_id))
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let i = self.rng.lock().gen_range(0..candidates.len());
        Some(candidates[i].clone())
    }

    /// Runs the whole protected query flow over `transport`.
    pub fn submit_query(&self, raw: &str, transport: &dyn Transport) -> Result<SearchOutcome> {
        if !self.is_bootstrapped() {
            return Err(Error::NotBootstrapped("view or fake table empty"));
        }
        self.ensure_attested(transport);
        let prepared = self.prepare_query(raw)?;
        let query_id = prepared.dispatch.query_id;
        let timeout = self.settings.read().deadline_ms;

        let replies: Vec<(PeerId, Result<Envelope>)> = std::thread::scope(|s| {
            let handles: Vec<_> = prepared
                .dispatch
                .forwards
                .iter()
                .map(|(peer, env)| {
                    let env = env.clone();
                    s.spawn(move || (peer.peer_id.clone(), transport.exchange(peer, env, timeout)))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("sender thread")).collect()
        });

        let mut used: BTreeSet<PeerId> = prepared.dispatch.forwards.iter().map(|(p, _)| p.peer_id.clone()).collect();
        let mut real: Option<Result<Vec<SearchResult>>> = None;
        for (peer, reply) in replies {
            match self.classify(&peer, reply, query_id) {
                Some(r) => real = Some(r),
                None => continue,
            }
        }
        let mut real = real.unwrap_or_else(|| Err(Error::Timeout("real relay".into())));

        for _ in 0..REAL_PATH_RETRIES {
            let Err(first) = &real else { break };
            log::debug!("real path failed ({first}), retrying");
            let Some(relay) = self.fresh_relay(&used) else { break };
            used.insert(relay.peer_id.clone());
            let env = self.core.redirect_real(query_id, &relay)?;
            let reply = transport.exchange(&relay, env, timeout);
            real = self
                .classify(&relay.peer_id, reply, query_id)
                .unwrap_or_else(|| Err(Error::Timeout(relay.peer_id.to_string())));
        }

        match real {
            Ok(results) => {
                let decision = self.complete_query(&prepared, true);
                Ok(SearchOutcome { results, decision })
            }
            Err(e) => {
                self.complete_query(&prepared, false);
                Err(Error::RealPathFailed(Box::new(e)))
            }
        }
    }

    /// Interprets one reply. `Some` only for the real path.
    fn classify(&self, peer: &PeerId, reply: Result<Envelope>, query_id: QueryId) -> Option<Result<Vec<SearchResult>>> {
        let is_real = self.core.real_relay(query_id).as_ref() == Some(peer);
        match reply {
            Err(e) => {
                if e.is_unresponsive() {
                    self.mark_unresponsive(peer);
                }
                is_real.then_some(Err(e))
            }
            Ok(env) => match self.accept_response(&env) {
                Ok(ResponseOutcome::Real { results, .. }) => Some(Ok(results)),
                Ok(ResponseOutcome::RealFailed { reason, .. }) => Some(Err(Error::Backend(reason))),
                Ok(ResponseOutcome::DroppedFake { .. }) | Ok(ResponseOutcome::Unknown) => None,
                Err(e) => is_real.then_some(Err(e)),
            },
        }
    }
}

/// In-process network delivering envelopes by direct calls. Unreachable
/// nodes and dropped envelopes both surface as timeouts, as they would on a
/// real network. Every frame crossing the network can be captured.
#[derive(Default)]
pub struct MemoryNetwork {
    nodes: RwLock<BTreeMap<PeerId, Arc<RelayNode>>>,
    down: RwLock<BTreeSet<PeerId>>,
    capture: Mutex<Option<Vec<Vec<u8>>>>,
    delivered: AtomicU64,
}

impl MemoryNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, node: Arc<RelayNode>) {
        self.nodes.write().insert(node.id().clone(), node);
    }

    pub fn node(&self, id: &PeerId) -> Option<Arc<RelayNode>> {
        self.nodes.read().get(id).cloned()
    }

    pub fn nodes(&self) -> Vec<Arc<RelayNode>> {
        self.nodes.read().values().cloned().collect()
    }

    pub fn set_down(&self, id: &PeerId, down: bool) {
        let mut set = self.down.write();
        if down {
            set.insert(id.clone());
        } else {
            set.remove(id);
        }
    }

    pub fn start_capture(&self) {
        *self.capture.lock() = Some(Vec::new());
    }

    pub fn captured(&self) -> Vec<Vec<u8>> {
        self.capture.lock().clone().unwrap_or_default()
    }

    pub fn delivered(&self) -> u64 {
        self.delivered.load(Ordering::Relaxed)
    }
}

impl Transport for MemoryNetwork {
    fn exchange(&self, to: &PeerDescriptor, env: Envelope, _timeout_ms: Millis) -> Result<Envelope> {
        let frame = env.encode();
        if let Some(c) = self.capture.lock().as_mut() {
            c.push(frame.clone());
        }
        if self.down.read().contains(&to.peer_id) {
            return Err(Error::Timeout(to.peer_id.to_string()));
        }
        let node = self
            .node(&to.peer_id)
            .ok_or_else(|| Error::Transport {
                peer: to.peer_id.to_string(),
                reason: "unknown address".into(),
            })?;
        self.delivered.fetch_add(1, Ordering::Relaxed);
        let received = Envelope::decode(&frame)?;
        let reply = node
            .handle_envelope(&received)
            .map_err(|_| Error::Timeout(to.peer_id.to_string()))?;
        let reply_frame = reply.encode();
        if let Some(c) = self.capture.lock().as_mut() {
            c.push(reply_frame.clone());
        }
        Envelope::decode(&reply_frame)
    }
}
