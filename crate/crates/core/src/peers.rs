//! Random peer sampling.
//!
//! Each node keeps a small partial view of the overlay which it periodically
//! shuffles with a random member: both sides send a random half of their
//! view plus their own descriptor, merge what they receive and truncate back
//! to `view_size` uniformly at random. Relays for a query are drawn from the
//! view without replacement.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Millis;

pub const DEFAULT_VIEW_SIZE: usize = 20;
pub const DEFAULT_SHUFFLE_PERIOD_MS: Millis = 10_000;
pub const BLACKLIST_BASE_MS: Millis = 60_000;
pub const BLACKLIST_MAX_MS: Millis = 3_600_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PeerId(pub String);

impl PeerId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PeerId {
    fn from(s: &str) -> Self {
        PeerId(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerDescriptor {
    pub peer_id: PeerId,
    /// `host:port`
    pub address: String,
    pub attested: bool,
    pub last_seen: Millis,
    pub blacklisted_until: Option<Millis>,
    /// Consecutive unresponsive episodes; drives the backoff.
    #[serde(default)]
    pub strikes: u32,
}

impl PeerDescriptor {
    pub fn new(peer_id: PeerId, address: impl Into<String>, last_seen: Millis) -> Self {
        PeerDescriptor {
            peer_id,
            address: address.into(),
            attested: false,
            last_seen,
            blacklisted_until: None,
            strikes: 0,
        }
    }

    /// A descriptor whose identity is its address.
    pub fn at(address: &str, last_seen: Millis) -> Self {
        Self::new(PeerId::from(address), address, last_seen)
    }

    pub fn is_blacklisted(&self, now: Millis) -> bool {
        self.blacklisted_until.is_some_and(|until| now < until)
    }

    pub fn is_eligible(&self, now: Millis) -> bool {
        self.attested && !self.is_blacklisted(now)
    }

    /// The form shared with other nodes: trust state is local knowledge.
    pub fn advertised(&self) -> PeerDescriptor {
        PeerDescriptor {
            attested: false,
            blacklisted_until: None,
            strikes: 0,
            ..self.clone()
        }
    }
}

/// Blacklist duration for the `strikes`-th offense: 60 s doubling up to 1 h.
pub fn blacklist_duration(strikes: u32) -> Millis {
    let shift = strikes.saturating_sub(1).min(16);
    (BLACKLIST_BASE_MS << shift).min(BLACKLIST_MAX_MS)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayDraw {
    pub relays: Vec<PeerDescriptor>,
    pub shortfall: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialView {
    self_id: PeerId,
    peers: BTreeMap<PeerId, PeerDescriptor>,
    view_size: usize,
}

impl PartialView {
    pub fn new(self_id: PeerId, view_size: usize) -> Self {
        assert!(view_size > 0, "view size must be positive");
        PartialView {
            self_id,
            peers: BTreeMap::new(),
            view_size,
        }
    }

    /// Fills a fresh view with up to `view_size` random registry entries.
    pub fn bootstrap<R: Rng + ?Sized>(
        self_id: PeerId,
        registry: &[String],
        view_size: usize,
        now: Millis,
        rng: &mut R,
    ) -> Result<Self> {
        let mut view = PartialView::new(self_id, view_size);
        let mut candidates: Vec<&String> = registry
            .iter()
            .filter(|a| a.as_str() != view.self_id.as_str())
            .collect();
        candidates.sort();
        candidates.dedup();
        if candidates.is_empty() {
            return Err(Error::NoPeers);
        }
        for addr in candidates.choose_multiple(rng, view_size) {
            view.insert(PeerDescriptor::at(addr, now));
        }
        Ok(view)
    }

    pub fn self_id(&self) -> &PeerId {
        &self.self_id
    }

    pub fn view_size(&self) -> usize {
        self.view_size
    }

    pub fn len(&self) -> usize {
        self.peers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peers.is_empty()
    }

    pub fn get(&self, id: &PeerId) -> Option<&PeerDescriptor> {
        self.peers.get(id)
    }

    pub fn peers(&self) -> impl Iterator<Item = &PeerDescriptor> {
        self.peers.values()
    }

    pub fn contains(&self, id: &PeerId) -> bool {
        self.peers.contains_key(id)
    }

    /// Adds or refreshes a peer. Ignores self. Does not truncate.
    pub fn insert(&mut self, peer: PeerDescriptor) {
        if peer.peer_id == self.self_id {
            return;
        }
        match self.peers.get_mut(&peer.peer_id) {
            Some(known) => {
                if peer.last_seen > known.last_seen {
                    known.last_seen = peer.last_seen;
                    known.address = peer.address;
                }
            }
            None => {
                self.peers.insert(peer.peer_id.clone(), peer);
            }
        }
    }

    pub fn remove(&mut self, id: &PeerId) -> Option<PeerDescriptor> {
        self.peers.remove(id)
    }

    pub fn mark_attested(&mut self, id: &PeerId, attested: bool, now: Millis) {
        if let Some(p) = self.peers.get_mut(id) {
            p.attested = attested;
            if attested {
                p.last_seen = p.last_seen.max(now);
            }
        }
    }

    /// Starts or extends the blacklist timer of an unresponsive peer.
    pub fn blacklist(&mut self, id: &PeerId, now: Millis) {
        if let Some(p) = self.peers.get_mut(id) {
            p.strikes = p.strikes.saturating_add(1);
            p.blacklisted_until = Some(now + blacklist_duration(p.strikes));
        }
    }

    pub fn mark_alive(&mut self, id: &PeerId, now: Millis) {
        if let Some(p) = self.peers.get_mut(id) {
            p.last_seen = p.last_seen.max(now);
            p.strikes = 0;
        }
    }

    /// Peers that still need an attestation handshake.
    pub fn unattested(&self, now: Millis) -> Vec<PeerDescriptor> {
        self.peers
            .values()
            .filter(|p| !p.attested && !p.is_blacklisted(now))
            .cloned()
            .collect()
    }

    pub fn eligible_count(&self, now: Millis) -> usize {
        self.peers.values().filter(|p| p.is_eligible(now)).count()
    }

    /// Draws `count` distinct eligible relays uniformly without replacement.
    pub fn sample_relays<R: Rng + ?Sized>(
        &self,
        count: usize,
        now: Millis,
        rng: &mut R,
    ) -> Result<RelayDraw> {
        let eligible: Vec<&PeerDescriptor> =
            self.peers.values().filter(|p| p.is_eligible(now)).collect();
        if eligible.is_empty() {
            return Err(Error::NoEligibleRelay);
        }
        let relays: Vec<PeerDescriptor> = eligible
            .choose_multiple(rng, count)
            .map(|p| (*p).clone())
            .collect();
        let shortfall = count.saturating_sub(relays.len());
        Ok(RelayDraw { relays, shortfall })
    }

    pub fn random_peer<R: Rng + ?Sized>(&self, now: Millis, rng: &mut R) -> Option<PeerDescriptor> {
        self.peers
            .values()
            .filter(|p| !p.is_blacklisted(now))
            .choose(rng)
            .cloned()
    }

    /// The half of the view offered in a shuffle, plus our own descriptor.
    pub fn shuffle_offer<R: Rng + ?Sized>(
        &self,
        me: &PeerDescriptor,
        now: Millis,
        rng: &mut R,
    ) -> Vec<PeerDescriptor> {
        let live: Vec<&PeerDescriptor> =
            self.peers.values().filter(|p| !p.is_blacklisted(now)).collect();
        let half = live.len().div_ceil(2);
        let mut offer: Vec<PeerDescriptor> = live
            .choose_multiple(rng, half)
            .map(|p| p.advertised())
            .collect();
        offer.push(PeerDescriptor {
            last_seen: now,
            ..me.advertised()
        });
        offer
    }

    /// Merges received descriptors, collapsing duplicates by id and keeping
    /// the freshest `last_seen`, then truncates uniformly at random.
    pub fn merge<R: Rng + ?Sized>(&mut self, received: Vec<PeerDescriptor>, rng: &mut R) {
        for p in received {
            self.insert(p.advertised());
        }
        self.truncate(rng);
    }

    fn truncate<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        if self.peers.len() <= self.view_size {
            return;
        }
        let ids: Vec<PeerId> = self.peers.keys().cloned().collect();
        let keep: std::collections::BTreeSet<PeerId> = ids
            .choose_multiple(rng, self.view_size)
            .cloned()
            .collect();
        self.peers.retain(|id, _| keep.contains(id));
    }

    /// Active side of a shuffle. `exchange` delivers our offer to the partner
    /// and returns its reply. An unresponsive partner is blacklisted and the
    /// view is left otherwise unchanged.
    pub fn shuffle_exchange<R, F>(
        &mut self,
        me: &PeerDescriptor,
        partner: &PeerId,
        now: Millis,
        rng: &mut R,
        exchange: F,
    ) -> Result<()>
    where
        R: Rng + ?Sized,
        F: FnOnce(Vec<PeerDescriptor>) -> Result<Vec<PeerDescriptor>>,
    {
        let offer = self.shuffle_offer(me, now, rng);
        match exchange(offer) {
            Ok(reply) => {
                self.mark_alive(partner, now);
                self.merge(reply, rng);
                Ok(())
            }
            Err(e) => {
                if e.is_unresponsive() {
                    self.blacklist(partner, now);
                }
                Err(e)
            }
        }
    }

    /// Passive side of a shuffle: answer with our own offer, then merge.
    pub fn answer_shuffle<R: Rng + ?Sized>(
        &mut self,
        me: &PeerDescriptor,
        received: Vec<PeerDescriptor>,
        now: Millis,
        rng: &mut R,
    ) -> Vec<PeerDescriptor> {
        let reply = self.shuffle_offer(me, now, rng);
        self.merge(received, rng);
        reply
    }
}

/// Registry file: one `host:port` per line; blank lines and `#` comments
/// are skipped.
pub fn parse_registry(body: &str) -> Vec<String> {
    body.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}

pub fn load_registry(path: &Path) -> Result<Vec<String>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_registry(&body))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn registry(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("10.0.0.{i}:7000")).collect()
    }

    fn attested_view(n: usize, size: usize) -> PartialView {
        let mut v = PartialView::new(PeerId::from("self"), size);
        for a in registry(n) {
            let mut p = PeerDescriptor::at(&a, 0);
            p.attested = true;
            v.insert(p);
        }
        v
    }

    #[test]
    fn bootstrap_examples() {
        let me = PeerId::from("self:1");
        let v = PartialView::bootstrap(me.clone(), &registry(5), 20, 0, &mut rng()).unwrap();
        assert_eq!(v.len(), 5);
        let v = PartialView::bootstrap(me.clone(), &registry(100), 20, 0, &mut rng()).unwrap();
        assert_eq!(v.len(), 20);
        assert!(matches!(
            PartialView::bootstrap(me, &["self:1".to_string()], 20, 0, &mut rng()),
            Err(Error::NoPeers)
        ));
        assert!(PartialView::bootstrap("x".into(), &[], 20, 0, &mut rng()).is_err());
    }

    #[test]
    fn bootstrap_excludes_self() {
        let reg = registry(10);
        let me = PeerId(reg[3].clone());
        let v = PartialView::bootstrap(me.clone(), &reg, 20, 0, &mut rng()).unwrap();
        assert_eq!(v.len(), 9);
        assert!(!v.contains(&me));
    }

    #[test]
    fn disjoint_views_exchange() {
        let mut r = rng();
        let mut a = PartialView::new("a".into(), 10);
        let mut b = PartialView::new("b".into(), 10);
        for i in 0..10 {
            a.insert(PeerDescriptor::at(&format!("left{i}"), 0));
            b.insert(PeerDescriptor::at(&format!("right{i}"), 0));
        }
        let me_a = PeerDescriptor::at("a", 0);
        let me_b = PeerDescriptor::at("b", 0);
        a.insert(me_b.clone());
        a.remove(&"left9".into());
        let mut b2 = b.clone();
        a.shuffle_exchange(&me_a, &"b".into(), 5, &mut r, |offer| {
            Ok(b2.answer_shuffle(&me_b, offer, 5, &mut ChaCha8Rng::seed_from_u64(3)))
        })
        .unwrap();
        b = b2;
        assert!(a.len() <= 10 && b.len() <= 10);
        assert!(a.peers().any(|p| p.peer_id.0.starts_with("right")));
        assert!(b.peers().any(|p| p.peer_id.0.starts_with("left") || p.peer_id.0 == "a"));
        assert!(!a.contains(&"a".into()) && !b.contains(&"b".into()));
    }

    #[test]
    fn unreachable_partner_blacklisted() {
        let mut v = attested_view(5, 20);
        let before: Vec<_> = v.peers().map(|p| p.peer_id.clone()).collect();
        let partner = PeerId(registry(5)[0].clone());
        let err = v
            .shuffle_exchange(&PeerDescriptor::at("self", 0), &partner, 1_000, &mut rng(), |_| {
                Err(Error::Timeout(partner.to_string()))
            })
            .unwrap_err();
        assert!(matches!(err, Error::Timeout(_)));
        let after: Vec<_> = v.peers().map(|p| p.peer_id.clone()).collect();
        assert_eq!(before, after);
        let p = v.get(&partner).unwrap();
        assert_eq!(p.blacklisted_until, Some(61_000));
        assert!(p.is_blacklisted(60_999) && !p.is_blacklisted(61_000));
    }

    #[test]
    fn small_merge_keeps_everything() {
        let mut v = PartialView::new("self".into(), 20);
        for i in 0..5 {
            v.insert(PeerDescriptor::at(&format!("p{i}"), 0));
        }
        let incoming: Vec<_> = (3..8).map(|i| PeerDescriptor::at(&format!("p{i}"), 9)).collect();
        v.merge(incoming, &mut rng());
        assert_eq!(v.len(), 8);
        assert_eq!(v.get(&"p4".into()).unwrap().last_seen, 9);
        assert_eq!(v.get(&"p0".into()).unwrap().last_seen, 0);
    }

    #[test]
    fn merge_keeps_local_trust_state() {
        let mut v = attested_view(3, 20);
        let id = PeerId(registry(3)[1].clone());
        v.merge(vec![PeerDescriptor::at(id.as_str(), 50)], &mut rng());
        let p = v.get(&id).unwrap();
        assert!(p.attested);
        assert_eq!(p.last_seen, 50);
    }

    #[test]
    fn blacklist_backoff() {
        assert_eq!(blacklist_duration(1), 60_000);
        assert_eq!(blacklist_duration(2), 120_000);
        assert_eq!(blacklist_duration(3), 240_000);
        assert_eq!(blacklist_duration(40), BLACKLIST_MAX_MS);
        let mut v = attested_view(1, 5);
        let id = PeerId(registry(1)[0].clone());
        v.blacklist(&id, 0);
        v.blacklist(&id, 60_000);
        assert_eq!(v.get(&id).unwrap().blacklisted_until, Some(180_000));
        v.mark_alive(&id, 200_000);
        assert_eq!(v.get(&id).unwrap().strikes, 0);
    }

    #[test]
    fn sample_relays_examples() {
        let mut r = rng();
        let v = attested_view(20, 20);
        let d = v.sample_relays(8, 0, &mut r).unwrap();
        assert_eq!(d.relays.len(), 8);
        assert_eq!(d.shortfall, 0);

        let v = attested_view(3, 20);
        let d = v.sample_relays(8, 0, &mut r).unwrap();
        assert_eq!(d.relays.len(), 3);
        assert_eq!(d.shortfall, 5);

        let mut v = attested_view(3, 20);
        for a in registry(3) {
            v.blacklist(&PeerId(a), 0);
        }
        assert!(matches!(v.sample_relays(1, 10, &mut r), Err(Error::NoEligibleRelay)));
    }

    #[test]
    fn unattested_peers_are_never_relays() {
        let mut v = PartialView::new("self".into(), 20);
        for a in registry(6) {
            v.insert(PeerDescriptor::at(&a, 0));
        }
        assert!(v.sample_relays(1, 0, &mut rng()).is_err());
        v.mark_attested(&PeerId(registry(6)[2].clone()), true, 0);
        let d = v.sample_relays(4, 0, &mut rng()).unwrap();
        assert_eq!(d.relays.len(), 1);
        assert_eq!(v.unattested(0).len(), 5);
    }

    #[test]
    fn registry_format() {
        let r = parse_registry("# bootstrap\n10.0.0.1:7000\n\n 10.0.0.2:7000 \n");
        assert_eq!(r, ["10.0.0.1:7000", "10.0.0.2:7000"]);
    }

    proptest! {
        #[test]
        fn relay_draws_are_clean(
            n in 1usize..40,
            blacklisted in prop::collection::vec(any::<bool>(), 40),
            attested in prop::collection::vec(any::<bool>(), 40),
            count in 1usize..12,
            seed in any::<u64>(),
        ) {
            let mut v = PartialView::new("self".into(), 64);
            v.insert(PeerDescriptor::at("self", 0));
            for (i, a) in registry(n).iter().enumerate() {
                let mut p = PeerDescriptor::at(a, 0);
                p.attested = attested[i];
                v.insert(p);
                if blacklisted[i] {
                    v.blacklist(&PeerId(a.clone()), 100);
                }
            }
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            match v.sample_relays(count, 100, &mut r) {
                Ok(d) => {
                    let ids: HashSet<_> = d.relays.iter().map(|p| p.peer_id.clone()).collect();
                    prop_assert_eq!(ids.len(), d.relays.len());
                    prop_assert!(!ids.contains(&PeerId::from("self")));
                    prop_assert!(d.relays.iter().all(|p| p.is_eligible(100)));
                    prop_assert_eq!(d.relays.len() + d.shortfall, count);
                    prop_assert_eq!(d.relays.len(), count.min(v.eligible_count(100)));
                }
                Err(_) => prop_assert_eq!(v.eligible_count(100), 0),
            }
        }

        #[test]
        fn merge_respects_view_size(
            local in 0usize..30,
            incoming in 0usize..30,
            size in 1usize..25,
            seed in any::<u64>(),
        ) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut v = PartialView::new("self".into(), size);
            for i in 0..local.min(size) {
                v.insert(PeerDescriptor::at(&format!("l{i}"), 0));
            }
            let mut received: Vec<_> = (0..incoming).map(|i| PeerDescriptor::at(&format!("r{i}"), 1)).collect();
            received.push(PeerDescriptor::at("self", 1));
            v.merge(received, &mut r);
            prop_assert!(v.len() <= size);
            prop_assert!(!v.contains(&"self".into()));
        }
    }
}
