//! Deterministic in-process network.
//!
//! Each party runs its program on its own thread, but only one thread holds
//! the turn at any time. A party keeps the turn until it blocks in `recv` or
//! finishes. When nobody is runnable the scheduler delivers the head of a
//! seeded-random non-empty link (links are FIFO per ordered pair). If nothing
//! is in flight, the lowest-indexed party waiting with a timeout gets
//! `Timeout`; if every waiting party has no timeout the run is a deadlock.
//!
//! Given the same seed and programs, the transcript is byte-identical.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use super::channel::{handshake_pair, Identity, Opener, PeerDirectory, Sealer};
use super::{AuditLog, MessageEnvelope, PartyId, Transport, TransportError, DEFAULT_MAX_FRAME};

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub seed: u64,
    pub max_frame: usize,
    /// Run every link through an authenticated encrypted session.
    pub secure_channels: bool,
}

impl SimConfig {
    pub fn new(seed: u64) -> Self {
        Self { seed, max_frame: DEFAULT_MAX_FRAME, secure_channels: true }
    }
}

type Program<'env, T> = Box<dyn for<'s> FnOnce(&mut SimEndpoint<'s>) -> T + Send + 'env>;

pub struct PartyProgram<'env, T> {
    pub id: PartyId,
    run: Program<'env, T>,
}

impl<'env, T> PartyProgram<'env, T> {
    pub fn new(id: impl Into<PartyId>, run: impl for<'s> FnOnce(&mut SimEndpoint<'s>) -> T + Send + 'env) -> Self {
        Self { id: id.into(), run: Box::new(run) }
    }
}

impl From<String> for PartyId {
    fn from(s: String) -> Self {
        PartyId::new(s)
    }
}

#[derive(Debug)]
pub struct SimOutcome<T> {
    /// Program results in input order.
    pub outputs: Vec<(PartyId, T)>,
    pub transcript: AuditLog,
}

impl<T> SimOutcome<T> {
    pub fn output(&self, id: &str) -> Option<&T> {
        self.outputs.iter().find(|(p, _)| p.as_str() == id).map(|(_, t)| t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Runnable,
    Blocked { timed: bool },
    Finished,
}

struct State {
    ids: Vec<PartyId>,
    index: BTreeMap<PartyId, usize>,
    status: Vec<Status>,
    turn: Option<usize>,
    inbox: Vec<VecDeque<Result<MessageEnvelope, TransportError>>>,
    links: BTreeMap<(usize, usize), VecDeque<Vec<u8>>>,
    sealers: BTreeMap<(usize, usize), Sealer>,
    openers: BTreeMap<(usize, usize), Opener>,
    rng: ChaCha20Rng,
    clock: u64,
    audit: AuditLog,
    deadlock: Option<Vec<PartyId>>,
    max_frame: usize,
}

impl State {
    fn deliver(&mut self, link: (usize, usize)) {
        let frame = self.links.get_mut(&link).and_then(|q| q.pop_front()).expect("link chosen as non-empty");
        let (from, to) = link;
        let frame = match self.openers.get_mut(&link) {
            Some(o) => o.open(&frame),
            None => Ok(frame),
        };
        let item = frame.and_then(|f| MessageEnvelope::decode(&f, self.max_frame));
        if self.status[to] == Status::Finished {
            return;
        }
        debug_assert!(item.as_ref().map(|e| e.sender() == &self.ids[from]).unwrap_or(true));
        self.inbox[to].push_back(item);
        self.status[to] = Status::Runnable;
    }

    /// Picks who runs next, delivering a message or firing a timeout if needed.
    fn schedule(&mut self) {
        loop {
            let runnable: Vec<usize> = (0..self.ids.len()).filter(|&i| self.status[i] == Status::Runnable).collect();
            if !runnable.is_empty() {
                let pick = runnable[self.rng.gen_range(0..runnable.len())];
                self.turn = Some(pick);
                return;
            }
            let busy: Vec<(usize, usize)> =
                self.links.iter().filter(|(_, q)| !q.is_empty()).map(|(k, _)| *k).collect();
            if !busy.is_empty() {
                let link = busy[self.rng.gen_range(0..busy.len())];
                self.deliver(link);
                continue;
            }
            if let Some(i) = (0..self.ids.len()).find(|&i| self.status[i] == Status::Blocked { timed: true }) {
                self.inbox[i].push_back(Err(TransportError::Timeout));
                self.status[i] = Status::Runnable;
                continue;
            }
            let blocked: Vec<usize> =
                (0..self.ids.len()).filter(|&i| matches!(self.status[i], Status::Blocked { .. })).collect();
            if blocked.is_empty() {
                self.turn = None;
                return;
            }
            let names: Vec<PartyId> = blocked.iter().map(|&i| self.ids[i].clone()).collect();
            self.deadlock.get_or_insert_with(|| names.clone());
            for &i in &blocked {
                self.inbox[i].push_back(Err(TransportError::Deadlock { blocked: names.clone() }));
                self.status[i] = Status::Runnable;
            }
        }
    }
}

struct Shared {
    state: Mutex<State>,
    cv: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn wait_turn<'a>(&'a self, mut g: MutexGuard<'a, State>, me: usize) -> MutexGuard<'a, State> {
        while g.turn != Some(me) {
            g = self.cv.wait(g).unwrap_or_else(|e| e.into_inner());
        }
        g
    }
}

/// One party's handle onto the simulated network.
pub struct SimEndpoint<'s> {
    me: usize,
    id: PartyId,
    peers: Vec<PartyId>,
    shared: &'s Shared,
}

impl Transport for SimEndpoint<'_> {
    fn local_id(&self) -> &PartyId {
        &self.id
    }

    fn peers(&self) -> Vec<PartyId> {
        self.peers.clone()
    }

    fn send(&mut self, env: MessageEnvelope) -> Result<(), TransportError> {
        let mut st = self.shared.lock();
        if env.sender() != &self.id {
            return Err(TransportError::Unexpected(format!("{} cannot send as {}", self.id, env.sender())));
        }
        let to = *st.index.get(env.recipient()).ok_or_else(|| TransportError::UnknownParty(env.recipient().clone()))?;
        if to == self.me {
            return Err(TransportError::Unexpected("a party cannot message itself".into()));
        }
        let frame = env.encode(st.max_frame)?;
        st.clock += 1;
        let ts = st.clock;
        st.audit.append(ts, &env);
        let link = (self.me, to);
        let frame = match st.sealers.get_mut(&link) {
            Some(s) => s.seal(&frame),
            None => frame,
        };
        st.links.entry(link).or_default().push_back(frame);
        Ok(())
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<MessageEnvelope, TransportError> {
        let mut st = self.shared.lock();
        loop {
            if let Some(item) = st.inbox[self.me].pop_front() {
                return item;
            }
            st.status[self.me] = Status::Blocked { timed: timeout.is_some() };
            st.schedule();
            self.shared.cv.notify_all();
            st = self.shared.wait_turn(st, self.me);
        }
    }
}

struct FinishGuard<'s> {
    me: usize,
    shared: &'s Shared,
}

impl Drop for FinishGuard<'_> {
    fn drop(&mut self) {
        let mut st = self.shared.lock();
        st.status[self.me] = Status::Finished;
        st.inbox[self.me].clear();
        st.schedule();
        self.shared.cv.notify_all();
    }
}

fn sim_identity(seed: u64, id: &PartyId) -> Identity {
    let mut h = Sha256::new();
    h.update(b"kfed.sim.identity");
    h.update(seed.to_be_bytes());
    h.update(id.as_str().as_bytes());
    Identity::from_secret(h.finalize().into())
}

/// Runs all programs to completion on the simulated network.
pub fn simnet_run<T: Send>(programs: Vec<PartyProgram<'_, T>>, config: SimConfig) -> Result<SimOutcome<T>, TransportError> {
    let ids: Vec<PartyId> = programs.iter().map(|p| p.id.clone()).collect();
    let mut index = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        if index.insert(id.clone(), i).is_some() {
            return Err(TransportError::Unexpected(format!("duplicate party id {id}")));
        }
    }
    let n = ids.len();
    let rng = ChaCha20Rng::seed_from_u64(config.seed);
    // separate stream so channel setup never perturbs scheduling
    let mut hs_rng = ChaCha20Rng::seed_from_u64(config.seed);
    hs_rng.set_stream(1);
    let mut sealers = BTreeMap::new();
    let mut openers = BTreeMap::new();
    if config.secure_channels {
        let idents: Vec<Identity> = ids.iter().map(|id| sim_identity(config.seed, id)).collect();
        let mut dir = PeerDirectory::new();
        for (id, ident) in ids.iter().zip(&idents) {
            dir.insert(id.clone(), ident.public_bytes())?;
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let (si, sj) = handshake_pair((&ids[i], &idents[i]), (&ids[j], &idents[j]), &dir, &mut hs_rng)?;
                let (_, seal_i, open_i) = si.split();
                let (_, seal_j, open_j) = sj.split();
                sealers.insert((i, j), seal_i);
                openers.insert((i, j), open_j);
                sealers.insert((j, i), seal_j);
                openers.insert((j, i), open_i);
            }
        }
    }
    let shared = Shared {
        state: Mutex::new(State {
            ids: ids.clone(),
            index,
            status: vec![Status::Runnable; n],
            turn: None,
            inbox: (0..n).map(|_| VecDeque::new()).collect(),
            links: BTreeMap::new(),
            sealers,
            openers,
            rng,
            clock: 0,
            audit: AuditLog::new(),
            deadlock: None,
            max_frame: config.max_frame,
        }),
        cv: Condvar::new(),
    };

    let results: Vec<Result<T, String>> = std::thread::scope(|scope| {
        let shared = &shared;
        let handles: Vec<_> = programs
            .into_iter()
            .enumerate()
            .map(|(me, prog)| {
                let peers: Vec<PartyId> = ids.iter().filter(|p| **p != prog.id).cloned().collect();
                std::thread::Builder::new()
                    .name(format!("party-{}", prog.id))
                    .spawn_scoped(scope, move || {
                        let guard = FinishGuard { me, shared };
                        drop(shared.wait_turn(shared.lock(), me));
                        let mut ep = SimEndpoint { me, id: prog.id, peers, shared };
                        let out = (prog.run)(&mut ep);
                        drop(guard);
                        out
                    })
                    .expect("spawn party thread")
            })
            .collect();
        {
            let mut st = shared.lock();
            st.schedule();
            shared.cv.notify_all();
        }
        handles
            .into_iter()
            .map(|h| {
                h.join().map_err(|p| {
                    p.downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| p.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "non-string panic".into())
                })
            })
            .collect()
    });

    let st = shared.state.into_inner().unwrap_or_else(|e| e.into_inner());
    let mut outputs = Vec::with_capacity(n);
    for (id, r) in ids.into_iter().zip(results) {
        match r {
            Ok(t) => outputs.push((id, t)),
            Err(message) => return Err(TransportError::PartyPanicked { party: id, message }),
        }
    }
    if let Some(blocked) = st.deadlock {
        return Err(TransportError::Deadlock { blocked });
    }
    Ok(SimOutcome { outputs, transcript: st.audit })
}
