use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use agentmail_core::address::{Address, World};
use agentmail_core::gateway::{BackendId, Gateway, ScriptedBackend};
use agentmail_core::lock::{Acquire, LockEvent, LockService};
use agentmail_core::memory::{JournalStore, StoreConfig, StoreError};
use agentmail_core::message::Message;
use agentmail_core::realm::{PeerBus, Realm, RealmConfig};
use rand::{Rng, SeedableRng};

const USER: &str = "user1@localdomain";
const AGENT: &str = "ai_30@agents.localdomain";
const RULES: &str = "[[rule]]\nmatch = { subject_regex = \"^greet\" }\nrespond = { body = \"hello\" }\n";

struct Pair {
    _dir: tempfile::TempDir,
    r1: Realm,
    r2: Realm,
    store: Arc<JournalStore>,
    lock: Arc<LockService>,
}

fn pair() -> Pair {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(JournalStore::new(StoreConfig { root: dir.path().into(), fsync: false }).unwrap());
    let lock = Arc::new(LockService::new());
    let bus = Arc::new(PeerBus::new());
    let gw = || Gateway::new(BackendId::new("test", "scripted"), Arc::new(ScriptedBackend::from_toml_str(RULES).unwrap()));
    let mut r1 = Realm::new(RealmConfig::new("r1", World::new("w1")), lock.clone(), store.clone(), gw()).unwrap();
    let mut r2 = Realm::new(RealmConfig::new("r2", World::new("w1")), lock.clone(), store.clone(), gw()).unwrap();
    r1.join_peers(bus.clone());
    r2.join_peers(bus);
    Pair { _dir: dir, r1, r2, store, lock }
}

fn addr() -> Address {
    World::new("w1").parse(AGENT).unwrap()
}

#[test]
fn handoff_carries_twenty_entry_context() {
    let mut p = pair();
    let c1 = p.r1.connect(USER).unwrap();
    for i in 0..10 {
        p.r1.ingest(c1, Message::new(USER, AGENT, &format!("greet {i}"), "")).unwrap();
    }
    p.r1.run_until_idle();
    let before = p.r1.memory(&addr()).unwrap().clone();
    assert_eq!(before.journal.entries.len(), 20);
    assert_eq!(p.lock.owner_of(&addr()), Some(("r1".into(), 1)));

    let c2 = p.r2.connect(USER).unwrap();
    p.r2.ingest(c2, Message::new(USER, AGENT, "greet again", "")).unwrap();
    p.r2.run_until_idle();
    assert!(p.r2.memory(&addr()).is_none(), "must wait for r1");

    p.r1.poll();
    assert!(p.r1.memory(&addr()).is_none());
    p.r2.run_until_idle();
    let after = p.r2.memory(&addr()).unwrap();
    assert_eq!(p.lock.owner_of(&addr()), Some(("r2".into(), 2)));
    assert_eq!(&after.journal.entries[..20], &before.journal.entries[..]);
    assert_eq!(after.journal.entries.len(), 22);
    after.verify().unwrap();

    // r1's lease is stale now; storage refuses its writes
    let mut stale = before.journal.clone();
    stale.entries.push(Message::new(USER, AGENT, "late", ""));
    stale.persisted_offset = 22;
    assert!(matches!(p.store.persist(&mut stale, 1), Err(StoreError::StaleLease { presented: 1, current: 2 })));
}

#[test]
fn burst_across_handoff_keeps_order() {
    let mut p = pair();
    let c1 = p.r1.connect(USER).unwrap();
    let c2 = p.r2.connect(USER).unwrap();
    for i in 0..5 {
        p.r1.ingest(c1, Message::new(USER, AGENT, &format!("greet {i}"), "")).unwrap();
    }
    assert!(p.r1.step());
    assert!(p.r1.step());
    for i in 5..10 {
        p.r2.ingest(c2, Message::new(USER, AGENT, &format!("greet {i}"), "")).unwrap();
    }
    p.r2.run_until_idle();
    assert_eq!(p.r2.queued(), 5);

    p.r1.poll();
    assert_eq!(p.r1.queued(), 0, "queued items follow the agent");
    p.r2.run_until_idle();

    let mem = p.r2.memory(&addr()).unwrap();
    let inputs: Vec<String> = mem.journal.entries.iter().filter(|m| m.from_addr() == Some(USER)).map(|m| m.subject().to_string()).collect();
    let expected: Vec<String> = (0..10).map(|i| format!("greet {i}")).collect();
    assert_eq!(inputs, expected);
    assert_eq!(mem.journal.entries.len(), 20);
    mem.verify().unwrap();
}

#[test]
fn pure_handoff_and_shutdown() {
    let mut p = pair();
    let c1 = p.r1.connect(USER).unwrap();
    p.r1.ingest(c1, Message::new(USER, AGENT, "greet", "")).unwrap();
    p.r1.run_until_idle();
    p.r1.shutdown().unwrap();
    assert_eq!(p.lock.owner_of(&addr()), None);
    let (journal, context) = p.store.load(&addr()).unwrap();
    assert_eq!(journal.entries.len(), 2);
    assert_eq!(context.cells.len(), 2);
}

/// 64 contenders, 100 rounds each, over 8 agents. Each holder records the
/// ticks at which it started and stopped holding; intervals for one agent
/// must never overlap and epochs must rise in grant order.
#[test]
fn lock_exclusivity_under_contention() {
    let lock = Arc::new(LockService::new());
    let clock = Arc::new(AtomicU64::new(0));
    let world = World::new("w1");
    let agents: Arc<Vec<Address>> = Arc::new((0..8).map(|i| world.parse(&format!("a{i}@agents.localdomain")).unwrap()).collect());

    let handles: Vec<_> = (0..64)
        .map(|t| {
            let (lock, clock, agents) = (lock.clone(), clock.clone(), agents.clone());
            let rx = lock.register_realm(&format!("realm-{t}")).unwrap();
            thread::spawn(move || {
                let me = format!("realm-{t}");
                let mut rng = rand::rngs::StdRng::seed_from_u64(t);
                let mut history = Vec::new();
                for _ in 0..100 {
                    let agent = &agents[rng.gen_range(0..agents.len())];
                    let epoch = match lock.acquire(agent, &me).unwrap() {
                        Acquire::Granted(e) => e,
                        Acquire::MustWait(_) => loop {
                            match rx.recv().unwrap() {
                                LockEvent::Granted { agent: a, epoch } if &a == agent => break epoch,
                                _ => continue,
                            }
                        },
                    };
                    let start = clock.fetch_add(1, Ordering::SeqCst);
                    if rng.gen_bool(0.3) {
                        thread::yield_now();
                    }
                    let end = clock.fetch_add(1, Ordering::SeqCst);
                    history.push((agent.to_string(), start, end, epoch));
                    lock.release(agent, &me, true).unwrap();
                }
                history
            })
        })
        .collect();

    let mut per_agent: HashMap<String, Vec<(u64, u64, u64)>> = HashMap::new();
    for h in handles {
        for (agent, start, end, epoch) in h.join().unwrap() {
            per_agent.entry(agent).or_default().push((start, end, epoch));
        }
    }
    let mut total = 0;
    for (agent, mut intervals) in per_agent {
        intervals.sort();
        total += intervals.len();
        for w in intervals.windows(2) {
            assert!(w[0].1 < w[1].0, "{agent}: overlapping holds {:?} {:?}", w[0], w[1]);
            assert!(w[0].2 < w[1].2, "{agent}: epoch did not increase");
        }
    }
    assert_eq!(total, 6400);
}
