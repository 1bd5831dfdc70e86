//! Linked-list reader racing a writer that unlinks, frees and inserts
//! nodes (with garbage collection reusing freed space). Every completed
//! traversal must equal the committed list at the reader's snapshot.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use a1lite::simnet::{spawn_cluster, ClusterConfig, NodeId};
use a1lite::store::{Addr, Hint, Store, Txn, MIN_OBJECT};
use a1lite::Error;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NODE: usize = 32;
const MAGIC: u64 = 0x5eed_1157_0bad_cafe;

#[derive(Debug, Default, Clone, Copy)]
pub struct OpacityStats {
    pub traversals: usize,
    pub aborts: usize,
}

fn encode(id: u64, next: u64) -> [u8; NODE] {
    let mut b = [0u8; NODE];
    b[..8].copy_from_slice(&id.to_be_bytes());
    b[8..16].copy_from_slice(&next.to_be_bytes());
    b[16..24].copy_from_slice(&(id ^ next ^ MAGIC).to_be_bytes());
    b
}

fn decode(b: &[u8]) -> Result<(u64, u64), String> {
    let w = |i: usize| u64::from_be_bytes(b[i * 8..i * 8 + 8].try_into().unwrap());
    let (id, next, check) = (w(0), w(1), w(2));
    if check != id ^ next ^ MAGIC {
        return Err(format!("torn or foreign bytes: id {id} next {next} check {check}"));
    }
    Ok((id, next))
}

fn traverse(tx: &mut Txn, head: Addr) -> Result<Vec<u64>, Error> {
    let mut out = Vec::new();
    let mut at = head;
    loop {
        let b = tx.read(at, NODE)?;
        let (id, next) = decode(b.bytes()).map_err(Error::Corrupt)?;
        if at != head {
            out.push(id);
        }
        if next == 0 {
            return Ok(out);
        }
        if out.len() > 10_000 {
            return Err(Error::Corrupt("cycle".into()));
        }
        at = Addr::from_u64(next);
        std::thread::yield_now();
    }
}

/// One seeded trial; `Err` describes an opacity violation.
pub fn opacity_trial(seed: u64) -> Result<OpacityStats, String> {
    let store = Store::new(spawn_cluster(ClusterConfig::new(3, 3).with_seed(seed)).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(4..12usize);
    // list as (id, addr), head sentinel has id 0
    let mut list: Vec<(u64, Addr)> = Vec::new();
    let head;
    let t0;
    {
        let mut tx = store.create_transaction(NodeId(0), false).unwrap();
        let mut bufs = Vec::new();
        for _ in 0..=n {
            bufs.push(tx.alloc(MIN_OBJECT, Hint::Local).unwrap());
        }
        let addrs: Vec<Addr> = bufs.iter().map(|b| b.addr()).collect();
        for (i, b) in bufs.iter_mut().enumerate() {
            let next = addrs.get(i + 1).map_or(0, |a| a.as_u64());
            b.bytes_mut()[..NODE].copy_from_slice(&encode(i as u64, next));
            tx.write(b).unwrap();
        }
        t0 = tx.commit().unwrap().0;
        head = addrs[0];
        list.extend((1..=n).map(|i| (i as u64, addrs[i])));
    }
    let history: Arc<Mutex<Vec<(u64, Vec<u64>)>>> =
        Arc::new(Mutex::new(vec![(t0, list.iter().map(|x| x.0).collect())]));
    let done = Arc::new(AtomicBool::new(false));
    let observed: Arc<Mutex<Vec<(u64, Vec<u64>)>>> = Arc::new(Mutex::new(Vec::new()));
    let failures: Arc<Mutex<Vec<String>>> = Arc::new(Mutex::new(Vec::new()));
    let aborts = Arc::new(std::sync::atomic::AtomicUsize::new(0));

    let readers: Vec<_> = (0..2u16)
        .map(|r| {
            let (store, done, observed, failures, aborts) =
                (store.clone(), done.clone(), observed.clone(), failures.clone(), aborts.clone());
            std::thread::spawn(move || {
                while !done.load(Ordering::Acquire) {
                    let mut tx = match store.create_transaction(NodeId(r + 1), true) {
                        Ok(t) => t,
                        Err(e) => {
                            failures.lock().push(format!("begin: {e}"));
                            return;
                        }
                    };
                    let ts = tx.read_ts().0;
                    match traverse(&mut tx, head) {
                        Ok(ids) => observed.lock().push((ts, ids)),
                        Err(Error::Conflict) => {
                            aborts.fetch_add(1, Ordering::Relaxed);
                        }
                        Err(e) => failures.lock().push(format!("read at {ts}: {e}")),
                    }
                    let _ = tx.commit();
                }
            })
        })
        .collect();

    let mut next_id = n as u64 + 1;
    for _ in 0..rng.gen_range(4..10) {
        let delete = !list.is_empty() && rng.gen_bool(0.6);
        let pos = if list.is_empty() { 0 } else { rng.gen_range(0..list.len()) };
        let prev = if pos == 0 { (0, head) } else { list[pos - 1] };
        let res = loop {
            let mut tx = store.create_transaction(NodeId(0), false).unwrap();
            let step = (|| -> Result<Option<Addr>, Error> {
                let pb = tx.read(prev.1, NODE)?;
                let (pid, pnext) = decode(pb.bytes()).map_err(Error::Corrupt)?;
                if delete {
                    let victim = list[pos].1;
                    let vb = tx.read(victim, NODE)?;
                    let (_, vnext) = decode(vb.bytes()).map_err(Error::Corrupt)?;
                    tx.update(prev.1, &encode(pid, vnext))?;
                    tx.free(victim)?;
                    Ok(None)
                } else {
                    let mut nb = tx.alloc(MIN_OBJECT, Hint::Local)?;
                    nb.bytes_mut()[..NODE].copy_from_slice(&encode(next_id, pnext));
                    tx.write(&nb)?;
                    tx.update(prev.1, &encode(pid, nb.addr().as_u64()))?;
                    Ok(Some(nb.addr()))
                }
            })();
            match step.and_then(|a| tx.commit().map(|ts| (ts, a))) {
                Ok(v) => break v,
                Err(Error::Conflict) => continue,
                Err(e) => panic!("writer: {e}"),
            }
        };
        let (ts, added) = res;
        match added {
            None => {
                list.remove(pos);
            }
            Some(a) => {
                list.insert(pos, (next_id, a));
                next_id += 1;
            }
        }
        history.lock().push((ts.0, list.iter().map(|x| x.0).collect()));
        store.collect_garbage();
        std::thread::yield_now();
    }
    done.store(true, Ordering::Release);
    for r in readers {
        r.join().unwrap();
    }
    if let Some(f) = failures.lock().first() {
        return Err(format!("seed {seed}: {f}"));
    }
    let history = history.lock();
    let observed = observed.lock();
    for (ts, ids) in observed.iter() {
        let expect = history.iter().rev().find(|(cts, _)| cts <= ts).map(|h| &h.1);
        if expect != Some(ids) {
            return Err(format!("seed {seed}: snapshot {ts} saw {ids:?}, committed state was {expect:?}"));
        }
    }
    Ok(OpacityStats {
        traversals: observed.len(),
        aborts: aborts.load(Ordering::Relaxed),
    })
}
