//! Randomized interleaved histories over a handful of 8-byte objects,
//! checked against every serial order allowed by the commit timestamps.

use std::collections::BTreeMap;

use a1lite::simnet::{spawn_cluster, ClusterConfig, NodeId};
use a1lite::store::{Addr, Hint, Store, Txn, MIN_OBJECT};
use a1lite::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
enum Op {
    Read(usize),
    Write(usize),
}

#[derive(Clone, Debug)]
enum Event {
    Begin(usize),
    Op(usize, usize),
    Commit(usize),
}

#[derive(Clone, Debug, Default)]
struct Record {
    read_only: bool,
    read_ts: u64,
    commit_ts: Option<u64>,
    /// Observed value of every read, in program order.
    reads: Vec<u64>,
    /// Value written by every write, in program order.
    writes: Vec<u64>,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct HistoryStats {
    pub committed: usize,
    pub aborted: usize,
}

fn get(tx: &mut Txn, a: Addr) -> Result<u64, Error> {
    let b = tx.read(a, 8)?;
    Ok(u64::from_be_bytes(b.bytes().try_into().unwrap()))
}

fn write_value(t: usize, j: usize, reads: &[u64]) -> u64 {
    let mix = reads.iter().fold(0u64, |acc, r| acc.wrapping_mul(31).wrapping_add(*r));
    ((t as u64 + 1) << 56) ^ ((j as u64 + 1) << 48) ^ (mix & 0xffff_ffff_ffff)
}

/// Runs one seeded history and checks it; `Err` describes a violation.
pub fn check_history(seed: u64) -> Result<HistoryStats, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = Store::new(spawn_cluster(ClusterConfig::new(3, 3).with_seed(seed)).unwrap());
    let n_obj = rng.gen_range(1..=4);
    let objs: Vec<Addr> = {
        let mut tx = store.create_transaction(NodeId(0), false).unwrap();
        let v = (0..n_obj)
            .map(|i| {
                let mut b = tx.alloc(MIN_OBJECT, Hint::Local).unwrap();
                b.bytes_mut()[..8].copy_from_slice(&(i as u64 * 1000).to_be_bytes());
                tx.write(&b).unwrap();
                b.addr()
            })
            .collect();
        tx.commit().unwrap();
        v
    };
    let initial: Vec<u64> = (0..n_obj).map(|i| i as u64 * 1000).collect();

    let n_tx = rng.gen_range(1..=6);
    let progs: Vec<(bool, Vec<Op>)> = (0..n_tx)
        .map(|_| {
            let ro = rng.gen_bool(0.25);
            let ops = (0..rng.gen_range(1..=4))
                .map(|_| {
                    let o = rng.gen_range(0..n_obj);
                    if ro || rng.gen_bool(0.5) {
                        Op::Read(o)
                    } else {
                        Op::Write(o)
                    }
                })
                .collect();
            (ro, ops)
        })
        .collect();
    // random interleaving preserving program order
    let mut queues: Vec<Vec<Event>> = progs
        .iter()
        .enumerate()
        .map(|(t, (_, ops))| {
            let mut q = vec![Event::Commit(t)];
            q.extend((0..ops.len()).rev().map(|j| Event::Op(t, j)));
            q.push(Event::Begin(t));
            q
        })
        .collect();
    let mut schedule = Vec::new();
    loop {
        let live: Vec<usize> = (0..n_tx).filter(|t| !queues[*t].is_empty()).collect();
        let Some(t) = live.choose(&mut rng) else { break };
        schedule.push(queues[*t].pop().unwrap());
    }

    let mut txns: Vec<Option<Txn>> = (0..n_tx).map(|_| None).collect();
    let mut recs: Vec<Record> = vec![Record::default(); n_tx];
    let mut dead = vec![false; n_tx];
    let mut stats = HistoryStats::default();
    for ev in schedule {
        match ev {
            Event::Begin(t) => {
                let tx = store
                    .create_transaction(NodeId(rng.gen_range(0..3)), progs[t].0)
                    .map_err(|e| format!("begin: {e}"))?;
                recs[t].read_only = progs[t].0;
                recs[t].read_ts = tx.read_ts().0;
                txns[t] = Some(tx);
            }
            Event::Op(t, j) if !dead[t] => {
                let tx = txns[t].as_mut().unwrap();
                let res = match progs[t].1[j] {
                    Op::Read(o) => get(tx, objs[o]).map(|v| recs[t].reads.push(v)),
                    Op::Write(o) => {
                        let v = write_value(t, j, &recs[t].reads);
                        recs[t].writes.push(v);
                        tx.update(objs[o], &v.to_be_bytes())
                    }
                };
                match res {
                    Ok(()) => {}
                    Err(Error::Conflict) => dead[t] = true,
                    Err(e) => return Err(format!("seed {seed}: txn {t} op {j}: unexpected {e}")),
                }
            }
            Event::Op(..) => {}
            Event::Commit(t) => {
                let tx = txns[t].as_mut().unwrap();
                if dead[t] {
                    tx.abort();
                    stats.aborted += 1;
                    continue;
                }
                match tx.commit() {
                    Ok(ts) => {
                        recs[t].commit_ts = Some(ts.0);
                        stats.committed += 1;
                    }
                    Err(Error::Conflict) => {
                        dead[t] = true;
                        stats.aborted += 1;
                    }
                    Err(e) => return Err(format!("seed {seed}: commit {t}: unexpected {e}")),
                }
            }
        }
    }
    let final_state: Vec<u64> = {
        let mut tx = store.create_transaction(NodeId(0), true).unwrap();
        objs.iter().map(|a| get(&mut tx, *a).unwrap()).collect()
    };

    let committed: Vec<usize> = (0..n_tx).filter(|t| recs[*t].commit_ts.is_some()).collect();
    let writes_anything = |t: usize| progs[t].1.iter().any(|o| matches!(o, Op::Write(_)));
    // A writer serializes at its commit timestamp, a reader just after its
    // snapshot; anything else is inconsistent with the timestamps.
    let slot = |t: usize| -> (u64, u8) {
        if writes_anything(t) {
            (recs[t].commit_ts.unwrap(), 0)
        } else {
            (recs[t].read_ts, 1)
        }
    };
    let mut found = false;
    for perm in permutations(&committed) {
        let consistent = perm.windows(2).all(|w| slot(w[0]) <= slot(w[1]));
        if consistent && replay(&perm, &progs, &recs, &initial) == Some(final_state.clone()) {
            found = true;
            break;
        }
    }
    if !found {
        return Err(format!(
            "seed {seed}: no serial order matches; progs {progs:?} recs {recs:?} final {final_state:?}"
        ));
    }
    Ok(stats)
}

/// Serial re-execution; `None` when some read would see a different value.
fn replay(order: &[usize], progs: &[(bool, Vec<Op>)], recs: &[Record], initial: &[u64]) -> Option<Vec<u64>> {
    let mut state = initial.to_vec();
    for &t in order {
        let mut local: BTreeMap<usize, u64> = BTreeMap::new();
        let (mut ri, mut wi) = (0, 0);
        for op in &progs[t].1 {
            match op {
                Op::Read(o) => {
                    let v = local.get(o).copied().unwrap_or(state[*o]);
                    if recs[t].reads.get(ri) != Some(&v) {
                        return None;
                    }
                    ri += 1;
                }
                Op::Write(o) => {
                    local.insert(*o, recs[t].writes[wi]);
                    wi += 1;
                }
            }
        }
        for (o, v) in local {
            state[o] = v;
        }
    }
    Some(state)
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let x = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, x);
            out.push(p);
        }
    }
    out
}
