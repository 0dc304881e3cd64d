//! Linearizability of key-value histories against a register per key,
//! decided by a Wing–Gould search with memoization of visited
//! (linearized set, register value) pairs.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use bytes::Bytes;

use crate::protocol::{ClientOp, ClientResult};
use crate::types::{RequestTag, SimTime};
use crate::workload::OpRecord;

/// One client operation in a history.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryOp {
    pub tag: RequestTag,
    pub key: Bytes,
    pub kind: OpKind,
    pub invoke: SimTime,
    /// `None` for an operation that never completed; a pending write may or
    /// may not have taken effect.
    pub complete: Option<SimTime>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OpKind {
    Write(Bytes),
    /// A completed read and the value it returned.
    Read(Option<Bytes>),
}

impl HistoryOp {
    /// Converts a client record; pending reads and non-answers are dropped
    /// since they constrain nothing.
    pub fn from_record(r: &OpRecord) -> Option<HistoryOp> {
        let complete = match r.result {
            Some(ClientResult::Redirect(_)) | None => None,
            Some(_) => r.complete,
        };
        let kind = match (&r.op, &r.result) {
            (ClientOp::Put { value, .. }, _) => OpKind::Write(value.clone()),
            (ClientOp::Get { .. }, Some(ClientResult::Value(v))) if complete.is_some() => OpKind::Read(v.clone()),
            (ClientOp::Get { .. }, _) => return None,
        };
        Some(HistoryOp { tag: r.tag, key: r.op.key().clone(), kind, invoke: r.invoke, complete })
    }
}

/// Why a history is not linearizable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Witness {
    pub key: Bytes,
    /// Longest legal sequential prefix that was found.
    pub prefix: Vec<RequestTag>,
    /// Operations that could not be placed after that prefix.
    pub stuck: Vec<RequestTag>,
}

impl fmt::Display for Witness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |v: &[RequestTag]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        write!(
            f,
            "key {}: longest legal order [{}], cannot place [{}]",
            String::from_utf8_lossy(&self.key),
            list(&self.prefix),
            list(&self.stuck)
        )
    }
}

pub fn check_linearizable(history: &[HistoryOp]) -> Result<(), Witness> {
    let mut per_key: BTreeMap<&Bytes, Vec<&HistoryOp>> = BTreeMap::new();
    for op in history {
        per_key.entry(&op.key).or_default().push(op);
    }
    for (key, ops) in per_key {
        check_register(key, &ops)?;
    }
    Ok(())
}

/// Convenience wrapper over client records.
pub fn check_records<'a>(records: impl IntoIterator<Item = &'a OpRecord>) -> Result<(), Witness> {
    let ops: Vec<HistoryOp> = records.into_iter().filter_map(HistoryOp::from_record).collect();
    check_linearizable(&ops)
}

#[derive(Clone, Copy)]
struct Op {
    invoke: u64,
    /// `u64::MAX` when pending.
    complete: u64,
    write: Option<u32>,
    read: Option<u32>,
}

const ABSENT: u32 = 0;

fn check_register(key: &Bytes, ops: &[&HistoryOp]) -> Result<(), Witness> {
    // Value 0 is "absent"; written values get ids from 1.
    let mut ids: BTreeMap<&Bytes, u32> = BTreeMap::new();
    for op in ops {
        if let OpKind::Write(v) = &op.kind {
            let next = ids.len() as u32 + 1;
            ids.entry(v).or_insert(next);
        }
    }
    let mut order: Vec<usize> = (0..ops.len()).collect();
    order.sort_by_key(|&i| (ops[i].invoke, i));
    let mut compiled = Vec::with_capacity(ops.len());
    for &i in &order {
        let op = ops[i];
        let (write, read) = match &op.kind {
            OpKind::Write(v) => (Some(ids[v]), None),
            // A read of a value nobody wrote can never be placed.
            OpKind::Read(None) => (None, Some(ABSENT)),
            OpKind::Read(Some(v)) => (None, Some(ids.get(v).copied().unwrap_or(u32::MAX))),
        };
        compiled.push(Op { invoke: op.invoke.0, complete: op.complete.map_or(u64::MAX, |c| c.0), write, read });
    }
    let tags: Vec<RequestTag> = order.iter().map(|&i| ops[i].tag).collect();
    search(&compiled).map_err(|(prefix, stuck)| Witness {
        key: key.clone(),
        prefix: prefix.into_iter().map(|i| tags[i]).collect(),
        stuck: stuck.into_iter().map(|i| tags[i]).collect(),
    })
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct Bits(Vec<u64>);

impl Bits {
    fn new(n: usize) -> Self {
        Bits(vec![0; n.div_ceil(64)])
    }

    fn get(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }

    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    fn clear(&mut self, i: usize) {
        self.0[i / 64] &= !(1 << (i % 64));
    }
}

/// Depth-first search over linearization orders. `ops` is sorted by invoke.
fn search(ops: &[Op]) -> Result<(), (Vec<usize>, Vec<usize>)> {
    let n = ops.len();
    let must = ops.iter().filter(|o| o.complete != u64::MAX).count();
    let mut done = Bits::new(n);
    let mut done_complete = 0usize;
    let mut value = ABSENT;
    let mut seen: HashSet<(Bits, u32)> = HashSet::new();
    // Each frame: chosen op and the register value before it.
    let mut stack: Vec<(usize, u32)> = Vec::new();
    let mut best: Vec<usize> = Vec::new();
    let mut resume = 0usize;
    loop {
        if done_complete == must {
            return Ok(());
        }
        let first = (0..n).find(|&i| !done.get(i)).expect("ops remain");
        // Only ops invoked before every remaining response may go next.
        let horizon = (first..n).filter(|&i| !done.get(i)).map(|i| ops[i].complete).min().unwrap_or(u64::MAX);
        let mut pick = None;
        for i in resume.max(first)..n {
            if ops[i].invoke >= horizon {
                break;
            }
            if done.get(i) {
                continue;
            }
            let o = ops[i];
            let next_value = match (o.write, o.read) {
                (Some(w), _) => w,
                (None, Some(r)) if r == value => value,
                _ => continue,
            };
            done.set(i);
            let fresh = seen.insert((done.clone(), next_value));
            if fresh {
                pick = Some((i, next_value));
                break;
            }
            done.clear(i);
        }
        match pick {
            Some((i, next_value)) => {
                stack.push((i, value));
                value = next_value;
                if ops[i].complete != u64::MAX {
                    done_complete += 1;
                }
                if stack.len() > best.len() {
                    best = stack.iter().map(|&(j, _)| j).collect();
                }
                resume = 0;
            }
            None => {
                let Some((i, prev)) = stack.pop() else {
                    let mut placed = Bits::new(n);
                    for &j in &best {
                        placed.set(j);
                    }
                    let stuck = (0..n).filter(|&j| !placed.get(j) && ops[j].complete != u64::MAX).collect();
                    return Err((best, stuck));
                };
                done.clear(i);
                if ops[i].complete != u64::MAX {
                    done_complete -= 1;
                }
                value = prev;
                resume = i + 1;
            }
        }
    }
}
