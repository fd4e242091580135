//! Per-customer persistent file stores with a linear version chain.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

use super::{GatewayError, JobId};
use crate::fs::{FileImage, FsError};

/// Files under this prefix are the job's channel to the gateway and are
/// never committed.
pub const RESERVED_PREFIX: &str = "/env/";

/// Changes a job made to its files, relative to the image it started from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Hash)]
pub struct FileDiff {
    /// New content and flags of created or changed files.
    pub changed: BTreeMap<String, (u32, Vec<u8>)>,
    pub deleted: BTreeSet<String>,
}

impl FileDiff {
    pub fn between(before: &FileImage, after: &FileImage) -> FileDiff {
        let (b, a) = (before.files(), after.files());
        let mut diff = FileDiff::default();
        for (name, e) in &a {
            if name.starts_with(RESERVED_PREFIX) {
                continue;
            }
            let same = b
                .get(name)
                .is_some_and(|o| o.data == e.data && o.meta.flags == e.meta.flags);
            if !same {
                diff.changed
                    .insert(name.to_string(), (e.meta.flags, e.data.clone()));
            }
        }
        for name in b.keys() {
            if !a.contains_key(name) && !name.starts_with(RESERVED_PREFIX) {
                diff.deleted.insert(name.to_string());
            }
        }
        diff
    }

    pub fn is_empty(&self) -> bool {
        self.changed.is_empty() && self.deleted.is_empty()
    }

    pub fn apply(&self, image: &FileImage) -> Result<FileImage, FsError> {
        let mut out = image.clone();
        for name in &self.deleted {
            out.remove(name);
        }
        for (name, (flags, data)) in &self.changed {
            out.put(name, data.clone(), *flags)?;
        }
        Ok(out)
    }

    /// Deterministic serialization, used for hashing and persistence.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, (flags, data)) in &self.changed {
            let _ = writeln!(s, "put {} {flags} {}", hex::encode(name), hex::encode(data));
        }
        for name in &self.deleted {
            let _ = writeln!(s, "del {}", hex::encode(name));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Commit {
    pub version: u64,
    pub job: Option<JobId>,
    pub diff: FileDiff,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommitOutcome {
    Committed(u64),
    AbortedStaleBase,
    /// The job did not finish normally; its writes are dropped.
    Discarded,
}

impl std::fmt::Display for CommitOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CommitOutcome::Committed(v) => write!(f, "committed {v}"),
            CommitOutcome::AbortedStaleBase => f.write_str("aborted-stale-base"),
            CommitOutcome::Discarded => f.write_str("discarded"),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Chain {
    commits: Vec<Commit>,
    /// `images[v]` is version `v`; version 0 is empty.
    images: Vec<Arc<FileImage>>,
}

/// Committed versions are immutable; each differs from its parent by one
/// job's diff.
#[derive(Debug, Clone, Default)]
pub struct Store {
    chains: BTreeMap<String, Chain>,
}

fn check_customer(name: &str) -> Result<(), GatewayError> {
    let ok = !name.is_empty()
        && name.len() <= 64
        && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
    if ok {
        Ok(())
    } else {
        Err(GatewayError::Manifest(format!("bad customer name `{name}`")))
    }
}

impl Store {
    pub fn new() -> Store {
        Store::default()
    }

    pub fn add_customer(&mut self, name: &str) -> Result<(), GatewayError> {
        check_customer(name)?;
        if self.chains.contains_key(name) {
            return Err(GatewayError::CustomerExists(name.to_string()));
        }
        self.chains.insert(
            name.to_string(),
            Chain {
                commits: Vec::new(),
                images: vec![Arc::new(FileImage::new())],
            },
        );
        Ok(())
    }

    pub fn customers(&self) -> impl Iterator<Item = &str> {
        self.chains.keys().map(String::as_str)
    }

    fn chain(&self, customer: &str) -> Result<&Chain, GatewayError> {
        self.chains
            .get(customer)
            .ok_or_else(|| GatewayError::UnknownCustomer(customer.to_string()))
    }

    pub fn latest_version(&self, customer: &str) -> Result<u64, GatewayError> {
        Ok(self.chain(customer)?.images.len() as u64 - 1)
    }

    pub fn snapshot(&self, customer: &str, version: u64) -> Result<Arc<FileImage>, GatewayError> {
        self.chain(customer)?
            .images
            .get(version as usize)
            .cloned()
            .ok_or_else(|| GatewayError::Store(format!("{customer} has no version {version}")))
    }

    pub fn commits(&self, customer: &str) -> Result<&[Commit], GatewayError> {
        Ok(&self.chain(customer)?.commits)
    }

    /// Installs `diff` on top of `base` if `base` is still the latest
    /// version.
    pub fn commit(
        &mut self,
        customer: &str,
        base: u64,
        job: Option<JobId>,
        diff: &FileDiff,
    ) -> Result<CommitOutcome, GatewayError> {
        let latest = self.latest_version(customer)?;
        if latest != base {
            return Ok(CommitOutcome::AbortedStaleBase);
        }
        let chain = self.chains.get_mut(customer).expect("checked above");
        let next = diff
            .apply(&chain.images[base as usize])
            .map_err(|e| GatewayError::Store(format!("commit on {customer}: {e}")))?;
        chain.images.push(Arc::new(next));
        chain.commits.push(Commit {
            version: base + 1,
            job,
            diff: diff.clone(),
        });
        Ok(CommitOutcome::Committed(base + 1))
    }

    /// Rebuilds the latest image by applying every commit to an empty one.
    pub fn replay(&self, customer: &str) -> Result<FileImage, GatewayError> {
        let mut img = FileImage::new();
        for c in &self.chain(customer)?.commits {
            img = c
                .diff
                .apply(&img)
                .map_err(|e| GatewayError::Store(e.to_string()))?;
        }
        Ok(img)
    }

    /// The commit log as text, from which [`Store::from_text`] rebuilds
    /// every version.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, chain) in &self.chains {
            let _ = writeln!(s, "customer {name}");
            for c in &chain.commits {
                let job = c.job.map_or("-".to_string(), |j| j.to_string());
                let _ = writeln!(s, "commit {} {job}", c.version);
                s.push_str(&c.diff.to_text());
                s.push_str("end\n");
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Store, GatewayError> {
        let bad = |n: usize, m: &str| GatewayError::Store(format!("store line {}: {m}", n + 1));
        let unhex = |n: usize, s: &str| hex::decode(s).map_err(|_| bad(n, "bad hex"));
        let mut store = Store::new();
        let mut customer: Option<String> = None;
        let mut open: Option<(u64, Option<JobId>, FileDiff)> = None;
        for (n, line) in text.lines().enumerate() {
            let parts: Vec<&str> = line.split(' ').collect();
            match (parts.as_slice(), open.as_mut()) {
                (["customer", name], None) => {
                    store.add_customer(name)?;
                    customer = Some(name.to_string());
                }
                (["commit", v, job], None) => {
                    let v = v.parse().map_err(|_| bad(n, "bad version"))?;
                    let job = match *job {
                        "-" => None,
                        j => Some(j.parse().map_err(|_| bad(n, "bad job id"))?),
                    };
                    open = Some((v, job, FileDiff::default()));
                }
                (["put", name, flags, data], Some((_, _, diff))) => {
                    let name = String::from_utf8(unhex(n, name)?).map_err(|_| bad(n, "bad name"))?;
                    let flags = flags.parse().map_err(|_| bad(n, "bad flags"))?;
                    diff.changed.insert(name, (flags, unhex(n, data)?));
                }
                (["del", name], Some((_, _, diff))) => {
                    let name = String::from_utf8(unhex(n, name)?).map_err(|_| bad(n, "bad name"))?;
                    diff.deleted.insert(name);
                }
                (["end"], Some(_)) => {
                    let (v, job, diff) = open.take().expect("matched Some");
                    let c = customer.as_deref().ok_or_else(|| bad(n, "commit outside customer"))?;
                    if store.commit(c, v - 1, job, &diff)? != CommitOutcome::Committed(v) {
                        return Err(bad(n, "versions out of order"));
                    }
                }
                ([""], None) => {}
                _ => return Err(bad(n, "unexpected line")),
            }
        }
        if open.is_some() {
            return Err(GatewayError::Store("unterminated commit".into()));
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diff(put: &[(&str, &[u8])], del: &[&str]) -> FileDiff {
        FileDiff {
            changed: put.iter().map(|(n, d)| (n.to_string(), (0, d.to_vec()))).collect(),
            deleted: del.iter().map(|n| n.to_string()).collect(),
        }
    }

    #[test]
    fn first_committer_wins() {
        let mut s = Store::new();
        s.add_customer("alice").unwrap();
        assert_eq!(s.commit("alice", 0, Some(1), &diff(&[("a", b"1")], &[])).unwrap(), CommitOutcome::Committed(1));
        assert_eq!(s.commit("alice", 0, Some(2), &diff(&[("b", b"2")], &[])).unwrap(), CommitOutcome::AbortedStaleBase);
        assert_eq!(s.latest_version("alice").unwrap(), 1);
        assert!(s.snapshot("alice", 1).unwrap().get("b").is_none());
        assert!(matches!(s.latest_version("bob"), Err(GatewayError::UnknownCustomer(_))));
    }

    #[test]
    fn text_round_trip_and_replay() {
        let mut s = Store::new();
        s.add_customer("alice").unwrap();
        s.add_customer("bob").unwrap();
        s.commit("alice", 0, Some(1), &diff(&[("a b", b"\x00\xff"), ("c", b"")], &[])).unwrap();
        s.commit("alice", 1, Some(3), &diff(&[("d", b"x")], &["c"])).unwrap();
        s.commit("alice", 2, None, &FileDiff::default()).unwrap();
        let back = Store::from_text(&s.to_text()).unwrap();
        assert_eq!(back.to_text(), s.to_text());
        let latest = s.snapshot("alice", 3).unwrap();
        assert_eq!(back.replay("alice").unwrap().canonical_bytes(), latest.canonical_bytes());
        assert_eq!(s.replay("alice").unwrap().canonical_bytes(), latest.canonical_bytes());
    }

    #[test]
    fn diff_ignores_reserved_files() {
        let before = FileImage::from_files([("keep", &b"1"[..]), ("gone", &b"2"[..])]).unwrap();
        let mut after = before.clone();
        after.put("/env/now", b"5".to_vec(), 0).unwrap();
        after.put("keep", b"3".to_vec(), 0).unwrap();
        after.put("new", b"4".to_vec(), 0).unwrap();
        after.remove("gone");
        let d = FileDiff::between(&before, &after);
        assert_eq!(d, diff(&[("keep", b"3"), ("new", b"4")], &["gone"]));
        assert_eq!(d.apply(&before).unwrap().canonical_bytes(), {
            let mut a = after.clone();
            a.remove("/env/now");
            a.canonical_bytes()
        });
    }
}
