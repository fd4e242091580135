//! Customer-visible result records.
//!
//! ```text
//! job: 7
//! customer: alice
//! status: halt 0
//! commit: committed 3
//! release-time: 4000
//! fuel: 18211
//! followup: none
//! file result 8 5f1c...
//! deleted scratch
//! ```
//!
//! Every line ends in `\n`. `status` is `halt <code>`, `except <KIND>`,
//! `fuelout` or `forced`. `commit` is `committed <version>`,
//! `aborted-stale-base` or `discarded`. `followup` is `none`, `job <id>` or
//! `rejected <reason>`. Then one `file <name> <length> <sha256>` line per
//! created or changed file and one `deleted <name>` line per removed file,
//! each in name order. Names escape bytes outside `!`..`~` and `%` as `%XX`.
//! `release-time` is the only field that depends on when the job ran.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use super::{FollowupOutcome, GatewayError, JobId, JobResult};
use crate::vm::StopReason;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultRecord {
    pub job: JobId,
    pub customer: String,
    pub status: String,
    pub commit: String,
    pub release_time: u64,
    pub fuel: u64,
    pub followup: String,
    /// (name, length, sha256 hex)
    pub files: Vec<(String, u64, String)>,
    pub deleted: Vec<String>,
}

pub fn status_text(s: &StopReason) -> String {
    match s {
        StopReason::Halt(c) => format!("halt {c}"),
        StopReason::Except(k) => format!("except {}", k.name()),
        StopReason::FuelOut => "fuelout".into(),
        StopReason::Forced | StopReason::Syscall(_) => "forced".into(),
    }
}

fn escape(name: &str) -> String {
    let mut s = String::new();
    for b in name.bytes() {
        if (b'!'..=b'~').contains(&b) && b != b'%' {
            s.push(b as char);
        } else {
            let _ = write!(s, "%{b:02X}");
        }
    }
    s
}

fn unescape(s: &str) -> Option<String> {
    let b = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if b[i] == b'%' {
            out.push(u8::from_str_radix(s.get(i + 1..i + 3)?, 16).ok()?);
            i += 3;
        } else {
            out.push(b[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

impl From<&JobResult> for ResultRecord {
    fn from(r: &JobResult) -> ResultRecord {
        ResultRecord {
            job: r.job,
            customer: r.customer.clone(),
            status: status_text(&r.status),
            commit: r.commit.to_string(),
            release_time: r.release_time,
            fuel: r.fuel_consumed,
            followup: match &r.followup {
                FollowupOutcome::None => "none".into(),
                FollowupOutcome::Submitted(id) => format!("job {id}"),
                FollowupOutcome::Rejected(why) => format!("rejected {}", why.replace('\n', " ")),
            },
            files: r
                .diff
                .changed
                .iter()
                .map(|(n, (_, d))| (n.clone(), d.len() as u64, hex::encode(Sha256::digest(d))))
                .collect(),
            deleted: r.diff.deleted.iter().cloned().collect(),
        }
    }
}

impl ResultRecord {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "job: {}", self.job);
        let _ = writeln!(s, "customer: {}", self.customer);
        let _ = writeln!(s, "status: {}", self.status);
        let _ = writeln!(s, "commit: {}", self.commit);
        let _ = writeln!(s, "release-time: {}", self.release_time);
        let _ = writeln!(s, "fuel: {}", self.fuel);
        let _ = writeln!(s, "followup: {}", self.followup);
        for (n, len, h) in &self.files {
            let _ = writeln!(s, "file {} {len} {h}", escape(n));
        }
        for n in &self.deleted {
            let _ = writeln!(s, "deleted {}", escape(n));
        }
        s
    }

    /// Everything except the release time, the one timing-derived field.
    pub fn content_text(&self) -> String {
        ResultRecord {
            release_time: 0,
            ..self.clone()
        }
        .to_text()
    }

    pub fn parse(text: &str) -> Result<ResultRecord, GatewayError> {
        let bad = |m: &str| GatewayError::Manifest(format!("result record: {m}"));
        let mut lines = text.lines();
        let mut field = |key: &str| -> Result<String, GatewayError> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(key))
                .and_then(|l| l.strip_prefix(": "))
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("expected `{key}:`")))
        };
        let num = |s: String| s.parse::<u64>().map_err(|_| bad(&format!("bad number `{s}`")));
        let mut rec = ResultRecord {
            job: num(field("job")?)?,
            customer: field("customer")?,
            status: field("status")?,
            commit: field("commit")?,
            release_time: num(field("release-time")?)?,
            fuel: num(field("fuel")?)?,
            followup: field("followup")?,
            files: Vec::new(),
            deleted: Vec::new(),
        };
        for l in lines {
            let parts: Vec<&str> = l.split(' ').collect();
            match parts[..] {
                ["file", n, len, h] => rec.files.push((
                    unescape(n).ok_or_else(|| bad("bad name"))?,
                    len.parse().map_err(|_| bad("bad length"))?,
                    h.to_string(),
                )),
                ["deleted", n] => rec.deleted.push(unescape(n).ok_or_else(|| bad("bad name"))?),
                _ => return Err(bad(&format!("unexpected line `{l}`"))),
            }
        }
        Ok(rec)
    }
}
