//! The on-disk state shared by `detcloud` commands.
//!
//! ```text
//! <state>/store.log          commit log, rewritten by the gateway
//! <state>/queue/<ticket>/    spooled jobs waiting for the gateway
//! <state>/results/<job>.txt  released result records
//! <state>/tickets/<ticket>   the job id a ticket became, or the error
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use detcloud_core::gateway::{JobSpec, Manifest, ResultRecord, Store};

pub struct Spool {
    pub root: PathBuf,
}

fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, data).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

impl Spool {
    pub fn open(root: &Path) -> Result<Spool> {
        for d in ["queue", "results", "tickets"] {
            fs::create_dir_all(root.join(d)).with_context(|| format!("creating {}", root.display()))?;
        }
        Ok(Spool {
            root: root.to_path_buf(),
        })
    }

    pub fn load_store(&self) -> Result<Store> {
        let path = self.root.join("store.log");
        if !path.exists() {
            return Ok(Store::new());
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Store::from_text(&text)?)
    }

    pub fn save_store(&self, store: &Store) -> Result<()> {
        write_atomic(&self.root.join("store.log"), store.to_text().as_bytes())
    }

    /// Copies a resolved job into the queue so the gateway does not depend
    /// on the submitter's files. Returns the ticket number.
    pub fn enqueue(&self, spec: &JobSpec) -> Result<u64> {
        let queue = self.root.join("queue");
        let mut ticket = self.next_ticket()?;
        let dir = loop {
            let dir = queue.join(format!("{ticket:08}"));
            match fs::create_dir(&dir) {
                Ok(()) => break dir,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => ticket += 1,
                Err(e) => return Err(e).context("creating queue entry"),
            }
        };
        fs::write(dir.join("program.dvm"), spec.program.to_bytes())?;
        let mut inputs = Vec::new();
        for (i, (name, data)) in spec.inputs.iter().enumerate() {
            let file = format!("input-{i}");
            fs::write(dir.join(&file), data)?;
            inputs.push((name.clone(), file));
        }
        let manifest = Manifest {
            customer: spec.customer.clone(),
            program: "program.dvm".into(),
            inputs,
            fuel: spec.fuel,
            followup_allowed: spec.followup_allowed,
        };
        // Written last: the gateway only picks up entries with a manifest.
        write_atomic(&dir.join("manifest"), manifest.to_text().as_bytes())?;
        Ok(ticket)
    }

    fn next_ticket(&self) -> Result<u64> {
        let mut max = 0;
        for d in ["queue", "tickets"] {
            for e in fs::read_dir(self.root.join(d))? {
                if let Some(n) = e?.file_name().to_str().and_then(|s| s.parse::<u64>().ok()) {
                    max = max.max(n);
                }
            }
        }
        Ok(max + 1)
    }

    /// Spooled jobs ready to submit, in ticket order.
    pub fn queued(&self) -> Result<Vec<(u64, PathBuf)>> {
        let mut out = Vec::new();
        for e in fs::read_dir(self.root.join("queue"))? {
            let e = e?;
            let Some(n) = e.file_name().to_str().and_then(|s| s.parse::<u64>().ok()) else {
                continue;
            };
            if e.path().join("manifest").exists() {
                out.push((n, e.path()));
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn close_ticket(&self, ticket: u64, dir: &Path, outcome: &str) -> Result<()> {
        write_atomic(&self.root.join("tickets").join(format!("{ticket:08}")), outcome.as_bytes())?;
        fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))
    }

    pub fn write_result(&self, rec: &ResultRecord) -> Result<()> {
        let path = self.root.join("results").join(format!("{:08}.txt", rec.job));
        write_atomic(&path, rec.to_text().as_bytes())
    }

    /// Every released record, by release time and then job id.
    pub fn results(&self) -> Result<Vec<ResultRecord>> {
        let mut out = Vec::new();
        for e in fs::read_dir(self.root.join("results"))? {
            let path = e?.path();
            if path.extension().is_some_and(|x| x == "txt") {
                let text = fs::read_to_string(&path)?;
                out.push(ResultRecord::parse(&text).with_context(|| format!("{}", path.display()))?);
            }
        }
        out.sort_by_key(|r| (r.release_time, r.job));
        Ok(out)
    }
}
