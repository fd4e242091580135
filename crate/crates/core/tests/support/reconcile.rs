//! Brute-force reference for file reconciliation: replicas built through
//! the guest file API and an oracle that decides every file from byte
//! comparisons with the base.

use std::collections::BTreeMap;

use detcloud_core::fs::{
    reconcile_fs, FileEntry, FileImage, FsMem, OpenFlags, Outcome, FLAG_APPEND,
};
use detcloud_core::AddressSpace;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

pub const W: u32 = 0x3000_0000;
pub const BUF: u32 = 0x100_0000;
pub const BASE_NAMES: [&str; 8] = ["a", "b", "c", "d", "e", "f", "g", "h"];
pub const NEW_NAMES: [&str; 4] = ["n0", "n1", "n2", "n3"];

#[derive(Debug, Clone)]
pub enum Op {
    Write { file: usize, offset: u32, len: u32 },
    Append { file: usize, len: u32 },
    Create { name: usize, append: bool },
    Delete { file: usize },
}

pub fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0usize..12, 0u32..16, 1u32..6).prop_map(|(file, offset, len)| Op::Write { file, offset, len }),
        3 => (0usize..12, 1u32..6).prop_map(|(file, len)| Op::Append { file, len }),
        1 => (0usize..4, any::<bool>()).prop_map(|(name, append)| Op::Create { name, append }),
        1 => (0usize..12).prop_map(|file| Op::Delete { file }),
    ]
}

pub fn base_image() -> impl Strategy<Value = FileImage> {
    prop::collection::vec(
        (any::<bool>(), prop::collection::vec(b'a'..=b'z', 0..10), any::<bool>()),
        BASE_NAMES.len(),
    )
    .prop_map(|files| {
        let mut img = FileImage::new();
        for (i, (present, data, append)) in files.into_iter().enumerate() {
            if present {
                let flags = if append { FLAG_APPEND } else { 0 };
                img.put(BASE_NAMES[i], data, flags).unwrap();
            }
        }
        img
    })
}

pub fn name_of(file: usize) -> &'static str {
    if file < BASE_NAMES.len() {
        BASE_NAMES[file]
    } else {
        NEW_NAMES[file - BASE_NAMES.len()]
    }
}

/// Applies `ops` through the guest file API. Every successful change writes
/// bytes tagged with `side` and a per-op counter, none of which occur in the
/// base, so a file's content differs from the base iff it was touched.
/// Failing ops (overwrite of an append-only file, missing file) change
/// nothing.
pub fn replica(base: &FileImage, ops: &[Op], side: u8) -> FileImage {
    let mut space = AddressSpace::new();
    base.store(&mut space, W);
    let mut fs = FsMem::new(&mut space, W);
    for (k, op) in ops.iter().enumerate() {
        let tag = |len: u32| -> Vec<u8> {
            (0..len)
                .map(|i| if i == 0 { 0xE0 | side } else { 0x80 | k as u8 })
                .collect()
        };
        match *op {
            Op::Write { file, offset, len } => {
                if let Ok(fd) = fs.open(name_of(file).as_bytes(), OpenFlags::empty()) {
                    fs.space.write_bytes(BUF, &tag(len));
                    let _ = fs.write(fd, BUF, len, offset);
                }
            }
            Op::Append { file, len } => {
                if let Ok(fd) = fs.open(name_of(file).as_bytes(), OpenFlags::empty()) {
                    fs.space.write_bytes(BUF, &tag(len));
                    let _ = fs.append(fd, BUF, len);
                }
            }
            Op::Create { name, append } => {
                let mut flags = OpenFlags::CREATE;
                if append {
                    flags |= OpenFlags::APPEND;
                }
                let _ = fs.open(NEW_NAMES[name].as_bytes(), flags);
            }
            Op::Delete { file } => {
                let _ = fs.delete(name_of(file).as_bytes());
            }
        }
    }
    FileImage::load(&space, W).unwrap()
}

pub type Content = BTreeMap<String, (Vec<u8>, bool, bool)>;

pub fn content(img: &FileImage) -> Content {
    img.files()
        .into_iter()
        .map(|(n, e)| {
            (
                n.to_string(),
                (e.data.clone(), e.meta.append_only(), e.meta.conflict()),
            )
        })
        .collect()
}

pub fn is_append(e: &FileEntry) -> bool {
    e.meta.flags & FLAG_APPEND != 0
}

/// Reference built only from byte comparison against the base contents.
pub fn oracle(base: &FileImage, parent: &FileImage, child: &FileImage) -> (Content, Vec<(String, Outcome)>) {
    let changed = |b: Option<&FileEntry>, x: Option<&FileEntry>| match (b, x) {
        (None, None) => false,
        (Some(b), Some(x)) => b.data != x.data || is_append(b) != is_append(x),
        _ => true,
    };
    let mut out = content(parent);
    let mut names: Vec<String> = content(base)
        .into_keys()
        .chain(content(parent).into_keys())
        .chain(content(child).into_keys())
        .collect();
    names.sort();
    names.dedup();
    let mut report = Vec::new();
    for name in names {
        let (b, p, c) = (base.get(&name), parent.get(&name), child.get(&name));
        let outcome = match (changed(b, p), changed(b, c)) {
            (false, false) => Outcome::Unchanged,
            (true, false) => Outcome::TookParent,
            (false, true) => {
                match c {
                    Some(c) => out.insert(name.clone(), (c.data.clone(), is_append(c), c.meta.conflict())),
                    None => out.remove(&name),
                };
                Outcome::TookChild
            }
            (true, true) => {
                let union = match (b, p, c) {
                    (Some(b), Some(p), Some(c))
                        if is_append(b)
                            && is_append(p)
                            && is_append(c)
                            && p.data.starts_with(&b.data)
                            && c.data.starts_with(&b.data) =>
                    {
                        let mut d = p.data.clone();
                        d.extend_from_slice(&c.data[b.data.len()..]);
                        Some(d)
                    }
                    _ => None,
                };
                let same = match (p, c) {
                    (None, None) => true,
                    (Some(p), Some(c)) => p.data == c.data && is_append(p) == is_append(c),
                    _ => false,
                };
                if let Some(d) = union {
                    out.insert(name.clone(), (d, true, false));
                    Outcome::AppendedUnion
                } else if same {
                    Outcome::TookParent
                } else {
                    match p {
                        Some(p) => out.insert(name.clone(), (p.data.clone(), is_append(p), true)),
                        None => out.insert(name.clone(), (vec![], false, true)),
                    };
                    Outcome::Conflict
                }
            }
        };
        report.push((name, outcome));
    }
    (out, report)
}

pub fn normalized(base: &FileImage) -> FileImage {
    // Round-trip through memory so versions match what the guest API sees.
    let mut space = AddressSpace::new();
    base.store(&mut space, W);
    FileImage::load(&space, W).unwrap()
}

/// Reconciles two replicas of `base` and compares the result and the
/// per-file report with the oracle.
pub fn check_triple(base: &FileImage, pops: &[Op], cops: &[Op]) -> Result<(), TestCaseError> {
    let base = normalized(base);
    let parent = replica(&base, pops, 0);
    let child = replica(&base, cops, 1);
    let (merged, report) = reconcile_fs(&base.versions(), &parent, &child);
    let (expect, expect_report) = oracle(&base, &parent, &child);
    prop_assert_eq!(content(&merged), expect);
    prop_assert_eq!(report.files, expect_report);
    prop_assert!(merged.clock >= parent.clock.max(child.clock));
    Ok(())
}

/// Both sides only append; every append-only file must end up as the base,
/// then the parent's records, then the child's.
pub fn check_append_union(base: &FileImage, pa: &[(usize, u32)], ca: &[(usize, u32)]) -> Result<(), TestCaseError> {
    let base = normalized(base);
    let appends = |v: &[(usize, u32)]| v.iter().map(|&(file, len)| Op::Append { file, len }).collect::<Vec<_>>();
    let parent = replica(&base, &appends(pa), 0);
    let child = replica(&base, &appends(ca), 1);
    let (merged, report) = reconcile_fs(&base.versions(), &parent, &child);
    for (name, b) in base.files() {
        if !b.meta.append_only() {
            continue;
        }
        let n = b.data.len();
        let mut expect = b.data.clone();
        expect.extend_from_slice(&parent.get(name).unwrap().data[n..]);
        expect.extend_from_slice(&child.get(name).unwrap().data[n..]);
        prop_assert_eq!(&merged.get(name).unwrap().data, &expect);
        prop_assert_ne!(report.outcome(name), Some(Outcome::Conflict));
    }
    Ok(())
}
