//! Three-way reconciliation of two file system replicas against the version
//! table captured when they split.

use std::collections::BTreeSet;

use super::{
    read_table, write_entry, EntryMeta, FileEntry, FileImage, FsError, FLAG_APPEND, FLAG_CONFLICT,
    MAX_FILES, MAX_FILE_SIZE,
};
use crate::space::AddressSpace;

/// Per-file metadata captured at a fork. A replica's file is modified iff
/// it was created, deleted, or its version grew since the capture.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VersionTable(pub Vec<Option<EntryMeta>>);

impl VersionTable {
    pub fn load(space: &AddressSpace, addr: u32) -> Result<VersionTable, FsError> {
        read_table(space, addr).map(VersionTable)
    }

    pub fn store(&self, space: &mut AddressSpace, addr: u32) {
        for slot in 0..MAX_FILES {
            write_entry(space, addr, slot, self.0.get(slot).and_then(Option::as_ref));
        }
    }

    pub fn get(&self, name: &str) -> Option<&EntryMeta> {
        self.0.iter().flatten().find(|e| e.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Unchanged,
    TookParent,
    TookChild,
    AppendedUnion,
    Conflict,
}

/// Outcome per file name, in name order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReconciliationReport {
    pub files: Vec<(String, Outcome)>,
}

impl ReconciliationReport {
    pub fn outcome(&self, name: &str) -> Option<Outcome> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, o)| *o)
    }

    pub fn conflicts(&self) -> usize {
        self.files.iter().filter(|(_, o)| *o == Outcome::Conflict).count()
    }
}

fn modified(base: Option<&EntryMeta>, side: Option<&FileEntry>) -> bool {
    match (base, side) {
        (None, None) => false,
        (Some(b), Some(s)) => s.meta.version > b.version,
        _ => true,
    }
}

fn same_content(a: Option<&FileEntry>, b: Option<&FileEntry>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(a), Some(b)) => {
            a.data == b.data && a.meta.flags & FLAG_APPEND == b.meta.flags & FLAG_APPEND
        }
        _ => false,
    }
}

/// Content for an append-only file both sides only appended to: the shared
/// prefix, then the parent's records, then the child's.
fn append_union(b: &EntryMeta, p: &FileEntry, c: &FileEntry) -> Option<Vec<u8>> {
    let all_append = b.append_only() && p.meta.append_only() && c.meta.append_only();
    let n = b.length as usize;
    if !all_append || p.data.len() < n || c.data.len() < n || p.data[..n] != c.data[..n] {
        return None;
    }
    let mut out = p.data.clone();
    out.extend_from_slice(&c.data[n..]);
    (out.len() <= MAX_FILE_SIZE as usize).then_some(out)
}

fn free_slot(img: &FileImage) -> Option<usize> {
    img.slots.iter().position(Option::is_none)
}

/// Merges `child` into `parent`, both descended from the state `base` was
/// captured from.
///
/// Per file: untouched on both sides stays; changed on one side takes that
/// side; appended on both sides of an append-only file concatenates the
/// parent's then the child's new records; changed identically on both sides
/// stays; anything else is a conflict that keeps the parent's content (an
/// empty placeholder if the parent deleted it) and sets its conflict flag.
/// Files new to the parent take its lowest free slots in name order.
pub fn reconcile_fs(
    base: &VersionTable,
    parent: &FileImage,
    child: &FileImage,
) -> (FileImage, ReconciliationReport) {
    let mut out = parent.clone();
    out.clock = parent.clock.max(child.clock);
    let names: BTreeSet<&str> = base
        .0
        .iter()
        .flatten()
        .map(|e| e.name.as_str())
        .chain(parent.files().into_keys())
        .chain(child.files().into_keys())
        .collect();
    let mut report = ReconciliationReport::default();
    for name in names {
        let b = base.get(name);
        let p = parent.get(name);
        let c = child.get(name);
        let outcome = match (modified(b, p), modified(b, c)) {
            (false, false) => Outcome::Unchanged,
            (true, false) => Outcome::TookParent,
            (false, true) => match (out.slot_of(name), c) {
                (Some(s), _) => {
                    out.slots[s] = c.cloned();
                    Outcome::TookChild
                }
                (None, None) => Outcome::TookChild,
                (None, Some(c)) => match free_slot(&out) {
                    Some(s) => {
                        out.slots[s] = Some(c.clone());
                        Outcome::TookChild
                    }
                    None => Outcome::Conflict,
                },
            },
            (true, true) => {
                let union = match (b, p, c) {
                    (Some(b), Some(p), Some(c)) => append_union(b, p, c),
                    _ => None,
                };
                if let Some(data) = union {
                    let s = out.slot_of(name).expect("parent has the file");
                    let version = out.next_version();
                    let e = out.slots[s].as_mut().expect("slot is used");
                    e.meta.length = data.len() as u32;
                    e.meta.version = version;
                    e.data = data;
                    Outcome::AppendedUnion
                } else if same_content(p, c) {
                    Outcome::TookParent
                } else {
                    flag_conflict(&mut out, name);
                    Outcome::Conflict
                }
            }
        };
        report.files.push((name.to_string(), outcome));
    }
    (out, report)
}

fn flag_conflict(img: &mut FileImage, name: &str) {
    if let Some(s) = img.slot_of(name) {
        img.slots[s].as_mut().expect("slot is used").meta.flags |= FLAG_CONFLICT;
        return;
    }
    if let Some(s) = free_slot(img) {
        let version = img.next_version();
        img.slots[s] = Some(FileEntry {
            meta: EntryMeta {
                name: name.to_string(),
                length: 0,
                version,
                flags: FLAG_CONFLICT,
            },
            data: Vec::new(),
        });
    }
}

/// Clears the conflict flag on `name`, leaving its content alone.
pub fn clear_conflict(image: &FileImage, name: &str) -> Result<FileImage, FsError> {
    let mut out = image.clone();
    let s = out.slot_of(name).ok_or(FsError::NotFound)?;
    let e = out.slots[s].as_mut().expect("slot is used");
    if !e.meta.conflict() {
        return Err(FsError::Invalid);
    }
    e.meta.flags &= !FLAG_CONFLICT;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_with(files: &[(&str, &[u8], u32)]) -> FileImage {
        let mut img = FileImage::new();
        for (n, d, f) in files {
            img.put(n, d.to_vec(), *f).unwrap();
        }
        img
    }

    fn append(img: &mut FileImage, name: &str, bytes: &[u8]) {
        let s = img.slot_of(name).unwrap();
        let v = img.next_version();
        let e = img.slots[s].as_mut().unwrap();
        e.data.extend_from_slice(bytes);
        e.meta.length = e.data.len() as u32;
        e.meta.version = v;
    }

    #[test]
    fn only_child_wrote() {
        let base = base_with(&[("f", b"old", 0)]);
        let parent = base.clone();
        let mut child = base.clone();
        child.put("f", b"new".to_vec(), 0).unwrap();
        let (m, r) = reconcile_fs(&base.versions(), &parent, &child);
        assert_eq!(m.get("f").unwrap().data, b"new");
        assert_eq!(r.outcome("f"), Some(Outcome::TookChild));
    }

    #[test]
    fn both_appended_collects_parent_then_child() {
        let base = base_with(&[("log", b"", FLAG_APPEND)]);
        let mut parent = base.clone();
        let mut child = base.clone();
        append(&mut parent, "log", b"A\n");
        append(&mut child, "log", b"B\n");
        let (m, r) = reconcile_fs(&base.versions(), &parent, &child);
        assert_eq!(m.get("log").unwrap().data, b"A\nB\n");
        assert_eq!(r.outcome("log"), Some(Outcome::AppendedUnion));
    }

    #[test]
    fn both_rewrote_is_a_conflict() {
        let base = base_with(&[("f", b"0", 0)]);
        let mut parent = base.clone();
        let mut child = base.clone();
        parent.put("f", b"p".to_vec(), 0).unwrap();
        child.put("f", b"c".to_vec(), 0).unwrap();
        let (m, r) = reconcile_fs(&base.versions(), &parent, &child);
        let f = m.get("f").unwrap();
        assert_eq!(f.data, b"p");
        assert!(f.meta.conflict());
        assert_eq!(r.conflicts(), 1);

        let cleared = clear_conflict(&m, "f").unwrap();
        assert!(!cleared.get("f").unwrap().meta.conflict());
        assert_eq!(cleared.get("f").unwrap().data, b"p");
        assert_eq!(clear_conflict(&cleared, "f"), Err(FsError::Invalid));
        assert_eq!(clear_conflict(&cleared, "g"), Err(FsError::NotFound));
        // Reconcile keeps no memory of flags: the same inputs conflict again.
        let (_, again) = reconcile_fs(&base.versions(), &parent, &child);
        assert_eq!(again, r);
    }

    #[test]
    fn delete_versus_write_conflicts_with_placeholder() {
        let base = base_with(&[("f", b"0", 0)]);
        let mut parent = base.clone();
        let mut child = base.clone();
        parent.remove("f");
        child.put("f", b"c".to_vec(), 0).unwrap();
        let (m, r) = reconcile_fs(&base.versions(), &parent, &child);
        assert_eq!(r.outcome("f"), Some(Outcome::Conflict));
        let f = m.get("f").unwrap();
        assert!(f.meta.conflict() && f.data.is_empty());
    }

    #[test]
    fn child_created_files_take_lowest_free_slots_in_name_order() {
        let base = base_with(&[("a", b"", 0), ("b", b"", 0), ("c", b"", 0)]);
        let mut parent = base.clone();
        parent.remove("a");
        let mut child = base.clone();
        child.put("z", b"1".to_vec(), 0).unwrap();
        child.put("y", b"2".to_vec(), 0).unwrap();
        let (m, _) = reconcile_fs(&base.versions(), &parent, &child);
        assert_eq!(m.slot_of("y"), Some(0));
        assert_eq!(m.slot_of("z"), Some(3));
    }
}
