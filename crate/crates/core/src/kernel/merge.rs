//! Word-level three-way merge of a child's changes into its parent.

use std::sync::Arc;

use crate::space::{AddressSpace, PAGE_MASK, PAGE_SHIFT, PAGE_SIZE};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeReport {
    /// Parent addresses of words changed on both sides to different values,
    /// ascending.
    pub conflicts: Vec<u32>,
}

#[inline]
fn merge_word(parent: &mut AddressSpace, pa: u32, c: u32, s: u32, conflicts: &mut Vec<u32>) {
    if c == s {
        return;
    }
    let p = parent.read_u32(pa);
    if p == s {
        parent.write_u32(pa, c);
    } else if p != c {
        conflicts.push(pa);
    }
}

/// Merges `[child_addr, child_addr + len)` of `child` into `parent` at
/// `parent_addr`, using `snapshot` as the common base.
///
/// For every word the child changed relative to the snapshot: if the parent
/// still holds the snapshot value it takes the child's value; if the parent
/// changed it to something else the word is reported as a conflict and left
/// alone. Words the child did not change are never touched. Addresses and
/// length must be 4-aligned and must not wrap.
///
/// When `share` is set, pages left untouched by the parent are taken from the
/// child by reference instead of word by word; the result is identical.
pub fn merge_region(
    parent: &mut AddressSpace,
    child: &AddressSpace,
    snapshot: &AddressSpace,
    parent_addr: u32,
    child_addr: u32,
    len: u32,
    share: bool,
) -> MergeReport {
    debug_assert_eq!((parent_addr | child_addr | len) & 3, 0);
    let mut report = MergeReport::default();
    if len == 0 {
        return report;
    }
    let last = child_addr as u64 + len as u64 - 1;
    let first_pn = child_addr >> PAGE_SHIFT;
    let last_pn = (last >> PAGE_SHIFT) as u32;

    // Only pages mapped in the child or the snapshot can differ.
    let mut candidates: Vec<u32> = child
        .pages_in(first_pn, last_pn)
        .chain(snapshot.pages_in(first_pn, last_pn))
        .collect();
    candidates.sort_unstable();
    candidates.dedup();

    let same_offset = (parent_addr & PAGE_MASK) == (child_addr & PAGE_MASK);
    let delta = parent_addr.wrapping_sub(child_addr);

    for cpn in candidates {
        let page_start = (cpn as u64) << PAGE_SHIFT;
        let lo = page_start.max(child_addr as u64);
        let hi = (page_start + PAGE_SIZE as u64).min(last + 1);
        let c = child.page(cpn);
        let s = snapshot.page(cpn);
        match (c, s) {
            (Some(c), Some(s)) if Arc::ptr_eq(c, s) => continue,
            (None, None) => continue,
            _ => {}
        }
        let full = lo == page_start && hi == page_start + PAGE_SIZE as u64;
        if share && same_offset && full {
            let ppn = ((page_start as u32).wrapping_add(delta)) >> PAGE_SHIFT;
            let parent_untouched = match (parent.page(ppn), s) {
                (Some(p), Some(s)) => Arc::ptr_eq(p, s),
                (None, None) => true,
                _ => false,
            };
            if parent_untouched {
                parent.set_page(ppn, c.cloned());
                continue;
            }
        }
        let mut a = lo;
        while a < hi {
            let ca = a as u32;
            let off = (ca & PAGE_MASK) as usize;
            let cw = c.map_or(0, |p| u32::from_le_bytes(p[off..off + 4].try_into().unwrap()));
            let sw = s.map_or(0, |p| u32::from_le_bytes(p[off..off + 4].try_into().unwrap()));
            merge_word(parent, ca.wrapping_add(delta), cw, sw, &mut report.conflicts);
            a += 4;
        }
    }
    report
}
