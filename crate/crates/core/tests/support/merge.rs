//! Brute-force reference for the word-level three-way merge.

use detcloud_core::kernel::merge_region;
use detcloud_core::AddressSpace;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

/// Straight-line reference: the three-way rule applied to plain vectors.
pub fn oracle(parent: &mut [u32], child: &[u32], snap: &[u32]) -> Vec<u32> {
    let mut conflicts = Vec::new();
    for i in 0..child.len() {
        let (p, c, s) = (parent[i], child[i], snap[i]);
        if c == s {
            continue;
        }
        if p == s {
            parent[i] = c;
        } else if p != c {
            conflicts.push(i as u32);
        }
    }
    conflicts
}

fn edits(words: usize) -> impl Strategy<Value = Vec<(usize, u32)>> {
    // Values from a tiny range so both sides often write the same thing.
    prop::collection::vec((0..words, 0u32..4), 0..64)
}

fn fill(space: &mut AddressSpace, base: u32, words: &[u32]) {
    for (i, w) in words.iter().enumerate() {
        space.write_u32(base + 4 * i as u32, *w);
    }
}

fn apply(words: &mut [u32], e: &[(usize, u32)]) {
    for &(i, v) in e {
        words[i] = v;
    }
}


/// One random triple: a snapshot of up to 16 pages, and parent and child
/// edits on top of it.
#[derive(Debug, Clone)]
pub struct MergeCase {
    pub pages: usize,
    pub sparse: bool,
    pub seed_words: Vec<u32>,
    pub child_edits: Vec<(usize, u32)>,
    pub parent_edits: Vec<(usize, u32)>,
    pub child_page: u32,
    pub parent_shift: u32,
    pub share: bool,
}

pub fn merge_case() -> impl Strategy<Value = MergeCase> {
    (
        1usize..=16,
        any::<bool>(),
        prop::collection::vec(0u32..3, 16),
        edits(16 * 1024),
        edits(16 * 1024),
        0u32..4,
        prop_oneof![Just(0u32), 0u32..8192],
        any::<bool>(),
    )
        .prop_map(
            |(pages, sparse, seed_words, child_edits, parent_edits, child_page, parent_shift, share)| MergeCase {
                pages,
                sparse,
                seed_words,
                child_edits,
                parent_edits,
                child_page,
                parent_shift,
                share,
            },
        )
}

/// Runs `merge_region` on the case and compares words and conflict set with
/// the oracle.
pub fn check(case: &MergeCase) -> Result<(), TestCaseError> {
    let MergeCase {
        pages,
        sparse,
        ref seed_words,
        ref child_edits,
        ref parent_edits,
        child_page,
        parent_shift,
        share,
    } = *case;
        let words = pages * 1024;
        let mut snap: Vec<u32> = if sparse {
            vec![0; words]
        } else {
            (0..words).map(|i| seed_words[i % 16]).collect()
        };
        apply(&mut snap, &seed_words.iter().enumerate().map(|(i, v)| (i * 97 % words, *v)).collect::<Vec<_>>());
        let clip = |e: &[(usize, u32)]| e.iter().map(|&(i, v)| (i % words, v)).collect::<Vec<_>>();
        let mut child = snap.clone();
        apply(&mut child, &clip(&child_edits));
        let mut parent = snap.clone();
        apply(&mut parent, &clip(&parent_edits));

        let caddr = 0x10_0000 + child_page * 0x1000;
        let paddr = 0x40_0000 + parent_shift * 4;
        let mut s_space = AddressSpace::new();
        fill(&mut s_space, caddr, &snap);
        let mut c_space = s_space.clone();
        fill(&mut c_space, caddr, &child);
        let mut p_space = AddressSpace::new();
        p_space.copy_from(&s_space, caddr, paddr, (words * 4) as u64, share);
        fill(&mut p_space, paddr, &parent);

        let expected = oracle(&mut parent, &child, &snap);
        let report = merge_region(&mut p_space, &c_space, &s_space, paddr, caddr, (words * 4) as u32, share);
        let got: Vec<u32> = report.conflicts.iter().map(|a| (a - paddr) / 4).collect();
        prop_assert_eq!(got, expected);
        for (i, w) in parent.iter().enumerate() {
            prop_assert_eq!(p_space.read_u32(paddr + 4 * i as u32), *w);
        }
        // Nothing outside the destination range moved.
        prop_assert_eq!(p_space.read_u32(paddr.wrapping_sub(4)), 0);
        prop_assert_eq!(p_space.read_u32(paddr + 4 * words as u32), 0);
    Ok(())
}
