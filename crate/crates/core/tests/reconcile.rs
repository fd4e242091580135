mod support;

use detcloud_core::fs::{reconcile_fs, FileImage, FsMem, OpenFlags, Outcome, FLAG_CONFLICT};
use detcloud_core::AddressSpace;
use proptest::prelude::*;
use support::reconcile::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn reconcile_matches_byte_oracle(
        base in base_image(),
        pops in prop::collection::vec(op(), 0..10),
        cops in prop::collection::vec(op(), 0..10),
    ) {
        check_triple(&base, &pops, &cops)?;
    }

    #[test]
    fn one_sided_changes_are_symmetric(base in base_image(), ops in prop::collection::vec(op(), 0..10)) {
        let base = normalized(&base);
        let changed = replica(&base, &ops, 0);
        let (a, ra) = reconcile_fs(&base.versions(), &changed, &base);
        let (b, rb) = reconcile_fs(&base.versions(), &base, &changed);
        prop_assert_eq!(content(&a), content(&b));
        prop_assert_eq!(content(&a), content(&changed));
        for ((na, oa), (nb, ob)) in ra.files.iter().zip(&rb.files) {
            prop_assert_eq!(na, nb);
            match oa {
                Outcome::TookParent => prop_assert_eq!(*ob, Outcome::TookChild),
                Outcome::Unchanged => prop_assert_eq!(*ob, Outcome::Unchanged),
                other => prop_assert!(false, "unexpected {:?}", other),
            }
        }
    }

    #[test]
    fn append_union_keeps_every_byte_parent_first(
        base in base_image(),
        pa in prop::collection::vec((0usize..8, 1u32..6), 0..8),
        ca in prop::collection::vec((0usize..8, 1u32..6), 0..8),
    ) {
        check_append_union(&base, &pa, &ca)?;
    }

    #[test]
    fn reconciling_a_replica_with_itself_is_identity(
        base in base_image(),
        ops in prop::collection::vec(op(), 0..10),
    ) {
        // Appends to append-only files are excluded: two identical replicas
        // that both appended are two writers, and their records are kept
        // twice.
        let base = normalized(&base);
        let ops: Vec<Op> = ops
            .into_iter()
            .filter(|o| match o {
                Op::Append { file, .. } => base.get(name_of(*file)).is_some_and(|e| !e.meta.append_only()),
                _ => true,
            })
            .collect();
        let x = replica(&base, &ops, 0);
        let (merged, report) = reconcile_fs(&base.versions(), &x, &x);
        prop_assert_eq!(content(&merged), content(&x));
        prop_assert_eq!(report.conflicts(), 0);
    }
}

#[test]
fn conflict_flag_blocks_access_until_cleared() {
    let base = normalized(&FileImage::from_files([("f", &b"0"[..])]).unwrap());
    let parent = replica(&base, &[Op::Write { file: 5, offset: 0, len: 2 }], 0);
    let child = replica(&base, &[Op::Write { file: 5, offset: 0, len: 3 }], 1);
    let (merged, report) = reconcile_fs(&base.versions(), &parent, &child);
    assert_eq!(report.outcome("f"), Some(Outcome::Conflict));
    let mut space = AddressSpace::new();
    merged.store(&mut space, W);
    let mut fs = FsMem::new(&mut space, W);
    assert_eq!(
        fs.open(b"f", OpenFlags::empty()),
        Err(detcloud_core::fs::FsError::Conflict)
    );
    fs.clear_conflict(b"f").unwrap();
    let fd = fs.open(b"f", OpenFlags::empty()).unwrap();
    assert_eq!(fs.size(fd), Ok(2));
    assert_eq!(merged.get("f").unwrap().meta.flags & FLAG_CONFLICT, FLAG_CONFLICT);
}
