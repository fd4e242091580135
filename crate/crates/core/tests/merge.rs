mod support;

use proptest::prelude::*;
use support::merge::{check, merge_case};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn merge_matches_reference(case in merge_case()) {
        check(&case)?;
    }
}
