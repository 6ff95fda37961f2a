use proptest::prelude::*;
use sonotag::taxonomy::{LabelVector, System, Taxonomy};

fn threshold(v: &[f32], tau: f32) -> Vec<f32> {
    v.iter().map(|&s| (s >= tau) as u8 as f32).collect()
}

#[test]
fn layout_is_a_bijection_for_every_system() {
    let tax = Taxonomy::bundled();
    for (system, dim) in [(System::One, 31), (System::Two, 31), (System::Three, 37)] {
        let l = tax.layout(system);
        assert_eq!(l.dim(), dim);
        let mut names: Vec<&str> = (0..l.dim()).map(|s| l.name(s)).collect();
        for slot in 0..l.dim() {
            assert_eq!(l.slot(l.name(slot)), Some(slot));
        }
        names.sort();
        names.dedup();
        assert_eq!(names.len(), dim, "duplicate slot names in {system:?}");
    }
    assert_eq!(tax.n_other(), 6);
}

proptest! {
    #[test]
    fn coarsening_is_monotone(
        fine in prop::collection::vec(0.0f32..1.0, 23),
        i in 0usize..23,
        bump in 0.0f32..1.0,
    ) {
        let tax = Taxonomy::bundled();
        let before = tax.fine_to_coarse(&fine);
        let mut raised = fine.clone();
        raised[i] = (raised[i] + bump).min(1.0);
        let after = tax.fine_to_coarse(&raised);
        for (b, a) in before.iter().zip(&after) {
            prop_assert!(a >= b);
        }
    }

    #[test]
    fn coarse_dominates_children(fine in prop::collection::vec(0.0f32..1.0, 23)) {
        let tax = Taxonomy::bundled();
        let coarse = tax.fine_to_coarse(&fine);
        for c in 0..tax.n_coarse() {
            for &k in tax.children(c) {
                prop_assert!(coarse[c] >= fine[k]);
            }
        }
    }

    #[test]
    fn thresholding_keeps_the_hierarchy(
        fine in prop::collection::vec(0.0f32..1.0, 23),
        tau in 0.01f32..0.99,
    ) {
        let tax = Taxonomy::bundled();
        let label = LabelVector {
            coarse: threshold(&tax.fine_to_coarse(&fine), tau),
            fine: threshold(&fine, tau),
            fine_mask: vec![1.0; 23],
            other: None,
        };
        prop_assert!(label.is_hierarchy_consistent(&tax));
        prop_assert_eq!(tax.fine_to_coarse(&label.fine), label.coarse);
    }
}
