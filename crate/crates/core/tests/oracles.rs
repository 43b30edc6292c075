//! Library routines against slow, independently written reference versions,
//! each over at least a thousand random instances.

#[path = "support/oracles.rs"]
mod support;

const CASES: usize = 1000;

fn pass(check: support::Check) {
    if let Err(e) = check {
        panic!("{e}");
    }
}

#[test]
fn iou_matches_cell_enumeration() {
    pass(support::iou_vs_cell_enumeration(CASES));
}

#[test]
fn matching_matches_sorted_pair_oracle() {
    pass(support::matching_vs_sorted_pairs(CASES));
}

#[test]
fn nms_matches_quadratic_reference() {
    pass(support::nms_vs_quadratic(CASES));
}

#[test]
fn sws_rasterization_matches_per_pixel_oracle() {
    pass(support::sws_vs_per_pixel(CASES));
}

#[test]
fn ap_matches_hand_curves() {
    pass(support::ap_vs_hand_curves(CASES));
}

#[test]
fn greedy_matching_matches_oracle() {
    pass(support::greedy_match_vs_oracle(CASES));
}

#[test]
fn hard_negative_mining_matches_full_sort() {
    pass(support::mining_vs_full_sort(CASES));
}
