mod common;

use common::{metrics, raster};

#[test]
fn raster_rigid_transform_invariance() {
    raster::rigid_invariance(31).unwrap();
}

#[test]
fn raster_layer_ranges() {
    raster::layer_ranges(32).unwrap();
}

#[test]
fn raster_ego_position_is_constant() {
    raster::ego_position(33).unwrap();
}

#[test]
fn raster_polygon_fill_matches_scan() {
    raster::polygon_scan(34).unwrap();
}

#[test]
fn metric_hand_cases() {
    metrics::hand_cases().unwrap();
}

#[test]
fn metrics_ignore_label_names() {
    metrics::permutation_invariance(metrics::CASES).unwrap();
}

#[test]
fn derived_subsets_partition_the_frames() {
    metrics::partition(metrics::CASES).unwrap();
}

#[test]
fn merging_clusters_never_lowers_tp() {
    metrics::merge_monotone(metrics::CASES).unwrap();
}

#[test]
fn homogeneous_clusters_have_no_false_positives() {
    metrics::homogeneous_zero_fp(metrics::CASES).unwrap();
}
