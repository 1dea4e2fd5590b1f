mod common;

use common::*;
use partlabel_core::metrics::{miou, part_accuracy, LabeledPart};

#[test]
fn metrics_match_brute_force_confusion_matrix() {
    println!("{}", check_metrics(100, 3).unwrap_or_else(|e| panic!("{e}")));
    // a different stream of instances too
    check_metrics(500, 99).unwrap_or_else(|e| panic!("{e}"));
}

#[test]
fn zero_point_parts_count_for_accuracy_only() {
    let rows = [
        LabeledPart {
            predicted: "A",
            truth: "B",
            points: 0,
        },
        LabeledPart {
            predicted: "A",
            truth: "A",
            points: 4,
        },
    ];
    assert_eq!(part_accuracy(&rows).unwrap(), 0.5);
    let (m, per) = miou(&rows).unwrap();
    assert_eq!(m, 1.0);
    assert!(!per.contains_key("B"));
}
