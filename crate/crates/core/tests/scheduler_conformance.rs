mod common;

use common::*;

#[test]
fn state_machine_matches_reference_on_random_instances() {
    let summary = check_scheduler(400, 1).unwrap_or_else(|e| panic!("{e}"));
    println!("{summary}");
}

#[test]
fn instances_exercise_every_rule() {
    // the generator must actually produce stops, pool stops and ties
    let mut stops = 0;
    let mut pool_stops = 0;
    let mut failure_cap = 0;
    for seed in 0..200 {
        let inst = random_instance(seed, 30);
        let traces = reference_node(&inst);
        pool_stops += traces.iter().filter(|t| t.pool_stopped).count();
        for t in &traces {
            if let (Some(b), Some(v)) = (t.batches.last(), t.verdicts.last()) {
                if b.len() == 10 && v.iter().filter(|x| **x).count() < 4 {
                    stops += 1;
                }
            }
        }
        if traces.len() > 3 {
            failure_cap += 1;
        }
    }
    assert!(stops > 20, "{stops}");
    assert!(pool_stops > 20, "{pool_stops}");
    assert!(failure_cap > 5, "{failure_cap}");
}

#[test]
fn pool_below_threshold_goes_straight_to_modification() {
    let mut inst = random_instance(7, 30);
    inst.config.pool_stop = 40;
    let traces = drive_node(&inst).unwrap();
    assert_eq!(traces.len(), 1);
    assert!(traces[0].pool_stopped);
    assert!(traces[0].batches.is_empty());
    assert_eq!(traces[0].modified.len(), 30);
}

#[test]
fn symmetry_filter_keeps_inconsistent_proposals_out_of_verification() {
    for seed in 0..100 {
        let mut inst = random_instance(seed, 30);
        inst.config.symmetry = true;
        inst.config.use_proposer = true;
        inst.config.pool_stop = 0;
        let traces = drive_node(&inst).unwrap();
        for (it, t) in traces.iter().enumerate() {
            let props = instance_proposals(&inst, it as u32, &t.batches.concat());
            assert!(props.iter().all(|p| p.symmetric_consistent), "seed {seed} iteration {it}");
        }
    }
}
