use dbg_demo::{labels, parse_gts, plan, rank};

#[test]
fn plan_reports_every_tap() {
    let v = plan(0, 12, 8, 16, 8, 20).unwrap();
    let taps = v["taps"].as_array().unwrap();
    assert_eq!(taps.len(), 32);
    assert_eq!(taps.iter().filter(|t| t["region"] == "center").count(), 16);
    for t in taps {
        let sum = t["w_left"].as_f64().unwrap() + t["w_right"].as_f64().unwrap();
        assert_eq!(sum, 1.0);
    }
    // the left region of a proposal starting at 0 reaches below zero
    assert!(taps.iter().any(|t| t["inside"] == false));
    assert!(plan(5, 5, 8, 16, 8, 20).is_err());
    assert!(plan(0, 3, 1, 16, 8, 20).is_err());
}

#[test]
fn gt_text_is_validated() {
    assert_eq!(parse_gts("3-9, 12.5-19", 20).unwrap().len(), 2);
    assert!(parse_gts("", 20).unwrap().is_empty());
    assert!(parse_gts("3", 20).is_err());
    assert!(parse_gts("9-3", 20).is_err());
    assert!(parse_gts("10-25", 20).is_err());
}

#[test]
fn label_maps_match_the_ground_truth() {
    let v = labels(16, "4-10").unwrap();
    let act: Vec<bool> = v["actionness"].as_array().unwrap().iter().map(|b| b.as_bool().unwrap()).collect();
    let positive: Vec<usize> = (0..16).filter(|&i| act[i]).collect();
    assert_eq!(positive, (5..10).collect::<Vec<_>>());
    let start: Vec<bool> = v["start"].as_array().unwrap().iter().map(|b| b.as_bool().unwrap()).collect();
    assert_eq!((0..16).filter(|&i| start[i]).collect::<Vec<_>>(), vec![4]);
    let gc = v["completeness"].as_array().unwrap();
    assert_eq!(gc.len(), 256);
    assert_eq!(gc[4 * 16 + 10].as_f64().unwrap(), 1.0);
}

#[test]
fn soft_nms_only_lowers_scores() {
    let v = rank(24, "3-9, 14-20", 0.1, 7, 0.8, 0.75, true, 10).unwrap();
    assert_eq!(v["candidates"], 24 * 23 / 2);
    let top = &v["after"][0];
    assert_eq!((top["start"].as_f64().unwrap(), top["end"].as_f64().unwrap()), (3.0, 9.0));
    let best_before = v["before"][0]["score"].as_f64().unwrap();
    for p in v["after"].as_array().unwrap() {
        assert!(p["score"].as_f64().unwrap() <= best_before);
    }
    assert_eq!(rank(24, "3-9", 0.1, 7, 0.8, 0.75, true, 10).unwrap(), rank(24, "3-9", 0.1, 7, 0.8, 0.75, true, 10).unwrap());
    assert!(rank(24, "3-9", 2.0, 7, 0.8, 0.75, true, 10).is_err());
}
