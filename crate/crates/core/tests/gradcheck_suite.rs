use dbg_core::gradcheck::{self, TOLERANCE};

#[test]
fn every_check_is_below_tolerance() {
    let start = std::time::Instant::now();
    let reports = gradcheck::run_all(7).unwrap();
    for r in &reports {
        println!("{:<40} {:>3} coords  max rel err {:.3e}", r.name, r.coordinates, r.max_rel_error);
    }
    println!("elapsed {:?}", start.elapsed());
    let failed: Vec<_> = reports.iter().filter(|r| r.max_rel_error >= TOLERANCE).collect();
    assert!(failed.is_empty(), "{failed:?}");
}

#[test]
fn end_to_end_uses_sixty_four_coordinates() {
    let r = gradcheck::end_to_end_check(gradcheck::end_to_end_config(3), 64, 5).unwrap();
    assert_eq!(r.coordinates, 64);
    assert!(r.passed(), "{r:?}");
}
