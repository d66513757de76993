use morphwalk::flow::{build_map, jacobian_dets, FlowConfig};
use morphwalk::geometry::Domain;
use morphwalk::potential::PotentialSpec;

#[test]
fn generic_pipeline_conserves_det_under_refinement() {
    let run = |h: f64, steps: usize| {
        let mut cfg = FlowConfig::new(Domain::unit_disk(), PotentialSpec::parse("x^2*sin(y)*t").unwrap(), steps, h);
        cfg.seed_spacing = 0.05;
        jacobian_dets(&build_map(cfg).unwrap())
    };
    let coarse = run(0.01, 100);
    let fine = run(0.005, 200);
    println!("coarse: det {:e}, fd {:e}", coarse.max_abs_dev, coarse.fd_max_abs_dev);
    println!("fine:   det {:e}, fd {:e}", fine.max_abs_dev, fine.fd_max_abs_dev);
    assert!(fine.max_abs_dev <= 1e-2, "{}", fine.max_abs_dev);
    // the propagated Jacobians sit at the time-stepping floor, so the
    // refinement trend is read off the seed-lattice finite differences,
    // which see the boundary-layer volume error of the realized map
    assert!(fine.fd_max_abs_dev <= 1e-2, "{}", fine.fd_max_abs_dev);
    assert!(fine.fd_max_abs_dev < coarse.fd_max_abs_dev);
}
