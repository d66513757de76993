use morphwalk::ballwalk::{
    ensemble_snapshots, run_chain, run_chain_indexed, step, uniform_in_ball, warm_start_m, ChainConfig, StartRule,
};
use morphwalk::geometry::Domain;
use morphwalk::rng::{stream, Purpose};
use proptest::prelude::*;

/// Kolmogorov critical value at α = 0.01 for large samples.
const KS_001: f64 = 1.6276;

#[test]
fn ball_draws_stay_inside_and_center_correctly() {
    let mut r = stream(1, Purpose::Misc, 0);
    let c = [0.3, -0.7];
    let n = 1_000_000;
    let mut out = [0.0; 2];
    let (mut sx, mut sy) = (0.0, 0.0);
    for _ in 0..n {
        uniform_in_ball(&c, 0.5, &mut r, &mut out);
        assert!((out[0] - c[0]).hypot(out[1] - c[1]) <= 0.5);
        sx += out[0];
        sy += out[1];
    }
    // each coordinate of a uniform disk point has variance r^2/4
    let sigma = 0.25 / (n as f64).sqrt();
    assert!((sx / n as f64 - c[0]).abs() < 4.0 * sigma);
    assert!((sy / n as f64 - c[1]).abs() < 4.0 * sigma);
}

#[test]
fn radial_law_passes_kolmogorov_smirnov() {
    for dim in [1usize, 2, 3, 5] {
        let mut r = stream(dim as u64, Purpose::Misc, 0);
        let c = vec![0.0; dim];
        let mut out = vec![0.0; dim];
        let n = 20_000;
        let mut rho: Vec<f64> = (0..n)
            .map(|_| {
                uniform_in_ball(&c, 2.0, &mut r, &mut out);
                out.iter().map(|v| v * v).sum::<f64>().sqrt() / 2.0
            })
            .collect();
        rho.sort_by(f64::total_cmp);
        let mut d = 0.0f64;
        for (i, p) in rho.iter().enumerate() {
            let f = p.powi(dim as i32);
            d = d.max((f - i as f64 / n as f64).abs()).max(((i + 1) as f64 / n as f64 - f).abs());
        }
        assert!(d * (n as f64).sqrt() < KS_001, "dim {dim}: D = {d}");
    }
}

#[test]
fn center_of_disk_always_moves() {
    let cfg = ChainConfig::new(0.1, 0, 1, StartRule::Uniform);
    let mut r = stream(2, Purpose::Misc, 0);
    for _ in 0..10_000 {
        let (y, moved) = step(&[0.0, 0.0], &Domain::unit_disk(), &cfg, &mut r).unwrap();
        assert!(moved && y != vec![0.0, 0.0]);
    }
}

#[test]
fn corner_accepts_a_quarter() {
    let cfg = ChainConfig::new(0.1, 0, 1, StartRule::Uniform);
    let mut r = stream(3, Purpose::Misc, 0);
    let n = 100_000;
    let mut acc = 0;
    for _ in 0..n {
        let (y, moved) = step(&[0.0, 0.0], &Domain::unit_square(), &cfg, &mut r).unwrap();
        if moved {
            acc += 1;
        } else {
            assert_eq!(y, vec![0.0, 0.0]);
        }
    }
    let f = acc as f64 / n as f64;
    assert!((f - 0.25).abs() < 0.01, "{f}");
}

#[test]
fn visits_are_uniform_over_a_4x4_grid() {
    let steps = 100_000;
    let cfg = ChainConfig::new(0.1, steps, 11, StartRule::Uniform);
    let tr = run_chain(&Domain::unit_square(), &cfg).unwrap();
    // batch means absorb the autocorrelation of one chain
    let batches = 100;
    let len = steps / batches;
    let mut freq = vec![vec![0.0; 16]; batches];
    for (t, x) in tr.states[1..].iter().enumerate() {
        let cell = ((x[0] * 4.0) as usize).min(3) + 4 * ((x[1] * 4.0) as usize).min(3);
        freq[t / len][cell] += 1.0 / len as f64;
    }
    for cell in 0..16 {
        let vals: Vec<f64> = freq.iter().map(|f| f[cell]).collect();
        let mean = vals.iter().sum::<f64>() / batches as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
        let sigma = (var / batches as f64).sqrt();
        assert!((mean - 1.0 / 16.0).abs() <= 3.0 * sigma, "cell {cell}: {mean} ± {sigma}");
    }
}

#[test]
fn all_states_are_members_and_rejections_stay() {
    let cfg = ChainConfig::new(0.3, 20_000, 5, StartRule::Point(vec![0.1, 0.1]));
    let tr = run_chain(&Domain::LShape, &cfg).unwrap();
    assert_eq!(tr.states.len(), 20_001);
    for (t, x) in tr.states.iter().enumerate() {
        assert!(Domain::LShape.contains(x).unwrap());
        if t > 0 && !tr.accepted[t - 1] {
            assert_eq!(tr.states[t], tr.states[t - 1]);
        }
    }
    let acc = tr.accepted.iter().filter(|a| **a).count() as f64 / 20_000.0;
    assert_eq!(acc, tr.acceptance_rate);
}

#[test]
fn runs_are_deterministic() {
    let cfg = ChainConfig::new(0.2, 1000, 77, StartRule::Uniform);
    let a = run_chain_indexed(&Domain::LShape, &cfg, 4).unwrap();
    let b = run_chain_indexed(&Domain::LShape, &cfg, 4).unwrap();
    let c = run_chain_indexed(&Domain::LShape, &cfg, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.states, c.states);
}

#[test]
fn lazy_walk_moves_half_as_often() {
    let mut cfg = ChainConfig::new(0.2, 200_000, 8, StartRule::Point(vec![0.5, 0.5]));
    let plain = run_chain(&Domain::unit_square(), &cfg).unwrap();
    cfg.lazy = true;
    let lazy = run_chain(&Domain::unit_square(), &cfg).unwrap();
    let ratio = lazy.acceptance_rate / plain.acceptance_rate;
    assert!((ratio - 0.5).abs() < 0.01, "{ratio}");
}

#[test]
fn proposal_kernel_is_symmetric() {
    // P(x → B(y, δ)) against P(y → B(x, δ)) near the reentrant corner
    let (x, y) = ([0.45, 0.56], [0.53, 0.47]);
    let (r, delta, n) = (0.2, 0.03, 400_000);
    let cfg = ChainConfig::new(r, 0, 1, StartRule::Uniform);
    let hits = |from: [f64; 2], to: [f64; 2], seed: u64| {
        let mut g = stream(seed, Purpose::Misc, 0);
        (0..n)
            .filter(|_| {
                let (z, moved) = step(&from, &Domain::LShape, &cfg, &mut g).unwrap();
                moved && (z[0] - to[0]).hypot(z[1] - to[1]) < delta
            })
            .count() as f64
    };
    let (a, b) = (hits(x, y, 1) / n as f64, hits(y, x, 2) / n as f64);
    let sigma = (a * (1.0 - a) / n as f64 + b * (1.0 - b) / n as f64).sqrt();
    assert!((a - b).abs() <= 3.0 * sigma, "{a} vs {b}");
    // both equal the area ratio of the small disk to the proposal disk
    let expect = (delta / r).powi(2);
    assert!((a - expect).abs() <= 4.0 * (expect / n as f64).sqrt(), "{a} vs {expect}");
}

#[test]
fn uniform_law_is_invariant_after_one_step() {
    let n = 200_000;
    let cfg = ChainConfig::new(0.25, 1, 21, StartRule::Uniform);
    let snaps = ensemble_snapshots(&Domain::LShape, &cfg, n, &[0, 1]).unwrap();
    let count = |states: &Vec<Vec<f64>>| {
        let mut c = [0usize; 16];
        for x in states {
            c[((x[0] * 4.0) as usize).min(3) + 4 * ((x[1] * 4.0) as usize).min(3)] += 1;
        }
        c
    };
    let after = count(&snaps.states[1]);
    for (cell, &k) in after.iter().enumerate() {
        let (i, j) = (cell % 4, cell / 4);
        let p = if i >= 2 && j >= 2 { 0.0 } else { 1.0 / 12.0 };
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let f = k as f64 / n as f64;
        assert!((f - p).abs() <= 3.0 * sigma.max(1e-12), "cell {cell}: {f} vs {p}");
    }
}

#[test]
fn subregion_start_constant() {
    let region = Domain::cube(vec![0.0, 0.0], vec![0.5, 0.5]).unwrap();
    let m = warm_start_m(&Domain::unit_square(), &region, 200_000, 3).unwrap();
    assert!((m.value - 4.0).abs() < 1e-12, "{m:?}");
    let cfg = ChainConfig::new(0.1, 0, 4, StartRule::Subregion(region));
    let snaps = ensemble_snapshots(&Domain::unit_square(), &cfg, 1000, &[0]).unwrap();
    assert!(snaps.states[0].iter().all(|x| x[0] <= 0.5 && x[1] <= 0.5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chains_never_leave(seed in 0u64..1_000, r in 0.01f64..0.8, lazy: bool) {
        let mut cfg = ChainConfig::new(r, 300, seed, StartRule::Uniform);
        cfg.lazy = lazy;
        for dom in [Domain::LShape, Domain::unit_disk()] {
            let tr = run_chain(&dom, &cfg).unwrap();
            prop_assert!(tr.states.iter().all(|x| dom.contains(x).unwrap()));
        }
    }
}
