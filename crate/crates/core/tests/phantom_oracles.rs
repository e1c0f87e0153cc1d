use cpgg_core::numerics::Rng;
use cpgg_core::phantom::{measure_phenotypes, render_cine, sample_params, EF};

fn round_trip_errors(noise: Option<f64>, n: u64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let mut rng = Rng::stream(41, &[i]);
            let mut p = sample_params(&mut rng, 32, 32).unwrap();
            if let Some(s) = noise {
                p.noise = s;
            }
            let c = render_cine(&p, 8, 32, 32, &mut rng).unwrap();
            let m = measure_phenotypes(&c).expect("phantom segments");
            (m[EF] - p.ef_area()).abs()
        })
        .collect()
}

#[test]
fn noiseless_ef_round_trip_within_003_on_95_percent() {
    let errs = round_trip_errors(Some(0.0), 400);
    let ok = errs.iter().filter(|&&e| e <= 0.03).count();
    assert!(ok as f64 >= 0.95 * errs.len() as f64, "{ok}/{}", errs.len());
}

#[test]
fn noisy_ef_round_trip_within_005() {
    let errs = round_trip_errors(Some(0.05), 200);
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    assert!(worst <= 0.05, "worst {worst}");
    let errs = round_trip_errors(None, 200);
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    assert!(worst <= 0.05, "worst {worst}");
}

#[test]
fn measured_phase_and_noise_track_parameters() {
    for i in 0..50u64 {
        let mut rng = Rng::stream(9, &[i]);
        let p = sample_params(&mut rng, 32, 32).unwrap();
        let c = render_cine(&p, 8, 32, 32, &mut rng).unwrap();
        let m = measure_phenotypes(&c).unwrap();
        assert!((m[7] - p.phase).abs() < 0.15, "phase {} vs {}", m[7], p.phase);
        assert!((m[6] - p.noise).abs() < 0.01, "noise {} vs {}", m[6], p.noise);
        assert!((m[3] - p.wall).abs() < 1.0, "wall {} vs {}", m[3], p.wall);
    }
}

