use nmog::hsi::{cube_to_matrix, decode_cube, encode_cube, matrix_to_cube};
use nmog::metrics::{evaluate, svd_baseline_cube};
use nmog::noise_sim::{apply_metadata, corrupt, planted_cube, NoiseCase, NoiseSpec};
use nmog::{denoise, Cube, InferenceConfig};
use proptest::prelude::*;

fn config(rank: usize, components: usize, seed: u64) -> InferenceConfig {
    let mut cfg = InferenceConfig {
        normalize: false,
        seed,
        ..Default::default()
    };
    cfg.hyper.rank = rank;
    cfg.hyper.components = components;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cube_bytes_round_trip(rows in 1usize..6, cols in 1usize..6, bands in 1usize..5, seed in any::<u64>()) {
        let n = rows * cols * bands;
        let data: Vec<f32> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32 / 999.0).collect();
        let cube = Cube::new(rows, cols, bands, data).unwrap();
        let bytes = encode_cube(&cube);
        prop_assert_eq!(bytes.len(), 16 + 4 * n);
        prop_assert_eq!(decode_cube(&bytes).unwrap(), cube.clone());
        let back = matrix_to_cube(&cube_to_matrix(&cube), rows, cols).unwrap();
        prop_assert_eq!(back, cube);
    }

    #[test]
    fn metadata_replays_structured_corruption(seed in 0u64..500, case_idx in 2usize..6) {
        let clean = planted_cube(12, 10, 6, 2, seed).unwrap();
        let case = NoiseCase::ALL[case_idx];
        let (noisy, meta) = corrupt(&clean, &NoiseSpec::new(case, seed)).unwrap();
        let replay = apply_metadata(&clean, &meta).unwrap();
        prop_assert_eq!(replay, noisy);
    }
}

#[test]
fn every_case_is_restored_above_the_noisy_input() {
    let clean = planted_cube(24, 24, 16, 3, 5).unwrap();
    for case in NoiseCase::ALL {
        let (noisy, _) = corrupt(&clean, &NoiseSpec::new(case, 8)).unwrap();
        let (restored, report) = denoise(&noisy, &config(8, case.default_components(), 1)).unwrap();
        assert!(report.divergence.is_none());
        assert_eq!(restored.shape(), clean.shape());
        assert!(restored.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let before = evaluate(&clean, &noisy).unwrap().mpsnr;
        let after = evaluate(&clean, &restored).unwrap().mpsnr;
        assert!(
            after > before + 3.0,
            "{case}: {after:.2} vs noisy {before:.2}"
        );
    }
}

#[test]
fn nmog_beats_svd_on_deadlines() {
    let clean = planted_cube(24, 24, 16, 3, 6).unwrap();
    let (noisy, _) = corrupt(&clean, &NoiseSpec::new(NoiseCase::Deadline, 2)).unwrap();
    let (restored, _) = denoise(&noisy, &config(8, 3, 2)).unwrap();
    let svd = svd_baseline_cube(&noisy, 3).unwrap();
    let ours = evaluate(&clean, &restored).unwrap().mpsnr;
    let base = evaluate(&clean, &svd).unwrap().mpsnr;
    assert!(ours > base, "{ours:.2} vs svd {base:.2}");
}

#[test]
fn normalized_denoising_stays_in_unit_range() {
    let clean = planted_cube(10, 10, 8, 2, 1).unwrap();
    let scaled = Cube::new(
        10,
        10,
        8,
        clean.data().iter().map(|v| 40.0 * v + 3.0).collect(),
    )
    .unwrap();
    let mut cfg = config(4, 1, 0);
    cfg.normalize = true;
    let (out, _) = denoise(&scaled, &cfg).unwrap();
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
}
