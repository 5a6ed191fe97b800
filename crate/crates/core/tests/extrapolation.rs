use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rope2d::attention::{attend, PeMode, RpbBias};
use rope2d::posembed::{expand_rpb, extend_rpb, make_grid, RpbExtension, RpbTable};
use rope2d::rope::{freqs_axial, FrequencySet, HeadTensor, RotationTable};

fn rand_head(rng: &mut ChaCha8Rng, n: usize, d: usize) -> HeadTensor {
    HeadTensor::new(ndarray::Array2::from_shape_simple_fn((n, d), || {
        rng.random_range(-2.0..2.0)
    }))
}

#[test]
fn frequencies_transfer_to_a_larger_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let small = make_grid(14, 14, true).unwrap();
    let large = make_grid(24, 24, true).unwrap();
    let pairs: Vec<(f64, f64)> = (0..16)
        .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    for freqs in [
        freqs_axial(32, 100.0).unwrap(),
        FrequencySet::mixed(32, &pairs).unwrap(),
    ] {
        let _ = RotationTable::build(&freqs, &small);
        let table = RotationTable::build(&freqs, &large);
        let q = rand_head(&mut rng, large.num_tokens(), 32);
        let k = rand_head(&mut rng, large.num_tokens(), 32);
        let r = attend(&q, &k, &PeMode::Rope(table)).unwrap();
        for row in r.probs.rows() {
            assert!(row.iter().all(|v| v.is_finite()));
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn bias_tables_zero_pad_beyond_their_extent() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let small = make_grid(14, 14, true).unwrap();
    let large = make_grid(24, 24, true).unwrap();
    let table = RpbTable::random(&small, 1.0, &mut rng);
    assert!(expand_rpb(&table, &large, RpbExtension::Strict).is_err());
    let padded = expand_rpb(&table, &large, RpbExtension::ZeroPad).unwrap();
    let extended = expand_rpb(
        &extend_rpb(&table, 24, 24).unwrap(),
        &large,
        RpbExtension::Strict,
    )
    .unwrap();
    assert_eq!(padded, extended);
    let q = rand_head(&mut rng, large.num_tokens(), 8);
    let bias = RpbBias {
        extension: RpbExtension::ZeroPad,
        ..RpbBias::new(table, large)
    };
    let r = attend(&q, &q, &PeMode::Rpb(bias)).unwrap();
    for row in r.probs.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-9);
    }
}
