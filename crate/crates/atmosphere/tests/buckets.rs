use atmosphere::report::{bucketize, EmptyInput};
use proptest::prelude::*;

/// Independent recount: each latency is compared against the bucket edges
/// as integers, without the implementation's cascade.
fn recount(latencies: &[f64]) -> [usize; 5] {
    let mut c = [0; 5];
    for &l in latencies {
        let ms = (l + 0.5).floor() as i64;
        let i = match ms {
            i64::MIN..=5 => 0,
            6..=10 => 1,
            11..=50 => 2,
            51..=100 => 3,
            _ => 4,
        };
        c[i] += 1;
    }
    c
}

#[test]
fn one_per_bucket() {
    assert_eq!(bucketize(&[3.0, 7.0, 20.0, 60.0, 200.0]).unwrap(), [20.0; 5]);
}

#[test]
fn all_zero() {
    assert_eq!(bucketize(&[0.0; 12]).unwrap(), [100.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn empty_input() {
    assert_eq!(bucketize(&[]), Err(EmptyInput));
}

#[test]
fn ten_thousand_random_latencies_match_recount() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let values: Vec<f64> = (0..10_000).map(|_| rng.gen_range(0.0..250.0)).collect();
    let pct = bucketize(&values).unwrap();
    let counts = recount(&values);
    for i in 0..5 {
        assert_eq!(pct[i], 100.0 * counts[i] as f64 / 10_000.0);
    }
}

proptest! {
    #[test]
    fn percentages_match_recount(values in prop::collection::vec(0.0f64..400.0, 1..2000)) {
        let pct = bucketize(&values).unwrap();
        let counts = recount(&values);
        let n = values.len() as f64;
        for i in 0..5 {
            prop_assert_eq!(pct[i], 100.0 * counts[i] as f64 / n);
        }
        prop_assert!((pct.iter().sum::<f64>() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn integer_boundaries(ms in 0u32..200) {
        let pct = bucketize(&[ms as f64]).unwrap();
        let expected = match ms { 0..=5 => 0, 6..=10 => 1, 11..=50 => 2, 51..=100 => 3, _ => 4 };
        prop_assert_eq!(pct[expected], 100.0);
    }
}
