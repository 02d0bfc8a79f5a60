use std::collections::BTreeMap;

use cbs_core::image_core::{composite_multi, composite_single, composite_soft, feather_mask};
use cbs_core::{ClassMask, Error, Frame, SoftMask, StyleAssignment};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Frame {
    Frame::from_fn(h, w, |_, _| std::array::from_fn(|_| rng.random_range(0.0..=1.0))).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, class: u32, h: usize, w: usize) -> ClassMask {
    let p = rng.random_range(0.0..1.0);
    ClassMask::from_fn(class, h, w, |_, _| rng.random_bool(p))
}

/// Per-pixel blend evaluated independently for each pixel and channel.
fn oracle(i: &Frame, t: &Frame, r: &ClassMask) -> Vec<f64> {
    let mut out = Vec::new();
    for y in 0..i.height() {
        for x in 0..i.width() {
            let rv = if r.get(y, x) { 1.0 } else { 0.0 };
            for c in 0..3 {
                out.push(rv * t.pixel(y, x)[c] + (1.0 - rv) * i.pixel(y, x)[c]);
            }
        }
    }
    out
}

#[test]
fn thousand_random_triples_match_oracle_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..=128), rng.random_range(1..=128));
        let i = random_frame(&mut rng, h, w);
        let t = random_frame(&mut rng, h, w);
        let r = random_mask(&mut rng, 1, h, w);
        let u = composite_single(&i, &t, &r).unwrap();
        let want = oracle(&i, &t, &r);
        assert!(u.pixels().iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()));
        // every pixel is copied from exactly one source
        for y in 0..h {
            for x in 0..w {
                let src = if r.get(y, x) { &t } else { &i };
                assert_eq!(u.pixel(y, x), src.pixel(y, x));
            }
        }
    }
}

#[test]
fn spec_examples() {
    let i = Frame::filled(2, 2, 0.2).unwrap();
    let t = Frame::filled(2, 2, 0.8).unwrap();
    let diag = ClassMask::new(1, 2, 2, vec![1, 0, 0, 1]).unwrap();
    let u = composite_single(&i, &t, &diag).unwrap();
    assert_eq!(u.pixels().chunks(3).map(|p| p[0]).collect::<Vec<_>>(), vec![0.8, 0.2, 0.2, 0.8]);

    let input = Frame::filled(2, 2, 0.5).unwrap();
    let styled = BTreeMap::from([
        ("A".to_string(), Frame::filled(2, 2, 0.9).unwrap()),
        ("B".to_string(), Frame::filled(2, 2, 0.1).unwrap()),
    ]);
    let masks = [ClassMask::new(1, 2, 2, vec![1, 1, 0, 0]).unwrap(), ClassMask::new(2, 2, 2, vec![0, 0, 1, 0]).unwrap()];
    let assign = StyleAssignment::new().with(1, "A").with(2, "B");
    let u = composite_multi(&input, &styled, &masks, &assign).unwrap();
    assert_eq!(u.pixels().chunks(3).map(|p| p[1]).collect::<Vec<_>>(), vec![0.9, 0.9, 0.1, 0.5]);

    let f: SoftMask = feather_mask(&ClassMask::new(0, 1, 4, vec![0, 0, 1, 1]).unwrap(), 1);
    let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    assert!(f.weights().iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15));
}

#[test]
fn multi_class_errors() {
    let i = Frame::filled(2, 2, 0.5).unwrap();
    let styled = BTreeMap::from([("A".to_string(), Frame::filled(2, 2, 0.9).unwrap())]);
    let overlapping = [ClassMask::new(1, 2, 2, vec![1, 1, 0, 0]).unwrap(), ClassMask::new(2, 2, 2, vec![0, 1, 0, 0]).unwrap()];
    let assign = StyleAssignment::new().with(1, "A");
    assert!(matches!(composite_multi(&i, &styled, &overlapping, &assign), Err(Error::OverlappingMasks { .. })));
    let masks = [ClassMask::new(1, 2, 2, vec![1, 1, 0, 0]).unwrap(), ClassMask::new(2, 2, 2, vec![0, 0, 1, 0]).unwrap()];
    let missing = StyleAssignment::new().with(1, "A").with(2, "B");
    assert!(matches!(composite_multi(&i, &styled, &masks, &missing), Err(Error::MissingStyle { class: 2, .. })));
    let small = Frame::filled(1, 2, 0.5).unwrap();
    assert!(matches!(composite_single(&small, &i, &masks[0]), Err(Error::Shape(_))));
}

proptest! {
    #[test]
    fn idempotent(seed in any::<u64>(), h in 1usize..24, w in 1usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let i = random_frame(&mut rng, h, w);
        let r = random_mask(&mut rng, 0, h, w);
        prop_assert_eq!(composite_single(&i, &i, &r).unwrap(), i);
    }

    #[test]
    fn complement_sums_to_both_inputs(seed in any::<u64>(), h in 1usize..24, w in 1usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let i = random_frame(&mut rng, h, w);
        let t = random_frame(&mut rng, h, w);
        let r = random_mask(&mut rng, 0, h, w);
        let a = composite_single(&i, &t, &r).unwrap();
        let b = composite_single(&t, &i, &r).unwrap();
        for k in 0..a.pixels().len() {
            prop_assert!((a.pixels()[k] + b.pixels()[k] - i.pixels()[k] - t.pixels()[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn multi_is_order_independent_and_reduces_to_single(seed in any::<u64>(), h in 1usize..20, w in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let i = random_frame(&mut rng, h, w);
        let labels: Vec<u32> = (0..h * w).map(|_| rng.random_range(0..4)).collect();
        let masks: Vec<ClassMask> =
            (0..4).map(|c| ClassMask::from_fn(c, h, w, |y, x| labels[y * w + x] == c)).collect();
        let styled: BTreeMap<String, Frame> =
            ["a", "b"].iter().map(|s| (s.to_string(), random_frame(&mut rng, h, w))).collect();
        let assign = StyleAssignment::new().with(1, "a").with(2, "b").with(3, "a");
        let u = composite_multi(&i, &styled, &masks, &assign).unwrap();
        let mut rev = masks.clone();
        rev.reverse();
        prop_assert_eq!(&composite_multi(&i, &styled, &rev, &assign).unwrap(), &u);

        let one = StyleAssignment::new().with(2, "b");
        prop_assert_eq!(
            composite_multi(&i, &styled, &masks, &one).unwrap(),
            composite_single(&i, &styled["b"], &masks[2]).unwrap()
        );
        prop_assert_eq!(composite_multi(&i, &styled, &masks, &StyleAssignment::new()).unwrap(), i);
    }

    #[test]
    fn feathering_stays_in_unit_range(seed in any::<u64>(), h in 1usize..20, w in 1usize..20, radius in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = random_mask(&mut rng, 0, h, w);
        let f: SoftMask = feather_mask(&r, radius);
        prop_assert!(f.weights().iter().all(|v| (0.0..=1.0).contains(v)));
        let i = random_frame(&mut rng, h, w);
        let t = random_frame(&mut rng, h, w);
        let soft = composite_soft(&i, &t, &f).unwrap();
        prop_assert!(soft.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        if radius == 0 {
            prop_assert_eq!(soft, composite_single(&i, &t, &r).unwrap());
        }
        let ones: SoftMask = feather_mask(&ClassMask::from_fn(0, h, w, |_, _| true), radius);
        prop_assert!(ones.weights().iter().all(|&v| v == 1.0));
    }
}
