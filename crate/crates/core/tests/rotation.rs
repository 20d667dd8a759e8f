use lethe_core::data::rotate90k;
use lethe_core::numerics::Tensor;
use proptest::prelude::*;

fn image() -> impl Strategy<Value = Tensor> {
    (1usize..4, 1usize..7).prop_flat_map(|(c, n)| {
        prop::collection::vec(-10.0f64..10.0, c * n * n)
            .prop_map(move |data| Tensor::new(vec![c, n, n], data).unwrap())
    })
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #[test]
    fn composition_adds_quarter_turns(x in image(), j in 0usize..8, k in 0usize..8) {
        let lhs = rotate90k(&rotate90k(&x, j).unwrap(), k).unwrap();
        let rhs = rotate90k(&x, (j + k) % 4).unwrap();
        prop_assert_eq!(bits(&lhs), bits(&rhs));
    }

    #[test]
    fn four_quarter_turns_are_identity(x in image()) {
        let mut y = x.clone();
        for _ in 0..4 {
            y = rotate90k(&y, 1).unwrap();
        }
        prop_assert_eq!(bits(&y), bits(&x));
        prop_assert_eq!(bits(&rotate90k(&x, 0).unwrap()), bits(&x));
    }

    #[test]
    fn rotation_permutes_pixels_within_each_channel(x in image(), k in 0usize..4) {
        let y = rotate90k(&x, k).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        let plane = x.shape()[1] * x.shape()[2];
        for c in 0..x.shape()[0] {
            let mut a = bits(&x)[c * plane..(c + 1) * plane].to_vec();
            let mut b = bits(&y)[c * plane..(c + 1) * plane].to_vec();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn quarter_turn_example() {
    let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(rotate90k(&x, 1).unwrap().data(), &[3.0, 1.0, 4.0, 2.0]);
}

#[test]
fn quarter_turn_of_three_by_three() {
    let x = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    assert_eq!(
        rotate90k(&x, 1).unwrap().data(),
        &[7.0, 4.0, 1.0, 8.0, 5.0, 2.0, 9.0, 6.0, 3.0]
    );
    assert_eq!(
        rotate90k(&x, 3).unwrap().data(),
        &[3.0, 6.0, 9.0, 2.0, 5.0, 8.0, 1.0, 4.0, 7.0]
    );
}

#[test]
fn non_square_is_rejected() {
    let x = Tensor::zeros(&[1, 2, 3]);
    assert!(matches!(rotate90k(&x, 1), Err(lethe_core::Error::Input(_))));
}
