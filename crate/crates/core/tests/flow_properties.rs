use fairflow::flow::{swap_attribute, FlowArchitecture, FlowModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn perturbed_flow(dim: usize, seed: u64) -> FlowModel {
    let arch = FlowArchitecture { dim, depth: 4, hidden: None, scale_clamp: 2.0, seed };
    let mut flow = FlowModel::new(arch, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = flow.params().ids().collect();
    for id in ids {
        flow.params_mut().get_mut(id).mapv_inplace(|v| v + 0.3 * rng.random_range(-1.0..1.0));
    }
    flow
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inverse_undoes_forward(seed in 0u64..8, z in prop::collection::vec(-5.0f64..5.0, 6)) {
        let flow = perturbed_flow(6, seed);
        let (zt, logdet) = flow.forward(&z).unwrap();
        prop_assert!(logdet.is_finite());
        let back = flow.inverse(&zt).unwrap();
        let err = z.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-5);
    }

    #[test]
    fn swap_twice_equals_once(z in prop::collection::vec(-5.0f64..5.0, 2..10), p in -3.0f64..3.0) {
        let once = swap_attribute(&z, &[p]);
        prop_assert_eq!(swap_attribute(&once, &[p]), once.clone());
        prop_assert_eq!(&once[1..], &z[1..]);
    }
}
