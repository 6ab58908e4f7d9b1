use std::path::Path;

use proptest::prelude::*;

use super::*;

/// Conv blocks with optional pools, then either a GAP + grouped head or a
/// dense head.
fn spec_strategy() -> impl Strategy<Value = NetworkSpec> {
    let block = (prop::sample::select(vec![1usize, 3, 5]), 1usize..7, 1usize..3, any::<bool>(), 1usize..3);
    (
        prop::collection::vec(block, 1..4),
        1usize..5,
        1usize..4,
        any::<bool>(),
        1usize..4,
        8usize..20,
    )
        .prop_map(|(blocks, m, n, grouped, c_in, side)| {
            let mut layers = Vec::new();
            for (k, c, r, pool, stride) in blocks {
                let mut conv = LayerSpec::conv(k, c, r);
                conv.stride = stride;
                layers.push(conv);
                if pool {
                    layers.push(LayerSpec::pool(2));
                }
            }
            if grouped {
                layers.push(LayerSpec::conv(3, m * n, 1));
                layers.push(LayerSpec::gap());
                layers.push(LayerSpec::group_fc());
            } else {
                layers.push(LayerSpec::fc(2 * m + 1));
                layers.push(LayerSpec::fc(m));
            }
            NetworkSpec {
                name: "random".into(),
                input: (c_in, side, side),
                layers,
                attribute_count: m,
                branch_maps: n,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closed_form_count_matches_instantiation(spec in spec_strategy(), seed in any::<u64>()) {
        match build::<f32>(&spec, seed) {
            Ok(net) => prop_assert_eq!(count_params(&spec).unwrap(), net.param_count()),
            Err(_) => prop_assert!(count_params(&spec).is_err()),
        }
    }

    #[test]
    fn build_is_a_function_of_the_seed(spec in spec_strategy(), seed in any::<u64>()) {
        if let Ok(a) = build::<f32>(&spec, seed) {
            let b = build::<f32>(&spec, seed).unwrap();
            prop_assert!(a.params.bit_eq(&b.params));
        }
    }

    #[test]
    fn checkpoint_bytes_survive_a_reload(spec in spec_strategy(), seed in any::<u64>()) {
        if let Ok(net) = build::<f32>(&spec, seed) {
            let mut first = Vec::new();
            write_params(&mut first, &net.params).unwrap();
            let back = read_params(&mut first.as_slice(), Path::new("mem")).unwrap();
            prop_assert!(back.bit_eq(&net.params));
            let mut second = Vec::new();
            write_params(&mut second, &back).unwrap();
            prop_assert_eq!(first, second);
        }
    }

    #[test]
    fn validated_nets_emit_m_logits(spec in spec_strategy(), seed in any::<u64>()) {
        if let Ok(net) = build::<f32>(&spec, seed) {
            let (c, h, w) = spec.input;
            let x = Tensor::full(&[2, c, h, w], 0.25f32);
            let z = net.predict(&x).unwrap();
            prop_assert_eq!(z.dims(), &[2, spec.attribute_count]);
        }
    }
}
