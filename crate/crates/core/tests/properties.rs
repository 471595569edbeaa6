use std::collections::BTreeMap;

use fedmesh::data::{partition_indices, PartitionPlan, PartitionScheme};
use fedmesh::federation::{aggregate, AggregationPolicy, ClientUpdate};
use fedmesh::model::ModelSpec;
use fedmesh::privacy::{self, NoiseReceipt};
use fedmesh::secure_sum::{self, FixedPointCodec, PairwiseSeedMatrix};
use fedmesh::transport::{decode_params, encode_params, FrameDecoder};
use fedmesh::{Dataset, Example, ParamVector};
use proptest::prelude::*;

fn dataset(d: usize, k: usize) -> impl Strategy<Value = Dataset> {
    prop::collection::vec((prop::collection::vec(-3.0..3.0f64, d), 0..k), 1..12)
        .prop_map(move |rows| Dataset::new(rows.into_iter().map(|(x, y)| Example::new(x, y)).collect(), d, k).unwrap())
}

fn update(id: u32, params: Vec<f64>, n: u64) -> ClientUpdate {
    ClientUpdate {
        client_id: id,
        round: 1,
        params: ParamVector::new(params).unwrap(),
        sample_count: n,
        loss_before: 0.0,
        loss_after: 0.0,
        receipt: NoiseReceipt::none(0.0),
        flagged: false,
    }
}

fn norm(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x * x;
    }
    s.sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_matches_central_differences(
        (spec, data, theta) in (1usize..5, 2usize..5, 0.0..0.1f64).prop_flat_map(|(d, k, l2)| {
            let spec = ModelSpec::new(d, k, l2).unwrap();
            let dim = spec.param_dim();
            (Just(spec), dataset(d, k), prop::collection::vec(-1.0..1.0f64, dim))
        }),
    ) {
        let theta_p = ParamVector::new(theta.clone()).unwrap();
        let grad = spec.gradient(&theta_p, &data).unwrap();
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut up = theta.clone();
            up[i] += h;
            let mut down = theta.clone();
            down[i] -= h;
            let fd = (spec.loss(&ParamVector::new(up).unwrap(), &data).unwrap()
                - spec.loss(&ParamVector::new(down).unwrap(), &data).unwrap())
                / (2.0 * h);
            let g = grad.as_slice()[i];
            prop_assert!((g - fd).abs() / g.abs().max(fd.abs()).max(1e-3) < 1e-4, "coord {i}: {g} vs {fd}");
        }
    }

    #[test]
    fn partition_is_a_disjoint_cover(
        labels in prop::collection::vec(0usize..4, 40..200),
        clients in 1usize..6,
        alpha in 0.05..5.0f64,
        iid in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let plan = PartitionPlan {
            client_count: clients,
            scheme: if iid { PartitionScheme::Iid } else { PartitionScheme::DirichletLabelSkew },
            dirichlet_alpha: alpha,
            min_samples_per_client: 3,
            seed,
        };
        let shards = partition_indices(&labels, 4, &plan).unwrap();
        prop_assert_eq!(shards.len(), clients);
        let mut seen = vec![false; labels.len()];
        for shard in &shards {
            prop_assert!(shard.len() >= 3);
            prop_assert!(shard.windows(2).all(|w| w[0] < w[1]));
            for &i in shard {
                prop_assert!(!seen[i], "index {} assigned twice", i);
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
        prop_assert_eq!(partition_indices(&labels, 4, &plan).unwrap(), shards);
    }

    #[test]
    fn clip_norm_is_min_of_norm_and_bound(
        v in prop::collection::vec(-50.0..50.0f64, 1..40),
        c in 0.01..20.0f64,
    ) {
        let p = ParamVector::new(v.clone()).unwrap();
        let (out, receipt) = privacy::clip(&p, c).unwrap();
        let before = norm(&v);
        let after = norm(out.as_slice());
        prop_assert!(after <= c + 1e-12);
        prop_assert!((after - before.min(c)).abs() <= 1e-12 * before.max(1.0));
        prop_assert_eq!(receipt.clip_applied, before > c);
    }

    #[test]
    fn masked_sum_equals_encoded_sum(
        n in 1u32..8,
        dim in 1usize..20,
        seed in any::<u64>(),
        round in 1u32..1000,
        values in prop::collection::vec(-1000.0..1000.0f64, 160),
    ) {
        let codec = FixedPointCodec::new(24).unwrap();
        let seeds = PairwiseSeedMatrix::derive(seed, n);
        let participants: Vec<u32> = (0..n).collect();
        let mut expected = vec![0u64; dim];
        let mut shares = Vec::new();
        for c in 0..n {
            let start = c as usize * dim % (values.len() - dim);
            let v = ParamVector::new(values[start..start + dim].to_vec()).unwrap();
            let enc = codec.encode(&v).unwrap();
            for (e, w) in expected.iter_mut().zip(&enc) {
                *e = e.wrapping_add(*w);
            }
            shares.push(secure_sum::mask(&enc, c, &seeds, &participants, round).unwrap());
        }
        prop_assert_eq!(secure_sum::modular_sum(&shares, &participants, round).unwrap(), expected);
        shares.pop();
        prop_assert!(secure_sum::unmask_sum(&shares, &participants, round, &codec).is_err());
    }

    #[test]
    fn aggregation_ignores_update_order(
        rows in prop::collection::vec((prop::collection::vec(-10.0..10.0f64, 5), 1u64..500), 1..7),
        rotate in 0usize..7,
        uniform in any::<bool>(),
    ) {
        let updates: Vec<ClientUpdate> = rows.iter().enumerate().map(|(i, (p, n))| update(i as u32, p.clone(), *n)).collect();
        let mut shuffled = updates.clone();
        let len = shuffled.len();
        shuffled.rotate_left(rotate % len);
        shuffled.reverse();
        let policy = if uniform { AggregationPolicy::uniform() } else { AggregationPolicy::size_weighted() };
        let global = ParamVector::zeros(5);
        let a = aggregate(&updates, &policy, &global).unwrap();
        let b = aggregate(&shuffled, &policy, &global).unwrap();
        prop_assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn aggregating_identical_models_is_the_identity(
        p in prop::collection::vec(-10.0..10.0f64, 6),
        weights in prop::collection::vec(0.1..10.0f64, 1..6),
    ) {
        let updates: Vec<ClientUpdate> = (0..weights.len()).map(|i| update(i as u32, p.clone(), 10)).collect();
        let policy = AggregationPolicy::custom(weights.iter().enumerate().map(|(i, &w)| (i as u32, w)).collect::<BTreeMap<_, _>>());
        let out = aggregate(&updates, &policy, &ParamVector::zeros(6)).unwrap();
        for (o, x) in out.iter().zip(&p) {
            prop_assert!((o - x).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn params_round_trip_the_wire(v in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 0..64)) {
        let p = ParamVector::new(v).unwrap();
        let back = decode_params(&encode_params(&p).unwrap()).unwrap();
        prop_assert_eq!(p.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), back.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn decoder_survives_arbitrary_bytes(chunks in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..64), 0..8)) {
        let mut dec = FrameDecoder::new();
        for c in &chunks {
            dec.push(c);
            while let Ok(Some(_)) = dec.next_frame() {}
        }
    }
}

#[test]
fn thousand_random_vectors_round_trip_bit_exactly() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let dim = rng.random_range(0..200);
        let v: Vec<f64> = (0..dim)
            .map(|_| f64::from_bits(rng.random::<u64>()))
            .map(|x| if x.is_finite() { x } else { 0.0 })
            .collect();
        let p = ParamVector::new(v.clone()).unwrap();
        let back = decode_params(&encode_params(&p).unwrap()).unwrap();
        assert!(v.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.dim(), dim);
    }
}
