//! Property tests over the numeric kernels and the block invariants.

use proptest::prelude::*;

use lookupvit::block::{mhbc_gather, BlockParams, BlockSettings};
use lookupvit::rng::SplitMix64;
use lookupvit::tensor::{CostKind, Tape, Tensor};

fn tensor_strategy(
    rows: std::ops::RangeInclusive<usize>,
    cols: std::ops::RangeInclusive<usize>,
    lo: f64,
    hi: f64,
) -> impl Strategy<Value = Tensor<f64>> {
    (rows, cols).prop_flat_map(move |(r, c)| {
        proptest::collection::vec(lo..hi, r * c)
            .prop_map(move |data| Tensor::from_f64s(vec![r, c], &data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in tensor_strategy(1..=6, 1..=9, -50.0, 50.0)) {
        let mut tape = Tape::new();
        let v = tape.leaf(x, false);
        let s = tape.softmax_rows(v).unwrap();
        let out = tape.value(s);
        let c = out.last_dim();
        for row in out.data().chunks(c) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
        }
    }

    #[test]
    fn identity_resize_round_trips_exactly(
        x in (1usize..=5, 1usize..=5, 1usize..=3).prop_flat_map(|(h, w, c)| {
            proptest::collection::vec(-100.0..100.0f64, h * w * c)
                .prop_map(move |data| Tensor::<f64>::from_f64s(vec![h, w, c], &data).unwrap())
        })
    ) {
        let shape = (x.shape()[0], x.shape()[1]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), false);
        let once = tape.bilinear_resize(v, shape).unwrap();
        let twice = tape.bilinear_resize(once, shape).unwrap();
        prop_assert_eq!(tape.value(twice).data(), x.data());
    }

    #[test]
    fn matmul_macs_are_exactly_rkc(m in 1usize..=9, k in 1usize..=9, n in 1usize..=9) {
        let mut tape = Tape::<f32>::with_meter();
        let a = tape.leaf(Tensor::zeros(vec![m, k]), false);
        let b = tape.leaf(Tensor::zeros(vec![k, n]), false);
        tape.matmul(a, b, CostKind::Projections).unwrap();
        prop_assert_eq!(
            tape.meter().unwrap().grand_total().projections,
            (m * k * n) as u64
        );
    }

    #[test]
    fn matmul_matches_triple_loop(
        a in tensor_strategy(1..=5, 1..=5, -10.0, 10.0),
        ncols in 1usize..=5,
        scale in -2.0..2.0f64,
    ) {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let bdata: Vec<f64> = (0..k * ncols).map(|i| (i as f64 * 0.7 - 1.0) * scale).collect();
        let b: Tensor<f64> = Tensor::from_f64s(vec![k, ncols], &bdata).unwrap();
        let mut oracle = vec![0.0; m * ncols];
        for i in 0..m {
            for j in 0..ncols {
                for kk in 0..k {
                    oracle[i * ncols + j] += a.data()[i * k + kk] * b.data()[kk * ncols + j];
                }
            }
        }
        let mut tape = Tape::new();
        let va = tape.leaf(a, false);
        let vb = tape.leaf(b, false);
        let out = tape.matmul(va, vb, CostKind::Neglected).unwrap();
        for (got, want) in tape.value(out).data().iter().zip(&oracle) {
            prop_assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn kernels_stay_finite_for_bounded_inputs(
        x in tensor_strategy(1..=4, 2..=8, -1e3, 1e3)
    ) {
        let d = x.shape()[1];
        let mut tape = Tape::new();
        let v = tape.leaf(x, false);
        let g = tape.leaf(Tensor::filled(vec![d], 1.0f64), false);
        let b = tape.leaf(Tensor::zeros(vec![d]), false);
        // Every op validates finiteness internally; unwraps prove it.
        let s = tape.softmax_rows(v).unwrap();
        let ln = tape.layer_norm(v, g, b, 1e-6).unwrap();
        let ge = tape.gelu(v).unwrap();
        let mm = tape.matmul_nt(v, v, CostKind::Neglected).unwrap();
        for out in [s, ln, ge, mm] {
            prop_assert!(tape.value(out).data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn grid_flatten_round_trips(
        h in 1usize..=4, w in 1usize..=4, d in 1usize..=4, seed in 0u64..1000
    ) {
        let mut rng = SplitMix64::new(seed);
        let data: Vec<f64> = (0..h * w * d).map(|_| rng.normal()).collect();
        let grid: Tensor<f64> = Tensor::from_f64s(vec![h, w, d], &data).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(grid.clone(), false);
        let flat = tape.reshape(v, vec![h * w, d]).unwrap();
        let back = tape.reshape(flat, vec![h, w, d]).unwrap();
        prop_assert_eq!(tape.value(back).data(), grid.data());
    }

    #[test]
    fn cross_attention_rows_are_stochastic(
        seed in 0u64..500, heads in 1usize..=4, hd in 1usize..=4,
        m in 1usize..=8, n in 1usize..=8,
    ) {
        let dim = heads * hd;
        if dim < 2 {
            return Ok(());
        }
        let mut rng = SplitMix64::new(seed);
        let block = BlockParams::<f64>::init(dim, heads, 2, 1, true, &mut rng).unwrap();
        let zp_data: Vec<f64> = (0..m * dim).map(|_| rng.normal()).collect();
        let zl_data: Vec<f64> = (0..n * dim).map(|_| rng.normal()).collect();
        let mut tape = Tape::new();
        let zp = tape.leaf(Tensor::from_f64s(vec![m, dim], &zp_data).unwrap(), false);
        let zl = tape.leaf(Tensor::from_f64s(vec![n, dim], &zl_data).unwrap(), false);
        let bound = block.bind(&mut tape, false);
        let settings = BlockSettings { heads, scale_logits: true };
        let (_, attn) = mhbc_gather(&mut tape, zp, zl, &bound, &settings).unwrap();
        for &a in &attn.per_head {
            for row in tape.value(a).data().chunks(n) {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-5);
                for &w in row {
                    prop_assert!((0.0..=1.0 + 1e-12).contains(&w));
                }
            }
        }
    }
}
