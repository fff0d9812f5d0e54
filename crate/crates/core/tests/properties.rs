//! Property tests of the engine's invariants.

use mmsparse::blocksparse::{
    block_sparse_attention_with, gather_rows, inverse_index, scatter_rows, ExecOptions, VisitOrder,
};
use mmsparse::estimator::{approx_attention, select_vertical_slash, vs_to_blockmask};
use mmsparse::masks::{attention_recall, build_a_shape, build_grid_mask, BlockMask, ElementRule, HeadPattern};
use mmsparse::modality::{segment_modalities, two_d_boundary_attention_with, Modality, ModalityMap, PairPatterns};
use mmsparse::tensor::{attention_weights, default_scale, dense_causal_attention, Matrix, SoftmaxPartial};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

fn qkv(max_s: usize) -> impl Strategy<Value = (Matrix, Matrix, Matrix)> {
    (1..=max_s, 1..=8usize).prop_flat_map(|(s, d)| (matrix(s, d), matrix(s, d), matrix(s, d)))
}

fn layout(s: usize) -> impl Strategy<Value = ModalityMap> {
    prop::collection::vec(0..3usize, s).prop_map(|ids| {
        let tags = [Modality::vision(), Modality::text(), Modality::new("audio")];
        let labels: Vec<Modality> = ids.iter().map(|&i| tags[i].clone()).collect();
        segment_modalities(&labels).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_is_order_independent((q, k, v) in qkv(48), owners in prop::collection::vec(0..4usize, 48), seed in any::<u64>()) {
        let s = q.rows();
        let scale = default_scale(q.cols());
        let rows: Vec<usize> = (0..s).collect();
        let parts: Vec<SoftmaxPartial> = (0..4)
            .map(|p| SoftmaxPartial::compute(&q, &k, &v, scale, &rows, |_, j| owners[j] == p).unwrap())
            .collect();
        let forward = parts[1..].iter().fold(parts[0].clone(), |a, p| a.merge(p).unwrap()).finalize();
        let mut order: Vec<usize> = (0..4).collect();
        order.rotate_left((seed % 4) as usize);
        order.swap(0, (seed as usize / 4) % 4);
        let shuffled = order[1..]
            .iter()
            .fold(parts[order[0]].clone(), |a, &p| a.merge(&parts[p]).unwrap())
            .finalize();
        let dense = dense_causal_attention(&q, &k, &v, scale).unwrap();
        prop_assert!(forward.output.max_abs_diff(&shuffled.output) <= 1e-10);
        prop_assert!(forward.output.max_abs_diff(&dense) <= 1e-10);
    }

    #[test]
    fn visit_order_does_not_change_output((q, k, v) in qkv(80), b in 1..=16usize, seed in any::<u64>()) {
        let s = q.rows();
        let mask = build_a_shape(s, 3, 7, b).unwrap();
        let scale = default_scale(q.cols());
        let run = |order| {
            let opts = ExecOptions { order, ..ExecOptions::with_block_size(b) };
            block_sparse_attention_with(&q, &k, &v, &mask, scale, &opts).unwrap().output
        };
        let natural = run(VisitOrder::Natural);
        prop_assert!(natural.max_abs_diff(&run(VisitOrder::Reverse)) <= 1e-10);
        prop_assert!(natural.max_abs_diff(&run(VisitOrder::Shuffled(seed))) <= 1e-10);
    }

    #[test]
    fn skipped_blocks_hold_no_admitted_element(s in 1..=200usize, b in 1..=32usize, stride in 1..=12usize, phase_seed in any::<usize>(), flags in 1..8u8) {
        let phase = phase_seed % stride;
        let mask = build_grid_mask(s, stride, phase, flags & 1 != 0, flags & 2 != 0, flags & 4 != 0, b).unwrap();
        let rule = mask.rule().clone();
        for i in 0..s {
            for j in 0..=i {
                if rule.admits(i, j) {
                    prop_assert!(mask.is_active(i / b, j / b), "({i},{j}) admitted in a skipped block");
                }
            }
        }
    }

    #[test]
    fn block_mask_json_round_trips(s in 1..=128usize, b in 1..=32usize, sink in 1..=16usize, local in 1..=32usize) {
        let mask = build_a_shape(s, sink, local, b).unwrap();
        let back = BlockMask::from_json(&mask.to_json()).unwrap();
        prop_assert_eq!(back, mask);
    }

    #[test]
    fn more_lines_never_lose_recall((q, k, _v) in qkv(64), nv in 1..=6usize, ns in 1..=6usize) {
        let s = q.rows();
        let approx = approx_attention(&q, &k, s.min(16)).unwrap();
        let weights = attention_weights(&q, &k, default_scale(q.cols())).unwrap();
        let small = vs_to_blockmask(&select_vertical_slash(&approx, nv, ns), s, 8).unwrap();
        let large = vs_to_blockmask(&select_vertical_slash(&approx, nv + 2, ns + 2), s, 8).unwrap();
        let recall = |m: &BlockMask| attention_recall(&weights, m).unwrap();
        let small_rule = small.rule().clone();
        let large_rule = large.rule().clone();
        for i in 0..s {
            for j in 0..=i {
                if small_rule.admits(i, j) {
                    prop_assert!(large_rule.admits(i, j));
                }
            }
        }
        prop_assert!(recall(&large) >= recall(&small) - 1e-12);
    }

    #[test]
    fn modality_pairs_cover_causal_square_once(map in (1..=96usize).prop_flat_map(layout), b in 1..=16usize) {
        let s = map.len();
        let q = Matrix::from_fn(s, 2, |i, c| ((i * 7 + c * 3) % 11) as f64 / 11.0);
        let pairs: PairPatterns = map
            .tags()
            .iter()
            .flat_map(|a| map.tags().iter().map(move |b| ((a.clone(), b.clone()), HeadPattern::Full)))
            .collect();
        let opts = ExecOptions::with_block_size(b);
        let run = two_d_boundary_attention_with(&q, &q, &q, &map, &pairs, 1.0, &opts).unwrap();
        let mut hits = vec![0u32; s * s];
        for part in &run.parts {
            let rule = part.resolved.to_rule();
            for (&i, &qc) in part.region.q_positions().iter().zip(part.region.q_coords()) {
                for (&j, &kc) in part.region.k_positions().iter().zip(part.region.k_coords()) {
                    if kc <= qc && rule.admits(qc, kc) {
                        hits[i * s + j] += 1;
                    }
                }
            }
        }
        for i in 0..s {
            for j in 0..s {
                prop_assert_eq!(hits[i * s + j], u32::from(j <= i), "element ({}, {})", i, j);
            }
        }
        prop_assert_eq!(run.admitted(s), (0..s * s).map(|x| x % s <= x / s).collect::<Vec<_>>());
    }

    #[test]
    fn permutation_and_inverse_compose(map in (1..=64usize).prop_flat_map(layout)) {
        let s = map.len();
        for (a, &p) in map.perm().iter().enumerate() {
            prop_assert_eq!(map.inv_perm()[p], a);
        }
        let stream = map.stream_index();
        for tag in map.tags() {
            let idx = map.indices_of(tag);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            for (n, &i) in idx.iter().enumerate() {
                prop_assert_eq!(stream[i], n);
            }
        }
        let back = ModalityMap::from_json(&map.to_json()).unwrap();
        prop_assert_eq!(back.labels(), map.labels());
        prop_assert_eq!(s, back.len());
    }

    #[test]
    fn gather_then_scatter_restores_rows(x in matrix(24, 3), picks in prop::collection::btree_set(0..24usize, 1..24)) {
        let index: Vec<usize> = picks.into_iter().collect();
        let g = gather_rows(&x, &index).unwrap();
        let back = scatter_rows(&g, &inverse_index(&index, 24).unwrap()).unwrap();
        for i in 0..24 {
            let kept = index.contains(&i);
            prop_assert_eq!(back.untouched.contains(&i), !kept);
            for c in 0..3 {
                let want = if kept { x.get(i, c) } else { 0.0 };
                prop_assert_eq!(back.output.get(i, c), want);
            }
        }
    }

    #[test]
    fn rules_stay_causal(i in 0..300usize, j in 0..300usize, stride in 1..20usize) {
        prop_assume!(j > i);
        let rules = [
            ElementRule::Causal,
            ElementRule::AShape { sink: 4, local: 9 },
            ElementRule::SfStrided { local: 3, stride },
            ElementRule::Grid { stride, phase: 0, hline: true, vline: true, slash: true, band: 8 },
        ];
        for r in rules {
            prop_assert!(!r.admits(i, j));
        }
    }
}
