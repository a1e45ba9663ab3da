//! Invariants checked over random inputs.

use countlayout::grid::{Map2, Mask};
use countlayout::guidance::{mask_self_attention, SelfAttentionMap};
use countlayout::layout::InstanceLayout;
use countlayout::localize::{dbscan, otsu_mask, CosineDistances};
use countlayout::relayout::assignment::solve;
use countlayout::relayout::{correct_layout, trim_layout};
use countlayout::relayout_net::{total_loss, Hyper, RelayoutModel, UNet, UNetShape};
use countlayout::tensor_io::{TensorBlob, TensorData};
use proptest::prelude::*;
use std::path::Path;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn cost_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=6).prop_flat_map(|rows| {
        (rows..=rows + 1).prop_flat_map(move |cols| {
            prop::collection::vec(prop::collection::vec(0u32..1000, cols), rows)
                .prop_map(|m| m.into_iter().map(|r| r.into_iter().map(|v| v as f64 / 64.0).collect()).collect())
        })
    })
}

/// Rectangles on a 16×16 grid; may overlap, some may be empty after clipping.
fn layout() -> impl Strategy<Value = InstanceLayout> {
    prop::collection::vec((0usize..16, 0usize..16, 1usize..6, 1usize..6), 1..8).prop_map(|rects| {
        let channels = rects
            .into_iter()
            .map(|(r, c, h, w)| Mask::from_fn(16, 16, |y, x| y >= r && y < r + h && x >= c && x < c + w))
            .collect();
        InstanceLayout::new(16, 16, channels).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_blob_round_trips(
        dims in prop::collection::vec(1usize..5, 1..=4),
        as_u8 in any::<bool>(),
        seed in any::<u32>(),
    ) {
        let n: usize = dims.iter().product();
        let data = if as_u8 {
            TensorData::U8((0..n).map(|i| (i as u32).wrapping_mul(seed | 1) as u8).collect())
        } else {
            TensorData::F32((0..n).map(|i| f32::from_bits((i as u32).wrapping_mul(2654435761) ^ seed) % 1e6).collect())
        };
        let blob = TensorBlob::new(dims, data).unwrap();
        let bytes = blob.encode().unwrap();
        let back = TensorBlob::decode(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.encode().unwrap(), bytes);
        prop_assert_eq!(back.dims, blob.dims);
    }

    /// Dyadic values and scales keep every step exact in floating point, so the mask must be
    /// identical, not merely close.
    #[test]
    fn otsu_invariant_under_increasing_affine_maps(
        raw in prop::collection::vec(0u16..=1024, 64),
        log_scale in -3i32..=3,
        shift in -4i32..=4,
    ) {
        let data: Vec<f32> = raw.iter().map(|&v| v as f32 / 1024.0).collect();
        prop_assume!(raw.iter().min() != raw.iter().max());
        let base = otsu_mask(&Map2::new(8, 8, data.clone()).unwrap()).unwrap();
        let a = 2f32.powi(log_scale);
        let moved: Vec<f32> = data.iter().map(|v| a * v + shift as f32 / 8.0).collect();
        let after = otsu_mask(&Map2::new(8, 8, moved).unwrap()).unwrap();
        prop_assert_eq!(base.grid, after.grid);
    }

    #[test]
    fn dbscan_ignores_enumeration_order(
        groups in prop::collection::vec((0usize..4, 1usize..9), 1..6),
        noise in prop::collection::vec(-0.3f32..0.3, 200),
        eps in 0.01f64..0.3,
        min_pts in 1usize..5,
        shuffle_seed in any::<u64>(),
    ) {
        let mut pts: Vec<Vec<f32>> = Vec::new();
        let mut ni = 0;
        for &(axis, size) in &groups {
            for _ in 0..size {
                let mut p = vec![0.05f32; 4];
                p[axis] = 1.0;
                for v in p.iter_mut() {
                    *v += noise[ni % noise.len()] * 0.5;
                    ni += 1;
                }
                pts.push(p);
            }
        }
        let n = pts.len();
        let keys: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
        let refs: Vec<&[f32]> = pts.iter().map(Vec::as_slice).collect();
        let base = dbscan(&CosineDistances::new(&refs), &keys, eps, min_pts);

        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = shuffle_seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let prefs: Vec<&[f32]> = perm.iter().map(|&i| refs[i]).collect();
        let pkeys: Vec<usize> = perm.iter().map(|&i| keys[i]).collect();
        let shuffled = dbscan(&CosineDistances::new(&prefs), &pkeys, eps, min_pts);
        for (pos, &orig) in perm.iter().enumerate() {
            prop_assert_eq!(shuffled[pos], base[orig]);
        }
    }

    #[test]
    fn hungarian_matches_brute_force(cost in cost_matrix()) {
        let rows = cost.len();
        let cols = cost[0].len();
        let got = solve(&cost).unwrap();
        let mut best = f64::INFINITY;
        for p in permutations(cols) {
            let c: f64 = (0..rows).map(|i| cost[i][p[i]]).sum();
            best = best.min(c);
        }
        prop_assert_eq!(got.total_cost, best);
        let mut used = got.cols_of_row.clone();
        used.sort_unstable();
        used.dedup();
        prop_assert_eq!(used.len(), rows);
    }

    #[test]
    fn loss_equivariant_under_channel_permutation(
        k in 1usize..6,
        vals in prop::collection::vec(0.0f32..1.0, 6 * 16),
        bits in prop::collection::vec(any::<bool>(), 6 * 16),
        rot in 0usize..6,
    ) {
        let n = k * 16;
        let pred = &vals[..n];
        let target: Vec<f32> = bits[..n].iter().map(|&b| f32::from(u8::from(b))).collect();
        let perm: Vec<usize> = (0..k).map(|i| (i + rot) % k).collect();
        let shuffle = |x: &[f32]| -> Vec<f32> { perm.iter().flat_map(|&c| x[c * 16..(c + 1) * 16].to_vec()).collect() };
        let a = total_loss(pred, &target, k).unwrap();
        let b = total_loss(&shuffle(pred), &shuffle(&target), k).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{} vs {}", a, b);
    }

    #[test]
    fn self_attention_masking_is_idempotent(
        fg_bits in prop::collection::vec(any::<bool>(), 16),
        scores in prop::collection::vec(0.0f32..1.0, 256),
    ) {
        let fg = Mask::new(4, 4, fg_bits.iter().map(|&b| u8::from(b)).collect()).unwrap();
        let sa = SelfAttentionMap::new(16, scores, "up.0", 950).unwrap();
        let once = mask_self_attention(&sa, &fg).unwrap();
        let twice = mask_self_attention(&once, &fg).unwrap();
        prop_assert_eq!(&once, &twice);
        for i in 0..16 {
            for j in 0..16 {
                let bg_to_fg = fg.data[i] == 0 && fg.data[j] == 1;
                let expect = if bg_to_fg { 0.0 } else { sa.get(i, j) };
                prop_assert_eq!(once.get(i, j), expect);
            }
        }
    }

    #[test]
    fn trim_keeps_survivors_bit_identical(l in layout(), cut in 1usize..7) {
        let count = l.count();
        prop_assume!(cut < count);
        let trimmed = trim_layout(&l, cut).unwrap();
        prop_assert_eq!(trimmed.count(), cut);
        // survivors appear in the original order and unchanged
        let mut from = 0;
        for m in &trimmed.channels {
            let pos = l.channels[from..].iter().position(|c| c == m);
            prop_assert!(pos.is_some());
            from += pos.unwrap() + 1;
        }
        let min_kept = trimmed.areas().into_iter().min().unwrap();
        let dropped_max = {
            let mut areas: Vec<usize> = l.areas().into_iter().filter(|&a| a > 0).collect();
            areas.sort_unstable_by(|a, b| b.cmp(a));
            areas[cut]
        };
        prop_assert!(min_kept >= dropped_max);
    }

    #[test]
    fn correction_is_identity_at_target(l in layout()) {
        let model = RelayoutModel::zeros(Hyper::default());
        let k = l.count();
        let c = correct_layout(&l, k, &model).unwrap();
        prop_assert_eq!(c.iterations, 0);
        prop_assert_eq!(c.layout, l);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn network_outputs_strictly_inside_unit_interval(
        seed in any::<u64>(),
        bits in prop::collection::vec(any::<bool>(), 9 * 64),
    ) {
        let shape = UNetShape { in_channels: 9, out_channels: 10, base_width: 4, levels: 3 };
        let net = UNet::<f32>::init(shape, seed);
        let x: Vec<f32> = bits.iter().map(|&b| f32::from(u8::from(b))).collect();
        let y = net.forward(&x, 1, 8, 8).unwrap();
        prop_assert_eq!(y.len(), 10 * 64);
        prop_assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
