use attconv::attention::{attentive_context, match_scores, AttentionMask, MatchMethod, MatchParams};
use attconv::{Graph, ParamStore, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

/// `(hx d x m, hy d x n, column mask with at least one true)`.
fn case() -> impl Strategy<Value = (Tensor, Tensor, Vec<bool>)> {
    (1usize..7, 1usize..8, 1usize..8).prop_flat_map(|(d, m, n)| {
        (
            matrix(d, m),
            matrix(d, n),
            prop::collection::vec(any::<bool>(), n).prop_map(|mut mask| {
                if !mask.iter().any(|&b| b) {
                    mask[0] = true;
                }
                mask
            }),
        )
    })
}

fn dot() -> MatchParams {
    MatchParams {
        method: MatchMethod::Dot,
        size: 0,
        weight: None,
        context_weight: None,
        score_vector: None,
    }
}

/// Weights and context for dot matching.
fn attend(hx: &Tensor, hy: &Tensor, mask: &[bool]) -> (Tensor, Tensor) {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.input(hx.clone());
    let y = g.input(hy.clone());
    let s = match_scores(&mut g, x, y, &dot()).unwrap();
    let att = attentive_context(&mut g, s, y, &AttentionMask::columns(mask)).unwrap();
    (g.value(att.weights).as_matrix(), g.value(att.context).as_matrix())
}

fn permute_cols(t: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::from_fn(t.rows(), perm.len(), |r, c| t.get(r, perm[c]))
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut s = seed;
    for i in (1..n).rev() {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        p.swap(i, (s >> 33) as usize % (i + 1));
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rows_are_distributions_over_unmasked_columns((hx, hy, mask) in case()) {
        let (w, _) = attend(&hx, &hy, &mask);
        for i in 0..w.rows() {
            let mut total = 0.0;
            for (j, &keep) in mask.iter().enumerate() {
                let v = w.get(i, j);
                prop_assert!(v >= 0.0);
                if !keep {
                    prop_assert_eq!(v, 0.0);
                }
                total += v;
            }
            prop_assert!((total - 1.0).abs() <= 1e-12, "row {} sums to {}", i, total);
        }
    }

    #[test]
    fn weights_match_direct_softmax((hx, hy, mask) in case()) {
        let (w, _) = attend(&hx, &hy, &mask);
        for i in 0..hx.cols() {
            let scores: Vec<f64> = (0..hy.cols())
                .map(|j| (0..hx.rows()).map(|k| hx.get(k, i) * hy.get(k, j)).sum())
                .collect();
            let top = scores.iter().zip(&mask).filter(|(_, &k)| k).map(|(s, _)| *s).fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().zip(&mask).filter(|(_, &k)| k).map(|(s, _)| (s - top).exp()).sum();
            for j in 0..hy.cols() {
                let expect = if mask[j] { (scores[j] - top).exp() / z } else { 0.0 };
                prop_assert!((w.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn context_lies_in_convex_hull((hx, hy, mask) in case()) {
        let (_, c) = attend(&hx, &hy, &mask);
        for k in 0..hy.rows() {
            let kept: Vec<f64> = (0..hy.cols()).filter(|&j| mask[j]).map(|j| hy.get(k, j)).collect();
            let lo = kept.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = kept.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..c.cols() {
                prop_assert!(c.get(k, i) >= lo - 1e-12 && c.get(k, i) <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn permuting_context_permutes_weights_only((hx, hy, mask) in case(), seed in any::<u64>()) {
        let perm = permutation(hy.cols(), seed);
        let (w, c) = attend(&hx, &hy, &mask);
        let pmask: Vec<bool> = perm.iter().map(|&j| mask[j]).collect();
        let (pw, pc) = attend(&hx, &permute_cols(&hy, &perm), &pmask);
        prop_assert!(pc.max_abs_diff(&c) <= 1e-12);
        prop_assert!(pw.max_abs_diff(&permute_cols(&w, &perm)) <= 1e-12);
    }

    #[test]
    fn bilinear_with_identity_is_dot((hx, hy, mask) in case()) {
        let d = hx.rows();
        let mut store = ParamStore::new();
        let id = store.add("weight", Tensor::identity(d)).unwrap();
        let bilinear = MatchParams { method: MatchMethod::Bilinear, size: d, weight: Some(id), context_weight: None, score_vector: None };
        let mut g = Graph::new(&store);
        let x = g.input(hx.clone());
        let y = g.input(hy.clone());
        let sd = match_scores(&mut g, x, y, &dot()).unwrap();
        let sb = match_scores(&mut g, x, y, &bilinear).unwrap();
        prop_assert!(g.value(sd).max_abs_diff(g.value(sb)) <= 1e-12);
        let m = AttentionMask::columns(&mask);
        let ad = attentive_context(&mut g, sd, y, &m).unwrap();
        let ab = attentive_context(&mut g, sb, y, &m).unwrap();
        prop_assert!(g.value(ad.context).max_abs_diff(g.value(ab.context)) <= 1e-12);
    }

    #[test]
    fn shifting_scores_leaves_weights((rows, cols) in (1usize..6, 1usize..8), shift in -50.0f64..50.0, seed in any::<u64>()) {
        let scores = Tensor::from_fn(rows, cols, |r, c| ((seed as usize + 31 * r + 7 * c) % 97) as f64 / 13.0 - 3.0);
        let shifted = Tensor::from_fn(rows, cols, |r, c| scores.get(r, c) + shift);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(scores);
        let b = g.input(shifted);
        let wa = g.softmax_rows(a).unwrap();
        let wb = g.softmax_rows(b).unwrap();
        prop_assert!(g.value(wa).max_abs_diff(g.value(wb)) <= 1e-12);
    }
}

#[test]
fn uniform_scores_average_unmasked_columns() {
    let hy = Tensor::matrix(2, 3, vec![1.0, 2.0, 9.0, -1.0, 4.0, 9.0]).unwrap();
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let s = g.input(Tensor::zeros(&[2, 3]));
    let y = g.input(hy);
    let att = attentive_context(&mut g, s, y, &AttentionMask::columns(&[true, true, false])).unwrap();
    let c = g.value(att.context).as_matrix();
    for i in 0..2 {
        assert!((c.get(0, i) - 1.5).abs() < 1e-15);
        assert!((c.get(1, i) - 1.5).abs() < 1e-15);
    }
}
