//! Randomized invariants of selection, compression and scoring.

use mumoe::linalg::{self, Matrix};
use mumoe::scoring::{self, ActivationStats, ScoreMatrix};
use mumoe::selection::{self, active_count, SelectionParams, Strategy, TieMode};
use mumoe::sparse::{self, RowSparseMatrix};
use proptest::prelude::{prop, prop_assert, prop_assert_eq, prop_oneof, proptest};
use proptest::strategy::Strategy as _;

/// Scores drawn from a small alphabet so that ties are common.
fn scores(max_rows: usize, max_cols: usize) -> impl proptest::strategy::Strategy<Value = ScoreMatrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(prop_oneof![0u8..4, 0u8..=255], r * c).prop_map(move |v| {
            let data = v.into_iter().map(|x| f32::from(x) / 8.0).collect();
            ScoreMatrix::new(Matrix::new(r, c, data).unwrap()).unwrap()
        })
    })
}

fn weights(rows: usize, cols: usize) -> impl proptest::strategy::Strategy<Value = Matrix> {
    prop::collection::vec(-4.0f32..4.0, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

proptest! {
    #[test]
    fn strategies_agree_and_keep_exactly_k(s in scores(6, 90), rho in 0.01f64..=1.0) {
        let d = s.cols();
        let p = SelectionParams::new(rho, d, Strategy::Sort, TieMode::Canonical).unwrap();
        let reference = selection::select_sort(&s, &p);
        prop_assert!(reference.is_canonical());
        prop_assert_eq!(reference.total_active(), s.rows() * active_count(rho, d));
        for strategy in Strategy::ALL {
            let q = SelectionParams { strategy, ..p };
            prop_assert_eq!(&selection::select(&s, &q), &reference);
            prop_assert_eq!(&selection::select_sequential(&s, &q), &reference);
        }
    }

    #[test]
    fn kept_scores_dominate_dropped_scores(s in scores(4, 60), rho in 0.05f64..0.95) {
        let p = SelectionParams::new(rho, s.cols(), Strategy::KthThreshold, TieMode::Canonical).unwrap();
        let m = selection::select(&s, &p);
        for i in 0..s.rows() {
            let kept = (0..s.cols()).filter(|&j| m.is_active(i, j)).map(|j| s.get(i, j));
            let dropped = (0..s.cols()).filter(|&j| !m.is_active(i, j)).map(|j| s.get(i, j));
            let lo = kept.fold(f32::INFINITY, f32::min);
            let hi = dropped.fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(lo >= hi);
        }
    }

    #[test]
    fn parity_mask_is_subset_of_canonical(s in scores(4, 60), rho in 0.05f64..0.95) {
        let p = SelectionParams::new(rho, s.cols(), Strategy::KthThreshold, TieMode::Canonical).unwrap();
        let canonical = selection::select(&s, &p);
        let parity = selection::select(&s, &SelectionParams { tie_mode: TieMode::Parity, ..p });
        prop_assert!(parity.is_subset_of(&canonical));
        for i in 0..s.rows() {
            prop_assert!(parity.row_count(i) <= p.k);
        }
    }

    #[test]
    fn higher_density_masks_are_supersets(s in scores(4, 60), lo in 0.05f64..0.5, extra in 0.0f64..0.5) {
        let d = s.cols();
        let a = selection::select(&s, &SelectionParams::new(lo, d, Strategy::HeapTopk, TieMode::Canonical).unwrap());
        let b = selection::select(&s, &SelectionParams::new(lo + extra, d, Strategy::HeapTopk, TieMode::Canonical).unwrap());
        prop_assert!(a.is_subset_of(&b));
    }

    #[test]
    fn quickselect_matches_sorting(mut v in prop::collection::vec(0u8..16, 1..200), n in 0usize..200) {
        let n = n % v.len();
        let mut f: Vec<f32> = v.drain(..).map(f32::from).collect();
        let mut sorted = f.clone();
        sorted.sort_by(f32::total_cmp);
        prop_assert_eq!(selection::quickselect(&mut f, n), sorted[n]);
    }

    #[test]
    fn sparse_product_matches_masked_dense(
        (w, x) in (1usize..8, 1usize..40, 1usize..10)
            .prop_flat_map(|(r, c, t)| (weights(r, c), weights(c, t))),
        rho in 0.05f64..=1.0,
    ) {
        let p = SelectionParams::new(rho, w.cols(), Strategy::KthThreshold, TieMode::Canonical).unwrap();
        let mask = selection::select(&scoring::magnitude_score(&w), &p);
        let ws = sparse::compress(&w, &mask).unwrap();
        prop_assert_eq!(ws.nnz(), w.rows() * p.k);
        let masked = Matrix::from_fn(w.rows(), w.cols(), |i, j| if mask.is_active(i, j) { w.get(i, j) } else { 0.0 });
        prop_assert_eq!(&ws.to_dense(), &masked);
        let got = sparse::sparse_matmul(&ws, &x).unwrap();
        let want = linalg::matmul(&masked, &x).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()));
        }
        let back = RowSparseMatrix::read_from(&ws.to_bytes()[..]).unwrap();
        prop_assert_eq!(back, ws);
    }

    #[test]
    fn full_density_product_is_dense_bitwise(
        (w, x) in (1usize..8, 1usize..40, 1usize..10)
            .prop_flat_map(|(r, c, t)| (weights(r, c), weights(c, t))),
    ) {
        let p = SelectionParams::new(1.0, w.cols(), Strategy::Sort, TieMode::Canonical).unwrap();
        let ws = sparse::compress(&w, &selection::select(&scoring::magnitude_score(&w), &p)).unwrap();
        prop_assert_eq!(sparse::sparse_matmul(&ws, &x).unwrap(), linalg::matmul(&w, &x).unwrap());
        prop_assert_eq!(sparse::approx_loss(&w, &ws, &x).unwrap(), 0.0);
    }

    #[test]
    fn wanda_scores_scale_with_norms(w in weights(3, 12), norms in prop::collection::vec(0.0f32..5.0, 12)) {
        let s = scoring::wanda_score(&w, &ActivationStats::from_norms(norms.clone(), 4)).unwrap();
        for i in 0..3 {
            for j in 0..12 {
                prop_assert_eq!(s.get(i, j), w.get(i, j).abs() * norms[j]);
            }
        }
    }
}
