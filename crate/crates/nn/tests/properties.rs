use lqae_nn::layers::LayerNorm;
use lqae_nn::{Mat, ParamBuilder};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Mat::from_vec(rows, cols, d))
}

fn naive(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
    Mat::from_fn(a.rows, b.cols, |i, j| (0..a.cols).map(|k| a.get(i, k) * b.get(k, j)).sum())
}

fn transpose(m: &Mat<f64>) -> Mat<f64> {
    Mat::from_fn(m.cols, m.rows, |i, j| m.get(j, i))
}

fn close(a: &Mat<f64>, b: &Mat<f64>) -> bool {
    a.rows == b.rows && a.cols == b.cols && a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() <= 1e-9)
}

fn products() -> impl Strategy<Value = (Mat<f64>, Mat<f64>)> {
    (1usize..9, 1usize..9, 1usize..9).prop_flat_map(|(m, k, n)| (mat(m, k), mat(k, n)))
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop((a, b) in products()) {
        prop_assert!(close(&a.matmul(&b), &naive(&a, &b)));
    }

    #[test]
    fn matmul_t_is_matmul_with_transpose((a, b) in products()) {
        prop_assert!(close(&a.matmul_t(&transpose(&b)), &naive(&a, &b)));
    }

    #[test]
    fn layer_norm_rows_are_standardized(x in (1usize..5, 2usize..12).prop_flat_map(|(r, c)| mat(r, c))) {
        let mut init = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut init);
        let ln: LayerNorm<f64> = LayerNorm::new(&mut pb, "ln", x.cols);
        let (y, _) = ln.forward(&x);
        for r in 0..y.rows {
            let row = y.row(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            // eps in the denominator pulls near-constant rows below unit variance
            let raw = x.row(r);
            let raw_mean = raw.iter().sum::<f64>() / n;
            let raw_var = raw.iter().map(|v| (v - raw_mean).powi(2)).sum::<f64>() / n;
            if raw_var > 1e-2 {
                prop_assert!((var - 1.0).abs() < 1e-2, "variance {var}");
            }
        }
    }
}
