use proptest::prelude::*;
use thermvis_core::cx::{cx_loss, cx_loss_with_grad, distance_matrix, FeatureSet};
use thermvis_core::rng::SeededRng;

/// Direct transcription of the contextual similarity, one scalar at a time.
fn naive_cx(g: &[Vec<f64>], r: &[Vec<f64>], h: f64, eps: f64) -> f64 {
    let dim = r[0].len();
    let mu: Vec<f64> = (0..dim)
        .map(|k| r.iter().map(|row| row[k]).sum::<f64>() / r.len() as f64)
        .collect();
    let centred = |v: &Vec<f64>| -> Vec<f64> { v.iter().zip(&mu).map(|(a, b)| a - b).collect() };
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut d = vec![vec![0.0; r.len()]; g.len()];
    for (i, gi) in g.iter().enumerate() {
        for (j, rj) in r.iter().enumerate() {
            let (a, b) = (centred(gi), centred(rj));
            let cos = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()
                / (norm(&a).max(1e-12) * norm(&b).max(1e-12));
            d[i][j] = (1.0 - cos).clamp(0.0, 2.0);
        }
    }
    let mut a = vec![vec![0.0; r.len()]; g.len()];
    for i in 0..g.len() {
        let min = d[i].iter().cloned().fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = d[i]
            .iter()
            .map(|&dij| ((1.0 - dij / (min + eps)) / h).exp())
            .collect();
        let total: f64 = w.iter().sum();
        for j in 0..r.len() {
            a[i][j] = w[j] / total;
        }
    }
    (0..r.len())
        .map(|j| (0..g.len()).map(|i| a[i][j]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / r.len() as f64
}

fn random_rows(rng: &mut SeededRng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect()
}

#[test]
fn matches_scalar_oracle() {
    let mut rng = SeededRng::new(11);
    for _ in 0..200 {
        let (n, m, dim) = (1 + rng.below(12), 1 + rng.below(12), 2 + rng.below(10));
        let h = rng.uniform(0.1, 1.0);
        let g = random_rows(&mut rng, n, dim);
        let r = random_rows(&mut rng, m, dim);
        let fast = cx_loss(
            &FeatureSet::from_rows(&g).unwrap(),
            &FeatureSet::from_rows(&r).unwrap(),
            h,
            1e-5,
        )
        .unwrap();
        let slow = -naive_cx(&g, &r, h, 1e-5).ln();
        assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
    }
}

#[test]
fn distance_matrix_bounds() {
    let mut rng = SeededRng::new(5);
    let g = FeatureSet::from_rows(&random_rows(&mut rng, 9, 4)).unwrap();
    let r = FeatureSet::from_rows(&random_rows(&mut rng, 7, 4)).unwrap();
    let d = distance_matrix(&g, &r).unwrap();
    assert_eq!((d.rows(), d.cols()), (9, 7));
    for i in 0..9 {
        assert!(d.row(i).iter().all(|v| (0.0..=2.0).contains(v)));
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = SeededRng::new(23);
    for _ in 0..30 {
        let (n, m, dim) = (2 + rng.below(6), 2 + rng.below(6), 3 + rng.below(5));
        let g = random_rows(&mut rng, n, dim);
        let r = FeatureSet::from_rows(&random_rows(&mut rng, m, dim)).unwrap();
        let gs = FeatureSet::from_rows(&g).unwrap();
        let (_, grad) = cx_loss_with_grad(&gs, &r, 0.5, 1e-5).unwrap();
        let step = 1e-6;
        let mut num = vec![0.0; grad.len()];
        for k in 0..grad.len() {
            let mut plus = gs.data().to_vec();
            let mut minus = gs.data().to_vec();
            plus[k] += step;
            minus[k] -= step;
            let lp = cx_loss(&FeatureSet::new(dim, plus).unwrap(), &r, 0.5, 1e-5).unwrap();
            let lm = cx_loss(&FeatureSet::new(dim, minus).unwrap(), &r, 0.5, 1e-5).unwrap();
            num[k] = (lp - lm) / (2.0 * step);
        }
        let diff: f64 = grad
            .iter()
            .zip(&num)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = grad.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        assert!(diff / scale < 1e-5, "relative error {}", diff / scale);
    }
}

fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>, u64)> {
    (1usize..8, 1usize..8, 2usize..6).prop_flat_map(|(n, m, dim)| {
        (
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, dim), n),
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, dim), m),
            any::<u64>(),
        )
    })
}

proptest! {
    #[test]
    fn similarity_is_a_probability((g, r, _) in instance()) {
        let loss = cx_loss(&FeatureSet::from_rows(&g).unwrap(), &FeatureSet::from_rows(&r).unwrap(), 0.5, 1e-5).unwrap();
        let cx = (-loss).exp();
        prop_assert!(loss >= -1e-12);
        prop_assert!(cx > 0.0 && cx <= 1.0 + 1e-12);
        prop_assert!(cx >= 1.0 / r.len() as f64 - 1e-12);
    }

    #[test]
    fn invariant_to_row_order((g, r, seed) in instance()) {
        let gs = FeatureSet::from_rows(&g).unwrap();
        let rs = FeatureSet::from_rows(&r).unwrap();
        let mut rng = SeededRng::new(seed);
        let mut gi: Vec<usize> = (0..g.len()).collect();
        let mut ri: Vec<usize> = (0..r.len()).collect();
        rng.shuffle(&mut gi);
        rng.shuffle(&mut ri);
        let a = cx_loss(&gs, &rs, 0.5, 1e-5).unwrap();
        let b = cx_loss(&gs.permuted(&gi), &rs.permuted(&ri), 0.5, 1e-5).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }
}
