//! Training-dynamics checks that need longer runs than unit tests.

use dnrt_core::denoiser::{
    loss_gradient_fd_error, train_rotations, BundleEntry, LayerBundle, LinearKind,
    RotationPair, TrainConfig,
};
use dnrt_core::importance::Metric;
use dnrt_core::linalg::Matrix;
use dnrt_core::random::{gaussian_matrix, seeded_rng};

fn gram(dim: usize, samples: usize, seed: u64) -> Matrix {
    let x = gaussian_matrix(&mut seeded_rng(seed), dim, samples);
    x.matmul(&x.transpose()).unwrap()
}

fn random_bundle(
    hidden: usize,
    n_heads: usize,
    ffn: usize,
    metric: Metric,
    seed: u64,
) -> LayerBundle {
    let mut entries = Vec::new();
    for (offset, kind) in LinearKind::ALL.into_iter().enumerate() {
        let (rows, cols) = match kind {
            LinearKind::Gate | LinearKind::Up => (ffn, hidden),
            LinearKind::Down => (hidden, ffn),
            _ => (hidden, hidden),
        };
        let h_dim = if kind == LinearKind::Down { ffn } else { hidden };
        let w = gaussian_matrix(&mut seeded_rng(seed * 1000 + offset as u64), rows, cols);
        let h = gram(h_dim, 2 * h_dim, seed * 1000 + 500 + offset as u64);
        entries.push(BundleEntry::new(kind, w, h));
    }
    LayerBundle::new(entries, metric, n_heads).unwrap()
}

#[test]
fn loss_trend_improves_between_run_halves_for_most_seeds() {
    let config = TrainConfig { steps: 200, ..TrainConfig::default() };
    let mut improved = 0;
    for seed in 0..20 {
        let bundle = random_bundle(16, 2, 24, Metric::Obd, 1000 + seed);
        let out = train_rotations(&bundle, &config).unwrap();
        let losses: Vec<f64> = out.trajectory.iter().map(|p| p.loss).collect();
        let early = losses[..=100].iter().cloned().fold(f64::INFINITY, f64::min);
        let late = losses[100..].iter().cloned().fold(f64::INFINITY, f64::min);
        if late < early {
            improved += 1;
        }
    }
    assert!(improved >= 19, "loss trend improved for only {improved}/20 seeds");
}

#[test]
fn sixteen_dim_bundle_gradient_matches_finite_differences() {
    let bundle = random_bundle(16, 2, 20, Metric::Obd, 77);
    let pair = RotationPair::identity(16, 16, 2, 1).unwrap();
    let err = loss_gradient_fd_error(&bundle, &pair, 1e-12, 1e-5).unwrap();
    assert!(err <= 1e-4, "16-dim bundle FD error {err}");
}

#[test]
fn gradient_also_matches_away_from_identity() {
    let bundle = random_bundle(8, 2, 12, Metric::SparseGpt, 78);
    let config = TrainConfig { steps: 15, ..TrainConfig::default() };
    let trained = train_rotations(&bundle, &config).unwrap();
    let err = loss_gradient_fd_error(&bundle, &trained.pair, 1e-12, 1e-5).unwrap();
    assert!(err <= 1e-4, "post-training FD error {err}");
}
