//! Benchmark-only crate; see `benches/kernels.rs`.
//!
//! Shared fixture builders live here so the bench targets stay small.

use flatnet_core::dataset::PointCloud;
use flatnet_core::linalg::{qr_orthonormalize, Matrix, SymTensor3, Vector};
use flatnet_core::pou::PartitionOfUnity;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub struct LossFixture {
    pub cloud: PointCloud,
    pub base_point: Vector,
    pub tangent: Matrix,
    pub curvature: SymTensor3,
    pub psi: PartitionOfUnity,
}

pub fn loss_fixture(n: usize, ambient_dim: usize, intrinsic_dim: usize, seed: u64) -> LossFixture {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let cloud =
        PointCloud::new(Matrix::from_fn(ambient_dim, n, |_, _| rng.random::<f64>() * 2.0 - 1.0)).unwrap();
    let base_point = cloud.point(0);
    let tangent =
        qr_orthonormalize(&Matrix::from_fn(ambient_dim, intrinsic_dim, |_, _| rng.random::<f64>() - 0.5))
            .unwrap();
    let mut curvature = SymTensor3::zeros(ambient_dim, intrinsic_dim);
    for j in 0..intrinsic_dim {
        for k in j..intrinsic_dim {
            *curvature.slice_mut(j, k) = Vector::from_fn(ambient_dim, |_, _| rng.random::<f64>() - 0.5);
        }
    }
    let psi = PartitionOfUnity::new(base_point.clone(), 1.0, 0.9).unwrap();
    LossFixture { cloud, base_point, tangent, curvature, psi }
}
