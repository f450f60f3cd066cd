use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    #[default]
    GlorotUniform,
}

impl InitScheme {
    /// Draws a `rows x cols` matrix with fan-in `cols` and fan-out `rows`.
    pub fn sample<R: Rng + ?Sized>(self, rows: usize, cols: usize, rng: &mut R) -> Matrix {
        match self {
            InitScheme::GlorotUniform => {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                let data = (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect();
                Matrix::from_vec(rows, cols, data).expect("length matches shape")
            }
        }
    }
}

/// Deterministic weight matrix for `(rows, cols, seed)`.
pub fn init_params(rows: usize, cols: usize, seed: u64, scheme: InitScheme) -> Matrix {
    assert!(rows > 0 && cols > 0, "dimensions must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scheme.sample(rows, cols, &mut rng)
}
