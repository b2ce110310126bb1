//! Seeded random streams. Each consumer draws from its own ChaCha stream so
//! that, for example, changing the number of parameters never shifts the data
//! split.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Split = 1,
    Init = 2,
    Shuffle = 3,
    Dropout = 4,
    Synthetic = 5,
    Fixture = 6,
}

pub fn stream(seed: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}
