use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Index partitions into the original record list, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub const VAL_FRACTION: f64 = 0.1;

/// Balanced test set of `test_n` (half per class), then a stratified
/// 90/10 train/validation split of the rest.
pub fn split_dataset(labels: &[u8], test_n: usize, seed: u64) -> Result<Split> {
    if !test_n.is_multiple_of(2) {
        return Err(Error::Config(format!("test size {test_n} must be even for a balanced split")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < test_n / 2 {
            return Err(Error::Data(format!(
                "class {class} has {} subjects, the test set alone needs {}",
                members.len(),
                test_n / 2
            )));
        }
        members.shuffle(&mut rng);
        let rest = members.split_off(test_n / 2);
        split.test.extend(members);
        let n_val = (rest.len() as f64 * VAL_FRACTION).round() as usize;
        split.val.extend_from_slice(&rest[..n_val]);
        split.train.extend_from_slice(&rest[n_val..]);
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Data(format!("label {l} is not 0 or 1")));
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}
