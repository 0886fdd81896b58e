use super::{Rng, SimError, Tensor};

/// Synthetic classification data: noisy points around random class centres.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, dim]`
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Rows selected by `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>), SimError> {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::from_vec(vec![indices.len(), dim], data)?, labels))
    }
}

/// Class centres on the unit hypercube, points offset by up to 0.1 per
/// coordinate, labels assigned round-robin.
pub fn make_dataset(
    n: usize,
    dim: usize,
    classes: usize,
    rng: &mut Rng,
) -> Result<Dataset, SimError> {
    if n == 0 || dim == 0 || classes == 0 {
        return Err(SimError::InvalidSpec(format!(
            "dataset needs n, dim, classes >= 1 (got {n}, {dim}, {classes})"
        )));
    }
    let centres: Vec<f64> = (0..classes * dim).map(|_| rng.next_f64()).collect();
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let centre = &centres[label * dim..(label + 1) * dim];
        features.extend(centre.iter().map(|&c| c + 0.1 * rng.uniform(-1.0, 1.0)));
        labels.push(label);
    }
    Ok(Dataset {
        features: Tensor::from_vec(vec![n, dim], features)?,
        labels,
        classes,
    })
}

/// Serves consecutive minibatches from a per-epoch shuffled order. A batch
/// that runs past the end of an epoch continues into the next shuffle.
#[derive(Debug, Clone)]
pub struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl Batcher {
    pub fn new(n: usize, batch: usize) -> Result<Self, SimError> {
        if batch == 0 || batch > n {
            return Err(SimError::InvalidSpec(format!(
                "batch size {batch} must be in 1..={n}"
            )));
        }
        Ok(Self {
            order: (0..n).collect(),
            cursor: n,
            batch,
        })
    }

    pub fn next_batch(&mut self, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.cursor == self.order.len() {
                for (i, slot) in self.order.iter_mut().enumerate() {
                    *slot = i;
                }
                rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            let take = (self.batch - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}
