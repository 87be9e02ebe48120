use crate::error::{config_err, Error, Result};
use crate::tensor::{Real, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Fixed-capacity FIFO ring of L2-normalised keys.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyQueue<T> {
    dim: usize,
    capacity: usize,
    data: Vec<T>,
    len: usize,
    cursor: usize,
}

impl<T: Real> KeyQueue<T> {
    pub const DEFAULT_CAPACITY: usize = 65_536;

    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(config_err!(
                "key queue needs positive capacity and dimension"
            ));
        }
        Ok(Self {
            dim,
            capacity,
            data: vec![T::zero(); capacity * dim],
            len: 0,
            cursor: 0,
        })
    }

    /// A full queue of random unit vectors.
    pub fn random(capacity: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut q = Self::new(capacity, dim)?;
        for _ in 0..capacity {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            q.push(&v.iter().map(|&x| T::lit(x)).collect::<Vec<_>>())?;
        }
        Ok(q)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Normalises `key` and stores it, evicting the oldest key when full.
    pub fn push(&mut self, key: &[T]) -> Result<()> {
        if key.len() != self.dim {
            return Err(config_err!(
                "key of length {} for a queue of dimension {}",
                key.len(),
                self.dim
            ));
        }
        let norm = key
            .iter()
            .map(|&x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Numeric {
                name: "queue key".into(),
                detail: format!("cannot normalise a key of norm {norm}"),
            });
        }
        let slot = &mut self.data[self.cursor * self.dim..(self.cursor + 1) * self.dim];
        for (s, &x) in slot.iter_mut().zip(key) {
            *s = T::lit(x.as_f64() / norm);
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        Ok(())
    }

    /// Pushes every row of `keys: [B, D]`.
    pub fn enqueue(&mut self, keys: &Tensor<T>) -> Result<()> {
        for row in keys.data().chunks(self.dim) {
            self.push(row)?;
        }
        Ok(())
    }

    /// Stored keys from oldest to newest, `[len, D]`.
    pub fn keys(&self) -> Tensor<T> {
        let start = if self.len < self.capacity {
            0
        } else {
            self.cursor
        };
        let mut out = Vec::with_capacity(self.len * self.dim);
        for i in 0..self.len {
            let s = (start + i) % self.capacity;
            out.extend_from_slice(&self.data[s * self.dim..(s + 1) * self.dim]);
        }
        Tensor::new(&[self.len, self.dim], out).expect("queue shape")
    }

    /// Rebuilds a queue from [`keys`](Self::keys) output.
    pub fn from_keys(capacity: usize, keys: &Tensor<T>) -> Result<Self> {
        let &[len, dim] = keys.shape() else {
            return Err(config_err!(
                "queue keys must be [len, D], got {:?}",
                keys.shape()
            ));
        };
        if len > capacity {
            return Err(config_err!("{len} keys exceed queue capacity {capacity}"));
        }
        let mut q = Self::new(capacity, dim)?;
        q.data[..len * dim].copy_from_slice(keys.data());
        q.len = len;
        q.cursor = len % capacity;
        Ok(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_keeps_latest_in_order() {
        let mut q = KeyQueue::<f64>::new(8, 1).unwrap();
        for b in 0..3 {
            let batch = Tensor::new(
                &[4, 1],
                (0..4)
                    .map(|i| if (b * 4 + i) % 2 == 0 { 1.0 } else { -1.0 })
                    .collect(),
            )
            .unwrap();
            q.enqueue(&batch).unwrap();
        }
        assert_eq!(q.len(), 8);
        // keys 4..12 alternate starting with +1
        assert_eq!(
            q.keys().data(),
            &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0]
        );
    }

    #[test]
    fn stores_normalised_keys_and_round_trips() {
        let mut q = KeyQueue::<f64>::new(3, 2).unwrap();
        q.push(&[3.0, 4.0]).unwrap();
        q.push(&[0.0, 2.0]).unwrap();
        assert_eq!(q.keys().data(), &[0.6, 0.8, 0.0, 1.0]);
        let r = KeyQueue::from_keys(3, &q.keys()).unwrap();
        assert_eq!(r, q);
        assert!(q.push(&[0.0, 0.0]).is_err());
    }
}
