//! Fixed-capacity FIFO rings of unit-norm negative keys.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{arg_err, Result};
use crate::seed::substream;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    storage: Arc<Array2<f64>>,
    write_ptr: usize,
    /// Enqueue call that last wrote each slot (0 = initial fill).
    stamps: Vec<u64>,
    enqueues: u64,
}

impl MemoryBank {
    /// `capacity` random unit vectors of dimension `dim`.
    pub fn new(capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return arg_err(format!("bank needs K > 0 and d > 0, got K={capacity}, d={dim}"));
        }
        let mut rng = substream(seed, "bank-init");
        let mut storage = Array2::from_shape_fn((capacity, dim), |_| StandardNormal.sample(&mut rng));
        normalize_rows(&mut storage);
        Ok(Self {
            storage: Arc::new(storage),
            write_ptr: 0,
            stamps: vec![0; capacity],
            enqueues: 0,
        })
    }

    /// Rebuilds a bank from serialized parts.
    pub fn from_parts(storage: Array2<f64>, write_ptr: usize, enqueues: u64, stamps: Vec<u64>) -> Result<Self> {
        if storage.nrows() == 0 || write_ptr >= storage.nrows() || stamps.len() != storage.nrows() {
            return arg_err("inconsistent bank parts");
        }
        Ok(Self {
            storage: Arc::new(storage),
            write_ptr,
            stamps,
            enqueues,
        })
    }

    pub fn capacity(&self) -> usize {
        self.storage.nrows()
    }

    pub fn dim(&self) -> usize {
        self.storage.ncols()
    }

    pub fn write_ptr(&self) -> usize {
        self.write_ptr
    }

    pub fn enqueues(&self) -> u64 {
        self.enqueues
    }

    pub fn stamps(&self) -> &[u64] {
        &self.stamps
    }

    /// Writes `keys` at the ring pointer, overwriting the oldest entries.
    /// Rows are re-normalized before storage.
    pub fn enqueue(&mut self, keys: &Array2<f64>) -> Result<()> {
        let (b, d) = keys.dim();
        let k = self.capacity();
        if d != self.dim() {
            return arg_err(format!("key dim {d} != bank dim {}", self.dim()));
        }
        if b > k {
            return arg_err(format!("batch of {b} keys exceeds bank capacity {k}"));
        }
        let mut keys = keys.to_owned();
        normalize_rows(&mut keys);
        self.enqueues += 1;
        let store = Arc::make_mut(&mut self.storage);
        let first = b.min(k - self.write_ptr);
        store
            .slice_mut(s![self.write_ptr..self.write_ptr + first, ..])
            .assign(&keys.slice(s![..first, ..]));
        if first < b {
            store.slice_mut(s![..b - first, ..]).assign(&keys.slice(s![first.., ..]));
        }
        for i in 0..b {
            self.stamps[(self.write_ptr + i) % k] = self.enqueues;
        }
        self.write_ptr = (self.write_ptr + b) % k;
        Ok(())
    }

    /// Read-only snapshot of all K keys; later enqueues do not affect it.
    pub fn negatives(&self) -> Arc<Array2<f64>> {
        Arc::clone(&self.storage)
    }

    /// Mean number of enqueue calls since each stored key was written.
    pub fn mean_age(&self) -> f64 {
        self.stamps.iter().map(|&s| (self.enqueues - s) as f64).sum::<f64>() / self.capacity() as f64
    }
}

fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
}

/// The clean and adversarial banks used by the trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct Banks {
    pub clean: MemoryBank,
    pub adv: MemoryBank,
}

impl Banks {
    pub fn new(capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            clean: MemoryBank::new(capacity, dim, seed)?,
            adv: MemoryBank::new(capacity, dim, seed ^ 0xADADADAD)?,
        })
    }
}
