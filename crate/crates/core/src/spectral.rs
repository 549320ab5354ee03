//! FFT plan cache shared by the position/momentum representations.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<usize, Plans>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

/// Forward (e^{-2πi jk/n}) and inverse (e^{+2πi jk/n}) transforms of one size.
/// Neither direction is normalised; [`Plans::inverse`] divides by n.
#[derive(Clone)]
pub struct Plans {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    len: usize,
}

impl Plans {
    pub fn new(len: usize) -> Self {
        PLANS.with(|cell| {
            let (planner, cache) = &mut *cell.borrow_mut();
            cache
                .entry(len)
                .or_insert_with(|| Plans {
                    fwd: planner.plan_fft_forward(len),
                    inv: planner.plan_fft_inverse(len),
                    len,
                })
                .clone()
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn forward(&self, buf: &mut [Complex64]) {
        self.fwd.process(buf);
    }

    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.inv.process(buf);
        let scale = 1.0 / self.len as f64;
        for x in buf.iter_mut() {
            *x *= scale;
        }
    }

    /// Inverse transform without the 1/n factor.
    pub fn inverse_unscaled(&self, buf: &mut [Complex64]) {
        self.inv.process(buf);
    }
}

/// Signed FFT index for bin `j` of an `n`-point transform.
pub fn signed_index(j: usize, n: usize) -> i64 {
    if j < n.div_ceil(2) {
        j as i64
    } else {
        j as i64 - n as i64
    }
}
