use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
    static FWD: RefCell<HashMap<usize, Arc<dyn Fft<f64>>>> = RefCell::new(HashMap::new());
    static INV: RefCell<HashMap<usize, Arc<dyn Fft<f64>>>> = RefCell::new(HashMap::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let cache = if inverse { &INV } else { &FWD };
    cache.with(|c| {
        if let Some(f) = c.borrow().get(&len) {
            return f.clone();
        }
        let f = PLANNER.with(|p| {
            let mut p = p.borrow_mut();
            if inverse {
                p.plan_fft_inverse(len)
            } else {
                p.plan_fft_forward(len)
            }
        });
        c.borrow_mut().insert(len, f.clone());
        f
    })
}

/// Unnormalized in-place forward FFT.
pub fn fft_in_place(data: &mut [Complex64]) {
    plan(data.len(), false).process(data);
}

/// In-place inverse FFT normalized by 1/N, so `ifft(fft(x)) == x`.
pub fn ifft_in_place(data: &mut [Complex64]) {
    let n = data.len();
    plan(n, true).process(data);
    let scale = 1.0 / n as f64;
    for v in data.iter_mut() {
        *v *= scale;
    }
}

/// Frequency of FFT bin `k` for an `n`-point transform at `rate` Sa/s,
/// in [-rate/2, rate/2).
pub fn bin_frequency(k: usize, n: usize, rate: f64) -> f64 {
    let k = k as i64;
    let n_i = n as i64;
    let signed = if k <= (n_i - 1) / 2 { k } else { k - n_i };
    signed as f64 * rate / n as f64
}

/// Smallest 5-smooth integer >= n. Keeps large transforms on fast
/// mixed-radix paths instead of Bluestein fallbacks.
pub fn next_fast_len(n: usize) -> usize {
    fn smooth(mut m: usize) -> bool {
        for p in [2, 3, 5] {
            while m % p == 0 {
                m /= p;
            }
        }
        m == 1
    }
    let mut m = n.max(1);
    while !smooth(m) {
        m += 1;
    }
    m
}
