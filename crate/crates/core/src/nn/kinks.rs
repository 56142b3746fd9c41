//! Optional recording of the branch taken at every non-differentiable point
//! (ReLU, max pooling, L1 sign, probability clamp) during forward passes.
//!
//! Finite-difference checks use it to tell whether a perturbation crossed a
//! kink, where a central difference does not estimate the gradient.

use std::cell::RefCell;

thread_local! {
    static RECORD: RefCell<Option<Vec<u64>>> = const { RefCell::new(None) };
}

/// Runs `f` and returns its result with the branch pattern it produced.
pub fn record<R>(f: impl FnOnce() -> R) -> (R, Vec<u64>) {
    let outer = RECORD.with(|r| r.borrow_mut().replace(Vec::new()));
    let out = f();
    let pattern = RECORD.with(|r| std::mem::replace(&mut *r.borrow_mut(), outer)).unwrap_or_default();
    (out, pattern)
}

pub(crate) fn active() -> bool {
    RECORD.with(|r| r.borrow().is_some())
}

/// Appends branch flags, packed 64 per word.
pub(crate) fn push(flags: impl Iterator<Item = bool>) {
    RECORD.with(|r| {
        if let Some(v) = r.borrow_mut().as_mut() {
            let mut word = 0u64;
            let mut n = 0;
            for f in flags {
                word = (word << 1) | f as u64;
                n += 1;
                if n == 64 {
                    v.push(word);
                    word = 0;
                    n = 0;
                }
            }
            v.push(word);
        }
    });
}

pub(crate) fn push_indices(indices: &[usize]) {
    RECORD.with(|r| {
        if let Some(v) = r.borrow_mut().as_mut() {
            v.extend(indices.iter().map(|&i| i as u64));
        }
    });
}
