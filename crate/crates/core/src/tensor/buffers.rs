//! Thread-local reuse of large buffers. Fresh multi-megabyte allocations
//! are returned to the OS on free, so every reuse would otherwise page-fault
//! the whole buffer again; attention matrices hit this on every step.

use std::any::{Any, TypeId};
use std::cell::RefCell;
use std::collections::HashMap;

use super::Scalar;

/// Buffers shorter than this are left to the allocator.
const MIN_LEN: usize = 1 << 20;
const MAX_POOLED_BYTES: usize = 768 << 20;
const MAX_POOLED_BUFFERS: usize = 16;

#[derive(Default)]
struct Pool {
    bufs: HashMap<TypeId, Vec<Box<dyn Any>>>,
    bytes: usize,
}

thread_local! {
    static POOL: RefCell<Pool> = RefCell::new(Pool::default());
}

/// A zero-filled vector of length `len`, reusing a pooled buffer when one fits.
pub(crate) fn zeroed<T: Scalar>(len: usize) -> Vec<T> {
    if len >= MIN_LEN {
        if let Some(mut v) = take::<T>(len) {
            v.clear();
            v.resize(len, T::zero());
            return v;
        }
    }
    vec![T::zero(); len]
}

fn take<T: Scalar>(len: usize) -> Option<Vec<T>> {
    POOL.with(|pool| {
        let mut pool = pool.borrow_mut();
        let list = pool.bufs.get_mut(&TypeId::of::<T>())?;
        let best = list
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.downcast_ref::<Vec<T>>().map(|v| (i, v.capacity())))
            .filter(|&(_, cap)| cap >= len)
            .min_by_key(|&(_, cap)| cap)?
            .0;
        let v = *list.swap_remove(best).downcast::<Vec<T>>().ok()?;
        pool.bytes -= v.capacity() * std::mem::size_of::<T>();
        Some(v)
    })
}

/// Hands a buffer back for reuse; small buffers are simply dropped.
pub(crate) fn recycle<T: Scalar>(v: Vec<T>) {
    let bytes = v.capacity() * std::mem::size_of::<T>();
    if v.capacity() < MIN_LEN {
        return;
    }
    POOL.with(|pool| {
        let mut pool = pool.borrow_mut();
        let count: usize = pool.bufs.values().map(Vec::len).sum();
        if pool.bytes + bytes > MAX_POOLED_BYTES || count >= MAX_POOLED_BUFFERS {
            return;
        }
        pool.bytes += bytes;
        pool.bufs.entry(TypeId::of::<T>()).or_default().push(Box::new(v));
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reused_buffers_come_back_zeroed() {
        // the test harness may reuse threads, so start from an empty pool
        POOL.with(|p| *p.borrow_mut() = Pool::default());
        let mut v = zeroed::<f32>(MIN_LEN + 10);
        v.iter_mut().for_each(|x| *x = 3.0);
        let ptr = v.as_ptr();
        recycle(v);
        let w = zeroed::<f32>(MIN_LEN + 5);
        assert_eq!(w.as_ptr(), ptr);
        assert_eq!(w.len(), MIN_LEN + 5);
        assert!(w.iter().all(|&x| x == 0.0));
        // a different element type never receives it
        recycle(w);
        let d = zeroed::<f64>(MIN_LEN);
        assert!(d.iter().all(|&x| x == 0.0));
        assert_eq!(zeroed::<f32>(10), vec![0.0; 10]);
    }
}
