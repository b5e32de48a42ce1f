//! Per-thread CPU time.

use std::time::Duration;

/// CPU time consumed by the calling thread so far.
pub fn thread_cpu_time() -> Duration {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid, writable timespec for the duration of the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    assert_eq!(rc, 0, "clock_gettime(CLOCK_THREAD_CPUTIME_ID) failed");
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

/// Runs `f` and returns its result with the thread CPU time it used.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, Duration) {
    let start = thread_cpu_time();
    let r = f();
    (r, thread_cpu_time().saturating_sub(start))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn busy_work_consumes_cpu_but_sleep_does_not() {
        let (_, busy) = measure(|| (0..3_000_000u64).fold(0u64, |a, b| a.wrapping_mul(31).wrapping_add(b)));
        let (_, idle) = measure(|| std::thread::sleep(Duration::from_millis(30)));
        assert!(busy > Duration::ZERO);
        assert!(idle < Duration::from_millis(15), "{idle:?}");
    }
}
