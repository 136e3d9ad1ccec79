//! Concurrency cap around any backend handle.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};

use super::{Embedder, EmbeddingVector, ImageGenerator, Matter, Recaptioner};
use crate::compositor::CanvasSpec;
use crate::error::Result;
use crate::layer::{AlphaRaster, Matte, RgbRaster};

/// Wraps `inner` so at most `limit` calls run at once; extra callers block.
#[derive(Debug)]
pub struct Limited<T> {
    inner: T,
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
    peak: AtomicUsize,
    calls: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LimitStats {
    pub limit: usize,
    pub max_in_flight: usize,
    pub calls: usize,
}

impl<T> Limited<T> {
    pub fn new(inner: T, limit: usize) -> Self {
        Self {
            inner,
            limit: limit.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            peak: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }

    pub fn stats(&self) -> LimitStats {
        LimitStats {
            limit: self.limit,
            max_in_flight: self.peak.load(Ordering::SeqCst),
            calls: self.calls.load(Ordering::SeqCst),
        }
    }

    fn run<R>(&self, f: impl FnOnce(&T) -> R) -> R {
        {
            let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
            while *n >= self.limit {
                n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
            }
            *n += 1;
            self.peak.fetch_max(*n, Ordering::SeqCst);
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let _permit = Permit(self);
        f(&self.inner)
    }
}

struct Permit<'a, T>(&'a Limited<T>);

impl<T> Drop for Permit<'_, T> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

impl<T: ImageGenerator> ImageGenerator for Limited<T> {
    fn generate(&self, prompt: &str, canvas: CanvasSpec, seed: u64) -> Result<RgbRaster> {
        self.run(|g| g.generate(prompt, canvas, seed))
    }
}

impl<T: Matter> Matter for Limited<T> {
    fn predict_matte(&self, image: &RgbRaster) -> Result<Matte> {
        self.run(|m| m.predict_matte(image))
    }
}

impl<T: Embedder> Embedder for Limited<T> {
    fn embed_image(&self, image: &AlphaRaster) -> Result<EmbeddingVector> {
        self.run(|e| e.embed_image(image))
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        self.run(|e| e.embed_text(text))
    }
}

impl<T: Recaptioner> Recaptioner for Limited<T> {
    fn recaption(&self, image: &RgbRaster, instruction: &str) -> Result<String> {
        self.run(|r| r.recaption(image, instruction))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::time::Duration;

    struct Slow;

    impl Recaptioner for Slow {
        fn recaption(&self, _: &RgbRaster, _: &str) -> Result<String> {
            std::thread::sleep(Duration::from_millis(15));
            Ok("ok".into())
        }
    }

    #[test]
    fn in_flight_never_exceeds_limit() {
        let lim = Arc::new(Limited::new(Slow, 3));
        let img = RgbRaster::filled(1, 1, [0, 0, 0]).unwrap();
        std::thread::scope(|s| {
            for _ in 0..12 {
                let lim = lim.clone();
                let img = img.clone();
                s.spawn(move || lim.recaption(&img, "x").unwrap());
            }
        });
        let st = lim.stats();
        assert_eq!(st.calls, 12);
        assert!(st.max_in_flight <= 3);
        assert!(st.max_in_flight >= 2, "expected overlap, got {st:?}");
    }
}
