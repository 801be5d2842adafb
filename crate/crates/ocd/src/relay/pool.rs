//! Reusable worker pool: pre-spawned sleeping threads awaiting assignment.
//! Claiming from a non-empty pool costs no spawn; exhaustion degrades to
//! on-demand creation; a background refiller restores the low watermark and
//! releases above the high watermark retire the worker.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

type Job = Box<dyn FnOnce() + Send + 'static>;

struct Worker {
    tx: Sender<Job>,
    handle: Option<JoinHandle<()>>,
}

impl Worker {
    fn spawn(counter: &AtomicU64) -> Worker {
        counter.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::channel::<Job>();
        let handle = std::thread::spawn(move || {
            // Sleeps on the channel between assignments.
            while let Ok(job) = rx.recv() {
                job();
            }
        });
        Worker { tx, handle: Some(handle) }
    }
}

struct PoolState {
    idle: Vec<Worker>,
    shutting_down: bool,
}

pub struct WorkerPool {
    state: Arc<(Mutex<PoolState>, Condvar)>,
    low_watermark: usize,
    high_watermark: usize,
    spawned: Arc<AtomicU64>,
    on_demand: Arc<AtomicU64>,
    refiller: Option<JoinHandle<()>>,
}

/// A claimed worker. Run jobs on it with [`WorkerHandle::execute`], then
/// hand it back with [`WorkerPool::release`].
pub struct WorkerHandle {
    worker: Worker,
}

impl WorkerHandle {
    pub fn execute<F: FnOnce() + Send + 'static>(&self, job: F) {
        // Receiver lives as long as the worker; send only fails after
        // retirement, which release() rules out.
        let _ = self.worker.tx.send(Box::new(job));
    }
}

impl WorkerPool {
    pub fn new(initial_size: usize, low_watermark: usize, high_watermark: usize) -> WorkerPool {
        assert!(low_watermark <= high_watermark);
        let spawned = Arc::new(AtomicU64::new(0));
        let mut idle = Vec::with_capacity(initial_size);
        for _ in 0..initial_size {
            idle.push(Worker::spawn(&spawned));
        }
        let state = Arc::new((
            Mutex::new(PoolState { idle, shutting_down: false }),
            Condvar::new(),
        ));
        let refiller = {
            let state = Arc::clone(&state);
            let spawned = Arc::clone(&spawned);
            let low = low_watermark;
            std::thread::spawn(move || loop {
                let (lock, cv) = &*state;
                let mut st = lock.lock().unwrap();
                while !st.shutting_down && st.idle.len() >= low {
                    st = cv.wait(st).unwrap();
                }
                if st.shutting_down {
                    return;
                }
                while st.idle.len() < low {
                    let w = Worker::spawn(&spawned);
                    st.idle.push(w);
                }
            })
        };
        WorkerPool {
            state,
            low_watermark,
            high_watermark,
            spawned,
            on_demand: Arc::new(AtomicU64::new(0)),
            refiller: Some(refiller),
        }
    }

    /// Returns a ready worker. No spawn happens while the pool is
    /// non-empty; on exhaustion a fresh worker is created on demand and the
    /// refiller is woken.
    pub fn acquire(&self) -> WorkerHandle {
        let (lock, cv) = &*self.state;
        let popped = {
            let mut st = lock.lock().unwrap();
            let w = st.idle.pop();
            if st.idle.len() < self.low_watermark {
                cv.notify_one();
            }
            w
        };
        match popped {
            Some(worker) => WorkerHandle { worker },
            None => {
                self.on_demand.fetch_add(1, Ordering::SeqCst);
                WorkerHandle { worker: Worker::spawn(&self.spawned) }
            }
        }
    }

    /// Returns a worker to the pool; above the high watermark the worker is
    /// retired instead.
    pub fn release(&self, handle: WorkerHandle) {
        let (lock, _) = &*self.state;
        let mut st = lock.lock().unwrap();
        if st.idle.len() >= self.high_watermark {
            drop(st);
            let mut w = handle.worker;
            drop(w.tx);
            if let Some(h) = w.handle.take() {
                let _ = h.join();
            }
        } else {
            st.idle.push(handle.worker);
        }
    }

    pub fn idle_count(&self) -> usize {
        self.state.0.lock().unwrap().idle.len()
    }

    /// Total threads ever spawned (initial fill + refills + on-demand).
    pub fn spawned_total(&self) -> u64 {
        self.spawned.load(Ordering::SeqCst)
    }

    /// Spawns that happened because the pool was exhausted.
    pub fn on_demand_spawns(&self) -> u64 {
        self.on_demand.load(Ordering::SeqCst)
    }

    /// Blocks until the refiller has restored the low watermark.
    pub fn wait_for_refill(&self) {
        while self.idle_count() < self.low_watermark {
            std::thread::sleep(std::time::Duration::from_millis(1));
        }
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        {
            let (lock, cv) = &*self.state;
            let mut st = lock.lock().unwrap();
            st.shutting_down = true;
            cv.notify_all();
            for mut w in st.idle.drain(..) {
                drop(w.tx);
                if let Some(h) = w.handle.take() {
                    let _ = h.join();
                }
            }
        }
        if let Some(h) = self.refiller.take() {
            let _ = h.join();
        }
    }
}
