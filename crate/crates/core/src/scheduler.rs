//! Futures-based task execution policy.
//!
//! A task is created with a work closure, wired to other tasks with
//! [`TaskPolicy::add_dependence`], and handed to the scheduler with
//! [`TaskPolicy::spawn`]. It runs once every dependence has completed.
//! [`TaskPolicy::wait`] blocks until all spawned tasks are done.
//!
//! Lifetime of a task:
//!   1. Created: allocated, dependences may still be added.
//!   2. Waiting: spawned, some dependence is still incomplete.
//!   3. Ready: queued for execution.
//!   4. Executing: a worker (or the waiting thread) is running it.
//!   5. Complete: retired; dependents have been released.
//!
//! Each task carries a counter of unsatisfied dependences plus one guard that
//! `spawn` removes, so a task can never become ready before it is spawned.
//! Whoever drops the counter to zero enqueues the task.
//!
//! The sequential backend runs tasks on the thread calling `wait`, strictly in
//! FIFO order of becoming ready. The pooled backend owns a fixed set of worker
//! threads sharing one FIFO ready queue; tasks may start as soon as they are
//! spawned.

use std::collections::VecDeque;
use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicU8, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, Weak};
use std::thread::{self, JoinHandle};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchedError {
    #[error("task {0} was already spawned; dependences must be added before spawn")]
    AlreadySpawned(usize),
    #[error("task {task} and task {dep} belong to different policies")]
    CrossPolicy { task: usize, dep: usize },
    #[error("task {0} cannot depend on itself")]
    SelfDependence(usize),
    #[error("dependence cycle among tasks {0:?}")]
    Cycle(Vec<usize>),
    #[error("{pending} spawned task(s) can never become ready")]
    Stalled { pending: usize },
    #[error("task {0} panicked")]
    TaskPanicked(usize),
    #[error("a pooled policy needs at least one worker")]
    NoWorkers,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    Sequential,
    Pooled(usize),
}

impl Backend {
    pub fn worker_count(&self) -> usize {
        match *self {
            Backend::Sequential => 1,
            Backend::Pooled(n) => n,
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backend::Sequential => write!(f, "seq"),
            Backend::Pooled(n) => write!(f, "pool({n})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum TaskState {
    Created = 0,
    Waiting = 1,
    Ready = 2,
    Executing = 3,
    Complete = 4,
}

impl TaskState {
    fn from_u8(v: u8) -> Self {
        match v {
            0 => TaskState::Created,
            1 => TaskState::Waiting,
            2 => TaskState::Ready,
            3 => TaskState::Executing,
            _ => TaskState::Complete,
        }
    }
}

type Work = Box<dyn FnOnce() + Send + 'static>;

#[derive(Default)]
struct Links {
    complete: bool,
    dependents: Vec<Arc<TaskNode>>,
}

struct TaskNode {
    id: usize,
    policy: usize,
    state: AtomicU8,
    pending: AtomicUsize,
    work: Mutex<Option<Work>>,
    links: Mutex<Links>,
    // Only populated in debug mode, for cycle reporting.
    deps: Mutex<Vec<Weak<TaskNode>>>,
}

impl TaskNode {
    fn state(&self) -> TaskState {
        TaskState::from_u8(self.state.load(Ordering::Acquire))
    }

    fn set_state(&self, s: TaskState) {
        self.state.store(s as u8, Ordering::Release);
    }
}

/// Handle to a task, used to wire dependences and observe completion.
#[derive(Clone)]
pub struct Future(Arc<TaskNode>);

impl Future {
    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn state(&self) -> TaskState {
        self.0.state()
    }

    pub fn is_complete(&self) -> bool {
        self.state() == TaskState::Complete
    }

    pub fn ptr_eq(&self, other: &Future) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl fmt::Debug for Future {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Future")
            .field("id", &self.0.id)
            .field("state", &self.state())
            .finish()
    }
}

#[derive(Default)]
struct Queue {
    ready: VecDeque<Arc<TaskNode>>,
    // spawned but not yet complete
    outstanding: usize,
    executing: usize,
    shutdown: bool,
    failure: Option<SchedError>,
}

struct Shared {
    id: usize,
    debug: bool,
    queue: Mutex<Queue>,
    work_available: Condvar,
    progress: Condvar,
    registry: Mutex<Vec<Arc<TaskNode>>>,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Queue> {
        self.queue.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn enqueue(&self, node: Arc<TaskNode>) {
        node.set_state(TaskState::Ready);
        self.lock().ready.push_back(node);
        self.work_available.notify_one();
    }

    /// Runs a dequeued task and releases its dependents.
    fn execute(&self, node: Arc<TaskNode>) {
        node.set_state(TaskState::Executing);
        let work = node
            .work
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .take();
        let panicked = match work {
            Some(work) => panic::catch_unwind(AssertUnwindSafe(work)).is_err(),
            None => false,
        };

        let dependents = {
            let mut links = node.links.lock().unwrap_or_else(|e| e.into_inner());
            node.set_state(TaskState::Complete);
            links.complete = true;
            std::mem::take(&mut links.dependents)
        };
        let mut released = Vec::new();
        for d in dependents {
            if d.pending.fetch_sub(1, Ordering::AcqRel) == 1 {
                d.set_state(TaskState::Ready);
                released.push(d);
            }
        }

        let mut q = self.lock();
        if panicked && q.failure.is_none() {
            q.failure = Some(SchedError::TaskPanicked(node.id));
        }
        let woke = released.len();
        q.ready.extend(released);
        q.executing -= 1;
        q.outstanding -= 1;
        drop(q);
        match woke {
            0 => {}
            1 => self.work_available.notify_one(),
            _ => self.work_available.notify_all(),
        }
        self.progress.notify_all();
    }

    /// Explains why no spawned task can make progress.
    fn diagnose_stall(&self, pending: usize) -> SchedError {
        if self.debug {
            let registry = self.registry.lock().unwrap_or_else(|e| e.into_inner());
            if let Some(cycle) = find_cycle(&registry) {
                return SchedError::Cycle(cycle);
            }
        }
        SchedError::Stalled { pending }
    }
}

/// Depth-first search for a dependence cycle among incomplete tasks.
fn find_cycle(nodes: &[Arc<TaskNode>]) -> Option<Vec<usize>> {
    use std::collections::HashMap;
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Open,
        Done,
    }
    let incomplete: HashMap<usize, &Arc<TaskNode>> = nodes
        .iter()
        .filter(|n| n.state() != TaskState::Complete)
        .map(|n| (n.id, n))
        .collect();
    let mut marks: HashMap<usize, Mark> = HashMap::new();
    let mut ids: Vec<usize> = incomplete.keys().copied().collect();
    ids.sort_unstable();
    for start in ids {
        if marks.contains_key(&start) {
            continue;
        }
        // (node id, deps, next dep index)
        let mut path: Vec<(usize, Vec<usize>, usize)> = Vec::new();
        let deps_of = |id: usize| -> Vec<usize> {
            incomplete[&id]
                .deps
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .iter()
                .filter_map(Weak::upgrade)
                .filter(|d| d.state() != TaskState::Complete)
                .map(|d| d.id)
                .collect()
        };
        marks.insert(start, Mark::Open);
        path.push((start, deps_of(start), 0));
        while let Some(top) = path.last_mut() {
            let Some(&d) = top.1.get(top.2) else {
                let id = top.0;
                marks.insert(id, Mark::Done);
                path.pop();
                continue;
            };
            top.2 += 1;
            match marks.get(&d) {
                Some(Mark::Open) => {
                    let pos = path.iter().position(|(p, _, _)| *p == d).expect("open on path");
                    return Some(path[pos..].iter().map(|(p, _, _)| *p).collect());
                }
                Some(Mark::Done) => {}
                None if incomplete.contains_key(&d) => {
                    marks.insert(d, Mark::Open);
                    path.push((d, deps_of(d), 0));
                }
                None => {}
            }
        }
    }
    None
}

static POLICY_IDS: AtomicUsize = AtomicUsize::new(0);

/// Owner of tasks: creation, dependence wiring, spawning, and waiting.
pub struct TaskPolicy {
    shared: Arc<Shared>,
    backend: Backend,
    next_task: AtomicUsize,
    workers: Vec<JoinHandle<()>>,
}

impl fmt::Debug for TaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TaskPolicy")
            .field("id", &self.shared.id)
            .field("backend", &self.backend)
            .field("debug", &self.shared.debug)
            .finish()
    }
}

impl TaskPolicy {
    pub fn new(backend: Backend) -> Result<Self, SchedError> {
        Self::build(backend, false)
    }

    /// Like [`new`](Self::new), but keeps a task registry so that a stalled
    /// `wait` can name the dependence cycle responsible.
    pub fn with_debug(backend: Backend) -> Result<Self, SchedError> {
        Self::build(backend, true)
    }

    pub fn sequential() -> Self {
        Self::build(Backend::Sequential, false).expect("sequential policy has no failure modes")
    }

    pub fn pooled(workers: usize) -> Result<Self, SchedError> {
        Self::new(Backend::Pooled(workers))
    }

    fn build(backend: Backend, debug: bool) -> Result<Self, SchedError> {
        let shared = Arc::new(Shared {
            id: POLICY_IDS.fetch_add(1, Ordering::Relaxed),
            debug,
            queue: Mutex::new(Queue::default()),
            work_available: Condvar::new(),
            progress: Condvar::new(),
            registry: Mutex::new(Vec::new()),
        });
        let workers = match backend {
            Backend::Sequential => Vec::new(),
            Backend::Pooled(0) => return Err(SchedError::NoWorkers),
            Backend::Pooled(n) => (0..n)
                .map(|i| {
                    let shared = Arc::clone(&shared);
                    thread::Builder::new()
                        .name(format!("blockic-worker-{i}"))
                        .spawn(move || worker_loop(&shared))
                        .expect("failed to start worker thread")
                })
                .collect(),
        };
        Ok(Self {
            shared,
            backend,
            next_task: AtomicUsize::new(0),
            workers,
        })
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn is_debug(&self) -> bool {
        self.shared.debug
    }

    /// Allocates a task; it will not run until spawned.
    pub fn create<F>(&self, work: F) -> Future
    where
        F: FnOnce() + Send + 'static,
    {
        let node = Arc::new(TaskNode {
            id: self.next_task.fetch_add(1, Ordering::Relaxed),
            policy: self.shared.id,
            state: AtomicU8::new(TaskState::Created as u8),
            pending: AtomicUsize::new(1),
            work: Mutex::new(Some(Box::new(work))),
            links: Mutex::new(Links::default()),
            deps: Mutex::new(Vec::new()),
        });
        if self.shared.debug {
            self.shared
                .registry
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .push(Arc::clone(&node));
        }
        Future(node)
    }

    /// Makes `f` wait for `dep`. A dependence on a completed task is a no-op.
    pub fn add_dependence(&self, f: &Future, dep: &Future) -> Result<(), SchedError> {
        if f.0.policy != self.shared.id || dep.0.policy != self.shared.id {
            return Err(SchedError::CrossPolicy {
                task: f.id(),
                dep: dep.id(),
            });
        }
        if f.state() != TaskState::Created {
            return Err(SchedError::AlreadySpawned(f.id()));
        }
        if f.ptr_eq(dep) {
            return Err(SchedError::SelfDependence(f.id()));
        }
        {
            let mut links = dep.0.links.lock().unwrap_or_else(|e| e.into_inner());
            if !links.complete {
                f.0.pending.fetch_add(1, Ordering::AcqRel);
                links.dependents.push(Arc::clone(&f.0));
            }
        }
        if self.shared.debug {
            f.0.deps
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .push(Arc::downgrade(&dep.0));
        }
        Ok(())
    }

    /// Hands `f` to the scheduler. With a pooled backend it may run (and even
    /// finish) before this call returns.
    pub fn spawn(&self, f: &Future) -> Result<(), SchedError> {
        if f.0.policy != self.shared.id {
            return Err(SchedError::CrossPolicy {
                task: f.id(),
                dep: f.id(),
            });
        }
        if f
            .0
            .state
            .compare_exchange(
                TaskState::Created as u8,
                TaskState::Waiting as u8,
                Ordering::AcqRel,
                Ordering::Acquire,
            )
            .is_err()
        {
            return Err(SchedError::AlreadySpawned(f.id()));
        }
        self.shared.lock().outstanding += 1;
        if f.0.pending.fetch_sub(1, Ordering::AcqRel) == 1 {
            self.shared.enqueue(Arc::clone(&f.0));
        }
        Ok(())
    }

    /// Blocks until every spawned task has completed.
    ///
    /// Returns an error instead of hanging when the remaining tasks can never
    /// become ready; in debug mode the offending cycle is reported.
    pub fn wait(&self) -> Result<(), SchedError> {
        let result = match self.backend {
            Backend::Sequential => self.wait_inline(),
            Backend::Pooled(_) => self.wait_pooled(),
        };
        if result.is_ok() && self.shared.debug {
            self.shared
                .registry
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .retain(|n| n.state() != TaskState::Complete);
        }
        result
    }

    fn wait_inline(&self) -> Result<(), SchedError> {
        loop {
            let mut q = self.shared.lock();
            if let Some(err) = q.failure.take() {
                return Err(err);
            }
            match q.ready.pop_front() {
                Some(node) => {
                    q.executing += 1;
                    drop(q);
                    self.shared.execute(node);
                }
                None if q.outstanding == 0 => return Ok(()),
                None => {
                    let pending = q.outstanding;
                    drop(q);
                    return Err(self.shared.diagnose_stall(pending));
                }
            }
        }
    }

    fn wait_pooled(&self) -> Result<(), SchedError> {
        let mut q = self.shared.lock();
        loop {
            if let Some(err) = q.failure.take() {
                // Let in-flight work drain before reporting.
                while q.executing > 0 || !q.ready.is_empty() {
                    q = self.shared.progress.wait(q).unwrap_or_else(|e| e.into_inner());
                }
                return Err(err);
            }
            if q.outstanding == 0 {
                return Ok(());
            }
            if q.ready.is_empty() && q.executing == 0 {
                let pending = q.outstanding;
                drop(q);
                return Err(self.shared.diagnose_stall(pending));
            }
            q = self.shared.progress.wait(q).unwrap_or_else(|e| e.into_inner());
        }
    }
}

fn worker_loop(shared: &Shared) {
    loop {
        let mut q = shared.lock();
        let node = loop {
            if q.shutdown {
                return;
            }
            if let Some(node) = q.ready.pop_front() {
                break node;
            }
            q = shared
                .work_available
                .wait(q)
                .unwrap_or_else(|e| e.into_inner());
        };
        q.executing += 1;
        drop(q);
        shared.execute(node);
    }
}

impl Drop for TaskPolicy {
    fn drop(&mut self) {
        self.shared.lock().shutdown = true;
        self.shared.work_available.notify_all();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex as StdMutex;

    fn log_task(policy: &TaskPolicy, log: &Arc<StdMutex<Vec<usize>>>, tag: usize) -> Future {
        let log = Arc::clone(log);
        policy.create(move || log.lock().unwrap().push(tag))
    }

    #[test]
    fn created_task_is_not_runnable() {
        let p = TaskPolicy::sequential();
        let f = p.create(|| {});
        assert_eq!(f.state(), TaskState::Created);
        p.wait().unwrap();
        assert_eq!(f.state(), TaskState::Created);
    }

    #[test]
    fn many_futures_are_distinct() {
        let p = TaskPolicy::sequential();
        let mut ids: Vec<usize> = (0..100_000).map(|_| p.create(|| {}).id()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 100_000);
    }

    #[test]
    fn dependence_on_complete_task_is_noop() {
        let p = TaskPolicy::sequential();
        let x = p.create(|| {});
        p.spawn(&x).unwrap();
        p.wait().unwrap();
        let z = p.create(|| {});
        p.add_dependence(&z, &x).unwrap();
        p.spawn(&z).unwrap();
        assert_eq!(z.state(), TaskState::Ready);
        p.wait().unwrap();
        assert!(z.is_complete());
    }

    #[test]
    fn add_dependence_after_spawn_fails() {
        let p = TaskPolicy::sequential();
        let x = p.create(|| {});
        let z = p.create(|| {});
        p.spawn(&z).unwrap();
        assert_eq!(p.add_dependence(&z, &x), Err(SchedError::AlreadySpawned(z.id())));
        assert_eq!(p.spawn(&z), Err(SchedError::AlreadySpawned(z.id())));
        p.wait().unwrap();
    }

    #[test]
    fn cross_policy_dependence_fails() {
        let p = TaskPolicy::sequential();
        let q = TaskPolicy::sequential();
        let a = p.create(|| {});
        let b = q.create(|| {});
        assert!(matches!(p.add_dependence(&a, &b), Err(SchedError::CrossPolicy { .. })));
        assert!(matches!(q.spawn(&a), Err(SchedError::CrossPolicy { .. })));
    }

    #[test]
    fn diamond_runs_join_last() {
        for backend in [Backend::Sequential, Backend::Pooled(3)] {
            let p = TaskPolicy::new(backend).unwrap();
            let log = Arc::new(StdMutex::new(Vec::new()));
            let x = log_task(&p, &log, 1);
            let y = log_task(&p, &log, 2);
            let z = log_task(&p, &log, 3);
            p.add_dependence(&z, &x).unwrap();
            p.add_dependence(&z, &y).unwrap();
            p.spawn(&z).unwrap();
            assert_eq!(z.state(), TaskState::Waiting);
            p.spawn(&x).unwrap();
            p.spawn(&y).unwrap();
            p.wait().unwrap();
            let log = log.lock().unwrap();
            assert_eq!(log.len(), 3);
            assert_eq!(log[2], 3, "{backend}");
        }
    }

    #[test]
    fn reverse_spawned_chain_respects_edges() {
        let p = TaskPolicy::pooled(4).unwrap();
        let log = Arc::new(StdMutex::new(Vec::new()));
        let a = log_task(&p, &log, 0);
        let b = log_task(&p, &log, 1);
        let c = log_task(&p, &log, 2);
        p.add_dependence(&b, &a).unwrap();
        p.add_dependence(&c, &b).unwrap();
        p.spawn(&c).unwrap();
        p.spawn(&b).unwrap();
        p.spawn(&a).unwrap();
        p.wait().unwrap();
        assert_eq!(*log.lock().unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn wait_without_tasks_returns() {
        TaskPolicy::sequential().wait().unwrap();
        TaskPolicy::pooled(2).unwrap().wait().unwrap();
    }

    #[test]
    fn sequential_order_is_fifo() {
        let p = TaskPolicy::sequential();
        let log = Arc::new(StdMutex::new(Vec::new()));
        let root = log_task(&p, &log, 0);
        let kids: Vec<Future> = (1..5).map(|t| log_task(&p, &log, t)).collect();
        for k in &kids {
            p.add_dependence(k, &root).unwrap();
        }
        let free = log_task(&p, &log, 9);
        for k in &kids {
            p.spawn(k).unwrap();
        }
        p.spawn(&root).unwrap();
        p.spawn(&free).unwrap();
        p.wait().unwrap();
        assert_eq!(*log.lock().unwrap(), vec![0, 9, 1, 2, 3, 4]);
    }

    #[test]
    fn debug_mode_reports_two_cycle() {
        for backend in [Backend::Sequential, Backend::Pooled(2)] {
            let p = TaskPolicy::with_debug(backend).unwrap();
            let a = p.create(|| {});
            let b = p.create(|| {});
            p.add_dependence(&a, &b).unwrap();
            p.add_dependence(&b, &a).unwrap();
            p.spawn(&a).unwrap();
            p.spawn(&b).unwrap();
            match p.wait() {
                Err(SchedError::Cycle(mut ids)) => {
                    ids.sort_unstable();
                    assert_eq!(ids, vec![a.id(), b.id()]);
                }
                other => panic!("expected a cycle, got {other:?}"),
            }
        }
    }

    #[test]
    fn unspawned_dependence_is_a_stall() {
        let p = TaskPolicy::with_debug(Backend::Sequential).unwrap();
        let a = p.create(|| {});
        let b = p.create(|| {});
        p.add_dependence(&b, &a).unwrap();
        p.spawn(&b).unwrap();
        assert_eq!(p.wait(), Err(SchedError::Stalled { pending: 1 }));
    }

    #[test]
    fn self_dependence_is_rejected() {
        let p = TaskPolicy::sequential();
        let a = p.create(|| {});
        assert_eq!(p.add_dependence(&a, &a), Err(SchedError::SelfDependence(a.id())));
    }

    #[test]
    fn panicking_task_is_reported() {
        for backend in [Backend::Sequential, Backend::Pooled(2)] {
            let p = TaskPolicy::new(backend).unwrap();
            let a = p.create(|| panic!("boom"));
            p.spawn(&a).unwrap();
            assert_eq!(p.wait(), Err(SchedError::TaskPanicked(a.id())));
            assert!(a.is_complete());
        }
    }

    #[test]
    fn zero_workers_rejected() {
        assert_eq!(TaskPolicy::pooled(0).unwrap_err(), SchedError::NoWorkers);
    }
}
