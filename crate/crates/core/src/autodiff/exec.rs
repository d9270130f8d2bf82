use std::cell::Cell;

/// How kernels schedule their work.
///
/// Both modes use the same work decomposition and reduction order, so they
/// produce identical bits; `Serial` additionally guarantees that nothing is
/// handed to the thread pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[default]
    Parallel,
    Serial,
}

thread_local! {
    static MODE: Cell<ExecMode> = const { Cell::new(ExecMode::Parallel) };
}

/// Execution mode of the calling thread.
pub fn exec_mode() -> ExecMode {
    MODE.with(|m| m.get())
}

pub fn set_exec_mode(mode: ExecMode) {
    MODE.with(|m| m.set(mode));
}

/// Runs `f` with `mode` active on this thread, restoring the previous mode.
pub fn with_exec_mode<R>(mode: ExecMode, f: impl FnOnce() -> R) -> R {
    let prev = exec_mode();
    set_exec_mode(mode);
    let out = f();
    set_exec_mode(prev);
    out
}

pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], size: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    use rayon::prelude::*;
    match exec_mode() {
        ExecMode::Parallel => data
            .par_chunks_mut(size)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
        ExecMode::Serial => data.chunks_mut(size).enumerate().for_each(|(i, c)| f(i, c)),
    }
}
