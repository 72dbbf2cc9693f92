//! Static longest-processing-time scheduling over scoped worker threads.

/// Assign units to `workers` by LPT: units in descending cost order (ties
/// by index) each go to the currently least-loaded worker (ties by worker
/// id). Returns each worker's unit list in assignment order.
pub fn lpt_assign(costs: &[u64], workers: usize) -> Vec<Vec<usize>> {
    let workers = workers.max(1);
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| costs[b].cmp(&costs[a]).then(a.cmp(&b)));
    let mut load = vec![0u64; workers];
    let mut assigned = vec![Vec::new(); workers];
    for u in order {
        let w = (0..workers).min_by_key(|&w| (load[w], w)).unwrap();
        load[w] += costs[u];
        assigned[w].push(u);
    }
    assigned
}

/// Largest per-worker load of an assignment.
pub fn makespan(costs: &[u64], assigned: &[Vec<usize>]) -> u64 {
    assigned
        .iter()
        .map(|units| units.iter().map(|&u| costs[u]).sum())
        .max()
        .unwrap_or(0)
}

/// Run `job` for every unit on `workers` threads with an LPT assignment and
/// return the results in unit order.
pub fn run_lpt<T, F>(costs: &[u64], workers: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let n = costs.len();
    if workers <= 1 || n <= 1 {
        return (0..n).map(job).collect();
    }
    let assigned = lpt_assign(costs, workers);
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = assigned
            .iter()
            .filter(|units| !units.is_empty())
            .map(|units| {
                let job = &job;
                scope.spawn(move || units.iter().map(|&u| (u, job(u))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (u, out) in h.join().expect("worker panicked") {
                slots[u] = Some(out);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("unit not executed")).collect()
}
