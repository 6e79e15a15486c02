//! Per-task iteration schedules. Both anneal linearly over the task's total
//! iteration count and are re-initialized when a new task starts.

/// Learning rate at iteration `u` of `total`: `lr0 * (1 - u/total)`,
/// reaching exactly 0 at `u = total`. Iterations past the end stay at 0.
pub fn lr_schedule(u: usize, total: usize, lr0: f32) -> f32 {
    assert!(total >= 1, "schedule needs at least one iteration");
    let frac = (u.min(total) as f64) / total as f64;
    (lr0 as f64 * (1.0 - frac)) as f32
}

/// Relaxation temperature at iteration `u` of `total`:
/// `tau0 + (tau_end - tau0) * u/total`, clamped to never undershoot
/// `tau_end`.
pub fn tau_schedule(u: usize, total: usize, tau0: f32, tau_end: f32) -> f32 {
    assert!(total >= 1, "schedule needs at least one iteration");
    let frac = (u.min(total) as f64) / total as f64;
    let tau = tau0 as f64 + (tau_end as f64 - tau0 as f64) * frac;
    tau.max(tau_end as f64) as f32
}
