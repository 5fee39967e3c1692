//! Pure scheduling primitives: patch sharding, instance assignment and FCFS
//! batch formation.

use std::collections::VecDeque;

use super::config::SchedulePolicy;

/// Splits `patches` into `width` shards whose sizes differ by at most one.
/// Larger shards come first; shards may be empty.
pub fn irp_shard(patches: u64, width: usize) -> Vec<u64> {
    assert!(width >= 1, "IRP width must be >= 1");
    let w = width as u64;
    let (base, extra) = (patches / w, patches % w);
    (0..w).map(|i| base + u64::from(i < extra)).collect()
}

/// A candidate instance as seen by the assignment policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub id: usize,
    /// Queued work in the stage's unit (patches, tokens or sequences).
    pub load: f64,
    pub queued_jobs: usize,
}

/// Picks an instance for a new job. `cursor` is the stage's round-robin
/// position and is advanced on every call.
pub fn assign_instance(candidates: &[Candidate], policy: SchedulePolicy, cursor: &mut usize) -> usize {
    assert!(!candidates.is_empty(), "no instance to assign to");
    match policy {
        SchedulePolicy::RoundRobinAssign => {
            let c = candidates[*cursor % candidates.len()];
            *cursor = cursor.wrapping_add(1);
            c.id
        }
        SchedulePolicy::LeastLoadedAssign => {
            candidates
                .iter()
                .min_by(|a, b| a.load.total_cmp(&b.load).then(a.id.cmp(&b.id)))
                .expect("non-empty")
                .id
        }
        SchedulePolicy::Fcfs => {
            candidates
                .iter()
                .min_by(|a, b| a.queued_jobs.cmp(&b.queued_jobs).then(a.id.cmp(&b.id)))
                .expect("non-empty")
                .id
        }
    }
}

/// Number of jobs from the head of `queue` that form the next batch: at most
/// `max_batch`, in order, stopping at the first job `fits` rejects. Later jobs
/// are never pulled ahead of a job that does not fit.
pub fn form_batch<T>(queue: &VecDeque<T>, max_batch: usize, mut fits: impl FnMut(&T) -> bool) -> usize {
    queue
        .iter()
        .take(max_batch)
        .take_while(|job| fits(job))
        .count()
}
