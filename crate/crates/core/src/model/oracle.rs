//! Task-level ground truth: explicit FIFO queues of replicas with
//! cancellation. Slow, but it follows the verbal system description
//! directly and shares no code with the workload recursion.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{Departure, SlotInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub job: u64,
    pub remaining: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub arrival_slot: u64,
    pub servers: Vec<usize>,
    pub departure: Option<Departure>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleState {
    queues: Vec<VecDeque<TaskRecord>>,
    jobs: BTreeMap<u64, JobRecord>,
    next_job: u64,
    slot: u64,
}

impl OracleState {
    pub fn empty(k: usize) -> Self {
        Self {
            queues: vec![VecDeque::new(); k],
            jobs: BTreeMap::new(),
            next_job: 0,
            slot: 0,
        }
    }

    pub fn k(&self) -> usize {
        self.queues.len()
    }

    pub fn slot(&self) -> u64 {
        self.slot
    }

    pub fn queue(&self, i: usize) -> &VecDeque<TaskRecord> {
        &self.queues[i]
    }

    pub fn jobs(&self) -> &BTreeMap<u64, JobRecord> {
        &self.jobs
    }

    pub fn job(&self, id: u64) -> Option<&JobRecord> {
        self.jobs.get(&id)
    }

    /// Drops departed jobs from the registry; long validation runs call this
    /// to bound memory.
    pub fn forget_departed(&mut self) {
        self.jobs.retain(|_, j| j.departure.is_none());
    }

    /// Opens the next slot and enqueues the arriving job's replicas, if any.
    /// Returns the new job id.
    pub fn begin_slot(&mut self, input: &SlotInput) -> Option<u64> {
        self.slot += 1;
        let arrival = input.arrival()?;
        let id = self.next_job;
        self.next_job += 1;
        for &j in arrival.routing.servers() {
            self.queues[j].push_back(TaskRecord {
                job: id,
                remaining: arrival.services[j],
            });
        }
        self.jobs.insert(
            id,
            JobRecord {
                arrival_slot: self.slot,
                servers: arrival.routing.servers().to_vec(),
                departure: None,
            },
        );
        Some(id)
    }

    /// Every busy server completes one unit of its head task; finished jobs
    /// depart and their sibling replicas are removed everywhere.
    pub fn serve(&mut self) -> Vec<u64> {
        for q in &mut self.queues {
            if let Some(head) = q.front_mut() {
                head.remaining -= 1;
            }
        }
        let done = resolve_completions(&mut self.queues);
        for &(job, server) in &done {
            if let Some(rec) = self.jobs.get_mut(&job) {
                rec.departure = Some(Departure {
                    slot: self.slot,
                    server,
                });
            }
        }
        done.into_iter().map(|(job, _)| job).collect()
    }

    /// One full slot: arrival, one unit of service, completion and
    /// cancellation. Returns the successor and the jobs that departed.
    pub fn step(&self, input: &SlotInput) -> (OracleState, Vec<u64>) {
        let mut next = self.clone();
        next.begin_slot(input);
        let departed = next.serve();
        (next, departed)
    }

    /// Slots until each queue empties if nothing else arrives, with
    /// cancellations taken into account.
    pub fn drain_times(&self) -> Vec<u64> {
        let mut queues = self.queues.clone();
        let mut drain = vec![0u64; queues.len()];
        let mut pending: Vec<bool> = queues.iter().map(|q| !q.is_empty()).collect();
        let mut elapsed = 0u64;
        // No head can finish before the smallest remaining head, so jump.
        while let Some(jump) = queues.iter().filter_map(|q| q.front()).map(|t| t.remaining).min() {
            elapsed += jump;
            for q in &mut queues {
                if let Some(head) = q.front_mut() {
                    head.remaining -= jump;
                }
            }
            resolve_completions(&mut queues);
            for (i, q) in queues.iter().enumerate() {
                if pending[i] && q.is_empty() {
                    drain[i] = elapsed;
                    pending[i] = false;
                }
            }
        }
        drain
    }
}

/// Scans servers in index order; a head task with no remaining work
/// completes its job (so ties go to the smallest index) and every sibling
/// replica is dropped.
fn resolve_completions(queues: &mut [VecDeque<TaskRecord>]) -> Vec<(u64, usize)> {
    let mut done = Vec::new();
    for i in 0..queues.len() {
        let finished = match queues[i].front() {
            Some(head) if head.remaining == 0 => head.job,
            _ => continue,
        };
        for q in queues.iter_mut() {
            q.retain(|t| t.job != finished);
        }
        done.push((finished, i));
    }
    done
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RoutingDraw;

    fn arrive(k: usize, servers: &[usize], b: Vec<u64>) -> SlotInput {
        SlotInput::with_arrival(RoutingDraw::new(servers.to_vec(), k).unwrap(), b)
    }

    #[test]
    fn single_slot_completion_cancels_sibling() {
        let o = OracleState::empty(2);
        let (o, dep) = o.step(&arrive(2, &[0, 1], vec![1, 9]));
        assert_eq!(dep, vec![0]);
        assert!(o.queue(0).is_empty() && o.queue(1).is_empty());
        assert_eq!(o.job(0).unwrap().departure, Some(Departure { slot: 1, server: 0 }));
    }

    #[test]
    fn idle_slot_changes_nothing_but_the_clock() {
        let o = OracleState::empty(3);
        let (next, dep) = o.step(&SlotInput::idle());
        assert!(dep.is_empty());
        assert_eq!(next.drain_times(), vec![0, 0, 0]);
        assert_eq!(next.jobs().len(), 0);
    }

    #[test]
    fn stacked_jobs_depart_in_order() {
        let o = OracleState::empty(2);
        let (o, d1) = o.step(&arrive(2, &[0, 1], vec![2, 2]));
        assert!(d1.is_empty());
        let (o, d2) = o.step(&arrive(2, &[0, 1], vec![1, 5]));
        assert_eq!(d2, vec![0]);
        let (o, d3) = o.step(&SlotInput::idle());
        assert_eq!(d3, vec![1]);
        assert_eq!(o.job(0).unwrap().departure.unwrap().slot, 2);
        assert_eq!(o.job(1).unwrap().departure.unwrap().slot, 3);
        // job 0 tied on both servers; the smaller index completes it
        assert_eq!(o.job(0).unwrap().departure.unwrap().server, 0);
    }

    #[test]
    fn drain_times_before_service() {
        let mut o = OracleState::empty(2);
        o.begin_slot(&arrive(2, &[0, 1], vec![5, 2]));
        assert_eq!(o.drain_times(), vec![2, 2]);
        o.serve();
        assert_eq!(o.drain_times(), vec![1, 1]);
    }

    #[test]
    fn drain_times_of_empty_oracle() {
        assert_eq!(OracleState::empty(4).drain_times(), vec![0; 4]);
    }

    #[test]
    fn unrouted_server_stays_empty() {
        let o = OracleState::empty(3);
        let (o, _) = o.step(&arrive(3, &[0, 2], vec![4, 1, 6]));
        assert_eq!(o.drain_times(), vec![3, 0, 3]);
    }
}
