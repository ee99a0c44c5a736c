//! Federated workers: every site lists claimable batches, claims them with a
//! compare-and-set on the repository, runs them locally and reports back.
//! In the controller variant the same messages pass through a controller
//! site, which must be up for any claim or report to get through.

use std::collections::BTreeSet;

use super::sim::{BatchState, Eng, Ev, JobKind, RepoMsg, Sim};
use super::Mode;
use crate::metadata_repo::{BatchTag, RepoError};
use crate::provenance::Record;
use crate::simnet::SimError;
use crate::types::{SiteId, TaskState};

#[derive(Debug, Clone)]
pub(super) struct Worker {
    pub slots: u32,
    /// Replies still in flight.
    pub pending: u32,
    /// Local jobs holding (or believed to hold) a claim.
    pub active: BTreeSet<String>,
}

impl Worker {
    pub fn new(slots: u32) -> Self {
        Worker {
            slots,
            pending: 0,
            active: BTreeSet::new(),
        }
    }

    fn free(&self) -> u32 {
        self.slots.saturating_sub(self.active.len() as u32)
    }
}

impl Sim {
    /// One-way delay between a worker and the repository.
    fn repo_latency(&self, site: &SiteId) -> f64 {
        let topo = self.store.topology();
        let repo = self.cfg.repo_site();
        if self.mode == Mode::FederatedController {
            let ctl = self.cfg.controller_site();
            topo.latency(site, ctl) + topo.latency(ctl, repo)
        } else {
            topo.latency(site, repo)
        }
    }

    fn repo_reachable(&self) -> bool {
        self.is_up(self.cfg.repo_site())
            && (self.mode != Mode::FederatedController || self.is_up(self.cfg.controller_site()))
    }

    fn send(&self, engine: &mut Eng, site: &SiteId, msg: RepoMsg) -> Result<(), SimError> {
        engine.after(self.repo_latency(site), Ev::Repo(msg))?;
        Ok(())
    }

    /// Restarts the poll loop if it went quiet.
    pub(super) fn wake_workers(&mut self, engine: &mut Eng) -> Result<(), SimError> {
        if self.mode.is_federated() && !self.tick_active && self.phase == super::sim::Phase::Maps {
            self.tick_active = true;
            engine.schedule(engine.now(), Ev::Tick)?;
        }
        Ok(())
    }

    fn release_claim(&mut self, engine: &mut Eng, site: &SiteId, job: &str) -> Result<(), SimError> {
        if let Some(w) = self.workers.get_mut(site) {
            w.active.remove(job);
        }
        self.wake_workers(engine)
    }

    /// Global poll: every idle worker with a free slot asks for work, in site
    /// order. Stops while no live worker has room.
    pub(super) fn tick(&mut self, engine: &mut Eng) -> Result<(), SimError> {
        if self.phase != super::sim::Phase::Maps || !self.mode.is_federated() {
            self.tick_active = false;
            return Ok(());
        }
        let mut hungry = false;
        let sites: Vec<SiteId> = self.workers.keys().cloned().collect();
        for site in sites {
            if !self.is_up(&site) {
                continue;
            }
            let w = &self.workers[&site];
            hungry |= w.free() > 0;
            if w.pending == 0 && w.free() > 0 {
                self.workers.get_mut(&site).unwrap().pending = 1;
                self.send(engine, &site, RepoMsg::ListArrive { site: site.clone() })?;
            }
        }
        if hungry {
            engine.after(self.cfg.poll_interval_s, Ev::Tick)?;
        } else {
            self.tick_active = false;
        }
        Ok(())
    }

    pub(super) fn repo_message(&mut self, engine: &mut Eng, msg: RepoMsg) -> Result<(), SimError> {
        match msg {
            RepoMsg::ListArrive { site } => {
                let candidates = self.repo_reachable().then(|| self.repo.list(Some(BatchTag::Unprocessed)));
                self.send(engine, &site.clone(), RepoMsg::ListReply { site, candidates })
            }
            RepoMsg::ListReply { site, candidates } => {
                let up = self.is_up(&site);
                let w = self.workers.get_mut(&site).expect("worker exists");
                w.pending = 0;
                let (Some(mut candidates), true) = (candidates, up) else {
                    return Ok(());
                };
                // local data first, then batch order
                candidates.sort_by(|a, b| {
                    (a.input.home_site != site, &a.batch_id).cmp(&(b.input.home_site != site, &b.batch_id))
                });
                let picks: Vec<_> = candidates.into_iter().take(w.free() as usize).collect();
                w.pending = picks.len() as u32;
                for rec in picks {
                    let msg = RepoMsg::ClaimArrive {
                        site: site.clone(),
                        batch: rec.batch_id,
                        version: rec.version,
                    };
                    self.send(engine, &site, msg)?;
                }
                Ok(())
            }
            RepoMsg::ClaimArrive { site, batch, version } => {
                let granted = if self.repo_reachable() {
                    match self.repo.claim(&batch, &site, version, self.cfg.lease(), engine.now()) {
                        Ok(rec) => {
                            let expiry = rec.lease_expiry.expect("claimed record has a lease");
                            engine.record(Record::Claim {
                                batch: batch.clone(),
                                site: site.clone(),
                                version: rec.version,
                                attempts: rec.attempts,
                                lease_expiry: expiry,
                            });
                            engine.schedule(expiry, Ev::LeaseCheck)?;
                            Some(rec)
                        }
                        Err(RepoError::Conflict(cur)) => {
                            engine.record(Record::ClaimConflict {
                                batch,
                                site: site.clone(),
                                expected_version: version,
                                current_version: cur.version,
                            });
                            None
                        }
                        Err(e) => return Err(SimError::World(e.to_string())),
                    }
                } else {
                    None
                };
                self.send(engine, &site.clone(), RepoMsg::ClaimReply { site, granted })
            }
            RepoMsg::ClaimReply { site, granted } => {
                let w = self.workers.get_mut(&site).expect("worker exists");
                w.pending = w.pending.saturating_sub(1);
                let Some(rec) = granted else { return Ok(()) };
                if !self.is_up(&site) {
                    // the claim is held by a dead worker until its lease runs out
                    return Ok(());
                }
                let i = self
                    .batches
                    .iter()
                    .position(|b| b.id == rec.batch_id)
                    .expect("claimed batch exists");
                self.batches[i].attempts = rec.attempts;
                let id = format!("{}.{}.a{}", rec.batch_id, site, rec.attempts);
                self.workers.get_mut(&site).unwrap().active.insert(id.clone());
                let backend = self.site_backend[&site];
                let spec = self.map_spec(i, id);
                self.submit_job(engine, spec, backend, JobKind::Map { batch: i }, Some(i))
            }
            RepoMsg::ReportArrive { site, job, tag, output } => {
                let batch = self.batch_of_job(&job);
                let accepted = if self.repo_reachable() {
                    let renew = (tag == BatchTag::Processing).then(|| self.cfg.lease());
                    let out_id = output.as_ref().map(|o| o.object_id.clone());
                    match self.repo.report(&batch, &site, tag, out_id.clone(), renew, engine.now()) {
                        Ok(rec) => {
                            engine.record(Record::Report {
                                batch: batch.clone(),
                                site: site.clone(),
                                tag,
                                version: rec.version,
                                lease_expiry: rec.lease_expiry,
                                output: out_id,
                            });
                            if let Some(expiry) = rec.lease_expiry {
                                engine.schedule(expiry, Ev::LeaseCheck)?;
                            }
                            let i = self.batch_index(&batch);
                            match tag {
                                BatchTag::Succeeded => {
                                    self.batches[i].state = BatchState::Done(output.expect("success carries output"))
                                }
                                BatchTag::Failed => self.batches[i].state = BatchState::Failed,
                                _ => {}
                            }
                            Some(true)
                        }
                        Err(e) => {
                            engine.record(Record::ReportRejected {
                                batch,
                                site: site.clone(),
                                tag,
                                reason: e.to_string(),
                            });
                            Some(false)
                        }
                    }
                } else {
                    None
                };
                let reply = RepoMsg::ReportReply {
                    site: site.clone(),
                    job,
                    tag,
                    accepted,
                };
                self.send(engine, &site, reply)
            }
            RepoMsg::ReportReply { site, job, tag, accepted } => {
                if tag == BatchTag::Processing {
                    if accepted == Some(false) {
                        // fenced: someone else owns the batch now
                        self.cancel(engine, &job)?;
                        self.release_claim(engine, &site, &job)?;
                    }
                    Ok(())
                } else {
                    self.release_claim(engine, &site, &job)
                }
            }
        }
    }

    fn batch_index(&self, batch: &str) -> usize {
        self.batches.iter().position(|b| b.id == batch).expect("known batch")
    }

    fn batch_of_job(&self, job: &str) -> String {
        match self.jobs[job].kind {
            JobKind::Map { batch } => self.batches[batch].id.clone(),
            _ => unreachable!("federated reports only concern map jobs"),
        }
    }

    /// Called when a claimed batch's job enters RUNNING.
    pub(super) fn report_running(&mut self, engine: &mut Eng, job: &str) -> Result<(), SimError> {
        let site = self.jobs[job].site.clone();
        let msg = RepoMsg::ReportArrive {
            site: site.clone(),
            job: job.to_string(),
            tag: BatchTag::Processing,
            output: None,
        };
        self.send(engine, &site, msg)
    }

    pub(super) fn federated_job_ended(&mut self, engine: &mut Eng, job: &str, _batch: usize) -> Result<(), SimError> {
        let j = &self.jobs[job];
        let site = j.site.clone();
        let tag = match j.state {
            TaskState::Complete => BatchTag::Succeeded,
            TaskState::ExecutorError => BatchTag::Failed,
            _ => {
                // lost work is recovered through lease expiry
                return self.release_claim(engine, &site, job);
            }
        };
        let msg = RepoMsg::ReportArrive {
            site: site.clone(),
            job: job.to_string(),
            tag,
            output: j.output.clone(),
        };
        self.send(engine, &site, msg)
    }

    pub(super) fn lease_check(&mut self, engine: &mut Eng) -> Result<(), SimError> {
        for e in self.repo.expire_leases(engine.now()) {
            engine.record(Record::LeaseExpired {
                batch: e.batch_id.clone(),
                tag: e.tag,
                version: e.version,
            });
            if e.tag == BatchTag::Failed {
                let i = self.batch_index(&e.batch_id);
                self.batches[i].state = BatchState::Failed;
            }
        }
        Ok(())
    }
}
