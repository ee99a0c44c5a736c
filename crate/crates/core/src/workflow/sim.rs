//! The simulated fabric: jobs move through backends, stage data through the
//! object store and report back to whichever driver owns them.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::federated::Worker;
use super::report::{RunReport, RunStatus};
use super::tes_driver::GatewayDriver;
use super::{batch_id, map_output_key, scatter, Mode, RunError};
use crate::executors::Backend;
use crate::metadata_repo::{BatchRecord, BatchTag, MetadataRepo};
use crate::provenance::{EventLog, PoolInfo, Record};
use crate::scenario::ScenarioConfig;
use crate::simnet::{Engine, Event, EventKind, SimError, SimPayload, SiteSignal, World};
use crate::storage::{digest, manifest_json, Fetch, ManifestEntry, ObjectStore, StorageError, TransferPurpose};
use crate::tes_layer::RoutingDecision;
use crate::types::{
    advance_state, Command, DataRef, LifecycleEvent, ResourceRequest, SiteId, TaskSpec, TaskState, TaskValidator,
};

#[derive(Debug, Clone, PartialEq)]
pub(super) enum Ev {
    Site(SiteSignal),
    Kickoff,
    StageDone { job: String, epoch: u64 },
    RunDone { job: String, epoch: u64 },
    OutputStored { job: String, epoch: u64 },
    Tick,
    Repo(RepoMsg),
    LeaseCheck,
    Heartbeat,
    DriverPoll,
}

/// Messages between federated workers and the metadata repository. `None`
/// payloads in replies mean the repository could not be reached.
#[derive(Debug, Clone, PartialEq)]
pub(super) enum RepoMsg {
    ListArrive { site: SiteId },
    ListReply { site: SiteId, candidates: Option<Vec<BatchRecord>> },
    ClaimArrive { site: SiteId, batch: String, version: u64 },
    ClaimReply { site: SiteId, granted: Option<BatchRecord> },
    ReportArrive { site: SiteId, job: String, tag: BatchTag, output: Option<DataRef> },
    ReportReply { site: SiteId, job: String, tag: BatchTag, accepted: Option<bool> },
}

impl From<SiteSignal> for Ev {
    fn from(s: SiteSignal) -> Self {
        Ev::Site(s)
    }
}

impl SimPayload for Ev {
    fn kind(&self) -> EventKind {
        match self {
            Ev::Site(SiteSignal::Down(_)) => EventKind::SiteDown,
            Ev::Site(SiteSignal::Up(_)) => EventKind::SiteUp,
            Ev::Site(SiteSignal::Preempt(_)) => EventKind::Preempt,
            Ev::Kickoff => EventKind::Submit,
            Ev::StageDone { .. } => EventKind::StageDone,
            Ev::RunDone { .. } => EventKind::TaskDone,
            Ev::OutputStored { .. } => EventKind::TransferDone,
            Ev::Tick | Ev::DriverPoll => EventKind::Poll,
            Ev::Repo(_) => EventKind::RepoRequest,
            Ev::LeaseCheck => EventKind::LeaseExpired,
            Ev::Heartbeat => EventKind::Heartbeat,
        }
    }
}

pub(super) type Eng = Engine<Ev>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum JobKind {
    Map { batch: usize },
    Gather,
    /// Created by a TES node; the gateway driver tracks what it is for.
    Tes,
}

#[derive(Debug, Clone)]
pub(super) struct Job {
    pub id: String,
    pub spec: TaskSpec,
    pub backend: usize,
    pub kind: JobKind,
    pub state: TaskState,
    pub epoch: u64,
    pub pool: String,
    pub site: SiteId,
    pub mount_site: Option<SiteId>,
    pub waiting_data: bool,
    pub output: Option<DataRef>,
}

#[derive(Debug, Clone, PartialEq)]
pub(super) enum BatchState {
    Pending,
    Done(DataRef),
    Failed,
}

#[derive(Debug, Clone)]
pub(super) struct Batch {
    pub id: String,
    pub input: DataRef,
    pub attempts: u32,
    pub state: BatchState,
    /// Backend a statically assigned batch runs on.
    pub backend: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Phase {
    Maps,
    Gather,
    Finished,
}

pub(super) struct Sim {
    pub cfg: ScenarioConfig,
    pub mode: Mode,
    pub store: ObjectStore,
    pub backends: Vec<Backend>,
    pub site_backend: BTreeMap<SiteId, usize>,
    pub down: BTreeSet<SiteId>,
    pub jobs: BTreeMap<String, Job>,
    pub validator: TaskValidator,
    pub batches: Vec<Batch>,
    pub rng: ChaCha8Rng,
    pub phase: Phase,
    pub gather_attempts: u32,
    pub gather_output: Option<DataRef>,
    pub gather_failed: bool,
    pub finished_at: Option<f64>,
    pub retries: u64,
    pub per_site: BTreeMap<SiteId, u64>,
    pub repo: MetadataRepo,
    pub workers: BTreeMap<SiteId, Worker>,
    pub tick_active: bool,
    pub gw: Option<GatewayDriver>,
    pub decisions: Vec<RoutingDecision>,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub log: EventLog,
    pub decisions: Vec<RoutingDecision>,
}

/// Executes a resolved scenario to completion.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutcome, RunError> {
    let cfg = cfg.clone().resolve()?;
    let mut engine: Eng = Engine::new(cfg.max_events);
    let mut sim = Sim::new(cfg)?;
    engine.schedule(0.0, Ev::Kickoff)?;
    for (site, o) in sim.cfg.outages() {
        engine.inject_failure(&site, o.down_at, o.up_at)?;
    }
    for (site, at) in sim.cfg.preemptions() {
        engine.inject_preemption(&site, at)?;
    }
    let driven = match sim.cfg.horizon_s {
        Some(h) => engine.run_until(&mut sim, h).map(|_| engine.clear()),
        None => loop {
            match engine.step(&mut sim) {
                Ok(true) => {}
                Ok(false) => break Ok(()),
                Err(e) => break Err(e),
            }
        },
    };
    if let Err(error) = driven {
        return Err(RunError::Aborted {
            error,
            log: Box::new(engine.take_log()),
        });
    }
    let report = sim.finish_report(&mut engine);
    Ok(RunOutcome {
        report,
        log: engine.take_log(),
        decisions: sim.decisions,
    })
}

impl World<Ev> for Sim {
    fn handle(&mut self, event: Event<Ev>, engine: &mut Eng) -> Result<(), SimError> {
        match event.payload {
            Ev::Kickoff => self.kickoff(engine)?,
            Ev::Site(SiteSignal::Down(site)) => self.site_down(engine, &site)?,
            Ev::Site(SiteSignal::Up(site)) => self.site_up(engine, &site)?,
            Ev::Site(SiteSignal::Preempt(site)) => self.preempt(engine, &site)?,
            Ev::StageDone { job, epoch } => self.stage_done(engine, &job, epoch)?,
            Ev::RunDone { job, epoch } => self.run_done(engine, &job, epoch)?,
            Ev::OutputStored { job, epoch } => {
                if self.current(&job, epoch, TaskState::Running) {
                    self.complete(engine, &job)?;
                }
            }
            Ev::Tick => self.tick(engine)?,
            Ev::Repo(msg) => self.repo_message(engine, msg)?,
            Ev::LeaseCheck => self.lease_check(engine)?,
            Ev::Heartbeat => self.heartbeat(engine)?,
            Ev::DriverPoll => self.driver_poll(engine)?,
        }
        self.pump(engine)?;
        self.check_progress(engine)?;
        self.pump(engine)
    }
}

fn storage_err(e: StorageError) -> SimError {
    match e {
        StorageError::Sim(s) => s,
        other => SimError::World(other.to_string()),
    }
}

impl Sim {
    fn new(cfg: ScenarioConfig) -> Result<Self, RunError> {
        let topology = cfg.topology();
        let mut store = ObjectStore::new(topology.clone());
        let backends: Vec<Backend> = cfg
            .backends
            .iter()
            .map(|d| Backend::from_descriptor(d).map_err(|e| SimError::World(e.to_string())))
            .collect::<Result<_, _>>()?;
        let mut site_backend = BTreeMap::new();
        if !matches!(cfg.mode(), Mode::Overlay | Mode::Overflow) {
            for (i, b) in backends.iter().enumerate() {
                site_backend.insert(b.partitions()[0].spec.site.clone(), i);
            }
        }

        let w = &cfg.workflow;
        let inputs = scatter(&w.dataset, w.batch_count, w.batch_size_bytes, &w.input_sites);
        let mut batches = Vec::with_capacity(inputs.len());
        for (i, input) in inputs.into_iter().enumerate() {
            let key = super::batch_key(&w.dataset, i as u32);
            let stored = store
                .put_synthetic(&input.home_site, &key, w.batch_size_bytes, 0.0)
                .map_err(storage_err)?;
            debug_assert_eq!(stored, input);
            batches.push(Batch {
                id: batch_id(i as u32),
                input,
                attempts: 0,
                state: BatchState::Pending,
                backend: 0,
            });
        }
        if cfg.mode() == Mode::Manual {
            let shares = largest_remainder(
                batches.len() as u64,
                &backends.iter().map(|b| b.partitions()[0].spec.slots as u64).collect::<Vec<_>>(),
            );
            let mut next = 0;
            for (b, n) in shares.into_iter().enumerate() {
                for _ in 0..n {
                    batches[next].backend = b;
                    next += 1;
                }
            }
        }

        let workers = if cfg.mode().is_federated() {
            site_backend
                .iter()
                .map(|(s, &b)| (s.clone(), Worker::new(backends[b].partitions()[0].spec.slots)))
                .collect()
        } else {
            BTreeMap::new()
        };
        let gw = (cfg.mode() == Mode::Gateway).then(|| GatewayDriver::new(&cfg, &site_backend));
        Ok(Sim {
            validator: TaskValidator::new(cfg.sites.iter().map(|s| s.id.clone())),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            repo: MetadataRepo::new(cfg.max_retries),
            mode: cfg.mode(),
            cfg,
            store,
            backends,
            site_backend,
            down: BTreeSet::new(),
            jobs: BTreeMap::new(),
            batches,
            phase: Phase::Maps,
            gather_attempts: 0,
            gather_output: None,
            gather_failed: false,
            finished_at: None,
            retries: 0,
            per_site: BTreeMap::new(),
            workers,
            tick_active: false,
            gw,
            decisions: Vec::new(),
        })
    }

    fn kickoff(&mut self, engine: &mut Eng) -> Result<(), SimError> {
        let pools = self
            .backends
            .iter()
            .flat_map(|b| {
                b.partitions().iter().map(|p| PoolInfo {
                    pool: b.pool_name(&p.spec.name),
                    site: p.spec.site.clone(),
                    slots: p.spec.slots,
                })
            })
            .collect();
        engine.record(Record::RunStart {
            mode: self.mode.as_str().to_string(),
            seed: self.cfg.seed,
            pools,
            max_retries: self.cfg.max_retries,
        });
        match self.mode {
            Mode::Federated | Mode::FederatedController => {
                for b in &self.batches {
                    let rec = self
                        .repo
                        .register_batch(&b.id, b.input.clone())
                        .map_err(|e| SimError::World(e.to_string()))?;
                    engine.record(Record::Register {
                        batch: rec.batch_id,
                        version: rec.version,
                    });
                }
                self.tick_active = true;
                self.tick(engine)
            }
            Mode::Gateway => self.gateway_start(engine),
            Mode::Manual | Mode::Overlay | Mode::Overflow => {
                for i in 0..self.batches.len() {
                    self.submit_map(engine, i)?;
                }
                Ok(())
            }
        }
    }

    pub(super) fn up_fn(&self) -> impl Fn(&SiteId) -> bool {
        let down = self.down.clone();
        move |s: &SiteId| !down.contains(s)
    }

    pub(super) fn is_up(&self, site: &SiteId) -> bool {
        !self.down.contains(site)
    }

    /// Task description of the map step for batch `i`.
    pub(super) fn map_spec(&self, i: usize, id: String) -> TaskSpec {
        let w = &self.cfg.workflow;
        let b = &self.batches[i];
        let o = w.override_for(&b.id);
        TaskSpec {
            id,
            command: Command {
                duration_s: w.map_duration_s,
                output_key: map_output_key(&b.input),
                output_size_bytes: w.output_size(),
            },
            inputs: vec![b.input.clone()],
            outputs: vec!["output".into()],
            resources: ResourceRequest {
                cpu_cores: o.and_then(|o| o.cpu_cores).unwrap_or(1),
                ..ResourceRequest::default()
            },
            node_count: o.and_then(|o| o.node_count).unwrap_or(1),
            executor_count: o.and_then(|o| o.executor_count).unwrap_or(1),
            partition_hint: if self.mode == Mode::Overlay {
                o.and_then(|o| o.partition.clone())
            } else {
                None
            },
        }
    }

    /// Map outputs in manifest order.
    pub(super) fn map_outputs(&self) -> Vec<DataRef> {
        let mut outs: Vec<DataRef> = self
            .batches
            .iter()
            .filter_map(|b| match &b.state {
                BatchState::Done(o) => Some(o.clone()),
                _ => None,
            })
            .collect();
        outs.sort_by(|a, b| a.object_id.cmp(&b.object_id));
        outs
    }

    pub(super) fn gather_spec(&self, id: String) -> TaskSpec {
        let w = &self.cfg.workflow;
        let inputs = self.map_outputs();
        let manifest: Vec<ManifestEntry> = inputs
            .iter()
            .map(|d| ManifestEntry {
                object_id: d.object_id.clone(),
                size_bytes: d.size_bytes,
            })
            .collect();
        TaskSpec {
            id,
            command: Command {
                duration_s: w.gather_duration_s,
                output_key: format!("gather/{}", digest(manifest_json(&manifest).as_bytes())),
                output_size_bytes: w.output_size(),
            },
            inputs,
            outputs: vec!["gathered".into()],
            resources: ResourceRequest::default(),
            node_count: 1,
            executor_count: 1,
            partition_hint: None,
        }
    }

    fn submit_map(&mut self, engine: &mut Eng, i: usize) -> Result<(), SimError> {
        self.batches[i].attempts += 1;
        let id = format!("{}.a{}", self.batches[i].id, self.batches[i].attempts);
        let spec = self.map_spec(i, id);
        let backend = self.batches[i].backend;
        self.submit_job(engine, spec, backend, JobKind::Map { batch: i }, Some(i))
    }

    /// Validates and enqueues a job. Jobs that can never be placed end
    /// CANCELED right away.
    pub(super) fn submit_job(
        &mut self,
        engine: &mut Eng,
        spec: TaskSpec,
        backend: usize,
        kind: JobKind,
        batch: Option<usize>,
    ) -> Result<(), SimError> {
        let validated = self.validator.validate(spec).map_err(|e| SimError::World(e.to_string()))?;
        let b = &mut self.backends[backend];
        engine.record(Record::Submit {
            task: validated.id.clone(),
            backend: b.id().to_string(),
            batch: batch.map(|i| self.batches[i].id.clone()),
            hint: validated.partition_hint.clone(),
            node_count: validated.node_count,
            executor_count: validated.executor_count,
        });
        let up = {
            let down = self.down.clone();
            move |s: &SiteId| !down.contains(s)
        };
        let job = Job {
            id: validated.id.clone(),
            spec: validated.spec().clone(),
            backend,
            kind,
            state: TaskState::Queued,
            epoch: 0,
            pool: "-".into(),
            site: b.partitions()[0].spec.site.clone(),
            mount_site: None,
            waiting_data: false,
            output: None,
        };
        let (node_count, executor_count) = (validated.node_count, validated.executor_count);
        let id = job.id.clone();
        self.jobs.insert(id.clone(), job);
        match b.submit(validated, engine.now(), &up) {
            Ok(Some(placement)) => {
                engine.record(Record::Placement {
                    task: id,
                    backend: b.id().to_string(),
                    placement,
                    node_count,
                    executor_count,
                });
                Ok(())
            }
            Ok(None) => Ok(()),
            Err(_) => {
                self.transition(engine, &id, LifecycleEvent::Cancel);
                self.job_ended(engine, &id)
            }
        }
    }

    pub(super) fn transition(&mut self, engine: &mut Eng, id: &str, event: LifecycleEvent) -> TaskState {
        let job = self.jobs.get_mut(id).expect("known job");
        let from = job.state;
        let to = advance_state(from, event).expect("runtime only issues legal transitions");
        job.state = to;
        engine.record(Record::TaskState {
            task: id.to_string(),
            pool: job.pool.clone(),
            site: job.site.clone(),
            from,
            to,
            event,
        });
        if job.kind == JobKind::Tes {
            let outputs = job.output.iter().cloned().collect();
            if let Some(gw) = &self.gw {
                gw.node_event(&job.site, id, event, engine.now(), outputs);
            }
        }
        to
    }

    /// Starts every job a backend can place right now.
    pub(super) fn pump(&mut self, engine: &mut Eng) -> Result<(), SimError> {
        for b in 0..self.backends.len() {
            let up = self.up_fn();
            let starts = self.backends[b].dispatch(&up);
            for s in starts {
                let pool = self.backends[b].pool_name(&s.partition);
                let job = self.jobs.get_mut(s.task.id()).expect("started job is known");
                job.pool = pool;
                job.site = s.site;
                job.mount_site = s.mount_site;
                let id = job.id.clone();
                self.transition(engine, &id, LifecycleEvent::StartInit);
                self.stage(engine, &id)?;
            }
        }
        Ok(())
    }

    /// Fetches all inputs to the job's site and schedules the end of staging.
    /// If some input has no reachable replica the job waits for a site to
    /// come back.
    fn stage(&mut self, engine: &mut Eng, id: &str) -> Result<(), SimError> {
        let job = &self.jobs[id];
        let (site, mount, inputs, epoch) = (job.site.clone(), job.mount_site.clone(), job.spec.inputs.clone(), job.epoch);
        let now = engine.now();
        let mut ready = now;
        let mut blocked = false;
        for input in &inputs {
            let fetched = match &mount {
                Some(m) => self
                    .store
                    .fetch(&input.object_id, m, now, TransferPurpose::Input)
                    .and_then(|f| {
                        record_transfer(engine, &f);
                        self.store.copy(&input.object_id, m, &site, now, TransferPurpose::Mount)
                    }),
                None => self.store.fetch(&input.object_id, &site, now, TransferPurpose::Input),
            };
            match fetched {
                Ok(f) => {
                    record_transfer(engine, &f);
                    ready = ready.max(f.available_at);
                }
                Err(StorageError::NoReachableReplica(_) | StorageError::SiteDown(_)) => blocked = true,
                Err(e) => return Err(storage_err(e)),
            }
        }
        let job = self.jobs.get_mut(id).unwrap();
        job.waiting_data = blocked;
        if !blocked {
            engine.schedule(ready, Ev::StageDone { job: id.to_string(), epoch })?;
        }
        Ok(())
    }

    fn current(&self, id: &str, epoch: u64, state: TaskState) -> bool {
        self.jobs.get(id).is_some_and(|j| j.epoch == epoch && j.state == state)
    }

    fn stage_done(&mut self, engine: &mut Eng, id: &str, epoch: u64) -> Result<(), SimError> {
        if !self.current(id, epoch, TaskState::Initializing) {
            return Ok(());
        }
        self.transition(engine, id, LifecycleEvent::StartRun);
        let base = self.jobs[id].spec.command.duration_s;
        let duration = if self.cfg.jitter > 0.0 {
            let u: f64 = self.rng.random_range(-1.0..1.0);
            (base * (1.0 + self.cfg.jitter * u)).max(0.0)
        } else {
            base
        };
        engine.after(duration, Ev::RunDone { job: id.to_string(), epoch })?;
        if self.mode.is_federated() && matches!(self.jobs[id].kind, JobKind::Map { .. }) {
            self.report_running(engine, id)?;
        }
        Ok(())
    }

    fn poisoned(&self, job: &Job) -> bool {
        match job.kind {
            JobKind::Map { batch } => self.cfg.poisoned.contains(&self.batches[batch].id),
            JobKind::Tes => self
                .gw
                .as_ref()
                .and_then(|g| g.batch_of(&job.id))
                .is_some_and(|i| self.cfg.poisoned.contains(&self.batches[i].id)),
            JobKind::Gather => false,
        }
    }

    fn run_done(&mut self, engine: &mut Eng, id: &str, epoch: u64) -> Result<(), SimError> {
        if !self.current(id, epoch, TaskState::Running) {
            return Ok(());
        }
        if self.poisoned(&self.jobs[id]) {
            return self.fail(engine, id, LifecycleEvent::FinishExecutorErr);
        }
        let job = &self.jobs[id];
        let now = engine.now();
        let site = job.site.clone();
        let output = self
            .store
            .put_synthetic(&site, &job.spec.command.output_key, job.spec.command.output_size_bytes, now)
            .map_err(storage_err)?;
        let common = self.cfg.common_site().clone();
        let to_common = matches!(job.kind, JobKind::Gather | JobKind::Tes)
            || self.mode == Mode::Overlay
            || (self.mode.is_federated() && self.cfg.gather);
        let delivered = match &job.mount_site {
            Some(m) => Some(self.store.copy(&output.object_id, &site, m, now, TransferPurpose::Mount)),
            None if to_common => Some(self.store.fetch(&output.object_id, &common, now, TransferPurpose::Output)),
            None => None,
        };
        self.jobs.get_mut(id).unwrap().output = Some(output);
        match delivered {
            None => self.complete(engine, id),
            Some(Ok(f)) => {
                record_transfer(engine, &f);
                engine.schedule(f.available_at, Ev::OutputStored { job: id.to_string(), epoch })?;
                Ok(())
            }
            Some(Err(_)) => self.fail(engine, id, LifecycleEvent::FinishSystemErr),
        }
    }

    fn complete(&mut self, engine: &mut Eng, id: &str) -> Result<(), SimError> {
        self.transition(engine, id, LifecycleEvent::FinishOk);
        let job = &self.jobs[id];
        engine.record(Record::TaskDone {
            task: id.to_string(),
            site: job.site.clone(),
            state: TaskState::Complete,
            output: job.output.as_ref().map(|o| o.object_id.clone()),
        });
        *self.per_site.entry(job.site.clone()).or_default() += 1;
        self.backends[job.backend].release(id);
        self.job_ended(engine, id)
    }

    /// Ends a job in an error state (or cancels it) and frees its slot.
    pub(super) fn fail(&mut self, engine: &mut Eng, id: &str, event: LifecycleEvent) -> Result<(), SimError> {
        let was_queued = self.jobs[id].state == TaskState::Queued;
        let state = self.transition(engine, id, event);
        let job = self.jobs.get_mut(id).unwrap();
        job.epoch += 1;
        job.output = None;
        engine.record(Record::TaskDone {
            task: id.to_string(),
            site: job.site.clone(),
            state,
            output: None,
        });
        let backend = job.backend;
        if was_queued {
            self.backends[backend].cancel_queued(id);
        } else {
            self.backends[backend].release(id);
        }
        self.job_ended(engine, id)
    }

    pub(super) fn cancel(&mut self, engine: &mut Eng, id: &str) -> Result<(), SimError> {
        if self.jobs.get(id).is_some_and(|j| !j.state.is_terminal()) {
            self.fail(engine, id, LifecycleEvent::Cancel)?;
        }
        Ok(())
    }

    fn job_ended(&mut self, engine: &mut Eng, id: &str) -> Result<(), SimError> {
        let job = &self.jobs[id];
        let (kind, state, output) = (job.kind, job.state, job.output.clone());
        match kind {
            JobKind::Tes => Ok(()),
            JobKind::Map { batch } if self.mode.is_federated() => self.federated_job_ended(engine, id, batch),
            JobKind::Map { batch } => {
                match state {
                    TaskState::Complete => self.batches[batch].state = BatchState::Done(output.expect("complete job has output")),
                    TaskState::ExecutorError => self.batches[batch].state = BatchState::Failed,
                    _ if self.batches[batch].attempts <= self.cfg.workflow.retry_limit => {
                        self.retries += 1;
                        self.submit_map(engine, batch)?;
                    }
                    _ => self.batches[batch].state = BatchState::Failed,
                }
                Ok(())
            }
            JobKind::Gather => {
                match state {
                    TaskState::Complete => {
                        self.gather_output = output;
                        self.finish(engine);
                    }
                    TaskState::SystemError | TaskState::Canceled
                        if self.gather_attempts <= self.cfg.workflow.retry_limit =>
                    {
                        self.retries += 1;
                        self.submit_gather(engine)?;
                    }
                    _ => {
                        self.gather_failed = true;
                        self.finish(engine);
                    }
                }
                Ok(())
            }
        }
    }

    fn kill_where(&mut self, engine: &mut Eng, pred: impl Fn(&Job) -> bool) -> Result<(), SimError> {
        let victims: Vec<String> = self
            .jobs
            .values()
            .filter(|j| j.state.occupies_slot() && pred(j))
            .map(|j| j.id.clone())
            .collect();
        for id in victims {
            self.fail(engine, &id, LifecycleEvent::FinishSystemErr)?;
        }
        Ok(())
    }

    fn site_down(&mut self, engine: &mut Eng, site: &SiteId) -> Result<(), SimError> {
        engine.record(Record::SiteDown { site: site.clone() });
        self.down.insert(site.clone());
        self.store.set_site_up(site, false);
        if let Some(gw) = &self.gw {
            gw.set_node_online(site, false);
        }
        self.kill_where(engine, |j| &j.site == site || j.mount_site.as_ref() == Some(site))
    }

    fn site_up(&mut self, engine: &mut Eng, site: &SiteId) -> Result<(), SimError> {
        engine.record(Record::SiteUp { site: site.clone() });
        self.down.remove(site);
        self.store.set_site_up(site, true);
        if let Some(gw) = &self.gw {
            gw.set_node_online(site, true);
        }
        let waiting: Vec<String> = self
            .jobs
            .values()
            .filter(|j| j.waiting_data && j.state == TaskState::Initializing)
            .map(|j| j.id.clone())
            .collect();
        for id in waiting {
            self.stage(engine, &id)?;
        }
        self.wake_workers(engine)
    }

    fn preempt(&mut self, engine: &mut Eng, site: &SiteId) -> Result<(), SimError> {
        engine.record(Record::Preempt { site: site.clone() });
        let preemptible = self.cfg.sites.iter().any(|s| &s.id == site && s.preemptible);
        if preemptible {
            self.kill_where(engine, |j| &j.site == site)?;
        }
        Ok(())
    }

    fn all_batches_terminal(&self) -> bool {
        self.batches.iter().all(|b| b.state != BatchState::Pending)
    }

    fn check_progress(&mut self, engine: &mut Eng) -> Result<(), SimError> {
        if self.phase != Phase::Maps || !self.all_batches_terminal() {
            return Ok(());
        }
        if !self.cfg.gather || self.batches.iter().any(|b| b.state == BatchState::Failed) {
            self.finish(engine);
            return Ok(());
        }
        self.phase = Phase::Gather;
        if matches!(self.mode, Mode::Manual | Mode::Federated | Mode::FederatedController | Mode::Overflow) {
            let common = self.cfg.common_site().clone();
            for d in self.map_outputs() {
                // outputs on a site that is down are left to the gather task
                if let Ok(f) = self.store.fetch(&d.object_id, &common, engine.now(), TransferPurpose::Gather) {
                    record_transfer(engine, &f);
                }
            }
        }
        if self.mode == Mode::Gateway {
            self.gateway_gather(engine)
        } else {
            self.submit_gather(engine)
        }
    }

    fn submit_gather(&mut self, engine: &mut Eng) -> Result<(), SimError> {
        self.gather_attempts += 1;
        let spec = self.gather_spec(format!("gather.a{}", self.gather_attempts));
        let backend = if self.site_backend.is_empty() {
            0
        } else {
            // fewest remote input bytes among reachable sites, ties by site
            let candidates: Vec<&SiteId> = {
                let up: Vec<&SiteId> = self.site_backend.keys().filter(|s| self.is_up(s)).collect();
                if up.is_empty() {
                    self.site_backend.keys().collect()
                } else {
                    up
                }
            };
            let best = candidates
                .into_iter()
                .min_by_key(|s| (spec.remote_input_bytes(s), (*s).clone()))
                .expect("at least one backend");
            self.site_backend[best]
        };
        self.submit_job(engine, spec, backend, JobKind::Gather, None)
    }

    pub(super) fn finish(&mut self, engine: &mut Eng) {
        if self.phase != Phase::Finished {
            self.phase = Phase::Finished;
            self.finished_at = Some(engine.now());
        }
    }

    fn finish_report(&mut self, engine: &mut Eng) -> RunReport {
        let starved: Vec<String> = self
            .jobs
            .values()
            .filter(|j| !j.state.is_terminal())
            .map(|j| j.id.clone())
            .collect();
        let failed_batches: Vec<String> = self
            .batches
            .iter()
            .filter(|b| b.state == BatchState::Failed)
            .map(|b| b.id.clone())
            .collect();
        let status = if !failed_batches.is_empty() || self.gather_failed {
            RunStatus::Failed
        } else if self.phase != Phase::Finished || !starved.is_empty() {
            RunStatus::Stalled
        } else {
            RunStatus::Succeeded
        };
        let ledger = self.store.ledger();
        engine.record(Record::RunEnd {
            status: status.as_str().to_string(),
            ledger_bytes: ledger.total_bytes(),
            registered: self.repo.len() as u64,
            batch_tags: self
                .repo
                .tag_counts()
                .into_iter()
                .filter(|_| !self.repo.is_empty())
                .map(|(t, n)| (t.as_str().to_string(), n))
                .collect(),
            starved: starved.clone(),
        });
        let retries = if self.mode.is_federated() {
            self.retries
                + self
                    .repo
                    .list(None)
                    .iter()
                    .map(|r| r.attempts.saturating_sub(1) as u64)
                    .sum::<u64>()
        } else {
            self.retries
        };
        let purposes = [
            TransferPurpose::Input,
            TransferPurpose::Output,
            TransferPurpose::Gather,
            TransferPurpose::Mount,
        ];
        RunReport {
            mode: self.mode.as_str().to_string(),
            status,
            makespan_s: self.finished_at.unwrap_or(engine.now()),
            per_site_tasks: self.per_site.clone(),
            bytes_transferred_total: ledger.total_bytes(),
            bytes_by_purpose: purposes
                .into_iter()
                .map(|p| {
                    let name = serde_json::to_value(p).unwrap().as_str().unwrap().to_string();
                    (name, ledger.bytes_for(p))
                })
                .collect(),
            retries,
            starved,
            failed_batches,
            final_manifest: self
                .map_outputs()
                .into_iter()
                .map(|d| ManifestEntry {
                    object_id: d.object_id,
                    size_bytes: d.size_bytes,
                })
                .collect(),
            gather_output: self.gather_output.as_ref().map(|d| ManifestEntry {
                object_id: d.object_id.clone(),
                size_bytes: d.size_bytes,
            }),
            metrics_digest: String::new(),
        }
        .seal()
    }
}

fn transfer_record(t: &crate::storage::LedgerEntry) -> Record {
    Record::Transfer {
        object: t.object.clone(),
        from: t.from.clone(),
        to: t.to.clone(),
        bytes: t.bytes,
        done_at: t.done_at,
    }
}

fn record_transfer(engine: &mut Eng, f: &Fetch) {
    if let Some(t) = &f.transfer {
        engine.record(transfer_record(t));
    }
}

/// Splits `n` items proportionally to `weights`, rounding by largest
/// remainder. Equal remainders favour the earlier weight.
pub fn largest_remainder(n: u64, weights: &[u64]) -> Vec<u64> {
    let total: u64 = weights.iter().sum();
    if total == 0 {
        return vec![0; weights.len()];
    }
    let mut shares: Vec<u64> = weights.iter().map(|w| n * w / total).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(n * weights[i] % total), i));
    let left = n - shares.iter().sum::<u64>();
    for &i in order.iter().take(left as usize) {
        shares[i] += 1;
    }
    shares
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(4, &[1, 1]), [2, 2]);
        assert_eq!(largest_remainder(3, &[2, 1]), [2, 1]);
        assert_eq!(largest_remainder(5, &[1, 1]), [3, 2]);
        assert_eq!(largest_remainder(7, &[1, 2, 4]), [1, 2, 4]);
        assert_eq!(largest_remainder(10, &[1, 1, 1]), [4, 3, 3]);
    }
}
