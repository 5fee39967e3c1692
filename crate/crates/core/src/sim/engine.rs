//! Event loop and per-instance state machines.
//!
//! Encode instances own local queues filled at arrival time. Prefill and
//! decode instances pull from global queues when they have room, and the
//! data they need (MM tokens, KV cache) is moved over a FIFO channel per
//! instance pair. After every event the scheduler sweeps the instances in id
//! order until nothing more can start.

use std::collections::{BTreeMap, VecDeque};

use super::block::{BlockManager, CacheKind};
use super::config::{InstanceConfig, StageDefaults, SystemConfig};
use super::event::{EventQueue, Payload};
use super::sched::{assign_instance, form_batch, irp_shard, Candidate};
use super::trace::{InstanceStats, RequestRecord, ShardRecord, SimEventKind, SimTrace, TraceEvent};
use crate::cost::{transfer_latency, Channel};
use crate::error::{Error, Result};
use crate::model::StageRole;
use crate::role_switch::{
    monitor_and_decide, SWITCHABLE, ControllerParams, InstanceView, MonitorSnapshot, SwitchDecision, SwitchEventRecord,
};
use crate::workload::Request;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InstState {
    Active,
    Offloading(usize),
    Migrating(usize),
    Onloading(usize),
}

#[derive(Debug, Clone, Copy)]
struct EncJob {
    req: usize,
    shard: usize,
    patches: u64,
}

#[derive(Debug, Clone)]
enum Work {
    Encode(Vec<EncJob>),
    Prefill(Vec<usize>),
    Decode(Vec<usize>),
}

#[derive(Debug)]
struct Inst {
    cfg: InstanceConfig,
    initial_role: StageRole,
    first_gpu: u32,
    state: InstState,
    mm: BlockManager,
    kv: BlockManager,
    enc_queue: VecDeque<EncJob>,
    /// Prefill: pulled requests awaiting transfers or a batch slot.
    /// Encode-prefill and monolithic: encoded requests awaiting prefill.
    staged: VecDeque<usize>,
    /// Sequences with resident KV taking part in decode steps.
    running: Vec<usize>,
    /// Decode: PD transfers in flight towards this instance.
    incoming: usize,
    work: Option<Work>,
    busy_time: f64,
    work_end: f64,
    /// Busy seconds up to the previous switch decision.
    busy_mark: f64,
    batches: u64,
    queue_samples: Vec<(f64, usize)>,
}

impl Inst {
    fn queued(&self) -> usize {
        self.enc_queue.len() + self.staged.len()
    }

    /// Busy seconds elapsed by `now`, counting the running batch up to `now`.
    fn busy_until(&self, now: f64) -> f64 {
        if self.work.is_some() {
            self.busy_time - (self.work_end - now).max(0.0)
        } else {
            self.busy_time
        }
    }

    fn drained(&self) -> bool {
        self.work.is_none()
            && self.enc_queue.is_empty()
            && self.staged.is_empty()
            && self.running.is_empty()
            && self.incoming == 0
            && self.mm.is_empty()
            && self.kv.is_empty()
    }
}

#[derive(Debug, Clone)]
struct Shard {
    instance: usize,
    tokens: u64,
}

#[derive(Debug, Clone, Default)]
struct Live {
    mm: u64,
    total: u64,
    output: u64,
    shards: Vec<Shard>,
    unencoded: usize,
    transfers_left: usize,
    ready: bool,
    prefill_inst: Option<usize>,
    decode_inst: Option<usize>,
    emitted: u64,
    finished: bool,
}

#[derive(Debug, Clone, Copy)]
enum TransferKind {
    Ep { req: usize, shard: usize },
    Pd { req: usize },
}

#[derive(Debug, Clone, Copy)]
struct Transfer {
    kind: TransferKind,
    src: usize,
    dst: usize,
}

/// Deployment family, fixed for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Split,
    EncodePrefill,
    Monolithic,
}

struct Engine<'a> {
    cfg: &'a SystemConfig,
    reqs: &'a [Request],
    family: Family,
    templates: StageDefaults,
    now: f64,
    events: EventQueue,
    live: Vec<Live>,
    records: Vec<RequestRecord>,
    insts: Vec<Inst>,
    channels: BTreeMap<(usize, usize), f64>,
    transfers: Vec<Transfer>,
    prefill_queue: VecDeque<usize>,
    decode_queue: VecDeque<usize>,
    cursors: BTreeMap<StageRole, usize>,
    log: Vec<TraceEvent>,
    controller: Option<ControllerParams>,
    switches: Vec<SwitchEventRecord>,
    active_switch: Option<usize>,
    last_decision: Option<f64>,
    outstanding: usize,
}

/// Runs `workload` (sorted by arrival) on `config` and returns the full trace.
///
/// The engine draws no random numbers; `seed` is accepted so callers can key
/// runs uniformly, and identical inputs always give identical traces.
pub fn run_simulation(config: &SystemConfig, workload: &[Request], seed: u64) -> Result<SimTrace> {
    let _ = seed;
    config.validate()?;
    for r in workload {
        r.validate()?;
    }
    if workload.windows(2).any(|w| w[1].arrival < w[0].arrival) {
        return Err(Error::invalid("workload", "requests must be sorted by arrival"));
    }
    let mut engine = Engine::new(config, workload)?;
    engine.run()?;
    Ok(engine.finish())
}

fn new_caches(cfg: &SystemConfig, inst: &InstanceConfig) -> (BlockManager, BlockManager) {
    let mm_tokens = if inst.role.holds_mm() { cfg.mm_cache_tokens } else { 0 };
    let kv_tokens = cfg.memory().kv_capacity_tokens(inst.role, inst.gpus(), cfg.kv_fraction);
    (
        BlockManager::with_token_capacity(CacheKind::Mm, cfg.block_size, mm_tokens),
        BlockManager::with_token_capacity(CacheKind::Kv, cfg.block_size, kv_tokens),
    )
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SystemConfig, reqs: &'a [Request]) -> Result<Self> {
        let has = |role| cfg.instances.iter().any(|i| i.role == role);
        let family = if has(StageRole::Monolithic) {
            Family::Monolithic
        } else if has(StageRole::EncodePrefill) {
            Family::EncodePrefill
        } else {
            Family::Split
        };
        let mut templates = StageDefaults::default();
        for role in [StageRole::Encode, StageRole::Prefill, StageRole::Decode] {
            if let Some(i) = cfg.instances.iter().find(|i| i.role == role) {
                match role {
                    StageRole::Encode => templates.encode = *i,
                    StageRole::Prefill => templates.prefill = *i,
                    _ => templates.decode = *i,
                }
            }
        }
        let mut first_gpu = 0;
        let insts = cfg
            .instances
            .iter()
            .map(|c| {
                let (mm, kv) = new_caches(cfg, c);
                let inst = Inst {
                    cfg: *c,
                    initial_role: c.role,
                    first_gpu,
                    state: InstState::Active,
                    mm,
                    kv,
                    enc_queue: VecDeque::new(),
                    staged: VecDeque::new(),
                    running: Vec::new(),
                    incoming: 0,
                    work: None,
                    busy_time: 0.0,
                    work_end: 0.0,
                    busy_mark: 0.0,
                    batches: 0,
                    queue_samples: vec![(0.0, 0)],
                };
                first_gpu += c.gpus();
                inst
            })
            .collect();
        let mut events = EventQueue::default();
        for (i, r) in reqs.iter().enumerate() {
            events.push(r.arrival, Payload::Arrival { request: i });
        }
        let controller = cfg.role_switch;
        if let (Some(p), false) = (controller, reqs.is_empty()) {
            events.push(p.monitor_interval, Payload::Monitor);
        }
        Ok(Self {
            cfg,
            reqs,
            family,
            templates,
            now: 0.0,
            events,
            live: vec![Live::default(); reqs.len()],
            records: Vec::with_capacity(reqs.len()),
            insts,
            channels: BTreeMap::new(),
            transfers: Vec::new(),
            prefill_queue: VecDeque::new(),
            decode_queue: VecDeque::new(),
            cursors: BTreeMap::new(),
            log: Vec::new(),
            controller,
            switches: Vec::new(),
            active_switch: None,
            last_decision: None,
            outstanding: reqs.len(),
        })
    }

    fn run(&mut self) -> Result<()> {
        while let Some(ev) = self.events.pop() {
            self.now = ev.time;
            match ev.payload {
                Payload::Arrival { request } => self.on_arrival(request)?,
                Payload::BatchEnd { instance } => self.on_batch_end(instance),
                Payload::TransferEnd { transfer } => self.on_transfer_end(transfer),
                Payload::DecodeStep { instance } => self.on_decode_step(instance),
                Payload::SwitchPhase { switch } => self.on_switch_phase(switch),
                Payload::Monitor => self.on_monitor(),
            }
            self.schedule();
            self.sample_queues();
        }
        if let Some(r) = self.records.iter().find(|r| r.rejected.is_none() && r.completion.is_none()) {
            return Err(Error::IncompleteRequest(r.id));
        }
        Ok(())
    }

    fn finish(mut self) -> SimTrace {
        self.log.sort_by(|a, b| a.time.total_cmp(&b.time));
        SimTrace {
            requests: self.records,
            instances: self
                .insts
                .into_iter()
                .enumerate()
                .map(|(id, i)| InstanceStats {
                    id,
                    initial_role: i.initial_role,
                    final_role: i.cfg.role,
                    gpus: i.cfg.gpus(),
                    busy_time: i.busy_time,
                    batches: i.batches,
                    queue_samples: i.queue_samples,
                })
                .collect(),
            switches: self.switches,
            events: self.log,
        }
    }

    fn emit(&mut self, time: f64, kind: SimEventKind, detail: &'static str, request: Option<usize>, instance: Option<usize>) {
        let request = request.map(|r| self.reqs[r].id);
        self.log.push(TraceEvent {
            time,
            kind,
            detail,
            request,
            instance,
        });
    }

    fn sample_queues(&mut self) {
        let now = self.now;
        for inst in &mut self.insts {
            let q = inst.queued();
            if inst.queue_samples.last().map(|s| s.1) != Some(q) {
                inst.queue_samples.push((now, q));
            }
        }
    }

    // ---- arrivals and admission ----

    fn role_instances(&self, role: StageRole) -> impl Iterator<Item = &Inst> {
        self.insts.iter().filter(move |i| i.cfg.role == role)
    }

    fn fits_somewhere(&self, role: StageRole, mm: u64, kv: u64) -> bool {
        self.role_instances(role)
            .any(|i| i.mm.could_ever_fit(mm) && i.kv.could_ever_fit(kv))
    }

    /// Why a request can never be served, if it cannot.
    fn never_fits(&self, idx: usize, shard_tokens: u64) -> Option<String> {
        let l = &self.live[idx];
        let max_ctx = self.cfg.model.max_context_tokens;
        if l.total > max_ctx {
            return Some(format!("OOCL: {} prefill tokens exceed the {max_ctx}-token context", l.total));
        }
        let full = l.total + l.output;
        let ok = match self.family {
            Family::Split => {
                self.fits_somewhere(StageRole::Encode, shard_tokens, 0)
                    && self.fits_somewhere(StageRole::Prefill, l.mm, l.total)
                    && self.fits_somewhere(StageRole::Decode, 0, full)
            }
            Family::EncodePrefill => {
                self.fits_somewhere(StageRole::EncodePrefill, l.mm, l.total)
                    && self.fits_somewhere(StageRole::Decode, 0, full)
            }
            Family::Monolithic => self.fits_somewhere(StageRole::Monolithic, l.mm, full),
        };
        (!ok).then(|| format!("caches cannot hold {} MM / {} KV tokens", l.mm, full))
    }

    fn candidates(&self, role: StageRole, exclude: Option<usize>) -> Vec<Candidate> {
        let tpp = self.cfg.model.tokens_per_patch;
        self.insts
            .iter()
            .enumerate()
            .filter(|(id, i)| i.cfg.role == role && i.state == InstState::Active && Some(*id) != exclude)
            .map(|(id, i)| {
                let running: u64 = match &i.work {
                    Some(Work::Encode(jobs)) => jobs.iter().map(|j| j.patches).sum(),
                    _ => 0,
                };
                let queued: u64 = i.enc_queue.iter().map(|j| j.patches).sum();
                let staged: u64 = i.staged.iter().map(|&r| self.live[r].total).sum();
                Candidate {
                    id,
                    load: ((queued + running) * tpp + staged) as f64,
                    queued_jobs: i.queued() + usize::from(i.work.is_some()),
                }
            })
            .collect()
    }

    fn assign(&mut self, role: StageRole, exclude: Option<usize>) -> Option<usize> {
        let cands = self.candidates(role, exclude);
        if cands.is_empty() {
            return None;
        }
        let policy = self.insts[cands[0].id].cfg.policy;
        let cursor = self.cursors.entry(role).or_insert(0);
        Some(assign_instance(&cands, policy, cursor))
    }

    fn on_arrival(&mut self, idx: usize) -> Result<()> {
        let r = &self.reqs[idx];
        let model = &self.cfg.model;
        let (mm, total) = model.tokens_for_request(r)?;
        let patches = model.patches_for_request(r)?;
        self.records
            .push(RequestRecord::new(r.id, r.arrival, r.output_tokens, r.slo, mm, total));
        debug_assert_eq!(self.records.len(), idx + 1);
        self.live[idx] = Live {
            mm,
            total,
            output: r.output_tokens,
            ..Live::default()
        };
        self.emit(self.now, SimEventKind::Arrival, "", Some(idx), None);

        let encode_role = match self.family {
            Family::Split => StageRole::Encode,
            Family::EncodePrefill => StageRole::EncodePrefill,
            Family::Monolithic => StageRole::Monolithic,
        };
        let width = if self.family == Family::Split && self.cfg.irp {
            self.candidates(StageRole::Encode, None).len().max(1)
        } else {
            1
        };
        let shards: Vec<u64> = irp_shard(patches, width).into_iter().filter(|&p| p > 0).collect();
        let tpp = model.tokens_per_patch;
        let biggest = shards.first().copied().unwrap_or(0) * tpp;
        if let Some(reason) = self.never_fits(idx, biggest) {
            if !self.cfg.admission_control {
                return Err(Error::CapacityExceeded {
                    request: self.reqs[idx].id,
                    reason,
                });
            }
            self.records[idx].rejected = Some(reason);
            self.live[idx].finished = true;
            self.outstanding -= 1;
            self.emit(self.now, SimEventKind::Rejected, "", Some(idx), None);
            return Ok(());
        }

        if shards.is_empty() {
            // Nothing to encode: the request goes straight to prefill.
            let rec = &mut self.records[idx];
            rec.encode_start = Some(self.now);
            rec.encode_end = Some(self.now);
            match self.family {
                Family::Split => self.prefill_queue.push_back(idx),
                _ => {
                    rec.ep_transfer_end = Some(self.now);
                    let inst = self.assign(encode_role, None).expect("stage coverage validated");
                    self.insts[inst].staged.push_back(idx);
                }
            }
            return Ok(());
        }
        for (s, &p) in shards.iter().enumerate() {
            let inst = self.assign(encode_role, None).expect("stage coverage validated");
            self.live[idx].shards.push(Shard {
                instance: inst,
                tokens: p * tpp,
            });
            self.records[idx].shards.push(ShardRecord {
                instance: inst,
                patches: p,
                encode_start: f64::NAN,
                encode_end: f64::NAN,
                transfer_end: f64::NAN,
            });
            self.insts[inst].enc_queue.push_back(EncJob {
                req: idx,
                shard: s,
                patches: p,
            });
        }
        self.live[idx].unencoded = shards.len();
        Ok(())
    }

    // ---- scheduling ----

    fn schedule(&mut self) {
        loop {
            let mut progress = false;
            for i in 0..self.insts.len() {
                progress |= self.step_instance(i);
            }
            progress |= self.advance_offload();
            if !progress {
                break;
            }
        }
    }

    fn step_instance(&mut self, i: usize) -> bool {
        let state = self.insts[i].state;
        let serving = matches!(state, InstState::Active | InstState::Offloading(_));
        if !serving {
            return false;
        }
        let active = state == InstState::Active;
        let idle = self.insts[i].work.is_none();
        match self.insts[i].cfg.role {
            StageRole::Encode => active && idle && self.start_encode(i),
            StageRole::Prefill => {
                let pulled = active && self.pull_prefill(i);
                let started = self.insts[i].work.is_none() && self.start_prefill(i);
                pulled || started
            }
            StageRole::Decode => {
                let pulled = active && self.pull_decode(i);
                let started = self.insts[i].work.is_none() && self.start_decode(i);
                pulled || started
            }
            StageRole::EncodePrefill => idle && (self.start_prefill(i) || self.start_encode(i)),
            StageRole::Monolithic => idle && (self.start_prefill(i) || self.start_encode(i) || self.start_decode(i)),
        }
    }

    fn begin_work(&mut self, i: usize, work: Work, latency: f64) {
        let payload = match work {
            Work::Decode(_) => Payload::DecodeStep { instance: i },
            _ => Payload::BatchEnd { instance: i },
        };
        let inst = &mut self.insts[i];
        inst.work = Some(work);
        inst.busy_time += latency;
        inst.work_end = self.now + latency;
        inst.batches += 1;
        self.events.push(self.now + latency, payload);
    }

    fn start_encode(&mut self, i: usize) -> bool {
        let tpp = self.cfg.model.tokens_per_patch;
        let inst = &mut self.insts[i];
        if inst.enc_queue.is_empty() {
            return false;
        }
        let max = if inst.cfg.role == StageRole::Monolithic { 1 } else { inst.cfg.max_batch as usize };
        let mut free = inst.mm.free_blocks();
        let n = form_batch(&inst.enc_queue, max, |j| {
            let need = inst.mm.blocks_for(j.patches * tpp);
            let ok = need <= free;
            if ok {
                free -= need;
            }
            ok
        });
        if n == 0 {
            return false;
        }
        let jobs: Vec<EncJob> = inst.enc_queue.drain(..n).collect();
        for j in &jobs {
            inst.mm
                .allocate((j.req as u64, j.shard as u32), j.patches * tpp)
                .expect("batch formed within free blocks");
        }
        let patches: u64 = jobs.iter().map(|j| j.patches).sum();
        let latency = self.cfg.cost.encode_latency(patches, inst.cfg.tp) * self.cfg.cost.stage_slowdown(inst.cfg.role);
        for j in &jobs {
            let rec = &mut self.records[j.req];
            rec.shards[j.shard].encode_start = self.now;
            rec.encode_start.get_or_insert(self.now);
            self.log.push(TraceEvent {
                time: self.now,
                kind: SimEventKind::BatchStart,
                detail: "encode",
                request: Some(self.reqs[j.req].id),
                instance: Some(i),
            });
        }
        self.begin_work(i, Work::Encode(jobs), latency);
        true
    }

    fn pull_prefill(&mut self, i: usize) -> bool {
        let mut pulled = false;
        while self.insts[i].staged.len() < self.insts[i].cfg.max_batch as usize {
            let Some(&r) = self.prefill_queue.front() else { break };
            let (mm, total) = (self.live[r].mm, self.live[r].total);
            let inst = &mut self.insts[i];
            if !(inst.mm.can_allocate(mm) && inst.kv.can_allocate(total)) {
                break;
            }
            self.prefill_queue.pop_front();
            let key = (r as u64, 0);
            inst.mm.allocate(key, mm).expect("checked");
            inst.kv.allocate(key, total).expect("checked");
            inst.staged.push_back(r);
            self.live[r].prefill_inst = Some(i);
            self.records[r].prefill_instance = Some(i);
            let shards = self.live[r].shards.clone();
            self.live[r].transfers_left = shards.len();
            if shards.is_empty() {
                self.live[r].ready = true;
                self.records[r].ep_transfer_end = Some(self.now);
            }
            let bytes_per = self.cfg.model.mm_bytes_per_token();
            for (s, sh) in shards.iter().enumerate() {
                self.start_transfer(TransferKind::Ep { req: r, shard: s }, sh.instance, i, sh.tokens * bytes_per);
            }
            pulled = true;
        }
        pulled
    }

    fn start_prefill(&mut self, i: usize) -> bool {
        let role = self.insts[i].cfg.role;
        let n = {
            let inst = &self.insts[i];
            let live = &self.live;
            match role {
                StageRole::Prefill => form_batch(&inst.staged, inst.cfg.max_batch as usize, |&r| live[r].ready),
                StageRole::EncodePrefill | StageRole::Monolithic => {
                    let (max, keep_output) = if role == StageRole::Monolithic {
                        let room = (inst.cfg.max_batch as usize).saturating_sub(inst.running.len());
                        (room.min(1), true)
                    } else {
                        (inst.cfg.max_batch as usize, false)
                    };
                    let mut free = inst.kv.free_blocks();
                    form_batch(&inst.staged, max, |&r| {
                        let tokens = live[r].total + if keep_output { live[r].output } else { 0 };
                        let need = inst.kv.blocks_for(tokens);
                        let ok = need <= free;
                        if ok {
                            free -= need;
                        }
                        ok
                    })
                }
                _ => 0,
            }
        };
        if n == 0 {
            return false;
        }
        let batch: Vec<usize> = self.insts[i].staged.drain(..n).collect();
        if role != StageRole::Prefill {
            for &r in &batch {
                let tokens = self.live[r].total
                    + if role == StageRole::Monolithic { self.live[r].output } else { 0 };
                self.insts[i].kv.allocate((r as u64, 0), tokens).expect("batch formed within free blocks");
                self.live[r].prefill_inst = Some(i);
                self.records[r].prefill_instance = Some(i);
            }
        }
        let totals: Vec<u64> = batch.iter().map(|&r| self.live[r].total).collect();
        let c = self.insts[i].cfg;
        let latency = self.cfg.cost.prefill_batch_latency(&totals, c.tp, c.pp) * self.cfg.cost.stage_slowdown(role);
        for &r in &batch {
            self.records[r].prefill_start = Some(self.now);
            self.emit(self.now, SimEventKind::BatchStart, "prefill", Some(r), Some(i));
        }
        self.begin_work(i, Work::Prefill(batch), latency);
        true
    }

    fn pull_decode(&mut self, i: usize) -> bool {
        let mut pulled = false;
        loop {
            let inst = &self.insts[i];
            if inst.running.len() + inst.incoming >= inst.cfg.max_batch as usize {
                break;
            }
            let Some(&r) = self.decode_queue.front() else { break };
            let need = self.live[r].total + self.live[r].output;
            if !inst.kv.can_allocate(need) || self.decode_target(need) != Some(i) {
                break;
            }
            self.decode_queue.pop_front();
            let inst = &mut self.insts[i];
            inst.kv.allocate((r as u64, 0), need).expect("checked");
            inst.incoming += 1;
            self.live[r].decode_inst = Some(i);
            self.records[r].decode_instance = Some(i);
            let src = self.live[r].prefill_inst.expect("prefilled");
            let bytes = self.live[r].total * self.cfg.model.kv_bytes_per_token();
            self.start_transfer(TransferKind::Pd { req: r }, src, i, bytes);
            pulled = true;
        }
        pulled
    }

    /// Least-loaded active decode instance with room for a sequence needing
    /// `need` KV tokens; ties go to the lowest index.
    fn decode_target(&self, need: u64) -> Option<usize> {
        self.insts
            .iter()
            .enumerate()
            .filter(|(_, d)| {
                d.cfg.role == StageRole::Decode
                    && d.state == InstState::Active
                    && d.running.len() + d.incoming < d.cfg.max_batch as usize
                    && d.kv.can_allocate(need)
            })
            .min_by_key(|(j, d)| (d.running.len() + d.incoming, *j))
            .map(|(j, _)| j)
    }

    fn start_decode(&mut self, i: usize) -> bool {
        let inst = &self.insts[i];
        if inst.running.is_empty() {
            return false;
        }
        let batch = inst.running.clone();
        let kv: u64 = batch.iter().map(|&r| self.live[r].total + self.live[r].emitted).sum();
        let latency = self
            .cfg
            .cost
            .decode_step_latency_parallel(batch.len() as u64, kv, inst.cfg.tp, inst.cfg.pp);
        self.begin_work(i, Work::Decode(batch), latency);
        true
    }

    fn start_transfer(&mut self, kind: TransferKind, src: usize, dst: usize, bytes: u64) {
        let hw = &self.cfg.hardware;
        let node = |i: usize| self.insts[i].first_gpu / hw.gpus_per_node.max(1);
        let channel = if node(src) == node(dst) {
            Channel::IntraNode
        } else {
            Channel::InterNode
        };
        let latency = transfer_latency(bytes, channel, hw);
        let free_at = self.channels.entry((src, dst)).or_insert(0.0);
        let start = free_at.max(self.now);
        let end = start + latency;
        *free_at = end;
        let id = self.transfers.len();
        self.transfers.push(Transfer { kind, src, dst });
        self.events.push(end, Payload::TransferEnd { transfer: id });
        let (req, detail) = match kind {
            TransferKind::Ep { req, .. } => (req, "ep"),
            TransferKind::Pd { req } => (req, "pd"),
        };
        self.emit(start, SimEventKind::TransferStart, detail, Some(req), Some(dst));
    }

    // ---- completions ----

    fn on_batch_end(&mut self, i: usize) {
        match self.insts[i].work.take() {
            Some(Work::Encode(jobs)) => self.finish_encode(i, jobs),
            Some(Work::Prefill(batch)) => self.finish_prefill(i, batch),
            other => unreachable!("batch end without a batch: {other:?}"),
        }
    }

    fn finish_encode(&mut self, i: usize, jobs: Vec<EncJob>) {
        let split = self.insts[i].cfg.role == StageRole::Encode;
        for j in jobs {
            self.emit(self.now, SimEventKind::BatchEnd, "encode", Some(j.req), Some(i));
            self.records[j.req].shards[j.shard].encode_end = self.now;
            let l = &mut self.live[j.req];
            l.unencoded -= 1;
            if l.unencoded > 0 {
                continue;
            }
            self.records[j.req].encode_end = Some(self.now);
            if split {
                self.prefill_queue.push_back(j.req);
            } else {
                // MM tokens stay in the local cache under key (req, 0); no transfer.
                self.records[j.req].shards[j.shard].transfer_end = self.now;
                self.records[j.req].ep_transfer_end = Some(self.now);
                self.insts[i].staged.push_back(j.req);
            }
        }
    }

    fn finish_prefill(&mut self, i: usize, batch: Vec<usize>) {
        let role = self.insts[i].cfg.role;
        for r in batch {
            self.emit(self.now, SimEventKind::BatchEnd, "prefill", Some(r), Some(i));
            let key = (r as u64, 0);
            let inst = &mut self.insts[i];
            if inst.mm.holds(key) {
                inst.mm.free(key).expect("held");
            }
            let rec = &mut self.records[r];
            rec.prefill_end = Some(self.now);
            rec.first_token = Some(self.now);
            rec.token_times.push(self.now);
            self.live[r].emitted = 1;
            if self.live[r].output == 1 {
                self.insts[i].kv.free(key).expect("prefill KV held");
                self.complete(r, Some(i));
            } else if role == StageRole::Monolithic {
                self.insts[i].running.push(r);
            } else {
                self.decode_queue.push_back(r);
            }
        }
    }

    fn complete(&mut self, r: usize, instance: Option<usize>) {
        self.records[r].completion = Some(self.now);
        self.live[r].finished = true;
        self.outstanding -= 1;
        self.emit(self.now, SimEventKind::RequestComplete, "", Some(r), instance);
    }

    fn on_transfer_end(&mut self, id: usize) {
        let t = self.transfers[id];
        match t.kind {
            TransferKind::Ep { req, shard } => {
                self.emit(self.now, SimEventKind::TransferEnd, "ep", Some(req), Some(t.dst));
                self.insts[t.src]
                    .mm
                    .free((req as u64, shard as u32))
                    .expect("source holds shard until transfer ends");
                self.records[req].shards[shard].transfer_end = self.now;
                let l = &mut self.live[req];
                l.transfers_left -= 1;
                if l.transfers_left == 0 {
                    l.ready = true;
                    self.records[req].ep_transfer_end = Some(self.now);
                }
            }
            TransferKind::Pd { req } => {
                self.emit(self.now, SimEventKind::TransferEnd, "pd", Some(req), Some(t.dst));
                self.insts[t.src]
                    .kv
                    .free((req as u64, 0))
                    .expect("prefill instance holds KV until handoff");
                self.records[req].pd_transfer_end = Some(self.now);
                let dst = &mut self.insts[t.dst];
                dst.incoming -= 1;
                dst.running.push(req);
            }
        }
    }

    fn on_decode_step(&mut self, i: usize) {
        let Some(Work::Decode(batch)) = self.insts[i].work.take() else {
            unreachable!("decode step without a decode batch")
        };
        self.emit(self.now, SimEventKind::DecodeStep, "", None, Some(i));
        for r in batch {
            self.live[r].emitted += 1;
            self.records[r].token_times.push(self.now);
            if self.live[r].emitted == self.live[r].output {
                let inst = &mut self.insts[i];
                inst.running.retain(|&x| x != r);
                inst.kv.free((r as u64, 0)).expect("decode KV held");
                self.complete(r, Some(i));
            }
        }
    }

    // ---- role switching ----

    fn on_monitor(&mut self) {
        let Some(params) = self.controller else { return };
        if self.outstanding == 0 {
            return;
        }
        let snap = self.snapshot();
        if let Some(d) = monitor_and_decide(&snap, &params) {
            let now = self.now;
            for inst in &mut self.insts {
                inst.busy_mark = inst.busy_until(now);
            }
            self.begin_switch(d);
        }
        self.events.push(self.now + params.monitor_interval, Payload::Monitor);
    }

    fn decode_token_cost(&self) -> f64 {
        let b = u64::from(self.templates.decode.max_batch.max(1));
        self.cfg.cost.decode_step_latency(b, 0) / b as f64
    }

    fn snapshot(&self) -> MonitorSnapshot {
        let c = &self.cfg.cost;
        let per_patch = c.enc_per_patch * c.encode_heaviness;
        let per_token = self.decode_token_cost();
        let remaining = |r: usize| (self.live[r].output - self.live[r].emitted) as f64;
        let active = |role| {
            self.insts
                .iter()
                .filter(|i| i.cfg.role == role && i.state == InstState::Active)
                .count()
                .max(1) as f64
        };
        let queued_patches: u64 = self
            .role_instances(StageRole::Encode)
            .flat_map(|i| i.enc_queue.iter().map(|j| j.patches))
            .sum();
        let queued_prefill: u64 = self.prefill_queue.iter().map(|&r| self.live[r].total).sum();
        let queued_decode: f64 = self.decode_queue.iter().map(|&r| remaining(r)).sum::<f64>()
            + self
                .role_instances(StageRole::Decode)
                .flat_map(|i| i.running.iter().map(|&r| remaining(r)))
                .sum::<f64>();
        let window = (self.now - self.last_decision.unwrap_or(0.0)).max(f64::MIN_POSITIVE);
        let stage_utilization = SWITCHABLE.map(|role| {
            let busy: f64 = self
                .role_instances(role)
                .map(|i| (i.busy_until(self.now) - i.busy_mark) / window)
                .sum();
            (busy / active(role)).min(1.0)
        });
        let stage_loads = [
            queued_patches as f64 * per_patch / active(StageRole::Encode),
            queued_prefill as f64 * c.prefill_per_token / active(StageRole::Prefill),
            queued_decode * per_token / active(StageRole::Decode),
        ];
        let instances = self
            .insts
            .iter()
            .enumerate()
            .map(|(id, i)| {
                let load = match i.cfg.role {
                    StageRole::Encode => i.enc_queue.iter().map(|j| j.patches).sum::<u64>() as f64 * per_patch,
                    StageRole::Prefill => {
                        i.staged.iter().map(|&r| self.live[r].total).sum::<u64>() as f64 * c.prefill_per_token
                    }
                    StageRole::Decode => {
                        (i.running.iter().map(|&r| remaining(r)).sum::<f64>() + i.incoming as f64) * per_token
                    }
                    _ => 0.0,
                };
                InstanceView {
                    id,
                    role: i.cfg.role,
                    active: i.state == InstState::Active,
                    load,
                }
            })
            .collect();
        MonitorSnapshot {
            time: self.now,
            stage_loads,
            stage_utilization,
            instances,
            last_decision: self.last_decision,
            switch_in_progress: self.active_switch.is_some(),
        }
    }

    fn begin_switch(&mut self, d: SwitchDecision) {
        let s = self.switches.len();
        let mut rec = SwitchEventRecord::new(self.now, d);
        self.last_decision = Some(self.now);
        if d.from == StageRole::Encode {
            if self.candidates(StageRole::Encode, Some(d.instance)).is_empty() {
                rec.aborted = true;
                self.switches.push(rec);
                return;
            }
            let jobs: Vec<EncJob> = self.insts[d.instance].enc_queue.drain(..).collect();
            rec.redistributed = jobs.len();
            for j in jobs {
                let to = self
                    .assign(StageRole::Encode, Some(d.instance))
                    .expect("sibling checked above");
                self.live[j.req].shards[j.shard].instance = to;
                self.records[j.req].shards[j.shard].instance = to;
                self.insts[to].enc_queue.push_back(j);
            }
        }
        self.switches.push(rec);
        self.insts[d.instance].state = InstState::Offloading(s);
        self.active_switch = Some(s);
        self.emit(self.now, SimEventKind::RoleSwitchPhase, "offload", None, Some(d.instance));
    }

    /// Moves an offloading instance into migration once it holds no work.
    fn advance_offload(&mut self) -> bool {
        let Some(s) = self.active_switch else { return false };
        let i = self.switches[s].instance;
        if self.insts[i].state != InstState::Offloading(s) || !self.insts[i].drained() {
            return false;
        }
        let rec = &mut self.switches[s];
        rec.offload_done = Some(self.now);
        let latency = self.cfg.cost.switch_latency(rec.from, rec.to);
        self.insts[i].state = InstState::Migrating(s);
        self.events.push(self.now + latency, Payload::SwitchPhase { switch: s });
        self.emit(self.now, SimEventKind::RoleSwitchPhase, "migrate", None, Some(i));
        true
    }

    fn on_switch_phase(&mut self, s: usize) {
        let i = self.switches[s].instance;
        match self.insts[i].state {
            InstState::Migrating(x) if x == s => {
                let to = self.switches[s].to;
                let old = self.insts[i].cfg;
                let mut cfg = self.templates.for_role(to);
                cfg.tp = old.tp;
                cfg.pp = old.pp;
                if to == StageRole::Encode {
                    cfg.tp = old.gpus();
                    cfg.pp = 1;
                }
                let (mm, kv) = new_caches(self.cfg, &cfg);
                let inst = &mut self.insts[i];
                inst.cfg = cfg;
                inst.mm = mm;
                inst.kv = kv;
                inst.state = InstState::Onloading(s);
                self.switches[s].migration_done = Some(self.now);
                let delay = self.controller.map(|c| c.onload_delay).unwrap_or_default();
                self.events.push(self.now + delay, Payload::SwitchPhase { switch: s });
                self.emit(self.now, SimEventKind::RoleSwitchPhase, "onload", None, Some(i));
            }
            InstState::Onloading(x) if x == s => {
                self.insts[i].state = InstState::Active;
                self.switches[s].onload_done = Some(self.now);
                self.active_switch = None;
                self.emit(self.now, SimEventKind::RoleSwitchPhase, "active", None, Some(i));
            }
            other => unreachable!("switch phase event in state {other:?}"),
        }
    }
}
