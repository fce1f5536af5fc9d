//! The two-port copy engine.
//!
//! A [`Bridge`] owns the USB bus, probes and mounts whatever is plugged into
//! port A or B, and runs copy jobs between the two volumes on a single
//! background worker. Jobs move data in 64 KiB chunks; between chunks the
//! worker releases both volume locks, so browsing stays responsive and a
//! detach is noticed at the next chunk boundary.
//!
//! Every state change is published as a [`BridgeEvent`] to bounded
//! per-subscriber channels. A subscriber that falls a full buffer behind is
//! dropped instead of stalling the worker.

use std::collections::{BTreeMap, VecDeque};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, Weak};
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::Serialize;
use thiserror::Error;

use crate::blockdev::{BlockError, BlockImage, DeviceError};
use crate::fat::{Clock, DirEntry, FatError, FatVolume, Finding, SystemClock, VolumeInfo};
use crate::msc_device::{DriveConfig, DriveController, MassStorageDevice};
use crate::msc_host::{HostConfig, MscError, MscHandle};
use crate::usb::{BusConfig, PortId, Speed, UsbBus, UsbError};

pub const CHUNK_BYTES: usize = 64 * 1024;

pub type Volume = FatVolume<MscHandle>;

#[derive(Clone)]
pub struct BridgeConfig {
    pub bus: BusConfig,
    pub host: HostConfig,
    pub drive: DriveConfig,
    pub chunk_bytes: usize,
    /// Events buffered per subscriber before it is disconnected.
    pub event_capacity: usize,
    pub clock: Arc<dyn Clock>,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            bus: BusConfig::default(),
            host: HostConfig::default(),
            drive: DriveConfig::default(),
            chunk_bytes: CHUNK_BYTES,
            event_capacity: 4096,
            clock: Arc::new(SystemClock),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BridgeError {
    #[error("port-not-ready: port {0} is {1}")]
    PortNotReady(PortId, PortStatus),
    #[error("port-occupied: port {0}")]
    PortOccupied(PortId),
    #[error("port-empty: port {0}")]
    PortEmpty(PortId),
    #[error("same-port: source and destination are both on port {0}")]
    SamePort(PortId),
    #[error("read-only: port {0} is write-protected")]
    ReadOnly(PortId),
    #[error("not-found: {0}")]
    NotFound(String),
    #[error("exists-no-overwrite: {0}")]
    Exists(String),
    #[error("is-a-directory: {0} (directories need the recursive flag)")]
    IsADirectory(String),
    #[error("dest-full: need {need} bytes, {free} free")]
    DestFull { need: u64, free: u64 },
    #[error("unknown-job: {0}")]
    UnknownJob(String),
    #[error("bad-request: {0}")]
    BadRequest(String),
    #[error("image: {0}")]
    Image(String),
    #[error("{0}")]
    Fs(FatError),
}

impl BridgeError {
    pub fn code(&self) -> &'static str {
        match self {
            BridgeError::PortNotReady(..) => "port-not-ready",
            BridgeError::PortOccupied(_) => "port-occupied",
            BridgeError::PortEmpty(_) => "port-empty",
            BridgeError::SamePort(_) => "same-port",
            BridgeError::ReadOnly(_) => "read-only",
            BridgeError::NotFound(_) => "not-found",
            BridgeError::Exists(_) => "exists-no-overwrite",
            BridgeError::IsADirectory(_) => "is-a-directory",
            BridgeError::DestFull { .. } => "dest-full",
            BridgeError::UnknownJob(_) => "unknown-job",
            BridgeError::BadRequest(_) => "bad-request",
            BridgeError::Image(_) => "image-error",
            BridgeError::Fs(e) => e.code(),
        }
    }
}

impl From<FatError> for BridgeError {
    fn from(e: FatError) -> Self {
        match e {
            FatError::NotFound(p) => BridgeError::NotFound(p),
            FatError::Exists(p) => BridgeError::Exists(p),
            FatError::DiskFull => BridgeError::DestFull { need: 0, free: 0 },
            other => BridgeError::Fs(other),
        }
    }
}

fn probe_code(e: &MscError) -> &'static str {
    match e {
        MscError::UnsupportedDevice(_) => "unsupported-device",
        MscError::DeviceGone => "device-gone",
        MscError::NotReadyTimeout { .. } => "not-ready-timeout",
        MscError::Io(_) => "io-failed",
        MscError::Range { .. } => "range-error",
        MscError::Transport(_) | MscError::Usb(_) => "transport-error",
        MscError::NotReady(_) => "not-ready",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PortStatus {
    Empty,
    Probing,
    Ready,
    Failed,
}

impl std::fmt::Display for PortStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PortStatus::Empty => "empty",
            PortStatus::Probing => "probing",
            PortStatus::Ready => "ready",
            PortStatus::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeviceSummary {
    pub vendor_id: u16,
    pub product_id: u16,
    pub speed: Speed,
    pub block_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VolumeSummary {
    pub variant: String,
    pub label: String,
    pub total_bytes: u64,
    pub free_bytes: u64,
    pub cluster_bytes: u32,
}

impl From<&VolumeInfo> for VolumeSummary {
    fn from(v: &VolumeInfo) -> Self {
        VolumeSummary {
            variant: v.variant.to_string(),
            label: v.label.clone(),
            total_bytes: v.total_bytes,
            free_bytes: v.free_bytes,
            cluster_bytes: v.cluster_bytes,
        }
    }
}

/// Projection of one port. `volume` is present exactly when `status` is
/// `ready`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PortState {
    pub port: PortId,
    pub status: PortStatus,
    pub image: Option<String>,
    pub read_only: bool,
    pub device: Option<DeviceSummary>,
    pub volume: Option<VolumeSummary>,
    pub error: Option<String>,
    pub error_code: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Cancelled)
    }
}

impl std::fmt::Display for JobState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            JobState::Queued => "queued",
            JobState::Running => "running",
            JobState::Done => "done",
            JobState::Failed => "failed",
            JobState::Cancelled => "cancelled",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransferJob {
    pub id: String,
    pub src_port: PortId,
    pub src_path: String,
    pub dst_port: PortId,
    /// Final destination path, after resolving a directory target.
    pub dst_path: String,
    pub overwrite: bool,
    pub recursive: bool,
    pub total_bytes: u64,
    pub copied_bytes: u64,
    pub files_total: u32,
    pub files_done: u32,
    pub state: JobState,
    pub error: Option<String>,
    pub error_code: Option<String>,
    pub created: DateTime<Utc>,
    pub started: Option<DateTime<Utc>>,
    pub finished: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "payload", rename_all = "kebab-case")]
pub enum EventPayload {
    PortChanged(PortState),
    JobProgress(TransferJob),
    JobFinished(TransferJob),
}

impl EventPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            EventPayload::PortChanged(_) => "port-changed",
            EventPayload::JobProgress(_) => "job-progress",
            EventPayload::JobFinished(_) => "job-finished",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BridgeEvent {
    /// Global publication order, starting at 1.
    pub seq: u64,
    #[serde(flatten)]
    pub payload: EventPayload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EntryView {
    pub name: String,
    pub short_name: String,
    pub is_dir: bool,
    pub size: u64,
    pub modified: Option<NaiveDateTime>,
}

impl From<&DirEntry> for EntryView {
    fn from(e: &DirEntry) -> Self {
        EntryView {
            name: e.name.clone(),
            short_name: e.short_display(),
            is_dir: e.is_dir(),
            size: e.size as u64,
            modified: e.modified,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Listing {
    pub port: PortId,
    pub path: String,
    pub entries: Vec<EntryView>,
    pub volume: VolumeSummary,
}

/// Request for [`Bridge::start_copy`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CopyRequest {
    pub src_port: PortId,
    pub src_path: String,
    pub dst_port: PortId,
    pub dst_path: String,
    pub overwrite: bool,
    pub recursive: bool,
}

impl CopyRequest {
    pub fn file(src_port: PortId, src_path: &str, dst_port: PortId, dst_path: &str) -> Self {
        CopyRequest {
            src_port,
            src_path: src_path.to_string(),
            dst_port,
            dst_path: dst_path.to_string(),
            overwrite: false,
            recursive: false,
        }
    }
}

/// Called by the worker after every chunk, with no locks held.
pub type ChunkHook = Arc<dyn Fn(&TransferJob) + Send + Sync>;

struct PortSlot {
    status: PortStatus,
    /// Bumped on every attach and detach; a job or probe holding a stale
    /// value knows its device is gone.
    generation: u64,
    image: Option<PathBuf>,
    read_only: bool,
    error: Option<(String, String)>,
    volume: Option<Arc<Mutex<Volume>>>,
    summary: Option<VolumeSummary>,
    device: Option<DeviceSummary>,
    controller: Option<DriveController>,
}

impl PortSlot {
    fn empty() -> Self {
        PortSlot {
            status: PortStatus::Empty,
            generation: 0,
            image: None,
            read_only: false,
            error: None,
            volume: None,
            summary: None,
            device: None,
            controller: None,
        }
    }

    fn snapshot(&self, port: PortId) -> PortState {
        PortState {
            port,
            status: self.status,
            image: self.image.as_ref().map(|p| p.display().to_string()),
            read_only: self.read_only,
            device: self.device.clone(),
            volume: self.summary.clone(),
            error: self.error.as_ref().map(|e| e.1.clone()),
            error_code: self.error.as_ref().map(|e| e.0.clone()),
        }
    }
}

enum Item {
    Dir { dst: String },
    File { src: String, dst: String, size: u64 },
}

struct JobRecord {
    job: TransferJob,
    cancel: Arc<AtomicBool>,
    plan: Vec<Item>,
}

#[derive(Default)]
struct JobTable {
    records: BTreeMap<u64, JobRecord>,
    queue: VecDeque<u64>,
    next: u64,
}

#[derive(Default)]
struct Hub {
    seq: u64,
    subscribers: Vec<SyncSender<BridgeEvent>>,
    dropped: u64,
}

struct Inner {
    bus: Arc<UsbBus>,
    config: BridgeConfig,
    ports: [Mutex<PortSlot>; 2],
    jobs: Mutex<JobTable>,
    work: Condvar,
    hub: Mutex<Hub>,
    hook: Mutex<Option<ChunkHook>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn job_key(id: &str) -> Option<u64> {
    id.strip_prefix("job-")?.parse().ok()
}

#[derive(Clone)]
pub struct Bridge {
    inner: Arc<Inner>,
}

impl Default for Bridge {
    fn default() -> Self {
        Bridge::new(BridgeConfig::default())
    }
}

impl Bridge {
    pub fn new(config: BridgeConfig) -> Self {
        let inner = Arc::new(Inner {
            bus: Arc::new(UsbBus::new(config.bus)),
            config,
            ports: [Mutex::new(PortSlot::empty()), Mutex::new(PortSlot::empty())],
            jobs: Mutex::new(JobTable::default()),
            work: Condvar::new(),
            hub: Mutex::new(Hub::default()),
            hook: Mutex::new(None),
        });
        let weak = Arc::downgrade(&inner);
        thread::Builder::new()
            .name("bridge-worker".into())
            .spawn(move || worker(weak))
            .expect("spawn bridge worker");
        Bridge { inner }
    }

    pub fn bus(&self) -> &Arc<UsbBus> {
        &self.inner.bus
    }

    pub fn config(&self) -> &BridgeConfig {
        &self.inner.config
    }

    pub fn subscribe(&self) -> Receiver<BridgeEvent> {
        let (tx, rx) = sync_channel(self.inner.config.event_capacity.max(1));
        lock(&self.inner.hub).subscribers.push(tx);
        rx
    }

    /// Subscribers disconnected so far for falling behind.
    pub fn dropped_subscribers(&self) -> u64 {
        lock(&self.inner.hub).dropped
    }

    pub fn set_chunk_hook(&self, hook: Option<ChunkHook>) {
        *lock(&self.inner.hook) = hook;
    }

    pub fn port(&self, port: PortId) -> PortState {
        lock(&self.inner.ports[port.index()]).snapshot(port)
    }

    pub fn ports(&self) -> Vec<PortState> {
        PortId::ALL.iter().map(|&p| self.port(p)).collect()
    }

    pub fn generation(&self, port: PortId) -> u64 {
        lock(&self.inner.ports[port.index()]).generation
    }

    /// Fault-injection handle for the drive plugged into `port`.
    pub fn controller(&self, port: PortId) -> Option<DriveController> {
        lock(&self.inner.ports[port.index()]).controller.clone()
    }

    /// Plugs the image at `path` into `port` as a flash drive. Probing and
    /// mounting continue in the background; watch for `port-changed`.
    pub fn attach(&self, port: PortId, path: &Path, read_only: bool) -> Result<PortState, BridgeError> {
        if lock(&self.inner.ports[port.index()]).status != PortStatus::Empty {
            return Err(BridgeError::PortOccupied(port));
        }
        let image = BlockImage::open(path, read_only).map_err(|e| match e {
            BlockError::Io(io) if io.kind() == io::ErrorKind::NotFound => {
                BridgeError::NotFound(path.display().to_string())
            }
            other => BridgeError::Image(other.to_string()),
        })?;
        let dev = MassStorageDevice::new(image, self.inner.config.drive.clone());
        self.attach_device(port, dev, Some(path.to_path_buf()), read_only)
    }

    /// Plugs an already-built drive into `port`.
    pub fn attach_device(
        &self,
        port: PortId,
        dev: MassStorageDevice,
        image: Option<PathBuf>,
        read_only: bool,
    ) -> Result<PortState, BridgeError> {
        let inner = &self.inner;
        let controller = dev.controller();
        let (gen, snap) = {
            let mut slot = lock(&inner.ports[port.index()]);
            if slot.status != PortStatus::Empty {
                return Err(BridgeError::PortOccupied(port));
            }
            inner.bus.attach(port, Box::new(dev)).map_err(|e| match e {
                UsbError::PortOccupied(p) => BridgeError::PortOccupied(p),
                other => BridgeError::Image(other.to_string()),
            })?;
            slot.generation += 1;
            slot.status = PortStatus::Probing;
            slot.image = image;
            slot.read_only = read_only;
            slot.error = None;
            slot.controller = Some(controller);
            let snap = slot.snapshot(port);
            inner.publish(EventPayload::PortChanged(snap.clone()));
            (slot.generation, snap)
        };
        let inner = self.inner.clone();
        thread::Builder::new()
            .name(format!("probe-{port}"))
            .spawn(move || inner.finish_probe(port, gen))
            .expect("spawn probe thread");
        Ok(snap)
    }

    /// Unplugs `port`. Any job touching it fails with `device-gone` at its
    /// next chunk boundary.
    pub fn detach(&self, port: PortId) -> Result<PortState, BridgeError> {
        let inner = &self.inner;
        let mut slot = lock(&inner.ports[port.index()]);
        if slot.status == PortStatus::Empty {
            return Err(BridgeError::PortEmpty(port));
        }
        let _ = inner.bus.detach(port);
        *slot = PortSlot {
            generation: slot.generation + 1,
            ..PortSlot::empty()
        };
        let snap = slot.snapshot(port);
        inner.publish(EventPayload::PortChanged(snap.clone()));
        Ok(snap)
    }

    /// Polls until `port` leaves the probing state.
    pub fn wait_settled(&self, port: PortId, timeout: Duration) -> PortState {
        let deadline = Instant::now() + timeout;
        loop {
            let s = self.port(port);
            if s.status != PortStatus::Probing || Instant::now() >= deadline {
                return s;
            }
            thread::sleep(Duration::from_millis(1));
        }
    }

    fn volume(&self, port: PortId) -> Result<(Arc<Mutex<Volume>>, u64), BridgeError> {
        self.inner.volume(port)
    }

    /// Runs `f` against the mounted volume on `port` and refreshes the
    /// port's free-space figure afterwards.
    pub fn with_volume<R>(
        &self,
        port: PortId,
        f: impl FnOnce(&mut Volume) -> Result<R, FatError>,
    ) -> Result<R, BridgeError> {
        let (vol, gen) = self.volume(port)?;
        let (out, info) = {
            let mut v = lock(&vol);
            let out = f(&mut v);
            (out, v.volume_info())
        };
        self.inner.update_summary(port, gen, &info);
        Ok(out?)
    }

    pub fn browse(&self, port: PortId, path: &str) -> Result<Listing, BridgeError> {
        let path = normalize(path)?;
        let (entries, info) = self.with_volume(port, |v| {
            let entries = v.list_dir(&path)?;
            Ok((entries, v.volume_info()))
        })?;
        Ok(Listing {
            port,
            path,
            entries: entries.iter().map(EntryView::from).collect(),
            volume: VolumeSummary::from(&info),
        })
    }

    pub fn volume_info(&self, port: PortId) -> Result<VolumeInfo, BridgeError> {
        self.with_volume(port, |v| Ok(v.volume_info()))
    }

    pub fn put_file(&self, port: PortId, path: &str, data: &[u8], overwrite: bool) -> Result<DirEntry, BridgeError> {
        let path = normalize(path)?;
        self.with_volume(port, |v| v.write_file(&path, data, overwrite))
    }

    pub fn read_file(&self, port: PortId, path: &str) -> Result<Vec<u8>, BridgeError> {
        let path = normalize(path)?;
        self.with_volume(port, |v| v.read_file(&path))
    }

    pub fn mkdir(&self, port: PortId, path: &str) -> Result<DirEntry, BridgeError> {
        let path = normalize(path)?;
        self.with_volume(port, |v| v.create_dir(&path))
    }

    pub fn remove(&self, port: PortId, path: &str) -> Result<(), BridgeError> {
        let path = normalize(path)?;
        self.with_volume(port, |v| v.remove_tree(&path))
    }

    /// Consistency check of the live volume on `port`.
    pub fn fsck(&self, port: PortId) -> Result<Vec<Finding>, BridgeError> {
        self.with_volume(port, |v| v.check())
    }

    /// Validates `req`, plans the transfer and queues it.
    pub fn start_copy(&self, req: &CopyRequest) -> Result<TransferJob, BridgeError> {
        if req.src_port == req.dst_port {
            return Err(BridgeError::SamePort(req.src_port));
        }
        let src_path = normalize(&req.src_path)?;
        let dst_path = normalize(&req.dst_path)?;
        if src_path == "/" {
            return Err(BridgeError::BadRequest("the root directory cannot be copied".into()));
        }
        let (src, _) = self.volume(req.src_port)?;
        let (dst, _) = self.volume(req.dst_port)?;

        let (src_entry, mut src_items) = {
            let mut v = lock(&src);
            let entry = v.stat(&src_path)?;
            if entry.is_dir() && !req.recursive {
                return Err(BridgeError::IsADirectory(src_path));
            }
            let mut items = Vec::new();
            if entry.is_dir() {
                walk(&mut v, &src_path, "", &mut items)?;
            }
            (entry, items)
        };

        let mut d = lock(&dst);
        if d.is_read_only() {
            return Err(BridgeError::ReadOnly(req.dst_port));
        }
        let target = match d.stat(&dst_path) {
            Ok(e) if e.is_dir() => join(&dst_path, &src_entry.name),
            Ok(_) => dst_path.clone(),
            Err(FatError::NotFound(_)) => {
                match d.stat(parent(&dst_path)) {
                    Ok(p) if p.is_dir() => {}
                    _ => return Err(BridgeError::NotFound(parent(&dst_path).to_string())),
                }
                dst_path.clone()
            }
            Err(e) => return Err(e.into()),
        };
        let existing = match d.stat(&target) {
            Ok(e) => Some(e),
            Err(FatError::NotFound(_)) => None,
            Err(e) => return Err(e.into()),
        };
        if let Some(e) = &existing {
            if !req.overwrite {
                return Err(BridgeError::Exists(target));
            }
            if e.is_dir() != src_entry.is_dir() {
                return Err(BridgeError::Exists(target));
            }
        }

        let mut plan = Vec::new();
        if src_entry.is_dir() {
            plan.push(Item::Dir { dst: target.clone() });
            for it in src_items.drain(..) {
                plan.push(match it {
                    Item::Dir { dst } => Item::Dir {
                        dst: format!("{target}{dst}"),
                    },
                    Item::File { src, dst, size } => Item::File {
                        src,
                        dst: format!("{target}{dst}"),
                        size,
                    },
                });
            }
        } else {
            plan.push(Item::File {
                src: src_path.clone(),
                dst: target.clone(),
                size: src_entry.size as u64,
            });
        }
        // Directories first, so the final commit of the last file is the
        // last thing a job does.
        plan.sort_by_key(|it| matches!(it, Item::File { .. }));

        let cb = d.cluster_bytes() as u64;
        let mut need = 0u64;
        let mut reclaim = 0u64;
        let mut total = 0u64;
        let mut files = 0u32;
        for it in &plan {
            match it {
                Item::Dir { dst } => {
                    if !matches!(d.stat(dst), Ok(e) if e.is_dir()) {
                        need += 1;
                    }
                }
                Item::File { dst, size, .. } => {
                    total += size;
                    files += 1;
                    need += d.clusters_for(*size);
                    if let Ok(e) = d.stat(dst) {
                        if !e.is_dir() {
                            reclaim += d.clusters_for(e.size as u64);
                        }
                    }
                }
            }
        }
        let free = d.free_clusters() as u64 + reclaim;
        if need > free {
            return Err(BridgeError::DestFull {
                need: need * cb,
                free: free * cb,
            });
        }
        drop(d);

        let inner = &self.inner;
        let mut t = lock(&inner.jobs);
        t.next += 1;
        let key = t.next;
        let job = TransferJob {
            id: format!("job-{key}"),
            src_port: req.src_port,
            src_path,
            dst_port: req.dst_port,
            dst_path: target,
            overwrite: req.overwrite,
            recursive: req.recursive,
            total_bytes: total,
            copied_bytes: 0,
            files_total: files,
            files_done: 0,
            state: JobState::Queued,
            error: None,
            error_code: None,
            created: Utc::now(),
            started: None,
            finished: None,
        };
        t.records.insert(
            key,
            JobRecord {
                job: job.clone(),
                cancel: Arc::new(AtomicBool::new(false)),
                plan,
            },
        );
        t.queue.push_back(key);
        inner.publish(EventPayload::JobProgress(job.clone()));
        inner.work.notify_all();
        Ok(job)
    }

    pub fn job(&self, id: &str) -> Result<TransferJob, BridgeError> {
        let key = job_key(id).ok_or_else(|| BridgeError::UnknownJob(id.to_string()))?;
        lock(&self.inner.jobs)
            .records
            .get(&key)
            .map(|r| r.job.clone())
            .ok_or_else(|| BridgeError::UnknownJob(id.to_string()))
    }

    pub fn jobs(&self) -> Vec<TransferJob> {
        lock(&self.inner.jobs).records.values().map(|r| r.job.clone()).collect()
    }

    /// Cancels a queued job at once, or a running one at its next chunk
    /// boundary. Terminal jobs are returned unchanged.
    pub fn cancel(&self, id: &str) -> Result<TransferJob, BridgeError> {
        let key = job_key(id).ok_or_else(|| BridgeError::UnknownJob(id.to_string()))?;
        let inner = &self.inner;
        let mut t = lock(&inner.jobs);
        let t = &mut *t;
        let rec = t
            .records
            .get_mut(&key)
            .ok_or_else(|| BridgeError::UnknownJob(id.to_string()))?;
        match rec.job.state {
            JobState::Queued => {
                t.queue.retain(|&k| k != key);
                rec.plan.clear();
                rec.job.state = JobState::Cancelled;
                rec.job.finished = Some(Utc::now());
                inner.publish(EventPayload::JobFinished(rec.job.clone()));
            }
            JobState::Running => rec.cancel.store(true, Ordering::SeqCst),
            _ => {}
        }
        Ok(rec.job.clone())
    }

    /// Polls until the job reaches a terminal state or `timeout` passes.
    pub fn wait_job(&self, id: &str, timeout: Duration) -> Result<TransferJob, BridgeError> {
        let deadline = Instant::now() + timeout;
        loop {
            let j = self.job(id)?;
            if j.state.is_terminal() || Instant::now() >= deadline {
                return Ok(j);
            }
            thread::sleep(Duration::from_millis(1));
        }
    }

    /// Starts a copy and waits for it to finish.
    pub fn copy(&self, req: &CopyRequest) -> Result<TransferJob, BridgeError> {
        let job = self.start_copy(req)?;
        self.wait_job(&job.id, Duration::from_secs(3600))
    }
}

fn normalize(path: &str) -> Result<String, BridgeError> {
    if !path.starts_with('/') {
        return Err(BridgeError::BadRequest(format!("path {path:?} is not absolute")));
    }
    let trimmed = path.trim_end_matches('/');
    Ok(if trimmed.is_empty() { "/".into() } else { trimmed.into() })
}

fn join(dir: &str, name: &str) -> String {
    if dir == "/" {
        format!("/{name}")
    } else {
        format!("{dir}/{name}")
    }
}

fn parent(path: &str) -> &str {
    match path.rfind('/') {
        Some(0) | None => "/",
        Some(i) => &path[..i],
    }
}

/// Collects everything below `src`; destination paths are relative to the
/// copied directory, starting with `/`.
fn walk(v: &mut Volume, src: &str, rel: &str, out: &mut Vec<Item>) -> Result<(), FatError> {
    for e in v.list_dir(src)? {
        let s = join(src, &e.name);
        let r = format!("{rel}/{}", e.name);
        if e.is_dir() {
            out.push(Item::Dir { dst: r.clone() });
            walk(v, &s, &r, out)?;
        } else {
            out.push(Item::File {
                src: s,
                dst: r,
                size: e.size as u64,
            });
        }
    }
    Ok(())
}

enum Stop {
    Cancelled,
    Failed { code: String, message: String },
}

impl From<FatError> for Stop {
    fn from(e: FatError) -> Self {
        let code = match &e {
            FatError::DiskFull => "dest-full",
            other => other.code(),
        };
        Stop::Failed {
            code: code.into(),
            message: e.to_string(),
        }
    }
}

impl From<BridgeError> for Stop {
    fn from(e: BridgeError) -> Self {
        Stop::Failed {
            code: e.code().into(),
            message: e.to_string(),
        }
    }
}

fn gone() -> Stop {
    Stop::from(FatError::Io(DeviceError::Gone))
}

struct Live {
    port: PortId,
    vol: Arc<Mutex<Volume>>,
    gen: u64,
}

impl Inner {
    fn publish(&self, payload: EventPayload) {
        let mut hub = lock(&self.hub);
        hub.seq += 1;
        let ev = BridgeEvent { seq: hub.seq, payload };
        let before = hub.subscribers.len();
        hub.subscribers.retain(|tx| match tx.try_send(ev.clone()) {
            Ok(()) => true,
            Err(TrySendError::Full(_)) | Err(TrySendError::Disconnected(_)) => false,
        });
        hub.dropped += (before - hub.subscribers.len()) as u64;
    }

    fn volume(&self, port: PortId) -> Result<(Arc<Mutex<Volume>>, u64), BridgeError> {
        let slot = lock(&self.ports[port.index()]);
        match &slot.volume {
            Some(v) => Ok((v.clone(), slot.generation)),
            None => Err(BridgeError::PortNotReady(port, slot.status)),
        }
    }

    fn alive(&self, l: &Live) -> bool {
        lock(&self.ports[l.port.index()]).generation == l.gen
    }

    fn update_summary(&self, port: PortId, gen: u64, info: &VolumeInfo) {
        let mut slot = lock(&self.ports[port.index()]);
        if slot.generation != gen || slot.status != PortStatus::Ready {
            return;
        }
        let s = Some(VolumeSummary::from(info));
        if slot.summary != s {
            slot.summary = s;
            self.publish(EventPayload::PortChanged(slot.snapshot(port)));
        }
    }

    fn finish_probe(&self, port: PortId, gen: u64) {
        let mounted = MscHandle::probe(self.bus.clone(), port, self.config.host)
            .map_err(|e| (probe_code(&e).to_string(), e.to_string()))
            .and_then(|h| {
                let e = h.device();
                let cap = h.capacity().map(|c| c.blocks()).unwrap_or(0);
                let summary = DeviceSummary {
                    vendor_id: e.descriptors.device.vendor_id,
                    product_id: e.descriptors.device.product_id,
                    speed: e.speed,
                    block_count: cap,
                };
                FatVolume::mount_with_clock(h, self.config.clock.clone())
                    .map(|v| (v, summary))
                    .map_err(|e| (e.code().to_string(), e.to_string()))
            });
        let mut slot = lock(&self.ports[port.index()]);
        if slot.generation != gen {
            return;
        }
        match mounted {
            Ok((v, dev)) => {
                slot.read_only |= v.is_read_only();
                slot.summary = Some(VolumeSummary::from(&v.volume_info()));
                slot.device = Some(dev);
                slot.volume = Some(Arc::new(Mutex::new(v)));
                slot.status = PortStatus::Ready;
            }
            Err(e) => {
                slot.error = Some(e);
                slot.status = PortStatus::Failed;
            }
        }
        self.publish(EventPayload::PortChanged(slot.snapshot(port)));
    }

    /// Adds copied bytes and finished files to the job and publishes progress.
    fn progress(&self, key: u64, bytes: u64, files: u32) -> TransferJob {
        let mut t = lock(&self.jobs);
        let rec = t.records.get_mut(&key).expect("running job record");
        if bytes > 0 || files > 0 {
            rec.job.copied_bytes += bytes;
            rec.job.files_done += files;
            self.publish(EventPayload::JobProgress(rec.job.clone()));
        }
        rec.job.clone()
    }

    fn chunk_done(&self, key: u64, bytes: u64) {
        let snap = self.progress(key, bytes, 0);
        let hook = lock(&self.hook).clone();
        if let Some(h) = hook {
            h(&snap);
        }
    }

    fn run(&self, key: u64) {
        let (plan, cancel, job) = {
            let mut t = lock(&self.jobs);
            let Some(rec) = t.records.get_mut(&key) else { return };
            if rec.job.state != JobState::Queued {
                return;
            }
            rec.job.state = JobState::Running;
            rec.job.started = Some(Utc::now());
            self.publish(EventPayload::JobProgress(rec.job.clone()));
            (std::mem::take(&mut rec.plan), rec.cancel.clone(), rec.job.clone())
        };

        let mut touched = Vec::new();
        let outcome = (|| {
            let (vol, gen) = self.volume(job.src_port)?;
            let src = Live { port: job.src_port, vol, gen };
            let (vol, gen) = self.volume(job.dst_port)?;
            let dst = Live { port: job.dst_port, vol, gen };
            touched.push((src.port, src.vol.clone(), src.gen));
            touched.push((dst.port, dst.vol.clone(), dst.gen));
            self.execute(key, &job, &plan, &cancel, &src, &dst)
        })();

        for (port, vol, gen) in touched {
            if lock(&self.ports[port.index()]).generation == gen {
                let info = lock(&vol).volume_info();
                self.update_summary(port, gen, &info);
            }
        }

        let mut t = lock(&self.jobs);
        let rec = t.records.get_mut(&key).expect("running job record");
        rec.job.finished = Some(Utc::now());
        match outcome {
            Ok(tail) => {
                rec.job.copied_bytes += tail;
                rec.job.files_done = rec.job.files_total;
                rec.job.state = JobState::Done;
            }
            Err(Stop::Cancelled) => rec.job.state = JobState::Cancelled,
            Err(Stop::Failed { code, message }) => {
                rec.job.state = JobState::Failed;
                rec.job.error = Some(message);
                rec.job.error_code = Some(code);
            }
        }
        self.publish(EventPayload::JobFinished(rec.job.clone()));
    }

    fn execute(
        &self,
        key: u64,
        job: &TransferJob,
        plan: &[Item],
        cancel: &AtomicBool,
        src: &Live,
        dst: &Live,
    ) -> Result<u64, Stop> {
        let mut created: Vec<String> = Vec::new();
        let result = self.copy_items(key, job, plan, cancel, src, dst, &mut created);
        if result.is_err() && self.alive(dst) {
            let mut v = lock(&dst.vol);
            for path in created.iter().rev() {
                let _ = v.remove_tree(path);
            }
        }
        result
    }

    #[allow(clippy::too_many_arguments)]
    fn copy_items(
        &self,
        key: u64,
        job: &TransferJob,
        plan: &[Item],
        cancel: &AtomicBool,
        src: &Live,
        dst: &Live,
        created: &mut Vec<String>,
    ) -> Result<u64, Stop> {
        let check = || -> Result<(), Stop> {
            if cancel.load(Ordering::SeqCst) {
                return Err(Stop::Cancelled);
            }
            if !self.alive(src) || !self.alive(dst) {
                return Err(gone());
            }
            Ok(())
        };
        let mut buf = vec![0u8; self.config.chunk_bytes.max(512)];
        for (i, item) in plan.iter().enumerate() {
            check()?;
            match item {
                Item::Dir { dst: path } => {
                    let mut v = lock(&dst.vol);
                    match v.stat(path) {
                        Ok(e) if e.is_dir() => {}
                        Ok(_) => return Err(FatError::Exists(path.clone()).into()),
                        Err(FatError::NotFound(_)) => {
                            v.create_dir(path)?;
                            created.push(path.clone());
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
                Item::File { src: from, dst: to, .. } => {
                    let mut reader = lock(&src.vol).open(from)?;
                    let (mut writer, existed) = {
                        let mut v = lock(&dst.vol);
                        let existed = v.exists(to)?;
                        (v.create_writer(to, job.overwrite)?, existed)
                    };
                    let mut held = 0u64;
                    let step = (|| -> Result<(), Stop> {
                        loop {
                            check()?;
                            let n = lock(&src.vol).read_chunk(&mut reader, &mut buf)?;
                            if n == 0 {
                                return Ok(());
                            }
                            lock(&dst.vol).write_chunk(&mut writer, &buf[..n])?;
                            // The last chunk of a file counts once it is committed.
                            let counted = if reader.remaining() == 0 {
                                held = n as u64;
                                0
                            } else {
                                n as u64
                            };
                            self.chunk_done(key, counted);
                        }
                    })();
                    let committed = match step.and_then(|()| check()) {
                        Ok(()) => lock(&dst.vol).commit(writer).map(drop).map_err(Stop::from),
                        Err(e) => {
                            lock(&dst.vol).abort(writer);
                            Err(e)
                        }
                    };
                    committed?;
                    if !existed {
                        created.push(to.clone());
                    }
                    if i + 1 == plan.len() {
                        // Counted when the job is marked done.
                        return Ok(held);
                    }
                    self.progress(key, held, 1);
                }
            }
        }
        Ok(0)
    }
}

fn worker(weak: Weak<Inner>) {
    loop {
        let Some(inner) = weak.upgrade() else { return };
        let next = {
            let t = lock(&inner.jobs);
            let (mut t, _) = inner
                .work
                .wait_timeout_while(t, Duration::from_millis(100), |t| t.queue.is_empty())
                .unwrap_or_else(|p| p.into_inner());
            t.queue.pop_front()
        };
        if let Some(key) = next {
            inner.run(key);
        }
    }
}
