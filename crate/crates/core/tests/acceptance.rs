//! Acceptance gate. Every criterion prints one `PASS`/`FAIL` line and the
//! binary exits non-zero if any fails. It runs without the libtest harness
//! so the verdict lines reach the terminal even when everything passes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Cursor, Read};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

use usbbridge::blockdev::{BlockImage, MemDisk};
use usbbridge::bridge::{Bridge, CopyRequest, JobState, PortStatus, TransferJob, Volume, CHUNK_BYTES};
use usbbridge::fat::{mkfs, FatError, FatVariant, MkfsOptions, SystemClock};
use usbbridge::msc_device::{DeviceFault, DriveConfig, DriveController, MassStorageDevice};
use usbbridge::msc_host::{DataDir, HostConfig, MscError, MscHandle};
use usbbridge::usb::descriptor::request;
use usbbridge::usb::{DeviceModel, PortId, SetupPacket, Speed, Stall, UsbBus};

// Pinned tolerances.
const BOT_MIN_COMMANDS: usize = 1000;
const BOT_DISK_SECTORS: u64 = 4096;
const RECOVERY_RETRIES: u32 = 1;
const FAT_FILES: usize = 50;
const FAT_MAX_FILE: usize = 1 << 20;
const FAT_RUNTIME: Duration = Duration::from_secs(60);
const COPY_JOBS: usize = 200;
const UNPLUGS: usize = 50;
const FAT16_MAX_CLUSTERS: u64 = 65524;
const FAT32_MIN_CLUSTERS: u64 = 65525;

const SEED: u64 = 0x00B1_D6E5;
const SETTLE: Duration = Duration::from_secs(30);

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

static LAST_PANIC: Mutex<String> = Mutex::new(String::new());

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("enumeration-conformance", enumeration_conformance),
        ("bot-framing", bot_framing),
        ("fault-recovery", fault_recovery),
        ("fat-interoperability", fat_interoperability),
        ("copy-fidelity", copy_fidelity),
        ("hot-unplug-safety", hot_unplug_safety),
        ("variant-boundaries", variant_boundaries),
    ];
    if std::env::args().any(|a| a == "--list") {
        for (name, _) in criteria {
            println!("{name}: test");
        }
        return;
    }
    panic::set_hook(Box::new(|info| {
        *LAST_PANIC.lock().unwrap_or_else(|e| e.into_inner()) = info.to_string();
    }));

    let mut failed = 0;
    for (name, run) in criteria {
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|_| Err(LAST_PANIC.lock().unwrap_or_else(|e| e.into_inner()).clone()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} [{secs:.1}s] {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} [{secs:.1}s] {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Shared fixtures

fn image(dir: &Path, name: &str, sectors: u64, variant: FatVariant) -> PathBuf {
    let path = dir.join(name);
    let img = BlockImage::create(&path, sectors).unwrap();
    let vol = mkfs(img, variant, &MkfsOptions::default(), Arc::new(SystemClock)).unwrap();
    drop(vol.into_inner());
    path
}

fn ready(b: &Bridge, port: PortId, path: &Path) -> Result<(), String> {
    b.attach(port, path, false).map_err(|e| format!("attach {port}: {e}"))?;
    let s = b.wait_settled(port, SETTLE);
    ensure!(s.status == PortStatus::Ready, "port {port} settled as {} ({:?})", s.status, s.error);
    Ok(())
}

fn data(len: usize, seed: u64) -> Vec<u8> {
    let mut v = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill(&mut v[..]);
    v
}

fn sha(d: &[u8]) -> [u8; 32] {
    Sha256::digest(d).into()
}

/// Every path on a raw image as read by the reference FAT implementation;
/// directories map to `None`.
fn oracle_tree(path: &Path) -> Result<BTreeMap<String, Option<Vec<u8>>>, String> {
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    let fs = fatfs::FileSystem::new(Cursor::new(bytes), fatfs::FsOptions::new())
        .map_err(|e| format!("reference mount of {}: {e}", path.display()))?;
    fn walk<T: fatfs::ReadWriteSeek>(
        dir: fatfs::Dir<'_, T>,
        prefix: &str,
        out: &mut BTreeMap<String, Option<Vec<u8>>>,
    ) -> std::io::Result<()> {
        for e in dir.iter() {
            let e = e?;
            let name = e.file_name();
            if name == "." || name == ".." {
                continue;
            }
            let path = format!("{prefix}/{name}");
            if e.is_dir() {
                out.insert(path.clone(), None);
                walk(e.to_dir(), &path, out)?;
            } else {
                let mut d = Vec::new();
                e.to_file().read_to_end(&mut d)?;
                out.insert(path, Some(d));
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(fs.root_dir(), "", &mut out).map_err(|e| e.to_string())?;
    Ok(out)
}

/// Differences between an expected tree and what the reference reads.
fn tree_mismatches(
    want: &BTreeMap<String, Option<Vec<u8>>>,
    got: &BTreeMap<String, Option<Vec<u8>>>,
) -> Vec<String> {
    let mut out = Vec::new();
    for (path, w) in want {
        match (w, got.get(path)) {
            (_, None) => out.push(format!("{path:?} missing")),
            (None, Some(Some(_))) => out.push(format!("{path:?} is a file, expected a directory")),
            (Some(_), Some(None)) => out.push(format!("{path:?} is a directory, expected a file")),
            (Some(w), Some(Some(g))) if w.len() != g.len() => {
                out.push(format!("{path:?} size {} != {}", g.len(), w.len()))
            }
            (Some(w), Some(Some(g))) if sha(w) != sha(g) => out.push(format!("{path:?} contents differ")),
            _ => {}
        }
    }
    out.extend(got.keys().filter(|p| !want.contains_key(*p)).map(|p| format!("{p:?} unexpected")));
    out
}

fn first<T: std::fmt::Debug>(v: &[T]) -> String {
    match v {
        [] => String::new(),
        [one] => format!("{one:?}"),
        [one, ..] => format!("{one:?} (+{} more)", v.len() - 1),
    }
}

fn fsck_clean(b: &Bridge, port: PortId) -> Result<(), String> {
    let f = b.fsck(port).map_err(|e| format!("fsck {port}: {e}"))?;
    ensure!(f.is_empty(), "fsck {port}: {}", first(&f.iter().map(|x| x.to_string()).collect::<Vec<_>>()));
    Ok(())
}

// ---------------------------------------------------------------------------
// Wire capture between the bus and a drive

#[derive(Clone)]
enum Wire {
    Control(SetupPacket),
    Out(Vec<u8>),
    In(Vec<u8>),
    Stall(u8),
}

impl std::fmt::Debug for Wire {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Wire::Control(s) => write!(f, "control {:#04x}/{:#04x}", s.request_type, s.request),
            Wire::Out(d) => write!(f, "OUT {} bytes", d.len()),
            Wire::In(d) => write!(f, "IN {} bytes", d.len()),
            Wire::Stall(ep) => write!(f, "stall {ep:#04x}"),
        }
    }
}

type WireLog = Arc<Mutex<Vec<Wire>>>;

/// Forwards to a drive and records every transfer it sees.
struct Sniffer {
    inner: MassStorageDevice,
    log: WireLog,
}

impl Sniffer {
    fn push(&self, w: Wire) {
        self.log.lock().unwrap().push(w);
    }
}

impl DeviceModel for Sniffer {
    fn speed(&self) -> Speed {
        self.inner.speed()
    }

    fn control(&mut self, setup: &SetupPacket, data: &[u8]) -> Result<Vec<u8>, Stall> {
        self.push(Wire::Control(*setup));
        self.inner.control(setup, data)
    }

    fn bulk_out(&mut self, endpoint: u8, data: &[u8]) -> Result<usize, Stall> {
        let r = self.inner.bulk_out(endpoint, data);
        self.push(match r {
            Ok(n) => Wire::Out(data[..n].to_vec()),
            Err(_) => Wire::Stall(endpoint),
        });
        r
    }

    fn bulk_in(&mut self, endpoint: u8, max_len: usize) -> Result<Vec<u8>, Stall> {
        let r = self.inner.bulk_in(endpoint, max_len);
        self.push(match &r {
            Ok(d) => Wire::In(d.clone()),
            Err(_) => Wire::Stall(endpoint),
        });
        r
    }

    fn on_detach(&mut self) {
        self.inner.on_detach();
    }
}

struct Rig {
    _dir: TempDir,
    bus: Arc<UsbBus>,
    ctl: DriveController,
    log: WireLog,
}

fn rig(sectors: u64) -> Rig {
    let dir = TempDir::new().unwrap();
    let img = BlockImage::create(dir.path().join("d.img"), sectors).unwrap();
    let dev = MassStorageDevice::new(img, DriveConfig::default());
    let ctl = dev.controller();
    let log = WireLog::default();
    let bus = Arc::new(UsbBus::default());
    bus.attach(PortId::A, Box::new(Sniffer { inner: dev, log: log.clone() })).unwrap();
    Rig { _dir: dir, bus, ctl, log }
}

impl Rig {
    fn probe(&self, retries: u32) -> MscHandle {
        let config = HostConfig {
            recovery_retries: retries,
            ..HostConfig::default()
        };
        let h = MscHandle::probe(self.bus.clone(), PortId::A, config).unwrap();
        self.log.lock().unwrap().clear();
        h
    }

    fn take_log(&self) -> Vec<Wire> {
        std::mem::take(&mut *self.log.lock().unwrap())
    }
}

fn le32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

/// One command as seen on the wire: CBW, optional data stage, CSW.
#[derive(Debug)]
struct Frame {
    tag: u32,
    host_len: u32,
    data_in: bool,
    cdb: Vec<u8>,
    moved: usize,
    csw_tag: u32,
    residue: u32,
    status: u8,
}

const CBW_SIGNATURE: u32 = 0x4342_5355;
const CSW_SIGNATURE: u32 = 0x5342_5355;

/// Splits a fault-free capture into frames, checking wrapper sizes and
/// signatures along the way. Control transfers between frames are skipped.
fn frames(log: &[Wire]) -> Result<Vec<Frame>, String> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < log.len() {
        let cbw = match &log[i] {
            Wire::Control(_) => {
                i += 1;
                continue;
            }
            Wire::Out(b) => b,
            other => return Err(format!("transfer {i}: expected a CBW, saw {other:?}")),
        };
        ensure!(cbw.len() == 31, "transfer {i}: CBW of {} bytes", cbw.len());
        ensure!(le32(cbw, 0) == CBW_SIGNATURE, "transfer {i}: CBW signature {:#x}", le32(cbw, 0));
        let tag = le32(cbw, 4);
        let host_len = le32(cbw, 8);
        let data_in = cbw[12] & 0x80 != 0;
        let cb_len = cbw[14] as usize;
        ensure!((1..=16).contains(&cb_len), "tag {tag}: CDB length {cb_len}");
        let cdb = cbw[15..15 + cb_len].to_vec();
        i += 1;

        let mut moved = 0;
        if host_len > 0 {
            moved = match log.get(i) {
                Some(Wire::In(d)) if data_in => d.len(),
                Some(Wire::Out(d)) if !data_in => d.len(),
                other => return Err(format!("tag {tag}: expected a data stage, saw {other:?}")),
            };
            ensure!(moved <= host_len as usize, "tag {tag}: {moved} bytes moved for a {host_len}-byte transfer");
            i += 1;
        }

        let csw = match log.get(i) {
            Some(Wire::In(c)) => c,
            other => return Err(format!("tag {tag}: expected a CSW, saw {other:?}")),
        };
        ensure!(csw.len() == 13, "tag {tag}: CSW of {} bytes", csw.len());
        ensure!(le32(csw, 0) == CSW_SIGNATURE, "tag {tag}: CSW signature {:#x}", le32(csw, 0));
        out.push(Frame {
            tag,
            host_len,
            data_in,
            cdb,
            moved,
            csw_tag: le32(csw, 4),
            residue: le32(csw, 8),
            status: csw[12],
        });
        i += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flow {
    None,
    In,
    Out,
}

const IMPLEMENTED: [u8; 8] = [0x00, 0x03, 0x12, 0x1A, 0x25, 0x28, 0x2A, 0x35];

/// Bytes a command wants to move and in which direction, from standard
/// SCSI sizes: 36-byte standard INQUIRY, 18-byte fixed sense, 4-byte mode
/// parameter header, 8-byte capacity, 512-byte blocks.
fn intent(cdb: &[u8]) -> (Flow, usize) {
    match cdb[0] {
        0x12 => (Flow::In, (be16(cdb, 3) as usize).min(36)),
        0x03 => (Flow::In, (cdb[4] as usize).min(18)),
        0x1A => (Flow::In, (cdb[4] as usize).min(4)),
        0x25 => (Flow::In, 8),
        0x28 => (Flow::In, be16(cdb, 7) as usize * 512),
        0x2A => (Flow::Out, be16(cdb, 7) as usize * 512),
        _ => (Flow::None, 0),
    }
}

/// CSW status, residue and data-in byte count the frame must show.
fn expected(f: &Frame, sectors: u64) -> (u8, u32, usize) {
    let (flow, n) = intent(&f.cdb);
    let wrong_way = match flow {
        Flow::In => !f.data_in,
        Flow::Out => f.data_in,
        Flow::None => false,
    };
    let phase = n > 0 && (wrong_way || n > f.host_len as usize);
    let rw = matches!(f.cdb[0], 0x28 | 0x2A);
    let out_of_range = rw && le32_be(&f.cdb[2..6]) as u64 + be16(&f.cdb, 7) as u64 > sectors;
    let failed = !phase && (!IMPLEMENTED.contains(&f.cdb[0]) || out_of_range);
    let in_bytes = |passed_bytes: usize| if f.data_in { passed_bytes } else { f.host_len as usize };
    if phase {
        (2, f.host_len, in_bytes(0))
    } else if failed {
        (1, f.host_len, in_bytes(0))
    } else {
        (0, f.host_len - n as u32, in_bytes(n))
    }
}

fn le32_be(b: &[u8]) -> u32 {
    u32::from_be_bytes(b.try_into().unwrap())
}

fn descriptor_chain(b: &[u8]) -> Result<Vec<&[u8]>, String> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let len = b[i] as usize;
        ensure!(len >= 2 && i + len <= b.len(), "descriptor at offset {i} has length {len}");
        out.push(&b[i..i + len]);
        i += len;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Criteria

fn enumeration_conformance() -> Outcome {
    let dir = TempDir::new().unwrap();
    let bus = UsbBus::default();
    let mut seen = Vec::new();
    for (port, name) in [(PortId::A, "a.img"), (PortId::B, "b.img")] {
        let img = BlockImage::create(dir.path().join(name), 2048).unwrap();
        bus.attach(port, Box::new(MassStorageDevice::new(img, DriveConfig::default())))
            .map_err(|e| e.to_string())?;
        let dev = bus.enumerate(port).map_err(|e| e.to_string())?;
        ensure!(dev.address != 0, "port {port} enumerated at address 0");
        ensure!(!seen.contains(&dev.address), "address {} assigned twice", dev.address);
        seen.push(dev.address);

        let (device, config) = bus.read_descriptors(dev.address).map_err(|e| e.to_string())?;
        ensure!(device.len() == 18, "device descriptor is {} bytes", device.len());
        ensure!(device[0] == 18 && device[1] == 0x01, "device descriptor header {:02x?}", &device[..2]);
        ensure!(
            u16::from_le_bytes([config[2], config[3]]) as usize == config.len(),
            "wTotalLength {} for {} bytes",
            u16::from_le_bytes([config[2], config[3]]),
            config.len()
        );

        let descs = descriptor_chain(&config)?;
        let start = descs
            .iter()
            .position(|d| d[1] == 0x04 && d[5..8] == [0x08, 0x06, 0x50])
            .ok_or("no interface with class 08/06/50")?;
        let endpoints: Vec<&[u8]> = descs[start + 1..]
            .iter()
            .take_while(|d| d[1] != 0x04)
            .filter(|d| d[1] == 0x05)
            .copied()
            .collect();
        ensure!(endpoints.len() == descs[start][4] as usize, "bNumEndpoints disagrees with the descriptors");
        let bulk: Vec<u8> = endpoints.iter().filter(|e| e[3] & 0x03 == 0x02).map(|e| e[2]).collect();
        ensure!(endpoints.len() == 2 && bulk.len() == 2, "endpoints {endpoints:02x?}");
        ensure!(
            bulk.iter().filter(|a| *a & 0x80 != 0).count() == 1,
            "bulk endpoints {bulk:02x?} are not one IN and one OUT"
        );
    }

    // Re-plugging keeps addresses unique among live devices.
    bus.detach(PortId::A).map_err(|e| e.to_string())?;
    let img = BlockImage::create(dir.path().join("c.img"), 2048).unwrap();
    bus.attach(PortId::A, Box::new(MassStorageDevice::new(img, DriveConfig::default())))
        .map_err(|e| e.to_string())?;
    let again = bus.enumerate(PortId::A).map_err(|e| e.to_string())?.address;
    ensure!(again != 0 && again != seen[1], "re-plugged drive got address {again}");
    let live = bus.addresses_in_use();
    ensure!(live.len() == 2 && live[0] != live[1], "live addresses {live:?}");
    Ok(format!("addresses {:?} then {again}", seen))
}

fn bot_framing() -> Outcome {
    let r = rig(BOT_DISK_SECTORS);
    let mut h = r.probe(RECOVERY_RETRIES);
    let first_tag = h.next_tag();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);

    let issued = BOT_MIN_COMMANDS + 100;
    for _ in 0..issued {
        let lba: u32 = if rng.gen_bool(0.1) {
            rng.gen_range(BOT_DISK_SECTORS as u32 - 4..BOT_DISK_SECTORS as u32 + 64)
        } else {
            rng.gen_range(0..BOT_DISK_SECTORS as u32 - 8)
        };
        let count: u16 = rng.gen_range(0..=8);
        let mut cdb = match rng.gen_range(0..10) {
            0 => vec![0x00, 0, 0, 0, 0, 0],
            1 => {
                let alloc: u16 = rng.gen_range(0..=64);
                vec![0x12, 0, 0, (alloc >> 8) as u8, alloc as u8, 0]
            }
            2 => vec![0x03, 0, 0, 0, rng.gen_range(0..=32), 0],
            3 => vec![0x1A, 0, 0x3F, 0, rng.gen_range(0..=8), 0],
            4 => vec![0x25, 0, 0, 0, 0, 0, 0, 0, 0, 0],
            5 | 6 => vec![0x28, 0, 0, 0, 0, 0, 0, 0, 0, 0],
            7 => vec![0x2A, 0, 0, 0, 0, 0, 0, 0, 0, 0],
            8 => vec![0x35, 0, 0, 0, 0, 0, 0, 0, 0, 0],
            _ => vec![*[0xFF, 0x1B, 0x1E, 0xA0, 0x5A].choose(&mut rng).unwrap(), 0, 0, 0, 0, 0],
        };
        if matches!(cdb[0], 0x28 | 0x2A) {
            cdb[2..6].copy_from_slice(&lba.to_be_bytes());
            cdb[7..9].copy_from_slice(&count.to_be_bytes());
        }
        let (flow, n) = intent(&cdb);
        let len = match rng.gen_range(0..6) {
            0 => n + rng.gen_range(1..600),
            1 if n > 0 => n - rng.gen_range(1..=n),
            2 => rng.gen_range(0..64),
            _ => n,
        };
        let flow = if rng.gen_bool(0.05) {
            [Flow::None, Flow::In, Flow::Out][rng.gen_range(0..3)]
        } else {
            flow
        };
        let _ = match flow {
            Flow::None => h.command(&cdb, DataDir::None, &[]),
            Flow::In => h.command(&cdb, DataDir::In(len), &[]),
            Flow::Out => h.command(&cdb, DataDir::Out, &data(len, rng.gen())),
        };
    }

    let frames = frames(&r.take_log())?;
    ensure!(frames.len() >= BOT_MIN_COMMANDS, "only {} commands reached the wire", frames.len());
    let mut tally = [0usize; 3];
    for (i, f) in frames.iter().enumerate() {
        ensure!(f.csw_tag == f.tag, "CSW tag {} answers CBW tag {}", f.csw_tag, f.tag);
        ensure!(
            f.tag == first_tag.wrapping_add(i as u32),
            "tag {} out of sequence at command {i}",
            f.tag
        );
        let (status, residue, moved) = expected(f, BOT_DISK_SECTORS);
        ensure!(
            (f.status, f.residue, f.moved) == (status, residue, moved),
            "tag {} cdb {:02x?} len {}: status/residue/moved {:?}, expected {:?}",
            f.tag,
            f.cdb,
            f.host_len,
            (f.status, f.residue, f.moved),
            (status, residue, moved)
        );
        tally[f.status as usize] += 1;
    }

    // The host's own trace agrees with the wire for every completed command.
    let wire: BTreeMap<u32, &Frame> = frames.iter().map(|f| (f.tag, f)).collect();
    let mut traced = 0;
    for t in h.trace().filter(|t| t.tag >= first_tag) {
        let f = wire.get(&t.tag).ok_or(format!("host traced tag {} never seen on the wire", t.tag))?;
        if let Some(s) = t.status {
            ensure!(s.code() == f.status && t.residue == f.residue, "host trace {t} disagrees with wire");
        }
        traced += 1;
    }
    ensure!(traced == frames.len(), "host traced {traced} of {} commands", frames.len());
    Ok(format!(
        "{} commands, {} passed / {} failed / {} phase error, all residues exact",
        frames.len(),
        tally[0],
        tally[1],
        tally[2]
    ))
}

#[derive(Debug, Clone, Copy)]
enum FaultClass {
    InvalidCbw,
    EndpointHalt,
    PhaseError,
}

fn inject(r: &Rig, h: &mut MscHandle, fault: FaultClass) {
    match fault {
        FaultClass::InvalidCbw => h.inject_invalid_cbw(),
        FaultClass::EndpointHalt => r.ctl.inject(DeviceFault::StallBulkIn),
        FaultClass::PhaseError => r.ctl.inject(DeviceFault::PhaseError),
    }
}

fn recovery_sequence(log: &[Wire]) -> Vec<(u8, u8, u16)> {
    log.iter()
        .filter_map(|w| match w {
            Wire::Control(s) => Some((s.request_type, s.request, s.index)),
            _ => None,
        })
        .collect()
}

fn fault_recovery() -> Outcome {
    let reset_then_clear = vec![
        (request::TYPE_CLASS_INTERFACE_OUT, request::BOMS_RESET, 0),
        (request::TYPE_STANDARD_ENDPOINT_OUT, request::CLEAR_FEATURE, 0x81),
        (request::TYPE_STANDARD_ENDPOINT_OUT, request::CLEAR_FEATURE, 0x02),
    ];
    let payload = data(8 * 512, 1);
    for fault in [FaultClass::InvalidCbw, FaultClass::EndpointHalt, FaultClass::PhaseError] {
        let r = rig(BOT_DISK_SECTORS);
        let mut h = r.probe(RECOVERY_RETRIES);
        MscHandle::write_blocks(&mut h, 16, 8, &payload).map_err(|e| e.to_string())?;
        r.take_log();
        let before = h.stats();
        let resets = r.ctl.resets();

        inject(&r, &mut h, fault);
        let got = h.read_blocks(16, 8).map_err(|e| format!("{fault:?}: read after fault: {e}"))?;
        ensure!(got == payload, "{fault:?}: data read through recovery differs");
        let after = h.stats();
        ensure!(after.recoveries - before.recoveries == 1, "{fault:?}: {} recoveries", after.recoveries - before.recoveries);
        ensure!(
            after.retries - before.retries == RECOVERY_RETRIES,
            "{fault:?}: {} retries consumed, configured {RECOVERY_RETRIES}",
            after.retries - before.retries
        );
        ensure!(r.ctl.resets() - resets == 1, "{fault:?}: device saw {} resets", r.ctl.resets() - resets);
        let seq = recovery_sequence(&r.take_log());
        ensure!(seq == reset_then_clear, "{fault:?}: recovery requests {seq:02x?}");

        // The next command runs clean.
        h.command(&[0x00, 0, 0, 0, 0, 0], DataDir::None, &[])
            .map_err(|e| format!("{fault:?}: command after recovery: {e}"))?;
        ensure!(h.stats().recoveries == after.recoveries, "{fault:?}: next command needed recovery");
    }

    // The budget is exact: a fault that outlasts it fails after exactly the
    // configured retries, and a larger budget absorbs it.
    for fault in [FaultClass::EndpointHalt, FaultClass::PhaseError] {
        for retries in [1u32, 2] {
            let r = rig(BOT_DISK_SECTORS);
            let mut h = r.probe(retries);
            inject(&r, &mut h, fault);
            inject(&r, &mut h, fault);
            let res = h.read_blocks(0, 1);
            let s = h.stats();
            ensure!(s.retries == retries, "{fault:?}/{retries}: {} retries consumed", s.retries);
            match retries {
                1 => ensure!(matches!(res, Err(MscError::Transport(_))), "{fault:?}: budget 1 survived two faults: {res:?}"),
                _ => ensure!(res.is_ok(), "{fault:?}: budget 2 failed on two faults: {res:?}"),
            }
            h.read_blocks(0, 1).map_err(|e| format!("{fault:?}/{retries}: command after budget: {e}"))?;
        }
    }
    Ok(format!("invalid CBW, endpoint halt, phase error each recovered with {RECOVERY_RETRIES} retry"))
}

const SHORT_CHARS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-";
const LONG_CHARS: &[char] = &[
    'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'k', 'm', 'n', 'p', 'r', 's', 't', 'w', 'x', 'z', 'A', 'B', 'Q', 'R', 'X',
    '0', '1', '7', '9', ' ', ' ', '-', '_', '+', ',', ';', '=', '[', ']', '(', ')', '.', '\'', 'é', 'ü', 'ß', 'Ω', '中',
];

fn short_name(rng: &mut ChaCha8Rng) -> String {
    fn pick(rng: &mut ChaCha8Rng, n: usize) -> String {
        (0..n).map(|_| *SHORT_CHARS.choose(rng).unwrap() as char).collect()
    }
    let base_len = rng.gen_range(1..=8);
    let base = pick(rng, base_len);
    let ext_len = rng.gen_range(0..=3);
    let ext = pick(rng, ext_len);
    if ext.is_empty() {
        base
    } else {
        format!("{base}.{ext}")
    }
}

fn long_name(rng: &mut ChaCha8Rng) -> String {
    loop {
        let len = rng.gen_range(1..=60);
        let s: String = (0..len).map(|_| *LONG_CHARS.choose(rng).unwrap()).collect();
        if !s.starts_with([' ', '.']) && !s.ends_with([' ', '.']) {
            return s;
        }
    }
}

/// Names unique per directory under case-insensitive comparison.
fn unique_name(rng: &mut ChaCha8Rng, taken: &mut BTreeSet<String>) -> String {
    loop {
        let n = if rng.gen_bool(0.4) { short_name(rng) } else { long_name(rng) };
        if taken.insert(n.to_lowercase()) {
            return n;
        }
    }
}

/// `count` files up to `max` bytes whose total stays under `budget`.
fn file_sizes(rng: &mut ChaCha8Rng, count: usize, max: usize, budget: usize) -> Vec<usize> {
    let edges = [0, 1, 511, 512, 513, max];
    loop {
        let mut sizes: Vec<usize> = edges.to_vec();
        while sizes.len() < count {
            let u: f64 = rng.gen();
            sizes.push((u * u * u * max as f64) as usize);
        }
        sizes.shuffle(rng);
        if sizes.iter().sum::<usize>() <= budget {
            return sizes;
        }
    }
}

fn fat_interoperability() -> Outcome {
    let started = Instant::now();
    let dir = TempDir::new().unwrap();
    let b = Bridge::default();
    let volumes = [
        (PortId::A, image(dir.path(), "fat16.img", 16 << 11, FatVariant::Fat16), 12 << 20),
        (PortId::B, image(dir.path(), "fat32.img", 64 << 11, FatVariant::Fat32), 40 << 20),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0xFA7);
    let mut wanted = Vec::new();
    for (port, path, budget) in &volumes {
        ready(&b, *port, path)?;
        let mut want: BTreeMap<String, Option<Vec<u8>>> = BTreeMap::new();
        let mut taken: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut dirs = vec![String::new()];
        for _ in 0..3 {
            let parent = dirs.last().unwrap().clone();
            let name = unique_name(&mut rng, taken.entry(parent.clone()).or_default());
            let p = format!("{parent}/{name}");
            b.mkdir(*port, &p).map_err(|e| format!("mkdir {p:?}: {e}"))?;
            want.insert(p.clone(), None);
            dirs.push(p);
        }
        for (i, size) in file_sizes(&mut rng, FAT_FILES, FAT_MAX_FILE, *budget).into_iter().enumerate() {
            let parent = dirs.choose(&mut rng).unwrap().clone();
            let name = unique_name(&mut rng, taken.entry(parent.clone()).or_default());
            let p = format!("{parent}/{name}");
            let body = data(size, SEED ^ i as u64 ^ (port.index() as u64 * 7919));
            b.put_file(*port, &p, &body, false).map_err(|e| format!("{port} put {p:?}: {e}"))?;
            want.insert(p, Some(body));
        }
        wanted.push(want);
    }
    for (port, ..) in &volumes {
        b.detach(*port).map_err(|e| e.to_string())?;
    }

    let mut total = 0;
    for ((port, path, _), want) in volumes.iter().zip(&wanted) {
        let got = oracle_tree(path)?;
        let bad = tree_mismatches(want, &got);
        ensure!(bad.is_empty(), "{port}: {} mismatches, {}", bad.len(), first(&bad));
        total += want.values().filter(|v| v.is_some()).count();
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < FAT_RUNTIME, "took {:.1}s, target {}s", elapsed.as_secs_f64(), FAT_RUNTIME.as_secs());
    Ok(format!("{total} files on FAT16 + FAT32 match the reference reader, 0 mismatches"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Space {
    free: u64,
    /// Clusters file sizes call for.
    files: u64,
    /// Clusters in directory chains.
    dirs: u64,
}

/// Checks that every cluster in use belongs to a file or directory and that
/// the free count agrees with a FAT scan.
fn conservation(b: &Bridge, port: PortId) -> Result<Space, String> {
    let (info, files, dirs, scanned) = b
        .with_volume(port, |v: &mut Volume| {
            let info = v.volume_info();
            let cb = info.cluster_bytes as u64;
            let (mut files, mut dirs) = (0u64, 0u64);
            if v.variant() == FatVariant::Fat32 {
                dirs += v.chain(v.bpb().root_cluster)?.len() as u64;
            }
            let mut stack = vec!["/".to_string()];
            while let Some(d) = stack.pop() {
                for e in v.list_dir(&d)? {
                    if e.is_dir() {
                        dirs += v.chain(e.first_cluster)?.len() as u64;
                        stack.push(format!("{}/{}", d.trim_end_matches('/'), e.name));
                    } else {
                        files += (e.size as u64).div_ceil(cb);
                    }
                }
            }
            Ok((info.clone(), files, dirs, v.scan_free() as u64))
        })
        .map_err(|e| format!("accounting {port}: {e}"))?;
    let used = (info.cluster_count - info.free_clusters) as u64;
    ensure!(used == files + dirs, "{port}: {used} clusters in use, {} accounted for", files + dirs);
    ensure!(
        scanned == info.free_clusters as u64,
        "{port}: free count {} but FAT scan finds {scanned}",
        info.free_clusters
    );
    Ok(Space {
        free: info.free_clusters as u64,
        files,
        dirs,
    })
}

/// Files (path relative to `root`, bytes) below `root` in a model tree.
fn model_files<'a>(model: &'a BTreeMap<String, Option<Vec<u8>>>, root: &str) -> Vec<(String, &'a Vec<u8>)> {
    let prefix = format!("{root}/");
    model
        .iter()
        .filter_map(|(p, v)| Some((p.strip_prefix(&prefix)?.to_string(), v.as_ref()?)))
        .collect()
}

fn copy_fidelity() -> Outcome {
    let dir = TempDir::new().unwrap();
    let a_path = image(dir.path(), "a.img", 32 << 11, FatVariant::Fat16);
    let b_path = image(dir.path(), "b.img", 64 << 11, FatVariant::Fat32);
    let b = Bridge::default();
    ready(&b, PortId::A, &a_path)?;
    ready(&b, PortId::B, &b_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0xC0B7);

    // Source: a pool of files and a three-level tree.
    let mut src: BTreeMap<String, Option<Vec<u8>>> = BTreeMap::new();
    let mut taken = BTreeSet::new();
    let mut pool = Vec::new();
    for (i, size) in file_sizes(&mut rng, 40, 256 << 10, 5 << 20).into_iter().enumerate() {
        let p = format!("/{}", unique_name(&mut rng, &mut taken));
        let body = data(size, SEED ^ 0xA000 ^ i as u64);
        b.put_file(PortId::A, &p, &body, false).map_err(|e| e.to_string())?;
        src.insert(p.clone(), Some(body));
        pool.push(p);
    }
    let levels = ["/Tree Root", "/Tree Root/Level Two", "/Tree Root/Level Two/level three"];
    for (depth, d) in levels.iter().enumerate() {
        b.mkdir(PortId::A, d).map_err(|e| e.to_string())?;
        src.insert(d.to_string(), None);
        for k in 0..4 {
            let p = format!("{d}/file {depth}-{k}.bin");
            let body = data(rng.gen_range(0..96 << 10), SEED ^ 0xB000 ^ (depth * 10 + k) as u64);
            b.put_file(PortId::A, &p, &body, false).map_err(|e| e.to_string())?;
            src.insert(p, Some(body));
        }
    }
    for d in ["/copies", "/trees"] {
        b.mkdir(PortId::B, d).map_err(|e| e.to_string())?;
    }
    fsck_clean(&b, PortId::A)?;

    let mut dst: BTreeMap<String, Option<Vec<u8>>> = BTreeMap::new();
    dst.insert("/copies".into(), None);
    dst.insert("/trees".into(), None);
    let mut dst_taken = BTreeSet::new();
    let mut written: Vec<String> = Vec::new();
    let tree_jobs: BTreeSet<usize> = [0, 57, 113, 171, COPY_JOBS - 1].into_iter().collect();
    let a_space = conservation(&b, PortId::A)?;
    let cluster_bytes = b.volume_info(PortId::B).map_err(|e| e.to_string())?.cluster_bytes as u64;
    let mut matched = 0;
    let mut overwrites = 0;

    for i in 0..COPY_JOBS {
        let before = conservation(&b, PortId::B)?;
        let (req, copied): (CopyRequest, Vec<(String, Vec<u8>)>);
        let mut freed = 0u64;
        if tree_jobs.contains(&i) {
            let to = format!("/trees/t{i}");
            req = CopyRequest {
                recursive: true,
                ..CopyRequest::file(PortId::A, levels[0], PortId::B, &to)
            };
            copied = model_files(&src, levels[0])
                .into_iter()
                .map(|(rel, body)| (format!("{to}/{rel}"), body.clone()))
                .collect();
            for d in levels {
                dst.insert(d.replacen(levels[0], &to, 1), None);
            }
        } else {
            let from = pool.choose(&mut rng).unwrap().clone();
            let body = src[&from].clone().unwrap();
            let overwrite = !written.is_empty() && rng.gen_bool(0.15);
            let to = if overwrite {
                overwrites += 1;
                let to = written.choose(&mut rng).unwrap().clone();
                let old = dst[&to].as_ref().unwrap().len() as u64;
                freed = old.div_ceil(cluster_bytes);
                to
            } else {
                let to = format!("/copies/{}", unique_name(&mut rng, &mut dst_taken));
                written.push(to.clone());
                to
            };
            req = CopyRequest {
                overwrite,
                ..CopyRequest::file(PortId::A, &from, PortId::B, &to)
            };
            copied = vec![(to, body)];
        }

        let job = b.copy(&req).map_err(|e| format!("job {i}: {e}"))?;
        ensure!(job.state == JobState::Done, "job {i} {req:?} ended {} ({:?})", job.state, job.error);
        ensure!(job.copied_bytes == job.total_bytes, "job {i}: {}/{} bytes", job.copied_bytes, job.total_bytes);

        let mut ok = true;
        for (p, body) in &copied {
            let got = b.read_file(PortId::B, p).map_err(|e| format!("job {i}: read {p:?}: {e}"))?;
            ok &= sha(&got) == sha(body);
            dst.insert(p.clone(), Some(body.clone()));
        }
        ensure!(ok, "job {i}: destination hash differs from source");
        matched += 1;

        // Conservation: the source is untouched and the destination lost
        // exactly the clusters the new data and directory growth needed.
        ensure!(conservation(&b, PortId::A)? == a_space, "job {i}: source space changed");
        let after = conservation(&b, PortId::B)?;
        let data_clusters: u64 = copied.iter().map(|(_, d)| (d.len() as u64).div_ceil(cluster_bytes)).sum();
        ensure!(
            after.files + freed == before.files + data_clusters,
            "job {i}: file clusters {} -> {} for {data_clusters} new ({freed} freed)",
            before.files,
            after.files
        );
        let delta = |a: u64, b: u64| a as i64 - b as i64;
        ensure!(
            delta(before.free, after.free) == delta(after.files, before.files) + delta(after.dirs, before.dirs),
            "job {i}: free {} -> {} does not match growth",
            before.free,
            after.free
        );
        fsck_clean(&b, PortId::A)?;
        fsck_clean(&b, PortId::B)?;
    }

    b.detach(PortId::A).map_err(|e| e.to_string())?;
    b.detach(PortId::B).map_err(|e| e.to_string())?;
    let bad = tree_mismatches(&src, &oracle_tree(&a_path)?);
    ensure!(bad.is_empty(), "source after copies: {}", first(&bad));
    let bad = tree_mismatches(&dst, &oracle_tree(&b_path)?);
    ensure!(bad.is_empty(), "destination versus reference reader: {}", first(&bad));
    Ok(format!(
        "{matched}/{COPY_JOBS} hash-equal ({} recursive, {overwrites} overwrites), fsck clean, space conserved",
        tree_jobs.len()
    ))
}

/// Detaches `port` when the copy engine reaches chunk `at` of the next job.
fn detach_at_chunk(b: &Bridge, port: PortId, at: usize) -> Arc<AtomicUsize> {
    let seen = Arc::new(AtomicUsize::new(0));
    let fired = Arc::new(AtomicUsize::new(0));
    let (bc, s, f) = (b.clone(), seen.clone(), fired.clone());
    b.set_chunk_hook(Some(Arc::new(move |_j: &TransferJob| {
        if s.fetch_add(1, Ordering::SeqCst) == at && bc.detach(port).is_ok() {
            f.store(1, Ordering::SeqCst);
        }
    })));
    fired
}

fn hot_unplug_safety() -> Outcome {
    let dir = TempDir::new().unwrap();
    let paths = [
        (PortId::A, image(dir.path(), "a.img", 32 << 11, FatVariant::Fat16)),
        (PortId::B, image(dir.path(), "b.img", 64 << 11, FatVariant::Fat32)),
    ];
    let b = Bridge::default();
    for (port, path) in &paths {
        ready(&b, *port, path)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0x0DE7);

    let mut files = Vec::new();
    for i in 0..8 {
        let body = data(rng.gen_range(128 << 10..=1 << 20), SEED ^ 0xD000 ^ i);
        let p = format!("/source {i}.bin");
        b.put_file(PortId::A, &p, &body, false).map_err(|e| e.to_string())?;
        files.push((p, body));
    }
    b.mkdir(PortId::A, "/tree").map_err(|e| e.to_string())?;
    b.mkdir(PortId::A, "/tree/inner").map_err(|e| e.to_string())?;
    let mut tree = Vec::new();
    for (i, rel) in ["a.bin", "inner/b.bin", "inner/c.bin"].iter().enumerate() {
        let body = data(rng.gen_range(64 << 10..300 << 10), SEED ^ 0xE000 ^ i as u64);
        b.put_file(PortId::A, &format!("/tree/{rel}"), &body, false).map_err(|e| e.to_string())?;
        tree.push((rel.to_string(), body));
    }
    b.mkdir(PortId::B, "/u").map_err(|e| e.to_string())?;

    let (mut complete, mut absent, mut src_unplugs) = (0, 0, 0);
    for i in 0..UNPLUGS {
        let recursive = rng.gen_bool(0.2);
        let to = format!("/u/run {i}");
        let (req, expect): (CopyRequest, Vec<(String, &Vec<u8>)>) = if recursive {
            let req = CopyRequest {
                recursive: true,
                ..CopyRequest::file(PortId::A, "/tree", PortId::B, &to)
            };
            (req, tree.iter().map(|(rel, d)| (format!("{to}/{rel}"), d)).collect())
        } else {
            let (p, body) = files.choose(&mut rng).unwrap();
            (CopyRequest::file(PortId::A, p, PortId::B, &to), vec![(to.clone(), body)])
        };
        let chunks: usize = expect.iter().map(|(_, d)| d.len().div_ceil(CHUNK_BYTES).max(1)).sum();
        let at = rng.gen_range(0..chunks);
        let port = if rng.gen_bool(0.5) { PortId::A } else { PortId::B };
        src_unplugs += (port == PortId::A) as usize;

        let fired = detach_at_chunk(&b, port, at);
        let job = b.copy(&req).map_err(|e| format!("run {i}: {e}"))?;
        b.set_chunk_hook(None);
        ensure!(fired.load(Ordering::SeqCst) == 1, "run {i}: detach at chunk {at}/{chunks} never happened");
        ensure!(job.state == JobState::Failed, "run {i}: job ended {} after unplug", job.state);

        let path = &paths[port.index()].1;
        ready(&b, port, path).map_err(|e| format!("run {i}: re-plug: {e}"))?;
        fsck_clean(&b, PortId::B).map_err(|e| format!("run {i} (unplug {port} at chunk {at}): {e}"))?;
        for (p, body) in &expect {
            match b.read_file(PortId::B, p) {
                Ok(got) => {
                    ensure!(sha(&got) == sha(body), "run {i}: {p:?} is partial ({} of {} bytes)", got.len(), body.len());
                    complete += 1;
                }
                Err(e) if e.code() == "not-found" => absent += 1,
                Err(e) => return Err(format!("run {i}: {p:?}: {e}")),
            }
        }
    }
    fsck_clean(&b, PortId::A)?;
    for (port, path) in &paths {
        b.detach(*port).map_err(|e| e.to_string())?;
        oracle_tree(path).map_err(|e| format!("{port} after unplugs: {e}"))?;
    }
    Ok(format!(
        "{UNPLUGS} unplugs ({src_unplugs} source, {} destination), fsck clean each time, {complete} complete / {absent} absent / 0 partial",
        UNPLUGS - src_unplugs
    ))
}

/// Cluster count from a boot sector, using the standard layout formula.
fn bpb_cluster_count(boot: &[u8]) -> u64 {
    let u16at = |o: usize| u16::from_le_bytes([boot[o], boot[o + 1]]) as u64;
    let u32at = |o: usize| le32(boot, o) as u64;
    let bps = u16at(11);
    let spc = boot[13] as u64;
    let reserved = u16at(14);
    let fats = boot[16] as u64;
    let root_sectors = (u16at(17) * 32).div_ceil(bps);
    let fat_size = if u16at(22) != 0 { u16at(22) } else { u32at(36) };
    let total = if u16at(19) != 0 { u16at(19) } else { u32at(32) };
    (total - reserved - fats * fat_size - root_sectors) / spc
}

/// Finds a sector count whose formatted cluster count is exactly `target`.
fn sectors_for(target: u64, start: u64, mut clusters_at: impl FnMut(u64) -> Option<u64>) -> Result<u64, String> {
    let mut n = start;
    for _ in 0..16 {
        match clusters_at(n) {
            Some(cc) if cc == target => return Ok(n),
            Some(cc) if cc != target => n = (n as i64 + target as i64 - cc as i64) as u64,
            _ => break,
        }
    }
    // Steps can straddle a FAT-size change; finish with a local scan.
    (n.saturating_sub(8)..n + 8)
        .find(|&m| clusters_at(m) == Some(target))
        .ok_or(format!("no size near {n} sectors gives {target} clusters"))
}

fn reference_format(sectors: u64, fat: fatfs::FatType) -> Option<Vec<u8>> {
    let mut disk = Cursor::new(vec![0u8; sectors as usize * 512]);
    let opts = fatfs::FormatVolumeOptions::new()
        .fat_type(fat)
        .bytes_per_cluster(512)
        .total_sectors(sectors as u32);
    fatfs::format_volume(&mut disk, opts).ok()?;
    Some(disk.into_inner())
}

fn own_format(sectors: u64, variant: FatVariant) -> Result<Vec<u8>, FatError> {
    let opts = MkfsOptions {
        sectors_per_cluster: Some(1),
        ..MkfsOptions::default()
    };
    let vol = mkfs(MemDisk::new(sectors), variant, &opts, Arc::new(SystemClock))?;
    Ok(vol.into_inner().into_bytes())
}

fn variant_boundaries() -> Outcome {
    let dir = TempDir::new().unwrap();
    let b = Bridge::default();
    let mut report = Vec::new();

    // Reference-formatted and self-formatted images on each side of the
    // threshold must mount as the variant their cluster count implies.
    // Searches start inside each variant's range so every probe formats.
    let sides = [
        (FAT16_MAX_CLUSTERS, fatfs::FatType::Fat16, FatVariant::Fat16, "FAT16", 400),
        (FAT32_MIN_CLUSTERS, fatfs::FatType::Fat32, FatVariant::Fat32, "FAT32", 1200),
    ];
    let mut fat32_sectors = 0;
    for (target, ref_type, variant, label, overhead) in sides {
        let start = target + overhead;
        let n_ref = sectors_for(target, start, |n| reference_format(n, ref_type).map(|d| bpb_cluster_count(&d)))?;
        let n_own = sectors_for(target, start, |n| own_format(n, variant).ok().map(|d| bpb_cluster_count(&d)))?;

        let own = own_format(n_own, variant).map_err(|e| e.to_string())?;
        let fs = fatfs::FileSystem::new(Cursor::new(own.clone()), fatfs::FsOptions::new())
            .map_err(|e| format!("reference mount of own {label}: {e}"))?;
        ensure!(fs.fat_type() == ref_type, "reference reads own {target}-cluster image as {:?}", fs.fat_type());
        drop(fs);

        for (who, bytes) in [("reference", reference_format(n_ref, ref_type).unwrap()), ("own", own)] {
            let path = dir.path().join(format!("{who}-{label}.img"));
            std::fs::write(&path, &bytes).unwrap();
            ready(&b, PortId::A, &path).map_err(|e| format!("{who} {label}: {e}"))?;
            let info = b.volume_info(PortId::A).map_err(|e| e.to_string())?;
            ensure!(
                info.variant == variant && info.cluster_count as u64 == target,
                "{who} image with {target} clusters mounted as {} with {}",
                info.variant,
                info.cluster_count
            );
            fsck_clean(&b, PortId::A)?;
            b.detach(PortId::A).map_err(|e| e.to_string())?;
        }
        report.push(format!("{label} at {target} clusters ({n_ref}/{n_own} sectors)"));
        fat32_sectors = n_own;
    }

    // With a smaller FAT, a FAT16 layout of the same size lands past the
    // threshold, so the formatter must refuse it.
    match own_format(fat32_sectors, FatVariant::Fat16) {
        Err(FatError::VariantSizeMismatch { .. }) => {}
        other => return Err(format!("FAT16 mkfs at {fat32_sectors} sectors: {:?}", other.map(|_| "formatted"))),
    }

    // FAT12-range and NTFS images are refused with distinct errors.
    let mut fat12 = Cursor::new(vec![0u8; 4096 * 512]);
    fatfs::format_volume(&mut fat12, fatfs::FormatVolumeOptions::new().fat_type(fatfs::FatType::Fat12))
        .map_err(|e| e.to_string())?;
    let mut ntfs = vec![0u8; 8192 * 512];
    ntfs[0..3].copy_from_slice(&[0xEB, 0x52, 0x90]);
    ntfs[3..11].copy_from_slice(b"NTFS    ");
    ntfs[11..13].copy_from_slice(&512u16.to_le_bytes());
    ntfs[13] = 8;
    ntfs[510] = 0x55;
    ntfs[511] = 0xAA;
    let mut errors = Vec::new();
    for (name, bytes, needle) in [("fat12", fat12.into_inner(), "FAT12"), ("ntfs", ntfs, "NTFS")] {
        let path = dir.path().join(format!("{name}.img"));
        std::fs::write(&path, bytes).unwrap();
        b.attach(PortId::B, &path, false).map_err(|e| e.to_string())?;
        let s = b.wait_settled(PortId::B, SETTLE);
        ensure!(s.status == PortStatus::Failed, "{name} image settled as {}", s.status);
        let code = s.error_code.clone().unwrap_or_default();
        let msg = s.error.clone().unwrap_or_default();
        ensure!(code == "unsupported-variant", "{name} image failed with {code}: {msg}");
        ensure!(msg.contains(needle), "{name} error does not name {needle}: {msg}");
        errors.push(msg);
        b.detach(PortId::B).map_err(|e| e.to_string())?;
    }
    ensure!(errors[0] != errors[1], "FAT12 and NTFS errors are identical");
    report.push("FAT12 and NTFS refused as unsupported-variant".into());
    Ok(report.join(", "))
}
