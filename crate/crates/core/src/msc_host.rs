//! Host-side Bulk-Only mass-storage driver.
//!
//! [`MscHandle::probe`] enumerates the device on a port, checks that it is
//! a SCSI transparent / Bulk-Only drive and brings it to the ready state.
//! After that the handle is a [`BlockDevice`]: block reads and writes are
//! framed as CBW, data stage and CSW, split into commands of at most
//! [`HostConfig::max_blocks_per_command`] blocks.
//!
//! Error handling follows the transport's rules. A failed command triggers
//! an automatic REQUEST SENSE. A stalled endpoint, an unreadable CSW or a
//! phase error triggers reset recovery (mass storage reset, then clear-halt
//! on bulk IN and bulk OUT) and one retry.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::blockdev::{check_range, BlockDevice, DeviceError, SECTOR_SIZE};
use crate::msc_device::bot::{CommandBlockWrapper, CommandStatusWrapper, CswStatus, CSW_LEN};
use crate::msc_device::scsi::{self, opcode, SenseKey, SenseState};
use crate::usb::descriptor::{
    Direction, SetupPacket, TransferType, CLASS_MASS_STORAGE, PROTOCOL_BULK_ONLY, SUBCLASS_SCSI,
};
use crate::usb::{EnumeratedDevice, PortId, UsbBus, UsbError};

const TRACE_CAP: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HostConfig {
    /// TEST UNIT READY attempts during probe.
    pub tur_attempts: u32,
    /// Retries after reset recovery.
    pub recovery_retries: u32,
    pub max_blocks_per_command: u16,
}

impl Default for HostConfig {
    fn default() -> Self {
        HostConfig {
            tur_attempts: 3,
            recovery_retries: 1,
            max_blocks_per_command: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MscError {
    #[error("unsupported-device: {0}")]
    UnsupportedDevice(String),
    #[error("device-gone")]
    DeviceGone,
    #[error("not-ready-timeout after {attempts} attempts")]
    NotReadyTimeout { attempts: u32 },
    #[error("io-failed: {0}")]
    Io(SenseState),
    #[error("range-error: lba {lba} count {count} beyond capacity {capacity}")]
    Range { lba: u64, count: u64, capacity: u64 },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("handle not ready ({0:?})")]
    NotReady(HandleState),
    #[error(transparent)]
    Usb(UsbError),
}

impl From<UsbError> for MscError {
    fn from(e: UsbError) -> Self {
        match e {
            UsbError::DeviceGone | UsbError::NoSuchDevice(_) | UsbError::PortEmpty(_) => {
                MscError::DeviceGone
            }
            other => MscError::Usb(other),
        }
    }
}

impl From<MscError> for DeviceError {
    fn from(e: MscError) -> Self {
        match e {
            MscError::DeviceGone => DeviceError::Gone,
            MscError::Range {
                lba,
                count,
                capacity,
            } => DeviceError::Range {
                lba,
                count,
                block_count: capacity,
            },
            MscError::Io(s) if s.key == SenseKey::DataProtect => DeviceError::ReadOnly,
            other => DeviceError::Io(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandleState {
    Probing,
    Ready,
    Error,
    Gone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capacity {
    pub last_lba: u32,
    pub block_length: u32,
}

impl Capacity {
    pub fn blocks(&self) -> u64 {
        self.last_lba as u64 + 1
    }
}

/// One host trace line: `port tag opcode lba count status residue retries`.
/// `status` is `-` when no CSW arrived.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostTrace {
    pub port: PortId,
    pub tag: u32,
    pub opcode: u8,
    pub lba: u32,
    pub count: u16,
    pub status: Option<CswStatus>,
    pub residue: u32,
    pub retries: u32,
}

impl fmt::Display for HostTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = self
            .status
            .map_or_else(|| "-".to_string(), |s| s.code().to_string());
        write!(
            f,
            "{} {} {:#04x} {} {} {} {} {}",
            self.port, self.tag, self.opcode, self.lba, self.count, status, self.residue, self.retries
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataDir {
    None,
    In(usize),
    Out,
}

/// Failure of a single CBW/data/CSW exchange that calls for reset recovery.
#[derive(Debug)]
enum Attempt {
    Recover(String),
    Fatal(MscError),
}

impl From<UsbError> for Attempt {
    fn from(e: UsbError) -> Self {
        match e {
            UsbError::EndpointHalted(ep) => Attempt::Recover(format!("endpoint {ep:#04x} halted")),
            other => Attempt::Fatal(other.into()),
        }
    }
}

/// Counters a caller can audit after faults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HostStats {
    pub commands: u64,
    pub recoveries: u32,
    pub retries: u32,
    pub unit_attention_retries: u32,
}

pub struct MscHandle {
    bus: Arc<UsbBus>,
    device: EnumeratedDevice,
    interface: u8,
    bulk_in: u8,
    bulk_out: u8,
    next_tag: u32,
    capacity: Option<Capacity>,
    write_protected: bool,
    inquiry: Vec<u8>,
    state: HandleState,
    config: HostConfig,
    stats: HostStats,
    trace: VecDeque<HostTrace>,
    corrupt_next_cbw: bool,
}

impl fmt::Debug for MscHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MscHandle")
            .field("port", &self.device.port)
            .field("address", &self.device.address)
            .field("state", &self.state)
            .field("capacity", &self.capacity)
            .finish()
    }
}

impl MscHandle {
    /// Enumerates the device on `port` and readies it for block I/O.
    pub fn probe(bus: Arc<UsbBus>, port: PortId, config: HostConfig) -> Result<Self, MscError> {
        let device = bus.enumerate(port)?;
        let intf = device
            .descriptors
            .find_interface(CLASS_MASS_STORAGE)
            .ok_or_else(|| MscError::UnsupportedDevice("no mass-storage interface".into()))?;
        if intf.subclass != SUBCLASS_SCSI || intf.protocol != PROTOCOL_BULK_ONLY {
            return Err(MscError::UnsupportedDevice(format!(
                "interface {:02x}/{:02x}/{:02x}, only SCSI transparent bulk-only (08/06/50) is supported",
                intf.class, intf.subclass, intf.protocol
            )));
        }
        let find = |dir: Direction| {
            intf.endpoints
                .iter()
                .find(|e| e.transfer_type == TransferType::Bulk && e.direction() == dir)
                .map(|e| e.address)
        };
        let (bulk_in, bulk_out) = match (find(Direction::In), find(Direction::Out)) {
            (Some(i), Some(o)) => (i, o),
            _ => {
                return Err(MscError::UnsupportedDevice(
                    "missing bulk endpoint pair".into(),
                ))
            }
        };
        let interface = intf.number;
        let mut h = MscHandle {
            bus,
            device,
            interface,
            bulk_in,
            bulk_out,
            next_tag: 1,
            capacity: None,
            write_protected: false,
            inquiry: Vec::new(),
            state: HandleState::Probing,
            config,
            stats: HostStats::default(),
            trace: VecDeque::new(),
            corrupt_next_cbw: false,
        };
        match h.bring_up() {
            Ok(()) => {
                h.state = HandleState::Ready;
                Ok(h)
            }
            Err(e) => {
                h.state = if e == MscError::DeviceGone {
                    HandleState::Gone
                } else {
                    HandleState::Error
                };
                Err(e)
            }
        }
    }

    fn bring_up(&mut self) -> Result<(), MscError> {
        // Single-LUN devices may stall GET MAX LUN.
        let _ = self.get_max_lun();

        let inq = self.command(&scsi::inquiry_cdb(36), DataDir::In(36), &[])?;
        if inq.is_empty() || inq[0] & 0x1F != 0x00 {
            return Err(MscError::UnsupportedDevice(format!(
                "peripheral type {:#04x} is not a direct-access device",
                inq.first().copied().unwrap_or(0xFF)
            )));
        }
        self.inquiry = inq;

        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.command(&scsi::test_unit_ready_cdb(), DataDir::None, &[]) {
                Ok(_) => break,
                Err(MscError::Io(s)) if s.key == SenseKey::NotReady => {
                    if attempts >= self.config.tur_attempts {
                        return Err(MscError::NotReadyTimeout { attempts });
                    }
                }
                Err(e) => return Err(e),
            }
        }

        let cap = self.command(&scsi::read_capacity10_cdb(), DataDir::In(8), &[])?;
        if cap.len() != 8 {
            return Err(MscError::Transport(format!(
                "READ CAPACITY returned {} bytes",
                cap.len()
            )));
        }
        let capacity = Capacity {
            last_lba: u32::from_be_bytes([cap[0], cap[1], cap[2], cap[3]]),
            block_length: u32::from_be_bytes([cap[4], cap[5], cap[6], cap[7]]),
        };
        if capacity.block_length != SECTOR_SIZE as u32 {
            return Err(MscError::UnsupportedDevice(format!(
                "block length {}",
                capacity.block_length
            )));
        }
        self.capacity = Some(capacity);

        let ms = self.command(&scsi::mode_sense6_cdb(0x3F, 4), DataDir::In(4), &[])?;
        self.write_protected = ms.len() >= 3 && ms[2] & 0x80 != 0;
        Ok(())
    }

    pub fn port(&self) -> PortId {
        self.device.port
    }

    pub fn device(&self) -> &EnumeratedDevice {
        &self.device
    }

    pub fn state(&self) -> HandleState {
        self.state
    }

    pub fn capacity(&self) -> Option<Capacity> {
        self.capacity
    }

    pub fn write_protected(&self) -> bool {
        self.write_protected
    }

    pub fn inquiry_data(&self) -> &[u8] {
        &self.inquiry
    }

    pub fn next_tag(&self) -> u32 {
        self.next_tag
    }

    pub fn stats(&self) -> HostStats {
        self.stats
    }

    pub fn bulk_endpoints(&self) -> (u8, u8) {
        (self.bulk_in, self.bulk_out)
    }

    pub fn trace(&self) -> impl Iterator<Item = &HostTrace> {
        self.trace.iter()
    }

    pub fn trace_log(&self) -> String {
        self.trace.iter().map(|t| format!("{t}\n")).collect()
    }

    /// Corrupts the signature of the next CBW sent (fault injection).
    pub fn inject_invalid_cbw(&mut self) {
        self.corrupt_next_cbw = true;
    }

    fn mark_gone(&mut self, e: &MscError) {
        if *e == MscError::DeviceGone {
            self.state = HandleState::Gone;
        }
    }

    fn push_trace(&mut self, t: HostTrace) {
        if self.trace.len() == TRACE_CAP {
            self.trace.pop_front();
        }
        self.trace.push_back(t);
    }

    /// Class request: number of the highest logical unit.
    pub fn get_max_lun(&mut self) -> Result<u8, MscError> {
        if self.state == HandleState::Gone {
            return Err(MscError::DeviceGone);
        }
        let r = self.bus.control_transfer(
            self.device.address,
            SetupPacket::get_max_lun(self.interface),
            &[],
        );
        match r {
            Ok(b) => Ok(b.first().copied().unwrap_or(0)),
            Err(e) => {
                let e = MscError::from(e);
                self.mark_gone(&e);
                Err(e)
            }
        }
    }

    /// Mass storage reset, then clear-halt on bulk IN and bulk OUT.
    pub fn reset_recovery(&mut self) -> Result<(), MscError> {
        if self.state == HandleState::Gone {
            return Err(MscError::DeviceGone);
        }
        let addr = self.device.address;
        let steps = [
            SetupPacket::mass_storage_reset(self.interface),
            SetupPacket::clear_halt(self.bulk_in),
            SetupPacket::clear_halt(self.bulk_out),
        ];
        for s in steps {
            if let Err(e) = self.bus.control_transfer(addr, s, &[]) {
                let e = MscError::from(e);
                self.mark_gone(&e);
                if e != MscError::DeviceGone {
                    self.state = HandleState::Error;
                }
                return Err(e);
            }
        }
        self.stats.recoveries += 1;
        if self.state == HandleState::Error {
            self.state = if self.capacity.is_some() {
                HandleState::Ready
            } else {
                HandleState::Probing
            };
        }
        Ok(())
    }

    fn attempt(
        &mut self,
        cdb: &[u8],
        dir: DataDir,
        out: &[u8],
        retries: u32,
    ) -> Result<(Vec<u8>, CommandStatusWrapper), Attempt> {
        let tag = self.next_tag;
        self.next_tag = self.next_tag.wrapping_add(1);
        let len = match dir {
            DataDir::None => 0,
            DataDir::In(n) => n,
            DataDir::Out => out.len(),
        };
        let cbw = CommandBlockWrapper::new(tag, len as u32, matches!(dir, DataDir::In(_)), cdb);
        let mut raw = cbw.to_bytes();
        if std::mem::take(&mut self.corrupt_next_cbw) {
            raw[0..4].copy_from_slice(&[0; 4]);
        }
        let (lba, count) = match cdb[0] {
            opcode::READ_10 | opcode::WRITE_10 => scsi::rw10_fields(cdb).unwrap_or((0, 0)),
            _ => (0, 0),
        };
        let mut line = HostTrace {
            port: self.device.port,
            tag,
            opcode: cdb[0],
            lba,
            count,
            status: None,
            residue: len as u32,
            retries,
        };
        let result = self.exchange(&raw, tag, dir, out, len);
        if let Ok((_, csw)) = &result {
            line.status = Some(csw.status);
            line.residue = csw.data_residue;
        }
        self.push_trace(line);
        self.stats.commands += 1;
        result
    }

    fn exchange(
        &mut self,
        raw_cbw: &[u8],
        tag: u32,
        dir: DataDir,
        out: &[u8],
        len: usize,
    ) -> Result<(Vec<u8>, CommandStatusWrapper), Attempt> {
        let addr = self.device.address;
        self.bus.bulk_out(addr, self.bulk_out, raw_cbw)?;
        // A zero-length transfer has no data stage.
        let data = match dir {
            DataDir::In(n) if n > 0 => self.bus.bulk_in(addr, self.bulk_in, n)?,
            DataDir::Out if !out.is_empty() => {
                self.bus.bulk_out(addr, self.bulk_out, out)?;
                Vec::new()
            }
            _ => Vec::new(),
        };
        let raw = self.bus.bulk_in(addr, self.bulk_in, CSW_LEN)?;
        let csw = CommandStatusWrapper::parse(&raw)
            .map_err(|e| Attempt::Recover(format!("unreadable CSW: {e}")))?;
        if csw.tag != tag {
            return Err(Attempt::Recover(format!(
                "CSW tag {} does not answer CBW tag {tag}",
                csw.tag
            )));
        }
        if csw.data_residue as usize > len {
            return Err(Attempt::Recover(format!(
                "CSW residue {} exceeds transfer length {len}",
                csw.data_residue
            )));
        }
        if csw.status == CswStatus::PhaseError {
            return Err(Attempt::Recover("phase error".into()));
        }
        Ok((data, csw))
    }

    fn request_sense(&mut self) -> Result<SenseState, MscError> {
        let data = self.transport(&scsi::request_sense_cdb(18), DataDir::In(18), &[])?;
        Ok(SenseState::parse(&data.0)
            .unwrap_or(SenseState::new(SenseKey::NoSense, 0, 0)))
    }

    /// One command with reset recovery, but without sense handling.
    fn transport(
        &mut self,
        cdb: &[u8],
        dir: DataDir,
        out: &[u8],
    ) -> Result<(Vec<u8>, CommandStatusWrapper), MscError> {
        if self.state == HandleState::Gone {
            return Err(MscError::DeviceGone);
        }
        let mut retries = 0;
        loop {
            match self.attempt(cdb, dir, out, retries) {
                Ok(r) => return Ok(r),
                Err(Attempt::Fatal(e)) => {
                    self.mark_gone(&e);
                    return Err(e);
                }
                Err(Attempt::Recover(why)) => {
                    self.state = HandleState::Error;
                    self.reset_recovery()?;
                    if retries >= self.config.recovery_retries {
                        return Err(MscError::Transport(why));
                    }
                    retries += 1;
                    self.stats.retries += 1;
                }
            }
        }
    }

    /// Issues one SCSI command and returns its data stage. A failed status
    /// is followed by REQUEST SENSE; UNIT ATTENTION is retried once.
    pub fn command(&mut self, cdb: &[u8], dir: DataDir, out: &[u8]) -> Result<Vec<u8>, MscError> {
        let mut ua_retry = false;
        loop {
            let (data, csw) = self.transport(cdb, dir, out)?;
            if csw.status == CswStatus::Passed {
                return Ok(data);
            }
            let sense = self.request_sense()?;
            if sense.key == SenseKey::UnitAttention && !ua_retry {
                ua_retry = true;
                self.stats.unit_attention_retries += 1;
                continue;
            }
            return Err(MscError::Io(sense));
        }
    }

    fn check_ready(&self) -> Result<Capacity, MscError> {
        match (self.state, self.capacity) {
            (HandleState::Gone, _) => Err(MscError::DeviceGone),
            (HandleState::Ready, Some(c)) => Ok(c),
            (s, _) => Err(MscError::NotReady(s)),
        }
    }

    fn check_range(&self, lba: u64, count: u64) -> Result<(), MscError> {
        let cap = self.check_ready()?;
        if lba.checked_add(count).map_or(true, |e| e > cap.blocks()) {
            return Err(MscError::Range {
                lba,
                count,
                capacity: cap.blocks(),
            });
        }
        Ok(())
    }

    pub fn read_blocks(&mut self, lba: u64, count: u32) -> Result<Vec<u8>, MscError> {
        let mut buf = vec![0u8; count as usize * SECTOR_SIZE];
        self.read_into(lba, &mut buf)?;
        Ok(buf)
    }

    fn read_into(&mut self, lba: u64, buf: &mut [u8]) -> Result<(), MscError> {
        let count = (buf.len() / SECTOR_SIZE) as u64;
        self.check_range(lba, count)?;
        let step = self.config.max_blocks_per_command as u64;
        let mut done = 0u64;
        while done < count {
            let n = step.min(count - done);
            let bytes = n as usize * SECTOR_SIZE;
            let data = self.command(
                &scsi::read10_cdb((lba + done) as u32, n as u16),
                DataDir::In(bytes),
                &[],
            )?;
            if data.len() != bytes {
                return Err(MscError::Transport(format!(
                    "READ(10) returned {} of {bytes} bytes",
                    data.len()
                )));
            }
            let off = done as usize * SECTOR_SIZE;
            buf[off..off + bytes].copy_from_slice(&data);
            done += n;
        }
        Ok(())
    }

    pub fn write_blocks(&mut self, lba: u64, count: u32, data: &[u8]) -> Result<(), MscError> {
        assert_eq!(data.len(), count as usize * SECTOR_SIZE, "data length");
        self.check_range(lba, count as u64)?;
        let step = self.config.max_blocks_per_command as u64;
        let mut done = 0u64;
        while done < count as u64 {
            let n = step.min(count as u64 - done);
            let off = done as usize * SECTOR_SIZE;
            let bytes = n as usize * SECTOR_SIZE;
            self.command(
                &scsi::write10_cdb((lba + done) as u32, n as u16),
                DataDir::Out,
                &data[off..off + bytes],
            )?;
            done += n;
        }
        Ok(())
    }

    /// SYNCHRONIZE CACHE(10): asks the drive to persist cached writes.
    pub fn sync_cache(&mut self) -> Result<(), MscError> {
        self.check_ready()?;
        self.command(&scsi::synchronize_cache10_cdb(), DataDir::None, &[])
            .map(|_| ())
    }
}

impl BlockDevice for MscHandle {
    fn block_count(&self) -> u64 {
        self.capacity.map_or(0, |c| c.blocks())
    }

    fn is_read_only(&self) -> bool {
        self.write_protected
    }

    fn read_blocks(&mut self, lba: u64, buf: &mut [u8]) -> Result<(), DeviceError> {
        check_range(lba, buf.len(), self.block_count())?;
        Ok(self.read_into(lba, buf)?)
    }

    fn write_blocks(&mut self, lba: u64, data: &[u8]) -> Result<(), DeviceError> {
        let count = check_range(lba, data.len(), self.block_count())?;
        Ok(MscHandle::write_blocks(self, lba, count as u32, data)?)
    }

    fn flush(&mut self) -> Result<(), DeviceError> {
        Ok(self.sync_cache()?)
    }
}
