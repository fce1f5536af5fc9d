//! SCSI transparent command set for a single direct-access logical unit.

use std::fmt;

use crate::blockdev::{BlockImage, SECTOR_SIZE};

pub mod opcode {
    pub const TEST_UNIT_READY: u8 = 0x00;
    pub const REQUEST_SENSE: u8 = 0x03;
    pub const INQUIRY: u8 = 0x12;
    pub const MODE_SENSE_6: u8 = 0x1A;
    pub const READ_CAPACITY_10: u8 = 0x25;
    pub const READ_10: u8 = 0x28;
    pub const WRITE_10: u8 = 0x2A;
    pub const SYNCHRONIZE_CACHE_10: u8 = 0x35;
}

pub const IMPLEMENTED_OPCODES: [u8; 8] = [
    opcode::TEST_UNIT_READY,
    opcode::REQUEST_SENSE,
    opcode::INQUIRY,
    opcode::MODE_SENSE_6,
    opcode::READ_CAPACITY_10,
    opcode::READ_10,
    opcode::WRITE_10,
    opcode::SYNCHRONIZE_CACHE_10,
];

pub const INQUIRY_LEN: usize = 36;
pub const SENSE_LEN: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SenseKey {
    NoSense,
    NotReady,
    MediumError,
    IllegalRequest,
    UnitAttention,
    DataProtect,
}

impl SenseKey {
    pub fn code(self) -> u8 {
        match self {
            SenseKey::NoSense => 0x00,
            SenseKey::NotReady => 0x02,
            SenseKey::MediumError => 0x03,
            SenseKey::IllegalRequest => 0x05,
            SenseKey::UnitAttention => 0x06,
            SenseKey::DataProtect => 0x07,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code & 0x0F {
            0x00 => SenseKey::NoSense,
            0x02 => SenseKey::NotReady,
            0x03 => SenseKey::MediumError,
            0x05 => SenseKey::IllegalRequest,
            0x06 => SenseKey::UnitAttention,
            0x07 => SenseKey::DataProtect,
            _ => return None,
        })
    }
}

/// Sense key plus additional sense code / qualifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SenseState {
    pub key: SenseKey,
    pub asc: u8,
    pub ascq: u8,
}

impl SenseState {
    pub const NONE: SenseState = SenseState::new(SenseKey::NoSense, 0, 0);
    pub const INVALID_OPCODE: SenseState = SenseState::new(SenseKey::IllegalRequest, 0x20, 0);
    pub const LBA_OUT_OF_RANGE: SenseState = SenseState::new(SenseKey::IllegalRequest, 0x21, 0);
    pub const INVALID_FIELD_IN_CDB: SenseState =
        SenseState::new(SenseKey::IllegalRequest, 0x24, 0);
    pub const MEDIUM_NOT_PRESENT: SenseState = SenseState::new(SenseKey::NotReady, 0x3A, 0);
    pub const BECOMING_READY: SenseState = SenseState::new(SenseKey::NotReady, 0x04, 0x01);
    pub const WRITE_PROTECTED: SenseState = SenseState::new(SenseKey::DataProtect, 0x27, 0);
    pub const POWER_ON_RESET: SenseState = SenseState::new(SenseKey::UnitAttention, 0x29, 0);
    pub const UNRECOVERED_READ: SenseState = SenseState::new(SenseKey::MediumError, 0x11, 0);
    pub const WRITE_FAULT: SenseState = SenseState::new(SenseKey::MediumError, 0x03, 0);

    pub const fn new(key: SenseKey, asc: u8, ascq: u8) -> Self {
        SenseState { key, asc, ascq }
    }

    /// Fixed-format sense data.
    pub fn to_bytes(&self) -> [u8; SENSE_LEN] {
        let mut b = [0u8; SENSE_LEN];
        b[0] = 0x70;
        b[2] = self.key.code();
        b[7] = (SENSE_LEN - 8) as u8;
        b[12] = self.asc;
        b[13] = self.ascq;
        b
    }

    pub fn parse(b: &[u8]) -> Option<Self> {
        if b.len() < 14 || b[0] & 0x7F != 0x70 {
            return None;
        }
        Some(SenseState {
            key: SenseKey::from_code(b[2])?,
            asc: b[12],
            ascq: b[13],
        })
    }
}

impl fmt::Display for SenseState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.key {
            SenseKey::NoSense => "no-sense",
            SenseKey::NotReady => "not-ready",
            SenseKey::MediumError => "medium-error",
            SenseKey::IllegalRequest => "illegal-request",
            SenseKey::UnitAttention => "unit-attention",
            SenseKey::DataProtect => "data-protect",
        };
        write!(f, "{name} (asc {:#04x} ascq {:#04x})", self.asc, self.ascq)
    }
}

/// Data movement a command needs, derived from its CDB alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataPhase {
    None,
    In(usize),
    Out(usize),
}

/// Result of one command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScsiOutcome {
    pub data: Vec<u8>,
    pub good: bool,
}

impl ScsiOutcome {
    fn good(data: Vec<u8>) -> Self {
        ScsiOutcome { data, good: true }
    }
}

/// Power-on readiness of the unit; lets tests model a drive that never
/// spins up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readiness {
    Ready,
    NotReadyFor(u32),
    NeverReady,
}

#[derive(Debug, Clone)]
pub struct InquiryIdentity {
    pub vendor: String,
    pub product: String,
    pub revision: String,
}

impl Default for InquiryIdentity {
    fn default() -> Self {
        InquiryIdentity {
            vendor: "USBBRDG".into(),
            product: "Virtual Flash".into(),
            revision: "1.00".into(),
        }
    }
}

fn ascii_field(out: &mut [u8], s: &str) {
    out.fill(b' ');
    for (o, c) in out.iter_mut().zip(s.bytes().filter(|c| c.is_ascii_graphic() || *c == b' ')) {
        *o = c;
    }
}

fn be16(b: &[u8], off: usize) -> u16 {
    u16::from_be_bytes([b[off], b[off + 1]])
}

fn be32(b: &[u8], off: usize) -> u32 {
    u32::from_be_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// READ(10)/WRITE(10) address fields.
pub fn rw10_fields(cdb: &[u8]) -> Option<(u32, u16)> {
    (cdb.len() >= 10).then(|| (be32(cdb, 2), be16(cdb, 7)))
}

pub fn read10_cdb(lba: u32, count: u16) -> [u8; 10] {
    let mut c = [0u8; 10];
    c[0] = opcode::READ_10;
    c[2..6].copy_from_slice(&lba.to_be_bytes());
    c[7..9].copy_from_slice(&count.to_be_bytes());
    c
}

pub fn write10_cdb(lba: u32, count: u16) -> [u8; 10] {
    let mut c = read10_cdb(lba, count);
    c[0] = opcode::WRITE_10;
    c
}

pub fn inquiry_cdb(alloc: u16) -> [u8; 6] {
    let a = alloc.to_be_bytes();
    [opcode::INQUIRY, 0, 0, a[0], a[1], 0]
}

pub fn request_sense_cdb(alloc: u8) -> [u8; 6] {
    [opcode::REQUEST_SENSE, 0, 0, 0, alloc, 0]
}

pub fn mode_sense6_cdb(page: u8, alloc: u8) -> [u8; 6] {
    [opcode::MODE_SENSE_6, 0, page & 0x3F, 0, alloc, 0]
}

pub fn read_capacity10_cdb() -> [u8; 10] {
    [opcode::READ_CAPACITY_10, 0, 0, 0, 0, 0, 0, 0, 0, 0]
}

pub fn test_unit_ready_cdb() -> [u8; 6] {
    [opcode::TEST_UNIT_READY, 0, 0, 0, 0, 0]
}

pub fn synchronize_cache10_cdb() -> [u8; 10] {
    [opcode::SYNCHRONIZE_CACHE_10, 0, 0, 0, 0, 0, 0, 0, 0, 0]
}

/// A direct-access logical unit backed by a [`BlockImage`].
#[derive(Debug)]
pub struct ScsiDisk {
    medium: Option<BlockImage>,
    sense: SenseState,
    identity: InquiryIdentity,
    readiness: Readiness,
    unit_attention: bool,
}

impl ScsiDisk {
    pub fn new(medium: BlockImage, identity: InquiryIdentity, unit_attention: bool) -> Self {
        ScsiDisk {
            medium: Some(medium),
            sense: SenseState::NONE,
            identity,
            readiness: Readiness::Ready,
            unit_attention,
        }
    }

    pub fn medium(&self) -> Option<&BlockImage> {
        self.medium.as_ref()
    }

    pub fn medium_mut(&mut self) -> Option<&mut BlockImage> {
        self.medium.as_mut()
    }

    pub fn eject(&mut self) -> Option<BlockImage> {
        self.medium.take()
    }

    pub fn sense(&self) -> SenseState {
        self.sense
    }

    pub fn set_readiness(&mut self, r: Readiness) {
        self.readiness = r;
    }

    /// What the command will move, given its CDB. Unknown opcodes move nothing.
    pub fn data_phase(&self, cdb: &[u8]) -> DataPhase {
        match cdb[0] {
            opcode::INQUIRY if cdb.len() >= 5 => {
                DataPhase::In((be16(cdb, 3) as usize).min(INQUIRY_LEN))
            }
            opcode::REQUEST_SENSE if cdb.len() >= 5 => {
                DataPhase::In((cdb[4] as usize).min(SENSE_LEN))
            }
            opcode::MODE_SENSE_6 if cdb.len() >= 5 => DataPhase::In((cdb[4] as usize).min(4)),
            opcode::READ_CAPACITY_10 => DataPhase::In(8),
            opcode::READ_10 => match rw10_fields(cdb) {
                Some((_, n)) => DataPhase::In(n as usize * SECTOR_SIZE),
                None => DataPhase::None,
            },
            opcode::WRITE_10 => match rw10_fields(cdb) {
                Some((_, n)) => DataPhase::Out(n as usize * SECTOR_SIZE),
                None => DataPhase::None,
            },
            _ => DataPhase::None,
        }
    }

    fn fail(&mut self, sense: SenseState) -> ScsiOutcome {
        self.sense = sense;
        ScsiOutcome {
            data: Vec::new(),
            good: false,
        }
    }

    fn medium_ready(&mut self) -> Result<(), SenseState> {
        if self.medium.is_none() {
            return Err(SenseState::MEDIUM_NOT_PRESENT);
        }
        match self.readiness {
            Readiness::Ready => Ok(()),
            Readiness::NeverReady => Err(SenseState::BECOMING_READY),
            Readiness::NotReadyFor(n) => {
                self.readiness = if n <= 1 {
                    Readiness::Ready
                } else {
                    Readiness::NotReadyFor(n - 1)
                };
                Err(SenseState::BECOMING_READY)
            }
        }
    }

    /// Executes one CDB. `data_out` carries the write payload, if any.
    pub fn execute(&mut self, cdb: &[u8], data_out: &[u8]) -> ScsiOutcome {
        let op = cdb[0];
        if op == opcode::REQUEST_SENSE {
            return self.request_sense(cdb);
        }
        if !IMPLEMENTED_OPCODES.contains(&op) {
            return self.fail(SenseState::INVALID_OPCODE);
        }
        if self.unit_attention && op != opcode::INQUIRY {
            self.unit_attention = false;
            return self.fail(SenseState::POWER_ON_RESET);
        }
        if op == opcode::INQUIRY {
            return self.inquiry(cdb);
        }
        if let Err(s) = self.medium_ready() {
            return self.fail(s);
        }
        match op {
            opcode::TEST_UNIT_READY => ScsiOutcome::good(Vec::new()),
            opcode::READ_CAPACITY_10 => self.read_capacity(),
            opcode::MODE_SENSE_6 => self.mode_sense(cdb),
            opcode::READ_10 => self.read10(cdb),
            opcode::WRITE_10 => self.write10(cdb, data_out),
            opcode::SYNCHRONIZE_CACHE_10 => match self.medium.as_mut().map(|m| m.flush()) {
                Some(Ok(())) | None => ScsiOutcome::good(Vec::new()),
                Some(Err(_)) => self.fail(SenseState::WRITE_FAULT),
            },
            _ => self.fail(SenseState::INVALID_OPCODE),
        }
    }

    fn request_sense(&mut self, cdb: &[u8]) -> ScsiOutcome {
        let alloc = cdb.get(4).copied().unwrap_or(SENSE_LEN as u8) as usize;
        let sense = if self.unit_attention {
            self.unit_attention = false;
            SenseState::POWER_ON_RESET
        } else {
            self.sense
        };
        self.sense = SenseState::NONE;
        let mut data = sense.to_bytes().to_vec();
        data.truncate(alloc);
        ScsiOutcome::good(data)
    }

    fn inquiry(&mut self, cdb: &[u8]) -> ScsiOutcome {
        if cdb.len() < 6 || cdb[1] & 0x01 != 0 || cdb[2] != 0 {
            return self.fail(SenseState::INVALID_FIELD_IN_CDB);
        }
        if self.medium.is_none() {
            return self.fail(SenseState::MEDIUM_NOT_PRESENT);
        }
        let mut d = [0u8; INQUIRY_LEN];
        d[0] = 0x00; // direct access block device
        d[1] = 0x80; // removable
        d[2] = 0x04;
        d[3] = 0x02;
        d[4] = (INQUIRY_LEN - 5) as u8;
        ascii_field(&mut d[8..16], &self.identity.vendor);
        ascii_field(&mut d[16..32], &self.identity.product);
        ascii_field(&mut d[32..36], &self.identity.revision);
        let alloc = be16(cdb, 3) as usize;
        ScsiOutcome::good(d[..alloc.min(INQUIRY_LEN)].to_vec())
    }

    fn read_capacity(&mut self) -> ScsiOutcome {
        let m = self.medium.as_ref().expect("checked");
        let last = (m.sector_count() - 1).min(u32::MAX as u64) as u32;
        let mut d = Vec::with_capacity(8);
        d.extend_from_slice(&last.to_be_bytes());
        d.extend_from_slice(&(SECTOR_SIZE as u32).to_be_bytes());
        ScsiOutcome::good(d)
    }

    fn mode_sense(&mut self, cdb: &[u8]) -> ScsiOutcome {
        let wp = self.medium.as_ref().is_some_and(|m| m.read_only());
        let header = [3u8, 0, if wp { 0x80 } else { 0 }, 0];
        let alloc = cdb.get(4).copied().unwrap_or(4) as usize;
        ScsiOutcome::good(header[..alloc.min(4)].to_vec())
    }

    fn range(&self, cdb: &[u8]) -> Result<(u64, usize), SenseState> {
        let (lba, count) = rw10_fields(cdb).ok_or(SenseState::INVALID_FIELD_IN_CDB)?;
        let total = self.medium.as_ref().expect("checked").sector_count();
        if lba as u64 + count as u64 > total {
            return Err(SenseState::LBA_OUT_OF_RANGE);
        }
        Ok((lba as u64, count as usize))
    }

    fn read10(&mut self, cdb: &[u8]) -> ScsiOutcome {
        let (lba, count) = match self.range(cdb) {
            Ok(r) => r,
            Err(s) => return self.fail(s),
        };
        let mut data = vec![0u8; count * SECTOR_SIZE];
        match self.medium.as_ref().expect("checked").read_range(lba, &mut data) {
            Ok(()) => ScsiOutcome::good(data),
            Err(_) => self.fail(SenseState::UNRECOVERED_READ),
        }
    }

    fn write10(&mut self, cdb: &[u8], data: &[u8]) -> ScsiOutcome {
        let (lba, count) = match self.range(cdb) {
            Ok(r) => r,
            Err(s) => return self.fail(s),
        };
        let m = self.medium.as_mut().expect("checked");
        if m.read_only() {
            return self.fail(SenseState::WRITE_PROTECTED);
        }
        if data.len() < count * SECTOR_SIZE {
            return self.fail(SenseState::INVALID_FIELD_IN_CDB);
        }
        match m.write_range(lba, &data[..count * SECTOR_SIZE]) {
            Ok(()) => ScsiOutcome::good(Vec::new()),
            Err(_) => self.fail(SenseState::WRITE_FAULT),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(sectors: u64, ro: bool) -> (tempfile::TempDir, ScsiDisk) {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("d.img");
        drop(BlockImage::create(&p, sectors).unwrap());
        let img = BlockImage::open(&p, ro).unwrap();
        (d, ScsiDisk::new(img, InquiryIdentity::default(), false))
    }

    #[test]
    fn inquiry_layout_and_truncation() {
        let (_d, mut s) = disk(2048, false);
        let out = s.execute(&inquiry_cdb(36), &[]);
        assert!(out.good);
        assert_eq!(out.data.len(), 36);
        assert_eq!(out.data[0], 0x00);
        assert_eq!(out.data[1] & 0x80, 0x80);
        assert_eq!(&out.data[8..16], b"USBBRDG ");
        assert_eq!(&out.data[16..32], b"Virtual Flash   ");
        assert_eq!(&out.data[32..36], b"1.00");
        let out = s.execute(&inquiry_cdb(5), &[]);
        assert_eq!(out.data.len(), 5);
    }

    #[test]
    fn read_capacity_is_last_lba_big_endian() {
        let (_d, mut s) = disk(2048, false);
        let out = s.execute(&read_capacity10_cdb(), &[]);
        assert_eq!(out.data, vec![0, 0, 0x07, 0xFF, 0, 0, 0x02, 0x00]);
        let (_d, mut s) = disk(32768, false);
        let out = s.execute(&read_capacity10_cdb(), &[]);
        assert_eq!(be32(&out.data, 0), 32767);
        assert_eq!(be32(&out.data, 4), 512);
    }

    #[test]
    fn rw10_round_trip_and_range() {
        let (_d, mut s) = disk(2048, false);
        let payload: Vec<u8> = (0..1024).map(|i| (i * 7 % 251) as u8).collect();
        assert!(s.execute(&write10_cdb(10, 2), &payload).good);
        assert_eq!(s.execute(&read10_cdb(10, 2), &[]).data, payload);
        let out = s.execute(&read10_cdb(2047, 2), &[]);
        assert!(!out.good);
        assert_eq!(s.sense(), SenseState::LBA_OUT_OF_RANGE);
        let out = s.execute(&read10_cdb(0, 0), &[]);
        assert!(out.good && out.data.is_empty());
    }

    #[test]
    fn sense_reported_then_cleared() {
        let (_d, mut s) = disk(256, false);
        assert!(!s.execute(&[0xFF, 0, 0, 0, 0, 0], &[]).good);
        let first = s.execute(&request_sense_cdb(18), &[]);
        assert_eq!(first.data.len(), 18);
        assert_eq!(first.data[2], 0x05);
        assert_eq!(first.data[12], 0x20);
        let second = s.execute(&request_sense_cdb(18), &[]);
        assert_eq!(second.data[2], 0x00);
    }

    #[test]
    fn every_unimplemented_opcode_is_illegal_request() {
        let (_d, mut s) = disk(256, false);
        for op in 0..=255u8 {
            if IMPLEMENTED_OPCODES.contains(&op) {
                continue;
            }
            let mut cdb = [0u8; 10];
            cdb[0] = op;
            let out = s.execute(&cdb, &[]);
            assert!(!out.good, "opcode {op:#04x}");
            assert_eq!(s.sense(), SenseState::INVALID_OPCODE, "opcode {op:#04x}");
        }
    }

    #[test]
    fn write_protect_surfaces_in_mode_sense_and_writes() {
        let (_d, mut s) = disk(256, true);
        let out = s.execute(&mode_sense6_cdb(0x3F, 192), &[]);
        assert_eq!(out.data.len(), 4);
        assert_eq!(out.data[2] & 0x80, 0x80);
        assert!(!s.execute(&write10_cdb(0, 1), &[0; 512]).good);
        assert_eq!(s.sense(), SenseState::WRITE_PROTECTED);
        let (_d, mut s) = disk(256, false);
        assert_eq!(s.execute(&mode_sense6_cdb(0x3F, 192), &[]).data[2], 0);
    }

    #[test]
    fn ejected_medium_is_not_ready() {
        let (_d, mut s) = disk(256, false);
        s.eject();
        for cdb in [
            test_unit_ready_cdb().to_vec(),
            inquiry_cdb(36).to_vec(),
            read_capacity10_cdb().to_vec(),
        ] {
            assert!(!s.execute(&cdb, &[]).good);
            assert_eq!(s.sense().key, SenseKey::NotReady);
        }
    }

    #[test]
    fn unit_attention_once() {
        let d = tempfile::tempdir().unwrap();
        let img = BlockImage::create(d.path().join("u.img"), 256).unwrap();
        let mut s = ScsiDisk::new(img, InquiryIdentity::default(), true);
        assert!(s.execute(&inquiry_cdb(36), &[]).good);
        assert!(!s.execute(&test_unit_ready_cdb(), &[]).good);
        assert_eq!(s.sense(), SenseState::POWER_ON_RESET);
        assert!(s.execute(&test_unit_ready_cdb(), &[]).good);
    }
}
