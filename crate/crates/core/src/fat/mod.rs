//! FAT16/FAT32 filesystem driver over any 512-byte [`BlockDevice`].
//!
//! Volumes are superfloppy style: the boot sector is LBA 0. The whole FAT
//! is held in memory and written back to every copy when a mutating call
//! finishes. File data is always written into clusters that the on-disk
//! FAT still shows as free, so an interrupted write leaves no trace once
//! the in-memory state is dropped.
//!
//! Streaming writes go through [`FileWriter`]; clusters it allocates are
//! reserved in memory and only linked into the FAT by
//! [`FatVolume::commit`]. Reads go through [`FileReader`] cursors, several
//! of which may be open on one volume at a time.

pub mod bpb;
pub mod dir;
mod fsck;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use chrono::NaiveDateTime;
use thiserror::Error;

use crate::blockdev::{BlockDevice, DeviceError, SECTOR_SIZE};
pub use bpb::{Bpb, FatVariant, FsInfo, Geometry};
pub use dir::{Attributes, DirEntry};
use dir::{Located, ShortEntry, ENTRY_SIZE};
pub use fsck::{fsck, Finding, Severity};

/// Largest directory, in entries.
const MAX_DIR_ENTRIES: usize = 65536;

/// Formats the volume tool refuses to mount.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Foreign {
    Fat12,
    Ntfs,
    ExFat,
}

impl fmt::Display for Foreign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Foreign::Fat12 => "FAT12 (fewer than 4085 clusters)",
            Foreign::Ntfs => "NTFS",
            Foreign::ExFat => "exFAT",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FatError {
    #[error("bad-signature: boot sector lacks 0x55AA")]
    BadSignature,
    #[error("unsupported-variant: {0}")]
    UnsupportedVariant(Foreign),
    #[error("inconsistent-bpb: {0}")]
    InconsistentBpb(String),
    #[error("variant-size-mismatch: {cluster_count} clusters is outside the {variant} range")]
    VariantSizeMismatch { variant: FatVariant, cluster_count: u64 },
    #[error("not-found: {0}")]
    NotFound(String),
    #[error("not-a-directory: {0}")]
    NotADirectory(String),
    #[error("is-a-directory: {0}")]
    IsADirectory(String),
    #[error("exists-no-overwrite: {0}")]
    Exists(String),
    #[error("dir-not-empty: {0}")]
    DirNotEmpty(String),
    #[error("disk-full")]
    DiskFull,
    #[error("dir-full: {0}")]
    DirectoryFull(String),
    #[error("name-invalid: {0}")]
    NameInvalid(String),
    #[error("file-too-large: FAT files stop at 4 GiB - 1")]
    FileTooLarge,
    #[error("read-only volume")]
    ReadOnly,
    #[error("corrupt: {0}")]
    Corrupt(String),
    #[error("io-failure: {0}")]
    Io(DeviceError),
}

impl FatError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            FatError::BadSignature => "bad-signature",
            FatError::UnsupportedVariant(_) => "unsupported-variant",
            FatError::InconsistentBpb(_) => "inconsistent-bpb",
            FatError::VariantSizeMismatch { .. } => "variant-size-mismatch",
            FatError::NotFound(_) => "not-found",
            FatError::NotADirectory(_) => "not-a-directory",
            FatError::IsADirectory(_) => "is-a-directory",
            FatError::Exists(_) => "exists-no-overwrite",
            FatError::DirNotEmpty(_) => "dir-not-empty",
            FatError::DiskFull => "disk-full",
            FatError::DirectoryFull(_) => "dir-full",
            FatError::NameInvalid(_) => "name-invalid",
            FatError::FileTooLarge => "file-too-large",
            FatError::ReadOnly => "read-only",
            FatError::Corrupt(_) => "corrupt",
            FatError::Io(DeviceError::Gone) => "device-gone",
            FatError::Io(_) => "io-failure",
        }
    }
}

impl From<DeviceError> for FatError {
    fn from(e: DeviceError) -> Self {
        match e {
            DeviceError::ReadOnly => FatError::ReadOnly,
            other => FatError::Io(other),
        }
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> NaiveDateTime;
}

/// Local wall-clock time.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> NaiveDateTime {
        chrono::Local::now().naive_local()
    }
}

/// Always returns the same instant.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub NaiveDateTime);

impl Clock for FixedClock {
    fn now(&self) -> NaiveDateTime {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct MkfsOptions {
    pub sectors_per_cluster: Option<u8>,
    pub label: Option<String>,
    pub volume_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumeInfo {
    pub variant: FatVariant,
    pub label: String,
    pub total_bytes: u64,
    pub free_bytes: u64,
    pub cluster_bytes: u32,
    pub cluster_count: u32,
    pub free_clusters: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DirLoc {
    FixedRoot,
    Chain(u32),
}

/// A directory loaded into memory together with where each sector lives.
struct DirBuf {
    loc: DirLoc,
    lbas: Vec<u64>,
    clusters: Vec<u32>,
    data: Vec<u8>,
}

impl DirBuf {
    fn slots(&self) -> usize {
        self.data.len() / ENTRY_SIZE
    }

    fn slot_mut(&mut self, i: usize) -> &mut [u8] {
        &mut self.data[i * ENTRY_SIZE..(i + 1) * ENTRY_SIZE]
    }

    fn live(&self) -> Vec<Located> {
        dir::scan(&self.data)
            .entries
            .into_iter()
            .filter(|l| !l.raw.attr.is_volume_label() && !l.raw.is_dot())
            .collect()
    }
}

/// Streaming file creation. Obtain with [`FatVolume::create_writer`], feed
/// with [`FatVolume::write_chunk`], finish with [`FatVolume::commit`] or
/// [`FatVolume::abort`].
#[derive(Debug)]
pub struct FileWriter {
    path: String,
    overwrite: bool,
    runs: Vec<(u32, u32)>,
    pending: Vec<u8>,
    size: u64,
}

impl FileWriter {
    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn bytes_written(&self) -> u64 {
        self.size
    }

    fn clusters(&self) -> impl Iterator<Item = u32> + '_ {
        self.runs.iter().flat_map(|&(s, n)| s..s + n)
    }
}

/// Read cursor over one file.
#[derive(Debug, Clone)]
pub struct FileReader {
    first_cluster: u32,
    size: u32,
    pos: u32,
    cluster: u32,
}

impl FileReader {
    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn position(&self) -> u32 {
        self.pos
    }

    pub fn remaining(&self) -> u32 {
        self.size - self.pos
    }
}

pub struct FatVolume<D: BlockDevice> {
    dev: D,
    bpb: Bpb,
    geo: Geometry,
    fat: Vec<u32>,
    dirty: BTreeSet<usize>,
    reserved: Vec<u64>,
    reserved_count: u32,
    zero_entries: u32,
    next_free: u32,
    fsinfo: Option<FsInfo>,
    fsinfo_dirty: bool,
    label: [u8; 11],
    clock: Arc<dyn Clock>,
}

impl<D: BlockDevice> fmt::Debug for FatVolume<D> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FatVolume")
            .field("variant", &self.geo.variant)
            .field("cluster_count", &self.geo.cluster_count)
            .field("free_clusters", &self.free_clusters())
            .finish()
    }
}

fn split_path(path: &str) -> Result<Vec<&str>, FatError> {
    if !path.starts_with('/') {
        return Err(FatError::NameInvalid(format!("{path:?} is not absolute")));
    }
    let parts: Vec<&str> = path.split('/').filter(|p| !p.is_empty()).collect();
    for p in &parts {
        if *p == "." || *p == ".." {
            return Err(FatError::NameInvalid(format!("{path:?}: relative components")));
        }
    }
    Ok(parts)
}

fn join(parts: &[&str]) -> String {
    format!("/{}", parts.join("/"))
}

/// Formats `dev` and returns the mounted volume.
pub fn mkfs<D: BlockDevice>(
    mut dev: D,
    variant: FatVariant,
    opts: &MkfsOptions,
    clock: Arc<dyn Clock>,
) -> Result<FatVolume<D>, FatError> {
    if dev.is_read_only() {
        return Err(FatError::ReadOnly);
    }
    let label = bpb::label_bytes(opts.label.as_deref())?;
    let now = clock.now();
    let volume_id = opts.volume_id.unwrap_or_else(|| {
        let (d, t, _) = dir::to_dos(now);
        (d as u32) << 16 | t as u32
    });
    let bpb = bpb::plan(dev.block_count(), variant, opts.sectors_per_cluster, label, volume_id)?;
    let geo = bpb.geometry()?;
    debug_assert_eq!(geo.variant, variant);

    // Zero everything up to the end of the root directory (or root cluster).
    let meta_end = match variant {
        FatVariant::Fat16 => geo.first_data_sector,
        FatVariant::Fat32 => geo.cluster_lba(bpb.root_cluster) + geo.sectors_per_cluster,
    };
    let zeros = vec![0u8; 128 * SECTOR_SIZE];
    let mut lba = 0;
    while lba < meta_end {
        let n = (meta_end - lba).min(128);
        dev.write_blocks(lba, &zeros[..n as usize * SECTOR_SIZE])?;
        lba += n;
    }

    let boot = bpb.to_sector();
    dev.write_blocks(0, &boot)?;
    if variant == FatVariant::Fat32 {
        let info = FsInfo {
            free_count: geo.cluster_count - 1,
            next_free: 3,
        };
        let mut trailer = [0u8; SECTOR_SIZE];
        trailer[510] = 0x55;
        trailer[511] = 0xAA;
        for base in [0u64, bpb.backup_boot_sector as u64] {
            if base != 0 {
                dev.write_blocks(base, &boot)?;
            }
            dev.write_blocks(base + bpb.fsinfo_sector as u64, &info.to_sector())?;
            dev.write_blocks(base + 2, &trailer)?;
        }
    }

    let (m0, m1) = variant.media_entries();
    let mut head = vec![0u8; SECTOR_SIZE];
    match variant {
        FatVariant::Fat16 => {
            head[0..2].copy_from_slice(&(m0 as u16).to_le_bytes());
            head[2..4].copy_from_slice(&(m1 as u16).to_le_bytes());
        }
        FatVariant::Fat32 => {
            head[0..4].copy_from_slice(&m0.to_le_bytes());
            head[4..8].copy_from_slice(&m1.to_le_bytes());
            head[8..12].copy_from_slice(&variant.eoc().to_le_bytes());
        }
    }
    for k in 0..bpb.num_fats as u64 {
        dev.write_blocks(geo.first_fat_sector + k * bpb.sectors_per_fat as u64, &head)?;
    }

    if label != *b"NO NAME    " {
        let mut e = ShortEntry {
            name: label,
            attr: Attributes(Attributes::VOLUME_ID),
            ..Default::default()
        };
        e.stamp(now, true);
        let root_lba = match variant {
            FatVariant::Fat16 => geo.first_root_sector,
            FatVariant::Fat32 => geo.cluster_lba(bpb.root_cluster),
        };
        let mut sector = [0u8; SECTOR_SIZE];
        sector[..ENTRY_SIZE].copy_from_slice(&e.to_bytes());
        dev.write_blocks(root_lba, &sector)?;
    }
    dev.flush()?;
    FatVolume::mount_with_clock(dev, clock)
}

impl<D: BlockDevice> FatVolume<D> {
    pub fn mount(dev: D) -> Result<Self, FatError> {
        Self::mount_with_clock(dev, Arc::new(SystemClock))
    }

    pub fn mount_with_clock(mut dev: D, clock: Arc<dyn Clock>) -> Result<Self, FatError> {
        if dev.block_count() == 0 {
            return Err(FatError::BadSignature);
        }
        let mut boot = vec![0u8; SECTOR_SIZE];
        dev.read_blocks(0, &mut boot)?;
        let bpb = Bpb::parse(&boot)?;
        let geo = bpb.geometry()?;
        if bpb.total_sectors as u64 > dev.block_count() {
            return Err(FatError::InconsistentBpb(format!(
                "BPB claims {} sectors, device has {}",
                bpb.total_sectors,
                dev.block_count()
            )));
        }

        let fat_sectors = bpb.sectors_per_fat as u64;
        let mut raw = vec![0u8; fat_sectors as usize * SECTOR_SIZE];
        let mut done = 0u64;
        while done < fat_sectors {
            let n = (fat_sectors - done).min(128);
            let off = done as usize * SECTOR_SIZE;
            dev.read_blocks(
                geo.first_fat_sector + done,
                &mut raw[off..off + n as usize * SECTOR_SIZE],
            )?;
            done += n;
        }
        let fat: Vec<u32> = match geo.variant {
            FatVariant::Fat16 => raw
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
                .collect(),
            FatVariant::Fat32 => raw
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        };
        let mask = if geo.variant == FatVariant::Fat32 { 0x0FFF_FFFF } else { 0xFFFF };
        let zero_entries = fat[2..=geo.max_cluster() as usize]
            .iter()
            .filter(|&&v| v & mask == 0)
            .count() as u32;

        let mut fsinfo = None;
        let mut next_free = 2;
        if geo.variant == FatVariant::Fat32 && bpb.fsinfo_sector != 0 && bpb.fsinfo_sector != 0xFFFF {
            let mut s = vec![0u8; SECTOR_SIZE];
            dev.read_blocks(bpb.fsinfo_sector as u64, &mut s)?;
            fsinfo = FsInfo::parse(&s);
            if let Some(fi) = fsinfo {
                if (2..=geo.max_cluster()).contains(&fi.next_free) {
                    next_free = fi.next_free;
                }
            }
        }
        let fsinfo_dirty = fsinfo.is_some_and(|f| f.free_count != zero_entries);

        let mut vol = FatVolume {
            dev,
            label: bpb.volume_label,
            bpb,
            geo,
            fat,
            dirty: BTreeSet::new(),
            reserved: vec![0; (geo.max_cluster() as usize + 1).div_ceil(64)],
            reserved_count: 0,
            zero_entries,
            next_free,
            fsinfo,
            fsinfo_dirty,
            clock,
        };
        let root = vol.load_dir(vol.root_loc())?;
        if let Some(l) = dir::scan(&root.data)
            .entries
            .iter()
            .find(|l| l.raw.attr.is_volume_label())
        {
            vol.label = l.raw.name;
        }
        Ok(vol)
    }

    pub fn bpb(&self) -> &Bpb {
        &self.bpb
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geo
    }

    pub fn variant(&self) -> FatVariant {
        self.geo.variant
    }

    pub fn cluster_count(&self) -> u32 {
        self.geo.cluster_count
    }

    pub fn cluster_bytes(&self) -> usize {
        self.geo.cluster_bytes
    }

    pub fn first_data_sector(&self) -> u64 {
        self.geo.first_data_sector
    }

    /// Clusters available for allocation.
    pub fn free_clusters(&self) -> u32 {
        self.zero_entries - self.reserved_count
    }

    pub fn next_free_hint(&self) -> u32 {
        self.next_free
    }

    /// Whether the FSInfo free count disagreed with the FAT at mount.
    pub fn fsinfo_was_stale(&self) -> bool {
        self.fsinfo_dirty
    }

    pub fn label(&self) -> String {
        String::from_utf8_lossy(&self.label).trim_end().to_string()
    }

    pub fn volume_info(&self) -> VolumeInfo {
        let cb = self.geo.cluster_bytes as u64;
        VolumeInfo {
            variant: self.geo.variant,
            label: self.label(),
            total_bytes: self.geo.cluster_count as u64 * cb,
            free_bytes: self.free_clusters() as u64 * cb,
            cluster_bytes: cb as u32,
            cluster_count: self.geo.cluster_count,
            free_clusters: self.free_clusters(),
        }
    }

    pub fn device(&self) -> &D {
        &self.dev
    }

    pub fn device_mut(&mut self) -> &mut D {
        &mut self.dev
    }

    pub fn into_inner(self) -> D {
        self.dev
    }

    pub fn is_read_only(&self) -> bool {
        self.dev.is_read_only()
    }

    fn mask(&self) -> u32 {
        match self.geo.variant {
            FatVariant::Fat16 => 0xFFFF,
            FatVariant::Fat32 => 0x0FFF_FFFF,
        }
    }

    /// FAT entry for cluster `n`, masked to 28 bits on FAT32.
    pub fn fat_entry(&self, n: u32) -> u32 {
        self.fat[n as usize] & self.mask()
    }

    fn set_entry(&mut self, n: u32, v: u32) {
        let old = self.fat_entry(n);
        if (old == 0) != (v == 0) && (2..=self.geo.max_cluster()).contains(&n) {
            if v == 0 {
                self.zero_entries += 1;
            } else {
                self.zero_entries -= 1;
            }
        }
        let raw = &mut self.fat[n as usize];
        *raw = match self.geo.variant {
            FatVariant::Fat16 => v,
            FatVariant::Fat32 => (*raw & 0xF000_0000) | (v & 0x0FFF_FFFF),
        };
        self.dirty
            .insert(n as usize * self.geo.variant.entry_bytes() / SECTOR_SIZE);
        self.fsinfo_dirty = true;
    }

    fn is_reserved(&self, n: u32) -> bool {
        self.reserved[n as usize / 64] & (1 << (n % 64)) != 0
    }

    fn set_reserved(&mut self, n: u32, on: bool) {
        let bit = 1u64 << (n % 64);
        let w = &mut self.reserved[n as usize / 64];
        if on {
            debug_assert!(*w & bit == 0);
            *w |= bit;
            self.reserved_count += 1;
        } else {
            debug_assert!(*w & bit != 0);
            *w &= !bit;
            self.reserved_count -= 1;
        }
    }

    fn valid_cluster(&self, n: u32) -> bool {
        (2..=self.geo.max_cluster()).contains(&n)
    }

    /// Successor of `n` in its chain, or `None` at end of chain.
    fn next_cluster(&self, n: u32) -> Result<Option<u32>, FatError> {
        let v = self.fat_entry(n);
        if self.geo.variant.is_eoc(v) {
            Ok(None)
        } else if self.valid_cluster(v) {
            Ok(Some(v))
        } else {
            Err(FatError::Corrupt(format!("cluster {n} links to {v:#x}")))
        }
    }

    /// Clusters of the chain starting at `start`.
    pub fn chain(&self, start: u32) -> Result<Vec<u32>, FatError> {
        let mut out = Vec::new();
        if start == 0 {
            return Ok(out);
        }
        if !self.valid_cluster(start) {
            return Err(FatError::Corrupt(format!("chain starts at {start:#x}")));
        }
        let mut c = start;
        loop {
            out.push(c);
            if out.len() > self.geo.cluster_count as usize {
                return Err(FatError::Corrupt(format!("chain from {start} loops")));
            }
            match self.next_cluster(c)? {
                Some(n) => c = n,
                None => return Ok(out),
            }
        }
    }

    /// Finds and reserves one free cluster using the rotating hint.
    fn reserve_one(&mut self) -> Result<u32, FatError> {
        if self.free_clusters() == 0 {
            return Err(FatError::DiskFull);
        }
        let max = self.geo.max_cluster();
        let mut c = self.next_free.clamp(2, max);
        for _ in 0..self.geo.cluster_count {
            if self.fat_entry(c) == 0 && !self.is_reserved(c) {
                self.set_reserved(c, true);
                self.next_free = if c == max { 2 } else { c + 1 };
                self.fsinfo_dirty = true;
                return Ok(c);
            }
            c = if c == max { 2 } else { c + 1 };
        }
        Err(FatError::DiskFull)
    }

    /// Reserves `n` clusters, all or none, as runs of consecutive numbers.
    fn reserve(&mut self, n: u32) -> Result<Vec<(u32, u32)>, FatError> {
        if n > self.free_clusters() {
            return Err(FatError::DiskFull);
        }
        let mut runs: Vec<(u32, u32)> = Vec::new();
        for _ in 0..n {
            let c = self.reserve_one()?;
            match runs.last_mut() {
                Some((s, len)) if *s + *len == c => *len += 1,
                _ => runs.push((c, 1)),
            }
        }
        Ok(runs)
    }

    fn release(&mut self, runs: &[(u32, u32)]) {
        for &(s, n) in runs {
            for c in s..s + n {
                self.set_reserved(c, false);
            }
        }
    }

    /// Links reserved clusters into a chain and returns its first cluster.
    fn link(&mut self, clusters: &[u32]) -> u32 {
        for (i, &c) in clusters.iter().enumerate() {
            self.set_reserved(c, false);
            let v = clusters.get(i + 1).copied().unwrap_or(self.geo.variant.eoc());
            self.set_entry(c, v);
        }
        clusters.first().copied().unwrap_or(0)
    }

    fn free_chain(&mut self, start: u32) -> Result<u32, FatError> {
        let chain = self.chain(start)?;
        for &c in &chain {
            self.set_entry(c, 0);
        }
        Ok(chain.len() as u32)
    }

    fn write_clusters(&mut self, runs: &[(u32, u32)], data: &[u8]) -> Result<(), FatError> {
        let cb = self.geo.cluster_bytes;
        let mut off = 0;
        for &(s, n) in runs {
            let mut done = 0u32;
            while done < n {
                let k = (n - done).min((128 / self.geo.sectors_per_cluster).max(1) as u32);
                let bytes = k as usize * cb;
                self.dev
                    .write_blocks(self.geo.cluster_lba(s + done), &data[off..off + bytes])?;
                off += bytes;
                done += k;
            }
        }
        Ok(())
    }

    /// Writes dirty FAT sectors to every copy, refreshes FSInfo and flushes.
    pub fn persist(&mut self) -> Result<(), FatError> {
        let dirty: Vec<usize> = std::mem::take(&mut self.dirty).into_iter().collect();
        let eb = self.geo.variant.entry_bytes();
        let per = SECTOR_SIZE / eb;
        let mut i = 0;
        while i < dirty.len() {
            let mut j = i + 1;
            while j < dirty.len() && dirty[j] == dirty[j - 1] + 1 && j - i < 128 {
                j += 1;
            }
            let first = dirty[i];
            let mut buf = Vec::with_capacity((j - i) * SECTOR_SIZE);
            for &v in &self.fat[first * per..(first + j - i) * per] {
                match self.geo.variant {
                    FatVariant::Fat16 => buf.extend_from_slice(&(v as u16).to_le_bytes()),
                    FatVariant::Fat32 => buf.extend_from_slice(&v.to_le_bytes()),
                }
            }
            for k in 0..self.bpb.num_fats as u64 {
                let lba = self.geo.first_fat_sector
                    + k * self.bpb.sectors_per_fat as u64
                    + first as u64;
                if let Err(e) = self.dev.write_blocks(lba, &buf) {
                    self.dirty.extend(dirty[i..].iter().copied());
                    return Err(e.into());
                }
            }
            i = j;
        }
        if self.fsinfo_dirty && self.fsinfo.is_some() {
            let info = FsInfo {
                free_count: self.zero_entries,
                next_free: self.next_free,
            };
            self.dev
                .write_blocks(self.bpb.fsinfo_sector as u64, &info.to_sector())?;
            self.fsinfo = Some(info);
            self.fsinfo_dirty = false;
        }
        self.dev.flush()?;
        Ok(())
    }

    fn root_loc(&self) -> DirLoc {
        match self.geo.variant {
            FatVariant::Fat16 => DirLoc::FixedRoot,
            FatVariant::Fat32 => DirLoc::Chain(self.bpb.root_cluster),
        }
    }

    fn load_dir(&mut self, loc: DirLoc) -> Result<DirBuf, FatError> {
        let (lbas, clusters): (Vec<u64>, Vec<u32>) = match loc {
            DirLoc::FixedRoot => (
                (0..self.geo.root_dir_sectors)
                    .map(|i| self.geo.first_root_sector + i)
                    .collect(),
                Vec::new(),
            ),
            DirLoc::Chain(start) => {
                let clusters = self.chain(start)?;
                if clusters.len() * self.geo.cluster_bytes > MAX_DIR_ENTRIES * ENTRY_SIZE {
                    return Err(FatError::Corrupt(format!("directory at {start} is oversized")));
                }
                let lbas = clusters
                    .iter()
                    .flat_map(|&c| {
                        let base = self.geo.cluster_lba(c);
                        (0..self.geo.sectors_per_cluster).map(move |i| base + i)
                    })
                    .collect();
                (lbas, clusters)
            }
        };
        let mut data = vec![0u8; lbas.len() * SECTOR_SIZE];
        // Sectors within a cluster are contiguous; read run by run.
        let mut i = 0;
        while i < lbas.len() {
            let mut j = i + 1;
            while j < lbas.len() && lbas[j] == lbas[j - 1] + 1 && j - i < 128 {
                j += 1;
            }
            self.dev
                .read_blocks(lbas[i], &mut data[i * SECTOR_SIZE..j * SECTOR_SIZE])?;
            i = j;
        }
        Ok(DirBuf {
            loc,
            lbas,
            clusters,
            data,
        })
    }

    fn store_slots(&mut self, buf: &DirBuf, first: usize, count: usize) -> Result<(), FatError> {
        let per = SECTOR_SIZE / ENTRY_SIZE;
        for s in first / per..=(first + count - 1) / per {
            self.dev
                .write_blocks(buf.lbas[s], &buf.data[s * SECTOR_SIZE..(s + 1) * SECTOR_SIZE])?;
        }
        Ok(())
    }

    /// Walks `parts` from the root and returns the directory they name.
    fn dir_at(&mut self, parts: &[&str]) -> Result<DirBuf, FatError> {
        let mut buf = self.load_dir(self.root_loc())?;
        for (i, name) in parts.iter().enumerate() {
            let found = buf
                .live()
                .into_iter()
                .find(|l| l.entry.matches(name))
                .ok_or_else(|| FatError::NotFound(join(&parts[..=i])))?;
            if !found.entry.is_dir() {
                return Err(FatError::NotADirectory(join(&parts[..=i])));
            }
            let loc = if found.entry.first_cluster == 0 {
                self.root_loc()
            } else {
                DirLoc::Chain(found.entry.first_cluster)
            };
            buf = self.load_dir(loc)?;
        }
        Ok(buf)
    }

    fn lookup(&mut self, parts: &[&str]) -> Result<(DirBuf, Option<Located>), FatError> {
        let (name, parent) = parts.split_last().expect("non-root path");
        let buf = self.dir_at(parent)?;
        let found = buf.live().into_iter().find(|l| l.entry.matches(name));
        Ok((buf, found))
    }

    fn root_entry(&self) -> DirEntry {
        DirEntry {
            name: "/".into(),
            short_name: [b' '; 11],
            long_name: None,
            attributes: Attributes(Attributes::DIRECTORY),
            first_cluster: if self.geo.variant == FatVariant::Fat32 {
                self.bpb.root_cluster
            } else {
                0
            },
            size: 0,
            created: None,
            modified: None,
        }
    }

    pub fn stat(&mut self, path: &str) -> Result<DirEntry, FatError> {
        let parts = split_path(path)?;
        if parts.is_empty() {
            return Ok(self.root_entry());
        }
        match self.lookup(&parts)? {
            (_, Some(l)) => Ok(l.entry),
            (_, None) => Err(FatError::NotFound(join(&parts))),
        }
    }

    pub fn exists(&mut self, path: &str) -> Result<bool, FatError> {
        match self.stat(path) {
            Ok(_) => Ok(true),
            Err(FatError::NotFound(_)) => Ok(false),
            Err(e) => Err(e),
        }
    }

    /// Entries of a directory in on-disk order, without dot entries.
    pub fn list_dir(&mut self, path: &str) -> Result<Vec<DirEntry>, FatError> {
        let parts = split_path(path)?;
        Ok(self.dir_at(&parts)?.live().into_iter().map(|l| l.entry).collect())
    }

    /// Finds `n` consecutive free slots, growing the directory if needed.
    fn free_slots(&mut self, buf: &mut DirBuf, n: usize) -> Result<usize, FatError> {
        let end = dir::scan(&buf.data).end;
        let mut run = 0;
        for i in 0..buf.slots() {
            let b = buf.data[i * ENTRY_SIZE];
            if i >= end || b == dir::DELETED {
                run += 1;
                if run == n {
                    return Ok(i + 1 - n);
                }
            } else {
                run = 0;
            }
        }
        let DirLoc::Chain(_) = buf.loc else {
            return Err(FatError::DirectoryFull("root directory".into()));
        };
        let per_cluster = self.geo.cluster_bytes / ENTRY_SIZE;
        let grow = (n - run).div_ceil(per_cluster);
        if buf.slots() + grow * per_cluster > MAX_DIR_ENTRIES {
            return Err(FatError::DirectoryFull(format!("{MAX_DIR_ENTRIES} entries")));
        }
        let runs = self.reserve(grow as u32)?;
        let fresh: Vec<u32> = runs.iter().flat_map(|&(s, k)| s..s + k).collect();
        let zeros = vec![0u8; self.geo.cluster_bytes * fresh.len()];
        if let Err(e) = self.write_clusters(&runs, &zeros) {
            self.release(&runs);
            return Err(e);
        }
        let tail = *buf.clusters.last().expect("chain directory has clusters");
        self.link(&fresh);
        self.set_entry(tail, fresh[0]);
        for &c in &fresh {
            let base = self.geo.cluster_lba(c);
            buf.lbas.extend((0..self.geo.sectors_per_cluster).map(|i| base + i));
            buf.clusters.push(c);
        }
        buf.data.extend_from_slice(&zeros);
        Ok(buf.slots() - grow * per_cluster - run)
    }

    /// Writes a new entry (with a long name when needed) into `buf`.
    fn insert_entry(
        &mut self,
        buf: &mut DirBuf,
        name: &str,
        mut entry: ShortEntry,
    ) -> Result<DirEntry, FatError> {
        let units = dir::validate_long_name(name)?;
        let live = buf.live();
        let (short, long) = match dir::exact_short_name(name) {
            Some(s) if !live.iter().any(|l| l.raw.name == s) => (s, None),
            _ => {
                let s = dir::generate_short_name(name, |cand| {
                    live.iter().any(|l| &l.raw.name == cand)
                })
                .ok_or_else(|| FatError::DirectoryFull("no free short name".into()))?;
                (s, Some(units))
            }
        };
        entry.name = short;
        let lfn = long
            .as_ref()
            .map(|u| dir::lfn_entries(u, dir::lfn_checksum(&short)))
            .unwrap_or_default();
        let total = lfn.len() + 1;
        let first = self.free_slots(buf, total)?;
        for (i, e) in lfn.iter().enumerate() {
            buf.slot_mut(first + i).copy_from_slice(e);
        }
        buf.slot_mut(first + lfn.len()).copy_from_slice(&entry.to_bytes());
        self.store_slots(buf, first, total)?;
        Ok(DirEntry::from_short(&entry, long.map(|_| name.to_string())))
    }

    fn check_writable(&self) -> Result<(), FatError> {
        if self.dev.is_read_only() {
            Err(FatError::ReadOnly)
        } else {
            Ok(())
        }
    }

    pub fn create_dir(&mut self, path: &str) -> Result<DirEntry, FatError> {
        self.check_writable()?;
        let parts = split_path(path)?;
        let Some((name, parent_parts)) = parts.split_last() else {
            return Err(FatError::Exists("/".into()));
        };
        dir::validate_long_name(name)?;
        let (mut parent, existing) = self.lookup(&parts)?;
        if existing.is_some() {
            return Err(FatError::Exists(join(&parts)));
        }
        let runs = self.reserve(1)?;
        let c = runs[0].0;
        let now = self.clock.now();
        let mut dot = ShortEntry {
            name: *b".          ",
            attr: Attributes(Attributes::DIRECTORY),
            first_cluster: c,
            ..Default::default()
        };
        dot.stamp(now, true);
        // ".." names the root as cluster 0, even on FAT32.
        let parent_cluster = match parent.loc {
            DirLoc::Chain(p) if !parent_parts.is_empty() => p,
            _ => 0,
        };
        let mut dotdot = dot;
        dotdot.name = *b"..         ";
        dotdot.first_cluster = parent_cluster;
        let mut block = vec![0u8; self.geo.cluster_bytes];
        block[..32].copy_from_slice(&dot.to_bytes());
        block[32..64].copy_from_slice(&dotdot.to_bytes());
        if let Err(e) = self.write_clusters(&runs, &block) {
            self.release(&runs);
            return Err(e);
        }
        self.link(&[c]);
        let mut entry = dot;
        entry.first_cluster = c;
        match self.insert_entry(&mut parent, name, entry) {
            Ok(e) => {
                self.persist()?;
                Ok(e)
            }
            Err(err) => {
                self.set_entry(c, 0);
                self.persist()?;
                Err(err)
            }
        }
    }

    /// Removes a file, or an empty directory.
    pub fn remove(&mut self, path: &str) -> Result<(), FatError> {
        self.check_writable()?;
        let parts = split_path(path)?;
        if parts.is_empty() {
            return Err(FatError::NameInvalid("cannot remove the root directory".into()));
        }
        let (mut parent, found) = self.lookup(&parts)?;
        let l = found.ok_or_else(|| FatError::NotFound(join(&parts)))?;
        if l.entry.is_dir() && l.entry.first_cluster != 0 {
            let child = self.load_dir(DirLoc::Chain(l.entry.first_cluster))?;
            if !child.live().is_empty() {
                return Err(FatError::DirNotEmpty(join(&parts)));
            }
        }
        for s in l.first_slot..=l.short_slot {
            buf_mark_deleted(&mut parent, s);
        }
        self.store_slots(&parent, l.first_slot, l.short_slot - l.first_slot + 1)?;
        if l.entry.first_cluster != 0 {
            self.free_chain(l.entry.first_cluster)?;
        }
        self.persist()
    }

    /// Removes `path` and everything below it.
    pub fn remove_tree(&mut self, path: &str) -> Result<(), FatError> {
        let e = self.stat(path)?;
        if e.is_dir() {
            let base = path.trim_end_matches('/');
            for child in self.list_dir(path)? {
                self.remove_tree(&format!("{base}/{}", child.name))?;
            }
        }
        if split_path(path)?.is_empty() {
            return Ok(());
        }
        self.remove(path)
    }

    /// Starts writing a file. The name is checked now and again at commit.
    pub fn create_writer(&mut self, path: &str, overwrite: bool) -> Result<FileWriter, FatError> {
        self.check_writable()?;
        let parts = split_path(path)?;
        let Some(name) = parts.last() else {
            return Err(FatError::IsADirectory("/".into()));
        };
        dir::validate_long_name(name)?;
        if let (_, Some(l)) = self.lookup(&parts)? {
            if l.entry.is_dir() {
                return Err(FatError::IsADirectory(join(&parts)));
            }
            if !overwrite {
                return Err(FatError::Exists(join(&parts)));
            }
        }
        Ok(FileWriter {
            path: join(&parts),
            overwrite,
            runs: Vec::new(),
            pending: Vec::new(),
            size: 0,
        })
    }

    /// Appends data, writing every complete cluster to free space.
    pub fn write_chunk(&mut self, w: &mut FileWriter, data: &[u8]) -> Result<(), FatError> {
        if w.size + data.len() as u64 > u32::MAX as u64 {
            return Err(FatError::FileTooLarge);
        }
        let cb = self.geo.cluster_bytes;
        w.pending.extend_from_slice(data);
        w.size += data.len() as u64;
        let full = w.pending.len() / cb;
        if full == 0 {
            return Ok(());
        }
        let runs = match self.reserve(full as u32) {
            Ok(r) => r,
            Err(e) => {
                w.pending.truncate(w.pending.len() - data.len());
                w.size -= data.len() as u64;
                return Err(e);
            }
        };
        if let Err(e) = self.write_clusters(&runs, &w.pending[..full * cb]) {
            self.release(&runs);
            return Err(e);
        }
        w.pending.drain(..full * cb);
        for r in runs {
            match w.runs.last_mut() {
                Some((s, n)) if *s + *n == r.0 => *n += r.1,
                _ => w.runs.push(r),
            }
        }
        // The data sits in clusters the on-disk FAT still calls free, so it
        // can be made durable now; this keeps device caches small.
        self.dev.flush()?;
        Ok(())
    }

    /// Drops a writer and frees everything it allocated.
    pub fn abort(&mut self, w: FileWriter) {
        self.release(&w.runs);
    }

    /// Makes the file visible: links its chain and writes its entry. On
    /// failure all of the writer's clusters are released.
    pub fn commit(&mut self, mut w: FileWriter) -> Result<DirEntry, FatError> {
        let r = self.commit_inner(&mut w);
        if r.is_err() {
            self.release(&w.runs);
        }
        r
    }

    fn commit_inner(&mut self, w: &mut FileWriter) -> Result<DirEntry, FatError> {
        if !w.pending.is_empty() {
            let cb = self.geo.cluster_bytes;
            let run = self.reserve(1)?;
            let mut last = std::mem::take(&mut w.pending);
            last.resize(cb, 0);
            if let Err(e) = self.write_clusters(&run, &last) {
                self.release(&run);
                return Err(e);
            }
            match w.runs.last_mut() {
                Some((s, n)) if *s + *n == run[0].0 => *n += 1,
                _ => w.runs.push(run[0]),
            }
        }
        let parts = split_path(&w.path)?;
        let name = *parts.last().expect("file path");
        let (mut parent, existing) = self.lookup(&parts)?;
        let now = self.clock.now();
        let clusters: Vec<u32> = w.clusters().collect();
        match existing {
            Some(l) if l.entry.is_dir() => Err(FatError::IsADirectory(w.path.clone())),
            Some(_) if !w.overwrite => Err(FatError::Exists(w.path.clone())),
            Some(l) => {
                let mut e = l.raw;
                let old = e.first_cluster;
                e.first_cluster = self.link(&clusters);
                w.runs.clear();
                e.size = w.size as u32;
                e.attr = Attributes(e.attr.0 | Attributes::ARCHIVE);
                e.stamp(now, false);
                parent.slot_mut(l.short_slot).copy_from_slice(&e.to_bytes());
                self.store_slots(&parent, l.short_slot, 1)?;
                if old != 0 {
                    self.free_chain(old)?;
                }
                self.persist()?;
                Ok(DirEntry::from_short(&e, l.entry.long_name))
            }
            None => {
                let mut e = ShortEntry {
                    attr: Attributes(Attributes::ARCHIVE),
                    size: w.size as u32,
                    ..Default::default()
                };
                e.stamp(now, true);
                let first = self.link(&clusters);
                w.runs.clear();
                e.first_cluster = first;
                match self.insert_entry(&mut parent, name, e) {
                    Ok(d) => {
                        self.persist()?;
                        Ok(d)
                    }
                    Err(err) => {
                        for &c in &clusters {
                            self.set_entry(c, 0);
                        }
                        self.persist()?;
                        Err(err)
                    }
                }
            }
        }
    }

    /// Writes a whole file in one call.
    pub fn write_file(&mut self, path: &str, data: &[u8], overwrite: bool) -> Result<DirEntry, FatError> {
        let mut w = self.create_writer(path, overwrite)?;
        if let Err(e) = self.write_chunk(&mut w, data) {
            self.abort(w);
            return Err(e);
        }
        self.commit(w)
    }

    pub fn open(&mut self, path: &str) -> Result<FileReader, FatError> {
        let e = self.stat(path)?;
        if e.is_dir() {
            return Err(FatError::IsADirectory(path.into()));
        }
        if e.size > 0 && !self.valid_cluster(e.first_cluster) {
            return Err(FatError::Corrupt(format!(
                "{path}: {} bytes but first cluster {:#x}",
                e.size, e.first_cluster
            )));
        }
        Ok(FileReader {
            first_cluster: e.first_cluster,
            size: e.size,
            pos: 0,
            cluster: e.first_cluster,
        })
    }

    /// Reads up to `buf.len()` bytes from the cursor; 0 means end of file.
    pub fn read_chunk(&mut self, r: &mut FileReader, buf: &mut [u8]) -> Result<usize, FatError> {
        let cb = self.geo.cluster_bytes;
        let mut want = buf.len().min((r.size - r.pos) as usize);
        let mut out = 0;
        while want > 0 {
            let off = r.pos as usize % cb;
            // Extend over physically consecutive clusters.
            let mut last = r.cluster;
            let mut run = 1usize;
            let mut avail = cb - off;
            while avail < want && run < 64 {
                match self.next_cluster(last)? {
                    Some(n) if n == last + 1 => {
                        last = n;
                        run += 1;
                        avail += cb;
                    }
                    _ => break,
                }
            }
            let n = avail.min(want);
            let first_sector = off / SECTOR_SIZE;
            let end_sector = (off + n).div_ceil(SECTOR_SIZE);
            let mut tmp = vec![0u8; (end_sector - first_sector) * SECTOR_SIZE];
            self.dev.read_blocks(
                self.geo.cluster_lba(r.cluster) + first_sector as u64,
                &mut tmp,
            )?;
            let skip = off % SECTOR_SIZE;
            buf[out..out + n].copy_from_slice(&tmp[skip..skip + n]);
            out += n;
            want -= n;
            r.pos += n as u32;
            let passed = (off + n) / cb;
            if passed < run {
                r.cluster += passed as u32;
            } else if r.pos < r.size {
                r.cluster = self.next_cluster(last)?.ok_or_else(|| {
                    FatError::Corrupt(format!(
                        "chain from {} ends before {} bytes",
                        r.first_cluster, r.size
                    ))
                })?;
            }
        }
        Ok(out)
    }

    pub fn read_file(&mut self, path: &str) -> Result<Vec<u8>, FatError> {
        let mut r = self.open(path)?;
        let mut out = vec![0u8; r.size as usize];
        let mut done = 0;
        while done < out.len() {
            done += self.read_chunk(&mut r, &mut out[done..])?;
        }
        Ok(out)
    }

    /// Clusters a file of `bytes` occupies.
    pub fn clusters_for(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.geo.cluster_bytes as u64)
    }

    /// Full FAT scan: number of zero entries on disk-facing state.
    pub fn scan_free(&self) -> u32 {
        (2..=self.geo.max_cluster())
            .filter(|&c| self.fat_entry(c) == 0)
            .count() as u32
    }

    /// Consistency check of the mounted state against the device.
    pub fn check(&mut self) -> Result<Vec<Finding>, FatError> {
        fsck::check(self)
    }
}

fn buf_mark_deleted(buf: &mut DirBuf, slot: usize) {
    buf.slot_mut(slot)[0] = dir::DELETED;
}
