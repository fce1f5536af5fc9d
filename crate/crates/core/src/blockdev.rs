//! Sector-addressed storage backing each emulated flash drive.
//!
//! A [`BlockImage`] is a flat file of 512-byte sectors: byte offset of LBA `L`
//! is `L * 512`, with no header or container format. Writes are held in a
//! write-back cache until [`BlockImage::flush`]; a surprise removal calls
//! [`BlockImage::discard_unflushed`] so the file keeps its last flushed state.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Seek, SeekFrom};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const SECTOR_SIZE: usize = 512;
pub const MIN_SECTORS: u64 = 128;
pub const MAX_SECTORS: u64 = u32::MAX as u64;

pub type Sector = [u8; SECTOR_SIZE];

#[derive(Debug, Error)]
pub enum BlockError {
    #[error("path exists: {0}")]
    PathExists(PathBuf),
    #[error("sector count {0} out of range ({MIN_SECTORS}..={MAX_SECTORS})")]
    SizeOutOfRange(u64),
    #[error("image length {0} is not a whole number of 512-byte sectors")]
    BadLength(u64),
    #[error("lba {lba} out of range (sector count {sector_count})")]
    LbaOutOfRange { lba: u64, sector_count: u64 },
    #[error("image is read-only")]
    ReadOnly,
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

/// Errors seen by anything that consumes a [`BlockDevice`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("device-gone")]
    Gone,
    #[error("range-error: lba {lba} count {count} beyond {block_count} blocks")]
    Range { lba: u64, count: u64, block_count: u64 },
    #[error("write-protected")]
    ReadOnly,
    #[error("io-failed: {0}")]
    Io(String),
}

impl From<BlockError> for DeviceError {
    fn from(e: BlockError) -> Self {
        match e {
            BlockError::LbaOutOfRange { lba, sector_count } => DeviceError::Range {
                lba,
                count: 1,
                block_count: sector_count,
            },
            BlockError::ReadOnly => DeviceError::ReadOnly,
            other => DeviceError::Io(other.to_string()),
        }
    }
}

/// A 512-byte logical block interface. Implemented by [`BlockImage`],
/// [`MemDisk`] and the USB mass-storage host handle.
pub trait BlockDevice {
    fn block_count(&self) -> u64;

    fn is_read_only(&self) -> bool {
        false
    }

    /// Fill `buf` (a multiple of 512 bytes) starting at `lba`.
    fn read_blocks(&mut self, lba: u64, buf: &mut [u8]) -> Result<(), DeviceError>;

    /// Write `data` (a multiple of 512 bytes) starting at `lba`.
    fn write_blocks(&mut self, lba: u64, data: &[u8]) -> Result<(), DeviceError>;

    fn flush(&mut self) -> Result<(), DeviceError> {
        Ok(())
    }
}

pub(crate) fn check_range(lba: u64, len: usize, block_count: u64) -> Result<u64, DeviceError> {
    assert!(len % SECTOR_SIZE == 0, "buffer not sector aligned");
    let count = (len / SECTOR_SIZE) as u64;
    if lba.checked_add(count).map_or(true, |end| end > block_count) {
        return Err(DeviceError::Range {
            lba,
            count,
            block_count,
        });
    }
    Ok(count)
}

/// Raw disk image file.
#[derive(Debug)]
pub struct BlockImage {
    path: PathBuf,
    file: File,
    sector_count: u64,
    read_only: bool,
    dirty: BTreeMap<u64, Box<Sector>>,
}

impl BlockImage {
    /// Creates a zero-filled image of exactly `sector_count * 512` bytes.
    pub fn create(path: impl AsRef<Path>, sector_count: u64) -> Result<Self, BlockError> {
        let path = path.as_ref();
        if !(MIN_SECTORS..=MAX_SECTORS).contains(&sector_count) {
            return Err(BlockError::SizeOutOfRange(sector_count));
        }
        let file = match OpenOptions::new()
            .read(true)
            .write(true)
            .create_new(true)
            .open(path)
        {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                return Err(BlockError::PathExists(path.to_path_buf()))
            }
            Err(e) => return Err(e.into()),
        };
        file.set_len(sector_count * SECTOR_SIZE as u64)?;
        Ok(BlockImage {
            path: path.to_path_buf(),
            file,
            sector_count,
            read_only: false,
            dirty: BTreeMap::new(),
        })
    }

    pub fn open(path: impl AsRef<Path>, read_only: bool) -> Result<Self, BlockError> {
        let path = path.as_ref();
        let file = OpenOptions::new()
            .read(true)
            .write(!read_only)
            .open(path)?;
        let len = file.metadata()?.len();
        if len % SECTOR_SIZE as u64 != 0 {
            return Err(BlockError::BadLength(len));
        }
        let sector_count = len / SECTOR_SIZE as u64;
        if !(MIN_SECTORS..=MAX_SECTORS).contains(&sector_count) {
            return Err(BlockError::SizeOutOfRange(sector_count));
        }
        Ok(BlockImage {
            path: path.to_path_buf(),
            file,
            sector_count,
            read_only,
            dirty: BTreeMap::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn sector_count(&self) -> u64 {
        self.sector_count
    }

    pub fn sector_size(&self) -> usize {
        SECTOR_SIZE
    }

    pub fn read_only(&self) -> bool {
        self.read_only
    }

    /// Number of sectors written since the last flush.
    pub fn pending_writes(&self) -> usize {
        self.dirty.len()
    }

    fn check_lba(&self, lba: u64) -> Result<(), BlockError> {
        if lba >= self.sector_count {
            return Err(BlockError::LbaOutOfRange {
                lba,
                sector_count: self.sector_count,
            });
        }
        Ok(())
    }

    pub fn read_sector(&self, lba: u64) -> Result<Sector, BlockError> {
        self.check_lba(lba)?;
        if let Some(s) = self.dirty.get(&lba) {
            return Ok(**s);
        }
        let mut buf = [0u8; SECTOR_SIZE];
        self.file.read_exact_at(&mut buf, lba * SECTOR_SIZE as u64)?;
        Ok(buf)
    }

    pub fn write_sector(&mut self, lba: u64, data: &Sector) -> Result<(), BlockError> {
        self.check_lba(lba)?;
        if self.read_only {
            return Err(BlockError::ReadOnly);
        }
        self.dirty.insert(lba, Box::new(*data));
        Ok(())
    }

    /// Reads `buf.len() / 512` consecutive sectors.
    pub fn read_range(&self, lba: u64, buf: &mut [u8]) -> Result<(), BlockError> {
        let count = (buf.len() / SECTOR_SIZE) as u64;
        if count == 0 {
            return Ok(());
        }
        self.check_lba(lba)?;
        self.check_lba(lba + count - 1)?;
        self.file.read_exact_at(buf, lba * SECTOR_SIZE as u64)?;
        for (l, s) in self.dirty.range(lba..lba + count) {
            let off = ((l - lba) as usize) * SECTOR_SIZE;
            buf[off..off + SECTOR_SIZE].copy_from_slice(&s[..]);
        }
        Ok(())
    }

    pub fn write_range(&mut self, lba: u64, data: &[u8]) -> Result<(), BlockError> {
        let count = (data.len() / SECTOR_SIZE) as u64;
        if count == 0 {
            return Ok(());
        }
        self.check_lba(lba)?;
        self.check_lba(lba + count - 1)?;
        if self.read_only {
            return Err(BlockError::ReadOnly);
        }
        for (i, chunk) in data.chunks_exact(SECTOR_SIZE).enumerate() {
            let mut s = Box::new([0u8; SECTOR_SIZE]);
            s.copy_from_slice(chunk);
            self.dirty.insert(lba + i as u64, s);
        }
        Ok(())
    }

    /// Writes every cached sector to the file and syncs it.
    pub fn flush(&mut self) -> Result<(), BlockError> {
        if self.dirty.is_empty() {
            return Ok(());
        }
        let dirty = std::mem::take(&mut self.dirty);
        let mut run_start: Option<u64> = None;
        let mut run: Vec<u8> = Vec::new();
        let mut prev = 0u64;
        for (lba, s) in dirty {
            match run_start {
                Some(_) if lba == prev + 1 => {}
                Some(start) => {
                    self.file.write_all_at(&run, start * SECTOR_SIZE as u64)?;
                    run.clear();
                    run_start = Some(lba);
                }
                None => run_start = Some(lba),
            }
            run.extend_from_slice(&s[..]);
            prev = lba;
        }
        if let Some(start) = run_start {
            self.file.write_all_at(&run, start * SECTOR_SIZE as u64)?;
        }
        self.file.sync_data()?;
        Ok(())
    }

    /// Drops cached writes without persisting them (surprise removal).
    pub fn discard_unflushed(&mut self) -> usize {
        let n = self.dirty.len();
        self.dirty.clear();
        n
    }
}

impl Drop for BlockImage {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

impl BlockDevice for BlockImage {
    fn block_count(&self) -> u64 {
        self.sector_count
    }

    fn is_read_only(&self) -> bool {
        self.read_only
    }

    fn read_blocks(&mut self, lba: u64, buf: &mut [u8]) -> Result<(), DeviceError> {
        check_range(lba, buf.len(), self.sector_count)?;
        Ok(self.read_range(lba, buf)?)
    }

    fn write_blocks(&mut self, lba: u64, data: &[u8]) -> Result<(), DeviceError> {
        check_range(lba, data.len(), self.sector_count)?;
        Ok(self.write_range(lba, data)?)
    }

    fn flush(&mut self) -> Result<(), DeviceError> {
        Ok(BlockImage::flush(self)?)
    }
}

/// In-memory block device, handy for fixtures.
#[derive(Debug, Clone)]
pub struct MemDisk {
    data: Vec<u8>,
    read_only: bool,
}

impl MemDisk {
    pub fn new(sector_count: u64) -> Self {
        MemDisk {
            data: vec![0; sector_count as usize * SECTOR_SIZE],
            read_only: false,
        }
    }

    pub fn from_bytes(data: Vec<u8>) -> Self {
        assert!(data.len() % SECTOR_SIZE == 0);
        MemDisk {
            data,
            read_only: false,
        }
    }

    pub fn set_read_only(&mut self, ro: bool) {
        self.read_only = ro;
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.data
    }
}

impl BlockDevice for MemDisk {
    fn block_count(&self) -> u64 {
        (self.data.len() / SECTOR_SIZE) as u64
    }

    fn is_read_only(&self) -> bool {
        self.read_only
    }

    fn read_blocks(&mut self, lba: u64, buf: &mut [u8]) -> Result<(), DeviceError> {
        check_range(lba, buf.len(), self.block_count())?;
        let off = lba as usize * SECTOR_SIZE;
        buf.copy_from_slice(&self.data[off..off + buf.len()]);
        Ok(())
    }

    fn write_blocks(&mut self, lba: u64, data: &[u8]) -> Result<(), DeviceError> {
        check_range(lba, data.len(), self.block_count())?;
        if self.read_only {
            return Err(DeviceError::ReadOnly);
        }
        let off = lba as usize * SECTOR_SIZE;
        self.data[off..off + data.len()].copy_from_slice(data);
        Ok(())
    }
}

impl<T: BlockDevice + ?Sized> BlockDevice for &mut T {
    fn block_count(&self) -> u64 {
        (**self).block_count()
    }
    fn is_read_only(&self) -> bool {
        (**self).is_read_only()
    }
    fn read_blocks(&mut self, lba: u64, buf: &mut [u8]) -> Result<(), DeviceError> {
        (**self).read_blocks(lba, buf)
    }
    fn write_blocks(&mut self, lba: u64, data: &[u8]) -> Result<(), DeviceError> {
        (**self).write_blocks(lba, data)
    }
    fn flush(&mut self) -> Result<(), DeviceError> {
        (**self).flush()
    }
}

/// Size of the file at `path` must equal `sector_count * 512`; used by tests
/// and by `fsck` on raw images.
pub fn image_len(path: impl AsRef<Path>) -> io::Result<u64> {
    let mut f = File::open(path)?;
    f.seek(SeekFrom::End(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use sha2::{Digest, Sha256};

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn create_zero_filled_exact_length() {
        let d = tmp();
        let p = d.path().join("a.img");
        let img = BlockImage::create(&p, 2048).unwrap();
        assert_eq!(img.sector_count(), 2048);
        drop(img);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 1_048_576);
        assert!(bytes.iter().all(|&b| b == 0));
    }

    #[test]
    fn create_rejects_small_and_existing() {
        let d = tmp();
        let p = d.path().join("a.img");
        assert!(matches!(
            BlockImage::create(&p, 127),
            Err(BlockError::SizeOutOfRange(127))
        ));
        BlockImage::create(&p, 2048).unwrap();
        assert!(matches!(
            BlockImage::create(&p, 2048),
            Err(BlockError::PathExists(_))
        ));
    }

    #[test]
    fn read_after_write_and_bounds() {
        let d = tmp();
        let mut img = BlockImage::create(d.path().join("a.img"), 256).unwrap();
        let data = [0xA5u8; SECTOR_SIZE];
        img.write_sector(5, &data).unwrap();
        assert_eq!(img.read_sector(5).unwrap(), data);
        assert!(matches!(
            img.read_sector(256),
            Err(BlockError::LbaOutOfRange { lba: 256, .. })
        ));
        img.flush().unwrap();
        assert_eq!(img.read_sector(5).unwrap(), data);
    }

    #[test]
    fn read_only_rejects_writes() {
        let d = tmp();
        let p = d.path().join("a.img");
        drop(BlockImage::create(&p, 256).unwrap());
        let mut img = BlockImage::open(&p, true).unwrap();
        assert!(img.read_only());
        assert!(matches!(
            img.write_sector(0, &[1; SECTOR_SIZE]),
            Err(BlockError::ReadOnly)
        ));
    }

    #[test]
    fn discard_keeps_last_flushed_state() {
        let d = tmp();
        let p = d.path().join("a.img");
        let mut img = BlockImage::create(&p, 256).unwrap();
        img.write_sector(1, &[1; SECTOR_SIZE]).unwrap();
        img.flush().unwrap();
        img.write_sector(2, &[2; SECTOR_SIZE]).unwrap();
        assert_eq!(img.discard_unflushed(), 1);
        drop(img);
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes[512..1024].iter().all(|&b| b == 1));
        assert!(bytes[1024..1536].iter().all(|&b| b == 0));
    }

    #[test]
    fn byte_offset_of_lba_is_lba_times_512() {
        let d = tmp();
        let p = d.path().join("a.img");
        let mut img = BlockImage::create(&p, 256).unwrap();
        let mut s = [0u8; SECTOR_SIZE];
        s[0] = 0x42;
        img.write_sector(77, &s).unwrap();
        img.flush().unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes[77 * 512], 0x42);
        assert_eq!(image_len(&p).unwrap(), 256 * 512);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn random_write_sequences_read_back(ops in prop::collection::vec((0u64..200, any::<u8>(), any::<bool>()), 1..60)) {
            let d = tmp();
            let mut img = BlockImage::create(d.path().join("p.img"), 200).unwrap();
            let mut model = vec![[0u8; SECTOR_SIZE]; 200];
            for (lba, fill, flush) in ops {
                let s = [fill; SECTOR_SIZE];
                img.write_sector(lba, &s).unwrap();
                model[lba as usize] = s;
                if flush { img.flush().unwrap(); }
                prop_assert_eq!(img.read_sector(lba).unwrap(), s);
            }
            let mut all = vec![0u8; 200 * SECTOR_SIZE];
            img.read_range(0, &mut all).unwrap();
            for (i, m) in model.iter().enumerate() {
                prop_assert_eq!(&all[i * SECTOR_SIZE..(i + 1) * SECTOR_SIZE], &m[..]);
            }
        }

        #[test]
        fn reads_never_mutate_file(lbas in prop::collection::vec(0u64..128, 1..50)) {
            let d = tmp();
            let p = d.path().join("r.img");
            {
                let mut img = BlockImage::create(&p, 128).unwrap();
                for l in 0..128u64 { img.write_sector(l, &[l as u8; SECTOR_SIZE]).unwrap(); }
            }
            let before = Sha256::digest(std::fs::read(&p).unwrap());
            let img = BlockImage::open(&p, false).unwrap();
            for l in lbas { img.read_sector(l).unwrap(); }
            drop(img);
            let after = Sha256::digest(std::fs::read(&p).unwrap());
            prop_assert_eq!(before, after);
        }
    }
}
