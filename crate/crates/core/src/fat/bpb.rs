//! Boot sector, BIOS parameter block, FSInfo and format geometry.

use std::fmt;

use super::{FatError, Foreign};
use crate::blockdev::SECTOR_SIZE;

pub const FAT16_MIN_CLUSTERS: u64 = 4085;
pub const FAT32_MIN_CLUSTERS: u64 = 65525;
/// Highest cluster count whose cluster numbers stay below the reserved range.
pub const FAT32_MAX_CLUSTERS: u64 = 0x0FFF_FFF5;

const FSINFO_LEAD: u32 = 0x4161_5252;
const FSINFO_STRUC: u32 = 0x6141_7272;
const FSINFO_TRAIL: u32 = 0xAA55_0000;
const FAT16_ROOT_ENTRIES: u16 = 512;
const FAT32_RESERVED: u16 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FatVariant {
    Fat16,
    Fat32,
}

impl FatVariant {
    pub fn entry_bytes(self) -> usize {
        match self {
            FatVariant::Fat16 => 2,
            FatVariant::Fat32 => 4,
        }
    }

    pub fn from_cluster_count(cc: u64) -> Result<FatVariant, FatError> {
        if cc < FAT16_MIN_CLUSTERS {
            Err(FatError::UnsupportedVariant(Foreign::Fat12))
        } else if cc < FAT32_MIN_CLUSTERS {
            Ok(FatVariant::Fat16)
        } else {
            Ok(FatVariant::Fat32)
        }
    }

    pub fn eoc(self) -> u32 {
        match self {
            FatVariant::Fat16 => 0xFFFF,
            FatVariant::Fat32 => 0x0FFF_FFFF,
        }
    }

    pub fn bad(self) -> u32 {
        match self {
            FatVariant::Fat16 => 0xFFF7,
            FatVariant::Fat32 => 0x0FFF_FFF7,
        }
    }

    pub fn is_eoc(self, v: u32) -> bool {
        match self {
            FatVariant::Fat16 => v >= 0xFFF8,
            FatVariant::Fat32 => v & 0x0FFF_FFFF >= 0x0FFF_FFF8,
        }
    }

    pub fn media_entries(self) -> (u32, u32) {
        match self {
            FatVariant::Fat16 => (0xFFF8, 0xFFFF),
            FatVariant::Fat32 => (0x0FFF_FFF8, 0x0FFF_FFFF),
        }
    }

    fn fs_type(self) -> &'static [u8; 8] {
        match self {
            FatVariant::Fat16 => b"FAT16   ",
            FatVariant::Fat32 => b"FAT32   ",
        }
    }
}

impl fmt::Display for FatVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FatVariant::Fat16 => "FAT16",
            FatVariant::Fat32 => "FAT32",
        })
    }
}

impl std::str::FromStr for FatVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "fat16" => Ok(FatVariant::Fat16),
            "fat32" => Ok(FatVariant::Fat32),
            _ => Err(format!("unknown variant {s:?} (expected fat16 or fat32)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bpb {
    pub oem_name: [u8; 8],
    pub bytes_per_sector: u16,
    pub sectors_per_cluster: u8,
    pub reserved_sectors: u16,
    pub num_fats: u8,
    pub root_entry_count: u16,
    pub total_sectors: u32,
    pub media: u8,
    pub sectors_per_fat: u32,
    pub sectors_per_track: u16,
    pub num_heads: u16,
    pub hidden_sectors: u32,
    pub root_cluster: u32,
    pub fsinfo_sector: u16,
    pub backup_boot_sector: u16,
    pub drive_number: u8,
    pub volume_id: u32,
    pub volume_label: [u8; 11],
    /// True when the FAT32 extended layout is in use (16-bit FAT size is 0).
    pub fat32_layout: bool,
}

/// Derived layout of a validated BPB.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub variant: FatVariant,
    pub first_fat_sector: u64,
    pub root_dir_sectors: u64,
    pub first_root_sector: u64,
    pub first_data_sector: u64,
    pub cluster_count: u32,
    pub cluster_bytes: usize,
    pub sectors_per_cluster: u64,
    /// FAT entries that fit in one copy of the table.
    pub fat_entries: usize,
}

impl Geometry {
    pub fn cluster_lba(&self, n: u32) -> u64 {
        self.first_data_sector + (n as u64 - 2) * self.sectors_per_cluster
    }

    pub fn max_cluster(&self) -> u32 {
        self.cluster_count + 1
    }
}

fn u16_at(b: &[u8], o: usize) -> u16 {
    u16::from_le_bytes([b[o], b[o + 1]])
}

fn u32_at(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]])
}

impl Bpb {
    pub fn parse(b: &[u8]) -> Result<Bpb, FatError> {
        if b.len() < SECTOR_SIZE || b[510] != 0x55 || b[511] != 0xAA {
            return Err(FatError::BadSignature);
        }
        match &b[3..11] {
            b"NTFS    " => return Err(FatError::UnsupportedVariant(Foreign::Ntfs)),
            b"EXFAT   " => return Err(FatError::UnsupportedVariant(Foreign::ExFat)),
            _ => {}
        }
        let bad = |s: String| Err(FatError::InconsistentBpb(s));
        let bps = u16_at(b, 11);
        if bps as usize != SECTOR_SIZE {
            return bad(format!("bytes per sector {bps}, only 512 is supported"));
        }
        let spc = b[13];
        if spc == 0 || !spc.is_power_of_two() {
            return bad(format!("sectors per cluster {spc} is not a power of two"));
        }
        let reserved = u16_at(b, 14);
        if reserved == 0 {
            return bad("zero reserved sectors".into());
        }
        let nfats = b[16];
        if nfats == 0 {
            return bad("no FAT copies".into());
        }
        let tot16 = u16_at(b, 19);
        let total = if tot16 != 0 { tot16 as u32 } else { u32_at(b, 32) };
        if total == 0 {
            return bad("total sector count is zero".into());
        }
        let fatsz16 = u16_at(b, 22);
        let fat32_layout = fatsz16 == 0;
        let ext = if fat32_layout { 64 } else { 36 };
        let mut label = [0u8; 11];
        let has_ext = b[ext + 2] == 0x29;
        if has_ext {
            label.copy_from_slice(&b[ext + 7..ext + 18]);
        } else {
            label.copy_from_slice(b"NO NAME    ");
        }
        let mut oem = [0u8; 8];
        oem.copy_from_slice(&b[3..11]);
        Ok(Bpb {
            oem_name: oem,
            bytes_per_sector: bps,
            sectors_per_cluster: spc,
            reserved_sectors: reserved,
            num_fats: nfats,
            root_entry_count: u16_at(b, 17),
            total_sectors: total,
            media: b[21],
            sectors_per_fat: if fat32_layout { u32_at(b, 36) } else { fatsz16 as u32 },
            sectors_per_track: u16_at(b, 24),
            num_heads: u16_at(b, 26),
            hidden_sectors: u32_at(b, 28),
            root_cluster: if fat32_layout { u32_at(b, 44) } else { 0 },
            fsinfo_sector: if fat32_layout { u16_at(b, 48) } else { 0 },
            backup_boot_sector: if fat32_layout { u16_at(b, 50) } else { 0 },
            drive_number: b[ext],
            volume_id: if has_ext { u32_at(b, ext + 3) } else { 0 },
            volume_label: label,
            fat32_layout,
        })
    }

    pub fn geometry(&self) -> Result<Geometry, FatError> {
        let bad = |s: String| Err(FatError::InconsistentBpb(s));
        if self.sectors_per_fat == 0 {
            return bad("zero sectors per FAT".into());
        }
        let root_dir_sectors = (self.root_entry_count as u64 * 32).div_ceil(SECTOR_SIZE as u64);
        let meta = self.reserved_sectors as u64
            + self.num_fats as u64 * self.sectors_per_fat as u64
            + root_dir_sectors;
        if meta >= self.total_sectors as u64 {
            return bad(format!(
                "metadata ({meta} sectors) fills the {}-sector volume",
                self.total_sectors
            ));
        }
        let spc = self.sectors_per_cluster as u64;
        let cc = (self.total_sectors as u64 - meta) / spc;
        let variant = FatVariant::from_cluster_count(cc)?;
        if cc > FAT32_MAX_CLUSTERS {
            return bad(format!("{cc} clusters exceeds the FAT32 limit"));
        }
        match variant {
            FatVariant::Fat16 if self.fat32_layout || self.root_entry_count == 0 => {
                return bad(format!("{cc} clusters implies FAT16 but the BPB uses the FAT32 layout"));
            }
            FatVariant::Fat32 if !self.fat32_layout || self.root_entry_count != 0 => {
                return bad(format!("{cc} clusters implies FAT32 but the BPB uses the FAT16 layout"));
            }
            _ => {}
        }
        let fat_entries =
            self.sectors_per_fat as usize * SECTOR_SIZE / variant.entry_bytes();
        if fat_entries < cc as usize + 2 {
            return bad(format!(
                "FAT holds {fat_entries} entries but {} clusters need {}",
                cc,
                cc + 2
            ));
        }
        if variant == FatVariant::Fat32
            && (self.root_cluster < 2 || self.root_cluster as u64 > cc + 1)
        {
            return bad(format!("root cluster {} out of range", self.root_cluster));
        }
        let first_fat_sector = self.reserved_sectors as u64;
        let first_root_sector =
            first_fat_sector + self.num_fats as u64 * self.sectors_per_fat as u64;
        Ok(Geometry {
            variant,
            first_fat_sector,
            root_dir_sectors,
            first_root_sector,
            first_data_sector: meta,
            cluster_count: cc as u32,
            cluster_bytes: spc as usize * SECTOR_SIZE,
            sectors_per_cluster: spc,
            fat_entries,
        })
    }

    pub fn to_sector(&self) -> [u8; SECTOR_SIZE] {
        let mut b = [0u8; SECTOR_SIZE];
        let jump: [u8; 3] = if self.fat32_layout { [0xEB, 0x58, 0x90] } else { [0xEB, 0x3C, 0x90] };
        b[0..3].copy_from_slice(&jump);
        b[3..11].copy_from_slice(&self.oem_name);
        b[11..13].copy_from_slice(&self.bytes_per_sector.to_le_bytes());
        b[13] = self.sectors_per_cluster;
        b[14..16].copy_from_slice(&self.reserved_sectors.to_le_bytes());
        b[16] = self.num_fats;
        b[17..19].copy_from_slice(&self.root_entry_count.to_le_bytes());
        if self.total_sectors < 0x10000 && !self.fat32_layout {
            b[19..21].copy_from_slice(&(self.total_sectors as u16).to_le_bytes());
        } else {
            b[32..36].copy_from_slice(&self.total_sectors.to_le_bytes());
        }
        b[21] = self.media;
        b[24..26].copy_from_slice(&self.sectors_per_track.to_le_bytes());
        b[26..28].copy_from_slice(&self.num_heads.to_le_bytes());
        b[28..32].copy_from_slice(&self.hidden_sectors.to_le_bytes());
        let (ext, variant) = if self.fat32_layout {
            b[36..40].copy_from_slice(&self.sectors_per_fat.to_le_bytes());
            b[44..48].copy_from_slice(&self.root_cluster.to_le_bytes());
            b[48..50].copy_from_slice(&self.fsinfo_sector.to_le_bytes());
            b[50..52].copy_from_slice(&self.backup_boot_sector.to_le_bytes());
            (64, FatVariant::Fat32)
        } else {
            b[22..24].copy_from_slice(&(self.sectors_per_fat as u16).to_le_bytes());
            (36, FatVariant::Fat16)
        };
        b[ext] = self.drive_number;
        b[ext + 2] = 0x29;
        b[ext + 3..ext + 7].copy_from_slice(&self.volume_id.to_le_bytes());
        b[ext + 7..ext + 18].copy_from_slice(&self.volume_label);
        b[ext + 18..ext + 26].copy_from_slice(variant.fs_type());
        b[510] = 0x55;
        b[511] = 0xAA;
        b
    }
}

/// FSInfo hints (FAT32 only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FsInfo {
    pub free_count: u32,
    pub next_free: u32,
}

impl FsInfo {
    pub const UNKNOWN: u32 = 0xFFFF_FFFF;

    pub fn parse(b: &[u8]) -> Option<FsInfo> {
        if u32_at(b, 0) != FSINFO_LEAD || u32_at(b, 484) != FSINFO_STRUC || u32_at(b, 508) != FSINFO_TRAIL {
            return None;
        }
        Some(FsInfo {
            free_count: u32_at(b, 488),
            next_free: u32_at(b, 492),
        })
    }

    pub fn to_sector(&self) -> [u8; SECTOR_SIZE] {
        let mut b = [0u8; SECTOR_SIZE];
        b[0..4].copy_from_slice(&FSINFO_LEAD.to_le_bytes());
        b[484..488].copy_from_slice(&FSINFO_STRUC.to_le_bytes());
        b[488..492].copy_from_slice(&self.free_count.to_le_bytes());
        b[492..496].copy_from_slice(&self.next_free.to_le_bytes());
        b[508..512].copy_from_slice(&FSINFO_TRAIL.to_le_bytes());
        b
    }
}

/// Cluster size used when the caller does not pick one.
pub fn default_sectors_per_cluster(variant: FatVariant, total_sectors: u64) -> u8 {
    match variant {
        FatVariant::Fat16 => match total_sectors {
            ..=32_680 => 2,
            ..=262_144 => 4,
            ..=524_288 => 8,
            ..=1_048_576 => 16,
            ..=2_097_152 => 32,
            _ => 64,
        },
        FatVariant::Fat32 => match total_sectors {
            ..=532_480 => 1,
            ..=16_777_216 => 8,
            ..=33_554_432 => 16,
            ..=67_108_864 => 32,
            _ => 64,
        },
    }
}

/// Volume label bytes: uppercase ASCII, space padded, `NO NAME` if empty.
pub fn label_bytes(label: Option<&str>) -> Result<[u8; 11], FatError> {
    let mut out = *b"NO NAME    ";
    let Some(l) = label.filter(|l| !l.is_empty()) else {
        return Ok(out);
    };
    let up = l.to_ascii_uppercase();
    if up.len() > 11
        || !up
            .bytes()
            .all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || b" $%'-_@~`!(){}^#&".contains(&c))
    {
        return Err(FatError::NameInvalid(format!(
            "volume label {l:?}: up to 11 of A-Z 0-9 space $%'-_@~`!(){{}}^#&"
        )));
    }
    out = [b' '; 11];
    out[..up.len()].copy_from_slice(up.as_bytes());
    Ok(out)
}

/// Computes a BPB for formatting `total_sectors` as `variant`.
pub fn plan(
    total_sectors: u64,
    variant: FatVariant,
    sectors_per_cluster: Option<u8>,
    label: [u8; 11],
    volume_id: u32,
) -> Result<Bpb, FatError> {
    let total = total_sectors.min(u32::MAX as u64);
    let spc = sectors_per_cluster.unwrap_or_else(|| default_sectors_per_cluster(variant, total));
    if spc == 0 || !spc.is_power_of_two() || spc > 128 {
        return Err(FatError::InconsistentBpb(format!(
            "sectors per cluster {spc} must be a power of two in 1..=128"
        )));
    }
    let (reserved, root_entries) = match variant {
        FatVariant::Fat16 => (1u16, FAT16_ROOT_ENTRIES),
        FatVariant::Fat32 => (FAT32_RESERVED, 0),
    };
    let root_dir_sectors = (root_entries as u64 * 32).div_ceil(SECTOR_SIZE as u64);
    let per_sector = (SECTOR_SIZE / variant.entry_bytes()) as u64;
    let mismatch = |cc: u64| FatError::VariantSizeMismatch {
        variant,
        cluster_count: cc,
    };
    // Smallest FAT that still covers every cluster left after it. Coverage
    // is monotone in the FAT size, so bisect.
    let clusters = |fatsz: u64| -> Option<u64> {
        let meta = reserved as u64 + 2 * fatsz + root_dir_sectors;
        (meta < total).then(|| (total - meta) / spc as u64)
    };
    let covers = |fatsz: u64| clusters(fatsz).map_or(true, |cc| (cc + 2).div_ceil(per_sector) <= fatsz);
    let (mut lo, mut hi) = (1u64, total);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if covers(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let fatsz = lo;
    let cc = clusters(fatsz).ok_or_else(|| mismatch(0))?;
    let fits = match variant {
        FatVariant::Fat16 => (FAT16_MIN_CLUSTERS..FAT32_MIN_CLUSTERS).contains(&cc),
        FatVariant::Fat32 => (FAT32_MIN_CLUSTERS..=FAT32_MAX_CLUSTERS).contains(&cc),
    };
    if !fits {
        return Err(mismatch(cc));
    }
    let fat32 = variant == FatVariant::Fat32;
    Ok(Bpb {
        oem_name: *b"USBBRDG ",
        bytes_per_sector: SECTOR_SIZE as u16,
        sectors_per_cluster: spc,
        reserved_sectors: reserved,
        num_fats: 2,
        root_entry_count: root_entries,
        total_sectors: total as u32,
        media: 0xF8,
        sectors_per_fat: fatsz as u32,
        sectors_per_track: 63,
        num_heads: 255,
        hidden_sectors: 0,
        root_cluster: if fat32 { 2 } else { 0 },
        fsinfo_sector: if fat32 { 1 } else { 0 },
        backup_boot_sector: if fat32 { 6 } else { 0 },
        drive_number: 0x80,
        volume_id,
        volume_label: label,
        fat32_layout: fat32,
    })
}
