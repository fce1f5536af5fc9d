//! 32-byte directory records: short (8.3) entries, long-name chains and
//! DOS timestamps.

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};

use super::FatError;

pub const ENTRY_SIZE: usize = 32;
pub const DELETED: u8 = 0xE5;
pub const END: u8 = 0x00;
pub const MAX_LONG_NAME: usize = 255;
const LFN_CHARS: usize = 13;
const LFN_LAST: u8 = 0x40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct Attributes(pub u8);

impl Attributes {
    pub const READ_ONLY: u8 = 0x01;
    pub const HIDDEN: u8 = 0x02;
    pub const SYSTEM: u8 = 0x04;
    pub const VOLUME_ID: u8 = 0x08;
    pub const DIRECTORY: u8 = 0x10;
    pub const ARCHIVE: u8 = 0x20;
    pub const LONG_NAME: u8 = 0x0F;

    pub fn is_dir(self) -> bool {
        self.0 & Self::DIRECTORY != 0
    }

    pub fn is_volume_label(self) -> bool {
        self.0 & (Self::VOLUME_ID | Self::DIRECTORY) == Self::VOLUME_ID
    }

    pub fn is_long_name(self) -> bool {
        self.0 & 0x3F == Self::LONG_NAME
    }

    pub fn contains(self, bit: u8) -> bool {
        self.0 & bit != 0
    }
}

/// On-disk layout of a short directory entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ShortEntry {
    pub name: [u8; 11],
    pub attr: Attributes,
    pub nt_case: u8,
    pub create_tenths: u8,
    pub create_time: u16,
    pub create_date: u16,
    pub access_date: u16,
    pub first_cluster: u32,
    pub write_time: u16,
    pub write_date: u16,
    pub size: u32,
}

impl ShortEntry {
    pub fn parse(b: &[u8]) -> ShortEntry {
        let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]);
        let mut name = [0u8; 11];
        name.copy_from_slice(&b[0..11]);
        ShortEntry {
            name,
            attr: Attributes(b[11]),
            nt_case: b[12],
            create_tenths: b[13],
            create_time: u16_at(14),
            create_date: u16_at(16),
            access_date: u16_at(18),
            first_cluster: (u16_at(20) as u32) << 16 | u16_at(26) as u32,
            write_time: u16_at(22),
            write_date: u16_at(24),
            size: u32::from_le_bytes([b[28], b[29], b[30], b[31]]),
        }
    }

    pub fn to_bytes(&self) -> [u8; ENTRY_SIZE] {
        let mut b = [0u8; ENTRY_SIZE];
        b[0..11].copy_from_slice(&self.name);
        b[11] = self.attr.0;
        b[12] = self.nt_case;
        b[13] = self.create_tenths;
        b[14..16].copy_from_slice(&self.create_time.to_le_bytes());
        b[16..18].copy_from_slice(&self.create_date.to_le_bytes());
        b[18..20].copy_from_slice(&self.access_date.to_le_bytes());
        b[20..22].copy_from_slice(&((self.first_cluster >> 16) as u16).to_le_bytes());
        b[22..24].copy_from_slice(&self.write_time.to_le_bytes());
        b[24..26].copy_from_slice(&self.write_date.to_le_bytes());
        b[26..28].copy_from_slice(&(self.first_cluster as u16).to_le_bytes());
        b[28..32].copy_from_slice(&self.size.to_le_bytes());
        b
    }

    pub fn stamp(&mut self, now: NaiveDateTime, created: bool) {
        let (date, time, tenths) = to_dos(now);
        if created {
            self.create_date = date;
            self.create_time = time;
            self.create_tenths = tenths;
        }
        self.write_date = date;
        self.write_time = time;
        self.access_date = date;
    }

    pub fn is_dot(&self) -> bool {
        &self.name == b".          " || &self.name == b"..         "
    }
}

/// A live directory entry as returned by listings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirEntry {
    /// Long name when present, otherwise the 8.3 name.
    pub name: String,
    pub short_name: [u8; 11],
    pub long_name: Option<String>,
    pub attributes: Attributes,
    pub first_cluster: u32,
    pub size: u32,
    pub created: Option<NaiveDateTime>,
    pub modified: Option<NaiveDateTime>,
}

impl DirEntry {
    pub fn from_short(e: &ShortEntry, long_name: Option<String>) -> DirEntry {
        let short = short_display(&e.name, e.nt_case);
        DirEntry {
            name: long_name.clone().unwrap_or_else(|| short.clone()),
            short_name: e.name,
            long_name,
            attributes: e.attr,
            first_cluster: e.first_cluster,
            size: e.size,
            created: from_dos(e.create_date, e.create_time, e.create_tenths),
            modified: from_dos(e.write_date, e.write_time, 0),
        }
    }

    pub fn is_dir(&self) -> bool {
        self.attributes.is_dir()
    }

    pub fn short_display(&self) -> String {
        short_display(&self.short_name, 0)
    }

    /// Case-insensitive match against the long name or the 8.3 name.
    pub fn matches(&self, name: &str) -> bool {
        let want = name.to_lowercase();
        self.long_name
            .as_deref()
            .is_some_and(|l| l.to_lowercase() == want)
            || short_display(&self.short_name, 0).to_lowercase() == want
    }
}

/// Checksum binding a long-name chain to its short entry.
pub fn lfn_checksum(short: &[u8; 11]) -> u8 {
    short
        .iter()
        .fold(0u8, |sum, &b| (sum >> 1 | sum << 7).wrapping_add(b))
}

/// Long-name entries for `name` in on-disk order (highest sequence first).
pub fn lfn_entries(name: &[u16], checksum: u8) -> Vec<[u8; ENTRY_SIZE]> {
    let n = name.len().div_ceil(LFN_CHARS);
    let mut out = Vec::with_capacity(n);
    for seq in (1..=n).rev() {
        let mut chars = [0xFFFFu16; LFN_CHARS];
        let start = (seq - 1) * LFN_CHARS;
        for (i, c) in chars.iter_mut().enumerate() {
            match name.get(start + i) {
                Some(&u) => *c = u,
                None if start + i == name.len() => *c = 0,
                None => {}
            }
        }
        let mut b = [0u8; ENTRY_SIZE];
        b[0] = seq as u8 | if seq == n { LFN_LAST } else { 0 };
        b[11] = Attributes::LONG_NAME;
        b[13] = checksum;
        let offsets = (1..11).step_by(2).chain((14..26).step_by(2)).chain((28..32).step_by(2));
        for (c, o) in chars.iter().zip(offsets) {
            b[o..o + 2].copy_from_slice(&c.to_le_bytes());
        }
        out.push(b);
    }
    out
}

fn lfn_chars(b: &[u8]) -> [u16; LFN_CHARS] {
    let mut chars = [0u16; LFN_CHARS];
    let offsets = (1..11).step_by(2).chain((14..26).step_by(2)).chain((28..32).step_by(2));
    for (c, o) in chars.iter_mut().zip(offsets) {
        *c = u16::from_le_bytes([b[o], b[o + 1]]);
    }
    chars
}

/// A parsed directory slot run: the entry plus where it lives.
#[derive(Debug, Clone)]
pub struct Located {
    pub entry: DirEntry,
    pub raw: ShortEntry,
    /// First slot of the run (the first LFN slot, or the short slot).
    pub first_slot: usize,
    pub short_slot: usize,
}

/// Result of scanning a directory's slots.
#[derive(Debug, Default)]
pub struct Scan {
    /// Live entries, including dot entries and volume labels.
    pub entries: Vec<Located>,
    /// Long-name slots not bound to a following short entry.
    pub orphan_lfn: usize,
    /// Index of the first end-of-directory slot, or the slot count.
    pub end: usize,
}

struct Pending {
    checksum: u8,
    next: u8,
    parts: Vec<[u16; LFN_CHARS]>,
    start: usize,
    slots: usize,
}

pub fn scan(data: &[u8]) -> Scan {
    let mut out = Scan::default();
    let mut pending: Option<Pending> = None;
    let slots = data.len() / ENTRY_SIZE;
    out.end = slots;
    for i in 0..slots {
        let b = &data[i * ENTRY_SIZE..(i + 1) * ENTRY_SIZE];
        if b[0] == END {
            out.end = i;
            break;
        }
        if b[0] == DELETED {
            if let Some(p) = pending.take() {
                out.orphan_lfn += p.slots;
            }
            continue;
        }
        if Attributes(b[11]).is_long_name() {
            let ord = b[0];
            if ord & LFN_LAST != 0 {
                if let Some(p) = pending.take() {
                    out.orphan_lfn += p.slots;
                }
                let n = ord & 0x1F;
                if n == 0 || n as usize > MAX_LONG_NAME.div_ceil(LFN_CHARS) {
                    out.orphan_lfn += 1;
                    continue;
                }
                let mut parts = vec![[0u16; LFN_CHARS]; n as usize];
                parts[n as usize - 1] = lfn_chars(b);
                pending = Some(Pending {
                    checksum: b[13],
                    next: n - 1,
                    parts,
                    start: i,
                    slots: 1,
                });
            } else {
                match pending.as_mut() {
                    Some(p) if p.next != 0 && ord & 0x1F == p.next && b[13] == p.checksum => {
                        p.parts[p.next as usize - 1] = lfn_chars(b);
                        p.next -= 1;
                        p.slots += 1;
                    }
                    _ => {
                        if let Some(p) = pending.take() {
                            out.orphan_lfn += p.slots;
                        }
                        out.orphan_lfn += 1;
                    }
                }
            }
            continue;
        }
        let raw = ShortEntry::parse(b);
        let mut first_slot = i;
        let mut long = None;
        if let Some(p) = pending.take() {
            if p.next == 0 && lfn_checksum(&raw.name) == p.checksum {
                let units: Vec<u16> = p
                    .parts
                    .iter()
                    .flatten()
                    .copied()
                    .take_while(|&u| u != 0)
                    .collect();
                long = Some(String::from_utf16_lossy(&units));
                first_slot = p.start;
            } else {
                out.orphan_lfn += p.slots;
            }
        }
        out.entries.push(Located {
            entry: DirEntry::from_short(&raw, long),
            raw,
            first_slot,
            short_slot: i,
        });
    }
    if let Some(p) = pending {
        out.orphan_lfn += p.slots;
    }
    out
}

/// Renders an 8.3 name, honouring the lowercase flags in byte 12.
pub fn short_display(name: &[u8; 11], nt_case: u8) -> String {
    let conv = |bytes: &[u8], lower: bool| -> String {
        bytes
            .iter()
            .map(|&b| {
                let c = if b < 0x80 { b as char } else { '_' };
                if lower {
                    c.to_ascii_lowercase()
                } else {
                    c
                }
            })
            .collect::<String>()
            .trim_end()
            .to_string()
    };
    let mut base_bytes = name[..8].to_vec();
    if base_bytes[0] == 0x05 {
        base_bytes[0] = DELETED;
    }
    let base = conv(&base_bytes, nt_case & 0x08 != 0);
    let ext = conv(&name[8..], nt_case & 0x10 != 0);
    if ext.is_empty() {
        base
    } else {
        format!("{base}.{ext}")
    }
}

fn short_char_ok(c: u8) -> bool {
    c.is_ascii_uppercase()
        || c.is_ascii_digit()
        || b"$%'-_@~`!(){}^#&".contains(&c)
        || c >= 0x80
}

/// Checks a long name and returns its UTF-16 form.
pub fn validate_long_name(name: &str) -> Result<Vec<u16>, FatError> {
    let bad = |why: &str| FatError::NameInvalid(format!("{name:?}: {why}"));
    if name.is_empty() {
        return Err(bad("empty"));
    }
    if name == "." || name == ".." {
        return Err(bad("reserved name"));
    }
    if name.ends_with(' ') || name.ends_with('.') {
        return Err(bad("trailing space or dot"));
    }
    if let Some(c) = name
        .chars()
        .find(|&c| (c as u32) < 0x20 || "\"*/:<>?\\|".contains(c))
    {
        return Err(bad(&format!("character {c:?} not allowed")));
    }
    let units: Vec<u16> = name.encode_utf16().collect();
    if units.len() > MAX_LONG_NAME {
        return Err(bad("longer than 255 characters"));
    }
    Ok(units)
}

/// The 11-byte form of `name` if it is already a valid uppercase 8.3 name.
pub fn exact_short_name(name: &str) -> Option<[u8; 11]> {
    if !name.is_ascii() {
        return None;
    }
    let (base, ext) = match name.split_once('.') {
        Some((b, e)) => (b, e),
        None => (name, ""),
    };
    if base.is_empty()
        || base.len() > 8
        || ext.len() > 3
        || ext.contains('.')
        || (name.contains('.') && ext.is_empty())
    {
        return None;
    }
    if !base.bytes().chain(ext.bytes()).all(|c| short_char_ok(c) && c < 0x80) {
        return None;
    }
    let mut out = [b' '; 11];
    out[..base.len()].copy_from_slice(base.as_bytes());
    out[8..8 + ext.len()].copy_from_slice(ext.as_bytes());
    if out[0] == DELETED {
        out[0] = 0x05;
    }
    Some(out)
}

/// Derives an 8.3 alias for a long name. The uppercased name is used as-is
/// when it fits and is free; otherwise a `~N` tail is appended.
pub fn generate_short_name(name: &str, taken: impl Fn(&[u8; 11]) -> bool) -> Option<[u8; 11]> {
    let upper = name.to_uppercase();
    if let Some(s) = exact_short_name(&upper) {
        if !taken(&s) {
            return Some(s);
        }
    }
    let map = |s: &str| -> Vec<u8> {
        s.chars()
            .filter(|&c| c != ' ' && c != '.')
            .map(|c| {
                let u = c.to_ascii_uppercase();
                if u.is_ascii() && short_char_ok(u as u8) {
                    u as u8
                } else {
                    b'_'
                }
            })
            .collect()
    };
    let trimmed = upper.trim_start_matches('.');
    let (base, ext) = match trimmed.rfind('.') {
        Some(i) if i > 0 => (map(&trimmed[..i]), map(&trimmed[i + 1..])),
        _ => (map(trimmed), Vec::new()),
    };
    let base = if base.is_empty() { b"_".to_vec() } else { base };
    let ext = &ext[..ext.len().min(3)];
    for n in 1u32..1_000_000 {
        let tail = format!("~{n}");
        let keep = base.len().min(8 - tail.len());
        let mut out = [b' '; 11];
        out[..keep].copy_from_slice(&base[..keep]);
        out[keep..keep + tail.len()].copy_from_slice(tail.as_bytes());
        out[8..8 + ext.len()].copy_from_slice(ext);
        if !taken(&out) {
            return Some(out);
        }
    }
    None
}

pub fn to_dos(t: NaiveDateTime) -> (u16, u16, u8) {
    let year = t.year().clamp(1980, 2107);
    let date = ((year - 1980) as u16) << 9 | (t.month() as u16) << 5 | t.day() as u16;
    let time = (t.hour() as u16) << 11 | (t.minute() as u16) << 5 | (t.second() / 2) as u16;
    let tenths = ((t.second() % 2) * 100 + t.nanosecond() / 10_000_000).min(199) as u8;
    (date, time, tenths)
}

pub fn from_dos(date: u16, time: u16, tenths: u8) -> Option<NaiveDateTime> {
    let d = NaiveDate::from_ymd_opt(
        1980 + (date >> 9) as i32,
        ((date >> 5) & 0x0F) as u32,
        (date & 0x1F) as u32,
    )?;
    let secs = (time & 0x1F) as u32 * 2 + tenths as u32 / 100;
    d.and_hms_milli_opt(
        (time >> 11) as u32,
        ((time >> 5) & 0x3F) as u32,
        secs,
        (tenths as u32 % 100) * 10,
    )
}
