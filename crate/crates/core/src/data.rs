//! Labeled ciphertext datasets for a one-bit-apart message pair.
//!
//! Every record is the single CBC ciphertext block of either `p1` (label 0,
//! the positive class) or `p2` (label 1), binarized MSB-first. Sample `i`
//! draws its IV from ChaCha stream `i` of the dataset seed, and the record
//! order comes from a separate shuffle stream, so generation is identical
//! for any worker count.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::stream_rng;
use crate::speck::{
    cbc_decrypt_with, cbc_encrypt_with, check_rounds, key_schedule, BlockState, CipherKey,
    InitializationVector,
};

pub const DATASET_MAGIC: [u8; 4] = *b"MCDS";
pub const DATASET_VERSION: u16 = 1;
/// Fixed header length in bytes.
pub const HEADER_LEN: usize = 61;
/// Ciphertext (4) plus label (1).
pub const RECORD_LEN: usize = 5;

const SHUFFLE_STREAM: u64 = u64::MAX;
const FLAG_STORE_IVS: u8 = 0b01;
const FLAG_FIXED_IV: u8 = 0b10;

/// Training key `K1`.
pub const K1_BYTES: [u8; 8] = [0x59, 0xfd, 0x06, 0x41, 0x5f, 0x53, 0xdb, 0x99];
/// Evaluation key `K2`.
pub const K2_BYTES: [u8; 8] = [0xfd, 0xfe, 0x9c, 0xa6, 0x10, 0x5c, 0xb9, 0xc7];

/// The two fixed experiment keys `(K1, K2)`.
pub fn default_keys() -> (CipherKey, CipherKey) {
    (
        CipherKey::from_bytes(K1_BYTES),
        CipherKey::from_bytes(K2_BYTES),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KeyId {
    K1,
    K2,
    Custom,
}

impl KeyId {
    fn to_byte(self) -> u8 {
        match self {
            KeyId::Custom => 0,
            KeyId::K1 => 1,
            KeyId::K2 => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(KeyId::Custom),
            1 => Ok(KeyId::K1),
            2 => Ok(KeyId::K2),
            _ => Err(Error::Malformed(format!("unknown key id {b}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KeyId::K1 => "k1",
            KeyId::K2 => "k2",
            KeyId::Custom => "custom",
        }
    }
}

/// A key together with the identifier recorded in dataset headers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NamedKey {
    pub id: KeyId,
    pub key: CipherKey,
}

impl NamedKey {
    pub fn k1() -> Self {
        NamedKey {
            id: KeyId::K1,
            key: default_keys().0,
        }
    }

    pub fn k2() -> Self {
        NamedKey {
            id: KeyId::K2,
            key: default_keys().1,
        }
    }

    /// `k1`, `k2`, or 16 hex digits.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "k1" => Ok(Self::k1()),
            "k2" => Ok(Self::k2()),
            other => {
                let key = CipherKey::from_hex(other)?;
                let id = if key == default_keys().0 {
                    KeyId::K1
                } else if key == default_keys().1 {
                    KeyId::K2
                } else {
                    KeyId::Custom
                };
                Ok(NamedKey { id, key })
            }
        }
    }

    /// `k1`/`k2` for the fixed keys, hex otherwise.
    pub fn label(&self) -> String {
        match self.id {
            KeyId::Custom => self.key.to_hex(),
            id => id.name().to_string(),
        }
    }
}

/// Two single-block messages at Hamming distance one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MessagePair {
    p1: u32,
    p2: u32,
}

impl MessagePair {
    pub fn new(p1: u32, p2: u32) -> Result<Self> {
        if (p1 ^ p2).count_ones() != 1 {
            return Err(Error::Config(format!(
                "messages {p1:#010x} and {p2:#010x} must differ in exactly one bit"
            )));
        }
        Ok(MessagePair { p1, p2 })
    }

    pub fn p1(&self) -> u32 {
        self.p1
    }

    pub fn p2(&self) -> u32 {
        self.p2
    }

    pub fn message(&self, label: ClassLabel) -> u32 {
        match label {
            ClassLabel::First => self.p1,
            ClassLabel::Second => self.p2,
        }
    }
}

impl Default for MessagePair {
    fn default() -> Self {
        MessagePair { p1: 0, p2: 1 }
    }
}

/// `First` marks ciphertexts of `p1` and is the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    First,
    Second,
}

impl ClassLabel {
    pub fn as_u8(self) -> u8 {
        match self {
            ClassLabel::First => 0,
            ClassLabel::Second => 1,
        }
    }

    pub fn from_u8(b: u8) -> Result<Self> {
        match b {
            0 => Ok(ClassLabel::First),
            1 => Ok(ClassLabel::Second),
            _ => Err(Error::Malformed(format!("label byte {b}"))),
        }
    }

    /// Probability target: 0.0 for `First`, 1.0 for `Second`.
    pub fn target(self) -> f64 {
        self.as_u8() as f64
    }

    pub fn index(self) -> usize {
        self.as_u8() as usize
    }
}

/// 32 bits, index 0 is the block's most significant bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BitVector32 {
    bits: [u8; 32],
}

impl BitVector32 {
    pub fn from_bits(bits: [u8; 32]) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Malformed("bit values must be 0 or 1".into()));
        }
        Ok(BitVector32 { bits })
    }

    pub fn bits(&self) -> &[u8; 32] {
        &self.bits
    }
}

pub fn to_bit_vector(block: u32) -> BitVector32 {
    let mut bits = [0u8; 32];
    for (i, b) in bits.iter_mut().enumerate() {
        *b = ((block >> (31 - i)) & 1) as u8;
    }
    BitVector32 { bits }
}

pub fn from_bit_vector(v: &BitVector32) -> u32 {
    v.bits.iter().fold(0u32, |acc, &b| (acc << 1) | b as u32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DatasetRecord {
    pub ciphertext: BitVector32,
    pub label: ClassLabel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IvMode {
    /// Fresh IV per sample.
    #[default]
    Random,
    /// One constant IV for every sample; each class collapses to a single
    /// ciphertext. Only useful as a learnability check.
    Fixed(u32),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub key: NamedKey,
    pub rounds: usize,
    pub samples_per_class: u64,
    pub seed: u64,
    pub message_pair: MessagePair,
    pub iv_mode: IvMode,
    pub store_ivs: bool,
}

impl GeneratorConfig {
    pub fn new(key: NamedKey, rounds: usize, samples_per_class: u64, seed: u64) -> Self {
        GeneratorConfig {
            key,
            rounds,
            samples_per_class,
            seed,
            message_pair: MessagePair::default(),
            iv_mode: IvMode::Random,
            store_ivs: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rounds(self.rounds)?;
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be at least 1".into()));
        }
        MessagePair::new(self.message_pair.p1, self.message_pair.p2)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u16,
    pub key_id: KeyId,
    /// Master key bytes, most-significant word first.
    pub key: [u8; 8],
    pub rounds: u8,
    pub message_pair: MessagePair,
    pub seed: u64,
    pub record_count: u64,
    /// Records per label, indexed by `ClassLabel::index`.
    pub class_counts: [u64; 2],
    pub store_ivs: bool,
    pub iv_mode: IvMode,
}

impl DatasetHeader {
    pub fn named_key(&self) -> NamedKey {
        NamedKey {
            id: self.key_id,
            key: CipherKey::from_bytes(self.key),
        }
    }

    pub fn rounds(&self) -> usize {
        self.rounds as usize
    }

    /// True when both headers describe the same generation stream.
    pub fn same_source(&self, other: &DatasetHeader) -> bool {
        self.key == other.key
            && self.rounds == other.rounds
            && self.seed == other.seed
            && self.message_pair == other.message_pair
            && self.iv_mode == other.iv_mode
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DatasetRecord>,
    pub ivs: Option<Vec<u32>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<ClassLabel> {
        self.records.iter().map(|r| r.label).collect()
    }

    fn check_invariants(&self) -> Result<()> {
        let h = &self.header;
        if h.record_count != self.records.len() as u64 {
            return Err(Error::Malformed(
                "record count disagrees with records".into(),
            ));
        }
        let mut counts = [0u64; 2];
        for r in &self.records {
            counts[r.label.index()] += 1;
        }
        if counts != h.class_counts {
            return Err(Error::Malformed(format!(
                "class counts {:?} disagree with header {:?}",
                counts, h.class_counts
            )));
        }
        match (&self.ivs, h.store_ivs) {
            (Some(ivs), true) if ivs.len() == self.records.len() => Ok(()),
            (None, false) => Ok(()),
            _ => Err(Error::Malformed(
                "IV list disagrees with store-IV flag".into(),
            )),
        }
    }

    /// Copy with labels permuted by a seeded shuffle; inputs untouched.
    /// Labels become independent of the ciphertexts while class balance holds.
    pub fn with_shuffled_labels(&self, seed: u64) -> Dataset {
        let mut labels = self.labels();
        labels.shuffle(&mut stream_rng(seed, SHUFFLE_STREAM));
        let mut out = self.clone();
        for (r, l) in out.records.iter_mut().zip(labels) {
            r.label = l;
        }
        out
    }

    /// Subset by record index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let records: Vec<_> = indices.iter().map(|&i| self.records[i]).collect();
        let ivs = self
            .ivs
            .as_ref()
            .map(|v| indices.iter().map(|&i| v[i]).collect());
        let mut counts = [0u64; 2];
        for r in &records {
            counts[r.label.index()] += 1;
        }
        let header = DatasetHeader {
            record_count: records.len() as u64,
            class_counts: counts,
            ..self.header.clone()
        };
        Dataset {
            header,
            records,
            ivs,
        }
    }
}

pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let sched = key_schedule(cfg.key.key, cfg.rounds)?;
    let n = usize::try_from(cfg.samples_per_class)
        .map_err(|_| Error::Config("samples_per_class too large".into()))?;

    let mut labels: Vec<ClassLabel> = std::iter::repeat(ClassLabel::First)
        .take(n)
        .chain(std::iter::repeat(ClassLabel::Second).take(n))
        .collect();
    labels.shuffle(&mut stream_rng(cfg.seed, SHUFFLE_STREAM));

    let pair = cfg.message_pair;
    let samples: Vec<(DatasetRecord, u32)> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| {
            let iv = match cfg.iv_mode {
                IvMode::Random => stream_rng(cfg.seed, i as u64).gen::<u32>(),
                IvMode::Fixed(v) => v,
            };
            let pt = BlockState::from_u32(pair.message(label));
            let ct = cbc_encrypt_with(&[pt], &sched, InitializationVector::from_u32(iv))
                .expect("single-block message")[0];
            (
                DatasetRecord {
                    ciphertext: to_bit_vector(ct.to_u32()),
                    label,
                },
                iv,
            )
        })
        .collect();

    let (records, ivs): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
    let header = DatasetHeader {
        version: DATASET_VERSION,
        key_id: cfg.key.id,
        key: cfg.key.key.to_bytes(),
        rounds: cfg.rounds as u8,
        message_pair: pair,
        seed: cfg.seed,
        record_count: records.len() as u64,
        class_counts: [cfg.samples_per_class, cfg.samples_per_class],
        store_ivs: cfg.store_ivs,
        iv_mode: cfg.iv_mode,
    };
    Ok(Dataset {
        header,
        records,
        ivs: cfg.store_ivs.then_some(ivs),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditReport {
    pub checked: usize,
    /// Indices of records that did not decrypt to their labeled message.
    pub mismatches: Vec<usize>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Decrypts every record with its stored IV and compares against the
/// labeled plaintext.
pub fn audit_dataset(ds: &Dataset) -> Result<AuditReport> {
    let ivs = ds
        .ivs
        .as_ref()
        .ok_or_else(|| Error::Incompatible("dataset was generated without stored IVs".into()))?;
    let h = &ds.header;
    let sched = key_schedule(CipherKey::from_bytes(h.key), h.rounds())?;
    let mismatches = ds
        .records
        .iter()
        .zip(ivs)
        .enumerate()
        .filter_map(|(i, (r, &iv))| {
            let ct = BlockState::from_u32(from_bit_vector(&r.ciphertext));
            let pt = cbc_decrypt_with(InitializationVector::from_u32(iv), &[ct], &sched)
                .expect("single block")[0];
            (pt.to_u32() != h.message_pair.message(r.label)).then_some(i)
        })
        .collect();
    Ok(AuditReport {
        checked: ds.len(),
        mismatches,
    })
}

/// Stratified split: each class contributes `round(fraction * n_class)`
/// records to the first part, chosen by a seeded shuffle. Both parts keep
/// the original relative order.
pub fn split_dataset(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "split fraction {fraction} must lie strictly between 0 and 1"
        )));
    }
    let mut in_first = vec![false; ds.len()];
    for class in [ClassLabel::First, ClassLabel::Second] {
        let mut idx: Vec<usize> = ds
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == class)
            .map(|(i, _)| i)
            .collect();
        let take = (fraction * idx.len() as f64).round() as usize;
        idx.shuffle(&mut stream_rng(seed, class.as_u8() as u64));
        for &i in &idx[..take] {
            in_first[i] = true;
        }
    }
    let (first, second): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| in_first[i]);
    Ok((ds.select(&first), ds.select(&second)))
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.check_invariants()?;
    let h = &ds.header;
    let iv_bytes = if h.store_ivs { 4 * ds.len() } else { 0 };
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * ds.len() + iv_bytes);
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&h.version.to_le_bytes());
    out.push(h.key_id.to_byte());
    out.extend_from_slice(&h.key);
    out.push(h.rounds);
    out.extend_from_slice(&h.message_pair.p1.to_le_bytes());
    out.extend_from_slice(&h.message_pair.p2.to_le_bytes());
    out.extend_from_slice(&h.seed.to_le_bytes());
    out.extend_from_slice(&h.record_count.to_le_bytes());
    out.extend_from_slice(&h.class_counts[0].to_le_bytes());
    out.extend_from_slice(&h.class_counts[1].to_le_bytes());
    let (flags, fixed) = match h.iv_mode {
        IvMode::Random => (0, 0),
        IvMode::Fixed(v) => (FLAG_FIXED_IV, v),
    };
    out.push(flags | if h.store_ivs { FLAG_STORE_IVS } else { 0 });
    out.extend_from_slice(&fixed.to_le_bytes());
    debug_assert_eq!(out.len(), HEADER_LEN);
    for r in &ds.records {
        out.extend_from_slice(&from_bit_vector(&r.ciphertext).to_be_bytes());
        out.push(r.label.as_u8());
    }
    if let Some(ivs) = &ds.ivs {
        for iv in ivs {
            out.extend_from_slice(&iv.to_be_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = c.array("magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: DATASET_MAGIC,
            found: magic,
        });
    }
    let version = c.u16("version")?;
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: DATASET_VERSION,
        });
    }
    let key_id = KeyId::from_byte(c.u8("key id")?)?;
    let key: [u8; 8] = c.array("key")?;
    let rounds = c.u8("rounds")?;
    check_rounds(rounds as usize).map_err(|e| Error::Malformed(e.to_string()))?;
    let p1 = c.u32("message p1")?;
    let p2 = c.u32("message p2")?;
    let message_pair = MessagePair::new(p1, p2).map_err(|e| Error::Malformed(e.to_string()))?;
    let seed = c.u64("seed")?;
    let record_count = c.u64("record count")?;
    let class_counts = [c.u64("class 0 count")?, c.u64("class 1 count")?];
    let flags = c.u8("flags")?;
    let fixed = c.u32("fixed iv")?;
    if flags & !(FLAG_STORE_IVS | FLAG_FIXED_IV) != 0 {
        return Err(Error::Malformed(format!("unknown flag bits {flags:#04x}")));
    }
    let store_ivs = flags & FLAG_STORE_IVS != 0;
    let iv_mode = if flags & FLAG_FIXED_IV != 0 {
        IvMode::Fixed(fixed)
    } else {
        IvMode::Random
    };
    if class_counts[0].checked_add(class_counts[1]) != Some(record_count) {
        return Err(Error::Malformed(
            "per-class counts do not sum to record count".into(),
        ));
    }

    let n = usize::try_from(record_count)
        .map_err(|_| Error::Malformed("record count exceeds address space".into()))?;
    let payload = n
        .checked_mul(RECORD_LEN + if store_ivs { 4 } else { 0 })
        .ok_or_else(|| Error::Malformed("record count overflow".into()))?;
    let remaining = bytes.len() - c.pos;
    if remaining < payload {
        return Err(Error::Truncated(format!(
            "header declares {n} records ({payload} bytes) but {remaining} bytes follow"
        )));
    }
    if remaining > payload {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after payload",
            remaining - payload
        )));
    }

    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let ct = u32::from_be_bytes(c.array("ciphertext")?);
        let label = ClassLabel::from_u8(c.u8("label")?)?;
        records.push(DatasetRecord {
            ciphertext: to_bit_vector(ct),
            label,
        });
    }
    let ivs = if store_ivs {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(u32::from_be_bytes(c.array("iv")?));
        }
        Some(v)
    } else {
        None
    };
    let ds = Dataset {
        header: DatasetHeader {
            version,
            key_id,
            key,
            rounds,
            message_pair,
            seed,
            record_count,
            class_counts,
            store_ivs,
            iv_mode,
        },
        records,
        ivs,
    };
    ds.check_invariants()?;
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GeneratorConfig {
        let mut cfg = GeneratorConfig::new(NamedKey::k1(), 5, 5, seed);
        cfg.store_ivs = true;
        cfg
    }

    #[test]
    fn keys_match_table() {
        let (k1, k2) = default_keys();
        assert_eq!(
            k1.to_bytes(),
            [0x59, 0xfd, 0x06, 0x41, 0x5f, 0x53, 0xdb, 0x99]
        );
        assert_eq!(
            k2.to_bytes(),
            [0xfd, 0xfe, 0x9c, 0xa6, 0x10, 0x5c, 0xb9, 0xc7]
        );
        assert_ne!(k1, k2);
    }

    #[test]
    fn key_parsing() {
        assert_eq!(NamedKey::parse("K1").unwrap(), NamedKey::k1());
        assert_eq!(NamedKey::parse("fdfe9ca6105cb9c7").unwrap().id, KeyId::K2);
        let c = NamedKey::parse("0011223344556677").unwrap();
        assert_eq!(c.id, KeyId::Custom);
        assert_eq!(c.label(), "0011223344556677");
        assert!(NamedKey::parse("k3").is_err());
    }

    #[test]
    fn message_pair_requires_one_bit() {
        assert!(MessagePair::new(0, 1).is_ok());
        assert!(MessagePair::new(0x80000000, 0).is_ok());
        assert!(MessagePair::new(0, 3).is_err());
        assert!(MessagePair::new(5, 5).is_err());
    }

    #[test]
    fn bit_vector_is_msb_first() {
        assert_eq!(to_bit_vector(0).bits(), &[0u8; 32]);
        let one = to_bit_vector(1);
        assert_eq!(one.bits()[31], 1);
        assert!(one.bits()[..31].iter().all(|&b| b == 0));
        assert_eq!(to_bit_vector(0x8000_0000).bits()[0], 1);
    }

    #[test]
    fn bit_vector_bijection_on_low_half() {
        for hi in [0u32, 0xa5a5_0000, 0xffff_0000] {
            for lo in 0..=0xffffu32 {
                let x = hi | lo;
                assert_eq!(from_bit_vector(&to_bit_vector(x)), x);
            }
        }
    }

    #[test]
    fn generated_sets_are_balanced_and_deterministic() {
        let a = generate_dataset(&small(1)).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a.header.class_counts, [5, 5]);
        let b = generate_dataset(&small(1)).unwrap();
        assert_eq!(encode_dataset(&a).unwrap(), encode_dataset(&b).unwrap());
        let c = generate_dataset(&small(2)).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn every_record_decrypts_to_its_message() {
        let mut cfg = small(9);
        cfg.samples_per_class = 500;
        let ds = generate_dataset(&cfg).unwrap();
        let audit = audit_dataset(&ds).unwrap();
        assert_eq!(audit.checked, 1000);
        assert!(audit.passed());
    }

    #[test]
    fn audit_detects_flipped_label() {
        let mut ds = generate_dataset(&small(4)).unwrap();
        ds.records[3].label = match ds.records[3].label {
            ClassLabel::First => ClassLabel::Second,
            ClassLabel::Second => ClassLabel::First,
        };
        assert_eq!(audit_dataset(&ds).unwrap().mismatches, vec![3]);
    }

    #[test]
    fn audit_requires_ivs() {
        let mut cfg = small(4);
        cfg.store_ivs = false;
        let ds = generate_dataset(&cfg).unwrap();
        assert!(matches!(audit_dataset(&ds), Err(Error::Incompatible(_))));
    }

    #[test]
    fn fixed_iv_collapses_classes() {
        let mut cfg = small(4);
        cfg.iv_mode = IvMode::Fixed(0x1234_5678);
        cfg.samples_per_class = 50;
        let ds = generate_dataset(&cfg).unwrap();
        let mut distinct: Vec<u32> = ds
            .records
            .iter()
            .map(|r| from_bit_vector(&r.ciphertext))
            .collect();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 2);
        assert!(audit_dataset(&ds).unwrap().passed());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small(1);
        cfg.rounds = 0;
        assert!(matches!(
            generate_dataset(&cfg),
            Err(Error::InvalidRoundCount(0))
        ));
        let mut cfg = small(1);
        cfg.samples_per_class = 0;
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn save_load_roundtrip_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(3);
        cfg.store_ivs = false;
        let ds = generate_dataset(&cfg).unwrap();
        let path = dir.path().join("d.mcds");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(
            fs::metadata(&path).unwrap().len() as usize,
            HEADER_LEN + RECORD_LEN * 10
        );
        assert_eq!(load_dataset(&path).unwrap(), ds);

        let with_ivs = generate_dataset(&small(3)).unwrap();
        save_dataset(&with_ivs, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), with_ivs);
    }

    #[test]
    fn corrupt_files_give_distinct_errors() {
        let ds = generate_dataset(&small(3)).unwrap();
        let good = encode_dataset(&ds).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_dataset(&bad),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));

        // Claim 11 records (6 + 5) while only 10 are present.
        let mut bad = good.clone();
        bad[32..40].copy_from_slice(&11u64.to_le_bytes());
        bad[40..48].copy_from_slice(&6u64.to_le_bytes());
        assert!(matches!(decode_dataset(&bad), Err(Error::Truncated(_))));

        assert!(matches!(
            decode_dataset(&good[..20]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(
            decode_dataset(&good[..good.len() - 1]),
            Err(Error::Truncated(_))
        ));

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(decode_dataset(&bad), Err(Error::Malformed(_))));

        let mut bad = good.clone();
        bad[HEADER_LEN + 4] = 7;
        assert!(matches!(decode_dataset(&bad), Err(Error::Malformed(_))));
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let ds = generate_dataset(&small(8)).unwrap();
        let (a, b) = split_dataset(&ds, 0.8, 1).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(a.header.class_counts, [4, 4]);
        assert_eq!(b.header.class_counts, [1, 1]);
        let (a2, b2) = split_dataset(&ds, 0.8, 1).unwrap();
        assert_eq!((a, b), (a2, b2));
        assert!(split_dataset(&ds, 0.0, 1).is_err());
        assert!(split_dataset(&ds, 1.0, 1).is_err());
    }

    #[test]
    fn split_union_is_original_multiset() {
        let mut cfg = small(8);
        cfg.samples_per_class = 137;
        let ds = generate_dataset(&cfg).unwrap();
        let (a, b) = split_dataset(&ds, 0.37, 5).unwrap();
        let key = |r: &DatasetRecord, iv: u32| (from_bit_vector(&r.ciphertext), r.label, iv);
        let mut all: Vec<_> = ds
            .records
            .iter()
            .zip(ds.ivs.as_ref().unwrap())
            .map(|(r, &iv)| key(r, iv))
            .collect();
        let mut parts: Vec<_> = a
            .records
            .iter()
            .zip(a.ivs.as_ref().unwrap())
            .chain(b.records.iter().zip(b.ivs.as_ref().unwrap()))
            .map(|(r, &iv)| key(r, iv))
            .collect();
        all.sort();
        parts.sort();
        assert_eq!(all, parts);
        for part in [&a, &b] {
            let [c0, c1] = part.header.class_counts;
            assert!(c0.abs_diff(c1) <= 1);
        }
    }

    #[test]
    fn shuffled_labels_keep_balance() {
        let mut cfg = small(8);
        cfg.samples_per_class = 100;
        let ds = generate_dataset(&cfg).unwrap();
        let s = ds.with_shuffled_labels(3);
        assert_eq!(s.header.class_counts, ds.header.class_counts);
        assert_ne!(s.labels(), ds.labels());
        assert_eq!(
            s.records.iter().map(|r| r.ciphertext).collect::<Vec<_>>(),
            ds.records.iter().map(|r| r.ciphertext).collect::<Vec<_>>()
        );
    }
}
